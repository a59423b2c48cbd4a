//! Small trainable convolutional feature extractor.
//!
//! Stages of 3x3 same-convolutions with ReLU, each followed by a 2x2 max
//! pool, turn a square RGB image into a coarse feature grid (64x64 input
//! with the default stages gives 8x8x64). Forward passes record enough
//! state for an exact hand-written backward pass; there is no autodiff.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::real::Real;
use crate::sppool::FeatureMap;
use crate::tensorio::{ColorSpace, Image};

/// One 3x3 convolution with bias and ReLU, stride 1, zero padding 1.
/// Kernel layout is `[out_channel][ky][kx][in_channel]` so the innermost
/// products run over contiguous input channels.
#[derive(Debug, Clone)]
pub struct ConvLayer<T: Real> {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernels: Vec<T>,
    pub bias: Vec<T>,
}

/// Gradients produced by [`conv_backward`].
#[derive(Debug, Clone)]
pub struct ConvGrads<T: Real> {
    pub input: FeatureMap<T>,
    pub kernels: Vec<T>,
    pub bias: Vec<T>,
}

impl<T: Real> ConvLayer<T> {
    /// He-uniform initialized layer: weights from U(-b, b) with
    /// b = sqrt(6 / fan_in), zero bias.
    pub fn init(in_channels: usize, out_channels: usize, rng: &mut ChaCha8Rng) -> ConvLayer<T> {
        let fan_in = (in_channels * 9) as f64;
        let bound = (6.0 / fan_in).sqrt();
        let kernels = (0..out_channels * 9 * in_channels)
            .map(|_| T::from_f64(rng.gen_range(-bound..bound)))
            .collect();
        ConvLayer {
            in_channels,
            out_channels,
            kernels,
            bias: vec![T::zero(); out_channels],
        }
    }

    pub fn param_count(&self) -> usize {
        self.kernels.len() + self.bias.len()
    }

    fn kernel_at(&self, oc: usize, ky: usize, kx: usize) -> &[T] {
        let base = ((oc * 3 + ky) * 3 + kx) * self.in_channels;
        &self.kernels[base..base + self.in_channels]
    }
}

/// Same-convolution with ReLU. The returned map is the post-activation
/// output; [`conv_backward`] reads the ReLU gate off it.
pub fn conv_forward<T: Real>(input: &FeatureMap<T>, layer: &ConvLayer<T>) -> Result<FeatureMap<T>> {
    if input.channels != layer.in_channels {
        return Err(Error::invalid(format!(
            "input has {} channels, layer expects {}",
            input.channels, layer.in_channels
        )));
    }
    let (h, w) = (input.height, input.width);
    let ic = layer.in_channels;
    let oc_n = layer.out_channels;
    let mut out = FeatureMap::new(h, w, oc_n);
    for y in 0..h {
        for x in 0..w {
            let dst = (y * w + x) * oc_n;
            for oc in 0..oc_n {
                let mut acc = layer.bias[oc];
                for ky in 0..3usize {
                    let iy = y + ky;
                    if iy < 1 || iy > h {
                        continue;
                    }
                    let iy = iy - 1;
                    for kx in 0..3usize {
                        let ix = x + kx;
                        if ix < 1 || ix > w {
                            continue;
                        }
                        let ix = ix - 1;
                        let src = &input.data[(iy * w + ix) * ic..(iy * w + ix + 1) * ic];
                        let ker = layer.kernel_at(oc, ky, kx);
                        let mut dot = T::zero();
                        for c in 0..ic {
                            dot += src[c] * ker[c];
                        }
                        acc += dot;
                    }
                }
                out.data[dst + oc] = if acc > T::zero() { acc } else { T::zero() };
            }
        }
    }
    Ok(out)
}

/// Exact adjoint of [`conv_forward`], gating the incoming gradient by the
/// ReLU mask recovered from the forward output.
pub fn conv_backward<T: Real>(
    input: &FeatureMap<T>,
    output: &FeatureMap<T>,
    layer: &ConvLayer<T>,
    grad_out: &FeatureMap<T>,
) -> Result<ConvGrads<T>> {
    if grad_out.height != output.height
        || grad_out.width != output.width
        || grad_out.channels != output.channels
        || output.channels != layer.out_channels
        || input.channels != layer.in_channels
    {
        return Err(Error::invalid("gradient shape does not match layer shapes"));
    }
    let (h, w) = (input.height, input.width);
    let ic = layer.in_channels;
    let oc_n = layer.out_channels;
    let mut grads = ConvGrads {
        input: FeatureMap::new(h, w, ic),
        kernels: vec![T::zero(); layer.kernels.len()],
        bias: vec![T::zero(); oc_n],
    };
    for y in 0..h {
        for x in 0..w {
            let at = (y * w + x) * oc_n;
            for oc in 0..oc_n {
                if output.data[at + oc] <= T::zero() {
                    continue;
                }
                let g = grad_out.data[at + oc];
                if g == T::zero() {
                    continue;
                }
                grads.bias[oc] += g;
                for ky in 0..3usize {
                    let iy = y + ky;
                    if iy < 1 || iy > h {
                        continue;
                    }
                    let iy = iy - 1;
                    for kx in 0..3usize {
                        let ix = x + kx;
                        if ix < 1 || ix > w {
                            continue;
                        }
                        let ix = ix - 1;
                        let src = (iy * w + ix) * ic;
                        let kbase = ((oc * 3 + ky) * 3 + kx) * ic;
                        for c in 0..ic {
                            grads.kernels[kbase + c] += g * input.data[src + c];
                            grads.input.data[src + c] += g * layer.kernels[kbase + c];
                        }
                    }
                }
            }
        }
    }
    Ok(grads)
}

/// 2x2 max pool. `argmax` stores, per output element, the flat index into
/// the input data of the element that won; ties go to the first element
/// in scan order.
pub fn maxpool_forward<T: Real>(input: &FeatureMap<T>) -> Result<(FeatureMap<T>, Vec<u32>)> {
    if input.height % 2 != 0 || input.width % 2 != 0 {
        return Err(Error::invalid(format!(
            "max pool needs even dimensions, got {}x{}",
            input.height, input.width
        )));
    }
    let (h, w, k) = (input.height / 2, input.width / 2, input.channels);
    let mut out = FeatureMap::new(h, w, k);
    let mut argmax = vec![0u32; h * w * k];
    for y in 0..h {
        for x in 0..w {
            for c in 0..k {
                let mut best_idx = ((2 * y) * input.width + 2 * x) * k + c;
                let mut best = input.data[best_idx];
                for dy in 0..2usize {
                    for dx in 0..2usize {
                        let idx = ((2 * y + dy) * input.width + 2 * x + dx) * k + c;
                        if input.data[idx] > best {
                            best = input.data[idx];
                            best_idx = idx;
                        }
                    }
                }
                let at = (y * w + x) * k + c;
                out.data[at] = best;
                argmax[at] = best_idx as u32;
            }
        }
    }
    Ok((out, argmax))
}

/// Routes each output gradient back to the input element that produced
/// the max.
pub fn maxpool_backward<T: Real>(
    grad_out: &FeatureMap<T>,
    argmax: &[u32],
    input_h: usize,
    input_w: usize,
) -> Result<FeatureMap<T>> {
    if grad_out.data.len() != argmax.len() {
        return Err(Error::invalid("argmax length does not match gradient"));
    }
    let mut grad_in = FeatureMap::new(input_h, input_w, grad_out.channels);
    for (g, &idx) in grad_out.data.iter().zip(argmax) {
        grad_in.data[idx as usize] += *g;
    }
    Ok(grad_in)
}

/// Shape of the extractor: square input size and a list of
/// (convolutions, channels) stages, each stage ending in a 2x2 max pool.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BackboneConfig {
    pub input: usize,
    pub stages: Vec<(usize, usize)>,
}

impl Default for BackboneConfig {
    fn default() -> BackboneConfig {
        BackboneConfig {
            input: 64,
            stages: vec![(1, 16), (1, 32), (2, 64)],
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input == 0 {
            return Err(Error::invalid("input size must be positive"));
        }
        let halvings = 1usize << self.stages.len();
        if self.input % halvings != 0 {
            return Err(Error::invalid(format!(
                "input {} is not divisible by 2^{} stages",
                self.input,
                self.stages.len()
            )));
        }
        if self.stages.iter().any(|&(convs, ch)| convs == 0 || ch == 0) {
            return Err(Error::invalid("stages need at least one conv and one channel"));
        }
        Ok(())
    }

    /// Side length of the output grid.
    pub fn output_size(&self) -> usize {
        self.input >> self.stages.len()
    }

    /// Channels of the output grid (3 when there are no stages: the
    /// normalized image passes through untouched).
    pub fn output_channels(&self) -> usize {
        self.stages.last().map_or(3, |&(_, ch)| ch)
    }
}

/// The configured stack of conv stages.
#[derive(Debug, Clone)]
pub struct Backbone<T: Real> {
    pub config: BackboneConfig,
    pub stages: Vec<Vec<ConvLayer<T>>>,
}

/// Everything the backward pass needs from one forward pass: the input
/// of every convolution, its post-ReLU output, and each pool's argmax.
#[derive(Debug, Clone)]
pub struct BackboneTrace<T: Real> {
    conv_inputs: Vec<Vec<FeatureMap<T>>>,
    conv_outputs: Vec<Vec<FeatureMap<T>>>,
    pool_argmax: Vec<Vec<u32>>,
    pool_input_dims: Vec<(usize, usize)>,
    pub output: FeatureMap<T>,
}

impl<T: Real> BackboneTrace<T> {
    /// Which ReLU units fired and which pool cells won. Two forward
    /// passes with the same pattern lie on the same linear piece of the
    /// network, which makes finite differences between them exact.
    pub fn activation_pattern(&self) -> (Vec<bool>, Vec<u32>) {
        let gates = self
            .conv_outputs
            .iter()
            .flatten()
            .flat_map(|fm| fm.data.iter().map(|&y| y > T::zero()))
            .collect();
        let pools = self.pool_argmax.iter().flatten().copied().collect();
        (gates, pools)
    }
}

/// Parameter and input gradients for the whole stack, mirroring the
/// stage/layer nesting of [`Backbone::stages`].
#[derive(Debug, Clone)]
pub struct BackboneGrads<T: Real> {
    pub stages: Vec<Vec<(Vec<T>, Vec<T>)>>,
    pub input: FeatureMap<T>,
}

impl<T: Real> Backbone<T> {
    pub fn init(config: &BackboneConfig, seed: u64) -> Result<Backbone<T>> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(0xbac0);
        let mut stages = Vec::with_capacity(config.stages.len());
        let mut in_ch = 3;
        for &(convs, out_ch) in &config.stages {
            let mut layers = Vec::with_capacity(convs);
            for _ in 0..convs {
                layers.push(ConvLayer::init(in_ch, out_ch, &mut rng));
                in_ch = out_ch;
            }
            stages.push(layers);
        }
        Ok(Backbone {
            config: config.clone(),
            stages,
        })
    }

    pub fn param_count(&self) -> usize {
        self.stages
            .iter()
            .flatten()
            .map(ConvLayer::param_count)
            .sum()
    }

    /// Forward pass keeping the intermediate state for [`Backbone::backward`].
    pub fn forward_trace(&self, input: &FeatureMap<T>) -> Result<BackboneTrace<T>> {
        if input.height != self.config.input || input.width != self.config.input {
            return Err(Error::invalid(format!(
                "input {}x{} does not match configured size {}",
                input.height, input.width, self.config.input
            )));
        }
        if input.channels != 3 {
            return Err(Error::invalid("backbone expects 3 input channels"));
        }
        let mut current = input.clone();
        let mut conv_inputs = Vec::new();
        let mut conv_outputs = Vec::new();
        let mut pool_argmax = Vec::new();
        let mut pool_input_dims = Vec::new();
        for stage in &self.stages {
            let mut ins = Vec::new();
            let mut outs = Vec::new();
            for layer in stage {
                let out = conv_forward(&current, layer)?;
                ins.push(current);
                outs.push(out.clone());
                current = out;
            }
            pool_input_dims.push((current.height, current.width));
            let (pooled, argmax) = maxpool_forward(&current)?;
            conv_inputs.push(ins);
            conv_outputs.push(outs);
            pool_argmax.push(argmax);
            current = pooled;
        }
        Ok(BackboneTrace {
            conv_inputs,
            conv_outputs,
            pool_argmax,
            pool_input_dims,
            output: current,
        })
    }

    /// Forward pass without trace state.
    pub fn forward(&self, input: &FeatureMap<T>) -> Result<FeatureMap<T>> {
        Ok(self.forward_trace(input)?.output)
    }

    /// Exact backward pass through every stage, returning per-layer
    /// kernel and bias gradients plus the gradient at the image.
    pub fn backward(
        &self,
        trace: &BackboneTrace<T>,
        grad_out: &FeatureMap<T>,
    ) -> Result<BackboneGrads<T>> {
        let mut grad = grad_out.clone();
        let mut stage_grads: Vec<Vec<(Vec<T>, Vec<T>)>> = Vec::with_capacity(self.stages.len());
        for (si, stage) in self.stages.iter().enumerate().rev() {
            let (ph, pw) = trace.pool_input_dims[si];
            grad = maxpool_backward(&grad, &trace.pool_argmax[si], ph, pw)?;
            let mut layer_grads = Vec::with_capacity(stage.len());
            for (li, layer) in stage.iter().enumerate().rev() {
                let grads = conv_backward(
                    &trace.conv_inputs[si][li],
                    &trace.conv_outputs[si][li],
                    layer,
                    &grad,
                )?;
                layer_grads.push((grads.kernels, grads.bias));
                grad = grads.input;
            }
            layer_grads.reverse();
            stage_grads.push(layer_grads);
        }
        stage_grads.reverse();
        Ok(BackboneGrads {
            stages: stage_grads,
            input: grad,
        })
    }
}

/// Normalizes an RGB image into a 3-channel feature map in [0, 1].
pub fn image_to_feature<T: Real>(image: &Image) -> Result<FeatureMap<T>> {
    if image.space != ColorSpace::Rgb8 {
        return Err(Error::invalid("expected an RGB image"));
    }
    let data = image
        .data
        .iter()
        .map(|&v| T::from_f64(v as f64 / 255.0))
        .collect();
    Ok(FeatureMap::from_data(image.height, image.width, 3, data))
}
