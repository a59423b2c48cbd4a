//! The assembled classifier: backbone, superpixel pooling, and capsule
//! routing behind one config, with SGD updates and checkpointing.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{image_to_feature, Backbone, BackboneConfig, BackboneGrads, BackboneTrace};
use crate::capsroute::{
    class_probability, margin_loss_grad, route, routing_backward, CapsuleState, CapsuleWeights,
    MarginParams,
};
use crate::error::{Error, Result};
use crate::real::Real;
use crate::slic::{segment, Segmentation, SlicParams};
use crate::sppool::{tile_map, PoolPlan, SpFeatures};
use crate::tensorio::{read_tensor_from, write_tensor_to, Tensor};

/// Every knob of the pipeline. Serializes to flat JSON so config files
/// and checkpoint manifests stay hand-editable.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub input: usize,
    pub stages: Vec<(usize, usize)>,
    pub superpixels: usize,
    pub class_dim: usize,
    pub classes: usize,
    pub routing_iters: usize,
    pub m_plus: f64,
    pub m_minus: f64,
    pub lambda: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub val_fraction: f64,
    pub compactness: f64,
    pub slic_sigma: f64,
    pub slic_iterations: usize,
    pub caps_init: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> ModelConfig {
        ModelConfig {
            input: 64,
            stages: vec![(1, 16), (1, 32), (2, 64)],
            superpixels: 36,
            class_dim: 16,
            classes: 4,
            routing_iters: 3,
            m_plus: 0.9,
            m_minus: 0.1,
            lambda: 0.5,
            learning_rate: 2e-5,
            batch_size: 1,
            epochs: 120,
            val_fraction: 0.25,
            compactness: 0.1,
            slic_sigma: 0.0,
            slic_iterations: 10,
            caps_init: 0.1,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.superpixels == 0 {
            return Err(Error::invalid("superpixel count must be positive"));
        }
        if self.class_dim == 0 {
            return Err(Error::invalid("class vector size must be positive"));
        }
        if self.classes < 2 {
            return Err(Error::invalid("need at least two classes"));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::invalid("learning rate must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch size must be positive"));
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return Err(Error::invalid("validation fraction must be in (0, 1)"));
        }
        if self.routing_iters == 0 {
            return Err(Error::invalid("routing needs at least one iteration"));
        }
        self.backbone().validate()
    }

    pub fn backbone(&self) -> BackboneConfig {
        BackboneConfig {
            input: self.input,
            stages: self.stages.clone(),
        }
    }

    pub fn slic(&self) -> SlicParams {
        let mut p = SlicParams::new(self.superpixels);
        p.compactness = self.compactness;
        p.sigma = self.slic_sigma;
        p.iterations = self.slic_iterations;
        p
    }

    pub fn margin(&self) -> MarginParams {
        MarginParams {
            m_plus: self.m_plus,
            m_minus: self.m_minus,
            lambda: self.lambda,
        }
    }

    /// Channels entering the capsule layer.
    pub fn feature_channels(&self) -> usize {
        self.backbone().output_channels()
    }

    /// Size of the capsule transformation tensor alone.
    pub fn capsule_param_count(&self) -> usize {
        self.superpixels * self.classes * self.feature_channels() * self.class_dim
    }

    /// Exact trainable parameter count: conv kernels and biases plus the
    /// capsule transformation tensor.
    pub fn param_count(&self) -> usize {
        let mut total = 0;
        let mut in_ch = 3;
        for &(convs, out_ch) in &self.stages {
            for _ in 0..convs {
                total += out_ch * in_ch * 9 + out_ch;
                in_ch = out_ch;
            }
        }
        total + self.capsule_param_count()
    }
}

/// Per-sample state that never changes during training: the
/// segmentation of the input image and the pooling weights over it.
#[derive(Debug, Clone)]
pub struct SampleCache {
    pub seg: Segmentation,
    pub plan: PoolPlan,
}

/// Everything one forward pass produces, kept for the backward pass and
/// for rendering explanations.
#[derive(Debug, Clone)]
pub struct ModelForward<T: Real> {
    pub trace: BackboneTrace<T>,
    pub pooled: SpFeatures<T>,
    pub state: CapsuleState<T>,
    pub probs: Vec<T>,
}

/// The trainable pipeline.
#[derive(Debug, Clone)]
pub struct Model<T: Real> {
    pub config: ModelConfig,
    pub backbone: Backbone<T>,
    pub caps: CapsuleWeights<T>,
}

impl<T: Real> Model<T> {
    pub fn init(config: &ModelConfig) -> Result<Model<T>> {
        config.validate()?;
        let backbone = Backbone::init(&config.backbone(), config.seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(0xca25);
        let caps = CapsuleWeights::init(
            config.superpixels,
            config.classes,
            config.feature_channels(),
            config.class_dim,
            config.caps_init,
            &mut rng,
        );
        Ok(Model {
            config: config.clone(),
            backbone,
            caps,
        })
    }

    pub fn param_count(&self) -> usize {
        self.backbone.param_count() + self.caps.param_count()
    }

    /// Segments the image and precomputes pooling weights; reused across
    /// every epoch since neither depends on the trainable parameters.
    pub fn cache_for(&self, image: &crate::tensorio::Image) -> Result<SampleCache> {
        if image.height != self.config.input || image.width != self.config.input {
            return Err(Error::invalid(format!(
                "image {}x{} does not match configured input {}",
                image.height, image.width, self.config.input
            )));
        }
        let seg = segment(image, &self.config.slic())?;
        let grid = self.config.backbone().output_size();
        let assoc = tile_map(grid, grid, self.config.input, self.config.input)?;
        let plan = PoolPlan::new(&seg, &assoc)?;
        Ok(SampleCache { seg, plan })
    }

    pub fn forward(
        &self,
        image: &crate::tensorio::Image,
        cache: &SampleCache,
    ) -> Result<ModelForward<T>> {
        let input = image_to_feature::<T>(image)?;
        let trace = self.backbone.forward_trace(&input)?;
        let pooled = cache.plan.forward(&trace.output)?;
        let state = route(
            &pooled.values,
            &pooled.mask,
            &self.caps,
            self.config.routing_iters,
        )?;
        let probs = class_probability(state.outputs(), self.config.classes, self.config.class_dim);
        Ok(ModelForward {
            trace,
            pooled,
            state,
            probs,
        })
    }

    /// Loss and parameter gradients for one labeled sample.
    pub fn gradients(
        &self,
        forward: &ModelForward<T>,
        cache: &SampleCache,
        label: usize,
    ) -> Result<(T, ModelGrads<T>)> {
        let (loss, grad_v) = margin_loss_grad(
            forward.state.outputs(),
            self.config.classes,
            self.config.class_dim,
            label,
            &self.config.margin(),
        )?;
        let caps_grads = routing_backward(&forward.state, &self.caps, &grad_v)?;
        let grad_sp = SpFeatures {
            values: caps_grads.u,
            regions: forward.pooled.regions,
            channels: forward.pooled.channels,
            mask: forward.pooled.mask.clone(),
            image_h: forward.pooled.image_h,
            image_w: forward.pooled.image_w,
        };
        let grad_features = cache.plan.backward(&grad_sp)?;
        let backbone = self.backbone.backward(&forward.trace, &grad_features)?;
        Ok((
            loss,
            ModelGrads {
                backbone,
                caps: caps_grads.w,
            },
        ))
    }

    /// In-place SGD step: `p -= lr * g` across all parameters.
    pub fn apply(&mut self, grads: &ModelGrads<T>, lr: T) {
        for (si, stage) in self.backbone.stages.iter_mut().enumerate() {
            for (li, layer) in stage.iter_mut().enumerate() {
                let (gk, gb) = &grads.backbone.stages[si][li];
                for (w, g) in layer.kernels.iter_mut().zip(gk) {
                    *w -= lr * *g;
                }
                for (b, g) in layer.bias.iter_mut().zip(gb) {
                    *b -= lr * *g;
                }
            }
        }
        for (w, g) in self.caps.w.iter_mut().zip(&grads.caps) {
            *w -= lr * *g;
        }
    }

    /// Accumulate `other` into `into` (for minibatch averaging).
    pub fn accumulate(into: &mut ModelGrads<T>, other: &ModelGrads<T>) {
        for (si, stage) in other.backbone.stages.iter().enumerate() {
            for (li, (gk, gb)) in stage.iter().enumerate() {
                let (ak, ab) = &mut into.backbone.stages[si][li];
                for (a, g) in ak.iter_mut().zip(gk) {
                    *a += *g;
                }
                for (a, g) in ab.iter_mut().zip(gb) {
                    *a += *g;
                }
            }
        }
        for (a, g) in into.caps.iter_mut().zip(&other.caps) {
            *a += *g;
        }
    }
}

/// Gradients for every trainable tensor in the model.
#[derive(Debug, Clone)]
pub struct ModelGrads<T: Real> {
    pub backbone: BackboneGrads<T>,
    pub caps: Vec<T>,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    offset: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    epoch: usize,
    seed: u64,
    config: ModelConfig,
    tensors: Vec<TensorEntry>,
}

fn conv_to_tensor<T: Real>(kernels: &[T], oc: usize, ic: usize) -> Tensor {
    // memory is [oc][ky][kx][ic]; the file uses [oc][ic][ky][kx]
    let mut data = vec![0.0f32; kernels.len()];
    for o in 0..oc {
        for ky in 0..3 {
            for kx in 0..3 {
                for i in 0..ic {
                    let src = ((o * 3 + ky) * 3 + kx) * ic + i;
                    let dst = ((o * ic + i) * 3 + ky) * 3 + kx;
                    data[dst] = kernels[src].to_f32();
                }
            }
        }
    }
    Tensor {
        shape: vec![oc, ic, 3, 3],
        data,
    }
}

fn conv_from_tensor<T: Real>(t: &Tensor, oc: usize, ic: usize) -> Result<Vec<T>> {
    if t.shape != [oc, ic, 3, 3] {
        return Err(Error::format(format!(
            "kernel tensor shape {:?} does not match layer {}x{}x3x3",
            t.shape, oc, ic
        )));
    }
    let mut kernels = vec![T::zero(); t.data.len()];
    for o in 0..oc {
        for ky in 0..3 {
            for kx in 0..3 {
                for i in 0..ic {
                    let src = ((o * ic + i) * 3 + ky) * 3 + kx;
                    let dst = ((o * 3 + ky) * 3 + kx) * ic + i;
                    kernels[dst] = T::from_f32(t.data[src]);
                }
            }
        }
    }
    Ok(kernels)
}

impl<T: Real> Model<T> {
    /// Writes the checkpoint: a little-endian u64 manifest length, the
    /// JSON manifest, then the named tensors back to back; manifest
    /// offsets are relative to the start of the tensor section.
    pub fn save(&self, path: &Path, epoch: usize) -> Result<()> {
        let mut tensors: Vec<(String, Tensor)> = Vec::new();
        for (si, stage) in self.backbone.stages.iter().enumerate() {
            for (li, layer) in stage.iter().enumerate() {
                tensors.push((
                    format!("backbone.stage{si}.conv{li}.kernels"),
                    conv_to_tensor(&layer.kernels, layer.out_channels, layer.in_channels),
                ));
                tensors.push((
                    format!("backbone.stage{si}.conv{li}.bias"),
                    Tensor {
                        shape: vec![layer.out_channels],
                        data: layer.bias.iter().map(|&b| b.to_f32()).collect(),
                    },
                ));
            }
        }
        tensors.push((
            "caps.W".to_string(),
            Tensor {
                shape: vec![
                    self.caps.inputs,
                    self.caps.classes,
                    self.caps.out_dim,
                    self.caps.in_dim,
                ],
                data: self.caps.w.iter().map(|&w| w.to_f32()).collect(),
            },
        ));

        let mut entries = Vec::with_capacity(tensors.len());
        let mut offset = 0u64;
        for (name, t) in &tensors {
            entries.push(TensorEntry {
                name: name.clone(),
                offset,
            });
            // record size: magic + rank + dims + payload
            offset += (4 + 4 + 4 * t.shape.len() + 4 * t.data.len()) as u64;
        }
        let manifest = Manifest {
            epoch,
            seed: self.config.seed,
            config: self.config.clone(),
            tensors: entries,
        };
        let manifest_bytes = serde_json::to_vec(&manifest)
            .map_err(|e| Error::format(format!("manifest encoding failed: {e}")))?;
        let mut out = BufWriter::new(File::create(path)?);
        out.write_all(&(manifest_bytes.len() as u64).to_le_bytes())?;
        out.write_all(&manifest_bytes)?;
        for (_, t) in &tensors {
            write_tensor_to(&mut out, t)?;
        }
        out.flush()?;
        Ok(())
    }

    /// Reads a checkpoint written by [`Model::save`]; returns the model
    /// and the epoch it was saved at.
    pub fn load(path: &Path) -> Result<(Model<T>, usize)> {
        let mut input = BufReader::new(File::open(path)?);
        let mut len_bytes = [0u8; 8];
        input.read_exact(&mut len_bytes)?;
        let manifest_len = u64::from_le_bytes(len_bytes) as usize;
        let mut manifest_bytes = vec![0u8; manifest_len];
        input.read_exact(&mut manifest_bytes)?;
        let manifest: Manifest = serde_json::from_slice(&manifest_bytes)
            .map_err(|e| Error::format(format!("manifest decoding failed: {e}")))?;
        let mut model = Model::<T>::init(&manifest.config)?;
        let mut tensors = std::collections::BTreeMap::new();
        for entry in &manifest.tensors {
            let t = read_tensor_from(&mut input)?;
            tensors.insert(entry.name.clone(), t);
        }
        for (si, stage) in model.backbone.stages.iter_mut().enumerate() {
            for (li, layer) in stage.iter_mut().enumerate() {
                let kname = format!("backbone.stage{si}.conv{li}.kernels");
                let bname = format!("backbone.stage{si}.conv{li}.bias");
                let kt = tensors
                    .get(&kname)
                    .ok_or_else(|| Error::format(format!("checkpoint is missing {kname}")))?;
                layer.kernels = conv_from_tensor(kt, layer.out_channels, layer.in_channels)?;
                let bt = tensors
                    .get(&bname)
                    .ok_or_else(|| Error::format(format!("checkpoint is missing {bname}")))?;
                if bt.shape != [layer.out_channels] {
                    return Err(Error::format(format!("bias tensor shape mismatch in {bname}")));
                }
                layer.bias = bt.data.iter().map(|&b| T::from_f32(b)).collect();
            }
        }
        let wt = tensors
            .get("caps.W")
            .ok_or_else(|| Error::format("checkpoint is missing caps.W"))?;
        if wt.shape
            != [
                model.caps.inputs,
                model.caps.classes,
                model.caps.out_dim,
                model.caps.in_dim,
            ]
        {
            return Err(Error::format("caps.W shape does not match config"));
        }
        model.caps.w = wt.data.iter().map(|&w| T::from_f32(w)).collect();
        Ok((model, manifest.epoch))
    }
}
