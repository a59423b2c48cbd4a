//! Capsule layer: per-superpixel prediction vectors routed to class
//! capsules by agreement.
//!
//! Each superpixel's feature vector is mapped through a learned matrix
//! per class into a prediction; dynamic routing then iterates coupling
//! coefficients toward predictions that agree with the class output,
//! squashing sums so vector length reads as probability. The backward
//! pass differentiates the whole unrolled routing loop, not just its
//! last iteration.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::real::Real;

/// Transformation tensor: one `out_dim x in_dim` matrix per
/// (superpixel, class) pair, laid out `[input][class][out][in]`.
#[derive(Debug, Clone, PartialEq)]
pub struct CapsuleWeights<T: Real> {
    pub inputs: usize,
    pub classes: usize,
    pub in_dim: usize,
    pub out_dim: usize,
    pub w: Vec<T>,
}

impl<T: Real> CapsuleWeights<T> {
    /// Uniformly initialized weights on (-bound, bound).
    pub fn init(
        inputs: usize,
        classes: usize,
        in_dim: usize,
        out_dim: usize,
        bound: f64,
        rng: &mut ChaCha8Rng,
    ) -> CapsuleWeights<T> {
        let w = (0..inputs * classes * in_dim * out_dim)
            .map(|_| T::from_f64(rng.gen_range(-bound..bound)))
            .collect();
        CapsuleWeights {
            inputs,
            classes,
            in_dim,
            out_dim,
            w,
        }
    }

    pub fn zeros(inputs: usize, classes: usize, in_dim: usize, out_dim: usize) -> CapsuleWeights<T> {
        CapsuleWeights {
            inputs,
            classes,
            in_dim,
            out_dim,
            w: vec![T::zero(); inputs * classes * in_dim * out_dim],
        }
    }

    pub fn param_count(&self) -> usize {
        self.w.len()
    }

    /// The `out_dim x in_dim` block for pair (i, j), rows contiguous.
    pub fn block(&self, i: usize, j: usize) -> &[T] {
        let size = self.out_dim * self.in_dim;
        let base = (i * self.classes + j) * size;
        &self.w[base..base + size]
    }
}

/// Per-iteration routing snapshot: coupling coefficients, pre-squash
/// sums, and squashed outputs.
#[derive(Debug, Clone)]
pub struct RoutingIter<T: Real> {
    pub c: Vec<T>,
    pub s: Vec<T>,
    pub v: Vec<T>,
}

/// Complete routing record for one forward pass; everything the exact
/// backward pass and the contribution maps need.
#[derive(Debug, Clone)]
pub struct CapsuleState<T: Real> {
    pub u: Vec<T>,
    pub u_hat: Vec<T>,
    pub b: Vec<T>,
    pub mask: Vec<bool>,
    pub trace: Vec<RoutingIter<T>>,
    pub inputs: usize,
    pub classes: usize,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl<T: Real> CapsuleState<T> {
    /// Final class capsule outputs, `classes x out_dim`.
    pub fn outputs(&self) -> &[T] {
        &self.trace.last().expect("routing ran at least once").v
    }

    /// Final coupling coefficients, `inputs x classes`.
    pub fn coupling(&self) -> &[T] {
        &self.trace.last().expect("routing ran at least once").c
    }

    pub fn prediction(&self, i: usize, j: usize) -> &[T] {
        let base = (i * self.classes + j) * self.out_dim;
        &self.u_hat[base..base + self.out_dim]
    }
}

/// û_ij = W_ij u_i; masked rows yield zero predictions.
pub fn predict_vectors<T: Real>(
    u: &[T],
    mask: &[bool],
    w: &CapsuleWeights<T>,
) -> Result<Vec<T>> {
    if u.len() != w.inputs * w.in_dim || mask.len() != w.inputs {
        return Err(Error::invalid("input shape does not match capsule weights"));
    }
    let (s, j_n, k0, k1) = (w.inputs, w.classes, w.in_dim, w.out_dim);
    let mut u_hat = vec![T::zero(); s * j_n * k1];
    for i in 0..s {
        if !mask[i] {
            continue;
        }
        let ui = &u[i * k0..(i + 1) * k0];
        for j in 0..j_n {
            let block = w.block(i, j);
            let dst = &mut u_hat[(i * j_n + j) * k1..(i * j_n + j + 1) * k1];
            for q1 in 0..k1 {
                let row = &block[q1 * k0..(q1 + 1) * k0];
                let mut acc = T::zero();
                for q0 in 0..k0 {
                    acc += row[q0] * ui[q0];
                }
                dst[q1] = acc;
            }
        }
    }
    Ok(u_hat)
}

/// v = (‖s‖² / (1 + ‖s‖²)) · s / ‖s‖, with squash(0) = 0.
pub fn squash<T: Real>(s: &[T]) -> Vec<T> {
    let norm_sq: T = s.iter().map(|&x| x * x).sum();
    if norm_sq == T::zero() {
        return vec![T::zero(); s.len()];
    }
    let norm = norm_sq.sqrt();
    let scale = norm / (T::one() + norm_sq);
    s.iter().map(|&x| x * scale).collect()
}

/// Iterates routing-by-agreement for `iterations` rounds over the given
/// predictions, recording every intermediate snapshot.
pub fn dynamic_routing<T: Real>(
    u_hat: &[T],
    mask: &[bool],
    classes: usize,
    out_dim: usize,
    iterations: usize,
) -> Result<(Vec<RoutingIter<T>>, Vec<T>)> {
    let inputs = mask.len();
    if u_hat.len() != inputs * classes * out_dim {
        return Err(Error::invalid("prediction tensor shape mismatch"));
    }
    if iterations == 0 {
        return Err(Error::invalid("routing needs at least one iteration"));
    }
    let mut b = vec![T::zero(); inputs * classes];
    let mut trace = Vec::with_capacity(iterations);
    for t in 0..iterations {
        let mut c = vec![T::zero(); inputs * classes];
        for i in 0..inputs {
            if !mask[i] {
                continue;
            }
            let row = &b[i * classes..(i + 1) * classes];
            let max = row.iter().cloned().fold(T::neg_infinity(), T::max);
            let mut denom = T::zero();
            for j in 0..classes {
                let e = (row[j] - max).exp();
                c[i * classes + j] = e;
                denom += e;
            }
            for j in 0..classes {
                c[i * classes + j] /= denom;
            }
        }
        let mut s = vec![T::zero(); classes * out_dim];
        for i in 0..inputs {
            for j in 0..classes {
                let cij = c[i * classes + j];
                if cij == T::zero() {
                    continue;
                }
                let pred = &u_hat[(i * classes + j) * out_dim..(i * classes + j + 1) * out_dim];
                let dst = &mut s[j * out_dim..(j + 1) * out_dim];
                for q in 0..out_dim {
                    dst[q] += cij * pred[q];
                }
            }
        }
        let mut v = vec![T::zero(); classes * out_dim];
        for j in 0..classes {
            let vj = squash(&s[j * out_dim..(j + 1) * out_dim]);
            v[j * out_dim..(j + 1) * out_dim].copy_from_slice(&vj);
        }
        let last = t + 1 == iterations;
        if !last {
            for i in 0..inputs {
                if !mask[i] {
                    continue;
                }
                for j in 0..classes {
                    let pred =
                        &u_hat[(i * classes + j) * out_dim..(i * classes + j + 1) * out_dim];
                    let vj = &v[j * out_dim..(j + 1) * out_dim];
                    let mut dot = T::zero();
                    for q in 0..out_dim {
                        dot += pred[q] * vj[q];
                    }
                    b[i * classes + j] += dot;
                }
            }
        }
        trace.push(RoutingIter { c, s, v });
    }
    Ok((trace, b))
}

/// Prediction plus routing in one call, keeping the full state.
pub fn route<T: Real>(
    u: &[T],
    mask: &[bool],
    w: &CapsuleWeights<T>,
    iterations: usize,
) -> Result<CapsuleState<T>> {
    let u_hat = predict_vectors(u, mask, w)?;
    let (trace, b) = dynamic_routing(&u_hat, mask, w.classes, w.out_dim, iterations)?;
    Ok(CapsuleState {
        u: u.to_vec(),
        u_hat,
        b,
        mask: mask.to_vec(),
        trace,
        inputs: w.inputs,
        classes: w.classes,
        in_dim: w.in_dim,
        out_dim: w.out_dim,
    })
}

/// Class probabilities: the norm of each output capsule.
pub fn class_probability<T: Real>(v: &[T], classes: usize, out_dim: usize) -> Vec<T> {
    (0..classes)
        .map(|j| {
            v[j * out_dim..(j + 1) * out_dim]
                .iter()
                .map(|&x| x * x)
                .sum::<T>()
                .sqrt()
        })
        .collect()
}

/// Highest-probability class, lowest index on ties.
pub fn predicted_class<T: Real>(probs: &[T]) -> usize {
    let mut best = 0;
    for (j, &p) in probs.iter().enumerate() {
        if p > probs[best] {
            best = j;
        }
    }
    best
}

/// Hinge constants of [`margin_loss`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MarginParams {
    pub m_plus: f64,
    pub m_minus: f64,
    pub lambda: f64,
}

impl Default for MarginParams {
    fn default() -> MarginParams {
        MarginParams {
            m_plus: 0.9,
            m_minus: 0.1,
            lambda: 0.5,
        }
    }
}

/// Two-sided margin loss on capsule lengths.
pub fn margin_loss<T: Real>(
    v: &[T],
    classes: usize,
    out_dim: usize,
    target: usize,
    params: &MarginParams,
) -> Result<T> {
    Ok(margin_loss_grad(v, classes, out_dim, target, params)?.0)
}

/// Margin loss together with its gradient at `v`. Zero-length capsules
/// sit on the hinge corner; their subgradient is taken as zero.
pub fn margin_loss_grad<T: Real>(
    v: &[T],
    classes: usize,
    out_dim: usize,
    target: usize,
    params: &MarginParams,
) -> Result<(T, Vec<T>)> {
    if target >= classes {
        return Err(Error::invalid(format!(
            "target {target} out of range for {classes} classes"
        )));
    }
    if v.len() != classes * out_dim {
        return Err(Error::invalid("capsule output shape mismatch"));
    }
    let m_plus = T::from_f64(params.m_plus);
    let m_minus = T::from_f64(params.m_minus);
    let lambda = T::from_f64(params.lambda);
    let probs = class_probability(v, classes, out_dim);
    let mut loss = T::zero();
    let mut grad = vec![T::zero(); v.len()];
    for j in 0..classes {
        let p = probs[j];
        // dL/dv_j = (dL/dp) * v_j / p
        let dp = if j == target {
            let gap = m_plus - p;
            if gap > T::zero() {
                loss += gap * gap;
                -(gap + gap)
            } else {
                T::zero()
            }
        } else {
            let over = p - m_minus;
            if over > T::zero() {
                loss += lambda * over * over;
                lambda * (over + over)
            } else {
                T::zero()
            }
        };
        if dp != T::zero() && p > T::zero() {
            let scale = dp / p;
            for q in 0..out_dim {
                grad[j * out_dim + q] = scale * v[j * out_dim + q];
            }
        }
    }
    Ok((loss, grad))
}

/// Gradients flowing out of the routing layer.
#[derive(Debug, Clone)]
pub struct CapsuleGrads<T: Real> {
    pub u: Vec<T>,
    pub w: Vec<T>,
}

fn squash_backward<T: Real>(s: &[T], grad_v: &[T], out: &mut [T]) {
    let norm_sq: T = s.iter().map(|&x| x * x).sum();
    if norm_sq == T::zero() {
        out.fill(T::zero());
        return;
    }
    let norm = norm_sq.sqrt();
    let one = T::one();
    let denom = one + norm_sq;
    let scale = norm / denom;
    let dscale_dn = (one - norm_sq) / (denom * denom);
    let s_dot_g: T = s.iter().zip(grad_v).map(|(&a, &b)| a * b).sum();
    let coef = dscale_dn * s_dot_g / norm;
    for q in 0..s.len() {
        out[q] = scale * grad_v[q] + coef * s[q];
    }
}

/// Exact gradient through the full unrolled routing loop: softmax,
/// weighted sums, squash, and the logit updates between iterations are
/// all differentiated, then the prediction step maps gradients onto the
/// inputs and the transformation tensor.
pub fn routing_backward<T: Real>(
    state: &CapsuleState<T>,
    w: &CapsuleWeights<T>,
    grad_v: &[T],
) -> Result<CapsuleGrads<T>> {
    let (s_n, j_n, k0, k1) = (state.inputs, state.classes, state.in_dim, state.out_dim);
    if grad_v.len() != j_n * k1 {
        return Err(Error::invalid("output gradient shape mismatch"));
    }
    if w.inputs != s_n || w.classes != j_n || w.in_dim != k0 || w.out_dim != k1 {
        return Err(Error::invalid("weights do not match routing state"));
    }
    let r = state.trace.len();
    let mut g_u_hat = vec![T::zero(); s_n * j_n * k1];
    let mut g_v = grad_v.to_vec();
    // gradient carried into b^t from the identity part of b^{t+1} = b^t + ...
    let mut g_b_carry = vec![T::zero(); s_n * j_n];
    let mut g_s = vec![T::zero(); j_n * k1];
    for t in (0..r).rev() {
        let iter = &state.trace[t];
        for j in 0..j_n {
            squash_backward(
                &iter.s[j * k1..(j + 1) * k1],
                &g_v[j * k1..(j + 1) * k1],
                &mut g_s[j * k1..(j + 1) * k1],
            );
        }
        // s_j = sum_i c_ij u_hat_ij
        let mut g_c = vec![T::zero(); s_n * j_n];
        for i in 0..s_n {
            if !state.mask[i] {
                continue;
            }
            for j in 0..j_n {
                let at = i * j_n + j;
                let pred = &state.u_hat[at * k1..(at + 1) * k1];
                let gs = &g_s[j * k1..(j + 1) * k1];
                let mut dot = T::zero();
                let cij = iter.c[at];
                let ghat = &mut g_u_hat[at * k1..(at + 1) * k1];
                for q in 0..k1 {
                    dot += pred[q] * gs[q];
                    ghat[q] += cij * gs[q];
                }
                g_c[at] = dot;
            }
        }
        // c_i = softmax(b_i) rowwise
        let mut g_b = g_b_carry;
        for i in 0..s_n {
            if !state.mask[i] {
                continue;
            }
            let c_row = &iter.c[i * j_n..(i + 1) * j_n];
            let gc_row = &g_c[i * j_n..(i + 1) * j_n];
            let inner: T = c_row.iter().zip(gc_row).map(|(&a, &b)| a * b).sum();
            for j in 0..j_n {
                g_b[i * j_n + j] += c_row[j] * (gc_row[j] - inner);
            }
        }
        if t > 0 {
            // b^t = b^{t-1} + u_hat . v^{t-1}
            let prev_v = &state.trace[t - 1].v;
            g_v.fill(T::zero());
            for i in 0..s_n {
                if !state.mask[i] {
                    continue;
                }
                for j in 0..j_n {
                    let at = i * j_n + j;
                    let gb = g_b[at];
                    if gb == T::zero() {
                        continue;
                    }
                    let pred = &state.u_hat[at * k1..(at + 1) * k1];
                    let ghat = &mut g_u_hat[at * k1..(at + 1) * k1];
                    for q in 0..k1 {
                        ghat[q] += gb * prev_v[j * k1 + q];
                        g_v[j * k1 + q] += gb * pred[q];
                    }
                }
            }
            g_b_carry = g_b;
        } else {
            g_b_carry = g_b;
            g_b_carry.fill(T::zero());
        }
    }
    // u_hat_ij = W_ij u_i
    let mut g_u = vec![T::zero(); s_n * k0];
    let mut g_w = vec![T::zero(); w.w.len()];
    for i in 0..s_n {
        if !state.mask[i] {
            continue;
        }
        let ui = &state.u[i * k0..(i + 1) * k0];
        let gu = &mut g_u[i * k0..(i + 1) * k0];
        for j in 0..j_n {
            let at = i * j_n + j;
            let ghat = &g_u_hat[at * k1..(at + 1) * k1];
            let block = w.block(i, j);
            let gblock = &mut g_w[at * k1 * k0..(at + 1) * k1 * k0];
            for q1 in 0..k1 {
                let g = ghat[q1];
                if g == T::zero() {
                    continue;
                }
                let row = &block[q1 * k0..(q1 + 1) * k0];
                let grow = &mut gblock[q1 * k0..(q1 + 1) * k0];
                for q0 in 0..k0 {
                    grow[q0] += g * ui[q0];
                    gu[q0] += g * row[q0];
                }
            }
        }
    }
    Ok(CapsuleGrads { u: g_u, w: g_w })
}
