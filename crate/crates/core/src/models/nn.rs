//! Minimal feed-forward network with hand-rolled backprop: dense, ReLU,
//! dropout, and 1D convolution layers, softmax cross-entropy loss, and an
//! Adam optimizer.
//!
//! Everything is generic over the float type so the exact same forward and
//! backward code can run in f64 for finite-difference gradient checks while
//! production models stay f32.

use num_traits::Float;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub trait Scalar:
    Float + num_traits::NumCast + Send + Sync + std::fmt::Debug + std::iter::Sum + 'static
{
}
impl Scalar for f32 {}
impl Scalar for f64 {}

#[inline]
pub fn c<F: Scalar>(x: f64) -> F {
    F::from(x).expect("constant conversion")
}

pub trait Layer<F: Scalar>: Send + Sync {
    fn in_dim(&self) -> usize;
    fn out_dim(&self) -> usize;
    /// Training-mode forward; caches whatever backward needs.
    fn forward_train(&mut self, x: &[F], n: usize, rng: &mut ChaCha8Rng) -> Vec<F>;
    /// Pure inference forward.
    fn forward_eval(&self, x: &[F], n: usize) -> Vec<F>;
    /// Consumes the cached activations from the last `forward_train`.
    fn backward(&mut self, grad_out: &[F], n: usize) -> Vec<F>;
    /// (name, params, grads) triples; empty for parameterless layers.
    fn tensors(&mut self) -> Vec<(String, &mut Vec<F>, &mut Vec<F>)>;
    /// Read-only view of the parameter tensors, same order as `tensors`.
    fn params(&self) -> Vec<&Vec<F>>;
}

// ---------------------------------------------------------------------------

pub struct Dense<F> {
    in_dim: usize,
    out_dim: usize,
    /// Row-major [out][in].
    w: Vec<F>,
    b: Vec<F>,
    dw: Vec<F>,
    db: Vec<F>,
    input: Vec<F>,
}

impl<F: Scalar> Dense<F> {
    /// He-uniform initialization from the shared rng stream (f64 draws, so
    /// f32 and f64 instantiations see identical values).
    pub fn new(in_dim: usize, out_dim: usize, rng: &mut ChaCha8Rng) -> Dense<F> {
        let limit = (6.0 / in_dim as f64).sqrt();
        let w = (0..in_dim * out_dim)
            .map(|_| c::<F>(rng.gen_range(-limit..limit)))
            .collect();
        Dense {
            in_dim,
            out_dim,
            w,
            b: vec![F::zero(); out_dim],
            dw: vec![F::zero(); in_dim * out_dim],
            db: vec![F::zero(); out_dim],
            input: Vec::new(),
        }
    }

    fn compute(&self, x: &[F], n: usize) -> Vec<F> {
        let mut y = vec![F::zero(); n * self.out_dim];
        for r in 0..n {
            let xin = &x[r * self.in_dim..(r + 1) * self.in_dim];
            let yout = &mut y[r * self.out_dim..(r + 1) * self.out_dim];
            for (o, yo) in yout.iter_mut().enumerate() {
                let wrow = &self.w[o * self.in_dim..(o + 1) * self.in_dim];
                let mut acc = self.b[o];
                for (wi, xi) in wrow.iter().zip(xin) {
                    acc = acc + *wi * *xi;
                }
                *yo = acc;
            }
        }
        y
    }
}

impl<F: Scalar> Layer<F> for Dense<F> {
    fn in_dim(&self) -> usize {
        self.in_dim
    }
    fn out_dim(&self) -> usize {
        self.out_dim
    }

    fn forward_train(&mut self, x: &[F], n: usize, _rng: &mut ChaCha8Rng) -> Vec<F> {
        self.input = x.to_vec();
        self.compute(x, n)
    }

    fn forward_eval(&self, x: &[F], n: usize) -> Vec<F> {
        self.compute(x, n)
    }

    fn backward(&mut self, grad_out: &[F], n: usize) -> Vec<F> {
        let mut grad_in = vec![F::zero(); n * self.in_dim];
        self.dw.iter_mut().for_each(|g| *g = F::zero());
        self.db.iter_mut().for_each(|g| *g = F::zero());
        for r in 0..n {
            let xin = &self.input[r * self.in_dim..(r + 1) * self.in_dim];
            let g = &grad_out[r * self.out_dim..(r + 1) * self.out_dim];
            let gi = &mut grad_in[r * self.in_dim..(r + 1) * self.in_dim];
            for (o, &go) in g.iter().enumerate() {
                self.db[o] = self.db[o] + go;
                let wrow = &self.w[o * self.in_dim..(o + 1) * self.in_dim];
                let dwrow = &mut self.dw[o * self.in_dim..(o + 1) * self.in_dim];
                for i in 0..self.in_dim {
                    dwrow[i] = dwrow[i] + go * xin[i];
                    gi[i] = gi[i] + go * wrow[i];
                }
            }
        }
        grad_in
    }

    fn tensors(&mut self) -> Vec<(String, &mut Vec<F>, &mut Vec<F>)> {
        vec![
            ("dense.w".into(), &mut self.w, &mut self.dw),
            ("dense.b".into(), &mut self.b, &mut self.db),
        ]
    }

    fn params(&self) -> Vec<&Vec<F>> {
        vec![&self.w, &self.b]
    }
}

// ---------------------------------------------------------------------------

pub struct Relu<F> {
    dim: usize,
    mask: Vec<bool>,
    _marker: std::marker::PhantomData<F>,
}

impl<F: Scalar> Relu<F> {
    pub fn new(dim: usize) -> Relu<F> {
        Relu {
            dim,
            mask: Vec::new(),
            _marker: std::marker::PhantomData,
        }
    }
}

impl<F: Scalar> Layer<F> for Relu<F> {
    fn in_dim(&self) -> usize {
        self.dim
    }
    fn out_dim(&self) -> usize {
        self.dim
    }

    fn forward_train(&mut self, x: &[F], _n: usize, _rng: &mut ChaCha8Rng) -> Vec<F> {
        self.mask = x.iter().map(|&v| v > F::zero()).collect();
        x.iter()
            .map(|&v| if v > F::zero() { v } else { F::zero() })
            .collect()
    }

    fn forward_eval(&self, x: &[F], _n: usize) -> Vec<F> {
        x.iter()
            .map(|&v| if v > F::zero() { v } else { F::zero() })
            .collect()
    }

    fn backward(&mut self, grad_out: &[F], _n: usize) -> Vec<F> {
        grad_out
            .iter()
            .zip(&self.mask)
            .map(|(&g, &m)| if m { g } else { F::zero() })
            .collect()
    }

    fn tensors(&mut self) -> Vec<(String, &mut Vec<F>, &mut Vec<F>)> {
        vec![]
    }

    fn params(&self) -> Vec<&Vec<F>> {
        vec![]
    }
}

// ---------------------------------------------------------------------------

/// Inverted dropout: activations are scaled by 1/keep at train time so
/// evaluation is the identity.
pub struct Dropout<F> {
    dim: usize,
    rate: f64,
    mask: Vec<F>,
}

impl<F: Scalar> Dropout<F> {
    pub fn new(dim: usize, rate: f64) -> Dropout<F> {
        Dropout {
            dim,
            rate,
            mask: Vec::new(),
        }
    }
}

impl<F: Scalar> Layer<F> for Dropout<F> {
    fn in_dim(&self) -> usize {
        self.dim
    }
    fn out_dim(&self) -> usize {
        self.dim
    }

    fn forward_train(&mut self, x: &[F], _n: usize, rng: &mut ChaCha8Rng) -> Vec<F> {
        if self.rate <= 0.0 {
            self.mask.clear();
            return x.to_vec();
        }
        let keep = 1.0 - self.rate;
        let scale = c::<F>(1.0 / keep);
        self.mask = x
            .iter()
            .map(|_| {
                if rng.gen_range(0.0..1.0) < keep {
                    scale
                } else {
                    F::zero()
                }
            })
            .collect();
        x.iter().zip(&self.mask).map(|(&v, &m)| v * m).collect()
    }

    fn forward_eval(&self, x: &[F], _n: usize) -> Vec<F> {
        x.to_vec()
    }

    fn backward(&mut self, grad_out: &[F], _n: usize) -> Vec<F> {
        if self.mask.is_empty() {
            return grad_out.to_vec();
        }
        grad_out
            .iter()
            .zip(&self.mask)
            .map(|(&g, &m)| g * m)
            .collect()
    }

    fn tensors(&mut self) -> Vec<(String, &mut Vec<F>, &mut Vec<F>)> {
        vec![]
    }

    fn params(&self) -> Vec<&Vec<F>> {
        vec![]
    }
}

// ---------------------------------------------------------------------------

/// 1D convolution along the time axis with bands/filters as channels.
/// Input layout `[n][t * in_ch + c]`, output `[n][t * filters + f]`,
/// stride 1, zero same-padding (odd kernel).
pub struct Conv1d<F> {
    t_len: usize,
    in_ch: usize,
    filters: usize,
    kernel: usize,
    /// [filter][in_ch][k].
    w: Vec<F>,
    b: Vec<F>,
    dw: Vec<F>,
    db: Vec<F>,
    input: Vec<F>,
}

impl<F: Scalar> Conv1d<F> {
    pub fn new(
        t_len: usize,
        in_ch: usize,
        filters: usize,
        kernel: usize,
        rng: &mut ChaCha8Rng,
    ) -> Conv1d<F> {
        assert!(kernel % 2 == 1, "same-padding needs an odd kernel");
        let fan_in = in_ch * kernel;
        let limit = (6.0 / fan_in as f64).sqrt();
        let w = (0..filters * in_ch * kernel)
            .map(|_| c::<F>(rng.gen_range(-limit..limit)))
            .collect();
        Conv1d {
            t_len,
            in_ch,
            filters,
            kernel,
            w,
            b: vec![F::zero(); filters],
            dw: vec![F::zero(); filters * in_ch * kernel],
            db: vec![F::zero(); filters],
            input: Vec::new(),
        }
    }

    #[inline]
    fn wid(&self, f: usize, ci: usize, j: usize) -> usize {
        (f * self.in_ch + ci) * self.kernel + j
    }

    fn compute(&self, x: &[F], n: usize) -> Vec<F> {
        let pad = (self.kernel - 1) / 2;
        let (t_len, in_ch, filters) = (self.t_len, self.in_ch, self.filters);
        let mut y = vec![F::zero(); n * t_len * filters];
        for r in 0..n {
            let xr = &x[r * t_len * in_ch..(r + 1) * t_len * in_ch];
            let yr = &mut y[r * t_len * filters..(r + 1) * t_len * filters];
            for t in 0..t_len {
                for f in 0..filters {
                    let mut acc = self.b[f];
                    for j in 0..self.kernel {
                        let ti = t as isize + j as isize - pad as isize;
                        if ti < 0 || ti >= t_len as isize {
                            continue;
                        }
                        let ti = ti as usize;
                        for ci in 0..in_ch {
                            acc = acc + self.w[self.wid(f, ci, j)] * xr[ti * in_ch + ci];
                        }
                    }
                    yr[t * filters + f] = acc;
                }
            }
        }
        y
    }
}

impl<F: Scalar> Layer<F> for Conv1d<F> {
    fn in_dim(&self) -> usize {
        self.t_len * self.in_ch
    }
    fn out_dim(&self) -> usize {
        self.t_len * self.filters
    }

    fn forward_train(&mut self, x: &[F], n: usize, _rng: &mut ChaCha8Rng) -> Vec<F> {
        self.input = x.to_vec();
        self.compute(x, n)
    }

    fn forward_eval(&self, x: &[F], n: usize) -> Vec<F> {
        self.compute(x, n)
    }

    fn backward(&mut self, grad_out: &[F], n: usize) -> Vec<F> {
        let pad = (self.kernel - 1) / 2;
        let (t_len, in_ch, filters) = (self.t_len, self.in_ch, self.filters);
        self.dw.iter_mut().for_each(|g| *g = F::zero());
        self.db.iter_mut().for_each(|g| *g = F::zero());
        let mut grad_in = vec![F::zero(); n * t_len * in_ch];
        for r in 0..n {
            let xr = &self.input[r * t_len * in_ch..(r + 1) * t_len * in_ch];
            let gr = &grad_out[r * t_len * filters..(r + 1) * t_len * filters];
            let gi = &mut grad_in[r * t_len * in_ch..(r + 1) * t_len * in_ch];
            for t in 0..t_len {
                for f in 0..filters {
                    let go = gr[t * filters + f];
                    self.db[f] = self.db[f] + go;
                    for j in 0..self.kernel {
                        let ti = t as isize + j as isize - pad as isize;
                        if ti < 0 || ti >= t_len as isize {
                            continue;
                        }
                        let ti = ti as usize;
                        for ci in 0..in_ch {
                            let wi = self.wid(f, ci, j);
                            self.dw[wi] = self.dw[wi] + go * xr[ti * in_ch + ci];
                            gi[ti * in_ch + ci] = gi[ti * in_ch + ci] + go * self.w[wi];
                        }
                    }
                }
            }
        }
        grad_in
    }

    fn tensors(&mut self) -> Vec<(String, &mut Vec<F>, &mut Vec<F>)> {
        vec![
            ("conv.w".into(), &mut self.w, &mut self.dw),
            ("conv.b".into(), &mut self.b, &mut self.db),
        ]
    }

    fn params(&self) -> Vec<&Vec<F>> {
        vec![&self.w, &self.b]
    }
}

// ---------------------------------------------------------------------------

pub struct Network<F: Scalar> {
    pub layers: Vec<Box<dyn Layer<F>>>,
}

impl<F: Scalar> Network<F> {
    pub fn new(layers: Vec<Box<dyn Layer<F>>>) -> Network<F> {
        for pair in layers.windows(2) {
            assert_eq!(
                pair[0].out_dim(),
                pair[1].in_dim(),
                "adjacent layer dims must agree"
            );
        }
        Network { layers }
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().expect("non-empty network").out_dim()
    }

    pub fn forward_train(&mut self, x: &[F], n: usize, rng: &mut ChaCha8Rng) -> Vec<F> {
        let mut cur = x.to_vec();
        for layer in &mut self.layers {
            cur = layer.forward_train(&cur, n, rng);
        }
        cur
    }

    pub fn forward_eval(&self, x: &[F], n: usize) -> Vec<F> {
        let mut cur = x.to_vec();
        for layer in &self.layers {
            cur = layer.forward_eval(&cur, n);
        }
        cur
    }

    pub fn backward(&mut self, grad: &[F], n: usize) -> Vec<F> {
        let mut cur = grad.to_vec();
        for layer in self.layers.iter_mut().rev() {
            cur = layer.backward(&cur, n);
        }
        cur
    }

    pub fn tensors(&mut self) -> Vec<(String, &mut Vec<F>, &mut Vec<F>)> {
        self.layers
            .iter_mut()
            .enumerate()
            .flat_map(|(i, l)| {
                l.tensors()
                    .into_iter()
                    .map(move |(name, p, g)| (format!("layer{i}.{name}"), p, g))
            })
            .collect()
    }

    pub fn params(&self) -> Vec<&Vec<F>> {
        self.layers.iter().flat_map(|l| l.params()).collect()
    }

    pub fn snapshot(&mut self) -> Vec<Vec<F>> {
        self.tensors().into_iter().map(|(_, p, _)| p.clone()).collect()
    }

    pub fn restore(&mut self, snapshot: &[Vec<F>]) {
        for ((_, p, _), saved) in self.tensors().into_iter().zip(snapshot) {
            p.copy_from_slice(saved);
        }
    }
}

/// Row-wise softmax in place.
pub fn softmax_rows<F: Scalar>(logits: &mut [F], n: usize, k: usize) {
    for r in 0..n {
        let row = &mut logits[r * k..(r + 1) * k];
        let max = row.iter().cloned().fold(F::neg_infinity(), F::max);
        let mut sum = F::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum = sum + *v;
        }
        for v in row.iter_mut() {
            *v = *v / sum;
        }
    }
}

/// Mean cross-entropy of softmax(logits) against integer targets, plus the
/// gradient with respect to the logits.
pub fn softmax_cross_entropy<F: Scalar>(
    logits: &[F],
    targets: &[usize],
    k: usize,
) -> (F, Vec<F>) {
    let n = targets.len();
    let mut probs = logits.to_vec();
    softmax_rows(&mut probs, n, k);
    let mut loss = F::zero();
    let inv_n = c::<F>(1.0 / n as f64);
    let tiny = c::<F>(1e-12);
    let mut grad = probs;
    for (r, &t) in targets.iter().enumerate() {
        let p = grad[r * k + t];
        loss = loss - (p + tiny).ln();
        grad[r * k + t] = grad[r * k + t] - F::one();
    }
    for g in grad.iter_mut() {
        *g = *g * inv_n;
    }
    (loss * inv_n, grad)
}

// ---------------------------------------------------------------------------

pub struct Adam<F> {
    lr: F,
    beta1: F,
    beta2: F,
    eps: F,
    t: i32,
    m: Vec<Vec<F>>,
    v: Vec<Vec<F>>,
}

impl<F: Scalar> Adam<F> {
    pub fn new(lr: f64, shapes: &[usize]) -> Adam<F> {
        Adam {
            lr: c(lr),
            beta1: c(0.9),
            beta2: c(0.999),
            eps: c(1e-8),
            t: 0,
            m: shapes.iter().map(|&s| vec![F::zero(); s]).collect(),
            v: shapes.iter().map(|&s| vec![F::zero(); s]).collect(),
        }
    }

    pub fn step(&mut self, tensors: Vec<(String, &mut Vec<F>, &mut Vec<F>)>) {
        self.t += 1;
        let bc1 = F::one() - self.beta1.powi(self.t);
        let bc2 = F::one() - self.beta2.powi(self.t);
        for (idx, (_, params, grads)) in tensors.into_iter().enumerate() {
            let (m, v) = (&mut self.m[idx], &mut self.v[idx]);
            for i in 0..params.len() {
                let g = grads[i];
                m[i] = self.beta1 * m[i] + (F::one() - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (F::one() - self.beta2) * g * g;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                params[i] = params[i] - self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
    }
}

// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub patience: usize,
    pub val_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 100,
            batch_size: 64,
            learning_rate: 1e-3,
            patience: 10,
            val_fraction: 0.2,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainStats {
    pub epochs_run: usize,
    pub best_val_loss: Option<f64>,
    pub final_train_loss: f64,
}

/// Seeded stratified holdout: per label, a shuffled `val_fraction` slice
/// goes to validation. Returns (train_idx, val_idx) in deterministic order.
pub fn stratified_split(
    labels: &[usize],
    k: usize,
    val_fraction: f64,
    rng: &mut ChaCha8Rng,
) -> (Vec<usize>, Vec<usize>) {
    use rand::seq::SliceRandom;
    let mut train = Vec::new();
    let mut val = Vec::new();
    for class in 0..k {
        let mut idx: Vec<usize> = labels
            .iter()
            .enumerate()
            .filter(|(_, &l)| l == class)
            .map(|(i, _)| i)
            .collect();
        idx.shuffle(rng);
        let n_val = (idx.len() as f64 * val_fraction).floor() as usize;
        val.extend_from_slice(&idx[..n_val]);
        train.extend_from_slice(&idx[n_val..]);
    }
    train.sort_unstable();
    val.sort_unstable();
    (train, val)
}

/// Mini-batch Adam training with early stopping on a stratified validation
/// split (restoring the best parameters). Aborts on a non-finite loss.
pub fn train_network<F: Scalar>(
    net: &mut Network<F>,
    features: &[F],
    targets: &[usize],
    n_features: usize,
    k: usize,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<TrainStats> {
    use rand::seq::SliceRandom;
    let n = targets.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (train_idx, val_idx) = stratified_split(targets, k, cfg.val_fraction, &mut rng);
    let shapes: Vec<usize> = net.tensors().iter().map(|(_, p, _)| p.len()).collect();
    let mut adam = Adam::<F>::new(cfg.learning_rate, &shapes);

    let gather = |idx: &[usize]| -> (Vec<F>, Vec<usize>) {
        let mut x = Vec::with_capacity(idx.len() * n_features);
        let mut y = Vec::with_capacity(idx.len());
        for &i in idx {
            x.extend_from_slice(&features[i * n_features..(i + 1) * n_features]);
            y.push(targets[i]);
        }
        (x, y)
    };
    let (val_x, val_y) = gather(&val_idx);

    let mut order: Vec<usize> = train_idx.clone();
    let mut best_val = f64::INFINITY;
    let mut best_snapshot: Option<Vec<Vec<F>>> = None;
    let mut stale = 0usize;
    let mut epochs_run = 0usize;
    let mut final_train_loss = 0.0f64;

    for epoch in 0..cfg.epochs {
        epochs_run = epoch + 1;
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0f64;
        let mut batches = 0usize;
        for batch in order.chunks(cfg.batch_size) {
            let (bx, by) = gather(batch);
            let logits = net.forward_train(&bx, by.len(), &mut rng);
            let (loss, grad) = softmax_cross_entropy(&logits, &by, k);
            let loss_f = loss.to_f64().unwrap();
            if !loss_f.is_finite() {
                return Err(Error::NonFiniteLoss { epoch });
            }
            net.backward(&grad, by.len());
            adam.step(net.tensors());
            epoch_loss += loss_f;
            batches += 1;
        }
        final_train_loss = epoch_loss / batches.max(1) as f64;

        if !val_idx.is_empty() {
            let logits = net.forward_eval(&val_x, val_y.len());
            let (vloss, _) = softmax_cross_entropy(&logits, &val_y, k);
            let vloss = vloss.to_f64().unwrap();
            if !vloss.is_finite() {
                return Err(Error::NonFiniteLoss { epoch });
            }
            if vloss < best_val {
                best_val = vloss;
                best_snapshot = Some(net.snapshot());
                stale = 0;
            } else {
                stale += 1;
                if stale >= cfg.patience {
                    break;
                }
            }
        }
    }
    if let Some(snapshot) = &best_snapshot {
        net.restore(snapshot);
    }
    let _ = n;
    Ok(TrainStats {
        epochs_run,
        best_val_loss: (!val_idx.is_empty()).then_some(best_val),
        final_train_loss,
    })
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;

    /// Central finite differences against the analytic gradient for every
    /// parameter tensor of `net`, in f64.
    pub(crate) fn gradient_check(
        mut net: Network<f64>,
        x: &[f64],
        targets: &[usize],
        k: usize,
        tol: f64,
    ) {
        let n = targets.len();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let logits = net.forward_train(x, n, &mut rng);
        let (_, grad) = softmax_cross_entropy(&logits, targets, k);
        net.backward(&grad, n);

        let analytic: Vec<(String, Vec<f64>)> = net
            .tensors()
            .into_iter()
            .map(|(name, _, g)| (name, g.clone()))
            .collect();

        for (tensor_idx, (name, an_grad)) in analytic.iter().enumerate() {
            for i in 0..an_grad.len() {
                let eval_at = |delta: f64, net: &mut Network<f64>| -> f64 {
                    {
                        let mut tensors = net.tensors();
                        let (_, p, _) = &mut tensors[tensor_idx];
                        p[i] += delta;
                    }
                    let logits = net.forward_eval(x, n);
                    let (loss, _) = softmax_cross_entropy(&logits, targets, k);
                    {
                        let mut tensors = net.tensors();
                        let (_, p, _) = &mut tensors[tensor_idx];
                        p[i] -= delta;
                    }
                    loss
                };
                let h = 1e-6;
                let fd = (eval_at(h, &mut net) - eval_at(-h, &mut net)) / (2.0 * h);
                let an = an_grad[i];
                let denom = fd.abs().max(an.abs());
                if denom > 1e-10 {
                    let rel = (fd - an).abs() / denom;
                    assert!(
                        rel <= tol,
                        "{name}[{i}]: analytic {an:.3e} vs fd {fd:.3e} (rel {rel:.3e})"
                    );
                }
            }
        }
    }

    fn seeded_input(n: usize, dim: usize, seed: u64) -> (Vec<f64>, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = (0..n * dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let y = (0..n).map(|_| rng.gen_range(0..3usize)).collect();
        (x, y)
    }

    #[test]
    fn dense_relu_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let net = Network::new(vec![
            Box::new(Dense::<f64>::new(4, 5, &mut rng)) as Box<dyn Layer<f64>>,
            Box::new(Relu::new(5)),
            Box::new(Dense::new(5, 3, &mut rng)),
        ]);
        let (x, y) = seeded_input(6, 4, 1);
        gradient_check(net, &x, &y, 3, 1e-5);
    }

    #[test]
    fn conv_gradients_match_finite_differences() {
        // 3 instants, 2 bands, 2 filters micro-net
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let net = Network::new(vec![
            Box::new(Conv1d::<f64>::new(3, 2, 2, 3, &mut rng)) as Box<dyn Layer<f64>>,
            Box::new(Relu::new(6)),
            Box::new(Dense::new(6, 3, &mut rng)),
        ]);
        let (x, y) = seeded_input(5, 6, 2);
        gradient_check(net, &x, &y, 3, 1e-5);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut logits = vec![2.0f64, 1.0, -3.0, 0.5, 0.5, 0.5];
        softmax_rows(&mut logits, 2, 3);
        for r in 0..2 {
            let sum: f64 = logits[r * 3..(r + 1) * 3].iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
            assert!(logits[r * 3..(r + 1) * 3].iter().all(|&p| p >= 0.0));
        }
        // uniform logits give uniform probabilities
        assert!((logits[3] - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn stratified_split_respects_fractions() {
        let labels = vec![0usize; 50]
            .into_iter()
            .chain(vec![1usize; 10])
            .collect::<Vec<_>>();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (train, val) = stratified_split(&labels, 2, 0.2, &mut rng);
        assert_eq!(train.len() + val.len(), 60);
        assert_eq!(val.iter().filter(|&&i| labels[i] == 0).count(), 10);
        assert_eq!(val.iter().filter(|&&i| labels[i] == 1).count(), 2);
        // disjoint
        for i in &val {
            assert!(!train.contains(i));
        }
    }

    #[test]
    fn dropout_eval_is_identity_and_train_masks() {
        let mut d = Dropout::<f64>::new(4, 0.5);
        let x = vec![1.0, 2.0, 3.0, 4.0];
        assert_eq!(d.forward_eval(&x, 1), x);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let y = d.forward_train(&x, 1, &mut rng);
        // masked entries are zero, kept entries scaled by 2
        for (yi, xi) in y.iter().zip(&x) {
            assert!(*yi == 0.0 || (*yi - xi * 2.0).abs() < 1e-12);
        }
    }
}
