//! Reverse-mode autodiff over dense tensors.
//!
//! A [`Tape`] records one forward pass as a flat list of nodes; backward
//! walks the list in reverse. The op set is exactly what the network
//! needs: elementwise arithmetic, grouped convolution, batch norm, spike
//! sequences with surrogate gradients, Haar-matrix products,
//! block-diagonal channel mixing, pooling, and a cross-entropy head.
//!
//! Spike layers run over the full `[T, ...]` sequence in a single node
//! and thread membrane state internally, so backward is true BPTT. In
//! [`SpikeMode::Hard`] the forward emits spikes and backward uses the
//! rectangular surrogate; [`SpikeMode::Relaxed`] replaces the step
//! function with its piecewise-linear primitive (whose exact derivative
//! is that same surrogate), which makes the whole network differentiable
//! for finite-difference verification.
//!
//! Parallel loops write disjoint outputs and keep every accumulation
//! sequential in ascending index, so results are bitwise reproducible
//! regardless of thread count.

use rayon::prelude::*;

use crate::error::{dim_err, Error, Result};
use crate::neuron::{surrogate_grad, NeuronConfig, ResetRule};
use crate::spike::Polarity;
use crate::tensor::DenseTensor;

/// Handle to a tape node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Forward behaviour of spike nonlinearities.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SpikeMode {
    /// Discrete spikes; backward uses the rectangular surrogate.
    Hard,
    /// Piecewise-linear primitive of the surrogate; used for gradient
    /// verification.
    Relaxed,
}

/// Batch-norm forward flavour.
#[derive(Debug, Clone)]
pub enum BnMode {
    /// Normalize with batch statistics (training).
    Train,
    /// Normalize with the provided running statistics (inference).
    Eval { mean: Vec<f64>, var: Vec<f64> },
}

/// Convolution geometry.
#[derive(Debug, Clone, Copy)]
pub struct ConvSpec {
    pub stride: usize,
    pub pad: usize,
    pub groups: usize,
}

trait TapeOp: Send + Sync {
    fn backward(&self, tape: &Tape, grad_out: &DenseTensor, sink: &mut GradSink);
}

struct Node {
    value: DenseTensor,
    requires_grad: bool,
    op: Option<Box<dyn TapeOp>>,
}

struct GradSink {
    grads: Vec<Option<DenseTensor>>,
}

impl GradSink {
    fn accumulate(&mut self, var: Var, grad: DenseTensor) {
        match &mut self.grads[var.0] {
            Some(g) => {
                let gd = g.data_mut();
                for (a, b) in gd.iter_mut().zip(grad.data()) {
                    *a += b;
                }
            }
            slot @ None => *slot = Some(grad),
        }
    }
}

/// Gradients produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<DenseTensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&DenseTensor> {
        self.grads[var.0].as_ref()
    }
}

/// One recorded forward pass.
pub struct Tape {
    nodes: Vec<Node>,
    grad_enabled: bool,
}

impl Tape {
    pub fn new(grad_enabled: bool) -> Self {
        Tape {
            nodes: Vec::new(),
            grad_enabled,
        }
    }

    pub fn value(&self, var: Var) -> &DenseTensor {
        &self.nodes[var.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Registers a trainable leaf.
    pub fn leaf(&mut self, value: DenseTensor) -> Var {
        self.push(value, self.grad_enabled, None)
    }

    /// Registers a constant (inputs, fixed matrices).
    pub fn constant(&mut self, value: DenseTensor) -> Var {
        self.push(value, false, None)
    }

    fn push(&mut self, value: DenseTensor, requires_grad: bool, op: Option<Box<dyn TapeOp>>) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_requires(&self, vars: &[Var]) -> bool {
        self.grad_enabled && vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn emit(
        &mut self,
        value: DenseTensor,
        parents: &[Var],
        op: impl TapeOp + 'static,
    ) -> Var {
        if self.any_requires(parents) {
            self.push(value, true, Some(Box::new(op)))
        } else {
            self.push(value, false, None)
        }
    }

    /// Reverse pass from a scalar loss node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(dim_err("backward", "loss must be a scalar"));
        }
        let mut sink = GradSink {
            grads: (0..self.nodes.len()).map(|_| None).collect(),
        };
        sink.grads[loss.0] = Some(DenseTensor::filled(&[1], 1.0));
        for idx in (0..=loss.0).rev() {
            let Some(op) = self.nodes[idx].op.as_ref() else {
                continue;
            };
            let Some(grad) = sink.grads[idx].take() else {
                continue;
            };
            op.backward(self, &grad, &mut sink);
            // Keep the grad available for inspection of intermediate nodes.
            sink.grads[idx] = Some(grad);
        }
        Ok(Gradients { grads: sink.grads })
    }

    // ---- elementwise ----------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).add(self.value(b))?;
        Ok(self.emit(value, &[a, b], AddOp { a, b }))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).sub(self.value(b))?;
        Ok(self.emit(value, &[a, b], SubOp { a, b }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).mul(self.value(b))?;
        Ok(self.emit(value, &[a, b], MulOp { a, b }))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).scale(c);
        self.emit(value, &[a], ScaleOp { a, c })
    }

    /// Weighted sum reduction to a scalar: `sum(x * weights)`.
    pub fn sum_weighted(&mut self, x: Var, weights: DenseTensor) -> Result<Var> {
        if self.value(x).shape() != weights.shape() {
            return Err(dim_err("sum_weighted", "weight shape mismatch"));
        }
        let s: f64 = self
            .value(x)
            .data()
            .iter()
            .zip(weights.data())
            .map(|(a, b)| a * b)
            .sum();
        let value = DenseTensor::from_vec(&[1], vec![s])?;
        Ok(self.emit(value, &[x], SumWeightedOp { x, weights }))
    }

    // ---- spiking sequence ------------------------------------------------

    /// Runs a spiking neuron layer over inputs `[T, ...]`, threading
    /// membrane state across the leading axis.
    pub fn spike_seq(&mut self, input: Var, cfg: NeuronConfig, mode: SpikeMode) -> Result<Var> {
        cfg.validate()?;
        let x = self.value(input);
        let shape = x.shape().to_vec();
        if shape.is_empty() {
            return Err(dim_err("spike_seq", "input needs a leading time axis"));
        }
        let t_steps = shape[0];
        let stride: usize = shape[1..].iter().product();
        let mut u_cache = vec![0.0; x.len()];
        let mut s_out = vec![0.0; x.len()];
        let xd = x.data();
        // Elementwise recurrence: each neuron evolves independently.
        let w = cfg.surrogate_width;
        let hardsig = move |z: f64| ((z + w) / (2.0 * w)).clamp(0.0, 1.0);
        for e in 0..stride {
            let mut v = 0.0;
            for t in 0..t_steps {
                let u = v + xd[t * stride + e];
                u_cache[t * stride + e] = u;
                let s = match (mode, cfg.polarity) {
                    (SpikeMode::Hard, Polarity::Binary) => {
                        if u - cfg.v_th >= 0.0 {
                            1.0
                        } else {
                            0.0
                        }
                    }
                    (SpikeMode::Hard, Polarity::Ternary) => {
                        if u >= cfg.v_th {
                            1.0
                        } else if u <= -cfg.v_th {
                            -1.0
                        } else {
                            0.0
                        }
                    }
                    (SpikeMode::Relaxed, Polarity::Binary) => hardsig(u - cfg.v_th),
                    (SpikeMode::Relaxed, Polarity::Ternary) => {
                        hardsig(u - cfg.v_th) - hardsig(-u - cfg.v_th)
                    }
                };
                s_out[t * stride + e] = s;
                v = match cfg.reset {
                    ResetRule::Hard => cfg.v_reset * s + cfg.beta * u * (1.0 - s),
                    ResetRule::Subtract => u - s * cfg.v_th,
                    ResetRule::HardVerbatim => cfg.v_reset * s + u * (1.0 - s),
                };
            }
        }
        let value = DenseTensor::from_vec(&shape, s_out)?;
        let u_cache = DenseTensor::from_vec(&shape, u_cache)?;
        Ok(self.emit(
            value,
            &[input],
            SpikeSeqOp {
                input,
                cfg,
                mode,
                u_cache,
                t_steps,
                stride,
            },
        ))
    }

    // ---- convolution -----------------------------------------------------

    /// Grouped 2D convolution over `[T, B, C, H, W]`; time and batch fold
    /// into one batch axis. No bias — batch norm always follows.
    pub fn conv2d(&mut self, x: Var, w: Var, spec: ConvSpec) -> Result<Var> {
        let dims = ConvDims::infer(self.value(x), self.value(w), spec)?;
        let value = conv2d_forward(self.value(x), self.value(w), &dims);
        Ok(self.emit(value, &[x, w], Conv2dOp { x, w, dims }))
    }

    // ---- batch norm --------------------------------------------------------

    /// Channel batch norm over `[T, B, C, H, W]`, reducing across
    /// time, batch, and space. Returns the output together with the batch
    /// statistics so the caller can maintain running estimates.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mode: &BnMode,
        eps: f64,
    ) -> Result<(Var, Vec<f64>, Vec<f64>)> {
        let xv = self.value(x);
        let shape = xv.shape().to_vec();
        if shape.len() != 5 {
            return Err(dim_err("batch_norm", "expected [T, B, C, H, W]"));
        }
        let c = shape[2];
        if self.value(gamma).len() != c || self.value(beta).len() != c {
            return Err(dim_err("batch_norm", "gamma/beta must have C entries"));
        }
        let (mean, var) = match mode {
            BnMode::Train => channel_stats(xv),
            BnMode::Eval { mean, var } => (mean.clone(), var.clone()),
        };
        let invstd: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let g = self.value(gamma).data().to_vec();
        let b = self.value(beta).data().to_vec();
        let mut out = xv.clone();
        apply_per_channel(&mut out, |ch, v| (v - mean[ch]) * invstd[ch] * g[ch] + b[ch]);
        let train = matches!(mode, BnMode::Train);
        let op = BatchNormOp {
            x,
            gamma,
            beta,
            mean: mean.clone(),
            invstd,
            train,
        };
        let var_out = var.clone();
        let v = self.emit(out, &[x, gamma, beta], op);
        Ok((v, mean, var_out))
    }

    // ---- linear head -------------------------------------------------------

    /// `y = x wT + b` with `x [B, In]`, `w [Out, In]`, `b [Out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xv = self.value(x);
        let wv = self.value(w);
        if xv.shape().len() != 2 || wv.shape().len() != 2 {
            return Err(dim_err("linear", "x and w must be matrices"));
        }
        let (batch, n_in) = (xv.shape()[0], xv.shape()[1]);
        let (n_out, n_in2) = (wv.shape()[0], wv.shape()[1]);
        if n_in != n_in2 || self.value(b).len() != n_out {
            return Err(dim_err("linear", "dimension mismatch"));
        }
        let bv = self.value(b);
        let mut out = vec![0.0; batch * n_out];
        for bi in 0..batch {
            let xrow = &xv.data()[bi * n_in..(bi + 1) * n_in];
            for o in 0..n_out {
                let wrow = &wv.data()[o * n_in..(o + 1) * n_in];
                let mut acc = bv.data()[o];
                for i in 0..n_in {
                    acc += gate_mul(xrow[i], wrow[i]);
                }
                out[bi * n_out + o] = acc;
            }
        }
        let value = DenseTensor::from_vec(&[batch, n_out], out)?;
        Ok(self.emit(value, &[x, w, b], LinearOp { x, w, b }))
    }

    // ---- pooling / reductions ----------------------------------------------

    /// Mean over time and token axes: `[T, B, C, H, W] -> [B, C]`.
    pub fn gap_time_tokens(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let s = xv.shape();
        if s.len() != 5 {
            return Err(dim_err("gap_time_tokens", "expected [T, B, C, H, W]"));
        }
        let (t_steps, batch, c, h, w) = (s[0], s[1], s[2], s[3], s[4]);
        let mut out = vec![0.0; batch * c];
        let plane = h * w;
        for t in 0..t_steps {
            for b in 0..batch {
                for ch in 0..c {
                    let base = (((t * batch + b) * c) + ch) * plane;
                    let mut acc = 0.0;
                    for p in 0..plane {
                        acc += xv.data()[base + p];
                    }
                    out[b * c + ch] += acc;
                }
            }
        }
        let denom = (t_steps * plane) as f64;
        for v in out.iter_mut() {
            *v /= denom;
        }
        let value = DenseTensor::from_vec(&[batch, c], out)?;
        Ok(self.emit(
            value,
            &[x],
            GapOp {
                x,
                dims: (t_steps, batch, c, h, w),
            },
        ))
    }

    /// Replaces every token with the mean over the token grid, per
    /// `[T, B, C]` map. The global-averaging control mixer.
    pub fn token_mean_broadcast(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let s = xv.shape();
        if s.len() != 5 {
            return Err(dim_err("token_mean_broadcast", "expected [T, B, C, H, W]"));
        }
        let plane = s[3] * s[4];
        let maps = xv.len() / plane;
        let mut out = vec![0.0; xv.len()];
        for m in 0..maps {
            let base = m * plane;
            let mut acc = 0.0;
            for p in 0..plane {
                acc += xv.data()[base + p];
            }
            let mean = acc / plane as f64;
            out[base..base + plane].fill(mean);
        }
        let value = DenseTensor::from_vec(s, out)?;
        Ok(self.emit(value, &[x], TokenMeanOp { x, plane }))
    }

    /// 1D max pool over the flattened token axis (kernel 2, stride 1,
    /// same padding): `out[i] = max(x[i], x[i + 1])`.
    pub fn maxpool_tokens(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let s = xv.shape();
        if s.len() != 5 {
            return Err(dim_err("maxpool_tokens", "expected [T, B, C, H, W]"));
        }
        let tokens = s[3] * s[4];
        let maps = xv.len() / tokens;
        let mut out = vec![0.0; xv.len()];
        let mut argmax = vec![0u32; xv.len()];
        for m in 0..maps {
            let base = m * tokens;
            for i in 0..tokens {
                let a = xv.data()[base + i];
                if i + 1 < tokens {
                    let b = xv.data()[base + i + 1];
                    // Ties resolve to the earlier index.
                    if b > a {
                        out[base + i] = b;
                        argmax[base + i] = (i + 1) as u32;
                    } else {
                        out[base + i] = a;
                        argmax[base + i] = i as u32;
                    }
                } else {
                    out[base + i] = a;
                    argmax[base + i] = i as u32;
                }
            }
        }
        let value = DenseTensor::from_vec(s, out)?;
        Ok(self.emit(
            value,
            &[x],
            MaxPoolOp {
                x,
                tokens,
                argmax,
            },
        ))
    }

    // ---- wavelet-path ops ---------------------------------------------------

    /// Per-map matrix product with a constant matrix over `[T, B, C, S, S]`:
    /// left (`M x`) or right (`x Mt`).
    pub fn haar_mul(&mut self, x: Var, matrix: DenseTensor, left: bool) -> Result<Var> {
        let xv = self.value(x);
        let s = xv.shape();
        if s.len() != 5 || s[3] != s[4] {
            return Err(dim_err("haar_mul", "expected [T, B, C, S, S]"));
        }
        let side = s[3];
        if matrix.shape() != [side, side] {
            return Err(dim_err(
                "haar_mul",
                format!("matrix {:?} vs side {side}", matrix.shape()),
            ));
        }
        let value = haar_mul_forward(xv, &matrix, left);
        Ok(self.emit(
            value,
            &[x],
            HaarMulOp {
                x,
                matrix,
                left,
                side,
            },
        ))
    }

    /// Block-diagonal channel mixing per frequency position:
    /// `x [T, B, D, H, W]`, `w [k, H, W, db, db]`, `D = k * db`.
    pub fn block_diag(&mut self, x: Var, w: Var) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape().to_vec();
        if xs.len() != 5 || ws.len() != 5 {
            return Err(dim_err("block_diag", "expected 5-axis input and weights"));
        }
        let (k, db) = (ws[0], ws[3]);
        if ws[3] != ws[4] || xs[2] != k * db || xs[3] != ws[1] || xs[4] != ws[2] {
            return Err(Error::Config(format!(
                "block layout mismatch: x {:?} vs w {:?}",
                xs, ws
            )));
        }
        let value = block_diag_forward(self.value(x), self.value(w), k, db);
        Ok(self.emit(value, &[x, w], BlockDiagOp { x, w, k, db }))
    }

    /// Zeroes the (0, 0) frequency position of every `[T, B, C]` map.
    pub fn mask_dc(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let s = xv.shape();
        if s.len() != 5 {
            return Err(dim_err("mask_dc", "expected [T, B, C, H, W]"));
        }
        let plane = s[3] * s[4];
        let mut value = xv.clone();
        let maps = value.len() / plane;
        for m in 0..maps {
            value.data_mut()[m * plane] = 0.0;
        }
        Ok(self.emit(value, &[x], MaskDcOp { x, plane }))
    }

    // ---- loss -----------------------------------------------------------------

    /// Mean cross-entropy of `logits [B, K]` against integer labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        if lv.shape().len() != 2 || lv.shape()[0] != labels.len() {
            return Err(dim_err("cross_entropy", "logits [B, K] vs labels"));
        }
        let (batch, k) = (lv.shape()[0], lv.shape()[1]);
        for (i, l) in labels.iter().enumerate() {
            if *l >= k {
                return Err(Error::Domain(format!(
                    "label {l} at index {i} outside {k} classes"
                )));
            }
        }
        let mut probs = vec![0.0; batch * k];
        let mut loss = 0.0;
        for b in 0..batch {
            let row = &lv.data()[b * k..(b + 1) * k];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut denom = 0.0;
            for v in row {
                denom += (v - m).exp();
            }
            let lse = m + denom.ln();
            loss += lse - row[labels[b]];
            for j in 0..k {
                probs[b * k + j] = (row[j] - m).exp() / denom;
            }
        }
        loss /= batch as f64;
        if !loss.is_finite() {
            return Err(Error::Numeric(format!("non-finite loss {loss}")));
        }
        let value = DenseTensor::from_vec(&[1], vec![loss])?;
        Ok(self.emit(
            value,
            &[logits],
            CrossEntropyOp {
                logits,
                labels: labels.to_vec(),
                probs: DenseTensor::from_vec(&[batch, k], probs)?,
            },
        ))
    }
}

/// Spike-gated multiply: skips zeros, adds or subtracts for unit spikes,
/// and falls back to a true multiply for general values. Bit-identical to
/// `a * b` for `a` in {-1, 0, 1}.
#[inline]
fn gate_mul(a: f64, b: f64) -> f64 {
    if a == 0.0 {
        0.0
    } else if a == 1.0 {
        b
    } else if a == -1.0 {
        -b
    } else {
        a * b
    }
}

// ---- op implementations -------------------------------------------------

struct AddOp {
    a: Var,
    b: Var,
}

impl TapeOp for AddOp {
    fn backward(&self, _t: &Tape, g: &DenseTensor, sink: &mut GradSink) {
        sink.accumulate(self.a, g.clone());
        sink.accumulate(self.b, g.clone());
    }
}

struct SubOp {
    a: Var,
    b: Var,
}

impl TapeOp for SubOp {
    fn backward(&self, _t: &Tape, g: &DenseTensor, sink: &mut GradSink) {
        sink.accumulate(self.a, g.clone());
        sink.accumulate(self.b, g.scale(-1.0));
    }
}

struct MulOp {
    a: Var,
    b: Var,
}

impl TapeOp for MulOp {
    fn backward(&self, t: &Tape, g: &DenseTensor, sink: &mut GradSink) {
        let ga = g.mul(t.value(self.b)).expect("mul backward");
        let gb = g.mul(t.value(self.a)).expect("mul backward");
        sink.accumulate(self.a, ga);
        sink.accumulate(self.b, gb);
    }
}

struct ScaleOp {
    a: Var,
    c: f64,
}

impl TapeOp for ScaleOp {
    fn backward(&self, _t: &Tape, g: &DenseTensor, sink: &mut GradSink) {
        sink.accumulate(self.a, g.scale(self.c));
    }
}

struct SumWeightedOp {
    x: Var,
    weights: DenseTensor,
}

impl TapeOp for SumWeightedOp {
    fn backward(&self, _t: &Tape, g: &DenseTensor, sink: &mut GradSink) {
        sink.accumulate(self.x, self.weights.scale(g.data()[0]));
    }
}

struct SpikeSeqOp {
    input: Var,
    cfg: NeuronConfig,
    mode: SpikeMode,
    u_cache: DenseTensor,
    t_steps: usize,
    stride: usize,
}

impl TapeOp for SpikeSeqOp {
    fn backward(&self, t: &Tape, g: &DenseTensor, sink: &mut GradSink) {
        let cfg = self.cfg;
        let u = self.u_cache.data();
        let mode = self.mode;
        let (t_steps, stride) = (self.t_steps, self.stride);
        let w = cfg.surrogate_width;
        let hardsig = move |z: f64| ((z + w) / (2.0 * w)).clamp(0.0, 1.0);
        let gd = g.data();
        let mut gx = vec![0.0; u.len()];
        // BPTT per neuron: dL/dU_t = gs_t s'(U_t) + gV (dV/dU + dV/ds s'(U_t)),
        // with gV carried to U_{t-1} through V_{t-1}.
        let chunk: Vec<f64> = (0..stride)
            .into_par_iter()
            .flat_map_iter(|e| {
                let mut col = vec![0.0; t_steps];
                let mut g_v = 0.0;
                for step in (0..t_steps).rev() {
                    let idx = step * stride + e;
                    let ut = u[idx];
                    let sp = surrogate_grad(ut - cfg.v_th, &cfg);
                    let s_val = match mode {
                        SpikeMode::Hard => hard_spike_value(ut, &cfg),
                        SpikeMode::Relaxed => match cfg.polarity {
                            Polarity::Binary => hardsig(ut - cfg.v_th),
                            Polarity::Ternary => hardsig(ut - cfg.v_th) - hardsig(-ut - cfg.v_th),
                        },
                    };
                    let (dv_du, dv_ds) = match cfg.reset {
                        ResetRule::Hard => {
                            (cfg.beta * (1.0 - s_val), cfg.v_reset - cfg.beta * ut)
                        }
                        ResetRule::Subtract => (1.0, -cfg.v_th),
                        ResetRule::HardVerbatim => (1.0 - s_val, cfg.v_reset - ut),
                    };
                    let du = gd[idx] * sp + g_v * (dv_du + dv_ds * sp);
                    col[step] = du;
                    g_v = du;
                }
                col
            })
            .collect();
        // chunk is laid out [e][t]; transpose back to [t][e].
        for e in 0..stride {
            for step in 0..t_steps {
                gx[step * stride + e] = chunk[e * t_steps + step];
            }
        }
        let _ = t;
        let grad = DenseTensor::from_vec(self.u_cache.shape(), gx).expect("spike_seq grad");
        sink.accumulate(self.input, grad);
    }
}

fn hard_spike_value(u: f64, cfg: &NeuronConfig) -> f64 {
    match cfg.polarity {
        Polarity::Binary => {
            if u - cfg.v_th >= 0.0 {
                1.0
            } else {
                0.0
            }
        }
        Polarity::Ternary => {
            if u >= cfg.v_th {
                1.0
            } else if u <= -cfg.v_th {
                -1.0
            } else {
                0.0
            }
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct ConvDims {
    t_steps: usize,
    batch: usize,
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    kh: usize,
    kw: usize,
    h_out: usize,
    w_out: usize,
    stride: usize,
    pad: usize,
    groups: usize,
}

impl ConvDims {
    fn infer(x: &DenseTensor, w: &DenseTensor, spec: ConvSpec) -> Result<ConvDims> {
        let xs = x.shape();
        let ws = w.shape();
        if xs.len() != 5 || ws.len() != 4 {
            return Err(dim_err("conv2d", "expected x [T,B,C,H,W], w [O,I,kh,kw]"));
        }
        let (t_steps, batch, c_in, h, wd) = (xs[0], xs[1], xs[2], xs[3], xs[4]);
        let (c_out, c_in_g, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
        let g = spec.groups;
        if g == 0 || c_in % g != 0 || c_out % g != 0 || c_in / g != c_in_g {
            return Err(Error::Config(format!(
                "conv groups {g} incompatible with C_in {c_in}, C_out {c_out}, w {:?}",
                ws
            )));
        }
        if h + 2 * spec.pad < kh || wd + 2 * spec.pad < kw {
            return Err(dim_err("conv2d", "kernel larger than padded input"));
        }
        let h_out = (h + 2 * spec.pad - kh) / spec.stride + 1;
        let w_out = (wd + 2 * spec.pad - kw) / spec.stride + 1;
        Ok(ConvDims {
            t_steps,
            batch,
            c_in,
            h,
            w: wd,
            c_out,
            kh,
            kw,
            h_out,
            w_out,
            stride: spec.stride,
            pad: spec.pad,
            groups: g,
        })
    }
}

fn conv2d_forward(x: &DenseTensor, w: &DenseTensor, d: &ConvDims) -> DenseTensor {
    let n = d.t_steps * d.batch;
    let in_plane = d.h * d.w;
    let out_plane = d.h_out * d.w_out;
    let cg_in = d.c_in / d.groups;
    let cg_out = d.c_out / d.groups;
    let mut out = vec![0.0; n * d.c_out * out_plane];
    let xd = x.data();
    let wd = w.data();
    out.par_chunks_mut(d.c_out * out_plane)
        .enumerate()
        .for_each(|(ni, out_n)| {
            let x_base = ni * d.c_in * in_plane;
            for co in 0..d.c_out {
                let grp = co / cg_out;
                for oh in 0..d.h_out {
                    for ow in 0..d.w_out {
                        let mut acc = 0.0;
                        for ci_g in 0..cg_in {
                            let ci = grp * cg_in + ci_g;
                            let w_base = ((co * cg_in) + ci_g) * d.kh * d.kw;
                            for ki in 0..d.kh {
                                let ih = oh * d.stride + ki;
                                if ih < d.pad || ih >= d.h + d.pad {
                                    continue;
                                }
                                let ih = ih - d.pad;
                                for kj in 0..d.kw {
                                    let iw = ow * d.stride + kj;
                                    if iw < d.pad || iw >= d.w + d.pad {
                                        continue;
                                    }
                                    let iw = iw - d.pad;
                                    let xv = xd[x_base + ci * in_plane + ih * d.w + iw];
                                    acc += gate_mul(xv, wd[w_base + ki * d.kw + kj]);
                                }
                            }
                        }
                        out_n[co * out_plane + oh * d.w_out + ow] = acc;
                    }
                }
            }
        });
    DenseTensor::from_vec(
        &[d.t_steps, d.batch, d.c_out, d.h_out, d.w_out],
        out,
    )
    .expect("conv2d output")
}

struct Conv2dOp {
    x: Var,
    w: Var,
    dims: ConvDims,
}

impl TapeOp for Conv2dOp {
    fn backward(&self, t: &Tape, g: &DenseTensor, sink: &mut GradSink) {
        let d = &self.dims;
        let x = t.value(self.x);
        let w = t.value(self.w);
        let n = d.t_steps * d.batch;
        let in_plane = d.h * d.w;
        let out_plane = d.h_out * d.w_out;
        let cg_in = d.c_in / d.groups;
        let cg_out = d.c_out / d.groups;
        let xd = x.data();
        let wd = w.data();
        let gd = g.data();

        // dL/dx: scatter from each output position back through the kernel.
        let mut gx = vec![0.0; x.len()];
        gx.par_chunks_mut(d.c_in * in_plane)
            .enumerate()
            .for_each(|(ni, gx_n)| {
                let g_base = ni * d.c_out * out_plane;
                for co in 0..d.c_out {
                    let grp = co / cg_out;
                    for oh in 0..d.h_out {
                        for ow in 0..d.w_out {
                            let go = gd[g_base + co * out_plane + oh * d.w_out + ow];
                            if go == 0.0 {
                                continue;
                            }
                            for ci_g in 0..cg_in {
                                let ci = grp * cg_in + ci_g;
                                let w_base = ((co * cg_in) + ci_g) * d.kh * d.kw;
                                for ki in 0..d.kh {
                                    let ih = oh * d.stride + ki;
                                    if ih < d.pad || ih >= d.h + d.pad {
                                        continue;
                                    }
                                    let ih = ih - d.pad;
                                    for kj in 0..d.kw {
                                        let iw = ow * d.stride + kj;
                                        if iw < d.pad || iw >= d.w + d.pad {
                                            continue;
                                        }
                                        let iw = iw - d.pad;
                                        gx_n[ci * in_plane + ih * d.w + iw] +=
                                            go * wd[w_base + ki * d.kw + kj];
                                    }
                                }
                            }
                        }
                    }
                }
            });

        // dL/dw: each output channel's kernel owned by one task.
        let mut gw = vec![0.0; w.len()];
        gw.par_chunks_mut(cg_in * d.kh * d.kw)
            .enumerate()
            .for_each(|(co, gw_co)| {
                let grp = co / cg_out;
                for ni in 0..n {
                    let x_base = ni * d.c_in * in_plane;
                    let g_base = ni * d.c_out * out_plane;
                    for oh in 0..d.h_out {
                        for ow in 0..d.w_out {
                            let go = gd[g_base + co * out_plane + oh * d.w_out + ow];
                            if go == 0.0 {
                                continue;
                            }
                            for ci_g in 0..cg_in {
                                let ci = grp * cg_in + ci_g;
                                for ki in 0..d.kh {
                                    let ih = oh * d.stride + ki;
                                    if ih < d.pad || ih >= d.h + d.pad {
                                        continue;
                                    }
                                    let ih = ih - d.pad;
                                    for kj in 0..d.kw {
                                        let iw = ow * d.stride + kj;
                                        if iw < d.pad || iw >= d.w + d.pad {
                                            continue;
                                        }
                                        let iw = iw - d.pad;
                                        gw_co[ci_g * d.kh * d.kw + ki * d.kw + kj] +=
                                            go * xd[x_base + ci * in_plane + ih * d.w + iw];
                                    }
                                }
                            }
                        }
                    }
                }
            });

        sink.accumulate(
            self.x,
            DenseTensor::from_vec(x.shape(), gx).expect("conv dx"),
        );
        sink.accumulate(
            self.w,
            DenseTensor::from_vec(w.shape(), gw).expect("conv dw"),
        );
    }
}

fn channel_stats(x: &DenseTensor) -> (Vec<f64>, Vec<f64>) {
    let s = x.shape();
    let (t_steps, batch, c, h, w) = (s[0], s[1], s[2], s[3], s[4]);
    let plane = h * w;
    let m = (t_steps * batch * plane) as f64;
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for ch in 0..c {
        let mut acc = 0.0;
        for t in 0..t_steps {
            for b in 0..batch {
                let base = (((t * batch + b) * c) + ch) * plane;
                for p in 0..plane {
                    acc += x.data()[base + p];
                }
            }
        }
        mean[ch] = acc / m;
        let mut acc2 = 0.0;
        for t in 0..t_steps {
            for b in 0..batch {
                let base = (((t * batch + b) * c) + ch) * plane;
                for p in 0..plane {
                    let d = x.data()[base + p] - mean[ch];
                    acc2 += d * d;
                }
            }
        }
        var[ch] = acc2 / m;
    }
    (mean, var)
}

fn apply_per_channel(x: &mut DenseTensor, f: impl Fn(usize, f64) -> f64) {
    let s = x.shape().to_vec();
    let (t_steps, batch, c, h, w) = (s[0], s[1], s[2], s[3], s[4]);
    let plane = h * w;
    let data = x.data_mut();
    for t in 0..t_steps {
        for b in 0..batch {
            for ch in 0..c {
                let base = (((t * batch + b) * c) + ch) * plane;
                for p in 0..plane {
                    data[base + p] = f(ch, data[base + p]);
                }
            }
        }
    }
}

struct BatchNormOp {
    x: Var,
    gamma: Var,
    beta: Var,
    mean: Vec<f64>,
    invstd: Vec<f64>,
    train: bool,
}

impl TapeOp for BatchNormOp {
    fn backward(&self, t: &Tape, g: &DenseTensor, sink: &mut GradSink) {
        let x = t.value(self.x);
        let gamma = t.value(self.gamma);
        let s = x.shape();
        let (t_steps, batch, c, h, w) = (s[0], s[1], s[2], s[3], s[4]);
        let plane = h * w;
        let m = (t_steps * batch * plane) as f64;
        let mut dgamma = vec![0.0; c];
        let mut dbeta = vec![0.0; c];
        let mut sum_g = vec![0.0; c];
        let mut sum_gx = vec![0.0; c];
        for t_i in 0..t_steps {
            for b in 0..batch {
                for ch in 0..c {
                    let base = (((t_i * batch + b) * c) + ch) * plane;
                    for p in 0..plane {
                        let xhat = (x.data()[base + p] - self.mean[ch]) * self.invstd[ch];
                        let gv = g.data()[base + p];
                        dbeta[ch] += gv;
                        dgamma[ch] += gv * xhat;
                        sum_g[ch] += gv;
                        sum_gx[ch] += gv * xhat;
                    }
                }
            }
        }
        let mut gx = vec![0.0; x.len()];
        for t_i in 0..t_steps {
            for b in 0..batch {
                for ch in 0..c {
                    let base = (((t_i * batch + b) * c) + ch) * plane;
                    let k = gamma.data()[ch] * self.invstd[ch];
                    for p in 0..plane {
                        let gv = g.data()[base + p];
                        if self.train {
                            let xhat =
                                (x.data()[base + p] - self.mean[ch]) * self.invstd[ch];
                            gx[base + p] =
                                k * (gv - sum_g[ch] / m - xhat * sum_gx[ch] / m);
                        } else {
                            gx[base + p] = k * gv;
                        }
                    }
                }
            }
        }
        sink.accumulate(self.x, DenseTensor::from_vec(x.shape(), gx).expect("bn dx"));
        sink.accumulate(
            self.gamma,
            DenseTensor::from_vec(&[c], dgamma).expect("bn dgamma"),
        );
        sink.accumulate(
            self.beta,
            DenseTensor::from_vec(&[c], dbeta).expect("bn dbeta"),
        );
    }
}

struct LinearOp {
    x: Var,
    w: Var,
    b: Var,
}

impl TapeOp for LinearOp {
    fn backward(&self, t: &Tape, g: &DenseTensor, sink: &mut GradSink) {
        let x = t.value(self.x);
        let w = t.value(self.w);
        let (batch, n_in) = (x.shape()[0], x.shape()[1]);
        let n_out = w.shape()[0];
        let mut gx = vec![0.0; batch * n_in];
        let mut gw = vec![0.0; n_out * n_in];
        let mut gb = vec![0.0; n_out];
        for bi in 0..batch {
            for o in 0..n_out {
                let go = g.data()[bi * n_out + o];
                if go == 0.0 {
                    continue;
                }
                gb[o] += go;
                for i in 0..n_in {
                    gx[bi * n_in + i] += go * w.data()[o * n_in + i];
                    gw[o * n_in + i] += go * x.data()[bi * n_in + i];
                }
            }
        }
        sink.accumulate(
            self.x,
            DenseTensor::from_vec(&[batch, n_in], gx).expect("linear dx"),
        );
        sink.accumulate(
            self.w,
            DenseTensor::from_vec(&[n_out, n_in], gw).expect("linear dw"),
        );
        sink.accumulate(self.b, DenseTensor::from_vec(&[n_out], gb).expect("linear db"));
    }
}

struct GapOp {
    x: Var,
    dims: (usize, usize, usize, usize, usize),
}

impl TapeOp for GapOp {
    fn backward(&self, t: &Tape, g: &DenseTensor, sink: &mut GradSink) {
        let (t_steps, batch, c, h, w) = self.dims;
        let plane = h * w;
        let denom = (t_steps * plane) as f64;
        let mut gx = vec![0.0; t.value(self.x).len()];
        for t_i in 0..t_steps {
            for b in 0..batch {
                for ch in 0..c {
                    let base = (((t_i * batch + b) * c) + ch) * plane;
                    let gv = g.data()[b * c + ch] / denom;
                    for p in 0..plane {
                        gx[base + p] = gv;
                    }
                }
            }
        }
        sink.accumulate(
            self.x,
            DenseTensor::from_vec(t.value(self.x).shape(), gx).expect("gap dx"),
        );
    }
}

struct TokenMeanOp {
    x: Var,
    plane: usize,
}

impl TapeOp for TokenMeanOp {
    fn backward(&self, t: &Tape, g: &DenseTensor, sink: &mut GradSink) {
        let mut gx = vec![0.0; g.len()];
        let maps = g.len() / self.plane;
        for m in 0..maps {
            let base = m * self.plane;
            let mut acc = 0.0;
            for p in 0..self.plane {
                acc += g.data()[base + p];
            }
            let mean = acc / self.plane as f64;
            gx[base..base + self.plane].fill(mean);
        }
        sink.accumulate(
            self.x,
            DenseTensor::from_vec(t.value(self.x).shape(), gx).expect("token mean dx"),
        );
    }
}

struct MaxPoolOp {
    x: Var,
    tokens: usize,
    argmax: Vec<u32>,
}

impl TapeOp for MaxPoolOp {
    fn backward(&self, t: &Tape, g: &DenseTensor, sink: &mut GradSink) {
        let mut gx = vec![0.0; t.value(self.x).len()];
        let maps = gx.len() / self.tokens;
        for m in 0..maps {
            let base = m * self.tokens;
            for i in 0..self.tokens {
                gx[base + self.argmax[base + i] as usize] += g.data()[base + i];
            }
        }
        sink.accumulate(
            self.x,
            DenseTensor::from_vec(t.value(self.x).shape(), gx).expect("maxpool dx"),
        );
    }
}

fn haar_mul_forward(x: &DenseTensor, m: &DenseTensor, left: bool) -> DenseTensor {
    let s = x.shape();
    let side = s[3];
    let maps = x.len() / (side * side);
    let mut out = vec![0.0; x.len()];
    let xd = x.data();
    let md = m.data();
    out.par_chunks_mut(side * side)
        .enumerate()
        .for_each(|(mi, out_map)| {
            let base = mi * side * side;
            if left {
                // out = M . X
                for i in 0..side {
                    for j in 0..side {
                        let mut acc = 0.0;
                        for k in 0..side {
                            acc += gate_mul(xd[base + k * side + j], md[i * side + k]);
                        }
                        out_map[i * side + j] = acc;
                    }
                }
            } else {
                // out = X . Mt
                for i in 0..side {
                    for j in 0..side {
                        let mut acc = 0.0;
                        for k in 0..side {
                            acc += gate_mul(xd[base + i * side + k], md[j * side + k]);
                        }
                        out_map[i * side + j] = acc;
                    }
                }
            }
        });
    let _ = maps;
    DenseTensor::from_vec(s, out).expect("haar_mul output")
}

struct HaarMulOp {
    x: Var,
    matrix: DenseTensor,
    left: bool,
    side: usize,
}

impl TapeOp for HaarMulOp {
    fn backward(&self, t: &Tape, g: &DenseTensor, sink: &mut GradSink) {
        let side = self.side;
        let md = self.matrix.data();
        let mut gx = vec![0.0; g.len()];
        let gd = g.data();
        gx.par_chunks_mut(side * side)
            .enumerate()
            .for_each(|(mi, gx_map)| {
                let base = mi * side * side;
                if self.left {
                    // y = M X => dX = Mt G
                    for k in 0..side {
                        for j in 0..side {
                            let mut acc = 0.0;
                            for i in 0..side {
                                acc += md[i * side + k] * gd[base + i * side + j];
                            }
                            gx_map[k * side + j] = acc;
                        }
                    }
                } else {
                    // y = X Mt => dX = G M
                    for i in 0..side {
                        for k in 0..side {
                            let mut acc = 0.0;
                            for j in 0..side {
                                acc += gd[base + i * side + j] * md[j * side + k];
                            }
                            gx_map[i * side + k] = acc;
                        }
                    }
                }
            });
        sink.accumulate(
            self.x,
            DenseTensor::from_vec(t.value(self.x).shape(), gx).expect("haar dx"),
        );
    }
}

fn block_diag_forward(x: &DenseTensor, w: &DenseTensor, k: usize, db: usize) -> DenseTensor {
    let s = x.shape();
    let (t_steps, batch, _d, h, wd) = (s[0], s[1], s[2], s[3], s[4]);
    let plane = h * wd;
    let d = k * db;
    let mut out = vec![0.0; x.len()];
    let xd = x.data();
    let wv = w.data();
    out.par_chunks_mut(d * plane)
        .enumerate()
        .for_each(|(ni, out_n)| {
            let x_base = ni * d * plane;
            for l in 0..k {
                for m in 0..h {
                    for n in 0..wd {
                        let w_base = (((l * h + m) * wd + n) * db) * db;
                        for r in 0..db {
                            let mut acc = 0.0;
                            for c in 0..db {
                                let xv = xd[x_base + (l * db + c) * plane + m * wd + n];
                                acc += gate_mul(xv, wv[w_base + r * db + c]);
                            }
                            out_n[(l * db + r) * plane + m * wd + n] = acc;
                        }
                    }
                }
            }
        });
    let _ = (t_steps, batch);
    DenseTensor::from_vec(s, out).expect("block_diag output")
}

struct BlockDiagOp {
    x: Var,
    w: Var,
    k: usize,
    db: usize,
}

impl TapeOp for BlockDiagOp {
    fn backward(&self, t: &Tape, g: &DenseTensor, sink: &mut GradSink) {
        let x = t.value(self.x);
        let w = t.value(self.w);
        let s = x.shape();
        let (h, wd) = (s[3], s[4]);
        let plane = h * wd;
        let (k, db) = (self.k, self.db);
        let d = k * db;
        let n_maps = x.len() / (d * plane);
        let xd = x.data();
        let wv = w.data();
        let gd = g.data();

        let mut gx = vec![0.0; x.len()];
        gx.par_chunks_mut(d * plane)
            .enumerate()
            .for_each(|(ni, gx_n)| {
                let base = ni * d * plane;
                for l in 0..k {
                    for m in 0..h {
                        for n in 0..wd {
                            let w_base = (((l * h + m) * wd + n) * db) * db;
                            for c in 0..db {
                                let mut acc = 0.0;
                                for r in 0..db {
                                    acc += wv[w_base + r * db + c]
                                        * gd[base + (l * db + r) * plane + m * wd + n];
                                }
                                gx_n[(l * db + c) * plane + m * wd + n] = acc;
                            }
                        }
                    }
                }
            });

        let mut gw = vec![0.0; w.len()];
        gw.par_chunks_mut(db * db)
            .enumerate()
            .for_each(|(pos, gw_blk)| {
                // pos indexes (l, m, n) row-major.
                let n = pos % wd;
                let m = (pos / wd) % h;
                let l = pos / (h * wd);
                for ni in 0..n_maps {
                    let base = ni * d * plane;
                    for r in 0..db {
                        let go = gd[base + (l * db + r) * plane + m * wd + n];
                        if go == 0.0 {
                            continue;
                        }
                        for c in 0..db {
                            gw_blk[r * db + c] +=
                                go * xd[base + (l * db + c) * plane + m * wd + n];
                        }
                    }
                }
            });

        sink.accumulate(
            self.x,
            DenseTensor::from_vec(x.shape(), gx).expect("block dx"),
        );
        sink.accumulate(
            self.w,
            DenseTensor::from_vec(w.shape(), gw).expect("block dw"),
        );
    }
}

struct MaskDcOp {
    x: Var,
    plane: usize,
}

impl TapeOp for MaskDcOp {
    fn backward(&self, t: &Tape, g: &DenseTensor, sink: &mut GradSink) {
        let mut gx = g.clone();
        let maps = gx.len() / self.plane;
        for m in 0..maps {
            gx.data_mut()[m * self.plane] = 0.0;
        }
        let _ = t;
        sink.accumulate(self.x, gx);
    }
}

struct CrossEntropyOp {
    logits: Var,
    labels: Vec<usize>,
    probs: DenseTensor,
}

impl TapeOp for CrossEntropyOp {
    fn backward(&self, _t: &Tape, g: &DenseTensor, sink: &mut GradSink) {
        let (batch, k) = (self.probs.shape()[0], self.probs.shape()[1]);
        let scale = g.data()[0] / batch as f64;
        let mut gl = self.probs.scale(scale);
        for (b, label) in self.labels.iter().enumerate() {
            gl.data_mut()[b * k + label] -= scale;
        }
        sink.accumulate(self.logits, gl);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Central finite differences against the tape gradient for a scalar
    /// functional built by `f` over a single leaf tensor.
    fn check_grad(
        shape: &[usize],
        init: &DenseTensor,
        f: impl Fn(&mut Tape, Var) -> Var,
        tol: f64,
    ) {
        let mut tape = Tape::new(true);
        let x = tape.leaf(init.clone());
        let loss = f(&mut tape, x);
        let grads = tape.backward(loss).unwrap();
        let analytic = grads.get(x).expect("leaf grad").clone();

        let h = 1e-5;
        for i in 0..init.len() {
            let mut plus = init.clone();
            plus.data_mut()[i] += h;
            let mut minus = init.clone();
            minus.data_mut()[i] -= h;
            let eval = |t: DenseTensor| {
                let mut tape = Tape::new(false);
                let x = tape.leaf(t);
                let loss = f(&mut tape, x);
                tape.value(loss).data()[0]
            };
            let fd = (eval(plus) - eval(minus)) / (2.0 * h);
            let a = analytic.data()[i];
            let denom = fd.abs().max(a.abs()).max(1e-8);
            assert!(
                (fd - a).abs() / denom < tol,
                "shape {shape:?} index {i}: fd {fd} vs analytic {a}"
            );
        }
    }

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> DenseTensor {
        DenseTensor::from_fn(shape, |_| rng.gen_range(lo..hi))
    }

    fn loss_weights(rng: &mut ChaCha8Rng, shape: &[usize]) -> DenseTensor {
        DenseTensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn elementwise_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let shape = [2usize, 3];
        let x0 = rand_tensor(&mut rng, &shape, -1.0, 1.0);
        let other = rand_tensor(&mut rng, &shape, -1.0, 1.0);
        let w = loss_weights(&mut rng, &shape);
        check_grad(&shape, &x0, |tape, x| {
            let c = tape.constant(other.clone());
            let m = tape.mul(x, c).unwrap();
            let s = tape.add(m, x).unwrap();
            let s = tape.sub(s, c).unwrap();
            let s = tape.scale(s, 1.7);
            tape.sum_weighted(s, w.clone()).unwrap()
        }, 1e-6);
    }

    #[test]
    fn spike_seq_relaxed_grad_all_rules() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let shape = [4usize, 3];
        // Values spread across the surrogate windows.
        let x0 = rand_tensor(&mut rng, &shape, -1.8, 1.8);
        let w = loss_weights(&mut rng, &shape);
        let cfgs = [
            NeuronConfig::lif(1.0, 0.5),
            NeuronConfig::ternary_if(1.0),
            NeuronConfig::binary_if(0.8),
            {
                let mut c = NeuronConfig::ternary_if(0.7);
                c.reset = ResetRule::HardVerbatim;
                c
            },
        ];
        for cfg in cfgs {
            let w = w.clone();
            check_grad(&shape, &x0, move |tape, x| {
                let s = tape.spike_seq(x, cfg, SpikeMode::Relaxed).unwrap();
                tape.sum_weighted(s, w.clone()).unwrap()
            }, 2e-4);
        }
    }

    #[test]
    fn spike_seq_hard_matches_neuron_module() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let inputs = rand_tensor(&mut rng, &[6, 5], -1.5, 1.5);
        for cfg in [NeuronConfig::lif(1.0, 0.5), NeuronConfig::ternary_if(1.0)] {
            let mut tape = Tape::new(false);
            let x = tape.constant(inputs.clone());
            let s = tape.spike_seq(x, cfg, SpikeMode::Hard).unwrap();
            let want = crate::neuron::run_sequence(&inputs, &cfg).unwrap().to_dense();
            assert_eq!(tape.value(s), &want);
        }
    }

    #[test]
    fn conv2d_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for (groups, stride) in [(1usize, 1usize), (2, 1), (2, 2)] {
            let x_shape = [2usize, 1, 4, 5, 5];
            let w_shape = [4usize, 4 / groups, 3, 3];
            let x0 = rand_tensor(&mut rng, &x_shape, -1.0, 1.0);
            let w0 = rand_tensor(&mut rng, &w_shape, -0.5, 0.5);
            let spec = ConvSpec { stride, pad: 1, groups };
            let out_side = (5 + 2 - 3) / stride + 1;
            let w_loss = loss_weights(&mut rng, &[2, 1, 4, out_side, out_side]);

            // Gradient w.r.t. input.
            let (w0c, w_lc) = (w0.clone(), w_loss.clone());
            check_grad(&x_shape, &x0, move |tape, x| {
                let w = tape.constant(w0c.clone());
                let y = tape.conv2d(x, w, spec).unwrap();
                tape.sum_weighted(y, w_lc.clone()).unwrap()
            }, 1e-5);

            // Gradient w.r.t. weights.
            let x0c = x0.clone();
            check_grad(&w_shape, &w0, move |tape, w| {
                let x = tape.constant(x0c.clone());
                let y = tape.conv2d(x, w, spec).unwrap();
                tape.sum_weighted(y, w_loss.clone()).unwrap()
            }, 1e-5);
        }
    }

    #[test]
    fn batch_norm_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x_shape = [2usize, 2, 3, 2, 2];
        let x0 = rand_tensor(&mut rng, &x_shape, -1.0, 1.0);
        let gamma0 = rand_tensor(&mut rng, &[3], 0.5, 1.5);
        let beta0 = rand_tensor(&mut rng, &[3], -0.3, 0.3);
        let w_loss = loss_weights(&mut rng, &x_shape);

        let (g0, b0, wl) = (gamma0.clone(), beta0.clone(), w_loss.clone());
        check_grad(&x_shape, &x0, move |tape, x| {
            let g = tape.constant(g0.clone());
            let b = tape.constant(b0.clone());
            let (y, _, _) = tape.batch_norm(x, g, b, &BnMode::Train, 1e-5).unwrap();
            tape.sum_weighted(y, wl.clone()).unwrap()
        }, 1e-4);

        let (x0c, b0c, wl) = (x0.clone(), beta0.clone(), w_loss.clone());
        check_grad(&[3], &gamma0, move |tape, g| {
            let x = tape.leaf(x0c.clone());
            let b = tape.constant(b0c.clone());
            let (y, _, _) = tape.batch_norm(x, g, b, &BnMode::Train, 1e-5).unwrap();
            tape.sum_weighted(y, wl.clone()).unwrap()
        }, 1e-5);

        let (x0c, g0c) = (x0.clone(), gamma0.clone());
        check_grad(&[3], &beta0, move |tape, b| {
            let x = tape.leaf(x0c.clone());
            let g = tape.constant(g0c.clone());
            let (y, _, _) = tape.batch_norm(x, g, b, &BnMode::Train, 1e-5).unwrap();
            tape.sum_weighted(y, w_loss.clone()).unwrap()
        }, 1e-5);
    }

    #[test]
    fn linear_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x0 = rand_tensor(&mut rng, &[3, 4], -1.0, 1.0);
        let w0 = rand_tensor(&mut rng, &[2, 4], -1.0, 1.0);
        let b0 = rand_tensor(&mut rng, &[2], -0.5, 0.5);
        let wl = loss_weights(&mut rng, &[3, 2]);

        let (wc, bc, wlc) = (w0.clone(), b0.clone(), wl.clone());
        check_grad(&[3, 4], &x0, move |tape, x| {
            let w = tape.constant(wc.clone());
            let b = tape.constant(bc.clone());
            let y = tape.linear(x, w, b).unwrap();
            tape.sum_weighted(y, wlc.clone()).unwrap()
        }, 1e-6);

        let (xc, bc, wlc) = (x0.clone(), b0.clone(), wl.clone());
        check_grad(&[2, 4], &w0, move |tape, w| {
            let x = tape.constant(xc.clone());
            let b = tape.constant(bc.clone());
            let y = tape.linear(x, w, b).unwrap();
            tape.sum_weighted(y, wlc.clone()).unwrap()
        }, 1e-6);

        let (xc, wc) = (x0.clone(), w0.clone());
        check_grad(&[2], &b0, move |tape, b| {
            let x = tape.constant(xc.clone());
            let w = tape.constant(wc.clone());
            let y = tape.linear(x, w, b).unwrap();
            tape.sum_weighted(y, wl.clone()).unwrap()
        }, 1e-6);
    }

    #[test]
    fn gap_and_maskdc_and_maxpool_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x_shape = [2usize, 2, 2, 2, 3];
        let x0 = rand_tensor(&mut rng, &x_shape, -1.0, 1.0);
        let wl_gap = loss_weights(&mut rng, &[2, 2]);
        check_grad(&x_shape, &x0, {
            let wl = wl_gap.clone();
            move |tape, x| {
                let y = tape.gap_time_tokens(x).unwrap();
                tape.sum_weighted(y, wl.clone()).unwrap()
            }
        }, 1e-6);

        let wl = loss_weights(&mut rng, &x_shape);
        check_grad(&x_shape, &x0, {
            let wl = wl.clone();
            move |tape, x| {
                let y = tape.mask_dc(x).unwrap();
                tape.sum_weighted(y, wl.clone()).unwrap()
            }
        }, 1e-6);

        check_grad(&x_shape, &x0, {
            let wl = wl.clone();
            move |tape, x| {
                let y = tape.token_mean_broadcast(x).unwrap();
                tape.sum_weighted(y, wl.clone()).unwrap()
            }
        }, 1e-6);

        // Max pool has kinks at ties; random values avoid them a.s.
        check_grad(&x_shape, &x0, move |tape, x| {
            let y = tape.maxpool_tokens(x).unwrap();
            tape.sum_weighted(y, wl.clone()).unwrap()
        }, 1e-5);
    }

    #[test]
    fn haar_mul_grads_and_equivalence() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let w = crate::wavelet::HaarMatrix::for_side(4).unwrap();
        let x_shape = [2usize, 1, 2, 4, 4];
        let x0 = rand_tensor(&mut rng, &x_shape, -1.0, 1.0);
        let wl = loss_weights(&mut rng, &x_shape);
        for left in [false, true] {
            let m = w.matrix().clone();
            let wl = wl.clone();
            check_grad(&x_shape, &x0, move |tape, x| {
                let y = tape.haar_mul(x, m.clone(), left).unwrap();
                tape.sum_weighted(y, wl.clone()).unwrap()
            }, 1e-6);
        }

        // Forward equivalence with plain matrix products per map.
        let mut tape = Tape::new(false);
        let x = tape.constant(x0.clone());
        let right = tape.haar_mul(x, w.matrix().clone(), false).unwrap();
        let full = tape.haar_mul(right, w.matrix().clone(), true).unwrap();
        for map in 0..4 {
            let m0 = DenseTensor::from_vec(
                &[4, 4],
                x0.data()[map * 16..(map + 1) * 16].to_vec(),
            )
            .unwrap();
            let want = w.matrix().matmul(&m0).unwrap().matmul(&w.transpose()).unwrap();
            let got = &tape.value(full).data()[map * 16..(map + 1) * 16];
            for (a, b) in got.iter().zip(want.data()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn block_diag_grads_and_spike_core_equivalence() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (k, db, h, wd) = (2usize, 3usize, 2usize, 2usize);
        let d = k * db;
        let x_shape = [2usize, 1, d, h, wd];
        let w_shape = [k, h, wd, db, db];
        let x0 = rand_tensor(&mut rng, &x_shape, -1.0, 1.0);
        let w0 = rand_tensor(&mut rng, &w_shape, -1.0, 1.0);
        let wl = loss_weights(&mut rng, &x_shape);

        let (wc, wlc) = (w0.clone(), wl.clone());
        check_grad(&x_shape, &x0, move |tape, x| {
            let w = tape.constant(wc.clone());
            let y = tape.block_diag(x, w).unwrap();
            tape.sum_weighted(y, wlc.clone()).unwrap()
        }, 1e-6);

        let x0c = x0.clone();
        check_grad(&w_shape, &w0, move |tape, w| {
            let x = tape.constant(x0c.clone());
            let y = tape.block_diag(x, w).unwrap();
            tape.sum_weighted(y, wl.clone()).unwrap()
        }, 1e-6);

        // Equivalence against the spike_core kernel at one position.
        let bdw = crate::spike::BlockDiagonalWeight::new(k, d, h, wd, w0.clone()).unwrap();
        let mut tape = Tape::new(false);
        let x = tape.constant(x0.clone());
        let w = tape.constant(w0.clone());
        let y = tape.block_diag(x, w).unwrap();
        for (m, n) in [(0usize, 0usize), (1, 1)] {
            let xv = DenseTensor::from_fn(&[k, db], |i| {
                let (l, c) = (i / db, i % db);
                x0.data()[((l * db + c) * h + m) * wd + n]
            });
            let want = crate::spike::block_diag_apply(&xv, &bdw, (m, n)).unwrap();
            for l in 0..k {
                for r in 0..db {
                    let got = tape.value(y).data()[((l * db + r) * h + m) * wd + n];
                    assert!((got - want.data()[l * db + r]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn cross_entropy_grad_and_value() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let logits0 = rand_tensor(&mut rng, &[3, 4], -2.0, 2.0);
        let labels = vec![0usize, 3, 1];
        check_grad(&[3, 4], &logits0, move |tape, x| {
            tape.cross_entropy(x, &labels).unwrap()
        }, 1e-6);

        // Uniform logits give ln(K).
        let mut tape = Tape::new(false);
        let x = tape.constant(DenseTensor::zeros(&[2, 5]));
        let l = tape.cross_entropy(x, &[1, 2]).unwrap();
        assert!((tape.value(l).data()[0] - 5.0_f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn grad_disabled_tape_records_no_ops() {
        let mut tape = Tape::new(false);
        let x = tape.leaf(DenseTensor::zeros(&[2]));
        let y = tape.scale(x, 2.0);
        assert!(tape.backward(y).is_err() || tape.nodes[y.0].op.is_none());
    }
}
