//! Ternary spike tensors and the multiplication-free accumulation kernels.
//!
//! A [`SpikeTensor`] carries values restricted to {-1, 0, +1}; binary
//! polarity additionally forbids -1. The kernels here consume spikes with
//! sign-gated additions only — no general multiply touches the activation
//! side — and are bit-identical to a dense matmul over the same inputs
//! because the accumulation order is the same ascending index.

use crate::error::{dim_err, Error, Result};
use crate::tensor::DenseTensor;
use serde::{Deserialize, Serialize};

/// Spike alphabet selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Polarity {
    /// Values in {0, 1}.
    Binary,
    /// Values in {-1, 0, 1}.
    Ternary,
}

/// A tensor of spikes, conventionally shaped `[T, C, H, W]` with the
/// timestep axis leading.
#[derive(Debug, Clone, PartialEq)]
pub struct SpikeTensor {
    shape: Vec<usize>,
    values: Vec<i8>,
    polarity: Polarity,
}

impl SpikeTensor {
    /// Validates the alphabet at construction: entries must lie in
    /// {-1, 0, +1}, and binary polarity forbids -1.
    pub fn from_values(shape: &[usize], values: Vec<i8>, polarity: Polarity) -> Result<Self> {
        let expect: usize = shape.iter().product();
        if expect != values.len() {
            return Err(dim_err(
                "spike_from_values",
                format!("shape {:?} wants {} values, got {}", shape, expect, values.len()),
            ));
        }
        for (i, v) in values.iter().enumerate() {
            match v {
                0 | 1 => {}
                -1 => {
                    if polarity == Polarity::Binary {
                        return Err(Error::Domain(format!(
                            "binary spike tensor holds -1 at index {i}"
                        )));
                    }
                }
                other => {
                    return Err(Error::Domain(format!(
                        "spike value {other} at index {i} outside {{-1, 0, 1}}"
                    )));
                }
            }
        }
        Ok(SpikeTensor {
            shape: shape.to_vec(),
            values,
            polarity,
        })
    }

    pub fn zeros(shape: &[usize], polarity: Polarity) -> Self {
        SpikeTensor {
            shape: shape.to_vec(),
            values: vec![0; shape.iter().product()],
            polarity,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn polarity(&self) -> Polarity {
        self.polarity
    }

    pub fn values(&self) -> &[i8] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Number of nonzero spikes.
    pub fn nonzero_count(&self) -> usize {
        self.values.iter().filter(|v| **v != 0).count()
    }

    /// Fraction of nonzero entries.
    pub fn firing_rate(&self) -> f64 {
        if self.values.is_empty() {
            0.0
        } else {
            self.nonzero_count() as f64 / self.values.len() as f64
        }
    }

    pub fn to_dense(&self) -> DenseTensor {
        DenseTensor::from_fn(&self.shape, |i| self.values[i] as f64)
    }

    /// View of timestep `t`, assuming the leading axis is time.
    pub fn step(&self, t: usize) -> &[i8] {
        let stride: usize = self.shape[1..].iter().product();
        &self.values[t * stride..(t + 1) * stride]
    }

    /// Mean over the leading (time) axis, as a dense tensor of the
    /// remaining shape.
    pub fn time_mean(&self) -> DenseTensor {
        let t_steps = self.shape[0];
        let stride: usize = self.shape[1..].iter().product();
        let mut acc = vec![0.0; stride];
        for t in 0..t_steps {
            for (a, v) in acc.iter_mut().zip(self.step(t)) {
                *a += *v as f64;
            }
        }
        let inv = 1.0 / t_steps.max(1) as f64;
        for a in acc.iter_mut() {
            *a *= inv;
        }
        DenseTensor::from_vec(&self.shape[1..], acc).expect("time_mean shape")
    }
}

/// Accumulates `weights` rows gated by spike signs.
///
/// `out[j] = Σ_i sign(spike[i]) * weights[j, i]` over nonzero spikes; the
/// inner loop performs only additions and subtractions. The result is
/// bit-identical to the dense product with spikes cast to reals.
pub fn spike_matmul(spikes: &[i8], weights: &DenseTensor) -> Result<DenseTensor> {
    if weights.shape().len() != 2 {
        return Err(dim_err("spike_matmul", "weights must be a matrix"));
    }
    let (n_out, n_in) = (weights.shape()[0], weights.shape()[1]);
    if n_in != spikes.len() {
        return Err(dim_err(
            "spike_matmul",
            format!("weights inner dim {} vs spike length {}", n_in, spikes.len()),
        ));
    }
    let w = weights.data();
    let mut out = vec![0.0; n_out];
    for (j, o) in out.iter_mut().enumerate() {
        let row = &w[j * n_in..(j + 1) * n_in];
        let mut acc = 0.0;
        for (i, s) in spikes.iter().enumerate() {
            match s {
                1 => acc += row[i],
                -1 => acc -= row[i],
                _ => {}
            }
        }
        *o = acc;
    }
    DenseTensor::from_vec(&[n_out], out)
}

/// Per-position block-diagonal weights: `k` square blocks of side
/// `block_dim` at each of `h * w` spatial positions.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockDiagonalWeight {
    k: usize,
    block_dim: usize,
    h: usize,
    w: usize,
    /// Layout `[k, h, w, block_dim, block_dim]`, row-major.
    blocks: DenseTensor,
}

impl BlockDiagonalWeight {
    pub fn new(k: usize, embed_dim: usize, h: usize, w: usize, blocks: DenseTensor) -> Result<Self> {
        if k == 0 || embed_dim % k != 0 {
            return Err(Error::Config(format!(
                "embed dim {embed_dim} not divisible by block count {k}"
            )));
        }
        let block_dim = embed_dim / k;
        let want = [k, h, w, block_dim, block_dim];
        if blocks.shape() != want {
            return Err(dim_err(
                "block_diagonal_weight",
                format!("blocks shape {:?}, want {:?}", blocks.shape(), want),
            ));
        }
        Ok(BlockDiagonalWeight {
            k,
            block_dim,
            h,
            w,
            blocks,
        })
    }

    pub fn identity(k: usize, embed_dim: usize, h: usize, w: usize) -> Result<Self> {
        if k == 0 || embed_dim % k != 0 {
            return Err(Error::Config(format!(
                "embed dim {embed_dim} not divisible by block count {k}"
            )));
        }
        let db = embed_dim / k;
        let mut blocks = DenseTensor::zeros(&[k, h, w, db, db]);
        let data = blocks.data_mut();
        for l in 0..k {
            for m in 0..h {
                for n in 0..w {
                    let base = (((l * h + m) * w + n) * db) * db;
                    for r in 0..db {
                        data[base + r * db + r] = 1.0;
                    }
                }
            }
        }
        BlockDiagonalWeight::new(k, embed_dim, h, w, blocks)
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn block_dim(&self) -> usize {
        self.block_dim
    }

    pub fn spatial(&self) -> (usize, usize) {
        (self.h, self.w)
    }

    pub fn blocks(&self) -> &DenseTensor {
        &self.blocks
    }

    /// Row-major `block_dim x block_dim` slice for block `l` at (m, n).
    pub fn block(&self, l: usize, m: usize, n: usize) -> &[f64] {
        let db = self.block_dim;
        let base = (((l * self.h + m) * self.w + n) * db) * db;
        &self.blocks.data()[base..base + db * db]
    }

    /// Total learnable scalars: `h * w * k * block_dim^2`.
    pub fn param_count(&self) -> usize {
        self.h * self.w * self.k * self.block_dim * self.block_dim
    }
}

/// Applies the position-(m, n) blocks to `x` shaped `[k, block_dim]`:
/// each block row `l` maps independently, `y^l = W^l_{m,n} x^l`.
/// Equivalent to multiplying by the assembled D x D block-diagonal matrix.
pub fn block_diag_apply(
    x: &DenseTensor,
    w: &BlockDiagonalWeight,
    pos: (usize, usize),
) -> Result<DenseTensor> {
    let db = w.block_dim();
    if x.shape() != [w.k(), db] {
        return Err(Error::Config(format!(
            "input blocks {:?} do not match weight layout [{}, {}]",
            x.shape(),
            w.k(),
            db
        )));
    }
    let (m, n) = pos;
    let (h, wd) = w.spatial();
    if m >= h || n >= wd {
        return Err(Error::Domain(format!(
            "position ({m}, {n}) outside {h} x {wd} grid"
        )));
    }
    let xv = x.data();
    let mut out = vec![0.0; w.k() * db];
    for l in 0..w.k() {
        let blk = w.block(l, m, n);
        for r in 0..db {
            let mut acc = 0.0;
            for c in 0..db {
                acc += blk[r * db + c] * xv[l * db + c];
            }
            out[l * db + r] = acc;
        }
    }
    DenseTensor::from_vec(&[w.k(), db], out)
}

/// Splits `D` channels into `k` groups folded onto the leading axis:
/// `[T, D, H, W] -> [T*k, D/k, H, W]`, block-major (all timesteps of
/// block 0, then block 1, ...). `inverse_reshape_for_blocks` restores the
/// original exactly.
pub fn reshape_for_blocks(s: &SpikeTensor, k: usize) -> Result<SpikeTensor> {
    let shape = s.shape();
    if shape.len() != 4 {
        return Err(dim_err(
            "reshape_for_blocks",
            format!("expected [T, D, H, W], got {:?}", shape),
        ));
    }
    let (t_steps, d, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    if k == 0 || d % k != 0 {
        return Err(Error::Config(format!(
            "channel count {d} not divisible by block count {k}"
        )));
    }
    let db = d / k;
    let plane = h * w;
    let mut out = vec![0i8; s.len()];
    for l in 0..k {
        for t in 0..t_steps {
            for c in 0..db {
                let src = ((t * d + l * db + c) * plane)..((t * d + l * db + c + 1) * plane);
                let dst_idx = ((l * t_steps + t) * db + c) * plane;
                out[dst_idx..dst_idx + plane].copy_from_slice(&s.values()[src]);
            }
        }
    }
    SpikeTensor::from_values(&[t_steps * k, db, h, w], out, s.polarity())
}

/// Inverse of [`reshape_for_blocks`].
pub fn inverse_reshape_for_blocks(s: &SpikeTensor, k: usize) -> Result<SpikeTensor> {
    let shape = s.shape();
    if shape.len() != 4 {
        return Err(dim_err(
            "inverse_reshape_for_blocks",
            format!("expected [T*k, D/k, H, W], got {:?}", shape),
        ));
    }
    let (tk, db, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    if k == 0 || tk % k != 0 {
        return Err(Error::Config(format!(
            "leading axis {tk} not divisible by block count {k}"
        )));
    }
    let t_steps = tk / k;
    let d = db * k;
    let plane = h * w;
    let mut out = vec![0i8; s.len()];
    for l in 0..k {
        for t in 0..t_steps {
            for c in 0..db {
                let src_idx = ((l * t_steps + t) * db + c) * plane;
                let dst_idx = (t * d + l * db + c) * plane;
                out[dst_idx..dst_idx + plane]
                    .copy_from_slice(&s.values()[src_idx..src_idx + plane]);
            }
        }
    }
    SpikeTensor::from_values(&[t_steps, d, h, w], out, s.polarity())
}
