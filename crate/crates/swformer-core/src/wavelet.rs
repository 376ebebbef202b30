//! Haar transforms: exact matrix construction, exact 2D forward/inverse,
//! and the spiking variants that consume ternary (or binary) spikes
//! through integrate-and-fire stages.
//!
//! The transform matrix follows the recursion
//! `W(1) = [1]`, `W(n) = (1/sqrt(2)) * stack(W(n-1) kron [1, 1];
//! I_{2^(n-2)} kron [1, -1])`, which keeps `W(n)` square
//! (`2^(n-1) x 2^(n-1)`) and orthonormal, so the inverse transform
//! recovers the input exactly.

use crate::error::{dim_err, Error, Result};
use crate::neuron::{step_inner, MembraneState, NeuronConfig};
use crate::spike::{spike_matmul, Polarity, SpikeTensor};
use crate::tensor::{mse, DenseTensor};

/// Orthonormal Haar transformation matrix of side `2^(n-1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct HaarMatrix {
    n: usize,
    m: DenseTensor,
}

impl HaarMatrix {
    /// Builds level `n >= 1`. Level 1 is the 1x1 identity.
    pub fn new(n: usize) -> Result<Self> {
        if n < 1 {
            return Err(Error::Domain("haar level must be >= 1".into()));
        }
        let mut m = DenseTensor::from_vec(&[1, 1], vec![1.0])?;
        for level in 2..=n {
            let prev_side = 1usize << (level - 2);
            let side = prev_side * 2;
            let mut next = DenseTensor::zeros(&[side, side]);
            let inv_sqrt2 = 1.0 / 2.0_f64.sqrt();
            // Top half: W(n-1) kron [1, 1].
            for i in 0..prev_side {
                for j in 0..prev_side {
                    let v = m.at(i, j) * inv_sqrt2;
                    next.set(i, 2 * j, v);
                    next.set(i, 2 * j + 1, v);
                }
            }
            // Bottom half: I kron [1, -1], identity sized 2^(n-2) so the
            // stack stays square.
            for i in 0..prev_side {
                next.set(prev_side + i, 2 * i, inv_sqrt2);
                next.set(prev_side + i, 2 * i + 1, -inv_sqrt2);
            }
            m = next;
        }
        Ok(HaarMatrix { n, m })
    }

    /// Builds the matrix whose side matches `side = 2^(n-1)`.
    pub fn for_side(side: usize) -> Result<Self> {
        if side == 0 || !side.is_power_of_two() {
            return Err(Error::Domain(format!(
                "transform side {side} is not a power of two"
            )));
        }
        HaarMatrix::new(side.trailing_zeros() as usize + 1)
    }

    pub fn level(&self) -> usize {
        self.n
    }

    pub fn side(&self) -> usize {
        self.m.shape()[0]
    }

    pub fn matrix(&self) -> &DenseTensor {
        &self.m
    }

    pub fn transpose(&self) -> DenseTensor {
        self.m.transpose2d()
    }
}

/// How a transform was computed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TransformMode {
    Exact,
    SpikingBinary,
    SpikingTernary,
}

/// Wavelet-domain output of a forward or inverse transform.
#[derive(Debug, Clone)]
pub enum TransformCoeffs {
    Dense(DenseTensor),
    Spikes(SpikeTensor),
}

#[derive(Debug, Clone)]
pub struct TransformResult {
    pub coeffs: TransformCoeffs,
    pub mode: TransformMode,
    /// Timesteps used by spiking modes; 1 for exact.
    pub timesteps: usize,
    /// Per-row decode scales for spiking modes (ones for exact).
    pub row_scale: Vec<f64>,
    /// Per-column decode scales for spiking modes (ones for exact).
    pub col_scale: Vec<f64>,
}

impl TransformResult {
    /// Spatial shape of the coefficients (ignoring any time axis).
    pub fn spatial_shape(&self) -> Vec<usize> {
        match &self.coeffs {
            TransformCoeffs::Dense(t) => t.shape().to_vec(),
            TransformCoeffs::Spikes(s) => s.shape()[1..].to_vec(),
        }
    }

    /// Rate-decodes spiking coefficients (or returns the dense values):
    /// `value[i, j] = time_mean[i, j] * row_scale[i] * col_scale[j]`.
    pub fn decode(&self) -> DenseTensor {
        match &self.coeffs {
            TransformCoeffs::Dense(t) => t.clone(),
            TransformCoeffs::Spikes(s) => {
                let mut mean = s.time_mean();
                let side = self.row_scale.len();
                for i in 0..side {
                    for j in 0..self.col_scale.len() {
                        mean.data_mut()[i * self.col_scale.len() + j] *=
                            self.row_scale[i] * self.col_scale[j];
                    }
                }
                mean
            }
        }
    }
}

fn require_square_pow2(x: &DenseTensor) -> Result<usize> {
    if x.shape().len() != 2 || x.shape()[0] != x.shape()[1] {
        return Err(dim_err(
            "haar2d",
            format!("expected a square matrix, got {:?}", x.shape()),
        ));
    }
    let s = x.shape()[0];
    if !s.is_power_of_two() {
        return Err(Error::Domain(format!(
            "image side {s} is not a power of two"
        )));
    }
    Ok(s)
}

/// Exact 2D forward transform: `H_f = W x Wt`.
pub fn haar2d_forward_exact(x: &DenseTensor, w: &HaarMatrix) -> Result<TransformResult> {
    let s = require_square_pow2(x)?;
    if s != w.side() {
        return Err(dim_err(
            "haar2d_forward_exact",
            format!("image side {s} vs matrix side {}", w.side()),
        ));
    }
    let coeffs = w.matrix().matmul(x)?.matmul(&w.transpose())?;
    Ok(TransformResult {
        coeffs: TransformCoeffs::Dense(coeffs),
        mode: TransformMode::Exact,
        timesteps: 1,
        row_scale: vec![1.0; s],
        col_scale: vec![1.0; s],
    })
}

/// Exact 2D inverse: `x = Wt H_f W`.
pub fn haar2d_inverse_exact(coeffs: &DenseTensor, w: &HaarMatrix) -> Result<DenseTensor> {
    let s = require_square_pow2(coeffs)?;
    if s != w.side() {
        return Err(dim_err(
            "haar2d_inverse_exact",
            format!("coeff side {s} vs matrix side {}", w.side()),
        ));
    }
    w.transpose().matmul(coeffs)?.matmul(w.matrix())
}

/// Zeroes the (0, 0) coefficient of every channel/timestep.
pub fn mask_dc(mut r: TransformResult) -> TransformResult {
    let spatial = r.spatial_shape();
    let plane: usize = spatial.iter().product();
    match &mut r.coeffs {
        TransformCoeffs::Dense(t) => {
            let maps = t.len() / plane;
            let data = t.data_mut();
            for m in 0..maps {
                data[m * plane] = 0.0;
            }
        }
        TransformCoeffs::Spikes(s) => {
            let shape = s.shape().to_vec();
            let polarity = s.polarity();
            let mut vals = s.values().to_vec();
            let maps = vals.len() / plane;
            for m in 0..maps {
                vals[m * plane] = 0;
            }
            *s = SpikeTensor::from_values(&shape, vals, polarity).expect("mask keeps alphabet");
        }
    }
    r
}

/// Transform direction for the spiking variants.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Forward,
    Inverse,
}

/// Scale bookkeeping for range-normalized spiking stages.
///
/// A spike train over `T` steps can only represent rates in [-1, 1],
/// while raw Haar coefficients grow with the transform side. Each stage
/// is therefore normalized per output channel by the true value range of
/// that channel — the L1 norm of the corresponding row of the exact
/// composed operator applied so far (inputs are rate-coded, so |value|
/// is at most 1). The normalization telescopes through the pipeline and
/// is removed at decode: a coefficient of value `v` and range `r`
/// travels as a spike rate of `v / (r * v_th)`, so `v_th = 1` covers the
/// full range and smaller thresholds trade headroom for extra spikes.
#[derive(Debug, Clone)]
struct ScaleState {
    /// Exact composed operator for the row axis (left products).
    left: DenseTensor,
    /// Exact composed operator for the column axis (right products).
    right: DenseTensor,
    /// Per-row decode scale, `v_th^stages * l1(left row)`.
    row: Vec<f64>,
    /// Per-column decode scale.
    col: Vec<f64>,
}

impl ScaleState {
    fn unit(side: usize) -> Self {
        ScaleState {
            left: DenseTensor::identity(side),
            right: DenseTensor::identity(side),
            row: vec![1.0; side],
            col: vec![1.0; side],
        }
    }
}

fn row_l1_norms(m: &DenseTensor) -> Vec<f64> {
    let (rows, cols) = (m.shape()[0], m.shape()[1]);
    (0..rows)
        .map(|j| {
            (0..cols)
                .map(|k| m.at(j, k).abs())
                .sum::<f64>()
                .max(f64::MIN_POSITIVE)
        })
        .collect()
}

/// Builds one stage matrix: fold the incoming per-channel scales into
/// `base` and divide each output row by its true range `sigma`. The new
/// decode scale for the mixed axis is `v_th * sigma`.
fn stage_matrix(
    base: &DenseTensor,
    in_scale: &[f64],
    sigma: &[f64],
) -> DenseTensor {
    let (rows, cols) = (base.shape()[0], base.shape()[1]);
    let mut m = DenseTensor::zeros(&[rows, cols]);
    for j in 0..rows {
        for k in 0..cols {
            m.set(j, k, base.at(j, k) * in_scale[k] / sigma[j]);
        }
    }
    m
}

/// One spiking matrix-product stage: every timestep's spike frame is
/// combined (spike-gated additions only) and fed through a stateful IF
/// layer shared across the sequence.
fn spiking_stage(
    spikes: &SpikeTensor,
    matrix: &DenseTensor,
    left: bool,
    cfg: &NeuronConfig,
) -> Result<SpikeTensor> {
    let shape = spikes.shape().to_vec();
    let (t_steps, s) = (shape[0], shape[1]);
    let mut state = MembraneState::zeros(&[s, s]);
    let mut out = vec![0i8; spikes.len()];
    for t in 0..t_steps {
        let frame = spikes.step(t);
        let mut drive = DenseTensor::zeros(&[s, s]);
        if left {
            // y = M * X: column j of y is M applied to column j of X.
            for j in 0..s {
                let col: Vec<i8> = (0..s).map(|i| frame[i * s + j]).collect();
                let y = spike_matmul(&col, matrix)?;
                for i in 0..s {
                    drive.data_mut()[i * s + j] = y.data()[i];
                }
            }
        } else {
            // y = X * Mt: row i of y equals M applied to row i of X.
            for i in 0..s {
                let row = &frame[i * s..(i + 1) * s];
                let y = spike_matmul(row, matrix)?;
                for j in 0..s {
                    drive.data_mut()[i * s + j] = y.data()[j];
                }
            }
        }
        let s_out = step_inner(&mut state, &drive, cfg)?;
        out[t * s * s..(t + 1) * s * s].copy_from_slice(s_out.values());
    }
    SpikeTensor::from_values(&shape, out, cfg.polarity)
}

fn check_spiking_input(x: &SpikeTensor, w: &HaarMatrix) -> Result<usize> {
    let shape = x.shape();
    if shape.len() != 3 || shape[1] != shape[2] {
        return Err(dim_err(
            "haar2d_spiking",
            format!("expected [T, S, S], got {:?}", shape),
        ));
    }
    if !shape[1].is_power_of_two() {
        return Err(Error::Domain(format!(
            "transform side {} is not a power of two",
            shape[1]
        )));
    }
    if shape[1] != w.side() {
        return Err(dim_err(
            "haar2d_spiking",
            format!("side {} vs matrix side {}", shape[1], w.side()),
        ));
    }
    Ok(shape[1])
}

fn spiking_pipeline(
    x: &SpikeTensor,
    w: &HaarMatrix,
    cfg: &NeuronConfig,
    directions: &[Direction],
) -> Result<TransformResult> {
    cfg.validate()?;
    if cfg.beta != 1.0 {
        return Err(Error::Config(
            "spiking transforms require IF neurons (beta = 1)".into(),
        ));
    }
    let side = check_spiking_input(x, w)?;
    let mut scales = ScaleState::unit(side);
    let mut spikes = x.clone();
    for dir in directions {
        let base = match dir {
            Direction::Forward => w.matrix().clone(),
            Direction::Inverse => w.transpose(),
        };
        // First product of the pair mixes over columns (y = X . Bt), the
        // second mixes over rows (y = B . X), matching
        // H_f = Spk(W . Spk(X . Wt)) and X = Spk(Wt . Spk(H_f . W)).
        scales.right = base.matmul(&scales.right)?;
        let sigma = row_l1_norms(&scales.right);
        let m1 = stage_matrix(&base, &scales.col, &sigma);
        spikes = spiking_stage(&spikes, &m1, false, cfg)?;
        scales.col = sigma.iter().map(|s| s * cfg.v_th).collect();

        scales.left = base.matmul(&scales.left)?;
        let sigma = row_l1_norms(&scales.left);
        let m2 = stage_matrix(&base, &scales.row, &sigma);
        spikes = spiking_stage(&spikes, &m2, true, cfg)?;
        scales.row = sigma.iter().map(|s| s * cfg.v_th).collect();
    }
    let mode = match cfg.polarity {
        Polarity::Binary => TransformMode::SpikingBinary,
        Polarity::Ternary => TransformMode::SpikingTernary,
    };
    Ok(TransformResult {
        coeffs: TransformCoeffs::Spikes(spikes),
        mode,
        timesteps: x.shape()[0],
        row_scale: scales.row,
        col_scale: scales.col,
    })
}

/// Spiking 2D Haar transform over `[T, S, S]` spike frames: each matrix
/// product consumes spikes via sign-gated accumulation and is re-spiked
/// through an IF layer (ternary by default; binary for comparison).
/// The time-average of the output, rescaled by the recorded decode
/// scales, approximates the exact transform.
pub fn haar2d_spiking(
    x: &SpikeTensor,
    w: &HaarMatrix,
    cfg: &NeuronConfig,
    direction: Direction,
) -> Result<TransformResult> {
    spiking_pipeline(x, w, cfg, &[direction])
}

/// Full spiking round trip: forward then inverse, four IF stages total.
pub fn haar2d_spiking_roundtrip(
    x: &SpikeTensor,
    w: &HaarMatrix,
    cfg: &NeuronConfig,
) -> Result<TransformResult> {
    spiking_pipeline(x, w, cfg, &[Direction::Forward, Direction::Inverse])
}

/// Deterministic rate coding: an IF encoder with unit threshold turns a
/// real image in [0, 1] into `T` binary spike frames; the spike rate of a
/// pixel tracks its value within 1/T.
pub fn rate_encode(x: &DenseTensor, t_steps: usize) -> Result<SpikeTensor> {
    if t_steps == 0 {
        return Err(Error::Domain("rate coding needs T >= 1".into()));
    }
    let cfg = NeuronConfig::binary_if(1.0);
    let n = x.len();
    let mut state = MembraneState::zeros(x.shape());
    let mut out = vec![0i8; n * t_steps];
    for t in 0..t_steps {
        let s = step_inner(&mut state, x, &cfg)?;
        out[t * n..(t + 1) * n].copy_from_slice(s.values());
    }
    let mut shape = vec![t_steps];
    shape.extend_from_slice(x.shape());
    SpikeTensor::from_values(&shape, out, Polarity::Binary)
}

/// Peak signal-to-noise ratio in dB; `f64::INFINITY` when the images
/// match exactly.
pub fn psnr(reference: &DenseTensor, reconstruction: &DenseTensor, peak: f64) -> Result<f64> {
    if !(peak > 0.0) {
        return Err(Error::Domain(format!("peak must be > 0, got {peak}")));
    }
    let err = mse(reference, reconstruction)?;
    if err == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (peak * peak / err).log10())
}

/// Center-pads a 2D image with zeros so its side becomes the next power
/// of two. Returns the padded image and the (row, col) offset of the
/// original content.
pub fn pad_to_pow2(x: &DenseTensor) -> Result<(DenseTensor, (usize, usize))> {
    if x.shape().len() != 2 {
        return Err(dim_err("pad_to_pow2", "expected a 2D image"));
    }
    let (h, w) = (x.shape()[0], x.shape()[1]);
    let side = h.max(w).next_power_of_two();
    if h == side && w == side {
        return Ok((x.clone(), (0, 0)));
    }
    let off = ((side - h) / 2, (side - w) / 2);
    let mut out = DenseTensor::zeros(&[side, side]);
    for r in 0..h {
        for c in 0..w {
            let v = x.data()[r * w + c];
            out.data_mut()[(r + off.0) * side + (c + off.1)] = v;
        }
    }
    Ok((out, off))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    #[test]
    fn level_one_is_unit() {
        let w = HaarMatrix::new(1).unwrap();
        assert_eq!(w.matrix().data(), &[1.0]);
    }

    #[test]
    fn level_two_matches_hand_value() {
        let w = HaarMatrix::new(2).unwrap();
        let r = 1.0 / 2.0_f64.sqrt();
        let want = [r, r, r, -r];
        for (a, b) in w.matrix().data().iter().zip(want.iter()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn orthonormal_through_level_eight() {
        for n in 1..=8 {
            let w = HaarMatrix::new(n).unwrap();
            let prod = w.matrix().matmul(&w.transpose()).unwrap();
            let eye = DenseTensor::identity(w.side());
            assert!(
                prod.max_abs_diff(&eye) < 1e-12,
                "level {n} not orthonormal"
            );
        }
    }

    #[test]
    fn dc_row_is_constant() {
        for n in 1..=6 {
            let w = HaarMatrix::new(n).unwrap();
            let side = w.side();
            let want = (side as f64).sqrt().recip();
            for j in 0..side {
                assert!((w.matrix().at(0, j) - want).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn rejects_level_zero() {
        assert!(matches!(HaarMatrix::new(0), Err(Error::Domain(_))));
    }

    #[test]
    fn constant_image_concentrates_in_dc() {
        let w = HaarMatrix::new(4).unwrap(); // 8x8
        let c = 0.37;
        let x = DenseTensor::filled(&[8, 8], c);
        let f = haar2d_forward_exact(&x, &w).unwrap();
        let coeffs = match f.coeffs {
            TransformCoeffs::Dense(t) => t,
            _ => unreachable!(),
        };
        assert!((coeffs.at(0, 0) - c * 8.0).abs() < 1e-12);
        for i in 0..8 {
            for j in 0..8 {
                if (i, j) != (0, 0) {
                    assert!(coeffs.at(i, j).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn delta_image_hand_value() {
        // Direct matrix-product oracle for S = 2, delta at (0, 0).
        let w = HaarMatrix::new(2).unwrap();
        let x = DenseTensor::from_vec(&[2, 2], vec![1.0, 0.0, 0.0, 0.0]).unwrap();
        let f = haar2d_forward_exact(&x, &w).unwrap();
        let coeffs = match f.coeffs {
            TransformCoeffs::Dense(t) => t,
            _ => unreachable!(),
        };
        for v in coeffs.data() {
            assert!((v - 0.5).abs() < 1e-15);
        }
    }

    #[test]
    fn exact_roundtrip_random_sizes() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(21);
        for side in [2usize, 4, 8, 16, 32, 64, 128] {
            let w = HaarMatrix::for_side(side).unwrap();
            let x = DenseTensor::from_fn(&[side, side], |_| rng.gen_range(-1.0..1.0));
            let f = haar2d_forward_exact(&x, &w).unwrap();
            let coeffs = match f.coeffs {
                TransformCoeffs::Dense(t) => t,
                _ => unreachable!(),
            };
            let back = haar2d_inverse_exact(&coeffs, &w).unwrap();
            assert!(back.max_abs_diff(&x) < 1e-10, "side {side}");
        }
    }

    #[test]
    fn non_pow2_side_rejected() {
        let w = HaarMatrix::new(3).unwrap();
        let x = DenseTensor::zeros(&[3, 3]);
        assert!(matches!(
            haar2d_forward_exact(&x, &w),
            Err(Error::Dimension { .. }) | Err(Error::Domain(_))
        ));
        let y = DenseTensor::zeros(&[6, 6]);
        assert!(matches!(
            haar2d_forward_exact(&y, &w),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn mask_dc_zeroes_constant_image() {
        let w = HaarMatrix::new(3).unwrap();
        let x = DenseTensor::filled(&[4, 4], 0.8);
        let masked = mask_dc(haar2d_forward_exact(&x, &w).unwrap());
        let coeffs = match masked.coeffs {
            TransformCoeffs::Dense(t) => t,
            _ => unreachable!(),
        };
        assert!(coeffs.max_abs() < 1e-12);
    }

    #[test]
    fn mask_dc_leaves_zero_mean_image() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let mut x = DenseTensor::from_fn(&[8, 8], |_| rng.gen_range(-1.0..1.0));
        let m = x.mean();
        for v in x.data_mut() {
            *v -= m;
        }
        let w = HaarMatrix::for_side(8).unwrap();
        let f = haar2d_forward_exact(&x, &w).unwrap();
        let before = match &f.coeffs {
            TransformCoeffs::Dense(t) => t.clone(),
            _ => unreachable!(),
        };
        let after = match mask_dc(f).coeffs {
            TransformCoeffs::Dense(t) => t,
            _ => unreachable!(),
        };
        assert!(before.max_abs_diff(&after) < 1e-12);
    }

    #[test]
    fn mask_dc_subtracts_mean_projection() {
        // Subtract-projection oracle: inverse of masked coefficients equals
        // the image minus its mean.
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(13);
        let x = DenseTensor::from_fn(&[8, 8], |_| rng.gen_range(0.0..1.0));
        let w = HaarMatrix::for_side(8).unwrap();
        let masked = mask_dc(haar2d_forward_exact(&x, &w).unwrap());
        let coeffs = match masked.coeffs {
            TransformCoeffs::Dense(t) => t,
            _ => unreachable!(),
        };
        let back = haar2d_inverse_exact(&coeffs, &w).unwrap();
        let want = x.sub(&DenseTensor::filled(&[8, 8], x.mean())).unwrap();
        assert!(back.max_abs_diff(&want) < 1e-10);
    }

    #[test]
    fn psnr_values() {
        let a = DenseTensor::filled(&[4, 4], 0.5);
        assert_eq!(psnr(&a, &a, 1.0).unwrap(), f64::INFINITY);
        let b = a.add(&DenseTensor::filled(&[4, 4], 0.1)).unwrap();
        let db = psnr(&a, &b, 1.0).unwrap();
        assert!((db - 20.0).abs() < 1e-12);
    }

    #[test]
    fn psnr_scale_invariance() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let a = DenseTensor::from_fn(&[6, 6], |_| rng.gen_range(0.0..1.0));
        let b = DenseTensor::from_fn(&[6, 6], |_| rng.gen_range(0.0..1.0));
        let p1 = psnr(&a, &b, 1.0).unwrap();
        let p2 = psnr(&a.scale(3.0), &b.scale(3.0), 3.0).unwrap();
        assert!((p1 - p2).abs() < 1e-12);
    }

    #[test]
    fn psnr_shape_mismatch() {
        let a = DenseTensor::zeros(&[2, 2]);
        let b = DenseTensor::zeros(&[3, 3]);
        assert!(matches!(psnr(&a, &b, 1.0), Err(Error::Dimension { .. })));
    }

    #[test]
    fn rate_encode_tracks_values() {
        let x = DenseTensor::from_vec(&[4], vec![0.0, 0.25, 0.5, 1.0]).unwrap();
        let s = rate_encode(&x, 8).unwrap();
        let decoded = s.time_mean();
        for (d, v) in decoded.data().iter().zip(x.data()) {
            assert!((d - v).abs() <= 1.0 / 8.0 + 1e-12);
        }
    }

    #[test]
    fn spiking_zero_input_zero_output() {
        let w = HaarMatrix::for_side(4).unwrap();
        let x = SpikeTensor::zeros(&[4, 4, 4], Polarity::Ternary);
        let cfg = NeuronConfig::ternary_if(1.0);
        let f = haar2d_spiking(&x, &w, &cfg, Direction::Forward).unwrap();
        match f.coeffs {
            TransformCoeffs::Spikes(s) => assert_eq!(s.nonzero_count(), 0),
            _ => unreachable!(),
        }
    }

    #[test]
    fn spiking_dc_tracks_exact_for_small_signal() {
        // Compare against the exact transform of the rate-decoded input.
        let t_steps = 4;
        let x = DenseTensor::filled(&[4, 4], 0.3);
        let encoded = rate_encode(&x, t_steps).unwrap();
        let decoded_in = encoded.time_mean();
        // Promote encoder output to ternary alphabet for the transform.
        let tern =
            SpikeTensor::from_values(encoded.shape(), encoded.values().to_vec(), Polarity::Ternary)
                .unwrap();
        let w = HaarMatrix::for_side(4).unwrap();
        let cfg = NeuronConfig::ternary_if(1.0);
        let f = haar2d_spiking(&tern, &w, &cfg, Direction::Forward).unwrap();
        let got_dc = f.decode().data()[0];
        let exact = haar2d_forward_exact(&decoded_in, &w).unwrap();
        let want_dc = match exact.coeffs {
            TransformCoeffs::Dense(t) => t.at(0, 0),
            _ => unreachable!(),
        };
        assert!(
            (got_dc - want_dc).abs() <= 1.0 / t_steps as f64 + 1e-12,
            "got {got_dc}, want {want_dc}"
        );
    }

    #[test]
    fn ternary_beats_binary_on_signed_details() {
        // A checkerboard offset against the dyadic grid produces detail
        // coefficients of both signs: binary stages drop every
        // negative-going contribution.
        let side = 8;
        let x = DenseTensor::from_fn(&[side, side], |i| {
            let (r, c) = (i / side, i % side);
            if ((r + 1) / 2 + (c + 1) / 2) % 2 == 0 {
                0.8
            } else {
                0.2
            }
        });
        let t_steps = 8;
        let w = HaarMatrix::for_side(side).unwrap();
        let enc = rate_encode(&x, t_steps).unwrap();
        let run = |polarity: Polarity| {
            let spikes = SpikeTensor::from_values(enc.shape(), enc.values().to_vec(), polarity)
                .unwrap();
            let cfg = match polarity {
                Polarity::Ternary => NeuronConfig::ternary_if(1.0),
                Polarity::Binary => NeuronConfig::binary_if(1.0),
            };
            let rt = haar2d_spiking_roundtrip(&spikes, &w, &cfg).unwrap();
            psnr(&x, &rt.decode(), 1.0).unwrap()
        };
        let tern = run(Polarity::Ternary);
        let bin = run(Polarity::Binary);
        assert!(
            tern > bin,
            "ternary {tern} dB should beat binary {bin} dB"
        );
    }

    #[test]
    fn detail_sparsity_piecewise_vs_noise() {
        let side = 16;
        let w = HaarMatrix::for_side(side).unwrap();
        let nnz_fraction = |x: &DenseTensor| {
            let f = haar2d_forward_exact(x, &w).unwrap();
            let coeffs = match f.coeffs {
                TransformCoeffs::Dense(t) => t,
                _ => unreachable!(),
            };
            let detail = coeffs
                .data()
                .iter()
                .enumerate()
                .filter(|(i, _)| *i != 0)
                .filter(|(_, v)| v.abs() > 1e-12)
                .count();
            detail as f64 / (side * side - 1) as f64
        };
        // Piecewise-constant quadrants.
        let pw = DenseTensor::from_fn(&[side, side], |i| {
            let (r, c) = (i / side, i % side);
            if r < side / 2 && c < side / 2 {
                0.9
            } else {
                0.2
            }
        });
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(23);
        let noise = DenseTensor::from_fn(&[side, side], |_| rng.gen_range(0.0..1.0));
        assert!(nnz_fraction(&pw) < nnz_fraction(&noise));
    }

    #[test]
    fn pad_centers_content() {
        let x = DenseTensor::from_vec(&[3, 3], vec![1.0; 9]).unwrap();
        let (p, off) = pad_to_pow2(&x).unwrap();
        assert_eq!(p.shape(), &[4, 4]);
        assert_eq!(off, (0, 0));
        let y = DenseTensor::from_vec(&[2, 5], vec![1.0; 10]).unwrap();
        let (p2, off2) = pad_to_pow2(&y).unwrap();
        assert_eq!(p2.shape(), &[8, 8]);
        assert_eq!(off2, (3, 1));
        assert_eq!(p2.sum(), 10.0);
    }
}
