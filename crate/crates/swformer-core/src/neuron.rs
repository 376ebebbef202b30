//! Spiking neuron layers: LIF, IF, and the ternary IF with symmetric
//! thresholds.
//!
//! Binary dynamics per step: `U = V_prev + I`, `s = H(U - v_th)` with
//! `H(0) = 1`, then `V = v_reset * s + beta * U * (1 - s)`.
//!
//! Ternary dynamics fire `+1` at `U >= v_th` and `-1` at `U <= -v_th`,
//! reset by subtraction (`V = U - s * v_th`), and require `beta == 1`.
//! The hard reset of the binary rule applied verbatim to the ternary case
//! diverges for negative potentials; it stays available behind
//! [`ResetRule::HardVerbatim`] for comparison.

use crate::error::{dim_err, Error, Result};
use crate::spike::{Polarity, SpikeTensor};
use crate::tensor::DenseTensor;
use serde::{Deserialize, Serialize};

/// Reset behaviour after a spike.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResetRule {
    /// `V = v_reset * s + beta * U * (1 - s)` — the binary LIF rule.
    Hard,
    /// `V = U - s * v_th` — divergence-free ternary reset.
    Subtract,
    /// `V = v_reset * s + U * (1 - s)` with `s` possibly -1; diverges for
    /// negative potentials and exists only for side-by-side comparison.
    HardVerbatim,
}

/// Neuron layer parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NeuronConfig {
    /// Firing threshold, > 0.
    pub v_th: f64,
    /// Reset potential for hard resets.
    pub v_reset: f64,
    /// Leak factor in (0, 1]; 1 gives IF dynamics.
    pub beta: f64,
    pub polarity: Polarity,
    /// Half-width of the rectangular surrogate window.
    pub surrogate_width: f64,
    pub reset: ResetRule,
}

impl NeuronConfig {
    /// Binary LIF defaults for the main path.
    pub fn lif(v_th: f64, beta: f64) -> Self {
        NeuronConfig {
            v_th,
            v_reset: 0.0,
            beta,
            polarity: Polarity::Binary,
            surrogate_width: 0.5,
            reset: ResetRule::Hard,
        }
    }

    /// Ternary IF defaults for the wavelet path.
    pub fn ternary_if(v_th: f64) -> Self {
        NeuronConfig {
            v_th,
            v_reset: 0.0,
            beta: 1.0,
            polarity: Polarity::Ternary,
            surrogate_width: 0.5,
            reset: ResetRule::Subtract,
        }
    }

    /// Binary IF with subtract reset: the ternary neuron with the negative
    /// threshold disabled. Used by binary-mode spiking transforms.
    pub fn binary_if(v_th: f64) -> Self {
        NeuronConfig {
            v_th,
            v_reset: 0.0,
            beta: 1.0,
            polarity: Polarity::Binary,
            surrogate_width: 0.5,
            reset: ResetRule::Subtract,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.v_th > 0.0) {
            return Err(Error::Config(format!("v_th must be > 0, got {}", self.v_th)));
        }
        if !(self.beta > 0.0 && self.beta <= 1.0) {
            return Err(Error::Config(format!(
                "beta must lie in (0, 1], got {}",
                self.beta
            )));
        }
        if self.polarity == Polarity::Ternary && self.beta != 1.0 {
            return Err(Error::Config(format!(
                "ternary neurons require beta = 1 (IF dynamics), got beta = {}",
                self.beta
            )));
        }
        if !(self.surrogate_width > 0.0) {
            return Err(Error::Config("surrogate_width must be > 0".into()));
        }
        Ok(())
    }
}

/// Per-neuron potentials carried across timesteps.
#[derive(Debug, Clone, PartialEq)]
pub struct MembraneState {
    /// Post-integration potentials from the latest step.
    pub u: DenseTensor,
    /// Potentials carried to the next step.
    pub v: DenseTensor,
}

impl MembraneState {
    pub fn zeros(shape: &[usize]) -> Self {
        MembraneState {
            u: DenseTensor::zeros(shape),
            v: DenseTensor::zeros(shape),
        }
    }

    pub fn reset(&mut self) {
        self.u.data_mut().fill(0.0);
        self.v.data_mut().fill(0.0);
    }
}

fn check_shapes(state: &MembraneState, input: &DenseTensor) -> Result<()> {
    if state.v.shape() != input.shape() {
        return Err(dim_err(
            "neuron_step",
            format!(
                "state shape {:?} vs input shape {:?}",
                state.v.shape(),
                input.shape()
            ),
        ));
    }
    Ok(())
}

/// One binary LIF step. Returns the spikes and advances the state.
pub fn lif_step(
    state: &mut MembraneState,
    input: &DenseTensor,
    cfg: &NeuronConfig,
) -> Result<SpikeTensor> {
    cfg.validate()?;
    if cfg.polarity != Polarity::Binary {
        return Err(Error::Config("lif_step drives binary neurons".into()));
    }
    check_shapes(state, input)?;
    step_inner(state, input, cfg)
}

/// One ternary IF step with symmetric thresholds.
pub fn ternary_if_step(
    state: &mut MembraneState,
    input: &DenseTensor,
    cfg: &NeuronConfig,
) -> Result<SpikeTensor> {
    cfg.validate()?;
    if cfg.polarity != Polarity::Ternary {
        return Err(Error::Config("ternary_if_step drives ternary neurons".into()));
    }
    check_shapes(state, input)?;
    step_inner(state, input, cfg)
}

/// Shared step: integrate, threshold, reset. Dispatches on polarity and
/// reset rule.
pub fn step_inner(
    state: &mut MembraneState,
    input: &DenseTensor,
    cfg: &NeuronConfig,
) -> Result<SpikeTensor> {
    let n = input.len();
    let mut spikes = vec![0i8; n];
    let u = state.u.data_mut();
    let v = state.v.data_mut();
    let x = input.data();
    for i in 0..n {
        let ui = v[i] + x[i];
        u[i] = ui;
        let s: i8 = match cfg.polarity {
            Polarity::Binary => {
                if ui - cfg.v_th >= 0.0 {
                    1
                } else {
                    0
                }
            }
            Polarity::Ternary => {
                if ui >= cfg.v_th {
                    1
                } else if ui <= -cfg.v_th {
                    -1
                } else {
                    0
                }
            }
        };
        spikes[i] = s;
        let sf = s as f64;
        v[i] = match cfg.reset {
            ResetRule::Hard => cfg.v_reset * sf + cfg.beta * ui * (1.0 - sf),
            ResetRule::Subtract => ui - sf * cfg.v_th,
            ResetRule::HardVerbatim => cfg.v_reset * sf + ui * (1.0 - sf),
        };
    }
    SpikeTensor::from_values(input.shape(), spikes, cfg.polarity)
}

/// Rectangular surrogate derivative of the spike function with respect to
/// the membrane potential, evaluated at `u - v_th`.
///
/// Binary: `1/(2w)` inside `|u - v_th| < w`, else 0. Ternary adds the
/// mirrored window around `-v_th`.
pub fn surrogate_grad(u_minus_vth: f64, cfg: &NeuronConfig) -> f64 {
    let w = cfg.surrogate_width;
    let rect = |x: f64| if x.abs() < w { 1.0 / (2.0 * w) } else { 0.0 };
    match cfg.polarity {
        Polarity::Binary => rect(u_minus_vth),
        // Window at u = +v_th (x = 0) plus one at u = -v_th (x = -2 v_th).
        Polarity::Ternary => rect(u_minus_vth) + rect(u_minus_vth + 2.0 * cfg.v_th),
    }
}

/// Runs a full sequence through a freshly reset layer: inputs shaped
/// `[T, ...]`, outputs spikes of the same shape. Output step `n` depends
/// only on inputs `1..=n`.
pub fn run_sequence(inputs: &DenseTensor, cfg: &NeuronConfig) -> Result<SpikeTensor> {
    cfg.validate()?;
    let shape = inputs.shape();
    if shape.is_empty() {
        return Err(dim_err("run_sequence", "inputs need a leading time axis"));
    }
    let t_steps = shape[0];
    let inner: Vec<usize> = shape[1..].to_vec();
    let stride: usize = inner.iter().product();
    let mut state = MembraneState::zeros(&inner);
    let mut out = vec![0i8; inputs.len()];
    for t in 0..t_steps {
        let step_in = DenseTensor::from_vec(
            &inner,
            inputs.data()[t * stride..(t + 1) * stride].to_vec(),
        )?;
        let s = step_inner(&mut state, &step_in, cfg)?;
        out[t * stride..(t + 1) * stride].copy_from_slice(s.values());
    }
    SpikeTensor::from_values(shape, out, cfg.polarity)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn scalar(v: f64) -> DenseTensor {
        DenseTensor::from_vec(&[1], vec![v]).unwrap()
    }

    #[test]
    fn lif_fires_at_threshold_equality() {
        // H(0) = 1: U exactly at threshold fires.
        let cfg = NeuronConfig::lif(1.0, 0.5);
        let mut st = MembraneState::zeros(&[1]);
        let s = lif_step(&mut st, &scalar(1.0), &cfg).unwrap();
        assert_eq!(s.values(), &[1]);
        assert_eq!(st.u.data(), &[1.0]);
        assert_eq!(st.v.data(), &[0.0]);
    }

    #[test]
    fn lif_subthreshold_decays() {
        // Direct evaluation: U = 0.2 + 0.4 = 0.6, no spike, V = 0.5 * 0.6.
        let cfg = NeuronConfig::lif(1.0, 0.5);
        let mut st = MembraneState::zeros(&[1]);
        st.v.data_mut()[0] = 0.2;
        let s = lif_step(&mut st, &scalar(0.4), &cfg).unwrap();
        assert_eq!(s.values(), &[0]);
        assert!((st.u.data()[0] - 0.6).abs() < 1e-15);
        assert!((st.v.data()[0] - 0.3).abs() < 1e-15);
    }

    #[test]
    fn lif_zero_input_never_fires() {
        let cfg = NeuronConfig::lif(1.0, 0.5);
        let inputs = DenseTensor::zeros(&[10, 3]);
        let s = run_sequence(&inputs, &cfg).unwrap();
        assert_eq!(s.nonzero_count(), 0);
    }

    #[test]
    fn ternary_fires_negative() {
        let cfg = NeuronConfig::ternary_if(1.0);
        let mut st = MembraneState::zeros(&[1]);
        let s = ternary_if_step(&mut st, &scalar(-1.5), &cfg).unwrap();
        assert_eq!(s.values(), &[-1]);
        // Subtract reset keeps the residual: V = -1.5 + 1.0.
        assert!((st.v.data()[0] + 0.5).abs() < 1e-15);
    }

    #[test]
    fn ternary_subthreshold_carries_potential() {
        let cfg = NeuronConfig::ternary_if(1.0);
        let mut st = MembraneState::zeros(&[1]);
        let s = ternary_if_step(&mut st, &scalar(0.3), &cfg).unwrap();
        assert_eq!(s.values(), &[0]);
        assert!((st.v.data()[0] - 0.3).abs() < 1e-15);
    }

    #[test]
    fn ternary_odd_symmetry() {
        // Mirrored input stream gives a sign-mirrored spike stream.
        let cfg = NeuronConfig::ternary_if(1.0);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        let inputs = DenseTensor::from_fn(&[12, 4], |_| rng.gen_range(-1.0..1.0));
        let pos = run_sequence(&inputs, &cfg).unwrap();
        let neg = run_sequence(&inputs.scale(-1.0), &cfg).unwrap();
        let mirrored: Vec<i8> = pos.values().iter().map(|v| -v).collect();
        assert_eq!(neg.values(), &mirrored[..]);
    }

    #[test]
    fn ternary_requires_if_dynamics() {
        let mut cfg = NeuronConfig::ternary_if(1.0);
        cfg.beta = 0.5;
        let mut st = MembraneState::zeros(&[1]);
        assert!(matches!(
            ternary_if_step(&mut st, &scalar(0.0), &cfg),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn surrogate_window_values() {
        let cfg = NeuronConfig::lif(1.0, 0.5); // width 0.5
        assert_eq!(surrogate_grad(0.0, &cfg), 1.0);
        assert_eq!(surrogate_grad(2.0, &cfg), 0.0);
    }

    #[test]
    fn surrogate_integral_is_unit_per_window() {
        // Riemann quadrature oracle on a 1e-3 grid.
        let quad = |cfg: &NeuronConfig| {
            let mut acc = 0.0;
            let mut u = -4.0;
            while u < 4.0 {
                acc += surrogate_grad(u - cfg.v_th, cfg) * 1e-3;
                u += 1e-3;
            }
            acc
        };
        let binary = NeuronConfig::lif(1.0, 0.5);
        assert!((quad(&binary) - 1.0).abs() < 1e-2);
        // Ternary has two unit windows: total transition mass 2.
        let ternary = NeuronConfig::ternary_if(1.0);
        assert!((quad(&ternary) - 2.0).abs() < 1e-2);
    }

    #[test]
    fn first_spike_after_accumulation() {
        // Hand iteration: I = 0.4 each step, V_th = 1, beta = 1 —
        // U sequence 0.4, 0.8, 1.2; first spike at step 3.
        let mut cfg = NeuronConfig::lif(1.0, 1.0);
        cfg.beta = 1.0;
        let inputs = DenseTensor::filled(&[5, 1], 0.4);
        let s = run_sequence(&inputs, &cfg).unwrap();
        assert_eq!(s.values()[0], 0);
        assert_eq!(s.values()[1], 0);
        assert_eq!(s.values()[2], 1);
    }

    #[test]
    fn single_step_sequence_matches_step() {
        let cfg = NeuronConfig::lif(1.0, 0.5);
        let inputs = DenseTensor::from_vec(&[1, 2], vec![1.5, 0.2]).unwrap();
        let seq = run_sequence(&inputs, &cfg).unwrap();
        let mut st = MembraneState::zeros(&[2]);
        let step = lif_step(
            &mut st,
            &DenseTensor::from_vec(&[2], vec![1.5, 0.2]).unwrap(),
            &cfg,
        )
        .unwrap();
        assert_eq!(seq.values(), step.values());
    }

    #[test]
    fn causality_under_truncation() {
        let cfg = NeuronConfig::lif(1.0, 0.7);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        for _ in 0..100 {
            let t_steps = rng.gen_range(2..10);
            let inputs = DenseTensor::from_fn(&[t_steps, 3], |_| rng.gen_range(-0.5..1.5));
            let full = run_sequence(&inputs, &cfg).unwrap();
            let cut = rng.gen_range(1..=t_steps);
            let prefix = DenseTensor::from_vec(
                &[cut, 3],
                inputs.data()[..cut * 3].to_vec(),
            )
            .unwrap();
            let short = run_sequence(&prefix, &cfg).unwrap();
            assert_eq!(&full.values()[..cut * 3], short.values());
        }
    }

    #[test]
    fn if_rate_tracks_constant_input() {
        // beta = 1, v_th = 1: rate over T steps approaches clamp(c, 0, 1)
        // within 1/T under subtract reset.
        for &c in &[0.0, 0.13, 0.4, 0.77, 1.0, 1.9] {
            for &t_steps in &[4usize, 16, 64] {
                let cfg = NeuronConfig::ternary_if(1.0);
                let inputs = DenseTensor::filled(&[t_steps, 1], c);
                let s = run_sequence(&inputs, &cfg).unwrap();
                let rate = s.values().iter().map(|v| *v as f64).sum::<f64>() / t_steps as f64;
                let want = c.clamp(0.0, 1.0);
                assert!(
                    (rate - want).abs() <= 1.0 / t_steps as f64 + 1e-12,
                    "c={c} T={t_steps} rate={rate}"
                );
            }
        }
    }

    #[test]
    fn ternary_sign_matches_potential_sign() {
        let cfg = NeuronConfig::ternary_if(0.8);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        let inputs = DenseTensor::from_fn(&[20, 8], |_| rng.gen_range(-2.0..2.0));
        let mut state = MembraneState::zeros(&[8]);
        for t in 0..20 {
            let step_in = DenseTensor::from_vec(
                &[8],
                inputs.data()[t * 8..(t + 1) * 8].to_vec(),
            )
            .unwrap();
            let s = step_inner(&mut state, &step_in, &cfg).unwrap();
            for i in 0..8 {
                let u = state.u.data()[i];
                if u.abs() >= cfg.v_th {
                    assert_eq!(s.values()[i] as f64, u.signum());
                } else {
                    assert_eq!(s.values()[i], 0);
                }
            }
        }
    }
}
