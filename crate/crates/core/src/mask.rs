//! Time-frequency masks: oracle masks and gradient refinement of a mask
//! against a registered objective.
//!
//! A refined mask is parameterized as `cap * sigmoid(theta)` and driven by
//! gradient ascent through `mask * Y -> istft_ls -> objective`, where `Y` is
//! the STFT of the noisy mixture.

use crate::error::{Error, Result};
use crate::grad::{gradient, Objective};
use crate::multitask::{CombinationWeights, LossKind, LossObjective, Scorer, Scores};
use crate::pesq::PesqTables;
use crate::signal::{mix_at_snr, Signal};
use crate::stft::{istft_ls, istft_ls_adjoint, stft, Spectrogram, HOP, WINDOW_LEN};
use crate::EPSILON;

/// Upper bound of the ideal amplitude mask and of refined masks.
pub const MASK_CAP: f64 = 2.0;

/// Default number of refinement iterations.
pub const DEFAULT_STEPS: usize = 300;

/// Default initial step size of the refinement.
pub const DEFAULT_STEP_SIZE: f64 = 1.0;

/// Step-size multiplier after an accepted step.
pub const STEP_GROWTH: f64 = 1.1;

/// Step-size multiplier after a rejected step.
pub const STEP_SHRINK: f64 = 0.5;

/// A real gain per STFT coefficient, laid out frame-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Mask {
    frames: usize,
    bins: usize,
    values: Vec<f64>,
}

impl Mask {
    pub fn new(frames: usize, bins: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != frames * bins {
            return Err(Error::Shape(format!(
                "mask of {frames}x{bins} needs {} values, got {}",
                frames * bins,
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { stage: "mask" });
        }
        Ok(Mask {
            frames,
            bins,
            values,
        })
    }

    /// The all-pass mask for `spec`'s grid.
    pub fn ones(spec: &Spectrogram) -> Self {
        Mask {
            frames: spec.frames(),
            bins: spec.bins(),
            values: vec![1.0; spec.frames() * spec.bins()],
        }
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn bins(&self) -> usize {
        self.bins
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, frame: usize, bin: usize) -> f64 {
        self.values[frame * self.bins + bin]
    }
}

fn same_shape(a: &Spectrogram, b: &Spectrogram) -> Result<()> {
    if a.same_grid(b) {
        Ok(())
    } else {
        Err(Error::Shape(format!(
            "spectrograms differ: {}x{} vs {}x{}",
            a.frames(),
            a.bins(),
            b.frames(),
            b.bins()
        )))
    }
}

/// Ideal amplitude mask `|X| / (|Y| + eps)`, capped at [`MASK_CAP`].
pub fn oracle_iam(clean: &Spectrogram, noisy: &Spectrogram) -> Result<Mask> {
    same_shape(clean, noisy)?;
    let values = clean
        .values()
        .iter()
        .zip(noisy.values())
        .map(|(x, y)| (x.norm() / (y.norm() + EPSILON)).min(MASK_CAP))
        .collect();
    Mask::new(clean.frames(), clean.bins(), values)
}

/// Phase-sensitive mask `|X| / (|Y| + eps) * cos(angle X - angle Y)`,
/// clipped to `[0, 1]`.
pub fn oracle_psm(clean: &Spectrogram, noisy: &Spectrogram) -> Result<Mask> {
    same_shape(clean, noisy)?;
    let values = clean
        .values()
        .iter()
        .zip(noisy.values())
        .map(|(x, y)| {
            let yn = y.norm();
            // |X| cos(dphi) = Re(X conj(Y)) / |Y|.
            let projection = if yn > 0.0 { (x * y.conj()).re / yn } else { 0.0 };
            (projection / (yn + EPSILON)).clamp(0.0, 1.0)
        })
        .collect();
    Mask::new(clean.frames(), clean.bins(), values)
}

/// Multiplies `noisy` by `mask` and resynthesizes `target_len` samples.
pub fn apply_mask(noisy: &Spectrogram, mask: &Mask, target_len: usize) -> Result<Signal> {
    if mask.frames != noisy.frames() || mask.bins != noisy.bins() {
        return Err(Error::Shape(format!(
            "mask is {}x{}, spectrogram is {}x{}",
            mask.frames,
            mask.bins,
            noisy.frames(),
            noisy.bins()
        )));
    }
    let mut masked = noisy.clone();
    masked
        .values_mut()
        .iter_mut()
        .zip(&mask.values)
        .for_each(|(y, m)| *y *= *m);
    istft_ls(&masked, target_len)
}

fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

/// Unconstrained mask parameters; the mask is `cap * sigmoid(theta)`.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskParams {
    frames: usize,
    bins: usize,
    cap: f64,
    theta: Vec<f64>,
}

impl MaskParams {
    /// Parameters whose mask is exactly 1 everywhere.
    pub fn unity(frames: usize, bins: usize, cap: f64) -> Result<Self> {
        if !(cap.is_finite() && cap > 1.0) {
            return Err(Error::InvalidArgument(format!(
                "mask cap must be finite and above 1, got {cap}"
            )));
        }
        let theta0 = -(cap - 1.0).ln();
        Ok(MaskParams {
            frames,
            bins,
            cap,
            theta: vec![theta0; frames * bins],
        })
    }

    pub fn cap(&self) -> f64 {
        self.cap
    }

    pub fn theta(&self) -> &[f64] {
        &self.theta
    }

    pub fn mask(&self) -> Mask {
        Mask {
            frames: self.frames,
            bins: self.bins,
            values: self.theta.iter().map(|&t| self.cap * sigmoid(t)).collect(),
        }
    }

    /// Chain rule from a gradient on the mask values to one on `theta`.
    fn pull_back(&self, d_mask: &[f64]) -> Vec<f64> {
        self.theta
            .iter()
            .zip(d_mask)
            .map(|(&t, &g)| {
                let s = sigmoid(t);
                g * self.cap * s * (1.0 - s)
            })
            .collect()
    }

    fn stepped(&self, direction: &[f64], step: f64) -> MaskParams {
        MaskParams {
            theta: self
                .theta
                .iter()
                .zip(direction)
                .map(|(t, d)| t + step * d)
                .collect(),
            ..self.clone()
        }
    }
}

/// Gradient of an objective with respect to the mask values, given its
/// gradient `d_output` with respect to the resynthesized waveform:
/// `Re(G * conj(Y))` where `G` is `d_output` pulled back through the
/// least-squares inverse STFT.
pub fn mask_gradient(noisy: &Spectrogram, d_output: &[f64]) -> Vec<f64> {
    let g = istft_ls_adjoint(noisy, d_output);
    g.values()
        .iter()
        .zip(noisy.values())
        .map(|(g, y)| (g * y.conj()).re)
        .collect()
}

/// Settings of a mask refinement.
#[derive(Debug, Clone)]
pub struct RefineConfig {
    pub kind: LossKind,
    pub weights: CombinationWeights,
    pub steps: usize,
    pub step_size: f64,
    pub cap: f64,
    pub tables: PesqTables,
}

impl RefineConfig {
    pub fn new(kind: LossKind) -> Self {
        RefineConfig {
            kind,
            weights: CombinationWeights::default(),
            steps: DEFAULT_STEPS,
            step_size: DEFAULT_STEP_SIZE,
            cap: MASK_CAP,
            tables: PesqTables::standard().clone(),
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.step_size.is_finite() && self.step_size > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "step size must be finite and positive, got {}",
                self.step_size
            )));
        }
        Ok(())
    }
}

/// State after one refinement iteration (iteration 0 is the unity mask).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RefineStep {
    pub iteration: usize,
    /// Objective value of the current (accepted) mask.
    pub objective: f64,
    /// Whether this iteration's candidate was accepted.
    pub accepted: bool,
    /// Step size to be tried next.
    pub step_size: f64,
    pub scores: Scores,
}

/// Per-iteration record of a refinement.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RefineTrace {
    pub steps: Vec<RefineStep>,
}

impl RefineTrace {
    pub fn initial(&self) -> Option<&RefineStep> {
        self.steps.first()
    }

    pub fn last(&self) -> Option<&RefineStep> {
        self.steps.last()
    }

    pub fn accepted(&self) -> usize {
        self.steps.iter().filter(|s| s.accepted).count()
    }
}

/// Result of [`refine`].
#[derive(Debug, Clone)]
pub struct Refined {
    pub noisy: Signal,
    pub output: Signal,
    pub params: MaskParams,
    pub trace: RefineTrace,
}

/// Refines a mask on `clean + noise` (mixed at `snr_db`) by gradient ascent
/// on the configured objective, with a simple backtracking rule: a step that
/// lowers the objective is rejected and the step size halved; an accepted
/// step grows it by 10 %. The objective never decreases along the trace.
pub fn refine(clean: &Signal, noise: &Signal, snr_db: f64, config: &RefineConfig) -> Result<Refined> {
    let noisy = mix_at_snr(clean, noise, snr_db)?.noisy;
    refine_mixture(clean, &noisy, config)
}

/// Like [`refine`] for an already mixed `noisy` signal.
pub fn refine_mixture(clean: &Signal, noisy: &Signal, config: &RefineConfig) -> Result<Refined> {
    config.validate()?;
    if clean.len() != noisy.len() {
        return Err(Error::LengthMismatch {
            left: clean.len(),
            right: noisy.len(),
        });
    }
    let len = noisy.len();
    let objective = LossObjective::with_tables(config.kind, config.weights, clean, &config.tables)?;
    let scorer = Scorer::with_tables(clean, &config.tables)?;
    let spec = stft(noisy, WINDOW_LEN, HOP)?;
    let mut params = MaskParams::unity(spec.frames(), spec.bins(), config.cap)?;

    let evaluate = |params: &MaskParams| -> Result<(Signal, f64, Vec<f64>)> {
        let output = apply_mask(&spec, &params.mask(), len)?;
        let g = gradient(&objective as &dyn Objective, &output)?;
        let d_theta = params.pull_back(&mask_gradient(&spec, &g.d_input));
        Ok((output, g.value, d_theta))
    };

    let (mut output, mut value, mut direction) = evaluate(&params)?;
    let mut scores = scorer.score(&output)?;
    let mut step_size = config.step_size;
    let mut trace = RefineTrace::default();
    trace.steps.push(RefineStep {
        iteration: 0,
        objective: value,
        accepted: true,
        step_size,
        scores,
    });
    for iteration in 1..=config.steps {
        let candidate = params.stepped(&direction, step_size);
        let (c_output, c_value, c_direction) = evaluate(&candidate)?;
        let accepted = c_value >= value;
        if accepted {
            params = candidate;
            output = c_output;
            value = c_value;
            direction = c_direction;
            scores = scorer.score(&output)?;
            step_size *= STEP_GROWTH;
        } else {
            step_size *= STEP_SHRINK;
        }
        log::debug!("refine {} iter {iteration}: {value:.6} (step {step_size:.3e})", config.kind);
        trace.steps.push(RefineStep {
            iteration,
            objective: value,
            accepted,
            step_size,
            scores,
        });
        if step_size < EPSILON {
            log::info!("refine {}: step size vanished after {iteration} iterations", config.kind);
            break;
        }
    }
    Ok(Refined {
        noisy: noisy.clone(),
        output,
        params,
        trace,
    })
}
