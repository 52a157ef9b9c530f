//! Gradient contract shared by every objective, and the finite-difference
//! checker used to verify it.
//!
//! Objectives provide analytic reverse-mode adjoints per pipeline stage.
//! Piecewise stages (clips, dead zones, threshold masks, max/min) follow one
//! convention everywhere: the selected branch of a max/min receives the
//! gradient (ties go to the first argument), a clipped value has zero
//! gradient, and `|.|` or `sqrt` at zero take subgradient zero.

use rand::seq::index::sample;
use rand::Rng;

use crate::error::{ensure_finite, Error, Result};

/// An objective value and its gradient with respect to the estimated
/// waveform.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradient {
    pub value: f64,
    pub d_input: Vec<f64>,
}

/// A scalar function of a waveform with an exact reverse-mode gradient.
pub trait Objective: Send + Sync {
    fn name(&self) -> String;

    fn value(&self, x_hat: &[f64]) -> Result<f64>;

    fn value_and_gradient(&self, x_hat: &[f64]) -> Result<Gradient>;

    /// Fingerprint of every branch decision taken by the forward pass
    /// (clip states, threshold masks, dead-zone cases). Two inputs with the
    /// same signature lie on the same smooth piece of the objective.
    fn branch_signature(&self, _x_hat: &[f64]) -> Result<u64> {
        Ok(0)
    }
}

/// Evaluates `objective` and its gradient, checking the gradient contract.
pub fn gradient(objective: &dyn Objective, x_hat: &[f64]) -> Result<Gradient> {
    ensure_finite("input", x_hat)?;
    let g = objective.value_and_gradient(x_hat)?;
    if !g.value.is_finite() {
        return Err(Error::NonFinite { stage: "objective value" });
    }
    ensure_finite("gradient", &g.d_input)?;
    if g.d_input.len() != x_hat.len() {
        return Err(Error::Shape(format!(
            "gradient has {} entries for {} input samples",
            g.d_input.len(),
            x_hat.len()
        )));
    }
    Ok(g)
}

/// `|x|^2`, mostly useful as a sanity objective.
#[derive(Debug, Clone, Copy, Default)]
pub struct SquaredNorm;

impl Objective for SquaredNorm {
    fn name(&self) -> String {
        "squared-norm".into()
    }

    fn value(&self, x_hat: &[f64]) -> Result<f64> {
        Ok(crate::signal::energy(x_hat))
    }

    fn value_and_gradient(&self, x_hat: &[f64]) -> Result<Gradient> {
        Ok(Gradient {
            value: crate::signal::energy(x_hat),
            d_input: x_hat.iter().map(|v| 2.0 * v).collect(),
        })
    }
}

/// Worst-coordinate summary of a finite-difference check.
#[derive(Debug, Clone, PartialEq)]
pub struct FdReport {
    pub max_rel_error: f64,
    pub worst_coord: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

/// Compares the analytic gradient with central differences on `coords`.
///
/// The relative error per coordinate is
/// `|a - n| / max(|a|, |n|, 1e-12)`.
pub fn finite_diff_check(
    objective: &dyn Objective,
    x_hat: &[f64],
    coords: &[usize],
    step: f64,
) -> Result<FdReport> {
    if !(step > 0.0 && step.is_finite()) {
        return Err(Error::InvalidArgument(format!("step must be positive, got {step}")));
    }
    if let Some(&bad) = coords.iter().find(|&&c| c >= x_hat.len()) {
        return Err(Error::InvalidArgument(format!(
            "coordinate {bad} out of range for {} samples",
            x_hat.len()
        )));
    }
    let g = gradient(objective, x_hat)?;
    let mut report = FdReport {
        max_rel_error: 0.0,
        worst_coord: coords.first().copied().unwrap_or(0),
        analytic: 0.0,
        numeric: 0.0,
        checked: coords.len(),
    };
    let mut probe = x_hat.to_vec();
    for &c in coords {
        probe[c] = x_hat[c] + step;
        let plus = objective.value(&probe)?;
        probe[c] = x_hat[c] - step;
        let minus = objective.value(&probe)?;
        probe[c] = x_hat[c];
        let numeric = (plus - minus) / (2.0 * step);
        let analytic = g.d_input[c];
        let denom = analytic.abs().max(numeric.abs()).max(1e-12);
        let rel = (analytic - numeric).abs() / denom;
        if rel > report.max_rel_error || !rel.is_finite() {
            report.max_rel_error = rel;
            report.worst_coord = c;
            report.analytic = analytic;
            report.numeric = numeric;
        }
    }
    Ok(report)
}

/// Coordinates whose finite-difference derivative is below this fraction of
/// the largest analytic gradient entry are treated as stationary.
pub const STATIONARY_FRACTION: f64 = 1e-3;

/// Draws up to `count` generic coordinates. A coordinate is generic when
///
/// - the objective is smooth over `[-10 step, +10 step]` around it:
///   perturbing the coordinate to either end of that interval leaves the
///   branch signature unchanged, and
/// - it is not near-stationary: its central-difference derivative is at
///   least [`STATIONARY_FRACTION`] times the largest analytic gradient entry.
///   Relative errors at accidental zeros of the gradient measure roundoff
///   and curvature, not gradient correctness.
///
/// Selection uses the numeric derivative per coordinate and the analytic
/// gradient only as a global scale, so a wrong gradient cannot hide itself:
/// an all-zero one excludes nothing, an inflated one excludes everything.
pub fn generic_coords<R: Rng + ?Sized>(
    objective: &dyn Objective,
    x_hat: &[f64],
    count: usize,
    step: f64,
    rng: &mut R,
) -> Result<Vec<usize>> {
    let base = objective.branch_signature(x_hat)?;
    let scale = gradient(objective, x_hat)?
        .d_input
        .iter()
        .fold(0.0f64, |m, v| m.max(v.abs()));
    let mut probe = x_hat.to_vec();
    let mut chosen = Vec::with_capacity(count);
    for c in sample(rng, x_hat.len(), x_hat.len()).into_iter() {
        if chosen.len() == count {
            break;
        }
        let mut smooth = true;
        for delta in [-10.0 * step, 10.0 * step] {
            probe[c] = x_hat[c] + delta;
            if objective.branch_signature(&probe)? != base {
                smooth = false;
            }
        }
        if smooth {
            probe[c] = x_hat[c] + step;
            let plus = objective.value(&probe)?;
            probe[c] = x_hat[c] - step;
            let minus = objective.value(&probe)?;
            let numeric = (plus - minus) / (2.0 * step);
            smooth = numeric.abs() >= STATIONARY_FRACTION * scale;
        }
        probe[c] = x_hat[c];
        if smooth {
            chosen.push(c);
        }
    }
    Ok(chosen)
}

/// Order-sensitive fold of branch decisions into a 64-bit fingerprint.
#[derive(Debug, Clone, Copy)]
pub(crate) struct BranchSignature(u64);

impl BranchSignature {
    pub(crate) fn new() -> Self {
        BranchSignature(0xcbf2_9ce4_8422_2325)
    }

    pub(crate) fn push(&mut self, tag: u64) {
        self.0 = (self.0 ^ tag.wrapping_add(1)).wrapping_mul(0x0000_0100_0000_01b3);
    }

    pub(crate) fn push_bool(&mut self, b: bool) {
        self.push(b as u64);
    }

    pub(crate) fn finish(self) -> u64 {
        self.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn quadratic_gradient_is_twice_input() {
        let x = vec![0.5, -1.0, 2.0];
        let g = gradient(&SquaredNorm, &x).unwrap();
        assert_eq!(g.value, 5.25);
        assert_eq!(g.d_input, vec![1.0, -2.0, 4.0]);
    }

    #[test]
    fn quadratic_finite_difference() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x: Vec<f64> = (0..8)
            .map(|i| if i % 2 == 0 { 1.0 } else { -1.0 } * rng.random_range(0.5..1.0))
            .collect();
        let coords = generic_coords(&SquaredNorm, &x, 8, 1e-6, &mut rng).unwrap();
        assert_eq!(coords.len(), 8);
        let r = finite_diff_check(&SquaredNorm, &x, &coords, 1e-6).unwrap();
        assert!(r.max_rel_error < 1e-9, "{r:?}");
    }

    /// `|x|^2` with a deliberately wrong gradient `scale * 2x`.
    struct WrongGradient(f64);

    impl Objective for WrongGradient {
        fn name(&self) -> String {
            "wrong".into()
        }
        fn value(&self, x: &[f64]) -> Result<f64> {
            SquaredNorm.value(x)
        }
        fn value_and_gradient(&self, x: &[f64]) -> Result<Gradient> {
            let mut g = SquaredNorm.value_and_gradient(x)?;
            g.d_input.iter_mut().for_each(|v| *v *= self.0);
            Ok(g)
        }
    }

    #[test]
    fn stationary_coordinates_are_not_generic() {
        let x = vec![1.0, 0.0, -0.5, 1e-6, 0.8];
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut coords = generic_coords(&SquaredNorm, &x, 5, 1e-6, &mut rng).unwrap();
        coords.sort_unstable();
        assert_eq!(coords, vec![0, 2, 4]);
    }

    #[test]
    fn wrong_gradients_cannot_hide() {
        let x = vec![1.0, -0.5, 0.8, 0.3];
        // A zero gradient excludes nothing and fails the check.
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let coords = generic_coords(&WrongGradient(0.0), &x, 4, 1e-6, &mut rng).unwrap();
        assert_eq!(coords.len(), 4);
        let r = finite_diff_check(&WrongGradient(0.0), &x, &coords, 1e-6).unwrap();
        assert!(r.max_rel_error > 0.99);
        // An inflated gradient excludes every coordinate.
        let coords = generic_coords(&WrongGradient(1e4), &x, 4, 1e-6, &mut rng).unwrap();
        assert!(coords.is_empty());
        // A mildly wrong one is selected and caught.
        let coords = generic_coords(&WrongGradient(1.01), &x, 4, 1e-6, &mut rng).unwrap();
        assert_eq!(coords.len(), 4);
        let r = finite_diff_check(&WrongGradient(1.01), &x, &coords, 1e-6).unwrap();
        assert!(r.max_rel_error > 5e-3);
    }

    #[test]
    fn rejects_bad_arguments() {
        let x = vec![1.0; 4];
        assert!(finite_diff_check(&SquaredNorm, &x, &[0], 0.0).is_err());
        assert!(finite_diff_check(&SquaredNorm, &x, &[4], 1e-6).is_err());
        assert!(matches!(
            gradient(&SquaredNorm, &[1.0, f64::INFINITY]),
            Err(Error::NonFinite { stage: "input" })
        ));
    }

    #[test]
    fn signature_is_order_sensitive() {
        let mut a = BranchSignature::new();
        a.push_bool(true);
        a.push_bool(false);
        let mut b = BranchSignature::new();
        b.push_bool(false);
        b.push_bool(true);
        assert_ne!(a.finish(), b.finish());
    }
}
