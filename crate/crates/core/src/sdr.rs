//! Projection-based SDR decomposition and scale-invariant SDR.

use crate::error::{Error, Result};
use crate::grad::{BranchSignature, Gradient, Objective};
use crate::signal::{dot, energy};
use crate::EPSILON;

/// SDR values are clamped to `[-SDR_CAP_DB, SDR_CAP_DB]`.
pub const SDR_CAP_DB: f64 = 120.0;

/// The relative stabilizer bounds the raw value by `10 log10(1 / EPSILON)`,
/// which is exactly the cap; values within this margin of it count as clamped.
const CAP_SATURATION_DB: f64 = 1e-6;

const DB_PER_NEPER: f64 = 10.0 / std::f64::consts::LN_10;

/// `x_hat = x_target + e_noise + e_artif`.
#[derive(Debug, Clone, PartialEq)]
pub struct SdrDecomposition {
    pub x_target: Vec<f64>,
    pub e_noise: Vec<f64>,
    pub e_artif: Vec<f64>,
    /// Scalar projection coefficient of `x_hat` onto the clean signal.
    pub alpha: f64,
}

fn check_pair(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::LengthMismatch {
            left: a.len(),
            right: b.len(),
        });
    }
    Ok(())
}

/// Projects `x_hat` onto the clean and noise directions; the residual is the
/// artifact term.
pub fn decompose(clean: &[f64], noise: &[f64], x_hat: &[f64]) -> Result<SdrDecomposition> {
    check_pair(clean, x_hat)?;
    check_pair(noise, x_hat)?;
    let clean_energy = energy(clean);
    let noise_energy = energy(noise);
    if clean_energy <= 0.0 {
        return Err(Error::ZeroEnergy { what: "clean signal" });
    }
    if noise_energy <= 0.0 {
        return Err(Error::ZeroEnergy { what: "noise signal" });
    }
    let alpha = dot(clean, x_hat) / clean_energy;
    let beta = dot(noise, x_hat) / noise_energy;
    let x_target: Vec<f64> = clean.iter().map(|c| alpha * c).collect();
    let e_noise: Vec<f64> = noise.iter().map(|n| beta * n).collect();
    let e_artif = x_hat
        .iter()
        .zip(&x_target)
        .zip(&e_noise)
        .map(|((x, t), n)| x - t - n)
        .collect();
    Ok(SdrDecomposition {
        x_target,
        e_noise,
        e_artif,
        alpha,
    })
}

/// A scale-invariant SDR value and whether it hit the clamp.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SiSdr {
    pub db: f64,
    pub clamped: bool,
    pub alpha: f64,
}

/// Scale-invariant SDR in dB, clamped to `±SDR_CAP_DB`.
pub fn si_sdr(clean: &[f64], x_hat: &[f64]) -> Result<f64> {
    Ok(si_sdr_detailed(clean, x_hat)?.db)
}

pub fn si_sdr_detailed(clean: &[f64], x_hat: &[f64]) -> Result<SiSdr> {
    SdrReference::new(clean)?.evaluate(x_hat)
}

/// Mean per-utterance SI-SDR over a mini-batch (an objective to maximize).
pub fn loss_sdr(batch: &[(&[f64], &[f64])]) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let mut sum = 0.0;
    for (clean, x_hat) in batch {
        sum += si_sdr(clean, x_hat)?;
    }
    Ok(sum / batch.len() as f64)
}

/// A clean reference prepared for repeated SI-SDR evaluation.
#[derive(Debug, Clone)]
pub struct SdrReference {
    clean: Vec<f64>,
    clean_energy: f64,
}

struct SdrTerms {
    proj: f64,
    alpha: f64,
    numerator: f64,
    residual: Vec<f64>,
    denominator: f64,
}

impl SdrReference {
    pub fn new(clean: &[f64]) -> Result<Self> {
        let clean_energy = energy(clean);
        if clean_energy <= 0.0 {
            return Err(Error::ZeroEnergy { what: "clean signal" });
        }
        Ok(SdrReference {
            clean: clean.to_vec(),
            clean_energy,
        })
    }

    pub fn clean(&self) -> &[f64] {
        &self.clean
    }

    fn terms(&self, x_hat: &[f64]) -> Result<SdrTerms> {
        check_pair(&self.clean, x_hat)?;
        let proj = dot(&self.clean, x_hat);
        let alpha = proj / self.clean_energy;
        let residual: Vec<f64> = self
            .clean
            .iter()
            .zip(x_hat)
            .map(|(c, x)| alpha * c - x)
            .collect();
        Ok(SdrTerms {
            proj,
            alpha,
            numerator: alpha * alpha * self.clean_energy,
            denominator: energy(&residual) + EPSILON * alpha * alpha * self.clean_energy,
            residual,
        })
    }

    fn clamp(raw: f64) -> (f64, bool) {
        if raw.is_nan() || raw < -SDR_CAP_DB {
            (-SDR_CAP_DB, true)
        } else if raw >= SDR_CAP_DB - CAP_SATURATION_DB {
            (SDR_CAP_DB, true)
        } else {
            (raw, false)
        }
    }

    pub fn evaluate(&self, x_hat: &[f64]) -> Result<SiSdr> {
        let t = self.terms(x_hat)?;
        let raw = if t.numerator > 0.0 {
            DB_PER_NEPER * (t.numerator / t.denominator).ln()
        } else {
            f64::NEG_INFINITY
        };
        let (db, clamped) = Self::clamp(raw);
        Ok(SiSdr {
            db,
            clamped,
            alpha: t.alpha,
        })
    }

    /// SI-SDR and its gradient; the gradient is zero wherever the clamp is
    /// active.
    pub fn value_and_gradient(&self, x_hat: &[f64]) -> Result<(SiSdr, Vec<f64>)> {
        let t = self.terms(x_hat)?;
        let score = self.evaluate(x_hat)?;
        if score.clamped {
            return Ok((score, vec![0.0; x_hat.len()]));
        }
        let e = self.clean_energy;
        // num = a^2 / e, d(num) = 2 a x / e; d(|r|^2) = 2 (r.x / e) x - 2 r;
        // den = |r|^2 + eps num.
        let r_dot_x = dot(&t.residual, &self.clean);
        let dnum_coef = 2.0 * t.proj / e;
        let num_coef = DB_PER_NEPER * (1.0 / t.numerator - EPSILON / t.denominator) * dnum_coef;
        let den_coef = DB_PER_NEPER / t.denominator;
        let grad = self
            .clean
            .iter()
            .zip(&t.residual)
            .map(|(c, r)| num_coef * c - den_coef * (2.0 * r_dot_x / e * c - 2.0 * r))
            .collect();
        Ok((score, grad))
    }

    pub(crate) fn signature(&self, x_hat: &[f64], sig: &mut BranchSignature) -> Result<()> {
        let s = self.evaluate(x_hat)?;
        sig.push_bool(s.clamped);
        Ok(())
    }
}

impl Objective for SdrReference {
    fn name(&self) -> String {
        "sdr".into()
    }

    fn value(&self, x_hat: &[f64]) -> Result<f64> {
        Ok(self.evaluate(x_hat)?.db)
    }

    fn value_and_gradient(&self, x_hat: &[f64]) -> Result<Gradient> {
        let (score, d_input) = SdrReference::value_and_gradient(self, x_hat)?;
        Ok(Gradient {
            value: score.db,
            d_input,
        })
    }

    fn branch_signature(&self, x_hat: &[f64]) -> Result<u64> {
        let mut sig = BranchSignature::new();
        self.signature(x_hat, &mut sig)?;
        Ok(sig.finish())
    }
}
