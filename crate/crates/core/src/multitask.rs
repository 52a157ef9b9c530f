//! Weighted combinations of the SDR, PESQ-style and STOI-style objectives.
//!
//! Every combination is an objective to maximize:
//! `SI-SDR + alpha * PESQ + beta * STOI`, with the weights of absent terms
//! ignored.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::grad::{finite_diff_check, generic_coords, BranchSignature, FdReport, Gradient, Objective};
use crate::pesq::{PesqReference, PesqTables};
use crate::sdr::SdrReference;
use crate::stoi::StoiReference;

/// Weights of the PESQ (`alpha`) and STOI (`beta`) terms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CombinationWeights {
    alpha: f64,
    beta: f64,
}

impl CombinationWeights {
    pub fn new(alpha: f64, beta: f64) -> Result<Self> {
        for (name, w) in [("alpha", alpha), ("beta", beta)] {
            if !(w.is_finite() && w >= 0.0) {
                return Err(Error::InvalidArgument(format!(
                    "{name} must be finite and nonnegative, got {w}"
                )));
            }
        }
        Ok(CombinationWeights { alpha, beta })
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }
}

impl Default for CombinationWeights {
    fn default() -> Self {
        CombinationWeights {
            alpha: 1.0,
            beta: 1.0,
        }
    }
}

/// The six registered objectives.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum LossKind {
    Sdr,
    Pesq,
    Stoi,
    SdrPesq,
    SdrStoi,
    SdrPesqStoi,
}

impl LossKind {
    pub const ALL: [LossKind; 6] = [
        LossKind::Sdr,
        LossKind::Pesq,
        LossKind::Stoi,
        LossKind::SdrPesq,
        LossKind::SdrStoi,
        LossKind::SdrPesqStoi,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            LossKind::Sdr => "sdr",
            LossKind::Pesq => "pesq",
            LossKind::Stoi => "stoi",
            LossKind::SdrPesq => "sdr-pesq",
            LossKind::SdrStoi => "sdr-stoi",
            LossKind::SdrPesqStoi => "sdr-pesq-stoi",
        }
    }

    fn terms(self) -> (bool, bool, bool) {
        match self {
            LossKind::Sdr => (true, false, false),
            LossKind::Pesq => (false, true, false),
            LossKind::Stoi => (false, false, true),
            LossKind::SdrPesq => (true, true, false),
            LossKind::SdrStoi => (true, false, true),
            LossKind::SdrPesqStoi => (true, true, true),
        }
    }

    /// Multipliers of the (SDR, PESQ, STOI) terms. Single-term objectives
    /// are unweighted.
    pub fn coefficients(self, weights: CombinationWeights) -> (f64, f64, f64) {
        match self {
            LossKind::Sdr => (1.0, 0.0, 0.0),
            LossKind::Pesq => (0.0, 1.0, 0.0),
            LossKind::Stoi => (0.0, 0.0, 1.0),
            LossKind::SdrPesq => (1.0, weights.alpha, 0.0),
            LossKind::SdrStoi => (1.0, 0.0, weights.beta),
            LossKind::SdrPesqStoi => (1.0, weights.alpha, weights.beta),
        }
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        LossKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| {
                let names: Vec<_> = LossKind::ALL.iter().map(|k| k.as_str()).collect();
                Error::InvalidArgument(format!("unknown loss `{s}` (expected one of {names:?})"))
            })
    }
}

/// `SI-SDR + alpha * PESQ`.
pub fn loss_sdr_pesq(clean: &[f64], x_hat: &[f64], alpha: f64) -> Result<f64> {
    let w = CombinationWeights::new(alpha, 0.0)?;
    LossObjective::new(LossKind::SdrPesq, w, clean)?.value(x_hat)
}

/// `SI-SDR + beta * STOI`.
pub fn loss_sdr_stoi(clean: &[f64], x_hat: &[f64], beta: f64) -> Result<f64> {
    let w = CombinationWeights::new(0.0, beta)?;
    LossObjective::new(LossKind::SdrStoi, w, clean)?.value(x_hat)
}

/// `SI-SDR + alpha * PESQ + beta * STOI`.
pub fn loss_sdr_pesq_stoi(clean: &[f64], x_hat: &[f64], alpha: f64, beta: f64) -> Result<f64> {
    let w = CombinationWeights::new(alpha, beta)?;
    LossObjective::new(LossKind::SdrPesqStoi, w, clean)?.value(x_hat)
}

/// A registered objective bound to one clean reference.
#[derive(Debug, Clone)]
pub struct LossObjective {
    kind: LossKind,
    weights: CombinationWeights,
    sdr: Option<SdrReference>,
    pesq: Option<PesqReference>,
    stoi: Option<StoiReference>,
}

impl LossObjective {
    pub fn new(kind: LossKind, weights: CombinationWeights, clean: &[f64]) -> Result<Self> {
        Self::with_tables(kind, weights, clean, PesqTables::standard())
    }

    /// Like [`LossObjective::new`] with explicit perceptual-model tables.
    pub fn with_tables(
        kind: LossKind,
        weights: CombinationWeights,
        clean: &[f64],
        tables: &PesqTables,
    ) -> Result<Self> {
        let (sdr, pesq, stoi) = kind.terms();
        Ok(LossObjective {
            kind,
            weights,
            sdr: sdr.then(|| SdrReference::new(clean)).transpose()?,
            pesq: pesq
                .then(|| PesqReference::with_tables(clean, tables.clone()))
                .transpose()?,
            stoi: stoi.then(|| StoiReference::new(clean)).transpose()?,
        })
    }

    pub fn kind(&self) -> LossKind {
        self.kind
    }

    pub fn weights(&self) -> CombinationWeights {
        self.weights
    }
}

impl Objective for LossObjective {
    fn name(&self) -> String {
        self.kind.as_str().into()
    }

    fn value(&self, x_hat: &[f64]) -> Result<f64> {
        let (a, b, c) = self.kind.coefficients(self.weights);
        let mut total = 0.0;
        if let Some(r) = &self.sdr {
            total += a * r.evaluate(x_hat)?.db;
        }
        if let Some(r) = &self.pesq {
            total += b * r.evaluate(x_hat)?.value;
        }
        if let Some(r) = &self.stoi {
            total += c * r.evaluate(x_hat)?.value;
        }
        Ok(total)
    }

    fn value_and_gradient(&self, x_hat: &[f64]) -> Result<Gradient> {
        let (a, b, c) = self.kind.coefficients(self.weights);
        let mut value = 0.0;
        let mut grad = vec![0.0; x_hat.len()];
        let mut accumulate = |w: f64, v: f64, g: Vec<f64>| {
            value += w * v;
            grad.iter_mut().zip(g).for_each(|(acc, gi)| *acc += w * gi);
        };
        if let Some(r) = &self.sdr {
            let (s, g) = r.value_and_gradient(x_hat)?;
            accumulate(a, s.db, g);
        }
        if let Some(r) = &self.pesq {
            let (s, g) = r.value_and_gradient(x_hat)?;
            accumulate(b, s.value, g);
        }
        if let Some(r) = &self.stoi {
            let (s, g) = r.value_and_gradient(x_hat)?;
            accumulate(c, s.value, g);
        }
        Ok(Gradient {
            value,
            d_input: grad,
        })
    }

    fn branch_signature(&self, x_hat: &[f64]) -> Result<u64> {
        let mut sig = BranchSignature::new();
        if let Some(r) = &self.sdr {
            r.signature(x_hat, &mut sig)?;
        }
        if let Some(r) = &self.pesq {
            r.signature(x_hat, &mut sig)?;
        }
        if let Some(r) = &self.stoi {
            r.signature(x_hat, &mut sig)?;
        }
        Ok(sig.finish())
    }
}

/// Every metric for one estimate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Scores {
    pub si_sdr_db: f64,
    pub si_sdr_clamped: bool,
    pub pesq: f64,
    pub d_sym: f64,
    pub d_asym: f64,
    pub stoi: f64,
}

impl Scores {
    /// Value of `kind` under `weights`, recomputed from the components.
    pub fn combined(&self, kind: LossKind, weights: CombinationWeights) -> f64 {
        let (a, b, c) = kind.coefficients(weights);
        let mut total = 0.0;
        let (sdr, pesq, stoi) = kind.terms();
        if sdr {
            total += a * self.si_sdr_db;
        }
        if pesq {
            total += b * self.pesq;
        }
        if stoi {
            total += c * self.stoi;
        }
        total
    }
}

/// All three references prepared for one clean signal.
#[derive(Debug, Clone)]
pub struct Scorer {
    sdr: SdrReference,
    pesq: PesqReference,
    stoi: StoiReference,
}

impl Scorer {
    pub fn new(clean: &[f64]) -> Result<Self> {
        Self::with_tables(clean, PesqTables::standard())
    }

    /// Like [`Scorer::new`] with explicit perceptual-model tables.
    pub fn with_tables(clean: &[f64], tables: &PesqTables) -> Result<Self> {
        Ok(Scorer {
            sdr: SdrReference::new(clean)?,
            pesq: PesqReference::with_tables(clean, tables.clone())?,
            stoi: StoiReference::new(clean)?,
        })
    }

    pub fn score(&self, x_hat: &[f64]) -> Result<Scores> {
        let sdr = self.sdr.evaluate(x_hat)?;
        let pesq = self.pesq.evaluate(x_hat)?;
        let stoi = self.stoi.evaluate(x_hat)?;
        Ok(Scores {
            si_sdr_db: sdr.db,
            si_sdr_clamped: sdr.clamped,
            pesq: pesq.value,
            d_sym: pesq.d_sym,
            d_asym: pesq.d_asym,
            stoi: stoi.value,
        })
    }
}

/// Central-difference step of the standard gradient check.
pub const GRADCHECK_STEP: f64 = 1e-6;
/// Coordinates per standard gradient check.
pub const GRADCHECK_COORDS: usize = 64;
/// Pass threshold of the standard gradient check.
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

/// Runs the standard finite-difference check of `kind` on the seeded
/// synthetic pair [`crate::synth::gradcheck_pair`].
pub fn gradcheck(kind: LossKind, weights: CombinationWeights, seed: u64) -> Result<FdReport> {
    gradcheck_with_tables(kind, weights, seed, PesqTables::standard())
}

/// Like [`gradcheck`] with explicit perceptual-model tables.
pub fn gradcheck_with_tables(
    kind: LossKind,
    weights: CombinationWeights,
    seed: u64,
    tables: &PesqTables,
) -> Result<FdReport> {
    let (clean, x_hat) = crate::synth::gradcheck_pair(seed);
    let objective = LossObjective::with_tables(kind, weights, &clean, tables)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let coords = generic_coords(&objective, &x_hat, GRADCHECK_COORDS, GRADCHECK_STEP, &mut rng)?;
    if coords.len() < GRADCHECK_COORDS {
        return Err(Error::InvalidArgument(format!(
            "only {} smooth coordinates found for {kind}",
            coords.len()
        )));
    }
    finite_diff_check(&objective, &x_hat, &coords, GRADCHECK_STEP)
}
