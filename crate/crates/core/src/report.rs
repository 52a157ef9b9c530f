//! Oracle-mask and mask-refinement experiments over an SNR grid, with CSV
//! and JSON reports and pass/fail checks of the expected directional trends.

use std::fmt;

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::mask::{
    apply_mask, oracle_iam, oracle_psm, refine_mixture, RefineConfig, DEFAULT_STEPS,
    DEFAULT_STEP_SIZE, MASK_CAP,
};
use crate::multitask::{CombinationWeights, LossKind, Scorer, Scores};
use crate::pesq::PesqTables;
use crate::signal::{mix_at_snr, Signal};
use crate::stft::{stft, HOP, WINDOW_LEN};
use crate::synth::{reference_suite, SuiteItem};

/// SNR grid of the standard experiment, in dB.
pub const DEFAULT_SNRS: [f64; 6] = [-10.0, -5.0, 0.0, 5.0, 10.0, 15.0];

/// Number of suite utterances in the standard experiment (one per noise kind).
pub const DEFAULT_UTTERANCES: usize = 3;

/// Objectives refined in the standard experiment.
pub const DEFAULT_OBJECTIVES: [LossKind; 3] =
    [LossKind::Sdr, LossKind::SdrPesq, LossKind::SdrPesqStoi];

/// Minimum SI-SDR gain of SDR refinement over the mixture at 0 dB.
pub const REQUIRED_SDR_GAIN_DB: f64 = 5.0;

/// Caveat written into every JSON summary.
pub const ORACLE_NOTE: &str = "oracle IAM/PSM rows are computed from the clean reference and bound \
trained mask estimators from above; only directional trends are meaningful";

/// One row of a report table.
#[derive(Debug, Clone, PartialEq)]
pub enum Condition {
    Noisy,
    Iam,
    Psm,
    Refine(LossKind),
}

impl Condition {
    pub fn name(&self) -> String {
        match self {
            Condition::Noisy => "noisy".into(),
            Condition::Iam => "iam".into(),
            Condition::Psm => "psm".into(),
            Condition::Refine(kind) => format!("refine-{kind}"),
        }
    }
}

impl fmt::Display for Condition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name())
    }
}

/// Metrics of one condition on one mixture.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReportRow {
    pub condition: String,
    pub snr_db: f64,
    pub si_sdr_db: f64,
    pub pesq_loss: f64,
    pub stoi_loss: f64,
    pub steps: usize,
    pub seed: u64,
    pub si_sdr_clamped: bool,
}

impl ReportRow {
    fn new(condition: &Condition, snr_db: f64, scores: &Scores, steps: usize, seed: u64) -> Self {
        ReportRow {
            condition: condition.name(),
            snr_db,
            si_sdr_db: scores.si_sdr_db,
            pesq_loss: scores.pesq,
            stoi_loss: scores.stoi,
            steps,
            seed,
            si_sdr_clamped: scores.si_sdr_clamped,
        }
    }
}

/// Noisy, oracle-IAM and oracle-PSM rows for `clean + noise` at each SNR.
/// `seed` is only copied into the rows.
pub fn oracle_report(
    clean: &Signal,
    noise: &Signal,
    snrs: &[f64],
    seed: u64,
    tables: &PesqTables,
) -> Result<Vec<ReportRow>> {
    let scorer = Scorer::with_tables(clean, tables)?;
    let clean_spec = stft(clean, WINDOW_LEN, HOP)?;
    let mut rows = Vec::with_capacity(3 * snrs.len());
    for &snr in snrs {
        let noisy = mix_at_snr(clean, noise, snr)?.noisy;
        rows.extend(oracle_rows(&scorer, &clean_spec, &noisy, snr, seed)?);
    }
    Ok(rows)
}

fn oracle_rows(
    scorer: &Scorer,
    clean_spec: &crate::stft::Spectrogram,
    noisy: &Signal,
    snr: f64,
    seed: u64,
) -> Result<Vec<ReportRow>> {
    let noisy_spec = stft(noisy, WINDOW_LEN, HOP)?;
    let iam = apply_mask(&noisy_spec, &oracle_iam(clean_spec, &noisy_spec)?, noisy.len())?;
    let psm = apply_mask(&noisy_spec, &oracle_psm(clean_spec, &noisy_spec)?, noisy.len())?;
    Ok(vec![
        ReportRow::new(&Condition::Noisy, snr, &scorer.score(noisy)?, 0, seed),
        ReportRow::new(&Condition::Iam, snr, &scorer.score(&iam)?, 0, seed),
        ReportRow::new(&Condition::Psm, snr, &scorer.score(&psm)?, 0, seed),
    ])
}

/// Settings of [`run_experiment`].
#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub snrs: Vec<f64>,
    pub utterances: usize,
    pub objectives: Vec<LossKind>,
    pub weights: CombinationWeights,
    pub steps: usize,
    pub step_size: f64,
    pub tables: PesqTables,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            snrs: DEFAULT_SNRS.to_vec(),
            utterances: DEFAULT_UTTERANCES,
            objectives: DEFAULT_OBJECTIVES.to_vec(),
            weights: CombinationWeights::default(),
            steps: DEFAULT_STEPS,
            step_size: DEFAULT_STEP_SIZE,
            tables: PesqTables::standard().clone(),
        }
    }
}

impl ExperimentConfig {
    fn validate(&self) -> Result<()> {
        if self.snrs.is_empty() || self.snrs.iter().any(|s| !s.is_finite()) {
            return Err(Error::InvalidArgument(
                "the SNR list must be non-empty and finite".into(),
            ));
        }
        if self.utterances == 0 {
            return Err(Error::InvalidArgument("at least one utterance is required".into()));
        }
        Ok(())
    }
}

/// A directional claim checked on the experiment's rows.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrendCheck {
    pub name: String,
    pub description: String,
    pub snr_db: Option<f64>,
    /// Measured value of the side expected to be larger.
    pub measured: f64,
    /// Value it is compared against.
    pub against: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, Serialize)]
struct ConfigSummary {
    seed: u64,
    snrs: Vec<f64>,
    utterances: usize,
    objectives: Vec<String>,
    alpha: f64,
    beta: f64,
    steps: usize,
    step_size: f64,
    mask_cap: f64,
    tables_revision: String,
    tables_checksum: String,
}

/// Rows and trend checks of one experiment run.
#[derive(Debug, Clone, Serialize)]
pub struct ExperimentReport {
    note: &'static str,
    config: ConfigSummary,
    pub rows: Vec<ReportRow>,
    pub trends: Vec<TrendCheck>,
    pub all_trends_passed: bool,
}

#[derive(Serialize)]
struct CsvRow<'a> {
    condition: &'a str,
    snr_db: f64,
    si_sdr_db: f64,
    pesq_loss: f64,
    stoi_loss: f64,
    steps: usize,
    seed: u64,
}

impl ExperimentReport {
    /// Rows as CSV with the columns
    /// `condition,snr_db,si_sdr_db,pesq_loss,stoi_loss,steps,seed`.
    pub fn to_csv(&self) -> Result<String> {
        write_csv(&self.rows)
    }

    /// Full-precision JSON summary: configuration, rows and trend checks.
    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self)
            .map(|s| s + "\n")
            .map_err(|e| Error::Report(e.to_string()))
    }
}

/// Serializes rows with the report CSV columns.
pub fn write_csv(rows: &[ReportRow]) -> Result<String> {
    let mut writer = csv::Writer::from_writer(Vec::new());
    for r in rows {
        writer
            .serialize(CsvRow {
                condition: &r.condition,
                snr_db: r.snr_db,
                si_sdr_db: r.si_sdr_db,
                pesq_loss: r.pesq_loss,
                stoi_loss: r.stoi_loss,
                steps: r.steps,
                seed: r.seed,
            })
            .map_err(|e| Error::Report(e.to_string()))?;
    }
    let bytes = writer.into_inner().map_err(|e| Error::Report(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| Error::Report(e.to_string()))
}

fn run_cell(item: &SuiteItem, snr: f64, config: &ExperimentConfig) -> Result<Vec<ReportRow>> {
    let scorer = Scorer::with_tables(&item.clean, &config.tables)?;
    let clean_spec = stft(&item.clean, WINDOW_LEN, HOP)?;
    let noisy = mix_at_snr(&item.clean, &item.noise, snr)?.noisy;
    let mut rows = oracle_rows(&scorer, &clean_spec, &noisy, snr, item.seed)?;
    for &kind in &config.objectives {
        let refine_config = RefineConfig {
            kind,
            weights: config.weights,
            steps: config.steps,
            step_size: config.step_size,
            cap: MASK_CAP,
            tables: config.tables.clone(),
        };
        let refined = refine_mixture(&item.clean, &noisy, &refine_config)?;
        let last = refined
            .trace
            .last()
            .ok_or_else(|| Error::Report("empty refinement trace".into()))?;
        rows.push(ReportRow::new(
            &Condition::Refine(kind),
            snr,
            &last.scores,
            last.iteration,
            item.seed,
        ));
    }
    Ok(rows)
}

/// Runs the oracle masks and every configured refinement on each suite
/// utterance at each SNR. Cells run in parallel; rows are assembled in
/// (utterance, SNR, condition) order, so the output does not depend on
/// scheduling.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentReport> {
    config.validate()?;
    let suite = reference_suite(config.seed, config.utterances);
    let cells: Vec<(usize, f64)> = (0..suite.len())
        .flat_map(|u| config.snrs.iter().map(move |&s| (u, s)))
        .collect();
    let rows: Vec<ReportRow> = cells
        .par_iter()
        .map(|&(u, snr)| run_cell(&suite[u], snr, config))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .flatten()
        .collect();
    let trends = check_trends(&rows, &config.snrs);
    Ok(ExperimentReport {
        note: ORACLE_NOTE,
        config: ConfigSummary {
            seed: config.seed,
            snrs: config.snrs.clone(),
            utterances: config.utterances,
            objectives: config.objectives.iter().map(|k| k.to_string()).collect(),
            alpha: config.weights.alpha(),
            beta: config.weights.beta(),
            steps: config.steps,
            step_size: config.step_size,
            mask_cap: MASK_CAP,
            tables_revision: config.tables.revision.clone(),
            tables_checksum: config.tables.checksum.clone(),
        },
        all_trends_passed: trends.iter().all(|t| t.passed),
        rows,
        trends,
    })
}

fn matching<'a>(rows: &'a [ReportRow], condition: &Condition, snr: f64) -> Vec<&'a ReportRow> {
    let name = condition.name();
    rows.iter()
        .filter(|r| r.condition == name && r.snr_db == snr)
        .collect()
}

fn mean_of(rows: &[&ReportRow], metric: fn(&ReportRow) -> f64) -> Option<f64> {
    (!rows.is_empty()).then(|| rows.iter().map(|r| metric(r)).sum::<f64>() / rows.len() as f64)
}

/// Directional checks on report rows, averaged over utterances per SNR:
/// PSM at least matches IAM in SI-SDR; refining SDR+PESQ ends with a
/// strictly higher PESQ score than refining SDR alone; refining SDR gains
/// at least [`REQUIRED_SDR_GAIN_DB`] over the mixture at 0 dB. Checks whose
/// rows are absent are omitted.
pub fn check_trends(rows: &[ReportRow], snrs: &[f64]) -> Vec<TrendCheck> {
    let mut checks = Vec::new();
    let si_sdr = |r: &ReportRow| r.si_sdr_db;
    let pesq = |r: &ReportRow| r.pesq_loss;
    for &snr in snrs {
        if let (Some(psm), Some(iam)) = (
            mean_of(&matching(rows, &Condition::Psm, snr), si_sdr),
            mean_of(&matching(rows, &Condition::Iam, snr), si_sdr),
        ) {
            checks.push(TrendCheck {
                name: "psm-si-sdr-at-least-iam".into(),
                description: "oracle PSM reaches at least the SI-SDR of oracle IAM".into(),
                snr_db: Some(snr),
                measured: psm,
                against: iam,
                passed: psm >= iam,
            });
        }
    }
    for &snr in snrs {
        if let (Some(combined), Some(plain)) = (
            mean_of(&matching(rows, &Condition::Refine(LossKind::SdrPesq), snr), pesq),
            mean_of(&matching(rows, &Condition::Refine(LossKind::Sdr), snr), pesq),
        ) {
            checks.push(TrendCheck {
                name: "sdr-pesq-improves-pesq-over-sdr".into(),
                description: "refining SDR+PESQ ends with a higher PESQ score than refining SDR"
                    .into(),
                snr_db: Some(snr),
                measured: combined,
                against: plain,
                passed: combined > plain,
            });
        }
    }
    if let (Some(refined), Some(noisy)) = (
        mean_of(&matching(rows, &Condition::Refine(LossKind::Sdr), 0.0), si_sdr),
        mean_of(&matching(rows, &Condition::Noisy, 0.0), si_sdr),
    ) {
        checks.push(TrendCheck {
            name: "sdr-refinement-gain-at-0db".into(),
            description: format!(
                "refining SDR gains at least {REQUIRED_SDR_GAIN_DB} dB SI-SDR over the mixture"
            ),
            snr_db: Some(0.0),
            measured: refined - noisy,
            against: REQUIRED_SDR_GAIN_DB,
            passed: refined - noisy >= REQUIRED_SDR_GAIN_DB,
        });
    }
    checks
}
