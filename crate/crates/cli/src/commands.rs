use std::path::Path;

use anyhow::Context;
use log::warn;
use serde::Serialize;

use speechloss::mask::MASK_CAP;
use speechloss::multitask::{gradcheck_with_tables, CombinationWeights, LossKind, Scorer, GRADCHECK_TOLERANCE};
use speechloss::pesq::PesqTables;
use speechloss::report::{run_experiment, ExperimentConfig};
use speechloss::signal::{load_wav, mix_at_snr, snr_db, write_wav, Signal, WavFormat};

use crate::format::sig6;
use crate::{OutputFormat, Outcome};

/// Truncates both signals to the shorter length, warning if they differ.
fn aligned(a: Signal, b: Signal, what: &str) -> (Signal, Signal) {
    if a.len() == b.len() {
        return (a, b);
    }
    let len = a.len().min(b.len());
    warn!(
        "{what} lengths differ ({} vs {} samples); truncating both to {len}",
        a.len(),
        b.len()
    );
    (a.truncated(len), b.truncated(len))
}

#[derive(Debug, Serialize)]
struct ScoreReport {
    si_sdr_db: f64,
    si_sdr_clamped: bool,
    pesq_loss: f64,
    d_sym: f64,
    d_asym: f64,
    stoi_loss: f64,
    alpha: f64,
    beta: f64,
    sdr_pesq: f64,
    sdr_stoi: f64,
    sdr_pesq_stoi: f64,
}

pub fn score(
    clean: &Path,
    degraded: &Path,
    weights: CombinationWeights,
    format: OutputFormat,
    tables: &PesqTables,
) -> anyhow::Result<Outcome> {
    let x = load_wav(clean).with_context(|| format!("reading {}", clean.display()))?;
    let y = load_wav(degraded).with_context(|| format!("reading {}", degraded.display()))?;
    let (x, y) = aligned(x, y, "clean and degraded");
    let s = Scorer::with_tables(&x, tables)?.score(&y)?;
    let report = ScoreReport {
        si_sdr_db: s.si_sdr_db,
        si_sdr_clamped: s.si_sdr_clamped,
        pesq_loss: s.pesq,
        d_sym: s.d_sym,
        d_asym: s.d_asym,
        stoi_loss: s.stoi,
        alpha: weights.alpha(),
        beta: weights.beta(),
        sdr_pesq: s.combined(LossKind::SdrPesq, weights),
        sdr_stoi: s.combined(LossKind::SdrStoi, weights),
        sdr_pesq_stoi: s.combined(LossKind::SdrPesqStoi, weights),
    };
    let numeric = [
        ("si_sdr_db", report.si_sdr_db),
        ("pesq_loss", report.pesq_loss),
        ("d_sym", report.d_sym),
        ("d_asym", report.d_asym),
        ("stoi_loss", report.stoi_loss),
        ("sdr_pesq", report.sdr_pesq),
        ("sdr_stoi", report.sdr_stoi),
        ("sdr_pesq_stoi", report.sdr_pesq_stoi),
    ];
    match format {
        OutputFormat::Text => {
            for (name, value) in numeric {
                let flag = if name == "si_sdr_db" && report.si_sdr_clamped { " (clamped)" } else { "" };
                println!("{name:<14} {}{flag}", sig6(value));
            }
        }
        OutputFormat::Csv => {
            let names: Vec<_> = numeric.iter().map(|(n, _)| *n).collect();
            let values: Vec<_> = numeric.iter().map(|(_, v)| sig6(*v)).collect();
            println!("{},si_sdr_clamped", names.join(","));
            println!("{},{}", values.join(","), report.si_sdr_clamped);
        }
        OutputFormat::Json => println!("{}", serde_json::to_string_pretty(&report)?),
    }
    Ok(Outcome::Success)
}

pub fn mix(clean: &Path, noise: &Path, snr: f64, out: &Path) -> anyhow::Result<Outcome> {
    let x = load_wav(clean).with_context(|| format!("reading {}", clean.display()))?;
    let n = load_wav(noise).with_context(|| format!("reading {}", noise.display()))?;
    let (x, n) = aligned(x, n, "clean and noise");
    let mixture = mix_at_snr(&x, &n, snr)?;
    let peak = mixture.noisy.peak();
    if peak > 1.0 {
        warn!("mixture peak {} exceeds full scale; written unclipped as float-32", sig6(peak));
    }
    write_wav(out, &mixture.noisy, WavFormat::Float32)
        .with_context(|| format!("writing {}", out.display()))?;
    println!("noise_gain     {}", sig6(mixture.noise_gain));
    println!("snr_db         {}", sig6(snr_db(&x, &mixture.scaled_noise)));
    println!("peak           {}", sig6(peak));
    Ok(Outcome::Success)
}

pub fn gradcheck(
    kind: LossKind,
    seed: u64,
    weights: CombinationWeights,
    tables: &PesqTables,
) -> anyhow::Result<Outcome> {
    let report = gradcheck_with_tables(kind, weights, seed, tables)?;
    let passed = report.max_rel_error < GRADCHECK_TOLERANCE;
    println!(
        "{} {kind} seed {seed}: max relative error {} at sample {} (analytic {}, numeric {}) over {} coordinates",
        if passed { "PASS" } else { "FAIL" },
        sig6(report.max_rel_error),
        report.worst_coord,
        sig6(report.analytic),
        sig6(report.numeric),
        report.checked
    );
    Ok(if passed { Outcome::Success } else { Outcome::CheckFailed })
}

pub fn experiment(config: &ExperimentConfig, out: &Path, format: OutputFormat) -> anyhow::Result<Outcome> {
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let report = run_experiment(config)?;
    let csv = report.to_csv()?;
    let json = report.to_json()?;
    for (name, contents) in [("report.csv", &csv), ("summary.json", &json)] {
        let path = out.join(name);
        std::fs::write(&path, contents).with_context(|| format!("writing {}", path.display()))?;
    }
    match format {
        OutputFormat::Text => {
            println!(
                "{:<22} {:>8} {:>10} {:>10} {:>10} {:>6}",
                "condition", "snr_db", "si_sdr_db", "pesq_loss", "stoi_loss", "steps"
            );
            for r in &report.rows {
                println!(
                    "{:<22} {:>8} {:>10} {:>10} {:>10} {:>6}",
                    r.condition,
                    sig6(r.snr_db),
                    sig6(r.si_sdr_db),
                    sig6(r.pesq_loss),
                    sig6(r.stoi_loss),
                    r.steps
                );
            }
            println!("(mask cap {}; oracle rows use the clean reference)", sig6(MASK_CAP));
            for t in &report.trends {
                println!(
                    "{} {} at {} dB: {} vs {}",
                    if t.passed { "PASS" } else { "FAIL" },
                    t.name,
                    t.snr_db.map_or_else(|| "-".into(), sig6),
                    sig6(t.measured),
                    sig6(t.against)
                );
            }
        }
        OutputFormat::Csv => print!("{csv}"),
        OutputFormat::Json => print!("{json}"),
    }
    Ok(if report.all_trends_passed { Outcome::Success } else { Outcome::CheckFailed })
}
