//! Writes every rank-agreement condition as a pair of float-32 WAV files plus
//! a manifest, for scoring by an external reference implementation.
//!
//! Usage: `cargo run --release -p speechloss --example reference_conditions -- <dir>`

use std::io::Write;

use anyhow::{Context, Result};
use sha2::{Digest, Sha256};
use speechloss::pesq::loss_pesq;
use speechloss::signal::{write_wav, WavFormat};
use speechloss::synth::{rank_conditions, render_condition};

fn main() -> Result<()> {
    let dir = std::env::args().nth(1).context("usage: reference_conditions <dir>")?;
    std::fs::create_dir_all(&dir)?;
    let mut manifest = std::fs::File::create(format!("{dir}/manifest.tsv"))?;
    writeln!(manifest, "id\tclean_seed\tnoise\tsnr_db\tclean\tdegraded\tsha256\tpesq_loss")?;
    for (i, cond) in rank_conditions().iter().enumerate() {
        let (clean, degraded) = render_condition(cond)?;
        let clean_path = format!("{dir}/c{i:02}_clean.wav");
        let degraded_path = format!("{dir}/c{i:02}_degraded.wav");
        write_wav(&clean_path, &clean, WavFormat::Float32)?;
        write_wav(&degraded_path, &degraded, WavFormat::Float32)?;
        let mut hasher = Sha256::new();
        for v in degraded.iter() {
            hasher.update(v.to_le_bytes());
        }
        let score = loss_pesq(&clean, &degraded)?.value;
        writeln!(
            manifest,
            "{i}\t{}\t{}\t{}\t{clean_path}\t{degraded_path}\t{}\t{score}",
            cond.clean_seed,
            cond.kind,
            cond.snr_db,
            hex::encode(hasher.finalize())
        )?;
    }
    Ok(())
}
