//! Deterministic synthetic speech proxies and noises.
//!
//! A clean proxy is a sequence of syllable-like events separated by pauses:
//! voiced events are amplitude-modulated harmonic tones shaped by two
//! formant-like resonances, unvoiced events are band-passed noise bursts.
//! Every generator is driven by a ChaCha stream seeded from a `u64`, so the
//! same seed yields bit-identical samples on every platform.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::signal::{Signal, SAMPLE_RATE};

const FS: f64 = SAMPLE_RATE as f64;

/// Peak amplitude of a generated clean proxy.
pub const PROXY_PEAK: f64 = 0.5;

/// Noise families of the reference suite.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum NoiseKind {
    White,
    Pink,
    Babble,
}

impl NoiseKind {
    pub const ALL: [NoiseKind; 3] = [NoiseKind::White, NoiseKind::Pink, NoiseKind::Babble];

    pub fn as_str(self) -> &'static str {
        match self {
            NoiseKind::White => "white",
            NoiseKind::Pink => "pink",
            NoiseKind::Babble => "babble",
        }
    }
}

impl fmt::Display for NoiseKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for NoiseKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        NoiseKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown noise kind `{s}`")))
    }
}

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Raised-cosine attack/decay envelope over `len` samples.
fn envelope(n: usize, len: usize, ramp: usize) -> f64 {
    let ramp = ramp.min(len / 2).max(1);
    if n < ramp {
        0.5 - 0.5 * (PI * n as f64 / ramp as f64).cos()
    } else if n >= len - ramp {
        0.5 - 0.5 * (PI * (len - n) as f64 / ramp as f64).cos()
    } else {
        1.0
    }
}

fn add_voiced(out: &mut [f64], start: usize, len: usize, rng: &mut ChaCha8Rng) {
    let f0 = rng.random_range(100.0..240.0);
    let glide = rng.random_range(-0.15..0.15);
    let f1 = rng.random_range(300.0..900.0);
    let f2 = rng.random_range(900.0..2600.0);
    let am_rate = rng.random_range(3.0..6.0);
    let gain = rng.random_range(0.5..1.0);
    let harmonics = (4000.0 / f0) as usize;
    let phases: Vec<f64> = (0..harmonics).map(|_| rng.random_range(0.0..2.0 * PI)).collect();
    let formant = |f: f64| {
        let bump = |fc: f64, bw: f64| (-((f - fc) / bw).powi(2)).exp();
        0.15 + bump(f1, 150.0) + 0.6 * bump(f2, 250.0)
    };
    let mut phase = 0.0;
    for n in 0..len.min(out.len().saturating_sub(start)) {
        let frac = n as f64 / len as f64;
        let f = f0 * (1.0 + glide * frac);
        phase += 2.0 * PI * f / FS;
        let am = 1.0 + 0.3 * (2.0 * PI * am_rate * n as f64 / FS).sin();
        let env = envelope(n, len, (0.02 * FS) as usize) * am * gain;
        let mut v = 0.0;
        for (h, ph) in phases.iter().enumerate() {
            let k = (h + 1) as f64;
            if k * f < 7600.0 {
                v += formant(k * f) / k.sqrt() * (k * phase + ph).sin();
            }
        }
        out[start + n] += env * v;
    }
}

fn add_unvoiced(out: &mut [f64], start: usize, len: usize, rng: &mut ChaCha8Rng) {
    let centre = rng.random_range(2500.0..6000.0);
    let bandwidth = rng.random_range(600.0..1500.0);
    let gain = rng.random_range(0.15..0.4);
    // Two-pole resonator.
    let r = (-PI * bandwidth / FS).exp();
    let a1 = 2.0 * r * (2.0 * PI * centre / FS).cos();
    let a2 = -r * r;
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let (mut y1, mut y2) = (0.0, 0.0);
    for n in 0..len.min(out.len().saturating_sub(start)) {
        let y = (1.0 - r) * normal.sample(rng) + a1 * y1 + a2 * y2;
        y2 = y1;
        y1 = y;
        out[start + n] += gain * envelope(n, len, (0.01 * FS) as usize) * y;
    }
}

/// Syllable-like clean proxy of `len` samples.
pub fn clean_proxy(seed: u64, len: usize) -> Signal {
    let mut rng = rng_for(seed, 1);
    let mut out = vec![0.0; len];
    let mut t = (rng.random_range(0.05..0.2) * FS) as usize;
    while t < len {
        if rng.random_bool(0.3) {
            let dur = (rng.random_range(0.06..0.15) * FS) as usize;
            add_unvoiced(&mut out, t, dur, &mut rng);
            t += dur;
        }
        let dur = (rng.random_range(0.12..0.3) * FS) as usize;
        add_voiced(&mut out, t, dur, &mut rng);
        t += dur;
        let pause = if rng.random_bool(0.2) {
            rng.random_range(0.2..0.35)
        } else {
            rng.random_range(0.03..0.15)
        };
        t += (pause * FS) as usize;
    }
    let peak = out.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if peak > 0.0 {
        out.iter_mut().for_each(|v| *v *= PROXY_PEAK / peak);
    }
    Signal::from_samples(out).expect("finite proxy")
}

fn unit_rms(mut v: Vec<f64>) -> Signal {
    let rms = (crate::signal::energy(&v) / v.len().max(1) as f64).sqrt();
    if rms > 0.0 {
        v.iter_mut().for_each(|x| *x /= rms);
    }
    Signal::from_samples(v).expect("finite noise")
}

/// Noise of the given kind with unit RMS.
pub fn noise(kind: NoiseKind, seed: u64, len: usize) -> Signal {
    let mut rng = rng_for(seed, 2);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    match kind {
        NoiseKind::White => unit_rms((0..len).map(|_| normal.sample(&mut rng)).collect()),
        NoiseKind::Pink => {
            // Weighted sum of one-pole lowpass states approximating 1/f.
            const POLES: [(f64, f64); 6] = [
                (0.99886, 0.0555179),
                (0.99332, 0.0750759),
                (0.96900, 0.1538520),
                (0.86650, 0.3104856),
                (0.55000, 0.5329522),
                (-0.7616, -0.0168980),
            ];
            let mut state = [0.0; 6];
            let v = (0..len)
                .map(|_| {
                    let w = normal.sample(&mut rng);
                    let mut acc = 0.5362 * w + 0.115926 * w;
                    for (s, (a, b)) in state.iter_mut().zip(POLES) {
                        *s = a * *s + b * w;
                        acc += *s;
                    }
                    acc
                })
                .collect();
            unit_rms(v)
        }
        NoiseKind::Babble => {
            let mut v = vec![0.0; len];
            for talker in 0..6u64 {
                let voice = clean_proxy(seed.wrapping_mul(31).wrapping_add(1000 + talker), len);
                let delay = rng.random_range(0..len.max(1));
                for (n, s) in voice.iter().enumerate() {
                    v[(n + delay) % len] += s;
                }
            }
            unit_rms(v)
        }
    }
}

/// One clean/noise pair of the reference suite.
#[derive(Debug, Clone)]
pub struct SuiteItem {
    pub seed: u64,
    pub kind: NoiseKind,
    pub clean: Signal,
    pub noise: Signal,
}

/// `count` deterministic pairs; durations vary between 2 and 4 seconds and
/// noise kinds cycle through [`NoiseKind::ALL`].
pub fn reference_suite(seed: u64, count: usize) -> Vec<SuiteItem> {
    (0..count as u64)
        .map(|i| {
            let item_seed = seed.wrapping_mul(1_000_003).wrapping_add(i);
            let mut rng = rng_for(item_seed, 0);
            let len = (rng.random_range(2.0..4.0) * FS) as usize;
            let kind = NoiseKind::ALL[(i % 3) as usize];
            SuiteItem {
                seed: item_seed,
                kind,
                clean: clean_proxy(item_seed, len),
                noise: noise(kind, item_seed, len),
            }
        })
        .collect()
}

/// One additive-noise degradation used to compare the quality objective
/// with an external reference scorer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RankCondition {
    pub clean_seed: u64,
    pub kind: NoiseKind,
    pub snr_db: f64,
}

/// Length of every rank-agreement condition (3 s).
pub const RANK_CONDITION_LEN: usize = 48000;

/// Two clean proxies x three noise kinds x eight SNRs: 48 conditions. The
/// SNR range covers the span where reference scores are not pinned to their
/// floor.
pub fn rank_conditions() -> Vec<RankCondition> {
    let mut out = Vec::new();
    for clean_seed in [101u64, 202] {
        for kind in NoiseKind::ALL {
            for snr_db in [0.0, 5.0, 10.0, 15.0, 20.0, 25.0, 30.0, 35.0] {
                out.push(RankCondition {
                    clean_seed,
                    kind,
                    snr_db,
                });
            }
        }
    }
    out
}

/// Clean and degraded signals of `condition`.
pub fn render_condition(condition: &RankCondition) -> Result<(Signal, Signal)> {
    let clean = clean_proxy(condition.clean_seed, RANK_CONDITION_LEN);
    let n = noise(
        condition.kind,
        condition.clean_seed.wrapping_add(7),
        RANK_CONDITION_LEN,
    );
    let mix = crate::signal::mix_at_snr(&clean, &n, condition.snr_db)?;
    Ok((clean, mix.noisy))
}

/// RMS of gradient-check inputs. Every objective is invariant to the scale
/// of the estimate, so its gradient scales with the inverse amplitude; a
/// low amplitude makes the fixed absolute finite-difference step a small
/// relative step and keeps rounding noise far below the check tolerance.
pub const GRADCHECK_RMS: f64 = 0.01;

/// Length of gradient-check inputs (0.5 s).
pub const GRADCHECK_LEN: usize = 8000;

/// A generic (clean, estimate) pair for gradient checks: the clean signal is
/// a sum of tones plus low-passed noise, the estimate adds an independent
/// white perturbation 10 dB below the clean signal.
pub fn gradcheck_pair(seed: u64) -> (Signal, Signal) {
    let mut rng = rng_for(seed, 3);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let tones: Vec<(f64, f64, f64)> = (0..4)
        .map(|_| {
            (
                rng.random_range(150.0..3000.0),
                rng.random_range(0.3..1.0),
                rng.random_range(0.0..2.0 * PI),
            )
        })
        .collect();
    let mut lp = 0.0;
    let clean: Vec<f64> = (0..GRADCHECK_LEN)
        .map(|n| {
            lp = 0.8 * lp + 0.2 * normal.sample(&mut rng);
            let t = n as f64 / FS;
            tones
                .iter()
                .map(|(f, a, ph)| a * (2.0 * PI * f * t + ph).sin())
                .sum::<f64>()
                + 0.5 * lp
        })
        .collect();
    let clean = unit_rms(clean).scaled(GRADCHECK_RMS);
    let perturbation = 10f64.powf(-10.0 / 20.0) * GRADCHECK_RMS;
    let x_hat: Vec<f64> = clean
        .iter()
        .map(|c| c + perturbation * normal.sample(&mut rng))
        .collect();
    (clean, Signal::from_samples(x_hat).expect("finite estimate"))
}
