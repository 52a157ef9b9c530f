//! Differentiable PESQ-style quality objective.
//!
//! Pipeline: level alignment → Bark spectrum → time-frequency equalization →
//! loudness → dead-zoned disturbance → frame disturbances → two-stage
//! pooling. The result is a score with ceiling 4.5 (higher is better). Only
//! the estimate carries a gradient; the clean side is prepared once in a
//! [`PesqReference`].
//!
//! Simplifications relative to the standardized measure: no delay
//! estimation, no receiving filter, no bad-interval iteration, no smoothing
//! of the per-frame gain, and no MOS mapping.

mod tables;

pub use tables::{PesqTables, BARK_BANDS, TABLES_ENV_VAR};

use crate::error::{ensure_finite, Error, Result};
use crate::grad::{BranchSignature, Gradient, Objective};
use crate::signal::Signal;
use crate::stft::{stft, stft_adjoint, Complex64, Spectrogram, HOP, WINDOW_LEN};
use crate::EPSILON;

/// Band powers of one frame, one entry per Bark band.
pub type BarkFrame = [f64; BARK_BANDS];

/// Target of level alignment: mean per-frame power summed over the
/// alignment band.
pub const TARGET_BAND_POWER: f64 = 1e7;
/// Alignment band, inclusive bin centre frequencies in Hz.
pub const ALIGN_BAND_HZ: (f64, f64) = (300.0, 3000.0);
/// Offset in the clean-side frequency compensation ratio.
pub const EQUALIZATION_OFFSET: f64 = 1000.0;
/// Clamp range of the clean-side frequency compensation factor.
pub const EQUALIZATION_RANGE: (f64, f64) = (0.01, 100.0);
/// Offset in the per-frame gain compensation ratio.
pub const FRAME_GAIN_OFFSET: f64 = 5e3;
/// Clamp range of the per-frame gain compensation.
pub const FRAME_GAIN_RANGE: (f64, f64) = (3e-4, 5.0);
/// Dead-zone fraction of the smaller loudness.
pub const DEAD_ZONE: f64 = 0.25;
/// Offset, exponent and thresholds of the asymmetry factor.
pub const ASYMMETRY_OFFSET: f64 = 50.0;
pub const ASYMMETRY_EXPONENT: f64 = 1.2;
pub const ASYMMETRY_CAP: f64 = 12.0;
pub const ASYMMETRY_FLOOR: f64 = 3.0;
/// Pooling window length and hop, in frames.
pub const POOL_WINDOW: usize = 20;
pub const POOL_HOP: usize = 10;
/// Score ceiling and disturbance weights.
pub const SCORE_CEILING: f64 = 4.5;
pub const SYMMETRIC_WEIGHT: f64 = 0.1;
pub const ASYMMETRIC_WEIGHT: f64 = 0.0309;

/// Shortest input (in samples) that yields [`POOL_WINDOW`] frames.
pub const MIN_SAMPLES: usize = (POOL_WINDOW - 2) * HOP + 1;

/// Intermediate and final quantities of one evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct PesqBreakdown {
    pub d_sym: f64,
    pub d_asym: f64,
    pub fd_per_frame: Vec<f64>,
    pub afd_per_frame: Vec<f64>,
    pub value: f64,
}

/// Pooled disturbances over a batch of utterances.
#[derive(Debug, Clone, PartialEq)]
pub struct PesqBatchScore {
    pub d_sym: f64,
    pub d_asym: f64,
    pub value: f64,
    pub utterances: usize,
}

fn score(d_sym: f64, d_asym: f64) -> f64 {
    SCORE_CEILING - SYMMETRIC_WEIGHT * d_sym - ASYMMETRIC_WEIGHT * d_asym
}

fn align_bins(spec: &Spectrogram) -> std::ops::RangeInclusive<usize> {
    let hz = spec.bin_hz(1);
    let lo = (ALIGN_BAND_HZ.0 / hz).ceil() as usize;
    let hi = ((ALIGN_BAND_HZ.1 / hz).floor() as usize).min(spec.bins() - 1);
    lo..=hi
}

/// Mean over frames of the power summed over the alignment band.
pub fn level_band_power(spec: &Spectrogram) -> f64 {
    let bins = align_bins(spec);
    let total: f64 = (0..spec.frames())
        .map(|m| spec.frame(m)[bins.clone()].iter().map(|c| c.norm_sqr()).sum::<f64>())
        .sum();
    total / spec.frames() as f64
}

fn gain_squared(band_power: f64) -> Result<f64> {
    if band_power <= 0.0 {
        return Err(Error::ZeroEnergy {
            what: "300 Hz-3 kHz band",
        });
    }
    Ok(TARGET_BAND_POWER / (band_power + EPSILON))
}

/// Linear gain that brings `signal` to the target alignment-band power.
pub fn level_align_gain(signal: &[f64]) -> Result<f64> {
    let spec = stft(signal, WINDOW_LEN, HOP)?;
    Ok(gain_squared(level_band_power(&spec))?.sqrt())
}

/// Scales `signal` by one global gain so that its alignment-band power is
/// [`TARGET_BAND_POWER`].
pub fn level_align(signal: &Signal) -> Result<Signal> {
    let gain = level_align_gain(signal)?;
    Ok(signal.scaled(gain))
}

fn check_bins(spec: &Spectrogram, tables: &PesqTables) -> Result<()> {
    if spec.bins() < tables.bins_required() {
        return Err(Error::Shape(format!(
            "spectrum has {} bins, tables need {}",
            spec.bins(),
            tables.bins_required()
        )));
    }
    Ok(())
}

/// Per frame, the mean of `|X|^2` over the bins of each Bark band.
pub fn bark_spectrum(spec: &Spectrogram, tables: &PesqTables) -> Result<Vec<BarkFrame>> {
    check_bins(spec, tables)?;
    Ok(bark_from_power(spec, tables, 1.0))
}

fn bark_from_power(spec: &Spectrogram, tables: &PesqTables, scale: f64) -> Vec<BarkFrame> {
    (0..spec.frames())
        .map(|m| {
            let frame = spec.frame(m);
            let mut out = [0.0; BARK_BANDS];
            for (i, slot) in out.iter_mut().enumerate() {
                let band = tables.band(i);
                let width = band.len() as f64;
                *slot = scale * frame[band].iter().map(|c| c.norm_sqr()).sum::<f64>() / width;
            }
            out
        })
        .collect()
}

/// Per band, the frame average of the powers that exceed `thresholds`.
fn masked_mean(frames: &[BarkFrame], thresholds: &[f64]) -> BarkFrame {
    let mut out = [0.0; BARK_BANDS];
    for frame in frames {
        for i in 0..BARK_BANDS {
            if frame[i] > thresholds[i] {
                out[i] += frame[i];
            }
        }
    }
    let m = frames.len().max(1) as f64;
    out.iter_mut().for_each(|v| *v /= m);
    out
}

/// Sum of the band powers above the hearing threshold. The lowest band is
/// excluded, as it carries only the DC bin.
fn audible_power(frame: &BarkFrame, tables: &PesqTables) -> f64 {
    (1..BARK_BANDS)
        .filter(|&i| frame[i] > tables.hearing_threshold[i])
        .map(|i| frame[i])
        .sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Clip {
    Low,
    Pass,
    High,
}

impl Clip {
    fn tag(self) -> u64 {
        self as u64
    }
}

fn clip(raw: f64, (lo, hi): (f64, f64)) -> (f64, Clip) {
    if raw < lo {
        (lo, Clip::Low)
    } else if raw > hi {
        (hi, Clip::High)
    } else {
        (raw, Clip::Pass)
    }
}

struct Equalized {
    p_clean: BarkFrame,
    p_noisy: BarkFrame,
    /// Clamp state of the per-band frequency compensation factor.
    factor_clip: [Clip; BARK_BANDS],
    e_clean: Vec<BarkFrame>,
    e_noisy: Vec<BarkFrame>,
    /// Unclamped gain ratio, its clamp state and its denominator per frame.
    gain_raw: Vec<f64>,
    gain_clip: Vec<Clip>,
    gain_den: Vec<f64>,
}

fn equalize(
    clean: &[BarkFrame],
    p_clean: &BarkFrame,
    noisy: &[BarkFrame],
    tables: &PesqTables,
) -> Equalized {
    let p_noisy = masked_mean(noisy, &tables.silence_threshold_noisy);
    let mut factor = [0.0; BARK_BANDS];
    let mut factor_clip = [Clip::Pass; BARK_BANDS];
    for i in 0..BARK_BANDS {
        let raw = (p_noisy[i] + EQUALIZATION_OFFSET) / (p_clean[i] + EQUALIZATION_OFFSET);
        (factor[i], factor_clip[i]) = clip(raw, EQUALIZATION_RANGE);
    }
    let e_clean: Vec<BarkFrame> = clean
        .iter()
        .map(|frame| std::array::from_fn(|i| factor[i] * frame[i]))
        .collect();
    let mut gain_raw = Vec::with_capacity(noisy.len());
    let mut gain_clip = Vec::with_capacity(noisy.len());
    let mut gain_den = Vec::with_capacity(noisy.len());
    let mut e_noisy = Vec::with_capacity(noisy.len());
    for (ec, bn) in e_clean.iter().zip(noisy) {
        let den = audible_power(bn, tables) + FRAME_GAIN_OFFSET;
        let raw = (audible_power(ec, tables) + FRAME_GAIN_OFFSET) / den;
        let (gain, state) = clip(raw, FRAME_GAIN_RANGE);
        gain_raw.push(raw);
        gain_clip.push(state);
        gain_den.push(den);
        e_noisy.push(std::array::from_fn(|i| gain * bn[i]));
    }
    Equalized {
        p_clean: *p_clean,
        p_noisy,
        factor_clip,
        e_clean,
        e_noisy,
        gain_raw,
        gain_clip,
        gain_den,
    }
}

fn check_frames(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::Shape(format!("{a} clean frames vs {b} estimate frames")));
    }
    Ok(())
}

/// Compensates the clean Bark spectrum per band by the ratio of
/// silence-masked band averages (clamped to [`EQUALIZATION_RANGE`]), and the estimate per frame by the ratio of
/// audible powers (clamped to [`FRAME_GAIN_RANGE`]).
pub fn tf_equalize(
    clean: &[BarkFrame],
    noisy: &[BarkFrame],
    tables: &PesqTables,
) -> Result<(Vec<BarkFrame>, Vec<BarkFrame>)> {
    check_frames(clean.len(), noisy.len())?;
    let p_clean = masked_mean(clean, &tables.silence_threshold_clean);
    let eq = equalize(clean, &p_clean, noisy, tables);
    Ok((eq.e_clean, eq.e_noisy))
}

fn loudness_scalar(e: f64, i: usize, tables: &PesqTables) -> f64 {
    let p0 = tables.hearing_threshold[i];
    if e > p0 {
        let g = tables.zwicker_power;
        tables.loudness_scale[i] * (p0 / 0.5).powf(g) * ((0.5 + 0.5 * e / p0).powf(g) - 1.0)
    } else {
        0.0
    }
}

fn loudness_slope(e: f64, i: usize, tables: &PesqTables) -> f64 {
    let p0 = tables.hearing_threshold[i];
    if e > p0 {
        let g = tables.zwicker_power;
        tables.loudness_scale[i]
            * (p0 / 0.5).powf(g)
            * g
            * (0.5 + 0.5 * e / p0).powf(g - 1.0)
            * (0.5 / p0)
    } else {
        0.0
    }
}

/// Loudness densities; zero at or below the hearing threshold.
pub fn loudness(frames: &[BarkFrame], tables: &PesqTables) -> Vec<BarkFrame> {
    frames
        .iter()
        .map(|f| std::array::from_fn(|i| loudness_scalar(f[i], i, tables)))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Zone {
    Inside,
    Above,
    Below,
}

/// Dead-zoned loudness difference, its case, and whether the clean
/// loudness was the selected minimum (ties go to the clean side).
fn disturbance_scalar(lc: f64, ln: f64) -> (f64, Zone, bool) {
    let clean_min = lc <= ln;
    let dz = DEAD_ZONE * if clean_min { lc } else { ln };
    let diff = lc - ln;
    if diff - dz > 0.0 {
        (diff - dz, Zone::Above, clean_min)
    } else if diff + dz < 0.0 {
        (diff + dz, Zone::Below, clean_min)
    } else {
        (0.0, Zone::Inside, clean_min)
    }
}

/// `max(Lc - Ln - DZ, 0) + min(Lc - Ln + DZ, 0)` with `DZ = 0.25 min(Lc, Ln)`.
pub fn disturbance(clean: &[BarkFrame], noisy: &[BarkFrame]) -> Result<Vec<BarkFrame>> {
    check_frames(clean.len(), noisy.len())?;
    Ok(clean
        .iter()
        .zip(noisy)
        .map(|(c, n)| std::array::from_fn(|i| disturbance_scalar(c[i], n[i]).0))
        .collect())
}

/// Asymmetry factor, its unclamped value and clamp state.
fn asymmetry(bc: f64, bn: f64) -> (f64, f64, Clip) {
    let raw = ((bn + ASYMMETRY_OFFSET) / (bc + ASYMMETRY_OFFSET)).powf(ASYMMETRY_EXPONENT);
    if raw > ASYMMETRY_CAP {
        (ASYMMETRY_CAP, raw, Clip::High)
    } else if raw < ASYMMETRY_FLOOR {
        (0.0, raw, Clip::Low)
    } else {
        (raw, raw, Clip::Pass)
    }
}

/// Squared symmetric and asymmetric frame disturbances.
fn frame_squares(
    d: &[BarkFrame],
    clean: &[BarkFrame],
    noisy: &[BarkFrame],
    tables: &PesqTables,
) -> (Vec<f64>, Vec<f64>) {
    let weight_sum: f64 = tables.band_weights.iter().sum();
    d.iter()
        .zip(clean.iter().zip(noisy))
        .map(|(dm, (bc, bn))| {
            let mut q = 0.0;
            let mut r = 0.0;
            for i in 0..BARK_BANDS {
                let wd = tables.band_weights[i] * dm[i];
                let h = asymmetry(bc[i], bn[i]).0;
                q += wd * wd;
                r += (wd * h) * (wd * h);
            }
            (q / weight_sum, r / weight_sum)
        })
        .unzip()
}

/// Symmetric (`FD`) and asymmetric (`AFD`) disturbance per frame. The
/// asymmetry factor uses the aligned, uncompensated Bark spectra.
pub fn frame_disturbances(
    d: &[BarkFrame],
    clean: &[BarkFrame],
    noisy: &[BarkFrame],
    tables: &PesqTables,
) -> Result<(Vec<f64>, Vec<f64>)> {
    check_frames(d.len(), clean.len())?;
    check_frames(clean.len(), noisy.len())?;
    let (q, r) = frame_squares(d, clean, noisy, tables);
    Ok((
        q.into_iter().map(f64::sqrt).collect(),
        r.into_iter().map(f64::sqrt).collect(),
    ))
}

fn windows(frames: usize) -> impl Iterator<Item = std::ops::Range<usize>> {
    let count = if frames >= POOL_WINDOW {
        (frames - POOL_WINDOW) / POOL_HOP + 1
    } else {
        0
    };
    (0..count).map(|s| s * POOL_HOP..s * POOL_HOP + POOL_WINDOW)
}

/// Two-stage pooling from squared frame disturbances: an L6 norm over each
/// complete window, then an L2 norm over windows.
fn pool_squares(q: &[f64]) -> f64 {
    let mut total = 0.0;
    let mut count = 0usize;
    for w in windows(q.len()) {
        let a = q[w].iter().map(|v| v * v * v).sum::<f64>() / POOL_WINDOW as f64;
        total += a.cbrt();
        count += 1;
    }
    (total / count as f64).sqrt()
}

/// Adjoint of [`pool_squares`] with respect to each squared disturbance.
fn pool_squares_grad(q: &[f64], d: f64) -> Vec<f64> {
    let mut grad = vec![0.0; q.len()];
    if d <= 0.0 {
        return grad;
    }
    let count = windows(q.len()).count() as f64;
    for w in windows(q.len()) {
        let a = q[w.clone()].iter().map(|v| v * v * v).sum::<f64>() / POOL_WINDOW as f64;
        if a <= 0.0 {
            continue;
        }
        // d = sqrt(mean_s a_s^(1/3)), a_s = mean_i q_i^3.
        let coef = 1.0 / (2.0 * d * count) / (3.0 * a.cbrt() * a.cbrt()) * 3.0
            / POOL_WINDOW as f64;
        for m in w {
            grad[m] += coef * q[m] * q[m];
        }
    }
    grad
}

fn check_pool_frames(frames: usize) -> Result<()> {
    if frames < POOL_WINDOW {
        return Err(Error::TooShort {
            len: frames,
            required: POOL_WINDOW,
        });
    }
    Ok(())
}

/// Pools per-frame disturbances into the final score. Needs at least
/// [`POOL_WINDOW`] frames; windows that would run past the last frame are
/// dropped.
pub fn aggregate(fd: &[f64], afd: &[f64]) -> Result<PesqBreakdown> {
    check_frames(fd.len(), afd.len())?;
    check_pool_frames(fd.len())?;
    ensure_finite("frame disturbance", fd)?;
    ensure_finite("frame disturbance", afd)?;
    let q: Vec<f64> = fd.iter().map(|v| v * v).collect();
    let r: Vec<f64> = afd.iter().map(|v| v * v).collect();
    let d_sym = pool_squares(&q);
    let d_asym = pool_squares(&r);
    Ok(PesqBreakdown {
        d_sym,
        d_asym,
        fd_per_frame: fd.to_vec(),
        afd_per_frame: afd.to_vec(),
        value: score(d_sym, d_asym),
    })
}

/// Clean-side quantities that do not depend on the estimate.
#[derive(Debug, Clone)]
pub struct PesqReference {
    clean: Vec<f64>,
    tables: PesqTables,
    bark: Vec<BarkFrame>,
    p_clean: BarkFrame,
}

/// Every forward intermediate needed by the adjoint.
struct Trace {
    spec: Spectrogram,
    band_power: f64,
    g2: f64,
    bn: Vec<BarkFrame>,
    eq: Equalized,
    lc: Vec<BarkFrame>,
    ln: Vec<BarkFrame>,
    d: Vec<BarkFrame>,
    q: Vec<f64>,
    r: Vec<f64>,
    d_sym: f64,
    d_asym: f64,
}

impl PesqReference {
    /// Prepares `clean` with the standard tables.
    pub fn new(clean: &[f64]) -> Result<Self> {
        Self::with_tables(clean, PesqTables::standard().clone())
    }

    pub fn with_tables(clean: &[f64], tables: PesqTables) -> Result<Self> {
        ensure_finite("clean", clean)?;
        if clean.len() < MIN_SAMPLES {
            return Err(Error::TooShort {
                len: clean.len(),
                required: MIN_SAMPLES,
            });
        }
        let spec = stft(clean, WINDOW_LEN, HOP)?;
        check_bins(&spec, &tables)?;
        let g2 = gain_squared(level_band_power(&spec))?;
        let bark = bark_from_power(&spec, &tables, g2);
        let p_clean = masked_mean(&bark, &tables.silence_threshold_clean);
        Ok(PesqReference {
            clean: clean.to_vec(),
            tables,
            bark,
            p_clean,
        })
    }

    pub fn clean(&self) -> &[f64] {
        &self.clean
    }

    pub fn tables(&self) -> &PesqTables {
        &self.tables
    }

    fn forward(&self, x_hat: &[f64]) -> Result<Trace> {
        if x_hat.len() != self.clean.len() {
            return Err(Error::LengthMismatch {
                left: self.clean.len(),
                right: x_hat.len(),
            });
        }
        ensure_finite("estimate", x_hat)?;
        let t = &self.tables;
        let spec = stft(x_hat, WINDOW_LEN, HOP)?;
        let band_power = level_band_power(&spec);
        let g2 = gain_squared(band_power)?;
        let bn = bark_from_power(&spec, t, g2);
        let eq = equalize(&self.bark, &self.p_clean, &bn, t);
        let lc = loudness(&eq.e_clean, t);
        let ln = loudness(&eq.e_noisy, t);
        let d = disturbance(&lc, &ln)?;
        let (q, r) = frame_squares(&d, &self.bark, &bn, t);
        let d_sym = pool_squares(&q);
        let d_asym = pool_squares(&r);
        Ok(Trace {
            spec,
            band_power,
            g2,
            bn,
            eq,
            lc,
            ln,
            d,
            q,
            r,
            d_sym,
            d_asym,
        })
    }

    /// Full breakdown for `x_hat`.
    pub fn evaluate(&self, x_hat: &[f64]) -> Result<PesqBreakdown> {
        let tr = self.forward(x_hat)?;
        let value = score(tr.d_sym, tr.d_asym);
        if !value.is_finite() {
            return Err(Error::NonFinite { stage: "pesq" });
        }
        Ok(PesqBreakdown {
            d_sym: tr.d_sym,
            d_asym: tr.d_asym,
            fd_per_frame: tr.q.iter().map(|v| v.sqrt()).collect(),
            afd_per_frame: tr.r.iter().map(|v| v.sqrt()).collect(),
            value,
        })
    }

    /// Score and its gradient with respect to `x_hat`.
    pub fn value_and_gradient(&self, x_hat: &[f64]) -> Result<(PesqBreakdown, Vec<f64>)> {
        let tr = self.forward(x_hat)?;
        let grad = self.backward(&tr, -SYMMETRIC_WEIGHT, -ASYMMETRIC_WEIGHT, x_hat.len());
        let value = score(tr.d_sym, tr.d_asym);
        let breakdown = PesqBreakdown {
            d_sym: tr.d_sym,
            d_asym: tr.d_asym,
            fd_per_frame: tr.q.iter().map(|v| v.sqrt()).collect(),
            afd_per_frame: tr.r.iter().map(|v| v.sqrt()).collect(),
            value,
        };
        Ok((breakdown, grad))
    }

    /// Reverse pass given the adjoints of `d_sym` and `d_asym`.
    fn backward(&self, tr: &Trace, g_sym: f64, g_asym: f64, len: usize) -> Vec<f64> {
        let t = &self.tables;
        let frames = tr.bn.len();
        let weight_sum: f64 = t.band_weights.iter().sum();
        let g_q: Vec<f64> = pool_squares_grad(&tr.q, tr.d_sym)
            .into_iter()
            .map(|v| v * g_sym)
            .collect();
        let g_r: Vec<f64> = pool_squares_grad(&tr.r, tr.d_asym)
            .into_iter()
            .map(|v| v * g_asym)
            .collect();

        // Adjoints accumulated on the aligned estimate Bark spectrum and the
        // equalized clean spectrum.
        let mut g_bn = vec![[0.0; BARK_BANDS]; frames];
        let mut g_ec = vec![[0.0; BARK_BANDS]; frames];
        let mut g_gain = vec![0.0; frames];
        for m in 0..frames {
            let gain = match tr.eq.gain_clip[m] {
                Clip::Low => FRAME_GAIN_RANGE.0,
                Clip::High => FRAME_GAIN_RANGE.1,
                Clip::Pass => tr.eq.gain_raw[m],
            };
            for i in 0..BARK_BANDS {
                let w2 = t.band_weights[i] * t.band_weights[i] / weight_sum;
                let dmi = tr.d[m][i];
                let (h, raw, clip) = asymmetry(self.bark[m][i], tr.bn[m][i]);
                let g_d = g_q[m] * 2.0 * w2 * dmi + g_r[m] * 2.0 * w2 * dmi * h * h;
                if clip == Clip::Pass {
                    let g_h = g_r[m] * 2.0 * w2 * dmi * dmi * h;
                    g_bn[m][i] += g_h * ASYMMETRY_EXPONENT * raw
                        / (tr.bn[m][i] + ASYMMETRY_OFFSET);
                }
                let (_, zone, clean_min) = disturbance_scalar(tr.lc[m][i], tr.ln[m][i]);
                let (d_lc, d_ln) = match zone {
                    Zone::Inside => (0.0, 0.0),
                    Zone::Above => {
                        if clean_min {
                            (1.0 - DEAD_ZONE, -1.0)
                        } else {
                            (1.0, -1.0 - DEAD_ZONE)
                        }
                    }
                    Zone::Below => {
                        if clean_min {
                            (1.0 + DEAD_ZONE, -1.0)
                        } else {
                            (1.0, -1.0 + DEAD_ZONE)
                        }
                    }
                };
                let g_ec_mi = g_d * d_lc * loudness_slope(tr.eq.e_clean[m][i], i, t);
                let g_en_mi = g_d * d_ln * loudness_slope(tr.eq.e_noisy[m][i], i, t);
                g_ec[m][i] += g_ec_mi;
                g_bn[m][i] += g_en_mi * gain;
                g_gain[m] += g_en_mi * tr.bn[m][i];
            }
            if tr.eq.gain_clip[m] == Clip::Pass {
                let den = tr.eq.gain_den[m];
                for i in 1..BARK_BANDS {
                    if tr.eq.e_clean[m][i] > t.hearing_threshold[i] {
                        g_ec[m][i] += g_gain[m] / den;
                    }
                    if tr.bn[m][i] > t.hearing_threshold[i] {
                        g_bn[m][i] -= g_gain[m] * tr.eq.gain_raw[m] / den;
                    }
                }
            }
        }

        // Clean-side frequency compensation depends on the estimate through
        // its masked band averages.
        for i in 0..BARK_BANDS {
            if tr.eq.factor_clip[i] != Clip::Pass {
                continue;
            }
            let g_factor: f64 = (0..frames).map(|m| g_ec[m][i] * self.bark[m][i]).sum();
            let g_p = g_factor / (tr.eq.p_clean[i] + EQUALIZATION_OFFSET) / frames as f64;
            for m in 0..frames {
                if tr.bn[m][i] > t.silence_threshold_noisy[i] {
                    g_bn[m][i] += g_p;
                }
            }
        }
        debug_assert!(tr.eq.p_noisy.iter().all(|v| v.is_finite()));

        // Bark bands and the level-alignment gain back to spectrum powers.
        let mut g_g2 = 0.0;
        let mut g_power = vec![0.0; tr.spec.values().len()];
        let bins = tr.spec.bins();
        for m in 0..frames {
            for i in 0..BARK_BANDS {
                g_g2 += g_bn[m][i] * tr.bn[m][i] / tr.g2;
                let band = t.band(i);
                let per_bin = g_bn[m][i] * tr.g2 / band.len() as f64;
                for k in band {
                    g_power[m * bins + k] += per_bin;
                }
            }
        }
        let g_band_power = -g_g2 * tr.g2 / (tr.band_power + EPSILON) / frames as f64;
        for m in 0..frames {
            for k in align_bins(&tr.spec) {
                g_power[m * bins + k] += g_band_power;
            }
        }

        let mut g_spec = Spectrogram::zeros(frames, tr.spec.window_len(), tr.spec.hop());
        for ((g, x), p) in g_spec
            .values_mut()
            .iter_mut()
            .zip(tr.spec.values())
            .zip(&g_power)
        {
            *g = Complex64::new(2.0 * x.re * p, 2.0 * x.im * p);
        }
        stft_adjoint(&g_spec, len)
    }

    pub(crate) fn signature(&self, x_hat: &[f64], sig: &mut BranchSignature) -> Result<()> {
        let tr = self.forward(x_hat)?;
        let t = &self.tables;
        for state in tr.eq.factor_clip {
            sig.push(state.tag());
        }
        for m in 0..tr.bn.len() {
            sig.push(tr.eq.gain_clip[m].tag());
            for i in 0..BARK_BANDS {
                let bn = tr.bn[m][i];
                let ec = tr.eq.e_clean[m][i];
                let en = tr.eq.e_noisy[m][i];
                sig.push_bool(bn > t.silence_threshold_noisy[i]);
                sig.push_bool(bn > t.hearing_threshold[i]);
                sig.push_bool(ec > t.hearing_threshold[i]);
                sig.push_bool(en > t.hearing_threshold[i]);
                let (_, zone, clean_min) = disturbance_scalar(tr.lc[m][i], tr.ln[m][i]);
                sig.push(zone as u64);
                sig.push_bool(clean_min);
                sig.push(asymmetry(self.bark[m][i], bn).2.tag());
            }
        }
        Ok(())
    }
}

impl Objective for PesqReference {
    fn name(&self) -> String {
        "pesq".into()
    }

    fn value(&self, x_hat: &[f64]) -> Result<f64> {
        Ok(self.evaluate(x_hat)?.value)
    }

    fn value_and_gradient(&self, x_hat: &[f64]) -> Result<Gradient> {
        let (b, d_input) = PesqReference::value_and_gradient(self, x_hat)?;
        Ok(Gradient {
            value: b.value,
            d_input,
        })
    }

    fn branch_signature(&self, x_hat: &[f64]) -> Result<u64> {
        let mut sig = BranchSignature::new();
        self.signature(x_hat, &mut sig)?;
        Ok(sig.finish())
    }
}

/// Scores `x_hat` against `clean` with the standard tables.
pub fn loss_pesq(clean: &[f64], x_hat: &[f64]) -> Result<PesqBreakdown> {
    PesqReference::new(clean)?.evaluate(x_hat)
}

/// Averages `d_sym` and `d_asym` over utterances, then applies the score map.
pub fn loss_pesq_batch(batch: &[(&[f64], &[f64])]) -> Result<PesqBatchScore> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let mut d_sym = 0.0;
    let mut d_asym = 0.0;
    for (clean, x_hat) in batch {
        let b = loss_pesq(clean, x_hat)?;
        d_sym += b.d_sym;
        d_asym += b.d_asym;
    }
    let n = batch.len() as f64;
    Ok(PesqBatchScore {
        d_sym: d_sym / n,
        d_asym: d_asym / n,
        value: score(d_sym / n, d_asym / n),
        utterances: batch.len(),
    })
}
