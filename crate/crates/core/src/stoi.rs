//! Differentiable STOI-style intelligibility objective.
//!
//! One-third-octave band envelopes of clean and estimate are compared over
//! sliding 24-frame segments: the estimate segment is normalized to the
//! clean segment's norm, clipped to a fixed ratio above the clean envelope,
//! and correlated with it. The objective is the mean correlation (ceiling 1).
//! No voice-activity frame removal is performed.

use crate::error::{ensure_finite, Error, Result};
use crate::grad::{BranchSignature, Gradient, Objective};
use crate::stft::{stft, stft_adjoint, Complex64, Spectrogram, HOP, WINDOW_LEN};
use crate::EPSILON;

/// Number of one-third-octave bands.
pub const BAND_COUNT: usize = 15;
/// Centre frequency of the lowest band, Hz.
pub const LOWEST_CENTRE_HZ: f64 = 150.0;
/// Frames per correlation segment (384 ms at a 16 ms hop).
pub const SEGMENT_FRAMES: usize = 24;
/// Lower signal-to-distortion bound of the clipping step, dB.
pub const CLIP_DB: f64 = 15.0;
/// Shortest input (in samples) that yields one full segment.
pub const MIN_SAMPLES: usize = (SEGMENT_FRAMES - 2) * HOP + 1;

fn clip_ratio() -> f64 {
    1.0 + 10f64.powf(-CLIP_DB / 20.0)
}

/// Mapping from linear-frequency bins to one-third-octave bands.
#[derive(Debug, Clone, PartialEq)]
pub struct OctaveBands {
    centres: Vec<f64>,
    ranges: Vec<std::ops::Range<usize>>,
}

impl OctaveBands {
    /// `count` bands with centres `lowest * 2^(j/3)`. Each band edge
    /// `centre * 2^(-+1/6)` maps to the nearest bin of a `window_len`-point
    /// spectrum at `sample_rate`; band `j` covers bins `[lo, hi)`. Bands that
    /// would be empty or reach the Nyquist bin are dropped.
    pub fn new(count: usize, lowest: f64, sample_rate: f64, window_len: usize) -> Result<Self> {
        if count == 0 || !(lowest > 0.0) || window_len < 4 {
            return Err(Error::InvalidArgument("degenerate band layout".into()));
        }
        let bins = window_len / 2 + 1;
        let bin_hz = sample_rate / window_len as f64;
        let nearest = |f: f64| -> usize { ((f / bin_hz).round() as usize).min(bins - 1) };
        let mut centres = Vec::new();
        let mut ranges = Vec::new();
        for j in 0..count {
            let centre = lowest * 2f64.powf(j as f64 / 3.0);
            let lo = nearest(centre * 2f64.powf(-1.0 / 6.0));
            let hi = nearest(centre * 2f64.powf(1.0 / 6.0));
            if hi <= lo || hi >= bins - 1 {
                log::info!("dropping one-third-octave band at {centre:.1} Hz: no bins below Nyquist");
                continue;
            }
            centres.push(centre);
            ranges.push(lo..hi);
        }
        if ranges.is_empty() {
            return Err(Error::InvalidArgument("no usable one-third-octave bands".into()));
        }
        Ok(OctaveBands { centres, ranges })
    }

    /// The 15-band layout on the shared 512-point, 16 kHz grid.
    pub fn standard() -> Self {
        OctaveBands::new(BAND_COUNT, LOWEST_CENTRE_HZ, 16000.0, WINDOW_LEN)
            .expect("standard layout is valid")
    }

    pub fn len(&self) -> usize {
        self.ranges.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ranges.is_empty()
    }

    pub fn centres(&self) -> &[f64] {
        &self.centres
    }

    pub fn bins(&self, band: usize) -> std::ops::Range<usize> {
        self.ranges[band].clone()
    }
}

/// Band envelopes `sqrt(sum |X|^2)`, one row per frame.
pub fn octave_decompose(spec: &Spectrogram, bands: &OctaveBands) -> Result<Vec<Vec<f64>>> {
    if bands.ranges.last().map_or(0, |r| r.end) > spec.bins() {
        return Err(Error::Shape(format!(
            "band layout exceeds the {} bins of the spectrum",
            spec.bins()
        )));
    }
    Ok((0..spec.frames())
        .map(|m| {
            let frame = spec.frame(m);
            bands
                .ranges
                .iter()
                .map(|r| frame[r.clone()].iter().map(|c| c.norm_sqr()).sum::<f64>().sqrt())
                .collect()
        })
        .collect())
}

/// Forward state of one segment, kept for the adjoint.
struct Segment {
    d: f64,
    /// Normalization gain and estimate norm.
    alpha: f64,
    norm_y: f64,
    /// Per frame: whether the normalized estimate passed the clip.
    passed: [bool; SEGMENT_FRAMES],
    /// Normalized, clipped, mean-removed estimate.
    y_centered: [f64; SEGMENT_FRAMES],
    norm_yc: f64,
    degenerate: bool,
    saturated: bool,
}

/// Clean-segment quantities independent of the estimate.
#[derive(Debug, Clone)]
struct CleanSegment {
    x: [f64; SEGMENT_FRAMES],
    x_centered: [f64; SEGMENT_FRAMES],
    norm_x: f64,
    norm_xc: f64,
}

impl CleanSegment {
    fn new(x: [f64; SEGMENT_FRAMES]) -> Self {
        let mean = x.iter().sum::<f64>() / SEGMENT_FRAMES as f64;
        let x_centered = x.map(|v| v - mean);
        CleanSegment {
            x,
            x_centered,
            norm_x: x.iter().map(|v| v * v).sum::<f64>().sqrt(),
            norm_xc: x_centered.iter().map(|v| v * v).sum::<f64>().sqrt(),
        }
    }

    fn correlate(&self, y: &[f64; SEGMENT_FRAMES]) -> Segment {
        let norm_y = y.iter().map(|v| v * v).sum::<f64>().sqrt();
        let alpha = self.norm_x / (norm_y + EPSILON);
        let bound = clip_ratio();
        let mut passed = [true; SEGMENT_FRAMES];
        let mut clipped = [0.0; SEGMENT_FRAMES];
        for n in 0..SEGMENT_FRAMES {
            let scaled = alpha * y[n];
            let cap = bound * self.x[n];
            // Ties go to the normalized estimate.
            if scaled <= cap {
                clipped[n] = scaled;
            } else {
                clipped[n] = cap;
                passed[n] = false;
            }
        }
        let mean = clipped.iter().sum::<f64>() / SEGMENT_FRAMES as f64;
        let y_centered = clipped.map(|v| v - mean);
        let norm_yc = y_centered.iter().map(|v| v * v).sum::<f64>().sqrt();
        let num: f64 = self
            .x_centered
            .iter()
            .zip(&y_centered)
            .map(|(a, b)| a * b)
            .sum();
        let den = self.norm_xc * norm_yc;
        let degenerate = den <= 0.0;
        let raw = if degenerate { 0.0 } else { num / den };
        let saturated = raw.abs() > 1.0;
        Segment {
            d: raw.clamp(-1.0, 1.0),
            alpha,
            norm_y,
            passed,
            y_centered,
            norm_yc,
            degenerate,
            saturated,
        }
    }

    /// Adds `g * dd/dy` into `out`.
    fn backward(&self, y: &[f64; SEGMENT_FRAMES], s: &Segment, g: f64, out: &mut [f64]) {
        if s.degenerate || s.saturated || g == 0.0 {
            return;
        }
        let den = self.norm_xc * s.norm_yc;
        // d = <xc, yc> / (|xc| |yc|); centring is an orthogonal projection and
        // both gradients below are already zero-mean.
        let mut g_clipped = [0.0; SEGMENT_FRAMES];
        for n in 0..SEGMENT_FRAMES {
            g_clipped[n] =
                g * (self.x_centered[n] / den - s.d * s.y_centered[n] / (s.norm_yc * s.norm_yc));
        }
        let mean = g_clipped.iter().sum::<f64>() / SEGMENT_FRAMES as f64;
        let mut g_scaled = [0.0; SEGMENT_FRAMES];
        for n in 0..SEGMENT_FRAMES {
            if s.passed[n] {
                g_scaled[n] = g_clipped[n] - mean;
            }
        }
        // scaled = alpha(y) * y with alpha = |x| / (|y| + eps).
        let g_alpha: f64 = g_scaled.iter().zip(y).map(|(a, b)| a * b).sum();
        let d_alpha_d_norm = -self.norm_x / ((s.norm_y + EPSILON) * (s.norm_y + EPSILON));
        for n in 0..SEGMENT_FRAMES {
            let via_norm = if s.norm_y > 0.0 {
                g_alpha * d_alpha_d_norm * y[n] / s.norm_y
            } else {
                0.0
            };
            out[n] += s.alpha * g_scaled[n] + via_norm;
        }
    }
}

fn segment_of(env: &[Vec<f64>], m: usize, j: usize) -> [f64; SEGMENT_FRAMES] {
    std::array::from_fn(|n| env[m + 1 + n - SEGMENT_FRAMES][j])
}

/// Correlation of one segment ending at frame `m` in band `j`.
pub fn stoi_segment(
    clean_env: &[Vec<f64>],
    noisy_env: &[Vec<f64>],
    m: usize,
    j: usize,
) -> Result<f64> {
    if clean_env.len() != noisy_env.len() {
        return Err(Error::Shape(format!(
            "{} clean frames vs {} estimate frames",
            clean_env.len(),
            noisy_env.len()
        )));
    }
    if m + 1 < SEGMENT_FRAMES || m >= clean_env.len() {
        return Err(Error::InvalidArgument(format!(
            "segment end {m} outside [{}, {})",
            SEGMENT_FRAMES - 1,
            clean_env.len()
        )));
    }
    if clean_env.iter().chain(noisy_env).any(|row| j >= row.len()) {
        return Err(Error::InvalidArgument(format!("band {j} out of range")));
    }
    let clean = CleanSegment::new(segment_of(clean_env, m, j));
    Ok(clean.correlate(&segment_of(noisy_env, m, j)).d)
}

/// Segment correlations and their mean.
#[derive(Debug, Clone, PartialEq)]
pub struct StoiBreakdown {
    /// One row per segment-end frame `m >= SEGMENT_FRAMES - 1`, one column
    /// per band.
    pub d_matrix: Vec<Vec<f64>>,
    pub value: f64,
    /// Segments whose correlation is undefined (silent clean or estimate);
    /// they contribute `d = 0`.
    pub degenerate_segments: usize,
}

/// Mean of `d` over all segments of a batch of utterances.
#[derive(Debug, Clone, PartialEq)]
pub struct StoiBatchScore {
    pub value: f64,
    pub segments: usize,
    pub utterances: usize,
}

/// Clean-side envelopes and segment statistics.
#[derive(Debug, Clone)]
pub struct StoiReference {
    clean: Vec<f64>,
    bands: OctaveBands,
    segments: Vec<Vec<CleanSegment>>,
}

struct Trace {
    spec: Spectrogram,
    env: Vec<Vec<f64>>,
    segments: Vec<Vec<Segment>>,
}

impl StoiReference {
    pub fn new(clean: &[f64]) -> Result<Self> {
        Self::with_bands(clean, OctaveBands::standard())
    }

    pub fn with_bands(clean: &[f64], bands: OctaveBands) -> Result<Self> {
        ensure_finite("clean", clean)?;
        if clean.len() < MIN_SAMPLES {
            return Err(Error::TooShort {
                len: clean.len(),
                required: MIN_SAMPLES,
            });
        }
        let env = octave_decompose(&stft(clean, WINDOW_LEN, HOP)?, &bands)?;
        let segments = (SEGMENT_FRAMES - 1..env.len())
            .map(|m| {
                (0..bands.len())
                    .map(|j| CleanSegment::new(segment_of(&env, m, j)))
                    .collect()
            })
            .collect();
        Ok(StoiReference {
            clean: clean.to_vec(),
            bands,
            segments,
        })
    }

    pub fn clean(&self) -> &[f64] {
        &self.clean
    }

    pub fn bands(&self) -> &OctaveBands {
        &self.bands
    }

    fn forward(&self, x_hat: &[f64]) -> Result<Trace> {
        if x_hat.len() != self.clean.len() {
            return Err(Error::LengthMismatch {
                left: self.clean.len(),
                right: x_hat.len(),
            });
        }
        ensure_finite("estimate", x_hat)?;
        let spec = stft(x_hat, WINDOW_LEN, HOP)?;
        let env = octave_decompose(&spec, &self.bands)?;
        let segments = self
            .segments
            .iter()
            .enumerate()
            .map(|(row, clean_row)| {
                let m = row + SEGMENT_FRAMES - 1;
                clean_row
                    .iter()
                    .enumerate()
                    .map(|(j, c)| c.correlate(&segment_of(&env, m, j)))
                    .collect()
            })
            .collect();
        Ok(Trace {
            spec,
            env,
            segments,
        })
    }

    fn breakdown(tr: &Trace) -> StoiBreakdown {
        let d_matrix: Vec<Vec<f64>> = tr
            .segments
            .iter()
            .map(|row| row.iter().map(|s| s.d).collect())
            .collect();
        let count = d_matrix.iter().map(Vec::len).sum::<usize>();
        let value = d_matrix.iter().flatten().sum::<f64>() / count as f64;
        StoiBreakdown {
            degenerate_segments: tr.segments.iter().flatten().filter(|s| s.degenerate).count(),
            d_matrix,
            value,
        }
    }

    pub fn evaluate(&self, x_hat: &[f64]) -> Result<StoiBreakdown> {
        Ok(Self::breakdown(&self.forward(x_hat)?))
    }

    pub fn value_and_gradient(&self, x_hat: &[f64]) -> Result<(StoiBreakdown, Vec<f64>)> {
        let tr = self.forward(x_hat)?;
        let breakdown = Self::breakdown(&tr);
        let count = tr.segments.iter().map(Vec::len).sum::<usize>() as f64;
        let bands = self.bands.len();
        let mut g_env = vec![vec![0.0; bands]; tr.env.len()];
        for (row, (clean_row, seg_row)) in self.segments.iter().zip(&tr.segments).enumerate() {
            let m = row + SEGMENT_FRAMES - 1;
            for j in 0..bands {
                let y = segment_of(&tr.env, m, j);
                let mut g_seg = [0.0; SEGMENT_FRAMES];
                clean_row[j].backward(&y, &seg_row[j], 1.0 / count, &mut g_seg);
                for (n, g) in g_seg.iter().enumerate() {
                    g_env[m + 1 + n - SEGMENT_FRAMES][j] += g;
                }
            }
        }
        let mut g_spec = Spectrogram::zeros(tr.spec.frames(), tr.spec.window_len(), tr.spec.hop());
        for m in 0..tr.spec.frames() {
            let frame = tr.spec.frame(m);
            let g_frame = g_spec.frame_mut(m);
            for j in 0..bands {
                let e = tr.env[m][j];
                if e <= 0.0 {
                    continue;
                }
                let scale = g_env[m][j] / e;
                for k in self.bands.bins(j) {
                    g_frame[k] = Complex64::new(frame[k].re * scale, frame[k].im * scale);
                }
            }
        }
        Ok((breakdown, stft_adjoint(&g_spec, x_hat.len())))
    }

    pub(crate) fn signature(&self, x_hat: &[f64], sig: &mut BranchSignature) -> Result<()> {
        let tr = self.forward(x_hat)?;
        for s in tr.segments.iter().flatten() {
            sig.push_bool(s.degenerate);
            sig.push_bool(s.saturated);
            for p in s.passed {
                sig.push_bool(p);
            }
        }
        for row in &tr.env {
            for &e in row {
                sig.push_bool(e > 0.0);
            }
        }
        Ok(())
    }
}

impl Objective for StoiReference {
    fn name(&self) -> String {
        "stoi".into()
    }

    fn value(&self, x_hat: &[f64]) -> Result<f64> {
        Ok(self.evaluate(x_hat)?.value)
    }

    fn value_and_gradient(&self, x_hat: &[f64]) -> Result<Gradient> {
        let (b, d_input) = StoiReference::value_and_gradient(self, x_hat)?;
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

/// Scores `x_hat` against `clean` with the standard band layout.
pub fn loss_stoi(clean: &[f64], x_hat: &[f64]) -> Result<StoiBreakdown> {
    StoiReference::new(clean)?.evaluate(x_hat)
}

/// Mean segment correlation over all segments of all utterances.
pub fn loss_stoi_batch(batch: &[(&[f64], &[f64])]) -> Result<StoiBatchScore> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let mut total = 0.0;
    let mut segments = 0;
    for (clean, x_hat) in batch {
        let b = loss_stoi(clean, x_hat)?;
        total += b.d_matrix.iter().flatten().sum::<f64>();
        segments += b.d_matrix.iter().map(Vec::len).sum::<usize>();
    }
    Ok(StoiBatchScore {
        value: total / segments as f64,
        segments,
        utterances: batch.len(),
    })
}
