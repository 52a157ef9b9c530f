//! STFT analysis and least-squares (Griffin-Lim) synthesis on a fixed
//! periodic-Hann grid, plus the adjoints both transforms need for
//! reverse-mode gradients.
//!
//! Framing: the signal is zero-padded by `window_len / 2` on the left and by
//! at least `window_len / 2` on the right (rounded up so the padded length
//! lands on the hop grid), which puts every original sample under exactly two
//! frames.

use realfft::RealFftPlanner;
pub use realfft::num_complex::Complex64;

use crate::error::{Error, Result};
use crate::signal::Signal;

/// Shared analysis window: 32 ms at 16 kHz.
pub const WINDOW_LEN: usize = 512;
/// Shared hop: 50 % overlap.
pub const HOP: usize = 256;

/// Periodic Hann window of length `n`.
pub fn hann(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos())
        .collect()
}

/// Frame count for a signal of `len` samples on a `hop` grid.
pub fn frame_count(len: usize, hop: usize) -> usize {
    len.div_ceil(hop) + 1
}

/// One-sided complex STFT, stored frame-major (`frames x bins`).
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrogram {
    frames: usize,
    bins: usize,
    window_len: usize,
    hop: usize,
    values: Vec<Complex64>,
}

impl Spectrogram {
    /// An all-zero spectrogram with the given grid.
    pub fn zeros(frames: usize, window_len: usize, hop: usize) -> Self {
        let bins = window_len / 2 + 1;
        Spectrogram {
            frames,
            bins,
            window_len,
            hop,
            values: vec![Complex64::new(0.0, 0.0); frames * bins],
        }
    }

    pub fn from_values(
        frames: usize,
        window_len: usize,
        hop: usize,
        values: Vec<Complex64>,
    ) -> Result<Self> {
        check_grid(window_len, hop)?;
        let bins = window_len / 2 + 1;
        if values.len() != frames * bins {
            return Err(Error::Shape(format!(
                "{} values for {} frames x {} bins",
                values.len(),
                frames,
                bins
            )));
        }
        Ok(Spectrogram {
            frames,
            bins,
            window_len,
            hop,
            values,
        })
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn bins(&self) -> usize {
        self.bins
    }

    pub fn window_len(&self) -> usize {
        self.window_len
    }

    pub fn hop(&self) -> usize {
        self.hop
    }

    pub fn values(&self) -> &[Complex64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Complex64] {
        &mut self.values
    }

    pub fn get(&self, frame: usize, bin: usize) -> Complex64 {
        self.values[frame * self.bins + bin]
    }

    pub fn frame(&self, frame: usize) -> &[Complex64] {
        &self.values[frame * self.bins..(frame + 1) * self.bins]
    }

    pub fn frame_mut(&mut self, frame: usize) -> &mut [Complex64] {
        &mut self.values[frame * self.bins..(frame + 1) * self.bins]
    }

    /// Frame-major `|X|^2`.
    pub fn power(&self) -> Vec<f64> {
        self.values.iter().map(|c| c.norm_sqr()).collect()
    }

    pub fn same_grid(&self, other: &Spectrogram) -> bool {
        self.frames == other.frames
            && self.bins == other.bins
            && self.window_len == other.window_len
            && self.hop == other.hop
    }

    /// Centre frequency of `bin` in Hz at 16 kHz.
    pub fn bin_hz(&self, bin: usize) -> f64 {
        bin as f64 * crate::signal::SAMPLE_RATE as f64 / self.window_len as f64
    }
}

fn check_grid(window_len: usize, hop: usize) -> Result<()> {
    if window_len < 4 || window_len % 2 != 0 {
        return Err(Error::InvalidArgument(format!(
            "window length must be even and >= 4, got {window_len}"
        )));
    }
    if hop != window_len / 2 {
        return Err(Error::InvalidArgument(format!(
            "hop must be window_len / 2 = {}, got {hop}",
            window_len / 2
        )));
    }
    Ok(())
}

/// Short-time Fourier transform with a periodic Hann window.
///
/// Produces `1 + floor((padded_len - window_len) / hop)` frames of
/// `window_len / 2 + 1` bins.
pub fn stft(signal: &[f64], window_len: usize, hop: usize) -> Result<Spectrogram> {
    check_grid(window_len, hop)?;
    if signal.len() < window_len {
        return Err(Error::TooShort {
            len: signal.len(),
            required: window_len,
        });
    }
    let frames = frame_count(signal.len(), hop);
    let padded_len = (frames - 1) * hop + window_len;
    let offset = window_len / 2;
    let mut padded = vec![0.0; padded_len];
    padded[offset..offset + signal.len()].copy_from_slice(signal);

    let window = hann(window_len);
    let mut planner = RealFftPlanner::<f64>::new();
    let fft = planner.plan_fft_forward(window_len);
    let mut input = fft.make_input_vec();
    let mut output = fft.make_output_vec();
    let mut scratch = fft.make_scratch_vec();

    let mut spec = Spectrogram::zeros(frames, window_len, hop);
    for m in 0..frames {
        let start = m * hop;
        for (n, slot) in input.iter_mut().enumerate() {
            *slot = padded[start + n] * window[n];
        }
        fft.process_with_scratch(&mut input, &mut output, &mut scratch)
            .expect("fft buffer sizes are fixed by the plan");
        spec.frame_mut(m).copy_from_slice(&output);
    }
    Ok(spec)
}

/// Per-sample sum of squared windows over the padded frame grid.
fn window_energy(frames: usize, window_len: usize, hop: usize, window: &[f64]) -> Vec<f64> {
    let padded_len = (frames - 1) * hop + window_len;
    let mut norm = vec![0.0; padded_len];
    for m in 0..frames {
        for n in 0..window_len {
            norm[m * hop + n] += window[n] * window[n];
        }
    }
    norm
}

/// Least-squares signal estimate from a (possibly modified) STFT: inverse
/// transform per frame, window-weighted overlap-add, division by the summed
/// squared windows. The left pad is removed and the result is truncated or
/// zero-padded to `target_len`.
///
/// The imaginary parts of the DC and Nyquist bins are ignored (the one-sided
/// spectrum is read as the half of a Hermitian spectrum).
pub fn istft_ls(spec: &Spectrogram, target_len: usize) -> Result<Signal> {
    Signal::from_samples(istft_ls_samples(spec, target_len))
}

pub(crate) fn istft_ls_samples(spec: &Spectrogram, target_len: usize) -> Vec<f64> {
    let (window_len, hop, frames) = (spec.window_len, spec.hop, spec.frames);
    if frames == 0 {
        return vec![0.0; target_len];
    }
    let window = hann(window_len);
    let norm = window_energy(frames, window_len, hop, &window);
    let mut planner = RealFftPlanner::<f64>::new();
    let ifft = planner.plan_fft_inverse(window_len);
    let mut input = ifft.make_input_vec();
    let mut output = ifft.make_output_vec();
    let mut scratch = ifft.make_scratch_vec();
    let scale = 1.0 / window_len as f64;
    let last = spec.bins - 1;

    let mut acc = vec![0.0; norm.len()];
    for m in 0..frames {
        input.copy_from_slice(spec.frame(m));
        input[0].im = 0.0;
        input[last].im = 0.0;
        ifft.process_with_scratch(&mut input, &mut output, &mut scratch)
            .expect("fft buffer sizes are fixed by the plan");
        let start = m * hop;
        for n in 0..window_len {
            acc[start + n] += window[n] * output[n] * scale;
        }
    }

    let offset = window_len / 2;
    let mut out = vec![0.0; target_len];
    for (t, slot) in out.iter_mut().enumerate() {
        let p = offset + t;
        if p >= acc.len() {
            break;
        }
        let w = norm[p];
        assert!(w > 0.0, "degenerate overlap-add normalization at sample {t}");
        *slot = acc[p] / w;
    }
    out
}

/// Pulls a gradient with respect to STFT coefficients back to the time
/// domain. `grad` holds `dL/dRe + i dL/dIm` per bin; the result has
/// `signal_len` entries.
pub fn stft_adjoint(grad: &Spectrogram, signal_len: usize) -> Vec<f64> {
    let (window_len, hop, frames) = (grad.window_len, grad.hop, grad.frames);
    let window = hann(window_len);
    let mut planner = RealFftPlanner::<f64>::new();
    let ifft = planner.plan_fft_inverse(window_len);
    let mut input = ifft.make_input_vec();
    let mut output = ifft.make_output_vec();
    let mut scratch = ifft.make_scratch_vec();
    let last = grad.bins - 1;

    let offset = window_len / 2;
    let mut out = vec![0.0; signal_len];
    for m in 0..frames {
        // Re sum_k G_k e^{+i 2 pi k n / N} over the one-sided bins equals a
        // Hermitian inverse transform of G/2, with DC and Nyquist taken whole.
        for (k, slot) in input.iter_mut().enumerate() {
            let g = grad.get(m, k);
            *slot = if k == 0 || k == last {
                Complex64::new(g.re, 0.0)
            } else {
                g * 0.5
            };
        }
        ifft.process_with_scratch(&mut input, &mut output, &mut scratch)
            .expect("fft buffer sizes are fixed by the plan");
        let start = m * hop;
        for n in 0..window_len {
            let p = start + n;
            if p >= offset && p - offset < signal_len {
                out[p - offset] += window[n] * output[n];
            }
        }
    }
    out
}

/// Pulls a time-domain gradient through [`istft_ls`] back to the STFT
/// coefficients of `shape` (only the grid of `shape` is used).
pub fn istft_ls_adjoint(shape: &Spectrogram, grad: &[f64]) -> Spectrogram {
    let (window_len, hop, frames) = (shape.window_len, shape.hop, shape.frames);
    let mut out = Spectrogram::zeros(frames, window_len, hop);
    if frames == 0 {
        return out;
    }
    let window = hann(window_len);
    let norm = window_energy(frames, window_len, hop, &window);
    let offset = window_len / 2;
    let mut g_pad = vec![0.0; norm.len()];
    for (t, &g) in grad.iter().enumerate() {
        let p = offset + t;
        if p >= g_pad.len() {
            break;
        }
        g_pad[p] = g / norm[p];
    }

    let mut planner = RealFftPlanner::<f64>::new();
    let fft = planner.plan_fft_forward(window_len);
    let mut input = fft.make_input_vec();
    let mut output = fft.make_output_vec();
    let mut scratch = fft.make_scratch_vec();
    let n_inv = 1.0 / window_len as f64;
    let last = out.bins - 1;
    for m in 0..frames {
        let start = m * hop;
        for (n, slot) in input.iter_mut().enumerate() {
            *slot = window[n] * g_pad[start + n];
        }
        fft.process_with_scratch(&mut input, &mut output, &mut scratch)
            .expect("fft buffer sizes are fixed by the plan");
        for (k, slot) in out.frame_mut(m).iter_mut().enumerate() {
            *slot = if k == 0 || k == last {
                Complex64::new(output[k].re * n_inv, 0.0)
            } else {
                output[k] * (2.0 * n_inv)
            };
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn noise(len: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..len).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    #[test]
    fn frame_count_and_shape() {
        let spec = stft(&vec![0.0; 16000], WINDOW_LEN, HOP).unwrap();
        assert_eq!(spec.bins(), 257);
        assert_eq!(spec.frames(), 16000usize.div_ceil(256) + 1);
        let padded = (spec.frames() - 1) * HOP + WINDOW_LEN;
        assert_eq!(spec.frames(), 1 + (padded - WINDOW_LEN) / HOP);
    }

    #[test]
    fn zero_signal_zero_spectrum() {
        let spec = stft(&vec![0.0; 2048], WINDOW_LEN, HOP).unwrap();
        assert!(spec.values().iter().all(|c| c.norm() == 0.0));
        let back = istft_ls(&Spectrogram::zeros(9, WINDOW_LEN, HOP), 2048).unwrap();
        assert!(back.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn too_short_and_bad_hop() {
        assert!(matches!(
            stft(&[0.0; 100], WINDOW_LEN, HOP),
            Err(Error::TooShort { len: 100, .. })
        ));
        assert!(stft(&[0.0; 1024], WINDOW_LEN, 128).is_err());
    }

    #[test]
    fn bin_centred_cosine_is_concentrated() {
        let k0 = 32;
        let x: Vec<f64> = (0..4096)
            .map(|n| (2.0 * std::f64::consts::PI * k0 as f64 * n as f64 / 512.0).cos())
            .collect();
        let spec = stft(&x, WINDOW_LEN, HOP).unwrap();
        // Interior frame lies entirely inside the signal.
        let frame = spec.frame(4);
        let peak = frame[k0].norm();
        for (k, c) in frame.iter().enumerate() {
            // Hann leaks into the two neighbouring bins only.
            if (k as i64 - k0 as i64).abs() > 1 {
                assert!(c.norm() <= 1e-10 * peak, "bin {k}: {}", c.norm());
            }
        }
    }

    #[test]
    fn parseval_per_frame() {
        let x = noise(16000, 7);
        let spec = stft(&x, WINDOW_LEN, HOP).unwrap();
        let w = hann(WINDOW_LEN);
        let mut padded = vec![0.0; (spec.frames() - 1) * HOP + WINDOW_LEN];
        padded[256..256 + x.len()].copy_from_slice(&x);
        for m in 0..spec.frames() {
            let time: f64 = (0..WINDOW_LEN)
                .map(|n| (padded[m * HOP + n] * w[n]).powi(2))
                .sum();
            let f = spec.frame(m);
            let mut freq = f[0].norm_sqr() + f[256].norm_sqr();
            freq += 2.0 * f[1..256].iter().map(|c| c.norm_sqr()).sum::<f64>();
            freq /= WINDOW_LEN as f64;
            assert!((time - freq).abs() <= 1e-9 * time.max(1e-300), "frame {m}");
        }
    }

    #[test]
    fn perfect_reconstruction() {
        for len in [1024, 5000, 16000, 16001] {
            let x = noise(len, len as u64);
            let y = istft_ls(&stft(&x, WINDOW_LEN, HOP).unwrap(), len).unwrap();
            let worst = x.iter().zip(y.iter()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            assert!(worst < 1e-9, "len {len}: {worst}");
        }
    }

    #[test]
    fn target_len_pads_and_truncates() {
        let x = noise(2048, 3);
        let spec = stft(&x, WINDOW_LEN, HOP).unwrap();
        let short = istft_ls(&spec, 1000).unwrap();
        assert_eq!(short.len(), 1000);
        let long = istft_ls(&spec, 10_000).unwrap();
        assert_eq!(long.len(), 10_000);
        assert!(long[3000..].iter().all(|&v| v == 0.0));
    }

    /// Re-analysis error weighted so it equals N times the time-domain
    /// framewise error (full-spectrum Parseval weighting).
    fn reanalysis_error(x: &[f64], target: &Spectrogram) -> f64 {
        let spec = stft(x, WINDOW_LEN, HOP).unwrap();
        let mut err = 0.0;
        for m in 0..spec.frames() {
            for k in 0..spec.bins() {
                let weight = if k == 0 || k == spec.bins() - 1 { 1.0 } else { 2.0 };
                err += weight * (spec.get(m, k) - target.get(m, k)).norm_sqr();
            }
        }
        err
    }

    #[test]
    fn least_squares_beats_handcrafted_splices() {
        let x = noise(4096, 11);
        let mut modified = stft(&x, WINDOW_LEN, HOP).unwrap();
        let j = 6;
        for c in modified.frame_mut(j) {
            *c *= 0.5;
        }
        let ls = istft_ls(&modified, x.len()).unwrap();
        let best = reanalysis_error(&ls, &modified);

        let w = hann(WINDOW_LEN);
        let frame_start = j * HOP; // in original coordinates, minus the left pad
        let lo = frame_start as i64 - 256;
        let in_frame = |t: usize| {
            let p = t as i64 - lo;
            (0..WINDOW_LEN as i64).contains(&p).then(|| p as usize)
        };
        let mut alternatives: Vec<Vec<f64>> = Vec::new();
        alternatives.push(x.clone());
        alternatives.push(
            (0..x.len())
                .map(|t| if in_frame(t).is_some() { 0.5 * x[t] } else { x[t] })
                .collect(),
        );
        alternatives.push(
            (0..x.len())
                .map(|t| in_frame(t).map_or(x[t], |p| x[t] * (1.0 - 0.5 * w[p])))
                .collect(),
        );
        alternatives.push(
            (0..x.len())
                .map(|t| if in_frame(t).is_some() { 0.75 * x[t] } else { x[t] })
                .collect(),
        );
        alternatives.push(
            (0..x.len())
                .map(|t| in_frame(t).map_or(x[t], |p| x[t] * (1.0 - 0.5 * w[p] * w[p])))
                .collect(),
        );
        for (i, alt) in alternatives.iter().enumerate() {
            let e = reanalysis_error(alt, &modified);
            assert!(best <= e * (1.0 + 1e-12), "alternative {i}: ls {best} vs {e}");
        }
    }

    #[test]
    fn stft_adjoint_matches_inner_product() {
        // <stft(x), G> == <x, stft_adjoint(G)> with the real inner product on C.
        let len = 3000;
        let x = noise(len, 21);
        let spec = stft(&x, WINDOW_LEN, HOP).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let g_vals: Vec<Complex64> = (0..spec.values().len())
            .map(|_| Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
            .collect();
        let g = Spectrogram::from_values(spec.frames(), WINDOW_LEN, HOP, g_vals).unwrap();
        let lhs: f64 = spec
            .values()
            .iter()
            .zip(g.values())
            .map(|(a, b)| a.re * b.re + a.im * b.im)
            .sum();
        let back = stft_adjoint(&g, len);
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-9 * lhs.abs().max(1.0), "{lhs} vs {rhs}");
    }

    #[test]
    fn istft_adjoint_matches_inner_product() {
        let len = 3000;
        let frames = frame_count(len, HOP);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let s_vals: Vec<Complex64> = (0..frames * 257)
            .map(|_| Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
            .collect();
        let s = Spectrogram::from_values(frames, WINDOW_LEN, HOP, s_vals).unwrap();
        let g = noise(len, 13);
        let y = istft_ls(&s, len).unwrap();
        let lhs: f64 = y.iter().zip(&g).map(|(a, b)| a * b).sum();
        let back = istft_ls_adjoint(&s, &g);
        let rhs: f64 = s
            .values()
            .iter()
            .zip(back.values())
            .map(|(a, b)| a.re * b.re + a.im * b.im)
            .sum();
        assert!((lhs - rhs).abs() < 1e-9 * lhs.abs().max(1.0), "{lhs} vs {rhs}");
    }
}
