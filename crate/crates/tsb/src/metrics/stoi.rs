//! Short-time objective intelligibility.
//!
//! Follows the published STOI procedure: both signals are brought to the
//! 10 kHz operating rate, silent frames (judged on the reference) are
//! removed, band envelopes are taken over 15 one-third-octave bands, and
//! intermediate correlations are computed over 384 ms segments after
//! per-segment normalization and -15 dB SDR clipping.

use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;

use crate::audio::AudioSignal;
use crate::error::{Error, Result};

const OPERATING_RATE: usize = 10_000;
const FRAME_LEN: usize = 256;
const HOP: usize = 128;
const NFFT: usize = 512;
const NUM_BANDS: usize = 15;
const MIN_BAND_FREQ: f64 = 150.0;
/// Frames per comparison segment (384 ms at the 12.8 ms hop).
const SEGMENT_FRAMES: usize = 30;
/// Lower SDR bound of the clipping rule, dB.
const BETA: f64 = -15.0;
/// Energy range below the loudest frame that still counts as speech, dB.
const DYN_RANGE: f64 = 40.0;

const EPS: f64 = f64::EPSILON;

/// Short-time objective intelligibility of `est` against `reference`,
/// clamped to [0, 1].
pub fn stoi(est: &AudioSignal, reference: &AudioSignal) -> Result<f64> {
    if est.len() != reference.len() {
        return Err(Error::Metric(format!(
            "stoi length mismatch: est {} vs ref {}",
            est.len(),
            reference.len()
        )));
    }
    if est.sample_rate() != reference.sample_rate() {
        return Err(Error::Metric("stoi sample rates differ".into()));
    }
    if est.sample_rate() != 16_000 {
        return Err(Error::Metric("stoi expects 16 kHz input".into()));
    }
    let x16: Vec<f64> = reference.samples().iter().map(|&v| v as f64).collect();
    let y16: Vec<f64> = est.samples().iter().map(|&v| v as f64).collect();
    let x = resample_16k_to_10k(&x16);
    let y = resample_16k_to_10k(&y16);

    let (x, y) = remove_silent_frames(&x, &y)?;

    let x_spec = band_envelopes(&x);
    let y_spec = band_envelopes(&y);
    let num_frames = x_spec.len();
    if num_frames < SEGMENT_FRAMES {
        return Err(Error::Metric(format!(
            "stoi needs at least 384 ms of audio after silent-frame removal \
             ({num_frames} frames < {SEGMENT_FRAMES})"
        )));
    }

    let clip_factor = 1.0 + 10f64.powf(-BETA / 20.0);
    let mut total = 0.0;
    let mut count = 0usize;
    let mut xs = [0.0f64; SEGMENT_FRAMES];
    let mut ys = [0.0f64; SEGMENT_FRAMES];
    for end in SEGMENT_FRAMES..=num_frames {
        let seg = end - SEGMENT_FRAMES..end;
        for band in 0..NUM_BANDS {
            for (i, m) in seg.clone().enumerate() {
                xs[i] = x_spec[m][band];
                ys[i] = y_spec[m][band];
            }
            let nx = l2(&xs);
            let ny = l2(&ys);
            let alpha = nx / (ny + EPS);
            for i in 0..SEGMENT_FRAMES {
                ys[i] = (ys[i] * alpha).min(xs[i] * clip_factor);
            }
            total += correlation(&xs, &ys);
            count += 1;
        }
    }
    let d = total / count as f64;
    Ok(d.max(0.0))
}

fn l2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn correlation(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let mut num = 0.0;
    let mut da = 0.0;
    let mut db = 0.0;
    for (&x, &y) in a.iter().zip(b) {
        let xa = x - ma;
        let yb = y - mb;
        num += xa * yb;
        da += xa * xa;
        db += yb * yb;
    }
    num / (da.sqrt() * db.sqrt() + EPS)
}

/// Positive Hann window without zero endpoints.
fn hann(len: usize) -> Vec<f64> {
    (0..len)
        .map(|n| {
            let phase = 2.0 * std::f64::consts::PI * (n as f64 + 1.0) / (len as f64 + 1.0);
            0.5 - 0.5 * phase.cos()
        })
        .collect()
}

/// Removes frames whose reference energy is more than 40 dB below the
/// loudest frame; the same mask is applied to both signals and the kept
/// frames are overlap-added back into waveforms.
fn remove_silent_frames(x: &[f64], y: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    let w = hann(FRAME_LEN);
    if x.len() < FRAME_LEN {
        return Err(Error::Metric("stoi input shorter than one frame".into()));
    }
    let n_frames = (x.len() - FRAME_LEN) / HOP + 1;
    let mut energies = Vec::with_capacity(n_frames);
    for f in 0..n_frames {
        let start = f * HOP;
        let e: f64 = (0..FRAME_LEN)
            .map(|i| {
                let v = x[start + i] * w[i];
                v * v
            })
            .sum();
        energies.push(20.0 * (e.sqrt() + EPS).log10());
    }
    let max_e = energies.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !max_e.is_finite() || max_e <= 20.0 * EPS.log10() + 1.0 {
        return Err(Error::Metric("stoi reference is silent".into()));
    }
    let keep: Vec<usize> = (0..n_frames).filter(|&f| energies[f] > max_e - DYN_RANGE).collect();
    if keep.is_empty() {
        return Err(Error::Metric("stoi reference is silent".into()));
    }
    let out_len = (keep.len() - 1) * HOP + FRAME_LEN;
    let mut xs = vec![0.0; out_len];
    let mut ys = vec![0.0; out_len];
    for (slot, &f) in keep.iter().enumerate() {
        let src = f * HOP;
        let dst = slot * HOP;
        for i in 0..FRAME_LEN {
            xs[dst + i] += x[src + i] * w[i];
            ys[dst + i] += y[src + i] * w[i];
        }
    }
    Ok((xs, ys))
}

/// One-third-octave band boundaries snapped to the nearest FFT bin.
fn band_bins() -> Vec<(usize, usize)> {
    let bin_hz = OPERATING_RATE as f64 / NFFT as f64;
    let nearest = |freq: f64| -> usize {
        let mut best = 0usize;
        let mut best_d = f64::INFINITY;
        for b in 0..=NFFT / 2 {
            let d = (b as f64 * bin_hz - freq).abs();
            if d < best_d {
                best_d = d;
                best = b;
            }
        }
        best
    };
    (0..NUM_BANDS)
        .map(|k| {
            let low = MIN_BAND_FREQ * 2f64.powf((2.0 * k as f64 - 1.0) / 6.0);
            let high = MIN_BAND_FREQ * 2f64.powf((2.0 * k as f64 + 1.0) / 6.0);
            (nearest(low), nearest(high))
        })
        .collect()
}

/// Per-frame one-third-octave band magnitudes.
fn band_envelopes(signal: &[f64]) -> Vec<[f64; NUM_BANDS]> {
    let w = hann(FRAME_LEN);
    let bands = band_bins();
    let mut planner = FftPlanner::new();
    let fft = planner.plan_fft_forward(NFFT);
    if signal.len() < FRAME_LEN {
        return Vec::new();
    }
    let n_frames = (signal.len() - FRAME_LEN) / HOP + 1;
    let mut out = Vec::with_capacity(n_frames);
    let mut buf = vec![Complex64::new(0.0, 0.0); NFFT];
    for f in 0..n_frames {
        let start = f * HOP;
        for i in 0..NFFT {
            let v = if i < FRAME_LEN { signal[start + i] * w[i] } else { 0.0 };
            buf[i] = Complex64::new(v, 0.0);
        }
        fft.process(&mut buf);
        let mut row = [0.0f64; NUM_BANDS];
        for (k, &(lo, hi)) in bands.iter().enumerate() {
            let mut acc = 0.0;
            for bin in lo..hi {
                acc += buf[bin].norm_sqr();
            }
            row[k] = acc.sqrt();
        }
        out.push(row);
    }
    out
}

/// 16 kHz -> 10 kHz rate conversion: upsample by 5, linear-phase windowed
/// sinc lowpass at 0.9x the target Nyquist with 64 taps per phase, downsample
/// by 8.
pub fn resample_16k_to_10k(x: &[f64]) -> Vec<f64> {
    const UP: usize = 5;
    const DOWN: usize = 8;
    const TAPS_PER_PHASE: usize = 64;
    const N_TAPS: usize = TAPS_PER_PHASE * UP; // 320

    // Cutoff: 0.9 * 5000 Hz at the 80 kHz intermediate rate.
    let fc = 0.9 * (OPERATING_RATE as f64 / 2.0) / (16_000.0 * UP as f64);
    let center = (N_TAPS - 1) as f64 / 2.0;
    let mut h = vec![0.0f64; N_TAPS];
    let mut sum = 0.0;
    for (n, tap) in h.iter_mut().enumerate() {
        let t = n as f64 - center;
        let sinc = if t == 0.0 {
            2.0 * fc
        } else {
            (2.0 * std::f64::consts::PI * fc * t).sin() / (std::f64::consts::PI * t)
        };
        let hamming =
            0.54 - 0.46 * (2.0 * std::f64::consts::PI * n as f64 / (N_TAPS - 1) as f64).cos();
        *tap = sinc * hamming;
        sum += *tap;
    }
    // Unity passband gain after zero-stuffing requires H(0) = UP.
    for tap in h.iter_mut() {
        *tap *= UP as f64 / sum;
    }

    let delay = N_TAPS / 2; // group delay in upsampled samples
    let out_len = x.len() * UP / DOWN;
    let mut out = Vec::with_capacity(out_len);
    for m in 0..out_len {
        let j = m * DOWN + delay;
        // y_u[j] = sum_i h[j - UP*i] * x[i]
        let i_hi = j / UP;
        let i_lo = (j + 1).saturating_sub(N_TAPS).div_ceil(UP);
        let mut acc = 0.0;
        for i in i_lo..=i_hi {
            if i < x.len() {
                acc += h[j - UP * i] * x[i];
            }
        }
        out.push(acc);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audio::SAMPLE_RATE;
    use crate::seeding::rng_for;
    use rand::Rng;

    fn speechlike(seconds: f64, seed: u64) -> AudioSignal {
        let mut rng = rng_for(seed, "stoi-speechlike", 0);
        let n = (seconds * SAMPLE_RATE as f64) as usize;
        let f0 = rng.gen_range(100.0..220.0);
        let samples: Vec<f32> = (0..n)
            .map(|i| {
                let t = i as f64 / SAMPLE_RATE as f64;
                // syllabic amplitude modulation over a harmonic tone
                let am = 0.55 + 0.45 * (2.0 * std::f64::consts::PI * 4.0 * t).sin();
                let mut v = 0.0;
                for (k, a) in [(1.0, 0.5), (2.0, 0.25), (3.0, 0.15), (5.0, 0.08)] {
                    v += a * (2.0 * std::f64::consts::PI * f0 * k * t).sin();
                }
                (0.4 * am * v) as f32
            })
            .collect();
        AudioSignal::new(samples, SAMPLE_RATE).unwrap()
    }

    #[test]
    fn resampler_preserves_a_midband_tone() {
        let n = 16_000;
        let freq = 400.0;
        let x: Vec<f64> = (0..n)
            .map(|i| (2.0 * std::f64::consts::PI * freq * i as f64 / 16_000.0).sin())
            .collect();
        let y = resample_16k_to_10k(&x);
        assert_eq!(y.len(), n * 5 / 8);
        // Steady-state RMS should match within a percent.
        let mid = &y[1000..y.len() - 1000];
        let rms = (mid.iter().map(|v| v * v).sum::<f64>() / mid.len() as f64).sqrt();
        let expect = (0.5f64).sqrt();
        assert!((rms - expect).abs() / expect < 0.01, "rms {rms} vs {expect}");
    }

    #[test]
    fn resampler_rejects_out_of_band_content() {
        // 6 kHz is above the 10 kHz Nyquist and must be attenuated hard.
        let n = 16_000;
        let x: Vec<f64> = (0..n)
            .map(|i| (2.0 * std::f64::consts::PI * 6000.0 * i as f64 / 16_000.0).sin())
            .collect();
        let y = resample_16k_to_10k(&x);
        let mid = &y[1000..y.len() - 1000];
        let rms = (mid.iter().map(|v| v * v).sum::<f64>() / mid.len() as f64).sqrt();
        assert!(rms < 0.01, "rms {rms}");
    }

    #[test]
    fn self_intelligibility_is_near_one() {
        let x = speechlike(1.0, 1);
        let d = stoi(&x, &x).unwrap();
        assert!(d >= 0.999, "stoi(x,x) = {d}");
    }

    #[test]
    fn gain_invariance() {
        let x = speechlike(1.0, 2);
        let scaled =
            AudioSignal::new(x.samples().iter().map(|&v| 0.1 * v).collect(), SAMPLE_RATE).unwrap();
        let d = stoi(&scaled, &x).unwrap();
        assert!(d >= 0.999, "stoi(0.1x, x) = {d}");
    }

    #[test]
    fn white_noise_estimate_scores_low() {
        let x = speechlike(2.0, 3);
        let mut rng = rng_for(3, "stoi-noise", 1);
        let noise: Vec<f32> = (0..x.len()).map(|_| rng.gen_range(-0.5..0.5)).collect();
        let e = AudioSignal::new(noise, SAMPLE_RATE).unwrap();
        let d = stoi(&e, &x).unwrap();
        assert!(d <= 0.35, "stoi(noise, x) = {d}");
    }

    #[test]
    fn too_short_input_errors() {
        let x = speechlike(0.2, 4);
        let err = stoi(&x, &x).unwrap_err();
        assert!(err.to_string().contains("384"), "{err}");
    }

    #[test]
    fn silent_reference_errors() {
        let silent = AudioSignal::new(vec![0.0; 16_000], SAMPLE_RATE).unwrap();
        let x = speechlike(1.0, 5);
        assert!(stoi(&x, &silent).is_err());
    }
}
