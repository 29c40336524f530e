//! Pure signal utilities and intrusive quality metrics.
//!
//! All functions here are deterministic functions of their inputs and safe to
//! call from any number of workers.

mod stoi;

pub use stoi::stoi;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::audio::AudioSignal;
use crate::error::{Error, Result};
use crate::seeding::rng_for;

/// SI-SDR values are clamped to +-80 dB.
pub const SI_SDR_CLAMP_DB: f64 = 80.0;
/// Numerator/denominator guard in the SI-SDR ratio.
pub const SI_SDR_EPS: f64 = 1e-8;

/// Metric identifiers with their fixed score direction.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricName {
    SiSdr,
    SiSdri,
    Stoi,
    Fr,
    Map,
    MTss,
    Wer,
}

impl MetricName {
    /// Direction is fixed per metric: failure rate and WER are
    /// lower-is-better, everything else higher-is-better.
    pub fn higher_is_better(self) -> bool {
        !matches!(self, MetricName::Fr | MetricName::Wer)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            MetricName::SiSdr => "si_sdr",
            MetricName::SiSdri => "si_sdri",
            MetricName::Stoi => "stoi",
            MetricName::Fr => "fr",
            MetricName::Map => "map",
            MetricName::MTss => "m_tss",
            MetricName::Wer => "wer",
        }
    }
}

/// A named metric value.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricValue {
    pub name: MetricName,
    pub value: f64,
}

impl MetricValue {
    pub fn new(name: MetricName, value: f64) -> Self {
        Self { name, value }
    }

    pub fn higher_is_better(&self) -> bool {
        self.name.higher_is_better()
    }
}

/// Scale-invariant SDR on raw f64 sample slices.
///
/// Both signals are mean-removed, the estimate is projected onto the
/// reference, and the ratio of projected to residual power is reported in dB
/// with eps guards and a +-80 dB clamp.
pub fn si_sdr_samples(est: &[f64], reference: &[f64]) -> Result<f64> {
    if est.len() != reference.len() {
        return Err(Error::Metric(format!(
            "si_sdr length mismatch: est {} vs ref {}",
            est.len(),
            reference.len()
        )));
    }
    if est.len() < 2 {
        return Err(Error::Metric("si_sdr needs at least 2 samples".into()));
    }
    let n = est.len() as f64;
    let mean_e: f64 = est.iter().sum::<f64>() / n;
    let mean_r: f64 = reference.iter().sum::<f64>() / n;
    let mut dot_er = 0.0;
    let mut dot_rr = 0.0;
    for (&e, &r) in est.iter().zip(reference) {
        let e0 = e - mean_e;
        let r0 = r - mean_r;
        dot_er += e0 * r0;
        dot_rr += r0 * r0;
    }
    if dot_rr <= 0.0 {
        return Err(Error::Metric("si_sdr reference is constant after mean removal".into()));
    }
    let alpha = dot_er / dot_rr;
    let mut target_pow = 0.0;
    let mut resid_pow = 0.0;
    for (&e, &r) in est.iter().zip(reference) {
        let e0 = e - mean_e;
        let r0 = r - mean_r;
        let t = alpha * r0;
        let d = e0 - t;
        target_pow += t * t;
        resid_pow += d * d;
    }
    let ratio = (target_pow + SI_SDR_EPS) / (resid_pow + SI_SDR_EPS);
    let db = 10.0 * ratio.log10();
    Ok(db.clamp(-SI_SDR_CLAMP_DB, SI_SDR_CLAMP_DB))
}

/// Scale-invariant SDR between an estimate and a reference signal, in dB.
pub fn si_sdr(est: &AudioSignal, reference: &AudioSignal) -> Result<f64> {
    let e: Vec<f64> = est.samples().iter().map(|&x| x as f64).collect();
    let r: Vec<f64> = reference.samples().iter().map(|&x| x as f64).collect();
    si_sdr_samples(&e, &r)
}

/// SI-SDR improvement of `est` over the unprocessed mixture.
pub fn si_sdr_improvement(
    est: &AudioSignal,
    mix: &AudioSignal,
    reference: &AudioSignal,
) -> Result<f64> {
    Ok(si_sdr(est, reference)? - si_sdr(mix, reference)?)
}

/// Negative SI-SNR, the extraction/enhancement training objective.
///
/// This is the plain (non-differentiable) value; the autograd op of the same
/// name provides gradients and must agree with this number.
pub fn neg_si_snr_loss(est: &AudioSignal, reference: &AudioSignal) -> Result<f64> {
    Ok(-si_sdr(est, reference)?)
}

/// Percentage of values strictly below 1 dB. A value of exactly 1.0 dB is
/// not a failure.
pub fn failure_rate(si_sdri_values: &[f64]) -> Result<f64> {
    if si_sdri_values.is_empty() {
        return Err(Error::Metric("failure_rate over an empty list".into()));
    }
    let failures = si_sdri_values.iter().filter(|&&v| v < 1.0).count();
    Ok(100.0 * failures as f64 / si_sdri_values.len() as f64)
}

/// Target SNR for noise mixing, with a sentinel for clean (no-noise) output.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Snr {
    /// No noise is added at all.
    #[serde(rename = "clean", with = "clean_sentinel")]
    Clean,
    Db(f64),
}

mod clean_sentinel {
    use serde::{de, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str("clean")
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<(), D::Error> {
        let tag = String::deserialize(d)?;
        if tag == "clean" {
            Ok(())
        } else {
            Err(de::Error::custom(format!("expected \"clean\", got {tag:?}")))
        }
    }
}

/// Span between the first and last sample whose magnitude exceeds 1e-4 of
/// the peak; powers for SNR scaling are measured over this active region.
fn active_span(samples: &[f32]) -> Option<(usize, usize)> {
    let peak = samples.iter().fold(0.0f32, |m, &x| m.max(x.abs()));
    if peak <= 0.0 {
        return None;
    }
    let thresh = peak * 1e-4;
    let first = samples.iter().position(|&x| x.abs() > thresh)?;
    let last = samples.iter().rposition(|&x| x.abs() > thresh)?;
    Some((first, last + 1))
}

fn mean_power(samples: &[f32], span: (usize, usize)) -> f64 {
    let (a, b) = span;
    let n = (b - a).max(1) as f64;
    samples[a..b].iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>() / n
}

/// Gain applied to noise so that 10*log10(P_signal / P_scaled_noise) equals
/// `snr_db`, with powers measured over the signal's active region.
pub fn snr_gain(signal_power: f64, noise_power: f64, snr_db: f64) -> f64 {
    (signal_power / (noise_power * 10f64.powf(snr_db / 10.0))).sqrt()
}

/// Outcome of [`mix_at_snr_detailed`]: the mixture plus the exact noise gain
/// and crop offset that produced it.
#[derive(Clone, Debug)]
pub struct SnrMix {
    pub mixed: AudioSignal,
    /// Gain applied to the cropped noise (1.0-precision f64; the audible
    /// output is quantized to f32).
    pub gain: f64,
    /// Offset of the seeded noise crop.
    pub noise_offset: usize,
}

/// Mixes noise into a signal at the requested SNR.
///
/// The noise must be at least as long as the signal; a longer noise is
/// cropped at a seeded offset. `Snr::Clean` returns the signal unchanged.
pub fn mix_at_snr(
    signal: &AudioSignal,
    noise: &AudioSignal,
    snr: Snr,
    seed: u64,
) -> Result<AudioSignal> {
    Ok(mix_at_snr_detailed(signal, noise, snr, seed)?.mixed)
}

/// As [`mix_at_snr`], additionally reporting the applied gain and crop
/// offset so callers can reproduce the scaled noise stream exactly.
pub fn mix_at_snr_detailed(
    signal: &AudioSignal,
    noise: &AudioSignal,
    snr: Snr,
    seed: u64,
) -> Result<SnrMix> {
    let snr_db = match snr {
        Snr::Clean => {
            return Ok(SnrMix { mixed: signal.clone(), gain: 0.0, noise_offset: 0 })
        }
        Snr::Db(db) => db,
    };
    if noise.len() < signal.len() {
        return Err(Error::Metric(format!(
            "noise ({} samples) shorter than signal ({} samples)",
            noise.len(),
            signal.len()
        )));
    }
    let slack = noise.len() - signal.len();
    let offset = if slack == 0 {
        0
    } else {
        rng_for(seed, "noise-crop", 0).gen_range(0..=slack)
    };
    let crop = &noise.samples()[offset..offset + signal.len()];

    let span = active_span(signal.samples())
        .ok_or_else(|| Error::Metric("mix_at_snr: signal has zero power".into()))?;
    let p_signal = mean_power(signal.samples(), span);
    let p_noise = mean_power(crop, span);
    if p_noise <= 0.0 {
        return Err(Error::Metric("mix_at_snr: noise has zero power over the active region".into()));
    }
    let g = snr_gain(p_signal, p_noise, snr_db);
    let mixed: Vec<f32> = signal
        .samples()
        .iter()
        .zip(crop)
        .map(|(&s, &n)| (s as f64 + g * n as f64) as f32)
        .collect();
    Ok(SnrMix {
        mixed: AudioSignal::new(mixed, signal.sample_rate())?,
        gain: g,
        noise_offset: offset,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audio::SAMPLE_RATE;

    fn sig(v: &[f32]) -> AudioSignal {
        AudioSignal::new(v.to_vec(), SAMPLE_RATE).unwrap()
    }

    /// Independent direct-formula oracle: zero-mean, project, 10*log10 of the
    /// eps-guarded power ratio, clamped. Deliberately written vector-style,
    /// unlike the implementation's fused accumulation loops.
    fn si_sdr_oracle(est: &[f64], r: &[f64]) -> f64 {
        let n = est.len() as f64;
        let me = est.iter().sum::<f64>() / n;
        let mr = r.iter().sum::<f64>() / n;
        let e0: Vec<f64> = est.iter().map(|x| x - me).collect();
        let r0: Vec<f64> = r.iter().map(|x| x - mr).collect();
        let alpha = e0.iter().zip(&r0).map(|(a, b)| a * b).sum::<f64>()
            / r0.iter().map(|x| x * x).sum::<f64>();
        let t: Vec<f64> = r0.iter().map(|x| alpha * x).collect();
        let num = t.iter().map(|x| x * x).sum::<f64>();
        let den = e0.iter().zip(&t).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
        (10.0 * ((num + 1e-8) / (den + 1e-8)).log10()).clamp(-80.0, 80.0)
    }

    #[test]
    fn worked_example_minus_3_01_db() {
        let v = si_sdr_samples(&[1.0, 1.0, 0.0, 1.0], &[1.0, 1.0, 0.0, 0.0]).unwrap();
        let oracle = si_sdr_oracle(&[1.0, 1.0, 0.0, 1.0], &[1.0, 1.0, 0.0, 0.0]);
        assert!((v - oracle).abs() < 1e-6, "{v} vs oracle {oracle}");
        assert!((v + 3.01).abs() < 0.01);
    }

    #[test]
    fn scaled_reference_hits_clamp_ceiling() {
        let r: Vec<f32> = (0..64).map(|i| ((i as f32) * 0.7).sin()).collect();
        let e: Vec<f32> = r.iter().map(|&x| 2.0 * x).collect();
        let v = si_sdr(&sig(&e), &sig(&r)).unwrap();
        assert_eq!(v, SI_SDR_CLAMP_DB);
    }

    #[test]
    fn scale_and_sign_invariance() {
        let mut rng = rng_for(11, "si-sdr-scale", 0);
        let r: Vec<f64> = (0..257).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let e: Vec<f64> = r.iter().enumerate().map(|(i, &x)| x + 0.1 * ((i as f64) * 0.3).sin()).collect();
        let base = si_sdr_samples(&e, &r).unwrap();
        for a in [0.5, -1.0, 3.7, -0.25, 8.0] {
            let scaled: Vec<f64> = e.iter().map(|&x| a * x).collect();
            let v = si_sdr_samples(&scaled, &r).unwrap();
            assert!((v - base).abs() <= 1e-6, "a={a}: {v} vs {base}");
        }
    }

    #[test]
    fn error_paths() {
        assert!(si_sdr_samples(&[1.0, 2.0], &[1.0, 2.0, 3.0]).is_err());
        assert!(si_sdr_samples(&[1.0, 2.0], &[0.5, 0.5]).is_err());
    }

    #[test]
    fn improvement_identities() {
        let r: Vec<f32> = (0..128).map(|i| ((i as f32) * 0.21).sin() * 0.5).collect();
        let m: Vec<f32> = r.iter().enumerate().map(|(i, &x)| x + 0.3 * ((i as f32) * 0.5).cos()).collect();
        let reference = sig(&r);
        let mix = sig(&m);
        // est = mix -> exactly zero improvement
        assert_eq!(si_sdr_improvement(&mix, &mix, &reference).unwrap(), 0.0);
        // est = ref -> clamp ceiling minus si_sdr(mix, ref)
        let v = si_sdr_improvement(&reference, &mix, &reference).unwrap();
        let expect = SI_SDR_CLAMP_DB - si_sdr(&mix, &reference).unwrap();
        assert!((v - expect).abs() < 1e-12);
    }

    #[test]
    fn improvement_matches_formula_oracle_on_seeded_noise() {
        let mut rng = rng_for(42, "si-sdri-noise", 0);
        let r: Vec<f64> = (0..500).map(|i| ((i as f64) * 0.11).sin()).collect();
        let noise: Vec<f64> = (0..500).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mix: Vec<f64> = r.iter().zip(&noise).map(|(&a, &b)| a + 0.5 * b).collect();
        let est: Vec<f64> = r.iter().zip(&noise).map(|(&a, &b)| a + 0.1 * b).collect();
        let got = si_sdr_samples(&est, &r).unwrap() - si_sdr_samples(&mix, &r).unwrap();
        let want = si_sdr_oracle(&est, &r) - si_sdr_oracle(&mix, &r);
        assert!((got - want).abs() < 1e-6, "{got} vs {want}");
    }

    #[test]
    fn neg_loss_is_negated_si_sdr() {
        let e = [1.0, 1.0, 0.0, 1.0].map(|x| x as f32);
        let r = [1.0, 1.0, 0.0, 0.0].map(|x| x as f32);
        let loss = neg_si_snr_loss(&sig(&e), &sig(&r)).unwrap();
        assert!((loss - 3.0103).abs() < 1e-3);
        let self_loss = neg_si_snr_loss(&sig(&r), &sig(&r)).unwrap();
        assert_eq!(self_loss, -SI_SDR_CLAMP_DB);
    }

    #[test]
    fn failure_rate_counts_strictly_below_one() {
        assert_eq!(failure_rate(&[2.0, 3.5, 1.0]).unwrap(), 0.0);
        assert_eq!(failure_rate(&[0.5, 1.5, 2.0, -3.0]).unwrap(), 50.0);
        assert_eq!(failure_rate(&[1.0, 7.0, 12.0]).unwrap(), 0.0);
        assert!(failure_rate(&[]).is_err());
    }

    #[test]
    fn metric_directions_are_fixed() {
        assert!(MetricName::SiSdr.higher_is_better());
        assert!(MetricName::SiSdri.higher_is_better());
        assert!(MetricName::Stoi.higher_is_better());
        assert!(MetricName::Map.higher_is_better());
        assert!(MetricName::MTss.higher_is_better());
        assert!(!MetricName::Fr.higher_is_better());
        assert!(!MetricName::Wer.higher_is_better());
    }

    #[test]
    fn mix_at_snr_zero_db_matches_powers() {
        let mut rng = rng_for(5, "mix-test", 0);
        // Active everywhere so the active region is the whole buffer.
        let mut s: Vec<f32> = (0..4000).map(|_| rng.gen_range(-0.4..0.4f32)).collect();
        s[0] = 0.4;
        *s.last_mut().unwrap() = 0.4;
        let n: Vec<f32> = (0..4000).map(|_| rng.gen_range(-0.3..0.3)).collect();
        let out = mix_at_snr_detailed(&sig(&s), &sig(&n), Snr::Db(0.0), 9).unwrap();
        let p_s: f64 = s.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>() / s.len() as f64;
        let p_n: f64 = n.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>() / n.len() as f64;
        let scaled = out.gain * out.gain * p_n;
        assert!((scaled / p_s - 1.0).abs() < 1e-9, "power ratio {}", scaled / p_s);
        // And the audible mixture really is signal + gain * noise.
        for i in 0..s.len() {
            let want = (s[i] as f64 + out.gain * n[i] as f64) as f32;
            assert_eq!(out.mixed.samples()[i], want);
        }
    }

    #[test]
    fn mix_at_snr_clean_sentinel_is_identity() {
        let s: Vec<f32> = (0..100).map(|i| (i as f32) * 0.001).collect();
        let n: Vec<f32> = vec![0.1; 200];
        let out = mix_at_snr(&sig(&s), &sig(&n), Snr::Clean, 3).unwrap();
        assert_eq!(out.samples(), &s[..]);
    }

    #[test]
    fn snr_gain_power_ratio_algebra() {
        // signal power 1.0, noise power 4.0 at snr = 10*log10(4) -> g = 0.25
        let snr = 10.0 * 4.0f64.log10();
        let g = snr_gain(1.0, 4.0, snr);
        assert!((g - 0.25).abs() < 1e-6, "{g}");
        // at the paper-style rounded 6.02 dB the oracle formula still rules
        let g2 = snr_gain(1.0, 4.0, 6.02);
        let oracle = (1.0 / (4.0 * 10f64.powf(0.602))).sqrt();
        assert!((g2 - oracle).abs() < 1e-12);
        assert!((g2 - 0.25).abs() < 1e-4);
    }

    #[test]
    fn mix_at_snr_rejects_degenerate_inputs() {
        let s = sig(&vec![0.0; 100]);
        let n = sig(&vec![0.1; 100]);
        assert!(mix_at_snr(&s, &n, Snr::Db(0.0), 1).is_err());
        let s2 = sig(&vec![0.1; 100]);
        let silent = sig(&vec![0.0; 100]);
        assert!(mix_at_snr(&s2, &silent, Snr::Db(0.0), 1).is_err());
        let short = sig(&vec![0.1; 50]);
        assert!(mix_at_snr(&s2, &short, Snr::Db(0.0), 1).is_err());
    }

    #[test]
    fn snr_serde_round_trip() {
        let clean: Snr = serde_json::from_str("\"clean\"").unwrap();
        assert_eq!(clean, Snr::Clean);
        let db: Snr = serde_json::from_str("7.5").unwrap();
        assert_eq!(db, Snr::Db(7.5));
        assert_eq!(serde_json::to_string(&Snr::Clean).unwrap(), "\"clean\"");
        assert_eq!(serde_json::to_string(&Snr::Db(3.0)).unwrap(), "3.0");
    }
}
