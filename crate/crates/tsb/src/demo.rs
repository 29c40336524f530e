//! Synthetic multi-speaker demo corpus.
//!
//! Real speech corpora are not shipped; examples, tests and smoke runs
//! generate small speaker-labeled WAV corpora instead. Each synthetic
//! speaker has a characteristic fundamental, harmonic profile and syllable
//! rate, which is enough structure for enrollment pairing and overfit runs.

use std::path::{Path, PathBuf};

use rand::Rng;

use crate::audio::{write_wav, AudioSignal, SAMPLE_RATE};
use crate::error::Result;
use crate::seeding::rng_for;

const WORDS: &[&str] = &[
    "amber", "basil", "cedar", "delta", "ember", "fable", "grove", "haze", "iris", "jade",
    "karst", "lumen", "moss", "noble", "ocean", "pearl", "quill", "reed", "stone", "tide",
    "umber", "vale", "wren", "zephyr",
];

#[derive(Clone, Debug)]
pub struct DemoConfig {
    pub speakers: usize,
    pub utterances_per_speaker: usize,
    pub min_secs: f64,
    pub max_secs: f64,
    pub seed: u64,
    /// Write a two-word transcript sidecar next to every WAV.
    pub transcripts: bool,
}

impl Default for DemoConfig {
    fn default() -> Self {
        Self {
            speakers: 3,
            utterances_per_speaker: 3,
            min_secs: 2.0,
            max_secs: 3.5,
            seed: 0,
            transcripts: true,
        }
    }
}

/// Voice character of one synthetic speaker.
struct Voice {
    f0: f64,
    harmonics: Vec<(f64, f64)>, // (multiple, amplitude)
    syllable_hz: f64,
    vibrato: f64,
}

impl Voice {
    fn seeded(seed: u64, speaker: usize) -> Self {
        let mut rng = rng_for(seed, "demo-voice", speaker as u64);
        let f0 = rng.gen_range(95.0..280.0);
        let harmonics = (1..=5)
            .map(|k| (k as f64, rng.gen_range(0.1..1.0) / k as f64))
            .collect();
        Self {
            f0,
            harmonics,
            syllable_hz: rng.gen_range(3.0..6.5),
            vibrato: rng.gen_range(0.002..0.01),
        }
    }

    fn render(&self, n: usize, rng: &mut impl Rng) -> Vec<f32> {
        let phase0: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
        let mut out = Vec::with_capacity(n);
        let mut peak = 0.0f64;
        for i in 0..n {
            let t = i as f64 / SAMPLE_RATE as f64;
            let f = self.f0 * (1.0 + self.vibrato * (std::f64::consts::TAU * 5.0 * t).sin());
            // syllabic envelope with soft onset/offset
            let syl = 0.5 - 0.5 * (std::f64::consts::TAU * self.syllable_hz * t).cos();
            let edge = (t * 8.0).min(1.0).min(((n - 1 - i) as f64 / SAMPLE_RATE as f64 * 8.0).min(1.0));
            let mut v = 0.0;
            for &(k, a) in &self.harmonics {
                v += a * (std::f64::consts::TAU * f * k * t + phase0 * k).sin();
            }
            v *= (0.25 + 0.75 * syl) * edge;
            v += rng.gen_range(-0.02..0.02);
            peak = peak.max(v.abs());
            out.push(v as f32);
        }
        let norm = if peak > 0.0 { 0.35 / peak as f32 } else { 1.0 };
        out.iter().map(|&v| v * norm).collect()
    }
}

/// Writes `speakers x utterances_per_speaker` WAVs (nested per-speaker
/// layout) and optional transcript sidecars. Returns the written WAV paths.
pub fn generate_demo_corpus(dir: &Path, cfg: &DemoConfig) -> Result<Vec<PathBuf>> {
    let mut paths = Vec::new();
    for s in 0..cfg.speakers {
        let speaker_dir = dir.join(format!("spk{s:02}"));
        std::fs::create_dir_all(&speaker_dir)?;
        let voice = Voice::seeded(cfg.seed, s);
        for u in 0..cfg.utterances_per_speaker {
            let mut rng = rng_for(cfg.seed, "demo-utt", (s * 1000 + u) as u64);
            let secs = rng.gen_range(cfg.min_secs..=cfg.max_secs);
            let n = (secs * SAMPLE_RATE as f64).round() as usize;
            let samples = voice.render(n, &mut rng);
            let path = speaker_dir.join(format!("utt{u:02}.wav"));
            write_wav(&path, &AudioSignal::new(samples, SAMPLE_RATE)?)?;
            if cfg.transcripts {
                let w1 = WORDS[rng.gen_range(0..WORDS.len())];
                let w2 = WORDS[rng.gen_range(0..WORDS.len())];
                std::fs::write(path.with_extension("txt"), format!("{w1} {w2}\n"))?;
            }
            paths.push(path);
        }
    }
    Ok(paths)
}

/// Writes `files` lowpassed-noise WAVs of `secs` seconds each.
pub fn generate_noise_dir(dir: &Path, files: usize, secs: f64, seed: u64) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let mut paths = Vec::new();
    for i in 0..files {
        let mut rng = rng_for(seed, "demo-noise", i as u64);
        let n = (secs * SAMPLE_RATE as f64).round() as usize;
        let alpha = rng.gen_range(0.05..0.3);
        let mut state = 0.0f64;
        let mut samples = Vec::with_capacity(n);
        let mut peak = 0.0f64;
        for _ in 0..n {
            let white: f64 = rng.gen_range(-1.0..1.0);
            state += alpha * (white - state);
            peak = peak.max(state.abs());
            samples.push(state);
        }
        let norm = if peak > 0.0 { 0.3 / peak } else { 1.0 };
        let samples: Vec<f32> = samples.into_iter().map(|v| (v * norm) as f32).collect();
        let path = dir.join(format!("noise{i:02}.wav"));
        write_wav(&path, &AudioSignal::new(samples, SAMPLE_RATE)?)?;
        paths.push(path);
    }
    Ok(paths)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::CorpusIndex;

    #[test]
    fn corpus_generates_and_indexes() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = DemoConfig {
            speakers: 2,
            utterances_per_speaker: 2,
            min_secs: 0.5,
            max_secs: 0.8,
            seed: 3,
            transcripts: true,
        };
        let paths = generate_demo_corpus(dir.path(), &cfg).unwrap();
        assert_eq!(paths.len(), 4);
        let index = CorpusIndex::scan(dir.path()).unwrap();
        assert_eq!(index.speakers(), &["spk00".to_string(), "spk01".to_string()]);
        assert!(index.entries().iter().all(|e| e.transcript.is_some()));
        let words: Vec<&str> = index.entries()[0]
            .transcript
            .as_deref()
            .unwrap()
            .split_whitespace()
            .collect();
        assert_eq!(words.len(), 2);
    }

    #[test]
    fn generation_is_deterministic() {
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        let cfg = DemoConfig {
            speakers: 1,
            utterances_per_speaker: 1,
            min_secs: 0.3,
            max_secs: 0.4,
            seed: 9,
            transcripts: false,
        };
        generate_demo_corpus(d1.path(), &cfg).unwrap();
        generate_demo_corpus(d2.path(), &cfg).unwrap();
        let b1 = std::fs::read(d1.path().join("spk00/utt00.wav")).unwrap();
        let b2 = std::fs::read(d2.path().join("spk00/utt00.wav")).unwrap();
        assert_eq!(b1, b2);
    }

    #[test]
    fn distinct_speakers_sound_different() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = DemoConfig {
            speakers: 2,
            utterances_per_speaker: 1,
            min_secs: 0.3,
            max_secs: 0.3,
            seed: 4,
            transcripts: false,
        };
        generate_demo_corpus(dir.path(), &cfg).unwrap();
        let a = crate::audio::read_wav(&dir.path().join("spk00/utt00.wav")).unwrap();
        let b = crate::audio::read_wav(&dir.path().join("spk01/utt00.wav")).unwrap();
        let n = a.len().min(b.len());
        let diff: f64 = a.samples()[..n]
            .iter()
            .zip(&b.samples()[..n])
            .map(|(&x, &y)| ((x - y) as f64).powi(2))
            .sum::<f64>()
            / n as f64;
        assert!(diff > 1e-4, "speakers too similar: {diff}");
    }

    #[test]
    fn noise_dir_generates() {
        let dir = tempfile::tempdir().unwrap();
        let paths = generate_noise_dir(dir.path(), 2, 0.5, 5).unwrap();
        assert_eq!(paths.len(), 2);
        let n = crate::audio::read_wav(&paths[0]).unwrap();
        assert_eq!(n.len(), 8000);
    }
}
