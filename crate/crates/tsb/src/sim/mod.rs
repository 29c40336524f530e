//! Two-speaker mixture simulation with controlled overlap, frame labels and
//! enrollment pairing.
//!
//! Placement modes follow the usual two-speaker corpus conventions: `min`
//! truncates to the shorter utterance (fully overlapped), `max` spans the
//! longer utterance footprint, and `sparse` realizes a requested overlap
//! ratio with a single overlap region whose leader is a seeded coin flip.
//! The overlap-ratio denominator is the mixture length.

mod manifest;

pub use manifest::{decode_labels, encode_labels, Lengths, Manifest, NoiseInfo, Offsets, Record};

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::audio::{read_wav, write_wav, AudioSignal, SAMPLE_RATE};
use crate::error::{Error, Result};
use crate::metrics::{snr_gain, Snr};
use crate::seeding::{mix_seed, rng_for};
use crate::FRAME_STRIDE;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MixMode {
    Min,
    Max,
    Sparse,
}

impl std::fmt::Display for MixMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            MixMode::Min => "min",
            MixMode::Max => "max",
            MixMode::Sparse => "sparse",
        };
        f.write_str(s)
    }
}

/// Frame classes: target speech, non-target speech, no speech.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FrameLabel {
    Tss,
    Ntss,
    Ns,
}

impl FrameLabel {
    pub fn as_str(self) -> &'static str {
        match self {
            FrameLabel::Tss => "tss",
            FrameLabel::Ntss => "ntss",
            FrameLabel::Ns => "ns",
        }
    }

    pub fn from_str(s: &str) -> Option<Self> {
        match s {
            "tss" => Some(FrameLabel::Tss),
            "ntss" => Some(FrameLabel::Ntss),
            "ns" => Some(FrameLabel::Ns),
            _ => None,
        }
    }

    /// Class index used by the frame classifier.
    pub fn index(self) -> usize {
        match self {
            FrameLabel::Tss => 0,
            FrameLabel::Ntss => 1,
            FrameLabel::Ns => 2,
        }
    }

    pub fn from_index(i: usize) -> Option<Self> {
        match i {
            0 => Some(FrameLabel::Tss),
            1 => Some(FrameLabel::Ntss),
            2 => Some(FrameLabel::Ns),
            _ => None,
        }
    }
}

/// Geometric placement of two utterances in a mixture. Stream `a` is always
/// the target, `b` the interferer; the seeded coin flip decides who leads in
/// sparse mode.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Placement {
    pub mode: MixMode,
    pub offset_a: usize,
    pub offset_b: usize,
    pub len_a: usize,
    pub len_b: usize,
    pub mixture_len: usize,
    pub requested_ratio: f64,
}

impl Placement {
    /// Active sample span of the target stream within the mixture.
    pub fn span_a(&self) -> (usize, usize) {
        (self.offset_a, (self.offset_a + self.len_a).min(self.mixture_len))
    }

    /// Active sample span of the interferer stream.
    pub fn span_b(&self) -> (usize, usize) {
        (self.offset_b, (self.offset_b + self.len_b).min(self.mixture_len))
    }

    pub fn overlap_samples(&self) -> usize {
        let (a0, a1) = self.span_a();
        let (b0, b1) = self.span_b();
        a1.min(b1).saturating_sub(a0.max(b0))
    }

    /// Overlap duration divided by mixture length.
    pub fn realized_ratio(&self) -> f64 {
        self.overlap_samples() as f64 / self.mixture_len as f64
    }
}

/// Plans the placement of two utterances for a requested overlap ratio.
///
/// For the single-overlap sparse layout the overlap duration is
/// d = ratio * (len_a + len_b) / (1 + ratio); infeasible requests report the
/// maximum feasible ratio.
pub fn plan_overlap(
    len_a: usize,
    len_b: usize,
    ratio: f64,
    mode: MixMode,
    seed: u64,
) -> Result<Placement> {
    if len_a == 0 || len_b == 0 {
        return Err(Error::Sim("cannot place an empty utterance".into()));
    }
    if !(0.0..=1.0).contains(&ratio) {
        return Err(Error::Sim(format!("overlap ratio {ratio} outside [0, 1]")));
    }
    match mode {
        MixMode::Min => Ok(Placement {
            mode,
            offset_a: 0,
            offset_b: 0,
            len_a,
            len_b,
            mixture_len: len_a.min(len_b),
            requested_ratio: 1.0,
        }),
        MixMode::Max => Ok(Placement {
            mode,
            offset_a: 0,
            offset_b: 0,
            len_a,
            len_b,
            mixture_len: len_a.max(len_b),
            requested_ratio: ratio,
        }),
        MixMode::Sparse => {
            if ratio >= 1.0 {
                return Err(Error::Sim("sparse mode requires ratio < 1".into()));
            }
            let d_real = ratio * (len_a + len_b) as f64 / (1.0 + ratio);
            let shorter = len_a.min(len_b);
            if d_real > shorter as f64 + 0.5 {
                let max_ratio = shorter as f64 / (len_a + len_b - shorter) as f64;
                return Err(Error::Sim(format!(
                    "overlap ratio {ratio} infeasible for lengths ({len_a}, {len_b}); \
                     maximum feasible ratio is {max_ratio:.4}"
                )));
            }
            let d = (d_real.round() as usize).min(shorter);
            let mixture_len = len_a + len_b - d;
            let a_leads = rng_for(seed, "sparse-leader", 0).gen_bool(0.5);
            let (offset_a, offset_b) =
                if a_leads { (0, len_a - d) } else { (len_b - d, 0) };
            Ok(Placement {
                mode,
                offset_a,
                offset_b,
                len_a,
                len_b,
                mixture_len,
                requested_ratio: ratio,
            })
        }
    }
}

/// Frame labels from a placement: the frame-center sample decides, with
/// precedence tss > ntss > ns.
pub fn frame_labels(plan: &Placement, stride: usize) -> Vec<FrameLabel> {
    let n_frames = plan.mixture_len.div_ceil(stride);
    let (a0, a1) = plan.span_a();
    let (b0, b1) = plan.span_b();
    (0..n_frames)
        .map(|t| {
            let center = t * stride + stride / 2;
            if center >= a0 && center < a1 {
                FrameLabel::Tss
            } else if center >= b0 && center < b1 {
                FrameLabel::Ntss
            } else {
                FrameLabel::Ns
            }
        })
        .collect()
}

/// Noise mixing request for [`synthesize`].
pub struct SynthOptions<'a> {
    pub snr: Snr,
    pub noise: Option<&'a AudioSignal>,
    /// Refuse to loop a noise file shorter than the mixture.
    pub no_loop: bool,
    pub seed: u64,
}

impl Default for SynthOptions<'_> {
    fn default() -> Self {
        Self { snr: Snr::Clean, noise: None, no_loop: false, seed: 0 }
    }
}

/// All streams of a synthesized mixture, kept in f64 until quantization.
pub struct SynthesizedMixture {
    pub mixture: Vec<f64>,
    pub target: Vec<f64>,
    pub interferer: Vec<f64>,
    pub noise_scaled: Option<Vec<f64>>,
    pub labels: Vec<FrameLabel>,
    /// Joint headroom rescale applied to every stream (1.0 = none).
    pub gain: f64,
    /// (offset into the noise file, SNR gain, looped) when noise was mixed.
    pub noise_detail: Option<(usize, f64, bool)>,
}

impl SynthesizedMixture {
    pub fn mixture_signal(&self) -> Result<AudioSignal> {
        AudioSignal::new(self.mixture.iter().map(|&v| v as f32).collect(), SAMPLE_RATE)
    }

    pub fn target_signal(&self) -> Result<AudioSignal> {
        AudioSignal::new(self.target.iter().map(|&v| v as f32).collect(), SAMPLE_RATE)
    }
}

/// Places both utterances, mixes noise at the requested SNR, and applies a
/// joint headroom rescale when the mixture peaks above 0.9. Deterministic
/// given (plan, inputs, seed).
pub fn synthesize(
    plan: &Placement,
    audio_a: &AudioSignal,
    audio_b: &AudioSignal,
    opts: &SynthOptions,
) -> Result<SynthesizedMixture> {
    if audio_a.len() != plan.len_a || audio_b.len() != plan.len_b {
        return Err(Error::Sim(format!(
            "plan lengths ({}, {}) do not match audio ({}, {})",
            plan.len_a,
            plan.len_b,
            audio_a.len(),
            audio_b.len()
        )));
    }
    let n = plan.mixture_len;
    let mut target = vec![0.0f64; n];
    let mut interferer = vec![0.0f64; n];
    place(&mut target, audio_a.samples(), plan.offset_a);
    place(&mut interferer, audio_b.samples(), plan.offset_b);

    let speech: Vec<f64> = target.iter().zip(&interferer).map(|(&a, &b)| a + b).collect();

    let (noise_scaled, noise_detail) = match opts.snr {
        Snr::Clean => (None, None),
        Snr::Db(db) => {
            let noise = opts.noise.ok_or_else(|| {
                Error::Sim("an SNR was requested but no noise signal was provided".into())
            })?;
            let (crop, offset, looped) = crop_noise(noise, n, opts.no_loop, opts.seed)?;
            let speech_f32: Vec<f32> = speech.iter().map(|&v| v as f32).collect();
            let span = active_span_f32(&speech_f32)
                .ok_or_else(|| Error::Sim("mixture has zero power".into()))?;
            let p_speech = mean_power_f64(&speech, span);
            let p_noise = mean_power_f64(&crop, span);
            if p_noise <= 0.0 {
                return Err(Error::Sim("noise has zero power over the active region".into()));
            }
            let g = snr_gain(p_speech, p_noise, db);
            let scaled: Vec<f64> = crop.iter().map(|&v| g * v).collect();
            (Some(scaled), Some((offset, g, looped)))
        }
    };

    let mut mixture = speech;
    if let Some(ns) = &noise_scaled {
        for (m, &x) in mixture.iter_mut().zip(ns) {
            *m += x;
        }
    }

    // Joint headroom rescale keeps the written PCM clip-free.
    let peak = mixture.iter().fold(0.0f64, |m, &v| m.max(v.abs()));
    let gain = if peak > 0.9 { 0.9 / peak } else { 1.0 };
    if gain != 1.0 {
        for v in mixture.iter_mut() {
            *v *= gain;
        }
        for v in target.iter_mut() {
            *v *= gain;
        }
        for v in interferer.iter_mut() {
            *v *= gain;
        }
    }
    let noise_scaled = noise_scaled.map(|ns| {
        if gain != 1.0 {
            ns.into_iter().map(|v| v * gain).collect()
        } else {
            ns
        }
    });

    Ok(SynthesizedMixture {
        mixture,
        target,
        interferer,
        noise_scaled,
        labels: frame_labels(plan, FRAME_STRIDE),
        gain,
        noise_detail: noise_detail.map(|(o, g, l)| (o, g * gain, l)),
    })
}

fn place(buf: &mut [f64], samples: &[f32], offset: usize) {
    for (i, &s) in samples.iter().enumerate() {
        let pos = offset + i;
        if pos < buf.len() {
            buf[pos] += s as f64;
        }
    }
}

fn crop_noise(
    noise: &AudioSignal,
    len: usize,
    no_loop: bool,
    seed: u64,
) -> Result<(Vec<f64>, usize, bool)> {
    let ns = noise.samples();
    if ns.len() >= len {
        let slack = ns.len() - len;
        let offset =
            if slack == 0 { 0 } else { rng_for(seed, "noise-crop", 0).gen_range(0..=slack) };
        Ok((ns[offset..offset + len].iter().map(|&v| v as f64).collect(), offset, false))
    } else if no_loop {
        Err(Error::Sim(format!(
            "noise ({} samples) shorter than mixture ({len}) and looping is disabled",
            ns.len()
        )))
    } else {
        let offset = rng_for(seed, "noise-loop", 0).gen_range(0..ns.len());
        let out: Vec<f64> =
            (0..len).map(|i| ns[(offset + i) % ns.len()] as f64).collect();
        Ok((out, offset, true))
    }
}

fn active_span_f32(samples: &[f32]) -> Option<(usize, usize)> {
    let peak = samples.iter().fold(0.0f32, |m, &x| m.max(x.abs()));
    if peak <= 0.0 {
        return None;
    }
    let thresh = peak * 1e-4;
    let first = samples.iter().position(|&x| x.abs() > thresh)?;
    let last = samples.iter().rposition(|&x| x.abs() > thresh)?;
    Some((first, last + 1))
}

fn mean_power_f64(samples: &[f64], span: (usize, usize)) -> f64 {
    let (a, b) = span;
    let n = (b - a).max(1) as f64;
    samples[a..b].iter().map(|&x| x * x).sum::<f64>() / n
}

// --- corpus indexing and enrollment -------------------------------------------

/// One utterance in a speaker-labeled corpus.
#[derive(Clone, Debug)]
pub struct UttEntry {
    pub speaker: String,
    pub path: PathBuf,
    pub samples: usize,
    pub transcript: Option<String>,
}

/// Speaker-indexed table of WAV files under a corpus directory.
///
/// Speaker ids come from the parent directory name for nested layouts
/// (`corpus/<speaker>/<utt>.wav`) or from the filename prefix before the
/// first underscore for flat layouts (`corpus/<speaker>_<utt>.wav`).
#[derive(Clone, Debug)]
pub struct CorpusIndex {
    entries: Vec<UttEntry>,
    speakers: Vec<String>,
}

impl CorpusIndex {
    pub fn scan(dir: &Path) -> Result<Self> {
        let mut wavs = Vec::new();
        walk_wavs(dir, &mut wavs)?;
        wavs.sort();
        if wavs.is_empty() {
            return Err(Error::Sim(format!("no WAV files under {}", dir.display())));
        }
        let mut entries = Vec::with_capacity(wavs.len());
        for path in wavs {
            let speaker = speaker_of(dir, &path)?;
            let samples = read_wav(&path)?.len();
            let txt = path.with_extension("txt");
            let transcript = if txt.exists() {
                Some(std::fs::read_to_string(&txt)?.trim().to_string())
            } else {
                None
            };
            entries.push(UttEntry { speaker, path, samples, transcript });
        }
        let mut speakers: Vec<String> = entries.iter().map(|e| e.speaker.clone()).collect();
        speakers.sort();
        speakers.dedup();
        Ok(Self { entries, speakers })
    }

    pub fn entries(&self) -> &[UttEntry] {
        &self.entries
    }

    pub fn speakers(&self) -> &[String] {
        &self.speakers
    }

    pub fn utterances_of(&self, speaker: &str) -> Vec<usize> {
        self.entries
            .iter()
            .enumerate()
            .filter(|(_, e)| e.speaker == speaker)
            .map(|(i, _)| i)
            .collect()
    }
}

fn walk_wavs(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    for entry in std::fs::read_dir(dir)? {
        let entry = entry?;
        let path = entry.path();
        if path.is_dir() {
            walk_wavs(&path, out)?;
        } else if path.extension().map(|e| e == "wav").unwrap_or(false) {
            out.push(path);
        }
    }
    Ok(())
}

fn speaker_of(root: &Path, path: &Path) -> Result<String> {
    let parent = path.parent().unwrap_or(root);
    if parent != root {
        return Ok(parent
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| "unknown".into()));
    }
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    match stem.split_once('_') {
        Some((spk, _)) => Ok(spk.to_string()),
        None => Err(Error::Sim(format!(
            "cannot derive a speaker id from flat file {:?}; use <speaker>_<utt>.wav or \
             a per-speaker subdirectory",
            path.file_name().unwrap_or_default()
        ))),
    }
}

/// Picks a seeded-random enrollment utterance: same speaker as the target,
/// never the target utterance itself, at least `min_len_secs` long.
pub fn pair_enrollment(
    index: &CorpusIndex,
    target_utt: usize,
    min_len_secs: f64,
    seed: u64,
) -> Result<usize> {
    let target = &index.entries()[target_utt];
    let min_samples = (min_len_secs * SAMPLE_RATE as f64).round() as usize;
    let mut candidates: Vec<usize> = index
        .utterances_of(&target.speaker)
        .into_iter()
        .filter(|&i| i != target_utt && index.entries()[i].samples >= min_samples)
        .collect();
    candidates.sort();
    if candidates.is_empty() {
        return Err(Error::Sim(format!(
            "no eligible enrollment utterance for speaker {:?} (>= {min_len_secs} s, \
             excluding the target utterance)",
            target.speaker
        )));
    }
    let pick = rng_for(seed, "enrollment", 0).gen_range(0..candidates.len());
    Ok(candidates[pick])
}

// --- corpus generation ---------------------------------------------------------

/// Corpus generation settings.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    pub corpus_dir: PathBuf,
    #[serde(default)]
    pub noise_dir: Option<PathBuf>,
    pub out_dir: PathBuf,
    pub n_mixtures: usize,
    pub mode: MixMode,
    #[serde(default)]
    pub overlap_min: f64,
    #[serde(default = "default_overlap_max")]
    pub overlap_max: f64,
    /// Noise SNR range in dB; both None means clean mixtures.
    #[serde(default)]
    pub snr_min: Option<f64>,
    #[serde(default)]
    pub snr_max: Option<f64>,
    #[serde(default = "default_min_enroll_secs")]
    pub min_enroll_secs: f64,
    #[serde(default)]
    pub no_loop: bool,
    pub seed: u64,
}

fn default_overlap_max() -> f64 {
    0.4
}

fn default_min_enroll_secs() -> f64 {
    1.0
}

/// Builds `n_mixtures` records, writes all WAVs plus `manifest.jsonl` under
/// the output directory, and returns the loaded-back manifest.
///
/// Generation is parallel over records; each record's randomness derives
/// solely from (seed, record index), so parallel and serial runs produce
/// identical corpora.
pub fn build_corpus(cfg: &SimConfig) -> Result<Manifest> {
    if cfg.overlap_min > cfg.overlap_max {
        return Err(Error::Sim("overlap_min above overlap_max".into()));
    }
    let index = CorpusIndex::scan(&cfg.corpus_dir)?;
    if index.speakers().len() < 2 {
        return Err(Error::Sim(format!(
            "need at least 2 speakers, found {}",
            index.speakers().len()
        )));
    }
    let noise_files: Vec<PathBuf> = match &cfg.noise_dir {
        Some(dir) => {
            let mut v = Vec::new();
            walk_wavs(dir, &mut v)?;
            v.sort();
            if v.is_empty() {
                return Err(Error::Sim(format!("no noise WAVs under {}", dir.display())));
            }
            v
        }
        None => Vec::new(),
    };
    let noisy = cfg.snr_min.is_some() || cfg.snr_max.is_some();
    if noisy && noise_files.is_empty() {
        return Err(Error::Sim("an SNR range was given but no noise directory".into()));
    }
    let audio_dir = cfg.out_dir.join("audio");
    std::fs::create_dir_all(&audio_dir)?;

    let records: Result<Vec<Record>> = (0..cfg.n_mixtures)
        .into_par_iter()
        .map(|i| build_record(cfg, &index, &noise_files, noisy, i, &audio_dir))
        .collect();
    let records = records?;
    let manifest = Manifest::new(records, cfg.out_dir.clone());
    let manifest_path = cfg.out_dir.join("manifest.jsonl");
    manifest.save(&manifest_path)?;
    Manifest::load(&manifest_path)
}

fn build_record(
    cfg: &SimConfig,
    index: &CorpusIndex,
    noise_files: &[PathBuf],
    noisy: bool,
    i: usize,
    audio_dir: &Path,
) -> Result<Record> {
    let mut rng = rng_for(cfg.seed, "record", i as u64);
    let record_seed = mix_seed(cfg.seed, "record-streams", i as u64);
    const ATTEMPTS: usize = 100;
    let mut last_err: Option<Error> = None;
    for _attempt in 0..ATTEMPTS {
        // Draw speakers, utterances and the plan; infeasible draws retry.
        let spk_a = index.speakers().choose(&mut rng).unwrap().clone();
        let spk_b = loop {
            let s = index.speakers().choose(&mut rng).unwrap().clone();
            if s != spk_a {
                break s;
            }
        };
        let utts_a = index.utterances_of(&spk_a);
        let utts_b = index.utterances_of(&spk_b);
        let utt_a = *utts_a.choose(&mut rng).unwrap();
        let utt_b = *utts_b.choose(&mut rng).unwrap();
        let ratio = if cfg.overlap_max > cfg.overlap_min {
            rng.gen_range(cfg.overlap_min..=cfg.overlap_max)
        } else {
            cfg.overlap_min
        };
        let len_a = index.entries()[utt_a].samples;
        let len_b = index.entries()[utt_b].samples;
        let plan = match plan_overlap(len_a, len_b, ratio, cfg.mode, record_seed) {
            Ok(p) => p,
            Err(e) => {
                last_err = Some(e);
                continue;
            }
        };
        let enroll = match pair_enrollment(index, utt_a, cfg.min_enroll_secs, record_seed) {
            Ok(e) => e,
            Err(e) => {
                last_err = Some(e);
                continue;
            }
        };
        let snr = if noisy {
            let lo = cfg.snr_min.unwrap_or_else(|| cfg.snr_max.unwrap());
            let hi = cfg.snr_max.unwrap_or(lo);
            Snr::Db(if hi > lo { rng.gen_range(lo..=hi) } else { lo })
        } else {
            Snr::Clean
        };
        let noise_path = if noisy {
            Some(noise_files[rng.gen_range(0..noise_files.len())].clone())
        } else {
            None
        };
        let audio_a = read_wav(&index.entries()[utt_a].path)?;
        let audio_b = read_wav(&index.entries()[utt_b].path)?;
        let noise_audio = noise_path.as_deref().map(read_wav).transpose()?;
        let opts = SynthOptions {
            snr,
            noise: noise_audio.as_ref(),
            no_loop: cfg.no_loop,
            seed: record_seed,
        };
        let synth = match synthesize(&plan, &audio_a, &audio_b, &opts) {
            Ok(s) => s,
            Err(e) => {
                last_err = Some(e);
                continue;
            }
        };
        let id = format!("{}_{i:05}", cfg.mode);
        let mix_rel = format!("audio/{id}.mix.wav");
        let tgt_rel = format!("audio/{id}.target.wav");
        let enr_rel = format!("audio/{id}.enroll.wav");
        write_wav(&audio_dir.join(format!("{id}.mix.wav")), &synth.mixture_signal()?)?;
        write_wav(&audio_dir.join(format!("{id}.target.wav")), &synth.target_signal()?)?;
        let enroll_audio = read_wav(&index.entries()[enroll].path)?;
        write_wav(&audio_dir.join(format!("{id}.enroll.wav")), &enroll_audio)?;
        let noise = synth.noise_detail.map(|(offset, gain, looped)| NoiseInfo {
            path: noise_path.as_ref().unwrap().to_string_lossy().into_owned(),
            offset,
            gain,
            looped,
        });
        return Ok(Record {
            id,
            mixture: mix_rel,
            target: tgt_rel,
            enrollment: enr_rel,
            speaker: spk_a,
            interferer_speaker: spk_b,
            labels: encode_labels(&synth.labels),
            snr_db: snr,
            overlap_ratio: plan.requested_ratio,
            offsets: Offsets { a: plan.offset_a, b: plan.offset_b },
            mode: cfg.mode,
            transcript: index.entries()[utt_a].transcript.clone(),
            lengths: Lengths { a: plan.len_a, b: plan.len_b },
            gain: synth.gain,
            noise,
        });
    }
    Err(Error::Sim(format!(
        "record {i}: no feasible draw after {ATTEMPTS} attempts (last: {})",
        last_err.map(|e| e.to_string()).unwrap_or_else(|| "unknown".into())
    )))
}

/// Rebuilds the placement recorded in a manifest record.
pub fn placement_of(rec: &Record) -> Result<Placement> {
    let mixture_len = match rec.mode {
        MixMode::Min => rec.lengths.a.min(rec.lengths.b),
        MixMode::Max => rec.lengths.a.max(rec.lengths.b),
        MixMode::Sparse => {
            // offsets encode the overlap: total footprint of both streams
            (rec.offsets.a + rec.lengths.a).max(rec.offsets.b + rec.lengths.b)
        }
    };
    Ok(Placement {
        mode: rec.mode,
        offset_a: rec.offsets.a,
        offset_b: rec.offsets.b,
        len_a: rec.lengths.a,
        len_b: rec.lengths.b,
        mixture_len,
        requested_ratio: rec.overlap_ratio,
    })
}
