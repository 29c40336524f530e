//! Task evaluation over manifests: word error rate, frame-level average
//! precision, signal metrics per overlap condition, and the aggregated
//! metric report.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::audio::{write_wav, AudioSignal, SAMPLE_RATE};
use crate::autograd::Real;
use crate::error::{Error, Result};
use crate::metrics::{failure_rate, si_sdr, stoi};
use crate::model::{SubTask, Task, TrainItem, TsModel};
use crate::sim::{FrameLabel, Manifest};

// --- word error rate -----------------------------------------------------------

/// Word-level Levenshtein distance with unit costs.
pub fn word_edit_distance(reference: &[&str], hypothesis: &[&str]) -> usize {
    if reference.is_empty() {
        return hypothesis.len();
    }
    if hypothesis.is_empty() {
        return reference.len();
    }
    let m = reference.len();
    let mut prev: Vec<usize> = (0..=m).collect();
    let mut curr = vec![0usize; m + 1];
    for (i, h) in hypothesis.iter().enumerate() {
        curr[0] = i + 1;
        for (j, r) in reference.iter().enumerate() {
            let cost = usize::from(h != r);
            curr[j + 1] = (prev[j] + cost).min(prev[j + 1] + 1).min(curr[j] + 1);
        }
        std::mem::swap(&mut prev, &mut curr);
    }
    prev[m]
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WerCounts {
    pub edits: usize,
    pub ref_words: usize,
}

#[derive(Clone, Debug)]
pub struct WerOutcome {
    /// Corpus WER: pooled edits over pooled reference words.
    pub wer: f64,
    pub edits: usize,
    pub ref_words: usize,
    pub per_utt: Vec<WerCounts>,
}

/// Corpus word error rate. Tokenization splits on whitespace, so repeated
/// spaces collapse.
pub fn wer(refs: &[String], hyps: &[String]) -> Result<WerOutcome> {
    if refs.len() != hyps.len() {
        return Err(Error::Eval(format!(
            "wer needs matched lists, got {} refs and {} hyps",
            refs.len(),
            hyps.len()
        )));
    }
    let mut edits = 0usize;
    let mut ref_words = 0usize;
    let mut per_utt = Vec::with_capacity(refs.len());
    for (r, h) in refs.iter().zip(hyps) {
        let rt: Vec<&str> = r.split_whitespace().collect();
        let ht: Vec<&str> = h.split_whitespace().collect();
        let e = word_edit_distance(&rt, &ht);
        per_utt.push(WerCounts { edits: e, ref_words: rt.len() });
        edits += e;
        ref_words += rt.len();
    }
    if ref_words == 0 {
        return Err(Error::Eval("wer reference corpus is empty".into()));
    }
    Ok(WerOutcome { wer: edits as f64 / ref_words as f64, edits, ref_words, per_utt })
}

// --- average precision ----------------------------------------------------------

/// Average precision with all-points step integration. Frames are ranked by
/// descending score with a stable sort, so ties keep their original order.
pub fn average_precision(scores: &[f64], positive: &[bool]) -> Result<f64> {
    if scores.len() != positive.len() {
        return Err(Error::Eval("average_precision length mismatch".into()));
    }
    let total_pos = positive.iter().filter(|&&p| p).count();
    if total_pos == 0 {
        return Err(Error::Eval("average_precision has no positive frames".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap_or(std::cmp::Ordering::Equal));
    let mut tp = 0usize;
    let mut ap = 0.0;
    for (rank0, &idx) in order.iter().enumerate() {
        if positive[idx] {
            tp += 1;
            ap += tp as f64 / (rank0 + 1) as f64;
        }
    }
    Ok(ap / total_pos as f64)
}

/// Per-class APs over pooled frames; classes without positives are skipped.
#[derive(Clone, Copy, Debug, Default)]
pub struct ApSet {
    /// Indexed by [`FrameLabel::index`]: tss, ntss, ns.
    pub per_class: [Option<f64>; 3],
}

impl ApSet {
    /// Mean AP over the classes that have positives.
    pub fn map(&self) -> Option<f64> {
        let defined: Vec<f64> = self.per_class.iter().flatten().copied().collect();
        if defined.is_empty() {
            None
        } else {
            Some(defined.iter().sum::<f64>() / defined.len() as f64)
        }
    }

    pub fn m_tss(&self) -> Option<f64> {
        self.per_class[0]
    }
}

/// APs of the three frame classes from posterior rows and labels.
pub fn pvad_average_precisions(rows: &[[f64; 3]], labels: &[FrameLabel]) -> Result<ApSet> {
    if rows.len() != labels.len() {
        return Err(Error::Eval(format!(
            "{} posterior rows vs {} labels",
            rows.len(),
            labels.len()
        )));
    }
    let mut set = ApSet::default();
    for cls in 0..3 {
        let scores: Vec<f64> = rows.iter().map(|r| r[cls]).collect();
        let positive: Vec<bool> = labels.iter().map(|l| l.index() == cls).collect();
        if positive.iter().any(|&p| p) {
            set.per_class[cls] = Some(average_precision(&scores, &positive)?);
        }
    }
    Ok(set)
}

// --- metric report ---------------------------------------------------------------

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ReportRow {
    pub id: String,
    pub overlap: f64,
    pub metrics: BTreeMap<String, f64>,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize, PartialEq)]
pub struct AggGroup {
    pub count: usize,
    /// Per-metric means over the rows that carry the metric.
    pub means: BTreeMap<String, f64>,
    /// Failure rate (percent of rows with si_sdri < 1 dB), when applicable.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub fr: Option<f64>,
    /// Pooled corpus metrics (wer over pooled counts, map/m_tss over pooled
    /// frames) that are not plain row means.
    #[serde(default)]
    pub pooled: BTreeMap<String, f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ReportMeta {
    pub seed: u64,
    pub config_hash: String,
    /// Failure-rate convention: computed over SI-SDRi with a strict < 1 dB
    /// test, per the toolkit's reading of the failure-rate definition.
    pub fr_definition: String,
    pub ap_integration: String,
    pub decode: String,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct MetricReport {
    pub task: Task,
    pub checkpoint_id: String,
    pub rows: Vec<ReportRow>,
    pub overall: AggGroup,
    /// Keyed by overlap condition ("0.00", "0.20", "0.40", "0.60", ...).
    pub by_overlap: BTreeMap<String, AggGroup>,
    pub metadata: ReportMeta,
}

impl MetricReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(json: &str) -> Result<Self> {
        Ok(serde_json::from_str(json)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    /// Recomputes every row-derivable aggregate (means, counts, failure
    /// rate, pooled WER) and compares against the stored values: exact for
    /// counts, 1e-9 for means.
    pub fn validate(&self) -> Result<()> {
        let mut groups: BTreeMap<Option<String>, Vec<&ReportRow>> = BTreeMap::new();
        for row in &self.rows {
            groups.entry(None).or_default().push(row);
            groups.entry(Some(condition_key(row.overlap))).or_default().push(row);
        }
        for (key, agg) in std::iter::once((None, &self.overall))
            .chain(self.by_overlap.iter().map(|(k, v)| (Some(k.clone()), v)))
        {
            let rows = groups.get(&key).cloned().unwrap_or_default();
            if rows.len() != agg.count {
                return Err(Error::Eval(format!(
                    "group {key:?}: stored count {} but {} rows",
                    agg.count,
                    rows.len()
                )));
            }
            for (metric, &stored) in &agg.means {
                let vals: Vec<f64> =
                    rows.iter().filter_map(|r| r.metrics.get(metric)).copied().collect();
                if vals.is_empty() {
                    return Err(Error::Eval(format!("group {key:?}: mean of absent {metric}")));
                }
                let mean = vals.iter().sum::<f64>() / vals.len() as f64;
                if (mean - stored).abs() > 1e-9 {
                    return Err(Error::Eval(format!(
                        "group {key:?}: {metric} mean {stored} != recomputed {mean}"
                    )));
                }
            }
            if let Some(stored_fr) = agg.fr {
                let vals: Vec<f64> =
                    rows.iter().filter_map(|r| r.metrics.get("si_sdri")).copied().collect();
                let fr = failure_rate(&vals)?;
                if (fr - stored_fr).abs() > 1e-9 {
                    return Err(Error::Eval(format!(
                        "group {key:?}: fr {stored_fr} != recomputed {fr}"
                    )));
                }
            }
            if let Some(&stored_wer) = agg.pooled.get("wer") {
                let edits: f64 = rows.iter().filter_map(|r| r.metrics.get("wer_edits")).sum();
                let words: f64 = rows.iter().filter_map(|r| r.metrics.get("wer_ref_words")).sum();
                if words > 0.0 {
                    let wer = edits / words;
                    if (wer - stored_wer).abs() > 1e-9 {
                        return Err(Error::Eval(format!(
                            "group {key:?}: pooled wer {stored_wer} != recomputed {wer}"
                        )));
                    }
                }
            }
        }
        Ok(())
    }
}

/// Snaps an overlap ratio onto the reporting conditions {0, 0.2, 0.4, 0.6}
/// when within 0.05; otherwise the ratio itself names the group.
pub fn condition_key(overlap: f64) -> String {
    for cond in [0.0, 0.2, 0.4, 0.6] {
        if (overlap - cond).abs() <= 0.05 {
            return format!("{cond:.2}");
        }
    }
    format!("{overlap:.2}")
}

// --- scoring ---------------------------------------------------------------------

/// Model surface the harness drives; implemented by [`TsModel`] and by test
/// stubs (oracle models).
pub trait TaskScorer {
    fn extract(&self, item: &TrainItem) -> Result<Vec<f32>> {
        let _ = item;
        Err(Error::Eval("this scorer has no waveform head".into()))
    }
    fn posteriors(&self, item: &TrainItem) -> Result<Vec<[f64; 3]>> {
        let _ = item;
        Err(Error::Eval("this scorer has no frame classifier".into()))
    }
    fn transcribe(&self, item: &TrainItem) -> Result<String> {
        let _ = item;
        Err(Error::Eval("this scorer has no transcription head".into()))
    }
}

impl<F: Real> TaskScorer for TsModel<F> {
    fn extract(&self, item: &TrainItem) -> Result<Vec<f32>> {
        self.extract_wave(&item.mixture, &item.enrollment)
    }

    fn posteriors(&self, item: &TrainItem) -> Result<Vec<[f64; 3]>> {
        self.frame_posteriors(&item.mixture, &item.enrollment)
    }

    fn transcribe(&self, item: &TrainItem) -> Result<String> {
        self.transcribe(&item.mixture, &item.enrollment, None)
    }
}

#[derive(Clone, Debug, Default)]
pub struct EvalOptions {
    pub checkpoint_id: String,
    pub seed: u64,
    pub config_hash: String,
    /// External PESQ hook: a command invoked as `cmd ref.wav est.wav` whose
    /// stdout starts with the score. PESQ itself is out of scope.
    pub pesq_command: Option<String>,
}

/// Evaluates a scorer over a manifest with the task's metric battery,
/// grouping rows by overlap condition.
pub fn evaluate(
    task: Task,
    manifest: &Manifest,
    scorer: &dyn TaskScorer,
    opts: &EvalOptions,
) -> Result<MetricReport> {
    if task.is_joint() {
        return Err(Error::Eval(format!(
            "evaluate one side of the joint task {task} (tse, pse, pvad or tsasr)"
        )));
    }
    if manifest.is_empty() {
        return Err(Error::Eval("empty manifest".into()));
    }
    let battery = task.subtasks().0;
    if battery == SubTask::TsAsr {
        let missing = manifest.records().iter().find(|r| r.transcript.is_none());
        if let Some(r) = missing {
            return Err(Error::Eval(format!(
                "record {:?} has no transcript; cannot evaluate tsasr",
                r.id
            )));
        }
    }
    let mut rows = Vec::with_capacity(manifest.len());
    // Pooled PVAD frames per group key (plus overall under None).
    let mut pooled_frames: BTreeMap<Option<String>, (Vec<[f64; 3]>, Vec<FrameLabel>)> =
        BTreeMap::new();
    for rec in manifest.records() {
        let item = crate::model::load_item(manifest, rec, battery == SubTask::TsAsr)?;
        let mut metrics = BTreeMap::new();
        match battery {
            SubTask::Tse | SubTask::Pse => {
                let est = scorer.extract(&item)?;
                let est_sig = AudioSignal::new(est, SAMPLE_RATE)?;
                let ref_sig = AudioSignal::new(item.target.clone(), SAMPLE_RATE)?;
                let mix_sig = AudioSignal::new(item.mixture.clone(), SAMPLE_RATE)?;
                let sdr_est = si_sdr(&est_sig, &ref_sig)?;
                let sdr_mix = si_sdr(&mix_sig, &ref_sig)?;
                metrics.insert("si_sdr".into(), sdr_est);
                metrics.insert("si_sdri".into(), sdr_est - sdr_mix);
                match stoi(&est_sig, &ref_sig) {
                    Ok(v) => {
                        metrics.insert("stoi".into(), v);
                    }
                    Err(e) => log::debug!("stoi skipped for {}: {e}", rec.id),
                }
                if let Some(cmd) = &opts.pesq_command {
                    let v = pesq_hook(cmd, manifest, &rec.target, &est_sig)?;
                    metrics.insert("pesq".into(), v);
                }
            }
            SubTask::Pvad => {
                let post = scorer.posteriors(&item)?;
                let set = pvad_average_precisions(&post, &item.labels)?;
                if let Some(v) = set.m_tss() {
                    metrics.insert("ap_tss".into(), v);
                }
                if let Some(v) = set.per_class[1] {
                    metrics.insert("ap_ntss".into(), v);
                }
                if let Some(v) = set.per_class[2] {
                    metrics.insert("ap_ns".into(), v);
                }
                if let Some(v) = set.map() {
                    metrics.insert("map".into(), v);
                }
                let key = Some(condition_key(rec.overlap_ratio));
                for k in [None, key] {
                    let slot = pooled_frames.entry(k).or_default();
                    slot.0.extend_from_slice(&post);
                    slot.1.extend_from_slice(&item.labels);
                }
            }
            SubTask::TsAsr => {
                let hyp = scorer.transcribe(&item)?;
                let reference = item.transcript.clone().unwrap_or_default();
                let out = wer(&[reference], &[hyp.clone()])?;
                metrics.insert("wer".into(), out.wer);
                metrics.insert("wer_edits".into(), out.edits as f64);
                metrics.insert("wer_ref_words".into(), out.ref_words as f64);
            }
        }
        rows.push(ReportRow { id: rec.id.clone(), overlap: rec.overlap_ratio, metrics });
    }

    let mut by_overlap = BTreeMap::new();
    let overall = aggregate(&rows, None, &pooled_frames)?;
    let keys: std::collections::BTreeSet<String> =
        rows.iter().map(|r| condition_key(r.overlap)).collect();
    for key in keys {
        let agg = aggregate(&rows, Some(&key), &pooled_frames)?;
        by_overlap.insert(key, agg);
    }
    let report = MetricReport {
        task,
        checkpoint_id: opts.checkpoint_id.clone(),
        rows,
        overall,
        by_overlap,
        metadata: ReportMeta {
            seed: opts.seed,
            config_hash: opts.config_hash.clone(),
            fr_definition: "percent of rows with si_sdri strictly below 1 dB".into(),
            ap_integration: "all-points step integration, frames pooled corpus-wide".into(),
            decode: "ctc greedy".into(),
        },
    };
    report.validate()?;
    Ok(report)
}

fn aggregate(
    rows: &[ReportRow],
    key: Option<&str>,
    pooled_frames: &BTreeMap<Option<String>, (Vec<[f64; 3]>, Vec<FrameLabel>)>,
) -> Result<AggGroup> {
    let selected: Vec<&ReportRow> = rows
        .iter()
        .filter(|r| key.is_none_or(|k| condition_key(r.overlap) == k))
        .collect();
    let mut means: BTreeMap<String, f64> = BTreeMap::new();
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    for row in &selected {
        for (m, v) in &row.metrics {
            *means.entry(m.clone()).or_default() += v;
            *counts.entry(m.clone()).or_default() += 1;
        }
    }
    for (m, c) in &counts {
        *means.get_mut(m).unwrap() /= *c as f64;
    }
    let fr = {
        let vals: Vec<f64> =
            selected.iter().filter_map(|r| r.metrics.get("si_sdri")).copied().collect();
        if vals.is_empty() { None } else { Some(failure_rate(&vals)?) }
    };
    let mut pooled = BTreeMap::new();
    let edits: f64 = selected.iter().filter_map(|r| r.metrics.get("wer_edits")).sum();
    let words: f64 = selected.iter().filter_map(|r| r.metrics.get("wer_ref_words")).sum();
    if words > 0.0 {
        pooled.insert("wer".into(), edits / words);
    }
    if let Some((frames, labels)) = pooled_frames.get(&key.map(|s| s.to_string())) {
        let set = pvad_average_precisions(frames, labels)?;
        if let Some(v) = set.map() {
            pooled.insert("map".into(), v);
        }
        if let Some(v) = set.m_tss() {
            pooled.insert("m_tss".into(), v);
        }
    }
    Ok(AggGroup { count: selected.len(), means, fr, pooled })
}

fn pesq_hook(
    cmd: &str,
    manifest: &Manifest,
    target_rel: &str,
    est: &AudioSignal,
) -> Result<f64> {
    let dir = std::env::temp_dir();
    let est_path = dir.join(format!("tsb_pesq_{}.wav", std::process::id()));
    write_wav(&est_path, est)?;
    let ref_path = manifest.resolve(target_rel);
    let out = std::process::Command::new(cmd)
        .arg(&ref_path)
        .arg(&est_path)
        .output()
        .map_err(|e| Error::Eval(format!("pesq hook {cmd:?}: {e}")))?;
    let _ = std::fs::remove_file(&est_path);
    if !out.status.success() {
        return Err(Error::Eval(format!("pesq hook exited with {}", out.status)));
    }
    let text = String::from_utf8_lossy(&out.stdout);
    text.split_whitespace()
        .next()
        .and_then(|t| t.parse::<f64>().ok())
        .ok_or_else(|| Error::Eval(format!("pesq hook output not a number: {text:?}")))
}
