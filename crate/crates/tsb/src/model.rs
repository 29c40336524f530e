//! Task models: the shared target speech encoder plus per-task heads, with
//! loss-graph construction, inference helpers and checkpoint I/O.

use serde::{Deserialize, Serialize};

use crate::autograd::{Real, Tape, TensorData, Var};
use crate::encoder::{EncoderConfig, TargetEncoder};
use crate::error::{Error, Result};
use crate::heads;
use crate::params::{bind, Binding, ParamSet};
use crate::sim::{decode_labels, FrameLabel, Manifest, Record};
use crate::upstream::{LayerStack, ToyUpstream, UpstreamConfig};

/// Trainable task selection; joint tasks share the target speech encoder and
/// combine two head losses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Task {
    #[serde(rename = "tse")]
    Tse,
    #[serde(rename = "pse")]
    Pse,
    #[serde(rename = "pvad")]
    Pvad,
    #[serde(rename = "tsasr")]
    TsAsr,
    #[serde(rename = "tse+tsasr")]
    TseTsasr,
    #[serde(rename = "pse+pvad")]
    PsePvad,
}

impl std::fmt::Display for Task {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Task::Tse => "tse",
            Task::Pse => "pse",
            Task::Pvad => "pvad",
            Task::TsAsr => "tsasr",
            Task::TseTsasr => "tse+tsasr",
            Task::PsePvad => "pse+pvad",
        };
        f.write_str(s)
    }
}

impl std::str::FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tse" => Ok(Task::Tse),
            "pse" => Ok(Task::Pse),
            "pvad" => Ok(Task::Pvad),
            "tsasr" => Ok(Task::TsAsr),
            "tse+tsasr" => Ok(Task::TseTsasr),
            "pse+pvad" => Ok(Task::PsePvad),
            other => Err(Error::Usage(format!(
                "unknown task {other:?} (want tse, pse, pvad, tsasr, tse+tsasr or pse+pvad)"
            ))),
        }
    }
}

/// Atomic heads.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SubTask {
    Tse,
    Pse,
    Pvad,
    TsAsr,
}

impl SubTask {
    pub fn head_prefix(self) -> &'static str {
        match self {
            SubTask::Tse => "head.tse",
            SubTask::Pse => "head.pse",
            SubTask::Pvad => "head.pvad",
            SubTask::TsAsr => "head.tsasr",
        }
    }
}

impl Task {
    /// The task's subtask pair: (primary i, optional secondary j).
    pub fn subtasks(self) -> (SubTask, Option<SubTask>) {
        match self {
            Task::Tse => (SubTask::Tse, None),
            Task::Pse => (SubTask::Pse, None),
            Task::Pvad => (SubTask::Pvad, None),
            Task::TsAsr => (SubTask::TsAsr, None),
            Task::TseTsasr => (SubTask::Tse, Some(SubTask::TsAsr)),
            Task::PsePvad => (SubTask::Pse, Some(SubTask::Pvad)),
        }
    }

    pub fn is_joint(self) -> bool {
        self.subtasks().1.is_some()
    }

    /// Recurrent hidden size default: 512, except standalone frame
    /// classification which uses 32.
    pub fn default_hidden(self) -> usize {
        match self {
            Task::Pvad => 32,
            _ => 512,
        }
    }

    pub fn needs_transcripts(self) -> bool {
        matches!(self, Task::TsAsr | Task::TseTsasr)
    }
}

/// Full model geometry.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub upstream: UpstreamConfig,
    pub encoder: EncoderConfig,
    /// Hidden size of the transcription head's recurrent layer.
    pub asr_hidden: usize,
}

impl ModelConfig {
    pub fn for_task(task: Task) -> Self {
        Self {
            upstream: UpstreamConfig::default(),
            encoder: EncoderConfig { hidden: task.default_hidden(), ..EncoderConfig::default() },
            asr_hidden: 512,
        }
    }
}

/// One training/evaluation item, fully in memory.
#[derive(Clone, Debug)]
pub struct TrainItem {
    pub id: String,
    pub mixture: Vec<f32>,
    pub target: Vec<f32>,
    pub enrollment: Vec<f32>,
    pub labels: Vec<FrameLabel>,
    pub tokens: Option<Vec<usize>>,
    pub transcript: Option<String>,
}

/// Loads manifest records into memory, decoding labels and transcripts.
pub fn load_train_items(manifest: &Manifest, needs_transcripts: bool) -> Result<Vec<TrainItem>> {
    manifest.records().iter().map(|r| load_item(manifest, r, needs_transcripts)).collect()
}

pub fn load_item(manifest: &Manifest, rec: &Record, needs_transcripts: bool) -> Result<TrainItem> {
    let mixture = crate::audio::read_wav(&manifest.resolve(&rec.mixture))?.into_samples();
    let target = crate::audio::read_wav(&manifest.resolve(&rec.target))?.into_samples();
    let enrollment = crate::audio::read_wav(&manifest.resolve(&rec.enrollment))?.into_samples();
    let labels = decode_labels(&rec.labels)?;
    let tokens = match (&rec.transcript, needs_transcripts) {
        (Some(t), _) => Some(heads::encode_text(t)?),
        (None, false) => None,
        (None, true) => {
            return Err(Error::Manifest(format!(
                "record {:?} has no transcript but the task needs one",
                rec.id
            )))
        }
    };
    Ok(TrainItem {
        id: rec.id.clone(),
        mixture,
        target,
        enrollment,
        labels,
        tokens,
        transcript: rec.transcript.clone(),
    })
}

/// Cached frozen-upstream stacks for one item.
#[derive(Clone)]
pub struct CachedStacks<F> {
    pub mixture: LayerStack<F>,
    pub enrollment: LayerStack<F>,
}

/// Loss nodes of one item's forward pass.
pub struct LossGraph {
    pub total: Var,
    pub loss_i: Var,
    pub loss_j: Option<Var>,
}

/// A task model: parameter set plus the builders wiring upstream, encoder
/// and heads onto a tape.
pub struct TsModel<F: Real> {
    task: Task,
    cfg: ModelConfig,
    seed: u64,
    pub params: ParamSet<F>,
    upstream: ToyUpstream,
    encoder: TargetEncoder,
}

impl<F: Real> TsModel<F> {
    /// Builds a freshly initialized model. Every parameter tensor's values
    /// derive from (seed, tensor name) alone, so shared tensors agree across
    /// task variants with the same seed.
    pub fn new(task: Task, cfg: ModelConfig, seed: u64) -> Self {
        let upstream = ToyUpstream::new(cfg.upstream);
        let encoder = TargetEncoder::new(cfg.encoder, cfg.upstream.layers, cfg.upstream.dim);
        let mut params = ParamSet::new();
        upstream.init_params(&mut params);
        encoder.init_params(&mut params, seed);
        let h2 = 2 * cfg.encoder.hidden;
        let (i, j) = task.subtasks();
        for sub in std::iter::once(i).chain(j) {
            match sub {
                SubTask::Tse | SubTask::Pse => {
                    heads::init_mask_head(&mut params, sub.head_prefix(), h2, seed)
                }
                SubTask::Pvad => heads::init_pvad_head(&mut params, sub.head_prefix(), h2, seed),
                SubTask::TsAsr => {
                    heads::init_asr_head(&mut params, sub.head_prefix(), h2, cfg.asr_hidden, seed)
                }
            }
        }
        Self { task, cfg, seed, params, upstream, encoder }
    }

    pub fn task(&self) -> Task {
        self.task
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn upstream(&self) -> &ToyUpstream {
        &self.upstream
    }

    pub fn encoder(&self) -> &TargetEncoder {
        &self.encoder
    }

    /// Trainability predicate honoring the freeze flag.
    pub fn trainable(freeze_upstream: bool) -> impl Fn(&str) -> bool {
        move |name: &str| !freeze_upstream || !name.starts_with("upstream.")
    }

    pub fn upstream_checksum(&self) -> String {
        self.params.checksum_prefix("upstream.")
    }

    /// Runs the frozen upstream over both waves of an item.
    pub fn compute_stacks(&self, item: &TrainItem) -> Result<CachedStacks<F>> {
        let mix: Vec<F> = item.mixture.iter().map(|&v| F::from_f32(v)).collect();
        let enr: Vec<F> = item.enrollment.iter().map(|&v| F::from_f32(v)).collect();
        Ok(CachedStacks {
            mixture: self.upstream.forward_stack(&self.params, &mix)?,
            enrollment: self.upstream.forward_stack(&self.params, &enr)?,
        })
    }

    /// Builds the loss graph of one item on `tape`.
    ///
    /// With a cache the upstream is bypassed entirely (frozen contract);
    /// otherwise both waves run through the upstream on the tape, which is
    /// also the fine-tuning path.
    pub fn build_loss(
        &self,
        tape: &mut Tape<F>,
        binding: &Binding,
        item: &TrainItem,
        alpha: f64,
        cache: Option<&CachedStacks<F>>,
    ) -> Result<LossGraph> {
        let (mix_layers, enr_layers) = match cache {
            Some(c) => (c.mixture.to_tape_constants(tape), c.enrollment.to_tape_constants(tape)),
            None => {
                let mix: Vec<F> = item.mixture.iter().map(|&v| F::from_f32(v)).collect();
                let enr: Vec<F> = item.enrollment.iter().map(|&v| F::from_f32(v)).collect();
                let mix_var = tape.constant(TensorData::vector(mix));
                let enr_var = tape.constant(TensorData::vector(enr));
                (
                    self.upstream.forward_tape(tape, mix_var, binding)?,
                    self.upstream.forward_tape(tape, enr_var, binding)?,
                )
            }
        };
        let e = self.encoder.mhfa_pool(tape, &enr_layers, binding)?;
        let z_x = self.encoder.encode_target(tape, &mix_layers, e, binding)?;
        let (sub_i, sub_j) = self.task.subtasks();
        match sub_j {
            None => {
                let loss = self.subtask_loss(tape, binding, sub_i, item, z_x)?;
                Ok(LossGraph { total: loss, loss_i: loss, loss_j: None })
            }
            Some(sub_j) => {
                if !(0.0..=1.0).contains(&alpha) {
                    return Err(Error::Train(format!("alpha {alpha} outside [0, 1]")));
                }
                // Degenerate weights skip the dead branch entirely so the
                // surviving branch reproduces the single-task graph bitwise.
                if alpha == 1.0 {
                    let loss = self.subtask_loss(tape, binding, sub_i, item, z_x)?;
                    return Ok(LossGraph { total: loss, loss_i: loss, loss_j: None });
                }
                if alpha == 0.0 {
                    let loss = self.subtask_loss(tape, binding, sub_j, item, z_x)?;
                    return Ok(LossGraph { total: loss, loss_i: loss, loss_j: Some(loss) });
                }
                let li = self.subtask_loss(tape, binding, sub_i, item, z_x)?;
                let lj = self.subtask_loss(tape, binding, sub_j, item, z_x)?;
                let si = tape.scale(li, alpha);
                let sj = tape.scale(lj, 1.0 - alpha);
                let total = tape.add(si, sj);
                Ok(LossGraph { total, loss_i: li, loss_j: Some(lj) })
            }
        }
    }

    fn subtask_loss(
        &self,
        tape: &mut Tape<F>,
        binding: &Binding,
        sub: SubTask,
        item: &TrainItem,
        z_x: Var,
    ) -> Result<Var> {
        match sub {
            SubTask::Tse | SubTask::Pse => {
                let mix: Vec<F> = item.mixture.iter().map(|&v| F::from_f32(v)).collect();
                let wave = tape.constant(TensorData::vector(mix));
                let detail =
                    heads::mask_head_forward(tape, binding, sub.head_prefix(), wave, z_x)?;
                let target: Vec<F> = item.target.iter().map(|&v| F::from_f32(v)).collect();
                if target.len() != item.mixture.len() {
                    return Err(Error::Train(format!(
                        "item {:?}: target length {} != mixture length {}",
                        item.id,
                        target.len(),
                        item.mixture.len()
                    )));
                }
                Ok(tape.neg_si_snr(detail.estimate, &target))
            }
            SubTask::Pvad => {
                let logits = heads::pvad_logits(tape, binding, sub.head_prefix(), z_x);
                let frames = tape.value(logits).rows();
                if item.labels.len() != frames {
                    return Err(Error::Train(format!(
                        "item {:?}: {} labels vs {} frames",
                        item.id,
                        item.labels.len(),
                        frames
                    )));
                }
                let classes: Vec<usize> = item.labels.iter().map(|l| l.index()).collect();
                Ok(tape.cross_entropy_logits(logits, &classes))
            }
            SubTask::TsAsr => {
                let tokens = item.tokens.as_ref().ok_or_else(|| {
                    Error::Train(format!("item {:?} has no transcript for the CTC loss", item.id))
                })?;
                let lp = heads::asr_log_probs(tape, binding, sub.head_prefix(), z_x);
                tape.ctc_loss(lp, tokens)
            }
        }
    }

    /// Inference-style forward producing Z_x with all parameters constant.
    fn infer_z_x(
        &self,
        tape: &mut Tape<F>,
        mixture: &[f32],
        enrollment: &[f32],
    ) -> Result<(Binding, Var)> {
        let binding = bind(tape, &self.params, |_| false);
        let mix: Vec<F> = mixture.iter().map(|&v| F::from_f32(v)).collect();
        let enr: Vec<F> = enrollment.iter().map(|&v| F::from_f32(v)).collect();
        let mix_var = tape.constant(TensorData::vector(mix));
        let enr_var = tape.constant(TensorData::vector(enr));
        let mix_layers = self.upstream.forward_tape(tape, mix_var, &binding)?;
        let enr_layers = self.upstream.forward_tape(tape, enr_var, &binding)?;
        let e = self.encoder.mhfa_pool(tape, &enr_layers, &binding)?;
        let z_x = self.encoder.encode_target(tape, &mix_layers, e, &binding)?;
        Ok((binding, z_x))
    }

    /// Extracts the target waveform estimate (extraction/enhancement heads).
    pub fn extract_wave(&self, mixture: &[f32], enrollment: &[f32]) -> Result<Vec<f32>> {
        let sub = match self.task.subtasks().0 {
            s @ (SubTask::Tse | SubTask::Pse) => s,
            _ => return Err(Error::Eval(format!("task {} has no waveform head", self.task))),
        };
        let mut tape = Tape::<F>::new();
        let (binding, z_x) = self.infer_z_x(&mut tape, mixture, enrollment)?;
        let mix: Vec<F> = mixture.iter().map(|&v| F::from_f32(v)).collect();
        let wave = tape.constant(TensorData::vector(mix));
        let detail = heads::mask_head_forward(&mut tape, &binding, sub.head_prefix(), wave, z_x)?;
        Ok(tape.value(detail.estimate).data().iter().map(|&v| v.as_f32()).collect())
    }

    /// Frame posteriors over {tss, ntss, ns}.
    pub fn frame_posteriors(&self, mixture: &[f32], enrollment: &[f32]) -> Result<Vec<[f64; 3]>> {
        let sub = self.find_subtask(SubTask::Pvad)?;
        let mut tape = Tape::<F>::new();
        let (binding, z_x) = self.infer_z_x(&mut tape, mixture, enrollment)?;
        let post = heads::pvad_forward(&mut tape, &binding, sub.head_prefix(), z_x);
        let v = tape.value(post);
        Ok((0..v.rows())
            .map(|t| {
                let r = v.row(t);
                [r[0].as_f64(), r[1].as_f64(), r[2].as_f64()]
            })
            .collect())
    }

    /// Transcribes via greedy decoding, or prefix beam search when a width
    /// is given.
    pub fn transcribe(
        &self,
        mixture: &[f32],
        enrollment: &[f32],
        beam: Option<usize>,
    ) -> Result<String> {
        let sub = self.find_subtask(SubTask::TsAsr)?;
        let mut tape = Tape::<F>::new();
        let (binding, z_x) = self.infer_z_x(&mut tape, mixture, enrollment)?;
        let lp = heads::asr_log_probs(&mut tape, &binding, sub.head_prefix(), z_x);
        let tokens = match beam {
            Some(width) => heads::ctc_beam_decode(tape.value(lp), width),
            None => heads::ctc_greedy_decode(tape.value(lp)),
        };
        Ok(heads::decode_tokens(&tokens))
    }

    fn find_subtask(&self, want: SubTask) -> Result<SubTask> {
        let (i, j) = self.task.subtasks();
        if i == want || j == Some(want) {
            Ok(want)
        } else {
            Err(Error::Eval(format!("task {} has no {:?} head", self.task, want)))
        }
    }

    // --- checkpoints ---------------------------------------------------------

    /// Saves model parameters (f32 payload) plus caller metadata fields.
    pub fn save_checkpoint(&self, path: &std::path::Path, extra: serde_json::Value) -> Result<()> {
        let meta = CkptMeta {
            format: "tsb-checkpoint".into(),
            task: self.task,
            model: self.cfg,
            seed: self.seed,
            extra,
        };
        crate::params::save_checkpoint(
            path,
            &serde_json::to_value(&meta)?,
            &self.params.to_f32_map(),
        )
    }

    /// Reloads a model checkpoint; trainer-state tensors (`opt.` prefix) are
    /// returned separately.
    pub fn load_checkpoint(path: &std::path::Path) -> Result<(Self, CheckpointPayload<F>)> {
        let (meta_json, tensors) = crate::params::load_checkpoint(path)?;
        let meta: CkptMeta = serde_json::from_value(meta_json.clone())
            .map_err(|e| Error::Checkpoint(format!("bad metadata: {e}")))?;
        if meta.format != "tsb-checkpoint" {
            return Err(Error::Checkpoint(format!("unexpected format {:?}", meta.format)));
        }
        let mut model = TsModel::new(meta.task, meta.model, meta.seed);
        let mut opt = std::collections::BTreeMap::new();
        let mut loaded = 0usize;
        for (name, tensor) in &tensors {
            if let Some(rest) = name.strip_prefix("opt.") {
                opt.insert(
                    rest.to_string(),
                    TensorData::<F>::from_f32_slice(tensor.shape().to_vec(), tensor.data()),
                );
                continue;
            }
            if !model.params.contains(name) {
                return Err(Error::Checkpoint(format!("unknown tensor {name:?}")));
            }
            if model.params.get(name).shape() != tensor.shape() {
                return Err(Error::Checkpoint(format!("shape mismatch for {name:?}")));
            }
            model.params.insert(
                name.clone(),
                TensorData::from_f32_slice(tensor.shape().to_vec(), tensor.data()),
            );
            loaded += 1;
        }
        if loaded != model.params.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint holds {loaded} of {} model tensors",
                model.params.len()
            )));
        }
        Ok((model, CheckpointPayload { meta, opt_tensors: opt }))
    }
}

/// Checkpoint metadata block.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CkptMeta {
    pub format: String,
    pub task: Task,
    pub model: ModelConfig,
    pub seed: u64,
    /// Caller fields: step, config hash, loss averages.
    #[serde(default)]
    pub extra: serde_json::Value,
}

pub struct CheckpointPayload<F: Real> {
    pub meta: CkptMeta,
    pub opt_tensors: std::collections::BTreeMap<String, TensorData<F>>,
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::seeding::rng_for;
    use rand::Rng;

    pub(crate) fn tiny_config() -> ModelConfig {
        ModelConfig {
            upstream: UpstreamConfig { layers: 2, dim: 8, seed: 5 },
            encoder: EncoderConfig { hidden: 4, embed_dim: 16, mhfa_heads: 2, mhfa_compress: 8 },
            asr_hidden: 6,
        }
    }

    pub(crate) fn tiny_item(seed: u64, n: usize, with_transcript: bool) -> TrainItem {
        let mut rng = rng_for(seed, "model-item", 0);
        let mixture: Vec<f32> = (0..n).map(|_| rng.gen_range(-0.5..0.5)).collect();
        let target: Vec<f32> = mixture.iter().map(|&v| v * 0.6).collect();
        let enrollment: Vec<f32> = (0..n).map(|_| rng.gen_range(-0.5..0.5)).collect();
        let frames = n.div_ceil(crate::FRAME_STRIDE);
        let labels: Vec<FrameLabel> = (0..frames)
            .map(|t| match t % 3 {
                0 => FrameLabel::Tss,
                1 => FrameLabel::Ntss,
                _ => FrameLabel::Ns,
            })
            .collect();
        let transcript = with_transcript.then(|| "go on".to_string());
        let tokens = transcript.as_deref().map(|t| heads::encode_text(t).unwrap());
        TrainItem {
            id: format!("item{seed}"),
            mixture,
            target,
            enrollment,
            labels,
            tokens,
            transcript,
        }
    }

    #[test]
    fn loss_graphs_build_for_every_task() {
        for task in [Task::Tse, Task::Pse, Task::Pvad, Task::TsAsr, Task::TseTsasr, Task::PsePvad] {
            let model = TsModel::<f64>::new(task, tiny_config(), 7);
            let item = tiny_item(1, 2048, true);
            let mut tape = Tape::new();
            let binding = bind(&mut tape, &model.params, TsModel::<f64>::trainable(true));
            let g = model.build_loss(&mut tape, &binding, &item, 0.5, None).unwrap();
            let total = tape.value(g.total).item();
            assert!(total.is_finite(), "{task}: {total}");
            if task.is_joint() {
                assert!(g.loss_j.is_some());
            }
        }
    }

    #[test]
    fn upstream_runs_twice_per_item() {
        let model = TsModel::<f64>::new(Task::Pvad, tiny_config(), 7);
        let item = tiny_item(2, 1600, false);
        let before = model.upstream().call_count();
        let mut tape = Tape::new();
        let binding = bind(&mut tape, &model.params, TsModel::<f64>::trainable(true));
        model.build_loss(&mut tape, &binding, &item, 0.5, None).unwrap();
        assert_eq!(model.upstream().call_count() - before, 2);
    }

    #[test]
    fn cached_and_uncached_frozen_losses_agree() {
        let model = TsModel::<f64>::new(Task::Tse, tiny_config(), 7);
        let item = tiny_item(3, 2048, false);
        let cache = model.compute_stacks(&item).unwrap();
        let mut t1 = Tape::new();
        let b1 = bind(&mut t1, &model.params, TsModel::<f64>::trainable(true));
        let g1 = model.build_loss(&mut t1, &b1, &item, 0.5, Some(&cache)).unwrap();
        let mut t2 = Tape::new();
        let b2 = bind(&mut t2, &model.params, TsModel::<f64>::trainable(true));
        let g2 = model.build_loss(&mut t2, &b2, &item, 0.5, None).unwrap();
        let (a, b) = (t1.value(g1.total).item(), t2.value(g2.total).item());
        assert!((a - b).abs() < 1e-9, "{a} vs {b}");
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact_in_f32() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let model = TsModel::<f32>::new(Task::Pvad, tiny_config(), 9);
        model.save_checkpoint(&path, serde_json::json!({"step": 3})).unwrap();
        let (loaded, payload) = TsModel::<f32>::load_checkpoint(&path).unwrap();
        assert_eq!(loaded.params.checksum(), model.params.checksum());
        assert_eq!(payload.meta.extra["step"], 3);
        assert_eq!(payload.meta.task, Task::Pvad);
    }

    #[test]
    fn inference_helpers_respect_task_heads() {
        let model = TsModel::<f64>::new(Task::Pvad, tiny_config(), 9);
        let item = tiny_item(4, 1600, false);
        let post = model.frame_posteriors(&item.mixture, &item.enrollment).unwrap();
        assert_eq!(post.len(), item.labels.len());
        for row in &post {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
        assert!(model.extract_wave(&item.mixture, &item.enrollment).is_err());
        assert!(model.transcribe(&item.mixture, &item.enrollment, None).is_err());
    }
}
