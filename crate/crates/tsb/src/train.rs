//! Single- and multi-task training: per-item loss graphs, deterministic
//! batch reduction, Adam with linear warmup and global-norm clipping, and
//! resumable checkpoints.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autograd::{Real, Tape, TensorData};
use crate::error::{Error, Result};
use crate::model::{CachedStacks, ModelConfig, Task, TrainItem, TsModel};
use crate::params::{bind, collect_grads};
use crate::seeding::rng_for;

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// Affine multi-task combination alpha * l_i + (1 - alpha) * l_j.
pub fn multitask_loss(l_i: f64, l_j: f64, alpha: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Train(format!("alpha {alpha} outside [0, 1]")));
    }
    Ok(alpha * l_i + (1.0 - alpha) * l_j)
}

/// Training settings. Unknown keys in a config file are rejected.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub task: Task,
    /// Joint-task weight; only used by tse+tsasr and pse+pvad.
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_lr")]
    pub lr: f64,
    pub steps: u64,
    #[serde(default = "default_batch")]
    pub batch: usize,
    #[serde(default = "default_true")]
    pub freeze_upstream: bool,
    #[serde(default)]
    pub seed: u64,
    /// 0 disables periodic checkpoints; a final one is always written by the
    /// CLI.
    #[serde(default)]
    pub checkpoint_every: u64,
    #[serde(default = "default_warmup")]
    pub warmup_steps: u64,
    #[serde(default = "default_clip")]
    pub clip_norm: f64,
    /// Encoder hidden size override; None picks the task default (512, or
    /// 32 for standalone pvad).
    #[serde(default)]
    pub hidden: Option<usize>,
    #[serde(default = "default_asr_hidden")]
    pub asr_hidden: usize,
    #[serde(default)]
    pub upstream_layers: Option<usize>,
    #[serde(default)]
    pub upstream_dim: Option<usize>,
    #[serde(default)]
    pub upstream_seed: Option<u64>,
    /// Worker cap for per-item forward/backward passes within a batch.
    #[serde(default)]
    pub threads: Option<usize>,
}

fn default_alpha() -> f64 {
    0.5
}
fn default_lr() -> f64 {
    1e-3
}
fn default_batch() -> usize {
    8
}
fn default_true() -> bool {
    true
}
fn default_warmup() -> u64 {
    100
}
fn default_clip() -> f64 {
    5.0
}
fn default_asr_hidden() -> usize {
    512
}

impl TrainConfig {
    pub fn model_config(&self) -> ModelConfig {
        let mut cfg = ModelConfig::for_task(self.task);
        if let Some(h) = self.hidden {
            cfg.encoder.hidden = h;
        }
        cfg.asr_hidden = self.asr_hidden;
        if let Some(l) = self.upstream_layers {
            cfg.upstream.layers = l;
        }
        if let Some(d) = self.upstream_dim {
            cfg.upstream.dim = d;
        }
        if let Some(s) = self.upstream_seed {
            cfg.upstream.seed = s;
        }
        cfg
    }
}

/// One step's loss record; `loss_j` is None for single-task runs and for
/// joint runs whose dead branch was skipped (alpha = 1).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: u64,
    pub loss_i: f64,
    pub loss_j: Option<f64>,
    pub total: f64,
}

/// Writes loss records as CSV (step, loss_i, loss_j, total).
pub fn write_loss_csv(path: &Path, records: &[LossRecord]) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "step,loss_i,loss_j,total")?;
    for r in records {
        let j = r.loss_j.map(|v| format!("{v}")).unwrap_or_default();
        writeln!(w, "{},{},{},{}", r.step, r.loss_i, j, r.total)?;
    }
    w.flush()?;
    Ok(())
}

struct AdamState<F> {
    m: BTreeMap<String, Vec<F>>,
    v: BTreeMap<String, Vec<F>>,
}

/// Owns the model, data and optimizer state for a training run.
pub struct Trainer<F: Real> {
    model: TsModel<F>,
    cfg: TrainConfig,
    items: Vec<TrainItem>,
    cache: Vec<Option<CachedStacks<F>>>,
    opt: AdamState<F>,
    step: u64,
    pool: rayon::ThreadPool,
}

impl<F: Real> Trainer<F> {
    pub fn new(cfg: TrainConfig, items: Vec<TrainItem>) -> Result<Self> {
        let model = TsModel::new(cfg.task, cfg.model_config(), cfg.seed);
        Self::with_model(model, cfg, items, 0, AdamState { m: BTreeMap::new(), v: BTreeMap::new() })
    }

    fn with_model(
        model: TsModel<F>,
        cfg: TrainConfig,
        items: Vec<TrainItem>,
        step: u64,
        opt: AdamState<F>,
    ) -> Result<Self> {
        if items.is_empty() {
            return Err(Error::Train("empty training set".into()));
        }
        if cfg.batch == 0 {
            return Err(Error::Train("batch size must be positive".into()));
        }
        if !(0.0..=1.0).contains(&cfg.alpha) {
            return Err(Error::Train(format!("alpha {} outside [0, 1]", cfg.alpha)));
        }
        if cfg.task.needs_transcripts() {
            if let Some(bad) = items.iter().find(|i| i.tokens.is_none()) {
                return Err(Error::Train(format!(
                    "task {} needs transcripts but item {:?} has none",
                    cfg.task, bad.id
                )));
            }
        }
        let threads = cfg
            .threads
            .unwrap_or_else(|| std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1));
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .map_err(|e| Error::Train(format!("thread pool: {e}")))?;
        let cache: Vec<Option<CachedStacks<F>>> = if cfg.freeze_upstream {
            items
                .iter()
                .map(|item| model.compute_stacks(item).map(Some))
                .collect::<Result<Vec<_>>>()?
        } else {
            items.iter().map(|_| None).collect()
        };
        Ok(Self { model, cfg, items, cache, opt, step, pool })
    }

    pub fn model(&self) -> &TsModel<F> {
        &self.model
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Deterministic batch for a step: a seeded shuffle of item indices,
    /// taking the first `batch`.
    fn batch_indices(&self) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.items.len()).collect();
        let mut rng = rng_for(self.cfg.seed, "batch", self.step);
        idx.shuffle(&mut rng);
        idx.truncate(self.cfg.batch.min(self.items.len()));
        idx
    }

    /// One optimizer step over a batch. Per-item passes may run on worker
    /// threads; gradients are reduced in item order, so results are bitwise
    /// identical for any thread count.
    pub fn train_step(&mut self) -> Result<LossRecord> {
        let indices = self.batch_indices();
        let model = &self.model;
        let cfg = &self.cfg;
        let items = &self.items;
        let cache = &self.cache;
        let outcomes: Vec<Result<ItemOutcome<F>>> = self.pool.install(|| {
            use rayon::prelude::*;
            indices
                .par_iter()
                .map(|&i| forward_backward(model, cfg, &items[i], cache[i].as_ref()))
                .collect()
        });
        let mut sum_i = 0.0;
        let mut sum_j = 0.0;
        let mut any_j = false;
        let mut grads: BTreeMap<String, TensorData<F>> = BTreeMap::new();
        let n = indices.len() as f64;
        for (slot, outcome) in indices.iter().zip(outcomes) {
            let out = outcome?;
            if !out.total.is_finite() {
                return Err(Error::NonFiniteLoss {
                    step: self.step,
                    sample: items[*slot].id.clone(),
                });
            }
            sum_i += out.loss_i;
            if let Some(j) = out.loss_j {
                sum_j += j;
                any_j = true;
            }
            for (name, g) in out.grads {
                match grads.get_mut(&name) {
                    Some(acc) => acc.add_in_place(&g),
                    None => {
                        grads.insert(name, g);
                    }
                }
            }
        }
        let inv = F::from_f64(1.0 / n);
        for g in grads.values_mut() {
            for v in g.data_mut() {
                *v = *v * inv;
            }
        }
        self.apply_update(&grads);
        let record = LossRecord {
            step: self.step,
            loss_i: sum_i / n,
            loss_j: any_j.then_some(sum_j / n),
            total: {
                let (_, sub_j) = self.cfg.task.subtasks();
                match sub_j {
                    None => sum_i / n,
                    Some(_) if self.cfg.alpha == 1.0 => sum_i / n,
                    Some(_) if self.cfg.alpha == 0.0 => sum_j / n,
                    Some(_) => multitask_loss(sum_i / n, sum_j / n, self.cfg.alpha)?,
                }
            },
        };
        self.step += 1;
        Ok(record)
    }

    /// Runs `steps` optimizer steps, optionally checkpointing periodically
    /// into `out_dir`.
    pub fn run(&mut self, steps: u64, out_dir: Option<&Path>) -> Result<Vec<LossRecord>> {
        let mut records = Vec::with_capacity(steps as usize);
        for _ in 0..steps {
            let rec = self.train_step()?;
            records.push(rec);
            if let Some(dir) = out_dir {
                if self.cfg.checkpoint_every > 0 && self.step % self.cfg.checkpoint_every == 0 {
                    self.save_checkpoint(&dir.join(format!("step{:08}.ckpt", self.step)))?;
                }
            }
        }
        Ok(records)
    }

    fn apply_update(&mut self, grads: &BTreeMap<String, TensorData<F>>) {
        // Global-norm clipping over all gradients, accumulated in f64.
        let mut sq = 0.0f64;
        for g in grads.values() {
            for &v in g.data() {
                let x = v.as_f64();
                sq += x * x;
            }
        }
        let norm = sq.sqrt();
        let clip = if norm > self.cfg.clip_norm && norm > 0.0 {
            self.cfg.clip_norm / norm
        } else {
            1.0
        };
        let t = (self.step + 1) as f64;
        let lr_t = self.cfg.lr
            * if self.cfg.warmup_steps > 0 {
                (t / self.cfg.warmup_steps as f64).min(1.0)
            } else {
                1.0
            };
        let bc1 = 1.0 - ADAM_BETA1.powf(t);
        let bc2 = 1.0 - ADAM_BETA2.powf(t);
        let b1 = F::from_f64(ADAM_BETA1);
        let b2 = F::from_f64(ADAM_BETA2);
        let one_m_b1 = F::from_f64(1.0 - ADAM_BETA1);
        let one_m_b2 = F::from_f64(1.0 - ADAM_BETA2);
        let clip_f = F::from_f64(clip);
        let lr_over_bc1 = F::from_f64(lr_t / bc1);
        let inv_sqrt_bc2 = F::from_f64(1.0 / bc2.sqrt());
        let eps = F::from_f64(ADAM_EPS);
        for (name, g) in grads {
            let m = self
                .opt
                .m
                .entry(name.clone())
                .or_insert_with(|| vec![F::zero(); g.len()]);
            let v = self
                .opt
                .v
                .entry(name.clone())
                .or_insert_with(|| vec![F::zero(); g.len()]);
            let p = self.model.params.get_mut(name);
            for ((pv, (mv, vv)), &gv) in p
                .data_mut()
                .iter_mut()
                .zip(m.iter_mut().zip(v.iter_mut()))
                .zip(g.data())
            {
                let gc = gv * clip_f;
                *mv = b1 * *mv + one_m_b1 * gc;
                *vv = b2 * *vv + one_m_b2 * gc * gc;
                let update = lr_over_bc1 * *mv / ((*vv).sqrt() * inv_sqrt_bc2 + eps);
                *pv = *pv - update;
            }
        }
    }

    // --- checkpointing -------------------------------------------------------

    /// Saves parameters plus optimizer moments and the step counter; a
    /// resumed f32 run continues bitwise identically.
    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let mut tensors = self.model.params.to_f32_map();
        for (name, m) in &self.opt.m {
            tensors.insert(
                format!("opt.m.{name}"),
                TensorData::new(vec![m.len()], m.iter().map(|&x| x.as_f32()).collect()),
            );
        }
        for (name, v) in &self.opt.v {
            tensors.insert(
                format!("opt.v.{name}"),
                TensorData::new(vec![v.len()], v.iter().map(|&x| x.as_f32()).collect()),
            );
        }
        let meta = crate::model::CkptMeta {
            format: "tsb-checkpoint".into(),
            task: self.cfg.task,
            model: self.cfg.model_config(),
            seed: self.cfg.seed,
            extra: serde_json::json!({
                "step": self.step,
                "trainer": true,
                "config_hash": crate::params::config_hash(&self.cfg),
            }),
        };
        crate::params::save_checkpoint(path, &serde_json::to_value(&meta)?, &tensors)
    }

    /// Resumes a trainer from a checkpoint written by [`Self::save_checkpoint`].
    pub fn resume(path: &Path, cfg: TrainConfig, items: Vec<TrainItem>) -> Result<Self> {
        let (model, payload) = TsModel::<F>::load_checkpoint(path)?;
        if payload.meta.task != cfg.task {
            return Err(Error::Checkpoint(format!(
                "checkpoint task {} does not match config task {}",
                payload.meta.task, cfg.task
            )));
        }
        let step = payload.meta.extra["step"].as_u64().unwrap_or(0);
        let mut opt = AdamState { m: BTreeMap::new(), v: BTreeMap::new() };
        for (name, tensor) in payload.opt_tensors {
            let data = tensor.data().to_vec();
            if let Some(rest) = name.strip_prefix("m.") {
                opt.m.insert(rest.to_string(), data);
            } else if let Some(rest) = name.strip_prefix("v.") {
                opt.v.insert(rest.to_string(), data);
            }
        }
        Self::with_model(model, cfg, items, step, opt)
    }
}

struct ItemOutcome<F> {
    loss_i: f64,
    loss_j: Option<f64>,
    total: f64,
    grads: BTreeMap<String, TensorData<F>>,
}

fn forward_backward<F: Real>(
    model: &TsModel<F>,
    cfg: &TrainConfig,
    item: &TrainItem,
    cache: Option<&CachedStacks<F>>,
) -> Result<ItemOutcome<F>> {
    let mut tape = Tape::<F>::new();
    let trainable = TsModel::<F>::trainable(cfg.freeze_upstream);
    let binding = bind(&mut tape, &model.params, &trainable);
    let graph = model.build_loss(&mut tape, &binding, item, cfg.alpha, cache)?;
    let total = tape.value(graph.total).item().as_f64();
    let loss_i = tape.value(graph.loss_i).item().as_f64();
    let loss_j = graph.loss_j.map(|v| tape.value(v).item().as_f64());
    let mut grads = tape.backward(graph.total);
    let named = collect_grads(&mut grads, &binding, &model.params, &trainable);
    Ok(ItemOutcome { loss_i, loss_j, total, grads: named })
}

/// Train-manifest glue: loads items for a task.
pub fn items_for_task(manifest: &crate::sim::Manifest, task: Task) -> Result<Vec<TrainItem>> {
    crate::model::load_train_items(manifest, task.needs_transcripts())
}

/// Convenience paths of a training run directory.
pub struct RunPaths {
    pub out_dir: PathBuf,
}

impl RunPaths {
    pub fn new(out_dir: &Path) -> Self {
        Self { out_dir: out_dir.to_path_buf() }
    }

    pub fn final_checkpoint(&self) -> PathBuf {
        self.out_dir.join("final.ckpt")
    }

    pub fn loss_csv(&self) -> PathBuf {
        self.out_dir.join("loss.csv")
    }

    pub fn run_meta(&self) -> PathBuf {
        self.out_dir.join("run_meta.json")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::tests::{tiny_config, tiny_item};

    fn tiny_train_config(task: Task, steps: u64) -> TrainConfig {
        TrainConfig {
            task,
            alpha: 0.5,
            lr: 1e-3,
            steps,
            batch: 2,
            freeze_upstream: true,
            seed: 3,
            checkpoint_every: 0,
            warmup_steps: 5,
            clip_norm: 5.0,
            hidden: Some(tiny_config().encoder.hidden),
            asr_hidden: tiny_config().asr_hidden,
            upstream_layers: Some(tiny_config().upstream.layers),
            upstream_dim: Some(tiny_config().upstream.dim),
            upstream_seed: Some(tiny_config().upstream.seed),
            threads: Some(1),
        }
    }

    fn items(n: usize) -> Vec<TrainItem> {
        (0..n).map(|i| tiny_item(i as u64, 1920, true)).collect()
    }

    #[test]
    fn multitask_affine_combination() {
        assert_eq!(multitask_loss(2.0, 4.0, 0.5).unwrap(), 3.0);
        assert_eq!(multitask_loss(2.0, 4.0, 1.0).unwrap(), 2.0);
        assert_eq!(multitask_loss(2.0, 4.0, 0.0).unwrap(), 4.0);
        assert!(multitask_loss(1.0, 1.0, 1.5).is_err());
        assert!(multitask_loss(1.0, 1.0, -0.1).is_err());
    }

    #[test]
    fn losses_stay_finite_over_a_smoke_run() {
        let mut trainer = Trainer::<f32>::new(tiny_train_config(Task::Tse, 0), items(3)).unwrap();
        let mut last = f64::INFINITY;
        for _ in 0..50 {
            let rec = trainer.train_step().unwrap();
            assert!(rec.total.is_finite());
            last = rec.total;
        }
        assert!(last.is_finite());
    }

    #[test]
    fn frozen_upstream_checksum_is_constant() {
        let mut trainer = Trainer::<f32>::new(tiny_train_config(Task::Pvad, 0), items(3)).unwrap();
        let before = trainer.model().upstream_checksum();
        for _ in 0..100 {
            trainer.train_step().unwrap();
        }
        assert_eq!(trainer.model().upstream_checksum(), before);
    }

    #[test]
    fn finetune_changes_upstream_after_one_step() {
        let mut cfg = tiny_train_config(Task::Pvad, 0);
        cfg.freeze_upstream = false;
        let mut trainer = Trainer::<f32>::new(cfg, items(2)).unwrap();
        let before = trainer.model().upstream_checksum();
        trainer.train_step().unwrap();
        assert_ne!(trainer.model().upstream_checksum(), before);
    }

    #[test]
    fn zero_lr_leaves_parameters_bitwise_unchanged() {
        let mut cfg = tiny_train_config(Task::Tse, 0);
        cfg.lr = 0.0;
        let mut trainer = Trainer::<f32>::new(cfg, items(2)).unwrap();
        let before = trainer.model().params.checksum();
        for _ in 0..3 {
            trainer.train_step().unwrap();
        }
        assert_eq!(trainer.model().params.checksum(), before);
    }

    #[test]
    fn alpha_one_joint_matches_single_task_trajectory_bitwise() {
        let mut joint_cfg = tiny_train_config(Task::TseTsasr, 0);
        joint_cfg.alpha = 1.0;
        let single_cfg = tiny_train_config(Task::Tse, 0);
        let mut joint = Trainer::<f32>::new(joint_cfg, items(3)).unwrap();
        let mut single = Trainer::<f32>::new(single_cfg, items(3)).unwrap();
        for _ in 0..8 {
            let rj = joint.train_step().unwrap();
            let rs = single.train_step().unwrap();
            assert_eq!(rj.loss_i.to_bits(), rs.loss_i.to_bits());
        }
        // Every shared tensor followed the identical trajectory.
        for (name, t) in single.model().params.iter() {
            assert_eq!(
                joint.model().params.get(name),
                t,
                "parameter {name} diverged"
            );
        }
    }

    #[test]
    fn thread_count_does_not_change_results() {
        let cfg1 = tiny_train_config(Task::PsePvad, 0);
        let mut cfg4 = tiny_train_config(Task::PsePvad, 0);
        cfg4.threads = Some(4);
        let mut t1 = Trainer::<f32>::new(cfg1, items(4)).unwrap();
        let mut t4 = Trainer::<f32>::new(cfg4, items(4)).unwrap();
        for _ in 0..5 {
            t1.train_step().unwrap();
            t4.train_step().unwrap();
        }
        assert_eq!(t1.model().params.checksum(), t4.model().params.checksum());
    }

    #[test]
    fn resume_continues_bitwise_in_f32() {
        let dir = tempfile::tempdir().unwrap();
        let ckpt = dir.path().join("mid.ckpt");
        let cfg = tiny_train_config(Task::Pvad, 0);
        let mut a = Trainer::<f32>::new(cfg.clone(), items(3)).unwrap();
        for _ in 0..4 {
            a.train_step().unwrap();
        }
        a.save_checkpoint(&ckpt).unwrap();
        let mut resumed = Trainer::<f32>::resume(&ckpt, cfg, items(3)).unwrap();
        assert_eq!(resumed.step_count(), 4);
        let ra = a.train_step().unwrap();
        let rb = resumed.train_step().unwrap();
        assert_eq!(ra.total.to_bits(), rb.total.to_bits());
        assert_eq!(a.model().params.checksum(), resumed.model().params.checksum());
    }

    #[test]
    fn loss_csv_round_trip_format() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("loss.csv");
        let records = vec![
            LossRecord { step: 0, loss_i: 1.5, loss_j: Some(2.5), total: 2.0 },
            LossRecord { step: 1, loss_i: 1.2, loss_j: None, total: 1.2 },
        ];
        write_loss_csv(&path, &records).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("step,loss_i,loss_j,total"));
        assert_eq!(lines.next(), Some("0,1.5,2.5,2"));
        assert_eq!(lines.next(), Some("1,1.2,,1.2"));
    }
}
