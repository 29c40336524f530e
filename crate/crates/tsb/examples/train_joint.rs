//! Joint training of extraction and transcription with the task weight
//! alpha: L = alpha * L_tse + (1 - alpha) * L_tsasr. Both heads share the
//! target speech encoder.
//!
//! With alpha = 1 the run reproduces the single-task extraction trajectory
//! bitwise (the dead branch is skipped); alpha = 0.5 trains both heads.
//!
//! Run: cargo run --release --example train_joint

use tsb::demo::{generate_demo_corpus, DemoConfig};
use tsb::model::Task;
use tsb::sim::{build_corpus, MixMode, SimConfig};
use tsb::train::{items_for_task, TrainConfig, Trainer};

fn main() -> tsb::Result<()> {
    let root = std::env::temp_dir().join("tsb_example_joint");
    let _ = std::fs::remove_dir_all(&root);
    generate_demo_corpus(
        &root.join("corpus"),
        &DemoConfig {
            speakers: 3,
            utterances_per_speaker: 3,
            min_secs: 1.5,
            max_secs: 2.0,
            seed: 8,
            transcripts: true,
        },
    )?;
    let sim = SimConfig {
        corpus_dir: root.join("corpus"),
        noise_dir: None,
        out_dir: root.join("mix"),
        n_mixtures: 4,
        mode: MixMode::Max,
        overlap_min: 0.0,
        overlap_max: 0.0,
        snr_min: None,
        snr_max: None,
        min_enroll_secs: 1.0,
        no_loop: false,
        seed: 9,
    };
    let manifest = build_corpus(&sim)?;
    let items = items_for_task(&manifest, Task::TseTsasr)?;

    let cfg = TrainConfig {
        task: Task::TseTsasr,
        alpha: 0.5,
        lr: 2e-3,
        steps: 100,
        batch: 4,
        freeze_upstream: true,
        seed: 4,
        checkpoint_every: 0,
        warmup_steps: 20,
        clip_norm: 5.0,
        hidden: Some(16),
        asr_hidden: 32,
        upstream_layers: None,
        upstream_dim: None,
        upstream_seed: None,
        threads: None,
    };
    let mut trainer = Trainer::<f32>::new(cfg.clone(), items.clone())?;
    let mut first: Option<(f64, f64)> = None;
    let mut last = (0.0, 0.0);
    for step in 0..cfg.steps {
        let rec = trainer.train_step()?;
        let pair = (rec.loss_i, rec.loss_j.unwrap_or(f64::NAN));
        first.get_or_insert(pair);
        last = pair;
        if step % 20 == 0 || step + 1 == cfg.steps {
            println!(
                "step {step:>4}: L = {:.3} (tse {:.3}, tsasr {:.3})",
                rec.total, pair.0, pair.1
            );
        }
    }
    let first = first.unwrap();
    println!(
        "tse loss {:.3} -> {:.3}; ctc loss {:.3} -> {:.3}",
        first.0, last.0, first.1, last.1
    );
    for item in items.iter().take(2) {
        let hyp = trainer.model().transcribe(&item.mixture, &item.enrollment, None)?;
        println!("  {:?} decoded {:?} (ref {:?})", item.id, hyp, item.transcript.as_deref().unwrap());
    }
    Ok(())
}
