//! Trains the frame-level voice-activity classifier on sparse noisy
//! mixtures and reports pooled mAP and m.tss per overlap condition.
//!
//! Run: cargo run --release --example train_pvad

use tsb::demo::{generate_demo_corpus, generate_noise_dir, DemoConfig};
use tsb::evaluate::{evaluate, EvalOptions};
use tsb::model::Task;
use tsb::sim::{build_corpus, MixMode, SimConfig};
use tsb::train::{items_for_task, TrainConfig, Trainer};

fn main() -> tsb::Result<()> {
    let root = std::env::temp_dir().join("tsb_example_pvad");
    let _ = std::fs::remove_dir_all(&root);
    generate_demo_corpus(
        &root.join("corpus"),
        &DemoConfig {
            speakers: 3,
            utterances_per_speaker: 3,
            min_secs: 1.5,
            max_secs: 2.5,
            seed: 21,
            transcripts: false,
        },
    )?;
    generate_noise_dir(&root.join("noise"), 2, 6.0, 2)?;
    let sim = SimConfig {
        corpus_dir: root.join("corpus"),
        noise_dir: Some(root.join("noise")),
        out_dir: root.join("mix"),
        n_mixtures: 6,
        mode: MixMode::Sparse,
        overlap_min: 0.2,
        overlap_max: 0.2,
        snr_min: Some(5.0),
        snr_max: Some(15.0),
        min_enroll_secs: 1.0,
        no_loop: false,
        seed: 33,
    };
    let manifest = build_corpus(&sim)?;
    let items = items_for_task(&manifest, Task::Pvad)?;

    // The standalone activity task uses the small hidden size (32).
    let cfg = TrainConfig {
        task: Task::Pvad,
        alpha: 0.5,
        lr: 2e-3,
        steps: 120,
        batch: 6,
        freeze_upstream: true,
        seed: 3,
        checkpoint_every: 0,
        warmup_steps: 20,
        clip_norm: 5.0,
        hidden: None,
        asr_hidden: 64,
        upstream_layers: None,
        upstream_dim: None,
        upstream_seed: None,
        threads: None,
    };
    let mut trainer = Trainer::<f32>::new(cfg.clone(), items)?;
    for step in 0..cfg.steps {
        let rec = trainer.train_step()?;
        if step % 30 == 0 || step + 1 == cfg.steps {
            println!("step {step:>4}: cross-entropy {:.4}", rec.total);
        }
    }

    let report = evaluate(
        Task::Pvad,
        &manifest,
        trainer.model(),
        &EvalOptions { checkpoint_id: "example".into(), seed: cfg.seed, ..Default::default() },
    )?;
    println!(
        "pooled mAP {:.3}, m.tss {:.3}",
        report.overall.pooled["map"], report.overall.pooled["m_tss"]
    );
    for (cond, agg) in &report.by_overlap {
        println!("  overlap {cond}: mAP {:.3} over {} rows", agg.pooled["map"], agg.count);
    }
    Ok(())
}
