//! Overfits the extraction task on a handful of simulated mixtures, then
//! scores the training set: SI-SDRi should be strongly positive and the
//! failure rate zero.
//!
//! A deliberately small configuration keeps this quick; paper-scale runs use
//! hidden 512 via `--hidden` or a config file.
//!
//! Run: cargo run --release --example train_tse_overfit

use tsb::demo::{generate_demo_corpus, DemoConfig};
use tsb::evaluate::{evaluate, EvalOptions};
use tsb::model::Task;
use tsb::sim::{build_corpus, MixMode, SimConfig};
use tsb::train::{items_for_task, TrainConfig, Trainer};

fn main() -> tsb::Result<()> {
    let root = std::env::temp_dir().join("tsb_example_tse");
    let _ = std::fs::remove_dir_all(&root);
    generate_demo_corpus(
        &root.join("corpus"),
        &DemoConfig {
            speakers: 3,
            utterances_per_speaker: 3,
            min_secs: 2.0,
            max_secs: 2.5,
            seed: 11,
            transcripts: false,
        },
    )?;
    let sim = SimConfig {
        corpus_dir: root.join("corpus"),
        noise_dir: None,
        out_dir: root.join("mix"),
        n_mixtures: 4,
        mode: MixMode::Min,
        overlap_min: 0.0,
        overlap_max: 0.0,
        snr_min: None,
        snr_max: None,
        min_enroll_secs: 1.0,
        no_loop: false,
        seed: 17,
    };
    let manifest = build_corpus(&sim)?;
    let items = items_for_task(&manifest, Task::Tse)?;

    let cfg = TrainConfig {
        task: Task::Tse,
        alpha: 0.5,
        lr: 2e-3,
        steps: 150,
        batch: 4,
        freeze_upstream: true,
        seed: 5,
        checkpoint_every: 0,
        warmup_steps: 20,
        clip_norm: 5.0,
        hidden: Some(16),
        asr_hidden: 64,
        upstream_layers: None,
        upstream_dim: None,
        upstream_seed: None,
        threads: None,
    };
    let mut trainer = Trainer::<f32>::new(cfg.clone(), items)?;
    for step in 0..cfg.steps {
        let rec = trainer.train_step()?;
        if step % 25 == 0 || step + 1 == cfg.steps {
            println!("step {step:>4}: neg-si-snr loss {:.3}", rec.total);
        }
    }

    let report = evaluate(
        Task::Tse,
        &manifest,
        trainer.model(),
        &EvalOptions { checkpoint_id: "example".into(), seed: cfg.seed, ..Default::default() },
    )?;
    println!(
        "training-set SI-SDRi mean {:.2} dB, failure rate {:.1}%",
        report.overall.means["si_sdri"],
        report.overall.fr.unwrap_or(f64::NAN)
    );
    Ok(())
}
