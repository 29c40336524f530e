//! Builds a small sparse-overlap mixture corpus from synthetic speakers and
//! prints what landed in the manifest.
//!
//! Run: cargo run --release --example simulate_corpus

use tsb::demo::{generate_demo_corpus, generate_noise_dir, DemoConfig};
use tsb::sim::{build_corpus, decode_labels, placement_of, FrameLabel, MixMode, SimConfig};

fn main() -> tsb::Result<()> {
    let root = std::env::temp_dir().join("tsb_example_simulate");
    let _ = std::fs::remove_dir_all(&root);
    let corpus = root.join("corpus");
    let noise = root.join("noise");
    generate_demo_corpus(
        &corpus,
        &DemoConfig { speakers: 3, utterances_per_speaker: 3, ..DemoConfig::default() },
    )?;
    generate_noise_dir(&noise, 2, 6.0, 1)?;

    let cfg = SimConfig {
        corpus_dir: corpus,
        noise_dir: Some(noise),
        out_dir: root.join("mixtures"),
        n_mixtures: 6,
        mode: MixMode::Sparse,
        overlap_min: 0.0,
        overlap_max: 0.4,
        snr_min: Some(5.0),
        snr_max: Some(15.0),
        min_enroll_secs: 1.0,
        no_loop: false,
        seed: 42,
    };
    let manifest = build_corpus(&cfg)?;
    println!("{} records -> {}", manifest.len(), cfg.out_dir.join("manifest.jsonl").display());
    for rec in manifest.records() {
        let plan = placement_of(rec)?;
        let labels = decode_labels(&rec.labels)?;
        let tss = labels.iter().filter(|&&l| l == FrameLabel::Tss).count();
        println!(
            "  {}: target {} vs {}, requested overlap {:.2}, realized {:.3}, snr {:?}, \
             {} frames ({} tss)",
            rec.id,
            rec.speaker,
            rec.interferer_speaker,
            rec.overlap_ratio,
            plan.realized_ratio(),
            rec.snr_db,
            labels.len(),
            tss
        );
    }
    Ok(())
}
