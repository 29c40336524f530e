use std::time::Instant;
use tsb::demo::{generate_demo_corpus, DemoConfig};
use tsb::metrics::si_sdr;
use tsb::audio::AudioSignal;
use tsb::model::Task;
use tsb::sim::{build_corpus, MixMode, SimConfig};
use tsb::train::{items_for_task, TrainConfig, Trainer};

fn main() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("corpus");
    generate_demo_corpus(&corpus, &DemoConfig {
        speakers: 3, utterances_per_speaker: 3, min_secs: 3.0, max_secs: 3.5, seed: 11, transcripts: true,
    }).unwrap();
    let sim = SimConfig {
        corpus_dir: corpus, noise_dir: None, out_dir: dir.path().join("mix"),
        n_mixtures: 8, mode: MixMode::Min, overlap_min: 0.0, overlap_max: 0.0,
        snr_min: None, snr_max: None, min_enroll_secs: 1.0, no_loop: false, seed: 17,
    };
    let manifest = build_corpus(&sim).unwrap();
    let items = items_for_task(&manifest, Task::Tse).unwrap();
    let cfg = TrainConfig {
        task: Task::Tse, alpha: 0.5, lr: 1e-3, steps: 500, batch: 8,
        freeze_upstream: true, seed: 5, checkpoint_every: 0, warmup_steps: 50,
        clip_norm: 5.0, hidden: Some(32), asr_hidden: 64,
        upstream_layers: None, upstream_dim: None, upstream_seed: None, threads: Some(1),
    };
    let mut trainer = Trainer::<f32>::new(cfg, items.clone()).unwrap();
    let t0 = Instant::now();
    for step in 0..500u64 {
        let rec = trainer.train_step().unwrap();
        if step % 50 == 0 || step == 499 {
            println!("step {step:4} loss {:8.3}  ({:.1}s)", rec.total, t0.elapsed().as_secs_f64());
        }
    }
    println!("train time: {:.1}s", t0.elapsed().as_secs_f64());
    let mut sdris = Vec::new();
    for item in &items {
        let est = trainer.model().extract_wave(&item.mixture, &item.enrollment).unwrap();
        let est = AudioSignal::new(est, 16000).unwrap();
        let tgt = AudioSignal::new(item.target.clone(), 16000).unwrap();
        let mix = AudioSignal::new(item.mixture.clone(), 16000).unwrap();
        let sdri = si_sdr(&est, &tgt).unwrap() - si_sdr(&mix, &tgt).unwrap();
        sdris.push(sdri);
    }
    let mean = sdris.iter().sum::<f64>() / sdris.len() as f64;
    println!("per-item SI-SDRi: {:?}", sdris.iter().map(|v| (v*10.0).round()/10.0).collect::<Vec<_>>());
    println!("mean SI-SDRi: {mean:.2} dB  total {:.1}s", t0.elapsed().as_secs_f64());
}
