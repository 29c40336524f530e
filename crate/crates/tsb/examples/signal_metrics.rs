//! Tours the signal metrics: SI-SDR and its improvement, STOI, the failure
//! rate, and SNR-controlled noise mixing.
//!
//! Run: cargo run --release --example signal_metrics

use rand::Rng;
use tsb::audio::{AudioSignal, SAMPLE_RATE};
use tsb::metrics::{failure_rate, mix_at_snr, si_sdr, si_sdr_improvement, stoi, Snr};
use tsb::seeding::rng_for;

fn main() -> tsb::Result<()> {
    // A harmonic, amplitude-modulated "speech-like" reference.
    let n = 2 * SAMPLE_RATE as usize;
    let reference: Vec<f32> = (0..n)
        .map(|i| {
            let t = i as f64 / SAMPLE_RATE as f64;
            let am = 0.55 + 0.45 * (2.0 * std::f64::consts::PI * 4.0 * t).sin();
            let mut v = 0.0;
            for (k, a) in [(1.0, 0.5), (2.0, 0.25), (3.0, 0.15)] {
                v += a * (2.0 * std::f64::consts::PI * 170.0 * k * t).sin();
            }
            (0.4 * am * v) as f32
        })
        .collect();
    let reference = AudioSignal::new(reference, SAMPLE_RATE)?;

    let mut rng = rng_for(7, "metrics-example", 0);
    let noise =
        AudioSignal::new((0..n).map(|_| rng.gen_range(-0.3..0.3)).collect(), SAMPLE_RATE)?;

    for snr in [10.0, 0.0, -5.0] {
        let mixed = mix_at_snr(&reference, &noise, Snr::Db(snr), 3)?;
        println!(
            "mixed at {snr:>5} dB: si_sdr = {:6.2} dB, stoi = {:.3}",
            si_sdr(&mixed, &reference)?,
            stoi(&mixed, &reference)?
        );
    }

    // An "enhanced" estimate: the same mixture with most noise removed.
    let mix = mix_at_snr(&reference, &noise, Snr::Db(0.0), 3)?;
    let est = AudioSignal::new(
        mix.samples()
            .iter()
            .zip(reference.samples())
            .map(|(&m, &r)| r + 0.2 * (m - r))
            .collect(),
        SAMPLE_RATE,
    )?;
    let sdri = si_sdr_improvement(&est, &mix, &reference)?;
    println!("enhancement improvement: {sdri:.2} dB SI-SDRi");

    let sdris = [sdri, 0.4, 2.5, 1.0, -1.2];
    println!("failure rate over {:?}: {:.1}%", sdris, failure_rate(&sdris)?);
    Ok(())
}
