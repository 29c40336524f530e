//! Runs the frozen toy upstream over a waveform, exports the layer stack as
//! a TSFB1 file, reimports it losslessly, and aggregates layers with a
//! learnable weighted sum.
//!
//! Real SSL features can enter the toolkit the same way: write them in the
//! TSFB1 layout (magic "TSFB", u32 version=1, u32 layers, u32 frames,
//! u32 dim, f32 LE payload, layer-major) and import.
//!
//! Run: cargo run --release --example features_roundtrip

use rand::Rng;
use tsb::autograd::{Tape, TensorData};
use tsb::params::ParamSet;
use tsb::seeding::rng_for;
use tsb::upstream::{
    export_features, import_features, weighted_sum, LayerStack, ToyUpstream, UpstreamConfig,
};

fn main() -> tsb::Result<()> {
    let cfg = UpstreamConfig::default();
    let upstream = ToyUpstream::new(cfg);
    let mut params = ParamSet::<f32>::new();
    upstream.init_params(&mut params);

    let mut rng = rng_for(3, "features-example", 0);
    let wave: Vec<f32> = (0..16_000).map(|_| rng.gen_range(-0.4..0.4)).collect();
    let stack = upstream.forward_stack(&params, &wave)?;
    println!(
        "upstream: {} layers x {} frames x {} dims (stride 320)",
        stack.layers(),
        stack.frames(),
        stack.dim()
    );

    let path = std::env::temp_dir().join("tsb_example_features.tsfb");
    export_features(&path, &stack)?;
    let imported = import_features(&path)?;
    assert_eq!(imported, stack);
    println!("TSFB1 round trip ok: {}", path.display());

    // Aggregate with logits dominated by layer 2: the output is layer 2.
    let mut tape = Tape::<f32>::new();
    let layers = LayerStack::<f32>::from_f32(&imported).to_tape_constants(&mut tape);
    let mut logits = vec![0.0f32; stack.layers()];
    logits[2] = 40.0;
    let w = tape.leaf(TensorData::vector(logits));
    let out = weighted_sum(&mut tape, &layers, w)?;
    let diff: f32 = tape
        .value(out)
        .data()
        .iter()
        .zip(stack.layer(2))
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f32::max)
        ;
    println!("one-hot-dominant weighted sum vs layer 2: max |diff| = {diff:.2e}");
    Ok(())
}
