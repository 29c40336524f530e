//! Layered waveform representations.
//!
//! Three sources feed the downstream models: a frozen deterministic toy
//! upstream (strided conv frontend + self-attention blocks on the 20 ms
//! frame grid), features imported from a TSFB1 file (the escape hatch for
//! real SSL features), and the learnable softmax-weighted layer aggregation
//! that combines a stack into one feature stream.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

use crate::autograd::{Real, Tape, TensorData, Var};
use crate::error::{Error, Result};
use crate::params::{bind, Binding, ParamSet};
use crate::FRAME_STRIDE;

/// Layered features: (layers x frames x dim), layer-major. Layer 0 is the
/// convolutional frontend output; layers 1.. are the block outputs.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerStack<F> {
    layers: usize,
    frames: usize,
    dim: usize,
    data: Vec<F>,
}

impl<F: Real> LayerStack<F> {
    pub fn new(layers: usize, frames: usize, dim: usize, data: Vec<F>) -> Result<Self> {
        if layers < 2 {
            return Err(Error::Shape(format!("layer stack needs >= 2 layers, got {layers}")));
        }
        if frames == 0 || dim == 0 {
            return Err(Error::Shape("layer stack with zero frames or dim".into()));
        }
        if data.len() != layers * frames * dim {
            return Err(Error::Shape(format!(
                "layer stack data length {} != {layers}x{frames}x{dim}",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.as_f64().is_finite()) {
            return Err(Error::Shape("layer stack contains non-finite values".into()));
        }
        Ok(Self { layers, frames, dim, data })
    }

    pub fn layers(&self) -> usize {
        self.layers
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn layer(&self, l: usize) -> &[F] {
        &self.data[l * self.frames * self.dim..(l + 1) * self.frames * self.dim]
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    /// Frames on the 320-sample grid covering `wave_len` samples.
    pub fn frames_for(wave_len: usize) -> usize {
        wave_len.div_ceil(FRAME_STRIDE)
    }

    /// Binds each layer as a tape constant.
    pub fn to_tape_constants(&self, tape: &mut Tape<F>) -> Vec<Var> {
        (0..self.layers)
            .map(|l| {
                tape.constant(TensorData::matrix(self.frames, self.dim, self.layer(l).to_vec()))
            })
            .collect()
    }

    pub fn to_f32(&self) -> LayerStack<f32> {
        LayerStack {
            layers: self.layers,
            frames: self.frames,
            dim: self.dim,
            data: self.data.iter().map(|&v| v.as_f32()).collect(),
        }
    }

    pub fn from_f32(other: &LayerStack<f32>) -> Self {
        Self {
            layers: other.layers,
            frames: other.frames,
            dim: other.dim,
            data: other.data.iter().map(|&v| F::from_f32(v)).collect(),
        }
    }
}

/// Softmax of layer-weight logits; the effective aggregation weights.
pub fn softmax_weights(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&x| (x - m).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Validated weighted layer aggregation: `out[t] = sum_l softmax(w)[l] *
/// layers[l][t]`, differentiable in both the logits and the stack.
pub fn weighted_sum<F: Real>(tape: &mut Tape<F>, layers: &[Var], logits: Var) -> Result<Var> {
    if layers.is_empty() {
        return Err(Error::Shape("weighted_sum over an empty stack".into()));
    }
    if tape.value(logits).shape() != [layers.len()] {
        return Err(Error::Shape(format!(
            "weighted_sum needs {} logits, got shape {:?}",
            layers.len(),
            tape.value(logits).shape()
        )));
    }
    let shape0 = tape.value(layers[0]).shape().to_vec();
    for (l, &v) in layers.iter().enumerate() {
        if tape.value(v).shape() != shape0 {
            return Err(Error::Shape(format!("layer {l} shape differs from layer 0")));
        }
    }
    Ok(tape.weighted_layer_sum(layers, logits))
}

/// Toy upstream geometry and seed.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct UpstreamConfig {
    /// Number of attention blocks; the stack has `layers + 1` entries.
    pub layers: usize,
    pub dim: usize,
    pub seed: u64,
}

impl Default for UpstreamConfig {
    fn default() -> Self {
        Self { layers: 4, dim: 64, seed: 0 }
    }
}

const CONV1_KERNEL: usize = 32;
const CONV1_STRIDE: usize = 16;
const CONV2_KERNEL: usize = 40;
const CONV2_STRIDE: usize = 20;

/// Frozen deterministic stand-in for a real SSL upstream.
///
/// Frontend: two strided convolutions (strides 16 and 20, total 320) with
/// tanh nonlinearities. Blocks: single-head self-attention plus a tanh
/// feedforward, residual, bounded by a final tanh. All parameters come from
/// a seeded orthogonal-style init and live under the `upstream.` prefix.
pub struct ToyUpstream {
    cfg: UpstreamConfig,
    calls: AtomicU64,
}

impl ToyUpstream {
    pub fn new(cfg: UpstreamConfig) -> Self {
        Self { cfg, calls: AtomicU64::new(0) }
    }

    pub fn config(&self) -> &UpstreamConfig {
        &self.cfg
    }

    /// Total forward invocations; the downstream consumes the upstream twice
    /// per sample (enrollment and mixture).
    pub fn call_count(&self) -> u64 {
        self.calls.load(Ordering::Relaxed)
    }

    /// Seeds all upstream parameters into `params`.
    pub fn init_params<F: Real>(&self, params: &mut ParamSet<F>) {
        let d = self.cfg.dim;
        let seed = self.cfg.seed;
        params.init_orthogonal("upstream.frontend.conv1.w", d, CONV1_KERNEL, 1.0, seed);
        params.init_zeros("upstream.frontend.conv1.b", vec![d]);
        params.init_orthogonal("upstream.frontend.conv2.w", d, CONV2_KERNEL * d, 1.0, seed);
        params.init_zeros("upstream.frontend.conv2.b", vec![d]);
        for l in 1..=self.cfg.layers {
            for m in ["wq", "wk", "wv", "wo"] {
                params.init_orthogonal(&format!("upstream.block{l}.attn.{m}"), d, d, 0.8, seed);
            }
            for m in ["bq", "bk", "bv", "bo"] {
                params.init_zeros(&format!("upstream.block{l}.attn.{m}"), vec![d]);
            }
            params.init_orthogonal(&format!("upstream.block{l}.ffn.w1"), d, 2 * d, 0.8, seed);
            params.init_zeros(&format!("upstream.block{l}.ffn.b1"), vec![2 * d]);
            params.init_orthogonal(&format!("upstream.block{l}.ffn.w2"), 2 * d, d, 0.8, seed);
            params.init_zeros(&format!("upstream.block{l}.ffn.b2"), vec![d]);
        }
    }

    /// Runs the upstream on a tape; returns one (frames x dim) node per
    /// stack layer. `wave` must be a 1-D node.
    pub fn forward_tape<F: Real>(
        &self,
        tape: &mut Tape<F>,
        wave: Var,
        binding: &Binding,
    ) -> Result<Vec<Var>> {
        let n = match tape.value(wave).shape() {
            [n] => *n,
            s => return Err(Error::Shape(format!("upstream wave must be 1-D, got {s:?}"))),
        };
        if n < FRAME_STRIDE {
            return Err(Error::Audio(format!(
                "wave too short for the upstream: {n} < {FRAME_STRIDE} samples"
            )));
        }
        self.calls.fetch_add(1, Ordering::Relaxed);
        let d = self.cfg.dim;
        let x = tape.reshape(wave, vec![n, 1]);
        let (pl1, pr1) = same_pads(n, CONV1_KERNEL, CONV1_STRIDE);
        let c1w = binding.var("upstream.frontend.conv1.w");
        let c1b = binding.var("upstream.frontend.conv1.b");
        let h1 = tape.conv1d(x, c1w, c1b, CONV1_KERNEL, CONV1_STRIDE, pl1, pr1);
        let h1 = tape.tanh(h1);
        let t1 = tape.value(h1).rows();
        let (pl2, pr2) = same_pads(t1, CONV2_KERNEL, CONV2_STRIDE);
        let c2w = binding.var("upstream.frontend.conv2.w");
        let c2b = binding.var("upstream.frontend.conv2.b");
        let h2 = tape.conv1d(h1, c2w, c2b, CONV2_KERNEL, CONV2_STRIDE, pl2, pr2);
        let layer0 = tape.tanh(h2);
        debug_assert_eq!(tape.value(layer0).rows(), LayerStack::<F>::frames_for(n));

        let scale = 1.0 / (d as f64).sqrt();
        let mut layers = vec![layer0];
        let mut x = layer0;
        for l in 1..=self.cfg.layers {
            let p = |m: &str| binding.var(&format!("upstream.block{l}.attn.{m}"));
            let q = tape.affine(x, p("wq"), p("bq"));
            let k = tape.affine(x, p("wk"), p("bk"));
            let v = tape.affine(x, p("wv"), p("bv"));
            let scores = tape.matmul_nt(q, k);
            let scores = tape.scale(scores, scale);
            let attn = tape.softmax_rows(scores);
            let ctx = tape.matmul(attn, v);
            let proj = tape.affine(ctx, p("wo"), p("bo"));
            let res = tape.add(x, proj);
            let f = |m: &str| binding.var(&format!("upstream.block{l}.ffn.{m}"));
            let hidden = tape.affine(res, f("w1"), f("b1"));
            let hidden = tape.tanh(hidden);
            let ffn = tape.affine(hidden, f("w2"), f("b2"));
            let res2 = tape.add(res, ffn);
            let out = tape.tanh(res2);
            layers.push(out);
            x = out;
        }
        Ok(layers)
    }

    /// Frozen forward on a scratch tape, yielding a plain stack.
    pub fn forward_stack<F: Real>(
        &self,
        params: &ParamSet<F>,
        wave: &[F],
    ) -> Result<LayerStack<F>> {
        let mut tape = Tape::<F>::new();
        let binding = bind(&mut tape, params, |_| false);
        let w = tape.constant(TensorData::vector(wave.to_vec()));
        let layers = self.forward_tape(&mut tape, w, &binding)?;
        let frames = tape.value(layers[0]).rows();
        let mut data = Vec::with_capacity(layers.len() * frames * self.cfg.dim);
        for &l in &layers {
            data.extend_from_slice(tape.value(l).data());
        }
        LayerStack::new(layers.len(), frames, self.cfg.dim, data)
    }
}

/// SAME-style padding: output length ceil(in/stride).
fn same_pads(input: usize, kernel: usize, stride: usize) -> (usize, usize) {
    let out = input.div_ceil(stride);
    let total = ((out - 1) * stride + kernel).saturating_sub(input);
    (total / 2, total - total / 2)
}

// --- TSFB1 feature files -----------------------------------------------------

const TSFB_MAGIC: &[u8; 4] = b"TSFB";
const TSFB_VERSION: u32 = 1;

/// Writes a layer stack as a TSFB1 file: magic "TSFB", u32 version=1,
/// u32 layers, u32 frames, u32 dim, then layers*frames*dim f32 LE values in
/// layer-major order.
pub fn export_features(path: &Path, stack: &LayerStack<f32>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(TSFB_MAGIC)?;
    w.write_all(&TSFB_VERSION.to_le_bytes())?;
    w.write_all(&(stack.layers() as u32).to_le_bytes())?;
    w.write_all(&(stack.frames() as u32).to_le_bytes())?;
    w.write_all(&(stack.dim() as u32).to_le_bytes())?;
    for &v in stack.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

/// Reads and validates a TSFB1 file; every header violation names the
/// offending field.
pub fn import_features(path: &Path) -> Result<LayerStack<f32>> {
    let mut bytes = Vec::new();
    BufReader::new(File::open(path)?).read_to_end(&mut bytes)?;
    if bytes.len() < 20 {
        return Err(Error::FeatureFormat("file shorter than the TSFB1 header".into()));
    }
    if &bytes[0..4] != TSFB_MAGIC {
        return Err(Error::FeatureFormat("bad magic (want TSFB)".into()));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap());
    let version = word(4);
    if version != TSFB_VERSION {
        return Err(Error::FeatureFormat(format!("unsupported version {version}")));
    }
    let layers = word(8) as usize;
    let frames = word(12) as usize;
    let dim = word(16) as usize;
    if layers < 2 {
        return Err(Error::FeatureFormat(format!("layers field must be >= 2, got {layers}")));
    }
    if frames == 0 {
        return Err(Error::FeatureFormat("frames field is zero".into()));
    }
    if dim == 0 {
        return Err(Error::FeatureFormat("dim field is zero".into()));
    }
    let want = layers * frames * dim * 4;
    let have = bytes.len() - 20;
    if have < want {
        return Err(Error::FeatureFormat("payload shorter than header promises".into()));
    }
    if have > want {
        return Err(Error::FeatureFormat("payload longer than header promises".into()));
    }
    let data: Vec<f32> = bytes[20..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    LayerStack::new(layers, frames, dim, data)
}
