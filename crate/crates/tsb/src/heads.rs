//! Task-oriented decoders: the time-domain masking head shared by
//! extraction and enhancement, the frame classifier for voice activity, and
//! the CTC transcription head with greedy and prefix-beam decoding.

use std::collections::HashMap;

use crate::autograd::{Real, Tape, TensorData, Var};
use crate::encoder::{bilstm_forward, init_bilstm};
use crate::error::{Error, Result};
use crate::params::{Binding, ParamSet};

/// Wave encoder/decoder geometry of the masking head.
pub const MASK_FILTERS: usize = 512;
pub const MASK_KERNEL: usize = 1024;
pub const MASK_STRIDE: usize = 320;
/// Symmetric waveform padding keeping conv frames on the upstream grid.
pub const WAVE_PAD: usize = (MASK_KERNEL - MASK_STRIDE) / 2;

/// tss / ntss / ns frame classes.
pub const PVAD_CLASSES: usize = 3;

/// Seeds the masking head (conv wave encoder, mask projection, transposed
/// conv decoder) under `prefix`. `feat_width` is the Z_x width 2H.
pub fn init_mask_head<F: Real>(params: &mut ParamSet<F>, prefix: &str, feat_width: usize, seed: u64) {
    params.init_uniform(&format!("{prefix}.enc.w"), vec![MASK_FILTERS, MASK_KERNEL], MASK_KERNEL, seed);
    params.init_zeros(&format!("{prefix}.enc.b"), vec![MASK_FILTERS]);
    params.init_uniform(&format!("{prefix}.mask.w"), vec![feat_width, MASK_FILTERS], feat_width, seed);
    params.init_zeros(&format!("{prefix}.mask.b"), vec![MASK_FILTERS]);
    params.init_uniform(&format!("{prefix}.dec.w"), vec![MASK_FILTERS, MASK_KERNEL], MASK_KERNEL, seed);
}

/// Intermediates of the masking head.
pub struct MaskDetail {
    /// ReLU conv features of the mixture (F x 512).
    pub z_y: Var,
    /// Nonnegative mask from Z_x (F x 512).
    pub mask: Var,
    /// Reconstructed target waveform, trimmed to the input length.
    pub estimate: Var,
}

/// Time-domain masking head: encodes the mixture waveform, masks it with a
/// ReLU projection of Z_x, and reconstructs by transposed convolution with
/// overlap-add. Output length equals input length.
pub fn mask_head_forward<F: Real>(
    tape: &mut Tape<F>,
    binding: &Binding,
    prefix: &str,
    wave: Var,
    z_x: Var,
) -> Result<MaskDetail> {
    let n = match tape.value(wave).shape() {
        [n] => *n,
        s => return Err(Error::Shape(format!("mask head wave must be 1-D, got {s:?}"))),
    };
    if n < MASK_KERNEL {
        return Err(Error::Shape(format!(
            "waveform shorter than one kernel: {n} < {MASK_KERNEL}"
        )));
    }
    let x2 = tape.reshape(wave, vec![n, 1]);
    let conv = tape.conv1d(
        x2,
        binding.var(&format!("{prefix}.enc.w")),
        binding.var(&format!("{prefix}.enc.b")),
        MASK_KERNEL,
        MASK_STRIDE,
        WAVE_PAD,
        WAVE_PAD,
    );
    let z_y = tape.relu(conv);
    let mask_lin = tape.affine(
        z_x,
        binding.var(&format!("{prefix}.mask.w")),
        binding.var(&format!("{prefix}.mask.b")),
    );
    let mask = tape.relu(mask_lin);
    // The conv grid and the upstream grid can differ by one frame; truncate
    // both to the common prefix.
    let frames = tape.value(z_y).rows().min(tape.value(mask).rows());
    let z_y_c = tape.slice_rows(z_y, 0, frames);
    let mask_c = tape.slice_rows(mask, 0, frames);
    let masked = tape.mul(mask_c, z_y_c);
    let estimate = tape.deconv1d(
        masked,
        binding.var(&format!("{prefix}.dec.w")),
        MASK_STRIDE,
        WAVE_PAD,
        n,
    );
    Ok(MaskDetail { z_y: z_y_c, mask: mask_c, estimate })
}

/// Seeds the frame classifier under `prefix`.
pub fn init_pvad_head<F: Real>(params: &mut ParamSet<F>, prefix: &str, feat_width: usize, seed: u64) {
    params.init_uniform(&format!("{prefix}.cls.w"), vec![feat_width, PVAD_CLASSES], feat_width, seed);
    params.init_zeros(&format!("{prefix}.cls.b"), vec![PVAD_CLASSES]);
}

/// Frame logits over {tss, ntss, ns}.
pub fn pvad_logits<F: Real>(tape: &mut Tape<F>, binding: &Binding, prefix: &str, z_x: Var) -> Var {
    tape.affine(
        z_x,
        binding.var(&format!("{prefix}.cls.w")),
        binding.var(&format!("{prefix}.cls.b")),
    )
}

/// Row-stochastic frame posteriors.
pub fn pvad_forward<F: Real>(tape: &mut Tape<F>, binding: &Binding, prefix: &str, z_x: Var) -> Var {
    let logits = pvad_logits(tape, binding, prefix, z_x);
    tape.softmax_rows(logits)
}

/// Seeds the transcription head under `prefix`.
pub fn init_asr_head<F: Real>(
    params: &mut ParamSet<F>,
    prefix: &str,
    feat_width: usize,
    hidden: usize,
    seed: u64,
) {
    init_bilstm(params, &format!("{prefix}.lstm"), feat_width, hidden, seed);
    params.init_uniform(&format!("{prefix}.out.w"), vec![2 * hidden, VOCAB_SIZE], 2 * hidden, seed);
    params.init_zeros(&format!("{prefix}.out.b"), vec![VOCAB_SIZE]);
}

/// Per-frame log-probabilities over the character vocabulary (T x 29).
pub fn asr_log_probs<F: Real>(tape: &mut Tape<F>, binding: &Binding, prefix: &str, z_x: Var) -> Var {
    let h = bilstm_forward(tape, binding, &format!("{prefix}.lstm"), z_x);
    let logits = tape.affine(
        h,
        binding.var(&format!("{prefix}.out.w")),
        binding.var(&format!("{prefix}.out.b")),
    );
    tape.log_softmax_rows(logits)
}

// --- character vocabulary ----------------------------------------------------

/// Vocabulary: blank, space, apostrophe, a-z. Blank is fixed at index 0.
pub const VOCAB_SIZE: usize = 29;
pub const BLANK: usize = 0;

pub fn char_to_token(c: char) -> Option<usize> {
    match c {
        ' ' => Some(1),
        '\'' => Some(2),
        'a'..='z' => Some(3 + (c as usize - 'a' as usize)),
        _ => None,
    }
}

pub fn token_to_char(t: usize) -> Option<char> {
    match t {
        1 => Some(' '),
        2 => Some('\''),
        3..=28 => Some((b'a' + (t - 3) as u8) as char),
        _ => None,
    }
}

/// Encodes a transcript, folding upper case to lower. Characters outside the
/// vocabulary are rejected.
pub fn encode_text(text: &str) -> Result<Vec<usize>> {
    text.chars()
        .map(|c| {
            let c = c.to_ascii_lowercase();
            char_to_token(c).ok_or_else(|| {
                Error::Eval(format!("character {c:?} outside the transcription vocabulary"))
            })
        })
        .collect()
}

pub fn decode_tokens(tokens: &[usize]) -> String {
    tokens.iter().filter_map(|&t| token_to_char(t)).collect()
}

/// Greedy CTC decoding: per-frame argmax, collapse repeats, drop blanks.
pub fn ctc_greedy_decode<F: Real>(log_probs: &TensorData<F>) -> Vec<usize> {
    let (t, v) = (log_probs.rows(), log_probs.cols());
    let mut out = Vec::new();
    let mut prev = usize::MAX;
    for tt in 0..t {
        let row = &log_probs.data()[tt * v..(tt + 1) * v];
        let mut best = 0;
        for k in 1..v {
            if row[k] > row[best] {
                best = k;
            }
        }
        if best != prev && best != BLANK {
            out.push(best);
        }
        prev = best;
    }
    out
}

/// Prefix beam search over CTC log-probabilities (no language model).
/// `width` = 1 approximates greedy; larger widths explore merges of prefix
/// probability mass.
pub fn ctc_beam_decode<F: Real>(log_probs: &TensorData<F>, width: usize) -> Vec<usize> {
    let (t, v) = (log_probs.rows(), log_probs.cols());
    let width = width.max(1);
    // prefix -> (log p ending in blank, log p ending in non-blank)
    let mut beams: HashMap<Vec<usize>, (f64, f64)> = HashMap::new();
    beams.insert(Vec::new(), (0.0, f64::NEG_INFINITY));
    let lse = |a: f64, b: f64| -> f64 {
        if a == f64::NEG_INFINITY {
            b
        } else if b == f64::NEG_INFINITY {
            a
        } else {
            let m = a.max(b);
            m + ((a - m).exp() + (b - m).exp()).ln()
        }
    };
    for tt in 0..t {
        let row: Vec<f64> =
            log_probs.data()[tt * v..(tt + 1) * v].iter().map(|x| x.as_f64()).collect();
        let mut next: HashMap<Vec<usize>, (f64, f64)> = HashMap::new();
        for (prefix, &(pb, pnb)) in &beams {
            let total = lse(pb, pnb);
            // blank extends the prefix unchanged
            {
                let entry = next.entry(prefix.clone()).or_insert((f64::NEG_INFINITY, f64::NEG_INFINITY));
                entry.0 = lse(entry.0, total + row[BLANK]);
            }
            for k in 1..v {
                let p = row[k];
                if prefix.last() == Some(&k) {
                    // same symbol: repeat within the run...
                    let entry = next
                        .entry(prefix.clone())
                        .or_insert((f64::NEG_INFINITY, f64::NEG_INFINITY));
                    entry.1 = lse(entry.1, pnb + p);
                    // ...or a new run after an intervening blank
                    let mut ext = prefix.clone();
                    ext.push(k);
                    let entry = next.entry(ext).or_insert((f64::NEG_INFINITY, f64::NEG_INFINITY));
                    entry.1 = lse(entry.1, pb + p);
                } else {
                    let mut ext = prefix.clone();
                    ext.push(k);
                    let entry = next.entry(ext).or_insert((f64::NEG_INFINITY, f64::NEG_INFINITY));
                    entry.1 = lse(entry.1, total + p);
                }
            }
        }
        let mut ranked: Vec<(Vec<usize>, (f64, f64))> = next.into_iter().collect();
        ranked.sort_by(|a, b| {
            let ta = lse(a.1 .0, a.1 .1);
            let tb = lse(b.1 .0, b.1 .1);
            tb.partial_cmp(&ta).unwrap().then_with(|| a.0.cmp(&b.0))
        });
        ranked.truncate(width);
        beams = ranked.into_iter().collect();
    }
    beams
        .into_iter()
        .max_by(|a, b| {
            let ta = lse(a.1 .0, a.1 .1);
            let tb = lse(b.1 .0, b.1 .1);
            ta.partial_cmp(&tb).unwrap().then_with(|| b.0.cmp(&a.0))
        })
        .map(|(prefix, _)| prefix)
        .unwrap_or_default()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::bind;
    use crate::seeding::rng_for;
    use rand::Rng;

    fn logp_from_rows(rows: Vec<Vec<f64>>) -> TensorData<f64> {
        let v = rows[0].len();
        let t = rows.len();
        let mut data = Vec::new();
        for r in rows {
            let s: f64 = r.iter().sum();
            for p in r {
                data.push((p / s).ln());
            }
        }
        TensorData::matrix(t, v, data)
    }

    #[test]
    fn greedy_collapse_rules() {
        // frames argmax [a, a, blank, b] -> "ab"
        let lp = logp_from_rows(vec![
            vec![0.1, 0.8, 0.1],
            vec![0.2, 0.7, 0.1],
            vec![0.9, 0.05, 0.05],
            vec![0.1, 0.1, 0.8],
        ]);
        assert_eq!(ctc_greedy_decode(&lp), vec![1, 2]);
        // all blank -> empty
        let lp = logp_from_rows(vec![vec![0.9, 0.05, 0.05]; 3]);
        assert_eq!(ctc_greedy_decode(&lp), Vec::<usize>::new());
        // [a, blank, a] -> "aa"
        let lp = logp_from_rows(vec![
            vec![0.1, 0.8, 0.1],
            vec![0.8, 0.1, 0.1],
            vec![0.1, 0.8, 0.1],
        ]);
        assert_eq!(ctc_greedy_decode(&lp), vec![1, 1]);
    }

    #[test]
    fn beam_matches_greedy_on_peaked_distributions() {
        let lp = logp_from_rows(vec![
            vec![0.05, 0.9, 0.05],
            vec![0.9, 0.05, 0.05],
            vec![0.05, 0.05, 0.9],
            vec![0.05, 0.05, 0.9],
        ]);
        assert_eq!(ctc_beam_decode(&lp, 4), ctc_greedy_decode(&lp));
    }

    #[test]
    fn beam_can_beat_greedy_by_merging_mass() {
        // Classic case: greedy picks blank-heavy frames, beam merges the
        // probability of all paths writing "a".
        let lp = logp_from_rows(vec![vec![0.4, 0.6], vec![0.6, 0.4]]);
        // greedy: argmax = [a, blank] -> "a"; beam must agree here
        assert_eq!(ctc_beam_decode(&lp, 4), vec![1]);
        let lp2 = logp_from_rows(vec![vec![0.5, 0.5], vec![0.48, 0.52]]);
        // P("") = .5*.48 = .24 ; P("a") = .5*.52 + .5*.48 + .5*.52 = .76
        assert_eq!(ctc_beam_decode(&lp2, 4), vec![1]);
    }

    #[test]
    fn vocabulary_round_trip_and_rejection() {
        let toks = encode_text("The cat's MAT").unwrap();
        assert_eq!(decode_tokens(&toks), "the cat's mat");
        assert_eq!(toks.len(), 13);
        assert!(encode_text("bad;char").is_err());
        assert_eq!(VOCAB_SIZE, 29);
        assert_eq!(char_to_token(' '), Some(1));
        assert_eq!(char_to_token('\''), Some(2));
        assert_eq!(char_to_token('a'), Some(3));
        assert_eq!(char_to_token('z'), Some(28));
    }

    fn tiny_mask_params(feat_width: usize) -> ParamSet<f64> {
        let mut p = ParamSet::new();
        init_mask_head(&mut p, "head.tse", feat_width, 3);
        p
    }

    #[test]
    fn mask_head_output_length_matches_input() {
        let p = tiny_mask_params(4);
        for n in [MASK_KERNEL, 2000, 16_000, 16_001, 48_000] {
            let mut tape = Tape::<f64>::new();
            let binding = bind(&mut tape, &p, |_| false);
            let mut rng = rng_for(n as u64, "mask-wave", 0);
            let wave: Vec<f64> = (0..n).map(|_| rng.gen_range(-0.5..0.5)).collect();
            let w = tape.constant(TensorData::vector(wave));
            let t_up = n.div_ceil(MASK_STRIDE);
            let zx_data: Vec<f64> = (0..t_up * 4).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let zx = tape.constant(TensorData::matrix(t_up, 4, zx_data));
            let detail = mask_head_forward(&mut tape, &binding, "head.tse", w, zx).unwrap();
            assert_eq!(tape.value(detail.estimate).shape(), &[n], "n = {n}");
        }
    }

    #[test]
    fn one_second_wave_gives_50_conv_frames() {
        let p = tiny_mask_params(4);
        let mut tape = Tape::<f64>::new();
        let binding = bind(&mut tape, &p, |_| false);
        let w = tape.constant(TensorData::vector(vec![0.01; 16_000]));
        let zx = tape.constant(TensorData::matrix(50, 4, vec![0.1; 200]));
        let detail = mask_head_forward(&mut tape, &binding, "head.tse", w, zx).unwrap();
        // floor((16000 + 2*352 - 1024)/320) + 1 = 50, matching the upstream grid
        assert_eq!(tape.value(detail.z_y).rows(), 50);
    }

    #[test]
    fn mask_is_nonnegative_and_zero_mask_silences_output() {
        let mut p = tiny_mask_params(4);
        let mut tape = Tape::<f64>::new();
        // Force the mask projection to a large negative bias: ReLU clamps to 0.
        p.insert("head.tse.mask.w", TensorData::matrix(4, MASK_FILTERS, vec![0.0; 4 * MASK_FILTERS]));
        p.insert("head.tse.mask.b", TensorData::vector(vec![-1.0; MASK_FILTERS]));
        let binding = bind(&mut tape, &p, |_| false);
        let mut rng = rng_for(9, "mask-zero", 0);
        let wave: Vec<f64> = (0..2000).map(|_| rng.gen_range(-0.5..0.5)).collect();
        let w = tape.constant(TensorData::vector(wave));
        let zx = tape.constant(TensorData::matrix(7, 4, vec![0.5; 28]));
        let detail = mask_head_forward(&mut tape, &binding, "head.tse", w, zx).unwrap();
        assert!(tape.value(detail.mask).data().iter().all(|&v| v >= 0.0));
        assert!(tape.value(detail.estimate).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_conv_pair_reconstructs_input() {
        // Perfect-reconstruction test hook: filters 0..320 are unit impulses
        // at offsets WAVE_PAD..WAVE_PAD+320, so conv frame f reads
        // wave[f*320 + k] on filter k; the decoder mirrors the encoder and
        // overlap-add writes each sample back exactly once. The wave is kept
        // positive so the conv-side ReLU is transparent.
        let mut p = ParamSet::new();
        init_mask_head(&mut p, "head.tse", 2, 1);
        let mut enc_w = vec![0.0; MASK_FILTERS * MASK_KERNEL];
        let mut dec_w = vec![0.0; MASK_FILTERS * MASK_KERNEL];
        let mut mb = vec![-1.0; MASK_FILTERS];
        for k in 0..MASK_STRIDE {
            enc_w[k * MASK_KERNEL + WAVE_PAD + k] = 1.0;
            dec_w[k * MASK_KERNEL + WAVE_PAD + k] = 1.0;
            mb[k] = 1.0;
        }
        p.insert("head.tse.enc.w", TensorData::matrix(MASK_FILTERS, MASK_KERNEL, enc_w));
        p.insert("head.tse.enc.b", TensorData::vector(vec![0.0; MASK_FILTERS]));
        p.insert("head.tse.mask.w", TensorData::matrix(2, MASK_FILTERS, vec![0.0; 2 * MASK_FILTERS]));
        p.insert("head.tse.mask.b", TensorData::vector(mb));
        p.insert("head.tse.dec.w", TensorData::matrix(MASK_FILTERS, MASK_KERNEL, dec_w));

        let n: usize = 3200;
        let mut tape = Tape::<f64>::new();
        let binding = bind(&mut tape, &p, |_| false);
        let mut rng = rng_for(10, "identity", 0);
        let wave: Vec<f64> = (0..n).map(|_| rng.gen_range(0.05..0.5)).collect();
        let w = tape.constant(TensorData::vector(wave.clone()));
        let t_up = n.div_ceil(MASK_STRIDE);
        let zx = tape.constant(TensorData::matrix(t_up, 2, vec![0.0; t_up * 2]));
        let detail = mask_head_forward(&mut tape, &binding, "head.tse", w, zx).unwrap();
        let est = tape.value(detail.estimate).data();
        for i in 0..n {
            assert!((est[i] - wave[i]).abs() < 1e-5, "sample {i}: {} vs {}", est[i], wave[i]);
        }
    }

    #[test]
    fn short_wave_is_rejected() {
        let p = tiny_mask_params(2);
        let mut tape = Tape::<f64>::new();
        let binding = bind(&mut tape, &p, |_| false);
        let w = tape.constant(TensorData::vector(vec![0.0; MASK_KERNEL - 1]));
        let zx = tape.constant(TensorData::matrix(3, 2, vec![0.0; 6]));
        assert!(mask_head_forward(&mut tape, &binding, "head.tse", w, zx).is_err());
    }

    #[test]
    fn pvad_uniform_at_zero_weights() {
        let mut p = ParamSet::new();
        init_pvad_head(&mut p, "head.pvad", 4, 1);
        p.insert("head.pvad.cls.w", TensorData::matrix(4, 3, vec![0.0; 12]));
        p.insert("head.pvad.cls.b", TensorData::vector(vec![0.0; 3]));
        let mut tape = Tape::<f64>::new();
        let binding = bind(&mut tape, &p, |_| false);
        let zx = tape.constant(TensorData::matrix(5, 4, vec![0.3; 20]));
        let post = pvad_forward(&mut tape, &binding, "head.pvad", zx);
        for &v in tape.value(post).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }
        // cross-entropy of the uniform posterior is ln 3
        let logits = pvad_logits(&mut tape, &binding, "head.pvad", zx);
        let ce = tape.cross_entropy_logits(logits, &[0, 1, 2, 0, 1]);
        assert!((tape.value(ce).item() - 3f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn asr_head_shapes() {
        let mut p = ParamSet::new();
        init_asr_head(&mut p, "head.tsasr", 6, 5, 2);
        let mut tape = Tape::<f64>::new();
        let binding = bind(&mut tape, &p, |_| false);
        let mut rng = rng_for(11, "asr", 0);
        let zx_data: Vec<f64> = (0..8 * 6).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let zx = tape.constant(TensorData::matrix(8, 6, zx_data));
        let lp = asr_log_probs(&mut tape, &binding, "head.tsasr", zx);
        assert_eq!(tape.value(lp).shape(), &[8, VOCAB_SIZE]);
        // rows are log-probabilities
        for t in 0..8 {
            let s: f64 = tape.value(lp).row(t).iter().map(|&x| x.exp()).sum();
            assert!((s - 1.0).abs() < 1e-9);
        }
    }
}
