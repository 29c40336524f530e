//! Differentiable training losses: negative SI-SNR, frame cross-entropy and
//! CTC. Lattice and reduction arithmetic runs in f64 internally regardless of
//! the engine precision.

use crate::error::{Error, Result};
use crate::metrics::{SI_SDR_CLAMP_DB, SI_SDR_EPS};

use super::{Real, Tape, TensorData, Var};

/// Log-domain zero; also the underflow guard of the CTC lattice.
const LOG_ZERO: f64 = -1e30;

fn log_sum_exp(vals: &[f64]) -> f64 {
    let m = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m <= LOG_ZERO {
        return LOG_ZERO;
    }
    m + vals.iter().map(|&v| (v - m).exp()).sum::<f64>().ln()
}

impl<F: Real> Tape<F> {
    /// Negative scale-invariant SNR of `est` against a fixed reference.
    ///
    /// Differentiable in `est` wherever the +-80 dB clamp is inactive; inside
    /// the clamp the gradient is zero.
    pub fn neg_si_snr(&mut self, est: Var, reference: &[F]) -> Var {
        let ve = self.value(est);
        assert_eq!(ve.shape(), [reference.len()], "neg_si_snr length mismatch");
        let target: Vec<f64> = reference.iter().map(|x| x.as_f64()).collect();
        let (loss, _) = neg_si_snr_forward(&ve.to_f64_vec(), &target);
        let needs = self.needs_grad(est);
        self.push(
            TensorData::scalar(F::from_f64(loss)),
            needs,
            Some(Box::new(move |vals, g, sink| {
                let e = vals[est.0].to_f64_vec();
                let (_, grad) = neg_si_snr_forward(&e, &target);
                let gv = g.item().as_f64();
                sink(
                    est.0,
                    TensorData::vector(grad.iter().map(|&d| F::from_f64(d * gv)).collect()),
                );
            })),
        )
    }

    /// Mean cross-entropy of per-frame logits against integer labels.
    pub fn cross_entropy_logits(&mut self, logits: Var, labels: &[usize]) -> Var {
        let vl = self.value(logits);
        let (t, c) = (vl.rows(), vl.cols());
        assert_eq!(labels.len(), t, "one label per frame required");
        assert!(labels.iter().all(|&l| l < c), "label out of range");
        let labels = labels.to_vec();
        let x = vl.to_f64_vec();
        let mut loss = 0.0;
        for tt in 0..t {
            let row = &x[tt * c..(tt + 1) * c];
            let lse = log_sum_exp(row);
            loss += lse - row[labels[tt]];
        }
        loss /= t as f64;
        let needs = self.needs_grad(logits);
        self.push(
            TensorData::scalar(F::from_f64(loss)),
            needs,
            Some(Box::new(move |vals, g, sink| {
                let x = vals[logits.0].to_f64_vec();
                let gv = g.item().as_f64() / t as f64;
                let mut dx = vec![F::zero(); t * c];
                for tt in 0..t {
                    let row = &x[tt * c..(tt + 1) * c];
                    let lse = log_sum_exp(row);
                    for j in 0..c {
                        let p = (row[j] - lse).exp();
                        let onehot = if j == labels[tt] { 1.0 } else { 0.0 };
                        dx[tt * c + j] = F::from_f64((p - onehot) * gv);
                    }
                }
                sink(logits.0, TensorData::matrix(t, c, dx));
            })),
        )
    }

    /// CTC loss over per-frame log-probabilities (rows of `log_probs` must
    /// already be log-softmaxed). Blank index is 0.
    ///
    /// Returns an error when the blank-interleaved label expansion does not
    /// fit into the available frames.
    pub fn ctc_loss(&mut self, log_probs: Var, label: &[usize]) -> Result<Var> {
        let vl = self.value(log_probs);
        let (t, v) = (vl.rows(), vl.cols());
        if label.iter().any(|&k| k == 0 || k >= v) {
            return Err(Error::Train(
                "ctc label contains blank or out-of-vocabulary token".into(),
            ));
        }
        let min_t = expanded_label_len(label);
        if t < min_t {
            return Err(Error::Train(format!(
                "ctc label needs at least {min_t} frames, got {t}"
            )));
        }
        // Blank-interleaved expansion: ^ a ^ b ^ ...
        let mut ext = Vec::with_capacity(2 * label.len() + 1);
        ext.push(0usize);
        for &k in label {
            ext.push(k);
            ext.push(0);
        }
        let s = ext.len();
        let y = vl.to_f64_vec();
        let alpha = ctc_forward(&y, t, v, &ext);
        let log_p = final_log_prob(&alpha, t, s);
        let loss = -log_p;
        let ext_b = ext.clone();
        let needs = self.needs_grad(log_probs);
        Ok(self.push(
            TensorData::scalar(F::from_f64(loss)),
            needs,
            Some(Box::new(move |vals, g, sink| {
                let y = vals[log_probs.0].to_f64_vec();
                let alpha = ctc_forward(&y, t, v, &ext_b);
                let beta = ctc_backward(&y, t, v, &ext_b);
                let log_p = final_log_prob(&alpha, t, s);
                let gv = g.item().as_f64();
                let mut dx = vec![F::zero(); t * v];
                let mut occ: Vec<Vec<usize>> = vec![Vec::new(); v];
                for (ss, &k) in ext_b.iter().enumerate() {
                    occ[k].push(ss);
                }
                let mut terms = Vec::new();
                for tt in 0..t {
                    for k in 0..v {
                        if occ[k].is_empty() {
                            continue;
                        }
                        terms.clear();
                        for &ss in &occ[k] {
                            let val = alpha[tt * s + ss] + beta[tt * s + ss] - y[tt * v + k];
                            if val > LOG_ZERO {
                                terms.push(val);
                            }
                        }
                        if terms.is_empty() {
                            continue;
                        }
                        let l = log_sum_exp(&terms);
                        dx[tt * v + k] = F::from_f64(-((l - log_p).exp()) * gv);
                    }
                }
                sink(log_probs.0, TensorData::matrix(t, v, dx));
            })),
        ))
    }
}

/// Minimum frame count admitting a label: blank-expanded length collapses to
/// |label| + number of adjacent repeats.
pub fn expanded_label_len(label: &[usize]) -> usize {
    let repeats = label.windows(2).filter(|w| w[0] == w[1]).count();
    label.len() + repeats
}

fn ctc_forward(y: &[f64], t: usize, v: usize, ext: &[usize]) -> Vec<f64> {
    let s = ext.len();
    let mut alpha = vec![LOG_ZERO; t * s];
    alpha[0] = y[ext[0]];
    if s > 1 {
        alpha[1] = y[ext[1]];
    }
    for tt in 1..t {
        for ss in 0..s {
            let mut terms = [LOG_ZERO; 3];
            let mut n = 0;
            terms[n] = alpha[(tt - 1) * s + ss];
            n += 1;
            if ss >= 1 {
                terms[n] = alpha[(tt - 1) * s + ss - 1];
                n += 1;
            }
            if ss >= 2 && ext[ss] != 0 && ext[ss] != ext[ss - 2] {
                terms[n] = alpha[(tt - 1) * s + ss - 2];
                n += 1;
            }
            let prev = log_sum_exp(&terms[..n]);
            alpha[tt * s + ss] =
                if prev <= LOG_ZERO { LOG_ZERO } else { prev + y[tt * v + ext[ss]] };
        }
    }
    alpha
}

fn ctc_backward(y: &[f64], t: usize, v: usize, ext: &[usize]) -> Vec<f64> {
    let s = ext.len();
    let mut beta = vec![LOG_ZERO; t * s];
    beta[(t - 1) * s + s - 1] = y[(t - 1) * v + ext[s - 1]];
    if s > 1 {
        beta[(t - 1) * s + s - 2] = y[(t - 1) * v + ext[s - 2]];
    }
    for tt in (0..t - 1).rev() {
        for ss in 0..s {
            let mut terms = [LOG_ZERO; 3];
            let mut n = 0;
            terms[n] = beta[(tt + 1) * s + ss];
            n += 1;
            if ss + 1 < s {
                terms[n] = beta[(tt + 1) * s + ss + 1];
                n += 1;
            }
            if ss + 2 < s && ext[ss + 2] != 0 && ext[ss + 2] != ext[ss] {
                terms[n] = beta[(tt + 1) * s + ss + 2];
                n += 1;
            }
            let next = log_sum_exp(&terms[..n]);
            beta[tt * s + ss] =
                if next <= LOG_ZERO { LOG_ZERO } else { next + y[tt * v + ext[ss]] };
        }
    }
    beta
}

fn final_log_prob(alpha: &[f64], t: usize, s: usize) -> f64 {
    let mut terms = vec![alpha[(t - 1) * s + s - 1]];
    if s >= 2 {
        terms.push(alpha[(t - 1) * s + s - 2]);
    }
    log_sum_exp(&terms)
}

/// Shared forward math of the negative SI-SNR loss: returns (loss, d loss /
/// d est). The gradient is zero where the clamp is active.
fn neg_si_snr_forward(est: &[f64], reference: &[f64]) -> (f64, Vec<f64>) {
    let n = est.len() as f64;
    let mean_e = est.iter().sum::<f64>() / n;
    let mean_r = reference.iter().sum::<f64>() / n;
    let e0: Vec<f64> = est.iter().map(|&x| x - mean_e).collect();
    let r0: Vec<f64> = reference.iter().map(|&x| x - mean_r).collect();
    let dot_er: f64 = e0.iter().zip(&r0).map(|(a, b)| a * b).sum();
    let dot_rr: f64 = r0.iter().map(|x| x * x).sum();
    let alpha = dot_er / dot_rr;
    let mut a_pow = 0.0;
    let mut b_pow = 0.0;
    let mut resid = vec![0.0; e0.len()];
    for i in 0..e0.len() {
        let t = alpha * r0[i];
        let d = e0[i] - t;
        resid[i] = d;
        a_pow += t * t;
        b_pow += d * d;
    }
    let a = a_pow + SI_SDR_EPS;
    let b = b_pow + SI_SDR_EPS;
    let db = 10.0 * (a / b).log10();
    if db.abs() >= SI_SDR_CLAMP_DB {
        let loss = -db.clamp(-SI_SDR_CLAMP_DB, SI_SDR_CLAMP_DB);
        return (loss, vec![0.0; e0.len()]);
    }
    // d si_sdr / d e0 = C * (2 alpha r0 / A - 2 d / B); project out the mean.
    let c = 10.0 / std::f64::consts::LN_10;
    let mut grad: Vec<f64> = (0..e0.len())
        .map(|i| -(c * (2.0 * alpha * r0[i] / a - 2.0 * resid[i] / b)))
        .collect();
    let gm = grad.iter().sum::<f64>() / n;
    for g in grad.iter_mut() {
        *g -= gm;
    }
    (-db, grad)
}

#[cfg(test)]
mod tests {
    use super::super::{Tape, TensorData};
    use super::*;

    #[test]
    fn neg_si_snr_matches_pure_metric() {
        let est = [1.0, 1.0, 0.0, 1.0];
        let reference = [1.0, 1.0, 0.0, 0.0];
        let mut tape = Tape::<f64>::new();
        let e = tape.leaf(TensorData::vector(est.to_vec()));
        let loss = tape.neg_si_snr(e, &reference);
        let expect = crate::metrics::si_sdr_samples(&est, &reference).unwrap();
        assert!((tape.value(loss).item() + expect).abs() < 1e-12);
        assert!((tape.value(loss).item() - 3.0103).abs() < 1e-3);
    }

    #[test]
    fn neg_si_snr_clamps_with_zero_gradient() {
        let reference = [0.5, -0.25, 0.75, -0.5];
        let mut tape = Tape::<f64>::new();
        let e = tape.leaf(TensorData::vector(reference.to_vec()));
        let loss = tape.neg_si_snr(e, &reference);
        assert_eq!(tape.value(loss).item(), -80.0);
        let mut grads = tape.backward(loss);
        assert!(grads.take(e, &[4]).data().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn cross_entropy_uniform_is_ln3() {
        let mut tape = Tape::<f64>::new();
        let logits = tape.leaf(TensorData::matrix(5, 3, vec![0.0; 15]));
        let loss = tape.cross_entropy_logits(logits, &[0, 1, 2, 1, 0]);
        assert!((tape.value(loss).item() - 3f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn ctc_single_frame_certain_token() {
        // T=1, |V|=2, P(a)=1 -> loss 0
        let mut tape = Tape::<f64>::new();
        let lp = tape.leaf(TensorData::matrix(1, 2, vec![LOG_ZERO, 0.0]));
        let loss = tape.ctc_loss(lp, &[1]).unwrap();
        assert!(tape.value(loss).item().abs() < 1e-9);
    }

    #[test]
    fn ctc_two_frame_uniform_is_quarter_times_three() {
        // T=2 uniform over {blank, a}: paths a., .a, aa -> P = 0.75
        let p = (0.5f64).ln();
        let mut tape = Tape::<f64>::new();
        let lp = tape.leaf(TensorData::matrix(2, 2, vec![p, p, p, p]));
        let loss = tape.ctc_loss(lp, &[1]).unwrap();
        let total = (-tape.value(loss).item()).exp();
        assert!((total - 0.75).abs() < 1e-12, "{total}");
        assert!((tape.value(loss).item() - 0.2876820724517809).abs() < 1e-12);
    }

    #[test]
    fn ctc_empty_label_is_all_blank_path() {
        let mut tape = Tape::<f64>::new();
        let rows = vec![
            (0.7f64).ln(),
            (0.3f64).ln(),
            (0.4f64).ln(),
            (0.6f64).ln(),
            (0.9f64).ln(),
            (0.1f64).ln(),
        ];
        let lp = tape.leaf(TensorData::matrix(3, 2, rows));
        let loss = tape.ctc_loss(lp, &[]).unwrap();
        let expect = -((0.7f64 * 0.4 * 0.9).ln());
        assert!((tape.value(loss).item() - expect).abs() < 1e-12);
    }

    #[test]
    fn ctc_rejects_inadmissible_labels() {
        let mut tape = Tape::<f64>::new();
        let lp = tape.leaf(TensorData::matrix(2, 3, vec![0.0; 6]));
        // "aa" needs a separating blank: min 3 frames
        assert!(tape.ctc_loss(lp, &[1, 1]).is_err());
        assert_eq!(expanded_label_len(&[1, 1]), 3);
        assert_eq!(expanded_label_len(&[1, 2]), 2);
        // blank in the label is refused
        assert!(tape.ctc_loss(lp, &[0]).is_err());
    }
}
