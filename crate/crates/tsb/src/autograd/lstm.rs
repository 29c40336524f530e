//! Fused LSTM layer with hand-rolled truncation-free BPTT.
//!
//! Gate layout along the 4H axis is [input, forget, cell, output]. Initial
//! hidden and cell states are zero. The bidirectional variant runs two
//! independent parameter sets, one over reversed frames, and concatenates.

use super::ops::{axpy, dot, matmul_acc};
use super::{Real, Tape, TensorData, Var};

impl<F: Real> Tape<F> {
    /// Unidirectional LSTM: x (t x i) -> h (t x hidden).
    ///
    /// `w_ih` is (i x 4h), `w_hh` is (h x 4h), `b` is [4h].
    pub fn lstm(&mut self, x: Var, w_ih: Var, w_hh: Var, b: Var) -> Var {
        let (vx, vih, vhh, vb) = (self.value(x), self.value(w_ih), self.value(w_hh), self.value(b));
        let (t, i) = (vx.rows(), vx.cols());
        let g4 = vih.cols();
        assert_eq!(g4 % 4, 0, "lstm gate width must be 4h");
        let h = g4 / 4;
        assert_eq!(vih.rows(), i, "lstm w_ih rows");
        assert_eq!(vhh.shape(), [h, g4], "lstm w_hh shape");
        assert_eq!(vb.shape(), [g4], "lstm bias shape");

        // Input contribution for all frames at once.
        let mut pre_all = vec![F::zero(); t * g4];
        matmul_acc(vx.data(), vih.data(), t, i, g4, &mut pre_all);

        let mut out = vec![F::zero(); t * h];
        let mut gates = vec![F::zero(); t * g4]; // post-activation i,f,g,o
        let mut cells = vec![F::zero(); t * h];
        let mut tanh_c = vec![F::zero(); t * h];
        let mut h_prev = vec![F::zero(); h];
        let mut c_prev = vec![F::zero(); h];
        for tt in 0..t {
            let pre = &mut pre_all[tt * g4..(tt + 1) * g4];
            for (k, &hv) in h_prev.iter().enumerate() {
                axpy(hv, &vhh.data()[k * g4..(k + 1) * g4], pre);
            }
            for (p, &bv) in pre.iter_mut().zip(vb.data()) {
                *p = *p + bv;
            }
            let gt = &mut gates[tt * g4..(tt + 1) * g4];
            for j in 0..h {
                gt[j] = sigmoid(pre[j]);
                gt[h + j] = sigmoid(pre[h + j]);
                gt[2 * h + j] = pre[2 * h + j].tanh();
                gt[3 * h + j] = sigmoid(pre[3 * h + j]);
            }
            let crow = &mut cells[tt * h..(tt + 1) * h];
            let trow = &mut tanh_c[tt * h..(tt + 1) * h];
            let hrow = &mut out[tt * h..(tt + 1) * h];
            for j in 0..h {
                let c = gt[h + j] * c_prev[j] + gt[j] * gt[2 * h + j];
                crow[j] = c;
                trow[j] = c.tanh();
                hrow[j] = gt[3 * h + j] * trow[j];
            }
            h_prev.copy_from_slice(hrow);
            c_prev.copy_from_slice(crow);
        }

        let needs = self.needs_grad(x)
            || self.needs_grad(w_ih)
            || self.needs_grad(w_hh)
            || self.needs_grad(b);
        let (nx, nih, nhh, nb) = (
            self.needs_grad(x),
            self.needs_grad(w_ih),
            self.needs_grad(w_hh),
            self.needs_grad(b),
        );
        let self_id = self.len();
        self.push(
            TensorData::matrix(t, h, out),
            needs,
            Some(Box::new(move |vals, g, sink| {
                let vx = &vals[x.0];
                let vih = &vals[w_ih.0];
                let vhh = &vals[w_hh.0];
                let hs = &vals[self_id];
                let mut dx = if nx { Some(vec![F::zero(); t * i]) } else { None };
                let mut dih = if nih { Some(vec![F::zero(); i * g4]) } else { None };
                let mut dhh = if nhh { Some(vec![F::zero(); h * g4]) } else { None };
                let mut db = if nb { Some(vec![F::zero(); g4]) } else { None };

                let mut dh_next = vec![F::zero(); h];
                let mut dc_next = vec![F::zero(); h];
                let mut dpre = vec![F::zero(); g4];
                for tt in (0..t).rev() {
                    let gt = &gates[tt * g4..(tt + 1) * g4];
                    let trow = &tanh_c[tt * h..(tt + 1) * h];
                    for j in 0..h {
                        let dh = g.data()[tt * h + j] + dh_next[j];
                        let gi = gt[j];
                        let gf = gt[h + j];
                        let gg = gt[2 * h + j];
                        let go = gt[3 * h + j];
                        let tc = trow[j];
                        let c_prev =
                            if tt == 0 { F::zero() } else { cells[(tt - 1) * h + j] };
                        let d_o = dh * tc;
                        let dc = dh * go * (F::one() - tc * tc) + dc_next[j];
                        dpre[j] = dc * gg * gi * (F::one() - gi);
                        dpre[h + j] = dc * c_prev * gf * (F::one() - gf);
                        dpre[2 * h + j] = dc * gi * (F::one() - gg * gg);
                        dpre[3 * h + j] = d_o * go * (F::one() - go);
                        dc_next[j] = dc * gf;
                    }
                    if let Some(dx) = dx.as_mut() {
                        let row = &mut dx[tt * i..(tt + 1) * i];
                        for (ii, r) in row.iter_mut().enumerate() {
                            *r = dot(&vih.data()[ii * g4..(ii + 1) * g4], &dpre);
                        }
                    }
                    if let Some(dih) = dih.as_mut() {
                        let xrow = &vx.data()[tt * i..(tt + 1) * i];
                        for (ii, &xv) in xrow.iter().enumerate() {
                            axpy(xv, &dpre, &mut dih[ii * g4..(ii + 1) * g4]);
                        }
                    }
                    if tt > 0 {
                        let hprev = &hs.data()[(tt - 1) * h..tt * h];
                        if let Some(dhh) = dhh.as_mut() {
                            for (k, &hv) in hprev.iter().enumerate() {
                                axpy(hv, &dpre, &mut dhh[k * g4..(k + 1) * g4]);
                            }
                        }
                        for (k, d) in dh_next.iter_mut().enumerate() {
                            *d = dot(&vhh.data()[k * g4..(k + 1) * g4], &dpre);
                        }
                    } else {
                        dh_next.iter_mut().for_each(|d| *d = F::zero());
                    }
                    if let Some(db) = db.as_mut() {
                        axpy(F::one(), &dpre, db);
                    }
                }
                if let Some(dx) = dx {
                    sink(x.0, TensorData::matrix(t, i, dx));
                }
                if let Some(dih) = dih {
                    sink(w_ih.0, TensorData::matrix(i, g4, dih));
                }
                if let Some(dhh) = dhh {
                    sink(w_hh.0, TensorData::matrix(h, g4, dhh));
                }
                if let Some(db) = db {
                    sink(b.0, TensorData::vector(db));
                }
            })),
        )
    }

    /// Bidirectional LSTM: forward/backward concatenation, width 2h.
    #[allow(clippy::too_many_arguments)]
    pub fn bilstm(
        &mut self,
        x: Var,
        fw_ih: Var,
        fw_hh: Var,
        fw_b: Var,
        bw_ih: Var,
        bw_hh: Var,
        bw_b: Var,
    ) -> Var {
        let fwd = self.lstm(x, fw_ih, fw_hh, fw_b);
        let rev_in = self.reverse_rows(x);
        let bwd = self.lstm(rev_in, bw_ih, bw_hh, bw_b);
        let bwd = self.reverse_rows(bwd);
        self.concat_cols(fwd, bwd)
    }
}

fn sigmoid<F: Real>(x: F) -> F {
    F::one() / (F::one() + (-x).exp())
}

#[cfg(test)]
mod tests {
    use super::super::{Tape, TensorData};

    #[test]
    fn lstm_shapes_and_zero_input_zero_bias() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(TensorData::matrix(3, 2, vec![0.0; 6]));
        let w_ih = tape.constant(TensorData::matrix(2, 8, vec![0.3; 16]));
        let w_hh = tape.constant(TensorData::matrix(2, 8, vec![0.1; 16]));
        let b = tape.constant(TensorData::vector(vec![0.0; 8]));
        let h = tape.lstm(x, w_ih, w_hh, b);
        assert_eq!(tape.value(h).shape(), &[3, 2]);
        // zero input, zero bias: gates stay at sigmoid(0)/tanh(0), so the
        // cell update i*g = 0.5*0 = 0 keeps everything at zero
        for &v in tape.value(h).data() {
            assert_eq!(v, 0.0);
        }
    }

    #[test]
    fn bilstm_concatenates_directions() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(TensorData::matrix(4, 1, vec![0.5, -0.5, 1.0, 0.25]));
        let mk = |tape: &mut Tape<f64>, scale: f64| {
            let ih = tape.constant(TensorData::matrix(1, 4, vec![scale; 4]));
            let hh = tape.constant(TensorData::matrix(1, 4, vec![scale / 2.0; 4]));
            let b = tape.constant(TensorData::vector(vec![0.1; 4]));
            (ih, hh, b)
        };
        let (fih, fhh, fb) = mk(&mut tape, 0.7);
        let (bih, bhh, bb) = mk(&mut tape, -0.4);
        let y = tape.bilstm(x, fih, fhh, fb, bih, bhh, bb);
        assert_eq!(tape.value(y).shape(), &[4, 2]);
        // The backward half at the last frame equals a 1-step LSTM output on
        // the last sample alone (no history), which must be nonzero here.
        assert!(tape.value(y).data().iter().any(|&v| v != 0.0));
    }
}
