//! The fixed operator set: elementwise ops, linear algebra, convolutions,
//! softmax variants, structural ops and the weighted layer sum.
//!
//! Reductions use a fixed 8-lane accumulation order so results are bitwise
//! reproducible run to run while still vectorizing.

use super::{Real, Tape, TensorData, Var};

/// Dot product with a fixed 8-accumulator reduction order.
#[inline]
pub(crate) fn dot<F: Real>(a: &[F], b: &[F]) -> F {
    debug_assert_eq!(a.len(), b.len());
    let n = a.len();
    let mut acc = [F::zero(); 8];
    let chunks = n / 8;
    for c in 0..chunks {
        let base = c * 8;
        for (j, accj) in acc.iter_mut().enumerate() {
            *accj = *accj + a[base + j] * b[base + j];
        }
    }
    let mut s = ((acc[0] + acc[4]) + (acc[2] + acc[6])) + ((acc[1] + acc[5]) + (acc[3] + acc[7]));
    for i in chunks * 8..n {
        s = s + a[i] * b[i];
    }
    s
}

/// y += alpha * x
#[inline]
pub(crate) fn axpy<F: Real>(alpha: F, x: &[F], y: &mut [F]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi = *yi + alpha * xi;
    }
}

/// C += A(m x k) * B(k x n), row-major.
pub(crate) fn matmul_acc<F: Real>(a: &[F], b: &[F], m: usize, k: usize, n: usize, out: &mut [F]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (kk, &aik) in arow.iter().enumerate() {
            axpy(aik, &b[kk * n..(kk + 1) * n], orow);
        }
    }
}

/// C += A(m x k) * B^T where B is (r x k); result is (m x r).
pub(crate) fn matmul_nt_acc<F: Real>(a: &[F], b: &[F], m: usize, k: usize, r: usize, out: &mut [F]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), r * k);
    debug_assert_eq!(out.len(), m * r);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..r {
            out[i * r + j] = out[i * r + j] + dot(arow, &b[j * k..(j + 1) * k]);
        }
    }
}

/// C += A^T * B where A is (m x k) and B is (m x n); result is (k x n).
pub(crate) fn matmul_tn_acc<F: Real>(a: &[F], b: &[F], m: usize, k: usize, n: usize, out: &mut [F]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(out.len(), k * n);
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for kk in 0..k {
            axpy(a[i * k + kk], brow, &mut out[kk * n..(kk + 1) * n]);
        }
    }
}

fn unary_needs<F: Real>(tape: &Tape<F>, v: Var) -> bool {
    tape.needs_grad(v)
}

impl<F: Real> Tape<F> {
    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "add shape mismatch");
        let out = TensorData::new(
            va.shape().to_vec(),
            va.data().iter().zip(vb.data()).map(|(&x, &y)| x + y).collect(),
        );
        let needs = self.needs_grad(a) || self.needs_grad(b);
        let (na, nb) = (self.needs_grad(a), self.needs_grad(b));
        self.push(
            out,
            needs,
            Some(Box::new(move |_vals, g, sink| {
                if na {
                    sink(a.0, g.clone());
                }
                if nb {
                    sink(b.0, g.clone());
                }
            })),
        )
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "sub shape mismatch");
        let out = TensorData::new(
            va.shape().to_vec(),
            va.data().iter().zip(vb.data()).map(|(&x, &y)| x - y).collect(),
        );
        let needs = self.needs_grad(a) || self.needs_grad(b);
        let (na, nb) = (self.needs_grad(a), self.needs_grad(b));
        self.push(
            out,
            needs,
            Some(Box::new(move |_vals, g, sink| {
                if na {
                    sink(a.0, g.clone());
                }
                if nb {
                    let neg = TensorData::new(
                        g.shape().to_vec(),
                        g.data().iter().map(|&x| -x).collect(),
                    );
                    sink(b.0, neg);
                }
            })),
        )
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "mul shape mismatch");
        let out = TensorData::new(
            va.shape().to_vec(),
            va.data().iter().zip(vb.data()).map(|(&x, &y)| x * y).collect(),
        );
        let needs = self.needs_grad(a) || self.needs_grad(b);
        let (na, nb) = (self.needs_grad(a), self.needs_grad(b));
        self.push(
            out,
            needs,
            Some(Box::new(move |vals, g, sink| {
                if na {
                    let vb = &vals[b.0];
                    sink(
                        a.0,
                        TensorData::new(
                            g.shape().to_vec(),
                            g.data().iter().zip(vb.data()).map(|(&x, &y)| x * y).collect(),
                        ),
                    );
                }
                if nb {
                    let va = &vals[a.0];
                    sink(
                        b.0,
                        TensorData::new(
                            g.shape().to_vec(),
                            g.data().iter().zip(va.data()).map(|(&x, &y)| x * y).collect(),
                        ),
                    );
                }
            })),
        )
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let cf = F::from_f64(c);
        let va = self.value(a);
        let out =
            TensorData::new(va.shape().to_vec(), va.data().iter().map(|&x| x * cf).collect());
        let needs = unary_needs(self, a);
        self.push(
            out,
            needs,
            Some(Box::new(move |_vals, g, sink| {
                sink(
                    a.0,
                    TensorData::new(g.shape().to_vec(), g.data().iter().map(|&x| x * cf).collect()),
                );
            })),
        )
    }

    /// out[t, :] = x[t, :] + row  (bias broadcast over rows)
    pub fn add_row(&mut self, x: Var, row: Var) -> Var {
        let (vx, vr) = (self.value(x), self.value(row));
        let (t, n) = (vx.rows(), vx.cols());
        assert_eq!(vr.shape(), [n], "add_row width mismatch");
        let mut data = vx.data().to_vec();
        for tt in 0..t {
            for j in 0..n {
                data[tt * n + j] = data[tt * n + j] + vr.data()[j];
            }
        }
        let needs = self.needs_grad(x) || self.needs_grad(row);
        let (nx, nr) = (self.needs_grad(x), self.needs_grad(row));
        self.push(
            TensorData::matrix(t, n, data),
            needs,
            Some(Box::new(move |_vals, g, sink| {
                if nx {
                    sink(x.0, g.clone());
                }
                if nr {
                    let mut acc = vec![F::zero(); n];
                    for tt in 0..t {
                        axpy(F::one(), &g.data()[tt * n..(tt + 1) * n], &mut acc);
                    }
                    sink(row.0, TensorData::vector(acc));
                }
            })),
        )
    }

    /// out[t, :] = x[t, :] * row  (broadcast multiplication over rows)
    pub fn mul_row(&mut self, x: Var, row: Var) -> Var {
        let (vx, vr) = (self.value(x), self.value(row));
        let (t, n) = (vx.rows(), vx.cols());
        assert_eq!(vr.shape(), [n], "mul_row width mismatch");
        let mut data = vx.data().to_vec();
        for tt in 0..t {
            for j in 0..n {
                data[tt * n + j] = data[tt * n + j] * vr.data()[j];
            }
        }
        let needs = self.needs_grad(x) || self.needs_grad(row);
        let (nx, nr) = (self.needs_grad(x), self.needs_grad(row));
        self.push(
            TensorData::matrix(t, n, data),
            needs,
            Some(Box::new(move |vals, g, sink| {
                if nx {
                    let vr = &vals[row.0];
                    let mut d = g.data().to_vec();
                    for tt in 0..t {
                        for j in 0..n {
                            d[tt * n + j] = d[tt * n + j] * vr.data()[j];
                        }
                    }
                    sink(x.0, TensorData::matrix(t, n, d));
                }
                if nr {
                    let vx = &vals[x.0];
                    let mut acc = vec![F::zero(); n];
                    for tt in 0..t {
                        for j in 0..n {
                            acc[j] = acc[j] + g.data()[tt * n + j] * vx.data()[tt * n + j];
                        }
                    }
                    sink(row.0, TensorData::vector(acc));
                }
            })),
        )
    }

    /// C = A(m x k) * B(k x n)
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        let (m, k) = (va.rows(), va.cols());
        let (kb, n) = (vb.rows(), vb.cols());
        assert_eq!(k, kb, "matmul inner dim mismatch");
        let mut out = vec![F::zero(); m * n];
        matmul_acc(va.data(), vb.data(), m, k, n, &mut out);
        let needs = self.needs_grad(a) || self.needs_grad(b);
        let (na, nb) = (self.needs_grad(a), self.needs_grad(b));
        self.push(
            TensorData::matrix(m, n, out),
            needs,
            Some(Box::new(move |vals, g, sink| {
                if na {
                    let mut da = vec![F::zero(); m * k];
                    matmul_nt_acc(g.data(), vals[b.0].data(), m, n, k, &mut da);
                    sink(a.0, TensorData::matrix(m, k, da));
                }
                if nb {
                    let mut db = vec![F::zero(); k * n];
                    matmul_tn_acc(vals[a.0].data(), g.data(), m, k, n, &mut db);
                    sink(b.0, TensorData::matrix(k, n, db));
                }
            })),
        )
    }

    /// C = A(m x k) * B^T with B stored (r x k); out (m x r).
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        let (m, k) = (va.rows(), va.cols());
        let (r, kb) = (vb.rows(), vb.cols());
        assert_eq!(k, kb, "matmul_nt inner dim mismatch");
        let mut out = vec![F::zero(); m * r];
        matmul_nt_acc(va.data(), vb.data(), m, k, r, &mut out);
        let needs = self.needs_grad(a) || self.needs_grad(b);
        let (na, nb) = (self.needs_grad(a), self.needs_grad(b));
        self.push(
            TensorData::matrix(m, r, out),
            needs,
            Some(Box::new(move |vals, g, sink| {
                if na {
                    // dA = g(m x r) * B(r x k)
                    let mut da = vec![F::zero(); m * k];
                    matmul_acc(g.data(), vals[b.0].data(), m, r, k, &mut da);
                    sink(a.0, TensorData::matrix(m, k, da));
                }
                if nb {
                    // dB = g^T(r x m) * A(m x k)
                    let mut db = vec![F::zero(); r * k];
                    matmul_tn_acc(g.data(), vals[a.0].data(), m, r, k, &mut db);
                    sink(b.0, TensorData::matrix(r, k, db));
                }
            })),
        )
    }

    /// out = X(t x i) * W(i x o) + b
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Var {
        let (vx, vw, vb) = (self.value(x), self.value(w), self.value(b));
        let (t, i) = (vx.rows(), vx.cols());
        let (iw, o) = (vw.rows(), vw.cols());
        assert_eq!(i, iw, "affine inner dim mismatch");
        assert_eq!(vb.shape(), [o], "affine bias width mismatch");
        let mut out = Vec::with_capacity(t * o);
        for _ in 0..t {
            out.extend_from_slice(vb.data());
        }
        matmul_acc(vx.data(), vw.data(), t, i, o, &mut out);
        let needs = self.needs_grad(x) || self.needs_grad(w) || self.needs_grad(b);
        let (nx, nw, nb) = (self.needs_grad(x), self.needs_grad(w), self.needs_grad(b));
        self.push(
            TensorData::matrix(t, o, out),
            needs,
            Some(Box::new(move |vals, g, sink| {
                if nx {
                    let mut dx = vec![F::zero(); t * i];
                    matmul_nt_acc(g.data(), vals[w.0].data(), t, o, i, &mut dx);
                    sink(x.0, TensorData::matrix(t, i, dx));
                }
                if nw {
                    let mut dw = vec![F::zero(); i * o];
                    matmul_tn_acc(vals[x.0].data(), g.data(), t, i, o, &mut dw);
                    sink(w.0, TensorData::matrix(i, o, dw));
                }
                if nb {
                    let mut db = vec![F::zero(); o];
                    for tt in 0..t {
                        axpy(F::one(), &g.data()[tt * o..(tt + 1) * o], &mut db);
                    }
                    sink(b.0, TensorData::vector(db));
                }
            })),
        )
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let out =
            TensorData::new(va.shape().to_vec(), va.data().iter().map(|&x| x.tanh()).collect());
        let needs = unary_needs(self, a);
        let self_id = self.len();
        self.push(
            out,
            needs,
            Some(Box::new(move |vals, g, sink| {
                let y = &vals[self_id];
                sink(
                    a.0,
                    TensorData::new(
                        g.shape().to_vec(),
                        g.data()
                            .iter()
                            .zip(y.data())
                            .map(|(&gi, &yi)| gi * (F::one() - yi * yi))
                            .collect(),
                    ),
                );
            })),
        )
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let out = TensorData::new(
            va.shape().to_vec(),
            va.data().iter().map(|&x| F::one() / (F::one() + (-x).exp())).collect(),
        );
        let needs = unary_needs(self, a);
        let self_id = self.len();
        self.push(
            out,
            needs,
            Some(Box::new(move |vals, g, sink| {
                let y = &vals[self_id];
                sink(
                    a.0,
                    TensorData::new(
                        g.shape().to_vec(),
                        g.data()
                            .iter()
                            .zip(y.data())
                            .map(|(&gi, &yi)| gi * yi * (F::one() - yi))
                            .collect(),
                    ),
                );
            })),
        )
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let out = TensorData::new(
            va.shape().to_vec(),
            va.data().iter().map(|&x| if x > F::zero() { x } else { F::zero() }).collect(),
        );
        let needs = unary_needs(self, a);
        self.push(
            out,
            needs,
            Some(Box::new(move |vals, g, sink| {
                let x = &vals[a.0];
                sink(
                    a.0,
                    TensorData::new(
                        g.shape().to_vec(),
                        g.data()
                            .iter()
                            .zip(x.data())
                            .map(|(&gi, &xi)| if xi > F::zero() { gi } else { F::zero() })
                            .collect(),
                    ),
                );
            })),
        )
    }

    /// Softmax over the last axis of a 1-D or 2-D tensor.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let (t, n) = row_view(va);
        let mut out = vec![F::zero(); t * n];
        for tt in 0..t {
            softmax_slice(&va.data()[tt * n..(tt + 1) * n], &mut out[tt * n..(tt + 1) * n]);
        }
        let needs = unary_needs(self, a);
        let self_id = self.len();
        self.push(
            TensorData::new(va.shape().to_vec(), out),
            needs,
            Some(Box::new(move |vals, g, sink| {
                let y = &vals[self_id];
                let mut dx = vec![F::zero(); t * n];
                for tt in 0..t {
                    let yr = &y.data()[tt * n..(tt + 1) * n];
                    let gr = &g.data()[tt * n..(tt + 1) * n];
                    let inner = dot(gr, yr);
                    for j in 0..n {
                        dx[tt * n + j] = yr[j] * (gr[j] - inner);
                    }
                }
                sink(a.0, TensorData::new(g.shape().to_vec(), dx));
            })),
        )
    }

    /// Log-softmax over the last axis of a 1-D or 2-D tensor.
    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let (t, n) = row_view(va);
        let mut out = vec![F::zero(); t * n];
        for tt in 0..t {
            let row = &va.data()[tt * n..(tt + 1) * n];
            let m = row.iter().cloned().fold(F::neg_infinity(), F::max);
            let lse = m + row.iter().map(|&x| (x - m).exp()).sum::<F>().ln();
            for j in 0..n {
                out[tt * n + j] = row[j] - lse;
            }
        }
        let needs = unary_needs(self, a);
        let self_id = self.len();
        self.push(
            TensorData::new(va.shape().to_vec(), out),
            needs,
            Some(Box::new(move |vals, g, sink| {
                let y = &vals[self_id];
                let mut dx = vec![F::zero(); t * n];
                for tt in 0..t {
                    let yr = &y.data()[tt * n..(tt + 1) * n];
                    let gr = &g.data()[tt * n..(tt + 1) * n];
                    let gsum = gr.iter().fold(F::zero(), |s, &x| s + x);
                    for j in 0..n {
                        dx[tt * n + j] = gr[j] - yr[j].exp() * gsum;
                    }
                }
                sink(a.0, TensorData::new(g.shape().to_vec(), dx));
            })),
        )
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let (m, n) = (va.rows(), va.cols());
        let mut out = vec![F::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = va.data()[i * n + j];
            }
        }
        let needs = unary_needs(self, a);
        self.push(
            TensorData::matrix(n, m, out),
            needs,
            Some(Box::new(move |_vals, g, sink| {
                let mut dx = vec![F::zero(); m * n];
                for j in 0..n {
                    for i in 0..m {
                        dx[i * n + j] = g.data()[j * m + i];
                    }
                }
                sink(a.0, TensorData::matrix(m, n, dx));
            })),
        )
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Var {
        let va = self.value(a);
        assert_eq!(
            shape.iter().product::<usize>(),
            va.len(),
            "reshape to {shape:?} from {:?}",
            va.shape()
        );
        let old_shape = va.shape().to_vec();
        let out = TensorData::new(shape, va.data().to_vec());
        let needs = unary_needs(self, a);
        self.push(
            out,
            needs,
            Some(Box::new(move |_vals, g, sink| {
                sink(a.0, TensorData::new(old_shape.clone(), g.data().to_vec()));
            })),
        )
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        let (t, na) = (va.rows(), va.cols());
        let (tb, nb) = (vb.rows(), vb.cols());
        assert_eq!(t, tb, "concat_cols row mismatch");
        let mut out = Vec::with_capacity(t * (na + nb));
        for tt in 0..t {
            out.extend_from_slice(va.row(tt));
            out.extend_from_slice(vb.row(tt));
        }
        let needs = self.needs_grad(a) || self.needs_grad(b);
        let (ga, gb) = (self.needs_grad(a), self.needs_grad(b));
        self.push(
            TensorData::matrix(t, na + nb, out),
            needs,
            Some(Box::new(move |_vals, g, sink| {
                let w = na + nb;
                if ga {
                    let mut da = Vec::with_capacity(t * na);
                    for tt in 0..t {
                        da.extend_from_slice(&g.data()[tt * w..tt * w + na]);
                    }
                    sink(a.0, TensorData::matrix(t, na, da));
                }
                if gb {
                    let mut db = Vec::with_capacity(t * nb);
                    for tt in 0..t {
                        db.extend_from_slice(&g.data()[tt * w + na..(tt + 1) * w]);
                    }
                    sink(b.0, TensorData::matrix(t, nb, db));
                }
            })),
        )
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Var {
        let va = self.value(a);
        let (t, n) = (va.rows(), va.cols());
        assert!(start <= end && end <= t, "slice_rows {start}..{end} of {t}");
        let out = va.data()[start * n..end * n].to_vec();
        let needs = unary_needs(self, a);
        self.push(
            TensorData::matrix(end - start, n, out),
            needs,
            Some(Box::new(move |_vals, g, sink| {
                let mut dx = vec![F::zero(); t * n];
                dx[start * n..end * n].copy_from_slice(g.data());
                sink(a.0, TensorData::matrix(t, n, dx));
            })),
        )
    }

    pub fn reverse_rows(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let (t, n) = (va.rows(), va.cols());
        let mut out = Vec::with_capacity(t * n);
        for tt in (0..t).rev() {
            out.extend_from_slice(va.row(tt));
        }
        let needs = unary_needs(self, a);
        self.push(
            TensorData::matrix(t, n, out),
            needs,
            Some(Box::new(move |_vals, g, sink| {
                let mut dx = Vec::with_capacity(t * n);
                for tt in (0..t).rev() {
                    dx.extend_from_slice(&g.data()[tt * n..(tt + 1) * n]);
                }
                sink(a.0, TensorData::matrix(t, n, dx));
            })),
        )
    }

    /// out = sum_l softmax(logits)[l] * layers[l]; the learnable layer
    /// aggregation of upstream representations.
    pub fn weighted_layer_sum(&mut self, layers: &[Var], logits: Var) -> Var {
        assert!(!layers.is_empty());
        let vl = self.value(logits);
        assert_eq!(vl.shape(), [layers.len()], "one logit per layer required");
        let shape = self.value(layers[0]).shape().to_vec();
        for &l in layers {
            assert_eq!(self.value(l).shape(), &shape[..], "layer shape mismatch");
        }
        let mut w = vec![F::zero(); layers.len()];
        softmax_slice(vl.data(), &mut w);
        let n: usize = shape.iter().product();
        let mut out = vec![F::zero(); n];
        for (l, &layer) in layers.iter().enumerate() {
            axpy(w[l], self.value(layer).data(), &mut out);
        }
        let needs =
            self.needs_grad(logits) || layers.iter().any(|&l| self.needs_grad(l));
        let layer_ids: Vec<usize> = layers.iter().map(|v| v.0).collect();
        let layer_needs: Vec<bool> = layers.iter().map(|&l| self.needs_grad(l)).collect();
        let nl = self.needs_grad(logits);
        let w_saved = w.clone();
        self.push(
            TensorData::new(shape, out),
            needs,
            Some(Box::new(move |vals, g, sink| {
                let mut s = vec![F::zero(); layer_ids.len()];
                for (l, &id) in layer_ids.iter().enumerate() {
                    s[l] = dot(g.data(), vals[id].data());
                    if layer_needs[l] {
                        let dl = TensorData::new(
                            g.shape().to_vec(),
                            g.data().iter().map(|&x| x * w_saved[l]).collect(),
                        );
                        sink(id, dl);
                    }
                }
                if nl {
                    let inner = dot(&s, &w_saved);
                    let dlogits: Vec<F> =
                        (0..s.len()).map(|l| w_saved[l] * (s[l] - inner)).collect();
                    sink(logits.0, TensorData::vector(dlogits));
                }
            })),
        )
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let s = va.data().iter().fold(F::zero(), |acc, &x| acc + x);
        let shape = va.shape().to_vec();
        let needs = unary_needs(self, a);
        self.push(
            TensorData::scalar(s),
            needs,
            Some(Box::new(move |_vals, g, sink| {
                let gv = g.item();
                sink(
                    a.0,
                    TensorData::new(
                        shape.clone(),
                        vec![gv; shape.iter().product::<usize>()],
                    ),
                );
            })),
        )
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let n = va.len();
        let s = va.data().iter().fold(F::zero(), |acc, &x| acc + x) / F::from_f64(n as f64);
        let shape = va.shape().to_vec();
        let needs = unary_needs(self, a);
        self.push(
            TensorData::scalar(s),
            needs,
            Some(Box::new(move |_vals, g, sink| {
                let gv = g.item() / F::from_f64(n as f64);
                sink(a.0, TensorData::new(shape.clone(), vec![gv; n]));
            })),
        )
    }

    /// 1-D convolution. `x` is (t_in x c_in) frames, `w` is
    /// (c_out x kernel*c_in) with the window flattened time-major, `b` is
    /// per-filter bias. Virtual zero padding on both sides.
    pub fn conv1d(
        &mut self,
        x: Var,
        w: Var,
        b: Var,
        kernel: usize,
        stride: usize,
        pad_left: usize,
        pad_right: usize,
    ) -> Var {
        let (vx, vw, vb) = (self.value(x), self.value(w), self.value(b));
        let (t_in, c_in) = (vx.rows(), vx.cols());
        let c_out = vw.rows();
        assert_eq!(vw.cols(), kernel * c_in, "conv1d weight width mismatch");
        assert_eq!(vb.shape(), [c_out], "conv1d bias mismatch");
        assert!(
            t_in + pad_left + pad_right >= kernel,
            "conv1d input shorter than kernel"
        );
        let t_out = (t_in + pad_left + pad_right - kernel) / stride + 1;
        let win = kernel * c_in;
        let mut out = vec![F::zero(); t_out * c_out];
        let mut scratch = vec![F::zero(); win];
        for t in 0..t_out {
            let u = t as isize * stride as isize - pad_left as isize;
            let window: &[F] = if u >= 0 && (u as usize) + kernel <= t_in {
                let u = u as usize;
                &vx.data()[u * c_in..(u + kernel) * c_in]
            } else {
                gather_window(vx.data(), t_in, c_in, kernel, u, &mut scratch);
                &scratch
            };
            let orow = &mut out[t * c_out..(t + 1) * c_out];
            for co in 0..c_out {
                orow[co] = vb.data()[co] + dot(&vw.data()[co * win..(co + 1) * win], window);
            }
        }
        let needs = self.needs_grad(x) || self.needs_grad(w) || self.needs_grad(b);
        let (nx, nw, nb) = (self.needs_grad(x), self.needs_grad(w), self.needs_grad(b));
        self.push(
            TensorData::matrix(t_out, c_out, out),
            needs,
            Some(Box::new(move |vals, g, sink| {
                let vx = &vals[x.0];
                let vw = &vals[w.0];
                let mut dxa = if nx { Some(vec![F::zero(); t_in * c_in]) } else { None };
                let mut dwa = if nw { Some(vec![F::zero(); c_out * win]) } else { None };
                let mut dba = if nb { Some(vec![F::zero(); c_out]) } else { None };
                let mut scratch = vec![F::zero(); win];
                let mut dwin = vec![F::zero(); win];
                for t in 0..t_out {
                    let grow = &g.data()[t * c_out..(t + 1) * c_out];
                    let u = t as isize * stride as isize - pad_left as isize;
                    if let Some(dw) = dwa.as_mut() {
                        let window: &[F] = if u >= 0 && (u as usize) + kernel <= t_in {
                            let uu = u as usize;
                            &vx.data()[uu * c_in..(uu + kernel) * c_in]
                        } else {
                            gather_window(vx.data(), t_in, c_in, kernel, u, &mut scratch);
                            &scratch
                        };
                        for co in 0..c_out {
                            axpy(grow[co], window, &mut dw[co * win..(co + 1) * win]);
                        }
                    }
                    if let Some(dx) = dxa.as_mut() {
                        dwin.iter_mut().for_each(|v| *v = F::zero());
                        for co in 0..c_out {
                            axpy(grow[co], &vw.data()[co * win..(co + 1) * win], &mut dwin);
                        }
                        scatter_window(dx, t_in, c_in, kernel, u, &dwin);
                    }
                    if let Some(db) = dba.as_mut() {
                        axpy(F::one(), grow, db);
                    }
                }
                if let Some(dx) = dxa {
                    sink(x.0, TensorData::matrix(t_in, c_in, dx));
                }
                if let Some(dw) = dwa {
                    sink(w.0, TensorData::matrix(c_out, win, dw));
                }
                if let Some(db) = dba {
                    sink(b.0, TensorData::vector(db));
                }
            })),
        )
    }

    /// Transposed 1-D convolution to a single output channel with
    /// overlap-add. `z` is (t x c), `w` is (c x kernel); the full-length
    /// reconstruction is trimmed to `[trim_offset, trim_offset + out_len)`.
    pub fn deconv1d(
        &mut self,
        z: Var,
        w: Var,
        stride: usize,
        trim_offset: usize,
        out_len: usize,
    ) -> Var {
        let (vz, vw) = (self.value(z), self.value(w));
        let (t, c) = (vz.rows(), vz.cols());
        let kernel = vw.cols();
        assert_eq!(vw.rows(), c, "deconv1d channel mismatch");
        let full = (t - 1) * stride + kernel;
        assert!(
            trim_offset + out_len <= full,
            "deconv1d trim {trim_offset}+{out_len} exceeds {full}"
        );
        let mut fullbuf = vec![F::zero(); full];
        for tt in 0..t {
            let zrow = vz.row(tt);
            let seg = &mut fullbuf[tt * stride..tt * stride + kernel];
            for cc in 0..c {
                axpy(zrow[cc], &vw.data()[cc * kernel..(cc + 1) * kernel], seg);
            }
        }
        let out = fullbuf[trim_offset..trim_offset + out_len].to_vec();
        let needs = self.needs_grad(z) || self.needs_grad(w);
        let (nz, nw) = (self.needs_grad(z), self.needs_grad(w));
        self.push(
            TensorData::vector(out),
            needs,
            Some(Box::new(move |vals, g, sink| {
                let mut gfull = vec![F::zero(); full];
                gfull[trim_offset..trim_offset + out_len].copy_from_slice(g.data());
                if nz {
                    let vw = &vals[w.0];
                    let mut dz = vec![F::zero(); t * c];
                    for tt in 0..t {
                        let seg = &gfull[tt * stride..tt * stride + kernel];
                        for cc in 0..c {
                            dz[tt * c + cc] = dot(&vw.data()[cc * kernel..(cc + 1) * kernel], seg);
                        }
                    }
                    sink(z.0, TensorData::matrix(t, c, dz));
                }
                if nw {
                    let vz = &vals[z.0];
                    let mut dw = vec![F::zero(); c * kernel];
                    for tt in 0..t {
                        let seg = &gfull[tt * stride..tt * stride + kernel];
                        let zrow = vz.row(tt);
                        for cc in 0..c {
                            axpy(zrow[cc], seg, &mut dw[cc * kernel..(cc + 1) * kernel]);
                        }
                    }
                    sink(w.0, TensorData::matrix(c, kernel, dw));
                }
            })),
        )
    }
}

fn row_view<F: Real>(t: &TensorData<F>) -> (usize, usize) {
    match t.shape() {
        [n] => (1, *n),
        [r, c] => (*r, *c),
        s => panic!("expected 1-D or 2-D tensor, got {s:?}"),
    }
}

pub(crate) fn softmax_slice<F: Real>(x: &[F], out: &mut [F]) {
    let m = x.iter().cloned().fold(F::neg_infinity(), F::max);
    let mut sum = F::zero();
    for (o, &v) in out.iter_mut().zip(x) {
        let e = (v - m).exp();
        *o = e;
        sum = sum + e;
    }
    for o in out.iter_mut() {
        *o = *o / sum;
    }
}

/// Copies a kernel window starting at (possibly negative) frame `u` into
/// `scratch`, zero-filling out-of-range frames.
fn gather_window<F: Real>(
    x: &[F],
    t_in: usize,
    c_in: usize,
    kernel: usize,
    u: isize,
    scratch: &mut [F],
) {
    scratch.iter_mut().for_each(|v| *v = F::zero());
    for k in 0..kernel {
        let src = u + k as isize;
        if src >= 0 && (src as usize) < t_in {
            let src = src as usize;
            scratch[k * c_in..(k + 1) * c_in]
                .copy_from_slice(&x[src * c_in..(src + 1) * c_in]);
        }
    }
}

/// Adds a kernel window of gradients back into the input gradient buffer,
/// skipping padded frames.
fn scatter_window<F: Real>(
    dx: &mut [F],
    t_in: usize,
    c_in: usize,
    kernel: usize,
    u: isize,
    dwin: &[F],
) {
    for k in 0..kernel {
        let dst = u + k as isize;
        if dst >= 0 && (dst as usize) < t_in {
            let dst = dst as usize;
            axpy(F::one(), &dwin[k * c_in..(k + 1) * c_in], &mut dx[dst * c_in..(dst + 1) * c_in]);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::super::{Tape, TensorData};

    #[test]
    fn matmul_known_product() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(TensorData::matrix(2, 3, vec![1., 2., 3., 4., 5., 6.]));
        let b = tape.constant(TensorData::matrix(3, 2, vec![7., 8., 9., 10., 11., 12.]));
        let c = tape.matmul(a, b);
        assert_eq!(tape.value(c).data(), &[58., 64., 139., 154.]);
    }

    #[test]
    fn broadcast_row_semantics() {
        let mut tape = Tape::<f64>::new();
        let m = tape.constant(TensorData::matrix(1, 2, vec![1.0, 2.0]));
        let r = tape.constant(TensorData::vector(vec![2.0, 0.5]));
        let fused = tape.mul_row(m, r);
        assert_eq!(tape.value(fused).data(), &[2.0, 1.0]);
    }

    #[test]
    fn softmax_rows_are_stochastic() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(TensorData::matrix(2, 3, vec![1., 2., 3., -5., 0., 5.]));
        let y = tape.softmax_rows(x);
        for t in 0..2 {
            let s: f64 = tape.value(y).row(t).iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
            assert!(tape.value(y).row(t).iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn weighted_layer_sum_saturation_and_mean() {
        let mut tape = Tape::<f64>::new();
        let l0 = tape.constant(TensorData::matrix(2, 2, vec![1., 1., 1., 1.]));
        let l1 = tape.constant(TensorData::matrix(2, 2, vec![2., 2., 2., 2.]));
        let l2 = tape.constant(TensorData::matrix(2, 2, vec![4., 4., 4., 4.]));
        // +40 logit on layer 2 saturates the softmax
        let w = tape.constant(TensorData::vector(vec![0.0, 0.0, 40.0]));
        let out = tape.weighted_layer_sum(&[l0, l1, l2], w);
        for &v in tape.value(out).data() {
            assert!((v - 4.0).abs() < 1e-6);
        }
        // equal logits -> arithmetic mean
        let weq = tape.constant(TensorData::vector(vec![1.0, 1.0, 1.0]));
        let out2 = tape.weighted_layer_sum(&[l0, l1, l2], weq);
        for &v in tape.value(out2).data() {
            assert!((v - 7.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn conv1d_frame_count_matches_oracle() {
        // 16000 samples, kernel 1024, stride 320, symmetric pad 352:
        // floor((16000 + 704 - 1024)/320) + 1 = 50
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(TensorData::matrix(16_000, 1, vec![0.0f32; 16_000]));
        let w = tape.constant(TensorData::matrix(4, 1024, vec![0.0f32; 4 * 1024]));
        let b = tape.constant(TensorData::vector(vec![0.0f32; 4]));
        let y = tape.conv1d(x, w, b, 1024, 320, 352, 352);
        assert_eq!(tape.value(y).rows(), 50);
    }

    #[test]
    fn deconv_of_unit_impulse_writes_kernel() {
        let mut tape = Tape::<f64>::new();
        let z = tape.constant(TensorData::matrix(2, 1, vec![1.0, 0.0]));
        let w = tape.constant(TensorData::matrix(1, 4, vec![1., 2., 3., 4.]));
        let y = tape.deconv1d(z, w, 2, 0, 6);
        assert_eq!(tape.value(y).data(), &[1., 2., 3., 4., 0., 0.]);
    }
}
