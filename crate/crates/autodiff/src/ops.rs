//! Elementwise, matrix, shape and reduction operations.
//!
//! All kernels are written as plain loops with a fixed accumulation order, so
//! results are deterministic and reproducible across runs on one platform.
//! Matrix operands are strictly 2-D; shape mismatches panic with the offending
//! shapes (these are programming errors, not data errors).

use ndarray::IxDyn;

use crate::tape::{Arr, Var};

fn unary(v: &Var, out: Arr, back: impl Fn(&Arr, &Arr) -> Arr + 'static) -> Var {
    let pid = v.id();
    v.tape().push(
        out,
        Some(Box::new(move |ctx, g, sink| {
            sink.add(pid, back(ctx.value(pid), g));
        })),
    )
}

/// Elementwise map with derivative expressed in terms of (x, y, g).
fn unary_map(v: &Var, f: impl Fn(f64) -> f64, df: impl Fn(f64, f64) -> f64 + 'static) -> Var {
    let out = v.with_value(|x| x.mapv(&f));
    let out_clone = out.clone();
    let pid = v.id();
    v.tape().push(
        out,
        Some(Box::new(move |ctx, g, sink| {
            let x = ctx.value(pid);
            let mut d = g.clone();
            for ((dv, &xv), &yv) in d.iter_mut().zip(x.iter()).zip(out_clone.iter()) {
                *dv *= df(xv, yv);
            }
            sink.add(pid, d);
        })),
    )
}

impl Var {
    // ---- elementwise arithmetic -------------------------------------------

    pub fn add(&self, other: &Var) -> Var {
        self.assert_same_tape(other);
        let out = self.with_value(|a| other.with_value(|b| same_shape("add", a, b).then(|| a + b).unwrap()));
        let (ia, ib) = (self.id(), other.id());
        self.tape().push(
            out,
            Some(Box::new(move |_ctx, g, sink| {
                sink.add(ia, g.clone());
                sink.add(ib, g.clone());
            })),
        )
    }

    pub fn sub(&self, other: &Var) -> Var {
        self.assert_same_tape(other);
        let out = self.with_value(|a| other.with_value(|b| same_shape("sub", a, b).then(|| a - b).unwrap()));
        let (ia, ib) = (self.id(), other.id());
        self.tape().push(
            out,
            Some(Box::new(move |_ctx, g, sink| {
                sink.add(ia, g.clone());
                sink.add(ib, g.mapv(|x| -x));
            })),
        )
    }

    pub fn mul(&self, other: &Var) -> Var {
        self.assert_same_tape(other);
        let out = self.with_value(|a| other.with_value(|b| same_shape("mul", a, b).then(|| a * b).unwrap()));
        let (ia, ib) = (self.id(), other.id());
        self.tape().push(
            out,
            Some(Box::new(move |ctx, g, sink| {
                sink.add(ia, g * ctx.value(ib));
                sink.add(ib, g * ctx.value(ia));
            })),
        )
    }

    pub fn div(&self, other: &Var) -> Var {
        self.assert_same_tape(other);
        let out = self.with_value(|a| other.with_value(|b| same_shape("div", a, b).then(|| a / b).unwrap()));
        let (ia, ib) = (self.id(), other.id());
        self.tape().push(
            out,
            Some(Box::new(move |ctx, g, sink| {
                let a = ctx.value(ia);
                let b = ctx.value(ib);
                sink.add(ia, g / b);
                sink.add(ib, -(g * a) / (b * b));
            })),
        )
    }

    pub fn neg(&self) -> Var {
        unary_map(self, |x| -x, |_, _| -1.0)
    }

    pub fn scale(&self, c: f64) -> Var {
        unary_map(self, move |x| c * x, move |_, _| c)
    }

    pub fn add_scalar(&self, c: f64) -> Var {
        unary_map(self, move |x| x + c, |_, _| 1.0)
    }

    pub fn sqr(&self) -> Var {
        unary_map(self, |x| x * x, |x, _| 2.0 * x)
    }

    pub fn exp(&self) -> Var {
        unary_map(self, f64::exp, |_, y| y)
    }

    pub fn ln(&self) -> Var {
        unary_map(self, f64::ln, |x, _| 1.0 / x)
    }

    pub fn sqrt(&self) -> Var {
        unary_map(self, f64::sqrt, |_, y| 0.5 / y)
    }

    pub fn sigmoid(&self) -> Var {
        unary_map(self, |x| 1.0 / (1.0 + (-x).exp()), |_, y| y * (1.0 - y))
    }

    pub fn tanh(&self) -> Var {
        unary_map(self, f64::tanh, |_, y| 1.0 - y * y)
    }

    pub fn relu(&self) -> Var {
        unary_map(self, |x| x.max(0.0), |x, _| if x > 0.0 { 1.0 } else { 0.0 })
    }

    /// Numerically guarded softplus, ln(1 + e^x); derivative is the sigmoid.
    pub fn softplus(&self) -> Var {
        unary_map(
            self,
            |x| {
                if x > 30.0 {
                    x
                } else {
                    x.exp().ln_1p()
                }
            },
            |x, _| 1.0 / (1.0 + (-x).exp()),
        )
    }

    /// x * sigmoid(x), the smooth gate used throughout the models.
    pub fn silu(&self) -> Var {
        unary_map(
            self,
            |x| x / (1.0 + (-x).exp()),
            |x, _| {
                let s = 1.0 / (1.0 + (-x).exp());
                s * (1.0 + x * (1.0 - s))
            },
        )
    }

    /// Clamp into [lo, hi]; gradient passes only through unclamped elements.
    pub fn clamp(&self, lo: f64, hi: f64) -> Var {
        unary_map(
            self,
            move |x| x.clamp(lo, hi),
            move |x, _| if x > lo && x < hi { 1.0 } else { 0.0 },
        )
    }

    // ---- matrix ------------------------------------------------------------

    /// 2-D matrix product, naive deterministic loop order.
    pub fn matmul(&self, other: &Var) -> Var {
        self.assert_same_tape(other);
        let out = self.with_value(|a| other.with_value(|b| matmul_raw(a, b)));
        let (ia, ib) = (self.id(), other.id());
        self.tape().push(
            out,
            Some(Box::new(move |ctx, g, sink| {
                let a = ctx.value(ia);
                let b = ctx.value(ib);
                // dA = g . B^T ; dB = A^T . g
                sink.add(ia, matmul_nt_raw(g, b));
                sink.add(ib, matmul_tn_raw(a, g));
            })),
        )
    }

    /// 2-D transpose (materialized copy).
    pub fn t(&self) -> Var {
        let out = self.with_value(transpose_raw);
        unary(self, out, |_, g| transpose_raw(g))
    }

    // ---- shape -------------------------------------------------------------

    pub fn reshape(&self, shape: &[usize]) -> Var {
        let shape = shape.to_vec();
        let out = self.with_value(|a| {
            let n: usize = shape.iter().product();
            assert_eq!(a.len(), n, "reshape {:?} -> {:?}", a.shape(), shape);
            Arr::from_shape_vec(IxDyn(&shape), a.iter().copied().collect()).unwrap()
        });
        let parent_shape = self.shape();
        unary(self, out, move |_, g| {
            Arr::from_shape_vec(IxDyn(&parent_shape), g.iter().copied().collect()).unwrap()
        })
    }

    /// Columns [start, start+len) of a 2-D array.
    pub fn slice_cols(&self, start: usize, len: usize) -> Var {
        let out = self.with_value(|a| {
            let (r, c) = dims2(a);
            assert!(start + len <= c, "slice_cols {}+{} > {}", start, len, c);
            let mut o = Arr::zeros(IxDyn(&[r, len]));
            for i in 0..r {
                for j in 0..len {
                    o[[i, j]] = a[[i, start + j]];
                }
            }
            o
        });
        let (rows, cols) = self.with_value(dims2);
        unary(self, out, move |_, g| {
            let mut d = Arr::zeros(IxDyn(&[rows, cols]));
            for i in 0..rows {
                for j in 0..g.shape()[1] {
                    d[[i, start + j]] = g[[i, j]];
                }
            }
            d
        })
    }

    /// Rows [start, start+len) of a 2-D array.
    pub fn slice_rows(&self, start: usize, len: usize) -> Var {
        let out = self.with_value(|a| {
            let (r, c) = dims2(a);
            assert!(start + len <= r, "slice_rows {}+{} > {}", start, len, r);
            let mut o = Arr::zeros(IxDyn(&[len, c]));
            for i in 0..len {
                for j in 0..c {
                    o[[i, j]] = a[[start + i, j]];
                }
            }
            o
        });
        let (rows, cols) = self.with_value(dims2);
        unary(self, out, move |_, g| {
            let mut d = Arr::zeros(IxDyn(&[rows, cols]));
            for i in 0..g.shape()[0] {
                for j in 0..cols {
                    d[[start + i, j]] = g[[i, j]];
                }
            }
            d
        })
    }

    // ---- reductions --------------------------------------------------------

    /// Sum of all elements as a 0-d scalar.
    pub fn sum(&self) -> Var {
        let out = self.with_value(|a| Arr::from_elem(IxDyn(&[]), a.iter().sum()));
        let shape = self.shape();
        unary(self, out, move |_, g| {
            Arr::from_elem(IxDyn(&shape), g[[]])
        })
    }

    /// Mean of all elements as a 0-d scalar.
    pub fn mean(&self) -> Var {
        let n = self.with_value(|a| a.len());
        self.sum().scale(1.0 / n as f64)
    }

    /// Mean over rows of a 2-D array: [R, C] -> [1, C].
    pub fn mean_rows(&self) -> Var {
        let out = self.with_value(|a| {
            let (r, c) = dims2(a);
            let mut o = Arr::zeros(IxDyn(&[1, c]));
            for i in 0..r {
                for j in 0..c {
                    o[[0, j]] += a[[i, j]];
                }
            }
            o.mapv_into(|x| x / r as f64)
        });
        let (rows, cols) = self.with_value(dims2);
        unary(self, out, move |_, g| {
            let mut d = Arr::zeros(IxDyn(&[rows, cols]));
            for i in 0..rows {
                for j in 0..cols {
                    d[[i, j]] = g[[0, j]] / rows as f64;
                }
            }
            d
        })
    }

    /// Mean over columns of a 2-D array: [R, C] -> [R, 1].
    pub fn mean_cols(&self) -> Var {
        let out = self.with_value(|a| {
            let (r, c) = dims2(a);
            let mut o = Arr::zeros(IxDyn(&[r, 1]));
            for i in 0..r {
                for j in 0..c {
                    o[[i, 0]] += a[[i, j]];
                }
            }
            o.mapv_into(|x| x / c as f64)
        });
        let (rows, cols) = self.with_value(dims2);
        unary(self, out, move |_, g| {
            let mut d = Arr::zeros(IxDyn(&[rows, cols]));
            for i in 0..rows {
                for j in 0..cols {
                    d[[i, j]] = g[[i, 0]] / cols as f64;
                }
            }
            d
        })
    }

    /// Mean squared difference of two same-shape arrays (0-d output).
    pub fn mse(&self, other: &Var) -> Var {
        self.sub(other).sqr().mean()
    }

    // ---- broadcasting helpers ---------------------------------------------

    /// Add a length-C bias vector to every row of a [R, C] array.
    pub fn add_row_bias(&self, bias: &Var) -> Var {
        self.assert_same_tape(bias);
        let out = self.with_value(|a| {
            bias.with_value(|b| {
                let (r, c) = dims2(a);
                assert_eq!(b.len(), c, "bias len {} vs cols {}", b.len(), c);
                let bs: Vec<f64> = b.iter().copied().collect();
                let mut o = a.clone();
                for i in 0..r {
                    for j in 0..c {
                        o[[i, j]] += bs[j];
                    }
                }
                o
            })
        });
        let (ia, ib) = (self.id(), bias.id());
        let bias_shape = bias.shape();
        self.tape().push(
            out,
            Some(Box::new(move |_ctx, g, sink| {
                sink.add(ia, g.clone());
                let (r, c) = dims2(g);
                let mut db = Arr::zeros(IxDyn(&bias_shape));
                let dbs = db.as_slice_mut().unwrap();
                for i in 0..r {
                    for j in 0..c {
                        dbs[j] += g[[i, j]];
                    }
                }
                sink.add(ib, db);
            })),
        )
    }

    /// Concatenate 2-D arrays along axis 0.
    pub fn concat_rows(parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_rows of nothing");
        let tape = parts[0].tape().clone();
        for p in parts {
            parts[0].assert_same_tape(p);
        }
        let cols = parts[0].shape()[1];
        let mut data = Vec::new();
        let mut row_spans = Vec::new();
        let mut rows = 0usize;
        for p in parts {
            p.with_value(|a| {
                let (r, c) = dims2(a);
                assert_eq!(c, cols, "concat_rows column mismatch {} vs {}", c, cols);
                row_spans.push((rows, r));
                rows += r;
                data.extend(a.iter().copied());
            });
        }
        let out = Arr::from_shape_vec(IxDyn(&[rows, cols]), data).unwrap();
        let ids: Vec<_> = parts.iter().map(|p| p.id()).collect();
        tape.push(
            out,
            Some(Box::new(move |_ctx, g, sink| {
                for (pid, &(start, r)) in ids.iter().zip(&row_spans) {
                    let mut d = Arr::zeros(IxDyn(&[r, cols]));
                    for i in 0..r {
                        for j in 0..cols {
                            d[[i, j]] = g[[start + i, j]];
                        }
                    }
                    sink.add(*pid, d);
                }
            })),
        )
    }

    /// Concatenate 2-D arrays along axis 1.
    pub fn concat_cols(parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_cols of nothing");
        let tape = parts[0].tape().clone();
        for p in parts {
            parts[0].assert_same_tape(p);
        }
        let rows = parts[0].shape()[0];
        let mut col_spans = Vec::new();
        let mut cols = 0usize;
        for p in parts {
            let (r, c) = p.with_value(dims2);
            assert_eq!(r, rows, "concat_cols row mismatch {} vs {}", r, rows);
            col_spans.push((cols, c));
            cols += c;
        }
        let mut out = Arr::zeros(IxDyn(&[rows, cols]));
        for (p, &(start, c)) in parts.iter().zip(&col_spans) {
            p.with_value(|a| {
                for i in 0..rows {
                    for j in 0..c {
                        out[[i, start + j]] = a[[i, j]];
                    }
                }
            });
        }
        let ids: Vec<_> = parts.iter().map(|p| p.id()).collect();
        tape.push(
            out,
            Some(Box::new(move |_ctx, g, sink| {
                for (pid, &(start, c)) in ids.iter().zip(&col_spans) {
                    let mut d = Arr::zeros(IxDyn(&[rows, c]));
                    for i in 0..rows {
                        for j in 0..c {
                            d[[i, j]] = g[[i, start + j]];
                        }
                    }
                    sink.add(*pid, d);
                }
            })),
        )
    }

    // ---- softmax family ----------------------------------------------------

    /// Row-wise softmax of a 2-D array, with max subtraction. Accumulation is
    /// strictly left to right within each row.
    pub fn softmax_rows(&self) -> Var {
        let out = self.with_value(softmax_rows_raw);
        let out_clone = out.clone();
        let pid = self.id();
        self.tape().push(
            out,
            Some(Box::new(move |_ctx, g, sink| {
                let (r, c) = dims2(&out_clone);
                let mut d = Arr::zeros(IxDyn(&[r, c]));
                for i in 0..r {
                    let mut dot = 0.0;
                    for j in 0..c {
                        dot += g[[i, j]] * out_clone[[i, j]];
                    }
                    for j in 0..c {
                        d[[i, j]] = out_clone[[i, j]] * (g[[i, j]] - dot);
                    }
                }
                sink.add(pid, d);
            })),
        )
    }

    /// Mean softmax cross-entropy of logits [B, C] against integer labels,
    /// optionally with per-class weights (weighted mean).
    pub fn softmax_cross_entropy(&self, labels: &[usize], class_weights: Option<&[f64]>) -> Var {
        let (b, c) = self.with_value(dims2);
        assert_eq!(labels.len(), b, "label count vs batch");
        let weights: Vec<f64> = match class_weights {
            Some(w) => {
                assert_eq!(w.len(), c, "class weight count");
                labels.iter().map(|&l| w[l]).collect()
            }
            None => vec![1.0; b],
        };
        let wsum: f64 = weights.iter().sum();
        let probs = self.with_value(softmax_rows_raw);
        let mut loss = 0.0;
        for (i, &l) in labels.iter().enumerate() {
            assert!(l < c, "label {} out of range {}", l, c);
            // Clamp against log(0), but keep the comparison NaN-transparent:
            // f64::max would replace a NaN probability with the clamp value
            // and report a finite loss for non-finite logits.
            let p = probs[[i, l]];
            let floor = if p < 1e-300 { 1e-300 } else { p };
            loss += -floor.ln() * weights[i];
        }
        loss /= wsum;
        let labels = labels.to_vec();
        let pid = self.id();
        self.tape().push(
            Arr::from_elem(IxDyn(&[]), loss),
            Some(Box::new(move |_ctx, g, sink| {
                let gs = g[[]];
                let mut d = probs.clone();
                for (i, &l) in labels.iter().enumerate() {
                    d[[i, l]] -= 1.0;
                }
                for i in 0..d.shape()[0] {
                    for j in 0..d.shape()[1] {
                        d[[i, j]] *= gs * weights[i] / wsum;
                    }
                }
                sink.add(pid, d);
            })),
        )
    }
}

// ---- raw kernels (shared with eval paths) -----------------------------------

fn same_shape(op: &str, a: &Arr, b: &Arr) -> bool {
    assert_eq!(a.shape(), b.shape(), "{op}: shape mismatch");
    true
}

pub fn dims2(a: &Arr) -> (usize, usize) {
    assert_eq!(a.ndim(), 2, "expected 2-D array, got shape {:?}", a.shape());
    (a.shape()[0], a.shape()[1])
}

/// Naive a[m,k] . b[k,n] with i-k-j loop order.
pub fn matmul_raw(a: &Arr, b: &Arr) -> Arr {
    let (m, k) = dims2(a);
    let (kb, n) = dims2(b);
    assert_eq!(k, kb, "matmul inner dim {} vs {}", k, kb);
    let asl = a.as_slice().expect("matmul lhs layout");
    let bsl = b.as_slice().expect("matmul rhs layout");
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &asl[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (kk, &av) in arow.iter().enumerate() {
            let brow = &bsl[kk * n..(kk + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
    Arr::from_shape_vec(IxDyn(&[m, n]), out).unwrap()
}

/// a[m,k] . b[n,k]^T -> [m,n]
pub fn matmul_nt_raw(a: &Arr, b: &Arr) -> Arr {
    let (m, k) = dims2(a);
    let (n, kb) = dims2(b);
    assert_eq!(k, kb, "matmul_nt inner dim {} vs {}", k, kb);
    let asl = a.as_slice().unwrap();
    let bsl = b.as_slice().unwrap();
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &asl[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &bsl[j * k..(j + 1) * k];
            let mut acc = 0.0;
            for kk in 0..k {
                acc += arow[kk] * brow[kk];
            }
            out[i * n + j] = acc;
        }
    }
    Arr::from_shape_vec(IxDyn(&[m, n]), out).unwrap()
}

/// a[k,m]^T . b[k,n] -> [m,n]
pub fn matmul_tn_raw(a: &Arr, b: &Arr) -> Arr {
    let (k, m) = dims2(a);
    let (kb, n) = dims2(b);
    assert_eq!(k, kb, "matmul_tn inner dim {} vs {}", k, kb);
    let asl = a.as_slice().unwrap();
    let bsl = b.as_slice().unwrap();
    let mut out = vec![0.0; m * n];
    for kk in 0..k {
        let arow = &asl[kk * m..(kk + 1) * m];
        let brow = &bsl[kk * n..(kk + 1) * n];
        for i in 0..m {
            let av = arow[i];
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
    Arr::from_shape_vec(IxDyn(&[m, n]), out).unwrap()
}

pub fn transpose_raw(a: &Arr) -> Arr {
    let (r, c) = dims2(a);
    let mut out = Arr::zeros(IxDyn(&[c, r]));
    for i in 0..r {
        for j in 0..c {
            out[[j, i]] = a[[i, j]];
        }
    }
    out
}

/// Two-pass max-subtracted softmax over rows; left-to-right accumulation.
pub fn softmax_rows_raw(a: &Arr) -> Arr {
    let (r, c) = dims2(a);
    assert!(c > 0, "softmax over empty rows");
    let mut out = a.clone();
    for i in 0..r {
        let mut m = f64::NEG_INFINITY;
        for j in 0..c {
            m = m.max(out[[i, j]]);
        }
        let mut sum = 0.0;
        for j in 0..c {
            let e = (out[[i, j]] - m).exp();
            out[[i, j]] = e;
            sum += e;
        }
        for j in 0..c {
            out[[i, j]] /= sum;
        }
    }
    out
}
