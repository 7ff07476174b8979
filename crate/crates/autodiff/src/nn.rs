//! Neural-network building blocks: 3-D convolutions, pooling, normalization
//! layers, embeddings and a causal depthwise 1-D convolution.
//!
//! Conventions:
//! - volumes are 4-D `[C, D, H, W]` (single sample; batching is an outer loop)
//! - sequences are 2-D `[L, C]` (time-major)
//! - all loops run in a fixed order so results are bit-reproducible

use ndarray::IxDyn;

use crate::ops::dims2;
use crate::tape::{Arr, Var};

fn dims4(a: &Arr) -> (usize, usize, usize, usize) {
    assert_eq!(a.ndim(), 4, "expected 4-D volume, got shape {:?}", a.shape());
    (a.shape()[0], a.shape()[1], a.shape()[2], a.shape()[3])
}

/// Output spatial extent of a convolution along one axis.
pub fn conv_out_len(n: usize, k: usize, stride: usize, pad: usize) -> usize {
    assert!(n + 2 * pad >= k, "conv input {} + 2*{} smaller than kernel {}", n, pad, k);
    (n + 2 * pad - k) / stride + 1
}

/// 3-D convolution forward pass on raw arrays.
///
/// `x` is `[C_in, D, H, W]`, `w` is `[C_out, C_in, k, k, k]`, `b` is `[C_out]`.
pub fn conv3d_raw(x: &Arr, w: &Arr, b: &Arr, stride: usize, pad: usize) -> Arr {
    let (ci, d, h, wd) = dims4(x);
    assert_eq!(w.ndim(), 5, "conv3d weight must be 5-D");
    let (co, wci, k) = (w.shape()[0], w.shape()[1], w.shape()[2]);
    assert_eq!(wci, ci, "conv3d weight C_in {} vs input {}", wci, ci);
    assert_eq!(b.len(), co, "conv3d bias length");
    let (od, oh, ow) = (
        conv_out_len(d, k, stride, pad),
        conv_out_len(h, k, stride, pad),
        conv_out_len(wd, k, stride, pad),
    );
    let xs = x.as_slice().unwrap();
    let ws = w.as_slice().unwrap();
    let bs = b.as_slice().unwrap();
    let mut out = vec![0.0; co * od * oh * ow];
    for c in 0..co {
        for zd in 0..od {
            for zh in 0..oh {
                for zw in 0..ow {
                    let mut acc = bs[c];
                    for ic in 0..ci {
                        for kd in 0..k {
                            let id = (zd * stride + kd) as isize - pad as isize;
                            if id < 0 || id >= d as isize {
                                continue;
                            }
                            for kh in 0..k {
                                let ih = (zh * stride + kh) as isize - pad as isize;
                                if ih < 0 || ih >= h as isize {
                                    continue;
                                }
                                for kw in 0..k {
                                    let iw = (zw * stride + kw) as isize - pad as isize;
                                    if iw < 0 || iw >= wd as isize {
                                        continue;
                                    }
                                    let xi = ((ic * d + id as usize) * h + ih as usize) * wd
                                        + iw as usize;
                                    let wi = (((c * ci + ic) * k + kd) * k + kh) * k + kw;
                                    acc += xs[xi] * ws[wi];
                                }
                            }
                        }
                    }
                    out[((c * od + zd) * oh + zh) * ow + zw] = acc;
                }
            }
        }
    }
    Arr::from_shape_vec(IxDyn(&[co, od, oh, ow]), out).unwrap()
}

impl Var {
    /// 3-D convolution with square kernel, shared stride/padding on all axes.
    pub fn conv3d(&self, weight: &Var, bias: &Var, stride: usize, pad: usize) -> Var {
        self.assert_same_tape(weight);
        self.assert_same_tape(bias);
        let out = self.with_value(|x| {
            weight.with_value(|w| bias.with_value(|b| conv3d_raw(x, w, b, stride, pad)))
        });
        let (ix, iw, ib) = (self.id(), weight.id(), bias.id());
        self.tape().push(
            out,
            Some(Box::new(move |ctx, g, sink| {
                let x = ctx.value(ix);
                let w = ctx.value(iw);
                let (ci, d, h, wd) = dims4(x);
                let (co, k) = (w.shape()[0], w.shape()[2]);
                let (od, oh, ow) = (g.shape()[1], g.shape()[2], g.shape()[3]);
                let xs = x.as_slice().unwrap();
                let ws = w.as_slice().unwrap();
                let gs = g.as_slice().unwrap();
                let mut dx = vec![0.0; ci * d * h * wd];
                let mut dw = vec![0.0; w.len()];
                let mut db = vec![0.0; co];
                for c in 0..co {
                    for zd in 0..od {
                        for zh in 0..oh {
                            for zw in 0..ow {
                                let gv = gs[((c * od + zd) * oh + zh) * ow + zw];
                                db[c] += gv;
                                for ic in 0..ci {
                                    for kd in 0..k {
                                        let id = (zd * stride + kd) as isize - pad as isize;
                                        if id < 0 || id >= d as isize {
                                            continue;
                                        }
                                        for kh in 0..k {
                                            let ih = (zh * stride + kh) as isize - pad as isize;
                                            if ih < 0 || ih >= h as isize {
                                                continue;
                                            }
                                            for kw in 0..k {
                                                let iw2 =
                                                    (zw * stride + kw) as isize - pad as isize;
                                                if iw2 < 0 || iw2 >= wd as isize {
                                                    continue;
                                                }
                                                let xi = ((ic * d + id as usize) * h
                                                    + ih as usize)
                                                    * wd
                                                    + iw2 as usize;
                                                let wi = (((c * ci + ic) * k + kd) * k + kh) * k
                                                    + kw;
                                                dx[xi] += gv * ws[wi];
                                                dw[wi] += gv * xs[xi];
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                sink.add(ix, Arr::from_shape_vec(IxDyn(&[ci, d, h, wd]), dx).unwrap());
                sink.add(iw, Arr::from_shape_vec(IxDyn(w.shape()), dw).unwrap());
                sink.add(ib, Arr::from_shape_vec(IxDyn(&[co]), db).unwrap());
            })),
        )
    }

    /// Transposed 3-D convolution with kernel 2, stride 2 (exact 2x upsample).
    ///
    /// `weight` is `[C_in, C_out, 2, 2, 2]`, `bias` is `[C_out]`.
    pub fn conv_transpose3d_2x(&self, weight: &Var, bias: &Var) -> Var {
        self.assert_same_tape(weight);
        self.assert_same_tape(bias);
        let out = self.with_value(|x| {
            weight.with_value(|w| {
                bias.with_value(|b| {
                    let (ci, d, h, wd) = dims4(x);
                    assert_eq!(w.shape()[0], ci, "convT weight C_in");
                    assert_eq!(w.shape()[2..], [2, 2, 2], "convT kernel must be 2");
                    let co = w.shape()[1];
                    let xs = x.as_slice().unwrap();
                    let ws = w.as_slice().unwrap();
                    let bs = b.as_slice().unwrap();
                    let (od, oh, ow) = (2 * d, 2 * h, 2 * wd);
                    let mut o = vec![0.0; co * od * oh * ow];
                    for (c, bv) in bs.iter().enumerate() {
                        let base = c * od * oh * ow;
                        for v in &mut o[base..base + od * oh * ow] {
                            *v = *bv;
                        }
                    }
                    for ic in 0..ci {
                        for zd in 0..d {
                            for zh in 0..h {
                                for zw in 0..wd {
                                    let xv = xs[((ic * d + zd) * h + zh) * wd + zw];
                                    for c in 0..co {
                                        for kd in 0..2 {
                                            for kh in 0..2 {
                                                for kw in 0..2 {
                                                    let wi = ((((ic * co + c) * 2 + kd) * 2 + kh)
                                                        * 2)
                                                        + kw;
                                                    let oi = ((c * od + 2 * zd + kd) * oh
                                                        + 2 * zh
                                                        + kh)
                                                        * ow
                                                        + 2 * zw
                                                        + kw;
                                                    o[oi] += xv * ws[wi];
                                                }
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                    Arr::from_shape_vec(IxDyn(&[co, od, oh, ow]), o).unwrap()
                })
            })
        });
        let (ix, iw, ib) = (self.id(), weight.id(), bias.id());
        self.tape().push(
            out,
            Some(Box::new(move |ctx, g, sink| {
                let x = ctx.value(ix);
                let w = ctx.value(iw);
                let (ci, d, h, wd) = dims4(x);
                let co = w.shape()[1];
                let (od, oh, ow) = (2 * d, 2 * h, 2 * wd);
                let xs = x.as_slice().unwrap();
                let ws = w.as_slice().unwrap();
                let gs = g.as_slice().unwrap();
                let mut dx = vec![0.0; x.len()];
                let mut dw = vec![0.0; w.len()];
                let mut db = vec![0.0; co];
                for c in 0..co {
                    let base = c * od * oh * ow;
                    for v in &gs[base..base + od * oh * ow] {
                        db[c] += v;
                    }
                }
                for ic in 0..ci {
                    for zd in 0..d {
                        for zh in 0..h {
                            for zw in 0..wd {
                                let xi = ((ic * d + zd) * h + zh) * wd + zw;
                                let xv = xs[xi];
                                let mut acc = 0.0;
                                for c in 0..co {
                                    for kd in 0..2 {
                                        for kh in 0..2 {
                                            for kw in 0..2 {
                                                let wi = ((((ic * co + c) * 2 + kd) * 2 + kh) * 2)
                                                    + kw;
                                                let oi = ((c * od + 2 * zd + kd) * oh
                                                    + 2 * zh
                                                    + kh)
                                                    * ow
                                                    + 2 * zw
                                                    + kw;
                                                acc += gs[oi] * ws[wi];
                                                dw[wi] += gs[oi] * xv;
                                            }
                                        }
                                    }
                                }
                                dx[xi] = acc;
                            }
                        }
                    }
                }
                sink.add(ix, Arr::from_shape_vec(IxDyn(x.shape()), dx).unwrap());
                sink.add(iw, Arr::from_shape_vec(IxDyn(w.shape()), dw).unwrap());
                sink.add(ib, Arr::from_shape_vec(IxDyn(&[co]), db).unwrap());
            })),
        )
    }

    /// 2x2x2 max pooling with stride 2. Requires even spatial dims; ties go to
    /// the first element in scan order, so the backward scatter is unique.
    pub fn maxpool3d_2x(&self) -> Var {
        let (c, d, h, w) = self.with_value(|x| dims4(x));
        assert!(
            d % 2 == 0 && h % 2 == 0 && w % 2 == 0,
            "maxpool3d_2x needs even dims, got [{}, {}, {}, {}]",
            c,
            d,
            h,
            w
        );
        let (od, oh, ow) = (d / 2, h / 2, w / 2);
        let mut argmax = vec![0usize; c * od * oh * ow];
        let out = self.with_value(|x| {
            let xs = x.as_slice().unwrap();
            let mut o = vec![0.0; c * od * oh * ow];
            for cc in 0..c {
                for zd in 0..od {
                    for zh in 0..oh {
                        for zw in 0..ow {
                            let mut best = f64::NEG_INFINITY;
                            let mut best_i = 0usize;
                            for kd in 0..2 {
                                for kh in 0..2 {
                                    for kw in 0..2 {
                                        let xi = ((cc * d + 2 * zd + kd) * h + 2 * zh + kh) * w
                                            + 2 * zw
                                            + kw;
                                        if xs[xi] > best {
                                            best = xs[xi];
                                            best_i = xi;
                                        }
                                    }
                                }
                            }
                            let oi = ((cc * od + zd) * oh + zh) * ow + zw;
                            o[oi] = best;
                            argmax[oi] = best_i;
                        }
                    }
                }
            }
            Arr::from_shape_vec(IxDyn(&[c, od, oh, ow]), o).unwrap()
        });
        let pid = self.id();
        let in_shape = self.shape();
        self.tape().push(
            out,
            Some(Box::new(move |_ctx, g, sink| {
                let gs = g.as_slice().unwrap();
                let mut dx = vec![0.0; in_shape.iter().product()];
                for (oi, &xi) in argmax.iter().enumerate() {
                    dx[xi] += gs[oi];
                }
                sink.add(pid, Arr::from_shape_vec(IxDyn(&in_shape), dx).unwrap());
            })),
        )
    }

    /// Group normalization over a `[C, D, H, W]` volume with per-channel
    /// affine parameters. `groups` must divide `C`.
    pub fn group_norm(&self, gamma: &Var, beta: &Var, groups: usize, eps: f64) -> Var {
        self.assert_same_tape(gamma);
        self.assert_same_tape(beta);
        let (c, d, h, w) = self.with_value(|x| dims4(x));
        assert!(groups > 0 && c % groups == 0, "groups {} must divide C {}", groups, c);
        assert_eq!(gamma.value().len(), c, "group_norm gamma length");
        assert_eq!(beta.value().len(), c, "group_norm beta length");
        let spatial = d * h * w;
        let cg = c / groups;
        let n = cg * spatial;
        // Cache per-group mean and 1/std for the backward pass.
        let mut inv_std = vec![0.0; groups];
        let mut means = vec![0.0; groups];
        let out = self.with_value(|x| {
            gamma.with_value(|ga| {
                beta.with_value(|be| {
                    let xs = x.as_slice().unwrap();
                    let gs = ga.as_slice().unwrap();
                    let bs = be.as_slice().unwrap();
                    let mut o = vec![0.0; xs.len()];
                    for g in 0..groups {
                        let lo = g * cg * spatial;
                        let hi = lo + n;
                        let mut mean = 0.0;
                        for &v in &xs[lo..hi] {
                            mean += v;
                        }
                        mean /= n as f64;
                        let mut var = 0.0;
                        for &v in &xs[lo..hi] {
                            var += (v - mean) * (v - mean);
                        }
                        var /= n as f64;
                        let istd = 1.0 / (var + eps).sqrt();
                        means[g] = mean;
                        inv_std[g] = istd;
                        for cc in 0..cg {
                            let ch = g * cg + cc;
                            let base = ch * spatial;
                            for i in 0..spatial {
                                o[base + i] = (xs[base + i] - mean) * istd * gs[ch] + bs[ch];
                            }
                        }
                    }
                    Arr::from_shape_vec(IxDyn(&[c, d, h, w]), o).unwrap()
                })
            })
        });
        let (ix, iga, ibe) = (self.id(), gamma.id(), beta.id());
        self.tape().push(
            out,
            Some(Box::new(move |ctx, g, sink| {
                let x = ctx.value(ix);
                let ga = ctx.value(iga);
                let xs = x.as_slice().unwrap();
                let gams = ga.as_slice().unwrap();
                let grads = g.as_slice().unwrap();
                let mut dx = vec![0.0; xs.len()];
                let mut dga = vec![0.0; c];
                let mut dbe = vec![0.0; c];
                for gi in 0..groups {
                    let mean = means[gi];
                    let istd = inv_std[gi];
                    // dxhat, plus the two group-wide reductions.
                    let mut sum_dxh = 0.0;
                    let mut sum_dxh_xh = 0.0;
                    for cc in 0..cg {
                        let ch = gi * cg + cc;
                        let base = ch * spatial;
                        for i in 0..spatial {
                            let xh = (xs[base + i] - mean) * istd;
                            let gv = grads[base + i];
                            dga[ch] += gv * xh;
                            dbe[ch] += gv;
                            let dxh = gv * gams[ch];
                            sum_dxh += dxh;
                            sum_dxh_xh += dxh * xh;
                        }
                    }
                    let m_dxh = sum_dxh / n as f64;
                    let m_dxh_xh = sum_dxh_xh / n as f64;
                    for cc in 0..cg {
                        let ch = gi * cg + cc;
                        let base = ch * spatial;
                        for i in 0..spatial {
                            let xh = (xs[base + i] - mean) * istd;
                            let dxh = grads[base + i] * gams[ch];
                            dx[base + i] = istd * (dxh - m_dxh - xh * m_dxh_xh);
                        }
                    }
                }
                sink.add(ix, Arr::from_shape_vec(IxDyn(x.shape()), dx).unwrap());
                sink.add(iga, Arr::from_shape_vec(IxDyn(&[c]), dga).unwrap());
                sink.add(ibe, Arr::from_shape_vec(IxDyn(&[c]), dbe).unwrap());
            })),
        )
    }

    /// Layer normalization over the last axis of a `[R, C]` array.
    pub fn layer_norm(&self, gamma: &Var, beta: &Var, eps: f64) -> Var {
        self.assert_same_tape(gamma);
        self.assert_same_tape(beta);
        let (r, c) = self.with_value(dims2);
        assert_eq!(gamma.value().len(), c, "layer_norm gamma length");
        assert_eq!(beta.value().len(), c, "layer_norm beta length");
        let mut means = vec![0.0; r];
        let mut inv_std = vec![0.0; r];
        let out = self.with_value(|x| {
            gamma.with_value(|ga| {
                beta.with_value(|be| {
                    let gs = ga.as_slice().unwrap();
                    let bs = be.as_slice().unwrap();
                    let mut o = Arr::zeros(IxDyn(&[r, c]));
                    for i in 0..r {
                        let mut mean = 0.0;
                        for j in 0..c {
                            mean += x[[i, j]];
                        }
                        mean /= c as f64;
                        let mut var = 0.0;
                        for j in 0..c {
                            var += (x[[i, j]] - mean) * (x[[i, j]] - mean);
                        }
                        var /= c as f64;
                        let istd = 1.0 / (var + eps).sqrt();
                        means[i] = mean;
                        inv_std[i] = istd;
                        for j in 0..c {
                            o[[i, j]] = (x[[i, j]] - mean) * istd * gs[j] + bs[j];
                        }
                    }
                    o
                })
            })
        });
        let (ix, iga, ibe) = (self.id(), gamma.id(), beta.id());
        self.tape().push(
            out,
            Some(Box::new(move |ctx, g, sink| {
                let x = ctx.value(ix);
                let ga = ctx.value(iga);
                let gams = ga.as_slice().unwrap();
                let mut dx = Arr::zeros(IxDyn(&[r, c]));
                let mut dga = vec![0.0; c];
                let mut dbe = vec![0.0; c];
                for i in 0..r {
                    let mean = means[i];
                    let istd = inv_std[i];
                    let mut sum_dxh = 0.0;
                    let mut sum_dxh_xh = 0.0;
                    for j in 0..c {
                        let xh = (x[[i, j]] - mean) * istd;
                        let gv = g[[i, j]];
                        dga[j] += gv * xh;
                        dbe[j] += gv;
                        let dxh = gv * gams[j];
                        sum_dxh += dxh;
                        sum_dxh_xh += dxh * xh;
                    }
                    let m_dxh = sum_dxh / c as f64;
                    let m_dxh_xh = sum_dxh_xh / c as f64;
                    for j in 0..c {
                        let xh = (x[[i, j]] - mean) * istd;
                        let dxh = g[[i, j]] * gams[j];
                        dx[[i, j]] = istd * (dxh - m_dxh - xh * m_dxh_xh);
                    }
                }
                sink.add(ix, dx);
                sink.add(iga, Arr::from_shape_vec(IxDyn(&[c]), dga).unwrap());
                sink.add(ibe, Arr::from_shape_vec(IxDyn(&[c]), dbe).unwrap());
            })),
        )
    }

    /// RMS normalization over the last axis of a `[R, C]` array:
    /// `y = x / sqrt(mean(x^2) + eps) * gain`.
    pub fn rms_norm(&self, gain: &Var, eps: f64) -> Var {
        self.assert_same_tape(gain);
        let (r, c) = self.with_value(dims2);
        assert_eq!(gain.value().len(), c, "rms_norm gain length");
        let mut inv_rms = vec![0.0; r];
        let out = self.with_value(|x| {
            gain.with_value(|ga| {
                let gs = ga.as_slice().unwrap();
                let mut o = Arr::zeros(IxDyn(&[r, c]));
                for i in 0..r {
                    let mut ms = 0.0;
                    for j in 0..c {
                        ms += x[[i, j]] * x[[i, j]];
                    }
                    ms /= c as f64;
                    let ir = 1.0 / (ms + eps).sqrt();
                    inv_rms[i] = ir;
                    for j in 0..c {
                        o[[i, j]] = x[[i, j]] * ir * gs[j];
                    }
                }
                o
            })
        });
        let (ix, iga) = (self.id(), gain.id());
        self.tape().push(
            out,
            Some(Box::new(move |ctx, g, sink| {
                let x = ctx.value(ix);
                let ga = ctx.value(iga);
                let gs = ga.as_slice().unwrap();
                let mut dx = Arr::zeros(IxDyn(&[r, c]));
                let mut dga = vec![0.0; c];
                for i in 0..r {
                    let ir = inv_rms[i];
                    let mut dot = 0.0;
                    for j in 0..c {
                        dga[j] += g[[i, j]] * x[[i, j]] * ir;
                        dot += g[[i, j]] * gs[j] * x[[i, j]];
                    }
                    let coef = ir * ir * ir * dot / c as f64;
                    for j in 0..c {
                        dx[[i, j]] = ir * gs[j] * g[[i, j]] - coef * x[[i, j]];
                    }
                }
                sink.add(ix, dx);
                sink.add(iga, Arr::from_shape_vec(IxDyn(&[c]), dga).unwrap());
            })),
        )
    }

    /// Row lookup into an embedding table `[V, E]`; output `[N, E]`.
    /// Indices are data, not differentiated; gradients scatter-add into rows.
    pub fn embedding(table: &Var, indices: &[usize]) -> Var {
        let (v, e) = table.with_value(dims2);
        let out = table.with_value(|t| {
            let mut o = Arr::zeros(IxDyn(&[indices.len(), e]));
            for (i, &idx) in indices.iter().enumerate() {
                assert!(idx < v, "embedding index {} out of range {}", idx, v);
                for j in 0..e {
                    o[[i, j]] = t[[idx, j]];
                }
            }
            o
        });
        let tid = table.id();
        let indices = indices.to_vec();
        table.tape().push(
            out,
            Some(Box::new(move |_ctx, g, sink| {
                let mut d = Arr::zeros(IxDyn(&[v, e]));
                for (i, &idx) in indices.iter().enumerate() {
                    for j in 0..e {
                        d[[idx, j]] += g[[i, j]];
                    }
                }
                sink.add(tid, d);
            })),
        )
    }

    /// Causal depthwise 1-D convolution on a `[L, C]` sequence with left
    /// padding of `k - 1` zeros: `y[t,c] = b[c] + sum_j w[c,j] x[t-k+1+j, c]`.
    pub fn causal_depthwise_conv1d(&self, weight: &Var, bias: &Var) -> Var {
        self.assert_same_tape(weight);
        self.assert_same_tape(bias);
        let (l, c) = self.with_value(dims2);
        let (wc, k) = weight.with_value(dims2);
        assert_eq!(wc, c, "depthwise conv channels {} vs input {}", wc, c);
        assert_eq!(bias.value().len(), c, "depthwise conv bias length");
        let out = self.with_value(|x| {
            weight.with_value(|w| {
                bias.with_value(|b| {
                    let bs = b.as_slice().unwrap();
                    let mut o = Arr::zeros(IxDyn(&[l, c]));
                    for t in 0..l {
                        for ch in 0..c {
                            let mut acc = bs[ch];
                            for j in 0..k {
                                let ti = t as isize - (k as isize - 1) + j as isize;
                                if ti >= 0 {
                                    acc += w[[ch, j]] * x[[ti as usize, ch]];
                                }
                            }
                            o[[t, ch]] = acc;
                        }
                    }
                    o
                })
            })
        });
        let (ix, iw, ib) = (self.id(), weight.id(), bias.id());
        self.tape().push(
            out,
            Some(Box::new(move |ctx, g, sink| {
                let x = ctx.value(ix);
                let w = ctx.value(iw);
                let mut dx = Arr::zeros(IxDyn(&[l, c]));
                let mut dw = Arr::zeros(IxDyn(&[c, k]));
                let mut db = vec![0.0; c];
                for t in 0..l {
                    for ch in 0..c {
                        let gv = g[[t, ch]];
                        db[ch] += gv;
                        for j in 0..k {
                            let ti = t as isize - (k as isize - 1) + j as isize;
                            if ti >= 0 {
                                dx[[ti as usize, ch]] += gv * w[[ch, j]];
                                dw[[ch, j]] += gv * x[[ti as usize, ch]];
                            }
                        }
                    }
                }
                sink.add(ix, dx);
                sink.add(iw, dw);
                sink.add(ib, Arr::from_shape_vec(IxDyn(&[c]), db).unwrap());
            })),
        )
    }
}
