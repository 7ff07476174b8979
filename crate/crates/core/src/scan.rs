//! Selective-scan kernels (the SSM recurrence inside each Mamba block).
//!
//! Per channel c and state s the recurrence is
//!   h_t = Ā_t·h_{t-1} + B̄u_t,   h_0 = 0,
//!   y_t[c] = Σ_s C_t[s]·h_t[c,s] + D_skip[c]·u_t[c],
//! with the Euler discretization Ā = exp(Δ·A), B̄u = Δ·B·u.
//!
//! Kernels are generic over the float width so the 32-bit and 64-bit paths
//! share one implementation. `Parallel` mode computes the same prefix through
//! an associative divide-and-conquer composition of the affine maps
//! h → a·h + b, giving a genuinely different floating-point reduction order —
//! the cross-mode equivalence test is therefore a real oracle, not a mirror.
//!
//! `selective_scan_var` is the fused tape operation used during training: one
//! node whose backward pass replays the recurrence in reverse, instead of
//! thousands of per-step tape nodes.

use ndarray::IxDyn;
use num_traits::Float;

use gfem_autodiff::{Arr, Var};

use crate::error::{GfemError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScanMode {
    Sequential,
    Parallel,
}

/// First sequence position where a non-finite intermediate appeared.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ScanNonFinite {
    pub t: usize,
}

impl From<ScanNonFinite> for GfemError {
    fn from(e: ScanNonFinite) -> Self {
        GfemError::InvalidData(format!(
            "selective_scan produced a non-finite intermediate at position t={}",
            e.t
        ))
    }
}

#[inline]
fn idx3(t: usize, c: usize, s: usize, d: usize, sd: usize) -> usize {
    (t * d + c) * sd + s
}

/// Ā[t,c,s] = exp(Δ[t,c]·A[c,s]) and B̄u[t,c,s] = Δ[t,c]·B[t,s]·u[t,c].
/// `delta`/`u` are [L,d], `a` is [d,S], `b` is [L,S].
#[allow(clippy::too_many_arguments)]
pub fn discretize<F: Float>(
    l: usize,
    d: usize,
    sd: usize,
    delta: &[F],
    a: &[F],
    b: &[F],
    u: &[F],
) -> (Vec<F>, Vec<F>) {
    let mut a_bar = vec![F::zero(); l * d * sd];
    let mut b_bar_u = vec![F::zero(); l * d * sd];
    for t in 0..l {
        for c in 0..d {
            let dt = delta[t * d + c];
            let ut = u[t * d + c];
            for s in 0..sd {
                let k = idx3(t, c, s, d, sd);
                a_bar[k] = (dt * a[c * sd + s]).exp();
                b_bar_u[k] = dt * b[t * sd + s] * ut;
            }
        }
    }
    (a_bar, b_bar_u)
}

/// Plain left-to-right recurrence; returns the full state history h [L,d,S].
pub fn scan_h_sequential<F: Float>(
    l: usize,
    d: usize,
    sd: usize,
    a_bar: &[F],
    b_bar_u: &[F],
) -> Vec<F> {
    let mut h = vec![F::zero(); l * d * sd];
    for c in 0..d {
        for s in 0..sd {
            let mut acc = F::zero();
            for t in 0..l {
                let k = idx3(t, c, s, d, sd);
                acc = a_bar[k] * acc + b_bar_u[k];
                h[k] = acc;
            }
        }
    }
    h
}

/// In-place inclusive prefix under affine-map composition
/// (a2,b2)∘(a1,b1) = (a2·a1, a2·b1 + b2), combined divide-and-conquer.
fn prefix_affine<F: Float>(a: &mut [F], b: &mut [F]) {
    let n = a.len();
    if n <= 1 {
        return;
    }
    let mid = n / 2;
    let (al, ar) = a.split_at_mut(mid);
    let (bl, br) = b.split_at_mut(mid);
    prefix_affine(al, bl);
    prefix_affine(ar, br);
    let (a_tot, b_tot) = (al[mid - 1], bl[mid - 1]);
    for i in 0..ar.len() {
        br[i] = ar[i] * b_tot + br[i];
        ar[i] = ar[i] * a_tot;
    }
}

/// Associative-scan variant of [`scan_h_sequential`]; numerically equivalent,
/// different reduction order. h_t is the prefix map applied to h_0 = 0, i.e.
/// the b-component of the composed map.
pub fn scan_h_parallel<F: Float>(
    l: usize,
    d: usize,
    sd: usize,
    a_bar: &[F],
    b_bar_u: &[F],
) -> Vec<F> {
    let mut h = vec![F::zero(); l * d * sd];
    let mut lane_a = vec![F::zero(); l];
    let mut lane_b = vec![F::zero(); l];
    for c in 0..d {
        for s in 0..sd {
            for t in 0..l {
                let k = idx3(t, c, s, d, sd);
                lane_a[t] = a_bar[k];
                lane_b[t] = b_bar_u[k];
            }
            prefix_affine(&mut lane_a, &mut lane_b);
            for t in 0..l {
                h[idx3(t, c, s, d, sd)] = lane_b[t];
            }
        }
    }
    h
}

/// y[t,c] = Σ_s C[t,s]·h[t,c,s] + D_skip[c]·u[t,c], checking finiteness
/// position-by-position so failures report the earliest offending t.
#[allow(clippy::too_many_arguments)]
pub fn assemble_y<F: Float>(
    l: usize,
    d: usize,
    sd: usize,
    h: &[F],
    c_in: &[F],
    d_skip: &[F],
    u: &[F],
) -> std::result::Result<Vec<F>, ScanNonFinite> {
    let mut y = vec![F::zero(); l * d];
    for t in 0..l {
        for c in 0..d {
            let mut acc = F::zero();
            for s in 0..sd {
                acc = acc + c_in[t * sd + s] * h[idx3(t, c, s, d, sd)];
            }
            let v = acc + d_skip[c] * u[t * d + c];
            if !v.is_finite() {
                return Err(ScanNonFinite { t });
            }
            y[t * d + c] = v;
        }
    }
    Ok(y)
}

/// Full selective scan from raw projections, in either mode.
#[allow(clippy::too_many_arguments)]
pub fn selective_scan<F: Float>(
    l: usize,
    d: usize,
    sd: usize,
    u: &[F],
    delta: &[F],
    a: &[F],
    b: &[F],
    c_in: &[F],
    d_skip: &[F],
    mode: ScanMode,
) -> std::result::Result<Vec<F>, ScanNonFinite> {
    let (a_bar, b_bar_u) = discretize(l, d, sd, delta, a, b, u);
    let h = match mode {
        ScanMode::Sequential => scan_h_sequential(l, d, sd, &a_bar, &b_bar_u),
        ScanMode::Parallel => scan_h_parallel(l, d, sd, &a_bar, &b_bar_u),
    };
    assemble_y(l, d, sd, &h, c_in, d_skip, u)
}

/// Fused differentiable selective scan (64-bit, sequential forward).
///
/// Shapes: `u`, `delta` [L, d_inner]; `a_diag` [d_inner, S]; `b_in`, `c_in`
/// [L, S]; `d_skip` [d_inner]. Returns y [L, d_inner].
pub fn selective_scan_var(
    u: &Var,
    delta: &Var,
    a_diag: &Var,
    b_in: &Var,
    c_in: &Var,
    d_skip: &Var,
) -> Result<Var> {
    let (l, d) = {
        let s = u.shape();
        (s[0], s[1])
    };
    let sd = a_diag.shape()[1];
    for (name, var, expect) in [
        ("delta", delta, vec![l, d]),
        ("a_diag", a_diag, vec![d, sd]),
        ("b_in", b_in, vec![l, sd]),
        ("c_in", c_in, vec![l, sd]),
        ("d_skip", d_skip, vec![d]),
    ] {
        if var.shape() != expect {
            return Err(GfemError::ShapeMismatch {
                context: format!("selective_scan {name}"),
                expected: expect,
                actual: var.shape(),
            });
        }
    }

    let uv: Vec<f64> = u.value().iter().copied().collect();
    let dv: Vec<f64> = delta.value().iter().copied().collect();
    let av: Vec<f64> = a_diag.value().iter().copied().collect();
    let bv: Vec<f64> = b_in.value().iter().copied().collect();
    let cv: Vec<f64> = c_in.value().iter().copied().collect();
    let skipv: Vec<f64> = d_skip.value().iter().copied().collect();

    let (a_bar, b_bar_u) = discretize(l, d, sd, &dv, &av, &bv, &uv);
    let h = scan_h_sequential(l, d, sd, &a_bar, &b_bar_u);
    let y = assemble_y(l, d, sd, &h, &cv, &skipv, &uv)?;
    let value = Arr::from_shape_vec(IxDyn(&[l, d]), y).expect("scan output shape");

    let (uid, did, aid, bid, cid, skid) = (
        u.id(),
        delta.id(),
        a_diag.id(),
        b_in.id(),
        c_in.id(),
        d_skip.id(),
    );
    let back = move |ctx: &gfem_autodiff::Ctx<'_>, g: &Arr, sink: &mut gfem_autodiff::GradSink<'_>| {
        let uv: Vec<f64> = ctx.value(uid).iter().copied().collect();
        let dv: Vec<f64> = ctx.value(did).iter().copied().collect();
        let av: Vec<f64> = ctx.value(aid).iter().copied().collect();
        let bv: Vec<f64> = ctx.value(bid).iter().copied().collect();
        let cv: Vec<f64> = ctx.value(cid).iter().copied().collect();
        let skipv: Vec<f64> = ctx.value(skid).iter().copied().collect();
        let gy: Vec<f64> = g.iter().copied().collect();

        let mut gu = vec![0.0; l * d];
        let mut gdelta = vec![0.0; l * d];
        let mut ga = vec![0.0; d * sd];
        let mut gb = vec![0.0; l * sd];
        let mut gc = vec![0.0; l * sd];
        let mut gskip = vec![0.0; d];

        // Direct y-terms: D_skip·u and C·h.
        for t in 0..l {
            for c in 0..d {
                let gyv = gy[t * d + c];
                gu[t * d + c] += gyv * skipv[c];
                gskip[c] += gyv * uv[t * d + c];
                for s in 0..sd {
                    gc[t * sd + s] += gyv * h[idx3(t, c, s, d, sd)];
                }
            }
        }
        // Reverse recurrence per lane: gh_t = gy_t·C_t + Ā_{t+1}·gh_{t+1}.
        for c in 0..d {
            for s in 0..sd {
                let mut gh_next = 0.0;
                for t in (0..l).rev() {
                    let k = idx3(t, c, s, d, sd);
                    let mut gh = gy[t * d + c] * cv[t * sd + s];
                    if t + 1 < l {
                        gh += a_bar[idx3(t + 1, c, s, d, sd)] * gh_next;
                    }
                    let h_prev = if t > 0 { h[idx3(t - 1, c, s, d, sd)] } else { 0.0 };
                    let ga_bar = gh * h_prev;
                    // Ā = exp(Δ·A): chain through the exponential.
                    gdelta[t * d + c] += ga_bar * a_bar[k] * av[c * sd + s];
                    ga[c * sd + s] += ga_bar * a_bar[k] * dv[t * d + c];
                    // B̄u = Δ·B·u.
                    let gbu = gh;
                    gdelta[t * d + c] += gbu * bv[t * sd + s] * uv[t * d + c];
                    gb[t * sd + s] += gbu * dv[t * d + c] * uv[t * d + c];
                    gu[t * d + c] += gbu * dv[t * d + c] * bv[t * sd + s];
                    gh_next = gh;
                }
            }
        }

        let arr = |v: Vec<f64>, shape: &[usize]| {
            Arr::from_shape_vec(IxDyn(shape), v).expect("gradient shape")
        };
        sink.add(uid, arr(gu, &[l, d]));
        sink.add(did, arr(gdelta, &[l, d]));
        sink.add(aid, arr(ga, &[d, sd]));
        sink.add(bid, arr(gb, &[l, sd]));
        sink.add(cid, arr(gc, &[l, sd]));
        sink.add(skid, arr(gskip, &[d]));
    };
    Ok(u.tape().push(value, Some(Box::new(back))))
}
