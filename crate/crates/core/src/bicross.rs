//! Pixel-level bi-directional cross attention: the classifier's pooled state
//! attends over serialized MRI and PET voxels, followed by residual,
//! feed-forward, and layer-norm stages.
//!
//! One shared parameter set serves both modalities (a single W_q/W_k/W_v/W_o
//! plus the FFN and two layer norms). The attention output is projected from
//! d_k back to d by W_o so it can join the width-d residual stream. No
//! positional encoding is applied over voxels, so attention is permutation
//! equivariant in the key/value rows.
//!
//! Residual placement (`post_ffn_ln` reading, validated in the config):
//!   y₁ = y + attn(y, x_M) + attn(y, x_P)
//!   y₂ = y₁ + LN₂(FFN(LN₁(y₁)))

use ndarray::IxDyn;
use rand::Rng;

use gfem_autodiff::{matmul_raw, softmax_rows_raw, Arr, BoundParams, ParamStore, Var};

use crate::error::{GfemError, Result};
use crate::volume::Volume;

const LN_EPS: f64 = 1e-5;

/// Serialized volume: row d·H·W + h·W + w holds the C channel values of
/// voxel (d, h, w).
#[derive(Clone, Debug)]
pub struct VoxelSequence {
    pub rows: Arr,
    /// Source dims [C, D, H, W], kept for the inverse.
    pub dims: [usize; 4],
}

impl VoxelSequence {
    pub fn n_rows(&self) -> usize {
        self.rows.shape()[0]
    }
}

/// Flatten [C, D, H, W] into [D·H·W, C], depth-major then row-major.
pub fn serialize_voxels(v: &Volume) -> VoxelSequence {
    let (c, d, h, w) = v.dims();
    let mut rows = Arr::zeros(IxDyn(&[d * h * w, c]));
    for ci in 0..c {
        for di in 0..d {
            for hi in 0..h {
                for wi in 0..w {
                    rows[[di * h * w + hi * w + wi, ci]] = v.data[[ci, di, hi, wi]];
                }
            }
        }
    }
    VoxelSequence {
        rows,
        dims: [c, d, h, w],
    }
}

/// Inverse of [`serialize_voxels`].
pub fn unserialize_voxels(seq: &VoxelSequence) -> Result<Volume> {
    let [c, d, h, w] = seq.dims;
    if seq.rows.shape() != [d * h * w, c] {
        return Err(GfemError::ShapeMismatch {
            context: "unserialize_voxels".into(),
            expected: vec![d * h * w, c],
            actual: seq.rows.shape().to_vec(),
        });
    }
    let mut data = Arr::zeros(IxDyn(&[c, d, h, w]));
    for ci in 0..c {
        for di in 0..d {
            for hi in 0..h {
                for wi in 0..w {
                    data[[ci, di, hi, wi]] = seq.rows[[di * h * w + hi * w + wi, ci]];
                }
            }
        }
    }
    Volume::new(data)
}

/// Bound parameter handles for one bi-cross fusion stage.
pub struct BicrossVars {
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
    pub ffn_w1: Var,
    pub ffn_b1: Var,
    pub ffn_w2: Var,
    pub ffn_b2: Var,
    pub ln1_gamma: Var,
    pub ln1_beta: Var,
    pub ln2_gamma: Var,
    pub ln2_beta: Var,
}

/// Register freshly initialized bi-cross parameters under `prefix`.
/// `c` is the voxel channel width (1 for raw scans).
pub fn init_bicross_params(
    store: &mut ParamStore,
    prefix: &str,
    d: usize,
    d_k: usize,
    c: usize,
    rng: &mut impl Rng,
) {
    let mut uniform = |shape: &[usize], scale: f64| {
        Arr::from_shape_fn(IxDyn(shape), |_| rng.random_range(-scale..scale))
    };
    let sq = |n: usize| 1.0 / (n as f64).sqrt();
    let hidden = 4 * d;
    let entries: Vec<(&str, Arr)> = vec![
        ("wq", uniform(&[d, d_k], sq(d))),
        ("wk", uniform(&[c, d_k], sq(c))),
        ("wv", uniform(&[c, d_k], sq(c))),
        ("wo", uniform(&[d_k, d], sq(d_k))),
        ("ffn_w1", uniform(&[d, hidden], sq(d))),
        ("ffn_b1", Arr::zeros(IxDyn(&[hidden]))),
        ("ffn_w2", uniform(&[hidden, d], sq(hidden))),
        ("ffn_b2", Arr::zeros(IxDyn(&[d]))),
        ("ln1_gamma", Arr::ones(IxDyn(&[d]))),
        ("ln1_beta", Arr::zeros(IxDyn(&[d]))),
        ("ln2_gamma", Arr::ones(IxDyn(&[d]))),
        ("ln2_beta", Arr::zeros(IxDyn(&[d]))),
    ];
    for (name, value) in entries {
        store.insert(format!("{prefix}.{name}"), value);
    }
}

impl BicrossVars {
    pub fn bind(bound: &BoundParams, prefix: &str) -> Self {
        let v = |name: &str| bound.var(&format!("{prefix}.{name}")).clone();
        Self {
            wq: v("wq"),
            wk: v("wk"),
            wv: v("wv"),
            wo: v("wo"),
            ffn_w1: v("ffn_w1"),
            ffn_b1: v("ffn_b1"),
            ffn_w2: v("ffn_w2"),
            ffn_b2: v("ffn_b2"),
            ln1_gamma: v("ln1_gamma"),
            ln1_beta: v("ln1_beta"),
            ln2_gamma: v("ln2_gamma"),
            ln2_beta: v("ln2_beta"),
        }
    }
}

/// Single-head cross attention of the pooled state over one voxel sequence:
/// softmax(Q_y·K_xᵀ/√d_k)·V_x, projected back to width d.
pub fn cross_attend(y: &Var, x: &Var, p: &BicrossVars) -> Result<Var> {
    let v_rows = x.shape()[0];
    if v_rows == 0 {
        return Err(GfemError::InvalidData(
            "cross_attend: empty voxel sequence".into(),
        ));
    }
    let d_k = p.wq.shape()[1];
    let q = y.matmul(&p.wq); // [1, d_k]
    let k = x.matmul(&p.wk); // [V, d_k]
    let v = x.matmul(&p.wv); // [V, d_k]
    let scores = q.matmul(&k.t()).scale(1.0 / (d_k as f64).sqrt()); // [1, V]
    let attn = scores.softmax_rows();
    Ok(attn.matmul(&v).matmul(&p.wo)) // [1, d]
}

/// Same forward as [`cross_attend`] on plain arrays, processing voxel rows in
/// chunks of `chunk`. Per-element operation order is chunk-independent, so the
/// result is bit-identical to the monolithic computation for every chunk size.
pub fn cross_attend_chunked(
    y: &Arr,
    x: &Arr,
    wq: &Arr,
    wk: &Arr,
    wv: &Arr,
    wo: &Arr,
    chunk: usize,
) -> Result<Arr> {
    let (v_rows, c) = (x.shape()[0], x.shape()[1]);
    if v_rows == 0 {
        return Err(GfemError::InvalidData(
            "cross_attend: empty voxel sequence".into(),
        ));
    }
    assert!(chunk > 0, "chunk size must be positive");
    let d_k = wq.shape()[1];
    let q = matmul_raw(y, wq); // [1, d_k]
    let scale = 1.0 / (d_k as f64).sqrt();

    // Pass 1: scores for every voxel, chunk by chunk. Each score depends only
    // on its own row, so chunk boundaries cannot reorder any operation.
    let mut scores = Arr::zeros(IxDyn(&[1, v_rows]));
    let mut start = 0;
    while start < v_rows {
        let len = chunk.min(v_rows - start);
        for r in 0..len {
            let vi = start + r;
            // K row: x[vi, :] @ wk, then dot with q — the same i-k-j order the
            // monolithic matmul uses.
            for j in 0..d_k {
                let mut kj = 0.0;
                for ci in 0..c {
                    kj += x[[vi, ci]] * wk[[ci, j]];
                }
                scores[[0, vi]] += q[[0, j]] * kj;
            }
            scores[[0, vi]] *= scale;
        }
        start += len;
    }

    // Monolithic softmax over the full score row (max and sum sweep the same
    // left-to-right order regardless of how pass 1 was chunked).
    let attn = softmax_rows_raw(&scores);

    // Pass 2: out[j] = Σ_v attn[v]·V[v, j], ascending v across chunks.
    let mut out_pre = Arr::zeros(IxDyn(&[1, d_k]));
    let mut start = 0;
    while start < v_rows {
        let len = chunk.min(v_rows - start);
        for r in 0..len {
            let vi = start + r;
            for j in 0..d_k {
                let mut vj = 0.0;
                for ci in 0..c {
                    vj += x[[vi, ci]] * wv[[ci, j]];
                }
                out_pre[[0, j]] += attn[[0, vi]] * vj;
            }
        }
        start += len;
    }
    Ok(matmul_raw(&out_pre, wo))
}

/// Fuse the pooled classifier state with both modalities:
/// y₁ = y + attn(y, x_M) + attn(y, x_P); y₂ = y₁ + LN₂(FFN(LN₁(y₁))).
pub fn bicross_fuse(y: &Var, x_m: &Var, x_p: &Var, p: &BicrossVars) -> Result<Var> {
    let attn_m = cross_attend(y, x_m, p)?;
    let attn_p = cross_attend(y, x_p, p)?;
    let y1 = y.add(&attn_m).add(&attn_p);
    let ffn_in = y1.layer_norm(&p.ln1_gamma, &p.ln1_beta, LN_EPS);
    let hidden = ffn_in.matmul(&p.ffn_w1).add_row_bias(&p.ffn_b1).silu();
    let ffn_out = hidden.matmul(&p.ffn_w2).add_row_bias(&p.ffn_b2);
    Ok(y1.add(&ffn_out.layer_norm(&p.ln2_gamma, &p.ln2_beta, LN_EPS)))
}
