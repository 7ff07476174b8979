//! Latent grids, the depth-slice mosaic, and patch (de)serialization.
//!
//! The `[C_L, D_L, H_L, W_L]` latent grid is flattened to a 2-D feature map by
//! tiling its D_L depth slices into an r×c mosaic (r·c = D_L, r the largest
//! divisor of D_L with r ≤ √D_L — exactly the √D_L × √D_L square whenever D_L
//! is a perfect square). The mosaic is cut into non-overlapping p×p patches in
//! row-major order; each patch is flattened (pixel-major, channel fastest)
//! into a token of length p²·C_L. The mapping is a permutation, so
//! patchify/unpatchify are exact inverses.

use gfem_autodiff::{Arr, Var};
use ndarray::IxDyn;
use serde::{Deserialize, Serialize};

use crate::error::{GfemError, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct LatentGrid {
    /// `[C_L, D_L, H_L, W_L]`
    pub data: Arr,
}

impl LatentGrid {
    pub fn new(data: Arr) -> Result<Self> {
        if data.ndim() != 4 {
            return Err(GfemError::ShapeMismatch {
                context: "latent grid must be [C_L, D_L, H_L, W_L]".into(),
                expected: vec![4],
                actual: data.shape().to_vec(),
            });
        }
        Ok(Self { data })
    }

    pub fn dims(&self) -> [usize; 4] {
        let s = self.data.shape();
        [s[0], s[1], s[2], s[3]]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PatchOrigin {
    LatentMri,
    LatentPet,
}

/// Ordered tokens extracted from the mosaic of a latent grid.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchSequence {
    /// `[N_tok, p²·C_L]`
    pub tokens: Arr,
    pub patch_size: usize,
    pub origin: PatchOrigin,
    /// Latent dims the tokens came from; needed for exact inversion.
    pub grid_dims: [usize; 4],
}

impl PatchSequence {
    pub fn n_tokens(&self) -> usize {
        self.tokens.shape()[0]
    }

    pub fn token_dim(&self) -> usize {
        self.tokens.shape()[1]
    }
}

/// Mosaic tiling (rows, cols) for D_L depth slices.
pub fn mosaic_tiling(d_l: usize) -> (usize, usize) {
    assert!(d_l >= 1, "empty depth");
    let mut r = 1;
    let mut i = 1;
    while i * i <= d_l {
        if d_l % i == 0 {
            r = i;
        }
        i += 1;
    }
    (r, d_l / r)
}

/// The flat permutation carrying a latent grid into token layout.
pub struct PatchPerm {
    /// `perm[token_flat_index] = latent_flat_index`
    pub perm: Vec<usize>,
    pub n_tokens: usize,
    pub token_dim: usize,
    pub mosaic_h: usize,
    pub mosaic_w: usize,
}

pub fn patch_permutation(dims: [usize; 4], p: usize) -> Result<PatchPerm> {
    let [c, d_l, h_l, w_l] = dims;
    let (tile_rows, tile_cols) = mosaic_tiling(d_l);
    let mosaic_h = h_l * tile_rows;
    let mosaic_w = w_l * tile_cols;
    if p == 0 || mosaic_h % p != 0 {
        return Err(GfemError::InvalidConfig(format!(
            "patch size {p} does not divide mosaic height {mosaic_h} (latent {dims:?})"
        )));
    }
    if mosaic_w % p != 0 {
        return Err(GfemError::InvalidConfig(format!(
            "patch size {p} does not divide mosaic width {mosaic_w} (latent {dims:?})"
        )));
    }
    let (ph, pw) = (mosaic_h / p, mosaic_w / p);
    let n_tokens = ph * pw;
    let token_dim = p * p * c;
    let mut perm = Vec::with_capacity(n_tokens * token_dim);
    for pr in 0..ph {
        for pc in 0..pw {
            for i in 0..p {
                for j in 0..p {
                    let u = pr * p + i;
                    let v = pc * p + j;
                    let slice = (u / h_l) * tile_cols + v / w_l;
                    let (h, w) = (u % h_l, v % w_l);
                    for ch in 0..c {
                        perm.push(((ch * d_l + slice) * h_l + h) * w_l + w);
                    }
                }
            }
        }
    }
    Ok(PatchPerm {
        perm,
        n_tokens,
        token_dim,
        mosaic_h,
        mosaic_w,
    })
}

fn apply_perm(src: &Arr, perm: &[usize], out_shape: &[usize]) -> Arr {
    let s = src.as_slice().expect("standard layout");
    let data: Vec<f64> = perm.iter().map(|&i| s[i]).collect();
    Arr::from_shape_vec(IxDyn(out_shape), data).unwrap()
}

fn apply_perm_inverse(src: &Arr, perm: &[usize], out_shape: &[usize]) -> Arr {
    let s = src.as_slice().expect("standard layout");
    let mut data = vec![0.0; s.len()];
    for (tok_i, &lat_i) in perm.iter().enumerate() {
        data[lat_i] = s[tok_i];
    }
    Arr::from_shape_vec(IxDyn(out_shape), data).unwrap()
}

/// Cut a latent grid into the token sequence (data path).
pub fn latent_to_patches(g: &LatentGrid, p: usize, origin: PatchOrigin) -> Result<PatchSequence> {
    let dims = g.dims();
    let pp = patch_permutation(dims, p)?;
    Ok(PatchSequence {
        tokens: apply_perm(&g.data, &pp.perm, &[pp.n_tokens, pp.token_dim]),
        patch_size: p,
        origin,
        grid_dims: dims,
    })
}

/// Exact inverse of [`latent_to_patches`] (data path).
pub fn patches_to_latent(s: &PatchSequence, target_dims: [usize; 4]) -> Result<LatentGrid> {
    let pp = patch_permutation(target_dims, s.patch_size)?;
    let actual = [s.n_tokens(), s.token_dim()];
    if actual != [pp.n_tokens, pp.token_dim] {
        return Err(GfemError::ShapeMismatch {
            context: format!("token sequence does not fit latent dims {target_dims:?}"),
            expected: vec![pp.n_tokens, pp.token_dim],
            actual: actual.to_vec(),
        });
    }
    LatentGrid::new(apply_perm_inverse(
        &s.tokens,
        &pp.perm,
        &target_dims,
    ))
}

/// Tape-path patchify: `[C, D_L, H_L, W_L]` -> `[N, p²·C]`.
pub fn latent_to_patches_var(latent: &Var, p: usize) -> Result<Var> {
    let shape = latent.shape();
    let dims: [usize; 4] = shape
        .as_slice()
        .try_into()
        .map_err(|_| GfemError::ShapeMismatch {
            context: "latent var must be 4-D".into(),
            expected: vec![4],
            actual: shape.clone(),
        })?;
    let pp = patch_permutation(dims, p)?;
    Ok(permute_flat(latent, pp.perm, &[pp.n_tokens, pp.token_dim]))
}

/// Tape-path unpatchify: `[N, p²·C]` -> `target_dims`.
pub fn patches_to_latent_var(tokens: &Var, p: usize, target_dims: [usize; 4]) -> Result<Var> {
    let pp = patch_permutation(target_dims, p)?;
    let shape = tokens.shape();
    if shape != [pp.n_tokens, pp.token_dim] {
        return Err(GfemError::ShapeMismatch {
            context: format!("token var does not fit latent dims {target_dims:?}"),
            expected: vec![pp.n_tokens, pp.token_dim],
            actual: shape,
        });
    }
    // Inverse permutation: out.flat[perm[i]] = in.flat[i].
    let mut inv = vec![0usize; pp.perm.len()];
    for (tok_i, &lat_i) in pp.perm.iter().enumerate() {
        inv[lat_i] = tok_i;
    }
    Ok(permute_flat(tokens, inv, &target_dims))
}

/// Differentiable flat gather: `out.flat[i] = in.flat[perm[i]]`. For a
/// bijective `perm` the backward pass is the inverse scatter.
fn permute_flat(v: &Var, perm: Vec<usize>, out_shape: &[usize]) -> Var {
    let out = v.with_value(|a| apply_perm(a, &perm, out_shape));
    let pid = v.id();
    let in_shape = v.shape();
    v.tape().push(
        out,
        Some(Box::new(move |_ctx, g, sink| {
            let gs = g.as_slice().unwrap();
            let mut d = vec![0.0; gs.len()];
            for (out_i, &in_i) in perm.iter().enumerate() {
                d[in_i] += gs[out_i];
            }
            sink.add(pid, Arr::from_shape_vec(IxDyn(&in_shape), d).unwrap());
        })),
    )
}
