//! The Mamba sequence classifier: six residual blocks over the fused tabular
//! and imaging token sequence, mean pooling, bi-cross fusion with the raw
//! volumes, and the final two-way head.
//!
//! Block composition (per block i): x_{i+1} = inner(rms_norm(x_i)) + x_i,
//! where inner projects d → 2·d_inner, splits into a state path and a gate
//! path, runs causal depthwise conv → SiLU → selective scan on the state
//! path, gates with SiLU(z), and projects back to d. Each block owns its
//! RMSNorm gain.

use ndarray::IxDyn;
use rand::Rng;

use gfem_autodiff::{Arr, BoundParams, ParamStore, Var};

use crate::bicross::{bicross_fuse, BicrossVars};
use crate::config::ClassifierConfig;
use crate::error::{GfemError, Result};
use crate::scan::selective_scan_var;
use crate::tabular::{
    assemble_sequence, embed_categorical, embed_numeric, TabularSchema,
};

const RMS_EPS: f64 = 1e-6;

/// Bound parameter handles for one Mamba block.
pub struct MambaBlockVars {
    pub in_proj: Var,
    pub conv_w: Var,
    pub conv_b: Var,
    pub x_proj: Var,
    pub dt_proj: Var,
    pub dt_bias: Var,
    pub a_log: Var,
    pub d_skip: Var,
    pub out_proj: Var,
    pub rms_gain: Var,
}

/// Register freshly initialized parameters for one block under `prefix`.
///
/// Initialization follows the standard selective-scan recipe: A = −exp(a_log)
/// with a_log[c, s] = ln(s+1) (stable, state-graded), D_skip = 1, and the Δ
/// projection bias set so softplus(bias) lands log-uniformly in [1e-3, 1e-1].
pub fn init_mamba_block_params(
    store: &mut ParamStore,
    prefix: &str,
    cfg: &ClassifierConfig,
    rng: &mut impl Rng,
) {
    let (d, di, s, k, r) = (
        cfg.d,
        cfg.d_inner(),
        cfg.state_dim,
        cfg.conv_kernel,
        cfg.dt_rank(),
    );
    {
        let mut uniform = |shape: &[usize], fan_in: usize| {
            let scale = 1.0 / (fan_in as f64).sqrt();
            Arr::from_shape_fn(IxDyn(shape), |_| rng.random_range(-scale..scale))
        };
        store.insert(format!("{prefix}.in_proj"), uniform(&[d, 2 * di], d));
        store.insert(format!("{prefix}.conv_w"), uniform(&[di, k], k));
        store.insert(format!("{prefix}.x_proj"), uniform(&[di, r + 2 * s], di));
        store.insert(format!("{prefix}.dt_proj"), uniform(&[r, di], r));
        store.insert(format!("{prefix}.out_proj"), uniform(&[di, d], di));
    }
    store.insert(format!("{prefix}.conv_b"), Arr::zeros(IxDyn(&[di])));
    // softplus(bias) = dt with dt log-uniform in [1e-3, 1e-1].
    let dt_bias = Arr::from_shape_fn(IxDyn(&[di]), |_| {
        let dt = f64::exp(rng.random_range(f64::ln(1e-3)..f64::ln(1e-1)));
        (dt.exp() - 1.0).ln() // inverse softplus
    });
    store.insert(format!("{prefix}.dt_bias"), dt_bias);
    let a_log = Arr::from_shape_fn(IxDyn(&[di, s]), |ix| ((ix[1] + 1) as f64).ln());
    store.insert(format!("{prefix}.a_log"), a_log);
    store.insert(format!("{prefix}.d_skip"), Arr::ones(IxDyn(&[di])));
    store.insert(format!("{prefix}.rms_gain"), Arr::ones(IxDyn(&[d])));
}

impl MambaBlockVars {
    pub fn bind(bound: &BoundParams, prefix: &str) -> Self {
        let v = |name: &str| bound.var(&format!("{prefix}.{name}")).clone();
        Self {
            in_proj: v("in_proj"),
            conv_w: v("conv_w"),
            conv_b: v("conv_b"),
            x_proj: v("x_proj"),
            dt_proj: v("dt_proj"),
            dt_bias: v("dt_bias"),
            a_log: v("a_log"),
            d_skip: v("d_skip"),
            out_proj: v("out_proj"),
            rms_gain: v("rms_gain"),
        }
    }
}

/// The inner (non-residual) path of a block: project, split, conv, scan, gate.
pub fn mamba_inner(x_seq: &Var, p: &MambaBlockVars, cfg: &ClassifierConfig) -> Result<Var> {
    let shape = x_seq.shape();
    if shape.len() != 2 || shape[1] != cfg.d {
        return Err(GfemError::ShapeMismatch {
            context: "mamba_inner input".into(),
            expected: vec![shape.first().copied().unwrap_or(0), cfg.d],
            actual: shape,
        });
    }
    let (di, s, r) = (cfg.d_inner(), cfg.state_dim, cfg.dt_rank());
    let xz = x_seq.matmul(&p.in_proj); // [L, 2*di]
    let x = xz.slice_cols(0, di);
    let z = xz.slice_cols(di, di);
    let x = x
        .causal_depthwise_conv1d(&p.conv_w, &p.conv_b)
        .silu();
    let x_dbl = x.matmul(&p.x_proj); // [L, r + 2S]
    let dt_in = x_dbl.slice_cols(0, r);
    let b_in = x_dbl.slice_cols(r, s);
    let c_in = x_dbl.slice_cols(r + s, s);
    let delta = dt_in.matmul(&p.dt_proj).add_row_bias(&p.dt_bias).softplus();
    let a_diag = p.a_log.exp().neg();
    let y = selective_scan_var(&x, &delta, &a_diag, &b_in, &c_in, &p.d_skip)?;
    Ok(y.mul(&z.silu()).matmul(&p.out_proj))
}

/// One residual block: x + inner(rms_norm(x)).
pub fn mamba_block(x: &Var, p: &MambaBlockVars, cfg: &ClassifierConfig) -> Result<Var> {
    let normed = x.rms_norm(&p.rms_gain, RMS_EPS);
    Ok(x.add(&mamba_inner(&normed, p, cfg)?))
}

/// The full block stack followed by mean pooling over the sequence: [1, d].
pub fn classifier_forward(
    x: &Var,
    blocks: &[MambaBlockVars],
    cfg: &ClassifierConfig,
) -> Result<Var> {
    let mut h = x.clone();
    for p in blocks {
        h = mamba_block(&h, p, cfg)?;
    }
    Ok(h.mean_rows())
}

/// Final stage: y_cls = affine(bicross_fuse(pooled, x_M, x_P)) ∈ R²,
/// returned as a [1, 2] logit row.
pub fn classify(
    pooled: &Var,
    x_m: &Var,
    x_p: &Var,
    bicross: &BicrossVars,
    head_w: &Var,
    head_b: &Var,
) -> Result<Var> {
    let fused = bicross_fuse(pooled, x_m, x_p, bicross)?;
    Ok(fused.matmul(head_w).add_row_bias(head_b))
}

/// The assembled classifier: tabular embeddings, shared patch projection, the
/// Mamba stack, bi-cross fusion, and the head, all under one parameter store.
///
/// Parameter prefixes: `tab.*`, `block{i}.*`, `bicross.*`, `head.*`.
pub struct ClassifierModel {
    pub cfg: ClassifierConfig,
    pub schema: TabularSchema,
    /// Width of one latent patch token (p²·C_L).
    pub patch_token_dim: usize,
}

/// Per-sample inputs to the classifier forward pass. Patch tokens come from
/// the (frozen) generator's latent spaces; voxel rows from the serialized raw
/// volumes.
#[derive(Clone, Debug)]
pub struct ClassifierInput {
    /// Latent MRI patch tokens [N, p²·C_L].
    pub lmp_tokens: Arr,
    /// Latent (generated) PET patch tokens [N, p²·C_L].
    pub lpp_tokens: Arr,
    /// Offset-encoded categorical codes, length n.
    pub encoded_cats: Vec<usize>,
    /// Normalized numeric values, length m (Δt last).
    pub numeric_z: Vec<f64>,
    /// Serialized MRI voxel rows [V, 1].
    pub mri_rows: Arr,
    /// Serialized PET voxel rows [V, 1].
    pub pet_rows: Arr,
}

impl ClassifierModel {
    pub fn new(cfg: ClassifierConfig, schema: TabularSchema, patch_token_dim: usize) -> Self {
        Self {
            cfg,
            schema,
            patch_token_dim,
        }
    }

    /// Register all classifier parameters into `store`.
    pub fn init_params(&self, store: &mut ParamStore, rng: &mut impl Rng) {
        let d = self.cfg.d;
        let n = self.schema.n_categorical();
        let m = self.schema.n_numeric();
        let total_codes = self.schema.total_cat_codes();
        {
            let mut uniform = |shape: &[usize], fan_in: usize| {
                let scale = 1.0 / (fan_in as f64).sqrt();
                Arr::from_shape_fn(IxDyn(shape), |_| rng.random_range(-scale..scale))
            };
            store.insert("tab.cat_table", uniform(&[total_codes.max(1), d], d));
            store.insert("tab.cat_bias", Arr::zeros(IxDyn(&[n.max(1), d])));
            store.insert("tab.num_w", uniform(&[m.max(1), d], 1));
            store.insert("tab.num_b", Arr::zeros(IxDyn(&[m.max(1), d])));
            store.insert(
                "tab.proj_w",
                uniform(&[self.patch_token_dim, d], self.patch_token_dim),
            );
            store.insert("tab.proj_b", Arr::zeros(IxDyn(&[d])));
            store.insert("head.w", uniform(&[d, 2], d));
            store.insert("head.b", Arr::zeros(IxDyn(&[2])));
        }
        for i in 0..self.cfg.depth {
            init_mamba_block_params(store, &format!("block{i}"), &self.cfg, rng);
        }
        crate::bicross::init_bicross_params(store, "bicross", d, self.cfg.d_k, 1, rng);
    }

    /// Full forward pass to the [1, 2] logit row.
    pub fn logits(&self, bound: &BoundParams, input: &ClassifierInput) -> Result<Var> {
        let tape = bound.tape();
        let n = self.schema.n_categorical();
        let m = self.schema.n_numeric();
        if input.encoded_cats.len() != n || input.numeric_z.len() != m {
            return Err(GfemError::ShapeMismatch {
                context: "classifier tabular inputs".into(),
                expected: vec![n, m],
                actual: vec![input.encoded_cats.len(), input.numeric_z.len()],
            });
        }

        // Table tokens: categoricals then numerics (fixed order).
        let mut parts: Vec<Var> = Vec::new();
        if n > 0 {
            parts.push(embed_categorical(
                bound.var("tab.cat_table"),
                bound.var("tab.cat_bias"),
                &input.encoded_cats,
            ));
        }
        if m > 0 {
            let x = tape.leaf(
                Arr::from_shape_vec(IxDyn(&[m, 1]), input.numeric_z.clone())
                    .expect("numeric column vector"),
            );
            parts.push(embed_numeric(&x, bound.var("tab.num_w"), bound.var("tab.num_b")));
        }
        if parts.is_empty() {
            return Err(GfemError::InvalidData(
                "classifier needs at least one tabular column".into(),
            ));
        }
        let table_tokens = if parts.len() == 1 {
            parts.pop().unwrap()
        } else {
            Var::concat_rows(&parts)
        };

        let lmp = tape.leaf(input.lmp_tokens.clone());
        let lpp = tape.leaf(input.lpp_tokens.clone());
        let seq = assemble_sequence(
            &lmp,
            &lpp,
            &table_tokens,
            bound.var("tab.proj_w"),
            bound.var("tab.proj_b"),
        )?;

        let blocks: Vec<MambaBlockVars> = (0..self.cfg.depth)
            .map(|i| MambaBlockVars::bind(bound, &format!("block{i}")))
            .collect();
        let pooled = classifier_forward(&seq, &blocks, &self.cfg)?;

        let bicross = BicrossVars::bind(bound, "bicross");
        let xm = tape.leaf(input.mri_rows.clone());
        let xp = tape.leaf(input.pet_rows.clone());
        classify(
            &pooled,
            &xm,
            &xp,
            &bicross,
            bound.var("head.w"),
            bound.var("head.b"),
        )
    }
}

/// Softmax probabilities and the argmax label of a [1, 2] logit row.
pub fn predict(logits: &Var) -> (Vec<f64>, u8) {
    let probs = logits.softmax_rows().value();
    let p: Vec<f64> = probs.iter().copied().collect();
    let label = u8::from(p[1] > p[0]);
    (p, label)
}

#[cfg(test)]
mod tests {
    use super::*;
    use gfem_autodiff::{check_gradients, Tape};
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    fn small_cfg() -> ClassifierConfig {
        ClassifierConfig {
            depth: 2,
            d: 8,
            expansion: 2,
            state_dim: 4,
            conv_kernel: 4,
            d_k: 4,
            bicross_residual: "post_ffn_ln".into(),
        }
    }

    fn block_store(cfg: &ClassifierConfig, seed: u64) -> ParamStore {
        let mut store = ParamStore::new();
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        init_mamba_block_params(&mut store, "blk", cfg, &mut rng);
        store
    }

    fn rand_seq(tape: &Tape, l: usize, d: usize, seed: u64) -> Var {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        tape.leaf(Arr::from_shape_fn(IxDyn(&[l, d]), |_| {
            rng.random_range(-1.0..1.0)
        }))
    }

    #[test]
    fn zero_output_projection_makes_inner_zero_and_block_identity() {
        let cfg = small_cfg();
        let mut store = block_store(&cfg, 1);
        *store.get_mut("blk.out_proj") = Arr::zeros(IxDyn(&[cfg.d_inner(), cfg.d]));
        let tape = Tape::new();
        let bound = store.bind(&tape);
        let p = MambaBlockVars::bind(&bound, "blk");
        let x = rand_seq(&tape, 5, cfg.d, 2);
        let inner = mamba_inner(&x, &p, &cfg).unwrap();
        assert!(inner.value().iter().all(|&v| v == 0.0));
        let block = mamba_block(&x, &p, &cfg).unwrap();
        let (xv, bv) = (x.value(), block.value());
        for (a, b) in xv.iter().zip(bv.iter()) {
            assert_eq!(a, b, "residual identity under zero-init inner");
        }
    }

    #[test]
    fn inner_is_causal_under_perturbation() {
        let cfg = small_cfg();
        let store = block_store(&cfg, 3);
        let l = 9;
        let mut rng = ChaCha12Rng::seed_from_u64(4);
        let base = Arr::from_shape_fn(IxDyn(&[l, cfg.d]), |_| rng.random_range(-1.0..1.0));
        let run = |x_val: &Arr| {
            let tape = Tape::new();
            let bound = store.bind(&tape);
            let p = MambaBlockVars::bind(&bound, "blk");
            mamba_inner(&tape.leaf(x_val.clone()), &p, &cfg).unwrap().value()
        };
        let y0 = run(&base);
        for t in [0usize, 3, 8] {
            let mut perturbed = base.clone();
            for j in 0..cfg.d {
                perturbed[[t, j]] += 0.5 + j as f64 * 0.1;
            }
            let y1 = run(&perturbed);
            for tt in 0..l {
                let changed = (0..cfg.d).any(|j| (y0[[tt, j]] - y1[[tt, j]]).abs() > 1e-12);
                if tt < t {
                    assert!(!changed, "position {tt} changed by a perturbation at {t}");
                } else if tt == t {
                    assert!(changed, "perturbation at {t} must reach its own output");
                }
            }
        }
    }

    #[test]
    fn shapes_preserved_for_various_lengths() {
        let cfg = small_cfg();
        let store = block_store(&cfg, 5);
        for l in [1usize, 7, 64] {
            let tape = Tape::new();
            let bound = store.bind(&tape);
            let p = MambaBlockVars::bind(&bound, "blk");
            let x = rand_seq(&tape, l, cfg.d, 6 + l as u64);
            assert_eq!(mamba_inner(&x, &p, &cfg).unwrap().shape(), vec![l, cfg.d]);
            assert_eq!(mamba_block(&x, &p, &cfg).unwrap().shape(), vec![l, cfg.d]);
        }
    }

    #[test]
    fn six_block_stack_preserves_shape() {
        let cfg = ClassifierConfig {
            depth: 6,
            ..small_cfg()
        };
        let mut store = ParamStore::new();
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        for i in 0..cfg.depth {
            init_mamba_block_params(&mut store, &format!("block{i}"), &cfg, &mut rng);
        }
        let tape = Tape::new();
        let bound = store.bind(&tape);
        let blocks: Vec<MambaBlockVars> = (0..cfg.depth)
            .map(|i| MambaBlockVars::bind(&bound, &format!("block{i}")))
            .collect();
        let x = rand_seq(&tape, 11, cfg.d, 8);
        let pooled = classifier_forward(&x, &blocks, &cfg).unwrap();
        assert_eq!(pooled.shape(), vec![1, cfg.d]);
    }

    #[test]
    fn block_gradients_match_finite_differences() {
        let cfg = small_cfg();
        let mut store = block_store(&cfg, 9);
        let l = 4;
        let mut rng = ChaCha12Rng::seed_from_u64(10);
        store.insert(
            "x",
            Arr::from_shape_fn(IxDyn(&[l, cfg.d]), |_| rng.random_range(-1.0..1.0)),
        );
        let coeffs: Vec<f64> = (0..l * cfg.d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let cfg2 = cfg.clone();
        let report = check_gradients(&store, 1e-5, 48, 11, move |tape, bound| {
            let p = MambaBlockVars::bind(bound, "blk");
            let y = mamba_block(bound.var("x"), &p, &cfg2).unwrap();
            let w = tape.leaf(Arr::from_shape_vec(IxDyn(&[l, cfg2.d]), coeffs.clone()).unwrap());
            y.mul(&w).sum()
        });
        report.assert_below(1e-3);
    }

    #[test]
    fn pooling_examples() {
        let cfg = small_cfg();
        let mut store = ParamStore::new();
        let mut rng = ChaCha12Rng::seed_from_u64(12);
        for i in 0..cfg.depth {
            init_mamba_block_params(&mut store, &format!("block{i}"), &cfg, &mut rng);
            // Zero the output projections: every block becomes the identity.
            *store.get_mut(&format!("block{i}.out_proj")) =
                Arr::zeros(IxDyn(&[cfg.d_inner(), cfg.d]));
        }
        let tape = Tape::new();
        let bound = store.bind(&tape);
        let blocks: Vec<MambaBlockVars> = (0..cfg.depth)
            .map(|i| MambaBlockVars::bind(&bound, &format!("block{i}")))
            .collect();

        // L=1: pooled equals the single row (identity stack).
        let x = rand_seq(&tape, 1, cfg.d, 13);
        let pooled = classifier_forward(&x, &blocks, &cfg).unwrap();
        let (xv, pv) = (x.value(), pooled.value());
        for j in 0..cfg.d {
            assert!((xv[[0, j]] - pv[[0, j]]).abs() < 1e-12);
        }

        // Identity stack pools to the mean of input rows.
        let x = rand_seq(&tape, 6, cfg.d, 14);
        let pooled = classifier_forward(&x, &blocks, &cfg).unwrap();
        let xv = x.value();
        for j in 0..cfg.d {
            let mean: f64 = (0..6).map(|i| xv[[i, j]]).sum::<f64>() / 6.0;
            assert!((pooled.value()[[0, j]] - mean).abs() < 1e-12);
        }
    }

    fn tiny_schema() -> TabularSchema {
        use crate::tabular::{CatColumn, NumColumn, NumSource};
        TabularSchema {
            categorical_columns: vec![CatColumn {
                name: "apoe4".into(),
                cardinality: 3,
                unknown_code: None,
            }],
            numeric_columns: vec![
                NumColumn {
                    name: "mmse".into(),
                    mean: 27.0,
                    std: 2.0,
                    source: NumSource::Column(0),
                },
                NumColumn {
                    name: "delta_t_days".into(),
                    mean: 200.0,
                    std: 30.0,
                    source: NumSource::Interval,
                },
            ],
            interval_column: "delta_t_days".into(),
            embedding_dim: 8,
            interval_mean_days: 200.0,
        }
    }

    fn tiny_input(seed: u64, n_patches: usize, pd: usize, voxels: usize) -> ClassifierInput {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let mut arr = |r: usize, c: usize, lo: f64, hi: f64| {
            Arr::from_shape_fn(IxDyn(&[r, c]), |_| rng.random_range(lo..hi))
        };
        ClassifierInput {
            lmp_tokens: arr(n_patches, pd, -1.0, 1.0),
            lpp_tokens: arr(n_patches, pd, -1.0, 1.0),
            encoded_cats: vec![1],
            numeric_z: vec![0.4, -0.2],
            mri_rows: arr(voxels, 1, 0.0, 1.0),
            pet_rows: arr(voxels, 1, 0.0, 1.0),
        }
    }

    #[test]
    fn full_model_head_and_softmax_examples() {
        let cfg = small_cfg();
        let model = ClassifierModel::new(cfg.clone(), tiny_schema(), 6);
        let mut store = ParamStore::new();
        let mut rng = ChaCha12Rng::seed_from_u64(15);
        model.init_params(&mut store, &mut rng);

        // Constant head: zero weights, bias [a, b] -> logits [a, b].
        *store.get_mut("head.w") = Arr::zeros(IxDyn(&[cfg.d, 2]));
        *store.get_mut("head.b") =
            Arr::from_shape_vec(IxDyn(&[2]), vec![0.3, -0.9]).unwrap();
        let input = tiny_input(16, 4, 6, 10);
        let tape = Tape::new();
        let bound = store.bind(&tape);
        let logits = model.logits(&bound, &input).unwrap();
        assert!((logits.value()[[0, 0]] - 0.3).abs() < 1e-12);
        assert!((logits.value()[[0, 1]] + 0.9).abs() < 1e-12);

        let (probs, label) = predict(&logits);
        assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-7);
        assert_eq!(label, 0, "higher first logit predicts class 0");
    }

    #[test]
    fn full_model_finite_for_extreme_inputs() {
        let cfg = small_cfg();
        let model = ClassifierModel::new(cfg.clone(), tiny_schema(), 6);
        let mut store = ParamStore::new();
        let mut rng = ChaCha12Rng::seed_from_u64(17);
        model.init_params(&mut store, &mut rng);
        for fill in [0.0, 1.0, 1e3] {
            let input = ClassifierInput {
                lmp_tokens: Arr::from_elem(IxDyn(&[4, 6]), fill),
                lpp_tokens: Arr::from_elem(IxDyn(&[4, 6]), fill),
                encoded_cats: vec![2],
                numeric_z: vec![fill.min(10.0), 0.0],
                mri_rows: Arr::from_elem(IxDyn(&[8, 1]), fill.min(1.0)),
                pet_rows: Arr::from_elem(IxDyn(&[8, 1]), fill.min(1.0)),
            };
            let tape = Tape::new();
            let bound = store.bind(&tape);
            let logits = model.logits(&bound, &input).unwrap();
            assert!(
                logits.value().iter().all(|v| v.is_finite()),
                "non-finite logits for fill {fill}"
            );
        }
    }

    #[test]
    fn end_to_end_classifier_gradients_match_finite_differences() {
        let cfg = ClassifierConfig {
            depth: 1,
            ..small_cfg()
        };
        let model = ClassifierModel::new(cfg, tiny_schema(), 6);
        let mut store = ParamStore::new();
        let mut rng = ChaCha12Rng::seed_from_u64(18);
        model.init_params(&mut store, &mut rng);
        let input = tiny_input(19, 3, 6, 6);
        let report = check_gradients(&store, 1e-5, 8, 20, move |_tape, bound| {
            model
                .logits(bound, &input)
                .unwrap()
                .softmax_cross_entropy(&[1], None)
        });
        report.assert_below(1e-3);
    }
}
