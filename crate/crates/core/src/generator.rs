//! 3-D GAN-ViT translator: encoder/decoder stages, the transformer middle
//! block, discriminator, frozen perceptual stack and the adversarial losses.
//!
//! The generator is encode → patchify → ViT → unpatchify → decode. Both the
//! ViT input tokens (x_LMP) and output tokens (x_LPP) are returned so the
//! classifier can consume the intermediate features. The discriminator reuses
//! the encoder's trunk architecture with its own parameters and adds a
//! mean-pool + affine + logistic score head.

use gfem_autodiff::{Arr, BoundParams, ParamStore, Tape, Var};
use ndarray::IxDyn;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

use crate::config::GeneratorConfig;
use crate::error::{GfemError, Result};
use crate::patches::{
    latent_to_patches_var, patch_permutation, patches_to_latent_var, PatchOrigin, PatchSequence,
};
use crate::volume::Volume;

const GN_EPS: f64 = 1e-5;
const LN_EPS: f64 = 1e-5;
/// Discriminator scores are clamped to [ε, 1−ε] so both log terms stay finite.
pub const SCORE_EPS: f64 = 1e-7;
/// The perceptual stack is a fixed function: its seed never varies with the
/// run seed, so features are comparable across runs.
const PERCEPTUAL_SEED: u64 = u64::from_le_bytes(*b"gfeperc\0");

/// Group count for a `[C, D, H, W]` tensor: gcd of the configured count and
/// `channels`, then reduced until every group holds at least two values. A
/// single-element group has zero variance, normalizes to exactly 0 and
/// erases its input — fatal on `[C, 1, 1, 1]` latents, where per-channel
/// groups would collapse the whole decoder to a constant.
fn norm_groups(configured: usize, channels: usize, spatial: usize) -> usize {
    let (mut a, mut b) = (configured, channels);
    while b != 0 {
        (a, b) = (b, a % b);
    }
    let mut g = a;
    while g > 1 && (channels / g) * spatial < 2 {
        g -= 1;
        while g > 1 && channels % g != 0 {
            g -= 1;
        }
    }
    g
}

fn uniform_arr(rng: &mut ChaCha12Rng, shape: &[usize], bound: f64) -> Arr {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
    Arr::from_shape_vec(IxDyn(shape), data).unwrap()
}

fn expect_shape(actual: &[usize], expected: &[usize], context: &str) -> Result<()> {
    if actual == expected {
        Ok(())
    } else {
        Err(GfemError::ShapeMismatch {
            context: context.into(),
            expected: expected.to_vec(),
            actual: actual.to_vec(),
        })
    }
}

/// Discriminator result on the data path: the Y feature map plus the squashed
/// scalar score.
#[derive(Clone, Debug)]
pub struct DiscriminatorOutput {
    /// `[C_L, D/8, H/8, W/8]`
    pub feature_map: Arr,
    /// In (0,1); clamped to [ε, 1−ε].
    pub score: f64,
}

/// Tape-path generator output: the synthesized PET plus both token sequences.
pub struct GeneratorOutput {
    /// `[1, D, H, W]`, values in [0,1].
    pub pet: Var,
    /// ViT input tokens `[N, p²·C_L]` (latent MRI patches).
    pub x_lmp: Var,
    /// ViT output tokens `[N, p²·C_L]` (latent PET patches).
    pub x_lpp: Var,
}

/// Data-path generator output for caching and classifier consumption.
#[derive(Clone, Debug)]
pub struct GeneratedSample {
    pub pet: Volume,
    pub x_lmp: PatchSequence,
    pub x_lpp: PatchSequence,
}

/// Per-part generator loss values for logging.
#[derive(Clone, Copy, Debug)]
pub struct GeneratorLossParts {
    pub recon: f64,
    pub adv: f64,
    pub perceptual: f64,
}

pub struct GeneratorLoss {
    pub total: Var,
    pub parts: GeneratorLossParts,
    /// The generated PET, exposed so a discriminator step can reuse it.
    pub pet: Var,
}

/// The GAN-ViT bound to a fixed input geometry. Positional embeddings and the
/// patch permutation depend on the volume shape, so the shape is part of the
/// model identity and is recorded in checkpoints.
#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorModel {
    pub cfg: GeneratorConfig,
    /// Input spatial dims (D, H, W); channels are fixed at 1.
    pub input_dims: [usize; 3],
    n_tokens: usize,
}

impl GeneratorModel {
    pub fn new(cfg: GeneratorConfig, input_dims: [usize; 3]) -> Result<Self> {
        cfg.validate()?;
        let [d, h, w] = input_dims;
        for (axis, size) in [("depth", d), ("height", h), ("width", w)] {
            if size == 0 || size % 8 != 0 {
                return Err(GfemError::DimNotDivisible {
                    axis,
                    size,
                    divisor: 8,
                });
            }
        }
        let latent = [cfg.encoder_channels[2], d / 8, h / 8, w / 8];
        let perm = patch_permutation(latent, cfg.patch_size)?;
        Ok(Self {
            cfg,
            input_dims,
            n_tokens: perm.n_tokens,
        })
    }

    /// `[C_L, D/8, H/8, W/8]` after the three stride-2 encoder stages.
    pub fn latent_dims(&self) -> [usize; 4] {
        let [d, h, w] = self.input_dims;
        [self.cfg.encoder_channels[2], d / 8, h / 8, w / 8]
    }

    pub fn n_tokens(&self) -> usize {
        self.n_tokens
    }

    pub fn token_dim(&self) -> usize {
        self.cfg.token_dim()
    }

    fn input_shape(&self) -> [usize; 4] {
        let [d, h, w] = self.input_dims;
        [1, d, h, w]
    }

    // ---- parameter initialization ------------------------------------------

    /// Encoder + ViT middle + decoder parameters.
    pub fn init_generator_params(&self, store: &mut ParamStore, rng: &mut ChaCha12Rng) {
        let e = self.cfg.encoder_channels;
        init_trunk(store, "encoder", [1, e[0], e[1], e[2]], rng);

        let (n, td) = (self.n_tokens, self.token_dim());
        store.insert("vit.pos_embed", uniform_arr(rng, &[n, td], 0.02));
        for i in 0..self.cfg.vit_depth {
            init_vit_block(store, &format!("vit.block{i}"), td, rng);
        }

        let dec = self.cfg.decoder();
        let chain = [dec[0], dec[1], dec[2], 1];
        for i in 0..3 {
            let (ci, co) = (chain[i], chain[i + 1]);
            let p = format!("decoder.block{i}");
            store.insert(format!("{p}.norm.gamma"), Arr::ones(IxDyn(&[ci])));
            store.insert(format!("{p}.norm.beta"), Arr::zeros(IxDyn(&[ci])));
            let bound = 1.0 / ((ci * 8) as f64).sqrt();
            store.insert(
                format!("{p}.deconv.weight"),
                uniform_arr(rng, &[ci, co, 2, 2, 2], bound),
            );
            store.insert(format!("{p}.deconv.bias"), Arr::zeros(IxDyn(&[co])));
        }
    }

    /// Discriminator trunk (its own parameters) plus the score head.
    pub fn init_discriminator_params(&self, store: &mut ParamStore, rng: &mut ChaCha12Rng) {
        let e = self.cfg.encoder_channels;
        init_trunk(store, "discriminator", [1, e[0], e[1], e[2]], rng);
        let c = e[2];
        store.insert(
            "discriminator.head.weight",
            uniform_arr(rng, &[c, 1], 1.0 / (c as f64).sqrt()),
        );
        store.insert("discriminator.head.bias", Arr::zeros(IxDyn(&[1, 1])));
    }

    /// Frozen random perceptual conv stack. Seeded independently of the run
    /// seed and frozen immediately, so Φ is the same fixed function in every
    /// run with the same channel widths.
    pub fn init_perceptual_params(&self, store: &mut ParamStore) {
        let mut rng = ChaCha12Rng::seed_from_u64(PERCEPTUAL_SEED);
        let pc = self.cfg.perceptual_channels;
        let chain = [1, pc[0], pc[1], pc[2]];
        for i in 0..3 {
            let (ci, co) = (chain[i], chain[i + 1]);
            let bound = 1.0 / ((ci * 27) as f64).sqrt();
            store.insert(
                format!("perceptual.conv{i}.weight"),
                uniform_arr(&mut rng, &[co, ci, 3, 3, 3], bound),
            );
            store.insert(
                format!("perceptual.conv{i}.bias"),
                uniform_arr(&mut rng, &[co], bound),
            );
        }
        store.freeze_prefix("perceptual.");
    }

    // ---- forward passes ----------------------------------------------------

    /// Three (maxpool → group norm → conv3×3×3 → SiLU) stages: `[1, D, H, W]`
    /// to `[C_L, D/8, H/8, W/8]`.
    pub fn encode(&self, p: &BoundParams, v: &Var) -> Result<Var> {
        expect_shape(&v.shape(), &self.input_shape(), "encoder input")?;
        Ok(trunk_forward(v, p, "encoder", self.cfg.group_norm_groups))
    }

    /// Transformer middle: positional embedding added once, then pre-norm
    /// attention/FFN blocks with residuals. Shape-preserving.
    pub fn vit_forward(&self, p: &BoundParams, tokens: &Var) -> Result<Var> {
        self.vit_forward_collect(p, tokens, None)
    }

    /// Like [`vit_forward`](Self::vit_forward) but also returns every
    /// attention weight matrix (depth × heads of them, each `[N, N]`).
    pub fn vit_attention_rows(&self, p: &BoundParams, tokens: &Var) -> Result<Vec<Arr>> {
        let mut rows = Vec::new();
        self.vit_forward_collect(p, tokens, Some(&mut rows))?;
        Ok(rows)
    }

    fn vit_forward_collect(
        &self,
        p: &BoundParams,
        tokens: &Var,
        mut collect: Option<&mut Vec<Arr>>,
    ) -> Result<Var> {
        expect_shape(
            &tokens.shape(),
            &[self.n_tokens, self.token_dim()],
            "vit token sequence",
        )?;
        let mut x = tokens.add(p.var("vit.pos_embed"));
        for i in 0..self.cfg.vit_depth {
            x = vit_block(
                &x,
                p,
                &format!("vit.block{i}"),
                self.cfg.vit_heads,
                collect.as_deref_mut(),
            );
        }
        Ok(x)
    }

    /// Three (group norm → transposed conv 2× → activation) stages back to
    /// `[1, D, H, W]`; the final activation is a logistic squash into [0,1].
    pub fn decode(&self, p: &BoundParams, latent: &Var) -> Result<Var> {
        expect_shape(&latent.shape(), &self.latent_dims(), "decoder latent")?;
        let mut cur = latent.clone();
        for i in 0..3 {
            let pre = format!("decoder.block{i}");
            let s = cur.shape();
            let g = norm_groups(self.cfg.group_norm_groups, s[0], s[1] * s[2] * s[3]);
            let normed = cur.group_norm(
                p.var(&format!("{pre}.norm.gamma")),
                p.var(&format!("{pre}.norm.beta")),
                g,
                GN_EPS,
            );
            let up = normed.conv_transpose3d_2x(
                p.var(&format!("{pre}.deconv.weight")),
                p.var(&format!("{pre}.deconv.bias")),
            );
            cur = if i < 2 { up.silu() } else { up.sigmoid() };
        }
        Ok(cur)
    }

    /// Full translator: PET volume plus the ViT input/output token sequences.
    pub fn generate(&self, p: &BoundParams, v: &Var) -> Result<GeneratorOutput> {
        let latent = self.encode(p, v)?;
        let x_lmp = latent_to_patches_var(&latent, self.cfg.patch_size)?;
        let x_lpp = self.vit_forward(p, &x_lmp)?;
        let pet_latent = patches_to_latent_var(&x_lpp, self.cfg.patch_size, self.latent_dims())?;
        let pet = self.decode(p, &pet_latent)?;
        Ok(GeneratorOutput { pet, x_lmp, x_lpp })
    }

    /// Discriminator forward: the Y feature map and the clamped scalar score
    /// (0-d Var).
    pub fn discriminate(&self, p: &BoundParams, v: &Var) -> Result<(Var, Var)> {
        expect_shape(&v.shape(), &self.input_shape(), "discriminator input")?;
        let fm = trunk_forward(v, p, "discriminator", self.cfg.group_norm_groups);
        let s = fm.shape();
        let pooled = fm.reshape(&[s[0], s[1] * s[2] * s[3]]).mean_cols();
        let logit = pooled
            .t()
            .matmul(p.var("discriminator.head.weight"))
            .add(p.var("discriminator.head.bias"));
        let score = logit
            .reshape(&[])
            .sigmoid()
            .clamp(SCORE_EPS, 1.0 - SCORE_EPS);
        Ok((fm, score))
    }

    /// Frozen feature stack Φ: three stride-2 conv+tanh layers; all three
    /// feature volumes are returned.
    pub fn perceptual_features(&self, p: &BoundParams, v: &Var) -> Result<Vec<Var>> {
        expect_shape(&v.shape(), &self.input_shape(), "perceptual input")?;
        let mut cur = v.clone();
        let mut feats = Vec::with_capacity(3);
        for i in 0..3 {
            cur = cur
                .conv3d(
                    p.var(&format!("perceptual.conv{i}.weight")),
                    p.var(&format!("perceptual.conv{i}.bias")),
                    2,
                    1,
                )
                .tanh();
            feats.push(cur.clone());
        }
        Ok(feats)
    }

    // ---- losses ------------------------------------------------------------

    /// Generator objective: MSE(G(x), y) + log(1 − D(G(x))) + perceptual MSE.
    ///
    /// `gen` must bind the generator + perceptual parameters, `disc` the
    /// discriminator's; both on the same tape. Gradients flow into the
    /// discriminator parameters too — a generator step simply does not apply
    /// them.
    pub fn generator_loss(
        &self,
        gen: &BoundParams,
        disc: &BoundParams,
        x_m: &Var,
        y_p: &Var,
    ) -> Result<GeneratorLoss> {
        expect_shape(&y_p.shape(), &self.input_shape(), "real PET")?;
        let out = self.generate(gen, x_m)?;
        let recon = out.pet.mse(y_p);
        let (_fm, score) = self.discriminate(disc, &out.pet)?;
        let adv = adv_part_from_score(&score, self.cfg.non_saturating_adv);

        // Audit mode keeps the printed perceptual arguments Φ(x_M) vs Φ(y_P),
        // which are constant in the generator's parameters.
        let fake_src = if self.cfg.paper_literal_losses {
            x_m
        } else {
            &out.pet
        };
        let f_fake = self.perceptual_features(gen, fake_src)?;
        let f_real = self.perceptual_features(gen, y_p)?;
        let mut perc = f_fake[0].mse(&f_real[0]);
        for i in 1..3 {
            perc = perc.add(&f_fake[i].mse(&f_real[i]));
        }
        let perc = perc.scale(1.0 / 3.0);

        let parts = GeneratorLossParts {
            recon: recon.scalar_value(),
            adv: adv.scalar_value(),
            perceptual: perc.scalar_value(),
        };
        for (name, value) in [
            ("recon", parts.recon),
            ("adv", parts.adv),
            ("perceptual", parts.perceptual),
        ] {
            if !value.is_finite() {
                return Err(GfemError::NonFinite {
                    part: format!("generator loss {name}"),
                    value,
                });
            }
        }
        Ok(GeneratorLoss {
            total: recon.add(&adv).add(&perc),
            parts,
            pet: out.pet,
        })
    }

    /// Discriminator objective on a prepared fake (already detached if this
    /// is a D-step): −[log D(real) + log(1 − D(fake))], or the printed
    /// inverted arguments in audit mode.
    pub fn discriminator_loss_on(
        &self,
        disc: &BoundParams,
        fake: &Var,
        y_p: &Var,
    ) -> Result<Var> {
        let (_ff, s_fake) = self.discriminate(disc, fake)?;
        let (_fr, s_real) = self.discriminate(disc, y_p)?;
        let loss = if self.cfg.paper_literal_losses {
            d_loss_from_scores(&s_fake, &s_real)
        } else {
            d_loss_from_scores(&s_real, &s_fake)
        };
        let value = loss.scalar_value();
        if !value.is_finite() {
            return Err(GfemError::NonFinite {
                part: "discriminator loss".into(),
                value,
            });
        }
        Ok(loss)
    }

    /// Discriminator objective from the paired volumes: generates the fake
    /// and detaches it, so gradients stop at the discriminator.
    pub fn discriminator_loss(
        &self,
        gen: &BoundParams,
        disc: &BoundParams,
        x_m: &Var,
        y_p: &Var,
    ) -> Result<Var> {
        let out = self.generate(gen, x_m)?;
        let fake = gen.tape().leaf(out.pet.value());
        self.discriminator_loss_on(disc, &fake, y_p)
    }

    // ---- data-path wrappers ------------------------------------------------

    /// Run the generator on a concrete volume with a throwaway tape.
    pub fn generate_volume(&self, store: &ParamStore, v: &Volume) -> Result<GeneratedSample> {
        v.validate_for_generator()?;
        let tape = Tape::new();
        let bound = store.bind(&tape);
        let input = tape.leaf(v.data.clone());
        let out = self.generate(&bound, &input)?;
        let grid_dims = self.latent_dims();
        Ok(GeneratedSample {
            pet: Volume::new(out.pet.value())?,
            x_lmp: PatchSequence {
                tokens: out.x_lmp.value(),
                patch_size: self.cfg.patch_size,
                origin: PatchOrigin::LatentMri,
                grid_dims,
            },
            x_lpp: PatchSequence {
                tokens: out.x_lpp.value(),
                patch_size: self.cfg.patch_size,
                origin: PatchOrigin::LatentPet,
                grid_dims,
            },
        })
    }

    /// Run the discriminator on a concrete volume with a throwaway tape.
    pub fn discriminate_volume(
        &self,
        store: &ParamStore,
        v: &Volume,
    ) -> Result<DiscriminatorOutput> {
        let tape = Tape::new();
        let bound = store.bind(&tape);
        let input = tape.leaf(v.data.clone());
        let (fm, score) = self.discriminate(&bound, &input)?;
        Ok(DiscriminatorOutput {
            feature_map: fm.value(),
            score: score.scalar_value(),
        })
    }
}

/// Generator's adversarial term from a score in (0,1): the printed
/// log(1 − s), or −log s when non-saturating.
pub fn adv_part_from_score(score: &Var, non_saturating: bool) -> Var {
    if non_saturating {
        score.ln().neg()
    } else {
        score.neg().add_scalar(1.0).ln()
    }
}

/// Minimax discriminator loss −[log s_pos + log(1 − s_neg)]: `s_pos` is
/// pushed toward 1, `s_neg` toward 0.
pub fn d_loss_from_scores(s_pos: &Var, s_neg: &Var) -> Var {
    s_pos.ln().add(&s_neg.neg().add_scalar(1.0).ln()).neg()
}

/// Shared downsampling trunk used by encoder and discriminator (each with
/// its own parameter prefix): 3 × (maxpool → GN → conv3 → SiLU). SiLU is
/// used over ReLU so the whole trunk is smooth: at desk scale a stage can
/// have only a handful of units, and dead-ReLU configurations would make the
/// loss one-sidedly flat (and finite-difference checks meaningless at the
/// kink).
fn trunk_forward(x: &Var, p: &BoundParams, prefix: &str, groups_cfg: usize) -> Var {
    let mut cur = x.clone();
    for i in 0..3 {
        let pre = format!("{prefix}.block{i}");
        let pooled = cur.maxpool3d_2x();
        let s = pooled.shape();
        let g = norm_groups(groups_cfg, s[0], s[1] * s[2] * s[3]);
        cur = pooled
            .group_norm(
                p.var(&format!("{pre}.norm.gamma")),
                p.var(&format!("{pre}.norm.beta")),
                g,
                GN_EPS,
            )
            .conv3d(
                p.var(&format!("{pre}.conv.weight")),
                p.var(&format!("{pre}.conv.bias")),
                1,
                1,
            )
            .silu();
    }
    cur
}

fn init_trunk(store: &mut ParamStore, prefix: &str, chain: [usize; 4], rng: &mut ChaCha12Rng) {
    for i in 0..3 {
        let (ci, co) = (chain[i], chain[i + 1]);
        let p = format!("{prefix}.block{i}");
        store.insert(format!("{p}.norm.gamma"), Arr::ones(IxDyn(&[ci])));
        store.insert(format!("{p}.norm.beta"), Arr::zeros(IxDyn(&[ci])));
        let bound = 1.0 / ((ci * 27) as f64).sqrt();
        store.insert(
            format!("{p}.conv.weight"),
            uniform_arr(rng, &[co, ci, 3, 3, 3], bound),
        );
        store.insert(format!("{p}.conv.bias"), Arr::zeros(IxDyn(&[co])));
    }
}

fn init_vit_block(store: &mut ParamStore, prefix: &str, td: usize, rng: &mut ChaCha12Rng) {
    for ln in ["ln1", "ln2"] {
        store.insert(format!("{prefix}.{ln}.gamma"), Arr::ones(IxDyn(&[td])));
        store.insert(format!("{prefix}.{ln}.beta"), Arr::zeros(IxDyn(&[td])));
    }
    let b_attn = 1.0 / (td as f64).sqrt();
    for m in ["wq", "wk", "wv", "wo"] {
        store.insert(
            format!("{prefix}.attn.{m}.weight"),
            uniform_arr(rng, &[td, td], b_attn),
        );
        store.insert(format!("{prefix}.attn.{m}.bias"), Arr::zeros(IxDyn(&[td])));
    }
    let hidden = 4 * td;
    store.insert(
        format!("{prefix}.ffn.w1.weight"),
        uniform_arr(rng, &[td, hidden], b_attn),
    );
    store.insert(format!("{prefix}.ffn.w1.bias"), Arr::zeros(IxDyn(&[hidden])));
    store.insert(
        format!("{prefix}.ffn.w2.weight"),
        uniform_arr(rng, &[hidden, td], 1.0 / (hidden as f64).sqrt()),
    );
    store.insert(format!("{prefix}.ffn.w2.bias"), Arr::zeros(IxDyn(&[td])));
}

/// Pre-norm transformer block: x + MHSA(LN1(x)), then + FFN(LN2(·)).
fn vit_block(
    x: &Var,
    p: &BoundParams,
    prefix: &str,
    heads: usize,
    collect: Option<&mut Vec<Arr>>,
) -> Var {
    let ln1 = x.layer_norm(
        p.var(&format!("{prefix}.ln1.gamma")),
        p.var(&format!("{prefix}.ln1.beta")),
        LN_EPS,
    );
    let attn = multi_head_self_attention(&ln1, p, prefix, heads, collect);
    let y = x.add(&attn);
    let ln2 = y.layer_norm(
        p.var(&format!("{prefix}.ln2.gamma")),
        p.var(&format!("{prefix}.ln2.beta")),
        LN_EPS,
    );
    let h = ln2
        .matmul(p.var(&format!("{prefix}.ffn.w1.weight")))
        .add_row_bias(p.var(&format!("{prefix}.ffn.w1.bias")))
        .silu()
        .matmul(p.var(&format!("{prefix}.ffn.w2.weight")))
        .add_row_bias(p.var(&format!("{prefix}.ffn.w2.bias")));
    y.add(&h)
}

fn multi_head_self_attention(
    x: &Var,
    p: &BoundParams,
    prefix: &str,
    heads: usize,
    mut collect: Option<&mut Vec<Arr>>,
) -> Var {
    let proj = |m: &str| {
        x.matmul(p.var(&format!("{prefix}.attn.{m}.weight")))
            .add_row_bias(p.var(&format!("{prefix}.attn.{m}.bias")))
    };
    let (q, k, v) = (proj("wq"), proj("wk"), proj("wv"));
    let td = q.shape()[1];
    let hd = td / heads;
    let scale = 1.0 / (hd as f64).sqrt();
    let mut head_outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = q.slice_cols(h * hd, hd);
        let kh = k.slice_cols(h * hd, hd);
        let vh = v.slice_cols(h * hd, hd);
        let weights = qh.matmul(&kh.t()).scale(scale).softmax_rows();
        if let Some(c) = collect.as_deref_mut() {
            c.push(weights.value());
        }
        head_outs.push(weights.matmul(&vh));
    }
    Var::concat_cols(&head_outs)
        .matmul(p.var(&format!("{prefix}.attn.wo.weight")))
        .add_row_bias(p.var(&format!("{prefix}.attn.wo.bias")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use gfem_autodiff::check_gradients;

    fn desk_model(dims: [usize; 3]) -> GeneratorModel {
        GeneratorModel::new(GeneratorConfig::desk(), dims).unwrap()
    }

    /// Small config for gradient checks on an 8³ volume: latent D_L = 1 means
    /// a 1×1 mosaic, so patch size must be 1.
    fn tiny_cfg() -> GeneratorConfig {
        GeneratorConfig {
            encoder_channels: [2, 3, 4],
            decoder_channels: None,
            patch_size: 1,
            vit_depth: 1,
            vit_heads: 2,
            group_norm_groups: 4,
            perceptual_extractor: crate::config::PerceptualKind::FixedRandomConv,
            perceptual_channels: [2, 3, 3],
            paper_literal_losses: false,
            non_saturating_adv: false,
        }
    }

    fn random_volume(rng: &mut ChaCha12Rng, dims: [usize; 4]) -> Arr {
        let n: usize = dims.iter().product();
        let data: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
        Arr::from_shape_vec(IxDyn(&dims), data).unwrap()
    }

    fn full_store(model: &GeneratorModel, seed: u64) -> ParamStore {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        model.init_generator_params(&mut store, &mut rng);
        model.init_discriminator_params(&mut store, &mut rng);
        model.init_perceptual_params(&mut store);
        store
    }

    #[test]
    fn encode_shape_examples() {
        // [1, 32, 64, 64] through 8/16/32 channels: three stride-2 stages
        // force [32, 4, 8, 8].
        let model = desk_model([32, 64, 64]);
        assert_eq!(model.latent_dims(), [32, 4, 8, 8]);
        let store = full_store(&model, 11);
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        let tape = Tape::new();
        let bound = store.bind(&tape);
        let v = tape.leaf(random_volume(&mut rng, [1, 32, 64, 64]));
        let latent = model.encode(&bound, &v).unwrap();
        assert_eq!(latent.shape(), vec![32, 4, 8, 8]);

        // Minimal legal size: [1, 8, 8, 8] -> [C_L, 1, 1, 1]. Patch size must
        // be 1 for the 1×1 mosaic.
        let cfg = GeneratorConfig {
            patch_size: 1,
            ..GeneratorConfig::desk()
        };
        let small = GeneratorModel::new(cfg, [8, 8, 8]).unwrap();
        assert_eq!(small.latent_dims(), [32, 1, 1, 1]);
        let store = full_store(&small, 12);
        let tape = Tape::new();
        let bound = store.bind(&tape);
        let v = tape.leaf(random_volume(&mut rng, [1, 8, 8, 8]));
        assert_eq!(small.encode(&bound, &v).unwrap().shape(), vec![32, 1, 1, 1]);
    }

    #[test]
    fn indivisible_depth_rejected_by_name() {
        // Depth 30 is not divisible by 8: the model cannot be built.
        let err = GeneratorModel::new(GeneratorConfig::desk(), [30, 64, 64]).unwrap_err();
        match err {
            GfemError::DimNotDivisible { axis, size, divisor } => {
                assert_eq!(axis, "depth");
                assert_eq!(size, 30);
                assert_eq!(divisor, 8);
            }
            other => panic!("expected DimNotDivisible, got {other:?}"),
        }
    }

    #[test]
    fn vit_preserves_shape_and_zero_projections_give_identity() {
        let model = desk_model([16, 16, 16]);
        // Latent [32, 2, 2, 2]: 1×2 mosaic of 2×2 slices -> 2×4 map, p=2
        // cuts it into 2 tokens of dim 128.
        assert_eq!(model.n_tokens(), 2);
        assert_eq!(model.token_dim(), 128);

        let mut store = full_store(&model, 21);
        // Zero every attention output projection and FFN second layer: each
        // block then adds exactly zero, so the ViT must reduce to
        // input + positional embedding.
        let names: Vec<String> = store.names().cloned().collect();
        for name in names {
            if name.contains("attn.wo.weight") || name.contains("ffn.w2.weight") {
                store.get_mut(&name).fill(0.0);
            }
        }
        let tape = Tape::new();
        let bound = store.bind(&tape);
        let mut rng = ChaCha12Rng::seed_from_u64(2);
        let tokens = tape.leaf(uniform_arr(&mut rng, &[2, 128], 1.0));
        let out = model.vit_forward(&bound, &tokens).unwrap();
        assert_eq!(out.shape(), vec![2, 128]);
        let expected = tokens.add(bound.var("vit.pos_embed"));
        assert_eq!(
            out.value(),
            expected.value(),
            "zeroed projections must leave input + pos_embed"
        );
    }

    #[test]
    fn vit_attention_rows_are_stochastic() {
        let model = desk_model([16, 16, 16]);
        let store = full_store(&model, 22);
        let tape = Tape::new();
        let bound = store.bind(&tape);
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let tokens = tape.leaf(uniform_arr(&mut rng, &[2, 128], 2.0));
        let mats = model.vit_attention_rows(&bound, &tokens).unwrap();
        assert_eq!(
            mats.len(),
            model.cfg.vit_depth * model.cfg.vit_heads,
            "one weight matrix per block per head"
        );
        for m in &mats {
            assert_eq!(m.shape(), &[2, 2]);
            for i in 0..2 {
                let row_sum: f64 = (0..2).map(|j| m[[i, j]]).sum();
                assert!((row_sum - 1.0).abs() < 1e-6, "row sum {row_sum}");
            }
        }
    }

    #[test]
    fn decode_restores_dims_and_stays_in_unit_range() {
        let model = desk_model([16, 16, 16]);
        let store = full_store(&model, 31);
        let tape = Tape::new();
        let bound = store.bind(&tape);
        let mut rng = ChaCha12Rng::seed_from_u64(4);
        let latent = tape.leaf(uniform_arr(&mut rng, &[32, 2, 2, 2], 2.0));
        let out = model.decode(&bound, &latent).unwrap();
        assert_eq!(out.shape(), vec![1, 16, 16, 16]);
        for &v in out.value().iter() {
            assert!((0.0..=1.0).contains(&v), "decoder output {v} out of [0,1]");
        }

        // A latent with the wrong depth cannot be decoded.
        let bad = tape.leaf(uniform_arr(&mut rng, &[32, 3, 2, 2], 1.0));
        assert!(matches!(
            model.decode(&bound, &bad).err().unwrap(),
            GfemError::ShapeMismatch { .. }
        ));
    }

    #[test]
    fn generate_composition_and_determinism() {
        let model = desk_model([16, 16, 16]);
        let store = full_store(&model, 41);
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        let vol = Volume::new(random_volume(&mut rng, [1, 16, 16, 16])).unwrap();

        let a = model.generate_volume(&store, &vol).unwrap();
        assert_eq!(a.pet.data.shape(), &[1, 16, 16, 16]);
        assert_eq!(a.x_lmp.tokens.shape(), &[2, 128]);
        assert_eq!(a.x_lpp.tokens.shape(), &[2, 128]);
        assert_eq!(a.x_lmp.origin, PatchOrigin::LatentMri);
        assert_eq!(a.x_lpp.origin, PatchOrigin::LatentPet);

        // x_LMP is definitionally the patchified encoder output.
        let tape = Tape::new();
        let bound = store.bind(&tape);
        let v = tape.leaf(vol.data.clone());
        let latent = model.encode(&bound, &v).unwrap();
        let expected = latent_to_patches_var(&latent, model.cfg.patch_size).unwrap();
        assert_eq!(a.x_lmp.tokens, expected.value());

        // Repeat call with identical weights/input is bit-identical.
        let b = model.generate_volume(&store, &vol).unwrap();
        for (x, y) in a.pet.data.iter().zip(b.pet.data.iter()) {
            assert_eq!(x.to_bits(), y.to_bits(), "repeat generation must be exact");
        }
        for (x, y) in a.x_lpp.tokens.iter().zip(b.x_lpp.tokens.iter()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn minimal_volume_generation_is_not_constant() {
        // Regression: on [1, 8, 8, 8] the latent is [C, 1, 1, 1]. With
        // single-element normalization groups the decoder would zero out its
        // input and emit a constant 0.5 volume regardless of the MRI.
        let model = GeneratorModel::new(tiny_cfg(), [8, 8, 8]).unwrap();
        let store = full_store(&model, 47);
        let mut rng = ChaCha12Rng::seed_from_u64(17);
        let v = Volume::new(random_volume(&mut rng, [1, 8, 8, 8])).unwrap();
        let out = model.generate_volume(&store, &v).unwrap();
        let mn = out.pet.data.iter().cloned().fold(f64::INFINITY, f64::min);
        let mx = out.pet.data.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        assert!(mx - mn > 1e-6, "collapsed to constant: range [{mn}, {mx}]");

        // And a different input must give a different PET.
        let v2 = Volume::new(random_volume(&mut rng, [1, 8, 8, 8])).unwrap();
        let out2 = model.generate_volume(&store, &v2).unwrap();
        let diff: f64 = out
            .pet
            .data
            .iter()
            .zip(out2.pet.data.iter())
            .map(|(a, b)| (a - b).abs())
            .sum();
        assert!(diff > 1e-9, "generator ignores its input");
    }

    #[test]
    fn discriminator_shapes_score_range_and_zero_input() {
        let model = desk_model([16, 16, 16]);
        let store = full_store(&model, 51);
        let mut rng = ChaCha12Rng::seed_from_u64(6);
        let vol = Volume::new(random_volume(&mut rng, [1, 16, 16, 16])).unwrap();
        let out = model.discriminate_volume(&store, &vol).unwrap();
        assert_eq!(out.feature_map.shape(), &[32, 2, 2, 2]);
        assert!(out.score > 0.0 && out.score < 1.0, "score {}", out.score);

        let zero = Volume::zeros(1, 16, 16, 16);
        let out = model.discriminate_volume(&store, &zero).unwrap();
        assert!(out.score.is_finite() && out.score > 0.0 && out.score < 1.0);
    }

    #[test]
    fn discriminator_score_gradient_wrt_input_matches_fd() {
        // The input volume itself is the only trainable entry; all
        // discriminator parameters are frozen, so the checker probes
        // d(score)/d(voxel) against central differences.
        let model = GeneratorModel::new(tiny_cfg(), [8, 8, 8]).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(61);
        let mut store = ParamStore::new();
        model.init_discriminator_params(&mut store, &mut rng);
        store.freeze_prefix("discriminator.");
        store.insert("input", random_volume(&mut rng, [1, 8, 8, 8]));
        let report = check_gradients(&store, 1e-5, 80, 62, |_tape, bound| {
            let (_fm, score) = model.discriminate(bound, bound.var("input")).unwrap();
            score
        });
        assert!(report.len() >= 64, "only {} probes", report.len());
        report.assert_below(1e-3);
    }

    #[test]
    fn perceptual_stack_is_frozen_and_sensitive() {
        let model = desk_model([16, 16, 16]);
        let store = full_store(&model, 71);
        assert!(
            store
                .trainable_names()
                .iter()
                .all(|n| !n.starts_with("perceptual.")),
            "perceptual weights must be frozen"
        );

        let mut rng = ChaCha12Rng::seed_from_u64(7);
        let data = random_volume(&mut rng, [1, 16, 16, 16]);
        let tape = Tape::new();
        let bound = store.bind(&tape);
        let v = tape.leaf(data.clone());
        let f1 = model.perceptual_features(&bound, &v).unwrap();
        let f2 = model.perceptual_features(&bound, &v).unwrap();
        for (a, b) in f1.iter().zip(f2.iter()) {
            assert_eq!(a.value(), b.value(), "same input must give same features");
        }

        // A 1e-2 perturbation must move the features.
        let mut shifted = data.clone();
        shifted[[0, 3, 3, 3]] += 1e-2;
        let vs = tape.leaf(shifted);
        let f3 = model.perceptual_features(&bound, &vs).unwrap();
        let max_diff = f1
            .iter()
            .zip(f3.iter())
            .flat_map(|(a, b)| {
                let (av, bv) = (a.value(), b.value());
                av.iter()
                    .zip(bv.iter())
                    .map(|(x, y)| (x - y).abs())
                    .collect::<Vec<_>>()
            })
            .fold(0.0, f64::max);
        assert!(max_diff > 1e-8, "extractor is degenerate: max diff {max_diff}");

        // A fresh store gets bit-identical perceptual weights: the stack is a
        // fixed function, independent of the run seed.
        let other = full_store(&model, 999);
        assert_eq!(
            store.get("perceptual.conv0.weight"),
            other.get("perceptual.conv0.weight")
        );
    }

    #[test]
    fn generator_loss_identity_example_and_part_ranges() {
        let model = desk_model([16, 16, 16]);
        let store = full_store(&model, 81);
        let mut rng = ChaCha12Rng::seed_from_u64(8);
        let x_data = random_volume(&mut rng, [1, 16, 16, 16]);

        // Use the generator's own output as the "real" PET: then G(x) = y
        // exactly, so recon and perceptual are 0 and total = adv < 0.
        let tape = Tape::new();
        let bound = store.bind(&tape);
        let x = tape.leaf(x_data.clone());
        let pet = model.generate(&bound, &x).unwrap().pet;
        let y = tape.leaf(pet.value());
        let loss = model.generator_loss(&bound, &bound, &x, &y).unwrap();
        assert_eq!(loss.parts.recon, 0.0, "recon must vanish when G(x) = y");
        assert_eq!(loss.parts.perceptual, 0.0, "perceptual must vanish too");
        assert!(loss.parts.adv < 0.0, "adv = log(1 - D) < 0");
        assert!(
            (loss.total.scalar_value() - loss.parts.adv).abs() < 1e-15,
            "total must reduce to the adversarial part"
        );

        // Midpoint-score example: log(1 - 0.5) = -log 2.
        let half = tape.scalar(0.5);
        let adv = adv_part_from_score(&half, false);
        assert!((adv.scalar_value() + std::f64::consts::LN_2).abs() < 1e-12);

        // General pair: every part finite, recon/perceptual >= 0, adv < 0.
        let y2 = tape.leaf(random_volume(&mut rng, [1, 16, 16, 16]));
        let loss = model.generator_loss(&bound, &bound, &x, &y2).unwrap();
        assert!(loss.parts.recon >= 0.0 && loss.parts.perceptual >= 0.0);
        assert!(loss.parts.adv < 0.0 && loss.total.scalar_value().is_finite());
    }

    #[test]
    fn discriminator_loss_reference_values() {
        let tape = Tape::new();
        // Perfect discriminator: D(real) = 1-ε, D(fake) = ε with ε = 1e-6
        // gives -2·ln(1-ε) ≈ 2e-6.
        let eps = 1e-6;
        let real = tape.scalar(1.0 - eps);
        let fake = tape.scalar(eps);
        let loss = d_loss_from_scores(&real, &fake).scalar_value();
        assert!(
            (loss - 2e-6).abs() < 1e-9,
            "perfect-D loss {loss} should be ≈ 2e-6"
        );

        // Uninformative discriminator: both scores 0.5 gives 2·ln 2.
        let half_a = tape.scalar(0.5);
        let half_b = tape.scalar(0.5);
        let loss = d_loss_from_scores(&half_a, &half_b).scalar_value();
        assert!((loss - 2.0 * std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn generator_loss_gradient_matches_fd_on_8_cubed() {
        let model = GeneratorModel::new(tiny_cfg(), [8, 8, 8]).unwrap();
        let store = full_store(&model, 91);
        let mut rng = ChaCha12Rng::seed_from_u64(9);
        let x_data = random_volume(&mut rng, [1, 8, 8, 8]);
        let y_data = random_volume(&mut rng, [1, 8, 8, 8]);
        let report = check_gradients(&store, 1e-5, 2, 92, |tape, bound| {
            let x = tape.leaf(x_data.clone());
            let y = tape.leaf(y_data.clone());
            model
                .generator_loss(bound, bound, &x, &y)
                .unwrap()
                .total
        });
        assert!(report.len() >= 64, "only {} probes", report.len());
        report.assert_below(1e-3);
    }

    #[test]
    fn discriminator_loss_gradient_matches_fd() {
        let model = GeneratorModel::new(tiny_cfg(), [8, 8, 8]).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(10);
        let mut store = ParamStore::new();
        model.init_discriminator_params(&mut store, &mut rng);
        let fake_data = random_volume(&mut rng, [1, 8, 8, 8]);
        let real_data = random_volume(&mut rng, [1, 8, 8, 8]);
        let report = check_gradients(&store, 1e-5, 16, 101, |tape, bound| {
            let fake = tape.leaf(fake_data.clone());
            let real = tape.leaf(real_data.clone());
            model.discriminator_loss_on(bound, &fake, &real).unwrap()
        });
        assert!(report.len() >= 64, "only {} probes", report.len());
        report.assert_below(1e-3);
    }

    #[test]
    fn audit_flags_change_the_loss_forms() {
        let dims = [16, 16, 16];
        let literal = GeneratorModel::new(
            GeneratorConfig {
                paper_literal_losses: true,
                ..GeneratorConfig::desk()
            },
            dims,
        )
        .unwrap();
        let nonsat = GeneratorModel::new(
            GeneratorConfig {
                non_saturating_adv: true,
                ..GeneratorConfig::desk()
            },
            dims,
        )
        .unwrap();
        let standard = desk_model(dims);
        let store = full_store(&standard, 111);

        let mut rng = ChaCha12Rng::seed_from_u64(12);
        let data = random_volume(&mut rng, [1, 16, 16, 16]);
        let tape = Tape::new();
        let bound = store.bind(&tape);
        let x = tape.leaf(data.clone());
        // y = x: the literal perceptual term Φ(x_M) vs Φ(y_P) vanishes even
        // though G(x) ≠ y, while the trainable form stays positive.
        let y = tape.leaf(data.clone());
        let lit = literal.generator_loss(&bound, &bound, &x, &y).unwrap();
        assert_eq!(lit.parts.perceptual, 0.0);
        let std_loss = standard.generator_loss(&bound, &bound, &x, &y).unwrap();
        assert!(std_loss.parts.perceptual > 0.0);

        // Non-saturating adv is -log D > 0; printed form is log(1-D) < 0.
        let ns = nonsat.generator_loss(&bound, &bound, &x, &y).unwrap();
        assert!(ns.parts.adv > 0.0 && std_loss.parts.adv < 0.0);

        // Literal Eq. 2 swaps the score arguments: with one shared score
        // pair, the two forms must agree with the matching helper value.
        let fake = tape.leaf(std_loss.pet.value());
        let (_f, s_fake) = standard.discriminate(&bound, &fake).unwrap();
        let (_r, s_real) = standard.discriminate(&bound, &y).unwrap();
        let std_d = standard.discriminator_loss_on(&bound, &fake, &y).unwrap();
        let lit_d = literal.discriminator_loss_on(&bound, &fake, &y).unwrap();
        let expect_std = d_loss_from_scores(&s_real, &s_fake).scalar_value();
        let expect_lit = d_loss_from_scores(&s_fake, &s_real).scalar_value();
        assert!((std_d.scalar_value() - expect_std).abs() < 1e-12);
        assert!((lit_d.scalar_value() - expect_lit).abs() < 1e-12);
        assert!(
            (std_d.scalar_value() - lit_d.scalar_value()).abs() > 1e-9,
            "forms should differ for asymmetric scores"
        );
    }

    #[test]
    fn generate_volume_rejects_wrong_shape() {
        let model = desk_model([16, 16, 16]);
        let store = full_store(&model, 121);
        let mut rng = ChaCha12Rng::seed_from_u64(13);
        // Divisible by 8 but not the model's bound geometry.
        let other = Volume::new(random_volume(&mut rng, [1, 8, 16, 16])).unwrap();
        assert!(matches!(
            model.generate_volume(&store, &other).unwrap_err(),
            GfemError::ShapeMismatch { .. }
        ));
        // Not divisible by 8 at all.
        let bad = Volume::new(random_volume(&mut rng, [1, 12, 16, 16])).unwrap();
        assert!(matches!(
            model.generate_volume(&store, &bad).unwrap_err(),
            GfemError::DimNotDivisible { axis: "depth", .. }
        ));
    }
}
