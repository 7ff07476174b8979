//! Training orchestration: adversarial generator pretraining on paired
//! volumes, classifier training on frozen-generator features, held-out and
//! k-fold evaluation, and self-describing run manifests.
//!
//! Alternation order is one discriminator step then one generator step per
//! batch. Every run logs per-epoch means; a non-finite loss aborts the run
//! with a divergence record while leaving the last interval checkpoint on
//! disk untouched.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use gfem_autodiff::{Adam, Arr, ParamStore, Tape, Var};

use crate::bicross::serialize_voxels;
use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::cohort::CohortManifest;
use crate::config::{ClassifierConfig, GeneratorConfig, Stage, TrainConfig};
use crate::error::{GfemError, Result};
use crate::generator::GeneratorModel;
use crate::mamba::{ClassifierInput, ClassifierModel, predict};
use crate::metrics::{
    compute_metrics, confusion_counts, kfold_split, mean_roc_curve, roc_auc, MeanRoc,
    MetricsReport, RocCurve,
};
use crate::synth::{load_pairs, SynthCohort};
use crate::tabular::{
    fit_schema, load_table_csv, normalize_numeric, offset_encode, CohortTable, ColumnDecl, Record,
    TabularSchema,
};
use crate::volume::Volume;

// ---------------------------------------------------------------------------
// Run manifests and logs

/// One logged epoch: a flat map of named scalar values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    #[serde(flatten)]
    pub values: BTreeMap<String, f64>,
}

impl EpochRecord {
    fn new(epoch: usize, values: &[(&str, f64)]) -> Self {
        Self {
            epoch,
            values: values.iter().map(|(k, v)| (k.to_string(), *v)).collect(),
        }
    }
}

/// Everything needed to understand or re-execute a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub stage: String,
    pub config: serde_json::Value,
    pub dataset_fingerprint: String,
    /// Pre-training evaluation (epoch 0).
    pub initial: EpochRecord,
    pub epochs: Vec<EpochRecord>,
    pub final_checkpoint: Option<String>,
    pub diverged: Option<String>,
}

impl RunManifest {
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| GfemError::json(path, e))?;
        std::fs::write(path, text).map_err(|e| GfemError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| GfemError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| GfemError::json(path, e))
    }

    /// Line-oriented JSON: the initial record then one line per epoch.
    pub fn write_log(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for record in std::iter::once(&self.initial).chain(self.epochs.iter()) {
            out.push_str(&serde_json::to_string(record).map_err(|e| GfemError::json(path, e))?);
            out.push('\n');
        }
        std::fs::write(path, out).map_err(|e| GfemError::io(path, e))
    }
}

fn sha256_hex(feed: impl FnOnce(&mut Sha256)) -> String {
    let mut hasher = Sha256::new();
    feed(&mut hasher);
    let digest = hasher.finalize();
    let mut hex = String::with_capacity(64);
    for b in digest {
        hex.push_str(&format!("{b:02x}"));
    }
    hex
}

fn hash_volume(hasher: &mut Sha256, v: &Volume) {
    for d in v.data.shape() {
        hasher.update((*d as u64).to_le_bytes());
    }
    for &x in v.data.iter() {
        hasher.update(x.to_le_bytes());
    }
}

// ---------------------------------------------------------------------------
// Datasets

/// In-memory (MRI, PET) pairs for generator pretraining.
pub struct PairedDataset {
    pub pairs: Vec<(Volume, Volume)>,
}

impl PairedDataset {
    pub fn from_synth(cohort: &SynthCohort) -> Self {
        Self {
            pairs: cohort
                .samples
                .iter()
                .map(|s| (s.mri.clone(), s.pet.clone()))
                .collect(),
        }
    }

    /// Load every pair listed in a `pairs.json`.
    pub fn load(pairs_json: &Path) -> Result<Self> {
        let mut pairs = Vec::new();
        for p in load_pairs(pairs_json)? {
            pairs.push((
                Volume::load(Path::new(&p.mri))?,
                Volume::load(Path::new(&p.pet))?,
            ));
        }
        Ok(Self { pairs })
    }

    pub fn fingerprint(&self) -> String {
        sha256_hex(|h| {
            for (mri, pet) in &self.pairs {
                hash_volume(h, mri);
                hash_volume(h, pet);
            }
        })
    }
}

/// One classifier-stage sample before feature extraction.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainSample {
    pub subject_id: String,
    pub label: u8,
    pub record: Record,
    pub mri: Volume,
}

/// Build classifier samples straight from a synthetic cohort.
pub fn samples_from_synth(cohort: &SynthCohort) -> Vec<TrainSample> {
    cohort
        .samples
        .iter()
        .map(|s| TrainSample {
            subject_id: s.subject_id.clone(),
            label: s.label,
            record: s.record.clone(),
            mri: s.mri.clone(),
        })
        .collect()
}

/// Join a cohort manifest against its tabular table by (subject_id, baseline
/// date) and load each sample's MRI volume from its attached path.
pub fn assemble_train_samples(
    manifest: &CohortManifest,
    table: &CohortTable,
) -> Result<Vec<TrainSample>> {
    let mut by_key: BTreeMap<(&str, &str), usize> = BTreeMap::new();
    for i in 0..table.records.len() {
        by_key.insert((table.subject_ids[i].as_str(), table.exam_dates[i].as_str()), i);
    }
    let mut samples = Vec::with_capacity(manifest.samples.len());
    for s in &manifest.samples {
        let date = s.baseline_date.format("%Y-%m-%d").to_string();
        let row = *by_key
            .get(&(s.subject_id.as_str(), date.as_str()))
            .ok_or_else(|| {
                GfemError::InvalidData(format!(
                    "no tabular row for subject {} at {date}",
                    s.subject_id
                ))
            })?;
        if table.labels[row] != s.label {
            return Err(GfemError::InvalidData(format!(
                "label disagreement for subject {} at {date}: manifest {} vs table {}",
                s.subject_id, s.label, table.labels[row]
            )));
        }
        let mri_path = s.mri_path.as_ref().ok_or_else(|| {
            GfemError::InvalidData(format!(
                "sample {} at {date} has no attached MRI volume",
                s.subject_id
            ))
        })?;
        samples.push(TrainSample {
            subject_id: s.subject_id.clone(),
            label: s.label,
            record: table.records[row].clone(),
            mri: Volume::load(Path::new(mri_path))?,
        });
    }
    Ok(samples)
}

// ---------------------------------------------------------------------------
// Generator training

/// Result of a GAN pretraining run.
pub struct GanTrainResult {
    pub manifest: RunManifest,
    pub gen_store: ParamStore,
    pub disc_store: ParamStore,
}

fn mean_of(parts: &[f64]) -> f64 {
    parts.iter().sum::<f64>() / parts.len() as f64
}

/// Evaluate generator/discriminator losses over the whole dataset without
/// touching parameters.
fn eval_gan(
    model: &GeneratorModel,
    gen_store: &ParamStore,
    disc_store: &ParamStore,
    data: &PairedDataset,
) -> Result<EpochRecord> {
    let (mut recon, mut adv, mut perc, mut total, mut dloss) =
        (Vec::new(), Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for (mri, pet) in &data.pairs {
        let tape = Tape::new();
        let gen = gen_store.bind(&tape);
        let disc = disc_store.bind(&tape);
        let x_m = tape.leaf(mri.data.clone());
        let y_p = tape.leaf(pet.data.clone());
        let g = model.generator_loss(&gen, &disc, &x_m, &y_p)?;
        let d = model.discriminator_loss_on(&disc, &g.pet, &y_p)?;
        recon.push(g.parts.recon);
        adv.push(g.parts.adv);
        perc.push(g.parts.perceptual);
        total.push(g.total.scalar_value());
        dloss.push(d.scalar_value());
    }
    Ok(EpochRecord::new(
        0,
        &[
            ("g_total", mean_of(&total)),
            ("g_recon", mean_of(&recon)),
            ("g_adv", mean_of(&adv)),
            ("g_perc", mean_of(&perc)),
            ("d_loss", mean_of(&dloss)),
        ],
    ))
}

/// Adversarial pretraining per the printed objectives: one discriminator step
/// then one generator step per batch. `out_dir` enables checkpoint/log
/// persistence; `None` keeps the run fully in memory.
pub fn train_generator(
    model: &GeneratorModel,
    data: &PairedDataset,
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<GanTrainResult> {
    cfg.validate()?;
    if cfg.stage != Stage::Generator {
        return Err(GfemError::InvalidConfig(
            "train_generator needs stage = generator".into(),
        ));
    }
    if data.pairs.is_empty() {
        return Err(GfemError::InvalidData("no training pairs".into()));
    }
    for (mri, pet) in &data.pairs {
        mri.validate_for_generator()?;
        pet.validate_for_generator()?;
    }

    let mut rng = ChaCha12Rng::seed_from_u64(cfg.seed);
    let mut gen_store = ParamStore::new();
    model.init_generator_params(&mut gen_store, &mut rng);
    model.init_perceptual_params(&mut gen_store);
    let mut disc_store = ParamStore::new();
    model.init_discriminator_params(&mut disc_store, &mut rng);

    let mut adam_g = Adam::with_betas(cfg.learning_rate, cfg.beta1, cfg.beta2);
    let mut adam_d = Adam::with_betas(cfg.learning_rate, cfg.beta1, cfg.beta2);

    let config_snapshot = serde_json::json!({
        "generator": model.cfg,
        "input_dims": model.input_dims,
        "train": cfg,
    });
    let mut manifest = RunManifest {
        stage: "generator".into(),
        config: config_snapshot.clone(),
        dataset_fingerprint: data.fingerprint(),
        initial: EpochRecord::new(0, &[]),
        epochs: Vec::new(),
        final_checkpoint: None,
        diverged: None,
    };

    let save_ckpts = |gen: &ParamStore, disc: &ParamStore| -> Result<Option<String>> {
        let Some(dir) = out_dir else { return Ok(None) };
        std::fs::create_dir_all(dir).map_err(|e| GfemError::io(dir, e))?;
        let gen_path = dir.join("generator.ckpt");
        save_checkpoint(gen, &config_snapshot, &gen_path)?;
        save_checkpoint(disc, &config_snapshot, &dir.join("discriminator.ckpt"))?;
        Ok(Some(gen_path.display().to_string()))
    };
    let persist = |manifest: &RunManifest| -> Result<()> {
        let Some(dir) = out_dir else { return Ok(()) };
        std::fs::create_dir_all(dir).map_err(|e| GfemError::io(dir, e))?;
        manifest.save(&dir.join("manifest.json"))?;
        manifest.write_log(&dir.join("train_log.jsonl"))
    };

    // Epoch-0 evaluation shares the divergence contract: a non-finite loss
    // anywhere aborts with the record persisted and no checkpoint written.
    match eval_gan(model, &gen_store, &disc_store, data) {
        Ok(rec) => manifest.initial = rec,
        Err(err) => {
            let part = non_finite_part(&err);
            manifest.diverged = Some(format!("epoch 0: non-finite loss in {part}"));
            persist(&manifest)?;
            return Err(GfemError::Divergence {
                stage: "generator".into(),
                epoch: 0,
                part,
            });
        }
    }

    let mut steps_done = 0usize;
    let mut indices: Vec<usize> = (0..data.pairs.len()).collect();
    'epochs: for epoch in 1..=cfg.epochs {
        indices.shuffle(&mut rng);
        let (mut recon, mut adv, mut perc, mut total, mut dloss) =
            (Vec::new(), Vec::new(), Vec::new(), Vec::new(), Vec::new());
        for batch in indices.chunks(cfg.batch_size) {
            if cfg.max_steps.is_some_and(|m| steps_done >= m) {
                break 'epochs;
            }
            // Discriminator step on detached fakes.
            let step = (|| -> Result<()> {
                let tape = Tape::new();
                let gen = gen_store.bind(&tape);
                let disc = disc_store.bind(&tape);
                let mut losses = Vec::new();
                for &i in batch {
                    let (mri, pet) = &data.pairs[i];
                    let x_m = tape.leaf(mri.data.clone());
                    let y_p = tape.leaf(pet.data.clone());
                    losses.push(model.discriminator_loss(&gen, &disc, &x_m, &y_p)?);
                }
                let loss = mean_vars(&losses);
                let value = loss.scalar_value();
                if !value.is_finite() {
                    return Err(GfemError::NonFinite {
                        part: "discriminator loss".into(),
                        value,
                    });
                }
                dloss.push(value);
                let grads = tape.backward(&loss);
                adam_d.step(&mut disc_store, &disc.grads_by_name(&grads));

                // Generator step against the just-updated discriminator.
                let tape = Tape::new();
                let gen = gen_store.bind(&tape);
                let disc = disc_store.bind(&tape);
                let mut losses = Vec::new();
                for &i in batch {
                    let (mri, pet) = &data.pairs[i];
                    let x_m = tape.leaf(mri.data.clone());
                    let y_p = tape.leaf(pet.data.clone());
                    let g = model.generator_loss(&gen, &disc, &x_m, &y_p)?;
                    recon.push(g.parts.recon);
                    adv.push(g.parts.adv);
                    perc.push(g.parts.perceptual);
                    losses.push(g.total);
                }
                let loss = mean_vars(&losses);
                let value = loss.scalar_value();
                if !value.is_finite() {
                    return Err(GfemError::NonFinite {
                        part: "generator total loss".into(),
                        value,
                    });
                }
                total.push(value);
                let grads = tape.backward(&loss);
                adam_g.step(&mut gen_store, &gen.grads_by_name(&grads));
                Ok(())
            })();
            if let Err(err) = step {
                let part = non_finite_part(&err);
                manifest.diverged =
                    Some(format!("epoch {epoch}: non-finite loss in {part}"));
                persist(&manifest)?;
                return Err(GfemError::Divergence {
                    stage: "generator".into(),
                    epoch,
                    part,
                });
            }
            steps_done += 1;
        }
        if recon.is_empty() {
            break;
        }
        manifest.epochs.push(EpochRecord::new(
            epoch,
            &[
                ("g_total", mean_of(&total)),
                ("g_recon", mean_of(&recon)),
                ("g_adv", mean_of(&adv)),
                ("g_perc", mean_of(&perc)),
                ("d_loss", mean_of(&dloss)),
            ],
        ));
        if epoch % cfg.checkpoint_interval == 0 {
            manifest.final_checkpoint = save_ckpts(&gen_store, &disc_store)?;
        }
    }

    manifest.final_checkpoint = save_ckpts(&gen_store, &disc_store)?;
    persist(&manifest)?;
    Ok(GanTrainResult {
        manifest,
        gen_store,
        disc_store,
    })
}

fn mean_vars(losses: &[Var]) -> Var {
    let mut sum = losses[0].clone();
    for l in &losses[1..] {
        sum = sum.add(l);
    }
    sum.scale(1.0 / losses.len() as f64)
}

fn non_finite_part(err: &GfemError) -> String {
    match err {
        GfemError::NonFinite { part, .. } => part.clone(),
        other => other.to_string(),
    }
}

/// Rebuild a generator model + parameters from a training checkpoint.
pub fn load_generator_checkpoint(path: &Path) -> Result<(GeneratorModel, ParamStore)> {
    let (store, config) = load_checkpoint(path)?;
    let parse = |what: &str, v: &serde_json::Value| -> Result<serde_json::Value> {
        v.get(what).cloned().ok_or_else(|| {
            GfemError::CheckpointCorrupt(format!(
                "{}: config snapshot lacks '{what}'",
                path.display()
            ))
        })
    };
    let gen_cfg: GeneratorConfig = serde_json::from_value(parse("generator", &config)?)
        .map_err(|e| GfemError::CheckpointCorrupt(format!("generator config: {e}")))?;
    let input_dims: [usize; 3] = serde_json::from_value(parse("input_dims", &config)?)
        .map_err(|e| GfemError::CheckpointCorrupt(format!("input_dims: {e}")))?;
    Ok((GeneratorModel::new(gen_cfg, input_dims)?, store))
}

// ---------------------------------------------------------------------------
// Classifier features

/// Per-sample features from the frozen generator plus the raw tabular record;
/// normalization is deferred so each fold can fit its own schema.
#[derive(Clone, Debug)]
pub struct SampleFeatures {
    pub subject_id: String,
    pub label: u8,
    pub record: Record,
    pub lmp_tokens: Arr,
    pub lpp_tokens: Arr,
    pub mri_rows: Arr,
    pub pet_rows: Arr,
}

pub struct FeatureCache {
    pub features: Vec<SampleFeatures>,
    pub decl: ColumnDecl,
    pub patch_token_dim: usize,
    pub fingerprint: String,
}

impl FeatureCache {
    pub fn labels(&self) -> Vec<u8> {
        self.features.iter().map(|f| f.label).collect()
    }

    pub fn subjects(&self) -> Vec<String> {
        self.features.iter().map(|f| f.subject_id.clone()).collect()
    }
}

/// Run every sample's MRI through the frozen generator, caching latent patch
/// tokens for both modalities and serialized voxel rows for bi-cross
/// attention.
pub fn extract_features(
    model: &GeneratorModel,
    gen_store: &ParamStore,
    samples: &[TrainSample],
    decl: &ColumnDecl,
) -> Result<FeatureCache> {
    if samples.is_empty() {
        return Err(GfemError::InvalidData("no classifier samples".into()));
    }
    let fingerprint = sha256_hex(|h| {
        for s in samples {
            h.update(s.subject_id.as_bytes());
            h.update([s.label]);
            h.update(serde_json::to_vec(&s.record).expect("record serializes"));
            hash_volume(h, &s.mri);
        }
    });
    let mut features = Vec::with_capacity(samples.len());
    for s in samples {
        let out = model.generate_volume(gen_store, &s.mri)?;
        features.push(SampleFeatures {
            subject_id: s.subject_id.clone(),
            label: s.label,
            record: s.record.clone(),
            lmp_tokens: out.x_lmp.tokens.clone(),
            lpp_tokens: out.x_lpp.tokens.clone(),
            mri_rows: serialize_voxels(&s.mri).rows,
            pet_rows: serialize_voxels(&out.pet).rows,
        });
    }
    let patch_token_dim = features[0].lmp_tokens.shape()[1];
    Ok(FeatureCache {
        features,
        decl: decl.clone(),
        patch_token_dim,
        fingerprint,
    })
}

/// Encode one cached sample under a fitted schema.
pub fn materialize_input(f: &SampleFeatures, schema: &TabularSchema) -> Result<ClassifierInput> {
    Ok(ClassifierInput {
        lmp_tokens: f.lmp_tokens.clone(),
        lpp_tokens: f.lpp_tokens.clone(),
        encoded_cats: offset_encode(&f.record, schema)?,
        numeric_z: normalize_numeric(&f.record, schema)?,
        mri_rows: f.mri_rows.clone(),
        pet_rows: f.pet_rows.clone(),
    })
}

// ---------------------------------------------------------------------------
// Classifier training

pub struct ClassifierTrainResult {
    pub manifest: RunManifest,
    pub model: ClassifierModel,
    pub store: ParamStore,
}

fn eval_classifier_loss(
    model: &ClassifierModel,
    store: &ParamStore,
    inputs: &[ClassifierInput],
    labels: &[u8],
    weights: Option<&[f64]>,
) -> Result<(f64, f64)> {
    let mut losses = Vec::new();
    let mut correct = 0usize;
    for (input, &label) in inputs.iter().zip(labels) {
        let tape = Tape::new();
        let bound = store.bind(&tape);
        let logits = model.logits(&bound, input)?;
        losses.push(
            logits
                .softmax_cross_entropy(&[label as usize], weights)
                .scalar_value(),
        );
        if predict(&logits).1 == label {
            correct += 1;
        }
    }
    Ok((mean_of(&losses), correct as f64 / labels.len() as f64))
}

/// Train a classifier on the given subset of cached samples. The tabular
/// schema is fitted on exactly those rows, so no test statistics leak in.
pub fn train_classifier(
    cls_cfg: &ClassifierConfig,
    cache: &FeatureCache,
    train_idx: &[usize],
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<ClassifierTrainResult> {
    cfg.validate()?;
    cls_cfg.validate()?;
    if cfg.stage != Stage::Classifier {
        return Err(GfemError::InvalidConfig(
            "train_classifier needs stage = classifier".into(),
        ));
    }
    if cfg.fine_tune_generator {
        return Err(GfemError::InvalidConfig(
            "generator fine-tuning is not supported; the generator stays frozen".into(),
        ));
    }
    if train_idx.len() < 2 {
        return Err(GfemError::InvalidData(format!(
            "classifier training needs >= 2 samples, got {}",
            train_idx.len()
        )));
    }

    let train_records: Vec<Record> = train_idx
        .iter()
        .map(|&i| cache.features[i].record.clone())
        .collect();
    let (schema, _report) = fit_schema(&train_records, &cache.decl)?;
    let model = ClassifierModel::new(cls_cfg.clone(), schema, cache.patch_token_dim);

    let mut store = ParamStore::new();
    let mut rng = ChaCha12Rng::seed_from_u64(cfg.seed);
    model.init_params(&mut store, &mut rng);
    let mut adam = Adam::with_betas(cfg.learning_rate, cfg.beta1, cfg.beta2);

    let labels: Vec<u8> = train_idx.iter().map(|&i| cache.features[i].label).collect();
    let inputs: Vec<ClassifierInput> = train_idx
        .iter()
        .map(|&i| materialize_input(&cache.features[i], &model.schema))
        .collect::<Result<_>>()?;
    let class_weights: Option<Vec<f64>> = cfg.class_weighting.then(|| {
        let pos = labels.iter().filter(|&&l| l == 1).count().max(1) as f64;
        let neg = labels.iter().filter(|&&l| l == 0).count().max(1) as f64;
        let n = labels.len() as f64;
        vec![n / (2.0 * neg), n / (2.0 * pos)]
    });

    let config_snapshot = serde_json::json!({
        "classifier": cls_cfg,
        "schema": model.schema,
        "patch_token_dim": cache.patch_token_dim,
        "train": cfg,
    });
    let mut manifest = RunManifest {
        stage: "classifier".into(),
        config: config_snapshot.clone(),
        dataset_fingerprint: cache.fingerprint.clone(),
        initial: EpochRecord::new(0, &[]),
        epochs: Vec::new(),
        final_checkpoint: None,
        diverged: None,
    };
    let persist = |manifest: &RunManifest, store: &ParamStore| -> Result<Option<String>> {
        let Some(dir) = out_dir else { return Ok(None) };
        std::fs::create_dir_all(dir).map_err(|e| GfemError::io(dir, e))?;
        let ckpt = dir.join("classifier.ckpt");
        save_checkpoint(store, &config_snapshot, &ckpt)?;
        manifest.save(&dir.join("manifest.json"))?;
        manifest.write_log(&dir.join("train_log.jsonl"))?;
        Ok(Some(ckpt.display().to_string()))
    };
    // Divergence persists the record but never a checkpoint of unusable
    // parameters.
    let persist_diverged = |manifest: &RunManifest| -> Result<()> {
        let Some(dir) = out_dir else { return Ok(()) };
        std::fs::create_dir_all(dir).map_err(|e| GfemError::io(dir, e))?;
        manifest.save(&dir.join("manifest.json"))?;
        manifest.write_log(&dir.join("train_log.jsonl"))
    };

    let (loss0, acc0) =
        eval_classifier_loss(&model, &store, &inputs, &labels, class_weights.as_deref())?;
    if !loss0.is_finite() {
        manifest.diverged = Some("epoch 0: non-finite classifier loss".into());
        persist_diverged(&manifest)?;
        return Err(GfemError::Divergence {
            stage: "classifier".into(),
            epoch: 0,
            part: "cross-entropy".into(),
        });
    }
    manifest.initial = EpochRecord::new(0, &[("loss", loss0), ("train_accuracy", acc0)]);

    let mut order: Vec<usize> = (0..inputs.len()).collect();
    let mut steps_done = 0usize;
    'epochs: for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut losses = Vec::new();
        let mut correct = 0usize;
        let mut seen = 0usize;
        for batch in order.chunks(cfg.batch_size) {
            if cfg.max_steps.is_some_and(|m| steps_done >= m) {
                break 'epochs;
            }
            let tape = Tape::new();
            let bound = store.bind(&tape);
            let mut rows = Vec::with_capacity(batch.len());
            let mut batch_labels = Vec::with_capacity(batch.len());
            for &j in batch {
                rows.push(model.logits(&bound, &inputs[j])?);
                batch_labels.push(labels[j] as usize);
            }
            for (row, &lab) in rows.iter().zip(&batch_labels) {
                if predict(row).1 as usize == lab {
                    correct += 1;
                }
                seen += 1;
            }
            let logits = if rows.len() == 1 {
                rows.pop().unwrap()
            } else {
                Var::concat_rows(&rows)
            };
            let loss = logits.softmax_cross_entropy(&batch_labels, class_weights.as_deref());
            let value = loss.scalar_value();
            if !value.is_finite() {
                manifest.diverged = Some(format!("epoch {epoch}: non-finite classifier loss"));
                persist_diverged(&manifest)?;
                return Err(GfemError::Divergence {
                    stage: "classifier".into(),
                    epoch,
                    part: "cross-entropy".into(),
                });
            }
            losses.push(value);
            let grads = tape.backward(&loss);
            adam.step(&mut store, &bound.grads_by_name(&grads));
            steps_done += 1;
        }
        if losses.is_empty() {
            break;
        }
        manifest.epochs.push(EpochRecord::new(
            epoch,
            &[
                ("loss", mean_of(&losses)),
                ("train_accuracy", correct as f64 / seen as f64),
            ],
        ));
    }

    manifest.final_checkpoint = persist(&manifest, &store)?;
    Ok(ClassifierTrainResult {
        manifest,
        model,
        store,
    })
}

/// Rebuild a classifier model + parameters from a training checkpoint.
pub fn load_classifier_checkpoint(path: &Path) -> Result<(ClassifierModel, ParamStore)> {
    let (store, config) = load_checkpoint(path)?;
    let field = |what: &str| -> Result<serde_json::Value> {
        config.get(what).cloned().ok_or_else(|| {
            GfemError::CheckpointCorrupt(format!(
                "{}: config snapshot lacks '{what}'",
                path.display()
            ))
        })
    };
    let cls_cfg: ClassifierConfig = serde_json::from_value(field("classifier")?)
        .map_err(|e| GfemError::CheckpointCorrupt(format!("classifier config: {e}")))?;
    let schema: TabularSchema = serde_json::from_value(field("schema")?)
        .map_err(|e| GfemError::CheckpointCorrupt(format!("schema: {e}")))?;
    let patch_token_dim: usize = serde_json::from_value(field("patch_token_dim")?)
        .map_err(|e| GfemError::CheckpointCorrupt(format!("patch_token_dim: {e}")))?;
    Ok((ClassifierModel::new(cls_cfg, schema, patch_token_dim), store))
}

// ---------------------------------------------------------------------------
// Evaluation

/// Predictions and metrics over one index subset.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalOutcome {
    pub metrics: MetricsReport,
    /// Absent when the subset holds a single class.
    pub roc: Option<RocCurve>,
    pub single_class: bool,
    pub predictions: Vec<u8>,
    pub scores: Vec<f64>,
    pub labels: Vec<u8>,
}

pub fn evaluate_subset(
    model: &ClassifierModel,
    store: &ParamStore,
    cache: &FeatureCache,
    idx: &[usize],
) -> Result<EvalOutcome> {
    if idx.is_empty() {
        return Err(GfemError::InvalidData("empty evaluation subset".into()));
    }
    let mut predictions = Vec::with_capacity(idx.len());
    let mut scores = Vec::with_capacity(idx.len());
    let mut labels = Vec::with_capacity(idx.len());
    for &i in idx {
        let input = materialize_input(&cache.features[i], &model.schema)?;
        let tape = Tape::new();
        let bound = store.bind(&tape);
        let logits = model.logits(&bound, &input)?;
        let (probs, pred) = predict(&logits);
        predictions.push(pred);
        scores.push(probs[1]);
        labels.push(cache.features[i].label);
    }
    let counts = confusion_counts(&predictions, &labels)?;
    let metrics = compute_metrics(counts);
    let single_class = labels.iter().all(|&l| l == labels[0]);
    let roc = if single_class {
        None
    } else {
        Some(roc_auc(&scores, &labels)?)
    };
    Ok(EvalOutcome {
        metrics,
        roc,
        single_class,
        predictions,
        scores,
        labels,
    })
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct AggregateStat {
    pub mean: f64,
    /// Population standard deviation across folds.
    pub std: f64,
}

fn aggregate(values: &[f64]) -> AggregateStat {
    let mean = mean_of(values);
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / values.len() as f64;
    AggregateStat {
        mean,
        std: var.sqrt(),
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FoldOutcome {
    pub fold: usize,
    pub train_size: usize,
    pub test_size: usize,
    #[serde(flatten)]
    pub eval: EvalOutcome,
}

/// Cross-validated evaluation: per-fold reports plus mean ± std aggregates
/// and the Fig. 9-style mean ROC band over folds with both classes.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CrossvalReport {
    pub k: usize,
    pub grouped: bool,
    pub folds: Vec<FoldOutcome>,
    pub accuracy: AggregateStat,
    pub precision: AggregateStat,
    pub recall: AggregateStat,
    pub f1: AggregateStat,
    pub mcc: AggregateStat,
    pub auc: Option<AggregateStat>,
    pub mean_roc: Option<MeanRoc>,
}

impl CrossvalReport {
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| GfemError::json(path, e))?;
        std::fs::write(path, text).map_err(|e| GfemError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| GfemError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| GfemError::json(path, e))
    }

    fn from_folds(k: usize, grouped: bool, folds: Vec<FoldOutcome>) -> Self {
        let pick = |f: fn(&MetricsReport) -> f64| -> Vec<f64> {
            folds.iter().map(|fold| f(&fold.eval.metrics)).collect()
        };
        let curves: Vec<RocCurve> = folds
            .iter()
            .filter_map(|f| f.eval.roc.clone())
            .collect();
        let aucs: Vec<f64> = curves.iter().map(|c| c.auc).collect();
        CrossvalReport {
            k,
            grouped,
            accuracy: aggregate(&pick(|m| m.accuracy)),
            precision: aggregate(&pick(|m| m.precision)),
            recall: aggregate(&pick(|m| m.recall)),
            f1: aggregate(&pick(|m| m.f1)),
            mcc: aggregate(&pick(|m| m.mcc)),
            auc: (!aucs.is_empty()).then(|| aggregate(&aucs)),
            mean_roc: mean_roc_curve(&curves).ok(),
            folds,
        }
    }
}

/// Evaluate one fixed trained classifier across grouped k-fold test splits.
pub fn evaluate_folds(
    model: &ClassifierModel,
    store: &ParamStore,
    cache: &FeatureCache,
    k: usize,
    seed: u64,
) -> Result<CrossvalReport> {
    let subjects = cache.subjects();
    let folds = kfold_split(cache.features.len(), k, Some(&subjects), seed)?;
    let mut outcomes = Vec::with_capacity(k);
    for (fold, (train, test)) in folds.into_iter().enumerate() {
        let eval = evaluate_subset(model, store, cache, &test)?;
        outcomes.push(FoldOutcome {
            fold,
            train_size: train.len(),
            test_size: test.len(),
            eval,
        });
    }
    Ok(CrossvalReport::from_folds(k, true, outcomes))
}

/// Full cross-validation: retrain a fresh classifier per fold (schema fitted
/// on that fold's training rows only) and evaluate on its held-out subjects.
pub fn crossval_classifier(
    cls_cfg: &ClassifierConfig,
    cache: &FeatureCache,
    cfg: &TrainConfig,
    k: usize,
) -> Result<(CrossvalReport, Vec<RunManifest>)> {
    let subjects = cache.subjects();
    let folds = kfold_split(cache.features.len(), k, Some(&subjects), cfg.seed)?;
    let mut outcomes = Vec::with_capacity(k);
    let mut manifests = Vec::with_capacity(k);
    for (fold, (train, test)) in folds.into_iter().enumerate() {
        let fold_cfg = TrainConfig {
            seed: cfg.seed.wrapping_add(fold as u64),
            ..cfg.clone()
        };
        let trained = train_classifier(cls_cfg, cache, &train, &fold_cfg, None)?;
        let eval = evaluate_subset(&trained.model, &trained.store, cache, &test)?;
        outcomes.push(FoldOutcome {
            fold,
            train_size: train.len(),
            test_size: test.len(),
            eval,
        });
        manifests.push(trained.manifest);
    }
    Ok((CrossvalReport::from_folds(k, true, outcomes), manifests))
}

/// Convenience wrapper for CLI evaluation: load table + manifest artifacts,
/// extract features with a generator checkpoint, and run `evaluate_folds`
/// with a classifier checkpoint.
pub fn evaluate_run(
    classifier_ckpt: &Path,
    generator_ckpt: &Path,
    cohort_manifest: &Path,
    table_csv: &Path,
    decl_json: &Path,
    k: usize,
    seed: u64,
) -> Result<CrossvalReport> {
    let manifest = CohortManifest::load(cohort_manifest)?;
    let decl = ColumnDecl::load(decl_json)?;
    let table = load_table_csv(table_csv, &decl)?;
    let samples = assemble_train_samples(&manifest, &table)?;
    let (gen_model, gen_store) = load_generator_checkpoint(generator_ckpt)?;
    let cache = extract_features(&gen_model, &gen_store, &samples, &decl)?;
    let (cls_model, cls_store) = load_classifier_checkpoint(classifier_ckpt)?;
    evaluate_folds(&cls_model, &cls_store, &cache, k, seed)
}
