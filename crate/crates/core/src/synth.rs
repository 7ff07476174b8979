//! Synthetic cohort generation: deterministic longitudinal events, tabular
//! rows with a label-correlated signal of configurable strength, and paired
//! MRI/PET volumes with a label-dependent blob, so every downstream stage can
//! be exercised without clinical data.
//!
//! Voxel values are snapped to f32 precision at synthesis time so the
//! in-memory cohort and its on-disk container (f32 LE) are bit-identical.

use std::path::{Path, PathBuf};

use chrono::NaiveDate;
use ndarray::IxDyn;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use gfem_autodiff::Arr;

use crate::cohort::{CohortSample, DiagnosisEvent, Diagnosis, VolumeIndexEntry};
use crate::error::{GfemError, Result};
use crate::tabular::{CohortTable, ColumnDecl, Record};
use crate::volume::Volume;

/// Blob centers (fractional coordinates) for the two labels; the anatomy blob
/// sits between them and is label-independent.
const CENTER_POS: [f64; 3] = [0.30, 0.35, 0.30];
const CENTER_NEG: [f64; 3] = [0.70, 0.65, 0.70];
const CENTER_ANATOMY: [f64; 3] = [0.5, 0.5, 0.5];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub n_samples: usize,
    /// 0 removes all label information from features and volumes; values
    /// around 3 give an easily separable cohort.
    pub label_signal_strength: f64,
    /// Inclusive Δt draw range in days.
    pub delta_t_days: (i64, i64),
    /// Single-channel volume extent (depth, height, width).
    pub volume_dims: [usize; 3],
    pub seed: u64,
}

impl SynthSpec {
    pub fn desk() -> Self {
        Self {
            n_samples: 16,
            label_signal_strength: 3.0,
            delta_t_days: (151, 364),
            volume_dims: [16, 16, 16],
            seed: 7,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_samples == 0 {
            return Err(GfemError::InvalidConfig("n_samples must be > 0".into()));
        }
        if self.delta_t_days.0 <= 0 || self.delta_t_days.0 > self.delta_t_days.1 {
            return Err(GfemError::InvalidConfig(format!(
                "delta_t_days range {:?} must satisfy 0 < lo <= hi",
                self.delta_t_days
            )));
        }
        if !(self.label_signal_strength >= 0.0) {
            return Err(GfemError::InvalidConfig(
                "label_signal_strength must be >= 0".into(),
            ));
        }
        if self.volume_dims.iter().any(|&s| s == 0) {
            return Err(GfemError::InvalidConfig("volume dim of 0".into()));
        }
        Ok(())
    }
}

/// One synthesized progression sample with its paired scans.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthSample {
    pub subject_id: String,
    pub baseline_date: NaiveDate,
    pub followup_date: NaiveDate,
    pub delta_t_days: i64,
    pub label: u8,
    pub record: Record,
    pub mri: Volume,
    pub pet: Volume,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthCohort {
    pub spec: SynthSpec,
    pub samples: Vec<SynthSample>,
    pub decl: ColumnDecl,
}

/// One (MRI, PET) training pair as stored in `pairs.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VolumePair {
    pub mri: String,
    pub pet: String,
}

pub fn save_pairs(pairs: &[VolumePair], path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(pairs).map_err(|e| GfemError::json(path, e))?;
    std::fs::write(path, text).map_err(|e| GfemError::io(path, e))
}

pub fn load_pairs(path: &Path) -> Result<Vec<VolumePair>> {
    let text = std::fs::read_to_string(path).map_err(|e| GfemError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| GfemError::json(path, e))
}

/// Everything [`SynthCohort::write_to_dir`] materializes.
#[derive(Clone, Debug)]
pub struct SynthPaths {
    pub diagnosis_csv: PathBuf,
    pub table_csv: PathBuf,
    pub decl_json: PathBuf,
    pub volume_index_json: PathBuf,
    pub pairs_json: PathBuf,
    pub volumes_dir: PathBuf,
}

fn subject_name(idx: usize) -> String {
    format!("s{idx:04}")
}

/// Gaussian bump at fractional center `c` with σ = extent/6 per axis.
fn blob(pos: [f64; 3], dims: [usize; 3], c: [f64; 3]) -> f64 {
    let mut q = 0.0;
    for a in 0..3 {
        let sigma = dims[a] as f64 / 6.0;
        let d = pos[a] - c[a] * dims[a] as f64;
        q += d * d / (2.0 * sigma * sigma);
    }
    (-q).exp()
}

fn synth_volume_pair(
    dims: [usize; 3],
    label: u8,
    blob_amp: f64,
    rng: &mut ChaCha12Rng,
) -> (Volume, Volume) {
    let [d, h, w] = dims;
    let center = if label == 1 { CENTER_POS } else { CENTER_NEG };
    let mut mri = Vec::with_capacity(d * h * w);
    let mut pet = Vec::with_capacity(d * h * w);
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let pos = [z as f64 + 0.5, y as f64 + 0.5, x as f64 + 0.5];
                let anatomy = 0.25 * blob(pos, dims, CENTER_ANATOMY);
                let marker = blob_amp * blob(pos, dims, center);
                let noise = rng.random_range(-0.03..0.03);
                let m = (0.25 + anatomy + marker + noise).clamp(0.0, 1.0);
                // PET is a fixed smooth function of the MRI plus a spatial
                // ramp, so the translator has real structure to learn.
                let ramp = 0.08 * (x as f64 + 0.5) / w as f64;
                let p = (1.1 * m - 0.05 + ramp).clamp(0.02, 0.98);
                mri.push((m as f32) as f64);
                pet.push((p as f32) as f64);
            }
        }
    }
    let shape = IxDyn(&[1, d, h, w]);
    (
        Volume::new(Arr::from_shape_vec(shape.clone(), mri).unwrap()).unwrap(),
        Volume::new(Arr::from_shape_vec(shape, pet).unwrap()).unwrap(),
    )
}

fn synth_record(label: u8, signal: f64, delta_t_days: i64, rng: &mut ChaCha12Rng) -> Record {
    let y_pm = if label == 1 { 1.0 } else { -1.0 };
    // Three numerics with alternating label directions, unit noise.
    let dirs = [1.0, -1.0, 0.5];
    let nums: Vec<f64> = dirs
        .iter()
        .map(|dir| {
            let z: f64 = rng.sample(StandardNormal);
            dir * signal * y_pm + z
        })
        .collect();
    // First categorical leans toward code = label with probability growing in
    // the signal; the second is pure noise. Codes stay within {0, 1} so any
    // label-balanced training fold observes the full cardinality.
    let leaning = if rng.random_range(0.0..1.0) < 0.8 * signal.clamp(0.0, 1.0) {
        label as u32
    } else {
        rng.random_range(0..2u32)
    };
    let noise_cat = rng.random_range(0..2u32);
    Record::complete(&[leaning, noise_cat], &nums, delta_t_days as f64)
}

/// Build the deterministic synthetic cohort. Labels alternate 1, 0, 1, … for
/// exact balance; roughly every tenth sample pairs with its successor under a
/// shared subject (an MCI→MCI→AD chain) so grouped cross-validation has real
/// multi-sample subjects to keep together.
pub fn synthesize_cohort(spec: &SynthSpec) -> Result<SynthCohort> {
    spec.validate()?;
    let mut rng = ChaCha12Rng::seed_from_u64(spec.seed);
    let (lo, hi) = spec.delta_t_days;
    let signal = spec.label_signal_strength;
    let blob_amp = 0.35 * signal.clamp(0.0, 1.0);

    let mut samples = Vec::with_capacity(spec.n_samples);
    let mut i = 0;
    let mut subject_idx = 0;
    while i < spec.n_samples {
        let label = |k: usize| (k % 2 == 0) as u8;
        // A chain start needs a negative first sample: odd indices qualify.
        let chain = i % 10 == 1 && i + 1 < spec.n_samples;
        let subject = subject_name(subject_idx);
        let t0 = NaiveDate::from_ymd_opt(2016, 1, 5).unwrap()
            + chrono::Duration::days((subject_idx as i64 * 23) % 1400);
        let n_links = if chain { 2 } else { 1 };
        let mut base = t0;
        for link in 0..n_links {
            let dt = rng.random_range(lo..=hi);
            let lab = label(i + link);
            let record = synth_record(lab, signal, dt, &mut rng);
            let (mri, pet) = synth_volume_pair(spec.volume_dims, lab, blob_amp, &mut rng);
            let followup = base + chrono::Duration::days(dt);
            samples.push(SynthSample {
                subject_id: subject.clone(),
                baseline_date: base,
                followup_date: followup,
                delta_t_days: dt,
                label: lab,
                record,
                mri,
                pet,
            });
            base = followup;
        }
        i += n_links;
        subject_idx += 1;
    }

    Ok(SynthCohort {
        spec: spec.clone(),
        samples,
        decl: ColumnDecl {
            categorical: vec!["apoe4".into(), "sex".into()],
            numeric: vec!["mmse".into(), "adas13".into(), "hippo_vol".into()],
            interval: "delta_t_days".into(),
            embedding_dim: 16,
        },
    })
}

impl SynthCohort {
    /// The longitudinal event stream this cohort arose from: one MCI baseline
    /// per sample plus its follow-up, with chain midpoints emitted once.
    pub fn events(&self) -> Vec<DiagnosisEvent> {
        let mut events = Vec::new();
        for s in &self.samples {
            let baseline_is_chained = events.iter().any(|e: &DiagnosisEvent| {
                e.subject_id == s.subject_id && e.exam_date == s.baseline_date
            });
            if !baseline_is_chained {
                events.push(DiagnosisEvent {
                    subject_id: s.subject_id.clone(),
                    exam_date: s.baseline_date,
                    diagnosis: Diagnosis::Mci,
                    imaging_ref: None,
                });
            }
            events.push(DiagnosisEvent {
                subject_id: s.subject_id.clone(),
                exam_date: s.followup_date,
                diagnosis: if s.label == 1 {
                    Diagnosis::Ad
                } else {
                    Diagnosis::Mci
                },
                imaging_ref: None,
            });
        }
        events
    }

    /// The cohort as [`CohortSample`] records (no volume paths attached).
    pub fn cohort_samples(&self) -> Vec<CohortSample> {
        self.samples
            .iter()
            .map(|s| CohortSample {
                subject_id: s.subject_id.clone(),
                baseline_date: s.baseline_date,
                followup_date: s.followup_date,
                delta_t_days: s.delta_t_days,
                label: s.label,
                mri_path: None,
            })
            .collect()
    }

    /// The joined tabular table, row-aligned with `samples`.
    pub fn cohort_table(&self) -> CohortTable {
        CohortTable {
            subject_ids: self.samples.iter().map(|s| s.subject_id.clone()).collect(),
            exam_dates: self
                .samples
                .iter()
                .map(|s| s.baseline_date.format("%Y-%m-%d").to_string())
                .collect(),
            labels: self.samples.iter().map(|s| s.label).collect(),
            records: self.samples.iter().map(|s| s.record.clone()).collect(),
        }
    }

    /// Materialize the full artifact set a real pipeline would start from.
    pub fn write_to_dir(&self, dir: &Path) -> Result<SynthPaths> {
        std::fs::create_dir_all(dir).map_err(|e| GfemError::io(dir, e))?;
        let volumes_dir = dir.join("volumes");
        std::fs::create_dir_all(&volumes_dir).map_err(|e| GfemError::io(&volumes_dir, e))?;

        let diagnosis_csv = dir.join("diagnosis.csv");
        let mut diag = String::from("subject_id,exam_date,diagnosis\n");
        for e in self.events() {
            let code = match e.diagnosis {
                Diagnosis::Cn => "CN",
                Diagnosis::Mci => "MCI",
                Diagnosis::Ad => "AD",
                Diagnosis::Other => "OTHER",
            };
            diag.push_str(&format!("{},{},{}\n", e.subject_id, e.exam_date, code));
        }
        std::fs::write(&diagnosis_csv, diag).map_err(|e| GfemError::io(&diagnosis_csv, e))?;

        let decl_json = dir.join("schema.json");
        self.decl.save(&decl_json)?;

        let table_csv = dir.join("table.csv");
        let mut table = String::from("subject_id,exam_date,delta_t_days,label");
        for c in self.decl.categorical.iter().chain(self.decl.numeric.iter()) {
            table.push(',');
            table.push_str(c);
        }
        table.push('\n');
        let fmt_opt_u32 = |v: &Option<u32>| v.map(|x| x.to_string()).unwrap_or_default();
        let fmt_opt_f64 = |v: &Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for s in &self.samples {
            table.push_str(&format!(
                "{},{},{},{}",
                s.subject_id, s.baseline_date, s.delta_t_days, s.label
            ));
            for c in &s.record.categorical_values {
                table.push(',');
                table.push_str(&fmt_opt_u32(c));
            }
            for n in &s.record.numeric_values {
                table.push(',');
                table.push_str(&fmt_opt_f64(n));
            }
            table.push('\n');
        }
        std::fs::write(&table_csv, table).map_err(|e| GfemError::io(&table_csv, e))?;

        let mut index = Vec::new();
        let mut pairs = Vec::new();
        for s in &self.samples {
            let stem = format!("{}_{}", s.subject_id, s.baseline_date);
            let mri_dir = volumes_dir.join(format!("{stem}_mri"));
            let pet_dir = volumes_dir.join(format!("{stem}_pet"));
            s.mri.save(&mri_dir)?;
            s.pet.save(&pet_dir)?;
            index.push(VolumeIndexEntry {
                subject_id: s.subject_id.clone(),
                scan_date: s.baseline_date,
                path: mri_dir.display().to_string(),
            });
            pairs.push(VolumePair {
                mri: mri_dir.display().to_string(),
                pet: pet_dir.display().to_string(),
            });
        }
        let volume_index_json = dir.join("volume_index.json");
        let text = serde_json::to_string_pretty(&index)
            .map_err(|e| GfemError::json(&volume_index_json, e))?;
        std::fs::write(&volume_index_json, text)
            .map_err(|e| GfemError::io(&volume_index_json, e))?;
        let pairs_json = dir.join("pairs.json");
        save_pairs(&pairs, &pairs_json)?;

        Ok(SynthPaths {
            diagnosis_csv,
            table_csv,
            decl_json,
            volume_index_json,
            pairs_json,
            volumes_dir,
        })
    }
}

/// Deterministic subject-grouped train/test split over per-sample subject
/// ids. The test set receives whole subjects until it holds
/// `round(n · test_fraction)` samples; singleton subjects make the target
/// exactly reachable in practice.
pub fn grouped_split(
    subjects: &[String],
    test_fraction: f64,
    seed: u64,
) -> (Vec<usize>, Vec<usize>) {
    let mut unique: Vec<&String> = Vec::new();
    for s in subjects {
        if !unique.contains(&s) {
            unique.push(s);
        }
    }
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    unique.shuffle(&mut rng);

    let target = (subjects.len() as f64 * test_fraction).round() as usize;
    let mut test_subjects: Vec<&String> = Vec::new();
    let mut test_count = 0;
    for subject in unique {
        let size = subjects.iter().filter(|s| *s == subject).count();
        if test_count + size <= target {
            test_subjects.push(subject);
            test_count += size;
        }
        if test_count == target {
            break;
        }
    }
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (i, s) in subjects.iter().enumerate() {
        if test_subjects.contains(&s) {
            test.push(i);
        } else {
            train.push(i);
        }
    }
    (train, test)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cohort::{extract_transitions, filter_by_interval, PRESET_ONE_YEAR};
    use crate::tabular::load_table_csv;

    fn tiny_spec() -> SynthSpec {
        SynthSpec {
            n_samples: 12,
            label_signal_strength: 3.0,
            delta_t_days: (151, 364),
            volume_dims: [8, 8, 8],
            seed: 11,
        }
    }

    #[test]
    fn synthesis_is_deterministic() {
        let a = synthesize_cohort(&tiny_spec()).unwrap();
        let b = synthesize_cohort(&tiny_spec()).unwrap();
        assert_eq!(a, b, "same spec must give an identical cohort");
        let c = synthesize_cohort(&SynthSpec {
            seed: 12,
            ..tiny_spec()
        })
        .unwrap();
        assert_ne!(a.samples, c.samples, "a different seed must change data");
    }

    #[test]
    fn labels_alternate_and_chains_share_subjects() {
        let cohort = synthesize_cohort(&tiny_spec()).unwrap();
        assert_eq!(cohort.samples.len(), 12);
        let labels: Vec<u8> = cohort.samples.iter().map(|s| s.label).collect();
        assert_eq!(labels.iter().filter(|&&l| l == 1).count(), 6);
        // Samples 1 and 2 form a chain: same subject, contiguous dates.
        assert_eq!(cohort.samples[1].subject_id, cohort.samples[2].subject_id);
        assert_eq!(
            cohort.samples[1].followup_date,
            cohort.samples[2].baseline_date
        );
        assert_ne!(cohort.samples[0].subject_id, cohort.samples[1].subject_id);
    }

    #[test]
    fn events_reproduce_the_cohort_through_the_real_pipeline() {
        let cohort = synthesize_cohort(&tiny_spec()).unwrap();
        let (extracted, report) = extract_transitions(&cohort.events());
        assert!(report.is_empty());
        let (lo, hi) = PRESET_ONE_YEAR;
        let filtered = filter_by_interval(extracted, lo, hi).unwrap();
        assert_eq!(
            filtered,
            cohort.cohort_samples(),
            "extract+filter over the synthetic events must return the cohort"
        );
    }

    #[test]
    fn signal_strength_controls_separation() {
        let strong = synthesize_cohort(&SynthSpec {
            n_samples: 64,
            ..tiny_spec()
        })
        .unwrap();
        let mean_num0 = |c: &SynthCohort, label: u8| -> f64 {
            let v: Vec<f64> = c
                .samples
                .iter()
                .filter(|s| s.label == label)
                .map(|s| s.record.numeric_values[0].unwrap())
                .collect();
            v.iter().sum::<f64>() / v.len() as f64
        };
        let gap = mean_num0(&strong, 1) - mean_num0(&strong, 0);
        assert!(gap > 4.0, "signal 3 must separate numerics, gap {gap}");

        // The label blob shifts voxel mass near the positive center.
        let pos_region_mean = |s: &SynthSample| -> f64 {
            let (_, d, h, w) = s.mri.dims();
            let (cz, cy, cx) = (
                (CENTER_POS[0] * d as f64) as usize,
                (CENTER_POS[1] * h as f64) as usize,
                (CENTER_POS[2] * w as f64) as usize,
            );
            s.mri.data[[0, cz, cy, cx]]
        };
        let region = |c: &SynthCohort, label: u8| -> f64 {
            let v: Vec<f64> = c
                .samples
                .iter()
                .filter(|s| s.label == label)
                .map(pos_region_mean)
                .collect();
            v.iter().sum::<f64>() / v.len() as f64
        };
        let vol_gap = region(&strong, 1) - region(&strong, 0);
        assert!(vol_gap > 0.1, "blob must brighten the positive site, gap {vol_gap}");

        let null = synthesize_cohort(&SynthSpec {
            n_samples: 64,
            label_signal_strength: 0.0,
            ..tiny_spec()
        })
        .unwrap();
        let null_gap = (mean_num0(&null, 1) - mean_num0(&null, 0)).abs();
        assert!(null_gap < 0.8, "null signal must not separate, gap {null_gap}");
        let null_vol_gap = (region(&null, 1) - region(&null, 0)).abs();
        assert!(null_vol_gap < 0.05, "null blob gap {null_vol_gap}");
    }

    #[test]
    fn paper_scale_split_is_242_60() {
        let cohort = synthesize_cohort(&SynthSpec {
            n_samples: 302,
            volume_dims: [8, 8, 8],
            ..tiny_spec()
        })
        .unwrap();
        assert_eq!(cohort.samples.len(), 302);
        let subjects: Vec<String> = cohort
            .samples
            .iter()
            .map(|s| s.subject_id.clone())
            .collect();
        let (train, test) = grouped_split(&subjects, 0.2, 3);
        assert_eq!((train.len(), test.len()), (242, 60));
        // No subject straddles the split.
        for &ti in &test {
            assert!(
                train.iter().all(|&tr| subjects[tr] != subjects[ti]),
                "subject {} leaked across the split",
                subjects[ti]
            );
        }
        // Partition property.
        let mut all: Vec<usize> = train.iter().chain(test.iter()).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..302).collect::<Vec<_>>());
    }

    #[test]
    fn written_artifacts_load_back_identically() {
        let spec = SynthSpec {
            n_samples: 5,
            ..tiny_spec()
        };
        let cohort = synthesize_cohort(&spec).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let paths = cohort.write_to_dir(dir.path()).unwrap();

        let events = crate::cohort::load_diagnosis_csv(&paths.diagnosis_csv).unwrap();
        assert_eq!(events, cohort.events());

        let decl = ColumnDecl::load(&paths.decl_json).unwrap();
        assert_eq!(decl, cohort.decl);
        let table = load_table_csv(&paths.table_csv, &decl).unwrap();
        let expect = cohort.cohort_table();
        assert_eq!(table.subject_ids, expect.subject_ids);
        assert_eq!(table.exam_dates, expect.exam_dates);
        assert_eq!(table.labels, expect.labels);
        assert_eq!(table.records, expect.records);

        let pairs = load_pairs(&paths.pairs_json).unwrap();
        assert_eq!(pairs.len(), 5);
        let mri = Volume::load(Path::new(&pairs[0].mri)).unwrap();
        let pet = Volume::load(Path::new(&pairs[0].pet)).unwrap();
        assert_eq!(mri, cohort.samples[0].mri, "f32 snap makes roundtrip exact");
        assert_eq!(pet, cohort.samples[0].pet);

        let index = crate::cohort::load_volume_index(&paths.volume_index_json).unwrap();
        let (attached, report) = crate::cohort::attach_imaging(
            cohort.cohort_samples(),
            &index,
            crate::cohort::IMAGING_TOLERANCE_DAYS,
        );
        assert!(report.is_empty());
        assert_eq!(attached.len(), 5);
        assert!(attached.iter().all(|s| s.mri_path.is_some()));
    }

    #[test]
    fn volumes_stay_in_unit_range_and_pet_tracks_mri() {
        let cohort = synthesize_cohort(&tiny_spec()).unwrap();
        for s in &cohort.samples {
            for &v in s.mri.data.iter() {
                assert!((0.0..=1.0).contains(&v));
            }
            for &v in s.pet.data.iter() {
                assert!((0.02..=0.98).contains(&v));
            }
            s.mri.validate_for_generator().unwrap();
        }
        // PET is a monotone function of MRI up to the small ramp: high-MRI
        // voxels must map to high PET on average.
        let s = &cohort.samples[0];
        let mut hi = (0.0, 0);
        let mut lo = (0.0, 0);
        for (m, p) in s.mri.data.iter().zip(s.pet.data.iter()) {
            if *m > 0.5 {
                hi = (hi.0 + p, hi.1 + 1);
            } else {
                lo = (lo.0 + p, lo.1 + 1);
            }
        }
        assert!(hi.1 > 0 && lo.1 > 0);
        assert!(hi.0 / hi.1 as f64 > lo.0 / lo.1 as f64 + 0.2);
    }

    #[test]
    fn invalid_specs_are_rejected() {
        for bad in [
            SynthSpec {
                n_samples: 0,
                ..tiny_spec()
            },
            SynthSpec {
                delta_t_days: (200, 100),
                ..tiny_spec()
            },
            SynthSpec {
                delta_t_days: (0, 100),
                ..tiny_spec()
            },
            SynthSpec {
                label_signal_strength: -1.0,
                ..tiny_spec()
            },
            SynthSpec {
                volume_dims: [8, 0, 8],
                ..tiny_spec()
            },
        ] {
            assert!(synthesize_cohort(&bad).is_err(), "spec {bad:?} must fail");
        }
    }
}
