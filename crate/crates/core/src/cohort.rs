//! Cohort construction: longitudinal diagnosis tables → labeled MCI→AD
//! progression samples, with interval filtering, imaging attachment and
//! Table-1-style statistics.
//!
//! Consecutive-pair semantics: each MCI visit is paired with the subject's
//! *immediately next* diagnosis event only. An AD follow-up labels the pair
//! positive, an MCI follow-up negative, and anything else (reversion to CN,
//! unknown codes) discards the pair. One subject can contribute several
//! samples; cross-validation therefore groups folds by subject.

use std::collections::BTreeMap;
use std::path::Path;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::error::{GfemError, Result};

/// Strict day-interval preset for the one-year task: 150 < Δt < 365.
pub const PRESET_ONE_YEAR: (i64, i64) = (150, 365);
/// Strict day-interval preset for the three-year task: 150 < Δt < 1095.
pub const PRESET_THREE_YEAR: (i64, i64) = (150, 1095);
/// Days per month used when reporting Δt in months (mean Gregorian month).
pub const DAYS_PER_MONTH: f64 = 30.44;
/// Default scan↔baseline date-matching tolerance in days.
pub const IMAGING_TOLERANCE_DAYS: i64 = 10;

/// Reference cohort statistics for comparison, in the units they are
/// conventionally printed (months for means/stds, counts for PS/NS).
pub mod reference {
    /// One-year cohort: mean/std Δt of positive and negative samples in
    /// months, and sample counts.
    pub const ONE_YEAR_MEAN_POS_MONTHS: f64 = 6.7;
    pub const ONE_YEAR_MEAN_NEG_MONTHS: f64 = 7.26;
    pub const ONE_YEAR_STD_POS_MONTHS: f64 = 1.65;
    pub const ONE_YEAR_STD_NEG_MONTHS: f64 = 2.32;
    pub const ONE_YEAR_N_POS: usize = 134;
    pub const ONE_YEAR_N_NEG: usize = 168;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Diagnosis {
    Cn,
    Mci,
    Ad,
    Other,
}

impl Diagnosis {
    /// Lenient code parsing; anything unrecognized maps to `Other` (and is
    /// therefore never a baseline and discards its pair as a follow-up).
    pub fn parse(s: &str) -> Diagnosis {
        match s.trim().to_ascii_uppercase().as_str() {
            "CN" | "NL" | "CONTROL" => Diagnosis::Cn,
            "MCI" | "EMCI" | "LMCI" => Diagnosis::Mci,
            "AD" | "DEMENTIA" => Diagnosis::Ad,
            _ => Diagnosis::Other,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiagnosisEvent {
    pub subject_id: String,
    pub exam_date: NaiveDate,
    pub diagnosis: Diagnosis,
    /// Optional direct volume reference carried through from the source table.
    #[serde(default)]
    pub imaging_ref: Option<String>,
}

/// One labeled progression interval (baseline MCI → next visit).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CohortSample {
    pub subject_id: String,
    pub baseline_date: NaiveDate,
    pub followup_date: NaiveDate,
    pub delta_t_days: i64,
    /// 1 = progressed to AD, 0 = stayed MCI.
    pub label: u8,
    /// Baseline MRI volume container path, set by [`attach_imaging`].
    #[serde(default)]
    pub mri_path: Option<String>,
}

/// What was removed and why during extraction/attachment.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct DropReport {
    pub lines: Vec<String>,
}

impl DropReport {
    pub fn is_empty(&self) -> bool {
        self.lines.is_empty()
    }
}

/// Pair every MCI visit with the subject's immediately next event.
///
/// Duplicate (subject, date) rows keep the first occurrence; later ones are
/// dropped with a report line. Output is canonically ordered by
/// (subject_id, baseline date).
pub fn extract_transitions(events: &[DiagnosisEvent]) -> (Vec<CohortSample>, DropReport) {
    let mut report = DropReport::default();
    let mut per_subject: BTreeMap<&str, Vec<&DiagnosisEvent>> = BTreeMap::new();
    for e in events {
        per_subject.entry(&e.subject_id).or_default().push(e);
    }

    let mut samples = Vec::new();
    for (subject, mut evs) in per_subject {
        evs.sort_by_key(|e| e.exam_date);
        let mut dedup: Vec<&DiagnosisEvent> = Vec::with_capacity(evs.len());
        for e in evs {
            if dedup.last().is_some_and(|p| p.exam_date == e.exam_date) {
                report.lines.push(format!(
                    "duplicate visit dropped: subject {subject} date {}",
                    e.exam_date
                ));
                continue;
            }
            dedup.push(e);
        }
        for pair in dedup.windows(2) {
            let (base, next) = (pair[0], pair[1]);
            if base.diagnosis != Diagnosis::Mci {
                continue;
            }
            let label = match next.diagnosis {
                Diagnosis::Ad => 1,
                Diagnosis::Mci => 0,
                Diagnosis::Cn | Diagnosis::Other => continue,
            };
            samples.push(CohortSample {
                subject_id: subject.to_string(),
                baseline_date: base.exam_date,
                followup_date: next.exam_date,
                delta_t_days: (next.exam_date - base.exam_date).num_days(),
                label,
                mri_path: base.imaging_ref.clone(),
            });
        }
    }
    (samples, report)
}

/// Retain samples with strictly `lo_days < Δt < hi_days`.
pub fn filter_by_interval(
    samples: Vec<CohortSample>,
    lo_days: i64,
    hi_days: i64,
) -> Result<Vec<CohortSample>> {
    if lo_days >= hi_days {
        return Err(GfemError::InvalidConfig(format!(
            "interval lower bound {lo_days} must be below upper bound {hi_days}"
        )));
    }
    Ok(samples
        .into_iter()
        .filter(|s| s.delta_t_days > lo_days && s.delta_t_days < hi_days)
        .collect())
}

/// Δt summary per label, in days and months (days / 30.44), population std.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CohortStats {
    pub n_positive: usize,
    pub n_negative: usize,
    pub mean_pos_days: f64,
    pub std_pos_days: f64,
    pub mean_neg_days: f64,
    pub std_neg_days: f64,
    pub mean_pos_months: f64,
    pub std_pos_months: f64,
    pub mean_neg_months: f64,
    pub std_neg_months: f64,
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

pub fn cohort_stats(samples: &[CohortSample]) -> Result<CohortStats> {
    if samples.is_empty() {
        return Err(GfemError::InvalidData("empty cohort".into()));
    }
    let pos: Vec<f64> = samples
        .iter()
        .filter(|s| s.label == 1)
        .map(|s| s.delta_t_days as f64)
        .collect();
    let neg: Vec<f64> = samples
        .iter()
        .filter(|s| s.label == 0)
        .map(|s| s.delta_t_days as f64)
        .collect();
    let (mean_pos_days, std_pos_days) = mean_std(&pos);
    let (mean_neg_days, std_neg_days) = mean_std(&neg);
    Ok(CohortStats {
        n_positive: pos.len(),
        n_negative: neg.len(),
        mean_pos_days,
        std_pos_days,
        mean_neg_days,
        std_neg_days,
        mean_pos_months: mean_pos_days / DAYS_PER_MONTH,
        std_pos_months: std_pos_days / DAYS_PER_MONTH,
        mean_neg_months: mean_neg_days / DAYS_PER_MONTH,
        std_neg_months: std_neg_days / DAYS_PER_MONTH,
    })
}

/// One available scan: (subject, date) → volume container directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VolumeIndexEntry {
    pub subject_id: String,
    pub scan_date: NaiveDate,
    pub path: String,
}

pub fn load_volume_index(path: &Path) -> Result<Vec<VolumeIndexEntry>> {
    let text = std::fs::read_to_string(path).map_err(|e| GfemError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| GfemError::json(path, e))
}

/// Resolve each sample's baseline volume: nearest scan of the same subject
/// within ±`tolerance_days` (ties break toward the earlier scan). Unresolved
/// samples are dropped with a report line.
pub fn attach_imaging(
    samples: Vec<CohortSample>,
    index: &[VolumeIndexEntry],
    tolerance_days: i64,
) -> (Vec<CohortSample>, DropReport) {
    let mut report = DropReport::default();
    let mut out = Vec::with_capacity(samples.len());
    for mut s in samples {
        let best = index
            .iter()
            .filter(|e| e.subject_id == s.subject_id)
            .map(|e| ((e.scan_date - s.baseline_date).num_days().abs(), e))
            .filter(|(dist, _)| *dist <= tolerance_days)
            .min_by_key(|(dist, e)| (*dist, e.scan_date));
        match best {
            Some((_, e)) => {
                s.mri_path = Some(e.path.clone());
                out.push(s);
            }
            None => report.lines.push(format!(
                "no scan within {tolerance_days} days: subject {} baseline {}",
                s.subject_id, s.baseline_date
            )),
        }
    }
    (out, report)
}

/// The assembled cohort as written to disk by the pipeline.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CohortManifest {
    pub samples: Vec<CohortSample>,
    pub stats: CohortStats,
    /// The strict (lo, hi) day bounds the cohort was filtered with.
    pub interval_days: (i64, i64),
}

impl CohortManifest {
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| GfemError::json(path, e))?;
        std::fs::write(path, text).map_err(|e| GfemError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| GfemError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| GfemError::json(path, e))
    }
}

/// Parse the longitudinal diagnosis CSV: `subject_id,exam_date,diagnosis`
/// (optional `imaging_ref` column), dates in ISO `YYYY-MM-DD`.
pub fn load_diagnosis_csv(path: &Path) -> Result<Vec<DiagnosisEvent>> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| GfemError::csv(path, e))?;
    let headers = reader
        .headers()
        .map_err(|e| GfemError::csv(path, e))?
        .clone();
    let col = |name: &str| -> Result<usize> {
        headers.iter().position(|h| h == name).ok_or_else(|| {
            GfemError::InvalidData(format!("column '{name}' missing from {}", path.display()))
        })
    };
    let subject_idx = col("subject_id")?;
    let date_idx = col("exam_date")?;
    let diag_idx = col("diagnosis")?;
    let imaging_idx = headers.iter().position(|h| h == "imaging_ref");

    let mut events = Vec::new();
    for (line, row) in reader.records().enumerate() {
        let row = row.map_err(|e| GfemError::csv(path, e))?;
        let cell = |i: usize| row.get(i).unwrap_or("").trim();
        let date_text = cell(date_idx);
        let exam_date = NaiveDate::parse_from_str(date_text, "%Y-%m-%d").map_err(|_| {
            GfemError::InvalidData(format!(
                "row {line}: exam_date '{date_text}' is not an ISO date"
            ))
        })?;
        events.push(DiagnosisEvent {
            subject_id: cell(subject_idx).to_string(),
            exam_date,
            diagnosis: Diagnosis::parse(cell(diag_idx)),
            imaging_ref: imaging_idx
                .map(|i| cell(i))
                .filter(|c| !c.is_empty())
                .map(str::to_string),
        });
    }
    Ok(events)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    fn date(s: &str) -> NaiveDate {
        NaiveDate::parse_from_str(s, "%Y-%m-%d").unwrap()
    }

    fn event(subject: &str, day_offset: i64, diag: Diagnosis) -> DiagnosisEvent {
        DiagnosisEvent {
            subject_id: subject.to_string(),
            exam_date: date("2020-01-01") + chrono::Duration::days(day_offset),
            diagnosis: diag,
            imaging_ref: None,
        }
    }

    #[test]
    fn single_progression_yields_positive_sample() {
        let events = vec![event("s1", 0, Diagnosis::Mci), event("s1", 200, Diagnosis::Ad)];
        let (samples, report) = extract_transitions(&events);
        assert!(report.is_empty());
        assert_eq!(samples.len(), 1);
        assert_eq!(samples[0].label, 1);
        assert_eq!(samples[0].delta_t_days, 200);
        assert_eq!(samples[0].subject_id, "s1");
    }

    #[test]
    fn consecutive_pairing_gives_two_samples() {
        // MCI@0, MCI@180, AD@400: (Δt=180, label 0) and (Δt=220, label 1).
        let events = vec![
            event("s1", 0, Diagnosis::Mci),
            event("s1", 180, Diagnosis::Mci),
            event("s1", 400, Diagnosis::Ad),
        ];
        let (samples, _) = extract_transitions(&events);
        assert_eq!(samples.len(), 2);
        assert_eq!((samples[0].delta_t_days, samples[0].label), (180, 0));
        assert_eq!((samples[1].delta_t_days, samples[1].label), (220, 1));
    }

    #[test]
    fn reversion_and_non_mci_baselines_are_discarded() {
        let events = vec![
            event("s1", 0, Diagnosis::Mci),
            event("s1", 100, Diagnosis::Cn),
            event("s2", 0, Diagnosis::Ad),
            event("s2", 100, Diagnosis::Ad),
            event("s3", 0, Diagnosis::Cn),
            event("s3", 100, Diagnosis::Mci),
            event("s4", 0, Diagnosis::Mci),
            event("s4", 50, Diagnosis::Other),
        ];
        let (samples, _) = extract_transitions(&events);
        assert!(samples.is_empty(), "got {samples:?}");
    }

    #[test]
    fn shuffled_input_is_sorted_and_only_positive_dt_emitted() {
        // Events arrive out of order; pairing must follow dates.
        let events = vec![
            event("s1", 400, Diagnosis::Ad),
            event("s1", 0, Diagnosis::Mci),
            event("s1", 180, Diagnosis::Mci),
        ];
        let (samples, _) = extract_transitions(&events);
        assert_eq!(samples.len(), 2);
        assert!(samples.iter().all(|s| s.delta_t_days > 0));
        assert!(samples.windows(2).all(|w| w[0].baseline_date <= w[1].baseline_date));
    }

    #[test]
    fn duplicate_visits_keep_first_and_report() {
        let mut dup = event("s1", 0, Diagnosis::Mci);
        dup.diagnosis = Diagnosis::Cn;
        let events = vec![
            event("s1", 0, Diagnosis::Mci),
            dup,
            event("s1", 200, Diagnosis::Ad),
        ];
        let (samples, report) = extract_transitions(&events);
        assert_eq!(samples.len(), 1, "first visit (MCI) must be kept");
        assert_eq!(samples[0].label, 1);
        assert_eq!(report.lines.len(), 1);
        assert!(report.lines[0].contains("s1") && report.lines[0].contains("2020-01-01"));
    }

    fn sample_with_dt(dt: i64) -> CohortSample {
        CohortSample {
            subject_id: format!("s{dt}"),
            baseline_date: date("2020-01-01"),
            followup_date: date("2020-01-01") + chrono::Duration::days(dt),
            delta_t_days: dt,
            label: 1,
            mri_path: None,
        }
    }

    #[test]
    fn interval_filter_bounds_are_strict() {
        let samples: Vec<CohortSample> =
            [150, 151, 200, 364, 365, 1000].map(sample_with_dt).to_vec();
        let (lo, hi) = PRESET_ONE_YEAR;
        let kept = filter_by_interval(samples.clone(), lo, hi).unwrap();
        let dts: Vec<i64> = kept.iter().map(|s| s.delta_t_days).collect();
        assert_eq!(dts, vec![151, 200, 364], "strict bounds on both sides");

        // Δt=1000 enters only the three-year preset.
        let (lo3, hi3) = PRESET_THREE_YEAR;
        let kept3 = filter_by_interval(samples.clone(), lo3, hi3).unwrap();
        assert!(kept3.iter().any(|s| s.delta_t_days == 1000));

        // Idempotence and monotonicity under widening.
        let twice = filter_by_interval(kept.clone(), lo, hi).unwrap();
        assert_eq!(twice, kept);
        let wider = filter_by_interval(samples, 100, 1200).unwrap();
        for s in &kept {
            assert!(wider.contains(s), "widening must not drop {s:?}");
        }

        assert!(filter_by_interval(vec![], 365, 150).is_err(), "lo >= hi");
    }

    #[test]
    fn stats_constant_and_oracle() {
        let mut samples = vec![sample_with_dt(200), sample_with_dt(200)];
        samples.push(CohortSample {
            label: 0,
            ..sample_with_dt(100)
        });
        let stats = cohort_stats(&samples).unwrap();
        assert_eq!(stats.n_positive, 2);
        assert_eq!(stats.n_negative, 1);
        assert_eq!(stats.mean_pos_days, 200.0);
        assert_eq!(stats.std_pos_days, 0.0);
        assert!((stats.mean_pos_months - 200.0 / 30.44).abs() < 1e-12);

        // Random cohort against an independent two-pass oracle.
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        let mut randoms = Vec::new();
        for i in 0..137 {
            let mut s = sample_with_dt(rng.random_range(100..1000));
            s.label = (i % 3 == 0) as u8;
            randoms.push(s);
        }
        let stats = cohort_stats(&randoms).unwrap();
        let oracle = |label: u8| -> (f64, f64, usize) {
            let v: Vec<f64> = randoms
                .iter()
                .filter(|s| s.label == label)
                .map(|s| s.delta_t_days as f64)
                .collect();
            let mean = v.iter().sum::<f64>() / v.len() as f64;
            let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / v.len() as f64;
            (mean, var.sqrt(), v.len())
        };
        let (mp, sp, np) = oracle(1);
        let (mn, sn, nn) = oracle(0);
        assert!((stats.mean_pos_days - mp).abs() < 1e-9);
        assert!((stats.std_pos_days - sp).abs() < 1e-9);
        assert!((stats.mean_neg_days - mn).abs() < 1e-9);
        assert!((stats.std_neg_days - sn).abs() < 1e-9);
        assert_eq!((stats.n_positive, stats.n_negative), (np, nn));

        assert!(cohort_stats(&[]).is_err(), "empty cohort must error");
    }

    #[test]
    fn reference_means_sit_inside_their_interval_band() {
        // The recorded one-year reference means (in months) must lie inside
        // the one-year day band converted to months — a consistency check on
        // the unit convention, not a reproduction of the source cohort.
        let lo_m = PRESET_ONE_YEAR.0 as f64 / DAYS_PER_MONTH;
        let hi_m = PRESET_ONE_YEAR.1 as f64 / DAYS_PER_MONTH;
        for m in [
            reference::ONE_YEAR_MEAN_POS_MONTHS,
            reference::ONE_YEAR_MEAN_NEG_MONTHS,
        ] {
            assert!(lo_m < m && m < hi_m, "{m} months outside ({lo_m}, {hi_m})");
        }
        assert_eq!(
            reference::ONE_YEAR_N_POS + reference::ONE_YEAR_N_NEG,
            302,
            "reference counts must total the one-year cohort size"
        );
    }

    fn index_entry(subject: &str, day_offset: i64, path: &str) -> VolumeIndexEntry {
        VolumeIndexEntry {
            subject_id: subject.to_string(),
            scan_date: date("2020-01-01") + chrono::Duration::days(day_offset),
            path: path.to_string(),
        }
    }

    #[test]
    fn imaging_attachment_tolerance_and_nearest_choice() {
        let samples = vec![
            sample_with_dt(200),                       // subject "s200", baseline day 0
            CohortSample {
                subject_id: "far".into(),
                ..sample_with_dt(300)
            },
        ];
        let index = vec![
            index_entry("s200", -9, "vol/nine_before"), // 9 days early: in tolerance
            index_entry("s200", 3, "vol/three_after"),  // closer: must win
            index_entry("far", 11, "vol/too_late"),     // 11 days: out of tolerance
        ];
        let (attached, report) = attach_imaging(samples, &index, IMAGING_TOLERANCE_DAYS);
        assert_eq!(attached.len(), 1);
        assert_eq!(attached[0].mri_path.as_deref(), Some("vol/three_after"));
        assert_eq!(report.lines.len(), 1);
        assert!(report.lines[0].contains("far"));

        // With only the 9-days-early scan available it is attached.
        let (attached, _) = attach_imaging(
            vec![sample_with_dt(200)],
            &[index_entry("s200", -9, "vol/nine_before")],
            IMAGING_TOLERANCE_DAYS,
        );
        assert_eq!(attached[0].mri_path.as_deref(), Some("vol/nine_before"));
    }

    #[test]
    fn diagnosis_csv_roundtrip_and_bad_date() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("dx.csv");
        std::fs::write(
            &path,
            "subject_id,exam_date,diagnosis,imaging_ref\n\
             s1,2020-01-01,MCI,vol/s1_base\n\
             s1,2020-07-19,AD,\n\
             s2,2020-02-02,CN,\n",
        )
        .unwrap();
        let events = load_diagnosis_csv(&path).unwrap();
        assert_eq!(events.len(), 3);
        assert_eq!(events[0].diagnosis, Diagnosis::Mci);
        assert_eq!(events[0].imaging_ref.as_deref(), Some("vol/s1_base"));
        assert_eq!(events[1].imaging_ref, None);
        let (samples, _) = extract_transitions(&events);
        assert_eq!(samples.len(), 1);
        assert_eq!(samples[0].delta_t_days, 200);
        assert_eq!(
            samples[0].mri_path.as_deref(),
            Some("vol/s1_base"),
            "imaging_ref must carry through as the default volume path"
        );

        let bad = dir.path().join("bad.csv");
        std::fs::write(&bad, "subject_id,exam_date,diagnosis\ns1,01/02/2020,MCI\n").unwrap();
        let err = load_diagnosis_csv(&bad).unwrap_err();
        assert!(
            matches!(&err, GfemError::InvalidData(m) if m.contains("01/02/2020")),
            "got {err:?}"
        );
    }

    #[test]
    fn manifest_roundtrips_through_json() {
        let samples = vec![sample_with_dt(200), {
            let mut s = sample_with_dt(300);
            s.label = 0;
            s.mri_path = Some("vol/x".into());
            s
        }];
        let manifest = CohortManifest {
            stats: cohort_stats(&samples).unwrap(),
            samples,
            interval_days: PRESET_ONE_YEAR,
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cohort.json");
        manifest.save(&path).unwrap();
        let back = CohortManifest::load(&path).unwrap();
        assert_eq!(back.samples, manifest.samples);
        assert_eq!(back.stats, manifest.stats);
        assert_eq!(back.interval_days, manifest.interval_days);
    }
}
