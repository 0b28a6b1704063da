//! Labelling, class balancing, splitting and CSV persistence.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use thiserror::Error;

use crate::backend::{Backend, BackendError};
use crate::featurize::{csv_header, encode_csv_row, extract_features, parse_csv_row, FeatureError, FeatureVector};
use crate::generator::rng_for;
use crate::schedule::{ScheduledProgram, UnrollFactor};

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("no class has at least {0} rows")]
    AllClassesBelowMinimum(usize),
    #[error("need at least 10 rows to split, got {0}")]
    TooFewRows(usize),
    #[error("{path}: header does not match the feature schema")]
    HeaderMismatch { path: String },
    #[error("{path}:{line}: {reason}")]
    MalformedRow {
        path: String,
        line: usize,
        reason: String,
    },
    #[error("evaluating unroll factor {factor}: {source}")]
    Backend {
        factor: UnrollFactor,
        source: BackendError,
    },
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

/// One dataset row: features and best factor.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Row {
    pub features: FeatureVector,
    pub label: UnrollFactor,
}

/// Mean time per factor, indexed like [`UnrollFactor::ALL`].
pub type Timings = [f64; 7];

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSample {
    pub features: FeatureVector,
    pub label: UnrollFactor,
    pub timing: Timings,
}

impl LabeledSample {
    pub fn row(&self) -> Row {
        Row {
            features: self.features.clone(),
            label: self.label,
        }
    }
}

/// Anything carrying a class label.
pub trait Labeled {
    fn label(&self) -> UnrollFactor;
}

impl Labeled for Row {
    fn label(&self) -> UnrollFactor {
        self.label
    }
}

impl Labeled for LabeledSample {
    fn label(&self) -> UnrollFactor {
        self.label
    }
}

impl<T: Labeled> Labeled for &T {
    fn label(&self) -> UnrollFactor {
        (*self).label()
    }
}

/// Factor with the smallest time; ties go to the smaller factor.
pub fn best_factor(timing: &Timings) -> UnrollFactor {
    let mut best = 0;
    for k in 1..timing.len() {
        if timing[k] < timing[best] {
            best = k;
        }
    }
    UnrollFactor::ALL[best]
}

/// Times `sp` under every factor and labels it with the fastest one.
/// Features describe the nest without any unrolling.
pub fn label_sample(
    sp: &ScheduledProgram,
    backend: &dyn Backend,
    runs: usize,
) -> Result<LabeledSample, DatasetError> {
    let base = sp.without_unroll();
    let features = extract_features(&base)?;
    let mut timing = [0.0; 7];
    for (slot, u) in timing.iter_mut().zip(UnrollFactor::ALL) {
        *slot = backend
            .evaluate(&base, u, runs)
            .map_err(|source| DatasetError::Backend { factor: u, source })?
            .mean_ms;
    }
    Ok(LabeledSample {
        features,
        label: best_factor(&timing),
        timing,
    })
}

/// Row counts per class, in factor order.
pub fn class_counts<T: Labeled>(rows: &[T]) -> BTreeMap<UnrollFactor, usize> {
    let mut m = BTreeMap::new();
    for r in rows {
        *m.entry(r.label()).or_insert(0) += 1;
    }
    m
}

/// Down-samples every class with at least `min_per_class` rows to the size
/// of the smallest such class and drops the others. Kept rows stay in
/// input order, so balancing a balanced set returns it unchanged.
pub fn balance_classes<T: Labeled + Clone>(
    rows: &[T],
    min_per_class: usize,
    seed: u64,
) -> Result<Vec<T>, DatasetError> {
    let counts = class_counts(rows);
    let target = counts
        .values()
        .copied()
        .filter(|&c| c >= min_per_class && c > 0)
        .min()
        .ok_or(DatasetError::AllClassesBelowMinimum(min_per_class))?;
    let mut keep = vec![false; rows.len()];
    for (&class, &count) in &counts {
        if count < min_per_class {
            log::warn!("dropping class {class}: {count} rows < {min_per_class}");
            continue;
        }
        let mut idx: Vec<usize> = (0..rows.len()).filter(|&i| rows[i].label() == class).collect();
        if count > target {
            let mut rng = rng_for(seed, class.get() as u64, 3);
            idx.shuffle(&mut rng);
            idx.truncate(target);
        }
        for i in idx {
            keep[i] = true;
        }
    }
    Ok(rows
        .iter()
        .zip(keep)
        .filter(|(_, k)| *k)
        .map(|(r, _)| r.clone())
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct SplitDataset<T> {
    pub train: Vec<T>,
    pub valid: Vec<T>,
    pub test: Vec<T>,
    pub seed: u64,
}

pub const SPLIT_FRACTIONS: (f64, f64, f64) = (0.6, 0.2, 0.2);

/// Seeded shuffle, then a 60/20/20 cut.
pub fn split_dataset<T: Clone>(rows: &[T], seed: u64) -> Result<SplitDataset<T>, DatasetError> {
    let n = rows.len();
    if n < 10 {
        return Err(DatasetError::TooFewRows(n));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng_for(seed, 0, 4));
    let n_train = (n as f64 * SPLIT_FRACTIONS.0).round() as usize;
    let n_valid = (n as f64 * SPLIT_FRACTIONS.1).round() as usize;
    let pick = |r: &[usize]| r.iter().map(|&i| rows[i].clone()).collect::<Vec<_>>();
    Ok(SplitDataset {
        train: pick(&idx[..n_train]),
        valid: pick(&idx[n_train..n_train + n_valid]),
        test: pick(&idx[n_train + n_valid..]),
        seed,
    })
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Writes the header and one line per row.
pub fn save_csv(rows: &[Row], path: &Path) -> Result<(), DatasetError> {
    let mut s = csv_header();
    s.push('\n');
    for r in rows {
        s.push_str(&encode_csv_row(&r.features, r.label.get())?);
        s.push('\n');
    }
    std::fs::write(path, s).map_err(io_err(path))
}

/// Reads a file written by [`save_csv`], checking the header and labels.
pub fn load_csv(path: &Path) -> Result<Vec<Row>, DatasetError> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim_end() == csv_header() => {}
        _ => {
            return Err(DatasetError::HeaderMismatch {
                path: path.display().to_string(),
            })
        }
    }
    lines
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            parse_csv_row(l)
                .map(|(features, label)| Row { features, label })
                .map_err(|e| DatasetError::MalformedRow {
                    path: path.display().to_string(),
                    line: i + 1,
                    reason: e.to_string(),
                })
        })
        .collect()
}

/// `<path>.timings.csv`.
pub fn timings_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".timings.csv");
    PathBuf::from(s)
}

pub const TIMINGS_HEADER: &str = "sample_id,f0,f2,f4,f8,f16,f32,f64";

/// Writes the rows to `path` and their timings to the sidecar file.
pub fn save_samples(samples: &[LabeledSample], path: &Path) -> Result<(), DatasetError> {
    let rows: Vec<Row> = samples.iter().map(LabeledSample::row).collect();
    save_csv(&rows, path)?;
    let mut s = String::from(TIMINGS_HEADER);
    s.push('\n');
    for (i, sample) in samples.iter().enumerate() {
        write!(s, "{i}").unwrap();
        for t in sample.timing {
            write!(s, ",{t}").unwrap();
        }
        s.push('\n');
    }
    let tp = timings_path(path);
    std::fs::write(&tp, s).map_err(io_err(&tp))
}

/// Reads rows and their sidecar timings back.
pub fn load_samples(path: &Path) -> Result<Vec<LabeledSample>, DatasetError> {
    let rows = load_csv(path)?;
    let tp = timings_path(path);
    let text = std::fs::read_to_string(&tp).map_err(io_err(&tp))?;
    let mut lines = text.lines().enumerate();
    if lines.next().map(|(_, h)| h.trim_end()) != Some(TIMINGS_HEADER) {
        return Err(DatasetError::HeaderMismatch {
            path: tp.display().to_string(),
        });
    }
    let malformed = |line: usize, reason: &str| DatasetError::MalformedRow {
        path: tp.display().to_string(),
        line,
        reason: reason.into(),
    };
    let timings: Vec<Timings> = lines
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            let vals: Vec<f64> = l
                .split(',')
                .skip(1)
                .map(|v| v.trim().parse::<f64>())
                .collect::<Result<_, _>>()
                .map_err(|_| malformed(i + 1, "bad number"))?;
            <Timings>::try_from(vals).map_err(|_| malformed(i + 1, "expected 7 timings"))
        })
        .collect::<Result<_, _>>()?;
    if timings.len() != rows.len() {
        return Err(malformed(0, "timings and rows differ in length"));
    }
    Ok(rows
        .into_iter()
        .zip(timings)
        .map(|(r, timing)| LabeledSample {
            features: r.features,
            label: r.label,
            timing,
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::{cost_model_evaluate, CostModel, CostModelParams};
    use crate::bench_programs;

    fn row(label: u32, tag: u64) -> Row {
        Row {
            features: FeatureVector {
                depth: tag,
                ..Default::default()
            },
            label: UnrollFactor::new(label).unwrap(),
        }
    }

    #[test]
    fn argmin_with_smallest_tie_break() {
        assert_eq!(best_factor(&[9.0, 5.5, 4.0, 3.8, 3.9, 4.5, 7.0]).get(), 8);
        assert_eq!(best_factor(&[1.0; 7]).get(), 0);
        assert_eq!(best_factor(&[2.0, 1.0, 1.0, 3.0, 3.0, 3.0, 1.0]).get(), 2);
    }

    #[test]
    fn label_matches_brute_force_cost_argmin() {
        let params = CostModelParams::default();
        let backend = CostModel { params };
        for p in [bench_programs::mmxm(32), bench_programs::rgb_gray(16), bench_programs::blur(8)] {
            let sp = ScheduledProgram::new(p)
                .apply_unroll(UnrollFactor::new(4).unwrap())
                .unwrap();
            let s = label_sample(&sp, &backend, 1).unwrap();
            let mut best = (f64::INFINITY, 0);
            for u in [0, 2, 4, 8, 16, 32, 64] {
                let c = cost_model_evaluate(&sp.without_unroll(), u, &params).unwrap().mean_ms;
                if c < best.0 {
                    best = (c, u);
                }
            }
            assert_eq!(s.label.get(), best.1);
            assert!(s.timing.iter().all(|t| s.timing[s.label.class_index()] <= *t));
        }
    }

    #[test]
    fn balancing_example() {
        let mut rows = Vec::new();
        for (label, n) in [(0, 5000), (2, 1200), (4, 1200), (8, 900)] {
            rows.extend((0..n).map(|i| row(label, i)));
        }
        let out = balance_classes(&rows, 1000, 1).unwrap();
        let counts = class_counts(&out);
        assert_eq!(counts.len(), 3);
        assert!(counts.values().all(|&c| c == 1200));
        assert_eq!(balance_classes(&out, 1000, 1).unwrap(), out);
        assert!(matches!(
            balance_classes(&rows, 10_000, 1),
            Err(DatasetError::AllClassesBelowMinimum(10_000))
        ));
    }

    #[test]
    fn split_is_a_seeded_partition() {
        let rows: Vec<Row> = (0..100).map(|i| row(0, i)).collect();
        let s = split_dataset(&rows, 3).unwrap();
        assert_eq!((s.train.len(), s.valid.len(), s.test.len()), (60, 20, 20));
        assert_eq!(s, split_dataset(&rows, 3).unwrap());
        let mut tags: Vec<u64> = s.train.iter().chain(&s.valid).chain(&s.test).map(|r| r.features.depth).collect();
        tags.sort();
        assert_eq!(tags, (0..100).collect::<Vec<_>>());
        assert!(matches!(split_dataset(&rows[..9], 0), Err(DatasetError::TooFewRows(9))));
    }

    #[test]
    fn csv_round_trip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        let rows: Vec<Row> = (0..5).map(|i| row([0, 2, 64][i % 3], i as u64)).collect();
        save_csv(&rows, &path).unwrap();
        assert_eq!(load_csv(&path).unwrap(), rows);

        let text = std::fs::read_to_string(&path).unwrap();
        let bad_label = text.replacen(",64\n", ",5\n", 1);
        std::fs::write(&path, bad_label).unwrap();
        assert!(matches!(load_csv(&path), Err(DatasetError::MalformedRow { line: 4, .. })));

        let swapped = text.replacen("depth,span0", "span0,depth", 1);
        std::fs::write(&path, swapped).unwrap();
        assert!(matches!(load_csv(&path), Err(DatasetError::HeaderMismatch { .. })));
    }

    #[test]
    fn samples_round_trip_with_timings() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.csv");
        let backend = CostModel::default();
        let samples: Vec<LabeledSample> = [bench_programs::smm(8), bench_programs::mmxm(4)]
            .into_iter()
            .map(|p| label_sample(&ScheduledProgram::new(p), &backend, 1).unwrap())
            .collect();
        save_samples(&samples, &path).unwrap();
        assert!(timings_path(&path).ends_with("s.csv.timings.csv"));
        assert_eq!(load_samples(&path).unwrap(), samples);
    }
}
