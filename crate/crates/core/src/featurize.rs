//! Static feature extraction and feature post-processing.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ir::{BinOpKind, Expr, OpKind};
use crate::schedule::{ScheduledProgram, UnrollFactor, MAX_DEPTH};

/// Number of numeric feature columns.
pub const FEATURE_WIDTH: usize = 1 + 2 * MAX_DEPTH + 3 + 4 + 1 + 2 * MAX_DEPTH + 1 + MAX_DEPTH;

/// Divisor applied to the per-level load columns before fitting a scaler.
pub const LOAD_RESCALE: f64 = 1000.0;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum FeatureError {
    #[error("nest depth {0} exceeds the maximum of {MAX_DEPTH}")]
    DepthExceedsMax(usize),
    #[error("label {0} is not one of 0,2,4,8,16,32,64")]
    LabelNotInClassSet(u32),
    #[error("cannot fit a scaler on an empty training set")]
    EmptyTrainingSet,
    #[error("expected {expected} columns, found {found}")]
    WidthMismatch { expected: usize, found: usize },
    #[error("bad value `{value}` in column `{column}`")]
    BadValue { column: String, value: String },
}

/// CSV header, feature columns followed by `label`.
pub fn csv_header() -> String {
    feature_names()
        .into_iter()
        .chain(std::iter::once("label".to_string()))
        .collect::<Vec<_>>()
        .join(",")
}

/// Feature column names in row order.
pub fn feature_names() -> Vec<String> {
    fn per_level(stem: &'static str) -> impl Iterator<Item = String> {
        (0..MAX_DEPTH).map(move |k| format!("{stem}{k}"))
    }
    let mut v = vec!["depth".to_string()];
    v.extend(per_level("span"));
    v.extend(per_level("load"));
    v.extend(["loads", "stores", "leaves", "add", "sub", "mul", "div", "dtype"].map(String::from));
    v.extend(per_level("tile"));
    v.extend(per_level("tilef"));
    v.push("interch".into());
    v.extend(per_level("par"));
    v
}

/// Column indices of the per-level load features.
pub fn load_columns() -> std::ops::Range<usize> {
    1 + MAX_DEPTH..1 + 2 * MAX_DEPTH
}

/// Fixed-width static description of a scheduled program. Per-level
/// entries beyond the nest depth are zero.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct FeatureVector {
    pub depth: u64,
    pub span: [u64; MAX_DEPTH],
    pub data_loaded: [u64; MAX_DEPTH],
    pub load_count: u64,
    pub store_count: u64,
    pub leaf_count: u64,
    /// Indexed by [`BinOpKind::index`].
    pub op_counts: [u64; 4],
    pub dtype_flag: u64,
    pub tile_applied: [u64; MAX_DEPTH],
    pub tile_factor: [u64; MAX_DEPTH],
    pub interchange_applied: u64,
    pub parallel_level: [u64; MAX_DEPTH],
}

impl FeatureVector {
    pub fn to_row(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(FEATURE_WIDTH);
        v.push(self.depth);
        v.extend(self.span);
        v.extend(self.data_loaded);
        v.extend([self.load_count, self.store_count, self.leaf_count]);
        v.extend(self.op_counts);
        v.push(self.dtype_flag);
        v.extend(self.tile_applied);
        v.extend(self.tile_factor);
        v.push(self.interchange_applied);
        v.extend(self.parallel_level);
        v.into_iter().map(|x| x as f64).collect()
    }

    pub fn from_row(row: &[f64]) -> Result<Self, FeatureError> {
        if row.len() != FEATURE_WIDTH {
            return Err(FeatureError::WidthMismatch {
                expected: FEATURE_WIDTH,
                found: row.len(),
            });
        }
        let names = feature_names();
        let mut vals = row.iter().zip(&names).map(|(&x, name)| {
            if x >= 0.0 && x.fract() == 0.0 && x <= u64::MAX as f64 {
                Ok(x as u64)
            } else {
                Err(FeatureError::BadValue {
                    column: name.clone(),
                    value: x.to_string(),
                })
            }
        });
        let mut one = || vals.next().unwrap();
        let mut fv = FeatureVector {
            depth: one()?,
            ..Default::default()
        };
        fn fill<const N: usize>(
            dst: &mut [u64; N],
            one: &mut dyn FnMut() -> Result<u64, FeatureError>,
        ) -> Result<(), FeatureError> {
            for d in dst.iter_mut() {
                *d = one()?;
            }
            Ok(())
        }
        fill(&mut fv.span, &mut one)?;
        fill(&mut fv.data_loaded, &mut one)?;
        fv.load_count = one()?;
        fv.store_count = one()?;
        fv.leaf_count = one()?;
        fill(&mut fv.op_counts, &mut one)?;
        fv.dtype_flag = one()?;
        fill(&mut fv.tile_applied, &mut one)?;
        fill(&mut fv.tile_factor, &mut one)?;
        fv.interchange_applied = one()?;
        fill(&mut fv.parallel_level, &mut one)?;
        Ok(fv)
    }
}

/// Words loaded per current loop level: for level `L`, the sum over load
/// accesses of the product of extents of the access's levels at or below
/// `L`. Accesses invariant in every such level contribute nothing.
pub fn data_loaded_per_level(sp: &ScheduledProgram) -> [u64; MAX_DEPTH] {
    let cur = sp.current_iterators();
    let mut out = [0u64; MAX_DEPTH];
    let accesses = sp.base().body.accesses();
    let levels: Vec<_> = accesses.iter().map(|a| sp.access_levels(a)).collect();
    for (l, slot) in out.iter_mut().enumerate().take(cur.len()) {
        *slot = levels
            .iter()
            .map(|lv| {
                let inner: Vec<usize> = lv.range(l..).copied().collect();
                if inner.is_empty() {
                    0
                } else {
                    inner
                        .iter()
                        .fold(1u64, |acc, &k| acc.saturating_mul(cur[k].extent().max(0) as u64))
                }
            })
            .fold(0u64, u64::saturating_add);
    }
    out
}

/// Extracts the feature vector. The unroll factor is deliberately absent:
/// it is the prediction target.
pub fn extract_features(sp: &ScheduledProgram) -> Result<FeatureVector, FeatureError> {
    let depth = sp.depth();
    if depth > MAX_DEPTH {
        return Err(FeatureError::DepthExceedsMax(depth));
    }
    let p = sp.base();
    let hist = p.op_histogram();
    let mut fv = FeatureVector {
        depth: depth as u64,
        data_loaded: data_loaded_per_level(sp),
        load_count: hist.row_total(OpKind::Load),
        store_count: hist.row_total(OpKind::Store),
        leaf_count: p.body.leaf_count() as u64,
        dtype_flag: p.dtype().code(),
        interchange_applied: sp.interchange_applied() as u64,
        ..Default::default()
    };
    for k in BinOpKind::ALL {
        fv.op_counts[k.index()] = hist.row_total(OpKind::from(k));
    }
    for (l, it) in sp.current_iterators().iter().enumerate() {
        fv.span[l] = it.extent().max(0) as u64;
        let f = sp.tile_factors()[l];
        fv.tile_applied[l] = (f > 0) as u64;
        fv.tile_factor[l] = f as u64;
    }
    if let Some(l) = sp.parallel_level() {
        fv.parallel_level[l] = 1;
    }
    Ok(fv)
}

/// Binary-operator count of an expression, by kind.
pub fn op_counts(e: &Expr) -> [u64; 4] {
    let mut c = [0u64; 4];
    e.walk(&mut |n| {
        if let Expr::BinOp { kind, .. } = n {
            c[kind.index()] += 1;
        }
    });
    c
}

/// `features...,label` with integers printed in decimal.
pub fn encode_csv_row(fv: &FeatureVector, label: u32) -> Result<String, FeatureError> {
    let label = UnrollFactor::new(label).map_err(|_| FeatureError::LabelNotInClassSet(label))?;
    let mut s = String::new();
    for x in fv.to_row() {
        write!(s, "{},", x as u64).unwrap();
    }
    write!(s, "{label}").unwrap();
    Ok(s)
}

/// Inverse of [`encode_csv_row`].
pub fn parse_csv_row(line: &str) -> Result<(FeatureVector, UnrollFactor), FeatureError> {
    let fields: Vec<&str> = line.trim().split(',').collect();
    if fields.len() != FEATURE_WIDTH + 1 {
        return Err(FeatureError::WidthMismatch {
            expected: FEATURE_WIDTH + 1,
            found: fields.len(),
        });
    }
    let names = feature_names();
    let row = fields[..FEATURE_WIDTH]
        .iter()
        .zip(&names)
        .map(|(f, name)| {
            f.parse::<f64>().map_err(|_| FeatureError::BadValue {
                column: name.clone(),
                value: f.to_string(),
            })
        })
        .collect::<Result<Vec<_>, _>>()?;
    let raw = fields[FEATURE_WIDTH];
    let label: u32 = raw.parse().map_err(|_| FeatureError::BadValue {
        column: "label".into(),
        value: raw.into(),
    })?;
    let label = UnrollFactor::new(label).map_err(|_| FeatureError::LabelNotInClassSet(label))?;
    Ok((FeatureVector::from_row(&row)?, label))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum ScaleMode {
    #[default]
    Standardize,
    Normalize,
}

/// Column-wise affine rescaling fitted on training rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scaler {
    pub mode: ScaleMode,
    pub width: usize,
    /// Pre-divided by [`LOAD_RESCALE`] before fitting and transforming.
    pub rescaled_columns: Vec<usize>,
    /// Constant on the training set; removed from transformed rows.
    pub dropped_columns: Vec<usize>,
    /// Per retained column: mean (or min).
    pub center: Vec<f64>,
    /// Per retained column: std (or max - min).
    pub scale: Vec<f64>,
}

impl Scaler {
    /// Number of columns produced by [`Scaler::transform`].
    pub fn output_width(&self) -> usize {
        self.width - self.dropped_columns.len()
    }

    fn retained(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.width).filter(|c| !self.dropped_columns.contains(c))
    }

    fn prescale(&self, row: &[f64]) -> Vec<f64> {
        let mut r = row.to_vec();
        for &c in &self.rescaled_columns {
            r[c] /= LOAD_RESCALE;
        }
        r
    }

    pub fn transform(&self, row: &[f64]) -> Vec<f64> {
        assert_eq!(row.len(), self.width, "row width");
        let r = self.prescale(row);
        self.retained()
            .zip(self.center.iter().zip(&self.scale))
            .map(|(c, (m, s))| (r[c] - m) / s)
            .collect()
    }

    pub fn transform_all(&self, rows: &[Vec<f64>]) -> Vec<Vec<f64>> {
        rows.iter().map(|r| self.transform(r)).collect()
    }
}

/// Fits a scaler on training rows of [`FEATURE_WIDTH`] columns, rescaling
/// the per-level load columns.
pub fn fit_scaler(train_rows: &[Vec<f64>], mode: ScaleMode) -> Result<Scaler, FeatureError> {
    let width = train_rows.first().map(Vec::len).unwrap_or(FEATURE_WIDTH);
    let rescaled = if width == FEATURE_WIDTH {
        load_columns().collect()
    } else {
        Vec::new()
    };
    fit_scaler_with(train_rows, mode, rescaled)
}

/// Fits a scaler with an explicit set of rescaled columns.
pub fn fit_scaler_with(
    train_rows: &[Vec<f64>],
    mode: ScaleMode,
    rescaled_columns: Vec<usize>,
) -> Result<Scaler, FeatureError> {
    let first = train_rows.first().ok_or(FeatureError::EmptyTrainingSet)?;
    let width = first.len();
    if let Some(bad) = train_rows.iter().find(|r| r.len() != width) {
        return Err(FeatureError::WidthMismatch {
            expected: width,
            found: bad.len(),
        });
    }
    let mut scaler = Scaler {
        mode,
        width,
        rescaled_columns,
        dropped_columns: Vec::new(),
        center: Vec::new(),
        scale: Vec::new(),
    };
    let rows: Vec<Vec<f64>> = train_rows.iter().map(|r| scaler.prescale(r)).collect();
    let n = rows.len() as f64;
    for c in 0..width {
        let col = rows.iter().map(|r| r[c]);
        let v0 = rows[0][c];
        if rows.iter().all(|r| r[c] == v0) {
            scaler.dropped_columns.push(c);
            continue;
        }
        let (center, scale) = match mode {
            ScaleMode::Standardize => {
                let mean = col.clone().sum::<f64>() / n;
                let var = col.map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
                (mean, var.sqrt())
            }
            ScaleMode::Normalize => {
                let min = col.clone().fold(f64::INFINITY, f64::min);
                let max = col.fold(f64::NEG_INFINITY, f64::max);
                (min, max - min)
            }
        };
        // rounding can leave a non-constant column with zero spread
        if scale == 0.0 || !scale.is_finite() {
            scaler.dropped_columns.push(c);
            continue;
        }
        scaler.center.push(center);
        scaler.scale.push(scale);
    }
    Ok(scaler)
}
