//! Accuracy, prediction cost and speedup, and the benchmark suite.

use std::fmt;

use thiserror::Error;

use crate::backend::{Backend, BackendError};
use crate::baselines::{KnnModel, TreeModel};
use crate::bench_programs;
use crate::dataset::{label_sample, DatasetError, Row};
use crate::featurize::{extract_features, FeatureVector};
use crate::ir::Program;
use crate::mlp::MlpModel;
use crate::schedule::{Schedule, ScheduleError, ScheduledProgram, Transform, UnrollFactor};

type BoxError = Box<dyn std::error::Error + Send + Sync>;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("execution times must be positive (predicted {predit}, optimal {optimal}, baseline {sans})")]
    NonPositiveTime { predit: f64, optimal: f64, sans: f64 },
    #[error("test set is empty")]
    EmptyTestSet,
    #[error("prediction failed: {0}")]
    Predictor(#[source] BoxError),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
}

/// Prediction cost and speedup of one case.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Metrics {
    /// `optimal / predicted`; 1 when the prediction ties the optimum.
    pub pc: f64,
    /// `no-unroll / predicted`.
    pub sp: f64,
}

pub fn compute_metrics(predit: f64, optimal: f64, sans: f64) -> Result<Metrics, EvalError> {
    let ok = |t: f64| t > 0.0 && t.is_finite();
    if !(ok(predit) && ok(optimal) && ok(sans)) {
        return Err(EvalError::NonPositiveTime {
            predit,
            optimal,
            sans,
        });
    }
    Ok(Metrics {
        pc: optimal / predit,
        sp: sans / predit,
    })
}

/// Anything that maps a feature vector to an unrolling factor.
pub trait UnrollPredictor: Sync {
    fn name(&self) -> &str;
    fn predict(&self, fv: &FeatureVector) -> Result<UnrollFactor, BoxError>;
}

impl UnrollPredictor for MlpModel {
    fn name(&self) -> &str {
        "mlp"
    }
    fn predict(&self, fv: &FeatureVector) -> Result<UnrollFactor, BoxError> {
        Ok(self.predict_class(fv)?)
    }
}

impl UnrollPredictor for KnnModel {
    fn name(&self) -> &str {
        "knn"
    }
    fn predict(&self, fv: &FeatureVector) -> Result<UnrollFactor, BoxError> {
        Ok(KnnModel::predict(self, fv)?)
    }
}

impl UnrollPredictor for TreeModel {
    fn name(&self) -> &str {
        "tree"
    }
    fn predict(&self, fv: &FeatureVector) -> Result<UnrollFactor, BoxError> {
        Ok(TreeModel::predict(self, fv)?)
    }
}

/// Always predicts the same factor.
#[derive(Debug, Clone, Copy)]
pub struct ConstantPredictor(pub UnrollFactor);

impl UnrollPredictor for ConstantPredictor {
    fn name(&self) -> &str {
        "constant"
    }
    fn predict(&self, _: &FeatureVector) -> Result<UnrollFactor, BoxError> {
        Ok(self.0)
    }
}

/// Fraction of rows whose label the model predicts.
pub fn accuracy(model: &dyn UnrollPredictor, rows: &[Row]) -> Result<f64, EvalError> {
    if rows.is_empty() {
        return Err(EvalError::EmptyTestSet);
    }
    let mut correct = 0usize;
    for r in rows {
        if model.predict(&r.features).map_err(EvalError::Predictor)? == r.label {
            correct += 1;
        }
    }
    Ok(correct as f64 / rows.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum BenchmarkName {
    MMxM,
    SMM,
    RgbGray,
    Blur,
    ConvLayer,
}

impl BenchmarkName {
    pub const ALL: [BenchmarkName; 5] = [
        BenchmarkName::MMxM,
        BenchmarkName::SMM,
        BenchmarkName::RgbGray,
        BenchmarkName::Blur,
        BenchmarkName::ConvLayer,
    ];
}

impl fmt::Display for BenchmarkName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BenchmarkName::MMxM => "MMxM",
            BenchmarkName::SMM => "SMM",
            BenchmarkName::RgbGray => "RGB_gray",
            BenchmarkName::Blur => "Blur",
            BenchmarkName::ConvLayer => "Conv_layer",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum SizeClass {
    Small,
    Medium,
    Large,
}

impl SizeClass {
    pub const ALL: [SizeClass; 3] = [SizeClass::Small, SizeClass::Medium, SizeClass::Large];

    pub fn extent(self) -> i64 {
        match self {
            SizeClass::Small => 256,
            SizeClass::Medium => 1024,
            SizeClass::Large => 2048,
        }
    }

    /// Convolution batch size for this dataset size.
    pub fn conv_batch(self) -> i64 {
        match self {
            SizeClass::Small => 64,
            SizeClass::Medium => 32,
            SizeClass::Large => 8,
        }
    }
}

impl fmt::Display for SizeClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SizeClass::Small => "small",
            SizeClass::Medium => "medium",
            SizeClass::Large => "large",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchmarkCase {
    pub name: BenchmarkName,
    pub size: SizeClass,
    pub program: Program,
    pub schedule: Schedule,
}

impl BenchmarkCase {
    pub fn scheduled(&self) -> Result<ScheduledProgram, ScheduleError> {
        ScheduledProgram::with_schedule(self.program.clone(), &self.schedule)
    }
}

pub const CONV_CHANNELS: i64 = 4;
pub const CONV_FILTERS: i64 = 16;

/// Program for one benchmark at one size.
pub fn benchmark_program(name: BenchmarkName, size: SizeClass) -> Program {
    let n = size.extent();
    match name {
        BenchmarkName::MMxM => bench_programs::mmxm(n),
        BenchmarkName::SMM => bench_programs::smm(n),
        BenchmarkName::RgbGray => bench_programs::rgb_gray(n),
        BenchmarkName::Blur => bench_programs::blur(n),
        BenchmarkName::ConvLayer => {
            bench_programs::conv_layer(size.conv_batch(), CONV_CHANNELS, n / 8, n / 8, CONV_FILTERS)
        }
    }
}

/// Hand-chosen schedule applied before unrolling.
pub fn benchmark_schedule(name: BenchmarkName, size: SizeClass) -> Schedule {
    use BenchmarkName::*;
    use SizeClass::*;
    let par = Transform::Parallelize(0);
    let t = match (name, size) {
        (MMxM, Small) => vec![Transform::tile2(0, 1, 16, 16), par],
        (MMxM, Medium) => vec![par],
        (MMxM, Large) => vec![Transform::tile2(0, 1, 32, 32), par],
        (SMM, Small) => vec![],
        (SMM, Medium) => vec![Transform::tile2(0, 1, 16, 16), Transform::Interchange(1, 2), par],
        (SMM, Large) => vec![Transform::tile2(0, 1, 32, 32), Transform::Interchange(1, 2), par],
        (RgbGray, Small) => vec![par],
        (RgbGray, Medium) => vec![Transform::tile2(0, 1, 32, 32), par],
        (RgbGray, Large) => vec![Transform::tile2(0, 1, 64, 64), par],
        (Blur, _) | (ConvLayer, _) => vec![par],
    };
    Schedule(t)
}

/// Five kernels at three sizes each.
pub fn benchmark_suite() -> Vec<BenchmarkCase> {
    BenchmarkName::ALL
        .iter()
        .flat_map(|&name| {
            SizeClass::ALL.iter().map(move |&size| BenchmarkCase {
                name,
                size,
                program: benchmark_program(name, size),
                schedule: benchmark_schedule(name, size),
            })
        })
        .collect()
}

/// One line of the benchmark report.
#[derive(Debug, Clone, PartialEq)]
pub struct CaseReport {
    pub case: BenchmarkName,
    pub size: SizeClass,
    pub schedule: Schedule,
    pub predicted: UnrollFactor,
    pub optimal: UnrollFactor,
    pub predit_ms: f64,
    pub optimal_ms: f64,
    pub sans_ms: f64,
    pub metrics: Metrics,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CaseFailure {
    pub case: BenchmarkName,
    pub size: SizeClass,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct EvalReport {
    pub cases: Vec<CaseReport>,
    pub failures: Vec<CaseFailure>,
}

pub const REPORT_COLUMNS: [&str; 10] = [
    "case",
    "size",
    "schedule",
    "predicted",
    "optimal",
    "predit_ms",
    "optimal_ms",
    "sans_ms",
    "pc",
    "sp",
];

impl CaseReport {
    fn cells(&self) -> [String; 10] {
        let sched = if self.schedule.is_empty() {
            "-".to_string()
        } else {
            self.schedule.to_string().replace('\n', "; ")
        };
        [
            self.case.to_string(),
            self.size.to_string(),
            sched,
            self.predicted.to_string(),
            self.optimal.to_string(),
            format!("{:.6}", self.predit_ms),
            format!("{:.6}", self.optimal_ms),
            format!("{:.6}", self.sans_ms),
            format!("{:.3}", self.metrics.pc),
            format!("{:.3}", self.metrics.sp),
        ]
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

impl EvalReport {
    pub fn to_csv(&self) -> String {
        let mut out = REPORT_COLUMNS.join(",");
        out.push('\n');
        for c in &self.cases {
            let cells: Vec<String> = c.cells().iter().map(|s| csv_field(s)).collect();
            out.push_str(&cells.join(","));
            out.push('\n');
        }
        out
    }

    /// Right-aligned plain-text table, followed by any failed cases.
    pub fn to_table(&self) -> String {
        let rows: Vec<[String; 10]> = self.cases.iter().map(CaseReport::cells).collect();
        let mut widths: Vec<usize> = REPORT_COLUMNS.iter().map(|h| h.len()).collect();
        for r in &rows {
            for (w, c) in widths.iter_mut().zip(r) {
                *w = (*w).max(c.len());
            }
        }
        let line = |cells: Vec<&str>| {
            cells
                .iter()
                .zip(&widths)
                .enumerate()
                .map(|(i, (c, w))| if i < 3 { format!("{c:<w$}") } else { format!("{c:>w$}") })
                .collect::<Vec<_>>()
                .join("  ")
                .trim_end()
                .to_string()
        };
        let mut out = line(REPORT_COLUMNS.to_vec());
        out.push('\n');
        for r in &rows {
            out.push_str(&line(r.iter().map(String::as_str).collect()));
            out.push('\n');
        }
        for f in &self.failures {
            out.push_str(&format!("FAILED {} {}: {}\n", f.case, f.size, f.message));
        }
        out
    }
}

/// Labels one case exhaustively and scores the model's prediction.
pub fn run_case(
    model: &dyn UnrollPredictor,
    backend: &dyn Backend,
    case: &BenchmarkCase,
    runs: usize,
) -> Result<CaseReport, EvalError> {
    let sp = case.scheduled()?;
    let fv = extract_features(&sp.without_unroll()).map_err(DatasetError::from)?;
    let predicted = model.predict(&fv).map_err(EvalError::Predictor)?;
    let sample = label_sample(&sp, backend, runs)?;
    let predit_ms = sample.timing[predicted.class_index()];
    let optimal_ms = sample.timing[sample.label.class_index()];
    let sans_ms = sample.timing[UnrollFactor::NONE.class_index()];
    Ok(CaseReport {
        case: case.name,
        size: case.size,
        schedule: case.schedule.clone(),
        predicted,
        optimal: sample.label,
        predit_ms,
        optimal_ms,
        sans_ms,
        metrics: compute_metrics(predit_ms, optimal_ms, sans_ms)?,
    })
}

/// Runs every case; failures are recorded per case rather than aborting.
/// Cases run concurrently unless the backend measures wall time.
pub fn run_benchmarks(
    model: &dyn UnrollPredictor,
    backend: &dyn Backend,
    cases: &[BenchmarkCase],
    runs: usize,
) -> EvalReport {
    let results: Vec<Result<CaseReport, EvalError>> = if backend.name() == "native" {
        cases.iter().map(|c| run_case(model, backend, c, runs)).collect()
    } else {
        std::thread::scope(|s| {
            let handles: Vec<_> = cases
                .iter()
                .map(|c| s.spawn(move || run_case(model, backend, c, runs)))
                .collect();
            handles.into_iter().map(|h| h.join().expect("case thread panicked")).collect()
        })
    };
    let mut report = EvalReport::default();
    for (case, r) in cases.iter().zip(results) {
        match r {
            Ok(c) => report.cases.push(c),
            Err(e) => report.failures.push(CaseFailure {
                case: case.name,
                size: case.size,
                message: e.to_string(),
            }),
        }
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::CostModel;
    use crate::featurize::data_loaded_per_level;

    #[test]
    fn metrics_reproduce_reference_rows() {
        let m = compute_metrics(1.56327, 1.56327, 2.13072).unwrap();
        assert!((m.pc - 1.000).abs() < 1e-3 && (m.sp - 1.362).abs() < 1e-3);
        let m = compute_metrics(0.080874, 0.080841, 0.081542).unwrap();
        assert!((m.pc - 0.999).abs() < 1e-3 && (m.sp - 1.008).abs() < 1e-3);
        assert_eq!(compute_metrics(2.0, 2.0, 2.0).unwrap(), Metrics { pc: 1.0, sp: 1.0 });
        assert!(matches!(compute_metrics(0.0, 1.0, 1.0), Err(EvalError::NonPositiveTime { .. })));
        assert!(compute_metrics(1.0, -1.0, 1.0).is_err());
    }

    fn row(label: u32) -> Row {
        Row {
            features: FeatureVector::default(),
            label: UnrollFactor::new(label).unwrap(),
        }
    }

    struct ByDepth;
    impl UnrollPredictor for ByDepth {
        fn name(&self) -> &str {
            "by-depth"
        }
        fn predict(&self, fv: &FeatureVector) -> Result<UnrollFactor, BoxError> {
            Ok(UnrollFactor::ALL[fv.depth as usize % 7])
        }
    }

    #[test]
    fn accuracy_counts() {
        let balanced: Vec<Row> = (0..70).map(|i| row(UnrollFactor::ALL[i % 7].get())).collect();
        let c = ConstantPredictor(UnrollFactor::ALL[3]);
        assert!((accuracy(&c, &balanced).unwrap() - 1.0 / 7.0).abs() < 1e-12);
        assert!(matches!(accuracy(&c, &[]), Err(EvalError::EmptyTestSet)));

        // 20 rows: depth d predicts ALL[d]; labels chosen by hand
        let labels = [0, 2, 4, 8, 16, 0, 0, 2, 4, 64, 32, 2, 0, 8, 8, 16, 4, 2, 0, 64];
        let rows: Vec<Row> = labels
            .iter()
            .enumerate()
            .map(|(i, &l)| {
                let mut r = row(l);
                r.features.depth = (i % 5) as u64;
                r
            })
            .collect();
        // hand count: hits at rows 0, 1, 2, 3, 4, 5, 11 and 13
        assert!((accuracy(&ByDepth, &rows).unwrap() - 8.0 / 20.0).abs() < 1e-12);
    }

    #[test]
    fn suite_has_fifteen_valid_cases() {
        let suite = benchmark_suite();
        assert_eq!(suite.len(), 15);
        for c in &suite {
            let sp = c.scheduled().unwrap();
            assert!(sp.validate().is_ok(), "{} {}", c.name, c.size);
        }
    }

    #[test]
    fn oracle_predictor_has_unit_cost() {
        struct Oracle;
        impl UnrollPredictor for Oracle {
            fn name(&self) -> &str {
                "oracle"
            }
            fn predict(&self, fv: &FeatureVector) -> Result<UnrollFactor, BoxError> {
                let sp = benchmark_suite()
                    .into_iter()
                    .map(|c| c.scheduled().unwrap())
                    .find(|sp| extract_features(sp).unwrap() == *fv)
                    .unwrap();
                Ok(label_sample(&sp, &CostModel::default(), 1)?.label)
            }
        }
        let report = run_benchmarks(&Oracle, &CostModel::default(), &benchmark_suite(), 1);
        assert!(report.failures.is_empty(), "{:?}", report.failures);
        assert_eq!(report.cases.len(), 15);
        for c in &report.cases {
            assert_eq!(c.metrics.pc, 1.0);
            assert!(c.metrics.sp >= 1.0);
        }
        let csv = report.to_csv();
        assert_eq!(csv.lines().next().unwrap(), REPORT_COLUMNS.join(","));
        assert_eq!(csv.lines().count(), 16);
        assert_eq!(report.to_table().lines().count(), 16);
    }

    #[test]
    fn mmxm_case_features_match_direct_extraction() {
        let case = BenchmarkCase {
            name: BenchmarkName::MMxM,
            size: SizeClass::Small,
            program: bench_programs::mmxm(64),
            schedule: Schedule::empty(),
        };
        let sp = case.scheduled().unwrap();
        let fv = extract_features(&sp).unwrap();
        let m = 64;
        assert_eq!(&fv.data_loaded[..3], &[3 * m * m, m * m + 2 * m, 2 * m]);
        assert_eq!(fv.data_loaded, data_loaded_per_level(&sp));
    }
}
