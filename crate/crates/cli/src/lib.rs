//! Command-line pipeline: `gen`, `label`, `train`, `predict`, `baselines`
//! and `bench`.
//!
//! Settings resolve as flags, then the `--config` file, then defaults.
//! Exit code 0 is success, 1 a usage error, 2 a pipeline failure.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;

use unroll_tuner::backend::{Backend, CostModel, CostModelParams, NativeBackend, Toolchain};
use unroll_tuner::baselines::{accuracy_table, KnnConfig, KnnModel, TreeConfig, TreeModel};
use unroll_tuner::config::{parse_list, Config};
use unroll_tuner::dataset::{
    balance_classes, class_counts, label_sample, load_csv, save_samples, split_dataset, Row,
};
use unroll_tuner::eval::{accuracy, benchmark_suite, run_benchmarks, SizeClass};
use unroll_tuner::featurize::{extract_features, ScaleMode};
use unroll_tuner::generator::{gen_program, gen_schedules, GenConfig, GEN_CONFIG_KEYS};
use unroll_tuner::mlp::{self, MlpModel, TrainConfig};
use unroll_tuner::text::{parse_program_file, write_program_with_schedule};
use unroll_tuner::{ScheduledProgram, UnrollFactor};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_PIPELINE: i32 = 2;

/// Bad flags, config keys or paths; reported with exit code 1.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

#[derive(Parser, Debug)]
#[command(name = "unroll-tuner", version, about = "Learned loop-unrolling factor prediction")]
struct Cli {
    /// Flat `key = value` configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for generation and cost-model labeling.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate random programs with schedules.
    Gen(GenArgs),
    /// Time every unrolling factor and write the labeled corpus.
    Label(LabelArgs),
    /// Train the classifier on a labeled corpus.
    Train(TrainArgs),
    /// Print the predicted factor for a program file.
    Predict(PredictArgs),
    /// Compare the classifier with KNN and a decision tree.
    Baselines(BaselineArgs),
    /// Run the benchmark suite and report PC and SP.
    Bench(BenchArgs),
}

#[derive(Args, Debug)]
struct GenArgs {
    #[arg(long, default_value_t = 100)]
    count: u64,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum BackendKind {
    Cost,
    Native,
}

#[derive(Args, Debug)]
struct LabelArgs {
    /// Directory of `.prog` files.
    #[arg(long)]
    input: PathBuf,
    /// Corpus CSV; timings go to `<out>.timings.csv`.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum)]
    backend: Option<BackendKind>,
    #[arg(long)]
    runs: Option<usize>,
    /// Balance classes, dropping those with fewer rows.
    #[arg(long)]
    min_per_class: Option<usize>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    /// Model file to write.
    #[arg(long)]
    out: PathBuf,
    /// Output classes, comma-separated.
    #[arg(long)]
    classes: Option<String>,
    #[arg(long)]
    max_epochs: Option<usize>,
    #[arg(long)]
    patience: Option<usize>,
}

#[derive(Args, Debug)]
struct PredictArgs {
    /// Program file, optionally with schedule lines.
    file: PathBuf,
    #[arg(long)]
    model: PathBuf,
}

#[derive(Args, Debug)]
struct BaselineArgs {
    #[arg(long)]
    data: PathBuf,
    /// Trained classifier to include in the table.
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    max_depth: Option<usize>,
    /// Where to write the table.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct BenchArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long, value_enum)]
    backend: Option<BackendKind>,
    #[arg(long)]
    runs: Option<usize>,
    /// Size classes to run, comma-separated.
    #[arg(long, default_value = "small,medium,large")]
    sizes: String,
    /// Report CSV.
    #[arg(long)]
    out: Option<PathBuf>,
}

const COST_KEYS: [&str; 5] = ["c_body", "c_loop", "c_icache", "icache_capacity", "parallel_divisor"];
const TOP_KEYS: [&str; 2] = ["seed", "jobs"];
const LABEL_KEYS: [&str; 3] = ["backend", "runs", "min_per_class"];
const TRAIN_KEYS: [&str; 8] = [
    "classes",
    "learning_rate",
    "batch_size",
    "patience",
    "max_epochs",
    "scale_mode",
    "adam_eps",
    "min_delta",
];
const TOOLCHAIN_KEYS: [&str; 3] = ["cmd", "flags", "timeout_s"];

/// Resolved settings shared by the subcommands.
struct Ctx {
    cfg: Config,
    seed: u64,
    /// Whether the seed came from a flag or the top-level config key.
    seed_given: bool,
    jobs: usize,
}

fn check_config(cfg: &Config) -> Result<()> {
    let sections: [(&str, &[&str]); 7] = [
        ("gen", GEN_CONFIG_KEYS),
        ("cost", &COST_KEYS),
        ("label", &LABEL_KEYS),
        ("train", &TRAIN_KEYS),
        ("toolchain", &TOOLCHAIN_KEYS),
        ("knn", &["k"]),
        ("tree", &["max_depth", "min_samples_split"]),
    ];
    for key in cfg.keys() {
        let known = match key.split_once('.') {
            None => TOP_KEYS.contains(&key),
            Some((sec, rest)) => sections
                .iter()
                .any(|(s, keys)| *s == sec && keys.contains(&rest)),
        };
        if !known {
            return Err(usage(format!("unknown config key `{key}`")));
        }
    }
    Ok(())
}

impl Ctx {
    fn new(cli: &Cli) -> Result<Ctx> {
        let cfg = match &cli.config {
            Some(p) => Config::load(p).map_err(|e| usage(e.to_string()))?,
            None => Config::default(),
        };
        check_config(&cfg)?;
        let top_seed: Option<u64> = cfg.parsed("seed").map_err(|e| usage(e.to_string()))?;
        let seed = cli.seed.or(top_seed);
        let jobs = match cli.jobs {
            Some(j) => j,
            None => cfg.parsed("jobs").map_err(|e| usage(e.to_string()))?.unwrap_or(0),
        };
        Ok(Ctx {
            cfg,
            seed: seed.unwrap_or(0),
            seed_given: seed.is_some(),
            jobs,
        })
    }

    fn get<T>(&self, key: &str) -> Result<Option<T>>
    where
        T: std::str::FromStr,
        T::Err: std::fmt::Display,
    {
        self.cfg.parsed(key).map_err(|e| usage(e.to_string()))
    }

    fn pool(&self, jobs: usize) -> Result<rayon::ThreadPool> {
        rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build()
            .context("building the worker pool")
    }

    fn backend(&self, kind: BackendKind) -> Result<Box<dyn Backend>> {
        Ok(match kind {
            BackendKind::Cost => {
                let mut p = CostModelParams::default();
                let slots = [
                    &mut p.c_body,
                    &mut p.c_loop,
                    &mut p.c_icache,
                    &mut p.icache_capacity,
                    &mut p.parallel_divisor,
                ];
                for (slot, key) in slots.into_iter().zip(COST_KEYS) {
                    if let Some(v) = self.get(&format!("cost.{key}"))? {
                        *slot = v;
                    }
                }
                if !p.is_valid() {
                    return Err(usage("cost model parameters must be positive"));
                }
                Box::new(CostModel { params: p })
            }
            BackendKind::Native => Box::new(NativeBackend {
                toolchain: Toolchain::from_config(&self.cfg).map_err(|e| usage(e.to_string()))?,
            }),
        })
    }

    fn backend_kind(&self, flag: Option<BackendKind>) -> Result<BackendKind> {
        if let Some(k) = flag {
            return Ok(k);
        }
        match self.cfg.get("label.backend") {
            None | Some("cost") => Ok(BackendKind::Cost),
            Some("native") => Ok(BackendKind::Native),
            Some(other) => Err(usage(format!("unknown backend `{other}`"))),
        }
    }

    fn runs(&self, flag: Option<usize>) -> Result<usize> {
        let runs = match flag {
            Some(r) => r,
            None => self.get("label.runs")?.unwrap_or(30),
        };
        if runs == 0 {
            return Err(usage("--runs must be at least 1"));
        }
        Ok(runs)
    }
}

/// Parses argv (including the program name) and runs the subcommand.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(&cli) {
        Ok(()) => EXIT_OK,
        Err(e) if e.is::<UsageError>() => {
            eprintln!("error: {e}");
            eprintln!("usage: unroll-tuner [--config FILE] [--seed N] [--jobs N] <gen|label|train|predict|baselines|bench> ...");
            EXIT_USAGE
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            EXIT_PIPELINE
        }
    }
}

fn dispatch(cli: &Cli) -> Result<()> {
    let ctx = Ctx::new(cli)?;
    match &cli.command {
        Command::Gen(a) => cmd_gen(&ctx, a),
        Command::Label(a) => cmd_label(&ctx, a),
        Command::Train(a) => cmd_train(&ctx, a),
        Command::Predict(a) => cmd_predict(a),
        Command::Baselines(a) => cmd_baselines(&ctx, a),
        Command::Bench(a) => cmd_bench(&ctx, a),
    }
}

fn require_file(p: &Path) -> Result<()> {
    if !p.is_file() {
        return Err(usage(format!("{} is not a file", p.display())));
    }
    Ok(())
}

fn cmd_gen(ctx: &Ctx, a: &GenArgs) -> Result<()> {
    let mut g = GenConfig::from_config(&ctx.cfg.section("gen")).map_err(|e| usage(e.to_string()))?;
    if ctx.seed_given {
        g.seed = ctx.seed;
    }
    g.validate().map_err(|e| usage(e.to_string()))?;
    std::fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let files: Vec<(String, String)> = ctx.pool(ctx.jobs)?.install(|| {
        (0..a.count)
            .into_par_iter()
            .flat_map_iter(|i| {
                let p = gen_program(&g, i);
                gen_schedules(&g, i, &p)
                    .into_iter()
                    .enumerate()
                    .map(move |(j, sp)| {
                        (
                            format!("p{i:05}_s{j:02}.prog"),
                            write_program_with_schedule(sp.base(), &sp.schedule()),
                        )
                    })
                    .collect::<Vec<_>>()
            })
            .collect()
    });
    for (name, text) in &files {
        let path = a.out.join(name);
        std::fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
    }
    println!("wrote {} files to {}", files.len(), a.out.display());
    Ok(())
}

fn read_program(path: &Path) -> Result<ScheduledProgram> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let (p, s) = parse_program_file(&text)
        .map_err(|e| anyhow::anyhow!("{}:{}: {}", path.display(), e.line, e.message))?;
    ScheduledProgram::with_schedule(p, &s).with_context(|| format!("scheduling {}", path.display()))
}

fn cmd_label(ctx: &Ctx, a: &LabelArgs) -> Result<()> {
    if !a.input.is_dir() {
        return Err(usage(format!("{} is not a directory", a.input.display())));
    }
    let kind = ctx.backend_kind(a.backend)?;
    let runs = ctx.runs(a.runs)?;
    let min_per_class = match a.min_per_class {
        Some(m) => Some(m),
        None => ctx.get("label.min_per_class")?,
    };
    let backend = ctx.backend(kind)?;
    let mut files: Vec<PathBuf> = std::fs::read_dir(&a.input)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "prog"))
        .collect();
    files.sort();
    if files.is_empty() {
        bail!("no .prog files in {}", a.input.display());
    }
    // timing runs must not overlap
    let jobs = if kind == BackendKind::Native { 1 } else { ctx.jobs };
    let backend = backend.as_ref();
    let samples = ctx.pool(jobs)?.install(|| {
        files
            .par_iter()
            .map(|f| {
                let sp = read_program(f)?;
                label_sample(&sp, backend, runs).with_context(|| format!("labeling {}", f.display()))
            })
            .collect::<Result<Vec<_>>>()
    })?;
    let samples = match min_per_class {
        Some(m) => balance_classes(&samples, m, ctx.seed)?,
        None => samples,
    };
    save_samples(&samples, &a.out)?;
    let counts = class_counts(&samples);
    let summary: Vec<String> = counts.iter().map(|(k, v)| format!("{k}:{v}")).collect();
    println!("labeled {} samples ({})", samples.len(), summary.join(" "));
    Ok(())
}

fn parse_classes(s: &str) -> Result<Vec<UnrollFactor>> {
    let raw: Vec<u32> = parse_list("classes", s).map_err(|e| usage(e.to_string()))?;
    let mut out = Vec::new();
    for u in raw {
        let f = UnrollFactor::new(u).map_err(|e| usage(e.to_string()))?;
        if out.contains(&f) {
            return Err(usage(format!("class {u} listed twice")));
        }
        out.push(f);
    }
    if out.len() < 2 {
        return Err(usage("at least two classes are needed"));
    }
    out.sort();
    Ok(out)
}

fn train_config(ctx: &Ctx, a: &TrainArgs) -> Result<TrainConfig> {
    let mut t = TrainConfig {
        seed: ctx.seed,
        ..Default::default()
    };
    if let Some(v) = ctx.get("train.learning_rate")? {
        t.learning_rate = v;
    }
    if let Some(v) = ctx.get("train.batch_size")? {
        t.batch_size = v;
    }
    if let Some(v) = ctx.get("train.adam_eps")? {
        t.adam_eps = v;
    }
    if let Some(v) = ctx.get("train.min_delta")? {
        t.min_delta = v;
    }
    t.patience = a.patience.map_or_else(|| ctx.get("train.patience"), |v| Ok(Some(v)))?.unwrap_or(t.patience);
    t.max_epochs = a.max_epochs.map_or_else(|| ctx.get("train.max_epochs"), |v| Ok(Some(v)))?.unwrap_or(t.max_epochs);
    t.scale_mode = match ctx.cfg.get("train.scale_mode") {
        None | Some("standardize") => ScaleMode::Standardize,
        Some("normalize") => ScaleMode::Normalize,
        Some(o) => return Err(usage(format!("unknown scale mode `{o}`"))),
    };
    if t.batch_size == 0 || t.max_epochs == 0 || t.patience == 0 || t.learning_rate <= 0.0 || t.min_delta < 0.0 {
        return Err(usage("batch size, epochs, patience and learning rate must be positive"));
    }
    Ok(t)
}

fn cmd_train(ctx: &Ctx, a: &TrainArgs) -> Result<()> {
    require_file(&a.data)?;
    let classes = match (&a.classes, ctx.cfg.get("train.classes")) {
        (Some(s), _) => parse_classes(s)?,
        (None, Some(s)) => parse_classes(s)?,
        (None, None) => UnrollFactor::ALL.to_vec(),
    };
    let cfg = train_config(ctx, a)?;
    let rows = load_csv(&a.data)?;
    if let Some(r) = rows.iter().find(|r| !classes.contains(&r.label)) {
        bail!("corpus label {} is not among the configured classes", r.label);
    }
    let split = split_dataset(&rows, ctx.seed)?;
    let (model, history) = mlp::fit(&split.train, &split.valid, &classes, &cfg)?;
    model.save(&a.out)?;
    let best = history
        .iter()
        .min_by(|x, y| x.valid_loss.total_cmp(&y.valid_loss))
        .expect("at least one epoch");
    let test_acc = accuracy(&model, &split.test)?;
    println!(
        "epochs={} best_epoch={} valid_accuracy={:.4} test_accuracy={:.4}",
        history.len(),
        best.epoch,
        best.valid_accuracy,
        test_acc
    );
    Ok(())
}

fn cmd_predict(a: &PredictArgs) -> Result<()> {
    require_file(&a.file)?;
    require_file(&a.model)?;
    let model = MlpModel::load(&a.model)?;
    let sp = read_program(&a.file)?;
    let fv = extract_features(&sp.without_unroll())?;
    println!("unroll_factor={}", model.predict_class(&fv)?);
    Ok(())
}

fn cmd_baselines(ctx: &Ctx, a: &BaselineArgs) -> Result<()> {
    require_file(&a.data)?;
    let k = match a.k {
        Some(k) => k,
        None => ctx.get("knn.k")?.unwrap_or(KnnConfig::default().k),
    };
    let mut tree_cfg = TreeConfig::default();
    if let Some(d) = a.max_depth.map_or_else(|| ctx.get("tree.max_depth"), |v| Ok(Some(v)))? {
        tree_cfg.max_depth = d;
    }
    if let Some(m) = ctx.get("tree.min_samples_split")? {
        tree_cfg.min_samples_split = m;
    }
    if k == 0 || tree_cfg.max_depth == 0 {
        return Err(usage("k and max_depth must be at least 1"));
    }
    let mode = match ctx.cfg.get("train.scale_mode") {
        Some("normalize") => ScaleMode::Normalize,
        _ => ScaleMode::Standardize,
    };
    let rows: Vec<Row> = load_csv(&a.data)?;
    let split = split_dataset(&rows, ctx.seed)?;
    let mut entries: Vec<(&str, f64)> = Vec::new();
    if let Some(p) = &a.model {
        require_file(p)?;
        let m = MlpModel::load(p)?;
        entries.push(("mlp", accuracy(&m, &split.test)?));
    }
    let knn = KnnModel::fit(&split.train, KnnConfig { k }, mode)?;
    entries.push(("knn", accuracy(&knn, &split.test)?));
    let tree = TreeModel::fit(&split.train, tree_cfg, mode)?;
    entries.push(("tree", accuracy(&tree, &split.test)?));
    let table = accuracy_table(&entries);
    print!("{table}");
    if let Some(out) = &a.out {
        std::fs::write(out, &table).with_context(|| format!("writing {}", out.display()))?;
    }
    Ok(())
}

fn cmd_bench(ctx: &Ctx, a: &BenchArgs) -> Result<()> {
    require_file(&a.model)?;
    let sizes: Vec<SizeClass> = a
        .sizes
        .split(',')
        .map(|s| match s.trim() {
            "small" => Ok(SizeClass::Small),
            "medium" => Ok(SizeClass::Medium),
            "large" => Ok(SizeClass::Large),
            o => Err(usage(format!("unknown size class `{o}`"))),
        })
        .collect::<Result<_>>()?;
    let kind = ctx.backend_kind(a.backend)?;
    let runs = ctx.runs(a.runs)?;
    let backend = ctx.backend(kind)?;
    let model = MlpModel::load(&a.model)?;
    let cases: Vec<_> = benchmark_suite()
        .into_iter()
        .filter(|c| sizes.contains(&c.size))
        .collect();
    let report = run_benchmarks(&model, backend.as_ref(), &cases, runs);
    print!("{}", report.to_table());
    if let Some(out) = &a.out {
        std::fs::write(out, report.to_csv()).with_context(|| format!("writing {}", out.display()))?;
    }
    if !report.failures.is_empty() {
        bail!("{} of {} benchmark cases failed", report.failures.len(), cases.len());
    }
    Ok(())
}
