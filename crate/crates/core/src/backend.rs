//! Execution-time backends: an analytic cost model and a native C backend.
//!
//! Both answer the same question: how long does a scheduled program take
//! when its innermost loop is unrolled by `u`.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;
use wait_timeout::ChildExt;

use crate::config::{Config, ConfigError};
use crate::interp::{input_value, linearize, FNV_OFFSET, FNV_PRIME};
use crate::ir::{BinOpKind, DataType, Expr, Scalar};
use crate::schedule::{ScheduleError, ScheduledProgram, UnrollFactor, MAX_DEPTH};

/// Mean and per-run execution times in milliseconds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExecResult {
    pub mean_ms: f64,
    pub runs: usize,
    pub per_run_ms: Vec<f64>,
}

impl ExecResult {
    pub fn single(ms: f64) -> Self {
        ExecResult {
            mean_ms: ms,
            runs: 1,
            per_run_ms: vec![ms],
        }
    }
}

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("invalid unroll factor {0}")]
    InvalidFactor(u32),
    #[error("nest depth {0} exceeds the maximum of {MAX_DEPTH}")]
    DepthExceedsMax(usize),
    #[error("toolchain `{0}` not found")]
    ToolchainMissing(String),
    #[error("compilation failed:\n{0}")]
    CompileError(String),
    #[error("kernel did not finish within {0:?}")]
    RunTimeout(Duration),
    #[error("kernel failed: {0}")]
    RunFailed(String),
    #[error("unparseable kernel output: {0}")]
    BadOutput(String),
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
}

/// Coefficients of the analytic cost model (milliseconds).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostModelParams {
    /// Cost of one body operation.
    pub c_body: f64,
    /// Loop control overhead per main-loop iteration.
    pub c_loop: f64,
    /// Penalty per operation beyond the instruction-cache capacity.
    pub c_icache: f64,
    /// Replicated-body size, in operations, that fits in cache.
    pub icache_capacity: f64,
    /// Speed-up applied when some level is parallelized.
    pub parallel_divisor: f64,
}

impl Default for CostModelParams {
    fn default() -> Self {
        CostModelParams {
            c_body: 1e-6,
            c_loop: 4e-6,
            c_icache: 2e-7,
            icache_capacity: 128.0,
            parallel_divisor: 4.0,
        }
    }
}

impl CostModelParams {
    pub fn is_valid(&self) -> bool {
        [
            self.c_body,
            self.c_loop,
            self.c_icache,
            self.icache_capacity,
            self.parallel_divisor,
        ]
        .iter()
        .all(|x| x.is_finite() && *x > 0.0)
    }
}

/// Deterministic analytic execution time of `sp` unrolled by `u`:
/// `T*ops*c_body + (T/u')*c_loop + T*c_icache*max(0, u'*ops - capacity)`
/// with `u' = max(u, 1)`, divided by the parallel divisor when a level
/// is parallelized.
pub fn cost_model_evaluate(
    sp: &ScheduledProgram,
    u: u32,
    params: &CostModelParams,
) -> Result<ExecResult, BackendError> {
    let u = UnrollFactor::new(u).map_err(|_| BackendError::InvalidFactor(u))?;
    let trips = sp.base().innermost_trip_count() as f64;
    let ops = sp.base().op_histogram().total() as f64;
    let ue = u.effective() as f64;
    let mut cost = trips * ops * params.c_body
        + (trips / ue) * params.c_loop
        + trips * params.c_icache * (ue * ops - params.icache_capacity).max(0.0);
    if sp.parallel_level().is_some() {
        cost /= params.parallel_divisor;
    }
    Ok(ExecResult::single(cost))
}

/// Something that can time a scheduled program for a given unroll factor.
pub trait Backend: Send + Sync {
    fn name(&self) -> &'static str;

    /// Time of `sp` (any existing unroll is replaced by `u`).
    fn evaluate(
        &self,
        sp: &ScheduledProgram,
        u: UnrollFactor,
        runs: usize,
    ) -> Result<ExecResult, BackendError>;
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct CostModel {
    pub params: CostModelParams,
}

impl Backend for CostModel {
    fn name(&self) -> &'static str {
        "cost"
    }

    fn evaluate(
        &self,
        sp: &ScheduledProgram,
        u: UnrollFactor,
        _runs: usize,
    ) -> Result<ExecResult, BackendError> {
        cost_model_evaluate(sp, u.get(), &self.params)
    }
}

/// Compiler command, flags and run timeout for the native backend.
#[derive(Debug, Clone, PartialEq)]
pub struct Toolchain {
    pub cmd: String,
    pub flags: Vec<String>,
    pub timeout: Duration,
}

/// Environment variable overriding the compiler command.
pub const TOOLCHAIN_ENV: &str = "UNROLL_TUNER_TOOLCHAIN";

/// Optimisation level with the compiler's own unrolling and peeling off and
/// no floating-point contraction, so results match the interpreter bit for
/// bit and the only unrolling measured is ours.
pub const DEFAULT_FLAGS: &[&str] = &[
    "-O2",
    "-fno-unroll-loops",
    "-fno-peel-loops",
    "-ffp-contract=off",
    "-fopenmp",
];

impl Default for Toolchain {
    fn default() -> Self {
        Toolchain {
            cmd: std::env::var(TOOLCHAIN_ENV).unwrap_or_else(|_| "cc".into()),
            flags: DEFAULT_FLAGS.iter().map(|s| s.to_string()).collect(),
            timeout: Duration::from_secs(60),
        }
    }
}

impl Toolchain {
    /// Reads `toolchain.cmd`, `toolchain.flags` and `toolchain.timeout_s`.
    /// The environment variable still wins for the command.
    pub fn from_config(cfg: &Config) -> Result<Self, BackendError> {
        let mut t = Toolchain::default();
        if std::env::var(TOOLCHAIN_ENV).is_err() {
            if let Some(cmd) = cfg.get("toolchain.cmd") {
                t.cmd = cmd.to_string();
            }
        }
        if let Some(flags) = cfg.get("toolchain.flags") {
            t.flags = flags.split_whitespace().map(String::from).collect();
        }
        if let Some(secs) = cfg.parsed::<u64>("toolchain.timeout_s")? {
            t.timeout = Duration::from_secs(secs);
        }
        Ok(t)
    }
}

fn c_type(dt: DataType) -> &'static str {
    match dt {
        DataType::Int32 => "int32_t",
        DataType::Int64 => "int64_t",
        DataType::Float32 => "float",
        DataType::Float64 => "double",
    }
}

fn c_literal(c: Scalar) -> String {
    match c {
        Scalar::I32(v) => format!("((int32_t)INT64_C({v}))"),
        Scalar::I64(v) if v == i64::MIN => "INT64_MIN".into(),
        Scalar::I64(v) => format!("INT64_C({v})"),
        Scalar::F32(v) => format!("({v:?}f)"),
        Scalar::F64(v) => format!("({v:?})"),
    }
}

const C_PRELUDE: &str = r#"#include <stdint.h>
#include <stdio.h>
#include <stdlib.h>
#include <string.h>
#include <time.h>

#define UT_WRAP(T, U, S) \
  static inline T ut_add_##S(T a, T b) { return (T)((U)a + (U)b); } \
  static inline T ut_sub_##S(T a, T b) { return (T)((U)a - (U)b); } \
  static inline T ut_mul_##S(T a, T b) { return (T)((U)a * (U)b); } \
  static inline T ut_div_##S(T a, T b) { \
    if (b == 0) return 0; \
    if (b == -1) return (T)((U)0 - (U)a); \
    return a / b; \
  }
UT_WRAP(int32_t, uint32_t, i32)
UT_WRAP(int64_t, uint64_t, i64)

static double ut_now_ms(void) {
  struct timespec ts;
  clock_gettime(CLOCK_MONOTONIC, &ts);
  return (double)ts.tv_sec * 1e3 + (double)ts.tv_nsec / 1e6;
}
"#;

struct Emitter<'a> {
    sp: &'a ScheduledProgram,
    level_vars: Vec<String>,
}

impl Emitter<'_> {
    fn addr(&self, constant: i64, coeffs: &[i64]) -> String {
        let mut s = constant.to_string();
        for (c, v) in coeffs.iter().zip(&self.level_vars) {
            match *c {
                0 => {}
                1 => write!(s, " + {v}").unwrap(),
                c => write!(s, " + {c}L * {v}").unwrap(),
            }
        }
        s
    }

    fn access(&self, a: &crate::ir::BufferAccess) -> String {
        let (c0, coeffs) = linearize(self.sp, a);
        format!("b_{}[{}]", a.buffer, self.addr(c0, &coeffs))
    }

    fn expr(&self, e: &Expr) -> String {
        match e {
            Expr::Constant(c) => c_literal(*c),
            Expr::Access(a) => self.access(a),
            Expr::BinOp { kind, lhs, rhs } => {
                let (l, r) = (self.expr(lhs), self.expr(rhs));
                let dt = self.sp.base().dtype();
                if dt.is_float() {
                    format!("({l} {} {r})", kind.symbol())
                } else {
                    let op = match kind {
                        BinOpKind::Add => "add",
                        BinOpKind::Sub => "sub",
                        BinOpKind::Mul => "mul",
                        BinOpKind::Div => "div",
                    };
                    format!("ut_{op}_{}({l}, {r})", dt.short_name())
                }
            }
        }
    }

    fn statement(&self) -> String {
        let p = self.sp.base();
        let store = format!("{} = {};", self.access(&p.output), self.expr(&p.body));
        let guards: Vec<String> = self
            .sp
            .guards()
            .iter()
            .map(|g| {
                let coeffs: Vec<i64> = self
                    .sp
                    .current_iterators()
                    .iter()
                    .map(|it| g.expr.coeff(&it.name))
                    .collect();
                format!("({}) < {}", self.addr(g.expr.constant, &coeffs), g.bound)
            })
            .collect();
        if guards.is_empty() {
            store
        } else {
            format!("if ({}) {{ {store} }}", guards.join(" && "))
        }
    }
}

/// Emits a self-contained C kernel with a timing harness.
///
/// The binary takes the run count as its first argument and prints
/// `run_ms=` lines on stderr and a single `mean_ms=<float>` line on stdout
/// after one untimed warm-up run. With `checksum` as second argument it
/// also prints `checksum=<hex>`, the FNV-1a hash of the output buffer.
pub fn emit_kernel_source(sp: &ScheduledProgram) -> Result<String, BackendError> {
    let depth = sp.depth();
    if depth > MAX_DEPTH {
        return Err(BackendError::DepthExceedsMax(depth));
    }
    let p = sp.base();
    let em = Emitter {
        sp,
        level_vars: sp
            .current_iterators()
            .iter()
            .map(|it| format!("v_{}", it.name))
            .collect(),
    };
    let mut s = String::from(C_PRELUDE);
    let buffers = p.buffers();
    let lens: Vec<i64> = buffers
        .iter()
        .map(|(n, _, _)| p.buffer_shape(n).map(|d| d.iter().product()).unwrap_or(1))
        .collect();
    for ((name, dt, _), len) in buffers.iter().zip(&lens) {
        writeln!(s, "static {} *b_{name}; /* {len} elements */", c_type(*dt)).unwrap();
    }

    s.push_str("\nstatic void kernel(void) {\n");
    let stmt = em.statement();
    let cur = sp.current_iterators();
    let par = sp.parallel_level();
    let pad = |k: usize| "  ".repeat(k + 1);
    for (l, it) in cur.iter().enumerate().take(depth - 1) {
        if par == Some(l) {
            writeln!(s, "{}#pragma omp parallel for", pad(l)).unwrap();
        }
        writeln!(
            s,
            "{}for (long {v} = {}; {v} < {}; {v}++) {{",
            pad(l),
            it.lower,
            it.upper,
            v = em.level_vars[l]
        )
        .unwrap();
    }
    let inner = &cur[depth - 1];
    let v = &em.level_vars[depth - 1];
    let ind = pad(depth - 1);
    let pragma = if par == Some(depth - 1) {
        format!("{ind}#pragma omp parallel for\n")
    } else {
        String::new()
    };
    let u = sp.unroll();
    if u.is_applied() {
        let uu = u.get() as i64;
        let main = sp.main_trips();
        s.push_str(&pragma);
        writeln!(s, "{ind}for (long ut_t = 0; ut_t < {main}; ut_t++) {{").unwrap();
        for r in 0..uu {
            writeln!(
                s,
                "{ind}  {{ const long {v} = {} + ut_t * {uu} + {r}; {stmt} }}",
                inner.lower
            )
            .unwrap();
        }
        writeln!(s, "{ind}}}").unwrap();
        writeln!(
            s,
            "{ind}for (long {v} = {}; {v} < {}; {v}++) {{ {stmt} }}",
            inner.lower + main * uu,
            inner.upper
        )
        .unwrap();
    } else {
        s.push_str(&pragma);
        writeln!(
            s,
            "{ind}for (long {v} = {}; {v} < {}; {v}++) {{ {stmt} }}",
            inner.lower, inner.upper
        )
        .unwrap();
    }
    for l in (0..depth - 1).rev() {
        writeln!(s, "{}}}", pad(l)).unwrap();
    }
    s.push_str("}\n\n");

    // harness
    let (out_name, out_dt, _) = buffers.last().unwrap();
    let out_len = *lens.last().unwrap();
    s.push_str("int main(int argc, char **argv) {\n");
    s.push_str("  int runs = argc > 1 ? atoi(argv[1]) : 30;\n  if (runs < 1) runs = 1;\n");
    s.push_str("  int want_checksum = argc > 2 && strcmp(argv[2], \"checksum\") == 0;\n");
    for (k, ((name, dt, is_out), len)) in buffers.iter().zip(&lens).enumerate() {
        let t = c_type(*dt);
        writeln!(s, "  b_{name} = ({t} *)malloc(sizeof({t}) * {len}L);").unwrap();
        writeln!(s, "  if (!b_{name}) return 3;").unwrap();
        if !is_out {
            writeln!(
                s,
                "  for (long f = 0; f < {len}L; f++) b_{name}[f] = ({t})(((f * 7 + {}) % 11) + 1);",
                k * 5 + 3
            )
            .unwrap();
        }
    }
    debug_assert_eq!(input_value(0, 0), 4);
    let out_bytes = format!("sizeof({}) * {out_len}L", c_type(*out_dt));
    writeln!(s, "  memset(b_{out_name}, 0, {out_bytes});\n  kernel();").unwrap();
    s.push_str("  double total = 0.0;\n  for (int r = 0; r < runs; r++) {\n");
    writeln!(s, "    memset(b_{out_name}, 0, {out_bytes});").unwrap();
    s.push_str("    double t0 = ut_now_ms();\n    kernel();\n    double ms = ut_now_ms() - t0;\n");
    s.push_str("    if (ms <= 0.0) ms = 1e-9;\n");
    s.push_str("    fprintf(stderr, \"run_ms=%.17g\\n\", ms);\n    total += ms;\n  }\n");
    s.push_str("  printf(\"mean_ms=%.17g\\n\", total / runs);\n");
    s.push_str("  if (want_checksum) {\n");
    writeln!(
        s,
        "    uint64_t h = UINT64_C({FNV_OFFSET:#x});\n    const unsigned char *bytes = (const unsigned char *)b_{out_name};"
    )
    .unwrap();
    writeln!(
        s,
        "    for (long i = 0; i < (long)({out_bytes}); i++) {{ h ^= bytes[i]; h *= UINT64_C({FNV_PRIME:#x}); }}"
    )
    .unwrap();
    s.push_str("    printf(\"checksum=%016llx\\n\", (unsigned long long)h);\n  }\n");
    s.push_str("  return 0;\n}\n");
    Ok(s)
}

/// Process-wide lock: one timed kernel at a time.
static EXEC_LOCK: Mutex<()> = Mutex::new(());
static SCRATCH_COUNTER: AtomicU64 = AtomicU64::new(0);

struct Scratch(PathBuf);

impl Scratch {
    fn new() -> std::io::Result<Self> {
        let n = SCRATCH_COUNTER.fetch_add(1, Ordering::Relaxed);
        let dir = std::env::temp_dir().join(format!("unroll-tuner-{}-{n}", std::process::id()));
        std::fs::create_dir_all(&dir)?;
        Ok(Scratch(dir))
    }
}

impl Drop for Scratch {
    fn drop(&mut self) {
        let _ = std::fs::remove_dir_all(&self.0);
    }
}

/// Output of one kernel execution.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelRun {
    pub result: ExecResult,
    pub checksum: Option<u64>,
}

fn compile(tc: &Toolchain, src: &Path, bin: &Path) -> Result<(), BackendError> {
    let mut last = String::new();
    for attempt in 0..2 {
        let out = Command::new(&tc.cmd)
            .args(&tc.flags)
            .arg("-o")
            .arg(bin)
            .arg(src)
            .output()
            .map_err(|e| {
                if e.kind() == std::io::ErrorKind::NotFound {
                    BackendError::ToolchainMissing(tc.cmd.clone())
                } else {
                    BackendError::Io(e)
                }
            })?;
        if out.status.success() {
            return Ok(());
        }
        last = String::from_utf8_lossy(&out.stderr).into_owned();
        log::warn!("compile attempt {} failed", attempt + 1);
    }
    Err(BackendError::CompileError(last))
}

/// Compiles and runs a kernel produced by [`emit_kernel_source`].
pub fn run_kernel(
    source: &str,
    runs: usize,
    checksum: bool,
    tc: &Toolchain,
) -> Result<KernelRun, BackendError> {
    let runs = runs.max(1);
    let dir = Scratch::new()?;
    let src = dir.0.join("kernel.c");
    let bin = dir.0.join("kernel");
    std::fs::write(&src, source)?;
    compile(tc, &src, &bin)?;

    let stdout_path = dir.0.join("stdout");
    let stderr_path = dir.0.join("stderr");
    let status = {
        let _guard = EXEC_LOCK.lock().unwrap_or_else(|e| e.into_inner());
        let mut cmd = Command::new(&bin);
        cmd.arg(runs.to_string())
            .stdin(Stdio::null())
            .stdout(std::fs::File::create(&stdout_path)?)
            .stderr(std::fs::File::create(&stderr_path)?);
        if checksum {
            cmd.arg("checksum");
        }
        let mut child = cmd.spawn()?;
        match child.wait_timeout(tc.timeout)? {
            Some(status) => status,
            None => {
                let _ = child.kill();
                let _ = child.wait();
                return Err(BackendError::RunTimeout(tc.timeout));
            }
        }
    };
    let stdout = std::fs::read_to_string(&stdout_path)?;
    let stderr = std::fs::read_to_string(&stderr_path)?;
    if !status.success() {
        return Err(BackendError::RunFailed(format!("{status}: {stderr}")));
    }
    parse_kernel_output(&stdout, &stderr)
}

fn parse_kernel_output(stdout: &str, stderr: &str) -> Result<KernelRun, BackendError> {
    let bad = || BackendError::BadOutput(stdout.trim().to_string());
    let means: Vec<f64> = stdout
        .lines()
        .filter_map(|l| l.strip_prefix("mean_ms="))
        .map(|v| v.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .map_err(|_| bad())?;
    let [mean_ms] = means[..] else {
        return Err(bad());
    };
    let per_run_ms: Vec<f64> = stderr
        .lines()
        .filter_map(|l| l.strip_prefix("run_ms="))
        .map(|v| v.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .map_err(|_| bad())?;
    let checksum = stdout
        .lines()
        .find_map(|l| l.strip_prefix("checksum="))
        .map(|h| u64::from_str_radix(h.trim(), 16))
        .transpose()
        .map_err(|_| bad())?;
    Ok(KernelRun {
        result: ExecResult {
            mean_ms,
            runs: per_run_ms.len(),
            per_run_ms,
        },
        checksum,
    })
}

/// Compiles `source`, runs it `runs` times and returns the timing.
pub fn native_measure(source: &str, runs: usize, tc: &Toolchain) -> Result<ExecResult, BackendError> {
    run_kernel(source, runs, false, tc).map(|r| r.result)
}

/// True when the toolchain command can be spawned.
pub fn toolchain_available(tc: &Toolchain) -> bool {
    Command::new(&tc.cmd)
        .arg("--version")
        .stdout(Stdio::null())
        .stderr(Stdio::null())
        .status()
        .map(|s| s.success())
        .unwrap_or(false)
}

#[derive(Debug, Clone, Default)]
pub struct NativeBackend {
    pub toolchain: Toolchain,
}

impl NativeBackend {
    /// Output checksum of the kernel for `sp` as compiled and executed.
    pub fn checksum(&self, sp: &ScheduledProgram) -> Result<u64, BackendError> {
        let src = emit_kernel_source(sp)?;
        run_kernel(&src, 1, true, &self.toolchain)?
            .checksum
            .ok_or_else(|| BackendError::BadOutput("missing checksum".into()))
    }
}

impl Backend for NativeBackend {
    fn name(&self) -> &'static str {
        "native"
    }

    fn evaluate(
        &self,
        sp: &ScheduledProgram,
        u: UnrollFactor,
        runs: usize,
    ) -> Result<ExecResult, BackendError> {
        let sp = sp.without_unroll().apply_unroll(u)?;
        let src = emit_kernel_source(&sp)?;
        native_measure(&src, runs, &self.toolchain)
    }
}
