//! Random programs and schedules.
//!
//! Every program is a pure function of `(seed, index)`. Generated outputs
//! index every loop iterator in nest order and the body never reads the
//! output, so any reordering of the nest preserves the result.

use std::str::FromStr;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;
use thiserror::Error;

use crate::config::{parse_list, Config, ConfigError};
use crate::ir::{
    BinOpKind, BufferAccess, BufferDecl, DataType, Expr, LoopIterator, Program, Scalar, Subscript,
};
use crate::schedule::{
    validate_schedule, Schedule, ScheduledProgram, Transform, MAX_DEPTH, MAX_TILE_FACTOR,
    MIN_TILE_FACTOR,
};

/// Transform kinds the schedule generator may draw.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum TransformKind {
    Tile2,
    Tile3,
    Interchange,
    Parallelize,
}

impl TransformKind {
    pub const ALL: [TransformKind; 4] = [
        TransformKind::Tile2,
        TransformKind::Tile3,
        TransformKind::Interchange,
        TransformKind::Parallelize,
    ];
}

impl FromStr for TransformKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "tile2" => Ok(TransformKind::Tile2),
            "tile3" => Ok(TransformKind::Tile3),
            "interchange" => Ok(TransformKind::Interchange),
            "parallelize" => Ok(TransformKind::Parallelize),
            other => Err(format!("unknown transform `{other}`")),
        }
    }
}

#[derive(Debug, Error)]
pub enum GenError {
    #[error("invalid generator config: {0}")]
    Invalid(String),
    #[error(transparent)]
    Config(#[from] ConfigError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenConfig {
    pub seed: u64,
    /// Inclusive nest-depth range, within `[1, 4]`.
    pub depth_range: (usize, usize),
    /// Powers of two up to 2048.
    pub extent_choices: Vec<i64>,
    pub max_inputs: usize,
    pub dtype_choices: Vec<DataType>,
    pub schedules_per_program: usize,
    pub allowed_transforms: Vec<TransformKind>,
    /// Largest number of expression leaves.
    pub max_leaves: usize,
    /// Probability that a leaf is a load rather than a constant.
    pub load_probability: f64,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            seed: 0,
            depth_range: (1, 4),
            extent_choices: vec![8, 16, 32, 64, 128, 256, 512, 1024, 2048],
            max_inputs: 4,
            dtype_choices: DataType::ALL.to_vec(),
            schedules_per_program: 10,
            allowed_transforms: TransformKind::ALL.to_vec(),
            max_leaves: 48,
            load_probability: 0.7,
        }
    }
}

/// Keys accepted by [`GenConfig::from_config`].
pub const GEN_CONFIG_KEYS: &[&str] = &[
    "seed",
    "depth_min",
    "depth_max",
    "extents",
    "max_inputs",
    "dtypes",
    "schedules_per_program",
    "transforms",
    "max_leaves",
    "load_probability",
];

impl GenConfig {
    /// Overlays recognised keys of `cfg` on the defaults. Keys for other
    /// components (for instance `toolchain.*`) are ignored.
    pub fn from_config(cfg: &Config) -> Result<Self, GenError> {
        let mut g = GenConfig::default();
        if let Some(v) = cfg.parsed("seed")? {
            g.seed = v;
        }
        if let Some(v) = cfg.parsed("depth_min")? {
            g.depth_range.0 = v;
        }
        if let Some(v) = cfg.parsed("depth_max")? {
            g.depth_range.1 = v;
        }
        if let Some(v) = cfg.parsed_list("extents")? {
            g.extent_choices = v;
        }
        if let Some(v) = cfg.parsed("max_inputs")? {
            g.max_inputs = v;
        }
        if let Some(v) = cfg.get("dtypes") {
            g.dtype_choices = v
                .split(',')
                .map(str::trim)
                .filter(|s| !s.is_empty())
                .map(|s| {
                    DataType::from_short_name(s).ok_or_else(|| ConfigError::Invalid {
                        key: "dtypes".into(),
                        value: s.into(),
                        reason: "expected i32, i64, f32 or f64".into(),
                    })
                })
                .collect::<Result<_, _>>()?;
        }
        if let Some(v) = cfg.parsed("schedules_per_program")? {
            g.schedules_per_program = v;
        }
        if let Some(v) = cfg.get("transforms") {
            g.allowed_transforms = parse_list("transforms", v)?;
        }
        if let Some(v) = cfg.parsed("max_leaves")? {
            g.max_leaves = v;
        }
        if let Some(v) = cfg.parsed("load_probability")? {
            g.load_probability = v;
        }
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<(), GenError> {
        let bad = |m: &str| Err(GenError::Invalid(m.into()));
        let (lo, hi) = self.depth_range;
        if lo < 1 || lo > hi || hi > 4 {
            return bad("depth range must satisfy 1 <= min <= max <= 4");
        }
        if self.extent_choices.is_empty()
            || self
                .extent_choices
                .iter()
                .any(|&e| !(1..=2048).contains(&e) || (e as u64).count_ones() != 1)
        {
            return bad("extents must be non-empty powers of two up to 2048");
        }
        if self.max_inputs < 1 {
            return bad("max_inputs must be at least 1");
        }
        if self.dtype_choices.is_empty() {
            return bad("dtypes must be non-empty");
        }
        if self.schedules_per_program < 1 {
            return bad("schedules_per_program must be at least 1");
        }
        if self.max_leaves < 1 {
            return bad("max_leaves must be at least 1");
        }
        if !(0.5..=1.0).contains(&self.load_probability) {
            return bad("load_probability must be in [0.5, 1]");
        }
        Ok(())
    }
}

/// Independent stream for `(seed, index, stream)`.
pub fn rng_for(seed: u64, index: u64, stream: u64) -> Xoshiro256PlusPlus {
    // splitmix64 finaliser over the combined key
    let mut z = seed
        ^ index.wrapping_mul(0x9e37_79b9_7f4a_7c15)
        ^ stream.wrapping_mul(0xd1b5_4a32_d192_ed03);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    Xoshiro256PlusPlus::seed_from_u64(z ^ (z >> 31))
}

const PROGRAM_STREAM: u64 = 1;
const SCHEDULE_STREAM: u64 = 2;

fn random_constant(rng: &mut impl Rng, dt: DataType) -> Scalar {
    match dt {
        DataType::Int32 => Scalar::I32(rng.random_range(1..=9)),
        DataType::Int64 => Scalar::I64(rng.random_range(1..=9)),
        // quarter steps are exact in binary
        DataType::Float32 => Scalar::F32(rng.random_range(1..=16) as f32 / 4.0),
        DataType::Float64 => Scalar::F64(rng.random_range(1..=16) as f64 / 4.0),
    }
}

fn random_op(rng: &mut impl Rng) -> BinOpKind {
    match rng.random_range(0..100) {
        0..35 => BinOpKind::Add,
        35..60 => BinOpKind::Sub,
        60..90 => BinOpKind::Mul,
        _ => BinOpKind::Div,
    }
}

fn random_tree(rng: &mut impl Rng, leaves: &mut Vec<Expr>, n: usize) -> Expr {
    if n == 1 {
        return leaves.pop().unwrap();
    }
    let left = rng.random_range(1..n);
    let lhs = random_tree(rng, leaves, left);
    let rhs = random_tree(rng, leaves, n - left);
    Expr::binop(random_op(rng), lhs, rhs)
}

/// Generates the program for `index`.
pub fn gen_program(cfg: &GenConfig, index: u64) -> Program {
    let mut rng = rng_for(cfg.seed, index, PROGRAM_STREAM);
    let depth = rng.random_range(cfg.depth_range.0..=cfg.depth_range.1);
    let iterators: Vec<LoopIterator> = (0..depth)
        .map(|l| LoopIterator::new(format!("i{l}"), 0, *cfg.extent_choices.choose(&mut rng).unwrap(), l))
        .collect();
    let dtype = *cfg.dtype_choices.choose(&mut rng).unwrap();
    let n_inputs = rng.random_range(1..=cfg.max_inputs);
    let inputs: Vec<BufferDecl> = (0..n_inputs)
        .map(|k| BufferDecl {
            name: format!("in{k}"),
            rank: rng.random_range(1..=depth),
            dtype,
        })
        .collect();

    // log-uniform leaf count, so small and large bodies are equally common
    let max_exp = (cfg.max_leaves as f64).log2();
    let n_leaves = (2f64.powf(rng.random_range(0.0..=max_exp)).round() as usize).clamp(1, cfg.max_leaves);
    let names: Vec<String> = iterators.iter().map(|it| it.name.clone()).collect();
    let mut leaves: Vec<Expr> = (0..n_leaves)
        .map(|_| {
            if rng.random_bool(cfg.load_probability) {
                let buf = inputs.choose(&mut rng).unwrap();
                let mut its: Vec<&String> = names.iter().collect();
                its.shuffle(&mut rng);
                let indices = its[..buf.rank]
                    .iter()
                    .map(|n| {
                        let offset = if rng.random_bool(0.2) { rng.random_range(1..=2) } else { 0 };
                        Subscript::iter_offset(n.as_str(), offset)
                    })
                    .collect();
                Expr::Access(BufferAccess::load(buf.name.clone(), dtype, indices))
            } else {
                Expr::Constant(random_constant(&mut rng, dtype))
            }
        })
        .collect();
    let body = random_tree(&mut rng, &mut leaves, n_leaves);
    let output = BufferAccess::store(
        "out",
        dtype,
        names.iter().map(|n| Subscript::iter(n.as_str())).collect(),
    );
    // drop inputs that no leaf reads
    let used: Vec<String> = body.accesses().iter().map(|a| a.buffer.clone()).collect();
    let inputs = inputs.into_iter().filter(|d| used.contains(&d.name)).collect();
    Program {
        name: format!("p{index:05}"),
        iterators,
        body,
        output,
        inputs,
    }
}

fn tile_factor(rng: &mut impl Rng, extent: i64) -> Option<u32> {
    let max = (extent.min(MAX_TILE_FACTOR as i64)) as u32;
    if max < MIN_TILE_FACTOR {
        return None;
    }
    let choices: Vec<u32> = (1..=7).map(|k| 1u32 << k).filter(|f| *f <= max).collect();
    choices.choose(rng).copied()
}

fn random_transform(
    rng: &mut impl Rng,
    kind: TransformKind,
    sp: &ScheduledProgram,
) -> Option<Transform> {
    let cur = sp.current_iterators();
    let depth = cur.len();
    match kind {
        TransformKind::Tile2 if depth >= 2 && depth + 2 <= MAX_DEPTH => {
            let l = rng.random_range(0..depth - 1);
            Some(Transform::tile2(
                l,
                l + 1,
                tile_factor(rng, cur[l].extent())?,
                tile_factor(rng, cur[l + 1].extent())?,
            ))
        }
        TransformKind::Tile3 if depth >= 3 && depth + 3 <= MAX_DEPTH => {
            let l = rng.random_range(0..depth - 2);
            Some(Transform::tile3(
                l,
                l + 1,
                l + 2,
                tile_factor(rng, cur[l].extent())?,
                tile_factor(rng, cur[l + 1].extent())?,
                tile_factor(rng, cur[l + 2].extent())?,
            ))
        }
        TransformKind::Interchange if depth >= 2 => {
            let a = rng.random_range(0..depth);
            let b = (a + rng.random_range(1..depth)) % depth;
            Some(Transform::Interchange(a.min(b), a.max(b)))
        }
        TransformKind::Parallelize if sp.parallel_level().is_none() => {
            // outer levels are the useful ones
            Some(Transform::Parallelize(rng.random_range(0..depth.min(2))))
        }
        _ => None,
    }
}

/// Draws `schedules_per_program` legal schedules for program `index`; the
/// first is always empty. Unrolling is never part of a generated schedule.
pub fn gen_schedules(cfg: &GenConfig, index: u64, p: &Program) -> Vec<ScheduledProgram> {
    let mut rng = rng_for(cfg.seed, index, SCHEDULE_STREAM);
    let base = ScheduledProgram::new(p.clone());
    let mut out = vec![base.clone()];
    while out.len() < cfg.schedules_per_program {
        let mut sp = base.clone();
        if !cfg.allowed_transforms.is_empty() {
            let n = rng.random_range(1..=3);
            for _ in 0..n {
                let kind = *cfg.allowed_transforms.choose(&mut rng).unwrap();
                if let Some(t) = random_transform(&mut rng, kind, &sp) {
                    if let Ok(next) = sp.apply_transform(&t) {
                        if next.depth() <= MAX_DEPTH {
                            sp = next;
                        }
                    }
                }
            }
        }
        debug_assert!(validate_schedule(p, &sp.schedule()).is_ok());
        out.push(sp);
    }
    out
}

/// Schedules of [`gen_schedules`] as plain transform lists.
pub fn gen_schedule_lists(cfg: &GenConfig, index: u64, p: &Program) -> Vec<Schedule> {
    gen_schedules(cfg, index, p).iter().map(|sp| sp.schedule()).collect()
}
