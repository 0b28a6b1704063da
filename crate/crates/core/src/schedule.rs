//! Loop transformations over a [`Program`].
//!
//! A [`ScheduledProgram`] keeps the base program untouched and tracks the
//! transformed nest as a list of current loop levels plus, for every base
//! iterator, an affine expression giving its value in terms of the current
//! levels. Strip-mining `i` by `s` rewrites `i = lower + s*outer + inner`.
//! When `s` does not divide the extent a guard `s*outer + inner < N` is
//! recorded; it plays the role of the remainder loop.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ir::{LoopIterator, Program, ValidationReport};

/// Deepest nest accepted by feature extraction and code emission.
pub const MAX_DEPTH: usize = 7;

/// Smallest and largest split / tile factor.
pub const MIN_TILE_FACTOR: u32 = 2;
pub const MAX_TILE_FACTOR: u32 = 128;

/// An unrolling factor from the search space `{0, 2, 4, 8, 16, 32, 64}`.
/// `0` means the loop is not unrolled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "u32", into = "u32")]
pub struct UnrollFactor(u32);

impl UnrollFactor {
    pub const NONE: UnrollFactor = UnrollFactor(0);
    pub const ALL: [UnrollFactor; 7] = [
        UnrollFactor(0),
        UnrollFactor(2),
        UnrollFactor(4),
        UnrollFactor(8),
        UnrollFactor(16),
        UnrollFactor(32),
        UnrollFactor(64),
    ];

    pub fn new(u: u32) -> Result<Self, ScheduleError> {
        if UnrollFactor::ALL.iter().any(|f| f.0 == u) {
            Ok(UnrollFactor(u))
        } else {
            Err(ScheduleError::InvalidFactor(u))
        }
    }

    pub fn get(self) -> u32 {
        self.0
    }

    /// Replication count: `0` behaves like `1`.
    pub fn effective(self) -> u32 {
        self.0.max(1)
    }

    pub fn is_applied(self) -> bool {
        self.0 > 0
    }

    /// Position in [`UnrollFactor::ALL`].
    pub fn class_index(self) -> usize {
        UnrollFactor::ALL.iter().position(|f| *f == self).unwrap()
    }
}

impl TryFrom<u32> for UnrollFactor {
    type Error = ScheduleError;
    fn try_from(u: u32) -> Result<Self, Self::Error> {
        UnrollFactor::new(u)
    }
}

impl From<UnrollFactor> for u32 {
    fn from(u: UnrollFactor) -> u32 {
        u.0
    }
}

impl fmt::Display for UnrollFactor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Transform {
    /// Strip-mine one level. Names default to `<name>_o` / `<name>_i`.
    Split {
        level: usize,
        factor: u32,
        outer_name: Option<String>,
        inner_name: Option<String>,
    },
    Interchange(usize, usize),
    /// Tile two adjacent levels: `a, b` becomes `a_o, b_o, a_i, b_i`.
    Tile2 {
        levels: [usize; 2],
        factors: [u32; 2],
    },
    /// Tile three adjacent levels.
    Tile3 {
        levels: [usize; 3],
        factors: [u32; 3],
    },
    Unroll(u32),
    Parallelize(usize),
}

impl Transform {
    pub fn split(level: usize, factor: u32) -> Self {
        Transform::Split {
            level,
            factor,
            outer_name: None,
            inner_name: None,
        }
    }

    pub fn tile2(la: usize, lb: usize, fa: u32, fb: u32) -> Self {
        Transform::Tile2 {
            levels: [la, lb],
            factors: [fa, fb],
        }
    }

    pub fn tile3(la: usize, lb: usize, lc: usize, fa: u32, fb: u32, fc: u32) -> Self {
        Transform::Tile3 {
            levels: [la, lb, lc],
            factors: [fa, fb, fc],
        }
    }

    fn tile_factors(&self) -> &[u32] {
        match self {
            Transform::Split { factor, .. } => std::slice::from_ref(factor),
            Transform::Tile2 { factors, .. } => factors,
            Transform::Tile3 { factors, .. } => factors,
            _ => &[],
        }
    }
}

impl fmt::Display for Transform {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Transform::Split { level, factor, .. } => write!(f, "split {level} {factor}"),
            Transform::Interchange(a, b) => write!(f, "interchange {a} {b}"),
            Transform::Tile2 { levels, factors } => write!(
                f,
                "tile2 {} {} {} {}",
                levels[0], levels[1], factors[0], factors[1]
            ),
            Transform::Tile3 { levels, factors } => write!(
                f,
                "tile3 {} {} {} {} {} {}",
                levels[0], levels[1], levels[2], factors[0], factors[1], factors[2]
            ),
            Transform::Unroll(u) => write!(f, "unroll {u}"),
            Transform::Parallelize(l) => write!(f, "parallelize {l}"),
        }
    }
}

/// An ordered list of transforms.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Schedule(pub Vec<Transform>);

impl Schedule {
    pub fn empty() -> Self {
        Schedule(Vec::new())
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Transform> {
        self.0.iter()
    }
}

impl fmt::Display for Schedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.0.is_empty() {
            return f.write_str("none");
        }
        for (i, t) in self.0.iter().enumerate() {
            if i > 0 {
                f.write_str("; ")?;
            }
            write!(f, "{t}")?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ScheduleError {
    #[error("unknown loop level {0}")]
    UnknownLevel(usize),
    #[error("factor {0} is not a power of two")]
    FactorNotPowerOfTwo(u32),
    #[error("factor {0} is outside [{MIN_TILE_FACTOR}, {MAX_TILE_FACTOR}]")]
    FactorOutOfRange(u32),
    #[error("invalid unroll factor {0}: expected one of 0,2,4,8,16,32,64")]
    InvalidFactor(u32),
    #[error("tiled levels must be adjacent and increasing: {0:?}")]
    NotAdjacent(Vec<usize>),
    #[error("at most one Unroll per schedule")]
    DuplicateUnroll,
    #[error("at most one Parallelize per schedule")]
    DuplicateParallelize,
}

/// Affine form `constant + sum(coeff * iterator)` over current loop levels.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Affine {
    pub constant: i64,
    pub terms: Vec<(String, i64)>,
}

impl Affine {
    pub fn var(name: &str) -> Self {
        Affine {
            constant: 0,
            terms: vec![(name.to_string(), 1)],
        }
    }

    pub fn coeff(&self, name: &str) -> i64 {
        self.terms
            .iter()
            .filter(|(n, _)| n == name)
            .map(|(_, c)| *c)
            .sum()
    }

    fn add_term(&mut self, name: &str, c: i64) {
        if c == 0 {
            return;
        }
        if let Some(t) = self.terms.iter_mut().find(|(n, _)| n == name) {
            t.1 += c;
        } else {
            self.terms.push((name.to_string(), c));
        }
        self.terms.retain(|(_, c)| *c != 0);
    }

    /// Replaces `name` by `replacement` (scaled by its coefficient).
    pub fn substitute(&mut self, name: &str, replacement: &Affine) {
        let k = self.coeff(name);
        if k == 0 {
            return;
        }
        self.terms.retain(|(n, _)| n != name);
        self.constant += k * replacement.constant;
        for (n, c) in &replacement.terms {
            self.add_term(n, k * c);
        }
    }

    pub fn eval(&self, value_of: impl Fn(&str) -> i64) -> i64 {
        self.constant
            + self
                .terms
                .iter()
                .map(|(n, c)| c * value_of(n))
                .sum::<i64>()
    }
}

impl fmt::Display for Affine {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut first = true;
        for (n, c) in &self.terms {
            if !first {
                f.write_str(" + ")?;
            }
            if *c == 1 {
                write!(f, "{n}")?;
            } else {
                write!(f, "{c}*{n}")?;
            }
            first = false;
        }
        if first {
            write!(f, "{}", self.constant)
        } else if self.constant != 0 {
            write!(f, " + {}", self.constant)
        } else {
            Ok(())
        }
    }
}

/// `0 <= expr < bound` must hold for the body to execute.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Guard {
    pub expr: Affine,
    pub bound: i64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct SplitRecord {
    original: LoopIterator,
    outer: String,
    inner: String,
    factor: i64,
    guarded: bool,
}

/// A base program together with the transforms applied to it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduledProgram {
    base: Program,
    applied: Vec<Transform>,
    current: Vec<LoopIterator>,
    tile_factors: Vec<u32>,
    origin: Vec<(String, Affine)>,
    guards: Vec<Guard>,
    splits: Vec<SplitRecord>,
    unroll: UnrollFactor,
    parallel: Option<String>,
    remainder_extent: i64,
}

impl ScheduledProgram {
    pub fn new(base: Program) -> Self {
        let current: Vec<LoopIterator> = base.iterators.clone();
        let origin = base
            .iterators
            .iter()
            .map(|it| (it.name.clone(), Affine::var(&it.name)))
            .collect();
        let depth = current.len();
        ScheduledProgram {
            base,
            applied: Vec::new(),
            current,
            tile_factors: vec![0; depth],
            origin,
            guards: Vec::new(),
            splits: Vec::new(),
            unroll: UnrollFactor::NONE,
            parallel: None,
            remainder_extent: 0,
        }
    }

    /// Applies `schedule` in order to `base`.
    pub fn with_schedule(base: Program, schedule: &Schedule) -> Result<Self, ScheduleError> {
        schedule
            .iter()
            .try_fold(ScheduledProgram::new(base), |sp, t| sp.apply_transform(t))
    }

    pub fn base(&self) -> &Program {
        &self.base
    }

    pub fn applied(&self) -> &[Transform] {
        &self.applied
    }

    pub fn schedule(&self) -> Schedule {
        Schedule(self.applied.clone())
    }

    /// Loop levels after transformation, outer to inner.
    pub fn current_iterators(&self) -> &[LoopIterator] {
        &self.current
    }

    pub fn depth(&self) -> usize {
        self.current.len()
    }

    /// Tile factor that produced each current level (0 if untiled).
    pub fn tile_factors(&self) -> &[u32] {
        &self.tile_factors
    }

    /// Value of base iterator `name` as an affine form over current levels.
    pub fn origin_of(&self, name: &str) -> Option<&Affine> {
        self.origin.iter().find(|(n, _)| n == name).map(|(_, a)| a)
    }

    pub fn origins(&self) -> &[(String, Affine)] {
        &self.origin
    }

    pub fn guards(&self) -> &[Guard] {
        &self.guards
    }

    pub fn unroll(&self) -> UnrollFactor {
        self.unroll
    }

    pub fn parallel_level(&self) -> Option<usize> {
        let name = self.parallel.as_ref()?;
        self.current.iter().position(|it| &it.name == name)
    }

    pub fn interchange_applied(&self) -> bool {
        self.applied
            .iter()
            .any(|t| matches!(t, Transform::Interchange(..)))
    }

    /// Trip count of the unrolled innermost main loop: `floor(N / u)`, or
    /// `N` when unrolling is off.
    pub fn main_trips(&self) -> i64 {
        let n = self.innermost_extent();
        n / self.unroll.effective() as i64
    }

    /// Iterations left to the epilogue: `N mod u`.
    pub fn remainder_extent(&self) -> i64 {
        self.remainder_extent
    }

    fn innermost_extent(&self) -> i64 {
        self.current.last().map(|it| it.extent()).unwrap_or(0)
    }

    /// Current-level names that appear with a non-zero coefficient in the
    /// subscripts of `access`.
    pub fn access_levels(&self, access: &crate::ir::BufferAccess) -> BTreeSet<usize> {
        let mut levels = BTreeSet::new();
        for base_name in access.iterator_names() {
            if let Some(aff) = self.origin_of(base_name) {
                for (n, c) in &aff.terms {
                    if *c != 0 {
                        if let Some(pos) = self.current.iter().position(|it| &it.name == n) {
                            levels.insert(pos);
                        }
                    }
                }
            }
        }
        levels
    }

    fn check_level(&self, level: usize) -> Result<(), ScheduleError> {
        if level < self.current.len() {
            Ok(())
        } else {
            Err(ScheduleError::UnknownLevel(level))
        }
    }

    fn relevel(&mut self) {
        for (i, it) in self.current.iter_mut().enumerate() {
            it.level = i;
        }
        self.remainder_extent = if self.unroll.is_applied() {
            self.innermost_extent() % self.unroll.get() as i64
        } else {
            0
        };
    }

    fn fresh_name(&self, stem: &str) -> String {
        let taken = |n: &str| {
            self.current.iter().any(|it| it.name == n) || self.base.iterator(n).is_some()
        };
        if !taken(stem) {
            return stem.to_string();
        }
        (1..)
            .map(|k| format!("{stem}{k}"))
            .find(|n| !taken(n))
            .unwrap()
    }

    fn do_split(&mut self, pos: usize, factor: i64, outer: Option<&str>, inner: Option<&str>) {
        let it = self.current[pos].clone();
        let n = it.extent();
        let outer = outer
            .map(str::to_string)
            .unwrap_or_else(|| self.fresh_name(&format!("{}_o", it.name)));
        let inner = inner
            .map(str::to_string)
            .unwrap_or_else(|| self.fresh_name(&format!("{}_i", it.name)));
        let outer_extent = (n + factor - 1) / factor;
        let replacement = Affine {
            constant: it.lower,
            terms: vec![(outer.clone(), factor), (inner.clone(), 1)],
        };
        for (_, aff) in &mut self.origin {
            aff.substitute(&it.name, &replacement);
        }
        for g in &mut self.guards {
            g.expr.substitute(&it.name, &replacement);
        }
        let guarded = n % factor != 0;
        if guarded {
            self.guards.push(Guard {
                expr: Affine {
                    constant: 0,
                    terms: vec![(outer.clone(), factor), (inner.clone(), 1)],
                },
                bound: n,
            });
        }
        self.splits.push(SplitRecord {
            original: it.clone(),
            outer: outer.clone(),
            inner: inner.clone(),
            factor,
            guarded,
        });
        let f = factor as u32;
        self.current.splice(
            pos..=pos,
            [
                LoopIterator::new(outer, 0, outer_extent, pos),
                LoopIterator::new(inner, 0, factor, pos + 1),
            ],
        );
        self.tile_factors.splice(pos..=pos, [f, f]);
    }

    fn swap_levels(&mut self, a: usize, b: usize) {
        self.current.swap(a, b);
        self.tile_factors.swap(a, b);
    }

    /// Applies one transform, returning the new scheduled program.
    pub fn apply_transform(&self, t: &Transform) -> Result<ScheduledProgram, ScheduleError> {
        for &f in t.tile_factors() {
            check_tile_factor(f)?;
        }
        let mut sp = self.clone();
        match t {
            Transform::Split {
                level,
                factor,
                outer_name,
                inner_name,
            } => {
                sp.check_level(*level)?;
                sp.do_split(
                    *level,
                    *factor as i64,
                    outer_name.as_deref(),
                    inner_name.as_deref(),
                );
            }
            Transform::Interchange(a, b) => {
                sp.check_level(*a)?;
                sp.check_level(*b)?;
                sp.swap_levels(*a, *b);
            }
            Transform::Tile2 { levels, factors } => {
                check_adjacent(levels)?;
                sp.check_level(levels[1])?;
                let la = levels[0];
                // a -> a_o a_i, then b -> b_o b_i: [a_o a_i b_o b_i]
                sp.do_split(la + 1, factors[1] as i64, None, None);
                sp.do_split(la, factors[0] as i64, None, None);
                sp.swap_levels(la + 1, la + 2);
            }
            Transform::Tile3 { levels, factors } => {
                check_adjacent(levels)?;
                sp.check_level(levels[2])?;
                let la = levels[0];
                sp.do_split(la + 2, factors[2] as i64, None, None);
                sp.do_split(la + 1, factors[1] as i64, None, None);
                sp.do_split(la, factors[0] as i64, None, None);
                // [a_o a_i b_o b_i c_o c_i] -> [a_o b_o c_o a_i b_i c_i]
                let perm = [0usize, 2, 4, 1, 3, 5];
                let cur: Vec<_> = (0..6).map(|k| sp.current[la + k].clone()).collect();
                let tf: Vec<_> = (0..6).map(|k| sp.tile_factors[la + k]).collect();
                for (k, &src) in perm.iter().enumerate() {
                    sp.current[la + k] = cur[src].clone();
                    sp.tile_factors[la + k] = tf[src];
                }
            }
            Transform::Unroll(u) => {
                let f = check_unroll_factor(*u)?;
                if sp.unroll.is_applied() || sp.applied.iter().any(|t| matches!(t, Transform::Unroll(_))) {
                    return Err(ScheduleError::DuplicateUnroll);
                }
                sp.unroll = f;
            }
            Transform::Parallelize(level) => {
                sp.check_level(*level)?;
                if sp.parallel.is_some() {
                    return Err(ScheduleError::DuplicateParallelize);
                }
                sp.parallel = Some(sp.current[*level].name.clone());
            }
        }
        sp.applied.push(t.clone());
        sp.relevel();
        Ok(sp)
    }

    /// Records unrolling of the innermost loop by `u`. `u = 0` returns the
    /// program unchanged. A factor larger than the innermost extent leaves
    /// the main loop empty and the whole loop in the epilogue.
    pub fn apply_unroll(&self, u: UnrollFactor) -> Result<ScheduledProgram, ScheduleError> {
        if !u.is_applied() {
            return Ok(self.clone());
        }
        if let Some(last) = self.current.last() {
            if (u.get() as i64) > last.extent() {
                log::warn!(
                    "unroll factor {u} exceeds innermost extent {} of `{}`",
                    last.extent(),
                    self.base.name
                );
            }
        }
        self.apply_transform(&Transform::Unroll(u.get()))
    }

    /// Removes any unroll, keeping the other transforms.
    pub fn without_unroll(&self) -> ScheduledProgram {
        if !self.unroll.is_applied() {
            return self.clone();
        }
        let mut sp = self.clone();
        sp.unroll = UnrollFactor::NONE;
        sp.applied.retain(|t| !matches!(t, Transform::Unroll(_)));
        sp.relevel();
        sp
    }

    /// Inverse of a split: merges the outer level at `level` with the inner
    /// level at `level + 1` back into the iterator they came from.
    pub fn unsplit(&self, level: usize) -> Result<ScheduledProgram, ScheduleError> {
        self.check_level(level + 1)?;
        let outer = &self.current[level].name;
        let inner = &self.current[level + 1].name;
        let idx = self
            .splits
            .iter()
            .position(|r| &r.outer == outer && &r.inner == inner)
            .ok_or(ScheduleError::UnknownLevel(level))?;
        let mut sp = self.clone();
        let rec = sp.splits.remove(idx);
        let merge = |aff: &mut Affine| {
            let k = aff.coeff(&rec.inner);
            if k != 0 && aff.coeff(&rec.outer) == k * rec.factor {
                aff.terms.retain(|(n, _)| n != &rec.inner && n != &rec.outer);
                aff.add_term(&rec.original.name, k);
                aff.constant -= k * rec.original.lower;
            }
        };
        if rec.guarded {
            let pos = sp.guards.iter().rposition(|g| {
                g.bound == rec.original.extent()
                    && g.expr.coeff(&rec.inner) == 1
                    && g.expr.coeff(&rec.outer) == rec.factor
                    && g.expr.terms.len() == 2
            });
            if let Some(pos) = pos {
                sp.guards.remove(pos);
            }
        }
        for (_, aff) in &mut sp.origin {
            merge(aff);
        }
        for g in &mut sp.guards {
            merge(&mut g.expr);
        }
        sp.current.splice(level..=level + 1, [rec.original.clone()]);
        sp.tile_factors.splice(level..=level + 1, [0]);
        if sp.parallel.as_deref() == Some(rec.outer.as_str())
            || sp.parallel.as_deref() == Some(rec.inner.as_str())
        {
            sp.parallel = Some(rec.original.name.clone());
        }
        sp.relevel();
        Ok(sp)
    }

    pub fn validate(&self) -> ValidationReport<ScheduleViolation> {
        validate_schedule(&self.base, &self.schedule())
    }
}

fn check_tile_factor(f: u32) -> Result<(), ScheduleError> {
    if !f.is_power_of_two() {
        return Err(ScheduleError::FactorNotPowerOfTwo(f));
    }
    if !(MIN_TILE_FACTOR..=MAX_TILE_FACTOR).contains(&f) {
        return Err(ScheduleError::FactorOutOfRange(f));
    }
    Ok(())
}

fn check_unroll_factor(u: u32) -> Result<UnrollFactor, ScheduleError> {
    if u != 0 && !u.is_power_of_two() {
        return Err(ScheduleError::FactorNotPowerOfTwo(u));
    }
    UnrollFactor::new(u)
}

fn check_adjacent(levels: &[usize]) -> Result<(), ScheduleError> {
    if levels.windows(2).all(|w| w[1] == w[0] + 1) {
        Ok(())
    } else {
        Err(ScheduleError::NotAdjacent(levels.to_vec()))
    }
}

pub fn apply_transform(
    sp: &ScheduledProgram,
    t: &Transform,
) -> Result<ScheduledProgram, ScheduleError> {
    sp.apply_transform(t)
}

pub fn apply_unroll(
    sp: &ScheduledProgram,
    u: UnrollFactor,
) -> Result<ScheduledProgram, ScheduleError> {
    sp.apply_unroll(u)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ScheduleViolation {
    FactorNotPowerOfTwo { transform: usize, factor: u32 },
    FactorOutOfRange { transform: usize, factor: u32 },
    InvalidUnrollFactor { transform: usize, factor: u32 },
    MultipleUnroll,
    MultipleParallelize,
    UnknownLevel { transform: usize, level: usize },
    NotAdjacent { transform: usize },
}

impl fmt::Display for ScheduleViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ScheduleViolation::FactorNotPowerOfTwo { transform, factor } => {
                write!(f, "transform #{transform}: factor {factor} is not a power of two")
            }
            ScheduleViolation::FactorOutOfRange { transform, factor } => {
                write!(f, "transform #{transform}: factor {factor} out of range")
            }
            ScheduleViolation::InvalidUnrollFactor { transform, factor } => {
                write!(f, "transform #{transform}: unroll factor {factor} not in the class set")
            }
            ScheduleViolation::MultipleUnroll => f.write_str("at most one Unroll"),
            ScheduleViolation::MultipleParallelize => f.write_str("at most one Parallelize"),
            ScheduleViolation::UnknownLevel { transform, level } => {
                write!(f, "transform #{transform}: unknown level {level}")
            }
            ScheduleViolation::NotAdjacent { transform } => {
                write!(f, "transform #{transform}: tiled levels must be adjacent")
            }
        }
    }
}

/// Checks factor constraints, single unroll / parallelize, and level
/// references by replaying `schedule` over `program`.
pub fn validate_schedule(
    program: &Program,
    schedule: &Schedule,
) -> ValidationReport<ScheduleViolation> {
    let mut violations = Vec::new();
    let unrolls = schedule
        .iter()
        .filter(|t| matches!(t, Transform::Unroll(_)))
        .count();
    let parallels = schedule
        .iter()
        .filter(|t| matches!(t, Transform::Parallelize(_)))
        .count();
    if unrolls > 1 {
        violations.push(ScheduleViolation::MultipleUnroll);
    }
    if parallels > 1 {
        violations.push(ScheduleViolation::MultipleParallelize);
    }
    let mut sp = ScheduledProgram::new(program.clone());
    for (i, t) in schedule.iter().enumerate() {
        match sp.apply_transform(t) {
            Ok(next) => sp = next,
            Err(e) => match e {
                ScheduleError::FactorNotPowerOfTwo(factor) => {
                    violations.push(ScheduleViolation::FactorNotPowerOfTwo { transform: i, factor })
                }
                ScheduleError::FactorOutOfRange(factor) => {
                    violations.push(ScheduleViolation::FactorOutOfRange { transform: i, factor })
                }
                ScheduleError::InvalidFactor(factor) => violations
                    .push(ScheduleViolation::InvalidUnrollFactor { transform: i, factor }),
                ScheduleError::UnknownLevel(level) => {
                    violations.push(ScheduleViolation::UnknownLevel { transform: i, level })
                }
                ScheduleError::NotAdjacent(_) => {
                    violations.push(ScheduleViolation::NotAdjacent { transform: i })
                }
                // Already counted above.
                ScheduleError::DuplicateUnroll | ScheduleError::DuplicateParallelize => {}
            },
        }
    }
    ValidationReport { violations }
}
