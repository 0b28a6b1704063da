//! Affine loop-nest IR for perfectly nested, single-computation programs.
//!
//! A [`Program`] is an ordered list of loop iterators (outer to inner) with
//! constant bounds, a single expression evaluated at the innermost level and a
//! single output store. Subscripts are sums of iterators plus a constant
//! offset, which covers stencils (`in[x+1, y]`) and convolution windows
//! (`in[y1+ky, x1+kx]`).

use std::collections::{BTreeSet, HashMap};
use std::fmt;

use serde::{Deserialize, Serialize};

/// Element type of buffers and constants.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum DataType {
    Int32,
    Int64,
    Float32,
    Float64,
}

impl DataType {
    pub const ALL: [DataType; 4] = [
        DataType::Int32,
        DataType::Int64,
        DataType::Float32,
        DataType::Float64,
    ];

    /// Numeric code used in feature rows.
    pub fn code(self) -> u64 {
        match self {
            DataType::Int32 => 0,
            DataType::Int64 => 1,
            DataType::Float32 => 2,
            DataType::Float64 => 3,
        }
    }

    pub fn index(self) -> usize {
        self.code() as usize
    }

    pub fn is_float(self) -> bool {
        matches!(self, DataType::Float32 | DataType::Float64)
    }

    /// Short name used by the text format (`i32`, `i64`, `f32`, `f64`).
    pub fn short_name(self) -> &'static str {
        match self {
            DataType::Int32 => "i32",
            DataType::Int64 => "i64",
            DataType::Float32 => "f32",
            DataType::Float64 => "f64",
        }
    }

    pub fn from_short_name(s: &str) -> Option<DataType> {
        DataType::ALL.into_iter().find(|d| d.short_name() == s)
    }

    /// Size of one element in bytes.
    pub fn width(self) -> usize {
        match self {
            DataType::Int32 | DataType::Float32 => 4,
            DataType::Int64 | DataType::Float64 => 8,
        }
    }
}

impl fmt::Display for DataType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.short_name())
    }
}

/// A typed scalar value. Integer arithmetic wraps and division by zero
/// yields zero, so every program has a defined result.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Scalar {
    I32(i32),
    I64(i64),
    F32(f32),
    F64(f64),
}

impl Scalar {
    pub fn dtype(self) -> DataType {
        match self {
            Scalar::I32(_) => DataType::Int32,
            Scalar::I64(_) => DataType::Int64,
            Scalar::F32(_) => DataType::Float32,
            Scalar::F64(_) => DataType::Float64,
        }
    }

    pub fn zero(dtype: DataType) -> Scalar {
        Scalar::from_i64(0, dtype)
    }

    pub fn from_i64(v: i64, dtype: DataType) -> Scalar {
        match dtype {
            DataType::Int32 => Scalar::I32(v as i32),
            DataType::Int64 => Scalar::I64(v),
            DataType::Float32 => Scalar::F32(v as f32),
            DataType::Float64 => Scalar::F64(v as f64),
        }
    }

    /// Little-endian bytes of the value at its native width.
    pub fn to_le_bytes(self) -> Vec<u8> {
        match self {
            Scalar::I32(v) => v.to_le_bytes().to_vec(),
            Scalar::I64(v) => v.to_le_bytes().to_vec(),
            Scalar::F32(v) => v.to_bits().to_le_bytes().to_vec(),
            Scalar::F64(v) => v.to_bits().to_le_bytes().to_vec(),
        }
    }

    pub fn as_f64(self) -> f64 {
        match self {
            Scalar::I32(v) => v as f64,
            Scalar::I64(v) => v as f64,
            Scalar::F32(v) => v as f64,
            Scalar::F64(v) => v,
        }
    }

    /// Applies a binary operator. Both operands must share a dtype.
    pub fn apply(kind: BinOpKind, a: Scalar, b: Scalar) -> Scalar {
        use BinOpKind::*;
        match (a, b) {
            (Scalar::I32(x), Scalar::I32(y)) => Scalar::I32(match kind {
                Add => x.wrapping_add(y),
                Sub => x.wrapping_sub(y),
                Mul => x.wrapping_mul(y),
                Div => {
                    if y == 0 {
                        0
                    } else {
                        x.wrapping_div(y)
                    }
                }
            }),
            (Scalar::I64(x), Scalar::I64(y)) => Scalar::I64(match kind {
                Add => x.wrapping_add(y),
                Sub => x.wrapping_sub(y),
                Mul => x.wrapping_mul(y),
                Div => {
                    if y == 0 {
                        0
                    } else {
                        x.wrapping_div(y)
                    }
                }
            }),
            (Scalar::F32(x), Scalar::F32(y)) => Scalar::F32(match kind {
                Add => x + y,
                Sub => x - y,
                Mul => x * y,
                Div => x / y,
            }),
            (Scalar::F64(x), Scalar::F64(y)) => Scalar::F64(match kind {
                Add => x + y,
                Sub => x - y,
                Mul => x * y,
                Div => x / y,
            }),
            _ => panic!("mixed-type arithmetic: {a:?} {kind:?} {b:?}"),
        }
    }
}

impl fmt::Display for Scalar {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Scalar::I32(v) => write!(f, "{v}"),
            Scalar::I64(v) => write!(f, "{v}"),
            Scalar::F32(v) => write!(f, "{v:?}"),
            Scalar::F64(v) => write!(f, "{v:?}"),
        }
    }
}

/// A loop level with constant bounds `lower..upper`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LoopIterator {
    pub name: String,
    pub lower: i64,
    /// Exclusive.
    pub upper: i64,
    /// 0 is the outermost level.
    pub level: usize,
}

impl LoopIterator {
    pub fn new(name: impl Into<String>, lower: i64, upper: i64, level: usize) -> Self {
        Self {
            name: name.into(),
            lower,
            upper,
            level,
        }
    }

    pub fn extent(&self) -> i64 {
        self.upper - self.lower
    }
}

/// One dimension of a buffer subscript: `sum(iterators) + offset`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Subscript {
    pub iterators: Vec<String>,
    pub offset: i64,
}

impl Subscript {
    pub fn iter(name: impl Into<String>) -> Self {
        Self {
            iterators: vec![name.into()],
            offset: 0,
        }
    }

    pub fn iter_offset(name: impl Into<String>, offset: i64) -> Self {
        Self {
            iterators: vec![name.into()],
            offset,
        }
    }

    pub fn sum(names: &[&str], offset: i64) -> Self {
        Self {
            iterators: names.iter().map(|s| s.to_string()).collect(),
            offset,
        }
    }
}

impl fmt::Display for Subscript {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut first = true;
        for it in &self.iterators {
            if !first {
                f.write_str("+")?;
            }
            f.write_str(it)?;
            first = false;
        }
        if first {
            write!(f, "{}", self.offset)
        } else {
            match self.offset {
                0 => Ok(()),
                o if o > 0 => write!(f, "+{o}"),
                o => write!(f, "{o}"),
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AccessMode {
    Load,
    Store,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BufferAccess {
    pub buffer: String,
    pub dtype: DataType,
    pub indices: Vec<Subscript>,
    pub mode: AccessMode,
}

impl BufferAccess {
    pub fn load(buffer: impl Into<String>, dtype: DataType, indices: Vec<Subscript>) -> Self {
        Self {
            buffer: buffer.into(),
            dtype,
            indices,
            mode: AccessMode::Load,
        }
    }

    pub fn store(buffer: impl Into<String>, dtype: DataType, indices: Vec<Subscript>) -> Self {
        Self {
            buffer: buffer.into(),
            dtype,
            indices,
            mode: AccessMode::Store,
        }
    }

    /// Distinct iterator names referenced by any subscript.
    pub fn iterator_names(&self) -> BTreeSet<&str> {
        self.indices
            .iter()
            .flat_map(|s| s.iterators.iter().map(String::as_str))
            .collect()
    }
}

impl fmt::Display for BufferAccess {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}[", self.buffer)?;
        for (i, s) in self.indices.iter().enumerate() {
            if i > 0 {
                f.write_str(", ")?;
            }
            write!(f, "{s}")?;
        }
        f.write_str("]")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum BinOpKind {
    Add,
    Sub,
    Mul,
    Div,
}

impl BinOpKind {
    pub const ALL: [BinOpKind; 4] = [BinOpKind::Add, BinOpKind::Sub, BinOpKind::Mul, BinOpKind::Div];

    pub fn symbol(self) -> char {
        match self {
            BinOpKind::Add => '+',
            BinOpKind::Sub => '-',
            BinOpKind::Mul => '*',
            BinOpKind::Div => '/',
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

/// Binary expression tree over loads and constants.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Expr {
    Constant(Scalar),
    Access(BufferAccess),
    BinOp {
        kind: BinOpKind,
        lhs: Box<Expr>,
        rhs: Box<Expr>,
    },
}

// two-operand constructors, not operator overloads
#[allow(clippy::should_implement_trait)]
impl Expr {
    pub fn binop(kind: BinOpKind, lhs: Expr, rhs: Expr) -> Expr {
        Expr::BinOp {
            kind,
            lhs: Box::new(lhs),
            rhs: Box::new(rhs),
        }
    }

    pub fn add(lhs: Expr, rhs: Expr) -> Expr {
        Expr::binop(BinOpKind::Add, lhs, rhs)
    }

    pub fn sub(lhs: Expr, rhs: Expr) -> Expr {
        Expr::binop(BinOpKind::Sub, lhs, rhs)
    }

    pub fn mul(lhs: Expr, rhs: Expr) -> Expr {
        Expr::binop(BinOpKind::Mul, lhs, rhs)
    }

    pub fn div(lhs: Expr, rhs: Expr) -> Expr {
        Expr::binop(BinOpKind::Div, lhs, rhs)
    }

    /// Visits every node in pre-order.
    pub fn walk<'a>(&'a self, f: &mut impl FnMut(&'a Expr)) {
        f(self);
        if let Expr::BinOp { lhs, rhs, .. } = self {
            lhs.walk(f);
            rhs.walk(f);
        }
    }

    /// Load accesses in left-to-right order.
    pub fn accesses(&self) -> Vec<&BufferAccess> {
        let mut out = Vec::new();
        self.walk(&mut |e| {
            if let Expr::Access(a) = e {
                out.push(a);
            }
        });
        out
    }

    pub fn leaf_count(&self) -> usize {
        match self {
            Expr::Constant(_) | Expr::Access(_) => 1,
            Expr::BinOp { lhs, rhs, .. } => lhs.leaf_count() + rhs.leaf_count(),
        }
    }
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fn go(e: &Expr, f: &mut fmt::Formatter<'_>, top: bool) -> fmt::Result {
            match e {
                Expr::Constant(c) => write!(f, "{c}"),
                Expr::Access(a) => write!(f, "{a}"),
                Expr::BinOp { kind, lhs, rhs } => {
                    if !top {
                        f.write_str("(")?;
                    }
                    go(lhs, f, false)?;
                    write!(f, " {} ", kind.symbol())?;
                    go(rhs, f, false)?;
                    if !top {
                        f.write_str(")")?;
                    }
                    Ok(())
                }
            }
        }
        go(self, f, true)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BufferDecl {
    pub name: String,
    pub rank: usize,
    pub dtype: DataType,
}

/// A single computation: `output[...] = body` inside the loop nest.
///
/// The body may load the output buffer itself, which expresses reductions
/// (the output starts zero-initialised).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Program {
    pub name: String,
    pub iterators: Vec<LoopIterator>,
    pub body: Expr,
    pub output: BufferAccess,
    pub inputs: Vec<BufferDecl>,
}

impl Program {
    /// Element type of the computation.
    pub fn dtype(&self) -> DataType {
        self.output.dtype
    }

    pub fn depth(&self) -> usize {
        self.iterators.len()
    }

    pub fn iterator(&self, name: &str) -> Option<&LoopIterator> {
        self.iterators.iter().find(|it| it.name == name)
    }

    /// Product of all iterator extents: the number of body evaluations.
    pub fn innermost_trip_count(&self) -> u64 {
        self.iterators
            .iter()
            .fold(1u64, |acc, it| acc.saturating_mul(it.extent().max(0) as u64))
    }

    pub fn op_histogram(&self) -> OpHistogram {
        let mut h = OpHistogram::default();
        let dt = self.dtype();
        self.body.walk(&mut |e| match e {
            Expr::BinOp { kind, .. } => h.add(OpKind::from(*kind), dt, 1),
            Expr::Access(a) => h.add(OpKind::Load, a.dtype, 1),
            Expr::Constant(_) => {}
        });
        h.add(OpKind::Store, self.output.dtype, 1);
        h
    }

    /// Buffer extents per dimension, derived from the largest subscript
    /// value reached by any access to the buffer.
    pub fn buffer_shape(&self, buffer: &str) -> Option<Vec<i64>> {
        let mut shape: Option<Vec<i64>> = None;
        let mut visit = |a: &BufferAccess| {
            if a.buffer != buffer {
                return;
            }
            let dims: Vec<i64> = a
                .indices
                .iter()
                .map(|s| {
                    let max: i64 = s
                        .iterators
                        .iter()
                        .map(|n| self.iterator(n).map(|it| it.upper - 1).unwrap_or(0))
                        .sum();
                    max + s.offset + 1
                })
                .collect();
            match &mut shape {
                None => shape = Some(dims),
                Some(cur) => {
                    for (c, d) in cur.iter_mut().zip(dims) {
                        *c = (*c).max(d);
                    }
                }
            }
        };
        for a in self.body.accesses() {
            visit(a);
        }
        visit(&self.output);
        shape.map(|s| s.into_iter().map(|d| d.max(1)).collect())
    }

    /// Declared buffers in a stable order: inputs first, then the output.
    pub fn buffers(&self) -> Vec<(String, DataType, bool)> {
        let mut v: Vec<(String, DataType, bool)> = self
            .inputs
            .iter()
            .map(|d| (d.name.clone(), d.dtype, false))
            .collect();
        v.push((self.output.buffer.clone(), self.output.dtype, true));
        v
    }

    pub fn validate(&self) -> ValidationReport {
        validate_program(self)
    }
}

/// Rows of the operation histogram.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OpKind {
    Add,
    Sub,
    Mul,
    Div,
    Load,
    Store,
}

impl OpKind {
    pub const ALL: [OpKind; 6] = [
        OpKind::Add,
        OpKind::Sub,
        OpKind::Mul,
        OpKind::Div,
        OpKind::Load,
        OpKind::Store,
    ];
}

impl From<BinOpKind> for OpKind {
    fn from(k: BinOpKind) -> Self {
        match k {
            BinOpKind::Add => OpKind::Add,
            BinOpKind::Sub => OpKind::Sub,
            BinOpKind::Mul => OpKind::Mul,
            BinOpKind::Div => OpKind::Div,
        }
    }
}

/// Static per-iteration operation counts, by op kind and data type.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct OpHistogram {
    counts: [[u64; 4]; 6],
}

impl OpHistogram {
    fn add(&mut self, op: OpKind, dt: DataType, n: u64) {
        self.counts[op as usize][dt.index()] += n;
    }

    pub fn get(&self, op: OpKind, dt: DataType) -> u64 {
        self.counts[op as usize][dt.index()]
    }

    /// Count of `op` summed over data types.
    pub fn row_total(&self, op: OpKind) -> u64 {
        self.counts[op as usize].iter().sum()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }
}

pub fn op_histogram(p: &Program) -> OpHistogram {
    p.op_histogram()
}

pub fn innermost_trip_count(p: &Program) -> u64 {
    p.innermost_trip_count()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Violation {
    DanglingIterator { buffer: String, iterator: String },
    RankMismatch { buffer: String, expected: usize, found: usize },
    NonPositiveExtent { iterator: String },
    DtypeConflict { detail: String },
    UnknownBuffer { buffer: String },
    DuplicateIterator { iterator: String },
    BadLevel { iterator: String, level: usize },
    NegativeSubscript { buffer: String },
    WrongAccessMode { buffer: String },
    EmptyNest,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::DanglingIterator { buffer, iterator } => {
                write!(f, "dangling iterator `{iterator}` in access to `{buffer}`")
            }
            Violation::RankMismatch {
                buffer,
                expected,
                found,
            } => write!(
                f,
                "rank mismatch on `{buffer}`: declared {expected}, accessed with {found}"
            ),
            Violation::NonPositiveExtent { iterator } => {
                write!(f, "non-positive extent for iterator `{iterator}`")
            }
            Violation::DtypeConflict { detail } => write!(f, "dtype conflict: {detail}"),
            Violation::UnknownBuffer { buffer } => write!(f, "unknown buffer `{buffer}`"),
            Violation::DuplicateIterator { iterator } => {
                write!(f, "duplicate iterator `{iterator}`")
            }
            Violation::BadLevel { iterator, level } => {
                write!(f, "iterator `{iterator}` has inconsistent level {level}")
            }
            Violation::NegativeSubscript { buffer } => {
                write!(f, "subscript of `{buffer}` can be negative")
            }
            Violation::WrongAccessMode { buffer } => {
                write!(f, "access to `{buffer}` has the wrong load/store mode")
            }
            Violation::EmptyNest => f.write_str("program has no loop levels"),
        }
    }
}

/// Outcome of a validation pass; empty means valid.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ValidationReport<V = Violation> {
    pub violations: Vec<V>,
}

impl<V> ValidationReport<V> {
    pub fn is_ok(&self) -> bool {
        self.violations.is_empty()
    }
}

impl<V: fmt::Display> fmt::Display for ValidationReport<V> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.violations.is_empty() {
            return f.write_str("ok");
        }
        for (i, v) in self.violations.iter().enumerate() {
            if i > 0 {
                f.write_str("; ")?;
            }
            write!(f, "{v}")?;
        }
        Ok(())
    }
}

pub fn validate_program(p: &Program) -> ValidationReport {
    let mut violations = Vec::new();
    if p.iterators.is_empty() {
        violations.push(Violation::EmptyNest);
    }
    let mut seen = BTreeSet::new();
    for (pos, it) in p.iterators.iter().enumerate() {
        if !seen.insert(it.name.as_str()) {
            violations.push(Violation::DuplicateIterator {
                iterator: it.name.clone(),
            });
        }
        if it.level != pos {
            violations.push(Violation::BadLevel {
                iterator: it.name.clone(),
                level: it.level,
            });
        }
        if it.upper <= it.lower {
            violations.push(Violation::NonPositiveExtent {
                iterator: it.name.clone(),
            });
        }
    }

    let dtype = p.dtype();
    let mut ranks: HashMap<&str, (usize, DataType)> = p
        .inputs
        .iter()
        .map(|d| (d.name.as_str(), (d.rank, d.dtype)))
        .collect();
    if ranks.contains_key(p.output.buffer.as_str()) {
        violations.push(Violation::DtypeConflict {
            detail: format!("output `{}` is also declared as an input", p.output.buffer),
        });
    }
    ranks.insert(p.output.buffer.as_str(), (p.output.indices.len(), p.output.dtype));
    for d in &p.inputs {
        if d.dtype != dtype {
            violations.push(Violation::DtypeConflict {
                detail: format!("input `{}` is {} but program is {}", d.name, d.dtype, dtype),
            });
        }
    }

    let mut check_access = |a: &BufferAccess, want: AccessMode| {
        if a.mode != want {
            violations.push(Violation::WrongAccessMode {
                buffer: a.buffer.clone(),
            });
        }
        match ranks.get(a.buffer.as_str()) {
            None => violations.push(Violation::UnknownBuffer {
                buffer: a.buffer.clone(),
            }),
            Some(&(rank, dt)) => {
                if rank != a.indices.len() {
                    violations.push(Violation::RankMismatch {
                        buffer: a.buffer.clone(),
                        expected: rank,
                        found: a.indices.len(),
                    });
                }
                if dt != a.dtype {
                    violations.push(Violation::DtypeConflict {
                        detail: format!("access to `{}` typed {} but buffer is {}", a.buffer, a.dtype, dt),
                    });
                }
            }
        }
        for s in &a.indices {
            let mut min = s.offset;
            for n in &s.iterators {
                match p.iterator(n) {
                    Some(it) => min += it.lower,
                    None => violations.push(Violation::DanglingIterator {
                        buffer: a.buffer.clone(),
                        iterator: n.clone(),
                    }),
                }
            }
            if min < 0 {
                violations.push(Violation::NegativeSubscript {
                    buffer: a.buffer.clone(),
                });
            }
        }
    };
    for a in p.body.accesses() {
        check_access(a, AccessMode::Load);
    }
    check_access(&p.output, AccessMode::Store);

    p.body.walk(&mut |e| {
        if let Expr::Constant(c) = e {
            if c.dtype() != dtype {
                violations.push(Violation::DtypeConflict {
                    detail: format!("constant {c} is {} but program is {}", c.dtype(), dtype),
                });
            }
        }
    });

    ValidationReport { violations }
}
