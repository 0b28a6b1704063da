//! Loop-nest IR, schedules, features and learned unroll-factor prediction.

pub mod backend;
pub mod baselines;
pub mod bench_programs;
pub mod config;
pub mod dataset;
pub mod eval;
pub mod featurize;
pub mod generator;
pub mod interp;
pub mod ir;
pub mod mlp;
pub mod schedule;
pub mod text;

pub use ir::{
    BinOpKind, BufferAccess, BufferDecl, DataType, Expr, LoopIterator, OpHistogram, OpKind, Program,
    Scalar, Subscript,
};
pub use schedule::{Schedule, ScheduleError, ScheduledProgram, Transform, UnrollFactor, MAX_DEPTH};
