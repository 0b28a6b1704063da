//! Reference interpreter for scheduled loop nests.
//!
//! Executes the transformed nest literally: loops run over the current
//! levels, guards skip out-of-domain points, and an unrolled innermost loop
//! runs `floor(N/u)` main trips with the body replicated `u` times followed
//! by an epilogue over the remaining `N mod u` iterations. Inputs are filled
//! with a deterministic pattern shared with the emitted C kernels.

use std::collections::HashMap;

use crate::ir::{BinOpKind, DataType, Expr, Program, Scalar};
use crate::schedule::{Affine, ScheduledProgram};

/// Deterministic input value for element `flat` of input buffer number
/// `buffer_index`; always in `1..=11`.
pub fn input_value(buffer_index: usize, flat: usize) -> i64 {
    ((flat * 7 + buffer_index * 5 + 3) % 11) as i64 + 1
}

/// FNV-1a offset basis and prime.
pub const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
pub const FNV_PRIME: u64 = 0x0100_0000_01b3;

/// FNV-1a over the little-endian bytes of each element.
pub fn checksum(values: &[Scalar]) -> u64 {
    let mut h = FNV_OFFSET;
    for v in values {
        for b in v.to_le_bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(FNV_PRIME);
        }
    }
    h
}

/// Linear address as an affine form over the current loop levels.
#[derive(Debug, Clone)]
struct LinearAccess {
    buffer: usize,
    constant: i64,
    coeffs: Vec<i64>,
}

impl LinearAccess {
    fn addr(&self, vals: &[i64]) -> usize {
        let a = self.constant
            + self
                .coeffs
                .iter()
                .zip(vals)
                .map(|(c, v)| c * v)
                .sum::<i64>();
        a as usize
    }
}

enum Node {
    Const(Scalar),
    Load(LinearAccess),
    Bin(BinOpKind, Box<Node>, Box<Node>),
}

struct Compiled {
    levels: Vec<(i64, i64)>,
    guards: Vec<(Vec<i64>, i64, i64)>,
    body: Node,
    store: LinearAccess,
}

/// Buffer contents after execution.
#[derive(Debug, Clone, PartialEq)]
pub struct ExecutionResult {
    /// Buffers in [`Program::buffers`] order, flattened row-major.
    pub buffers: Vec<(String, Vec<Scalar>)>,
    /// Flat output index of every store, in execution order.
    pub store_trace: Vec<usize>,
}

impl ExecutionResult {
    pub fn output(&self) -> &[Scalar] {
        &self.buffers.last().unwrap().1
    }

    pub fn buffer(&self, name: &str) -> Option<&[Scalar]> {
        self.buffers
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| v.as_slice())
    }

    pub fn output_checksum(&self) -> u64 {
        checksum(self.output())
    }
}

/// Row-major strides for a shape.
pub fn strides(shape: &[i64]) -> Vec<i64> {
    let mut s = vec![1i64; shape.len()];
    for d in (0..shape.len().saturating_sub(1)).rev() {
        s[d] = s[d + 1] * shape[d + 1];
    }
    s
}

/// Address of `subscripts` of a buffer as an affine form over current levels.
pub(crate) fn linearize(
    sp: &ScheduledProgram,
    access: &crate::ir::BufferAccess,
) -> (i64, Vec<i64>) {
    let p = sp.base();
    let shape = p.buffer_shape(&access.buffer).expect("buffer is accessed");
    let st = strides(&shape);
    let mut total = Affine {
        constant: 0,
        terms: vec![],
    };
    for (d, sub) in access.indices.iter().enumerate() {
        total.constant += st[d] * sub.offset;
        for name in &sub.iterators {
            let aff = sp.origin_of(name).expect("validated iterator");
            total.constant += st[d] * aff.constant;
            for (n, c) in &aff.terms {
                total.terms.push((n.clone(), st[d] * c));
            }
        }
    }
    let coeffs = sp
        .current_iterators()
        .iter()
        .map(|it| total.coeff(&it.name))
        .collect();
    (total.constant, coeffs)
}

fn compile(sp: &ScheduledProgram) -> Compiled {
    let p = sp.base();
    let names: Vec<String> = p.buffers().into_iter().map(|(n, _, _)| n).collect();
    let buf_index: HashMap<&str, usize> = names
        .iter()
        .enumerate()
        .map(|(i, n)| (n.as_str(), i))
        .collect();
    let access = |a: &crate::ir::BufferAccess| {
        let (constant, coeffs) = linearize(sp, a);
        LinearAccess {
            buffer: buf_index[a.buffer.as_str()],
            constant,
            coeffs,
        }
    };
    fn build(e: &Expr, access: &dyn Fn(&crate::ir::BufferAccess) -> LinearAccess) -> Node {
        match e {
            Expr::Constant(c) => Node::Const(*c),
            Expr::Access(a) => Node::Load(access(a)),
            Expr::BinOp { kind, lhs, rhs } => Node::Bin(
                *kind,
                Box::new(build(lhs, access)),
                Box::new(build(rhs, access)),
            ),
        }
    }
    let guards = sp
        .guards()
        .iter()
        .map(|g| {
            let coeffs = sp
                .current_iterators()
                .iter()
                .map(|it| g.expr.coeff(&it.name))
                .collect();
            (coeffs, g.expr.constant, g.bound)
        })
        .collect();
    Compiled {
        levels: sp
            .current_iterators()
            .iter()
            .map(|it| (it.lower, it.upper))
            .collect(),
        guards,
        body: build(&p.body, &access),
        store: access(&p.output),
    }
}

fn eval(node: &Node, vals: &[i64], bufs: &[Vec<Scalar>]) -> Scalar {
    match node {
        Node::Const(c) => *c,
        Node::Load(a) => bufs[a.buffer][a.addr(vals)],
        Node::Bin(k, l, r) => Scalar::apply(*k, eval(l, vals, bufs), eval(r, vals, bufs)),
    }
}

/// Allocates and fills the buffers of `p`: inputs get [`input_value`],
/// the output is zeroed.
pub fn init_buffers(p: &Program) -> Vec<(String, Vec<Scalar>)> {
    p.buffers()
        .into_iter()
        .enumerate()
        .map(|(k, (name, dt, is_output))| {
            let len: i64 = p
                .buffer_shape(&name)
                .map(|s| s.iter().product())
                .unwrap_or(1);
            let data = (0..len as usize)
                .map(|f| {
                    if is_output {
                        Scalar::zero(dt)
                    } else {
                        Scalar::from_i64(input_value(k, f), dt)
                    }
                })
                .collect();
            (name, data)
        })
        .collect()
}

/// Runs the scheduled nest to completion.
pub fn execute(sp: &ScheduledProgram) -> ExecutionResult {
    let compiled = compile(sp);
    let mut named = init_buffers(sp.base());
    let mut bufs: Vec<Vec<Scalar>> = named.iter_mut().map(|(_, v)| std::mem::take(v)).collect();
    let mut trace = Vec::new();
    let depth = compiled.levels.len();
    let mut vals: Vec<i64> = compiled.levels.iter().map(|(lo, _)| *lo).collect();
    let unroll = sp.unroll().effective() as i64;

    let mut run_body = |vals: &[i64], bufs: &mut Vec<Vec<Scalar>>| {
        for (coeffs, c0, bound) in &compiled.guards {
            let v = c0 + coeffs.iter().zip(vals).map(|(a, b)| a * b).sum::<i64>();
            if v < 0 || v >= *bound {
                return;
            }
        }
        let value = eval(&compiled.body, vals, bufs);
        let addr = compiled.store.addr(vals);
        bufs[compiled.store.buffer][addr] = value;
        trace.push(addr);
    };

    if compiled.levels.iter().all(|(lo, hi)| hi > lo) {
        'outer: loop {
            // innermost loop: main trips with replicated body, then epilogue
            let (lo, hi) = compiled.levels[depth - 1];
            let n = hi - lo;
            let main = n / unroll;
            for t in 0..main {
                for r in 0..unroll {
                    vals[depth - 1] = lo + t * unroll + r;
                    run_body(&vals, &mut bufs);
                }
            }
            for v in lo + main * unroll..hi {
                vals[depth - 1] = v;
                run_body(&vals, &mut bufs);
            }
            // advance the outer levels odometer-style
            let mut l = depth - 1;
            loop {
                if l == 0 {
                    break 'outer;
                }
                l -= 1;
                vals[l] += 1;
                if vals[l] < compiled.levels[l].1 {
                    break;
                }
                vals[l] = compiled.levels[l].0;
            }
        }
    }

    for ((_, slot), data) in named.iter_mut().zip(bufs) {
        *slot = data;
    }
    ExecutionResult {
        buffers: named,
        store_trace: trace,
    }
}

/// Interprets the untransformed program.
pub fn execute_program(p: &Program) -> ExecutionResult {
    execute(&ScheduledProgram::new(p.clone()))
}

/// True when two outputs agree: bit-exact for integers, within `tol`
/// relative for floats (NaN matches NaN).
pub fn outputs_match(a: &[Scalar], b: &[Scalar], tol: f64) -> bool {
    a.len() == b.len()
        && a.iter().zip(b).all(|(x, y)| match (x.dtype(), y.dtype()) {
            (DataType::Int32, DataType::Int32) | (DataType::Int64, DataType::Int64) => x == y,
            _ => {
                let (x, y) = (x.as_f64(), y.as_f64());
                x == y
                    || (x.is_nan() && y.is_nan())
                    || (x - y).abs() <= tol * x.abs().max(y.abs()).max(1.0)
            }
        })
}
