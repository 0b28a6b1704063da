//! Independent reference evaluators used as test oracles.

#![allow(dead_code)]

use std::collections::{HashMap, HashSet};

use rand::Rng;
use unroll_tuner::generator::{gen_program, rng_for, GenConfig};
use unroll_tuner::interp::input_value;
use unroll_tuner::{BufferAccess, Expr, Program, Scalar, MAX_DEPTH};

/// Generated program of depth 1..=3 with every extent redrawn in `1..=max_extent`.
pub fn small_program(seed: u64, index: u64, max_extent: i64) -> Program {
    let cfg = GenConfig {
        seed,
        depth_range: (1, 3),
        extent_choices: vec![2, 4, 8],
        max_leaves: 12,
        ..GenConfig::default()
    };
    let mut p = gen_program(&cfg, index);
    let mut rng = rng_for(seed, index, 99);
    for it in &mut p.iterators {
        it.upper = it.lower + rng.random_range(1..=max_extent);
    }
    p
}

/// Every point of the box `iters[k].lower..iters[k].upper`, outermost first.
pub fn points(bounds: &[(i64, i64)]) -> Vec<Vec<i64>> {
    let mut out = vec![Vec::new()];
    for &(lo, hi) in bounds {
        out = out
            .into_iter()
            .flat_map(|prefix| {
                (lo..hi).map(move |v| {
                    let mut q = prefix.clone();
                    q.push(v);
                    q
                })
            })
            .collect();
    }
    out
}

fn index_of(a: &BufferAccess, env: &HashMap<&str, i64>) -> Vec<i64> {
    a.indices
        .iter()
        .map(|s| s.iterators.iter().map(|n| env[n.as_str()]).sum::<i64>() + s.offset)
        .collect()
}

fn loads(e: &Expr, out: &mut Vec<BufferAccess>) {
    match e {
        Expr::Access(a) => out.push(a.clone()),
        Expr::Constant(_) => {}
        Expr::BinOp { lhs, rhs, .. } => {
            loads(lhs, out);
            loads(rhs, out);
        }
    }
}

/// Distinct elements touched per level: for level `L` the outer levels are
/// pinned to their lower bounds, the levels `>= L` are enumerated, and each
/// load occurrence mentioning one of those levels contributes the number of
/// distinct elements it reads.
pub fn distinct_loads_per_level(p: &Program) -> [u64; MAX_DEPTH] {
    let mut acc = Vec::new();
    loads(&p.body, &mut acc);
    let mut out = [0u64; MAX_DEPTH];
    for level in 0..p.iterators.len() {
        let inner: Vec<&str> = p.iterators[level..].iter().map(|i| i.name.as_str()).collect();
        let bounds: Vec<(i64, i64)> = p.iterators[level..].iter().map(|i| (i.lower, i.upper)).collect();
        let mut sets: Vec<HashSet<Vec<i64>>> = vec![HashSet::new(); acc.len()];
        for pt in points(&bounds) {
            let mut env: HashMap<&str, i64> = p.iterators[..level].iter().map(|i| (i.name.as_str(), i.lower)).collect();
            env.extend(inner.iter().copied().zip(pt));
            for (k, a) in acc.iter().enumerate() {
                if a.indices.iter().any(|s| s.iterators.iter().any(|n| inner.contains(&n.as_str()))) {
                    sets[k].insert(index_of(a, &env));
                }
            }
        }
        out[level] = sets.iter().map(|s| s.len() as u64).sum();
    }
    out
}

/// Evaluates the unscheduled nest point by point with row-major buffers.
pub fn reference_output(p: &Program) -> Vec<Scalar> {
    let decls = p.buffers();
    let mut bufs: HashMap<String, (Vec<i64>, Vec<Scalar>)> = HashMap::new();
    for (k, (name, dt, is_out)) in decls.iter().enumerate() {
        let shape = p.buffer_shape(name).unwrap_or_default();
        let len: i64 = shape.iter().product();
        let data = (0..len as usize)
            .map(|f| if *is_out { Scalar::from_i64(0, *dt) } else { Scalar::from_i64(input_value(k, f), *dt) })
            .collect();
        bufs.insert(name.clone(), (shape, data));
    }
    let flat = |shape: &[i64], idx: &[i64]| -> usize {
        idx.iter().zip(shape).fold(0i64, |f, (i, n)| f * n + i) as usize
    };
    fn eval(
        e: &Expr,
        env: &HashMap<&str, i64>,
        bufs: &HashMap<String, (Vec<i64>, Vec<Scalar>)>,
        flat: &dyn Fn(&[i64], &[i64]) -> usize,
    ) -> Scalar {
        match e {
            Expr::Constant(c) => *c,
            Expr::Access(a) => {
                let (shape, data) = &bufs[&a.buffer];
                data[flat(shape, &index_of(a, env))]
            }
            Expr::BinOp { kind, lhs, rhs } => {
                Scalar::apply(*kind, eval(lhs, env, bufs, flat), eval(rhs, env, bufs, flat))
            }
        }
    }
    let bounds: Vec<(i64, i64)> = p.iterators.iter().map(|i| (i.lower, i.upper)).collect();
    for pt in points(&bounds) {
        let env: HashMap<&str, i64> = p.iterators.iter().map(|i| i.name.as_str()).zip(pt).collect();
        let v = eval(&p.body, &env, &bufs, &flat);
        let idx = index_of(&p.output, &env);
        let (shape, data) = bufs.get_mut(&p.output.buffer).unwrap();
        let f = flat(shape, &idx);
        data[f] = v;
    }
    bufs.remove(&p.output.buffer).unwrap().1
}
