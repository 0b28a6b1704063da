//! The five evaluation kernels, parameterised by size.

use crate::ir::{BufferAccess, BufferDecl, DataType, Expr, LoopIterator, Program, Scalar, Subscript};

const F64: DataType = DataType::Float64;

fn iters(names: &[(&str, i64)]) -> Vec<LoopIterator> {
    names
        .iter()
        .enumerate()
        .map(|(l, (n, e))| LoopIterator::new(*n, 0, *e, l))
        .collect()
}

fn input(name: &str, rank: usize) -> BufferDecl {
    BufferDecl {
        name: name.into(),
        rank,
        dtype: F64,
    }
}

fn load(buf: &str, idx: Vec<Subscript>) -> Expr {
    Expr::Access(BufferAccess::load(buf, F64, idx))
}

fn s(name: &str) -> Subscript {
    Subscript::iter(name)
}

fn c(v: f64) -> Expr {
    Expr::Constant(Scalar::F64(v))
}

/// Matrix product `mul[i0,i1] += M1[i0,i2] * M2[i2,i1]`.
pub fn mmxm(m: i64) -> Program {
    Program {
        name: "MMxM".into(),
        iterators: iters(&[("i0", m), ("i1", m), ("i2", m)]),
        body: Expr::add(
            load("mul", vec![s("i0"), s("i1")]),
            Expr::mul(
                load("M1", vec![s("i0"), s("i2")]),
                load("M2", vec![s("i2"), s("i1")]),
            ),
        ),
        output: BufferAccess::store("mul", F64, vec![s("i0"), s("i1")]),
        inputs: vec![input("M1", 2), input("M2", 2)],
    }
}

pub const SMM_ALPHA: f64 = 1.5;
pub const SMM_BETA: f64 = 0.5;

/// Scaled matrix sum `alpha*M1 + beta*M2`.
pub fn smm(m: i64) -> Program {
    Program {
        name: "SMM".into(),
        iterators: iters(&[("i0", m), ("i1", m)]),
        body: Expr::add(
            Expr::mul(c(SMM_ALPHA), load("M1", vec![s("i0"), s("i1")])),
            Expr::mul(c(SMM_BETA), load("M2", vec![s("i0"), s("i1")])),
        ),
        output: BufferAccess::store("add", F64, vec![s("i0"), s("i1")]),
        inputs: vec![input("M1", 2), input("M2", 2)],
    }
}

pub const GRAY_WEIGHTS: [f64; 3] = [0.299, 0.587, 0.114];

/// RGB to gray-level conversion.
pub fn rgb_gray(size: i64) -> Program {
    let [fr, fg, fb] = GRAY_WEIGHTS;
    Program {
        name: "RGB_gray".into(),
        iterators: iters(&[("x", size), ("y", size)]),
        body: Expr::add(
            Expr::add(
                Expr::mul(c(fr), load("r_input", vec![s("x"), s("y")])),
                Expr::mul(c(fg), load("g_input", vec![s("x"), s("y")])),
            ),
            Expr::mul(c(fb), load("b_input", vec![s("x"), s("y")])),
        ),
        output: BufferAccess::store("griser", F64, vec![s("x"), s("y")]),
        inputs: vec![input("r_input", 2), input("g_input", 2), input("b_input", 2)],
    }
}

/// Three-tap horizontal blur over a `size^3` volume.
pub fn blur(size: i64) -> Program {
    let tap = |off| {
        load(
            "in",
            vec![Subscript::iter_offset("x", off), s("y"), s("c")],
        )
    };
    Program {
        name: "Blur".into(),
        iterators: iters(&[("x", size), ("y", size), ("c", size)]),
        body: Expr::div(Expr::add(Expr::add(tap(0), tap(1)), tap(2)), c(3.0)),
        output: BufferAccess::store("blur", F64, vec![s("x"), s("y"), s("c")]),
        inputs: vec![input("in", 3)],
    }
}

/// Direct convolution with a 3x3 window:
/// `conv[n,z,y,x] += filter[z,kz,ky,kx] * in[n,kz,y+ky,x+kx]`.
pub fn conv_layer(batch: i64, channels: i64, height: i64, width: i64, filters: i64) -> Program {
    Program {
        name: "Conv_layer".into(),
        iterators: iters(&[
            ("n", batch),
            ("z", filters),
            ("y1", height),
            ("x1", width),
            ("k_z", channels),
            ("k_y", 3),
            ("k_x", 3),
        ]),
        body: Expr::add(
            load("conv", vec![s("n"), s("z"), s("y1"), s("x1")]),
            Expr::mul(
                load("filter", vec![s("z"), s("k_z"), s("k_y"), s("k_x")]),
                load(
                    "c_input",
                    vec![
                        s("n"),
                        s("k_z"),
                        Subscript::sum(&["y1", "k_y"], 0),
                        Subscript::sum(&["x1", "k_x"], 0),
                    ],
                ),
            ),
        ),
        output: BufferAccess::store("conv", F64, vec![s("n"), s("z"), s("y1"), s("x1")]),
        inputs: vec![input("c_input", 4), input("filter", 4)],
    }
}
