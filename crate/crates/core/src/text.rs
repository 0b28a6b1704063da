//! Line-oriented text format for programs and their schedules.
//!
//! ```text
//! # comment
//! program MMxM
//! iter i0 0 256
//! iter i1 0 256
//! iter i2 0 256
//! input M1 2 f64
//! input M2 2 f64
//! output mul[i0, i1] f64
//! body mul[i0, i1] + (M1[i0, i2] * M2[i2, i1])
//! tile2 0 1 32 32
//! parallelize 0
//! ```
//!
//! `iter` lines are given outer to inner. The dtype after `output` is
//! optional and defaults to the dtype of the first input (or `f64`).
//! Schedule directives (`tile2`, `tile3`, `interchange`, `split`,
//! `parallelize`, `unroll`) follow the program and are applied in order.

use std::fmt::Write as _;

use thiserror::Error;

use crate::ir::{
    BinOpKind, BufferAccess, BufferDecl, DataType, Expr, LoopIterator, Program, Scalar, Subscript,
};
use crate::schedule::{Schedule, Transform};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("line {line}: {message}")]
pub struct ParseError {
    pub line: usize,
    pub message: String,
}

fn err(line: usize, message: impl Into<String>) -> ParseError {
    ParseError {
        line,
        message: message.into(),
    }
}

/// Serialises a program (no schedule).
pub fn write_program(p: &Program) -> String {
    write_program_with_schedule(p, &Schedule::empty())
}

pub fn write_program_with_schedule(p: &Program, schedule: &Schedule) -> String {
    let mut s = String::new();
    writeln!(s, "program {}", p.name).unwrap();
    for it in &p.iterators {
        writeln!(s, "iter {} {} {}", it.name, it.lower, it.upper).unwrap();
    }
    for d in &p.inputs {
        writeln!(s, "input {} {} {}", d.name, d.rank, d.dtype).unwrap();
    }
    writeln!(s, "output {} {}", p.output, p.output.dtype).unwrap();
    writeln!(s, "body {}", p.body).unwrap();
    for t in schedule.iter() {
        writeln!(s, "{t}").unwrap();
    }
    s
}

/// Parses a program file, rejecting schedule directives.
pub fn parse_program(text: &str) -> Result<Program, ParseError> {
    let (p, s) = parse_program_file(text)?;
    if !s.is_empty() {
        return Err(err(0, "schedule directives are not allowed here"));
    }
    Ok(p)
}

/// Parses a program followed by optional schedule directives.
pub fn parse_program_file(text: &str) -> Result<(Program, Schedule), ParseError> {
    let mut name = None;
    let mut iterators = Vec::new();
    let mut inputs: Vec<BufferDecl> = Vec::new();
    let mut output: Option<(usize, RawAccess, Option<DataType>)> = None;
    let mut body: Option<(usize, RawExpr)> = None;
    let mut schedule = Vec::new();

    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (directive, rest) = line.split_once(char::is_whitespace).unwrap_or((line, ""));
        let rest = rest.trim();
        let words: Vec<&str> = rest.split_whitespace().collect();
        let num = |i: usize| -> Result<i64, ParseError> {
            words
                .get(i)
                .ok_or_else(|| err(line_no, format!("`{directive}` expects more arguments")))?
                .parse::<i64>()
                .map_err(|e| err(line_no, format!("bad integer: {e}")))
        };
        let unum = |i: usize| -> Result<u32, ParseError> {
            let v = num(i)?;
            u32::try_from(v).map_err(|_| err(line_no, format!("expected non-negative value, got {v}")))
        };
        let arity = |n: usize| -> Result<(), ParseError> {
            if words.len() == n {
                Ok(())
            } else {
                Err(err(
                    line_no,
                    format!("`{directive}` expects {n} arguments, got {}", words.len()),
                ))
            }
        };
        if !schedule.is_empty() && !is_schedule_directive(directive) {
            return Err(err(line_no, "program directives must precede the schedule"));
        }
        match directive {
            "program" => {
                arity(1)?;
                if name.replace(words[0].to_string()).is_some() {
                    return Err(err(line_no, "duplicate `program`"));
                }
            }
            "iter" => {
                arity(3)?;
                let level = iterators.len();
                iterators.push(LoopIterator::new(words[0], num(1)?, num(2)?, level));
            }
            "input" => {
                arity(3)?;
                let dtype = DataType::from_short_name(words[2])
                    .ok_or_else(|| err(line_no, format!("unknown dtype `{}`", words[2])))?;
                inputs.push(BufferDecl {
                    name: words[0].to_string(),
                    rank: num(1)? as usize,
                    dtype,
                });
            }
            "output" => {
                let mut lx = Lexer::new(rest, line_no)?;
                let acc = lx.access()?;
                let dtype = match lx.next() {
                    None => None,
                    Some(Tok::Ident(d)) => Some(
                        DataType::from_short_name(&d)
                            .ok_or_else(|| err(line_no, format!("unknown dtype `{d}`")))?,
                    ),
                    Some(t) => return Err(err(line_no, format!("unexpected {t:?} after output"))),
                };
                lx.expect_end()?;
                if output.replace((line_no, acc, dtype)).is_some() {
                    return Err(err(line_no, "duplicate `output`"));
                }
            }
            "body" => {
                let mut lx = Lexer::new(rest, line_no)?;
                let e = lx.expr()?;
                lx.expect_end()?;
                if body.replace((line_no, e)).is_some() {
                    return Err(err(line_no, "duplicate `body`"));
                }
            }
            "tile2" => {
                arity(4)?;
                schedule.push(Transform::tile2(num(0)? as usize, num(1)? as usize, unum(2)?, unum(3)?));
            }
            "tile3" => {
                arity(6)?;
                schedule.push(Transform::tile3(
                    num(0)? as usize,
                    num(1)? as usize,
                    num(2)? as usize,
                    unum(3)?,
                    unum(4)?,
                    unum(5)?,
                ));
            }
            "interchange" => {
                arity(2)?;
                schedule.push(Transform::Interchange(num(0)? as usize, num(1)? as usize));
            }
            "split" => {
                arity(2)?;
                schedule.push(Transform::split(num(0)? as usize, unum(1)?));
            }
            "parallelize" => {
                arity(1)?;
                schedule.push(Transform::Parallelize(num(0)? as usize));
            }
            "unroll" => {
                arity(1)?;
                schedule.push(Transform::Unroll(unum(0)?));
            }
            other => return Err(err(line_no, format!("unknown directive `{other}`"))),
        }
    }

    let name = name.ok_or_else(|| err(0, "missing `program`"))?;
    let (out_line, out_raw, out_dtype) = output.ok_or_else(|| err(0, "missing `output`"))?;
    let (body_line, body_raw) = body.ok_or_else(|| err(0, "missing `body`"))?;
    let dtype = out_dtype
        .or_else(|| inputs.first().map(|d| d.dtype))
        .unwrap_or(DataType::Float64);

    let lookup = |buf: &str| -> Option<DataType> {
        if buf == out_raw.buffer {
            Some(dtype)
        } else {
            inputs.iter().find(|d| d.name == buf).map(|d| d.dtype)
        }
    };
    let output = BufferAccess::store(out_raw.buffer.clone(), dtype, out_raw.indices.clone());
    let _ = out_line;
    let body = resolve(&body_raw, dtype, &lookup, body_line)?;
    Ok((
        Program {
            name,
            iterators,
            body,
            output,
            inputs,
        },
        Schedule(schedule),
    ))
}

fn is_schedule_directive(d: &str) -> bool {
    matches!(d, "tile2" | "tile3" | "interchange" | "split" | "parallelize" | "unroll")
}

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Ident(String),
    Num(String),
    Sym(char),
}

#[derive(Debug, Clone)]
struct RawAccess {
    buffer: String,
    indices: Vec<Subscript>,
}

#[derive(Debug, Clone)]
enum RawExpr {
    Num(String),
    Access(RawAccess),
    Bin(BinOpKind, Box<RawExpr>, Box<RawExpr>),
}

fn resolve(
    e: &RawExpr,
    dtype: DataType,
    lookup: &dyn Fn(&str) -> Option<DataType>,
    line: usize,
) -> Result<Expr, ParseError> {
    Ok(match e {
        RawExpr::Num(s) => Expr::Constant(parse_constant(s, dtype).ok_or_else(|| {
            err(line, format!("constant `{s}` is not a valid {dtype} literal"))
        })?),
        RawExpr::Access(a) => {
            let dt = lookup(&a.buffer)
                .ok_or_else(|| err(line, format!("unknown buffer `{}`", a.buffer)))?;
            Expr::Access(BufferAccess::load(a.buffer.clone(), dt, a.indices.clone()))
        }
        RawExpr::Bin(k, l, r) => Expr::binop(
            *k,
            resolve(l, dtype, lookup, line)?,
            resolve(r, dtype, lookup, line)?,
        ),
    })
}

fn parse_constant(s: &str, dtype: DataType) -> Option<Scalar> {
    let is_int = s.trim_start_matches('-').bytes().all(|b| b.is_ascii_digit());
    match dtype {
        DataType::Int32 if is_int => s.parse().ok().map(Scalar::I32),
        DataType::Int64 if is_int => s.parse().ok().map(Scalar::I64),
        DataType::Float32 => s.parse().ok().map(Scalar::F32),
        DataType::Float64 => s.parse().ok().map(Scalar::F64),
        _ => None,
    }
}

struct Lexer {
    toks: Vec<Tok>,
    pos: usize,
    line: usize,
}

impl Lexer {
    fn new(src: &str, line: usize) -> Result<Self, ParseError> {
        let mut toks = Vec::new();
        let chars: Vec<char> = src.chars().collect();
        let mut i = 0;
        while i < chars.len() {
            let c = chars[i];
            if c.is_whitespace() {
                i += 1;
            } else if c.is_ascii_alphabetic() || c == '_' {
                let start = i;
                while i < chars.len() && (chars[i].is_ascii_alphanumeric() || chars[i] == '_') {
                    i += 1;
                }
                toks.push(Tok::Ident(chars[start..i].iter().collect()));
            } else if c.is_ascii_digit() || c == '.' {
                let start = i;
                while i < chars.len() {
                    let d = chars[i];
                    let exp_sign = (d == '-' || d == '+')
                        && i > start
                        && matches!(chars[i - 1], 'e' | 'E');
                    if d.is_ascii_digit() || d == '.' || d == 'e' || d == 'E' || exp_sign {
                        i += 1;
                    } else {
                        break;
                    }
                }
                toks.push(Tok::Num(chars[start..i].iter().collect()));
            } else if "+-*/()[],".contains(c) {
                toks.push(Tok::Sym(c));
                i += 1;
            } else {
                return Err(err(line, format!("unexpected character `{c}`")));
            }
        }
        Ok(Lexer { toks, pos: 0, line })
    }

    fn peek(&self) -> Option<&Tok> {
        self.toks.get(self.pos)
    }

    fn next(&mut self) -> Option<Tok> {
        let t = self.toks.get(self.pos).cloned();
        self.pos += 1;
        t
    }

    fn eat(&mut self, c: char) -> bool {
        if self.peek() == Some(&Tok::Sym(c)) {
            self.pos += 1;
            true
        } else {
            false
        }
    }

    fn expect(&mut self, c: char) -> Result<(), ParseError> {
        if self.eat(c) {
            Ok(())
        } else {
            Err(err(self.line, format!("expected `{c}`, found {:?}", self.peek())))
        }
    }

    fn expect_end(&self) -> Result<(), ParseError> {
        match self.peek() {
            None => Ok(()),
            Some(t) => Err(err(self.line, format!("trailing input at {t:?}"))),
        }
    }

    fn expr(&mut self) -> Result<RawExpr, ParseError> {
        let mut lhs = self.term()?;
        loop {
            let kind = if self.eat('+') {
                BinOpKind::Add
            } else if self.eat('-') {
                BinOpKind::Sub
            } else {
                return Ok(lhs);
            };
            let rhs = self.term()?;
            lhs = RawExpr::Bin(kind, Box::new(lhs), Box::new(rhs));
        }
    }

    fn term(&mut self) -> Result<RawExpr, ParseError> {
        let mut lhs = self.factor()?;
        loop {
            let kind = if self.eat('*') {
                BinOpKind::Mul
            } else if self.eat('/') {
                BinOpKind::Div
            } else {
                return Ok(lhs);
            };
            let rhs = self.factor()?;
            lhs = RawExpr::Bin(kind, Box::new(lhs), Box::new(rhs));
        }
    }

    fn factor(&mut self) -> Result<RawExpr, ParseError> {
        match self.next() {
            Some(Tok::Num(n)) => Ok(RawExpr::Num(n)),
            Some(Tok::Sym('-')) => match self.next() {
                Some(Tok::Num(n)) => Ok(RawExpr::Num(format!("-{n}"))),
                t => Err(err(self.line, format!("expected number after `-`, found {t:?}"))),
            },
            Some(Tok::Sym('(')) => {
                let e = self.expr()?;
                self.expect(')')?;
                Ok(e)
            }
            Some(Tok::Ident(_)) => {
                self.pos -= 1;
                Ok(RawExpr::Access(self.access()?))
            }
            t => Err(err(self.line, format!("unexpected {t:?} in expression"))),
        }
    }

    fn access(&mut self) -> Result<RawAccess, ParseError> {
        let buffer = match self.next() {
            Some(Tok::Ident(n)) => n,
            t => return Err(err(self.line, format!("expected buffer name, found {t:?}"))),
        };
        self.expect('[')?;
        let mut indices = Vec::new();
        if !self.eat(']') {
            loop {
                indices.push(self.subscript()?);
                if self.eat(']') {
                    break;
                }
                self.expect(',')?;
            }
        }
        Ok(RawAccess { buffer, indices })
    }

    fn subscript(&mut self) -> Result<Subscript, ParseError> {
        let mut iterators = Vec::new();
        let mut offset = 0i64;
        let mut sign = 1i64;
        loop {
            match self.next() {
                Some(Tok::Ident(n)) if sign == 1 => iterators.push(n),
                Some(Tok::Num(n)) => {
                    let v: i64 = n
                        .parse()
                        .map_err(|_| err(self.line, format!("bad subscript offset `{n}`")))?;
                    offset += sign * v;
                }
                t => return Err(err(self.line, format!("bad subscript term {t:?}"))),
            }
            sign = if self.eat('+') {
                1
            } else if self.eat('-') {
                -1
            } else {
                break;
            };
        }
        Ok(Subscript { iterators, offset })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bench_programs;

    #[test]
    fn round_trips_benchmarks() {
        for p in [
            bench_programs::mmxm(16),
            bench_programs::smm(16),
            bench_programs::rgb_gray(16),
            bench_programs::blur(16),
            bench_programs::conv_layer(2, 3, 4, 4, 5),
        ] {
            let s = Schedule(vec![Transform::tile2(0, 1, 4, 4), Transform::Parallelize(0)]);
            let text = write_program_with_schedule(&p, &s);
            let (q, t) = parse_program_file(&text).unwrap();
            assert_eq!(p, q, "{text}");
            assert_eq!(s, t);
        }
    }

    #[test]
    fn parses_handwritten_file() {
        let text = "\
# matrix product
program mm
iter i 0 4
iter j 0 4
iter k 0 4
input A 2 i32
input B 2 i32
output C[i, j]
body C[i, j] + A[i, k] * B[k, j]
unroll 4
";
        let (p, s) = parse_program_file(text).unwrap();
        assert_eq!(p.dtype(), DataType::Int32);
        assert!(p.validate().is_ok(), "{}", p.validate());
        assert_eq!(s.0, vec![Transform::Unroll(4)]);
        assert!(matches!(p.body, Expr::BinOp { kind: BinOpKind::Add, .. }));
    }

    #[test]
    fn rejects_unknown_directive() {
        let e = parse_program_file("program p\nfuse 0 1\n").unwrap_err();
        assert_eq!(e.line, 2);
        assert!(e.message.contains("unknown directive"));
    }

    #[test]
    fn rejects_float_literal_in_int_program() {
        let text = "program p\niter i 0 4\ninput a 1 i32\noutput o[i]\nbody a[i] * 1.5\n";
        assert!(parse_program_file(text).is_err());
    }

    #[test]
    fn subscripts_with_offsets_and_sums() {
        let text = "program p\niter x 0 4\niter k 0 3\ninput a 1 f64\noutput o[x]\nbody a[x+k+2] - -1.5\n";
        let p = parse_program(text).unwrap();
        let acc = p.body.accesses()[0];
        assert_eq!(acc.indices[0], Subscript::sum(&["x", "k"], 2));
        assert_eq!(write_program(&p).lines().last().unwrap(), "body a[x+k+2] - -1.5");
    }
}
