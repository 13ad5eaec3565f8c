//! Plain-text QP dump for offline debugging.
//!
//! ```text
//! # plmpc-qp-dump v1
//! vars <m>
//! rows <p>
//! H
//! <m lines of m numbers>
//! q
//! <m numbers>
//! A
//! <p lines of m numbers>
//! l
//! <p numbers>
//! u
//! <p numbers>
//! ```
//!
//! Infinite bounds are written as `inf` / `-inf`.

use std::io::{BufRead, Write};

use nalgebra::{DMatrix, DVector};

use super::QpProblem;
use crate::error::{Error, Result};
use crate::Scalar;

pub const DUMP_HEADER: &str = "# plmpc-qp-dump v1";

fn fmt_value<T: Scalar>(v: T) -> String {
    let inf = T::infinity_bound();
    if v >= inf {
        "inf".to_string()
    } else if v <= -inf {
        "-inf".to_string()
    } else {
        format!("{v}")
    }
}

fn write_row<T: Scalar, W: Write>(out: &mut W, vals: impl Iterator<Item = T>) -> Result<()> {
    let line: Vec<String> = vals.map(fmt_value).collect();
    writeln!(out, "{}", line.join(" "))?;
    Ok(())
}

pub fn write_dump<T: Scalar, W: Write>(p: &QpProblem<T>, out: &mut W) -> Result<()> {
    writeln!(out, "{DUMP_HEADER}")?;
    writeln!(out, "vars {}", p.num_vars())?;
    writeln!(out, "rows {}", p.num_rows())?;
    writeln!(out, "H")?;
    for r in p.h.row_iter() {
        write_row(out, r.iter().copied())?;
    }
    writeln!(out, "q")?;
    write_row(out, p.q.iter().copied())?;
    writeln!(out, "A")?;
    for r in p.a.row_iter() {
        write_row(out, r.iter().copied())?;
    }
    writeln!(out, "l")?;
    write_row(out, p.l.iter().copied())?;
    writeln!(out, "u")?;
    write_row(out, p.u.iter().copied())?;
    Ok(())
}

pub fn read_dump<T: Scalar, R: BufRead>(input: R) -> Result<QpProblem<T>> {
    let lines: Vec<(usize, String)> = input
        .lines()
        .enumerate()
        .map(|(i, l)| l.map(|s| (i + 1, s)))
        .collect::<std::io::Result<_>>()?;
    let mut it = lines.into_iter();
    let err = |line: usize, message: &str| Error::Parse {
        line,
        message: message.to_string(),
    };
    let (ln, header) = it.next().ok_or_else(|| err(1, "empty dump"))?;
    if header.trim() != DUMP_HEADER {
        return Err(err(ln, "missing or unsupported dump header"));
    }
    let mut count = |key: &str| -> Result<usize> {
        let (ln, line) = it.next().ok_or_else(|| err(0, "truncated dump"))?;
        line.strip_prefix(key)
            .and_then(|s| s.trim().parse().ok())
            .ok_or_else(|| err(ln, &format!("expected `{key} <count>`")))
    };
    let m = count("vars")?;
    let p = count("rows")?;
    let mut rest = it;
    let mut section = |name: &str, nrows: usize, ncols: usize| -> Result<DMatrix<T>> {
        let (ln, line) = rest.next().ok_or_else(|| err(0, "truncated dump"))?;
        if line.trim() != name {
            return Err(err(ln, &format!("expected section `{name}`")));
        }
        let mut out = DMatrix::zeros(nrows, ncols);
        for r in 0..nrows {
            let (ln, line) = rest.next().ok_or_else(|| err(0, "truncated dump"))?;
            let vals: Vec<&str> = line.split_whitespace().collect();
            if vals.len() != ncols {
                return Err(err(ln, "wrong number of entries"));
            }
            for (c, tok) in vals.into_iter().enumerate() {
                let v = match tok {
                    "inf" => T::infinity_bound(),
                    "-inf" => -T::infinity_bound(),
                    _ => T::lit(tok.parse::<f64>().map_err(|_| err(ln, "bad number"))?),
                };
                out[(r, c)] = v;
            }
        }
        Ok(out)
    };
    let h = section("H", m, m)?;
    let q = section("q", 1, m)?;
    let a = section("A", p, m)?;
    let l = section("l", 1, p)?;
    let u = section("u", 1, p)?;
    let row = |v: DMatrix<T>| DVector::from_iterator(v.ncols(), v.iter().copied());
    QpProblem::new(h, row(q), a, row(l), row(u))
}
