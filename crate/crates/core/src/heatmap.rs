//! Plain-text exports of relation matrices: CSV and 8-bit ASCII PGM.

use std::fmt::Write;

use crate::error::{Error, Result};
use crate::numerics::Matrix;

/// Row-major CSV, every value with 17 significant digits.
pub fn to_csv(m: &Matrix) -> String {
    let mut out = String::new();
    for i in 0..m.rows() {
        let line: Vec<String> = m.row(i).iter().map(|v| format!("{v:.16e}")).collect();
        out.push_str(&line.join(","));
        out.push('\n');
    }
    out
}

pub fn from_csv(text: &str) -> Result<Matrix> {
    let rows = text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            l.split(',')
                .map(|v| v.trim().parse::<f64>().map_err(|e| Error::Config(format!("bad CSV value {v:?}: {e}"))))
                .collect::<Result<Vec<f64>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    Matrix::from_rows(&rows)
}

/// Gray level of a value, mapping 0 to 0 and 1 to 255. Out-of-range values are clamped.
pub fn gray_level(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// P2 PGM with max value 255, width = columns.
pub fn to_pgm(m: &Matrix) -> String {
    let mut out = format!("P2\n{} {}\n255\n", m.cols(), m.rows());
    for i in 0..m.rows() {
        let line: Vec<String> = m.row(i).iter().map(|&v| gray_level(v).to_string()).collect();
        let _ = writeln!(out, "{}", line.join(" "));
    }
    out
}

/// Parses a P2 PGM back into `(width, height, pixels)`.
pub fn parse_pgm(text: &str) -> Result<(usize, usize, Vec<u8>)> {
    let mut tokens = text.split_whitespace();
    if tokens.next() != Some("P2") {
        return Err(Error::Config("not a P2 PGM".into()));
    }
    let mut num = || -> Result<usize> {
        tokens
            .next()
            .ok_or_else(|| Error::Config("truncated PGM".into()))?
            .parse::<usize>()
            .map_err(|e| Error::Config(format!("bad PGM token: {e}")))
    };
    let (w, h, max) = (num()?, num()?, num()?);
    if max != 255 {
        return Err(Error::Config(format!("unexpected PGM max value {max}")));
    }
    let pixels = (0..w * h).map(|_| num().map(|v| v as u8)).collect::<Result<Vec<u8>>>()?;
    Ok((w, h, pixels))
}
