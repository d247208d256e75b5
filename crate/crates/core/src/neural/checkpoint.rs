// SPDX-License-Identifier: MIT OR Apache-2.0

//! Flat-text model checkpoints.
//!
//! ```text
//! repdiv-mlp 1
//! dims <input> <hidden> <classes>
//! dropout_p <p>
//! bn_in.momentum <m>
//! ...
//! tensor <name> <len>
//! <values separated by spaces>
//! ```
//!
//! Values are written with Rust's shortest round-trip formatting, so reading
//! a checkpoint reproduces every parameter bit for bit.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, DVector};

use super::mlp::{BatchNorm, Mlp, Mode};
use crate::error::{Error, Result};

pub const MLP_MAGIC: &str = "repdiv-mlp";
pub const MLP_VERSION: u32 = 1;

pub(crate) fn write_values(out: &mut String, name: &str, values: &[f64]) {
    let _ = writeln!(out, "tensor {name} {}", values.len());
    let body: Vec<String> = values.iter().map(|v| format!("{v:?}")).collect();
    let _ = writeln!(out, "{}", body.join(" "));
}

pub fn mlp_to_text(model: &Mlp) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{MLP_MAGIC} {MLP_VERSION}");
    let _ = writeln!(out, "dims {} {} {}", model.input_dim(), model.hidden_width(), model.n_classes());
    let _ = writeln!(out, "dropout_p {:?}", model.dropout_p);
    for (prefix, bn) in [("bn_in", &model.bn_in), ("bn_hidden", &model.bn_hidden)] {
        let _ = writeln!(out, "{prefix}.momentum {:?}", bn.momentum);
        let _ = writeln!(out, "{prefix}.eps {:?}", bn.eps);
        write_values(&mut out, &format!("{prefix}.gamma"), bn.gamma.as_slice());
        write_values(&mut out, &format!("{prefix}.beta"), bn.beta.as_slice());
        write_values(&mut out, &format!("{prefix}.running_mean"), bn.running_mean.as_slice());
        write_values(&mut out, &format!("{prefix}.running_var"), bn.running_var.as_slice());
    }
    // Matrices are stored column-major.
    write_values(&mut out, "w1", model.w1.as_slice());
    write_values(&mut out, "b1", model.b1.as_slice());
    write_values(&mut out, "w2", model.w2.as_slice());
    write_values(&mut out, "b2", model.b2.as_slice());
    out
}

/// Line-oriented reader shared by the checkpoint formats.
pub(crate) struct Reader<'a> {
    lines: std::iter::Enumerate<std::str::Lines<'a>>,
}

impl<'a> Reader<'a> {
    pub fn new(text: &'a str) -> Self {
        Self { lines: text.lines().enumerate() }
    }

    pub fn line(&mut self) -> Result<(usize, &'a str)> {
        loop {
            match self.lines.next() {
                Some((_, l)) if l.trim().is_empty() => continue,
                Some((i, l)) => return Ok((i + 1, l.trim())),
                None => return Err(Error::Parse { line: 0, message: "unexpected end of file".into() }),
            }
        }
    }

    /// Reads `<key> <fields...>` and returns the fields.
    pub fn keyed(&mut self, key: &str) -> Result<(usize, Vec<&'a str>)> {
        let (line, text) = self.line()?;
        let mut parts = text.split_whitespace();
        if parts.next() != Some(key) {
            return Err(Error::Parse { line, message: format!("expected `{key}`") });
        }
        Ok((line, parts.collect()))
    }

    pub fn header(&mut self, magic: &str, version: u32) -> Result<()> {
        let (line, fields) = self.keyed(magic)?;
        match fields.as_slice() {
            [v] if v.parse::<u32>().ok() == Some(version) => Ok(()),
            _ => Err(Error::Parse { line, message: format!("unsupported {magic} version") }),
        }
    }

    pub fn scalar(&mut self, key: &str) -> Result<f64> {
        let (line, fields) = self.keyed(key)?;
        match fields.as_slice() {
            [v] => parse_f64(line, v),
            _ => Err(Error::Parse { line, message: format!("`{key}` takes one value") }),
        }
    }

    pub fn counts(&mut self, key: &str, n: usize) -> Result<Vec<usize>> {
        let (line, fields) = self.keyed(key)?;
        if fields.len() != n {
            return Err(Error::Parse { line, message: format!("`{key}` takes {n} values") });
        }
        fields
            .iter()
            .map(|f| f.parse().map_err(|_| Error::Parse { line, message: format!("bad count `{f}`") }))
            .collect()
    }

    pub fn tensor(&mut self, name: &str, len: usize) -> Result<Vec<f64>> {
        let (line, fields) = self.keyed("tensor")?;
        match fields.as_slice() {
            [n, l] if *n == name && l.parse::<usize>().ok() == Some(len) => {}
            _ => return Err(Error::Parse { line, message: format!("expected tensor `{name}` of length {len}") }),
        }
        let (line, body) = if len == 0 { (line, "") } else { self.line()? };
        let values: Vec<f64> = body.split_whitespace().map(|v| parse_f64(line, v)).collect::<Result<_>>()?;
        if values.len() != len {
            return Err(Error::Parse { line, message: format!("tensor `{name}` has {} values, expected {len}", values.len()) });
        }
        Ok(values)
    }
}

fn parse_f64(line: usize, text: &str) -> Result<f64> {
    text.parse().map_err(|_| Error::Parse { line, message: format!("bad number `{text}`") })
}

fn read_bn(reader: &mut Reader<'_>, prefix: &str, dim: usize) -> Result<BatchNorm> {
    let momentum = reader.scalar(&format!("{prefix}.momentum"))?;
    let eps = reader.scalar(&format!("{prefix}.eps"))?;
    let mut vec = |field: &str| -> Result<DVector<f64>> {
        Ok(DVector::from_vec(reader.tensor(&format!("{prefix}.{field}"), dim)?))
    };
    let gamma = vec("gamma")?;
    let beta = vec("beta")?;
    let running_mean = vec("running_mean")?;
    let running_var = vec("running_var")?;
    if running_var.iter().any(|v| !(*v > 0.0)) {
        return Err(Error::Parse { line: 0, message: format!("{prefix}.running_var must be positive") });
    }
    Ok(BatchNorm { gamma, beta, running_mean, running_var, momentum, eps })
}

pub fn mlp_from_text(text: &str) -> Result<Mlp> {
    let mut reader = Reader::new(text);
    reader.header(MLP_MAGIC, MLP_VERSION)?;
    let dims = reader.counts("dims", 3)?;
    let (d, w, c) = (dims[0], dims[1], dims[2]);
    let dropout_p = reader.scalar("dropout_p")?;
    let bn_in = read_bn(&mut reader, "bn_in", d)?;
    let bn_hidden = read_bn(&mut reader, "bn_hidden", w)?;
    let w1 = DMatrix::from_vec(w, d, reader.tensor("w1", w * d)?);
    let b1 = DVector::from_vec(reader.tensor("b1", w)?);
    let w2 = DMatrix::from_vec(c, w, reader.tensor("w2", c * w)?);
    let b2 = DVector::from_vec(reader.tensor("b2", c)?);
    Ok(Mlp { bn_in, w1, b1, bn_hidden, w2, b2, dropout_p, mode: Mode::Eval })
}

pub fn save_mlp(path: &Path, model: &Mlp) -> Result<()> {
    std::fs::write(path, mlp_to_text(model))?;
    Ok(())
}

pub fn load_mlp(path: &Path) -> Result<Mlp> {
    mlp_from_text(&std::fs::read_to_string(path)?)
}
