// SPDX-License-Identifier: MIT OR Apache-2.0

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, DVector};

use super::function::AlignmentFunction;
use crate::error::Result;
use crate::neural::checkpoint::{write_values, Reader};

pub const ALIGN_MAGIC: &str = "repdiv-align";
pub const ALIGN_VERSION: u32 = 1;

/// Text checkpoint of `M` (column-major), `a` and `λ`.
pub fn alignment_to_text(af: &AlignmentFunction) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{ALIGN_MAGIC} {ALIGN_VERSION}");
    let _ = writeln!(out, "dim {}", af.dim());
    let _ = writeln!(out, "lambda {:?}", af.lambda());
    write_values(&mut out, "m", af.m().as_slice());
    write_values(&mut out, "a", af.a().as_slice());
    out
}

pub fn alignment_from_text(text: &str) -> Result<AlignmentFunction> {
    let mut reader = Reader::new(text);
    reader.header(ALIGN_MAGIC, ALIGN_VERSION)?;
    let d = reader.counts("dim", 1)?[0];
    let lambda = reader.scalar("lambda")?;
    let m = DMatrix::from_vec(d, d, reader.tensor("m", d * d)?);
    let a = DVector::from_vec(reader.tensor("a", d)?);
    AlignmentFunction::new(m, a, lambda)
}

pub fn save_alignment(path: &Path, af: &AlignmentFunction) -> Result<()> {
    std::fs::write(path, alignment_to_text(af))?;
    Ok(())
}

pub fn load_alignment(path: &Path) -> Result<AlignmentFunction> {
    alignment_from_text(&std::fs::read_to_string(path)?)
}
