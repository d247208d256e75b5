// SPDX-License-Identifier: MIT OR Apache-2.0

use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::neural::checkpoint::Reader;
use crate::neural::argmax;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Readout {
    /// Single output; class 0 when positive, class 1 otherwise.
    ScoreSign,
    /// First index of the largest output.
    ArgmaxFirstIndex,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    pub weight: DMatrix<f64>,
    pub bias: DVector<f64>,
    pub relu: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PiecewiseLinearCircuit {
    pub name: String,
    pub layers: Vec<Layer>,
    /// Index of the layer whose input receives the additive context vector.
    pub context_layer: Option<usize>,
    pub readout: Readout,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CircuitTrace {
    /// Input to each layer, after any context was added.
    pub inputs: Vec<DVector<f64>>,
    pub pre: Vec<DVector<f64>>,
    pub post: Vec<DVector<f64>>,
    pub output: DVector<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReadoutResult {
    pub class: usize,
    /// The raw score for [`Readout::ScoreSign`].
    pub score: Option<f64>,
}

impl PiecewiseLinearCircuit {
    pub fn new(name: &str, layers: Vec<Layer>, context_layer: Option<usize>, readout: Readout) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::EmptyInput("circuit layers"));
        }
        for (i, layer) in layers.iter().enumerate() {
            check_dim(layer.weight.nrows(), layer.bias.len(), "circuit bias")?;
            if i > 0 {
                check_dim(layers[i - 1].weight.nrows(), layer.weight.ncols(), "circuit layer chaining")?;
            }
        }
        if context_layer.is_some_and(|l| l >= layers.len()) {
            return Err(Error::Config("context layer index out of range".into()));
        }
        if readout == Readout::ScoreSign && layers.last().is_some_and(|l| l.weight.nrows() != 1) {
            return Err(Error::Config("score-sign readout needs a single output".into()));
        }
        Ok(Self { name: name.to_string(), layers, context_layer, readout })
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weight.ncols()
    }

    pub fn context_dim(&self) -> Option<usize> {
        self.context_layer.map(|l| self.layers[l].weight.ncols())
    }

    pub fn relu_units(&self) -> usize {
        self.layers.iter().filter(|l| l.relu).map(|l| l.weight.nrows()).sum()
    }

    pub fn forward(&self, h: &DVector<f64>, context: Option<&DVector<f64>>) -> Result<(CircuitTrace, ReadoutResult)> {
        check_dim(self.input_dim(), h.len(), "circuit input")?;
        if let (Some(v), Some(d)) = (context, self.context_dim()) {
            check_dim(d, v.len(), "circuit context")?;
        } else if context.is_some() {
            return Err(Error::Config(format!("circuit `{}` takes no context", self.name)));
        }
        let mut trace = CircuitTrace { inputs: Vec::new(), pre: Vec::new(), post: Vec::new(), output: DVector::zeros(0) };
        let mut x = h.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            if self.context_layer == Some(i) {
                if let Some(v) = context {
                    x += v;
                }
            }
            let pre = &layer.weight * &x + &layer.bias;
            let post = if layer.relu { pre.map(|v| v.max(0.0)) } else { pre.clone() };
            trace.inputs.push(x);
            trace.pre.push(pre);
            x = post.clone();
            trace.post.push(post);
        }
        trace.output = x;
        let result = match self.readout {
            Readout::ScoreSign => {
                let s = trace.output[0];
                ReadoutResult { class: if s > 0.0 { 0 } else { 1 }, score: Some(s) }
            }
            Readout::ArgmaxFirstIndex => ReadoutResult { class: argmax(&trace.output), score: None },
        };
        Ok((trace, result))
    }

    /// Post-ReLU values of every ReLU unit, layer by layer.
    pub fn relu_values(&self, h: &DVector<f64>) -> Result<Vec<f64>> {
        let (trace, _) = self.forward(h, None)?;
        Ok(self
            .layers
            .iter()
            .zip(&trace.post)
            .filter(|(l, _)| l.relu)
            .flat_map(|(_, p)| p.iter().copied())
            .collect())
    }
}

fn mat(rows: usize, cols: usize, row_major: &[f64]) -> DMatrix<f64> {
    DMatrix::from_row_slice(rows, cols, row_major)
}

fn vec(values: &[f64]) -> DVector<f64> {
    DVector::from_column_slice(values)
}

/// Two-layer ReLU circuit `s = 1ᵀ ReLU(W h + b)` where mean-difference
/// patching switches on a unit that no natural input uses.
pub fn mean_diff_circuit() -> PiecewiseLinearCircuit {
    let hidden = Layer {
        weight: mat(3, 4, &[0.75, 0.25, 0.0, 0.5, 0.0, 1.0, 0.0, 0.0, 1.0, 1.0, -1.0, -1.0]),
        bias: vec(&[-0.5, -0.5, 0.0]),
        relu: true,
    };
    let score = Layer { weight: mat(1, 3, &[1.0, 1.0, 1.0]), bias: vec(&[0.0]), relu: false };
    PiecewiseLinearCircuit::new("mean_diff", vec![hidden, score], None, Readout::ScoreSign).expect("valid builtin")
}

/// The mean-difference circuit with a fourth, always-zero hidden unit, an
/// additive context on the hidden layer and a three-way argmax readout.
pub fn dormant_circuit() -> PiecewiseLinearCircuit {
    let hidden = Layer {
        weight: mat(4, 4, &[0.75, 0.25, 0.0, 0.5, 0.0, 1.0, 0.0, 0.0, 1.0, 1.0, -1.0, -1.0, 0.0, 0.0, 0.0, 0.0]),
        bias: vec(&[-0.5, -0.5, 0.0, 0.0]),
        relu: true,
    };
    let out = Layer {
        weight: mat(3, 4, &[1.0, 1.0, 0.5, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0, 1.0]),
        bias: vec(&[0.0, 0.25, -1.0]),
        relu: false,
    };
    PiecewiseLinearCircuit::new("dormant", vec![hidden, out], Some(1), Readout::ArgmaxFirstIndex).expect("valid builtin")
}

/// Linear score `y = wᵀh` with `w = [1, −1, ½, ½]`; the first two
/// coordinates cancel on natural data.
pub fn balanced_circuit() -> PiecewiseLinearCircuit {
    let layer = Layer { weight: mat(1, 4, &[1.0, -1.0, 0.5, 0.5]), bias: vec(&[0.0]), relu: false };
    PiecewiseLinearCircuit::new("balanced", vec![layer], None, Readout::ScoreSign).expect("valid builtin")
}

pub fn builtin_circuits() -> Vec<PiecewiseLinearCircuit> {
    vec![mean_diff_circuit(), dormant_circuit(), balanced_circuit()]
}

pub const CIRCUIT_MAGIC: &str = "repdiv-circuit";
pub const CIRCUIT_VERSION: u32 = 1;

/// Flat text: header, name, readout, context layer, then per layer its
/// shape and activation followed by row-major weights and the bias.
pub fn circuit_to_text(c: &PiecewiseLinearCircuit) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{CIRCUIT_MAGIC} {CIRCUIT_VERSION}");
    let _ = writeln!(out, "name {}", c.name);
    let readout = match c.readout {
        Readout::ScoreSign => "score_sign",
        Readout::ArgmaxFirstIndex => "argmax",
    };
    let _ = writeln!(out, "readout {readout}");
    match c.context_layer {
        Some(l) => { let _ = writeln!(out, "context_layer {l}"); }
        None => { let _ = writeln!(out, "context_layer none"); }
    }
    let _ = writeln!(out, "layers {}", c.layers.len());
    for layer in &c.layers {
        let (r, k) = layer.weight.shape();
        let _ = writeln!(out, "layer {r} {k} {}", if layer.relu { "relu" } else { "linear" });
        for row in layer.weight.row_iter() {
            let vals: Vec<String> = row.iter().map(|v| format!("{v:?}")).collect();
            let _ = writeln!(out, "{}", vals.join(" "));
        }
        let vals: Vec<String> = layer.bias.iter().map(|v| format!("{v:?}")).collect();
        let _ = writeln!(out, "bias {}", vals.join(" "));
    }
    out
}

fn parse_err(line: usize, message: impl Into<String>) -> Error {
    Error::Parse { line, message: message.into() }
}

fn numbers(line: usize, fields: &[&str]) -> Result<Vec<f64>> {
    fields.iter().map(|f| f.parse().map_err(|_| parse_err(line, format!("bad number `{f}`")))).collect()
}

pub fn circuit_from_text(text: &str) -> Result<PiecewiseLinearCircuit> {
    let mut reader = Reader::new(text);
    reader.header(CIRCUIT_MAGIC, CIRCUIT_VERSION)?;
    let (line, name) = reader.keyed("name")?;
    let name = name.join(" ");
    if name.is_empty() {
        return Err(parse_err(line, "empty circuit name"));
    }
    let (line, readout) = reader.keyed("readout")?;
    let readout = match readout.as_slice() {
        ["score_sign"] => Readout::ScoreSign,
        ["argmax"] => Readout::ArgmaxFirstIndex,
        _ => return Err(parse_err(line, "readout must be `score_sign` or `argmax`")),
    };
    let (line, ctx) = reader.keyed("context_layer")?;
    let context_layer = match ctx.as_slice() {
        ["none"] => None,
        [l] => Some(l.parse().map_err(|_| parse_err(line, "bad context layer"))?),
        _ => return Err(parse_err(line, "context_layer takes one value")),
    };
    let n_layers = reader.counts("layers", 1)?[0];
    let mut layers = Vec::with_capacity(n_layers);
    for _ in 0..n_layers {
        let (line, shape) = reader.keyed("layer")?;
        let (rows, cols, relu) = match shape.as_slice() {
            [r, k, act] => (
                r.parse::<usize>().map_err(|_| parse_err(line, "bad row count"))?,
                k.parse::<usize>().map_err(|_| parse_err(line, "bad column count"))?,
                match *act {
                    "relu" => true,
                    "linear" => false,
                    _ => return Err(parse_err(line, "activation must be `relu` or `linear`")),
                },
            ),
            _ => return Err(parse_err(line, "layer takes rows, columns and activation")),
        };
        let mut weights = Vec::with_capacity(rows * cols);
        for _ in 0..rows {
            let (line, row) = reader.line()?;
            let vals = numbers(line, &row.split_whitespace().collect::<Vec<_>>())?;
            if vals.len() != cols {
                return Err(parse_err(line, format!("expected {cols} weights")));
            }
            weights.extend(vals);
        }
        let (line, bias) = reader.keyed("bias")?;
        let bias = numbers(line, &bias)?;
        if bias.len() != rows {
            return Err(parse_err(line, format!("expected {rows} biases")));
        }
        layers.push(Layer { weight: mat(rows, cols, &weights), bias: DVector::from_vec(bias), relu });
    }
    PiecewiseLinearCircuit::new(&name, layers, context_layer, readout)
}
