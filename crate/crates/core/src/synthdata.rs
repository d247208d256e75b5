// SPDX-License-Identifier: MIT OR Apache-2.0

//! Synthetic latent datasets.
//!
//! Each class sits at a point of the grid `x1_values × x2_values`. Samples
//! add correlated Gaussian noise to the two feature coordinates and append
//! `extra_dims` standard-normal coordinates that carry no class signal.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::format::sig9;
use crate::numerics::Rng;
use crate::par;

/// Number of leading feature coordinates that encode `(x1, x2)`.
pub const FEATURE_DIMS: usize = 2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetConfig {
    pub x1_values: Vec<f64>,
    pub x2_values: Vec<f64>,
    /// Marginal standard deviation of the feature noise.
    pub noise_sd: f64,
    /// Pearson correlation of the two feature noise terms.
    pub cov_param: f64,
    pub extra_dims: usize,
    pub samples_per_class: usize,
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            x1_values: vec![-1.0, 1.0],
            x2_values: vec![0.0, 1.0, 2.0, 3.0, 4.0],
            noise_sd: 0.1,
            cov_param: 0.2,
            extra_dims: 16,
            samples_per_class: 500,
            seed: 0,
        }
    }
}

impl DatasetConfig {
    pub fn dim(&self) -> usize {
        FEATURE_DIMS + self.extra_dims
    }

    pub fn grid(&self) -> ClassGrid {
        ClassGrid::new(self.x1_values.clone(), self.x2_values.clone())
    }

    pub fn validate(&self) -> Result<()> {
        if self.x1_values.is_empty() || self.x2_values.is_empty() {
            return Err(Error::Config("grid value lists must be nonempty".into()));
        }
        if !(self.noise_sd >= 0.0) {
            return Err(Error::Config(format!("noise_sd must be >= 0, got {}", self.noise_sd)));
        }
        if !(self.cov_param.abs() < 1.0) {
            return Err(Error::Config(format!(
                "cov_param is a correlation and must satisfy |ρ| < 1, got {}",
                self.cov_param
            )));
        }
        let distinct = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<BTreeSet<_>>().len() == v.len();
        if !distinct(&self.x1_values) || !distinct(&self.x2_values) {
            return Err(Error::Config("grid values must be distinct".into()));
        }
        Ok(())
    }
}

/// The Cartesian class grid; class `i1 · |x2| + i2` sits at `(x1[i1], x2[i2])`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassGrid {
    pub x1_values: Vec<f64>,
    pub x2_values: Vec<f64>,
}

impl ClassGrid {
    pub fn new(x1_values: Vec<f64>, x2_values: Vec<f64>) -> Self {
        Self { x1_values, x2_values }
    }

    pub fn n_classes(&self) -> usize {
        self.x1_values.len() * self.x2_values.len()
    }

    pub fn class_of(&self, x1: f64, x2: f64) -> Option<usize> {
        let i1 = self.x1_values.iter().position(|&v| v == x1)?;
        let i2 = self.x2_values.iter().position(|&v| v == x2)?;
        Some(i1 * self.x2_values.len() + i2)
    }

    pub fn coords(&self, class: usize) -> (f64, f64) {
        let n2 = self.x2_values.len();
        (self.x1_values[class / n2], self.x2_values[class % n2])
    }
}

/// One latent vector with its ground-truth causal values.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledRep {
    pub h: DVector<f64>,
    pub class_label: usize,
    pub x1: f64,
    pub x2: f64,
}

pub fn generate_dataset(config: &DatasetConfig) -> Result<Vec<LabeledRep>> {
    config.validate()?;
    let grid = config.grid();
    let d = config.dim();
    let sd = config.noise_sd;
    let rho = config.cov_param;
    let rho_perp = (1.0 - rho * rho).sqrt();

    let per_class = par::map_range(grid.n_classes(), |class| {
        let (x1, x2) = grid.coords(class);
        let mut rng = Rng::stream(config.seed, class as u64);
        (0..config.samples_per_class)
            .map(|_| {
                let z1 = rng.standard_normal();
                let z2 = rng.standard_normal();
                let mut h = DVector::zeros(d);
                h[0] = x1 + sd * z1;
                h[1] = x2 + sd * (rho * z1 + rho_perp * z2);
                for k in FEATURE_DIMS..d {
                    h[k] = rng.standard_normal();
                }
                LabeledRep {
                    h,
                    class_label: class,
                    x1,
                    x2,
                }
            })
            .collect::<Vec<_>>()
    });
    Ok(per_class.concat())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scheme {
    Default,
    Ood,
}

impl Scheme {
    pub fn as_str(self) -> &'static str {
        match self {
            Scheme::Default => "default",
            Scheme::Ood => "ood",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PartitionName {
    DefaultP1,
    DefaultP2,
    Dense,
    Sparse,
}

impl PartitionName {
    pub fn as_str(self) -> &'static str {
        match self {
            PartitionName::DefaultP1 => "p1",
            PartitionName::DefaultP2 => "p2",
            PartitionName::Dense => "dense",
            PartitionName::Sparse => "sparse",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Partition {
    pub name: PartitionName,
    /// Sorted class ids.
    pub included_classes: Vec<usize>,
}

impl Partition {
    pub fn contains(&self, class: usize) -> bool {
        self.included_classes.binary_search(&class).is_ok()
    }
}

/// A partition together with its train/validation samples.
#[derive(Clone, Debug)]
pub struct PartitionData {
    pub partition: Partition,
    pub train: Vec<LabeledRep>,
    pub valid: Vec<LabeledRep>,
}

/// Grid coordinates of the OOD partitions on the default grid: the Dense
/// set has pairwise spacing {1, 2, √5}, the Sparse set {2, 4, √20}. The
/// `x2 = 3` classes belong to neither.
pub const DENSE_COORDS: [(f64, f64); 4] = [(-1.0, 1.0), (-1.0, 2.0), (1.0, 1.0), (1.0, 2.0)];
pub const SPARSE_COORDS: [(f64, f64); 4] = [(-1.0, 0.0), (-1.0, 4.0), (1.0, 0.0), (1.0, 4.0)];

pub const DEFAULT_TRAIN_FRACTION: f64 = 0.8;
const SPLIT_SALT: u64 = 0xA5A5_5A5A_0F0F_F0F0;

/// Split every class of `dataset` into train/validation by a seeded shuffle.
/// The split of a class depends only on the seed and class id, so it is the
/// same in every partition that includes the class.
pub fn split_by_class(
    dataset: &[LabeledRep],
    seed: u64,
    train_fraction: f64,
) -> std::collections::BTreeMap<usize, (Vec<LabeledRep>, Vec<LabeledRep>)> {
    let mut by_class: std::collections::BTreeMap<usize, Vec<LabeledRep>> = Default::default();
    for rep in dataset {
        by_class.entry(rep.class_label).or_default().push(rep.clone());
    }
    by_class
        .into_iter()
        .map(|(class, mut reps)| {
            let mut rng = Rng::stream(seed ^ SPLIT_SALT, class as u64);
            rng.shuffle(&mut reps);
            let n_train = ((reps.len() as f64) * train_fraction).round() as usize;
            let valid = reps.split_off(n_train.min(reps.len()));
            (class, (reps, valid))
        })
        .collect()
}

fn build_partition(
    name: PartitionName,
    classes: &[usize],
    splits: &std::collections::BTreeMap<usize, (Vec<LabeledRep>, Vec<LabeledRep>)>,
) -> PartitionData {
    let mut included = classes.to_vec();
    included.sort_unstable();
    let mut train = Vec::new();
    let mut valid = Vec::new();
    for class in &included {
        if let Some((t, v)) = splits.get(class) {
            train.extend(t.iter().cloned());
            valid.extend(v.iter().cloned());
        }
    }
    PartitionData {
        partition: Partition {
            name,
            included_classes: included,
        },
        train,
        valid,
    }
}

/// Classes withheld from each default partition, as positions in the sorted
/// list of classes present. On the default 2×5 grid these are classes
/// {1, 8} = {(−1,1), (1,3)} for partition 1 and {3, 6} = {(−1,3), (1,1)} for
/// partition 2.
fn default_withheld(present: &[usize]) -> Result<([usize; 2], [usize; 2])> {
    let n = present.len();
    if n < 6 {
        return Err(Error::Partition(format!(
            "default scheme needs at least 6 classes, dataset has {n}"
        )));
    }
    Ok((
        [present[1], present[n - 2]],
        [present[3], present[n - 4]],
    ))
}

fn lookup(grid: &ClassGrid, coords: &[(f64, f64)], present: &BTreeSet<usize>) -> Result<Vec<usize>> {
    coords
        .iter()
        .map(|&(x1, x2)| {
            grid.class_of(x1, x2)
                .filter(|c| present.contains(c))
                .ok_or_else(|| Error::Partition(format!("OOD scheme needs class at ({x1}, {x2})")))
        })
        .collect()
}

/// Two partitions per `scheme`, each with a stratified train/validation split.
pub fn split_partitions(
    dataset: &[LabeledRep],
    grid: &ClassGrid,
    scheme: Scheme,
    seed: u64,
    train_fraction: f64,
) -> Result<(PartitionData, PartitionData)> {
    let present: BTreeSet<usize> = dataset.iter().map(|r| r.class_label).collect();
    let splits = split_by_class(dataset, seed, train_fraction);
    match scheme {
        Scheme::Default => {
            let present_list: Vec<usize> = present.iter().copied().collect();
            let (w1, w2) = default_withheld(&present_list)?;
            let p1: Vec<usize> = present_list.iter().copied().filter(|c| !w1.contains(c)).collect();
            let p2: Vec<usize> = present_list.iter().copied().filter(|c| !w2.contains(c)).collect();
            Ok((
                build_partition(PartitionName::DefaultP1, &p1, &splits),
                build_partition(PartitionName::DefaultP2, &p2, &splits),
            ))
        }
        Scheme::Ood => {
            let dense = lookup(grid, &DENSE_COORDS, &present)?;
            let sparse = lookup(grid, &SPARSE_COORDS, &present)?;
            Ok((
                build_partition(PartitionName::Dense, &dense, &splits),
                build_partition(PartitionName::Sparse, &sparse, &splits),
            ))
        }
    }
}

/// Flat CSV with header `class,x1,x2,h_0..h_{d-1}`, one row per sample in
/// dataset order.
pub fn dataset_to_csv(dataset: &[LabeledRep]) -> String {
    let d = dataset.first().map_or(0, |r| r.h.len());
    let mut out = String::from("class,x1,x2");
    for k in 0..d {
        let _ = write!(out, ",h_{k}");
    }
    out.push('\n');
    for rep in dataset {
        let _ = write!(out, "{},{},{}", rep.class_label, sig9(rep.x1), sig9(rep.x2));
        for v in rep.h.iter() {
            let _ = write!(out, ",{}", sig9(*v));
        }
        out.push('\n');
    }
    out
}

pub fn dataset_from_csv(text: &str) -> Result<Vec<LabeledRep>> {
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or(Error::Parse {
        line: 1,
        message: "missing header".into(),
    })?;
    let cols: Vec<&str> = header.split(',').collect();
    if cols.len() < 3 || cols[..3] != ["class", "x1", "x2"] {
        return Err(Error::Parse {
            line: 1,
            message: format!("unexpected header {header:?}"),
        });
    }
    for (k, c) in cols[3..].iter().enumerate() {
        if *c != format!("h_{k}") {
            return Err(Error::Parse {
                line: 1,
                message: format!("expected column h_{k}, found {c}"),
            });
        }
    }
    let d = cols.len() - 3;
    let mut out = Vec::new();
    for (i, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let bad = |message: String| Error::Parse { line: i + 1, message };
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != d + 3 {
            return Err(bad(format!("expected {} fields, found {}", d + 3, fields.len())));
        }
        let num = |s: &str| s.trim().parse::<f64>().map_err(|e| bad(format!("{s:?}: {e}")));
        let class_label = fields[0].trim().parse::<usize>().map_err(|e| bad(e.to_string()))?;
        let x1 = num(fields[1])?;
        let x2 = num(fields[2])?;
        let h = fields[3..].iter().map(|s| num(s)).collect::<Result<Vec<_>>>()?;
        out.push(LabeledRep {
            h: DVector::from_vec(h),
            class_label,
            x1,
            x2,
        });
    }
    Ok(out)
}

pub fn write_dataset_csv(path: &Path, dataset: &[LabeledRep]) -> Result<()> {
    std::fs::write(path, dataset_to_csv(dataset))?;
    Ok(())
}

pub fn read_dataset_csv(path: &Path) -> Result<Vec<LabeledRep>> {
    dataset_from_csv(&std::fs::read_to_string(path)?)
}
