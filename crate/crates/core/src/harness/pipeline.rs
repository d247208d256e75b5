// SPDX-License-Identifier: MIT OR Apache-2.0

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use super::config::{ExperimentConfig, LossKind};
use crate::alignment::{
    alignment_to_text, draw_balanced_samples, evaluate_iia, interchange, save_alignment, train_alignment, AlignData,
    AlignHistory, AlignmentFunction, InterventionSample, VariableSelector,
};
use crate::divergence::{emd_divergence, full_report, row_emd, ComparisonSet, DivergenceReport};
use crate::error::{Error, Result};
use crate::format::{fnv1a, round_json, sig9};
use crate::neural::{save_mlp, train_mlp, Mlp, TrainHistory};
use crate::numerics::{pca, Rng};
use crate::par;
use crate::synthdata::{
    generate_dataset, split_by_class, split_partitions, ClassGrid, LabeledRep, PartitionData, Scheme,
};

const IIA_STREAM: u64 = 0x11a;
const DIVERGENCE_STREAM: u64 = 0xd1e;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Histories {
    /// One entry per distinct classifier used by this record.
    pub mlp: Vec<TrainHistory>,
    pub align: AlignHistory,
}

/// Outcome of one alignment trained on one partition of one seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub seed: u64,
    pub scheme: Scheme,
    pub loss: LossKind,
    pub cl_eps: f64,
    pub trained_partition: String,
    pub heldout_partition: String,
    pub trained_iia: f64,
    pub heldout_iia: f64,
    /// Full-dimensional EMD on the trained partition.
    pub emd: f64,
    /// Causal-coordinate EMD on the trained partition.
    pub row_emd: f64,
    pub heldout_emd: f64,
    pub heldout_row_emd: f64,
    /// Every metric on the trained partition; `None` when only EMDs were requested.
    pub report: Option<DivergenceReport>,
    pub mlp_checksum: String,
    pub align_checksum: String,
    #[serde(default)]
    pub histories: Histories,
}

impl RunRecord {
    pub const CSV_HEADER: &'static str = "seed,scheme,loss,cl_eps,trained_partition,heldout_partition,trained_iia,heldout_iia,emd,row_emd,heldout_emd,heldout_row_emd,baseline_emd,nearest_cos,nearest_l2,min_cos_pairing,min_l2_pairing,local_pca,llr,kde_neg_log,mlp_checksum,align_checksum";

    pub fn csv_row(&self) -> String {
        let opt = |f: fn(&DivergenceReport) -> f64| self.report.as_ref().map_or(String::new(), |r| sig9(f(r)));
        [
            self.seed.to_string(),
            self.scheme.as_str().to_string(),
            self.loss.to_string(),
            sig9(self.cl_eps),
            self.trained_partition.clone(),
            self.heldout_partition.clone(),
            sig9(self.trained_iia),
            sig9(self.heldout_iia),
            sig9(self.emd),
            sig9(self.row_emd),
            sig9(self.heldout_emd),
            sig9(self.heldout_row_emd),
            opt(|r| r.baseline_emd),
            opt(|r| r.nearest_cos),
            opt(|r| r.nearest_l2),
            opt(|r| r.min_cos_pairing),
            opt(|r| r.min_l2_pairing),
            opt(|r| r.local_pca),
            opt(|r| r.llr),
            opt(|r| r.kde_neg_log),
            self.mlp_checksum.clone(),
            self.align_checksum.clone(),
        ]
        .join(",")
    }
}

/// Everything one seed produces.
#[derive(Clone, Debug)]
pub struct SeedOutput {
    pub seed: u64,
    pub records: Vec<RunRecord>,
    /// `(trained partition, CSV)` for the PCA scatter of each alignment.
    pub scatters: Vec<(String, String)>,
    pub mlps: Vec<(String, Mlp)>,
    pub alignments: Vec<(String, AlignmentFunction)>,
}

fn hex(x: u64) -> String {
    format!("{x:016x}")
}

/// `cap` samples at most, the same number from every class.
fn stratified(reps: &[LabeledRep], cap: usize, rng: &mut Rng) -> Vec<LabeledRep> {
    let mut by_class: BTreeMap<usize, Vec<&LabeledRep>> = BTreeMap::new();
    for r in reps {
        by_class.entry(r.class_label).or_default().push(r);
    }
    let smallest = by_class.values().map(Vec::len).min().unwrap_or(0);
    let per_class = (cap / by_class.len().max(1)).clamp(1, smallest.max(1));
    let mut out = Vec::new();
    for members in by_class.values_mut() {
        rng.shuffle(members);
        out.extend(members.iter().take(per_class).map(|r| (*r).clone()));
    }
    out
}

/// IIA and the natural/intervened comparison for one partition.
#[derive(Clone, Debug)]
pub struct Evaluation {
    pub iia: f64,
    pub cmp: ComparisonSet,
    /// Counterfactual class of each intervened vector.
    pub labels: Vec<usize>,
    /// Post-intervention `(x1, x2)` of each intervened vector.
    pub keys: Vec<(f64, f64)>,
    pub natural_labels: Vec<usize>,
}

/// Balanced interventions on the validation split of `part`, scored by
/// `model` for IIA and compared with the split's naturals.
pub fn evaluate_partition(
    config: &ExperimentConfig,
    model: &Mlp,
    af: &AlignmentFunction,
    sel: &VariableSelector,
    part: &PartitionData,
    grid: &ClassGrid,
    seed: u64,
) -> Result<Evaluation> {
    let k = part.partition.included_classes.len().max(1);
    let variable = config.align.variable;
    let accept = |c: usize| part.partition.contains(c);
    let per_class = config.eval.iia_samples.div_ceil(k);
    let iia_samples = draw_balanced_samples(&part.valid, grid, variable, per_class, &mut Rng::stream(seed, IIA_STREAM), accept)?;
    let iia = evaluate_iia(&model.frozen(), af, sel, &iia_samples)?;

    let mut rng = Rng::stream(seed, DIVERGENCE_STREAM);
    let cap = config.eval.divergence_samples;
    let natural = stratified(&part.valid, cap, &mut rng);
    let samples: Vec<InterventionSample> =
        draw_balanced_samples(&part.valid, grid, variable, (cap / k).max(1), &mut rng, accept)?;
    let mut pools: BTreeMap<usize, Vec<&LabeledRep>> = BTreeMap::new();
    for r in &part.valid {
        pools.entry(r.class_label).or_default().push(r);
    }
    let mut intervened = Vec::with_capacity(samples.len());
    let mut ground_truth = Vec::with_capacity(samples.len());
    for s in &samples {
        intervened.push(interchange(af, sel, &s.h_trg, &s.h_src)?);
        let pool = &pools[&s.counterfactual_label];
        ground_truth.push(pool[rng.below(pool.len())].h.clone());
    }
    Ok(Evaluation {
        iia,
        natural_labels: natural.iter().map(|r| r.class_label).collect(),
        cmp: ComparisonSet { natural: natural.into_iter().map(|r| r.h).collect(), intervened, ground_truth },
        labels: samples.iter().map(|s| s.counterfactual_label).collect(),
        keys: samples.iter().map(|s| s.cl_key).collect(),
    })
}

/// Top-two principal components of natural ∪ intervened as CSV rows
/// `kind,class,pc1,pc2`.
pub fn scatter_csv(natural: &[DVector<f64>], natural_labels: &[usize], intervened: &[DVector<f64>], labels: &[usize]) -> Result<String> {
    let all: Vec<DVector<f64>> = natural.iter().chain(intervened).cloned().collect();
    let basis = pca(&all, 2)?;
    let mut out = String::from("kind,class,pc1,pc2\n");
    let rows = natural.iter().zip(natural_labels).map(|(v, c)| ("natural", v, c));
    for (kind, v, class) in rows.chain(intervened.iter().zip(labels).map(|(v, c)| ("intervened", v, c))) {
        let coords = basis.components.tr_mul(&(v - &basis.mean));
        let pc = |i: usize| if i < coords.len() { coords[i] } else { 0.0 };
        writeln!(out, "{kind},{class},{},{}", sig9(pc(0)), sig9(pc(1))).expect("write to string");
    }
    Ok(out)
}

fn mlp_for(train: &[LabeledRep], valid: &[LabeledRep], config: &ExperimentConfig, seed: u64) -> Result<(Mlp, TrainHistory)> {
    train_mlp(train, valid, &crate::neural::MlpConfig { seed, ..config.mlp.clone() })
}

/// The dataset of one seed and its two partitions.
#[derive(Clone, Debug)]
pub struct SeedData {
    pub seed: u64,
    pub data: Vec<LabeledRep>,
    pub grid: ClassGrid,
    pub parts: [PartitionData; 2],
}

impl SeedData {
    pub fn new(config: &ExperimentConfig, seed: u64) -> Result<Self> {
        let dataset_config = crate::synthdata::DatasetConfig { seed, ..config.dataset.clone() };
        let data = generate_dataset(&dataset_config)?;
        let grid = dataset_config.grid();
        let (pa, pb) = split_partitions(&data, &grid, config.scheme, seed, config.train_fraction)?;
        Ok(Self { seed, data, grid, parts: [pa, pb] })
    }

    pub fn names(&self) -> [String; 2] {
        [self.parts[0].partition.name.as_str().to_string(), self.parts[1].partition.name.as_str().to_string()]
    }

    pub fn partition_index(&self, name: &str) -> Result<usize> {
        self.names()
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| Error::Config(format!("no partition `{name}` in this scheme (have {:?})", self.names())))
    }
}

/// Default scheme: one classifier on every class, named `all`. OOD: one
/// classifier per partition, named after it.
pub fn train_classifiers(config: &ExperimentConfig, sd: &SeedData) -> Result<Vec<(String, Mlp, TrainHistory)>> {
    let seed = sd.seed;
    match config.scheme {
        Scheme::Default => {
            let splits = split_by_class(&sd.data, seed, config.train_fraction);
            let train: Vec<LabeledRep> = splits.values().flat_map(|(t, _)| t.iter().cloned()).collect();
            let valid: Vec<LabeledRep> = splits.values().flat_map(|(_, v)| v.iter().cloned()).collect();
            let (m, h) = mlp_for(&train, &valid, config, seed)?;
            Ok(vec![("all".to_string(), m, h)])
        }
        Scheme::Ood => {
            let names = sd.names();
            let trained = par::try_map_slice(&[0usize, 1], |&j| {
                mlp_for(&sd.parts[j].train, &sd.parts[j].valid, config, seed.wrapping_mul(2).wrapping_add(j as u64))
            })?;
            Ok(trained.into_iter().zip(names).map(|((m, h), n)| (n, m, h)).collect())
        }
    }
}

/// Dataset, classifier(s) and one alignment per partition for one seed.
pub fn run_seed(config: &ExperimentConfig, seed: u64) -> Result<SeedOutput> {
    config.validate()?;
    let sd = SeedData::new(config, seed)?;
    let classifiers = train_classifiers(config, &sd)?;
    run_seed_with(config, &sd, classifiers)
}

/// One alignment per partition against already trained classifiers, as
/// returned by [`train_classifiers`] for the same config and seed data.
pub fn run_seed_with(
    config: &ExperimentConfig,
    sd: &SeedData,
    classifiers: Vec<(String, Mlp, TrainHistory)>,
) -> Result<SeedOutput> {
    let seed = sd.seed;
    let SeedData { grid, parts, .. } = sd;
    let names = sd.names();
    let expected = if config.scheme == Scheme::Default { 1 } else { 2 };
    if classifiers.len() != expected {
        return Err(Error::Config(format!("expected {expected} classifiers, got {}", classifiers.len())));
    }
    let models: Vec<(Mlp, TrainHistory)> = classifiers.iter().map(|(_, m, h)| (m.clone(), h.clone())).collect();
    let model_of = |j: usize| if models.len() == 1 { 0 } else { j };
    let dim = config.dataset.dim();

    let per_partition = par::try_map_slice(&[0usize, 1], |&j| {
        let held = 1 - j;
        let align_config = config.align_for(seed, j);
        let sel = align_config.intervened_selector(dim)?;
        let (model, mlp_history) = &models[model_of(j)];
        let data = AlignData { train: &parts[j].train, valid: &parts[j].valid, partition: &parts[j].partition, grid };
        let (af, align_history) = train_alignment(model, data, &align_config)?;

        let trained = evaluate_partition(config, model, &af, &sel, &parts[j], grid, seed)?;
        let (held_model, held_history) = &models[model_of(held)];
        let heldout = evaluate_partition(config, held_model, &af, &sel, &parts[held], grid, seed)?;
        let dims = &config.eval.divergence.causal_dims;
        let scale = config.eval.divergence.row_scale;
        let (emd, report) = if config.eval.emd_only {
            (emd_divergence(&trained.cmp.natural, &trained.cmp.intervened)?, None)
        } else {
            let report = full_report(&trained.cmp, &config.eval.divergence)?;
            (report.emd, Some(report))
        };
        let mut mlp_histories = vec![mlp_history.clone()];
        if models.len() > 1 {
            mlp_histories.push(held_history.clone());
        }
        let record = RunRecord {
            seed,
            scheme: config.scheme,
            loss: config.loss,
            cl_eps: config.loss_mode().cl_eps(),
            trained_partition: names[j].clone(),
            heldout_partition: names[held].clone(),
            trained_iia: trained.iia,
            heldout_iia: heldout.iia,
            emd,
            row_emd: row_emd(&trained.cmp.natural, &trained.cmp.intervened, dims, scale)?,
            heldout_emd: emd_divergence(&heldout.cmp.natural, &heldout.cmp.intervened)?,
            heldout_row_emd: row_emd(&heldout.cmp.natural, &heldout.cmp.intervened, dims, scale)?,
            report,
            mlp_checksum: hex(model.checksum()),
            align_checksum: hex(fnv1a(alignment_to_text(&af).as_bytes())),
            histories: Histories { mlp: mlp_histories, align: align_history },
        };
        let scatter = scatter_csv(&trained.cmp.natural, &trained.natural_labels, &trained.cmp.intervened, &trained.labels)?;
        Ok::<_, Error>((record, scatter, af))
    })?;

    let mut out = SeedOutput { seed, records: Vec::new(), scatters: Vec::new(), mlps: Vec::new(), alignments: Vec::new() };
    for (j, (record, scatter, af)) in per_partition.into_iter().enumerate() {
        out.records.push(record);
        out.scatters.push((names[j].clone(), scatter));
        out.alignments.push((names[j].clone(), af));
    }
    out.mlps = classifiers.into_iter().map(|(n, m, _)| (n, m)).collect();
    Ok(out)
}

/// Pretty JSON with every float rounded to 9 significant digits.
pub fn to_rounded_json<T: Serialize>(value: &T) -> String {
    let mut v = serde_json::to_value(value).expect("serializable");
    round_json(&mut v);
    let mut text = serde_json::to_string_pretty(&v).expect("serializable");
    text.push('\n');
    text
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text)?;
    Ok(())
}

pub fn seed_dir(out: &Path, seed: u64) -> std::path::PathBuf {
    out.join(format!("seed_{seed}"))
}

/// Write one seed's files under `out/seed_<seed>/`.
pub fn write_seed(config: &ExperimentConfig, out: &Path, seed: &SeedOutput) -> Result<()> {
    let dir = seed_dir(out, seed.seed);
    std::fs::create_dir_all(&dir)?;
    write(&dir.join("records.json"), &to_rounded_json(&seed.records))?;
    for (name, csv) in &seed.scatters {
        write(&dir.join(format!("scatter_{name}.csv")), csv)?;
    }
    if config.save_checkpoints {
        for (name, model) in &seed.mlps {
            save_mlp(&dir.join(format!("mlp_{name}.txt")), model)?;
        }
        for (name, af) in &seed.alignments {
            save_alignment(&dir.join(format!("align_{name}.txt")), af)?;
        }
    }
    Ok(())
}

/// Per-metric means over records.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub runs: usize,
    pub trained_iia: f64,
    pub heldout_iia: f64,
    pub emd: f64,
    pub row_emd: f64,
    pub heldout_row_emd: f64,
}

impl Aggregate {
    pub fn of(records: &[RunRecord]) -> Self {
        let n = records.len().max(1) as f64;
        let mean = |f: fn(&RunRecord) -> f64| records.iter().map(f).sum::<f64>() / n;
        Self {
            runs: records.len(),
            trained_iia: mean(|r| r.trained_iia),
            heldout_iia: mean(|r| r.heldout_iia),
            emd: mean(|r| r.emd),
            row_emd: mean(|r| r.row_emd),
            heldout_row_emd: mean(|r| r.heldout_row_emd),
        }
    }
}

#[derive(Clone, Debug, Serialize)]
struct Summary<'a> {
    scheme: Scheme,
    loss: LossKind,
    cl_eps: f64,
    seeds: &'a [u64],
    aggregate: Aggregate,
    records: Vec<serde_json::Value>,
}

pub fn metrics_csv(records: &[RunRecord]) -> String {
    let mut out = String::from(RunRecord::CSV_HEADER);
    out.push('\n');
    for r in records {
        out.push_str(&r.csv_row());
        out.push('\n');
    }
    out
}

/// Write `summary.json`, `metrics.csv` and the resolved config.
pub fn write_summary(config: &ExperimentConfig, out: &Path, records: &[RunRecord]) -> Result<()> {
    std::fs::create_dir_all(out)?;
    let slim: Vec<serde_json::Value> = records
        .iter()
        .map(|r| {
            let mut v = serde_json::to_value(r).expect("serializable");
            v.as_object_mut().expect("record is an object").remove("histories");
            v
        })
        .collect();
    let summary = Summary {
        scheme: config.scheme,
        loss: config.loss,
        cl_eps: config.loss_mode().cl_eps(),
        seeds: &config.seeds,
        aggregate: Aggregate::of(records),
        records: slim,
    };
    write(&out.join("summary.json"), &to_rounded_json(&summary))?;
    write(&out.join("metrics.csv"), &metrics_csv(records))?;
    write(&out.join("config.toml"), &config.to_toml())?;
    Ok(())
}

/// Run every seed (in parallel) and, when `out` is given, write per-seed
/// files followed by the merged summary.
pub fn run_pipeline(config: &ExperimentConfig, out: Option<&Path>) -> Result<Vec<RunRecord>> {
    config.validate()?;
    let seeds = par::try_map_slice(&config.seeds, |&seed| {
        let output = run_seed(config, seed)?;
        if let Some(dir) = out {
            write_seed(config, dir, &output)?;
        }
        Ok::<_, Error>(output)
    })?;
    let records: Vec<RunRecord> = seeds.into_iter().flat_map(|s| s.records).collect();
    if let Some(dir) = out {
        write_summary(config, dir, &records)?;
    }
    Ok(records)
}
