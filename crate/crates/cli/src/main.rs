// SPDX-License-Identifier: MIT OR Apache-2.0

//! `repdiv`: command-line driver for the experiment harness.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use nalgebra::DVector;
use serde_json::json;

use repdiv::alignment::{
    alignment_to_text, load_alignment, save_alignment, train_alignment, AlignData, AlignmentFunction,
};
use repdiv::divergence::{full_report, ComparisonSet, DivergenceReport};
use repdiv::format::sig9;
use repdiv::harness::{
    evaluate_partition, metrics_csv, parse_toml_value, regression_study, regression_table, run_pipeline, scatter_csv,
    sweep, sweep_csv, to_rounded_json, train_classifiers, with_overrides, worked_examples_suite, ExperimentConfig,
    LossKind, RunRecord, SeedData, SweepAxis,
};
use repdiv::neural::{evaluate_split, load_mlp, save_mlp, Mlp};
use repdiv::numerics::Rng;
use repdiv::synthdata::{dataset_to_csv, read_dataset_csv, LabeledRep, Scheme};

#[derive(Parser, Debug)]
#[command(name = "repdiv", version, about = "Representation divergence experiments on synthetic data")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// TOML experiment config; defaults apply to missing keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run only this seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (falls back to the config, then $REPDIV_OUT).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true, value_enum)]
    scheme: Option<SchemeArg>,
    /// Alignment objective: das, cl or das+cl.
    #[arg(long, global = true, value_parser = parse_loss)]
    loss: Option<LossKind>,
    /// CL weight for `--loss das+cl`.
    #[arg(long = "cl-eps", global = true)]
    cl_eps: Option<f64>,
    /// Format of what is printed on stdout.
    #[arg(long, global = true, value_enum, default_value_t = Format::Json)]
    format: Format,
    /// Override any config key, e.g. `--set align.learning_rate=0.01`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum SchemeArg {
    Default,
    Ood,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum Format {
    Json,
    Csv,
}

fn parse_loss(s: &str) -> Result<LossKind, String> {
    s.parse::<LossKind>().map_err(|e| e.to_string())
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic dataset of one seed.
    GenData,
    /// Train the classifier(s) of one seed.
    TrainMlp,
    /// Train alignments against a classifier checkpoint (or a fresh one).
    TrainAlign {
        /// Classifier checkpoint; trained from the config when absent.
        #[arg(long)]
        mlp: Option<PathBuf>,
        /// Only this partition (default: both).
        #[arg(long)]
        partition: Option<String>,
    },
    /// Evaluate an alignment checkpoint, or run the full pipeline without one.
    Evaluate {
        #[arg(long, requires = "align")]
        mlp: Option<PathBuf>,
        #[arg(long, requires = "mlp")]
        align: Option<PathBuf>,
        /// Partition to evaluate a checkpoint on (default: both).
        #[arg(long, requires = "align")]
        partition: Option<String>,
    },
    /// Divergence metrics between dataset-format CSV files.
    Divergence {
        #[arg(long)]
        natural: PathBuf,
        #[arg(long)]
        intervened: PathBuf,
        /// Ground-truth counterparts; drawn from same-class naturals when absent.
        #[arg(long = "ground-truth")]
        ground_truth: Option<PathBuf>,
    },
    /// Run the exact worked-example checks.
    Examples,
    /// Regress held-out IIA on training causal-axis EMD.
    Regress {
        /// `summary.json` files or directories containing one.
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
    },
    /// Run the pipeline over a grid of config overrides.
    Sweep {
        /// Axis such as `align.learning_rate=[0.001,0.01]`; repeatable.
        #[arg(long = "axis", required = true)]
        axes: Vec<String>,
    },
}

// ---------- config ----------

fn load_config(c: &Common) -> Result<ExperimentConfig> {
    let mut config = match &c.config {
        Some(p) => ExperimentConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
        None => ExperimentConfig::default(),
    };
    let overrides = c
        .overrides
        .iter()
        .map(|kv| {
            let (k, v) = kv.split_once('=').with_context(|| format!("override `{kv}` is not KEY=VALUE"))?;
            Ok((k.trim().to_string(), parse_toml_value(v.trim())))
        })
        .collect::<Result<Vec<_>>>()?;
    if !overrides.is_empty() {
        config = with_overrides(&config, &overrides)?;
    }
    if let Some(s) = c.scheme {
        config.scheme = match s {
            SchemeArg::Default => Scheme::Default,
            SchemeArg::Ood => Scheme::Ood,
        };
    }
    if let Some(l) = c.loss {
        config.loss = l;
    }
    if let Some(e) = c.cl_eps {
        config.cl_eps = e;
    }
    if let Some(s) = c.seed {
        config.seeds = vec![s];
    }
    config.validate()?;
    Ok(config)
}

fn out_dir(c: &Common, config: &ExperimentConfig) -> Result<PathBuf> {
    let dir = config.resolve_output(c.out.as_deref());
    std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir)
}

fn first_seed(config: &ExperimentConfig) -> u64 {
    config.seeds[0]
}

fn partitions(sd: &SeedData, only: Option<&str>) -> Result<Vec<usize>> {
    match only {
        Some(name) => Ok(vec![sd.partition_index(name)?]),
        None => Ok(vec![0, 1]),
    }
}

// ---------- output ----------

fn emit_json(value: &serde_json::Value) {
    print!("{}", to_rounded_json(value));
}

fn csv_table(header: &[&str], rows: &[Vec<String>]) -> String {
    let mut out = header.join(",");
    out.push('\n');
    for r in rows {
        out.push_str(&r.join(","));
        out.push('\n');
    }
    out
}

const REPORT_FIELDS: [&str; 11] = [
    "emd",
    "baseline_emd",
    "row_emd",
    "nearest_cos",
    "nearest_l2",
    "min_cos_pairing",
    "min_l2_pairing",
    "local_pca",
    "llr",
    "kde_neg_log",
    "kde_underflows",
];

fn report_cells(r: &DivergenceReport) -> Vec<String> {
    let mut cells: Vec<String> = [
        r.emd,
        r.baseline_emd,
        r.row_emd,
        r.nearest_cos,
        r.nearest_l2,
        r.min_cos_pairing,
        r.min_l2_pairing,
        r.local_pca,
        r.llr,
        r.kde_neg_log,
    ]
    .iter()
    .map(|&v| sig9(v))
    .collect();
    cells.push(r.kde_underflows.to_string());
    cells
}

fn hex(x: u64) -> String {
    format!("{x:016x}")
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

// ---------- verbs ----------

fn gen_data(c: &Common) -> Result<()> {
    let config = load_config(c)?;
    let out = out_dir(c, &config)?;
    let seed = first_seed(&config);
    let sd = SeedData::new(&config, seed)?;
    let path = out.join(format!("dataset_seed_{seed}.csv"));
    write_text(&path, &dataset_to_csv(&sd.data))?;

    let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
    for r in &sd.data {
        *counts.entry(r.class_label).or_default() += 1;
    }
    match c.format {
        Format::Json => emit_json(&json!({
            "seed": seed,
            "path": path,
            "samples": sd.data.len(),
            "dim": config.dataset.dim(),
            "class_counts": counts,
            "partitions": sd.names(),
        })),
        Format::Csv => {
            let rows: Vec<Vec<String>> = counts.iter().map(|(k, v)| vec![k.to_string(), v.to_string()]).collect();
            print!("{}", csv_table(&["class", "samples"], &rows));
        }
    }
    Ok(())
}

fn train_mlp_verb(c: &Common) -> Result<()> {
    let config = load_config(c)?;
    let out = out_dir(c, &config)?;
    let seed = first_seed(&config);
    let sd = SeedData::new(&config, seed)?;
    let mut rows = Vec::new();
    for (name, model, history) in train_classifiers(&config, &sd)? {
        save_mlp(&out.join(format!("mlp_{name}.txt")), &model)?;
        write_text(&out.join(format!("mlp_{name}_history.json")), &to_rounded_json(&history))?;
        let valid: Vec<LabeledRep> = match config.scheme {
            Scheme::Default => sd.parts.iter().flat_map(|p| p.valid.iter().cloned()).collect(),
            Scheme::Ood => sd.parts[sd.partition_index(&name)?].valid.clone(),
        };
        let (loss, acc) = evaluate_split(&model.frozen(), &valid);
        rows.push((name, loss, acc, hex(model.checksum())));
    }
    match c.format {
        Format::Json => emit_json(&json!({
            "seed": seed,
            "models": rows.iter().map(|(n, l, a, h)| json!({"name": n, "valid_loss": l, "valid_accuracy": a, "checksum": h})).collect::<Vec<_>>(),
        })),
        Format::Csv => {
            let rows: Vec<Vec<String>> =
                rows.into_iter().map(|(n, l, a, h)| vec![n, sig9(l), sig9(a), h]).collect();
            print!("{}", csv_table(&["name", "valid_loss", "valid_accuracy", "checksum"], &rows));
        }
    }
    Ok(())
}

/// The classifier that scores partition `j`: a checkpoint, or one trained now.
fn classifiers_for(config: &ExperimentConfig, sd: &SeedData, checkpoint: Option<&Path>) -> Result<Vec<(String, Mlp)>> {
    match checkpoint {
        Some(p) => {
            let m = load_mlp(p).with_context(|| format!("loading {}", p.display()))?;
            Ok(vec![("checkpoint".to_string(), m)])
        }
        None => Ok(train_classifiers(config, sd)?.into_iter().map(|(n, m, _)| (n, m)).collect()),
    }
}

fn model_for<'a>(models: &'a [(String, Mlp)], j: usize) -> &'a Mlp {
    if models.len() == 1 {
        &models[0].1
    } else {
        &models[j].1
    }
}

fn train_align_verb(c: &Common, mlp: Option<&Path>, partition: Option<&str>) -> Result<()> {
    let config = load_config(c)?;
    let out = out_dir(c, &config)?;
    let seed = first_seed(&config);
    let sd = SeedData::new(&config, seed)?;
    let models = classifiers_for(&config, &sd, mlp)?;
    let names = sd.names();
    let mut rows = Vec::new();
    for j in partitions(&sd, partition)? {
        let align = config.align_for(seed, j);
        let sel = align.intervened_selector(config.dataset.dim())?;
        let model = model_for(&models, j);
        let part = &sd.parts[j];
        let data = AlignData { train: &part.train, valid: &part.valid, partition: &part.partition, grid: &sd.grid };
        let (af, history) = train_alignment(model, data, &align)?;
        save_alignment(&out.join(format!("align_{}.txt", names[j])), &af)?;
        write_text(&out.join(format!("align_{}_history.json", names[j])), &to_rounded_json(&history))?;
        let eval = evaluate_partition(&config, model, &af, &sel, part, &sd.grid, seed)?;
        rows.push((names[j].clone(), eval.iia, history.best_epoch, checksum_of(&af)));
    }
    match c.format {
        Format::Json => emit_json(&json!({
            "seed": seed,
            "loss": config.loss.to_string(),
            "alignments": rows.iter().map(|(n, iia, best, h)| json!({"partition": n, "iia": iia, "best_epoch": best, "checksum": h})).collect::<Vec<_>>(),
        })),
        Format::Csv => {
            let rows: Vec<Vec<String>> = rows
                .into_iter()
                .map(|(n, iia, best, h)| vec![n, sig9(iia), best.map_or(String::new(), |b| b.to_string()), h])
                .collect();
            print!("{}", csv_table(&["partition", "iia", "best_epoch", "checksum"], &rows));
        }
    }
    Ok(())
}

fn checksum_of(af: &AlignmentFunction) -> String {
    hex(repdiv::format::fnv1a(alignment_to_text(af).as_bytes()))
}

fn vectors_csv(vectors: &[DVector<f64>], labels: &[usize], keys: &[(f64, f64)]) -> String {
    let reps: Vec<LabeledRep> = vectors
        .iter()
        .zip(labels)
        .zip(keys)
        .map(|((h, &class_label), &(x1, x2))| LabeledRep { h: h.clone(), class_label, x1, x2 })
        .collect();
    dataset_to_csv(&reps)
}

fn evaluate_checkpoint(c: &Common, mlp: &Path, align: &Path, partition: Option<&str>) -> Result<()> {
    let config = load_config(c)?;
    let out = out_dir(c, &config)?;
    let seed = first_seed(&config);
    let sd = SeedData::new(&config, seed)?;
    let model = load_mlp(mlp).with_context(|| format!("loading {}", mlp.display()))?;
    let af = load_alignment(align).with_context(|| format!("loading {}", align.display()))?;
    let sel = config.align.intervened_selector(config.dataset.dim())?;
    let names = sd.names();
    let mut rows = Vec::new();
    for j in partitions(&sd, partition)? {
        let part = &sd.parts[j];
        let eval = evaluate_partition(&config, &model, &af, &sel, part, &sd.grid, seed)?;
        let report = full_report(&eval.cmp, &config.eval.divergence)?;
        let name = &names[j];
        let natural_keys: Vec<(f64, f64)> = eval.natural_labels.iter().map(|&k| sd.grid.coords(k)).collect();
        write_text(&out.join(format!("natural_{name}.csv")), &vectors_csv(&eval.cmp.natural, &eval.natural_labels, &natural_keys))?;
        write_text(&out.join(format!("intervened_{name}.csv")), &vectors_csv(&eval.cmp.intervened, &eval.labels, &eval.keys))?;
        write_text(
            &out.join(format!("ground_truth_{name}.csv")),
            &vectors_csv(&eval.cmp.ground_truth, &eval.labels, &eval.keys),
        )?;
        write_text(
            &out.join(format!("scatter_{name}.csv")),
            &scatter_csv(&eval.cmp.natural, &eval.natural_labels, &eval.cmp.intervened, &eval.labels)?,
        )?;
        rows.push((name.clone(), eval.iia, report));
    }
    let value = json!({
        "seed": seed,
        "evaluations": rows.iter().map(|(n, iia, r)| json!({"partition": n, "iia": iia, "report": r})).collect::<Vec<_>>(),
    });
    write_text(&out.join("evaluation.json"), &to_rounded_json(&value))?;
    match c.format {
        Format::Json => emit_json(&value),
        Format::Csv => {
            let mut header = vec!["partition", "iia"];
            header.extend(REPORT_FIELDS);
            let rows: Vec<Vec<String>> = rows
                .iter()
                .map(|(n, iia, r)| [vec![n.clone(), sig9(*iia)], report_cells(r)].concat())
                .collect();
            print!("{}", csv_table(&header, &rows));
        }
    }
    Ok(())
}

fn evaluate_pipeline(c: &Common) -> Result<()> {
    let config = load_config(c)?;
    let out = out_dir(c, &config)?;
    let records = run_pipeline(&config, Some(&out))?;
    print_records(c.format, &records);
    Ok(())
}

fn print_records(format: Format, records: &[RunRecord]) {
    match format {
        Format::Json => {
            let slim: Vec<serde_json::Value> = records
                .iter()
                .map(|r| {
                    let mut v = serde_json::to_value(r).expect("serializable");
                    v.as_object_mut().expect("record is an object").remove("histories");
                    v
                })
                .collect();
            emit_json(&serde_json::Value::Array(slim));
        }
        Format::Csv => print!("{}", metrics_csv(records)),
    }
}

fn read_vectors(path: &Path) -> Result<Vec<LabeledRep>> {
    let reps = read_dataset_csv(path).with_context(|| format!("reading {}", path.display()))?;
    if reps.is_empty() {
        bail!("{} has no rows", path.display());
    }
    Ok(reps)
}

fn divergence_verb(c: &Common, natural: &Path, intervened: &Path, ground_truth: Option<&Path>) -> Result<()> {
    let config = load_config(c)?;
    let natural = read_vectors(natural)?;
    let intervened = read_vectors(intervened)?;
    let ground_truth = match ground_truth {
        Some(p) => read_vectors(p)?.into_iter().map(|r| r.h).collect(),
        None => {
            let mut pools: BTreeMap<usize, Vec<&LabeledRep>> = BTreeMap::new();
            for r in &natural {
                pools.entry(r.class_label).or_default().push(r);
            }
            let mut rng = Rng::new(first_seed(&config));
            intervened
                .iter()
                .map(|r| {
                    let pool = pools
                        .get(&r.class_label)
                        .with_context(|| format!("no natural of class {} to pair with", r.class_label))?;
                    Ok(pool[rng.below(pool.len())].h.clone())
                })
                .collect::<Result<Vec<_>>>()?
        }
    };
    let cmp = ComparisonSet {
        natural: natural.into_iter().map(|r| r.h).collect(),
        intervened: intervened.into_iter().map(|r| r.h).collect(),
        ground_truth,
    };
    let report = full_report(&cmp, &config.eval.divergence)?;
    match c.format {
        Format::Json => emit_json(&serde_json::to_value(&report)?),
        Format::Csv => print!("{}", csv_table(&REPORT_FIELDS, &[report_cells(&report)])),
    }
    Ok(())
}

fn examples_verb(c: &Common) -> Result<bool> {
    let report = worked_examples_suite();
    match c.format {
        Format::Json => emit_json(&serde_json::to_value(&report)?),
        Format::Csv => {
            let rows: Vec<Vec<String>> = report
                .cases
                .iter()
                .map(|k| vec![k.name.clone(), k.passed.to_string(), format!("\"{}\"", k.detail.replace('"', "'"))])
                .collect();
            print!("{}", csv_table(&["case", "passed", "detail"], &rows));
        }
    }
    if !report.all_passed() {
        eprintln!("failing cases: {}", report.failures().join(", "));
    }
    Ok(report.all_passed())
}

fn read_records(input: &Path) -> Result<Vec<RunRecord>> {
    let path = if input.is_dir() { input.join("summary.json") } else { input.to_path_buf() };
    let text = std::fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
    let value: serde_json::Value = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    let records = value.get("records").cloned().unwrap_or(value);
    serde_json::from_value(records).with_context(|| format!("{} holds no run records", path.display()))
}

fn regress_verb(c: &Common, inputs: &[PathBuf]) -> Result<()> {
    let mut records = Vec::new();
    for input in inputs {
        records.extend(read_records(input)?);
    }
    let fit = regression_study(&records)?;
    if let Some(out) = &c.out {
        std::fs::create_dir_all(out)?;
        write_text(&out.join("regression.txt"), &regression_table(&fit))?;
        write_text(&out.join("regression.json"), &to_rounded_json(&fit))?;
    }
    match c.format {
        Format::Json => emit_json(&serde_json::to_value(&fit)?),
        Format::Csv => {
            let row = vec![
                sig9(fit.intercept),
                sig9(fit.coefficient),
                sig9(fit.coefficient_std_err),
                sig9(fit.r_squared),
                sig9(fit.f_statistic),
                sig9(fit.p_value),
                fit.n_observations.to_string(),
            ];
            print!(
                "{}",
                csv_table(&["intercept", "coefficient", "coefficient_std_err", "r_squared", "f_statistic", "p_value", "n_observations"], &[row])
            );
        }
    }
    Ok(())
}

fn sweep_verb(c: &Common, axes: &[String]) -> Result<()> {
    let config = load_config(c)?;
    let out = out_dir(c, &config)?;
    let axes = axes.iter().map(|a| SweepAxis::parse(a)).collect::<repdiv::Result<Vec<_>>>()?;
    let points = sweep(&config, &axes, Some(&out))?;
    match c.format {
        Format::Json => emit_json(&serde_json::to_value(&points)?),
        Format::Csv => print!("{}", sweep_csv(&axes, &points)),
    }
    Ok(())
}

fn run(cli: Cli) -> Result<bool> {
    let c = &cli.common;
    match &cli.command {
        Command::GenData => gen_data(c)?,
        Command::TrainMlp => train_mlp_verb(c)?,
        Command::TrainAlign { mlp, partition } => train_align_verb(c, mlp.as_deref(), partition.as_deref())?,
        Command::Evaluate { mlp: Some(m), align: Some(a), partition } => {
            evaluate_checkpoint(c, m, a, partition.as_deref())?
        }
        Command::Evaluate { .. } => evaluate_pipeline(c)?,
        Command::Divergence { natural, intervened, ground_truth } => {
            divergence_verb(c, natural, intervened, ground_truth.as_deref())?
        }
        Command::Examples => return examples_verb(c),
        Command::Regress { inputs } => regress_verb(c, inputs)?,
        Command::Sweep { axes } => sweep_verb(c, axes)?,
    }
    Ok(true)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
