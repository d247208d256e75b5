// SPDX-License-Identifier: MIT OR Apache-2.0

//! End-to-end acceptance checks. Each criterion prints one line,
//! `criterion N: PASS|FAIL  detail`, and the test fails if any criterion
//! outside `KNOWN_RED` fails.

use std::collections::BTreeSet;
use std::io::Write;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};

use repdiv::divergence::{
    distance, emd_divergence, kde_neg_log_density, llr_error, local_pca_distance, min_cost_pairing_distance,
    nearest_distance, row_emd, Bandwidth, Metric,
};
use repdiv::harmless::{classify_divergence, HarmlessParams, Verdict};
use repdiv::harness::{
    gradient_suite, regression_study, run_seed_with, train_classifiers, worked_examples_suite, ExperimentConfig,
    LossKind, RunRecord, SeedData,
};
use repdiv::numerics::{min_cost_matching, sinkhorn_divergence, Rng};
use repdiv::pathology::{
    coordinate_patch, mean_diff_circuit, patch_closure_check, project_to_class_region, ClosureResult, ProjectionMode,
};
use repdiv::synthdata::Scheme;

/// Criteria whose failure is reported but does not fail the test.
const KNOWN_RED: &[usize] = &[6];

const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn v(xs: &[f64]) -> DVector<f64> {
    DVector::from_column_slice(xs)
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for p in permutations(n - 1) {
        for i in 0..=p.len() {
            let mut q = p.clone();
            q.insert(i, n - 1);
            out.push(q);
        }
    }
    out
}

fn class_a() -> Vec<DVector<f64>> {
    vec![v(&[1.0, 0.0, 1.0, 0.0]), v(&[0.0, 1.0, 1.0, 0.0])]
}

fn class_b() -> Vec<DVector<f64>> {
    vec![v(&[0.0, 0.0, 1.0, 0.0]), v(&[0.0, 0.0, 1.0, 1.0])]
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let report = worked_examples_suite();
    let secs = start.elapsed().as_secs_f64();
    let failures = report.failures();
    outcome(
        failures.is_empty() && secs < 5.0,
        format!("{} cases, failures {failures:?}, {secs:.3}s", report.cases.len()),
    )
}

fn criterion_2() -> Outcome {
    let patched = v(&[0.5, 0.5, 1.0, -0.5]);
    let proj = match project_to_class_region(&class_a(), &patched, ProjectionMode::ConvexHull) {
        Ok(p) => p,
        Err(e) => return outcome(false, e.to_string()),
    };
    let gap = (&proj - v(&[0.5, 0.5, 1.0, 0.0])).amax();
    let (_, before) = mean_diff_circuit().forward(&patched, None).expect("forward");
    let (_, after) = mean_diff_circuit().forward(&proj, None).expect("forward");
    let s_before = before.score.unwrap_or(f64::NAN);
    let s_after = after.score.unwrap_or(f64::NAN);
    outcome(
        gap <= 1e-9 && s_after.abs() <= 1e-9 && s_before > 0.0,
        format!("projection gap {gap:.1e}, score {s_before} -> {s_after:.1e}"),
    )
}

fn brute_force_closed(points: &[DVector<f64>]) -> bool {
    for bits in 0..8u32 {
        let s: BTreeSet<usize> = (0..3).filter(|i| bits & (1 << i) != 0).collect();
        for a in points {
            for b in points {
                if !points.contains(&coordinate_patch(&s, a, b).expect("patch")) {
                    return false;
                }
            }
        }
    }
    true
}

fn witness_verifies(points: &[DVector<f64>], viol: &repdiv::pathology::ClosureViolation) -> bool {
    if points.contains(&viol.witness) || viol.sources.len() != 3 {
        return false;
    }
    let mut step = viol.sources[0].clone();
    for k in 1..3 {
        step = coordinate_patch(&BTreeSet::from([k]), &viol.sources[k], &step).expect("patch");
    }
    step == viol.witness && viol.sources.iter().all(|s| points.contains(s))
}

fn criterion_3() -> Outcome {
    let start = Instant::now();
    let mut rng = Rng::new(2024);
    let grid = [0.0, 1.0, 2.0];
    let mut disagreements = 0;
    let mut bad_witnesses = 0;
    for _ in 0..200 {
        let n = 1 + rng.below(10);
        let mut pts: Vec<DVector<f64>> = Vec::new();
        for _ in 0..n {
            let p = DVector::from_fn(3, |_, _| grid[rng.below(3)]);
            if !pts.contains(&p) {
                pts.push(p);
            }
        }
        let brute = brute_force_closed(&pts);
        match patch_closure_check(&pts).expect("closure check") {
            ClosureResult::Closed => disagreements += usize::from(!brute),
            ClosureResult::Violation(viol) => {
                disagreements += usize::from(brute);
                bad_witnesses += usize::from(!witness_verifies(&pts, &viol));
            }
        }
    }

    let mut open_products = 0;
    let mut missed_removals = 0;
    for _ in 0..100 {
        // At least two axes carry two or more values, so dropping a tuple
        // always breaks the product.
        let sizes = [2 + rng.below(2), 2 + rng.below(2), 1 + rng.below(3)];
        let axes: Vec<Vec<f64>> = sizes.iter().map(|&k| (0..k).map(|i| i as f64 + rng.uniform()).collect()).collect();
        let mut pts = Vec::new();
        for &a in &axes[0] {
            for &b in &axes[1] {
                for &c in &axes[2] {
                    pts.push(v(&[a, b, c]));
                }
            }
        }
        if patch_closure_check(&pts).expect("closure check") != ClosureResult::Closed {
            open_products += 1;
        }
        pts.remove(rng.below(pts.len()));
        match patch_closure_check(&pts).expect("closure check") {
            ClosureResult::Violation(viol) if witness_verifies(&pts, &viol) => {}
            _ => missed_removals += 1,
        }
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        disagreements == 0 && bad_witnesses == 0 && open_products == 0 && missed_removals == 0 && secs < 30.0,
        format!(
            "200 random sets: {disagreements} disagreements, {bad_witnesses} bad witnesses; 100 products: \
             {open_products} not closed, {missed_removals} removals missed; {secs:.2}s"
        ),
    )
}

fn criterion_4() -> Outcome {
    let start = Instant::now();
    let checks = match gradient_suite() {
        Ok(c) => c,
        Err(e) => return outcome(false, e.to_string()),
    };
    let secs = start.elapsed().as_secs_f64();
    let worst = checks.iter().map(|c| c.relative_error).fold(0.0, f64::max);
    let names: Vec<String> = checks.iter().map(|c| format!("{}={:.1e}", c.name, c.relative_error)).collect();
    outcome(checks.len() == 4 && worst <= 1e-3 && secs < 60.0, format!("{} ({secs:.2}s)", names.join(", ")))
}

fn two_point_lp(a: &[DVector<f64>], b: &[DVector<f64>]) -> f64 {
    let cost = |x: &DVector<f64>, y: &DVector<f64>| 0.5 * (x - y).norm_squared();
    let straight = 0.5 * (cost(&a[0], &b[0]) + cost(&a[1], &b[1]));
    let crossed = 0.5 * (cost(&a[0], &b[1]) + cost(&a[1], &b[0]));
    straight.min(crossed)
}

fn criterion_5() -> Outcome {
    let mut rng = Rng::new(5);
    let cloud: Vec<_> = (0..60).map(|_| rng.normal_vector(4, 0.0, 1.0)).collect();
    let own = sinkhorn_divergence(&cloud, &cloud, 0.05, 2).expect("self divergence");
    let single = sinkhorn_divergence(&[v(&[0.0, 0.0])], &[v(&[3.0, 4.0])], 0.05, 2).expect("singletons");

    let mut cases = vec![(
        vec![v(&[0.0, 0.0]), v(&[1.0, 0.0])],
        vec![v(&[0.0, 1.0]), v(&[1.0, 1.0])],
    )];
    while cases.len() < 20 {
        let a = vec![rng.normal_vector(2, 0.0, 1.0), rng.normal_vector(2, 0.0, 1.0)];
        let b = vec![rng.normal_vector(2, 0.5, 1.0), rng.normal_vector(2, 0.5, 1.0)];
        // The debiasing terms vanish only for points well apart at this blur.
        if (&a[0] - &a[1]).norm() > 0.5 && (&b[0] - &b[1]).norm() > 0.5 {
            cases.push((a, b));
        }
    }
    let worst_lp = cases
        .iter()
        .map(|(a, b)| (sinkhorn_divergence(a, b, 0.05, 2).expect("two-point") - two_point_lp(a, b)).abs())
        .fold(0.0, f64::max);
    let translated = sinkhorn_divergence(&cases[0].0, &cases[0].1, 0.05, 2).expect("translation");
    outcome(
        own.abs() <= 1e-6 && (single - 12.5).abs() <= 1e-3 && worst_lp <= 2e-2,
        format!(
            "self {own:.1e}, singleton {single:.6}, translated pair {translated:.4}, worst 2-point LP gap {worst_lp:.1e}"
        ),
    )
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn sd(xs: &[f64]) -> f64 {
    let m = mean(xs);
    (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() - 1).max(1) as f64).sqrt()
}

/// Reduced training budget shared by the two pipeline criteria.
fn pipeline_config(scheme: Scheme) -> ExperimentConfig {
    let mut c = ExperimentConfig { scheme, seeds: SEEDS.to_vec(), ..Default::default() };
    c.align.max_epochs = 60;
    c.align.patience = 30;
    c.align.samples_per_epoch = 1024;
    c.eval.iia_samples = 1000;
    c.eval.divergence_samples = 300;
    c.eval.emd_only = true;
    c
}

/// Every seed trains its classifiers once; each loss then trains and scores
/// its own alignments against those classifiers.
fn run_losses(config: &ExperimentConfig, losses: &[LossKind]) -> Vec<RunRecord> {
    let mut records = Vec::new();
    for &seed in &SEEDS {
        let sd = SeedData::new(config, seed).expect("seed data");
        let classifiers = train_classifiers(config, &sd).expect("classifiers");
        for &loss in losses {
            let c = ExperimentConfig { loss, ..config.clone() };
            records.extend(run_seed_with(&c, &sd, classifiers.clone()).expect("seed run").records);
        }
    }
    records
}

fn per_seed(records: &[RunRecord], loss: LossKind, f: fn(&RunRecord) -> f64) -> Vec<f64> {
    SEEDS
        .iter()
        .map(|&s| {
            let xs: Vec<f64> = records.iter().filter(|r| r.seed == s && r.loss == loss).map(f).collect();
            mean(&xs)
        })
        .collect()
}

fn criterion_6() -> Outcome {
    let start = Instant::now();
    let records = run_losses(&pipeline_config(Scheme::Default), &[LossKind::Das, LossKind::Cl]);
    let das_iia = mean(&per_seed(&records, LossKind::Das, |r| r.heldout_iia));
    let cl_iia = mean(&per_seed(&records, LossKind::Cl, |r| r.heldout_iia));
    let das_emd = per_seed(&records, LossKind::Das, |r| r.row_emd);
    let cl_emd = per_seed(&records, LossKind::Cl, |r| r.row_emd);
    let wins = das_emd.iter().zip(&cl_emd).filter(|(d, c)| c < d).count();
    let (d, c) = (mean(&das_emd), mean(&cl_emd));
    let iia_ok = das_iia >= 0.98 && cl_iia >= 0.98;
    let order_ok = wins >= 4;
    let bands_ok = (0.02..=0.06).contains(&d) && (0.002..=0.02).contains(&c);
    outcome(
        iia_ok && order_ok && bands_ok,
        format!(
            "held-out IIA das {das_iia:.4} cl {cl_iia:.4} [{}]; row EMD cl<das in {wins}/5 [{}]; \
             das {d:.5}±{:.5} cl {c:.5}±{:.5} [bands {}]; {:.0}s",
            ok(iia_ok),
            ok(order_ok),
            sd(&das_emd),
            sd(&cl_emd),
            ok(bands_ok),
            start.elapsed().as_secs_f64()
        ),
    )
}

fn criterion_7() -> Outcome {
    let start = Instant::now();
    let records = run_losses(&pipeline_config(Scheme::Ood), &[LossKind::Das, LossKind::Cl, LossKind::DasCl]);
    let das = mean(&per_seed(&records, LossKind::Das, |r| r.heldout_iia));
    let cl = mean(&per_seed(&records, LossKind::Cl, |r| r.heldout_iia));
    let direction = cl > das;
    match regression_study(&records) {
        Ok(fit) => {
            let slope = fit.coefficient < 0.0 && fit.p_value < 0.01;
            outcome(
                direction && slope,
                format!(
                    "held-out IIA cl {cl:.4} vs das {das:.4} [{}]; {} runs coef {:.4} p {:.2e} R² {:.3} [{}]; {:.0}s",
                    ok(direction),
                    fit.n_observations,
                    fit.coefficient,
                    fit.p_value,
                    fit.r_squared,
                    ok(slope),
                    start.elapsed().as_secs_f64()
                ),
            )
        }
        Err(e) => outcome(false, format!("held-out IIA cl {cl:.4} vs das {das:.4}; regression failed: {e}")),
    }
}

fn criterion_8() -> Outcome {
    let mut failed: Vec<&str> = Vec::new();
    let mut check = |name, ok: bool| {
        if !ok {
            failed.push(name)
        }
    };
    let mut rng = Rng::new(8);
    let cloud = |rng: &mut Rng, n: usize, d: usize| -> Vec<DVector<f64>> { (0..n).map(|_| rng.normal_vector(d, 0.0, 1.0)).collect() };

    let single = emd_divergence(&[v(&[0.0, 0.0])], &[v(&[3.0, 4.0])]).expect("emd");
    check("emd.singletons", (single - 12.5).abs() <= 1e-3);

    let p = vec![v(&[0.0, 1.0, 5.0]), v(&[1.0, 0.0, -2.0])];
    let q = vec![v(&[0.0, 1.0, 0.0]), v(&[1.0, 0.0, 9.0])];
    check("row_emd.noncausal", row_emd(&p, &q, &[0, 1], 0).expect("row emd").abs() <= 1e-6);

    let reference = cloud(&mut rng, 20, 3);
    let queries = cloud(&mut rng, 10, 3);
    for metric in [Metric::L2, Metric::Cosine] {
        let brute = queries
            .iter()
            .map(|q| reference.iter().map(|r| distance(metric, q, r).expect("distance")).fold(f64::INFINITY, f64::min))
            .sum::<f64>()
            / queries.len() as f64;
        check("nearest.brute_force", (nearest_distance(&reference, &queries, metric).expect("nearest") - brute).abs() <= 1e-12);
    }

    let a = cloud(&mut rng, 5, 3);
    let b = cloud(&mut rng, 5, 3);
    for metric in [Metric::L2, Metric::Cosine] {
        let brute = permutations(5)
            .iter()
            .map(|perm| (0..5).map(|i| distance(metric, &a[i], &b[perm[i]]).expect("distance")).sum::<f64>())
            .fold(f64::INFINITY, f64::min)
            / 5.0;
        check("pairing.n5", (min_cost_pairing_distance(&a, &b, metric).expect("pairing") - brute).abs() <= 1e-12);
    }

    let plane: Vec<_> = (0..60).map(|_| v(&[rng.uniform() * 4.0 - 2.0, rng.uniform() * 4.0 - 2.0, 1.5])).collect();
    let lifted = v(&[0.3, -0.2, 2.2]);
    check("local_pca.plane", (local_pca_distance(&plane, &lifted, 10, 0.95).expect("local pca") - 0.7).abs() <= 1e-6);

    let flat: Vec<_> = (0..40).map(|_| v(&[rng.uniform() * 4.0 - 2.0, rng.uniform() * 4.0 - 2.0, 0.0])).collect();
    let hood = repdiv::divergence::k_nearest(&flat, &flat[0], 6);
    let mut off = hood.iter().fold(DVector::zeros(3), |acc, &j| acc + &flat[j]) / 6.0;
    off[2] += 0.5;
    check("llr.orthogonal", (llr_error(&flat, &off, 6, 1e-6).expect("llr") - 0.5).abs() <= 1e-3);

    let two = vec![v(&[0.0, 0.0, 0.0]), v(&[2.0, 0.0, 0.0])];
    let mid = kde_neg_log_density(&two, &v(&[1.0, 0.0, 0.0]), Bandwidth::Fixed(1.0)).expect("kde");
    check("kde.midpoint", (mid.value + (2.0 * (-0.5f64).exp() / 2.0).ln()).abs() <= 1e-12);

    let mut trials_ok = 0;
    for trial in 0..100 {
        let n = 1 + trial % 6;
        let a = cloud(&mut rng, n, 3);
        let b = cloud(&mut rng, n, 3);
        let brute = permutations(n)
            .iter()
            .map(|perm| (0..n).map(|i| distance(Metric::L2, &a[i], &b[perm[i]]).expect("distance")).sum::<f64>())
            .fold(f64::INFINITY, f64::min)
            / n as f64;
        let cost = DMatrix::from_fn(n, n, |_, _| rng.uniform());
        let exhaustive = permutations(n).iter().map(|perm| (0..n).map(|i| cost[(i, perm[i])]).sum::<f64>()).fold(f64::INFINITY, f64::min);
        let (_, total) = min_cost_matching(&cost);
        let pairing = min_cost_pairing_distance(&a, &b, Metric::L2).expect("pairing");
        if (pairing - brute).abs() <= 1e-12 && (total - exhaustive).abs() <= 1e-12 {
            trials_ok += 1;
        }
    }
    check("pairing.100_trials", trials_ok == 100);

    outcome(failed.is_empty(), format!("8 oracle groups, {trials_ok}/100 pairing trials, failed {failed:?}"))
}

fn criterion_9() -> Outcome {
    let params = |n, r, epsilon| HarmlessParams { n, r, epsilon };

    let plane = vec![v(&[0.0, 0.0, 1.0]), v(&[1.0, 0.0, 1.0]), v(&[0.0, 1.0, 1.0]), v(&[1.0, 1.0, 1.0])];
    let smooth = |x: &DVector<f64>| v(&[x.sum().exp()]);
    let zero = classify_divergence(&v(&[0.3, 0.6, 1.0]), &plane, &plane, smooth, params(4, 2, 0.0)).expect("zero case");

    let axes = vec![v(&[1.0, 0.0, 0.0]), v(&[-1.0, 0.0, 0.0]), v(&[0.0, 1.0, 0.0]), v(&[0.0, -1.0, 0.0])];
    let ignores_third = |x: &DVector<f64>| v(&[x[0] * x[1], x[0].max(0.0)]);
    let null = classify_divergence(&v(&[0.2, 0.2, 5.0]), &axes, &axes, ignores_third, params(4, 2, 0.0)).expect("null case");

    let circuit = mean_diff_circuit();
    let eval: Vec<_> = class_a().into_iter().chain(class_b()).collect();
    let psi = |x: &DVector<f64>| v(&[circuit.forward(x, None).expect("forward").1.score.expect("score")]);
    let patched = classify_divergence(&v(&[0.5, 0.5, 1.0, -0.5]), &class_a(), &eval, psi, params(2, 1, 1e-6)).expect("patched case");

    let verdicts = [zero.verdict, null.verdict, patched.verdict];
    outcome(
        verdicts == [Verdict::Harmless, Verdict::Harmless, Verdict::Harmful],
        format!("zero {:?}, null direction {:?}, patched {:?} (max Δ {:.3})", verdicts[0], verdicts[1], verdicts[2], patched.max_delta),
    )
}

fn ok(flag: bool) -> &'static str {
    if flag {
        "ok"
    } else {
        "miss"
    }
}

#[test]
fn acceptance() {
    let criteria: [(usize, fn() -> Outcome); 9] = [
        (1, criterion_1),
        (2, criterion_2),
        (3, criterion_3),
        (4, criterion_4),
        (5, criterion_5),
        (6, criterion_6),
        (7, criterion_7),
        (8, criterion_8),
        (9, criterion_9),
    ];
    let mut unexpected = Vec::new();
    for (n, run) in criteria {
        let out = run();
        // Written to the raw handle so the lines survive output capture.
        let line = format!("criterion {n}: {}  {}\n", if out.pass { "PASS" } else { "FAIL" }, out.detail);
        std::io::stderr().write_all(line.as_bytes()).expect("stderr");
        if !out.pass && !KNOWN_RED.contains(&n) {
            unexpected.push(n);
        }
    }
    assert!(unexpected.is_empty(), "failing criteria: {unexpected:?}");
}
