// SPDX-License-Identifier: MIT OR Apache-2.0

use std::collections::{BTreeMap, BTreeSet};

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::harmless::{classify_divergence, HarmlessParams, Verdict};
use crate::neural::argmax;
use crate::pathology::{
    balanced_circuit, coordinate_patch, dormant_change_scan, dormant_circuit, mean_diff_circuit, mean_diff_vector,
    patch_closure_check, project_to_class_region, relu_pattern_audit, ClosureResult, PiecewiseLinearCircuit,
    ProjectionMode,
};

pub const WORKED_TOLERANCE: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaseResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct WorkedReport {
    pub cases: Vec<CaseResult>,
}

impl WorkedReport {
    pub fn all_passed(&self) -> bool {
        self.cases.iter().all(|c| c.passed)
    }

    pub fn failures(&self) -> Vec<&str> {
        self.cases.iter().filter(|c| !c.passed).map(|c| c.name.as_str()).collect()
    }

    fn check(&mut self, name: &str, passed: bool, detail: String) {
        self.cases.push(CaseResult { name: name.to_string(), passed, detail });
    }
}

/// The circuits the suite runs on; mutate a copy to see which cases notice.
#[derive(Clone, Debug, PartialEq)]
pub struct WorkedCircuits {
    pub mean_diff: PiecewiseLinearCircuit,
    pub dormant: PiecewiseLinearCircuit,
    pub balanced: PiecewiseLinearCircuit,
}

impl Default for WorkedCircuits {
    fn default() -> Self {
        Self { mean_diff: mean_diff_circuit(), dormant: dormant_circuit(), balanced: balanced_circuit() }
    }
}

fn v(xs: &[f64]) -> DVector<f64> {
    DVector::from_column_slice(xs)
}

fn near(a: &DVector<f64>, b: &DVector<f64>) -> bool {
    a.len() == b.len() && (a - b).amax() <= WORKED_TOLERANCE
}

fn fmt(x: &DVector<f64>) -> String {
    format!("{:?}", x.as_slice())
}

fn fmt_hidden(got: &Option<(DVector<f64>, f64)>) -> String {
    got.as_ref().map_or("forward failed".into(), |(h, s)| format!("hidden {} s={s}", fmt(h)))
}

pub fn worked_examples_suite() -> WorkedReport {
    worked_examples_with(&WorkedCircuits::default())
}

/// Every closed-form example, each reported as a named pass/fail case.
pub fn worked_examples_with(circuits: &WorkedCircuits) -> WorkedReport {
    let mut report = WorkedReport::default();
    let md = &circuits.mean_diff;
    let s_a = [v(&[1.0, 0.0, 1.0, 0.0]), v(&[0.0, 1.0, 1.0, 0.0])];
    let s_b = [v(&[0.0, 0.0, 1.0, 0.0]), v(&[0.0, 0.0, 1.0, 1.0])];
    let run = |c: &PiecewiseLinearCircuit, h: &DVector<f64>, ctx: Option<&DVector<f64>>| c.forward(h, ctx).ok();

    let hidden = |h: &DVector<f64>| run(md, h, None).map(|(t, o)| (t.post[0].clone(), o.score.unwrap_or(f64::NAN)));
    for (i, (h, want)) in s_a.iter().zip([v(&[0.25, 0.0, 0.0]), v(&[0.0, 0.5, 0.0])]).enumerate() {
        let got = hidden(h);
        let ok = got.as_ref().is_some_and(|(g, _)| near(g, &want));
        report.check(&format!("mean_diff.hidden_a{}", i + 1), ok, fmt_hidden(&got));
    }
    let scores_a: Vec<f64> = s_a.iter().filter_map(|h| hidden(h).map(|x| x.1)).collect();
    let ok = scores_a.len() == 2 && (scores_a[0] - 0.25).abs() <= WORKED_TOLERANCE && (scores_a[1] - 0.5).abs() <= WORKED_TOLERANCE;
    report.check("mean_diff.scores_a", ok, format!("{scores_a:?}"));
    let scores_b: Vec<f64> = s_b.iter().filter_map(|h| hidden(h).map(|x| x.1)).collect();
    let ok = scores_b.len() == 2 && scores_b.iter().all(|s| s.abs() <= WORKED_TOLERANCE);
    report.check("mean_diff.scores_b", ok, format!("{scores_b:?}"));

    let delta = mean_diff_vector(&s_a, &s_b).unwrap_or_else(|_| DVector::zeros(4));
    report.check("mean_diff.delta", near(&delta, &v(&[0.5, 0.5, 0.0, -0.5])), fmt(&delta));
    let patched: Vec<DVector<f64>> = s_b.iter().map(|h| h + &delta).collect();
    for (i, (h, (want_hidden, want_score))) in
        patched.iter().zip([(v(&[0.0, 0.0, 0.5]), 0.5), (v(&[0.25, 0.0, 0.0]), 0.25)]).enumerate()
    {
        let got = hidden(h);
        let ok = got.as_ref().is_some_and(|(g, s)| near(g, &want_hidden) && (s - want_score).abs() <= WORKED_TOLERANCE);
        report.check(&format!("mean_diff.patched_case{}", i + 1), ok, fmt_hidden(&got));
    }
    let natural = BTreeMap::from([(0, s_a.to_vec()), (1, s_b.to_vec())]);
    let intervened: Vec<(DVector<f64>, usize)> = patched.iter().map(|h| (h.clone(), 0)).collect();
    let audit = relu_pattern_audit(md, &natural, &intervened);
    let ok = audit.as_ref().is_ok_and(|a| a.flagged_units() == vec![2] && a.per_unit[2] == vec![0]);
    report.check("mean_diff.unit3_hidden_pathway", ok, format!("{:?}", audit.map(|a| a.per_unit)));

    let proj = project_to_class_region(&s_a, &patched[0], ProjectionMode::ConvexHull).unwrap_or_else(|_| DVector::zeros(4));
    let score = hidden(&proj).map(|x| x.1);
    // The projection is iterative; its tolerance sets how close s gets to 0.
    let ok = (proj.clone() - v(&[0.5, 0.5, 1.0, 0.0])).amax() <= 1e-7 && score.is_some_and(|s| s.abs() <= WORKED_TOLERANCE);
    report.check("hull_projection.neutralizes", ok, format!("{} s={score:?}", fmt(&proj)));

    let dm = &circuits.dormant;
    let ctx = |x: f64| v(&[0.0, 0.0, 0.0, x]);
    let top_class = |hidden: &DVector<f64>, x: f64| {
        dm.layers.get(1).map(|top| argmax(&(&top.weight * (hidden + ctx(x)) + &top.bias)))
    };
    let intervened_hidden = v(&[0.0, 0.0, 0.5, 0.0]);
    report.check("dormant.class_a_at_0.5", top_class(&intervened_hidden, 0.5) == Some(0), format!("{:?}", top_class(&intervened_hidden, 0.5)));
    report.check("dormant.class_c_at_0.8", top_class(&intervened_hidden, 0.8) == Some(2), format!("{:?}", top_class(&intervened_hidden, 0.8)));
    let mut natural_c = Vec::new();
    for h in s_a.iter().chain(&s_b) {
        for step in 0..=20 {
            let x = step as f64 / 20.0;
            if run(dm, h, Some(&ctx(x))).is_none_or(|(_, o)| o.class == 2) {
                natural_c.push((fmt(h), x));
            }
        }
    }
    report.check("dormant.no_natural_class_c", natural_c.is_empty(), format!("{natural_c:?}"));
    let scan = dormant_change_scan(dm, &s_a[0], &v(&[-0.5, 0.5, 0.0, -0.5]), &[ctx(0.5), ctx(0.8)], WORKED_TOLERANCE);
    let ok = scan.as_ref().is_ok_and(|s| s.null_contexts == vec![0] && s.changed_contexts == vec![1] && s.is_dormant(&[0]));
    report.check("dormant.scan", ok, format!("{:?}", scan.map(|s| (s.null_contexts, s.changed_contexts))));

    let bc = &circuits.balanced;
    let y = |h: &DVector<f64>| run(bc, h, None).and_then(|(_, o)| o.score);
    let got = (y(&v(&[1.0, 3.0, 1.0, 1.0])), y(&v(&[1.0, 1.0, 1.0, 1.0])));
    let ok = got.0.is_some_and(|s| (s + 1.0).abs() <= WORKED_TOLERANCE) && got.1.is_some_and(|s| (s - 1.0).abs() <= WORKED_TOLERANCE);
    report.check("balanced.sign_flip", ok, format!("{got:?}"));

    let r = 0.7;
    let hat = coordinate_patch(&BTreeSet::from([0]), &v(&[r, 0.0]), &v(&[0.0, r])).unwrap_or_else(|_| DVector::zeros(2));
    let ok = (hat.norm() - 2f64.sqrt() * r).abs() <= WORKED_TOLERANCE;
    report.check("circle.patch_leaves_circle", ok, format!("|h-c| = {}", hat.norm()));

    let closure = patch_closure_check(&[v(&[0.0, 0.0]), v(&[1.0, 1.0])]);
    let ok = matches!(&closure, Ok(ClosureResult::Violation(w)) if w.witness == v(&[1.0, 0.0]));
    let detail = match &closure {
        Ok(ClosureResult::Violation(w)) => format!("witness {}", fmt(&w.witness)),
        other => format!("{other:?}"),
    };
    report.check("closure.two_point_witness", ok, detail);

    let score_psi = |h: &DVector<f64>| v(&[md.forward(h, None).map(|(_, o)| o.score.unwrap_or(f64::NAN)).unwrap_or(f64::NAN)]);
    let eval: Vec<DVector<f64>> = s_a.iter().chain(&s_b).cloned().collect();
    let params = HarmlessParams { n: 2, r: 1, epsilon: 1e-6 };
    let harmful = classify_divergence(&patched[0], &s_a, &eval, score_psi, params);
    report.check(
        "algorithm1.mean_diff_harmful",
        harmful.as_ref().is_ok_and(|h| h.verdict == Verdict::Harmful),
        format!("{:?}", harmful.map(|h| h.max_delta)),
    );
    let on_segment = v(&[0.5, 0.5, 1.0, 0.0]);
    let zero = classify_divergence(&on_segment, &s_a, &eval, score_psi, params);
    report.check(
        "algorithm1.zero_divergence_harmless",
        zero.as_ref().is_ok_and(|h| h.verdict == Verdict::Harmless && h.max_delta <= WORKED_TOLERANCE),
        format!("{:?}", zero.map(|h| h.max_delta)),
    );
    let ignore_last = |h: &DVector<f64>| h.rows(0, h.len() - 1).into_owned();
    let off_axis = v(&[0.5, 0.5, 1.0, 3.0]);
    let null = classify_divergence(&off_axis, &s_a, &eval, ignore_last, HarmlessParams { epsilon: 0.0, ..params });
    report.check(
        "algorithm1.null_direction_harmless",
        null.as_ref().is_ok_and(|h| h.verdict == Verdict::Harmless),
        format!("{:?}", null.map(|h| h.max_delta)),
    );
    report
}
