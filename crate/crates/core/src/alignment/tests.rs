// SPDX-License-Identifier: MIT OR Apache-2.0

use nalgebra::{DMatrix, DVector};

use super::*;
use crate::counterfactual::ClIndex;
use crate::neural::{FrozenMlp, Mlp, MlpConfig};
use crate::numerics::Rng;
use crate::synthdata::{generate_dataset, split_partitions, DatasetConfig, Scheme, DEFAULT_TRAIN_FRACTION};

fn random_af(d: usize, seed: u64) -> AlignmentFunction {
    let mut rng = Rng::new(seed);
    let m = crate::numerics::gaussian_matrix(&mut rng, d, d, 0.0, 0.5);
    let a = rng.normal_vector(d, 0.0, 1.0);
    AlignmentFunction::new(m, a, DEFAULT_RIDGE).unwrap()
}

fn close(a: &DVector<f64>, b: &DVector<f64>, tol: f64) -> bool {
    (a - b).amax() <= tol
}

#[test]
fn identity_alignment_is_identity() {
    let af = AlignmentFunction::identity(4);
    assert!((af.w() - DMatrix::identity(4, 4)).amax() < 1e-12);
    let h = DVector::from_vec(vec![1.0, -2.0, 0.5, 3.0]);
    assert!(close(&af.apply(&h).unwrap(), &h, 1e-12));
}

#[test]
fn round_trip_and_construction_bounds() {
    let mut rng = Rng::new(1);
    for seed in 0..5 {
        let af = random_af(6, seed);
        assert!((af.w_inv() * af.w() - DMatrix::identity(6, 6)).amax() < 1e-6);
        assert!(af.s().iter().all(|s| s.abs() >= DEFAULT_RIDGE));
        let h = rng.normal_vector(6, 0.0, 2.0);
        assert!(close(&af.invert(&af.apply(&h).unwrap()).unwrap(), &h, 1e-6));
        let fresh = AlignmentFunction::random(6, &mut rng).unwrap();
        let p = fresh.m() * fresh.m().transpose() + DMatrix::identity(6, 6) * DEFAULT_RIDGE;
        let (values, _) = crate::numerics::symmetric_eigen(&p);
        assert!(values.iter().all(|&v| v >= DEFAULT_RIDGE - 1e-12));
    }
    assert!(AlignmentFunction::identity(3).apply(&DVector::zeros(4)).is_err());
}

#[test]
fn zero_sign_parameter_is_rejected() {
    let m = DMatrix::identity(2, 2);
    assert!(AlignmentFunction::new(m, DVector::from_vec(vec![1.0, 0.0]), 0.1).is_err());
}

#[test]
fn interchange_special_cases() {
    let af = random_af(5, 3);
    let mut rng = Rng::new(2);
    let t = rng.normal_vector(5, 0.0, 1.0);
    let s = rng.normal_vector(5, 0.0, 1.0);
    let none = af.interchange_mask(&DVector::zeros(5), &t, &s).unwrap();
    assert!(close(&none, &t, 1e-12));
    let all = af.interchange_mask(&DVector::from_element(5, 1.0), &t, &s).unwrap();
    assert!(close(&all, &s, 1e-6));

    let id = AlignmentFunction::identity(5);
    let sel = VariableSelector::new(VarId::X1, 0, 1, 5).unwrap();
    let patched = interchange(&id, &sel, &t, &s).unwrap();
    let mut expect = t.clone();
    expect[0] = s[0];
    assert!(close(&patched, &expect, 1e-9));
}

#[test]
fn interchange_sets_selected_latents() {
    let af = random_af(6, 4);
    let [x1, x2, _] = VariableSelector::standard(6, 2).unwrap();
    let mut rng = Rng::new(3);
    for _ in 0..10 {
        let t = rng.normal_vector(6, 0.0, 1.0);
        let s = rng.normal_vector(6, 0.0, 1.0);
        let hat = interchange(&af, &x2, &t, &s).unwrap();
        let (zh, zt, zs) = (af.w() * &hat, af.w() * &t, af.w() * &s);
        for i in 0..6 {
            let want = if x2.indices().contains(&i) { zs[i] } else { zt[i] };
            assert!((zh[i] - want).abs() < 1e-6);
        }
        // Re-patching, self-patching and composition.
        assert!(close(&interchange(&af, &x2, &hat, &s).unwrap(), &hat, 1e-6));
        assert!(close(&interchange(&af, &x2, &t, &t).unwrap(), &t, 1e-6));
        let two_step = interchange(&af, &x2, &interchange(&af, &x1, &t, &s).unwrap(), &s).unwrap();
        let one_step = af.interchange_mask(&combined_mask(&[&x1, &x2]).unwrap(), &t, &s).unwrap();
        assert!(close(&two_step, &one_step, 1e-6));
    }
}

#[test]
fn selectors_partition_the_dimensions() {
    let sels = VariableSelector::standard(18, 1).unwrap();
    let mask = combined_mask(&[&sels[0], &sels[1], &sels[2]]).unwrap();
    assert!(mask.iter().all(|&m| m == 1.0));
    assert!(combined_mask(&[&sels[0], &sels[0]]).is_err());
    assert!(VariableSelector::standard(3, 2).is_err());
}

/// Frozen network whose logits ignore the input: `c`.
fn constant_model(c: Vec<f64>, d: usize) -> FrozenMlp {
    let k = c.len();
    FrozenMlp { b: DMatrix::zeros(1, d), e: DVector::zeros(1), a: DMatrix::zeros(k, 1), c: DVector::from_vec(c) }
}

fn sample(d: usize, label: usize, seed: u64) -> InterventionSample {
    let mut rng = Rng::new(seed);
    InterventionSample {
        h_src: rng.normal_vector(d, 0.0, 1.0),
        h_trg: rng.normal_vector(d, 0.0, 1.0),
        variable: VarId::X2,
        counterfactual_label: label,
        cl_key: (0.0, 0.0),
    }
}

#[test]
fn das_loss_closed_forms() {
    let af = random_af(4, 5);
    let sel = VariableSelector::new(VarId::X2, 1, 1, 4).unwrap();
    let uniform = constant_model(vec![0.0; 10], 4);
    let batch = [sample(4, 3, 1), sample(4, 7, 2)];
    assert!((das_loss(&uniform, &batch, &af, &sel).unwrap() - 10f64.ln()).abs() < 1e-12);
    let mut peaked = vec![-800.0; 10];
    peaked[3] = 0.0;
    assert!(das_loss(&constant_model(peaked, 4), &batch[..1], &af, &sel).unwrap().abs() < 1e-12);
    assert!(das_loss(&uniform, &[], &af, &sel).is_err());

    let model = Mlp::new(&MlpConfig { input_dim: 4, hidden_width: 6, n_classes: 10, ..MlpConfig::default() }, &mut Rng::new(0))
        .unwrap()
        .frozen();
    let pair = das_loss(&model, &batch, &af, &sel).unwrap();
    let single = (das_loss(&model, &batch[..1], &af, &sel).unwrap() + das_loss(&model, &batch[1..], &af, &sel).unwrap()) / 2.0;
    assert!((pair - single).abs() < 1e-9);
}

#[test]
fn das_gradients_match_finite_differences() {
    let model = Mlp::new(&MlpConfig { input_dim: 5, hidden_width: 7, n_classes: 4, ..MlpConfig::default() }, &mut Rng::new(4))
        .unwrap()
        .frozen();
    let mut af = random_af(5, 6);
    let sel = VariableSelector::new(VarId::X2, 1, 2, 5).unwrap();
    let batch: Vec<_> = (0..6).map(|i| sample(5, i % 4, 10 + i as u64)).collect();
    let (_, grad_w) = das_loss_grad(&model, &batch, &af, &sel).unwrap();
    let (gm, ga) = af.backprop(&grad_w);
    let analytic: Vec<f64> = gm.iter().chain(ga.iter()).copied().collect();
    let step = 1e-4;
    let mut numeric = Vec::new();
    for k in 0..30 {
        let set = |af: &mut AlignmentFunction, v: f64| {
            let (m, a) = af.param_slices_mut();
            if k < 25 { m[k] = v } else { a[k - 25] = v }
            af.commit().unwrap();
        };
        let orig = if k < 25 { af.m().as_slice()[k] } else { af.a()[k - 25] };
        set(&mut af, orig + step);
        let up = das_loss(&model, &batch, &af, &sel).unwrap();
        set(&mut af, orig - step);
        let down = das_loss(&model, &batch, &af, &sel).unwrap();
        set(&mut af, orig);
        numeric.push((up - down) / (2.0 * step));
    }
    let diff = analytic.iter().zip(&numeric).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
    let scale = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    assert!(diff <= 1e-3 * scale, "diff {diff} scale {scale}");
}

#[test]
fn iia_counts_correct_predictions() {
    let af = random_af(4, 7);
    let sel = VariableSelector::new(VarId::X2, 1, 1, 4).unwrap();
    let mut logits = vec![0.0; 10];
    logits[2] = 1.0;
    let always_two = constant_model(logits, 4);
    assert_eq!(evaluate_iia(&always_two, &af, &sel, &[sample(4, 2, 1)]).unwrap(), 1.0);
    assert_eq!(evaluate_iia(&always_two, &af, &sel, &[sample(4, 5, 1)]).unwrap(), 0.0);
    assert!(evaluate_iia(&always_two, &af, &sel, &[]).is_err());

    let model = Mlp::new(&MlpConfig { input_dim: 4, hidden_width: 9, n_classes: 3, ..MlpConfig::default() }, &mut Rng::new(2))
        .unwrap();
    let frozen = model.frozen();
    let samples: Vec<_> = (0..20).map(|i| sample(4, i % 3, 40 + i as u64)).collect();
    let manual = samples
        .iter()
        .filter(|s| {
            let hat = interchange(&af, &sel, &s.h_trg, &s.h_src).unwrap();
            model.forward(&hat, None).unwrap().predicted == s.counterfactual_label
        })
        .count();
    assert_eq!(evaluate_iia(&frozen, &af, &sel, &samples).unwrap(), manual as f64 / 20.0);
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let af = random_af(5, 8);
    let back = alignment_from_text(&alignment_to_text(&af)).unwrap();
    assert_eq!(back, af);
    assert!(alignment_from_text("repdiv-align 9\n").is_err());
}

fn small_problem() -> (Vec<crate::synthdata::LabeledRep>, crate::synthdata::PartitionData, crate::synthdata::ClassGrid) {
    let cfg = DatasetConfig { samples_per_class: 40, extra_dims: 2, ..DatasetConfig::default() };
    let data = generate_dataset(&cfg).unwrap();
    let (p1, _) = split_partitions(&data, &cfg.grid(), Scheme::Default, 0, DEFAULT_TRAIN_FRACTION).unwrap();
    (data, p1, cfg.grid())
}

#[test]
fn training_never_touches_the_model() {
    let (data, p1, grid) = small_problem();
    let mlp_cfg = MlpConfig { input_dim: 4, hidden_width: 16, max_epochs: 5, ..MlpConfig::default() };
    let (model, _) = crate::neural::train_mlp(&data, &data, &mlp_cfg).unwrap();
    let before = model.checksum();
    let align = AlignData { train: &p1.train, valid: &p1.valid, partition: &p1.partition, grid: &grid };
    for (bw, cw, metric) in [(1.0, 0.0, SelectionMetric::BestIia), (0.0, 1.0, SelectionMetric::BestEmd), (1.0, 1.0, SelectionMetric::BestIia)] {
        let config = AlignTrainConfig {
            behavioral_weight: bw,
            cl_weight: cw,
            selection_metric: metric,
            max_epochs: 3,
            samples_per_epoch: 64,
            eval_every: 1,
            eval_samples: 32,
            ..AlignTrainConfig::default()
        };
        let (_, history) = train_alignment(&model, align, &config).unwrap();
        assert_eq!(history.epochs.len(), 3);
        assert!(history.best_epoch.is_some());
    }
    assert_eq!(model.checksum(), before);

    let zero = AlignTrainConfig { max_epochs: 0, ..AlignTrainConfig::default() };
    let (af, history) = train_alignment(&model, align, &zero).unwrap();
    assert!(history.epochs.is_empty());
    assert_eq!(af, AlignmentFunction::random(4, &mut Rng::new(0)).unwrap());
    let none = AlignTrainConfig { behavioral_weight: 0.0, ..AlignTrainConfig::default() };
    assert!(train_alignment(&model, align, &none).is_err());
}

/// Combined objective with every CL-side projection frozen at `af0`.
fn frozen_target_objective(
    model: &FrozenMlp,
    af: &AlignmentFunction,
    af0: &AlignmentFunction,
    samples: &[InterventionSample],
    index: &ClIndex,
    config: &AlignTrainConfig,
) -> f64 {
    let [x1, x2, _] = VariableSelector::standard(af.dim(), 1).unwrap();
    let das = das_loss(model, samples, af, &x2).unwrap();
    let mut cl = 0.0;
    for s in samples {
        let hat = interchange(af, &x2, &s.h_trg, &s.h_src).unwrap();
        let h_cl = crate::counterfactual::cl_vector(index, s.cl_key).unwrap();
        cl += match config.cl_kind {
            ClLossKind::Plain => crate::counterfactual::cl_loss(&hat, h_cl).unwrap(),
            ClLossKind::Modified => [&x1, &x2]
                .iter()
                .map(|sel| {
                    let r = af.project_mask(&sel.mask(), &hat);
                    let t = af0.project_mask(&sel.mask(), h_cl);
                    let cos = crate::counterfactual::cosine(&r, &t).unwrap();
                    0.5 * (&r - &t).norm_squared() - 0.5 * cos
                })
                .sum(),
        };
    }
    config.behavioral_weight * das + config.cl_weight * cl / samples.len() as f64
}

#[test]
fn combined_objective_gradient_matches_finite_differences() {
    let (_, p1, grid) = small_problem();
    let model = Mlp::new(&MlpConfig { input_dim: 4, hidden_width: 8, ..MlpConfig::default() }, &mut Rng::new(3)).unwrap();
    let frozen = model.frozen();
    let index = ClIndex::from_reps(&p1.train);
    let samples = draw_samples(&p1.train, &grid, VarId::X2, 8, &mut Rng::new(1), |c| p1.partition.contains(c)).unwrap();
    for kind in [ClLossKind::Plain, ClLossKind::Modified] {
        let config = AlignTrainConfig { cl_weight: 0.7, cl_kind: kind, ..AlignTrainConfig::default() };
        let mut af = random_af(4, 12);
        let af0 = af.clone();
        let objective = train::Objective::new(&frozen, &config, &index, 4).unwrap();
        let (loss, grad_w, _) = objective.eval(&af, &samples, true).unwrap();
        let reference = frozen_target_objective(&frozen, &af, &af0, &samples, &index, &config);
        assert!((loss - reference).abs() < 1e-10);
        assert!((alignment_objective(&model, &af, &samples, &index, &config).unwrap() - loss).abs() < 1e-12);

        let (gm, ga) = af.backprop(&grad_w);
        let analytic: Vec<f64> = gm.iter().chain(ga.iter()).copied().collect();
        let step = 1e-5;
        let mut numeric = Vec::new();
        for k in 0..20 {
            let set = |af: &mut AlignmentFunction, v: f64| {
                let (m, a) = af.param_slices_mut();
                if k < 16 { m[k] = v } else { a[k - 16] = v }
                af.commit().unwrap();
            };
            let orig = if k < 16 { af.m().as_slice()[k] } else { af.a()[k - 16] };
            set(&mut af, orig + step);
            let up = frozen_target_objective(&frozen, &af, &af0, &samples, &index, &config);
            set(&mut af, orig - step);
            let down = frozen_target_objective(&frozen, &af, &af0, &samples, &index, &config);
            set(&mut af, orig);
            numeric.push((up - down) / (2.0 * step));
        }
        let diff = analytic.iter().zip(&numeric).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
        let scale = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
        assert!(diff <= 1e-4 * scale, "{kind:?}: diff {diff} scale {scale}");
    }
}
