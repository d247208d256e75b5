// SPDX-License-Identifier: MIT OR Apache-2.0

//! Harmlessness test for a divergence vector.
//!
//! The divergence of an intervened point `x̂` is its offset from the local
//! manifold of its class: the rank-`r` PCA plane through the `n` nearest
//! natural points. The divergence is harmless when adding it to every point
//! of an evaluation set leaves the behaviour `ψ` unchanged within `ε`. For
//! classifiers pass the logits as `ψ`, not the argmax, so that moves towards
//! a decision boundary register.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::divergence::k_nearest;
use crate::error::{check_dim, Error, Result};
use crate::numerics::pca;
use crate::par;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Verdict {
    Harmless,
    Harmful,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HarmlessParams {
    pub n: usize,
    pub r: usize,
    pub epsilon: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HarmlessVerdict {
    pub verdict: Verdict,
    pub divergence_vector: Vec<f64>,
    pub max_delta: f64,
    pub per_eval_deltas: Vec<f64>,
    pub params: HarmlessParams,
}

impl HarmlessVerdict {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("verdict serializes")
    }
}

/// `v = x̂ − Π(x̂)` for the rank-`r` PCA plane through the `n` nearest
/// class points.
pub fn local_divergence(x_hat: &DVector<f64>, class_naturals: &[DVector<f64>], n: usize, r: usize) -> Result<DVector<f64>> {
    if n < 2 {
        return Err(Error::Config(format!("neighbourhood size must be at least 2, got {n}")));
    }
    if n > class_naturals.len() {
        return Err(Error::Config(format!(
            "neighbourhood size {n} exceeds the {} class points",
            class_naturals.len()
        )));
    }
    for p in class_naturals {
        check_dim(x_hat.len(), p.len(), "class point")?;
    }
    let hood: Vec<DVector<f64>> = k_nearest(class_naturals, x_hat, n).into_iter().map(|i| class_naturals[i].clone()).collect();
    let basis = pca(&hood, r)?;
    Ok(x_hat - basis.project(x_hat))
}

pub fn classify_divergence<F>(
    x_hat: &DVector<f64>,
    class_naturals: &[DVector<f64>],
    eval_set: &[DVector<f64>],
    psi: F,
    params: HarmlessParams,
) -> Result<HarmlessVerdict>
where
    F: Fn(&DVector<f64>) -> DVector<f64> + Sync + Send,
{
    if eval_set.is_empty() {
        return Err(Error::EmptyInput("harmlessness evaluation set"));
    }
    if !(params.epsilon >= 0.0) {
        return Err(Error::Config(format!("epsilon must be >= 0, got {}", params.epsilon)));
    }
    let v = local_divergence(x_hat, class_naturals, params.n, params.r)?;
    let per_eval_deltas = par::try_map_slice(eval_set, |x| {
        check_dim(v.len(), x.len(), "evaluation point")?;
        let before = psi(x);
        let after = psi(&(x + &v));
        check_dim(before.len(), after.len(), "behaviour output")?;
        Ok::<_, Error>((after - before).norm())
    })?;
    let max_delta = per_eval_deltas.iter().copied().fold(0.0, f64::max);
    Ok(HarmlessVerdict {
        verdict: if max_delta <= params.epsilon { Verdict::Harmless } else { Verdict::Harmful },
        divergence_vector: v.iter().copied().collect(),
        max_delta,
        per_eval_deltas,
        params,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;
    use crate::pathology::mean_diff_circuit;

    fn v(xs: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(xs)
    }

    fn params(n: usize, r: usize, epsilon: f64) -> HarmlessParams {
        HarmlessParams { n, r, epsilon }
    }

    #[test]
    fn point_on_local_plane_is_harmless() {
        let naturals = vec![v(&[0.0, 0.0, 1.0]), v(&[1.0, 0.0, 1.0]), v(&[0.0, 1.0, 1.0]), v(&[1.0, 1.0, 1.0])];
        let psi = |x: &DVector<f64>| v(&[x.sum().exp()]);
        let out = classify_divergence(&v(&[0.3, 0.6, 1.0]), &naturals, &naturals, psi, params(4, 2, 0.0)).unwrap();
        assert_eq!(out.verdict, Verdict::Harmless);
        assert!(out.max_delta < 1e-8);
    }

    #[test]
    fn null_direction_is_harmless() {
        let naturals = vec![v(&[1.0, 0.0, 0.0]), v(&[-1.0, 0.0, 0.0]), v(&[0.0, 1.0, 0.0]), v(&[0.0, -1.0, 0.0])];
        let psi = |x: &DVector<f64>| v(&[x[0] * x[1], x[0].max(0.0)]);
        let x_hat = v(&[0.2, 0.2, 5.0]);
        let out = classify_divergence(&x_hat, &naturals, &naturals, psi, params(4, 2, 0.0)).unwrap();
        assert!((out.divergence_vector[2] - 5.0).abs() < 1e-10, "{:?}", out.divergence_vector);
        assert_eq!(out.verdict, Verdict::Harmless);
        assert_eq!(out.max_delta, 0.0);
    }

    #[test]
    fn mean_diff_patch_is_harmful() {
        let circuit = mean_diff_circuit();
        let s_a = vec![v(&[1.0, 0.0, 1.0, 0.0]), v(&[0.0, 1.0, 1.0, 0.0])];
        let s_b = vec![v(&[0.0, 0.0, 1.0, 0.0]), v(&[0.0, 0.0, 1.0, 1.0])];
        let eval: Vec<_> = s_a.iter().chain(&s_b).cloned().collect();
        let psi = |x: &DVector<f64>| v(&[circuit.forward(x, None).unwrap().1.score.unwrap()]);
        let x_hat = v(&[0.5, 0.5, 1.0, -0.5]);
        let out = classify_divergence(&x_hat, &s_a, &eval, psi, params(2, 1, 1e-6)).unwrap();
        assert_eq!(out.verdict, Verdict::Harmful);
        assert!((DVector::from_vec(out.divergence_vector.clone()) - v(&[0.0, 0.0, 0.0, -0.5])).amax() < 1e-12);
        assert_eq!(out.per_eval_deltas.len(), 4);
        let back: HarmlessVerdict = serde_json::from_str(&out.to_json()).unwrap();
        assert_eq!(back, out);
    }

    #[test]
    fn verdict_is_monotone_in_epsilon() {
        let mut rng = Rng::new(6);
        let naturals: Vec<_> = (0..12).map(|_| rng.normal_vector(4, 0.0, 1.0)).collect();
        let eval: Vec<_> = (0..5).map(|_| rng.normal_vector(4, 0.0, 1.0)).collect();
        let psi = |x: &DVector<f64>| x.map(|t| t.max(0.0));
        let x_hat = rng.normal_vector(4, 0.0, 2.0);
        let base = classify_divergence(&x_hat, &naturals, &eval, psi, params(6, 2, 0.0)).unwrap();
        let eps = base.max_delta;
        for scale in [1.0, 2.0, 10.0] {
            let out = classify_divergence(&x_hat, &naturals, &eval, psi, params(6, 2, eps * scale)).unwrap();
            assert_eq!(out.verdict, Verdict::Harmless);
            assert_eq!(out.max_delta, eps);
        }
    }

    #[test]
    fn divergence_is_orthogonal_to_the_local_plane() {
        let mut rng = Rng::new(7);
        let naturals: Vec<_> = (0..20).map(|_| rng.normal_vector(5, 0.0, 1.0)).collect();
        let x_hat = rng.normal_vector(5, 0.0, 1.0);
        let div = local_divergence(&x_hat, &naturals, 8, 3).unwrap();
        let hood: Vec<_> = k_nearest(&naturals, &x_hat, 8).into_iter().map(|i| naturals[i].clone()).collect();
        let basis = pca(&hood, 3).unwrap();
        assert!(basis.components.tr_mul(&div).amax() < 1e-8);
    }

    #[test]
    fn rejects_bad_inputs() {
        let naturals = vec![v(&[0.0, 0.0]), v(&[1.0, 0.0])];
        let id = |x: &DVector<f64>| x.clone();
        assert!(classify_divergence(&v(&[0.0, 1.0]), &naturals, &naturals, id, params(3, 1, 0.0)).is_err());
        assert!(classify_divergence(&v(&[0.0, 1.0]), &naturals, &naturals, id, params(1, 1, 0.0)).is_err());
        assert!(classify_divergence(&v(&[0.0, 1.0]), &naturals, &[], id, params(2, 1, 0.0)).is_err());
        let shape_shift = |x: &DVector<f64>| DVector::zeros(if x[1] > 0.5 { 2 } else { 1 });
        assert!(classify_divergence(&v(&[0.0, 1.0]), &naturals, &naturals, shape_shift, params(2, 1, 0.0)).is_err());
    }
}
