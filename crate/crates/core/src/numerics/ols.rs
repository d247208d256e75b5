// SPDX-License-Identifier: MIT OR Apache-2.0

//! Simple (one-regressor) ordinary least squares with an intercept.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, FisherSnedecor};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OlsFit {
    pub intercept: f64,
    pub coefficient: f64,
    pub r_squared: f64,
    pub f_statistic: f64,
    /// Upper tail of F(1, n − 2) at `f_statistic`.
    pub p_value: f64,
    pub n_observations: usize,
    pub coefficient_std_err: f64,
}

pub fn ols_fit(x: &[f64], y: &[f64]) -> Result<OlsFit> {
    if x.len() != y.len() {
        return Err(Error::DimensionMismatch {
            expected: x.len(),
            got: y.len(),
            context: "ols x/y lengths",
        });
    }
    let n = x.len();
    if n < 3 {
        return Err(Error::DegenerateDesign("need at least 3 observations"));
    }
    let nf = n as f64;
    let mean_x = x.iter().sum::<f64>() / nf;
    let mean_y = y.iter().sum::<f64>() / nf;
    let sxx: f64 = x.iter().map(|v| (v - mean_x).powi(2)).sum();
    if sxx <= f64::EPSILON * x.iter().map(|v| v * v).sum::<f64>().max(1.0) {
        return Err(Error::DegenerateDesign("regressor is constant"));
    }
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mean_x) * (b - mean_y)).sum();
    let coefficient = sxy / sxx;
    let intercept = mean_y - coefficient * mean_x;

    let sst: f64 = y.iter().map(|v| (v - mean_y).powi(2)).sum();
    let ssr: f64 = x
        .iter()
        .zip(y)
        .map(|(a, b)| (b - intercept - coefficient * a).powi(2))
        .sum();
    let r_squared = if sst > 0.0 { (1.0 - ssr / sst).clamp(0.0, 1.0) } else { 0.0 };

    let df_resid = nf - 2.0;
    let mse = ssr / df_resid;
    let ss_model = (sst - ssr).max(0.0);
    let (f_statistic, p_value) = if mse > 0.0 {
        let f = ss_model / mse;
        let dist = FisherSnedecor::new(1.0, df_resid).expect("positive degrees of freedom");
        (f, dist.sf(f))
    } else if ss_model > 0.0 {
        (f64::INFINITY, 0.0)
    } else {
        (0.0, 1.0)
    };

    Ok(OlsFit {
        intercept,
        coefficient,
        r_squared,
        f_statistic,
        p_value,
        n_observations: n,
        coefficient_std_err: (mse / sxx).sqrt(),
    })
}
