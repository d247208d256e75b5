// SPDX-License-Identifier: MIT OR Apache-2.0

use nalgebra::{DMatrix, DVector};

use crate::error::{check_dim, Error, Result};
use crate::numerics::{gaussian_matrix, Rng};

pub const DEFAULT_RIDGE: f64 = 0.1;

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Invertible linear map `W = (MMᵀ + λI)·S` with
/// `S = diag(tanh(a) + λ·sign(tanh(a)))`. `W` and `W⁻¹` are cached and
/// refreshed whenever the parameters change.
#[derive(Clone, Debug, PartialEq)]
pub struct AlignmentFunction {
    m: DMatrix<f64>,
    a: DVector<f64>,
    lambda: f64,
    s: DVector<f64>,
    p: DMatrix<f64>,
    w: DMatrix<f64>,
    w_inv: DMatrix<f64>,
}

impl AlignmentFunction {
    pub fn new(m: DMatrix<f64>, a: DVector<f64>, lambda: f64) -> Result<Self> {
        if !m.is_square() {
            return Err(Error::DimensionMismatch { expected: m.nrows(), got: m.ncols(), context: "alignment M" });
        }
        check_dim(m.nrows(), a.len(), "alignment sign parameters")?;
        if !(lambda > 0.0) {
            return Err(Error::Config(format!("ridge λ must be positive, got {lambda}")));
        }
        let d = a.len();
        let mut af = Self {
            m,
            a,
            lambda,
            s: DVector::zeros(d),
            p: DMatrix::zeros(d, d),
            w: DMatrix::zeros(d, d),
            w_inv: DMatrix::zeros(d, d),
        };
        af.refresh()?;
        Ok(af)
    }

    /// `M ~ N(0, 1/d)` entrywise, `a = 1`.
    pub fn random(dim: usize, rng: &mut Rng) -> Result<Self> {
        let m = gaussian_matrix(rng, dim, dim, 0.0, 1.0 / dim as f64);
        Self::new(m, DVector::from_element(dim, 1.0), DEFAULT_RIDGE)
    }

    /// Parameters chosen so that `W = I` up to rounding.
    pub fn identity(dim: usize) -> Self {
        let lambda = DEFAULT_RIDGE;
        let m = DMatrix::identity(dim, dim) * (1.0 - lambda).sqrt();
        let a = DVector::from_element(dim, (1.0 - lambda).atanh());
        Self::new(m, a, lambda).expect("identity parameters are valid")
    }

    fn refresh(&mut self) -> Result<()> {
        let d = self.dim();
        let t = self.a.map(f64::tanh);
        self.s = t.map(|t| t + self.lambda * sign(t));
        if self.s.iter().any(|s| !(s.abs() >= self.lambda)) {
            return Err(Error::Singular("alignment scale |s_i| fell below λ"));
        }
        self.p = &self.m * self.m.transpose() + DMatrix::identity(d, d) * self.lambda;
        let chol = self.p.clone().cholesky().ok_or(Error::Singular("MMᵀ + λI is not positive definite"))?;
        let p_inv = chol.inverse();
        self.w = self.p.clone();
        for (j, mut col) in self.w.column_iter_mut().enumerate() {
            col *= self.s[j];
        }
        self.w_inv = p_inv;
        for (i, mut row) in self.w_inv.row_iter_mut().enumerate() {
            row /= self.s[i];
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.a.len()
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn m(&self) -> &DMatrix<f64> {
        &self.m
    }

    pub fn a(&self) -> &DVector<f64> {
        &self.a
    }

    pub fn s(&self) -> &DVector<f64> {
        &self.s
    }

    pub fn w(&self) -> &DMatrix<f64> {
        &self.w
    }

    pub fn w_inv(&self) -> &DMatrix<f64> {
        &self.w_inv
    }

    /// Replace `M` and `a` in place, rolling back if the result is singular.
    pub fn set_params(&mut self, m: DMatrix<f64>, a: DVector<f64>) -> Result<()> {
        let old = (std::mem::replace(&mut self.m, m), std::mem::replace(&mut self.a, a));
        if let Err(e) = self.refresh() {
            self.m = old.0;
            self.a = old.1;
            self.refresh().expect("previous parameters were valid");
            return Err(e);
        }
        Ok(())
    }

    pub(crate) fn param_slices_mut(&mut self) -> (&mut [f64], &mut [f64]) {
        (self.m.as_mut_slice(), self.a.as_mut_slice())
    }

    /// Recompute the cached matrices after [`Self::param_slices_mut`].
    pub(crate) fn commit(&mut self) -> Result<()> {
        self.refresh()
    }

    pub fn apply(&self, h: &DVector<f64>) -> Result<DVector<f64>> {
        check_dim(self.dim(), h.len(), "alignment input")?;
        Ok(&self.w * h)
    }

    pub fn invert(&self, z: &DVector<f64>) -> Result<DVector<f64>> {
        check_dim(self.dim(), z.len(), "alignment latent")?;
        Ok(&self.w_inv * z)
    }

    /// `W⁻¹((I−D)W·h_trg + D·W·h_src)` for a 0/1 diagonal given as a vector.
    pub fn interchange_mask(&self, mask: &DVector<f64>, h_trg: &DVector<f64>, h_src: &DVector<f64>) -> Result<DVector<f64>> {
        check_dim(self.dim(), mask.len(), "selector mask")?;
        check_dim(self.dim(), h_trg.len(), "interchange target")?;
        check_dim(self.dim(), h_src.len(), "interchange source")?;
        let delta = (&self.w * (h_src - h_trg)).component_mul(mask);
        Ok(h_trg + &self.w_inv * delta)
    }

    /// `W⁻¹·D·W·h`: the component of `h` in the selected aligned subspace.
    pub fn project_mask(&self, mask: &DVector<f64>, h: &DVector<f64>) -> DVector<f64> {
        &self.w_inv * (&self.w * h).component_mul(mask)
    }

    /// Chain `∂L/∂W` into `(∂L/∂M, ∂L/∂a)`.
    pub fn backprop(&self, grad_w: &DMatrix<f64>) -> (DMatrix<f64>, DVector<f64>) {
        let d = self.dim();
        let mut grad_p = grad_w.clone();
        for (j, mut col) in grad_p.column_iter_mut().enumerate() {
            col *= self.s[j];
        }
        let grad_s = DVector::from_fn(d, |j, _| grad_w.column(j).dot(&self.p.column(j)));
        let grad_m = (&grad_p + grad_p.transpose()) * &self.m;
        let grad_a = DVector::from_fn(d, |j, _| grad_s[j] * (1.0 - self.a[j].tanh().powi(2)));
        (grad_m, grad_a)
    }
}
