//! Smoothed-Huber regression with a bounded non-convex regularizer.
//!
//! Worker `i` holds `(A_i, y_i)` and minimizes
//! `(n/m) * sum_j h(A_i(j) . x - y_i(j)) + lambda * sum_l x_l^2 / (1 + x_l^2)`,
//! where `m` is the total row count across workers. The global objective is
//! the uniform average of the local ones.

mod generate;

pub use generate::{generate_problem, GenerationSpec};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::pairwise_mean;

/// Smoothed Huber loss: quadratic on `|u| <= 1`, cubic blend on `(1, 2]`,
/// linear beyond. Twice continuously differentiable.
pub fn huber_value(u: f64) -> f64 {
    let a = u.abs();
    if a <= 1.0 {
        0.5 * u * u
    } else if a <= 2.0 {
        let e = a - 1.0;
        -e * e * e / 6.0 + 0.5 * u * u
    } else {
        1.5 * a - 7.0 / 6.0
    }
}

pub fn huber_deriv(u: f64) -> f64 {
    let a = u.abs();
    if a <= 1.0 {
        u
    } else if a <= 2.0 {
        let e = a - 1.0;
        -u.signum() * e * e / 2.0 + u
    } else {
        1.5 * u.signum()
    }
}

pub fn huber_second_deriv(u: f64) -> f64 {
    let a = u.abs();
    if a <= 1.0 {
        1.0
    } else if a <= 2.0 {
        2.0 - a
    } else {
        0.0
    }
}

/// `weight * sum_l x_l^2 / (1 + x_l^2)`.
pub fn regularizer_value(weight: f64, x: &DVector<f64>) -> f64 {
    weight * x.iter().map(|&v| v * v / (1.0 + v * v)).sum::<f64>()
}

pub fn regularizer_grad(weight: f64, x: &DVector<f64>) -> DVector<f64> {
    x.map(|v| {
        let q = 1.0 + v * v;
        weight * 2.0 * v / (q * q)
    })
}

/// Diagonal of the regularizer Hessian.
pub fn regularizer_hess_diag(weight: f64, x: &DVector<f64>) -> DVector<f64> {
    x.map(|v| {
        let q = 1.0 + v * v;
        weight * 2.0 * (1.0 - 3.0 * v * v) / (q * q * q)
    })
}

/// One worker's data.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalObjective {
    pub data_matrix: DMatrix<f64>,
    /// The `y_i` values.
    pub targets: DVector<f64>,
    pub reg_weight: f64,
    /// The point `x*_i` used to build `targets`; kept for diagnostics.
    pub anchor: DVector<f64>,
}

impl LocalObjective {
    pub fn new(
        data_matrix: DMatrix<f64>,
        targets: DVector<f64>,
        reg_weight: f64,
        anchor: DVector<f64>,
    ) -> Result<Self> {
        if data_matrix.nrows() != targets.len() {
            return Err(Error::Dimension {
                expected: data_matrix.nrows(),
                actual: targets.len(),
            });
        }
        if data_matrix.ncols() != anchor.len() {
            return Err(Error::Dimension {
                expected: data_matrix.ncols(),
                actual: anchor.len(),
            });
        }
        if !(reg_weight >= 0.0) {
            return Err(Error::Config(format!(
                "regularizer weight must be non-negative, got {reg_weight}"
            )));
        }
        Ok(LocalObjective {
            data_matrix,
            targets,
            reg_weight,
            anchor,
        })
    }

    /// Builds a worker whose targets are `A * anchor`.
    pub fn from_anchor(data_matrix: DMatrix<f64>, anchor: DVector<f64>, reg_weight: f64) -> Result<Self> {
        if data_matrix.ncols() != anchor.len() {
            return Err(Error::Dimension {
                expected: data_matrix.ncols(),
                actual: anchor.len(),
            });
        }
        let targets = &data_matrix * &anchor;
        Self::new(data_matrix, targets, reg_weight, anchor)
    }

    pub fn rows(&self) -> usize {
        self.data_matrix.nrows()
    }

    pub fn dimension(&self) -> usize {
        self.data_matrix.ncols()
    }
}

/// Conditioning targets requested at generation time.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct RequestedConditioning {
    #[serde(rename = "L")]
    pub l: f64,
    pub zeta: Option<f64>,
    pub delta: f64,
    /// Requested initial gap `f(0) - f(mean anchor)`.
    pub gap: f64,
}

/// What the generator actually reached, with the knob values that reached it.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct AchievedConditioning {
    pub zeta: f64,
    /// Sampled delta of the instance without anchor spread.
    pub delta: f64,
    /// Sampled delta of the instance itself.
    pub delta_total: f64,
    pub gap: f64,
    /// Scale of the per-worker perturbation of the data matrix.
    pub noise_scale: f64,
    /// Scale of the per-worker anchor spread.
    pub spread_scale: f64,
    /// Norm of the common anchor offset.
    pub offset_scale: f64,
}

/// The `n` local objectives of one distributed problem. Immutable once built.
#[derive(Debug, Clone, PartialEq)]
pub struct ProblemInstance {
    dimension: usize,
    locals: Vec<LocalObjective>,
    row_weight: f64,
    pub seed: u64,
    pub requested: RequestedConditioning,
    pub achieved: Option<AchievedConditioning>,
}

impl ProblemInstance {
    pub fn new(locals: Vec<LocalObjective>, seed: u64) -> Result<Self> {
        let first = locals
            .first()
            .ok_or_else(|| Error::Config("a problem needs at least one worker".into()))?;
        let dimension = first.dimension();
        if dimension == 0 {
            return Err(Error::Config("dimension must be positive".into()));
        }
        for local in &locals {
            if local.dimension() != dimension {
                return Err(Error::Dimension {
                    expected: dimension,
                    actual: local.dimension(),
                });
            }
        }
        let total_rows: usize = locals.iter().map(LocalObjective::rows).sum();
        // no rows anywhere means no loss term at all
        let row_weight = if total_rows == 0 {
            0.0
        } else {
            locals.len() as f64 / total_rows as f64
        };
        Ok(ProblemInstance {
            dimension,
            locals,
            row_weight,
            seed,
            requested: RequestedConditioning::default(),
            achieved: None,
        })
    }

    /// Replaces the default `n/m` weight on every loss row.
    pub fn with_row_weight(mut self, weight: f64) -> Self {
        self.row_weight = weight;
        self
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn num_workers(&self) -> usize {
        self.locals.len()
    }

    pub fn locals(&self) -> &[LocalObjective] {
        &self.locals
    }

    /// Weight applied to every loss row: `n/m` unless overridden.
    pub fn row_weight(&self) -> f64 {
        self.row_weight
    }

    pub fn local(&self, i: usize) -> Result<&LocalObjective> {
        self.locals.get(i).ok_or(Error::WorkerIndex {
            index: i,
            workers: self.locals.len(),
        })
    }

    fn check_point(&self, x: &DVector<f64>) -> Result<()> {
        if x.len() != self.dimension {
            return Err(Error::Dimension {
                expected: self.dimension,
                actual: x.len(),
            });
        }
        Ok(())
    }

    fn residuals(local: &LocalObjective, x: &DVector<f64>) -> DVector<f64> {
        let mut r = &local.data_matrix * x;
        r -= &local.targets;
        r
    }

    pub fn local_value(&self, i: usize, x: &DVector<f64>) -> Result<f64> {
        let local = self.local(i)?;
        self.check_point(x)?;
        let r = Self::residuals(local, x);
        let loss: f64 = r.iter().map(|&u| huber_value(u)).sum();
        Ok(self.row_weight * loss + regularizer_value(local.reg_weight, x))
    }

    pub fn local_grad(&self, i: usize, x: &DVector<f64>) -> Result<DVector<f64>> {
        Ok(self.local_value_grad(i, x)?.1)
    }

    /// Value and gradient from a single residual evaluation.
    pub fn local_value_grad(&self, i: usize, x: &DVector<f64>) -> Result<(f64, DVector<f64>)> {
        let local = self.local(i)?;
        self.check_point(x)?;
        let r = Self::residuals(local, x);
        let loss: f64 = r.iter().map(|&u| huber_value(u)).sum();
        let hd = r.map(huber_deriv);
        let mut g = local.data_matrix.tr_mul(&hd);
        g *= self.row_weight;
        g += regularizer_grad(local.reg_weight, x);
        let value = self.row_weight * loss + regularizer_value(local.reg_weight, x);
        Ok((value, g))
    }

    pub fn local_hess(&self, i: usize, x: &DVector<f64>) -> Result<DMatrix<f64>> {
        let local = self.local(i)?;
        self.check_point(x)?;
        let r = Self::residuals(local, x);
        // h'' >= 0, so A^T diag(h'') A = C^T C with C = diag(sqrt h'') A
        let mut c = local.data_matrix.clone();
        for (j, &u) in r.iter().enumerate() {
            let s = huber_second_deriv(u).sqrt();
            c.row_mut(j).scale_mut(s);
        }
        let mut h = c.tr_mul(&c);
        h *= self.row_weight;
        let reg = regularizer_hess_diag(local.reg_weight, x);
        for l in 0..self.dimension {
            h[(l, l)] += reg[l];
        }
        Ok(h)
    }

    pub fn global_value(&self, x: &DVector<f64>) -> Result<f64> {
        let mut total = 0.0;
        for i in 0..self.num_workers() {
            total += self.local_value(i, x)?;
        }
        Ok(total / self.num_workers() as f64)
    }

    pub fn global_grad(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        Ok(self.global_value_grad(x)?.1)
    }

    pub fn global_value_grad(&self, x: &DVector<f64>) -> Result<(f64, DVector<f64>)> {
        let mut total = 0.0;
        let mut grads = Vec::with_capacity(self.num_workers());
        for i in 0..self.num_workers() {
            let (v, g) = self.local_value_grad(i, x)?;
            total += v;
            grads.push(g);
        }
        Ok((total / self.num_workers() as f64, pairwise_mean(&grads)))
    }

    pub fn global_hess(&self, x: &DVector<f64>) -> Result<DMatrix<f64>> {
        let mut h = self.local_hess(0, x)?;
        for i in 1..self.num_workers() {
            h += self.local_hess(i, x)?;
        }
        h /= self.num_workers() as f64;
        Ok(h)
    }

    /// Mean of the worker anchors.
    pub fn anchor_mean(&self) -> DVector<f64> {
        let anchors: Vec<_> = self.locals.iter().map(|l| l.anchor.clone()).collect();
        pairwise_mean(&anchors)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit_row_instance(x_anchor: f64, lambda: f64) -> ProblemInstance {
        let local = LocalObjective::from_anchor(
            DMatrix::from_element(1, 1, 1.0),
            DVector::from_element(1, x_anchor),
            lambda,
        )
        .unwrap();
        ProblemInstance::new(vec![local], 1).unwrap()
    }

    #[test]
    fn huber_examples() {
        assert_eq!(huber_value(0.0), 0.0);
        assert!((huber_value(2.0) - 11.0 / 6.0).abs() < 1e-15);
        assert!((huber_value(3.0) - 10.0 / 3.0).abs() < 1e-15);
        assert_eq!(huber_deriv(1.0), 1.0);
        assert_eq!(huber_deriv(2.0), 1.5);
        assert_eq!(huber_second_deriv(1.5), 0.5);
        assert_eq!(huber_second_deriv(-3.0), 0.0);
    }

    #[test]
    fn huber_branches_join_smoothly() {
        for &b in &[1.0f64, 2.0] {
            for &s in &[1.0f64, -1.0] {
                let at = s * b;
                let below = s * (b - 1e-12);
                let above = s * (b + 1e-12);
                for f in [huber_value, huber_deriv, huber_second_deriv] {
                    assert!((f(below) - f(at)).abs() < 1e-11);
                    assert!((f(above) - f(at)).abs() < 1e-11);
                }
            }
        }
        // the linear branch of the value, evaluated exactly at 2
        assert!((1.5 * 2.0 - 7.0 / 6.0 - huber_value(2.0)).abs() < 1e-15);
    }

    #[test]
    fn huber_is_odd_even_as_expected() {
        for &u in &[0.3, 1.2, 1.9, 2.5, 40.0] {
            assert_eq!(huber_value(u), huber_value(-u));
            assert_eq!(huber_deriv(u), -huber_deriv(-u));
            assert_eq!(huber_second_deriv(u), huber_second_deriv(-u));
        }
    }

    #[test]
    fn regularizer_examples() {
        let zero = DVector::zeros(3);
        assert_eq!(regularizer_value(1.0, &zero), 0.0);
        assert_eq!(regularizer_grad(1.0, &zero), DVector::zeros(3));
        let one = DVector::from_element(1, 1.0);
        assert_eq!(regularizer_value(1.0, &one), 0.5);
        assert_eq!(regularizer_grad(1.0, &one)[0], 0.5);
        assert_eq!(regularizer_hess_diag(1.0, &one)[0], -0.5);
    }

    #[test]
    fn unit_row_reduces_to_huber() {
        let p = unit_row_instance(0.0, 0.0);
        let x = DVector::from_element(1, 3.0);
        assert!((p.local_value(0, &x).unwrap() - 10.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn value_and_gradient_vanish_at_anchor_without_regularizer() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, -0.5, 0.3]);
        let anchor = DVector::from_vec(vec![0.4, -1.1]);
        let local = LocalObjective::from_anchor(a, anchor.clone(), 0.0).unwrap();
        let p = ProblemInstance::new(vec![local], 0).unwrap();
        assert_eq!(p.local_value(0, &anchor).unwrap(), 0.0);
        assert!(p.local_grad(0, &anchor).unwrap().norm() < 1e-15);
    }

    #[test]
    fn index_out_of_range_is_an_error() {
        let p = unit_row_instance(0.0, 0.0);
        let x = DVector::zeros(1);
        assert!(matches!(
            p.local_value(1, &x),
            Err(Error::WorkerIndex { index: 1, workers: 1 })
        ));
        assert!(p.local_grad(7, &x).is_err());
        assert!(p.local_hess(7, &x).is_err());
    }

    #[test]
    fn single_worker_global_equals_local() {
        let p = unit_row_instance(0.7, 0.3);
        let x = DVector::from_element(1, -1.4);
        assert_eq!(p.global_value(&x).unwrap(), p.local_value(0, &x).unwrap());
        assert_eq!(p.global_grad(&x).unwrap(), p.local_grad(0, &x).unwrap());
    }

    #[test]
    fn common_anchor_is_global_stationary_point() {
        let anchor = DVector::from_vec(vec![0.2, -0.3]);
        let locals = (0..3)
            .map(|k| {
                let a = DMatrix::from_fn(2, 2, |r, c| (r + 2 * c + k) as f64 * 0.3 - 0.4);
                LocalObjective::from_anchor(a, anchor.clone(), 0.0).unwrap()
            })
            .collect();
        let p = ProblemInstance::new(locals, 0).unwrap();
        assert!(p.global_grad(&anchor).unwrap().norm() < 1e-15);
    }

    #[test]
    fn row_weight_is_workers_over_total_rows() {
        let mk = |rows| {
            LocalObjective::from_anchor(DMatrix::from_element(rows, 2, 1.0), DVector::zeros(2), 0.0).unwrap()
        };
        let p = ProblemInstance::new(vec![mk(2), mk(3)], 0).unwrap();
        assert_eq!(p.row_weight(), 2.0 / 5.0);
        let empty = ProblemInstance::new(vec![mk(0)], 0).unwrap();
        assert_eq!(empty.row_weight(), 0.0);
    }

    #[test]
    fn mismatched_dimensions_are_rejected() {
        let a = LocalObjective::from_anchor(DMatrix::zeros(1, 2), DVector::zeros(2), 0.0).unwrap();
        let b = LocalObjective::from_anchor(DMatrix::zeros(1, 3), DVector::zeros(3), 0.0).unwrap();
        assert!(ProblemInstance::new(vec![a, b], 0).is_err());
        assert!(LocalObjective::new(DMatrix::zeros(2, 2), DVector::zeros(3), 0.0, DVector::zeros(2)).is_err());
        assert!(LocalObjective::new(DMatrix::zeros(2, 2), DVector::zeros(2), -1.0, DVector::zeros(2)).is_err());
    }
}
