//! Brute-force references for validating the engine: finite differences,
//! the quadratic-cost pairwise collision gradient, and dense Hessians.

use crate::autodiff::{grad, GradientMap, Tensor};
use crate::error::{DtlError, Result};
use crate::gc_engine::OpCounters;
use crate::losses::{chunk_ranges, ChunkObjective};

/// Central differences `(f(θ + h e_i) - f(θ - h e_i)) / 2h` per coordinate.
pub fn fd_gradient(f: &dyn Fn(&[f64]) -> Result<f64>, theta: &[f64], step: f64) -> Result<Vec<f64>> {
    if !(step > 0.0) {
        return Err(DtlError::ContractViolation(format!("step {step} must be positive")));
    }
    let mut x = theta.to_vec();
    let mut out = Vec::with_capacity(theta.len());
    for i in 0..theta.len() {
        x[i] = theta[i] + step;
        let up = f(&x)?;
        x[i] = theta[i] - step;
        let down = f(&x)?;
        x[i] = theta[i];
        out.push((up - down) / (2.0 * step));
    }
    Ok(out)
}

/// Builds every pairwise product `<g_m, g_n>`, `m < n`, of chunk gradients
/// into one graph and differentiates the mean directly.
pub fn naive_gc_grad(obj: &dyn ChunkObjective, c: usize, counters: &OpCounters) -> Result<Vec<f64>> {
    let ranges = chunk_ranges(obj.num_samples(), c)?;
    let leaves = obj.leaves();
    let grads: Vec<GradientMap> = ranges
        .into_iter()
        .map(|r| {
            let loss = obj.chunk_loss(&leaves, r)?;
            counters.add_forward();
            counters.add_reverse();
            grad(&loss, &leaves, true)
        })
        .collect::<Result<_>>()?;
    let mut total = Tensor::scalar(0.0);
    for m in 0..c {
        for n in m + 1..c {
            for (a, b) in grads[m].tensors().iter().zip(grads[n].tensors()) {
                total = total.add(&a.dot(b)?)?;
            }
            counters.add_pair_product();
        }
    }
    let pairs = (c * (c - 1) / 2) as f64;
    let out = grad(&total.scale(1.0 / pairs), &leaves, false)?.flatten();
    counters.add_reverse();
    Ok(out)
}

/// Dense symmetric matrix of second derivatives.
#[derive(Clone, Debug, PartialEq)]
pub struct ExactHessian {
    pub n: usize,
    pub entries: Vec<f64>,
}

impl ExactHessian {
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.entries[i * self.n + j]
    }

    pub fn trace(&self) -> f64 {
        (0..self.n).map(|i| self.get(i, i)).sum()
    }

    pub fn symmetry_defect(&self) -> f64 {
        let mut worst = 0.0f64;
        for i in 0..self.n {
            for j in 0..self.n {
                worst = worst.max((self.get(i, j) - self.get(j, i)).abs());
            }
        }
        worst
    }
}

pub const MAX_HESSIAN_PARAMS: usize = 64;

/// Central differences of an analytic gradient, `(g(θ + h e_j) - g(θ - h e_j)) / 2h`
/// as column `j`, then symmetrized.
pub fn exact_hessian(
    gradient: &dyn Fn(&[f64]) -> Result<Vec<f64>>,
    theta: &[f64],
    step: f64,
) -> Result<ExactHessian> {
    let n = theta.len();
    if n > MAX_HESSIAN_PARAMS {
        return Err(DtlError::ContractViolation(format!(
            "exact Hessian limited to {MAX_HESSIAN_PARAMS} parameters, got {n}"
        )));
    }
    if !(step > 0.0) {
        return Err(DtlError::ContractViolation(format!("step {step} must be positive")));
    }
    let mut cols = vec![0.0; n * n];
    let mut x = theta.to_vec();
    for j in 0..n {
        x[j] = theta[j] + step;
        let up = gradient(&x)?;
        x[j] = theta[j] - step;
        let down = gradient(&x)?;
        x[j] = theta[j];
        if up.len() != n || down.len() != n {
            return Err(DtlError::InvalidShape("gradient length differs from θ".into()));
        }
        for i in 0..n {
            cols[i * n + j] = (up[i] - down[i]) / (2.0 * step);
        }
    }
    let mut entries = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            entries[i * n + j] = 0.5 * (cols[i * n + j] + cols[j * n + i]);
        }
    }
    Ok(ExactHessian { n, entries })
}

/// Flat-vector loss and gradient closures over a fixed graph builder.
pub fn flat_loss<'a>(
    shapes: &'a [Vec<usize>],
    build: &'a dyn Fn(&[Tensor]) -> Result<Tensor>,
) -> impl Fn(&[f64]) -> Result<f64> + 'a {
    move |theta| {
        let leaves = leaves_from(shapes, theta)?;
        Ok(build(&leaves)?.item())
    }
}

pub fn flat_grad<'a>(
    shapes: &'a [Vec<usize>],
    build: &'a dyn Fn(&[Tensor]) -> Result<Tensor>,
) -> impl Fn(&[f64]) -> Result<Vec<f64>> + 'a {
    move |theta| {
        let leaves = leaves_from(shapes, theta)?;
        Ok(grad(&build(&leaves)?, &leaves, false)?.flatten())
    }
}

pub fn leaves_from(shapes: &[Vec<usize>], theta: &[f64]) -> Result<Vec<Tensor>> {
    let mut off = 0;
    let out = shapes
        .iter()
        .map(|s| {
            let n: usize = s.iter().product();
            let t = Tensor::param(theta.get(off..off + n).unwrap_or_default().to_vec(), s);
            off += n;
            t
        })
        .collect::<Result<Vec<_>>>()?;
    if off != theta.len() {
        return Err(DtlError::InvalidShape(format!("{} values for {off} parameters", theta.len())));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fd_on_polynomials() {
        let g = fd_gradient(&|x: &[f64]| Ok(x[0] * x[0]), &[3.0], 1e-5).unwrap();
        assert!((g[0] - 6.0).abs() < 1e-8);
        let z = fd_gradient(&|_: &[f64]| Ok(4.2), &[1.0, -2.0], 1e-5).unwrap();
        assert_eq!(z, vec![0.0, 0.0]);
        assert!(fd_gradient(&|_: &[f64]| Ok(0.0), &[1.0], 0.0).is_err());
    }

    #[test]
    fn hessian_of_quadratic() {
        // ½ θᵀAθ, A = [[2, 1], [1, 4]]
        let shapes = vec![vec![2]];
        let build = |l: &[Tensor]| -> Result<Tensor> {
            let a = Tensor::constant(vec![2.0, 1.0, 1.0, 4.0], &[2, 2])?;
            let t = l[0].reshape(&[2, 1])?;
            Ok(t.transpose()?.matmul(&a)?.matmul(&t)?.sum().scale(0.5))
        };
        let g = flat_grad(&shapes, &build);
        let h = exact_hessian(&g, &[0.3, -0.8], 1e-4).unwrap();
        for (a, b) in h.entries.iter().zip([2.0, 1.0, 1.0, 4.0]) {
            assert!((a - b).abs() < 1e-9);
        }
        assert!(h.symmetry_defect() < 1e-8);
        assert!((h.trace() - 6.0).abs() < 1e-9);
        let big = vec![0.0; 65];
        assert!(exact_hessian(&|x: &[f64]| Ok(x.to_vec()), &big, 1e-4).is_err());
    }
}
