//! Data misfit, adjoint gradient, and the truncated reconstruction operator.
//!
//! The misfit is the squared Frobenius distance between the observed and
//! simulated D2N matrices plus an optional Tikhonov penalty. Its gradient per
//! element follows from the Schur-complement structure: with `U` the harmonic
//! solution matrix and `R = M_sigma - M_obs`,
//!
//! ```text
//! d misfit / d sigma_e = 2 sum_j u_j^T K_e^geo v_j,   V = U R^T,
//! ```
//!
//! so the whole gradient costs one factorization, one multi-RHS solve block
//! (shared with the misfit), and a per-element 3x3 contraction; no
//! per-element solves.

use ndarray::Array2;

use crate::error::{CoreError, Result};
use crate::fem::{Conductivity, D2NMatrix, FemContext};
use crate::lbfgs::{lbfgs_minimize, LbfgsOptions, LbfgsResult};
use crate::mesh::Mesh;
use crate::parallel::map_indexed;

/// Floor applied to conductivity iterates to preserve ellipticity.
pub const SIGMA_FLOOR: f64 = 1e-3;

/// Default gradient infinity-norm stopping tolerance.
pub const DEFAULT_GRAD_TOL: f64 = 1e-10;

/// L-BFGS memory used by every reconstruction.
pub const LBFGS_MEMORY: usize = 10;

/// One measurement-fitting problem: a mesh, an observed D2N matrix, and an
/// optional Tikhonov weight (`lambda = 0` disables the penalty).
pub struct InverseProblem {
    ctx: FemContext,
    m_obs: D2NMatrix,
    lambda: f64,
}

impl InverseProblem {
    pub fn new(mesh: Mesh, m_obs: D2NMatrix, lambda: f64) -> Result<Self> {
        if lambda < 0.0 || !lambda.is_finite() {
            return Err(CoreError::invalid("lambda must be finite and >= 0"));
        }
        if m_obs.n_boundary() != mesh.n_boundary() {
            return Err(CoreError::invalid(format!(
                "measurement has {} boundary nodes, mesh has {}",
                m_obs.n_boundary(),
                mesh.n_boundary()
            )));
        }
        Ok(InverseProblem {
            ctx: FemContext::new(mesh),
            m_obs,
            lambda,
        })
    }

    pub fn from_context(ctx: FemContext, m_obs: D2NMatrix, lambda: f64) -> Result<Self> {
        if lambda < 0.0 || !lambda.is_finite() {
            return Err(CoreError::invalid("lambda must be finite and >= 0"));
        }
        if m_obs.n_boundary() != ctx.mesh().n_boundary() {
            return Err(CoreError::invalid("measurement/mesh boundary size mismatch"));
        }
        Ok(InverseProblem {
            ctx,
            m_obs,
            lambda,
        })
    }

    pub fn context(&self) -> &FemContext {
        &self.ctx
    }

    pub fn observed(&self) -> &D2NMatrix {
        &self.m_obs
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    /// `||M_obs - M_sigma||_F^2 + lambda ||sigma||_2^2`.
    pub fn misfit(&self, sigma: &Conductivity) -> Result<f64> {
        Ok(self.misfit_and_gradient(sigma)?.0)
    }

    /// Exact discrete gradient of [`InverseProblem::misfit`], one entry per
    /// element.
    pub fn misfit_gradient(&self, sigma: &Conductivity) -> Result<Vec<f64>> {
        Ok(self.misfit_and_gradient(sigma)?.1)
    }

    /// Misfit value and gradient from a single forward solve.
    pub fn misfit_and_gradient(&self, sigma: &Conductivity) -> Result<(f64, Vec<f64>)> {
        let forward = self.ctx.forward(sigma)?;
        let residual: Array2<f64> = forward.d2n().matrix() - self.m_obs.matrix();
        let mut value: f64 = residual.iter().map(|v| v * v).sum();
        value += self.lambda * sigma.values().iter().map(|v| v * v).sum::<f64>();

        let u = forward.harmonic_matrix();
        let v = u.dot(&residual.t());

        let geometry = self.ctx.geometry();
        let lambda = self.lambda;
        let sigma_values = sigma.values();
        let grad = map_indexed(geometry.element_nodes.len(), |e| {
            let nodes = geometry.element_nodes[e];
            let ke = &geometry.element_stiffness[e];
            let mut acc = 0.0;
            for a in 0..3 {
                let ua = u.row(nodes[a]);
                for b in 0..3 {
                    let vb = v.row(nodes[b]);
                    acc += ke[a][b] * ua.dot(&vb);
                }
            }
            2.0 * acc + 2.0 * lambda * sigma_values[e]
        });
        Ok((value, grad))
    }
}

/// Run L-BFGS on an inverse problem from `sigma_init`, projecting iterates
/// onto `sigma >= SIGMA_FLOOR`.
pub fn lbfgs_reconstruct(
    problem: &InverseProblem,
    sigma_init: Conductivity,
    max_iters: usize,
    memory: usize,
    grad_tol: f64,
) -> Result<LbfgsResult> {
    if sigma_init.len() != problem.ctx.mesh().n_elements() {
        return Err(CoreError::invalid("sigma_init length does not match mesh"));
    }
    let opts = LbfgsOptions {
        max_iters,
        memory,
        grad_tol,
        positivity_floor: Some(SIGMA_FLOOR),
    };
    let objective = |x: &[f64]| {
        let sigma = Conductivity::new(x.to_vec())?;
        problem.misfit_and_gradient(&sigma)
    };
    lbfgs_minimize(objective, sigma_init.values().to_vec(), &opts)
}

/// The truncated reconstruction operator: L-BFGS from the constant unit
/// background, memory 10, no regularization, stopped after `k_iters`
/// iterations. Deterministic in its inputs.
pub fn reconstruction_operator(
    ctx: FemContext,
    measurement: &D2NMatrix,
    k_iters: usize,
) -> Result<(Conductivity, LbfgsResult)> {
    let n_e = ctx.mesh().n_elements();
    let problem = InverseProblem::from_context(ctx, measurement.clone(), 0.0)?;
    let init = Conductivity::constant(n_e, 1.0)?;
    let result = lbfgs_reconstruct(&problem, init, k_iters, LBFGS_MEMORY, DEFAULT_GRAD_TOL)?;
    let sigma = Conductivity::new(result.x.clone())?;
    Ok((sigma, result))
}

/// Write an optimization trace as CSV (`iteration,misfit,grad_norm,step_length,clamped`).
pub fn write_trace_csv(path: &std::path::Path, result: &LbfgsResult) -> Result<()> {
    use std::io::Write;
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "iteration,misfit,grad_norm,step_length,clamped")?;
    for rec in &result.trace {
        writeln!(
            w,
            "{},{:e},{:e},{:e},{}",
            rec.iteration, rec.misfit, rec.grad_norm, rec.step_length, rec.clamped
        )?;
    }
    Ok(())
}
