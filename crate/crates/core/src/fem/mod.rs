//! Fully discrete reaction-diffusion stepping.
//!
//! The model is `ċ = ∇·(ρ κ ∇c) + R(c)` with the SIS reaction
//! `R(c) = (β − γ) c − β c²`, discretized with linear triangles in space and
//! implicit Euler in time. Each step solves the nonlinear system
//!
//! ```text
//! F(c) = M (c − c_prev) / Δt + K(κ) c − r(c) − b_h = 0
//! ```
//!
//! with Newton's method, where `r_a(c) = ∫ R(c_h) N_a` and `b_h` is the
//! boundary flux load. `F` is the gradient of the incremental potential
//!
//! ```text
//! I(c) = |c − c_prev|²_M / (2Δt) + ½ cᵀ K c − ∫ H(c_h) − b_hᵀ c,
//! H(c) = (β − γ) c²/2 − β c³/3,
//! ```
//!
//! which is exposed as an independent check on the residual.
//! Rows of prescribed (Dirichlet) nodes are replaced by `c_a − g_a`.

pub mod assembly;
pub mod linsolve;
pub mod sparse;

use std::io::Write;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mesh::{ElementGeometry, Mesh};

pub use assembly::{assemble_mass, assemble_stiffness};
pub use linsolve::{solve_linear, LinearSolveError, LinearSolver};
pub use sparse::CsrMatrix;

#[derive(Debug, Error)]
pub enum FemError {
    #[error("control has {found} regions, mesh has {expected}")]
    ControlSize { expected: usize, found: usize },
    #[error("diffusivity of region {region} must be positive and finite, got {value}")]
    NonPositiveDiffusivity { region: usize, value: f64 },
    #[error("field has {found} values, mesh has {expected} nodes")]
    FieldSize { expected: usize, found: usize },
    #[error("invalid simulation parameters: {0}")]
    InvalidParams(String),
    #[error("newton iteration did not converge after {iterations} iterations (residual {residual:e})")]
    NewtonFailed { iterations: usize, residual: f64 },
    #[error(transparent)]
    Linear(#[from] LinearSolveError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimParams {
    /// Contact rate.
    pub beta: f64,
    /// Recovery (infectious) rate.
    pub gamma: f64,
    pub rho: f64,
    pub dt: f64,
    pub n_steps: usize,
    /// Uniform normal influx on the flux boundary.
    pub flux: f64,
}

impl Default for SimParams {
    fn default() -> Self {
        Self { beta: 2.5, gamma: 1.0, rho: 1.0, dt: 0.01, n_steps: 60, flux: 0.0 }
    }
}

impl SimParams {
    pub fn validate(&self) -> Result<(), FemError> {
        let bad = |m: &str| Err(FemError::InvalidParams(m.into()));
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return bad("dt must be positive");
        }
        if self.n_steps == 0 {
            return bad("n_steps must be at least 1");
        }
        if !(self.rho > 0.0 && self.rho.is_finite()) {
            return bad("rho must be positive");
        }
        if ![self.beta, self.gamma, self.flux].iter().all(|v| v.is_finite()) {
            return bad("beta, gamma and flux must be finite");
        }
        Ok(())
    }

    pub fn end_time(&self) -> f64 {
        self.dt * self.n_steps as f64
    }
}

/// The SIS reaction `(β − γ) c − β c²`.
pub fn reaction(c: f64, beta: f64, gamma: f64) -> f64 {
    (beta - gamma) * c - beta * c * c
}

pub fn reaction_deriv(c: f64, beta: f64, gamma: f64) -> f64 {
    (beta - gamma) - 2.0 * beta * c
}

/// Nodal coefficients of the state at one time level.
#[derive(Clone, Debug, PartialEq)]
pub struct Field {
    pub values: Vec<f64>,
    pub time_index: usize,
}

impl Field {
    pub fn new(values: Vec<f64>) -> Self {
        Self { values, time_index: 0 }
    }

    pub fn constant(n: usize, value: f64) -> Self {
        Self::new(vec![value; n])
    }
}

/// One diffusivity per mesh region.
#[derive(Clone, Debug, PartialEq)]
pub struct ControlMap {
    kappa: Vec<f64>,
}

impl ControlMap {
    pub fn new(kappa: Vec<f64>) -> Result<Self, FemError> {
        if let Some(r) = kappa.iter().position(|&k| !(k > 0.0 && k.is_finite())) {
            return Err(FemError::NonPositiveDiffusivity { region: r, value: kappa[r] });
        }
        Ok(Self { kappa })
    }

    #[cfg(test)]
    pub(crate) fn new_unchecked(kappa: Vec<f64>) -> Self {
        Self { kappa }
    }

    pub fn uniform(n_regions: usize, kappa: f64) -> Self {
        Self::new(vec![kappa; n_regions]).expect("uniform diffusivity must be positive")
    }

    pub fn values(&self) -> &[f64] {
        &self.kappa
    }

    pub fn len(&self) -> usize {
        self.kappa.len()
    }

    pub fn is_empty(&self) -> bool {
        self.kappa.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NewtonSettings {
    /// Absolute tolerance on the max-norm of the residual.
    pub tol: f64,
    pub max_iter: usize,
    pub solver: LinearSolver,
}

impl Default for NewtonSettings {
    fn default() -> Self {
        Self { tol: 1e-10, max_iter: 25, solver: LinearSolver::Direct }
    }
}

/// Convergence record of one implicit step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepReport {
    /// Max-norm of the residual before each Newton update and after the last.
    pub residuals: Vec<f64>,
}

impl StepReport {
    pub fn iterations(&self) -> usize {
        self.residuals.len() - 1
    }
}

/// Mass matrix and geometry of one mesh, shared by every step.
#[derive(Clone, Debug)]
pub struct Simulator {
    mesh: Arc<Mesh>,
    params: SimParams,
    newton: NewtonSettings,
    geometry: Vec<ElementGeometry>,
    mass: CsrMatrix,
    region_areas: Vec<f64>,
    flux_load: Vec<f64>,
    ordering: linsolve::Ordering,
}

impl Simulator {
    pub fn new(mesh: Arc<Mesh>, params: SimParams) -> Result<Self, FemError> {
        params.validate()?;
        let geometry = mesh.geometries();
        let mass = assembly::assemble_mass_with(&mesh, &geometry);
        let ordering = linsolve::Ordering::reverse_cuthill_mckee(&mass);
        Ok(Self {
            region_areas: mesh.region_areas(),
            flux_load: assembly::flux_load(&mesh, params.flux),
            mesh,
            params,
            newton: NewtonSettings::default(),
            geometry,
            mass,
            ordering,
        })
    }

    pub fn with_newton(mut self, newton: NewtonSettings) -> Self {
        self.newton = newton;
        self
    }

    pub fn mesh(&self) -> &Arc<Mesh> {
        &self.mesh
    }

    pub fn params(&self) -> &SimParams {
        &self.params
    }

    pub fn mass(&self) -> &CsrMatrix {
        &self.mass
    }

    pub fn stiffness(&self, control: &ControlMap) -> Result<CsrMatrix, FemError> {
        assembly::assemble_stiffness_with(&self.mesh, &self.geometry, control, self.params.rho)
    }

    fn check_len(&self, v: &[f64]) -> Result<(), FemError> {
        if v.len() != self.mesh.n_nodes() {
            return Err(FemError::FieldSize { expected: self.mesh.n_nodes(), found: v.len() });
        }
        Ok(())
    }

    /// `∫ R(c_h) N_a` for every node.
    pub fn reaction_load(&self, c: &[f64]) -> Vec<f64> {
        let SimParams { beta, gamma, .. } = self.params;
        let mc = self.mass.mul_vec(c);
        let q = assembly::quadratic_load(&self.mesh, &self.geometry, c);
        mc.iter().zip(q).map(|(m, q)| (beta - gamma) * m - beta * q).collect()
    }

    /// Residual with a precomputed stiffness matrix.
    pub fn residual_with(&self, c_next: &[f64], c_prev: &[f64], stiffness: &CsrMatrix) -> Vec<f64> {
        let dt = self.params.dt;
        let diff: Vec<f64> = c_next.iter().zip(c_prev).map(|(a, b)| a - b).collect();
        let m_diff = self.mass.mul_vec(&diff);
        let kc = stiffness.mul_vec(c_next);
        let r = self.reaction_load(c_next);
        let mut f: Vec<f64> = (0..c_next.len())
            .map(|a| m_diff[a] / dt + kc[a] - r[a] - self.flux_load[a])
            .collect();
        for &(node, g) in self.mesh.dirichlet() {
            f[node] = c_next[node] - g;
        }
        f
    }

    pub fn residual(&self, c_next: &Field, c_prev: &Field, control: &ControlMap) -> Result<Vec<f64>, FemError> {
        self.check_len(&c_next.values)?;
        self.check_len(&c_prev.values)?;
        Ok(self.residual_with(&c_next.values, &c_prev.values, &self.stiffness(control)?))
    }

    /// Newton matrix `M/Δt + K − ∂r/∂c`.
    fn jacobian(&self, c: &[f64], stiffness: &CsrMatrix) -> CsrMatrix {
        let SimParams { beta, gamma, dt, .. } = self.params;
        let mut j = stiffness.clone();
        j.add_scaled(1.0 / dt - (beta - gamma), &self.mass);
        if beta != 0.0 {
            j.add_scaled(2.0 * beta, &assembly::weighted_mass(&self.mesh, &self.geometry, c));
        }
        j
    }

    fn solve(&self, a: &CsrMatrix, b: &[f64]) -> Result<Vec<f64>, FemError> {
        Ok(match self.newton.solver {
            LinearSolver::Direct => linsolve::Cholesky::factor(a, &self.ordering)?.solve_refined(a, b)?,
            LinearSolver::ConjugateGradient => linsolve::conjugate_gradient(a, b)?,
        })
    }

    pub fn step(&self, c_prev: &Field, control: &ControlMap) -> Result<Field, FemError> {
        self.step_with_report(c_prev, control).map(|(f, _)| f)
    }

    pub fn step_with_report(&self, c_prev: &Field, control: &ControlMap) -> Result<(Field, StepReport), FemError> {
        self.check_len(&c_prev.values)?;
        let stiffness = self.stiffness(control)?;
        let dirichlet = self.mesh.dirichlet();
        let mut c = c_prev.values.clone();
        let mut residuals = Vec::new();
        for _ in 0..self.newton.max_iter {
            let f = self.residual_with(&c, &c_prev.values, &stiffness);
            let r = max_norm(&f);
            residuals.push(r);
            if !r.is_finite() {
                break;
            }
            if r <= self.newton.tol {
                return Ok((Field { values: c, time_index: c_prev.time_index + 1 }, StepReport { residuals }));
            }
            let mut j = self.jacobian(&c, &stiffness);
            let mut rhs: Vec<f64> = f.iter().map(|v| -v).collect();
            // prescribed increments are known: move their columns to the right-hand side
            for &(node, _) in dirichlet {
                let known = -f[node];
                for (a, v) in rhs.iter_mut().enumerate() {
                    *v -= j.get(a, node) * known;
                }
            }
            for &(node, _) in dirichlet {
                j.constrain(node);
                rhs[node] = -f[node];
            }
            let delta = self.solve(&j, &rhs)?;
            c.iter_mut().zip(&delta).for_each(|(ci, d)| *ci += d);
        }
        let f = self.residual_with(&c, &c_prev.values, &stiffness);
        let r = max_norm(&f);
        if r <= self.newton.tol {
            residuals.push(r);
            return Ok((Field { values: c, time_index: c_prev.time_index + 1 }, StepReport { residuals }));
        }
        Err(FemError::NewtonFailed { iterations: self.newton.max_iter, residual: r })
    }

    /// Advances `n` steps under a fixed control, returning every level
    /// including the initial one.
    pub fn run(&self, c0: &Field, control: &ControlMap, n: usize) -> Result<Vec<Field>, FemError> {
        let mut out = Vec::with_capacity(n + 1);
        out.push(c0.clone());
        for _ in 0..n {
            let next = self.step(out.last().unwrap(), control)?;
            out.push(next);
        }
        Ok(out)
    }

    pub fn incremental_potential(&self, c_next: &Field, c_prev: &Field, control: &ControlMap) -> Result<f64, FemError> {
        self.check_len(&c_next.values)?;
        self.check_len(&c_prev.values)?;
        let SimParams { beta, gamma, dt, .. } = self.params;
        let (c, cp) = (&c_next.values, &c_prev.values);
        let diff: Vec<f64> = c.iter().zip(cp).map(|(a, b)| a - b).collect();
        let inertia = self.mass.bilinear(&diff, &diff) / (2.0 * dt);
        let energy = 0.5 * self.stiffness(control)?.bilinear(c, c);
        let h = 0.5 * (beta - gamma) * self.mass.bilinear(c, c)
            - beta / 3.0 * assembly::cubic_integral(&self.mesh, &self.geometry, c);
        let load: f64 = self.flux_load.iter().zip(c).map(|(b, v)| b * v).sum();
        Ok(inertia + energy - h - load)
    }

    /// `‖c‖ = sqrt(cᵀ M c)`.
    pub fn norm_field(&self, c: &[f64]) -> f64 {
        self.mass.bilinear(c, c).max(0.0).sqrt()
    }

    /// `‖κ‖ = sqrt(Σ_r κ_r² |Ω_r|)`.
    pub fn norm_control(&self, control: &ControlMap) -> f64 {
        control.values().iter().zip(&self.region_areas).map(|(k, a)| k * k * a).sum::<f64>().sqrt()
    }
}

pub fn l2_norm_field(field: &Field, mesh: &Mesh) -> f64 {
    assemble_mass(mesh).bilinear(&field.values, &field.values).max(0.0).sqrt()
}

pub fn l2_norm_control(control: &ControlMap, mesh: &Mesh) -> f64 {
    control.values().iter().zip(mesh.region_areas()).map(|(k, a)| k * k * a).sum::<f64>().sqrt()
}

fn max_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| if x.is_nan() { f64::NAN } else { m.max(x.abs()) })
}

/// Rows `node_id,x,y,c`.
pub fn write_field_csv(mut out: impl Write, mesh: &Mesh, values: &[f64]) -> std::io::Result<()> {
    writeln!(out, "node_id,x,y,c")?;
    for (i, (p, c)) in mesh.nodes().iter().zip(values).enumerate() {
        writeln!(out, "{i},{},{},{c}", p[0], p[1])?;
    }
    Ok(())
}

/// Rows `region_id,kappa`.
pub fn write_control_csv(mut out: impl Write, control: &ControlMap) -> std::io::Result<()> {
    writeln!(out, "region_id,kappa")?;
    for (r, k) in control.values().iter().enumerate() {
        writeln!(out, "{r},{k}")?;
    }
    Ok(())
}
