//! Nonlinear finite elements on linear tetrahedra: assembly, quasi-static
//! Newton with load bisection, Newmark dynamics with staggered internal
//! variables, reactions and energies.

use std::sync::{Arc, Mutex};

use nalgebra::{Matrix3, SMatrix, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::constitutive::{
    deformation_gradient_from, project_stress_to_nodes, shape_gradients, CauchyStress, ConstitutiveError,
    DeformationGradient, InternalState, Material,
};
use crate::mesh_forge::TetMesh;
use crate::sparse::{pcg, BlockMatrix, BlockPattern, CholeskyPlan, LinearSolveError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FemError {
    #[error("element {0} inverted (J <= 0)")]
    InvertedElement(usize),
    #[error("material evaluation failed in element {tet}: {source}")]
    Constitutive { tet: usize, source: ConstitutiveError },
    #[error(transparent)]
    LinearSolve(#[from] LinearSolveError),
    #[error("Newton did not converge: residual {residual:.3e} after {iterations} iterations and {bisections} bisections")]
    DivergedSolve { residual: f64, iterations: usize, bisections: usize },
    #[error("invalid boundary condition: {0}")]
    InvalidBoundary(String),
    #[error("invalid solver configuration: {0}")]
    InvalidConfig(String),
    #[error("state does not match the mesh: {0}")]
    StateMismatch(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LinearSolverKind {
    /// Sparse Cholesky of the free block.
    #[default]
    Cholesky,
    /// Block-Jacobi preconditioned conjugate gradients.
    Pcg,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverConfig {
    pub linear_solver: LinearSolverKind,
    pub newton_rtol: f64,
    pub newton_atol: f64,
    pub newton_max_iter: usize,
    pub linear_rtol: f64,
    /// Defaults to ten times the number of unknowns.
    pub linear_max_iter: Option<usize>,
    pub gamma: f64,
    pub beta: f64,
    pub dt: f64,
    pub substeps: usize,
    pub max_bisections: usize,
    /// Step halvings allowed when a Newton update inverts an element.
    pub max_backtracks: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self::lattice()
    }
}

impl SolverConfig {
    /// Quasi-static lattice settings.
    pub fn lattice() -> Self {
        Self {
            linear_solver: LinearSolverKind::Cholesky,
            newton_rtol: 1e-3,
            newton_atol: 1e-10,
            newton_max_iter: 15,
            linear_rtol: 1e-8,
            linear_max_iter: None,
            gamma: 0.5,
            beta: 0.25,
            dt: 0.002,
            substeps: 5,
            max_bisections: 4,
            max_backtracks: 8,
        }
    }

    /// Dynamic visco-hyperelastic plate settings.
    pub fn plate() -> Self {
        Self { newton_rtol: 1e-8, newton_atol: 1e-8, newton_max_iter: 50, ..Self::lattice() }
    }

    pub fn validate(&self) -> Result<(), FemError> {
        let bad = |m: &str| Err(FemError::InvalidConfig(m.to_string()));
        if !(self.newton_rtol > 0.0 && self.newton_atol > 0.0 && self.linear_rtol > 0.0) {
            return bad("tolerances must be positive");
        }
        if self.newton_max_iter == 0 || self.linear_max_iter == Some(0) {
            return bad("iteration limits must be positive");
        }
        if !(0.0..=0.5).contains(&self.beta) || !(0.0..=1.0).contains(&self.gamma) {
            return bad("Newmark parameters need 0 <= beta <= 0.5 and 0 <= gamma <= 1");
        }
        if self.beta == 0.0 {
            return bad("beta = 0 is explicit; use an implicit scheme");
        }
        if !(self.dt > 0.0) || self.substeps == 0 {
            return bad("dt and substeps must be positive");
        }
        Ok(())
    }
}

/// Rigid grip motion: translation plus rotation about the x axis through the
/// grip-face centroid.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct GripMotion {
    pub translation: Vector3<f64>,
    pub angle: f64,
}

impl GripMotion {
    pub fn new(translation: Vector3<f64>, angle: f64) -> Self {
        Self { translation, angle }
    }

    pub fn lerp(&self, other: &GripMotion, s: f64) -> GripMotion {
        GripMotion {
            translation: self.translation + (other.translation - self.translation) * s,
            angle: self.angle + (other.angle - self.angle) * s,
        }
    }

    /// Displacement of a grip point with reference position `x`.
    pub fn displacement(&self, x: &Vector3<f64>, centroid: &Vector3<f64>) -> Vector3<f64> {
        let (s, c) = self.angle.sin_cos();
        let d = x - centroid;
        // written as R d - d so a zero motion gives exactly zero
        let turn = Vector3::new(0.0, (c - 1.0) * d.y - s * d.z, s * d.y + (c - 1.0) * d.z);
        self.translation + turn
    }
}

/// Clamped face, moving grip face, traction-free elsewhere.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundaryCondition {
    pub clamp: Vec<usize>,
    pub grip: Vec<usize>,
    /// Reference centroid of the grip nodes (rotation axis passes through it).
    pub centroid: Vector3<f64>,
    pub motion: GripMotion,
}

impl BoundaryCondition {
    pub fn new(mesh: &TetMesh, clamp: Vec<usize>, grip: Vec<usize>) -> Result<Self, FemError> {
        if clamp.is_empty() || grip.is_empty() {
            return Err(FemError::InvalidBoundary("clamp and grip sets must be non-empty".into()));
        }
        let mut marks = vec![0u8; mesh.nodes.len()];
        for &n in &clamp {
            *marks.get_mut(n).ok_or_else(|| FemError::InvalidBoundary(format!("node {n} out of range")))? |= 1;
        }
        for &n in &grip {
            let m = marks.get_mut(n).ok_or_else(|| FemError::InvalidBoundary(format!("node {n} out of range")))?;
            if *m & 1 != 0 {
                return Err(FemError::InvalidBoundary(format!("node {n} is both clamped and gripped")));
            }
            *m |= 2;
        }
        let centroid = grip.iter().map(|&n| mesh.nodes[n]).sum::<Vector3<f64>>() / grip.len() as f64;
        Ok(Self { clamp, grip, centroid, motion: GripMotion::default() })
    }

    /// Clamp at `x = x_min`, grip at `x = x_max`.
    pub fn plate(mesh: &TetMesh) -> Result<Self, FemError> {
        Self::new(mesh, mesh.clamp_nodes(), mesh.grip_nodes())
    }

    pub fn with_motion(&self, motion: GripMotion) -> Self {
        Self { motion, ..self.clone() }
    }

    pub fn dirichlet(&self, mesh: &TetMesh, motion: &GripMotion) -> Dirichlet {
        let mut nodes = self.clamp.clone();
        let mut values = vec![Vector3::zeros(); self.clamp.len()];
        for &n in &self.grip {
            nodes.push(n);
            values.push(motion.displacement(&mesh.nodes[n], &self.centroid));
        }
        Dirichlet { nodes, values }
    }
}

/// Prescribed displacements (all three components) on a node set.
#[derive(Debug, Clone, PartialEq)]
pub struct Dirichlet {
    pub nodes: Vec<usize>,
    pub values: Vec<Vector3<f64>>,
}

impl Dirichlet {
    pub fn fixed_mask(&self, n_nodes: usize) -> Vec<[bool; 3]> {
        let mut fixed = vec![[false; 3]; n_nodes];
        for &n in &self.nodes {
            fixed[n] = [true; 3];
        }
        fixed
    }

    /// Values at parameter `s` along the straight path from `u`.
    pub fn lerp_from(&self, u: &[Vector3<f64>], s: f64) -> Dirichlet {
        Dirichlet {
            nodes: self.nodes.clone(),
            values: self.nodes.iter().zip(&self.values).map(|(&n, v)| u[n] + (v - u[n]) * s).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimState {
    pub u: Vec<Vector3<f64>>,
    pub v: Vec<Vector3<f64>>,
    pub a: Vec<Vector3<f64>>,
    /// One entry per tet (single-point quadrature).
    pub internal: Vec<InternalState>,
    pub time: f64,
    /// Grip motion the state satisfies.
    pub motion: GripMotion,
    pub cumulative_action: [f64; 4],
}

impl SimState {
    /// Stress-free rest state with `A = I` in every branch.
    pub fn rest(mesh: &TetMesh, material: &Material) -> Self {
        let n = mesh.nodes.len();
        Self {
            u: vec![Vector3::zeros(); n],
            v: vec![Vector3::zeros(); n],
            a: vec![Vector3::zeros(); n],
            internal: vec![material.rest_state(); mesh.tets.len()],
            time: 0.0,
            motion: GripMotion::default(),
            cumulative_action: [0.0; 4],
        }
    }
}

/// Mesh plus everything precomputed for assembly.
#[derive(Debug, Clone)]
pub struct FemModel {
    pub mesh: Arc<TetMesh>,
    grads: Vec<[Vector3<f64>; 4]>,
    volumes: Vec<f64>,
    pattern: BlockPattern,
    slots: Vec<[usize; 16]>,
    /// Lumped nodal volume (sum of V/4 over adjacent tets).
    nodal_volume: Vec<f64>,
    cholesky: Arc<Mutex<Option<Arc<CholeskyPlan>>>>,
}

impl FemModel {
    pub fn new(mesh: Arc<TetMesh>) -> Result<Self, FemError> {
        let mut grads = Vec::with_capacity(mesh.tets.len());
        let mut volumes = Vec::with_capacity(mesh.tets.len());
        let mut nodal_volume = vec![0.0; mesh.nodes.len()];
        for (t, q) in mesh.tets.iter().enumerate() {
            grads.push(shape_gradients(&mesh, t).map_err(|source| FemError::Constitutive { tet: t, source })?);
            let v = mesh.tet_volume(t);
            volumes.push(v);
            for &n in q {
                nodal_volume[n] += 0.25 * v;
            }
        }
        let pattern = BlockPattern::from_elements(mesh.nodes.len(), &mesh.tets);
        let slots = mesh
            .tets
            .iter()
            .map(|q| {
                let mut s = [0; 16];
                for a in 0..4 {
                    for b in 0..4 {
                        s[4 * a + b] = pattern.slot(q[a], q[b]).expect("element pair in pattern");
                    }
                }
                s
            })
            .collect();
        Ok(Self { mesh, grads, volumes, pattern, slots, nodal_volume, cholesky: Arc::default() })
    }

    pub fn n_nodes(&self) -> usize {
        self.mesh.nodes.len()
    }

    pub fn pattern(&self) -> &BlockPattern {
        &self.pattern
    }

    pub fn element_volume(&self, t: usize) -> f64 {
        self.volumes[t]
    }

    /// Row-sum lumped nodal mass.
    pub fn lumped_mass(&self, density: f64) -> Vec<f64> {
        self.nodal_volume.iter().map(|v| v * density).collect()
    }

    pub fn deformation_gradient(&self, u: &[Vector3<f64>], t: usize) -> DeformationGradient {
        let q = self.mesh.tets[t];
        deformation_gradient_from(&self.grads[t], [&u[q[0]], &u[q[1]], &u[q[2]], &u[q[3]]])
    }

    /// Cached symbolic factorization for a set of fixed components.
    fn cholesky_plan(&self, fixed: &[[bool; 3]]) -> Result<Arc<CholeskyPlan>, FemError> {
        let mut cache = self.cholesky.lock().unwrap_or_else(|p| p.into_inner());
        if let Some(plan) = cache.as_ref().filter(|p| p.matches(fixed)) {
            return Ok(plan.clone());
        }
        let plan = Arc::new(CholeskyPlan::new(&self.pattern, fixed)?);
        *cache = Some(plan.clone());
        Ok(plan)
    }

    fn check_state(&self, state: &SimState) -> Result<(), FemError> {
        let n = self.n_nodes();
        if state.u.len() != n || state.v.len() != n || state.a.len() != n {
            return Err(FemError::StateMismatch(format!("expected {n} nodal values")));
        }
        if state.internal.len() != self.mesh.tets.len() {
            return Err(FemError::StateMismatch(format!("expected {} element states", self.mesh.tets.len())));
        }
        Ok(())
    }
}

/// Internal force vector and (optionally) the consistent tangent.
#[derive(Debug, Clone)]
pub struct Assembly {
    pub force: Vec<Vector3<f64>>,
    pub tangent: Option<BlockMatrix>,
}

fn material_error(tet: usize, e: ConstitutiveError) -> FemError {
    match e {
        ConstitutiveError::NonPositiveJacobian(_) => FemError::InvertedElement(tet),
        source => FemError::Constitutive { tet, source },
    }
}

/// Internal forces `f_a = V P grad N_a` and the tangent, element by element in
/// index order.
pub fn assemble(
    model: &FemModel,
    material: &Material,
    u: &[Vector3<f64>],
    internal: &[InternalState],
    with_tangent: bool,
) -> Result<Assembly, FemError> {
    let mut force = vec![Vector3::zeros(); model.n_nodes()];
    let mut tangent = with_tangent.then(|| BlockMatrix::zeros(&model.pattern));
    for (t, q) in model.mesh.tets.iter().enumerate() {
        let g = &model.grads[t];
        let vol = model.volumes[t];
        let f = model.deformation_gradient(u, t);
        if let Some(k) = tangent.as_mut() {
            let (p, d) = material.piola_and_tangent(&f, &internal[t]).map_err(|e| material_error(t, e))?;
            for a in 0..4 {
                force[q[a]] += vol * (p * g[a]);
            }
            let d = (d + d.transpose()) * 0.5;
            // h[b] holds D contracted with grad N_b on the last index
            let h: [SMatrix<f64, 9, 3>; 4] = std::array::from_fn(|b| {
                SMatrix::<f64, 9, 3>::from_fn(|r, kk| (0..3).map(|l| d[(r, 3 * kk + l)] * g[b][l]).sum())
            });
            let slots = &model.slots[t];
            for a in 0..4 {
                for b in 0..4 {
                    let block = Matrix3::from_fn(|i, kk| vol * (0..3).map(|j| g[a][j] * h[b][(3 * i + j, kk)]).sum::<f64>());
                    k.blocks[slots[4 * a + b]] += block;
                }
            }
        } else {
            let p = material.piola(&f, &internal[t]).map_err(|e| material_error(t, e))?;
            for a in 0..4 {
                force[q[a]] += vol * (p * g[a]);
            }
        }
    }
    Ok(Assembly { force, tangent })
}

/// Total stored energy `sum V Psi(F)`.
pub fn strain_energy(model: &FemModel, material: &Material, state: &SimState) -> Result<f64, FemError> {
    let mut e = 0.0;
    for t in 0..model.mesh.tets.len() {
        let f = model.deformation_gradient(&state.u, t);
        e += model.volumes[t] * material.energy(&f, &state.internal[t]).map_err(|err| material_error(t, err))?;
    }
    Ok(e)
}

pub fn kinetic_energy(model: &FemModel, density: f64, v: &[Vector3<f64>]) -> f64 {
    model.nodal_volume.iter().zip(v).map(|(m, vi)| 0.5 * density * m * vi.norm_squared()).sum()
}

pub fn element_stresses(model: &FemModel, material: &Material, state: &SimState) -> Result<Vec<CauchyStress>, FemError> {
    (0..model.mesh.tets.len())
        .map(|t| {
            let f = model.deformation_gradient(&state.u, t);
            material.cauchy(&f, &state.internal[t]).map_err(|e| material_error(t, e))
        })
        .collect()
}

/// Volume-averaged nodal Cauchy stress.
pub fn nodal_stresses(model: &FemModel, material: &Material, state: &SimState) -> Result<Vec<CauchyStress>, FemError> {
    let el = element_stresses(model, material, state)?;
    project_stress_to_nodes(&model.mesh, &el).map_err(|source| FemError::Constitutive { tet: 0, source })
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct SolveStats {
    pub newton_iterations: usize,
    pub linear_iterations: usize,
    pub bisections: usize,
    pub final_residual: f64,
}

impl SolveStats {
    fn absorb(&mut self, other: &SolveStats) {
        self.newton_iterations += other.newton_iterations;
        self.linear_iterations += other.linear_iterations;
        self.bisections += other.bisections;
        self.final_residual = other.final_residual;
    }
}

/// Inertia added to the static residual inside a Newmark substep:
/// `M (u - u_pred) / (beta dt^2)`.
struct Inertia<'a> {
    mass: &'a [f64],
    predictor: &'a [Vector3<f64>],
    coef: f64,
}

struct Newton<'a> {
    model: &'a FemModel,
    material: &'a Material,
    internal: &'a [InternalState],
    inertia: Option<Inertia<'a>>,
    cfg: &'a SolverConfig,
}

fn free_norm(r: &[Vector3<f64>], fixed: &[[bool; 3]]) -> f64 {
    r.iter()
        .zip(fixed)
        .map(|(v, f)| (0..3).filter(|&c| !f[c]).map(|c| v[c] * v[c]).sum::<f64>())
        .sum::<f64>()
        .sqrt()
}

impl<'a> Newton<'a> {
    fn residual_and_tangent(&self, u: &[Vector3<f64>]) -> Result<(Vec<Vector3<f64>>, BlockMatrix), FemError> {
        let Assembly { mut force, tangent } = assemble(self.model, self.material, u, self.internal, true)?;
        let mut k = tangent.expect("tangent requested");
        if let Some(inertia) = &self.inertia {
            for (i, r) in force.iter_mut().enumerate() {
                *r += inertia.coef * inertia.mass[i] * (u[i] - inertia.predictor[i]);
                k.blocks[self.model.pattern.diagonal_slot(i)] += Matrix3::identity() * (inertia.coef * inertia.mass[i]);
            }
        }
        Ok((force, k))
    }

    /// Drives `u` to equilibrium with the Dirichlet data in `target`. The
    /// prescribed increment enters through the first linear solves (lifting),
    /// so the boundary never jumps ahead of the interior.
    fn solve(&self, u: &mut Vec<Vector3<f64>>, target: &Dirichlet) -> Result<SolveStats, FemError> {
        let model = self.model;
        let n = model.n_nodes();
        let fixed = target.fixed_mask(n);
        let max_linear = self.cfg.linear_max_iter.unwrap_or(10 * 3 * n);
        let mut pending = vec![Vector3::zeros(); n];
        for (&node, v) in target.nodes.iter().zip(&target.values) {
            pending[node] = v - u[node];
        }
        let mut stats = SolveStats::default();
        let (mut r, mut k) = self.residual_and_tangent(u)?;
        let mut kd = vec![Vector3::zeros(); n];
        k.mul_vec(&model.pattern, &pending, &mut kd);
        let r0 = free_norm(&r, &fixed);
        let reference = r0.max(free_norm(&kd, &fixed));
        let tol = (self.cfg.newton_rtol * reference).max(self.cfg.newton_atol);
        let has_pending = |p: &[Vector3<f64>]| p.iter().any(|v| v.norm_squared() > 0.0);
        stats.final_residual = r0;
        if !has_pending(&pending) && r0 <= self.cfg.newton_atol {
            return Ok(stats);
        }
        let plan = match self.cfg.linear_solver {
            LinearSolverKind::Cholesky => Some(model.cholesky_plan(&fixed)?),
            LinearSolverKind::Pcg => None,
        };
        for _ in 0..self.cfg.newton_max_iter {
            let rhs: Vec<Vector3<f64>> = r.iter().zip(&kd).map(|(ri, ki)| -(ri + ki)).collect();
            let mut du = match &plan {
                Some(plan) => {
                    stats.linear_iterations += 1;
                    plan.solve(&k, &rhs)?
                }
                None => {
                    let (du, lin) = pcg(&k, &model.pattern, &rhs, &fixed, self.cfg.linear_rtol, max_linear)?;
                    stats.linear_iterations += lin.iterations;
                    du
                }
            };
            stats.newton_iterations += 1;
            for (d, p) in du.iter_mut().zip(&pending) {
                *d += p;
            }
            let mut alpha = 1.0;
            let mut backtracks = 0;
            let (trial, r_new, k_new) = loop {
                let trial: Vec<Vector3<f64>> = u.iter().zip(&du).map(|(x, d)| x + d * alpha).collect();
                match self.residual_and_tangent(&trial) {
                    Ok((r_new, k_new)) => break (trial, r_new, k_new),
                    Err(FemError::InvertedElement(t)) => {
                        backtracks += 1;
                        if backtracks > self.cfg.max_backtracks {
                            return Err(FemError::InvertedElement(t));
                        }
                        alpha *= 0.5;
                    }
                    Err(e) => return Err(e),
                }
            };
            *u = trial;
            r = r_new;
            k = k_new;
            for p in pending.iter_mut() {
                *p *= 1.0 - alpha;
            }
            if alpha == 1.0 {
                pending.iter_mut().for_each(|p| *p = Vector3::zeros());
            }
            let norm = free_norm(&r, &fixed);
            stats.final_residual = norm;
            if !norm.is_finite() {
                break;
            }
            if has_pending(&pending) {
                k.mul_vec(&model.pattern, &pending, &mut kd);
            } else {
                kd.iter_mut().for_each(|x| *x = Vector3::zeros());
                if norm <= tol {
                    return Ok(stats);
                }
            }
        }
        Err(FemError::DivergedSolve {
            residual: stats.final_residual,
            iterations: stats.newton_iterations,
            bisections: 0,
        })
    }
}

fn recoverable(e: &FemError) -> bool {
    matches!(e, FemError::DivergedSolve { .. } | FemError::InvertedElement(_) | FemError::LinearSolve(_))
}

/// Quasi-static solve along `path(s)`, `s` in `[0, 1]`, starting from a state
/// that satisfies `path(0)`. Failed increments are halved up to
/// `cfg.max_bisections` levels deep.
pub fn solve_static_path(
    model: &FemModel,
    material: &Material,
    state: &SimState,
    path: &dyn Fn(f64) -> Dirichlet,
    cfg: &SolverConfig,
) -> Result<(Vec<Vector3<f64>>, SolveStats), FemError> {
    cfg.validate()?;
    model.check_state(state)?;
    let newton = Newton { model, material, internal: &state.internal, inertia: None, cfg };
    let mut stats = SolveStats::default();
    let mut u = state.u.clone();
    let mut deepest = 0;
    segment(&newton, &mut u, path, 0.0, 1.0, 0, &mut stats, &mut deepest).map_err(|e| match e {
        FemError::DivergedSolve { residual, iterations, .. } => {
            FemError::DivergedSolve { residual, iterations, bisections: stats.bisections }
        }
        other if recoverable(&other) => FemError::DivergedSolve {
            residual: stats.final_residual,
            iterations: stats.newton_iterations,
            bisections: stats.bisections,
        },
        other => other,
    })?;
    Ok((u, stats))
}

#[allow(clippy::too_many_arguments)]
fn segment(
    newton: &Newton,
    u: &mut Vec<Vector3<f64>>,
    path: &dyn Fn(f64) -> Dirichlet,
    s0: f64,
    s1: f64,
    depth: usize,
    stats: &mut SolveStats,
    deepest: &mut usize,
) -> Result<(), FemError> {
    let mut trial = u.clone();
    match newton.solve(&mut trial, &path(s1)) {
        Ok(s) => {
            stats.absorb(&s);
            *u = trial;
            Ok(())
        }
        Err(e) if recoverable(&e) && depth < newton.cfg.max_bisections => {
            log::debug!("bisecting load increment [{s0}, {s1}] after: {e}");
            stats.bisections += 1;
            *deepest = (*deepest).max(depth + 1);
            let mid = 0.5 * (s0 + s1);
            segment(newton, u, path, s0, mid, depth + 1, stats, deepest)?;
            segment(newton, u, path, mid, s1, depth + 1, stats, deepest)
        }
        Err(e) => Err(e),
    }
}

/// Quasi-static solve from the state's grip motion to `bc.motion`.
pub fn solve_quasistatic_step(
    model: &FemModel,
    material: &Material,
    state: &SimState,
    bc: &BoundaryCondition,
    cfg: &SolverConfig,
) -> Result<(SimState, SolveStats), FemError> {
    let start = state.motion;
    let path = |s: f64| bc.dirichlet(&model.mesh, &start.lerp(&bc.motion, s));
    let (u, stats) = solve_static_path(model, material, state, &path, cfg)?;
    let mut next = state.clone();
    next.u = u;
    next.motion = bc.motion;
    Ok((next, stats))
}

/// Quasi-static solve to fixed Dirichlet data, reached along a straight path
/// from the current displacement.
pub fn solve_static(
    model: &FemModel,
    material: &Material,
    state: &SimState,
    target: &Dirichlet,
    cfg: &SolverConfig,
) -> Result<(SimState, SolveStats), FemError> {
    let path = |s: f64| target.lerp_from(&state.u, s);
    let (u, stats) = solve_static_path(model, material, state, &path, cfg)?;
    let mut next = state.clone();
    next.u = u;
    Ok((next, stats))
}

/// Advances `cfg.substeps` Newmark substeps of `cfg.dt`, moving the grip
/// linearly from the state's motion to `bc.motion`. Internal variables are
/// updated after each converged substep.
pub fn solve_dynamic_step(
    model: &FemModel,
    material: &Material,
    state: &SimState,
    bc: &BoundaryCondition,
    cfg: &SolverConfig,
) -> Result<(SimState, SolveStats), FemError> {
    cfg.validate()?;
    model.check_state(state)?;
    let density = material.density();
    if !(density > 0.0) {
        return Err(FemError::InvalidConfig("dynamics needs a material with positive density".into()));
    }
    let mass = model.lumped_mass(density);
    let (dt, beta, gamma) = (cfg.dt, cfg.beta, cfg.gamma);
    let start = state.motion;
    let mut cur = state.clone();
    let mut stats = SolveStats::default();
    for k in 1..=cfg.substeps {
        let motion = start.lerp(&bc.motion, k as f64 / cfg.substeps as f64);
        let target = bc.dirichlet(&model.mesh, &motion);
        let predictor: Vec<Vector3<f64>> = (0..model.n_nodes())
            .map(|i| cur.u[i] + cur.v[i] * dt + cur.a[i] * (dt * dt * (0.5 - beta)))
            .collect();
        let coef = 1.0 / (beta * dt * dt);
        let newton = Newton {
            model,
            material,
            internal: &cur.internal,
            inertia: Some(Inertia { mass: &mass, predictor: &predictor, coef }),
            cfg,
        };
        let mut u = cur.u.clone();
        let s = newton.solve(&mut u, &target).map_err(|e| match e {
            FemError::DivergedSolve { residual, iterations, .. } => {
                FemError::DivergedSolve { residual, iterations, bisections: 0 }
            }
            other => other,
        })?;
        stats.absorb(&s);
        for i in 0..model.n_nodes() {
            let a_new = (u[i] - predictor[i]) * coef;
            cur.v[i] += (cur.a[i] * (1.0 - gamma) + a_new * gamma) * dt;
            cur.a[i] = a_new;
        }
        // Prescribed nodes follow the piecewise-linear grip path; the Newmark
        // recursion would leave them with an undamped sign-flipping velocity.
        for &n in &target.nodes {
            cur.v[n] = (u[n] - cur.u[n]) / dt;
            cur.a[n] = Vector3::zeros();
        }
        cur.u = u;
        for t in 0..model.mesh.tets.len() {
            let cbar = model.deformation_gradient(&cur.u, t).distortional_cauchy_green();
            cur.internal[t] = material.evolve_internal(&cur.internal[t], &cbar, dt);
        }
        cur.time += dt;
        cur.motion = motion;
    }
    cur.motion = bc.motion;
    Ok((cur, stats))
}

/// Resultant force and torque about the x axis through the deformed face
/// centroid.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Reaction {
    pub force: Vector3<f64>,
    pub torque: f64,
}

/// Sum of nodal internal (plus inertial, when `density > 0`) forces over
/// `nodes`: the load the supports apply to the body there.
pub fn reaction_on(
    model: &FemModel,
    material: &Material,
    state: &SimState,
    nodes: &[usize],
    density: f64,
) -> Result<Reaction, FemError> {
    let f = assemble(model, material, &state.u, &state.internal, false)?.force;
    let mass = model.lumped_mass(density);
    let x: Vec<Vector3<f64>> = nodes.iter().map(|&n| model.mesh.nodes[n] + state.u[n]).collect();
    let centroid = x.iter().sum::<Vector3<f64>>() / nodes.len().max(1) as f64;
    let mut r = Reaction::default();
    for (&n, xn) in nodes.iter().zip(&x) {
        let fn_ = f[n] + state.a[n] * mass[n];
        r.force += fn_;
        let arm = xn - centroid;
        r.torque += arm.y * fn_.z - arm.z * fn_.y;
    }
    Ok(r)
}

/// Grip-face reaction; inertia is included for materials with density.
pub fn reaction_force(
    model: &FemModel,
    material: &Material,
    state: &SimState,
    bc: &BoundaryCondition,
) -> Result<Reaction, FemError> {
    reaction_on(model, material, state, &bc.grip, material.density())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::constitutive::{NeoHookean, ViscoMaterial};
    use crate::mesh_forge::block_mesh;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cube(n: usize) -> Arc<TetMesh> {
        Arc::new(block_mesh(Vector3::repeat(1.0), [n, n, n]))
    }

    fn neo() -> Material {
        Material::NeoHookean(NeoHookean::default())
    }

    fn boundary_nodes(mesh: &TetMesh) -> Vec<usize> {
        let mut on = vec![false; mesh.nodes.len()];
        for f in &mesh.boundary_faces {
            for &n in f {
                on[n] = true;
            }
        }
        (0..mesh.nodes.len()).filter(|&n| on[n]).collect()
    }

    #[test]
    fn rest_state_has_zero_residual() {
        let model = FemModel::new(cube(2)).unwrap();
        for m in [neo(), Material::Visco(ViscoMaterial::reference())] {
            let s = SimState::rest(&model.mesh, &m);
            let a = assemble(&model, &m, &s.u, &s.internal, true).unwrap();
            assert!(a.force.iter().all(|f| f.norm() < 1e-12));
            assert!(a.tangent.unwrap().asymmetry(&model.pattern) < 1e-9);
        }
    }

    #[test]
    fn tangent_matches_residual_differences() {
        let model = FemModel::new(cube(2)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for m in [neo(), Material::Visco(ViscoMaterial::reference())] {
            for _ in 0..20 {
                let mut s = SimState::rest(&model.mesh, &m);
                for u in s.u.iter_mut() {
                    *u = Vector3::from_fn(|_, _| rng.random_range(-0.05..0.05));
                }
                let dir: Vec<Vector3<f64>> = (0..model.n_nodes())
                    .map(|_| Vector3::from_fn(|_, _| rng.random_range(-1.0..1.0)))
                    .collect();
                let norm = dir.iter().map(|d| d.norm_squared()).sum::<f64>().sqrt();
                let h = 1e-6 / norm;
                let k = assemble(&model, &m, &s.u, &s.internal, true).unwrap().tangent.unwrap();
                let mut kd = vec![Vector3::zeros(); model.n_nodes()];
                k.mul_vec(&model.pattern, &dir, &mut kd);
                let shifted = |sign: f64| -> Vec<Vector3<f64>> {
                    let u: Vec<_> = s.u.iter().zip(&dir).map(|(u, d)| u + d * (sign * h)).collect();
                    assemble(&model, &m, &u, &s.internal, false).unwrap().force
                };
                let (fp, fm) = (shifted(1.0), shifted(-1.0));
                let mut err = 0.0;
                let mut size = 0.0;
                for i in 0..model.n_nodes() {
                    let fd = (fp[i] - fm[i]) / (2.0 * h);
                    err += (fd - kd[i]).norm_squared();
                    size += kd[i].norm_squared();
                }
                assert!(err.sqrt() <= 1e-4 * size.sqrt(), "{} vs {}", err.sqrt(), size.sqrt());
                s.u.clear();
            }
        }
    }

    fn affine(mesh: &TetMesh, g: &Matrix3<f64>) -> Dirichlet {
        let nodes = boundary_nodes(mesh);
        let values = nodes.iter().map(|&n| g * mesh.nodes[n]).collect();
        Dirichlet { nodes, values }
    }

    #[test]
    fn patch_test_reproduces_affine_field() {
        let model = FemModel::new(cube(3)).unwrap();
        let m = neo();
        let g = Matrix3::new(0.10, 0.05, -0.02, 0.00, -0.04, 0.03, 0.02, 0.01, 0.06);
        let rest = SimState::rest(&model.mesh, &m);
        let cfg = SolverConfig { newton_rtol: 1e-10, newton_atol: 1e-12, ..SolverConfig::lattice() };
        let (s, stats) = solve_static(&model, &m, &rest, &affine(&model.mesh, &g), &cfg).unwrap();
        assert!(stats.newton_iterations <= 8);
        for t in 0..model.mesh.tets.len() {
            let f = model.deformation_gradient(&s.u, t);
            assert!((f.0 - Matrix3::identity() - g).amax() < 1e-9);
        }
    }

    #[test]
    fn newton_converges_quadratically() {
        let model = FemModel::new(cube(3)).unwrap();
        let m = neo();
        let g = Matrix3::new(0.2, 0.0, 0.0, 0.1, -0.05, 0.0, 0.0, 0.0, 0.1);
        let target = affine(&model.mesh, &g);
        let rest = SimState::rest(&model.mesh, &m);
        let cfg = SolverConfig { newton_rtol: 1e-14, newton_atol: 1e-13, ..SolverConfig::lattice() };
        let newton = Newton { model: &model, material: &m, internal: &rest.internal, inertia: None, cfg: &cfg };
        // after one lifted step the boundary is in place; record the free
        // residual history from there
        let mut history = Vec::new();
        let mut u = rest.u.clone();
        let one = SolverConfig { newton_max_iter: 1, ..cfg };
        let first = Newton { cfg: &one, ..newton };
        let _ = first.solve(&mut u, &target);
        let fixed = target.fixed_mask(model.n_nodes());
        for _ in 0..4 {
            let r = assemble(&model, &m, &u, &rest.internal, false).unwrap().force;
            history.push(free_norm(&r, &fixed));
            let _ = first.solve(&mut u, &target);
        }
        for w in history.windows(2) {
            if w[0] > 1e-10 && w[1] > 1e-13 {
                assert!(w[1] / (w[0] * w[0]) < 100.0, "{history:?}");
            }
        }
        assert!(history.last().unwrap() < &1e-10, "{history:?}");
    }

    #[test]
    fn zero_increment_from_equilibrium_is_a_no_op() {
        let model = FemModel::new(cube(2)).unwrap();
        let m = neo();
        let rest = SimState::rest(&model.mesh, &m);
        let bc = BoundaryCondition::plate(&model.mesh).unwrap();
        let (s, stats) = solve_quasistatic_step(&model, &m, &rest, &bc, &SolverConfig::lattice()).unwrap();
        assert_eq!(s, rest);
        assert!(stats.newton_iterations <= 1);
    }

    #[test]
    fn rigid_translation_of_boundary_data() {
        let model = FemModel::new(Arc::new(block_mesh(Vector3::new(2.0, 1.0, 1.0), [4, 2, 2]))).unwrap();
        let m = neo();
        let rest = SimState::rest(&model.mesh, &m);
        let bc = BoundaryCondition::plate(&model.mesh).unwrap();
        let cfg = SolverConfig { newton_rtol: 1e-12, newton_atol: 1e-12, ..SolverConfig::lattice() };
        let base = bc.dirichlet(&model.mesh, &GripMotion::new(Vector3::new(0.2, 0.05, 0.0), 0.1));
        let shift = Vector3::new(0.3, -0.7, 1.1);
        let moved = Dirichlet { nodes: base.nodes.clone(), values: base.values.iter().map(|v| v + shift).collect() };
        let (a, _) = solve_static(&model, &m, &rest, &base, &cfg).unwrap();
        let (b, _) = solve_static(&model, &m, &rest, &moved, &cfg).unwrap();
        for (ua, ub) in a.u.iter().zip(&b.u) {
            assert!((ub - ua - shift).norm() < 1e-9);
        }
        let sa = element_stresses(&model, &m, &a).unwrap();
        let sb = element_stresses(&model, &m, &b).unwrap();
        for (x, y) in sa.iter().zip(&sb) {
            assert!(x.0.iter().zip(&y.0).all(|(p, q)| (p - q).abs() < 1e-8));
        }
    }

    #[test]
    fn reactions_balance_in_statics() {
        let model = FemModel::new(Arc::new(block_mesh(Vector3::new(2.0, 1.0, 1.0), [4, 2, 2]))).unwrap();
        let m = neo();
        let rest = SimState::rest(&model.mesh, &m);
        let bc = BoundaryCondition::plate(&model.mesh)
            .unwrap()
            .with_motion(GripMotion::new(Vector3::new(0.3, 0.1, -0.05), 0.2));
        let cfg = SolverConfig { newton_rtol: 1e-12, newton_atol: 1e-13, ..SolverConfig::lattice() };
        let (s, _) = solve_quasistatic_step(&model, &m, &rest, &bc, &cfg).unwrap();
        let grip = reaction_force(&model, &m, &s, &bc).unwrap();
        let clamp = reaction_on(&model, &m, &s, &bc.clamp, 0.0).unwrap();
        assert!((grip.force + clamp.force).norm() <= 1e-8 * grip.force.norm());
        assert!(grip.force.x > 0.0);
        let f = assemble(&model, &m, &s.u, &s.internal, false).unwrap().force;
        let total: Vector3<f64> = f.iter().sum();
        assert!(total.norm() < 1e-10);
        assert_eq!(reaction_force(&model, &m, &rest, &bc).unwrap(), Reaction::default());
    }

    #[test]
    fn small_strain_reaction_is_linear() {
        let model = FemModel::new(Arc::new(block_mesh(Vector3::new(2.0, 1.0, 1.0), [4, 2, 2]))).unwrap();
        let m = neo();
        let rest = SimState::rest(&model.mesh, &m);
        let bc = BoundaryCondition::plate(&model.mesh).unwrap();
        let cfg = SolverConfig { newton_rtol: 1e-12, newton_atol: 1e-14, ..SolverConfig::lattice() };
        let fx = |d: f64| {
            let bc = bc.with_motion(GripMotion::new(Vector3::new(d, 0.0, 0.0), 0.0));
            let (s, _) = solve_quasistatic_step(&model, &m, &rest, &bc, &cfg).unwrap();
            reaction_force(&model, &m, &s, &bc).unwrap().force.x
        };
        let k = fx(1e-7) / 1e-7;
        for d in [2e-4, 5e-4, 1e-3] {
            assert!((fx(d) / (k * d) - 1.0).abs() < 0.01);
        }
    }

    #[test]
    fn zero_motion_dynamics_stay_at_rest() {
        let model = FemModel::new(cube(2)).unwrap();
        let m = Material::Visco(ViscoMaterial::reference());
        let rest = SimState::rest(&model.mesh, &m);
        let bc = BoundaryCondition::plate(&model.mesh).unwrap();
        let (s, _) = solve_dynamic_step(&model, &m, &rest, &bc, &SolverConfig::plate()).unwrap();
        assert_eq!(s.u, rest.u);
        assert_eq!(s.v, rest.v);
        assert_eq!(s.a, rest.a);
        assert_eq!(s.internal, rest.internal);
        assert!((s.time - 0.01).abs() < 1e-15);
    }

    #[test]
    fn large_increment_is_bisected_or_reported() {
        let model = FemModel::new(Arc::new(block_mesh(Vector3::new(2.0, 1.0, 1.0), [4, 2, 2]))).unwrap();
        let m = neo();
        let rest = SimState::rest(&model.mesh, &m);
        let bc = BoundaryCondition::plate(&model.mesh).unwrap();
        let cfg = SolverConfig { newton_max_iter: 4, ..SolverConfig::lattice() };
        let big = bc.with_motion(GripMotion::new(Vector3::new(1.5, 0.0, 0.0), 0.0));
        match solve_quasistatic_step(&model, &m, &rest, &big, &cfg) {
            Ok((s, stats)) => {
                assert!(stats.bisections > 0);
                assert!(s.u.iter().all(|u| u.iter().all(|c| c.is_finite())));
            }
            Err(e) => assert!(matches!(e, FemError::DivergedSolve { .. }), "{e}"),
        }
        let crush = bc.with_motion(GripMotion::new(Vector3::new(-2.5, 0.0, 0.0), 0.0));
        assert!(matches!(
            solve_quasistatic_step(&model, &m, &rest, &crush, &cfg),
            Err(FemError::DivergedSolve { .. })
        ));
    }

    #[test]
    fn boundary_validation() {
        let mesh = cube(1);
        assert!(BoundaryCondition::new(&mesh, vec![], vec![1]).is_err());
        assert!(BoundaryCondition::new(&mesh, vec![0, 1], vec![1]).is_err());
        assert!(BoundaryCondition::plate(&mesh).is_ok());
        let bad = SolverConfig { beta: 0.7, ..SolverConfig::plate() };
        assert!(bad.validate().is_err());
        let json = serde_json::to_string(&SolverConfig::plate()).unwrap();
        assert_eq!(serde_json::from_str::<SolverConfig>(&json).unwrap(), SolverConfig::plate());
    }

    #[test]
    fn twist_motion_is_a_rotation_about_the_centroid_axis() {
        let m = GripMotion::new(Vector3::new(0.1, 0.0, 0.0), std::f64::consts::FRAC_PI_2);
        let c = Vector3::new(5.0, 1.0, 1.0);
        let x = Vector3::new(5.0, 2.0, 1.0);
        let d = m.displacement(&x, &c);
        assert!((x + d - Vector3::new(5.1, 1.0, 2.0)).norm() < 1e-12);
        assert!((m.displacement(&c, &c) - Vector3::new(0.1, 0.0, 0.0)).norm() < 1e-12);
    }
}
