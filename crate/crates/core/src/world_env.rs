//! Stepped loading environment: sessions that take 4-DOF grip actions,
//! advance the finite element model, and record frames with fields,
//! reactions and per-axis work. Also action generators, rollouts, datasets
//! and the binary trajectory format.

use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;
use std::sync::{Arc, Mutex, RwLock};

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::constitutive::{von_mises, Material};
use crate::fem_solver::{
    nodal_stresses, reaction_force, solve_dynamic_step, solve_quasistatic_step, BoundaryCondition, FemError,
    FemModel, GripMotion, Reaction, SimState, SolverConfig,
};
use crate::lattice_graph::LatticeGraph;
use crate::mesh_forge::{build_plate_mesh, percolation_check, MeshConfig, MeshError, TetMesh};

/// Grip motion per unit of cumulative action, in action order
/// (stretch, twist, shear_y, shear_z). Twist is in radians.
pub const ACTION_SCALE: [f64; 4] = [0.15, 0.08, 0.15, 0.15];
pub const AXIS_NAMES: [&str; 4] = ["stretch", "twist", "shear_y", "shear_z"];

pub const TRAJECTORY_MAGIC: &[u8; 4] = b"LEIT";
pub const TRAJECTORY_VERSION: u32 = 1;
pub const FIELD_DISPLACEMENT: u32 = 1;
pub const FIELD_STRESS: u32 = 2;
pub const FIELD_VON_MISES: u32 = 4;

#[derive(Debug, Error)]
pub enum EnvError {
    #[error(transparent)]
    Mesh(#[from] MeshError),
    #[error(transparent)]
    Fem(#[from] FemError),
    #[error("material does not fit the regime: {0}")]
    RegimeMismatch(String),
    #[error("invalid action: {0}")]
    InvalidAction(String),
    #[error("step {step} failed; session kept at frame {last_good}: {source}")]
    Diverged { step: usize, last_good: usize, source: FemError },
    #[error("a step is already in flight")]
    Busy,
    #[error("invalid action sequence request: {0}")]
    InvalidSequence(String),
    #[error("trajectories differ in length ({reference} vs {test})")]
    LengthMismatch { reference: usize, test: usize },
    #[error("trajectories follow different actions from frame {0}")]
    ActionMismatch(usize),
    #[error("reference trajectory does no work")]
    ZeroWork,
    #[error("trajectory format: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    Quasistatic,
    Dynamic,
}

/// Increment of (stretch, twist, shear_y, shear_z).
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Action(pub [f64; 4]);

impl Action {
    pub const ZERO: Action = Action([0.0; 4]);

    pub fn validate(&self) -> Result<(), EnvError> {
        if self.0.iter().all(|c| c.is_finite()) {
            Ok(())
        } else {
            Err(EnvError::InvalidAction(format!("non-finite component in {:?}", self.0)))
        }
    }

    /// Every component is -1, 0 or +1.
    pub fn is_discrete(&self) -> bool {
        self.0.iter().all(|&c| c == -1.0 || c == 0.0 || c == 1.0)
    }
}

/// Grip motion reached after a cumulative action.
pub fn grip_motion(cumulative: &[f64; 4]) -> GripMotion {
    GripMotion::new(
        Vector3::new(
            ACTION_SCALE[0] * cumulative[0],
            ACTION_SCALE[2] * cumulative[2],
            ACTION_SCALE[3] * cumulative[3],
        ),
        ACTION_SCALE[1] * cumulative[1],
    )
}

/// Grip coordinate per axis: displacement along x, y, z and twist angle.
pub fn grip_coordinates(cumulative: &[f64; 4]) -> [f64; 4] {
    std::array::from_fn(|i| ACTION_SCALE[i] * cumulative[i])
}

/// Generalized force conjugate to each grip coordinate.
pub fn axis_forces(r: &Reaction) -> [f64; 4] {
    [r.force.x, r.torque, r.force.y, r.force.z]
}

/// Trapezoid of |force| against |displacement| over one step.
pub fn work_increment(f0: f64, f1: f64, d0: f64, d1: f64) -> f64 {
    0.5 * (f0.abs() + f1.abs()) * (d1.abs() - d0.abs())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Frame {
    pub step: usize,
    pub cumulative_action: [f64; 4],
    pub reaction: Reaction,
    pub work_increment: [f64; 4],
    pub work: [f64; 4],
    pub displacement: Vec<[f32; 3]>,
    /// Nodal Cauchy stress (xx, yy, zz, xy, yz, xz).
    pub stress: Vec<[f32; 6]>,
    pub von_mises: Vec<f32>,
}

impl Frame {
    pub fn total_work(&self) -> f64 {
        self.work.iter().sum()
    }

    pub fn grip_coordinates(&self) -> [f64; 4] {
        grip_coordinates(&self.cumulative_action)
    }

    fn field_mask(&self) -> u32 {
        let mut mask = 0;
        if !self.displacement.is_empty() {
            mask |= FIELD_DISPLACEMENT;
        }
        if !self.stress.is_empty() {
            mask |= FIELD_STRESS;
        }
        if !self.von_mises.is_empty() {
            mask |= FIELD_VON_MISES;
        }
        mask
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryMeta {
    pub graph_id: String,
    pub mesh_hash: String,
    pub material: Material,
    pub seed: u64,
    pub regime: Regime,
    /// Why the rollout stopped early, if it did.
    pub failure: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub meta: TrajectoryMeta,
    pub frames: Vec<Frame>,
}

impl Trajectory {
    pub fn node_count(&self) -> usize {
        self.frames.first().map_or(0, |f| f.von_mises.len().max(f.displacement.len()).max(f.stress.len()))
    }

    pub fn write<W: Write>(&self, w: &mut W) -> Result<(), EnvError> {
        let mask = self.frames.first().map_or(0, Frame::field_mask);
        let nodes = self.node_count();
        for f in &self.frames {
            if f.field_mask() != mask {
                return Err(EnvError::Format(format!("frame {} carries a different field set", f.step)));
            }
            let lens = [(FIELD_DISPLACEMENT, f.displacement.len()), (FIELD_STRESS, f.stress.len()), (FIELD_VON_MISES, f.von_mises.len())];
            if lens.iter().any(|&(bit, len)| mask & bit != 0 && len != nodes) {
                return Err(EnvError::Format(format!("frame {} has inconsistent node counts", f.step)));
            }
        }
        let meta = serde_json::to_vec(&self.meta).map_err(|e| EnvError::Format(e.to_string()))?;
        let mut buf = Vec::new();
        buf.extend_from_slice(TRAJECTORY_MAGIC);
        for v in [TRAJECTORY_VERSION, self.frames.len() as u32, nodes as u32, mask, meta.len() as u32] {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        buf.extend_from_slice(&meta);
        for f in &self.frames {
            buf.extend_from_slice(&(f.step as u64).to_le_bytes());
            let r = &f.reaction;
            let reaction = [r.force.x, r.force.y, r.force.z, r.torque];
            let scalars = f
                .cumulative_action
                .iter()
                .chain(&reaction)
                .chain(&f.work_increment)
                .chain(&f.work);
            for v in scalars {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            for v in f.displacement.iter().flatten().chain(f.stress.iter().flatten()).chain(&f.von_mises) {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn read<R: Read>(r: &mut R) -> Result<Trajectory, EnvError> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        let mut cur = Cursor { bytes: &bytes, pos: 0 };
        if cur.take(4)? != TRAJECTORY_MAGIC {
            return Err(EnvError::Format("bad magic bytes".into()));
        }
        let version = cur.u32()?;
        if version != TRAJECTORY_VERSION {
            return Err(EnvError::Format(format!("unsupported version {version}")));
        }
        let (frames, nodes, mask, meta_len) = (cur.u32()? as usize, cur.u32()? as usize, cur.u32()?, cur.u32()? as usize);
        if mask & !(FIELD_DISPLACEMENT | FIELD_STRESS | FIELD_VON_MISES) != 0 {
            return Err(EnvError::Format(format!("unknown field mask {mask:#x}")));
        }
        let meta: TrajectoryMeta =
            serde_json::from_slice(cur.take(meta_len)?).map_err(|e| EnvError::Format(format!("metadata: {e}")))?;
        let mut out = Vec::with_capacity(frames.min(1 << 16));
        for _ in 0..frames {
            let step = cur.u64()? as usize;
            let mut s = [0.0; 16];
            for v in s.iter_mut() {
                *v = cur.f64()?;
            }
            let reaction = Reaction { force: Vector3::new(s[4], s[5], s[6]), torque: s[7] };
            let count = |bit: u32| if mask & bit != 0 { nodes } else { 0 };
            let mut displacement = Vec::with_capacity(count(FIELD_DISPLACEMENT));
            for _ in 0..count(FIELD_DISPLACEMENT) {
                displacement.push([cur.f32()?, cur.f32()?, cur.f32()?]);
            }
            let mut stress = Vec::with_capacity(count(FIELD_STRESS));
            for _ in 0..count(FIELD_STRESS) {
                let mut v = [0.0f32; 6];
                for c in v.iter_mut() {
                    *c = cur.f32()?;
                }
                stress.push(v);
            }
            let mut vm = Vec::with_capacity(count(FIELD_VON_MISES));
            for _ in 0..count(FIELD_VON_MISES) {
                vm.push(cur.f32()?);
            }
            out.push(Frame {
                step,
                cumulative_action: [s[0], s[1], s[2], s[3]],
                reaction,
                work_increment: [s[8], s[9], s[10], s[11]],
                work: [s[12], s[13], s[14], s[15]],
                displacement,
                stress,
                von_mises: vm,
            });
        }
        if cur.pos != bytes.len() {
            return Err(EnvError::Format(format!("{} trailing bytes", bytes.len() - cur.pos)));
        }
        Ok(Trajectory { meta, frames: out })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, EnvError> {
        let mut buf = Vec::new();
        self.write(&mut buf)?;
        Ok(buf)
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], EnvError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| EnvError::Format("truncated file".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, EnvError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, EnvError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f32(&mut self) -> Result<f32, EnvError> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64, EnvError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn export_trajectory(traj: &Trajectory, path: &Path) -> Result<(), EnvError> {
    fs::write(path, traj.to_bytes()?)?;
    Ok(())
}

pub fn import_trajectory(path: &Path) -> Result<Trajectory, EnvError> {
    Trajectory::read(&mut fs::File::open(path)?)
}

#[derive(Debug, Clone)]
pub enum Geometry {
    Graph { graph: LatticeGraph, mesh: MeshConfig },
    Mesh { mesh: Arc<TetMesh> },
}

#[derive(Debug, Clone)]
pub struct SessionSpec {
    pub geometry: Geometry,
    pub material: Material,
    pub regime: Regime,
    /// Regime defaults when absent.
    pub solver: Option<SolverConfig>,
    pub seed: u64,
}

impl SessionSpec {
    pub fn new(geometry: Geometry, material: Material, regime: Regime) -> Self {
        Self { geometry, material, regime, solver: None, seed: 0 }
    }
}

/// One loading session: a mesh, a material and the state history.
#[derive(Debug)]
pub struct Session {
    model: FemModel,
    material: Material,
    regime: Regime,
    cfg: SolverConfig,
    bc: BoundaryCondition,
    state: SimState,
    frames: Vec<Arc<Frame>>,
    meta: TrajectoryMeta,
}

pub fn create_session(spec: SessionSpec) -> Result<Session, EnvError> {
    match (spec.regime, spec.material.density() > 0.0) {
        (Regime::Quasistatic, true) => {
            return Err(EnvError::RegimeMismatch(
                "rate-dependent material needs the dynamic regime (inertia and relaxation times)".into(),
            ))
        }
        (Regime::Dynamic, false) => {
            return Err(EnvError::RegimeMismatch("dynamic regime needs a material with positive density".into()))
        }
        _ => {}
    }
    let (mesh, graph_id) = match spec.geometry {
        Geometry::Graph { graph, mesh } => {
            let id = hex_digest(graph.to_json().as_bytes());
            (Arc::new(build_plate_mesh(&graph, &mesh)?.0), id)
        }
        Geometry::Mesh { mesh } => {
            let report = percolation_check(&mesh);
            if !report.spans {
                return Err(MeshError::Percolation(report).into());
            }
            (mesh, "mesh".to_string())
        }
    };
    let cfg = spec.solver.unwrap_or(match spec.regime {
        Regime::Quasistatic => SolverConfig::lattice(),
        Regime::Dynamic => SolverConfig::plate(),
    });
    cfg.validate()?;
    let bc = BoundaryCondition::plate(&mesh)?;
    let model = FemModel::new(mesh.clone())?;
    let state = SimState::rest(&mesh, &spec.material);
    let meta = TrajectoryMeta {
        graph_id,
        mesh_hash: mesh.content_hash(),
        material: spec.material.clone(),
        seed: spec.seed,
        regime: spec.regime,
        failure: None,
    };
    let mut session = Session { model, material: spec.material, regime: spec.regime, cfg, bc, state, frames: Vec::new(), meta };
    let rest = session.capture(None)?;
    session.frames.push(Arc::new(rest));
    Ok(session)
}

fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().take(8).map(|b| format!("{b:02x}")).collect()
}

impl Session {
    pub fn mesh(&self) -> &Arc<TetMesh> {
        &self.model.mesh
    }

    pub fn material(&self) -> &Material {
        &self.material
    }

    pub fn regime(&self) -> Regime {
        self.regime
    }

    pub fn solver_config(&self) -> &SolverConfig {
        &self.cfg
    }

    pub fn state(&self) -> &SimState {
        &self.state
    }

    pub fn meta(&self) -> &TrajectoryMeta {
        &self.meta
    }

    /// Index of the latest completed frame.
    pub fn step_index(&self) -> usize {
        self.frames.len() - 1
    }

    pub fn frames(&self) -> &[Arc<Frame>] {
        &self.frames
    }

    pub fn last_frame(&self) -> &Arc<Frame> {
        self.frames.last().expect("a session always holds its rest frame")
    }

    /// Current deformed node positions.
    pub fn deformed_positions(&self) -> Vec<Vector3<f64>> {
        self.model.mesh.nodes.iter().zip(&self.state.u).map(|(x, u)| x + u).collect()
    }

    /// Applies one action. On solver failure the session stays at its last
    /// converged state.
    pub fn step(&mut self, action: Action) -> Result<Arc<Frame>, EnvError> {
        action.validate()?;
        let mut cumulative = self.state.cumulative_action;
        for (c, a) in cumulative.iter_mut().zip(&action.0) {
            *c += a;
        }
        let bc = self.bc.with_motion(grip_motion(&cumulative));
        let solved = match self.regime {
            Regime::Quasistatic => solve_quasistatic_step(&self.model, &self.material, &self.state, &bc, &self.cfg),
            Regime::Dynamic => solve_dynamic_step(&self.model, &self.material, &self.state, &bc, &self.cfg),
        };
        let step = self.frames.len();
        let last_good = step - 1;
        let (mut next, stats) = solved.map_err(|source| EnvError::Diverged { step, last_good, source })?;
        log::debug!("step {step}: {stats:?}");
        next.cumulative_action = cumulative;
        let previous = std::mem::replace(&mut self.state, next);
        let frame = match self.capture(Some(self.last_frame().clone())) {
            Ok(f) => Arc::new(f),
            Err(e) => {
                self.state = previous;
                return Err(match e {
                    EnvError::Fem(source) => EnvError::Diverged { step, last_good, source },
                    other => other,
                });
            }
        };
        self.frames.push(frame.clone());
        Ok(frame)
    }

    fn capture(&self, prev: Option<Arc<Frame>>) -> Result<Frame, EnvError> {
        let stresses = nodal_stresses(&self.model, &self.material, &self.state)?;
        let reaction = reaction_force(&self.model, &self.material, &self.state, &self.bc)?;
        let cumulative = self.state.cumulative_action;
        let (mut increments, mut work) = ([0.0; 4], [0.0; 4]);
        if let Some(prev) = prev {
            let (f0, f1) = (axis_forces(&prev.reaction), axis_forces(&reaction));
            let (d0, d1) = (prev.grip_coordinates(), grip_coordinates(&cumulative));
            for i in 0..4 {
                increments[i] = work_increment(f0[i], f1[i], d0[i], d1[i]);
                work[i] = prev.work[i] + increments[i];
            }
        }
        Ok(Frame {
            step: self.frames.len(),
            cumulative_action: cumulative,
            reaction,
            work_increment: increments,
            work,
            displacement: self.state.u.iter().map(|u| [u.x as f32, u.y as f32, u.z as f32]).collect(),
            stress: stresses.iter().map(|s| s.0.map(|c| c as f32)).collect(),
            von_mises: stresses.iter().map(|s| von_mises(s) as f32).collect(),
        })
    }

    /// Back to the rest state, keeping the mesh and settings.
    pub fn reset(&mut self) {
        self.state = SimState::rest(&self.model.mesh, &self.material);
        self.frames.truncate(1);
        self.meta.failure = None;
    }

    pub fn trajectory(&self) -> Trajectory {
        Trajectory { meta: self.meta.clone(), frames: self.frames.iter().map(|f| (**f).clone()).collect() }
    }

    /// Steps through `actions`, stopping at the first failure, which is
    /// recorded in the metadata.
    pub fn rollout(&mut self, actions: &[Action]) -> Trajectory {
        for (k, a) in actions.iter().enumerate() {
            if let Err(e) = self.step(*a) {
                log::warn!("rollout stopped at action {k}: {e}");
                self.meta.failure = Some(e.to_string());
                break;
            }
        }
        self.trajectory()
    }
}

/// A session shared between threads: at most one step in flight, while
/// completed frames stay readable.
#[derive(Debug)]
pub struct SharedSession {
    session: Mutex<Session>,
    frames: RwLock<Vec<Arc<Frame>>>,
}

impl SharedSession {
    pub fn new(session: Session) -> Self {
        let frames = RwLock::new(session.frames.clone());
        Self { session: Mutex::new(session), frames }
    }

    /// Fails with [`EnvError::Busy`] instead of waiting for another step.
    pub fn try_step(&self, action: Action) -> Result<Arc<Frame>, EnvError> {
        let mut session = match self.session.try_lock() {
            Ok(s) => s,
            Err(std::sync::TryLockError::WouldBlock) => return Err(EnvError::Busy),
            Err(std::sync::TryLockError::Poisoned(p)) => p.into_inner(),
        };
        let frame = session.step(action)?;
        self.frames.write().unwrap_or_else(|p| p.into_inner()).push(frame.clone());
        Ok(frame)
    }

    pub fn frame(&self, t: usize) -> Option<Arc<Frame>> {
        self.frames.read().unwrap_or_else(|p| p.into_inner()).get(t).cloned()
    }

    pub fn frame_count(&self) -> usize {
        self.frames.read().unwrap_or_else(|p| p.into_inner()).len()
    }

    /// Exclusive access for reads that need the full session (waits for an
    /// in-flight step).
    pub fn with_session<T>(&self, f: impl FnOnce(&Session) -> T) -> T {
        f(&self.session.lock().unwrap_or_else(|p| p.into_inner()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SequenceKind {
    Random,
    LoadReverse,
}

/// Random actions with components uniform on {-1, 0, +1}, each DOF sampled
/// independently and held for `block` steps. `LoadReverse` appends the
/// time-reversed negation of a random first half.
pub fn gen_action_sequence(kind: SequenceKind, steps: usize, seed: u64, block: usize) -> Result<Vec<Action>, EnvError> {
    if block == 0 {
        return Err(EnvError::InvalidSequence("block length must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut random = |n: usize| {
        let mut out = vec![Action::ZERO; n];
        for dof in 0..4 {
            for start in (0..n).step_by(block) {
                let v = rng.random_range(-1i32..=1) as f64;
                for a in out.iter_mut().skip(start).take(block) {
                    a.0[dof] = v;
                }
            }
        }
        out
    };
    match kind {
        SequenceKind::Random => Ok(random(steps)),
        SequenceKind::LoadReverse => {
            if steps % 2 != 0 {
                return Err(EnvError::InvalidSequence(format!("load-reverse needs an even step count, got {steps}")));
            }
            Ok(reverse_sequence(random(steps / 2)))
        }
    }
}

/// `first` followed by its time-reversed negation.
pub fn reverse_sequence(first: Vec<Action>) -> Vec<Action> {
    let back: Vec<Action> = first.iter().rev().map(|a| Action(a.0.map(|c| -c))).collect();
    first.into_iter().chain(back).collect()
}

/// Per-frame `|W_ref - W_test| / max_t W_ref` on total work.
pub fn work_error(reference: &Trajectory, test: &Trajectory) -> Result<Vec<f64>, EnvError> {
    if reference.frames.len() != test.frames.len() {
        return Err(EnvError::LengthMismatch { reference: reference.frames.len(), test: test.frames.len() });
    }
    if let Some(t) = reference.frames.iter().zip(&test.frames).position(|(a, b)| a.cumulative_action != b.cumulative_action) {
        return Err(EnvError::ActionMismatch(t));
    }
    let w_max = reference.frames.iter().map(Frame::total_work).fold(0.0, f64::max);
    if !(w_max > 0.0) {
        return Err(EnvError::ZeroWork);
    }
    Ok(reference.frames.iter().zip(&test.frames).map(|(a, b)| (a.total_work() - b.total_work()).abs() / w_max).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetEntry {
    pub file: String,
    pub graph: String,
    pub seed: u64,
    pub frames: usize,
    pub failure: Option<String>,
}

/// Writes `count` random-action trajectories cycling over `graphs`, plus an
/// `index.json` listing them.
pub fn generate_dataset(
    graphs: &[(String, LatticeGraph)],
    material: &Material,
    mesh_cfg: &MeshConfig,
    count: usize,
    steps: usize,
    seed: u64,
    out_dir: &Path,
) -> Result<Vec<DatasetEntry>, EnvError> {
    if graphs.is_empty() {
        return Err(EnvError::InvalidSequence("no graphs given".into()));
    }
    fs::create_dir_all(out_dir)?;
    let regime = if material.density() > 0.0 { Regime::Dynamic } else { Regime::Quasistatic };
    let mut meshes: Vec<Option<Arc<TetMesh>>> = vec![None; graphs.len()];
    let mut entries = Vec::with_capacity(count);
    for k in 0..count {
        let g = k % graphs.len();
        let (name, graph) = &graphs[g];
        let traj_seed = seed.wrapping_add(k as u64);
        let mesh = match &meshes[g] {
            Some(m) => m.clone(),
            None => match build_plate_mesh(graph, mesh_cfg) {
                Ok((m, _)) => meshes[g].insert(Arc::new(m)).clone(),
                Err(e) => {
                    log::warn!("skipping graph {name}: {e}");
                    entries.push(DatasetEntry { file: String::new(), graph: name.clone(), seed: traj_seed, frames: 0, failure: Some(e.to_string()) });
                    continue;
                }
            },
        };
        let mut spec = SessionSpec::new(Geometry::Mesh { mesh }, material.clone(), regime);
        spec.seed = traj_seed;
        let mut session = create_session(spec)?;
        session.meta.graph_id = hex_digest(graph.to_json().as_bytes());
        let actions = gen_action_sequence(SequenceKind::Random, steps, traj_seed, 1)?;
        let traj = session.rollout(&actions);
        let file = format!("traj_{k:05}.bin");
        export_trajectory(&traj, &out_dir.join(&file))?;
        entries.push(DatasetEntry { file, graph: name.clone(), seed: traj_seed, frames: traj.frames.len(), failure: traj.meta.failure.clone() });
    }
    let index = serde_json::to_string_pretty(&entries).map_err(|e| EnvError::Format(e.to_string()))?;
    fs::write(out_dir.join("index.json"), index)?;
    Ok(entries)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::constitutive::{NeoHookean, ViscoMaterial};
    use crate::mesh_forge::block_mesh;

    fn block(dims: [usize; 3]) -> Geometry {
        Geometry::Mesh { mesh: Arc::new(block_mesh(Vector3::new(10.0, 10.0, 2.0), dims)) }
    }

    fn neo_session(dims: [usize; 3]) -> Session {
        let m = Material::NeoHookean(NeoHookean::default());
        create_session(SessionSpec::new(block(dims), m, Regime::Quasistatic)).unwrap()
    }

    fn visco_session(dims: [usize; 3]) -> Session {
        let m = Material::Visco(ViscoMaterial::reference());
        create_session(SessionSpec::new(block(dims), m, Regime::Dynamic)).unwrap()
    }

    #[test]
    fn action_maps_to_grip_motion() {
        let m = grip_motion(&[2.0, -1.0, 3.0, 0.5]);
        assert_eq!(m.translation, Vector3::new(0.30, 0.15 * 3.0, 0.075));
        assert_eq!(m.angle, -0.08);
        assert!(Action([0.0, 1.0, -1.0, 0.0]).is_discrete());
        assert!(!Action([0.5, 0.0, 0.0, 0.0]).is_discrete());
        assert!(Action([f64::NAN, 0.0, 0.0, 0.0]).validate().is_err());
    }

    #[test]
    fn trapezoid_of_linear_curve_is_exact() {
        let k = 3.7;
        let d: Vec<f64> = (0..=12).map(|i| 0.15 * i as f64).collect();
        let w: f64 = d.windows(2).map(|p| work_increment(k * p[0], k * p[1], p[0], p[1])).sum();
        let last = d[12];
        assert!((w - 0.5 * k * last * last).abs() < 1e-12);
        // signs are ignored: compression along -x does the same work
        let wn: f64 = d.windows(2).map(|p| work_increment(-k * p[0], -k * p[1], -p[0], -p[1])).sum();
        assert_eq!(w, wn);
    }

    #[test]
    fn regime_must_match_material() {
        let visco = Material::Visco(ViscoMaterial::reference());
        let err = create_session(SessionSpec::new(block([2, 2, 1]), visco, Regime::Quasistatic)).unwrap_err();
        assert!(matches!(err, EnvError::RegimeMismatch(_)));
        let neo = Material::NeoHookean(NeoHookean::default());
        let err = create_session(SessionSpec::new(block([2, 2, 1]), neo, Regime::Dynamic)).unwrap_err();
        assert!(matches!(err, EnvError::RegimeMismatch(_)));
    }

    #[test]
    fn rest_frame_is_stress_free() {
        let s = neo_session([3, 3, 1]);
        let f = s.last_frame();
        assert_eq!(f.step, 0);
        assert!(f.von_mises.iter().all(|&v| v == 0.0));
        assert!(f.displacement.iter().flatten().all(|&v| v == 0.0));
        assert_eq!(f.work, [0.0; 4]);
    }

    #[test]
    fn stretch_steps_move_the_grip() {
        let mut s = neo_session([4, 4, 1]);
        let traj = s.rollout(&[Action([1.0, 0.0, 0.0, 0.0]); 30]);
        assert!(traj.meta.failure.is_none(), "{:?}", traj.meta.failure);
        assert_eq!(traj.frames.len(), 31);
        let last = traj.frames.last().unwrap();
        assert_eq!(last.cumulative_action, [30.0, 0.0, 0.0, 0.0]);
        assert!((last.grip_coordinates()[0] - 4.5).abs() < 1e-12);
        for n in s.mesh().grip_nodes() {
            assert!((s.state().u[n].x - 4.5).abs() < 1e-12);
        }
        // monotone loading: every increment does positive work
        assert!(traj.frames[1..].iter().all(|f| f.work_increment[0] > 0.0));
        assert!(last.work[1..].iter().all(|&w| w.abs() < 1e-9 * last.work[0]));
    }

    #[test]
    fn cumulative_action_is_prefix_sum() {
        let mut s = neo_session([3, 3, 1]);
        let actions = gen_action_sequence(SequenceKind::Random, 6, 4, 1).unwrap();
        let traj = s.rollout(&actions);
        let mut sum = [0.0; 4];
        for (f, a) in traj.frames[1..].iter().zip(&actions) {
            for i in 0..4 {
                sum[i] += a.0[i];
            }
            assert_eq!(f.cumulative_action, sum);
        }
    }

    #[test]
    fn zero_actions_keep_dynamic_session_at_rest() {
        let mut s = visco_session([3, 3, 1]);
        let traj = s.rollout(&[Action::ZERO; 4]);
        let rest = &traj.frames[0];
        for f in &traj.frames[1..] {
            assert_eq!(Frame { step: 0, ..f.clone() }, *rest);
        }
    }

    #[test]
    fn failed_step_keeps_last_state() {
        let mut s = neo_session([2, 2, 1]);
        s.step(Action([1.0, 0.0, 0.0, 0.0])).unwrap();
        let before = s.state().clone();
        // a huge twist cannot be reached without inverting elements
        let err = s.step(Action([0.0, 60.0, 0.0, 0.0])).unwrap_err();
        assert!(matches!(err, EnvError::Diverged { step: 2, last_good: 1, .. }), "{err}");
        assert_eq!(s.state(), &before);
        assert_eq!(s.step_index(), 1);
        s.step(Action([-1.0, 0.0, 0.0, 0.0])).unwrap();
    }

    #[test]
    fn shared_session_rejects_concurrent_steps() {
        let shared = SharedSession::new(neo_session([2, 2, 1]));
        let guard = shared.session.lock().unwrap();
        assert!(matches!(shared.try_step(Action::ZERO), Err(EnvError::Busy)));
        assert_eq!(shared.frame_count(), 1);
        drop(guard);
        shared.try_step(Action([1.0, 0.0, 0.0, 0.0])).unwrap();
        assert_eq!(shared.frame(1).unwrap().step, 1);
    }

    #[test]
    fn random_sequences_are_reproducible_and_uniform() {
        let a = gen_action_sequence(SequenceKind::Random, 2500, 11, 1).unwrap();
        assert_eq!(a, gen_action_sequence(SequenceKind::Random, 2500, 11, 1).unwrap());
        assert_ne!(a, gen_action_sequence(SequenceKind::Random, 2500, 12, 1).unwrap());
        let mut counts = [0usize; 3];
        for act in &a {
            assert!(act.is_discrete());
            for c in act.0 {
                counts[(c + 1.0) as usize] += 1;
            }
        }
        let n = 10_000.0;
        let chi2: f64 = counts.iter().map(|&c| (c as f64 - n / 3.0).powi(2) / (n / 3.0)).sum();
        // 99th percentile of chi-square with 2 degrees of freedom
        assert!(chi2 < 9.210, "chi2 = {chi2}, counts {counts:?}");
    }

    #[test]
    fn blocks_hold_values() {
        let a = gen_action_sequence(SequenceKind::Random, 12, 3, 4).unwrap();
        for chunk in a.chunks(4) {
            assert!(chunk.iter().all(|x| x == &chunk[0]));
        }
        assert!(gen_action_sequence(SequenceKind::Random, 12, 3, 0).is_err());
    }

    #[test]
    fn load_reverse_returns_to_zero() {
        let a = gen_action_sequence(SequenceKind::LoadReverse, 100, 5, 1).unwrap();
        assert_eq!(a.len(), 100);
        let mut sum = [0.0; 4];
        for x in &a {
            for i in 0..4 {
                sum[i] += x.0[i];
            }
        }
        assert_eq!(sum, [0.0; 4]);
        let r = reverse_sequence(vec![Action([1.0, 0.0, 0.0, 0.0]); 3]);
        assert_eq!(&r[3..], &[Action([-1.0, 0.0, 0.0, 0.0]); 3]);
        assert!(gen_action_sequence(SequenceKind::LoadReverse, 7, 5, 1).is_err());
    }

    fn synthetic(works: &[f64], actions: &[[f64; 4]]) -> Trajectory {
        let frames = works
            .iter()
            .zip(actions)
            .enumerate()
            .map(|(t, (&w, a))| Frame {
                step: t,
                cumulative_action: *a,
                reaction: Reaction::default(),
                work_increment: [0.0; 4],
                work: [w, 0.0, 0.0, 0.0],
                displacement: vec![],
                stress: vec![],
                von_mises: vec![],
            })
            .collect();
        let meta = TrajectoryMeta {
            graph_id: "g".into(),
            mesh_hash: "h".into(),
            material: Material::NeoHookean(NeoHookean::default()),
            seed: 0,
            regime: Regime::Quasistatic,
            failure: None,
        };
        Trajectory { meta, frames }
    }

    #[test]
    fn work_error_cases() {
        let acts: Vec<[f64; 4]> = (0..5).map(|i| [i as f64, 0.0, 0.0, 0.0]).collect();
        let w: Vec<f64> = (0..5).map(|i| (i * i) as f64).collect();
        let r = synthetic(&w, &acts);
        assert!(work_error(&r, &r).unwrap().iter().all(|&e| e == 0.0));
        let up: Vec<f64> = w.iter().map(|x| 1.1 * x).collect();
        let e = work_error(&r, &synthetic(&up, &acts)).unwrap();
        assert!((e[4] - 0.1).abs() < 1e-12);
        let mut other = acts.clone();
        other[2][1] = 1.0;
        assert!(matches!(work_error(&r, &synthetic(&w, &other)), Err(EnvError::ActionMismatch(2))));
        assert!(matches!(work_error(&r, &synthetic(&w[..3], &acts[..3])), Err(EnvError::LengthMismatch { .. })));
        assert!(matches!(work_error(&synthetic(&[0.0; 5], &acts), &r), Err(EnvError::ZeroWork)));
    }

    #[test]
    fn binary_round_trip() {
        let mut s = neo_session([3, 3, 1]);
        let traj = s.rollout(&[Action([1.0, 1.0, 0.0, -1.0]), Action([0.0, 0.0, 1.0, 0.0])]);
        let bytes = traj.to_bytes().unwrap();
        let back = Trajectory::read(&mut bytes.as_slice()).unwrap();
        assert_eq!(back, traj);
        assert_eq!(back.to_bytes().unwrap(), bytes);

        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Trajectory::read(&mut bad.as_slice()), Err(EnvError::Format(_))));
        let mut future = bytes.clone();
        future[4] = 2;
        assert!(Trajectory::read(&mut future.as_slice()).unwrap_err().to_string().contains("version"));
        assert!(Trajectory::read(&mut &bytes[..bytes.len() - 3]).unwrap_err().to_string().contains("truncated"));
    }

    #[test]
    fn identical_inputs_give_identical_bytes() {
        let actions = gen_action_sequence(SequenceKind::Random, 3, 9, 1).unwrap();
        let a = visco_session([3, 3, 1]).rollout(&actions).to_bytes().unwrap();
        let b = visco_session([3, 3, 1]).rollout(&actions).to_bytes().unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn disconnected_mesh_is_rejected() {
        let mesh = block_mesh(Vector3::new(10.0, 10.0, 2.0), [4, 2, 1]);
        // keep only tets away from the middle slab: two halves, no span
        let keep: Vec<bool> = mesh
            .tets
            .iter()
            .map(|t| {
                let cx: f64 = t.iter().map(|&n| mesh.nodes[n].x).sum::<f64>() / 4.0;
                !(2.5..5.0).contains(&cx)
            })
            .collect();
        let split = mesh.subset(&keep);
        let m = Material::NeoHookean(NeoHookean::default());
        let err = create_session(SessionSpec::new(Geometry::Mesh { mesh: Arc::new(split) }, m, Regime::Quasistatic));
        assert!(matches!(err, Err(EnvError::Mesh(MeshError::Percolation(_)))), "{:?}", err.map(|_| ()));
    }
}
