//! Mutation operators over lattice graphs and a beam search over mutated
//! designs scored by stretch work, shear work and volume fraction.

use std::collections::BTreeSet;
use std::f64::consts::PI;
use std::io::Write;
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use nalgebra::Vector3;
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{LogNormal, Normal, Uniform};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::constitutive::{Material, NeoHookean};
use crate::fem_solver::SolverConfig;
use crate::lattice_graph::{expand_symmetry, validate_graph, Beam, LatticeGraph};
use crate::mesh_forge::{auto_scale, build_plate_mesh, MeshConfig, ScaleFit};
use crate::world_env::{create_session, Action, EnvError, Geometry, Regime, SessionSpec, ACTION_SCALE};

pub const SCORE_EPS: f64 = 1e-8;
/// Selection probabilities in [`MutationKind::ALL`] order.
pub const OPERATOR_PROBS: [f64; 6] = [0.25, 0.20, 0.15, 0.15, 0.15, 0.10];
pub const PERTURB_SIGMA: f64 = 0.08;
pub const LOG_SCALE_SIGMA: f64 = 0.15;
pub const ADD_RADIUS_RANGE: (f64, f64) = (0.005, 0.04);

#[derive(Debug, Error)]
pub enum SearchError {
    #[error("seed graph is not valid: {0}")]
    InvalidSeed(String),
    #[error("seed evaluation failed: {0}")]
    SeedFailed(String),
    #[error("invalid search configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MutationKind {
    PerturbNodes,
    ScaleRadii,
    AddBeam,
    RemoveBeam,
    SplitBeam,
    RandomizeRadii,
}

impl MutationKind {
    pub const ALL: [MutationKind; 6] = [
        MutationKind::PerturbNodes,
        MutationKind::ScaleRadii,
        MutationKind::AddBeam,
        MutationKind::RemoveBeam,
        MutationKind::SplitBeam,
        MutationKind::RandomizeRadii,
    ];
}

/// A concrete, replayable mutation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum AppliedOp {
    PerturbNodes { nodes: Vec<usize>, deltas: Vec<[f64; 3]> },
    ScaleRadii { beams: Vec<usize>, factor: f64 },
    AddBeam { nodes: [usize; 2], radius: f64 },
    RemoveBeam { beam: usize },
    SplitBeam { beam: usize, radii: [f64; 2] },
    RandomizeRadii { factors: Vec<f64> },
}

impl AppliedOp {
    pub fn kind(&self) -> MutationKind {
        match self {
            AppliedOp::PerturbNodes { .. } => MutationKind::PerturbNodes,
            AppliedOp::ScaleRadii { .. } => MutationKind::ScaleRadii,
            AppliedOp::AddBeam { .. } => MutationKind::AddBeam,
            AppliedOp::RemoveBeam { .. } => MutationKind::RemoveBeam,
            AppliedOp::SplitBeam { .. } => MutationKind::SplitBeam,
            AppliedOp::RandomizeRadii { .. } => MutationKind::RandomizeRadii,
        }
    }

    /// Applies the recorded change. `None` if it does not fit the graph.
    pub fn apply(&self, g: &LatticeGraph) -> Option<LatticeGraph> {
        let mut out = g.clone();
        match self {
            AppliedOp::PerturbNodes { nodes, deltas } => {
                for (&n, d) in nodes.iter().zip(deltas) {
                    *out.nodes.get_mut(n)? += Vector3::from(*d);
                }
            }
            AppliedOp::ScaleRadii { beams, factor } => {
                for &b in beams {
                    out.beams.get_mut(b)?.radius *= factor;
                }
            }
            AppliedOp::AddBeam { nodes: [i, j], radius } => {
                if i == j || *i.max(j) >= g.nodes.len() || g.has_beam_between(*i, *j) {
                    return None;
                }
                out.beams.push(Beam::new(*i, *j, *radius));
            }
            AppliedOp::RemoveBeam { beam } => {
                if *beam >= out.beams.len() {
                    return None;
                }
                out.beams.remove(*beam);
            }
            AppliedOp::SplitBeam { beam, radii } => {
                let b = *g.beams.get(*beam)?;
                let [i, j] = b.nodes;
                let m = out.nodes.len();
                out.nodes.push((g.nodes[i] + g.nodes[j]) * 0.5);
                out.beams[*beam] = Beam::new(i, m, radii[0]);
                out.beams.push(Beam::new(m, j, radii[1]));
            }
            AppliedOp::RandomizeRadii { factors } => {
                if factors.len() != out.beams.len() {
                    return None;
                }
                for (b, f) in out.beams.iter_mut().zip(factors) {
                    b.radius *= f;
                }
            }
        }
        Some(out)
    }
}

/// Replays a mutation record from the parent graph.
pub fn replay(parent: &LatticeGraph, ops: &[AppliedOp]) -> Option<LatticeGraph> {
    ops.iter().try_fold(parent.clone(), |g, op| op.apply(&g))
}

pub fn sample_operator<R: Rng>(rng: &mut R) -> MutationKind {
    let dist = WeightedIndex::new(OPERATOR_PROBS).expect("constant weights are valid");
    MutationKind::ALL[dist.sample(rng)]
}

/// Mean radius of the beams meeting at each node (0 for isolated nodes).
fn node_radii(g: &LatticeGraph) -> Vec<f64> {
    let mut sum = vec![0.0; g.nodes.len()];
    let mut count = vec![0usize; g.nodes.len()];
    for b in &g.beams {
        for &n in &b.nodes {
            sum[n] += b.radius;
            count[n] += 1;
        }
    }
    sum.iter().zip(&count).map(|(s, &c)| if c > 0 { s / c as f64 } else { 0.0 }).collect()
}

/// Draws a concrete operation of `kind` for `g`; `None` if the operator
/// cannot apply (no beams, no unconnected pair).
pub fn draw_operation<R: Rng>(g: &LatticeGraph, kind: MutationKind, rng: &mut R) -> Option<AppliedOp> {
    let log_factor = LogNormal::new(0.0, LOG_SCALE_SIGMA).expect("valid sigma");
    match kind {
        MutationKind::PerturbNodes => {
            if g.nodes.is_empty() {
                return None;
            }
            let k = rng.random_range(1..=3).min(g.nodes.len());
            let mut nodes = sample(rng, g.nodes.len(), k).into_vec();
            nodes.sort_unstable();
            let normal = Normal::new(0.0, PERTURB_SIGMA).expect("valid sigma");
            let deltas = nodes.iter().map(|_| [normal.sample(rng), normal.sample(rng), normal.sample(rng)]).collect();
            Some(AppliedOp::PerturbNodes { nodes, deltas })
        }
        MutationKind::ScaleRadii => {
            if g.beams.is_empty() {
                return None;
            }
            let k = rng.random_range(1..=4).min(g.beams.len());
            let mut beams = sample(rng, g.beams.len(), k).into_vec();
            beams.sort_unstable();
            Some(AppliedOp::ScaleRadii { beams, factor: log_factor.sample(rng) })
        }
        MutationKind::AddBeam => {
            let n = g.nodes.len();
            let pairs: Vec<[usize; 2]> =
                (0..n).flat_map(|i| (i + 1..n).map(move |j| [i, j])).filter(|&[i, j]| !g.has_beam_between(i, j)).collect();
            if pairs.is_empty() {
                return None;
            }
            let nodes = pairs[rng.random_range(0..pairs.len())];
            let radius = Uniform::new(ADD_RADIUS_RANGE.0, ADD_RADIUS_RANGE.1).expect("valid range").sample(rng);
            Some(AppliedOp::AddBeam { nodes, radius })
        }
        MutationKind::RemoveBeam => {
            if g.beams.is_empty() {
                return None;
            }
            Some(AppliedOp::RemoveBeam { beam: rng.random_range(0..g.beams.len()) })
        }
        MutationKind::SplitBeam => {
            if g.beams.is_empty() {
                return None;
            }
            let beam = rng.random_range(0..g.beams.len());
            // radius varies linearly between the endpoint node radii; each half
            // takes the mean over its own span
            let r = node_radii(g);
            let [i, j] = g.beams[beam].nodes;
            let mid = 0.5 * (r[i] + r[j]);
            Some(AppliedOp::SplitBeam { beam, radii: [0.5 * (r[i] + mid), 0.5 * (mid + r[j])] })
        }
        MutationKind::RandomizeRadii => {
            if g.beams.is_empty() {
                return None;
            }
            Some(AppliedOp::RandomizeRadii { factors: g.beams.iter().map(|_| log_factor.sample(rng)).collect() })
        }
    }
}

pub fn apply_operator<R: Rng>(g: &LatticeGraph, kind: MutationKind, rng: &mut R) -> Option<(LatticeGraph, AppliedOp)> {
    let op = draw_operation(g, kind, rng)?;
    let out = op.apply(g)?;
    Some((out, op))
}

/// Volume fraction of the unit cell estimated from capsule volumes of the
/// symmetry-expanded beams, overlaps ignored.
pub fn capsule_volume_fraction(g: &LatticeGraph, fit: ScaleFit) -> Option<f64> {
    let expanded = expand_symmetry(g, true);
    let (scaled, _) = auto_scale(&expanded, fit).ok()?;
    let v: f64 = scaled
        .beams
        .iter()
        .map(|b| PI * b.radius * b.radius * (b.b - b.a).norm() + 4.0 / 3.0 * PI * b.radius.powi(3))
        .sum();
    Some(v)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SearchConfig {
    pub beam_width: usize,
    pub mutations_per_parent: usize,
    /// Defaults to `floor(1.5 * mutations_per_parent)`.
    pub attempts_per_parent: Option<usize>,
    pub iterations: usize,
    /// Redraws allowed after a rejected composition.
    pub resample_cap: usize,
    /// Probability of composing 1, 2 or 3 operators.
    pub composition_probs: [f64; 3],
    pub vf_bounds: [f64; 2],
    pub fit: ScaleFit,
    /// Steps per loading axis in each evaluation rollout.
    pub eval_steps: usize,
    pub seed: u64,
    /// Evaluator threads; defaults to the available parallelism.
    pub workers: Option<usize>,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            beam_width: 5,
            mutations_per_parent: 8,
            attempts_per_parent: None,
            iterations: 10,
            resample_cap: 20,
            composition_probs: [0.6, 0.3, 0.1],
            vf_bounds: [0.001, 0.5],
            fit: ScaleFit::Endpoints,
            eval_steps: 20,
            seed: 0,
            workers: None,
        }
    }
}

impl SearchConfig {
    pub fn attempts(&self) -> usize {
        self.attempts_per_parent.unwrap_or(self.mutations_per_parent * 3 / 2)
    }

    pub fn validate(&self) -> Result<(), SearchError> {
        if self.beam_width == 0 || self.mutations_per_parent == 0 || self.iterations == 0 || self.eval_steps == 0 {
            return Err(SearchError::InvalidConfig("beam width, mutations, iterations and steps must be at least 1".into()));
        }
        if self.attempts() < self.mutations_per_parent {
            return Err(SearchError::InvalidConfig("attempts per parent below mutations per parent".into()));
        }
        if self.composition_probs.iter().any(|p| !(*p >= 0.0)) || self.composition_probs.iter().sum::<f64>() <= 0.0 {
            return Err(SearchError::InvalidConfig("composition probabilities must be non-negative".into()));
        }
        if !(self.vf_bounds[0] < self.vf_bounds[1]) {
            return Err(SearchError::InvalidConfig("volume fraction bounds are empty".into()));
        }
        Ok(())
    }
}

/// Graph rules plus the capsule volume-fraction bound.
pub fn mutation_is_valid(g: &LatticeGraph, cfg: &SearchConfig) -> bool {
    validate_graph(g).pass
        && capsule_volume_fraction(g, cfg.fit).is_some_and(|v| v >= cfg.vf_bounds[0] && v <= cfg.vf_bounds[1])
}

#[derive(Debug, Clone, PartialEq)]
pub enum Composition {
    Accepted { graph: LatticeGraph, ops: Vec<AppliedOp>, draws: usize },
    Rejected { draws: usize },
}

/// Number of operators in one composition, drawn from `probs` over 1, 2, 3.
pub fn composition_len<R: Rng>(rng: &mut R, probs: [f64; 3]) -> usize {
    WeightedIndex::new(probs).expect("validated probabilities").sample(rng) + 1
}

/// Composes 1-3 operators and validates the result, redrawing up to
/// `cfg.resample_cap` times.
pub fn compose_mutation<R: Rng>(g: &LatticeGraph, rng: &mut R, cfg: &SearchConfig) -> Composition {
    for draw in 1..=cfg.resample_cap + 1 {
        let n_ops = composition_len(rng, cfg.composition_probs);
        let mut current = g.clone();
        let mut ops = Vec::with_capacity(n_ops);
        let mut ok = true;
        for _ in 0..n_ops {
            match apply_operator(&current, sample_operator(rng), rng) {
                Some((next, op)) => {
                    current = next;
                    ops.push(op);
                }
                None => {
                    ok = false;
                    break;
                }
            }
        }
        if ok && mutation_is_valid(&current, cfg) {
            return Composition::Accepted { graph: current, ops, draws: draw };
        }
    }
    Composition::Rejected { draws: cfg.resample_cap + 1 }
}

pub fn design_score(w_stretch: f64, w_shear: f64, v_f: f64) -> f64 {
    w_stretch / (w_shear * v_f + SCORE_EPS)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub w_stretch: f64,
    pub w_shear: f64,
    pub v_f: f64,
}

impl Metrics {
    pub fn score(&self) -> f64 {
        design_score(self.w_stretch, self.w_shear, self.v_f)
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EvalFailure {
    /// The geometry could not be meshed or loaded.
    #[error("invalid design: {0}")]
    Invalid(String),
    #[error("solver diverged: {0}")]
    Diverged(String),
}

pub trait Evaluator: Sync {
    fn evaluate(&self, g: &LatticeGraph) -> Result<Metrics, EvalFailure>;
}

impl<F: Fn(&LatticeGraph) -> Result<Metrics, EvalFailure> + Sync> Evaluator for F {
    fn evaluate(&self, g: &LatticeGraph) -> Result<Metrics, EvalFailure> {
        self(g)
    }
}

/// Meshes the design and runs constant stretch and shear rollouts.
#[derive(Debug, Clone)]
pub struct FemEvaluator {
    pub mesh: MeshConfig,
    pub material: NeoHookean,
    pub solver: SolverConfig,
    pub steps: usize,
}

impl Default for FemEvaluator {
    fn default() -> Self {
        Self { mesh: MeshConfig::default(), material: NeoHookean::default(), solver: SolverConfig::lattice(), steps: 20 }
    }
}

impl FemEvaluator {
    pub fn new(mesh: MeshConfig, cfg: &SearchConfig) -> Self {
        Self { mesh, steps: cfg.eval_steps, ..Default::default() }
    }
}

impl Evaluator for FemEvaluator {
    fn evaluate(&self, g: &LatticeGraph) -> Result<Metrics, EvalFailure> {
        let (mesh, _) = build_plate_mesh(g, &self.mesh).map_err(|e| EvalFailure::Invalid(e.to_string()))?;
        let v_f = mesh.volume_fraction();
        let mut spec =
            SessionSpec::new(Geometry::Mesh { mesh: Arc::new(mesh) }, Material::NeoHookean(self.material), Regime::Quasistatic);
        spec.solver = Some(self.solver);
        let mut session = create_session(spec).map_err(|e| EvalFailure::Invalid(e.to_string()))?;
        let mut run = |action: [f64; 4], axis: usize| -> Result<f64, EvalFailure> {
            session.reset();
            for _ in 0..self.steps {
                session.step(Action(action)).map_err(|e| match e {
                    EnvError::Diverged { .. } => EvalFailure::Diverged(e.to_string()),
                    other => EvalFailure::Invalid(other.to_string()),
                })?;
            }
            Ok(session.last_frame().work[axis])
        };
        let w_stretch = run([1.0, 0.0, 0.0, 0.0], 0)?;
        let w_shear = run([0.0, 0.0, 1.0, 0.0], 2)?;
        Ok(Metrics { w_stretch, w_shear, v_f })
    }
}

/// Mesh-free stand-in: bar and bending stiffness sums over the expanded
/// struts give linear force-displacement curves.
#[derive(Debug, Clone, Copy)]
pub struct ProxyEvaluator {
    pub fit: ScaleFit,
    /// Grip travel over the rollout.
    pub travel: f64,
}

impl Default for ProxyEvaluator {
    fn default() -> Self {
        Self { fit: ScaleFit::Endpoints, travel: 20.0 * ACTION_SCALE[0] }
    }
}

impl ProxyEvaluator {
    pub fn new(cfg: &SearchConfig) -> Self {
        Self { fit: cfg.fit, travel: cfg.eval_steps as f64 * ACTION_SCALE[0] }
    }
}

impl Evaluator for ProxyEvaluator {
    fn evaluate(&self, g: &LatticeGraph) -> Result<Metrics, EvalFailure> {
        let expanded = expand_symmetry(g, true);
        let (scaled, _) = auto_scale(&expanded, self.fit).map_err(|e| EvalFailure::Invalid(e.to_string()))?;
        let (mut k_stretch, mut k_shear) = (0.0, 0.0);
        for b in &scaled.beams {
            let d = b.b - b.a;
            let len = d.norm();
            if len <= 0.0 {
                continue;
            }
            let t = d / len;
            let area = PI * b.radius * b.radius;
            let bending = 12.0 * 0.25 * PI * b.radius.powi(4) / len.powi(3);
            k_stretch += area / len * t.x * t.x + bending * (1.0 - t.x * t.x);
            k_shear += area / len * t.y * t.y + bending * (1.0 - t.y * t.y);
        }
        let v_f = capsule_volume_fraction(g, self.fit).ok_or_else(|| EvalFailure::Invalid("empty beam set".into()))?;
        let w = |k: f64| 0.5 * k * self.travel * self.travel;
        Ok(Metrics { w_stretch: w(k_stretch), w_shear: w(k_shear), v_f })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub id: usize,
    pub parent: Option<usize>,
    pub iteration: usize,
    pub operators: Vec<AppliedOp>,
    pub valid: bool,
    pub diverged: bool,
    #[serde(rename = "W_stretch")]
    pub w_stretch: Option<f64>,
    #[serde(rename = "W_shear")]
    pub w_shear: Option<f64>,
    pub v_f: Option<f64>,
    #[serde(rename = "s")]
    pub score: Option<f64>,
    pub error: Option<String>,
    pub graph: LatticeGraph,
}

impl Candidate {
    fn evaluated(mut self, result: Result<Metrics, EvalFailure>) -> Self {
        match result {
            Ok(m) => {
                self.w_stretch = Some(m.w_stretch);
                self.w_shear = Some(m.w_shear);
                self.v_f = Some(m.v_f);
                self.score = Some(m.score()).filter(|s| s.is_finite());
                if self.score.is_none() {
                    self.error = Some("non-finite score".into());
                }
            }
            Err(e) => {
                self.diverged = matches!(e, EvalFailure::Diverged(_));
                self.valid = !matches!(e, EvalFailure::Invalid(_));
                self.error = Some(e.to_string());
            }
        }
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    /// Candidate ids, best first.
    pub beam: Vec<usize>,
    pub best_score: f64,
    pub evaluated: usize,
    pub rejected_attempts: usize,
    pub warning: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SearchLog {
    pub candidates: Vec<Candidate>,
    pub iterations: Vec<IterationRecord>,
    pub winner: Option<usize>,
    pub cancelled: bool,
}

impl SearchLog {
    pub fn best_scores(&self) -> Vec<f64> {
        self.iterations.iter().map(|r| r.best_score).collect()
    }

    pub fn winner(&self) -> Option<&Candidate> {
        self.winner.map(|id| &self.candidates[id])
    }

    /// One candidate per line.
    pub fn write_jsonl<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        for c in &self.candidates {
            serde_json::to_writer(&mut *w, c)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn to_jsonl(&self) -> String {
        let mut buf = Vec::new();
        self.write_jsonl(&mut buf).expect("writing to memory cannot fail");
        String::from_utf8(buf).expect("serde_json emits UTF-8")
    }

    /// Operator list of every candidate from the seed down to `id`.
    pub fn lineage(&self, id: usize) -> Vec<usize> {
        let mut chain = vec![id];
        while let Some(p) = self.candidates[*chain.last().unwrap()].parent {
            chain.push(p);
        }
        chain.reverse();
        chain
    }
}

/// Evaluates `graphs` on up to `workers` threads; results keep input order.
fn evaluate_batch(evaluator: &dyn Evaluator, graphs: &[&LatticeGraph], workers: usize) -> Vec<Result<Metrics, EvalFailure>> {
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<Result<Metrics, EvalFailure>>>> = Mutex::new(vec![None; graphs.len()]);
    let workers = workers.clamp(1, graphs.len().max(1));
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let k = next.fetch_add(1, Ordering::Relaxed);
                if k >= graphs.len() {
                    break;
                }
                let r = evaluator.evaluate(graphs[k]);
                results.lock().unwrap_or_else(|p| p.into_inner())[k] = Some(r);
            });
        }
    });
    results.into_inner().unwrap_or_else(|p| p.into_inner()).into_iter().map(|r| r.expect("every slot is filled")).collect()
}

pub fn beam_search(seed: &LatticeGraph, evaluator: &dyn Evaluator, cfg: &SearchConfig) -> Result<SearchLog, SearchError> {
    beam_search_observed(seed, evaluator, cfg, &AtomicBool::new(false), &mut |_| {})
}

/// Beam search with elitism: parents compete with their children for the
/// next beam. `on_iteration` sees the log after each committed iteration;
/// setting `cancel` stops before the next iteration.
pub fn beam_search_observed(
    seed: &LatticeGraph,
    evaluator: &dyn Evaluator,
    cfg: &SearchConfig,
    cancel: &AtomicBool,
    on_iteration: &mut dyn FnMut(&SearchLog),
) -> Result<SearchLog, SearchError> {
    cfg.validate()?;
    let report = validate_graph(seed);
    if !report.pass {
        return Err(SearchError::InvalidSeed(report.failed_rules().join(", ")));
    }
    let workers = cfg.workers.unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut log = SearchLog::default();

    let root = Candidate {
        id: 0,
        parent: None,
        iteration: 0,
        operators: Vec::new(),
        valid: true,
        diverged: false,
        w_stretch: None,
        w_shear: None,
        v_f: None,
        score: None,
        error: None,
        graph: seed.clone(),
    }
    .evaluated(evaluator.evaluate(seed));
    let Some(seed_score) = root.score else {
        return Err(SearchError::SeedFailed(root.error.clone().unwrap_or_default()));
    };
    log.candidates.push(root);
    let mut beam = vec![0usize];
    log.iterations.push(IterationRecord {
        iteration: 0,
        beam: beam.clone(),
        best_score: seed_score,
        evaluated: 1,
        rejected_attempts: 0,
        warning: None,
    });
    log.winner = Some(0);
    on_iteration(&log);

    for iteration in 1..=cfg.iterations {
        if cancel.load(Ordering::SeqCst) {
            log.cancelled = true;
            break;
        }
        // mutations are drawn sequentially so the log does not depend on
        // evaluation scheduling
        let mut children = Vec::new();
        let mut rejected = 0;
        for &parent in &beam {
            let mut accepted = 0;
            for _ in 0..cfg.attempts() {
                if accepted == cfg.mutations_per_parent {
                    break;
                }
                match compose_mutation(&log.candidates[parent].graph, &mut rng, cfg) {
                    Composition::Accepted { graph, ops, .. } => {
                        accepted += 1;
                        children.push(Candidate {
                            id: log.candidates.len() + children.len(),
                            parent: Some(parent),
                            iteration,
                            operators: ops,
                            valid: true,
                            diverged: false,
                            w_stretch: None,
                            w_shear: None,
                            v_f: None,
                            score: None,
                            error: None,
                            graph,
                        });
                    }
                    Composition::Rejected { .. } => rejected += 1,
                }
            }
        }
        let graphs: Vec<&LatticeGraph> = children.iter().map(|c| &c.graph).collect();
        let results = evaluate_batch(evaluator, &graphs, workers);
        let evaluated = children.len();
        log.candidates.extend(children.into_iter().zip(results).map(|(c, r)| c.evaluated(r)));

        let first_child = log.candidates.len() - evaluated;
        let mut pool: BTreeSet<usize> = beam.iter().copied().collect();
        pool.extend((first_child..log.candidates.len()).filter(|&id| log.candidates[id].score.is_some()));
        let warning = (pool.len() == beam.len()).then(|| {
            log::warn!("iteration {iteration}: no child evaluated successfully; beam carried over");
            "no successful children; beam carried over".to_string()
        });
        let mut ranked: Vec<usize> = pool.into_iter().collect();
        ranked.sort_by(|&a, &b| {
            let (sa, sb) = (log.candidates[a].score.unwrap(), log.candidates[b].score.unwrap());
            sb.total_cmp(&sa).then(a.cmp(&b))
        });
        ranked.truncate(cfg.beam_width);
        beam = ranked;
        log.winner = Some(beam[0]);
        log.iterations.push(IterationRecord {
            iteration,
            beam: beam.clone(),
            best_score: log.candidates[beam[0]].score.unwrap(),
            evaluated,
            rejected_attempts: rejected,
            warning,
        });
        on_iteration(&log);
    }
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn score_examples() {
        assert!((design_score(1.0, 1.0, 1.0) - 1.0 / (1.0 + 1e-8)).abs() < 1e-15);
        assert!((design_score(2.0, 0.5, 0.1) - 2.0 / (0.05 + 1e-8)).abs() < 1e-9);
        assert_eq!(design_score(3.0, 0.0, 0.1), 3.0e8);
        // solid plate: the score reduces to the work ratio
        assert!((design_score(0.8, 0.2, 1.0) - 4.0).abs() < 1e-6);
    }

    #[test]
    fn remove_beam_on_cycle_gives_connected_paths() {
        let g = LatticeGraph::reference_cycle();
        for beam in 0..4 {
            let path = AppliedOp::RemoveBeam { beam }.apply(&g).unwrap();
            assert_eq!(path.beams.len(), 3);
            assert!(validate_graph(&path).pass);
        }
    }

    #[test]
    fn split_beam_with_equal_radii() {
        let g = LatticeGraph::new(vec![Vector3::zeros(), Vector3::new(0.4, 0.2, 0.0)], vec![Beam::new(0, 1, 0.02)]);
        let (out, op) = apply_operator(&g, MutationKind::SplitBeam, &mut rng(1)).unwrap();
        assert_eq!(op, AppliedOp::SplitBeam { beam: 0, radii: [0.02, 0.02] });
        assert_eq!(out.nodes.len(), 3);
        assert_eq!(out.nodes[2], Vector3::new(0.2, 0.1, 0.0));
        assert_eq!(out.beams, vec![Beam::new(0, 2, 0.02), Beam::new(2, 1, 0.02)]);
    }

    #[test]
    fn split_beam_interpolates_node_radii() {
        // node 0 sees radii 0.01 and 0.03 (mean 0.02), node 1 only 0.03
        let g = LatticeGraph::new(
            vec![Vector3::zeros(), Vector3::x(), Vector3::y()],
            vec![Beam::new(0, 1, 0.03), Beam::new(0, 2, 0.01)],
        );
        let mut r = rng(0);
        for _ in 0..50 {
            if let Some(AppliedOp::SplitBeam { beam: 0, radii }) = draw_operation(&g, MutationKind::SplitBeam, &mut r) {
                assert!((radii[0] - 0.0225).abs() < 1e-15 && (radii[1] - 0.0275).abs() < 1e-15, "{radii:?}");
                return;
            }
        }
        panic!("beam 0 never drawn");
    }

    #[test]
    fn inapplicable_operators() {
        let lone = LatticeGraph::new(vec![Vector3::zeros()], vec![]);
        assert!(draw_operation(&lone, MutationKind::RemoveBeam, &mut rng(0)).is_none());
        let full = LatticeGraph::simple_cubic(0.02);
        assert!(draw_operation(&full, MutationKind::AddBeam, &mut rng(0)).is_none());
        assert!(AppliedOp::AddBeam { nodes: [0, 1], radius: 0.01 }.apply(&full).is_none());
    }

    #[test]
    fn add_beam_connects_an_unconnected_pair() {
        let g = LatticeGraph::reference_cycle();
        for s in 0..20 {
            let (out, op) = apply_operator(&g, MutationKind::AddBeam, &mut rng(s)).unwrap();
            let AppliedOp::AddBeam { nodes: [i, j], radius } = op else { panic!() };
            assert!(!g.has_beam_between(i, j));
            assert!((0.005..0.04).contains(&radius));
            assert_eq!(out.beams.len(), 5);
        }
    }

    #[test]
    fn operator_frequencies_match_table() {
        let mut r = rng(42);
        let n = 100_000;
        let mut counts = [0usize; 6];
        for _ in 0..n {
            let k = sample_operator(&mut r);
            counts[MutationKind::ALL.iter().position(|&x| x == k).unwrap()] += 1;
        }
        let chi2: f64 = counts
            .iter()
            .zip(OPERATOR_PROBS)
            .map(|(&c, p)| (c as f64 - p * n as f64).powi(2) / (p * n as f64))
            .sum();
        // 99th percentile of chi-square with 5 degrees of freedom
        assert!(chi2 < 15.086, "chi2 = {chi2}, {counts:?}");
    }

    #[test]
    fn composition_lengths_match_probabilities() {
        let mut r = rng(17);
        let n = 100_000;
        let probs = SearchConfig::default().composition_probs;
        let mut counts = [0usize; 3];
        for _ in 0..n {
            counts[composition_len(&mut r, probs) - 1] += 1;
        }
        let chi2: f64 =
            counts.iter().zip(probs).map(|(&c, p)| (c as f64 - p * n as f64).powi(2) / (p * n as f64)).sum();
        // 99th percentile, 2 degrees of freedom
        assert!(chi2 < 9.210, "chi2 = {chi2}, {counts:?}");
    }

    #[test]
    fn scale_factor_is_log_normal() {
        let g = LatticeGraph::branched_seed();
        let mut r = rng(3);
        let n = 100_000;
        let logs: Vec<f64> = (0..n)
            .map(|_| match draw_operation(&g, MutationKind::ScaleRadii, &mut r) {
                Some(AppliedOp::ScaleRadii { factor, .. }) => factor.ln(),
                other => panic!("{other:?}"),
            })
            .collect();
        let mean = logs.iter().sum::<f64>() / n as f64;
        let var = logs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        assert!(mean.abs() < 3.0 * LOG_SCALE_SIGMA / (n as f64).sqrt(), "mean {mean}");
        assert!((var.sqrt() - LOG_SCALE_SIGMA).abs() < 0.01 * LOG_SCALE_SIGMA);
    }

    #[test]
    fn capsule_fraction_of_simple_cubic() {
        // six half struts of length 0.5 meeting at the centre
        let r = 0.05;
        let expected = 6.0 * (PI * r * r * 0.5 + 4.0 / 3.0 * PI * r.powi(3));
        let v = capsule_volume_fraction(&LatticeGraph::simple_cubic(r), ScaleFit::Endpoints).unwrap();
        assert!((v - expected).abs() < 1e-12);
    }

    #[test]
    fn accepted_mutations_are_valid_and_replayable() {
        let cfg = SearchConfig::default();
        let seed = LatticeGraph::branched_seed();
        let mut r = rng(9);
        let mut accepted = 0;
        for _ in 0..1000 {
            if let Composition::Accepted { graph, ops, draws } = compose_mutation(&seed, &mut r, &cfg) {
                accepted += 1;
                assert!(draws <= cfg.resample_cap + 1);
                assert!((1..=3).contains(&ops.len()));
                assert!(mutation_is_valid(&graph, &cfg));
                assert_eq!(replay(&seed, &ops).as_ref(), Some(&graph));
            }
        }
        assert!(accepted > 900, "{accepted}");
    }

    #[test]
    fn boundary_graph_rejections_are_resampled() {
        let g = LatticeGraph::new(
            vec![Vector3::new(1.5, 1.5, 1.5), Vector3::new(-1.5, 1.5, -1.5)],
            vec![Beam::new(0, 1, 0.03)],
        );
        let cfg = SearchConfig::default();
        let mut r = rng(5);
        let mut retried = false;
        for _ in 0..200 {
            match compose_mutation(&g, &mut r, &cfg) {
                Composition::Accepted { graph, draws, .. } => {
                    retried |= draws > 1;
                    assert!(mutation_is_valid(&graph, &cfg));
                }
                Composition::Rejected { draws } => assert_eq!(draws, 21),
            }
        }
        assert!(retried);
    }

    fn toy_search(seed: u64) -> SearchLog {
        let cfg = SearchConfig { beam_width: 3, mutations_per_parent: 4, iterations: 6, seed, workers: Some(2), ..Default::default() };
        beam_search(&LatticeGraph::branched_seed(), &ProxyEvaluator::default(), &cfg).unwrap()
    }

    #[test]
    fn search_is_monotone_and_traceable() {
        let log = toy_search(1);
        let best = log.best_scores();
        assert_eq!(best.len(), 7);
        assert!(best.windows(2).all(|w| w[1] >= w[0]), "{best:?}");
        for c in &log.candidates[1..] {
            let parent = &log.candidates[c.parent.unwrap()];
            assert!(parent.id < c.id);
            assert_eq!(replay(&parent.graph, &c.operators).as_ref(), Some(&c.graph));
        }
        assert_eq!(log.lineage(log.winner.unwrap())[0], 0);
    }

    #[test]
    fn search_log_is_deterministic() {
        assert_eq!(toy_search(4).to_jsonl(), toy_search(4).to_jsonl());
        let single = SearchConfig { beam_width: 3, mutations_per_parent: 4, iterations: 6, seed: 4, workers: Some(1), ..Default::default() };
        let one = beam_search(&LatticeGraph::branched_seed(), &ProxyEvaluator::default(), &single).unwrap();
        assert_eq!(one.to_jsonl(), toy_search(4).to_jsonl());
    }

    #[test]
    fn failing_children_keep_the_beam() {
        let seed = LatticeGraph::branched_seed();
        let eval = |g: &LatticeGraph| {
            if g == &LatticeGraph::branched_seed() {
                Ok(Metrics { w_stretch: 1.0, w_shear: 1.0, v_f: 0.1 })
            } else {
                Err(EvalFailure::Diverged("synthetic".into()))
            }
        };
        let cfg = SearchConfig { iterations: 2, mutations_per_parent: 2, ..Default::default() };
        let log = beam_search(&seed, &eval, &cfg).unwrap();
        assert!(log.iterations[1..].iter().all(|r| r.beam == vec![0] && r.warning.is_some()));
        assert!(log.candidates[1..].iter().all(|c| c.diverged && c.score.is_none()));
    }

    #[test]
    fn linear_curves_give_closed_form_score() {
        // F = k d sampled at the grip steps: the trapezoid is exact
        let (ks, kh, vf) = (5.0, 2.0, 0.2);
        let d: Vec<f64> = (0..=20).map(|i| 0.15 * i as f64).collect();
        let work = |k: f64| d.windows(2).map(|p| crate::world_env::work_increment(k * p[0], k * p[1], p[0], p[1])).sum::<f64>();
        let m = Metrics { w_stretch: work(ks), w_shear: work(kh), v_f: vf };
        assert!((m.w_stretch / m.w_shear - ks / kh).abs() < 1e-12);
        assert!((m.score() - ks / (kh * vf)).abs() < 1e-6);
    }

    #[test]
    fn cancellation_stops_between_iterations() {
        let cancel = AtomicBool::new(false);
        let cfg = SearchConfig { iterations: 5, ..Default::default() };
        let mut seen = 0;
        let log = beam_search_observed(&LatticeGraph::branched_seed(), &ProxyEvaluator::default(), &cfg, &cancel, &mut |l| {
            seen = l.iterations.len();
            if seen == 2 {
                cancel.store(true, Ordering::SeqCst);
            }
        })
        .unwrap();
        assert!(log.cancelled);
        assert_eq!(log.iterations.len(), 2);
        assert_eq!(seen, 2);
    }
}
