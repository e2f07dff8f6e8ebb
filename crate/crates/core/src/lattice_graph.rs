//! Compact unit-cell graphs: parsing, validation, cubic symmetry expansion and
//! summary statistics.
//!
//! A graph stores a handful of nodes and beams; the full unit cell is obtained
//! by replicating every beam under the 48 operations of the octahedral group.

use std::collections::VecDeque;
use std::fmt;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Inclusive per-axis bound on node coordinates of a valid graph.
pub const COORD_BOUND: f64 = 1.5;
/// Largest admissible beam radius (unit-cell lengths).
pub const MAX_RADIUS: f64 = 0.5;
/// Endpoint tolerance used when merging symmetry-duplicated beams.
pub const DEDUP_TOL: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("malformed graph document: {0}")]
    Json(#[from] serde_json::Error),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("beam {beam} references node {index} but the graph has {nodes} nodes")]
    IndexOutOfRange { beam: usize, index: usize, nodes: usize },
    #[error("beam {beam} connects node {index} to itself")]
    SelfLoop { beam: usize, index: usize },
    #[error("graph statistics need at least one beam")]
    NoBeams,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Beam {
    #[serde(rename = "idx")]
    pub nodes: [usize; 2],
    #[serde(rename = "r")]
    pub radius: f64,
}

impl Beam {
    pub fn new(i: usize, j: usize, radius: f64) -> Self {
        Self { nodes: [i, j], radius }
    }
}

/// Node/beam graph describing one unit cell before symmetry expansion.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(try_from = "GraphDoc", into = "GraphDoc")]
pub struct LatticeGraph {
    pub nodes: Vec<Vector3<f64>>,
    pub beams: Vec<Beam>,
}

#[derive(Clone, Serialize, Deserialize)]
struct GraphDoc {
    nodes: Vec<[f64; 3]>,
    beams: Vec<Beam>,
}

impl TryFrom<GraphDoc> for LatticeGraph {
    type Error = GraphError;

    fn try_from(doc: GraphDoc) -> Result<Self, GraphError> {
        for (k, p) in doc.nodes.iter().enumerate() {
            if p.iter().any(|c| !c.is_finite()) {
                return Err(GraphError::NonFinite(format!("node {k}")));
            }
        }
        let n = doc.nodes.len();
        for (k, b) in doc.beams.iter().enumerate() {
            if !b.radius.is_finite() {
                return Err(GraphError::NonFinite(format!("beam {k} radius")));
            }
            for &index in &b.nodes {
                if index >= n {
                    return Err(GraphError::IndexOutOfRange { beam: k, index, nodes: n });
                }
            }
            if b.nodes[0] == b.nodes[1] {
                return Err(GraphError::SelfLoop { beam: k, index: b.nodes[0] });
            }
        }
        Ok(Self { nodes: doc.nodes.into_iter().map(Vector3::from).collect(), beams: doc.beams })
    }
}

impl From<LatticeGraph> for GraphDoc {
    fn from(g: LatticeGraph) -> Self {
        Self { nodes: g.nodes.iter().map(|p| [p.x, p.y, p.z]).collect(), beams: g.beams }
    }
}

impl LatticeGraph {
    pub fn new(nodes: Vec<Vector3<f64>>, beams: Vec<Beam>) -> Self {
        Self { nodes, beams }
    }

    /// Parses the canonical JSON document. Unknown keys are ignored.
    pub fn from_json(text: &str) -> Result<Self, GraphError> {
        let doc: GraphDoc = serde_json::from_str(text)?;
        Self::try_from(doc)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("graph serialization is infallible")
    }

    pub fn beam_length(&self, beam: &Beam) -> f64 {
        (self.nodes[beam.nodes[1]] - self.nodes[beam.nodes[0]]).norm()
    }

    pub fn degrees(&self) -> Vec<usize> {
        let mut deg = vec![0; self.nodes.len()];
        for b in &self.beams {
            deg[b.nodes[0]] += 1;
            deg[b.nodes[1]] += 1;
        }
        deg
    }

    pub fn has_beam_between(&self, i: usize, j: usize) -> bool {
        self.beams
            .iter()
            .any(|b| (b.nodes[0] == i && b.nodes[1] == j) || (b.nodes[0] == j && b.nodes[1] == i))
    }

    /// Number of connected components of the beam graph (isolated nodes count).
    pub fn component_count(&self) -> usize {
        let n = self.nodes.len();
        let mut adj = vec![Vec::new(); n];
        for b in &self.beams {
            adj[b.nodes[0]].push(b.nodes[1]);
            adj[b.nodes[1]].push(b.nodes[0]);
        }
        let mut seen = vec![false; n];
        let mut components = 0;
        let mut queue = VecDeque::new();
        for start in 0..n {
            if seen[start] {
                continue;
            }
            components += 1;
            seen[start] = true;
            queue.push_back(start);
            while let Some(v) = queue.pop_front() {
                for &w in &adj[v] {
                    if !seen[w] {
                        seen[w] = true;
                        queue.push_back(w);
                    }
                }
            }
        }
        components
    }

    /// The example unit cell with 4 nodes and 4 beams forming a cycle.
    pub fn reference_cycle() -> Self {
        Self::new(
            vec![
                Vector3::new(0.24, 0.61, 0.46),
                Vector3::new(0.15, 0.18, 0.19),
                Vector3::new(0.44, 0.57, 0.85),
                Vector3::new(0.64, 0.12, 0.51),
            ],
            vec![
                Beam::new(0, 1, 0.017),
                Beam::new(1, 2, 0.011),
                Beam::new(2, 3, 0.016),
                Beam::new(3, 0, 0.014),
            ],
        )
    }

    /// One strut from the centre to a face centre: the simple cubic frame.
    pub fn simple_cubic(radius: f64) -> Self {
        Self::new(vec![Vector3::zeros(), Vector3::x()], vec![Beam::new(0, 1, radius)])
    }

    /// Centre-to-corner struts.
    pub fn body_centered(radius: f64) -> Self {
        Self::new(vec![Vector3::zeros(), Vector3::repeat(1.0)], vec![Beam::new(0, 1, radius)])
    }

    /// Face-centre to edge-midpoint struts, which close into the octet
    /// pattern under symmetry expansion, plus the cubic frame holding it.
    pub fn octet(radius: f64) -> Self {
        Self::new(
            vec![Vector3::zeros(), Vector3::x(), Vector3::new(1.0, 1.0, 0.0)],
            vec![Beam::new(0, 1, radius), Beam::new(1, 2, radius)],
        )
    }

    /// A connected 15-beam graph mixing axis, face and body struts.
    pub fn branched_seed() -> Self {
        Self::new(
            vec![
                Vector3::new(0.0, 0.0, 0.0),
                Vector3::new(1.0, 0.0, 0.0),
                Vector3::new(1.0, 1.0, 0.0),
                Vector3::new(1.0, 1.0, 1.0),
                Vector3::new(0.5, 0.0, 0.0),
                Vector3::new(0.5, 0.5, 0.0),
                Vector3::new(0.5, 0.5, 0.5),
                Vector3::new(1.0, 0.5, 0.0),
                Vector3::new(1.0, 0.5, 0.5),
                Vector3::new(0.7, 0.3, 0.1),
            ],
            vec![
                Beam::new(0, 4, 0.030),
                Beam::new(4, 1, 0.030),
                Beam::new(1, 7, 0.020),
                Beam::new(7, 2, 0.020),
                Beam::new(2, 3, 0.015),
                Beam::new(0, 6, 0.025),
                Beam::new(6, 3, 0.025),
                Beam::new(4, 5, 0.015),
                Beam::new(5, 2, 0.015),
                Beam::new(5, 6, 0.020),
                Beam::new(7, 8, 0.015),
                Beam::new(8, 3, 0.015),
                Beam::new(9, 4, 0.018),
                Beam::new(9, 6, 0.018),
                Beam::new(9, 8, 0.018),
            ],
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case")]
pub enum Violation {
    CoordinateBound { node: usize, axis: usize, value: f64 },
    RadiusBound { beam: usize, radius: f64 },
    Disconnected { components: usize },
    NoNodes,
}

impl Violation {
    pub fn rule(&self) -> &'static str {
        match self {
            Violation::CoordinateBound { .. } => "coordinate_bound",
            Violation::RadiusBound { .. } => "radius_bound",
            Violation::Disconnected { .. } => "disconnected",
            Violation::NoNodes => "no_nodes",
        }
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::CoordinateBound { node, axis, value } => {
                write!(f, "node {node} axis {axis} coordinate {value} outside [-1.5, 1.5]")
            }
            Violation::RadiusBound { beam, radius } => {
                write!(f, "beam {beam} radius {radius} outside (0, 0.5]")
            }
            Violation::Disconnected { components } => {
                write!(f, "graph is disconnected ({components} components)")
            }
            Violation::NoNodes => write!(f, "graph has no nodes"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub pass: bool,
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    /// Distinct names of the rules that failed, in first-failure order.
    pub fn failed_rules(&self) -> Vec<&'static str> {
        let mut rules: Vec<&'static str> = Vec::new();
        for v in &self.violations {
            if !rules.contains(&v.rule()) {
                rules.push(v.rule());
            }
        }
        rules
    }
}

pub fn validate_graph(g: &LatticeGraph) -> ValidationReport {
    let mut violations = Vec::new();
    if g.nodes.is_empty() {
        violations.push(Violation::NoNodes);
    }
    for (node, p) in g.nodes.iter().enumerate() {
        for axis in 0..3 {
            let value = p[axis];
            if !(-COORD_BOUND..=COORD_BOUND).contains(&value) {
                violations.push(Violation::CoordinateBound { node, axis, value });
            }
        }
    }
    for (beam, b) in g.beams.iter().enumerate() {
        if !(b.radius > 0.0 && b.radius <= MAX_RADIUS) {
            violations.push(Violation::RadiusBound { beam, radius: b.radius });
        }
    }
    if !g.nodes.is_empty() {
        let components = g.component_count();
        if components != 1 {
            violations.push(Violation::Disconnected { components });
        }
    }
    ValidationReport { pass: violations.is_empty(), violations }
}

/// One element of the octahedral group: a signed coordinate permutation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SymmetryOp {
    pub perm: [usize; 3],
    pub signs: [f64; 3],
}

impl SymmetryOp {
    pub fn apply(&self, v: &Vector3<f64>) -> Vector3<f64> {
        // + 0.0 folds -0.0 into 0.0 so mirrored zeros compare bit-equal
        Vector3::new(
            self.signs[0] * v[self.perm[0]] + 0.0,
            self.signs[1] * v[self.perm[1]] + 0.0,
            self.signs[2] * v[self.perm[2]] + 0.0,
        )
    }
}

/// All 48 operations, permutation-major; index 0 is the identity.
pub fn octahedral_group() -> Vec<SymmetryOp> {
    const PERMS: [[usize; 3]; 6] = [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]];
    let mut ops = Vec::with_capacity(48);
    for perm in PERMS {
        for mask in 0..8u32 {
            let sign = |bit: u32| if mask & (1 << bit) != 0 { -1.0 } else { 1.0 };
            ops.push(SymmetryOp { perm, signs: [sign(0), sign(1), sign(2)] });
        }
    }
    ops
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExpandedBeam {
    pub a: Vector3<f64>,
    pub b: Vector3<f64>,
    pub radius: f64,
    pub source: usize,
}

impl ExpandedBeam {
    fn canonical_key(&self) -> [f64; 7] {
        let (lo, hi) = if lex_le(&self.a, &self.b) { (self.a, self.b) } else { (self.b, self.a) };
        [lo.x, lo.y, lo.z, hi.x, hi.y, hi.z, self.radius]
    }
}

fn lex_le(a: &Vector3<f64>, b: &Vector3<f64>) -> bool {
    for k in 0..3 {
        match a[k].total_cmp(&b[k]) {
            std::cmp::Ordering::Less => return true,
            std::cmp::Ordering::Greater => return false,
            std::cmp::Ordering::Equal => {}
        }
    }
    true
}

/// Beam soup of a full unit cell after symmetry expansion.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ExpandedBeamSet {
    pub beams: Vec<ExpandedBeam>,
}

impl ExpandedBeamSet {
    pub fn len(&self) -> usize {
        self.beams.len()
    }

    pub fn is_empty(&self) -> bool {
        self.beams.is_empty()
    }

    /// Merges geometrically identical beams, keeping the first occurrence of
    /// each group in original order.
    pub fn deduplicated(&self) -> ExpandedBeamSet {
        let keys: Vec<[f64; 7]> = self.beams.iter().map(ExpandedBeam::canonical_key).collect();
        let mut order: Vec<usize> = (0..keys.len()).collect();
        order.sort_by(|&i, &j| {
            keys[i]
                .iter()
                .zip(&keys[j])
                .map(|(a, b)| a.total_cmp(b))
                .find(|o| o.is_ne())
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(i.cmp(&j))
        });
        let mut keep = vec![false; keys.len()];
        let mut group_head: Option<usize> = None;
        for &idx in &order {
            let same = group_head.is_some_and(|h| {
                let head_key = &keys[h];
                head_key[..6].iter().zip(&keys[idx][..6]).all(|(a, b)| (a - b).abs() <= DEDUP_TOL)
                    && head_key[6] == keys[idx][6]
            });
            if !same {
                keep[idx] = true;
                group_head = Some(idx);
            }
        }
        // a group's head is its smallest original index because ties sort by index
        ExpandedBeamSet {
            beams: self
                .beams
                .iter()
                .zip(&keep)
                .filter(|(_, &k)| k)
                .map(|(b, _)| *b)
                .collect(),
        }
    }

    pub fn transformed(&self, op: &SymmetryOp) -> ExpandedBeamSet {
        ExpandedBeamSet {
            beams: self
                .beams
                .iter()
                .map(|b| ExpandedBeam { a: op.apply(&b.a), b: op.apply(&b.b), ..*b })
                .collect(),
        }
    }

    /// Set equality up to endpoint order and `DEDUP_TOL`.
    pub fn same_beams_as(&self, other: &ExpandedBeamSet) -> bool {
        if self.len() != other.len() {
            return false;
        }
        let mut a: Vec<[f64; 7]> = self.beams.iter().map(ExpandedBeam::canonical_key).collect();
        let mut b: Vec<[f64; 7]> = other.beams.iter().map(ExpandedBeam::canonical_key).collect();
        let cmp = |x: &[f64; 7], y: &[f64; 7]| {
            x.iter()
                .zip(y)
                .map(|(p, q)| p.total_cmp(q))
                .find(|o| o.is_ne())
                .unwrap_or(std::cmp::Ordering::Equal)
        };
        a.sort_by(cmp);
        b.sort_by(cmp);
        a.iter().zip(&b).all(|(x, y)| x.iter().zip(y).all(|(p, q)| (p - q).abs() <= DEDUP_TOL))
    }
}

pub fn expand_symmetry(g: &LatticeGraph, dedup: bool) -> ExpandedBeamSet {
    let ops = octahedral_group();
    let mut beams = Vec::with_capacity(48 * g.beams.len());
    for (source, beam) in g.beams.iter().enumerate() {
        let a = g.nodes[beam.nodes[0]];
        let b = g.nodes[beam.nodes[1]];
        for op in &ops {
            beams.push(ExpandedBeam { a: op.apply(&a), b: op.apply(&b), radius: beam.radius, source });
        }
    }
    let raw = ExpandedBeamSet { beams };
    if dedup {
        raw.deduplicated()
    } else {
        raw
    }
}

pub const GRAPH_STAT_NAMES: [&str; 15] = [
    "n_nodes",
    "n_beams",
    "mean_len",
    "std_len",
    "min_len",
    "max_len",
    "mean_r",
    "std_r",
    "min_r",
    "max_r",
    "std_x",
    "std_y",
    "std_z",
    "mean_degree",
    "max_degree",
];

/// Fixed-order feature vector; see [`GRAPH_STAT_NAMES`] for the slots.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GraphStats(pub [f64; 15]);

impl GraphStats {
    pub fn get(&self, name: &str) -> Option<f64> {
        GRAPH_STAT_NAMES.iter().position(|n| *n == name).map(|k| self.0[k])
    }
}

struct Summary {
    mean: f64,
    std: f64,
    min: f64,
    max: f64,
}

fn summarize(values: impl Iterator<Item = f64> + Clone) -> Summary {
    let n = values.clone().count() as f64;
    let mean = values.clone().sum::<f64>() / n;
    let var = values.clone().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    Summary {
        mean,
        std: var.sqrt(),
        min: values.clone().fold(f64::INFINITY, f64::min),
        max: values.fold(f64::NEG_INFINITY, f64::max),
    }
}

pub fn graph_statistics(g: &LatticeGraph) -> Result<GraphStats, GraphError> {
    if g.beams.is_empty() {
        return Err(GraphError::NoBeams);
    }
    // sorting makes the floating-point sums independent of node and beam order
    let mut lengths: Vec<f64> = g.beams.iter().map(|b| g.beam_length(b)).collect();
    lengths.sort_by(f64::total_cmp);
    let mut radii: Vec<f64> = g.beams.iter().map(|b| b.radius).collect();
    radii.sort_by(f64::total_cmp);
    let len = summarize(lengths.iter().copied());
    let rad = summarize(radii.iter().copied());
    let mut spread = [0.0; 3];
    for (axis, s) in spread.iter_mut().enumerate() {
        let mut coords: Vec<f64> = g.nodes.iter().map(|p| p[axis]).collect();
        coords.sort_by(f64::total_cmp);
        *s = summarize(coords.iter().copied()).std;
    }
    let degrees = g.degrees();
    let mean_degree = 2.0 * g.beams.len() as f64 / g.nodes.len() as f64;
    let max_degree = degrees.iter().copied().max().unwrap_or(0) as f64;
    Ok(GraphStats([
        g.nodes.len() as f64,
        g.beams.len() as f64,
        len.mean,
        len.std,
        len.min,
        len.max,
        rad.mean,
        rad.std,
        rad.min,
        rad.max,
        spread[0],
        spread[1],
        spread[2],
        mean_degree,
        max_degree,
    ]))
}
