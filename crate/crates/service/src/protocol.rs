//! JSON bodies and stream messages exchanged with clients.

use std::fmt;
use std::str::FromStr;

use archplate_core::constitutive::Material;
use archplate_core::design_search::{SearchConfig, SearchLog};
use archplate_core::fem_solver::{Reaction, SolverConfig};
use archplate_core::lattice_graph::LatticeGraph;
use archplate_core::mesh_forge::MeshConfig;
use archplate_core::world_env::{Frame, Regime};
use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

/// WebSocket subprotocol selecting binary frame messages.
pub const BINARY_SUBPROTOCOL: &str = "archplate.frames.binary.v1";
pub const DEFAULT_COARSE_COUNT: usize = 512;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum GeometryRequest {
    Graph {
        graph: LatticeGraph,
        #[serde(default)]
        mesh: MeshConfig,
    },
    /// Explicit tetrahedral mesh; the plate box is its bounding box.
    Mesh { nodes: Vec<[f64; 3]>, tets: Vec<[usize; 4]> },
    /// Structured solid block with one corner at the origin.
    Block { extent: [f64; 3], dims: [usize; 3] },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CreateSessionRequest {
    pub geometry: GeometryRequest,
    pub material: Material,
    /// Defaults to dynamic for rate-dependent materials, quasistatic otherwise.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub regime: Option<Regime>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub solver: Option<SolverConfig>,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CreateSessionResponse {
    pub id: String,
    pub node_count: usize,
    pub tet_count: usize,
    pub regime: Regime,
    pub frame: FrameSummary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StepRequest {
    pub action: [f64; 4],
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WireReaction {
    pub force: [f64; 3],
    pub torque: f64,
}

impl From<&Reaction> for WireReaction {
    fn from(r: &Reaction) -> Self {
        Self { force: [r.force.x, r.force.y, r.force.z], torque: r.torque }
    }
}

/// Scalars of one frame, returned by the step endpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameSummary {
    pub step: usize,
    pub cumulative_action: [f64; 4],
    pub reaction: WireReaction,
    pub work_increment: [f64; 4],
    pub work: [f64; 4],
    pub max_von_mises: f32,
}

impl From<&Frame> for FrameSummary {
    fn from(f: &Frame) -> Self {
        Self {
            step: f.step,
            cumulative_action: f.cumulative_action,
            reaction: (&f.reaction).into(),
            work_increment: f.work_increment,
            work: f.work,
            max_von_mises: f.von_mises.iter().copied().fold(0.0, f32::max),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum Decimation {
    Full,
    Coarse { count: usize },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParseDecimationError(pub String);

impl fmt::Display for ParseDecimationError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "unrecognised decimation {:?}; expected full, coarse or coarse(N)", self.0)
    }
}

impl std::error::Error for ParseDecimationError {}

/// Query form: `full`, `coarse` or `coarse(N)`.
impl FromStr for Decimation {
    type Err = ParseDecimationError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let err = || ParseDecimationError(s.to_string());
        match s.trim() {
            "full" => Ok(Decimation::Full),
            "coarse" => Ok(Decimation::Coarse { count: DEFAULT_COARSE_COUNT }),
            other => {
                let inner = other.strip_prefix("coarse(").and_then(|r| r.strip_suffix(')')).ok_or_else(err)?;
                match inner.trim().parse::<usize>() {
                    Ok(count) if count > 0 => Ok(Decimation::Coarse { count }),
                    _ => Err(err()),
                }
            }
        }
    }
}

impl fmt::Display for Decimation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Decimation::Full => write!(f, "full"),
            Decimation::Coarse { count } => write!(f, "coarse({count})"),
        }
    }
}

/// Deformed positions and von Mises values of one frame, restricted to the
/// subscribed node subset. Float arrays are little-endian f32, base64 encoded.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireFrame {
    pub step: usize,
    pub cumulative_action: [f64; 4],
    pub decimation: Decimation,
    pub node_count: usize,
    pub positions: String,
    pub von_mises: String,
    pub reaction: WireReaction,
    pub work: [f64; 4],
}

impl WireFrame {
    /// `indices` selects nodes; `None` sends all of them.
    pub fn build(frame: &Frame, rest: &[Vector3<f64>], decimation: Decimation, indices: Option<&[usize]>) -> Self {
        let (positions, von_mises) = frame_arrays(frame, rest, indices);
        Self {
            step: frame.step,
            cumulative_action: frame.cumulative_action,
            decimation,
            node_count: von_mises.len(),
            positions: encode_f32(&positions),
            von_mises: encode_f32(&von_mises),
            reaction: (&frame.reaction).into(),
            work: frame.work,
        }
    }

    pub fn positions(&self) -> Result<Vec<f32>, base64::DecodeError> {
        decode_f32(&self.positions)
    }

    pub fn von_mises(&self) -> Result<Vec<f32>, base64::DecodeError> {
        decode_f32(&self.von_mises)
    }
}

/// Flattened deformed positions (xyz per node) and von Mises values.
pub fn frame_arrays(frame: &Frame, rest: &[Vector3<f64>], indices: Option<&[usize]>) -> (Vec<f32>, Vec<f32>) {
    let all: Vec<usize>;
    let indices = match indices {
        Some(i) => i,
        None => {
            all = (0..rest.len()).collect();
            &all
        }
    };
    let mut positions = Vec::with_capacity(3 * indices.len());
    let mut vm = Vec::with_capacity(indices.len());
    for &n in indices {
        let u = frame.displacement.get(n).copied().unwrap_or([0.0; 3]);
        for k in 0..3 {
            positions.push((rest[n][k] + f64::from(u[k])) as f32);
        }
        vm.push(frame.von_mises.get(n).copied().unwrap_or(0.0));
    }
    (positions, vm)
}

pub fn encode_f32(values: &[f32]) -> String {
    let bytes: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
    STANDARD.encode(bytes)
}

pub fn decode_f32(text: &str) -> Result<Vec<f32>, base64::DecodeError> {
    let bytes = STANDARD.decode(text)?;
    if bytes.len() % 4 != 0 {
        return Err(base64::DecodeError::InvalidLength(bytes.len()));
    }
    Ok(bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect())
}

/// Binary frame message: `u32` header length, the JSON header (a
/// [`WireFrame`] with empty array strings), then the raw f32 positions and
/// von Mises values.
pub fn encode_binary_frame(frame: &Frame, rest: &[Vector3<f64>], decimation: Decimation, indices: Option<&[usize]>) -> Vec<u8> {
    let (positions, vm) = frame_arrays(frame, rest, indices);
    let header = WireFrame {
        step: frame.step,
        cumulative_action: frame.cumulative_action,
        decimation,
        node_count: vm.len(),
        positions: String::new(),
        von_mises: String::new(),
        reaction: (&frame.reaction).into(),
        work: frame.work,
    };
    let json = serde_json::to_vec(&header).expect("wire frame serialization is infallible");
    let mut out = Vec::with_capacity(4 + json.len() + 4 * (positions.len() + vm.len()));
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend(positions.iter().chain(&vm).flat_map(|v| v.to_le_bytes()));
    out
}

/// Splits a binary frame message into its header and float arrays.
pub fn decode_binary_frame(bytes: &[u8]) -> Option<(WireFrame, Vec<f32>, Vec<f32>)> {
    let len = u32::from_le_bytes(bytes.get(..4)?.try_into().ok()?) as usize;
    let header: WireFrame = serde_json::from_slice(bytes.get(4..4 + len)?).ok()?;
    let floats = bytes.get(4 + len..)?;
    let n = header.node_count;
    if floats.len() != 16 * n {
        return None;
    }
    let all: Vec<f32> = floats.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
    let vm = all[3 * n..].to_vec();
    let mut positions = all;
    positions.truncate(3 * n);
    Some((header, positions, vm))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum StreamMessage {
    /// First message on every stream. `index_map` lists the mesh node of each
    /// entry in coarse frames and stays fixed for the session.
    Subscribed {
        session: String,
        decimation: Decimation,
        total_nodes: usize,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        index_map: Option<Vec<usize>>,
        from_step: usize,
        binary: bool,
    },
    Frame(WireFrame),
    Closed { reason: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeleteSessionResponse {
    pub id: String,
    pub frames: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trajectory: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub last_good: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rules: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub report: Option<serde_json::Value>,
}

impl ErrorBody {
    pub fn new(error: impl Into<String>) -> Self {
        Self { error: error.into(), last_good: None, rules: None, report: None }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvaluatorKind {
    #[default]
    Fem,
    /// Closed-form strut stiffness sums, no meshing.
    Proxy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SearchRequest {
    pub seed: LatticeGraph,
    #[serde(default)]
    pub config: SearchConfig,
    #[serde(default)]
    pub evaluator: EvaluatorKind,
    /// Mesh settings for the FEM evaluator.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mesh: Option<MeshConfig>,
    /// A second start with the same key is refused while the first exists.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub job_key: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchCreated {
    pub id: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobState {
    Running,
    Completed,
    Cancelled,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchStatus {
    pub id: String,
    pub state: JobState,
    /// Last committed iteration (0 once the seed is evaluated).
    pub iteration: Option<usize>,
    pub best_score: Option<f64>,
    pub best_scores: Vec<f64>,
    pub candidates: usize,
    pub scored: usize,
    pub diverged: usize,
    pub winner: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl SearchStatus {
    pub fn from_log(id: &str, state: JobState, log: &SearchLog, error: Option<String>) -> Self {
        Self {
            id: id.to_string(),
            state,
            iteration: log.iterations.last().map(|r| r.iteration),
            best_score: log.iterations.last().map(|r| r.best_score),
            best_scores: log.best_scores(),
            candidates: log.candidates.len(),
            scored: log.candidates.iter().filter(|c| c.score.is_some()).count(),
            diverged: log.candidates.iter().filter(|c| c.diverged).count(),
            winner: log.winner,
            error,
        }
    }
}
