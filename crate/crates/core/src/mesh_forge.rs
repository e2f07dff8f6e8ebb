//! Lattice plate meshing.
//!
//! The expanded beam set is turned into a signed distance field on a periodic
//! unit cell, sampled on a regular grid over the tiled plate, and converted
//! into a conforming tetrahedral mesh by clipping a Kuhn (6-tet per voxel)
//! decomposition against the zero level set. Grid values within a small band of
//! the surface are snapped onto it so that clipping never produces slivers.

use std::collections::HashMap;
use std::io::{self, Read, Write};

use log::warn;
use nalgebra::Vector3;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::lattice_graph::{expand_symmetry, validate_graph, ExpandedBeam, ExpandedBeamSet, LatticeGraph};

/// Plate-coordinate tolerance for tagging clamp and grip nodes.
pub const FACE_TAG_TOL: f64 = 1e-6;
pub const MESH_MAGIC: &[u8; 4] = b"LEIM";
pub const MESH_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum MeshError {
    #[error("beam set is empty")]
    EmptyBeamSet,
    #[error("all beam endpoints coincide; cannot scale")]
    DegenerateBeamSet,
    #[error("graph is invalid: {0}")]
    InvalidGraph(String),
    #[error("resolution {0} is below the minimum of 4 voxels per cell")]
    ResolutionTooLow(usize),
    #[error("field produced no solid")]
    EmptySolid,
    #[error("largest component does not connect the clamp face to the grip face")]
    Percolation(PercolationReport),
    #[error("requested {requested} samples from {available} points")]
    SampleCount { requested: usize, available: usize },
    #[error("mesh format: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// How [`auto_scale`] decides that a beam set fills the unit cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ScaleFit {
    /// Capsule surfaces (endpoints inflated by radius) touch the cell faces.
    Surface,
    /// Beam endpoints touch the cell faces, so struts reaching the boundary
    /// overlap their periodic neighbours with a full cross-section.
    #[default]
    Endpoints,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MeshConfig {
    /// Voxels per unit cell edge.
    pub resolution: usize,
    pub tiling: [usize; 3],
    /// Edge length of one unit cell in plate coordinates.
    pub cell_size: f64,
    /// Smooth-min blend width in unit-cell lengths.
    pub blend: f64,
    pub fit: ScaleFit,
    /// Grid values closer to the surface than this fraction of a voxel are
    /// snapped onto it.
    pub snap_fraction: f64,
    pub dedup: bool,
    /// Struts thinner than this many voxels are thickened to it so the grid
    /// can resolve them. Zero keeps the graph radii.
    pub min_radius_voxels: f64,
}

impl Default for MeshConfig {
    fn default() -> Self {
        Self {
            resolution: 10,
            tiling: [5, 5, 1],
            cell_size: 2.0,
            blend: 0.05,
            fit: ScaleFit::Endpoints,
            snap_fraction: 0.2,
            dedup: true,
            min_radius_voxels: 0.7,
        }
    }
}

impl MeshConfig {
    /// The dataset resolution of 30 voxels per cell.
    pub fn high_resolution() -> Self {
        Self { resolution: 30, ..Self::default() }
    }

    /// Smallest strut radius the mesher uses, in unit-cell lengths.
    pub fn min_radius(&self) -> f64 {
        self.min_radius_voxels / self.resolution as f64
    }

    pub fn plate_extent(&self) -> Vector3<f64> {
        Vector3::new(
            self.tiling[0] as f64 * self.cell_size,
            self.tiling[1] as f64 * self.cell_size,
            self.tiling[2] as f64 * self.cell_size,
        )
    }
}

/// Uniformly scales endpoint coordinates about the cell centre so the set
/// fills the cell `[-0.5, 0.5]^3`. Radii are left unchanged. Returns the
/// scaled set and the factor used.
pub fn auto_scale(beams: &ExpandedBeamSet, fit: ScaleFit) -> Result<(ExpandedBeamSet, f64), MeshError> {
    if beams.is_empty() {
        return Err(MeshError::EmptyBeamSet);
    }
    let reach = |b: &ExpandedBeam| b.a.amax().max(b.b.amax());
    let factor = match fit {
        ScaleFit::Surface => beams
            .beams
            .iter()
            .filter(|b| reach(b) > 0.0)
            .map(|b| (0.5 - b.radius) / reach(b))
            .fold(f64::INFINITY, f64::min),
        ScaleFit::Endpoints => {
            let m = beams.beams.iter().map(reach).fold(0.0, f64::max);
            if m > 0.0 {
                0.5 / m
            } else {
                f64::INFINITY
            }
        }
    };
    if !factor.is_finite() {
        return Err(MeshError::DegenerateBeamSet);
    }
    let scaled = ExpandedBeamSet {
        beams: beams
            .beams
            .iter()
            .map(|b| ExpandedBeam { a: b.a * factor, b: b.b * factor, ..*b })
            .collect(),
    };
    Ok((scaled, factor))
}

/// Polynomial smooth minimum with blend width `k`.
pub fn smooth_min(a: f64, b: f64, k: f64) -> f64 {
    if k <= 0.0 {
        return a.min(b);
    }
    let h = (k - (a - b).abs()).max(0.0) / k;
    a.min(b) - h * h * k * 0.25
}

/// Distance from `p` to the segment `a`-`b`.
pub fn segment_distance(p: &Vector3<f64>, a: &Vector3<f64>, b: &Vector3<f64>) -> f64 {
    let ab = b - a;
    let len2 = ab.norm_squared();
    let t = if len2 > 0.0 { ((p - a).dot(&ab) / len2).clamp(0.0, 1.0) } else { 0.0 };
    (p - (a + ab * t)).norm()
}

#[derive(Debug, Clone, Copy)]
struct Capsule {
    a: Vector3<f64>,
    b: Vector3<f64>,
    radius: f64,
}

/// Periodic capsule-union distance field. Values are in unit-cell lengths and
/// negative inside the solid.
#[derive(Debug, Clone)]
pub struct SdfField {
    capsules: Vec<Capsule>,
    pub blend: f64,
    pub cell_size: f64,
    pub tiling: [usize; 3],
}

impl SdfField {
    pub fn new(beams: &ExpandedBeamSet, blend: f64, cell_size: f64, tiling: [usize; 3]) -> Self {
        Self {
            capsules: beams.beams.iter().map(|b| Capsule { a: b.a, b: b.b, radius: b.radius }).collect(),
            blend,
            cell_size,
            tiling,
        }
    }

    /// Maps a plate coordinate into the local cell frame `[-0.5, 0.5)^3`.
    pub fn wrap(&self, p: &Vector3<f64>) -> Vector3<f64> {
        (p / self.cell_size).map(|t| t.rem_euclid(1.0) - 0.5)
    }

    pub fn eval_local(&self, q: &Vector3<f64>) -> f64 {
        let mut acc = f64::INFINITY;
        for (k, c) in self.capsules.iter().enumerate() {
            let d = segment_distance(q, &c.a, &c.b) - c.radius;
            acc = if k == 0 { d } else { smooth_min(acc, d, self.blend) };
        }
        acc
    }

    pub fn eval(&self, p: &Vector3<f64>) -> f64 {
        self.eval_local(&self.wrap(p))
    }
}

/// Tag of a boundary face.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[repr(u8)]
pub enum FaceTag {
    Free = 0,
    Clamp = 1,
    Grip = 2,
}

impl FaceTag {
    fn from_u8(v: u8) -> Option<Self> {
        match v {
            0 => Some(FaceTag::Free),
            1 => Some(FaceTag::Clamp),
            2 => Some(FaceTag::Grip),
            _ => None,
        }
    }
}

/// Reference-configuration tetrahedral mesh.
#[derive(Debug, Clone, PartialEq)]
pub struct TetMesh {
    pub nodes: Vec<Vector3<f64>>,
    /// Positively oriented node quadruples.
    pub tets: Vec<[usize; 4]>,
    /// Outward oriented boundary triangles.
    pub boundary_faces: Vec<[usize; 3]>,
    pub face_tags: Vec<FaceTag>,
    /// Plate box the mesh was cut from.
    pub domain_min: Vector3<f64>,
    pub domain_max: Vector3<f64>,
}

pub fn tet_signed_volume(p: [&Vector3<f64>; 4]) -> f64 {
    (p[1] - p[0]).cross(&(p[2] - p[0])).dot(&(p[3] - p[0])) / 6.0
}

/// Normalised quality 3 r_in / R_circ: 1 for a regular tetrahedron, 0 when flat.
pub fn tet_quality(p: [&Vector3<f64>; 4]) -> f64 {
    let vol = tet_signed_volume(p).abs();
    if vol == 0.0 {
        return 0.0;
    }
    let area = |a: &Vector3<f64>, b: &Vector3<f64>, c: &Vector3<f64>| 0.5 * (b - a).cross(&(c - a)).norm();
    let surface = area(p[0], p[1], p[2]) + area(p[0], p[1], p[3]) + area(p[0], p[2], p[3]) + area(p[1], p[2], p[3]);
    let inradius = 3.0 * vol / surface;
    let a = p[1] - p[0];
    let b = p[2] - p[0];
    let c = p[3] - p[0];
    let num = a.norm_squared() * b.cross(&c) + b.norm_squared() * c.cross(&a) + c.norm_squared() * a.cross(&b);
    let circumradius = num.norm() / (12.0 * vol);
    3.0 * inradius / circumradius
}

impl TetMesh {
    /// Builds a mesh from nodes and tets, fixing orientation and deriving the
    /// boundary faces and their tags.
    pub fn from_tets(
        nodes: Vec<Vector3<f64>>,
        mut tets: Vec<[usize; 4]>,
        domain_min: Vector3<f64>,
        domain_max: Vector3<f64>,
    ) -> Self {
        for t in tets.iter_mut() {
            if tet_signed_volume([&nodes[t[0]], &nodes[t[1]], &nodes[t[2]], &nodes[t[3]]]) < 0.0 {
                t.swap(2, 3);
            }
        }
        let boundary_faces = boundary_faces_of(&tets);
        let mut mesh = TetMesh {
            nodes,
            tets,
            boundary_faces,
            face_tags: Vec::new(),
            domain_min,
            domain_max,
        };
        mesh.face_tags = mesh.boundary_faces.iter().map(|f| mesh.tag_face(f)).collect();
        mesh
    }

    fn tag_face(&self, f: &[usize; 3]) -> FaceTag {
        if f.iter().all(|&n| self.is_clamp_node(n)) {
            FaceTag::Clamp
        } else if f.iter().all(|&n| self.is_grip_node(n)) {
            FaceTag::Grip
        } else {
            FaceTag::Free
        }
    }

    pub fn is_clamp_node(&self, n: usize) -> bool {
        (self.nodes[n].x - self.domain_min.x).abs() <= FACE_TAG_TOL
    }

    pub fn is_grip_node(&self, n: usize) -> bool {
        (self.nodes[n].x - self.domain_max.x).abs() <= FACE_TAG_TOL
    }

    pub fn clamp_nodes(&self) -> Vec<usize> {
        (0..self.nodes.len()).filter(|&n| self.is_clamp_node(n)).collect()
    }

    pub fn grip_nodes(&self) -> Vec<usize> {
        (0..self.nodes.len()).filter(|&n| self.is_grip_node(n)).collect()
    }

    pub fn tet_points(&self, t: usize) -> [&Vector3<f64>; 4] {
        let q = &self.tets[t];
        [&self.nodes[q[0]], &self.nodes[q[1]], &self.nodes[q[2]], &self.nodes[q[3]]]
    }

    pub fn tet_volume(&self, t: usize) -> f64 {
        tet_signed_volume(self.tet_points(t))
    }

    pub fn total_volume(&self) -> f64 {
        (0..self.tets.len()).map(|t| self.tet_volume(t)).sum()
    }

    pub fn domain_volume(&self) -> f64 {
        let e = self.domain_max - self.domain_min;
        e.x * e.y * e.z
    }

    pub fn volume_fraction(&self) -> f64 {
        self.total_volume() / self.domain_volume()
    }

    pub fn quality_report(&self) -> MeshQualityReport {
        let mut q: Vec<f64> = (0..self.tets.len()).map(|t| tet_quality(self.tet_points(t))).collect();
        q.sort_by(f64::total_cmp);
        let perc = percolation_check(self);
        MeshQualityReport {
            node_count: self.nodes.len(),
            tet_count: self.tets.len(),
            volume_fraction: self.volume_fraction(),
            connected: perc.connected,
            min_quality: q.first().copied().unwrap_or(0.0),
            median_quality: q.get(q.len() / 2).copied().unwrap_or(0.0),
        }
    }

    /// Keeps only the listed tets and drops unreferenced nodes.
    pub fn subset(&self, keep: &[bool]) -> TetMesh {
        let mut remap = vec![usize::MAX; self.nodes.len()];
        let mut nodes = Vec::new();
        let mut tets = Vec::new();
        for (t, q) in self.tets.iter().enumerate() {
            if !keep[t] {
                continue;
            }
            let mut out = [0; 4];
            for (k, &n) in q.iter().enumerate() {
                if remap[n] == usize::MAX {
                    remap[n] = nodes.len();
                    nodes.push(self.nodes[n]);
                }
                out[k] = remap[n];
            }
            tets.push(out);
        }
        TetMesh::from_tets(nodes, tets, self.domain_min, self.domain_max)
    }

    /// SHA-256 over the binary export, hex encoded.
    pub fn content_hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut buf = Vec::new();
        self.write_binary(&mut buf).expect("writing to a Vec cannot fail");
        Sha256::digest(&buf).iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn write_binary<W: Write>(&self, w: &mut W) -> io::Result<()> {
        w.write_all(MESH_MAGIC)?;
        for v in [
            MESH_FORMAT_VERSION,
            self.nodes.len() as u32,
            self.tets.len() as u32,
            self.boundary_faces.len() as u32,
        ] {
            w.write_all(&v.to_le_bytes())?;
        }
        for p in &self.nodes {
            for c in p.iter() {
                w.write_all(&c.to_le_bytes())?;
            }
        }
        for t in &self.tets {
            for &n in t {
                w.write_all(&(n as u32).to_le_bytes())?;
            }
        }
        for f in &self.boundary_faces {
            for &n in f {
                w.write_all(&(n as u32).to_le_bytes())?;
            }
        }
        let tags: Vec<u8> = self.face_tags.iter().map(|t| *t as u8).collect();
        w.write_all(&tags)
    }

    /// Reads a mesh written by [`TetMesh::write_binary`]. The domain box is
    /// not stored and is recovered from the node bounding box.
    pub fn read_binary<R: Read>(r: &mut R) -> Result<TetMesh, MeshError> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MESH_MAGIC {
            return Err(MeshError::Format("bad magic".into()));
        }
        let mut u32s = [0u32; 4];
        for v in u32s.iter_mut() {
            let mut b = [0u8; 4];
            r.read_exact(&mut b)?;
            *v = u32::from_le_bytes(b);
        }
        let [version, n_nodes, n_tets, n_faces] = u32s;
        if version != MESH_FORMAT_VERSION {
            return Err(MeshError::Format(format!("unsupported version {version}")));
        }
        let mut f64buf = [0u8; 8];
        let mut nodes = Vec::with_capacity(n_nodes as usize);
        for _ in 0..n_nodes {
            let mut p = Vector3::zeros();
            for k in 0..3 {
                r.read_exact(&mut f64buf)?;
                p[k] = f64::from_le_bytes(f64buf);
            }
            nodes.push(p);
        }
        let mut read_idx = |count: usize| -> Result<Vec<usize>, MeshError> {
            let mut out = Vec::with_capacity(count);
            let mut b = [0u8; 4];
            for _ in 0..count {
                r.read_exact(&mut b)?;
                let n = u32::from_le_bytes(b) as usize;
                if n >= n_nodes as usize {
                    return Err(MeshError::Format(format!("node index {n} out of range")));
                }
                out.push(n);
            }
            Ok(out)
        };
        let tets: Vec<[usize; 4]> = read_idx(4 * n_tets as usize)?
            .chunks(4)
            .map(|c| [c[0], c[1], c[2], c[3]])
            .collect();
        let boundary_faces: Vec<[usize; 3]> = read_idx(3 * n_faces as usize)?
            .chunks(3)
            .map(|c| [c[0], c[1], c[2]])
            .collect();
        let mut tags = vec![0u8; n_faces as usize];
        r.read_exact(&mut tags)?;
        let face_tags = tags
            .into_iter()
            .map(|t| FaceTag::from_u8(t).ok_or_else(|| MeshError::Format(format!("bad face tag {t}"))))
            .collect::<Result<Vec<_>, _>>()?;
        let (domain_min, domain_max) = bounding_box(&nodes);
        Ok(TetMesh { nodes, tets, boundary_faces, face_tags, domain_min, domain_max })
    }

    pub fn summary(&self) -> MeshSummary {
        let (lo, hi) = bounding_box(&self.nodes);
        MeshSummary {
            nodes: self.nodes.len(),
            tets: self.tets.len(),
            boundary_faces: self.boundary_faces.len(),
            volume_fraction: self.volume_fraction(),
            bbox_min: [lo.x, lo.y, lo.z],
            bbox_max: [hi.x, hi.y, hi.z],
        }
    }
}

fn bounding_box(nodes: &[Vector3<f64>]) -> (Vector3<f64>, Vector3<f64>) {
    let mut lo = Vector3::repeat(f64::INFINITY);
    let mut hi = Vector3::repeat(f64::NEG_INFINITY);
    for p in nodes {
        lo = lo.inf(p);
        hi = hi.sup(p);
    }
    (lo, hi)
}

/// JSON summary written next to binary mesh exports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeshSummary {
    pub nodes: usize,
    pub tets: usize,
    pub boundary_faces: usize,
    pub volume_fraction: f64,
    pub bbox_min: [f64; 3],
    pub bbox_max: [f64; 3],
}

fn boundary_faces_of(tets: &[[usize; 4]]) -> Vec<[usize; 3]> {
    const LOCAL: [[usize; 3]; 4] = [[0, 2, 1], [0, 1, 3], [0, 3, 2], [1, 2, 3]];
    let mut seen: HashMap<[usize; 3], (u32, [usize; 3])> = HashMap::new();
    let mut order = Vec::new();
    for t in tets {
        for lf in LOCAL {
            let face = [t[lf[0]], t[lf[1]], t[lf[2]]];
            let mut key = face;
            key.sort_unstable();
            let entry = seen.entry(key).or_insert_with(|| {
                order.push(key);
                (0, face)
            });
            entry.0 += 1;
        }
    }
    order
        .into_iter()
        .filter_map(|k| {
            let (count, face) = seen[&k];
            (count == 1).then_some(face)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeshQualityReport {
    pub node_count: usize,
    pub tet_count: usize,
    pub volume_fraction: f64,
    pub connected: bool,
    pub min_quality: f64,
    pub median_quality: f64,
}

/// Regular sampling grid: `dims` voxels of edge `spacing` starting at `origin`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridSpec {
    pub origin: Vector3<f64>,
    pub spacing: f64,
    pub dims: [usize; 3],
}

impl GridSpec {
    pub fn vertex_dims(&self) -> [usize; 3] {
        [self.dims[0] + 1, self.dims[1] + 1, self.dims[2] + 1]
    }

    pub fn vertex_index(&self, i: usize, j: usize, k: usize) -> usize {
        let [vx, vy, _] = self.vertex_dims();
        i + vx * (j + vy * k)
    }

    pub fn vertex_count(&self) -> usize {
        let [vx, vy, vz] = self.vertex_dims();
        vx * vy * vz
    }

    pub fn vertex_position(&self, i: usize, j: usize, k: usize) -> Vector3<f64> {
        self.origin + Vector3::new(i as f64, j as f64, k as f64) * self.spacing
    }

    pub fn max_corner(&self) -> Vector3<f64> {
        self.vertex_position(self.dims[0], self.dims[1], self.dims[2])
    }
}

/// Samples `f` at every grid vertex.
pub fn sample_field(grid: &GridSpec, f: impl Fn(&Vector3<f64>) -> f64) -> Vec<f64> {
    let [vx, vy, vz] = grid.vertex_dims();
    let mut values = Vec::with_capacity(grid.vertex_count());
    for k in 0..vz {
        for j in 0..vy {
            for i in 0..vx {
                values.push(f(&grid.vertex_position(i, j, k)));
            }
        }
    }
    values
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
enum Side {
    In,
    On,
    Out,
}

struct Clipper<'a> {
    grid: &'a GridSpec,
    values: &'a [f64],
    sides: Vec<Side>,
    grid_node: Vec<usize>,
    cut_node: HashMap<(usize, usize), usize>,
    nodes: Vec<Vector3<f64>>,
    tets: Vec<[usize; 4]>,
}

const KUHN: [[usize; 4]; 6] = [
    [0, 1, 3, 7],
    [0, 1, 5, 7],
    [0, 2, 3, 7],
    [0, 2, 6, 7],
    [0, 4, 5, 7],
    [0, 4, 6, 7],
];

impl<'a> Clipper<'a> {
    fn position(&self, v: usize) -> Vector3<f64> {
        let [vx, vy, _] = self.grid.vertex_dims();
        self.grid.vertex_position(v % vx, (v / vx) % vy, v / (vx * vy))
    }

    fn grid_vertex(&mut self, v: usize) -> usize {
        if self.grid_node[v] == usize::MAX {
            self.grid_node[v] = self.nodes.len();
            self.nodes.push(self.position(v));
        }
        self.grid_node[v]
    }

    fn cut_vertex(&mut self, inside: usize, outside: usize) -> usize {
        let key = (inside.min(outside), inside.max(outside));
        if let Some(&n) = self.cut_node.get(&key) {
            return n;
        }
        let pa = self.position(inside);
        let pb = self.position(outside);
        let (fa, fb) = (self.values[inside], self.values[outside]);
        let t = fa / (fa - fb);
        let n = self.nodes.len();
        self.nodes.push(pa + (pb - pa) * t);
        self.cut_node.insert(key, n);
        n
    }

    fn emit(&mut self, t: [usize; 4]) {
        let vol = tet_signed_volume([&self.nodes[t[0]], &self.nodes[t[1]], &self.nodes[t[2]], &self.nodes[t[3]]]);
        let floor = 1e-10 * self.grid.spacing.powi(3);
        if vol > floor {
            self.tets.push(t);
        } else if vol < -floor {
            self.tets.push([t[0], t[1], t[3], t[2]]);
        }
    }

    /// Splits a triangular prism (bottom 0,1,2; top 3,4,5; lateral i to i+3)
    /// so that every quad diagonal passes through its lowest node index.
    fn emit_prism(&mut self, p: [usize; 6]) {
        const ROT: [[usize; 6]; 6] = [
            [0, 1, 2, 3, 4, 5],
            [1, 2, 0, 4, 5, 3],
            [2, 0, 1, 5, 3, 4],
            [3, 5, 4, 0, 2, 1],
            [4, 3, 5, 1, 0, 2],
            [5, 4, 3, 2, 1, 0],
        ];
        let m = (0..6).min_by_key(|&k| p[k]).unwrap();
        let v: Vec<usize> = ROT[m].iter().map(|&k| p[k]).collect();
        if v[1].min(v[5]) < v[2].min(v[4]) {
            self.emit([v[0], v[1], v[2], v[5]]);
            self.emit([v[0], v[1], v[5], v[4]]);
        } else {
            self.emit([v[0], v[1], v[2], v[4]]);
            self.emit([v[0], v[4], v[2], v[5]]);
        }
        self.emit([v[0], v[4], v[5], v[3]]);
    }

    fn clip(&mut self, corners: [usize; 4]) {
        let sides = corners.map(|c| self.sides[c]);
        let n_in = sides.iter().filter(|s| **s == Side::In).count();
        let n_out = sides.iter().filter(|s| **s == Side::Out).count();
        if n_out == 0 {
            let t = corners.map(|c| self.grid_vertex(c));
            self.emit(t);
            return;
        }
        if n_in == 0 {
            return;
        }
        let ins: Vec<usize> = (0..4).filter(|&k| sides[k] == Side::In).map(|k| corners[k]).collect();
        let ons: Vec<usize> = (0..4).filter(|&k| sides[k] == Side::On).map(|k| corners[k]).collect();
        let outs: Vec<usize> = (0..4).filter(|&k| sides[k] == Side::Out).map(|k| corners[k]).collect();
        match (n_in, ons.len()) {
            (1, _) => {
                let a = ins[0];
                let mut t = [self.grid_vertex(a), 0, 0, 0];
                let mut k = 1;
                for &c in &corners {
                    match self.sides[c] {
                        Side::In => {}
                        Side::On => {
                            t[k] = self.grid_vertex(c);
                            k += 1;
                        }
                        Side::Out => {
                            t[k] = self.cut_vertex(a, c);
                            k += 1;
                        }
                    }
                }
                self.emit(t);
            }
            (2, 0) => {
                let (a, b) = (ins[0], ins[1]);
                let (c, d) = (outs[0], outs[1]);
                let p = [
                    self.grid_vertex(a),
                    self.cut_vertex(a, c),
                    self.cut_vertex(a, d),
                    self.grid_vertex(b),
                    self.cut_vertex(b, c),
                    self.cut_vertex(b, d),
                ];
                self.emit_prism(p);
            }
            (2, 1) => {
                let (a, b, c, d) = (ins[0], ins[1], ons[0], outs[0]);
                let apex = self.grid_vertex(c);
                let na = self.grid_vertex(a);
                let nb = self.grid_vertex(b);
                let ad = self.cut_vertex(a, d);
                let bd = self.cut_vertex(b, d);
                // quad a-b-bd-ad, split through its lowest index
                let lowest = *[na, nb, ad, bd].iter().min().unwrap();
                if lowest == na || lowest == bd {
                    self.emit([apex, na, nb, bd]);
                    self.emit([apex, na, bd, ad]);
                } else {
                    self.emit([apex, na, nb, ad]);
                    self.emit([apex, nb, bd, ad]);
                }
            }
            (3, 0) => {
                let d = outs[0];
                let p = [
                    self.grid_vertex(ins[0]),
                    self.grid_vertex(ins[1]),
                    self.grid_vertex(ins[2]),
                    self.cut_vertex(ins[0], d),
                    self.cut_vertex(ins[1], d),
                    self.cut_vertex(ins[2], d),
                ];
                self.emit_prism(p);
            }
            _ => unreachable!("n_in + n_on + n_out = 4 with n_in, n_out >= 1"),
        }
    }
}

/// Tetrahedralises `{x : f(x) <= 0}` from grid samples of `f`.
///
/// `values` are signed distances in grid units (same length scale as
/// `grid.spacing`); values within `snap_fraction * spacing` of zero are
/// treated as lying on the surface.
pub fn mesh_scalar_field(grid: &GridSpec, values: &[f64], snap_fraction: f64) -> Result<TetMesh, MeshError> {
    assert_eq!(values.len(), grid.vertex_count(), "one sample per grid vertex");
    let band = snap_fraction * grid.spacing;
    let sides = values
        .iter()
        .map(|&v| {
            if v.abs() <= band {
                Side::On
            } else if v < 0.0 {
                Side::In
            } else {
                Side::Out
            }
        })
        .collect();
    let mut clipper = Clipper {
        grid,
        values,
        sides,
        grid_node: vec![usize::MAX; values.len()],
        cut_node: HashMap::new(),
        nodes: Vec::new(),
        tets: Vec::new(),
    };
    for k in 0..grid.dims[2] {
        for j in 0..grid.dims[1] {
            for i in 0..grid.dims[0] {
                let corner = |b: usize| grid.vertex_index(i + (b & 1), j + ((b >> 1) & 1), k + ((b >> 2) & 1));
                for tet in KUHN {
                    clipper.clip(tet.map(corner));
                }
            }
        }
    }
    if clipper.tets.is_empty() {
        return Err(MeshError::EmptySolid);
    }
    let Clipper { nodes, tets, .. } = clipper;
    Ok(TetMesh::from_tets(nodes, tets, grid.origin, grid.max_corner()))
}

/// Result of the connectivity check on a tet mesh.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PercolationReport {
    /// All tets form a single node-connected component.
    pub connected: bool,
    /// The largest component touches both the clamp and the grip face.
    pub spans: bool,
    pub components: usize,
    /// Tets per component, largest first.
    pub component_sizes: Vec<usize>,
}

struct UnionFind {
    parent: Vec<usize>,
}

impl UnionFind {
    fn new(n: usize) -> Self {
        Self { parent: (0..n).collect() }
    }

    fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            let (lo, hi) = (ra.min(rb), ra.max(rb));
            self.parent[hi] = lo;
        }
    }
}

/// Component label per tet (labels ordered by size, largest = 0, ties by
/// first tet).
fn tet_components(mesh: &TetMesh) -> (Vec<usize>, Vec<usize>) {
    let mut uf = UnionFind::new(mesh.nodes.len());
    for t in &mesh.tets {
        uf.union(t[0], t[1]);
        uf.union(t[0], t[2]);
        uf.union(t[0], t[3]);
    }
    let mut root_label: HashMap<usize, usize> = HashMap::new();
    let mut sizes: Vec<usize> = Vec::new();
    let mut first_seen = Vec::new();
    let raw: Vec<usize> = mesh
        .tets
        .iter()
        .enumerate()
        .map(|(ti, t)| {
            let r = uf.find(t[0]);
            let next = sizes.len();
            let l = *root_label.entry(r).or_insert(next);
            if l == sizes.len() {
                sizes.push(0);
                first_seen.push(ti);
            }
            sizes[l] += 1;
            l
        })
        .collect();
    let mut order: Vec<usize> = (0..sizes.len()).collect();
    order.sort_by(|&a, &b| sizes[b].cmp(&sizes[a]).then(first_seen[a].cmp(&first_seen[b])));
    let mut relabel = vec![0; sizes.len()];
    for (new, &old) in order.iter().enumerate() {
        relabel[old] = new;
    }
    let labels = raw.into_iter().map(|l| relabel[l]).collect();
    let sorted_sizes = order.iter().map(|&l| sizes[l]).collect();
    (labels, sorted_sizes)
}

pub fn percolation_check(mesh: &TetMesh) -> PercolationReport {
    if mesh.tets.is_empty() {
        return PercolationReport { connected: false, spans: false, components: 0, component_sizes: vec![] };
    }
    let (labels, sizes) = tet_components(mesh);
    let mut clamp = false;
    let mut grip = false;
    for (t, q) in mesh.tets.iter().enumerate() {
        if labels[t] != 0 {
            continue;
        }
        clamp |= q.iter().any(|&n| mesh.is_clamp_node(n));
        grip |= q.iter().any(|&n| mesh.is_grip_node(n));
    }
    PercolationReport {
        connected: sizes.len() == 1,
        spans: clamp && grip,
        components: sizes.len(),
        component_sizes: sizes,
    }
}

/// Drops every component but the largest; fails if it does not span the
/// clamp and grip faces.
pub fn retain_spanning_component(mesh: &TetMesh) -> Result<(TetMesh, PercolationReport), MeshError> {
    let report = percolation_check(mesh);
    if !report.spans {
        return Err(MeshError::Percolation(report));
    }
    if report.connected {
        return Ok((mesh.clone(), report));
    }
    let (labels, _) = tet_components(mesh);
    let dropped: usize = report.component_sizes[1..].iter().sum();
    warn!(
        "dropping {} floating fragment(s) with {} tets",
        report.components - 1,
        dropped
    );
    let keep: Vec<bool> = labels.iter().map(|&l| l == 0).collect();
    Ok((mesh.subset(&keep), report))
}

/// Grid over the tiled plate for a configuration.
pub fn plate_grid(cfg: &MeshConfig) -> GridSpec {
    GridSpec {
        origin: Vector3::zeros(),
        spacing: cfg.cell_size / cfg.resolution as f64,
        dims: [
            cfg.tiling[0] * cfg.resolution,
            cfg.tiling[1] * cfg.resolution,
            cfg.tiling[2] * cfg.resolution,
        ],
    }
}

/// Distance field of a graph after symmetry expansion and scaling.
pub fn graph_field(g: &LatticeGraph, cfg: &MeshConfig) -> Result<SdfField, MeshError> {
    let expanded = expand_symmetry(g, cfg.dedup);
    let (mut scaled, _) = auto_scale(&expanded, cfg.fit)?;
    let floor = cfg.min_radius();
    for b in scaled.beams.iter_mut() {
        b.radius = b.radius.max(floor);
    }
    Ok(SdfField::new(&scaled, cfg.blend, cfg.cell_size, cfg.tiling))
}

/// Samples a periodic field on the plate grid. Each distinct in-cell grid
/// position is evaluated once, so tiles are bit-identical copies.
pub fn sample_periodic(field: &SdfField, cfg: &MeshConfig) -> Vec<f64> {
    let res = cfg.resolution;
    let mut cell = Vec::with_capacity(res * res * res);
    for k in 0..res {
        for j in 0..res {
            for i in 0..res {
                let q = Vector3::new(i as f64, j as f64, k as f64) / res as f64 - Vector3::repeat(0.5);
                cell.push(field.eval_local(&q));
            }
        }
    }
    let grid = plate_grid(cfg);
    let [vx, vy, vz] = grid.vertex_dims();
    let mut values = Vec::with_capacity(grid.vertex_count());
    for k in 0..vz {
        for j in 0..vy {
            for i in 0..vx {
                let local = (i % res) + res * ((j % res) + res * (k % res));
                // distances are in cell lengths; the grid is in plate units
                values.push(cell[local] * cfg.cell_size);
            }
        }
    }
    values
}

/// Full pipeline from graph to a percolating plate mesh.
pub fn build_plate_mesh(g: &LatticeGraph, cfg: &MeshConfig) -> Result<(TetMesh, MeshQualityReport), MeshError> {
    let report = validate_graph(g);
    if !report.pass {
        let msg: Vec<String> = report.violations.iter().map(|v| v.to_string()).collect();
        return Err(MeshError::InvalidGraph(msg.join("; ")));
    }
    if cfg.resolution < 4 {
        return Err(MeshError::ResolutionTooLow(cfg.resolution));
    }
    let field = graph_field(g, cfg)?;
    let values = sample_periodic(&field, cfg);
    let raw = mesh_scalar_field(&plate_grid(cfg), &values, cfg.snap_fraction)?;
    let (mesh, _) = retain_spanning_component(&raw)?;
    let quality = mesh.quality_report();
    Ok((mesh, quality))
}

/// Solid box `[0, extent]` split into `dims` voxels of 6 tets each.
pub fn block_mesh(extent: Vector3<f64>, dims: [usize; 3]) -> TetMesh {
    let spacing = extent.x / dims[0] as f64;
    let grid = GridSpec { origin: Vector3::zeros(), spacing, dims };
    // non-cubic voxels: sample a constant field and rescale afterwards
    let values = vec![-1.0; grid.vertex_count()];
    let mut mesh = mesh_scalar_field(&grid, &values, 0.0).expect("a full block is never empty");
    let scale = Vector3::new(
        1.0,
        extent.y / (dims[1] as f64 * spacing),
        extent.z / (dims[2] as f64 * spacing),
    );
    for p in mesh.nodes.iter_mut() {
        *p = p.component_mul(&scale);
    }
    mesh.domain_max = extent;
    mesh
}

/// Greedy furthest point sampling starting from the point closest to the
/// centroid.
pub fn fps_sample(points: &[Vector3<f64>], count: usize, seed: u64) -> Result<Vec<usize>, MeshError> {
    fps_sample_with_tail(points, count, 0, seed)
}

/// Furthest point sampling of `fps_count` points followed by `tail_count`
/// points drawn uniformly (seeded) from the remainder.
pub fn fps_sample_with_tail(
    points: &[Vector3<f64>],
    fps_count: usize,
    tail_count: usize,
    seed: u64,
) -> Result<Vec<usize>, MeshError> {
    let requested = fps_count + tail_count;
    if requested > points.len() {
        return Err(MeshError::SampleCount { requested, available: points.len() });
    }
    let mut picked = Vec::with_capacity(requested);
    if fps_count > 0 {
        let centroid = points.iter().fold(Vector3::zeros(), |acc, p| acc + p) / points.len() as f64;
        let start = nearest(points, &centroid);
        let mut dist: Vec<f64> = points.iter().map(|p| (p - points[start]).norm_squared()).collect();
        picked.push(start);
        dist[start] = f64::NEG_INFINITY;
        while picked.len() < fps_count {
            let mut best = 0;
            for k in 1..dist.len() {
                if dist[k] > dist[best] {
                    best = k;
                }
            }
            picked.push(best);
            dist[best] = f64::NEG_INFINITY;
            for (k, p) in points.iter().enumerate() {
                if dist[k] > f64::NEG_INFINITY {
                    dist[k] = dist[k].min((p - points[best]).norm_squared());
                }
            }
        }
    }
    if tail_count > 0 {
        let mut taken = vec![false; points.len()];
        for &k in &picked {
            taken[k] = true;
        }
        let mut rest: Vec<usize> = (0..points.len()).filter(|&k| !taken[k]).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rest.shuffle(&mut rng);
        picked.extend_from_slice(&rest[..tail_count]);
    }
    Ok(picked)
}

fn nearest(points: &[Vector3<f64>], target: &Vector3<f64>) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (k, p) in points.iter().enumerate() {
        let d = (p - target).norm_squared();
        if d < best_d {
            best = k;
            best_d = d;
        }
    }
    best
}
