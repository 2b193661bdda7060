//! Deformable wireframe vehicle model.
//!
//! Twelve shape parameters define an 8-point side profile that is mirrored
//! across the longitudinal plane, giving 16 vertices and 23 edges. Three
//! pose parameters place it on the ground plane. The model is scored
//! against image gradients (FES) and fitted with EMNA.

mod fes;
mod fit;
mod project;

use std::io::{BufRead, Write};
use std::path::Path;

use nalgebra::{Vector2, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{wrap_angle, GeometryError, Point3};

pub use fes::{compute_fes, compute_fes_with, EdgeScore, FesResult, GradientField};
pub use fit::{fit_model_emna, score, FitConfig, FitResult};
pub use project::{front_facing, pose_and_project, posed_vertices, projected_bbox, ProjectedSegment};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum VehicleModelError {
    #[error("invalid shape: {0}")]
    InvalidShape(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("empty gradient field")]
    EmptyField,
    #[error("no feasible sample found")]
    NoFeasibleSample,
    #[error("parse error: {0}")]
    Parse(String),
    #[error("i/o error: {0}")]
    Io(String),
}

impl From<std::io::Error> for VehicleModelError {
    fn from(e: std::io::Error) -> Self {
        VehicleModelError::Io(e.to_string())
    }
}

/// Shape parameters in meters. Heights are measured from the bottom of the
/// body; `ground_clearance` lifts the body off the ground.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShapeParams {
    pub length: f64,
    pub width: f64,
    pub roof_height: f64,
    pub hood_height: f64,
    pub trunk_height: f64,
    pub hood_length: f64,
    pub trunk_length: f64,
    /// Horizontal run of the windshield.
    pub windshield_base_offset: f64,
    /// Drop of the windshield top below the roof.
    pub windshield_top_offset: f64,
    /// Horizontal run of the rear window.
    pub rear_window_base_offset: f64,
    pub roof_length: f64,
    pub ground_clearance: f64,
}

pub const SHAPE_FIELDS: [&str; 12] = [
    "length",
    "width",
    "roof_height",
    "hood_height",
    "trunk_height",
    "hood_length",
    "trunk_length",
    "windshield_base_offset",
    "windshield_top_offset",
    "rear_window_base_offset",
    "roof_length",
    "ground_clearance",
];

impl ShapeParams {
    pub fn to_array(&self) -> [f64; 12] {
        [
            self.length,
            self.width,
            self.roof_height,
            self.hood_height,
            self.trunk_height,
            self.hood_length,
            self.trunk_length,
            self.windshield_base_offset,
            self.windshield_top_offset,
            self.rear_window_base_offset,
            self.roof_length,
            self.ground_clearance,
        ]
    }

    pub fn from_array(a: &[f64]) -> Self {
        Self {
            length: a[0],
            width: a[1],
            roof_height: a[2],
            hood_height: a[3],
            trunk_height: a[4],
            hood_length: a[5],
            trunk_length: a[6],
            windshield_base_offset: a[7],
            windshield_top_offset: a[8],
            rear_window_base_offset: a[9],
            roof_length: a[10],
            ground_clearance: a[11],
        }
    }

    pub fn windshield_top_height(&self) -> f64 {
        self.roof_height - self.windshield_top_offset
    }

    /// Length left in front of the hood (bumper overhang).
    pub fn front_overhang(&self) -> f64 {
        self.length
            - (self.hood_length
                + self.windshield_base_offset
                + self.roof_length
                + self.rear_window_base_offset
                + self.trunk_length)
    }

    pub fn validate(&self) -> Result<(), VehicleModelError> {
        for (name, v) in SHAPE_FIELDS.iter().zip(self.to_array()) {
            if !(v > 0.0) || !v.is_finite() {
                return Err(VehicleModelError::InvalidShape(format!("{name} must be positive, got {v}")));
            }
        }
        if self.front_overhang() < 0.0 {
            return Err(VehicleModelError::InvalidShape("longitudinal parts exceed the length".into()));
        }
        let wt = self.windshield_top_height();
        if !(self.hood_height < wt) {
            return Err(VehicleModelError::InvalidShape(format!(
                "hood_height {} must be below the windshield top {wt}",
                self.hood_height
            )));
        }
        if self.trunk_height > self.roof_height {
            return Err(VehicleModelError::InvalidShape("trunk_height exceeds roof_height".into()));
        }
        if !(self.ground_clearance < self.hood_height) {
            return Err(VehicleModelError::InvalidShape("ground_clearance must be below hood_height".into()));
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self, VehicleModelError> {
        let s: ShapeParams = toml::from_str(text).map_err(|e| VehicleModelError::Parse(e.to_string()))?;
        s.validate()?;
        Ok(s)
    }

    pub fn to_toml(&self) -> String {
        let mut out = String::new();
        for (name, v) in SHAPE_FIELDS.iter().zip(self.to_array()) {
            out.push_str(&format!("{name} = {v:?}\n"));
        }
        out
    }

    pub fn load(path: &Path) -> Result<Self, VehicleModelError> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum VehicleType {
    Sedan,
    Suv,
    Van,
    Truck,
}

impl VehicleType {
    pub const ALL: [VehicleType; 4] = [VehicleType::Sedan, VehicleType::Suv, VehicleType::Van, VehicleType::Truck];

    pub fn label(&self) -> &'static str {
        match self {
            VehicleType::Sedan => "sedan",
            VehicleType::Suv => "suv",
            VehicleType::Van => "van",
            VehicleType::Truck => "truck",
        }
    }

    pub fn from_label(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|t| t.label() == s)
    }

    pub fn preset(&self) -> ShapeParams {
        let text = match self {
            VehicleType::Sedan => include_str!("../../presets/sedan.cfg"),
            VehicleType::Suv => include_str!("../../presets/suv.cfg"),
            VehicleType::Van => include_str!("../../presets/van.cfg"),
            VehicleType::Truck => include_str!("../../presets/truck.cfg"),
        };
        ShapeParams::from_toml(text).expect("shipped preset is valid")
    }
}

/// Nearest preset under a per-field L1 distance, each field scaled by its
/// mean over the presets. Ties (within 1e-12) go to the earlier label.
pub fn classify_type(s: &ShapeParams) -> VehicleType {
    let presets: Vec<[f64; 12]> = VehicleType::ALL.iter().map(|t| t.preset().to_array()).collect();
    let mut scale = [0.0; 12];
    for p in &presets {
        for i in 0..12 {
            scale[i] += p[i] / presets.len() as f64;
        }
    }
    let a = s.to_array();
    let mut best = (VehicleType::Sedan, f64::INFINITY);
    for (t, p) in VehicleType::ALL.iter().zip(&presets) {
        let d: f64 = (0..12).map(|i| (a[i] - p[i]).abs() / scale[i]).sum();
        if d < best.1 - 1e-12 {
            best = (*t, d);
        }
    }
    best.0
}

/// Ground-plane pose. `theta` is the heading of the vehicle front,
/// counter-clockwise from world x.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub x: f64,
    pub y: f64,
    pub theta: f64,
}

impl Pose {
    pub fn new(x: f64, y: f64, theta: f64) -> Self {
        Self { x, y, theta: wrap_angle(theta) }
    }

    /// Body frame to world, including the ground clearance lift.
    pub fn transform(&self, p: &Point3, clearance: f64) -> Point3 {
        let (s, c) = self.theta.sin_cos();
        Point3::new(self.x + c * p.x - s * p.y, self.y + s * p.x + c * p.y, p.z + clearance)
    }

    pub fn rotate(&self, v: &Vector3<f64>) -> Vector3<f64> {
        let (s, c) = self.theta.sin_cos();
        Vector3::new(c * v.x - s * v.y, s * v.x + c * v.y, v.z)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FaceKind {
    Side,
    Front,
    Hood,
    Windshield,
    Roof,
    RearWindow,
    Rear,
    Bottom,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Face {
    pub kind: FaceKind,
    /// Vertex loop, counter-clockwise seen from outside.
    pub loop_: Vec<usize>,
    /// Outward unit normal in the body frame.
    pub normal: Vector3<f64>,
    /// Edge indices on the face boundary.
    pub edges: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DeformableModel {
    pub shape: ShapeParams,
    /// Body frame: x toward the front, y to the left, z up from the body bottom.
    pub vertices: Vec<Point3>,
    pub edges: Vec<(usize, usize)>,
    pub faces: Vec<Face>,
    /// Faces adjacent to each edge.
    pub edge_faces: Vec<Vec<usize>>,
    /// Valley edges (the hood/windshield step): seen only when every
    /// adjacent face is.
    pub edge_concave: Vec<bool>,
}

pub const VERTEX_COUNT: usize = 16;
pub const EDGE_COUNT: usize = 23;
/// Profile points that carry a lateral connector edge.
const CONNECTED: [usize; 7] = [0, 1, 3, 4, 5, 6, 7];

fn profile(s: &ShapeParams) -> [Vector2<f64>; 8] {
    // (distance from the front, height)
    let x2 = s.front_overhang();
    let x3 = x2 + s.hood_length;
    let x4 = x3 + s.windshield_base_offset;
    let x5 = x4 + s.roof_length;
    let x6 = x5 + s.rear_window_base_offset;
    [
        Vector2::new(0.0, 0.0),
        Vector2::new(0.0, s.hood_height),
        Vector2::new(x2, s.hood_height),
        Vector2::new(x3, s.hood_height),
        Vector2::new(x4, s.windshield_top_height()),
        Vector2::new(x5, s.roof_height),
        Vector2::new(x6, s.trunk_height),
        Vector2::new(s.length, 0.0),
    ]
}

/// Builds the wireframe. Vertices 0..8 are the profile on the left side
/// (y = +W/2), 8..16 the mirror on the right side. Edges: 8 profile edges
/// per side, then 7 lateral connectors.
pub fn build_model(s: &ShapeParams) -> Result<DeformableModel, VehicleModelError> {
    s.validate()?;
    let prof = profile(s);
    let half_l = s.length / 2.0;
    let half_w = s.width / 2.0;
    let mut vertices = Vec::with_capacity(VERTEX_COUNT);
    for side in [half_w, -half_w] {
        for p in &prof {
            vertices.push(Point3::new(half_l - p.x, side, p.y));
        }
    }
    let mut edges = Vec::with_capacity(EDGE_COUNT);
    for base in [0, 8] {
        for i in 0..8 {
            edges.push((base + i, base + (i + 1) % 8));
        }
    }
    for &i in &CONNECTED {
        edges.push((i, i + 8));
    }
    let edge_index = |a: usize, b: usize| edges.iter().position(|&(i, j)| (i, j) == (a, b) || (i, j) == (b, a)).unwrap();

    let mut faces = Vec::with_capacity(9);
    faces.push(Face {
        kind: FaceKind::Side,
        loop_: orient_loop(&vertices, (0..8).collect(), &Vector3::y()),
        normal: Vector3::y(),
        edges: (0..8).map(|i| edge_index(i, (i + 1) % 8)).collect(),
    });
    faces.push(Face {
        kind: FaceKind::Side,
        loop_: orient_loop(&vertices, (8..16).collect(), &-Vector3::y()),
        normal: -Vector3::y(),
        edges: (0..8).map(|i| edge_index(8 + i, 8 + (i + 1) % 8)).collect(),
    });
    let kinds = [
        FaceKind::Front,
        FaceKind::Hood,
        FaceKind::Windshield,
        FaceKind::Roof,
        FaceKind::RearWindow,
        FaceKind::Rear,
        FaceKind::Bottom,
    ];
    for (k, kind) in kinds.iter().enumerate() {
        let a = CONNECTED[k];
        let b = CONNECTED[(k + 1) % CONNECTED.len()];
        let chain: Vec<usize> = if b > a { (a..=b).collect() } else { vec![a, b] };
        let pa = &vertices[a];
        let pb = &vertices[b];
        let d = Vector3::new(pb.x - pa.x, 0.0, pb.z - pa.z);
        // The profile runs front to rear over the top, so outward is y x d.
        let normal = Vector3::y().cross(&d).normalize();
        let mut loop_ = chain.clone();
        loop_.extend(chain.iter().rev().map(|i| i + 8));
        let mut fe: Vec<usize> = chain.windows(2).map(|w| edge_index(w[0], w[1])).collect();
        fe.extend(chain.windows(2).map(|w| edge_index(w[0] + 8, w[1] + 8)));
        fe.push(edge_index(a, a + 8));
        fe.push(edge_index(b, b + 8));
        faces.push(Face { kind: *kind, loop_: orient_loop(&vertices, loop_, &normal), normal, edges: fe });
    }
    let mut edge_faces = vec![Vec::new(); edges.len()];
    for (fi, f) in faces.iter().enumerate() {
        for &e in &f.edges {
            edge_faces[e].push(fi);
        }
    }
    let mut model = DeformableModel { shape: *s, vertices, edges, faces, edge_faces, edge_concave: Vec::new() };
    model.edge_concave = (0..model.edges.len())
        .map(|e| {
            let fs = &model.edge_faces[e];
            fs.len() == 2 && {
                let (f1, f2) = (&model.faces[fs[0]], &model.faces[fs[1]]);
                let p1 = model.vertices[f1.loop_[0]].to_vector();
                (model.face_centroid(fs[1]).to_vector() - p1).dot(&f1.normal) > 1e-9 && f2.normal != f1.normal
            }
        })
        .collect();
    Ok(model)
}

/// Reverses `loop_` if it winds clockwise around `normal`.
fn orient_loop(vertices: &[Point3], loop_: Vec<usize>, normal: &Vector3<f64>) -> Vec<usize> {
    let mut acc = Vector3::zeros();
    for i in 0..loop_.len() {
        let a = vertices[loop_[i]].to_vector();
        let b = vertices[loop_[(i + 1) % loop_.len()]].to_vector();
        acc += a.cross(&b);
    }
    if acc.dot(normal) < 0.0 {
        loop_.into_iter().rev().collect()
    } else {
        loop_
    }
}

impl DeformableModel {
    pub fn face_centroid(&self, face: usize) -> Point3 {
        let l = &self.faces[face].loop_;
        let s = l.iter().fold(Vector3::zeros(), |acc, &i| acc + self.vertices[i].to_vector());
        Point3::from_vector(&(s / l.len() as f64))
    }

    /// Area-weighted centroid of a face polygon.
    pub fn face_area_centroid(&self, face: usize) -> (f64, Point3) {
        let f = &self.faces[face];
        let p0 = self.vertices[f.loop_[0]].to_vector();
        let mut area = 0.0;
        let mut c = Vector3::zeros();
        for w in 1..f.loop_.len() - 1 {
            let a = self.vertices[f.loop_[w]].to_vector();
            let b = self.vertices[f.loop_[w + 1]].to_vector();
            let t = 0.5 * (a - p0).cross(&(b - p0)).dot(&f.normal);
            area += t;
            c += (p0 + a + b) / 3.0 * t;
        }
        if area.abs() < 1e-15 {
            return (0.0, self.face_centroid(face));
        }
        (area, Point3::from_vector(&(c / area)))
    }

    /// Text interchange: 16 vertex lines `x y z`, 23 edge lines `i j`,
    /// then one line per face listing its vertex loop.
    pub fn write_to<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        for v in &self.vertices {
            writeln!(w, "{:?} {:?} {:?}", v.x, v.y, v.z)?;
        }
        for (i, j) in &self.edges {
            writeln!(w, "{i} {j}")?;
        }
        for f in &self.faces {
            let s: Vec<String> = f.loop_.iter().map(|i| i.to_string()).collect();
            writeln!(w, "{}", s.join(" "))?;
        }
        Ok(())
    }

    /// Parses the interchange text into vertices, edges and face loops.
    #[allow(clippy::type_complexity)]
    pub fn read_from<R: BufRead>(r: R) -> Result<(Vec<Point3>, Vec<(usize, usize)>, Vec<Vec<usize>>), VehicleModelError> {
        let mut vertices = Vec::new();
        let mut edges = Vec::new();
        let mut faces = Vec::new();
        for (n, line) in r.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let err = |m: String| VehicleModelError::Parse(format!("line {}: {m}", n + 1));
            if vertices.len() < VERTEX_COUNT {
                let v: Vec<f64> = line.split_whitespace().map(|t| t.parse::<f64>().map_err(|e| err(e.to_string()))).collect::<Result<_, _>>()?;
                if v.len() != 3 {
                    return Err(err("expected 3 coordinates".into()));
                }
                vertices.push(Point3::new(v[0], v[1], v[2]));
                continue;
            }
            let idx: Vec<usize> = line.split_whitespace().map(|t| t.parse::<usize>().map_err(|e| err(e.to_string()))).collect::<Result<_, _>>()?;
            if idx.iter().any(|&i| i >= VERTEX_COUNT) {
                return Err(err("vertex index out of range".into()));
            }
            if edges.len() < EDGE_COUNT {
                if idx.len() != 2 {
                    return Err(err("expected 2 indices".into()));
                }
                edges.push((idx[0], idx[1]));
            } else {
                if idx.len() < 3 {
                    return Err(err("face needs at least 3 vertices".into()));
                }
                faces.push(idx);
            }
        }
        if vertices.len() != VERTEX_COUNT || edges.len() != EDGE_COUNT {
            return Err(VehicleModelError::Parse(format!("got {} vertices and {} edges", vertices.len(), edges.len())));
        }
        Ok((vertices, edges, faces))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sedan() -> ShapeParams {
        VehicleType::Sedan.preset()
    }

    #[test]
    fn presets_build_valid_models() {
        for t in VehicleType::ALL {
            let m = build_model(&t.preset()).unwrap();
            assert_eq!(m.vertices.len(), VERTEX_COUNT);
            assert_eq!(m.edges.len(), EDGE_COUNT);
            assert_eq!(m.faces.len(), 9);
            assert_eq!(classify_type(&t.preset()), t);
        }
    }

    #[test]
    fn faces_are_planar_and_outward() {
        let m = build_model(&sedan()).unwrap();
        let c = m.vertices.iter().fold(Vector3::zeros(), |a, v| a + v.to_vector()) / 16.0;
        for (fi, f) in m.faces.iter().enumerate() {
            let p0 = m.vertices[f.loop_[0]].to_vector();
            for &i in &f.loop_ {
                assert!((m.vertices[i].to_vector() - p0).dot(&f.normal).abs() < 1e-9, "face {fi}");
            }
            if f.kind != FaceKind::Hood {
                // Body centroid lies behind every face but the concave hood.
                assert!((c - p0).dot(&f.normal) < 0.0, "face {fi} {:?}", f.kind);
            }
            assert!(m.face_area_centroid(fi).0 > 0.0, "face {fi} winding");
        }
        for (e, fs) in m.edge_faces.iter().enumerate() {
            assert_eq!(fs.len(), 2, "edge {e}");
        }
        let valleys: Vec<(usize, usize)> = (0..EDGE_COUNT).filter(|&e| m.edge_concave[e]).map(|e| m.edges[e]).collect();
        assert_eq!(valleys, vec![(3, 11)]);
    }

    #[test]
    fn hood_above_roof_is_rejected() {
        let s = ShapeParams { hood_height: 1.4, ..sedan() };
        assert!(matches!(build_model(&s), Err(VehicleModelError::InvalidShape(_))));
    }

    #[test]
    fn classification_ties_and_noise() {
        let (a, b) = (sedan().to_array(), VehicleType::Suv.preset().to_array());
        let mid: Vec<f64> = a.iter().zip(&b).map(|(x, y)| 0.5 * (x + y)).collect();
        assert_eq!(classify_type(&ShapeParams::from_array(&mid)), VehicleType::Sedan);
        let v = VehicleType::Van.preset().to_array();
        let noisy: Vec<f64> = v.iter().enumerate().map(|(i, x)| x * (1.0 + 0.05 * if i % 2 == 0 { 1.0 } else { -1.0 })).collect();
        assert_eq!(classify_type(&ShapeParams::from_array(&noisy)), VehicleType::Van);
    }

    #[test]
    fn interchange_text_round_trips() {
        let m = build_model(&sedan()).unwrap();
        let mut buf = Vec::new();
        m.write_to(&mut buf).unwrap();
        let (v, e, f) = DeformableModel::read_from(buf.as_slice()).unwrap();
        assert_eq!(v, m.vertices);
        assert_eq!(e, m.edges);
        assert_eq!(f, m.faces.iter().map(|f| f.loop_.clone()).collect::<Vec<_>>());
        assert!(DeformableModel::read_from("1 2\n".as_bytes()).is_err());
    }

    #[test]
    fn toml_round_trip_and_unknown_keys() {
        let s = sedan();
        assert_eq!(ShapeParams::from_toml(&s.to_toml()).unwrap(), s);
        assert!(ShapeParams::from_toml(&format!("{}bogus = 1.0\n", s.to_toml())).is_err());
    }

    fn arb_shape() -> impl Strategy<Value = ShapeParams> {
        prop::collection::vec(0.8f64..1.2, 12).prop_map(|k| {
            let base = sedan().to_array();
            let mut a = [0.0; 12];
            for i in 0..12 {
                a[i] = base[i] * k[i];
            }
            ShapeParams::from_array(&a)
        })
    }

    proptest! {
        #[test]
        fn bounding_box_matches_dimensions(s in arb_shape()) {
            prop_assume!(s.validate().is_ok());
            let m = build_model(&s).unwrap();
            let ext = |f: fn(&Point3) -> f64| {
                let v: Vec<f64> = m.vertices.iter().map(f).collect();
                v.iter().cloned().fold(f64::NEG_INFINITY, f64::max) - v.iter().cloned().fold(f64::INFINITY, f64::min)
            };
            prop_assert!((ext(|p| p.x) - s.length).abs() < 1e-12);
            prop_assert!((ext(|p| p.y) - s.width).abs() < 1e-12);
            prop_assert!((ext(|p| p.z) - s.roof_height).abs() < 1e-12);
        }

        #[test]
        fn mirror_symmetric(s in arb_shape()) {
            prop_assume!(s.validate().is_ok());
            let m = build_model(&s).unwrap();
            for v in &m.vertices {
                let mirrored = Point3::new(v.x, -v.y, v.z);
                prop_assert!(m.vertices.contains(&mirrored));
            }
        }
    }
}
