//! Ground-truth generator: rectangular templates, exactly isometric
//! deformation sequences, camera simulation, and match synthesis with
//! pixel noise and dropout.
//!
//! Deformations act column-wise on the template grid: every grid column
//! keeps its template (x, z)-polyline segment lengths exactly, so every
//! mesh edge (horizontal, vertical, and cell diagonal) keeps its template
//! length to machine precision. The cylinder roll is the inscribed-polygon
//! version of the analytic developable roll and converges to it in the
//! flat limit.

use crate::geom::{
    barycentric_embed_in, project, CameraIntrinsics, GeomError, Match, MatchSet, TriMesh,
};
use nalgebra::{Isometry3, Point2, Point3, Translation3, UnitQuaternion, Vector3};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::io::{BufRead, Write};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("grid resolution must be at least 2x2, got {nx}x{ny}")]
    BadResolution { nx: usize, ny: usize },
    #[error("schedule has {len} frames, requested frame {t}")]
    ScheduleOutOfRange { t: usize, len: usize },
    #[error("non-positive depth while projecting a sample in facet {facet}")]
    NonPositiveDepth { facet: usize },
    #[error(transparent)]
    Geom(#[from] GeomError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("parse error: {0}")]
    Json(#[from] serde_json::Error),
}

/// Flat W x H sheet at z = 0 centered at the origin, nx x ny vertex grid,
/// two triangles per cell, param_coords on the regular unit-square grid.
pub fn make_template(w: f64, h: f64, nx: usize, ny: usize) -> Result<TriMesh, SynthError> {
    if nx < 2 || ny < 2 {
        return Err(SynthError::BadResolution { nx, ny });
    }
    let mut vertices = Vec::with_capacity(nx * ny);
    let mut param_coords = Vec::with_capacity(nx * ny);
    for j in 0..ny {
        for i in 0..nx {
            let u = i as f64 / (nx - 1) as f64;
            let v = j as f64 / (ny - 1) as f64;
            vertices.push(Point3::new(w * (u - 0.5), h * (v - 0.5), 0.0));
            param_coords.push(Point2::new(u, v));
        }
    }
    let mut faces = Vec::with_capacity(2 * (nx - 1) * (ny - 1));
    for j in 0..ny - 1 {
        for i in 0..nx - 1 {
            let v00 = j * nx + i;
            let v10 = v00 + 1;
            let v01 = v00 + nx;
            let v11 = v01 + 1;
            faces.push([v00, v10, v11]);
            faces.push([v00, v11, v01]);
        }
    }
    Ok(TriMesh::new(vertices, faces, param_coords)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DeformKind {
    CylinderRoll,
    SineFlex,
    RigidMotion,
}

impl std::str::FromStr for DeformKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "cylinder_roll" => Ok(Self::CylinderRoll),
            "sine_flex" => Ok(Self::SineFlex),
            "rigid_motion" => Ok(Self::RigidMotion),
            other => Err(format!("unknown deformation model '{other}'")),
        }
    }
}

/// Per-frame deformation schedule plus rigid placement in the camera frame.
/// The schedule entry meaning depends on `kind`: curvature (1/mm) for the
/// cylinder roll, heading amplitude (rad) for sine flex, rotation angle
/// (rad) for rigid motion.
#[derive(Debug, Clone)]
pub struct DeformationModel {
    pub kind: DeformKind,
    pub schedule: Vec<f64>,
    pub extrinsics: Vec<Isometry3<f64>>,
}

impl DeformationModel {
    pub fn n_frames(&self) -> usize {
        self.schedule.len()
    }
}

/// Distinct template column x-coordinates, ascending (grid columns).
fn template_columns(template: &TriMesh) -> Vec<f64> {
    let mut xs: Vec<f64> = template.vertices.iter().map(|v| v.x).collect();
    xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    xs.dedup_by(|a, b| (*a - *b).abs() < 1e-12);
    xs
}

/// Bend the template column polyline in the (x, z) plane with exactly
/// preserved segment lengths. `heading` gives the segment direction angle
/// as a function of the segment's template-x midpoint.
fn bend_columns(
    template: &TriMesh,
    heading: impl Fn(f64) -> f64,
) -> Vec<Point3<f64>> {
    let cols = template_columns(template);
    let mut poly = Vec::with_capacity(cols.len());
    poly.push((cols[0], 0.0));
    for k in 0..cols.len() - 1 {
        let ds = cols[k + 1] - cols[k];
        let beta = heading(0.5 * (cols[k] + cols[k + 1]));
        let (px, pz) = poly[k];
        poly.push((px + ds * beta.cos(), pz + ds * beta.sin()));
    }
    template
        .vertices
        .iter()
        .map(|v| {
            let col = cols
                .iter()
                .position(|&x| (x - v.x).abs() < 1e-12)
                .expect("vertex not on a template column");
            let (px, pz) = poly[col];
            Point3::new(px, v.y, pz)
        })
        .collect()
}

/// Ground-truth vertices for frame `t`: the column-isometric deformation
/// followed by the frame's rigid placement.
pub fn deform(
    model: &DeformationModel,
    template: &TriMesh,
    t: usize,
) -> Result<Vec<Point3<f64>>, SynthError> {
    let param = *model
        .schedule
        .get(t)
        .ok_or(SynthError::ScheduleOutOfRange { t, len: model.schedule.len() })?;
    let bent = match model.kind {
        DeformKind::CylinderRoll => bend_columns(template, |x| param * x),
        DeformKind::SineFlex => {
            let w = sheet_width(template);
            bend_columns(template, |x| param * (2.0 * std::f64::consts::PI * x / w).sin())
        }
        DeformKind::RigidMotion => template.vertices.clone(),
    };
    let iso = model.extrinsics[t];
    Ok(bent.iter().map(|p| iso * p).collect())
}

fn sheet_width(template: &TriMesh) -> f64 {
    let cols = template_columns(template);
    cols[cols.len() - 1] - cols[0]
}

fn centroid(pts: &[Point3<f64>]) -> Vector3<f64> {
    pts.iter().map(|p| p.coords).sum::<Vector3<f64>>() / pts.len() as f64
}

/// Build a model whose frames stay centered at (0, 0, z0) in front of the
/// camera. The per-frame extrinsics recenter the bent sheet's centroid.
pub fn build_model(
    kind: DeformKind,
    template: &TriMesh,
    n_frames: usize,
    z0: f64,
) -> DeformationModel {
    let w = sheet_width(template);
    let schedule: Vec<f64> = (0..n_frames)
        .map(|t| {
            let ramp = (t + 1) as f64 / n_frames as f64;
            match kind {
                // the final frame's heading spread across the sheet is 30
                // degrees: a clearly curved surface, yet gentle enough per
                // frame for warm-started tracking (short baseline)
                DeformKind::CylinderRoll => ramp * std::f64::consts::FRAC_PI_6 / w,
                DeformKind::SineFlex => ramp * 0.5,
                DeformKind::RigidMotion => ramp * 0.3,
            }
        })
        .collect();
    let mut model =
        DeformationModel { kind, schedule, extrinsics: vec![Isometry3::identity(); n_frames] };
    for t in 0..n_frames {
        let bent = deform(&model, template, t).expect("identity extrinsics");
        let c = centroid(&bent);
        let rot = match kind {
            DeformKind::RigidMotion => {
                UnitQuaternion::from_axis_angle(&Vector3::y_axis(), model.schedule[t])
            }
            _ => UnitQuaternion::identity(),
        };
        let shift = Vector3::new(0.0, 0.0, z0) - rot * c;
        model.extrinsics[t] = Isometry3::from_parts(Translation3::from(shift), rot);
    }
    model
}

fn frame_rng(seed: u64, t: usize, stream: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(
        seed ^ (t as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ stream,
    )
}

/// How matches are placed on the surface.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatchMode {
    /// `per_facet` uniform random samples inside every facet.
    Facet,
    /// One match at every mesh vertex.
    Vertex,
}

/// Sample matches on a deformed frame: barycentric placement on the
/// template topology, pixels from exact projection plus Gaussian noise,
/// then seeded dropout keeping an exact count.
#[allow(clippy::too_many_arguments)]
pub fn synthesize_matches(
    frame_vertices: &[Point3<f64>],
    template: &TriMesh,
    k: &CameraIntrinsics,
    mode: MatchMode,
    per_facet: usize,
    noise_px: f64,
    dropout: f64,
    seed: u64,
) -> Result<MatchSet, SynthError> {
    assert!((0.0..1.0).contains(&dropout), "dropout must be in [0, 1)");
    let mut rng = frame_rng(seed, 0, 0xA5A5);
    let mut raw: Vec<(usize, [f64; 3])> = Vec::new();
    match mode {
        MatchMode::Facet => {
            for f in 0..template.faces.len() {
                for _ in 0..per_facet {
                    let (r1, r2): (f64, f64) = (rng.random(), rng.random());
                    let sq = r1.sqrt();
                    raw.push((f, [1.0 - sq, sq * (1.0 - r2), sq * r2]));
                }
            }
        }
        MatchMode::Vertex => {
            for vi in 0..template.n_vertices() {
                let (f, slot) = template
                    .faces
                    .iter()
                    .enumerate()
                    .find_map(|(f, face)| {
                        face.iter().position(|&v| v == vi).map(|slot| (f, slot))
                    })
                    .expect("every vertex belongs to at least one face");
                let mut bary = [0.0; 3];
                bary[slot] = 1.0;
                raw.push((f, bary));
            }
        }
    }

    let normal = Normal::new(0.0, noise_px.max(0.0)).expect("valid sigma");
    let mut matches = Vec::with_capacity(raw.len());
    for &(facet, bary) in &raw {
        let face = template.faces[facet];
        let s = barycentric_embed_in(frame_vertices, face, bary);
        let pixel = project(k, &s).map_err(|_| SynthError::NonPositiveDepth { facet })?;
        let (du, dv) = if noise_px > 0.0 {
            (normal.sample(&mut rng), normal.sample(&mut rng))
        } else {
            (0.0, 0.0)
        };
        let mut param = [0.0; 2];
        for i in 0..3 {
            param[0] += bary[i] * template.param_coords[face[i]].x;
            param[1] += bary[i] * template.param_coords[face[i]].y;
        }
        matches.push(Match {
            facet,
            bary,
            param_point: param,
            pixel: [pixel.x + du, pixel.y + dv],
        });
    }

    if dropout > 0.0 {
        let n_keep = matches.len() - (dropout * matches.len() as f64).round() as usize;
        let mut idx: Vec<usize> = (0..matches.len()).collect();
        idx.shuffle(&mut rng);
        idx.truncate(n_keep);
        idx.sort_unstable();
        matches = idx.into_iter().map(|i| matches[i]).collect();
    }
    Ok(matches)
}

/// Generation parameters recorded in the bundle manifest.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GenParams {
    pub kind: DeformKind,
    pub n_frames: usize,
    pub width: f64,
    pub height: f64,
    pub nx: usize,
    pub ny: usize,
    pub match_mode: MatchMode,
    pub per_facet: usize,
    pub noise_px: f64,
    pub dropout: f64,
    pub seed: u64,
}

impl Default for GenParams {
    fn default() -> Self {
        Self {
            kind: DeformKind::CylinderRoll,
            n_frames: 30,
            width: 8.0,
            height: 6.0,
            nx: 13,
            ny: 10,
            match_mode: MatchMode::Facet,
            per_facet: 1,
            noise_px: 0.0,
            dropout: 0.0,
            seed: 0,
        }
    }
}

/// A generated sequence: template, exact per-frame ground truth, matches,
/// and the camera, plus the parameters that produced it.
#[derive(Debug, Clone)]
pub struct SyntheticSequence {
    pub template: TriMesh,
    pub frames: Vec<Vec<Point3<f64>>>,
    pub matches: Vec<MatchSet>,
    pub camera: CameraIntrinsics,
    pub params: GenParams,
}

/// Default camera: 500 px focals in a 640x480 frame, sheet centered at
/// z = 2 max(W, H).
pub fn default_camera() -> CameraIntrinsics {
    CameraIntrinsics::new(500.0, 500.0, 320.0, 240.0)
}

pub fn generate(params: &GenParams) -> Result<SyntheticSequence, SynthError> {
    let template = make_template(params.width, params.height, params.nx, params.ny)?;
    let camera = default_camera();
    let z0 = 2.0 * params.width.max(params.height);
    let model = build_model(params.kind, &template, params.n_frames, z0);
    let mut frames = Vec::with_capacity(params.n_frames);
    let mut matches = Vec::with_capacity(params.n_frames);
    for t in 0..params.n_frames {
        let verts = deform(&model, &template, t)?;
        let ms = synthesize_matches(
            &verts,
            &template,
            &camera,
            params.match_mode,
            params.per_facet,
            params.noise_px,
            params.dropout,
            params.seed ^ (t as u64 + 1).wrapping_mul(0x51_7C_C1_B7_27_22_0A_95),
        )?;
        frames.push(verts);
        matches.push(ms);
    }
    // Store the template in its viewing position (centered at depth z0,
    // like every frame) so reconstruction can start from it directly.
    let placed = TriMesh::new(
        template.vertices.iter().map(|v| Point3::new(v.x, v.y, v.z + z0)).collect(),
        template.faces.clone(),
        template.param_coords.clone(),
    )?;
    Ok(SyntheticSequence { template: placed, frames, matches, camera, params: params.clone() })
}

// ---------------------------------------------------------------------------
// Bundle serialization
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
struct MeshFile {
    vertices: Vec<[f64; 3]>,
    faces: Vec<[usize; 3]>,
    param_coords: Vec<[f64; 2]>,
}

pub fn write_mesh(mesh: &TriMesh, path: &Path) -> Result<(), SynthError> {
    let file = MeshFile {
        vertices: mesh.vertices.iter().map(|v| [v.x, v.y, v.z]).collect(),
        faces: mesh.faces.clone(),
        param_coords: mesh.param_coords.iter().map(|p| [p.x, p.y]).collect(),
    };
    std::fs::write(path, serde_json::to_string_pretty(&file)?)?;
    Ok(())
}

pub fn read_mesh(path: &Path) -> Result<TriMesh, SynthError> {
    let file: MeshFile = serde_json::from_str(&std::fs::read_to_string(path)?)?;
    Ok(TriMesh::new(
        file.vertices.iter().map(|v| Point3::new(v[0], v[1], v[2])).collect(),
        file.faces,
        file.param_coords.iter().map(|p| Point2::new(p[0], p[1])).collect(),
    )?)
}

/// Write the on-disk bundle: template.json, camera.json, frames.jsonl
/// (ground-truth vertices per line), matches.jsonl, manifest.json.
pub fn write_bundle(seq: &SyntheticSequence, dir: &Path) -> Result<(), SynthError> {
    std::fs::create_dir_all(dir)?;
    write_mesh(&seq.template, &dir.join("template.json"))?;
    std::fs::write(dir.join("camera.json"), serde_json::to_string_pretty(&seq.camera)?)?;
    std::fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&seq.params)?)?;

    let mut f = std::io::BufWriter::new(std::fs::File::create(dir.join("frames.jsonl"))?);
    for frame in &seq.frames {
        let row: Vec<[f64; 3]> = frame.iter().map(|v| [v.x, v.y, v.z]).collect();
        serde_json::to_writer(&mut f, &row)?;
        f.write_all(b"\n")?;
    }
    f.flush()?;

    let mut f = std::io::BufWriter::new(std::fs::File::create(dir.join("matches.jsonl"))?);
    for ms in &seq.matches {
        serde_json::to_writer(&mut f, ms)?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

pub fn read_bundle(dir: &Path) -> Result<SyntheticSequence, SynthError> {
    let template = read_mesh(&dir.join("template.json"))?;
    let camera: CameraIntrinsics =
        serde_json::from_str(&std::fs::read_to_string(dir.join("camera.json"))?)?;
    let params: GenParams =
        serde_json::from_str(&std::fs::read_to_string(dir.join("manifest.json"))?)?;

    let mut frames = Vec::new();
    for line in std::io::BufReader::new(std::fs::File::open(dir.join("frames.jsonl"))?).lines() {
        let row: Vec<[f64; 3]> = serde_json::from_str(&line?)?;
        frames.push(row.iter().map(|v| Point3::new(v[0], v[1], v[2])).collect());
    }
    let mut matches = Vec::new();
    for line in std::io::BufReader::new(std::fs::File::open(dir.join("matches.jsonl"))?).lines() {
        matches.push(serde_json::from_str(&line?)?);
    }
    Ok(SyntheticSequence { template, frames, matches, camera, params })
}

/// Max relative edge-length deviation of `vertices` vs the template.
pub fn max_edge_deviation(template: &TriMesh, vertices: &[Point3<f64>]) -> f64 {
    template
        .edges
        .iter()
        .map(|&[i, j]| {
            let l0 = (template.vertices[i] - template.vertices[j]).norm();
            let l = (vertices[i] - vertices[j]).norm();
            ((l - l0) / l0).abs()
        })
        .fold(0.0, f64::max)
}

/// Mean relative edge-length deviation of `vertices` vs the template.
pub fn mean_edge_deviation(template: &TriMesh, vertices: &[Point3<f64>]) -> f64 {
    let sum: f64 = template
        .edges
        .iter()
        .map(|&[i, j]| {
            let l0 = (template.vertices[i] - template.vertices[j]).norm();
            let l = (vertices[i] - vertices[j]).norm();
            ((l - l0) / l0).abs()
        })
        .sum();
    sum / template.edges.len() as f64
}
