//! On-disk formats: pose and intrinsics text, PGM images and depth, ASCII PLY
//! meshes, `key=value` reports, the run configuration and the dataset layout.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use nalgebra::Matrix4;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::{FusionConfig, TriangleMesh};
use crate::geometry::{Intrinsics, Pose, Vec3};
use crate::keyframing::{Frame, Trajectory, DEFAULT_T_MAX, DEFAULT_T_MIN};
use crate::maps::{DepthMap, GrayImage};
use crate::synth::{Motion, SceneConfig, TrajectoryConfig};
use crate::volume::ChannelConfig;

/// Write to a sibling temporary file, then rename over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    {
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

/// Whitespace-separated tokens with their byte offsets.
fn tokens(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.split_ascii_whitespace()
        .map(move |t| (t.as_ptr() as usize - text.as_ptr() as usize, t))
}

fn parse_floats(text: &str, path: &Path) -> Result<Vec<f64>> {
    tokens(text)
        .map(|(off, t)| {
            t.parse::<f64>()
                .map_err(|_| Error::format(path, Some(off), format!("'{t}' is not a number")))
        })
        .collect()
}

pub fn format_pose(pose: &Pose) -> String {
    let m = pose.to_matrix();
    let mut s = String::new();
    for r in 0..4 {
        let row: Vec<String> = (0..4).map(|c| format!("{}", m[(r, c)])).collect();
        s.push_str(&row.join(" "));
        s.push('\n');
    }
    s
}

pub fn parse_pose(text: &str, path: &Path) -> Result<Pose> {
    let v = parse_floats(text, path)?;
    if v.len() != 16 {
        return Err(Error::format(
            path,
            Some(text.len()),
            format!("expected 16 numbers for a 4x4 pose, found {}", v.len()),
        ));
    }
    let m = Matrix4::from_row_slice(&v);
    Pose::from_matrix(&m).map_err(|e| Error::format(path, None, e.to_string()))
}

pub fn write_pose(path: &Path, pose: &Pose) -> Result<()> {
    write_atomic(path, format_pose(pose).as_bytes())
}

pub fn read_pose(path: &Path) -> Result<Pose> {
    parse_pose(&read_text(path)?, path)
}

pub fn format_intrinsics(k: &Intrinsics) -> String {
    format!("{} {} {} {} {} {}\n", k.fx, k.fy, k.cx, k.cy, k.width, k.height)
}

pub fn parse_intrinsics(text: &str, path: &Path) -> Result<Intrinsics> {
    let t: Vec<(usize, &str)> = tokens(text).collect();
    if t.len() != 6 {
        return Err(Error::format(
            path,
            Some(text.len()),
            format!("expected 'fx fy cx cy width height', found {} fields", t.len()),
        ));
    }
    let f = |i: usize| -> Result<f64> {
        t[i].1
            .parse()
            .map_err(|_| Error::format(path, Some(t[i].0), format!("'{}' is not a number", t[i].1)))
    };
    let u = |i: usize| -> Result<usize> {
        t[i].1
            .parse()
            .map_err(|_| Error::format(path, Some(t[i].0), format!("'{}' is not an image size", t[i].1)))
    };
    Intrinsics::new(f(0)?, f(1)?, f(2)?, f(3)?, u(4)?, u(5)?).map_err(|e| Error::format(path, None, e.to_string()))
}

pub fn write_intrinsics(path: &Path, k: &Intrinsics) -> Result<()> {
    write_atomic(path, format_intrinsics(k).as_bytes())
}

pub fn read_intrinsics(path: &Path) -> Result<Intrinsics> {
    parse_intrinsics(&read_text(path)?, path)
}

/// Binary PGM (`P5`); 16-bit samples are big-endian.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Pgm {
    pub width: usize,
    pub height: usize,
    pub maxval: u16,
    pub data: Vec<u16>,
}

impl Pgm {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n{}\n", self.width, self.height, self.maxval).into_bytes();
        if self.maxval < 256 {
            out.extend(self.data.iter().map(|v| *v as u8));
        } else {
            for v in &self.data {
                out.extend_from_slice(&v.to_be_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut pos = 0;
        let mut header = Vec::new();
        while header.len() < 4 {
            // skip whitespace and comments
            while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
                if bytes[pos] == b'#' {
                    while pos < bytes.len() && bytes[pos] != b'\n' {
                        pos += 1;
                    }
                } else {
                    pos += 1;
                }
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err(Error::format(path, Some(pos), "truncated PGM header"));
            }
            header.push((start, String::from_utf8_lossy(&bytes[start..pos]).into_owned()));
        }
        if header[0].1 != "P5" {
            return Err(Error::format(path, Some(0), format!("expected PGM magic 'P5', found '{}'", header[0].1)));
        }
        let num = |i: usize| -> Result<usize> {
            header[i]
                .1
                .parse()
                .map_err(|_| Error::format(path, Some(header[i].0), format!("bad PGM header field '{}'", header[i].1)))
        };
        let (width, height, maxval) = (num(1)?, num(2)?, num(3)?);
        if maxval == 0 || maxval > 65535 {
            return Err(Error::format(path, Some(header[3].0), format!("PGM maxval {maxval} out of range")));
        }
        // exactly one whitespace byte separates the header from the raster
        pos += 1;
        let bps = if maxval < 256 { 1 } else { 2 };
        let need = width * height * bps;
        if bytes.len() < pos + need {
            return Err(Error::format(
                path,
                Some(bytes.len()),
                format!("PGM raster truncated: need {need} bytes after offset {pos}"),
            ));
        }
        let raster = &bytes[pos..pos + need];
        let data = if bps == 1 {
            raster.iter().map(|b| *b as u16).collect()
        } else {
            raster.chunks_exact(2).map(|c| u16::from_be_bytes([c[0], c[1]])).collect()
        };
        Ok(Self {
            width,
            height,
            maxval: maxval as u16,
            data,
        })
    }
}

/// 8-bit grayscale from intensities in `[0, 1]`.
pub fn image_to_pgm(img: &GrayImage) -> Pgm {
    Pgm {
        width: img.width,
        height: img.height,
        maxval: 255,
        data: img.data.iter().map(|x| (x.clamp(0.0, 1.0) * 255.0).round() as u16).collect(),
    }
}

pub fn pgm_to_image(p: &Pgm) -> GrayImage {
    GrayImage {
        width: p.width,
        height: p.height,
        data: p.data.iter().map(|v| *v as f64 / p.maxval as f64).collect(),
    }
}

/// 16-bit millimeter depth; 0 marks invalid pixels and depths beyond 65.535 m
/// are stored as invalid.
pub fn depth_to_pgm(d: &DepthMap) -> Pgm {
    Pgm {
        width: d.width,
        height: d.height,
        maxval: 65535,
        data: d
            .depth
            .iter()
            .zip(&d.valid)
            .map(|(z, v)| {
                let mm = (z * 1000.0).round();
                if *v && mm >= 1.0 && mm <= 65535.0 {
                    mm as u16
                } else {
                    0
                }
            })
            .collect(),
    }
}

pub fn pgm_to_depth(p: &Pgm, path: &Path) -> Result<DepthMap> {
    if p.maxval < 256 {
        return Err(Error::format(path, None, "depth PGM must be 16-bit"));
    }
    let mut d = DepthMap::empty(p.width, p.height);
    for (i, v) in p.data.iter().enumerate() {
        if *v > 0 {
            d.depth[i] = *v as f64 / 1000.0;
            d.valid[i] = true;
        }
    }
    Ok(d)
}

pub fn write_image(path: &Path, img: &GrayImage) -> Result<()> {
    write_atomic(path, &image_to_pgm(img).encode())
}

pub fn read_image(path: &Path) -> Result<GrayImage> {
    Ok(pgm_to_image(&Pgm::decode(&read_bytes(path)?, path)?))
}

pub fn write_depth(path: &Path, d: &DepthMap) -> Result<()> {
    write_atomic(path, &depth_to_pgm(d).encode())
}

pub fn read_depth(path: &Path) -> Result<DepthMap> {
    pgm_to_depth(&Pgm::decode(&read_bytes(path)?, path)?, path)
}

/// ASCII PLY with `x y z` (and `nx ny nz` when normals are present) per vertex
/// and `vertex_indices` lists per face.
pub fn format_ply(mesh: &TriangleMesh) -> String {
    let mut s = String::new();
    s.push_str("ply\nformat ascii 1.0\n");
    s.push_str(&format!("element vertex {}\n", mesh.vertices.len()));
    s.push_str("property double x\nproperty double y\nproperty double z\n");
    if mesh.normals.is_some() {
        s.push_str("property double nx\nproperty double ny\nproperty double nz\n");
    }
    s.push_str(&format!("element face {}\n", mesh.triangles.len()));
    s.push_str("property list uchar int vertex_indices\nend_header\n");
    for (i, v) in mesh.vertices.iter().enumerate() {
        s.push_str(&format!("{} {} {}", v.x, v.y, v.z));
        if let Some(n) = &mesh.normals {
            s.push_str(&format!(" {} {} {}", n[i].x, n[i].y, n[i].z));
        }
        s.push('\n');
    }
    for t in &mesh.triangles {
        s.push_str(&format!("3 {} {} {}\n", t[0], t[1], t[2]));
    }
    s
}

/// Reads the subset of ASCII PLY written by [`format_ply`]: one vertex element
/// with x, y, z and optional nx, ny, nz, and triangular faces.
pub fn parse_ply(text: &str, path: &Path) -> Result<TriangleMesh> {
    let Some(end) = text.find("end_header\n") else {
        return Err(Error::format(path, Some(0), "PLY header has no end_header line"));
    };
    let header = &text[..end];
    let mut lines = header.lines();
    if lines.next() != Some("ply") {
        return Err(Error::format(path, Some(0), "missing 'ply' magic"));
    }
    let mut n_vertices = None;
    let mut n_faces = None;
    let mut props = Vec::new();
    let mut current = "";
    for line in lines {
        let w: Vec<&str> = line.split_whitespace().collect();
        match w.as_slice() {
            ["format", "ascii", "1.0"] => {}
            ["format", ..] => return Err(Error::format(path, None, "only ASCII PLY is supported")),
            ["comment", ..] | [] => {}
            ["element", "vertex", n] => {
                current = "vertex";
                n_vertices = n.parse::<usize>().ok();
            }
            ["element", "face", n] => {
                current = "face";
                n_faces = n.parse::<usize>().ok();
            }
            ["property", _, name] if current == "vertex" => props.push(name.to_string()),
            ["property", "list", _, _, "vertex_indices" | "vertex_index"] if current == "face" => {}
            _ => return Err(Error::format(path, None, format!("unsupported PLY header line '{line}'"))),
        }
    }
    let (Some(nv), Some(nf)) = (n_vertices, n_faces) else {
        return Err(Error::format(path, None, "PLY header must declare vertex and face elements"));
    };
    let has_normals = props.len() == 6 && props[3..] == ["nx", "ny", "nz"];
    if props[..3.min(props.len())] != ["x", "y", "z"] || !(props.len() == 3 || has_normals) {
        return Err(Error::format(path, None, format!("unsupported vertex properties {props:?}")));
    }
    let body_start = end + "end_header\n".len();
    let mut toks = tokens(&text[body_start..]).map(|(o, t)| (o + body_start, t));
    let mut next_f = |what: &str| -> Result<f64> {
        let (o, t) = toks
            .next()
            .ok_or_else(|| Error::format(path, Some(text.len()), format!("unexpected end of file reading {what}")))?;
        t.parse::<f64>()
            .map_err(|_| Error::format(path, Some(o), format!("'{t}' is not a number")))
    };
    let mut mesh = TriangleMesh::default();
    let mut normals = Vec::new();
    for _ in 0..nv {
        mesh.vertices.push(Vec3::new(next_f("vertex")?, next_f("vertex")?, next_f("vertex")?));
        if has_normals {
            normals.push(Vec3::new(next_f("normal")?, next_f("normal")?, next_f("normal")?));
        }
    }
    for _ in 0..nf {
        let count = next_f("face")?;
        if count != 3.0 {
            return Err(Error::format(path, None, "only triangular faces are supported"));
        }
        let mut t = [0u32; 3];
        for x in &mut t {
            let v = next_f("face index")?;
            if v < 0.0 || v.fract() != 0.0 || v as usize >= nv {
                return Err(Error::format(path, None, format!("face index {v} out of range")));
            }
            *x = v as u32;
        }
        mesh.triangles.push(t);
    }
    if has_normals {
        mesh.normals = Some(normals);
    }
    Ok(mesh)
}

pub fn write_ply(path: &Path, mesh: &TriangleMesh) -> Result<()> {
    write_atomic(path, format_ply(mesh).as_bytes())
}

pub fn read_ply(path: &Path) -> Result<TriangleMesh> {
    parse_ply(&read_text(path)?, path)
}

/// Parse `key=value` lines; blank lines and `#` comments are ignored.
pub fn parse_kv(text: &str, path: &Path) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    let mut offset = 0;
    for line in text.split_inclusive('\n') {
        let l = line.trim();
        if !l.is_empty() && !l.starts_with('#') {
            let Some((k, v)) = l.split_once('=') else {
                return Err(Error::format(path, Some(offset), format!("expected key=value, found '{l}'")));
            };
            out.push((k.trim().to_string(), v.trim().to_string()));
        }
        offset += line.len();
    }
    Ok(out)
}

/// Every tunable of the command-line pipeline. Unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,

    pub room: [f64; 3],
    pub n_boxes: usize,
    pub n_spheres: usize,
    pub texture_length: f64,
    pub occluder_density: f64,
    pub clear_radius: f64,

    pub n_frames: usize,
    pub motion: Motion,
    pub orbit_radius: f64,
    pub camera_height: f64,
    pub orbit_arc: f64,
    pub pitch: f64,
    pub jitter_translation: f64,
    pub jitter_rotation: f64,
    pub width: usize,
    pub height: usize,
    pub hfov_deg: f64,

    pub t_min: f64,
    pub t_max: f64,
    pub online: bool,
    pub n_sources: usize,

    /// `oracle` or `patch`.
    pub features: String,
    pub feature_channels: usize,
    pub patch_size: usize,
    pub d_min: f64,
    pub d_max: f64,
    pub n_planes: usize,
    pub temperature: f64,
    /// Soft-argmax temperature for the dot reductions, whose costs lie in [-1, 1].
    pub dot_temperature: f64,
    /// Metadata groups, e.g. `all`, `dot`, `dot+feats+mask`.
    pub channels: String,
    /// `dot_sum`, `dot_mean` or `mlp`.
    pub reduction: String,
    /// Checkpoint for the `mlp` reduction, relative to the working directory.
    pub checkpoint: String,

    pub hidden: Vec<usize>,
    pub lr: f64,
    pub weight_decay: f64,
    pub steps: usize,
    pub batch_crops: usize,
    pub crop_size: usize,
    /// `pose_sorted` or `shuffled`.
    pub ordering: String,
    pub val_fraction: f64,
    pub val_every: usize,
    pub train_planes: usize,
    pub train_scenes: usize,
    pub ablation_axes: Vec<String>,

    pub voxel_size: f64,
    pub truncation_voxels: f64,
    pub max_weight: f64,
    /// `gt`, `dot_sum` or `mlp`.
    pub fuse_depth: String,

    pub mesh_threshold_cm: f64,
    pub mesh_samples: usize,

    pub bench_width: usize,
    pub bench_height: usize,
    pub bench_frames: usize,
    pub bench_threads: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let scene = SceneConfig::default();
        let traj = TrajectoryConfig::default();
        Self {
            seed: 0,
            room: scene.room,
            n_boxes: scene.n_boxes,
            n_spheres: scene.n_spheres,
            texture_length: scene.texture_length,
            occluder_density: scene.occluder_density,
            clear_radius: scene.clear_radius,
            n_frames: 30,
            motion: traj.motion,
            orbit_radius: traj.radius,
            camera_height: traj.height,
            orbit_arc: traj.arc,
            pitch: traj.pitch,
            jitter_translation: traj.jitter_translation,
            jitter_rotation: traj.jitter_rotation,
            width: 64,
            height: 48,
            hfov_deg: 70.0,
            t_min: DEFAULT_T_MIN,
            t_max: DEFAULT_T_MAX,
            online: false,
            n_sources: 2,
            features: "oracle".into(),
            feature_channels: 16,
            patch_size: 5,
            d_min: 0.25,
            d_max: 5.0,
            n_planes: 64,
            temperature: 1.0,
            dot_temperature: 0.02,
            channels: "all".into(),
            reduction: "dot_sum".into(),
            checkpoint: String::new(),
            hidden: vec![64, 64],
            lr: 1e-4,
            weight_decay: 1e-4,
            steps: 300,
            batch_crops: 4,
            crop_size: 16,
            ordering: "pose_sorted".into(),
            val_fraction: 0.2,
            val_every: 25,
            train_planes: 32,
            train_scenes: 1,
            ablation_axes: vec!["n_views".into(), "zero_cv".into(), "ordering".into()],
            voxel_size: crate::fusion::DEFAULT_VOXEL_SIZE,
            truncation_voxels: crate::fusion::DEFAULT_TRUNCATION_VOXELS,
            max_weight: crate::fusion::DEFAULT_MAX_WEIGHT,
            fuse_depth: "gt".into(),
            mesh_threshold_cm: crate::evaluation::DEFAULT_MESH_THRESHOLD_CM,
            mesh_samples: 50_000,
            bench_width: 256,
            bench_height: 192,
            bench_frames: 30,
            bench_threads: 1,
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str, path: &Path) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| {
            Error::format(path, e.span().map(|s| s.start), e.message().to_string())
        })?;
        cfg.validate().map_err(|e| Error::format(path, None, e.to_string()))?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    /// Apply `key=value` overrides; values are TOML literals, and anything
    /// that does not parse as one is taken as a bare string.
    pub fn with_overrides(&self, overrides: &[String]) -> Result<Self> {
        if overrides.is_empty() {
            return Ok(self.clone());
        }
        let mut table: toml::Table = toml::from_str(&self.to_toml()).expect("run config round-trips");
        for o in overrides {
            let (key, raw) = o
                .split_once('=')
                .ok_or_else(|| Error::domain(format!("override '{o}' is not key=value")))?;
            let key = key.trim();
            if !table.contains_key(key) {
                return Err(Error::domain(format!("unknown config key '{key}'")));
            }
            let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
                .ok()
                .and_then(|mut t| t.remove("v"))
                .unwrap_or_else(|| toml::Value::String(raw.to_string()));
            table.insert(key.to_string(), value);
        }
        let cfg: RunConfig = table
            .try_into()
            .map_err(|e: toml::de::Error| Error::domain(format!("bad override: {}", e.message())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&read_text(path)?, path)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_toml().as_bytes())
    }

    pub fn validate(&self) -> Result<()> {
        self.scene().validate()?;
        self.intrinsics()?;
        self.channel_config()?;
        if !["oracle", "patch"].contains(&self.features.as_str()) {
            return Err(Error::domain(format!("unknown feature extractor '{}'", self.features)));
        }
        if !["dot_sum", "dot_mean", "mlp"].contains(&self.reduction.as_str()) {
            return Err(Error::domain(format!("unknown reduction '{}'", self.reduction)));
        }
        if !["pose_sorted", "shuffled"].contains(&self.ordering.as_str()) {
            return Err(Error::domain(format!("unknown ordering '{}'", self.ordering)));
        }
        if !["gt", "dot_sum", "dot_mean", "mlp"].contains(&self.fuse_depth.as_str()) {
            return Err(Error::domain(format!("unknown fusion depth source '{}'", self.fuse_depth)));
        }
        if self.n_sources == 0 || self.n_sources > crate::volume::MAX_SOURCES {
            return Err(Error::domain(format!("n_sources must be in 1..={}", crate::volume::MAX_SOURCES)));
        }
        if self.steps == 0 || self.n_frames == 0 {
            return Err(Error::domain("steps and n_frames must be at least 1"));
        }
        Ok(())
    }

    pub fn scene(&self) -> SceneConfig {
        SceneConfig {
            seed: self.seed,
            room: self.room,
            n_boxes: self.n_boxes,
            n_spheres: self.n_spheres,
            texture_length: self.texture_length,
            occluder_density: self.occluder_density,
            clear_radius: self.clear_radius,
        }
    }

    pub fn trajectory(&self) -> TrajectoryConfig {
        TrajectoryConfig {
            motion: self.motion,
            radius: self.orbit_radius,
            height: self.camera_height,
            arc: self.orbit_arc,
            pitch: self.pitch,
            jitter_translation: self.jitter_translation,
            jitter_rotation: self.jitter_rotation,
        }
    }

    pub fn intrinsics(&self) -> Result<Intrinsics> {
        Intrinsics::from_fov(self.width, self.height, self.hfov_deg.to_radians())
    }

    pub fn channel_config(&self) -> Result<ChannelConfig> {
        parse_channels(&self.channels)
    }

    pub fn fusion(&self) -> FusionConfig {
        FusionConfig {
            voxel_size: self.voxel_size,
            truncation: self.truncation_voxels * self.voxel_size,
            max_weight: self.max_weight,
        }
    }
}

/// `all`, `none`, or `+`-joined group names (`dot`, `feats`, `mask`, `depth`,
/// `ray`, `angle`, `pose`).
pub fn parse_channels(s: &str) -> Result<ChannelConfig> {
    match s {
        "all" => return Ok(ChannelConfig::all()),
        "none" => return Ok(ChannelConfig::from_bits(0)),
        _ => {}
    }
    let mut c = ChannelConfig::from_bits(0);
    for part in s.split('+') {
        match part.trim() {
            "dot" | "dots" => c.dots = true,
            "feats" => c.feats = true,
            "mask" => c.mask = true,
            "depth" => c.depth = true,
            "ray" => c.ray = true,
            "angle" => c.angle = true,
            "pose" | "pose_distance" => c.pose_distance = true,
            other => return Err(Error::domain(format!("unknown channel group '{other}'"))),
        }
    }
    Ok(c)
}

/// Paths of the dataset layout rooted at `root`.
#[derive(Debug, Clone)]
pub struct DatasetLayout {
    pub root: PathBuf,
}

impl DatasetLayout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn intrinsics(&self) -> PathBuf {
        self.root.join("intrinsics.txt")
    }

    pub fn frames_dir(&self) -> PathBuf {
        self.root.join("frames")
    }

    pub fn pose(&self, id: usize) -> PathBuf {
        self.frames_dir().join(format!("{id:06}.pose.txt"))
    }

    pub fn image(&self, id: usize) -> PathBuf {
        self.frames_dir().join(format!("{id:06}.pgm"))
    }

    pub fn depth(&self, id: usize) -> PathBuf {
        self.frames_dir().join(format!("{id:06}.depth.pgm"))
    }

    pub fn run_config(&self) -> PathBuf {
        self.root.join("run_config.toml")
    }

    /// Frame ids present on disk, ascending.
    pub fn frame_ids(&self) -> Result<Vec<usize>> {
        let dir = self.frames_dir();
        let mut ids = Vec::new();
        for entry in fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))? {
            let entry = entry.map_err(|e| Error::io(&dir, e))?;
            let name = entry.file_name();
            let name = name.to_string_lossy();
            if let Some(stem) = name.strip_suffix(".pose.txt") {
                let id = stem
                    .parse()
                    .map_err(|_| Error::format(&entry.path(), None, "pose file name is not a frame id"))?;
                ids.push(id);
            }
        }
        ids.sort_unstable();
        Ok(ids)
    }

    /// Trajectory from the pose files and the shared intrinsics.
    pub fn read_trajectory(&self) -> Result<Trajectory> {
        let k = read_intrinsics(&self.intrinsics())?;
        let ids = self.frame_ids()?;
        if ids.is_empty() {
            return Err(Error::format(&self.frames_dir(), None, "dataset has no frames"));
        }
        let frames = ids
            .iter()
            .enumerate()
            .map(|(t, &id)| {
                Ok(Frame {
                    id,
                    pose: read_pose(&self.pose(id))?,
                    intrinsics: k,
                    timestamp: t,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Trajectory::new(frames)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p() -> &'static Path {
        Path::new("test")
    }

    #[test]
    fn pose_round_trip() {
        let pose = Pose::from_axis_angle(Vec3::new(0.3, -1.0, 0.2), 0.7)
            .compose(&Pose::from_translation(Vec3::new(0.1, 1.0 / 3.0, -2.5)));
        let back = parse_pose(&format_pose(&pose), p()).unwrap();
        assert_eq!(back.to_matrix(), pose.to_matrix());
    }

    #[test]
    fn overrides() {
        let base = RunConfig::default();
        let cfg = base
            .with_overrides(&["seed=7".into(), "features=patch".into(), "hidden=[8, 4]".into()])
            .unwrap();
        assert_eq!((cfg.seed, cfg.features.as_str(), cfg.hidden.clone()), (7, "patch", vec![8, 4]));
        assert!(base.with_overrides(&["nope=1".into()]).is_err());
        assert!(base.with_overrides(&["seed".into()]).is_err());
        assert!(base.with_overrides(&["features=laser".into()]).is_err());
    }

    #[test]
    fn malformed_pose_names_file() {
        let text = (0..15).map(|i| i.to_string()).collect::<Vec<_>>().join(" ");
        let e = parse_pose(&text, Path::new("frames/000001.pose.txt")).unwrap_err();
        assert!(e.to_string().contains("000001.pose.txt"));
        assert!(e.is_data_error());
        let e = parse_pose("1 0 0 0 0 1 x 0 0 0 1 0 0 0 0 1", p()).unwrap_err();
        assert!(e.to_string().contains("offset 12"), "{e}");
    }

    #[test]
    fn intrinsics_round_trip() {
        let k = Intrinsics::new(100.5, 99.25, 31.5, 23.5, 64, 48).unwrap();
        assert_eq!(parse_intrinsics(&format_intrinsics(&k), p()).unwrap(), k);
        assert!(parse_intrinsics("1 2 3", p()).is_err());
    }

    #[test]
    fn depth_pgm_millimeters() {
        let mut d = DepthMap::dense(3, 1, vec![2.0, 0.0004, 1.2345]).unwrap();
        d.valid[1] = true;
        let pgm = depth_to_pgm(&d);
        assert_eq!(pgm.data, vec![2000, 0, 1235]);
        let back = pgm_to_depth(&Pgm::decode(&pgm.encode(), p()).unwrap(), p()).unwrap();
        assert_eq!(back.depth[0], 2.0);
        assert!(!back.valid[1]);
        assert_eq!(back.depth[2], 1.235);
    }

    #[test]
    fn pgm_round_trip_and_errors() {
        let img = Pgm {
            width: 2,
            height: 2,
            maxval: 255,
            data: vec![0, 10, 200, 255],
        };
        assert_eq!(Pgm::decode(&img.encode(), p()).unwrap(), img);
        let mut with_comment = b"P5\n# made by hand\n2 2\n255\n".to_vec();
        with_comment.extend([0, 10, 200, 255]);
        assert_eq!(Pgm::decode(&with_comment, p()).unwrap(), img);
        let bytes = img.encode();
        assert!(Pgm::decode(&bytes[..bytes.len() - 1], p()).is_err());
        assert!(Pgm::decode(b"P2\n1 1\n255\n0", p()).is_err());
    }

    #[test]
    fn ply_round_trip() {
        let mut mesh = TriangleMesh {
            vertices: vec![Vec3::new(0.0, 0.1, 0.2), Vec3::new(1.0 / 3.0, 0.0, 0.0), Vec3::new(0.0, 1.0, -0.5)],
            triangles: vec![[0, 1, 2]],
            normals: None,
        };
        let text = format_ply(&mesh);
        assert!(text.starts_with("ply\nformat ascii 1.0\nelement vertex 3\n"));
        assert_eq!(parse_ply(&text, p()).unwrap(), mesh);
        mesh.compute_normals();
        assert_eq!(parse_ply(&format_ply(&mesh), p()).unwrap(), mesh);
        let bad = text.replace("3 0 1 2", "3 0 1 7");
        assert!(parse_ply(&bad, p()).is_err());
    }

    #[test]
    fn run_config_round_trip_and_unknown_keys() {
        let cfg = RunConfig::default();
        assert_eq!(RunConfig::from_toml(&cfg.to_toml(), p()).unwrap(), cfg);
        let partial = RunConfig::from_toml("seed = 7\nn_planes = 32\n", p()).unwrap();
        assert_eq!((partial.seed, partial.n_planes, partial.width), (7, 32, 64));
        let e = RunConfig::from_toml("sede = 7\n", Path::new("cfg.toml")).unwrap_err();
        assert!(e.to_string().contains("cfg.toml") && e.is_data_error(), "{e}");
        assert!(RunConfig::from_toml("features = \"sift\"\n", p()).is_err());
    }

    #[test]
    fn channel_strings() {
        assert_eq!(parse_channels("all").unwrap(), ChannelConfig::all());
        assert_eq!(parse_channels("dot").unwrap(), ChannelConfig::dots_only());
        for bits in 0..128 {
            let c = ChannelConfig::from_bits(bits);
            assert_eq!(parse_channels(&c.label()).unwrap(), c);
        }
        assert!(parse_channels("dot+color").is_err());
    }

    #[test]
    fn kv_parsing() {
        let kv = parse_kv("# report\nabs_rel=0.1\n\nrmse = 2\n", p()).unwrap();
        assert_eq!(kv, vec![("abs_rel".into(), "0.1".into()), ("rmse".into(), "2".into())]);
        let e = parse_kv("a=1\noops\n", p()).unwrap_err();
        assert!(e.to_string().contains("offset 4"), "{e}");
    }

    #[test]
    fn atomic_write_replaces() {
        let dir = std::env::temp_dir().join(format!("recon-io-{}", std::process::id()));
        let f = dir.join("a/b.txt");
        write_atomic(&f, b"one").unwrap();
        write_atomic(&f, b"two").unwrap();
        assert_eq!(fs::read(&f).unwrap(), b"two");
        assert!(!dir.join("a/b.txt.tmp").exists());
        fs::remove_dir_all(&dir).unwrap();
    }
}
