//! Dense TSDF integration of depth maps and marching-cubes mesh extraction.

use std::collections::HashMap;
use std::time::{Duration, Instant};

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::{Intrinsics, Pose, Vec2, Vec3};
use crate::keyframing::Frame;
use crate::maps::DepthMap;
use crate::mc_tables::{EDGE_TABLE, TRI_TABLE};

pub const DEFAULT_VOXEL_SIZE: f64 = 0.04;
pub const DEFAULT_TRUNCATION_VOXELS: f64 = 3.0;
pub const DEFAULT_MAX_WEIGHT: f64 = 100.0;

/// Dense grid of truncated signed distances. Voxel `(x, y, z)` has its center
/// at `origin + voxel_size * (x, y, z)`; x varies fastest in storage.
#[derive(Debug, Clone, PartialEq)]
pub struct TsdfVolume {
    pub origin: Vec3,
    pub voxel_size: f64,
    pub dims: [usize; 3],
    /// Distance divided by the truncation, in `[-1, 1]`; 1 where unobserved.
    pub tsdf: Vec<f64>,
    pub weight: Vec<f64>,
}

impl TsdfVolume {
    pub fn new(origin: Vec3, voxel_size: f64, dims: [usize; 3]) -> Result<Self> {
        if !(voxel_size > 0.0) || dims.contains(&0) {
            return Err(Error::domain(format!(
                "TSDF volume needs a positive voxel size and non-zero dims, got {voxel_size}, {dims:?}"
            )));
        }
        let n = dims[0] * dims[1] * dims[2];
        Ok(Self {
            origin,
            voxel_size,
            dims,
            tsdf: vec![1.0; n],
            weight: vec![0.0; n],
        })
    }

    /// Smallest grid whose voxel centers cover the box `[min, max]`.
    pub fn covering(min: Vec3, max: Vec3, voxel_size: f64) -> Result<Self> {
        if !(voxel_size > 0.0) || (0..3).any(|a| !(max[a] > min[a])) {
            return Err(Error::domain("TSDF bounds must satisfy min < max on every axis"));
        }
        let dims = [0, 1, 2].map(|a| ((max[a] - min[a]) / voxel_size).ceil() as usize + 1);
        Self::new(min, voxel_size, dims)
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        (z * self.dims[1] + y) * self.dims[0] + x
    }

    #[inline]
    pub fn center(&self, x: usize, y: usize, z: usize) -> Vec3 {
        self.origin + Vec3::new(x as f64, y as f64, z as f64) * self.voxel_size
    }

    pub fn len(&self) -> usize {
        self.tsdf.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tsdf.is_empty()
    }

    pub fn observed_count(&self) -> usize {
        self.weight.iter().filter(|w| **w > 0.0).count()
    }

    /// Projective update from one depth map; returns the wall-clock time spent.
    /// Depth is looked up at the nearest pixel of each voxel's projection.
    pub fn integrate(
        &mut self,
        depth: &DepthMap,
        pose: &Pose,
        k: &Intrinsics,
        truncation: f64,
        max_weight: f64,
    ) -> Result<Duration> {
        if !(truncation >= self.voxel_size) {
            return Err(Error::domain(format!(
                "truncation {truncation} must be at least the voxel size {}",
                self.voxel_size
            )));
        }
        if !(max_weight >= 1.0) {
            return Err(Error::domain(format!("max_weight must be >= 1, got {max_weight}")));
        }
        if depth.width != k.width || depth.height != k.height {
            return Err(Error::contract("depth map size does not match the intrinsics"));
        }
        let start = Instant::now();
        let [nx, ny, _] = self.dims;
        let rt = pose.rotation.transpose();
        let t = pose.translation;
        let (origin, vs) = (self.origin, self.voxel_size);
        self.tsdf
            .par_chunks_mut(nx * ny)
            .zip(self.weight.par_chunks_mut(nx * ny))
            .enumerate()
            .for_each(|(z, (tsdf, weight))| {
                for y in 0..ny {
                    for x in 0..nx {
                        let p = origin + Vec3::new(x as f64, y as f64, z as f64) * vs;
                        let c = rt * (p - t);
                        if c.z <= 0.0 {
                            continue;
                        }
                        let px = Vec2::new(k.fx * c.x / c.z + k.cx, k.fy * c.y / c.z + k.cy);
                        if !k.contains(&px) {
                            continue;
                        }
                        let Some(d) = depth.get(px.x.round() as usize, px.y.round() as usize) else {
                            continue;
                        };
                        let sdf = d - c.z;
                        if sdf < -truncation {
                            continue;
                        }
                        let new = (sdf / truncation).clamp(-1.0, 1.0);
                        let i = y * nx + x;
                        let w = weight[i];
                        tsdf[i] = (w * tsdf[i] + new) / (w + 1.0);
                        weight[i] = (w + 1.0).min(max_weight);
                    }
                }
            });
        Ok(start.elapsed())
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TriangleMesh {
    pub vertices: Vec<Vec3>,
    pub triangles: Vec<[u32; 3]>,
    pub normals: Option<Vec<Vec3>>,
}

impl TriangleMesh {
    pub fn is_empty(&self) -> bool {
        self.triangles.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.vertices.len() as u32;
        if self.triangles.iter().flatten().any(|&i| i >= n) {
            return Err(Error::contract("triangle index out of range"));
        }
        if let Some(normals) = &self.normals {
            if normals.len() != self.vertices.len() {
                return Err(Error::contract("normal count differs from vertex count"));
            }
        }
        Ok(())
    }

    pub fn triangle_area(&self, t: &[u32; 3]) -> f64 {
        let [a, b, c] = t.map(|i| self.vertices[i as usize]);
        0.5 * (b - a).cross(&(c - a)).norm()
    }

    pub fn area(&self) -> f64 {
        self.triangles.iter().map(|t| self.triangle_area(t)).sum()
    }

    /// `V - E + F` over referenced vertices and unique undirected edges.
    pub fn euler_characteristic(&self) -> i64 {
        let mut edges = std::collections::HashSet::new();
        let mut used = std::collections::HashSet::new();
        for t in &self.triangles {
            for e in 0..3 {
                let (a, b) = (t[e], t[(e + 1) % 3]);
                edges.insert((a.min(b), a.max(b)));
                used.insert(a);
            }
        }
        used.len() as i64 - edges.len() as i64 + self.triangles.len() as i64
    }

    /// Area-weighted vertex normals from face normals.
    pub fn compute_normals(&mut self) {
        let mut n = vec![Vec3::zeros(); self.vertices.len()];
        for t in &self.triangles {
            let [a, b, c] = t.map(|i| self.vertices[i as usize]);
            let f = (b - a).cross(&(c - a));
            for &i in t {
                n[i as usize] += f;
            }
        }
        for v in &mut n {
            let len = v.norm();
            if len > 0.0 {
                *v /= len;
            }
        }
        self.normals = Some(n);
    }
}

const CORNERS: [[usize; 3]; 8] = [
    [0, 0, 0],
    [0, 1, 0],
    [1, 1, 0],
    [1, 0, 0],
    [0, 0, 1],
    [0, 1, 1],
    [1, 1, 1],
    [1, 0, 1],
];

const EDGES: [(usize, usize); 12] = [
    (0, 1),
    (1, 2),
    (3, 2),
    (0, 3),
    (4, 5),
    (5, 6),
    (7, 6),
    (4, 7),
    (0, 4),
    (1, 5),
    (2, 6),
    (3, 7),
];

/// Edge of the voxel grid: lower endpoint's linear index and axis.
type EdgeKey = (usize, u8);

/// Extract the zero level set. Cubes touching an unobserved voxel are skipped.
/// Triangles are wound counter-clockwise seen from the positive (free-space)
/// side, and vertices are shared between neighboring cubes.
pub fn marching_cubes(vol: &TsdfVolume) -> TriangleMesh {
    let [nx, ny, nz] = vol.dims;
    if nx < 2 || ny < 2 || nz < 2 {
        return TriangleMesh::default();
    }
    let slabs: Vec<Vec<[EdgeKey; 3]>> = (0..nz - 1)
        .into_par_iter()
        .map(|z| {
            let mut tris = Vec::new();
            for y in 0..ny - 1 {
                for x in 0..nx - 1 {
                    let idx = CORNERS.map(|c| vol.index(x + c[0], y + c[1], z + c[2]));
                    if idx.iter().any(|&i| vol.weight[i] <= 0.0) {
                        continue;
                    }
                    let mut case = 0usize;
                    for (b, &i) in idx.iter().enumerate() {
                        if vol.tsdf[i] < 0.0 {
                            case |= 1 << b;
                        }
                    }
                    if EDGE_TABLE[case] == 0 {
                        continue;
                    }
                    let key = |e: i8| -> EdgeKey {
                        let (a, b) = EDGES[e as usize];
                        let (ca, cb) = (CORNERS[a], CORNERS[b]);
                        let axis = (0..3).find(|&d| ca[d] != cb[d]).unwrap();
                        let lo = if ca[axis] < cb[axis] { idx[a] } else { idx[b] };
                        (lo, axis as u8)
                    };
                    for t in TRI_TABLE[case].chunks(3).take_while(|t| t[0] >= 0) {
                        tris.push([key(t[0]), key(t[1]), key(t[2])]);
                    }
                }
            }
            tris
        })
        .collect();

    let mut mesh = TriangleMesh::default();
    let mut ids: HashMap<EdgeKey, u32> = HashMap::new();
    let stride = [1, nx, nx * ny];
    let mut vertex = |key: EdgeKey, mesh: &mut TriangleMesh| -> u32 {
        *ids.entry(key).or_insert_with(|| {
            let (lo, axis) = key;
            let hi = lo + stride[axis as usize];
            let (va, vb) = (vol.tsdf[lo], vol.tsdf[hi]);
            let t = va / (va - vb);
            let x = lo % nx;
            let y = (lo / nx) % ny;
            let z = lo / (nx * ny);
            let mut p = vol.center(x, y, z);
            p[axis as usize] += t * vol.voxel_size;
            mesh.vertices.push(p);
            (mesh.vertices.len() - 1) as u32
        })
    };
    let min_area = 1e-12 * vol.voxel_size * vol.voxel_size;
    for slab in slabs {
        for [a, b, c] in slab {
            let tri = [vertex(a, &mut mesh), vertex(b, &mut mesh), vertex(c, &mut mesh)];
            if tri[0] == tri[1] || tri[1] == tri[2] || tri[0] == tri[2] {
                continue;
            }
            if mesh.triangle_area(&tri) <= min_area {
                continue;
            }
            mesh.triangles.push(tri);
        }
    }
    mesh
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FusionConfig {
    pub voxel_size: f64,
    /// Truncation distance in meters.
    pub truncation: f64,
    pub max_weight: f64,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            voxel_size: DEFAULT_VOXEL_SIZE,
            truncation: DEFAULT_TRUNCATION_VOXELS * DEFAULT_VOXEL_SIZE,
            max_weight: DEFAULT_MAX_WEIGHT,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LatencyStats {
    pub mean_ms: f64,
    pub p50_ms: f64,
    pub p95_ms: f64,
}

/// Mean and nearest-rank percentiles of a latency sample in milliseconds.
pub fn latency_stats(ms: &[f64]) -> LatencyStats {
    if ms.is_empty() {
        return LatencyStats::default();
    }
    let mut s = ms.to_vec();
    s.sort_by(f64::total_cmp);
    let rank = |p: f64| s[((p * s.len() as f64).ceil() as usize).clamp(1, s.len()) - 1];
    LatencyStats {
        mean_ms: s.iter().sum::<f64>() / s.len() as f64,
        p50_ms: rank(0.5),
        p95_ms: rank(0.95),
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrameLatency {
    pub frame_id: usize,
    pub depth_ms: f64,
    pub integrate_ms: f64,
}

#[derive(Debug, Clone)]
pub struct FusionOutput {
    pub mesh: TriangleMesh,
    pub volume: TsdfVolume,
    pub latencies: Vec<FrameLatency>,
}

impl FusionOutput {
    pub fn integrate_stats(&self) -> LatencyStats {
        latency_stats(&self.latencies.iter().map(|l| l.integrate_ms).collect::<Vec<_>>())
    }

    pub fn depth_stats(&self) -> LatencyStats {
        latency_stats(&self.latencies.iter().map(|l| l.depth_ms).collect::<Vec<_>>())
    }

    /// One line per frame: `frame_id integrate_ms`.
    pub fn latency_report(&self) -> String {
        self.latencies
            .iter()
            .map(|l| format!("{} {:.4}\n", l.frame_id, l.integrate_ms))
            .collect()
    }
}

/// Integrate the depth of every keyframe in order and extract the final mesh.
/// `depth_of` supplies each keyframe's depth map (ground truth or a predictor).
pub fn fuse_pipeline(
    keyframes: &[Frame],
    mut depth_of: impl FnMut(&Frame) -> Result<DepthMap>,
    bounds: (Vec3, Vec3),
    config: &FusionConfig,
) -> Result<FusionOutput> {
    let mut volume = TsdfVolume::covering(bounds.0, bounds.1, config.voxel_size)?;
    let mut latencies = Vec::with_capacity(keyframes.len());
    for f in keyframes {
        let start = Instant::now();
        let depth = depth_of(f)?;
        let depth_ms = start.elapsed().as_secs_f64() * 1e3;
        let t = volume.integrate(&depth, &f.pose, &f.intrinsics, config.truncation, config.max_weight)?;
        latencies.push(FrameLatency {
            frame_id: f.id,
            depth_ms,
            integrate_ms: t.as_secs_f64() * 1e3,
        });
    }
    let mut mesh = marching_cubes(&volume);
    if !mesh.is_empty() {
        mesh.compute_normals();
    }
    Ok(FusionOutput {
        mesh,
        volume,
        latencies,
    })
}
