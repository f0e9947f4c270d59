//! Depth-map and mesh accuracy metrics.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::fusion::TriangleMesh;
use crate::geometry::{project, Intrinsics, Pose, Vec3};
use crate::maps::DepthMap;

pub const DEFAULT_MESH_THRESHOLD_CM: f64 = 5.0;
pub const DEFAULT_MESH_SAMPLES: usize = 200_000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DepthMetrics {
    pub abs_diff: f64,
    pub abs_rel: f64,
    pub sq_rel: f64,
    pub rmse: f64,
    /// Percentages.
    pub delta_1_05: f64,
    pub delta_1_25: f64,
    pub valid_pixel_count: usize,
}

impl DepthMetrics {
    /// `key=value` lines.
    pub fn to_kv(&self) -> String {
        format!(
            "abs_diff={}\nabs_rel={}\nsq_rel={}\nrmse={}\ndelta_1_05={}\ndelta_1_25={}\nvalid_pixel_count={}\n",
            self.abs_diff, self.abs_rel, self.sq_rel, self.rmse, self.delta_1_05, self.delta_1_25, self.valid_pixel_count
        )
    }
}

/// Accumulates per-pixel errors so several maps can be scored together.
#[derive(Debug, Clone, Copy, Default)]
pub struct DepthMetricAccumulator {
    abs: f64,
    rel: f64,
    sq_rel: f64,
    sq: f64,
    d105: usize,
    d125: usize,
    n: usize,
}

impl DepthMetricAccumulator {
    pub fn add(&mut self, pred: &DepthMap, gt: &DepthMap) -> Result<()> {
        if !pred.same_shape(gt) {
            return Err(Error::contract(format!(
                "depth maps differ in size: {}x{} vs {}x{}",
                pred.width, pred.height, gt.width, gt.height
            )));
        }
        for i in 0..gt.len() {
            if !(pred.valid[i] && gt.valid[i]) {
                continue;
            }
            let (p, g) = (pred.depth[i], gt.depth[i]);
            let e = p - g;
            self.abs += e.abs();
            self.rel += e.abs() / g;
            self.sq_rel += e * e / g;
            self.sq += e * e;
            let ratio = (p / g).max(g / p);
            self.d105 += usize::from(ratio < 1.05);
            self.d125 += usize::from(ratio < 1.25);
            self.n += 1;
        }
        Ok(())
    }

    pub fn finish(&self) -> Result<DepthMetrics> {
        if self.n == 0 {
            return Err(Error::Empty("no pixel is valid in both prediction and ground truth".into()));
        }
        let n = self.n as f64;
        Ok(DepthMetrics {
            abs_diff: self.abs / n,
            abs_rel: self.rel / n,
            sq_rel: self.sq_rel / n,
            rmse: (self.sq / n).sqrt(),
            delta_1_05: 100.0 * self.d105 as f64 / n,
            delta_1_25: 100.0 * self.d125 as f64 / n,
            valid_pixel_count: self.n,
        })
    }
}

/// Metrics over pixels valid in both maps.
pub fn depth_metrics(pred: &DepthMap, gt: &DepthMap) -> Result<DepthMetrics> {
    let mut acc = DepthMetricAccumulator::default();
    acc.add(pred, gt)?;
    acc.finish()
}

/// Area-weighted uniform samples on the mesh surface.
pub fn sample_surface(mesh: &TriangleMesh, n: usize, seed: u64) -> Result<Vec<Vec3>> {
    if mesh.is_empty() || n == 0 {
        return Err(Error::domain("surface sampling needs a non-empty mesh and n >= 1"));
    }
    let mut cdf = Vec::with_capacity(mesh.triangles.len());
    let mut total = 0.0;
    for t in &mesh.triangles {
        total += mesh.triangle_area(t);
        cdf.push(total);
    }
    if !(total > 0.0) {
        return Err(Error::domain("mesh has zero surface area"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..n)
        .map(|_| {
            let x = rng.gen::<f64>() * total;
            let ti = cdf.partition_point(|c| *c <= x).min(cdf.len() - 1);
            let [a, b, c] = mesh.triangles[ti].map(|i| mesh.vertices[i as usize]);
            let (r1, r2): (f64, f64) = (rng.gen(), rng.gen());
            let s = r1.sqrt();
            a * (1.0 - s) + b * (s * (1.0 - r2)) + c * (s * r2)
        })
        .collect())
}

/// Uniform hash grid over a point set for exact nearest-neighbor queries.
#[derive(Debug, Clone)]
pub struct PointGrid<'a> {
    points: &'a [Vec3],
    cell: f64,
    cells: HashMap<[i64; 3], Vec<u32>>,
    lo: [i64; 3],
    hi: [i64; 3],
}

impl<'a> PointGrid<'a> {
    pub fn new(points: &'a [Vec3], cell: f64) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::domain("nearest-neighbor index over an empty point set"));
        }
        if !(cell > 0.0) {
            return Err(Error::domain(format!("grid cell size must be positive, got {cell}")));
        }
        let mut cells: HashMap<[i64; 3], Vec<u32>> = HashMap::new();
        let mut lo = [i64::MAX; 3];
        let mut hi = [i64::MIN; 3];
        for (i, p) in points.iter().enumerate() {
            let c = Self::key(p, cell);
            for a in 0..3 {
                lo[a] = lo[a].min(c[a]);
                hi[a] = hi[a].max(c[a]);
            }
            cells.entry(c).or_default().push(i as u32);
        }
        Ok(Self {
            points,
            cell,
            cells,
            lo,
            hi,
        })
    }

    fn key(p: &Vec3, cell: f64) -> [i64; 3] {
        [0, 1, 2].map(|a| (p[a] / cell).floor() as i64)
    }

    fn scan(&self, q: &Vec3, ids: &[u32], best: &mut (f64, usize)) {
        for &i in ids {
            let d = (self.points[i as usize] - q).norm_squared();
            if d < best.0 || (d == best.0 && (i as usize) < best.1) {
                *best = (d, i as usize);
            }
        }
    }

    /// Distance to and index of the nearest point (smallest index on ties).
    pub fn nearest(&self, q: &Vec3) -> (f64, usize) {
        let c = Self::key(q, self.cell);
        let mut best = (f64::INFINITY, usize::MAX);
        // rings beyond the occupied box add nothing
        let max_ring = (0..3)
            .map(|a| (c[a] - self.lo[a]).abs().max((self.hi[a] - c[a]).abs()))
            .max()
            .unwrap();
        let mut r = 0i64;
        loop {
            let ring_cells = (2 * r + 1).pow(3) - if r > 0 { (2 * r - 1).pow(3) } else { 0 };
            if ring_cells as usize > self.cells.len() {
                // cheaper to visit every occupied cell once
                for (k, ids) in &self.cells {
                    let ring = (0..3).map(|a| (k[a] - c[a]).abs()).max().unwrap();
                    if ring >= r && self.cell_lower_bound(q, k) <= best.0 {
                        self.scan(q, ids, &mut best);
                    }
                }
                break;
            }
            for dz in -r..=r {
                for dy in -r..=r {
                    for dx in -r..=r {
                        if dx.abs().max(dy.abs()).max(dz.abs()) != r {
                            continue;
                        }
                        if let Some(ids) = self.cells.get(&[c[0] + dx, c[1] + dy, c[2] + dz]) {
                            self.scan(q, ids, &mut best);
                        }
                    }
                }
            }
            // anything in ring r + 1 is at least r cells away
            let reach = r as f64 * self.cell;
            if best.0 < reach * reach || r >= max_ring {
                break;
            }
            r += 1;
        }
        (best.0.sqrt(), best.1)
    }

    fn cell_lower_bound(&self, q: &Vec3, k: &[i64; 3]) -> f64 {
        let mut d2 = 0.0;
        for a in 0..3 {
            let lo = k[a] as f64 * self.cell;
            let hi = lo + self.cell;
            let d = if q[a] < lo {
                lo - q[a]
            } else if q[a] > hi {
                q[a] - hi
            } else {
                0.0
            };
            d2 += d * d;
        }
        d2
    }
}

/// Nearest-neighbor distances from every query point to `targets`.
pub fn nearest_distances(queries: &[Vec3], targets: &[Vec3], cell: f64) -> Result<Vec<f64>> {
    let grid = PointGrid::new(targets, cell)?;
    Ok(queries.par_iter().map(|q| grid.nearest(q).0).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MeshMetrics {
    /// Centimeters.
    pub comp: f64,
    pub acc: f64,
    pub chamfer: f64,
    pub prec: f64,
    pub recall: f64,
    pub fscore: f64,
    pub threshold: f64,
}

impl MeshMetrics {
    pub fn to_kv(&self) -> String {
        format!(
            "comp={}\nacc={}\nchamfer={}\nprec={}\nrecall={}\nfscore={}\nthreshold={}\n",
            self.comp, self.acc, self.chamfer, self.prec, self.recall, self.fscore, self.threshold
        )
    }
}

/// Point-set accuracy and completeness in centimeters; inputs in meters.
pub fn mesh_metrics(pred: &[Vec3], gt: &[Vec3], threshold_cm: f64) -> Result<MeshMetrics> {
    if pred.is_empty() || gt.is_empty() {
        return Err(Error::domain("mesh metrics need non-empty prediction and ground-truth point sets"));
    }
    if !(threshold_cm > 0.0) {
        return Err(Error::domain(format!("threshold must be positive, got {threshold_cm}")));
    }
    let cell = threshold_cm / 100.0;
    let to_pred = nearest_distances(pred, gt, cell)?;
    let to_gt = nearest_distances(gt, pred, cell)?;
    let mean_cm = |d: &[f64]| 100.0 * d.iter().sum::<f64>() / d.len() as f64;
    let within = |d: &[f64]| d.iter().filter(|x| **x * 100.0 <= threshold_cm).count() as f64 / d.len() as f64;
    let acc = mean_cm(&to_pred);
    let comp = mean_cm(&to_gt);
    let prec = within(&to_pred);
    let recall = within(&to_gt);
    let fscore = if prec + recall > 0.0 {
        2.0 * prec * recall / (prec + recall)
    } else {
        0.0
    };
    Ok(MeshMetrics {
        comp,
        acc,
        chamfer: (acc + comp) / 2.0,
        prec,
        recall,
        fscore,
        threshold: threshold_cm,
    })
}

/// Viewing frustum of one ground-truth camera, cut at `far`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Frustum {
    pub pose: Pose,
    pub intrinsics: Intrinsics,
    pub far: f64,
}

impl Frustum {
    pub fn contains(&self, p: &Vec3) -> bool {
        let c = self.pose.inverse_transform_point(p);
        if c.z > self.far {
            return false;
        }
        let proj = project(&c, &self.intrinsics);
        proj.in_front && self.intrinsics.contains(&proj.pixel)
    }
}

/// Drop triangles whose centroid lies outside every frustum; unreferenced
/// vertices are removed and the rest renumbered in order.
pub fn apply_cull_mask(mesh: &TriangleMesh, frusta: &[Frustum]) -> TriangleMesh {
    let keep: Vec<bool> = mesh
        .triangles
        .par_iter()
        .map(|t| {
            let [a, b, c] = t.map(|i| mesh.vertices[i as usize]);
            let centroid = (a + b + c) / 3.0;
            frusta.iter().any(|f| f.contains(&centroid))
        })
        .collect();
    let mut remap = vec![u32::MAX; mesh.vertices.len()];
    let mut out = TriangleMesh::default();
    let mut normals = mesh.normals.as_ref().map(|_| Vec::new());
    for (t, _) in mesh.triangles.iter().zip(&keep).filter(|(_, k)| **k) {
        let tri = t.map(|i| {
            let i = i as usize;
            if remap[i] == u32::MAX {
                remap[i] = out.vertices.len() as u32;
                out.vertices.push(mesh.vertices[i]);
                if let (Some(dst), Some(src)) = (normals.as_mut(), mesh.normals.as_ref()) {
                    dst.push(src[i]);
                }
            }
            remap[i]
        });
        out.triangles.push(tri);
    }
    out.normals = normals;
    out
}
