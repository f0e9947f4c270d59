//! Metadata-augmented plane-sweep volume and its reductions to a per-plane cost.
//!
//! For every reference pixel `(i, j)` and depth plane `k` the volume holds one
//! channel vector combining reference and warped source features with the
//! geometric metadata of the sweep (rays, depths, angles, pose distances and
//! validity). Source slots follow the order in which sources are supplied.

use std::io::{Read, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::FeatureMap;
use crate::geometry::{pose_distance, warp_world_point, Intrinsics, Mat3, Pose, Vec2, Vec3};
use crate::maps::DepthMap;
use crate::tinynet::Mlp;

/// Maximum number of source views a volume can hold.
/// Mean-dot cost of a cell no source sees; the lowest cosine of unit features.
pub const UNOBSERVED_COST: f64 = -1.0;

pub const MAX_SOURCES: usize = 8;

/// Fronto-parallel plane depths, strictly increasing.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthPlanes {
    depths: Vec<f64>,
}

/// Planes spaced uniformly in inverse depth between `d_min` and `d_max`.
pub fn make_depth_planes(d_min: f64, d_max: f64, count: usize) -> Result<DepthPlanes> {
    if !(d_min > 0.0 && d_min < d_max && d_max.is_finite()) || count < 2 {
        return Err(Error::domain(format!(
            "depth planes need 0 < d_min < d_max and at least 2 planes, got {d_min}, {d_max}, {count}"
        )));
    }
    let (a, b) = (1.0 / d_min, 1.0 / d_max);
    let last = (count - 1) as f64;
    let mut depths: Vec<f64> = (0..count)
        .map(|k| {
            let s = k as f64 / last;
            1.0 / (a + s * (b - a))
        })
        .collect();
    depths[0] = d_min;
    depths[count - 1] = d_max;
    Ok(DepthPlanes { depths })
}

impl DepthPlanes {
    pub fn len(&self) -> usize {
        self.depths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.depths.is_empty()
    }

    pub fn depths(&self) -> &[f64] {
        &self.depths
    }

    pub fn d_min(&self) -> f64 {
        self.depths[0]
    }

    pub fn d_max(&self) -> f64 {
        self.depths[self.depths.len() - 1]
    }

    /// Spacing between neighboring planes in inverse depth.
    pub fn inverse_spacing(&self) -> f64 {
        (1.0 / self.d_min() - 1.0 / self.d_max()) / (self.len() - 1) as f64
    }

    /// Plane nearest to `depth` in inverse depth.
    pub fn nearest_index(&self, depth: f64) -> usize {
        let inv = 1.0 / depth;
        let s = (1.0 / self.d_min() - inv) / self.inverse_spacing();
        (s.round().max(0.0) as usize).min(self.len() - 1)
    }
}

/// Which metadata groups are appended to the volume.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ChannelConfig {
    pub dots: bool,
    pub feats: bool,
    pub mask: bool,
    /// Reference plane depth and reprojected source depths.
    pub depth: bool,
    pub ray: bool,
    pub angle: bool,
    pub pose_distance: bool,
}

impl Default for ChannelConfig {
    fn default() -> Self {
        Self::all()
    }
}

impl ChannelConfig {
    pub fn all() -> Self {
        Self {
            dots: true,
            feats: true,
            mask: true,
            depth: true,
            ray: true,
            angle: true,
            pose_distance: true,
        }
    }

    /// The dot-product-only baseline.
    pub fn dots_only() -> Self {
        Self {
            dots: true,
            feats: false,
            mask: false,
            depth: false,
            ray: false,
            angle: false,
            pose_distance: false,
        }
    }

    pub fn bits(&self) -> u32 {
        [self.dots, self.feats, self.mask, self.depth, self.ray, self.angle, self.pose_distance]
            .iter()
            .enumerate()
            .map(|(i, &b)| (b as u32) << i)
            .sum()
    }

    pub fn from_bits(bits: u32) -> Self {
        let b = |i: u32| bits & (1 << i) != 0;
        Self {
            dots: b(0),
            feats: b(1),
            mask: b(2),
            depth: b(3),
            ray: b(4),
            angle: b(5),
            pose_distance: b(6),
        }
    }

    /// Compact label such as `dot+feats+mask`.
    pub fn label(&self) -> String {
        let names = ["dot", "feats", "mask", "depth", "ray", "angle", "pose"];
        let on: Vec<&str> = names
            .iter()
            .enumerate()
            .filter(|(i, _)| self.bits() & (1 << i) != 0)
            .map(|(_, n)| *n)
            .collect();
        if on.is_empty() {
            "none".into()
        } else {
            on.join("+")
        }
    }
}

/// Channel offsets inside one cell vector. Absent groups have length zero.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ChannelLayout {
    pub features: usize,
    pub sources: usize,
    pub config: ChannelConfig,
    pub ref_feats: usize,
    pub src_feats: usize,
    pub dots: usize,
    pub ref_ray: usize,
    pub src_rays: usize,
    pub ref_depth: usize,
    pub src_depths: usize,
    pub angles: usize,
    pub pose_distances: usize,
    pub masks: usize,
    pub len: usize,
}

impl ChannelLayout {
    pub fn new(features: usize, sources: usize, config: ChannelConfig) -> Self {
        let (f, n, c) = (features, sources, config);
        let mut at = 0;
        let mut take = |on: bool, width: usize| {
            let o = at;
            if on {
                at += width;
            }
            o
        };
        let ref_feats = take(c.feats, f);
        let src_feats = take(c.feats, n * f);
        let dots = take(c.dots, n);
        let ref_ray = take(c.ray, 3);
        let src_rays = take(c.ray, 3 * n);
        let ref_depth = take(c.depth, 1);
        let src_depths = take(c.depth, n);
        let angles = take(c.angle, n);
        let pose_distances = take(c.pose_distance, n);
        let masks = take(c.mask, n);
        Self {
            features,
            sources,
            config,
            ref_feats,
            src_feats,
            dots,
            ref_ray,
            src_rays,
            ref_depth,
            src_depths,
            angles,
            pose_distances,
            masks,
            len: at,
        }
    }

    /// Closed-form channel count.
    pub fn channel_count(features: usize, sources: usize, c: ChannelConfig) -> usize {
        let (f, n) = (features, sources);
        c.feats as usize * f * (1 + n)
            + c.dots as usize * n
            + c.ray as usize * 3 * (1 + n)
            + c.depth as usize * (1 + n)
            + (c.angle as usize + c.pose_distance as usize + c.mask as usize) * n
    }
}

/// One camera taking part in a sweep.
#[derive(Debug, Clone, Copy)]
pub struct SweepView<'a> {
    pub features: &'a FeatureMap,
    pub pose: Pose,
    pub intrinsics: Intrinsics,
}

/// Precomputed sweep state; produces cell vectors on demand.
#[derive(Debug, Clone)]
pub struct SweepContext<'a> {
    reference: SweepView<'a>,
    sources: Vec<SweepView<'a>>,
    planes: DepthPlanes,
    layout: ChannelLayout,
    pose_distances: Vec<f64>,
    ref_rot_t: Mat3,
}

impl<'a> SweepContext<'a> {
    /// `slots` is the fixed number of source slots (zero-padded beyond the
    /// supplied sources).
    pub fn new(
        reference: SweepView<'a>,
        sources: Vec<SweepView<'a>>,
        planes: DepthPlanes,
        config: ChannelConfig,
        slots: usize,
    ) -> Result<Self> {
        if sources.is_empty() {
            return Err(Error::domain("a sweep needs at least one source view"));
        }
        if sources.len() > slots || slots > MAX_SOURCES {
            return Err(Error::domain(format!(
                "{} sources do not fit {slots} slots (max {MAX_SOURCES})",
                sources.len()
            )));
        }
        let f = reference.features.channels;
        if sources.iter().any(|s| s.features.channels != f) {
            return Err(Error::contract("source and reference feature channel counts differ"));
        }
        let rf = reference.features;
        if rf.width != reference.intrinsics.width || rf.height != reference.intrinsics.height {
            return Err(Error::contract("reference features do not match its intrinsics"));
        }
        for s in &sources {
            if s.features.width != s.intrinsics.width || s.features.height != s.intrinsics.height {
                return Err(Error::contract("source features do not match its intrinsics"));
            }
        }
        let pose_distances = sources
            .iter()
            .map(|s| pose_distance(&reference.pose, &s.pose))
            .collect();
        Ok(Self {
            ref_rot_t: reference.pose.rotation.transpose(),
            reference,
            sources,
            planes,
            layout: ChannelLayout::new(f, slots, config),
            pose_distances,
        })
    }

    pub fn layout(&self) -> &ChannelLayout {
        &self.layout
    }

    pub fn planes(&self) -> &DepthPlanes {
        &self.planes
    }

    pub fn width(&self) -> usize {
        self.reference.intrinsics.width
    }

    pub fn height(&self) -> usize {
        self.reference.intrinsics.height
    }

    pub fn reference(&self) -> &SweepView<'a> {
        &self.reference
    }

    /// Write the channel vector of cell `(k, i, j)` (plane, row, column) into `out`
    /// and return the number of valid sources.
    pub fn fill_cell(&self, k: usize, i: usize, j: usize, out: &mut [f64]) -> usize {
        let l = &self.layout;
        let c = l.config;
        let f = l.features;
        debug_assert_eq!(out.len(), l.len);
        out.fill(0.0);

        let z = self.planes.depths[k];
        let k_ref = &self.reference.intrinsics;
        let x_cam = k_ref.unproject_dir(&Vec2::new(j as f64, i as f64)) * z;
        let x_world = self.reference.pose.transform_point(&x_cam);
        let r0 = x_cam.normalize();
        let f0 = self.reference.features.pixel(j, i);

        if c.feats {
            out[l.ref_feats..l.ref_feats + f].copy_from_slice(f0);
        }
        if c.ray {
            out[l.ref_ray..l.ref_ray + 3].copy_from_slice(r0.as_slice());
        }
        if c.depth {
            out[l.ref_depth] = z;
        }

        let mut sampled = vec![0.0; f];
        let mut valid_count = 0;
        for (n, src) in self.sources.iter().enumerate() {
            let warp = warp_world_point(&x_world, &src.pose, &src.intrinsics);
            if !warp.valid {
                continue;
            }
            valid_count += 1;
            src.features.sample_bilinear(&warp.src_pixel, &mut sampled);
            if c.feats {
                out[l.src_feats + n * f..l.src_feats + (n + 1) * f].copy_from_slice(&sampled);
            }
            if c.dots {
                out[l.dots + n] = f0.iter().zip(&sampled).map(|(a, b)| a * b).sum();
            }
            if c.ray || c.angle {
                // source ray expressed in the reference camera frame
                let rn: Vec3 = self.ref_rot_t * (x_world - src.pose.translation).normalize();
                if c.ray {
                    out[l.src_rays + 3 * n..l.src_rays + 3 * n + 3].copy_from_slice(rn.as_slice());
                }
                if c.angle {
                    out[l.angles + n] = r0.dot(&rn).clamp(-1.0, 1.0).acos();
                }
            }
            if c.depth {
                out[l.src_depths + n] = warp.src_depth;
            }
            if c.pose_distance {
                out[l.pose_distances + n] = self.pose_distances[n];
            }
            if c.mask {
                out[l.masks + n] = 1.0;
            }
        }
        valid_count
    }

    /// Number of sources that see the swept point of cell `(k, i, j)`.
    pub fn valid_sources(&self, k: usize, i: usize, j: usize) -> usize {
        let z = self.planes.depths[k];
        let x_cam = self.reference.intrinsics.unproject_dir(&Vec2::new(j as f64, i as f64)) * z;
        let x_world = self.reference.pose.transform_point(&x_cam);
        self.sources
            .iter()
            .filter(|s| warp_world_point(&x_world, &s.pose, &s.intrinsics).valid)
            .count()
    }

    /// Dot-sum cost of one cell without materializing the channel vector.
    pub fn dot_sum_cell(&self, k: usize, i: usize, j: usize, scratch: &mut [f64]) -> f64 {
        self.dot_cell(k, i, j, scratch).0
    }

    /// Sum of source dots and the number of valid sources.
    fn dot_cell(&self, k: usize, i: usize, j: usize, scratch: &mut [f64]) -> (f64, usize) {
        let z = self.planes.depths[k];
        let x_cam = self.reference.intrinsics.unproject_dir(&Vec2::new(j as f64, i as f64)) * z;
        let x_world = self.reference.pose.transform_point(&x_cam);
        let f0 = self.reference.features.pixel(j, i);
        let mut sum = 0.0;
        let mut n = 0;
        for src in &self.sources {
            let warp = warp_world_point(&x_world, &src.pose, &src.intrinsics);
            if warp.valid {
                src.features.sample_bilinear(&warp.src_pixel, scratch);
                sum += f0.iter().zip(scratch.iter()).map(|(a, b)| a * b).sum::<f64>();
                n += 1;
            }
        }
        (sum, n)
    }

    fn cost_dots(&self, reduce: impl Fn(f64, usize) -> f64 + Sync) -> CostSlice {
        let (d, h, w) = (self.planes.len(), self.height(), self.width());
        let f = self.layout.features;
        let mut data = vec![0.0; d * h * w];
        data.par_chunks_mut(w).enumerate().for_each(|(row, out)| {
            let (k, i) = (row / h, row % h);
            let mut scratch = vec![0.0; f];
            for (j, o) in out.iter_mut().enumerate() {
                let (sum, n) = self.dot_cell(k, i, j, &mut scratch);
                *o = reduce(sum, n);
            }
        });
        CostSlice { d, h, w, data }
    }

    /// Streaming dot-sum reduction over the whole sweep.
    pub fn cost_dot_sum(&self) -> CostSlice {
        self.cost_dots(|sum, _| sum)
    }

    /// Mean dot over the sources that see each cell, [`UNOBSERVED_COST`] where
    /// none does. Unlike the sum it does not favor planes that happen to be
    /// visible in more sources.
    pub fn cost_dot_mean(&self) -> CostSlice {
        self.cost_dots(|sum, n| if n == 0 { UNOBSERVED_COST } else { sum / n as f64 })
    }

    /// Streaming MLP reduction over the whole sweep.
    pub fn cost_mlp(&self, net: &Mlp) -> Result<CostSlice> {
        if net.input_width() != self.layout.len {
            return Err(Error::contract(format!(
                "MLP input width {} does not match {} volume channels",
                net.input_width(),
                self.layout.len
            )));
        }
        let (d, h, w) = (self.planes.len(), self.height(), self.width());
        let mut data = vec![0.0; d * h * w];
        data.par_chunks_mut(w).enumerate().for_each(|(row, out)| {
            let (k, i) = (row / h, row % h);
            let mut cell = vec![0.0; self.layout.len];
            let mut scratch = net.scratch();
            for (j, o) in out.iter_mut().enumerate() {
                self.fill_cell(k, i, j, &mut cell);
                *o = net.eval(&cell, &mut scratch);
            }
        });
        Ok(CostSlice { d, h, w, data })
    }

    /// Per-pixel flag: every plane's swept point is seen by at least one source.
    pub fn covered_mask(&self) -> Vec<bool> {
        let (d, h, w) = (self.planes.len(), self.height(), self.width());
        (0..h * w)
            .into_par_iter()
            .map(|p| (0..d).all(|k| self.valid_sources(k, p / w, p % w) > 0))
            .collect()
    }

    /// Per-pixel flag: at least one source sees the swept point at some plane.
    pub fn observed_mask(&self) -> Vec<bool> {
        let (d, h, w) = (self.planes.len(), self.height(), self.width());
        (0..h * w)
            .into_par_iter()
            .map(|p| (0..d).any(|k| self.valid_sources(k, p / w, p % w) > 0))
            .collect()
    }
}

/// Materialized `D x H x W x C` volume, channel-innermost, stored as f32.
#[derive(Debug, Clone, PartialEq)]
pub struct MetadataVolume {
    pub d: usize,
    pub h: usize,
    pub w: usize,
    pub layout: ChannelLayout,
    pub data: Vec<f32>,
}

pub fn build_metadata_volume(
    reference: SweepView<'_>,
    sources: Vec<SweepView<'_>>,
    planes: &DepthPlanes,
    config: ChannelConfig,
    slots: usize,
) -> Result<MetadataVolume> {
    let ctx = SweepContext::new(reference, sources, planes.clone(), config, slots)?;
    Ok(ctx.materialize())
}

impl SweepContext<'_> {
    pub fn materialize(&self) -> MetadataVolume {
        let (d, h, w) = (self.planes.len(), self.height(), self.width());
        let c = self.layout.len;
        let mut data = vec![0f32; d * h * w * c];
        if c > 0 {
            data.par_chunks_mut(w * c).enumerate().for_each(|(row, out)| {
                let (k, i) = (row / h, row % h);
                let mut cell = vec![0.0; c];
                for j in 0..w {
                    self.fill_cell(k, i, j, &mut cell);
                    for (o, v) in out[j * c..(j + 1) * c].iter_mut().zip(&cell) {
                        *o = *v as f32;
                    }
                }
            });
        }
        MetadataVolume {
            d,
            h,
            w,
            layout: self.layout,
            data,
        }
    }
}

impl MetadataVolume {
    pub fn channels(&self) -> usize {
        self.layout.len
    }

    pub fn cell(&self, k: usize, i: usize, j: usize) -> &[f32] {
        let c = self.layout.len;
        let o = ((k * self.h + i) * self.w + j) * c;
        &self.data[o..o + c]
    }

    /// Binary dump: 8-byte magic, seven little-endian u32 (C, D, H, W, N, F,
    /// channel-config bits), then the f32 payload in `D, H, W, C` order.
    pub fn write_dump(&self, out: &mut impl Write) -> std::io::Result<()> {
        out.write_all(VOLUME_MAGIC)?;
        let l = &self.layout;
        for v in [l.len, self.d, self.h, self.w, l.sources, l.features, l.config.bits() as usize] {
            out.write_all(&(v as u32).to_le_bytes())?;
        }
        for x in &self.data {
            out.write_all(&x.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_dump(input: &mut impl Read, path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        input.read_to_end(&mut bytes).map_err(|e| Error::io(path, e))?;
        if bytes.len() < 36 || &bytes[..8] != VOLUME_MAGIC {
            return Err(Error::format(path, Some(0), "not a metadata volume dump"));
        }
        let u = |i: usize| u32::from_le_bytes(bytes[8 + 4 * i..12 + 4 * i].try_into().unwrap()) as usize;
        let (c, d, h, w, n, f, bits) = (u(0), u(1), u(2), u(3), u(4), u(5), u(6));
        let layout = ChannelLayout::new(f, n, ChannelConfig::from_bits(bits as u32));
        if layout.len != c {
            return Err(Error::format(path, Some(8), "channel count disagrees with layout"));
        }
        let expected = 36 + 4 * d * h * w * c;
        if bytes.len() != expected {
            return Err(Error::format(
                path,
                Some(bytes.len().min(expected)),
                format!("payload size {} != expected {}", bytes.len(), expected),
            ));
        }
        let data = bytes[36..]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        Ok(Self { d, h, w, layout, data })
    }
}

const VOLUME_MAGIC: &[u8; 8] = b"MDVOL\0\0\x01";

/// Per-plane matching score; higher is a better match.
#[derive(Debug, Clone, PartialEq)]
pub struct CostSlice {
    pub d: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl CostSlice {
    #[inline]
    pub fn get(&self, k: usize, i: usize, j: usize) -> f64 {
        self.data[(k * self.h + i) * self.w + j]
    }

    /// Costs of all planes at pixel `(i, j)`.
    pub fn column(&self, i: usize, j: usize) -> Vec<f64> {
        (0..self.d).map(|k| self.get(k, i, j)).collect()
    }

    /// Index of the best plane per pixel (first maximum on ties).
    pub fn argmax(&self) -> Vec<usize> {
        (0..self.h * self.w)
            .map(|p| {
                let mut best = 0;
                for k in 1..self.d {
                    if self.data[k * self.h * self.w + p] > self.data[best * self.h * self.w + p] {
                        best = k;
                    }
                }
                best
            })
            .collect()
    }
}

/// Sum of masked dot products per cell.
pub fn reduce_dot_sum(vol: &MetadataVolume) -> Result<CostSlice> {
    let l = &vol.layout;
    if !l.config.dots {
        return Err(Error::contract("dot-sum reduction needs the dot-product channels"));
    }
    let n = l.sources;
    let data = (0..vol.d * vol.h * vol.w)
        .map(|cell| {
            let v = &vol.data[cell * l.len..(cell + 1) * l.len];
            (0..n)
                .map(|s| {
                    let m = if l.config.mask { v[l.masks + s] as f64 } else { 1.0 };
                    m * v[l.dots + s] as f64
                })
                .sum()
        })
        .collect();
    Ok(CostSlice {
        d: vol.d,
        h: vol.h,
        w: vol.w,
        data,
    })
}

/// The MLP applied independently to every cell.
pub fn reduce_mlp(vol: &MetadataVolume, net: &Mlp) -> Result<CostSlice> {
    if net.input_width() != vol.channels() {
        return Err(Error::contract(format!(
            "MLP input width {} does not match {} volume channels",
            net.input_width(),
            vol.channels()
        )));
    }
    let c = vol.channels();
    let data = vol
        .data
        .par_chunks(c.max(1))
        .map_init(
            || (vec![0.0; c], net.scratch()),
            |(cell, scratch), v| {
                for (o, x) in cell.iter_mut().zip(v) {
                    *o = *x as f64;
                }
                net.eval(cell, scratch)
            },
        )
        .collect();
    Ok(CostSlice {
        d: vol.d,
        h: vol.h,
        w: vol.w,
        data,
    })
}

/// Softmax expectation over plane depths for one pixel; returns the depth and
/// the softmax weights.
pub fn soft_argmax(costs: &[f64], planes: &[f64], temperature: f64) -> (f64, Vec<f64>) {
    let max = costs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut p: Vec<f64> = costs.iter().map(|c| ((c - max) / temperature).exp()).collect();
    let z: f64 = p.iter().sum();
    p.iter_mut().for_each(|x| *x /= z);
    let depth = p.iter().zip(planes).map(|(a, b)| a * b).sum();
    (depth, p)
}

/// Gradient of the soft-argmax depth with respect to each plane's cost.
pub fn soft_argmax_grad(probs: &[f64], planes: &[f64], depth: f64, temperature: f64) -> Vec<f64> {
    probs
        .iter()
        .zip(planes)
        .map(|(p, d)| p * (d - depth) / temperature)
        .collect()
}

pub fn cost_to_depth(cost: &CostSlice, planes: &DepthPlanes, temperature: f64) -> Result<DepthMap> {
    if !(temperature > 0.0) {
        return Err(Error::domain(format!("temperature must be positive, got {temperature}")));
    }
    if cost.d != planes.len() {
        return Err(Error::contract("cost slice and plane counts differ"));
    }
    let depth = (0..cost.h * cost.w)
        .into_par_iter()
        .map(|p| {
            let col: Vec<f64> = (0..cost.d).map(|k| cost.data[k * cost.h * cost.w + p]).collect();
            soft_argmax(&col, planes.depths(), temperature).0
        })
        .collect();
    DepthMap::dense(cost.w, cost.h, depth)
}

/// All-zero slice of the same shape, ablating the matching evidence.
pub fn zero_cost_volume(cost: &CostSlice) -> CostSlice {
    CostSlice {
        d: cost.d,
        h: cost.h,
        w: cost.w,
        data: vec![0.0; cost.data.len()],
    }
}
