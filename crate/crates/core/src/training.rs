//! Toy-scale training of the cost-volume MLP and the ablation matrix.
//!
//! A training step draws a few random crops from the training references,
//! sweeps every crop pixel through all depth planes, turns the MLP costs into
//! depth with the soft-argmax head and back-propagates the total loss.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluation::{DepthMetricAccumulator, DepthMetrics};
use crate::features::{extract_oracle_features, extract_patch_features, Extractor, FeatureMap};
use crate::geometry::{Intrinsics, Pose};
use crate::io::RunConfig;
use crate::keyframing::{order_sources, select_keyframes, shuffle_sources, Trajectory};
use crate::losses::{evaluate_total, LossComponents, LossWeights, MvSource};
use crate::maps::DepthMap;
use crate::synth::{generate_scene, generate_trajectory, render_depth, Scene, SceneConfig};
use crate::tinynet::{AdamWConfig, AdamWState, Mlp, Tape};
use crate::volume::{
    cost_to_depth, make_depth_planes, soft_argmax, soft_argmax_grad, zero_cost_volume, ChannelConfig,
    DepthPlanes, SweepContext, SweepView, MAX_SOURCES,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SourceOrdering {
    PoseSorted,
    Shuffled,
}

impl std::str::FromStr for SourceOrdering {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pose_sorted" => Ok(Self::PoseSorted),
            "shuffled" => Ok(Self::Shuffled),
            _ => Err(Error::domain(format!("unknown source ordering '{s}'"))),
        }
    }
}

/// One rendered camera with its features.
#[derive(Debug, Clone)]
pub struct ViewData {
    pub id: usize,
    pub pose: Pose,
    pub intrinsics: Intrinsics,
    pub features: FeatureMap,
    pub depth: DepthMap,
}

/// A reference view and its candidate sources, nearest first.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub reference: usize,
    pub sources: Vec<usize>,
}

#[derive(Debug, Clone, Default)]
pub struct Dataset {
    pub views: Vec<ViewData>,
    pub samples: Vec<Sample>,
}

impl Dataset {
    /// Keyframes of `traj` become references; each keeps up to
    /// [`MAX_SOURCES`] other keyframes ordered by pose distance.
    pub fn from_views(views: Vec<ViewData>, traj: &Trajectory, t_min: f64, t_max: f64, online: bool) -> Result<Self> {
        let keyframes = select_keyframes(traj, t_min, t_max)?;
        let index_of = |id: usize| views.iter().position(|v| v.id == id);
        let mut samples = Vec::new();
        for (i, &kf) in keyframes.iter().enumerate() {
            let candidates: Vec<usize> = if online {
                keyframes[..i].to_vec()
            } else {
                keyframes.iter().copied().filter(|&c| c != kf).collect()
            };
            if candidates.is_empty() {
                continue;
            }
            let ordered = order_sources(traj, kf, &candidates, MAX_SOURCES)?;
            let reference = index_of(kf).ok_or_else(|| Error::contract(format!("no view for keyframe {kf}")))?;
            let sources = ordered
                .iter()
                .map(|&id| index_of(id).ok_or_else(|| Error::contract(format!("no view for frame {id}"))))
                .collect::<Result<_>>()?;
            samples.push(Sample { reference, sources });
        }
        Ok(Self { views, samples })
    }

    /// Append another dataset, re-indexing its views.
    pub fn extend(&mut self, other: Dataset) {
        let base = self.views.len();
        self.views.extend(other.views);
        self.samples.extend(other.samples.into_iter().map(|s| Sample {
            reference: s.reference + base,
            sources: s.sources.iter().map(|i| i + base).collect(),
        }));
    }

    /// The first `n` sources of sample `s`, optionally permuted with a
    /// per-sample seed.
    pub fn sources_for(&self, s: usize, n: usize, ordering: SourceOrdering, seed: u64) -> Vec<usize> {
        let src = &self.samples[s].sources;
        let take = &src[..n.min(src.len())];
        match ordering {
            SourceOrdering::PoseSorted => take.to_vec(),
            SourceOrdering::Shuffled => {
                let sample_seed = seed ^ (s as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
                shuffle_sources(take, sample_seed)
            }
        }
    }

    pub fn sweep<'a>(&'a self, s: usize, sources: &[usize], planes: &DepthPlanes, channels: ChannelConfig, slots: usize) -> Result<SweepContext<'a>> {
        let view = |i: usize| SweepView {
            features: &self.views[i].features,
            pose: self.views[i].pose,
            intrinsics: self.views[i].intrinsics,
        };
        SweepContext::new(
            view(self.samples[s].reference),
            sources.iter().map(|&i| view(i)).collect(),
            planes.clone(),
            channels,
            slots,
        )
    }
}

/// Render every frame of `traj` and extract features.
pub fn render_views(
    scene: &Scene,
    traj: &Trajectory,
    extractor: Extractor,
    feature_channels: usize,
    patch_size: usize,
) -> Result<Vec<ViewData>> {
    traj.frames
        .iter()
        .map(|f| {
            let view = render_depth(scene, &f.pose, &f.intrinsics);
            let features = match extractor {
                Extractor::Oracle => extract_oracle_features(scene, &f.pose, &f.intrinsics, feature_channels, f.id)?,
                Extractor::Patch => extract_patch_features(&view.image, patch_size, f.id)?,
            };
            Ok(ViewData {
                id: f.id,
                pose: f.pose,
                intrinsics: f.intrinsics,
                features,
                depth: view.depth,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub channels: ChannelConfig,
    pub n_sources: usize,
    pub n_planes: usize,
    pub d_min: f64,
    pub d_max: f64,
    pub temperature: f64,
    pub hidden: Vec<usize>,
    pub lr: f64,
    pub weight_decay: f64,
    pub steps: usize,
    pub batch_crops: usize,
    pub crop_size: usize,
    pub seed: u64,
    pub ordering: SourceOrdering,
    pub val_fraction: f64,
    pub val_every: usize,
    /// Crops per validation sample.
    pub val_crops: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            channels: ChannelConfig::all(),
            n_sources: 2,
            n_planes: 32,
            d_min: 0.25,
            d_max: 5.0,
            temperature: 1.0,
            hidden: vec![64, 64],
            lr: 1e-4,
            weight_decay: 1e-4,
            steps: 300,
            batch_crops: 4,
            crop_size: 16,
            seed: 0,
            ordering: SourceOrdering::PoseSorted,
            val_fraction: 0.2,
            val_every: 25,
            val_crops: 2,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch_crops == 0 || self.crop_size < 2 {
            return Err(Error::domain("training needs steps >= 1, batch_crops >= 1 and crop_size >= 2"));
        }
        if self.n_sources == 0 || self.n_sources > MAX_SOURCES {
            return Err(Error::domain(format!("n_sources must be in 1..={MAX_SOURCES}")));
        }
        if !(self.temperature > 0.0) || !(0.0..1.0).contains(&self.val_fraction) || self.val_every == 0 {
            return Err(Error::domain("invalid temperature, val_fraction or val_every"));
        }
        Ok(())
    }

    pub fn planes(&self) -> Result<DepthPlanes> {
        make_depth_planes(self.d_min, self.d_max, self.n_planes)
    }

    pub fn input_width(&self, features: usize) -> usize {
        crate::volume::ChannelLayout::channel_count(features, self.n_sources, self.channels)
    }
}

impl TrainConfig {
    pub fn from_run_config(rc: &RunConfig) -> Result<Self> {
        Ok(Self {
            channels: rc.channel_config()?,
            n_sources: rc.n_sources,
            n_planes: rc.train_planes,
            d_min: rc.d_min,
            d_max: rc.d_max,
            temperature: rc.temperature,
            hidden: rc.hidden.clone(),
            lr: rc.lr,
            weight_decay: rc.weight_decay,
            steps: rc.steps,
            batch_crops: rc.batch_crops,
            crop_size: rc.crop_size,
            seed: rc.seed,
            ordering: rc.ordering.parse()?,
            val_fraction: rc.val_fraction,
            val_every: rc.val_every,
            val_crops: 2,
        })
    }
}

/// Scene, trajectory, renders and samples for scene seed `scene_seed` with
/// every other setting taken from `rc`.
pub fn dataset_from_run_config(rc: &RunConfig, scene_seed: u64) -> Result<Dataset> {
    let scene = generate_scene(&SceneConfig {
        seed: scene_seed,
        ..rc.scene()
    })?;
    let k = rc.intrinsics()?;
    let traj = generate_trajectory(&scene, &k, rc.n_frames, &rc.trajectory(), scene_seed)?;
    let extractor: Extractor = rc.features.parse()?;
    let views = render_views(&scene, &traj, extractor, rc.feature_channels, rc.patch_size)?;
    Dataset::from_views(views, &traj, rc.t_min, rc.t_max, rc.online)
}

/// A crop of one sample's reference image.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Crop {
    pub sample: usize,
    pub u0: usize,
    pub v0: usize,
    pub width: usize,
    pub height: usize,
}

fn random_crop(ds: &Dataset, sample: usize, size: usize, rng: &mut ChaCha8Rng) -> Crop {
    let k = &ds.views[ds.samples[sample].reference].intrinsics;
    let (w, h) = (size.min(k.width), size.min(k.height));
    Crop {
        sample,
        u0: rng.gen_range(0..=k.width - w),
        v0: rng.gen_range(0..=k.height - h),
        width: w,
        height: h,
    }
}

/// Everything one crop contributes to a step.
#[derive(Debug, Clone)]
pub struct CropResult {
    pub total: f64,
    pub components: LossComponents,
    pub grad: Option<Vec<f64>>,
    pub prediction: DepthMap,
}

/// Loss (and optionally the parameter gradient) of `net` on one crop.
pub fn crop_loss(
    net: &Mlp,
    ds: &Dataset,
    crop: Crop,
    sources: &[usize],
    cfg: &TrainConfig,
    planes: &DepthPlanes,
    weights: &LossWeights,
    want_grad: bool,
) -> Result<CropResult> {
    let ctx = ds.sweep(crop.sample, sources, planes, cfg.channels, cfg.n_sources)?;
    let c = ctx.layout().len;
    if net.input_width() != c {
        return Err(Error::contract(format!("network input {} != {c} channels", net.input_width())));
    }
    let d = planes.len();
    let pixels: Vec<(usize, usize)> = (0..crop.height)
        .flat_map(|y| (0..crop.width).map(move |x| (crop.v0 + y, crop.u0 + x)))
        .collect();

    struct PixelPass {
        depth: f64,
        probs: Vec<f64>,
        tapes: Vec<Tape>,
    }
    let passes: Vec<PixelPass> = pixels
        .par_iter()
        .map(|&(i, j)| {
            let mut cell = vec![0.0; c];
            let mut costs = Vec::with_capacity(d);
            let mut tapes = Vec::with_capacity(if want_grad { d } else { 0 });
            let mut scratch = net.scratch();
            for k in 0..d {
                ctx.fill_cell(k, i, j, &mut cell);
                if want_grad {
                    let (s, tape) = net.forward(&cell).expect("width checked");
                    costs.push(s);
                    tapes.push(tape);
                } else {
                    costs.push(net.eval(&cell, &mut scratch));
                }
            }
            let (depth, probs) = soft_argmax(&costs, planes.depths(), cfg.temperature);
            PixelPass { depth, probs, tapes }
        })
        .collect();

    let reference = &ds.views[ds.samples[crop.sample].reference];
    let pred = DepthMap::dense(crop.width, crop.height, passes.iter().map(|p| p.depth).collect())?;
    let gt = reference.depth.crop(crop.u0, crop.v0, crop.width, crop.height);
    let k_crop = reference.intrinsics.cropped(crop.u0, crop.v0, crop.width, crop.height);
    let mv: Vec<MvSource<'_>> = sources
        .iter()
        .map(|&s| MvSource {
            pose: ds.views[s].pose,
            intrinsics: ds.views[s].intrinsics,
            gt: &ds.views[s].depth,
        })
        .collect();
    let (total, components, g_depth) = evaluate_total(&pred, &gt, &k_crop, &reference.pose, &mv, weights)?;

    let grad = if want_grad {
        let parts: Vec<Vec<f64>> = passes
            .par_iter()
            .zip(&g_depth)
            .map(|(p, &g)| {
                let mut acc = vec![0.0; net.param_count()];
                if g != 0.0 {
                    let g_cost = soft_argmax_grad(&p.probs, planes.depths(), p.depth, cfg.temperature);
                    for (tape, gc) in p.tapes.iter().zip(g_cost) {
                        if gc != 0.0 {
                            net.backward_accumulate(tape, g * gc, &mut acc).expect("tape matches net");
                        }
                    }
                }
                acc
            })
            .collect();
        // fixed summation order keeps steps reproducible
        let mut sum = vec![0.0; net.param_count()];
        for p in &parts {
            for (s, x) in sum.iter_mut().zip(p) {
                *s += x;
            }
        }
        Some(sum)
    } else {
        None
    };
    Ok(CropResult {
        total,
        components,
        grad,
        prediction: pred,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LogEntry {
    pub step: usize,
    pub train_total: f64,
    pub train: [f64; 4],
    pub val_total: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    /// Parameters with the lowest validation loss.
    pub net: Mlp,
    pub best_step: usize,
    pub best_val: f64,
    pub log: Vec<LogEntry>,
    pub train_samples: Vec<usize>,
    pub val_samples: Vec<usize>,
}

impl TrainOutput {
    /// `step train_total depth grad normals mv val_total` per line; `-` when
    /// no validation ran at that step.
    pub fn loss_log(&self) -> String {
        let mut s = String::from("# step train_total depth grad normals mv val_total\n");
        for e in &self.log {
            let val = e.val_total.map_or("-".to_string(), |v| v.to_string());
            s.push_str(&format!(
                "{} {} {} {} {} {} {}\n",
                e.step, e.train_total, e.train[0], e.train[1], e.train[2], e.train[3], val
            ));
        }
        s
    }
}

/// Seeded 80/20-style split of sample indices into (train, val).
pub fn split_samples(n: usize, val_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let order = shuffle_sources(&(0..n).collect::<Vec<_>>(), seed ^ 0x5EED);
    if n < 2 {
        return (order.clone(), order);
    }
    let n_val = ((n as f64 * val_fraction).round() as usize).clamp(1, n - 1);
    let mut val = order[..n_val].to_vec();
    let mut train = order[n_val..].to_vec();
    val.sort_unstable();
    train.sort_unstable();
    (train, val)
}

fn check_finite(step: usize, total: f64, c: &LossComponents) -> Result<()> {
    for (name, v) in [
        ("depth", c.depth),
        ("grad", c.grad),
        ("normals", c.normals),
        ("mv", c.mv),
        ("total", total),
    ] {
        if !v.is_finite() {
            return Err(Error::NonFinite { step, component: name });
        }
    }
    Ok(())
}

/// Mean validation loss over fixed crops.
fn validation_loss(net: &Mlp, ds: &Dataset, crops: &[Crop], cfg: &TrainConfig, planes: &DepthPlanes, weights: &LossWeights) -> Result<f64> {
    let mut sum = 0.0;
    for crop in crops {
        let sources = ds.sources_for(crop.sample, cfg.n_sources, cfg.ordering, cfg.seed);
        sum += crop_loss(net, ds, *crop, &sources, cfg, planes, weights, false)?.total;
    }
    Ok(sum / crops.len() as f64)
}

/// AdamW over the total loss; returns the checkpoint with the lowest
/// validation loss.
pub fn train(ds: &Dataset, cfg: &TrainConfig) -> Result<TrainOutput> {
    cfg.validate()?;
    if ds.samples.is_empty() {
        return Err(Error::domain("training needs a non-empty dataset"));
    }
    let planes = cfg.planes()?;
    let weights = LossWeights::default();
    let features = ds.views[0].features.channels;
    let mut net = Mlp::with_hidden(cfg.input_width(features), &cfg.hidden, cfg.seed)?;
    let mut opt = AdamWState::new(
        net.param_count(),
        AdamWConfig {
            lr: cfg.lr,
            weight_decay: cfg.weight_decay,
            ..AdamWConfig::default()
        },
    );
    let (train_idx, val_idx) = split_samples(ds.samples.len(), cfg.val_fraction, cfg.seed);
    let mut val_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xA11CE);
    let val_crops: Vec<Crop> = val_idx
        .iter()
        .flat_map(|&s| (0..cfg.val_crops).map(move |_| s))
        .map(|s| random_crop(ds, s, cfg.crop_size, &mut val_rng))
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut log = Vec::with_capacity(cfg.steps);
    let mut best = (f64::INFINITY, 0usize, net.params().to_vec());
    for step in 0..cfg.steps {
        let mut val_total = None;
        if step % cfg.val_every == 0 {
            let v = validation_loss(&net, ds, &val_crops, cfg, &planes, &weights)?;
            if !v.is_finite() {
                return Err(Error::NonFinite {
                    step,
                    component: "validation",
                });
            }
            if v < best.0 {
                best = (v, step, net.params().to_vec());
            }
            val_total = Some(v);
        }
        let crops: Vec<Crop> = (0..cfg.batch_crops)
            .map(|_| {
                let s = train_idx[rng.gen_range(0..train_idx.len())];
                random_crop(ds, s, cfg.crop_size, &mut rng)
            })
            .collect();
        let mut grad = vec![0.0; net.param_count()];
        let mut total = 0.0;
        let mut comps = [0.0; 4];
        for crop in &crops {
            let sources = ds.sources_for(crop.sample, cfg.n_sources, cfg.ordering, cfg.seed);
            let r = crop_loss(&net, ds, *crop, &sources, cfg, &planes, &weights, true)?;
            check_finite(step, r.total, &r.components)?;
            total += r.total;
            for (c, x) in comps.iter_mut().zip(r.components.as_array()) {
                *c += x;
            }
            for (g, x) in grad.iter_mut().zip(r.grad.unwrap()) {
                *g += x;
            }
        }
        let n = crops.len() as f64;
        grad.iter_mut().for_each(|g| *g /= n);
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite {
                step,
                component: "gradient",
            });
        }
        log.push(LogEntry {
            step,
            train_total: total / n,
            train: comps.map(|c| c / n),
            val_total,
        });
        opt.step(net.params_mut(), &grad)?;
    }
    let final_val = validation_loss(&net, ds, &val_crops, cfg, &planes, &weights)?;
    if final_val < best.0 {
        best = (final_val, cfg.steps, net.params().to_vec());
    }
    net.set_params(&best.2)?;
    Ok(TrainOutput {
        net,
        best_step: best.1,
        best_val: best.0,
        log,
        train_samples: train_idx,
        val_samples: val_idx,
    })
}

/// What turns a sweep into depth at evaluation time.
#[derive(Debug, Clone, Copy)]
pub enum Reduction<'a> {
    DotSum { temperature: f64 },
    DotMean { temperature: f64 },
    Mlp { net: &'a Mlp, temperature: f64 },
    /// Zeroed cost volume: every pixel gets the mean plane depth.
    Zero,
}

/// Depth from one sweep. `depth.valid` holds where some source sees every
/// plane along the pixel ray, so the whole depth range was searched;
/// `observed` holds where some source sees any plane.
#[derive(Debug, Clone)]
pub struct Prediction {
    pub depth: DepthMap,
    pub observed: Vec<bool>,
}

pub fn predict_with(ctx: &SweepContext<'_>, reduction: Reduction<'_>) -> Result<Prediction> {
    let planes = ctx.planes();
    let observed = ctx.observed_mask();
    let (cost, t) = match reduction {
        Reduction::DotSum { temperature } => (ctx.cost_dot_sum(), temperature),
        Reduction::DotMean { temperature } => (ctx.cost_dot_mean(), temperature),
        Reduction::Mlp { net, temperature } => (ctx.cost_mlp(net)?, temperature),
        Reduction::Zero => (zero_cost_volume(&ctx.cost_dot_sum()), 1.0),
    };
    let mut depth = cost_to_depth(&cost, planes, t)?;
    depth.valid = ctx.covered_mask();
    Ok(Prediction { depth, observed })
}

pub fn predict_sample(
    ds: &Dataset,
    s: usize,
    sources: &[usize],
    planes: &DepthPlanes,
    channels: ChannelConfig,
    slots: usize,
    reduction: Reduction<'_>,
) -> Result<Prediction> {
    predict_with(&ds.sweep(s, sources, planes, channels, slots)?, reduction)
}

/// Depth metrics over `samples` on the pixels with ground truth that one of
/// the `mask_views` nearest sources observes. The mask ignores the variant,
/// so every variant is scored on the same pixels.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_samples(
    ds: &Dataset,
    samples: &[usize],
    n_sources: usize,
    ordering: SourceOrdering,
    seed: u64,
    planes: &DepthPlanes,
    channels: ChannelConfig,
    reduction: Reduction<'_>,
    mask_views: usize,
) -> Result<DepthMetrics> {
    let mut acc = DepthMetricAccumulator::default();
    for &s in samples {
        let sources = ds.sources_for(s, n_sources, ordering, seed);
        let mut pred = predict_sample(ds, s, &sources, planes, channels, n_sources, reduction)?.depth;
        let nearest = ds.sources_for(s, mask_views, SourceOrdering::PoseSorted, seed);
        let mask = ds.sweep(s, &nearest, planes, ChannelConfig::dots_only(), nearest.len())?.observed_mask();
        for (v, o) in pred.valid.iter_mut().zip(&mask) {
            *v = *o;
        }
        acc.add(&pred, &ds.views[ds.samples[s].reference].depth)?;
    }
    acc.finish()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationAxis {
    Channels,
    Ordering,
    NViews,
    ZeroCv,
}

impl std::str::FromStr for AblationAxis {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "channels" => Ok(Self::Channels),
            "ordering" => Ok(Self::Ordering),
            "n_views" => Ok(Self::NViews),
            "zero_cv" => Ok(Self::ZeroCv),
            _ => Err(Error::domain(format!("unknown ablation axis '{s}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRow {
    pub label: String,
    pub channels: String,
    pub n_views: usize,
    pub ordering: SourceOrdering,
    pub zero_cv: bool,
    pub metrics: DepthMetrics,
    pub best_val: Option<f64>,
}

/// Variants along the requested axes, all sharing the base seed.
pub fn ablation_variants(base: &TrainConfig, axes: &[AblationAxis]) -> Vec<(String, TrainConfig, bool)> {
    let mut out: Vec<(String, TrainConfig, bool)> = vec![("base".into(), base.clone(), false)];
    let mut push = |label: String, cfg: TrainConfig, zero: bool| {
        if !out.iter().any(|(_, c, z)| *c == cfg && *z == zero) {
            out.push((label, cfg, zero));
        }
    };
    for axis in axes {
        match axis {
            AblationAxis::NViews => {
                for n in [1, 2, 4, 8] {
                    push(format!("n_views={n}"), TrainConfig { n_sources: n, ..base.clone() }, false);
                }
            }
            AblationAxis::Ordering => {
                for (ch, name) in [(base.channels, "metadata"), (ChannelConfig::dots_only(), "dots")] {
                    for ord in [SourceOrdering::PoseSorted, SourceOrdering::Shuffled] {
                        let label = format!(
                            "{name} {}",
                            if ord == SourceOrdering::Shuffled { "shuffled" } else { "sorted" }
                        );
                        push(
                            label,
                            TrainConfig {
                                channels: ch,
                                ordering: ord,
                                ..base.clone()
                            },
                            false,
                        );
                    }
                }
            }
            AblationAxis::Channels => {
                let steps = [
                    "dot",
                    "dot+feats",
                    "dot+feats+mask",
                    "dot+feats+mask+depth",
                    "dot+feats+mask+depth+ray",
                    "dot+feats+mask+depth+ray+angle",
                    "dot+feats+mask+depth+ray+angle+pose",
                ];
                for s in steps {
                    let ch = crate::io::parse_channels(s).expect("static channel names");
                    push(s.to_string(), TrainConfig { channels: ch, ..base.clone() }, false);
                }
            }
            AblationAxis::ZeroCv => push("zero_cv".into(), base.clone(), true),
        }
    }
    out
}

/// Train every variant on `train_ds` and score it on all samples of `test_ds`.
/// `n_views` larger than the available sources are skipped.
pub fn run_ablation_matrix(train_ds: &Dataset, test_ds: &Dataset, base: &TrainConfig, axes: &[AblationAxis]) -> Result<Vec<AblationRow>> {
    let planes = base.planes()?;
    let test_samples: Vec<usize> = (0..test_ds.samples.len()).collect();
    let max_sources = train_ds
        .samples
        .iter()
        .chain(&test_ds.samples)
        .map(|s| s.sources.len())
        .min()
        .unwrap_or(0);
    let variants: Vec<_> = ablation_variants(base, axes)
        .into_iter()
        .filter(|v| v.1.n_sources <= max_sources)
        .collect();
    let mask_views = variants.iter().map(|v| v.1.n_sources).min().unwrap_or(1);
    let mut rows = Vec::new();
    for (label, cfg, zero) in variants {
        let (metrics, best_val) = if zero {
            let m = evaluate_samples(
                test_ds,
                &test_samples,
                cfg.n_sources,
                cfg.ordering,
                cfg.seed,
                &planes,
                cfg.channels,
                Reduction::Zero,
                mask_views,
            )?;
            (m, None)
        } else {
            let out = train(train_ds, &cfg)?;
            let m = evaluate_samples(
                test_ds,
                &test_samples,
                cfg.n_sources,
                cfg.ordering,
                cfg.seed,
                &planes,
                cfg.channels,
                Reduction::Mlp {
                    net: &out.net,
                    temperature: cfg.temperature,
                },
                mask_views,
            )?;
            (m, Some(out.best_val))
        };
        rows.push(AblationRow {
            label,
            channels: cfg.channels.label(),
            n_views: cfg.n_sources,
            ordering: cfg.ordering,
            zero_cv: zero,
            metrics,
            best_val,
        });
    }
    Ok(rows)
}

/// Fixed-width text table of ablation rows.
pub fn format_ablation_table(rows: &[AblationRow]) -> String {
    let mut s = format!(
        "{:<42} {:>9} {:>9} {:>9} {:>9} {:>8} {:>8}\n",
        "variant", "abs_diff", "abs_rel", "sq_rel", "rmse", "d<1.05", "d<1.25"
    );
    for r in rows {
        let m = &r.metrics;
        s.push_str(&format!(
            "{:<42} {:>9.4} {:>9.4} {:>9.4} {:>9.4} {:>8.2} {:>8.2}\n",
            r.label, m.abs_diff, m.abs_rel, m.sq_rel, m.rmse, m.delta_1_05, m.delta_1_25
        ));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_run() -> RunConfig {
        RunConfig {
            width: 32,
            height: 24,
            n_frames: 16,
            feature_channels: 4,
            ..RunConfig::default()
        }
    }

    fn small_train() -> TrainConfig {
        TrainConfig {
            n_planes: 8,
            hidden: vec![8],
            steps: 6,
            batch_crops: 2,
            crop_size: 6,
            val_every: 2,
            val_crops: 1,
            lr: 1e-3,
            ..TrainConfig::default()
        }
    }

    fn dataset() -> Dataset {
        dataset_from_run_config(&small_run(), 3).unwrap()
    }

    #[test]
    fn samples_have_sorted_sources() {
        let ds = dataset();
        assert!(ds.samples.len() >= 3);
        for s in &ds.samples {
            assert!(!s.sources.is_empty() && s.sources.len() <= MAX_SOURCES);
            assert!(!s.sources.contains(&s.reference));
        }
        let shuffled = ds.sources_for(0, 8, SourceOrdering::Shuffled, 1);
        let mut a = shuffled.clone();
        let mut b = ds.sources_for(0, 8, SourceOrdering::PoseSorted, 1);
        a.sort_unstable();
        b.sort_unstable();
        assert_eq!(a, b);
        assert_eq!(shuffled, ds.sources_for(0, 8, SourceOrdering::Shuffled, 1));
    }

    #[test]
    fn split_is_disjoint_and_covering() {
        let (t, v) = split_samples(10, 0.2, 4);
        assert_eq!(v.len(), 2);
        let mut all: Vec<_> = t.iter().chain(&v).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn end_to_end_gradient() {
        let ds = dataset();
        let cfg = TrainConfig {
            crop_size: 5,
            ..small_train()
        };
        let planes = cfg.planes().unwrap();
        let w = LossWeights::default();
        let f = ds.views[0].features.channels;
        let net = Mlp::with_hidden(cfg.input_width(f), &cfg.hidden, 7).unwrap();
        let crop = Crop {
            sample: 1,
            u0: 10,
            v0: 8,
            width: 5,
            height: 5,
        };
        let sources = ds.sources_for(1, cfg.n_sources, cfg.ordering, 0);
        let r = crop_loss(&net, &ds, crop, &sources, &cfg, &planes, &w, true).unwrap();
        let analytic = r.grad.unwrap();
        assert!(analytic.iter().any(|g| g.abs() > 1e-6));
        // the output bias has zero gradient (soft-argmax ignores a constant
        // shift), so compare on a 1e-6 absolute floor instead of grad_check's
        let eval = |p: &[f64]| {
            let mut n = net.clone();
            n.set_params(p).unwrap();
            crop_loss(&n, &ds, crop, &sources, &cfg, &planes, &w, false).unwrap().total
        };
        let h = 1e-6;
        let mut p = net.params().to_vec();
        let mut err: f64 = 0.0;
        for i in 0..p.len() {
            let o = p[i];
            p[i] = o + h;
            let plus = eval(&p);
            p[i] = o - h;
            let minus = eval(&p);
            p[i] = o;
            let numeric = (plus - minus) / (2.0 * h);
            err = err.max((numeric - analytic[i]).abs() / numeric.abs().max(analytic[i].abs()).max(1e-6));
        }
        assert!(analytic.last().unwrap().abs() < 1e-12);
        assert!(err < 1e-3, "relative error {err}");
    }

    #[test]
    fn zero_learning_rate_keeps_parameters() {
        let ds = dataset();
        let cfg = TrainConfig {
            lr: 0.0,
            weight_decay: 0.0,
            ..small_train()
        };
        let out = train(&ds, &cfg).unwrap();
        let init = Mlp::with_hidden(out.net.input_width(), &cfg.hidden, cfg.seed).unwrap();
        assert_eq!(out.net.params(), init.params());
        let vals: Vec<f64> = out.log.iter().filter_map(|e| e.val_total).collect();
        assert!(vals.len() >= 2);
        assert!(vals.iter().all(|v| *v == vals[0]));
    }

    #[test]
    fn training_is_deterministic_and_selects_best() {
        let ds = dataset();
        let cfg = small_train();
        let a = train(&ds, &cfg).unwrap();
        let b = train(&ds, &cfg).unwrap();
        assert_eq!(a.net.params(), b.net.params());
        assert_eq!(a.log, b.log);
        let min = a
            .log
            .iter()
            .filter_map(|e| e.val_total)
            .fold(f64::INFINITY, f64::min);
        assert!(a.best_val <= min);
    }

    #[test]
    fn loss_decreases_with_training() {
        let ds = dataset();
        let cfg = TrainConfig {
            steps: 40,
            val_every: 39,
            lr: 3e-3,
            ..small_train()
        };
        let out = train(&ds, &cfg).unwrap();
        let first = out.log[..5].iter().map(|e| e.train_total).sum::<f64>();
        let last = out.log[35..].iter().map(|e| e.train_total).sum::<f64>();
        assert!(last < first, "{first} -> {last}");
    }

    #[test]
    fn zero_cost_predicts_mean_plane() {
        let ds = dataset();
        let planes = make_depth_planes(0.25, 5.0, 8).unwrap();
        let src = ds.sources_for(0, 2, SourceOrdering::PoseSorted, 0);
        let p = predict_sample(&ds, 0, &src, &planes, ChannelConfig::all(), 2, Reduction::Zero).unwrap();
        let mean = planes.depths().iter().sum::<f64>() / 8.0;
        assert!(p.depth.depth.iter().all(|x| (x - mean).abs() < 1e-12));
        assert!(p.depth.valid.iter().zip(&p.observed).all(|(v, o)| !v || *o));
    }

    #[test]
    fn axis_names_parse() {
        assert_eq!("zero_cv".parse::<AblationAxis>().unwrap(), AblationAxis::ZeroCv);
        assert!("bogus".parse::<AblationAxis>().is_err());
        let v = ablation_variants(&small_train(), &[AblationAxis::NViews, AblationAxis::ZeroCv]);
        assert_eq!(v.iter().filter(|x| x.2).count(), 1);
    }
}
