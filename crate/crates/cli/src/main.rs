use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use recon_core::evaluation::{apply_cull_mask, mesh_metrics, sample_surface, DepthMetricAccumulator, Frustum};
use recon_core::features::{extract_oracle_features, extract_patch_features, Extractor, FeatureMap};
use recon_core::fusion::{fuse_pipeline, latency_stats, TsdfVolume};
use recon_core::geometry::Vec3;
use recon_core::io::{self, write_atomic, DatasetLayout, RunConfig};
use recon_core::keyframing::{select_keyframes, KeyframeSet, Trajectory};
use recon_core::maps::DepthMap;
use recon_core::synth::{generate_scene, generate_trajectory, render_depth, Scene};
use recon_core::tinynet::Mlp;
use recon_core::training::{
    dataset_from_run_config, format_ablation_table, predict_with, run_ablation_matrix, train, AblationAxis, Dataset,
    Reduction, TrainConfig,
};
use recon_core::volume::{make_depth_planes, SweepContext, SweepView};
use recon_core::{Error, Result};

/// Multi-view depth estimation, TSDF fusion and evaluation on synthetic scenes.
///
/// Every verb writes the resolved configuration to `<out>/run_config.toml`;
/// passing that file back with `--config` reproduces the run.
/// Exit codes: 0 success, 1 usage error, 2 data error.
#[derive(Parser)]
#[command(name = "recon", version)]
struct Cli {
    #[command(subcommand)]
    verb: Verb,
}

#[derive(Args)]
struct Common {
    /// RunConfig TOML file; defaults to the input dataset's run_config.toml, then built-in defaults
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one config key, e.g. `--set seed=3` (repeatable)
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Output directory (created if missing)
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Verb {
    /// Render a synthetic trajectory dataset
    Synth {
        #[command(flatten)]
        common: Common,
    },
    /// Plane-sweep depth for every keyframe of a dataset
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Dataset directory written by `synth`
        #[arg(long)]
        data: PathBuf,
    },
    /// Train the cost MLP on synthetic scenes
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Train and score the ablation variants on a held-out scene
    Ablate {
        #[command(flatten)]
        common: Common,
    },
    /// Fuse keyframe depth into a TSDF and extract a mesh
    Fuse {
        #[command(flatten)]
        common: Common,
        /// Dataset directory written by `synth`
        #[arg(long)]
        data: PathBuf,
        /// Directory with `depth/NNNNNN.depth.pgm` predictions (e.g. from `sweep`); overrides `fuse_depth`
        #[arg(long)]
        depth: Option<PathBuf>,
    },
    /// Depth metrics of predicted depth maps against a dataset
    EvalDepth {
        #[command(flatten)]
        common: Common,
        /// Dataset directory with ground truth
        #[arg(long)]
        data: PathBuf,
        /// Directory with `depth/NNNNNN.depth.pgm` predictions
        #[arg(long)]
        pred: PathBuf,
    },
    /// Mesh metrics of a predicted PLY against a reference PLY
    EvalMesh {
        #[command(flatten)]
        common: Common,
        /// Predicted mesh
        #[arg(long)]
        pred: PathBuf,
        /// Reference mesh
        #[arg(long)]
        gt: PathBuf,
        /// Dataset whose camera frusta cull the prediction
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// TSDF integration latency benchmark
    Bench {
        #[command(flatten)]
        common: Common,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli.verb) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_data_error() { 2 } else { 1 })
        }
    }
}

fn run(verb: Verb) -> Result<()> {
    match verb {
        Verb::Synth { common } => {
            let (cfg, out) = setup(&common, None)?;
            synth(&cfg, &out)
        }
        Verb::Sweep { common, data } => {
            let (cfg, out) = setup(&common, Some(&data))?;
            sweep(&cfg, &data, &out)
        }
        Verb::Train { common } => {
            let (cfg, out) = setup(&common, None)?;
            train_verb(&cfg, &out)
        }
        Verb::Ablate { common } => {
            let (cfg, out) = setup(&common, None)?;
            ablate(&cfg, &out)
        }
        Verb::Fuse { common, data, depth } => {
            let (cfg, out) = setup(&common, Some(&data))?;
            fuse(&cfg, &data, depth.as_deref(), &out)
        }
        Verb::EvalDepth { common, data, pred } => {
            let (cfg, out) = setup(&common, Some(&data))?;
            eval_depth(&cfg, &data, &pred, &out)
        }
        Verb::EvalMesh { common, pred, gt, data } => {
            let (cfg, out) = setup(&common, data.as_deref())?;
            eval_mesh(&cfg, &pred, &gt, data.as_deref(), &out)
        }
        Verb::Bench { common } => {
            let (cfg, out) = setup(&common, None)?;
            bench(&cfg, &out)
        }
    }
}

/// Resolve the config, create the output directory and record the config there.
fn setup(common: &Common, data: Option<&Path>) -> Result<(RunConfig, PathBuf)> {
    let base = match (&common.config, data) {
        (Some(p), _) => RunConfig::load(p)?,
        (None, Some(d)) if DatasetLayout::new(d).run_config().exists() => {
            RunConfig::load(&DatasetLayout::new(d).run_config())?
        }
        _ => RunConfig::default(),
    };
    let cfg = base.with_overrides(&common.overrides)?;
    fs::create_dir_all(&common.out).map_err(|e| Error::io(&common.out, e))?;
    cfg.save(&common.out.join("run_config.toml"))?;
    Ok((cfg, common.out.clone()))
}

fn mkdir(p: &Path) -> Result<()> {
    fs::create_dir_all(p).map_err(|e| Error::io(p, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    write_atomic(path, text.as_bytes())
}

fn synth(cfg: &RunConfig, out: &Path) -> Result<()> {
    let scene = generate_scene(&cfg.scene())?;
    let k = cfg.intrinsics()?;
    let traj = generate_trajectory(&scene, &k, cfg.n_frames, &cfg.trajectory(), cfg.seed)?;
    let layout = DatasetLayout::new(out);
    mkdir(&layout.frames_dir())?;
    io::write_intrinsics(&layout.intrinsics(), &k)?;
    for f in &traj.frames {
        let view = render_depth(&scene, &f.pose, &f.intrinsics);
        io::write_pose(&layout.pose(f.id), &f.pose)?;
        io::write_image(&layout.image(f.id), &view.image)?;
        io::write_depth(&layout.depth(f.id), &view.depth)?;
    }
    let keyframes = select_keyframes(&traj, cfg.t_min, cfg.t_max)?;
    let set = KeyframeSet::build(&traj, keyframes, cfg.n_sources, cfg.online)?;
    write_text(&out.join("keyframes.txt"), &set.to_text())
}

/// Features for every frame, in trajectory order.
fn dataset_features(cfg: &RunConfig, layout: &DatasetLayout, traj: &Trajectory, scene: Option<&Scene>) -> Result<Vec<FeatureMap>> {
    let extractor: Extractor = cfg.features.parse()?;
    traj.frames
        .iter()
        .map(|f| match extractor {
            Extractor::Oracle => extract_oracle_features(
                scene.expect("oracle features need the scene"),
                &f.pose,
                &f.intrinsics,
                cfg.feature_channels,
                f.id,
            ),
            Extractor::Patch => extract_patch_features(&io::read_image(&layout.image(f.id))?, cfg.patch_size, f.id),
        })
        .collect()
}

/// Predicts keyframe depth from a dataset with the configured reduction.
struct Sweeper {
    traj: Trajectory,
    features: Vec<FeatureMap>,
    set: KeyframeSet,
    net: Option<Mlp>,
}

impl Sweeper {
    fn new(cfg: &RunConfig, data: &Path) -> Result<Self> {
        let layout = DatasetLayout::new(data);
        let traj = layout.read_trajectory()?;
        let scene = if cfg.features == "oracle" {
            Some(generate_scene(&cfg.scene())?)
        } else {
            None
        };
        let features = dataset_features(cfg, &layout, &traj, scene.as_ref())?;
        let keyframes = select_keyframes(&traj, cfg.t_min, cfg.t_max)?;
        let set = KeyframeSet::build(&traj, keyframes, cfg.n_sources, cfg.online)?;
        let net = if cfg.reduction == "mlp" || cfg.fuse_depth == "mlp" {
            if cfg.checkpoint.is_empty() {
                return Err(Error::domain("the mlp reduction needs `checkpoint` set"));
            }
            let path = Path::new(&cfg.checkpoint);
            Some(Mlp::load(&mut io::read_bytes(path)?.as_slice(), path)?)
        } else {
            None
        };
        Ok(Self { traj, features, set, net })
    }

    fn index(&self, id: usize) -> usize {
        self.traj.frames.iter().position(|f| f.id == id).expect("keyframe in trajectory")
    }

    fn predict(&self, cfg: &RunConfig, reduction: &str, reference: usize, sources: &[usize]) -> Result<DepthMap> {
        let view = |id: usize| {
            let i = self.index(id);
            SweepView {
                features: &self.features[i],
                pose: self.traj.frames[i].pose,
                intrinsics: self.traj.frames[i].intrinsics,
            }
        };
        let planes = make_depth_planes(cfg.d_min, cfg.d_max, cfg.n_planes)?;
        let ctx = SweepContext::new(
            view(reference),
            sources.iter().map(|&s| view(s)).collect(),
            planes,
            cfg.channel_config()?,
            cfg.n_sources,
        )?;
        let r = match reduction {
            "dot_sum" => Reduction::DotSum {
                temperature: cfg.dot_temperature,
            },
            "dot_mean" => Reduction::DotMean {
                temperature: cfg.dot_temperature,
            },
            "mlp" => Reduction::Mlp {
                net: self.net.as_ref().expect("checkpoint loaded"),
                temperature: cfg.temperature,
            },
            other => return Err(Error::domain(format!("unknown reduction '{other}'"))),
        };
        Ok(predict_with(&ctx, r)?.depth)
    }
}

fn sweep(cfg: &RunConfig, data: &Path, out: &Path) -> Result<()> {
    let sw = Sweeper::new(cfg, data)?;
    let depth_dir = out.join("depth");
    mkdir(&depth_dir)?;
    for (r, srcs) in &sw.set.sources {
        let d = sw.predict(cfg, &cfg.reduction, *r, srcs)?;
        io::write_depth(&depth_dir.join(format!("{r:06}.depth.pgm")), &d)?;
    }
    write_text(&out.join("keyframes.txt"), &sw.set.to_text())
}

fn train_datasets(cfg: &RunConfig) -> Result<Dataset> {
    let mut ds = Dataset::default();
    for i in 0..cfg.train_scenes.max(1) as u64 {
        ds.extend(dataset_from_run_config(cfg, cfg.seed + i)?);
    }
    Ok(ds)
}

fn save_checkpoint(path: &Path, net: &Mlp) -> Result<()> {
    let mut bytes = Vec::new();
    net.save(&mut bytes).map_err(|e| Error::io(path, e))?;
    write_atomic(path, &bytes)
}

fn train_verb(cfg: &RunConfig, out: &Path) -> Result<()> {
    let ds = train_datasets(cfg)?;
    let tc = TrainConfig::from_run_config(cfg)?;
    let result = train(&ds, &tc)?;
    save_checkpoint(&out.join("checkpoint.bin"), &result.net)?;
    write_text(&out.join("loss_log.txt"), &result.loss_log())?;
    let summary = format!(
        "seed={}\nbest_step={}\nbest_val={}\ntrain_samples={}\nval_samples={}\n",
        cfg.seed,
        result.best_step,
        result.best_val,
        result.train_samples.len(),
        result.val_samples.len()
    );
    write_text(&out.join("train_summary.kv"), &summary)
}

/// Scene seed of the held-out test scene.
const TEST_SCENE_OFFSET: u64 = 1000;

fn ablate(cfg: &RunConfig, out: &Path) -> Result<()> {
    let axes = cfg
        .ablation_axes
        .iter()
        .map(|a| a.parse())
        .collect::<Result<Vec<AblationAxis>>>()?;
    let train_ds = train_datasets(cfg)?;
    let test_ds = dataset_from_run_config(cfg, cfg.seed + TEST_SCENE_OFFSET)?;
    let rows = run_ablation_matrix(&train_ds, &test_ds, &TrainConfig::from_run_config(cfg)?, &axes)?;
    write_text(&out.join("ablation.txt"), &format_ablation_table(&rows))?;
    let mut kv = String::new();
    for (i, r) in rows.iter().enumerate() {
        kv.push_str(&format!("variant{i}.label={}\n", r.label));
        for line in r.metrics.to_kv().lines() {
            kv.push_str(&format!("variant{i}.{line}\n"));
        }
    }
    write_text(&out.join("ablation.kv"), &kv)
}

/// Room box plus two voxels of margin.
fn fusion_bounds(cfg: &RunConfig) -> (Vec3, Vec3) {
    let m = 2.0 * cfg.voxel_size;
    (Vec3::repeat(-m), Vec3::from(cfg.room) + Vec3::repeat(m))
}

fn fuse(cfg: &RunConfig, data: &Path, depth_dir: Option<&Path>, out: &Path) -> Result<()> {
    let layout = DatasetLayout::new(data);
    let traj = layout.read_trajectory()?;
    let keyframes = select_keyframes(&traj, cfg.t_min, cfg.t_max)?;
    let set = KeyframeSet::build(&traj, keyframes.clone(), cfg.n_sources, cfg.online)?;
    let sweeper = match (depth_dir, cfg.fuse_depth.as_str()) {
        (None, "dot_sum" | "dot_mean" | "mlp") => Some(Sweeper::new(cfg, data)?),
        _ => None,
    };
    let frames: Vec<_> = match (&sweeper, depth_dir) {
        // predicted depth exists only for keyframes with sources
        (Some(_), _) | (_, Some(_)) => set
            .sources
            .iter()
            .map(|(r, _)| traj.frame(*r).unwrap().clone())
            .collect(),
        _ => keyframes.iter().map(|&id| traj.frame(id).unwrap().clone()).collect(),
    };
    let result = fuse_pipeline(
        &frames,
        |f| match (depth_dir, &sweeper) {
            (Some(dir), _) => io::read_depth(&dir.join("depth").join(format!("{:06}.depth.pgm", f.id))),
            (None, Some(sw)) => {
                let srcs = &set.sources.iter().find(|(r, _)| *r == f.id).unwrap().1;
                sw.predict(cfg, &cfg.fuse_depth, f.id, srcs)
            }
            (None, None) => io::read_depth(&layout.depth(f.id)),
        },
        fusion_bounds(cfg),
        &cfg.fusion(),
    )?;
    io::write_ply(&out.join("mesh.ply"), &result.mesh)?;
    let s = result.integrate_stats();
    let report = format!(
        "# frame_id integrate_ms\n{}mean_ms={:.4}\np50_ms={:.4}\np95_ms={:.4}\n",
        result.latency_report(),
        s.mean_ms,
        s.p50_ms,
        s.p95_ms
    );
    write_text(&out.join("latency.txt"), &report)
}

fn eval_depth(cfg: &RunConfig, data: &Path, pred: &Path, out: &Path) -> Result<()> {
    let _ = cfg;
    let layout = DatasetLayout::new(data);
    let dir = pred.join("depth");
    let mut files: Vec<PathBuf> = fs::read_dir(&dir)
        .map_err(|e| Error::io(&dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.to_string_lossy().ends_with(".depth.pgm"))
        .collect();
    files.sort();
    let mut acc = DepthMetricAccumulator::default();
    let mut per_frame = String::new();
    for path in &files {
        let name = path.file_name().unwrap().to_string_lossy();
        let id: usize = name
            .trim_end_matches(".depth.pgm")
            .parse()
            .map_err(|_| Error::Format {
                path: path.clone(),
                offset: None,
                message: "depth file name is not a frame id".into(),
            })?;
        let p = io::read_depth(path)?;
        let gt = io::read_depth(&layout.depth(id))?;
        acc.add(&p, &gt)?;
        let m = recon_core::evaluation::depth_metrics(&p, &gt)?;
        per_frame.push_str(&format!("{id:06} abs_rel={:.6} delta_1_25={:.4}\n", m.abs_rel, m.delta_1_25));
    }
    let m = acc.finish()?;
    write_text(&out.join("metrics.kv"), &m.to_kv())?;
    let report = format!(
        "depth evaluation over {} frames\n{per_frame}\nabs_diff {:.6} m\nabs_rel {:.6}\nsq_rel {:.6}\nrmse {:.6} m\ndelta<1.05 {:.2} %\ndelta<1.25 {:.2} %\n",
        files.len(),
        m.abs_diff,
        m.abs_rel,
        m.sq_rel,
        m.rmse,
        m.delta_1_05,
        m.delta_1_25
    );
    write_text(&out.join("metrics.txt"), &report)
}

fn eval_mesh(cfg: &RunConfig, pred: &Path, gt: &Path, data: Option<&Path>, out: &Path) -> Result<()> {
    let mut p = io::read_ply(pred)?;
    let g = io::read_ply(gt)?;
    if let Some(d) = data {
        let traj = DatasetLayout::new(d).read_trajectory()?;
        let frusta: Vec<Frustum> = traj
            .frames
            .iter()
            .map(|f| Frustum {
                pose: f.pose,
                intrinsics: f.intrinsics,
                far: cfg.d_max,
            })
            .collect();
        p = apply_cull_mask(&p, &frusta);
    }
    let ps = sample_surface(&p, cfg.mesh_samples, cfg.seed)?;
    let gs = sample_surface(&g, cfg.mesh_samples, cfg.seed.wrapping_add(1))?;
    let m = mesh_metrics(&ps, &gs, cfg.mesh_threshold_cm)?;
    write_text(&out.join("metrics.kv"), &m.to_kv())?;
    let report = format!(
        "mesh evaluation ({} samples per mesh, threshold {} cm)\nacc {:.4} cm\ncomp {:.4} cm\nchamfer {:.4} cm\nprec {:.4}\nrecall {:.4}\nfscore {:.4}\n",
        cfg.mesh_samples, m.threshold, m.acc, m.comp, m.chamfer, m.prec, m.recall, m.fscore
    );
    write_text(&out.join("metrics.txt"), &report)
}

fn bench(cfg: &RunConfig, out: &Path) -> Result<()> {
    let bc = RunConfig {
        width: cfg.bench_width,
        height: cfg.bench_height,
        ..cfg.clone()
    };
    let scene = generate_scene(&bc.scene())?;
    let k = bc.intrinsics()?;
    let traj = generate_trajectory(&scene, &k, cfg.bench_frames, &bc.trajectory(), cfg.seed)?;
    let depths: Vec<DepthMap> = traj
        .frames
        .iter()
        .map(|f| render_depth(&scene, &f.pose, &f.intrinsics).depth)
        .collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.bench_threads.max(1))
        .build()
        .map_err(|e| Error::domain(format!("thread pool: {e}")))?;
    let fc = cfg.fusion();
    let (min, max) = (Vec3::zeros(), Vec3::from(cfg.room));
    let times = pool.install(|| -> Result<Vec<f64>> {
        let mut vol = TsdfVolume::covering(min, max, fc.voxel_size)?;
        traj.frames
            .iter()
            .zip(&depths)
            .map(|(f, d)| Ok(vol.integrate(d, &f.pose, &f.intrinsics, fc.truncation, fc.max_weight)?.as_secs_f64() * 1e3))
            .collect()
    })?;
    let s = latency_stats(&times);
    let report = format!(
        "tsdf_integrate {}x{} into {:?} m at {} m voxels, {} threads, {} frames\nmean_ms={:.4}\np50_ms={:.4}\np95_ms={:.4}\n",
        cfg.bench_width, cfg.bench_height, cfg.room, fc.voxel_size, cfg.bench_threads, times.len(), s.mean_ms, s.p50_ms, s.p95_ms
    );
    print!("{report}");
    write_text(&out.join("bench.txt"), &report)
}
