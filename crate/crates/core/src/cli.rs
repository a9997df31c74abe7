//! Command-line front end.
//!
//! Every subcommand resolves its settings (flags over `--config` over
//! defaults) and validates them before touching the output directory. Bad
//! flags or settings exit with code 2; failures while running exit with
//! code 1 after printing a diagnostic JSON object to stderr.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::camera::{rig_with_resolution, CameraRig, DEFAULT_RESOLUTION};
use crate::consistency::{consistency_forward, pairwise_distance, DepthRange, LossMap};
use crate::energy::{descriptor_optimize, direct_optimize, EnergyConfig, EnergyReport, GenNorm, Optimizer};
use crate::error::{Error, Result};
use crate::generator::{Generator, ToyGenerator, ToyGeneratorConfig};
use crate::io::{encode_loss_map, encode_pgm16, read_pfm, read_ply, write_file, write_json, write_pfm, write_ply, PlyFormat};
use crate::metrics::{chamfer_distance, fuse_views, PointCloud};
use crate::raster::{render_depth, reproject_view, DepthImage, DEFAULT_BACKGROUND};
use crate::synth::{make_scene, SceneSpec, SyntheticScene};
use crate::io::SCHEMA_VERSION;

const MAX_VIEWS: usize = 8;

#[derive(Debug, Parser)]
#[command(name = "mvci", version, about = "Multi-view consistent inference for depth-view shape completion")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Synthesize a scene with its views and surface cloud.
    Synth(Common),
    /// Render a point cloud (or the synthetic ground truth) into the rig.
    Render {
        #[command(flatten)]
        common: Common,
        /// PLY point cloud to render.
        #[arg(long)]
        input: Option<PathBuf>,
    },
    /// Pseudo-render one view into another and report their consistency distance.
    Reproject {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: ViewSources,
        #[arg(long, default_value_t = 0)]
        source: usize,
        #[arg(long, default_value_t = 1)]
        target: usize,
    },
    /// Export per-view consistency loss maps.
    Lossmaps {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: ViewSources,
        /// Score the noisy views of the synthetic scene instead of the ground truth.
        #[arg(long)]
        perturbed: bool,
    },
    /// Optimize the depth maps directly.
    OptimizeDirect {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: ViewSources,
    },
    /// Optimize the shape descriptor of the toy generator.
    OptimizeDescriptor {
        #[command(flatten)]
        common: Common,
        /// Directory of input views `view_<k>.pfm`.
        #[arg(long)]
        inputs_dir: Option<PathBuf>,
    },
    /// Chamfer distance between two PLY point clouds.
    EvalCd {
        #[command(flatten)]
        common: Common,
        a: PathBuf,
        b: PathBuf,
        /// Average squared instead of plain nearest-neighbour distances.
        #[arg(long)]
        squared: bool,
    },
    /// Run the ablation grids on the perturbed sphere.
    Ablate(Common),
}

#[derive(Debug, Clone, Args)]
struct Common {
    /// JSON file with default settings; flags take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value = "out")]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Use the first N views of the cube-corner rig.
    #[arg(long = "views")]
    n_views: Option<usize>,
    #[arg(long, num_args = 2, value_names = ["H", "W"])]
    res: Option<Vec<usize>>,
    #[arg(long)]
    u_factor: Option<usize>,
    #[arg(long)]
    j_views: Option<usize>,
    #[arg(long)]
    mu: Option<f64>,
    #[arg(long)]
    norm: Option<GenNorm>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    select_window: Option<usize>,
    #[arg(long)]
    threshold_frac: Option<f64>,
    /// Worker threads (defaults to one per core).
    #[arg(long)]
    threads: Option<usize>,
}

/// Views read from disk instead of synthesized.
#[derive(Debug, Clone, Args)]
struct ViewSources {
    /// Directory of views `view_<k>.pfm`.
    #[arg(long)]
    views_dir: Option<PathBuf>,
    /// Directory of input views `view_<k>.pfm`; defaults to the views themselves.
    #[arg(long)]
    inputs_dir: Option<PathBuf>,
}

/// Contents of a `--config` file. Every field is optional.
#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct FileConfig {
    schema_version: Option<u32>,
    seed: Option<u64>,
    views: Option<usize>,
    resolution: Option<[usize; 2]>,
    scene: Option<SceneSpec>,
    mu: Option<f64>,
    gen_norm: Option<GenNorm>,
    steps: Option<usize>,
    learning_rate: Option<f64>,
    select_window: Option<usize>,
    optimizer: Option<Optimizer>,
    backtracking: Option<bool>,
    u_factor: Option<usize>,
    j_views: Option<usize>,
    outlier_fraction: Option<f64>,
    generator: Option<ToyGeneratorConfig>,
}

#[derive(Debug, Clone, Copy)]
enum Mode {
    Direct,
    Descriptor,
}

#[derive(Debug)]
struct Settings {
    out: PathBuf,
    seed: u64,
    rig: CameraRig,
    scene: SceneSpec,
    energy: EnergyConfig,
    generator: ToyGeneratorConfig,
}

enum Failure {
    Usage(String),
    Runtime(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Runtime(e)
    }
}

fn usage(msg: impl Into<String>) -> Failure {
    Failure::Usage(msg.into())
}

fn settings(common: &Common, mode: Mode) -> std::result::Result<Settings, Failure> {
    let file: FileConfig = match &common.config {
        Some(path) => {
            let bytes = std::fs::read(path).map_err(|e| usage(format!("cannot read {}: {e}", path.display())))?;
            serde_json::from_slice(&bytes).map_err(|e| usage(format!("bad config {}: {e}", path.display())))?
        }
        None => FileConfig::default(),
    };
    if let Some(v) = file.schema_version {
        if v != SCHEMA_VERSION {
            return Err(usage(format!("unsupported config schema_version {v}, expected {SCHEMA_VERSION}")));
        }
    }

    let n_views = common.n_views.or(file.views).unwrap_or(MAX_VIEWS);
    if !(1..=MAX_VIEWS).contains(&n_views) {
        return Err(usage(format!("--views must lie in [1, {MAX_VIEWS}], got {n_views}")));
    }
    let (h, w) = match (&common.res, file.resolution) {
        (Some(r), _) => (r[0], r[1]),
        (None, Some([h, w])) => (h, w),
        (None, None) => (DEFAULT_RESOLUTION, DEFAULT_RESOLUTION),
    };
    if h == 0 || w == 0 {
        return Err(usage(format!("resolution must be positive, got {h}x{w}")));
    }
    let rig = rig_with_resolution(h, w).truncated(n_views).map_err(|e| usage(e.to_string()))?;

    let mut energy = match mode {
        Mode::Direct => EnergyConfig::direct(),
        Mode::Descriptor => EnergyConfig::descriptor(),
    };
    energy.mu = common.mu.or(file.mu).unwrap_or(energy.mu);
    energy.gen_norm = common.norm.or(file.gen_norm).unwrap_or(energy.gen_norm);
    energy.steps = common.steps.or(file.steps).unwrap_or(energy.steps);
    energy.learning_rate = common.lr.or(file.learning_rate).unwrap_or(energy.learning_rate);
    energy.select_window = common.select_window.or(file.select_window).unwrap_or(energy.select_window);
    energy.optimizer = file.optimizer.unwrap_or(energy.optimizer);
    energy.backtracking = file.backtracking.unwrap_or(energy.backtracking);
    let c = &mut energy.consistency;
    c.u_factor = common.u_factor.or(file.u_factor).unwrap_or(c.u_factor);
    c.j_views = common.j_views.or(file.j_views).unwrap_or(c.j_views.min(n_views));
    c.outlier_fraction = common.threshold_frac.or(file.outlier_fraction).unwrap_or(c.outlier_fraction);
    energy.validate(n_views).map_err(|e| usage(e.to_string()))?;

    let scene = file.scene.unwrap_or_else(SceneSpec::perturbed_sphere);
    scene.validate().map_err(|e| usage(e.to_string()))?;
    let generator = file.generator.unwrap_or_else(ToyGeneratorConfig::standard);
    if let Some(0) = common.threads {
        return Err(usage("--threads must be at least 1"));
    }

    Ok(Settings { out: common.out.clone(), seed: common.seed.or(file.seed).unwrap_or(0), rig, scene, energy, generator })
}

/// Parses `argv` (program name first), runs the subcommand and returns the
/// process exit code.
pub fn run(argv: Vec<String>) -> i32 {
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let threads = common(&cli.command).threads;
    let outcome = match threads {
        Some(n) if n > 0 => match rayon::ThreadPoolBuilder::new().num_threads(n).build() {
            Ok(pool) => pool.install(|| execute(&cli.command)),
            Err(e) => Err(Failure::Runtime(Error::Domain(format!("cannot start thread pool: {e}")))),
        },
        _ => execute(&cli.command),
    };
    match outcome {
        Ok(()) => 0,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            2
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("{}", diagnostic(&e, common(&cli.command)));
            1
        }
    }
}

fn common(cmd: &Command) -> &Common {
    match cmd {
        Command::Synth(c) | Command::Ablate(c) => c,
        Command::Render { common, .. }
        | Command::Reproject { common, .. }
        | Command::Lossmaps { common, .. }
        | Command::OptimizeDirect { common, .. }
        | Command::OptimizeDescriptor { common, .. }
        | Command::EvalCd { common, .. } => common,
    }
}

fn diagnostic(e: &Error, common: &Common) -> String {
    let kind = match e {
        Error::Domain(_) => "domain",
        Error::BehindCamera(_) => "behind_camera",
        Error::Contract(_) => "contract",
        Error::Parse { .. } => "parse",
        Error::Io(_) => "io",
        Error::Json(_) => "json",
        Error::Diverged { .. } => "diverged",
        Error::Generator(_) => "generator",
    };
    let mut value = json!({ "schema_version": SCHEMA_VERSION, "status": "error", "kind": kind, "message": e.to_string() });
    match e {
        Error::Parse { offset, .. } => value["offset"] = json!(offset),
        Error::Diverged { step, report, .. } => {
            value["step"] = json!(step);
            let path = common.out.join("report.json");
            if write_json(&path, report.as_ref()).is_ok() {
                value["partial_report"] = json!(path.display().to_string());
            }
        }
        _ => {}
    }
    value.to_string()
}

fn execute(cmd: &Command) -> std::result::Result<(), Failure> {
    match cmd {
        Command::Synth(common) => synth(&settings(common, Mode::Direct)?),
        Command::Render { common, input } => render(&settings(common, Mode::Direct)?, input.as_deref()),
        Command::Reproject { common, data, source, target } => {
            let s = settings(common, Mode::Direct)?;
            let n = s.rig.len();
            if *source >= n || *target >= n {
                return Err(usage(format!("--source and --target must be below {n}")));
            }
            reproject(&s, data, *source, *target)
        }
        Command::Lossmaps { common, data, perturbed } => lossmaps(&settings(common, Mode::Direct)?, data, *perturbed),
        Command::OptimizeDirect { common, data } => optimize_direct(&settings(common, Mode::Direct)?, data),
        Command::OptimizeDescriptor { common, inputs_dir } => {
            optimize_descriptor(&settings(common, Mode::Descriptor)?, inputs_dir.as_deref())
        }
        Command::EvalCd { common, a, b, squared } => {
            let s = settings(common, Mode::Direct)?;
            let cd = chamfer_distance(&read_ply(a)?, &read_ply(b)?, *squared)?;
            write_json(&s.out.join("cd.json"), &json!({ "a": a, "b": b, "squared": squared, "chamfer_distance": cd }))?;
            println!("{cd}");
            Ok(())
        }
        Command::Ablate(common) => ablate(&settings(common, Mode::Direct)?),
    }
}

fn view_path(dir: &Path, k: usize) -> PathBuf {
    dir.join(format!("view_{k}.pfm"))
}

fn write_views(dir: &Path, views: &[DepthImage]) -> Result<()> {
    views.iter().enumerate().try_for_each(|(k, v)| write_pfm(&view_path(dir, k), v))
}

fn read_views(dir: &Path, rig: &CameraRig) -> Result<Vec<DepthImage>> {
    (0..rig.len())
        .map(|k| {
            let v = read_pfm(&view_path(dir, k), DEFAULT_BACKGROUND)?;
            if v.width() != rig.width || v.height() != rig.height {
                return Err(Error::Contract(format!(
                    "{} is {}x{}, expected {}x{} (set --res)",
                    view_path(dir, k).display(),
                    v.height(),
                    v.width(),
                    rig.height,
                    rig.width
                )));
            }
            Ok(v)
        })
        .collect()
}

fn scene(s: &Settings) -> Result<SyntheticScene> {
    make_scene(&s.scene, &s.rig, s.seed)
}

/// Views and inputs from disk, or `fallback` from the synthetic scene.
fn load_views(
    s: &Settings,
    data: &ViewSources,
    fallback: impl FnOnce(SyntheticScene) -> (Vec<DepthImage>, Vec<DepthImage>, Option<SyntheticScene>),
) -> Result<(Vec<DepthImage>, Vec<DepthImage>, Option<SyntheticScene>)> {
    match (&data.views_dir, &data.inputs_dir) {
        (None, None) => Ok(fallback(scene(s)?)),
        (Some(v), i) => {
            let views = read_views(v, &s.rig)?;
            let inputs = match i {
                Some(i) => read_views(i, &s.rig)?,
                None => views.clone(),
            };
            Ok((views, inputs, None))
        }
        (None, Some(_)) => Err(Error::Contract("--inputs-dir requires --views-dir".into())),
    }
}

fn write_loss_maps(dir: &Path, maps: &[LossMap], range: &DepthRange) -> Result<()> {
    maps.iter()
        .enumerate()
        .try_for_each(|(k, m)| write_file(&dir.join(format!("loss_{k}.pgm")), &encode_loss_map(m, range.span())?))
}

fn synth(s: &Settings) -> std::result::Result<(), Failure> {
    let sc = scene(s)?;
    write_views(&s.out.join("gt"), &sc.gt_views)?;
    write_views(&s.out.join("inputs"), &sc.inputs)?;
    write_views(&s.out.join("perturbed"), &sc.perturbed)?;
    write_ply(&s.out.join("gt.ply"), &sc.gt_cloud, PlyFormat::BinaryLittleEndian)?;
    write_json(
        &s.out.join("scene.json"),
        &json!({
            "seed": sc.seed,
            "spec": sc.spec,
            "depth_range": sc.depth_range,
            "resolution": [s.rig.height, s.rig.width],
            "views": s.rig.len(),
        }),
    )?;
    println!("wrote scene with {} views to {}", s.rig.len(), s.out.display());
    Ok(())
}

fn render(s: &Settings, input: Option<&Path>) -> std::result::Result<(), Failure> {
    let cloud = match input {
        Some(p) => read_ply(p)?,
        None => scene(s)?.gt_cloud,
    };
    let views: Vec<DepthImage> = s
        .rig
        .views
        .iter()
        .map(|v| render_depth(&cloud.points, v, (s.rig.height, s.rig.width), DEFAULT_BACKGROUND))
        .collect();
    let dir = s.out.join("views");
    write_views(&dir, &views)?;
    if let Some(range) = DepthRange::from_views(&views) {
        for (k, v) in views.iter().enumerate() {
            write_file(&dir.join(format!("view_{k}.pgm")), &encode_pgm16(v, &range)?)?;
        }
    }
    println!("rendered {} points into {} views", cloud.len(), views.len());
    Ok(())
}

fn reproject(s: &Settings, data: &ViewSources, source: usize, target: usize) -> std::result::Result<(), Failure> {
    let (views, inputs, _) = load_views(s, data, |sc| (sc.gt_views, sc.inputs, None))?;
    let u = s.energy.consistency.u_factor;
    let buf = reproject_view(&views[source], &s.rig.views[source], &s.rig.views[target], (s.rig.height, s.rig.width), u)?;
    write_pfm(&s.out.join(format!("reprojected_{source}_to_{target}.pfm")), &buf.to_image(DEFAULT_BACKGROUND))?;
    let cfg = s.energy.consistency.resolved(&views)?;
    let d = pairwise_distance(source, target, &views, &inputs, &s.rig, &cfg)?;
    let present = d.present_count();
    let mean = if present > 0 { d.present().sum::<f64>() / present as f64 } else { 0.0 };
    write_json(
        &s.out.join(format!("reproject_{source}_to_{target}.json")),
        &json!({
            "source": source,
            "target": target,
            "u_factor": u,
            "occupied_subcells": buf.occupancy(),
            "present_pixels": present,
            "mean_distance": mean,
            "depth_range": cfg.depth_range,
        }),
    )?;
    println!("view {source} -> {target}: {present} pixels, mean distance {mean:e}");
    Ok(())
}

fn lossmaps(s: &Settings, data: &ViewSources, perturbed: bool) -> std::result::Result<(), Failure> {
    let (views, inputs, _) = load_views(s, data, |sc| {
        let views = if perturbed { sc.perturbed } else { sc.gt_views };
        (views, sc.inputs, None)
    })?;
    let fwd = consistency_forward(&views, &inputs, &s.rig, &s.energy.consistency)?;
    let range = fwd.config.depth_range.expect("forward pass resolves the depth range");
    write_loss_maps(&s.out, &fwd.loss_maps, &range)?;
    write_json(
        &s.out.join("lossmaps.json"),
        &json!({
            "loss": fwd.loss,
            "per_view_mean": fwd.loss_maps.iter().map(LossMap::mean).collect::<Vec<_>>(),
            "scale": range.span(),
            "depth_range": range,
        }),
    )?;
    println!("consistency loss {:e}", fwd.loss);
    Ok(())
}

#[derive(Serialize)]
struct OptimizeSummary<'a> {
    report: &'a EnergyReport,
    #[serde(skip_serializing_if = "Option::is_none")]
    initial_cd: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    final_cd: Option<f64>,
}

fn finish_optimization(
    s: &Settings,
    report: &EnergyReport,
    initial: &[DepthImage],
    inputs: &[DepthImage],
    gt: Option<&PointCloud>,
) -> Result<()> {
    let (initial_cd, final_cd) = match gt {
        Some(gt) => (
            Some(chamfer_distance(&fuse_views(initial, &s.rig)?, gt, false)?),
            Some(chamfer_distance(&fuse_views(&report.final_views, &s.rig)?, gt, false)?),
        ),
        None => (None, None),
    };
    write_views(&s.out.join("final"), &report.final_views)?;
    let mut cfg = s.energy.consistency;
    cfg.depth_range = report.depth_range;
    let fwd = consistency_forward(&report.final_views, inputs, &s.rig, &cfg)?;
    let range = fwd.config.depth_range.expect("forward pass resolves the depth range");
    write_loss_maps(&s.out.join("lossmaps"), &fwd.loss_maps, &range)?;
    write_json(&s.out.join("report.json"), &OptimizeSummary { report, initial_cd, final_cd })?;
    if let (Some(first), Some(best)) = (report.initial, report.selected()) {
        println!(
            "consistency loss {:e} -> {:e} (step {})",
            first.consistency_loss, best.consistency_loss, report.selected_step
        );
    }
    Ok(())
}

fn optimize_direct(s: &Settings, data: &ViewSources) -> std::result::Result<(), Failure> {
    let (views, inputs, sc) = load_views(s, data, |sc| (sc.perturbed.clone(), sc.inputs.clone(), Some(sc)))?;
    let report = direct_optimize(&views, &inputs, &s.rig, &s.energy)?;
    finish_optimization(s, &report, &views, &inputs, sc.as_ref().map(|sc| &sc.gt_cloud))?;
    Ok(())
}

fn optimize_descriptor(s: &Settings, inputs_dir: Option<&Path>) -> std::result::Result<(), Failure> {
    let (inputs, gt) = match inputs_dir {
        Some(dir) => (read_views(dir, &s.rig)?, None),
        None => {
            let sc = scene(s)?;
            (sc.inputs, Some(sc.gt_cloud))
        }
    };
    let generator = ToyGenerator::new(s.generator.clone(), s.rig.clone())?;
    let fit = generator.initial_descriptor(&inputs)?;
    if fit.fell_back {
        eprintln!("warning: initial descriptor fit fell back to zeros");
    }
    let initial = generator.forward(&fit.descriptor, &inputs)?;
    let report = descriptor_optimize(&generator, &fit.descriptor, &inputs, &s.rig, &s.energy)?;
    finish_optimization(s, &report, &initial, &inputs, gt.as_ref())?;
    Ok(())
}

fn fmt_f64(x: f64) -> String {
    format!("{x}")
}

fn ablate(s: &Settings) -> std::result::Result<(), Failure> {
    let sc = make_scene(&SceneSpec::perturbed_sphere(), &s.rig, s.seed)?;
    let base = s.energy;
    let mut runs: Vec<(&str, String, EnergyConfig)> = Vec::new();
    for mu in [0.1, 1.0, 2.0, 5.0, 10.0, 0.0] {
        for norm in [GenNorm::L1, GenNorm::L2] {
            let cfg = EnergyConfig { mu, gen_norm: norm, ..base };
            runs.push(("mu_norm", format!("mu_{mu}_{}", norm.to_string().to_lowercase()), cfg));
        }
    }
    for u in [1, 3, 5] {
        let mut cfg = base;
        cfg.consistency.u_factor = u;
        runs.push(("u_factor", format!("u_{u}"), cfg));
    }
    for j in [3, 5, 8].into_iter().filter(|&j| j <= s.rig.len()) {
        let mut cfg = base;
        cfg.consistency.j_views = j;
        runs.push(("j_views", format!("j_{j}"), cfg));
    }

    let mut csv = csv::Writer::from_writer(Vec::new());
    let io_err = |e: csv::Error| Error::Io(std::io::Error::other(e));
    csv.write_record(["experiment", "setting", "mu", "norm", "u", "j", "final_consistency_loss", "final_cd"])
        .map_err(io_err)?;
    for (experiment, setting, cfg) in &runs {
        let report = direct_optimize(&sc.perturbed, &sc.inputs, &s.rig, cfg)?;
        let best = report.selected().ok_or_else(|| Error::Contract("report has no selected step".into()))?;
        let cd = chamfer_distance(&fuse_views(&report.final_views, &s.rig)?, &sc.gt_cloud, false)?;
        write_views(&s.out.join(experiment).join(setting), &report.final_views)?;
        csv.write_record([
            experiment.to_string(),
            setting.clone(),
            fmt_f64(cfg.mu),
            cfg.gen_norm.to_string(),
            cfg.consistency.u_factor.to_string(),
            cfg.consistency.j_views.to_string(),
            fmt_f64(best.consistency_loss),
            fmt_f64(cd),
        ])
        .map_err(io_err)?;
    }
    let bytes = csv.into_inner().map_err(|e| Error::Io(std::io::Error::other(e.to_string())))?;
    write_file(&s.out.join("ablation.csv"), &bytes)?;
    println!("wrote {} ablation runs to {}", runs.len(), s.out.display());
    Ok(())
}
