use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use morphavatar_core::eval::{compute_metrics, evaluate, metrics, run_gradcheck, EvalImage, GradcheckConfig, Region};
use morphavatar_core::morphable::{generate_toy_head, MorphableTemplate, ToyHeadConfig};
use morphavatar_core::render::{OutputKind, Orbit};
use morphavatar_core::synth::{generate_splits, Dataset, GenerateOptions, SplitSizes, TEMPLATE_FILE};
use morphavatar_core::train::{fit, TrainConfig};
use morphavatar_core::{Error, Result};
use serde_json::json;

use crate::avatar::{Avatar, RenderRequest, MAX_SIZE};

#[derive(Debug, Parser)]
#[command(name = "morphavatar", version, about = "Implicit morphable head avatars")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write the toy morphable head template.
    GenTemplate(GenTemplate),
    /// Render train/val/test splits from the template.
    GenData(GenData),
    /// Train the fields on a generated dataset.
    Train(Train),
    /// Render one frame from a checkpoint.
    Render(Render),
    /// Render a sweep of one expression component (and optionally jaw pitch).
    Animate(Animate),
    /// Score a checkpoint (or a prediction dataset) against ground truth.
    Eval(Eval),
    /// Run the finite-difference gradient suites.
    Gradcheck(Gradcheck),
    /// Start the HTTP render service.
    Serve(Serve),
}

#[derive(Debug, Args)]
pub struct GenTemplate {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 4)]
    pub subdivisions: usize,
}

#[derive(Debug, Args)]
pub struct GenData {
    #[arg(long)]
    pub out: PathBuf,
    /// Existing template; the toy head is generated when omitted.
    #[arg(long)]
    pub template: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 64)]
    pub width: usize,
    #[arg(long, default_value_t = 64)]
    pub height: usize,
    #[arg(long, default_value_t = 200)]
    pub train: usize,
    #[arg(long, default_value_t = 10)]
    pub val: usize,
    #[arg(long, default_value_t = 50)]
    pub test: usize,
}

#[derive(Debug, Args)]
pub struct Train {
    /// Dataset root written by `gen-data`.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// TOML training config; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Start from the small desk-scale preset instead of the defaults.
    #[arg(long)]
    pub compact: bool,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub rays_per_step: Option<usize>,
    #[arg(long)]
    pub lambda_fl: Option<f64>,
    #[arg(long)]
    pub lambda_m: Option<f64>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub max_frames: Option<usize>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum OutputArg {
    Rgb,
    Normal,
    Mask,
    Depth,
}

impl From<OutputArg> for OutputKind {
    fn from(o: OutputArg) -> Self {
        match o {
            OutputArg::Rgb => OutputKind::Rgb,
            OutputArg::Normal => OutputKind::Normal,
            OutputArg::Mask => OutputKind::Mask,
            OutputArg::Depth => OutputKind::Depth,
        }
    }
}

#[derive(Debug, Args)]
pub struct ViewArgs {
    #[arg(long)]
    pub width: Option<usize>,
    #[arg(long)]
    pub height: Option<usize>,
    #[arg(long)]
    pub azimuth: Option<f64>,
    #[arg(long)]
    pub elevation: Option<f64>,
    #[arg(long)]
    pub distance: Option<f64>,
    /// Ray-sampling seed; defaults to the checkpoint's.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct ModelArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub template: PathBuf,
}

#[derive(Debug, Args)]
pub struct Render {
    #[command(flatten)]
    pub model: ModelArgs,
    /// JSON file in the `/render` request format (theta, psi, camera, ...).
    #[arg(long)]
    pub params: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub view: ViewArgs,
}

#[derive(Debug, Args)]
pub struct Animate {
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long)]
    pub out: PathBuf,
    /// Expression component to sweep.
    #[arg(long, default_value_t = 0)]
    pub component: usize,
    #[arg(long, default_value_t = -4.0, allow_hyphen_values = true)]
    pub from: f64,
    #[arg(long, default_value_t = 4.0, allow_hyphen_values = true)]
    pub to: f64,
    #[arg(long, default_value_t = 9)]
    pub steps: usize,
    /// Jaw pitch at the first and last frame.
    #[arg(long, num_args = 2, allow_hyphen_values = true)]
    pub jaw: Option<Vec<f64>>,
    #[arg(long, value_enum, default_value_t = OutputArg::Rgb)]
    pub output: OutputArg,
    #[command(flatten)]
    pub view: ViewArgs,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum RegionArg {
    Intersection,
    GroundTruth,
    Full,
}

#[derive(Debug, Args)]
pub struct Eval {
    /// Ground-truth split directory (e.g. `data/test`).
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, requires = "template", conflicts_with = "predictions")]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub template: Option<PathBuf>,
    /// Dataset directory holding predicted frames with matching ids.
    #[arg(long)]
    pub predictions: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = RegionArg::Intersection)]
    pub region: RegionArg,
    #[arg(long)]
    pub limit: Option<usize>,
    /// Write the report here as well as to stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct Gradcheck {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub states: Option<usize>,
    #[arg(long)]
    pub rays: Option<usize>,
    #[arg(long)]
    pub params: Option<usize>,
    /// Print the full report as JSON.
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Args)]
pub struct Serve {
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long, default_value = "127.0.0.1:8080")]
    pub bind: String,
    /// Renders allowed in flight; others queue.
    #[arg(long, default_value_t = 2)]
    pub max_concurrency: usize,
}

/// Command failure with its exit status: 1 for invalid input, 2 for
/// runtime failures.
#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::InvalidInput(_) | Error::Format(_) | Error::Json(_) => 1,
            Error::Io { ref source, .. } if source.kind() == std::io::ErrorKind::NotFound => 1,
            _ => 2,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

pub fn run(cli: Cli) -> std::result::Result<(), Failure> {
    match cli.command {
        Command::GenTemplate(a) => gen_template(a)?,
        Command::GenData(a) => gen_data(a)?,
        Command::Train(a) => train(a)?,
        Command::Render(a) => render(a)?,
        Command::Animate(a) => animate(a)?,
        Command::Eval(a) => eval(a)?,
        Command::Gradcheck(a) => return gradcheck(a),
        Command::Serve(a) => serve(a)?,
    }
    Ok(())
}

fn gen_template(a: GenTemplate) -> Result<()> {
    let tpl = generate_toy_head(&ToyHeadConfig {
        seed: a.seed,
        subdivisions: a.subdivisions,
        ..ToyHeadConfig::default()
    })?;
    tpl.save(&a.out)?;
    println!("{} ({} vertices, hash {})", a.out.display(), tpl.vertices.len(), tpl.content_hash()?);
    Ok(())
}

fn gen_data(a: GenData) -> Result<()> {
    let tpl = match &a.template {
        Some(p) => MorphableTemplate::load(p)?,
        None => generate_toy_head(&ToyHeadConfig::default())?,
    };
    let opts = GenerateOptions {
        width: a.width,
        height: a.height,
        seed: a.seed,
        ..GenerateOptions::default()
    };
    let sizes = SplitSizes {
        train: a.train,
        val: a.val,
        test: a.test,
    };
    generate_splits(&tpl, &a.out, sizes, &opts)?;
    println!("wrote {} (train {}, val {}, test {})", a.out.display(), a.train, a.val, a.test);
    Ok(())
}

fn train_config(a: &Train) -> Result<TrainConfig> {
    let mut cfg = match (&a.config, a.compact) {
        (Some(p), _) => TrainConfig::load(p)?,
        (None, true) => TrainConfig::compact(),
        (None, false) => TrainConfig::default(),
    };
    if let Some(v) = a.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    if let Some(v) = a.rays_per_step {
        cfg.rays_per_step = v;
    }
    if let Some(v) = a.lambda_fl {
        cfg.weights.lambda_fl = v;
    }
    if let Some(v) = a.lambda_m {
        cfg.weights.lambda_m = v;
    }
    if let Some(v) = a.lr {
        cfg.optimizer.lr = v;
    }
    if a.max_frames.is_some() {
        cfg.max_frames = a.max_frames;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn train(a: Train) -> Result<()> {
    let cfg = train_config(&a)?;
    let template = MorphableTemplate::load(a.data.join(TEMPLATE_FILE))?;
    let dataset = Dataset::load(&a.data.join("train"))?;
    std::fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    let cfg_path = a.out.join("config.toml");
    std::fs::write(&cfg_path, cfg.to_toml()?).map_err(|e| Error::io(&cfg_path, e))?;
    let ck = fit(&dataset, &template, &cfg, Some(&a.out), |l| {
        println!(
            "epoch {:3}  lr {:.1e}  total {:.5}  rgb {:.5}  mask {:.5}  flame {:.5}  ({:.1}s)",
            l.epoch, l.lr, l.total, l.loss.rgb, l.loss.mask, l.loss.flame, l.seconds
        );
    })?;
    println!("checkpoint {} after {} epochs", ck.content_hash()?, ck.epoch);
    Ok(())
}

fn apply_view(req: &mut RenderRequest, v: &ViewArgs) -> Result<()> {
    for (flag, val) in [("--width", v.width), ("--height", v.height)] {
        if let Some(n) = val {
            if n == 0 || n > MAX_SIZE {
                return Err(Error::invalid(format!("{flag}: expected an integer in [1, {MAX_SIZE}]")));
            }
        }
    }
    req.width = v.width.unwrap_or(req.width);
    req.height = v.height.unwrap_or(req.height);
    let Orbit {
        azimuth,
        elevation,
        distance,
    } = req.camera;
    req.camera = Orbit {
        azimuth: v.azimuth.unwrap_or(azimuth),
        elevation: v.elevation.unwrap_or(elevation),
        distance: v.distance.unwrap_or(distance),
    };
    if v.seed.is_some() {
        req.seed = v.seed;
    }
    Ok(())
}

/// Request from an optional JSON file in the service format.
pub fn load_request(path: Option<&Path>) -> Result<RenderRequest> {
    let Some(p) = path else {
        return Ok(RenderRequest::default());
    };
    let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
    let v: serde_json::Value = serde_json::from_str(&text)?;
    RenderRequest::from_json(&v).map_err(|e| Error::invalid(format!("{}: {e}", p.display())))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn render(a: Render) -> Result<()> {
    let avatar = Avatar::load(&a.model.checkpoint, &a.model.template)?;
    let mut req = load_request(a.params.as_deref())?;
    apply_view(&mut req, &a.view)?;
    let out = avatar.render(&req)?;
    std::fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    for (kind, name) in [
        (OutputKind::Rgb, "rgb.png"),
        (OutputKind::Normal, "normal.png"),
        (OutputKind::Mask, "mask.png"),
        (OutputKind::Depth, "depth.png"),
    ] {
        write_file(&a.out.join(name), &out.png(kind)?)?;
    }
    println!("wrote {} ({}x{}, {} flagged normals)", a.out.display(), out.width, out.height, out.flagged);
    Ok(())
}

fn animate(a: Animate) -> Result<()> {
    if a.steps < 2 {
        return Err(Error::invalid("--steps: need at least 2 frames"));
    }
    let avatar = Avatar::load(&a.model.checkpoint, &a.model.template)?;
    let mut base = RenderRequest {
        output: a.output.into(),
        ..RenderRequest::default()
    };
    if a.component >= base.psi.len() {
        return Err(Error::invalid(format!("--component: expected < {}", base.psi.len())));
    }
    apply_view(&mut base, &a.view)?;
    std::fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    let mut schedule = Vec::new();
    for k in 0..a.steps {
        let s = k as f64 / (a.steps - 1) as f64;
        let mut req = base.clone();
        req.psi[a.component] = a.from + s * (a.to - a.from);
        if let Some(j) = &a.jaw {
            req.theta[6] = j[0] + s * (j[1] - j[0]);
        }
        write_file(&a.out.join(format!("frame_{k:04}.png")), &avatar.render_png(&req)?)?;
        schedule.push(req.to_json());
    }
    write_file(&a.out.join("schedule.json"), serde_json::to_string_pretty(&schedule)?.as_bytes())?;
    println!("wrote {} frames to {}", a.steps, a.out.display());
    Ok(())
}

fn eval(a: Eval) -> Result<()> {
    let gt = Dataset::load(&a.data)?;
    let region = match a.region {
        RegionArg::Intersection => Region::Intersection,
        RegionArg::GroundTruth => Region::GroundTruth,
        RegionArg::Full => Region::Full,
    };
    let report = match (&a.checkpoint, &a.template, &a.predictions) {
        (Some(ck), Some(tpl), None) => {
            let avatar = Avatar::load(ck, tpl)?;
            serde_json::to_value(evaluate(&avatar.checkpoint, &avatar.template, &gt, region, a.limit)?)?
        }
        (None, _, Some(pred)) => {
            let pred = Dataset::load(pred)?;
            let n = a.limit.map_or(gt.len(), |l| l.min(gt.len()));
            if pred.len() < n {
                return Err(Error::invalid(format!("predictions: expected {n} frames, found {}", pred.len())));
            }
            let all: Vec<_> = pred
                .frames
                .iter()
                .zip(&gt.frames)
                .take(n)
                .map(|(p, g)| compute_metrics(&EvalImage::from_frame(p), &EvalImage::from_frame(g), region))
                .collect::<Result<_>>()?;
            let frames: Vec<_> = gt
                .frames
                .iter()
                .zip(&all)
                .map(|(g, m)| json!({ "frame_id": g.frame_id, "metrics": m }))
                .collect();
            json!({
                "note": format!("prediction frames compared over the {region:?} region"),
                "region": region,
                "aggregate": metrics::aggregate(&all),
                "frames": frames,
            })
        }
        _ => return Err(Error::invalid("eval: pass either --checkpoint with --template, or --predictions")),
    };
    let text = serde_json::to_string_pretty(&report)?;
    if let Some(p) = &a.out {
        write_file(p, text.as_bytes())?;
    }
    println!("{text}");
    Ok(())
}

fn gradcheck(a: Gradcheck) -> std::result::Result<(), Failure> {
    let mut cfg = GradcheckConfig {
        seed: a.seed,
        ..GradcheckConfig::default()
    };
    cfg.states = a.states.unwrap_or(cfg.states);
    cfg.rays_per_state = a.rays.unwrap_or(cfg.rays_per_state);
    cfg.params_per_ray = a.params.unwrap_or(cfg.params_per_ray);
    let tpl = generate_toy_head(&ToyHeadConfig::default())?;
    let report = run_gradcheck(&tpl, &cfg)?;
    if a.json {
        println!("{}", serde_json::to_string_pretty(&report).map_err(Error::from)?);
    } else {
        for s in &report.suites {
            println!(
                "{:<8} items {:3}  checked {:5}  failed {:3}  worst relative error {:.3e}",
                format!("{:?}", s.suite).to_lowercase(),
                s.items,
                s.checked,
                s.failed,
                s.worst_rel_error
            );
        }
    }
    if report.all_pass {
        Ok(())
    } else {
        Err(Failure {
            code: 2,
            message: format!("{} gradient comparisons exceeded tolerance", report.failures.len()),
        })
    }
}

fn serve(a: Serve) -> Result<()> {
    let avatar = Avatar::load(&a.model.checkpoint, &a.model.template)?;
    let rt = tokio::runtime::Runtime::new().map_err(|e| Error::InvalidState(format!("runtime: {e}")))?;
    rt.block_on(crate::service::serve(avatar, &a.bind, a.max_concurrency))
        .map_err(|e| Error::InvalidState(format!("serve {}: {e}", a.bind)))
}
