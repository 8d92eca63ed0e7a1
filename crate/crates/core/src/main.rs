use std::f64::consts::PI;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use polarsdf::imaging::{read_frame, ImagingError};
use polarsdf::meshmetrics::{
    chamfer_f_score, read_mesh, sample_surface, write_mesh, GeometryScore, MeshError, SphereReference, MIN_RESOLUTION,
};
use polarsdf::neuralfield::{FieldError, NeuralField};
use polarsdf::synthdata::{
    dataset_frames, file_sha256, generate_dataset, load_dataset, AnalyticScene, CameraRig, Material, Shape, SynthError,
    MANIFEST_NAME,
};
use polarsdf::trainer::{extract_mesh, train, BranchMode, TrainConfig, TrainError, Variant};

const THREADS_ENV: &str = "POLARSDF_THREADS";

#[derive(Parser, Debug)]
#[command(name = "polarsdf", version, about = "Polarimetric neural implicit surface reconstruction")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render a synthetic polarization dataset from an analytic scene.
    Synth(SynthArgs),
    /// Optimize a neural SDF on a dataset.
    Train(TrainArgs),
    /// Extract a mesh from a checkpoint with marching cubes.
    Extract(ExtractArgs),
    /// Score a mesh against a reference mesh or an analytic sphere.
    Eval(EvalArgs),
    /// Render one channel of a frame to a PNG image.
    Inspect(InspectArgs),
}

#[derive(clap::Args, Debug)]
struct SynthArgs {
    #[arg(long, value_parser = clap::builder::PossibleValuesParser::new(Shape::NAMES))]
    scene: String,
    #[arg(long, default_value = "diffuse", value_parser = clap::builder::PossibleValuesParser::new(Material::NAMES))]
    material: String,
    #[arg(long, default_value_t = 20)]
    views: usize,
    /// Image size as WIDTHxHEIGHT.
    #[arg(long, default_value = "64x64", value_parser = parse_res)]
    res: (usize, usize),
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Wrapped-Gaussian AoP noise in radians.
    #[arg(long, default_value_t = 0.0)]
    aop_noise: f64,
    /// Close-range 60 degree rig instead of the default orbit.
    #[arg(long)]
    wide_angle: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(clap::Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "desk", value_parser = clap::builder::PossibleValuesParser::new(TrainConfig::PRESETS))]
    preset: String,
    /// TOML overrides layered over the preset.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_parser = clap::builder::PossibleValuesParser::new(Variant::NAMES))]
    variant: Option<String>,
    #[arg(long, value_enum)]
    branch: Option<BranchArg>,
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
    /// Print a telemetry line every N iterations (0 disables).
    #[arg(long, default_value_t = 100)]
    log_every: usize,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum BranchArg {
    Auto,
    Diffuse,
    Specular,
}

#[derive(clap::Args, Debug)]
struct ExtractArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long, default_value_t = 128)]
    res: usize,
    /// Output mesh, `.obj` or `.ply`.
    #[arg(long)]
    out: PathBuf,
}

#[derive(clap::Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    pred: PathBuf,
    /// Mesh file or `analytic:sphere:<radius>`.
    #[arg(long = "ref")]
    reference: String,
    #[arg(long, default_value_t = 0.01)]
    tau: f64,
    #[arg(long, default_value_t = 100_000)]
    samples: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Report path; a `.csv` sibling is written next to text reports.
    #[arg(long)]
    out: PathBuf,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq)]
enum ChannelArg {
    Aop,
    Dop,
    Color,
}

#[derive(clap::Args, Debug)]
struct InspectArgs {
    #[arg(long)]
    frame: PathBuf,
    #[arg(long, value_enum)]
    channel: ChannelArg,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug)]
enum CliError {
    Config(String),
    Io(String),
    Numeric(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Io(_) => 3,
            CliError::Numeric(_) => 4,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Config(m) | CliError::Io(m) | CliError::Numeric(m) => m,
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

impl From<ImagingError> for CliError {
    fn from(e: ImagingError) -> Self {
        match e {
            ImagingError::InvalidInput(_) | ImagingError::InvalidRotation(_) => CliError::Config(e.to_string()),
            _ => CliError::Io(e.to_string()),
        }
    }
}

impl From<SynthError> for CliError {
    fn from(e: SynthError) -> Self {
        match e {
            SynthError::Config(_) | SynthError::Visibility { .. } => CliError::Config(e.to_string()),
            SynthError::Imaging(i) => i.into(),
            _ => CliError::Io(e.to_string()),
        }
    }
}

impl From<MeshError> for CliError {
    fn from(e: MeshError) -> Self {
        match e {
            MeshError::Resolution(_) => CliError::Config(e.to_string()),
            MeshError::Empty(_) => CliError::Numeric(e.to_string()),
            _ => CliError::Io(e.to_string()),
        }
    }
}

impl From<FieldError> for CliError {
    fn from(e: FieldError) -> Self {
        match e {
            FieldError::Config(_) => CliError::Config(e.to_string()),
            FieldError::Tensor(_) => CliError::Numeric(e.to_string()),
            _ => CliError::Io(e.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Config(_) | TrainError::Input(_) => CliError::Config(e.to_string()),
            TrainError::Numeric { .. } | TrainError::Tensor(_) => CliError::Numeric(e.to_string()),
            TrainError::Field(f) => f.into(),
            TrainError::Mesh(m) => m.into(),
            TrainError::Io(_) => CliError::Io(e.to_string()),
        }
    }
}

fn parse_res(s: &str) -> Result<(usize, usize), String> {
    let (w, h) = s.split_once(['x', 'X']).ok_or_else(|| format!("expected WIDTHxHEIGHT, got '{s}'"))?;
    let w: usize = w.trim().parse().map_err(|_| format!("bad width in '{s}'"))?;
    let h: usize = h.trim().parse().map_err(|_| format!("bad height in '{s}'"))?;
    if w == 0 || h == 0 {
        return Err("resolution must be positive".into());
    }
    Ok((w, h))
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::Io(e.to_string()))?;
    std::fs::write(path, text)?;
    Ok(())
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn hash_file(path: &Path) -> Result<String, CliError> {
    file_sha256(path).map_err(CliError::from)
}

fn synth(a: SynthArgs) -> Result<(), CliError> {
    let shape = Shape::by_name(&a.scene).expect("validated by clap");
    let material = Material::by_name(&a.material).expect("validated by clap");
    let mut scene = AnalyticScene::new(shape, material);
    scene.aop_noise = a.aop_noise;
    let (w, h) = a.res;
    let rig = if a.wide_angle {
        CameraRig::wide_angle(a.views, w, h)
    } else {
        CameraRig::new(a.views, w, h)
    };
    let m = generate_dataset(&scene, &rig, a.seed, &a.out)?;
    eprintln!("wrote {} frames and {} to {}", m.files.len(), MANIFEST_NAME, a.out.display());
    Ok(())
}

fn resolve_train_config(a: &TrainArgs) -> Result<TrainConfig, CliError> {
    let mut cfg = match &a.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
            let mut table: toml::Table = text.parse().map_err(|e: toml::de::Error| CliError::Config(e.to_string()))?;
            table.entry("preset").or_insert_with(|| toml::Value::String(a.preset.clone()));
            TrainConfig::from_toml_str(&table.to_string())?
        }
        None => TrainConfig::preset(&a.preset)?,
    };
    if let Some(v) = &a.variant {
        cfg.variant = Variant::by_name(v).expect("validated by clap");
    }
    if let Some(b) = a.branch {
        cfg.branch = match b {
            BranchArg::Auto => BranchMode::Auto,
            BranchArg::Diffuse => BranchMode::Diffuse,
            BranchArg::Specular => BranchMode::Specular,
        };
    }
    if let Some(n) = a.iters {
        cfg.max_iterations = n;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn train_cmd(a: TrainArgs) -> Result<(), CliError> {
    let cfg = resolve_train_config(&a)?;
    if !a.data.is_dir() {
        return Err(CliError::Io(format!("dataset directory {} not found", a.data.display())));
    }
    let files = dataset_frames(&a.data)?;
    let mut inputs = Vec::new();
    for f in &files {
        inputs.push(json!({ "file": f.display().to_string(), "sha256": hash_file(f)? }));
    }
    let frames = load_dataset(&a.data)?;
    std::fs::create_dir_all(&a.out)?;
    std::fs::write(a.out.join("config.toml"), cfg.to_toml_string())?;
    write_json(
        &a.out.join("run_manifest.json"),
        &json!({
            "command": "train",
            "config": serde_json::to_value(&cfg).map_err(|e| CliError::Io(e.to_string()))?,
            "seed": cfg.seed,
            "inputs": inputs,
        }),
    )?;
    let every = a.log_every;
    let start = std::time::Instant::now();
    let out = train(frames, &cfg, Some(&a.out), |r| {
        if every > 0 && (r.iteration % every == 0 || r.iteration + 1 == cfg.max_iterations) {
            eprintln!(
                "it {:>6} total {:.5} color {:.5} pol {:.5} normal {:.5} eik {:.5} mask {:.5} lp {:.2} ln {:.2} N {} levels {} [{:.0}s]",
                r.iteration,
                r.total,
                r.color,
                r.pol,
                r.normal,
                r.eikonal,
                r.mask,
                r.lambda_p,
                r.lambda_n,
                r.neighbors,
                r.active_levels,
                start.elapsed().as_secs_f64()
            );
        }
    })?;
    if let Some(p) = &out.final_checkpoint {
        eprintln!("final checkpoint {}", p.display());
    }
    Ok(())
}

fn extract_cmd(a: ExtractArgs) -> Result<(), CliError> {
    if a.res < MIN_RESOLUTION {
        return Err(MeshError::Resolution(a.res).into());
    }
    let ext = a.out.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase);
    if !matches!(ext.as_deref(), Some("obj") | Some("ply")) {
        return Err(CliError::Config(format!("output must end in .obj or .ply: {}", a.out.display())));
    }
    let field = NeuralField::load_checkpoint(&a.ckpt)?;
    let extraction = extract_mesh(&field, a.res)?;
    if extraction.empty {
        eprintln!("warning: the zero level set is empty; writing an empty mesh");
    }
    write_mesh(&extraction.mesh, &a.out)?;
    write_json(
        &sibling(&a.out, ".manifest.json"),
        &json!({
            "command": "extract",
            "res": a.res,
            "inputs": [{ "file": a.ckpt.display().to_string(), "sha256": hash_file(&a.ckpt)? }],
            "vertices": extraction.mesh.vertices.len(),
            "triangles": extraction.mesh.triangles.len(),
        }),
    )?;
    eprintln!(
        "{} vertices, {} triangles -> {}",
        extraction.mesh.vertices.len(),
        extraction.mesh.triangles.len(),
        a.out.display()
    );
    Ok(())
}

fn parse_analytic(reference: &str) -> Result<Option<f64>, CliError> {
    let Some(rest) = reference.strip_prefix("analytic:") else {
        return Ok(None);
    };
    let r = rest
        .strip_prefix("sphere:")
        .and_then(|r| r.parse::<f64>().ok())
        .filter(|r| *r > 0.0 && r.is_finite())
        .ok_or_else(|| CliError::Config(format!("expected analytic:sphere:<radius>, got '{reference}'")))?;
    Ok(Some(r))
}

fn eval_cmd(a: EvalArgs) -> Result<(), CliError> {
    if !(a.tau > 0.0) || a.samples == 0 {
        return Err(CliError::Config("tau and samples must be positive".into()));
    }
    let analytic = parse_analytic(&a.reference)?;
    let pred = read_mesh(&a.pred)?;
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let pts = sample_surface(&pred, a.samples, &mut rng)?;
    let mut inputs = vec![json!({ "file": a.pred.display().to_string(), "sha256": hash_file(&a.pred)? })];
    let score: GeometryScore = match analytic {
        Some(radius) => SphereReference {
            center: [0.0; 3],
            radius,
        }
        .score(&pts, a.samples, a.tau, &mut rng)?,
        None => {
            let path = PathBuf::from(&a.reference);
            let reference = read_mesh(&path)?;
            inputs.push(json!({ "file": a.reference, "sha256": hash_file(&path)? }));
            // Same seed for both sides, so identical meshes give identical samples.
            let mut ref_rng = ChaCha8Rng::seed_from_u64(a.seed);
            let ref_pts = sample_surface(&reference, a.samples, &mut ref_rng)?;
            chamfer_f_score(&pts, &ref_pts, a.tau)?
        }
    };
    let csv = format!("{}\n{}\n", GeometryScore::csv_header(), score.csv_row());
    let is_csv = a.out.extension().and_then(|e| e.to_str()) == Some("csv");
    if is_csv {
        std::fs::write(&a.out, &csv)?;
    } else {
        std::fs::write(&a.out, score.report())?;
        std::fs::write(a.out.with_extension("csv"), &csv)?;
    }
    write_json(
        &sibling(&a.out, ".manifest.json"),
        &json!({
            "command": "eval",
            "reference": a.reference,
            "tau": a.tau,
            "samples": a.samples,
            "seed": a.seed,
            "inputs": inputs,
        }),
    )?;
    print!("{}", score.report());
    Ok(())
}

/// Hue wheel with period pi so that AoP wraps seamlessly.
fn cyclic_color(aop: f32) -> [u8; 3] {
    let h = ((aop as f64 + PI / 2.0) / PI).rem_euclid(1.0) * 6.0;
    let x = 1.0 - ((h % 2.0) - 1.0).abs();
    let (r, g, b) = match h as usize {
        0 => (1.0, x, 0.0),
        1 => (x, 1.0, 0.0),
        2 => (0.0, 1.0, x),
        3 => (0.0, x, 1.0),
        4 => (x, 0.0, 1.0),
        _ => (1.0, 0.0, x),
    };
    [r, g, b].map(|c: f64| (c * 255.0).round() as u8)
}

fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn srgb(v: f32) -> f32 {
    let v = v.clamp(0.0, 1.0);
    if v <= 0.003_130_8 {
        12.92 * v
    } else {
        1.055 * v.powf(1.0 / 2.4) - 0.055
    }
}

fn inspect_cmd(a: InspectArgs) -> Result<(), CliError> {
    let frame = read_frame(&a.frame)?;
    let (w, h) = (frame.width as u32, frame.height as u32);
    let n = frame.width * frame.height;
    let result = match a.channel {
        ChannelArg::Dop => image::GrayImage::from_fn(w, h, |x, y| image::Luma([to_u8(frame.dop[frame.index(x as usize, y as usize)])])).save(&a.out),
        ChannelArg::Aop => image::RgbImage::from_fn(w, h, |x, y| {
            let i = frame.index(x as usize, y as usize);
            if frame.mask[i] {
                image::Rgb(cyclic_color(frame.aop[i]))
            } else {
                image::Rgb([0, 0, 0])
            }
        })
        .save(&a.out),
        ChannelArg::Color => image::RgbImage::from_fn(w, h, |x, y| {
            let i = frame.index(x as usize, y as usize);
            image::Rgb([0, 1, 2].map(|c| to_u8(srgb(frame.color[c * n + i]))))
        })
        .save(&a.out),
    };
    result.map_err(|e| match e {
        image::ImageError::IoError(io) => CliError::Io(io.to_string()),
        other => CliError::Config(other.to_string()),
    })?;
    write_json(
        &sibling(&a.out, ".manifest.json"),
        &json!({
            "command": "inspect",
            "channel": format!("{:?}", a.channel).to_lowercase(),
            "inputs": [{ "file": a.frame.display().to_string(), "sha256": hash_file(&a.frame)? }],
        }),
    )?;
    Ok(())
}

fn configure_threads() -> Result<(), CliError> {
    if let Ok(v) = std::env::var(THREADS_ENV) {
        let n: usize = v
            .parse()
            .ok()
            .filter(|n| *n > 0)
            .ok_or_else(|| CliError::Config(format!("{THREADS_ENV} must be a positive integer, got '{v}'")))?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Config(e.to_string()))?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<(), CliError> {
    configure_threads()?;
    match cli.command {
        Command::Synth(a) => synth(a),
        Command::Train(a) => train_cmd(a),
        Command::Extract(a) => extract_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Inspect(a) => inspect_cmd(a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.code())
        }
    }
}
