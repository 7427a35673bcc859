//! `stereoforge`: dataset synthesis, training, conversion and evaluation.
//!
//! Exit codes: 0 success, 1 usage error, 2 runtime failure.

use std::fs::{self, OpenOptions};
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use stereoforge::data::{load_stereo_dir, save_stereo_dir, synth_dataset, SceneSpec, StereoPair};
use stereoforge::dibr::fit_global_disparity;
use stereoforge::eval::{compare, EvalSetup, Method};
use stereoforge::kv::KvConfig;
use stereoforge::network::{upscale_full_res, Network, NetworkConfig, Upsample};
use stereoforge::output::{write_stereo, StereoFormat};
use stereoforge::selection::DisparityRange;
use stereoforge::training::{Checkpoint, LogRow, TrainConfig, Trainer, LOG_HEADER};
use stereoforge::{Image, Mode};

#[derive(Parser, Debug)]
#[command(name = "stereoforge", version, about = "Monocular to stereo conversion")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic stereo dataset.
    Synth(SynthArgs),
    /// Train a network and write checkpoints plus a metric CSV.
    Train(TrainArgs),
    /// Convert monocular images to stereo.
    Convert(ConvertArgs),
    /// Compare methods on a stereo dataset.
    Eval(EvalArgs),
}

#[derive(Args, Debug)]
struct SynthArgs {
    /// Scene description (key = value).
    #[arg(long)]
    spec: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    count: usize,
    /// Overrides the spec's seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    val: Option<PathBuf>,
    /// Network and training keys (key = value).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Checkpoint path, rewritten every `checkpoint_every` iterations.
    #[arg(long)]
    out: PathBuf,
    /// Metric CSV; defaults to the checkpoint path with a `.csv` extension.
    #[arg(long)]
    log: Option<PathBuf>,
    /// Continue from this checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Config override, repeatable: `--set key=value`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    iters: Option<u64>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct ConvertArgs {
    /// An image file or a directory of PNG/PPM images.
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    /// anaglyph, sbs or pair.
    #[arg(long, default_value = "anaglyph")]
    format: String,
    #[arg(long)]
    out: PathBuf,
    /// Render at k times the network resolution from the upscaled input.
    #[arg(long, value_name = "K")]
    full_res: Option<usize>,
    /// Probability map upsampling for --full-res: bilinear or nearest.
    #[arg(long, default_value = "bilinear")]
    upsample: String,
    /// Squeeze each view to half width in side-by-side output.
    #[arg(long)]
    half_width: bool,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    data: PathBuf,
    /// Selection-layer network for deep3d and deep3d+oracle.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Direct-regression network for the regression method.
    #[arg(long)]
    regression: Option<PathBuf>,
    /// Fit the global shift on this dataset instead of the evaluated frames.
    #[arg(long)]
    train_data: Option<PathBuf>,
    /// Comma-separated: ground_truth, global_disparity, block_match+dibr,
    /// deep3d, deep3d+oracle, regression.
    #[arg(long, default_value = "global_disparity,block_match+dibr")]
    methods: String,
    #[arg(long)]
    report: PathBuf,
    /// Disparity range for the baselines when no network is given.
    #[arg(long, default_value = "-15..16", allow_hyphen_values = true)]
    range: String,
    /// Oracle offset search, MIN..MAX.
    #[arg(long, default_value = "-4..4", allow_hyphen_values = true)]
    oracle_search: String,
    #[arg(long, default_value_t = 7)]
    window: usize,
}

enum Failure {
    Usage(String),
    Runtime(String),
}

impl From<stereoforge::Error> for Failure {
    fn from(e: stereoforge::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

type CliResult<T> = Result<T, Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if let Err(msg) = init_threads() {
        eprintln!("error: {msg}");
        return ExitCode::from(1);
    }
    let result = match cli.command {
        Command::Synth(a) => synth(a),
        Command::Train(a) => train(a),
        Command::Convert(a) => convert(a),
        Command::Eval(a) => eval(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
    }
}

/// `STEREOFORGE_THREADS` caps the worker pool; 0 means single-threaded.
fn init_threads() -> Result<(), String> {
    let Ok(v) = std::env::var("STEREOFORGE_THREADS") else {
        return Ok(());
    };
    let n: usize = v.trim().parse().map_err(|_| format!("STEREOFORGE_THREADS must be an integer, got '{v}'"))?;
    rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global().map_err(|e| e.to_string())
}

fn require_file(path: &Path) -> CliResult<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Failure::Usage(format!("no such file: {}", path.display())))
    }
}

fn require_dir(path: &Path) -> CliResult<()> {
    if path.is_dir() {
        Ok(())
    } else {
        Err(Failure::Usage(format!("no such directory: {}", path.display())))
    }
}

fn create_dir(path: &Path) -> CliResult<()> {
    fs::create_dir_all(path).map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))
}

fn parse_range(s: &str) -> CliResult<(i32, i32)> {
    let bad = || Failure::Usage(format!("bad range '{s}', expected MIN..MAX"));
    let (a, b) = s.split_once("..").ok_or_else(bad)?;
    let (a, b) = (a.trim().parse().map_err(|_| bad())?, b.trim().parse().map_err(|_| bad())?);
    if a > b {
        return Err(bad());
    }
    Ok((a, b))
}

fn synth(a: SynthArgs) -> CliResult<()> {
    require_file(&a.spec)?;
    if a.count == 0 {
        return Err(Failure::Usage("--count must be positive".into()));
    }
    let mut spec = SceneSpec::from_kv(&KvConfig::load(&a.spec)?).map_err(|e| Failure::Usage(e.to_string()))?;
    if let Some(s) = a.seed {
        spec.seed = s;
    }
    let pairs = synth_dataset(&spec, a.count)?;
    save_stereo_dir(&a.out, &pairs)?;
    println!("wrote {} pairs to {}", pairs.len(), a.out.display());
    Ok(())
}

/// Layered configuration: built-in defaults, then the config file, then
/// `--set` overrides, then dedicated flags.
fn train_config(a: &TrainArgs) -> CliResult<(KvConfig, NetworkConfig, TrainConfig)> {
    let mut kv = match &a.config {
        Some(p) => {
            require_file(p)?;
            KvConfig::load(p).map_err(|e| Failure::Usage(e.to_string()))?
        }
        None => KvConfig::default(),
    };
    for o in &a.overrides {
        let (k, v) = o.split_once('=').ok_or_else(|| Failure::Usage(format!("--set expects KEY=VALUE, got '{o}'")))?;
        kv.set(k.trim(), v.trim());
    }
    if let Some(n) = a.iters {
        kv.set("iters", n);
    }
    if let Some(s) = a.seed {
        kv.set("seed", s);
    }
    let base = match kv.get("preset").unwrap_or("toy") {
        "toy" => NetworkConfig::toy(DisparityRange::default()),
        "paper" => NetworkConfig::paper_preset(),
        other => return Err(Failure::Usage(format!("unknown preset '{other}' (toy, paper)"))),
    };
    let usage = |e: stereoforge::Error| Failure::Usage(e.to_string());
    let net = NetworkConfig::from_kv(&kv, &base).map_err(usage)?;
    let train = TrainConfig::from_kv(&kv, &TrainConfig::default()).map_err(usage)?;
    Ok((kv, net, train))
}

fn train(a: TrainArgs) -> CliResult<()> {
    require_dir(&a.data)?;
    if let Some(v) = &a.val {
        require_dir(v)?;
    }
    if let Some(r) = &a.resume {
        require_file(r)?;
    }
    let (_, net_cfg, cfg) = train_config(&a)?;
    let log_path = a.log.clone().unwrap_or_else(|| a.out.with_extension("csv"));

    let data = load_stereo_dir(&a.data)?;
    let val = a.val.as_deref().map(load_stereo_dir).transpose()?;
    let mut trainer = match &a.resume {
        Some(p) => Trainer::resume(&Checkpoint::load(p)?, cfg)?,
        None => Trainer::new(Network::build(&net_cfg)?, cfg)?,
    };

    let append = a.resume.is_some() && log_path.is_file();
    let mut log = OpenOptions::new()
        .create(true)
        .write(true)
        .append(append)
        .truncate(!append)
        .open(&log_path)
        .map_err(|e| Failure::Runtime(format!("{}: {e}", log_path.display())))?;
    if !append {
        writeln!(log, "{LOG_HEADER}").map_err(|e| Failure::Runtime(e.to_string()))?;
    }
    if trainer.iteration() >= trainer.config().total_iters {
        trainer.checkpoint().save(&a.out)?;
    }
    let mut written = 0usize;
    let out = a.out.clone();
    let mut flush = |ckpt: &Checkpoint, rows: &[LogRow]| -> stereoforge::Result<()> {
        for r in &rows[written..] {
            let val = r.val_mae.map(|v| v.to_string()).unwrap_or_default();
            writeln!(log, "{},{},{},{}", r.iter, r.lr, r.train_loss, val)
                .map_err(|e| stereoforge::Error::io(&log_path, e))?;
        }
        written = rows.len();
        ckpt.save(&out)
    };
    let rows = trainer.run(&data, val.as_deref(), &mut flush)?;
    if let Some(last) = rows.last() {
        let val = last.val_mae.map(|v| format!(", val mae {v:.3}")).unwrap_or_default();
        println!("iteration {}: train loss {:.5}{val}", last.iter, last.train_loss);
    }
    Ok(())
}

fn list_inputs(input: &Path) -> CliResult<Vec<PathBuf>> {
    if input.is_file() {
        return Ok(vec![input.to_path_buf()]);
    }
    require_dir(input)?;
    let mut files: Vec<PathBuf> = fs::read_dir(input)
        .map_err(|e| Failure::Runtime(format!("{}: {e}", input.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "ppm"))
        })
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Failure::Runtime(format!("no PNG or PPM images in {}", input.display())));
    }
    Ok(files)
}

fn convert(a: ConvertArgs) -> CliResult<()> {
    require_file(&a.checkpoint)?;
    let format: StereoFormat = a.format.parse().map_err(|e: stereoforge::Error| Failure::Usage(e.to_string()))?;
    let upsample = match a.upsample.as_str() {
        "bilinear" => Upsample::Bilinear,
        "nearest" => Upsample::Nearest,
        other => return Err(Failure::Usage(format!("unknown upsample '{other}' (bilinear, nearest)"))),
    };
    if a.full_res == Some(0) {
        return Err(Failure::Usage("--full-res must be >= 1".into()));
    }
    let inputs = list_inputs(&a.input)?;
    let net = Checkpoint::load(&a.checkpoint)?.to_network()?;
    if a.full_res.is_some() && !net.config().use_selection {
        return Err(Failure::Usage("--full-res needs a selection-layer network".into()));
    }
    create_dir(&a.out)?;
    let (nw, nh) = (net.config().width, net.config().height);
    for path in inputs {
        let src = Image::load(&path)?;
        let small = if src.dims() == (nw, nh) { src.clone() } else { src.resize_bilinear(nw, nh) };
        let pred = net.predict_right(&small.to_tensor(), Mode::Eval)?;
        let (left, right) = match a.full_res {
            Some(k) => {
                let hires = src.resize_bilinear(k * nw, k * nh);
                let volume = pred.volume.expect("selection network yields a volume");
                let right = upscale_full_res(&volume, &hires.to_tensor(), k, upsample)?;
                (hires, Image::from_tensor(&right, 0)?)
            }
            None => {
                let right = Image::from_tensor(&pred.right, 0)?;
                let right =
                    if src.dims() == (nw, nh) { right } else { right.resize_bilinear(src.width(), src.height()) };
                (src, right)
            }
        };
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("image");
        for p in write_stereo(&left, &right, format, a.half_width, &a.out, stem)? {
            println!("{}", p.display());
        }
    }
    Ok(())
}

fn fit_frames(frames: Vec<StereoPair>, dims: (usize, usize)) -> CliResult<Vec<StereoPair>> {
    frames
        .into_iter()
        .map(|f| {
            if f.dims() == dims {
                return Ok(f);
            }
            let (l, r) = (f.left.resize_bilinear(dims.0, dims.1), f.right.resize_bilinear(dims.0, dims.1));
            Ok(StereoPair::new(f.id, l, r)?)
        })
        .collect()
}

fn eval(a: EvalArgs) -> CliResult<()> {
    require_dir(&a.data)?;
    let methods = Method::parse_list(&a.methods).map_err(|e| Failure::Usage(e.to_string()))?;
    if methods.is_empty() {
        return Err(Failure::Usage("--methods is empty".into()));
    }
    let needs_deep3d = methods.iter().any(|m| matches!(m, Method::Deep3d | Method::Deep3dOracle));
    if needs_deep3d && a.checkpoint.is_none() {
        return Err(Failure::Usage("deep3d methods need --checkpoint".into()));
    }
    if methods.contains(&Method::Regression) && a.regression.is_none() {
        return Err(Failure::Usage("regression needs --regression".into()));
    }
    for p in a.checkpoint.iter().chain(&a.regression) {
        require_file(p)?;
    }
    if let Some(t) = &a.train_data {
        require_dir(t)?;
    }
    let (o0, o1) = parse_range(&a.oracle_search)?;
    let (r0, r1) = parse_range(&a.range)?;

    let deep3d = a.checkpoint.as_deref().map(|p| Checkpoint::load(p)?.to_network()).transpose()?;
    let regression = a.regression.as_deref().map(|p| Checkpoint::load(p)?.to_network()).transpose()?;
    let range = match &deep3d {
        Some(n) => n.config().range,
        None => DisparityRange::new(r0, r1, true).map_err(|e| Failure::Usage(e.to_string()))?,
    };
    let dims = deep3d.as_ref().or(regression.as_ref()).map(|n| (n.config().width, n.config().height));
    if let (Some(d), Some(r)) = (&deep3d, &regression) {
        if (d.config().width, d.config().height) != (r.config().width, r.config().height) {
            return Err(Failure::Usage("--checkpoint and --regression networks have different input sizes".into()));
        }
    }

    let mut frames = load_stereo_dir(&a.data)?;
    if let Some(d) = dims {
        frames = fit_frames(frames, d)?;
    }
    let mut setup = EvalSetup::new(range);
    setup.block_window = a.window;
    setup.oracle_search = o0..=o1;
    setup.deep3d = deep3d.as_ref();
    setup.regression = regression.as_ref();
    if let Some(t) = &a.train_data {
        let mut train = load_stereo_dir(t)?;
        if let Some(d) = dims {
            train = fit_frames(train, d)?;
        }
        setup.global_delta = Some(fit_global_disparity(&train, setup.global_search.clone())?);
    }

    let report = compare(&frames, &methods, &setup)?;
    fs::write(&a.report, report.to_csv()).map_err(|e| Failure::Runtime(format!("{}: {e}", a.report.display())))?;
    print!("{}", report.table());
    Ok(())
}
