use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anomalycd::baselines::Baseline;
use anomalycd::cache::{cache_file_name, write_cache};
use anomalycd::embed::{EmbedKey, Embedder, Metric, ReferenceEmbedder};
use anomalycd::eval::{aggregate, render_table, EvalReport, EventScore};
use anomalycd::pipeline::{run_sweep, write_detection, EmbedderKind, Pipeline, RunConfig, SweepParam};
use anomalycd::scene::{extract_tile, load_scene, plan_tiles, read_mask, Category, TimeSeriesScene};
use anomalycd::synth::{write_synth, SynthConfig};
use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use serde::Deserialize;

#[derive(Parser)]
#[command(name = "anomalycd", version, about = "Zero-shot anomaly change detection for time-series rasters")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Detect anomalous changes in a scene directory.
    Detect {
        scene: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Run a comparison detector instead of the two-stage pipeline.
        #[arg(long)]
        baseline: Option<String>,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Score predicted maps against ground truth.
    Eval(EvalArgs),
    /// Run the pipeline over scenes for each value of one parameter.
    Sweep {
        #[arg(long)]
        param: String,
        /// Comma-separated values.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
        /// Scene directories.
        #[arg(required = true)]
        scenes: Vec<PathBuf>,
        /// Also write the report series as JSON here.
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Generate synthetic scenes with ground truth.
    Synth(SynthArgs),
    /// Export reference embeddings of every step and tile as `.aecd` files.
    Embed {
        scene: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 2048)]
        tile: usize,
    },
}

#[derive(Args, Default)]
struct RunArgs {
    /// JSON run configuration; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long)]
    embedder: Option<String>,
    #[arg(long)]
    cache_dir: Option<PathBuf>,
    #[arg(long)]
    metric: Option<String>,
    #[arg(long)]
    quantile: Option<f64>,
    #[arg(long)]
    tile: Option<usize>,
    #[arg(long)]
    keep: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long, requires = "gt", conflicts_with = "pairs")]
    pred: Option<PathBuf>,
    #[arg(long)]
    gt: Option<PathBuf>,
    /// JSON-lines file of `{"event_id", "category", "pred", "gt"}` records;
    /// relative paths resolve against the file's directory.
    #[arg(long)]
    pairs: Option<PathBuf>,
    #[arg(long, default_value_t = anomalycd::eval::DEFAULT_BETA)]
    beta: f64,
    #[arg(long, default_value = "others")]
    category: String,
    #[arg(long, default_value = "event")]
    event_id: String,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    /// JSON generator configuration; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    size: Option<usize>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    movers: Option<usize>,
    /// Number of scenes; with more than one, scene `i` uses `seed + i` and
    /// goes to `<out>/synth-NNNN`.
    #[arg(long, default_value_t = 1)]
    count: u64,
}

/// Misuse or bad configuration; exit code 2.
#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<UsageError>().is_some() {
        return 2;
    }
    match err.downcast_ref::<anomalycd::Error>() {
        Some(anomalycd::Error::InvalidParameter { .. } | anomalycd::Error::Placement(_)) => 2,
        _ => 1,
    }
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path, what: &str) -> anyhow::Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {what} {}", path.display()))?;
    serde_json::from_str(&text).map_err(|e| usage(format!("invalid {what} {}: {e}", path.display())))
}

fn parse<V: std::str::FromStr<Err = anomalycd::Error>>(s: &str) -> anyhow::Result<V> {
    Ok(s.parse::<V>()?)
}

impl RunArgs {
    fn resolve(&self) -> anyhow::Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => read_json(p, "run config")?,
            None => RunConfig::default(),
        };
        if let Some(w) = self.workers {
            cfg.workers = Some(w);
        }
        if let Some(e) = &self.embedder {
            cfg.embedder = parse::<EmbedderKind>(e)?;
        }
        if let Some(d) = &self.cache_dir {
            cfg.cache_dir = Some(d.clone());
        }
        if let Some(m) = &self.metric {
            cfg.metric = parse::<Metric>(m)?;
        }
        if let Some(q) = self.quantile {
            cfg.quantile = q;
        }
        if let Some(t) = self.tile {
            cfg.tile_size = t;
        }
        if let Some(k) = self.keep {
            cfg.keep_fraction = k;
        }
        if let Some(b) = self.beta {
            cfg.beta = b;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn load(dir: &Path) -> anyhow::Result<TimeSeriesScene<f32>> {
    load_scene::<f32>(dir).with_context(|| format!("loading scene {}", dir.display()))
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> anyhow::Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)?).with_context(|| format!("writing {}", path.display()))
}

fn cmd_detect(scene_dir: &Path, out: &Path, baseline: Option<&str>, run: &RunArgs) -> anyhow::Result<()> {
    let cfg = run.resolve()?;
    let baseline = baseline.map(parse::<Baseline>).transpose()?;
    let scene = load(scene_dir)?;
    let pipeline = Pipeline::<f32>::new(cfg.clone())?;
    fs::create_dir_all(out)?;

    if let Some(b) = baseline {
        let map = pipeline.baseline(&scene, b)?.binarize_quantile(cfg.quantile)?;
        map.write_png(&out.join(format!("{b}_map.png")))?;
        write_json(&out.join("config.json"), &serde_json::json!({ "config": cfg, "baseline": b }))?;
        if scene.gt_mask().is_some() {
            let score = pipeline.score_event(&scene, &map)?;
            println!("{}", serde_json::to_string_pretty(&score)?);
            write_json(&out.join("eval.json"), &score)?;
        }
        return Ok(());
    }

    let det = pipeline.detect(&scene)?;
    for w in &det.warnings {
        eprintln!("warning: {w}");
    }
    write_detection(&det, &cfg, out)?;
    log::info!(
        "{}: {} candidates kept of {}, {:.2}s",
        scene.event_id,
        det.stage1.selected.len(),
        det.stage1.candidates.len(),
        det.timings.total
    );
    if scene.gt_mask().is_some() {
        let summary = serde_json::json!({
            "stage1": pipeline.score_event(&scene, &det.stage1.binary)?,
            "full": pipeline.score_event(&scene, &det.stage2.anomaly_map)?,
        });
        println!("{}", serde_json::to_string_pretty(&summary)?);
        write_json(&out.join("eval.json"), &summary)?;
    }
    Ok(())
}

#[derive(Deserialize)]
struct PairLine {
    event_id: String,
    #[serde(default)]
    category: Option<Category>,
    pred: PathBuf,
    gt: PathBuf,
}

fn cmd_eval(args: &EvalArgs) -> anyhow::Result<()> {
    if !(args.beta > 0.0 && args.beta.is_finite()) {
        return Err(usage(format!("beta: {} must be positive", args.beta)));
    }
    let category = parse::<Category>(&args.category)?;
    let events = match (&args.pred, &args.gt, &args.pairs) {
        (Some(pred), Some(gt), None) => {
            vec![EventScore::from_maps(
                args.event_id.clone(),
                category,
                &read_mask(pred)?,
                &read_mask(gt)?,
                args.beta,
            )?]
        }
        (None, None, Some(pairs)) => {
            let base = pairs.parent().unwrap_or(Path::new("."));
            let text = fs::read_to_string(pairs).with_context(|| format!("reading {}", pairs.display()))?;
            let mut events = Vec::new();
            for (n, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
                let p: PairLine = serde_json::from_str(line)
                    .map_err(|e| usage(format!("{}:{}: {e}", pairs.display(), n + 1)))?;
                events.push(EventScore::from_maps(
                    p.event_id,
                    p.category.unwrap_or(category),
                    &read_mask(&base.join(&p.pred))?,
                    &read_mask(&base.join(&p.gt))?,
                    args.beta,
                )?);
            }
            events
        }
        _ => return Err(usage("give either --pred and --gt, or --pairs")),
    };
    if events.is_empty() {
        return Err(usage("no events to evaluate"));
    }
    let report = aggregate(events, serde_json::json!({ "beta": args.beta }))?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    println!();
    print!("{}", render_table(&[("prediction".to_string(), &report)]));
    Ok(())
}

fn cmd_sweep(param: &str, values: &[String], scenes: &[PathBuf], out: Option<&Path>, run: &RunArgs) -> anyhow::Result<()> {
    let param = parse::<SweepParam>(param)?;
    let cfg = run.resolve()?;
    let scenes = scenes.iter().map(|d| load(d)).collect::<anyhow::Result<Vec<_>>>()?;
    let points = run_sweep(param, values, &scenes, &cfg)?;
    let rows: Vec<(String, &EvalReport)> = points
        .iter()
        .flat_map(|p| {
            [
                (format!("{}  stage1", p.value), &p.stage1_report),
                (format!("{}  full", p.value), &p.report),
            ]
        })
        .collect();
    print!("{}", render_table(&rows));
    for p in &points {
        println!("{} = {}: {:.3}s", serde_json::to_value(param)?.as_str().unwrap_or(""), p.value, p.seconds);
    }
    if let Some(path) = out {
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent)?;
        }
        write_json(path, &points)?;
    }
    Ok(())
}

fn cmd_synth(args: &SynthArgs) -> anyhow::Result<()> {
    let mut cfg = match &args.config {
        Some(p) => read_json(p, "synth config")?,
        None => SynthConfig::default(),
    };
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if let Some(s) = args.size {
        cfg.size = s;
    }
    if let Some(s) = args.steps {
        cfg.steps = s;
    }
    if let Some(m) = args.movers {
        cfg.movers = m;
    }
    if args.count == 0 {
        return Err(usage("count must be >= 1"));
    }
    cfg.validate()?;
    let base = cfg.seed;
    for i in 0..args.count {
        let c = SynthConfig { seed: base + i, ..cfg.clone() };
        let dir = if args.count == 1 {
            args.out.clone()
        } else {
            args.out.join(format!("synth-{:04}", c.seed))
        };
        fs::create_dir_all(&dir)?;
        let truth = write_synth(&c, &dir)?;
        if truth.stage2_degenerate {
            eprintln!("warning: {} has one historical step; stage 2 is degenerate", dir.display());
        }
        println!("{}", dir.display());
    }
    Ok(())
}

fn cmd_embed(scene_dir: &Path, out: &Path, tile: usize) -> anyhow::Result<()> {
    RunConfig { tile_size: tile, ..RunConfig::default() }.validate()?;
    let scene = load(scene_dir)?;
    fs::create_dir_all(out)?;
    let emb = ReferenceEmbedder::default();
    let tiles = plan_tiles(scene.height(), scene.width(), tile)?;
    for (ts, step) in scene.timestamps().iter().zip(scene.steps()) {
        for spec in &tiles {
            let key = EmbedKey { timestamp: ts, tile: *spec };
            let map = emb.embed(&extract_tile(step, spec), &key)?;
            write_cache(&map, &out.join(cache_file_name(ts, spec)))?;
        }
    }
    println!("{} files", tiles.len() * scene.timestamps().len());
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match &cli.command {
        Command::Detect { scene, out, baseline, run } => cmd_detect(scene, out, baseline.as_deref(), run),
        Command::Eval(args) => cmd_eval(args),
        Command::Sweep { param, values, scenes, out, run } => cmd_sweep(param, values, scenes, out.as_deref(), run),
        Command::Synth(args) => cmd_synth(args),
        Command::Embed { scene, out, tile } => cmd_embed(scene, out, *tile),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
