use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::Serialize;

use metaanchor::anchors::AnchorEncoding;
use metaanchor::data::{self, SceneSpec, Split};
use metaanchor::detector::Model;
use metaanchor::experiment::{self, AnchorFile, ExperimentConfig};
use metaanchor::inference::{self, DetectionEvaluator, PredictOptions, SearchStep};
use metaanchor::Error;

#[derive(Parser)]
#[command(name = "metaanchor", version, about = "Train and evaluate detectors with generated anchor functions")]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic shapes dataset.
    GenData {
        /// Scene description (TOML).
        #[arg(long)]
        spec: PathBuf,
        /// Number of images.
        #[arg(short, long)]
        n: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train a model; writes a checkpoint, a loss log and the effective config.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory (overrides paths.out).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Dataset directory (overrides paths.dataset).
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Fixed per-anchor filters instead of generated ones.
        #[arg(long)]
        baseline: bool,
        /// Overrides train.steps.
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Evaluate a checkpoint with a given anchor set.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        /// Anchor file; baseline checkpoints default to their own anchors.
        #[arg(long)]
        anchors: Option<PathBuf>,
        #[arg(long, default_value = "val")]
        split: String,
        /// Experiment config supplying [predict] options.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Greedy search for an inference anchor set.
    Search {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        /// Candidate anchor file; defaults to the built-in pool.
        #[arg(long)]
        pool: Option<PathBuf>,
        #[arg(long, default_value = "search_subset")]
        split: String,
        /// Experiment config supplying [search], [predict] and anchors.base_size.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Draw the detections of each anchor on an image, one panel per anchor.
    Render {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        anchors: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Failure with its exit status: 3 for configuration problems, 4 otherwise.
struct Failure {
    code: u8,
    err: Error,
}

impl From<Error> for Failure {
    fn from(err: Error) -> Self {
        let code = if matches!(err, Error::Config(_)) { 3 } else { 4 };
        Failure { code, err }
    }
}

fn config_failure(err: Error) -> Failure {
    Failure { code: 3, err }
}

type CmdResult = Result<(), Failure>;

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<(), Error> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::Io { path: dir.into(), source: e })?;
    }
    fs::write(path, bytes).map_err(|e| Error::Io { path: path.into(), source: e })
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), Error> {
    let text = serde_json::to_string_pretty(value).expect("output serializes");
    write_file(path, text + "\n")
}

fn load_config(path: Option<&Path>) -> Result<ExperimentConfig, Failure> {
    match path {
        Some(p) => ExperimentConfig::load(p).map_err(config_failure),
        None => Ok(ExperimentConfig::default()),
    }
}

fn parse_split(s: &str) -> Result<Split, Failure> {
    s.parse().map_err(config_failure)
}

fn gen_data(spec: &Path, n: usize, out: &Path, seed: Option<u64>) -> CmdResult {
    let text = fs::read_to_string(spec).map_err(|e| config_failure(Error::Io { path: spec.into(), source: e }))?;
    let mut scene: SceneSpec =
        toml::from_str(&text).map_err(|e| config_failure(Error::Config(format!("{}: {e}", spec.display()))))?;
    if let Some(s) = seed {
        scene.seed = s;
    }
    scene.validate().map_err(config_failure)?;
    let m = data::generate_dataset(&scene, n, out)?;
    log::info!("wrote {} images to {}", m.num_images, out.display());
    Ok(())
}

fn train(
    config: &Path,
    seed: Option<u64>,
    out: Option<PathBuf>,
    dataset: Option<PathBuf>,
    baseline: bool,
    steps: Option<usize>,
) -> CmdResult {
    let mut cfg = load_config(Some(config))?;
    if let Some(s) = seed {
        cfg = cfg.with_seed(s);
    }
    if baseline {
        cfg.model.baseline = true;
    }
    if let Some(n) = steps {
        cfg.train.steps = n;
    }
    if out.is_some() {
        cfg.paths.out = out;
    }
    if dataset.is_some() {
        cfg.paths.dataset = dataset;
    }
    let out = cfg.paths.out.clone().ok_or_else(|| config_failure(Error::Config("no output directory (--out or paths.out)".into())))?;
    let ds = cfg.paths.dataset.clone().ok_or_else(|| config_failure(Error::Config("no dataset (--dataset or paths.dataset)".into())))?;
    let manifest = data::read_manifest(&ds)?;
    let samples = data::load_dataset(&ds, Split::Train)?;
    write_file(&out.join("config.toml"), cfg.to_toml())?;
    let log_path = out.join("loss_log.jsonl");
    let mut log_file = fs::File::create(&log_path).map_err(|e| Error::Io { path: log_path.clone(), source: e })?;
    let mut io_err = None;
    let (model, log) = cfg.train(&samples, manifest.spec.num_classes, |s| {
        if s.step % 50 == 0 {
            log::info!(
                "step {:>5}  loss {:.4}  cls {:.4}  reg {:.4}  pos {}  masked {}",
                s.step, s.loss, s.cls_loss, s.reg_loss, s.num_positive, s.masked_gts
            );
        }
        let line = serde_json::to_string(s).expect("stats serialize");
        if let Err(e) = writeln!(log_file, "{line}") {
            io_err.get_or_insert(e);
        }
    })?;
    if let Some(e) = io_err {
        return Err(Error::Io { path: log_path, source: e }.into());
    }
    model.save(&out.join("model.bin"))?;
    if let (Some(first), Some(last)) = (log.first(), log.last()) {
        log::info!("trained {} steps: loss {:.4} -> {:.4}", log.len(), first.loss, last.loss);
    }
    Ok(())
}

fn load_anchors(path: Option<&Path>, model: &Model) -> Result<Vec<AnchorEncoding>, Failure> {
    match (path, model.fixed_anchors()) {
        (Some(p), _) => AnchorFile::load(p)
            .map_err(config_failure)?
            .resolve(&model.config.standard)
            .map_err(config_failure),
        (None, Some(fixed)) => Ok(fixed.to_vec()),
        (None, None) => Err(config_failure(Error::Config(
            "--anchors is required for models with generated heads".into(),
        ))),
    }
}

#[derive(Serialize)]
struct EvalRun<'a> {
    checkpoint: &'a Path,
    dataset: &'a Path,
    split: &'a str,
    anchors: &'a [AnchorEncoding],
    predict: PredictOptions,
}

fn eval(checkpoint: &Path, dataset: &Path, anchors: Option<&Path>, split: &str, config: Option<&Path>, out: &Path) -> CmdResult {
    let cfg = load_config(config)?;
    let split_kind = parse_split(split)?;
    let model = Model::load(checkpoint)?;
    let anchors = load_anchors(anchors, &model)?;
    let samples = data::load_dataset(dataset, split_kind)?;
    let result = experiment::evaluate(&model, &samples, &anchors, &cfg.predict)?;
    write_json(
        &out.join("run.json"),
        &EvalRun {
            checkpoint,
            dataset,
            split,
            anchors: &anchors,
            predict: cfg.predict,
        },
    )?;
    write_json(&out.join("eval.json"), &result)?;
    let table = result.to_table();
    write_file(&out.join("eval.txt"), &table)?;
    print!("{table}");
    Ok(())
}

#[derive(Serialize)]
struct SearchOutput {
    /// Selected anchors, usable as an `--anchors` file.
    anchors: Vec<AnchorEncoding>,
    selected_indices: Vec<usize>,
    pool_size: usize,
    initial_score: f64,
    score: f64,
    trace: Vec<SearchStep>,
}

fn search(
    checkpoint: &Path,
    dataset: &Path,
    pool: Option<&Path>,
    split: &str,
    config: Option<&Path>,
    seed: Option<u64>,
    out: &Path,
) -> CmdResult {
    let mut cfg = load_config(config)?;
    if let Some(s) = seed {
        cfg = cfg.with_seed(s);
    }
    let split_kind = parse_split(split)?;
    let model = Model::load(checkpoint)?;
    let candidates = match pool {
        Some(p) => AnchorFile::load(p)
            .map_err(config_failure)?
            .resolve(&model.config.standard)
            .map_err(config_failure)?,
        None => match model.fixed_anchors() {
            Some(fixed) => fixed.to_vec(),
            None => inference::search_pool(
                cfg.anchors.base_size,
                &model.config.standard,
                cfg.search.k_min..=cfg.search.k_max,
            )?,
        },
    };
    let samples = data::load_dataset(dataset, split_kind)?;
    let pairs: Vec<_> = samples.into_iter().map(|s| (s.image, s.boxes)).collect();
    log::info!("caching detections of {} candidates on {} images", candidates.len(), pairs.len());
    let mut evaluator = DetectionEvaluator::new(&model, &candidates, &pairs, cfg.predict)?;
    let r = inference::greedy_search(candidates.len(), &mut evaluator, cfg.seed, cfg.search.max_steps)?;
    log::info!("selected {} anchors, mmAP {:.4} (start {:.4})", r.selected.len(), r.score, r.initial_score);
    write_file(&out.join("config.toml"), cfg.to_toml())?;
    write_json(
        &out.join("search.json"),
        &SearchOutput {
            anchors: r.selected.iter().map(|&i| candidates[i]).collect(),
            selected_indices: r.selected.clone(),
            pool_size: candidates.len(),
            initial_score: r.initial_score,
            score: r.score,
            trace: r.trace,
        },
    )?;
    Ok(())
}

fn render(checkpoint: &Path, image: &Path, anchors: &Path, config: Option<&Path>, out: &Path) -> CmdResult {
    let cfg = load_config(config)?;
    let model = Model::load(checkpoint)?;
    let anchors = load_anchors(Some(anchors), &model)?;
    let img = data::read_ppm(image)?;
    for (k, a) in anchors.iter().enumerate() {
        let dets = inference::detect(&model, &img, &[*a], &cfg.predict)?;
        data::render_overlay(&img, &dets, false, &out.join(format!("anchor_{k}.ppm")))?;
    }
    write_json(&out.join("anchors.json"), &serde_json::json!({ "anchors": anchors }))?;
    log::info!("wrote {} panels to {}", anchors.len(), out.display());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => e.exit(),
    };
    let result = match cli.cmd {
        Command::GenData { spec, n, out, seed } => gen_data(&spec, n, &out, seed),
        Command::Train {
            config,
            seed,
            out,
            dataset,
            baseline,
            steps,
        } => train(&config, seed, out, dataset, baseline, steps),
        Command::Eval {
            checkpoint,
            dataset,
            anchors,
            split,
            config,
            out,
        } => eval(&checkpoint, &dataset, anchors.as_deref(), &split, config.as_deref(), &out),
        Command::Search {
            checkpoint,
            dataset,
            pool,
            split,
            config,
            seed,
            out,
        } => search(&checkpoint, &dataset, pool.as_deref(), &split, config.as_deref(), seed, &out),
        Command::Render {
            checkpoint,
            image,
            anchors,
            config,
            out,
        } => render(&checkpoint, &image, &anchors, config.as_deref(), &out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.err);
            ExitCode::from(f.code)
        }
    }
}
