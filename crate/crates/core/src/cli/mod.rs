//! Command-line front end: build-data, verify, train, eval, compare, plot.

pub mod config;
pub mod plot;

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::dataset::{plan_splits, DataBundle, LabeledCorpus, SplitConfig, SplitManifest, MANIFEST_FILE};
use crate::error::{Error, Result};
use crate::graph::Geom;
use crate::metrics::{feature_extractor_fit, Evaluator, ExtractorFitConfig, MetricExtractor, TOY_EVAL_SAMPLES};
use crate::models::Checkpoint;
use crate::trainer::{
    train, LossRow, MethodName, MethodSpec, MetricRow, RunManifest, RunOutput, LOSSES_FILE, METRICS_FILE,
    RUN_FILE, THRESHOLD_GRID,
};
pub use config::ExperimentConfig;
use plot::{Chart, Series, Style};

pub const EXTRACTOR_FILE: &str = "extractor.bin";
pub const CONFIG_FILE: &str = "config.toml";
pub const COMPARISON_FILE: &str = "comparison.csv";
pub const OUT_ENV: &str = "OSSGAN_OUT";

#[derive(Debug, Parser)]
#[command(name = "ossgan", version, about = "Open-set semi-supervised conditional GAN experiments")]
pub struct Cli {
    /// Repeat for more log output.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Build an open-set split over a corpus and write its manifest.
    BuildData(BuildDataArgs),
    /// Re-check a split manifest and print its counts.
    Verify(VerifyArgs),
    /// Train one method on a built split.
    Train(TrainArgs),
    /// Recompute metrics for a checkpoint.
    Eval(EvalArgs),
    /// Tabulate finished runs, or run a threshold sweep with --sweep.
    Compare(CompareArgs),
    /// Draw loss curves, FID against threshold and precision/recall.
    Plot(PlotArgs),
}

#[derive(Debug, Args)]
struct BuildDataArgs {
    /// Directory holding images.npy and labels.npy (optionally
    /// eval_images.npy and eval_labels.npy).
    #[arg(long, conflicts_with = "toy_classes")]
    corpus: Option<PathBuf>,
    /// Image shape of --corpus payloads as C,H,W.
    #[arg(long, default_value = "1,8,8")]
    shape: String,
    /// Generate a synthetic corpus with this many classes instead.
    #[arg(long)]
    toy_classes: Option<usize>,
    /// Samples per class of the synthetic corpus.
    #[arg(long, default_value_t = 500)]
    toy_per_class: usize,
    /// Samples per class of the synthetic evaluation corpus (0 disables).
    #[arg(long, default_value_t = 100)]
    toy_eval_per_class: usize,
    /// Image side of synthetic samples.
    #[arg(long, default_value_t = 8)]
    toy_size: usize,
    /// Number of known (closed-set) classes.
    #[arg(long)]
    classes: usize,
    /// Fraction of each known class that keeps its label.
    #[arg(long)]
    labeled_ratio: f64,
    /// Fraction of open-set samples added to the unlabeled pool.
    #[arg(long, default_value_t = 1.0)]
    open_usage: f64,
    /// Seed for the class partition and sample selection.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory for the manifest and payloads.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct VerifyArgs {
    /// Split manifest (or its directory).
    #[arg(long)]
    data: PathBuf,
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// TOML experiment file; flags given here take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Split manifest (or its directory).
    #[arg(long)]
    data: PathBuf,
    /// ossgan, rejectgan, opensetgan, randomgan, singlegan or supervised.
    #[arg(long)]
    method: Option<MethodName>,
    /// Weight of the classifier loss.
    #[arg(long)]
    lambda: Option<f64>,
    /// Confidence threshold c for rejectgan and opensetgan.
    #[arg(long)]
    threshold: Option<f64>,
    /// Drop the entropy term from the ossgan classifier loss.
    #[arg(long)]
    no_entropy_reg: bool,
    /// Drop the generated-sample term from the ossgan classifier loss.
    #[arg(long)]
    no_fake_cls: bool,
    /// Training iterations (one discriminator and one generator step each).
    #[arg(long)]
    iters: Option<usize>,
    /// Seed for initialization and batch sampling.
    #[arg(long)]
    seed: Option<u64>,
    /// Run directory; relative paths go under $OSSGAN_OUT when set.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Evaluate every N iterations (0: final only).
    #[arg(long)]
    eval_every: Option<usize>,
    /// Checkpoint every N iterations (0: final only).
    #[arg(long)]
    checkpoint_every: Option<usize>,
    /// Sets the labeled, unlabeled and fake batch sizes together.
    #[arg(long)]
    batch: Option<usize>,
    /// Disable differentiable augmentation.
    #[arg(long)]
    no_augment: bool,
    /// Generated samples per evaluation.
    #[arg(long, default_value_t = TOY_EVAL_SAMPLES)]
    eval_samples: usize,
}

#[derive(Debug, Args)]
struct EvalArgs {
    /// Checkpoint file (ckpt_<iter>.bin).
    #[arg(long)]
    ckpt: PathBuf,
    /// Split manifest (or its directory).
    #[arg(long)]
    data: PathBuf,
    /// Generated samples per evaluation.
    #[arg(long, default_value_t = TOY_EVAL_SAMPLES)]
    eval_samples: usize,
    /// Also write the report as JSON here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct CompareArgs {
    /// Finished run directories (directories of runs are expanded).
    #[arg(long, num_args = 1.., required_unless_present = "sweep")]
    runs: Vec<PathBuf>,
    /// Train one ossgan run plus the threshold methods at every threshold,
    /// then compare them.
    #[arg(long, requires_all = ["data", "out"])]
    sweep: bool,
    /// Split manifest for --sweep.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Thresholds swept for each threshold method.
    #[arg(long, value_delimiter = ',', default_values_t = THRESHOLD_GRID.to_vec())]
    thresholds: Vec<f64>,
    /// Threshold methods to sweep.
    #[arg(long, value_delimiter = ',', default_values_t = vec![MethodName::Rejectgan, MethodName::Opensetgan])]
    methods: Vec<MethodName>,
    /// Classifier loss weight for every sweep run.
    #[arg(long, default_value_t = 0.2)]
    lambda: f64,
    /// Training iterations per sweep run.
    #[arg(long)]
    iters: Option<usize>,
    /// Seed shared by every sweep run.
    #[arg(long)]
    seed: Option<u64>,
    /// TOML experiment file applied to every sweep run.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Generated samples per evaluation.
    #[arg(long, default_value_t = TOY_EVAL_SAMPLES)]
    eval_samples: usize,
    /// Output directory (sweep runs and comparison table).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct PlotArgs {
    /// Run directories (directories of runs are expanded).
    #[arg(long, num_args = 1.., required = true)]
    runs: Vec<PathBuf>,
    /// Directory for the SVG charts.
    #[arg(long)]
    out: PathBuf,
}

/// Process exit status for an error: 2 usage, 3 data, 4 numerical.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Validation(_) | Error::Domain(_) | Error::Config(_) => 2,
        Error::Numerical(_) => 4,
        Error::Data(_) | Error::Io { .. } | Error::Json(_) | Error::Bincode(_) | Error::Csv(_) => 3,
    }
}

/// Parses `args` (program name first), runs the command and returns the
/// exit status.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).try_init();
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::BuildData(a) => cmd_build_data(a).map(|_| ()),
        Command::Verify(a) => cmd_verify(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Compare(a) => cmd_compare(a),
        Command::Plot(a) => cmd_plot(a),
    }
}

/// Relative output paths are placed under `$OSSGAN_OUT` when it is set.
pub fn resolve_out(path: &Path) -> PathBuf {
    match std::env::var_os(OUT_ENV) {
        Some(root) if path.is_relative() => PathBuf::from(root).join(path),
        _ => path.to_path_buf(),
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn parse_shape(s: &str) -> Result<Geom> {
    let parts: Vec<usize> = s
        .split(',')
        .map(|p| p.trim().parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::Config(format!("shape must be C,H,W, got {s:?}")))?;
    match parts.as_slice() {
        [c, h, w] => Ok(Geom::new(*c, *h, *w)),
        _ => Err(Error::Config(format!("shape must be C,H,W, got {s:?}"))),
    }
}

fn cmd_build_data(a: BuildDataArgs) -> Result<PathBuf> {
    let (corpus, eval) = match (&a.corpus, a.toy_classes) {
        (Some(dir), _) => {
            if !dir.is_dir() {
                return Err(Error::Config(format!("corpus path {} does not exist", dir.display())));
            }
            let geom = parse_shape(&a.shape)?;
            let corpus = LabeledCorpus::load(&dir.join("images.npy"), &dir.join("labels.npy"), geom)?;
            let (ei, el) = (dir.join("eval_images.npy"), dir.join("eval_labels.npy"));
            let eval = if ei.exists() && el.exists() {
                Some(LabeledCorpus::load(&ei, &el, geom)?)
            } else {
                None
            };
            (corpus, eval)
        }
        (None, Some(n)) => {
            let geom = Geom::new(1, a.toy_size, a.toy_size);
            let corpus = crate::dataset::make_toy_corpus(n, a.toy_per_class, geom, a.seed)?;
            let eval = (a.toy_eval_per_class > 0)
                .then(|| crate::dataset::make_toy_corpus(n, a.toy_eval_per_class, geom, a.seed.wrapping_add(1)))
                .transpose()?;
            (corpus, eval)
        }
        (None, None) => {
            return Err(Error::Config("missing corpus path: give --corpus <dir> or --toy-classes <n>".into()))
        }
    };
    let cfg = SplitConfig::new(a.classes, a.labeled_ratio, a.open_usage, a.seed);
    let plan = plan_splits(&corpus.labels, corpus.n_classes, &cfg)?;
    let mut manifest = SplitManifest::new(&corpus, &cfg, plan);
    let out = resolve_out(&a.out);
    create_dir(&out)?;
    corpus.save(&out.join(&manifest.images_file), &out.join(&manifest.labels_file))?;
    if let Some(eval) = &eval {
        if eval.n_classes != corpus.n_classes {
            return Err(Error::Data("evaluation corpus has a different class count".into()));
        }
        manifest.eval_images_file = Some("eval_images.npy".into());
        manifest.eval_labels_file = Some("eval_labels.npy".into());
        eval.save(&out.join("eval_images.npy"), &out.join("eval_labels.npy"))?;
    }
    let counts = manifest.verify()?;
    let path = out.join(MANIFEST_FILE);
    manifest.save(&path)?;
    let (l, uc, uo) = counts.triple();
    println!("({l}, {uc}, {uo})");
    let per: std::collections::BTreeSet<usize> = counts.per_class_labeled.iter().copied().collect();
    println!("labeled per class: {}", per.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(", "));
    println!("manifest: {}", path.display());
    println!("manifest sha256: {}", manifest.hash()?);
    Ok(path)
}

fn cmd_verify(a: VerifyArgs) -> Result<()> {
    let bundle = DataBundle::load(&a.data)?;
    let counts = bundle.manifest.verify()?;
    let (l, uc, uo) = counts.triple();
    println!("({l}, {uc}, {uo})");
    println!("manifest sha256: {}", bundle.manifest.hash()?);
    Ok(())
}

/// Loads the extractor cached next to the manifest, fitting and caching
/// it on first use.
pub fn load_or_fit_extractor(bundle: &DataBundle) -> Result<MetricExtractor> {
    let path = bundle.dir.join(EXTRACTOR_FILE);
    if path.exists() {
        return MetricExtractor::load(&path);
    }
    let ext = feature_extractor_fit(&bundle.corpus, &ExtractorFitConfig::default())?;
    ext.save(&path)?;
    Ok(ext)
}

fn evaluator_for(bundle: &DataBundle, n_samples: usize) -> Result<Evaluator> {
    let ext = load_or_fit_extractor(bundle)?;
    let reference = bundle.reference();
    Evaluator::new(ext, &reference.images, n_samples, Some(bundle.dataset()?))
}

/// Applies `a` over the config file (or defaults).
fn resolve_train_config(a: &TrainArgs, manifest: &SplitManifest) -> Result<ExperimentConfig> {
    let mut cfg = match &a.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    cfg.split = manifest.config;
    if let Some(m) = a.method {
        if m != cfg.method.name {
            cfg.method.name = m;
            cfg.method.threshold = None;
        }
    }
    if let Some(l) = a.lambda {
        cfg.method.lambda = l;
    }
    if let Some(c) = a.threshold {
        cfg.method.threshold = Some(crate::label_algebra::Threshold::new(c)?);
    }
    if a.no_entropy_reg {
        cfg.method.flags.use_entropy_reg = false;
    }
    if a.no_fake_cls {
        cfg.method.flags.use_fake_cls = false;
    }
    let t = &mut cfg.train;
    if let Some(v) = a.iters {
        t.total_iters = v;
    }
    if let Some(v) = a.seed {
        t.seed = v;
    }
    if let Some(v) = a.eval_every {
        t.eval_every = v;
    }
    if let Some(v) = a.checkpoint_every {
        t.checkpoint_every = v;
    }
    if let Some(b) = a.batch {
        (t.batch_labeled, t.batch_unlabeled, t.batch_fake) = (b, b, b);
    }
    if a.no_augment {
        t.augment = false;
    }
    if let Some(o) = &a.out {
        cfg.out_dir = o.clone();
    } else if a.config.is_none() {
        cfg.out_dir = PathBuf::from("runs").join(format!("{}_s{}", cfg.method.label(), cfg.train.seed));
    }
    cfg.method.validate()?;
    cfg.train.validate()?;
    Ok(cfg)
}

fn run_experiment(bundle: &DataBundle, cfg: &ExperimentConfig, evaluator: &Evaluator) -> Result<PathBuf> {
    let out = resolve_out(&cfg.out_dir);
    create_dir(&out)?;
    cfg.save(&out.join(CONFIG_FILE))?;
    let ds = bundle.dataset()?;
    let art = train(
        &ds,
        cfg.method,
        cfg.train.clone(),
        RunOutput {
            dir: Some(&out),
            evaluator: Some(evaluator),
            data_manifest_hash: Some(bundle.manifest.hash()?),
        },
    )?;
    if let Some(r) = art.final_report() {
        println!(
            "{} iter {}: fid {:.4} is {:.4} f1/8 {:.4} f8 {:.4} entropy_gap {:.4}",
            cfg.method.label(),
            cfg.train.total_iters,
            r.fid,
            r.is_score,
            r.f_small,
            r.f_large,
            r.entropy_gap
        );
    }
    println!("run: {}", out.display());
    Ok(out)
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let bundle = DataBundle::load(&a.data)?;
    let cfg = resolve_train_config(&a, &bundle.manifest)?;
    let evaluator = evaluator_for(&bundle, a.eval_samples)?;
    run_experiment(&bundle, &cfg, &evaluator).map(|_| ())
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let bundle = DataBundle::load(&a.data)?;
    let ckpt = Checkpoint::load(&a.ckpt)?;
    if ckpt.models.config.k != bundle.manifest.closed_class_ids.len() {
        return Err(Error::Data(format!(
            "checkpoint has K = {} but the split has {} known classes",
            ckpt.models.config.k,
            bundle.manifest.closed_class_ids.len()
        )));
    }
    let report = evaluator_for(&bundle, a.eval_samples)?.evaluate(&ckpt.models)?;
    let json = serde_json::to_string_pretty(&report)?;
    println!("{json}");
    if let Some(p) = a.out {
        let p = resolve_out(&p);
        fs::write(&p, json).map_err(|e| Error::io(&p, e))?;
    }
    Ok(())
}

/// A finished run read back from disk.
#[derive(Debug, Clone)]
pub struct RunRecord {
    pub dir: PathBuf,
    pub manifest: RunManifest,
    pub losses: Vec<LossRow>,
    pub metrics: Vec<MetricRow>,
}

fn read_csv<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Data(format!("{}: {other:?}", path.display())),
    })?;
    Ok(r.deserialize().collect::<std::result::Result<Vec<T>, _>>()?)
}

impl RunRecord {
    pub fn load(dir: &Path) -> Result<Self> {
        let manifest = RunManifest::load(dir)?;
        let losses = read_csv(&dir.join(LOSSES_FILE))?;
        let mpath = dir.join(METRICS_FILE);
        let metrics = if mpath.exists() { read_csv(&mpath)? } else { Vec::new() };
        Ok(RunRecord {
            dir: dir.to_path_buf(),
            manifest,
            losses,
            metrics,
        })
    }

    pub fn label(&self) -> String {
        self.manifest.method.label()
    }
}

/// Run directories among `paths`, descending one level into directories
/// that are not runs themselves. Order is sorted for reproducible output.
pub fn collect_runs(paths: &[PathBuf]) -> Result<Vec<RunRecord>> {
    let mut dirs = Vec::new();
    for p in paths {
        if p.join(RUN_FILE).exists() {
            dirs.push(p.clone());
        } else if p.is_dir() {
            let mut sub: Vec<PathBuf> = fs::read_dir(p)
                .map_err(|e| Error::io(p, e))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|d| d.join(RUN_FILE).exists())
                .collect();
            sub.sort();
            if sub.is_empty() {
                return Err(Error::Data(format!("{} contains no runs", p.display())));
            }
            dirs.extend(sub);
        } else {
            return Err(Error::Data(format!("{} is not a run directory", p.display())));
        }
    }
    dirs.into_iter().map(|d| RunRecord::load(&d)).collect()
}

/// Final-metric table; refuses runs scored with different extractors or
/// trained on different splits.
pub fn comparison_table(runs: &[RunRecord]) -> Result<String> {
    if runs.len() < 2 {
        return Err(Error::Config(format!("compare needs at least 2 runs, got {}", runs.len())));
    }
    let first = &runs[0].manifest;
    for r in runs {
        if r.manifest.extractor_hash != first.extractor_hash {
            return Err(Error::Data(format!(
                "refusing to compare: {} was scored with extractor {:?}, {} with {:?}",
                runs[0].dir.display(),
                first.extractor_hash,
                r.dir.display(),
                r.manifest.extractor_hash
            )));
        }
        if r.manifest.data_manifest_hash != first.data_manifest_hash {
            return Err(Error::Data(format!(
                "refusing to compare: {} and {} use different splits",
                runs[0].dir.display(),
                r.dir.display()
            )));
        }
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "run", "method", "threshold", "lambda", "entropy_reg", "fake_cls", "iter", "fid", "is", "f18", "f8",
        "entropy_gap",
    ])?;
    for r in runs {
        let m = &r.manifest.method;
        let last = r
            .metrics
            .last()
            .ok_or_else(|| Error::Data(format!("{} has no metrics", r.dir.display())))?;
        w.write_record([
            r.dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default(),
            m.name.to_string(),
            m.threshold.map(|c| c.value().to_string()).unwrap_or_default(),
            m.lambda.to_string(),
            m.flags.use_entropy_reg.to_string(),
            m.flags.use_fake_cls.to_string(),
            last.iter.to_string(),
            last.fid.to_string(),
            last.is.to_string(),
            last.f18.to_string(),
            last.f8.to_string(),
            last.entropy_gap.to_string(),
        ])?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Data(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

fn cmd_compare(a: CompareArgs) -> Result<()> {
    let mut paths = a.runs.clone();
    let out = a.out.as_deref().map(resolve_out);
    if a.sweep {
        let data = a.data.as_ref().expect("clap enforces --data");
        let root = out.clone().expect("clap enforces --out");
        let bundle = DataBundle::load(data)?;
        let mut base = match &a.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        base.split = bundle.manifest.config;
        if let Some(t) = a.iters {
            base.train.total_iters = t;
        }
        if let Some(s) = a.seed {
            base.train.seed = s;
        }
        let evaluator = evaluator_for(&bundle, a.eval_samples)?;
        let mut specs = vec![MethodSpec::ossgan(a.lambda)];
        for m in &a.methods {
            if !m.uses_threshold() {
                return Err(Error::Config(format!("--methods takes threshold methods only, got {m}")));
            }
            for &c in &a.thresholds {
                specs.push(MethodSpec::new(*m, Some(c), a.lambda, Default::default())?);
            }
        }
        for spec in specs {
            let cfg = ExperimentConfig {
                method: spec,
                out_dir: root.join(spec.label()),
                ..base.clone()
            };
            paths.push(run_experiment(&bundle, &cfg, &evaluator)?);
        }
    }
    let runs = collect_runs(&paths)?;
    let table = comparison_table(&runs)?;
    print!("{table}");
    if let Some(dir) = out {
        create_dir(&dir)?;
        let p = dir.join(COMPARISON_FILE);
        fs::write(&p, &table).map_err(|e| Error::io(&p, e))?;
    }
    Ok(())
}

fn downsample<T: Copy>(v: &[T], max: usize) -> Vec<T> {
    let stride = v.len().div_ceil(max).max(1);
    let mut out: Vec<T> = v.iter().step_by(stride).copied().collect();
    if let Some(last) = v.last() {
        if !(v.len() - 1).is_multiple_of(stride) {
            out.push(*last);
        }
    }
    out
}

/// Builds every applicable chart for `runs`, keyed by file name.
pub fn build_plots(runs: &[RunRecord]) -> Result<BTreeMap<String, String>> {
    let mut files = BTreeMap::new();
    let mut loss = Chart::new("Training losses", "iteration", "loss", Style::Lines);
    for r in runs {
        if r.losses.is_empty() {
            return Err(Error::Data(format!("{} has an empty loss log", r.dir.display())));
        }
        let rows = downsample(&r.losses, 500);
        loss.series.push(Series {
            name: format!("{} D", r.label()),
            points: rows.iter().map(|l| (l.iter as f64, l.total_d)).collect(),
        });
        loss.series.push(Series {
            name: format!("{} G", r.label()),
            points: rows.iter().map(|l| (l.iter as f64, l.total_g)).collect(),
        });
    }
    files.insert("loss_curves.svg".to_string(), loss.to_svg());

    let scored: Vec<&RunRecord> = runs.iter().filter(|r| !r.metrics.is_empty()).collect();
    if scored.len() >= 2 {
        let mut by_method: BTreeMap<MethodName, Vec<(f64, f64)>> = BTreeMap::new();
        for r in &scored {
            let m = r.metrics.last().expect("nonempty");
            by_method.entry(r.manifest.method.name).or_default().push((m.f8, m.f18));
        }
        let mut pr = Chart::new("Precision and recall", "recall (F8)", "precision (F1/8)", Style::Markers);
        for (i, (name, pts)) in by_method.iter().enumerate() {
            let n = pts.len() as f64;
            let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
            let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
            pr.series.push(Series {
                name: name.to_string(),
                points: pts.clone(),
            });
            pr.crosshairs.push((i, mx, my));
        }
        files.insert("pr_scatter.svg".to_string(), pr.to_svg());
    }

    let mut sweep: BTreeMap<MethodName, Vec<(f64, f64)>> = BTreeMap::new();
    let mut flat = Vec::new();
    for r in &scored {
        let fid = r.metrics.last().expect("nonempty").fid;
        match r.manifest.method.threshold {
            Some(c) => sweep.entry(r.manifest.method.name).or_default().push((c.value(), fid)),
            None => flat.push((r.label(), fid)),
        }
    }
    if !sweep.is_empty() {
        let mut chart = Chart::new("FID against threshold", "threshold c", "FID", Style::Lines);
        for (name, mut pts) in sweep {
            pts.sort_by(|a, b| a.0.total_cmp(&b.0));
            chart.series.push(Series {
                name: name.to_string(),
                points: pts,
            });
        }
        chart.hlines = flat;
        files.insert("fid_vs_threshold.svg".to_string(), chart.to_svg());
    }
    Ok(files)
}

fn cmd_plot(a: PlotArgs) -> Result<()> {
    let runs = collect_runs(&a.runs)?;
    let files = build_plots(&runs)?;
    let out = resolve_out(&a.out);
    create_dir(&out)?;
    for (name, svg) in files {
        let p = out.join(&name);
        fs::write(&p, svg).map_err(|e| Error::io(&p, e))?;
        println!("{}", p.display());
    }
    Ok(())
}
