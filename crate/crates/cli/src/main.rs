//! `mvdg`: command-line front end for the multi-view point-cloud pipeline.
//!
//! Exit codes: 0 on success, 1 on usage errors (nothing written), 2 on
//! runtime failures (a `FAILED` file in the output directory holds the
//! error).

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use mvdg::augment::{apply, TransformSpec};
use mvdg::eval::{evaluate, utilization, EvalConfig};
use mvdg::gradcheck::{check_gradients, GradCheckConfig, ModelObjective};
use mvdg::io::{load_dataset, read_cloud, read_tensor, write_bytes, write_cloud, write_tensor, Checkpoint, CloudFormat, Split};
use mvdg::model::{DgMvp, ModelConfig};
use mvdg::ops::Mode;
use mvdg::project::{project, view_basis, ViewSetKind};
use mvdg::rng::{seeded, stream};
use mvdg::synth::{generate_synthetic, SynthConfig};
use mvdg::train::{fit, FitOutput, TrainConfig};
use mvdg::Tensor32;

const RESOLVED_CONFIG: &str = "resolved_config.json";
const FAILED_MARKER: &str = "FAILED";

#[derive(Parser, Debug, Serialize)]
#[command(name = "mvdg", version, about = "Multi-view depth-image point-cloud classification")]
struct Cli {
    /// Base random seed (overrides any seed in a config file).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Request bitwise-reproducible execution. Every code path is already
    /// deterministic; the flag is recorded in the resolved config.
    #[arg(long, global = true)]
    deterministic: bool,
    /// Worker threads for data preparation (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[arg(long, global = true, default_value = "info", value_parser = ["error", "warn", "info", "debug", "trace"])]
    log_level: String,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug, Serialize)]
#[serde(rename_all = "kebab-case")]
enum Command {
    /// Generate the synthetic source and deformed target datasets.
    GenSynth(GenSynthArgs),
    /// Apply one occlusion or density transform to a cloud.
    Augment(AugmentArgs),
    /// Render a cloud into depth images.
    Project(ProjectArgs),
    /// Train a model on a dataset manifest.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset manifest.
    Eval(EvalArgs),
    /// Count the rows that win at least one column max of a feature matrix.
    ProfileUtil(ProfileUtilArgs),
    /// Compare analytic and finite-difference gradients of a model.
    Gradcheck(GradcheckArgs),
}

#[derive(Args, Debug, Serialize)]
struct GenSynthArgs {
    #[arg(long, default_value_t = 6)]
    classes: usize,
    #[arg(long, default_value_t = 200)]
    per_class: usize,
    #[arg(long, default_value_t = 20)]
    val_per_class: usize,
    #[arg(long, default_value_t = 100)]
    target_per_class: usize,
    #[arg(long, default_value_t = 2048)]
    points: usize,
    #[arg(long, default_value_t = 0.01)]
    jitter: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, Debug, Serialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
enum TransformKind {
    Identity,
    Hole,
    Density,
}

#[derive(Args, Debug, Serialize)]
struct AugmentArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    kind: TransformKind,
    /// Hole rate r or density exponent g.
    #[arg(long)]
    param: Option<f64>,
    /// Output cloud; `.xyz` selects the text format, anything else pcb.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
struct ProjectArgs {
    #[arg(long = "in")]
    input: PathBuf,
    /// View set: 6, 8, 14clock or 14cube.
    #[arg(long, default_value = "6", value_parser = parse_views)]
    views: ViewSetKind,
    #[arg(long, default_value_t = 128)]
    res: usize,
    /// Center and scale the cloud into the unit ball first.
    #[arg(long)]
    normalize: bool,
    #[arg(long)]
    out_dir: PathBuf,
}

fn parse_views(s: &str) -> Result<ViewSetKind, String> {
    s.parse().map_err(|e: mvdg::project::ProjectError| e.to_string())
}

#[derive(Clone, Copy, Debug, Default, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
enum Profile {
    #[default]
    Desk,
    Paper,
}

#[derive(Args, Debug, Serialize)]
struct TrainArgs {
    /// JSON with optional `profile`, `model` and `train` sections.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Manifest; its train split is used for training and its test split
    /// (if any) for validation.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    profile: Option<Profile>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    augment: Option<bool>,
    #[arg(long, value_parser = parse_views)]
    views: Option<ViewSetKind>,
    /// Continue from `final.ckpt` in the output directory.
    #[arg(long)]
    resume: bool,
}

#[derive(Args, Debug, Serialize)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Restrict to one manifest split.
    #[arg(long)]
    split: Option<SplitArg>,
    #[arg(long, default_value_t = 1024)]
    num_points: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, Debug, Serialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
enum SplitArg {
    Train,
    Test,
}

#[derive(Args, Debug, Serialize)]
struct ProfileUtilArgs {
    /// Raw tensor file holding an M×D feature matrix.
    #[arg(long)]
    features: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
struct GradcheckArgs {
    /// Model config JSON; defaults to the desk profile.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 6)]
    classes: usize,
    #[arg(long, default_value_t = 2)]
    batch: usize,
    #[arg(long, default_value_t = 200)]
    samples: usize,
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
    #[arg(long)]
    out: PathBuf,
}

/// Failure class, mapped to the exit code.
enum Failure {
    Usage(anyhow::Error),
    Runtime { out_dir: Option<PathBuf>, error: anyhow::Error },
}

type Outcome = Result<(), Failure>;

fn usage(e: impl Into<anyhow::Error>) -> Failure {
    Failure::Usage(e.into())
}

fn runtime(out_dir: &Path) -> impl FnOnce(anyhow::Error) -> Failure + '_ {
    move |error| Failure::Runtime { out_dir: Some(out_dir.to_path_buf()), error }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    env_logger::Builder::new().parse_filters(&cli.log_level).format_timestamp(None).init();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    }
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime { out_dir, error }) => {
            eprintln!("error: {error:#}");
            if let Some(dir) = out_dir {
                if fs::create_dir_all(&dir).is_ok() {
                    let _ = fs::write(dir.join(FAILED_MARKER), format!("{error:#}\n"));
                }
            }
            ExitCode::from(2)
        }
    }
}

fn run(cli: &Cli) -> Outcome {
    match &cli.command {
        Command::GenSynth(a) => gen_synth(cli, a),
        Command::Augment(a) => augment(cli, a),
        Command::Project(a) => project_cmd(cli, a),
        Command::Train(a) => train(cli, a),
        Command::Eval(a) => eval(cli, a),
        Command::ProfileUtil(a) => profile_util(cli, a),
        Command::Gradcheck(a) => gradcheck(cli, a),
    }
}

/// Creates `dir` and writes the resolved configuration into it.
fn echo_config(dir: &Path, cli: &Cli, resolved: Value) -> Outcome {
    let doc = json!({
        "command": cli.command,
        "global": { "seed": cli.seed.unwrap_or(0), "deterministic": cli.deterministic, "threads": cli.threads, "log_level": cli.log_level },
        "resolved": resolved,
    });
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display())).map_err(runtime(dir))?;
    let text = serde_json::to_string_pretty(&doc).expect("serializable");
    fs::write(dir.join(RESOLVED_CONFIG), text).with_context(|| format!("writing {RESOLVED_CONFIG}")).map_err(runtime(dir))
}

fn write_json(path: &Path, value: &impl Serialize) -> anyhow::Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)?).with_context(|| format!("writing {}", path.display()))
}

fn gen_synth(cli: &Cli, a: &GenSynthArgs) -> Outcome {
    let cfg = SynthConfig {
        classes: a.classes,
        per_class: a.per_class,
        val_per_class: a.val_per_class,
        target_per_class: a.target_per_class,
        points: a.points,
        jitter: a.jitter,
        seed: cli.seed.unwrap_or(0),
    };
    if !(2..=6).contains(&cfg.classes) {
        return Err(usage(anyhow!("--classes must be between 2 and 6")));
    }
    if cfg.points < 256 || !(cfg.jitter >= 0.0) {
        return Err(usage(anyhow!("--points must be at least 256 and --jitter non-negative")));
    }
    echo_config(&a.out, cli, serde_json::to_value(&cfg).expect("serializable"))?;
    let out = generate_synthetic(&cfg, &a.out).map_err(|e| runtime(&a.out)(e.into()))?;
    println!("{}", out.source_manifest.display());
    println!("{}", out.target_manifest.display());
    Ok(())
}

fn augment(cli: &Cli, a: &AugmentArgs) -> Outcome {
    let spec = match (a.kind, a.param) {
        (TransformKind::Identity, _) => TransformSpec::Identity,
        (TransformKind::Hole, Some(r)) => TransformSpec::Hole(r),
        (TransformKind::Density, Some(g)) => TransformSpec::Density(g),
        (_, None) => return Err(usage(anyhow!("--param is required for hole and density"))),
    };
    let dir = a.out.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new(".")).to_path_buf();
    let seed = cli.seed.unwrap_or(0);
    echo_config(&dir, cli, json!({ "transform": spec, "seed": seed }))?;
    let result = (|| -> anyhow::Result<()> {
        let cloud = read_cloud(&a.input, CloudFormat::from_path(&a.input))?;
        let out = apply(spec, &cloud, &mut seeded(seed))?;
        write_cloud(&a.out, &out, CloudFormat::from_path(&a.out))?;
        log::info!("{spec}: {} -> {} points", cloud.len(), out.len());
        Ok(())
    })();
    result.map_err(runtime(&dir))
}

fn project_cmd(cli: &Cli, a: &ProjectArgs) -> Outcome {
    if a.res < 2 {
        return Err(usage(anyhow!("--res must be at least 2")));
    }
    echo_config(&a.out_dir, cli, json!({ "views": a.views.cli_name(), "resolution": a.res, "normalize": a.normalize }))?;
    let result = (|| -> anyhow::Result<()> {
        let mut cloud = read_cloud(&a.input, CloudFormat::from_path(&a.input))?;
        if a.normalize {
            cloud = mvdg::geom::normalize(&cloud)?.cloud;
        }
        let stack = project(&cloud, a.views, a.res)?;
        let views = view_basis(a.views);
        for (i, v) in views.views.iter().enumerate() {
            write_bytes(&a.out_dir.join(format!("view_{i:02}_{}.pgm", v.name)), &stack.to_pgm(i))?;
        }
        let [n, c, h, w] = stack.shape();
        write_tensor(&a.out_dir.join("stack.tnsr"), &Tensor32::from_vec(&[n, c, h, w], stack.data.clone())?)?;
        Ok(())
    })();
    result.map_err(runtime(&a.out_dir))
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrainFile {
    profile: Option<Profile>,
    model: Option<Value>,
    train: Option<Value>,
}

/// Merges `overlay` into `base` key by key.
fn merge(base: &mut Value, overlay: &Value) {
    match (base, overlay) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                merge(b.entry(k.clone()).or_insert(Value::Null), v);
            }
        }
        (b, o) => *b = o.clone(),
    }
}

fn resolve_train(cli: &Cli, a: &TrainArgs, num_classes: usize) -> anyhow::Result<(ModelConfig, TrainConfig)> {
    let file: TrainFile = match &a.config {
        Some(p) => serde_json::from_str(&fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?)
            .with_context(|| format!("parsing {}", p.display()))?,
        None => TrainFile::default(),
    };
    let profile = a.profile.or(file.profile).unwrap_or_default();
    let base = match profile {
        Profile::Desk => ModelConfig::desk(num_classes),
        Profile::Paper => ModelConfig::paper(num_classes),
    };
    let mut model_json = serde_json::to_value(&base)?;
    if let Some(m) = &file.model {
        merge(&mut model_json, m);
    }
    let mut model: ModelConfig = serde_json::from_value(model_json).context("model section")?;
    if model.num_classes != num_classes {
        bail!("config has {} classes but the manifest lists {num_classes}", model.num_classes);
    }
    let mut train_json = serde_json::to_value(TrainConfig::default())?;
    if let Some(t) = &file.train {
        merge(&mut train_json, t);
    }
    let mut train: TrainConfig = serde_json::from_value(train_json).context("train section")?;
    if let Some(s) = cli.seed {
        train.seed = s;
    }
    if let Some(v) = a.epochs {
        train.epochs = v;
    }
    if let Some(v) = a.batch_size {
        train.batch_size = v;
    }
    if let Some(v) = a.lr {
        train.learning_rate = v;
    }
    if let Some(v) = a.augment {
        train.augment = v;
    }
    if let Some(v) = a.views {
        model.view_set = v;
    }
    model.validate()?;
    train.validate()?;
    Ok((model, train))
}

fn train(cli: &Cli, a: &TrainArgs) -> Outcome {
    let manifest = mvdg::io::DatasetManifest::load(&a.data).map_err(usage)?;
    let (model_cfg, train_cfg) = resolve_train(cli, a, manifest.classes.len()).map_err(usage)?;
    echo_config(&a.out, cli, json!({ "model": model_cfg, "train": train_cfg }))?;
    let result = (|| -> anyhow::Result<()> {
        let train_set = load_dataset(&a.data, Some(Split::Train))?;
        let val_set = load_dataset(&a.data, Some(Split::Test))?;
        let val = (!val_set.is_empty()).then_some(&val_set);
        let mut model = DgMvp::<f32>::new(model_cfg, &mut stream(&[train_cfg.seed, 0x1417]))?;
        let res = fit(&mut model, &train_set, val, &train_cfg, Some(FitOutput { dir: &a.out, resume: a.resume }))?;
        write_json(
            &a.out.join("summary.json"),
            &json!({
                "epochs_completed": res.epochs_completed,
                "best_epoch": res.best_epoch,
                "best_val_acc": res.best_val_acc,
                "final": res.history.last(),
            }),
        )?;
        Ok(())
    })();
    result.map_err(runtime(&a.out))
}

fn eval(cli: &Cli, a: &EvalArgs) -> Outcome {
    if a.num_points == 0 {
        return Err(usage(anyhow!("--num-points must be positive")));
    }
    echo_config(&a.out, cli, json!({ "model": a.model, "data": a.data, "split": a.split, "num_points": a.num_points }))?;
    let result = (|| -> anyhow::Result<()> {
        let ckpt = Checkpoint::load(&a.model)?;
        let split = a.split.map(|s| match s {
            SplitArg::Train => Split::Train,
            SplitArg::Test => Split::Test,
        });
        let data = load_dataset(&a.data, split)?;
        if data.num_classes() != ckpt.config.num_classes {
            bail!("checkpoint has {} classes, dataset {}", ckpt.config.num_classes, data.num_classes());
        }
        let mut model = DgMvp::<f32>::new(ckpt.config.clone(), &mut seeded(0))?;
        ckpt.restore_into(&mut model)?;
        let res = evaluate(&mut model, &data, &EvalConfig { num_points: a.num_points, batch_size: 16 })?;
        write_json(
            &a.out.join("metrics.json"),
            &json!({
                "overall_acc": res.metrics.overall_acc,
                "avg_class_acc": res.metrics.avg_class_acc,
                "samples": data.len(),
                "classes": data.classes,
            }),
        )?;
        fs::write(a.out.join("confusion.csv"), res.metrics.confusion.to_csv(&data.classes))?;
        let lines: Vec<String> = res.predictions.iter().map(serde_json::to_string).collect::<Result<_, _>>()?;
        fs::write(a.out.join("predictions.jsonl"), lines.join("\n") + "\n")?;
        println!("overall_acc {:.4} avg_class_acc {:.4}", res.metrics.overall_acc, res.metrics.avg_class_acc);
        Ok(())
    })();
    result.map_err(runtime(&a.out))
}

fn profile_util(cli: &Cli, a: &ProfileUtilArgs) -> Outcome {
    echo_config(&a.out, cli, json!({ "features": a.features }))?;
    let result = (|| -> anyhow::Result<()> {
        let t = read_tensor(&a.features)?;
        let report = utilization(&t)?;
        write_json(&a.out.join("utilization.json"), &report)?;
        println!("{} of {} points used", report.used_count, report.total_count);
        Ok(())
    })();
    result.map_err(runtime(&a.out))
}

fn gradcheck(cli: &Cli, a: &GradcheckArgs) -> Outcome {
    let config = match &a.config {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display())).map_err(usage)?;
            serde_json::from_str::<ModelConfig>(&text).context("model config").map_err(usage)?
        }
        None => ModelConfig::desk(a.classes),
    };
    config.validate().map_err(usage)?;
    if a.batch < 2 {
        return Err(usage(anyhow!("--batch must be at least 2")));
    }
    let seed = cli.seed.unwrap_or(0);
    echo_config(&a.out, cli, json!({ "model": config, "batch": a.batch, "samples": a.samples, "tolerance": a.tolerance }))?;
    let result = (|| -> anyhow::Result<()> {
        let mut rng = seeded(seed);
        let model = DgMvp::<f64>::new(config.clone(), &mut rng)?;
        let r = config.backbone.resolution;
        let n = a.batch * config.num_views();
        let input = mvdg::Tensor64::from_fn(&[n, 1, r, r], |_| rand::Rng::gen::<f64>(&mut rng));
        let targets = (0..a.batch).map(|i| i % config.num_classes).collect();
        let mut obj = ModelObjective { model, input, targets, mode: Mode::Train };
        let cfg = GradCheckConfig { samples: a.samples, tolerance: a.tolerance, seed, ..Default::default() };
        let report = check_gradients(&mut obj, &cfg)?;
        write_json(&a.out.join("gradcheck.json"), &report)?;
        println!("checked {} parameters ({} skipped at kinks), max relative error {:.3e}", report.checked, report.skipped_at_kinks, report.max_rel_error);
        if !report.passed {
            bail!("max relative error {:.3e} exceeds {:.1e}", report.max_rel_error, a.tolerance);
        }
        Ok(())
    })();
    result.map_err(runtime(&a.out))
}
