use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use motion_intent::autolabel::{label_scenario, LabelSet, LabelStats};
use motion_intent::eval::{ensemble_nms, evaluate, EvalCase, EvalConfig, MemberOutput};
use motion_intent::gradsuite::run_suite;
use motion_intent::model::{Model, PredictionDump, Pruning};
use motion_intent::scene::normalize_scene;
use motion_intent::synth::{read_corpus, write_corpus, Archetype, GeneratorConfig};
use motion_intent::tensor::Checkpoint;
use motion_intent::training::{prepare, train, TrainConfig};
use motion_intent::{Error, Result};

const CHECKPOINT_FILE: &str = "checkpoint.json";
const TRAIN_CONFIG_FILE: &str = "train_config.json";
const LOSS_FILE: &str = "loss.csv";
const STATS_FILE: &str = "label_stats.csv";

#[derive(Parser)]
#[command(name = "motion-intent", version, about = "Pruned multimodal trajectory prediction toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic scenario corpus.
    Gen(GenArgs),
    /// Auto-label a corpus.
    Label(LabelArgs),
    /// Train a model on a corpus.
    Train(TrainArgs),
    /// Predict every scenario of a corpus.
    Predict(PredictArgs),
    /// Score predictions against a corpus.
    Eval(EvalArgs),
    /// Merge several prediction sets with endpoint NMS.
    Ensemble(EnsembleArgs),
    /// Finite-difference check of every differentiable op and loss.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct GenArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 20)]
    count: usize,
    #[arg(long, default_value = "corpus")]
    out: PathBuf,
    /// Comma-separated archetypes, cycled over scenarios.
    #[arg(long, value_delimiter = ',')]
    archetypes: Vec<String>,
    #[arg(long)]
    future_steps: Option<usize>,
    #[arg(long)]
    min_agents: Option<usize>,
    #[arg(long)]
    max_agents: Option<usize>,
}

#[derive(Args)]
struct LabelArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long, default_value = "labels")]
    out: PathBuf,
    /// Training config whose label and scene settings are used.
    #[arg(long, env = "MOTION_INTENT_CONFIG")]
    config: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    Toy,
    Full,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long, default_value = "run")]
    out: PathBuf,
    /// JSON training config; overrides the preset.
    #[arg(long, env = "MOTION_INTENT_CONFIG")]
    config: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Preset::Toy)]
    preset: Preset,
    /// Optimizer steps; 0 writes the freshly initialized checkpoint.
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct PredictArgs {
    /// Directory written by `train`.
    #[arg(long)]
    run: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long, default_value = "predictions")]
    out: PathBuf,
    /// Attend to every agent and polyline instead of the top-ranked ones.
    #[arg(long)]
    no_pruning: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    predictions: PathBuf,
    #[arg(long, default_value = "report.json")]
    out: PathBuf,
    /// Also write `metric,value` rows here.
    #[arg(long)]
    csv: Option<PathBuf>,
    /// Per-scenario errors and PR curves for plotting.
    #[arg(long)]
    dump: Option<PathBuf>,
    #[arg(long, default_value_t = motion_intent::eval::DEFAULT_MISS_THRESHOLD)]
    miss_threshold: f64,
    #[arg(long, env = "MOTION_INTENT_CONFIG")]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct EnsembleArgs {
    /// Prediction directories, one per member.
    #[arg(long, num_args = 1.., required = true)]
    predictions: Vec<PathBuf>,
    #[arg(long, default_value = "ensemble")]
    out: PathBuf,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Seeded cases per op.
    #[arg(long, default_value_t = 4)]
    cases: usize,
}

fn prediction_file(i: usize) -> String {
    format!("prediction_{i:05}.json")
}

fn label_file(i: usize) -> String {
    format!("labels_{i:05}.json")
}

fn ensemble_file(i: usize) -> String {
    format!("ensemble_{i:05}.json")
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Input(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Error::Input(format!("{}: {e}", path.display())))
}

fn write_json<T: serde::Serialize>(path: &Path, v: &T) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(v)?)?;
    Ok(())
}

fn open_corpus(dir: &Path) -> Result<Vec<motion_intent::scene::Scenario>> {
    if !dir.is_dir() {
        return Err(Error::Input(format!("corpus directory {} not found", dir.display())));
    }
    Ok(read_corpus(dir)?.1)
}

fn load_config(path: Option<&Path>, preset: Preset) -> Result<TrainConfig> {
    match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::Input(format!("{}: {e}", p.display())))?;
            TrainConfig::from_json(&text)
        }
        None => Ok(match preset {
            Preset::Toy => TrainConfig::toy(),
            Preset::Full => TrainConfig::default(),
        }),
    }
}

fn gen(a: GenArgs) -> Result<()> {
    let mut cfg = GeneratorConfig {
        seed: a.seed,
        count: a.count,
        ..GeneratorConfig::default()
    };
    if !a.archetypes.is_empty() {
        cfg.archetypes = a.archetypes.iter().map(|s| Archetype::parse(s)).collect::<Result<_>>()?;
    }
    if let Some(t) = a.future_steps {
        cfg.future_steps = t;
    }
    if let Some(n) = a.min_agents {
        cfg.min_agents = n;
    }
    if let Some(n) = a.max_agents {
        cfg.max_agents = n;
    }
    let m = write_corpus(&a.out, &cfg)?;
    println!("wrote {} scenarios to {}", m.count, a.out.display());
    for (k, v) in &m.archetype_counts {
        println!("  {k}: {v}");
    }
    Ok(())
}

fn label(a: LabelArgs) -> Result<()> {
    let cfg = load_config(a.config.as_deref(), Preset::Toy)?;
    let scenarios = open_corpus(&a.corpus)?;
    std::fs::create_dir_all(&a.out)?;
    let mut stats = LabelStats::default();
    for (i, s) in scenarios.iter().enumerate() {
        let l = label_scenario(s, &cfg.labels, &cfg.scene)?;
        std::fs::write(a.out.join(label_file(i)), l.to_json()?)?;
        stats.add(&l);
    }
    let csv = stats.to_csv();
    std::fs::write(a.out.join(STATS_FILE), &csv)?;
    print!("{csv}");
    Ok(())
}

fn train_cmd(a: TrainArgs) -> Result<()> {
    let mut cfg = load_config(a.config.as_deref(), a.preset)?;
    if let Some(s) = a.steps {
        cfg.steps = s;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    let scenarios = open_corpus(&a.corpus)?;
    if let Some(s) = scenarios.first() {
        let t = s.target().future.len();
        if t != cfg.model.future_steps {
            return Err(Error::Config(format!(
                "corpus horizon is {t} steps but the model predicts {}; set model.future_steps",
                cfg.model.future_steps
            )));
        }
    }
    let samples = scenarios.iter().map(|s| prepare(s, &cfg.labels, &cfg.scene)).collect::<Result<Vec<_>>>()?;
    let out = train(&samples, &cfg)?;
    std::fs::create_dir_all(&a.out)?;
    out.store.to_checkpoint().save(&a.out.join(CHECKPOINT_FILE))?;
    write_json(&a.out.join(TRAIN_CONFIG_FILE), &cfg)?;
    std::fs::write(a.out.join(LOSS_FILE), out.curve_csv())?;
    match out.curve.last() {
        Some(r) => println!("trained {} steps, final loss {:.4}", out.curve.len(), r.loss.total),
        None => println!("wrote untrained checkpoint (seed {})", cfg.seed),
    }
    Ok(())
}

fn load_run(dir: &Path) -> Result<(TrainConfig, Model, motion_intent::tensor::ParameterStore)> {
    let text = std::fs::read_to_string(dir.join(TRAIN_CONFIG_FILE))
        .map_err(|e| Error::Input(format!("{}: {e}", dir.join(TRAIN_CONFIG_FILE).display())))?;
    let cfg = TrainConfig::from_json(&text)?;
    let ck = Checkpoint::load(&dir.join(CHECKPOINT_FILE))?;
    let (model, store) = Model::from_checkpoint(cfg.model.clone(), &ck)?;
    Ok((cfg, model, store))
}

fn predict(a: PredictArgs) -> Result<()> {
    let (cfg, model, store) = load_run(&a.run)?;
    let pruning = if a.no_pruning { Pruning::Disabled } else { model.config.pruning() };
    let scenarios = open_corpus(&a.corpus)?;
    std::fs::create_dir_all(&a.out)?;
    for (i, s) in scenarios.iter().enumerate() {
        let scene = normalize_scene(s, &cfg.scene)?;
        let p = model.predict_with(&store, &scene, pruning)?;
        write_json(&a.out.join(prediction_file(i)), &p.to_dump(&scene))?;
    }
    println!("wrote {} predictions with {} modes to {}", scenarios.len(), model.config.num_modes, a.out.display());
    Ok(())
}

fn eval_cmd(a: EvalArgs) -> Result<()> {
    let cfg = load_config(a.config.as_deref(), Preset::Toy)?;
    let scenarios = open_corpus(&a.corpus)?;
    let mut cases = Vec::with_capacity(scenarios.len());
    for (i, s) in scenarios.iter().enumerate() {
        let dump: PredictionDump = read_json(&a.predictions.join(prediction_file(i)))?;
        let labels: LabelSet = label_scenario(s, &cfg.labels, &cfg.scene)?;
        let gt = s.target().future.clone();
        cases.push(EvalCase::from_dump(&dump, gt, labels, s.target_index)?);
    }
    let eval_cfg = EvalConfig {
        miss_threshold: a.miss_threshold,
        ..EvalConfig::default()
    };
    let out = evaluate(&cases, &eval_cfg)?;
    write_json(&a.out, &out.report)?;
    if let Some(p) = &a.csv {
        std::fs::write(p, out.report.to_csv())?;
    }
    if let Some(p) = &a.dump {
        write_json(p, &out)?;
    }
    print!("{}", out.report.to_csv());
    Ok(())
}

fn ensemble(a: EnsembleArgs) -> Result<()> {
    let count = std::fs::read_dir(&a.predictions[0])?
        .filter_map(|e| e.ok())
        .filter(|e| e.file_name().to_string_lossy().starts_with("prediction_"))
        .count();
    if count == 0 {
        return Err(Error::Input(format!("no predictions in {}", a.predictions[0].display())));
    }
    std::fs::create_dir_all(&a.out)?;
    for i in 0..count {
        let members = a
            .predictions
            .iter()
            .map(|d| {
                let p: PredictionDump = read_json(&d.join(prediction_file(i)))?;
                Ok(MemberOutput {
                    trajectories: p.trajectories,
                    scores: p.scores,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        write_json(&a.out.join(ensemble_file(i)), &ensemble_nms(&members)?)?;
    }
    println!("wrote {count} ensembles from {} members to {}", a.predictions.len(), a.out.display());
    Ok(())
}

fn gradcheck(a: GradcheckArgs) -> Result<bool> {
    let r = run_suite(a.seed, a.cases)?;
    print!("{}", r.table());
    println!("{} cases, max relative error {:.3e}", r.cases(), r.max_rel_error());
    Ok(r.passed())
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Gen(a) => gen(a).map(|_| true),
        Command::Label(a) => label(a).map(|_| true),
        Command::Train(a) => train_cmd(a).map(|_| true),
        Command::Predict(a) => predict(a).map(|_| true),
        Command::Eval(a) => eval_cmd(a).map(|_| true),
        Command::Ensemble(a) => ensemble(a).map(|_| true),
        Command::Gradcheck(a) => gradcheck(a),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("error: gradient check tolerance exceeded");
            ExitCode::FAILURE
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
