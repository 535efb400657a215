//! The `htm` command line: data collection, training, planning, execution,
//! benchmarking and plan rendering, all driven by one JSON config.

pub mod render;

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use htm_core::config::{load_config, parse_config, RunConfig};
use htm_core::connectivity::train_sptm;
use htm_core::controller::{execute, plan_seed, train_inverse, Agent, ExecutionResult, Method};
use htm_core::dataset::{collect_dataset, read_dataset, write_dataset, write_json};
use htm_core::eval::{run_ablation, run_benchmark, scorer, MethodSpec, ScoreModel};
use htm_core::generator::{train_cvae, CvaeModel, CVAE_KIND};
use htm_core::pipeline::{
    evaluation_tasks, load_checkpoint, save_checkpoint, train_cpc_with_generator, Models, CPC_FILE, CVAE_FILE,
    INVERSE_FILE, SPTM_FILE,
};
use htm_core::planner::{plan_end_to_end, Plan, WeightScheme};
use htm_core::rng::derive;
use htm_core::selftest::{dijkstra_suite, grad_suite, jensen_suite};
use htm_core::train::TrainingLog;
use htm_core::world::{encode_context, observe, AgentState, Context, Task, WorldConfig};
use htm_core::{HtmError, Result};
use htm_tensor::Checkpoint;

/// Environment variable that replaces every seed of the config.
pub const SEED_ENV: &str = "HTM_SEED";

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Parser, Debug)]
#[command(name = "htm", version, about = "Hallucinative topological memory planner")]
#[command(arg_required_else_help = true)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args, Debug)]
struct ConfigArg {
    /// JSON run config; absent keys take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum MethodArg {
    /// CVAE + CPC + normalized weights.
    Htm,
    /// Binary classifier with exp(-p) weights.
    Sptm,
    /// No planner: the inverse model chases the goal.
    Inverse,
}

impl MethodArg {
    fn spec(self) -> MethodSpec {
        match self {
            MethodArg::Htm => MethodSpec::HTM,
            MethodArg::Sptm => MethodSpec::SPTM,
            MethodArg::Inverse => MethodSpec::INVERSE_ONLY,
        }
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Random-exploration dataset over the training contexts.
    Collect(ConfigArg),
    TrainCvae(ConfigArg),
    /// Needs the generator checkpoint for its hallucinated negatives.
    TrainCpc(ConfigArg),
    TrainSptm(ConfigArg),
    TrainInverse(ConfigArg),
    /// Plans one evaluation task and writes the plan as JSON.
    Plan {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long, default_value_t = 0)]
        task: u64,
        #[arg(long, value_enum, default_value_t = MethodArg::Htm)]
        method: MethodArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Runs one evaluation task closed-loop and writes the trace as JSON.
    Execute {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long, default_value_t = 0)]
        task: u64,
        #[arg(long, value_enum, default_value_t = MethodArg::Htm)]
        method: MethodArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Benchmarks every method; writes CSV plus a JSON summary beside it.
    Evaluate {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score model × weight scheme grid; writes CSV, JSON and a text table.
    Ablate {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Draws a plan file as a binary PPM strip.
    Render {
        #[arg(long)]
        plan: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Side of each square panel in pixels.
        #[arg(long, default_value_t = 64)]
        panel: usize,
    },
    /// Gradient, shortest-path and Jensen-bound checks.
    Selftest {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

/// Sidecar record of how an artifact was made.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Provenance {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub config_hash: String,
    pub config: RunConfig,
}

impl Provenance {
    fn new(command: &str, cfg: &RunConfig) -> Self {
        Self {
            tool: "htm".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            command: command.into(),
            config_hash: cfg.hash(),
            config: cfg.clone(),
        }
    }
}

/// Plan file written by `plan` and read by `render`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PlanRecord {
    pub config_hash: String,
    pub task_id: u64,
    pub world: WorldConfig,
    pub context: Context,
    pub start: AgentState,
    pub goal: AgentState,
    pub score: ScoreModel,
    pub scheme: WeightScheme,
    pub seed: u64,
    pub samples: usize,
    pub plan: Plan,
}

#[derive(Clone, Debug, Serialize)]
struct TrainingRecord<'a> {
    provenance: Provenance,
    log: &'a TrainingLog,
}

#[derive(Clone, Debug, Serialize)]
struct ExecutionRecord<'a> {
    provenance: Provenance,
    task: &'a Task,
    method: String,
    scheme: &'static str,
    seed: u64,
    result: &'a ExecutionResult,
}

/// Path with `suffix` appended to the file name: `a/report.csv` →
/// `a/report.csv.provenance.json`.
pub fn sidecar(path: &Path, suffix: &str) -> PathBuf {
    let mut name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(suffix);
    path.with_file_name(name)
}

fn write_provenance(artifact: &Path, prov: &Provenance) -> Result<()> {
    write_json(&sidecar(artifact, ".provenance.json"), prov)
}

fn write_text(path: &Path, text: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| HtmError::io(parent, e))?;
    }
    std::fs::write(path, text).map_err(|e| HtmError::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| HtmError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| HtmError::Format {
        path: path.into(),
        msg: e.to_string(),
    })
}

/// Loads the config (defaults without `--config`) and applies the seed
/// override from the environment.
fn resolve_config(arg: &ConfigArg, seed_override: Option<&str>) -> Result<RunConfig> {
    let mut cfg = match &arg.config {
        Some(path) => load_config(path)?,
        None => parse_config("{}")?,
    };
    if let Some(text) = seed_override {
        let seed = text.trim().parse::<u64>().map_err(|e| HtmError::Config {
            key: SEED_ENV.into(),
            msg: format!("not an unsigned integer: {e}"),
        })?;
        cfg.override_seed(seed);
    }
    Ok(cfg)
}

fn save_model(
    cfg: &RunConfig,
    command: &str,
    file: &str,
    ckpt: &Checkpoint,
    log: &TrainingLog,
) -> Result<()> {
    let dir = &cfg.paths.models;
    std::fs::create_dir_all(dir).map_err(|e| HtmError::io(dir, e))?;
    let path = dir.join(file);
    save_checkpoint(&path, ckpt)?;
    write_json(
        &sidecar(&path, ".provenance.json"),
        &TrainingRecord {
            provenance: Provenance::new(command, cfg),
            log,
        },
    )?;
    println!("wrote {}", path.display());
    Ok(())
}

fn task_by_id(cfg: &RunConfig, id: u64) -> Result<Task> {
    let count = usize::try_from(id).ok().and_then(|i| i.checked_add(1)).ok_or_else(|| HtmError::Config {
        key: "task".into(),
        msg: "task id out of range".into(),
    })?;
    Ok(evaluation_tasks(cfg, count)?.pop().expect("count >= 1"))
}

fn run_command(command: Command, seed_override: Option<&str>) -> Result<()> {
    match command {
        Command::Collect(arg) => {
            let cfg = resolve_config(&arg, seed_override)?;
            let data = collect_dataset(&cfg.data_spec(), &cfg.world)?;
            let manifest = serde_json::to_value(Provenance::new("collect", &cfg)).expect("serializable");
            write_dataset(&cfg.paths.data, &data, &manifest)?;
            println!(
                "wrote {} transitions over {} contexts to {}",
                data.transition_count(),
                data.contexts.len(),
                cfg.paths.data.display()
            );
        }
        Command::TrainCvae(arg) => {
            let cfg = resolve_config(&arg, seed_override)?;
            let data = read_dataset(&cfg.paths.data)?;
            let (model, log) = train_cvae(&data, &cfg.world, &cfg.cvae)?;
            save_model(&cfg, "train-cvae", CVAE_FILE, &model.to_checkpoint(), &log)?;
        }
        Command::TrainCpc(arg) => {
            let cfg = resolve_config(&arg, seed_override)?;
            let data = read_dataset(&cfg.paths.data)?;
            let cvae = CvaeModel::from_checkpoint(&load_checkpoint(&cfg.paths.models.join(CVAE_FILE), CVAE_KIND)?)?;
            let (model, log) = train_cpc_with_generator(&data, &cfg, &cvae)?;
            save_model(&cfg, "train-cpc", CPC_FILE, &model.to_checkpoint(), &log)?;
        }
        Command::TrainSptm(arg) => {
            let cfg = resolve_config(&arg, seed_override)?;
            let data = read_dataset(&cfg.paths.data)?;
            let (model, log) = train_sptm(&data, &cfg.world, &cfg.sptm)?;
            save_model(&cfg, "train-sptm", SPTM_FILE, &model.to_checkpoint(), &log)?;
        }
        Command::TrainInverse(arg) => {
            let cfg = resolve_config(&arg, seed_override)?;
            let data = read_dataset(&cfg.paths.data)?;
            let (model, log) = train_inverse(&data, &cfg.world, &cfg.inverse)?;
            save_model(&cfg, "train-inverse", INVERSE_FILE, &model.to_checkpoint(), &log)?;
        }
        Command::Plan {
            config,
            task,
            method,
            out,
        } => {
            let cfg = resolve_config(&config, seed_override)?;
            let spec = method.spec();
            let scheme = spec.scheme.ok_or_else(|| HtmError::Config {
                key: "method".into(),
                msg: "the inverse-only method does not plan".into(),
            })?;
            let models = Models::load(&cfg.paths.models)?;
            let task = task_by_id(&cfg, task)?;
            let seed = plan_seed(derive(cfg.eval.seed, task.id), 0);
            let enc = encode_context(&task.context, &cfg.world, cfg.mode);
            let start = observe(&task.context, &cfg.world, &task.start, cfg.mode);
            let goal = observe(&task.context, &cfg.world, &task.goal, cfg.mode);
            let (_, plan) = plan_end_to_end(
                &models.cvae,
                scorer(&models, spec.score),
                &enc,
                &start,
                &goal,
                cfg.planning.samples,
                scheme,
                seed,
            )?;
            let record = PlanRecord {
                config_hash: cfg.hash(),
                task_id: task.id,
                world: cfg.world.clone(),
                context: task.context.clone(),
                start: task.start,
                goal: task.goal,
                score: spec.score,
                scheme,
                seed,
                samples: cfg.planning.samples,
                plan,
            };
            write_json(&out, &record)?;
            write_provenance(&out, &Provenance::new("plan", &cfg))?;
            println!(
                "plan for task {} has {} nodes, total weight {:.4}",
                record.task_id,
                record.plan.nodes.len(),
                record.plan.total_weight
            );
        }
        Command::Execute {
            config,
            task,
            method,
            out,
        } => {
            let cfg = resolve_config(&config, seed_override)?;
            let spec = method.spec();
            let models = Models::load(&cfg.paths.models)?;
            let task = task_by_id(&cfg, task)?;
            let seed = derive(cfg.eval.seed, task.id);
            let agent = Agent {
                generator: &models.cvae,
                scorer: scorer(&models, spec.score),
                inverse: &models.inverse,
            };
            let exec_method = match spec.scheme {
                Some(scheme) => Method::Planner {
                    scheme,
                    samples: cfg.planning.samples,
                },
                None => Method::InverseOnly,
            };
            let result = execute(&task, &cfg.world, cfg.mode, &agent, exec_method, &cfg.execution, seed)?;
            write_json(
                &out,
                &ExecutionRecord {
                    provenance: Provenance::new("execute", &cfg),
                    task: &task,
                    method: spec.name(),
                    scheme: spec.scheme_name(),
                    seed,
                    result: &result,
                },
            )?;
            println!(
                "task {}: success {} after {} steps, final distance {:.4}",
                task.id, result.success, result.steps, result.final_distance
            );
        }
        Command::Evaluate { config, out } => {
            let cfg = resolve_config(&config, seed_override)?;
            let models = Models::load(&cfg.paths.models)?;
            let tasks = evaluation_tasks(&cfg, cfg.eval.tasks)?;
            let methods = [MethodSpec::HTM, MethodSpec::SPTM, MethodSpec::INVERSE_ONLY];
            let report = run_benchmark(
                &tasks,
                &cfg.world,
                cfg.mode,
                &models,
                &methods,
                cfg.planning.samples,
                &cfg.execution,
                cfg.eval.seed,
            )?;
            write_text(&out, report.to_csv().as_bytes())?;
            write_json(&out.with_extension("json"), &report)?;
            write_provenance(&out, &Provenance::new("evaluate", &cfg))?;
            for a in &report.aggregates {
                println!(
                    "{:<14} {:<14} success {:.2} over {} tasks, mean distance {:.4}",
                    a.method, a.scheme, a.success_rate, a.tasks, a.mean_final_distance
                );
            }
        }
        Command::Ablate { config, out } => {
            let cfg = resolve_config(&config, seed_override)?;
            let models = Models::load(&cfg.paths.models)?;
            let tasks = evaluation_tasks(&cfg, cfg.eval.ablation_tasks)?;
            let grid = run_ablation(
                &tasks,
                &cfg.world,
                cfg.mode,
                &models,
                cfg.planning.s_shortcut,
                cfg.planning.samples,
                &cfg.execution,
                cfg.eval.seed,
            )?;
            write_text(&out, grid.to_csv().as_bytes())?;
            write_json(&out.with_extension("json"), &grid)?;
            write_text(&out.with_extension("txt"), grid.to_table().as_bytes())?;
            write_provenance(&out, &Provenance::new("ablate", &cfg))?;
            print!("{}", grid.to_table());
        }
        Command::Render { plan, out, panel } => {
            let record: PlanRecord = read_json(&plan)?;
            let bytes = render::render_plan(
                &record.plan.observations,
                &record.context,
                &record.world,
                Some(record.goal),
                panel,
            )?;
            write_text(&out, &bytes)?;
            println!("wrote {} ({} panels)", out.display(), record.plan.observations.len());
        }
        Command::Selftest { seed } => {
            let mut ok = true;
            for r in grad_suite(20, seed)? {
                println!(
                    "grad {:<16} {} instances, max rel error {:.2e}: {}",
                    r.loss,
                    r.instances,
                    r.max_rel_error,
                    verdict(r.passed)
                );
                ok &= r.passed;
            }
            let mismatches = dijkstra_suite(100, seed)?;
            println!("dijkstra vs exhaustive search: {mismatches} mismatches: {}", verdict(mismatches == 0));
            let violations = jensen_suite(1000, seed)?;
            println!("jensen bound: {violations} violations: {}", verdict(violations == 0));
            ok &= mismatches == 0 && violations == 0;
            if !ok {
                return Err(HtmError::Evaluation("selftest failed".into()));
            }
        }
    }
    Ok(())
}

fn verdict(ok: bool) -> &'static str {
    if ok {
        "ok"
    } else {
        "FAILED"
    }
}

/// Parses `args` (program name first) and runs the subcommand. Returns the
/// process exit code: 0 success, 1 runtime failure, 2 usage or config error.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => EXIT_OK,
                _ => EXIT_USAGE,
            };
        }
    };
    let seed_override = std::env::var(SEED_ENV).ok();
    match run_command(cli.command, seed_override.as_deref()) {
        Ok(()) => EXIT_OK,
        Err(e @ HtmError::Config { .. }) => {
            eprintln!("error: {e}");
            EXIT_USAGE
        }
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_FAILURE
        }
    }
}
