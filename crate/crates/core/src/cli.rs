//! Command-line workflows over the library: data generation, cleaning,
//! plan derivation, training, evaluation and reporting.
//!
//! Every command writes its outputs to the paths it is given plus a run
//! manifest `<out>.manifest.json` recording the command, its arguments, the
//! seed and SHA-256 digests of inputs and outputs.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::agent::network::param_count;
use crate::agent::{
    Ablation, AgentError, LearnedPolicy, MemorizingBaseline, OraclePolicy, Policy, PolicyParams, RandomPolicy,
};
use crate::dom::RefMode;
use crate::env::TaskName;
use crate::eval::{self, AttackConfig, EvalError, EvalReport};
use crate::pipeline::{self, NoiseProfile, PipelineError, ProcessedEpisode};
use crate::planner::derive_plan_dataset;
use crate::trainer::{self, AdamState, EvalSpec, PhaseSpec, RlConfig, TrainError};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Data(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Data(_) => EXIT_DATA,
        }
    }
}

macro_rules! data_error {
    ($($t:ty),*) => {$(
        impl From<$t> for CliError {
            fn from(e: $t) -> Self {
                CliError::Data(e.to_string())
            }
        }
    )*};
}
data_error!(std::io::Error, PipelineError, AgentError, EvalError, csv::Error, serde_json::Error);

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Config(m) => CliError::Usage(format!("invalid configuration: {m}")),
            other => CliError::Data(other.to_string()),
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "webnav", version, about = "Web-navigation benchmark and agent-training harness")]
pub struct Cli {
    /// Seed for every random choice the command makes.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Worker threads; 0 uses all cores.
    #[arg(long, global = true, default_value_t = 0)]
    pub jobs: usize,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone)]
pub struct TaskList(pub Vec<TaskName>);

fn parse_tasks(s: &str) -> Result<TaskList, String> {
    TaskName::parse_list(s).map(TaskList).map_err(|e| e.to_string())
}

fn parse_ablations(s: &str) -> Result<AblationList, String> {
    s.split(',')
        .filter(|x| !x.is_empty())
        .map(str::parse)
        .collect::<Result<Vec<Ablation>, _>>()
        .map(AblationList)
}

#[derive(Debug, Clone)]
pub struct AblationList(pub Vec<Ablation>);

fn parse_schedule(s: &str) -> Result<Schedule, String> {
    s.split(',')
        .map(|p| {
            let (a, b) = p
                .split_once(':')
                .ok_or_else(|| format!("phase `{p}` is not OFFLINE_STEPS:ONLINE_EPISODES"))?;
            Ok(PhaseSpec {
                offline_steps: a.trim().parse().map_err(|_| format!("bad step count `{a}`"))?,
                online_episodes: b.trim().parse().map_err(|_| format!("bad episode count `{b}`"))?,
            })
        })
        .collect::<Result<Vec<_>, String>>()
        .map(Schedule)
}

#[derive(Debug, Clone)]
pub struct Schedule(pub Vec<PhaseSpec>);

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Record noisy oracle demonstrations as raw event streams.
    GenDemos {
        #[arg(long, value_parser = parse_tasks, default_value = "all")]
        tasks: TaskList,
        #[arg(long, default_value_t = 10)]
        count: usize,
        #[arg(long, default_value = "ordered")]
        ref_mode: RefMode,
        #[arg(long, default_value = "all")]
        noise: NoiseProfile,
        #[arg(long)]
        out: PathBuf,
    },
    /// Clean raw demonstrations, apply patches and cap each task.
    Process {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        patches: Option<PathBuf>,
        #[arg(long, default_value_t = pipeline::DEFAULT_CAP)]
        cap: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Derive `(task, utterance, subtasks)` plan examples from episodes.
    GenPlans {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit a policy to processed episodes by behavioral cloning.
    TrainBc {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long, default_value_t = 300)]
        steps: usize,
        /// `policy` trains the network; `baseline` fits the memorizing table.
        #[arg(long, default_value = "policy", value_parser = ["policy", "baseline"])]
        model: String,
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        metrics: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Alternate offline cloning with online V-MPO phases.
    TrainRl {
        #[arg(long)]
        demos: PathBuf,
        /// Start from this checkpoint instead of a fresh network.
        #[arg(long)]
        init: Option<PathBuf>,
        #[arg(long, value_parser = parse_tasks, default_value = "click-button")]
        tasks: TaskList,
        /// Comma-separated `OFFLINE_STEPS:ONLINE_EPISODES` phases.
        #[arg(long, value_parser = parse_schedule, default_value = "300:0,0:200")]
        schedule: Schedule,
        #[arg(long, default_value = "ordered")]
        ref_mode: RefMode,
        #[arg(long, default_value_t = 20)]
        eval_episodes: usize,
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        metrics: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Measure per-task accuracy of a policy.
    Evaluate {
        #[command(flatten)]
        eval: EvalArgs,
        #[arg(long, default_value = "none")]
        ablation: Ablation,
        /// Also write the report as JSON for `report`.
        #[arg(long)]
        json: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train on ordered and randomized refs and test under both.
    Attack {
        #[arg(long)]
        ordered: PathBuf,
        #[arg(long)]
        randomized: PathBuf,
        #[arg(long, value_parser = parse_tasks, default_value = "click-button,enter-text,click-collapsible")]
        tasks: TaskList,
        #[arg(long, default_value_t = 100)]
        episodes: usize,
        #[arg(long, default_value_t = 300)]
        bc_steps: usize,
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a policy with input channels removed, on paired seeds.
    Ablate {
        #[command(flatten)]
        eval: EvalArgs,
        #[arg(long, value_parser = parse_ablations, default_value = "no_history,no_vision,no_plan")]
        modes: AblationList,
        #[arg(long)]
        table: Option<PathBuf>,
        #[arg(long)]
        json: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Merge JSON evaluation reports into a CSV and a text table.
    Report {
        #[arg(long = "in", required = true, num_args = 1..)]
        inputs: Vec<PathBuf>,
        #[arg(long)]
        table: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Per-task episode counts of a processed dataset.
    Stats {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// Flat `key = value` training configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Checkpoint path, baseline JSON (`*.json`), `oracle` or `random`.
    #[arg(long)]
    pub policy: String,
    #[arg(long, value_parser = parse_tasks, default_value = "all")]
    pub tasks: TaskList,
    #[arg(long, default_value_t = 100)]
    pub episodes: usize,
    #[arg(long, default_value = "ordered")]
    pub ref_mode: RefMode,
}

#[derive(Debug, Serialize)]
struct Manifest<'a> {
    command: &'a str,
    flags: &'a [String],
    seed: u64,
    inputs: BTreeMap<String, String>,
    outputs: BTreeMap<String, String>,
    /// Seconds since the Unix epoch; the only field that varies between
    /// identical runs.
    created_unix: u64,
}

/// Tracks files read and written by a command.
struct Run {
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
}

impl Run {
    fn input(&mut self, p: &Path) -> Result<BufReader<File>, CliError> {
        let f = File::open(p).map_err(|e| CliError::Data(format!("{}: {e}", p.display())))?;
        self.inputs.push(p.to_path_buf());
        Ok(BufReader::new(f))
    }

    fn read_to_string(&mut self, p: &Path) -> Result<String, CliError> {
        let s = fs::read_to_string(p).map_err(|e| CliError::Data(format!("{}: {e}", p.display())))?;
        self.inputs.push(p.to_path_buf());
        Ok(s)
    }

    fn output(&mut self, p: &Path) -> Result<BufWriter<File>, CliError> {
        let f = File::create(p).map_err(|e| CliError::Data(format!("{}: {e}", p.display())))?;
        self.outputs.push(p.to_path_buf());
        Ok(BufWriter::new(f))
    }

    fn write(&mut self, p: &Path, contents: impl AsRef<[u8]>) -> Result<(), CliError> {
        fs::write(p, contents).map_err(|e| CliError::Data(format!("{}: {e}", p.display())))?;
        self.outputs.push(p.to_path_buf());
        Ok(())
    }
}

fn sha256_file(p: &Path) -> Result<String, CliError> {
    let bytes = fs::read(p).map_err(|e| CliError::Data(format!("{}: {e}", p.display())))?;
    Ok(format!("{:x}", Sha256::digest(bytes)))
}

/// Path of the manifest written next to `out`.
pub fn manifest_path(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".manifest.json");
    PathBuf::from(s)
}

fn load_config(run: &mut Run, args: &ConfigArgs, seed: u64) -> Result<RlConfig, CliError> {
    let mut cfg = match &args.config {
        Some(p) => RlConfig::from_config_text(&run.read_to_string(p)?)?,
        None => RlConfig::default(),
    };
    cfg.seed = seed;
    Ok(cfg)
}

fn read_episodes(run: &mut Run, p: &Path) -> Result<Vec<ProcessedEpisode>, CliError> {
    Ok(pipeline::read_episodes(run.input(p)?)?)
}

fn load_policy(run: &mut Run, spec: &str, seed: u64) -> Result<Box<dyn Policy>, CliError> {
    match spec {
        "oracle" => Ok(Box::new(OraclePolicy)),
        "random" => Ok(Box::new(RandomPolicy { seed })),
        p if p.ends_with(".json") => {
            let text = run.read_to_string(Path::new(p))?;
            Ok(Box::new(MemorizingBaseline::from_json(&text)?))
        }
        p => {
            let path = Path::new(p);
            let policy = LearnedPolicy::load(path).map_err(|e| CliError::Data(format!("{p}: {e}")))?;
            run.inputs.push(path.to_path_buf());
            run.inputs.push(crate::agent::vocab_path(path));
            Ok(Box::new(LearnedPolicy { label: "policy".into(), ..policy }))
        }
    }
}

fn write_reports_json(run: &mut Run, p: &Path, reports: &[EvalReport]) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(reports)?;
    text.push('\n');
    run.write(p, text)
}

fn execute(cli: &Cli, run: &mut Run, stdout: &mut dyn Write) -> Result<PathBuf, CliError> {
    let seed = cli.seed;
    match &cli.command {
        Command::GenDemos {
            tasks,
            count,
            ref_mode,
            noise,
            out,
        } => {
            let demos = pipeline::generate_demonstrations(&tasks.0, *count, seed, *ref_mode, *noise)?;
            pipeline::write_jsonl(&demos, run.output(out)?)?;
            writeln!(stdout, "wrote {} demonstrations to {}", demos.len(), out.display())?;
            Ok(out.clone())
        }
        Command::Process {
            input,
            patches,
            cap,
            out,
        } => {
            if *cap == 0 {
                return Err(CliError::Usage("--cap must be positive".into()));
            }
            let raw = pipeline::read_demonstrations(run.input(input)?)?;
            let mut episodes: Vec<ProcessedEpisode> = raw.iter().map(pipeline::clean_actions).collect();
            if let Some(p) = patches {
                let text = run.read_to_string(p)?;
                pipeline::apply_patches(&mut episodes, &pipeline::parse_patches(&text)?)?;
            }
            let kept = pipeline::downsample(episodes, *cap, seed)?;
            pipeline::write_jsonl(&kept, run.output(out)?)?;
            writeln!(stdout, "kept {} of {} episodes", kept.len(), raw.len())?;
            Ok(out.clone())
        }
        Command::GenPlans { input, out } => {
            let episodes = read_episodes(run, input)?;
            let (plans, dropped) = derive_plan_dataset(&episodes);
            pipeline::write_jsonl(&plans, run.output(out)?)?;
            writeln!(stdout, "wrote {} plan examples, dropped {dropped}", plans.len())?;
            Ok(out.clone())
        }
        Command::TrainBc {
            input,
            steps,
            model,
            config,
            metrics,
            out,
        } => {
            let cfg = load_config(run, config, seed)?;
            let episodes = read_episodes(run, input)?;
            if model == "baseline" {
                let baseline = MemorizingBaseline::fit(&episodes);
                run.write(out, baseline.to_json() + "\n")?;
                writeln!(stdout, "fit baseline with {} entries", baseline.entries.len())?;
                return Ok(out.clone());
            }
            let vocab = trainer::build_vocabulary(&episodes);
            let (examples, skipped) = trainer::build_examples(&episodes, &vocab, Ablation::None)?;
            let mut params = PolicyParams::init(seed);
            let mut adam = AdamState::new(param_count());
            let report = trainer::train_bc(&mut params, &mut adam, &examples, *steps, &cfg, seed)?;
            let accuracy = trainer::action_accuracy(&params, &vocab, &examples);
            let policy = LearnedPolicy::new(params, vocab, "policy");
            policy.save(out)?;
            run.outputs.push(out.clone());
            run.outputs.push(crate::agent::vocab_path(out));
            if let Some(m) = metrics {
                let mut rows: Vec<trainer::MetricRow> = report
                    .losses
                    .iter()
                    .enumerate()
                    .map(|(i, &l)| trainer::MetricRow {
                        phase: 0,
                        step: i,
                        loss: Some(l),
                        accuracy: None,
                    })
                    .collect();
                rows.push(trainer::MetricRow {
                    phase: 0,
                    step: report.losses.len(),
                    loss: None,
                    accuracy: Some(accuracy),
                });
                trainer::write_metrics_csv(&rows, run.output(m)?)?;
            }
            writeln!(
                stdout,
                "trained on {} examples ({skipped} episodes skipped); action accuracy {accuracy:.4}",
                examples.len()
            )?;
            Ok(out.clone())
        }
        Command::TrainRl {
            demos,
            init,
            tasks,
            schedule,
            ref_mode,
            eval_episodes,
            config,
            metrics,
            out,
        } => {
            let cfg = load_config(run, config, seed)?;
            let episodes = read_episodes(run, demos)?;
            let (mut params, vocab) = match init {
                Some(p) => {
                    let policy = LearnedPolicy::load(p).map_err(|e| CliError::Data(format!("{}: {e}", p.display())))?;
                    run.inputs.push(p.clone());
                    run.inputs.push(crate::agent::vocab_path(p));
                    (policy.params, policy.vocab)
                }
                None => (PolicyParams::init(seed), trainer::build_vocabulary(&episodes)),
            };
            let eval = EvalSpec {
                tasks: tasks.0.clone(),
                episodes_per_task: *eval_episodes,
                seed: seed.wrapping_add(1_000_000),
                ref_mode: *ref_mode,
            };
            let report =
                trainer::run_alternating(&mut params, &vocab, &tasks.0, *ref_mode, &episodes, &cfg, &schedule.0, &eval)?;
            trainer::write_metrics_csv(&report.rows, run.output(metrics)?)?;
            let policy = LearnedPolicy::new(params, vocab, "policy");
            policy.save(out)?;
            run.outputs.push(out.clone());
            run.outputs.push(crate::agent::vocab_path(out));
            for p in &report.phases {
                writeln!(
                    stdout,
                    "phase {}: accuracy {:.4}, online successes {}/{}, updates {}",
                    p.phase, p.eval_accuracy, p.online_successes, p.online_episodes, p.vmpo_updates
                )?;
            }
            Ok(out.clone())
        }
        Command::Evaluate {
            eval,
            ablation,
            json,
            out,
        } => {
            let policy = load_policy(run, &eval.policy, seed)?;
            let report =
                eval::evaluate_accuracy(policy.as_ref(), &eval.tasks.0, eval.episodes, seed, eval.ref_mode, *ablation)?;
            eval::write_report_csv(std::slice::from_ref(&report), run.output(out)?)?;
            if let Some(j) = json {
                write_reports_json(run, j, std::slice::from_ref(&report))?;
            }
            writeln!(stdout, "average accuracy {:.4}", report.average)?;
            Ok(out.clone())
        }
        Command::Attack {
            ordered,
            randomized,
            tasks,
            episodes,
            bc_steps,
            config,
            out,
        } => {
            let cfg = load_config(run, config, seed)?;
            let train_o = read_episodes(run, ordered)?;
            let train_r = read_episodes(run, randomized)?;
            let attack = AttackConfig {
                tasks: tasks.0.clone(),
                episodes_per_task: *episodes,
                eval_seed: seed,
                bc_steps: *bc_steps,
                train: cfg,
            };
            let reports = eval::run_ref_attack(&train_o, &train_r, &attack)?;
            let records: Vec<_> = reports.iter().flat_map(|r| r.records()).collect();
            let mut text = serde_json::to_string_pretty(&records)?;
            text.push('\n');
            run.write(out, text)?;
            for r in &reports {
                writeln!(
                    stdout,
                    "{} trained on {}: ordered {:.4}, randomized {:.4}, drop {:.4}",
                    r.policy, r.trained_on, r.accuracy_ordered_test, r.accuracy_randomized_test, r.drop
                )?;
            }
            Ok(out.clone())
        }
        Command::Ablate {
            eval,
            modes,
            table,
            json,
            out,
        } => {
            let policy = load_policy(run, &eval.policy, seed)?;
            let reports =
                eval::run_ablation(policy.as_ref(), &modes.0, &eval.tasks.0, eval.episodes, seed, eval.ref_mode)?;
            eval::write_report_csv(&reports, run.output(out)?)?;
            if let Some(t) = table {
                run.write(t, eval::render_table(&reports))?;
            }
            if let Some(j) = json {
                write_reports_json(run, j, &reports)?;
            }
            write!(stdout, "{}", eval::render_table(&reports))?;
            Ok(out.clone())
        }
        Command::Report { inputs, table, out } => {
            let mut reports: Vec<EvalReport> = Vec::new();
            for p in inputs {
                let text = run.read_to_string(p)?;
                let parsed: Vec<EvalReport> =
                    serde_json::from_str(&text).map_err(|e| CliError::Data(format!("{}: {e}", p.display())))?;
                reports.extend(parsed);
            }
            eval::write_report_csv(&reports, run.output(out)?)?;
            run.write(table, eval::render_table(&reports))?;
            writeln!(stdout, "merged {} reports", reports.len())?;
            Ok(out.clone())
        }
        Command::Stats { input, out } => {
            let episodes = read_episodes(run, input)?;
            let stats = pipeline::dataset_stats(&episodes);
            pipeline::write_stats_csv(&stats, run.output(out)?)?;
            writeln!(stdout, "{} tasks, {:.2} episodes per task", stats.per_task_counts.len(), stats.mean_per_task)?;
            Ok(out.clone())
        }
    }
}

fn command_name(c: &Command) -> &'static str {
    match c {
        Command::GenDemos { .. } => "gen-demos",
        Command::Process { .. } => "process",
        Command::GenPlans { .. } => "gen-plans",
        Command::TrainBc { .. } => "train-bc",
        Command::TrainRl { .. } => "train-rl",
        Command::Evaluate { .. } => "evaluate",
        Command::Attack { .. } => "attack",
        Command::Ablate { .. } => "ablate",
        Command::Report { .. } => "report",
        Command::Stats { .. } => "stats",
    }
}

fn run_parsed(cli: &Cli, flags: &[String], stdout: &mut dyn Write) -> Result<(), CliError> {
    let mut run = Run {
        inputs: Vec::new(),
        outputs: Vec::new(),
    };
    let out = execute(cli, &mut run, stdout)?;
    let digests = |paths: &[PathBuf]| -> Result<BTreeMap<String, String>, CliError> {
        paths
            .iter()
            .map(|p| Ok((p.display().to_string(), sha256_file(p)?)))
            .collect()
    };
    let manifest = Manifest {
        command: command_name(&cli.command),
        flags,
        seed: cli.seed,
        inputs: digests(&run.inputs)?,
        outputs: digests(&run.outputs)?,
        created_unix: SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0),
    };
    let mut text = serde_json::to_string_pretty(&manifest)?;
    text.push('\n');
    let path = manifest_path(&out);
    fs::write(&path, text).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    Ok(())
}

/// Parses `args` (including the program name), runs the command and
/// returns the process exit code. Diagnostics go to `stderr`.
pub fn run<I, T>(args: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let args: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let text = if e.use_stderr() { e.render().to_string() } else { e.to_string() };
            let sink: &mut dyn Write = if e.use_stderr() { stderr } else { stdout };
            let _ = write!(sink, "{text}");
            return code;
        }
    };
    let flags: Vec<String> = args.iter().skip(1).map(|a| a.to_string_lossy().into_owned()).collect();
    let pool = match rayon::ThreadPoolBuilder::new().num_threads(cli.jobs).build() {
        Ok(p) => p,
        Err(e) => {
            let _ = writeln!(stderr, "error: cannot start worker pool: {e}");
            return EXIT_DATA;
        }
    };
    let mut buffered = Vec::new();
    let result = pool.install(|| run_parsed(&cli, &flags, &mut buffered));
    let _ = stdout.write_all(&buffered);
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let _ = writeln!(stderr, "error: {e}");
            e.exit_code()
        }
    }
}
