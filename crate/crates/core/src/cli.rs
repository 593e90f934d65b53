//! Command-line entry points: expert generation, rollout batches and reports.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use log::info;
use serde::{Deserialize, Serialize};

use crate::admittance::AdmittanceGains;
use crate::error::{Error, Result};
use crate::memory::ExpertDataset;
use crate::robot::RobotModel;
use crate::rollout::{
    evaluate, generate_expert_dataset, task_object, Arm, ArmSummary, ControlParams, EvalSpec, EvalSummary, ExpertGenSpec,
    TrialRun, DEFAULT_EPISODES, DEFAULT_MAX_ITER, DEFAULT_TRIALS,
};
use crate::sim::{Featurizer, ObjectParamsOverride, TaskId, FEATURE_DIM, INIT_POSITION_NOISE, INIT_ROTATION_NOISE};
use crate::wbc::WbcConfig;

pub const CONFIG_VERSION: u32 = 1;
pub const DEFAULT_FEATURIZER_SEED: u64 = 1;
pub const SUMMARY_FILE: &str = "summary.json";
pub const TRACE_DIR: &str = "traces";

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_IO: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "visforce", version, about = "Visual-force imitation with admittance whole-body control")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Record scripted demonstrations and write a resampled dataset (JSON Lines).
    ExpertGen(ExpertGenArgs),
    /// Run a batch of rollouts described by a TOML config.
    Rollout {
        /// Run config file.
        #[arg(long)]
        config: PathBuf,
    },
    /// Aggregate rollout summaries into CSV and JSON metric tables.
    Report {
        /// Directory holding one or more run directories (or a run directory itself).
        #[arg(long)]
        runs: PathBuf,
        /// Output path prefix; `.csv` and `.json` are appended.
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, clap::Args)]
pub struct ExpertGenArgs {
    /// Task to record; repeat for several. Defaults to every built-in task.
    #[arg(long = "task")]
    pub tasks: Vec<TaskId>,
    #[arg(long, default_value_t = DEFAULT_EPISODES)]
    pub episodes: usize,
    #[arg(long)]
    pub out: PathBuf,
    /// Seeds the episode start states; rollouts with the same init seed start from the same states.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = DEFAULT_FEATURIZER_SEED)]
    pub featurizer_seed: u64,
    #[arg(long, default_value_t = FEATURE_DIM)]
    pub feature_dim: usize,
}

/// Version header of a run config, read before the full schema.
#[derive(Deserialize)]
struct VersionHeader {
    version: Option<u32>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub version: u32,
    pub paths: PathsConfig,
    #[serde(default)]
    pub run: RunSection,
    #[serde(default)]
    pub seeds: SeedsConfig,
    #[serde(default)]
    pub featurizer: FeaturizerConfig,
    #[serde(default)]
    pub init: InitConfig,
    #[serde(default = "default_arms")]
    pub arms: Vec<Arm>,
    #[serde(default)]
    pub wbc: WbcConfig,
    #[serde(default)]
    pub gains: AdmittanceGains,
    #[serde(default)]
    pub objects: BTreeMap<TaskId, ObjectParamsOverride>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathsConfig {
    pub dataset: PathBuf,
    pub out_dir: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunSection {
    pub tasks: Vec<TaskId>,
    pub trials: usize,
    pub max_iter: usize,
    /// Restrict retrieval to frames of the rollout's task.
    pub task_filter: bool,
}

impl Default for RunSection {
    fn default() -> Self {
        RunSection {
            tasks: TaskId::ALL.to_vec(),
            trials: DEFAULT_TRIALS,
            max_iter: DEFAULT_MAX_ITER,
            task_filter: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SeedsConfig {
    pub featurizer: u64,
    pub init: u64,
    pub noise: u64,
}

impl Default for SeedsConfig {
    fn default() -> Self {
        SeedsConfig {
            featurizer: DEFAULT_FEATURIZER_SEED,
            init: 0,
            noise: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FeaturizerConfig {
    pub dim: usize,
    pub noise_std: f64,
}

impl Default for FeaturizerConfig {
    fn default() -> Self {
        FeaturizerConfig {
            dim: FEATURE_DIM,
            noise_std: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InitConfig {
    pub position_noise: f64,
    pub rotation_noise: f64,
}

impl Default for InitConfig {
    fn default() -> Self {
        InitConfig {
            position_noise: INIT_POSITION_NOISE,
            rotation_noise: INIT_ROTATION_NOISE,
        }
    }
}

fn default_arms() -> Vec<Arm> {
    vec![Arm {
        admittance: true,
        rotation: true,
    }]
}

impl RunConfig {
    /// Parses and validates a config. Relative paths stay relative to the
    /// process working directory.
    pub fn parse(text: &str, source: &str) -> Result<Self> {
        let header: VersionHeader =
            toml::from_str(text).map_err(|e| Error::Config(format!("{source}: {}", e.to_string().trim_end())))?;
        match header.version {
            Some(CONFIG_VERSION) => {}
            Some(v) => {
                return Err(Error::Config(format!(
                    "{source}: unsupported config version {v} (expected {CONFIG_VERSION})"
                )))
            }
            None => return Err(Error::Config(format!("{source}: missing `version = {CONFIG_VERSION}` header"))),
        }
        let cfg: RunConfig =
            toml::from_str(text).map_err(|e| Error::Config(format!("{source}: {}", e.to_string().trim_end())))?;
        cfg.validate(source)?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        RunConfig::parse(&text, &path.display().to_string())
    }

    fn validate(&self, source: &str) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(format!("{source}: {msg}")));
        if self.run.tasks.is_empty() {
            return bad("run.tasks is empty".into());
        }
        if self.run.trials == 0 || self.run.max_iter == 0 {
            return bad("run.trials and run.max_iter must be positive".into());
        }
        if self.arms.is_empty() {
            return bad("at least one [[arms]] entry is required".into());
        }
        let mut labels = std::collections::BTreeSet::new();
        for arm in &self.arms {
            if !labels.insert(arm.label()) {
                return bad(format!("duplicate arm {}", arm.label()));
            }
        }
        if self.featurizer.dim == 0 {
            return bad("featurizer.dim must be positive".into());
        }
        let nonneg = [
            ("featurizer.noise_std", self.featurizer.noise_std),
            ("init.position_noise", self.init.position_noise),
            ("init.rotation_noise", self.init.rotation_noise),
        ];
        for (name, v) in nonneg {
            if !(v.is_finite() && v >= 0.0) {
                return bad(format!("{name} must be non-negative, got {v}"));
            }
        }
        if !self.gains.is_valid() {
            return bad("gains must be finite and non-negative".into());
        }
        self.wbc
            .validate(&RobotModel::default())
            .or_else(|e| bad(format!("wbc: {e}")))?;
        for task in self.objects.keys() {
            task_object(*task, &self.objects)
                .params
                .validate()
                .or_else(|e| bad(format!("objects.{task}: {e}")))?;
        }
        Ok(())
    }

    pub fn eval_spec(&self) -> EvalSpec {
        EvalSpec {
            tasks: self.run.tasks.clone(),
            trials: self.run.trials,
            arms: self.arms.clone(),
            init_seed: self.seeds.init,
            noise_seed: self.seeds.noise,
            noise_std: self.featurizer.noise_std,
            init_position_noise: self.init.position_noise,
            init_rotation_noise: self.init.rotation_noise,
            max_iter: self.run.max_iter,
            task_filter: self.run.task_filter,
            params: ControlParams {
                wbc: self.wbc,
                gains: self.gains,
            },
            objects: self.objects.clone(),
        }
    }
}

/// Exit code for an error: I/O failures are 2, everything else is a usage or input error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Io { .. } => EXIT_IO,
        _ => EXIT_USAGE,
    }
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::ExpertGen(args) => cmd_expert_gen(&args),
        Command::Rollout { config } => cmd_rollout(&config).map(|_| ()),
        Command::Report { runs, out } => cmd_report(&runs, &out),
    }
}

pub fn cmd_expert_gen(args: &ExpertGenArgs) -> Result<()> {
    if args.feature_dim == 0 {
        return Err(Error::InvalidArgument("--feature-dim must be positive".into()));
    }
    let tasks = if args.tasks.is_empty() {
        TaskId::ALL.to_vec()
    } else {
        args.tasks.clone()
    };
    let spec = ExpertGenSpec {
        tasks,
        episodes: args.episodes,
        init_seed: args.seed,
        ..ExpertGenSpec::default()
    };
    let model = RobotModel::default();
    let featurizer = Featurizer::new(args.featurizer_seed, args.feature_dim);
    let ds = generate_expert_dataset(&spec, &model, &featurizer)?;
    create_parent(&args.out)?;
    ds.save(&args.out)?;
    info!(
        "wrote {} frames in {} trajectories to {}",
        ds.len(),
        ds.trajectory_count(),
        args.out.display()
    );
    Ok(())
}

/// Runs the batch described by `config_path` and writes the summary and traces.
pub fn cmd_rollout(config_path: &Path) -> Result<EvalSummary> {
    let cfg = RunConfig::load(config_path)?;
    let ds = ExpertDataset::load(&cfg.paths.dataset)?;
    if ds.embedding_dim() != cfg.featurizer.dim {
        return Err(Error::Config(format!(
            "{}: featurizer.dim = {} but the dataset embeddings have {} components",
            config_path.display(),
            cfg.featurizer.dim,
            ds.embedding_dim()
        )));
    }
    let model = RobotModel::default();
    let featurizer = Featurizer::new(cfg.seeds.featurizer, cfg.featurizer.dim);
    let (summary, runs) = evaluate(&cfg.eval_spec(), &ds, &model, &featurizer)?;

    let out = &cfg.paths.out_dir;
    let traces = out.join(TRACE_DIR);
    fs::create_dir_all(&traces).map_err(|e| Error::io(&traces, e))?;
    for r in &runs {
        write_trace(&traces, r)?;
    }
    let path = out.join(SUMMARY_FILE);
    write_json(&path, &summary)?;
    info!("wrote {} traces and {}", runs.len(), path.display());
    Ok(summary)
}

pub fn trace_file_name(r: &TrialRun) -> String {
    format!("{}_{}_{}.jsonl", r.arm.label(), r.task, r.summary.trial)
}

fn write_trace(dir: &Path, r: &TrialRun) -> Result<()> {
    let path = dir.join(trace_file_name(r));
    let file = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    let mut w = BufWriter::new(file);
    for tick in &r.trace {
        serde_json::to_writer(&mut w, tick)?;
        w.write_all(b"\n").map_err(|e| Error::io(&path, e))?;
    }
    w.flush().map_err(|e| Error::io(&path, e))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn create_parent(path: &Path) -> Result<()> {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => fs::create_dir_all(p).map_err(|e| Error::io(p, e)),
        _ => Ok(()),
    }
}

/// Summary files under `runs`: the directory's own summary, or one per subdirectory.
pub fn find_summaries(runs: &Path) -> Result<Vec<(String, PathBuf)>> {
    let own = runs.join(SUMMARY_FILE);
    if own.is_file() {
        let name = runs
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| ".".into());
        return Ok(vec![(name, own)]);
    }
    let entries = fs::read_dir(runs).map_err(|e| Error::io(runs, e))?;
    let mut found = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(runs, e))?;
        let path = entry.path().join(SUMMARY_FILE);
        if path.is_file() {
            found.push((entry.file_name().to_string_lossy().into_owned(), path));
        }
    }
    found.sort();
    if found.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "no {SUMMARY_FILE} found in {}",
            runs.display()
        )));
    }
    Ok(found)
}

const AXES: [&str; 6] = ["mx", "my", "mz", "fx", "fy", "fz"];

/// One CSV row: a task of an arm of a run.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricRow {
    pub run: String,
    pub arm: String,
    pub task: String,
    pub trials: usize,
    pub successes: usize,
    pub success_rate: f64,
    pub grasped_trials: usize,
    pub mean_abs: [f64; 6],
    pub variance: [f64; 6],
}

/// Per-arm report: success table by task and task-averaged wrench metrics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArmReport {
    pub success_rate: BTreeMap<String, f64>,
    pub mean_success_rate: f64,
    pub grasped_trials: usize,
    pub mean_abs: BTreeMap<String, f64>,
    pub variance: BTreeMap<String, f64>,
}

pub fn metric_rows(run: &str, summary: &EvalSummary) -> Vec<MetricRow> {
    let mut rows = Vec::new();
    for (label, arm) in &summary.arms {
        for (task, t) in &arm.tasks {
            rows.push(MetricRow {
                run: run.to_string(),
                arm: label.clone(),
                task: task.clone(),
                trials: t.trials,
                successes: t.successes,
                success_rate: t.success_rate,
                grasped_trials: t.wrench.trials,
                mean_abs: t.wrench.mean_abs,
                variance: t.wrench.variance,
            });
        }
    }
    rows
}

pub fn arm_report(arm: &ArmSummary) -> ArmReport {
    let by_axis = |v: &[f64; 6]| AXES.iter().zip(v).map(|(a, x)| (a.to_string(), *x)).collect();
    ArmReport {
        success_rate: arm.tasks.iter().map(|(t, s)| (t.clone(), s.success_rate)).collect(),
        mean_success_rate: arm.mean_success_rate,
        grasped_trials: arm.wrench.trials,
        mean_abs: by_axis(&arm.wrench.mean_abs),
        variance: by_axis(&arm.wrench.variance),
    }
}

pub fn cmd_report(runs: &Path, out: &Path) -> Result<()> {
    let summaries = find_summaries(runs)?;
    let mut rows = Vec::new();
    let mut json: BTreeMap<String, BTreeMap<String, ArmReport>> = BTreeMap::new();
    for (name, path) in &summaries {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let summary: EvalSummary = serde_json::from_str(&text).map_err(|e| Error::Dataset {
            path: path.display().to_string(),
            line: e.line(),
            reason: e.to_string(),
        })?;
        rows.extend(metric_rows(name, &summary));
        json.insert(
            name.clone(),
            summary.arms.iter().map(|(l, a)| (l.clone(), arm_report(a))).collect(),
        );
    }
    create_parent(out)?;
    let csv_path = with_suffix(out, "csv");
    write_csv(&csv_path, &rows)?;
    write_json(&with_suffix(out, "json"), &json)?;
    info!("wrote {} rows to {}", rows.len(), csv_path.display());
    Ok(())
}

fn with_suffix(prefix: &Path, ext: &str) -> PathBuf {
    let mut s = prefix.as_os_str().to_owned();
    s.push(".");
    s.push(ext);
    PathBuf::from(s)
}

fn write_csv(path: &Path, rows: &[MetricRow]) -> Result<()> {
    let io = |e: csv::Error| match e.into_kind() {
        csv::ErrorKind::Io(e) => Error::io(path, e),
        other => Error::InvalidArgument(format!("{}: {other:?}", path.display())),
    };
    let mut w = csv::Writer::from_path(path).map_err(io)?;
    let mut header: Vec<String> = ["run", "arm", "task", "trials", "successes", "success_rate", "grasped_trials"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    header.extend(AXES.iter().map(|a| format!("mean_abs_{a}")));
    header.extend(AXES.iter().map(|a| format!("var_{a}")));
    w.write_record(&header).map_err(io)?;
    for r in rows {
        let mut rec = vec![
            r.run.clone(),
            r.arm.clone(),
            r.task.clone(),
            r.trials.to_string(),
            r.successes.to_string(),
            r.success_rate.to_string(),
            r.grasped_trials.to_string(),
        ];
        rec.extend(r.mean_abs.iter().map(|v| v.to_string()));
        rec.extend(r.variance.iter().map(|v| v.to_string()));
        w.write_record(&rec).map_err(io)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = "version = 1\n[paths]\ndataset = \"d.jsonl\"\nout_dir = \"out\"\n";

    #[test]
    fn minimal_config_takes_defaults() {
        let cfg = RunConfig::parse(MINIMAL, "run.toml").unwrap();
        assert_eq!(cfg.run, RunSection::default());
        assert_eq!(cfg.arms, default_arms());
        assert_eq!(cfg.wbc, WbcConfig::default());
    }

    #[test]
    fn unknown_key_is_rejected_with_line() {
        let text = format!("{MINIMAL}[run]\ntrials = 3\ntrails = 4\n");
        let err = RunConfig::parse(&text, "run.toml").unwrap_err().to_string();
        assert!(err.contains("trails"), "{err}");
        assert!(err.contains("line 7"), "{err}");
    }

    #[test]
    fn version_header_is_required() {
        let text = MINIMAL.replace("version = 1\n", "");
        assert!(RunConfig::parse(&text, "x").unwrap_err().to_string().contains("version"));
        let text = MINIMAL.replace("version = 1", "version = 2");
        assert!(RunConfig::parse(&text, "x").unwrap_err().to_string().contains("unsupported"));
    }

    #[test]
    fn overrides_reach_the_eval_spec() {
        let text = format!(
            "{MINIMAL}[featurizer]\nnoise_std = 0.1\n[wbc]\nmanip_gain = 0.0\n[gains]\nintegral_clamp = 5.0\n\
             [objects.drawer]\nstiffness = 2000.0\n[[arms]]\nadmittance = false\nrotation = true\n"
        );
        let spec = RunConfig::parse(&text, "x").unwrap().eval_spec();
        assert_eq!(spec.noise_std, 0.1);
        assert_eq!(spec.params.wbc.manip_gain, 0.0);
        assert_eq!(spec.params.gains.integral_clamp, 5.0);
        assert_eq!(spec.objects[&TaskId::Drawer].stiffness, Some(2000.0));
        assert_eq!(spec.arms.len(), 1);
        assert!(!spec.arms[0].admittance);
    }

    #[test]
    fn invalid_values_are_rejected() {
        for extra in [
            "[run]\ntrials = 0\n",
            "[featurizer]\nnoise_std = -1.0\n",
            "[objects.tap]\nstiffness = 0.0\n",
            "[run]\ntasks = [\"sink\"]\n",
            "[[arms]]\nadmittance = true\nrotation = true\n[[arms]]\nadmittance = true\nrotation = true\n",
        ] {
            let text = format!("{MINIMAL}{extra}");
            assert!(RunConfig::parse(&text, "x").is_err(), "{extra}");
        }
    }

    #[test]
    fn exit_codes_split_io_from_usage() {
        let io = Error::io(Path::new("x"), std::io::Error::other("boom"));
        assert_eq!(exit_code(&io), EXIT_IO);
        assert_eq!(exit_code(&Error::Config("bad".into())), EXIT_USAGE);
    }
}
