//! Command-line entry points.
//!
//! Configuration is one flat JSON object. Training keys sit at the top level
//! (`"k"`, `"lr"`, ...), exactly as they are echoed into checkpoints; scene,
//! dataset and path keys carry a dotted prefix (`"scene.n_points"`,
//! `"data.trajectories"`, `"paths.out"`). Precedence is defaults, then the
//! file, then flags.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::data::{generate_dataset, read_dataset, write_dataset, write_meta, DatasetMeta, SceneConfig};
use crate::dynamics::IdmInput;
use crate::error::{Error, Result};
use crate::eval::{embedding_csv, run_probe, write_report};
use crate::gradsuite::{run_suite, POINTS_PER_OP, TOLERANCE};
use crate::objective::ObjectiveKind;
use crate::trainer::{load_checkpoint, train, TrainConfig, TrainState};

pub const EXIT_CONFIG: u8 = 2;
pub const EXIT_NUMERICAL: u8 = 3;
pub const EXIT_IO: u8 = 4;

pub const THREADS_ENV: &str = "LATENT_DYN_THREADS";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataGenConfig {
    pub trajectories: usize,
    pub seed: u64,
}

impl Default for DataGenConfig {
    fn default() -> Self {
        Self {
            trajectories: 200,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub ckpt: Option<PathBuf>,
    pub report: Option<PathBuf>,
}

/// Everything a subcommand may read, fully resolved.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct CliConfig {
    pub train: TrainConfig,
    pub scene: SceneConfig,
    pub data: DataGenConfig,
    pub paths: PathsConfig,
}

const SECTIONS: [&str; 3] = ["scene", "data", "paths"];

fn flatten_into(prefix: &str, v: &Value, out: &mut Map<String, Value>) {
    match v {
        Value::Object(m) if !m.is_empty() => {
            for (k, x) in m {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten_into(&key, x, out);
            }
        }
        _ => {
            out.insert(prefix.to_string(), v.clone());
        }
    }
}

fn insert_dotted(root: &mut Map<String, Value>, key: &str, v: Value) {
    match key.split_once('.') {
        None => {
            root.insert(key.to_string(), v);
        }
        Some((head, rest)) => {
            let child = root.entry(head.to_string()).or_insert_with(|| Value::Object(Map::new()));
            if !child.is_object() {
                *child = Value::Object(Map::new());
            }
            insert_dotted(child.as_object_mut().unwrap(), rest, v);
        }
    }
}

impl CliConfig {
    /// The flat key → value view used for files, flags and echoes.
    pub fn to_flat(&self) -> Result<Map<String, Value>> {
        let mut out = Map::new();
        flatten_into("", &serde_json::to_value(&self.train)?, &mut out);
        flatten_into("scene", &serde_json::to_value(&self.scene)?, &mut out);
        flatten_into("data", &serde_json::to_value(&self.data)?, &mut out);
        flatten_into("paths", &serde_json::to_value(&self.paths)?, &mut out);
        Ok(out)
    }

    pub fn from_flat(flat: &Map<String, Value>) -> Result<Self> {
        let mut train = Map::new();
        let mut sections: Map<String, Value> = SECTIONS.iter().map(|s| (s.to_string(), Value::Object(Map::new()))).collect();
        for (k, v) in flat {
            match k.split_once('.') {
                Some((head, rest)) if SECTIONS.contains(&head) => {
                    insert_dotted(sections[head].as_object_mut().unwrap(), rest, v.clone())
                }
                _ => insert_dotted(&mut train, k, v.clone()),
            }
        }
        let section = |name: &str| sections[name].clone();
        Ok(Self {
            train: serde_json::from_value(Value::Object(train)).map_err(|e| Error::Config(format!("training keys: {e}")))?,
            scene: serde_json::from_value(section("scene")).map_err(|e| Error::Config(format!("scene keys: {e}")))?,
            data: serde_json::from_value(section("data")).map_err(|e| Error::Config(format!("data keys: {e}")))?,
            paths: serde_json::from_value(section("paths")).map_err(|e| Error::Config(format!("paths keys: {e}")))?,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.scene.validate()
    }

    fn require(&self, path: &Option<PathBuf>, key: &str, flag: &str) -> Result<PathBuf> {
        path.clone()
            .ok_or_else(|| Error::Config(format!("missing required path {key} (pass {flag} or set it in the config)")))
    }
}

fn kind(v: &Value) -> &'static str {
    match v {
        Value::Null => "null",
        Value::Bool(_) => "boolean",
        Value::Number(n) if n.is_u64() => "unsigned integer",
        Value::Number(n) if n.is_i64() => "integer",
        Value::Number(_) => "number",
        Value::String(_) => "string",
        Value::Array(_) => "array",
        Value::Object(_) => "object",
    }
}

/// Type of `v` is acceptable where `default` sits.
fn compatible(default: &Value, v: &Value) -> bool {
    match (default, v) {
        (Value::Null, Value::Null | Value::String(_)) => true,
        (Value::Number(d), Value::Number(x)) => {
            if d.is_u64() {
                x.is_u64()
            } else if d.is_i64() {
                x.is_i64()
            } else {
                true
            }
        }
        (Value::Bool(_), Value::Bool(_)) | (Value::String(_), Value::String(_)) => true,
        (Value::Array(d), Value::Array(x)) => {
            d.len() == x.len() && d.iter().zip(x).all(|(a, b)| compatible(a, b))
        }
        _ => false,
    }
}

fn overlay(base: &mut Map<String, Value>, key: &str, v: Value, origin: &str) -> Result<()> {
    let Some(default) = base.get(key) else {
        return Err(Error::Config(format!("unknown config key \"{key}\" in {origin}")));
    };
    if !compatible(default, &v) {
        return Err(Error::Config(format!(
            "config key \"{key}\" in {origin} expects {}, got {}",
            kind(default),
            kind(&v)
        )));
    }
    base.insert(key.to_string(), v);
    Ok(())
}

/// Resolves `base`, then the JSON file at `path`, then `overrides`.
pub fn parse_config(base: &CliConfig, path: Option<&Path>, overrides: &[(String, Value)]) -> Result<CliConfig> {
    let mut flat = base.to_flat()?;
    if let Some(p) = path {
        let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
        let v: Value = serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
        let Value::Object(obj) = v else {
            return Err(Error::Config(format!("{}: top level must be a JSON object", p.display())));
        };
        let origin = p.display().to_string();
        let mut file_flat = Map::new();
        for (k, v) in &obj {
            flatten_into(k, v, &mut file_flat);
        }
        for (k, v) in file_flat {
            overlay(&mut flat, &k, v, &origin)?;
        }
    }
    for (k, v) in overrides {
        overlay(&mut flat, k, v.clone(), "command-line flags")?;
    }
    let cfg = CliConfig::from_flat(&flat)?;
    cfg.validate()?;
    Ok(cfg)
}

/// Parses `KEY=VALUE`; the value is read as JSON when it parses, else as a string.
pub fn parse_assignment(s: &str) -> std::result::Result<(String, Value), String> {
    let (k, v) = s.split_once('=').ok_or_else(|| format!("expected KEY=VALUE, got {s:?}"))?;
    let v = serde_json::from_str(v).unwrap_or_else(|_| Value::String(v.to_string()));
    Ok((k.trim().to_string(), v))
}

#[derive(Debug, Parser)]
#[command(name = "latent-dyn", version, about = "Action-free latent-dynamics pre-training for point-cloud encoders")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic trajectory dataset.
    GenData(GenDataArgs),
    /// Pre-train the encoder and dynamics models.
    Pretrain(PretrainArgs),
    /// Linear probe of latent actions against ground-truth pushes.
    Probe(ProbeArgs),
    /// Export a 2-D PCA embedding of pooled teacher features as CSV.
    Embed(EmbedArgs),
    /// Run the finite-difference gradient suite.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// JSON config file with flat dotted keys.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override any config key, e.g. `--set scene.n_points=1024`.
    #[arg(long = "set", value_name = "KEY=VALUE", value_parser = parse_assignment)]
    pub set: Vec<(String, Value)>,
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[command(flatten)]
    pub cfg: ConfigArgs,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub trajectories: Option<usize>,
}

#[derive(Debug, Args)]
pub struct PretrainArgs {
    #[command(flatten)]
    pub cfg: ConfigArgs,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Start from the desk-scale preset instead of the full-length defaults.
    #[arg(long)]
    pub desk: bool,
    /// Drop the predict-history branch.
    #[arg(long)]
    pub no_history: bool,
    #[arg(long)]
    pub idm_input: Option<IdmInput>,
    #[arg(long)]
    pub objective: Option<ObjectiveKind>,
    /// Frame interval k.
    #[arg(long)]
    pub interval: Option<usize>,
    #[arg(long)]
    pub d_act: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Continue from a checkpoint written at an epoch boundary.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ProbeArgs {
    #[command(flatten)]
    pub cfg: ConfigArgs,
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EmbedArgs {
    #[command(flatten)]
    pub cfg: ConfigArgs,
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Random points for each full-loss check.
    #[arg(long, default_value_t = POINTS_PER_OP)]
    pub loss_points: usize,
}

fn json<T: Serialize>(v: T) -> Value {
    serde_json::to_value(v).expect("plain data serializes")
}

fn path_value(p: &Path) -> Value {
    Value::String(p.display().to_string())
}

fn resolve(base: CliConfig, args: &ConfigArgs, mut flags: Vec<(String, Value)>) -> Result<CliConfig> {
    let mut all = args.set.clone();
    all.append(&mut flags);
    let cfg = parse_config(&base, args.config.as_deref(), &all)?;
    println!("{}", serde_json::to_string_pretty(&Value::Object(cfg.to_flat()?))?);
    Ok(cfg)
}

fn gen_data(a: &GenDataArgs) -> Result<()> {
    let mut flags = Vec::new();
    if let Some(p) = &a.out {
        flags.push(("paths.out".into(), path_value(p)));
    }
    if let Some(s) = a.seed {
        flags.push(("data.seed".into(), json(s)));
    }
    if let Some(n) = a.trajectories {
        flags.push(("data.trajectories".into(), json(n)));
    }
    let cfg = resolve(CliConfig::default(), &a.cfg, flags)?;
    let out = cfg.require(&cfg.paths.out, "paths.out", "--out")?;
    if cfg.data.trajectories == 0 {
        return Err(Error::Config("data.trajectories must be at least 1".into()));
    }
    let trajs = generate_dataset(&cfg.scene, cfg.data.trajectories, cfg.data.seed)?;
    write_dataset(&trajs, &out)?;
    write_meta(
        &out,
        &DatasetMeta {
            generator: cfg.scene.clone(),
            global_seed: cfg.data.seed,
            n_trajectories: trajs.len(),
        },
    )?;
    log::info!("wrote {} trajectories to {}", trajs.len(), out.display());
    Ok(())
}

fn pretrain(a: &PretrainArgs) -> Result<()> {
    let mut flags = Vec::new();
    if let Some(p) = &a.data {
        flags.push(("paths.data".into(), path_value(p)));
    }
    if let Some(p) = &a.out {
        flags.push(("paths.out".into(), path_value(p)));
    }
    if a.no_history {
        flags.push(("no_history".into(), Value::Bool(true)));
    }
    if let Some(v) = a.idm_input {
        flags.push(("idm_input".into(), json(v)));
    }
    if let Some(v) = a.objective {
        flags.push(("objective".into(), json(v)));
    }
    if let Some(v) = a.interval {
        flags.push(("k".into(), json(v)));
    }
    if let Some(v) = a.d_act {
        flags.push(("d_act".into(), json(v)));
    }
    if let Some(v) = a.epochs {
        flags.push(("epochs".into(), json(v)));
    }
    if let Some(v) = a.seed {
        flags.push(("seed".into(), json(v)));
    }
    let base = CliConfig {
        train: if a.desk { TrainConfig::desk() } else { TrainConfig::default() },
        ..Default::default()
    };
    let cfg = resolve(base, &a.cfg, flags)?;
    let data = cfg.require(&cfg.paths.data, "paths.data", "--data")?;
    let out = cfg.require(&cfg.paths.out, "paths.out", "--out")?;
    let trajs = read_dataset(&data)?;

    let state = match &a.resume {
        Some(p) => {
            let state = load_checkpoint(p)?;
            let same = TrainConfig {
                epochs: cfg.train.epochs,
                ..state.config.clone()
            };
            if same != cfg.train {
                return Err(Error::Config(format!(
                    "{} was trained with a different configuration; only epochs may change on resume",
                    p.display()
                )));
            }
            TrainState {
                config: cfg.train.clone(),
                ..state
            }
        }
        None => TrainState::new(cfg.train.clone())?,
    };
    fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    let echo = out.join("config.json");
    fs::write(&echo, serde_json::to_string_pretty(&Value::Object(cfg.to_flat()?))?).map_err(|e| Error::io(&echo, e))?;
    let state = train(state, &trajs, &out)?;
    log::info!("finished at step {}; checkpoints in {}", state.step, out.display());
    Ok(())
}

fn probe(a: &ProbeArgs) -> Result<()> {
    let mut flags = Vec::new();
    for (key, v) in [("paths.ckpt", &a.ckpt), ("paths.data", &a.data), ("paths.report", &a.report)] {
        if let Some(p) = v {
            flags.push((key.to_string(), path_value(p)));
        }
    }
    let cfg = resolve(CliConfig::default(), &a.cfg, flags)?;
    let ckpt = cfg.require(&cfg.paths.ckpt, "paths.ckpt", "--ckpt")?;
    let data = cfg.require(&cfg.paths.data, "paths.data", "--data")?;
    let state = load_checkpoint(&ckpt)?;
    let trajs = read_dataset(&data)?;
    let report = run_probe(&state.models, &state.config, &trajs)?;
    if let Some(p) = &cfg.paths.report {
        write_report(&report, p)?;
    }
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

fn embed(a: &EmbedArgs) -> Result<()> {
    let mut flags = Vec::new();
    for (key, v) in [("paths.ckpt", &a.ckpt), ("paths.data", &a.data), ("paths.out", &a.out)] {
        if let Some(p) = v {
            flags.push((key.to_string(), path_value(p)));
        }
    }
    let cfg = resolve(CliConfig::default(), &a.cfg, flags)?;
    let ckpt = cfg.require(&cfg.paths.ckpt, "paths.ckpt", "--ckpt")?;
    let data = cfg.require(&cfg.paths.data, "paths.data", "--data")?;
    let out = cfg.require(&cfg.paths.out, "paths.out", "--out")?;
    let state = load_checkpoint(&ckpt)?;
    let trajs = read_dataset(&data)?;
    let csv = embedding_csv(&state.models, &trajs)?;
    fs::write(&out, csv).map_err(|e| Error::io(&out, e))
}

/// Returns whether every check passed.
fn gradcheck(a: &GradcheckArgs) -> Result<bool> {
    let results = run_suite(a.seed, a.loss_points)?;
    let mut ok = true;
    for r in &results {
        let status = if r.passed() { "ok" } else { "FAIL" };
        ok &= r.passed();
        println!(
            "{status:<4} {:<38} points {:>3}  max rel err {:.3e}  ({:.2}s)",
            r.name, r.points, r.max_rel_err, r.seconds
        );
    }
    println!(
        "{} of {} checks within {TOLERANCE:e}",
        results.iter().filter(|r| r.passed()).count(),
        results.len()
    );
    Ok(ok)
}

/// Exit status for an error: 2 configuration, 3 numerical, 4 I/O.
pub fn exit_code(e: &Error) -> u8 {
    match e {
        Error::NonFinite { .. } => EXIT_NUMERICAL,
        Error::Io { .. }
        | Error::BadMagic { .. }
        | Error::Version { .. }
        | Error::Truncated(_)
        | Error::Malformed(_) => EXIT_IO,
        _ => EXIT_CONFIG,
    }
}

fn configure_threads() -> Result<()> {
    let Ok(v) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::Config(format!("{THREADS_ENV} must be a positive integer, got {v:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))
}

pub fn run(cli: Cli) -> ExitCode {
    let result = configure_threads().and_then(|()| match &cli.command {
        Command::GenData(a) => gen_data(a).map(|()| true),
        Command::Pretrain(a) => pretrain(a).map(|()| true),
        Command::Probe(a) => probe(a).map(|()| true),
        Command::Embed(a) => embed(a).map(|()| true),
        Command::Gradcheck(a) => gradcheck(a),
    });
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(EXIT_NUMERICAL),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
