//! Command-line dispatcher: reads a JSON plan, applies `--set` overrides,
//! runs the requested study and writes its artifacts.
//!
//! Exit codes: 0 success, 1 failed run or failed verdict, 2 configuration
//! error.

use std::ffi::OsString;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde_json::{json, Value};

use crate::constants::table_constants;
use crate::dynamics::run_cbo;
use crate::error::CboError;
use crate::experiments::{self, reference_c_lap, ExperimentKind, ExperimentOutput, ExperimentPlan};
use crate::meanfield::{flow_to_csv, integrate_mean_flow, meanfield_particle_variance};

#[derive(Debug, Parser)]
#[command(
    name = "cbo",
    version,
    about = "Clipped consensus-based optimization experiments"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// JSON plan file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    /// Override a plan entry by dotted key, e.g. `base_cfg.alpha=300`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Worker threads. Results do not depend on this.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Replaces `base_cfg.seed` (and shifts explicit replicate seeds).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// One particle run: run.csv and summary.json.
    Run,
    /// Gaussian mean flow and mean-field particle variances.
    Meanfield,
    /// Laplace gap sweep.
    Laplace,
    /// Propagation-of-chaos sweep over n.
    Poc,
    /// Discretization gap sweep over eta0.
    Euler,
    /// Constants of the convergence bounds.
    Constants,
    Theorem1,
    Theorem2,
    Theorem3,
    Blockcheck,
}

impl Command {
    fn name(self) -> &'static str {
        match self {
            Command::Run => "run",
            Command::Meanfield => "meanfield",
            Command::Laplace => "laplace",
            Command::Poc => "poc",
            Command::Euler => "euler",
            Command::Constants => "constants",
            Command::Theorem1 => "theorem1",
            Command::Theorem2 => "theorem2",
            Command::Theorem3 => "theorem3",
            Command::Blockcheck => "blockcheck",
        }
    }

    fn experiment(self) -> Option<ExperimentKind> {
        match self {
            Command::Laplace => Some(ExperimentKind::LaplaceSweep),
            Command::Poc => Some(ExperimentKind::PocSweep),
            Command::Euler => Some(ExperimentKind::EulerSweep),
            Command::Theorem1 => Some(ExperimentKind::Theorem1Rate),
            Command::Theorem2 => Some(ExperimentKind::Theorem2Scaling),
            Command::Theorem3 => Some(ExperimentKind::Theorem3Best),
            Command::Blockcheck => Some(ExperimentKind::BlockCheck),
            _ => None,
        }
    }
}

#[derive(Debug)]
pub enum HarnessError {
    Config(String),
    Run(String),
}

impl HarnessError {
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Config(_) => 2,
            HarnessError::Run(_) => 1,
        }
    }
}

impl fmt::Display for HarnessError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            HarnessError::Config(m) => write!(f, "config error: {m}"),
            HarnessError::Run(m) => write!(f, "run failed: {m}"),
        }
    }
}

fn run_err(e: CboError) -> HarnessError {
    HarnessError::Run(e.to_string())
}

fn io_err(path: &Path, e: std::io::Error) -> HarnessError {
    HarnessError::Run(format!("{}: {e}", path.display()))
}

fn parse_at_path<T: DeserializeOwned>(value: Value) -> Result<T, HarnessError> {
    serde_path_to_error::deserialize(value).map_err(|e| {
        let path = e.path().to_string();
        HarnessError::Config(format!("at `{path}`: {}", e.into_inner()))
    })
}

/// Parse a plan from JSON text, reporting the key path of any error.
pub fn parse_plan(text: &str) -> Result<ExperimentPlan, HarnessError> {
    let de = &mut serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        HarnessError::Config(format!("at `{path}`: {}", e.into_inner()))
    })
}

/// Apply `key=value` overrides with dotted keys. Values are parsed as JSON
/// when possible and taken as strings otherwise. The parent of each key
/// must exist; unknown leaf names are rejected when the plan is re-parsed.
pub fn apply_overrides(
    plan: &ExperimentPlan,
    overrides: &[String],
) -> Result<ExperimentPlan, HarnessError> {
    if overrides.is_empty() {
        return Ok(plan.clone());
    }
    let mut root = serde_json::to_value(plan).expect("plan serializes");
    for item in overrides {
        let (key, raw) = item
            .split_once('=')
            .ok_or_else(|| HarnessError::Config(format!("override `{item}` is not KEY=VALUE")))?;
        let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
        let parts: Vec<&str> = key.split('.').collect();
        let (leaf, parents) = parts.split_last().expect("split yields at least one part");
        let mut node = &mut root;
        for (depth, p) in parents.iter().enumerate() {
            node = match node {
                Value::Object(map) => map.get_mut(*p),
                Value::Array(items) => p.parse::<usize>().ok().and_then(|i| items.get_mut(i)),
                _ => None,
            }
            .ok_or_else(|| {
                HarnessError::Config(format!(
                    "override key `{}` does not exist",
                    parts[..=depth].join(".")
                ))
            })?;
        }
        match node {
            Value::Object(map) => {
                map.insert(leaf.to_string(), value);
            }
            Value::Array(items) => {
                let slot = leaf
                    .parse::<usize>()
                    .ok()
                    .and_then(|i| items.get_mut(i))
                    .ok_or_else(|| {
                        HarnessError::Config(format!("override key `{key}` does not exist"))
                    })?;
                *slot = value;
            }
            _ => {
                return Err(HarnessError::Config(format!(
                    "override key `{key}` does not exist"
                )))
            }
        }
    }
    parse_at_path(root)
}

pub fn load_plan(
    path: &Path,
    overrides: &[String],
    seed: Option<u64>,
) -> Result<ExperimentPlan, HarnessError> {
    let text = fs::read_to_string(path)
        .map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))?;
    let mut plan = apply_overrides(&parse_plan(&text)?, overrides)?;
    if let Some(s) = seed {
        plan.base_cfg.seed = s;
        let k = plan.seeds.len() as u64;
        plan.seeds = (0..k).map(|r| s.wrapping_add(r)).collect();
    }
    plan.validate()
        .map_err(|e| HarnessError::Config(e.to_string()))?;
    Ok(plan)
}

struct Outcome {
    pass: Option<bool>,
    headline: String,
    result: Value,
    files: Vec<(String, String)>,
}

fn dispatch(command: Command, plan: &ExperimentPlan) -> Result<Outcome, HarnessError> {
    let spec = plan
        .spec()
        .map_err(|e| HarnessError::Config(e.to_string()))?;
    let cfg = &plan.base_cfg;
    if let Some(kind) = command.experiment() {
        let plan = ExperimentPlan {
            kind: Some(kind),
            ..plan.clone()
        };
        let ExperimentOutput { verdict, artifacts } = experiments::run(&plan).map_err(run_err)?;
        let mut files = artifacts;
        files.push((
            "verdict.json".into(),
            serde_json::to_string_pretty(&verdict).expect("verdict serializes") + "\n",
        ));
        return Ok(Outcome {
            pass: Some(verdict.pass),
            headline: if verdict.pass {
                "PASS".into()
            } else {
                "FAIL".into()
            },
            result: serde_json::to_value(&verdict).expect("verdict serializes"),
            files,
        });
    }
    match command {
        Command::Run => {
            let record = run_cbo(cfg, &spec, plan.record_every.unwrap_or(1)).map_err(run_err)?;
            let last = record.last();
            Ok(Outcome {
                pass: None,
                headline: format!("terminal mse {} at k = {}", last.mse, last.k),
                result: json!({ "run": record.summary(), "flags": cfg.flags(&spec) }),
                files: vec![("run.csv".into(), record.to_csv())],
            })
        }
        Command::Meanfield => {
            let t_end = plan.horizon.unwrap_or(5.0);
            let h = plan.step.unwrap_or(0.01);
            let flow = integrate_mean_flow(&spec, cfg, t_end, h).map_err(run_err)?;
            let times: Vec<f64> = [0.5, 1.0, 2.0, 5.0]
                .into_iter()
                .filter(|t| *t <= t_end)
                .collect();
            let variances = if times.is_empty() {
                Vec::new()
            } else {
                meanfield_particle_variance(&spec, cfg, &times, h).map_err(run_err)?
            };
            let last = flow.last().expect("flow holds at least two states");
            Ok(Outcome {
                pass: None,
                headline: format!("m_T = {:?} at T = {}", last.m_t, last.t),
                result: json!({ "terminal": last, "variance_law": variances }),
                files: vec![("flow.csv".into(), flow_to_csv(&flow))],
            })
        }
        Command::Constants => {
            let c_lap = match plan.c_lap {
                Some(c) => c,
                None => reference_c_lap().map_err(run_err)?,
            };
            let report = table_constants(&spec, cfg, c_lap).map_err(run_err)?;
            let text = serde_json::to_string_pretty(&report).expect("report serializes") + "\n";
            Ok(Outcome {
                pass: None,
                headline: format!("c_lap = {c_lap}"),
                result: json!({ "c_lap": c_lap }),
                files: vec![("constants.json".into(), text)],
            })
        }
        _ => unreachable!("experiment commands handled above"),
    }
}

/// Run one command; returns the exit code.
pub fn execute(cli: &Cli) -> Result<i32, HarnessError> {
    let config = cli
        .config
        .as_deref()
        .ok_or_else(|| HarnessError::Config("--config is required".into()))?;
    let plan = load_plan(config, &cli.set, cli.seed)?;
    let outcome = match cli.threads {
        Some(0) => return Err(HarnessError::Config("--threads must be at least 1".into())),
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| HarnessError::Run(e.to_string()))?
            .install(|| dispatch(cli.command, &plan))?,
        None => dispatch(cli.command, &plan)?,
    };

    fs::create_dir_all(&cli.out).map_err(|e| io_err(&cli.out, e))?;
    let mut paths = Vec::new();
    for (name, contents) in &outcome.files {
        let p = cli.out.join(name);
        fs::write(&p, contents).map_err(|e| io_err(&p, e))?;
        paths.push(p.display().to_string());
    }
    let summary = json!({
        "command": cli.command.name(),
        "plan": plan,
        "overrides": cli.set,
        "seed_override": cli.seed,
        "pass": outcome.pass,
        "result": outcome.result,
        "artifacts": outcome.files.iter().map(|f| &f.0).collect::<Vec<_>>(),
    });
    let p = cli.out.join("summary.json");
    fs::write(
        &p,
        serde_json::to_string_pretty(&summary).expect("summary serializes") + "\n",
    )
    .map_err(|e| io_err(&p, e))?;
    paths.push(p.display().to_string());

    println!(
        "{}: {} -> {}",
        cli.command.name(),
        outcome.headline,
        paths.join(", ")
    );
    Ok(match outcome.pass {
        Some(false) => 1,
        _ => 0,
    })
}

/// Parse arguments and run; never panics on user error.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match execute(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("{}: {e}", cli.command.name());
            e.exit_code()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const PLAN: &str = r#"{
        "objective": {"name": "quadratic"},
        "base_cfg": {
            "dim": 1, "n_particles": 20, "alpha": 100.0, "gamma": 4.0,
            "clip_radius": 10.0, "eta0": 1.0, "zeta": 0.5, "sigma0_sq": 0.04,
            "m0": [1.0], "seed": 7, "max_iter": 50
        }
    }"#;

    #[test]
    fn malformed_json_names_the_key() {
        let bad = PLAN.replace("\"alpha\": 100.0", "\"alpha\": \"big\"");
        match parse_plan(&bad) {
            Err(HarnessError::Config(m)) => assert!(m.contains("base_cfg.alpha"), "{m}"),
            other => panic!("{other:?}"),
        }
        let missing = PLAN.replace("\"gamma\": 4.0,", "");
        match parse_plan(&missing) {
            Err(HarnessError::Config(m)) => assert!(m.contains("gamma"), "{m}"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn overrides_use_dotted_keys() {
        let plan = parse_plan(PLAN).unwrap();
        let p = apply_overrides(
            &plan,
            &[
                "base_cfg.alpha=300".into(),
                "horizon=2.5".into(),
                "base_cfg.m0.0=-1".into(),
            ],
        )
        .unwrap();
        assert_eq!(p.base_cfg.alpha, 300.0);
        assert_eq!(p.horizon, Some(2.5));
        assert_eq!(p.base_cfg.m0, vec![-1.0]);
        assert!(matches!(
            apply_overrides(&plan, &["base_cfg.alpah=1".into()]),
            Err(HarnessError::Config(m)) if m.contains("alpah")
        ));
        assert!(matches!(
            apply_overrides(&plan, &["nope.alpha=1".into()]),
            Err(HarnessError::Config(m)) if m.contains("nope")
        ));
        assert!(apply_overrides(&plan, &["base_cfg.alpha".into()]).is_err());
        let named = apply_overrides(&plan, &["objective.name=rastrigin".into()]).unwrap();
        assert_eq!(named.objective.name, "rastrigin");
    }

    #[test]
    fn exit_codes() {
        assert_eq!(HarnessError::Config(String::new()).exit_code(), 2);
        assert_eq!(HarnessError::Run(String::new()).exit_code(), 1);
        assert_eq!(main_with_args(["cbo", "frobnicate"]), 2);
        assert_eq!(main_with_args(["cbo", "run"]), 2);
        assert_eq!(
            main_with_args(["cbo", "run", "--config", "/nonexistent/plan.json"]),
            2
        );
    }
}
