//! `hpstudy`: run configured convergence studies and write CSV/markdown
//! reports.
//!
//! Exit codes: 0 all experiments passed, 1 at least one failed, 2 on a
//! configuration error. Set `HPSTUDY_WORKERS` to cap the thread pool.

use clap::{Parser, Subcommand};
use hpclement::study::{
    self, ExperimentConfig, ExperimentKind, OperatorChoice, SobolevTargets, ALL_KINDS,
};
use serde::Deserialize;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "hpstudy", about = "hp smoothing/interpolation convergence studies")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the experiments in a config file and write reports.
    Run { config: PathBuf },
    /// List the available experiment kinds.
    ListExperiments,
    /// Parse and validate a config file without running anything.
    Validate { config: PathBuf },
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ConfigFile {
    #[serde(default)]
    output_dir: Option<PathBuf>,
    experiment: Vec<ExperimentSection>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ExperimentSection {
    kind: String,
    #[serde(default)]
    name: Option<String>,
    #[serde(default = "default_dim")]
    dim: usize,
    #[serde(default = "default_levels")]
    levels: Vec<usize>,
    #[serde(default = "default_degrees")]
    degrees: Vec<usize>,
    #[serde(default = "default_k_max")]
    k_max: usize,
    #[serde(default)]
    s: f64,
    #[serde(default = "default_two")]
    p: f64,
    #[serde(default = "default_two")]
    q: f64,
    #[serde(default = "default_two")]
    r: f64,
    #[serde(default)]
    mu: f64,
    #[serde(default)]
    seed: u64,
    #[serde(default)]
    operator: Option<String>,
}

fn default_dim() -> usize {
    1
}
fn default_levels() -> Vec<usize> {
    vec![2, 3]
}
fn default_degrees() -> Vec<usize> {
    vec![1]
}
fn default_k_max() -> usize {
    1
}
fn default_two() -> f64 {
    2.0
}

impl ExperimentSection {
    fn build(&self) -> Result<ExperimentConfig, String> {
        let kind = ExperimentKind::parse(&self.kind).map_err(|e| e.to_string())?;
        let operator = match self.operator.as_deref() {
            None | Some("smoothing") => OperatorChoice::Smoothing,
            Some("quasi_interpolant") => OperatorChoice::QuasiInterpolant,
            Some(other) => return Err(format!("unknown operator '{other}'")),
        };
        let cfg = ExperimentConfig {
            kind,
            dim: self.dim,
            levels: self.levels.clone(),
            degrees: self.degrees.clone(),
            k_max: self.k_max,
            targets: SobolevTargets {
                s: self.s,
                p: self.p,
                q: self.q,
                r: self.r,
                mu: self.mu,
            },
            seed: self.seed,
            operator,
        };
        study::validate(&cfg).map_err(|e| e.to_string())?;
        Ok(cfg)
    }

    fn label(&self, i: usize) -> String {
        self.name.clone().unwrap_or_else(|| format!("{}_{i}", self.kind))
    }
}

fn load(path: &Path) -> Result<ConfigFile, String> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| format!("cannot read {}: {e}", path.display()))?;
    toml::from_str(&text).map_err(|e| format!("config parse error: {e}"))
}

fn apply_worker_override() {
    if let Ok(v) = std::env::var("HPSTUDY_WORKERS") {
        match v.parse::<usize>() {
            Ok(n) if n >= 1 => {
                let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
            }
            _ => eprintln!("ignoring invalid HPSTUDY_WORKERS={v}"),
        }
    }
}

fn run_all(path: &Path) -> ExitCode {
    let file = match load(path) {
        Ok(f) => f,
        Err(e) => {
            eprintln!("{e}");
            return ExitCode::from(2);
        }
    };
    let out_dir = file
        .output_dir
        .clone()
        .unwrap_or_else(|| path.parent().unwrap_or(Path::new(".")).to_path_buf());
    if let Err(e) = std::fs::create_dir_all(&out_dir) {
        eprintln!("cannot create {}: {e}", out_dir.display());
        return ExitCode::from(2);
    }
    let mut configs = Vec::new();
    for (i, sec) in file.experiment.iter().enumerate() {
        match sec.build() {
            Ok(cfg) => configs.push((sec.label(i), cfg)),
            Err(e) => {
                eprintln!("experiment {}: {e}", sec.label(i));
                return ExitCode::from(2);
            }
        }
    }
    let mut summary = String::from("# hpstudy report\n");
    let mut all_pass = true;
    for (label, cfg) in &configs {
        let report = match study::run(cfg) {
            Ok(r) => r,
            Err(e) => {
                eprintln!("experiment {label} failed to run: {e}");
                return ExitCode::from(1);
            }
        };
        let csv_path = out_dir.join(format!("{label}.csv"));
        if let Err(e) = std::fs::write(&csv_path, report.csv()) {
            eprintln!("cannot write {}: {e}", csv_path.display());
            return ExitCode::from(1);
        }
        summary.push_str("\n");
        summary.push_str(&report.markdown());
        all_pass &= report.pass;
        println!("{label}: {}", if report.pass { "pass" } else { "FAIL" });
    }
    let md_path = out_dir.join("summary.md");
    if let Err(e) = std::fs::write(&md_path, summary) {
        eprintln!("cannot write {}: {e}", md_path.display());
        return ExitCode::from(1);
    }
    if all_pass {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(1)
    }
}

fn main() -> ExitCode {
    apply_worker_override();
    let cli = Cli::parse();
    match cli.command {
        Command::Run { config } => run_all(&config),
        Command::ListExperiments => {
            for k in ALL_KINDS {
                println!("{}", k.name());
            }
            ExitCode::SUCCESS
        }
        Command::Validate { config } => match load(&config) {
            Ok(file) => {
                for (i, sec) in file.experiment.iter().enumerate() {
                    if let Err(e) = sec.build() {
                        eprintln!("experiment {}: {e}", sec.label(i));
                        return ExitCode::from(2);
                    }
                }
                println!("ok: {} experiment(s)", file.experiment.len());
                ExitCode::SUCCESS
            }
            Err(e) => {
                eprintln!("{e}");
                ExitCode::from(2)
            }
        },
    }
}
