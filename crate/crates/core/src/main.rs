use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use fedtune::data::{export, generate};
use fedtune::harness::config::{parse_with_overrides, ExperimentConfig, Issue, OcoConfig};
use fedtune::harness::{report, run_ablation, run_experiment, run_oco};

#[derive(Parser)]
#[command(name = "fedtune", version, about = "Federated hyperparameter tuning experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML configuration; defaults are used for anything it leaves out.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a field, e.g. `--set federation.clients=20`. Repeatable.
    #[arg(long = "set", value_name = "PATH=VALUE")]
    overrides: Vec<String>,
    /// Run these seeds instead of the configured list. Repeatable.
    #[arg(long = "seed")]
    seeds: Vec<u64>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Worker threads; 0 uses every core.
    #[arg(long, default_value_t = 0)]
    jobs: usize,
}

impl Common {
    fn overrides(&self, extra: Vec<String>) -> Vec<String> {
        let mut all = self.overrides.clone();
        if !self.seeds.is_empty() {
            all.push(format!("seeds={:?}", self.seeds));
        }
        if let Some(dir) = &self.out_dir {
            all.push(format!("output.dir={}", toml_string(&dir.to_string_lossy())));
        }
        all.extend(extra);
        all
    }

    fn text(&self) -> Result<String, Failure> {
        match &self.config {
            None => Ok(String::new()),
            Some(p) => fs::read_to_string(p).map_err(|e| Failure::Error(format!("{}: {e}", p.display()))),
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Run the configured tuner on every seed.
    Run {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        tuner: Option<String>,
        #[arg(long)]
        target: Option<String>,
    },
    /// Sweep FedEx's epsilon and step schedule or the elimination discount.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',')]
        epsilon: Vec<f64>,
        #[arg(long, value_delimiter = ',')]
        schedule: Vec<String>,
        #[arg(long, value_delimiter = ',')]
        discount: Vec<f64>,
    },
    /// Run the online-convex-optimization regret test-bed.
    Oco {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',')]
        tau: Vec<usize>,
        /// Step-size grid size; 0 derives it from the horizon.
        #[arg(long)]
        k: Option<usize>,
        #[arg(long, value_delimiter = ',')]
        mode: Vec<String>,
    },
    /// Check a configuration and list every problem.
    ValidateConfig {
        file: PathBuf,
        #[arg(long, value_enum, default_value_t = Kind::Experiment)]
        kind: Kind,
        #[arg(long = "set", value_name = "PATH=VALUE")]
        overrides: Vec<String>,
    },
    /// Write the generated federation of each seed as text.
    ExportFederation {
        #[command(flatten)]
        common: Common,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Kind {
    Experiment,
    Oco,
}

enum Failure {
    Invalid(Vec<Issue>),
    Error(String),
}

impl From<fedtune::Error> for Failure {
    fn from(e: fedtune::Error) -> Self {
        Failure::Error(e.to_string())
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Error(e.to_string())
    }
}

fn toml_string(s: &str) -> String {
    toml::Value::String(s.to_string()).to_string()
}

fn toml_list<T: ToString>(items: &[T], quote: bool) -> String {
    let inner: Vec<String> = items
        .iter()
        .map(|x| if quote { toml_string(&x.to_string()) } else { x.to_string() })
        .collect();
    format!("[{}]", inner.join(", "))
}

fn load_experiment(common: &Common, extra: Vec<String>) -> Result<ExperimentConfig, Failure> {
    let cfg: ExperimentConfig = parse_with_overrides(&common.text()?, &common.overrides(extra)).map_err(Failure::Invalid)?;
    let issues = cfg.issues();
    if issues.is_empty() {
        Ok(cfg)
    } else {
        Err(Failure::Invalid(issues))
    }
}

fn load_oco(text: &str, overrides: &[String]) -> Result<OcoConfig, Failure> {
    let cfg: OcoConfig = parse_with_overrides(text, overrides).map_err(Failure::Invalid)?;
    let issues = cfg.issues();
    if issues.is_empty() {
        Ok(cfg)
    } else {
        Err(Failure::Invalid(issues))
    }
}

fn with_pool<T: Send>(jobs: usize, f: impl FnOnce() -> T + Send) -> Result<T, Failure> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| Failure::Error(e.to_string()))?;
    Ok(pool.install(f))
}

fn files(dir: &Path, names: &[&str]) -> Vec<String> {
    names.iter().map(|n| dir.join(n).to_string_lossy().into_owned()).collect()
}

fn execute(cli: Cli) -> Result<serde_json::Value, Failure> {
    match cli.command {
        Command::Run { common, tuner, target } => {
            let mut extra = Vec::new();
            if let Some(t) = tuner {
                extra.push(format!("tuner={}", toml_string(&t)));
            }
            if let Some(t) = target {
                extra.push(format!("target={}", toml_string(&t)));
            }
            let cfg = load_experiment(&common, extra)?;
            let out = with_pool(common.jobs, || run_experiment(&cfg))??;
            let dir = PathBuf::from(&cfg.output.dir);
            report::write_experiment(&dir, &out, cfg.output.trace)?;
            let mut names = vec!["results.csv", "online.csv", "summary.txt"];
            if cfg.output.trace {
                names.push("trace.csv");
            }
            Ok(json!({"status": "ok", "command": "run", "trials": out.results.len(), "files": files(&dir, &names)}))
        }
        Command::Ablate {
            common,
            epsilon,
            schedule,
            discount,
        } => {
            let mut extra = Vec::new();
            if !epsilon.is_empty() {
                extra.push(format!("ablation.epsilon={}", toml_list(&epsilon, false)));
            }
            if !schedule.is_empty() {
                extra.push(format!("ablation.schedule={}", toml_list(&schedule, true)));
            }
            if !discount.is_empty() {
                extra.push(format!("ablation.discount={}", toml_list(&discount, false)));
            }
            let cfg = load_experiment(&common, extra)?;
            if cfg.ablation.is_empty() {
                return Err(Failure::Invalid(vec![Issue {
                    field: "ablation".into(),
                    message: "give at least one of --epsilon, --schedule or --discount".into(),
                }]));
            }
            let out = with_pool(common.jobs, || run_ablation(&cfg))??;
            let dir = PathBuf::from(&cfg.output.dir);
            report::write_ablation(&dir, &out, cfg.output.trace)?;
            let mut names = vec!["ablation.csv", "online.csv", "summary.txt"];
            if cfg.output.trace {
                names.push("trace.csv");
            }
            Ok(json!({
                "status": "ok",
                "command": "ablate",
                "variants": out.variants.len(),
                "trials": out.output.results.len(),
                "files": files(&dir, &names),
            }))
        }
        Command::Oco { common, tau, k, mode } => {
            let mut extra = Vec::new();
            if !tau.is_empty() {
                extra.push(format!("taus={}", toml_list(&tau, false)));
            }
            if let Some(k) = k {
                extra.push(format!("k={k}"));
            }
            if !mode.is_empty() {
                extra.push(format!("modes={}", toml_list(&mode, true)));
            }
            let cfg = load_oco(&common.text()?, &common.overrides(extra))?;
            let out = with_pool(common.jobs, || run_oco(&cfg))??;
            let dir = PathBuf::from(&cfg.output.dir);
            report::write_oco(&dir, &out)?;
            Ok(json!({
                "status": "ok",
                "command": "oco",
                "runs": out.runs.len(),
                "files": files(&dir, &["oco.csv", "oco_summary.csv", "oco_summary.txt"]),
            }))
        }
        Command::ValidateConfig { file, kind, overrides } => {
            let text = fs::read_to_string(&file).map_err(|e| Failure::Error(format!("{}: {e}", file.display())))?;
            match kind {
                Kind::Experiment => {
                    let cfg: ExperimentConfig = parse_with_overrides(&text, &overrides).map_err(Failure::Invalid)?;
                    let issues = cfg.issues();
                    if !issues.is_empty() {
                        return Err(Failure::Invalid(issues));
                    }
                    let schedule = cfg.schedule_for(cfg.tuner)?;
                    Ok(json!({
                        "status": "ok",
                        "kind": "experiment",
                        "tuner": cfg.tuner.as_str(),
                        "arms": schedule.initial_arms(),
                        "boundaries": schedule.boundaries,
                        "rounds": schedule.total_rounds(),
                    }))
                }
                Kind::Oco => {
                    load_oco(&text, &overrides)?;
                    Ok(json!({"status": "ok", "kind": "oco"}))
                }
            }
        }
        Command::ExportFederation { common } => {
            let cfg = load_experiment(&common, Vec::new())?;
            let dir = PathBuf::from(&cfg.output.dir);
            fs::create_dir_all(&dir)?;
            let mut written = Vec::new();
            for &seed in &cfg.seeds {
                let clients = generate(&cfg.federation, seed)?;
                let path = dir.join(format!("federation-{seed}.txt"));
                let mut w = BufWriter::new(File::create(&path)?);
                export(&clients, &mut w)?;
                written.push(path.to_string_lossy().into_owned());
            }
            Ok(json!({"status": "ok", "command": "export-federation", "files": written}))
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli) {
        Ok(report) => {
            println!("{report}");
            ExitCode::SUCCESS
        }
        Err(Failure::Invalid(issues)) => {
            println!("{}", json!({"status": "invalid", "errors": issues}));
            ExitCode::from(2)
        }
        Err(Failure::Error(message)) => {
            println!("{}", json!({"status": "error", "message": message}));
            ExitCode::from(1)
        }
    }
}
