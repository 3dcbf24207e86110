use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use neural_duel::harness::{
    aggregate, coverage_config, run_checks, run_experiment, write_outputs, ExperimentConfig,
};
use neural_duel::policy::PolicyKind;
use neural_duel::rng::seeded;
use serde_json::{Map, Value};

#[derive(Parser, Debug)]
#[command(name = "ndb", version, about = "Neural dueling bandit benchmarks")]
struct Cli {
    /// Worker threads for repetitions (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run one experiment and write its result files.
    Run {
        #[command(flatten)]
        config: ConfigArgs,
        /// Also write curves.svg.
        #[arg(long)]
        svg: bool,
    },
    /// Run a grid of experiments, one output subdirectory per point.
    Sweep {
        #[command(flatten)]
        config: ConfigArgs,
        /// Comma-separated values of nu.
        #[arg(long, value_delimiter = ',')]
        nu_grid: Vec<f64>,
        /// Comma-separated numbers of arms.
        #[arg(long = "K-list", alias = "k-list", value_delimiter = ',')]
        k_list: Vec<usize>,
        /// Comma-separated context dimensions.
        #[arg(long = "d-list", value_delimiter = ',')]
        d_list: Vec<usize>,
        /// Also write curves.svg per point.
        #[arg(long)]
        svg: bool,
    },
    /// Run the numerical self-checks and the coverage diagnostic.
    Check {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Skip the bandit run behind the coverage diagnostic.
        #[arg(long)]
        skip_coverage: bool,
        /// Rounds of the coverage run.
        #[arg(long = "T")]
        rounds: Option<usize>,
        #[arg(long)]
        nu: Option<f64>,
        #[arg(long)]
        reps: Option<usize>,
    },
}

/// Flags mirroring the experiment configuration. Unset flags fall back to
/// the config file, then to the defaults.
#[derive(Args, Debug, Default)]
struct ConfigArgs {
    /// JSON config file; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// ndb-ucb, ndb-ts, ncbf-ucb, ncbf-ts, lindb-ucb, lindb-ts, lincbf-ucb, lincbf-ts or random.
    #[arg(long, value_parser = parse_policy)]
    policy: Option<PolicyKind>,
    /// square, cosine or linear.
    #[arg(long)]
    function: Option<String>,
    #[arg(long)]
    function_scale: Option<f64>,
    /// inner or outer.
    #[arg(long)]
    cosine_placement: Option<String>,
    #[arg(long = "T")]
    rounds: Option<usize>,
    #[arg(long = "K")]
    arms: Option<usize>,
    #[arg(long = "d")]
    dim: Option<usize>,
    #[arg(long)]
    reps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    kappa_mu: Option<f64>,
    /// fixed or theoretical.
    #[arg(long)]
    nu_mode: Option<String>,
    #[arg(long)]
    nu: Option<f64>,
    #[arg(long = "B")]
    b: Option<f64>,
    #[arg(long)]
    delta: Option<f64>,
    #[arg(long, visible_alias = "m")]
    width: Option<usize>,
    #[arg(long, visible_alias = "L")]
    depth: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    grad_steps: Option<usize>,
    #[arg(long)]
    retrain_every: Option<usize>,
    /// practical or theoretical.
    #[arg(long)]
    regularizer: Option<String>,
    /// theta_t or theta_0.
    #[arg(long)]
    feature_anchor: Option<String>,
    /// unit or inv_sqrt_width.
    #[arg(long)]
    feature_scale: Option<String>,
    /// raw or theory.
    #[arg(long)]
    context_mode: Option<String>,
    /// auto, dense or low_rank.
    #[arg(long)]
    precision_backend: Option<String>,
    /// Record per-round diagnostics.
    #[arg(long)]
    diagnostics: bool,
    /// Output directory (default: $NDB_OUTPUT_DIR or ./ndb-output).
    #[arg(long, short)]
    output: Option<PathBuf>,
}

fn parse_policy(s: &str) -> std::result::Result<PolicyKind, String> {
    s.parse().map_err(|e: neural_duel::Error| e.to_string())
}

impl ConfigArgs {
    fn overrides(&self) -> Map<String, Value> {
        let mut m = Map::new();
        let mut put = |key: &str, v: Option<Value>| {
            if let Some(v) = v {
                m.insert(key.to_string(), v);
            }
        };
        put("policy", self.policy.map(|p| Value::from(p.token())));
        put("function", self.function.clone().map(Value::from));
        put("function_scale", self.function_scale.map(Value::from));
        put("cosine_placement", self.cosine_placement.clone().map(Value::from));
        put("T", self.rounds.map(Value::from));
        put("K", self.arms.map(Value::from));
        put("d", self.dim.map(Value::from));
        put("reps", self.reps.map(Value::from));
        put("seed", self.seed.map(Value::from));
        put("lambda", self.lambda.map(Value::from));
        put("kappa_mu", self.kappa_mu.map(Value::from));
        put("nu_mode", self.nu_mode.clone().map(Value::from));
        put("nu", self.nu.map(Value::from));
        put("B", self.b.map(Value::from));
        put("delta", self.delta.map(Value::from));
        put("width", self.width.map(Value::from));
        put("depth", self.depth.map(Value::from));
        put("learning_rate", self.learning_rate.map(Value::from));
        put("grad_steps", self.grad_steps.map(Value::from));
        put("retrain_every", self.retrain_every.map(Value::from));
        put("regularizer", self.regularizer.clone().map(Value::from));
        put("feature_anchor", self.feature_anchor.clone().map(Value::from));
        put("feature_scale", self.feature_scale.clone().map(Value::from));
        put("context_mode", self.context_mode.clone().map(Value::from));
        put(
            "precision_backend",
            self.precision_backend.clone().map(Value::from),
        );
        put("diagnostics", self.diagnostics.then_some(Value::from(true)));
        put(
            "output_path",
            self.output.as_ref().map(|p| Value::from(p.display().to_string())),
        );
        m
    }

    fn resolve(&self) -> Result<ExperimentConfig> {
        let mut base = match &self.config {
            Some(path) => {
                let text =
                    std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
                match serde_json::from_str::<Value>(&text)
                    .with_context(|| format!("parsing {}", path.display()))?
                {
                    Value::Object(m) => m,
                    _ => bail!("{}: config must be a JSON object", path.display()),
                }
            }
            None => Map::new(),
        };
        for (k, v) in self.overrides() {
            // Flags name the canonical keys; drop any alias spelling from the file.
            match k.as_str() {
                "width" => {
                    base.remove("m");
                }
                "depth" => {
                    base.remove("L");
                }
                _ => {}
            }
            base.insert(k, v);
        }
        let cfg = ExperimentConfig::from_json(&Value::Object(base).to_string())?;
        cfg.validate()?;
        Ok(cfg)
    }
}

fn run_one(cfg: &ExperimentConfig, dir: &Path, svg: bool) -> Result<(f64, f64, f64, f64)> {
    let result = run_experiment(cfg)?;
    let summary = aggregate(&result.traces())?;
    let files = write_outputs(&result, &summary, dir, svg)?;
    println!(
        "{} {} T={} K={} d={} nu={} reps={}: final avg regret {:.3} ± {:.3}, weak {:.3} ± {:.3} -> {}",
        cfg.policy,
        format!("{:?}", cfg.function).to_lowercase(),
        cfg.rounds,
        cfg.arms,
        cfg.dim,
        cfg.nu,
        cfg.reps,
        summary.average.final_mean(),
        summary.average.final_half_width(),
        summary.weak.final_mean(),
        summary.weak.final_half_width(),
        files.trace.parent().unwrap_or(dir).display()
    );
    Ok((
        summary.average.final_mean(),
        summary.average.final_half_width(),
        summary.weak.final_mean(),
        summary.weak.final_half_width(),
    ))
}

fn sweep(config: &ConfigArgs, nu_grid: &[f64], k_list: &[usize], d_list: &[usize], svg: bool) -> Result<()> {
    let base = config.resolve()?;
    let root = base.output_dir();
    let nus = if nu_grid.is_empty() {
        vec![base.nu]
    } else {
        nu_grid.to_vec()
    };
    let ks = if k_list.is_empty() {
        vec![base.arms]
    } else {
        k_list.to_vec()
    };
    let ds = if d_list.is_empty() {
        vec![base.dim]
    } else {
        d_list.to_vec()
    };

    let mut table =
        String::from("nu,K,d,final_avg_mean,final_avg_half_width,final_weak_mean,final_weak_half_width\n");
    let mut best: Option<(f64, String)> = None;
    for &k in &ks {
        for &d in &ds {
            for &nu in &nus {
                let name = format!("nu={nu}_K={k}_d={d}");
                let dir = root.join(&name);
                let cfg = ExperimentConfig {
                    nu,
                    arms: k,
                    dim: d,
                    output_path: Some(dir.clone()),
                    ..base.clone()
                };
                cfg.validate()?;
                let (am, ah, wm, wh) = run_one(&cfg, &dir, svg)?;
                writeln!(table, "{nu},{k},{d},{am},{ah},{wm},{wh}").expect("string write");
                if best.as_ref().is_none_or(|(b, _)| am < *b) {
                    best = Some((am, name));
                }
            }
        }
    }
    std::fs::create_dir_all(&root).with_context(|| format!("creating {}", root.display()))?;
    let path = root.join("sweep.csv");
    std::fs::write(&path, table).with_context(|| format!("writing {}", path.display()))?;
    if let Some((value, name)) = best {
        println!("lowest final avg regret: {name} ({value:.3})");
    }
    println!("wrote {}", path.display());
    Ok(())
}

fn check(
    seed: u64,
    skip_coverage: bool,
    rounds: Option<usize>,
    nu: Option<f64>,
    reps: Option<usize>,
) -> Result<bool> {
    let mut cov = coverage_config();
    cov.seed = seed;
    if let Some(t) = rounds {
        cov.rounds = t;
    }
    if let Some(nu) = nu {
        cov.nu = nu;
    }
    if let Some(r) = reps {
        cov.reps = r;
    }
    cov.validate()?;
    let outcomes = run_checks(&mut seeded(seed), (!skip_coverage).then_some(&cov))?;
    let mut all = true;
    for o in &outcomes {
        println!(
            "{} {:<28} {:.3e} (threshold {:.1e})",
            if o.passed { "PASS" } else { "FAIL" },
            o.name,
            o.value,
            o.threshold
        );
        all &= o.passed;
    }
    Ok(all)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::FAILURE;
        }
    }
    let outcome = match &cli.command {
        Command::Run { config, svg } => config
            .resolve()
            .and_then(|cfg| run_one(&cfg, &cfg.output_dir(), *svg).map(|_| true)),
        Command::Sweep {
            config,
            nu_grid,
            k_list,
            d_list,
            svg,
        } => sweep(config, nu_grid, k_list, d_list, *svg).map(|_| true),
        Command::Check {
            seed,
            skip_coverage,
            rounds,
            nu,
            reps,
        } => check(*seed, *skip_coverage, *rounds, *nu, *reps),
    };
    match outcome {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
