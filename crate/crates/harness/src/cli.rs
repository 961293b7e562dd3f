//! `romer-sim` command line.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use romer_core::io::{load_model, load_plan, load_tokens, save_model, save_plan, save_tokens};
use romer_core::moe::{Deployment, MoeModel};
use romer_core::profiler::{
    accumulate_activation, balance_report, export_count_heatmap, export_heatmap, read_heatmap,
};
use romer_core::romer::{apply_replacement, build_replacement_plan};

use crate::ablation::ablation_grid;
use crate::config::ExperimentConfig;
use crate::generate::{generate_corpus, generate_model, Geometry, ModelSpec};
use crate::oracle::permutation_oracle;
use crate::pipeline::{execute, sweep_cells, trial_seeds, with_pool, ArtifactDir, Cell, Workload, METRIC_NOTE};
use crate::selftest;
use crate::toylm::{evaluate_toy, train_toy, ToySpec};

#[derive(Debug, Parser)]
#[command(
    name = "romer-sim",
    version,
    about = "Noisy analog MoE inference simulator with training-free router calibration",
    arg_required_else_help = true
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args, Clone)]
struct Common {
    /// Experiment configuration (TOML); the shipped default when omitted.
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Master seed, overriding experiment.seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output file or directory.
    #[arg(long, value_name = "PATH")]
    out: Option<PathBuf>,
    /// Set a configuration value, e.g. `noise.sigma=0.05`. Repeatable.
    #[arg(long = "override", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl Common {
    fn load(&self) -> Result<ExperimentConfig> {
        let mut overrides = self.overrides.clone();
        if let Some(s) = self.seed {
            overrides.push(format!("experiment.seed={s}"));
        }
        ExperimentConfig::load(self.config.as_deref(), &overrides)
    }

    fn out_or(&self, default: &str) -> PathBuf {
        self.out.clone().unwrap_or_else(|| PathBuf::from(default))
    }
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write the configured synthetic model to a JSON file.
    GenerateModel {
        #[command(flatten)]
        common: Common,
    },
    /// Write the configured token corpus to a JSON file.
    GenerateCorpus {
        #[command(flatten)]
        common: Common,
    },
    /// Profile expert activation and write heatmaps and a balance report.
    Profile {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "FILE")]
        model: Option<PathBuf>,
        #[arg(long, value_name = "FILE")]
        tokens: Option<PathBuf>,
        /// Profile a noisy deployment at this device sigma instead.
        #[arg(long)]
        sigma: Option<f64>,
    },
    /// Build a replacement plan from an activation heatmap.
    Plan {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "FILE")]
        heatmap: PathBuf,
        /// Experts replaced per layer; calibration.n when omitted.
        #[arg(long)]
        n: Option<usize>,
    },
    /// Copy top-set experts over their bottom-set partners.
    Apply {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "FILE")]
        model: PathBuf,
        #[arg(long, value_name = "FILE")]
        plan: PathBuf,
    },
    /// Clean, vanilla and calibrated runs at one noise level.
    Run {
        #[command(flatten)]
        common: Common,
    },
    /// Runs across the temperature profile.
    Sweep {
        #[command(flatten)]
        common: Common,
    },
    /// Replacement-count and calibration-strength ablation grid.
    Ablate {
        #[command(flatten)]
        common: Common,
    },
    /// Rank the heuristic plan among all replacement plans.
    Oracle {
        #[command(flatten)]
        common: Common,
    },
    /// Train the toy language model and compare perplexity under noise.
    TrainToy {
        /// Output directory.
        #[arg(long, value_name = "DIR", default_value = "out/toy")]
        out: PathBuf,
        /// Training seed.
        #[arg(long, default_value_t = 11)]
        seed: u64,
        #[arg(long, default_value_t = 0.1)]
        sigma: f64,
        /// Noise draws averaged per method.
        #[arg(long, default_value_t = 5)]
        draws: usize,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Fast invariant checks.
    Selftest,
}

/// Parses `args` (program name first) and runs the command. Returns the
/// process exit code.
pub fn cli_main<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            1
        }
    }
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::GenerateModel { common } => {
            let cfg = common.load()?;
            let model = generate_model(&cfg.model, &cfg.geometry)?;
            let out = common.out_or("model.json");
            save_model(&model, &out)?;
            println!("wrote {}", out.display());
        }
        Command::GenerateCorpus { common } => {
            let cfg = common.load()?;
            let corpus = generate_corpus(&cfg.corpus, &cfg.geometry, cfg.model.hidden_dim);
            let out = common.out_or("tokens.json");
            save_tokens(&corpus.tokens, &out)?;
            println!("wrote {} tokens to {}", corpus.tokens.len(), out.display());
        }
        Command::Profile {
            common,
            model,
            tokens,
            sigma,
        } => profile(&common, model.as_deref(), tokens.as_deref(), sigma)?,
        Command::Plan { common, heatmap, n } => {
            let cfg = common.load()?;
            let map = read_heatmap(&heatmap)?;
            let plan = build_replacement_plan(&map, n.unwrap_or(cfg.calibration.n))?;
            let out = common.out_or("plan.json");
            save_plan(&plan, &out)?;
            println!("wrote {}", out.display());
        }
        Command::Apply { common, model, plan } => {
            let m = load_model(&model)?;
            let p = load_plan(&plan)?;
            let patched = apply_replacement(&m, &p)?;
            let out = common.out_or("patched_model.json");
            save_model(&patched, &out)?;
            println!("wrote {}", out.display());
        }
        Command::Run { common } => {
            let cfg = common.load()?;
            let (sigma, temp_c) = cfg.run_cell()?;
            let out = common.out_or("out/run");
            let (result, _) = execute(&cfg, &[Cell { sigma, temp_c }], &out, "run")?;
            print_summary(&result);
            println!("artifacts in {}", out.display());
        }
        Command::Sweep { common } => {
            let cfg = common.load()?;
            let cells = sweep_cells(&cfg)?;
            let out = common.out_or("out/sweep");
            let (result, _) = execute(&cfg, &cells, &out, "sweep")?;
            print_summary(&result);
            println!("artifacts in {}", out.display());
        }
        Command::Ablate { common } => {
            let cfg = common.load()?;
            let out = common.out_or("out/ablate");
            let table = run_ablation(&cfg, &out)?;
            print!("{}", table.to_text());
            println!("artifacts in {}", out.display());
        }
        Command::Oracle { common } => {
            let cfg = common.load()?;
            let out = common.out_or("out/oracle");
            let text = run_oracle(&cfg, &out)?;
            print!("{text}");
            println!("artifacts in {}", out.display());
        }
        Command::TrainToy {
            out,
            seed,
            sigma,
            draws,
            epochs,
        } => {
            let mut spec = ToySpec {
                seed,
                ..ToySpec::default()
            };
            if let Some(e) = epochs {
                spec.epochs = e;
            }
            let text = run_train_toy(&spec, sigma, draws, &out)?;
            print!("{text}");
            println!("artifacts in {}", out.display());
        }
        Command::Selftest => {
            let failures = selftest::run(&mut std::io::stdout())?;
            if failures > 0 {
                anyhow::bail!("{failures} selftest check(s) failed");
            }
        }
    }
    Ok(())
}

fn print_summary(result: &crate::pipeline::SweepResult) {
    for r in result.rows.iter().filter(|r| r.is_summary()) {
        println!(
            "sigma={:<6} {:<16} mse={:.4e} divergence={:.4e} entropy={:.4} underact={:.4}",
            r.sigma, r.method, r.mse, r.divergence, r.mean_entropy, r.underact_frac
        );
    }
}

fn profile(common: &Common, model: Option<&Path>, tokens: Option<&Path>, sigma: Option<f64>) -> Result<()> {
    let cfg = common.load()?;
    let model = match model {
        Some(p) => load_model(p)?,
        None => generate_model(&cfg.model, &cfg.geometry)?,
    };
    let tokens = match tokens {
        Some(p) => load_tokens(p)?,
        None => generate_corpus(&cfg.corpus, &cfg.geometry, model.hidden_dim()).tokens,
    };
    let dep = match sigma {
        Some(s) => Deployment::program(&model, &cfg.noise.at_sigma(s), cfg.experiment.seed)?,
        None => Deployment::clean(&model),
    };
    let (_, trace) = dep.forward(&tokens)?;
    let map = accumulate_activation(&trace, model.num_layers(), model.num_experts())?;
    let report = balance_report(&map, cfg.experiment.tau);
    let mut dir = ArtifactDir::create(&common.out_or("out/profile"))?;
    export_heatmap(&map, &dir.path("heatmap.csv"))?;
    export_count_heatmap(&map, &dir.path("heatmap_counts.csv"))?;
    let mut text = format!("# {METRIC_NOTE}\n# sigma = {}\n", sigma.unwrap_or(0.0));
    text.push_str(&report.to_key_values());
    dir.write("balance.txt", &text)?;
    dir.finish(&cfg, "profile")?;
    println!("mean normalized entropy {:.4}", report.mean_entropy());
    Ok(())
}

pub fn run_ablation(cfg: &ExperimentConfig, out: &Path) -> Result<crate::ablation::AblationTable> {
    let work = Workload::from_config(cfg)?;
    let profile = cfg.temperature_profile()?;
    let cells = cfg
        .ablation
        .temperatures
        .iter()
        .map(|&t| {
            let sigma = profile.sigma_at(t).with_context(|| format!("temperature {t} C not in profile"))?;
            Ok(Cell { sigma, temp_c: Some(t) })
        })
        .collect::<Result<Vec<_>>>()?;
    let seeds = trial_seeds(cfg.experiment.seed, cfg.experiment.trials);
    let table = ablation_grid(
        &work,
        &cells,
        |s| cfg.noise.at_sigma(s),
        &cfg.calibration,
        &cfg.ablation.n_values,
        &cfg.ablation.lambda_values,
        &seeds,
    )?;
    let mut dir = ArtifactDir::create(out)?;
    dir.write("ablation.csv", &table.to_csv()?)?;
    dir.write("ablation.txt", &table.to_text())?;
    dir.finish(cfg, "ablate")?;
    Ok(table)
}

/// Model and corpus for the oracle: the input files when given, otherwise
/// the configured generator resized to the oracle's dimensions.
pub fn oracle_workload(cfg: &ExperimentConfig) -> Result<Workload> {
    let geometry = Geometry {
        clusters: cfg.oracle.clusters,
        ..cfg.geometry
    };
    let model: MoeModel = match &cfg.inputs.model {
        Some(p) => load_model(p)?,
        None => {
            let spec = ModelSpec {
                experts: cfg.oracle.experts,
                layers: cfg.oracle.layers,
                ..cfg.model
            };
            generate_model(&spec, &geometry)?
        }
    };
    let tokens = match &cfg.inputs.corpus {
        Some(p) => load_tokens(p)?,
        None => {
            let spec = crate::generate::CorpusSpec {
                tokens: cfg.oracle.tokens,
                ..cfg.corpus
            };
            generate_corpus(&spec, &geometry, model.hidden_dim()).tokens
        }
    };
    Workload::new(model, tokens, cfg.experiment.tau)
}

pub fn run_oracle(cfg: &ExperimentConfig, out: &Path) -> Result<String> {
    let work = oracle_workload(cfg)?;
    let (sigma, _) = cfg.run_cell()?;
    let noise = cfg.noise.at_sigma(sigma);
    let seeds = trial_seeds(cfg.experiment.seed, cfg.oracle.trials);
    let settings = cfg.oracle.settings();
    let report = with_pool(|| {
        permutation_oracle(
            &work.model,
            &work.tokens,
            &work.clean,
            &work.clean.outcome.map,
            &settings,
            &cfg.calibration,
            &noise,
            &seeds,
        )
    })??;
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["seed", "rank", "plans", "rank_fraction", "heuristic_mse", "best_mse", "median_mse", "worst_mse"])?;
    for s in &report.seeds {
        w.write_record([
            s.seed.to_string(),
            s.rank.to_string(),
            s.plans.to_string(),
            s.rank_fraction().to_string(),
            s.heuristic_mse.to_string(),
            s.best_mse.to_string(),
            s.median_mse.to_string(),
            s.worst_mse.to_string(),
        ])?;
    }
    let mut text = format!("# {METRIC_NOTE}\n");
    let _ = writeln!(text, "experts = {}", report.experts);
    let _ = writeln!(text, "layers = {}", report.layers);
    let _ = writeln!(text, "n = {}", report.n);
    let _ = writeln!(text, "sigma = {sigma}");
    let _ = writeln!(text, "enumerated = {}", report.enumerated);
    let _ = writeln!(text, "bijections_per_set_pair = {}", report.bijections_per_pair);
    let _ = writeln!(text, "plans = {}", report.seeds.first().map_or(0, |s| s.plans));
    let _ = writeln!(text, "top_half_fraction = {}", report.top_half_fraction());
    let mut dir = ArtifactDir::create(out)?;
    dir.write("oracle.csv", &String::from_utf8(w.into_inner()?)?)?;
    dir.write("oracle.txt", &text)?;
    save_plan(&report.heuristic, &dir.path("heuristic_plan.json"))?;
    dir.finish(cfg, "oracle")?;
    Ok(text)
}

/// Trains the toy model, evaluates it at `sigma` with the default
/// calibration and writes `perplexity.csv` and `toy.txt` under `out`.
pub fn run_train_toy(spec: &ToySpec, sigma: f64, draws: usize, out: &Path) -> Result<String> {
    let base = ExperimentConfig::default();
    let noise = base.noise.at_sigma(sigma);
    let lm = train_toy(spec)?;
    let report = evaluate_toy(&lm, spec, &noise, &base.calibration, spec.seed, draws)?;
    std::fs::create_dir_all(out).with_context(|| format!("cannot create {}", out.display()))?;
    let write = |name: &str, contents: &str| {
        let p = out.join(name);
        std::fs::write(&p, contents).with_context(|| format!("cannot write {}", p.display()))
    };
    let mut csv = String::from("seed,vanilla_ppl,romer_ppl\n");
    for (s, v, r) in &report.seeds {
        let _ = writeln!(csv, "{s},{v},{r}");
    }
    write("perplexity.csv", &csv)?;
    let mut text = String::new();
    let _ = writeln!(text, "sigma = {sigma}");
    let _ = writeln!(text, "clean_ppl = {:.6}", report.clean);
    let _ = writeln!(text, "vanilla_ppl = {:.6}", report.vanilla);
    let _ = writeln!(text, "romer_ppl = {:.6}", report.romer);
    let _ = writeln!(text, "ordered = {}", report.ordered());
    write("toy.txt", &text)?;
    write("toy_spec.json", &serde_json::to_string_pretty(spec)?)?;
    Ok(text)
}
