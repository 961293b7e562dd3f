//! Noise sweeps: clean, vanilla and calibrated runs per (cell, seed), the
//! SweepResult table and the artifact directory.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use rayon::prelude::*;
use romer_core::io::{load_model, load_tokens, save_plan};
use romer_core::math::stream_key;
use romer_core::moe::MoeModel;
use romer_core::profiler::{export_heatmap, LoadBalanceReport};
use romer_core::romer::CalibrationConfig;

use crate::config::ExperimentConfig;
use crate::generate::{generate_corpus, generate_model};
use crate::trial::{run_trial, CleanReference, MethodOutcome, TrialOutcome};

/// Stated at the top of every text artifact.
pub const METRIC_NOTE: &str = "fidelity metrics: output MSE and symmetric softmax KL divergence \
against the clean model stand in for language-model perplexity";

pub const SWEEP_HEADER: [&str; 8] = [
    "sigma",
    "temp_c",
    "method",
    "seed",
    "mse",
    "divergence",
    "mean_entropy",
    "underact_frac",
];

/// Worker count from `ROMER_SIM_THREADS` (unset or 0 means one per core).
pub fn thread_count() -> usize {
    std::env::var("ROMER_SIM_THREADS")
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or(0)
}

/// Runs `f` on a pool sized by [`thread_count`].
pub fn with_pool<R: Send>(f: impl FnOnce() -> R + Send) -> Result<R> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(thread_count())
        .build()
        .context("cannot start worker pool")?;
    Ok(pool.install(f))
}

/// Model, corpus and clean reference shared by every cell.
pub struct Workload {
    pub model: MoeModel,
    pub tokens: Vec<Vec<f64>>,
    pub clean: CleanReference,
    pub tau: f64,
}

impl Workload {
    pub fn new(model: MoeModel, tokens: Vec<Vec<f64>>, tau: f64) -> Result<Self> {
        if tokens.is_empty() {
            bail!("the corpus is empty");
        }
        let clean = CleanReference::compute(&model, &tokens, tau)?;
        Ok(Self {
            model,
            tokens,
            clean,
            tau,
        })
    }

    pub fn from_config(cfg: &ExperimentConfig) -> Result<Self> {
        let model = match &cfg.inputs.model {
            Some(p) => load_model(p)?,
            None => generate_model(&cfg.model, &cfg.geometry)?,
        };
        let tokens = match &cfg.inputs.corpus {
            Some(p) => load_tokens(p)?,
            None => generate_corpus(&cfg.corpus, &cfg.geometry, model.hidden_dim()).tokens,
        };
        Self::new(model, tokens, cfg.experiment.tau)
    }
}

/// One noise level of a sweep.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Cell {
    pub sigma: f64,
    pub temp_c: Option<f64>,
}

/// Noise seed of trial `i`, shared by every cell and method.
pub fn trial_seed(master: u64, i: usize) -> u64 {
    stream_key(&[master, i as u64])
}

pub fn trial_seeds(master: u64, trials: usize) -> Vec<u64> {
    (0..trials).map(|i| trial_seed(master, i)).collect()
}

#[derive(Debug, Clone)]
pub struct CellResult {
    pub cell: Cell,
    pub trials: Vec<TrialOutcome>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub sigma: f64,
    pub temp_c: Option<f64>,
    pub method: String,
    /// Seed value, or `all` on summary rows.
    pub seed: String,
    pub mse: f64,
    pub divergence: f64,
    pub mean_entropy: f64,
    pub underact_frac: f64,
}

impl SweepRow {
    fn from_outcome(cell: Cell, method: &str, seed: String, o: &MethodOutcome) -> Self {
        Self {
            sigma: cell.sigma,
            temp_c: cell.temp_c,
            method: method.to_string(),
            seed,
            mse: o.mse,
            divergence: o.divergence,
            mean_entropy: o.mean_entropy(),
            underact_frac: o.underactivation(),
        }
    }

    pub fn is_summary(&self) -> bool {
        self.method.starts_with("summary:")
    }

    fn fields(&self) -> [String; 8] {
        [
            self.sigma.to_string(),
            self.temp_c.map(|t| t.to_string()).unwrap_or_default(),
            self.method.clone(),
            self.seed.clone(),
            self.mse.to_string(),
            self.divergence.to_string(),
            self.mean_entropy.to_string(),
            self.underact_frac.to_string(),
        ]
    }
}

#[derive(Debug, Clone)]
pub struct SweepResult {
    pub seeds: Vec<u64>,
    pub cells: Vec<CellResult>,
    pub rows: Vec<SweepRow>,
}

impl SweepResult {
    pub fn summary(&self, sigma: f64, method: &str) -> Option<&SweepRow> {
        let name = format!("summary:{method}");
        self.rows.iter().find(|r| r.sigma == sigma && r.method == name)
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(SWEEP_HEADER)?;
        for r in &self.rows {
            w.write_record(r.fields())?;
        }
        Ok(String::from_utf8(w.into_inner()?)?)
    }
}

fn mean_row(cell: Cell, method: &str, rows: &[SweepRow]) -> SweepRow {
    let n = rows.len() as f64;
    let avg = |f: fn(&SweepRow) -> f64| rows.iter().map(f).sum::<f64>() / n;
    SweepRow {
        sigma: cell.sigma,
        temp_c: cell.temp_c,
        method: format!("summary:{method}"),
        seed: "all".into(),
        mse: avg(|r| r.mse),
        divergence: avg(|r| r.divergence),
        mean_entropy: avg(|r| r.mean_entropy),
        underact_frac: avg(|r| r.underact_frac),
    }
}

/// Every (cell, seed) trial, run in parallel and gathered in input order.
pub fn run_pipeline(work: &Workload, cells: &[Cell], noise_of: impl Fn(f64) -> romer_core::noise::NoiseConfig + Sync, calib: &CalibrationConfig, seeds: &[u64]) -> Result<SweepResult> {
    calib.validate()?;
    let jobs: Vec<(usize, u64)> = (0..cells.len())
        .flat_map(|c| seeds.iter().map(move |&s| (c, s)))
        .collect();
    let outcomes: Vec<TrialOutcome> = with_pool(|| {
        jobs.par_iter()
            .map(|&(c, seed)| {
                let noise = noise_of(cells[c].sigma);
                run_trial(&work.model, &work.tokens, &work.clean, &noise, calib, seed, work.tau)
            })
            .collect::<romer_core::Result<Vec<_>>>()
    })??;
    let mut by_cell: BTreeMap<usize, Vec<TrialOutcome>> = BTreeMap::new();
    for (&(c, _), o) in jobs.iter().zip(outcomes) {
        by_cell.entry(c).or_default().push(o);
    }
    let mut rows = Vec::new();
    let mut results = Vec::new();
    for (c, trials) in by_cell {
        let cell = cells[c];
        let mut per_method: [Vec<SweepRow>; 3] = Default::default();
        for t in &trials {
            let seed = t.seed.to_string();
            per_method[0].push(SweepRow::from_outcome(cell, "clean", seed.clone(), &work.clean.outcome));
            per_method[1].push(SweepRow::from_outcome(cell, "vanilla", seed.clone(), &t.vanilla));
            per_method[2].push(SweepRow::from_outcome(cell, "romer", seed, &t.romer));
        }
        for (name, group) in ["clean", "vanilla", "romer"].iter().zip(&per_method) {
            rows.extend(group.iter().cloned());
            rows.push(mean_row(cell, name, group));
        }
        results.push(CellResult { cell, trials });
    }
    Ok(SweepResult {
        seeds: seeds.to_vec(),
        cells: results,
        rows,
    })
}

/// Collects written files for the manifest.
pub struct ArtifactDir {
    root: PathBuf,
    files: Vec<String>,
}

impl ArtifactDir {
    pub fn create(root: &Path) -> Result<Self> {
        fs::create_dir_all(root).with_context(|| format!("cannot create output directory {}", root.display()))?;
        Ok(Self {
            root: root.to_path_buf(),
            files: Vec::new(),
        })
    }

    pub fn path(&mut self, name: &str) -> PathBuf {
        self.files.push(name.to_string());
        self.root.join(name)
    }

    pub fn write(&mut self, name: &str, contents: &str) -> Result<()> {
        let p = self.path(name);
        fs::write(&p, contents).with_context(|| format!("cannot write {}", p.display()))
    }

    /// Writes config echo, metadata and manifest; returns the file list.
    pub fn finish(mut self, cfg: &ExperimentConfig, command: &str) -> Result<Vec<String>> {
        self.write("config.toml", &format!("# resolved configuration\n{}", cfg.echo()))?;
        let stamp = std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0);
        let mut meta = String::new();
        let _ = writeln!(meta, "# {METRIC_NOTE}");
        let _ = writeln!(meta, "command = {command}");
        let _ = writeln!(meta, "version = {}", env!("CARGO_PKG_VERSION"));
        let _ = writeln!(meta, "unix_time = {stamp}");
        self.write("metadata.txt", &meta)?;
        self.files.push("manifest.txt".into());
        self.files.sort();
        let manifest = self.files.join("\n") + "\n";
        let p = self.root.join("manifest.txt");
        fs::write(&p, manifest).with_context(|| format!("cannot write {}", p.display()))?;
        Ok(self.files)
    }
}

fn balance_text(cell: &CellResult, clean: &LoadBalanceReport) -> String {
    let mut out = format!("# {METRIC_NOTE}\n# sigma = {}\n", cell.cell.sigma);
    if let Some(t) = cell.cell.temp_c {
        let _ = writeln!(out, "# temp_c = {t}");
    }
    let first = &cell.trials[0];
    let _ = writeln!(out, "# seed = {}", first.seed);
    for (name, report) in [("clean", clean), ("vanilla", &first.vanilla.balance), ("romer", &first.romer.balance)] {
        let _ = writeln!(out, "[{name}]");
        out.push_str(&report.to_key_values());
    }
    out
}

/// Results table plus, per cell, heatmaps, balance reports and the plan of
/// the first seed.
pub fn write_sweep_artifacts(dir: &mut ArtifactDir, work: &Workload, result: &SweepResult) -> Result<()> {
    dir.write("results.csv", &result.to_csv()?)?;
    for (i, cell) in result.cells.iter().enumerate() {
        let first = &cell.trials[0];
        for (name, map) in [
            ("clean", &work.clean.outcome.map),
            ("vanilla", &first.vanilla.map),
            ("romer", &first.romer.map),
        ] {
            export_heatmap(map, &dir.path(&format!("cell{i}_heatmap_{name}.csv")))?;
        }
        dir.write(&format!("cell{i}_balance.txt"), &balance_text(cell, &work.clean.outcome.balance))?;
        save_plan(&first.plan, &dir.path(&format!("cell{i}_plan.json")))?;
    }
    Ok(())
}

/// Files written by a sweep over `cells` cells.
pub fn declared_sweep_files(cells: usize) -> Vec<String> {
    let mut files: Vec<String> = ["results.csv", "config.toml", "metadata.txt", "manifest.txt"].map(String::from).to_vec();
    for i in 0..cells {
        for name in ["heatmap_clean.csv", "heatmap_vanilla.csv", "heatmap_romer.csv", "balance.txt", "plan.json"] {
            files.push(format!("cell{i}_{name}"));
        }
    }
    files.sort();
    files
}

pub fn sweep_cells(cfg: &ExperimentConfig) -> Result<Vec<Cell>> {
    let profile = cfg.temperature_profile()?;
    let temps: Vec<f64> = if cfg.sweep.temperatures.is_empty() {
        profile.points().iter().map(|p| p.0).collect()
    } else {
        cfg.sweep.temperatures.clone()
    };
    temps
        .into_iter()
        .map(|t| {
            let sigma = profile
                .sigma_at(t)
                .with_context(|| format!("temperature {t} C is not in the profile"))?;
            Ok(Cell { sigma, temp_c: Some(t) })
        })
        .collect()
}

/// The `run` and `sweep` commands.
pub fn execute(cfg: &ExperimentConfig, cells: &[Cell], out: &Path, command: &str) -> Result<(SweepResult, Vec<String>)> {
    let work = Workload::from_config(cfg)?;
    let seeds = trial_seeds(cfg.experiment.seed, cfg.experiment.trials);
    let result = run_pipeline(&work, cells, |s| cfg.noise.at_sigma(s), &cfg.calibration, &seeds)?;
    let mut dir = ArtifactDir::create(out)?;
    write_sweep_artifacts(&mut dir, &work, &result)?;
    let files = dir.finish(cfg, command)?;
    Ok((result, files))
}
