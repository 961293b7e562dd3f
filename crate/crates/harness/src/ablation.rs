//! Component ablation: replacement count and calibration strength, each
//! varied with the other component switched off.

use std::fmt::Write as _;

use anyhow::{bail, Result};
use rayon::prelude::*;
use romer_core::noise::NoiseConfig;
use romer_core::romer::CalibrationConfig;

use crate::pipeline::{with_pool, Cell, Workload, METRIC_NOTE};
use crate::trial::{plan_for, romer_outcome, vanilla_outcome, MethodOutcome};

pub const ABLATION_HEADER: [&str; 9] = [
    "axis",
    "value",
    "sigma",
    "temp_c",
    "seed",
    "mse",
    "divergence",
    "mean_entropy",
    "underact_frac",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Axis {
    /// No mitigation, the reference row.
    Vanilla,
    N,
    Lambda,
}

impl Axis {
    pub fn name(self) -> &'static str {
        match self {
            Axis::Vanilla => "vanilla",
            Axis::N => "n",
            Axis::Lambda => "lambda",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub axis: Axis,
    pub value: f64,
    pub cell: Cell,
    /// `None` on mean rows.
    pub seed: Option<u64>,
    pub mse: f64,
    pub divergence: f64,
    pub mean_entropy: f64,
    pub underact_frac: f64,
}

impl AblationRow {
    fn new(axis: Axis, value: f64, cell: Cell, seed: u64, o: &MethodOutcome) -> Self {
        Self {
            axis,
            value,
            cell,
            seed: Some(seed),
            mse: o.mse,
            divergence: o.divergence,
            mean_entropy: o.mean_entropy(),
            underact_frac: o.underactivation(),
        }
    }

    fn metrics(&self) -> [f64; 4] {
        [self.mse, self.divergence, self.mean_entropy, self.underact_frac]
    }
}

#[derive(Debug, Clone)]
pub struct AblationTable {
    pub cells: Vec<Cell>,
    pub n_values: Vec<usize>,
    pub lambda_values: Vec<f64>,
    /// Per-seed rows, followed by one mean row per (axis, value, cell).
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn mean(&self, axis: Axis, value: f64, sigma: f64) -> Option<&AblationRow> {
        self.rows
            .iter()
            .find(|r| r.seed.is_none() && r.axis == axis && r.value == value && r.cell.sigma == sigma)
    }

    fn seed_rows<'a>(&'a self, axis: Axis, value: f64, cell: Cell) -> impl Iterator<Item = &'a AblationRow> + 'a {
        self.rows
            .iter()
            .filter(move |r| r.seed.is_some() && r.axis == axis && r.value == value && r.cell == cell)
    }

    /// True when the `n = 0` and `lambda = 0` rows equal the vanilla rows
    /// exactly, seed by seed.
    pub fn identity_columns_match(&self) -> bool {
        self.cells.iter().all(|&cell| {
            let vanilla: Vec<_> = self.seed_rows(Axis::Vanilla, 0.0, cell).collect();
            [(Axis::N, 0.0), (Axis::Lambda, 0.0)].iter().all(|&(axis, v)| {
                let rows: Vec<_> = self.seed_rows(axis, v, cell).collect();
                rows.len() == vanilla.len()
                    && rows.iter().zip(&vanilla).all(|(a, b)| {
                        a.seed == b.seed
                            && a.metrics().iter().zip(b.metrics()).all(|(x, y)| x.to_bits() == y.to_bits())
                    })
            })
        })
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(ABLATION_HEADER)?;
        for r in &self.rows {
            w.write_record([
                r.axis.name().to_string(),
                r.value.to_string(),
                r.cell.sigma.to_string(),
                r.cell.temp_c.map(|t| t.to_string()).unwrap_or_default(),
                r.seed.map(|s| s.to_string()).unwrap_or_else(|| "all".into()),
                r.mse.to_string(),
                r.divergence.to_string(),
                r.mean_entropy.to_string(),
                r.underact_frac.to_string(),
            ])?;
        }
        Ok(String::from_utf8(w.into_inner()?)?)
    }

    /// Mean MSE laid out with one column per noise level.
    pub fn to_text(&self) -> String {
        let mut out = format!("# {METRIC_NOTE}\n# mean output MSE over seeds\n");
        let _ = write!(out, "{:<14}", "setting");
        for c in &self.cells {
            let _ = write!(out, " {:>14}", format!("sigma={}", c.sigma));
        }
        out.push('\n');
        let mut line = |label: String, axis: Axis, value: f64| {
            let _ = write!(out, "{label:<14}");
            for c in &self.cells {
                let m = self.mean(axis, value, c.sigma).map_or(f64::NAN, |r| r.mse);
                let _ = write!(out, " {m:>14.6e}");
            }
            out.push('\n');
        };
        line("vanilla".into(), Axis::Vanilla, 0.0);
        for &n in &self.n_values {
            line(format!("n={n}"), Axis::N, n as f64);
        }
        for &l in &self.lambda_values {
            line(format!("lambda={l}"), Axis::Lambda, l);
        }
        out
    }
}

fn mean_of(rows: &[&AblationRow], axis: Axis, value: f64, cell: Cell) -> AblationRow {
    let n = rows.len() as f64;
    let avg = |i: usize| rows.iter().map(|r| r.metrics()[i]).sum::<f64>() / n;
    AblationRow {
        axis,
        value,
        cell,
        seed: None,
        mse: avg(0),
        divergence: avg(1),
        mean_entropy: avg(2),
        underact_frac: avg(3),
    }
}

/// Runs vanilla, every `n` (calibration off) and every `lambda`
/// (replacement off) under the same seeds.
pub fn ablation_grid(
    work: &Workload,
    cells: &[Cell],
    noise_of: impl Fn(f64) -> NoiseConfig + Sync,
    base: &CalibrationConfig,
    n_values: &[usize],
    lambda_values: &[f64],
    seeds: &[u64],
) -> Result<AblationTable> {
    let experts = work.model.num_experts();
    if let Some(&n) = n_values.iter().find(|&&n| 2 * n > experts) {
        bail!("ablation n = {n} needs 2n <= E = {experts}");
    }
    let n_cfgs: Vec<CalibrationConfig> = n_values
        .iter()
        .map(|&n| CalibrationConfig {
            n,
            replacement: true,
            calibration: false,
            ..*base
        })
        .collect();
    let l_cfgs: Vec<CalibrationConfig> = lambda_values
        .iter()
        .map(|&lambda| CalibrationConfig {
            lambda,
            calibration: true,
            replacement: false,
            extended_lambda: true,
            ..*base
        })
        .collect();
    for c in n_cfgs.iter().chain(&l_cfgs) {
        c.validate()?;
    }
    let jobs: Vec<(usize, u64)> = (0..cells.len())
        .flat_map(|c| seeds.iter().map(move |&s| (c, s)))
        .collect();
    let layers = work.model.num_layers();
    let per_job: Vec<Vec<AblationRow>> = with_pool(|| {
        jobs.par_iter()
            .map(|&(c, seed)| -> romer_core::Result<Vec<AblationRow>> {
                let cell = cells[c];
                let noise = noise_of(cell.sigma);
                let (vanilla, _) = vanilla_outcome(&work.model, &work.tokens, &work.clean, &noise, seed, work.tau)?;
                let mut rows = vec![AblationRow::new(Axis::Vanilla, 0.0, cell, seed, &vanilla)];
                let variants = n_cfgs
                    .iter()
                    .zip(n_values.iter().map(|&n| (Axis::N, n as f64)))
                    .chain(l_cfgs.iter().zip(lambda_values.iter().map(|&l| (Axis::Lambda, l))));
                for (cfg, (axis, value)) in variants {
                    let plan = plan_for(&work.clean, &vanilla, cfg, layers)?;
                    let o = romer_outcome(&work.model, &work.tokens, &work.clean, &plan, cfg, &noise, seed, work.tau)?;
                    rows.push(AblationRow::new(axis, value, cell, seed, &o));
                }
                Ok(rows)
            })
            .collect::<romer_core::Result<_>>()
    })??;
    let flat: Vec<AblationRow> = per_job.into_iter().flatten().collect();
    let mut keys: Vec<(Axis, f64)> = vec![(Axis::Vanilla, 0.0)];
    keys.extend(n_values.iter().map(|&n| (Axis::N, n as f64)));
    keys.extend(lambda_values.iter().map(|&l| (Axis::Lambda, l)));
    let mut rows = Vec::with_capacity(flat.len() + keys.len() * cells.len());
    for &cell in cells {
        for &(axis, value) in &keys {
            let group: Vec<&AblationRow> = flat
                .iter()
                .filter(|r| r.cell == cell && r.axis == axis && r.value == value)
                .collect();
            rows.extend(group.iter().map(|r| (*r).clone()));
            rows.push(mean_of(&group, axis, value, cell));
        }
    }
    Ok(AblationTable {
        cells: cells.to_vec(),
        n_values: n_values.to_vec(),
        lambda_values: lambda_values.to_vec(),
        rows,
    })
}
