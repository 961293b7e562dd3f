//! Brute-force ranking of the heuristic replacement plan against every
//! alternative choice of top set, bottom set and pairing.

use rayon::prelude::*;
use romer_core::math::RandomStream;
use romer_core::moe::MoeModel;
use romer_core::noise::NoiseConfig;
use romer_core::profiler::ActivationMap;
use romer_core::romer::{build_replacement_plan, CalibrationConfig, LayerPlan, ReplacementPlan};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::trial::{romer_outcome, CleanReference};

#[derive(Debug, Error)]
pub enum OracleError {
    #[error(
        "{count} candidate plans exceed the enumeration budget of {budget}; \
         set oracle.sample to evaluate a random subset instead"
    )]
    BudgetExceeded { count: u128, budget: u64 },
    #[error(transparent)]
    Core(#[from] romer_core::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OracleSettings {
    pub n: usize,
    pub budget: u64,
    /// Evaluate this many random plans instead of enumerating.
    pub sample: Option<usize>,
}

impl Default for OracleSettings {
    fn default() -> Self {
        Self {
            n: 2,
            budget: 20_000,
            sample: None,
        }
    }
}

fn combinations(items: &[usize], k: usize) -> Vec<Vec<usize>> {
    if k == 0 {
        return vec![Vec::new()];
    }
    if items.len() < k {
        return Vec::new();
    }
    let mut out = Vec::new();
    for (i, &first) in items.iter().enumerate() {
        for mut rest in combinations(&items[i + 1..], k - 1) {
            rest.insert(0, first);
            out.push(rest);
        }
    }
    out
}

fn permutations(items: &[usize]) -> Vec<Vec<usize>> {
    if items.len() <= 1 {
        return vec![items.to_vec()];
    }
    let mut out = Vec::new();
    for i in 0..items.len() {
        let mut rest = items.to_vec();
        let head = rest.remove(i);
        for mut p in permutations(&rest) {
            p.insert(0, head);
            out.push(p);
        }
    }
    out
}

fn factorial(n: usize) -> u128 {
    (1..=n as u128).product()
}

fn binomial(n: usize, k: usize) -> u128 {
    if k > n {
        return 0;
    }
    (0..k as u128).fold(1, |acc, i| acc * (n as u128 - i) / (i + 1))
}

/// Number of distinct layer plans for `experts` and `n`.
pub fn layer_plan_count(experts: usize, n: usize) -> u128 {
    binomial(experts, n) * binomial(experts.saturating_sub(n), n) * factorial(n)
}

/// Pairs sorted by top index, so equal plans compare equal.
pub fn canonical(plan: &LayerPlan) -> LayerPlan {
    let mut pairs: Vec<(usize, usize)> = plan.top.iter().copied().zip(plan.bottom.iter().copied()).collect();
    pairs.sort_unstable();
    LayerPlan {
        top: pairs.iter().map(|p| p.0).collect(),
        bottom: pairs.iter().map(|p| p.1).collect(),
    }
}

/// Every disjoint (top, bottom) pair of `n`-sets with every bijection
/// between them, in canonical form.
pub fn enumerate_layer_plans(experts: usize, n: usize) -> Vec<LayerPlan> {
    let all: Vec<usize> = (0..experts).collect();
    let mut plans = Vec::new();
    for top in combinations(&all, n) {
        let rest: Vec<usize> = all.iter().copied().filter(|i| !top.contains(i)).collect();
        for bottom in combinations(&rest, n) {
            for perm in permutations(&bottom) {
                plans.push(LayerPlan {
                    top: top.clone(),
                    bottom: perm,
                });
            }
        }
    }
    plans
}

fn random_layer_plan(experts: usize, n: usize, rng: &mut RandomStream) -> LayerPlan {
    let mut idx: Vec<usize> = (0..experts).collect();
    rng.shuffle(&mut idx);
    canonical(&LayerPlan {
        top: idx[..n].to_vec(),
        bottom: idx[n..2 * n].to_vec(),
    })
}

fn cartesian(per_layer: &[LayerPlan], layers: usize, n: usize) -> Vec<ReplacementPlan> {
    let mut plans = vec![Vec::new()];
    for _ in 0..layers {
        plans = plans
            .into_iter()
            .flat_map(|prefix: Vec<LayerPlan>| {
                per_layer.iter().map(move |lp| {
                    let mut p = prefix.clone();
                    p.push(lp.clone());
                    p
                })
            })
            .collect();
    }
    plans.into_iter().map(|layers| ReplacementPlan { n, layers }).collect()
}

/// Candidate plans for one oracle run, heuristic plan included.
pub fn candidate_plans(
    heuristic: &ReplacementPlan,
    experts: usize,
    settings: &OracleSettings,
    seed: u64,
) -> Result<Vec<ReplacementPlan>, OracleError> {
    let n = settings.n;
    let layers = heuristic.layers.len();
    let heuristic = canonical_plan(heuristic);
    if let Some(count) = settings.sample {
        let mut rng = RandomStream::new(seed, 0x5a3);
        let mut plans = vec![heuristic.clone()];
        while plans.len() < count.max(1) + 1 {
            let p = ReplacementPlan {
                n,
                layers: (0..layers).map(|_| random_layer_plan(experts, n, &mut rng)).collect(),
            };
            if !plans.contains(&p) {
                plans.push(p);
            }
            if plans.len() as u128 >= layer_plan_count(experts, n).pow(layers as u32) {
                break;
            }
        }
        return Ok(plans);
    }
    let count = layer_plan_count(experts, n).checked_pow(layers as u32).unwrap_or(u128::MAX);
    if count > settings.budget as u128 {
        return Err(OracleError::BudgetExceeded {
            count,
            budget: settings.budget,
        });
    }
    Ok(cartesian(&enumerate_layer_plans(experts, n), layers, n))
}

fn canonical_plan(plan: &ReplacementPlan) -> ReplacementPlan {
    ReplacementPlan {
        n: plan.n,
        layers: plan.layers.iter().map(canonical).collect(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OracleSeedResult {
    pub seed: u64,
    /// One plus the number of plans with strictly lower MSE.
    pub rank: usize,
    pub plans: usize,
    pub heuristic_mse: f64,
    pub best_mse: f64,
    pub median_mse: f64,
    pub worst_mse: f64,
}

impl OracleSeedResult {
    pub fn rank_fraction(&self) -> f64 {
        self.rank as f64 / self.plans as f64
    }

    pub fn in_top_half(&self) -> bool {
        self.rank_fraction() <= 0.5
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OracleReport {
    pub n: usize,
    pub experts: usize,
    pub layers: usize,
    pub bijections_per_pair: u128,
    pub enumerated: bool,
    pub heuristic: ReplacementPlan,
    pub seeds: Vec<OracleSeedResult>,
}

impl OracleReport {
    pub fn top_half_fraction(&self) -> f64 {
        if self.seeds.is_empty() {
            return 0.0;
        }
        self.seeds.iter().filter(|s| s.in_top_half()).count() as f64 / self.seeds.len() as f64
    }
}

/// Ranks the plan built from `map` among all candidate plans by output MSE
/// under each seed's noise realization.
#[allow(clippy::too_many_arguments)]
pub fn permutation_oracle(
    model: &MoeModel,
    tokens: &[Vec<f64>],
    clean: &CleanReference,
    map: &ActivationMap,
    settings: &OracleSettings,
    calib: &CalibrationConfig,
    noise: &NoiseConfig,
    seeds: &[u64],
) -> Result<OracleReport, OracleError> {
    let heuristic = canonical_plan(&build_replacement_plan(map, settings.n)?);
    let calib = CalibrationConfig {
        n: settings.n,
        replacement: true,
        ..*calib
    };
    let plan_seed = seeds.first().copied().unwrap_or(0);
    let plans = candidate_plans(&heuristic, model.num_experts(), settings, plan_seed)?;
    let target = plans
        .iter()
        .position(|p| *p == heuristic)
        .expect("heuristic plan is a candidate");
    let results = seeds
        .iter()
        .map(|&seed| {
            let mse: Vec<f64> = plans
                .par_iter()
                .map(|p| romer_outcome(model, tokens, clean, p, &calib, noise, seed, 0.5).map(|o| o.mse))
                .collect::<romer_core::Result<_>>()?;
            let h = mse[target];
            let mut sorted = mse.clone();
            sorted.sort_by(f64::total_cmp);
            Ok(OracleSeedResult {
                seed,
                rank: 1 + mse.iter().filter(|&&m| m < h).count(),
                plans: mse.len(),
                heuristic_mse: h,
                best_mse: sorted[0],
                median_mse: sorted[sorted.len() / 2],
                worst_mse: sorted[sorted.len() - 1],
            })
        })
        .collect::<Result<Vec<_>, OracleError>>()?;
    Ok(OracleReport {
        n: settings.n,
        experts: model.num_experts(),
        layers: model.num_layers(),
        bijections_per_pair: factorial(settings.n),
        enumerated: settings.sample.is_none(),
        heuristic,
        seeds: results,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn enumeration_counts() {
        assert_eq!(enumerate_layer_plans(6, 2).len(), 180);
        assert_eq!(layer_plan_count(6, 2), 180);
        assert_eq!(enumerate_layer_plans(6, 1).len(), 30);
        assert_eq!(layer_plan_count(8, 3), 56 * 10 * 6);
        let plans = enumerate_layer_plans(6, 2);
        // every (T, B) set pair appears with exactly 2! pairings
        let pair = |p: &LayerPlan| {
            let mut b = p.bottom.clone();
            b.sort();
            (p.top.clone(), b)
        };
        let target = pair(&plans[0]);
        assert_eq!(plans.iter().filter(|p| pair(p) == target).count(), 2);
        for p in &plans {
            p.validate(6).unwrap();
            assert_eq!(canonical(p), *p);
        }
    }

    #[test]
    fn budget_error_mentions_sampling() {
        let h = ReplacementPlan {
            n: 2,
            layers: vec![
                LayerPlan {
                    top: vec![0, 1],
                    bottom: vec![2, 3]
                };
                3
            ],
        };
        let err = candidate_plans(&h, 6, &OracleSettings::default(), 0).unwrap_err();
        assert!(err.to_string().contains("sample"), "{err}");
        let sampled = candidate_plans(
            &h,
            6,
            &OracleSettings {
                sample: Some(50),
                ..OracleSettings::default()
            },
            0,
        )
        .unwrap();
        assert_eq!(sampled.len(), 51);
        assert_eq!(sampled[0], h);
    }
}
