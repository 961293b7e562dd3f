//! One noisy trial: vanilla and calibrated deployments scored against the
//! clean reference.

use romer_core::moe::{Deployment, MoeModel, RoutingTrace};
use romer_core::noise::NoiseConfig;
use romer_core::profiler::{
    accumulate_activation, balance_report, output_divergence, output_mse, ActivationMap, LoadBalanceReport,
};
use romer_core::romer::{
    apply_replacement, build_replacement_plan, CalibrationConfig, ProfileSource, ReplacementPlan, RomerDeployment,
};
use romer_core::Result;

/// Scores of one method on one trial.
#[derive(Debug, Clone)]
pub struct MethodOutcome {
    pub mse: f64,
    pub divergence: f64,
    pub map: ActivationMap,
    pub balance: LoadBalanceReport,
}

impl MethodOutcome {
    pub fn mean_entropy(&self) -> f64 {
        self.balance.mean_entropy()
    }

    pub fn underactivation(&self) -> f64 {
        self.balance.mean_underactivation()
    }
}

/// Noise-free run of the unmodified model.
#[derive(Debug, Clone)]
pub struct CleanReference {
    pub outputs: Vec<Vec<f64>>,
    pub trace: RoutingTrace,
    pub outcome: MethodOutcome,
}

impl CleanReference {
    pub fn compute(model: &MoeModel, tokens: &[Vec<f64>], tau: f64) -> Result<Self> {
        let (outputs, trace) = Deployment::clean(model).forward(tokens)?;
        let map = accumulate_activation(&trace, model.num_layers(), model.num_experts())?;
        let balance = balance_report(&map, tau);
        Ok(Self {
            outputs,
            trace,
            outcome: MethodOutcome {
                mse: 0.0,
                divergence: 0.0,
                map,
                balance,
            },
        })
    }

    fn score(&self, model: &MoeModel, outputs: &[Vec<f64>], trace: &RoutingTrace, tau: f64) -> Result<MethodOutcome> {
        let map = accumulate_activation(trace, model.num_layers(), model.num_experts())?;
        let balance = balance_report(&map, tau);
        Ok(MethodOutcome {
            mse: output_mse(&self.outputs, outputs)?,
            divergence: output_divergence(&self.outputs, outputs)?,
            map,
            balance,
        })
    }
}

#[derive(Debug, Clone)]
pub struct TrialOutcome {
    pub seed: u64,
    pub vanilla: MethodOutcome,
    pub romer: MethodOutcome,
    pub plan: ReplacementPlan,
}

pub fn vanilla_outcome(
    model: &MoeModel,
    tokens: &[Vec<f64>],
    clean: &CleanReference,
    noise: &NoiseConfig,
    seed: u64,
    tau: f64,
) -> Result<(MethodOutcome, Vec<Vec<f64>>)> {
    let (outputs, trace) = Deployment::program(model, noise, seed)?.forward(tokens)?;
    Ok((clean.score(model, &outputs, &trace, tau)?, outputs))
}

/// Calibrated deployment under a given plan.
pub fn romer_outcome(
    model: &MoeModel,
    tokens: &[Vec<f64>],
    clean: &CleanReference,
    plan: &ReplacementPlan,
    calib: &CalibrationConfig,
    noise: &NoiseConfig,
    seed: u64,
    tau: f64,
) -> Result<MethodOutcome> {
    let patched = apply_replacement(model, plan)?;
    let dep = RomerDeployment::program(&patched, plan.clone(), *calib, noise, seed)?;
    let (outputs, trace) = dep.forward(tokens)?;
    clean.score(model, &outputs, &trace, tau)
}

/// Plan used by the calibrated run: built from the clean or the vanilla
/// noisy activation map.
pub fn plan_for(
    clean: &CleanReference,
    vanilla: &MethodOutcome,
    calib: &CalibrationConfig,
    layers: usize,
) -> Result<ReplacementPlan> {
    let n = calib.effective_n();
    if n == 0 {
        return Ok(ReplacementPlan::empty(layers));
    }
    let map = match calib.profile_source {
        ProfileSource::Clean => &clean.outcome.map,
        ProfileSource::Noisy => &vanilla.map,
    };
    build_replacement_plan(map, n)
}

pub fn run_trial(
    model: &MoeModel,
    tokens: &[Vec<f64>],
    clean: &CleanReference,
    noise: &NoiseConfig,
    calib: &CalibrationConfig,
    seed: u64,
    tau: f64,
) -> Result<TrialOutcome> {
    let (vanilla, _) = vanilla_outcome(model, tokens, clean, noise, seed, tau)?;
    let plan = plan_for(clean, &vanilla, calib, model.num_layers())?;
    let romer = romer_outcome(model, tokens, clean, &plan, calib, noise, seed, tau)?;
    Ok(TrialOutcome {
        seed,
        vanilla,
        romer,
        plan,
    })
}
