//! Post-training calibration for noisy MoE inference.
//!
//! Two components:
//!
//! * **Expert replacement.** From an activation map, each layer's `n` most
//!   activated experts (top set) are copied over its `n` least activated
//!   ones (bottom set). At inference the bottom logits are discarded, top
//!   logits are halved, and every selected top expert is computed at both of
//!   its physical locations and averaged, halving its noise variance.
//! * **Percentile router calibration.** Sorted logits in the lower half are
//!   raised by `lambda · IQR` and the upper half lowered by the same amount,
//!   contracting the spread to `(1 - 2 lambda) · IQR` whenever the shifted
//!   sequence stays sorted.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{iqr, RandomStream};
use crate::moe::{combine, route, Deployment, ExpertFfn, LayerRecord, MoeModel, RoutingTrace, TokenTrace};
use crate::noise::{AnalogArray, NoiseConfig, PathNoise};
use crate::profiler::ActivationMap;

/// Replacement sets of one layer. `top[r]` is copied over `bottom[r]`.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerPlan {
    pub top: Vec<usize>,
    pub bottom: Vec<usize>,
}

impl LayerPlan {
    pub fn is_empty(&self) -> bool {
        self.top.is_empty()
    }

    pub fn partner(&self, expert: usize) -> Option<usize> {
        self.top
            .iter()
            .position(|&t| t == expert)
            .map(|r| self.bottom[r])
    }

    /// Top-set expert whose weights the bottom location `expert` carries.
    pub fn source_of(&self, expert: usize) -> Option<usize> {
        self.bottom
            .iter()
            .position(|&b| b == expert)
            .map(|r| self.top[r])
    }

    pub fn is_top(&self, expert: usize) -> bool {
        self.top.contains(&expert)
    }

    pub fn is_bottom(&self, expert: usize) -> bool {
        self.bottom.contains(&expert)
    }

    pub fn validate(&self, experts: usize) -> Result<()> {
        if self.top.len() != self.bottom.len() {
            return Err(Error::InvalidConfig(format!(
                "top set has {} experts, bottom set {}",
                self.top.len(),
                self.bottom.len()
            )));
        }
        let mut seen = vec![false; experts];
        for &i in self.top.iter().chain(&self.bottom) {
            if i >= experts {
                return Err(Error::IndexOutOfRange {
                    context: "replacement plan",
                    index: i,
                    bound: experts,
                });
            }
            if seen[i] {
                return Err(Error::InvalidConfig(format!(
                    "expert {i} appears twice in the replacement sets"
                )));
            }
            seen[i] = true;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReplacementPlan {
    pub n: usize,
    pub layers: Vec<LayerPlan>,
}

impl ReplacementPlan {
    pub fn empty(layers: usize) -> Self {
        Self {
            n: 0,
            layers: vec![LayerPlan::default(); layers],
        }
    }

    pub fn layer(&self, l: usize) -> &LayerPlan {
        &self.layers[l]
    }

    pub fn is_empty(&self) -> bool {
        self.layers.iter().all(LayerPlan::is_empty)
    }

    pub fn validate(&self, model: &MoeModel) -> Result<()> {
        if self.layers.len() != model.num_layers() {
            return Err(Error::ShapeMismatch(format!(
                "plan covers {} layers, model has {}",
                self.layers.len(),
                model.num_layers()
            )));
        }
        for (plan, layer) in self.layers.iter().zip(model.layers()) {
            if plan.top.len() != self.n {
                return Err(Error::InvalidConfig(format!(
                    "layer {} plan has {} pairs, plan declares n = {}",
                    layer.layer_index(),
                    plan.top.len(),
                    self.n
                )));
            }
            plan.validate(layer.num_experts())?;
        }
        Ok(())
    }
}

/// Per layer: the `n` largest entries form the top set, the `n` smallest of
/// the rest the bottom set, ties to the lowest index, and the rank-r top
/// expert pairs with the rank-r bottom expert.
pub fn build_replacement_plan(map: &ActivationMap, n: usize) -> Result<ReplacementPlan> {
    let experts = map.num_experts();
    if 2 * n > experts {
        return Err(Error::PlanOverlap {
            twice_n: 2 * n,
            experts,
        });
    }
    let layers = (0..map.num_layers())
        .map(|l| {
            let row = map.layer(l);
            let mut desc: Vec<usize> = (0..experts).collect();
            desc.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
            let top: Vec<usize> = desc[..n].to_vec();
            let mut asc: Vec<usize> = (0..experts).filter(|i| !top.contains(i)).collect();
            asc.sort_by(|&a, &b| row[a].total_cmp(&row[b]).then(a.cmp(&b)));
            LayerPlan {
                top,
                bottom: asc[..n].to_vec(),
            }
        })
        .collect();
    Ok(ReplacementPlan { n, layers })
}

/// Copy of `model` whose bottom-set locations carry their partners' weights.
pub fn apply_replacement(model: &MoeModel, plan: &ReplacementPlan) -> Result<MoeModel> {
    plan.validate(model)?;
    let mut patched = model.clone();
    for (layer, lp) in patched.layers.iter_mut().zip(&plan.layers) {
        for (&t, &b) in lp.top.iter().zip(&lp.bottom) {
            layer.experts[b] = model.layers()[layer.layer_index()].experts()[t].clone();
        }
    }
    Ok(patched)
}

/// Checks that every bottom location of `model` holds its partner's weights.
pub fn check_replacement_applied(model: &MoeModel, plan: &ReplacementPlan) -> Result<()> {
    plan.validate(model)?;
    for (layer, lp) in model.layers().iter().zip(&plan.layers) {
        for (&t, &b) in lp.top.iter().zip(&lp.bottom) {
            if layer.experts()[t] != layer.experts()[b] {
                return Err(Error::ReplacementNotApplied(format!(
                    "layer {}: expert {b} does not carry the weights of expert {t}",
                    layer.layer_index()
                )));
            }
        }
    }
    Ok(())
}

/// What happens to bottom-set logits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BottomMode {
    /// Excluded from routing entirely (`-inf`).
    #[default]
    Mask,
    /// Set to `0.0`; still competes in top-k and softmax.
    LiteralZero,
}

/// Top-set logits halved (when `halve_top`), bottom-set logits replaced per
/// `mode`, others untouched.
pub fn adjust_logits(z: &[f64], plan: &LayerPlan, mode: BottomMode, halve_top: bool) -> Vec<f64> {
    let mut out = z.to_vec();
    if halve_top {
        for &t in &plan.top {
            out[t] = z[t] / 2.0;
        }
    }
    for &b in &plan.bottom {
        out[b] = match mode {
            BottomMode::Mask => f64::NEG_INFINITY,
            BottomMode::LiteralZero => 0.0,
        };
    }
    out
}

/// Shifts the lower half of the sorted logits up by `lambda · IQR(z)` and the
/// upper half down by the same amount, returning values in the original
/// expert order. Ties sort by index.
pub fn calibrate_logits(z: &[f64], lambda: f64) -> Vec<f64> {
    if lambda == 0.0 || z.len() < 2 {
        return z.to_vec();
    }
    let shift = lambda * iqr(z).expect("non-empty");
    let mut order: Vec<usize> = (0..z.len()).collect();
    order.sort_by(|&a, &b| z[a].total_cmp(&z[b]).then(a.cmp(&b)));
    let half = z.len() / 2;
    let mut out = vec![0.0; z.len()];
    for (rank, &i) in order.iter().enumerate() {
        out[i] = if rank < half { z[i] + shift } else { z[i] - shift };
    }
    out
}

/// Calibrates only the finite entries, leaving excluded (`-inf`) ones alone.
fn calibrate_finite(z: &[f64], lambda: f64) -> Vec<f64> {
    let idx: Vec<usize> = (0..z.len()).filter(|&i| z[i].is_finite()).collect();
    let vals: Vec<f64> = idx.iter().map(|&i| z[i]).collect();
    let cal = calibrate_logits(&vals, lambda);
    let mut out = z.to_vec();
    for (&i, v) in idx.iter().zip(cal) {
        out[i] = v;
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PipelineOrder {
    #[default]
    CalibrateThenAdjust,
    AdjustThenCalibrate,
}

/// Which inference run the replacement plan is profiled on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProfileSource {
    #[default]
    Clean,
    Noisy,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CalibrationConfig {
    pub lambda: f64,
    pub n: usize,
    pub bottom_mode: BottomMode,
    pub replacement: bool,
    pub calibration: bool,
    /// Admit `lambda` up to 1.0 instead of below 0.5.
    pub extended_lambda: bool,
    /// Halve top-set logits during routing.
    pub halve_top_logits: bool,
    pub order: PipelineOrder,
    pub profile_source: ProfileSource,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        Self {
            lambda: 0.4,
            n: 2,
            bottom_mode: BottomMode::Mask,
            replacement: true,
            calibration: true,
            extended_lambda: false,
            halve_top_logits: true,
            order: PipelineOrder::CalibrateThenAdjust,
            profile_source: ProfileSource::Clean,
        }
    }
}

impl CalibrationConfig {
    /// Both components disabled.
    pub fn disabled() -> Self {
        Self {
            lambda: 0.0,
            n: 0,
            replacement: false,
            calibration: false,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = if self.extended_lambda {
            (0.0..=1.0).contains(&self.lambda)
        } else {
            (0.0..0.5).contains(&self.lambda)
        };
        if !ok {
            let domain = if self.extended_lambda { "[0, 1]" } else { "[0, 0.5)" };
            return Err(Error::InvalidConfig(format!(
                "lambda {} outside {domain}",
                self.lambda
            )));
        }
        Ok(())
    }

    /// Replacement count actually in effect.
    pub fn effective_n(&self) -> usize {
        if self.replacement {
            self.n
        } else {
            0
        }
    }

    pub fn effective_lambda(&self) -> f64 {
        if self.calibration {
            self.lambda
        } else {
            0.0
        }
    }
}

fn program_expert(expert: &ExpertFfn, noise: &PathNoise, rng: &mut RandomStream) -> (AnalogArray, AnalogArray) {
    (
        AnalogArray::program(expert.w_in().clone(), noise, &mut rng.child(0)),
        AnalogArray::program(expert.w_out().clone(), noise, &mut rng.child(1)),
    )
}

fn run_expert(
    arrays: &(AnalogArray, AnalogArray),
    expert: &ExpertFfn,
    x: &[f64],
    noise: &PathNoise,
    rng: &mut RandomStream,
) -> Result<Vec<f64>> {
    let h: Vec<f64> = arrays
        .0
        .forward(x, noise, rng)?
        .into_iter()
        .map(|v| expert.activation().apply(v))
        .collect();
    arrays.1.forward(&h, noise, rng)
}

/// `gate · f(x)` through one freshly programmed copy of `expert`.
pub fn single_expert_forward(
    expert: &ExpertFfn,
    x: &[f64],
    gate: f64,
    noise: &PathNoise,
    rng: &mut RandomStream,
) -> Result<Vec<f64>> {
    let arrays = program_expert(expert, noise, rng);
    let y = run_expert(&arrays, expert, x, noise, rng)?;
    Ok(y.into_iter().map(|v| gate * v).collect())
}

/// `(gate / 2) · (f_a(x) + f_b(x))` over two independently programmed
/// locations holding the same nominal weights.
pub fn duplicated_expert_forward(
    original: &ExpertFfn,
    copy: &ExpertFfn,
    x: &[f64],
    gate: f64,
    noise: &PathNoise,
    rng: &mut RandomStream,
) -> Result<Vec<f64>> {
    if original != copy {
        return Err(Error::ReplacementNotApplied(
            "the duplicated pair carries different nominal weights".into(),
        ));
    }
    let a = program_expert(original, noise, &mut rng.child(0xa));
    let b = program_expert(copy, noise, &mut rng.child(0xb));
    let ya = run_expert(&a, original, x, noise, rng)?;
    let yb = run_expert(&b, copy, x, noise, rng)?;
    let half = gate * 0.5;
    Ok(ya.iter().zip(&yb).map(|(u, v)| half * (u + v)).collect())
}

/// A replacement-patched model deployed with the calibrated routing pipeline.
#[derive(Debug, Clone)]
pub struct RomerDeployment<'m> {
    deployment: Deployment<'m>,
    plan: ReplacementPlan,
    calib: CalibrationConfig,
}

impl<'m> RomerDeployment<'m> {
    /// `patched` must already carry the plan's weight copies.
    pub fn program(
        patched: &'m MoeModel,
        plan: ReplacementPlan,
        calib: CalibrationConfig,
        noise: &NoiseConfig,
        seed: u64,
    ) -> Result<Self> {
        calib.validate()?;
        check_replacement_applied(patched, &plan)?;
        for (layer, lp) in patched.layers().iter().zip(&plan.layers) {
            let candidates = match calib.bottom_mode {
                BottomMode::Mask => layer.num_experts() - lp.bottom.len(),
                BottomMode::LiteralZero => layer.num_experts(),
            };
            if layer.router().k() > candidates {
                return Err(Error::InvalidK {
                    k: layer.router().k(),
                    len: candidates,
                });
            }
        }
        Ok(Self {
            deployment: Deployment::program(patched, noise, seed)?,
            plan,
            calib,
        })
    }

    pub fn deployment(&self) -> &Deployment<'m> {
        &self.deployment
    }

    pub fn plan(&self) -> &ReplacementPlan {
        &self.plan
    }

    /// Logits the router acts on, from the raw router outputs.
    pub fn routing_logits(&self, layer: usize, raw: &[f64]) -> Vec<f64> {
        let lp = &self.plan.layers[layer];
        let lambda = self.calib.effective_lambda();
        let mode = self.calib.bottom_mode;
        let halve = self.calib.halve_top_logits;
        match self.calib.order {
            PipelineOrder::CalibrateThenAdjust => {
                adjust_logits(&calibrate_logits(raw, lambda), lp, mode, halve)
            }
            PipelineOrder::AdjustThenCalibrate => {
                calibrate_finite(&adjust_logits(raw, lp, mode, halve), lambda)
            }
        }
    }

    pub fn layer_forward(&self, layer: usize, x: &[f64], token: usize) -> Result<(Vec<f64>, LayerRecord)> {
        let dep = &self.deployment;
        let model = dep.model();
        let raw = dep.router_logits(layer, x, token)?;
        let z = self.routing_logits(layer, &raw);
        let k = model.layers()[layer].router().k();
        let (selected, gates) = route(&z, k, model.gate_mode())?;
        let lp = &self.plan.layers[layer];
        let mut terms = Vec::with_capacity(selected.len());
        let mut dispatch = Vec::with_capacity(2 * selected.len());
        for (&e, &g) in selected.iter().zip(&gates) {
            match lp.partner(e) {
                Some(copy) => {
                    let ya = dep.expert_output(layer, e, x, token)?;
                    let yb = dep.expert_output(layer, copy, x, token)?;
                    let sum: Vec<f64> = ya.iter().zip(&yb).map(|(u, v)| u + v).collect();
                    let half = g * 0.5;
                    terms.push((half, sum));
                    dispatch.push((e, half));
                    dispatch.push((copy, half));
                }
                None => {
                    // A literal-zero bottom location may be read twice when its
                    // source is selected too.
                    let read = match lp.source_of(e) {
                        Some(src) if selected.contains(&src) => 1,
                        _ => 0,
                    };
                    terms.push((g, dep.expert_output_read(layer, e, x, token, read)?));
                    dispatch.push((e, g));
                }
            }
        }
        let out = combine(x, model.residual(), &terms);
        Ok((
            out,
            LayerRecord {
                logits: raw,
                selected,
                gates,
                dispatch,
            },
        ))
    }

    pub fn forward_token(&self, token: usize, x: &[f64]) -> Result<(Vec<f64>, TokenTrace)> {
        self.deployment
            .forward_token_with(x, |l, h| self.layer_forward(l, h, token))
    }

    pub fn forward(&self, tokens: &[Vec<f64>]) -> Result<(Vec<Vec<f64>>, RoutingTrace)> {
        let mut outputs = Vec::with_capacity(tokens.len());
        let mut trace = RoutingTrace::default();
        for (t, x) in tokens.iter().enumerate() {
            let (y, tt) = self.forward_token(t, x)?;
            outputs.push(y);
            trace.tokens.push(tt);
        }
        Ok((outputs, trace))
    }
}
