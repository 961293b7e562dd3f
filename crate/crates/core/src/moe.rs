//! Toy Mixture-of-Experts network and its analog deployment.
//!
//! Tokens are pre-embedded hidden vectors. Each layer routes a token to its
//! top-k experts, gates them by softmax probabilities and sums the expert
//! outputs, optionally adding the residual input.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{matvec, softmax, topk_indices, Matrix, RandomStream};
use crate::noise::{AnalogArray, NoiseConfig, PathNoise};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    Relu,
    Gelu,
    #[default]
    Silu,
}

impl Activation {
    pub fn apply(self, v: f64) -> f64 {
        match self {
            Activation::Relu => v.max(0.0),
            // tanh approximation
            Activation::Gelu => {
                let c = (2.0 / std::f64::consts::PI).sqrt();
                0.5 * v * (1.0 + (c * (v + 0.044_715 * v * v * v)).tanh())
            }
            Activation::Silu => v / (1.0 + (-v).exp()),
        }
    }
}

/// How selected experts are weighted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GateMode {
    /// Softmax over all E logits, read at the selected indices.
    #[default]
    FullSoftmax,
    /// Selected softmax values renormalized to sum to one.
    Renormalized,
}

/// Two-matrix feed-forward expert: `w_out · act(w_in · x)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpertFfn {
    w_in: Matrix,
    w_out: Matrix,
    activation: Activation,
}

impl ExpertFfn {
    pub fn new(w_in: Matrix, w_out: Matrix, activation: Activation) -> Result<Self> {
        if w_in.rows() != w_out.cols() {
            return Err(Error::ShapeMismatch(format!(
                "expert inner dims disagree: w_in has {} rows, w_out has {} cols",
                w_in.rows(),
                w_out.cols()
            )));
        }
        if w_in.cols() != w_out.rows() {
            return Err(Error::ShapeMismatch(format!(
                "expert hidden dims disagree: w_in has {} cols, w_out has {} rows",
                w_in.cols(),
                w_out.rows()
            )));
        }
        Ok(Self {
            w_in,
            w_out,
            activation,
        })
    }

    pub fn w_in(&self) -> &Matrix {
        &self.w_in
    }

    pub fn w_out(&self) -> &Matrix {
        &self.w_out
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn hidden_dim(&self) -> usize {
        self.w_in.cols()
    }

    pub fn inner_dim(&self) -> usize {
        self.w_in.rows()
    }

    pub fn param_count(&self) -> usize {
        self.w_in.len() + self.w_out.len()
    }

    /// Noise-free forward.
    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        let h: Vec<f64> = matvec(&self.w_in, x)?
            .into_iter()
            .map(|v| self.activation.apply(v))
            .collect();
        matvec(&self.w_out, &h)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RouterSpec {
    weights: Matrix,
    k: usize,
}

impl RouterSpec {
    pub fn new(weights: Matrix, k: usize) -> Result<Self> {
        if k == 0 || k > weights.rows() {
            return Err(Error::InvalidK {
                k,
                len: weights.rows(),
            });
        }
        Ok(Self { weights, k })
    }

    pub fn weights(&self) -> &Matrix {
        &self.weights
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn num_experts(&self) -> usize {
        self.weights.rows()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MoeLayer {
    router: RouterSpec,
    pub(crate) experts: Vec<ExpertFfn>,
    layer_index: usize,
}

impl MoeLayer {
    pub fn new(router: RouterSpec, experts: Vec<ExpertFfn>, layer_index: usize) -> Result<Self> {
        if experts.len() != router.num_experts() {
            return Err(Error::ShapeMismatch(format!(
                "layer {layer_index}: router scores {} experts but {} are present",
                router.num_experts(),
                experts.len()
            )));
        }
        let hidden = router.weights.cols();
        if let Some((i, _)) = experts
            .iter()
            .enumerate()
            .find(|(_, e)| e.hidden_dim() != hidden)
        {
            return Err(Error::ShapeMismatch(format!(
                "layer {layer_index}: expert {i} hidden dim differs from router input dim {hidden}"
            )));
        }
        Ok(Self {
            router,
            experts,
            layer_index,
        })
    }

    pub fn router(&self) -> &RouterSpec {
        &self.router
    }

    pub fn experts(&self) -> &[ExpertFfn] {
        &self.experts
    }

    pub fn layer_index(&self) -> usize {
        self.layer_index
    }

    pub fn num_experts(&self) -> usize {
        self.experts.len()
    }

    pub fn hidden_dim(&self) -> usize {
        self.router.weights.cols()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MoeModel {
    pub(crate) layers: Vec<MoeLayer>,
    hidden_dim: usize,
    residual: bool,
    gate_mode: GateMode,
}

impl MoeModel {
    pub fn new(
        layers: Vec<MoeLayer>,
        hidden_dim: usize,
        residual: bool,
        gate_mode: GateMode,
    ) -> Result<Self> {
        if hidden_dim == 0 {
            return Err(Error::InvalidConfig("hidden_dim must be positive".into()));
        }
        for (i, layer) in layers.iter().enumerate() {
            if layer.hidden_dim() != hidden_dim {
                return Err(Error::ShapeMismatch(format!(
                    "layer {i} hidden dim {} differs from model hidden dim {hidden_dim}",
                    layer.hidden_dim()
                )));
            }
            if layer.layer_index != i {
                return Err(Error::ShapeMismatch(format!(
                    "layer at position {i} carries index {}",
                    layer.layer_index
                )));
            }
        }
        Ok(Self {
            layers,
            hidden_dim,
            residual,
            gate_mode,
        })
    }

    pub fn layers(&self) -> &[MoeLayer] {
        &self.layers
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    /// Expert count of the first layer (0 for an empty model).
    pub fn num_experts(&self) -> usize {
        self.layers.first().map_or(0, MoeLayer::num_experts)
    }

    pub fn hidden_dim(&self) -> usize {
        self.hidden_dim
    }

    pub fn residual(&self) -> bool {
        self.residual
    }

    pub fn gate_mode(&self) -> GateMode {
        self.gate_mode
    }

    pub fn with_gate_mode(mut self, gate_mode: GateMode) -> Self {
        self.gate_mode = gate_mode;
        self
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| {
                l.router.weights.len() + l.experts.iter().map(ExpertFfn::param_count).sum::<usize>()
            })
            .sum()
    }
}

/// Routing decision and physical dispatch of one token at one layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerRecord {
    /// Raw router outputs, as read from the (possibly noisy) router array.
    pub logits: Vec<f64>,
    /// Selected experts in routing order.
    pub selected: Vec<usize>,
    /// Gate of each selected expert.
    pub gates: Vec<f64>,
    /// Gate mass landing on each physical expert location. Equal to
    /// `selected`/`gates` unless computations are duplicated.
    pub dispatch: Vec<(usize, f64)>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TokenTrace {
    pub layers: Vec<LayerRecord>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RoutingTrace {
    pub tokens: Vec<TokenTrace>,
}

impl RoutingTrace {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Concatenates two traces in token order.
    pub fn concat(mut self, other: RoutingTrace) -> RoutingTrace {
        self.tokens.extend(other.tokens);
        self
    }
}

/// Selected experts and their gates from the logits used for routing.
pub fn route(z: &[f64], k: usize, mode: GateMode) -> Result<(Vec<usize>, Vec<f64>)> {
    let selected = topk_indices(z, k)?;
    let probs = softmax(z)?;
    let mut gates: Vec<f64> = selected.iter().map(|&i| probs[i]).collect();
    if mode == GateMode::Renormalized {
        let sum: f64 = gates.iter().sum();
        if sum > 0.0 {
            gates.iter_mut().for_each(|g| *g /= sum);
        }
    }
    Ok((selected, gates))
}

/// `Σ gate · y` accumulated in term order, plus `x` when `residual`.
pub(crate) fn combine(x: &[f64], residual: bool, terms: &[(f64, Vec<f64>)]) -> Vec<f64> {
    let mut acc = vec![0.0; x.len()];
    for (gate, y) in terms {
        for (a, v) in acc.iter_mut().zip(y) {
            *a += gate * v;
        }
    }
    if residual {
        for (a, v) in acc.iter_mut().zip(x) {
            *a += *v;
        }
    }
    acc
}

// Stream-key domains: device programming versus per-call draws.
const PROGRAM_DOMAIN: u64 = 0x5052_4f47;
const CALL_DOMAIN: u64 = 0x4341_4c4c;

const ROUTER_SLOT: u64 = 0;

fn expert_slot(expert: usize) -> u64 {
    expert as u64 + 1
}

#[derive(Debug, Clone)]
struct ProgrammedExpert {
    w_in: AnalogArray,
    w_out: AnalogArray,
    activation: Activation,
}

#[derive(Debug, Clone)]
struct ProgrammedLayer {
    router: AnalogArray,
    experts: Vec<ProgrammedExpert>,
}

/// A model programmed onto analog arrays under one deployment seed.
///
/// Each physical location (layer, router or expert slot, matrix) draws its
/// device noise from its own keyed stream, so two deployments with the same
/// seed share the realization of every location they have in common. Reads
/// draw ADC error, and device error in resample mode, from streams keyed by
/// token, layer and location.
#[derive(Debug, Clone)]
pub struct Deployment<'m> {
    model: &'m MoeModel,
    noise: NoiseConfig,
    seed: u64,
    layers: Vec<ProgrammedLayer>,
}

impl<'m> Deployment<'m> {
    pub fn program(model: &'m MoeModel, noise: &NoiseConfig, seed: u64) -> Result<Self> {
        noise.validate()?;
        let router_noise = noise.for_path(noise.perturb_router);
        let expert_noise = noise.for_path(noise.perturb_experts);
        let layers = model
            .layers
            .iter()
            .enumerate()
            .map(|(l, layer)| {
                let program = |m: &Matrix, path: &PathNoise, slot: u64, part: u64| {
                    let mut rng =
                        RandomStream::keyed(seed, &[PROGRAM_DOMAIN, l as u64, slot, part]);
                    AnalogArray::program(m.clone(), path, &mut rng)
                };
                ProgrammedLayer {
                    router: program(&layer.router.weights, &router_noise, ROUTER_SLOT, 0),
                    experts: layer
                        .experts
                        .iter()
                        .enumerate()
                        .map(|(e, ex)| ProgrammedExpert {
                            w_in: program(&ex.w_in, &expert_noise, expert_slot(e), 0),
                            w_out: program(&ex.w_out, &expert_noise, expert_slot(e), 1),
                            activation: ex.activation,
                        })
                        .collect(),
                }
            })
            .collect();
        Ok(Self {
            model,
            noise: *noise,
            seed,
            layers,
        })
    }

    /// Noise-free deployment.
    pub fn clean(model: &'m MoeModel) -> Self {
        Self::program(model, &NoiseConfig::clean(), 0).expect("clean config is valid")
    }

    pub fn model(&self) -> &'m MoeModel {
        self.model
    }

    pub fn noise(&self) -> &NoiseConfig {
        &self.noise
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    fn call_stream(&self, token: usize, layer: usize, slot: u64, part: u64) -> RandomStream {
        RandomStream::keyed(
            self.seed,
            &[CALL_DOMAIN, token as u64, layer as u64, slot, part],
        )
    }

    fn check_input(&self, layer: usize, x: &[f64]) -> Result<()> {
        if layer >= self.layers.len() {
            return Err(Error::IndexOutOfRange {
                context: "layer",
                index: layer,
                bound: self.layers.len(),
            });
        }
        if x.len() != self.model.hidden_dim {
            return Err(Error::DimensionMismatch {
                context: "token hidden dim",
                expected: self.model.hidden_dim,
                found: x.len(),
            });
        }
        Ok(())
    }

    /// Router logits for one token, through the noisy router when
    /// `perturb_router` is set.
    pub fn router_logits(&self, layer: usize, x: &[f64], token: usize) -> Result<Vec<f64>> {
        self.check_input(layer, x)?;
        let noise = self.noise.for_path(self.noise.perturb_router);
        let mut rng = self.call_stream(token, layer, ROUTER_SLOT, 0);
        self.layers[layer].router.forward(x, &noise, &mut rng)
    }

    /// Output of the expert stored at physical location `expert`.
    pub fn expert_output(
        &self,
        layer: usize,
        expert: usize,
        x: &[f64],
        token: usize,
    ) -> Result<Vec<f64>> {
        self.expert_output_read(layer, expert, x, token, 0)
    }

    /// Like [`Deployment::expert_output`] for the `read`-th access of the
    /// same location within one token and layer; each read draws its own
    /// call noise.
    pub fn expert_output_read(
        &self,
        layer: usize,
        expert: usize,
        x: &[f64],
        token: usize,
        read: u64,
    ) -> Result<Vec<f64>> {
        self.check_input(layer, x)?;
        let programmed = self.layers[layer]
            .experts
            .get(expert)
            .ok_or(Error::IndexOutOfRange {
                context: "expert",
                index: expert,
                bound: self.layers[layer].experts.len(),
            })?;
        let noise = self.noise.for_path(self.noise.perturb_experts);
        let slot = expert_slot(expert);
        let mut rng = self.call_stream(token, layer, slot, 2 * read);
        let h: Vec<f64> = programmed
            .w_in
            .forward(x, &noise, &mut rng)?
            .into_iter()
            .map(|v| programmed.activation.apply(v))
            .collect();
        let mut rng = self.call_stream(token, layer, slot, 2 * read + 1);
        programmed.w_out.forward(&h, &noise, &mut rng)
    }

    /// Standard top-k MoE layer.
    pub fn layer_forward(
        &self,
        layer: usize,
        x: &[f64],
        token: usize,
    ) -> Result<(Vec<f64>, LayerRecord)> {
        let logits = self.router_logits(layer, x, token)?;
        let k = self.model.layers[layer].router.k;
        let (selected, gates) = route(&logits, k, self.model.gate_mode)?;
        let terms = selected
            .iter()
            .zip(&gates)
            .map(|(&e, &g)| Ok((g, self.expert_output(layer, e, x, token)?)))
            .collect::<Result<Vec<_>>>()?;
        let out = combine(x, self.model.residual, &terms);
        let dispatch = selected.iter().copied().zip(gates.iter().copied()).collect();
        Ok((
            out,
            LayerRecord {
                logits,
                selected,
                gates,
                dispatch,
            },
        ))
    }

    pub fn forward_token(&self, token: usize, x: &[f64]) -> Result<(Vec<f64>, TokenTrace)> {
        self.forward_token_with(x, |l, h| self.layer_forward(l, h, token))
    }

    /// Runs every layer with a caller-supplied layer step.
    pub fn forward_token_with<F>(&self, x: &[f64], mut step: F) -> Result<(Vec<f64>, TokenTrace)>
    where
        F: FnMut(usize, &[f64]) -> Result<(Vec<f64>, LayerRecord)>,
    {
        if x.len() != self.model.hidden_dim {
            return Err(Error::DimensionMismatch {
                context: "token hidden dim",
                expected: self.model.hidden_dim,
                found: x.len(),
            });
        }
        let mut h = x.to_vec();
        let mut trace = TokenTrace::default();
        for l in 0..self.layers.len() {
            let (next, record) = step(l, &h)?;
            trace.layers.push(record);
            h = next;
        }
        Ok((h, trace))
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

/// Programs `model` under `noise` and `seed` and runs every token.
pub fn model_forward(
    model: &MoeModel,
    tokens: &[Vec<f64>],
    noise: &NoiseConfig,
    seed: u64,
) -> Result<(Vec<Vec<f64>>, RoutingTrace)> {
    Deployment::program(model, noise, seed)?.forward(tokens)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::variance;
    use crate::noise::NoiseMode;

    fn identity_expert(d: usize) -> ExpertFfn {
        ExpertFfn::new(Matrix::identity(d), Matrix::identity(d), Activation::Relu).unwrap()
    }

    fn zero_expert(d: usize) -> ExpertFfn {
        ExpertFfn::new(Matrix::zeros(d, d), Matrix::zeros(d, d), Activation::Relu).unwrap()
    }

    fn single_layer(router: Matrix, k: usize, experts: Vec<ExpertFfn>, residual: bool) -> MoeModel {
        let d = router.cols();
        let layer = MoeLayer::new(RouterSpec::new(router, k).unwrap(), experts, 0).unwrap();
        MoeModel::new(vec![layer], d, residual, GateMode::FullSoftmax).unwrap()
    }

    fn random_matrix(rows: usize, cols: usize, scale: f64, rng: &mut RandomStream) -> Matrix {
        Matrix::from_fn(rows, cols, |_, _| scale * rng.normal()).unwrap()
    }

    #[test]
    fn silu_and_gelu_values() {
        assert_eq!(Activation::Silu.apply(0.0), 0.0);
        assert!((Activation::Silu.apply(1.0) - 0.731_058_578_630_004_9).abs() < 1e-15);
        assert!((Activation::Gelu.apply(1.0) - 0.841_191_990_608_276_8).abs() < 1e-12);
        assert_eq!(Activation::Relu.apply(-3.0), 0.0);
    }

    #[test]
    fn invalid_shapes_rejected() {
        assert!(ExpertFfn::new(Matrix::zeros(4, 3), Matrix::zeros(3, 5), Activation::Silu).is_err());
        assert!(RouterSpec::new(Matrix::zeros(4, 3), 5).is_err());
        assert!(RouterSpec::new(Matrix::zeros(4, 3), 0).is_err());
        let router = RouterSpec::new(Matrix::zeros(2, 3), 1).unwrap();
        assert!(MoeLayer::new(router, vec![zero_expert(3)], 0).is_err());
    }

    #[test]
    fn zero_router_gives_zero_logits() {
        let model = single_layer(Matrix::zeros(3, 3), 1, vec![zero_expert(3); 3], false);
        let dep = Deployment::clean(&model);
        assert_eq!(dep.router_logits(0, &[1.0, 2.0, 3.0], 0).unwrap(), vec![0.0; 3]);
    }

    #[test]
    fn identity_router_returns_input() {
        let model = single_layer(Matrix::identity(3), 1, vec![zero_expert(3); 3], false);
        let dep = Deployment::clean(&model);
        let x = [0.5, -1.0, 2.0];
        assert_eq!(dep.router_logits(0, &x, 0).unwrap(), x.to_vec());
        assert!(dep.router_logits(0, &[1.0], 0).is_err());
    }

    #[test]
    fn router_noise_inflates_logit_variance() {
        let d = 16;
        let mut rng = RandomStream::new(5, 0);
        let router = random_matrix(d, d, 1.0 / (d as f64).sqrt(), &mut rng);
        let model = single_layer(router, 2, vec![zero_expert(d); d], false);
        let tokens: Vec<Vec<f64>> = (0..1000)
            .map(|_| (0..d).map(|_| rng.normal()).collect())
            .collect();
        let clean = Deployment::clean(&model);
        let noisy = Deployment::program(
            &model,
            &NoiseConfig::device_only(0.1).with_mode(NoiseMode::ResamplePerCall),
            9,
        )
        .unwrap();
        let mean_var = |dep: &Deployment| {
            tokens
                .iter()
                .enumerate()
                .map(|(t, x)| variance(&dep.router_logits(0, x, t).unwrap()))
                .sum::<f64>()
                / tokens.len() as f64
        };
        assert!(mean_var(&noisy) > mean_var(&clean));
    }

    #[test]
    fn full_selection_with_identity_expert() {
        // k == E: gate of the identity expert is softmax(z)_0.
        let d = 2;
        let router = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let x = vec![0.3, -0.7];
        for residual in [false, true] {
            let model = single_layer(router.clone(), 2, vec![identity_expert(d), zero_expert(d)], residual);
            let (out, trace) = model_forward(&model, &[x.clone()], &NoiseConfig::clean(), 0).unwrap();
            let p = softmax(&x).unwrap()[0];
            for j in 0..d {
                let relu = x[j].max(0.0);
                let want = p * relu + if residual { x[j] } else { 0.0 };
                assert_eq!(out[0][j], want);
            }
            assert_eq!(trace.tokens[0].layers[0].selected.len(), 2);
        }
    }

    #[test]
    fn identical_experts_make_selection_irrelevant() {
        let d = 4;
        let mut rng = RandomStream::new(2, 2);
        let expert = ExpertFfn::new(
            random_matrix(6, d, 0.5, &mut rng),
            random_matrix(d, 6, 0.5, &mut rng),
            Activation::Silu,
        )
        .unwrap();
        let router_a = random_matrix(5, d, 1.0, &mut rng);
        let router_b = random_matrix(5, d, 1.0, &mut rng);
        let x: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
        let run = |router: Matrix| {
            let model = single_layer(router, 2, vec![expert.clone(); 5], false)
                .with_gate_mode(GateMode::Renormalized);
            model_forward(&model, &[x.clone()], &NoiseConfig::clean(), 0).unwrap()
        };
        let (a, ta) = run(router_a);
        let (b, tb) = run(router_b);
        assert_ne!(ta.tokens[0].layers[0].selected, tb.tokens[0].layers[0].selected);
        for (u, v) in a[0].iter().zip(&b[0]) {
            assert!((u - v).abs() < 1e-12);
        }
    }

    #[test]
    fn two_expert_sharp_gate() {
        // Router logits [5, -5] for x = [1]; gate = softmax([5,-5])_0 = 1/(1+e^-10).
        let router = Matrix::from_rows(&[vec![5.0], vec![-5.0]]).unwrap();
        let e0 = ExpertFfn::new(
            Matrix::from_rows(&[vec![2.0]]).unwrap(),
            Matrix::from_rows(&[vec![1.5]]).unwrap(),
            Activation::Relu,
        )
        .unwrap();
        let model = single_layer(router, 1, vec![e0.clone(), zero_expert(1)], false);
        let (out, _) = model_forward(&model, &[vec![1.0]], &NoiseConfig::clean(), 0).unwrap();
        let f0 = e0.forward(&[1.0]).unwrap()[0];
        let gate = 1.0 / (1.0 + (-10.0f64).exp());
        assert!((gate - 0.99995).abs() < 1e-5);
        assert!((out[0][0] - gate * f0).abs() <= 1e-4 * f0.abs());
    }

    #[test]
    fn zero_layers_pass_through() {
        let model = MoeModel::new(vec![], 3, true, GateMode::FullSoftmax).unwrap();
        let tokens = vec![vec![1.0, 2.0, 3.0], vec![-1.0, 0.0, 0.5]];
        let (out, trace) = model_forward(&model, &tokens, &NoiseConfig::device_only(0.3), 4).unwrap();
        assert_eq!(out, tokens);
        assert_eq!(trace.len(), 2);
    }

    /// Independent layer-by-layer recomputation written out longhand.
    fn manual_forward(model: &MoeModel, x: &[f64]) -> Vec<f64> {
        let mut h = x.to_vec();
        for layer in model.layers() {
            let w = layer.router().weights();
            let z: Vec<f64> = (0..w.rows())
                .map(|r| (0..w.cols()).map(|c| w.get(r, c) * h[c]).sum())
                .collect();
            let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let denom: f64 = z.iter().map(|v| (v - max).exp()).sum();
            let mut idx: Vec<usize> = (0..z.len()).collect();
            idx.sort_by(|&a, &b| z[b].partial_cmp(&z[a]).unwrap().then(a.cmp(&b)));
            let mut next = h.clone();
            for &e in &idx[..layer.router().k()] {
                let gate = (z[e] - max).exp() / denom;
                let ex = &layer.experts()[e];
                let inner: Vec<f64> = (0..ex.inner_dim())
                    .map(|r| {
                        let s: f64 = (0..ex.hidden_dim()).map(|c| ex.w_in().get(r, c) * h[c]).sum();
                        s / (1.0 + (-s).exp())
                    })
                    .collect();
                for (j, n) in next.iter_mut().enumerate() {
                    let y: f64 = (0..ex.inner_dim()).map(|c| ex.w_out().get(j, c) * inner[c]).sum();
                    *n += gate * y;
                }
            }
            h = next;
        }
        h
    }

    fn random_model(layers: usize, experts: usize, k: usize, d: usize, inner: usize, seed: u64) -> MoeModel {
        let mut rng = RandomStream::new(seed, 0);
        let layers = (0..layers)
            .map(|l| {
                let router = RouterSpec::new(random_matrix(experts, d, 1.0, &mut rng), k).unwrap();
                let ex = (0..experts)
                    .map(|_| {
                        ExpertFfn::new(
                            random_matrix(inner, d, 0.4, &mut rng),
                            random_matrix(d, inner, 0.4, &mut rng),
                            Activation::Silu,
                        )
                        .unwrap()
                    })
                    .collect();
                MoeLayer::new(router, ex, l).unwrap()
            })
            .collect();
        MoeModel::new(layers, d, true, GateMode::FullSoftmax).unwrap()
    }

    #[test]
    fn two_layer_model_matches_manual_computation() {
        let model = random_model(2, 4, 2, 3, 5, 77);
        let x = vec![0.4, -1.2, 0.9];
        let (out, _) = model_forward(&model, &[x.clone()], &NoiseConfig::clean(), 0).unwrap();
        let want = manual_forward(&model, &x);
        for (a, b) in out[0].iter().zip(&want) {
            assert!((a - b).abs() <= 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn clean_forward_is_deterministic() {
        let model = random_model(3, 6, 2, 4, 8, 1);
        let tokens: Vec<Vec<f64>> = (0..5).map(|i| vec![i as f64 * 0.1; 4]).collect();
        let a = model_forward(&model, &tokens, &NoiseConfig::clean(), 1).unwrap();
        let b = model_forward(&model, &tokens, &NoiseConfig::clean(), 2).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn noisy_forward_is_seed_deterministic() {
        let model = random_model(3, 6, 2, 4, 8, 1);
        let tokens: Vec<Vec<f64>> = (0..5).map(|i| vec![i as f64 * 0.1 - 0.2; 4]).collect();
        let mut cfg = NoiseConfig::device_only(0.1);
        cfg.adc = crate::noise::AdcSpec::new(1.0, 8, true).unwrap();
        let a = model_forward(&model, &tokens, &cfg, 5).unwrap();
        let b = model_forward(&model, &tokens, &cfg, 5).unwrap();
        let c = model_forward(&model, &tokens, &cfg, 6).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.0, c.0);
    }

    #[test]
    fn trace_gates_are_softmax_values() {
        let model = random_model(2, 6, 2, 4, 8, 3);
        let tokens: Vec<Vec<f64>> = (0..20).map(|i| vec![(i as f64).sin(); 4]).collect();
        for mode in [GateMode::FullSoftmax, GateMode::Renormalized] {
            let model = model.clone().with_gate_mode(mode);
            let (_, trace) =
                model_forward(&model, &tokens, &NoiseConfig::device_only(0.05), 2).unwrap();
            for tt in &trace.tokens {
                for rec in &tt.layers {
                    assert_eq!(rec.selected.len(), 2);
                    let p = softmax(&rec.logits).unwrap();
                    let sum: f64 = rec.gates.iter().sum();
                    for (&e, &g) in rec.selected.iter().zip(&rec.gates) {
                        assert!(g >= 0.0);
                        if mode == GateMode::FullSoftmax {
                            assert_eq!(g, p[e]);
                        }
                    }
                    if mode == GateMode::Renormalized {
                        assert!((sum - 1.0).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn routing_is_shift_invariant() {
        let z = vec![0.3, -1.0, 2.0, 1.9, 0.0];
        let shifted: Vec<f64> = z.iter().map(|v| v + 7.5).collect();
        let (sa, ga) = route(&z, 2, GateMode::FullSoftmax).unwrap();
        let (sb, gb) = route(&shifted, 2, GateMode::FullSoftmax).unwrap();
        assert_eq!(sa, sb);
        for (a, b) in ga.iter().zip(&gb) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
