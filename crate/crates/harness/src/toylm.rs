//! Toy next-token language model with MoE layers, trained by plain SGD.
//!
//! Tokens come from a sparse random Markov chain. Each token is embedded,
//! passed through the MoE stack and unembedded to next-token logits. Top-k
//! selection is treated as a constant in the backward pass (gradients flow
//! through the selected experts and the softmax gates only). Embedding and
//! unembedding stay digital; only the MoE layers are deployed on noisy
//! arrays.

use anyhow::{ensure, Result};
use romer_core::math::{log_softmax, softmax, stream_key, topk_indices, Matrix, RandomStream};
use romer_core::moe::{Activation, Deployment, ExpertFfn, GateMode, MoeLayer, MoeModel, RouterSpec};
use romer_core::noise::NoiseConfig;
use romer_core::profiler::accumulate_activation;
use romer_core::romer::{apply_replacement, build_replacement_plan, CalibrationConfig, RomerDeployment};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToySpec {
    pub vocab: usize,
    pub hidden_dim: usize,
    pub inner_dim: usize,
    pub experts: usize,
    pub top_k: usize,
    pub layers: usize,
    /// Successors per token in the Markov chain.
    pub branching: usize,
    pub train_tokens: usize,
    pub eval_tokens: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for ToySpec {
    fn default() -> Self {
        Self {
            vocab: 32,
            hidden_dim: 16,
            inner_dim: 32,
            experts: 8,
            top_k: 2,
            layers: 2,
            branching: 3,
            train_tokens: 20_000,
            eval_tokens: 2_000,
            epochs: 3,
            learning_rate: 0.05,
            seed: 11,
        }
    }
}

impl ToySpec {
    pub fn validate(&self) -> Result<()> {
        ensure!((2..=64).contains(&self.vocab), "toy vocab must lie in 2..=64");
        ensure!(self.top_k >= 1 && self.top_k <= self.experts, "toy top_k must lie in 1..=experts");
        ensure!(self.hidden_dim > 0 && self.inner_dim > 0 && self.layers > 0, "toy dimensions must be positive");
        ensure!(self.branching >= 1 && self.branching <= self.vocab, "toy branching must lie in 1..=vocab");
        ensure!(self.train_tokens > 1 && self.eval_tokens > 1, "toy corpora need at least two tokens");
        ensure!(self.learning_rate > 0.0 && self.learning_rate.is_finite(), "learning rate must be positive");
        Ok(())
    }
}

/// Token sequence from a random sparse Markov chain.
pub fn markov_sequence(spec: &ToySpec, len: usize, stream: u64) -> Vec<usize> {
    let mut table_rng = RandomStream::new(spec.seed, 0x7ab1e);
    let table: Vec<Vec<(usize, f64)>> = (0..spec.vocab)
        .map(|_| {
            let mut next: Vec<usize> = (0..spec.vocab).collect();
            table_rng.shuffle(&mut next);
            let weights: Vec<f64> = (0..spec.branching).map(|_| table_rng.uniform() + 0.2).collect();
            let total: f64 = weights.iter().sum();
            next.into_iter().take(spec.branching).zip(weights.into_iter().map(|w| w / total)).collect()
        })
        .collect();
    let mut rng = RandomStream::new(spec.seed, stream);
    let mut cur = rng.below(spec.vocab);
    let mut seq = Vec::with_capacity(len);
    for _ in 0..len {
        seq.push(cur);
        let u = rng.uniform();
        let mut acc = 0.0;
        let row = &table[cur];
        cur = row.last().expect("branching >= 1").0;
        for &(tok, p) in row {
            acc += p;
            if u < acc {
                cur = tok;
                break;
            }
        }
    }
    seq
}

#[derive(Clone)]
struct Dense {
    rows: usize,
    cols: usize,
    w: Vec<f64>,
}

impl Dense {
    fn random(rows: usize, cols: usize, std: f64, rng: &mut RandomStream) -> Self {
        Self {
            rows,
            cols,
            w: (0..rows * cols).map(|_| std * rng.normal()).collect(),
        }
    }

    fn apply(&self, x: &[f64]) -> Vec<f64> {
        self.w.chunks(self.cols).map(|r| r.iter().zip(x).map(|(a, b)| a * b).sum()).collect()
    }

    fn apply_t(&self, g: &[f64], out: &mut [f64]) {
        for (r, gi) in self.w.chunks(self.cols).zip(g) {
            for (o, a) in out.iter_mut().zip(r) {
                *o += gi * a;
            }
        }
    }

    /// `w -= lr * g x^T`.
    fn step_outer(&mut self, g: &[f64], x: &[f64], lr: f64) {
        for (r, gi) in self.w.chunks_mut(self.cols).zip(g) {
            let s = lr * gi;
            for (a, xj) in r.iter_mut().zip(x) {
                *a -= s * xj;
            }
        }
    }

    fn to_matrix(&self) -> Matrix {
        Matrix::new(self.rows, self.cols, self.w.clone()).expect("finite weights")
    }
}

fn silu(v: f64) -> f64 {
    v / (1.0 + (-v).exp())
}

fn silu_grad(v: f64) -> f64 {
    let s = 1.0 / (1.0 + (-v).exp());
    s * (1.0 + v * (1.0 - s))
}

#[derive(Clone)]
struct TrainLayer {
    router: Dense,
    w_in: Vec<Dense>,
    w_out: Vec<Dense>,
}

struct LayerCache {
    x: Vec<f64>,
    probs: Vec<f64>,
    selected: Vec<usize>,
    pre: Vec<Vec<f64>>,
    post: Vec<Vec<f64>>,
    y: Vec<Vec<f64>>,
}

/// Trained model: embedding, MoE stack and unembedding.
#[derive(Debug, Clone)]
pub struct ToyLm {
    pub embed: Matrix,
    pub moe: MoeModel,
    pub unembed: Matrix,
}

impl ToyLm {
    pub fn embed_tokens(&self, seq: &[usize]) -> Vec<Vec<f64>> {
        seq.iter().map(|&t| self.embed.row(t).to_vec()).collect()
    }

    /// `exp` of the mean next-token negative log-likelihood, given MoE
    /// outputs for every position but the last.
    pub fn perplexity(&self, outputs: &[Vec<f64>], seq: &[usize]) -> Result<f64> {
        ensure!(outputs.len() + 1 >= seq.len() && seq.len() > 1, "output count does not match the sequence");
        let mut nll = 0.0;
        for (h, &next) in outputs.iter().zip(&seq[1..]) {
            let logits = romer_core::math::matvec(&self.unembed, h)?;
            nll -= log_softmax(&logits)?[next];
        }
        Ok((nll / (seq.len() - 1) as f64).exp())
    }
}

/// Trains the toy model on a fresh Markov sequence.
pub fn train_toy(spec: &ToySpec) -> Result<ToyLm> {
    spec.validate()?;
    let d = spec.hidden_dim;
    let mut rng = RandomStream::new(spec.seed, 0x7121);
    let mut embed = Dense::random(spec.vocab, d, 1.0, &mut rng);
    let mut unembed = Dense::random(spec.vocab, d, 1.0 / (d as f64).sqrt(), &mut rng);
    let mut layers: Vec<TrainLayer> = (0..spec.layers)
        .map(|_| TrainLayer {
            router: Dense::random(spec.experts, d, 1.0 / (d as f64).sqrt(), &mut rng),
            w_in: (0..spec.experts)
                .map(|_| Dense::random(spec.inner_dim, d, 1.0 / (d as f64).sqrt(), &mut rng))
                .collect(),
            w_out: (0..spec.experts)
                .map(|_| Dense::random(d, spec.inner_dim, 0.5 / (spec.inner_dim as f64).sqrt(), &mut rng))
                .collect(),
        })
        .collect();
    let seq = markov_sequence(spec, spec.train_tokens, 1);
    let lr = spec.learning_rate;
    for _ in 0..spec.epochs {
        for pair in seq.windows(2) {
            let (tok, next) = (pair[0], pair[1]);
            let mut h = embed.w[tok * d..(tok + 1) * d].to_vec();
            let mut caches = Vec::with_capacity(layers.len());
            for layer in &layers {
                let z = layer.router.apply(&h);
                let probs = softmax(&z)?;
                let selected = topk_indices(&z, spec.top_k)?;
                let mut out = h.clone();
                let (mut pre, mut post, mut ys) = (Vec::new(), Vec::new(), Vec::new());
                for &e in &selected {
                    let a = layer.w_in[e].apply(&h);
                    let u: Vec<f64> = a.iter().map(|&v| silu(v)).collect();
                    let y = layer.w_out[e].apply(&u);
                    for (o, yi) in out.iter_mut().zip(&y) {
                        *o += probs[e] * yi;
                    }
                    pre.push(a);
                    post.push(u);
                    ys.push(y);
                }
                caches.push(LayerCache {
                    x: h,
                    probs,
                    selected,
                    pre,
                    post,
                    y: ys,
                });
                h = out;
            }
            let logits = unembed.apply(&h);
            let mut g_logits = softmax(&logits)?;
            g_logits[next] -= 1.0;
            let mut g = vec![0.0; d];
            unembed.apply_t(&g_logits, &mut g);
            unembed.step_outer(&g_logits, &h, lr);

            for (layer, cache) in layers.iter_mut().zip(caches).rev() {
                let mut g_x = g.clone();
                let mut g_p = vec![0.0; spec.experts];
                for (slot, &e) in cache.selected.iter().enumerate() {
                    let p = cache.probs[e];
                    g_p[e] = g.iter().zip(&cache.y[slot]).map(|(a, b)| a * b).sum();
                    let g_y: Vec<f64> = g.iter().map(|v| p * v).collect();
                    let mut g_u = vec![0.0; spec.inner_dim];
                    layer.w_out[e].apply_t(&g_y, &mut g_u);
                    layer.w_out[e].step_outer(&g_y, &cache.post[slot], lr);
                    let g_a: Vec<f64> = g_u.iter().zip(&cache.pre[slot]).map(|(gu, &a)| gu * silu_grad(a)).collect();
                    layer.w_in[e].apply_t(&g_a, &mut g_x);
                    layer.w_in[e].step_outer(&g_a, &cache.x, lr);
                }
                let dot: f64 = cache.probs.iter().zip(&g_p).map(|(p, gp)| p * gp).sum();
                let g_z: Vec<f64> = cache.probs.iter().zip(&g_p).map(|(p, gp)| p * (gp - dot)).collect();
                layer.router.apply_t(&g_z, &mut g_x);
                layer.router.step_outer(&g_z, &cache.x, lr);
                g = g_x;
            }
            for (w, gi) in embed.w[tok * d..(tok + 1) * d].iter_mut().zip(&g) {
                *w -= lr * gi;
            }
        }
    }
    let moe_layers = layers
        .iter()
        .enumerate()
        .map(|(l, layer)| {
            let experts = layer
                .w_in
                .iter()
                .zip(&layer.w_out)
                .map(|(a, b)| ExpertFfn::new(a.to_matrix(), b.to_matrix(), Activation::Silu))
                .collect::<romer_core::Result<Vec<_>>>()?;
            MoeLayer::new(RouterSpec::new(layer.router.to_matrix(), spec.top_k)?, experts, l)
        })
        .collect::<romer_core::Result<Vec<_>>>()?;
    Ok(ToyLm {
        embed: embed.to_matrix(),
        moe: MoeModel::new(moe_layers, d, true, GateMode::FullSoftmax)?,
        unembed: unembed.to_matrix(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ToyReport {
    pub sigma: f64,
    pub clean: f64,
    /// Mean over seeds.
    pub vanilla: f64,
    pub romer: f64,
    pub seeds: Vec<(u64, f64, f64)>,
}

impl ToyReport {
    pub fn ordered(&self) -> bool {
        self.clean < self.romer && self.romer < self.vanilla
    }
}

/// Perplexity of the clean, vanilla noisy and calibrated toy model on a
/// held-out sequence, averaged over `seeds` noise draws.
pub fn evaluate_toy(lm: &ToyLm, spec: &ToySpec, noise: &NoiseConfig, calib: &CalibrationConfig, master: u64, seeds: usize) -> Result<ToyReport> {
    calib.validate()?;
    let seq = markov_sequence(spec, spec.eval_tokens, 2);
    let inputs = lm.embed_tokens(&seq[..seq.len() - 1]);
    let (clean_out, clean_trace) = Deployment::clean(&lm.moe).forward(&inputs)?;
    let clean = lm.perplexity(&clean_out, &seq)?;
    let map = accumulate_activation(&clean_trace, lm.moe.num_layers(), lm.moe.num_experts())?;
    let plan = build_replacement_plan(&map, calib.effective_n())?;
    let patched = apply_replacement(&lm.moe, &plan)?;
    let mut rows = Vec::with_capacity(seeds);
    for i in 0..seeds {
        let seed = stream_key(&[master, i as u64]);
        let (v_out, _) = Deployment::program(&lm.moe, noise, seed)?.forward(&inputs)?;
        let (r_out, _) = RomerDeployment::program(&patched, plan.clone(), *calib, noise, seed)?.forward(&inputs)?;
        rows.push((seed, lm.perplexity(&v_out, &seq)?, lm.perplexity(&r_out, &seq)?));
    }
    let n = seeds.max(1) as f64;
    Ok(ToyReport {
        sigma: noise.device.sigma_dev,
        clean,
        vanilla: rows.iter().map(|r| r.1).sum::<f64>() / n,
        romer: rows.iter().map(|r| r.2).sum::<f64>() / n,
        seeds: rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn markov_tokens_follow_the_table() {
        let spec = ToySpec::default();
        let seq = markov_sequence(&spec, 5000, 1);
        assert!(seq.iter().all(|&t| t < spec.vocab));
        let mut successors = vec![std::collections::BTreeSet::new(); spec.vocab];
        for w in seq.windows(2) {
            successors[w[0]].insert(w[1]);
        }
        assert!(successors.iter().all(|s| s.len() <= spec.branching));
    }

    #[test]
    fn training_beats_uniform_and_matches_deployment() {
        let spec = ToySpec {
            train_tokens: 3000,
            eval_tokens: 500,
            epochs: 2,
            ..ToySpec::default()
        };
        let lm = train_toy(&spec).unwrap();
        let report = evaluate_toy(&lm, &spec, &NoiseConfig::clean(), &CalibrationConfig::disabled(), 1, 1).unwrap();
        assert!(report.clean < spec.vocab as f64 / 2.0, "{}", report.clean);
        // clean config: every variant reproduces the clean model
        assert_eq!(report.vanilla, report.clean);
        assert_eq!(report.romer, report.clean);
    }
}
