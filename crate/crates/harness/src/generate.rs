//! Synthetic models and token corpora.
//!
//! In specialized mode every layer assigns each cluster of the token
//! geometry its own group of `k` experts. A group's router rows are
//! orthogonal to its own centroid and point away from all the others, so a
//! cluster token gives its group logits near zero and every other expert a
//! logit near `-router_scale`. Experts left over after all clusters are
//! served stay dormant.

use romer_core::math::{Matrix, RandomStream};
use romer_core::moe::{Activation, ExpertFfn, GateMode, MoeLayer, MoeModel, RouterSpec};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum GenerateError {
    #[error("invalid model spec: {0}")]
    InvalidSpec(String),
    #[error(transparent)]
    Core(#[from] romer_core::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GeneratorMode {
    #[default]
    Specialized,
    Random,
}

/// Shared cluster geometry of models and corpora.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Geometry {
    pub clusters: usize,
    pub seed: u64,
}

impl Default for Geometry {
    fn default() -> Self {
        Self { clusters: 7, seed: 7 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSpec {
    pub mode: GeneratorMode,
    pub layers: usize,
    pub experts: usize,
    pub top_k: usize,
    pub hidden_dim: usize,
    pub inner_dim: usize,
    pub seed: u64,
    pub activation: Activation,
    pub residual: bool,
    pub gate_mode: GateMode,
    /// Logit gap between a cluster's own experts and the rest.
    pub router_scale: f64,
    /// Std of the random component of each router row.
    pub router_jitter: f64,
    /// Output scale of each expert relative to its input.
    pub expert_scale: f64,
    /// Largest replacement count the model must support (`2n <= E`).
    pub max_ablation_n: usize,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self {
            mode: GeneratorMode::Specialized,
            layers: 8,
            experts: 16,
            top_k: 2,
            hidden_dim: 32,
            inner_dim: 64,
            seed: 1,
            activation: Activation::Silu,
            residual: true,
            gate_mode: GateMode::FullSoftmax,
            router_scale: 6.0,
            router_jitter: 0.05,
            expert_scale: 0.3,
            max_ablation_n: 0,
        }
    }
}

impl ModelSpec {
    pub fn validate(&self, geometry: &Geometry) -> Result<(), GenerateError> {
        let bad = |m: String| Err(GenerateError::InvalidSpec(m));
        if self.layers == 0 || self.experts == 0 || self.hidden_dim == 0 || self.inner_dim == 0 {
            return bad("layers, experts, hidden_dim and inner_dim must be positive".into());
        }
        if self.top_k == 0 || self.top_k > self.experts {
            return bad(format!("top_k = {} must lie in 1..={}", self.top_k, self.experts));
        }
        if 2 * self.max_ablation_n > self.experts {
            return bad(format!(
                "max_ablation_n = {} needs at least {} experts, have {}",
                self.max_ablation_n,
                2 * self.max_ablation_n,
                self.experts
            ));
        }
        for (name, v) in [
            ("router_scale", self.router_scale),
            ("router_jitter", self.router_jitter),
            ("expert_scale", self.expert_scale),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return bad(format!("{name} = {v} must be finite and nonnegative"));
            }
        }
        if self.mode == GeneratorMode::Specialized {
            if geometry.clusters == 0 {
                return bad("specialized mode needs at least one cluster".into());
            }
            if geometry.clusters * self.top_k > self.experts {
                return bad(format!(
                    "{} clusters of {} experts exceed E = {}",
                    geometry.clusters, self.top_k, self.experts
                ));
            }
            if geometry.clusters > self.hidden_dim {
                return bad(format!(
                    "{} clusters need hidden_dim >= {}",
                    geometry.clusters, geometry.clusters
                ));
            }
        }
        Ok(())
    }

    /// Experts per layer with no cluster of their own.
    pub fn dormant_experts(&self, geometry: &Geometry) -> usize {
        match self.mode {
            GeneratorMode::Specialized => self.experts - geometry.clusters * self.top_k,
            GeneratorMode::Random => 0,
        }
    }
}

/// `count` orthonormal unit vectors in `dim` dimensions (Gram-Schmidt over
/// Gaussian draws).
pub fn cluster_centroids(dim: usize, count: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = RandomStream::new(seed, 0xce47);
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(count);
    while basis.len() < count {
        let mut v: Vec<f64> = (0..dim).map(|_| rng.normal()).collect();
        for b in &basis {
            let proj = dot(&v, b);
            for (x, y) in v.iter_mut().zip(b) {
                *x -= proj * y;
            }
        }
        let norm = dot(&v, &v).sqrt();
        if norm > 1e-6 {
            basis.push(v.into_iter().map(|x| x / norm).collect());
        }
    }
    basis
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn gaussian(rows: usize, cols: usize, std: f64, rng: &mut RandomStream) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| std * rng.normal()).expect("finite draws")
}

pub fn generate_model(spec: &ModelSpec, geometry: &Geometry) -> Result<MoeModel, GenerateError> {
    spec.validate(geometry)?;
    let d = spec.hidden_dim;
    let centroids = match spec.mode {
        GeneratorMode::Specialized => cluster_centroids(d, geometry.clusters, geometry.seed),
        GeneratorMode::Random => Vec::new(),
    };
    let layers = (0..spec.layers)
        .map(|l| {
            let rng = RandomStream::keyed(spec.seed, &[l as u64]);
            let router = match spec.mode {
                GeneratorMode::Specialized => specialized_router(spec, &centroids, &mut rng.child(0)),
                GeneratorMode::Random => gaussian(spec.experts, d, spec.router_scale / (d as f64).sqrt(), &mut rng.child(0)),
            };
            let mut erng = rng.child(1);
            let experts = (0..spec.experts)
                .map(|_| {
                    let w_in = gaussian(spec.inner_dim, d, 1.0 / (d as f64).sqrt(), &mut erng);
                    let w_out = gaussian(d, spec.inner_dim, spec.expert_scale / (spec.inner_dim as f64).sqrt(), &mut erng);
                    ExpertFfn::new(w_in, w_out, spec.activation)
                })
                .collect::<Result<Vec<_>, _>>()?;
            Ok(MoeLayer::new(RouterSpec::new(router, spec.top_k)?, experts, l)?)
        })
        .collect::<Result<Vec<_>, GenerateError>>()?;
    Ok(MoeModel::new(layers, d, spec.residual, spec.gate_mode)?)
}

fn specialized_router(spec: &ModelSpec, centroids: &[Vec<f64>], rng: &mut RandomStream) -> Matrix {
    let d = spec.hidden_dim;
    let mut slots: Vec<usize> = (0..spec.experts).collect();
    rng.shuffle(&mut slots);
    // owner[e] is the cluster served by expert e, if any
    let mut owner = vec![None; spec.experts];
    for (c, group) in slots.chunks(spec.top_k).take(centroids.len()).enumerate() {
        for &e in group {
            owner[e] = Some(c);
        }
    }
    let jitter = spec.router_jitter / (d as f64).sqrt();
    let mut data = Vec::with_capacity(spec.experts * d);
    for own in owner {
        let mut row: Vec<f64> = (0..d).map(|_| jitter * rng.normal()).collect();
        for (c, mu) in centroids.iter().enumerate() {
            if own != Some(c) {
                for (r, m) in row.iter_mut().zip(mu) {
                    *r -= spec.router_scale * m;
                }
            }
        }
        data.extend(row);
    }
    Matrix::new(spec.experts, d, data).expect("finite router")
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusSpec {
    pub tokens: usize,
    /// Within-cluster perturbation before renormalization.
    pub spread: f64,
    pub seed: u64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self {
            tokens: 1024,
            spread: 0.15,
            seed: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub tokens: Vec<Vec<f64>>,
    /// Cluster of each token.
    pub labels: Vec<usize>,
}

/// Unit-norm tokens around equiprobable cluster centroids.
pub fn generate_corpus(spec: &CorpusSpec, geometry: &Geometry, dim: usize) -> Corpus {
    let clusters = geometry.clusters.clamp(1, dim.max(1));
    let centroids = cluster_centroids(dim, clusters, geometry.seed);
    let mut rng = RandomStream::new(spec.seed, 0xc0);
    let scale = spec.spread / (dim as f64).sqrt();
    let mut tokens = Vec::with_capacity(spec.tokens);
    let mut labels = Vec::with_capacity(spec.tokens);
    for _ in 0..spec.tokens {
        let c = rng.below(clusters);
        let mut v: Vec<f64> = centroids[c].iter().map(|m| m + scale * rng.normal()).collect();
        if spec.spread > 0.0 {
            let norm = dot(&v, &v).sqrt();
            v.iter_mut().for_each(|x| *x /= norm);
        } else {
            v = centroids[c].clone();
        }
        tokens.push(v);
        labels.push(c);
    }
    Corpus { tokens, labels }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn centroids_are_orthonormal() {
        let c = cluster_centroids(12, 5, 3);
        for i in 0..5 {
            for j in 0..5 {
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((dot(&c[i], &c[j]) - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn deterministic_and_validated() {
        let g = Geometry::default();
        let spec = ModelSpec::default();
        assert_eq!(generate_model(&spec, &g).unwrap(), generate_model(&spec, &g).unwrap());
        let bad = ModelSpec {
            experts: 4,
            top_k: 5,
            ..ModelSpec::default()
        };
        assert!(generate_model(&bad, &g).is_err());
        let too_many = ModelSpec {
            max_ablation_n: 9,
            ..ModelSpec::default()
        };
        assert!(too_many.validate(&g).is_err());
    }

    #[test]
    fn corpus_edge_cases() {
        let g = Geometry::default();
        let empty = generate_corpus(&CorpusSpec { tokens: 0, ..CorpusSpec::default() }, &g, 32);
        assert!(empty.tokens.is_empty());
        let exact = generate_corpus(&CorpusSpec { spread: 0.0, ..CorpusSpec::default() }, &g, 32);
        let centroids = cluster_centroids(32, 7, g.seed);
        for (t, &c) in exact.tokens.iter().zip(&exact.labels) {
            assert_eq!(t, &centroids[c]);
        }
        let noisy = generate_corpus(&CorpusSpec::default(), &g, 32);
        for t in &noisy.tokens {
            assert!((dot(t, t) - 1.0).abs() < 1e-12);
        }
    }
}
