//! Routing statistics over a calibration corpus.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::math::{log_softmax, variance};
use crate::moe::RoutingTrace;

/// Cumulative gate mass per (layer, expert location), plus a selection
/// count channel.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationMap {
    layers: usize,
    experts: usize,
    tokens: usize,
    mass: Vec<f64>,
    counts: Vec<u64>,
}

impl ActivationMap {
    pub fn zeros(layers: usize, experts: usize) -> Self {
        Self {
            layers,
            experts,
            tokens: 0,
            mass: vec![0.0; layers * experts],
            counts: vec![0; layers * experts],
        }
    }

    /// Map from raw mass values (row-major, layer by layer).
    pub fn from_mass(layers: usize, experts: usize, tokens: usize, mass: Vec<f64>) -> Result<Self> {
        if mass.len() != layers * experts {
            return Err(Error::DimensionMismatch {
                context: "activation map",
                expected: layers * experts,
                found: mass.len(),
            });
        }
        if mass.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::InvalidConfig(
                "activation mass must be finite and nonnegative".into(),
            ));
        }
        Ok(Self {
            layers,
            experts,
            tokens,
            mass,
            counts: vec![0; layers * experts],
        })
    }

    pub fn num_layers(&self) -> usize {
        self.layers
    }

    pub fn num_experts(&self) -> usize {
        self.experts
    }

    pub fn token_count(&self) -> usize {
        self.tokens
    }

    pub fn get(&self, layer: usize, expert: usize) -> f64 {
        self.mass[layer * self.experts + expert]
    }

    pub fn count(&self, layer: usize, expert: usize) -> u64 {
        self.counts[layer * self.experts + expert]
    }

    pub fn layer(&self, layer: usize) -> &[f64] {
        &self.mass[layer * self.experts..(layer + 1) * self.experts]
    }

    pub fn layer_counts(&self, layer: usize) -> &[u64] {
        &self.counts[layer * self.experts..(layer + 1) * self.experts]
    }

    pub fn mass(&self) -> &[f64] {
        &self.mass
    }

    /// Entrywise sum of two maps of the same shape.
    pub fn merge(&self, other: &ActivationMap) -> Result<ActivationMap> {
        if self.layers != other.layers || self.experts != other.experts {
            return Err(Error::ShapeMismatch(format!(
                "cannot merge {}x{} map with {}x{} map",
                self.layers, self.experts, other.layers, other.experts
            )));
        }
        Ok(ActivationMap {
            layers: self.layers,
            experts: self.experts,
            tokens: self.tokens + other.tokens,
            mass: self.mass.iter().zip(&other.mass).map(|(a, b)| a + b).collect(),
            counts: self.counts.iter().zip(&other.counts).map(|(a, b)| a + b).collect(),
        })
    }
}

/// Sums the gate mass dispatched to each expert location over every
/// (token, layer) event of the trace.
pub fn accumulate_activation(trace: &RoutingTrace, layers: usize, experts: usize) -> Result<ActivationMap> {
    let mut map = ActivationMap::zeros(layers, experts);
    for token in &trace.tokens {
        if token.layers.len() > layers {
            return Err(Error::IndexOutOfRange {
                context: "trace layer",
                index: token.layers.len() - 1,
                bound: layers,
            });
        }
        for (l, record) in token.layers.iter().enumerate() {
            for &(e, gate) in &record.dispatch {
                if e >= experts {
                    return Err(Error::IndexOutOfRange {
                        context: "trace expert",
                        index: e,
                        bound: experts,
                    });
                }
                map.mass[l * experts + e] += gate;
                map.counts[l * experts + e] += 1;
            }
        }
        map.tokens += 1;
    }
    Ok(map)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerBalance {
    /// Entropy of the normalized layer mass divided by `ln E`.
    pub entropy: f64,
    pub max_mean_ratio: f64,
    /// Fraction of experts with mass below `tau` times the uniform share.
    pub underactivated_fraction: f64,
    /// True when the layer received no mass at all.
    pub empty: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoadBalanceReport {
    pub tau: f64,
    pub layers: Vec<LayerBalance>,
}

impl LoadBalanceReport {
    pub fn mean_entropy(&self) -> f64 {
        mean(self.layers.iter().map(|l| l.entropy))
    }

    pub fn mean_underactivation(&self) -> f64 {
        mean(self.layers.iter().map(|l| l.underactivated_fraction))
    }

    /// `key = value` text, one entry per line.
    pub fn to_key_values(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "tau = {}", self.tau);
        let _ = writeln!(out, "layers = {}", self.layers.len());
        let _ = writeln!(out, "mean_entropy = {}", self.mean_entropy());
        let _ = writeln!(out, "mean_underactivation = {}", self.mean_underactivation());
        for (i, l) in self.layers.iter().enumerate() {
            let _ = writeln!(out, "layer.{i}.entropy = {}", l.entropy);
            let _ = writeln!(out, "layer.{i}.max_mean_ratio = {}", l.max_mean_ratio);
            let _ = writeln!(out, "layer.{i}.underactivated_fraction = {}", l.underactivated_fraction);
            let _ = writeln!(out, "layer.{i}.empty = {}", l.empty);
        }
        out
    }
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// Normalized entropy of a nonnegative vector (0 for an all-zero vector or a
/// single entry).
pub fn normalized_entropy(values: &[f64]) -> f64 {
    let total: f64 = values.iter().sum();
    if total <= 0.0 || values.len() < 2 {
        return 0.0;
    }
    let h: f64 = values
        .iter()
        .filter(|v| **v > 0.0)
        .map(|v| {
            let p = v / total;
            -p * p.ln()
        })
        .sum();
    (h / (values.len() as f64).ln()).clamp(0.0, 1.0)
}

pub fn balance_report(map: &ActivationMap, tau: f64) -> LoadBalanceReport {
    let e = map.experts as f64;
    let layers = (0..map.layers)
        .map(|l| {
            let row = map.layer(l);
            let total: f64 = row.iter().sum();
            let mean_share = total / e;
            let max = row.iter().copied().fold(0.0, f64::max);
            let under = row.iter().filter(|v| **v < tau * mean_share).count();
            LayerBalance {
                entropy: normalized_entropy(row),
                max_mean_ratio: if mean_share > 0.0 { max / mean_share } else { 0.0 },
                underactivated_fraction: under as f64 / e,
                empty: total <= 0.0,
            }
        })
        .collect();
    LoadBalanceReport { tau, layers }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerSpread {
    pub clean_mean_variance: f64,
    pub noisy_mean_variance: f64,
    /// `noisy / clean`; 1 when both are zero.
    pub ratio: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogitSpreadStats {
    pub layers: Vec<LayerSpread>,
}

impl LogitSpreadStats {
    pub fn mean_ratio(&self) -> f64 {
        mean(self.layers.iter().map(|l| l.ratio))
    }
}

/// Per-layer mean over tokens of the per-token logit variance, noisy against
/// clean.
pub fn logit_spread(clean: &RoutingTrace, noisy: &RoutingTrace) -> Result<LogitSpreadStats> {
    if clean.tokens.len() != noisy.tokens.len() {
        return Err(Error::ShapeMismatch(format!(
            "traces cover {} and {} tokens",
            clean.tokens.len(),
            noisy.tokens.len()
        )));
    }
    let layers = clean.tokens.first().map_or(0, |t| t.layers.len());
    let mut sums = vec![(0.0, 0.0); layers];
    for (t, (a, b)) in clean.tokens.iter().zip(&noisy.tokens).enumerate() {
        if a.layers.len() != layers || b.layers.len() != layers {
            return Err(Error::ShapeMismatch(format!(
                "token {t} has {} / {} layers, expected {layers}",
                a.layers.len(),
                b.layers.len()
            )));
        }
        for (l, (ra, rb)) in a.layers.iter().zip(&b.layers).enumerate() {
            if ra.logits.len() != rb.logits.len() {
                return Err(Error::ShapeMismatch(format!(
                    "token {t} layer {l}: {} vs {} logits",
                    ra.logits.len(),
                    rb.logits.len()
                )));
            }
            sums[l].0 += variance(&ra.logits);
            sums[l].1 += variance(&rb.logits);
        }
    }
    let n = clean.tokens.len().max(1) as f64;
    Ok(LogitSpreadStats {
        layers: sums
            .into_iter()
            .map(|(c, d)| {
                let (c, d) = (c / n, d / n);
                LayerSpread {
                    clean_mean_variance: c,
                    noisy_mean_variance: d,
                    ratio: if c == 0.0 && d == 0.0 { 1.0 } else { d / c },
                }
            })
            .collect(),
    })
}

fn write_grid<T: std::fmt::Display>(
    path: &Path,
    layers: usize,
    experts: usize,
    tokens: usize,
    values: &[T],
) -> Result<()> {
    let mut out = format!("# layers={layers} experts={experts} tokens={tokens}\n");
    for l in 0..layers {
        let row = &values[l * experts..(l + 1) * experts];
        let cells: Vec<String> = row.iter().map(ToString::to_string).collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Writes the gate-mass grid: a `# layers=L experts=E tokens=T` line, then
/// one comma-separated row per layer. Values use the shortest decimal form
/// that reads back to the same `f64`.
pub fn export_heatmap(map: &ActivationMap, path: &Path) -> Result<()> {
    write_grid(path, map.layers, map.experts, map.tokens, &map.mass)
}

/// Same layout as [`export_heatmap`], holding selection counts.
pub fn export_count_heatmap(map: &ActivationMap, path: &Path) -> Result<()> {
    write_grid(path, map.layers, map.experts, map.tokens, &map.counts)
}

/// Reads a gate-mass grid written by [`export_heatmap`].
pub fn read_heatmap(path: &Path) -> Result<ActivationMap> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::format(path, "missing header"))?;
    let header = header
        .strip_prefix('#')
        .ok_or_else(|| Error::format(path, "header must start with '#'"))?;
    let mut dims = [None; 3];
    for field in header.split_whitespace() {
        let (key, value) = field
            .split_once('=')
            .ok_or_else(|| Error::format(path, format!("bad header field {field:?}")))?;
        let slot = match key {
            "layers" => 0,
            "experts" => 1,
            "tokens" => 2,
            _ => continue,
        };
        dims[slot] = Some(
            value
                .parse::<usize>()
                .map_err(|_| Error::format(path, format!("bad {key} value {value:?}")))?,
        );
    }
    let [Some(layers), Some(experts), Some(tokens)] = dims else {
        return Err(Error::format(path, "header needs layers, experts and tokens"));
    };
    let mut mass = Vec::with_capacity(layers * experts);
    for (i, line) in lines.enumerate() {
        let row: Vec<f64> = line
            .split(',')
            .map(|c| {
                c.trim()
                    .parse::<f64>()
                    .map_err(|_| Error::format(path, format!("row {i}: bad value {c:?}")))
            })
            .collect::<Result<_>>()?;
        if row.len() != experts {
            return Err(Error::format(
                path,
                format!("row {i} has {} values, expected {experts}", row.len()),
            ));
        }
        mass.extend(row);
    }
    if mass.len() != layers * experts {
        return Err(Error::format(
            path,
            format!("expected {layers} rows, found {}", mass.len() / experts.max(1)),
        ));
    }
    ActivationMap::from_mass(layers, experts, tokens, mass)
}

/// Mean over tokens of the symmetric KL divergence between the softmax of
/// reference and test outputs.
pub fn output_divergence(reference: &[Vec<f64>], test: &[Vec<f64>]) -> Result<f64> {
    if reference.len() != test.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} reference outputs vs {} test outputs",
            reference.len(),
            test.len()
        )));
    }
    if reference.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for (t, (a, b)) in reference.iter().zip(test).enumerate() {
        if a.len() != b.len() {
            return Err(Error::ShapeMismatch(format!(
                "token {t}: output lengths {} vs {}",
                a.len(),
                b.len()
            )));
        }
        let la = log_softmax(a)?;
        let lb = log_softmax(b)?;
        total += la
            .iter()
            .zip(&lb)
            .map(|(x, y)| (x.exp() - y.exp()) * (x - y))
            .sum::<f64>();
    }
    Ok((total / reference.len() as f64).max(0.0))
}

/// Mean over tokens of the mean squared coordinate error.
pub fn output_mse(reference: &[Vec<f64>], test: &[Vec<f64>]) -> Result<f64> {
    if reference.len() != test.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} reference outputs vs {} test outputs",
            reference.len(),
            test.len()
        )));
    }
    if reference.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for (t, (a, b)) in reference.iter().zip(test).enumerate() {
        if a.len() != b.len() {
            return Err(Error::ShapeMismatch(format!(
                "token {t}: output lengths {} vs {}",
                a.len(),
                b.len()
            )));
        }
        if a.is_empty() {
            continue;
        }
        total += a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64;
    }
    Ok(total / reference.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::moe::{LayerRecord, TokenTrace};
    use crate::math::RandomStream;
    use proptest::prelude::*;

    fn record(dispatch: &[(usize, f64)]) -> LayerRecord {
        LayerRecord {
            logits: vec![],
            selected: dispatch.iter().map(|d| d.0).collect(),
            gates: dispatch.iter().map(|d| d.1).collect(),
            dispatch: dispatch.to_vec(),
        }
    }

    fn trace(tokens: Vec<Vec<Vec<(usize, f64)>>>) -> RoutingTrace {
        RoutingTrace {
            tokens: tokens
                .into_iter()
                .map(|layers| TokenTrace {
                    layers: layers.iter().map(|d| record(d)).collect(),
                })
                .collect(),
        }
    }

    #[test]
    fn empty_trace_gives_zero_map() {
        let map = accumulate_activation(&RoutingTrace::default(), 2, 3).unwrap();
        assert!(map.mass().iter().all(|v| *v == 0.0));
        assert_eq!(map.token_count(), 0);
    }

    #[test]
    fn single_token_substitution() {
        let t = trace(vec![vec![vec![(2, 0.7), (5, 0.3)]]]);
        let map = accumulate_activation(&t, 1, 8).unwrap();
        for e in 0..8 {
            let want = match e {
                2 => 0.7,
                5 => 0.3,
                _ => 0.0,
            };
            assert_eq!(map.get(0, e), want);
        }
        assert_eq!(map.count(0, 2), 1);
    }

    #[test]
    fn out_of_range_index_is_an_error() {
        let t = trace(vec![vec![vec![(4, 1.0)]]]);
        assert!(accumulate_activation(&t, 1, 4).is_err());
        let t = trace(vec![vec![vec![(0, 1.0)], vec![(0, 1.0)]]]);
        assert!(accumulate_activation(&t, 1, 4).is_err());
    }

    #[test]
    fn balance_examples() {
        let uniform = ActivationMap::from_mass(1, 4, 4, vec![1.0; 4]).unwrap();
        let r = balance_report(&uniform, 0.5);
        assert!((r.layers[0].entropy - 1.0).abs() < 1e-15);
        assert_eq!(r.layers[0].underactivated_fraction, 0.0);
        assert_eq!(r.layers[0].max_mean_ratio, 1.0);

        let one_hot = ActivationMap::from_mass(1, 4, 4, vec![0.0, 3.0, 0.0, 0.0]).unwrap();
        assert_eq!(balance_report(&one_hot, 0.1).layers[0].entropy, 0.0);

        let a = ActivationMap::from_mass(1, 4, 4, vec![2.0, 1.0, 1.0, 0.0]).unwrap();
        let r = balance_report(&a, 0.5);
        let want = -(0.5 * 0.5f64.ln() + 2.0 * 0.25 * 0.25f64.ln()) / 4f64.ln();
        assert!((want - 0.75).abs() < 1e-15);
        assert!((r.layers[0].entropy - 0.75).abs() < 1e-15);
        assert_eq!(r.layers[0].underactivated_fraction, 0.25);
    }

    #[test]
    fn empty_layer_is_flagged() {
        let map = ActivationMap::from_mass(2, 3, 1, vec![0.0, 0.0, 0.0, 1.0, 1.0, 1.0]).unwrap();
        let r = balance_report(&map, 0.1);
        assert!(r.layers[0].empty);
        assert_eq!(r.layers[0].entropy, 0.0);
        assert!(!r.layers[1].empty);
        assert!(r.to_key_values().contains("layer.0.empty = true"));
    }

    fn logits_trace(rows: Vec<Vec<Vec<f64>>>) -> RoutingTrace {
        RoutingTrace {
            tokens: rows
                .into_iter()
                .map(|layers| TokenTrace {
                    layers: layers
                        .into_iter()
                        .map(|z| LayerRecord {
                            logits: z,
                            selected: vec![],
                            gates: vec![],
                            dispatch: vec![],
                        })
                        .collect(),
                })
                .collect(),
        }
    }

    #[test]
    fn logit_spread_examples() {
        let clean = logits_trace(vec![
            vec![vec![0.0, 1.0, 3.0], vec![1.0, -1.0, 0.5]],
            vec![vec![2.0, 2.5, -1.0], vec![0.0, 0.1, 0.2]],
        ]);
        let same = logit_spread(&clean, &clean).unwrap();
        assert!(same.layers.iter().all(|l| l.ratio == 1.0));

        let doubled = logits_trace(
            clean
                .tokens
                .iter()
                .map(|t| {
                    t.layers
                        .iter()
                        .map(|r| r.logits.iter().map(|v| 2.0 * v).collect())
                        .collect()
                })
                .collect(),
        );
        let s = logit_spread(&clean, &doubled).unwrap();
        for l in &s.layers {
            assert!((l.ratio - 4.0).abs() < 1e-12);
        }
        assert!(logit_spread(&clean, &logits_trace(vec![])).is_err());
    }

    #[test]
    fn heatmap_layout_and_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("one.csv");
        let one = ActivationMap::from_mass(1, 1, 2, vec![3.5]).unwrap();
        export_heatmap(&one, &path).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert_eq!(text, "# layers=1 experts=1 tokens=2\n3.5\n");

        let two = ActivationMap::from_mass(2, 2, 5, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        export_heatmap(&two, &path).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert_eq!(text, "# layers=2 experts=2 tokens=5\n1,2\n3,4\n");

        let mut rng = RandomStream::new(4, 4);
        let mass: Vec<f64> = (0..24).map(|_| rng.uniform() * 1e3 / 7.0).collect();
        let map = ActivationMap::from_mass(4, 6, 99, mass).unwrap();
        export_heatmap(&map, &path).unwrap();
        let back = read_heatmap(&path).unwrap();
        assert_eq!(back.token_count(), 99);
        for (a, b) in back.mass().iter().zip(map.mass()) {
            assert!((a - b).abs() <= 1e-15 * b.abs());
        }
    }

    #[test]
    fn malformed_heatmaps_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.csv");
        fs::write(&path, "layers=1 experts=1 tokens=1\n1\n").unwrap();
        assert!(read_heatmap(&path).is_err());
        fs::write(&path, "# layers=1 experts=2 tokens=1\n1\n").unwrap();
        assert!(read_heatmap(&path).is_err());
        assert!(read_heatmap(&dir.path().join("missing.csv")).is_err());
    }

    #[test]
    fn divergence_examples() {
        let a = vec![vec![0.3, -1.0, 2.0], vec![0.0, 0.0, 1.0]];
        assert_eq!(output_divergence(&a, &a).unwrap(), 0.0);
        let shifted: Vec<Vec<f64>> = a.iter().map(|v| v.iter().map(|x| x + 4.0).collect()).collect();
        assert!(output_divergence(&a, &shifted).unwrap() < 1e-14);

        // p = (1/2, 1/2), q = (1/4, 3/4): (1/4) ln 2 + (1/4) ln(3/2) = ln(3) / 4.
        let d = output_divergence(&[vec![0.0, 0.0]], &[vec![0.0, 3f64.ln()]]).unwrap();
        assert!((d - 3f64.ln() / 4.0).abs() < 1e-15, "{d}");
        assert!(output_divergence(&a, &a[..1]).is_err());
    }

    #[test]
    fn mse_example() {
        let a = vec![vec![1.0, 2.0], vec![0.0, 0.0]];
        let b = vec![vec![1.0, 4.0], vec![1.0, 1.0]];
        assert_eq!(output_mse(&a, &b).unwrap(), (2.0 + 1.0) / 2.0);
    }

    fn random_trace(rng: &mut RandomStream, tokens: usize, layers: usize, experts: usize) -> RoutingTrace {
        trace(
            (0..tokens)
                .map(|_| {
                    (0..layers)
                        .map(|_| {
                            let a = rng.below(experts);
                            let b = (a + 1 + rng.below(experts - 1)) % experts;
                            vec![(a, rng.uniform()), (b, rng.uniform())]
                        })
                        .collect()
                })
                .collect(),
        )
    }

    #[test]
    fn accumulation_is_additive_over_splits() {
        let mut rng = RandomStream::new(77, 0);
        for _ in 0..100 {
            let t = random_trace(&mut rng, 30, 3, 5);
            let cut = rng.below(31);
            let (head, tail) = t.tokens.split_at(cut);
            let a = RoutingTrace { tokens: head.to_vec() };
            let b = RoutingTrace { tokens: tail.to_vec() };
            let whole = accumulate_activation(&t, 3, 5).unwrap();
            let parts = accumulate_activation(&a, 3, 5)
                .unwrap()
                .merge(&accumulate_activation(&b, 3, 5).unwrap())
                .unwrap();
            for (x, y) in whole.mass().iter().zip(parts.mass()) {
                assert!((x - y).abs() <= 1e-12 * x.abs().max(1.0));
            }
            assert_eq!(whole.token_count(), parts.token_count());
        }
    }

    proptest! {
        #[test]
        fn entropy_is_permutation_invariant(mut row in prop::collection::vec(0.0f64..10.0, 2..20), seed in 0u64..1000) {
            let h = normalized_entropy(&row);
            RandomStream::new(seed, 0).shuffle(&mut row);
            prop_assert!((normalized_entropy(&row) - h).abs() < 1e-12);
            prop_assert!((0.0..=1.0).contains(&h));
        }
    }
}
