//! Quick invariant checks behind `romer-sim selftest`.

use std::io::Write;

use anyhow::Result;
use romer_core::math::{iqr, softmax, Matrix, RandomStream};
use romer_core::moe::model_forward;
use romer_core::noise::{perturb_weights, quantization_step, AdcSpec, DeviceNoiseSpec, NoiseConfig, PathNoise};
use romer_core::profiler::ActivationMap;
use romer_core::romer::{
    adjust_logits, build_replacement_plan, calibrate_logits, duplicated_expert_forward, BottomMode,
    CalibrationConfig, LayerPlan, ReplacementPlan, RomerDeployment,
};

use crate::generate::{generate_corpus, generate_model, CorpusSpec, Geometry, ModelSpec};

type Check = fn() -> Result<(), String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
}

fn softmax_invariants() -> Result<(), String> {
    let z = [1.5, -2.0, 0.25, 3.0];
    let p = softmax(&z).map_err(|e| e.to_string())?;
    let shifted: Vec<f64> = z.iter().map(|v| v + 100.0).collect();
    let q = softmax(&shifted).map_err(|e| e.to_string())?;
    ensure((p.iter().sum::<f64>() - 1.0).abs() < 1e-12, || "softmax does not sum to 1".into())?;
    ensure(close(&p, &q, 1e-12), || "softmax is not shift invariant".into())
}

fn quantiles() -> Result<(), String> {
    let v = iqr(&[1.0, 2.0, 3.0, 4.0]).map_err(|e| e.to_string())?;
    ensure((v - 1.5).abs() < 1e-15, || format!("IQR of 1..4 is {v}, expected 1.5"))
}

fn calibration_example() -> Result<(), String> {
    let out = calibrate_logits(&[0.0, 1.0, 9.0, 10.0], 0.1);
    ensure(close(&out, &[0.85, 1.85, 8.15, 9.15], 1e-12), || format!("calibrated {out:?}"))?;
    let same = calibrate_logits(&[3.0, -1.0, 2.0], 0.0);
    ensure(same == [3.0, -1.0, 2.0], || "lambda = 0 changed the logits".into())
}

fn adjustment_example() -> Result<(), String> {
    let plan = LayerPlan {
        top: vec![0],
        bottom: vec![3],
    };
    let out = adjust_logits(&[2.0, 0.5, 1.0, 0.3], &plan, BottomMode::LiteralZero, true);
    ensure(out == [1.0, 0.5, 1.0, 0.0], || format!("adjusted {out:?}"))
}

fn noise_identities() -> Result<(), String> {
    let w = Matrix::from_rows(&[vec![1.0, -2.0], vec![0.5, 3.0]]).map_err(|e| e.to_string())?;
    let mut rng = RandomStream::new(1, 2);
    let same = perturb_weights(&w, &DeviceNoiseSpec { sigma_dev: 0.0 }, &mut rng);
    ensure(same == w, || "sigma = 0 perturbed the weights".into())?;
    let step = quantization_step(&AdcSpec {
        v_ref: 1.0,
        bits: 4,
        enabled: true,
    });
    ensure((step - 1.0 / 15.0).abs() < 1e-15, || format!("4-bit step {step}"))
}

fn plan_example() -> Result<(), String> {
    let map = ActivationMap::from_mass(1, 4, 1, vec![5.0, 1.0, 4.0, 2.0]).map_err(|e| e.to_string())?;
    let plan = build_replacement_plan(&map, 2).map_err(|e| e.to_string())?;
    ensure(plan.layers[0].top == [0, 2] && plan.layers[0].bottom == [1, 3], || format!("{plan:?}"))
}

fn small_workload() -> (romer_core::moe::MoeModel, Vec<Vec<f64>>) {
    let geometry = Geometry { clusters: 3, seed: 5 };
    let spec = ModelSpec {
        layers: 2,
        experts: 8,
        hidden_dim: 8,
        inner_dim: 16,
        ..ModelSpec::default()
    };
    let model = generate_model(&spec, &geometry).expect("valid spec");
    let corpus = generate_corpus(
        &CorpusSpec {
            tokens: 32,
            ..CorpusSpec::default()
        },
        &geometry,
        8,
    );
    (model, corpus.tokens)
}

fn degenerate_pipeline() -> Result<(), String> {
    let (model, tokens) = small_workload();
    let noise = NoiseConfig::device_only(0.1);
    let vanilla = model_forward(&model, &tokens, &noise, 9).map_err(|e| e.to_string())?;
    let calib = CalibrationConfig {
        n: 0,
        lambda: 0.0,
        ..CalibrationConfig::default()
    };
    let romer = RomerDeployment::program(&model, ReplacementPlan::empty(2), calib, &noise, 9)
        .and_then(|d| d.forward(&tokens))
        .map_err(|e| e.to_string())?;
    ensure(vanilla == romer, || "n = 0, lambda = 0 differs from vanilla".into())
}

fn duplication_noise_free() -> Result<(), String> {
    let (model, tokens) = small_workload();
    let e = &model.layers()[0].experts()[0];
    let mut rng = RandomStream::new(3, 3);
    let y = duplicated_expert_forward(e, e, &tokens[0], 0.3, &PathNoise::ideal(), &mut rng).map_err(|e| e.to_string())?;
    let f = e.forward(&tokens[0]).map_err(|e| e.to_string())?;
    let want: Vec<f64> = f.iter().map(|v| 0.3 * v).collect();
    ensure(y == want, || "noise-free duplication is not exact".into())
}

const CHECKS: [(&str, Check); 8] = [
    ("softmax", softmax_invariants),
    ("quantiles", quantiles),
    ("calibration", calibration_example),
    ("logit adjustment", adjustment_example),
    ("noise identities", noise_identities),
    ("replacement plan", plan_example),
    ("degenerate pipeline", degenerate_pipeline),
    ("noise-free duplication", duplication_noise_free),
];

/// Runs every check, reporting to `out`. Returns the failure count.
pub fn run(out: &mut impl Write) -> Result<usize> {
    let mut failures = 0;
    for (name, check) in CHECKS {
        match check() {
            Ok(()) => writeln!(out, "ok   {name}")?,
            Err(msg) => {
                failures += 1;
                writeln!(out, "FAIL {name}: {msg}")?;
            }
        }
    }
    Ok(failures)
}

#[cfg(test)]
mod tests {
    #[test]
    fn all_checks_pass() {
        let mut buf = Vec::new();
        assert_eq!(super::run(&mut buf).unwrap(), 0, "{}", String::from_utf8_lossy(&buf));
    }
}
