//! Lossless JSON persistence for models, token sets and replacement plans.
//!
//! Floating-point payloads are stored as the concatenated 16-digit hex bit
//! patterns of each `f64`, so a round trip is bit-exact.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{de::DeserializeOwned, Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::Matrix;
use crate::moe::{Activation, ExpertFfn, GateMode, MoeLayer, MoeModel, RouterSpec};
use crate::romer::ReplacementPlan;

const MODEL_FORMAT: &str = "moe-model/1";
const TOKENS_FORMAT: &str = "token-set/1";

pub fn encode_f64s(values: &[f64]) -> String {
    let mut s = String::with_capacity(values.len() * 16);
    for v in values {
        write!(s, "{:016x}", v.to_bits()).expect("write to string");
    }
    s
}

pub fn decode_f64s(hex: &str) -> std::result::Result<Vec<f64>, String> {
    if hex.len() % 16 != 0 {
        return Err(format!("hex payload length {} is not a multiple of 16", hex.len()));
    }
    (0..hex.len() / 16)
        .map(|i| {
            let chunk = hex
                .get(i * 16..i * 16 + 16)
                .ok_or_else(|| "non-ascii hex payload".to_string())?;
            u64::from_str_radix(chunk, 16)
                .map(f64::from_bits)
                .map_err(|e| format!("bad hex word {chunk:?}: {e}"))
        })
        .collect()
}

#[derive(Serialize, Deserialize)]
struct MatrixRecord {
    rows: usize,
    cols: usize,
    bits: String,
}

impl MatrixRecord {
    fn from_matrix(m: &Matrix) -> Self {
        Self {
            rows: m.rows(),
            cols: m.cols(),
            bits: encode_f64s(m.data()),
        }
    }

    fn into_matrix(self) -> std::result::Result<Matrix, String> {
        let data = decode_f64s(&self.bits)?;
        Matrix::new(self.rows, self.cols, data).map_err(|e| e.to_string())
    }
}

#[derive(Serialize, Deserialize)]
struct ExpertRecord {
    activation: Activation,
    w_in: MatrixRecord,
    w_out: MatrixRecord,
}

#[derive(Serialize, Deserialize)]
struct LayerRecordFile {
    k: usize,
    router: MatrixRecord,
    experts: Vec<ExpertRecord>,
}

#[derive(Serialize, Deserialize)]
struct ModelFile {
    format: String,
    hidden_dim: usize,
    residual: bool,
    gate_mode: GateMode,
    layers: Vec<LayerRecordFile>,
}

#[derive(Serialize, Deserialize)]
struct TokensFile {
    format: String,
    count: usize,
    dim: usize,
    bits: String,
}

fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::format(path, e.to_string()))?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
}

fn check_format(path: &Path, found: &str, want: &str) -> Result<()> {
    if found != want {
        return Err(Error::format(path, format!("expected format {want:?}, found {found:?}")));
    }
    Ok(())
}

pub fn save_model(model: &MoeModel, path: &Path) -> Result<()> {
    let file = ModelFile {
        format: MODEL_FORMAT.into(),
        hidden_dim: model.hidden_dim(),
        residual: model.residual(),
        gate_mode: model.gate_mode(),
        layers: model
            .layers()
            .iter()
            .map(|l| LayerRecordFile {
                k: l.router().k(),
                router: MatrixRecord::from_matrix(l.router().weights()),
                experts: l
                    .experts()
                    .iter()
                    .map(|e| ExpertRecord {
                        activation: e.activation(),
                        w_in: MatrixRecord::from_matrix(e.w_in()),
                        w_out: MatrixRecord::from_matrix(e.w_out()),
                    })
                    .collect(),
            })
            .collect(),
    };
    write_json(&file, path)
}

pub fn load_model(path: &Path) -> Result<MoeModel> {
    let file: ModelFile = read_json(path)?;
    check_format(path, &file.format, MODEL_FORMAT)?;
    let bad = |reason: String| Error::format(path, reason);
    let mut layers = Vec::with_capacity(file.layers.len());
    for (index, rec) in file.layers.into_iter().enumerate() {
        let router = RouterSpec::new(rec.router.into_matrix().map_err(bad)?, rec.k)?;
        let experts = rec
            .experts
            .into_iter()
            .map(|e| {
                let w_in = e.w_in.into_matrix().map_err(bad)?;
                let w_out = e.w_out.into_matrix().map_err(bad)?;
                ExpertFfn::new(w_in, w_out, e.activation)
            })
            .collect::<Result<Vec<_>>>()?;
        layers.push(MoeLayer::new(router, experts, index)?);
    }
    MoeModel::new(layers, file.hidden_dim, file.residual, file.gate_mode)
}

pub fn save_tokens(tokens: &[Vec<f64>], path: &Path) -> Result<()> {
    let dim = tokens.first().map_or(0, Vec::len);
    if let Some(bad) = tokens.iter().find(|t| t.len() != dim) {
        return Err(Error::DimensionMismatch {
            context: "token set",
            expected: dim,
            found: bad.len(),
        });
    }
    let flat: Vec<f64> = tokens.iter().flatten().copied().collect();
    write_json(
        &TokensFile {
            format: TOKENS_FORMAT.into(),
            count: tokens.len(),
            dim,
            bits: encode_f64s(&flat),
        },
        path,
    )
}

pub fn load_tokens(path: &Path) -> Result<Vec<Vec<f64>>> {
    let file: TokensFile = read_json(path)?;
    check_format(path, &file.format, TOKENS_FORMAT)?;
    let flat = decode_f64s(&file.bits).map_err(|r| Error::format(path, r))?;
    if flat.len() != file.count * file.dim {
        return Err(Error::format(
            path,
            format!("{} values for {} tokens of dimension {}", flat.len(), file.count, file.dim),
        ));
    }
    if flat.iter().any(|v| !v.is_finite()) {
        return Err(Error::format(path, "non-finite token value"));
    }
    if file.dim == 0 {
        return Ok(vec![Vec::new(); file.count]);
    }
    Ok(flat.chunks(file.dim).map(<[f64]>::to_vec).collect())
}

pub fn save_plan(plan: &ReplacementPlan, path: &Path) -> Result<()> {
    write_json(plan, path)
}

pub fn load_plan(path: &Path) -> Result<ReplacementPlan> {
    read_json(path)
}
