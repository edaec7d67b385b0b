//! Model directory: `model.json` metadata plus `weights.bin`.
//!
//! `weights.bin` is the magic `PVSEW1` followed by every `W_I,l` in part
//! order and then `W_T`, each row-major, as little-endian `f32`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::embedding::{FrequencyScope, ModelParams, TagVocabulary};
use crate::error::{Error, Result};
use crate::partmap::PartScheme;

const WEIGHTS_MAGIC: &[u8; 6] = b"PVSEW1";
pub const MODEL_FILE: &str = "model.json";
pub const WEIGHTS_FILE: &str = "weights.bin";

#[derive(Serialize, Deserialize)]
struct VocabDoc {
    tags: Vec<String>,
    dataset_frequency: Vec<u32>,
}

#[derive(Serialize, Deserialize)]
struct ModelDoc {
    #[serde(rename = "K")]
    part_dim: usize,
    #[serde(rename = "L")]
    parts: usize,
    #[serde(rename = "D")]
    feature_dim: usize,
    #[serde(rename = "H")]
    tags: usize,
    #[serde(rename = "I")]
    grid_rows: usize,
    #[serde(rename = "J")]
    grid_cols: usize,
    scheme: serde_json::Value,
    vocab: VocabDoc,
    log_base: String,
    frequency_scope: FrequencyScope,
    seed: u64,
}

pub fn weights_to_bytes(params: &ModelParams) -> Vec<u8> {
    let count = params.num_parts() * params.feature_dim() * params.part_dim() + params.tag_matrix().len();
    let mut out = Vec::with_capacity(6 + 4 * count);
    out.extend_from_slice(WEIGHTS_MAGIC);
    let all = (0..params.num_parts())
        .flat_map(|l| params.image_proj(l).iter())
        .chain(params.tag_matrix());
    for &w in all {
        out.extend_from_slice(&(w as f32).to_le_bytes());
    }
    out
}

pub fn save_model(params: &ModelParams, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let doc = ModelDoc {
        part_dim: params.part_dim(),
        parts: params.num_parts(),
        feature_dim: params.feature_dim(),
        tags: params.num_tags(),
        grid_rows: params.grid().0,
        grid_cols: params.grid().1,
        scheme: serde_json::from_str(&params.scheme().to_json()).expect("scheme json"),
        vocab: VocabDoc {
            tags: params.vocab().tags().to_vec(),
            dataset_frequency: params.vocab().frequencies().to_vec(),
        },
        log_base: "e".into(),
        frequency_scope: params.frequency_scope(),
        seed: params.seed(),
    };
    let meta = dir.join(MODEL_FILE);
    let text = serde_json::to_string_pretty(&doc).expect("model doc serializes");
    fs::write(&meta, text).map_err(|e| Error::io(&meta, e))?;
    let wpath = dir.join(WEIGHTS_FILE);
    fs::write(&wpath, weights_to_bytes(params)).map_err(|e| Error::io(&wpath, e))
}

pub fn load_model(dir: &Path) -> Result<ModelParams> {
    let meta = dir.join(MODEL_FILE);
    let text = fs::read_to_string(&meta).map_err(|e| Error::io(&meta, e))?;
    let doc: ModelDoc = serde_json::from_str(&text).map_err(|e| Error::format(&meta, e.to_string()))?;
    if doc.log_base != "e" {
        return Err(Error::format(&meta, format!("unsupported log base '{}'", doc.log_base)));
    }
    let scheme = PartScheme::from_json(&doc.scheme.to_string()).map_err(|r| Error::format(&meta, r))?;
    if scheme.num_parts() != doc.parts {
        return Err(Error::format(&meta, "L disagrees with the part scheme"));
    }
    let vocab = TagVocabulary::new(doc.vocab.tags, doc.vocab.dataset_frequency)
        .map_err(|e| Error::format(&meta, e.to_string()))?;
    if vocab.len() != doc.tags {
        return Err(Error::format(&meta, "H disagrees with the vocabulary"));
    }

    let wpath = dir.join(WEIGHTS_FILE);
    let bytes = fs::read(&wpath).map_err(|e| Error::io(&wpath, e))?;
    if bytes.len() < 6 || &bytes[..6] != WEIGHTS_MAGIC {
        return Err(Error::format(&wpath, "missing PVSEW1 header"));
    }
    let (l, k, d, h) = (doc.parts, doc.part_dim, doc.feature_dim, doc.tags);
    let expected = l * d * k + h * k * l;
    let body = &bytes[6..];
    if body.len() != 4 * expected {
        return Err(Error::format(
            &wpath,
            format!("expected {} weight bytes, found {}", 4 * expected, body.len()),
        ));
    }
    let floats: Vec<f64> = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    let image_proj = floats[..l * d * k].chunks(d * k).map(<[f64]>::to_vec).collect();
    let tag_matrix = floats[l * d * k..].to_vec();
    ModelParams::from_parts(
        scheme,
        vocab,
        k,
        d,
        (doc.grid_rows, doc.grid_cols),
        image_proj,
        tag_matrix,
        doc.frequency_scope,
        doc.seed,
    )
    .map_err(|e| Error::format(&wpath, e.to_string()))
}
