//! Model parameters and the forward pass.
//!
//! An image embedding is the concatenation of `L` part blocks of `K` dims.
//! Block `l` is the projection `W_I,lᵀ` of the grid features pooled with the
//! part's grid weights. A tag-set embedding is a frequency-weighted sum of
//! rows of the tag matrix `W_T`, where rarer tags weigh more.

use std::collections::{BTreeMap, HashMap};
use std::ops::Range;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::partmap::{GridWeightMap, PartScheme};

/// Ordered tag vocabulary with per-tag attachment counts over a dataset.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TagVocabulary {
    tags: Vec<String>,
    frequency: Vec<u32>,
    index: HashMap<String, usize>,
}

impl TagVocabulary {
    /// Builds from explicit order and counts. Every count must be at least 1.
    pub fn new(tags: Vec<String>, frequency: Vec<u32>) -> Result<Self> {
        if tags.len() != frequency.len() {
            return Err(Error::Dimension {
                what: "vocabulary frequency count",
                expected: tags.len(),
                actual: frequency.len(),
            });
        }
        let mut index = HashMap::with_capacity(tags.len());
        for (i, t) in tags.iter().enumerate() {
            if t.is_empty() {
                return Err(Error::arg("empty tag string"));
            }
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::arg(format!("duplicate tag '{t}'")));
            }
        }
        if let Some(i) = frequency.iter().position(|&f| f == 0) {
            return Err(Error::arg(format!("tag '{}' has zero frequency", tags[i])));
        }
        Ok(Self {
            tags,
            frequency,
            index,
        })
    }

    /// Vocabulary of every tag attached in `tag_lists`, in byte-lexicographic
    /// order, with attachment counts.
    pub fn from_tag_lists<'a, I, S>(tag_lists: I) -> Result<Self>
    where
        I: IntoIterator<Item = &'a [S]>,
        S: AsRef<str> + 'a,
    {
        let mut counts: BTreeMap<String, u32> = BTreeMap::new();
        for list in tag_lists {
            for t in list {
                *counts.entry(t.as_ref().to_string()).or_default() += 1;
            }
        }
        let (tags, freq) = counts.into_iter().unzip();
        Self::new(tags, freq)
    }

    pub fn len(&self) -> usize {
        self.tags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tags.is_empty()
    }

    pub fn tags(&self) -> &[String] {
        &self.tags
    }

    pub fn frequencies(&self) -> &[u32] {
        &self.frequency
    }

    pub fn frequency(&self, idx: usize) -> u32 {
        self.frequency[idx]
    }

    pub fn index_of(&self, tag: &str) -> Result<usize> {
        self.index
            .get(tag)
            .copied()
            .ok_or_else(|| Error::UnknownTag(tag.to_string()))
    }

    pub fn indices_of<S: AsRef<str>>(&self, tags: &[S]) -> Result<Vec<usize>> {
        tags.iter().map(|t| self.index_of(t.as_ref())).collect()
    }
}

/// `I × J` grid of `D`-dimensional backbone features, row-major with the
/// feature dimension innermost.
#[derive(Clone, Debug, PartialEq)]
pub struct GridFeatureTensor {
    rows: usize,
    cols: usize,
    dim: usize,
    values: Vec<f64>,
}

impl GridFeatureTensor {
    pub fn new(rows: usize, cols: usize, dim: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != rows * cols * dim {
            return Err(Error::Dimension {
                what: "feature tensor length",
                expected: rows * cols * dim,
                actual: values.len(),
            });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::arg("feature tensor contains non-finite values"));
        }
        Ok(Self {
            rows,
            cols,
            dim,
            values,
        })
    }

    pub fn zeros(rows: usize, cols: usize, dim: usize) -> Self {
        Self {
            rows,
            cols,
            dim,
            values: vec![0.0; rows * cols * dim],
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn cell(&self, i: usize, j: usize) -> &[f64] {
        let start = (i * self.cols + j) * self.dim;
        &self.values[start..start + self.dim]
    }

    pub fn cell_mut(&mut self, i: usize, j: usize) -> &mut [f64] {
        let start = (i * self.cols + j) * self.dim;
        &mut self.values[start..start + self.dim]
    }
}

/// A `K·L` vector whose dims are split into `L` equal part blocks.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingVector {
    values: Vec<f64>,
    part_dim: usize,
}

impl EmbeddingVector {
    pub fn new(values: Vec<f64>, part_dim: usize) -> Result<Self> {
        if part_dim == 0 || !values.len().is_multiple_of(part_dim) {
            return Err(Error::arg(format!(
                "length {} is not a multiple of part width {part_dim}",
                values.len()
            )));
        }
        Ok(Self { values, part_dim })
    }

    pub fn zeros(parts: usize, part_dim: usize) -> Self {
        Self {
            values: vec![0.0; parts * part_dim],
            part_dim,
        }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn part_dim(&self) -> usize {
        self.part_dim
    }

    pub fn num_parts(&self) -> usize {
        self.values.len() / self.part_dim
    }

    pub fn part_block(&self, l: usize) -> Range<usize> {
        l * self.part_dim..(l + 1) * self.part_dim
    }

    pub fn block(&self, l: usize) -> &[f64] {
        &self.values[self.part_block(l)]
    }

    pub fn normalized(&self) -> Self {
        Self {
            values: normalize(&self.values),
            part_dim: self.part_dim,
        }
    }
}

/// Where the tag counts `N_t` of the tag weighting come from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FrequencyScope {
    /// Attachment counts over the whole training set.
    #[default]
    Dataset,
    /// Attachment counts within the current mini-batch.
    Minibatch,
}

/// Shrinks the uniform init. The losses only see normalized embeddings, so
/// SGD's step on the unit sphere scales like `lr / ‖W‖²`.
pub const INIT_GAIN: f64 = 0.1;

/// Trainable state plus the structure it is bound to.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub(crate) scheme: PartScheme,
    pub(crate) vocab: TagVocabulary,
    pub(crate) part_dim: usize,
    pub(crate) feature_dim: usize,
    pub(crate) grid: (usize, usize),
    /// One `D × K` row-major matrix per part.
    pub(crate) image_proj: Vec<Vec<f64>>,
    /// `H × KL` row-major.
    pub(crate) tag_matrix: Vec<f64>,
    pub(crate) frequency_scope: FrequencyScope,
    pub(crate) seed: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ModelShape {
    /// Total embedding width `K·L`.
    pub embed_dim: usize,
    pub feature_dim: usize,
    pub grid_rows: usize,
    pub grid_cols: usize,
}

impl ModelParams {
    /// Scaled-uniform initialization: entries in `[-a, a]`,
    /// `a = INIT_GAIN · sqrt(6 / (fan_in + fan_out))`.
    pub fn init(
        scheme: PartScheme,
        vocab: TagVocabulary,
        shape: ModelShape,
        frequency_scope: FrequencyScope,
        seed: u64,
    ) -> Result<Self> {
        let parts = scheme.num_parts();
        if shape.embed_dim == 0 || !shape.embed_dim.is_multiple_of(parts) {
            return Err(Error::arg(format!(
                "embedding width {} is not divisible by {} parts",
                shape.embed_dim, parts
            )));
        }
        if shape.feature_dim == 0 || shape.grid_rows == 0 || shape.grid_cols == 0 {
            return Err(Error::arg("feature and grid dimensions must be positive"));
        }
        if vocab.is_empty() {
            return Err(Error::arg("empty tag vocabulary"));
        }
        let k = shape.embed_dim / parts;
        let d = shape.feature_dim;
        let h = vocab.len();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a_img = INIT_GAIN * (6.0 / (d + k) as f64).sqrt();
        let image_proj = (0..parts)
            .map(|_| (0..d * k).map(|_| rng.gen_range(-a_img..=a_img)).collect())
            .collect();
        let a_tag = INIT_GAIN * (6.0 / (h + shape.embed_dim) as f64).sqrt();
        let tag_matrix = (0..h * shape.embed_dim)
            .map(|_| rng.gen_range(-a_tag..=a_tag))
            .collect();
        Ok(Self {
            scheme,
            vocab,
            part_dim: k,
            feature_dim: d,
            grid: (shape.grid_rows, shape.grid_cols),
            image_proj,
            tag_matrix,
            frequency_scope,
            seed,
        })
    }

    /// Assembles parameters from explicit matrices.
    #[allow(clippy::too_many_arguments)]
    pub fn from_parts(
        scheme: PartScheme,
        vocab: TagVocabulary,
        part_dim: usize,
        feature_dim: usize,
        grid: (usize, usize),
        image_proj: Vec<Vec<f64>>,
        tag_matrix: Vec<f64>,
        frequency_scope: FrequencyScope,
        seed: u64,
    ) -> Result<Self> {
        let parts = scheme.num_parts();
        if image_proj.len() != parts {
            return Err(Error::Dimension {
                what: "image projection count",
                expected: parts,
                actual: image_proj.len(),
            });
        }
        for m in &image_proj {
            if m.len() != feature_dim * part_dim {
                return Err(Error::Dimension {
                    what: "image projection size",
                    expected: feature_dim * part_dim,
                    actual: m.len(),
                });
            }
        }
        if tag_matrix.len() != vocab.len() * part_dim * parts {
            return Err(Error::Dimension {
                what: "tag matrix size",
                expected: vocab.len() * part_dim * parts,
                actual: tag_matrix.len(),
            });
        }
        let finite = image_proj.iter().flatten().chain(&tag_matrix).all(|v| v.is_finite());
        if !finite {
            return Err(Error::arg("parameters contain non-finite values"));
        }
        Ok(Self {
            scheme,
            vocab,
            part_dim,
            feature_dim,
            grid,
            image_proj,
            tag_matrix,
            frequency_scope,
            seed,
        })
    }

    pub fn scheme(&self) -> &PartScheme {
        &self.scheme
    }

    pub fn vocab(&self) -> &TagVocabulary {
        &self.vocab
    }

    pub fn num_parts(&self) -> usize {
        self.scheme.num_parts()
    }

    pub fn part_dim(&self) -> usize {
        self.part_dim
    }

    pub fn embed_dim(&self) -> usize {
        self.part_dim * self.num_parts()
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn num_tags(&self) -> usize {
        self.vocab.len()
    }

    pub fn grid(&self) -> (usize, usize) {
        self.grid
    }

    pub fn frequency_scope(&self) -> FrequencyScope {
        self.frequency_scope
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn image_proj(&self, l: usize) -> &[f64] {
        &self.image_proj[l]
    }

    pub fn image_proj_mut(&mut self, l: usize) -> &mut [f64] {
        &mut self.image_proj[l]
    }

    pub fn tag_matrix(&self) -> &[f64] {
        &self.tag_matrix
    }

    pub fn tag_matrix_mut(&mut self) -> &mut [f64] {
        &mut self.tag_matrix
    }

    pub fn tag_row(&self, t: usize) -> &[f64] {
        let w = self.embed_dim();
        &self.tag_matrix[t * w..(t + 1) * w]
    }

    pub fn shape(&self) -> ModelShape {
        ModelShape {
            embed_dim: self.embed_dim(),
            feature_dim: self.feature_dim,
            grid_rows: self.grid.0,
            grid_cols: self.grid.1,
        }
    }

    /// Projects a `D`-vector through part `l`'s matrix into `out` (`K` dims).
    pub fn project_into(&self, l: usize, feature: &[f64], out: &mut [f64]) {
        let k = self.part_dim;
        out.fill(0.0);
        for (d, &f) in feature.iter().enumerate() {
            if f == 0.0 {
                continue;
            }
            let row = &self.image_proj[l][d * k..(d + 1) * k];
            for (o, &w) in out.iter_mut().zip(row) {
                *o += w * f;
            }
        }
    }
}

/// Grid-weighted pooling `p_l = Σ_ij g_ij,l f_ij`, one `D`-vector per part.
pub fn pool_features(feat: &GridFeatureTensor, gwm: &GridWeightMap) -> Result<Vec<Vec<f64>>> {
    if feat.rows != gwm.rows() || feat.cols != gwm.cols() {
        return Err(Error::arg(format!(
            "feature grid {}x{} does not match weight grid {}x{}",
            feat.rows,
            feat.cols,
            gwm.rows(),
            gwm.cols()
        )));
    }
    let d = feat.dim;
    let pooled = (0..gwm.num_parts())
        .map(|l| {
            let mut p = vec![0.0; d];
            for (cell, &g) in gwm.part_weights(l).iter().enumerate() {
                if g == 0.0 {
                    continue;
                }
                let f = &feat.values[cell * d..(cell + 1) * d];
                for (acc, &x) in p.iter_mut().zip(f) {
                    *acc += g * x;
                }
            }
            p
        })
        .collect();
    Ok(pooled)
}

/// Image embedding from pooled per-part features.
pub fn embed_pooled(pooled: &[Vec<f64>], params: &ModelParams) -> EmbeddingVector {
    let k = params.part_dim;
    let mut out = EmbeddingVector::zeros(params.num_parts(), k);
    for (l, p) in pooled.iter().enumerate() {
        params.project_into(l, p, &mut out.values[l * k..(l + 1) * k]);
    }
    out
}

/// `x = [x_1; …; x_L]` with `x_l = Σ_ij g_ij,l W_I,lᵀ f_ij`.
///
/// Computed as pooling followed by one projection per part, which is the
/// same sum by linearity. Absent parts give zero blocks.
pub fn embed_image(
    feat: &GridFeatureTensor,
    gwm: &GridWeightMap,
    params: &ModelParams,
) -> Result<EmbeddingVector> {
    if feat.dim != params.feature_dim {
        return Err(Error::Dimension {
            what: "feature dim",
            expected: params.feature_dim,
            actual: feat.dim,
        });
    }
    if gwm.num_parts() != params.num_parts() {
        return Err(Error::Dimension {
            what: "grid weight parts",
            expected: params.num_parts(),
            actual: gwm.num_parts(),
        });
    }
    let pooled = pool_features(feat, gwm)?;
    Ok(embed_pooled(&pooled, params))
}

pub fn embed_single_tag(tag: usize, params: &ModelParams) -> Result<EmbeddingVector> {
    if tag >= params.num_tags() {
        return Err(Error::arg(format!(
            "tag index {tag} out of range for vocabulary of {}",
            params.num_tags()
        )));
    }
    Ok(EmbeddingVector {
        values: params.tag_row(tag).to_vec(),
        part_dim: params.part_dim,
    })
}

/// Inverse-log frequency weights, `w_t ∝ 1 / ln(N_t + 1)`, summing to one.
pub fn tag_weights(counts: &[u32]) -> Result<Vec<f64>> {
    if counts.is_empty() {
        return Err(Error::arg("empty tag list"));
    }
    if counts.contains(&0) {
        return Err(Error::arg("tag counts must be at least 1"));
    }
    let raw: Vec<f64> = counts
        .iter()
        .map(|&n| 1.0 / (n as f64 + 1.0).ln())
        .collect();
    let total: f64 = raw.iter().sum();
    Ok(raw.into_iter().map(|r| r / total).collect())
}

/// Per-vocabulary attachment counts within a set of tag lists.
pub fn minibatch_counts(tag_sets: &[&[usize]], vocab_len: usize) -> Vec<u32> {
    let mut counts = vec![0u32; vocab_len];
    for set in tag_sets {
        for &t in *set {
            counts[t] += 1;
        }
    }
    counts
}

/// Weighted tag-set embedding with `N_t` read from `counts` (indexed by
/// vocabulary position). Returns the embedding and the per-tag weights.
pub fn embed_tag_set_with_counts(
    tags: &[usize],
    params: &ModelParams,
    counts: &[u32],
) -> Result<(EmbeddingVector, Vec<f64>)> {
    if tags.is_empty() {
        return Err(Error::arg("empty tag set"));
    }
    if let Some(&bad) = tags.iter().find(|&&t| t >= params.num_tags()) {
        return Err(Error::arg(format!("tag index {bad} out of range")));
    }
    let n: Vec<u32> = tags.iter().map(|&t| counts[t]).collect();
    let weights = tag_weights(&n)?;
    let mut out = EmbeddingVector::zeros(params.num_parts(), params.part_dim);
    for (&t, &w) in tags.iter().zip(&weights) {
        for (o, &v) in out.values.iter_mut().zip(params.tag_row(t)) {
            *o += w * v;
        }
    }
    Ok((out, weights))
}

/// `v = Σ_t w_t v_t` using dataset-wide tag frequencies.
pub fn embed_tag_set(tags: &[usize], params: &ModelParams) -> Result<EmbeddingVector> {
    embed_tag_set_with_counts(tags, params, params.vocab.frequencies()).map(|(v, _)| v)
}

/// String-keyed variant of [`embed_tag_set`].
pub fn embed_tag_names<S: AsRef<str>>(tags: &[S], params: &ModelParams) -> Result<EmbeddingVector> {
    let idx = params.vocab.indices_of(tags)?;
    embed_tag_set(&idx, params)
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// `e / ‖e‖`. The zero vector maps to itself.
pub fn normalize(e: &[f64]) -> Vec<f64> {
    let n = norm(e);
    if n == 0.0 {
        return e.to_vec();
    }
    e.iter().map(|x| x / n).collect()
}

/// Cosine similarity; 0 when either side has zero norm.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Dimension {
            what: "cosine operand length",
            expected: a.len(),
            actual: b.len(),
        });
    }
    Ok(cosine(a, b))
}

pub(crate) fn cosine(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    dot(a, b) / (na * nb)
}
