//! Exhaustive retrieval over embedded images.
//!
//! Scores are cosine similarities against the raw stored embeddings.
//! Rankings sort by score descending, then by image id ascending.

use std::cmp::Ordering;
use std::collections::HashMap;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::embedding::{
    cosine, embed_image, embed_single_tag, embed_tag_names, normalize, EmbeddingVector, GridFeatureTensor,
    ModelParams,
};
use crate::error::{Error, Result};
use crate::par;
use crate::partmap::{GridPartFractions, PartScheme};

/// Feature grid and part fractions kept for attention maps.
#[derive(Clone, Debug)]
pub struct CellData {
    pub features: GridFeatureTensor,
    pub fractions: GridPartFractions,
}

/// Immutable table of image embeddings.
#[derive(Clone, Debug)]
pub struct EmbeddingIndex {
    ids: Vec<String>,
    id_index: HashMap<String, usize>,
    embeddings: Vec<EmbeddingVector>,
    tags: Vec<Vec<String>>,
    cells: Option<Vec<CellData>>,
    parts: usize,
    part_dim: usize,
}

impl EmbeddingIndex {
    /// Index from explicit vectors. `tags` may be empty or one list per id.
    pub fn from_embeddings(ids: Vec<String>, embeddings: Vec<EmbeddingVector>, tags: Vec<Vec<String>>) -> Result<Self> {
        if ids.len() != embeddings.len() {
            return Err(Error::Dimension {
                what: "index embeddings",
                expected: ids.len(),
                actual: embeddings.len(),
            });
        }
        let tags = if tags.is_empty() { vec![Vec::new(); ids.len()] } else { tags };
        if tags.len() != ids.len() {
            return Err(Error::Dimension {
                what: "index tag lists",
                expected: ids.len(),
                actual: tags.len(),
            });
        }
        let first = embeddings.first().ok_or_else(|| Error::arg("empty index"))?;
        let (parts, part_dim) = (first.num_parts(), first.part_dim());
        if embeddings
            .iter()
            .any(|e| e.num_parts() != parts || e.part_dim() != part_dim)
        {
            return Err(Error::arg("embeddings disagree on block structure"));
        }
        let mut id_index = HashMap::with_capacity(ids.len());
        for (i, id) in ids.iter().enumerate() {
            if id_index.insert(id.clone(), i).is_some() {
                return Err(Error::arg(format!("duplicate image id '{id}'")));
            }
        }
        Ok(Self {
            ids,
            id_index,
            embeddings,
            tags,
            cells: None,
            parts,
            part_dim,
        })
    }

    pub fn with_cells(mut self, cells: Vec<CellData>) -> Result<Self> {
        if cells.len() != self.ids.len() {
            return Err(Error::Dimension {
                what: "index cell data",
                expected: self.ids.len(),
                actual: cells.len(),
            });
        }
        if cells.iter().any(|c| c.fractions.num_parts() != self.parts) {
            return Err(Error::arg("cell fractions disagree with the part count"));
        }
        self.cells = Some(cells);
        Ok(self)
    }

    /// Embeds every dataset image with `params`.
    pub fn build(params: &ModelParams, data: &Dataset) -> Result<Self> {
        let gwms = data.grid_weight_maps()?;
        let fractions = data.grid_part_fractions()?;
        let embeddings: Vec<EmbeddingVector> = par::map_range(data.len(), |i| {
            embed_image(data.features(i), &gwms[i], params)
        })
        .into_iter()
        .collect::<Result<_>>()?;
        let ids = data.ids().map(str::to_string).collect();
        let tags = (0..data.len()).map(|i| data.tags(i).to_vec()).collect();
        let cells = fractions
            .into_iter()
            .enumerate()
            .map(|(i, fractions)| CellData {
                features: data.features(i).clone(),
                fractions,
            })
            .collect();
        Self::from_embeddings(ids, embeddings, tags)?.with_cells(cells)
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn num_parts(&self) -> usize {
        self.parts
    }

    pub fn part_dim(&self) -> usize {
        self.part_dim
    }

    pub fn part_block(&self, l: usize) -> Range<usize> {
        l * self.part_dim..(l + 1) * self.part_dim
    }

    pub fn position(&self, id: &str) -> Result<usize> {
        self.id_index
            .get(id)
            .copied()
            .ok_or_else(|| Error::UnknownImage(id.to_string()))
    }

    pub fn embedding(&self, idx: usize) -> &EmbeddingVector {
        &self.embeddings[idx]
    }

    pub fn tags(&self, idx: usize) -> &[String] {
        &self.tags[idx]
    }

    pub fn cells(&self, idx: usize) -> Option<&CellData> {
        self.cells.as_ref().map(|c| &c[idx])
    }

    fn check_model(&self, params: &ModelParams) -> Result<()> {
        if params.num_parts() != self.parts || params.part_dim() != self.part_dim {
            return Err(Error::Incompatible(format!(
                "index has {}x{} blocks, model has {}x{}",
                self.parts,
                self.part_dim,
                params.num_parts(),
                params.part_dim()
            )));
        }
        Ok(())
    }
}

/// Selected parts and the embedding dimensions they own.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PartMask {
    parts: Vec<usize>,
    dims: Vec<usize>,
    in_mask: Vec<bool>,
}

impl PartMask {
    pub fn from_indices(parts: &[usize], num_parts: usize, part_dim: usize) -> Result<Self> {
        if parts.is_empty() {
            return Err(Error::arg("part mask must select at least one part"));
        }
        let mut sel = parts.to_vec();
        sel.sort_unstable();
        sel.dedup();
        if let Some(&bad) = sel.iter().find(|&&p| p >= num_parts) {
            return Err(Error::arg(format!("part index {bad} out of range for {num_parts} parts")));
        }
        let mut in_mask = vec![false; num_parts * part_dim];
        for &p in &sel {
            in_mask[p * part_dim..(p + 1) * part_dim].fill(true);
        }
        let dims = (0..in_mask.len()).filter(|&d| in_mask[d]).collect();
        Ok(Self {
            parts: sel,
            dims,
            in_mask,
        })
    }

    /// Mask from part names, matched case-insensitively against `scheme`.
    pub fn from_names<S: AsRef<str>>(names: &[S], scheme: &PartScheme, part_dim: usize) -> Result<Self> {
        let idx = names
            .iter()
            .map(|n| {
                scheme
                    .part_index(n.as_ref())
                    .ok_or_else(|| Error::UnknownPart(n.as_ref().to_string()))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_indices(&idx, scheme.num_parts(), part_dim)
    }

    pub fn all(num_parts: usize, part_dim: usize) -> Self {
        let parts: Vec<usize> = (0..num_parts).collect();
        Self::from_indices(&parts, num_parts, part_dim).expect("nonempty")
    }

    pub fn parts(&self) -> &[usize] {
        &self.parts
    }

    /// `K_q`, ascending.
    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn contains(&self, dim: usize) -> bool {
        self.in_mask[dim]
    }

    pub fn width(&self) -> usize {
        self.in_mask.len()
    }

    /// Copy of `v` with dims outside the mask zeroed.
    pub fn zero_outside(&self, v: &[f64]) -> Vec<f64> {
        v.iter()
            .zip(&self.in_mask)
            .map(|(&x, &m)| if m { x } else { 0.0 })
            .collect()
    }

    /// Copy of `v` with dims inside the mask zeroed.
    pub fn zero_inside(&self, v: &[f64]) -> Vec<f64> {
        v.iter()
            .zip(&self.in_mask)
            .map(|(&x, &m)| if m { 0.0 } else { x })
            .collect()
    }

    pub fn slice(&self, v: &[f64]) -> Vec<f64> {
        self.dims.iter().map(|&d| v[d]).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredId {
    pub id: String,
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankedList {
    pub query: String,
    pub results: Vec<ScoredId>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RetrieveOptions {
    pub top_m: usize,
    pub exclude_query: bool,
}

impl Default for RetrieveOptions {
    fn default() -> Self {
        Self {
            top_m: 5,
            exclude_query: true,
        }
    }
}

/// Score descending, then id ascending.
pub fn rank_order(a: &ScoredId, b: &ScoredId) -> Ordering {
    b.score.total_cmp(&a.score).then_with(|| a.id.cmp(&b.id))
}

/// Scores `candidates` against `query` and returns the top `top_m`.
pub fn rank_candidates(index: &EmbeddingIndex, query: &[f64], candidates: &[usize], top_m: usize) -> Vec<ScoredId> {
    let mut scored = par::map(candidates, |&i| ScoredId {
        id: index.ids[i].clone(),
        score: cosine(query, index.embeddings[i].values()),
    });
    scored.sort_by(rank_order);
    scored.truncate(top_m);
    scored
}

fn candidates(index: &EmbeddingIndex, skip: Option<usize>) -> Vec<usize> {
    (0..index.len()).filter(|&i| Some(i) != skip).collect()
}

fn tag_set_or_zero<S: AsRef<str>>(tags: &[S], params: &ModelParams) -> Result<Vec<f64>> {
    if tags.is_empty() {
        return Ok(vec![0.0; params.embed_dim()]);
    }
    Ok(normalize(embed_tag_names(tags, params)?.values()))
}

/// Query vector `x̂_q + (v̂_pos − v̂_neg)`, each term unit-normalized.
pub fn arithmetic_query<S: AsRef<str>>(
    index: &EmbeddingIndex,
    params: &ModelParams,
    query_id: &str,
    pos_tags: &[S],
    neg_tags: &[S],
) -> Result<Vec<f64>> {
    index.check_model(params)?;
    let q = index.position(query_id)?;
    let pos = tag_set_or_zero(pos_tags, params)?;
    let neg = tag_set_or_zero(neg_tags, params)?;
    let x = normalize(index.embeddings[q].values());
    Ok(x.iter().zip(&pos).zip(&neg).map(|((x, p), n)| x + (p - n)).collect())
}

/// Image ± tag retrieval.
pub fn retrieve<S: AsRef<str>>(
    index: &EmbeddingIndex,
    params: &ModelParams,
    query_id: &str,
    pos_tags: &[S],
    neg_tags: &[S],
    opts: RetrieveOptions,
) -> Result<RankedList> {
    let query = arithmetic_query(index, params, query_id, pos_tags, neg_tags)?;
    let skip = opts.exclude_query.then(|| index.position(query_id)).transpose()?;
    Ok(RankedList {
        query: query_id.to_string(),
        results: rank_candidates(index, &query, &candidates(index, skip), opts.top_m),
    })
}

/// Mean of the single-tag embeddings of `tags`.
pub fn mean_tag_embedding<S: AsRef<str>>(tags: &[S], params: &ModelParams) -> Result<Vec<f64>> {
    if tags.is_empty() {
        return Err(Error::arg("at least one positive tag is required"));
    }
    let mut out = vec![0.0; params.embed_dim()];
    for t in tags {
        let row = params.tag_row(params.vocab().index_of(t.as_ref())?);
        for (o, v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
    let n = tags.len() as f64;
    out.iter_mut().for_each(|o| *o /= n);
    Ok(out)
}

/// Query vector for part-masked retrieval from an already built `v_pos`.
/// `v_pos` is kept only inside the mask and `x_q` only outside it; each is
/// then unit-normalized.
pub fn masked_query(x_q: &[f64], v_pos: &[f64], mask: &PartMask) -> Vec<f64> {
    let v = normalize(&mask.zero_outside(v_pos));
    let x = normalize(&mask.zero_inside(x_q));
    x.iter().zip(&v).map(|(a, b)| a + b).collect()
}

/// Replaces the selected parts of the query image with the positive tags.
pub fn retrieve_part_masked<S: AsRef<str>>(
    index: &EmbeddingIndex,
    params: &ModelParams,
    query_id: &str,
    pos_tags: &[S],
    mask: &PartMask,
    opts: RetrieveOptions,
) -> Result<RankedList> {
    index.check_model(params)?;
    if mask.width() != params.embed_dim() {
        return Err(Error::Dimension {
            what: "part mask width",
            expected: params.embed_dim(),
            actual: mask.width(),
        });
    }
    let q = index.position(query_id)?;
    let v_pos = mean_tag_embedding(pos_tags, params)?;
    let query = masked_query(index.embeddings[q].values(), &v_pos, mask);
    let skip = opts.exclude_query.then_some(q);
    Ok(RankedList {
        query: query_id.to_string(),
        results: rank_candidates(index, &query, &candidates(index, skip), opts.top_m),
    })
}

/// Orders images by cosine between the masked slices of their embedding and
/// of the tag embedding. `top_m = None` keeps every candidate.
pub fn reorder(
    index: &EmbeddingIndex,
    params: &ModelParams,
    tag: &str,
    mask: &PartMask,
    restrict_to_tagged: bool,
    top_m: Option<usize>,
) -> Result<RankedList> {
    index.check_model(params)?;
    let t = params.vocab().index_of(tag)?;
    let v = mask.slice(embed_single_tag(t, params)?.values());
    let pool: Vec<usize> = (0..index.len())
        .filter(|&i| !restrict_to_tagged || index.tags[i].iter().any(|x| x == tag))
        .collect();
    let mut scored = par::map(&pool, |&i| ScoredId {
        id: index.ids[i].clone(),
        score: cosine(&mask.slice(index.embeddings[i].values()), &v),
    });
    scored.sort_by(rank_order);
    if let Some(m) = top_m {
        scored.truncate(m);
    }
    Ok(RankedList {
        query: tag.to_string(),
        results: scored,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AamGrid {
    pub image_id: String,
    pub tag: String,
    #[serde(rename = "I")]
    pub rows: usize,
    #[serde(rename = "J")]
    pub cols: usize,
    pub scores: Vec<Vec<f64>>,
}

/// Per-cell attention scores from features, part fractions and a tag
/// embedding. Cells with no foreground score 0.
pub fn aam_scores(
    feat: &GridFeatureTensor,
    fractions: &GridPartFractions,
    tag_embedding: &[f64],
    params: &ModelParams,
) -> Result<Vec<Vec<f64>>> {
    if (feat.rows(), feat.cols()) != (fractions.rows(), fractions.cols()) {
        return Err(Error::arg("feature grid and fraction grid differ"));
    }
    if feat.dim() != params.feature_dim() || fractions.num_parts() != params.num_parts() {
        return Err(Error::Incompatible("cell data does not match the model".into()));
    }
    let k = params.part_dim();
    let mut proj = vec![0.0; k];
    let mut scores = vec![vec![0.0; feat.cols()]; feat.rows()];
    for (i, row) in scores.iter_mut().enumerate() {
        for (j, s) in row.iter_mut().enumerate() {
            let mut x = vec![0.0; k];
            let mut v = vec![0.0; k];
            for (l, &g) in fractions.cell(i, j).iter().enumerate() {
                if g == 0.0 {
                    continue;
                }
                params.project_into(l, feat.cell(i, j), &mut proj);
                let block = &tag_embedding[l * k..(l + 1) * k];
                for d in 0..k {
                    x[d] += g * proj[d];
                    v[d] += g * block[d];
                }
            }
            *s = cosine(&x, &v);
        }
    }
    Ok(scores)
}

/// Attribute activation map of `tag` over one indexed image.
pub fn compute_aam(index: &EmbeddingIndex, params: &ModelParams, image_id: &str, tag: &str) -> Result<AamGrid> {
    index.check_model(params)?;
    let i = index.position(image_id)?;
    let t = params.vocab().index_of(tag)?;
    let cells = index
        .cells(i)
        .ok_or_else(|| Error::arg("index was built without cell data"))?;
    let v = embed_single_tag(t, params)?;
    let scores = aam_scores(&cells.features, &cells.fractions, v.values(), params)?;
    Ok(AamGrid {
        image_id: image_id.to_string(),
        tag: tag.to_string(),
        rows: cells.features.rows(),
        cols: cells.features.cols(),
        scores,
    })
}
