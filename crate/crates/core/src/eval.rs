//! Ranking metrics, repeated retrieval trials, region attention scoring and
//! Welch's t-test.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::dataset::{Dataset, RegionCategory};
use crate::embedding::{cosine, ModelParams};
use crate::error::{Error, Result};
use crate::loss::{LossConfig, LossVariant};
use crate::par;
use crate::query::{aam_scores, EmbeddingIndex};
use crate::train::{csv_err, train, TrainConfig};

fn check_m(len: usize, m: usize) -> Result<()> {
    if m == 0 {
        return Err(Error::arg("M must be at least 1"));
    }
    if len < m {
        return Err(Error::arg(format!("ranking of length {len} is shorter than M = {m}")));
    }
    Ok(())
}

/// Fraction of the first `m` items that are relevant.
pub fn precision_at_m(relevance: &[bool], m: usize) -> Result<f64> {
    check_m(relevance.len(), m)?;
    Ok(relevance[..m].iter().filter(|&&r| r).count() as f64 / m as f64)
}

/// NDCG over the first `m` items with binary gains. The ideal ranking puts
/// `min(m, total_relevant)` relevant items first. Zero when nothing is
/// relevant.
pub fn ndcg_at_m(relevance: &[bool], m: usize, total_relevant: usize) -> Result<f64> {
    check_m(relevance.len(), m)?;
    let discount = |i: usize| 1.0 / ((i + 2) as f64).log2();
    let dcg: f64 = (0..m).filter(|&i| relevance[i]).map(discount).sum();
    let idcg: f64 = (0..m.min(total_relevant)).map(discount).sum();
    Ok(if idcg == 0.0 { 0.0 } else { dcg / idcg })
}

/// One tag's repeated pool-retrieval protocol.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialSpec {
    pub tag: String,
    pub m_values: Vec<usize>,
    pub negative_ratio: usize,
    pub repeats: usize,
    pub seed: u64,
}

impl TrialSpec {
    pub fn new(tag: impl Into<String>, seed: u64) -> Self {
        Self {
            tag: tag.into(),
            m_values: vec![5, 10, 15],
            negative_ratio: 10,
            repeats: 30,
            seed,
        }
    }

    pub fn for_tag(&self, tag: &str) -> Self {
        Self {
            tag: tag.to_string(),
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.negative_ratio == 0 || self.repeats == 0 {
            return Err(Error::arg("negative ratio and repeats must be at least 1"));
        }
        if self.m_values.is_empty() || self.m_values.contains(&0) {
            return Err(Error::arg("M values must be nonempty and positive"));
        }
        Ok(())
    }

    fn max_m(&self) -> usize {
        self.m_values.iter().copied().max().unwrap_or(0)
    }
}

/// Per-repeat metrics of one tag. Inner vectors follow `m_values`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialResult {
    pub tag: String,
    pub positives: usize,
    pub pool_size: usize,
    pub m_values: Vec<usize>,
    pub precision: Vec<Vec<f64>>,
    pub ndcg: Vec<Vec<f64>>,
}

fn column_means(rows: &[Vec<f64>]) -> Vec<f64> {
    let n = rows.len() as f64;
    let width = rows.first().map_or(0, Vec::len);
    (0..width).map(|c| rows.iter().map(|r| r[c]).sum::<f64>() / n).collect()
}

impl TrialResult {
    pub fn mean_precision(&self) -> Vec<f64> {
        column_means(&self.precision)
    }

    pub fn mean_ndcg(&self) -> Vec<f64> {
        column_means(&self.ndcg)
    }
}

/// Positive and negative index positions for `tag`.
pub fn split_by_tag(index: &EmbeddingIndex, tag: &str) -> (Vec<usize>, Vec<usize>) {
    (0..index.len()).partition(|&i| index.tags(i).iter().any(|t| t == tag))
}

/// Whether `tag` can support the pool sizes of `spec`.
pub fn pool_available(index: &EmbeddingIndex, tag: &str, spec: &TrialSpec) -> bool {
    let (pos, neg) = split_by_tag(index, tag);
    pos.len() >= spec.max_m() && neg.len() >= spec.negative_ratio * pos.len()
}

/// Orders `pool` by cosine to `query`, score descending then id ascending.
fn rank_pool(index: &EmbeddingIndex, query: &[f64], pool: &[usize]) -> Vec<usize> {
    let scores: Vec<f64> = pool
        .iter()
        .map(|&i| cosine(query, index.embedding(i).values()))
        .collect();
    let mut order: Vec<usize> = (0..pool.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .total_cmp(&scores[a])
            .then_with(|| index.ids()[pool[a]].cmp(&index.ids()[pool[b]]))
    });
    order.into_iter().map(|k| pool[k]).collect()
}

/// All positives plus `ratio × positives` negatives drawn without
/// replacement, ranked against the tag embedding, once per repeat.
/// Repeat `r` draws from ChaCha stream `r` of `seed`.
pub fn tag_retrieval_trial(index: &EmbeddingIndex, params: &ModelParams, spec: &TrialSpec) -> Result<TrialResult> {
    spec.validate()?;
    let t = params.vocab().index_of(&spec.tag)?;
    let tag_vec = params.tag_row(t);
    let (pos, neg) = split_by_tag(index, &spec.tag);
    let need_neg = spec.negative_ratio * pos.len();
    if pos.len() < spec.max_m() || neg.len() < need_neg {
        return Err(Error::InsufficientPool {
            tag: spec.tag.clone(),
            positives: pos.len(),
            negatives: neg.len(),
            need_pos: spec.max_m(),
            need_neg,
        });
    }
    let runs = par::map_range(spec.repeats, |r| -> Result<(Vec<f64>, Vec<f64>)> {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        rng.set_stream(r as u64);
        let mut pool = pos.clone();
        pool.extend(neg.choose_multiple(&mut rng, need_neg).copied());
        let ranked = rank_pool(index, tag_vec, &pool);
        let rel: Vec<bool> = ranked
            .iter()
            .map(|&i| index.tags(i).iter().any(|x| x == &spec.tag))
            .collect();
        let p = spec
            .m_values
            .iter()
            .map(|&m| precision_at_m(&rel, m))
            .collect::<Result<_>>()?;
        let n = spec
            .m_values
            .iter()
            .map(|&m| ndcg_at_m(&rel, m, pos.len()))
            .collect::<Result<_>>()?;
        Ok((p, n))
    });
    let mut precision = Vec::with_capacity(spec.repeats);
    let mut ndcg = Vec::with_capacity(spec.repeats);
    for r in runs {
        let (p, n) = r?;
        precision.push(p);
        ndcg.push(n);
    }
    Ok(TrialResult {
        tag: spec.tag.clone(),
        positives: pos.len(),
        pool_size: pos.len() + need_neg,
        m_values: spec.m_values.clone(),
        precision,
        ndcg,
    })
}

/// Tag trials averaged into one table row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TagEvalSummary {
    pub label: String,
    pub m_values: Vec<usize>,
    pub mean_precision: Vec<f64>,
    pub mean_ndcg: Vec<f64>,
    /// Per repeat, averaged over tags.
    pub repeat_precision: Vec<Vec<f64>>,
    pub repeat_ndcg: Vec<Vec<f64>>,
    pub trials: Vec<TrialResult>,
}

impl TagEvalSummary {
    pub fn from_trials(label: impl Into<String>, trials: Vec<TrialResult>) -> Result<Self> {
        let first = trials.first().ok_or_else(|| Error::arg("no tag trials to summarize"))?;
        let (repeats, width) = (first.precision.len(), first.m_values.len());
        let m_values = first.m_values.clone();
        if trials
            .iter()
            .any(|t| t.precision.len() != repeats || t.m_values != m_values)
        {
            return Err(Error::arg("trials disagree on repeats or M values"));
        }
        let n = trials.len() as f64;
        let avg = |pick: fn(&TrialResult) -> &Vec<Vec<f64>>| -> Vec<Vec<f64>> {
            (0..repeats)
                .map(|r| (0..width).map(|c| trials.iter().map(|t| pick(t)[r][c]).sum::<f64>() / n).collect())
                .collect()
        };
        let repeat_precision = avg(|t| &t.precision);
        let repeat_ndcg = avg(|t| &t.ndcg);
        Ok(Self {
            label: label.into(),
            m_values,
            mean_precision: column_means(&repeat_precision),
            mean_ndcg: column_means(&repeat_ndcg),
            repeat_precision,
            repeat_ndcg,
            trials,
        })
    }

    /// Per-repeat values at one `M`, for significance tests.
    pub fn precision_samples(&self, m: usize) -> Option<Vec<f64>> {
        let c = self.m_values.iter().position(|&x| x == m)?;
        Some(self.repeat_precision.iter().map(|r| r[c]).collect())
    }
}

/// Runs the trial for every tag and summarizes under `label`.
pub fn evaluate_tags<S: AsRef<str>>(
    index: &EmbeddingIndex,
    params: &ModelParams,
    tags: &[S],
    template: &TrialSpec,
    label: &str,
) -> Result<TagEvalSummary> {
    let trials = tags
        .iter()
        .map(|t| tag_retrieval_trial(index, params, &template.for_tag(t.as_ref())))
        .collect::<Result<Vec<_>>>()?;
    TagEvalSummary::from_trials(label, trials)
}

/// Table rows `label, P@M…, N@M…`.
pub fn write_topk_csv<W: Write>(rows: &[TagEvalSummary], out: W) -> Result<()> {
    let first = rows.first().ok_or_else(|| Error::arg("no rows"))?;
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["model".to_string()];
    header.extend(first.m_values.iter().map(|m| format!("P@{m}")));
    header.extend(first.m_values.iter().map(|m| format!("N@{m}")));
    w.write_record(&header).map_err(csv_err)?;
    for row in rows {
        let mut rec = vec![row.label.clone()];
        rec.extend(row.mean_precision.iter().chain(&row.mean_ndcg).map(|v| format!("{v:.6}")));
        w.write_record(&rec).map_err(csv_err)?;
    }
    w.flush().map_err(|e| csv_err(e.into()))
}

/// Region evaluation over named part categories.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegionEvalSpec {
    pub categories: Vec<RegionCategory>,
    pub m: usize,
    /// The control scores each ranking against the category whose parts are
    /// all shifted by this amount (mod `L`). Zero disables the control.
    pub control_shift: usize,
}

impl RegionEvalSpec {
    pub fn new(categories: Vec<RegionCategory>) -> Self {
        Self {
            categories,
            m: 5,
            control_shift: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegionTagResult {
    pub tag: String,
    pub images: usize,
    pub skipped: usize,
    pub precision: f64,
    pub ndcg: f64,
    pub control_precision: f64,
    pub control_ndcg: f64,
    /// Mean fraction of cells whose dominant part is in the control parts.
    pub control_area_fraction: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegionCategoryResult {
    pub category: String,
    pub parts: Vec<usize>,
    pub control_parts: Vec<usize>,
    pub images: usize,
    pub skipped: usize,
    pub precision: f64,
    pub ndcg: f64,
    pub area_fraction: f64,
    pub control_precision: f64,
    pub control_ndcg: f64,
    pub control_area_fraction: f64,
    pub tags: Vec<RegionTagResult>,
}

struct CellEval {
    precision: f64,
    ndcg: f64,
    control_precision: f64,
    control_ndcg: f64,
    area: f64,
    control_area: f64,
}

/// Ranks grid cells of one image for one tag and scores the top `m` against
/// the dominant-part truth. `None` when the image has no foreground.
fn eval_image(
    index: &EmbeddingIndex,
    params: &ModelParams,
    img: usize,
    tag_vec: &[f64],
    parts: &[bool],
    control: &[bool],
    m: usize,
) -> Result<Option<CellEval>> {
    let cells = index
        .cells(img)
        .ok_or_else(|| Error::arg("index was built without cell data"))?;
    let fr = &cells.fractions;
    let dominant: Vec<Option<usize>> = (0..fr.rows())
        .flat_map(|i| (0..fr.cols()).map(move |j| (i, j)))
        .map(|(i, j)| fr.dominant_part(i, j))
        .collect();
    if dominant.iter().all(Option::is_none) {
        return Ok(None);
    }
    let scores: Vec<f64> = aam_scores(&cells.features, fr, tag_vec, params)?
        .into_iter()
        .flatten()
        .collect();
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let judge = |set: &[bool]| -> Result<(f64, f64, f64)> {
        let truth: Vec<bool> = dominant.iter().map(|d| d.is_some_and(|p| set[p])).collect();
        let rel: Vec<bool> = order.iter().map(|&c| truth[c]).collect();
        let total = truth.iter().filter(|&&t| t).count();
        Ok((
            precision_at_m(&rel, m)?,
            ndcg_at_m(&rel, m, total)?,
            total as f64 / truth.len() as f64,
        ))
    };
    let (precision, ndcg, area) = judge(parts)?;
    let (control_precision, control_ndcg, control_area) = judge(control)?;
    Ok(Some(CellEval {
        precision,
        ndcg,
        control_precision,
        control_ndcg,
        area,
        control_area,
    }))
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

/// Region attention precision per category. For every tag and every image
/// carrying it, grid cells are ranked by attention score; a cell is relevant
/// when its dominant foreground part belongs to the category. Category
/// values average over all scored (tag, image) pairs.
pub fn region_attention_trial(
    index: &EmbeddingIndex,
    params: &ModelParams,
    spec: &RegionEvalSpec,
) -> Result<Vec<RegionCategoryResult>> {
    if spec.m == 0 {
        return Err(Error::arg("M must be at least 1"));
    }
    let l = params.num_parts();
    let scheme = params.scheme();
    let mut out = Vec::with_capacity(spec.categories.len());
    for cat in &spec.categories {
        let parts: Vec<usize> = cat
            .parts
            .iter()
            .map(|p| scheme.part_index(p).ok_or_else(|| Error::UnknownPart(p.clone())))
            .collect::<Result<_>>()?;
        let mut control_parts: Vec<usize> = parts.iter().map(|p| (p + spec.control_shift) % l).collect();
        control_parts.sort_unstable();
        control_parts.dedup();
        let member = |ps: &[usize]| {
            let mut v = vec![false; l];
            ps.iter().for_each(|&p| v[p] = true);
            v
        };
        let (in_cat, in_control) = (member(&parts), member(&control_parts));

        let mut all_evals = Vec::new();
        let mut tag_results = Vec::with_capacity(cat.tags.len());
        let mut skipped_total = 0;
        for tag in &cat.tags {
            let t = params.vocab().index_of(tag)?;
            let tag_vec = params.tag_row(t);
            let (pos, _) = split_by_tag(index, tag);
            let evals = par::map(&pos, |&img| eval_image(index, params, img, tag_vec, &in_cat, &in_control, spec.m))
                .into_iter()
                .collect::<Result<Vec<_>>>()?;
            let skipped = evals.iter().filter(|e| e.is_none()).count();
            let scored: Vec<CellEval> = evals.into_iter().flatten().collect();
            tag_results.push(RegionTagResult {
                tag: tag.clone(),
                images: scored.len(),
                skipped,
                precision: mean(scored.iter().map(|e| e.precision)),
                ndcg: mean(scored.iter().map(|e| e.ndcg)),
                control_precision: mean(scored.iter().map(|e| e.control_precision)),
                control_ndcg: mean(scored.iter().map(|e| e.control_ndcg)),
                control_area_fraction: mean(scored.iter().map(|e| e.control_area)),
            });
            skipped_total += skipped;
            all_evals.extend(scored);
        }
        out.push(RegionCategoryResult {
            category: cat.name.clone(),
            parts,
            control_parts,
            images: all_evals.len(),
            skipped: skipped_total,
            precision: mean(all_evals.iter().map(|e| e.precision)),
            ndcg: mean(all_evals.iter().map(|e| e.ndcg)),
            area_fraction: mean(all_evals.iter().map(|e| e.area)),
            control_precision: mean(all_evals.iter().map(|e| e.control_precision)),
            control_ndcg: mean(all_evals.iter().map(|e| e.control_ndcg)),
            control_area_fraction: mean(all_evals.iter().map(|e| e.control_area)),
            tags: tag_results,
        });
    }
    Ok(out)
}

/// One row `label, <cat> P@M, <cat> N@M, …` per model.
pub fn write_region_csv<W: Write>(rows: &[(String, Vec<RegionCategoryResult>)], m: usize, out: W) -> Result<()> {
    let first = rows.first().ok_or_else(|| Error::arg("no rows"))?;
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["model".to_string()];
    for c in &first.1 {
        header.push(format!("{} P@{m}", c.category));
        header.push(format!("{} N@{m}", c.category));
    }
    w.write_record(&header).map_err(csv_err)?;
    for (label, cats) in rows {
        let mut rec = vec![label.clone()];
        for c in cats {
            rec.push(format!("{:.6}", c.precision));
            rec.push(format!("{:.6}", c.ndcg));
        }
        w.write_record(&rec).map_err(csv_err)?;
    }
    w.flush().map_err(|e| csv_err(e.into()))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WelchResult {
    pub t: f64,
    pub df: f64,
    /// Two-sided.
    pub p: f64,
    /// Both samples have zero variance. Then `t` is 0 or infinite and `p`
    /// is 1 or 0.
    pub degenerate: bool,
}

fn mean_var(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let v = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, v)
}

/// Welch's unequal-variance t-test with Welch–Satterthwaite degrees of
/// freedom.
pub fn welch_t_test(a: &[f64], b: &[f64]) -> Result<WelchResult> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::arg("each sample needs at least two values"));
    }
    if a.iter().chain(b).any(|x| !x.is_finite()) {
        return Err(Error::arg("samples must be finite"));
    }
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (ma, va) = mean_var(a);
    let (mb, vb) = mean_var(b);
    let (sa, sb) = (va / na, vb / nb);
    let se2 = sa + sb;
    if se2 == 0.0 {
        let diff = ma - mb;
        return Ok(WelchResult {
            t: if diff == 0.0 { 0.0 } else { diff.signum() * f64::INFINITY },
            df: na + nb - 2.0,
            p: if diff == 0.0 { 1.0 } else { 0.0 },
            degenerate: true,
        });
    }
    let t = (ma - mb) / se2.sqrt();
    let df = se2 * se2 / (sa * sa / (na - 1.0) + sb * sb / (nb - 1.0));
    let dist = StudentsT::new(0.0, 1.0, df).map_err(|e| Error::arg(e.to_string()))?;
    let p = (2.0 * dist.sf(t.abs())).min(1.0);
    Ok(WelchResult {
        t,
        df,
        p,
        degenerate: false,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: LossVariant,
    pub summary: TagEvalSummary,
}

/// Trains one model per loss variant from the same initialization and
/// evaluates each on the same tags with the same trial seeds.
pub fn loss_ablation<S: AsRef<str>>(
    data: &Dataset,
    init: &ModelParams,
    train_cfg: &TrainConfig,
    base_loss: &LossConfig,
    variants: &[LossVariant],
    tags: &[S],
    template: &TrialSpec,
) -> Result<Vec<AblationRow>> {
    let samples = data.training_samples(init.vocab())?;
    let mut rows = Vec::with_capacity(variants.len());
    for &variant in variants {
        let cfg = LossConfig { variant, ..*base_loss };
        let outcome = train(&samples, init.clone(), train_cfg, &cfg)?;
        let index = EmbeddingIndex::build(&outcome.params, data)?;
        let summary = evaluate_tags(&index, &outcome.params, tags, template, variant.name())?;
        rows.push(AblationRow { variant, summary });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::{EmbeddingVector, FrequencyScope, TagVocabulary};
    use crate::partmap::PartScheme;
    use proptest::prelude::*;
    use rand::Rng;

    fn count_precision(rel: &[bool], m: usize) -> f64 {
        let mut hits = 0;
        for r in rel.iter().take(m) {
            if *r {
                hits += 1;
            }
        }
        hits as f64 / m as f64
    }

    #[test]
    fn precision_examples() {
        assert_eq!(precision_at_m(&[true, true, true, false, false], 5).unwrap(), 0.6);
        assert_eq!(precision_at_m(&[true; 7], 5).unwrap(), 1.0);
        assert!(precision_at_m(&[true; 3], 5).is_err());
        assert!(precision_at_m(&[true; 3], 0).is_err());
    }

    #[test]
    fn ndcg_examples() {
        let g = 1.0 / 3f64.log2();
        let want = g / (1.0 + g);
        let got = ndcg_at_m(&[false, true], 2, 2).unwrap();
        assert!((got - want).abs() < 1e-12);
        assert!((got - 0.3869).abs() < 1e-4);
        assert_eq!(ndcg_at_m(&[true, true, false], 3, 2).unwrap(), 1.0);
        assert_eq!(ndcg_at_m(&[false, false, false], 3, 0).unwrap(), 0.0);
    }

    #[test]
    fn precision_matches_counting_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..200 {
            let len = rng.gen_range(1..40);
            let rel: Vec<bool> = (0..len).map(|_| rng.gen_bool(0.3)).collect();
            let m = rng.gen_range(1..=len);
            assert_eq!(precision_at_m(&rel, m).unwrap(), count_precision(&rel, m));
        }
    }

    proptest! {
        #[test]
        fn metrics_in_unit_interval_and_hits_monotone(
            rel in proptest::collection::vec(any::<bool>(), 1..40),
            extra in 0usize..10,
        ) {
            let total = rel.iter().filter(|&&r| r).count() + extra;
            let mut prev_hits = 0.0;
            for m in 1..=rel.len() {
                let p = precision_at_m(&rel, m).unwrap();
                let n = ndcg_at_m(&rel, m, total).unwrap();
                prop_assert!((0.0..=1.0).contains(&p));
                prop_assert!((0.0..=1.0 + 1e-12).contains(&n));
                prop_assert!(p * m as f64 >= prev_hits - 1e-12);
                prev_hits = p * m as f64;
            }
        }

        #[test]
        fn ndcg_one_iff_relevant_prefix(rel in proptest::collection::vec(any::<bool>(), 1..20), m in 1usize..20) {
            prop_assume!(m <= rel.len());
            let total = rel.iter().filter(|&&r| r).count();
            let k = m.min(total);
            let prefix = rel[..k].iter().all(|&r| r);
            let n = ndcg_at_m(&rel, m, total).unwrap();
            if total > 0 {
                prop_assert_eq!((n - 1.0).abs() < 1e-12, prefix);
            }
        }

        #[test]
        fn welch_swap_negates_t(
            a in proptest::collection::vec(-10.0f64..10.0, 2..12),
            b in proptest::collection::vec(-10.0f64..10.0, 2..12),
        ) {
            let ab = welch_t_test(&a, &b).unwrap();
            let ba = welch_t_test(&b, &a).unwrap();
            prop_assert!((ab.t + ba.t).abs() < 1e-9 * (1.0 + ab.t.abs()));
            prop_assert!((ab.p - ba.p).abs() < 1e-12);
        }
    }

    // Incomplete beta by Lentz's continued fraction, for the t CDF oracle.
    fn ln_gamma(x: f64) -> f64 {
        const G: [f64; 9] = [
            0.999_999_999_999_809_9,
            676.520_368_121_885_1,
            -1_259.139_216_722_402_8,
            771.323_428_777_653_1,
            -176.615_029_162_140_6,
            12.507_343_278_686_905,
            -0.138_571_095_265_720_12,
            9.984_369_578_019_572e-6,
            1.505_632_735_149_311_6e-7,
        ];
        let x = x - 1.0;
        let mut a = G[0];
        let t = x + 7.5;
        for (i, g) in G.iter().enumerate().skip(1) {
            a += g / (x + i as f64);
        }
        0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + a.ln()
    }

    fn beta_cf(a: f64, b: f64, x: f64) -> f64 {
        let tiny = 1e-300;
        let mut c = 1.0;
        let mut d = 1.0 - (a + b) * x / (a + 1.0);
        if d.abs() < tiny {
            d = tiny;
        }
        d = 1.0 / d;
        let mut h = d;
        for m in 1..10_000 {
            let m = m as f64;
            let num = m * (b - m) * x / ((a + 2.0 * m - 1.0) * (a + 2.0 * m));
            d = 1.0 + num * d;
            d = if d.abs() < tiny { tiny } else { d };
            c = 1.0 + num / c;
            c = if c.abs() < tiny { tiny } else { c };
            d = 1.0 / d;
            h *= d * c;
            let num = -(a + m) * (a + b + m) * x / ((a + 2.0 * m) * (a + 2.0 * m + 1.0));
            d = 1.0 + num * d;
            d = if d.abs() < tiny { tiny } else { d };
            c = 1.0 + num / c;
            c = if c.abs() < tiny { tiny } else { c };
            d = 1.0 / d;
            let del = d * c;
            h *= del;
            if (del - 1.0).abs() < 1e-16 {
                break;
            }
        }
        h
    }

    fn reg_inc_beta(a: f64, b: f64, x: f64) -> f64 {
        if x <= 0.0 {
            return 0.0;
        }
        if x >= 1.0 {
            return 1.0;
        }
        let ln_front = ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) + a * x.ln() + b * (1.0 - x).ln();
        if x < (a + 1.0) / (a + b + 2.0) {
            ln_front.exp() * beta_cf(a, b, x) / a
        } else {
            1.0 - ln_front.exp() * beta_cf(b, a, 1.0 - x) / b
        }
    }

    fn oracle_welch(a: &[f64], b: &[f64]) -> (f64, f64, f64) {
        let stats = |xs: &[f64]| {
            let n = xs.len() as f64;
            let mut s = 0.0;
            for x in xs {
                s += x;
            }
            let m = s / n;
            let mut ss = 0.0;
            for x in xs {
                ss += (x - m) * (x - m);
            }
            (n, m, ss / (n - 1.0))
        };
        let (na, ma, va) = stats(a);
        let (nb, mb, vb) = stats(b);
        let t = (ma - mb) / (va / na + vb / nb).sqrt();
        let df = (va / na + vb / nb).powi(2) / ((va / na).powi(2) / (na - 1.0) + (vb / nb).powi(2) / (nb - 1.0));
        let p = reg_inc_beta(df / 2.0, 0.5, df / (df + t * t));
        (t, df, p)
    }

    #[test]
    fn welch_matches_continued_fraction_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let normal = rand_distr::Normal::new(0.0, 1.0).unwrap();
        for _ in 0..100 {
            let na = rng.gen_range(2..40);
            let nb = rng.gen_range(2..40);
            let shift: f64 = rng.gen_range(-1.5..1.5);
            let sa: f64 = rng.gen_range(0.2..3.0);
            let a: Vec<f64> = (0..na).map(|_| rand_distr::Distribution::sample(&normal, &mut rng) * sa).collect();
            let b: Vec<f64> = (0..nb)
                .map(|_| rand_distr::Distribution::sample(&normal, &mut rng) + shift)
                .collect();
            let got = welch_t_test(&a, &b).unwrap();
            let (t, df, p) = oracle_welch(&a, &b);
            assert!((got.t - t).abs() < 1e-9 * (1.0 + t.abs()));
            assert!((got.df - df).abs() < 1e-9 * df);
            assert!((got.p - p).abs() < 1e-6, "p {} vs {}", got.p, p);
        }
    }

    #[test]
    fn welch_degenerate_cases() {
        let same = [0.3, 0.7, 0.1, 0.9];
        let r = welch_t_test(&same, &same).unwrap();
        assert_eq!(r.t, 0.0);
        assert!((r.p - 1.0).abs() < 1e-12);
        let r = welch_t_test(&[0.0; 4], &[1.0; 4]).unwrap();
        assert!(r.degenerate);
        assert_eq!(r.p, 0.0);
        assert!(r.t.is_infinite() && r.t < 0.0);
        assert!(welch_t_test(&[1.0], &[1.0, 2.0]).is_err());
    }

    fn planted(n_pos: usize, n_neg: usize, exact: bool, seed: u64) -> (EmbeddingIndex, ModelParams) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scheme = PartScheme::numbered(1).unwrap();
        let vocab = TagVocabulary::new(vec!["a".into(), "b".into()], vec![n_pos as u32, n_neg as u32]).unwrap();
        let tag_a = vec![1.0, 0.0, 0.0];
        let mut tm = tag_a.clone();
        tm.extend([0.0, 1.0, 0.0]);
        let params = ModelParams::from_parts(
            scheme,
            vocab,
            3,
            1,
            (1, 1),
            vec![vec![0.0; 3]],
            tm,
            FrequencyScope::Dataset,
            0,
        )
        .unwrap();
        let mut ids = Vec::new();
        let mut embs = Vec::new();
        let mut tags = Vec::new();
        for i in 0..n_pos + n_neg {
            ids.push(format!("i{i:03}"));
            let v: Vec<f64> = if i < n_pos && exact {
                tag_a.clone()
            } else {
                (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect()
            };
            embs.push(EmbeddingVector::new(v, 3).unwrap());
            tags.push(vec![if i < n_pos { "a" } else { "b" }.to_string()]);
        }
        (EmbeddingIndex::from_embeddings(ids, embs, tags).unwrap(), params)
    }

    #[test]
    fn planted_optimum_scores_one() {
        let (index, params) = planted(16, 200, true, 1);
        let r = tag_retrieval_trial(&index, &params, &TrialSpec::new("a", 3)).unwrap();
        assert_eq!(r.pool_size, 16 + 160);
        assert!(r.mean_precision().iter().all(|&p| p == 1.0));
        assert!(r.mean_ndcg().iter().all(|&n| (n - 1.0).abs() < 1e-12));
    }

    #[test]
    fn random_embeddings_land_near_chance() {
        let p5 = (0..40)
            .map(|seed| {
                let (index, params) = planted(40, 600, false, seed);
                tag_retrieval_trial(&index, &params, &TrialSpec::new("a", 5)).unwrap().mean_precision()[0]
            })
            .sum::<f64>()
            / 40.0;
        assert!((0.04..0.16).contains(&p5), "{p5}");
    }

    #[test]
    fn insufficient_pool_is_named() {
        let (index, params) = planted(16, 100, true, 1);
        match tag_retrieval_trial(&index, &params, &TrialSpec::new("a", 0)) {
            Err(Error::InsufficientPool {
                positives,
                negatives,
                need_neg,
                ..
            }) => assert_eq!((positives, negatives, need_neg), (16, 100, 160)),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn small_pool_matches_exhaustive_sort() {
        let (index, params) = planted(5, 50, false, 8);
        let spec = TrialSpec {
            m_values: vec![1, 3, 5],
            repeats: 4,
            ..TrialSpec::new("a", 11)
        };
        let r = tag_retrieval_trial(&index, &params, &spec).unwrap();
        for rep in 0..4 {
            let mut rng = ChaCha8Rng::seed_from_u64(11);
            rng.set_stream(rep as u64);
            let negs: Vec<usize> = (5..55).collect();
            let mut pool: Vec<usize> = (0..5).collect();
            pool.extend(negs.choose_multiple(&mut rng, 50).copied());
            let score = |i: usize| {
                let v = index.embedding(i).values();
                v[0] / (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
            };
            // exhaustive: count items strictly ahead of each
            let mut ranked = vec![usize::MAX; pool.len()];
            for &i in &pool {
                let ahead = pool
                    .iter()
                    .filter(|&&j| score(j) > score(i) || (score(j) == score(i) && index.ids()[j] < index.ids()[i]))
                    .count();
                ranked[ahead] = i;
            }
            for (c, &m) in [1usize, 3, 5].iter().enumerate() {
                let hits = ranked[..m].iter().filter(|&&i| i < 5).count();
                assert!((r.precision[rep][c] - hits as f64 / m as f64).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn single_foreground_cell_ranks_first() {
        let scheme = PartScheme::numbered(1).unwrap();
        let vocab = TagVocabulary::new(vec!["a".into()], vec![1]).unwrap();
        let params = ModelParams::from_parts(
            scheme.clone(),
            vocab,
            1,
            1,
            (2, 2),
            vec![vec![1.0]],
            vec![1.0],
            FrequencyScope::Dataset,
            0,
        )
        .unwrap();
        // 4x4 pixels, only the bottom-right 2x2 cell is foreground
        let mut labels = vec![0u8; 16];
        for (r, c) in [(2, 2), (2, 3), (3, 2), (3, 3)] {
            labels[r * 4 + c] = 1;
        }
        let seg = crate::partmap::SegmentationMap::new(4, 4, labels).unwrap();
        let fractions = crate::partmap::compute_grid_part_fractions(&seg, &scheme, 2, 2).unwrap();
        let features = crate::embedding::GridFeatureTensor::new(2, 2, 1, vec![5.0, 5.0, 5.0, 0.5]).unwrap();
        let index = EmbeddingIndex::from_embeddings(
            vec!["x".into()],
            vec![EmbeddingVector::new(vec![1.0], 1).unwrap()],
            vec![vec!["a".into()]],
        )
        .unwrap()
        .with_cells(vec![crate::query::CellData { features, fractions }])
        .unwrap();
        let cat = RegionCategory {
            name: "part-1".into(),
            parts: vec!["part-1".into()],
            tags: vec!["a".into()],
        };
        let spec = RegionEvalSpec {
            m: 1,
            ..RegionEvalSpec::new(vec![cat])
        };
        let res = region_attention_trial(&index, &params, &spec).unwrap();
        assert_eq!(res[0].precision, 1.0);
        assert_eq!(res[0].area_fraction, 0.25);
        assert_eq!(res[0].images, 1);
    }

    #[test]
    fn trials_are_reproducible() {
        let (index, params) = planted(20, 300, false, 3);
        let spec = TrialSpec::new("a", 9);
        let a = tag_retrieval_trial(&index, &params, &spec).unwrap();
        let b = tag_retrieval_trial(&index, &params, &spec).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn topk_csv_layout() {
        let (index, params) = planted(16, 200, true, 1);
        let s = evaluate_tags(&index, &params, &["a"], &TrialSpec::new("", 1), "planted").unwrap();
        let mut buf = Vec::new();
        write_topk_csv(&[s], &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), "model,P@5,P@10,P@15,N@5,N@10,N@15");
        assert!(lines.next().unwrap().starts_with("planted,1.000000,"));
    }
}
