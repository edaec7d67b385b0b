//! Parameter gradients and the SGD training loop.
//!
//! Pooling by grid weights does not depend on the parameters, so every
//! training sample is reduced once to its per-part pooled features. A batch
//! forward pass is then one projection per part per sample, normalization,
//! and the configured loss. Gradients flow back through the normalization
//! Jacobian `(I − uuᵀ)/‖e‖` into `W_I,l` (outer product with the pooled
//! feature) and into the rows of `W_T` (scaled by the tag weights).

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::embedding::{
    dot, embed_pooled, embed_tag_set_with_counts, minibatch_counts, norm, pool_features,
    FrequencyScope, GridFeatureTensor, ModelParams,
};
use crate::error::{Error, Result};
use crate::loss::{loss_and_grad, LossConfig};
use crate::par;
use crate::partmap::GridWeightMap;

/// One positive image/tag-set pair, with the image already pooled per part.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingSample {
    pooled: Vec<Vec<f64>>,
    tags: Vec<usize>,
}

impl TrainingSample {
    pub fn new(feat: &GridFeatureTensor, gwm: &GridWeightMap, tags: Vec<usize>) -> Result<Self> {
        if tags.is_empty() {
            return Err(Error::arg("training sample without tags"));
        }
        Ok(Self {
            pooled: pool_features(feat, gwm)?,
            tags,
        })
    }

    pub fn from_pooled(pooled: Vec<Vec<f64>>, tags: Vec<usize>) -> Self {
        Self { pooled, tags }
    }

    pub fn pooled(&self) -> &[Vec<f64>] {
        &self.pooled
    }

    pub fn tags(&self) -> &[usize] {
        &self.tags
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr0: f64,
    pub halve_every: usize,
    pub seed: u64,
    pub frequency_scope: FrequencyScope,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 32,
            lr0: 0.01,
            halve_every: 5,
            seed: 0,
            frequency_scope: FrequencyScope::Dataset,
        }
    }
}

impl TrainConfig {
    /// `lr0 · 0.5^⌊epoch / halve_every⌋`
    pub fn learning_rate(&self, epoch: usize) -> f64 {
        self.lr0 * 0.5f64.powi((epoch / self.halve_every) as i32)
    }

    fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.halve_every == 0 {
            return Err(Error::arg("epochs, batch size and halving period must be positive"));
        }
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return Err(Error::arg("learning rate must be positive"));
        }
        Ok(())
    }
}

/// Gradients with the same layout as the model's matrices.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub image_proj: Vec<Vec<f64>>,
    pub tag_matrix: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct BatchResult {
    pub loss: f64,
    pub grads: Gradients,
}

// Backprop through u = e/‖e‖; zero vectors get zero gradient.
fn normalize_backward(e: &[f64], grad_u: &[f64]) -> Vec<f64> {
    let n = norm(e);
    if n == 0.0 {
        return vec![0.0; e.len()];
    }
    let proj = dot(e, grad_u) / (n * n);
    e.iter()
        .zip(grad_u)
        .map(|(&ei, &gi)| (gi - ei * proj) / n)
        .collect()
}

struct Forward {
    x_raw: Vec<f64>,
    v_raw: Vec<f64>,
    tag_w: Vec<f64>,
}

/// Batch loss and its exact gradients with respect to every entry of
/// `W_I,1..L` and `W_T`.
pub fn loss_gradients(
    batch: &[&TrainingSample],
    params: &ModelParams,
    cfg: &LossConfig,
) -> Result<BatchResult> {
    let parts = params.num_parts();
    let (k, d) = (params.part_dim(), params.feature_dim());
    for s in batch {
        if s.pooled.len() != parts || s.pooled.iter().any(|p| p.len() != d) {
            return Err(Error::arg("sample pooled features do not match the model"));
        }
    }
    let batch_counts;
    let counts: &[u32] = match params.frequency_scope() {
        FrequencyScope::Dataset => params.vocab().frequencies(),
        FrequencyScope::Minibatch => {
            let sets: Vec<&[usize]> = batch.iter().map(|s| s.tags.as_slice()).collect();
            batch_counts = minibatch_counts(&sets, params.num_tags());
            &batch_counts
        }
    };

    let forward: Vec<Result<Forward>> = par::map(batch, |s| {
        let x = embed_pooled(&s.pooled, params).into_values();
        let (v, w) = embed_tag_set_with_counts(&s.tags, params, counts)?;
        Ok(Forward {
            x_raw: x,
            v_raw: v.into_values(),
            tag_w: w,
        })
    });
    let forward: Vec<Forward> = forward.into_iter().collect::<Result<_>>()?;

    let xs: Vec<Vec<f64>> = forward.iter().map(|f| crate::embedding::normalize(&f.x_raw)).collect();
    let vs: Vec<Vec<f64>> = forward.iter().map(|f| crate::embedding::normalize(&f.v_raw)).collect();
    let lg = loss_and_grad(&xs, &vs, cfg)?;
    if !lg.loss.is_finite() {
        return Err(Error::NonFiniteLoss { epoch: 0, batch: 0 });
    }

    // per-sample contributions in parallel, summed in index order
    let idx: Vec<usize> = (0..batch.len()).collect();
    let per_sample: Vec<(Vec<Vec<f64>>, Vec<f64>)> = par::map(&idx, |&n| {
        let gx = normalize_backward(&forward[n].x_raw, &lg.grad_x[n]);
        let gv = normalize_backward(&forward[n].v_raw, &lg.grad_v[n]);
        let img: Vec<Vec<f64>> = (0..parts)
            .map(|l| {
                let mut g = vec![0.0; d * k];
                let gxl = &gx[l * k..(l + 1) * k];
                for (di, &p) in batch[n].pooled[l].iter().enumerate() {
                    if p == 0.0 {
                        continue;
                    }
                    for (gk, &upstream) in g[di * k..(di + 1) * k].iter_mut().zip(gxl) {
                        *gk = p * upstream;
                    }
                }
                g
            })
            .collect();
        (img, gv)
    });

    let width = params.embed_dim();
    let mut grads = Gradients {
        image_proj: vec![vec![0.0; d * k]; parts],
        tag_matrix: vec![0.0; params.num_tags() * width],
    };
    for (n, (img, gv)) in per_sample.iter().enumerate() {
        for (acc, g) in grads.image_proj.iter_mut().zip(img) {
            for (a, &b) in acc.iter_mut().zip(g) {
                *a += b;
            }
        }
        for (&t, &w) in batch[n].tags.iter().zip(&forward[n].tag_w) {
            let row = &mut grads.tag_matrix[t * width..(t + 1) * width];
            for (r, &g) in row.iter_mut().zip(gv) {
                *r += w * g;
            }
        }
    }
    Ok(BatchResult {
        loss: lg.loss,
        grads,
    })
}

/// Scalar batch loss at the given parameters.
pub fn batch_loss(batch: &[&TrainingSample], params: &ModelParams, cfg: &LossConfig) -> Result<f64> {
    loss_gradients(batch, params, cfg).map(|r| r.loss)
}

pub fn sgd_step(params: &mut ModelParams, grads: &Gradients, lr: f64) {
    for (l, g) in grads.image_proj.iter().enumerate() {
        for (w, &gi) in params.image_proj_mut(l).iter_mut().zip(g) {
            *w -= lr * gi;
        }
    }
    for (w, &gi) in params.tag_matrix_mut().iter_mut().zip(&grads.tag_matrix) {
        *w -= lr * gi;
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TraceRow {
    pub epoch: usize,
    pub batch: usize,
    pub lr: f64,
    pub loss: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub trace: Vec<TraceRow>,
}

impl TrainOutcome {
    /// Mean batch loss per epoch.
    pub fn epoch_losses(&self) -> Vec<f64> {
        let epochs = self.trace.iter().map(|r| r.epoch + 1).max().unwrap_or(0);
        (0..epochs)
            .map(|e| {
                let rows: Vec<f64> = self.trace.iter().filter(|r| r.epoch == e).map(|r| r.loss).collect();
                rows.iter().sum::<f64>() / rows.len().max(1) as f64
            })
            .collect()
    }

    /// Writes the trace as `epoch,batch,lr,loss` CSV.
    pub fn write_trace_csv<W: std::io::Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for row in &self.trace {
            w.serialize(row).map_err(csv_err)?;
        }
        w.flush().map_err(|e| Error::io("<trace>", e))
    }
}

pub(crate) fn csv_err(e: csv::Error) -> Error {
    Error::format("<csv>", e.to_string())
}

/// Splits a shuffled order into batches; a trailing batch with fewer than
/// two pairs is dropped because it has no in-batch negatives.
pub fn batch_ranges(len: usize, batch_size: usize) -> Vec<std::ops::Range<usize>> {
    (0..len)
        .step_by(batch_size)
        .map(|start| start..(start + batch_size).min(len))
        .filter(|r| r.len() >= 2)
        .collect()
}

/// Plain SGD with a step-halving schedule and a seeded shuffle per epoch.
pub fn train(
    samples: &[TrainingSample],
    init: ModelParams,
    train_cfg: &TrainConfig,
    loss_cfg: &LossConfig,
) -> Result<TrainOutcome> {
    train_cfg.validate()?;
    loss_cfg.validate()?;
    if samples.len() < 2 {
        return Err(Error::arg("training needs at least two samples"));
    }
    let mut params = init;
    params.frequency_scope = train_cfg.frequency_scope;
    for s in samples {
        if s.pooled.len() != params.num_parts() || s.pooled.iter().any(|p| p.len() != params.feature_dim()) {
            return Err(Error::arg("sample dimensions do not match the model"));
        }
        if let Some(&t) = s.tags.iter().find(|&&t| t >= params.num_tags()) {
            return Err(Error::arg(format!("tag index {t} outside vocabulary")));
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(train_cfg.seed);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut trace = Vec::new();
    for epoch in 0..train_cfg.epochs {
        let lr = train_cfg.learning_rate(epoch);
        order.shuffle(&mut rng);
        for (b, range) in batch_ranges(order.len(), train_cfg.batch_size).into_iter().enumerate() {
            let batch: Vec<&TrainingSample> = order[range].iter().map(|&i| &samples[i]).collect();
            let res = loss_gradients(&batch, &params, loss_cfg).map_err(|e| match e {
                Error::NonFiniteLoss { .. } => Error::NonFiniteLoss { epoch, batch: b },
                other => other,
            })?;
            sgd_step(&mut params, &res.grads, lr);
            trace.push(TraceRow {
                epoch,
                batch: b,
                lr,
                loss: res.loss,
            });
        }
    }
    Ok(TrainOutcome { params, trace })
}
