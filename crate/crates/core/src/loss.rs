//! Batch metric-learning losses over paired image/tag embeddings.
//!
//! Every loss takes `N` image embeddings `x_n` and `N` tag-set embeddings
//! `v_n`, assumed already unit-normalized, where `(x_n, v_n)` is the
//! positive pair and the other samples of the batch supply negatives. Each
//! loss is symmetric: the image→tag direction uses `x_n` as anchor and
//! `v_m` as negatives, the tag→image direction swaps roles, and both are
//! averaged with weight `1/(2N)`.
//!
//! [`loss_and_grad`] returns the loss together with its exact gradient with
//! respect to every input vector.

use serde::{Deserialize, Serialize};

use crate::embedding::dot;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossVariant {
    Triplet,
    Npair,
    SingleAngular,
    BatchAngular,
    NpairAngular,
}

impl LossVariant {
    pub const ALL: [LossVariant; 5] = [
        LossVariant::Triplet,
        LossVariant::Npair,
        LossVariant::SingleAngular,
        LossVariant::BatchAngular,
        LossVariant::NpairAngular,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LossVariant::Triplet => "triplet",
            LossVariant::Npair => "npair",
            LossVariant::SingleAngular => "single_angular",
            LossVariant::BatchAngular => "batch_angular",
            LossVariant::NpairAngular => "npair_angular",
        }
    }
}

impl std::str::FromStr for LossVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.to_ascii_lowercase().replace(['-', ' '], "_");
        LossVariant::ALL
            .into_iter()
            .find(|v| v.name() == norm || (norm == "n_pair" && *v == LossVariant::Npair))
            .ok_or_else(|| Error::arg(format!("unknown loss variant '{s}'")))
    }
}

impl std::fmt::Display for LossVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub variant: LossVariant,
    /// Weight of the batch angular term in the combined loss.
    pub lambda: f64,
    /// Angular margin in degrees, in (0, 90).
    pub alpha_deg: f64,
    pub triplet_margin: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            variant: LossVariant::NpairAngular,
            lambda: 2.0,
            alpha_deg: 36.0,
            triplet_margin: 0.2,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha_deg > 0.0 && self.alpha_deg < 90.0) {
            return Err(Error::arg(format!(
                "angular margin {}° outside (0, 90)",
                self.alpha_deg
            )));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::arg("lambda must be a finite value >= 0"));
        }
        if !(self.triplet_margin > 0.0 && self.triplet_margin.is_finite()) {
            return Err(Error::arg("triplet margin must be positive"));
        }
        Ok(())
    }

    pub fn alpha_rad(&self) -> f64 {
        self.alpha_deg.to_radians()
    }
}

/// Angular-loss score `4(a+p)ᵀn·tan²α − 2aᵀp(1+tan²α)` for unit vectors.
pub fn f_ang(anchor: &[f64], positive: &[f64], negative: &[f64], alpha: f64) -> f64 {
    debug_assert!(is_unit_or_zero(anchor) && is_unit_or_zero(positive) && is_unit_or_zero(negative));
    let t2 = alpha.tan().powi(2);
    4.0 * (dot(anchor, negative) + dot(positive, negative)) * t2
        - 2.0 * dot(anchor, positive) * (1.0 + t2)
}

fn is_unit_or_zero(v: &[f64]) -> bool {
    let n = dot(v, v);
    n == 0.0 || (n.sqrt() - 1.0).abs() < 1e-6
}

/// `ln(1 + Σ exp z)` computed with the implicit zero logit included in the
/// max-shift. Also returns `∂/∂z_m`, the softmax weights over `{0} ∪ z`
/// restricted to `z`.
pub(crate) fn log1p_sum_exp(z: &[f64]) -> (f64, Vec<f64>) {
    if z.is_empty() {
        return (0.0, Vec::new());
    }
    let m = z.iter().copied().fold(0.0f64, f64::max);
    let exps: Vec<f64> = z.iter().map(|&v| (v - m).exp()).collect();
    let denom = (-m).exp() + exps.iter().sum::<f64>();
    let value = m + denom.ln();
    (value, exps.into_iter().map(|e| e / denom).collect())
}

fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn axpy(out: &mut [f64], a: f64, x: &[f64]) {
    for (o, &v) in out.iter_mut().zip(x) {
        *o += a * v;
    }
}

/// Loss value plus gradients with respect to the (normalized) inputs.
#[derive(Clone, Debug)]
pub struct LossGrad {
    pub loss: f64,
    pub grad_x: Vec<Vec<f64>>,
    pub grad_v: Vec<Vec<f64>>,
}

// One direction of a loss: summed (unscaled) value and gradients for the
// anchor list and the positive/negative list.
struct Directional {
    sum: f64,
    grad_anchor: Vec<Vec<f64>>,
    grad_other: Vec<Vec<f64>>,
}

impl Directional {
    fn zeros(n: usize, dim: usize) -> Self {
        Self {
            sum: 0.0,
            grad_anchor: vec![vec![0.0; dim]; n],
            grad_other: vec![vec![0.0; dim]; n],
        }
    }
}

// Σ_n log(1 + Σ_{m≠n} exp(a_nᵀp_m − a_nᵀp_n))
fn npair_dir(anchors: &[Vec<f64>], others: &[Vec<f64>], with_grad: bool) -> Directional {
    let n = anchors.len();
    let dim = anchors.first().map_or(0, Vec::len);
    let mut out = Directional::zeros(if with_grad { n } else { 0 }, dim);
    for i in 0..n {
        let pos = dot(&anchors[i], &others[i]);
        let neg: Vec<usize> = (0..n).filter(|&m| m != i).collect();
        let z: Vec<f64> = neg.iter().map(|&m| dot(&anchors[i], &others[m]) - pos).collect();
        let (val, prob) = log1p_sum_exp(&z);
        out.sum += val;
        if !with_grad {
            continue;
        }
        let total: f64 = prob.iter().sum();
        for (&m, &p) in neg.iter().zip(&prob) {
            axpy(&mut out.grad_anchor[i], p, &others[m]);
            axpy(&mut out.grad_other[m], p, &anchors[i]);
        }
        axpy(&mut out.grad_anchor[i], -total, &others[i]);
        axpy(&mut out.grad_other[i], -total, &anchors[i]);
    }
    out
}

// Σ_n log(1 + Σ_{m≠n} exp f_ang(a_n, p_n, p_m))
fn angular_dir(anchors: &[Vec<f64>], others: &[Vec<f64>], alpha: f64, with_grad: bool) -> Directional {
    let n = anchors.len();
    let dim = anchors.first().map_or(0, Vec::len);
    let t2 = alpha.tan().powi(2);
    let mut out = Directional::zeros(if with_grad { n } else { 0 }, dim);
    for i in 0..n {
        let neg: Vec<usize> = (0..n).filter(|&m| m != i).collect();
        let z: Vec<f64> = neg
            .iter()
            .map(|&m| f_ang(&anchors[i], &others[i], &others[m], alpha))
            .collect();
        let (val, prob) = log1p_sum_exp(&z);
        out.sum += val;
        if !with_grad {
            continue;
        }
        let total: f64 = prob.iter().sum();
        for (&m, &p) in neg.iter().zip(&prob) {
            let w = 4.0 * t2 * p;
            axpy(&mut out.grad_anchor[i], w, &others[m]);
            axpy(&mut out.grad_other[i], w, &others[m]);
            axpy(&mut out.grad_other[m], w, &anchors[i]);
            axpy(&mut out.grad_other[m], w, &others[i]);
        }
        let c = -2.0 * (1.0 + t2) * total;
        axpy(&mut out.grad_anchor[i], c, &others[i]);
        axpy(&mut out.grad_other[i], c, &anchors[i]);
    }
    out
}

fn cyclic_negative(i: usize, n: usize) -> usize {
    (i + 1) % n
}

// Σ_n max(0, ‖a_n − p_n‖² − ‖a_n − p_m‖² + margin), m = n+1 mod N
fn triplet_dir(anchors: &[Vec<f64>], others: &[Vec<f64>], margin: f64, with_grad: bool) -> Directional {
    let n = anchors.len();
    let dim = anchors.first().map_or(0, Vec::len);
    let mut out = Directional::zeros(if with_grad { n } else { 0 }, dim);
    if n < 2 {
        return out;
    }
    for i in 0..n {
        let m = cyclic_negative(i, n);
        let (a, p, q) = (&anchors[i], &others[i], &others[m]);
        let h = triplet_loss(a, p, q, margin);
        out.sum += h;
        if !with_grad || h <= 0.0 {
            continue;
        }
        for d in 0..dim {
            out.grad_anchor[i][d] += 2.0 * (q[d] - p[d]);
            out.grad_other[i][d] += -2.0 * (a[d] - p[d]);
            out.grad_other[m][d] += 2.0 * (a[d] - q[d]);
        }
    }
    out
}

// Σ_n log(1 + exp f_ang(a_n, p_n, p_m)), m = n+1 mod N
fn single_angular_dir(anchors: &[Vec<f64>], others: &[Vec<f64>], alpha: f64, with_grad: bool) -> Directional {
    let n = anchors.len();
    let dim = anchors.first().map_or(0, Vec::len);
    let t2 = alpha.tan().powi(2);
    let mut out = Directional::zeros(if with_grad { n } else { 0 }, dim);
    if n < 2 {
        return out;
    }
    for i in 0..n {
        let m = cyclic_negative(i, n);
        let z = f_ang(&anchors[i], &others[i], &others[m], alpha);
        out.sum += softplus(z);
        if !with_grad {
            continue;
        }
        let s = sigmoid(z);
        let (a, p, q) = (&anchors[i], &others[i], &others[m]);
        axpy(&mut out.grad_anchor[i], 4.0 * t2 * s, q);
        axpy(&mut out.grad_anchor[i], -2.0 * (1.0 + t2) * s, p);
        axpy(&mut out.grad_other[i], 4.0 * t2 * s, q);
        axpy(&mut out.grad_other[i], -2.0 * (1.0 + t2) * s, a);
        axpy(&mut out.grad_other[m], 4.0 * t2 * s, a);
        axpy(&mut out.grad_other[m], 4.0 * t2 * s, p);
    }
    out
}

fn check_batch(xs: &[Vec<f64>], vs: &[Vec<f64>]) -> Result<()> {
    if xs.len() != vs.len() {
        return Err(Error::Dimension {
            what: "tag embedding count",
            expected: xs.len(),
            actual: vs.len(),
        });
    }
    if let Some(first) = xs.first() {
        let dim = first.len();
        if let Some(bad) = xs.iter().chain(vs).find(|v| v.len() != dim) {
            return Err(Error::Dimension {
                what: "embedding width",
                expected: dim,
                actual: bad.len(),
            });
        }
    }
    Ok(())
}

// Runs one directional loss both ways and merges into x/v gradients.
fn symmetric<F>(xs: &[Vec<f64>], vs: &[Vec<f64>], scale: f64, dir: F, out: &mut LossGrad, with_grad: bool)
where
    F: Fn(&[Vec<f64>], &[Vec<f64>]) -> Directional,
{
    let fwd = dir(xs, vs);
    let back = dir(vs, xs);
    out.loss += scale * (fwd.sum + back.sum);
    if !with_grad {
        return;
    }
    for n in 0..xs.len() {
        axpy(&mut out.grad_x[n], scale, &fwd.grad_anchor[n]);
        axpy(&mut out.grad_x[n], scale, &back.grad_other[n]);
        axpy(&mut out.grad_v[n], scale, &fwd.grad_other[n]);
        axpy(&mut out.grad_v[n], scale, &back.grad_anchor[n]);
    }
}

fn evaluate(xs: &[Vec<f64>], vs: &[Vec<f64>], cfg: &LossConfig, with_grad: bool) -> Result<LossGrad> {
    check_batch(xs, vs)?;
    cfg.validate()?;
    let n = xs.len();
    let dim = xs.first().map_or(0, Vec::len);
    let mut out = LossGrad {
        loss: 0.0,
        grad_x: vec![vec![0.0; dim]; if with_grad { n } else { 0 }],
        grad_v: vec![vec![0.0; dim]; if with_grad { n } else { 0 }],
    };
    if n == 0 {
        return Ok(out);
    }
    let scale = 1.0 / (2.0 * n as f64);
    let alpha = cfg.alpha_rad();
    let with_npair = matches!(cfg.variant, LossVariant::Npair | LossVariant::NpairAngular);
    if with_npair {
        symmetric(xs, vs, scale, |a, o| npair_dir(a, o, with_grad), &mut out, with_grad);
    }
    match cfg.variant {
        LossVariant::BatchAngular => {
            symmetric(xs, vs, scale, |a, o| angular_dir(a, o, alpha, with_grad), &mut out, with_grad)
        }
        LossVariant::NpairAngular if cfg.lambda != 0.0 => symmetric(
            xs,
            vs,
            scale * cfg.lambda,
            |a, o| angular_dir(a, o, alpha, with_grad),
            &mut out,
            with_grad,
        ),
        LossVariant::Triplet => symmetric(
            xs,
            vs,
            scale,
            |a, o| triplet_dir(a, o, cfg.triplet_margin, with_grad),
            &mut out,
            with_grad,
        ),
        LossVariant::SingleAngular => symmetric(
            xs,
            vs,
            scale,
            |a, o| single_angular_dir(a, o, alpha, with_grad),
            &mut out,
            with_grad,
        ),
        _ => {}
    }
    Ok(out)
}

/// Configured batch loss over unit-normalized pairs.
pub fn batch_loss(xs: &[Vec<f64>], vs: &[Vec<f64>], cfg: &LossConfig) -> Result<f64> {
    evaluate(xs, vs, cfg, false).map(|g| g.loss)
}

/// Configured batch loss and its gradient with respect to each input vector.
pub fn loss_and_grad(xs: &[Vec<f64>], vs: &[Vec<f64>], cfg: &LossConfig) -> Result<LossGrad> {
    evaluate(xs, vs, cfg, true)
}

fn with_variant(variant: LossVariant) -> LossConfig {
    LossConfig {
        variant,
        ..LossConfig::default()
    }
}

pub fn npair_loss(xs: &[Vec<f64>], vs: &[Vec<f64>]) -> Result<f64> {
    batch_loss(xs, vs, &with_variant(LossVariant::Npair))
}

/// The two symmetric angular terms, without `λ`.
pub fn batch_angular_loss(xs: &[Vec<f64>], vs: &[Vec<f64>], alpha_deg: f64) -> Result<f64> {
    batch_loss(
        xs,
        vs,
        &LossConfig {
            alpha_deg,
            ..with_variant(LossVariant::BatchAngular)
        },
    )
}

pub fn npair_angular_loss(xs: &[Vec<f64>], vs: &[Vec<f64>], lambda: f64, alpha_deg: f64) -> Result<f64> {
    batch_loss(
        xs,
        vs,
        &LossConfig {
            lambda,
            alpha_deg,
            ..with_variant(LossVariant::NpairAngular)
        },
    )
}

/// Batch triplet loss with the cyclic negative `m = n+1 mod N`.
pub fn triplet_batch_loss(xs: &[Vec<f64>], vs: &[Vec<f64>], margin: f64) -> Result<f64> {
    batch_loss(
        xs,
        vs,
        &LossConfig {
            triplet_margin: margin,
            ..with_variant(LossVariant::Triplet)
        },
    )
}

pub fn single_angular_batch_loss(xs: &[Vec<f64>], vs: &[Vec<f64>], alpha_deg: f64) -> Result<f64> {
    batch_loss(
        xs,
        vs,
        &LossConfig {
            alpha_deg,
            ..with_variant(LossVariant::SingleAngular)
        },
    )
}

/// `max(0, ‖a−p‖² − ‖a−n‖² + margin)`.
pub fn triplet_loss(anchor: &[f64], positive: &[f64], negative: &[f64], margin: f64) -> f64 {
    let dp: f64 = anchor.iter().zip(positive).map(|(a, p)| (a - p).powi(2)).sum();
    let dn: f64 = anchor.iter().zip(negative).map(|(a, n)| (a - n).powi(2)).sum();
    (dp - dn + margin).max(0.0)
}

/// `ln(1 + exp f_ang(a, p, n))`, with `alpha` in radians.
pub fn single_angular_loss(anchor: &[f64], positive: &[f64], negative: &[f64], alpha: f64) -> f64 {
    softplus(f_ang(anchor, positive, negative, alpha))
}
