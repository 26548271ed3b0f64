//! Logits, losses and their analytic gradients.
//!
//! Adapter logits follow the CLIP convention: with `normalize` on,
//! `z_c = s · ⟨A/‖A‖, b_c/‖b_c‖⟩`; with it off, `z_c = ⟨A, b_c⟩` and the scale
//! is ignored. Batch losses are means over samples, reduced sequentially in
//! sample order.

use serde::{Deserialize, Serialize};

use crate::adapters::{self, AdapterParams, FlatParamView};
use crate::baselines::ProbeHead;
use crate::error::{Error, Result};
use crate::linalg::{self, DenseMatrix, DenseVector, NORM_EPS};

pub const DEFAULT_LOGIT_SCALE: f64 = 100.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LogitConfig {
    pub normalize: bool,
    pub logit_scale: f64,
}

impl Default for LogitConfig {
    fn default() -> Self {
        Self {
            normalize: true,
            logit_scale: DEFAULT_LOGIT_SCALE,
        }
    }
}

impl LogitConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.logit_scale > 0.0 && self.logit_scale.is_finite()) {
            return Err(Error::config(format!(
                "logit_scale must be positive and finite, got {}",
                self.logit_scale
            )));
        }
        Ok(())
    }
}

/// Embedded samples with class labels (indices into the text rows).
#[derive(Debug, Clone)]
pub struct Batch<'a> {
    inputs: Vec<&'a DenseVector>,
    labels: Vec<usize>,
}

impl<'a> Batch<'a> {
    pub fn new(inputs: Vec<&'a DenseVector>, labels: Vec<usize>) -> Result<Self> {
        if inputs.len() != labels.len() {
            return Err(Error::contract(format!(
                "batch has {} inputs but {} labels",
                inputs.len(),
                labels.len()
            )));
        }
        Ok(Self { inputs, labels })
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn inputs(&self) -> &[&'a DenseVector] {
        &self.inputs
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    fn check(&self, num_classes: usize) -> Result<()> {
        if self.is_empty() {
            return Err(Error::contract("empty batch"));
        }
        if let Some(&l) = self.labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::contract(format!(
                "label {l} out of range for {num_classes} classes"
            )));
        }
        Ok(())
    }
}

/// Text rows prepared once for repeated logit evaluation.
#[derive(Debug, Clone)]
pub struct TextHead {
    rows: DenseMatrix,
    cfg: LogitConfig,
}

/// What [`TextHead::backward`] needs from the forward pass.
#[derive(Debug, Clone)]
pub(crate) struct LogitCache {
    unit: Option<(DenseVector, f64)>,
}

impl TextHead {
    pub fn new(text: &DenseMatrix, cfg: LogitConfig) -> Result<Self> {
        cfg.validate()?;
        let rows = if cfg.normalize {
            let mut data = Vec::with_capacity(text.rows() * text.cols());
            for c in 0..text.rows() {
                let n = linalg::norm(text.row(c));
                if !(n > NORM_EPS) {
                    return Err(Error::Degenerate(format!(
                        "text row {c} has norm {n:e}"
                    )));
                }
                data.extend(text.row(c).iter().map(|x| x / n));
            }
            DenseMatrix::from_vec(text.rows(), text.cols(), data)?
        } else {
            text.clone()
        };
        Ok(Self { rows, cfg })
    }

    pub fn num_classes(&self) -> usize {
        self.rows.rows()
    }

    pub fn dim(&self) -> usize {
        self.rows.cols()
    }

    pub fn config(&self) -> LogitConfig {
        self.cfg
    }

    pub fn logits(&self, a: &DenseVector) -> Result<DenseVector> {
        self.logits_cached(a).map(|(z, _)| z)
    }

    pub(crate) fn logits_cached(&self, a: &DenseVector) -> Result<(DenseVector, LogitCache)> {
        if a.dim() != self.dim() {
            return Err(Error::contract(format!(
                "feature dim {} != text dim {}",
                a.dim(),
                self.dim()
            )));
        }
        if self.cfg.normalize {
            let n = a.norm();
            if !(n > NORM_EPS) {
                return Err(Error::Degenerate(format!(
                    "adapted feature has norm {n:e}"
                )));
            }
            let unit = a.scaled(1.0 / n);
            let mut z = linalg::matvec(&self.rows, &unit)?;
            for x in z.as_mut_slice() {
                *x *= self.cfg.logit_scale;
            }
            Ok((
                z,
                LogitCache {
                    unit: Some((unit, n)),
                },
            ))
        } else {
            Ok((linalg::matvec(&self.rows, a)?, LogitCache { unit: None }))
        }
    }

    /// `∂L/∂A` from `∂L/∂z`.
    pub(crate) fn backward(&self, cache: &LogitCache, d_logits: &[f64]) -> Result<Vec<f64>> {
        let g = linalg::matvec_transposed(&self.rows, &DenseVector::new(d_logits.to_vec()))?;
        match &cache.unit {
            None => Ok(g.into_vec()),
            Some((unit, n)) => {
                // dÂ = s·Bᵀdz; dA = (I − ÂÂᵀ) dÂ / ‖A‖
                let s = self.cfg.logit_scale;
                let g: Vec<f64> = g.as_slice().iter().map(|x| s * x).collect();
                let proj = linalg::dot(unit.as_slice(), &g);
                Ok(g
                    .iter()
                    .zip(unit.as_slice())
                    .map(|(gi, ui)| (gi - ui * proj) / n)
                    .collect())
            }
        }
    }
}

/// Logits of feature `a` against `text` rows.
pub fn logits(a: &DenseVector, text: &DenseMatrix, cfg: LogitConfig) -> Result<DenseVector> {
    TextHead::new(text, cfg)?.logits(a)
}

/// Cross-entropy of one logit vector against `label`, with `∂/∂z`.
fn ce_single(z: &[f64], label: usize) -> Result<(f64, Vec<f64>)> {
    let log_p = linalg::log_softmax_slice(z)?;
    let loss = -log_p[label];
    let mut grad: Vec<f64> = log_p.iter().map(|l| l.exp()).collect();
    grad[label] -= 1.0;
    Ok((loss, grad))
}

/// Knowledge-distillation term for the adapter objective.
#[derive(Debug, Clone, Copy)]
pub struct Distill<'a> {
    /// Frozen parameters from the end of the previous task.
    pub prev: &'a AdapterParams,
    /// Logits `0..num_old` are the previously seen classes.
    pub num_old: usize,
    pub temperature: f64,
    pub weight: f64,
}

/// `λ τ² KL(softmax(prev/τ) ‖ softmax(cur/τ))`.
pub fn kd_loss(cur: &[f64], prev: &[f64], temperature: f64, weight: f64) -> Result<f64> {
    kd_loss_grad(cur, prev, temperature, weight).map(|(l, _)| l)
}

/// [`kd_loss`] and its gradient with respect to `cur`.
pub fn kd_loss_grad(
    cur: &[f64],
    prev: &[f64],
    temperature: f64,
    weight: f64,
) -> Result<(f64, Vec<f64>)> {
    if cur.len() != prev.len() {
        return Err(Error::contract(format!(
            "kd: current logits have {} entries, previous have {}",
            cur.len(),
            prev.len()
        )));
    }
    if !(temperature > 0.0) || !(weight >= 0.0) {
        return Err(Error::contract(format!(
            "kd: need temperature > 0 and weight >= 0, got {temperature} and {weight}"
        )));
    }
    if cur.is_empty() || weight == 0.0 {
        return Ok((0.0, vec![0.0; cur.len()]));
    }
    let scale = |v: &[f64]| v.iter().map(|x| x / temperature).collect::<Vec<_>>();
    let log_q = linalg::log_softmax_slice(&scale(cur))?;
    let log_p = linalg::log_softmax_slice(&scale(prev))?;
    let mut kl = 0.0;
    for (lp, lq) in log_p.iter().zip(&log_q) {
        kl += lp.exp() * (lp - lq);
    }
    // clamp rounding noise; KL is non-negative
    let loss = weight * temperature * temperature * kl.max(0.0);
    let grad = log_q
        .iter()
        .zip(&log_p)
        .map(|(lq, lp)| weight * temperature * (lq.exp() - lp.exp()))
        .collect();
    Ok((loss, grad))
}

/// Mean adapter loss over `batch` and its flat gradient.
///
/// With `distill`, samples whose label is a new class (`>= num_old`) also pay
/// the distillation term on the old-class logits.
pub fn adapter_loss_grad(
    params: &AdapterParams,
    batch: &Batch<'_>,
    head: &TextHead,
    distill: Option<&Distill<'_>>,
) -> Result<(f64, FlatParamView)> {
    batch.check(head.num_classes())?;
    if let Some(d) = distill {
        if d.num_old > head.num_classes() {
            return Err(Error::contract("kd: more old classes than text rows"));
        }
        if d.prev.kind() != params.kind() || d.prev.dim() != params.dim() {
            return Err(Error::contract("kd: previous adapter has a different shape"));
        }
    }
    let n = batch.len() as f64;
    let mut grads = vec![0.0; params.param_count()];
    let mut total = 0.0;
    for (x, &label) in batch.inputs.iter().zip(&batch.labels) {
        let (a, trace) = adapters::forward_traced(params, x)?;
        let (z, cache) = head.logits_cached(&a)?;
        let (mut loss, mut dz) = ce_single(z.as_slice(), label)?;
        if let Some(d) = distill.filter(|d| label >= d.num_old && d.num_old > 0) {
            let prev_z = head.logits(&adapters::forward(d.prev, x)?)?;
            let (kd, dkd) = kd_loss_grad(
                &z.as_slice()[..d.num_old],
                &prev_z.as_slice()[..d.num_old],
                d.temperature,
                d.weight,
            )?;
            loss += kd;
            for (g, dk) in dz.iter_mut().zip(dkd) {
                *g += dk;
            }
        }
        total += loss;
        for g in &mut dz {
            *g /= n;
        }
        let da = head.backward(&cache, &dz)?;
        adapters::backward(params, &trace, &da, &mut grads)?;
    }
    Ok((total / n, FlatParamView(grads)))
}

/// Mean cross-entropy of the adapter over `batch`.
pub fn ce_loss(
    params: &AdapterParams,
    batch: &Batch<'_>,
    text: &DenseMatrix,
    cfg: LogitConfig,
) -> Result<f64> {
    let head = TextHead::new(text, cfg)?;
    batch.check(head.num_classes())?;
    let mut total = 0.0;
    for (x, &label) in batch.inputs.iter().zip(&batch.labels) {
        let z = head.logits(&adapters::forward(params, x)?)?;
        total -= linalg::log_softmax_slice(z.as_slice())?[label];
    }
    Ok(total / batch.len() as f64)
}

/// Gradient of [`ce_loss`] in canonical flat order.
pub fn ce_grad(
    params: &AdapterParams,
    batch: &Batch<'_>,
    text: &DenseMatrix,
    cfg: LogitConfig,
) -> Result<FlatParamView> {
    let head = TextHead::new(text, cfg)?;
    adapter_loss_grad(params, batch, &head, None).map(|(_, g)| g)
}

/// Mean softmax cross-entropy of the affine probe `W x + b`.
pub fn probe_loss(head: &ProbeHead, batch: &Batch<'_>) -> Result<f64> {
    probe_loss_grad(head, batch).map(|(l, _)| l)
}

/// Gradient of [`probe_loss`], laid out as [`ProbeHead::flatten`].
pub fn probe_grad(head: &ProbeHead, batch: &Batch<'_>) -> Result<FlatParamView> {
    probe_loss_grad(head, batch).map(|(_, g)| g)
}

pub fn probe_loss_grad(head: &ProbeHead, batch: &Batch<'_>) -> Result<(f64, FlatParamView)> {
    let k = head.num_classes();
    let m = head.dim();
    batch.check(k)?;
    let n = batch.len() as f64;
    let mut gw = DenseMatrix::zeros(k, m);
    let mut gb = vec![0.0; k];
    let mut total = 0.0;
    for (x, &label) in batch.inputs.iter().zip(&batch.labels) {
        let z = head.logits(x)?;
        let (loss, mut dz) = ce_single(z.as_slice(), label)?;
        total += loss;
        for g in &mut dz {
            *g /= n;
        }
        gw.add_outer(1.0, &dz, x.as_slice())?;
        for (b, d) in gb.iter_mut().zip(&dz) {
            *b += d;
        }
    }
    let mut flat = gw.into_vec();
    flat.extend(gb);
    Ok((total / n, FlatParamView(flat)))
}
