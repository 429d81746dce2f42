//! Objective terms for data generation and quantized fine-tuning.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{BnBatchStats, BnStore};
use crate::tensor::{Scalar, Tensor, Var};

/// Offset that pushes the target logit out of a softmax lane.
const MASK: f64 = 1e4;

/// Stored `(μ_P, σ_P)` per BN layer.
#[derive(Clone, Debug, PartialEq)]
pub struct BnsTarget {
    pub layers: Vec<(String, Vec<f64>, Vec<f64>)>,
}

impl BnsTarget {
    pub fn from_store(store: &BnStore) -> Self {
        Self {
            layers: store
                .layers()
                .iter()
                .map(|l| (l.layer.clone(), l.mean.clone(), l.std()))
                .collect(),
        }
    }
}

/// `Σ_k ‖μ_S − μ_P‖² + ‖σ_S − σ_P‖²` with `σ_S = √(var_S + eps)`.
pub fn bns_loss<'t, F: Scalar>(
    stats: &[BnBatchStats<'t, F>],
    target: &BnsTarget,
) -> Result<Var<'t, F>> {
    if stats.len() != target.layers.len() || stats.is_empty() {
        return Err(Error::Config(format!(
            "{} captured BN layers against {} stored",
            stats.len(),
            target.layers.len()
        )));
    }
    let mut total: Option<Var<'t, F>> = None;
    for (s, (name, mu, sigma)) in stats.iter().zip(&target.layers) {
        if &s.layer != name || s.mean.numel() != mu.len() {
            return Err(Error::Config(format!(
                "BN layer {} ({} channels) does not match stored {name} ({} channels)",
                s.layer,
                s.mean.numel(),
                mu.len()
            )));
        }
        let tape = s.mean.tape;
        let c = mu.len();
        let mu_p = tape.constant_from(&[c], mu.iter().map(|&v| F::of(v)).collect())?;
        let sigma_p = tape.constant_from(&[c], sigma.iter().map(|&v| F::of(v)).collect())?;
        let sigma_s = s.var.add_scalar(F::of(s.eps)).sqrt();
        let dm = s.mean.sub(mu_p)?;
        let ds = sigma_s.sub(sigma_p)?;
        let term = dm.mul(dm)?.sum().add(ds.mul(ds)?.sum())?;
        total = Some(match total {
            None => term,
            Some(t) => t.add(term)?,
        });
    }
    Ok(total.expect("at least one layer"))
}

/// Means of the feature rows of each class present in the batch.
pub struct Centers<'t, F: Scalar> {
    /// Present classes in ascending order.
    pub classes: Vec<usize>,
    /// `P × D`, row `i` is the center of `classes[i]`.
    pub matrix: Var<'t, F>,
}

impl<'t, F: Scalar> Centers<'t, F> {
    /// The center of each sample's class, row-aligned with `labels`.
    pub fn per_sample(&self, labels: &[usize]) -> Result<Var<'t, F>> {
        let rows = labels
            .iter()
            .map(|y| {
                self.classes
                    .binary_search(y)
                    .map_err(|_| Error::Config(format!("no center for class {y}")))
            })
            .collect::<Result<Vec<_>>>()?;
        self.matrix.gather_rows(&rows)
    }
}

/// `C_c = mean{F_i : y_i = c}` as a differentiable product of a constant
/// averaging matrix with the features.
pub fn class_centers<'t, F: Scalar>(
    features: Var<'t, F>,
    labels: &[usize],
) -> Result<Centers<'t, F>> {
    let s = features.shape();
    if s.len() != 2 || s[0] != labels.len() || s[0] == 0 {
        return Err(Error::Shape(format!(
            "features {s:?} for {} labels",
            labels.len()
        )));
    }
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &y) in labels.iter().enumerate() {
        groups.entry(y).or_default().push(i);
    }
    let b = labels.len();
    let mut avg = vec![F::zero(); groups.len() * b];
    for (r, members) in groups.values().enumerate() {
        let w = F::one() / F::of(members.len() as f64);
        for &i in members {
            avg[r * b + i] = w;
        }
    }
    let a = features.tape.constant_from(&[groups.len(), b], avg)?;
    Ok(Centers {
        classes: groups.keys().copied().collect(),
        matrix: a.matmul(features)?,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum CenterMode {
    /// Centers from the current batch only.
    Batch,
    /// Exponential moving average of batch centers, used as constants.
    Ema { decay: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AmaConfig {
    /// Additive angular margin in radians.
    pub margin: f64,
    pub lambda_lo: f64,
    pub lambda_hi: f64,
    pub center_mode: CenterMode,
}

impl Default for AmaConfig {
    fn default() -> Self {
        Self {
            margin: 0.6,
            lambda_lo: 0.75,
            lambda_hi: 0.95,
            center_mode: CenterMode::Batch,
        }
    }
}

impl AmaConfig {
    pub fn validate(&self) -> Result<()> {
        if !(-1.0..=1.0).contains(&self.lambda_lo) || !(-1.0..=1.0).contains(&self.lambda_hi) {
            return Err(Error::Config("cosine bounds must lie in [-1, 1]".into()));
        }
        if self.lambda_lo >= self.lambda_hi {
            return Err(Error::Config(format!(
                "lower cosine bound {} must be below upper bound {}",
                self.lambda_lo, self.lambda_hi
            )));
        }
        if !(self.margin >= 0.0) {
            return Err(Error::Config(format!("margin {} must be ≥ 0", self.margin)));
        }
        if let CenterMode::Ema { decay } = self.center_mode {
            if !(decay > 0.0 && decay < 1.0) {
                return Err(Error::Config(format!(
                    "center EMA decay {decay} outside (0, 1)"
                )));
            }
        }
        Ok(())
    }
}

/// Row-wise `cos(F_i, C_i)`; squared norms are floored at `1e-24` so zero
/// rows give a finite cosine of 0.
pub fn cosine_rows<'t, F: Scalar>(a: Var<'t, F>, b: Var<'t, F>) -> Result<Var<'t, F>> {
    if a.shape() != b.shape() || a.shape().len() != 2 {
        return Err(Error::Shape(format!(
            "cosine of {:?} and {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let (tiny, inf) = (F::of(1e-24), F::infinity());
    let dot = a.mul(b)?.sum_axis(1)?;
    let na = a.mul(a)?.sum_axis(1)?.clamp(tiny, inf).sqrt();
    let nb = b.mul(b)?.sum_axis(1)?.clamp(tiny, inf).sqrt();
    dot.div(na.mul(nb)?)
}

/// Per-sample `max(λ_l − cos(θ+m), 0) + max(cos(θ+m) − λ_u, 0)` where
/// `θ = arccos cos(F_i, C_i)` and `θ + m` is clamped to `[0, π]`.
pub fn ama_per_sample<'t, F: Scalar>(
    features: Var<'t, F>,
    centers: Var<'t, F>,
    cfg: &AmaConfig,
) -> Result<Var<'t, F>> {
    cfg.validate()?;
    let eps = F::epsilon();
    let cos = cosine_rows(features, centers)?.clamp(-F::one() + eps, F::one() - eps);
    let shifted = cos
        .acos()
        .add_scalar(F::of(cfg.margin))
        .clamp(F::zero(), F::of(std::f64::consts::PI))
        .cos();
    let below = shifted.neg().add_scalar(F::of(cfg.lambda_lo)).relu();
    let above = shifted.add_scalar(F::of(-cfg.lambda_hi)).relu();
    below.add(above)
}

/// Batch mean of [`ama_per_sample`].
pub fn ama_loss<'t, F: Scalar>(
    features: Var<'t, F>,
    centers: Var<'t, F>,
    cfg: &AmaConfig,
) -> Result<Var<'t, F>> {
    Ok(ama_per_sample(features, centers, cfg)?.mean())
}

/// Running class centers for [`CenterMode::Ema`].
#[derive(Clone, Debug, Default, PartialEq)]
pub struct CenterTracker {
    centers: BTreeMap<usize, Vec<f64>>,
}

impl CenterTracker {
    /// `c ← decay·c + (1 − decay)·batch`; classes seen for the first time
    /// take the batch center directly.
    pub fn update<F: Scalar>(&mut self, batch: &Centers<'_, F>, decay: f64) {
        let m = batch.matrix.to_vec();
        let d = m.len() / batch.classes.len().max(1);
        for (i, &c) in batch.classes.iter().enumerate() {
            let row = m[i * d..(i + 1) * d].iter().map(|v| v.to_f64c());
            match self.centers.get_mut(&c) {
                Some(cur) => cur
                    .iter_mut()
                    .zip(row)
                    .for_each(|(a, b)| *a = decay * *a + (1.0 - decay) * b),
                None => {
                    self.centers.insert(c, row.collect());
                }
            }
        }
    }

    /// Constant per-sample centers for `labels`.
    pub fn per_sample<'t, F: Scalar>(
        &self,
        tape: &'t crate::tensor::Tape<F>,
        labels: &[usize],
    ) -> Result<Var<'t, F>> {
        let mut data = Vec::new();
        let mut d = 0;
        for y in labels {
            let c = self
                .centers
                .get(y)
                .ok_or_else(|| Error::Config(format!("no running center for class {y}")))?;
            d = c.len();
            data.extend(c.iter().map(|&v| F::of(v)));
        }
        tape.constant_from(&[labels.len(), d], data)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DkdConfig {
    pub alpha: f64,
    pub beta: f64,
    pub temperature: f64,
}

impl Default for DkdConfig {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 8.0,
            temperature: 1.0,
        }
    }
}

impl DkdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.beta >= 0.0) {
            return Err(Error::Config("distillation weights must be ≥ 0".into()));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::Config(format!(
                "temperature {} must be positive",
                self.temperature
            )));
        }
        Ok(())
    }
}

/// Decoupled distillation terms. All are already scaled by `T²`.
pub struct DkdTerms<'t, F: Scalar> {
    /// Per-sample binary (target vs rest) KL, shape `[B]`.
    pub tckd_per_sample: Var<'t, F>,
    /// Per-sample KL among non-target classes, shape `[B]`.
    pub nckd_per_sample: Var<'t, F>,
    pub tckd: Var<'t, F>,
    pub nckd: Var<'t, F>,
    /// `α·TCKD + β·NCKD`, batch mean.
    pub total: Var<'t, F>,
    /// Teacher target probability per sample.
    pub teacher_target_prob: Vec<f64>,
}

fn check_labels(labels: &[usize], rows: usize, classes: usize) -> Result<()> {
    if labels.len() != rows {
        return Err(Error::Shape(format!(
            "{} labels for {rows} rows",
            labels.len()
        )));
    }
    if let Some(y) = labels.iter().find(|&&y| y >= classes) {
        return Err(Error::Config(format!(
            "label {y} out of range for {classes} classes"
        )));
    }
    Ok(())
}

fn one_hot<'t, F: Scalar>(
    tape: &'t crate::tensor::Tape<F>,
    labels: &[usize],
    k: usize,
) -> Result<Var<'t, F>> {
    let mut m = vec![F::zero(); labels.len() * k];
    for (i, &y) in labels.iter().enumerate() {
        m[i * k + y] = F::one();
    }
    tape.constant_from(&[labels.len(), k], m)
}

/// Decoupled knowledge distillation of `student` toward fixed `teacher`
/// logits. Gradients reach the student only.
pub fn dkd_loss<'t, F: Scalar>(
    student: Var<'t, F>,
    teacher: &Tensor<F>,
    labels: &[usize],
    cfg: &DkdConfig,
) -> Result<DkdTerms<'t, F>> {
    cfg.validate()?;
    let s = student.shape();
    if s.len() != 2 || teacher.shape() != s.as_slice() {
        return Err(Error::Shape(format!(
            "student {s:?} and teacher {:?} logits must be equal B×K",
            teacher.shape()
        )));
    }
    let (b, k) = (s[0], s[1]);
    if k < 2 {
        return Err(Error::Config(
            "distillation needs at least 2 classes".into(),
        ));
    }
    check_labels(labels, b, k)?;
    let t = cfg.temperature;
    let tape = student.tape;
    let mask = one_hot(tape, labels, k)?;

    // Both sides go through the same ops so that equal logits give equal
    // log-probabilities bit for bit; the teacher's are constants.
    let parts = |logits: Var<'t, F>| -> Result<[Var<'t, F>; 3]> {
        let z = logits.scale(F::of(1.0 / t));
        let lse = z.logsumexp(1)?;
        let log_target = z.mul(mask)?.sum_axis(1)?.sub(lse)?;
        let masked = z.sub(mask.scale(F::of(MASK)))?;
        let log_rest = masked.logsumexp(1)?.sub(lse)?;
        Ok([log_target, log_rest, masked.log_softmax(1)?])
    };
    let [t_target, t_rest, t_hat] = parts(tape.constant(teacher))?;
    let [s_target, s_rest, s_hat] = parts(student)?;
    let prob = |v: Var<'t, F>| tape.constant_from(&v.shape(), v.exp().to_vec());
    let t2 = F::of(t * t);
    let tckd_ps = prob(t_target)?
        .mul(t_target.sub(s_target)?)?
        .add(prob(t_rest)?.mul(t_rest.sub(s_rest)?)?)?
        .scale(t2);
    let nckd_ps = prob(t_hat)?.mul(t_hat.sub(s_hat)?)?.sum_axis(1)?.scale(t2);
    let p_t: Vec<f64> = t_target
        .exp()
        .to_vec()
        .iter()
        .map(|v| v.to_f64c())
        .collect();
    let tckd = tckd_ps.mean();
    let nckd = nckd_ps.mean();
    let total = tckd
        .scale(F::of(cfg.alpha))
        .add(nckd.scale(F::of(cfg.beta)))?;
    Ok(DkdTerms {
        tckd_per_sample: tckd_ps,
        nckd_per_sample: nckd_ps,
        tckd,
        nckd,
        total,
        teacher_target_prob: p_t,
    })
}

/// Mean of `−log softmax(logits)[y]`.
pub fn cross_entropy<'t, F: Scalar>(logits: Var<'t, F>, labels: &[usize]) -> Result<Var<'t, F>> {
    let s = logits.shape();
    if s.len() != 2 {
        return Err(Error::Shape(format!(
            "cross-entropy needs B×K logits, got {s:?}"
        )));
    }
    check_labels(labels, s[0], s[1])?;
    let mask = one_hot(logits.tape, labels, s[1])?;
    Ok(logits.log_softmax(1)?.mul(mask)?.sum_axis(1)?.mean().neg())
}

/// Generation objective `L_BNS + L_AMA` with its parts for logging.
pub struct GenerationTerms<'t, F: Scalar> {
    pub bns: Var<'t, F>,
    pub ama: Option<Var<'t, F>>,
    pub total: Var<'t, F>,
}

/// `L_BNS + L_AMA`; with `ama` unset the total is `L_BNS` itself.
pub fn generation_loss<'t, F: Scalar>(
    stats: &[BnBatchStats<'t, F>],
    target: &BnsTarget,
    ama: Option<(Var<'t, F>, Var<'t, F>, &AmaConfig)>,
) -> Result<GenerationTerms<'t, F>> {
    let bns = bns_loss(stats, target)?;
    let ama = match ama {
        Some((features, centers, cfg)) => Some(ama_loss(features, centers, cfg)?),
        None => None,
    };
    let total = match ama {
        Some(a) => bns.add(a)?,
        None => bns,
    };
    Ok(GenerationTerms { bns, ama, total })
}

/// Fine-tuning objective `L_CE + λ·L_DKD` with its parts for logging.
pub struct FinetuneTerms<'t, F: Scalar> {
    pub ce: Var<'t, F>,
    pub dkd: Option<DkdTerms<'t, F>>,
    pub total: Var<'t, F>,
}

/// `L_CE + λ·L_DKD`; with `λ = 0` or no teacher logits the total is `L_CE`.
pub fn finetune_loss<'t, F: Scalar>(
    q_logits: Var<'t, F>,
    fp_logits: Option<&Tensor<F>>,
    labels: &[usize],
    lambda: f64,
    dkd_cfg: &DkdConfig,
) -> Result<FinetuneTerms<'t, F>> {
    if !(lambda >= 0.0) {
        return Err(Error::Config(format!("λ = {lambda} must be ≥ 0")));
    }
    let ce = cross_entropy(q_logits, labels)?;
    let dkd = match fp_logits {
        Some(t) if lambda > 0.0 => Some(dkd_loss(q_logits, t, labels, dkd_cfg)?),
        _ => None,
    };
    let total = match &dkd {
        Some(d) => ce.add(d.total.scale(F::of(lambda)))?,
        None => ce,
    };
    Ok(FinetuneTerms { ce, dkd, total })
}
