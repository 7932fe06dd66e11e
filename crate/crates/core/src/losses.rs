//! Distillation objectives.
//!
//! The generator maximizes `alpha1 * KL + alpha2 * CRD` on augmented inputs;
//! the student minimizes
//! `lambda1 * CE + lambda2 * KL (originals) + lambda2_aug * KL (augmented)
//! + lambda3 * CRD (augmented)`. Every term is a batch mean.

use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::data::Batch;
use crate::error::{Error, Result};
use crate::nn::{truncated_normal, Bound, LayerStack, ParamSet, INIT_STD};
use crate::numerics::{Graph, Tensor, Var};
use crate::rng::{stream, Stream};

/// Tolerance on the norm of inputs to [`crd_loss`].
pub const UNIT_NORM_TOL: f64 = 1e-6;

pub const DEFAULT_PROJECTION_DIM: usize = 128;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub alpha1: f64,
    pub alpha2: f64,
    pub tau1: f64,
    pub tau2: f64,
    /// CE on original samples.
    pub lambda1: f64,
    /// KL on original samples.
    pub lambda2: f64,
    /// KL on augmented samples.
    pub lambda2_aug: f64,
    /// Contrastive loss on augmented samples.
    pub lambda3: f64,
    pub gumbel_tau: f64,
    /// Multiply every KL term by `tau1^2`.
    pub kd_temperature_squared: bool,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha1: 1.0,
            alpha2: 1.0,
            tau1: 1.0,
            tau2: 2.0,
            lambda1: 1.0 / 3.0,
            lambda2: 1.0 / 3.0,
            lambda2_aug: 2.0 / 9.0,
            lambda3: 1.0 / 9.0,
            gumbel_tau: 1.0,
            kd_temperature_squared: false,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (field, v) in [("tau1", self.tau1), ("tau2", self.tau2), ("gumbel_tau", self.gumbel_tau)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::config(field, "temperature must be positive and finite"));
            }
        }
        for (field, v) in [
            ("alpha1", self.alpha1),
            ("alpha2", self.alpha2),
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
            ("lambda2_aug", self.lambda2_aug),
            ("lambda3", self.lambda3),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(field, "mixing weight must be nonnegative"));
            }
        }
        Ok(())
    }

    /// Whether the student objective consumes augmented samples at all.
    pub fn uses_augmentation(&self) -> bool {
        self.lambda2_aug > 0.0 || self.lambda3 > 0.0
    }
}

/// Mean over rows of `KL(softmax(t / tau) || softmax(s / tau))`.
pub fn kd_kl<'g>(teacher: Var<'g>, student: Var<'g>, tau: f64, squared: bool) -> Result<Var<'g>> {
    let (ts, ss) = (teacher.shape(), student.shape());
    if ts != ss || ts.len() != 2 {
        return Err(Error::shape("kd_kl", format!("teacher {ts:?} vs student {ss:?}")));
    }
    let t = teacher.scale(1.0 / tau);
    let log_p = t.log_softmax(1)?;
    let p = t.softmax(1)?;
    let log_q = student.scale(1.0 / tau).log_softmax(1)?;
    let kl = p.mul(log_p.sub(log_q)?)?.sum().scale(1.0 / ts[0] as f64);
    Ok(if squared { kl.scale(tau * tau) } else { kl })
}

fn one_hot(labels: &[usize], classes: usize) -> Result<Tensor> {
    let mut data = vec![0.0; labels.len() * classes];
    for (r, &label) in labels.iter().enumerate() {
        if label >= classes {
            return Err(Error::LabelOutOfRange { label, num_classes: classes });
        }
        data[r * classes + label] = 1.0;
    }
    Tensor::new(vec![labels.len(), classes], data)
}

/// Mean negative log-likelihood of `labels` under `softmax(logits)`.
pub fn cross_entropy<'g>(logits: Var<'g>, labels: &[usize]) -> Result<Var<'g>> {
    let shape = logits.shape();
    if shape.len() != 2 || shape[0] != labels.len() {
        return Err(Error::shape("cross_entropy", format!("logits {shape:?}, {} labels", labels.len())));
    }
    let target = logits.graph().constant(one_hot(labels, shape[1])?);
    Ok(logits.log_softmax(1)?.mul(target)?.sum().scale(-1.0 / labels.len() as f64))
}

/// Concatenates the per-block CLS states, first block first:
/// `[batch, num_layers * d_model]`.
pub fn concat_cls<'g>(stack: &LayerStack<'g>) -> Result<Var<'g>> {
    Var::concat(&stack.cls, 1)
}

/// Trainable linear maps from concatenated teacher and student CLS stacks
/// into a shared `u`-dimensional space.
#[derive(Clone, Debug, PartialEq)]
pub struct ProjectionHead {
    pub teacher_in: usize,
    pub student_in: usize,
    pub u: usize,
    pub params: ParamSet,
}

impl ProjectionHead {
    pub fn init(teacher_in: usize, student_in: usize, u: usize, seed: u64) -> Result<Self> {
        if u == 0 {
            return Err(Error::config("projection_dim", "must be positive"));
        }
        let mut rng = stream(seed, Stream::Init);
        let mut normal = |n: usize| -> Vec<f64> {
            (0..n).map(|_| truncated_normal(&mut rng, INIT_STD)).collect()
        };
        let mut params = ParamSet::new();
        params.push("teacher.w", Tensor::new(vec![teacher_in, u], normal(teacher_in * u))?)?;
        params.push("teacher.b", Tensor::zeros(&[u]))?;
        params.push("student.w", Tensor::new(vec![student_in, u], normal(student_in * u))?)?;
        params.push("student.b", Tensor::zeros(&[u]))?;
        Ok(Self { teacher_in, student_in, u, params })
    }

    pub fn bind<'g>(&self, graph: &'g Graph, trainable: bool) -> BoundHead<'g> {
        let vars: Vec<Var<'g>> =
            self.params.tensors().map(|t| graph.leaf(t.clone(), trainable)).collect();
        BoundHead { vars }
    }
}

impl<'g> BoundHead<'g> {
    /// Heads over caller-made variables in parameter order.
    pub fn from_vars(vars: Vec<Var<'g>>) -> Result<Self> {
        if vars.len() != 4 {
            return Err(Error::shape("projection_head", format!("{} vars, expected 4", vars.len())));
        }
        Ok(Self { vars })
    }
}

pub struct BoundHead<'g> {
    vars: Vec<Var<'g>>,
}

impl<'g> BoundHead<'g> {
    pub fn vars(&self) -> &[Var<'g>] {
        &self.vars
    }

    pub fn grads(&self, graph: &Graph) -> Vec<Tensor> {
        self.vars.iter().map(|v| graph.grad_or_zeros(*v)).collect()
    }

    pub fn project_teacher(&self, h_hat: Var<'g>) -> Result<Var<'g>> {
        project_normalize(h_hat, self.vars[0], self.vars[1])
    }

    pub fn project_student(&self, h_hat: Var<'g>) -> Result<Var<'g>> {
        project_normalize(h_hat, self.vars[2], self.vars[3])
    }
}

/// `normalize(h_hat · weight + bias)` row-wise; a near-zero projection is an
/// error.
pub fn project_normalize<'g>(h_hat: Var<'g>, weight: Var<'g>, bias: Var<'g>) -> Result<Var<'g>> {
    let (hs, ws) = (h_hat.shape(), weight.shape());
    if hs.len() != 2 || ws.len() != 2 || hs[1] != ws[0] {
        return Err(Error::shape("project_normalize", format!("{hs:?} through {ws:?}")));
    }
    h_hat.matmul(weight)?.add(bias)?.l2_normalize()
}

fn check_unit_rows(op: &'static str, x: Var<'_>) -> Result<()> {
    let t = x.value();
    for r in 0..t.rows() {
        let norm = t.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > UNIT_NORM_TOL {
            return Err(Error::NotUnitNorm { op, norm });
        }
    }
    Ok(())
}

/// Contrastive distillation loss over a batch of `K` unit vectors.
///
/// For each row `k`, the teacher vector `t_k` is contrasted against every
/// student vector `s_j` (including `j = k`, the positive) and the loss is the
/// mean of `-log softmax_j(<t_k, s_j> / tau2)[k]`.
pub fn crd_loss<'g>(teacher: Var<'g>, student: Var<'g>, tau2: f64) -> Result<Var<'g>> {
    let (ts, ss) = (teacher.shape(), student.shape());
    if ts != ss || ts.len() != 2 || ts[0] == 0 {
        return Err(Error::shape("crd_loss", format!("teacher {ts:?} vs student {ss:?}")));
    }
    check_unit_rows("crd_loss", teacher)?;
    check_unit_rows("crd_loss", student)?;
    let k = ts[0];
    let mut eye = Tensor::zeros(&[k, k]);
    for i in 0..k {
        eye.data_mut()[i * k + i] = 1.0;
    }
    let eye = teacher.graph().constant(eye);
    let logits = teacher.matmul(student.transpose(0, 1)?)?.scale(1.0 / tau2);
    Ok(logits.log_softmax(1)?.mul(eye)?.sum().scale(-1.0 / k as f64))
}

/// Contrastive loss between two layer stacks through the projection heads.
pub fn stack_crd<'g>(
    heads: &BoundHead<'g>,
    teacher: &LayerStack<'g>,
    student: &LayerStack<'g>,
    tau2: f64,
) -> Result<Var<'g>> {
    let t = heads.project_teacher(concat_cls(teacher)?)?;
    let s = heads.project_student(concat_cls(student)?)?;
    crd_loss(t, s, tau2)
}

fn weighted<'g>(acc: Option<Var<'g>>, weight: f64, term: Var<'g>) -> Result<Option<Var<'g>>> {
    if weight == 0.0 {
        return Ok(acc);
    }
    let term = term.scale(weight);
    Ok(Some(match acc {
        Some(a) => a.add(term)?,
        None => term,
    }))
}

fn total<'g>(graph: &'g Graph, acc: Option<Var<'g>>) -> Var<'g> {
    acc.unwrap_or_else(|| graph.constant(Tensor::scalar(0.0)))
}

#[derive(Clone, Copy, Debug)]
pub struct GeneratorLoss<'g> {
    pub total: Var<'g>,
    pub kl: Var<'g>,
    pub crd: Var<'g>,
}

/// The adversary's objective on augmented inputs.
///
/// `teacher`, `student` and `heads` should be bound as constants so the only
/// gradient path runs through `carrier`. Both critics run without dropout.
/// Terms whose weight is exactly zero are left out of `total` (their values
/// are still reported).
pub fn generator_objective<'g>(
    teacher: &Bound<'_, 'g>,
    student: &Bound<'_, 'g>,
    heads: &BoundHead<'g>,
    tokens: &Batch,
    carrier: Var<'g>,
    w: &LossWeights,
) -> Result<GeneratorLoss<'g>> {
    let (t_logits, t_stack) = teacher.classify(tokens, Some(carrier), None)?;
    let (s_logits, s_stack) = student.classify(tokens, Some(carrier), None)?;
    let kl = kd_kl(t_logits, s_logits, w.tau1, w.kd_temperature_squared)?;
    let crd = stack_crd(heads, &t_stack, &s_stack, w.tau2)?;
    let mut acc = weighted(None, w.alpha1, kl)?;
    acc = weighted(acc, w.alpha2, crd)?;
    Ok(GeneratorLoss { total: total(carrier.graph(), acc), kl, crd })
}

fn reborrow<'a>(rng: &'a mut Option<&mut dyn RngCore>) -> Option<&'a mut dyn RngCore> {
    match rng {
        Some(r) => Some(&mut **r),
        None => None,
    }
}

#[derive(Clone, Copy, Debug)]
pub struct StudentLoss<'g> {
    pub total: Var<'g>,
    pub ce: Var<'g>,
    pub kd_orig: Var<'g>,
    pub kd_aug: Option<Var<'g>>,
    pub crd: Option<Var<'g>>,
}

/// The student's objective on original samples and, when given, augmented
/// samples (which carry no CE term).
///
/// Dropout applies to the student only, and only when `dropout_rng` is given.
pub fn student_objective<'g>(
    teacher: &Bound<'_, 'g>,
    student: &Bound<'_, 'g>,
    heads: &BoundHead<'g>,
    orig: &Batch,
    aug: Option<&Batch>,
    w: &LossWeights,
    dropout_rng: Option<&mut dyn RngCore>,
) -> Result<StudentLoss<'g>> {
    student_objective_cached(teacher, student, heads, orig, None, aug, w, dropout_rng)
}

/// [`student_objective`] with the teacher's logits on `orig` supplied
/// precomputed (the teacher is frozen and runs without dropout).
#[allow(clippy::too_many_arguments)]
pub fn student_objective_cached<'g>(
    teacher: &Bound<'_, 'g>,
    student: &Bound<'_, 'g>,
    heads: &BoundHead<'g>,
    orig: &Batch,
    teacher_orig_logits: Option<&Tensor>,
    aug: Option<&Batch>,
    w: &LossWeights,
    mut dropout_rng: Option<&mut dyn RngCore>,
) -> Result<StudentLoss<'g>> {
    let labels = orig
        .labels
        .as_deref()
        .ok_or_else(|| Error::Data("student objective needs labelled original samples".into()))?;
    let t_logits = match teacher_orig_logits {
        Some(t) => teacher.vars()[0].graph().constant(t.clone()),
        None => teacher.classify(orig, None, None)?.0,
    };
    let (s_logits, _) = student.classify(orig, None, reborrow(&mut dropout_rng))?;
    let ce = cross_entropy(s_logits, labels)?;
    let kd_orig = kd_kl(t_logits, s_logits, w.tau1, w.kd_temperature_squared)?;
    let mut acc = weighted(None, w.lambda1, ce)?;
    acc = weighted(acc, w.lambda2, kd_orig)?;

    let (mut kd_aug, mut crd) = (None, None);
    if let Some(aug) = aug {
        let (ta, t_stack) = teacher.classify(aug, None, None)?;
        let (sa, s_stack) = student.classify(aug, None, reborrow(&mut dropout_rng))?;
        let kd = kd_kl(ta, sa, w.tau1, w.kd_temperature_squared)?;
        let c = stack_crd(heads, &t_stack, &s_stack, w.tau2)?;
        acc = weighted(acc, w.lambda2_aug, kd)?;
        acc = weighted(acc, w.lambda3, c)?;
        kd_aug = Some(kd);
        crd = Some(c);
    }
    Ok(StudentLoss { total: total(ce.graph(), acc), ce, kd_orig, kd_aug, crd })
}
