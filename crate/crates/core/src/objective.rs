//! Semantic matching losses between original and virtual modalities, task
//! losses, and the total training objective.

use serde::{Deserialize, Serialize};

use crate::dataset::{Batch, FusionMode, Task};
use crate::error::{Error, Result};
use crate::model::{forward_on_tape, ForwardVars, ModelParams, TAU_MAX, TAU_MIN};
use crate::numkernel::{Matrix, ParamStore, Tape, Var};
use crate::trainer::Ablation;

const MIN_ROW_NORM: f64 = 1e-12;

/// Cosine similarities between original and virtual representations.
#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityMatrices {
    /// `x_t` against `x̄_t`.
    pub text: Matrix,
    /// `x_v` against `x̄_v`.
    pub visual: Matrix,
}

/// Row-softmaxed (`original → virtual`) and column-softmaxed
/// (`virtual → original`) similarities.
#[derive(Clone, Debug, PartialEq)]
pub struct NormalizedSimilarities {
    pub y_row: Matrix,
    pub y_col: Matrix,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub task: f64,
    pub sml_text: f64,
    pub sml_visual: f64,
    pub sml: f64,
    pub total: f64,
    /// Samples in the batch that contributed to the matching loss.
    pub complete_count: usize,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskLossKind {
    /// Mean absolute error.
    #[default]
    L1,
    /// Mean squared error.
    L2,
}

fn check_rows(m: &Matrix) -> Result<()> {
    match m.row_norms().iter().position(|&n| n < MIN_ROW_NORM) {
        Some(row) => Err(Error::ZeroNorm { row }),
        None => Ok(()),
    }
}

/// Entry `(i, j)` is `cos(a_i, b_j)`.
pub fn cosine_similarity_matrix(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols() != b.cols() {
        return Err(Error::Model("cosine operands differ in width".into()));
    }
    check_rows(a)?;
    check_rows(b)?;
    let store = ParamStore::new();
    let mut tape = Tape::new(&store);
    let (av, bv) = (tape.constant(a.clone()), tape.constant(b.clone()));
    let s = cosine_on_tape(&mut tape, av, bv)?;
    Ok(tape.value(s).clone())
}

fn cosine_on_tape(tape: &mut Tape<'_>, a: Var, b: Var) -> Result<Var> {
    check_rows(tape.value(a))?;
    check_rows(tape.value(b))?;
    let an = tape.row_normalize(a);
    let bn = tape.row_normalize(b);
    Ok(tape.matmul_t(an, bn))
}

fn softmax_rows(m: &Matrix, tau: f64) -> Matrix {
    let mut out = m.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for x in row.iter_mut() {
            *x = ((*x - max) / tau).exp();
            z += *x;
        }
        row.iter_mut().for_each(|x| *x /= z);
    }
    out
}

fn check_tau(tau: f64) -> Result<()> {
    if !(TAU_MIN..=TAU_MAX).contains(&tau) {
        return Err(Error::config(format!("tau must lie in [{TAU_MIN}, {TAU_MAX}], got {tau}")));
    }
    Ok(())
}

/// Temperature-scaled softmax of `s` along rows and along columns.
pub fn normalize_similarity(s: &Matrix, tau: f64) -> Result<NormalizedSimilarities> {
    check_tau(tau)?;
    if s.rows() < 2 || s.rows() != s.cols() {
        return Err(Error::Model(format!(
            "similarity matrix must be square with N >= 2, got {:?}",
            s.shape()
        )));
    }
    Ok(NormalizedSimilarities {
        y_row: softmax_rows(s, tau),
        y_col: softmax_rows(&s.transpose(), tau).transpose(),
    })
}

/// Symmetric contrastive loss on the tape; the `i`-th original and the
/// `i`-th virtual row form the positive pair.
pub fn sml_pair_on_tape(tape: &mut Tape<'_>, original: Var, virt: Var, tau: Var) -> Result<Var> {
    let n = tape.value(original).rows();
    if n < 2 || tape.value(virt).rows() != n {
        return Err(Error::Model(format!(
            "matching loss needs two equal batches of >= 2 rows, got {} and {}",
            n,
            tape.value(virt).rows()
        )));
    }
    let s = cosine_on_tape(tape, original, virt)?;
    let logits = tape.div_scalar(s, tau);
    let forward = tape.diag_softmax_xent(logits);
    let logits_t = tape.transpose(logits);
    let backward = tape.diag_softmax_xent(logits_t);
    let sum = tape.add(forward, backward);
    Ok(tape.scale(sum, 0.5))
}

/// `½[mean −log y_row(i,i) + mean −log y_col(i,i)]` over the cosine
/// similarities of `original` and `virt`.
pub fn semantic_matching_loss_pair(original: &Matrix, virt: &Matrix, tau: f64) -> Result<f64> {
    check_tau(tau)?;
    let store = ParamStore::new();
    let mut tape = Tape::new(&store);
    let o = tape.constant(original.clone());
    let v = tape.constant(virt.clone());
    let t = tape.constant(Matrix::scalar(tau));
    let loss = sml_pair_on_tape(&mut tape, o, v, t)?;
    Ok(tape.scalar(loss))
}

fn check_lambda(lambda: f64) -> Result<()> {
    if !(lambda > 0.0 && lambda < 1.0) {
        return Err(Error::config(format!("lambda must lie in (0, 1), got {lambda}")));
    }
    Ok(())
}

/// `λ·L_t + (1−λ)·L_v`
pub fn combine_sml(l_text: f64, l_visual: f64, lambda: f64) -> Result<f64> {
    check_lambda(lambda)?;
    Ok(lambda * l_text + (1.0 - lambda) * l_visual)
}

fn class_labels(labels: &[f64], classes: usize) -> Result<Vec<usize>> {
    labels
        .iter()
        .map(|&y| {
            if y >= 0.0 && y.fract() == 0.0 && (y as usize) < classes {
                Ok(y as usize)
            } else {
                Err(Error::Data(format!("label {y} outside classes 0..{classes}")))
            }
        })
        .collect()
}

fn task_loss_on_tape(
    tape: &mut Tape<'_>,
    outputs: Var,
    labels: &[f64],
    task: Task,
    kind: TaskLossKind,
) -> Result<Var> {
    match task {
        Task::Regression => Ok(match kind {
            TaskLossKind::L1 => tape.abs_error_mean(outputs, labels),
            TaskLossKind::L2 => tape.sq_error_mean(outputs, labels),
        }),
        Task::Classification { classes } => {
            let labels = class_labels(labels, classes)?;
            Ok(tape.label_softmax_xent(outputs, &labels))
        }
    }
}

/// Mean absolute (or squared) error for regression, mean cross-entropy of
/// softmaxed logits for classification.
pub fn task_loss(predictions: &Matrix, labels: &[f64], task: Task, kind: TaskLossKind) -> Result<f64> {
    if predictions.rows() != labels.len() || predictions.cols() != task.output_dim() {
        return Err(Error::Model(format!(
            "predictions {:?} do not match {} labels for this task",
            predictions.shape(),
            labels.len()
        )));
    }
    let store = ParamStore::new();
    let mut tape = Tape::new(&store);
    let p = tape.constant(predictions.clone());
    let loss = task_loss_on_tape(&mut tape, p, labels, task, kind)?;
    Ok(tape.scalar(loss))
}

/// Loss handles recorded by [`total_objective_on_tape`].
pub struct ObjectiveVars {
    pub forward: ForwardVars,
    pub total: Var,
    pub breakdown: LossBreakdown,
}

/// Task loss over every sample plus `α·L_sml` over the complete samples.
/// With fewer than two complete samples the matching term is zero.
pub fn total_objective_on_tape(
    tape: &mut Tape<'_>,
    params: &ModelParams,
    batch: &Batch<'_>,
    ablation: Ablation,
    task_kind: TaskLossKind,
) -> Result<ObjectiveVars> {
    let forward = forward_on_tape(tape, params, batch)?;
    let task = task_loss_on_tape(tape, forward.outputs, &batch.labels, params.task, task_kind)?;
    let task_value = tape.scalar(task);

    let complete_count = batch
        .modes
        .iter()
        .filter(|&&m| m == FusionMode::Complete)
        .count();
    let mut breakdown = LossBreakdown {
        task: task_value,
        complete_count,
        ..LossBreakdown::default()
    };
    let hyper = params.hyper;
    let alpha = ablation.effective_alpha(hyper.alpha);
    let mut total = task;
    if complete_count >= 2 {
        let (tpos, vpos) = forward.complete_positions(&batch.modes);
        let tau = params.tau_var(tape);
        let x_t = forward.x_t.expect("complete samples have text");
        let x_v = forward.x_v.expect("complete samples have frames");
        let vt = forward.virtual_t.expect("complete samples have virtual text");
        let vv = forward.virtual_v.expect("complete samples have virtual visual");

        let orig_t = tape.select_rows(x_t, &tpos);
        let virt_t = tape.select_rows(vt, &vpos);
        let l_text = sml_pair_on_tape(tape, orig_t, virt_t, tau)?;
        let orig_v = tape.select_rows(x_v, &vpos);
        let virt_v = tape.select_rows(vv, &tpos);
        let l_visual = sml_pair_on_tape(tape, orig_v, virt_v, tau)?;

        breakdown.sml_text = tape.scalar(l_text);
        breakdown.sml_visual = tape.scalar(l_visual);
        let (w_text, w_visual) = ablation.sml_weights(hyper.lambda);
        breakdown.sml = w_text * breakdown.sml_text + w_visual * breakdown.sml_visual;
        if alpha != 0.0 {
            let mut parts = Vec::with_capacity(2);
            if w_text != 0.0 {
                parts.push(tape.scale(l_text, w_text));
            }
            if w_visual != 0.0 {
                parts.push(tape.scale(l_visual, w_visual));
            }
            if let Some(first) = parts.first().copied() {
                let sml = parts[1..].iter().fold(first, |acc, &p| tape.add(acc, p));
                let weighted = tape.scale(sml, alpha);
                total = tape.add(total, weighted);
            }
        }
    }
    breakdown.total = tape.scalar(total);
    Ok(ObjectiveVars {
        forward,
        total,
        breakdown,
    })
}

/// Value-only evaluation of the total objective on one batch.
pub fn total_objective(
    params: &ModelParams,
    batch: &Batch<'_>,
    ablation: Ablation,
    task_kind: TaskLossKind,
) -> Result<LossBreakdown> {
    let mut tape = Tape::new(&params.store);
    let vars = total_objective_on_tape(&mut tape, params, batch, ablation, task_kind)?;
    if let Some(name) = tape.first_non_finite() {
        return Err(Error::NonFinite {
            tensor: name.to_owned(),
        });
    }
    Ok(vars.breakdown)
}

/// Similarity matrices for a set of samples whose four representations are
/// stacked row-wise.
pub fn similarity_matrices(
    x_t: &Matrix,
    virtual_t: &Matrix,
    x_v: &Matrix,
    virtual_v: &Matrix,
) -> Result<SimilarityMatrices> {
    Ok(SimilarityMatrices {
        text: cosine_similarity_matrix(x_t, virtual_t)?,
        visual: cosine_similarity_matrix(x_v, virtual_v)?,
    })
}
