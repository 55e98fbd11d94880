//! Epoch loop with Adam, ablation variants, validation-based model selection
//! and the temperature sweep.

use std::fmt;
use std::str::FromStr;
use std::time::{Duration, Instant};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{
    build_missingness_plan, iterate_batches, EmbeddingDataset, MissingnessPlan, Modality, Setting, Split,
};
use crate::error::{Error, Result};
use crate::evaluation::{evaluate, MetricsReport};
pub use crate::model::Checkpoint;
use crate::model::{Hyper, ModelParams, TAU_MAX, TAU_MIN};
use crate::numkernel::{evaluate_with_gradients, Rng};
use crate::objective::{combine_sml, total_objective_on_tape, LossBreakdown, TaskLossKind};

/// Loss values above this count as divergence.
pub const DIVERGENCE_LIMIT: f64 = 1e6;

/// Which semantic matching terms enter the objective.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    #[default]
    None,
    /// Drops the text matching term.
    NoSmlText,
    /// Drops the visual matching term.
    NoSmlVisual,
    /// Drops the whole matching loss; the generators stay.
    NoSml,
}

impl Ablation {
    pub const ALL: [Ablation; 4] = [
        Ablation::None,
        Ablation::NoSmlText,
        Ablation::NoSmlVisual,
        Ablation::NoSml,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Ablation::None => "none",
            Ablation::NoSmlText => "no_sml_text",
            Ablation::NoSmlVisual => "no_sml_visual",
            Ablation::NoSml => "no_sml",
        }
    }

    /// Weights on (text, visual) matching terms. Removing a term keeps the
    /// other term's coefficient unchanged.
    pub fn sml_weights(self, lambda: f64) -> (f64, f64) {
        match self {
            Ablation::None | Ablation::NoSml => (lambda, 1.0 - lambda),
            Ablation::NoSmlText => (0.0, 1.0 - lambda),
            Ablation::NoSmlVisual => (lambda, 0.0),
        }
    }

    pub fn effective_alpha(self, alpha: f64) -> f64 {
        match self {
            Ablation::NoSml => 0.0,
            _ => alpha,
        }
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.pad(self.as_str())
    }
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ablation::ALL
            .into_iter()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| Error::config(format!("unknown ablation variant {s:?}")))
    }
}

/// Recomposes a loss breakdown under `variant`:
/// `none` → `λ·L_t + (1−λ)·L_v`, `no_sml_text` → `(1−λ)·L_v`,
/// `no_sml_visual` → `λ·L_t`, `no_sml` → total is the task loss alone.
pub fn apply_ablation(loss: &LossBreakdown, variant: Ablation, lambda: f64, alpha: f64) -> Result<LossBreakdown> {
    let mut out = *loss;
    out.sml = match variant {
        Ablation::None | Ablation::NoSml => combine_sml(loss.sml_text, loss.sml_visual, lambda)?,
        _ => {
            combine_sml(0.0, 0.0, lambda)?;
            let (wt, wv) = variant.sml_weights(lambda);
            wt * loss.sml_text + wv * loss.sml_visual
        }
    };
    if loss.complete_count < 2 {
        out.sml = 0.0;
    }
    out.total = loss.task + variant.effective_alpha(alpha) * out.sml;
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub setting: Setting,
    pub victim: Modality,
    /// Proportion of victim-modality data kept.
    pub p: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    pub lambda: f64,
    pub alpha: f64,
    pub tau: f64,
    pub tau_learnable: bool,
    pub seed: u64,
    pub ablation: Ablation,
    pub task_loss: TaskLossKind,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            setting: Setting::A,
            victim: Modality::Text,
            p: 0.1,
            batch_size: 16,
            epochs: 50,
            lr: 5e-5,
            lambda: 0.1,
            alpha: 0.5,
            tau: 0.1,
            tau_learnable: true,
            seed: 0,
            ablation: Ablation::None,
            task_loss: TaskLossKind::L1,
        }
    }
}

impl TrainConfig {
    pub fn hyper(&self) -> Hyper {
        Hyper {
            lambda: self.lambda,
            alpha: self.alpha,
            tau_learnable: self.tau_learnable,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.p) {
            return Err(Error::config(format!("p must lie in [0, 1], got {}", self.p)));
        }
        if self.batch_size < 2 {
            return Err(Error::config("batch_size must be >= 2"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config(format!("lr must be > 0, got {}", self.lr)));
        }
        if !(TAU_MIN..=TAU_MAX).contains(&self.tau) {
            return Err(Error::config(format!(
                "tau must lie in [{TAU_MIN}, {TAU_MAX}], got {}",
                self.tau
            )));
        }
        self.hyper().validate()
    }

    pub fn plan(&self, ds: &EmbeddingDataset) -> Result<MissingnessPlan> {
        build_missingness_plan(ds, self.setting, self.victim, self.p, plan_seed(self.seed))
    }
}

// Independent seeds for the sub-streams of one run.
fn plan_seed(seed: u64) -> u64 {
    Rng::new(seed).split(0x706c_616e).next_u64()
}

fn epoch_seed(seed: u64, epoch: usize) -> u64 {
    Rng::new(seed).split(0x6570_6f63 + epoch as u64).next_u64()
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Means over the epoch's batches.
    pub train: LossBreakdown,
    pub val_metric: Option<f64>,
    pub tau: f64,
    pub wall_clock: Duration,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
}

impl TrainLog {
    /// CSV with columns `epoch,task_loss,sml_text,sml_visual,sml,total,val_metric,tau`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,task_loss,sml_text,sml_visual,sml,total,val_metric,tau\n");
        for e in &self.epochs {
            let val = e.val_metric.map(|v| format!("{v:.17e}")).unwrap_or_default();
            out.push_str(&format!(
                "{},{:.17e},{:.17e},{:.17e},{:.17e},{:.17e},{},{:.17e}\n",
                e.epoch, e.train.task, e.train.sml_text, e.train.sml_visual, e.train.sml, e.train.total, val, e.tau
            ));
        }
        out
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters of the best validation epoch (the last epoch without a
    /// validation split).
    pub checkpoint: Checkpoint,
    pub log: TrainLog,
}

/// Validation score where larger is better: −MAE for regression, accuracy
/// for classification.
fn selection_score(report: &MetricsReport) -> f64 {
    match (report.mae, report.acc) {
        (_, Some(acc)) => acc,
        (Some(mae), None) => -mae,
        (None, None) => f64::NEG_INFINITY,
    }
}

fn mean_breakdown(acc: &LossBreakdown, n: usize) -> LossBreakdown {
    let k = n.max(1) as f64;
    LossBreakdown {
        task: acc.task / k,
        sml_text: acc.sml_text / k,
        sml_visual: acc.sml_visual / k,
        sml: acc.sml / k,
        total: acc.total / k,
        complete_count: acc.complete_count,
    }
}

/// Trains on `ds` under the missingness plan derived from `config`.
pub fn train_on(config: &TrainConfig, ds: &EmbeddingDataset, config_echo: Vec<String>) -> Result<TrainOutcome> {
    config.validate()?;
    let plan = config.plan(ds)?;
    let mut init_rng = Rng::new(config.seed).split(0x696e_6974);
    let mut params = ModelParams::init(ds.d, ds.task, config.hyper(), config.tau, &mut init_rng)?;

    let mut log = TrainLog::default();
    let mut best: Option<(f64, ModelParams)> = None;
    let has_valid = ds.split_len(Split::Valid) > 0;
    let mut step = 0;
    for epoch in 0..config.epochs {
        let started = Instant::now();
        let batches = iterate_batches(ds, &plan, config.batch_size, epoch_seed(config.seed, epoch))?;
        let mut sums = LossBreakdown::default();
        for batch in &batches {
            // Pre-step copy: reported on divergence, and supplies model
            // metadata while the live store is borrowed by the tape.
            let last_good = params.clone();
            let mut breakdown = LossBreakdown::default();
            let result = evaluate_with_gradients(&mut params.store, |tape| {
                let vars = total_objective_on_tape(tape, &last_good, batch, config.ablation, config.task_loss)?;
                breakdown = vars.breakdown;
                Ok(vars.total)
            });
            let loss = match result {
                Ok(loss) => loss,
                Err(Error::NonFinite { .. }) => f64::NAN,
                Err(e) => return Err(e),
            };
            if !loss.is_finite() || loss.abs() > DIVERGENCE_LIMIT {
                return Err(Error::Diverged {
                    epoch,
                    step,
                    loss,
                    last_good: Box::new(Checkpoint::new(last_good, config_echo)),
                });
            }
            params.store.adam_step(config.lr)?;
            step += 1;
            sums.task += breakdown.task;
            sums.sml_text += breakdown.sml_text;
            sums.sml_visual += breakdown.sml_visual;
            sums.sml += breakdown.sml;
            sums.total += breakdown.total;
            sums.complete_count += breakdown.complete_count;
        }
        let val_metric = if has_valid {
            let report = evaluate(&params, ds, &plan, Split::Valid)?;
            let score = selection_score(&report);
            if best.as_ref().is_none_or(|(b, _)| score > *b) {
                best = Some((score, params.clone()));
                log.best_epoch = Some(epoch);
            }
            Some(report.mae.or(report.acc).unwrap_or(f64::NAN))
        } else {
            log.best_epoch = Some(epoch);
            None
        };
        log.epochs.push(EpochRecord {
            epoch,
            train: mean_breakdown(&sums, batches.len()),
            val_metric,
            tau: params.tau(),
            wall_clock: started.elapsed(),
        });
    }
    let chosen = match best {
        Some((_, p)) => p,
        None => params,
    };
    Ok(TrainOutcome {
        checkpoint: Checkpoint::new(chosen, config_echo),
        log,
    })
}

/// One row of a temperature sweep.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub tau: f64,
    pub metrics: MetricsReport,
}

pub fn default_tau_grid() -> Vec<f64> {
    vec![0.1, 0.3, 0.5, 0.7, 0.9]
}

/// Trains and evaluates once per temperature with `τ` frozen. Rows come back
/// in input order.
pub fn sweep_tau(config: &TrainConfig, ds: &EmbeddingDataset, values: &[f64], split: Split) -> Result<Vec<SweepRow>> {
    if values.is_empty() {
        return Err(Error::config("sweep needs at least one tau value"));
    }
    if let Some(bad) = values.iter().find(|t| !(TAU_MIN..=TAU_MAX).contains(*t)) {
        return Err(Error::config(format!("sweep tau {bad} outside [{TAU_MIN}, {TAU_MAX}]")));
    }
    values
        .par_iter()
        .map(|&tau| {
            let cfg = TrainConfig {
                tau,
                tau_learnable: false,
                ..config.clone()
            };
            let outcome = train_on(&cfg, ds, Vec::new())?;
            let plan = cfg.plan(ds)?;
            let metrics = evaluate(&outcome.checkpoint.params, ds, &plan, split)?;
            Ok(SweepRow { tau, metrics })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn breakdown(lt: f64, lv: f64) -> LossBreakdown {
        LossBreakdown {
            task: 1.0,
            sml_text: lt,
            sml_visual: lv,
            complete_count: 4,
            ..LossBreakdown::default()
        }
    }

    #[test]
    fn ablation_compositions() {
        let b = breakdown(1.0, 2.0);
        let none = apply_ablation(&b, Ablation::None, 0.1, 0.5).unwrap();
        assert!((none.sml - 1.9).abs() < 1e-15);
        assert!((none.total - 1.95).abs() < 1e-15);
        let no_text = apply_ablation(&b, Ablation::NoSmlText, 0.1, 0.5).unwrap();
        assert!((no_text.sml - 1.8).abs() < 1e-15);
        let no_vis = apply_ablation(&b, Ablation::NoSmlVisual, 0.1, 0.5).unwrap();
        assert!((no_vis.sml - 0.1).abs() < 1e-15);
        for (lambda, alpha) in [(0.1, 0.5), (0.9, 3.0)] {
            let off = apply_ablation(&b, Ablation::NoSml, lambda, alpha).unwrap();
            assert_eq!(off.total, b.task);
        }
    }

    #[test]
    fn sml_vanishes_below_two_complete() {
        let b = LossBreakdown {
            complete_count: 1,
            ..breakdown(1.0, 2.0)
        };
        let out = apply_ablation(&b, Ablation::None, 0.1, 0.5).unwrap();
        assert_eq!(out.sml, 0.0);
        assert_eq!(out.total, 1.0);
    }

    #[test]
    fn unknown_variant_is_config_error() {
        assert!(matches!("no_task".parse::<Ablation>(), Err(Error::Config(_))));
        assert_eq!("no_sml_visual".parse::<Ablation>().unwrap(), Ablation::NoSmlVisual);
    }

    #[test]
    fn config_defaults() {
        let c = TrainConfig::default();
        assert_eq!(c.batch_size, 16);
        assert_eq!(c.lr, 5e-5);
        assert_eq!(c.lambda, 0.1);
        assert_eq!(c.alpha, 0.5);
        assert_eq!(c.tau, 0.1);
        assert_eq!(c.epochs, 50);
        assert!(c.validate().is_ok());
        assert!(TrainConfig { lr: 0.0, ..c.clone() }.validate().is_err());
        assert!(TrainConfig { batch_size: 1, ..c.clone() }.validate().is_err());
        assert!(TrainConfig { lambda: 1.0, ..c.clone() }.validate().is_err());
        assert!(TrainConfig { tau: 5.0, ..c }.validate().is_err());
    }

    #[test]
    fn default_grid_spans_point_one_to_point_nine() {
        let g = default_tau_grid();
        assert_eq!(g.len(), 5);
        assert_eq!((g[0], g[4]), (0.1, 0.9));
    }
}
