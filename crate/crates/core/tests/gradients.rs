mod common;

use common::{batch, full_objective_grad_check, mixed_fixture, random_params};
use trml::dataset::{FusionMode, Task};
use trml::model::{Mlp, LOG_TAU};
use trml::numkernel::evaluate_with_gradients;
use trml::objective::{total_objective_on_tape, TaskLossKind};
use trml::trainer::Ablation;

#[test]
fn fixture_covers_every_mode() {
    let (ds, plan) = mixed_fixture(0, 8, 3, Task::Regression);
    let b = batch(&ds, &plan);
    assert_eq!(
        b.modes,
        vec![
            FusionMode::Complete,
            FusionMode::Complete,
            FusionMode::MissingText,
            FusionMode::MissingVisual
        ]
    );
}

#[test]
fn full_objective_matches_finite_differences() {
    for seed in [1, 2, 3] {
        let report = full_objective_grad_check(seed, Task::Regression, Ablation::None, TaskLossKind::L1, 1e-4);
        assert!(report.passed(), "seed {seed}: {:?}", report.failures);
        assert!(report.entries_checked > 400);
    }
}

#[test]
fn classification_objective_matches_finite_differences() {
    let report = full_objective_grad_check(4, Task::Classification { classes: 3 }, Ablation::None, TaskLossKind::L1, 1e-4);
    assert!(report.passed(), "{:?}", report.failures);
}

#[test]
fn ablated_objectives_match_finite_differences() {
    // L1 residual signs can cancel exactly, leaving only rounding noise in the
    // numeric estimate of a zero gradient.
    for ablation in [Ablation::NoSmlText, Ablation::NoSmlVisual, Ablation::NoSml] {
        let report = full_objective_grad_check(5, Task::Regression, ablation, TaskLossKind::L2, 1e-4);
        assert!(report.passed(), "{ablation}: {:?}", report.failures);
    }
}

fn gradients(ablation: Ablation, tau_learnable: bool) -> trml::numkernel::ParamStore {
    let (ds, plan) = mixed_fixture(7, 8, 3, Task::Regression);
    let b = batch(&ds, &plan);
    let params = random_params(7, 8, Task::Regression, tau_learnable);
    let mut store = params.store.clone();
    evaluate_with_gradients(&mut store, |tape| {
        Ok(total_objective_on_tape(tape, &params, &b, ablation, TaskLossKind::L1)?.total)
    })
    .unwrap();
    store
}

#[test]
fn frozen_temperature_gets_no_gradient() {
    let frozen = gradients(Ablation::None, false);
    assert!(frozen.grad(LOG_TAU).unwrap().as_slice().iter().all(|&g| g == 0.0));
    let learnable = gradients(Ablation::None, true);
    assert!(learnable.grad(LOG_TAU).unwrap().get(0, 0) != 0.0);
}

#[test]
fn generators_train_through_task_loss_without_matching() {
    let store = gradients(Ablation::NoSml, true);
    for mlp in [Mlp::VisualToText, Mlp::TextToVisual] {
        let g = store.grad(&mlp.param("w2")).unwrap();
        assert!(g.as_slice().iter().any(|&v| v != 0.0), "{}", mlp.prefix());
    }
    assert_eq!(store.grad(LOG_TAU).unwrap().get(0, 0), 0.0);
}
