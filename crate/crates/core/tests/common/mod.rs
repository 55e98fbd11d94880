#![allow(dead_code)]

use trml::dataset::{
    split_batches, Batch, EmbeddingDataset, Modality, MissingnessPlan, SampleRecord, Setting, Split, Task,
};
use trml::model::{Hyper, ModelParams};
use trml::numkernel::{grad_check, GradCheckReport, Matrix, Rng};
use trml::objective::{total_objective_on_tape, TaskLossKind};
use trml::trainer::Ablation;

fn unit(rng: &mut Rng, d: usize) -> Vec<f64> {
    let v: Vec<f64> = (0..d).map(|_| rng.standard_normal()).collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

/// Four training samples (plus one test sample) covering every fusion mode: two complete (one with
/// a partially masked clip), one text-missing and one whose frames are all
/// masked (visual-missing).
pub fn mixed_fixture(seed: u64, d: usize, n_frames: usize, task: Task) -> (EmbeddingDataset, MissingnessPlan) {
    let mut rng = Rng::new(seed);
    let masks = [
        Some((0..n_frames).map(|i| i != 1).collect::<Vec<_>>()),
        None,
        None,
        Some(vec![false; n_frames]),
    ];
    let mut records: Vec<SampleRecord> = masks
        .into_iter()
        .enumerate()
        .map(|(i, frame_mask)| {
            let rows: Vec<Vec<f64>> = (0..n_frames).map(|_| unit(&mut rng, d)).collect();
            let label = match task {
                Task::Regression => rng.uniform(-3.0, 3.0),
                Task::Classification { classes } => (i % classes) as f64,
            };
            SampleRecord {
                id: format!("m{i}"),
                split: Split::Train,
                label,
                text: unit(&mut rng, d),
                frames: Matrix::from_rows(&rows),
                frame_mask,
            }
        })
        .collect();
    records.push(SampleRecord {
        id: "t0".into(),
        split: Split::Test,
        label: 0.0,
        text: unit(&mut rng, d),
        frames: Matrix::from_rows(&[unit(&mut rng, d)]),
        frame_mask: None,
    });
    let ds = EmbeddingDataset::new(records, d, task).unwrap();
    let plan = MissingnessPlan {
        setting: Setting::B,
        victim: Modality::Text,
        p: 0.75,
        seed,
        present: vec![true, true, false, true, true],
    };
    (ds, plan)
}

pub fn batch<'a>(ds: &'a EmbeddingDataset, plan: &MissingnessPlan) -> Batch<'a> {
    split_batches(ds, plan, Split::Train, ds.split_len(Split::Train), None)
        .unwrap()
        .remove(0)
}

/// Parameters with random weights and biases and `τ = 0.2`.
pub fn random_params(seed: u64, d: usize, task: Task, tau_learnable: bool) -> ModelParams {
    let hyper = Hyper {
        lambda: 0.3,
        alpha: 0.7,
        tau_learnable,
    };
    let mut rng = Rng::new(seed).split(99);
    let mut params = ModelParams::init(d, task, hyper, 0.2, &mut rng).unwrap();
    let biases: Vec<String> = params
        .store
        .names()
        .filter(|n| n.rsplit('.').next().is_some_and(|p| p.starts_with('b')))
        .map(str::to_owned)
        .collect();
    for name in biases {
        let (r, c) = params.store.value(&name).unwrap().shape();
        let v = trml::numkernel::seeded_gaussian(&mut rng, r, c, 0.0, 0.3);
        params.set(&name, v).unwrap();
    }
    params
}

/// Central-difference check of the full objective (task loss plus matching
/// loss) on the mixed fixture.
pub fn full_objective_grad_check(
    seed: u64,
    task: Task,
    ablation: Ablation,
    task_loss: TaskLossKind,
    tol: f64,
) -> GradCheckReport {
    let d = 8;
    let (ds, plan) = mixed_fixture(seed, d, 3, task);
    let b = batch(&ds, &plan);
    let params = random_params(seed, d, task, true);
    grad_check(
        &params.store,
        |tape| Ok(total_objective_on_tape(tape, &params, &b, ablation, task_loss)?.total),
        1e-5,
        tol,
    )
    .unwrap()
}
