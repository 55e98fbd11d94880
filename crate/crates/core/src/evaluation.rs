//! Test-time metrics, paired t-tests, similarity heatmaps and 2D projections.

use std::fs;
use std::io::Write;
use std::path::Path;

use statrs::function::beta::beta_reg;

use crate::dataset::{fmt_f64, split_batches, Batch, EmbeddingDataset, FusionMode, MissingnessPlan, Split, Task};
use crate::error::{Error, Result};
use crate::model::{forward_batch, ModelParams};
use crate::numkernel::{symmetric_eigen, Matrix};
use crate::objective::cosine_similarity_matrix;

pub const EXPORT_MAGIC: &str = "#trml-export v1";

const EVAL_BATCH: usize = 64;

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub split: Split,
    pub count: usize,
    /// Regression only.
    pub mae: Option<f64>,
    /// Regression only; `None` when every label is zero.
    pub acc2: Option<f64>,
    /// Classification only.
    pub acc: Option<f64>,
    pub ids: Vec<String>,
    pub modes: Vec<FusionMode>,
    /// Predicted score (regression) or predicted class (classification).
    pub predictions: Vec<f64>,
    pub labels: Vec<f64>,
}

fn opt(v: Option<f64>) -> String {
    v.map(fmt_f64).unwrap_or_default()
}

impl MetricsReport {
    pub fn summary_line(&self) -> String {
        let show = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_else(|| "-".into());
        format!(
            "split={} n={} mae={} acc2={} acc={}",
            self.split,
            self.count,
            show(self.mae),
            show(self.acc2),
            show(self.acc)
        )
    }

    /// Summary CSV: header plus one row.
    pub fn to_csv(&self) -> String {
        format!(
            "split,count,mae,acc2,acc\n{},{},{},{},{}\n",
            self.split,
            self.count,
            opt(self.mae),
            opt(self.acc2),
            opt(self.acc)
        )
    }

    /// Per-sample CSV: `id,mode,label,prediction`.
    pub fn predictions_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let io = |e: csv::Error| Error::Data(format!("csv: {e}"));
        w.write_record(["id", "mode", "label", "prediction"]).map_err(io)?;
        for i in 0..self.count {
            w.write_record([
                self.ids[i].as_str(),
                self.modes[i].tag(),
                &fmt_f64(self.labels[i]),
                &fmt_f64(self.predictions[i]),
            ])
            .map_err(io)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Data(format!("csv: {e}")))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }
}

/// Mean absolute error, summed in input order. `None` for empty input.
pub fn mean_absolute_error(predictions: &[f64], labels: &[f64]) -> Option<f64> {
    if predictions.is_empty() {
        return None;
    }
    let sum: f64 = predictions.iter().zip(labels).map(|(p, y)| (p - y).abs()).sum();
    Some(sum / predictions.len() as f64)
}

/// Fraction of non-zero-label samples whose prediction is on the same side
/// of zero as the label (`pred > 0` agrees with `label > 0`).
pub fn binary_accuracy(predictions: &[f64], labels: &[f64]) -> Option<f64> {
    let mut total = 0usize;
    let mut hits = 0usize;
    for (&p, &y) in predictions.iter().zip(labels) {
        if y == 0.0 {
            continue;
        }
        total += 1;
        if (p > 0.0) == (y > 0.0) {
            hits += 1;
        }
    }
    (total > 0).then(|| hits as f64 / total as f64)
}

/// Fraction of exact class matches.
pub fn class_accuracy(predicted: &[f64], labels: &[f64]) -> Option<f64> {
    if predicted.is_empty() {
        return None;
    }
    let hits = predicted.iter().zip(labels).filter(|(p, y)| p == y).count();
    Some(hits as f64 / predicted.len() as f64)
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn check_compatible(params: &ModelParams, ds: &EmbeddingDataset) -> Result<()> {
    if ds.d != params.d {
        return Err(Error::DimensionMismatch {
            id: "<dataset>".into(),
            expected: params.d,
            found: ds.d,
        });
    }
    if ds.task.output_dim() != params.task.output_dim() || ds.task.is_regression() != params.task.is_regression() {
        return Err(Error::Data(format!(
            "dataset task {:?} does not match model task {:?}",
            ds.task, params.task
        )));
    }
    Ok(())
}

/// Forwards every sample of `split` with the fusion mode given by `plan`.
/// Samples are processed and reduced in id order.
pub fn evaluate(params: &ModelParams, ds: &EmbeddingDataset, plan: &MissingnessPlan, split: Split) -> Result<MetricsReport> {
    check_compatible(params, ds)?;
    let mut report = MetricsReport {
        split,
        count: 0,
        mae: None,
        acc2: None,
        acc: None,
        ids: Vec::new(),
        modes: Vec::new(),
        predictions: Vec::new(),
        labels: Vec::new(),
    };
    for batch in split_batches(ds, plan, split, EVAL_BATCH, None)? {
        let out = forward_batch(params, &batch)?;
        for (k, record) in batch.records.iter().enumerate() {
            let row = out.outputs.row(k);
            let pred = match params.task {
                Task::Regression => row[0],
                Task::Classification { .. } => argmax(row) as f64,
            };
            report.ids.push(record.id.clone());
            report.modes.push(batch.modes[k]);
            report.predictions.push(pred);
            report.labels.push(record.label);
        }
    }
    report.count = report.ids.len();
    match params.task {
        Task::Regression => {
            report.mae = mean_absolute_error(&report.predictions, &report.labels);
            report.acc2 = binary_accuracy(&report.predictions, &report.labels);
        }
        Task::Classification { .. } => {
            report.acc = class_accuracy(&report.predictions, &report.labels);
        }
    }
    Ok(report)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TTestResult {
    pub t: f64,
    pub df: usize,
    pub p_two_tailed: f64,
    /// Mean of `a − b`.
    pub mean_diff: f64,
}

/// Paired two-tailed Student t-test on `a − b`.
pub fn paired_ttest(a: &[f64], b: &[f64]) -> Result<TTestResult> {
    if a.len() != b.len() {
        return Err(Error::Data(format!(
            "paired t-test needs equal lengths, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    let n = a.len();
    if n < 2 {
        return Err(Error::Data(format!("paired t-test needs at least 2 pairs, got {n}")));
    }
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(Error::Data("paired t-test input contains non-finite values".into()));
    }
    let diffs: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let df = n - 1;
    let mean = diffs.iter().sum::<f64>() / n as f64;
    let var = diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / df as f64;
    if diffs.iter().all(|&d| d == 0.0) {
        return Ok(TTestResult {
            t: 0.0,
            df,
            p_two_tailed: 1.0,
            mean_diff: 0.0,
        });
    }
    if var == 0.0 {
        return Ok(TTestResult {
            t: f64::INFINITY.copysign(mean),
            df,
            p_two_tailed: 0.0,
            mean_diff: mean,
        });
    }
    let t = mean / (var / n as f64).sqrt();
    let dff = df as f64;
    let p = beta_reg(dff / 2.0, 0.5, dff / (dff + t * t)).clamp(0.0, 1.0);
    Ok(TTestResult {
        t,
        df,
        p_two_tailed: p,
        mean_diff: mean,
    })
}

/// Cosine matrices over a chosen list of samples, all computed with every
/// modality present.
#[derive(Clone, Debug, PartialEq)]
pub struct Heatmaps {
    pub ids: Vec<String>,
    /// `x_t` against `x̄_t`.
    pub text: Matrix,
    /// `x_v` against `x̄_v`.
    pub visual: Matrix,
    /// `x_t` against `x_v`.
    pub cross: Matrix,
}

impl Heatmaps {
    pub fn named(&self) -> [(&'static str, &Matrix); 3] {
        [("text", &self.text), ("visual", &self.visual), ("cross", &self.cross)]
    }
}

pub fn export_similarity_heatmap(params: &ModelParams, ds: &EmbeddingDataset, sample_ids: &[String]) -> Result<Heatmaps> {
    check_compatible(params, ds)?;
    if sample_ids.len() < 2 {
        return Err(Error::config("heatmap export needs at least 2 sample ids"));
    }
    let indices = sample_ids
        .iter()
        .map(|id| ds.position(id).ok_or_else(|| Error::UnknownId(id.clone())))
        .collect::<Result<Vec<_>>>()?;
    for &i in &indices {
        if ds.records[i].present_frames() == 0 {
            return Err(Error::Data(format!(
                "record {}: every frame is masked, no visual representation",
                ds.records[i].id
            )));
        }
    }
    let batch = Batch {
        records: indices.iter().map(|&i| &ds.records[i]).collect(),
        modes: vec![FusionMode::Complete; indices.len()],
        labels: indices.iter().map(|&i| ds.records[i].label).collect(),
        indices,
    };
    let out = forward_batch(params, &batch)?;
    let stack = |pick: fn(&crate::model::ModalityBundle) -> &Option<Matrix>| {
        let rows: Vec<Vec<f64>> = out
            .bundles
            .iter()
            .map(|b| pick(b).as_ref().expect("complete bundle").row(0).to_vec())
            .collect();
        Matrix::from_rows(&rows)
    };
    let x_t = stack(|b| &b.x_t);
    let x_v = stack(|b| &b.x_v);
    let vt = stack(|b| &b.virtual_t);
    let vv = stack(|b| &b.virtual_v);
    Ok(Heatmaps {
        ids: sample_ids.to_vec(),
        text: cosine_similarity_matrix(&x_t, &vt)?,
        visual: cosine_similarity_matrix(&x_v, &vv)?,
        cross: cosine_similarity_matrix(&x_t, &x_v)?,
    })
}

fn csv_err(e: impl std::fmt::Display) -> Error {
    Error::Data(format!("csv: {e}"))
}

/// Export header line, then an id header row and one labelled row per id.
pub fn heatmap_csv(name: &str, ids: &[String], m: &Matrix) -> Result<String> {
    let mut buf = format!("{EXPORT_MAGIC} kind=heatmap name={name} n={}\n", ids.len()).into_bytes();
    {
        let mut w = csv::Writer::from_writer(&mut buf);
        let mut header = vec!["id".to_string()];
        header.extend(ids.iter().cloned());
        w.write_record(&header).map_err(csv_err)?;
        for (i, id) in ids.iter().enumerate() {
            let mut row = vec![id.clone()];
            row.extend(m.row(i).iter().map(|&v| fmt_f64(v)));
            w.write_record(&row).map_err(csv_err)?;
        }
        w.flush().map_err(csv_err)?;
    }
    Ok(String::from_utf8(buf).expect("csv output is utf-8"))
}

/// Top-two principal coordinates of a point cloud.
#[derive(Clone, Debug, PartialEq)]
pub struct Projection {
    /// `n × 2`
    pub coords: Matrix,
    /// Unit principal directions as columns (`d × 2`).
    pub components: Matrix,
    pub eigenvalues: [f64; 2],
    /// The data spans fewer than two directions; second coordinates are 0.
    pub rank_deficient: bool,
}

const RANK_TOL: f64 = 1e-10;

/// Centers `points` and projects them onto the two leading eigenvectors of
/// the covariance. Each direction's largest-magnitude entry is made positive.
pub fn project_2d(points: &Matrix) -> Result<Projection> {
    let (n, d) = points.shape();
    if n < 3 {
        return Err(Error::Data(format!("projection needs at least 3 points, got {n}")));
    }
    if d < 1 {
        return Err(Error::Data("projection needs at least one dimension".into()));
    }
    let mut mean = vec![0.0; d];
    for i in 0..n {
        for (m, v) in mean.iter_mut().zip(points.row(i)) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    let mut centered = points.clone();
    for i in 0..n {
        for (v, m) in centered.row_mut(i).iter_mut().zip(&mean) {
            *v -= m;
        }
    }
    let cov = centered.transposed_matmul(&centered).scale(1.0 / (n - 1) as f64);
    let (values, vectors) = symmetric_eigen(&cov);
    let l1 = values[0].max(0.0);
    let l2 = values.get(1).copied().unwrap_or(0.0).max(0.0);
    let rank_deficient = d < 2 || l1 == 0.0 || l2 <= RANK_TOL * l1;

    let mut components = Matrix::zeros(d, 2);
    for c in 0..2.min(d) {
        let col: Vec<f64> = (0..d).map(|r| vectors.get(r, c)).collect();
        let lead = col.iter().copied().fold(0.0f64, |acc, v| if v.abs() > acc.abs() { v } else { acc });
        let sign = if lead < 0.0 { -1.0 } else { 1.0 };
        for (r, v) in col.into_iter().enumerate() {
            components.set(r, c, sign * v);
        }
    }
    let mut coords = centered.matmul(&components);
    if rank_deficient {
        for i in 0..n {
            coords.set(i, 1, 0.0);
        }
    }
    Ok(Projection {
        coords,
        components,
        eigenvalues: [l1, l2],
        rank_deficient,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProjectionRow {
    pub id: String,
    /// `text`, `virtual_text`, `visual` or `virtual_visual`.
    pub tag: &'static str,
    pub x: f64,
    pub y: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProjectionExport {
    pub rows: Vec<ProjectionRow>,
    pub rank_deficient: bool,
}

impl ProjectionExport {
    pub fn to_csv(&self) -> Result<String> {
        let mut buf = format!(
            "{EXPORT_MAGIC} kind=projection rank_deficient={}\n",
            self.rank_deficient
        )
        .into_bytes();
        {
            let mut w = csv::Writer::from_writer(&mut buf);
            w.write_record(["id", "modality", "x", "y"]).map_err(csv_err)?;
            for r in &self.rows {
                w.write_record([r.id.as_str(), r.tag, &fmt_f64(r.x), &fmt_f64(r.y)])
                    .map_err(csv_err)?;
            }
            w.flush().map_err(csv_err)?;
        }
        Ok(String::from_utf8(buf).expect("csv output is utf-8"))
    }
}

/// Stacks every original and virtual representation the plan produces for
/// `split` (id order) and projects them jointly.
pub fn export_projection_2d(
    params: &ModelParams,
    ds: &EmbeddingDataset,
    plan: &MissingnessPlan,
    split: Split,
) -> Result<ProjectionExport> {
    check_compatible(params, ds)?;
    let mut labels: Vec<(String, &'static str)> = Vec::new();
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for batch in split_batches(ds, plan, split, EVAL_BATCH, None)? {
        let out = forward_batch(params, &batch)?;
        for (record, bundle) in batch.records.iter().zip(&out.bundles) {
            let parts = [
                ("text", &bundle.x_t),
                ("virtual_text", &bundle.virtual_t),
                ("visual", &bundle.x_v),
                ("virtual_visual", &bundle.virtual_v),
            ];
            for (tag, m) in parts {
                if let Some(m) = m {
                    labels.push((record.id.clone(), tag));
                    rows.push(m.row(0).to_vec());
                }
            }
        }
    }
    if rows.len() < 3 {
        return Err(Error::Data(format!(
            "projection needs at least 3 representations, split {split} has {}",
            rows.len()
        )));
    }
    let proj = project_2d(&Matrix::from_rows(&rows))?;
    let rows = labels
        .into_iter()
        .enumerate()
        .map(|(i, (id, tag))| ProjectionRow {
            id,
            tag,
            x: proj.coords.get(i, 0),
            y: proj.coords.get(i, 1),
        })
        .collect();
    Ok(ProjectionExport {
        rows,
        rank_deficient: proj.rank_deficient,
    })
}

pub fn write_text(path: impl AsRef<Path>, text: &str) -> Result<()> {
    let path = path.as_ref();
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{build_missingness_plan, generate_synthetic, Modality, Setting, SyntheticConfig};
    use crate::model::Hyper;
    use crate::numkernel::Rng;

    #[test]
    fn perfect_predictions() {
        let y = [1.0, -2.0, 0.5, 0.0];
        assert_eq!(mean_absolute_error(&y, &y), Some(0.0));
        assert_eq!(binary_accuracy(&y, &y), Some(1.0));
    }

    #[test]
    fn sign_agreement_count() {
        assert_eq!(binary_accuracy(&[0.5, -0.2], &[1.0, 2.0]), Some(0.5));
    }

    #[test]
    fn zero_labels_are_excluded() {
        assert_eq!(binary_accuracy(&[1.0, 1.0], &[0.0, 1.0]), Some(1.0));
        assert_eq!(binary_accuracy(&[1.0], &[0.0]), None);
    }

    #[test]
    fn mae_is_translation_equivariant() {
        let p = [0.3, -1.2, 2.5];
        let y = [0.1, 0.4, -1.0];
        let shift = |v: &[f64]| v.iter().map(|x| x + 7.25).collect::<Vec<_>>();
        let a = mean_absolute_error(&p, &y).unwrap();
        let b = mean_absolute_error(&shift(&p), &shift(&y)).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn ttest_reference_values() {
        // Reference from scipy.stats.ttest_rel on differences [1, 2, 3, 4, 5].
        let a = [1.0, 2.0, 3.0, 4.0, 5.0];
        let b = [0.0; 5];
        let r = paired_ttest(&a, &b).unwrap();
        assert_eq!(r.df, 4);
        assert!((r.t - 4.242640687119285).abs() < 1e-12);
        assert!((r.p_two_tailed - 0.013235599563682695).abs() < 1e-12);
        assert_eq!(r.mean_diff, 3.0);
    }

    #[test]
    fn ttest_identical_and_swapped() {
        let a = [0.3, 0.1, 0.7];
        let r = paired_ttest(&a, &a).unwrap();
        assert_eq!((r.t, r.p_two_tailed), (0.0, 1.0));
        let b = [0.2, 0.4, 0.1];
        let ab = paired_ttest(&a, &b).unwrap();
        let ba = paired_ttest(&b, &a).unwrap();
        assert_eq!(ab.t, -ba.t);
        assert_eq!(ab.p_two_tailed, ba.p_two_tailed);
        assert!((0.0..=1.0).contains(&ab.p_two_tailed));
    }

    #[test]
    fn ttest_needs_two_pairs() {
        assert!(paired_ttest(&[1.0], &[0.0]).is_err());
        assert!(paired_ttest(&[1.0, 2.0], &[0.0]).is_err());
    }

    #[test]
    fn rank_one_projection() {
        let dir = [0.6, -0.8, 0.0];
        let rows: Vec<Vec<f64>> = (0..6).map(|i| dir.iter().map(|d| d * i as f64).collect()).collect();
        let p = project_2d(&Matrix::from_rows(&rows)).unwrap();
        assert!(p.rank_deficient);
        for i in 0..6 {
            assert_eq!(p.coords.get(i, 1), 0.0);
        }
        // Points along one line keep their spacing along the first axis.
        let step = p.coords.get(1, 0) - p.coords.get(0, 0);
        assert!((step.abs() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn collinear_points_stay_collinear() {
        let rows: Vec<[f64; 2]> = (0..5).map(|i| [i as f64, 2.0 * i as f64 + 1.0]).collect();
        let p = project_2d(&Matrix::from_rows(&rows)).unwrap();
        let (x0, y0) = (p.coords.get(0, 0), p.coords.get(0, 1));
        let (x1, y1) = (p.coords.get(4, 0), p.coords.get(4, 1));
        for i in 1..4 {
            let (x, y) = (p.coords.get(i, 0), p.coords.get(i, 1));
            let cross = (x1 - x0) * (y - y0) - (y1 - y0) * (x - x0);
            assert!(cross.abs() < 1e-9);
        }
    }

    #[test]
    fn projection_sign_convention() {
        let mut rng = Rng::new(5);
        let rows: Vec<Vec<f64>> = (0..7).map(|_| (0..3).map(|_| rng.standard_normal()).collect()).collect();
        let p = project_2d(&Matrix::from_rows(&rows)).unwrap();
        for c in 0..2 {
            let col: Vec<f64> = (0..3).map(|r| p.components.get(r, c)).collect();
            let lead = col.iter().copied().fold(0.0f64, |a, v| if v.abs() > a.abs() { v } else { a });
            assert!(lead > 0.0);
        }
        assert!(p.eigenvalues[0] >= p.eigenvalues[1]);
    }

    fn tiny_model() -> (ModelParams, EmbeddingDataset) {
        let ds = generate_synthetic(&SyntheticConfig {
            train: 20,
            valid: 4,
            test: 12,
            ..SyntheticConfig::default()
        })
        .unwrap();
        let params = ModelParams::init(ds.d, ds.task, Hyper::default(), 0.1, &mut Rng::new(1)).unwrap();
        (params, ds)
    }

    #[test]
    fn setting_a_test_samples_are_text_missing() {
        let (params, ds) = tiny_model();
        let plan = build_missingness_plan(&ds, Setting::A, Modality::Text, 0.5, 3).unwrap();
        let r = evaluate(&params, &ds, &plan, Split::Test).unwrap();
        assert_eq!(r.count, 12);
        assert!(r.modes.iter().all(|&m| m == FusionMode::MissingText));
        assert!(r.mae.unwrap() >= 0.0);
        assert!(r.acc.is_none());
    }

    #[test]
    fn evaluate_rejects_wrong_width() {
        let (_, ds) = tiny_model();
        let params = ModelParams::init(8, ds.task, Hyper::default(), 0.1, &mut Rng::new(1)).unwrap();
        let plan = crate::dataset::complete_plan(&ds);
        assert!(matches!(
            evaluate(&params, &ds, &plan, Split::Test),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn heatmap_shapes_range_and_duplicates() {
        let (params, ds) = tiny_model();
        let mut ids: Vec<String> = ds.records.iter().take(7).map(|r| r.id.clone()).collect();
        ids.push(ids[2].clone());
        let h = export_similarity_heatmap(&params, &ds, &ids).unwrap();
        for (_, m) in h.named() {
            assert_eq!(m.shape(), (8, 8));
            assert!(m.as_slice().iter().all(|v| (-1.0 - 1e-12..=1.0 + 1e-12).contains(v)));
            for j in 0..8 {
                assert_eq!(m.get(7, j), m.get(2, j));
                assert_eq!(m.get(j, 7), m.get(j, 2));
            }
        }
        assert!((h.text.get(2, 7) - h.text.get(2, 2)).abs() < 1e-15);
        let again = export_similarity_heatmap(&params, &ds, &ids).unwrap();
        assert_eq!(h, again);
        let csv = heatmap_csv("text", &h.ids, &h.text).unwrap();
        assert!(csv.starts_with(EXPORT_MAGIC));
        assert_eq!(csv.lines().count(), 10);
    }

    #[test]
    fn heatmap_unknown_id() {
        let (params, ds) = tiny_model();
        let ids = vec![ds.records[0].id.clone(), "nope".to_string()];
        assert!(matches!(
            export_similarity_heatmap(&params, &ds, &ids),
            Err(Error::UnknownId(_))
        ));
    }

    #[test]
    fn projection_export_tags() {
        let (params, ds) = tiny_model();
        let plan = build_missingness_plan(&ds, Setting::B, Modality::Text, 0.5, 3).unwrap();
        let e = export_projection_2d(&params, &ds, &plan, Split::Test).unwrap();
        let complete = (0..ds.records.len())
            .filter(|&i| ds.records[i].split == Split::Test && plan.present[i])
            .count();
        // Complete samples contribute four rows, text-missing ones two.
        assert_eq!(e.rows.len(), 4 * complete + 2 * (12 - complete));
        assert!(e.to_csv().unwrap().starts_with(EXPORT_MAGIC));
    }
}
