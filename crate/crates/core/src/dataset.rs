//! Embedding datasets, the line-oriented file format, synthetic generation,
//! missingness plans for Setting A/B and batching.
//!
//! File format: a header line
//! `#trml-embeddings v1 d=<d> task=<regression|classification>` followed by one
//! JSON object per line with `id`, `split`, `label`, `text`, `frames` and an
//! optional `frame_mask`.

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkernel::{dot, norm, seeded_gaussian, Matrix, Rng};

pub const HEADER_MAGIC: &str = "#trml-embeddings";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Valid, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.pad(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "valid" => Ok(Split::Valid),
            "test" => Ok(Split::Test),
            other => Err(Error::config(format!("unknown split {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Task {
    Regression,
    Classification { classes: usize },
}

impl Task {
    pub fn output_dim(self) -> usize {
        match self {
            Task::Regression => 1,
            Task::Classification { classes } => classes,
        }
    }

    pub fn is_regression(self) -> bool {
        matches!(self, Task::Regression)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampleRecord {
    pub id: String,
    pub split: Split,
    /// Sentiment score for regression, class index for classification.
    pub label: f64,
    pub text: Vec<f64>,
    /// `n × d`, one row per frame.
    pub frames: Matrix,
    pub frame_mask: Option<Vec<bool>>,
}

impl SampleRecord {
    pub fn present_frames(&self) -> usize {
        match &self.frame_mask {
            Some(mask) => mask.iter().filter(|&&m| m).count(),
            None => self.frames.rows(),
        }
    }

    pub fn frame_present(&self, i: usize) -> bool {
        self.frame_mask.as_ref().is_none_or(|m| m[i])
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingDataset {
    pub records: Vec<SampleRecord>,
    pub d: usize,
    pub task: Task,
}

impl EmbeddingDataset {
    /// Validates every record-level and dataset-level invariant.
    pub fn new(records: Vec<SampleRecord>, d: usize, task: Task) -> Result<Self> {
        let mut seen = HashSet::new();
        for r in &records {
            if !seen.insert(r.id.as_str()) {
                return Err(Error::DuplicateId(r.id.clone()));
            }
            validate_record(r, d, task)?;
        }
        let ds = Self { records, d, task };
        for split in [Split::Train, Split::Test] {
            if ds.split_len(split) == 0 {
                return Err(Error::Data(format!("split {split} is empty")));
            }
        }
        Ok(ds)
    }

    pub fn split_indices(&self, split: Split) -> Vec<usize> {
        self.records
            .iter()
            .enumerate()
            .filter(|(_, r)| r.split == split)
            .map(|(i, _)| i)
            .collect()
    }

    /// Indices of a split ordered by sample id.
    pub fn split_indices_by_id(&self, split: Split) -> Vec<usize> {
        let mut idx = self.split_indices(split);
        idx.sort_by(|&a, &b| self.records[a].id.cmp(&self.records[b].id));
        idx
    }

    pub fn split_len(&self, split: Split) -> usize {
        self.records.iter().filter(|r| r.split == split).count()
    }

    pub fn n_train(&self) -> usize {
        self.split_len(Split::Train)
    }

    pub fn n_test(&self) -> usize {
        self.split_len(Split::Test)
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.records.iter().position(|r| r.id == id)
    }
}

fn validate_record(r: &SampleRecord, d: usize, task: Task) -> Result<()> {
    let mismatch = |found| Error::DimensionMismatch {
        id: r.id.clone(),
        expected: d,
        found,
    };
    if r.text.len() != d {
        return Err(mismatch(r.text.len()));
    }
    if r.frames.cols() != d {
        return Err(mismatch(r.frames.cols()));
    }
    if r.frames.rows() == 0 {
        return Err(Error::Data(format!("record {}: no frames", r.id)));
    }
    if let Some(mask) = &r.frame_mask {
        if mask.len() != r.frames.rows() {
            return Err(Error::Data(format!(
                "record {}: frame_mask has {} entries for {} frames",
                r.id,
                mask.len(),
                r.frames.rows()
            )));
        }
    }
    let non_finite = |field| Error::NonFiniteValue {
        id: r.id.clone(),
        field,
    };
    if !r.label.is_finite() {
        return Err(non_finite("label"));
    }
    if r.text.iter().any(|v| !v.is_finite()) {
        return Err(non_finite("text"));
    }
    if !r.frames.is_finite() {
        return Err(non_finite("frames"));
    }
    if let Task::Classification { classes } = task {
        if r.label < 0.0 || r.label.fract() != 0.0 || r.label as usize >= classes {
            return Err(Error::Data(format!(
                "record {}: label {} outside classes 0..{classes}",
                r.id, r.label
            )));
        }
    }
    Ok(())
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRecord {
    id: String,
    split: String,
    label: f64,
    text: Vec<f64>,
    frames: Vec<Vec<f64>>,
    #[serde(default)]
    frame_mask: Option<Vec<u8>>,
}

struct Header {
    d: usize,
    task_name: String,
    classes: Option<usize>,
}

fn parse_header(line: &str) -> Result<Header> {
    let bad = |message: String| Error::Parse { line: 1, message };
    let mut parts = line.split_whitespace();
    if parts.next() != Some(HEADER_MAGIC) {
        return Err(bad(format!("missing {HEADER_MAGIC} header")));
    }
    if parts.next() != Some("v1") {
        return Err(bad("unsupported format version".into()));
    }
    let (mut d, mut task_name, mut classes) = (None, None, None);
    for kv in parts {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| bad(format!("malformed header field {kv:?}")))?;
        match k {
            "d" => d = Some(v.parse().map_err(|_| bad(format!("bad d {v:?}")))?),
            "task" => task_name = Some(v.to_owned()),
            "classes" => classes = Some(v.parse().map_err(|_| bad(format!("bad classes {v:?}")))?),
            other => return Err(bad(format!("unknown header field {other:?}"))),
        }
    }
    Ok(Header {
        d: d.ok_or_else(|| bad("header lacks d=".into()))?,
        task_name: task_name.ok_or_else(|| bad("header lacks task=".into()))?,
        classes,
    })
}

/// Parses the text form of a dataset file.
pub fn parse_dataset(reader: impl BufRead) -> Result<EmbeddingDataset> {
    let mut lines = reader.lines();
    let header = match lines.next() {
        Some(line) => parse_header(line.map_err(|e| Error::Parse {
            line: 1,
            message: e.to_string(),
        })?.trim())?,
        None => {
            return Err(Error::Parse {
                line: 1,
                message: "empty file".into(),
            })
        }
    };
    let d = header.d;
    let mut records = Vec::new();
    for (i, line) in lines.enumerate() {
        let lineno = i + 2;
        let line = line.map_err(|e| Error::Parse {
            line: lineno,
            message: e.to_string(),
        })?;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let raw: RawRecord = serde_json::from_str(line).map_err(|e| Error::Parse {
            line: lineno,
            message: e.to_string(),
        })?;
        let split = match raw.split.as_str() {
            "train" => Split::Train,
            "valid" => Split::Valid,
            "test" => Split::Test,
            _ => {
                return Err(Error::UnknownSplit {
                    line: lineno,
                    tag: raw.split,
                })
            }
        };
        let n = raw.frames.len();
        let mut data = Vec::with_capacity(n * d);
        for f in &raw.frames {
            if f.len() != d {
                return Err(Error::DimensionMismatch {
                    id: raw.id,
                    expected: d,
                    found: f.len(),
                });
            }
            data.extend_from_slice(f);
        }
        let frame_mask = match raw.frame_mask {
            None => None,
            Some(mask) => {
                if let Some(bad) = mask.iter().find(|&&m| m > 1) {
                    return Err(Error::Parse {
                        line: lineno,
                        message: format!("frame_mask entry {bad} is not 0/1"),
                    });
                }
                Some(mask.into_iter().map(|m| m == 1).collect())
            }
        };
        records.push(SampleRecord {
            id: raw.id,
            split,
            label: raw.label,
            text: raw.text,
            frames: Matrix::from_raw(n, d, data),
            frame_mask,
        });
    }
    let task = match header.task_name.as_str() {
        "regression" => Task::Regression,
        "classification" => {
            let classes = header.classes.unwrap_or_else(|| {
                records
                    .iter()
                    .map(|r| r.label.max(0.0) as usize + 1)
                    .max()
                    .unwrap_or(1)
            });
            Task::Classification { classes }
        }
        other => {
            return Err(Error::Parse {
                line: 1,
                message: format!("unknown task {other:?}"),
            })
        }
    };
    EmbeddingDataset::new(records, d, task)
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<EmbeddingDataset> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    parse_dataset(BufReader::new(file))
}

/// 17 significant digits, so every `f64` survives a text round trip.
pub(crate) fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

fn write_array(out: &mut String, values: &[f64]) {
    out.push('[');
    for (i, v) in values.iter().enumerate() {
        if i > 0 {
            out.push(',');
        }
        out.push_str(&fmt_f64(*v));
    }
    out.push(']');
}

pub fn write_dataset(ds: &EmbeddingDataset, mut w: impl Write) -> std::io::Result<()> {
    match ds.task {
        Task::Regression => writeln!(w, "{HEADER_MAGIC} v1 d={} task=regression", ds.d)?,
        Task::Classification { classes } => writeln!(
            w,
            "{HEADER_MAGIC} v1 d={} task=classification classes={classes}",
            ds.d
        )?,
    }
    for r in &ds.records {
        let mut line = String::new();
        line.push_str("{\"id\":");
        line.push_str(&serde_json::to_string(&r.id).expect("string serializes"));
        line.push_str(&format!(",\"split\":\"{}\",\"label\":", r.split));
        line.push_str(&fmt_f64(r.label));
        line.push_str(",\"text\":");
        write_array(&mut line, &r.text);
        line.push_str(",\"frames\":[");
        for f in 0..r.frames.rows() {
            if f > 0 {
                line.push(',');
            }
            write_array(&mut line, r.frames.row(f));
        }
        line.push(']');
        if let Some(mask) = &r.frame_mask {
            line.push_str(",\"frame_mask\":[");
            let bits: Vec<&str> = mask.iter().map(|&m| if m { "1" } else { "0" }).collect();
            line.push_str(&bits.join(","));
            line.push(']');
        }
        line.push('}');
        writeln!(w, "{line}")?;
    }
    Ok(())
}

pub fn save_dataset(ds: &EmbeddingDataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    write_dataset(ds, &mut w).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Regression,
    Classification,
}

/// Parameters of the synthetic latent-factor benchmark.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticConfig {
    pub d: usize,
    pub latent_k: usize,
    pub n_frames: usize,
    pub train: usize,
    pub valid: usize,
    pub test: usize,
    pub text_noise: f64,
    pub frame_noise: f64,
    pub task: TaskKind,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            d: 16,
            latent_k: 4,
            n_frames: 4,
            train: 2000,
            valid: 200,
            test: 500,
            text_noise: 0.1,
            frame_noise: 0.1,
            task: TaskKind::Regression,
            seed: 0,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        if self.latent_k < 1 || self.d < self.latent_k {
            return Err(Error::config(format!(
                "synthetic: need d >= latent_k >= 1 (d={}, latent_k={})",
                self.d, self.latent_k
            )));
        }
        if self.n_frames < 1 || self.train < 1 || self.test < 1 {
            return Err(Error::config("synthetic: n_frames, train and test must be >= 1"));
        }
        let ok = |x: f64| x.is_finite() && x >= 0.0;
        if !ok(self.text_noise) || !ok(self.frame_noise) {
            return Err(Error::config("synthetic: noise levels must be finite and >= 0"));
        }
        Ok(())
    }
}

/// Scale applied to the label weights so regression scores spread over
/// roughly ±1.5 before clipping.
const LABEL_SCALE: f64 = 1.5;
pub const LABEL_CLIP: f64 = 3.0;

/// Draws a dataset where text and frames are noisy views of a shared latent
/// `z ~ N(0, I_k)`: `text = normalize(A z + σ_t ε)`,
/// `frame_i = normalize(B z + σ_f η_i)`, label `w·z` clipped to ±3
/// (classification: 1 if `w·z ≥ 0` else 0).
///
/// Both views share one embedding space: `B = (A + G)/√2` with `A`, `G`
/// independent standard normal, so each column of `B` has correlation
/// `1/√2` with the matching column of `A`.
pub fn generate_synthetic(cfg: &SyntheticConfig) -> Result<EmbeddingDataset> {
    cfg.validate()?;
    let root = Rng::new(cfg.seed);
    let mut mix = root.split(1);
    let a = seeded_gaussian(&mut mix, cfg.d, cfg.latent_k, 0.0, 1.0);
    let b = a
        .add(&seeded_gaussian(&mut mix, cfg.d, cfg.latent_k, 0.0, 1.0))
        .scale(std::f64::consts::FRAC_1_SQRT_2);
    let w = seeded_gaussian(&mut mix, cfg.latent_k, 1, 0.0, LABEL_SCALE / (cfg.latent_k as f64).sqrt());

    let mut draws = root.split(2);
    let total = cfg.train + cfg.valid + cfg.test;
    let width = total.to_string().len();
    let mut records = Vec::with_capacity(total);
    for i in 0..total {
        let split = if i < cfg.train {
            Split::Train
        } else if i < cfg.train + cfg.valid {
            Split::Valid
        } else {
            Split::Test
        };
        let z = seeded_gaussian(&mut draws, cfg.latent_k, 1, 0.0, 1.0);
        let az = a.matmul(&z);
        let bz = b.matmul(&z);
        let text_noise = seeded_gaussian(&mut draws, cfg.d, 1, 0.0, cfg.text_noise);
        let text = normalized(az.add(&text_noise).as_slice());
        let mut frames = Vec::with_capacity(cfg.n_frames * cfg.d);
        for _ in 0..cfg.n_frames {
            let eta = seeded_gaussian(&mut draws, cfg.d, 1, 0.0, cfg.frame_noise);
            frames.extend(normalized(bz.add(&eta).as_slice()));
        }
        let score = dot(w.as_slice(), z.as_slice());
        let label = match cfg.task {
            TaskKind::Regression => score.clamp(-LABEL_CLIP, LABEL_CLIP),
            TaskKind::Classification => f64::from(u8::from(score >= 0.0)),
        };
        records.push(SampleRecord {
            id: format!("s{i:0width$}"),
            split,
            label,
            text,
            frames: Matrix::from_raw(cfg.n_frames, cfg.d, frames),
            frame_mask: None,
        });
    }
    let task = match cfg.task {
        TaskKind::Regression => Task::Regression,
        TaskKind::Classification => Task::Classification { classes: 2 },
    };
    EmbeddingDataset::new(records, cfg.d, task)
}

fn normalized(v: &[f64]) -> Vec<f64> {
    let n = norm(v);
    if n == 0.0 {
        return v.to_vec();
    }
    v.iter().map(|x| x / n).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Setting {
    /// Victim partially present in training, absent at validation and test.
    A,
    /// Victim present with the same proportion in every split.
    B,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Text,
    Visual,
}

/// How a sample's representation is assembled.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum FusionMode {
    /// Visual missing: `x_t + x̄_v`.
    MissingVisual,
    /// Text missing: `x̄_t + x_v`.
    MissingText,
    /// Both present: `x_t + x_v`.
    Complete,
}

impl FusionMode {
    pub fn tag(self) -> &'static str {
        match self {
            FusionMode::MissingVisual => "mv",
            FusionMode::MissingText => "mt",
            FusionMode::Complete => "c",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MissingnessPlan {
    pub setting: Setting,
    pub victim: Modality,
    /// Proportion of victim-modality data kept.
    pub p: f64,
    pub seed: u64,
    /// Victim presence flag per record, indexed like `dataset.records`.
    pub present: Vec<bool>,
}

impl MissingnessPlan {
    pub fn present_count(&self, ds: &EmbeddingDataset, split: Split) -> usize {
        ds.split_indices(split)
            .into_iter()
            .filter(|&i| self.present[i])
            .count()
    }

    /// Fusion mode of record `index`. A sample whose frame mask removes every
    /// frame counts as visual-missing.
    pub fn mode(&self, ds: &EmbeddingDataset, index: usize) -> Result<FusionMode> {
        let record = &ds.records[index];
        let frames_present = record.present_frames() > 0;
        let victim_present = self.present[index];
        match (self.victim, victim_present, frames_present) {
            (Modality::Text, false, false) => Err(Error::Data(format!(
                "record {}: text removed by the plan and every frame masked",
                record.id
            ))),
            (Modality::Text, false, true) => Ok(FusionMode::MissingText),
            (Modality::Visual, false, _) | (_, _, false) => Ok(FusionMode::MissingVisual),
            _ => Ok(FusionMode::Complete),
        }
    }
}

/// Exact-count victim selection: each split's ids (sorted) are shuffled by
/// `seed` and the first `round(p·|split|)` are kept. Setting A keeps none in
/// the validation and test splits.
pub fn build_missingness_plan(
    ds: &EmbeddingDataset,
    setting: Setting,
    victim: Modality,
    p: f64,
    seed: u64,
) -> Result<MissingnessPlan> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::config(format!("p must lie in [0, 1], got {p}")));
    }
    let root = Rng::new(seed);
    let mut present = vec![false; ds.records.len()];
    for (stream, split) in Split::ALL.into_iter().enumerate() {
        let mut idx = ds.split_indices_by_id(split);
        let keep = match (setting, split) {
            (Setting::A, Split::Valid | Split::Test) => 0,
            _ => (p * idx.len() as f64).round() as usize,
        };
        let mut rng = root.split(stream as u64 + 1);
        rng.shuffle(&mut idx);
        for &i in idx.iter().take(keep) {
            present[i] = true;
        }
    }
    Ok(MissingnessPlan {
        setting,
        victim,
        p,
        seed,
        present,
    })
}

/// Plan with every modality present.
pub fn complete_plan(ds: &EmbeddingDataset) -> MissingnessPlan {
    MissingnessPlan {
        setting: Setting::B,
        victim: Modality::Text,
        p: 1.0,
        seed: 0,
        present: vec![true; ds.records.len()],
    }
}

#[derive(Clone, Debug)]
pub struct Batch<'a> {
    pub indices: Vec<usize>,
    pub records: Vec<&'a SampleRecord>,
    pub modes: Vec<FusionMode>,
    pub labels: Vec<f64>,
}

impl Batch<'_> {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    /// `N × d` text embeddings; rows of text-missing samples are zero.
    pub fn text_matrix(&self, d: usize) -> Matrix {
        let mut m = Matrix::zeros(self.len(), d);
        for (i, (r, mode)) in self.records.iter().zip(&self.modes).enumerate() {
            if *mode != FusionMode::MissingText {
                m.row_mut(i).copy_from_slice(&r.text);
            }
        }
        m
    }
}

/// Batches over one split. With `shuffle_seed` the split order is shuffled,
/// otherwise samples come in id order.
pub fn split_batches<'a>(
    ds: &'a EmbeddingDataset,
    plan: &MissingnessPlan,
    split: Split,
    batch_size: usize,
    shuffle_seed: Option<u64>,
) -> Result<Vec<Batch<'a>>> {
    if batch_size == 0 {
        return Err(Error::config("batch_size must be >= 1"));
    }
    let mut order = ds.split_indices_by_id(split);
    if let Some(seed) = shuffle_seed {
        Rng::new(seed).shuffle(&mut order);
    }
    order
        .chunks(batch_size)
        .map(|chunk| {
            let modes = chunk
                .iter()
                .map(|&i| plan.mode(ds, i))
                .collect::<Result<Vec<_>>>()?;
            Ok(Batch {
                indices: chunk.to_vec(),
                records: chunk.iter().map(|&i| &ds.records[i]).collect(),
                modes,
                labels: chunk.iter().map(|&i| ds.records[i].label).collect(),
            })
        })
        .collect()
}

/// Shuffled training batches for one epoch. The last batch may be smaller.
pub fn iterate_batches<'a>(
    ds: &'a EmbeddingDataset,
    plan: &MissingnessPlan,
    batch_size: usize,
    epoch_seed: u64,
) -> Result<Vec<Batch<'a>>> {
    if batch_size < 2 {
        return Err(Error::config(format!(
            "batch_size must be >= 2 for the contrastive loss, got {batch_size}"
        )));
    }
    split_batches(ds, plan, Split::Train, batch_size, Some(epoch_seed))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg() -> SyntheticConfig {
        SyntheticConfig {
            train: 100,
            valid: 10,
            test: 40,
            ..SyntheticConfig::default()
        }
    }

    fn tiny_file(text: &str) -> String {
        format!(
            "#trml-embeddings v1 d=4 task=regression\n\
             {{\"id\":\"a\",\"split\":\"train\",\"label\":1.5,\"text\":[1,0,0,0],\"frames\":[[0,1,0,0],[0,0,1,0]]}}\n\
             {{\"id\":\"b\",\"split\":\"test\",\"label\":-0.5,\"text\":{text},\"frames\":[[0,1,0,0]],\"frame_mask\":[1]}}\n"
        )
    }

    #[test]
    fn parses_minimal_file() {
        let ds = parse_dataset(tiny_file("[0,0,0,1]").as_bytes()).unwrap();
        assert_eq!(ds.d, 4);
        assert_eq!(ds.n_train(), 1);
        assert_eq!(ds.n_test(), 1);
        assert_eq!(ds.records[0].frames.rows(), 2);
        assert_eq!(ds.records[1].frame_mask, Some(vec![true]));
    }

    #[test]
    fn dimension_mismatch_names_record() {
        let err = parse_dataset(tiny_file("[0,0,1]").as_bytes()).unwrap_err();
        match err {
            Error::DimensionMismatch { id, expected, found } => {
                assert_eq!((id.as_str(), expected, found), ("b", 4, 3));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn rejects_duplicates_unknown_split_and_missing_header() {
        let dup = tiny_file("[0,0,0,1]").replace("\"id\":\"b\"", "\"id\":\"a\"");
        assert!(matches!(parse_dataset(dup.as_bytes()), Err(Error::DuplicateId(_))));
        let split = tiny_file("[0,0,0,1]").replace("\"test\"", "\"holdout\"");
        assert!(matches!(parse_dataset(split.as_bytes()), Err(Error::UnknownSplit { .. })));
        let headless: String = tiny_file("[0,0,0,1]").lines().skip(1).collect::<Vec<_>>().join("\n");
        assert!(matches!(parse_dataset(headless.as_bytes()), Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn non_finite_values_are_rejected() {
        let rec = SampleRecord {
            id: "x".into(),
            split: Split::Train,
            label: 0.0,
            text: vec![f64::NAN, 0.0],
            frames: Matrix::zeros(1, 2),
            frame_mask: None,
        };
        let err = validate_record(&rec, 2, Task::Regression).unwrap_err();
        assert!(matches!(err, Error::NonFiniteValue { field: "text", .. }));
    }

    #[test]
    fn synthetic_round_trips_through_file() {
        let ds = generate_synthetic(&SyntheticConfig {
            train: 5,
            valid: 2,
            test: 3,
            ..SyntheticConfig::default()
        })
        .unwrap();
        let mut buf = Vec::new();
        write_dataset(&ds, &mut buf).unwrap();
        let back = parse_dataset(buf.as_slice()).unwrap();
        assert_eq!(back, ds);
    }

    #[test]
    fn synthetic_is_deterministic() {
        let a = generate_synthetic(&small_cfg()).unwrap();
        let b = generate_synthetic(&small_cfg()).unwrap();
        assert_eq!(a, b);
        let c = generate_synthetic(&SyntheticConfig { seed: 1, ..small_cfg() }).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn zero_noise_frames_are_identical() {
        let ds = generate_synthetic(&SyntheticConfig {
            text_noise: 0.0,
            frame_noise: 0.0,
            n_frames: 2,
            ..small_cfg()
        })
        .unwrap();
        for r in &ds.records {
            assert_eq!(r.frames.row(0), r.frames.row(1));
            let c0 = dot(&r.text, r.frames.row(0));
            let c1 = dot(&r.text, r.frames.row(1));
            assert_eq!(c0, c1);
        }
    }

    #[test]
    fn synthetic_labels_are_clipped() {
        let ds = generate_synthetic(&small_cfg()).unwrap();
        assert!(ds.records.iter().all(|r| r.label.abs() <= LABEL_CLIP));
    }

    #[test]
    fn synthetic_rejects_bad_sizes() {
        let bad = SyntheticConfig { latent_k: 20, ..small_cfg() };
        assert!(matches!(generate_synthetic(&bad), Err(Error::Config(_))));
        let bad = SyntheticConfig { train: 0, ..small_cfg() };
        assert!(matches!(generate_synthetic(&bad), Err(Error::Config(_))));
    }

    #[test]
    fn setting_a_counts() {
        let ds = generate_synthetic(&small_cfg()).unwrap();
        let plan = build_missingness_plan(&ds, Setting::A, Modality::Text, 0.1, 3).unwrap();
        assert_eq!(plan.present_count(&ds, Split::Train), 10);
        assert_eq!(plan.present_count(&ds, Split::Test), 0);
        assert_eq!(plan.present_count(&ds, Split::Valid), 0);
    }

    #[test]
    fn setting_b_counts() {
        let ds = generate_synthetic(&small_cfg()).unwrap();
        let plan = build_missingness_plan(&ds, Setting::B, Modality::Visual, 0.5, 3).unwrap();
        assert_eq!(plan.present_count(&ds, Split::Test), 20);
        assert_eq!(plan.present_count(&ds, Split::Train), 50);
        let full = build_missingness_plan(&ds, Setting::B, Modality::Visual, 1.0, 3).unwrap();
        assert!(full.present.iter().all(|&p| p));
    }

    #[test]
    fn plan_rejects_out_of_range_p() {
        let ds = generate_synthetic(&small_cfg()).unwrap();
        assert!(build_missingness_plan(&ds, Setting::B, Modality::Text, 1.5, 0).is_err());
    }

    #[test]
    fn batches_have_expected_sizes() {
        let ds = generate_synthetic(&SyntheticConfig {
            train: 10,
            ..small_cfg()
        })
        .unwrap();
        let plan = complete_plan(&ds);
        let batches = iterate_batches(&ds, &plan, 4, 0).unwrap();
        let sizes: Vec<usize> = batches.iter().map(Batch::len).collect();
        assert_eq!(sizes, vec![4, 4, 2]);
        assert!(iterate_batches(&ds, &plan, 1, 0).is_err());
    }

    #[test]
    fn same_epoch_seed_same_batches() {
        let ds = generate_synthetic(&small_cfg()).unwrap();
        let plan = build_missingness_plan(&ds, Setting::A, Modality::Text, 0.1, 3).unwrap();
        let a: Vec<Vec<usize>> = iterate_batches(&ds, &plan, 16, 5).unwrap().into_iter().map(|b| b.indices).collect();
        let b: Vec<Vec<usize>> = iterate_batches(&ds, &plan, 16, 5).unwrap().into_iter().map(|b| b.indices).collect();
        let c: Vec<Vec<usize>> = iterate_batches(&ds, &plan, 16, 6).unwrap().into_iter().map(|b| b.indices).collect();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn setting_a_test_batches_are_text_missing() {
        let ds = generate_synthetic(&small_cfg()).unwrap();
        let plan = build_missingness_plan(&ds, Setting::A, Modality::Text, 0.1, 3).unwrap();
        for b in split_batches(&ds, &plan, Split::Test, 8, None).unwrap() {
            assert!(b.modes.iter().all(|&m| m == FusionMode::MissingText));
        }
    }

    #[test]
    fn fully_masked_frames_route_to_missing_visual() {
        let mut ds = generate_synthetic(&small_cfg()).unwrap();
        let i = ds.split_indices(Split::Train)[0];
        ds.records[i].frame_mask = Some(vec![false; 4]);
        let plan = complete_plan(&ds);
        assert_eq!(plan.mode(&ds, i).unwrap(), FusionMode::MissingVisual);

        let mut text_plan = plan.clone();
        text_plan.victim = Modality::Text;
        text_plan.present[i] = false;
        assert!(text_plan.mode(&ds, i).is_err());
    }
}
