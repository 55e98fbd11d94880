//! Temporal frame encoder, virtual-modality generators, additive fusion and
//! prediction head, plus the checkpoint file format.

use std::fs;
use std::path::Path;

use crate::dataset::{fmt_f64, Batch, FusionMode, SampleRecord, Task};
use crate::error::{Error, Result};
use crate::numkernel::{Matrix, ParamStore, Rng, Tape, Var};

pub const RNN_W_IN: &str = "rnn.w_in";
pub const RNN_W_HH: &str = "rnn.w_hh";
pub const RNN_B: &str = "rnn.b";
pub const LOG_TAU: &str = "log_tau";

pub const TAU_MIN: f64 = 0.01;
pub const TAU_MAX: f64 = 1.0;

/// Prefix of one two-layer MLP (`w1`, `b1`, `w2`, `b2`).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mlp {
    /// Visual → virtual text.
    VisualToText,
    /// Text → virtual visual.
    TextToVisual,
    Head,
}

impl Mlp {
    pub fn prefix(self) -> &'static str {
        match self {
            Mlp::VisualToText => "v2t",
            Mlp::TextToVisual => "t2v",
            Mlp::Head => "head",
        }
    }

    pub fn param(self, part: &str) -> String {
        format!("{}.{part}", self.prefix())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Hyper {
    /// Weight of the text matching term, in (0, 1).
    pub lambda: f64,
    /// Weight of the semantic matching loss in the total objective.
    pub alpha: f64,
    pub tau_learnable: bool,
}

impl Default for Hyper {
    fn default() -> Self {
        Self {
            lambda: 0.1,
            alpha: 0.5,
            tau_learnable: true,
        }
    }
}

impl Hyper {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0 && self.lambda < 1.0) {
            return Err(Error::config(format!("lambda must lie in (0, 1), got {}", self.lambda)));
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::config(format!("alpha must be >= 0, got {}", self.alpha)));
        }
        Ok(())
    }
}

/// All trainable tensors plus the hyper-parameters that shape the objective.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub store: ParamStore,
    pub hyper: Hyper,
    pub task: Task,
    pub d: usize,
    pub head_hidden: usize,
}

pub fn default_head_hidden(d: usize) -> usize {
    d.div_ceil(2)
}

impl ModelParams {
    /// Weights uniform in `±1/√fan_in`, zero biases, `τ = tau_init`.
    pub fn init(d: usize, task: Task, hyper: Hyper, tau_init: f64, rng: &mut Rng) -> Result<Self> {
        hyper.validate()?;
        if !(TAU_MIN..=TAU_MAX).contains(&tau_init) {
            return Err(Error::config(format!(
                "tau must lie in [{TAU_MIN}, {TAU_MAX}], got {tau_init}"
            )));
        }
        let mut params = Self::zeros(d, task, hyper);
        let names: Vec<String> = params.store.names().map(str::to_owned).collect();
        for name in names {
            let value = params.store.value_mut(&name).expect("listed");
            let is_weight = name.rsplit('.').next().is_some_and(|p| p.starts_with('w'));
            if is_weight {
                let bound = 1.0 / (value.rows() as f64).sqrt();
                for v in value.as_mut_slice() {
                    *v = rng.uniform(-bound, bound);
                }
            }
        }
        params
            .store
            .set_value(LOG_TAU, Matrix::scalar(tau_init.ln()))?;
        Ok(params)
    }

    /// Every tensor zero, `τ = 1`.
    pub fn zeros(d: usize, task: Task, hyper: Hyper) -> Self {
        let head_hidden = default_head_hidden(d);
        let mut store = ParamStore::new();
        store.insert(RNN_W_IN, Matrix::zeros(d, d));
        store.insert(RNN_W_HH, Matrix::zeros(d, d));
        store.insert(RNN_B, Matrix::zeros(1, d));
        for g in [Mlp::VisualToText, Mlp::TextToVisual] {
            store.insert(g.param("w1"), Matrix::zeros(d, d));
            store.insert(g.param("b1"), Matrix::zeros(1, d));
            store.insert(g.param("w2"), Matrix::zeros(d, d));
            store.insert(g.param("b2"), Matrix::zeros(1, d));
        }
        let out = task.output_dim();
        store.insert(Mlp::Head.param("w1"), Matrix::zeros(d, head_hidden));
        store.insert(Mlp::Head.param("b1"), Matrix::zeros(1, head_hidden));
        store.insert(Mlp::Head.param("w2"), Matrix::zeros(head_hidden, out));
        store.insert(Mlp::Head.param("b2"), Matrix::zeros(1, out));
        store.insert(LOG_TAU, Matrix::scalar(0.0));
        Self {
            store,
            hyper,
            task,
            d,
            head_hidden,
        }
    }

    pub fn set(&mut self, name: &str, value: Matrix) -> Result<()> {
        self.store.set_value(name, value)
    }

    /// `exp(log_tau)` clamped to `[0.01, 1]`.
    pub fn tau(&self) -> f64 {
        let log_tau = self.store.value(LOG_TAU).expect("log_tau").get(0, 0);
        log_tau.exp().clamp(TAU_MIN, TAU_MAX)
    }

    /// Temperature on the tape. Frozen temperatures enter as constants so
    /// `log_tau` gets no gradient.
    pub fn tau_var(&self, tape: &mut Tape<'_>) -> Var {
        if self.hyper.tau_learnable {
            let log_tau = tape.param(LOG_TAU);
            let tau = tape.exp(log_tau);
            tape.clamp(tau, TAU_MIN, TAU_MAX)
        } else {
            tape.constant(Matrix::scalar(self.tau()))
        }
    }

    fn check_width(&self, m: &Matrix, what: &str) -> Result<()> {
        if m.cols() != self.d {
            return Err(Error::Model(format!(
                "{what} has width {}, model expects {}",
                m.cols(),
                self.d
            )));
        }
        Ok(())
    }
}

/// Elman RNN over groups of equal-length sequences. `steps[s]` holds the
/// `s`-th present frame of every sequence in the group (`K × d`).
pub(crate) fn rnn_on_tape(tape: &mut Tape<'_>, steps: &[Matrix]) -> Var {
    let w_in = tape.param(RNN_W_IN);
    let w_hh = tape.param(RNN_W_HH);
    let b = tape.param(RNN_B);
    let mut h: Option<Var> = None;
    for x in steps {
        let x = tape.constant(x.clone());
        let mut pre = tape.matmul(x, w_in);
        if let Some(prev) = h {
            let rec = tape.matmul(prev, w_hh);
            pre = tape.add(pre, rec);
        }
        let pre = tape.add_bias(pre, b);
        h = Some(tape.tanh(pre));
    }
    h.expect("at least one step")
}

/// `ReLU(x·W1 + b1)·W2 + b2` with the parameters of `mlp`.
pub(crate) fn mlp_on_tape(tape: &mut Tape<'_>, mlp: Mlp, x: Var) -> Var {
    let w1 = tape.param(&mlp.param("w1"));
    let b1 = tape.param(&mlp.param("b1"));
    let w2 = tape.param(&mlp.param("w2"));
    let b2 = tape.param(&mlp.param("b2"));
    let h = tape.matmul(x, w1);
    let h = tape.add_bias(h, b1);
    let h = tape.relu(h);
    let o = tape.matmul(h, w2);
    tape.add_bias(o, b2)
}

fn present_frame_rows(frames: &Matrix, mask: Option<&[bool]>) -> Vec<usize> {
    (0..frames.rows())
        .filter(|&i| mask.is_none_or(|m| m[i]))
        .collect()
}

/// Final hidden state of the Elman encoder over the unmasked frames.
pub fn temporal_encode(params: &ModelParams, frames: &Matrix, mask: Option<&[bool]>) -> Result<Matrix> {
    params.check_width(frames, "frames")?;
    if let Some(m) = mask {
        if m.len() != frames.rows() {
            return Err(Error::Model("frame mask length differs from frame count".into()));
        }
    }
    let rows = present_frame_rows(frames, mask);
    if rows.is_empty() {
        return Err(Error::Model(
            "temporal_encode: no present frames (sample belongs in mode mv)".into(),
        ));
    }
    let steps: Vec<Matrix> = rows.iter().map(|&r| frames.select_rows(&[r])).collect();
    let mut tape = Tape::new(&params.store);
    let h = rnn_on_tape(&mut tape, &steps);
    Ok(tape.value(h).clone())
}

fn run_mlp(params: &ModelParams, mlp: Mlp, x: &Matrix) -> Result<Matrix> {
    params.check_width(x, "input")?;
    let mut tape = Tape::new(&params.store);
    let xv = tape.constant(x.clone());
    let out = mlp_on_tape(&mut tape, mlp, xv);
    Ok(tape.value(out).clone())
}

/// Virtual text `x̄_t` from the visual representation.
pub fn generate_virtual_text(params: &ModelParams, x_v: &Matrix) -> Result<Matrix> {
    run_mlp(params, Mlp::VisualToText, x_v)
}

/// Virtual visual `x̄_v` from the text representation.
pub fn generate_virtual_visual(params: &ModelParams, x_t: &Matrix) -> Result<Matrix> {
    run_mlp(params, Mlp::TextToVisual, x_t)
}

/// Task output: one score for regression, class logits otherwise.
pub fn predict(params: &ModelParams, x: &Matrix) -> Result<Matrix> {
    run_mlp(params, Mlp::Head, x)
}

/// Representations of one sample. Which fields are filled depends on `mode`.
#[derive(Clone, Debug, PartialEq)]
pub struct ModalityBundle {
    pub x_t: Option<Matrix>,
    pub x_v: Option<Matrix>,
    pub virtual_t: Option<Matrix>,
    pub virtual_v: Option<Matrix>,
    pub mode: FusionMode,
}

/// Additive fusion: `x_t + x_v` (complete), `x_t + x̄_v` (visual missing),
/// `x̄_t + x_v` (text missing).
pub fn fuse(bundle: &ModalityBundle) -> Result<Matrix> {
    let need = |m: &Option<Matrix>, name: &str| {
        m.clone().ok_or_else(|| {
            Error::Model(format!(
                "mode {} requires {name}, which is absent",
                bundle.mode.tag()
            ))
        })
    };
    let (a, b) = match bundle.mode {
        FusionMode::Complete => (need(&bundle.x_t, "x_t")?, need(&bundle.x_v, "x_v")?),
        FusionMode::MissingVisual => (need(&bundle.x_t, "x_t")?, need(&bundle.virtual_v, "virtual x_v")?),
        FusionMode::MissingText => (need(&bundle.virtual_t, "virtual x_t")?, need(&bundle.x_v, "x_v")?),
    };
    if a.shape() != b.shape() {
        return Err(Error::Model("fusion operands differ in shape".into()));
    }
    Ok(a.add(&b))
}

/// Tape handles for one batch forward pass.
///
/// Text-side rows (`x_t`, `x̄_v`) follow `text_rows`; visual-side rows
/// (`x_v`, `x̄_t`) follow `visual_rows`. Both list batch positions.
pub struct ForwardVars {
    pub n: usize,
    pub text_rows: Vec<usize>,
    pub visual_rows: Vec<usize>,
    pub x_t: Option<Var>,
    pub virtual_v: Option<Var>,
    pub x_v: Option<Var>,
    pub virtual_t: Option<Var>,
    pub fused: Var,
    pub outputs: Var,
}

impl ForwardVars {
    /// Positions (within `text_rows`, within `visual_rows`) of complete samples.
    pub fn complete_positions(&self, modes: &[FusionMode]) -> (Vec<usize>, Vec<usize>) {
        let mut t = Vec::new();
        let mut v = Vec::new();
        for (ti, &i) in self.text_rows.iter().enumerate() {
            if modes[i] == FusionMode::Complete {
                t.push(ti);
            }
        }
        for (vi, &i) in self.visual_rows.iter().enumerate() {
            if modes[i] == FusionMode::Complete {
                v.push(vi);
            }
        }
        (t, v)
    }
}

fn encode_visual_rows(
    tape: &mut Tape<'_>,
    records: &[&SampleRecord],
    visual_rows: &[usize],
) -> Var {
    // Group by sequence length so each group runs as one batched recurrence.
    let mut groups: Vec<(usize, Vec<usize>)> = Vec::new();
    for (pos, &i) in visual_rows.iter().enumerate() {
        let len = records[i].present_frames();
        match groups.iter_mut().find(|(l, _)| *l == len) {
            Some((_, members)) => members.push(pos),
            None => groups.push((len, vec![pos])),
        }
    }
    let mut parts = Vec::with_capacity(groups.len());
    let mut order = Vec::with_capacity(visual_rows.len());
    for (len, members) in &groups {
        let frame_rows: Vec<Vec<usize>> = members
            .iter()
            .map(|&pos| {
                let r = records[visual_rows[pos]];
                present_frame_rows(&r.frames, r.frame_mask.as_deref())
            })
            .collect();
        let steps: Vec<Matrix> = (0..*len)
            .map(|s| {
                let rows: Vec<&[f64]> = members
                    .iter()
                    .zip(&frame_rows)
                    .map(|(&pos, fr)| records[visual_rows[pos]].frames.row(fr[s]))
                    .collect();
                Matrix::from_rows(&rows)
            })
            .collect();
        parts.push(rnn_on_tape(tape, &steps));
        order.extend(members.iter().copied());
    }
    let stacked = if parts.len() == 1 {
        parts[0]
    } else {
        tape.concat_rows(&parts)
    };
    if order.iter().enumerate().all(|(k, &p)| k == p) {
        stacked
    } else {
        let mut inverse = vec![0; order.len()];
        for (k, &p) in order.iter().enumerate() {
            inverse[p] = k;
        }
        tape.select_rows(stacked, &inverse)
    }
}

/// Records the whole forward pass of a batch on `tape`.
pub fn forward_on_tape(tape: &mut Tape<'_>, params: &ModelParams, batch: &Batch<'_>) -> Result<ForwardVars> {
    let n = batch.len();
    if n == 0 {
        return Err(Error::Model("empty batch".into()));
    }
    let d = params.d;
    let mut text_rows = Vec::new();
    let mut visual_rows = Vec::new();
    for (i, (&mode, r)) in batch.modes.iter().zip(&batch.records).enumerate() {
        if r.text.len() != d || r.frames.cols() != d {
            return Err(Error::DimensionMismatch {
                id: r.id.clone(),
                expected: d,
                found: if r.text.len() != d { r.text.len() } else { r.frames.cols() },
            });
        }
        if mode != FusionMode::MissingText {
            text_rows.push(i);
        }
        if mode != FusionMode::MissingVisual {
            if r.present_frames() == 0 {
                return Err(Error::Model(format!(
                    "record {}: mode {} needs frames but all are masked",
                    r.id,
                    mode.tag()
                )));
            }
            visual_rows.push(i);
        }
    }

    let (x_t, virtual_v) = if text_rows.is_empty() {
        (None, None)
    } else {
        let rows: Vec<&[f64]> = text_rows.iter().map(|&i| batch.records[i].text.as_slice()).collect();
        let x_t = tape.constant(Matrix::from_rows(&rows));
        let virt = mlp_on_tape(tape, Mlp::TextToVisual, x_t);
        (Some(x_t), Some(virt))
    };
    let (x_v, virtual_t) = if visual_rows.is_empty() {
        (None, None)
    } else {
        let x_v = encode_visual_rows(tape, &batch.records, &visual_rows);
        let virt = mlp_on_tape(tape, Mlp::VisualToText, x_v);
        (Some(x_v), Some(virt))
    };

    // Pools: text side = [x_t ; x̄_t], visual side = [x_v ; x̄_v].
    let text_pool = pool(tape, x_t, virtual_t);
    let visual_pool = pool(tape, x_v, virtual_v);
    let n_text = text_rows.len();
    let n_vis = visual_rows.len();
    let text_pos = |i: usize| text_rows.iter().position(|&r| r == i);
    let vis_pos = |i: usize| visual_rows.iter().position(|&r| r == i);
    let mut pick_text = Vec::with_capacity(n);
    let mut pick_visual = Vec::with_capacity(n);
    for (i, &mode) in batch.modes.iter().enumerate() {
        match mode {
            FusionMode::Complete => {
                pick_text.push(text_pos(i).expect("text row"));
                pick_visual.push(vis_pos(i).expect("visual row"));
            }
            FusionMode::MissingVisual => {
                pick_text.push(text_pos(i).expect("text row"));
                // x̄_v sits after x_v in the visual pool.
                pick_visual.push(n_vis + text_pos(i).expect("text row"));
            }
            FusionMode::MissingText => {
                // x̄_t sits after x_t in the text pool.
                pick_text.push(n_text + vis_pos(i).expect("visual row"));
                pick_visual.push(vis_pos(i).expect("visual row"));
            }
        }
    }
    let text_side = tape.select_rows(text_pool, &pick_text);
    let visual_side = tape.select_rows(visual_pool, &pick_visual);
    let fused = tape.add(text_side, visual_side);
    let outputs = mlp_on_tape(tape, Mlp::Head, fused);

    Ok(ForwardVars {
        n,
        text_rows,
        visual_rows,
        x_t,
        virtual_v,
        x_v,
        virtual_t,
        fused,
        outputs,
    })
}

fn pool(tape: &mut Tape<'_>, first: Option<Var>, second: Option<Var>) -> Var {
    match (first, second) {
        (Some(a), Some(b)) => tape.concat_rows(&[a, b]),
        (Some(a), None) | (None, Some(a)) => a,
        (None, None) => unreachable!("every sample has at least one modality"),
    }
}

/// Values of one batch forward pass.
#[derive(Clone, Debug)]
pub struct BatchForward {
    pub bundles: Vec<ModalityBundle>,
    /// `N × d`
    pub fused: Matrix,
    /// `N × out`
    pub outputs: Matrix,
}

pub fn forward_batch(params: &ModelParams, batch: &Batch<'_>) -> Result<BatchForward> {
    let mut tape = Tape::new(&params.store);
    let vars = forward_on_tape(&mut tape, params, batch)?;
    if let Some(name) = tape.first_non_finite() {
        return Err(Error::NonFinite {
            tensor: name.to_owned(),
        });
    }
    let row = |v: Option<Var>, k: usize| v.map(|v| tape.value(v).select_rows(&[k]));
    let mut bundles: Vec<ModalityBundle> = batch
        .modes
        .iter()
        .map(|&mode| ModalityBundle {
            x_t: None,
            x_v: None,
            virtual_t: None,
            virtual_v: None,
            mode,
        })
        .collect();
    for (k, &i) in vars.text_rows.iter().enumerate() {
        bundles[i].x_t = row(vars.x_t, k);
        bundles[i].virtual_v = row(vars.virtual_v, k);
    }
    for (k, &i) in vars.visual_rows.iter().enumerate() {
        bundles[i].x_v = row(vars.x_v, k);
        bundles[i].virtual_t = row(vars.virtual_t, k);
    }
    Ok(BatchForward {
        bundles,
        fused: tape.value(vars.fused).clone(),
        outputs: tape.value(vars.outputs).clone(),
    })
}

pub const CHECKPOINT_MAGIC: &str = "#trml-checkpoint v1";

/// Trained parameters plus the configuration that produced them.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams,
    /// Resolved configuration, one line per entry.
    pub config_echo: Vec<String>,
}

impl Checkpoint {
    /// Keeps parameter values only; optimizer state is not checkpointed.
    pub fn new(params: ModelParams, config_echo: Vec<String>) -> Self {
        let params = ModelParams {
            store: params.store.snapshot(),
            ..params
        };
        Self { params, config_echo }
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str(CHECKPOINT_MAGIC);
        out.push('\n');
        for (name, value) in self.params.store.iter() {
            out.push_str(&format!("{name} {} {}", value.rows(), value.cols()));
            for v in value.as_slice() {
                out.push(' ');
                out.push_str(&fmt_f64(*v));
            }
            out.push('\n');
        }
        let p = &self.params;
        let task = match p.task {
            Task::Regression => "regression".to_string(),
            Task::Classification { classes } => format!("classification:{classes}"),
        };
        out.push_str(&format!(
            "#model task={task} lambda={} alpha={} tau_learnable={}\n",
            fmt_f64(p.hyper.lambda),
            fmt_f64(p.hyper.alpha),
            p.hyper.tau_learnable
        ));
        for line in &self.config_echo {
            out.push_str("#config ");
            out.push_str(line);
            out.push('\n');
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let bad = |line: usize, message: String| Error::Parse { line, message };
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, l)) if l.trim() == CHECKPOINT_MAGIC => {}
            _ => return Err(bad(1, format!("missing {CHECKPOINT_MAGIC:?} header"))),
        }
        let mut store = ParamStore::new();
        let mut meta: Option<(Task, Hyper)> = None;
        let mut config_echo = Vec::new();
        for (i, line) in lines {
            let lineno = i + 1;
            if let Some(rest) = line.strip_prefix("#config ") {
                config_echo.push(rest.to_owned());
                continue;
            }
            if let Some(rest) = line.strip_prefix("#model ") {
                meta = Some(parse_model_meta(rest).map_err(|m| bad(lineno, m))?);
                continue;
            }
            if line.starts_with('#') || line.trim().is_empty() {
                continue;
            }
            let mut fields = line.split_whitespace();
            let name = fields.next().ok_or_else(|| bad(lineno, "empty parameter line".into()))?;
            let dims: Vec<usize> = fields
                .by_ref()
                .take(2)
                .map(|f| f.parse().map_err(|_| bad(lineno, format!("bad dimension {f:?}"))))
                .collect::<Result<_>>()?;
            if dims.len() != 2 {
                return Err(bad(lineno, "parameter line lacks dimensions".into()));
            }
            let values: Vec<f64> = fields
                .map(|f| f.parse().map_err(|_| bad(lineno, format!("bad value {f:?}"))))
                .collect::<Result<_>>()?;
            let m = Matrix::new(dims[0], dims[1], values).map_err(|e| bad(lineno, e.to_string()))?;
            store.insert(name, m);
        }
        let (task, hyper) = meta.ok_or_else(|| bad(0, "checkpoint lacks #model line".into()))?;
        let w_in = store
            .value(RNN_W_IN)
            .ok_or_else(|| bad(0, format!("checkpoint lacks {RNN_W_IN}")))?;
        let d = w_in.rows();
        let head_hidden = store
            .value("head.w1")
            .ok_or_else(|| bad(0, "checkpoint lacks head.w1".into()))?
            .cols();
        let template = ModelParams::zeros(d, task, hyper);
        let mut params = ModelParams {
            store: ParamStore::new(),
            hyper,
            task,
            d,
            head_hidden,
        };
        for name in template.store.names() {
            let value = store
                .value(name)
                .ok_or_else(|| bad(0, format!("checkpoint lacks {name}")))?;
            params.store.insert(name, value.clone());
        }
        if params.store.len() != store.len() {
            return Err(bad(0, "checkpoint has unexpected parameters".into()));
        }
        let out = task.output_dim();
        let expect = [
            (RNN_W_HH, (d, d)),
            ("head.w2", (head_hidden, out)),
            ("head.b2", (1, out)),
            (LOG_TAU, (1, 1)),
        ];
        for (name, shape) in expect {
            if params.store.value(name).map(Matrix::shape) != Some(shape) {
                return Err(bad(0, format!("parameter {name} has the wrong shape")));
            }
        }
        Ok(Self { params, config_echo })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }
}

fn parse_model_meta(rest: &str) -> std::result::Result<(Task, Hyper), String> {
    let mut task = None;
    let mut hyper = Hyper::default();
    for kv in rest.split_whitespace() {
        let (k, v) = kv.split_once('=').ok_or_else(|| format!("malformed {kv:?}"))?;
        let num = |v: &str| v.parse::<f64>().map_err(|_| format!("bad number {v:?}"));
        match k {
            "task" => {
                task = Some(match v.split_once(':') {
                    None if v == "regression" => Task::Regression,
                    Some(("classification", c)) => Task::Classification {
                        classes: c.parse().map_err(|_| format!("bad class count {c:?}"))?,
                    },
                    _ => return Err(format!("unknown task {v:?}")),
                })
            }
            "lambda" => hyper.lambda = num(v)?,
            "alpha" => hyper.alpha = num(v)?,
            "tau_learnable" => {
                hyper.tau_learnable = v.parse().map_err(|_| format!("bad flag {v:?}"))?
            }
            other => return Err(format!("unknown model field {other:?}")),
        }
    }
    Ok((task.ok_or("missing task")?, hyper))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkernel::Matrix;

    fn zero_model(d: usize) -> ModelParams {
        ModelParams::zeros(d, Task::Regression, Hyper::default())
    }

    fn identity_generators(d: usize) -> ModelParams {
        let mut p = zero_model(d);
        for g in [Mlp::VisualToText, Mlp::TextToVisual] {
            p.set(&g.param("w1"), Matrix::identity(d)).unwrap();
            p.set(&g.param("w2"), Matrix::identity(d)).unwrap();
        }
        p
    }

    #[test]
    fn zero_rnn_gives_zero_state() {
        let p = zero_model(3);
        let frames = Matrix::from_rows(&[[1.0, 2.0, 3.0], [-1.0, 0.5, 0.0]]);
        assert_eq!(temporal_encode(&p, &frames, None).unwrap(), Matrix::zeros(1, 3));
    }

    #[test]
    fn identity_input_weights_give_tanh_of_frame() {
        let mut p = zero_model(3);
        p.set(RNN_W_IN, Matrix::identity(3)).unwrap();
        let f = [0.3, -1.2, 2.0];
        let out = temporal_encode(&p, &Matrix::from_rows(&[f]), None).unwrap();
        for (o, x) in out.as_slice().iter().zip(f) {
            assert_eq!(*o, x.tanh());
        }
    }

    #[test]
    fn masked_frames_are_skipped() {
        let mut p = zero_model(2);
        p.set(RNN_W_IN, Matrix::from_rows(&[[0.5, -0.3], [0.2, 0.9]])).unwrap();
        p.set(RNN_B, Matrix::from_rows(&[[0.1, -0.1]])).unwrap();
        let frames = Matrix::from_rows(&[[1.0, 2.0], [3.0, -4.0], [0.5, 0.5]]);
        let masked = temporal_encode(&p, &frames, Some(&[true, false, false])).unwrap();
        let single = temporal_encode(&p, &frames.select_rows(&[0]), None).unwrap();
        assert_eq!(masked, single);
        assert!(temporal_encode(&p, &frames, Some(&[false, false, false])).is_err());
    }

    #[test]
    fn generators_clamp_with_relu() {
        let p = identity_generators(2);
        let t = generate_virtual_text(&p, &Matrix::row_vector(&[0.5, -0.5])).unwrap();
        assert_eq!(t.as_slice(), &[0.5, 0.0]);
        let v = generate_virtual_visual(&p, &Matrix::row_vector(&[1.0, -1.0])).unwrap();
        assert_eq!(v.as_slice(), &[1.0, 0.0]);
    }

    #[test]
    fn zero_generators_give_zero() {
        let p = zero_model(4);
        let x = Matrix::row_vector(&[1.0, -2.0, 3.0, 0.5]);
        assert_eq!(generate_virtual_text(&p, &x).unwrap(), Matrix::zeros(1, 4));
        assert_eq!(generate_virtual_visual(&p, &x).unwrap(), Matrix::zeros(1, 4));
    }

    #[test]
    fn generators_are_nonlinear() {
        let mut rng = Rng::new(5);
        let mut p = ModelParams::init(4, Task::Regression, Hyper::default(), 0.1, &mut rng).unwrap();
        for part in ["b1", "b2"] {
            let b = crate::numkernel::seeded_gaussian(&mut rng, 1, 4, 0.0, 1.0);
            p.set(&Mlp::VisualToText.param(part), b).unwrap();
        }
        let x = Matrix::row_vector(&[0.4, -0.1, 0.7, -0.9]);
        let y1 = generate_virtual_text(&p, &x).unwrap();
        let y2 = generate_virtual_text(&p, &x.scale(2.0)).unwrap();
        assert!(y2.max_abs_diff(&y1.scale(2.0)) > 1e-6);
    }

    #[test]
    fn generators_share_no_parameters() {
        let mut p = ModelParams::init(4, Task::Regression, Hyper::default(), 0.1, &mut Rng::new(5)).unwrap();
        let x = Matrix::row_vector(&[0.4, -0.1, 0.7, -0.9]);
        let before = generate_virtual_text(&p, &x).unwrap();
        for part in ["w1", "b1", "w2", "b2"] {
            let name = Mlp::TextToVisual.param(part);
            let shifted = p.store.value(&name).unwrap().map(|v| v + 0.37);
            p.set(&name, shifted).unwrap();
        }
        assert_eq!(generate_virtual_text(&p, &x).unwrap(), before);
    }

    #[test]
    fn fuse_modes() {
        let v = |xs: &[f64]| Some(Matrix::row_vector(xs));
        let c = ModalityBundle {
            x_t: v(&[1.0, 0.0]),
            x_v: v(&[0.0, 1.0]),
            virtual_t: None,
            virtual_v: None,
            mode: FusionMode::Complete,
        };
        assert_eq!(fuse(&c).unwrap().as_slice(), &[1.0, 1.0]);
        let mv = ModalityBundle {
            x_t: v(&[1.0, 0.0]),
            x_v: None,
            virtual_t: None,
            virtual_v: v(&[0.5, 0.5]),
            mode: FusionMode::MissingVisual,
        };
        assert_eq!(fuse(&mv).unwrap().as_slice(), &[1.5, 0.5]);
        let mt = ModalityBundle {
            x_t: None,
            x_v: v(&[0.0, 1.0]),
            virtual_t: v(&[0.0, 0.0]),
            virtual_v: None,
            mode: FusionMode::MissingText,
        };
        assert_eq!(fuse(&mt).unwrap().as_slice(), &[0.0, 1.0]);
        let broken = ModalityBundle { x_v: None, ..mt };
        assert!(fuse(&broken).is_err());
    }

    #[test]
    fn predict_shapes_and_identity_head() {
        let p = zero_model(4);
        assert_eq!(predict(&p, &Matrix::row_vector(&[1.0; 4])).unwrap(), Matrix::zeros(1, 1));
        let cls = ModelParams::zeros(4, Task::Classification { classes: 3 }, Hyper::default());
        assert_eq!(predict(&cls, &Matrix::row_vector(&[1.0; 4])).unwrap().shape(), (1, 3));

        let mut p = ModelParams::zeros(4, Task::Regression, Hyper::default());
        p.head_hidden = 4;
        p.store.insert("head.w1", Matrix::identity(4));
        p.store.insert("head.b1", Matrix::zeros(1, 4));
        let mut selector = Matrix::zeros(4, 1);
        selector.set(0, 0, 1.0);
        p.store.insert("head.w2", selector);
        let y = predict(&p, &Matrix::row_vector(&[2.0, -1.0, 0.5, 3.0])).unwrap();
        assert_eq!(y.get(0, 0), 2.0);
    }

    #[test]
    fn tau_is_clamped() {
        let mut p = zero_model(2);
        p.set(LOG_TAU, Matrix::scalar(10.0)).unwrap();
        assert_eq!(p.tau(), TAU_MAX);
        p.set(LOG_TAU, Matrix::scalar(-10.0)).unwrap();
        assert_eq!(p.tau(), TAU_MIN);
    }

    #[test]
    fn init_rejects_bad_hyper() {
        let bad = Hyper { lambda: 1.0, ..Hyper::default() };
        assert!(ModelParams::init(4, Task::Regression, bad, 0.1, &mut Rng::new(0)).is_err());
        assert!(ModelParams::init(4, Task::Regression, Hyper::default(), 2.0, &mut Rng::new(0)).is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let p = ModelParams::init(
            5,
            Task::Classification { classes: 3 },
            Hyper { lambda: 0.3, alpha: 0.25, tau_learnable: false },
            0.2,
            &mut Rng::new(11),
        )
        .unwrap();
        let ck = Checkpoint::new(p, vec!["seed = 3".into()]);
        let back = Checkpoint::parse(&ck.to_text()).unwrap();
        assert_eq!(back, ck);
    }
}
