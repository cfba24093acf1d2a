//! Distillation training: AdamW with decoupled weight decay, linear warmup,
//! global-norm clipping, validation metrics and checkpoints.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use crate::dataset::{split_indices, TokenDataset};
use crate::error::{Error, Result};
use crate::losses::{cosine_loss, kl_loss, mse_loss, tape_kl_loss, tape_train_loss, LossWeights};
use crate::metrics::{embedding_variance, entropy_profile, linear_cka, linear_cka_uncentered, mean_row_norm, shifted_mean, Matrix};
use crate::par::{self, Execution};
use crate::rng::SeededRng;
use crate::student::{save_checkpoint, Mode, StudentOutput, StudentParams};
use crate::teacher::{precompute, Teacher, TeacherOutput};
use crate::tensor::{Real, Tape, Tensor};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Sequences whose teacher logits feed the entropy summary.
pub const ENTROPY_SEQUENCES: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrainMode {
    /// Cosine + MSE on projected tap embeddings.
    Embedding,
    /// KL between teacher and student per-position logits.
    Logit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub context_len: usize,
    pub lr_max: f64,
    pub warmup_steps: u64,
    pub weight_decay: f64,
    pub grad_clip_max: f64,
    pub dropout: f64,
    pub loss: LossWeights,
    /// Required; zero is rejected.
    pub max_steps: u64,
    pub eval_every: u64,
    pub seed: u64,
    pub mode: TrainMode,
    pub val_fraction: f64,
    pub execution: Execution,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::full_scale()
    }
}

impl TrainConfig {
    /// Full-scale hyperparameters. `max_steps` is left unset.
    pub fn full_scale() -> Self {
        Self {
            batch_size: 32,
            context_len: 2048,
            lr_max: 2e-4,
            warmup_steps: 2000,
            weight_decay: 1e-2,
            grad_clip_max: 1.0,
            dropout: 0.1,
            loss: LossWeights::default(),
            max_steps: 0,
            eval_every: 1000,
            seed: 0,
            mode: TrainMode::Embedding,
            val_fraction: 0.02,
            execution: Execution::Parallel,
        }
    }

    pub fn desk() -> Self {
        Self {
            batch_size: 16,
            context_len: 128,
            lr_max: 1e-3,
            warmup_steps: 200,
            max_steps: 2000,
            eval_every: 200,
            ..Self::full_scale()
        }
    }

    pub fn validate(&self) -> Result<Vec<String>> {
        let err = |m: &str| Err(Error::Config(m.to_string()));
        if self.max_steps == 0 {
            return err("max_steps is required and must be positive");
        }
        if self.batch_size == 0 || self.context_len == 0 || self.eval_every == 0 {
            return err("batch_size, context_len and eval_every must be positive");
        }
        if !(self.lr_max > 0.0) || !(self.grad_clip_max > 0.0) || !(self.weight_decay >= 0.0) {
            return err("lr_max and grad_clip_max must be positive, weight_decay non-negative");
        }
        if !(0.0..1.0).contains(&self.dropout) || !(0.0..1.0).contains(&self.val_fraction) {
            return err("dropout and val_fraction must lie in [0, 1)");
        }
        self.loss.validate()
    }
}

/// `lr_max * min(1, step / warmup_steps)`, constant afterwards.
pub fn lr_schedule(step: u64, lr_max: f64, warmup_steps: u64) -> f64 {
    if warmup_steps == 0 {
        return lr_max;
    }
    lr_max * (step as f64 / warmup_steps as f64).min(1.0)
}

pub fn global_norm<T: Real>(grads: &[Tensor<T>]) -> f64 {
    grads.iter().map(Tensor::sum_squares).sum::<f64>().sqrt()
}

/// Rescales `grads` in place when their global norm exceeds `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm<T: Real>(grads: &mut [Tensor<T>], max_norm: f64) -> f64 {
    let g = global_norm(grads);
    if g > max_norm {
        let s = T::lit(max_norm / g);
        for t in grads.iter_mut() {
            t.scale(s);
        }
    }
    g
}

/// AdamW state: per-parameter moments and the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
}

impl<T: Real> AdamW<T> {
    pub fn new(params: &[Tensor<T>]) -> Self {
        let zeros = || params.iter().map(|p| Tensor::zeros(p.shape())).collect::<Vec<_>>();
        Self {
            beta1: ADAM_BETA1,
            beta2: ADAM_BETA2,
            eps: ADAM_EPS,
            t: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// `θ ← θ − lr·(m̂/(√v̂ + ε) + weight_decay·θ)` with bias-corrected moments.
    pub fn step(&mut self, params: &mut [Tensor<T>], grads: &[Tensor<T>], lr: f64, weight_decay: f64) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != params.len() {
            return Err(Error::Shape(format!(
                "optimizer tracks {} tensors, got {} params and {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        for ((p, g), m) in params.iter().zip(grads).zip(&self.m) {
            if p.shape() != g.shape() || p.shape() != m.shape() {
                return Err(crate::error::shape_mismatch("adamw param vs grad", p.shape(), g.shape()));
            }
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            for (((pi, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut()) {
                let gf = gi.to_f64();
                let mf = self.beta1 * mi.to_f64() + (1.0 - self.beta1) * gf;
                let vf = self.beta2 * vi.to_f64() + (1.0 - self.beta2) * gf * gf;
                *mi = T::lit(mf);
                *vi = T::lit(vf);
                let theta = pi.to_f64();
                let update = (mf / bc1) / ((vf / bc2).sqrt() + self.eps) + weight_decay * theta;
                *pi = T::lit(theta - lr * update);
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RecordSplit {
    Train,
    Val,
}

/// Teacher-logit entropy diagnostics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntropySummary {
    /// Per-position entropy of the first validation sequence.
    pub profile: Vec<f64>,
    /// Mean over sequences of per-sequence mean entropy.
    pub mean: f64,
    pub max: f64,
    pub spikes: usize,
    pub mean_token_prob: f64,
    pub uniform_entropy: f64,
    pub uniform_prob: f64,
    pub sequences: usize,
}

/// One line of metrics JSONL.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct MetricsRecord {
    pub step: u64,
    pub split: Option<RecordSplit>,
    pub lr: f64,
    pub loss_total: f64,
    /// Per tap, in tap order.
    pub loss_cos: Vec<f64>,
    pub loss_mse: Vec<f64>,
    pub kl: Option<f64>,
    pub grad_norm: Option<f64>,
    pub grad_norm_clipped: Option<f64>,
    /// Variance and mean norm of the final (concatenated) student embedding.
    pub emb_var: Option<f64>,
    pub emb_norm: Option<f64>,
    /// Same, averaged over the projected tap embeddings.
    pub proj_var: Option<f64>,
    pub proj_norm: Option<f64>,
    pub cka_pre: Vec<Option<f64>>,
    pub cka_post: Vec<Option<f64>>,
    pub cka_raw_pre: Vec<Option<f64>>,
    pub cka_raw_post: Vec<Option<f64>>,
    pub entropy: Option<EntropySummary>,
    pub student_entropy_mean: Option<f64>,
}

fn opt(v: Option<f64>) -> Value {
    v.map_or(Value::Null, |x| json!(x))
}

impl MetricsRecord {
    pub fn mean_cos(&self) -> f64 {
        self.loss_cos.iter().sum::<f64>() / self.loss_cos.len().max(1) as f64
    }

    pub fn to_json(&self) -> Value {
        let mut m = Map::new();
        m.insert("step".into(), json!(self.step));
        m.insert(
            "split".into(),
            json!(match self.split {
                Some(RecordSplit::Val) => "val",
                _ => "train",
            }),
        );
        m.insert("lr".into(), json!(self.lr));
        m.insert("loss_total".into(), json!(self.loss_total));
        for (i, v) in self.loss_cos.iter().enumerate() {
            m.insert(format!("loss_cos_tap{}", i + 1), json!(v));
        }
        for (i, v) in self.loss_mse.iter().enumerate() {
            m.insert(format!("loss_mse_tap{}", i + 1), json!(v));
        }
        m.insert("kl".into(), opt(self.kl));
        m.insert("grad_norm".into(), opt(self.grad_norm));
        m.insert("grad_norm_clipped".into(), opt(self.grad_norm_clipped));
        m.insert("emb_var".into(), opt(self.emb_var));
        m.insert("emb_norm".into(), opt(self.emb_norm));
        m.insert("proj_var".into(), opt(self.proj_var));
        m.insert("proj_norm".into(), opt(self.proj_norm));
        for (name, vals) in [
            ("cka_pre", &self.cka_pre),
            ("cka_post", &self.cka_post),
            ("cka_raw_pre", &self.cka_raw_pre),
            ("cka_raw_post", &self.cka_raw_post),
        ] {
            for (i, v) in vals.iter().enumerate() {
                m.insert(format!("{name}_tap{}", i + 1), opt(*v));
            }
        }
        match &self.entropy {
            Some(e) => {
                m.insert("entropy_profile".into(), json!(e.profile));
                m.insert("entropy_mean".into(), json!(e.mean));
                m.insert("entropy_max".into(), json!(e.max));
                m.insert("entropy_spikes".into(), json!(e.spikes));
                m.insert("mean_token_prob".into(), json!(e.mean_token_prob));
                m.insert("uniform_entropy".into(), json!(e.uniform_entropy));
                m.insert("uniform_prob".into(), json!(e.uniform_prob));
                m.insert("entropy_sequences".into(), json!(e.sequences));
            }
            None => {
                for k in ["entropy_profile", "entropy_mean", "entropy_max", "mean_token_prob"] {
                    m.insert(k.into(), Value::Null);
                }
            }
        }
        m.insert("student_entropy_mean".into(), opt(self.student_entropy_mean));
        Value::Object(m)
    }

    pub fn to_line(&self) -> Result<String> {
        Ok(serde_json::to_string(&self.to_json())?)
    }
}

/// Validation diagnostics over a set of sequences.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalMetrics {
    pub loss_total: f64,
    pub loss_cos: Vec<f64>,
    pub loss_mse: Vec<f64>,
    pub kl: Option<f64>,
    pub emb_var: Option<f64>,
    pub emb_norm: f64,
    pub proj_var: Option<f64>,
    pub proj_norm: f64,
    pub cka_pre: Vec<Option<f64>>,
    pub cka_post: Vec<Option<f64>>,
    pub cka_raw_pre: Vec<Option<f64>>,
    pub cka_raw_post: Vec<Option<f64>>,
    pub entropy: Option<EntropySummary>,
    pub student_entropy_mean: Option<f64>,
}

fn to_f64s<T: Real>(v: &[T]) -> Vec<f64> {
    v.iter().map(|&x| Real::to_f64(x)).collect()
}

/// Entropy summary of teacher logits over the first `ENTROPY_SEQUENCES`
/// entries of `indices`.
pub fn teacher_entropy(
    dataset: &TokenDataset,
    targets: &[TeacherOutput],
    indices: &[usize],
    classes: usize,
) -> Result<Option<EntropySummary>> {
    let mut first = None;
    let mut means = Vec::new();
    let mut max: f64 = 0.0;
    for &i in indices.iter().take(ENTROPY_SEQUENCES) {
        let Some(logits) = &targets[i].logits else {
            return Ok(None);
        };
        let p = entropy_profile(&to_f64s(logits), classes, dataset.get(i).mask())?;
        means.push(p.mean);
        max = max.max(p.max);
        first.get_or_insert(p);
    }
    let Some(first) = first else {
        return Ok(None);
    };
    let mean = shifted_mean(&means);
    Ok(Some(EntropySummary {
        spikes: first.spikes.len(),
        profile: first.per_position,
        mean,
        max,
        mean_token_prob: (-mean).exp(),
        uniform_entropy: first.uniform_entropy,
        uniform_prob: first.uniform_prob,
        sequences: means.len(),
    }))
}

fn cka_pair(x: &Matrix, y: &Matrix) -> (Option<f64>, Option<f64>) {
    (linear_cka(x, y).ok(), linear_cka_uncentered(x, y).ok())
}

/// Eval-mode metrics of `student` on `indices`.
pub fn evaluate<T: Real>(
    student: &StudentParams<T>,
    dataset: &TokenDataset,
    targets: &[TeacherOutput],
    indices: &[usize],
    weights: &LossWeights,
    logit_classes: Option<usize>,
    exec: Execution,
) -> Result<EvalMetrics> {
    if indices.is_empty() {
        return Err(Error::Contract("evaluation needs at least one sequence".into()));
    }
    let outs: Vec<StudentOutput<T>> = par::map_slice(exec, indices, |&i| student.forward(dataset.get(i)))
        .into_iter()
        .collect::<Result<_>>()?;
    let taps = student.config().taps.len();
    let n = indices.len() as f64;
    let mut loss_cos = vec![0.0; taps];
    let mut loss_mse = vec![0.0; taps];
    for (o, &i) in outs.iter().zip(indices) {
        for k in 0..taps {
            let s = to_f64s(&o.projected[k]);
            let t: Vec<f64> = targets[i].embeddings[k].iter().map(|&v| f64::from(v)).collect();
            loss_cos[k] += cosine_loss(&s, &t)? / n;
            loss_mse[k] += mse_loss(&s, &t)? / n;
        }
    }
    let total = crate::losses::combine_tap_losses(&loss_cos, &loss_mse, weights)?.total;

    let kl = match logit_classes {
        Some(c) if outs[0].logits.is_some() && targets[indices[0]].logits.is_some() => {
            let mut acc = 0.0;
            for (o, &i) in outs.iter().zip(indices) {
                let (Some(sl), Some(tl)) = (&o.logits, &targets[i].logits) else {
                    return Err(Error::Contract("logits missing for part of the evaluation set".into()));
                };
                let tl: Vec<f64> = tl.iter().map(|&v| f64::from(v)).collect();
                acc += kl_loss(&tl, &to_f64s(sl), c, dataset.get(i).mask(), weights.temperature)?;
            }
            Some(acc / n)
        }
        _ => None,
    };

    let final_rows: Vec<Vec<f64>> = outs.iter().map(|o| to_f64s(&o.final_embedding)).collect();
    let final_m = Matrix::from_rows(&final_rows)?;
    let mut proj_norm = 0.0;
    let mut proj_var = Some(0.0);
    let mut cka_pre = Vec::with_capacity(taps);
    let mut cka_post = Vec::with_capacity(taps);
    let mut cka_raw_pre = Vec::with_capacity(taps);
    let mut cka_raw_post = Vec::with_capacity(taps);
    for k in 0..taps {
        let pooled = Matrix::from_rows(&outs.iter().map(|o| to_f64s(&o.pooled[k])).collect::<Vec<_>>())?;
        let proj = Matrix::from_rows(&outs.iter().map(|o| to_f64s(&o.projected[k])).collect::<Vec<_>>())?;
        let teach = Matrix::from_f32_rows(&indices.iter().map(|&i| targets[i].embeddings[k].clone()).collect::<Vec<_>>())?;
        proj_norm += mean_row_norm(&proj) / taps as f64;
        proj_var = match (proj_var, embedding_variance(&proj).ok()) {
            (Some(a), Some(b)) => Some(a + b / taps as f64),
            _ => None,
        };
        let (c, r) = cka_pair(&pooled, &teach);
        cka_pre.push(c);
        cka_raw_pre.push(r);
        let (c, r) = cka_pair(&proj, &teach);
        cka_post.push(c);
        cka_raw_post.push(r);
    }

    let entropy = match logit_classes.or_else(|| targets[indices[0]].logits.as_ref().map(|_| crate::teacher::LOGIT_CLASSES)) {
        Some(c) => teacher_entropy(dataset, targets, indices, c)?,
        None => None,
    };
    let student_entropy_mean = match (student.config().logit_classes, outs[0].logits.is_some()) {
        (Some(c), true) => {
            let mut acc = 0.0;
            for (o, &i) in outs.iter().zip(indices) {
                if let Some(l) = &o.logits {
                    acc += entropy_profile(&to_f64s(l), c, dataset.get(i).mask())?.mean;
                }
            }
            Some(acc / n)
        }
        _ => None,
    };

    Ok(EvalMetrics {
        loss_total: total,
        loss_cos,
        loss_mse,
        kl,
        emb_var: embedding_variance(&final_m).ok(),
        emb_norm: mean_row_norm(&final_m),
        proj_var,
        proj_norm,
        cka_pre,
        cka_post,
        cka_raw_pre,
        cka_raw_post,
        entropy,
        student_entropy_mean,
    })
}

/// Result of a training run.
#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub records: Vec<MetricsRecord>,
    pub steps: u64,
}

impl TrainSummary {
    pub fn train_records(&self) -> impl Iterator<Item = &MetricsRecord> {
        self.records.iter().filter(|r| r.split == Some(RecordSplit::Train))
    }

    pub fn val_records(&self) -> impl Iterator<Item = &MetricsRecord> {
        self.records.iter().filter(|r| r.split == Some(RecordSplit::Val))
    }

    pub fn final_val(&self) -> Option<&MetricsRecord> {
        self.val_records().last()
    }
}

struct SeqResult {
    grads: Vec<Tensor<f32>>,
    total: f64,
    cos: Vec<f64>,
    mse: Vec<f64>,
    kl: Option<f64>,
}

const TAG_SHUFFLE: u64 = 0x5F_0001;
const TAG_DROPOUT: u64 = 0x5F_0002;

/// Seeded epoch-wise batch order over the training indices.
struct Batcher {
    indices: Vec<usize>,
    order: Vec<usize>,
    cursor: usize,
    epoch: u64,
    seed: u64,
}

impl Batcher {
    fn new(indices: Vec<usize>, seed: u64) -> Self {
        let mut b = Self {
            order: Vec::new(),
            indices,
            cursor: 0,
            epoch: 0,
            seed,
        };
        b.reshuffle();
        b
    }

    fn reshuffle(&mut self) {
        self.order = self.indices.clone();
        SeededRng::derived(self.seed, &[TAG_SHUFFLE, self.epoch]).shuffle(&mut self.order);
        self.cursor = 0;
    }

    fn next(&mut self, n: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(n);
        while out.len() < n {
            if self.cursor == self.order.len() {
                self.epoch += 1;
                self.reshuffle();
            }
            out.push(self.order[self.cursor]);
            self.cursor += 1;
        }
        out
    }
}

fn check_compat(config: &TrainConfig, student: &StudentParams<f32>, teacher: &dyn Teacher, dataset: &TokenDataset) -> Result<()> {
    let sc = student.config();
    if sc.proj_dims != teacher.layer_dims() {
        return Err(Error::Config(format!(
            "student projection dims {:?} do not match teacher layer dims {:?}",
            sc.proj_dims,
            teacher.layer_dims()
        )));
    }
    if dataset.context_len() != config.context_len {
        return Err(Error::Config(format!(
            "dataset context {} differs from configured context {}",
            dataset.context_len(),
            config.context_len
        )));
    }
    if config.mode == TrainMode::Logit {
        match (teacher.logit_classes(), sc.logit_classes) {
            (Some(t), Some(s)) if t == s => {}
            (None, _) => return Err(Error::Config("logit mode needs a teacher that emits logits".into())),
            _ => {
                return Err(Error::Config(
                    "logit mode needs a student logit head matching the teacher classes".into(),
                ))
            }
        }
    }
    if dataset.len() < 2 {
        return Err(Error::Config("training needs at least two sequences".into()));
    }
    Ok(())
}

fn per_sequence(
    student: &StudentParams<f32>,
    seq: &crate::tokenizer::TokenSequence,
    target: &TeacherOutput,
    config: &TrainConfig,
    rng: &mut SeededRng,
) -> Result<SeqResult> {
    let mut tape = Tape::<f32>::new();
    let vars = student.bind(&mut tape);
    let fwd = student.forward_on_tape(&mut tape, &vars, seq, Mode::Train, Some(rng))?;
    let (loss, cos, mse, kl) = match config.mode {
        TrainMode::Embedding => {
            let pairs = fwd
                .projected
                .iter()
                .zip(&target.embeddings)
                .map(|(&s, t)| (s, tape.constant(Tensor::vector(t.clone()))))
                .collect::<Vec<_>>();
            let l = tape_train_loss(&mut tape, &pairs, &config.loss)?;
            let read = |v: &[crate::tensor::Var], tape: &Tape<f32>| v.iter().map(|&x| tape.value(x).item().to_f64()).collect::<Vec<_>>();
            (l.total, read(&l.cos, &tape), read(&l.mse, &tape), None)
        }
        TrainMode::Logit => {
            let (Some(sl), Some(tl)) = (fwd.logits, &target.logits) else {
                return Err(Error::Contract("logit mode without logits".into()));
            };
            let classes = tl.len() / seq.context_len();
            let t = Tensor::matrix(seq.context_len(), classes, tl.clone())?;
            let l = tape_kl_loss(&mut tape, sl, &t, seq.mask(), config.loss.temperature)?;
            let v = tape.value(l).item().to_f64();
            (l, Vec::new(), Vec::new(), Some(v))
        }
    };
    let total = tape.value(loss).item().to_f64();
    let mut g = tape.backward(loss)?;
    let grads = vars
        .iter()
        .map(|&v| g.take(v).ok_or_else(|| Error::Contract("missing parameter gradient".into())))
        .collect::<Result<Vec<_>>>()?;
    Ok(SeqResult {
        grads,
        total,
        cos,
        mse,
        kl,
    })
}

fn mean_of(rows: &[Vec<f64>]) -> Vec<f64> {
    let Some(first) = rows.first() else {
        return Vec::new();
    };
    let mut acc = vec![0.0; first.len()];
    for r in rows {
        acc.iter_mut().zip(r).for_each(|(a, v)| *a += v);
    }
    acc.iter_mut().for_each(|a| *a /= rows.len() as f64);
    acc
}

fn write_nan_dump(dir: &Path, step: u64, batch_id: u64, batch: &[usize], losses: &[f64]) -> Result<()> {
    let v = json!({
        "step": step,
        "batch_id": batch_id,
        "sequence_indices": batch,
        "per_sequence_loss": losses.iter().map(|l| if l.is_finite() { json!(l) } else { json!(l.to_string()) }).collect::<Vec<_>>(),
    });
    let path = dir.join("nan_dump.json");
    fs::write(&path, serde_json::to_vec_pretty(&v)?).map_err(|e| Error::io_at(&path, e))
}

/// Runs distillation. Targets are computed once from the frozen `teacher`.
/// With `out_dir`, writes `metrics.jsonl` and checkpoints at eval points.
pub fn train(
    config: &TrainConfig,
    student: &mut StudentParams<f32>,
    dataset: &TokenDataset,
    teacher: &dyn Teacher,
    out_dir: Option<&Path>,
) -> Result<TrainSummary> {
    config.validate()?;
    student.set_dropout(config.dropout)?;
    check_compat(config, student, teacher, dataset)?;
    let targets = precompute(teacher, dataset.sequences(), config.execution)?;
    train_with_targets(config, student, dataset, &targets, teacher.logit_classes(), out_dir)
}

pub fn train_with_targets(
    config: &TrainConfig,
    student: &mut StudentParams<f32>,
    dataset: &TokenDataset,
    targets: &[TeacherOutput],
    logit_classes: Option<usize>,
    out_dir: Option<&Path>,
) -> Result<TrainSummary> {
    config.validate()?;
    if targets.len() != dataset.len() {
        return Err(Error::Contract(format!(
            "{} targets for {} sequences",
            targets.len(),
            dataset.len()
        )));
    }
    let split = split_indices(dataset.len(), config.val_fraction, config.seed)?;
    if split.val.is_empty() {
        return Err(Error::Config("validation split is empty".into()));
    }
    let mut writer = match out_dir {
        Some(dir) => {
            fs::create_dir_all(dir.join("checkpoints")).map_err(|e| Error::io_at(dir, e))?;
            let path = dir.join("metrics.jsonl");
            Some(BufWriter::new(File::create(&path).map_err(|e| Error::io_at(&path, e))?))
        }
        None => None,
    };
    let mut records = Vec::new();
    let mut emit = |r: MetricsRecord, records: &mut Vec<MetricsRecord>| -> Result<()> {
        if let Some(w) = writer.as_mut() {
            writeln!(w, "{}", r.to_line()?)?;
        }
        records.push(r);
        Ok(())
    };

    let val_classes = match config.mode {
        TrainMode::Logit => logit_classes,
        TrainMode::Embedding => None,
    };
    let eval_point = |step: u64, student: &StudentParams<f32>| -> Result<MetricsRecord> {
        let e = evaluate(student, dataset, targets, &split.val, &config.loss, val_classes, config.execution)?;
        if let Some(dir) = out_dir {
            let path = dir.join("checkpoints").join(format!("step_{step:06}.hnanockp"));
            save_checkpoint(&path, student)?;
        }
        Ok(MetricsRecord {
            step,
            split: Some(RecordSplit::Val),
            lr: lr_schedule(step, config.lr_max, config.warmup_steps),
            loss_total: match config.mode {
                TrainMode::Embedding => e.loss_total,
                TrainMode::Logit => e.kl.unwrap_or(f64::NAN),
            },
            loss_cos: e.loss_cos,
            loss_mse: e.loss_mse,
            kl: e.kl,
            emb_var: e.emb_var,
            emb_norm: Some(e.emb_norm),
            proj_var: e.proj_var,
            proj_norm: Some(e.proj_norm),
            cka_pre: e.cka_pre,
            cka_post: e.cka_post,
            cka_raw_pre: e.cka_raw_pre,
            cka_raw_post: e.cka_raw_post,
            entropy: e.entropy,
            student_entropy_mean: e.student_entropy_mean,
            ..MetricsRecord::default()
        })
    };

    emit(eval_point(0, student)?, &mut records)?;
    let mut opt = AdamW::new(student.tensors());
    let mut batcher = Batcher::new(split.train.clone(), config.seed);
    let b = config.batch_size;
    for step in 1..=config.max_steps {
        let batch = batcher.next(b);
        let results: Vec<SeqResult> = {
            let s: &StudentParams<f32> = student;
            par::map_range(config.execution, batch.len(), |j| {
                let mut rng = SeededRng::derived(config.seed, &[TAG_DROPOUT, step, j as u64]);
                per_sequence(s, dataset.get(batch[j]), &targets[batch[j]], config, &mut rng)
            })
            .into_iter()
            .collect::<Result<_>>()?
        };
        let losses: Vec<f64> = results.iter().map(|r| r.total).collect();
        let batch_id = step - 1;
        if losses.iter().any(|l| !l.is_finite()) {
            if let Some(dir) = out_dir {
                write_nan_dump(dir, step, batch_id, &batch, &losses)?;
            }
            return Err(Error::NonFinite {
                step: step as usize,
                batch_id: batch_id as usize,
            });
        }
        let mut grads: Vec<Tensor<f32>> = student.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
        for r in &results {
            for (g, rg) in grads.iter_mut().zip(&r.grads) {
                g.add_assign(rg)?;
            }
        }
        let inv = 1.0 / b as f32;
        grads.iter_mut().for_each(|g| g.scale(inv));
        let pre = clip_global_norm(&mut grads, config.grad_clip_max);
        let post = global_norm(&grads);
        debug_assert!(post <= config.grad_clip_max * (1.0 + 1e-5), "post-clip norm {post}");
        if !pre.is_finite() {
            if let Some(dir) = out_dir {
                write_nan_dump(dir, step, batch_id, &batch, &losses)?;
            }
            return Err(Error::NonFinite {
                step: step as usize,
                batch_id: batch_id as usize,
            });
        }
        let lr = lr_schedule(step, config.lr_max, config.warmup_steps);
        opt.step(student.tensors_mut(), &grads, lr, config.weight_decay)?;

        let kl = match config.mode {
            TrainMode::Logit => Some(results.iter().filter_map(|r| r.kl).sum::<f64>() / b as f64),
            TrainMode::Embedding => None,
        };
        emit(
            MetricsRecord {
                step,
                split: Some(RecordSplit::Train),
                lr,
                loss_total: losses.iter().sum::<f64>() / b as f64,
                loss_cos: mean_of(&results.iter().map(|r| r.cos.clone()).collect::<Vec<_>>()),
                loss_mse: mean_of(&results.iter().map(|r| r.mse.clone()).collect::<Vec<_>>()),
                kl,
                grad_norm: Some(pre),
                grad_norm_clipped: Some(post),
                ..MetricsRecord::default()
            },
            &mut records,
        )?;
        if step % config.eval_every == 0 {
            emit(eval_point(step, student)?, &mut records)?;
        }
    }
    if let Some(mut w) = writer {
        w.flush()?;
    }
    Ok(TrainSummary {
        records,
        steps: config.max_steps,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_values() {
        assert!((lr_schedule(1000, 2e-4, 2000) - 1e-4).abs() < 1e-18);
        assert_eq!(lr_schedule(2000, 2e-4, 2000), 2e-4);
        assert_eq!(lr_schedule(1_000_000, 2e-4, 2000), 2e-4);
        assert_eq!(lr_schedule(5, 1e-3, 0), 1e-3);
    }

    #[test]
    fn clipping() {
        let mut g = vec![Tensor::vector(vec![0.3f64, 0.4])];
        assert!((clip_global_norm(&mut g, 1.0) - 0.5).abs() < 1e-15);
        assert_eq!(g[0].data(), &[0.3, 0.4]);
        let mut g = vec![Tensor::vector(vec![0.0f64, 4.0]), Tensor::vector(vec![0.0f64])];
        assert_eq!(clip_global_norm(&mut g, 1.0), 4.0);
        assert!((global_norm(&g) - 1.0).abs() < 1e-9);
        let mut z = vec![Tensor::<f64>::zeros(&[3])];
        assert_eq!(clip_global_norm(&mut z, 1.0), 0.0);
        assert!(z[0].data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::full_scale().validate().is_err());
        assert!(TrainConfig::desk().validate().is_ok());
        let mut c = TrainConfig::desk();
        c.dropout = 1.0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn batcher_covers_epoch() {
        let mut b = Batcher::new((0..10).collect(), 3);
        let mut first: Vec<usize> = b.next(10);
        first.sort_unstable();
        assert_eq!(first, (0..10).collect::<Vec<_>>());
        assert_eq!(b.next(3).len(), 3);
    }
}
