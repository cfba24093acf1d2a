//! The student: token embedding, a pre-norm residual MLP stack, pooled taps
//! and one linear projection head per tap.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{LeReader, LeWriter};
use crate::rng::SeededRng;
use crate::tensor::{Activation, Real, Tape, Tensor, Var};
use crate::tokenizer::{TokenSequence, Vocabulary};

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudentConfig {
    pub vocab: usize,
    pub d_model: usize,
    pub n_blocks: usize,
    /// 1-based block indices whose residual output is tapped, increasing.
    pub taps: Vec<usize>,
    pub activation: Activation,
    pub dropout: f64,
    /// Projection target per tap.
    pub proj_dims: Vec<usize>,
    /// Classes of the optional per-position logit head.
    pub logit_classes: Option<usize>,
}

impl StudentConfig {
    pub fn desk(proj_dims: Vec<usize>) -> Self {
        Self {
            vocab: Vocabulary::SIZE,
            d_model: 32,
            n_blocks: 6,
            taps: vec![3, 6],
            activation: Activation::Gelu,
            dropout: 0.1,
            proj_dims,
            logit_classes: None,
        }
    }

    pub fn full_scale() -> Self {
        Self {
            d_model: 256,
            n_blocks: 8,
            taps: vec![5, 8],
            ..Self::desk(vec![1942, 1942])
        }
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        if self.vocab == 0 || self.d_model == 0 {
            return err("vocab and d_model must be at least 1".into());
        }
        if self.taps.is_empty() || self.taps.len() != self.proj_dims.len() {
            return err(format!("{} taps but {} projection dims", self.taps.len(), self.proj_dims.len()));
        }
        if self.taps.windows(2).any(|w| w[0] >= w[1]) || self.taps[0] == 0 || *self.taps.last().unwrap_or(&0) > self.n_blocks {
            return err(format!(
                "taps {:?} must be strictly increasing within 1..={}",
                self.taps, self.n_blocks
            ));
        }
        if self.proj_dims.contains(&0) || self.logit_classes == Some(0) {
            return err("projection and logit dims must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return err(format!("dropout {} outside [0, 1)", self.dropout));
        }
        Ok(())
    }

    /// Parameter names and shapes in declaration order.
    pub fn layout(&self) -> Vec<(String, Vec<usize>)> {
        let d = self.d_model;
        let mut out = vec![("embedding".to_string(), vec![self.vocab, d])];
        for b in 0..self.n_blocks {
            out.push((format!("block{b}.ln_gain"), vec![d]));
            out.push((format!("block{b}.ln_bias"), vec![d]));
            out.push((format!("block{b}.weight"), vec![d, d]));
            out.push((format!("block{b}.bias"), vec![d]));
        }
        for (i, &p) in self.proj_dims.iter().enumerate() {
            out.push((format!("head{i}.weight"), vec![d, p]));
            out.push((format!("head{i}.bias"), vec![p]));
        }
        if let Some(c) = self.logit_classes {
            out.push(("logit.weight".to_string(), vec![d, c]));
            out.push(("logit.bias".to_string(), vec![c]));
        }
        out
    }
}

/// Trainable scalar count.
pub fn num_params(config: &StudentConfig) -> usize {
    config.layout().iter().map(|(_, s)| s.iter().product::<usize>()).sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Parameters in the order given by [`StudentConfig::layout`].
#[derive(Debug, Clone, PartialEq)]
pub struct StudentParams<T> {
    config: StudentConfig,
    tensors: Vec<Tensor<T>>,
}

const BLOCK_STRIDE: usize = 4;

impl<T: Real> StudentParams<T> {
    /// Seeded initialisation: embedding rows standard normal, affine and
    /// head weights normal with std `1/sqrt(fan_in)`, biases zero, layer-norm
    /// gains one.
    pub fn init(config: &StudentConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = SeededRng::derived(seed, &[0x57_1D]);
        let tensors = config
            .layout()
            .into_iter()
            .map(|(name, shape)| {
                let n: usize = shape.iter().product();
                let data: Vec<T> = if name == "embedding" {
                    (0..n).map(|_| T::lit(rng.normal())).collect()
                } else if name.ends_with("weight") {
                    let std = 1.0 / (shape[0] as f64).sqrt();
                    (0..n).map(|_| T::lit(rng.normal() * std)).collect()
                } else if name.ends_with("ln_gain") {
                    vec![T::one(); n]
                } else {
                    vec![T::zero(); n]
                };
                Tensor::new(shape, data)
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            config: config.clone(),
            tensors,
        })
    }

    pub fn from_tensors(config: StudentConfig, tensors: Vec<Tensor<T>>) -> Result<Self> {
        config.validate()?;
        let layout = config.layout();
        if layout.len() != tensors.len() {
            return Err(Error::Shape(format!(
                "config declares {} tensors, got {}",
                layout.len(),
                tensors.len()
            )));
        }
        for ((name, shape), t) in layout.iter().zip(&tensors) {
            if t.shape() != shape.as_slice() {
                return Err(Error::Shape(format!("{name}: expected {shape:?}, got {:?}", t.shape())));
            }
        }
        Ok(Self { config, tensors })
    }

    pub fn config(&self) -> &StudentConfig {
        &self.config
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn set_dropout(&mut self, p: f64) -> Result<()> {
        let mut cfg = self.config.clone();
        cfg.dropout = p;
        cfg.validate()?;
        self.config = cfg;
        Ok(())
    }

    pub fn names(&self) -> Vec<String> {
        self.config.layout().into_iter().map(|(n, _)| n).collect()
    }

    pub fn cast<U: Real>(&self) -> StudentParams<U> {
        StudentParams {
            config: self.config.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
        }
    }

    fn head_index(&self, tap: usize) -> usize {
        1 + BLOCK_STRIDE * self.config.n_blocks + 2 * tap
    }

    fn logit_index(&self) -> usize {
        self.head_index(self.config.taps.len())
    }

    /// Places every tensor on `tape` as a trainable leaf.
    pub fn bind(&self, tape: &mut Tape<T>) -> Vec<Var> {
        self.tensors.iter().map(|t| tape.param(t.clone())).collect()
    }

    /// Places every tensor on `tape` as a constant.
    pub fn bind_frozen(&self, tape: &mut Tape<T>) -> Vec<Var> {
        self.tensors.iter().map(|t| tape.constant(t.clone())).collect()
    }

    /// Records a forward pass. `vars` come from [`bind`](Self::bind); in
    /// `Train` mode `rng` drives dropout.
    pub fn forward_on_tape(
        &self,
        tape: &mut Tape<T>,
        vars: &[Var],
        seq: &TokenSequence,
        mode: Mode,
        rng: Option<&mut SeededRng>,
    ) -> Result<StudentVars> {
        let cfg = &self.config;
        if vars.len() != self.tensors.len() {
            return Err(Error::Contract("parameter vars do not match the model".into()));
        }
        if seq.valid_len() == 0 {
            return Err(Error::Domain("student input has an all-false mask".into()));
        }
        let mut rng = rng;
        let drop = mode == Mode::Train && cfg.dropout > 0.0;
        if drop && rng.is_none() {
            return Err(Error::Contract("train-mode forward needs a dropout rng".into()));
        }
        let mask = seq.mask();
        let mut x = tape.embedding_lookup(vars[0], &seq.ids())?;
        let mut taps = Vec::with_capacity(cfg.taps.len());
        for b in 0..cfg.n_blocks {
            let p = &vars[1 + BLOCK_STRIDE * b..1 + BLOCK_STRIDE * (b + 1)];
            let h = tape.layer_norm(x, p[0], p[1], LAYER_NORM_EPS)?;
            let h = tape.affine(h, p[2], Some(p[3]))?;
            let mut h = tape.activation(h, cfg.activation);
            if drop {
                if let Some(r) = rng.as_deref_mut() {
                    h = tape.dropout(h, cfg.dropout, r)?;
                }
            }
            x = tape.residual_add(x, h)?;
            if cfg.taps.contains(&(b + 1)) {
                taps.push(x);
            }
        }
        let mut pooled = Vec::with_capacity(taps.len());
        let mut projected = Vec::with_capacity(taps.len());
        for (i, &t) in taps.iter().enumerate() {
            let p = tape.masked_mean_pool(t, mask)?;
            let h = self.head_index(i);
            projected.push(tape.affine(p, vars[h], Some(vars[h + 1]))?);
            pooled.push(p);
        }
        let mut final_embedding = pooled[0];
        for &p in &pooled[1..] {
            final_embedding = tape.concat(final_embedding, p, 0)?;
        }
        let logits = match cfg.logit_classes {
            Some(_) => {
                let k = self.logit_index();
                Some(tape.affine(x, vars[k], Some(vars[k + 1]))?)
            }
            None => None,
        };
        Ok(StudentVars {
            pooled,
            projected,
            final_embedding,
            logits,
        })
    }

    /// Eval-mode forward returning plain values.
    pub fn forward(&self, seq: &TokenSequence) -> Result<StudentOutput<T>> {
        let mut tape = Tape::new();
        let vars = self.bind_frozen(&mut tape);
        let v = self.forward_on_tape(&mut tape, &vars, seq, Mode::Eval, None)?;
        Ok(v.read(&tape))
    }
}

/// Tape handles for one forward pass.
#[derive(Debug, Clone)]
pub struct StudentVars {
    /// Pooled raw tap embeddings, `[d_model]` each.
    pub pooled: Vec<Var>,
    /// Projected tap embeddings, `[proj_dims[i]]`.
    pub projected: Vec<Var>,
    /// Concatenation of the pooled taps.
    pub final_embedding: Var,
    /// `[L, classes]` when a logit head is configured.
    pub logits: Option<Var>,
}

impl StudentVars {
    pub fn read<T: Real>(&self, tape: &Tape<T>) -> StudentOutput<T> {
        let get = |v: Var| tape.value(v).data().to_vec();
        StudentOutput {
            pooled: self.pooled.iter().map(|&v| get(v)).collect(),
            projected: self.projected.iter().map(|&v| get(v)).collect(),
            final_embedding: get(self.final_embedding),
            logits: self.logits.map(get),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StudentOutput<T> {
    pub pooled: Vec<Vec<T>>,
    pub projected: Vec<Vec<T>>,
    pub final_embedding: Vec<T>,
    pub logits: Option<Vec<T>>,
}

const CKPT_MAGIC: &[u8; 8] = b"HNANOCKP";
const CKPT_VERSION: u16 = 1;

pub fn save_checkpoint(path: &Path, params: &StudentParams<f32>) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io_at(path, e))?;
    let mut w = LeWriter::new(BufWriter::new(file));
    w.bytes(CKPT_MAGIC)?;
    w.u16(CKPT_VERSION)?;
    let json = serde_json::to_vec(&params.config)?;
    w.u32(json.len() as u32)?;
    w.bytes(&json)?;
    for t in &params.tensors {
        w.u32(t.rank() as u32)?;
        for &d in t.shape() {
            w.u32(u32::try_from(d).map_err(|_| Error::Format("dimension exceeds u32".into()))?)?;
        }
        w.f32s(t.data())?;
    }
    w.into_inner().flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<StudentParams<f32>> {
    let file = File::open(path).map_err(|e| Error::io_at(path, e))?;
    let mut r = LeReader::new(BufReader::new(file), "checkpoint");
    r.magic(CKPT_MAGIC)?;
    r.version(CKPT_VERSION)?;
    let len = r.u32()? as usize;
    let config: StudentConfig = serde_json::from_slice(&r.vec(len)?)?;
    config.validate()?;
    let mut tensors = Vec::new();
    for (name, shape) in config.layout() {
        let rank = r.u32()? as usize;
        let dims = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        if dims != shape {
            return Err(Error::Format(format!(
                "checkpoint tensor {name} has shape {dims:?}, config expects {shape:?}"
            )));
        }
        let n = dims.iter().product();
        tensors.push(Tensor::new(dims, r.f32s(n)?)?);
    }
    r.finish()?;
    StudentParams::from_tensors(config, tensors)
}
