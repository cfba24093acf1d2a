//! Frozen teachers: a seeded synthetic teacher with a controllable
//! embedding spectrum, and a provider backed by embedding dump files.
//!
//! The synthetic teacher pools the one-hot token composition of a sequence,
//! expands it through a fixed `tanh` layer, whitens the top directions of
//! that expansion (calibrated once on a seeded corpus) and maps them onto a
//! random orthonormal basis with singular values `lead, γ, γ², ...`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::dataset::CorpusSpec;
use crate::error::{Error, Result};
use crate::io::{LeReader, LeWriter};
use crate::par::{self, Execution};
use crate::rng::{fnv1a, SeededRng};
use crate::tokenizer::{pad_or_truncate, TokenSequence, Vocabulary};

/// Nucleotide classes scored by teacher logits (A, C, G, T).
pub const LOGIT_CLASSES: usize = 4;

/// Smallest eigenvalue ratio accepted when whitening a direction.
const RESOLVABLE_RATIO: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TeacherKind {
    Synthetic,
    FileBacked,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TeacherSpec {
    pub kind: TeacherKind,
    pub layer_dims: Vec<usize>,
    pub synthetic: SyntheticSpec,
    /// Dump holding every matched layer, for `FileBacked`.
    pub file: Option<PathBuf>,
}

impl Default for TeacherSpec {
    fn default() -> Self {
        Self {
            kind: TeacherKind::Synthetic,
            layer_dims: vec![1942, 1942],
            synthetic: SyntheticSpec::default(),
            file: None,
        }
    }
}

impl TeacherSpec {
    /// Effective rank 6 with `γ = 0.5`: a handful of components carry all
    /// the variance.
    pub fn norm_like(layer_dims: Vec<usize>) -> Self {
        Self {
            layer_dims,
            ..Self::default()
        }
    }

    pub fn rank_one(layer_dims: Vec<usize>) -> Self {
        let n = layer_dims.len();
        let mut s = Self::norm_like(layer_dims);
        s.synthetic.effective_rank = vec![1; n];
        s
    }

    /// One dominant direction over a slowly decaying tail.
    pub fn block12_like(layer_dims: Vec<usize>) -> Self {
        let n = layer_dims.len();
        let mut s = Self::norm_like(layer_dims);
        s.synthetic.effective_rank = vec![12; n];
        s.synthetic.gamma = 0.95;
        s.synthetic.lead = 12.0;
        s
    }

    /// Desk-scale targets: two 64-dimensional layers of effective rank 6.
    pub fn desk() -> Self {
        Self::norm_like(vec![64, 64])
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.synthetic.seed = seed;
        self
    }

    pub fn with_logits(mut self, logits: LogitSpec) -> Self {
        self.synthetic.emit_logits = true;
        self.synthetic.logits = logits;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_dims.is_empty() || self.layer_dims.contains(&0) {
            return Err(Error::Config("teacher layer_dims must be non-empty and positive".into()));
        }
        match self.kind {
            TeacherKind::FileBacked => {
                if self.file.is_none() {
                    return Err(Error::Config("file-backed teacher needs a dump path".into()));
                }
            }
            TeacherKind::Synthetic => self.synthetic.validate(&self.layer_dims)?,
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub seed: u64,
    /// One entry per matched layer.
    pub effective_rank: Vec<usize>,
    pub gamma: f64,
    /// Singular value of the leading direction.
    pub lead: f64,
    /// Overall multiplier on embeddings.
    pub scale: f64,
    /// Length of a shared mean direction added to every embedding.
    pub offset: f64,
    pub hidden: usize,
    pub gain: f64,
    pub emit_logits: bool,
    pub logits: LogitSpec,
    pub calibration: CalibrationSpec,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            seed: 7,
            effective_rank: vec![6, 6],
            gamma: 0.5,
            lead: 1.0,
            scale: 1.0,
            offset: 1.0,
            hidden: 64,
            gain: 1.0,
            emit_logits: false,
            logits: LogitSpec::default(),
            calibration: CalibrationSpec::default(),
        }
    }
}

impl SyntheticSpec {
    fn validate(&self, layer_dims: &[usize]) -> Result<()> {
        if self.effective_rank.len() != layer_dims.len() {
            return Err(Error::Config(format!(
                "{} effective ranks for {} layers",
                self.effective_rank.len(),
                layer_dims.len()
            )));
        }
        for (&r, &d) in self.effective_rank.iter().zip(layer_dims) {
            let needed = r + usize::from(self.offset != 0.0);
            if r == 0 || needed > d {
                return Err(Error::Config(format!("effective rank {r} does not fit layer dimension {d}")));
            }
            if r > self.hidden {
                return Err(Error::Config(format!("effective rank {r} exceeds hidden width {}", self.hidden)));
            }
        }
        let positive = [self.gamma, self.lead, self.scale, self.gain];
        if positive.iter().any(|v| !(*v > 0.0 && v.is_finite())) || !self.offset.is_finite() {
            return Err(Error::Config("synthetic gamma, lead, scale and gain must be positive".into()));
        }
        self.logits.validate()?;
        self.calibration.corpus.validate()?;
        if self.calibration.count < 2 || self.calibration.context_len == 0 {
            return Err(Error::Config("calibration needs >= 2 sequences and a context length".into()));
        }
        Ok(())
    }

    /// `σ_k` for one layer.
    pub fn singular_values(&self, rank: usize) -> Vec<f64> {
        (0..rank)
            .map(|k| if k == 0 { self.lead } else { self.gamma.powi(k as i32) })
            .collect()
    }
}

/// Per-position teacher logits: a frozen affine map of the token one-hot
/// plus seeded noise. A sequence is "spiky" with probability `spike_prob`,
/// in which case its noise is multiplied by `spike_scale`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LogitSpec {
    pub scale: f64,
    pub noise: f64,
    pub spike_prob: f64,
    pub spike_scale: f64,
}

impl Default for LogitSpec {
    fn default() -> Self {
        Self::mild()
    }
}

impl LogitSpec {
    pub fn uniform() -> Self {
        Self {
            scale: 0.0,
            noise: 0.0,
            spike_prob: 0.0,
            spike_scale: 1.0,
        }
    }

    pub fn mild() -> Self {
        Self {
            scale: 1.0,
            noise: 0.1,
            spike_prob: 0.0,
            spike_scale: 1.0,
        }
    }

    pub fn high_noise() -> Self {
        Self {
            scale: 1.0,
            noise: 0.3,
            spike_prob: 0.03,
            spike_scale: 20.0,
        }
    }

    fn validate(&self) -> Result<()> {
        let ok = self.scale >= 0.0
            && self.noise >= 0.0
            && (0.0..=1.0).contains(&self.spike_prob)
            && self.spike_scale >= 0.0
            && [self.scale, self.noise, self.spike_scale].iter().all(|v| v.is_finite());
        if !ok {
            return Err(Error::Config("invalid logit noise settings".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CalibrationSpec {
    pub count: usize,
    pub context_len: usize,
    pub corpus: CorpusSpec,
}

impl Default for CalibrationSpec {
    fn default() -> Self {
        Self {
            count: 131_072,
            context_len: 128,
            corpus: CorpusSpec::default(),
        }
    }
}

/// Targets for one sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct TeacherOutput {
    /// One pooled embedding per matched layer.
    pub embeddings: Vec<Vec<f32>>,
    /// Row-major `[L, LOGIT_CLASSES]`, when the teacher emits logits.
    pub logits: Option<Vec<f32>>,
}

/// Source of frozen targets. Implementations are immutable and shareable
/// across threads.
pub trait Teacher: Send + Sync {
    fn layer_dims(&self) -> &[usize];

    /// Classes per logit row, if logits are available.
    fn logit_classes(&self) -> Option<usize>;

    /// Targets for the sequence at `index` of the dataset being served.
    fn output(&self, index: usize, seq: &TokenSequence) -> Result<TeacherOutput>;

    /// Hash of the teacher's parameters, for frozen-ness checks.
    fn fingerprint(&self) -> u64;
}

/// Computes targets for every sequence, in order.
pub fn precompute(teacher: &dyn Teacher, seqs: &[TokenSequence], exec: Execution) -> Result<Vec<TeacherOutput>> {
    par::map_range(exec, seqs.len(), |i| teacher.output(i, &seqs[i]))
        .into_iter()
        .collect()
}

pub fn build_teacher(spec: &TeacherSpec) -> Result<Box<dyn Teacher>> {
    spec.validate()?;
    match spec.kind {
        TeacherKind::Synthetic => Ok(Box::new(SyntheticTeacher::new(spec)?)),
        TeacherKind::FileBacked => {
            let path = spec.file.as_deref().unwrap_or(Path::new(""));
            let dump = load_dump(path)?;
            Ok(Box::new(FileTeacher::new(dump, &spec.layer_dims)?))
        }
    }
}

#[derive(Debug, Clone)]
struct SyntheticLayer {
    /// `[hidden, V]`
    expand: Vec<f64>,
    expand_bias: Vec<f64>,
    mean: Vec<f64>,
    /// `[rank, hidden]`
    whiten: Vec<f64>,
    sigma: Vec<f64>,
    /// Column-major basis: `rank + 1` columns of length `dim`; the last is the
    /// offset direction.
    basis: Vec<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct SyntheticTeacher {
    spec: TeacherSpec,
    layers: Vec<SyntheticLayer>,
    /// `[V, LOGIT_CLASSES]`
    logit_weight: Vec<f64>,
    logit_bias: Vec<f64>,
}

const TAG_EXPAND: u64 = 0x7E_A0;
const TAG_BASIS: u64 = 0x7E_A1;
const TAG_CALIB: u64 = 0x7E_A2;
const TAG_LOGIT: u64 = 0x7E_A3;
const TAG_NOISE: u64 = 0x7E_A4;
const TAG_SPIKE: u64 = 0x7E_A5;

/// Masked mean of the one-hot token vectors.
pub fn pooled_composition(seq: &TokenSequence) -> Result<[f64; Vocabulary::SIZE]> {
    let mut f = [0.0; Vocabulary::SIZE];
    let mut count = 0usize;
    for (&t, &m) in seq.tokens().iter().zip(seq.mask()) {
        if m {
            f[usize::from(t)] += 1.0;
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::Domain("teacher input has an all-false mask".into()));
    }
    f.iter_mut().for_each(|v| *v /= count as f64);
    Ok(f)
}

impl SyntheticTeacher {
    pub fn new(spec: &TeacherSpec) -> Result<Self> {
        spec.validate()?;
        if spec.kind != TeacherKind::Synthetic {
            return Err(Error::Config("spec does not describe a synthetic teacher".into()));
        }
        let syn = &spec.synthetic;
        let cal = &syn.calibration;
        let calib: Vec<[f64; Vocabulary::SIZE]> = (0..cal.count as u64)
            .map(|i| {
                let raw = cal.corpus.sequence(crate::rng::derive_seed(syn.seed, &[TAG_CALIB]), i);
                pooled_composition(&pad_or_truncate(&raw, cal.context_len))
            })
            .collect::<Result<_>>()?;

        let mut layers = Vec::with_capacity(spec.layer_dims.len());
        for (l, (&dim, &rank)) in spec.layer_dims.iter().zip(&syn.effective_rank).enumerate() {
            let mut rng = SeededRng::derived(syn.seed, &[TAG_EXPAND, l as u64]);
            let v = Vocabulary::SIZE;
            let expand: Vec<f64> = (0..syn.hidden * v).map(|_| rng.normal() * syn.gain).collect();
            let expand_bias: Vec<f64> = (0..syn.hidden).map(|_| rng.normal() * 0.5).collect();
            let partial = SyntheticLayer {
                expand,
                expand_bias,
                mean: vec![0.0; syn.hidden],
                whiten: Vec::new(),
                sigma: syn.singular_values(rank),
                basis: Vec::new(),
            };
            let hs: Vec<Vec<f64>> = calib.iter().map(|f| partial.hidden(f)).collect();
            let (mean, whiten) = whitening(&hs, rank, l)?;
            let mut brng = SeededRng::derived(syn.seed, &[TAG_BASIS, l as u64]);
            let basis = orthonormal_columns(dim, rank + 1, &mut brng);
            layers.push(SyntheticLayer {
                mean,
                whiten,
                basis,
                ..partial
            });
        }

        let mut lrng = SeededRng::derived(syn.seed, &[TAG_LOGIT]);
        let ls = syn.logits.scale;
        let logit_weight = (0..Vocabulary::SIZE * LOGIT_CLASSES).map(|_| lrng.normal() * ls).collect();
        let logit_bias = (0..LOGIT_CLASSES).map(|_| lrng.normal() * 0.5 * ls).collect();

        Ok(Self {
            spec: spec.clone(),
            layers,
            logit_weight,
            logit_bias,
        })
    }

    pub fn spec(&self) -> &TeacherSpec {
        &self.spec
    }

    /// Configured covariance eigenvalues `(scale σ_k)²` of layer `l`.
    pub fn expected_spectrum(&self, l: usize) -> Vec<f64> {
        let s2 = self.spec.synthetic.scale.powi(2);
        self.layers[l].sigma.iter().map(|s| s * s * s2).collect()
    }

    pub fn forward(&self, seq: &TokenSequence) -> Result<TeacherOutput> {
        let f = pooled_composition(seq)?;
        let syn = &self.spec.synthetic;
        let embeddings = self
            .layers
            .iter()
            .zip(&self.spec.layer_dims)
            .map(|(layer, &dim)| {
                let z = layer.whitened(&layer.hidden(&f));
                let mut e = vec![0.0f64; dim];
                for (k, (&zk, &sk)) in z.iter().zip(&layer.sigma).enumerate() {
                    for (o, &b) in e.iter_mut().zip(&layer.basis[k]) {
                        *o += sk * zk * b;
                    }
                }
                let off = &layer.basis[layer.sigma.len()];
                e.iter()
                    .zip(off)
                    .map(|(&v, &b)| (syn.scale * (v + syn.offset * b)) as f32)
                    .collect()
            })
            .collect();
        let logits = syn.emit_logits.then(|| self.logits(seq));
        Ok(TeacherOutput { embeddings, logits })
    }

    fn logits(&self, seq: &TokenSequence) -> Vec<f32> {
        let ls = self.spec.synthetic.logits;
        let seed = self.spec.synthetic.seed;
        let key = fnv1a(seq.tokens()) ^ (seq.original_length() as u64).rotate_left(32);
        let spiky = SeededRng::derived(seed, &[TAG_SPIKE, key]).uniform() < ls.spike_prob;
        let amp = ls.noise * if spiky { ls.spike_scale } else { 1.0 };
        let mut out = Vec::with_capacity(seq.context_len() * LOGIT_CLASSES);
        for (p, &t) in seq.tokens().iter().enumerate() {
            let row = &self.logit_weight[usize::from(t) * LOGIT_CLASSES..][..LOGIT_CLASSES];
            let mut rng = (amp > 0.0).then(|| SeededRng::derived(seed, &[TAG_NOISE, key, p as u64]));
            for (&w, &b) in row.iter().zip(&self.logit_bias) {
                let noise = rng.as_mut().map_or(0.0, |r| amp * r.normal());
                out.push((w + b + noise) as f32);
            }
        }
        out
    }
}

impl SyntheticLayer {
    fn hidden(&self, f: &[f64]) -> Vec<f64> {
        let v = f.len();
        self.expand_bias
            .iter()
            .enumerate()
            .map(|(j, &b)| {
                let a = &self.expand[j * v..(j + 1) * v];
                (a.iter().zip(f).map(|(x, y)| x * y).sum::<f64>() + b).tanh()
            })
            .collect()
    }

    fn whitened(&self, h: &[f64]) -> Vec<f64> {
        let centered: Vec<f64> = h.iter().zip(&self.mean).map(|(a, m)| a - m).collect();
        self.whiten
            .chunks(h.len())
            .map(|row| row.iter().zip(&centered).map(|(a, b)| a * b).sum())
            .collect()
    }
}

/// Mean and `rank x hidden` whitening rows `λ_k^{-1/2} p_k^T` for the top
/// `rank` principal directions of `hs`.
fn whitening(hs: &[Vec<f64>], rank: usize, layer: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    let n = hs.len();
    let d = hs[0].len();
    let mut mean = vec![0.0; d];
    for h in hs {
        mean.iter_mut().zip(h).for_each(|(m, v)| *m += v);
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut cov = DMatrix::<f64>::zeros(d, d);
    for h in hs {
        let c: Vec<f64> = h.iter().zip(&mean).map(|(a, m)| a - m).collect();
        for i in 0..d {
            for j in i..d {
                cov[(i, j)] += c[i] * c[j];
            }
        }
    }
    for i in 0..d {
        for j in i..d {
            let v = cov[(i, j)] / n as f64;
            cov[(i, j)] = v;
            cov[(j, i)] = v;
        }
    }
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let top = eig.eigenvalues[order[0]];
    let last = eig.eigenvalues[order[rank - 1]];
    if !(top > 0.0) || last < top * RESOLVABLE_RATIO {
        return Err(Error::Config(format!(
            "layer {layer}: effective rank {rank} exceeds the resolvable rank of the teacher features"
        )));
    }
    let mut whiten = Vec::with_capacity(rank * d);
    for &k in &order[..rank] {
        let col = eig.eigenvectors.column(k);
        // Fix the sign so the largest-magnitude entry is positive.
        let pivot = col.iter().copied().fold(0.0f64, |a, v| if v.abs() > a.abs() { v } else { a });
        let sign = if pivot < 0.0 { -1.0 } else { 1.0 };
        let s = sign / eig.eigenvalues[k].sqrt();
        whiten.extend(col.iter().map(|v| v * s));
    }
    Ok((mean, whiten))
}

/// `k` orthonormal vectors of length `dim` by modified Gram-Schmidt on
/// Gaussian draws.
fn orthonormal_columns(dim: usize, k: usize, rng: &mut SeededRng) -> Vec<Vec<f64>> {
    let mut cols: Vec<Vec<f64>> = Vec::with_capacity(k);
    while cols.len() < k {
        let mut v: Vec<f64> = (0..dim).map(|_| rng.normal()).collect();
        for c in &cols {
            let p: f64 = v.iter().zip(c).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(c).for_each(|(a, b)| *a -= p * b);
        }
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm > 1e-6 {
            v.iter_mut().for_each(|a| *a /= norm);
            cols.push(v);
        }
    }
    cols
}

fn hash_f64s(h: u64, vs: &[f64]) -> u64 {
    vs.iter().fold(h, |acc, v| crate::rng::mix64(acc ^ v.to_bits()))
}

impl Teacher for SyntheticTeacher {
    fn layer_dims(&self) -> &[usize] {
        &self.spec.layer_dims
    }

    fn logit_classes(&self) -> Option<usize> {
        self.spec.synthetic.emit_logits.then_some(LOGIT_CLASSES)
    }

    fn output(&self, _index: usize, seq: &TokenSequence) -> Result<TeacherOutput> {
        self.forward(seq)
    }

    fn fingerprint(&self) -> u64 {
        let syn = &self.spec.synthetic;
        let ls = syn.logits;
        let mut h = hash_f64s(u64::from(syn.emit_logits), &[ls.noise, ls.spike_prob, ls.spike_scale]);
        h = hash_f64s(h, &self.logit_weight);
        h = hash_f64s(h, &self.logit_bias);
        for l in &self.layers {
            for part in [&l.expand, &l.expand_bias, &l.mean, &l.whiten, &l.sigma] {
                h = hash_f64s(h, part);
            }
            for b in &l.basis {
                h = hash_f64s(h, b);
            }
        }
        h
    }
}

/// Targets read from a dump, served by dataset index.
#[derive(Debug, Clone)]
pub struct FileTeacher {
    dump: TeacherDump,
}

impl FileTeacher {
    /// Fails with a format error when the dump's layer dimensions differ from
    /// `expected_dims`.
    pub fn new(dump: TeacherDump, expected_dims: &[usize]) -> Result<Self> {
        if dump.layer_dims != expected_dims {
            return Err(Error::Format(format!(
                "teacher dump has layer dims {:?}, expected {:?}",
                dump.layer_dims, expected_dims
            )));
        }
        Ok(Self { dump })
    }
}

impl Teacher for FileTeacher {
    fn layer_dims(&self) -> &[usize] {
        &self.dump.layer_dims
    }

    fn logit_classes(&self) -> Option<usize> {
        self.dump.logit_shape.map(|(_, c)| c)
    }

    fn output(&self, index: usize, seq: &TokenSequence) -> Result<TeacherOutput> {
        let out = self.dump.outputs.get(index).ok_or_else(|| {
            Error::Contract(format!(
                "sequence {index} is beyond the {} entries of the teacher dump",
                self.dump.outputs.len()
            ))
        })?;
        if let Some((l, _)) = self.dump.logit_shape {
            if l != seq.context_len() {
                return Err(Error::Shape(format!(
                    "dump logits cover {l} positions, sequence has {}",
                    seq.context_len()
                )));
            }
        }
        Ok(out.clone())
    }

    fn fingerprint(&self) -> u64 {
        let mut h = 0u64;
        for o in &self.dump.outputs {
            for e in &o.embeddings {
                h = e.iter().fold(h, |a, v| crate::rng::mix64(a ^ u64::from(v.to_bits())));
            }
        }
        h
    }
}

/// Contents of a "TEMBDUMP" file.
#[derive(Debug, Clone, PartialEq)]
pub struct TeacherDump {
    pub layer_dims: Vec<usize>,
    /// `(positions, classes)` when logits are stored.
    pub logit_shape: Option<(usize, usize)>,
    pub outputs: Vec<TeacherOutput>,
}

const DUMP_MAGIC: &[u8; 8] = b"TEMBDUMP";
const DUMP_VERSION: u16 = 1;

fn to_u32(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::Format(format!("{what} exceeds u32")))
}

pub fn write_dump(path: &Path, dump: &TeacherDump) -> Result<()> {
    if dump.layer_dims.is_empty() {
        return Err(Error::Contract("teacher dump needs at least one layer".into()));
    }
    for (i, o) in dump.outputs.iter().enumerate() {
        let dims: Vec<usize> = o.embeddings.iter().map(Vec::len).collect();
        if dims != dump.layer_dims {
            return Err(Error::Shape(format!(
                "output {i} has layer dims {dims:?}, dump declares {:?}",
                dump.layer_dims
            )));
        }
        let want = dump.logit_shape.map(|(l, c)| l * c);
        if o.logits.as_ref().map(Vec::len) != want {
            return Err(Error::Shape(format!("output {i} logits disagree with the dump header")));
        }
    }
    let file = File::create(path).map_err(|e| Error::io_at(path, e))?;
    let mut w = LeWriter::new(BufWriter::new(file));
    w.bytes(DUMP_MAGIC)?;
    w.u16(DUMP_VERSION)?;
    w.u16(u16::try_from(dump.layer_dims.len()).map_err(|_| Error::Format("too many layers".into()))?)?;
    for &d in &dump.layer_dims {
        w.u32(to_u32(d, "layer dimension")?)?;
    }
    w.u64(dump.outputs.len() as u64)?;
    match dump.logit_shape {
        Some((l, c)) => {
            w.u8(1)?;
            w.u32(to_u32(l, "logit positions")?)?;
            w.u32(to_u32(c, "logit classes")?)?;
        }
        None => w.u8(0)?,
    }
    for o in &dump.outputs {
        for e in &o.embeddings {
            w.f32s(e)?;
        }
    }
    for o in &dump.outputs {
        if let Some(l) = &o.logits {
            w.f32s(l)?;
        }
    }
    w.into_inner().flush()?;
    Ok(())
}

pub fn load_dump(path: &Path) -> Result<TeacherDump> {
    let file = File::open(path).map_err(|e| Error::io_at(path, e))?;
    let mut r = LeReader::new(BufReader::new(file), "teacher dump");
    r.magic(DUMP_MAGIC)?;
    r.version(DUMP_VERSION)?;
    let layers = usize::from(r.u16()?);
    if layers == 0 {
        return Err(Error::Format("teacher dump: zero layers".into()));
    }
    let layer_dims = (0..layers).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
    let count = r.u64()?;
    let logit_shape = match r.u8()? {
        0 => None,
        1 => Some((r.u32()? as usize, r.u32()? as usize)),
        f => return Err(Error::Format(format!("teacher dump: bad logits flag {f}"))),
    };
    let mut outputs = Vec::new();
    for _ in 0..count {
        let embeddings = layer_dims.iter().map(|&d| r.f32s(d)).collect::<Result<Vec<_>>>()?;
        outputs.push(TeacherOutput { embeddings, logits: None });
    }
    if let Some((l, c)) = logit_shape {
        for o in &mut outputs {
            o.logits = Some(r.f32s(l * c)?);
        }
    }
    r.finish()?;
    Ok(TeacherDump {
        layer_dims,
        logit_shape,
        outputs,
    })
}
