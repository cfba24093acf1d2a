//! Tokenized datasets, train/validation splits and a seeded synthetic
//! mRNA-like corpus for desk-scale runs.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{derive_seed, SeededRng};
use crate::tokenizer::{pad_or_truncate, read_token_file, write_token_file, TokenId, TokenSequence, Vocabulary};

/// Sequences sharing one context length.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenDataset {
    context_len: usize,
    sequences: Vec<TokenSequence>,
}

impl TokenDataset {
    pub fn new(context_len: usize, sequences: Vec<TokenSequence>) -> Result<Self> {
        if context_len == 0 {
            return Err(Error::Config("context length must be at least 1".into()));
        }
        if let Some(bad) = sequences.iter().find(|s| s.context_len() != context_len) {
            return Err(Error::Shape(format!(
                "sequence has context {} but dataset context is {context_len}",
                bad.context_len()
            )));
        }
        Ok(Self { context_len, sequences })
    }

    pub fn from_token_ids(context_len: usize, raw: &[Vec<TokenId>]) -> Result<Self> {
        let seqs = raw.iter().map(|t| pad_or_truncate(t, context_len)).collect();
        Self::new(context_len, seqs)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (context_len, sequences) = read_token_file(path)?;
        Self::new(context_len, sequences)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_token_file(path, self.context_len, &self.sequences)
    }

    pub fn context_len(&self) -> usize {
        self.context_len
    }

    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    pub fn get(&self, i: usize) -> &TokenSequence {
        &self.sequences[i]
    }

    pub fn sequences(&self) -> &[TokenSequence] {
        &self.sequences
    }

    /// Sequences with no real token cannot be pooled; they are dropped.
    pub fn without_empty(self) -> (Self, usize) {
        let before = self.sequences.len();
        let sequences: Vec<_> = self.sequences.into_iter().filter(|s| s.valid_len() > 0).collect();
        let dropped = before - sequences.len();
        (
            Self {
                context_len: self.context_len,
                sequences,
            },
            dropped,
        )
    }
}

/// Deterministic train/validation partition by hashed sequence index.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
}

/// Sends index `i` to validation when its seeded hash falls below
/// `val_fraction`. At least one index lands on each side when `n >= 2`.
pub fn split_indices(n: usize, val_fraction: f64, seed: u64) -> Result<Split> {
    if !(0.0..1.0).contains(&val_fraction) {
        return Err(Error::Config(format!("validation fraction must be in [0, 1), got {val_fraction}")));
    }
    let mut train = Vec::new();
    let mut val = Vec::new();
    let scores: Vec<f64> = (0..n)
        .map(|i| (derive_seed(seed, &[0x5711_7000, i as u64]) >> 11) as f64 / (1u64 << 53) as f64)
        .collect();
    for (i, &u) in scores.iter().enumerate() {
        if u < val_fraction {
            val.push(i);
        } else {
            train.push(i);
        }
    }
    if n >= 2 && val_fraction > 0.0 && val.is_empty() {
        let lowest = (0..n).min_by(|&a, &b| scores[a].total_cmp(&scores[b])).unwrap_or(0);
        train.retain(|&i| i != lowest);
        val.push(lowest);
    }
    if n >= 2 && train.is_empty() {
        train.push(val.remove(val.len() - 1));
    }
    Ok(Split { train, val })
}

/// Parameters for the synthetic corpus.
///
/// Each sequence draws its own base composition from a Dirichlet-like
/// distribution, so pooled composition varies across the corpus the way GC
/// content does across real transcripts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusSpec {
    pub count: usize,
    pub min_len: usize,
    pub max_len: usize,
    /// Concentration of the per-sequence composition draw; lower is more varied.
    pub concentration: f64,
    /// Upper bound of the per-sequence ambiguous-base rate.
    pub max_n_rate: f64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self {
            count: 2048,
            min_len: 64,
            max_len: 256,
            concentration: 4.0,
            max_n_rate: 0.05,
        }
    }
}

impl CorpusSpec {
    pub fn validate(&self) -> Result<()> {
        if self.min_len == 0 || self.min_len > self.max_len {
            return Err(Error::Config(format!(
                "corpus lengths must satisfy 1 <= min_len <= max_len, got {}..{}",
                self.min_len, self.max_len
            )));
        }
        if !(self.concentration > 0.0) || !(0.0..1.0).contains(&self.max_n_rate) {
            return Err(Error::Config("corpus concentration must be > 0 and max_n_rate in [0, 1)".into()));
        }
        Ok(())
    }

    /// Raw (unpadded) token ids for sequence `index`; independent of `count`.
    pub fn sequence(&self, seed: u64, index: u64) -> Vec<TokenId> {
        let mut rng = SeededRng::derived(seed, &[0xC0_4905, index]);
        let len = rng.range(self.min_len, self.max_len + 1);
        let mut weights = [0.0f64; 4];
        for w in &mut weights {
            *w = gamma(&mut rng, self.concentration);
        }
        let total: f64 = weights.iter().sum();
        let n_rate = rng.uniform() * self.max_n_rate;
        let mut cdf = [0.0f64; 4];
        let mut acc = 0.0;
        for (c, w) in cdf.iter_mut().zip(weights) {
            acc += w / total;
            *c = acc;
        }
        (0..len)
            .map(|_| {
                if rng.uniform() < n_rate {
                    return Vocabulary::N;
                }
                let u = rng.uniform();
                let k = cdf.iter().position(|&c| u < c).unwrap_or(3);
                Vocabulary::A + k as TokenId
            })
            .collect()
    }

    pub fn generate(&self, seed: u64) -> Result<Vec<Vec<TokenId>>> {
        self.validate()?;
        Ok((0..self.count as u64).map(|i| self.sequence(seed, i)).collect())
    }

    pub fn dataset(&self, seed: u64, context_len: usize) -> Result<TokenDataset> {
        TokenDataset::from_token_ids(context_len, &self.generate(seed)?)
    }
}

/// Marsaglia-Tsang gamma sampler (shape `k`, unit scale).
fn gamma(rng: &mut SeededRng, k: f64) -> f64 {
    if k < 1.0 {
        let u = rng.uniform().max(f64::MIN_POSITIVE);
        return gamma(rng, k + 1.0) * u.powf(1.0 / k);
    }
    let d = k - 1.0 / 3.0;
    let c = 1.0 / (9.0 * d).sqrt();
    loop {
        let x = rng.normal();
        let v = (1.0 + c * x).powi(3);
        if v <= 0.0 {
            continue;
        }
        let u = rng.uniform();
        if u.ln() < 0.5 * x * x + d - d * v + d * v.ln() {
            return d * v;
        }
    }
}
