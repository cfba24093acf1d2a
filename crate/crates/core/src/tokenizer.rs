//! Per-nucleotide tokenisation.
//!
//! Vocabulary: `PAD=0, A=1, C=2, G=3, T=4, N=5`. `U` shares `T`'s id and
//! every IUPAC ambiguity code collapses to `N`.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use crate::error::{Error, Result};
use crate::io::{LeReader, LeWriter};

pub type TokenId = u8;

/// Fixed per-nucleotide vocabulary.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Vocabulary;

impl Vocabulary {
    pub const PAD: TokenId = 0;
    pub const A: TokenId = 1;
    pub const C: TokenId = 2;
    pub const G: TokenId = 3;
    pub const T: TokenId = 4;
    pub const N: TokenId = 5;
    pub const SIZE: usize = 6;

    pub fn symbol(id: TokenId) -> Option<char> {
        match id {
            Self::A => Some('A'),
            Self::C => Some('C'),
            Self::G => Some('G'),
            Self::T => Some('T'),
            Self::N => Some('N'),
            _ => None,
        }
    }
}

/// Characters accepted by the ingest alphabet (upper case).
pub fn is_nucleotide(c: char) -> bool {
    token_for(c).is_some()
}

fn token_for(c: char) -> Option<TokenId> {
    match c.to_ascii_uppercase() {
        'A' => Some(Vocabulary::A),
        'C' => Some(Vocabulary::C),
        'G' => Some(Vocabulary::G),
        'T' | 'U' => Some(Vocabulary::T),
        'N' | 'R' | 'Y' | 'S' | 'W' | 'K' | 'M' | 'B' | 'D' | 'H' | 'V' => Some(Vocabulary::N),
        _ => None,
    }
}

pub fn encode(sequence: &str) -> Result<Vec<TokenId>> {
    sequence
        .chars()
        .enumerate()
        .map(|(position, c)| token_for(c).ok_or(Error::Encoding { position, found: c }))
        .collect()
}

pub fn decode(tokens: &[TokenId]) -> Result<String> {
    tokens
        .iter()
        .enumerate()
        .map(|(position, &id)| Vocabulary::symbol(id).ok_or(Error::Decoding { position, id }))
        .collect()
}

/// Upper-cases, maps `U` to `T` and ambiguity codes to `N`. Characters
/// outside the alphabet pass through unchanged.
pub fn canonicalize(sequence: &str) -> String {
    sequence
        .chars()
        .map(|c| token_for(c).and_then(Vocabulary::symbol).unwrap_or(c))
        .collect()
}

/// Tokens padded or truncated to a fixed context length.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    tokens: Vec<TokenId>,
    mask: Vec<bool>,
    original_length: usize,
}

impl TokenSequence {
    pub fn tokens(&self) -> &[TokenId] {
        &self.tokens
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn original_length(&self) -> usize {
        self.original_length
    }

    pub fn context_len(&self) -> usize {
        self.tokens.len()
    }

    /// Number of real (unmasked) positions.
    pub fn valid_len(&self) -> usize {
        self.original_length.min(self.tokens.len())
    }

    pub fn ids(&self) -> Vec<usize> {
        self.tokens.iter().map(|&t| usize::from(t)).collect()
    }
}

/// Keeps the 5' end of long sequences; right-pads short ones with PAD.
pub fn pad_or_truncate(tokens: &[TokenId], context_len: usize) -> TokenSequence {
    let keep = tokens.len().min(context_len);
    let mut out = Vec::with_capacity(context_len);
    out.extend_from_slice(&tokens[..keep]);
    out.resize(context_len, Vocabulary::PAD);
    let mask = (0..context_len).map(|i| i < keep).collect();
    TokenSequence {
        tokens: out,
        mask,
        original_length: tokens.len(),
    }
}

const TOKENS_MAGIC: &[u8; 8] = b"MRNATOKS";
const TOKENS_VERSION: u16 = 1;

pub fn write_token_file(path: &Path, context_len: usize, seqs: &[TokenSequence]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io_at(path, e))?;
    let mut w = LeWriter::new(BufWriter::new(file));
    w.bytes(TOKENS_MAGIC)?;
    w.u16(TOKENS_VERSION)?;
    w.u32(u32::try_from(context_len).map_err(|_| Error::Format("context length exceeds u32".into()))?)?;
    w.u64(seqs.len() as u64)?;
    for s in seqs {
        if s.context_len() != context_len {
            return Err(Error::Shape(format!(
                "sequence has context {} but file context is {context_len}",
                s.context_len()
            )));
        }
        let orig = u32::try_from(s.original_length).map_err(|_| Error::Format("original length exceeds u32".into()))?;
        w.u32(orig)?;
        w.bytes(&s.tokens)?;
    }
    use std::io::Write;
    w.into_inner().flush()?;
    Ok(())
}

/// Returns `(context_len, sequences)`.
pub fn read_token_file(path: &Path) -> Result<(usize, Vec<TokenSequence>)> {
    let file = File::open(path).map_err(|e| Error::io_at(path, e))?;
    let mut r = LeReader::new(BufReader::new(file), "token file");
    r.magic(TOKENS_MAGIC)?;
    r.version(TOKENS_VERSION)?;
    let context_len = r.u32()? as usize;
    if context_len == 0 {
        return Err(Error::Format("token file: zero context length".into()));
    }
    let count = r.u64()?;
    let mut seqs = Vec::new();
    for _ in 0..count {
        let original_length = r.u32()? as usize;
        let tokens = r.vec(context_len)?;
        let valid = original_length.min(context_len);
        for (i, &t) in tokens.iter().enumerate() {
            let ok = if i < valid {
                t != Vocabulary::PAD && usize::from(t) < Vocabulary::SIZE
            } else {
                t == Vocabulary::PAD
            };
            if !ok {
                return Err(Error::Format(format!(
                    "token file: id {t} at position {i} inconsistent with length {original_length}"
                )));
            }
        }
        seqs.push(TokenSequence {
            mask: (0..context_len).map(|i| i < valid).collect(),
            tokens,
            original_length,
        });
    }
    r.finish()?;
    Ok((context_len, seqs))
}
