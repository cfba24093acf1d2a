//! GenBank flat-file ingest.
//!
//! [`GbffReader`] streams `LOCUS ... //` blocks out of a RefSeq release file
//! (plain or gzip), keeping only the accession, molecule type, organism,
//! lineage and the `ORIGIN` sequence. Feature tables are skipped.
//! Records are labelled with a [`Category`] from their lineage,
//! [`subsample`]d towards per-category target fractions, and stored as
//! `MRNASHRD` shards.

use std::collections::{BTreeMap, BinaryHeap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use flate2::read::MultiGzDecoder;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{LeReader, LeWriter};
use crate::rng::SeededRng;
use crate::tokenizer::is_nucleotide;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    Mammal,
    OtherVertebrate,
    Invertebrate,
    Viral,
    Other,
}

impl Category {
    pub const ALL: [Category; 5] = [
        Category::Mammal,
        Category::OtherVertebrate,
        Category::Invertebrate,
        Category::Viral,
        Category::Other,
    ];

    /// Byte used in shard files.
    pub fn code(self) -> u8 {
        match self {
            Category::Mammal => 0,
            Category::OtherVertebrate => 1,
            Category::Invertebrate => 2,
            Category::Viral => 3,
            Category::Other => 4,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Self::ALL.get(usize::from(code)).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Category::Mammal => "mammal",
            Category::OtherVertebrate => "other_vertebrate",
            Category::Invertebrate => "invertebrate",
            Category::Viral => "viral",
            Category::Other => "other",
        }
    }

    /// Parses a category name or a RefSeq release directory name
    /// (`vertebrate_mammalian`, `vertebrate_other`, `invertebrate`, `viral`).
    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_lowercase().as_str() {
            "mammal" | "vertebrate_mammalian" => Some(Category::Mammal),
            "other_vertebrate" | "vertebrate_other" => Some(Category::OtherVertebrate),
            "invertebrate" => Some(Category::Invertebrate),
            "viral" | "virus" => Some(Category::Viral),
            "other" => Some(Category::Other),
            _ => None,
        }
    }
}

/// Lineage keyword rules, checked in order.
pub fn categorize<S: AsRef<str>>(lineage: &[S]) -> Category {
    let has = |name: &str| lineage.iter().any(|t| t.as_ref() == name);
    if has("Mammalia") {
        Category::Mammal
    } else if has("Vertebrata") || has("Craniata") {
        Category::OtherVertebrate
    } else if has("Viruses") {
        Category::Viral
    } else if has("Metazoa") {
        Category::Invertebrate
    } else {
        Category::Other
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenBankRecord {
    pub accession: String,
    pub molecule_type: String,
    pub organism: String,
    pub lineage: Vec<String>,
    pub category: Category,
    /// Upper-case, over the ingest alphabet.
    pub sequence: String,
}

impl GenBankRecord {
    pub fn to_shard_record(&self) -> ShardRecord {
        ShardRecord {
            accession: self.accession.clone(),
            category: self.category,
            sequence: self.sequence.clone(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngestStats {
    pub records_seen: u64,
    pub records_kept: u64,
    pub per_category: BTreeMap<Category, u64>,
    pub parse_errors: u64,
}

impl IngestStats {
    pub fn merge(&mut self, other: &IngestStats) {
        self.records_seen += other.records_seen;
        self.records_kept += other.records_kept;
        self.parse_errors += other.parse_errors;
        for (&c, &n) in &other.per_category {
            *self.per_category.entry(c).or_default() += n;
        }
    }

    fn keep(&mut self, c: Category) {
        self.records_kept += 1;
        *self.per_category.entry(c).or_default() += 1;
    }
}

/// Opens a byte stream as lines, decompressing when `gzip` is set.
pub fn open_stream<'a, R: Read + 'a>(reader: R, gzip: bool) -> Box<dyn BufRead + 'a> {
    if gzip {
        Box::new(BufReader::new(MultiGzDecoder::new(reader)))
    } else {
        Box::new(BufReader::new(reader))
    }
}

/// Streams records from a GenBank flat file; see [`parse_gbff`].
pub struct GbffReader<R> {
    reader: R,
    line: Vec<u8>,
    pending: Option<String>,
    stats: IngestStats,
    category_override: Option<Category>,
    done: bool,
}

/// Lazily parses a GenBank release stream. Malformed blocks are counted in
/// [`GbffReader::stats`] and skipped; I/O failures are yielded as errors and
/// end the stream.
pub fn parse_gbff<'a, R: Read + 'a>(reader: R, gzip: bool) -> GbffReader<Box<dyn BufRead + 'a>> {
    GbffReader::new(open_stream(reader, gzip))
}

impl<R: BufRead> GbffReader<R> {
    pub fn new(reader: R) -> Self {
        Self {
            reader,
            line: Vec::new(),
            pending: None,
            stats: IngestStats::default(),
            category_override: None,
            done: false,
        }
    }

    /// Labels every record with `category` instead of using its lineage
    /// (for files whose release directory is known).
    pub fn with_category(mut self, category: Option<Category>) -> Self {
        self.category_override = category;
        self
    }

    pub fn stats(&self) -> &IngestStats {
        &self.stats
    }

    fn next_line(&mut self) -> std::io::Result<Option<String>> {
        if let Some(l) = self.pending.take() {
            return Ok(Some(l));
        }
        self.line.clear();
        if self.reader.read_until(b'\n', &mut self.line)? == 0 {
            return Ok(None);
        }
        let text = String::from_utf8_lossy(&self.line);
        Ok(Some(text.trim_end_matches(['\n', '\r']).to_string()))
    }

    /// Reads one block after its LOCUS line. `Ok(None)` marks a malformed or
    /// truncated block.
    fn read_block(&mut self, locus: &str) -> std::io::Result<Option<GenBankRecord>> {
        let mut fields = locus.split_whitespace().skip(1);
        let locus_name = fields.next().map(str::to_string);
        let molecule_type = {
            let rest: Vec<&str> = locus.split_whitespace().collect();
            rest.iter()
                .position(|t| *t == "bp" || *t == "aa")
                .and_then(|i| rest.get(i + 1))
                .map(|s| s.to_string())
        };
        let mut malformed = locus_name.is_none() || molecule_type.is_none();

        let mut accession: Option<String> = None;
        let mut organism = String::new();
        let mut lineage_text = String::new();
        let mut in_lineage = false;
        let mut in_origin = false;
        let mut saw_origin = false;
        let mut sequence = String::new();

        loop {
            let Some(line) = self.next_line()? else {
                // Truncated before "//".
                return Ok(None);
            };
            if line.starts_with("//") {
                break;
            }
            if line.starts_with("LOCUS") {
                // Next record began without a terminator.
                self.pending = Some(line);
                return Ok(None);
            }
            if in_origin {
                for c in line.chars() {
                    if c.is_ascii_digit() || c.is_whitespace() {
                        continue;
                    }
                    if is_nucleotide(c) {
                        sequence.push(c.to_ascii_uppercase());
                    } else {
                        malformed = true;
                    }
                }
                continue;
            }
            let continuation = line.len() > 12 && line.as_bytes()[..12].iter().all(|&b| b == b' ');
            if in_lineage {
                if continuation {
                    lineage_text.push(' ');
                    lineage_text.push_str(line.trim());
                    continue;
                }
                in_lineage = false;
            }
            if let Some(rest) = line.strip_prefix("ACCESSION") {
                if accession.is_none() {
                    accession = rest.split_whitespace().next().map(str::to_string);
                }
            } else if let Some(rest) = line.trim_start().strip_prefix("ORGANISM") {
                if line.starts_with("  ") {
                    organism = rest.trim().to_string();
                    in_lineage = true;
                }
            } else if line.starts_with("ORIGIN") {
                in_origin = true;
                saw_origin = true;
            }
        }

        let accession = accession.or(locus_name).filter(|a| !a.is_empty());
        if malformed || !saw_origin || sequence.is_empty() || accession.is_none() {
            return Ok(None);
        }
        let lineage: Vec<String> = lineage_text
            .split(';')
            .map(|t| t.trim().trim_end_matches('.').trim().to_string())
            .filter(|t| !t.is_empty())
            .collect();
        let category = self.category_override.unwrap_or_else(|| categorize(&lineage));
        Ok(Some(GenBankRecord {
            accession: accession.unwrap_or_default(),
            molecule_type: molecule_type.unwrap_or_default(),
            organism,
            lineage,
            category,
            sequence,
        }))
    }
}

impl<R: BufRead> Iterator for GbffReader<R> {
    type Item = Result<GenBankRecord>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.done {
            return None;
        }
        loop {
            let line = match self.next_line() {
                Ok(Some(l)) => l,
                Ok(None) => {
                    self.done = true;
                    return None;
                }
                Err(e) => {
                    self.done = true;
                    return Some(Err(e.into()));
                }
            };
            if !line.starts_with("LOCUS") {
                continue;
            }
            self.stats.records_seen += 1;
            match self.read_block(&line) {
                Ok(Some(rec)) => {
                    self.stats.keep(rec.category);
                    return Some(Ok(rec));
                }
                Ok(None) => self.stats.parse_errors += 1,
                Err(e) => {
                    self.stats.parse_errors += 1;
                    self.done = true;
                    return Some(Err(e.into()));
                }
            }
        }
    }
}

/// Target fraction per category; must sum to 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryTargets {
    fractions: BTreeMap<Category, f64>,
}

impl CategoryTargets {
    pub fn new(fractions: BTreeMap<Category, f64>) -> Result<Self> {
        if fractions.values().any(|&f| !(0.0..=1.0).contains(&f) || !f.is_finite()) {
            return Err(Error::Config("category fractions must lie in [0, 1]".into()));
        }
        let sum: f64 = fractions.values().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("category fractions sum to {sum}, expected 1")));
        }
        Ok(Self { fractions })
    }

    /// RefSeq release mix: 43.6% other vertebrates, 28.3% mammals, 26.4%
    /// invertebrates, 1.6% viruses. The remaining 0.1% goes to `Other`.
    pub fn refseq_release() -> Self {
        Self::from_percentages(&[43.6, 28.3, 26.4, 1.6]).expect("valid default targets")
    }

    /// Percentages in release order: other vertebrates, mammals,
    /// invertebrates, viruses, and optionally other. With four values the
    /// remainder up to 100 is assigned to `Other`.
    pub fn from_percentages(pcts: &[f64]) -> Result<Self> {
        let order = [
            Category::OtherVertebrate,
            Category::Mammal,
            Category::Invertebrate,
            Category::Viral,
            Category::Other,
        ];
        if !(4..=5).contains(&pcts.len()) {
            return Err(Error::Config(format!("expected 4 or 5 percentages, got {}", pcts.len())));
        }
        let mut fractions: BTreeMap<Category, f64> = order.iter().zip(pcts).map(|(&c, &p)| (c, p / 100.0)).collect();
        if pcts.len() == 4 {
            let rest = 1.0 - fractions.values().sum::<f64>();
            if rest < -1e-9 {
                return Err(Error::Config(format!("percentages sum to {} > 100", pcts.iter().sum::<f64>())));
            }
            fractions.insert(Category::Other, rest.max(0.0));
        }
        Self::new(fractions)
    }

    pub fn fraction(&self, c: Category) -> f64 {
        self.fractions.get(&c).copied().unwrap_or(0.0)
    }

    pub fn sum(&self) -> f64 {
        self.fractions.values().sum()
    }
}

/// Largest-remainder rounding of `total * fraction` so quotas add to `total`.
fn quotas(targets: &CategoryTargets, total: u64) -> BTreeMap<Category, u64> {
    let raw: Vec<(Category, f64)> = Category::ALL.iter().map(|&c| (c, targets.fraction(c) * total as f64)).collect();
    let mut q: BTreeMap<Category, u64> = raw.iter().map(|&(c, x)| (c, x.floor() as u64)).collect();
    let assigned: u64 = q.values().sum();
    let mut rema: Vec<(Category, f64)> = raw.iter().map(|&(c, x)| (c, x - x.floor())).collect();
    rema.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    for (c, _) in rema.iter().take(total.saturating_sub(assigned) as usize) {
        *q.get_mut(c).expect("category present") += 1;
    }
    q
}

/// Splits `total` across categories, capping each at what is available and
/// handing any shortfall to categories with spare records in proportion to
/// their targets.
fn allocate(targets: &CategoryTargets, total: u64, available: &BTreeMap<Category, u64>) -> BTreeMap<Category, u64> {
    let avail = |c: Category| available.get(&c).copied().unwrap_or(0);
    let mut take = quotas(targets, total);
    loop {
        let mut shortfall = 0u64;
        for c in Category::ALL {
            let t = take.get_mut(&c).expect("category present");
            if *t > avail(c) {
                shortfall += *t - avail(c);
                *t = avail(c);
            }
        }
        if shortfall == 0 {
            break;
        }
        let open: Vec<Category> = Category::ALL.iter().copied().filter(|&c| take[&c] < avail(c)).collect();
        if open.is_empty() {
            break;
        }
        let weight: f64 = open.iter().map(|&c| targets.fraction(c)).sum();
        // Categories with zero target share evenly when nothing else is open.
        let share = |c: Category| {
            if weight > 0.0 {
                targets.fraction(c) / weight
            } else {
                1.0 / open.len() as f64
            }
        };
        let mut given = 0u64;
        let mut parts: Vec<(Category, f64)> = open.iter().map(|&c| (c, shortfall as f64 * share(c))).collect();
        for (c, x) in &parts {
            let n = x.floor() as u64;
            *take.get_mut(c).expect("category present") += n;
            given += n;
        }
        parts.sort_by(|a, b| (b.1 - b.1.floor()).total_cmp(&(a.1 - a.1.floor())).then(a.0.cmp(&b.0)));
        for (c, _) in parts.iter().take((shortfall - given) as usize) {
            *take.get_mut(c).expect("category present") += 1;
        }
    }
    take
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
struct Keyed {
    key: u64,
    index: usize,
}

/// Seeded per-category reservoir subsampling.
///
/// Each record draws a random key in stream order; each category keeps the
/// `total` smallest keys it has seen (bottom-k reservoir). Quotas are then
/// `round(total * fraction)` with shortfall redistribution, and each
/// category contributes its smallest-key records. Output keeps stream order.
pub fn subsample<I>(records: I, targets: &CategoryTargets, total: u64, seed: u64) -> Result<(Vec<GenBankRecord>, IngestStats)>
where
    I: IntoIterator<Item = GenBankRecord>,
{
    if (targets.sum() - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!("category fractions sum to {}, expected 1", targets.sum())));
    }
    if total == 0 {
        return Err(Error::Config("subsample total must be at least 1".into()));
    }
    let cap = usize::try_from(total).unwrap_or(usize::MAX);
    let mut rng = SeededRng::new(seed);
    let mut heaps: BTreeMap<Category, BinaryHeap<Keyed>> = BTreeMap::new();
    let mut kept: BTreeMap<usize, GenBankRecord> = BTreeMap::new();
    let mut seen = 0u64;

    for (index, rec) in records.into_iter().enumerate() {
        seen += 1;
        let key = rng.next_u64();
        let heap = heaps.entry(rec.category).or_default();
        if heap.len() < cap {
            heap.push(Keyed { key, index });
            kept.insert(index, rec);
        } else if let Some(top) = heap.peek().copied() {
            if (Keyed { key, index }) < top {
                heap.pop();
                kept.remove(&top.index);
                heap.push(Keyed { key, index });
                kept.insert(index, rec);
            }
        }
    }

    let available: BTreeMap<Category, u64> = heaps.iter().map(|(&c, h)| (c, h.len() as u64)).collect();
    let take = allocate(targets, total, &available);

    let mut chosen: HashSet<usize> = HashSet::new();
    for (c, heap) in heaps {
        let mut items = heap.into_sorted_vec();
        items.truncate(take.get(&c).copied().unwrap_or(0) as usize);
        chosen.extend(items.into_iter().map(|k| k.index));
    }

    let mut stats = IngestStats {
        records_seen: seen,
        ..IngestStats::default()
    };
    let selected: Vec<GenBankRecord> = kept.into_iter().filter(|(i, _)| chosen.contains(i)).map(|(_, r)| r).collect();
    for r in &selected {
        stats.keep(r.category);
    }
    Ok((selected, stats))
}

/// The subset of a record stored in shards.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ShardRecord {
    pub accession: String,
    pub category: Category,
    pub sequence: String,
}

const SHARD_MAGIC: &[u8; 8] = b"MRNASHRD";
const SHARD_VERSION: u16 = 1;

pub fn write_shard(records: &[ShardRecord], path: &Path) -> Result<()> {
    if records.is_empty() {
        return Err(Error::Contract("refusing to write an empty shard".into()));
    }
    let mut seen = HashSet::new();
    for r in records {
        if r.accession.is_empty() {
            return Err(Error::Contract("record with empty accession".into()));
        }
        if !seen.insert(r.accession.as_str()) {
            return Err(Error::Contract(format!("duplicate accession {} in shard", r.accession)));
        }
    }
    let file = File::create(path).map_err(|e| Error::io_at(path, e))?;
    let mut w = LeWriter::new(BufWriter::new(file));
    w.bytes(SHARD_MAGIC)?;
    w.u16(SHARD_VERSION)?;
    w.u64(records.len() as u64)?;
    for r in records {
        let acc = r.accession.as_bytes();
        let acc_len = u16::try_from(acc.len()).map_err(|_| Error::Contract(format!("accession too long: {}", r.accession)))?;
        let seq_len = u32::try_from(r.sequence.len()).map_err(|_| Error::Contract(format!("sequence too long in {}", r.accession)))?;
        w.u16(acc_len)?;
        w.bytes(acc)?;
        w.u8(r.category.code())?;
        w.u32(seq_len)?;
        w.bytes(r.sequence.as_bytes())?;
    }
    w.into_inner().flush()?;
    Ok(())
}

pub fn read_shard(path: &Path) -> Result<Vec<ShardRecord>> {
    let file = File::open(path).map_err(|e| Error::io_at(path, e))?;
    let mut r = LeReader::new(BufReader::new(file), "shard");
    r.magic(SHARD_MAGIC)?;
    r.version(SHARD_VERSION)?;
    let count = r.u64()?;
    let mut out = Vec::new();
    for _ in 0..count {
        let acc_len = usize::from(r.u16()?);
        let accession = String::from_utf8(r.vec(acc_len)?).map_err(|_| Error::Format("shard: accession is not UTF-8".into()))?;
        let code = r.u8()?;
        let category = Category::from_code(code).ok_or_else(|| Error::Format(format!("shard: unknown category code {code}")))?;
        let seq_len = r.u32()? as usize;
        let sequence = String::from_utf8(r.vec(seq_len)?).map_err(|_| Error::Format("shard: sequence is not UTF-8".into()))?;
        out.push(ShardRecord {
            accession,
            category,
            sequence,
        });
    }
    r.finish()?;
    Ok(out)
}
