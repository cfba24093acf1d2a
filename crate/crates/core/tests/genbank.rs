use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use flate2::write::GzEncoder;
use flate2::Compression;
use proptest::prelude::*;

use nucdistill::genbank::*;
use nucdistill::rng::SeededRng;
use nucdistill::Error;

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

fn parse_file(path: &Path, gzip: bool) -> (Vec<GenBankRecord>, IngestStats) {
    let mut r = parse_gbff(fs::File::open(path).unwrap(), gzip);
    let recs = r.by_ref().collect::<Result<Vec<_>, _>>().unwrap();
    (recs, r.stats().clone())
}

#[test]
fn three_record_fixture() {
    let (recs, stats) = parse_file(&fixture("three.gbff"), false);
    let got: Vec<(&str, &str)> = recs.iter().map(|r| (r.accession.as_str(), r.sequence.as_str())).collect();
    assert_eq!(got, [("NM_TEST1", "ATGC"), ("NM_TEST2", "AUGC"), ("NM_TEST3", "ATGN")]);
    let cats: Vec<Category> = recs.iter().map(|r| r.category).collect();
    assert_eq!(cats, [Category::Mammal, Category::Viral, Category::Invertebrate]);
    assert_eq!(recs[2].organism, "Drosophila melanogaster");
    assert!(recs.iter().all(|r| r.molecule_type == "mRNA"));
    assert_eq!(stats.records_seen, 3);
    assert_eq!(stats.records_kept, 3);
    assert_eq!(stats.parse_errors, 0);
    assert_eq!(stats.per_category.values().sum::<u64>(), stats.records_kept);
}

#[test]
fn gzip_fixture_parses_identically() {
    let plain = parse_file(&fixture("three.gbff"), false);
    assert_eq!(parse_file(&fixture("three.gbff.gz"), true), plain);

    // Freshly compressed copy as well, independent of the stored one.
    let mut enc = GzEncoder::new(Vec::new(), Compression::best());
    enc.write_all(&fs::read(fixture("three.gbff")).unwrap()).unwrap();
    let bytes = enc.finish().unwrap();
    let mut r = parse_gbff(bytes.as_slice(), true);
    let recs = r.by_ref().collect::<Result<Vec<_>, _>>().unwrap();
    assert_eq!(recs, plain.0);
}

#[test]
fn unreadable_gzip_is_io_error() {
    let mut r = parse_gbff(&b"this is not gzip at all"[..], true);
    let first = r.next().expect("an error item");
    assert!(matches!(first, Err(Error::Io(_))), "{first:?}");
}

#[test]
fn parser_is_total_on_garbage() {
    let text = fs::read_to_string(fixture("three.gbff")).unwrap();
    let mut rng = SeededRng::new(3);
    for _ in 0..200 {
        let cut = rng.range(0, text.len());
        let junk: String = (0..rng.range(0, 40)).map(|_| (b' ' + rng.range(0, 90) as u8) as char).collect();
        let input = format!("{}{junk}\n{}", &text[..cut], &text[cut / 2..]);
        let mut r = parse_gbff(input.as_bytes(), false);
        let kept = r.by_ref().filter_map(|x| x.ok()).count() as u64;
        let s = r.stats();
        assert_eq!(s.records_seen, s.records_kept + s.parse_errors);
        assert_eq!(s.records_kept, kept);
    }
}

#[test]
fn shard_round_trip_of_fixture() {
    let (recs, _) = parse_file(&fixture("three.gbff"), false);
    let shard: Vec<ShardRecord> = recs.iter().map(GenBankRecord::to_shard_record).collect();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("a.mrnashrd");
    write_shard(&shard, &path).unwrap();
    assert_eq!(read_shard(&path).unwrap(), shard);
    let bytes = fs::read(&path).unwrap();
    assert_eq!(&bytes[..8], b"MRNASHRD");
    assert_eq!(&bytes[8..10], &[1, 0]);
    assert_eq!(&bytes[10..18], &3u64.to_le_bytes());
}

#[test]
fn shard_with_long_sequence() {
    let mut rng = SeededRng::new(8);
    let seq: String = (0..100_000).map(|_| b"ACGTN"[rng.range(0, 5)] as char).collect();
    let rec = vec![ShardRecord {
        accession: "NM_LONG".into(),
        category: Category::OtherVertebrate,
        sequence: seq,
    }];
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("long.mrnashrd");
    write_shard(&rec, &path).unwrap();
    assert_eq!(read_shard(&path).unwrap(), rec);
}

#[test]
fn shard_format_errors() {
    let rec = vec![ShardRecord {
        accession: "NM_1".into(),
        category: Category::Mammal,
        sequence: "ACGT".into(),
    }];
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("s.mrnashrd");
    write_shard(&rec, &path).unwrap();
    let good = fs::read(&path).unwrap();

    let mut bad = good.clone();
    bad[0] = b'X';
    fs::write(&path, &bad).unwrap();
    assert!(matches!(read_shard(&path), Err(Error::Format(_))));

    let mut bad = good.clone();
    bad[8] = 9;
    fs::write(&path, &bad).unwrap();
    assert!(matches!(read_shard(&path), Err(Error::Format(_))));

    fs::write(&path, &good[..good.len() - 2]).unwrap();
    assert!(matches!(read_shard(&path), Err(Error::Format(_))));

    assert!(write_shard(&[], &path).is_err());
    let dup = vec![rec[0].clone(), rec[0].clone()];
    assert!(write_shard(&dup, &path).is_err());
}

fn category_strategy() -> impl Strategy<Value = Category> {
    (0u8..5).prop_map(|c| Category::from_code(c).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]
    #[test]
    fn shard_round_trip_property(
        recs in prop::collection::vec((category_strategy(), "[ACGTUNRYKMSWBDHV]{1,300}"), 1..20)
    ) {
        let shard: Vec<ShardRecord> = recs
            .into_iter()
            .enumerate()
            .map(|(i, (category, sequence))| ShardRecord { accession: format!("XM_{i:06}"), category, sequence })
            .collect();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.mrnashrd");
        write_shard(&shard, &path).unwrap();
        prop_assert_eq!(read_shard(&path).unwrap(), shard);
    }
}

fn record(acc: String, category: Category) -> GenBankRecord {
    GenBankRecord {
        accession: acc,
        molecule_type: "mRNA".into(),
        organism: String::new(),
        lineage: Vec::new(),
        category,
        sequence: "ACGT".into(),
    }
}

/// 10,000 records mixed in release proportions, in seeded random order.
fn release_stream() -> Vec<GenBankRecord> {
    let counts = [
        (Category::OtherVertebrate, 4360),
        (Category::Mammal, 2830),
        (Category::Invertebrate, 2640),
        (Category::Viral, 160),
        (Category::Other, 10),
    ];
    let mut out = Vec::new();
    for (c, n) in counts {
        for i in 0..n {
            out.push(record(format!("{}_{i}", c.name()), c));
        }
    }
    SeededRng::new(1).shuffle(&mut out);
    out
}

fn counts(recs: &[GenBankRecord]) -> BTreeMap<Category, i64> {
    let mut m = BTreeMap::new();
    for r in recs {
        *m.entry(r.category).or_default() += 1;
    }
    m
}

#[test]
fn subsample_hits_release_proportions() {
    let targets = CategoryTargets::from_percentages(&[43.6, 28.3, 26.4, 1.6]).unwrap();
    assert!((targets.sum() - 1.0).abs() <= 1e-9);
    let (sel, stats) = subsample(release_stream(), &targets, 1000, 5).unwrap();
    assert_eq!(sel.len(), 1000);
    let c = counts(&sel);
    for (cat, want) in [
        (Category::OtherVertebrate, 436),
        (Category::Mammal, 283),
        (Category::Invertebrate, 264),
        (Category::Viral, 16),
    ] {
        let got = c.get(&cat).copied().unwrap_or(0);
        assert!((got - want).abs() <= 10, "{cat:?}: {got}");
        let pct = 100.0 * got as f64 / 1000.0;
        assert!((pct - 100.0 * targets.fraction(cat)).abs() <= 1.0);
    }
    assert_eq!(stats.records_kept, 1000);
    assert_eq!(stats.per_category.values().sum::<u64>(), stats.records_kept);
}

#[test]
fn subsample_shortfall_is_redistributed() {
    let targets = CategoryTargets::from_percentages(&[25.0, 25.0, 25.0, 25.0]).unwrap();
    let mut stream: Vec<_> = (0..20).map(|i| record(format!("v{i}"), Category::Viral)).collect();
    for c in [Category::Mammal, Category::OtherVertebrate, Category::Invertebrate] {
        stream.extend((0..1000).map(|i| record(format!("{}{i}", c.name()), c)));
    }
    let (sel, _) = subsample(stream, &targets, 400, 2).unwrap();
    assert_eq!(sel.len(), 400);
    let c = counts(&sel);
    assert_eq!(c[&Category::Viral], 20);
    for cat in [Category::Mammal, Category::OtherVertebrate, Category::Invertebrate] {
        assert!((c[&cat] - 127).abs() <= 1, "{cat:?} {}", c[&cat]);
    }
}

#[test]
fn subsample_small_stream_and_determinism() {
    let targets = CategoryTargets::refseq_release();
    let stream: Vec<_> = release_stream().into_iter().take(50).collect();
    let (all, _) = subsample(stream.clone(), &targets, 1000, 1).unwrap();
    assert_eq!(all, stream);
    let a = subsample(release_stream(), &targets, 500, 9).unwrap();
    let b = subsample(release_stream(), &targets, 500, 9).unwrap();
    assert_eq!(a, b);
    let c = subsample(release_stream(), &targets, 500, 10).unwrap();
    assert_ne!(a.0, c.0);
}

#[test]
fn targets_must_sum_to_one() {
    assert!(matches!(
        CategoryTargets::from_percentages(&[50.0, 50.0, 10.0, 0.0]),
        Err(Error::Config(_))
    ));
    assert!(matches!(
        CategoryTargets::from_percentages(&[50.0, 20.0, 10.0, 0.0, 1.0]),
        Err(Error::Config(_))
    ));
    assert!(CategoryTargets::from_percentages(&[1.0]).is_err());
    let t = CategoryTargets::from_percentages(&[43.6, 28.3, 26.4, 1.6]).unwrap();
    assert!((t.fraction(Category::Other) - 0.001).abs() < 1e-9);
}

#[test]
fn categorize_examples() {
    let mammal = ["Eukaryota", "Metazoa", "Chordata", "Craniata", "Vertebrata", "Mammalia", "Primates"];
    assert_eq!(categorize(&mammal), Category::Mammal);
    assert_eq!(categorize(&["Viruses", "Riboviria"]), Category::Viral);
    assert_eq!(categorize::<&str>(&[]), Category::Other);
    assert_eq!(
        categorize(&["Eukaryota", "Metazoa", "Chordata", "Craniata"]),
        Category::OtherVertebrate
    );
    assert_eq!(categorize(&["Eukaryota", "Metazoa", "Arthropoda"]), Category::Invertebrate);
    assert_eq!(categorize(&["Eukaryota", "Viridiplantae"]), Category::Other);
}
