use std::fs;

use nucdistill::dataset::CorpusSpec;
use nucdistill::report::*;
use nucdistill::student::{StudentConfig, StudentParams};
use nucdistill::teacher::*;
use nucdistill::tensor::Activation;
use nucdistill::trainer::*;
use nucdistill::Error;

fn run(logits: Option<LogitSpec>) -> tempfile::TempDir {
    let mut spec = TeacherSpec::norm_like(vec![16, 16]);
    spec.synthetic.calibration.count = 4096;
    if let Some(l) = logits {
        spec = spec.with_logits(l);
    }
    let teacher = SyntheticTeacher::new(&spec).unwrap();
    let data = CorpusSpec {
        count: 48,
        min_len: 8,
        max_len: 40,
        ..CorpusSpec::default()
    }
    .dataset(4, 32)
    .unwrap();
    let cfg = StudentConfig {
        d_model: 8,
        n_blocks: 2,
        taps: vec![1, 2],
        activation: Activation::Tanh,
        logit_classes: logits.map(|_| LOGIT_CLASSES),
        ..StudentConfig::desk(vec![16, 16])
    };
    let mut student = StudentParams::<f32>::init(&cfg, 2).unwrap();
    let train_cfg = TrainConfig {
        batch_size: 4,
        context_len: 32,
        warmup_steps: 5,
        max_steps: 20,
        eval_every: 10,
        mode: if logits.is_some() { TrainMode::Logit } else { TrainMode::Embedding },
        ..TrainConfig::desk()
    };
    let dir = tempfile::tempdir().unwrap();
    train(&train_cfg, &mut student, &data, &teacher, Some(dir.path())).unwrap();
    dir
}

fn read_csv(path: &std::path::Path) -> (Vec<String>, Vec<Vec<String>>) {
    let text = fs::read_to_string(path).unwrap();
    let mut lines = text.lines();
    let header = lines.next().unwrap().split(',').map(String::from).collect();
    let rows = lines.map(|l| l.split(',').map(String::from).collect()).collect();
    (header, rows)
}

#[test]
fn tables_cover_every_eval_point() {
    let dir = run(None);
    let out = dir.path().join("report");
    let written = report(dir.path(), &out).unwrap();
    assert_eq!(written.len(), 7);
    assert!(written.iter().all(|p| p.is_file()));

    let (header, rows) = read_csv(&out.join("loss_curves.csv"));
    assert_eq!(header, ["step", "split", "loss_total", "loss_cos_mean", "loss_mse_mean", "kl"]);
    let val_steps: Vec<&str> = rows.iter().filter(|r| r[1] == "val").map(|r| r[0].as_str()).collect();
    assert_eq!(val_steps, ["0", "10", "20"]);
    assert_eq!(rows.iter().filter(|r| r[1] == "train").count(), 20);
    for r in &rows {
        assert_eq!(r.len(), header.len());
    }

    let (header, rows) = read_csv(&out.join("cka.csv"));
    assert_eq!(
        &header[..5],
        ["step", "cka_pre_tap1", "cka_post_tap1", "cka_raw_pre_tap1", "cka_raw_post_tap1"]
    );
    assert!(header.contains(&"cka_post_tap2".to_string()));
    assert_eq!(rows.len(), 3);
    for r in &rows {
        for v in &r[1..] {
            let x: f64 = v.parse().unwrap();
            assert!((0.0..=1.0 + 1e-9).contains(&x), "{x}");
        }
    }
}

#[test]
fn uniform_teacher_entropy_is_flat() {
    let dir = run(Some(LogitSpec::uniform()));
    let out = dir.path().join("report");
    report(dir.path(), &out).unwrap();
    let ln4 = 4f64.ln();
    let (header, rows) = read_csv(&out.join("entropy_profile.csv"));
    let col = header.iter().position(|h| h == "entropy").unwrap();
    assert!(!rows.is_empty());
    for r in &rows {
        assert!((r[col].parse::<f64>().unwrap() - ln4).abs() <= 1e-9);
    }
    let (header, rows) = read_csv(&out.join("entropy_summary.csv"));
    let mean = header.iter().position(|h| h == "entropy_mean").unwrap();
    let prob = header.iter().position(|h| h == "mean_token_prob").unwrap();
    assert_eq!(rows.len(), 3);
    for r in &rows {
        assert!((r[mean].parse::<f64>().unwrap() - ln4).abs() <= 1e-9);
        assert_eq!(r[prob].parse::<f64>().unwrap(), 0.25, "{r:?}");
    }
}

#[test]
fn missing_or_empty_log_is_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(report(dir.path(), dir.path()), Err(Error::Usage(_))));
    fs::write(dir.path().join(METRICS_FILE), "").unwrap();
    assert!(matches!(report(dir.path(), dir.path()), Err(Error::Usage(_))));
    fs::write(dir.path().join(METRICS_FILE), "[1,2]\n").unwrap();
    assert!(matches!(report(dir.path(), dir.path()), Err(Error::Format(_))));
}
