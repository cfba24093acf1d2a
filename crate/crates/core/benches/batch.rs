//! Sequential vs data-parallel execution of the batch-shaped workloads.

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use nucdistill::dataset::CorpusSpec;
use nucdistill::metrics::{linear_cka_gram, Matrix};
use nucdistill::par::{self, Execution};
use nucdistill::rng::SeededRng;
use nucdistill::student::{StudentConfig, StudentParams};
use nucdistill::teacher::{precompute, SyntheticTeacher, TeacherSpec};
use nucdistill::trainer::{train, TrainConfig};

const MODES: [(&str, Execution); 2] = [("sequential", Execution::Sequential), ("parallel", Execution::Parallel)];

fn forward_batch(c: &mut Criterion) {
    let student = StudentParams::<f32>::init(&StudentConfig::desk(vec![64, 64]), 1).unwrap();
    let data = CorpusSpec {
        count: 16,
        ..CorpusSpec::default()
    }
    .dataset(2, 128)
    .unwrap();
    let mut g = c.benchmark_group("student_forward_batch16");
    for (name, exec) in MODES {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| par::map_slice(exec, data.sequences(), |s| student.forward(black_box(s)).unwrap()))
        });
    }
    g.finish();
}

fn train_steps(c: &mut Criterion) {
    let teacher = SyntheticTeacher::new(&TeacherSpec::desk()).unwrap();
    let data = CorpusSpec {
        count: 256,
        ..CorpusSpec::default()
    }
    .dataset(3, 128)
    .unwrap();
    let init = StudentParams::<f32>::init(&StudentConfig::desk(vec![64, 64]), 4).unwrap();
    let mut g = c.benchmark_group("train_10_steps");
    g.sample_size(10);
    for (name, exec) in MODES {
        let cfg = TrainConfig {
            max_steps: 10,
            eval_every: 1000,
            execution: exec,
            ..TrainConfig::desk()
        };
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| {
                let mut s = init.clone();
                train(&cfg, &mut s, &data, &teacher, None).unwrap()
            })
        });
    }
    g.finish();
}

fn cka_gram(c: &mut Criterion) {
    let mut rng = SeededRng::new(5);
    let x = Matrix::new(400, 64, (0..400 * 64).map(|_| rng.normal()).collect())
        .unwrap()
        .centered();
    let y = Matrix::new(400, 32, (0..400 * 32).map(|_| rng.normal()).collect())
        .unwrap()
        .centered();
    let mut g = c.benchmark_group("cka_gram_400");
    for (name, exec) in MODES {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| linear_cka_gram(black_box(&x), &y, exec).unwrap())
        });
    }
    g.finish();
}

fn teacher_precompute(c: &mut Criterion) {
    let teacher = SyntheticTeacher::new(&TeacherSpec::desk()).unwrap();
    let data = CorpusSpec {
        count: 256,
        ..CorpusSpec::default()
    }
    .dataset(6, 128)
    .unwrap();
    let mut g = c.benchmark_group("teacher_precompute_256");
    for (name, exec) in MODES {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| precompute(&teacher, data.sequences(), exec).unwrap())
        });
    }
    g.finish();
}

criterion_group!(benches, forward_batch, train_steps, cka_gram, teacher_precompute);
criterion_main!(benches);
