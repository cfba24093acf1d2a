#![allow(dead_code)]

pub mod oracle;

use nucdistill::losses::{tape_kl_loss, tape_train_loss, LossWeights};
use nucdistill::rng::SeededRng;
use nucdistill::student::{Mode, StudentConfig, StudentParams};
use nucdistill::tensor::{finite_diff_check, Activation, Fault, GradCheckReport, Tape, Tensor};
use nucdistill::tokenizer::{pad_or_truncate, TokenSequence};

pub const GRADCHECK_STEP: f64 = 1e-5;
pub const GRADCHECK_TOL: f64 = 1e-4;

/// d_s = 8, two blocks tapped at 1 and 2, L = 16.
pub fn small_config(logits: bool) -> StudentConfig {
    StudentConfig {
        d_model: 8,
        n_blocks: 2,
        taps: vec![1, 2],
        activation: Activation::Gelu,
        dropout: 0.1,
        proj_dims: vec![5, 7],
        logit_classes: logits.then_some(4),
        ..StudentConfig::desk(vec![5, 7])
    }
}

pub fn random_vec(rng: &mut SeededRng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| rng.normal() * scale).collect()
}

pub fn random_sequences(rng: &mut SeededRng, lens: &[usize], context: usize) -> Vec<TokenSequence> {
    lens.iter()
        .map(|&n| {
            let ids: Vec<u8> = (0..n).map(|_| 1 + rng.range(0, 5) as u8).collect();
            pad_or_truncate(&ids, context)
        })
        .collect()
}

/// Finite-difference check of the full student forward plus the training
/// loss (or KL when the config has a logit head), summed over a
/// two-sequence batch, in train mode with a fixed dropout mask.
pub fn student_gradcheck(cfg: &StudentConfig, fault: Fault) -> GradCheckReport {
    let l = 16;
    let mut rng = SeededRng::new(2024);
    let student = StudentParams::<f64>::init(cfg, 11).unwrap();
    let mut student = student;
    // Non-trivial gains and biases so their gradients are exercised away
    // from the init point.
    for (t, name) in student.tensors_mut().iter_mut().zip(cfg.layout()) {
        if name.0.ends_with("bias") || name.0.ends_with("ln_gain") {
            for v in t.data_mut() {
                *v += rng.normal() * 0.3;
            }
        }
    }
    let seqs = random_sequences(&mut rng, &[11, 16], l);
    let targets: Vec<Vec<Vec<f64>>> = seqs
        .iter()
        .map(|_| cfg.proj_dims.iter().map(|&d| random_vec(&mut rng, d, 1.0)).collect())
        .collect();
    let teacher_logits: Vec<Tensor<f64>> = seqs
        .iter()
        .map(|_| Tensor::new(vec![l, 4], random_vec(&mut rng, l * 4, 2.0)).unwrap())
        .collect();
    let weights = LossWeights::default();
    let names = student.names();
    let params = student.tensors().to_vec();
    let cfg = cfg.clone();
    let loss = move |ps: &[Tensor<f64>]| {
        let model = StudentParams::from_tensors(cfg.clone(), ps.to_vec())?;
        let mut total = 0.0;
        let mut grads: Vec<Tensor<f64>> = ps.iter().map(|p| Tensor::zeros(p.shape())).collect();
        for (j, seq) in seqs.iter().enumerate() {
            let mut tape = Tape::new().with_fault(fault);
            let vars = model.bind(&mut tape);
            let mut drop = SeededRng::derived(99, &[j as u64]);
            let out = model.forward_on_tape(&mut tape, &vars, seq, Mode::Train, Some(&mut drop))?;
            let loss = match out.logits {
                Some(lg) => tape_kl_loss(&mut tape, lg, &teacher_logits[j], seq.mask(), 1.0)?,
                None => {
                    let pairs: Vec<_> = out
                        .projected
                        .iter()
                        .zip(&targets[j])
                        .map(|(&p, t)| (p, tape.constant(Tensor::vector(t.clone()))))
                        .collect();
                    tape_train_loss(&mut tape, &pairs, &weights)?.total
                }
            };
            total += tape.value(loss).item();
            let g = tape.backward(loss)?;
            for (acc, &v) in grads.iter_mut().zip(&vars) {
                acc.add_assign(g.get(v).expect("param gradient"))?;
            }
        }
        Ok((total, grads))
    };
    finite_diff_check(&params, &names, loss, GRADCHECK_STEP, GRADCHECK_TOL).unwrap()
}
