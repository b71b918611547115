//! Central finite differences against the analytic gradients.

use mgpt::model::{Example, ModelConfig, ModelParams};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn batch() -> Vec<Example> {
    vec![
        Example {
            tokens: vec![1, 6, 20, 21, 8, 7, 3, 10],
            targets: vec![6, 20, 21, 8, 7, 3, 10, 15],
            mask: vec![false, false, false, false, true, true, true, true],
        },
        Example { tokens: vec![1, 3, 9, 13, 33], targets: vec![3, 9, 13, 33, 5], mask: vec![true; 5] },
    ]
}

fn total(p: &ModelParams, b: &[Example], z: f64) -> f64 {
    p.eval_loss(b, z).unwrap().total
}

#[test]
fn every_tensor_matches_finite_differences() {
    let cfg = ModelConfig::new(2, 2, 16, 41, 16).with_seed(21);
    let params = ModelParams::init(&cfg).unwrap();
    let b = batch();
    let z = 1e-2;
    let (_, grads) = params.grad(&b, z, None).unwrap();
    let names = params.tensor_names();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let h = 1e-4;
    let mut worst: Vec<(String, f64)> = Vec::new();
    for ti in 0..names.len() {
        for _ in 0..6 {
            let len = params.tensors()[ti].len();
            let i = rng.random_range(0..len);
            let mut plus = params.clone();
            plus.tensors_mut()[ti][i] += h;
            let mut minus = params.clone();
            minus.tensors_mut()[ti][i] -= h;
            let num = (total(&plus, &b, z) - total(&minus, &b, z)) / (2.0 * h);
            let ana = grads.tensors()[ti][i];
            let scale = num.abs().max(ana.abs());
            let rel = if scale < 1e-9 { 0.0 } else { (num - ana).abs() / scale };
            worst.push((format!("{}[{i}] num={num:e} ana={ana:e}", names[ti]), rel));
        }
    }
    let bad: Vec<_> = worst.iter().filter(|(_, r)| *r > 1e-3).collect();
    assert!(bad.is_empty(), "{bad:#?}");
}
