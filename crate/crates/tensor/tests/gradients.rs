use magtrack_tensor::gradcheck::catalogue::{self, VARIANTS};
use magtrack_tensor::{grad_check, Tape, Tensor};

const SEEDS: u64 = 10;
const TOLERANCE: f64 = 1e-4;

#[test]
fn every_op_matches_central_differences() {
    let mut failures = Vec::new();
    for case in catalogue::all() {
        let mut worst = 0.0f64;
        for variant in 0..VARIANTS {
            for seed in 0..SEEDS {
                let err = catalogue::check_case(&case, variant, seed).unwrap();
                worst = worst.max(err);
            }
        }
        if worst >= TOLERANCE {
            failures.push(format!("{}: {worst:e}", case.name));
        }
    }
    assert!(failures.is_empty(), "gradient mismatches: {failures:?}");
}

#[test]
fn composite_attention_like_expression() {
    let x = Tensor::from_fn(&[4, 3], |i| ((i * 31 % 7) as f64 - 3.0) * 0.2);
    let err = grad_check(
        |t, x| {
            let xt = t.transpose(x)?;
            let s = t.matmul(x, xt)?;
            let p = t.softmax(s)?;
            let o = t.matmul(p, x)?;
            let o = t.tanh(o);
            Ok(t.sum_all(o))
        },
        &x,
    )
    .unwrap();
    assert!(err < TOLERANCE, "{err}");
}

#[test]
fn deterministic_forward_and_backward() {
    let run = || {
        let mut t = Tape::new();
        let x = t.param(Tensor::from_fn(&[5, 4], |i| (i as f64).sin()));
        let w = t.param(Tensor::from_fn(&[4, 4], |i| (i as f64 * 0.3).cos()));
        let y = t.matmul(x, w).unwrap();
        let y = t.gelu(y);
        let l = t.sum_all(y);
        let g = t.backward(l).unwrap();
        (t.value(l).clone(), g.get(x).unwrap(), g.get(w).unwrap())
    };
    assert_eq!(run(), run());
}
