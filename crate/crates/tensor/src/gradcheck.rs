//! Finite-difference verification of tape gradients.

use crate::error::Result;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Central-difference step.
pub const FD_STEP: f64 = 1e-5;

/// Relative error between analytic and numeric gradients, elementwise.
///
/// The denominator is floored at a thousandth of the largest numeric
/// gradient magnitude so entries that are zero up to round-off do not
/// dominate the maximum.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let scale = numeric.iter().chain(analytic).fold(0.0f64, |m, v| m.max(v.abs()));
    let floor = (1e-3 * scale).max(1e-12);
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max)
}

/// Compares `backward` against central differences for every input of `f`.
///
/// `f` must build a scalar on the tape from the supplied input handles.
/// Returns the largest relative error over all inputs and elements.
pub fn grad_check_many<F>(f: F, inputs: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |xs: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.constant(x.clone())).collect();
        let out = f(&mut tape, &vars)?;
        tape.value(out).item()
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.param(x.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;

    let mut worst = 0.0f64;
    let mut probe = inputs.to_vec();
    for (i, &v) in vars.iter().enumerate() {
        let analytic = grads.get_or_zeros(v);
        let mut numeric = vec![0.0; inputs[i].numel()];
        for (j, slot) in numeric.iter_mut().enumerate() {
            let orig = inputs[i].data()[j];
            probe[i].data_mut()[j] = orig + FD_STEP;
            let plus = eval(&probe)?;
            probe[i].data_mut()[j] = orig - FD_STEP;
            let minus = eval(&probe)?;
            probe[i].data_mut()[j] = orig;
            *slot = (plus - minus) / (2.0 * FD_STEP);
        }
        worst = worst.max(relative_error(analytic.data(), &numeric));
    }
    Ok(worst)
}

/// Single-input form of [`grad_check_many`].
pub fn grad_check<F>(f: F, x: &Tensor) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    grad_check_many(|tape, vars| f(tape, vars[0]), std::slice::from_ref(x))
}

/// Reference set of per-operation gradient checks.
///
/// Each case draws random inputs for one of three shape variants and
/// returns a non-scalar output; [`check_case`] contracts it against a fixed
/// random weight tensor so every output element contributes differently.
pub mod catalogue {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use crate::error::Result;
    use crate::kernels::DropoutKey;
    use crate::tape::{Tape, Var};
    use crate::tensor::Tensor;

    /// Number of shape variants every case provides.
    pub const VARIANTS: usize = 3;

    #[derive(Clone, Copy, Debug)]
    pub enum Domain {
        /// Uniform in [-1, 1].
        Signed,
        /// Uniform in [0.5, 2].
        Positive,
    }

    pub struct OpCase {
        pub name: &'static str,
        pub inputs: fn(usize) -> Vec<(Vec<usize>, Domain)>,
        pub build: fn(&mut Tape, &[Var]) -> Result<Var>,
    }

    fn draw(rng: &mut ChaCha8Rng, shape: &[usize], domain: Domain) -> Tensor {
        Tensor::from_fn(shape, |_| match domain {
            Domain::Signed => rng.random_range(-1.0..1.0),
            Domain::Positive => rng.random_range(0.5..2.0),
        })
    }

    /// Runs one case for a variant and seed; returns the max relative error.
    pub fn check_case(case: &OpCase, variant: usize, seed: u64) -> Result<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs: Vec<Tensor> = (case.inputs)(variant)
            .iter()
            .map(|(s, d)| draw(&mut rng, s, *d))
            .collect();
        // Output shape is needed for the projection weights.
        let out_shape = {
            let mut tape = Tape::new();
            let vars: Vec<Var> = inputs.iter().map(|x| tape.constant(x.clone())).collect();
            let out = (case.build)(&mut tape, &vars)?;
            tape.shape(out).to_vec()
        };
        let weights = draw(&mut rng, &out_shape, Domain::Signed);
        super::grad_check_many(
            |tape, vars| {
                let y = (case.build)(tape, vars)?;
                let w = tape.constant(weights.clone());
                let p = tape.mul(y, w)?;
                Ok(tape.sum_all(p))
            },
            &inputs,
        )
    }

    use Domain::{Positive as P, Signed as S};

    fn v(shapes: &[(&[usize], Domain)]) -> Vec<(Vec<usize>, Domain)> {
        shapes.iter().map(|(s, d)| (s.to_vec(), *d)).collect()
    }

    fn pick<T: Copy>(variant: usize, options: [T; VARIANTS]) -> T {
        options[variant % VARIANTS]
    }

    /// Every differentiable forward operation of the tape.
    pub fn all() -> Vec<OpCase> {
        vec![
            OpCase {
                name: "add",
                inputs: |i| {
                    let (a, b): (&[usize], &[usize]) = pick(i, [(&[3, 4], &[3, 4]), (&[2, 3, 4], &[4]), (&[5, 2], &[5, 1])]);
                    v(&[(a, S), (b, S)])
                },
                build: |t, x| t.add(x[0], x[1]),
            },
            OpCase {
                name: "sub",
                inputs: |i| {
                    let (a, b): (&[usize], &[usize]) = pick(i, [(&[3, 4], &[3, 4]), (&[2, 3, 4], &[3, 4]), (&[1, 4], &[3, 4])]);
                    v(&[(a, S), (b, S)])
                },
                build: |t, x| t.sub(x[0], x[1]),
            },
            OpCase {
                name: "mul",
                inputs: |i| {
                    let (a, b): (&[usize], &[usize]) = pick(i, [(&[3, 4], &[3, 4]), (&[2, 3, 4], &[4]), (&[4, 1], &[1, 3])]);
                    v(&[(a, S), (b, S)])
                },
                build: |t, x| t.mul(x[0], x[1]),
            },
            OpCase {
                name: "div",
                inputs: |i| {
                    let (a, b): (&[usize], &[usize]) = pick(i, [(&[3, 4], &[3, 4]), (&[6, 2], &[6, 1]), (&[2, 2, 3], &[3])]);
                    v(&[(a, S), (b, P)])
                },
                build: |t, x| t.div(x[0], x[1]),
            },
            OpCase {
                name: "scale",
                inputs: |i| v(&[(pick(i, [&[3][..], &[2, 5], &[2, 2, 2]]), S)]),
                build: |t, x| Ok(t.scale(x[0], -1.7)),
            },
            OpCase {
                name: "add_scalar",
                inputs: |i| v(&[(pick(i, [&[3][..], &[2, 5], &[2, 2, 2]]), S)]),
                build: |t, x| Ok(t.add_scalar(x[0], 0.3)),
            },
            OpCase {
                name: "matmul",
                inputs: |i| {
                    let (a, b): (&[usize], &[usize]) = pick(i, [(&[3, 4], &[4, 5]), (&[2, 3, 4], &[2, 4, 2]), (&[2, 3, 4], &[4, 3])]);
                    v(&[(a, S), (b, S)])
                },
                build: |t, x| t.matmul(x[0], x[1]),
            },
            OpCase {
                name: "transpose",
                inputs: |i| v(&[(pick(i, [&[3, 4][..], &[2, 3, 4], &[1, 5]]), S)]),
                build: |t, x| t.transpose(x[0]),
            },
            OpCase {
                name: "permute",
                inputs: |i| v(&[(pick(i, [&[2, 3, 4][..], &[4, 1, 3], &[3, 3, 2]]), S)]),
                build: |t, x| t.permute(x[0], &[1, 2, 0]),
            },
            OpCase {
                name: "reshape",
                inputs: |i| v(&[(pick(i, [&[2, 6][..], &[3, 4], &[12]]), S)]),
                build: |t, x| t.reshape(x[0], &[4, 3]),
            },
            OpCase {
                name: "concat",
                inputs: |i| {
                    let (a, b): (&[usize], &[usize]) = pick(i, [(&[2, 3], &[2, 4]), (&[3, 2], &[3, 1]), (&[2, 2, 1], &[2, 2, 3])]);
                    v(&[(a, S), (b, S)])
                },
                build: |t, x| {
                    let r = t.shape(x[0]).len();
                    t.concat(&[x[0], x[1], x[0]], r - 1)
                },
            },
            OpCase {
                name: "slice",
                inputs: |i| v(&[(pick(i, [&[5, 3][..], &[6, 4], &[4, 5, 2]]), S)]),
                build: |t, x| t.slice(x[0], 1, 1, 2),
            },
            OpCase {
                name: "sum_axis",
                inputs: |i| v(&[(pick(i, [&[3, 4][..], &[2, 3, 4], &[5, 1]]), S)]),
                build: |t, x| t.sum(x[0], 0, false),
            },
            OpCase {
                name: "mean_axis_keepdim",
                inputs: |i| v(&[(pick(i, [&[3, 4][..], &[2, 3, 4], &[5, 2]]), S)]),
                build: |t, x| {
                    let r = t.shape(x[0]).len();
                    t.mean(x[0], r - 1, true)
                },
            },
            OpCase {
                name: "sum_all",
                inputs: |i| v(&[(pick(i, [&[3][..], &[2, 3], &[2, 2, 2]]), S)]),
                build: |t, x| {
                    let s = t.sum_all(x[0]);
                    // Scalars are contracted like everything else; square to make it nonlinear.
                    Ok(t.square(s))
                },
            },
            OpCase {
                name: "sqrt",
                inputs: |i| v(&[(pick(i, [&[4][..], &[2, 3], &[2, 2, 3]]), P)]),
                build: |t, x| Ok(t.sqrt(x[0])),
            },
            OpCase {
                name: "exp",
                inputs: |i| v(&[(pick(i, [&[4][..], &[2, 3], &[2, 2, 3]]), S)]),
                build: |t, x| Ok(t.exp(x[0])),
            },
            OpCase {
                name: "sigmoid",
                inputs: |i| v(&[(pick(i, [&[4][..], &[2, 3], &[2, 2, 3]]), S)]),
                build: |t, x| Ok(t.sigmoid(x[0])),
            },
            OpCase {
                name: "tanh",
                inputs: |i| v(&[(pick(i, [&[4][..], &[2, 3], &[2, 2, 3]]), S)]),
                build: |t, x| Ok(t.tanh(x[0])),
            },
            OpCase {
                name: "gelu",
                inputs: |i| v(&[(pick(i, [&[4][..], &[2, 3], &[2, 2, 3]]), S)]),
                build: |t, x| Ok(t.gelu(x[0])),
            },
            OpCase {
                name: "square",
                inputs: |i| v(&[(pick(i, [&[4][..], &[2, 3], &[2, 2, 3]]), S)]),
                build: |t, x| Ok(t.square(x[0])),
            },
            OpCase {
                name: "clamp_min",
                // Inputs in [0.5, 2] with the floor at 1.0; the kink is
                // crossed only with probability ~ FD_STEP per element.
                inputs: |i| v(&[(pick(i, [&[4][..], &[2, 3], &[2, 2, 3]]), P)]),
                build: |t, x| Ok(t.clamp_min(x[0], 1.0)),
            },
            OpCase {
                name: "softmax",
                inputs: |i| v(&[(pick(i, [&[5][..], &[3, 4], &[2, 3, 6]]), S)]),
                build: |t, x| t.softmax(x[0]),
            },
            OpCase {
                name: "layer_norm",
                inputs: |i| {
                    let (x, c): (&[usize], usize) = pick(i, [(&[3, 4], 4), (&[2, 2, 5], 5), (&[1, 8], 8)]);
                    vec![(x.to_vec(), S), (vec![c], P), (vec![c], S)]
                },
                build: |t, x| t.layer_norm(x[0], x[1], x[2], 1e-5),
            },
            OpCase {
                name: "dropout",
                inputs: |i| v(&[(pick(i, [&[6][..], &[4, 5], &[2, 3, 4]]), S)]),
                build: |t, x| t.dropout(x[0], 0.3, true, DropoutKey::new(11, 3, 5)),
            },
            OpCase {
                name: "depthwise_conv1d",
                inputs: |i| {
                    let (x, k): (&[usize], &[usize]) = pick(i, [(&[6, 2], &[3, 2]), (&[8, 3], &[5, 3]), (&[3, 1], &[5, 1])]);
                    v(&[(x, S), (k, S)])
                },
                build: |t, x| t.depthwise_conv1d(x[0], x[1]),
            },
            OpCase {
                name: "pointwise_conv1d",
                inputs: |i| {
                    let (x, w): (&[usize], &[usize]) = pick(i, [(&[6, 2], &[2, 3]), (&[4, 5], &[5, 5]), (&[1, 3], &[3, 2])]);
                    v(&[(x, S), (w, S)])
                },
                build: |t, x| t.pointwise_conv1d(x[0], x[1]),
            },
            OpCase {
                name: "dct2",
                inputs: |i| v(&[(pick(i, [&[8, 2][..], &[5, 3], &[1, 4]]), S)]),
                build: |t, x| t.dct2(x[0]),
            },
            OpCase {
                name: "dct3",
                inputs: |i| v(&[(pick(i, [&[8, 2][..], &[5, 3], &[2, 1]]), S)]),
                build: |t, x| t.dct3(x[0]),
            },
            OpCase {
                name: "cumsum",
                inputs: |i| v(&[(pick(i, [&[6][..], &[5, 2], &[3, 2, 2]]), S)]),
                build: |t, x| t.cumsum(x[0]),
            },
            OpCase {
                name: "relative_bias",
                inputs: |i| v(&[(pick(i, [&[1, 3][..], &[2, 5], &[3, 7]]), S)]),
                build: |t, x| t.relative_bias(x[0], 4, 5),
            },
        ]
    }
}
