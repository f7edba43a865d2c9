//! Finite-difference cases for every registered autodiff op.

use super::{away_from_zero, check_input_gradient, distinct, uniform};
use gabn::autodiff::{required_op_set, OpKind};
use gabn::{Tape, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn fixed(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), uniform(&mut rng, n, -1.0, 1.0)).unwrap()
}

fn plain(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    uniform(rng, n, -1.0, 1.0)
}

fn cosines(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    uniform(rng, n, -0.9, 0.9)
}

fn positive(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    uniform(rng, n, 0.5, 2.0)
}

type Build = Box<dyn Fn(&mut Tape<f64>, Var) -> Var>;

struct Case {
    name: &'static str,
    shape: Vec<usize>,
    sample: fn(&mut ChaCha8Rng, usize) -> Vec<f64>,
    build: Build,
}

fn case(
    name: &'static str,
    shape: &[usize],
    sample: fn(&mut ChaCha8Rng, usize) -> Vec<f64>,
    build: impl Fn(&mut Tape<f64>, Var) -> Var + 'static,
) -> Case {
    Case {
        name,
        shape: shape.to_vec(),
        sample,
        build: Box::new(build),
    }
}

fn cases_for(kind: OpKind) -> Vec<Case> {
    match kind {
        OpKind::Input | OpKind::Param | OpKind::Constant => vec![],
        OpKind::Conv2d => vec![
            case("conv2d/input", &[2, 2, 5, 5], plain, |t, x| {
                let w = t.constant(fixed(&[3, 2, 3, 3], 1));
                let b = t.constant(fixed(&[3], 2));
                t.conv2d(x, w, Some(b), 1, 1).unwrap()
            }),
            case("conv2d/input strided", &[1, 2, 6, 6], plain, |t, x| {
                let w = t.constant(fixed(&[2, 2, 3, 3], 3));
                t.conv2d(x, w, None, 2, 1).unwrap()
            }),
            case("conv2d/weight", &[3, 2, 3, 3], plain, |t, w| {
                let x = t.constant(fixed(&[2, 2, 5, 5], 4));
                t.conv2d(x, w, None, 2, 1).unwrap()
            }),
            case("conv2d/bias", &[3], plain, |t, b| {
                let x = t.constant(fixed(&[2, 2, 4, 4], 5));
                let w = t.constant(fixed(&[3, 2, 3, 3], 6));
                t.conv2d(x, w, Some(b), 1, 0).unwrap()
            }),
        ],
        OpKind::Linear => vec![
            case("linear/input", &[3, 4], plain, |t, x| {
                let w = t.constant(fixed(&[5, 4], 7));
                let b = t.constant(fixed(&[5], 8));
                t.linear(x, w, Some(b)).unwrap()
            }),
            case("linear/weight", &[5, 4], plain, |t, w| {
                let x = t.constant(fixed(&[3, 4], 9));
                t.linear(x, w, None).unwrap()
            }),
            case("linear/bias", &[5], plain, |t, b| {
                let x = t.constant(fixed(&[3, 4], 10));
                let w = t.constant(fixed(&[5, 4], 11));
                t.linear(x, w, Some(b)).unwrap()
            }),
        ],
        OpKind::Add => vec![case("add", &[2, 3], plain, |t, x| {
            let c = t.constant(fixed(&[2, 3], 12));
            let y = t.add(x, c).unwrap();
            t.add(y, x).unwrap()
        })],
        OpKind::Mul => vec![case("mul", &[2, 3], plain, |t, x| {
            let c = t.constant(fixed(&[2, 3], 13));
            let y = t.mul(x, c).unwrap();
            t.mul(y, x).unwrap()
        })],
        OpKind::Scale => vec![case("scale", &[4], plain, |t, x| t.scale(x, -2.5))],
        OpKind::AddScalar => vec![case("add_scalar", &[4], plain, |t, x| {
            let y = t.add_scalar(x, 0.7);
            t.square(y)
        })],
        OpKind::Square => vec![case("square", &[4], plain, |t, x| t.square(x))],
        OpKind::Exp => vec![case("exp", &[4], plain, |t, x| t.exp(x))],
        OpKind::Log => vec![case("log", &[4], positive, |t, x| t.log(x))],
        OpKind::Relu => vec![case("relu", &[6], away_from_zero, |t, x| t.relu(x))],
        OpKind::Abs => vec![case("abs", &[6], away_from_zero, |t, x| t.abs(x))],
        OpKind::MaxPool2d => vec![case("max_pool2d", &[1, 2, 4, 4], distinct, |t, x| {
            t.max_pool2d(x, 2).unwrap()
        })],
        OpKind::AvgPool2d => vec![case("avg_pool2d", &[1, 2, 4, 6], plain, |t, x| {
            t.avg_pool2d(x, 2).unwrap()
        })],
        OpKind::GlobalAvgPool => vec![case("global_avg_pool", &[2, 3, 2, 2], plain, |t, x| {
            t.global_avg_pool(x).unwrap()
        })],
        OpKind::BatchNorm => vec![
            case("batch_norm/input", &[3, 2, 2, 2], plain, |t, x| {
                let g = t.constant(fixed(&[2], 14));
                let b = t.constant(fixed(&[2], 15));
                t.batch_norm(x, g, b, 1e-5).unwrap()
            }),
            case("batch_norm/gamma", &[2], plain, |t, g| {
                let x = t.constant(fixed(&[3, 2, 2, 2], 16));
                let b = t.constant(fixed(&[2], 17));
                t.batch_norm(x, g, b, 1e-5).unwrap()
            }),
            case("batch_norm/beta", &[2], plain, |t, b| {
                let x = t.constant(fixed(&[3, 2, 2, 2], 18));
                let g = t.constant(fixed(&[2], 19));
                t.batch_norm(x, g, b, 1e-5).unwrap()
            }),
        ],
        OpKind::Reshape => vec![case("reshape", &[2, 3, 2], plain, |t, x| {
            let y = t.flatten(x).unwrap();
            t.square(y)
        })],
        OpKind::L2Normalize => vec![case("l2_normalize", &[3, 4], away_from_zero, |t, x| {
            t.l2_normalize(x).unwrap()
        })],
        OpKind::MatMulNt => vec![
            case("matmul_nt/left", &[2, 3], plain, |t, a| {
                let b = t.constant(fixed(&[4, 3], 20));
                t.matmul_nt(a, b).unwrap()
            }),
            case("matmul_nt/right", &[4, 3], plain, |t, b| {
                let a = t.constant(fixed(&[2, 3], 21));
                t.matmul_nt(a, b).unwrap()
            }),
        ],
        OpKind::Angle => vec![case("angle", &[5], cosines, |t, x| t.angle(x))],
        OpKind::Cos => vec![case("cos", &[5], plain, |t, x| t.cos(x))],
        OpKind::Softmax => vec![case("softmax", &[3, 4], plain, |t, x| t.softmax(x).unwrap())],
        OpKind::LogSoftmax => vec![case("log_softmax", &[3, 4], plain, |t, x| {
            t.log_softmax(x).unwrap()
        })],
        OpKind::RowMax => vec![case("row_max", &[3, 5], distinct, |t, x| t.row_max(x).unwrap())],
        OpKind::RowMean => vec![case("row_mean", &[3, 5], plain, |t, x| t.row_mean(x).unwrap())],
        OpKind::ChannelMax => vec![case("channel_max", &[1, 3, 2, 2], distinct, |t, x| {
            t.channel_max(x).unwrap()
        })],
        OpKind::Sum => vec![case("sum", &[2, 3], plain, |t, x| {
            let s = t.sum(x);
            t.square(s)
        })],
        OpKind::Mean => vec![case("mean", &[2, 3], plain, |t, x| {
            let s = t.mean(x);
            t.square(s)
        })],
        OpKind::MarginLogits => vec![
            case("margin_logits", &[3, 4], cosines, |t, x| {
                t.margin_logits(x, Some(&[0, 3, 1]), 4.0, 0.35, 0.2).unwrap()
            }),
            case("margin_logits/unlabelled", &[2, 3], cosines, |t, x| {
                t.margin_logits(x, None, 3.0, 0.0, 0.0).unwrap()
            }),
        ],
        OpKind::CrossEntropy => vec![case("cross_entropy", &[3, 4], plain, |t, x| {
            t.cross_entropy(x, &[2, 0, 3]).unwrap()
        })],
        OpKind::UniformCrossEntropy => vec![case("uniform_cross_entropy", &[3, 4], plain, |t, x| {
            t.uniform_cross_entropy(x).unwrap()
        })],
    }
}

/// Runs every case of every registered op; returns the number of cases and
/// a description of each one whose relative error reaches `tol`.
pub fn op_gradient_failures(draws: usize, tol: f64) -> (usize, Vec<String>) {
    let mut failures = Vec::new();
    let mut checked = 0;
    for (k, kind) in required_op_set().into_iter().enumerate() {
        let cases = cases_for(kind);
        if cases.is_empty() {
            failures.push(format!("{kind}: no gradient case"));
        }
        for (j, c) in cases.iter().enumerate() {
            let err = check_input_gradient(
                &c.shape,
                draws,
                1000 + (k * 10 + j) as u64,
                c.sample,
                |t, x| (c.build)(t, x),
            );
            checked += 1;
            if err >= tol {
                failures.push(format!("{}: {err:.3e}", c.name));
            }
        }
    }
    (checked, failures)
}
