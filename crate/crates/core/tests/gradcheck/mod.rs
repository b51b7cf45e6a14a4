//! Finite-difference gradient checker and direct-loop convolution oracle,
//! shared by the numerics tests and the acceptance run.
#![allow(dead_code)]

use lpal_core::numerics::{Tape, Tensor, Var};
use lpal_core::train::{mse_loss, ranking_loss, shuffled_pairs};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const H: f64 = 1e-3;
pub const TOL: f64 = 1e-4;
pub const CONV_TOL: f64 = 1e-5;
pub const SEEDS: u64 = 10;

pub type Build = dyn Fn(&mut Tape<f64>, &[Var]) -> Var;

pub struct OpCase {
    pub name: String,
    pub shapes: Vec<Vec<usize>>,
    pub build: Box<Build>,
}

fn case(name: &str, shapes: &[&[usize]], build: impl Fn(&mut Tape<f64>, &[Var]) -> Var + 'static) -> OpCase {
    OpCase {
        name: name.to_string(),
        shapes: shapes.iter().map(|s| s.to_vec()).collect(),
        build: Box::new(build),
    }
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    // keep clear of relu's kink so central differences stay on one side
    let data = (0..n)
        .map(|_| {
            let v: f64 = rng.gen_range(0.05..1.0);
            if rng.gen_bool(0.5) {
                v
            } else {
                -v
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Reduces `out` to a scalar with fixed random weights so every output
/// entry carries a distinct gradient.
fn project(tape: &mut Tape<f64>, out: Var, rng: &mut ChaCha8Rng) -> Var {
    let shape = tape.shape(out).to_vec();
    let w = random(rng, &shape);
    let w = tape.constant(w);
    let prod = tape.mul(out, w).unwrap();
    tape.sum(prod)
}

fn eval(inputs: &[Tensor<f64>], build: &Build, seed: u64) -> (f64, Vec<Tensor<f64>>) {
    let mut tape = Tape::<f64>::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = build(&mut tape, &vars);
    let loss = if tape.shape(out).is_empty() {
        out
    } else {
        project(&mut tape, out, &mut ChaCha8Rng::seed_from_u64(seed ^ 0xABCD))
    };
    let mut grads = tape.backward(loss).unwrap();
    let value = tape.value(loss).item().unwrap();
    let g = vars.iter().zip(inputs).map(|(&v, t)| grads.take_or_zeros(v, t)).collect();
    (value, g)
}

/// Largest relative error between analytic and central-difference gradients
/// over all inputs.
pub fn gradient_error(shapes: &[Vec<usize>], build: &Build, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inputs: Vec<Tensor<f64>> = shapes.iter().map(|s| random(&mut rng, s)).collect();
    let (_, analytic) = eval(&inputs, build, seed);
    let mut worst: f64 = 0.0;
    for (k, input) in inputs.iter().enumerate() {
        let mut numeric = vec![0.0; input.len()];
        for (i, slot) in numeric.iter_mut().enumerate() {
            let mut up = inputs.clone();
            up[k].data_mut()[i] += H;
            let mut down = inputs.clone();
            down[k].data_mut()[i] -= H;
            *slot = (eval(&up, build, seed).0 - eval(&down, build, seed).0) / (2.0 * H);
        }
        let a = analytic[k].data();
        let diff: f64 = a.iter().zip(&numeric).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        let scale = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(numeric.iter().map(|x| x * x).sum::<f64>().sqrt());
        if scale > 1e-12 {
            worst = worst.max(diff / scale);
        }
    }
    worst
}

/// Worst error of `case` over seeds `0..SEEDS`, with the seed that hit it.
pub fn worst_over_seeds(case: &OpCase) -> (u64, f64) {
    (0..SEEDS)
        .map(|seed| (seed, gradient_error(&case.shapes, &case.build, seed)))
        .fold((0, 0.0), |acc, x| if x.1 > acc.1 { x } else { acc })
}

/// One case per differentiable op (and per conv geometry).
pub fn op_cases() -> Vec<OpCase> {
    let mut cases = vec![
        case("add", &[&[2, 3], &[2, 3]], |t, v| t.add(v[0], v[1]).unwrap()),
        case("sub", &[&[4], &[4]], |t, v| t.sub(v[0], v[1]).unwrap()),
        case("mul", &[&[3, 2], &[3, 2]], |t, v| t.mul(v[0], v[1]).unwrap()),
        case("mul fan-out", &[&[5]], |t, v| t.mul(v[0], v[0]).unwrap()),
        case("scale", &[&[2, 2]], |t, v| t.scale(v[0], -1.7)),
        case("add_scalar", &[&[3]], |t, v| t.add_scalar(v[0], 0.4)),
        case("relu", &[&[2, 5]], |t, v| t.relu(v[0])),
        case("reshape", &[&[2, 6]], |t, v| t.reshape(v[0], [3, 4]).unwrap()),
        case("sum", &[&[3, 4]], |t, v| t.sum(v[0])),
        case("mean", &[&[3, 4]], |t, v| t.mean(v[0])),
        case("global_avg_pool", &[&[2, 3, 4, 5]], |t, v| t.global_avg_pool(v[0]).unwrap()),
        case("matmul", &[&[3, 4], &[4, 2]], |t, v| t.matmul(v[0], v[1]).unwrap()),
        case("add_bias", &[&[3, 4], &[4]], |t, v| t.add_bias(v[0], v[1]).unwrap()),
        case("linear", &[&[5, 3], &[3, 2], &[2]], |t, v| t.linear(v[0], v[1], v[2]).unwrap()),
        case("concat axis 0", &[&[2, 3], &[1, 3]], |t, v| t.concat(&[v[0], v[1]], 0).unwrap()),
        case("concat axis 1", &[&[2, 3], &[2, 5], &[2, 1]], |t, v| t.concat(&[v[0], v[1], v[2]], 1).unwrap()),
        case("index_select", &[&[6]], |t, v| t.index_select(v[0], &[4, 0, 4, 2]).unwrap()),
        case("cross_entropy_per_sample", &[&[4, 3]], |t, v| t.cross_entropy_per_sample(v[0], &[0, 2, 1, 2]).unwrap()),
        case("softmax_cross_entropy", &[&[3, 3]], |t, v| t.softmax_cross_entropy(v[0], &[1, 1, 0]).unwrap()),
    ];
    let target = Tensor::new([6], vec![0.3, -1.2, 0.8, 2.0, 0.0, -0.4]).unwrap();
    cases.push(case("mse_loss", &[&[6]], move |t, v| {
        let target = t.constant(target.clone());
        mse_loss(t, v[0], target).unwrap()
    }));
    let pairs = shuffled_pairs(8, &mut ChaCha8Rng::seed_from_u64(1));
    // a small margin keeps most hinges active but away from their kinks
    let target = Tensor::new([8], vec![0.1, 2.0, 0.7, 1.1, 0.4, 3.0, 0.2, 0.9]).unwrap();
    cases.push(case("ranking_loss", &[&[8]], move |t, v| {
        let target = t.constant(target.clone());
        ranking_loss(t, v[0], target, &pairs, 0.05).unwrap()
    }));
    for (stride, pad) in [(1, 0), (1, 1), (2, 1), (2, 0)] {
        cases.push(case(
            &format!("conv2d stride {stride} pad {pad}"),
            &[&[2, 2, 5, 5], &[3, 2, 3, 3], &[3]],
            move |t, v| t.conv2d(v[0], v[1], v[2], stride, pad).unwrap(),
        ));
    }
    cases.push(case("conv2d 1x1", &[&[1, 3, 4, 4], &[2, 3, 1, 1], &[2]], |t, v| {
        t.conv2d(v[0], v[1], v[2], 1, 0).unwrap()
    }));
    cases.push(case("conv2d rectangular kernel", &[&[1, 1, 6, 4], &[2, 1, 3, 2], &[2]], |t, v| {
        t.conv2d(v[0], v[1], v[2], 1, 1).unwrap()
    }));
    cases
}

/// Errors of a small conv → relu → conv → relu → gap → linear → CE network
/// on `SEEDS` draws. Draws whose hidden pre-activations sit within a few
/// steps of relu's kink are skipped: central differences are invalid there.
pub fn composite_errors() -> Vec<(u64, f64)> {
    let shapes: Vec<Vec<usize>> =
        [&[2, 1, 6, 6][..], &[3, 1, 3, 3], &[3], &[4, 3, 3, 3], &[4], &[4, 3], &[3]].iter().map(|s| s.to_vec()).collect();
    let pre = |t: &mut Tape<f64>, v: &[Var]| {
        let a = t.conv2d(v[0], v[1], v[2], 1, 1).unwrap();
        let r = t.relu(a);
        let b = t.conv2d(r, v[3], v[4], 2, 1).unwrap();
        (a, b)
    };
    let build = move |t: &mut Tape<f64>, v: &[Var]| {
        let (_, b) = pre(t, v);
        let b = t.relu(b);
        let g = t.global_avg_pool(b).unwrap();
        let logits = t.linear(g, v[5], v[6]).unwrap();
        t.softmax_cross_entropy(logits, &[2, 0]).unwrap()
    };
    let mut out = Vec::new();
    let mut seed = 0u64;
    while (out.len() as u64) < SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs: Vec<Tensor<f64>> = shapes.iter().map(|s| random(&mut rng, s)).collect();
        let mut tape = Tape::<f64>::new();
        let vars: Vec<Var> = inputs.iter().map(|x| tape.constant(x.clone())).collect();
        let (a, b) = pre(&mut tape, &vars);
        let margin = tape.value(a).data().iter().chain(tape.value(b).data()).fold(f64::MAX, |m, x| m.min(x.abs()));
        if margin > 20.0 * H {
            out.push((seed, gradient_error(&shapes, &build, seed)));
        }
        seed += 1;
        assert!(seed < 1000, "could not find kink-free draws");
    }
    out
}

pub fn naive_conv(x: &Tensor<f32>, k: &Tensor<f32>, b: &Tensor<f32>, stride: usize, pad: usize) -> Vec<f64> {
    let (&[n, c, h, w], &[ko, _, kh, kw]) = (x.shape(), k.shape()) else { unreachable!() };
    let ho = (h + 2 * pad - kh) / stride + 1;
    let wo = (w + 2 * pad - kw) / stride + 1;
    let mut out = Vec::with_capacity(n * ko * ho * wo);
    for s in 0..n {
        for o in 0..ko {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = b.data()[o] as f64;
                    for ci in 0..c {
                        for i in 0..kh {
                            for j in 0..kw {
                                let y = (oy * stride + i) as isize - pad as isize;
                                let xx = (ox * stride + j) as isize - pad as isize;
                                if y < 0 || xx < 0 || y >= h as isize || xx >= w as isize {
                                    continue;
                                }
                                let xv = x.data()[((s * c + ci) * h + y as usize) * w + xx as usize] as f64;
                                let kv = k.data()[((o * c + ci) * kh + i) * kw + j] as f64;
                                acc += xv * kv;
                            }
                        }
                    }
                    out.push(acc);
                }
            }
        }
    }
    out
}

/// Relative error of the f32 convolution against the direct loops, per
/// geometry and seed.
pub fn conv_oracle_errors() -> Vec<(String, f64)> {
    let cases: &[([usize; 4], [usize; 4], usize, usize)] = &[
        ([1, 2, 5, 5], [3, 2, 3, 3], 2, 1),
        ([2, 1, 8, 8], [4, 1, 3, 3], 1, 1),
        ([3, 3, 7, 6], [2, 3, 3, 3], 2, 0),
        ([1, 4, 4, 4], [5, 4, 1, 1], 1, 0),
        ([2, 2, 9, 9], [2, 2, 5, 5], 3, 2),
    ];
    let mut out = Vec::new();
    for seed in 0..SEEDS {
        for &(xs, ks, stride, pad) in cases {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut draw = |shape: &[usize]| {
                let n = shape.iter().product();
                Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0f32..1.0)).collect()).unwrap()
            };
            let (x, k, b) = (draw(&xs), draw(&ks), draw(&[ks[0]]));
            let mut tape = Tape::<f32>::new();
            let (xv, kv, bv) = (tape.constant(x.clone()), tape.constant(k.clone()), tape.constant(b.clone()));
            let y = tape.conv2d(xv, kv, bv, stride, pad).unwrap();
            let expected = naive_conv(&x, &k, &b, stride, pad);
            let got = tape.value(y).data();
            assert_eq!(got.len(), expected.len());
            let diff = got.iter().zip(&expected).map(|(&g, e)| (g as f64 - e).powi(2)).sum::<f64>().sqrt();
            let norm = expected.iter().map(|e| e * e).sum::<f64>().sqrt();
            out.push((format!("{xs:?} {ks:?} stride {stride} pad {pad} seed {seed}"), diff / norm));
        }
    }
    out
}
