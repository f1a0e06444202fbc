//! Central-difference checks at f64 for every differentiable op and layer,
//! five random configurations each. Each check projects the op's output
//! onto a fixed random tensor so every output component contributes.

use neurograd::error::Result;
use neurograd::loss::{class_weights, cross_entropy, weighted_cross_entropy};
use neurograd::nn::{ActivationKind, BasicBlock, BatchNorm2dParams, Conv2dParams, Downsample, Mode};
use neurograd::tensor::{finite_difference_check, Reduce, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const STEP: f64 = 1e-6;
pub const TOLERANCE: f64 = 1e-4;
pub const CONFIGS: u64 = 5;

#[derive(Debug, Clone)]
pub struct Outcome {
    pub op: &'static str,
    pub config: u64,
    pub max_rel_error: f64,
}

impl Outcome {
    pub fn passed(&self) -> bool {
        self.max_rel_error < TOLERANCE
    }
}

pub fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| rng.random_range(lo..hi)).collect();
    Tensor::from_f64(shape, &v).unwrap()
}

/// `Σ y ⊙ r` for a fixed pseudo-random `r` of `y`'s shape.
fn project<'t>(y: Var<'t, f64>) -> Result<Var<'t, f64>> {
    let shape = y.shape()?;
    let mut rng = ChaCha8Rng::seed_from_u64(0xfeed);
    let r = rand_tensor(&mut rng, &shape, -1.0, 1.0);
    y.mul(&y.tape().constant(&r))?.sum()
}

fn check<F>(op: &'static str, config: u64, f: F, x: &Tensor<f64>) -> Outcome
where
    F: for<'t> Fn(Var<'t, f64>) -> Result<Var<'t, f64>>,
{
    let report = finite_difference_check(|v| project(f(v)?), x, STEP, TOLERANCE).unwrap();
    Outcome { op, config, max_rel_error: report.max_rel_error }
}

/// Random values kept at least `gap` away from zero, for ops with a kink there.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize], gap: f64) -> Tensor<f64> {
    let mut t = rand_tensor(rng, shape, -2.0, 2.0);
    for v in t.data_mut() {
        if v.abs() < gap {
            *v = if *v < 0.0 { -gap } else { gap };
        }
    }
    t
}

/// Values at least 0.05 away from the clamp edges ±0.5.
fn away_from_edges(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let mut t = rand_tensor(rng, shape, -1.0, 1.0);
    for v in t.data_mut() {
        if (v.abs() - 0.5).abs() < 0.05 {
            *v *= 0.8;
        }
    }
    t
}

fn dims(rng: &mut ChaCha8Rng, lo: usize, hi: usize) -> usize {
    rng.random_range(lo..=hi)
}

pub fn elementwise(c: u64) -> Vec<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(100 + c);
    let shape = [dims(&mut rng, 1, 3), dims(&mut rng, 2, 4)];
    let a = rand_tensor(&mut rng, &shape, -2.0, 2.0);
    let b = rand_tensor(&mut rng, &shape, 0.5, 2.0);
    let pos = rand_tensor(&mut rng, &shape, 0.3, 3.0);
    let s: f64 = rng.random_range(-2.0..2.0);
    let (b1, b2) = (b.clone(), b.clone());
    let (b3, a1) = (b.clone(), a.clone());
    vec![
        check("add", c, move |x| x.add(&x.tape().constant(&b1)), &a),
        check("sub", c, move |x| x.tape().constant(&b2).sub(&x), &a),
        check("mul", c, move |x| x.mul(&x.tape().constant(&b3)), &a),
        check(
            "div (numerator)",
            c,
            {
                let b = b.clone();
                move |x| x.div(&x.tape().constant(&b))
            },
            &a,
        ),
        check("div (denominator)", c, move |x| x.tape().constant(&a1).div(&x), &b),
        check("neg", c, |x| x.neg(), &a),
        check("exp", c, |x| x.exp(), &a),
        check("ln", c, |x| x.ln(), &pos),
        check("powf", c, move |x| x.powf(1.5 + s.abs()), &pos),
        check("add_scalar", c, move |x| x.add_scalar(s), &a),
        check("mul_scalar", c, move |x| x.mul_scalar(s), &a),
        check("tanh", c, |x| x.tanh(), &a),
        check("clamp", c, |x| x.clamp(-0.5, 0.5), &away_from_edges(&mut rng, &shape)),
    ]
}

pub fn matmul(c: u64) -> Vec<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(200 + c);
    let (m, k, n) = (dims(&mut rng, 1, 4), dims(&mut rng, 1, 5), dims(&mut rng, 1, 4));
    let a = rand_tensor(&mut rng, &[m, k], -1.0, 1.0);
    let b = rand_tensor(&mut rng, &[k, n], -1.0, 1.0);
    let (a1, b1) = (a.clone(), b.clone());
    vec![
        check("matmul (left)", c, move |x| x.matmul(&x.tape().constant(&b1)), &a),
        check("matmul (right)", c, move |x| x.tape().constant(&a1).matmul(&x), &b),
    ]
}

pub fn reduce(c: u64) -> Vec<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(300 + c);
    let shape = [dims(&mut rng, 1, 3), dims(&mut rng, 2, 4), dims(&mut rng, 1, 3)];
    let x = rand_tensor(&mut rng, &shape, -2.0, 2.0);
    let axis = rng.random_range(0..3);
    vec![
        check("reduce sum", c, move |v| v.reduce(Reduce::Sum, Some(axis)), &x),
        check("reduce mean", c, move |v| v.reduce(Reduce::Mean, Some(axis)), &x),
        check("reduce max", c, move |v| v.reduce(Reduce::Max, Some(axis)), &x),
        check("reduce sum (all)", c, |v| v.reduce(Reduce::Sum, None), &x),
        check("reduce mean (all)", c, |v| v.reduce(Reduce::Mean, None), &x),
    ]
}

pub fn conv2d(c: u64) -> Vec<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(400 + c);
    let (b, ci, co) = (dims(&mut rng, 1, 2), dims(&mut rng, 1, 3), dims(&mut rng, 1, 3));
    let k = [1, 3, 3, 2, 3][c as usize % 5];
    let stride = [1, 1, 2, 2, 1][c as usize % 5];
    let pad = [0, 1, 1, 0, 0][c as usize % 5];
    let hw = dims(&mut rng, k.max(3), 6);
    let x = rand_tensor(&mut rng, &[b, ci, hw, hw], -1.0, 1.0);
    let w = rand_tensor(&mut rng, &[co, ci, k, k], -1.0, 1.0);
    let bias = rand_tensor(&mut rng, &[co], -1.0, 1.0);
    let (w1, b1, x1, b2, x2, w2) = (w.clone(), bias.clone(), x.clone(), bias.clone(), x.clone(), w.clone());
    vec![
        check(
            "conv2d (input)",
            c,
            move |v| {
                let t = v.tape();
                v.conv2d(&t.constant(&w1), Some(&t.constant(&b1)), stride, pad)
            },
            &x,
        ),
        check(
            "conv2d (weight)",
            c,
            move |v| {
                let t = v.tape();
                t.constant(&x1).conv2d(&v, Some(&t.constant(&b2)), stride, pad)
            },
            &w,
        ),
        check(
            "conv2d (bias)",
            c,
            move |v| {
                let t = v.tape();
                t.constant(&x2).conv2d(&t.constant(&w2), Some(&v), stride, pad)
            },
            &bias,
        ),
    ]
}

pub fn batchnorm_train(c: u64) -> Vec<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(500 + c);
    let (b, ch, hw) = (dims(&mut rng, 2, 3), dims(&mut rng, 1, 3), dims(&mut rng, 1, 3));
    let x = rand_tensor(&mut rng, &[b, ch, hw, hw], -2.0, 2.0);
    let g = rand_tensor(&mut rng, &[ch], 0.5, 1.5);
    let beta = rand_tensor(&mut rng, &[ch], -0.5, 0.5);
    let eps = 1e-5;
    let (g1, be1, x1, be2, x2, g2) = (g.clone(), beta.clone(), x.clone(), beta.clone(), x.clone(), g.clone());
    vec![
        check(
            "batchnorm2d train (input)",
            c,
            move |v| {
                let t = v.tape();
                Ok(v.batch_norm_train(&t.constant(&g1), &t.constant(&be1), eps)?.0)
            },
            &x,
        ),
        check(
            "batchnorm2d train (gamma)",
            c,
            move |v| {
                let t = v.tape();
                Ok(t.constant(&x1).batch_norm_train(&v, &t.constant(&be2), eps)?.0)
            },
            &g,
        ),
        check(
            "batchnorm2d train (beta)",
            c,
            move |v| {
                let t = v.tape();
                Ok(t.constant(&x2).batch_norm_train(&t.constant(&g2), &v, eps)?.0)
            },
            &beta,
        ),
    ]
}

pub fn pooling(c: u64) -> Vec<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(600 + c);
    let (b, ch, hw) = (dims(&mut rng, 1, 2), dims(&mut rng, 1, 3), dims(&mut rng, 3, 6));
    let x = rand_tensor(&mut rng, &[b, ch, hw, hw], -2.0, 2.0);
    let (k, s, p) = [(2, 2, 0), (3, 2, 1), (3, 1, 1), (2, 1, 0), (3, 2, 0)][c as usize % 5];
    vec![
        check("max_pool2d", c, move |v| v.max_pool2d(k, s, p), &x),
        check("global_avg_pool", c, |v| v.global_avg_pool(), &x),
    ]
}

pub fn linear(c: u64) -> Vec<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(700 + c);
    let (b, i, o) = (dims(&mut rng, 1, 4), dims(&mut rng, 1, 5), dims(&mut rng, 1, 4));
    let x = rand_tensor(&mut rng, &[b, i], -1.0, 1.0);
    let w = rand_tensor(&mut rng, &[o, i], -1.0, 1.0);
    let bias = rand_tensor(&mut rng, &[o], -1.0, 1.0);
    let (w1, b1, x1, b2, x2, w2) = (w.clone(), bias.clone(), x.clone(), bias.clone(), x.clone(), w.clone());
    vec![
        check(
            "linear (input)",
            c,
            move |v| {
                let t = v.tape();
                v.linear(&t.constant(&w1), Some(&t.constant(&b1)))
            },
            &x,
        ),
        check(
            "linear (weight)",
            c,
            move |v| {
                let t = v.tape();
                t.constant(&x1).linear(&v, Some(&t.constant(&b2)))
            },
            &w,
        ),
        check(
            "linear (bias)",
            c,
            move |v| {
                let t = v.tape();
                t.constant(&x2).linear(&t.constant(&w2), Some(&v))
            },
            &bias,
        ),
    ]
}

pub fn activations(c: u64) -> Vec<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(800 + c);
    let shape = [dims(&mut rng, 1, 3), dims(&mut rng, 2, 5)];
    let x = away_from_zero(&mut rng, &shape, 0.05);
    let wide = rand_tensor(&mut rng, &shape, -25.0, 25.0);
    vec![
        check("relu", c, |v| v.relu(), &x),
        check("softplus", c, |v| v.softplus(), &x),
        check("softplus (wide range)", c, |v| v.softplus(), &wide),
        check("mish", c, |v| v.mish(), &x),
        check("mish (wide range)", c, |v| v.mish(), &wide),
        check("softmax", c, |v| v.softmax(), &x),
    ]
}

pub fn losses(c: u64) -> Vec<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(900 + c);
    let (b, k) = (dims(&mut rng, 1, 5), dims(&mut rng, 2, 4));
    let logits = rand_tensor(&mut rng, &[b, k], -2.0, 2.0);
    let targets: Vec<usize> = (0..b).map(|_| rng.random_range(0..k)).collect();
    let counts: Vec<usize> = (0..k).map(|_| rng.random_range(1..50)).collect();
    let weights = class_weights(&counts).unwrap();
    let (t1, t2) = (targets.clone(), targets.clone());
    vec![
        check("cross_entropy", c, move |v| cross_entropy(v.softmax()?, &t1), &logits),
        check("weighted_cross_entropy", c, move |v| weighted_cross_entropy(v.softmax()?, &t2, &weights), &logits),
    ]
}

fn bn(rng: &mut ChaCha8Rng, ch: usize) -> BatchNorm2dParams<f64> {
    let mut p = BatchNorm2dParams::new(ch).unwrap();
    p.gamma = Tensor::param(&[ch], rand_tensor(rng, &[ch], 0.5, 1.5).to_vec()).unwrap();
    p.beta = Tensor::param(&[ch], rand_tensor(rng, &[ch], -0.5, 0.5).to_vec()).unwrap();
    p
}

fn conv(rng: &mut ChaCha8Rng, i: usize, o: usize, k: usize, stride: usize, pad: usize) -> Conv2dParams<f64> {
    let w = Tensor::param(&[o, i, k, k], rand_tensor(rng, &[o, i, k, k], -0.6, 0.6).to_vec()).unwrap();
    Conv2dParams::new(w, None, stride, pad).unwrap()
}

fn block_params(b: &mut BasicBlock<f64>) -> Vec<(&'static str, &mut Tensor<f64>)> {
    let mut v: Vec<(&'static str, &mut Tensor<f64>)> = vec![
        ("conv1.weight", &mut b.conv1.weight),
        ("bn1.gamma", &mut b.bn1.gamma),
        ("bn1.beta", &mut b.bn1.beta),
        ("conv2.weight", &mut b.conv2.weight),
        ("bn2.gamma", &mut b.bn2.gamma),
        ("bn2.beta", &mut b.bn2.beta),
    ];
    if let Some(d) = &mut b.downsample {
        v.push(("downsample.conv.weight", &mut d.conv.weight));
        v.push(("downsample.bn.gamma", &mut d.bn.gamma));
        v.push(("downsample.bn.beta", &mut d.bn.beta));
    }
    v
}

fn block_loss(block: &BasicBlock<f64>, x: &Tensor<f64>) -> f64 {
    let mut b = block.clone();
    let tape = Tape::new();
    let y = b.forward(&tape, tape.constant(x), Mode::Train).unwrap();
    project(y).unwrap().value().unwrap().data()[0]
}

/// Residual block in train mode: gradient with respect to the input through
/// the generic checker, and with respect to every parameter by perturbing
/// the parameter tensors directly.
pub fn basic_block(c: u64) -> Vec<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(1000 + c);
    let (ci, co, stride) = [(2, 2, 1), (2, 3, 2), (3, 3, 1), (1, 2, 1), (2, 2, 2)][c as usize % 5];
    let (act1, act2) = [
        (ActivationKind::Relu, ActivationKind::Relu),
        (ActivationKind::Mish, ActivationKind::Mish),
        (ActivationKind::Relu, ActivationKind::Mish),
        (ActivationKind::Mish, ActivationKind::Relu),
        (ActivationKind::Relu, ActivationKind::Relu),
    ][c as usize % 5];
    let downsample = (stride != 1 || ci != co)
        .then(|| Downsample { conv: conv(&mut rng, ci, co, 1, stride, 0), bn: bn(&mut rng, co) });
    let mut block = BasicBlock {
        conv1: conv(&mut rng, ci, co, 3, stride, 1),
        bn1: bn(&mut rng, co),
        conv2: conv(&mut rng, co, co, 3, 1, 1),
        bn2: bn(&mut rng, co),
        downsample,
        act1,
        act2,
    };
    let hw = [4, 5, 4, 3, 6][c as usize % 5];
    let x = rand_tensor(&mut rng, &[2, ci, hw, hw], -1.5, 1.5);

    let frozen = block.clone();
    let mut out = vec![check(
        "basic_block (input)",
        c,
        move |v| {
            let mut b = frozen.clone();
            let t = v.tape();
            b.forward(t, v, Mode::Train)
        },
        &x,
    )];

    // analytic parameter gradients
    for (_, p) in block_params(&mut block) {
        p.zero_grad();
    }
    {
        let mut b = block.clone();
        let tape = Tape::new();
        let y = b.forward(&tape, tape.constant(&x), Mode::Train).unwrap();
        project(y).unwrap().backward().unwrap();
    }
    let names: Vec<&'static str> = block_params(&mut block).into_iter().map(|(n, _)| n).collect();
    let mut worst = 0.0f64;
    for (i, _) in names.iter().enumerate() {
        let analytic = block_params(&mut block)[i].1.grad().expect("parameter gradient").to_vec();
        for (j, &a) in analytic.iter().enumerate() {
            let mut plus = block.clone();
            let mut minus = block.clone();
            block_params(&mut plus)[i].1.data_mut()[j] += STEP;
            block_params(&mut minus)[i].1.data_mut()[j] -= STEP;
            let numeric = (block_loss(&plus, &x) - block_loss(&minus, &x)) / (2.0 * STEP);
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(neurograd::tensor::gradcheck::REL_FLOOR);
            worst = worst.max(err);
        }
    }
    out.push(Outcome { op: "basic_block (parameters)", config: c, max_rel_error: worst });
    out
}

pub type Group = fn(u64) -> Vec<Outcome>;

pub const GROUPS: [(&str, Group); 10] = [
    ("elementwise", elementwise),
    ("matmul", matmul),
    ("reduce", reduce),
    ("conv2d", conv2d),
    ("batchnorm2d", batchnorm_train),
    ("pooling", pooling),
    ("linear", linear),
    ("activations", activations),
    ("losses", losses),
    ("basic_block", basic_block),
];

pub fn run_group(g: Group) -> Vec<Outcome> {
    (0..CONFIGS).flat_map(g).collect()
}

pub fn run_all() -> Vec<Outcome> {
    GROUPS.iter().flat_map(|(_, g)| run_group(*g)).collect()
}
