//! Independent reference implementations shared by the integration tests.
#![allow(dead_code)]

use uasam::engine::{grad_check, Ctx, GradCheckReport, ParamStore, Rng, Tensor, Var};
use uasam::latent::{kl_divergence, LatentGaussian};

/// Diagonal Gaussian as plain numbers, one entry per latent dimension.
#[derive(Clone, Debug)]
pub struct Diag {
    pub mu: Vec<f64>,
    pub log_sigma: Vec<f64>,
}

impl Diag {
    pub fn random(dim: usize, rng: &mut Rng) -> Self {
        Diag {
            mu: (0..dim).map(|_| rng.uniform_range(-1.5, 1.5)).collect(),
            log_sigma: (0..dim).map(|_| rng.uniform_range(-1.0, 1.0)).collect(),
        }
    }

    fn log_density(&self, x: &[f64]) -> f64 {
        let ln_2pi = (2.0 * std::f64::consts::PI).ln();
        x.iter()
            .zip(&self.mu)
            .zip(&self.log_sigma)
            .map(|((x, m), ls)| {
                let u = (x - m) / ls.exp();
                -0.5 * u * u - ls - 0.5 * ln_2pi
            })
            .sum()
    }
}

/// `E_q[log q(x) - log p(x)]` estimated from `draws` samples of `q`.
pub fn monte_carlo_kl(q: &Diag, p: &Diag, draws: usize, rng: &mut Rng) -> f64 {
    let mut x = vec![0.0; q.mu.len()];
    let mut sum = 0.0;
    for _ in 0..draws {
        for (i, xi) in x.iter_mut().enumerate() {
            *xi = q.mu[i] + q.log_sigma[i].exp() * rng.normal();
        }
        sum += q.log_density(&x) - p.log_density(&x);
    }
    sum / draws as f64
}

/// Library KL for a single pair (batch of one).
pub fn closed_form_kl(q: &Diag, p: &Diag) -> f64 {
    let store = ParamStore::new();
    let mut ctx = Ctx::eval(&store);
    let c = q.mu.len();
    let mut var = |v: &[f64]| ctx.constant(Tensor::new(vec![1, c], v.to_vec()).unwrap());
    let qg = LatentGaussian { mu: var(&q.mu), log_sigma: var(&q.log_sigma) };
    let pg = LatentGaussian { mu: var(&p.mu), log_sigma: var(&p.log_sigma) };
    let kl = kl_divergence(&mut ctx, qg, pg).unwrap();
    ctx.value(kl).item()
}

/// Counts votes pixel by pixel with no shared code path.
pub fn brute_force_vote(masks: &[Tensor], tie_to_foreground: bool) -> Vec<f64> {
    let n = masks.len();
    (0..masks[0].numel())
        .map(|i| {
            let on = masks.iter().filter(|m| m.data()[i] == 1.0).count();
            let off = n - on;
            let fg = on > off || (tie_to_foreground && on == off);
            if fg {
                1.0
            } else {
                0.0
            }
        })
        .collect()
}

pub fn random_mask(rows: usize, cols: usize, density: f64, rng: &mut Rng) -> Tensor {
    Tensor::from_fn(vec![rows, cols], |_| if rng.bernoulli(density) { 1.0 } else { 0.0 })
}

/// Random mask lists of length 1..=7; even lengths get a forced tie pixel.
pub fn random_mask_lists(count: usize, seed: u64) -> Vec<Vec<Tensor>> {
    let mut rng = Rng::new(seed);
    (0..count)
        .map(|_| {
            let n = 1 + rng.below(7);
            let density = rng.uniform_range(0.1, 0.9);
            let mut masks: Vec<Tensor> = (0..n).map(|_| random_mask(6, 7, density, &mut rng)).collect();
            if n % 2 == 0 {
                for (j, m) in masks.iter_mut().enumerate() {
                    m.data_mut()[0] = if j < n / 2 { 1.0 } else { 0.0 };
                }
            }
            masks
        })
        .collect()
}

type OpFn = Box<dyn Fn(&mut Ctx, &[Var]) -> uasam::Result<Var>>;

/// One differentiable op with inputs chosen away from its kinks.
pub struct OpCase {
    pub name: &'static str,
    pub inputs: Vec<Tensor>,
    pub apply: OpFn,
}

fn case(name: &'static str, inputs: Vec<Tensor>, apply: impl Fn(&mut Ctx, &[Var]) -> uasam::Result<Var> + 'static) -> OpCase {
    OpCase { name, inputs, apply: Box::new(apply) }
}

/// Normal entries pushed at least `gap` away from zero.
fn away_from_zero(shape: Vec<usize>, gap: f64, rng: &mut Rng) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let v = rng.normal();
        v.signum() * (gap + v.abs())
    })
}

pub fn op_cases(rng: &mut Rng) -> Vec<OpCase> {
    let n = |shape: &[usize], rng: &mut Rng| rng.normal_tensor(shape.to_vec(), 1.0);
    let positive = |shape: &[usize], rng: &mut Rng| rng.uniform_tensor(shape.to_vec(), 0.5, 2.0);
    vec![
        case("add", vec![n(&[3, 4], rng), n(&[4], rng)], |c, v| c.add(v[0], v[1])),
        case("sub", vec![n(&[2, 3], rng), n(&[2, 1], rng)], |c, v| c.sub(v[0], v[1])),
        case("mul", vec![n(&[2, 3, 2], rng), n(&[3, 2], rng)], |c, v| c.mul(v[0], v[1])),
        case("div", vec![n(&[3, 3], rng), positive(&[3, 3], rng)], |c, v| c.div(v[0], v[1])),
        case("scale", vec![n(&[4, 2], rng)], |c, v| c.scale(v[0], -1.7)),
        case("add_scalar", vec![n(&[5], rng)], |c, v| c.add_scalar(v[0], 0.3)),
        case("relu", vec![away_from_zero(vec![3, 4], 0.1, rng)], |c, v| c.relu(v[0])),
        case("gelu", vec![n(&[3, 4], rng)], |c, v| c.gelu(v[0])),
        case("sigmoid", vec![n(&[3, 4], rng)], |c, v| c.sigmoid(v[0])),
        case("exp", vec![n(&[2, 5], rng)], |c, v| c.exp(v[0])),
        case("log", vec![positive(&[2, 5], rng)], |c, v| c.log(v[0])),
        case("softplus", vec![n(&[4, 3], rng)], |c, v| c.softplus(v[0])),
        case("square", vec![n(&[4, 3], rng)], |c, v| c.square(v[0])),
        case("clamp", vec![rng.uniform_tensor(vec![3, 4], -0.4, 0.4)], |c, v| c.clamp(v[0], -0.5, 0.5)),
        case("matmul", vec![n(&[2, 3, 4], rng), n(&[4, 5], rng)], |c, v| c.matmul(v[0], v[1])),
        case("matmul_nt", vec![n(&[2, 3, 4], rng), n(&[2, 5, 4], rng)], |c, v| c.matmul_nt(v[0], v[1])),
        case("reshape", vec![n(&[2, 6], rng)], |c, v| c.reshape(v[0], &[3, 4])),
        case("permute", vec![n(&[2, 3, 4], rng)], |c, v| c.permute(v[0], &[2, 0, 1])),
        case("transpose", vec![n(&[2, 3, 4], rng)], |c, v| c.transpose(v[0])),
        case("broadcast_to", vec![n(&[1, 3, 1], rng)], |c, v| c.broadcast_to(v[0], &[2, 3, 4])),
        case("concat", vec![n(&[2, 3], rng), n(&[1, 3], rng)], |c, v| c.concat(&[v[0], v[1]], 0)),
        case("concat_last", vec![n(&[2, 3], rng), n(&[2, 2], rng)], |c, v| c.concat_last(&[v[0], v[1]])),
        case("slice", vec![n(&[3, 5], rng)], |c, v| c.slice(v[0], 1, 1, 3)),
        case("softmax", vec![n(&[3, 5], rng)], |c, v| c.softmax(v[0])),
        case("layer_norm", vec![n(&[3, 5], rng)], |c, v| c.layer_norm(v[0])),
        case("sum", vec![n(&[3, 4], rng)], |c, v| c.sum(v[0])),
        case("mean", vec![n(&[3, 4], rng)], |c, v| c.mean(v[0])),
        case("sum_axis", vec![n(&[2, 3, 4], rng)], |c, v| c.sum_axis(v[0], 1)),
        case("mean_axis", vec![n(&[2, 3, 4], rng)], |c, v| c.mean_axis(v[0], 2)),
        case("im2col", vec![n(&[1, 5, 5, 2], rng)], |c, v| c.im2col(v[0], 3, 2, 1)),
    ]
}

/// Grad-checks `sum(op(inputs) * w)` for a random fixed weighting `w`.
pub fn check_op(case: &OpCase, rng: &mut Rng) -> GradCheckReport {
    let mut store = ParamStore::new();
    for (i, t) in case.inputs.iter().enumerate() {
        store.insert(format!("x{i}"), t.clone()).unwrap();
    }
    let out_shape = {
        let mut ctx = Ctx::eval(&store);
        let vars: Vec<Var> = (0..case.inputs.len()).map(|i| ctx.param(&format!("x{i}")).unwrap()).collect();
        let out = (case.apply)(&mut ctx, &vars).unwrap();
        ctx.shape(out).to_vec()
    };
    let weights = rng.normal_tensor(out_shape, 1.0);
    grad_check(
        |ctx| {
            let vars = (0..case.inputs.len()).map(|i| ctx.param(&format!("x{i}"))).collect::<uasam::Result<Vec<_>>>()?;
            let out = (case.apply)(ctx, &vars)?;
            let w = ctx.constant(weights.clone());
            let prod = ctx.mul(out, w)?;
            ctx.sum(prod)
        },
        &store,
        1e-5,
    )
    .unwrap()
}
