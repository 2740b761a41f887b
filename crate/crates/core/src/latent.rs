//! Conditional Gaussian latent: a prior net on the image alone and a
//! posterior net on the image together with an annotator mask.

use crate::config::LatentConfig;
use crate::engine::{Ctx, ParamStore, Rng, Tensor, Var};
use crate::error::{Error, Result};
use crate::nn::{Conv2d, Init, Linear};

pub const PRIOR_PREFIX: &str = "prior.";
pub const POSTERIOR_PREFIX: &str = "posterior.";

const CHANNELS: [usize; 3] = [8, 16, 32];

/// Diagonal Gaussian `N(mu, exp(log_sigma)^2)`, both `[B, C]`.
#[derive(Clone, Copy, Debug)]
pub struct LatentGaussian {
    pub mu: Var,
    pub log_sigma: Var,
}

/// Small strided conv net ending in mean and log-scale heads.
#[derive(Clone, Debug)]
pub struct LatentNet {
    convs: Vec<Conv2d>,
    mu: Linear,
    log_sigma: Linear,
    in_channels: usize,
    cfg: LatentConfig,
}

impl LatentNet {
    fn new(name: &str, in_channels: usize, cfg: &LatentConfig) -> Self {
        let mut convs = Vec::new();
        let mut c = in_channels;
        for (i, &out) in CHANNELS.iter().enumerate() {
            convs.push(Conv2d::new(&format!("{name}.conv{i}"), c, out, 2, 2, 0));
            c = out;
        }
        LatentNet {
            convs,
            mu: Linear::new(format!("{name}.mu"), c, cfg.latent_dim),
            log_sigma: Linear::new(format!("{name}.log_sigma"), c, cfg.latent_dim),
            in_channels,
            cfg: cfg.clone(),
        }
    }

    pub fn prior(cfg: &LatentConfig) -> Self {
        LatentNet::new("prior", 1, cfg)
    }

    pub fn posterior(cfg: &LatentConfig) -> Self {
        LatentNet::new("posterior", 2, cfg)
    }

    pub fn latent_dim(&self) -> usize {
        self.cfg.latent_dim
    }

    pub fn register(&self, store: &mut ParamStore, rng: &mut Rng) -> Result<()> {
        for c in &self.convs {
            c.register(store, rng, Init::He)?;
        }
        self.mu.register(store, rng, Init::Xavier)?;
        self.log_sigma.register(store, rng, Init::Normal(0.01))
    }

    /// `input` is NHWC with `in_channels` channels.
    fn forward(&self, ctx: &mut Ctx, input: Var) -> Result<LatentGaussian> {
        let s = ctx.shape(input).to_vec();
        if s.len() != 4 || s[3] != self.in_channels {
            return Err(Error::shape("latent_net", format!("expected [B, H, W, {}], got {s:?}", self.in_channels)));
        }
        let mut h = input;
        for c in &self.convs {
            h = c.forward(ctx, h)?;
            h = ctx.relu(h)?;
        }
        let hs = ctx.shape(h).to_vec();
        let flat = ctx.reshape(h, &[hs[0], hs[1] * hs[2], hs[3]])?;
        let pooled = ctx.mean_axis(flat, 1)?;
        let mu = self.mu.forward(ctx, pooled)?;
        let ls = self.log_sigma.forward(ctx, pooled)?;
        let log_sigma = ctx.clamp(ls, self.cfg.log_sigma_min, self.cfg.log_sigma_max)?;
        Ok(LatentGaussian { mu, log_sigma })
    }
}

fn image_nhwc(ctx: &mut Ctx, images: Var, op: &'static str) -> Result<Var> {
    let s = ctx.shape(images).to_vec();
    if s.len() != 4 || s[1] != 1 {
        return Err(Error::shape(op, format!("expected [B, 1, S, S], got {s:?}")));
    }
    ctx.reshape(images, &[s[0], s[2], s[3], 1])
}

/// Prior `p(z | x)` from images `[B, 1, S, S]`.
pub fn prior_net(ctx: &mut Ctx, net: &LatentNet, images: Var) -> Result<LatentGaussian> {
    let x = image_nhwc(ctx, images, "prior_net")?;
    net.forward(ctx, x)
}

/// Posterior `q(z | x, y)` from images and binary masks, both `[B, 1, S, S]`.
pub fn posterior_net(ctx: &mut Ctx, net: &LatentNet, images: Var, masks: Var) -> Result<LatentGaussian> {
    if ctx.shape(images) != ctx.shape(masks) {
        return Err(Error::shape(
            "posterior_net",
            format!("image {:?} vs mask {:?}", ctx.shape(images), ctx.shape(masks)),
        ));
    }
    if let Some(&bad) = ctx.value(masks).data().iter().find(|&&v| v != 0.0 && v != 1.0) {
        return Err(Error::NonBinaryMask(bad));
    }
    let x = image_nhwc(ctx, images, "posterior_net")?;
    let y = image_nhwc(ctx, masks, "posterior_net")?;
    let joint = ctx.concat_last(&[x, y])?;
    net.forward(ctx, joint)
}

/// Reparameterised draw `mu + exp(log_sigma) * eps`.
pub fn sample(ctx: &mut Ctx, dist: LatentGaussian, rng: &mut Rng) -> Result<Var> {
    let shape = ctx.shape(dist.mu).to_vec();
    sample_with(ctx, dist, rng.normal_tensor(shape, 1.0))
}

/// Same as [`sample`] with caller-supplied standard normal noise.
pub fn sample_with(ctx: &mut Ctx, dist: LatentGaussian, eps: Tensor) -> Result<Var> {
    if eps.shape() != ctx.shape(dist.mu) {
        return Err(Error::shape("sample", format!("noise {:?} vs mean {:?}", eps.shape(), ctx.shape(dist.mu))));
    }
    let eps = ctx.constant(eps);
    let sigma = ctx.exp(dist.log_sigma)?;
    let noise = ctx.mul(sigma, eps)?;
    ctx.add(dist.mu, noise)
}

/// `KL(q || p)` summed over latent channels and averaged over the batch.
pub fn kl_divergence(ctx: &mut Ctx, q: LatentGaussian, p: LatentGaussian) -> Result<Var> {
    if ctx.shape(q.mu) != ctx.shape(p.mu) || ctx.shape(q.log_sigma) != ctx.shape(q.mu) {
        return Err(Error::shape("kl_divergence", format!("{:?} vs {:?}", ctx.shape(q.mu), ctx.shape(p.mu))));
    }
    let b = ctx.shape(q.mu)[0] as f64;
    let log_ratio = ctx.sub(p.log_sigma, q.log_sigma)?;
    let two_q = ctx.scale(q.log_sigma, 2.0)?;
    let var_q = ctx.exp(two_q)?;
    let diff = ctx.sub(q.mu, p.mu)?;
    let diff2 = ctx.square(diff)?;
    let num = ctx.add(var_q, diff2)?;
    let two_p = ctx.scale(p.log_sigma, 2.0)?;
    let var_p = ctx.exp(two_p)?;
    let den = ctx.scale(var_p, 2.0)?;
    let frac = ctx.div(num, den)?;
    let t = ctx.add(log_ratio, frac)?;
    let t = ctx.add_scalar(t, -0.5)?;
    let total = ctx.sum(t)?;
    ctx.scale(total, 1.0 / b)
}

/// Closed-form KL between two univariate Gaussians given by mean and log-scale.
pub fn kl_scalar(mu_q: f64, log_sigma_q: f64, mu_p: f64, log_sigma_p: f64) -> f64 {
    log_sigma_p - log_sigma_q
        + ((2.0 * log_sigma_q).exp() + (mu_q - mu_p).powi(2)) / (2.0 * (2.0 * log_sigma_p).exp())
        - 0.5
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::grad_check;

    fn nets() -> (LatentNet, LatentNet, ParamStore) {
        let cfg = LatentConfig::default();
        let (prior, post) = (LatentNet::prior(&cfg), LatentNet::posterior(&cfg));
        let mut store = ParamStore::new();
        let mut rng = Rng::new(3);
        prior.register(&mut store, &mut rng).unwrap();
        post.register(&mut store, &mut rng).unwrap();
        (prior, post, store)
    }

    #[test]
    fn prior_shapes_and_sensitivity() {
        let (prior, _, store) = nets();
        let mut ctx = Ctx::eval(&store);
        let mut rng = Rng::new(1);
        let a = ctx.constant(rng.uniform_tensor(vec![1, 1, 32, 32], 0.0, 1.0));
        let b = ctx.constant(rng.uniform_tensor(vec![1, 1, 32, 32], 0.0, 1.0));
        let da = prior_net(&mut ctx, &prior, a).unwrap();
        let db = prior_net(&mut ctx, &prior, b).unwrap();
        assert_eq!(ctx.shape(da.mu), &[1, 6]);
        assert_eq!(ctx.shape(da.log_sigma), &[1, 6]);
        assert_ne!(ctx.value(da.mu), ctx.value(db.mu));
        assert!(ctx.value(da.log_sigma).data().iter().all(|v| (-6.0..=4.0).contains(v)));
    }

    #[test]
    fn posterior_rejects_soft_masks() {
        let (_, post, store) = nets();
        let mut ctx = Ctx::eval(&store);
        let img = ctx.constant(Tensor::zeros(vec![1, 1, 32, 32]));
        let mut m = Tensor::zeros(vec![1, 1, 32, 32]);
        m.data_mut()[5] = 0.5;
        let m = ctx.constant(m);
        assert!(matches!(posterior_net(&mut ctx, &post, img, m), Err(Error::NonBinaryMask(_))));
        let m = ctx.constant(Tensor::full(vec![1, 1, 32, 32], 1.0));
        let q = posterior_net(&mut ctx, &post, img, m).unwrap();
        assert_eq!(ctx.shape(q.mu), &[1, 6]);
    }

    #[test]
    fn kl_of_identical_distributions_is_zero() {
        let store = ParamStore::new();
        let mut ctx = Ctx::eval(&store);
        let mut rng = Rng::new(4);
        let mu = ctx.constant(rng.normal_tensor(vec![3, 5], 1.0));
        let ls = ctx.constant(rng.normal_tensor(vec![3, 5], 0.5));
        let d = LatentGaussian { mu, log_sigma: ls };
        let kl = kl_divergence(&mut ctx, d, d).unwrap();
        assert_eq!(ctx.value(kl).item(), 0.0);
    }

    #[test]
    fn kl_matches_scalar_form() {
        let store = ParamStore::new();
        let mut ctx = Ctx::eval(&store);
        let mq = ctx.constant(Tensor::new(vec![1, 2], vec![0.3, -1.0]).unwrap());
        let lq = ctx.constant(Tensor::new(vec![1, 2], vec![-0.2, 0.4]).unwrap());
        let mp = ctx.constant(Tensor::new(vec![1, 2], vec![0.0, 0.5]).unwrap());
        let lp = ctx.constant(Tensor::new(vec![1, 2], vec![0.1, 0.0]).unwrap());
        let kl = kl_divergence(&mut ctx, LatentGaussian { mu: mq, log_sigma: lq }, LatentGaussian { mu: mp, log_sigma: lp })
            .unwrap();
        let expect = kl_scalar(0.3, -0.2, 0.0, 0.1) + kl_scalar(-1.0, 0.4, 0.5, 0.0);
        assert!((ctx.value(kl).item() - expect).abs() < 1e-14);
    }

    #[test]
    fn sampling_is_seeded() {
        let (prior, _, store) = nets();
        let img = Rng::new(2).uniform_tensor(vec![2, 1, 32, 32], 0.0, 1.0);
        let draw = |seed| {
            let mut ctx = Ctx::eval(&store);
            let i = ctx.constant(img.clone());
            let d = prior_net(&mut ctx, &prior, i).unwrap();
            let z = sample(&mut ctx, d, &mut Rng::new(seed)).unwrap();
            ctx.value(z).clone()
        };
        assert_eq!(draw(5), draw(5));
        assert_ne!(draw(5), draw(6));
    }

    #[test]
    fn latent_nets_gradients_check_out() {
        let cfg = LatentConfig { latent_dim: 3, ..LatentConfig::default() };
        let (prior, post) = (LatentNet::prior(&cfg), LatentNet::posterior(&cfg));
        let mut store = ParamStore::new();
        let mut rng = Rng::new(8);
        prior.register(&mut store, &mut rng).unwrap();
        post.register(&mut store, &mut rng).unwrap();
        let img = rng.uniform_tensor(vec![2, 1, 8, 8], 0.0, 1.0);
        let mask = Tensor::from_fn(vec![2, 1, 8, 8], |i| ((i / 3) % 2) as f64);
        let eps_seed = 77;
        let report = grad_check(
            |ctx| {
                let i = ctx.constant(img.clone());
                let m = ctx.constant(mask.clone());
                let p = prior_net(ctx, &prior, i)?;
                let q = posterior_net(ctx, &post, i, m)?;
                let z = sample(ctx, q, &mut Rng::new(eps_seed))?;
                let kl = kl_divergence(ctx, q, p)?;
                let z2 = ctx.square(z)?;
                let s = ctx.mean(z2)?;
                ctx.add(kl, s)
            },
            &store,
            1e-5,
        )
        .unwrap();
        assert!(report.max_relative_error < 1e-4, "{report:?}");
    }
}
