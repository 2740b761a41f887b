//! Uncertainty-aware adapters.
//!
//! Each adapter is a residual bottleneck on the token stream. Besides the
//! usual down/up projection it carries an uncertainty feature built from the
//! latent sample `z` and a learned position variant `p`. In the conditioned
//! mode the two are mixed by a gated product; the ablation modes drop or
//! simplify that mixing. Only the first position variant is a free
//! parameter; every later one is produced by the previous adapter.

use crate::config::{AdapterConfig, AdapterMode, LastAdapterRule};
use crate::engine::{Ctx, ParamStore, Rng, Tensor, Var};
use crate::error::{Error, Result};
use crate::nn::{Init, Linear, Mlp};

pub const ADAPTER_PREFIX: &str = "adapter.";
pub const POSITION_PARAM: &str = "adapter.0.p";

/// Output of the conditioned mixing step.
pub struct Mixed {
    /// Uncertainty feature `[B, H, W, dim]`.
    pub feature: Var,
    /// Position variant for the next adapter, absent for the last one.
    pub next: Option<Var>,
}

#[derive(Clone, Debug)]
pub struct UaAdapter {
    pub index: usize,
    mode: AdapterMode,
    latent_dim: usize,
    num_adapters: usize,
    feature_dim: usize,
    down: Linear,
    up: Linear,
    mlp_a: Mlp,
    w11: Linear,
    w12: Linear,
    w21: Linear,
    w22: Linear,
    mlp_b: Mlp,
    mlp_c: Option<Mlp>,
}

impl UaAdapter {
    fn new(index: usize, last: bool, embed_dim: usize, latent_dim: usize, num_adapters: usize, cfg: &AdapterConfig) -> Self {
        let name = format!("adapter.{index}");
        let c = latent_dim;
        let dim = cfg.feature_dim(embed_dim);
        let d_down = cfg.d_down(embed_dim);
        let up_in = if cfg.mode == AdapterMode::Plain { d_down } else { d_down + dim };
        let b_in = if cfg.mode == AdapterMode::Wms { 2 * c } else { c };
        let hidden = c.max(num_adapters);
        UaAdapter {
            index,
            mode: cfg.mode,
            latent_dim: c,
            num_adapters,
            feature_dim: dim,
            down: Linear::new(format!("{name}.down"), embed_dim, d_down),
            up: Linear::new(format!("{name}.up"), up_in, embed_dim),
            mlp_a: Mlp::new(&format!("{name}.mlp_a"), num_adapters, hidden, c),
            w11: Linear::new(format!("{name}.w11"), c, c),
            w12: Linear::new(format!("{name}.w12"), c, c),
            w21: Linear::new(format!("{name}.w21"), c, c),
            w22: Linear::new(format!("{name}.w22"), c, c),
            mlp_b: Mlp::new(&format!("{name}.mlp_b"), b_in, b_in.max(dim), dim),
            mlp_c: (!last).then(|| Mlp::new(&format!("{name}.mlp_c"), c, hidden, num_adapters)),
        }
    }

    fn register(&self, store: &mut ParamStore, rng: &mut Rng) -> Result<()> {
        self.down.register(store, rng, Init::He)?;
        self.up.register(store, rng, Init::Zeros)?;
        match self.mode {
            AdapterMode::Plain => {}
            AdapterMode::ZOnly => self.mlp_b.register(store, rng)?,
            AdapterMode::POnly | AdapterMode::Wms => {
                self.mlp_a.register(store, rng)?;
                self.w12.register(store, rng, Init::Xavier)?;
                self.mlp_b.register(store, rng)?;
            }
            AdapterMode::Cmsm => {
                self.mlp_a.register(store, rng)?;
                for w in [&self.w11, &self.w12, &self.w21, &self.w22] {
                    w.register(store, rng, Init::Xavier)?;
                }
                self.mlp_b.register(store, rng)?;
            }
        }
        if self.mode.uses_position() {
            if let Some(c) = &self.mlp_c {
                c.register(store, rng)?;
            }
        }
        Ok(())
    }

    fn check_p(&self, ctx: &Ctx, p: Var) -> Result<()> {
        let s = ctx.shape(p);
        if s != [1, self.num_adapters] {
            return Err(Error::shape("cmsm", format!("position variant {s:?}, expected [1, {}]", self.num_adapters)));
        }
        Ok(())
    }

    fn check_z(&self, ctx: &Ctx, z: Var) -> Result<()> {
        let s = ctx.shape(z);
        if s.len() != 2 || s[1] != self.latent_dim {
            return Err(Error::shape("cmsm", format!("latent {s:?}, expected [B, {}]", self.latent_dim)));
        }
        Ok(())
    }

    fn next_position(&self, ctx: &mut Ctx, projected: Var) -> Result<Option<Var>> {
        match &self.mlp_c {
            Some(c) => Ok(Some(c.forward(ctx, projected)?)),
            None => Ok(None),
        }
    }

    /// Tiles a per-example vector `[B, C]` over the token grid and applies
    /// `mlp_b` pointwise.
    fn spread(&self, ctx: &mut Ctx, f: Var, grid: (usize, usize)) -> Result<Var> {
        let s = ctx.shape(f).to_vec();
        let r = ctx.reshape(f, &[s[0], 1, 1, s[1]])?;
        let tiled = ctx.broadcast_to(r, &[s[0], grid.0, grid.1, s[1]])?;
        self.mlp_b.forward(ctx, tiled)
    }

    /// Conditioned mixing of `z` `[B, C]` with the position variant `p`
    /// `[1, L]`.
    pub fn cmsm(&self, ctx: &mut Ctx, p: Var, z: Var, grid: (usize, usize)) -> Result<Mixed> {
        self.check_p(ctx, p)?;
        self.check_z(ctx, z)?;
        let pa = self.mlp_a.forward(ctx, p)?; // [1, C]
        let key = self.w11.forward(ctx, pa)?;
        let query = self.w21.forward(ctx, z)?; // [B, C]
        let score = ctx.matmul_nt(query, key)?; // [B, 1]
        let score = ctx.relu(score)?;
        let zv = self.w22.forward(ctx, z)?;
        let gated = ctx.mul(zv, score)?;
        let gated = ctx.relu(gated)?;
        let pv = self.w12.forward(ctx, pa)?; // [1, C]
        let f = ctx.mul(gated, pv)?;
        let feature = self.spread(ctx, f, grid)?;
        let next = self.next_position(ctx, pv)?;
        Ok(Mixed { feature, next })
    }

    /// Unconditioned variant: `z` concatenated with the projected position.
    pub fn wms(&self, ctx: &mut Ctx, p: Var, z: Var, grid: (usize, usize)) -> Result<Mixed> {
        self.check_p(ctx, p)?;
        self.check_z(ctx, z)?;
        let b = ctx.shape(z)[0];
        let pa = self.mlp_a.forward(ctx, p)?;
        let pb = ctx.broadcast_to(pa, &[b, self.latent_dim])?;
        let f = ctx.concat_last(&[z, pb])?;
        let feature = self.spread(ctx, f, grid)?;
        let pv = self.w12.forward(ctx, pa)?;
        let next = self.next_position(ctx, pv)?;
        Ok(Mixed { feature, next })
    }

    fn p_only(&self, ctx: &mut Ctx, p: Var, batch: usize, grid: (usize, usize)) -> Result<Mixed> {
        self.check_p(ctx, p)?;
        let pa = self.mlp_a.forward(ctx, p)?;
        let pv = self.w12.forward(ctx, pa)?;
        let f = ctx.broadcast_to(pv, &[batch, self.latent_dim])?;
        let feature = self.spread(ctx, f, grid)?;
        let next = self.next_position(ctx, pv)?;
        Ok(Mixed { feature, next })
    }

    /// `x` is `[B, H, W, D]`; returns the updated stream and the position
    /// variant handed to the next adapter.
    pub fn forward(&self, ctx: &mut Ctx, x: Var, p: Option<Var>, z: Option<Var>) -> Result<(Var, Option<Var>)> {
        let s = ctx.shape(x).to_vec();
        if s.len() != 4 {
            return Err(Error::shape("adapter", format!("expected [B, H, W, D], got {s:?}")));
        }
        let (b, grid) = (s[0], (s[1], s[2]));
        let h = self.down.forward(ctx, x)?;
        let h = ctx.relu(h)?;
        let need_p = || p.ok_or_else(|| Error::InvalidArgument("adapter needs a position variant".into()));
        let need_z = || z.ok_or(Error::MissingLatent);
        let mixed = match self.mode {
            AdapterMode::Plain => None,
            AdapterMode::ZOnly => {
                let z = need_z()?;
                self.check_z(ctx, z)?;
                Some(Mixed { feature: self.spread(ctx, z, grid)?, next: None })
            }
            AdapterMode::POnly => Some(self.p_only(ctx, need_p()?, b, grid)?),
            AdapterMode::Wms => Some(self.wms(ctx, need_p()?, need_z()?, grid)?),
            AdapterMode::Cmsm => Some(self.cmsm(ctx, need_p()?, need_z()?, grid)?),
        };
        let (h, next) = match mixed {
            Some(m) => {
                if ctx.shape(m.feature)[0] != b {
                    return Err(Error::shape("adapter", format!("latent batch {} vs stream batch {b}", ctx.shape(m.feature)[0])));
                }
                (ctx.concat_last(&[h, m.feature])?, m.next)
            }
            None => (h, None),
        };
        let delta = self.up.forward(ctx, h)?;
        Ok((ctx.add(x, delta)?, next))
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }
}

/// One adapter per encoder block, plus the optional reconstruction of `z`
/// added after the last block.
#[derive(Clone, Debug)]
pub struct AdapterChain {
    cfg: AdapterConfig,
    adapters: Vec<UaAdapter>,
    recon: Option<Linear>,
}

impl AdapterChain {
    pub fn new(cfg: &AdapterConfig, num_blocks: usize, embed_dim: usize, latent_dim: usize) -> Result<Self> {
        cfg.validate(embed_dim)?;
        if num_blocks == 0 || latent_dim == 0 {
            return Err(Error::InvalidArgument("adapter chain needs at least one block and latent_dim >= 1".into()));
        }
        let adapters = (0..num_blocks)
            .map(|i| UaAdapter::new(i, i + 1 == num_blocks, embed_dim, latent_dim, num_blocks, cfg))
            .collect();
        let recon = (cfg.mode.uses_latent() && cfg.last_adapter == LastAdapterRule::Supplement)
            .then(|| Linear::new("adapter.recon", latent_dim, embed_dim));
        Ok(AdapterChain { cfg: cfg.clone(), adapters, recon })
    }

    pub fn register(&self, store: &mut ParamStore, rng: &mut Rng) -> Result<()> {
        if self.cfg.mode.uses_position() {
            let l = self.adapters.len();
            store.insert(POSITION_PARAM, rng.uniform_tensor(vec![1, l], -self.cfg.p_init, self.cfg.p_init))?;
        }
        for a in &self.adapters {
            a.register(store, rng)?;
        }
        if let Some(r) = &self.recon {
            r.register(store, rng, Init::Zeros)?;
        }
        Ok(())
    }

    pub fn mode(&self) -> AdapterMode {
        self.cfg.mode
    }

    pub fn len(&self) -> usize {
        self.adapters.len()
    }

    pub fn is_empty(&self) -> bool {
        self.adapters.is_empty()
    }

    pub fn adapter(&self, i: usize) -> &UaAdapter {
        &self.adapters[i]
    }

    pub fn initial_position(&self, ctx: &mut Ctx) -> Result<Option<Var>> {
        if self.cfg.mode.uses_position() {
            Ok(Some(ctx.param(POSITION_PARAM)?))
        } else {
            Ok(None)
        }
    }

    /// The position variants consumed by each adapter, `p_0 .. p_{L-1}`.
    pub fn position_chain(&self, ctx: &mut Ctx) -> Result<Vec<Var>> {
        let Some(mut p) = self.initial_position(ctx)? else {
            return Ok(Vec::new());
        };
        let mut out = vec![p];
        for a in &self.adapters[..self.adapters.len() - 1] {
            let pa = a.mlp_a.forward(ctx, p)?;
            let pv = a.w12.forward(ctx, pa)?;
            p = a.next_position(ctx, pv)?.expect("non-final adapter has mlp_c");
            out.push(p);
        }
        Ok(out)
    }

    /// Applied after the final adapter.
    pub fn finish(&self, ctx: &mut Ctx, x: Var, z: Option<Var>) -> Result<Var> {
        match (&self.recon, z) {
            (Some(recon), Some(z)) => last_adapter_merge(ctx, recon, x, z),
            (Some(_), None) => Err(Error::MissingLatent),
            (None, _) => Ok(x),
        }
    }
}

/// Adds a pointwise reconstruction of `z` `[B, C]` to `x` `[B, H, W, D]`.
pub fn last_adapter_merge(ctx: &mut Ctx, recon: &Linear, x: Var, z: Var) -> Result<Var> {
    let s = ctx.shape(x).to_vec();
    let zs = ctx.shape(z).to_vec();
    if s.len() != 4 || zs.len() != 2 || zs[0] != s[0] {
        return Err(Error::shape("last_adapter_merge", format!("x {s:?}, z {zs:?}")));
    }
    let r = ctx.reshape(z, &[zs[0], 1, 1, zs[1]])?;
    let tiled = ctx.broadcast_to(r, &[s[0], s[1], s[2], zs[1]])?;
    let rec = recon.forward(ctx, tiled)?;
    ctx.add(x, rec)
}

/// Tiles a `[B, C]` tensor to `[B, H, W, C]`.
pub fn tile_latent(z: &Tensor, h: usize, w: usize) -> Tensor {
    let (b, c) = (z.shape()[0], z.shape()[1]);
    Tensor::from_fn(vec![b, h, w, c], |i| {
        let ch = i % c;
        let bi = i / (h * w * c);
        z.data()[bi * c + ch]
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::grad_check;

    fn chain(mode: AdapterMode, l: usize, d: usize, c: usize) -> (AdapterChain, ParamStore) {
        let cfg = AdapterConfig { mode, ..AdapterConfig::default() };
        let chain = AdapterChain::new(&cfg, l, d, c).unwrap();
        let mut store = ParamStore::new();
        chain.register(&mut store, &mut Rng::new(7)).unwrap();
        (chain, store)
    }

    #[test]
    fn only_the_first_position_is_a_parameter() {
        let (_, store) = chain(AdapterMode::Cmsm, 4, 32, 6);
        let ps: Vec<_> = store.names().filter(|n| n.ends_with(".p")).collect();
        assert_eq!(ps, vec![POSITION_PARAM]);
        let p = store.get(POSITION_PARAM).unwrap();
        assert_eq!(p.shape(), &[1, 4]);
        assert!(p.data().iter().all(|v| v.abs() <= 0.02));
    }

    #[test]
    fn position_chain_has_one_vector_per_adapter() {
        let (chain, store) = chain(AdapterMode::Cmsm, 4, 32, 6);
        let mut ctx = Ctx::eval(&store);
        let ps = chain.position_chain(&mut ctx).unwrap();
        assert_eq!(ps.len(), 4);
        for p in ps {
            assert_eq!(ctx.shape(p), &[1, 4]);
        }
    }

    #[test]
    fn cmsm_shapes_and_threading() {
        let (chain, store) = chain(AdapterMode::Cmsm, 4, 32, 6);
        let mut ctx = Ctx::eval(&store);
        let mut rng = Rng::new(1);
        let p = ctx.param(POSITION_PARAM).unwrap();
        let z1 = ctx.constant(rng.normal_tensor(vec![2, 6], 1.0));
        let z2 = ctx.constant(rng.normal_tensor(vec![2, 6], 1.0));
        let a = chain.adapter(0).cmsm(&mut ctx, p, z1, (8, 8)).unwrap();
        let b = chain.adapter(0).cmsm(&mut ctx, p, z2, (8, 8)).unwrap();
        assert_eq!(ctx.shape(a.feature), &[2, 8, 8, 8]);
        let (na, nb) = (a.next.unwrap(), b.next.unwrap());
        assert_eq!(ctx.shape(na), &[1, 4]);
        assert_eq!(ctx.value(na), ctx.value(nb));
        assert!(chain.adapter(3).cmsm(&mut ctx, p, z1, (8, 8)).unwrap().next.is_none());
    }

    #[test]
    fn broadcast_feature_is_constant_over_the_grid() {
        let (chain, store) = chain(AdapterMode::Cmsm, 2, 16, 3);
        let mut ctx = Ctx::eval(&store);
        let p = ctx.param(POSITION_PARAM).unwrap();
        let z = ctx.constant(Rng::new(4).normal_tensor(vec![2, 3], 1.0));
        let m = chain.adapter(0).cmsm(&mut ctx, p, z, (3, 5)).unwrap();
        let f = ctx.value(m.feature);
        let dim = 4;
        for b in 0..2 {
            let base = &f.data()[b * 15 * dim..b * 15 * dim + dim];
            for cell in f.data()[b * 15 * dim..(b + 1) * 15 * dim].chunks(dim) {
                assert_eq!(cell, base);
            }
        }
    }

    #[test]
    fn adapters_start_as_identity() {
        for mode in [AdapterMode::Plain, AdapterMode::ZOnly, AdapterMode::POnly, AdapterMode::Wms, AdapterMode::Cmsm] {
            let (chain, store) = chain(mode, 2, 8, 3);
            let mut ctx = Ctx::eval(&store);
            let mut rng = Rng::new(2);
            let x = ctx.constant(rng.normal_tensor(vec![2, 3, 3, 8], 1.0));
            let z = ctx.constant(rng.normal_tensor(vec![2, 3], 1.0));
            let p = chain.initial_position(&mut ctx).unwrap();
            let (y, _) = chain.adapter(0).forward(&mut ctx, x, p, Some(z)).unwrap();
            assert_eq!(ctx.value(y), ctx.value(x), "{mode:?}");
            let y = chain.finish(&mut ctx, x, Some(z)).unwrap();
            assert_eq!(ctx.value(y), ctx.value(x), "{mode:?}");
        }
    }

    #[test]
    fn modes_register_only_what_they_use() {
        let (_, plain) = chain(AdapterMode::Plain, 2, 8, 3);
        assert!(plain.names().all(|n| n.contains(".down.") || n.contains(".up.")));
        let (_, z) = chain(AdapterMode::ZOnly, 2, 8, 3);
        assert!(!z.contains(POSITION_PARAM));
        assert!(z.contains("adapter.recon.weight"));
        let (_, p) = chain(AdapterMode::POnly, 2, 8, 3);
        assert!(!p.contains("adapter.recon.weight"));
        assert!(!p.contains("adapter.0.w21.weight"));
    }

    #[test]
    fn missing_latent_is_reported() {
        let (chain, store) = chain(AdapterMode::Cmsm, 2, 8, 3);
        let mut ctx = Ctx::eval(&store);
        let x = ctx.constant(Tensor::zeros(vec![1, 2, 2, 8]));
        let p = chain.initial_position(&mut ctx).unwrap();
        assert!(matches!(chain.adapter(0).forward(&mut ctx, x, p, None), Err(Error::MissingLatent)));
    }

    #[test]
    fn merge_matches_explicit_tiling() {
        let mut store = ParamStore::new();
        let recon = Linear::new("r", 3, 4);
        recon.register(&mut store, &mut Rng::new(3), Init::Xavier).unwrap();
        let mut ctx = Ctx::eval(&store);
        let zt = Rng::new(5).normal_tensor(vec![2, 3], 1.0);
        let x = ctx.constant(Tensor::zeros(vec![2, 2, 3, 4]));
        let z = ctx.constant(zt.clone());
        let a = last_adapter_merge(&mut ctx, &recon, x, z).unwrap();
        let tiled = ctx.constant(tile_latent(&zt, 2, 3));
        let b = recon.forward(&mut ctx, tiled).unwrap();
        assert_eq!(ctx.value(a), ctx.value(b));
    }

    #[test]
    fn cmsm_gradients_check_out() {
        let (chain, mut store) = chain(AdapterMode::Cmsm, 2, 8, 3);
        // move away from the zero-initialised up projection
        let mut rng = Rng::new(12);
        let names: Vec<String> = store.names().map(String::from).collect();
        for name in names {
            let zero_init = name.contains(".up.") || name.ends_with(".bias");
            for v in store.get_mut(&name).unwrap().data_mut() {
                if zero_init {
                    *v = 0.3 * rng.normal();
                }
            }
        }
        let x = rng.normal_tensor(vec![2, 4, 4, 8], 1.0);
        let z = rng.normal_tensor(vec![2, 3], 1.0);
        let report = grad_check(
            |ctx| {
                let mut xv = ctx.constant(x.clone());
                let zv = ctx.constant(z.clone());
                let mut p = chain.initial_position(ctx)?;
                for i in 0..2 {
                    let (o, n) = chain.adapter(i).forward(ctx, xv, p, Some(zv))?;
                    xv = o;
                    p = n;
                }
                let s = ctx.square(xv)?;
                ctx.mean(s)
            },
            &store,
            1e-5,
        )
        .unwrap();
        assert!(report.max_relative_error < 1e-4, "{report:?}");
    }
}
