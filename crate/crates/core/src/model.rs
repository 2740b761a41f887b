//! The full segmenter: backbone, adapter chain and latent nets.

use crate::adapter::AdapterChain;
use crate::config::RunConfig;
use crate::engine::{Ctx, ParamStore, Rng, Var};
use crate::error::Result;
use crate::latent::{posterior_net, prior_net, LatentGaussian, LatentNet};
use crate::sam::{MiniSam, PromptPoint};

#[derive(Clone, Debug)]
pub struct UaSam {
    pub sam: MiniSam,
    pub chain: AdapterChain,
    pub prior: LatentNet,
    pub posterior: LatentNet,
}

impl UaSam {
    pub fn new(cfg: &RunConfig) -> Result<Self> {
        cfg.validate()?;
        let b = &cfg.backbone;
        Ok(UaSam {
            sam: MiniSam::new(b)?,
            chain: AdapterChain::new(&cfg.adapter, b.num_blocks, b.embed_dim, cfg.latent.latent_dim)?,
            prior: LatentNet::prior(&cfg.latent),
            posterior: LatentNet::posterior(&cfg.latent),
        })
    }

    pub fn uses_latent(&self) -> bool {
        self.chain.mode().uses_latent()
    }

    pub fn register_backbone(&self, store: &mut ParamStore, rng: &mut Rng) -> Result<()> {
        self.sam.register(store, rng)
    }

    /// Adapters, plus the prior and posterior nets when the mode draws a latent.
    pub fn register_adapters(&self, store: &mut ParamStore, rng: &mut Rng) -> Result<()> {
        self.chain.register(store, rng)?;
        if self.uses_latent() {
            self.prior.register(store, rng)?;
            self.posterior.register(store, rng)?;
        }
        Ok(())
    }

    /// Backbone-only prediction, `[B, S, S]` logits.
    pub fn predict_backbone(&self, ctx: &mut Ctx, images: Var, points: &[PromptPoint]) -> Result<Var> {
        let emb = self.sam.encode_image(ctx, images, None, None)?;
        let prompt = self.sam.encode_prompt(ctx, points)?;
        self.sam.decode_mask(ctx, emb, prompt)
    }

    /// Adapted prediction for a given latent sample.
    pub fn predict(&self, ctx: &mut Ctx, images: Var, points: &[PromptPoint], z: Option<Var>) -> Result<Var> {
        let emb = self.sam.encode_image(ctx, images, Some(&self.chain), z)?;
        let prompt = self.sam.encode_prompt(ctx, points)?;
        self.sam.decode_mask(ctx, emb, prompt)
    }

    pub fn prior(&self, ctx: &mut Ctx, images: Var) -> Result<LatentGaussian> {
        prior_net(ctx, &self.prior, images)
    }

    pub fn posterior(&self, ctx: &mut Ctx, images: Var, masks: Var) -> Result<LatentGaussian> {
        posterior_net(ctx, &self.posterior, images, masks)
    }
}
