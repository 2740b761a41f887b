//! Desk-scale segment-anything backbone: patch-embedding ViT encoder, point
//! prompt encoder and a one-round two-way-attention mask decoder.
//!
//! Embeddings come out at `image_size / patch_size` resolution (1/4 with the
//! default 32 px images and 4 px patches).

use crate::adapter::AdapterChain;
use crate::config::BackboneConfig;
use crate::engine::{Ctx, ParamStore, Rng, Tensor, Var};
use crate::error::{Error, Result};
use crate::nn::{Attention, Conv2d, Init, LayerNorm, Linear, Mlp};

pub const ENCODER_PREFIX: &str = "encoder.";
pub const PROMPT_PREFIX: &str = "prompt.";
pub const DECODER_PREFIX: &str = "decoder.";
pub const BACKBONE_PREFIXES: [&str; 3] = [ENCODER_PREFIX, PROMPT_PREFIX, DECODER_PREFIX];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct PromptPoint {
    pub row: usize,
    pub col: usize,
    /// Foreground click.
    pub label: bool,
}

impl PromptPoint {
    pub fn foreground(row: usize, col: usize) -> Self {
        PromptPoint { row, col, label: true }
    }
}

/// Fixed sinusoidal encoding of a pixel position; coordinates are mapped to
/// `(row + 0.5) / size` and `(col + 0.5) / size`, each filling half of `dim`
/// with `sin, cos` pairs at frequencies `2^j * pi`.
pub fn positional_encoding(row: usize, col: usize, size: usize, dim: usize) -> Vec<f64> {
    let quarter = dim / 4;
    let mut out = Vec::with_capacity(dim);
    for coord in [row, col] {
        let u = (coord as f64 + 0.5) / size as f64;
        for j in 0..quarter {
            let w = std::f64::consts::PI * (1u64 << j) as f64;
            out.push((w * u).sin());
            out.push((w * u).cos());
        }
    }
    out
}

/// Bilinear interpolation matrix `[out, input]` (half-pixel centres).
pub fn bilinear_matrix(input: usize, out: usize) -> Tensor {
    let mut m = Tensor::zeros(vec![out, input]);
    let scale = input as f64 / out as f64;
    for i in 0..out {
        let src = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (input - 1) as f64);
        let i0 = src.floor() as usize;
        let i1 = (i0 + 1).min(input - 1);
        let w = src - i0 as f64;
        let row = &mut m.data_mut()[i * input..(i + 1) * input];
        row[i0] += 1.0 - w;
        row[i1] += w;
    }
    m
}

#[derive(Clone, Debug)]
struct Block {
    ln1: LayerNorm,
    attn: Attention,
    ln2: LayerNorm,
    fc1: Linear,
    fc2: Linear,
}

impl Block {
    fn new(name: &str, cfg: &BackboneConfig) -> Self {
        let d = cfg.embed_dim;
        Block {
            ln1: LayerNorm::new(format!("{name}.ln1"), d),
            attn: Attention::new(&format!("{name}.attn"), d, cfg.num_heads),
            ln2: LayerNorm::new(format!("{name}.ln2"), d),
            fc1: Linear::new(format!("{name}.mlp.fc1"), d, cfg.mlp_hidden()),
            fc2: Linear::new(format!("{name}.mlp.fc2"), cfg.mlp_hidden(), d),
        }
    }

    fn register(&self, store: &mut ParamStore, rng: &mut Rng) -> Result<()> {
        self.ln1.register(store)?;
        self.attn.register(store, rng)?;
        self.ln2.register(store)?;
        self.fc1.register(store, rng, Init::Xavier)?;
        self.fc2.register(store, rng, Init::Xavier)
    }

    /// Pre-norm transformer block on `[B, N, D]`.
    fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let h = self.ln1.forward(ctx, x)?;
        let h = self.attn.forward(ctx, h, h)?;
        let x = ctx.add(x, h)?;
        let h = self.ln2.forward(ctx, x)?;
        let h = self.fc1.forward(ctx, h)?;
        let h = ctx.gelu(h)?;
        let h = self.fc2.forward(ctx, h)?;
        ctx.add(x, h)
    }
}

#[derive(Clone, Debug)]
pub struct ImageEncoder {
    cfg: BackboneConfig,
    patch: Linear,
    blocks: Vec<Block>,
    neck_proj: Linear,
    neck_ln1: LayerNorm,
    neck_conv: Conv2d,
    neck_ln2: LayerNorm,
}

impl ImageEncoder {
    pub fn new(cfg: &BackboneConfig) -> Self {
        let d = cfg.embed_dim;
        ImageEncoder {
            cfg: cfg.clone(),
            patch: Linear::new("encoder.patch_embed", cfg.patch_size * cfg.patch_size, d),
            blocks: (0..cfg.num_blocks).map(|i| Block::new(&format!("encoder.blocks.{i}"), cfg)).collect(),
            neck_proj: Linear::new("encoder.neck.proj", d, d).without_bias(),
            neck_ln1: LayerNorm::new("encoder.neck.ln1", d),
            neck_conv: Conv2d::new("encoder.neck.conv", d, d, 3, 1, 1).without_bias(),
            neck_ln2: LayerNorm::new("encoder.neck.ln2", d),
        }
    }

    pub fn register(&self, store: &mut ParamStore, rng: &mut Rng) -> Result<()> {
        let g = self.cfg.grid();
        self.patch.register(store, rng, Init::Xavier)?;
        store.insert("encoder.pos_embed", rng.normal_tensor(vec![g, g, self.cfg.embed_dim], 0.02))?;
        for b in &self.blocks {
            b.register(store, rng)?;
        }
        self.neck_proj.register(store, rng, Init::Xavier)?;
        self.neck_ln1.register(store)?;
        self.neck_conv.register(store, rng, Init::Xavier)?;
        self.neck_ln2.register(store)
    }

    /// `images` is `[B, 1, S, S]`; returns embeddings `[B, H, W, D]`.
    ///
    /// With an adapter chain, adapter `i` runs after block `i` and the
    /// position variant is threaded from one adapter to the next.
    pub fn forward(&self, ctx: &mut Ctx, images: Var, adapters: Option<&AdapterChain>, z: Option<Var>) -> Result<Var> {
        let s = ctx.shape(images).to_vec();
        let size = self.cfg.image_size;
        if s.len() != 4 || s[1] != 1 || s[2] != size || s[3] != size {
            return Err(Error::shape(
                "encode_image",
                format!("expected [B, 1, {size}, {size}], got {s:?}"),
            ));
        }
        if let Some(chain) = adapters {
            if chain.mode().uses_latent() && z.is_none() {
                return Err(Error::MissingLatent);
            }
            if chain.len() != self.blocks.len() {
                return Err(Error::shape(
                    "encode_image",
                    format!("{} adapters for {} blocks", chain.len(), self.blocks.len()),
                ));
            }
        }
        let (b, g, d) = (s[0], self.cfg.grid(), self.cfg.embed_dim);
        let nhwc = ctx.reshape(images, &[b, size, size, 1])?;
        let patches = ctx.im2col(nhwc, self.cfg.patch_size, self.cfg.patch_size, 0)?;
        let x = self.patch.forward(ctx, patches)?;
        let pos = ctx.param("encoder.pos_embed")?;
        let mut x = ctx.add(x, pos)?;

        let mut p = match adapters {
            Some(chain) => chain.initial_position(ctx)?,
            None => None,
        };
        for (i, block) in self.blocks.iter().enumerate() {
            let tokens = ctx.reshape(x, &[b, g * g, d])?;
            let tokens = block.forward(ctx, tokens)?;
            x = ctx.reshape(tokens, &[b, g, g, d])?;
            if let Some(chain) = adapters {
                let (out, next) = chain.adapter(i).forward(ctx, x, p, z)?;
                x = out;
                p = next;
            }
        }
        if let Some(chain) = adapters {
            x = chain.finish(ctx, x, z)?;
        }
        self.neck(ctx, x)
    }

    fn neck(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let h = self.neck_proj.forward(ctx, x)?;
        let h = self.neck_ln1.forward(ctx, h)?;
        let h = self.neck_conv.forward(ctx, h)?;
        self.neck_ln2.forward(ctx, h)
    }
}

#[derive(Clone, Debug)]
pub struct PromptEncoder {
    image_size: usize,
    dim: usize,
}

impl PromptEncoder {
    pub fn new(cfg: &BackboneConfig) -> Self {
        PromptEncoder { image_size: cfg.image_size, dim: cfg.embed_dim }
    }

    pub fn register(&self, store: &mut ParamStore, rng: &mut Rng) -> Result<()> {
        store.insert("prompt.fg_token", rng.normal_tensor(vec![1, self.dim], 0.5))?;
        store.insert("prompt.bg_token", rng.normal_tensor(vec![1, self.dim], 0.5))
    }

    /// One point per batch element; returns `[B, D]`.
    pub fn forward(&self, ctx: &mut Ctx, points: &[PromptPoint]) -> Result<Var> {
        if points.is_empty() {
            return Err(Error::Empty("prompt point list"));
        }
        let mut pe = Vec::with_capacity(points.len() * self.dim);
        let mut fg = Vec::with_capacity(points.len());
        for p in points {
            if p.row >= self.image_size || p.col >= self.image_size {
                return Err(Error::PointOutOfBounds { row: p.row, col: p.col, size: self.image_size });
            }
            pe.extend(positional_encoding(p.row, p.col, self.image_size, self.dim));
            fg.push(if p.label { 1.0 } else { 0.0 });
        }
        let b = points.len();
        let pe = ctx.constant(Tensor::new(vec![b, self.dim], pe)?);
        let fg_mask = ctx.constant(Tensor::new(vec![b, 1], fg.clone())?);
        let bg_mask = ctx.constant(Tensor::new(vec![b, 1], fg.iter().map(|f| 1.0 - f).collect())?);
        let fg_tok = ctx.param("prompt.fg_token")?;
        let bg_tok = ctx.param("prompt.bg_token")?;
        let a = ctx.mul(fg_mask, fg_tok)?;
        let c = ctx.mul(bg_mask, bg_tok)?;
        let tok = ctx.add(a, c)?;
        ctx.add(tok, pe)
    }
}

#[derive(Clone, Debug)]
pub struct MaskDecoder {
    cfg: BackboneConfig,
    self_attn: Attention,
    norm1: LayerNorm,
    token_to_image: Attention,
    norm2: LayerNorm,
    mlp: Mlp,
    norm3: LayerNorm,
    image_to_token: Attention,
    norm4: LayerNorm,
    hyper: Mlp,
    upsample: Tensor,
}

/// Attention weights recorded by [`MaskDecoder::forward_traced`].
pub struct DecoderTrace {
    pub logits: Var,
    pub attention: Vec<Var>,
}

impl MaskDecoder {
    pub fn new(cfg: &BackboneConfig) -> Self {
        let d = cfg.embed_dim;
        let h = cfg.num_heads;
        MaskDecoder {
            cfg: cfg.clone(),
            self_attn: Attention::new("decoder.self_attn", d, h),
            norm1: LayerNorm::new("decoder.norm1", d),
            token_to_image: Attention::new("decoder.token_to_image", d, h),
            norm2: LayerNorm::new("decoder.norm2", d),
            mlp: Mlp::new("decoder.mlp", d, cfg.decoder_mlp_hidden(), d),
            norm3: LayerNorm::new("decoder.norm3", d),
            image_to_token: Attention::new("decoder.image_to_token", d, h),
            norm4: LayerNorm::new("decoder.norm4", d),
            hyper: Mlp::new("decoder.hyper", d, d, d),
            upsample: bilinear_matrix(cfg.grid(), cfg.image_size),
        }
    }

    pub fn register(&self, store: &mut ParamStore, rng: &mut Rng) -> Result<()> {
        store.insert("decoder.mask_token", rng.normal_tensor(vec![1, 1, self.cfg.embed_dim], 0.5))?;
        self.self_attn.register(store, rng)?;
        self.norm1.register(store)?;
        self.token_to_image.register(store, rng)?;
        self.norm2.register(store)?;
        self.mlp.register(store, rng)?;
        self.norm3.register(store)?;
        self.image_to_token.register(store, rng)?;
        self.norm4.register(store)?;
        self.hyper.register(store, rng)
    }

    pub fn forward(&self, ctx: &mut Ctx, embeddings: Var, prompt: Var) -> Result<Var> {
        Ok(self.forward_traced(ctx, embeddings, prompt)?.logits)
    }

    /// `embeddings` `[B, H, W, D]`, `prompt` `[B, D]` (or `[1, D]`, shared);
    /// returns raw logits `[B, S, S]`.
    pub fn forward_traced(&self, ctx: &mut Ctx, embeddings: Var, prompt: Var) -> Result<DecoderTrace> {
        let (g, d, size) = (self.cfg.grid(), self.cfg.embed_dim, self.cfg.image_size);
        let es = ctx.shape(embeddings).to_vec();
        if es.len() != 4 || es[1] != g || es[2] != g || es[3] != d {
            return Err(Error::shape("decode_mask", format!("embeddings {es:?}, expected [B, {g}, {g}, {d}]")));
        }
        let b = es[0];
        let ps = ctx.shape(prompt).to_vec();
        if ps.len() != 2 || ps[1] != d || (ps[0] != b && ps[0] != 1) {
            return Err(Error::shape("decode_mask", format!("prompt {ps:?} for batch {b}")));
        }
        let prompt = ctx.reshape(prompt, &[ps[0], 1, d])?;
        let prompt = ctx.broadcast_to(prompt, &[b, 1, d])?;
        let mask_tok = ctx.param("decoder.mask_token")?;
        let mask_tok = ctx.broadcast_to(mask_tok, &[b, 1, d])?;
        let tokens = ctx.concat(&[mask_tok, prompt], 1)?;
        let image = ctx.reshape(embeddings, &[b, g * g, d])?;
        let mut attention = Vec::with_capacity(3);

        let (a, w) = self.self_attn.forward_with_weights(ctx, tokens, tokens)?;
        attention.push(w);
        let t = ctx.add(tokens, a)?;
        let t = self.norm1.forward(ctx, t)?;
        // prompt -> image
        let (a, w) = self.token_to_image.forward_with_weights(ctx, t, image)?;
        attention.push(w);
        let t = ctx.add(t, a)?;
        let t = self.norm2.forward(ctx, t)?;
        let m = self.mlp.forward(ctx, t)?;
        let t = ctx.add(t, m)?;
        let t = self.norm3.forward(ctx, t)?;
        // image -> prompt
        let (a, w) = self.image_to_token.forward_with_weights(ctx, image, t)?;
        attention.push(w);
        let image = ctx.add(image, a)?;
        let image = self.norm4.forward(ctx, image)?;

        let mask_out = ctx.slice(t, 1, 0, 1)?;
        let hyper = self.hyper.forward(ctx, mask_out)?; // [B, 1, D]
        let low = ctx.matmul_nt(image, hyper)?; // [B, N, 1]
        let low = ctx.reshape(low, &[b, g, g])?;
        let up = ctx.constant(self.upsample.clone());
        let rows = ctx.matmul(up, low)?; // [B, S, g]
        let logits = ctx.matmul_nt(rows, up)?; // [B, S, S]
        debug_assert_eq!(ctx.shape(logits), &[b, size, size]);
        Ok(DecoderTrace { logits, attention })
    }
}

/// The three backbone components.
#[derive(Clone, Debug)]
pub struct MiniSam {
    pub cfg: BackboneConfig,
    pub encoder: ImageEncoder,
    pub prompt: PromptEncoder,
    pub decoder: MaskDecoder,
}

impl MiniSam {
    pub fn new(cfg: &BackboneConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(MiniSam {
            cfg: cfg.clone(),
            encoder: ImageEncoder::new(cfg),
            prompt: PromptEncoder::new(cfg),
            decoder: MaskDecoder::new(cfg),
        })
    }

    pub fn register(&self, store: &mut ParamStore, rng: &mut Rng) -> Result<()> {
        self.encoder.register(store, rng)?;
        self.prompt.register(store, rng)?;
        self.decoder.register(store, rng)
    }

    pub fn encode_image(&self, ctx: &mut Ctx, images: Var, adapters: Option<&AdapterChain>, z: Option<Var>) -> Result<Var> {
        self.encoder.forward(ctx, images, adapters, z)
    }

    pub fn encode_prompt(&self, ctx: &mut Ctx, points: &[PromptPoint]) -> Result<Var> {
        self.prompt.forward(ctx, points)
    }

    pub fn decode_mask(&self, ctx: &mut Ctx, embeddings: Var, prompt: Var) -> Result<Var> {
        self.decoder.forward(ctx, embeddings, prompt)
    }
}

pub fn is_backbone_param(name: &str) -> bool {
    BACKBONE_PREFIXES.iter().any(|p| name.starts_with(p))
}

/// Marks the encoder, prompt encoder and decoder as frozen.
pub fn freeze_backbone(store: &mut ParamStore) -> Result<()> {
    for prefix in BACKBONE_PREFIXES {
        if !store.names().any(|n| n.starts_with(prefix)) {
            return Err(Error::BackboneNotRegistered);
        }
    }
    for prefix in BACKBONE_PREFIXES {
        store.freeze_prefix(prefix);
    }
    Ok(())
}
