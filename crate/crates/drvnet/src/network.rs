//! Model assembly: a three-level encoder–decoder backbone that produces
//! an initial vessel-probability estimate, and an optional shallow tail
//! that refines it conditioned on the input image.
//!
//! Backbone: 3 × (RDN → RSE → 2×2 max-pool), a latent RDN → RSE, then
//! 3 × (2×2 transpose conv → concat with the matching pre-pool encoder
//! map → RDN → RSE), finished by a 1×1 convolution and a sigmoid.
//!
//! Tail: RDN → RSE branches over the input image and over the backbone
//! probability map, concatenated, two further RDN → RSE stages, and the
//! same 1×1-conv + sigmoid output head.
//!
//! Channel widths double per level from `base_channels`; the decoder's
//! transpose convolutions halve the incoming width and each decoder RDN
//! grows by the level width. All parameters carry slash-separated names
//! under the `backbone/` or `tail/` prefix so the optimizer, checkpoints
//! and the phase-2 freeze can address them uniformly.

use ndarray::{concatenate, Array2, ArrayD, Axis};
use serde::{Deserialize, Serialize};

use crate::blocks::{BlockConfig, RdnBlock, RdnCache, RseBlock, RseCache};
use crate::error::{Error, Result};
use crate::nn::{
    sigmoid, sigmoid_bwd, validate_feature_map, Conv2d, ConvCache, ConvTCache, ConvTranspose2x2,
    FeatureMap, GradStore, MaxPool2x2, ParamVisit, PoolCache, TrainCtx,
};
use crate::rng::SeedRng;

/// Single-channel probability map over the padded image grid.
pub type ProbMap = Array2<f64>;

/// Number of down/up-sampling levels; fixed by the architecture.
pub const DEPTH: usize = 3;

/// Spatial divisibility the pooling chain requires of inputs.
pub const SPATIAL_MULTIPLE: usize = 1 << DEPTH;

/// Construction-time knobs of the full model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Width of encoder level 0; deeper levels double it.
    pub base_channels: usize,
    /// Squeeze-and-excitation reduction ratio.
    pub r: usize,
    pub dropout_rate: f64,
    pub input_channels: usize,
    /// When false the model is backbone-only and `forward_full` returns
    /// the backbone map twice.
    pub tail_enabled: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            base_channels: 32,
            r: 2,
            dropout_rate: 0.1,
            input_channels: 3,
            tail_enabled: true,
        }
    }
}

/// Channel widths at every stage, in processing order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChannelPlan {
    /// Widths after each encoder level's RDN/RSE pair.
    pub encoder: [usize; DEPTH],
    pub latent: usize,
    /// Widths after each decoder level's RDN/RSE pair, deepest level
    /// first (the order the decoder runs in).
    pub decoder: [usize; DEPTH],
    /// Width of each tail branch, their concatenation, and the two
    /// post-concat stages.
    pub tail_branch: usize,
    pub tail_stage1: usize,
    pub tail_stage2: usize,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.channel_plan().map(|_| ())
    }

    /// Derive every stage width and check the divisibility constraints.
    pub fn channel_plan(&self) -> Result<ChannelPlan> {
        if self.input_channels == 0 {
            return Err(Error::Config("input_channels must be positive".into()));
        }
        if self.r == 0 {
            return Err(Error::Config("reduction ratio r must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config(format!(
                "dropout_rate {} outside [0, 1)",
                self.dropout_rate
            )));
        }
        if self.base_channels <= self.input_channels {
            return Err(Error::Config(format!(
                "base_channels must exceed input_channels ({} <= {}): level 0 grows \
                 the input to the base width",
                self.base_channels, self.input_channels
            )));
        }

        let b = self.base_channels;
        let encoder = [b, 2 * b, 4 * b];
        let latent = 8 * b;
        let mut decoder = [0usize; DEPTH];
        let mut c = latent;
        for (i, level) in (0..DEPTH).rev().enumerate() {
            if c % 2 != 0 {
                return Err(Error::Config(format!(
                    "decoder input width {c} at level {level} is odd; the transpose \
                     convolution halves the channel count"
                )));
            }
            let cat = c / 2 + encoder[level];
            decoder[i] = cat + encoder[level];
            c = decoder[i];
        }

        let plan = ChannelPlan {
            encoder,
            latent,
            decoder,
            tail_branch: b,
            tail_stage1: 4 * b,
            tail_stage2: 5 * b,
        };

        let mut gated: Vec<usize> = plan.encoder.to_vec();
        gated.push(plan.latent);
        gated.extend_from_slice(&plan.decoder);
        if self.tail_enabled {
            gated.extend_from_slice(&[plan.tail_branch, plan.tail_stage1, plan.tail_stage2]);
        }
        for w in gated {
            if w % self.r != 0 {
                return Err(Error::Config(format!(
                    "channel width {w} is not divisible by the reduction ratio {}",
                    self.r
                )));
            }
        }
        Ok(plan)
    }

    fn block_config(&self) -> BlockConfig {
        BlockConfig {
            kernel_size: 3,
            dropout_rate: self.dropout_rate,
            gate_bias: true,
        }
    }
}

fn concat_channels(a: &FeatureMap, b: &FeatureMap) -> Result<FeatureMap> {
    concatenate(Axis(2), &[a.view(), b.view()])
        .map_err(|e| Error::Internal(format!("channel concat failed: {e}")))
}

fn to_prob_map(probs3: &FeatureMap) -> ProbMap {
    probs3.index_axis(Axis(2), 0).to_owned()
}

fn from_prob_map(map: &ProbMap) -> FeatureMap {
    map.clone().insert_axis(Axis(2))
}

// ---------------------------------------------------------------------------
// Backbone
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
struct EncoderLevel {
    rdn: RdnBlock,
    rse: RseBlock,
    pool: MaxPool2x2,
}

#[derive(Debug, Clone)]
struct DecoderLevel {
    /// Which encoder level this decoder stage mirrors (2, 1, then 0).
    level: usize,
    up: ConvTranspose2x2,
    rdn: RdnBlock,
    rse: RseBlock,
}

/// Encoder–decoder sub-network producing the initial vessel estimate.
#[derive(Debug, Clone)]
pub struct Backbone {
    enc: Vec<EncoderLevel>,
    latent_rdn: RdnBlock,
    latent_rse: RseBlock,
    dec: Vec<DecoderLevel>,
    out_conv: Conv2d,
    input_channels: usize,
}

struct EncLevelCache {
    rdn: RdnCache,
    rse: RseCache,
    pool: PoolCache,
}

struct DecLevelCache {
    up: ConvTCache,
    rdn: RdnCache,
    rse: RseCache,
    up_channels: usize,
}

pub struct BackboneCache {
    enc: Vec<EncLevelCache>,
    latent_rdn: RdnCache,
    latent_rse: RseCache,
    dec: Vec<DecLevelCache>,
    out: ConvCache,
    probs3: FeatureMap,
}

impl Backbone {
    pub fn new(cfg: &ModelConfig, rng: &mut SeedRng) -> Result<Self> {
        let plan = cfg.channel_plan()?;
        let bc = cfg.block_config();

        let mut enc = Vec::with_capacity(DEPTH);
        let mut c_in = cfg.input_channels;
        for (k, &w) in plan.encoder.iter().enumerate() {
            let p = format!("backbone/level{k}/enc");
            enc.push(EncoderLevel {
                rdn: RdnBlock::new(&format!("{p}/rdn"), c_in, w - c_in, &bc, rng)?,
                rse: RseBlock::new(&format!("{p}/rse"), w, cfg.r, &bc, rng)?,
                pool: MaxPool2x2,
            });
            c_in = w;
        }

        let latent_rdn = RdnBlock::new(
            "backbone/latent/rdn",
            c_in,
            plan.latent - c_in,
            &bc,
            rng,
        )?;
        let latent_rse = RseBlock::new("backbone/latent/rse", plan.latent, cfg.r, &bc, rng)?;

        let mut dec = Vec::with_capacity(DEPTH);
        let mut c = plan.latent;
        for (i, level) in (0..DEPTH).rev().enumerate() {
            let p = format!("backbone/level{level}/dec");
            let up_c = c / 2;
            let cat = up_c + plan.encoder[level];
            dec.push(DecoderLevel {
                level,
                up: ConvTranspose2x2::new(&format!("{p}/up"), c, up_c, rng)?,
                rdn: RdnBlock::new(&format!("{p}/rdn"), cat, plan.encoder[level], &bc, rng)?,
                rse: RseBlock::new(&format!("{p}/rse"), plan.decoder[i], cfg.r, &bc, rng)?,
            });
            c = plan.decoder[i];
        }

        let out_conv = Conv2d::new("backbone/output", 1, c, 1, rng)?;
        Ok(Backbone {
            enc,
            latent_rdn,
            latent_rse,
            dec,
            out_conv,
            input_channels: cfg.input_channels,
        })
    }

    fn check_input(&self, x: &FeatureMap) -> Result<()> {
        validate_feature_map(x)?;
        let (h, w, c) = x.dim();
        if c != self.input_channels {
            return Err(Error::InvalidInput(format!(
                "expected {} input channels, got {c}",
                self.input_channels
            )));
        }
        if h % SPATIAL_MULTIPLE != 0 || w % SPATIAL_MULTIPLE != 0 {
            return Err(Error::InvalidInput(format!(
                "input spatial dims {h}x{w} must be divisible by {SPATIAL_MULTIPLE}; \
                 pad the image first"
            )));
        }
        Ok(())
    }

    /// Inference pass; moving batch-norm statistics, no dropout.
    pub fn forward(&self, x: &FeatureMap) -> Result<ProbMap> {
        self.check_input(x)?;
        let mut cur = x.clone();
        let mut skips: Vec<FeatureMap> = Vec::with_capacity(DEPTH);
        for lvl in &self.enc {
            let pre_pool = lvl.rse.forward(&lvl.rdn.forward(&cur)?)?;
            cur = lvl.pool.forward(&pre_pool)?;
            skips.push(pre_pool);
        }
        cur = self.latent_rse.forward(&self.latent_rdn.forward(&cur)?)?;
        for d in &self.dec {
            let up = d.up.forward(&cur)?;
            let cat = concat_channels(&up, &skips[d.level])?;
            cur = d.rse.forward(&d.rdn.forward(&cat)?)?;
        }
        let probs3 = sigmoid(&self.out_conv.forward(&cur)?);
        Ok(to_prob_map(&probs3))
    }

    pub fn forward_train(
        &mut self,
        x: &FeatureMap,
        ctx: &mut TrainCtx,
    ) -> Result<(ProbMap, BackboneCache)> {
        self.check_input(x)?;
        let mut cur = x.clone();
        let mut skips: Vec<FeatureMap> = Vec::with_capacity(DEPTH);
        let mut enc_caches = Vec::with_capacity(DEPTH);
        for lvl in &mut self.enc {
            let (a, rdn) = lvl.rdn.forward_train(&cur, ctx)?;
            let (pre_pool, rse) = lvl.rse.forward_train(&a, ctx)?;
            let (pooled, pool) = lvl.pool.forward_train(&pre_pool)?;
            cur = pooled;
            skips.push(pre_pool);
            enc_caches.push(EncLevelCache { rdn, rse, pool });
        }

        let (lr, latent_rdn) = self.latent_rdn.forward_train(&cur, ctx)?;
        let (ls, latent_rse) = self.latent_rse.forward_train(&lr, ctx)?;
        cur = ls;

        let mut dec_caches = Vec::with_capacity(DEPTH);
        for d in &mut self.dec {
            let (up, up_cache) = d.up.forward_train(&cur)?;
            let up_channels = up.dim().2;
            let cat = concat_channels(&up, &skips[d.level])?;
            let (r, rdn) = d.rdn.forward_train(&cat, ctx)?;
            let (s, rse) = d.rse.forward_train(&r, ctx)?;
            cur = s;
            dec_caches.push(DecLevelCache { up: up_cache, rdn, rse, up_channels });
        }

        let (logits, out) = self.out_conv.forward_train(&cur)?;
        let probs3 = sigmoid(&logits);
        let map = to_prob_map(&probs3);
        Ok((
            map,
            BackboneCache {
                enc: enc_caches,
                latent_rdn,
                latent_rse,
                dec: dec_caches,
                out,
                probs3,
            },
        ))
    }

    /// Backward from a probability-map gradient to the input-image
    /// gradient, accumulating parameter gradients along the way.
    pub fn backward(&self, dmap: &ProbMap, cache: &BackboneCache, grads: &mut GradStore) -> FeatureMap {
        let dy3 = from_prob_map(dmap);
        let dlogits = sigmoid_bwd(&dy3, &cache.probs3);
        let mut dcur = self.out_conv.backward(&dlogits, &cache.out, grads);

        let mut dskips: Vec<Option<FeatureMap>> = vec![None; DEPTH];
        for (d, dc) in self.dec.iter().zip(cache.dec.iter()).rev() {
            let dr = d.rse.backward(&dcur, &dc.rse, grads);
            let dcat = d.rdn.backward(&dr, &dc.rdn, grads);
            let dup = dcat.slice(ndarray::s![.., .., ..dc.up_channels]).to_owned();
            let dskip = dcat.slice(ndarray::s![.., .., dc.up_channels..]).to_owned();
            dskips[d.level] = Some(dskip);
            dcur = d.up.backward(&dup, &dc.up, grads);
        }

        let dlr = self.latent_rse.backward(&dcur, &cache.latent_rse, grads);
        dcur = self.latent_rdn.backward(&dlr, &cache.latent_rdn, grads);

        for k in (0..DEPTH).rev() {
            let (lvl, lc) = (&self.enc[k], &cache.enc[k]);
            let mut dpre_pool = lvl.pool.backward(&dcur, &lc.pool);
            if let Some(dskip) = dskips[k].take() {
                dpre_pool += &dskip;
            }
            let da = lvl.rse.backward(&dpre_pool, &lc.rse, grads);
            dcur = lvl.rdn.backward(&da, &lc.rdn, grads);
        }
        dcur
    }
}

impl ParamVisit for Backbone {
    fn visit_params(&self, f: &mut dyn FnMut(&str, &ArrayD<f64>)) {
        for lvl in &self.enc {
            lvl.rdn.visit_params(f);
            lvl.rse.visit_params(f);
        }
        self.latent_rdn.visit_params(f);
        self.latent_rse.visit_params(f);
        for d in &self.dec {
            d.up.visit_params(f);
            d.rdn.visit_params(f);
            d.rse.visit_params(f);
        }
        self.out_conv.visit_params(f);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut ArrayD<f64>)) {
        for lvl in &mut self.enc {
            lvl.rdn.visit_params_mut(f);
            lvl.rse.visit_params_mut(f);
        }
        self.latent_rdn.visit_params_mut(f);
        self.latent_rse.visit_params_mut(f);
        for d in &mut self.dec {
            d.up.visit_params_mut(f);
            d.rdn.visit_params_mut(f);
            d.rse.visit_params_mut(f);
        }
        self.out_conv.visit_params_mut(f);
    }

    fn visit_state(&self, f: &mut dyn FnMut(&str, &ArrayD<f64>)) {
        for lvl in &self.enc {
            lvl.rdn.visit_state(f);
            lvl.rse.visit_state(f);
        }
        self.latent_rdn.visit_state(f);
        self.latent_rse.visit_state(f);
        for d in &self.dec {
            d.rdn.visit_state(f);
            d.rse.visit_state(f);
        }
    }

    fn visit_state_mut(&mut self, f: &mut dyn FnMut(&str, &mut ArrayD<f64>)) {
        for lvl in &mut self.enc {
            lvl.rdn.visit_state_mut(f);
            lvl.rse.visit_state_mut(f);
        }
        self.latent_rdn.visit_state_mut(f);
        self.latent_rse.visit_state_mut(f);
        for d in &mut self.dec {
            d.rdn.visit_state_mut(f);
            d.rse.visit_state_mut(f);
        }
    }
}

// ---------------------------------------------------------------------------
// Tail
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
struct TailStage {
    rdn: RdnBlock,
    rse: RseBlock,
}

struct TailStageCache {
    rdn: RdnCache,
    rse: RseCache,
}

impl TailStage {
    fn new(prefix: &str, c_in: usize, c_out: usize, r: usize, bc: &BlockConfig, rng: &mut SeedRng) -> Result<Self> {
        Ok(TailStage {
            rdn: RdnBlock::new(&format!("{prefix}/rdn"), c_in, c_out - c_in, bc, rng)?,
            rse: RseBlock::new(&format!("{prefix}/rse"), c_out, r, bc, rng)?,
        })
    }

    fn forward(&self, x: &FeatureMap) -> Result<FeatureMap> {
        self.rse.forward(&self.rdn.forward(x)?)
    }

    fn forward_train(&mut self, x: &FeatureMap, ctx: &mut TrainCtx) -> Result<(FeatureMap, TailStageCache)> {
        let (a, rdn) = self.rdn.forward_train(x, ctx)?;
        let (y, rse) = self.rse.forward_train(&a, ctx)?;
        Ok((y, TailStageCache { rdn, rse }))
    }

    fn backward(&self, dy: &FeatureMap, cache: &TailStageCache, grads: &mut GradStore) -> FeatureMap {
        let da = self.rse.backward(dy, &cache.rse, grads);
        self.rdn.backward(&da, &cache.rdn, grads)
    }
}

impl ParamVisit for TailStage {
    fn visit_params(&self, f: &mut dyn FnMut(&str, &ArrayD<f64>)) {
        self.rdn.visit_params(f);
        self.rse.visit_params(f);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut ArrayD<f64>)) {
        self.rdn.visit_params_mut(f);
        self.rse.visit_params_mut(f);
    }

    fn visit_state(&self, f: &mut dyn FnMut(&str, &ArrayD<f64>)) {
        self.rdn.visit_state(f);
        self.rse.visit_state(f);
    }

    fn visit_state_mut(&mut self, f: &mut dyn FnMut(&str, &mut ArrayD<f64>)) {
        self.rdn.visit_state_mut(f);
        self.rse.visit_state_mut(f);
    }
}

/// Refinement sub-network over (input image, backbone estimate).
#[derive(Debug, Clone)]
pub struct Tail {
    branch_img: TailStage,
    branch_map: TailStage,
    stage1: TailStage,
    stage2: TailStage,
    out_conv: Conv2d,
    branch_width: usize,
}

pub struct TailCache {
    img: TailStageCache,
    map: TailStageCache,
    stage1: TailStageCache,
    stage2: TailStageCache,
    out: ConvCache,
    probs3: FeatureMap,
}

impl Tail {
    pub fn new(cfg: &ModelConfig, rng: &mut SeedRng) -> Result<Self> {
        let plan = cfg.channel_plan()?;
        let bc = cfg.block_config();
        let b = plan.tail_branch;
        Ok(Tail {
            branch_img: TailStage::new("tail/img", cfg.input_channels, b, cfg.r, &bc, rng)?,
            branch_map: TailStage::new("tail/map", 1, b, cfg.r, &bc, rng)?,
            stage1: TailStage::new("tail/stage1", 2 * b, plan.tail_stage1, cfg.r, &bc, rng)?,
            stage2: TailStage::new("tail/stage2", plan.tail_stage1, plan.tail_stage2, cfg.r, &bc, rng)?,
            out_conv: Conv2d::new("tail/output", 1, plan.tail_stage2, 1, rng)?,
            branch_width: b,
        })
    }

    fn check_inputs(&self, image: &FeatureMap, bmap: &ProbMap) -> Result<()> {
        validate_feature_map(image)?;
        let (h, w, _) = image.dim();
        if bmap.dim() != (h, w) {
            return Err(Error::InvalidInput(format!(
                "backbone map shape {:?} does not match image spatial dims {h}x{w}",
                bmap.dim()
            )));
        }
        Ok(())
    }

    pub fn forward(&self, image: &FeatureMap, bmap: &ProbMap) -> Result<ProbMap> {
        self.check_inputs(image, bmap)?;
        let a = self.branch_img.forward(image)?;
        let b = self.branch_map.forward(&from_prob_map(bmap))?;
        let cat = concat_channels(&a, &b)?;
        let s = self.stage2.forward(&self.stage1.forward(&cat)?)?;
        let probs3 = sigmoid(&self.out_conv.forward(&s)?);
        Ok(to_prob_map(&probs3))
    }

    pub fn forward_train(
        &mut self,
        image: &FeatureMap,
        bmap: &ProbMap,
        ctx: &mut TrainCtx,
    ) -> Result<(ProbMap, TailCache)> {
        self.check_inputs(image, bmap)?;
        let (a, img) = self.branch_img.forward_train(image, ctx)?;
        let (b, map) = self.branch_map.forward_train(&from_prob_map(bmap), ctx)?;
        let cat = concat_channels(&a, &b)?;
        let (s1, stage1) = self.stage1.forward_train(&cat, ctx)?;
        let (s2, stage2) = self.stage2.forward_train(&s1, ctx)?;
        let (logits, out) = self.out_conv.forward_train(&s2)?;
        let probs3 = sigmoid(&logits);
        let final_map = to_prob_map(&probs3);
        Ok((final_map, TailCache { img, map, stage1, stage2, out, probs3 }))
    }

    /// Backward from the final-map gradient to (image grad, backbone-map
    /// grad).
    pub fn backward(
        &self,
        dfinal: &ProbMap,
        cache: &TailCache,
        grads: &mut GradStore,
    ) -> (FeatureMap, ProbMap) {
        let dy3 = from_prob_map(dfinal);
        let dlogits = sigmoid_bwd(&dy3, &cache.probs3);
        let ds2 = self.out_conv.backward(&dlogits, &cache.out, grads);
        let ds1 = self.stage2.backward(&ds2, &cache.stage2, grads);
        let dcat = self.stage1.backward(&ds1, &cache.stage1, grads);

        let da = dcat.slice(ndarray::s![.., .., ..self.branch_width]).to_owned();
        let db = dcat.slice(ndarray::s![.., .., self.branch_width..]).to_owned();
        let dimage = self.branch_img.backward(&da, &cache.img, grads);
        let dmap3 = self.branch_map.backward(&db, &cache.map, grads);
        (dimage, dmap3.index_axis(Axis(2), 0).to_owned())
    }
}

impl ParamVisit for Tail {
    fn visit_params(&self, f: &mut dyn FnMut(&str, &ArrayD<f64>)) {
        self.branch_img.visit_params(f);
        self.branch_map.visit_params(f);
        self.stage1.visit_params(f);
        self.stage2.visit_params(f);
        self.out_conv.visit_params(f);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut ArrayD<f64>)) {
        self.branch_img.visit_params_mut(f);
        self.branch_map.visit_params_mut(f);
        self.stage1.visit_params_mut(f);
        self.stage2.visit_params_mut(f);
        self.out_conv.visit_params_mut(f);
    }

    fn visit_state(&self, f: &mut dyn FnMut(&str, &ArrayD<f64>)) {
        self.branch_img.visit_state(f);
        self.branch_map.visit_state(f);
        self.stage1.visit_state(f);
        self.stage2.visit_state(f);
    }

    fn visit_state_mut(&mut self, f: &mut dyn FnMut(&str, &mut ArrayD<f64>)) {
        self.branch_img.visit_state_mut(f);
        self.branch_map.visit_state_mut(f);
        self.stage1.visit_state_mut(f);
        self.stage2.visit_state_mut(f);
    }
}

// ---------------------------------------------------------------------------
// Full model
// ---------------------------------------------------------------------------

/// The cascade of backbone and (optionally) tail.
#[derive(Debug, Clone)]
pub struct DrVNet {
    config: ModelConfig,
    backbone: Backbone,
    tail: Option<Tail>,
}

pub struct FullCache {
    backbone: BackboneCache,
    tail: Option<TailCache>,
}

impl DrVNet {
    pub fn new(cfg: &ModelConfig, rng: &mut SeedRng) -> Result<Self> {
        cfg.validate()?;
        let backbone = Backbone::new(cfg, rng)?;
        let tail = if cfg.tail_enabled {
            Some(Tail::new(cfg, rng)?)
        } else {
            None
        };
        Ok(DrVNet { config: cfg.clone(), backbone, tail })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn backbone(&self) -> &Backbone {
        &self.backbone
    }

    pub fn backbone_mut(&mut self) -> &mut Backbone {
        &mut self.backbone
    }

    pub fn tail(&self) -> Option<&Tail> {
        self.tail.as_ref()
    }

    pub fn tail_mut(&mut self) -> Option<&mut Tail> {
        self.tail.as_mut()
    }

    /// Inference over the cascade. Returns the initial estimate and the
    /// refined map (identical when the tail is disabled).
    pub fn forward_full(&self, image: &FeatureMap) -> Result<(ProbMap, ProbMap)> {
        let bmap = self.backbone.forward(image)?;
        let final_map = match &self.tail {
            Some(t) => t.forward(image, &bmap)?,
            None => bmap.clone(),
        };
        Ok((bmap, final_map))
    }

    /// Training-mode forward through both sub-networks with caches.
    pub fn forward_train_full(
        &mut self,
        image: &FeatureMap,
        ctx: &mut TrainCtx,
    ) -> Result<((ProbMap, ProbMap), FullCache)> {
        let (bmap, backbone) = self.backbone.forward_train(image, ctx)?;
        let (final_map, tail) = match &mut self.tail {
            Some(t) => {
                let (f, c) = t.forward_train(image, &bmap, ctx)?;
                (f, Some(c))
            }
            None => (bmap.clone(), None),
        };
        Ok(((bmap, final_map), FullCache { backbone, tail }))
    }

    /// Backward from the final-map gradient through the whole cascade.
    pub fn backward_full(
        &self,
        dfinal: &ProbMap,
        cache: &FullCache,
        grads: &mut GradStore,
    ) -> FeatureMap {
        match (&self.tail, &cache.tail) {
            (Some(t), Some(tc)) => {
                let (dimage_tail, dbmap) = t.backward(dfinal, tc, grads);
                let dimage_backbone = self.backbone.backward(&dbmap, &cache.backbone, grads);
                dimage_tail + dimage_backbone
            }
            _ => self.backbone.backward(dfinal, &cache.backbone, grads),
        }
    }
}

impl ParamVisit for DrVNet {
    fn visit_params(&self, f: &mut dyn FnMut(&str, &ArrayD<f64>)) {
        self.backbone.visit_params(f);
        if let Some(t) = &self.tail {
            t.visit_params(f);
        }
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut ArrayD<f64>)) {
        self.backbone.visit_params_mut(f);
        if let Some(t) = &mut self.tail {
            t.visit_params_mut(f);
        }
    }

    fn visit_state(&self, f: &mut dyn FnMut(&str, &ArrayD<f64>)) {
        self.backbone.visit_state(f);
        if let Some(t) = &self.tail {
            t.visit_state(f);
        }
    }

    fn visit_state_mut(&mut self, f: &mut dyn FnMut(&str, &mut ArrayD<f64>)) {
        self.backbone.visit_state_mut(f);
        if let Some(t) = &mut self.tail {
            t.visit_state_mut(f);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{collect_params, param_count};
    use crate::rng::{substream, Stream};
    use ndarray::Array3;
    use rand::Rng;

    fn rng(tag: u64) -> SeedRng {
        substream(7000, Stream::Custom(tag))
    }

    fn small_cfg(base: usize, tail: bool) -> ModelConfig {
        ModelConfig {
            base_channels: base,
            dropout_rate: 0.0,
            tail_enabled: tail,
            ..Default::default()
        }
    }

    fn random_image(h: usize, w: usize, tag: u64) -> FeatureMap {
        let mut r = rng(tag);
        Array3::from_shape_fn((h, w, 3), |_| r.gen_range(0.0..1.0))
    }

    // ---- channel plan ---------------------------------------------------

    #[test]
    fn plan_for_base_32_matches_doubling_convention() {
        let plan = small_cfg(32, true).channel_plan().unwrap();
        assert_eq!(plan.encoder, [32, 64, 128]);
        assert_eq!(plan.latent, 256);
        assert_eq!(plan.decoder, [384, 320, 224]);
        assert_eq!(plan.tail_branch, 32);
        assert_eq!(plan.tail_stage1, 128);
        assert_eq!(plan.tail_stage2, 160);
    }

    #[test]
    fn plan_widths_divisible_by_r_for_power_of_two_bases() {
        for base in [4usize, 8, 16, 32] {
            let plan = small_cfg(base, true).channel_plan().unwrap();
            let extra = [plan.latent, plan.tail_branch, plan.tail_stage1, plan.tail_stage2];
            for w in plan.encoder.iter().chain(plan.decoder.iter()).chain(extra.iter()) {
                assert_eq!(w % 2, 0, "width {w} odd for base {base}");
            }
        }
    }

    #[test]
    fn too_narrow_base_rejected() {
        let cfg = ModelConfig { base_channels: 3, ..Default::default() };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn zero_r_rejected() {
        let cfg = ModelConfig { r: 0, ..Default::default() };
        assert!(cfg.validate().is_err());
    }

    // ---- shapes ---------------------------------------------------------

    #[test]
    fn backbone_maps_64_to_64() {
        let cfg = small_cfg(4, false);
        let mut r = rng(1);
        let net = Backbone::new(&cfg, &mut r).unwrap();
        let x = random_image(64, 64, 2);
        let y = net.forward(&x).unwrap();
        assert_eq!(y.dim(), (64, 64));
        assert!(y.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn indivisible_input_rejected_with_divisibility_hint() {
        let cfg = small_cfg(4, false);
        let mut r = rng(3);
        let net = Backbone::new(&cfg, &mut r).unwrap();
        let x = random_image(60, 64, 4);
        match net.forward(&x) {
            Err(Error::InvalidInput(msg)) => assert!(msg.contains("divisible by 8"), "{msg}"),
            other => panic!("expected invalid-input, got {other:?}"),
        }
    }

    #[test]
    fn full_model_shapes_and_ranges_on_rectangles() {
        let cfg = small_cfg(4, true);
        let mut r = rng(5);
        let net = DrVNet::new(&cfg, &mut r).unwrap();
        for (h, w) in [(16usize, 24usize), (32, 16)] {
            let x = random_image(h, w, 6);
            let (bmap, fmap) = net.forward_full(&x).unwrap();
            assert_eq!(bmap.dim(), (h, w));
            assert_eq!(fmap.dim(), (h, w));
            assert!(bmap.iter().chain(fmap.iter()).all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn disabled_tail_returns_identical_maps() {
        let cfg = small_cfg(4, false);
        let mut r = rng(7);
        let net = DrVNet::new(&cfg, &mut r).unwrap();
        let x = random_image(16, 16, 8);
        let (bmap, fmap) = net.forward_full(&x).unwrap();
        assert_eq!(bmap, fmap);
    }

    #[test]
    fn tail_rejects_mismatched_map() {
        let cfg = small_cfg(4, true);
        let mut r = rng(9);
        let net = DrVNet::new(&cfg, &mut r).unwrap();
        let x = random_image(16, 16, 10);
        let bad = ProbMap::zeros((8, 8));
        assert!(net.tail().unwrap().forward(&x, &bad).is_err());
    }

    // ---- parameter audit ------------------------------------------------

    /// Layer-by-layer parameter-count audit computed from closed-form
    /// per-layer formulas, independent of the constructors.
    fn audited_param_count(base: usize, input_ch: usize, with_tail: bool) -> usize {
        let conv3 = |ci: usize, co: usize| 9 * ci * co + co;
        let conv1 = |ci: usize, co: usize| ci * co + co;
        let bn = |c: usize| 2 * c;
        let fc = |i: usize, o: usize| i * o + o;
        let convt = |ci: usize, co: usize| 4 * ci * co + co;
        let rdn = |cin: usize, g: usize| {
            let cd = cin + g;
            bn(cin) + conv3(cin, g) + 2 * (conv3(cd, cd) + bn(cd)) + bn(cd)
        };
        let rse = |c: usize| conv3(c, c) + bn(c) + fc(c, c / 2) + fc(c / 2, c);

        let b = base;
        let enc = [b, 2 * b, 4 * b];
        let latent = 8 * b;

        let mut total = 0;
        let mut cin = input_ch;
        for w in enc {
            total += rdn(cin, w - cin) + rse(w);
            cin = w;
        }
        total += rdn(4 * b, 4 * b) + rse(latent);
        let mut c = latent;
        for level in (0..3).rev() {
            let up = c / 2;
            let cat = up + enc[level];
            let w = cat + enc[level];
            total += convt(c, up) + rdn(cat, enc[level]) + rse(w);
            c = w;
        }
        total += conv1(c, 1);

        if with_tail {
            total += rdn(input_ch, b - input_ch) + rse(b); // image branch
            total += rdn(1, b - 1) + rse(b); // map branch
            total += rdn(2 * b, 2 * b) + rse(4 * b);
            total += rdn(4 * b, b) + rse(5 * b);
            total += conv1(5 * b, 1);
        }
        total
    }

    #[test]
    fn parameter_count_matches_audit_for_base_8() {
        let mut r = rng(11);
        let backbone_only = DrVNet::new(&small_cfg(8, false), &mut r).unwrap();
        assert_eq!(param_count(&backbone_only), audited_param_count(8, 3, false));
        assert_eq!(param_count(&backbone_only), 765_299);

        let full = DrVNet::new(&small_cfg(8, true), &mut r).unwrap();
        assert_eq!(param_count(&full), audited_param_count(8, 3, true));
        assert_eq!(param_count(&full), 848_442);
    }

    #[test]
    fn parameter_names_are_unique_and_prefixed() {
        let mut r = rng(13);
        let net = DrVNet::new(&small_cfg(4, true), &mut r).unwrap();
        let params = collect_params(&net);
        let mut names: Vec<&String> = params.keys().collect();
        let n_before = names.len();
        names.dedup();
        assert_eq!(names.len(), n_before);
        assert!(params
            .keys()
            .all(|k| k.starts_with("backbone/") || k.starts_with("tail/")));
        assert!(params.keys().any(|k| k.starts_with("backbone/level0/enc/rdn/")));
        assert!(params.keys().any(|k| k.starts_with("backbone/latent/")));
        assert!(params.keys().any(|k| k.starts_with("backbone/level2/dec/up/")));
        assert!(params.keys().any(|k| k.starts_with("tail/stage2/")));
    }

    // ---- skip fidelity --------------------------------------------------

    #[test]
    fn decoder_consumes_pre_pool_encoder_maps() {
        // Instrumented shape trace: for every decoder level the concat
        // input is (upsampled ⊕ skip) where the skip is the pre-pool
        // encoder output at that level. We verify the arithmetic the
        // forward relies on: spatial dims of the upsampled map equal the
        // skip's, and channel counts add up to the RDN's input width.
        let cfg = small_cfg(4, false);
        let plan = cfg.channel_plan().unwrap();
        let mut r = rng(15);
        let net = Backbone::new(&cfg, &mut r).unwrap();
        let x = random_image(32, 32, 16);

        // Replay the encoder to capture pre-pool shapes.
        let mut cur = x.clone();
        let mut skips = Vec::new();
        for lvl in &net.enc {
            let pre = lvl.rse.forward(&lvl.rdn.forward(&cur).unwrap()).unwrap();
            skips.push(pre.dim());
            cur = lvl.pool.forward(&pre).unwrap();
        }
        assert_eq!(skips[0], (32, 32, plan.encoder[0]));
        assert_eq!(skips[1], (16, 16, plan.encoder[1]));
        assert_eq!(skips[2], (8, 8, plan.encoder[2]));

        let mut c = plan.latent;
        for (i, d) in net.dec.iter().enumerate() {
            let up_c = c / 2;
            let skip = skips[d.level];
            assert_eq!(d.rdn.in_channels(), up_c + skip.2);
            assert_eq!(d.rdn.out_channels(), plan.decoder[i]);
            c = plan.decoder[i];
        }
    }

    // ---- gradients ------------------------------------------------------

    #[test]
    fn full_gradient_flow_reaches_first_conv() {
        let cfg = small_cfg(4, true);
        let mut r = rng(17);
        let mut net = DrVNet::new(&cfg, &mut r).unwrap();
        let x = random_image(8, 8, 18);

        let mut drng = rng(19);
        let mut ctx = TrainCtx::frozen(&mut drng);
        let ((_, fmap), cache) = net.forward_train_full(&x, &mut ctx).unwrap();

        // Objective: mean(final_map) → dfinal = 1/n.
        let n = fmap.len() as f64;
        let dfinal = ProbMap::from_elem(fmap.raw_dim(), 1.0 / n);
        let mut grads = GradStore::new();
        net.backward_full(&dfinal, &cache, &mut grads);

        let first = "backbone/level0/enc/rdn/dense/conv/w";
        let g = grads.get(first).expect("first conv gradient present");
        assert!(g.iter().any(|v| *v != 0.0), "dead graph at {first}");

        // Finite-difference check on two coordinates of that tensor.
        let eval = |m: &DrVNet| -> f64 {
            let mut mm = m.clone();
            let mut d2 = rng(19);
            let mut c2 = TrainCtx::frozen(&mut d2);
            let ((_, f), _) = mm.forward_train_full(&x, &mut c2).unwrap();
            f.sum() / n
        };
        for flat in [0usize, g.len() - 1] {
            let analytic = g.iter().nth(flat).copied().unwrap();
            let h = 1e-6;
            let mut fp = 0.0;
            let mut fm = 0.0;
            for (sign, out) in [(1.0, &mut fp), (-1.0, &mut fm)] {
                let mut m2 = net.clone();
                m2.visit_params_mut(&mut |name, p| {
                    if name == first {
                        p.as_slice_mut().unwrap()[flat] += sign * h;
                    }
                });
                *out = eval(&m2);
            }
            let num = (fp - fm) / (2.0 * h);
            let denom = num.abs().max(analytic.abs()).max(1e-6);
            assert!(
                ((num - analytic) / denom).abs() < 1e-4 || (num - analytic).abs() < 1e-8,
                "fd mismatch at [{flat}]: {num} vs {analytic}"
            );
        }
    }

    #[test]
    fn tail_perturbation_leaves_backbone_map_bitwise_unchanged() {
        let cfg = small_cfg(4, true);
        let mut r = rng(21);
        let mut net = DrVNet::new(&cfg, &mut r).unwrap();
        let x = random_image(16, 16, 22);
        let (bmap1, fmap1) = net.forward_full(&x).unwrap();

        net.visit_params_mut(&mut |name, p| {
            if name.starts_with("tail/") {
                p.mapv_inplace(|v| v + 0.05);
            }
        });
        let (bmap2, fmap2) = net.forward_full(&x).unwrap();
        assert_eq!(bmap1, bmap2, "backbone map drifted");
        assert_ne!(fmap1, fmap2, "tail perturbation had no effect");
    }

    #[test]
    fn training_and_inference_agree_in_frozen_deterministic_mode() {
        let cfg = small_cfg(4, true);
        let mut r = rng(23);
        let mut net = DrVNet::new(&cfg, &mut r).unwrap();
        let x = random_image(16, 16, 24);
        let (bmap_i, fmap_i) = net.forward_full(&x).unwrap();
        let mut drng = rng(25);
        let mut ctx = TrainCtx::frozen(&mut drng);
        let ((bmap_t, fmap_t), _) = net.forward_train_full(&x, &mut ctx).unwrap();
        for (a, b) in bmap_i.iter().zip(bmap_t.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
        for (a, b) in fmap_i.iter().zip(fmap_t.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
