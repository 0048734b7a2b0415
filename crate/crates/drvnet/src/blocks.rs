//! The two building blocks of the segmentation network.
//!
//! * [`RdnBlock`] — residual dense block. A densely connected unit
//!   (batch norm → relu → conv → dropout, concatenated with its input)
//!   feeds a two-layer residual mapping; the residual sum is normalized
//!   and rectified. This is the feature extractor and the only block
//!   that changes the channel count (it grows it).
//! * [`RseBlock`] — residual squeeze-and-excitation block. A
//!   channel-attention branch (global average pool → bottleneck gate →
//!   channel-wise rescale) is summed with a convolutional residual
//!   branch and rectified. Channel-preserving; used as a transition
//!   block.
//!
//! Neither block alters spatial resolution.

use ndarray::{concatenate, Array1, ArrayD, Axis};

use crate::error::{Error, Result};
use crate::nn::{
    relu, relu_bwd, validate_feature_map, BatchNorm2d, BnCache, Conv2d, ConvCache, Dense,
    DenseCache, Dropout, DropoutCache, FeatureMap, GradStore, ParamVisit, TrainCtx,
};
use crate::rng::SeedRng;

/// Knobs shared by every composite unit inside the blocks.
#[derive(Debug, Clone)]
pub struct BlockConfig {
    /// Side length of the square conv kernels inside the composite units.
    pub kernel_size: usize,
    pub dropout_rate: f64,
    /// Whether the two gate FC layers carry biases.
    pub gate_bias: bool,
}

impl Default for BlockConfig {
    fn default() -> Self {
        BlockConfig { kernel_size: 3, dropout_rate: 0.1, gate_bias: true }
    }
}

// ---------------------------------------------------------------------------
// Squeeze-and-excitation primitives
// ---------------------------------------------------------------------------

/// Per-channel spatial mean: v_c = (1/(N*M)) Σ_kl X_c(k, l).
pub fn global_avg_pool(x: &FeatureMap) -> Result<Array1<f64>> {
    let (h, w, c) = x.dim();
    if h * w == 0 || c == 0 {
        return Err(Error::InvalidInput(format!(
            "global average pool over degenerate map {h}x{w}x{c}"
        )));
    }
    let n = (h * w) as f64;
    let mut v = Array1::<f64>::zeros(c);
    for (ch, lane) in x.axis_iter(Axis(2)).enumerate() {
        v[ch] = lane.sum() / n;
    }
    Ok(v)
}

/// Channel-wise rescale: X̂_c(k, l) = X_c(k, l) * u_c.
pub fn se_recalibrate(x: &FeatureMap, u: &Array1<f64>) -> Result<FeatureMap> {
    let (_, _, c) = x.dim();
    if u.len() != c {
        return Err(Error::InvalidInput(format!(
            "gate vector length {} does not match {c} channels",
            u.len()
        )));
    }
    let mut y = x.clone();
    for (ch, mut lane) in y.axis_iter_mut(Axis(2)).enumerate() {
        let s = u[ch];
        lane.mapv_inplace(|v| v * s);
    }
    Ok(y)
}

/// Two-layer bottleneck gate: u = sigmoid(W2 · relu(W1 · v)).
///
/// The hidden layer has C/r units; construction fails unless r divides C.
#[derive(Debug, Clone)]
pub struct SeGate {
    reduce: Dense,
    expand: Dense,
    channels: usize,
}

#[derive(Debug)]
pub struct SeGateCache {
    reduce: DenseCache,
    hidden_relu: Array1<f64>,
    expand: DenseCache,
    u: Array1<f64>,
}

impl SeGate {
    pub fn new(name: &str, channels: usize, r: usize, bias: bool, rng: &mut SeedRng) -> Result<Self> {
        if r == 0 {
            return Err(Error::Config(format!("{name}: reduction ratio must be positive")));
        }
        if channels % r != 0 {
            return Err(Error::Config(format!(
                "{name}: channel count {channels} is not divisible by reduction ratio {r}"
            )));
        }
        let hidden = channels / r;
        Ok(SeGate {
            reduce: Dense::new(&format!("{name}/fc1"), channels, hidden, bias, rng)?,
            expand: Dense::new(&format!("{name}/fc2"), hidden, channels, bias, rng)?,
            channels,
        })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn forward(&self, v: &Array1<f64>) -> Result<Array1<f64>> {
        let hidden = self.reduce.forward(v)?.mapv(|x| x.max(0.0));
        let pre = self.expand.forward(&hidden)?;
        Ok(pre.mapv(|x| 1.0 / (1.0 + (-x).exp())))
    }

    pub fn forward_train(&self, v: &Array1<f64>) -> Result<(Array1<f64>, SeGateCache)> {
        let (pre_h, reduce) = self.reduce.forward_train(v)?;
        let hidden_relu = pre_h.mapv(|x| x.max(0.0));
        let (pre_u, expand) = self.expand.forward_train(&hidden_relu)?;
        let u = pre_u.mapv(|x| 1.0 / (1.0 + (-x).exp()));
        Ok((u.clone(), SeGateCache { reduce, hidden_relu, expand, u }))
    }

    pub fn backward(&self, du: &Array1<f64>, cache: &SeGateCache, grads: &mut GradStore) -> Array1<f64> {
        let dpre_u = Array1::from_shape_fn(du.len(), |i| du[i] * cache.u[i] * (1.0 - cache.u[i]));
        let dhidden = self.expand.backward(&dpre_u, &cache.expand, grads);
        let dpre_h = Array1::from_shape_fn(dhidden.len(), |i| {
            if cache.hidden_relu[i] > 0.0 {
                dhidden[i]
            } else {
                0.0
            }
        });
        self.reduce.backward(&dpre_h, &cache.reduce, grads)
    }
}

impl ParamVisit for SeGate {
    fn visit_params(&self, f: &mut dyn FnMut(&str, &ArrayD<f64>)) {
        self.reduce.visit_params(f);
        self.expand.visit_params(f);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut ArrayD<f64>)) {
        self.reduce.visit_params_mut(f);
        self.expand.visit_params_mut(f);
    }
}

// ---------------------------------------------------------------------------
// Composite units
// ---------------------------------------------------------------------------

/// Pre-activation composite: batch norm → relu → conv → dropout.
#[derive(Debug, Clone)]
struct PreactUnit {
    bn: BatchNorm2d,
    conv: Conv2d,
    dropout: Dropout,
}

#[derive(Debug)]
struct PreactCache {
    bn: BnCache,
    relu_y: FeatureMap,
    conv: ConvCache,
    drop: DropoutCache,
}

impl PreactUnit {
    fn new(name: &str, c_in: usize, c_out: usize, cfg: &BlockConfig, rng: &mut SeedRng) -> Result<Self> {
        Ok(PreactUnit {
            bn: BatchNorm2d::new(&format!("{name}/bn"), c_in)?,
            conv: Conv2d::new(&format!("{name}/conv"), cfg.kernel_size, c_in, c_out, rng)?,
            dropout: Dropout::new(cfg.dropout_rate)?,
        })
    }

    fn forward(&self, x: &FeatureMap) -> Result<FeatureMap> {
        let y = relu(&self.bn.forward(x)?);
        Ok(self.dropout.forward(&self.conv.forward(&y)?))
    }

    fn forward_train(&mut self, x: &FeatureMap, ctx: &mut TrainCtx) -> Result<(FeatureMap, PreactCache)> {
        let (b, bn) = self.bn.forward_train(x, ctx.frozen_stats)?;
        let relu_y = relu(&b);
        let (c, conv) = self.conv.forward_train(&relu_y)?;
        let (d, drop) = self.dropout.forward_train(&c, ctx.dropout, ctx.rng);
        Ok((d, PreactCache { bn, relu_y, conv, drop }))
    }

    fn backward(&self, dy: &FeatureMap, cache: &PreactCache, grads: &mut GradStore) -> FeatureMap {
        let dc = self.dropout.backward(dy, &cache.drop, grads);
        let dr = self.conv.backward(&dc, &cache.conv, grads);
        let db = relu_bwd(&dr, &cache.relu_y);
        self.bn.backward(&db, &cache.bn, grads)
    }
}

impl ParamVisit for PreactUnit {
    fn visit_params(&self, f: &mut dyn FnMut(&str, &ArrayD<f64>)) {
        self.bn.visit_params(f);
        self.conv.visit_params(f);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut ArrayD<f64>)) {
        self.bn.visit_params_mut(f);
        self.conv.visit_params_mut(f);
    }

    fn visit_state(&self, f: &mut dyn FnMut(&str, &ArrayD<f64>)) {
        self.bn.visit_state(f);
    }

    fn visit_state_mut(&mut self, f: &mut dyn FnMut(&str, &mut ArrayD<f64>)) {
        self.bn.visit_state_mut(f);
    }
}

/// Post-normalized composite: conv → dropout → batch norm, with an
/// optional trailing relu.
#[derive(Debug, Clone)]
struct PostnormUnit {
    conv: Conv2d,
    dropout: Dropout,
    bn: BatchNorm2d,
    relu_after: bool,
}

#[derive(Debug)]
struct PostnormCache {
    conv: ConvCache,
    drop: DropoutCache,
    bn: BnCache,
    relu_y: Option<FeatureMap>,
}

impl PostnormUnit {
    fn new(
        name: &str,
        c_in: usize,
        c_out: usize,
        relu_after: bool,
        cfg: &BlockConfig,
        rng: &mut SeedRng,
    ) -> Result<Self> {
        Ok(PostnormUnit {
            conv: Conv2d::new(&format!("{name}/conv"), cfg.kernel_size, c_in, c_out, rng)?,
            dropout: Dropout::new(cfg.dropout_rate)?,
            bn: BatchNorm2d::new(&format!("{name}/bn"), c_out)?,
            relu_after,
        })
    }

    fn forward(&self, x: &FeatureMap) -> Result<FeatureMap> {
        let y = self.bn.forward(&self.dropout.forward(&self.conv.forward(x)?))?;
        Ok(if self.relu_after { relu(&y) } else { y })
    }

    fn forward_train(&mut self, x: &FeatureMap, ctx: &mut TrainCtx) -> Result<(FeatureMap, PostnormCache)> {
        let (c, conv) = self.conv.forward_train(x)?;
        let (d, drop) = self.dropout.forward_train(&c, ctx.dropout, ctx.rng);
        let (b, bn) = self.bn.forward_train(&d, ctx.frozen_stats)?;
        if self.relu_after {
            let y = relu(&b);
            Ok((y.clone(), PostnormCache { conv, drop, bn, relu_y: Some(y) }))
        } else {
            Ok((b, PostnormCache { conv, drop, bn, relu_y: None }))
        }
    }

    fn backward(&self, dy: &FeatureMap, cache: &PostnormCache, grads: &mut GradStore) -> FeatureMap {
        let db = match &cache.relu_y {
            Some(y) => relu_bwd(dy, y),
            None => dy.clone(),
        };
        let dd = self.bn.backward(&db, &cache.bn, grads);
        let dc = self.dropout.backward(&dd, &cache.drop, grads);
        self.conv.backward(&dc, &cache.conv, grads)
    }
}

impl ParamVisit for PostnormUnit {
    fn visit_params(&self, f: &mut dyn FnMut(&str, &ArrayD<f64>)) {
        self.conv.visit_params(f);
        self.bn.visit_params(f);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut ArrayD<f64>)) {
        self.conv.visit_params_mut(f);
        self.bn.visit_params_mut(f);
    }

    fn visit_state(&self, f: &mut dyn FnMut(&str, &ArrayD<f64>)) {
        self.bn.visit_state(f);
    }

    fn visit_state_mut(&mut self, f: &mut dyn FnMut(&str, &mut ArrayD<f64>)) {
        self.bn.visit_state_mut(f);
    }
}

// ---------------------------------------------------------------------------
// RDN block
// ---------------------------------------------------------------------------

/// Residual dense block: grows channels from `c_in` to `c_in + growth`.
#[derive(Debug, Clone)]
pub struct RdnBlock {
    dense: PreactUnit,
    res1: PostnormUnit,
    res2: PostnormUnit,
    fuse_bn: BatchNorm2d,
    c_in: usize,
    growth: usize,
}

#[derive(Debug)]
pub struct RdnCache {
    dense: PreactCache,
    res1: PostnormCache,
    res2: PostnormCache,
    fuse_bn: BnCache,
    y: FeatureMap,
}

impl RdnBlock {
    /// The dense unit emits `growth` channels; the residual mapping is
    /// width-preserving so the skip sum is well formed by construction.
    pub fn new(
        name: &str,
        c_in: usize,
        growth: usize,
        cfg: &BlockConfig,
        rng: &mut SeedRng,
    ) -> Result<Self> {
        if c_in == 0 || growth == 0 {
            return Err(Error::Config(format!(
                "{name}: need c_in >= 1 and growth >= 1, got c_in={c_in}, growth={growth}"
            )));
        }
        let c_d = c_in + growth;
        Ok(RdnBlock {
            dense: PreactUnit::new(&format!("{name}/dense"), c_in, growth, cfg, rng)?,
            res1: PostnormUnit::new(&format!("{name}/res1"), c_d, c_d, true, cfg, rng)?,
            res2: PostnormUnit::new(&format!("{name}/res2"), c_d, c_d, true, cfg, rng)?,
            fuse_bn: BatchNorm2d::new(&format!("{name}/fuse_bn"), c_d)?,
            c_in,
            growth,
        })
    }

    pub fn in_channels(&self) -> usize {
        self.c_in
    }

    pub fn out_channels(&self) -> usize {
        self.c_in + self.growth
    }

    pub fn forward(&self, x: &FeatureMap) -> Result<FeatureMap> {
        validate_feature_map(x)?;
        let h = self.dense.forward(x)?;
        let y_d = concatenate(Axis(2), &[h.view(), x.view()])
            .map_err(|e| Error::Internal(format!("concat failed: {e}")))?;
        let s = self.res2.forward(&self.res1.forward(&y_d)?)?;
        Ok(relu(&self.fuse_bn.forward(&(&s + &y_d))?))
    }

    pub fn forward_train(&mut self, x: &FeatureMap, ctx: &mut TrainCtx) -> Result<(FeatureMap, RdnCache)> {
        validate_feature_map(x)?;
        let (h, dense) = self.dense.forward_train(x, ctx)?;
        let y_d = concatenate(Axis(2), &[h.view(), x.view()])
            .map_err(|e| Error::Internal(format!("concat failed: {e}")))?;
        let (s1, res1) = self.res1.forward_train(&y_d, ctx)?;
        let (s2, res2) = self.res2.forward_train(&s1, ctx)?;
        let (fused, fuse_bn) = self.fuse_bn.forward_train(&(&s2 + &y_d), ctx.frozen_stats)?;
        let y = relu(&fused);
        Ok((y.clone(), RdnCache { dense, res1, res2, fuse_bn, y }))
    }

    pub fn backward(&self, dy: &FeatureMap, cache: &RdnCache, grads: &mut GradStore) -> FeatureMap {
        let dfused = relu_bwd(dy, &cache.y);
        let dsum = self.fuse_bn.backward(&dfused, &cache.fuse_bn, grads);
        let ds1 = self.res2.backward(&dsum, &cache.res2, grads);
        let mut dy_d = self.res1.backward(&ds1, &cache.res1, grads);
        dy_d += &dsum; // skip path of the residual sum

        let dh = dy_d.slice(ndarray::s![.., .., ..self.growth]).to_owned();
        let dx_direct = dy_d.slice(ndarray::s![.., .., self.growth..]).to_owned();
        let dx_dense = self.dense.backward(&dh, &cache.dense, grads);
        dx_direct + dx_dense
    }
}

impl ParamVisit for RdnBlock {
    fn visit_params(&self, f: &mut dyn FnMut(&str, &ArrayD<f64>)) {
        self.dense.visit_params(f);
        self.res1.visit_params(f);
        self.res2.visit_params(f);
        self.fuse_bn.visit_params(f);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut ArrayD<f64>)) {
        self.dense.visit_params_mut(f);
        self.res1.visit_params_mut(f);
        self.res2.visit_params_mut(f);
        self.fuse_bn.visit_params_mut(f);
    }

    fn visit_state(&self, f: &mut dyn FnMut(&str, &ArrayD<f64>)) {
        self.dense.visit_state(f);
        self.res1.visit_state(f);
        self.res2.visit_state(f);
        self.fuse_bn.visit_state(f);
    }

    fn visit_state_mut(&mut self, f: &mut dyn FnMut(&str, &mut ArrayD<f64>)) {
        self.dense.visit_state_mut(f);
        self.res1.visit_state_mut(f);
        self.res2.visit_state_mut(f);
        self.fuse_bn.visit_state_mut(f);
    }
}

// ---------------------------------------------------------------------------
// RSE block
// ---------------------------------------------------------------------------

/// Residual squeeze-and-excitation block; channel-preserving.
#[derive(Debug, Clone)]
pub struct RseBlock {
    res: PostnormUnit,
    gate: SeGate,
    channels: usize,
}

#[derive(Debug)]
pub struct RseCache {
    res: PostnormCache,
    gate: SeGateCache,
    x: FeatureMap,
    u: Array1<f64>,
    y: FeatureMap,
}

impl RseBlock {
    pub fn new(name: &str, channels: usize, r: usize, cfg: &BlockConfig, rng: &mut SeedRng) -> Result<Self> {
        Ok(RseBlock {
            res: PostnormUnit::new(&format!("{name}/res"), channels, channels, false, cfg, rng)?,
            gate: SeGate::new(&format!("{name}/gate"), channels, r, cfg.gate_bias, rng)?,
            channels,
        })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn forward(&self, x: &FeatureMap) -> Result<FeatureMap> {
        validate_feature_map(x)?;
        let f = self.res.forward(x)?;
        let u = self.gate.forward(&global_avg_pool(x)?)?;
        let xhat = se_recalibrate(x, &u)?;
        Ok(relu(&(&f + &xhat)))
    }

    pub fn forward_train(&mut self, x: &FeatureMap, ctx: &mut TrainCtx) -> Result<(FeatureMap, RseCache)> {
        validate_feature_map(x)?;
        let (f, res) = self.res.forward_train(x, ctx)?;
        let v = global_avg_pool(x)?;
        let (u, gate) = self.gate.forward_train(&v)?;
        let xhat = se_recalibrate(x, &u)?;
        let y = relu(&(&f + &xhat));
        Ok((y.clone(), RseCache { res, gate, x: x.clone(), u, y }))
    }

    pub fn backward(&self, dy: &FeatureMap, cache: &RseCache, grads: &mut GradStore) -> FeatureMap {
        let dsum = relu_bwd(dy, &cache.y);
        let mut dx = self.res.backward(&dsum, &cache.res, grads);

        // Recalibration path: dX += dsum * u_c, du_c = <dsum_c, X_c>.
        let (h, w, c) = cache.x.dim();
        let mut du = Array1::<f64>::zeros(c);
        for ch in 0..c {
            let dl = dsum.index_axis(Axis(2), ch);
            let xl = cache.x.index_axis(Axis(2), ch);
            du[ch] = dl.iter().zip(xl.iter()).map(|(a, b)| a * b).sum();
        }
        for (ch, mut lane) in dx.axis_iter_mut(Axis(2)).enumerate() {
            let u = cache.u[ch];
            let dl = dsum.index_axis(Axis(2), ch);
            ndarray::Zip::from(&mut lane).and(&dl).for_each(|d, &s| *d += s * u);
        }

        // Gate and pooling path: dX += dv_c / (N*M).
        let dv = self.gate.backward(&du, &cache.gate, grads);
        let n = (h * w) as f64;
        for (ch, mut lane) in dx.axis_iter_mut(Axis(2)).enumerate() {
            let add = dv[ch] / n;
            lane.mapv_inplace(|v| v + add);
        }
        dx
    }
}

impl ParamVisit for RseBlock {
    fn visit_params(&self, f: &mut dyn FnMut(&str, &ArrayD<f64>)) {
        self.res.visit_params(f);
        self.gate.visit_params(f);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut ArrayD<f64>)) {
        self.res.visit_params_mut(f);
        self.gate.visit_params_mut(f);
    }

    fn visit_state(&self, f: &mut dyn FnMut(&str, &ArrayD<f64>)) {
        self.res.visit_state(f);
    }

    fn visit_state_mut(&mut self, f: &mut dyn FnMut(&str, &mut ArrayD<f64>)) {
        self.res.visit_state_mut(f);
    }
}
