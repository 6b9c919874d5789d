//! The adversarial VAE: encoder and decoder form the generator, and a patch
//! discriminator whose normalization always uses current-batch statistics.
//!
//! Layers keep explicit forward caches and hand-written backward passes.
//! Models are generic over [`Real`]; training and scoring use `f32`, gradient
//! checks use `f64`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{
    batch_norm_backward, batch_norm_forward, conv2d_backward, conv2d_forward, flush, flush_subnormals, leaky_relu_backward,
    leaky_relu_forward, linear_backward, linear_forward, sigmoid, upsample2x_backward,
    upsample2x_forward, BatchNormCache, ConvGeometry, Param, Real, Tensor,
};
use crate::patching::PatchBatch;
use crate::rng::{self, Rng};

/// Normalization inside the generator. Only the discriminator carries the
/// batch-statistics contract; the generator runs without normalization.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GeneratorNorm {
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchitectureConfig {
    pub patch_size: usize,
    pub latent_dim: usize,
    /// Output channels of each stride-2 encoder stage.
    pub encoder_channels: Vec<usize>,
    /// First entry is the channel count of the projected latent grid; each
    /// further entry is one upsample + conv stage.
    pub decoder_channels: Vec<usize>,
    pub discriminator_channels: Vec<usize>,
    pub leaky_slope: f64,
    pub norm_epsilon: f64,
    pub generator_norm: GeneratorNorm,
}

impl Default for ArchitectureConfig {
    fn default() -> Self {
        ArchitectureConfig {
            patch_size: 128,
            latent_dim: 128,
            encoder_channels: vec![32, 64, 128, 256, 512],
            decoder_channels: vec![512, 256, 128, 64, 32, 16],
            discriminator_channels: vec![32, 64, 128, 256, 512],
            leaky_slope: 0.2,
            norm_epsilon: 1e-5,
            generator_norm: GeneratorNorm::None,
        }
    }
}

/// Deployed discriminator parameter budget.
pub const DISCRIMINATOR_PARAM_BUDGET: usize = 4_500_000;

impl ArchitectureConfig {
    /// A small configuration for tests and smoke runs (16x16 patches).
    pub fn toy() -> Self {
        ArchitectureConfig {
            patch_size: 16,
            latent_dim: 8,
            encoder_channels: vec![4, 8],
            decoder_channels: vec![8, 8, 4],
            discriminator_channels: vec![4, 8],
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(format!("architecture: {m}")));
        if self.patch_size == 0 || self.latent_dim == 0 {
            return bad("patch_size and latent_dim must be positive".into());
        }
        if self.encoder_channels.is_empty()
            || self.decoder_channels.is_empty()
            || self.discriminator_channels.is_empty()
        {
            return bad("every network needs at least one stage".into());
        }
        let all = self
            .encoder_channels
            .iter()
            .chain(&self.decoder_channels)
            .chain(&self.discriminator_channels);
        if all.clone().any(|&c| c == 0) {
            return bad("channel counts must be positive".into());
        }
        for (name, stages) in [
            ("encoder", self.encoder_channels.len()),
            ("decoder", self.decoder_channels.len() - 1),
            ("discriminator", self.discriminator_channels.len()),
        ] {
            if stages >= usize::BITS as usize || self.patch_size % (1usize << stages) != 0 {
                return bad(format!(
                    "patch_size {} is not divisible by 2^{stages} ({name})",
                    self.patch_size
                ));
            }
        }
        if !(self.leaky_slope.is_finite() && self.leaky_slope >= 0.0) {
            return bad(format!("leaky_slope {}", self.leaky_slope));
        }
        if !(self.norm_epsilon.is_finite() && self.norm_epsilon > 0.0) {
            return bad(format!("norm_epsilon {}", self.norm_epsilon));
        }
        Ok(())
    }

    fn encoder_final(&self) -> usize {
        self.patch_size >> self.encoder_channels.len()
    }

    fn decoder_base(&self) -> usize {
        self.patch_size >> (self.decoder_channels.len() - 1)
    }

    fn discriminator_final(&self) -> usize {
        self.patch_size >> self.discriminator_channels.len()
    }

    /// Parameter counts implied by the configuration alone.
    pub fn parameter_counts(&self) -> ParameterCount {
        let conv = |i: usize, o: usize, k: usize, bias: bool| i * o * k * k + if bias { o } else { 0 };
        let mut enc = 0;
        let mut c = 1;
        for &o in &self.encoder_channels {
            enc += conv(c, o, 3, true);
            c = o;
        }
        let f = c * self.encoder_final().pow(2);
        enc += 2 * (f * self.latent_dim + self.latent_dim);

        let b = self.decoder_base();
        let c0 = self.decoder_channels[0];
        let mut dec = self.latent_dim * c0 * b * b + c0 * b * b;
        for w in self.decoder_channels.windows(2) {
            dec += conv(w[0], w[1], 3, true);
        }
        dec += conv(*self.decoder_channels.last().unwrap(), 1, 3, true);

        let mut disc = 0;
        let mut c = 1;
        for &o in &self.discriminator_channels {
            disc += conv(c, o, 4, false) + 2 * o;
            c = o;
        }
        disc += c * self.discriminator_final().pow(2) + 1;
        ParameterCount {
            encoder: enc,
            decoder: dec,
            discriminator: disc,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParameterCount {
    pub encoder: usize,
    pub decoder: usize,
    pub discriminator: usize,
}

impl ParameterCount {
    pub fn total(&self) -> usize {
        self.encoder + self.decoder + self.discriminator
    }
}

// Default PyTorch initialization: uniform in +-1/sqrt(fan_in) for weights and
// biases alike.
fn init_bound(fan_in: usize) -> f64 {
    1.0 / (fan_in as f64).sqrt()
}

#[derive(Debug, Clone)]
pub struct Conv<T> {
    pub geometry: ConvGeometry,
    pub weight: Param<T>,
    pub bias: Option<Param<T>>,
}

impl<T: Real> Conv<T> {
    fn new(name: &str, geometry: ConvGeometry, bias: bool, rng: &mut Rng) -> Self {
        let g = geometry;
        let bound = init_bound(g.in_ch * g.kernel * g.kernel);
        Conv {
            geometry,
            weight: Param::uniform(
                format!("{name}.weight"),
                &[g.out_ch, g.in_ch, g.kernel, g.kernel],
                bound,
                rng,
            ),
            bias: bias.then(|| Param::uniform(format!("{name}.bias"), &[g.out_ch], bound, rng)),
        }
    }

    fn forward(&self, x: &Tensor<T>) -> Tensor<T> {
        conv2d_forward(
            x,
            &self.weight.value,
            self.bias.as_ref().map(|b| b.value.as_slice()),
            &self.geometry,
        )
    }

    fn backward(&mut self, x: &Tensor<T>, dy: &Tensor<T>, params: bool, need_dx: bool) -> Option<Tensor<T>> {
        let (dw, db) = if params {
            (
                Some(self.weight.grad.as_mut_slice()),
                self.bias.as_mut().map(|b| b.grad.as_mut_slice()),
            )
        } else {
            (None, None)
        };
        conv2d_backward(x, &self.weight.value, dy, &self.geometry, dw, db, need_dx)
    }

    fn params(&self) -> Vec<&Param<T>> {
        std::iter::once(&self.weight).chain(self.bias.as_ref()).collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        std::iter::once(&mut self.weight).chain(self.bias.as_mut()).collect()
    }
}

/// Fully connected layer, weight stored `out x in`.
#[derive(Debug, Clone)]
pub struct Linear<T> {
    pub weight: Param<T>,
    pub bias: Param<T>,
    pub in_features: usize,
    pub out_features: usize,
}

impl<T: Real> Linear<T> {
    fn new(name: &str, in_features: usize, out_features: usize, rng: &mut Rng) -> Self {
        let bound = init_bound(in_features);
        Linear {
            weight: Param::uniform(format!("{name}.weight"), &[out_features, in_features], bound, rng),
            bias: Param::uniform(format!("{name}.bias"), &[out_features], bound, rng),
            in_features,
            out_features,
        }
    }

    fn forward(&self, x: &[T], n: usize) -> Vec<T> {
        linear_forward(
            x,
            n,
            &self.weight.value,
            Some(&self.bias.value),
            self.in_features,
            self.out_features,
        )
    }

    fn backward(&mut self, x: &[T], n: usize, dy: &[T], params: bool, need_dx: bool) -> Option<Vec<T>> {
        let (dw, db) = if params {
            (Some(self.weight.grad.as_mut_slice()), Some(self.bias.grad.as_mut_slice()))
        } else {
            (None, None)
        };
        linear_backward(
            x,
            n,
            &self.weight.value,
            dy,
            self.in_features,
            self.out_features,
            dw,
            db,
            need_dx,
        )
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        vec![&mut self.weight, &mut self.bias]
    }
}

#[derive(Debug, Clone)]
pub struct Encoder<T> {
    pub convs: Vec<Conv<T>>,
    pub mu: Linear<T>,
    pub logvar: Linear<T>,
    slope: T,
}

#[derive(Debug, Clone)]
pub struct EncoderCache<T> {
    inputs: Vec<Tensor<T>>,
    pre: Vec<Tensor<T>>,
    feat: Vec<T>,
}

impl<T: Real> Encoder<T> {
    fn new(cfg: &ArchitectureConfig, rng: &mut Rng) -> Self {
        let mut c = 1;
        let mut convs = Vec::new();
        for (i, &o) in cfg.encoder_channels.iter().enumerate() {
            let g = ConvGeometry {
                in_ch: c,
                out_ch: o,
                kernel: 3,
                stride: 2,
                pad: 1,
            };
            convs.push(Conv::new(&format!("encoder.conv{i}"), g, true, rng));
            c = o;
        }
        let f = c * cfg.encoder_final().pow(2);
        Encoder {
            convs,
            mu: Linear::new("encoder.mu", f, cfg.latent_dim, rng),
            logvar: Linear::new("encoder.logvar", f, cfg.latent_dim, rng),
            slope: T::lit(cfg.leaky_slope),
        }
    }

    /// Returns `(mu, logvar)`, each `K x latent_dim` row-major.
    pub fn forward(&self, x: &Tensor<T>) -> (Vec<T>, Vec<T>, EncoderCache<T>) {
        let n = x.batch();
        let mut inputs = Vec::with_capacity(self.convs.len());
        let mut pre = Vec::with_capacity(self.convs.len());
        let mut a = x.clone();
        for conv in &self.convs {
            let p = conv.forward(&a);
            let next = leaky_relu_forward(&p, self.slope);
            inputs.push(std::mem::replace(&mut a, next));
            pre.push(p);
        }
        let feat = a.data;
        let mu = self.mu.forward(&feat, n);
        let logvar = self.logvar.forward(&feat, n);
        (mu, logvar, EncoderCache { inputs, pre, feat })
    }

    /// Accumulates parameter gradients; the input gradient is not needed.
    pub fn backward(&mut self, cache: &EncoderCache<T>, dmu: &[T], dlogvar: &[T]) {
        let n = cache.inputs[0].batch();
        let mut dfeat = self.mu.backward(&cache.feat, n, dmu, true, true).unwrap();
        let d2 = self.logvar.backward(&cache.feat, n, dlogvar, true, true).unwrap();
        dfeat.iter_mut().zip(d2).for_each(|(a, b)| *a += b);
        let last = cache.pre.last().unwrap();
        let mut da = Tensor::from_vec(last.shape, dfeat);
        for i in (0..self.convs.len()).rev() {
            let dp = leaky_relu_backward(&cache.pre[i], &da, self.slope);
            match self.convs[i].backward(&cache.inputs[i], &dp, true, i > 0) {
                Some(dx) => da = dx,
                None => break,
            }
        }
    }

    pub fn params(&self) -> Vec<&Param<T>> {
        let mut v: Vec<&Param<T>> = self.convs.iter().flat_map(Conv::params).collect();
        v.extend([&self.mu.weight, &self.mu.bias, &self.logvar.weight, &self.logvar.bias]);
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut v: Vec<&mut Param<T>> = self.convs.iter_mut().flat_map(Conv::params_mut).collect();
        v.extend(self.mu.params_mut());
        v.extend(self.logvar.params_mut());
        v
    }
}

#[derive(Debug, Clone)]
pub struct Decoder<T> {
    pub fc: Linear<T>,
    pub convs: Vec<Conv<T>>,
    pub out: Conv<T>,
    base: usize,
    base_channels: usize,
    patch_size: usize,
    slope: T,
}

#[derive(Debug, Clone)]
pub struct DecoderCache<T> {
    z: Vec<T>,
    pre0: Tensor<T>,
    ups: Vec<Tensor<T>>,
    pre: Vec<Tensor<T>>,
    last: Tensor<T>,
    y: Tensor<T>,
}

impl<T: Real> Decoder<T> {
    fn new(cfg: &ArchitectureConfig, rng: &mut Rng) -> Self {
        let base = cfg.decoder_base();
        let c0 = cfg.decoder_channels[0];
        let fc = Linear::new("decoder.fc", cfg.latent_dim, c0 * base * base, rng);
        let convs = cfg
            .decoder_channels
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                let g = ConvGeometry {
                    in_ch: w[0],
                    out_ch: w[1],
                    kernel: 3,
                    stride: 1,
                    pad: 1,
                };
                Conv::new(&format!("decoder.conv{i}"), g, true, rng)
            })
            .collect();
        let g = ConvGeometry {
            in_ch: *cfg.decoder_channels.last().unwrap(),
            out_ch: 1,
            kernel: 3,
            stride: 1,
            pad: 1,
        };
        Decoder {
            fc,
            convs,
            out: Conv::new("decoder.out", g, true, rng),
            base,
            base_channels: c0,
            patch_size: cfg.patch_size,
            slope: T::lit(cfg.leaky_slope),
        }
    }

    /// `z` is `K x latent_dim`; returns `K x 1 x S x S` in (0, 1).
    pub fn forward(&self, z: &[T], n: usize) -> (Tensor<T>, DecoderCache<T>) {
        let h = self.fc.forward(z, n);
        let pre0 = Tensor::from_vec([n, self.base_channels, self.base, self.base], h);
        let mut a = leaky_relu_forward(&pre0, self.slope);
        let mut ups = Vec::with_capacity(self.convs.len());
        let mut pre = Vec::with_capacity(self.convs.len());
        for conv in &self.convs {
            let u = upsample2x_forward(&a);
            let p = conv.forward(&u);
            a = leaky_relu_forward(&p, self.slope);
            ups.push(u);
            pre.push(p);
        }
        let mut y = self.out.forward(&a);
        y.data.iter_mut().for_each(|v| *v = sigmoid(*v));
        debug_assert_eq!(y.shape, [n, 1, self.patch_size, self.patch_size]);
        let cache = DecoderCache {
            z: z.to_vec(),
            pre0,
            ups,
            pre,
            last: a,
            y: y.clone(),
        };
        (y, cache)
    }

    /// Accumulates parameter gradients and returns the latent gradient.
    pub fn backward(&mut self, cache: &DecoderCache<T>, dy: &Tensor<T>) -> Vec<T> {
        let n = cache.y.batch();
        let mut dout = dy.clone();
        for (d, &y) in dout.data.iter_mut().zip(&cache.y.data) {
            *d = flush(*d * y * (T::one() - y));
        }
        let mut da = self.out.backward(&cache.last, &dout, true, true).unwrap();
        for i in (0..self.convs.len()).rev() {
            flush_subnormals(&mut da.data);
            let dp = leaky_relu_backward(&cache.pre[i], &da, self.slope);
            let du = self.convs[i].backward(&cache.ups[i], &dp, true, true).unwrap();
            da = upsample2x_backward(&du);
        }
        flush_subnormals(&mut da.data);
        let dpre0 = leaky_relu_backward(&cache.pre0, &da, self.slope);
        self.fc.backward(&cache.z, n, &dpre0.data, true, true).unwrap()
    }

    pub fn params(&self) -> Vec<&Param<T>> {
        let mut v = vec![&self.fc.weight, &self.fc.bias];
        v.extend(self.convs.iter().flat_map(Conv::params));
        v.extend(self.out.params());
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut v = self.fc.params_mut();
        v.extend(self.convs.iter_mut().flat_map(Conv::params_mut));
        v.extend(self.out.params_mut());
        v
    }
}

#[derive(Debug, Clone)]
pub struct Discriminator<T> {
    pub convs: Vec<Conv<T>>,
    pub gamma: Vec<Param<T>>,
    pub beta: Vec<Param<T>>,
    pub head: Linear<T>,
    patch_size: usize,
    slope: T,
    eps: T,
}

/// Intermediates of one discriminator pass.
#[derive(Debug, Clone)]
pub struct DiscriminatorCache<T> {
    inputs: Vec<Tensor<T>>,
    norm: Vec<BatchNormCache<T>>,
    /// Output of each normalization layer (after the affine map).
    pub normalized: Vec<Tensor<T>>,
    feat: Vec<T>,
}

impl<T: Real> DiscriminatorCache<T> {
    /// Standardized activations of each normalization layer, before the
    /// affine scale and shift.
    pub fn standardized(&self) -> impl Iterator<Item = &Tensor<T>> {
        self.norm.iter().map(|c| &c.xhat)
    }
}

impl<T: Real> Discriminator<T> {
    fn new(cfg: &ArchitectureConfig, rng: &mut Rng) -> Self {
        let mut c = 1;
        let mut convs = Vec::new();
        let mut gamma = Vec::new();
        let mut beta = Vec::new();
        for (i, &o) in cfg.discriminator_channels.iter().enumerate() {
            let g = ConvGeometry {
                in_ch: c,
                out_ch: o,
                kernel: 4,
                stride: 2,
                pad: 1,
            };
            convs.push(Conv::new(&format!("discriminator.conv{i}"), g, false, rng));
            gamma.push(Param::filled(format!("discriminator.norm{i}.gamma"), &[o], T::one()));
            beta.push(Param::zeros(format!("discriminator.norm{i}.beta"), &[o]));
            c = o;
        }
        let f = c * cfg.discriminator_final().pow(2);
        Discriminator {
            convs,
            gamma,
            beta,
            head: Linear::new("discriminator.head", f, 1, rng),
            patch_size: cfg.patch_size,
            slope: T::lit(cfg.leaky_slope),
            eps: T::lit(cfg.norm_epsilon),
        }
    }

    pub fn patch_size(&self) -> usize {
        self.patch_size
    }

    /// Per-patch logits. Normalization uses the statistics of `x` itself.
    pub fn forward(&self, x: &Tensor<T>) -> (Vec<T>, DiscriminatorCache<T>) {
        let n = x.batch();
        let layers = self.convs.len();
        let mut inputs = Vec::with_capacity(layers);
        let mut norm = Vec::with_capacity(layers);
        let mut normalized = Vec::with_capacity(layers);
        let mut a = x.clone();
        for i in 0..layers {
            let p = self.convs[i].forward(&a);
            let (q, c) = batch_norm_forward(&p, &self.gamma[i].value, &self.beta[i].value, self.eps);
            let next = leaky_relu_forward(&q, self.slope);
            inputs.push(std::mem::replace(&mut a, next));
            norm.push(c);
            normalized.push(q);
        }
        let feat = a.data;
        let logits = self.head.forward(&feat, n);
        (
            logits,
            DiscriminatorCache {
                inputs,
                norm,
                normalized,
                feat,
            },
        )
    }

    /// Logits only, dropping intermediates as soon as they are consumed.
    pub fn logits(&self, x: &Tensor<T>) -> Vec<T> {
        let n = x.batch();
        let mut a = x.clone();
        for i in 0..self.convs.len() {
            let p = self.convs[i].forward(&a);
            let (q, _) = batch_norm_forward(&p, &self.gamma[i].value, &self.beta[i].value, self.eps);
            a = leaky_relu_forward(&q, self.slope);
        }
        self.head.forward(&a.data, n)
    }

    /// Backward from logit gradients. Parameter gradients are accumulated
    /// only when `params` is set; the input gradient is always returned.
    pub fn backward(&mut self, cache: &DiscriminatorCache<T>, dlogits: &[T], params: bool) -> Tensor<T> {
        let n = cache.inputs[0].batch();
        let dfeat = self.head.backward(&cache.feat, n, dlogits, params, true).unwrap();
        let last = cache.normalized.last().unwrap();
        let mut da = Tensor::from_vec(last.shape, dfeat);
        for i in (0..self.convs.len()).rev() {
            let dq = leaky_relu_backward(&cache.normalized[i], &da, self.slope);
            let gamma = &mut self.gamma[i];
            let (dg, db) = if params {
                (Some(gamma.grad.as_mut_slice()), Some(self.beta[i].grad.as_mut_slice()))
            } else {
                (None, None)
            };
            let dp = batch_norm_backward(&dq, &cache.norm[i], &gamma.value, dg, db);
            da = self.convs[i].backward(&cache.inputs[i], &dp, params, true).unwrap();
        }
        da
    }

    pub fn params(&self) -> Vec<&Param<T>> {
        let mut v = Vec::new();
        for i in 0..self.convs.len() {
            v.extend(self.convs[i].params());
            v.push(&self.gamma[i]);
            v.push(&self.beta[i]);
        }
        v.extend([&self.head.weight, &self.head.bias]);
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut v = Vec::new();
        for ((conv, g), b) in self.convs.iter_mut().zip(&mut self.gamma).zip(&mut self.beta) {
            v.extend(conv.params_mut());
            v.push(g);
            v.push(b);
        }
        v.extend(self.head.params_mut());
        v
    }
}

#[derive(Debug, Clone)]
pub struct Generator<T> {
    pub encoder: Encoder<T>,
    pub decoder: Decoder<T>,
}

/// Full model. The generator is absent when only the deployed discriminator
/// was loaded.
#[derive(Debug, Clone)]
pub struct AdverxModel<T = f32> {
    pub config: ArchitectureConfig,
    pub generator: Option<Generator<T>>,
    pub discriminator: Discriminator<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiscriminatorOutput {
    pub logits: Vec<f32>,
    pub probabilities: Vec<f32>,
}

/// `z = mu + exp(0.5 * logvar) * eps`, with `logvar` clamped before
/// exponentiation.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentCode<T> {
    pub mu: Vec<T>,
    pub logvar: Vec<T>,
    pub eps: Vec<T>,
    pub z: Vec<T>,
}

pub const LOGVAR_MIN: f64 = -30.0;
pub const LOGVAR_MAX: f64 = 20.0;

pub fn clamp_logvar<T: Real>(lv: T) -> T {
    lv.max(T::lit(LOGVAR_MIN)).min(T::lit(LOGVAR_MAX))
}

pub fn reparameterize<T: Real>(mu: &[T], logvar: &[T], rng_seed: u64) -> Result<LatentCode<T>> {
    if mu.len() != logvar.len() {
        return Err(Error::Shape(format!(
            "mu has {} entries, logvar {}",
            mu.len(),
            logvar.len()
        )));
    }
    let eps: Vec<T> = rng::normals(&mut rng::stream(rng_seed), mu.len())
        .into_iter()
        .map(T::lit)
        .collect();
    let half = T::lit(0.5);
    let z = mu
        .iter()
        .zip(logvar)
        .zip(&eps)
        .map(|((&m, &lv), &e)| m + (half * clamp_logvar(lv)).exp() * e)
        .collect();
    Ok(LatentCode {
        mu: mu.to_vec(),
        logvar: logvar.to_vec(),
        eps,
        z,
    })
}

/// `n x latent_dim` standard-normal draws.
pub fn sample_prior<T: Real>(n: usize, latent_dim: usize, rng_seed: u64) -> Result<Vec<T>> {
    if n == 0 {
        return Err(Error::InvalidArgument("n must be at least 1".into()));
    }
    Ok(rng::normals(&mut rng::stream(rng_seed), n * latent_dim)
        .into_iter()
        .map(T::lit)
        .collect())
}

/// Patches as an `K x 1 x S x S` tensor.
pub fn batch_tensor<T: Real>(batch: &PatchBatch) -> Tensor<T> {
    let s = batch.patch_size();
    Tensor::from_vec(
        [batch.len(), 1, s, s],
        batch.data().iter().map(|&v| T::lit(f64::from(v))).collect(),
    )
}

impl<T: Real> AdverxModel<T> {
    pub fn new(config: ArchitectureConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut r_enc = rng::stream(rng::derive(seed, &[0]));
        let mut r_dec = rng::stream(rng::derive(seed, &[1]));
        let mut r_disc = rng::stream(rng::derive(seed, &[2]));
        Ok(AdverxModel {
            generator: Some(Generator {
                encoder: Encoder::new(&config, &mut r_enc),
                decoder: Decoder::new(&config, &mut r_dec),
            }),
            discriminator: Discriminator::new(&config, &mut r_disc),
            config,
        })
    }

    /// A model holding only a freshly initialized discriminator.
    pub fn discriminator_only(config: ArchitectureConfig, seed: u64) -> Result<Self> {
        let mut m = Self::new(config, seed)?;
        m.generator = None;
        Ok(m)
    }

    pub fn generator(&self) -> Result<&Generator<T>> {
        self.generator
            .as_ref()
            .ok_or_else(|| Error::InvalidArgument("model holds only the discriminator".into()))
    }

    pub fn generator_mut(&mut self) -> Result<&mut Generator<T>> {
        self.generator
            .as_mut()
            .ok_or_else(|| Error::InvalidArgument("model holds only the discriminator".into()))
    }

    fn check_batch(&self, batch: &PatchBatch) -> Result<()> {
        if batch.patch_size() != self.config.patch_size {
            return Err(Error::Shape(format!(
                "patches are {0}x{0}, model expects {1}x{1}",
                batch.patch_size(),
                self.config.patch_size
            )));
        }
        if batch.is_empty() {
            return Err(Error::Shape("empty batch".into()));
        }
        Ok(())
    }

    /// Returns `(mu, logvar)`, each `K x latent_dim`.
    pub fn encode(&self, batch: &PatchBatch) -> Result<(Vec<T>, Vec<T>)> {
        self.check_batch(batch)?;
        let (mu, lv, _) = self.generator()?.encoder.forward(&batch_tensor(batch));
        Ok((mu, lv))
    }

    /// Returns `K x S x S` reconstructions in (0, 1).
    pub fn decode(&self, z: &[T]) -> Result<Vec<T>> {
        let l = self.config.latent_dim;
        if z.is_empty() || z.len() % l != 0 {
            return Err(Error::Shape(format!("{} latent values for latent_dim {l}", z.len())));
        }
        let (y, _) = self.generator()?.decoder.forward(z, z.len() / l);
        Ok(y.data)
    }

    pub fn discriminate(&self, batch: &PatchBatch) -> Result<DiscriminatorOutput> {
        self.check_batch(batch)?;
        self.discriminate_patches(batch.data(), batch.len())
    }

    pub fn parameter_count(&self) -> ParameterCount {
        let sum = |v: Vec<&Param<T>>| v.iter().map(|p| p.len()).sum();
        let (encoder, decoder) = match &self.generator {
            Some(g) => (sum(g.encoder.params()), sum(g.decoder.params())),
            None => (0, 0),
        };
        ParameterCount {
            encoder,
            decoder,
            discriminator: sum(self.discriminator.params()),
        }
    }

    /// All parameters, discriminator first.
    pub fn params(&self) -> Vec<&Param<T>> {
        let mut v = self.discriminator.params();
        if let Some(g) = &self.generator {
            v.extend(g.encoder.params());
            v.extend(g.decoder.params());
        }
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut v = self.discriminator.params_mut();
        if let Some(g) = &mut self.generator {
            v.extend(g.encoder.params_mut());
            v.extend(g.decoder.params_mut());
        }
        v
    }

    /// Same model in another precision.
    pub fn cast<U: Real>(&self) -> AdverxModel<U> {
        let mut out = AdverxModel::<U>::new(self.config.clone(), 0).expect("validated config");
        if self.generator.is_none() {
            out.generator = None;
        }
        for (dst, src) in out.params_mut().into_iter().zip(self.params()) {
            *dst = src.cast();
        }
        out
    }

    pub fn discriminate_patches(&self, patches: &[f32], k: usize) -> Result<DiscriminatorOutput> {
        let s = self.config.patch_size;
        if k < 2 {
            return Err(Error::BatchTooSmall(k));
        }
        if patches.len() != k * s * s {
            return Err(Error::Shape(format!(
                "{} values for {k} patches of {s}x{s}",
                patches.len()
            )));
        }
        let x = Tensor::from_vec([k, 1, s, s], patches.iter().map(|&v| T::lit(f64::from(v))).collect());
        let logits = self.discriminator.logits(&x);
        if logits.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("non-finite discriminator logits".into()));
        }
        let logits: Vec<f32> = logits.iter().map(|v| v.as_f64() as f32).collect();
        let probabilities = logits.iter().map(|&l| sigmoid(l)).collect();
        Ok(DiscriminatorOutput {
            logits,
            probabilities,
        })
    }
}

/// Anything that maps a batch of same-sized patches to per-patch logits
/// using statistics of that batch.
pub trait PatchDiscriminator: Sync {
    fn patch_size(&self) -> usize;

    /// `patches` holds `k` row-major `S x S` patches.
    fn discriminate_patches(&self, patches: &[f32], k: usize) -> Result<DiscriminatorOutput>;
}

impl<T: Real> PatchDiscriminator for AdverxModel<T> {
    fn patch_size(&self) -> usize {
        self.config.patch_size
    }

    fn discriminate_patches(&self, patches: &[f32], k: usize) -> Result<DiscriminatorOutput> {
        AdverxModel::discriminate_patches(self, patches, k)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::Scan;
    use crate::patching::sample_patches;

    fn toy_batch(k: usize, seed: u64) -> PatchBatch {
        let px: Vec<f32> = rng::normals(&mut rng::stream(seed), 64 * 64)
            .into_iter()
            .map(|v| (0.5 + 0.15 * v).clamp(0.0, 1.0) as f32)
            .collect();
        let scan = Scan::new(px, 64, 64, 16).unwrap();
        sample_patches(&scan, k, 16, 0.0, seed).unwrap()
    }

    #[test]
    fn default_parameter_counts() {
        let cfg = ArchitectureConfig::default();
        let c = cfg.parameter_counts();
        assert_eq!(c.discriminator, 2_795_969);
        assert!(c.discriminator <= DISCRIMINATOR_PARAM_BUDGET);
        let m = AdverxModel::<f32>::new(cfg, 0).unwrap();
        assert_eq!(m.parameter_count(), c);
    }

    #[test]
    fn single_conv_parameter_count() {
        let mut r = rng::stream(0);
        let g = ConvGeometry { in_ch: 1, out_ch: 8, kernel: 3, stride: 1, pad: 1 };
        let c = Conv::<f32>::new("c", g, true, &mut r);
        assert_eq!(c.params().iter().map(|p| p.len()).sum::<usize>(), 80);
    }

    #[test]
    fn doubling_widths_roughly_quadruples_discriminator() {
        let cfg = ArchitectureConfig::default();
        let mut wide = cfg.clone();
        wide.discriminator_channels.iter_mut().for_each(|c| *c *= 2);
        let ratio = wide.parameter_counts().discriminator as f64 / cfg.parameter_counts().discriminator as f64;
        assert!((3.7..4.1).contains(&ratio), "{ratio}");
    }

    #[test]
    fn validation_rejects_indivisible_patch_size() {
        let cfg = ArchitectureConfig { patch_size: 100, ..ArchitectureConfig::default() };
        assert!(cfg.validate().is_err());
        let cfg = ArchitectureConfig { latent_dim: 0, ..ArchitectureConfig::toy() };
        assert!(cfg.validate().is_err());
        ArchitectureConfig::toy().validate().unwrap();
    }

    #[test]
    fn shapes_follow_the_config() {
        let m = AdverxModel::<f32>::new(ArchitectureConfig::toy(), 1).unwrap();
        let b = toy_batch(6, 2);
        let (mu, lv) = m.encode(&b).unwrap();
        assert_eq!((mu.len(), lv.len()), (6 * 8, 6 * 8));
        let y = m.decode(&mu).unwrap();
        assert_eq!(y.len(), b.data().len());
        assert!(y.iter().all(|&v| v > 0.0 && v < 1.0));
        let d = m.discriminate(&b).unwrap();
        assert_eq!(d.logits.len(), 6);
        for (l, p) in d.logits.iter().zip(&d.probabilities) {
            assert_eq!(*p, sigmoid(*l));
        }
        let wrong = PatchBatch::from_raw(vec![0.5; 2 * 64], 8, "x").unwrap();
        assert!(matches!(m.encode(&wrong), Err(Error::Shape(_))));
        assert!(matches!(m.decode(&[0.0; 7]), Err(Error::Shape(_))));
    }

    #[test]
    fn zeroed_final_layers() {
        let mut m = AdverxModel::<f64>::new(ArchitectureConfig::toy(), 3).unwrap();
        {
            let g = m.generator_mut().unwrap();
            for p in g.encoder.mu.params_mut().into_iter().chain(g.encoder.logvar.params_mut()) {
                p.value.iter_mut().for_each(|v| *v = 0.0);
            }
            for p in g.decoder.out.params_mut() {
                p.value.iter_mut().for_each(|v| *v = 0.0);
            }
        }
        let (mu, lv) = m.encode(&toy_batch(3, 4)).unwrap();
        assert!(mu.iter().chain(&lv).all(|&v| v == 0.0));
        let z = sample_prior::<f64>(2, 8, 5).unwrap();
        assert!(m.decode(&z).unwrap().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn duplicated_inputs_give_duplicated_rows() {
        let m = AdverxModel::<f32>::new(ArchitectureConfig::toy(), 1).unwrap();
        let one = toy_batch(1, 7);
        let mut data = one.data().to_vec();
        data.extend_from_slice(one.data());
        let b = PatchBatch::from_raw(data, 16, "dup").unwrap();
        let (mu, lv) = m.encode(&b).unwrap();
        assert_eq!(mu[..8], mu[8..]);
        assert_eq!(lv[..8], lv[8..]);
        let z = [mu[..8].to_vec(), mu[..8].to_vec()].concat();
        let y = m.decode(&z).unwrap();
        assert_eq!(y[..256], y[256..]);
    }

    #[test]
    fn reparameterization() {
        let mu = vec![0.25f64; 4];
        let lv = vec![-80.0; 4];
        let c = reparameterize(&mu, &lv, 1).unwrap();
        // logvar is clamped at -30, so the spread is exp(-15) * |eps|.
        for (z, e) in c.z.iter().zip(&c.eps) {
            assert!((z - 0.25).abs() <= (-15.0f64).exp() * e.abs() + 1e-15);
        }
        let c = reparameterize(&[0.0f64; 5], &[0.0; 5], 9).unwrap();
        assert_eq!(c.z, c.eps);
        assert_eq!(c.eps, rng::normals(&mut rng::stream(9), 5));

        let n = 100_000;
        let c = reparameterize(&vec![0.0f64; n], &vec![4.0f64.ln(); n], 3).unwrap();
        let mean = c.z.iter().sum::<f64>() / n as f64;
        let var = c.z.iter().map(|z| (z - mean).powi(2)).sum::<f64>() / n as f64;
        assert!((var - 4.0).abs() < 0.2, "{var}");
        assert!(reparameterize(&[0.0f64], &[0.0, 1.0], 0).is_err());
    }

    #[test]
    fn prior_draws() {
        let n = 100_000;
        let z = sample_prior::<f64>(n, 2, 11).unwrap();
        for d in 0..2 {
            let m = z.iter().skip(d).step_by(2).sum::<f64>() / n as f64;
            assert!(m.abs() < 0.02);
        }
        assert_eq!(z, sample_prior::<f64>(n, 2, 11).unwrap());
        assert_eq!(sample_prior::<f32>(1, 8, 0).unwrap().len(), 8);
        assert!(sample_prior::<f32>(0, 8, 0).is_err());
    }

    #[test]
    fn discriminator_uses_batch_statistics() {
        let m = AdverxModel::<f64>::new(ArchitectureConfig::toy(), 5).unwrap();
        let b = toy_batch(8, 1);
        assert!(matches!(
            m.discriminate_patches(&b.data()[..256], 1),
            Err(Error::BatchTooSmall(1))
        ));
        let base = m.discriminate(&b).unwrap();
        // Half the companions replaced by heavily noised patches.
        let noise = rng::normals(&mut rng::stream(99), 4 * 256);
        let mut mixed = b.data().to_vec();
        for (i, v) in mixed[4 * 256..].iter_mut().enumerate() {
            *v = (*v as f64 + 0.5 * noise[i]).clamp(0.0, 1.0) as f32;
        }
        let other = m.discriminate_patches(&mixed, 8).unwrap();
        assert!((base.probabilities[0] - other.probabilities[0]).abs() > 1e-6);
        assert_eq!(base, m.discriminate(&b).unwrap());
    }

    #[test]
    fn identical_patches_and_permutations() {
        let m = AdverxModel::<f32>::new(ArchitectureConfig::toy(), 2).unwrap();
        let one = toy_batch(1, 3);
        let same = PatchBatch::from_raw(one.data().repeat(5), 16, "s").unwrap();
        let out = m.discriminate(&same).unwrap();
        assert!(out.probabilities.iter().all(|&p| p == out.probabilities[0]));

        let b = toy_batch(6, 8);
        let perm = [3usize, 0, 5, 1, 4, 2];
        let permuted: Vec<f32> = perm.iter().flat_map(|&i| b.patch(i).to_vec()).collect();
        let a = m.discriminate(&b).unwrap();
        let p = m.discriminate_patches(&permuted, 6).unwrap();
        for (j, &i) in perm.iter().enumerate() {
            assert_eq!(p.logits[j], a.logits[i]);
        }
    }

    #[test]
    fn normalized_activations_are_standardized() {
        let m = AdverxModel::<f64>::new(ArchitectureConfig::toy(), 4).unwrap();
        let (_, cache) = m.discriminator.forward(&batch_tensor(&toy_batch(5, 6)));
        let eps = ArchitectureConfig::toy().norm_epsilon;
        for (t, stats) in cache.standardized().zip(&cache.norm) {
            let [n, c, h, w] = t.shape;
            for ch in 0..c {
                let vals: Vec<f64> = (0..n)
                    .flat_map(|b| t.data[(b * c + ch) * h * w..(b * c + ch + 1) * h * w].to_vec())
                    .collect();
                let mean = vals.iter().sum::<f64>() / vals.len() as f64;
                let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
                assert!(mean.abs() < 1e-9);
                // Unit variance up to the epsilon in the denominator.
                let expected = stats.var[ch] / (stats.var[ch] + eps);
                assert!((var - expected).abs() < 1e-9, "{var} vs {expected}");
                assert!((var - 1.0).abs() < eps / stats.var[ch]);
            }
        }
    }

    #[test]
    fn cast_round_trip_preserves_parameters() {
        let m = AdverxModel::<f32>::new(ArchitectureConfig::toy(), 4).unwrap();
        let back: AdverxModel<f32> = m.cast::<f64>().cast();
        for (a, b) in m.params().iter().zip(back.params()) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.value, b.value);
        }
    }

    // Finite-difference checks of every backward pass in f64.
    fn fd_check(f: impl Fn(&mut AdverxModel<f64>) -> f64, grads: impl Fn(&mut AdverxModel<f64>), m: &mut AdverxModel<f64>) {
        for p in m.params_mut() {
            p.zero_grad();
        }
        grads(m);
        let analytic: Vec<(String, Vec<f64>)> = m.params().iter().map(|p| (p.name.clone(), p.grad.clone())).collect();
        // Small enough that few pre-activations cross a leaky-ReLU kink.
        let h = 1e-6;
        let count = analytic.len();
        for pi in 0..count {
            let len = analytic[pi].1.len();
            for &j in &[0, len / 2, len - 1] {
                let orig = m.params()[pi].value[j];
                m.params_mut()[pi].value[j] = orig + h;
                let up = f(m);
                m.params_mut()[pi].value[j] = orig - h;
                let down = f(m);
                m.params_mut()[pi].value[j] = orig;
                let fd = (up - down) / (2.0 * h);
                let an = analytic[pi].1[j];
                assert!(
                    (fd - an).abs() <= 1e-4 * (1.0 + fd.abs().max(an.abs())),
                    "{}[{j}]: fd {fd} vs analytic {an}",
                    analytic[pi].0
                );
            }
        }
    }

    #[test]
    fn discriminator_gradients_match_finite_differences() {
        let mut m = AdverxModel::<f64>::new(ArchitectureConfig::toy(), 7).unwrap();
        m.generator = None;
        let x = batch_tensor::<f64>(&toy_batch(4, 3));
        let wts = [0.3, -1.2, 0.7, 2.0];
        let loss = |m: &mut AdverxModel<f64>| {
            let l = m.discriminator.logits(&x);
            l.iter().zip(&wts).map(|(a, b)| a * b).sum::<f64>()
        };
        let grads = |m: &mut AdverxModel<f64>| {
            let (_, c) = m.discriminator.forward(&x);
            m.discriminator.backward(&c, &wts, true);
        };
        fd_check(loss, grads, &mut m);

        // Input gradient.
        let (_, c) = m.discriminator.forward(&x);
        let dx = m.discriminator.backward(&c, &wts, false);
        for &i in &[0usize, 100, 700] {
            let mut xp = x.clone();
            xp.data[i] += 1e-5;
            let mut xm = x.clone();
            xm.data[i] -= 1e-5;
            let f = |t: &Tensor<f64>| m.discriminator.logits(t).iter().zip(&wts).map(|(a, b)| a * b).sum::<f64>();
            let fd = (f(&xp) - f(&xm)) / 2e-5;
            assert!((fd - dx.data[i]).abs() <= 1e-4 * (1.0 + fd.abs()), "{fd} vs {}", dx.data[i]);
        }
    }

    #[test]
    fn generator_gradients_match_finite_differences() {
        let mut m = AdverxModel::<f64>::new(ArchitectureConfig::toy(), 8).unwrap();
        let x = batch_tensor::<f64>(&toy_batch(3, 5));
        let eps = rng::normals(&mut rng::stream(2), 3 * 8);
        let target: Vec<f64> = rng::normals(&mut rng::stream(3), 3 * 256);
        // Scalar loss touching mu, logvar and the decoder output.
        let loss = |m: &mut AdverxModel<f64>| {
            let g = m.generator.as_ref().unwrap();
            let (mu, lv, _) = g.encoder.forward(&x);
            let z: Vec<f64> = mu.iter().zip(&lv).zip(&eps).map(|((m, l), e)| m + (0.5 * l).exp() * e).collect();
            let (y, _) = g.decoder.forward(&z, 3);
            y.data.iter().zip(&target).map(|(a, b)| a * b).sum::<f64>() + lv.iter().map(|v| v * v).sum::<f64>()
        };
        let grads = |m: &mut AdverxModel<f64>| {
            let g = m.generator.as_mut().unwrap();
            let (mu, lv, ec) = g.encoder.forward(&x);
            let z: Vec<f64> = mu.iter().zip(&lv).zip(&eps).map(|((m, l), e)| m + (0.5 * l).exp() * e).collect();
            let (y, dc) = g.decoder.forward(&z, 3);
            let dy = Tensor::from_vec(y.shape, target.clone());
            let dz = g.decoder.backward(&dc, &dy);
            let dmu = dz.clone();
            let dlv: Vec<f64> = dz
                .iter()
                .zip(&lv)
                .zip(&eps)
                .map(|((d, l), e)| d * 0.5 * (0.5 * l).exp() * e + 2.0 * l)
                .collect();
            g.encoder.backward(&ec, &dmu, &dlv);
        };
        fd_check(loss, grads, &mut m);
    }
}
