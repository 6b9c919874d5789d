//! Composite objective and training loop.
//!
//! Each step first updates the discriminator on three streams (real patches,
//! reconstructions of those patches, decodes of prior samples), then updates
//! the generator on the ELBO plus the non-saturating adversarial loss with
//! the freshly updated discriminator held fixed.

use std::fmt::Write as _;
use std::path::Path;

use log::{debug, info, warn};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::{LoadOptions, Manifest, Scan};
use crate::model::{
    batch_tensor, clamp_logvar, reparameterize, sample_prior, AdverxModel, ArchitectureConfig, Discriminator, Generator,
    LOGVAR_MAX, LOGVAR_MIN,
};
use crate::nn::{sigmoid, Adam, AdamConfig, Param, Real, Tensor};
use crate::patching::{sample_patches, PatchBatch};
use crate::rng;

/// Probabilities entering a logarithm are clamped to `[PROB_EPS, 1 - PROB_EPS]`.
pub const PROB_EPS: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub beta_kl: f64,
    pub lambda_adv_recon: f64,
    pub lambda_adv_sample: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            beta_kl: 1e-2,
            lambda_adv_recon: 1.0,
            lambda_adv_sample: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("beta_kl", self.beta_kl),
            ("lambda_adv_recon", self.lambda_adv_recon),
            ("lambda_adv_sample", self.lambda_adv_sample),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::InvalidArgument(format!("{name} = {v}")));
            }
        }
        Ok(())
    }

    pub fn is_adversarial(&self) -> bool {
        self.lambda_adv_recon > 0.0 || self.lambda_adv_sample > 0.0
    }
}

/// Weights of the real, reconstructed and sampled streams in the
/// discriminator loss.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StreamWeights {
    pub real: f64,
    pub recon: f64,
    pub sample: f64,
}

impl Default for StreamWeights {
    fn default() -> Self {
        StreamWeights {
            real: 0.5,
            recon: 0.25,
            sample: 0.25,
        }
    }
}

fn check_finite(name: &str, v: &[f64]) -> Result<()> {
    match v.iter().position(|x| !x.is_finite()) {
        Some(i) => Err(Error::Numerical(format!("{name}[{i}] = {}", v[i]))),
        None => Ok(()),
    }
}

fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_EPS, 1.0 - PROB_EPS)
}

fn check_probs(name: &str, p: &[f64]) -> Result<()> {
    check_finite(name, p)?;
    if p.is_empty() {
        return Err(Error::EmptyInput(format!("{name} is empty")));
    }
    Ok(())
}

/// Mean over the batch of `0.5 * sum_d (mu^2 + exp(logvar) - logvar - 1)`.
/// `mu` and `logvar` are `n x d` row-major.
pub fn kl_divergence(mu: &[f64], logvar: &[f64], n: usize) -> Result<f64> {
    if mu.len() != logvar.len() || n == 0 || mu.len() % n != 0 {
        return Err(Error::Shape(format!(
            "mu {} / logvar {} entries for batch {n}",
            mu.len(),
            logvar.len()
        )));
    }
    check_finite("mu", mu)?;
    check_finite("logvar", logvar)?;
    let s: f64 = mu
        .iter()
        .zip(logvar)
        .map(|(&m, &lv)| m * m + clamp_logvar(lv).exp() - lv - 1.0)
        .sum();
    Ok((0.5 * s / n as f64).max(0.0))
}

/// Gradients of [`kl_divergence`] with respect to `mu` and `logvar`.
pub fn kl_divergence_grad(mu: &[f64], logvar: &[f64], n: usize) -> (Vec<f64>, Vec<f64>) {
    let inv = 1.0 / n as f64;
    let dmu = mu.iter().map(|&m| m * inv).collect();
    let dlv = logvar
        .iter()
        .map(|&lv| {
            let e = if (LOGVAR_MIN..=LOGVAR_MAX).contains(&lv) { lv.exp() } else { 0.0 };
            0.5 * (e - 1.0) * inv
        })
        .collect();
    (dmu, dlv)
}

/// Mean squared error over batch and pixels.
pub fn reconstruction_loss(x: &[f64], x_hat: &[f64]) -> Result<f64> {
    if x.len() != x_hat.len() || x.is_empty() {
        return Err(Error::Shape(format!("{} vs {} values", x.len(), x_hat.len())));
    }
    Ok(x.iter().zip(x_hat).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / x.len() as f64)
}

pub fn reconstruction_loss_grad(x: &[f64], x_hat: &[f64]) -> Vec<f64> {
    let s = 2.0 / x.len() as f64;
    x.iter().zip(x_hat).map(|(a, b)| s * (b - a)).collect()
}

pub fn elbo_loss(x: &[f64], x_hat: &[f64], mu: &[f64], logvar: &[f64], n: usize, weights: &LossWeights) -> Result<f64> {
    Ok(reconstruction_loss(x, x_hat)? + weights.beta_kl * kl_divergence(mu, logvar, n)?)
}

/// `mean(-log p)` with clamping.
fn neg_log_mean(p: &[f64]) -> f64 {
    p.iter().map(|&v| -clamp_prob(v).ln()).sum::<f64>() / p.len() as f64
}

/// `mean(-log(1 - p))` with clamping.
fn neg_log1m_mean(p: &[f64]) -> f64 {
    p.iter().map(|&v| -(1.0 - clamp_prob(v)).ln()).sum::<f64>() / p.len() as f64
}

/// Non-saturating generator loss on the discriminator's "real" probabilities.
pub fn generator_adversarial_loss(d_prob_recon: &[f64], d_prob_sample: &[f64], weights: &LossWeights) -> Result<f64> {
    check_probs("d_prob_recon", d_prob_recon)?;
    let mut loss = weights.lambda_adv_recon * neg_log_mean(d_prob_recon);
    if weights.lambda_adv_sample > 0.0 {
        check_probs("d_prob_sample", d_prob_sample)?;
        loss += weights.lambda_adv_sample * neg_log_mean(d_prob_sample);
    }
    Ok(loss)
}

/// Binary cross-entropy with targets real = 1, reconstructed = 0, sampled = 0.
pub fn discriminator_loss(
    d_prob_real: &[f64],
    d_prob_recon: &[f64],
    d_prob_sample: &[f64],
    streams: &StreamWeights,
) -> Result<f64> {
    check_probs("d_prob_real", d_prob_real)?;
    check_probs("d_prob_recon", d_prob_recon)?;
    check_probs("d_prob_sample", d_prob_sample)?;
    Ok(streams.real * neg_log_mean(d_prob_real)
        + streams.recon * neg_log1m_mean(d_prob_recon)
        + streams.sample * neg_log1m_mean(d_prob_sample))
}

/// Gradient with respect to the logits of `scale * mean(-log sigmoid(l))`
/// (target 1) or `scale * mean(-log(1 - sigmoid(l)))` (target 0), through
/// the probability clamp.
pub fn bce_logit_grad(logits: &[f64], target_real: bool, scale: f64) -> Vec<f64> {
    let s = scale / logits.len() as f64;
    logits
        .iter()
        .map(|&l| {
            let p = sigmoid(l);
            if p < PROB_EPS || p > 1.0 - PROB_EPS {
                0.0
            } else if target_real {
                -s * (1.0 - p)
            } else {
                s * p
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batches_per_epoch: usize,
    pub patches_per_batch: usize,
    pub learning_rate_g: f64,
    pub learning_rate_d: f64,
    pub optimizer_betas: (f64, f64),
    pub rng_seed: u64,
    pub loss_weights: LossWeights,
    pub stream_weights: StreamWeights,
    pub margin: f64,
    /// Draw every patch of a batch from an independently chosen scan.
    /// Ablation only; the default is one scan per batch.
    pub cross_scan_batches: bool,
    /// Invoke the checkpoint hook every this many steps (0 = never).
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            batches_per_epoch: 100,
            patches_per_batch: 64,
            learning_rate_g: 2e-4,
            learning_rate_d: 2e-4,
            optimizer_betas: (0.5, 0.999),
            rng_seed: 0,
            loss_weights: LossWeights::default(),
            stream_weights: StreamWeights::default(),
            margin: crate::patching::DEFAULT_MARGIN,
            cross_scan_batches: false,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patches_per_batch < 2 {
            return Err(Error::BatchTooSmall(self.patches_per_batch));
        }
        self.loss_weights.validate()?;
        for (name, v) in [("learning_rate_g", self.learning_rate_g), ("learning_rate_d", self.learning_rate_d)] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::InvalidArgument(format!("{name} = {v}")));
            }
        }
        let (b1, b2) = self.optimizer_betas;
        if !((0.0..1.0).contains(&b1) && (0.0..1.0).contains(&b2)) {
            return Err(Error::InvalidArgument(format!("optimizer betas ({b1}, {b2})")));
        }
        let sw = self.stream_weights;
        if [sw.real, sw.recon, sw.sample].iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::InvalidArgument(format!("stream weights {sw:?}")));
        }
        Ok(())
    }

    pub fn total_steps(&self) -> usize {
        self.epochs * self.batches_per_epoch
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    pub elbo: f64,
    pub kl: f64,
    pub recon: f64,
    pub g_adv: f64,
    pub d_loss: f64,
    /// Fraction of real patches the discriminator calls real.
    pub d_real_acc: f64,
    /// Fraction of reconstructed and sampled patches it calls fake.
    pub d_fake_acc: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub steps: Vec<StepMetrics>,
}

impl TrainHistory {
    pub const CSV_HEADER: &'static str = "step,elbo,kl,recon,g_adv,d_loss,d_real_acc,d_fake_acc";

    pub fn to_csv(&self) -> String {
        let mut s = String::from(Self::CSV_HEADER);
        s.push('\n');
        for m in &self.steps {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{}",
                m.step, m.elbo, m.kl, m.recon, m.g_adv, m.d_loss, m.d_real_acc, m.d_fake_acc
            );
        }
        s
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

fn to_f64<T: Real>(v: &[T]) -> Vec<f64> {
    v.iter().map(|x| x.as_f64()).collect()
}

fn from_f64<T: Real>(v: &[f64]) -> Vec<T> {
    v.iter().map(|&x| T::lit(x)).collect()
}

fn zero_grads<T: Real>(params: Vec<&mut Param<T>>) {
    for p in params {
        p.zero_grad();
    }
}

fn check_grads<T: Real>(what: &str, params: &[&mut Param<T>]) -> Result<()> {
    for p in params {
        if p.grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::Numerical(format!("{what}: non-finite gradient in {}", p.name)));
        }
    }
    Ok(())
}

/// Outcome of the generator's forward pass on one real batch.
struct GeneratorPass<T> {
    mu: Vec<T>,
    logvar: Vec<T>,
    eps: Vec<T>,
    enc: crate::model::EncoderCache<T>,
    recon: Tensor<T>,
    dec: crate::model::DecoderCache<T>,
}

fn generator_forward<T: Real>(g: &Generator<T>, x: &Tensor<T>, seed: u64) -> Result<GeneratorPass<T>> {
    let (mu, logvar, enc) = g.encoder.forward(x);
    let code = reparameterize(&mu, &logvar, seed)?;
    let (recon, dec) = g.decoder.forward(&code.z, x.batch());
    Ok(GeneratorPass {
        mu,
        logvar,
        eps: code.eps,
        enc,
        recon,
        dec,
    })
}

/// Backward of the ELBO (plus an extra gradient on the reconstructions) into
/// the generator. Returns `(recon, kl)`.
fn elbo_backward<T: Real>(
    g: &mut Generator<T>,
    x: &Tensor<T>,
    pass: &GeneratorPass<T>,
    extra_drecon: Option<&[f64]>,
    beta_kl: f64,
    recon_weight: f64,
) -> Result<(f64, f64)> {
    let n = x.batch();
    let xs = to_f64(&x.data);
    let xr = to_f64(&pass.recon.data);
    let mu = to_f64(&pass.mu);
    let lv = to_f64(&pass.logvar);
    let recon = reconstruction_loss(&xs, &xr)?;
    let kl = kl_divergence(&mu, &lv, n)?;
    let mut drecon = reconstruction_loss_grad(&xs, &xr);
    if recon_weight != 1.0 {
        drecon.iter_mut().for_each(|v| *v *= recon_weight);
    }
    if let Some(extra) = extra_drecon {
        drecon.iter_mut().zip(extra).for_each(|(a, b)| *a += b);
    }
    let dz = to_f64(&g.decoder.backward(&pass.dec, &Tensor::from_vec(pass.recon.shape, from_f64(&drecon))));
    let (dkl_mu, dkl_lv) = kl_divergence_grad(&mu, &lv, n);
    let eps = to_f64(&pass.eps);
    let dmu: Vec<f64> = dz.iter().zip(&dkl_mu).map(|(a, b)| a + beta_kl * b).collect();
    let dlv: Vec<f64> = dz
        .iter()
        .zip(&lv)
        .zip(&eps)
        .zip(&dkl_lv)
        .map(|(((d, &l), e), k)| {
            let through_z = if (LOGVAR_MIN..=LOGVAR_MAX).contains(&l) {
                d * 0.5 * (0.5 * l).exp() * e
            } else {
                0.0
            };
            through_z + beta_kl * k
        })
        .collect();
    g.encoder.backward(&pass.enc, &from_f64(&dmu), &from_f64(&dlv));
    Ok((recon, kl))
}

/// Generator outputs for one real batch: reconstructions through the
/// encoder and decoder samples from the prior.
pub struct GeneratorOutputs<T> {
    pass: GeneratorPass<T>,
    sampled: Tensor<T>,
    sample_cache: crate::model::DecoderCache<T>,
}

impl<T: Real> GeneratorOutputs<T> {
    pub fn reconstructions(&self) -> &Tensor<T> {
        &self.pass.recon
    }

    pub fn samples(&self) -> &Tensor<T> {
        &self.sampled
    }
}

/// Forward the generator; `seeds` are the reparameterization and prior seeds.
pub fn generator_outputs<T: Real>(model: &AdverxModel<T>, x: &Tensor<T>, seeds: (u64, u64)) -> Result<GeneratorOutputs<T>> {
    let gen = model.generator()?;
    let k = x.batch();
    let pass = generator_forward(gen, x, seeds.0)?;
    let z_prior = sample_prior::<T>(k, model.config.latent_dim, seeds.1)?;
    let (sampled, sample_cache) = gen.decoder.forward(&z_prior, k);
    Ok(GeneratorOutputs {
        pass,
        sampled,
        sample_cache,
    })
}

/// Discriminator loss with its probabilities per stream.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscriminatorStep {
    pub loss: f64,
    pub p_real: Vec<f64>,
    pub p_recon: Vec<f64>,
    pub p_sample: Vec<f64>,
}

/// Discriminator loss on three separately normalized streams, leaving its
/// parameter gradients (reset first) in the discriminator.
pub fn discriminator_gradients<T: Real>(
    d: &mut Discriminator<T>,
    real: &Tensor<T>,
    recon: &Tensor<T>,
    sampled: &Tensor<T>,
    sw: &StreamWeights,
) -> Result<DiscriminatorStep> {
    zero_grads(d.params_mut());
    let (l_real, c_real) = d.forward(real);
    let (l_recon, c_recon) = d.forward(recon);
    let (l_sample, c_sample) = d.forward(sampled);
    let (l_real, l_recon, l_sample) = (to_f64(&l_real), to_f64(&l_recon), to_f64(&l_sample));
    let probs = |l: &[f64]| l.iter().map(|&v| sigmoid(v)).collect::<Vec<_>>();
    let (p_real, p_recon, p_sample) = (probs(&l_real), probs(&l_recon), probs(&l_sample));
    let loss = discriminator_loss(&p_real, &p_recon, &p_sample, sw)?;
    if !loss.is_finite() {
        return Err(Error::Numerical(format!("discriminator loss {loss}")));
    }
    d.backward(&c_real, &from_f64(&bce_logit_grad(&l_real, true, sw.real)), true);
    d.backward(&c_recon, &from_f64(&bce_logit_grad(&l_recon, false, sw.recon)), true);
    d.backward(&c_sample, &from_f64(&bce_logit_grad(&l_sample, false, sw.sample)), true);
    Ok(DiscriminatorStep {
        loss,
        p_real,
        p_recon,
        p_sample,
    })
}

/// Unweighted generator loss terms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GeneratorTerms {
    pub recon: f64,
    pub kl: f64,
    /// Already weighted by the adversarial lambdas.
    pub adversarial: f64,
}

/// Gradient of `recon_weight * recon + beta_kl * kl + adversarial` in the
/// encoder and decoder (reset first). The discriminator only passes
/// gradients through; its parameters are untouched.
pub fn generator_gradients<T: Real>(
    model: &mut AdverxModel<T>,
    x: &Tensor<T>,
    outs: &GeneratorOutputs<T>,
    w: &LossWeights,
    recon_weight: f64,
) -> Result<GeneratorTerms> {
    let probs = |l: &[f64]| l.iter().map(|&v| sigmoid(v)).collect::<Vec<_>>();
    let mut adversarial = 0.0;
    let mut adv_recon_grad = None;
    let mut adv_sample_grad = None;
    if w.is_adversarial() {
        let d = &mut model.discriminator;
        let (lr, cr) = d.forward(&outs.pass.recon);
        let lr = to_f64(&lr);
        let (ls, cs) = d.forward(&outs.sampled);
        let ls = to_f64(&ls);
        adversarial = generator_adversarial_loss(&probs(&lr), &probs(&ls), w)?;
        if w.lambda_adv_recon > 0.0 {
            let dl = bce_logit_grad(&lr, true, w.lambda_adv_recon);
            adv_recon_grad = Some(to_f64(&d.backward(&cr, &from_f64(&dl), false).data));
        }
        if w.lambda_adv_sample > 0.0 {
            let dl = bce_logit_grad(&ls, true, w.lambda_adv_sample);
            adv_sample_grad = Some(d.backward(&cs, &from_f64(&dl), false));
        }
    }
    let gen = model.generator_mut()?;
    zero_grads(gen.encoder.params_mut());
    zero_grads(gen.decoder.params_mut());
    let (recon, kl) = elbo_backward(gen, x, &outs.pass, adv_recon_grad.as_deref(), w.beta_kl, recon_weight)?;
    if let Some(ds) = adv_sample_grad {
        gen.decoder.backward(&outs.sample_cache, &ds);
    }
    if !(recon.is_finite() && kl.is_finite() && adversarial.is_finite()) {
        return Err(Error::Numerical(format!(
            "generator loss: recon {recon}, kl {kl}, adversarial {adversarial}"
        )));
    }
    Ok(GeneratorTerms { recon, kl, adversarial })
}

fn step_seeds(run_seed: u64, step: usize) -> (u64, u64) {
    (rng::derive(run_seed, &[step as u64, 10]), rng::derive(run_seed, &[step as u64, 11]))
}

/// A model with its two optimizers.
#[derive(Debug, Clone)]
pub struct Trainer<T: Real = f32> {
    pub model: AdverxModel<T>,
    pub config: TrainConfig,
    opt_g: Adam<T>,
    opt_d: Adam<T>,
    step: usize,
}

impl<T: Real> Trainer<T> {
    pub fn new(model: AdverxModel<T>, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        model.generator()?;
        Ok(Trainer {
            opt_g: Adam::new(AdamConfig::new(config.learning_rate_g, config.optimizer_betas)),
            opt_d: Adam::new(AdamConfig::new(config.learning_rate_d, config.optimizer_betas)),
            model,
            config,
            step: 0,
        })
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    /// One discriminator update followed by one generator update.
    pub fn train_step(&mut self, batch: &PatchBatch) -> Result<StepMetrics> {
        let k = batch.len();
        if k < 2 {
            return Err(Error::BatchTooSmall(k));
        }
        if batch.patch_size() != self.model.config.patch_size {
            return Err(Error::Shape(format!(
                "batch patch size {} but model expects {}",
                batch.patch_size(),
                self.model.config.patch_size
            )));
        }
        let w = self.config.loss_weights;
        let sw = self.config.stream_weights;
        let seeds = step_seeds(self.config.rng_seed, self.step);
        let x = batch_tensor::<T>(batch);

        let outs = generator_outputs(&self.model, &x, seeds)?;

        let ds = discriminator_gradients(&mut self.model.discriminator, &x, &outs.pass.recon, &outs.sampled, &sw)
            .map_err(|e| Error::Numerical(format!("discriminator at step {}: {e}", self.step)))?;
        {
            let mut dp = self.model.discriminator.params_mut();
            check_grads("discriminator", &dp)?;
            self.opt_d.step(&mut dp);
        }
        let d_real_acc = ds.p_real.iter().filter(|&&p| p > 0.5).count() as f64 / k as f64;
        let d_fake_acc =
            ds.p_recon.iter().chain(&ds.p_sample).filter(|&&p| p < 0.5).count() as f64 / (2 * k) as f64;
        let d_loss = ds.loss;

        // Generator update against the updated, frozen discriminator.
        let terms = generator_gradients(&mut self.model, &x, &outs, &w, 1.0)
            .map_err(|e| Error::Numerical(format!("generator at step {}: {e}", self.step)))?;
        let (recon, kl, g_adv) = (terms.recon, terms.kl, terms.adversarial);
        let elbo = recon + w.beta_kl * kl;
        {
            let gen = self.model.generator_mut()?;
            let mut gp = gen.encoder.params_mut();
            gp.extend(gen.decoder.params_mut());
            check_grads("generator", &gp)?;
            self.opt_g.step(&mut gp);
        }
        let m = StepMetrics {
            step: self.step,
            elbo,
            kl,
            recon,
            g_adv,
            d_loss,
            d_real_acc,
            d_fake_acc,
        };
        self.step += 1;
        Ok(m)
    }

    /// Generator-only ELBO step, identical in randomness to [`Self::train_step`].
    pub fn vae_step(&mut self, batch: &PatchBatch) -> Result<StepMetrics> {
        let (eps_seed, _) = step_seeds(self.config.rng_seed, self.step);
        let x = batch_tensor::<T>(batch);
        let beta = self.config.loss_weights.beta_kl;
        let gen = self.model.generator_mut()?;
        let pass = generator_forward(gen, &x, eps_seed)?;
        zero_grads(gen.encoder.params_mut());
        zero_grads(gen.decoder.params_mut());
        let (recon, kl) = elbo_backward(gen, &x, &pass, None, beta, 1.0)?;
        let mut gp = gen.encoder.params_mut();
        gp.extend(gen.decoder.params_mut());
        check_grads("generator", &gp)?;
        self.opt_g.step(&mut gp);
        let m = StepMetrics {
            step: self.step,
            elbo: recon + beta * kl,
            kl,
            recon,
            g_adv: 0.0,
            d_loss: 0.0,
            d_real_acc: 0.0,
            d_fake_acc: 0.0,
        };
        self.step += 1;
        Ok(m)
    }
}

/// Patch batch for a given step: one scan chosen uniformly at random, then
/// `K` patches from it (or, in the cross-scan ablation, one scan per patch).
pub fn training_batch(scans: &[Scan], config: &TrainConfig, patch_size: usize, step: usize) -> Result<PatchBatch> {
    if scans.is_empty() {
        return Err(Error::EmptyDataset("no training scans".into()));
    }
    let seed = rng::derive(config.rng_seed, &[step as u64]);
    let mut r = rng::stream(seed);
    let k = config.patches_per_batch;
    if !config.cross_scan_batches {
        let scan = &scans[r.gen_range(0..scans.len())];
        return sample_patches(scan, k, patch_size, config.margin, rng::derive(seed, &[1]));
    }
    let mut data = Vec::with_capacity(k * patch_size * patch_size);
    for i in 0..k {
        let scan = &scans[r.gen_range(0..scans.len())];
        let b = sample_patches(scan, 1, patch_size, config.margin, rng::derive(seed, &[2, i as u64]))?;
        data.extend_from_slice(b.data());
    }
    PatchBatch::from_raw(data, patch_size, "mixed")
}

/// Keep the scans whose ROI can hold a patch; log and drop the rest.
pub fn usable_scans(scans: Vec<Scan>, patch_size: usize, margin: f64) -> Result<Vec<Scan>> {
    let total = scans.len();
    let kept: Vec<Scan> = scans
        .into_iter()
        .filter(|s| match sample_patches(s, 1, patch_size, margin, 0) {
            Ok(_) => true,
            Err(e) => {
                warn!("skipping {}: {e}", s.id());
                false
            }
        })
        .collect();
    if kept.is_empty() {
        return Err(Error::EmptyDataset(format!("all {total} scans were rejected by patching")));
    }
    Ok(kept)
}

pub type CheckpointHook<'a> = dyn FnMut(&AdverxModel<f32>, usize) -> Result<()> + 'a;

/// Train on in-memory scans. `checkpoint` is called every
/// `config.checkpoint_every` steps and after the last step.
pub fn train_on_scans(
    scans: &[Scan],
    arch: &ArchitectureConfig,
    config: &TrainConfig,
    checkpoint: Option<&mut CheckpointHook<'_>>,
) -> Result<(AdverxModel<f32>, TrainHistory)> {
    let model = AdverxModel::<f32>::new(arch.clone(), rng::derive(config.rng_seed, &[u64::MAX]))?;
    train_model(model, scans, config, checkpoint)
}

/// Continue training an existing model.
pub fn train_model(
    model: AdverxModel<f32>,
    scans: &[Scan],
    config: &TrainConfig,
    mut checkpoint: Option<&mut CheckpointHook<'_>>,
) -> Result<(AdverxModel<f32>, TrainHistory)> {
    let mut trainer = Trainer::new(model, *config)?;
    let total = config.total_steps();
    let mut history = TrainHistory::default();
    if total == 0 {
        return Ok((trainer.model, history));
    }
    let s = trainer.model.config.patch_size;
    let scans = usable_scans(scans.to_vec(), s, config.margin)?;
    let every = (total / 20).max(1);
    for step in 0..total {
        let batch = training_batch(&scans, config, s, step)?;
        let m = trainer.train_step(&batch)?;
        debug!("{m:?}");
        if step % every == 0 || step + 1 == total {
            info!(
                "step {}/{total} elbo {:.5} kl {:.3} g_adv {:.3} d_loss {:.4} acc real {:.2} fake {:.2}",
                step + 1,
                m.elbo,
                m.kl,
                m.g_adv,
                m.d_loss,
                m.d_real_acc,
                m.d_fake_acc
            );
        }
        history.steps.push(m);
        if let Some(hook) = checkpoint.as_deref_mut() {
            let due = config.checkpoint_every > 0 && (step + 1) % config.checkpoint_every == 0;
            if due || step + 1 == total {
                hook(&trainer.model, step + 1)?;
            }
        }
    }
    Ok((trainer.model, history))
}

/// Plain VAE training with the same batch and latent randomness as
/// [`train_on_scans`]; no discriminator is involved.
pub fn train_vae(
    scans: &[Scan],
    arch: &ArchitectureConfig,
    config: &TrainConfig,
) -> Result<(AdverxModel<f32>, TrainHistory)> {
    let model = AdverxModel::<f32>::new(arch.clone(), rng::derive(config.rng_seed, &[u64::MAX]))?;
    let mut trainer = Trainer::new(model, *config)?;
    let mut history = TrainHistory::default();
    let total = config.total_steps();
    if total == 0 {
        return Ok((trainer.model, history));
    }
    let s = arch.patch_size;
    let scans = usable_scans(scans.to_vec(), s, config.margin)?;
    for step in 0..total {
        let batch = training_batch(&scans, config, s, step)?;
        history.steps.push(trainer.vae_step(&batch)?);
    }
    Ok((trainer.model, history))
}

/// Load the manifest's scans and train.
pub fn train(
    manifest: &Manifest,
    arch: &ArchitectureConfig,
    config: &TrainConfig,
    load: &LoadOptions,
    checkpoint: Option<&mut CheckpointHook<'_>>,
) -> Result<(AdverxModel<f32>, TrainHistory)> {
    if manifest.is_empty() {
        return Err(Error::EmptyDataset("manifest has no entries".into()));
    }
    let scans = manifest.load_scans(load)?;
    train_on_scans(&scans, arch, config, checkpoint)
}
