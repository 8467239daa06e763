//! Losses, optimizer, training loop and collapse diagnostics.

use std::io::Write;

use candle_core::backprop::GradStore;
use candle_core::{DType, Device, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::config::{ReconLoss, TrainConfig};
use crate::dataio::{sample_training_clip, split_reference, ClipSplit, VideoClip};
use crate::error::{Error, Result};
use crate::model::{Batch, ForwardOutput, Quantization, Tokenizer};
use crate::nn::{to_f64_vec, ParamStore, INIT_STD};
use crate::patchgrid::{GridShape, PatchSpec};
use crate::refencoder::{choose_prune_indices, kept_indices};
use crate::vq::{ema_update, split_codebook, Codebook, SplitPolicy};

/// Mean L1 or L2 distance between two equally shaped tensors.
pub fn reconstruction_loss(target: &Tensor, prediction: &Tensor, kind: ReconLoss) -> Result<Tensor> {
    if target.dims() != prediction.dims() {
        return Err(Error::shape(format!(
            "reconstruction loss over {:?} vs {:?}",
            target.dims(),
            prediction.dims()
        )));
    }
    let diff = (prediction - target)?;
    Ok(match kind {
        ReconLoss::L1 => diff.abs()?.mean_all()?,
        ReconLoss::L2 => diff.sqr()?.mean_all()?,
    })
}

/// Rearranges `(B, N, t·h·w·C)` patch tokens over `shape` into `(B·T, C, H, W)` frames.
pub fn tokens_to_frames(tokens: &Tensor, shape: GridShape, patch: PatchSpec, channels: usize) -> Result<Tensor> {
    let (b, n, p) = tokens.dims3()?;
    if n != shape.sites() || p != patch.token_dim(channels) {
        return Err(Error::shape("token tensor does not match lattice"));
    }
    let dims = vec![b, shape.tau, shape.eta, shape.omega, patch.t, patch.h, patch.w, channels];
    let frames = tokens
        .reshape(dims)?
        .permute(vec![0, 1, 4, 7, 2, 5, 3, 6])?
        .contiguous()?
        .reshape((
            b * shape.tau * patch.t,
            channels,
            shape.eta * patch.h,
            shape.omega * patch.w,
        ))?;
    Ok(frames)
}

#[derive(Debug, Clone)]
struct Conv {
    weight: Tensor,
    stride: usize,
    padding: usize,
}

impl Conv {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.conv2d(&self.weight, self.padding, self.stride, 1, 1)?)
    }
}

/// Frozen, randomly initialized three-layer conv stack used as a feature
/// extractor.
#[derive(Debug, Clone)]
pub struct PerceptualNet {
    layers: Vec<Conv>,
}

impl PerceptualNet {
    pub const SEED: u64 = 0x00fe_a7e5;

    pub fn new(channels: usize, seed: u64, dtype: DType, device: &Device) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let spec = [(channels, 16, 1), (16, 32, 2), (32, 32, 2)];
        let layers = spec
            .iter()
            .map(|&(cin, cout, stride)| {
                let std = (2.0 / (cin * 9) as f64).sqrt();
                let vals: Vec<f64> = (0..cout * cin * 9)
                    .map(|_| {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        z * std
                    })
                    .collect();
                let weight = Tensor::from_vec(vals, (cout, cin, 3, 3), device)?.to_dtype(dtype)?;
                Ok(Conv {
                    weight,
                    stride,
                    padding: 1,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self { layers })
    }

    pub fn features(&self, frames: &Tensor) -> Result<Vec<Tensor>> {
        let mut x = frames.clone();
        let mut out = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            x = layer.forward(&x)?.gelu()?;
            out.push(x.clone());
        }
        Ok(out)
    }

    /// Mean over depths of the mean squared feature distance.
    pub fn loss(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let fa = self.features(a)?;
        let fb = self.features(b)?;
        let mut total: Option<Tensor> = None;
        for (x, y) in fa.iter().zip(&fb) {
            let d = (x - y)?.sqr()?.mean_all()?;
            total = Some(match total {
                Some(t) => (t + d)?,
                None => d,
            });
        }
        Ok((total.expect("three layers") / fa.len() as f64)?)
    }
}

/// Hinge losses from discriminator logits. `fake_detached` must come from a
/// generator output cut from the graph.
pub fn hinge_losses(real: &Tensor, fake_detached: &Tensor, fake: &Tensor) -> Result<(Tensor, Tensor)> {
    let d_real = (1.0 - real)?.relu()?.mean_all()?;
    let d_fake = (1.0 + fake_detached)?.relu()?.mean_all()?;
    let d_loss = (d_real + d_fake)?;
    let g_loss = fake.mean_all()?.neg()?;
    Ok((g_loss, d_loss))
}

/// Small patch discriminator producing a logit map.
pub struct Discriminator {
    pub store: ParamStore,
    convs: Vec<(Tensor, usize, usize)>,
}

impl Discriminator {
    pub fn new(channels: usize, seed: u64, dtype: DType) -> Result<Self> {
        let mut store = ParamStore::new(seed, dtype);
        let spec = [(channels, 32, 4, 2), (32, 64, 4, 2), (64, 1, 3, 1)];
        let mut convs = Vec::new();
        for (i, &(cin, cout, k, stride)) in spec.iter().enumerate() {
            let w = store.trunc_normal(&format!("disc.conv{i}"), &[cout, cin, k, k], INIT_STD)?;
            convs.push((w, stride, k / 2 - usize::from(k % 2 == 0)));
        }
        Ok(Self { store, convs })
    }

    pub fn logits(&self, frames: &Tensor) -> Result<Tensor> {
        let mut x = frames.clone();
        let last = self.convs.len() - 1;
        for (i, (w, stride, pad)) in self.convs.iter().enumerate() {
            x = x.conv2d(w, *pad, *stride, 1, 1)?;
            if i < last {
                x = candle_nn::ops::leaky_relu(&x, 0.2)?;
            }
        }
        Ok(x)
    }

    /// `(g_loss, d_loss)`; the discriminator loss sees a detached copy of `fake`.
    pub fn losses(&self, real: &Tensor, fake: &Tensor) -> Result<(Tensor, Tensor)> {
        let r = self.logits(&real.detach())?;
        let fd = self.logits(&fake.detach())?;
        let f = self.logits(fake)?;
        hinge_losses(&r, &fd, &f)
    }
}

/// Linear warmup to `lr`, then cosine decay to `min_lr` at `steps`.
pub fn learning_rate(cfg: &TrainConfig, step: usize) -> f64 {
    if cfg.warmup > 0 && step < cfg.warmup {
        return cfg.lr * (step + 1) as f64 / cfg.warmup as f64;
    }
    let span = cfg.steps.saturating_sub(cfg.warmup).max(1);
    let progress = ((step - cfg.warmup.min(step)) as f64 / span as f64).min(1.0);
    cfg.min_lr + 0.5 * (cfg.lr - cfg.min_lr) * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// Adam with decoupled weight decay; moments are kept per named parameter.
#[derive(Debug)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub step: usize,
    pub moments: Vec<(String, Tensor, Tensor)>,
}

impl AdamW {
    pub fn new(store: &ParamStore, betas: (f64, f64), weight_decay: f64) -> Result<Self> {
        let moments = store
            .iter()
            .map(|(name, var)| {
                let z = var.as_tensor().zeros_like()?;
                Ok((name.clone(), z.clone(), z))
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            beta1: betas.0,
            beta2: betas.1,
            eps: 1e-8,
            weight_decay,
            step: 0,
            moments,
        })
    }

    /// Applies one update; returns the pre-clip global gradient norm.
    pub fn step(&mut self, store: &ParamStore, grads: &GradStore, lr: f64, clip: f64) -> Result<f64> {
        let mut sq = 0.0;
        for (name, _, _) in &self.moments {
            if let Some(g) = grads.get(store.get(name).expect("moment names match").as_tensor()) {
                sq += g.sqr()?.sum_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
            }
        }
        let norm = sq.sqrt();
        if !norm.is_finite() {
            return Err(Error::Numeric(format!("gradient norm is {norm}")));
        }
        let scale = if clip > 0.0 && norm > clip { clip / norm } else { 1.0 };
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (self.beta1, self.beta2);
        let (c1, c2) = (1.0 - b1.powi(t), 1.0 - b2.powi(t));
        for (name, m, v) in self.moments.iter_mut() {
            let var: &Var = store.get(name).expect("moment names match");
            let Some(g) = grads.get(var.as_tensor()) else {
                continue;
            };
            let g = (g.detach() * scale)?;
            *m = ((&*m * b1)? + (&g * (1.0 - b1))?)?.detach();
            *v = ((&*v * b2)? + (g.sqr()? * (1.0 - b2))?)?.detach();
            let update = ((&*m / c1)? / ((&*v / c2)?.sqrt()? + self.eps)?)?;
            let theta = var.as_tensor();
            let decayed = if self.weight_decay > 0.0 && theta.rank() >= 2 {
                (theta * (1.0 - lr * self.weight_decay))?
            } else {
                theta.clone()
            };
            var.set(&(decayed - (update * lr)?)?.detach())?;
        }
        Ok(norm)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    pub recon: f64,
    pub perceptual: f64,
    pub commitment: f64,
    pub adversarial: f64,
    pub total: f64,
    pub perplexity: f64,
    pub utilization: f64,
    pub codebook_size: usize,
    pub lr: f64,
    pub grad_norm: f64,
}

impl StepMetrics {
    /// The per-step line of the metrics log.
    pub fn log_line(&self) -> String {
        serde_json::json!({
            "step": self.step,
            "recon": self.recon,
            "perplexity": self.perplexity,
            "utilization": self.utilization,
            "lr": self.lr,
        })
        .to_string()
    }
}

/// Loss terms of one forward pass.
pub struct LossTerms {
    pub recon: Tensor,
    pub perceptual: Option<Tensor>,
    pub commitment: Tensor,
    pub total: Tensor,
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

/// Weighted generator-side loss (adversarial term excluded).
pub fn loss_terms(
    tok: &Tokenizer,
    out: &ForwardOutput,
    cfg: &TrainConfig,
    perceptual: Option<&PerceptualNet>,
) -> Result<LossTerms> {
    let recon = reconstruction_loss(&out.target, &out.prediction, cfg.recon_loss)?;
    let mut total = (&recon * cfg.w_recon)?;
    let perceptual = match perceptual {
        Some(net) if cfg.w_perceptual > 0.0 => {
            let m = &tok.model;
            let a = tokens_to_frames(&out.prediction, out.shape, m.patch, m.channels)?;
            let b = tokens_to_frames(&out.target, out.shape, m.patch, m.channels)?;
            let p = net.loss(&a, &b)?;
            total = (total + (&p * cfg.w_perceptual)?)?;
            Some(p)
        }
        _ => None,
    };
    total = (total + (&out.quant.commitment * tok.vq.beta)?)?;
    Ok(LossTerms {
        recon,
        perceptual,
        commitment: out.quant.commitment.clone(),
        total,
    })
}

/// Weights, optimizer and codebook state of a training run.
pub struct TrainState {
    pub tokenizer: Tokenizer,
    pub train: TrainConfig,
    pub optimizer: AdamW,
    pub step: usize,
    pub codebook_ready: bool,
    pub history: Vec<StepMetrics>,
    perceptual: Option<PerceptualNet>,
    adversary: Option<(Discriminator, AdamW)>,
}

impl TrainState {
    pub fn new(tokenizer: Tokenizer, train: TrainConfig) -> Result<Self> {
        train.validate()?;
        let optimizer = AdamW::new(&tokenizer.store, train.betas, train.weight_decay)?;
        let perceptual = if train.w_perceptual > 0.0 {
            Some(PerceptualNet::new(
                tokenizer.model.channels,
                PerceptualNet::SEED,
                tokenizer.dtype(),
                tokenizer.device(),
            )?)
        } else {
            None
        };
        let adversary = if train.w_adversarial > 0.0 {
            let d = Discriminator::new(tokenizer.model.channels, train.seed ^ 0xd15c, tokenizer.dtype())?;
            let opt = AdamW::new(&d.store, train.betas, 0.0)?;
            Some((d, opt))
        } else {
            None
        };
        Ok(Self {
            tokenizer,
            train,
            optimizer,
            step: 0,
            codebook_ready: false,
            history: Vec::new(),
            perceptual,
            adversary,
        })
    }

    pub fn perceptual_net(&self) -> Option<&PerceptualNet> {
        self.perceptual.as_ref()
    }

    /// Generator used for everything random in step `step`.
    pub fn step_rng(&self, step: usize) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.train.seed ^ (step as u64 + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15))
    }

    /// Per-sample kept target rows for one step; one prune count per batch.
    fn draw_keep(&self, batch: usize, rng: &mut ChaCha8Rng) -> Result<Option<Vec<Vec<usize>>>> {
        if !self.train.prune {
            return Ok(None);
        }
        let n = self.tokenizer.quantized_shape()?.sites();
        let count = rng.random_range(0..=self.tokenizer.model.prune_max_resolved()?);
        if count == 0 {
            return Ok(None);
        }
        (0..batch)
            .map(|_| Ok(kept_indices(n, &choose_prune_indices(n, count, rng)?)))
            .collect::<Result<Vec<_>>>()
            .map(Some)
    }

    fn init_codebook(&mut self, batch: &Batch, keep: Option<&[Vec<usize>]>, rng: &mut ChaCha8Rng) -> Result<()> {
        let (_, h, _, _) = self.tokenizer.encode_batch(batch, keep)?;
        let data = crate::nn::to_f32_vec(&h)?;
        let k = self.tokenizer.vq.initial_k();
        self.tokenizer.codebook = Codebook::from_samples(&data, self.tokenizer.model.code_dim, k, rng)?;
        self.codebook_ready = true;
        Ok(())
    }

    /// One optimizer update on a batch of clips.
    pub fn train_step(&mut self, splits: &[ClipSplit]) -> Result<StepMetrics> {
        let mut rng = self.step_rng(self.step);
        let batch = self.tokenizer.batch(splits)?;
        let keep = self.draw_keep(batch.size, &mut rng)?;
        if !self.codebook_ready {
            self.init_codebook(&batch, keep.as_deref(), &mut rng)?;
        }
        let out = self.tokenizer.forward(&batch, keep.as_deref(), Quantization::Nearest)?;
        let terms = loss_terms(&self.tokenizer, &out, &self.train, self.perceptual.as_ref())?;
        let mut total = terms.total.clone();
        let mut adversarial = 0.0;
        if let Some((disc, dopt)) = self.adversary.as_mut() {
            let m = &self.tokenizer.model;
            let real = tokens_to_frames(&out.target, out.shape, m.patch, m.channels)?;
            let fake = tokens_to_frames(&out.prediction, out.shape, m.patch, m.channels)?;
            let (g_loss, d_loss) = disc.losses(&real, &fake)?;
            adversarial = scalar(&g_loss)?;
            total = (total + (g_loss * self.train.w_adversarial)?)?;
            let dgrads = d_loss.backward()?;
            dopt.step(&disc.store, &dgrads, learning_rate(&self.train, self.step), self.train.grad_clip)?;
        }
        let total_value = scalar(&total)?;
        let recon = scalar(&terms.recon)?;
        if !total_value.is_finite() || !recon.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite loss at step {}: total {total_value}, recon {recon}",
                self.step
            )));
        }
        let grads = total.backward()?;
        let lr = learning_rate(&self.train, self.step);
        let grad_norm = self.optimizer.step(&self.tokenizer.store, &grads, lr, self.train.grad_clip)?;

        let latents = crate::nn::to_f32_vec(&out.latents)?;
        let vq = self.tokenizer.vq.clone();
        let mut book = ema_update(&self.tokenizer.codebook, &latents, &out.quant.indices, vq.decay)?;
        let next = self.step + 1;
        if vq.splitting {
            if vq.split_steps.contains(&next) && book.k() * 2 <= vq.codebook_size {
                book = split_codebook(
                    &book,
                    &SplitPolicy::Double {
                        eps: vq.split_eps,
                        k_max: vq.codebook_size,
                    },
                    &[],
                    &mut rng,
                )?;
            }
            if vq.dead_replace_every > 0 && next % vq.dead_replace_every == 0 {
                book = split_codebook(
                    &book,
                    &SplitPolicy::DeadReplace {
                        threshold: vq.dead_threshold,
                        eps: vq.split_eps,
                    },
                    &out.quant.indices,
                    &mut rng,
                )?;
            }
        }
        self.tokenizer.codebook = book;

        let metrics = StepMetrics {
            step: next,
            recon,
            perceptual: terms.perceptual.as_ref().map(scalar).transpose()?.unwrap_or(0.0),
            commitment: scalar(&terms.commitment)?,
            adversarial,
            total: total_value,
            perplexity: self.tokenizer.codebook.perplexity(),
            utilization: self.tokenizer.codebook.utilization(vq.dead_threshold),
            codebook_size: self.tokenizer.codebook.k(),
            lr,
            grad_norm,
        };
        self.step = next;
        self.history.push(metrics.clone());
        Ok(metrics)
    }

    /// Samples one batch of training clips for the current step.
    pub fn sample_batch(&self, sources: &[VideoClip]) -> Result<Vec<ClipSplit>> {
        let mut rng = self.step_rng(self.step);
        // Decorrelate from the pruning draws of the same step.
        let _: u64 = rng.random();
        let mut data_rng = ChaCha8Rng::seed_from_u64(rng.random());
        let m = &self.tokenizer.model;
        (0..self.train.batch_size)
            .map(|_| {
                let clip = sample_training_clip(
                    sources,
                    m.clip_frames(),
                    (self.train.interval_min, self.train.interval_max),
                    &mut data_rng,
                )?;
                split_reference(&clip, m.n_ref_frames)
            })
            .collect()
    }

    /// Runs until `self.step == until`, appending metric lines to `log`.
    pub fn fit(
        &mut self,
        sources: &[VideoClip],
        until: usize,
        mut log: Option<&mut dyn Write>,
        mut on_step: impl FnMut(&StepMetrics),
    ) -> Result<()> {
        while self.step < until {
            let splits = self.sample_batch(sources)?;
            let m = self.train_step(&splits)?;
            if let Some(w) = log.as_mut() {
                writeln!(w, "{}", m.log_line())?;
            }
            on_step(&m);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CollapseReport {
    pub utilization: f64,
    /// Mean L1 of the model's target reconstruction.
    pub model_loss: f64,
    /// Mean L1 of predicting every target frame as the last reference frame.
    pub copy_loss: f64,
    /// `model_loss - copy_loss`; negative when the model beats copying.
    pub copy_gap: f64,
    pub collapsed: bool,
}

pub const COLLAPSE_UTILIZATION: f64 = 0.10;
pub const COLLAPSE_EPS: f64 = 1e-3;

/// Utilization and copy-gap over a probe batch.
pub fn detect_posterior_collapse(tok: &Tokenizer, probe: &[ClipSplit], eps: f64) -> Result<CollapseReport> {
    if probe.is_empty() {
        return Err(Error::invalid("empty probe batch"));
    }
    let (mut model, mut copy) = (0.0, 0.0);
    for split in probe {
        let rec = tok.reconstruct(split)?;
        model += mean_abs(rec.data(), split.target.data());
        let last = split.reference.frame(split.reference.t() - 1);
        let mut c = 0.0;
        for t in 0..split.target.t() {
            c += mean_abs(split.target.frame(t), last);
        }
        copy += c / split.target.t() as f64;
    }
    let n = probe.len() as f64;
    let (model_loss, copy_loss) = (model / n, copy / n);
    let utilization = tok.codebook.utilization(tok.vq.dead_threshold);
    let copy_gap = model_loss - copy_loss;
    Ok(CollapseReport {
        utilization,
        model_loss,
        copy_loss,
        copy_gap,
        collapsed: utilization < COLLAPSE_UTILIZATION && copy_gap >= -eps,
    })
}

fn mean_abs(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs() as f64).sum::<f64>() / a.len() as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckEntry {
    pub name: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

/// Relative error with an absolute floor so vanishing gradients compare by
/// absolute difference.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Compares the autograd gradient of the total loss (adversarial term off,
/// no pruning, quantization offsets frozen at the current point) with central
/// differences on `count` randomly chosen scalar weights. Needs an `f64` model.
pub fn gradient_check(
    tok: &Tokenizer,
    cfg: &TrainConfig,
    splits: &[ClipSplit],
    count: usize,
    seed: u64,
    step: f64,
) -> Result<Vec<GradCheckEntry>> {
    if tok.dtype() != DType::F64 {
        return Err(Error::invalid("gradient check needs a float64 model"));
    }
    let perceptual = if cfg.w_perceptual > 0.0 {
        Some(PerceptualNet::new(tok.model.channels, PerceptualNet::SEED, DType::F64, tok.device())?)
    } else {
        None
    };
    let batch = tok.batch(splits)?;
    let (offset, codes, indices) = tok.freeze_quantization(&batch, None)?;
    let loss = |t: &Tokenizer| -> Result<Tensor> {
        let q = Quantization::Frozen {
            offset: &offset,
            codes: &codes,
            indices: &indices,
        };
        let out = t.forward(&batch, None, q)?;
        Ok(loss_terms(t, &out, cfg, perceptual.as_ref())?.total)
    };
    let grads = loss(tok)?.backward()?;

    // Tensor first, then element: keeps small tensors (attention, norms) from
    // being drowned out by the large embedding matrices.
    let params: Vec<(&String, &Var)> = tok.store.iter().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let (name, var) = params[rng.random_range(0..params.len())];
        let flat = rng.random_range(0..var.elem_count());
        let analytic = match grads.get(var.as_tensor()) {
            Some(g) => to_f64_vec(g)?[flat],
            None => 0.0,
        };
        let original = var.as_tensor().copy()?;
        let base = to_f64_vec(&original)?;
        let eval_at = |delta: f64| -> Result<f64> {
            let mut vals = base.clone();
            vals[flat] += delta;
            var.set(&Tensor::from_vec(vals, original.dims(), original.device())?)?;
            scalar(&loss(tok)?)
        };
        let plus = eval_at(step)?;
        let minus = eval_at(-step)?;
        var.set(&original)?;
        let numeric = (plus - minus) / (2.0 * step);
        out.push(GradCheckEntry {
            name: (*name).clone(),
            index: flat,
            analytic,
            numeric,
            rel_err: relative_error(analytic, numeric),
        });
    }
    Ok(out)
}
