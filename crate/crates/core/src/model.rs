//! The full tokenizer: encoder, host-side codebook and decoder, wired for
//! either reference bypass or joint (reference-less) tokenization.

use std::sync::atomic::{AtomicU64, Ordering};

use candle_core::{DType, Device, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{ModelConfig, TokenizerMode, VqConfig};
use crate::dataio::{replicate_pad_reference, ClipSplit, VideoClip};
use crate::error::{Error, Result};
use crate::nn::{tensor_from_f32, to_f32_vec, ParamStore};
use crate::patchgrid::{patchify, GridShape, TokenGrid};
use crate::refdecoder::{Decoder, DecoderConfig};
use crate::refencoder::{split_tokens, EncoderConfig, Encoder, MaskMode};
use crate::vq::{lookup, quantize_tensor, quantize_with_codes, Codebook, QuantizedTensor};

/// A batch of clips as patch tokens: `(B, Nr, P)` reference and `(B, Nt, P)` target.
#[derive(Debug, Clone)]
pub struct Batch {
    pub reference: Tensor,
    pub target: Tensor,
    pub size: usize,
}

/// How the bottleneck behaves in a forward pass.
pub enum Quantization<'a> {
    /// Nearest-code assignment with a straight-through output.
    Nearest,
    /// Output `h + offset` with a constant offset; the differentiable
    /// surrogate of the straight-through path used for gradient checks.
    Frozen {
        offset: &'a Tensor,
        codes: &'a Tensor,
        indices: &'a [u32],
    },
}

pub struct ForwardOutput {
    /// Raw decoder output, `(B, N, P)`.
    pub prediction: Tensor,
    /// Ground-truth tokens the loss compares against, `(B, N, P)`. Never holds
    /// reference pixels in reftok mode.
    pub target: Tensor,
    /// Pre-quantization latents, `(B·Nk, code_dim)`.
    pub latents: Tensor,
    pub quant: QuantizedTensor,
    pub keep: Option<Vec<Vec<usize>>>,
    /// Lattice of `prediction`/`target`.
    pub shape: GridShape,
}

/// Counts rows sent through the quantizer and reference rows routed around it.
#[derive(Debug, Default)]
pub struct BypassProbe {
    quantized_rows: AtomicU64,
    bypassed_rows: AtomicU64,
    violations: AtomicU64,
}

impl BypassProbe {
    pub fn quantized_rows(&self) -> u64 {
        self.quantized_rows.load(Ordering::Relaxed)
    }

    pub fn bypassed_rows(&self) -> u64 {
        self.bypassed_rows.load(Ordering::Relaxed)
    }

    pub fn violations(&self) -> u64 {
        self.violations.load(Ordering::Relaxed)
    }
}

pub struct Tokenizer {
    pub model: ModelConfig,
    pub vq: VqConfig,
    pub store: ParamStore,
    pub encoder: Encoder,
    pub decoder: Decoder,
    pub codebook: Codebook,
    pub probe: BypassProbe,
}

impl Tokenizer {
    pub fn new(model: ModelConfig, vq: VqConfig, dtype: DType) -> Result<Self> {
        model.validate()?;
        vq.validate()?;
        let mut store = ParamStore::new(model.init_seed, dtype);
        let max_grid = model.max_grid()?;
        let encoder = Encoder::new(
            &mut store,
            EncoderConfig {
                embed_dim: model.embed_dim,
                depth: model.enc_depth,
                heads: model.heads,
                mlp_ratio: model.mlp_ratio,
                patch: model.patch,
                channels: model.channels,
                max_grid,
                prune_max: model.prune_max_resolved()?,
                mask_mode: model.mask_mode,
                code_dim: model.code_dim,
            },
        )?;
        let decoder = Decoder::new(
            &mut store,
            DecoderConfig {
                embed_dim: model.embed_dim,
                depth: model.dec_depth,
                heads: model.heads,
                mlp_ratio: model.mlp_ratio,
                patch: model.patch,
                channels: model.channels,
                code_dim: model.code_dim,
                ref_dim: model.embed_dim,
                max_tau: max_grid.tau,
            },
        )?;
        let mut rng = ChaCha8Rng::seed_from_u64(model.init_seed ^ 0x5eed_c0de);
        let k = vq.initial_k();
        let noise: Vec<f32> = (0..k * model.code_dim)
            .map(|_| rand_distr::Distribution::<f32>::sample(&rand_distr::StandardNormal, &mut rng))
            .collect();
        let codebook = Codebook::from_vectors(k, model.code_dim, noise)?;
        Ok(Self {
            model,
            vq,
            store,
            encoder,
            decoder,
            codebook,
            probe: BypassProbe::default(),
        })
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype()
    }

    pub fn device(&self) -> &Device {
        self.store.device()
    }

    pub fn mode(&self) -> TokenizerMode {
        self.model.mode
    }

    /// Patch tokens of a batch of splits.
    pub fn batch(&self, splits: &[ClipSplit]) -> Result<Batch> {
        if splits.is_empty() {
            return Err(Error::invalid("empty batch"));
        }
        let (rs, ts) = (self.model.ref_shape()?, self.model.target_shape()?);
        let p = self.model.patch.token_dim(self.model.channels);
        let mut refs = Vec::with_capacity(splits.len() * rs.sites() * p);
        let mut tgts = Vec::with_capacity(splits.len() * ts.sites() * p);
        for split in splits {
            self.check_split(split)?;
            let (r, t) = split_tokens(split, self.model.patch)?;
            refs.extend_from_slice(r.continuous_data().unwrap().1);
            tgts.extend_from_slice(t.continuous_data().unwrap().1);
        }
        let b = splits.len();
        Ok(Batch {
            reference: tensor_from_f32(refs, &[b, rs.sites(), p], self.dtype(), self.device())?,
            target: tensor_from_f32(tgts, &[b, ts.sites(), p], self.dtype(), self.device())?,
            size: b,
        })
    }

    fn check_split(&self, split: &ClipSplit) -> Result<()> {
        let m = &self.model;
        let (rt, h, w, c) = split.reference.dims();
        let tt = split.target.t();
        if rt != m.n_ref_frames || tt != m.target_frames || h != m.height || w != m.width || c != m.channels {
            return Err(Error::shape(format!(
                "clip {rt}+{tt} frames of {h}x{w}x{c} does not match model {}+{} frames of {}x{}x{}",
                m.n_ref_frames, m.target_frames, m.height, m.width, m.channels
            )));
        }
        Ok(())
    }

    /// Lattice whose tokens are quantized (targets, or everything without a
    /// reference bypass).
    pub fn quantized_shape(&self) -> Result<GridShape> {
        self.model.quantized_shape()
    }

    /// Encoder half of [`Tokenizer::forward`]: `(h_r, h_t, loss target, lattice)`.
    pub fn encode_batch(
        &self,
        batch: &Batch,
        keep: Option<&[Vec<usize>]>,
    ) -> Result<(Option<Tensor>, Tensor, Tensor, GridShape)> {
        let ref_tau = self.model.ref_tau();
        Ok(match self.model.mode {
            TokenizerMode::Reftok => {
                let shape = self.model.target_shape()?;
                let (h_r, h_t) = self.encoder.forward(
                    Some(&batch.reference),
                    ref_tau,
                    &batch.target,
                    shape,
                    keep,
                    self.model.mask_mode,
                )?;
                (h_r, h_t, batch.target.clone(), shape)
            }
            TokenizerMode::ReferenceLess => {
                let shape = self.model.quantized_shape()?;
                let all = Tensor::cat(&[&batch.reference, &batch.target], 1)?;
                let (_, h) = self.encoder.forward(None, 0, &all, shape, keep, MaskMode::None)?;
                (None, h, all, shape)
            }
        })
    }

    /// One training/eval forward pass.
    pub fn forward(&self, batch: &Batch, keep: Option<&[Vec<usize>]>, quant: Quantization<'_>) -> Result<ForwardOutput> {
        let b = batch.size;
        let ref_tau = self.model.ref_tau();
        let (h_r, h_t, target, shape) = self.encode_batch(batch, keep)?;
        let (_, nk, cd) = h_t.dims3()?;
        let latents = h_t.reshape((b * nk, cd))?;
        let quant = match quant {
            Quantization::Nearest => quantize_tensor(&latents, &self.codebook)?,
            Quantization::Frozen { offset, codes, indices } => {
                let mut q = quantize_with_codes(&latents, codes.clone(), indices.to_vec(), 0.0)?;
                q.output = (&latents + offset)?;
                q
            }
        };
        self.record_bypass(quant.indices.len(), b * nk, h_r.as_ref())?;
        let z = quant.output.reshape((b, nk, cd))?;
        let prediction = self.decoder.forward(&z, keep, h_r.as_ref(), ref_tau, shape)?;
        Ok(ForwardOutput {
            prediction,
            target,
            latents,
            quant,
            keep: keep.map(|k| k.to_vec()),
            shape,
        })
    }

    fn record_bypass(&self, quantized: usize, expected: usize, h_r: Option<&Tensor>) -> Result<()> {
        let bypassed = match h_r {
            Some(t) => t.dims3()?.0 * t.dims3()?.1,
            None => 0,
        };
        self.probe.quantized_rows.fetch_add(quantized as u64, Ordering::Relaxed);
        self.probe.bypassed_rows.fetch_add(bypassed as u64, Ordering::Relaxed);
        let expect_bypass = self.model.mode == TokenizerMode::Reftok;
        if quantized != expected || (bypassed > 0) != expect_bypass {
            self.probe.violations.fetch_add(1, Ordering::Relaxed);
            return Err(Error::shape(format!(
                "quantizer saw {quantized} rows (expected {expected}); {bypassed} reference rows bypassed"
            )));
        }
        Ok(())
    }

    /// Continuous reference tokens from a reference-only pass.
    pub fn reference_tokens(&self, reference: &VideoClip) -> Result<TokenGrid> {
        self.encoder.encode_reference(reference, self.dtype(), self.device())
    }

    /// Discrete indices of one clip (no pruning), row-major over the
    /// quantized lattice.
    pub fn tokenize(&self, split: &ClipSplit) -> Result<Vec<u32>> {
        let batch = self.batch(std::slice::from_ref(split))?;
        let out = self.forward(&batch, None, Quantization::Nearest)?;
        Ok(out.quant.indices)
    }

    /// Decodes indices given the raw reference frames. Returns the target
    /// frames only.
    pub fn detokenize(&self, indices: &[u32], reference: &VideoClip) -> Result<VideoClip> {
        let shape = self.quantized_shape()?;
        if indices.len() != shape.sites() {
            return Err(Error::shape(format!(
                "{} indices for a {} site lattice",
                indices.len(),
                shape.sites()
            )));
        }
        let z = lookup(indices, &self.codebook)?;
        match self.model.mode {
            TokenizerMode::Reftok => {
                let h_r = self.reference_tokens(reference)?;
                self.decoder.decode(&z, Some(&h_r), &[], shape, self.dtype(), self.device())
            }
            TokenizerMode::ReferenceLess => {
                let all = self.decoder.decode(&z, None, &[], shape, self.dtype(), self.device())?;
                let skip = self.model.ref_tau() * self.model.patch.t;
                all.slice_frames(skip, all.t())
            }
        }
    }

    /// Decodes indices with the reference tokens of an edited reference.
    pub fn detokenize_with_edited_reference(&self, indices: &[u32], edited: &VideoClip) -> Result<VideoClip> {
        if self.model.mode != TokenizerMode::Reftok {
            return Err(Error::invalid("reference editing needs the reference bypass"));
        }
        let shape = self.quantized_shape()?;
        let z = lookup(indices, &self.codebook)?;
        let h_r = self.reference_tokens(edited)?;
        self.decoder
            .decode_with_edited_reference(&z, &h_r, &[], shape, self.dtype(), self.device())
    }

    /// Encode then decode through the discrete bottleneck; same path as a
    /// persisted stream, so the result is reproducible from indices alone.
    pub fn reconstruct(&self, split: &ClipSplit) -> Result<VideoClip> {
        let indices = self.tokenize(split)?;
        self.detokenize(&indices, &split.reference)
    }

    /// Frozen-offset quantization state for a batch: `(offset, codes, indices)`.
    pub fn freeze_quantization(&self, batch: &Batch, keep: Option<&[Vec<usize>]>) -> Result<(Tensor, Tensor, Vec<u32>)> {
        let out = self.forward(batch, keep, Quantization::Nearest)?;
        let offset = (&out.quant.codes - &out.latents)?.detach();
        Ok((offset, out.quant.codes.detach(), out.quant.indices))
    }

    /// Pixel tokens of the padded reference only, for diagnostics.
    pub fn reference_patch_tokens(&self, reference: &VideoClip) -> Result<TokenGrid> {
        patchify(&replicate_pad_reference(reference, self.model.patch.t), self.model.patch)
    }

    /// Host copy of the decoder output for one forward pass, clamped.
    pub fn prediction_values(out: &ForwardOutput) -> Result<Vec<f32>> {
        Ok(to_f32_vec(&out.prediction.clamp(0.0, 1.0)?)?)
    }
}
