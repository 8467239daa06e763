//! Joint reference/target transformer encoder.
//!
//! Reference and target tokens share one weight set and one timeline: the
//! reference occupies the earliest temporal slots. A one-way attention mask
//! keeps the reference outputs independent of every target token.

use candle_core::{DType, Device, IndexOp, Tensor};
use rand::seq::index::sample;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataio::{replicate_pad_reference, ClipSplit, VideoClip};
use crate::error::{Error, Result};
use crate::nn::{mask_bias, tensor_from_f32, to_f32_vec, Linear, ParamStore, Transformer, INIT_STD};
use crate::patchgrid::{patchify, GridShape, PatchSpec, TokenGrid};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskMode {
    Oneway,
    RefOnly,
    None,
}

/// Row-major `(n_ref + n_tgt)²` matrix; entry `(i, j)` is true when token `i`
/// may attend to token `j`. Reference tokens come first.
pub fn build_reference_attention_mask(n_ref: usize, n_tgt: usize, mode: MaskMode) -> Vec<bool> {
    let n = n_ref + n_tgt;
    let mut mask = vec![false; n * n];
    for i in 0..n {
        for j in 0..n {
            let (i_ref, j_ref) = (i < n_ref, j < n_ref);
            mask[i * n + j] = match mode {
                MaskMode::None => true,
                MaskMode::Oneway => (i_ref && j_ref) || !i_ref,
                MaskMode::RefOnly => {
                    if i_ref {
                        j_ref
                    } else {
                        j_ref || i == j
                    }
                }
            };
        }
    }
    mask
}

/// MAE-style 1D sin/cos table: `dim/2` sines followed by `dim/2` cosines. An
/// odd `dim` leaves the last column zero.
pub fn sincos_1d(dim: usize, positions: &[usize]) -> Vec<f32> {
    let half = dim / 2;
    let mut out = vec![0.0f32; positions.len() * dim];
    for (row, &p) in positions.iter().enumerate() {
        for i in 0..half {
            let omega = 1.0 / 10000f64.powf(i as f64 / half.max(1) as f64);
            let angle = p as f64 * omega;
            out[row * dim + i] = angle.sin() as f32;
            out[row * dim + half + i] = angle.cos() as f32;
        }
    }
    out
}

/// Pixels in `[0, 1]` are mapped to roughly unit scale before embedding.
pub const PIXEL_MEAN: f64 = 0.5;
pub const PIXEL_STD: f64 = 0.25;

pub(crate) fn normalize_pixels(x: &Tensor) -> Result<Tensor> {
    Ok(x.affine(1.0 / PIXEL_STD, -PIXEL_MEAN / PIXEL_STD)?)
}

/// Widths of the `(t, y, x)` parts of a `dim`-wide 3D position embedding.
pub fn axis_dims(dim: usize) -> (usize, usize, usize) {
    let spatial = (dim / 3) / 2 * 2;
    (dim - 2 * spatial, spatial, spatial)
}

/// Factorized 3D sinusoidal positions: each row concatenates the 1D
/// embeddings of its `t`, `y` and `x` coordinates. Rows enumerate the lattice
/// row-major over `(t, y, x)`.
pub fn build_3d_positions(tau: usize, eta: usize, omega: usize, dim: usize) -> Vec<f32> {
    let (dt, dy, dx) = axis_dims(dim);
    let t_tab = sincos_1d(dt, &(0..tau).collect::<Vec<_>>());
    let y_tab = sincos_1d(dy, &(0..eta).collect::<Vec<_>>());
    let x_tab = sincos_1d(dx, &(0..omega).collect::<Vec<_>>());
    let mut out = Vec::with_capacity(tau * eta * omega * dim);
    for t in 0..tau {
        for y in 0..eta {
            for x in 0..omega {
                out.extend_from_slice(&t_tab[t * dt..(t + 1) * dt]);
                out.extend_from_slice(&y_tab[y * dy..(y + 1) * dy]);
                out.extend_from_slice(&x_tab[x * dx..(x + 1) * dx]);
            }
        }
    }
    out
}

/// Sorted, distinct indices of `n` tokens to drop out of `len`.
pub fn choose_prune_indices<R: Rng>(len: usize, n: usize, rng: &mut R) -> Result<Vec<usize>> {
    if n >= len {
        return Err(Error::invalid(format!(
            "cannot prune {n} of {len} tokens (at least one must survive)"
        )));
    }
    let mut idx = sample(rng, len, n).into_vec();
    idx.sort_unstable();
    Ok(idx)
}

/// Complement of a sorted prune set.
pub fn kept_indices(len: usize, pruned: &[usize]) -> Vec<usize> {
    let mut out = Vec::with_capacity(len - pruned.len());
    let mut p = pruned.iter().peekable();
    for i in 0..len {
        if p.peek() == Some(&&i) {
            p.next();
        } else {
            out.push(i);
        }
    }
    out
}

/// Removes `n` random rows of an `(N, D)` token sequence. Surviving rows keep
/// their order; the returned indices are the removed rows, sorted.
pub fn prune_tokens<R: Rng>(tokens: &Tensor, n: usize, rng: &mut R) -> Result<(Tensor, Vec<usize>)> {
    let len = tokens.dim(0)?;
    let pruned = choose_prune_indices(len, n, rng)?;
    if pruned.is_empty() {
        return Ok((tokens.clone(), pruned));
    }
    let keep: Vec<u32> = kept_indices(len, &pruned).into_iter().map(|i| i as u32).collect();
    let keep = Tensor::from_vec(keep.clone(), keep.len(), tokens.device())?;
    Ok((tokens.index_select(&keep, 0)?, pruned))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: f64,
    pub patch: PatchSpec,
    pub channels: usize,
    /// Largest lattice the position table is built for.
    pub max_grid: GridShape,
    pub prune_max: usize,
    pub mask_mode: MaskMode,
    /// Width of the pre-quantization projection.
    pub code_dim: usize,
}

impl EncoderConfig {
    pub fn token_dim(&self) -> usize {
        self.patch.token_dim(self.channels)
    }
}

/// Everything the decoder needs: continuous reference tokens, target tokens
/// in code space (possibly pruned) and the pruned target indices.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentBundle {
    pub h_r: Option<TokenGrid>,
    /// `(kept targets) × code_dim`, row-major.
    pub h_t: Vec<f32>,
    pub code_dim: usize,
    pub target_shape: GridShape,
    pub prune_indices: Vec<usize>,
}

impl LatentBundle {
    pub fn kept(&self) -> usize {
        self.target_shape.sites() - self.prune_indices.len()
    }
}

/// Tokens of the replicate-padded reference and of the targets, as `(N, P)` rows.
pub fn split_tokens(split: &ClipSplit, patch: PatchSpec) -> Result<(TokenGrid, TokenGrid)> {
    let padded = replicate_pad_reference(&split.reference, patch.t);
    Ok((patchify(&padded, patch)?, patchify(&split.target, patch)?))
}

#[derive(Debug, Clone)]
pub struct Encoder {
    pub cfg: EncoderConfig,
    patch_embed: Linear,
    segment: Tensor,
    body: Transformer,
    to_code: Linear,
    time_table: Vec<f32>,
}

impl Encoder {
    pub fn new(store: &mut ParamStore, cfg: EncoderConfig) -> Result<Self> {
        if cfg.embed_dim % cfg.heads.max(1) != 0 {
            return Err(Error::Config(format!(
                "encoder embed_dim {} not divisible by heads {}",
                cfg.embed_dim, cfg.heads
            )));
        }
        let d = cfg.embed_dim;
        let patch_embed = Linear::new(store, "encoder.patch_embed", cfg.token_dim(), d, true)?;
        let segment = store.trunc_normal("encoder.segment", &[2, d], INIT_STD)?;
        let body = Transformer::new(store, "encoder", d, cfg.depth, cfg.heads, cfg.mlp_ratio)?;
        let to_code = Linear::new(store, "encoder.to_code", d, cfg.code_dim, true)?;
        let (dt, _, _) = axis_dims(d);
        let time_table = sincos_1d(dt, &(0..cfg.max_grid.tau).collect::<Vec<_>>());
        Ok(Self {
            cfg,
            patch_embed,
            segment,
            body,
            to_code,
            time_table,
        })
    }

    /// Position rows for temporal slots `t0..t0+tau` of an `eta × omega` lattice,
    /// sliced out of the max-length time table.
    pub fn positions(&self, t0: usize, tau: usize, eta: usize, omega: usize) -> Result<Vec<f32>> {
        positions_from_table(&self.time_table, self.cfg.embed_dim, t0, tau, eta, omega)
    }

    fn embed(&self, tokens: &Tensor, pos: Vec<f32>, segment: usize) -> Result<Tensor> {
        let n = tokens.dim(1)?;
        let pos = tensor_from_f32(pos, &[n, self.cfg.embed_dim], tokens.dtype(), tokens.device())?;
        let seg = self.segment.i(segment)?;
        Ok(self
            .patch_embed
            .forward(&normalize_pixels(tokens)?)?
            .broadcast_add(&pos)?
            .broadcast_add(&seg)?)
    }

    /// Batched forward pass.
    ///
    /// `ref_tokens`: `(B, Nr, P)` over a `ref_tau × eta × omega` lattice, or `None`
    /// (every token is then a target and attention is unrestricted).
    /// `tgt_tokens`: `(B, Nt, P)` over `tgt_tau × eta × omega`.
    /// `keep`: per-sample surviving target rows (same count for each sample).
    ///
    /// Returns `(h_r (B, Nr, D), h_t (B, Nk, code_dim))`.
    pub fn forward(
        &self,
        ref_tokens: Option<&Tensor>,
        ref_tau: usize,
        tgt_tokens: &Tensor,
        tgt_shape: GridShape,
        keep: Option<&[Vec<usize>]>,
        mode: MaskMode,
    ) -> Result<(Option<Tensor>, Tensor)> {
        let (b, nt, _) = tgt_tokens.dims3()?;
        let (eta, omega) = (tgt_shape.eta, tgt_shape.omega);
        if nt != tgt_shape.sites() {
            return Err(Error::shape(format!(
                "{nt} target tokens for a {} site lattice",
                tgt_shape.sites()
            )));
        }
        let ref_tau = if ref_tokens.is_some() { ref_tau } else { 0 };
        if ref_tau + tgt_shape.tau > self.cfg.max_grid.tau {
            return Err(Error::shape(format!(
                "{} temporal slots exceed max {}",
                ref_tau + tgt_shape.tau,
                self.cfg.max_grid.tau
            )));
        }
        let tgt = self.embed(
            tgt_tokens,
            self.positions(ref_tau, tgt_shape.tau, eta, omega)?,
            1,
        )?;
        let d = self.cfg.embed_dim;
        let tgt = match keep {
            Some(keep) => {
                if keep.len() != b {
                    return Err(Error::shape("keep list length differs from batch"));
                }
                let nk = keep[0].len();
                let mut flat = Vec::with_capacity(b * nk);
                for (s, rows) in keep.iter().enumerate() {
                    if rows.len() != nk || rows.iter().any(|&r| r >= nt) {
                        return Err(Error::shape("inconsistent keep lists"));
                    }
                    flat.extend(rows.iter().map(|&r| (s * nt + r) as u32));
                }
                let idx = Tensor::from_vec(flat, b * nk, tgt.device())?;
                tgt.reshape((b * nt, d))?
                    .index_select(&idx, 0)?
                    .reshape((b, nk, d))?
            }
            None => tgt,
        };
        let nk = tgt.dim(1)?;

        let (seq, nr, bias) = match ref_tokens {
            Some(r) => {
                let nr = r.dim(1)?;
                if nr != ref_tau * eta * omega {
                    return Err(Error::shape("reference token count does not match lattice"));
                }
                let ref_emb = self.embed(r, self.positions(0, ref_tau, eta, omega)?, 0)?;
                let seq = Tensor::cat(&[&ref_emb, &tgt], 1)?;
                let bias = match mode {
                    MaskMode::None => None,
                    m => Some(mask_bias(
                        &build_reference_attention_mask(nr, nk, m),
                        nr + nk,
                        seq.dtype(),
                        seq.device(),
                    )?),
                };
                (seq, nr, bias)
            }
            None => (tgt, 0, None),
        };
        let h = self.body.forward(&seq, bias.as_ref())?;
        let h_r = if nr > 0 { Some(h.narrow(1, 0, nr)?) } else { None };
        let h_t = self.to_code.forward(&h.narrow(1, nr, nk)?)?;
        Ok((h_r, h_t))
    }

    /// Reference-only pass. Under the one-way mask this equals the reference
    /// half of a joint pass.
    pub fn encode_reference(&self, reference: &VideoClip, dtype: DType, device: &Device) -> Result<TokenGrid> {
        let padded = replicate_pad_reference(reference, self.cfg.patch.t);
        let grid = patchify(&padded, self.cfg.patch)?;
        let (p, data) = grid.continuous_data().expect("patchify is continuous");
        let n = grid.len();
        let tokens = tensor_from_f32(data.to_vec(), &[1, n, p], dtype, device)?;
        let pos = self.positions(0, grid.shape.tau, grid.shape.eta, grid.shape.omega)?;
        let emb = self.embed(&tokens, pos, 0)?;
        let h = self.body.forward(&emb, None)?;
        TokenGrid::continuous(grid.shape, self.cfg.embed_dim, to_f32_vec(&h)?)
    }

    /// Single-clip encode. With `prune` set, a uniformly random number of
    /// target tokens in `[0, prune_max]` is dropped (seeded by `seed`).
    pub fn encode(
        &self,
        split: &ClipSplit,
        mode: MaskMode,
        prune: bool,
        seed: u64,
        dtype: DType,
        device: &Device,
    ) -> Result<LatentBundle> {
        let (ref_grid, tgt_grid) = split_tokens(split, self.cfg.patch)?;
        if ref_grid.shape.eta != tgt_grid.shape.eta || ref_grid.shape.omega != tgt_grid.shape.omega {
            return Err(Error::shape("reference and target lattices differ spatially"));
        }
        let nt = tgt_grid.len();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pruned = if prune {
            if self.cfg.prune_max >= nt {
                return Err(Error::Config(format!(
                    "prune_max {} must be below the {nt} target tokens",
                    self.cfg.prune_max
                )));
            }
            let n = rng.random_range(0..=self.cfg.prune_max);
            choose_prune_indices(nt, n, &mut rng)?
        } else {
            Vec::new()
        };
        let keep = vec![kept_indices(nt, &pruned)];
        let p = self.cfg.token_dim();
        let (_, rd) = ref_grid.continuous_data().unwrap();
        let (_, td) = tgt_grid.continuous_data().unwrap();
        let rt = tensor_from_f32(rd.to_vec(), &[1, ref_grid.len(), p], dtype, device)?;
        let tt = tensor_from_f32(td.to_vec(), &[1, nt, p], dtype, device)?;
        let (h_r, h_t) = self.forward(
            Some(&rt),
            ref_grid.shape.tau,
            &tt,
            tgt_grid.shape,
            Some(&keep),
            mode,
        )?;
        let h_r = TokenGrid::continuous(
            ref_grid.shape,
            self.cfg.embed_dim,
            to_f32_vec(&h_r.expect("reference present"))?,
        )?;
        Ok(LatentBundle {
            h_r: Some(h_r),
            h_t: to_f32_vec(&h_t)?,
            code_dim: self.cfg.code_dim,
            target_shape: tgt_grid.shape,
            prune_indices: pruned,
        })
    }
}

pub(crate) fn positions_from_table(
    time_table: &[f32],
    dim: usize,
    t0: usize,
    tau: usize,
    eta: usize,
    omega: usize,
) -> Result<Vec<f32>> {
    let (dt, dy, dx) = axis_dims(dim);
    if (t0 + tau) * dt > time_table.len() {
        return Err(Error::shape(format!(
            "temporal slots {t0}..{} exceed the position table",
            t0 + tau
        )));
    }
    let y_tab = sincos_1d(dy, &(0..eta).collect::<Vec<_>>());
    let x_tab = sincos_1d(dx, &(0..omega).collect::<Vec<_>>());
    let mut out = Vec::with_capacity(tau * eta * omega * dim);
    for t in t0..t0 + tau {
        for y in 0..eta {
            for x in 0..omega {
                out.extend_from_slice(&time_table[t * dt..(t + 1) * dt]);
                out.extend_from_slice(&y_tab[y * dy..(y + 1) * dy]);
                out.extend_from_slice(&x_tab[x * dx..(x + 1) * dx]);
            }
        }
    }
    Ok(out)
}
