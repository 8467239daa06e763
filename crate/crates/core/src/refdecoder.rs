//! Decoder: reconstructs target pixels from quantized target tokens with the
//! continuous reference tokens prepended to the same attention sequence.

use candle_core::{DType, Device, IndexOp, Tensor};
use serde::{Deserialize, Serialize};

use crate::dataio::VideoClip;
use crate::error::{Error, Result};
use crate::nn::{tensor_from_f32, to_f32_vec, Linear, ParamStore, Transformer, INIT_STD};
use crate::patchgrid::{unpatchify, GridShape, PatchSpec, TokenGrid};
use crate::refencoder::{axis_dims, kept_indices, positions_from_table, sincos_1d, PIXEL_MEAN, PIXEL_STD};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecoderConfig {
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: f64,
    pub patch: PatchSpec,
    pub channels: usize,
    /// Width of quantized target tokens.
    pub code_dim: usize,
    /// Width of the continuous reference tokens (the encoder embed dim).
    pub ref_dim: usize,
    pub max_tau: usize,
}

/// Places `mask_token` at every pruned position; surviving rows keep their
/// order. `pruned`: `(N_kept, D)`; `indices`: sorted pruned positions.
pub fn insert_mask_tokens(
    pruned: &Tensor,
    indices: &[usize],
    full_len: usize,
    mask_token: &Tensor,
) -> Result<Tensor> {
    let (nk, d) = pruned.dims2()?;
    validate_prune_set(indices, nk, full_len)?;
    if indices.is_empty() {
        return Ok(pruned.clone());
    }
    let table = Tensor::cat(&[pruned, &mask_token.reshape((1, d))?], 0)?;
    let map = fill_map(&kept_indices(full_len, indices), full_len, 0, nk);
    Ok(table.index_select(&Tensor::from_vec(map, full_len, pruned.device())?, 0)?)
}

fn validate_prune_set(indices: &[usize], kept: usize, full_len: usize) -> Result<()> {
    if kept + indices.len() != full_len {
        return Err(Error::shape(format!(
            "{kept} kept + {} pruned tokens != {full_len}",
            indices.len()
        )));
    }
    if indices.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::invalid("prune indices must be strictly increasing"));
    }
    if indices.last().is_some_and(|&i| i >= full_len) {
        return Err(Error::invalid("prune index beyond sequence length"));
    }
    Ok(())
}

/// Row map into `[kept rows of sample; mask row]` for one sample.
fn fill_map(kept: &[usize], full_len: usize, offset: usize, mask_row: usize) -> Vec<u32> {
    let mut map = vec![mask_row as u32; full_len];
    for (rank, &pos) in kept.iter().enumerate() {
        map[pos] = (offset + rank) as u32;
    }
    map
}

#[derive(Debug, Clone)]
pub struct Decoder {
    pub cfg: DecoderConfig,
    from_code: Linear,
    from_ref: Linear,
    mask_token: Tensor,
    segment: Tensor,
    body: Transformer,
    head: Linear,
    time_table: Vec<f32>,
}

impl Decoder {
    pub fn new(store: &mut ParamStore, cfg: DecoderConfig) -> Result<Self> {
        if cfg.embed_dim % cfg.heads.max(1) != 0 {
            return Err(Error::Config(format!(
                "decoder embed_dim {} not divisible by heads {}",
                cfg.embed_dim, cfg.heads
            )));
        }
        let d = cfg.embed_dim;
        let from_code = Linear::new(store, "decoder.from_code", cfg.code_dim, d, true)?;
        let from_ref = Linear::new(store, "decoder.from_ref", cfg.ref_dim, d, true)?;
        let mask_token = store.trunc_normal("decoder.mask_token", &[d], INIT_STD)?;
        let segment = store.trunc_normal("decoder.segment", &[2, d], INIT_STD)?;
        let body = Transformer::new(store, "decoder", d, cfg.depth, cfg.heads, cfg.mlp_ratio)?;
        let head = Linear::new(
            store,
            "decoder.head",
            d,
            cfg.patch.token_dim(cfg.channels),
            true,
        )?;
        let (dt, _, _) = axis_dims(d);
        let time_table = sincos_1d(dt, &(0..cfg.max_tau).collect::<Vec<_>>());
        Ok(Self {
            cfg,
            from_code,
            from_ref,
            mask_token,
            segment,
            body,
            head,
            time_table,
        })
    }

    pub fn mask_token(&self) -> &Tensor {
        &self.mask_token
    }

    fn add_position(&self, x: &Tensor, t0: usize, shape: GridShape, segment: usize) -> Result<Tensor> {
        let pos = positions_from_table(
            &self.time_table,
            self.cfg.embed_dim,
            t0,
            shape.tau,
            shape.eta,
            shape.omega,
        )?;
        let pos = tensor_from_f32(pos, &[shape.sites(), self.cfg.embed_dim], x.dtype(), x.device())?;
        Ok(x.broadcast_add(&pos)?.broadcast_add(&self.segment.i(segment)?)?)
    }

    /// Batched forward pass producing raw (unclamped) patch values for every
    /// target site: `(B, Nt, P)`.
    ///
    /// `z`: `(B, Nk, code_dim)` quantized target tokens; `keep`: per-sample
    /// surviving target positions (`None` when nothing was pruned);
    /// `h_r`: `(B, Nr, ref_dim)` continuous reference tokens over `ref_tau` slots.
    pub fn forward(
        &self,
        z: &Tensor,
        keep: Option<&[Vec<usize>]>,
        h_r: Option<&Tensor>,
        ref_tau: usize,
        tgt_shape: GridShape,
    ) -> Result<Tensor> {
        let (b, nk, _) = z.dims3()?;
        let nt = tgt_shape.sites();
        let d = self.cfg.embed_dim;
        let z = self.from_code.forward(z)?;
        let full = match keep {
            Some(keep) if nk < nt => {
                if keep.len() != b {
                    return Err(Error::shape("keep list length differs from batch"));
                }
                let mut map = Vec::with_capacity(b * nt);
                for (s, rows) in keep.iter().enumerate() {
                    if rows.len() != nk {
                        return Err(Error::shape("keep list does not match token count"));
                    }
                    let pruned = kept_indices(nt, rows);
                    validate_prune_set(&pruned, nk, nt)?;
                    map.extend(fill_map(rows, nt, s * nk, b * nk));
                }
                let table = Tensor::cat(&[&z.reshape((b * nk, d))?, &self.mask_token.reshape((1, d))?], 0)?;
                let idx = Tensor::from_vec(map, b * nt, z.device())?;
                table.index_select(&idx, 0)?.reshape((b, nt, d))?
            }
            _ => {
                if nk != nt {
                    return Err(Error::shape(format!(
                        "{nk} target tokens for a {nt} site lattice without a prune set"
                    )));
                }
                z
            }
        };
        let ref_tau = if h_r.is_some() { ref_tau } else { 0 };
        let tgt = self.add_position(&full, ref_tau, tgt_shape, 1)?;
        let (seq, nr) = match h_r {
            Some(h_r) => {
                let nr = h_r.dim(1)?;
                let shape = GridShape {
                    tau: ref_tau,
                    ..tgt_shape
                };
                if nr != shape.sites() {
                    return Err(Error::shape("reference token count does not match lattice"));
                }
                let r = self.add_position(&self.from_ref.forward(h_r)?, 0, shape, 0)?;
                (Tensor::cat(&[&r, &tgt], 1)?, nr)
            }
            None => (tgt, 0),
        };
        let h = self.body.forward(&seq, None)?;
        // the head predicts normalized pixels
        Ok(self.head.forward(&h.narrow(1, nr, nt)?)?.affine(PIXEL_STD, PIXEL_MEAN)?)
    }

    /// Decodes one clip's target frames. `z_t` holds the kept target tokens
    /// (`(N_t - |prune|) × code_dim`, row-major) and `h_r` the continuous
    /// reference grid. Output values are clamped to `[0, 1]`.
    pub fn decode(
        &self,
        z_t: &[f32],
        h_r: Option<&TokenGrid>,
        prune_indices: &[usize],
        target_shape: GridShape,
        dtype: DType,
        device: &Device,
    ) -> Result<VideoClip> {
        let nt = target_shape.sites();
        let cd = self.cfg.code_dim;
        if z_t.len() % cd != 0 {
            return Err(Error::shape("z_t width does not match code dim"));
        }
        let nk = z_t.len() / cd;
        validate_prune_set(prune_indices, nk, nt)?;
        let z = tensor_from_f32(z_t.to_vec(), &[1, nk, cd], dtype, device)?;
        let keep = vec![kept_indices(nt, prune_indices)];
        let (hr, ref_tau) = match h_r {
            Some(grid) => {
                let (dim, data) = grid
                    .continuous_data()
                    .ok_or_else(|| Error::shape("reference tokens must be continuous"))?;
                if dim != self.cfg.ref_dim {
                    return Err(Error::shape("reference token width mismatch"));
                }
                if (grid.shape.eta, grid.shape.omega) != (target_shape.eta, target_shape.omega) {
                    return Err(Error::shape("reference and target lattices differ spatially"));
                }
                (
                    Some(tensor_from_f32(data.to_vec(), &[1, grid.len(), dim], dtype, device)?),
                    grid.shape.tau,
                )
            }
            None => (None, 0),
        };
        let out = self.forward(&z, Some(&keep), hr.as_ref(), ref_tau, target_shape)?;
        let grid = TokenGrid::continuous(
            target_shape,
            self.cfg.patch.token_dim(self.cfg.channels),
            to_f32_vec(&out)?,
        )?;
        unpatchify(&grid, self.cfg.patch)
    }

    /// Same contract as [`Decoder::decode`]; `h_r_edited` comes from encoding
    /// an edited reference with the same encoder.
    pub fn decode_with_edited_reference(
        &self,
        z_t: &[f32],
        h_r_edited: &TokenGrid,
        prune_indices: &[usize],
        target_shape: GridShape,
        dtype: DType,
        device: &Device,
    ) -> Result<VideoClip> {
        self.decode(z_t, Some(h_r_edited), prune_indices, target_shape, dtype, device)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    fn seq(n: usize, d: usize) -> Tensor {
        Tensor::arange(0f32, (n * d) as f32, &Device::Cpu)
            .unwrap()
            .reshape((n, d))
            .unwrap()
    }

    #[test]
    fn insert_identity_and_all_masked() {
        let mask = Tensor::new(&[-1f32, -1.0], &Device::Cpu).unwrap();
        let x = seq(3, 2);
        let y = insert_mask_tokens(&x, &[], 3, &mask).unwrap();
        assert_eq!(y.to_vec2::<f32>().unwrap(), x.to_vec2::<f32>().unwrap());

        let empty = Tensor::zeros((0, 2), DType::F32, &Device::Cpu).unwrap();
        let y = insert_mask_tokens(&empty, &[0, 1, 2], 3, &mask).unwrap();
        assert_eq!(y.to_vec2::<f32>().unwrap(), vec![vec![-1.0, -1.0]; 3]);
    }

    #[test]
    fn insert_restores_positions() {
        let mask = Tensor::new(&[-1f32, -1.0], &Device::Cpu).unwrap();
        let full = seq(5, 2);
        let pruned_idx = [1usize, 3];
        let kept = kept_indices(5, &pruned_idx);
        let idx = Tensor::from_vec(kept.iter().map(|&k| k as u32).collect::<Vec<_>>(), 3, &Device::Cpu).unwrap();
        let pruned = full.index_select(&idx, 0).unwrap();
        let back = insert_mask_tokens(&pruned, &pruned_idx, 5, &mask).unwrap().to_vec2::<f32>().unwrap();
        let orig = full.to_vec2::<f32>().unwrap();
        for k in kept {
            assert_eq!(back[k], orig[k]);
        }
        for p in pruned_idx {
            assert_eq!(back[p], vec![-1.0, -1.0]);
        }
    }

    #[test]
    fn insert_rejects_bad_sets() {
        let mask = Tensor::new(&[0f32, 0.0], &Device::Cpu).unwrap();
        let x = seq(2, 2);
        assert!(insert_mask_tokens(&x, &[1, 1], 4, &mask).is_err());
        assert!(insert_mask_tokens(&x, &[5], 3, &mask).is_err());
        assert!(insert_mask_tokens(&x, &[0], 4, &mask).is_err());
    }
}
