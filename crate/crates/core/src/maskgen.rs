//! Masked-token generator over quantized target lattices, conditioned on
//! continuous reference tokens by sequence concatenation.

use std::path::Path;

use candle_core::{DType, Device, IndexOp, Tensor, D};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gumbel};
use serde::{Deserialize, Serialize};

use crate::checkpoint::{restore_store, store_tensors, Checkpoint, CheckpointKind};
use crate::codec::stored_reference;
use crate::config::{GenerateConfig, TokenizerMode};
use crate::dataio::ClipSplit;
use crate::error::{Error, Result};
use crate::model::Tokenizer;
use crate::nn::{tensor_from_f32, to_f32_vec, Linear, ParamStore, Transformer, INIT_STD};
use crate::patchgrid::{GridShape, TokenGrid};
use crate::refencoder::build_3d_positions;
use crate::trainer::AdamW;

/// Fraction of sites still masked at `step` of `total`: `cos(π/2 · step/total)`.
pub fn mask_fraction(step: usize, total: usize) -> Result<f64> {
    if total == 0 || step > total {
        return Err(Error::invalid(format!("step {step} outside schedule of {total}")));
    }
    Ok((std::f64::consts::FRAC_PI_2 * step as f64 / total as f64).cos())
}

/// Sites that are unmasked after `step` of `total` for an `n`-site lattice.
pub fn unmasked_after(n: usize, step: usize, total: usize) -> Result<usize> {
    let frac = if step == total { 0.0 } else { mask_fraction(step, total)? };
    Ok(((n as f64) * (1.0 - frac)).round() as usize)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GenSchedule {
    pub total_steps: usize,
    pub temperature: f64,
}

/// One exported training example.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenDatasetRecord {
    pub source_id: String,
    pub codebook_size: usize,
    pub target_shape: GridShape,
    pub indices: Vec<u32>,
    /// Continuous reference tokens from the frozen tokenizer.
    pub h_r: TokenGrid,
}

pub const RECORD_MAGIC: &[u8; 4] = b"RTKG";

impl TokenDatasetRecord {
    fn validate(&self) -> Result<()> {
        if self.indices.len() != self.target_shape.sites() {
            return Err(Error::shape("record index count does not match its lattice"));
        }
        if self.indices.iter().any(|&i| i as usize >= self.codebook_size) {
            return Err(Error::invalid("record index outside codebook"));
        }
        let (dim, _) = self
            .h_r
            .continuous_data()
            .ok_or_else(|| Error::shape("record reference tokens must be continuous"))?;
        if dim == 0 || self.h_r.shape.spatial() != self.target_shape.spatial() {
            return Err(Error::shape("record reference lattice does not match targets"));
        }
        Ok(())
    }

    /// `"RTKG"`, u32 τ η ω, u32 K, u32 reference τ, u32 reference width,
    /// u32 id length, id bytes, u32 indices, f32 reference tokens.
    pub fn write_to(&self, out: &mut Vec<u8>) -> Result<()> {
        self.validate()?;
        let (dim, data) = self.h_r.continuous_data().unwrap();
        out.extend_from_slice(RECORD_MAGIC);
        let s = self.target_shape;
        for v in [
            s.tau,
            s.eta,
            s.omega,
            self.codebook_size,
            self.h_r.shape.tau,
            dim,
            self.source_id.len(),
        ] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        out.extend_from_slice(self.source_id.as_bytes());
        for &i in &self.indices {
            out.extend_from_slice(&i.to_le_bytes());
        }
        for v in data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        Ok(())
    }

    /// Parses one record at the front of `bytes`; returns it and its length.
    pub fn read_from(bytes: &[u8]) -> Result<(Self, usize)> {
        let corrupt = |why: &str| Error::corrupt("token dataset", why.to_string());
        let mut pos = 0usize;
        let mut take = |n: usize| -> Result<&[u8]> {
            let end = pos.checked_add(n).filter(|&e| e <= bytes.len()).ok_or_else(|| corrupt("truncated record"))?;
            let s = &bytes[pos..end];
            pos = end;
            Ok(s)
        };
        if take(4)? != RECORD_MAGIC {
            return Err(corrupt("bad magic"));
        }
        let mut words = [0usize; 7];
        for w in words.iter_mut() {
            *w = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
        }
        let [tau, eta, omega, k, ref_tau, dim, id_len] = words;
        let source_id = String::from_utf8(take(id_len)?.to_vec()).map_err(|_| corrupt("id is not UTF-8"))?;
        let target_shape = GridShape { tau, eta, omega };
        let n = target_shape.sites();
        let indices = take(n.checked_mul(4).ok_or_else(|| corrupt("size overflow"))?)?
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let ref_shape = GridShape { tau: ref_tau, eta, omega };
        let m = ref_shape
            .sites()
            .checked_mul(dim)
            .and_then(|m| m.checked_mul(4))
            .ok_or_else(|| corrupt("size overflow"))?;
        let data = take(m)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let rec = Self {
            source_id,
            codebook_size: k,
            target_shape,
            indices,
            h_r: TokenGrid::continuous(ref_shape, dim, data)?,
        };
        rec.validate().map_err(|e| corrupt(&e.to_string()))?;
        Ok((rec, pos))
    }
}

pub fn write_token_dataset(path: impl AsRef<Path>, records: &[TokenDatasetRecord]) -> Result<()> {
    let mut out = Vec::new();
    for r in records {
        r.write_to(&mut out)?;
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn read_token_dataset(path: impl AsRef<Path>) -> Result<Vec<TokenDatasetRecord>> {
    let path = path.as_ref();
    if !path.exists() {
        return Err(Error::MissingPath(path.to_path_buf()));
    }
    let bytes = std::fs::read(path)?;
    let mut out = Vec::new();
    let mut pos = 0;
    while pos < bytes.len() {
        let (rec, used) = TokenDatasetRecord::read_from(&bytes[pos..])?;
        out.push(rec);
        pos += used;
    }
    Ok(out)
}

/// Tokenizes clips with a frozen tokenizer into generator training records.
pub fn export_token_dataset(tok: &Tokenizer, splits: &[ClipSplit]) -> Result<Vec<TokenDatasetRecord>> {
    if tok.mode() != TokenizerMode::Reftok {
        return Err(Error::Config("token export needs a tokenizer with the reference bypass".into()));
    }
    splits
        .iter()
        .map(|split| {
            let split = stored_reference(split)?;
            Ok(TokenDatasetRecord {
                source_id: split.reference.source_id.clone(),
                codebook_size: tok.codebook.k(),
                target_shape: tok.quantized_shape()?,
                indices: tok.tokenize(&split)?,
                h_r: tok.reference_tokens(&split.reference)?,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub generate: GenerateConfig,
    pub codebook_size: usize,
    pub ref_dim: usize,
    pub ref_shape: GridShape,
    pub target_shape: GridShape,
}

impl GeneratorConfig {
    pub fn for_records(generate: GenerateConfig, records: &[TokenDatasetRecord]) -> Result<Self> {
        let first = records.first().ok_or_else(|| Error::invalid("empty token dataset"))?;
        Ok(Self {
            generate,
            codebook_size: first.codebook_size,
            ref_dim: first.h_r.continuous_data().unwrap().0,
            ref_shape: first.h_r.shape,
            target_shape: first.target_shape,
        })
    }

    pub fn mask_id(&self) -> u32 {
        self.codebook_size as u32
    }
}

pub struct Generator {
    pub cfg: GeneratorConfig,
    pub store: ParamStore,
    token_embed: Tensor,
    from_ref: Linear,
    segment: Tensor,
    body: Transformer,
    head: Linear,
    positions: Tensor,
}

impl Generator {
    pub fn new(cfg: GeneratorConfig, dtype: DType) -> Result<Self> {
        cfg.generate.validate()?;
        let g = &cfg.generate;
        let d = g.embed_dim;
        let mut store = ParamStore::new(g.seed, dtype);
        let token_embed = store.trunc_normal("gen.token_embed", &[cfg.codebook_size + 1, d], INIT_STD)?;
        let from_ref = Linear::new(&mut store, "gen.from_ref", cfg.ref_dim, d, true)?;
        let segment = store.trunc_normal("gen.segment", &[2, d], INIT_STD)?;
        let body = Transformer::new(&mut store, "gen", d, g.depth, g.heads, g.mlp_ratio)?;
        let head = Linear::new(&mut store, "gen.head", d, cfg.codebook_size, true)?;
        let (r, t) = (cfg.ref_shape, cfg.target_shape);
        if (r.eta, r.omega) != (t.eta, t.omega) {
            return Err(Error::shape("reference and target lattices differ spatially"));
        }
        let pos = build_3d_positions(r.tau + t.tau, t.eta, t.omega, d);
        let positions = tensor_from_f32(pos, &[r.sites() + t.sites(), d], dtype, store.device())?;
        Ok(Self {
            cfg,
            store,
            token_embed,
            from_ref,
            segment,
            body,
            head,
            positions,
        })
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype()
    }

    fn device(&self) -> &Device {
        self.store.device()
    }

    /// Logits `(B, Nt, K)` for token ids `(B, Nt)` (mask id = K) given
    /// reference tokens `(B, Nr, ref_dim)`.
    pub fn logits(&self, ids: &Tensor, h_r: &Tensor) -> Result<Tensor> {
        let (b, nt) = ids.dims2()?;
        let nr = h_r.dim(1)?;
        let d = self.cfg.generate.embed_dim;
        let tok = self
            .token_embed
            .embedding(&ids.flatten_all()?)?
            .reshape((b, nt, d))?
            .broadcast_add(&self.segment.i(1)?)?;
        let r = self.from_ref.forward(h_r)?.broadcast_add(&self.segment.i(0)?)?;
        let seq = Tensor::cat(&[&r, &tok], 1)?.broadcast_add(&self.positions)?;
        let h = self.body.forward(&seq, None)?;
        self.head.forward(&h.narrow(1, nr, nt)?)
    }

    fn reference_batch(&self, records: &[&TokenDatasetRecord]) -> Result<Tensor> {
        let mut data = Vec::new();
        for r in records {
            data.extend_from_slice(r.h_r.continuous_data().unwrap().1);
        }
        tensor_from_f32(
            data,
            &[records.len(), self.cfg.ref_shape.sites(), self.cfg.ref_dim],
            self.dtype(),
            self.device(),
        )
    }

    fn check_record(&self, r: &TokenDatasetRecord) -> Result<()> {
        let c = &self.cfg;
        if r.target_shape != c.target_shape
            || r.h_r.shape != c.ref_shape
            || r.codebook_size > c.codebook_size
            || r.h_r.continuous_data().map(|x| x.0) != Some(c.ref_dim)
        {
            return Err(Error::Config(format!(
                "record `{}` does not match the generator geometry",
                r.source_id
            )));
        }
        Ok(())
    }
}

/// Cross-entropy over masked sites only. `masked` holds 1 where the input
/// was masked, 0 elsewhere.
pub fn masked_cross_entropy(logits: &Tensor, targets: &Tensor, masked: &Tensor) -> Result<Tensor> {
    let logp = candle_nn::ops::log_softmax(logits, D::Minus1)?;
    let picked = logp.gather(&targets.unsqueeze(D::Minus1)?, D::Minus1)?.squeeze(D::Minus1)?;
    let count = masked.sum_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
    if count <= 0.0 {
        return Err(Error::invalid("no masked sites"));
    }
    Ok(((picked * masked)?.sum_all()?.neg()? / count)?)
}

/// Random mask for one lattice: ratio drawn from the cosine schedule, at
/// least one site masked.
fn draw_mask<R: Rng>(n: usize, ratio: Option<f64>, rng: &mut R) -> Vec<bool> {
    let r = ratio.unwrap_or_else(|| (std::f64::consts::FRAC_PI_2 * rng.random::<f64>()).cos());
    let count = ((r * n as f64).ceil() as usize).clamp(1, n);
    let mut mask = vec![false; n];
    for i in sample(rng, n, count) {
        mask[i] = true;
    }
    mask
}

struct MaskedBatch {
    ids: Tensor,
    targets: Tensor,
    masked: Tensor,
    mask: Vec<bool>,
}

fn masked_batch<R: Rng>(
    gen: &Generator,
    records: &[&TokenDatasetRecord],
    ratio: Option<f64>,
    rng: &mut R,
) -> Result<MaskedBatch> {
    let n = gen.cfg.target_shape.sites();
    let (mut ids, mut targets, mut mask_all) = (Vec::new(), Vec::new(), Vec::new());
    for r in records {
        let mask = draw_mask(n, ratio, rng);
        for (i, &m) in mask.iter().enumerate() {
            ids.push(if m { gen.cfg.mask_id() } else { r.indices[i] });
            targets.push(r.indices[i]);
        }
        mask_all.extend(mask);
    }
    let b = records.len();
    let dev = gen.device();
    let masked: Vec<f32> = mask_all.iter().map(|&m| f32::from(u8::from(m))).collect();
    Ok(MaskedBatch {
        ids: Tensor::from_vec(ids, (b, n), dev)?,
        targets: Tensor::from_vec(targets, (b, n), dev)?,
        masked: Tensor::from_vec(masked, (b, n), dev)?.to_dtype(gen.dtype())?,
        mask: mask_all,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenStepMetrics {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
}

/// Trains a fresh generator on exported records.
pub fn train_generator(
    records: &[TokenDatasetRecord],
    generate: &GenerateConfig,
    mut on_step: impl FnMut(&GenStepMetrics),
) -> Result<Generator> {
    let cfg = GeneratorConfig::for_records(generate.clone(), records)?;
    let gen = Generator::new(cfg, DType::F32)?;
    for r in records {
        gen.check_record(r)?;
    }
    let mut opt = AdamW::new(&gen.store, (0.9, 0.99), 0.0)?;
    let warmup = (generate.steps / 20).max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(generate.seed ^ 0x6e6e);
    for step in 0..generate.steps {
        let lr = if step < warmup {
            generate.lr * (step + 1) as f64 / warmup as f64
        } else {
            let p = (step - warmup) as f64 / (generate.steps - warmup).max(1) as f64;
            0.5 * generate.lr * (1.0 + (std::f64::consts::PI * p).cos())
        };
        let picks: Vec<&TokenDatasetRecord> = (0..generate.batch_size)
            .map(|_| &records[rng.random_range(0..records.len())])
            .collect();
        let batch = masked_batch(&gen, &picks, None, &mut rng)?;
        let logits = gen.logits(&batch.ids, &gen.reference_batch(&picks)?)?;
        let loss = masked_cross_entropy(&logits, &batch.targets, &batch.masked)?;
        let value = loss.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        if !value.is_finite() {
            return Err(Error::Numeric(format!("generator loss {value} at step {step}")));
        }
        opt.step(&gen.store, &loss.backward()?, lr, 1.0)?;
        on_step(&GenStepMetrics { step: step + 1, loss: value, lr });
    }
    Ok(gen)
}

/// Fraction of masked sites predicted correctly (argmax) at a fixed mask
/// ratio. With `shuffle_reference`, each record is paired with another
/// record's reference tokens (a cyclic shift).
pub fn masked_accuracy(
    gen: &Generator,
    records: &[TokenDatasetRecord],
    ratio: f64,
    seed: u64,
    shuffle_reference: bool,
) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::invalid("empty token dataset"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut hit, mut total) = (0usize, 0usize);
    for (i, chunk) in records.chunks(8).enumerate() {
        let picks: Vec<&TokenDatasetRecord> = chunk.iter().collect();
        let refs: Vec<&TokenDatasetRecord> = if shuffle_reference {
            (0..chunk.len())
                .map(|j| &records[(i * 8 + j + 1) % records.len()])
                .collect()
        } else {
            picks.clone()
        };
        let batch = masked_batch(gen, &picks, Some(ratio), &mut rng)?;
        let pred = gen
            .logits(&batch.ids, &gen.reference_batch(&refs)?)?
            .argmax(D::Minus1)?
            .flatten_all()?
            .to_vec1::<u32>()?;
        let truth = batch.targets.flatten_all()?.to_vec1::<u32>()?;
        for ((p, t), &m) in pred.iter().zip(&truth).zip(&batch.mask) {
            if m {
                total += 1;
                hit += usize::from(p == t);
            }
        }
    }
    Ok(hit as f64 / total as f64)
}

/// Iterative parallel decoding from an all-masked lattice.
pub fn generate_tokens(gen: &Generator, h_r: &TokenGrid, schedule: &GenSchedule, seed: u64) -> Result<Vec<u32>> {
    if schedule.total_steps == 0 {
        return Err(Error::invalid("generation schedule needs at least one step"));
    }
    let (dim, data) = h_r
        .continuous_data()
        .ok_or_else(|| Error::shape("reference tokens must be continuous"))?;
    if dim != gen.cfg.ref_dim || h_r.shape != gen.cfg.ref_shape {
        return Err(Error::shape("reference tokens do not match the generator"));
    }
    let href = tensor_from_f32(data.to_vec(), &[1, h_r.len(), dim], gen.dtype(), gen.device())?;
    let n = gen.cfg.target_shape.sites();
    let k = gen.cfg.codebook_size;
    let mask_id = gen.cfg.mask_id();
    let mut ids = vec![mask_id; n];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gumbel = Gumbel::new(0.0, 1.0).expect("unit gumbel");
    let total = schedule.total_steps;
    for s in 1..=total {
        let temp = schedule.temperature * (1.0 - s as f64 / total as f64);
        let input = Tensor::from_vec(ids.clone(), (1, n), gen.device())?;
        let logits = to_f32_vec(&gen.logits(&input, &href)?)?;
        let mut candidates: Vec<(f64, usize, u32)> = Vec::new();
        for site in (0..n).filter(|&i| ids[i] == mask_id) {
            let row = &logits[site * k..(site + 1) * k];
            let max = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max) as f64;
            let z: f64 = row.iter().map(|&l| (l as f64 - max).exp()).sum();
            let token = if temp > 0.0 {
                let noisy = row
                    .iter()
                    .map(|&l| l as f64 / temp + gumbel.sample(&mut rng))
                    .enumerate()
                    .max_by(|a, b| a.1.total_cmp(&b.1))
                    .unwrap();
                noisy.0
            } else {
                row.iter()
                    .enumerate()
                    .max_by(|a, b| a.1.total_cmp(b.1).then(b.0.cmp(&a.0)))
                    .unwrap()
                    .0
            };
            let prob = (row[token] as f64 - max).exp() / z;
            let noise = if temp > 0.0 { temp * gumbel.sample(&mut rng) } else { 0.0 };
            candidates.push((prob.ln() + noise, site, token as u32));
        }
        let already = n - candidates.len();
        let goal = unmasked_after(n, s, total)?.max(already);
        candidates.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        for &(_, site, token) in candidates.iter().take(goal - already) {
            ids[site] = token;
        }
    }
    debug_assert!(ids.iter().all(|&i| (i as usize) < k));
    Ok(ids)
}

pub fn generator_checkpoint(gen: &Generator) -> Result<Checkpoint> {
    Ok(Checkpoint {
        kind: CheckpointKind::Generator,
        header: serde_json::json!({ "generator": gen.cfg }),
        tensors: store_tensors(&gen.store, "")?,
        codebook: None,
    })
}

pub fn load_generator(path: impl AsRef<Path>) -> Result<Generator> {
    let ckpt = Checkpoint::load(path)?;
    if ckpt.kind != CheckpointKind::Generator {
        return Err(Error::Config("expected a generator checkpoint".into()));
    }
    let cfg: GeneratorConfig = ckpt.header_field("generator")?;
    let gen = Generator::new(cfg, DType::F32)?;
    restore_store(&gen.store, &ckpt, "")?;
    Ok(gen)
}
