//! Vector-quantization bottleneck.
//!
//! The codebook lives on the host in `f32` and is updated by exponential
//! moving averages rather than gradients. `usage` holds the EMA assignment
//! counts; code vectors follow `e_k = m_k / N_k` with the running sums `m_k`
//! reconstructed from `e_k · N_k`, so a code that stops receiving assignments
//! keeps its vector.

use candle_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::tensor_from_f32;

pub const CODEBOOK_MAGIC: &[u8; 4] = b"RTKB";

#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    k: usize,
    dim: usize,
    vectors: Vec<f32>,
    usage: Vec<f32>,
}

impl Codebook {
    pub fn new(k: usize, dim: usize, vectors: Vec<f32>, usage: Vec<f32>) -> Result<Self> {
        if k == 0 || dim == 0 {
            return Err(Error::invalid("codebook needs K >= 1 and D >= 1"));
        }
        if vectors.len() != k * dim || usage.len() != k {
            return Err(Error::shape(format!(
                "codebook {k}x{dim} got {} vector values and {} usage counters",
                vectors.len(),
                usage.len()
            )));
        }
        if vectors.iter().chain(&usage).any(|v| !v.is_finite()) {
            return Err(Error::Numeric("codebook holds NaN/Inf".into()));
        }
        if usage.iter().any(|&u| u < 0.0) {
            return Err(Error::invalid("negative usage counter"));
        }
        Ok(Self {
            k,
            dim,
            vectors,
            usage,
        })
    }

    pub fn from_vectors(k: usize, dim: usize, vectors: Vec<f32>) -> Result<Self> {
        Self::new(k, dim, vectors, vec![0.0; k])
    }

    /// `k` codes drawn without replacement from the rows of `data` (with
    /// repetition once rows run out).
    pub fn from_samples<R: Rng>(data: &[f32], dim: usize, k: usize, rng: &mut R) -> Result<Self> {
        let n = data.len() / dim.max(1);
        if n == 0 {
            return Err(Error::invalid("cannot seed a codebook from empty data"));
        }
        let mut order: Vec<usize> = (0..n).collect();
        rand::seq::SliceRandom::shuffle(order.as_mut_slice(), rng);
        let mut vectors = Vec::with_capacity(k * dim);
        for i in 0..k {
            let row = order[i % n];
            vectors.extend_from_slice(&data[row * dim..(row + 1) * dim]);
        }
        Self::from_vectors(k, dim, vectors)
    }

    pub fn k(&self) -> usize {
        self.k
    }
    pub fn dim(&self) -> usize {
        self.dim
    }
    pub fn vectors(&self) -> &[f32] {
        &self.vectors
    }
    pub fn usage(&self) -> &[f32] {
        &self.usage
    }
    pub fn code(&self, i: usize) -> &[f32] {
        &self.vectors[i * self.dim..(i + 1) * self.dim]
    }

    /// Nearest code by squared L2 distance; ties go to the lowest index.
    pub fn nearest(&self, v: &[f32]) -> (usize, f64) {
        let mut best = (0usize, f64::INFINITY);
        for k in 0..self.k {
            let dist: f64 = self
                .code(k)
                .iter()
                .zip(v)
                .map(|(&c, &x)| {
                    let d = c as f64 - x as f64;
                    d * d
                })
                .sum();
            if dist < best.1 {
                best = (k, dist);
            }
        }
        best
    }

    pub fn assign(&self, data: &[f32]) -> Result<Vec<u32>> {
        self.check_rows(data)?;
        Ok(data
            .chunks_exact(self.dim)
            .map(|v| self.nearest(v).0 as u32)
            .collect())
    }

    fn check_rows(&self, data: &[f32]) -> Result<usize> {
        if data.is_empty() {
            return Err(Error::invalid("empty input to quantizer"));
        }
        if data.len() % self.dim != 0 {
            return Err(Error::shape(format!(
                "input width does not match codebook dim {}",
                self.dim
            )));
        }
        Ok(data.len() / self.dim)
    }

    /// Usage shares summing to 1 (all zeros when nothing has been counted).
    pub fn usage_shares(&self) -> Vec<f64> {
        let total: f64 = self.usage.iter().map(|&u| u as f64).sum();
        if total <= 0.0 {
            return vec![0.0; self.k];
        }
        self.usage.iter().map(|&u| u as f64 / total).collect()
    }

    pub fn entropy(&self) -> f64 {
        self.usage_shares()
            .iter()
            .filter(|&&p| p > 0.0)
            .map(|&p| -p * p.ln())
            .sum()
    }

    /// `exp(entropy)` of the usage distribution; 0 before any counts.
    pub fn perplexity(&self) -> f64 {
        if self.usage.iter().all(|&u| u == 0.0) {
            0.0
        } else {
            self.entropy().exp()
        }
    }

    /// Fraction of codes whose share is at least `threshold` of the uniform share `1/K`.
    pub fn utilization(&self, threshold: f64) -> f64 {
        let cut = threshold / self.k as f64;
        let live = self
            .usage_shares()
            .iter()
            .filter(|&&p| p > 0.0 && p >= cut)
            .count();
        live as f64 / self.k as f64
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(12 + 4 * (self.vectors.len() + self.k));
        out.extend_from_slice(CODEBOOK_MAGIC);
        out.extend_from_slice(&(self.k as u32).to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        for v in self.vectors.iter().chain(&self.usage) {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    /// Parses a codebook block; returns it with the number of bytes consumed.
    pub fn from_bytes(bytes: &[u8]) -> Result<(Self, usize)> {
        if bytes.len() < 12 || &bytes[..4] != CODEBOOK_MAGIC {
            return Err(Error::corrupt("codebook", "missing RTKB header"));
        }
        let k = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        let dim = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let n = k
            .checked_mul(dim)
            .and_then(|v| v.checked_add(k))
            .ok_or_else(|| Error::corrupt("codebook", "dimension overflow"))?;
        let end = 12 + 4 * n;
        if bytes.len() < end {
            return Err(Error::corrupt("codebook", "truncated codebook block"));
        }
        let floats: Vec<f32> = bytes[12..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let (vectors, usage) = floats.split_at(k * dim);
        let book = Self::new(k, dim, vectors.to_vec(), usage.to_vec())
            .map_err(|e| Error::corrupt("codebook", e.to_string()))?;
        Ok((book, end))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantizeResult {
    pub indices: Vec<u32>,
    pub quantized: Vec<f32>,
    pub codebook_loss: f64,
    pub commitment_loss: f64,
}

/// Nearest-code assignment of `h` (`N × D`, row-major). Both losses are the
/// mean squared distance between inputs and their codes; they differ only in
/// which side carries the gradient, which does not matter on the host.
pub fn quantize(h: &[f32], book: &Codebook) -> Result<QuantizeResult> {
    let n = book.check_rows(h)?;
    let mut indices = Vec::with_capacity(n);
    let mut quantized = Vec::with_capacity(h.len());
    let mut sq = 0.0;
    for v in h.chunks_exact(book.dim) {
        let (k, dist) = book.nearest(v);
        indices.push(k as u32);
        quantized.extend_from_slice(book.code(k));
        sq += dist;
    }
    let mse = sq / h.len() as f64;
    Ok(QuantizeResult {
        indices,
        quantized,
        codebook_loss: mse,
        commitment_loss: mse,
    })
}

pub fn lookup(indices: &[u32], book: &Codebook) -> Result<Vec<f32>> {
    let mut out = Vec::with_capacity(indices.len() * book.dim);
    for &i in indices {
        if i as usize >= book.k {
            return Err(Error::invalid(format!(
                "index {i} outside codebook of size {}",
                book.k
            )));
        }
        out.extend_from_slice(book.code(i as usize));
    }
    Ok(out)
}

/// Raw per-code counts of one batch of assignments.
pub fn batch_counts(indices: &[u32], k: usize) -> Vec<usize> {
    let mut counts = vec![0usize; k];
    for &i in indices {
        counts[i as usize] += 1;
    }
    counts
}

/// EMA update of the usage counters only.
pub fn update_usage(book: &Codebook, indices: &[u32], decay: f32) -> Result<Codebook> {
    if let Some(i) = indices.iter().find(|&&i| i as usize >= book.k) {
        return Err(Error::invalid(format!("index {i} outside codebook")));
    }
    let counts = batch_counts(indices, book.k);
    let mut out = book.clone();
    for (u, &c) in out.usage.iter_mut().zip(&counts) {
        *u = decay * *u + (1.0 - decay) * c as f32;
    }
    Ok(out)
}

/// EMA update of usage counters and code vectors from one batch of inputs
/// and their assignments.
pub fn ema_update(book: &Codebook, h: &[f32], indices: &[u32], decay: f32) -> Result<Codebook> {
    let n = book.check_rows(h)?;
    if indices.len() != n {
        return Err(Error::shape("one index per input row required"));
    }
    let dim = book.dim;
    let counts = batch_counts(indices, book.k);
    let mut sums = vec![0f64; book.k * dim];
    for (row, &i) in h.chunks_exact(dim).zip(indices) {
        let s = &mut sums[i as usize * dim..(i as usize + 1) * dim];
        for (a, &b) in s.iter_mut().zip(row) {
            *a += b as f64;
        }
    }
    let mut out = book.clone();
    let g = decay as f64;
    for k in 0..book.k {
        let old_n = book.usage[k] as f64;
        let new_n = g * old_n + (1.0 - g) * counts[k] as f64;
        out.usage[k] = new_n as f32;
        if new_n <= 1e-12 {
            continue;
        }
        for d in 0..dim {
            let m = g * book.vectors[k * dim + d] as f64 * old_n + (1.0 - g) * sums[k * dim + d];
            out.vectors[k * dim + d] = (m / new_n) as f32;
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "policy")]
pub enum SplitPolicy {
    /// LBG doubling: each code `c` becomes `c(1+eps)` and `c(1-eps)`.
    Double { eps: f32, k_max: usize },
    /// Codes whose usage share is below `threshold / K` are re-seeded as
    /// perturbed copies of the highest-usage code.
    DeadReplace { threshold: f64, eps: f32 },
}

fn perturb(v: f32, eps: f32, sign: f32) -> f32 {
    if v == 0.0 {
        sign * eps
    } else {
        v * (1.0 + sign * eps)
    }
}

/// Applies a split policy. `protected` lists codes assigned in the
/// triggering batch; dead-code replacement never touches them.
pub fn split_codebook<R: Rng>(
    book: &Codebook,
    policy: &SplitPolicy,
    protected: &[u32],
    rng: &mut R,
) -> Result<Codebook> {
    match *policy {
        SplitPolicy::Double { eps, k_max } => {
            let k2 = book.k * 2;
            if k2 > k_max {
                return Err(Error::invalid(format!(
                    "doubling K={} would exceed K_max={k_max}",
                    book.k
                )));
            }
            let mut vectors = Vec::with_capacity(k2 * book.dim);
            vectors.extend(book.vectors.iter().map(|&v| perturb(v, eps, 1.0)));
            vectors.extend(book.vectors.iter().map(|&v| perturb(v, eps, -1.0)));
            let half: Vec<f32> = book.usage.iter().map(|&u| u / 2.0).collect();
            let mut usage = half.clone();
            usage.extend(half);
            Codebook::new(k2, book.dim, vectors, usage)
        }
        SplitPolicy::DeadReplace { threshold, eps } => {
            let mut out = book.clone();
            let total: f64 = book.usage.iter().map(|&u| u as f64).sum();
            if total <= 0.0 {
                return Ok(out);
            }
            let cut = threshold / book.k as f64 * total;
            let mut keep = vec![false; book.k];
            for &i in protected {
                if (i as usize) < book.k {
                    keep[i as usize] = true;
                }
            }
            let dead: Vec<usize> = (0..book.k)
                .filter(|&k| !keep[k] && (book.usage[k] as f64) < cut)
                .collect();
            let dim = book.dim;
            for d in dead {
                let top = (0..out.k)
                    .max_by(|&a, &b| out.usage[a].total_cmp(&out.usage[b]).then(b.cmp(&a)))
                    .expect("K >= 1");
                if top == d {
                    continue;
                }
                let src = out.code(top).to_vec();
                let norm = (src.iter().map(|v| v * v).sum::<f32>() / dim as f32).sqrt().max(1e-6);
                for (j, s) in src.iter().enumerate() {
                    let z: f32 = StandardNormal.sample(rng);
                    out.vectors[d * dim + j] = s + eps * norm * z;
                }
                let share = out.usage[top] / 2.0;
                out.usage[top] = share;
                out.usage[d] = share;
            }
            Ok(out)
        }
    }
}

/// Mean squared error per element between rows of `data` and their nearest codes.
pub fn quantization_mse(data: &[f32], book: &Codebook) -> Result<f64> {
    book.check_rows(data)?;
    let total: f64 = data.chunks_exact(book.dim).map(|v| book.nearest(v).1).sum();
    Ok(total / data.len() as f64)
}

/// Lloyd iterations: assign each row to its nearest code, then move each code
/// to the centroid of its rows. An empty cluster is re-seeded at the row of
/// the largest cluster farthest from that cluster's code.
///
/// Returns the refined codebook and the MSE after every iteration.
pub fn refine_assignments(data: &[f32], book: &Codebook, iters: usize) -> Result<(Codebook, Vec<f64>)> {
    if iters == 0 {
        return Err(Error::invalid("refine_assignments needs at least one iteration"));
    }
    let n = book.check_rows(data)?;
    let dim = book.dim;
    let mut out = book.clone();
    let mut history = Vec::with_capacity(iters);
    for _ in 0..iters {
        let assign: Vec<(usize, f64)> = data.chunks_exact(dim).map(|v| out.nearest(v)).collect();
        let mut counts = vec![0usize; out.k];
        let mut sums = vec![0f64; out.k * dim];
        for (row, &(k, _)) in assign.iter().enumerate() {
            counts[k] += 1;
            for d in 0..dim {
                sums[k * dim + d] += data[row * dim + d] as f64;
            }
        }
        for k in 0..out.k {
            if counts[k] > 0 {
                for d in 0..dim {
                    out.vectors[k * dim + d] = (sums[k * dim + d] / counts[k] as f64) as f32;
                }
            }
        }
        for k in 0..out.k {
            if counts[k] > 0 {
                continue;
            }
            let largest = (0..out.k).max_by_key(|&c| (counts[c], std::cmp::Reverse(c))).unwrap();
            if counts[largest] < 2 {
                break;
            }
            let far = (0..n)
                .filter(|&r| assign[r].0 == largest)
                .max_by(|&a, &b| {
                    let da = sqdist(&data[a * dim..(a + 1) * dim], out.code(largest));
                    let db = sqdist(&data[b * dim..(b + 1) * dim], out.code(largest));
                    da.total_cmp(&db)
                })
                .unwrap();
            out.vectors[k * dim..(k + 1) * dim].copy_from_slice(&data[far * dim..(far + 1) * dim]);
            counts[largest] -= 1;
            counts[k] = 1;
        }
        for (k, c) in counts.iter().enumerate() {
            out.usage[k] = *c as f32;
        }
        history.push(quantization_mse(data, &out)?);
    }
    Ok((out, history))
}

fn sqdist(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum()
}

/// Linde-Buzo-Gray: start from the global centroid and alternate doubling
/// with Lloyd refinement until at least `target_k` codes exist.
pub fn lbg(data: &[f32], dim: usize, target_k: usize, eps: f32, iters: usize) -> Result<Codebook> {
    if data.is_empty() || data.len() % dim != 0 {
        return Err(Error::invalid("LBG needs non-empty data of the given width"));
    }
    let n = data.len() / dim;
    let mut centroid = vec![0f64; dim];
    for row in data.chunks_exact(dim) {
        for (c, &v) in centroid.iter_mut().zip(row) {
            *c += v as f64;
        }
    }
    let centroid: Vec<f32> = centroid.iter().map(|c| (c / n as f64) as f32).collect();
    let mut book = Codebook::new(1, dim, centroid, vec![n as f32])?;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
    while book.k < target_k {
        book = split_codebook(
            &book,
            &SplitPolicy::Double {
                eps,
                k_max: usize::MAX,
            },
            &[],
            &mut rng,
        )?;
        book = refine_assignments(data, &book, iters)?.0;
    }
    Ok(book)
}

/// Straight-through composition: the forward value equals `q`, the backward
/// pass routes the gradient of the output to `h` unchanged.
pub fn straight_through(h: &Tensor, q: &Tensor) -> Result<Tensor> {
    Ok((h + (q - h)?.detach())?)
}

/// Tensor-side quantization of `h` (`N × D`) for training.
pub struct QuantizedTensor {
    pub indices: Vec<u32>,
    /// Codebook rows, no gradient.
    pub codes: Tensor,
    /// Straight-through output.
    pub output: Tensor,
    /// `mean((h - sg(q))²)`, differentiable w.r.t. `h`.
    pub commitment: Tensor,
    pub codebook_loss: f64,
}

pub fn quantize_tensor(h: &Tensor, book: &Codebook) -> Result<QuantizedTensor> {
    let (n, d) = h.dims2()?;
    if d != book.dim {
        return Err(Error::shape(format!(
            "input dim {d} does not match codebook dim {}",
            book.dim
        )));
    }
    let host = crate::nn::to_f32_vec(h)?;
    let res = quantize(&host, book)?;
    let codes = tensor_from_f32(res.quantized, &[n, d], h.dtype(), h.device())?;
    quantize_with_codes(h, codes, res.indices, res.codebook_loss)
}

/// Straight-through output for fixed codes (used with frozen assignments).
pub fn quantize_with_codes(h: &Tensor, codes: Tensor, indices: Vec<u32>, codebook_loss: f64) -> Result<QuantizedTensor> {
    let output = straight_through(h, &codes)?;
    let commitment = (h - codes.detach())?.sqr()?.mean_all()?;
    Ok(QuantizedTensor {
        indices,
        codes,
        output,
        commitment,
        codebook_loss,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device, Var};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn nearest_neighbor_example() {
        let book = Codebook::from_vectors(2, 2, vec![0.0, 0.0, 1.0, 1.0]).unwrap();
        let r = quantize(&[0.2, 0.1], &book).unwrap();
        assert_eq!(r.indices, vec![0]);
        assert_eq!(r.quantized, vec![0.0, 0.0]);
        let r = quantize(&[1.0, 1.0], &book).unwrap();
        assert_eq!((r.codebook_loss, r.commitment_loss), (0.0, 0.0));
        // tie goes to the lowest index
        assert_eq!(quantize(&[0.5, 0.5], &book).unwrap().indices, vec![0]);
        assert!(quantize(&[0.5, 0.5, 0.5], &book).is_err());
        assert!(quantize(&[], &book).is_err());
    }

    #[test]
    fn lookup_examples() {
        let book = Codebook::from_vectors(2, 2, vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        assert!(lookup(&[], &book).unwrap().is_empty());
        assert_eq!(lookup(&[0, 0], &book).unwrap(), vec![0.0, 1.0, 0.0, 1.0]);
        assert!(lookup(&[2], &book).is_err());
        let h = [1.9, 3.2, 0.1, 0.7];
        let r = quantize(&h, &book).unwrap();
        assert_eq!(lookup(&r.indices, &book).unwrap(), r.quantized);
    }

    #[test]
    fn usage_statistics() {
        let k = 64;
        let book = Codebook::from_vectors(k, 1, (0..k).map(|i| i as f32).collect()).unwrap();
        let uniform: Vec<u32> = (0..k as u32).collect();
        let mut b = book.clone();
        for _ in 0..50 {
            b = update_usage(&b, &uniform, 0.9).unwrap();
        }
        assert!((b.entropy() - (k as f64).ln()).abs() < 1e-6);
        assert!((b.perplexity() - 64.0).abs() < 1e-4);
        assert_eq!(b.utilization(0.01), 1.0);

        let mut z = book.clone();
        for _ in 0..200 {
            z = update_usage(&z, &[0; 32], 0.9).unwrap();
        }
        let shares = z.usage_shares();
        assert!(shares[0] > 0.999);
        assert!(z.perplexity() < 1.001);

        // one batch: counter mass added equals (1 - decay) * len(indices)
        let one = update_usage(&book, &[3, 3, 5], 0.5).unwrap();
        let total: f32 = one.usage().iter().sum();
        assert!((total - 1.5).abs() < 1e-6);
    }

    #[test]
    fn ema_moves_codes_toward_data() {
        let book = Codebook::from_vectors(2, 1, vec![0.0, 10.0]).unwrap();
        let data = [1.0, 1.0, 9.0];
        let idx = book.assign(&data).unwrap();
        let next = ema_update(&book, &data, &idx, 0.5).unwrap();
        // empty history: the code jumps straight to the batch centroid
        assert_eq!(next.vectors(), &[1.0, 9.0]);
        let next2 = ema_update(&next, &[3.0], &[0], 0.5).unwrap();
        assert!(next2.code(0)[0] > 1.0 && next2.code(0)[0] < 3.0);
        assert_eq!(next2.code(1), next.code(1));
    }

    #[test]
    fn split_double() {
        let book = Codebook::new(2, 1, vec![1.0, -2.0], vec![4.0, 2.0]).unwrap();
        let s = split_codebook(
            &book,
            &SplitPolicy::Double { eps: 0.1, k_max: 8 },
            &[],
            &mut ChaCha8Rng::seed_from_u64(0),
        )
        .unwrap();
        assert_eq!(s.k(), 4);
        assert_eq!(s.usage(), &[2.0, 1.0, 2.0, 1.0]);
        assert!((s.code(0)[0] - 1.1).abs() < 1e-6 && (s.code(2)[0] - 0.9).abs() < 1e-6);
        assert_eq!(s.utilization(0.01), book.utilization(0.01));
        assert!(split_codebook(
            &book,
            &SplitPolicy::Double { eps: 0.1, k_max: 3 },
            &[],
            &mut ChaCha8Rng::seed_from_u64(0)
        )
        .is_err());
    }

    #[test]
    fn dead_replace_unchanged_when_all_alive() {
        let book = Codebook::new(3, 2, vec![0.0, 0.0, 1.0, 1.0, 2.0, 2.0], vec![1.0, 2.0, 3.0]).unwrap();
        let policy = SplitPolicy::DeadReplace {
            threshold: 0.01,
            eps: 1e-3,
        };
        let out = split_codebook(&book, &policy, &[], &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(out, book);
    }

    #[test]
    fn dead_replace_revives_and_keeps_distortion() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let data: Vec<f32> = (0..200).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut vectors: Vec<f32> = data[..8].to_vec();
        vectors.extend([50.0, 50.0, -50.0, 50.0]);
        let book = Codebook::from_vectors(6, 2, vectors).unwrap();
        let idx = book.assign(&data).unwrap();
        let book = update_usage(&book, &idx, 0.0).unwrap();
        let before_util = book.utilization(0.01);
        let before = quantization_mse(&data, &book).unwrap();
        let after_book = split_codebook(
            &book,
            &SplitPolicy::DeadReplace {
                threshold: 0.01,
                eps: 1e-3,
            },
            &idx,
            &mut rng,
        )
        .unwrap();
        assert!(after_book.utilization(0.01) > before_util);
        assert!(quantization_mse(&data, &after_book).unwrap() <= before);
    }

    #[test]
    fn refine_fixed_point_and_monotone() {
        let data = vec![0.0, 1.0, 5.0, 6.0];
        let book = Codebook::from_vectors(2, 2, data.clone()).unwrap();
        let (out, hist) = refine_assignments(&data, &book, 1).unwrap();
        assert_eq!(out.vectors(), book.vectors());
        assert_eq!(hist, vec![0.0]);

        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let data: Vec<f32> = (0..400).map(|_| rng.random_range(0.0..1.0)).collect();
        let book = Codebook::from_vectors(8, 2, vec![5.0; 16]).unwrap();
        let (_, hist) = refine_assignments(&data, &book, 20).unwrap();
        assert!(hist.windows(2).all(|w| w[1] <= w[0] + 1e-12), "{hist:?}");
        assert!(refine_assignments(&[], &book, 1).is_err());
        assert!(refine_assignments(&data, &book, 0).is_err());
    }

    #[test]
    fn straight_through_gradient_is_identity() {
        let h = Var::from_slice(&[0.3f64, -0.2, 0.8], 3, &Device::Cpu).unwrap();
        let q = Tensor::from_slice(&[0.0f64, 0.0, 1.0], 3, &Device::Cpu).unwrap();
        let out = straight_through(h.as_tensor(), &q).unwrap();
        assert_eq!(out.to_vec1::<f64>().unwrap(), vec![0.0, 0.0, 1.0]);
        let w = Tensor::from_slice(&[1.0f64, 2.0, 3.0], 3, &Device::Cpu).unwrap();
        let loss = (out * &w).unwrap().sum_all().unwrap();
        let g = loss.backward().unwrap();
        assert_eq!(g.get(h.as_tensor()).unwrap().to_vec1::<f64>().unwrap(), vec![1.0, 2.0, 3.0]);
        let _ = DType::F64;
    }

    #[test]
    fn codebook_bytes() {
        let book = Codebook::new(2, 3, vec![0.5, -1.0, 2.0, 3.0, 0.0, 1.0], vec![0.25, 7.0]).unwrap();
        let bytes = book.to_bytes();
        let (back, used) = Codebook::from_bytes(&bytes).unwrap();
        assert_eq!(used, bytes.len());
        assert_eq!(back, book);
        assert!(Codebook::from_bytes(&bytes[..bytes.len() - 2]).is_err());
    }
}
