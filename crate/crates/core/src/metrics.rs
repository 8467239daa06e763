//! Reconstruction metrics and evaluation reports. All metrics are computed on
//! target frames only.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

use crate::dataio::{load_clip, split_reference, write_rvc, ClipSplit, VideoClip};
use crate::error::{Error, Result};
use crate::model::Tokenizer;

pub const PSNR_CAP: f64 = 100.0;
const LUMA: [f64; 3] = [0.299, 0.587, 0.114];

fn check_same(a: &VideoClip, b: &VideoClip) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::shape(format!("clips {:?} and {:?} differ", a.dims(), b.dims())));
    }
    Ok(())
}

pub fn mse(a: &VideoClip, b: &VideoClip) -> Result<f64> {
    check_same(a, b)?;
    let sum: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (*x as f64 - *y as f64).powi(2))
        .sum();
    Ok(sum / a.data().len() as f64)
}

/// `10·log10(1/MSE)` for unit-range clips, capped at 100 dB.
pub fn psnr(a: &VideoClip, b: &VideoClip) -> Result<f64> {
    Ok(psnr_from_mse(mse(a, b)?))
}

pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse <= 0.0 {
        PSNR_CAP
    } else {
        (10.0 * (1.0 / mse).log10()).min(PSNR_CAP)
    }
}

/// Mean absolute difference.
pub fn l1_error(a: &VideoClip, b: &VideoClip) -> Result<f64> {
    check_same(a, b)?;
    let sum: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (*x as f64 - *y as f64).abs())
        .sum();
    Ok(sum / a.data().len() as f64)
}

/// L1 error in units of 10⁻² with two decimals (0.0106 → "1.06").
pub fn format_l1(l1: f64) -> String {
    format!("{:.2}", l1 * 100.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SsimConfig {
    pub window: usize,
    pub sigma: f64,
    pub k1: f64,
    pub k2: f64,
}

impl Default for SsimConfig {
    fn default() -> Self {
        Self {
            window: 11,
            sigma: 1.5,
            k1: 0.01,
            k2: 0.03,
        }
    }
}

fn gaussian_window(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let g: Vec<f64> = (0..size)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

fn luma(clip: &VideoClip, t: usize) -> Vec<f64> {
    let c = clip.c();
    clip.frame(t)
        .chunks_exact(c)
        .map(|px| {
            if c == 3 {
                px.iter().zip(LUMA).map(|(&v, w)| v as f64 * w).sum()
            } else {
                px.iter().map(|&v| v as f64).sum::<f64>() / c as f64
            }
        })
        .collect()
}

/// Mean SSIM of the luma channel over valid Gaussian windows, averaged over
/// frames. Data range is 1.
pub fn ssim(a: &VideoClip, b: &VideoClip, cfg: &SsimConfig) -> Result<f64> {
    check_same(a, b)?;
    let (t, h, w, _) = a.dims();
    let n = cfg.window;
    if h < n || w < n {
        return Err(Error::shape(format!("{h}x{w} frames are smaller than the {n}x{n} window")));
    }
    let g = gaussian_window(n, cfg.sigma);
    let (c1, c2) = (cfg.k1.powi(2), cfg.k2.powi(2));
    let mut total = 0.0;
    for f in 0..t {
        let (x, y) = (luma(a, f), luma(b, f));
        let mut acc = 0.0;
        for i in 0..=h - n {
            for j in 0..=w - n {
                let (mut mx, mut my, mut xx, mut yy, mut xy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for u in 0..n {
                    for v in 0..n {
                        let wgt = g[u] * g[v];
                        let p = (i + u) * w + j + v;
                        mx += wgt * x[p];
                        my += wgt * y[p];
                        xx += wgt * x[p] * x[p];
                        yy += wgt * y[p] * y[p];
                        xy += wgt * x[p] * y[p];
                    }
                }
                let (vx, vy, cov) = (xx - mx * mx, yy - my * my, xy - mx * my);
                acc += ((2.0 * mx * my + c1) * (2.0 * cov + c2))
                    / ((mx * mx + my * my + c1) * (vx + vy + c2));
            }
        }
        total += acc / ((h - n + 1) * (w - n + 1)) as f64;
    }
    Ok(total / t as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClipMetrics {
    pub clip: String,
    pub psnr: f64,
    pub ssim: f64,
    pub l1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub clips: Vec<ClipMetrics>,
    pub psnr: f64,
    pub ssim: f64,
    /// Mean absolute error (multiply by 100 for the ×10⁻² convention).
    pub l1: f64,
    pub compression: String,
    pub clip_count: usize,
    /// Which frames the metrics cover.
    pub frames: String,
}

impl EvalReport {
    pub fn from_clips(clips: Vec<ClipMetrics>, compression: String) -> Result<Self> {
        if clips.is_empty() {
            return Err(Error::invalid("empty evaluation set"));
        }
        let n = clips.len() as f64;
        let mean = |f: fn(&ClipMetrics) -> f64| clips.iter().map(f).sum::<f64>() / n;
        Ok(Self {
            psnr: mean(|c| c.psnr),
            ssim: mean(|c| c.ssim),
            l1: mean(|c| c.l1),
            compression,
            clip_count: clips.len(),
            frames: "targets".into(),
            clips,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn text_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<24} {:>8} {:>8} {:>12}", "clip", "PSNR", "SSIM", "L1 (1e-2)");
        for c in &self.clips {
            let _ = writeln!(s, "{:<24} {:>8.2} {:>8.4} {:>12}", c.clip, c.psnr, c.ssim, format_l1(c.l1));
        }
        let _ = writeln!(
            s,
            "{:<24} {:>8.2} {:>8.4} {:>12}",
            format!("mean ({} clips)", self.clip_count),
            self.psnr,
            self.ssim,
            format_l1(self.l1)
        );
        let _ = writeln!(s, "compression {}; metrics over {} frames", self.compression, self.frames);
        s
    }
}

/// Side-by-side summary of two reports.
pub fn comparison_table(name_a: &str, a: &EvalReport, name_b: &str, b: &EvalReport) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{:<20} {:>8} {:>8} {:>12} {:>8} {:>6}",
        "model", "PSNR", "SSIM", "L1 (1e-2)", "Compr.", "clips"
    );
    for (name, r) in [(name_a, a), (name_b, b)] {
        let _ = writeln!(
            s,
            "{:<20} {:>8.2} {:>8.4} {:>12} {:>8} {:>6}",
            name,
            r.psnr,
            r.ssim,
            format_l1(r.l1),
            r.compression,
            r.clip_count
        );
    }
    let _ = writeln!(s, "PSNR gap ({name_a} - {name_b}): {:+.2} dB", a.psnr - b.psnr);
    s
}

/// Anything that maps a reference/target split to reconstructed targets.
pub trait ClipReconstructor {
    fn reconstruct_targets(&self, split: &ClipSplit) -> Result<VideoClip>;
}

impl ClipReconstructor for Tokenizer {
    fn reconstruct_targets(&self, split: &ClipSplit) -> Result<VideoClip> {
        self.reconstruct(split)
    }
}

/// Encodes and decodes every clip (no pruning) and scores its target frames.
pub fn evaluate(
    model: &dyn ClipReconstructor,
    clips: &[VideoClip],
    n_ref_frames: usize,
    compression: String,
) -> Result<EvalReport> {
    if clips.is_empty() {
        return Err(Error::invalid("empty evaluation set"));
    }
    let cfg = SsimConfig::default();
    let mut rows = Vec::with_capacity(clips.len());
    for (i, clip) in clips.iter().enumerate() {
        let split = split_reference(clip, n_ref_frames)?;
        let rec = model.reconstruct_targets(&split)?;
        let name = if clip.source_id.is_empty() {
            format!("clip{i:04}")
        } else {
            clip.source_id.clone()
        };
        rows.push(ClipMetrics {
            clip: name,
            psnr: psnr(&split.target, &rec)?,
            ssim: ssim(&split.target, &rec, &cfg)?,
            l1: l1_error(&split.target, &rec)?,
        });
    }
    EvalReport::from_clips(rows, compression)
}

/// Eval clips from a directory: every `.rvc` file and every subdirectory of
/// PNG frames, in name order, truncated to `frames` frames at stride 1.
pub fn load_eval_dir(dir: impl AsRef<Path>, frames: usize) -> Result<Vec<VideoClip>> {
    let dir = dir.as_ref();
    if !dir.is_dir() {
        return Err(Error::MissingPath(dir.to_path_buf()));
    }
    let mut entries: Vec<PathBuf> = std::fs::read_dir(dir)?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    entries.sort();
    let mut clips = Vec::new();
    for p in entries {
        let is_rvc = p.extension().is_some_and(|e| e == "rvc");
        if is_rvc || p.is_dir() {
            let id = p.file_name().unwrap().to_string_lossy().into_owned();
            clips.push(load_clip(&p, 0, frames, 1)?.with_meta(1, id));
        }
    }
    if clips.is_empty() {
        return Err(Error::invalid(format!("no clips found in {}", dir.display())));
    }
    Ok(clips)
}

/// How a decode changed inside versus outside a pixel region.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegionChange {
    pub inside: f64,
    pub outside: f64,
    /// `inside / outside`; infinite when nothing changed outside.
    pub ratio: f64,
}

/// Mean absolute per-pixel change between two decodes, split by an `H×W`
/// mask shared by all frames. Channels are averaged per pixel.
pub fn region_change(base: &VideoClip, edited: &VideoClip, mask: &[bool]) -> Result<RegionChange> {
    check_same(base, edited)?;
    let (t, h, w, c) = base.dims();
    if mask.len() != h * w {
        return Err(Error::shape(format!("mask has {} pixels, frames have {}", mask.len(), h * w)));
    }
    let (mut sum_in, mut n_in, mut sum_out, mut n_out) = (0.0, 0usize, 0.0, 0usize);
    for f in 0..t {
        let (a, b) = (base.frame(f), edited.frame(f));
        for (p, &inside) in mask.iter().enumerate() {
            let d: f64 = (0..c)
                .map(|ch| (a[p * c + ch] as f64 - b[p * c + ch] as f64).abs())
                .sum::<f64>()
                / c as f64;
            if inside {
                sum_in += d;
                n_in += 1;
            } else {
                sum_out += d;
                n_out += 1;
            }
        }
    }
    if n_in == 0 || n_out == 0 {
        return Err(Error::invalid("region mask must have pixels inside and outside"));
    }
    let (inside, outside) = (sum_in / n_in as f64, sum_out / n_out as f64);
    let ratio = if outside > 0.0 { inside / outside } else { f64::INFINITY };
    Ok(RegionChange { inside, outside, ratio })
}

/// Pixels where any frame of `a` and `b` differs by more than `tol` in any channel.
pub fn difference_mask(a: &VideoClip, b: &VideoClip, tol: f32) -> Result<Vec<bool>> {
    check_same(a, b)?;
    let (t, h, w, c) = a.dims();
    let mut mask = vec![false; h * w];
    for f in 0..t {
        let (fa, fb) = (a.frame(f), b.frame(f));
        for (p, m) in mask.iter_mut().enumerate() {
            *m |= (0..c).any(|ch| (fa[p * c + ch] - fb[p * c + ch]).abs() > tol);
        }
    }
    Ok(mask)
}

/// Runs an external perceptual-distance program as `cmd a.rvc b.rvc` and
/// parses the single float it prints.
pub fn lpips_plugin(cmd: &str, a: &VideoClip, b: &VideoClip) -> Result<f64> {
    static COUNTER: AtomicU64 = AtomicU64::new(0);
    check_same(a, b)?;
    let tag = format!("{}-{}", std::process::id(), COUNTER.fetch_add(1, Ordering::Relaxed));
    let tmp = std::env::temp_dir();
    let (pa, pb) = (tmp.join(format!("lpips-{tag}-a.rvc")), tmp.join(format!("lpips-{tag}-b.rvc")));
    write_rvc(&pa, a)?;
    write_rvc(&pb, b)?;
    let out = Command::new(cmd).arg(&pa).arg(&pb).output();
    let _ = std::fs::remove_file(&pa);
    let _ = std::fs::remove_file(&pb);
    let out = out?;
    if !out.status.success() {
        return Err(Error::invalid(format!("plugin `{cmd}` exited with {}", out.status)));
    }
    let text = String::from_utf8_lossy(&out.stdout);
    text.trim()
        .parse::<f64>()
        .map_err(|_| Error::invalid(format!("plugin `{cmd}` printed `{}`, not a number", text.trim())))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_clip(seed: u64, t: usize, h: usize, w: usize) -> VideoClip {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v = (0..t * h * w * 3).map(|_| rng.random::<f32>()).collect();
        VideoClip::new(v, t, h, w, 3).unwrap()
    }

    #[test]
    fn psnr_examples() {
        // a uniform 0.125 offset gives MSE 1/64, exactly representable
        let a = VideoClip::filled(0.25, 2, 8, 8, 3).unwrap();
        let b = VideoClip::filled(0.375, 2, 8, 8, 3).unwrap();
        assert_eq!(mse(&a, &b).unwrap(), 1.0 / 64.0);
        assert!((psnr(&a, &b).unwrap() - 10.0 * 64f64.log10()).abs() < 1e-12);
        assert_eq!(psnr_from_mse(0.01), 20.0);
        assert_eq!(psnr(&a, &a).unwrap(), 100.0);
        let r = random_clip(1, 2, 8, 8);
        assert_eq!(psnr(&a, &r).unwrap(), psnr(&r, &a).unwrap());
        assert!(psnr(&a, &random_clip(1, 1, 8, 8)).is_err());
    }

    #[test]
    fn psnr_decreases_with_noise() {
        let base = random_clip(2, 1, 16, 16);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let noise: Vec<f32> = (0..base.data().len()).map(|_| rng.random::<f32>() - 0.5).collect();
        let mut last = f64::INFINITY;
        for amp in [0.01f32, 0.05, 0.1, 0.2, 0.4] {
            let v = base.data().iter().zip(&noise).map(|(x, n)| x + amp * n).collect();
            let noisy = VideoClip::from_clamped(v, 1, 16, 16, 3).unwrap();
            let p = psnr(&base, &noisy).unwrap();
            assert!(p < last);
            last = p;
        }
    }

    #[test]
    fn ssim_examples() {
        let cfg = SsimConfig::default();
        let a = random_clip(4, 2, 16, 16);
        assert!((ssim(&a, &a, &cfg).unwrap() - 1.0).abs() < 1e-12);
        let g = VideoClip::filled(0.5, 1, 12, 12, 3).unwrap();
        assert!((ssim(&g, &g, &cfg).unwrap() - 1.0).abs() < 1e-12);
        let small = VideoClip::filled(0.5, 1, 8, 8, 3).unwrap();
        assert!(ssim(&small, &small, &cfg).is_err());
        let b = random_clip(5, 2, 16, 16);
        assert!((ssim(&a, &b, &cfg).unwrap() - ssim(&b, &a, &cfg).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn ssim_of_inverted_checkerboard() {
        let (h, w) = (16, 16);
        let v: Vec<f32> = (0..h * w)
            .flat_map(|p| {
                let on = ((p / w) + (p % w)) % 2 == 0;
                [f32::from(on); 3]
            })
            .collect();
        let a = VideoClip::new(v.clone(), 1, h, w, 3).unwrap();
        let inv = VideoClip::new(v.iter().map(|x| 1.0 - x).collect(), 1, h, w, 3).unwrap();
        let s = ssim(&a, &inv, &SsimConfig::default()).unwrap();
        assert!(s < -0.99, "ssim {s}");
    }

    #[test]
    fn l1_examples() {
        let a = random_clip(6, 1, 8, 8);
        assert_eq!(l1_error(&a, &a).unwrap(), 0.0);
        let b = random_clip(7, 1, 8, 8);
        let oracle: f64 = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(x, y)| (*x as f64 - *y as f64).abs())
            .sum::<f64>()
            / a.data().len() as f64;
        assert!((l1_error(&a, &b).unwrap() - oracle).abs() < 1e-12);
        assert_eq!(format_l1(0.0106), "1.06");
    }

    struct Identity;

    impl ClipReconstructor for Identity {
        fn reconstruct_targets(&self, split: &ClipSplit) -> Result<VideoClip> {
            Ok(split.target.clone())
        }
    }

    #[test]
    fn identity_model_report() {
        let clips: Vec<_> = (0..3).map(|s| random_clip(s, 3, 16, 16)).collect();
        let r = evaluate(&Identity, &clips, 1, "128:1".into()).unwrap();
        assert_eq!(r.psnr, 100.0);
        assert!((r.ssim - 1.0).abs() < 1e-12);
        assert_eq!(r.clip_count, 3);
        assert!(r.text_table().contains("mean (3 clips)"));
        let back: EvalReport = serde_json::from_str(&r.to_json().unwrap()).unwrap();
        assert_eq!(back, r);
        assert!(comparison_table("a", &r, "b", &r).contains("+0.00 dB"));
        assert!(evaluate(&Identity, &[], 1, String::new()).is_err());
    }

    #[test]
    fn region_change_example() {
        let base = VideoClip::filled(0.5, 2, 8, 8, 3).unwrap();
        let mut v = base.data().to_vec();
        // pixel 0 changes by 0.4 in every frame, pixel 63 by 0.1 in frame 1 only
        for f in 0..2 {
            for ch in 0..3 {
                v[f * 192 + ch] += 0.4;
            }
        }
        for ch in 0..3 {
            v[192 + 63 * 3 + ch] += 0.1;
        }
        let edited = VideoClip::new(v, 2, 8, 8, 3).unwrap();
        let mut mask = vec![false; 64];
        mask[0] = true;
        let r = region_change(&base, &edited, &mask).unwrap();
        assert!((r.inside - 0.4).abs() < 1e-6);
        assert!((r.outside - 0.1 / 126.0).abs() < 1e-6);
        let mut changed = mask.clone();
        changed[63] = true;
        assert_eq!(difference_mask(&base, &edited, 0.05).unwrap(), changed);
        assert!(region_change(&base, &edited, &[true; 64]).is_err());
    }
}
