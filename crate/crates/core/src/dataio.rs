//! Video clips: loading, splitting, padding, synthesis and the `.rvc` raw format.
//!
//! Frames are stored as `[0, 1]` reals in `(t, y, x, c)` row-major order.
//! On disk (PNG directories and `.rvc` files) they are 8-bit.

use std::fs;
use std::path::Path;

use rand::seq::IndexedRandom;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const RVC_MAGIC: &[u8; 4] = b"RVC1";
pub const MIN_SIDE: usize = 8;

#[derive(Debug, Clone, PartialEq)]
pub struct VideoClip {
    frames: Vec<f32>,
    t: usize,
    h: usize,
    w: usize,
    c: usize,
    pub frame_interval: usize,
    pub source_id: String,
}

impl VideoClip {
    pub fn new(frames: Vec<f32>, t: usize, h: usize, w: usize, c: usize) -> Result<Self> {
        if t == 0 {
            return Err(Error::shape("clip must hold at least one frame"));
        }
        if h < MIN_SIDE || w < MIN_SIDE {
            return Err(Error::shape(format!(
                "frames must be at least {MIN_SIDE}x{MIN_SIDE}, got {h}x{w}"
            )));
        }
        if c == 0 {
            return Err(Error::shape("clip needs at least one channel"));
        }
        if frames.len() != t * h * w * c {
            return Err(Error::shape(format!(
                "payload has {} values, expected {t}x{h}x{w}x{c}",
                frames.len()
            )));
        }
        if let Some(v) = frames.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::invalid(format!("clip value {v} outside [0, 1]")));
        }
        Ok(Self {
            frames,
            t,
            h,
            w,
            c,
            frame_interval: 1,
            source_id: String::new(),
        })
    }

    /// Builds a clip from arbitrary reals, clamping into `[0, 1]`.
    pub fn from_clamped(
        mut frames: Vec<f32>,
        t: usize,
        h: usize,
        w: usize,
        c: usize,
    ) -> Result<Self> {
        for v in frames.iter_mut() {
            *v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
        }
        Self::new(frames, t, h, w, c)
    }

    pub fn filled(value: f32, t: usize, h: usize, w: usize, c: usize) -> Result<Self> {
        Self::new(vec![value; t * h * w * c], t, h, w, c)
    }

    pub fn from_u8(bytes: &[u8], t: usize, h: usize, w: usize, c: usize) -> Result<Self> {
        Self::new(bytes.iter().map(|&b| b as f32 / 255.0).collect(), t, h, w, c)
    }

    pub fn with_meta(mut self, frame_interval: usize, source_id: impl Into<String>) -> Self {
        self.frame_interval = frame_interval.max(1);
        self.source_id = source_id.into();
        self
    }

    pub fn t(&self) -> usize {
        self.t
    }
    pub fn h(&self) -> usize {
        self.h
    }
    pub fn w(&self) -> usize {
        self.w
    }
    pub fn c(&self) -> usize {
        self.c
    }
    pub fn dims(&self) -> (usize, usize, usize, usize) {
        (self.t, self.h, self.w, self.c)
    }
    pub fn data(&self) -> &[f32] {
        &self.frames
    }
    pub fn into_data(self) -> Vec<f32> {
        self.frames
    }

    pub fn frame_len(&self) -> usize {
        self.h * self.w * self.c
    }

    pub fn frame(&self, t: usize) -> &[f32] {
        let n = self.frame_len();
        &self.frames[t * n..(t + 1) * n]
    }

    pub fn at(&self, t: usize, y: usize, x: usize, c: usize) -> f32 {
        self.frames[((t * self.h + y) * self.w + x) * self.c + c]
    }

    pub fn to_u8(&self) -> Vec<u8> {
        self.frames.iter().map(|&v| to_u8(v)).collect()
    }

    /// Round-trips the values through 8-bit storage.
    pub fn quantized_u8(&self) -> Self {
        let mut out = self.clone();
        for v in out.frames.iter_mut() {
            *v = to_u8(*v) as f32 / 255.0;
        }
        out
    }

    /// Frames `[start, end)` as a new clip, metadata preserved.
    pub fn slice_frames(&self, start: usize, end: usize) -> Result<Self> {
        if start >= end || end > self.t {
            return Err(Error::invalid(format!(
                "frame range {start}..{end} invalid for {} frames",
                self.t
            )));
        }
        let n = self.frame_len();
        let mut clip = Self::new(
            self.frames[start * n..end * n].to_vec(),
            end - start,
            self.h,
            self.w,
            self.c,
        )?;
        clip.frame_interval = self.frame_interval;
        clip.source_id = self.source_id.clone();
        Ok(clip)
    }

    pub fn concat_time(&self, other: &Self) -> Result<Self> {
        if (self.h, self.w, self.c) != (other.h, other.w, other.c) {
            return Err(Error::shape("clips differ in frame size"));
        }
        let mut frames = self.frames.clone();
        frames.extend_from_slice(&other.frames);
        let mut clip = Self::new(frames, self.t + other.t, self.h, self.w, self.c)?;
        clip.frame_interval = self.frame_interval;
        clip.source_id = self.source_id.clone();
        Ok(clip)
    }

    /// Replaces frame `t` with `frame` (same H×W×C).
    pub fn set_frame(&mut self, t: usize, frame: &[f32]) -> Result<()> {
        let n = self.frame_len();
        if frame.len() != n || t >= self.t {
            return Err(Error::shape("frame does not fit clip"));
        }
        if frame.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::invalid("frame values outside [0, 1]"));
        }
        self.frames[t * n..(t + 1) * n].copy_from_slice(frame);
        Ok(())
    }
}

fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClipSplit {
    pub reference: VideoClip,
    pub target: VideoClip,
}

impl ClipSplit {
    pub fn new(reference: VideoClip, target: VideoClip) -> Result<Self> {
        let (_, rh, rw, rc) = reference.dims();
        let (_, th, tw, tc) = target.dims();
        if (rh, rw, rc) != (th, tw, tc) {
            return Err(Error::shape(format!(
                "reference {rh}x{rw}x{rc} and target {th}x{tw}x{tc} differ"
            )));
        }
        Ok(Self { reference, target })
    }

    pub fn rejoin(&self) -> Result<VideoClip> {
        self.reference.concat_time(&self.target)
    }
}

pub fn split_reference(clip: &VideoClip, n_ref_frames: usize) -> Result<ClipSplit> {
    if n_ref_frames == 0 || n_ref_frames >= clip.t() {
        return Err(Error::invalid(format!(
            "n_ref_frames must be in [1, {}), got {n_ref_frames}",
            clip.t()
        )));
    }
    ClipSplit::new(
        clip.slice_frames(0, n_ref_frames)?,
        clip.slice_frames(n_ref_frames, clip.t())?,
    )
}

/// Pads the reference up to a multiple of `t_patch` by repeating its last frame.
pub fn replicate_pad_reference(reference: &VideoClip, t_patch: usize) -> VideoClip {
    let t_patch = t_patch.max(1);
    let t = reference.t();
    let padded = t.div_ceil(t_patch) * t_patch;
    if padded == t {
        return reference.clone();
    }
    let mut frames = reference.data().to_vec();
    let last = reference.frame(t - 1);
    for _ in t..padded {
        frames.extend_from_slice(last);
    }
    let mut out = VideoClip::new(frames, padded, reference.h(), reference.w(), reference.c())
        .expect("padding preserves clip invariants");
    out.frame_interval = reference.frame_interval;
    out.source_id = reference.source_id.clone();
    out
}

// ---------------------------------------------------------------------------
// Raw clip file

pub fn encode_rvc(clip: &VideoClip) -> Vec<u8> {
    let (t, h, w, c) = clip.dims();
    let mut out = Vec::with_capacity(20 + t * h * w * c);
    out.extend_from_slice(RVC_MAGIC);
    for d in [t, h, w, c] {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    out.extend(clip.to_u8());
    out
}

pub fn decode_rvc(bytes: &[u8]) -> Result<VideoClip> {
    if bytes.len() < 20 {
        return Err(Error::corrupt("rvc", "file shorter than header"));
    }
    if &bytes[..4] != RVC_MAGIC {
        return Err(Error::corrupt("rvc", "bad magic"));
    }
    let dim = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize;
    let (t, h, w, c) = (dim(0), dim(1), dim(2), dim(3));
    let n = t
        .checked_mul(h)
        .and_then(|v| v.checked_mul(w))
        .and_then(|v| v.checked_mul(c))
        .ok_or_else(|| Error::corrupt("rvc", "dimension overflow"))?;
    if bytes.len() != 20 + n {
        return Err(Error::corrupt(
            "rvc",
            format!("payload is {} bytes, header says {n}", bytes.len() - 20),
        ));
    }
    VideoClip::from_u8(&bytes[20..], t, h, w, c)
}

pub fn write_rvc(path: impl AsRef<Path>, clip: &VideoClip) -> Result<()> {
    fs::write(path, encode_rvc(clip))?;
    Ok(())
}

pub fn read_rvc(path: impl AsRef<Path>) -> Result<VideoClip> {
    let path = path.as_ref();
    if !path.exists() {
        return Err(Error::MissingPath(path.to_path_buf()));
    }
    let id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    Ok(decode_rvc(&fs::read(path)?)?.with_meta(1, id))
}

// ---------------------------------------------------------------------------
// Frame directories

fn list_png_frames(dir: &Path) -> Result<Vec<std::path::PathBuf>> {
    let mut frames: Vec<_> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .map(|e| e.eq_ignore_ascii_case("png"))
                .unwrap_or(false)
        })
        .collect();
    frames.sort();
    Ok(frames)
}

/// Loads `length` frames starting at `start`, taking every `stride`-th frame,
/// from a directory of numbered PNGs or from an `.rvc` file.
pub fn load_clip(path: impl AsRef<Path>, start: usize, length: usize, stride: usize) -> Result<VideoClip> {
    let path = path.as_ref();
    if !path.exists() {
        return Err(Error::MissingPath(path.to_path_buf()));
    }
    if length == 0 || stride == 0 {
        return Err(Error::invalid("length and stride must be positive"));
    }
    let last = start + (length - 1) * stride;
    let id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();

    if path.is_file() {
        let clip = read_rvc(path)?;
        if last >= clip.t() {
            return Err(Error::InsufficientFrames {
                needed: last,
                available: clip.t(),
            });
        }
        let n = clip.frame_len();
        let mut frames = Vec::with_capacity(length * n);
        for i in 0..length {
            frames.extend_from_slice(clip.frame(start + i * stride));
        }
        return Ok(VideoClip::new(frames, length, clip.h(), clip.w(), clip.c())?.with_meta(stride, id));
    }

    let files = list_png_frames(path)?;
    if last >= files.len() {
        return Err(Error::InsufficientFrames {
            needed: last,
            available: files.len(),
        });
    }
    let mut frames = Vec::new();
    let mut size = None;
    for i in 0..length {
        let img = image::open(&files[start + i * stride])?.to_rgb8();
        let dims = img.dimensions();
        match size {
            None => size = Some(dims),
            Some(s) if s != dims => {
                return Err(Error::shape(format!(
                    "non-uniform frame sizes: {}x{} vs {}x{}",
                    s.0, s.1, dims.0, dims.1
                )))
            }
            _ => {}
        }
        frames.extend(img.into_raw().into_iter().map(|b| b as f32 / 255.0));
    }
    let (w, h) = size.unwrap();
    Ok(VideoClip::new(frames, length, h as usize, w as usize, 3)?.with_meta(stride, id))
}

/// Every training source under `dir`: each `.rvc` file and each subdirectory
/// of PNG frames, loaded whole. A directory that itself holds PNG frames is a
/// single source.
pub fn load_source_dir(dir: impl AsRef<Path>) -> Result<Vec<VideoClip>> {
    let dir = dir.as_ref();
    if !dir.is_dir() {
        return Err(Error::MissingPath(dir.to_path_buf()));
    }
    let own = list_png_frames(dir)?;
    if !own.is_empty() {
        return Ok(vec![load_clip(dir, 0, own.len(), 1)?]);
    }
    let mut entries: Vec<_> = fs::read_dir(dir)?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    entries.sort();
    let mut out = Vec::new();
    for p in entries {
        if p.extension().is_some_and(|e| e == "rvc") {
            out.push(read_rvc(&p)?);
        } else if p.is_dir() {
            let n = list_png_frames(&p)?.len();
            if n > 0 {
                out.push(load_clip(&p, 0, n, 1)?);
            }
        }
    }
    if out.is_empty() {
        return Err(Error::invalid(format!("no clips found in {}", dir.display())));
    }
    Ok(out)
}

/// Writes every frame as `000000.png`, `000001.png`, ... into `dir`.
pub fn write_frame_dir(dir: impl AsRef<Path>, clip: &VideoClip) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    if clip.c() != 3 {
        return Err(Error::shape("frame directories hold RGB frames"));
    }
    for t in 0..clip.t() {
        let bytes: Vec<u8> = clip.frame(t).iter().map(|&v| to_u8(v)).collect();
        let img = image::RgbImage::from_raw(clip.w() as u32, clip.h() as u32, bytes)
            .expect("frame buffer size matches dims");
        img.save(dir.join(format!("{t:06}.png")))?;
    }
    Ok(())
}

/// Tiles rows of clips side by side into one RGB image (one frame per cell).
pub fn write_contact_sheet(path: impl AsRef<Path>, rows: &[&VideoClip]) -> Result<()> {
    let Some(first) = rows.first() else {
        return Err(Error::invalid("contact sheet needs at least one row"));
    };
    let (h, w) = (first.h(), first.w());
    let cols = rows.iter().map(|r| r.t()).max().unwrap_or(1);
    let gap = 2;
    let sheet_w = cols * (w + gap) + gap;
    let sheet_h = rows.len() * (h + gap) + gap;
    let mut img = image::RgbImage::from_pixel(sheet_w as u32, sheet_h as u32, image::Rgb([32, 32, 32]));
    for (r, clip) in rows.iter().enumerate() {
        if (clip.h(), clip.w()) != (h, w) || clip.c() != 3 {
            return Err(Error::shape("contact sheet rows must share RGB frame size"));
        }
        for t in 0..clip.t() {
            let ox = gap + t * (w + gap);
            let oy = gap + r * (h + gap);
            for y in 0..h {
                for x in 0..w {
                    let px = [0, 1, 2].map(|c| to_u8(clip.at(t, y, x, c)));
                    img.put_pixel((ox + x) as u32, (oy + y) as u32, image::Rgb(px));
                }
            }
        }
    }
    img.save(path)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Synthetic redundant video

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub glyphs: usize,
    pub glyph_min: usize,
    pub glyph_max: usize,
    /// Maximum glyph speed in pixels per frame.
    pub motion: f32,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            frames: 8,
            height: 32,
            width: 32,
            glyphs: 3,
            glyph_min: 6,
            glyph_max: 10,
            motion: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Texture {
    Checker { cell: usize },
    Stripes { period: usize, orientation: u8 },
    Letter,
}

#[derive(Debug, Clone)]
pub struct Glyph {
    pub size: (usize, usize),
    /// Per-pixel colour, `None` where the glyph is transparent.
    pixels: Vec<Option<[f32; 3]>>,
    /// Top-left corner per frame.
    pub positions: Vec<(usize, usize)>,
}

impl Glyph {
    fn covers(&self, t: usize, y: usize, x: usize) -> Option<[f32; 3]> {
        let (py, px) = self.positions[t];
        if y < py || x < px || y >= py + self.size.0 || x >= px + self.size.1 {
            return None;
        }
        self.pixels[(y - py) * self.size.1 + (x - px)]
    }
}

/// A synthetic clip together with the layout that produced it.
#[derive(Debug, Clone)]
pub struct SynthScene {
    pub clip: VideoClip,
    pub glyphs: Vec<Glyph>,
    background: Vec<f32>,
}

impl SynthScene {
    /// Pixel mask (H×W) where glyph `g` is the top-most layer at frame `t`.
    pub fn visible_mask(&self, g: usize, t: usize) -> Vec<bool> {
        let (h, w) = (self.clip.h(), self.clip.w());
        let mut mask = vec![false; h * w];
        for y in 0..h {
            for x in 0..w {
                let top = self
                    .glyphs
                    .iter()
                    .enumerate()
                    .rev()
                    .find(|(_, gl)| gl.covers(t, y, x).is_some())
                    .map(|(i, _)| i);
                mask[y * w + x] = top == Some(g);
            }
        }
        mask
    }

    /// Union of `visible_mask(g, t)` over `frames`.
    pub fn trajectory_mask(&self, g: usize, frames: std::ops::Range<usize>) -> Vec<bool> {
        let mut mask = vec![false; self.clip.h() * self.clip.w()];
        for t in frames {
            for (m, v) in mask.iter_mut().zip(self.visible_mask(g, t)) {
                *m |= v;
            }
        }
        mask
    }

    /// Re-renders frame `t` with glyph `g`'s colours replaced by `1 - c`.
    pub fn recolored_frame(&self, g: usize, t: usize) -> Vec<f32> {
        let mut frame = self.clip.frame(t).to_vec();
        let mask = self.visible_mask(g, t);
        let c = self.clip.c();
        for (i, on) in mask.iter().enumerate() {
            if *on {
                for ch in 0..c {
                    frame[i * c + ch] = 1.0 - frame[i * c + ch];
                }
            }
        }
        frame
    }

    pub fn background(&self) -> &[f32] {
        &self.background
    }
}

fn random_color(rng: &mut ChaCha8Rng) -> [f32; 3] {
    [rng.random(), rng.random(), rng.random()]
}

fn make_glyph(rng: &mut ChaCha8Rng, cfg: &SynthConfig) -> Glyph {
    let gh = rng.random_range(cfg.glyph_min..=cfg.glyph_max);
    let gw = rng.random_range(cfg.glyph_min..=cfg.glyph_max);
    let texture = match rng.random_range(0..3) {
        0 => Texture::Checker {
            cell: rng.random_range(2..=4),
        },
        1 => Texture::Stripes {
            period: rng.random_range(4..=8),
            orientation: rng.random_range(0..3),
        },
        _ => Texture::Letter,
    };
    let fg = random_color(rng);
    let bg = random_color(rng);
    let mut pixels = vec![None; gh * gw];
    match texture {
        Texture::Checker { cell } => {
            for y in 0..gh {
                for x in 0..gw {
                    let on = (y / cell + x / cell) % 2 == 0;
                    pixels[y * gw + x] = Some(if on { fg } else { bg });
                }
            }
        }
        Texture::Stripes {
            period,
            orientation,
        } => {
            for y in 0..gh {
                for x in 0..gw {
                    let coord = match orientation {
                        0 => y,
                        1 => x,
                        _ => x + y,
                    };
                    let on = (coord % period) < period.div_ceil(2);
                    pixels[y * gw + x] = Some(if on { fg } else { bg });
                }
            }
        }
        Texture::Letter => {
            // Random 5x5 bitmap, mirrored horizontally for a letter-like look,
            // scaled up to the glyph box. Off cells are transparent.
            let mut bits = [[false; 5]; 5];
            for row in bits.iter_mut() {
                for x in 0..3 {
                    row[x] = rng.random_bool(0.55);
                    row[4 - x] = row[x];
                }
            }
            for y in 0..gh {
                for x in 0..gw {
                    if bits[y * 5 / gh][x * 5 / gw] {
                        pixels[y * gw + x] = Some(fg);
                    }
                }
            }
            if pixels.iter().all(|p| p.is_none()) {
                pixels[0] = Some(fg);
            }
        }
    }
    Glyph {
        size: (gh, gw),
        pixels,
        positions: Vec::new(),
    }
}

/// Integer positions along a bouncing straight-line path.
fn bounce_path(start: f32, velocity: f32, max: usize, frames: usize) -> Vec<usize> {
    let span = max as f32;
    (0..frames)
        .map(|t| {
            if span <= 0.0 {
                return 0;
            }
            let raw = start + velocity * t as f32;
            let period = 2.0 * span;
            let m = raw.rem_euclid(period);
            let p = if m > span { period - m } else { m };
            (p.round() as usize).min(max)
        })
        .collect()
}

pub fn synth_redundant_scene(seed: u64, cfg: &SynthConfig) -> Result<SynthScene> {
    if cfg.frames == 0 {
        return Err(Error::invalid("synthetic clip needs at least one frame"));
    }
    if cfg.glyph_min == 0 || cfg.glyph_min > cfg.glyph_max {
        return Err(Error::invalid("glyph size range is empty"));
    }
    if cfg.glyph_max > cfg.height || cfg.glyph_max > cfg.width {
        return Err(Error::invalid(format!(
            "glyph size {} exceeds frame {}x{}",
            cfg.glyph_max, cfg.height, cfg.width
        )));
    }
    if !(cfg.motion >= 0.0) {
        return Err(Error::invalid("motion amplitude must be non-negative"));
    }
    let (h, w, t_len) = (cfg.height, cfg.width, cfg.frames);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // Static background: linear blend between two colours plus a low-frequency ripple.
    let (c0, c1) = (random_color(&mut rng), random_color(&mut rng));
    let angle: f32 = rng.random_range(0.0..std::f32::consts::TAU);
    let (fy, fx) = (rng.random_range(0.5..2.0f32), rng.random_range(0.5..2.0f32));
    let mut background = vec![0.0f32; h * w * 3];
    for y in 0..h {
        for x in 0..w {
            let (u, v) = (y as f32 / h as f32, x as f32 / w as f32);
            let s = 0.5 + 0.5 * ((u - 0.5) * angle.sin() + (v - 0.5) * angle.cos());
            let ripple = 0.05
                * ((std::f32::consts::TAU * fy * u).sin() * (std::f32::consts::TAU * fx * v).cos());
            for c in 0..3 {
                let val = c0[c] * (1.0 - s) + c1[c] * s + ripple;
                background[(y * w + x) * 3 + c] = val.clamp(0.0, 1.0);
            }
        }
    }

    let mut glyphs = Vec::with_capacity(cfg.glyphs);
    for _ in 0..cfg.glyphs {
        let mut g = make_glyph(&mut rng, cfg);
        let (gh, gw) = g.size;
        let (max_y, max_x) = (h - gh, w - gw);
        let y0 = rng.random_range(0..=max_y) as f32;
        let x0 = rng.random_range(0..=max_x) as f32;
        let vy = rng.random_range(-1.0..=1.0f32) * cfg.motion;
        let vx = rng.random_range(-1.0..=1.0f32) * cfg.motion;
        let ys = bounce_path(y0, vy, max_y, t_len);
        let xs = bounce_path(x0, vx, max_x, t_len);
        g.positions = ys.into_iter().zip(xs).collect();
        glyphs.push(g);
    }

    let mut frames = Vec::with_capacity(t_len * h * w * 3);
    for t in 0..t_len {
        for y in 0..h {
            for x in 0..w {
                let px = glyphs
                    .iter()
                    .rev()
                    .find_map(|g| g.covers(t, y, x))
                    .unwrap_or_else(|| {
                        let i = (y * w + x) * 3;
                        [background[i], background[i + 1], background[i + 2]]
                    });
                frames.extend_from_slice(&px);
            }
        }
    }
    let clip = VideoClip::new(frames, t_len, h, w, 3)?.with_meta(1, format!("synth-{seed}"));
    Ok(SynthScene {
        clip,
        glyphs,
        background,
    })
}

/// Deterministic textured-glyph clip with rigid per-glyph translation over a
/// static background.
pub fn synth_redundant_clip(seed: u64, cfg: &SynthConfig) -> Result<VideoClip> {
    Ok(synth_redundant_scene(seed, cfg)?.clip)
}

/// Draws a clip of `length` frames from a random source with a stride drawn
/// uniformly from `interval_range`.
pub fn sample_training_clip<R: Rng>(
    sources: &[VideoClip],
    length: usize,
    interval_range: (usize, usize),
    rng: &mut R,
) -> Result<VideoClip> {
    let (lo, hi) = interval_range;
    if lo == 0 || lo > hi {
        return Err(Error::invalid(format!(
            "interval range ({lo}, {hi}) must satisfy 1 <= min <= max"
        )));
    }
    if sources.is_empty() || length == 0 {
        return Err(Error::invalid("need at least one source and a positive length"));
    }
    const RETRIES: usize = 16;
    let mut longest = 0;
    for _ in 0..RETRIES {
        let src = sources.choose(rng).expect("non-empty");
        let stride = rng.random_range(lo..=hi);
        let span = (length - 1) * stride + 1;
        longest = longest.max(src.t());
        if span > src.t() {
            continue;
        }
        let start = rng.random_range(0..=src.t() - span);
        let n = src.frame_len();
        let mut frames = Vec::with_capacity(length * n);
        for i in 0..length {
            frames.extend_from_slice(src.frame(start + i * stride));
        }
        return Ok(VideoClip::new(frames, length, src.h(), src.w(), src.c())?
            .with_meta(stride, src.source_id.clone()));
    }
    Err(Error::InsufficientFrames {
        needed: (length - 1) * hi,
        available: longest,
    })
}
