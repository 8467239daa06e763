//! `.rtk` token streams: raw reference frames plus discrete target indices.
//!
//! Layout (little-endian, no padding): `"RTK1"`, u16 version, u8 reference
//! frame count, u8 reserved, u32 τ η ω, u32 K, u32 patch t h w, u32 H W, the
//! reference frames as `n_ref·H·W·3` bytes, then `τ·η·ω` indices stored as u16
//! when K ≤ 65536 and u32 otherwise.

use std::path::Path;

use crate::dataio::{ClipSplit, VideoClip};
use crate::error::{Error, Result};
use crate::model::Tokenizer;
use crate::patchgrid::{GridShape, PatchSpec};

pub const STREAM_MAGIC: &[u8; 4] = b"RTK1";
pub const STREAM_VERSION: u16 = 1;
pub const STREAM_CHANNELS: usize = 3;
const HEADER_LEN: usize = 4 + 2 + 1 + 1 + 4 * 9;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenStream {
    pub n_ref_frames: u8,
    pub grid: GridShape,
    pub codebook_size: u32,
    pub patch: PatchSpec,
    pub height: u32,
    pub width: u32,
    /// Reference frames as u8, row-major `(t, y, x, c)`.
    pub reference: Vec<u8>,
    /// Row-major over `(t, y, x)` of the lattice.
    pub indices: Vec<u32>,
}

fn u32_of(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::invalid(format!("{what} {v} does not fit in u32")))
}

impl TokenStream {
    pub fn wide_indices(&self) -> bool {
        self.codebook_size > 65536
    }

    fn reference_len(&self) -> usize {
        self.n_ref_frames as usize * self.height as usize * self.width as usize * STREAM_CHANNELS
    }

    fn validate(&self) -> Result<()> {
        if self.n_ref_frames == 0 {
            return Err(Error::invalid("token stream needs at least one reference frame"));
        }
        if self.reference.len() != self.reference_len() {
            return Err(Error::shape(format!(
                "reference payload has {} bytes, header implies {}",
                self.reference.len(),
                self.reference_len()
            )));
        }
        if self.indices.len() != self.grid.sites() {
            return Err(Error::shape(format!(
                "{} indices for a {} site lattice",
                self.indices.len(),
                self.grid.sites()
            )));
        }
        if let Some(&i) = self.indices.iter().find(|&&i| i >= self.codebook_size) {
            return Err(Error::invalid(format!(
                "index {i} outside codebook of size {}",
                self.codebook_size
            )));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.validate()?;
        let mut out = Vec::with_capacity(HEADER_LEN + self.reference.len() + 4 * self.indices.len());
        out.extend_from_slice(STREAM_MAGIC);
        out.extend_from_slice(&STREAM_VERSION.to_le_bytes());
        out.push(self.n_ref_frames);
        out.push(0);
        let g = self.grid;
        for v in [g.tau, g.eta, g.omega] {
            out.extend_from_slice(&u32_of(v, "lattice size")?.to_le_bytes());
        }
        out.extend_from_slice(&self.codebook_size.to_le_bytes());
        for v in [self.patch.t, self.patch.h, self.patch.w] {
            out.extend_from_slice(&u32_of(v, "patch size")?.to_le_bytes());
        }
        out.extend_from_slice(&self.height.to_le_bytes());
        out.extend_from_slice(&self.width.to_le_bytes());
        out.extend_from_slice(&self.reference);
        if self.wide_indices() {
            for &i in &self.indices {
                out.extend_from_slice(&i.to_le_bytes());
            }
        } else {
            for &i in &self.indices {
                out.extend_from_slice(&(i as u16).to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let corrupt = |why: String| Error::corrupt("token stream", why);
        if bytes.len() < HEADER_LEN {
            return Err(corrupt(format!("{} bytes is shorter than the header", bytes.len())));
        }
        if &bytes[..4] != STREAM_MAGIC {
            return Err(corrupt("bad magic".into()));
        }
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if version != STREAM_VERSION {
            return Err(corrupt(format!("unsupported version {version}")));
        }
        let n_ref_frames = bytes[6];
        let word = |i: usize| {
            let o = 8 + 4 * i;
            u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap())
        };
        let grid = GridShape {
            tau: word(0) as usize,
            eta: word(1) as usize,
            omega: word(2) as usize,
        };
        let codebook_size = word(3);
        let patch = PatchSpec {
            t: word(4) as usize,
            h: word(5) as usize,
            w: word(6) as usize,
        };
        let (height, width) = (word(7), word(8));
        let mut stream = TokenStream {
            n_ref_frames,
            grid,
            codebook_size,
            patch,
            height,
            width,
            reference: Vec::new(),
            indices: Vec::new(),
        };
        let ref_len = stream.reference_len();
        let width_bytes = if stream.wide_indices() { 4 } else { 2 };
        let expected = grid
            .tau
            .checked_mul(grid.eta)
            .and_then(|n| n.checked_mul(grid.omega))
            .and_then(|n| n.checked_mul(width_bytes))
            .and_then(|n| n.checked_add(HEADER_LEN + ref_len))
            .ok_or_else(|| corrupt("header sizes overflow".into()))?;
        if bytes.len() < expected {
            return Err(corrupt(format!("truncated: {} of {expected} bytes", bytes.len())));
        }
        if bytes.len() > expected {
            return Err(corrupt(format!("{} trailing bytes", bytes.len() - expected)));
        }
        stream.reference = bytes[HEADER_LEN..HEADER_LEN + ref_len].to_vec();
        let body = &bytes[HEADER_LEN + ref_len..];
        stream.indices = if width_bytes == 4 {
            body.chunks_exact(4)
                .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
                .collect()
        } else {
            body.chunks_exact(2)
                .map(|c| u16::from_le_bytes([c[0], c[1]]) as u32)
                .collect()
        };
        stream.validate().map_err(|e| corrupt(e.to_string()))?;
        Ok(stream)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        if !path.exists() {
            return Err(Error::MissingPath(path.to_path_buf()));
        }
        Self::from_bytes(&std::fs::read(path)?)
    }

    pub fn reference_clip(&self) -> Result<VideoClip> {
        VideoClip::from_u8(
            &self.reference,
            self.n_ref_frames as usize,
            self.height as usize,
            self.width as usize,
            STREAM_CHANNELS,
        )
    }

    /// Bits spent on indices.
    pub fn index_bits(&self) -> u64 {
        self.indices.len() as u64 * if self.wide_indices() { 32 } else { 16 }
    }
}

/// The reference as it will be stored: rounded to 8 bits.
pub fn stored_reference(split: &ClipSplit) -> Result<ClipSplit> {
    ClipSplit::new(split.reference.quantized_u8(), split.target.clone())
}

/// Tokenizes a clip into a stream. The reference is rounded to 8 bits first
/// so that decoding from the stream sees exactly what the encoder saw.
pub fn encode_stream(tok: &Tokenizer, split: &ClipSplit) -> Result<TokenStream> {
    if split.reference.c() != STREAM_CHANNELS {
        return Err(Error::shape("token streams hold RGB clips"));
    }
    let split = stored_reference(split)?;
    let indices = tok.tokenize(&split)?;
    let (n_ref, h, w, _) = split.reference.dims();
    Ok(TokenStream {
        n_ref_frames: u8::try_from(n_ref).map_err(|_| Error::invalid("more than 255 reference frames"))?,
        grid: tok.quantized_shape()?,
        codebook_size: u32_of(tok.codebook.k(), "codebook size")?,
        patch: tok.model.patch,
        height: u32_of(h, "height")?,
        width: u32_of(w, "width")?,
        reference: split.reference.to_u8(),
        indices,
    })
}

/// Decodes a stream's target frames with the stored reference or an override.
pub fn decode_stream(tok: &Tokenizer, stream: &TokenStream, reference: Option<&VideoClip>) -> Result<VideoClip> {
    let m = &tok.model;
    if stream.patch != m.patch || stream.grid != tok.quantized_shape()? {
        return Err(Error::Config(format!(
            "stream lattice {:?} / patch {} does not match the checkpoint",
            stream.grid, stream.patch
        )));
    }
    if (stream.codebook_size as usize) > tok.codebook.k() {
        return Err(Error::Config(format!(
            "stream needs K={} but the checkpoint codebook has {}",
            stream.codebook_size,
            tok.codebook.k()
        )));
    }
    let stored = stream.reference_clip()?;
    let reference = match reference {
        Some(r) => {
            if (r.t(), r.h(), r.w(), r.c()) != stored.dims() {
                return Err(Error::shape(format!(
                    "override reference {:?} does not match stored {:?}",
                    r.dims(),
                    stored.dims()
                )));
            }
            r.clone()
        }
        None => stored,
    };
    tok.detokenize(&stream.indices, &reference)
}
