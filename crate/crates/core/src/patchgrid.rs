//! 3D patchification between pixel clips and token lattices.
//!
//! A site `(i, j, k)` holds the cuboid `frames[i*t..(i+1)*t, j*h..(j+1)*h, k*w..(k+1)*w]`
//! flattened in `(t, y, x, c)` order. Sites are enumerated row-major over `(i, j, k)`.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::dataio::VideoClip;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PatchSpec {
    pub t: usize,
    pub h: usize,
    pub w: usize,
}

impl PatchSpec {
    pub fn new(t: usize, h: usize, w: usize) -> Result<Self> {
        if t == 0 || h == 0 || w == 0 {
            return Err(Error::invalid("patch extents must be positive"));
        }
        Ok(Self { t, h, w })
    }

    pub fn volume(&self) -> usize {
        self.t * self.h * self.w
    }

    /// Values per token for `c` channels.
    pub fn token_dim(&self, c: usize) -> usize {
        self.volume() * c
    }

    /// Lattice shape for a `T×H×W` clip, or an error when a dimension does not divide.
    pub fn grid_shape(&self, t: usize, h: usize, w: usize) -> Result<GridShape> {
        if t % self.t != 0 || h % self.h != 0 || w % self.w != 0 {
            return Err(Error::shape(format!(
                "clip {t}x{h}x{w} not divisible by patch {}x{}x{}",
                self.t, self.h, self.w
            )));
        }
        Ok(GridShape {
            tau: t / self.t,
            eta: h / self.h,
            omega: w / self.w,
        })
    }
}

impl fmt::Display for PatchSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}", self.t, self.h, self.w)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GridShape {
    pub tau: usize,
    pub eta: usize,
    pub omega: usize,
}

impl GridShape {
    pub fn sites(&self) -> usize {
        self.tau * self.eta * self.omega
    }

    pub fn spatial(&self) -> usize {
        self.eta * self.omega
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TokenPayload {
    Continuous { dim: usize, data: Vec<f32> },
    Discrete { codebook_size: usize, indices: Vec<u32> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct TokenGrid {
    pub shape: GridShape,
    pub payload: TokenPayload,
}

impl TokenGrid {
    pub fn continuous(shape: GridShape, dim: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != shape.sites() * dim {
            return Err(Error::shape(format!(
                "{} values do not fill {} sites of dim {dim}",
                data.len(),
                shape.sites()
            )));
        }
        Ok(Self {
            shape,
            payload: TokenPayload::Continuous { dim, data },
        })
    }

    pub fn discrete(shape: GridShape, codebook_size: usize, indices: Vec<u32>) -> Result<Self> {
        if indices.len() != shape.sites() {
            return Err(Error::shape(format!(
                "{} indices for {} sites",
                indices.len(),
                shape.sites()
            )));
        }
        if let Some(i) = indices.iter().find(|&&i| i as usize >= codebook_size) {
            return Err(Error::invalid(format!(
                "index {i} outside codebook of size {codebook_size}"
            )));
        }
        Ok(Self {
            shape,
            payload: TokenPayload::Discrete {
                codebook_size,
                indices,
            },
        })
    }

    pub fn len(&self) -> usize {
        self.shape.sites()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn continuous_data(&self) -> Option<(usize, &[f32])> {
        match &self.payload {
            TokenPayload::Continuous { dim, data } => Some((*dim, data)),
            _ => None,
        }
    }

    pub fn indices(&self) -> Option<&[u32]> {
        match &self.payload {
            TokenPayload::Discrete { indices, .. } => Some(indices),
            _ => None,
        }
    }
}

pub fn patchify(clip: &VideoClip, spec: PatchSpec) -> Result<TokenGrid> {
    let (t, h, w, c) = clip.dims();
    let shape = spec.grid_shape(t, h, w)?;
    let dim = spec.token_dim(c);
    let src = clip.data();
    let mut data = Vec::with_capacity(shape.sites() * dim);
    for i in 0..shape.tau {
        for j in 0..shape.eta {
            for k in 0..shape.omega {
                for dt in 0..spec.t {
                    for dy in 0..spec.h {
                        let row = ((i * spec.t + dt) * h + j * spec.h + dy) * w + k * spec.w;
                        data.extend_from_slice(&src[row * c..(row + spec.w) * c]);
                    }
                }
            }
        }
    }
    TokenGrid::continuous(shape, dim, data)
}

pub fn unpatchify(grid: &TokenGrid, spec: PatchSpec) -> Result<VideoClip> {
    let (dim, data) = grid
        .continuous_data()
        .ok_or_else(|| Error::shape("unpatchify needs continuous tokens"))?;
    if dim == 0 || dim % spec.volume() != 0 {
        return Err(Error::shape(format!(
            "token dim {dim} is not a multiple of patch volume {}",
            spec.volume()
        )));
    }
    let c = dim / spec.volume();
    let s = grid.shape;
    let (t, h, w) = (s.tau * spec.t, s.eta * spec.h, s.omega * spec.w);
    let mut out = vec![0.0f32; t * h * w * c];
    let mut src = data.chunks_exact(spec.w * c);
    for i in 0..s.tau {
        for j in 0..s.eta {
            for k in 0..s.omega {
                for dt in 0..spec.t {
                    for dy in 0..spec.h {
                        let row = ((i * spec.t + dt) * h + j * spec.h + dy) * w + k * spec.w;
                        out[row * c..(row + spec.w) * c].copy_from_slice(src.next().unwrap());
                    }
                }
            }
        }
    }
    VideoClip::from_clamped(out, t, h, w, c)
}

/// Pixels represented per discrete token, `t·h·w`, printed as `N:1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CompressionRatio(pub usize);

impl fmt::Display for CompressionRatio {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:1", self.0)
    }
}

pub fn compression_ratio(spec: PatchSpec) -> CompressionRatio {
    CompressionRatio(spec.volume())
}

/// Bit-level ratio: 8-bit pixel channels per token against `log2 K` index bits.
pub fn bit_compression_ratio(spec: PatchSpec, channels: usize, codebook_size: usize) -> f64 {
    let bits = (codebook_size.max(2) as f64).log2();
    (spec.token_dim(channels) * 8) as f64 / bits
}

/// `log10(levels^(h·w·channels))`: the decimal exponent of the number of
/// distinct spatial patches. A single level gives 0.
pub fn rgb_space_size(spec: PatchSpec, levels: usize, channels: usize) -> f64 {
    if levels <= 1 {
        return 0.0;
    }
    (spec.h * spec.w * channels) as f64 * (levels as f64).log10()
}
