//! Run configuration: a TOML file with `[data]`, `[model]`, `[vq]`, `[train]`
//! and `[generate]` sections. Unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dataio::{load_source_dir, synth_redundant_clip, SynthConfig, VideoClip};
use crate::error::{Error, Result};
use crate::patchgrid::{GridShape, PatchSpec};
use crate::refencoder::MaskMode;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenizerMode {
    /// Reference tokens bypass the quantizer; loss on targets only.
    Reftok,
    /// Reference and targets tokenized jointly; every token is quantized.
    ReferenceLess,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub mode: TokenizerMode,
    pub mask_mode: MaskMode,
    pub n_ref_frames: usize,
    pub target_frames: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub patch: PatchSpec,
    pub embed_dim: usize,
    pub enc_depth: usize,
    pub dec_depth: usize,
    pub heads: usize,
    pub mlp_ratio: f64,
    pub code_dim: usize,
    /// Largest number of target tokens pruned per step; `None` means 25% of
    /// the target tokens.
    pub prune_max: Option<usize>,
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            mode: TokenizerMode::Reftok,
            mask_mode: MaskMode::Oneway,
            n_ref_frames: 1,
            target_frames: 6,
            height: 32,
            width: 32,
            channels: 3,
            patch: PatchSpec { t: 2, h: 8, w: 8 },
            embed_dim: 192,
            enc_depth: 2,
            dec_depth: 2,
            heads: 4,
            mlp_ratio: 4.0,
            code_dim: 64,
            prune_max: None,
            init_seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn ref_tau(&self) -> usize {
        self.n_ref_frames.div_ceil(self.patch.t)
    }

    pub fn spatial(&self) -> Result<(usize, usize)> {
        let g = self.patch.grid_shape(self.patch.t, self.height, self.width)?;
        Ok((g.eta, g.omega))
    }

    /// Lattice of the target frames.
    pub fn target_shape(&self) -> Result<GridShape> {
        self.patch.grid_shape(self.target_frames, self.height, self.width)
    }

    /// Lattice of the replicate-padded reference.
    pub fn ref_shape(&self) -> Result<GridShape> {
        let (eta, omega) = self.spatial()?;
        Ok(GridShape {
            tau: self.ref_tau(),
            eta,
            omega,
        })
    }

    /// Lattice of the tokens that pass through the quantizer.
    pub fn quantized_shape(&self) -> Result<GridShape> {
        let t = self.target_shape()?;
        Ok(match self.mode {
            TokenizerMode::Reftok => t,
            TokenizerMode::ReferenceLess => GridShape {
                tau: t.tau + self.ref_tau(),
                ..t
            },
        })
    }

    pub fn max_grid(&self) -> Result<GridShape> {
        let t = self.target_shape()?;
        Ok(GridShape {
            tau: t.tau + self.ref_tau(),
            ..t
        })
    }

    pub fn prune_max_resolved(&self) -> Result<usize> {
        let n = self.quantized_shape()?.sites();
        Ok(self.prune_max.unwrap_or(n / 4))
    }

    pub fn clip_frames(&self) -> usize {
        self.n_ref_frames + self.target_frames
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_ref_frames == 0 {
            return Err(Error::Config("model.n_ref_frames must be >= 1".into()));
        }
        if self.target_frames == 0 {
            return Err(Error::Config("model.target_frames must be >= 1".into()));
        }
        if self.heads == 0 || self.embed_dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "model.embed_dim {} must be divisible by model.heads {}",
                self.embed_dim, self.heads
            )));
        }
        self.target_shape()
            .map_err(|e| Error::Config(format!("model geometry: {e}")))?;
        let n = self.quantized_shape()?.sites();
        if self.prune_max_resolved()? >= n {
            return Err(Error::Config(format!(
                "model.prune_max must be below the {n} quantized tokens"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VqConfig {
    /// Final (maximum) codebook size.
    pub codebook_size: usize,
    pub beta: f64,
    pub decay: f32,
    pub splitting: bool,
    /// Codebook size before the first doubling (when splitting is on).
    pub initial_size: Option<usize>,
    pub split_steps: Vec<usize>,
    pub dead_replace_every: usize,
    pub split_eps: f32,
    pub dead_threshold: f64,
}

impl Default for VqConfig {
    fn default() -> Self {
        Self {
            codebook_size: 128,
            beta: 0.25,
            decay: 0.99,
            splitting: true,
            initial_size: None,
            split_steps: vec![500, 1500],
            dead_replace_every: 250,
            split_eps: 1e-3,
            dead_threshold: 0.01,
        }
    }
}

impl VqConfig {
    pub fn initial_k(&self) -> usize {
        if !self.splitting {
            return self.codebook_size;
        }
        self.initial_size
            .unwrap_or_else(|| (self.codebook_size >> self.split_steps.len()).max(1))
    }

    pub fn validate(&self) -> Result<()> {
        if self.codebook_size < 2 {
            return Err(Error::Config("vq.codebook_size must be >= 2".into()));
        }
        if !(0.0..1.0).contains(&self.decay) {
            return Err(Error::Config("vq.decay must be in [0, 1)".into()));
        }
        if self.splitting && self.initial_k() << self.split_steps.len() > self.codebook_size {
            return Err(Error::Config(
                "vq.split_steps would double past vq.codebook_size".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReconLoss {
    L1,
    L2,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub min_lr: f64,
    pub warmup: usize,
    pub weight_decay: f64,
    pub betas: (f64, f64),
    pub grad_clip: f64,
    pub recon_loss: ReconLoss,
    pub w_recon: f64,
    pub w_perceptual: f64,
    pub w_adversarial: f64,
    pub prune: bool,
    pub interval_min: usize,
    pub interval_max: usize,
    pub seed: u64,
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 4,
            lr: 1e-4,
            min_lr: 0.0,
            warmup: 100,
            weight_decay: 1e-4,
            betas: (0.9, 0.99),
            grad_clip: 1.0,
            recon_loss: ReconLoss::L1,
            w_recon: 1.0,
            w_perceptual: 0.1,
            w_adversarial: 0.0,
            prune: true,
            interval_min: 1,
            interval_max: 3,
            seed: 0,
            log_every: 50,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be >= 1".into()));
        }
        if self.interval_min == 0 || self.interval_min > self.interval_max {
            return Err(Error::Config(
                "train.interval_min must be in [1, train.interval_max]".into(),
            ));
        }
        for (name, w) in [
            ("w_recon", self.w_recon),
            ("w_perceptual", self.w_perceptual),
            ("w_adversarial", self.w_adversarial),
        ] {
            if !(w >= 0.0) {
                return Err(Error::Config(format!("train.{name} must be >= 0")));
            }
        }
        if !(self.lr > 0.0) {
            return Err(Error::Config("train.lr must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Directory of numbered PNG frames; synthetic sources are used when unset.
    pub frames_dir: Option<PathBuf>,
    pub synth: SynthConfig,
    pub sources: usize,
    pub source_seed: u64,
    pub eval_clips: usize,
    pub eval_seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            frames_dir: None,
            synth: SynthConfig {
                frames: 32,
                ..SynthConfig::default()
            },
            sources: 256,
            source_seed: 1,
            eval_clips: 16,
            eval_seed: 1_000_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenerateConfig {
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub schedule_steps: usize,
    pub temperature: f64,
    pub seed: u64,
}

impl Default for GenerateConfig {
    fn default() -> Self {
        Self {
            embed_dim: 256,
            depth: 6,
            heads: 8,
            mlp_ratio: 4.0,
            steps: 2000,
            batch_size: 8,
            lr: 3e-4,
            schedule_steps: 8,
            temperature: 1.0,
            seed: 0,
        }
    }
}

impl GenerateConfig {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.embed_dim % self.heads != 0 {
            return Err(Error::Config(
                "generate.embed_dim must be divisible by generate.heads".into(),
            ));
        }
        if self.schedule_steps == 0 {
            return Err(Error::Config("generate.schedule_steps must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub data: DataConfig,
    pub model: ModelConfig,
    pub vq: VqConfig,
    pub train: TrainConfig,
    pub generate: GenerateConfig,
}

impl DataConfig {
    /// Training sources: the frames directory when set, otherwise
    /// `sources` synthetic clips seeded from `source_seed`.
    pub fn load_sources(&self) -> Result<Vec<VideoClip>> {
        match &self.frames_dir {
            Some(dir) => load_source_dir(dir),
            None => (0..self.sources as u64)
                .map(|i| synth_redundant_clip(self.source_seed + i, &self.synth))
                .collect(),
        }
    }

    /// Held-out synthetic clips of `frames` frames, disjoint from the
    /// training seeds as long as `eval_seed` is past them.
    pub fn synthetic_eval_clips(&self, frames: usize) -> Result<Vec<VideoClip>> {
        let cfg = SynthConfig {
            frames,
            ..self.synth.clone()
        };
        (0..self.eval_clips as u64)
            .map(|i| synth_redundant_clip(self.eval_seed + i, &cfg))
            .collect()
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| {
            let msg = e.message().to_string();
            match unknown_field(&msg) {
                Some(key) => Error::UnknownConfigKey(key),
                None => Error::Config(msg),
            }
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        if !path.exists() {
            return Err(Error::Config(format!("config file {} not found", path.display())));
        }
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.vq.validate()?;
        self.train.validate()?;
        self.generate.validate()
    }
}

fn unknown_field(msg: &str) -> Option<String> {
    let rest = msg.strip_prefix("unknown field `")?;
    Some(rest[..rest.find('`')?].to_string())
}
