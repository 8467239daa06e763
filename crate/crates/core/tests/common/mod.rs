//! Randomized round-trip cases shared by the integration tests and the
//! acceptance binary. Each case builds one random payload, writes it, reads it
//! back, writes again, and demands identical values and identical bytes.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use reftok::checkpoint::{Checkpoint, CheckpointKind, NamedTensor};
use reftok::codec::TokenStream;
use reftok::config::ModelConfig;
use reftok::dataio::{decode_rvc, encode_rvc, ClipSplit, VideoClip};
use reftok::maskgen::TokenDatasetRecord;
use reftok::model::Tokenizer;
use reftok::refencoder::MaskMode;
use reftok::DType;
use reftok::patchgrid::{patchify, unpatchify, GridShape, PatchSpec, TokenGrid};
use reftok::vq::Codebook;

pub type CaseResult = Result<(), String>;

fn ensure(ok: bool, what: impl FnOnce() -> String) -> CaseResult {
    if ok {
        Ok(())
    } else {
        Err(what())
    }
}

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn random_f32(rng: &mut ChaCha8Rng) -> f32 {
    // a mix of ordinary values, extremes of range and signed zeros
    match rng.random_range(0..10) {
        0 => -0.0,
        1 => f32::MIN_POSITIVE * rng.random::<f32>(),
        2 => rng.random_range(-1e30f32..1e30),
        _ => rng.random_range(-4.0f32..4.0),
    }
}

fn same_bits(a: &[f32], b: &[f32]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
}

pub fn patch_case(rng: &mut ChaCha8Rng) -> CaseResult {
    let spec = PatchSpec::new(rng.random_range(1..=3), rng.random_range(1..=5), rng.random_range(1..=5)).map_err(err)?;
    // clips are at least 8x8
    let (mh, mw) = (8usize.div_ceil(spec.h), 8usize.div_ceil(spec.w));
    let (t, h, w) = (
        spec.t * rng.random_range(1..=3),
        spec.h * rng.random_range(mh..=mh + 3),
        spec.w * rng.random_range(mw..=mw + 3),
    );
    let c = rng.random_range(1..=4);
    let data: Vec<f32> = (0..t * h * w * c).map(|_| rng.random()).collect();
    let clip = VideoClip::new(data, t, h, w, c).map_err(err)?;
    let grid = patchify(&clip, spec).map_err(err)?;
    let back = unpatchify(&grid, spec).map_err(err)?;
    ensure(back.dims() == clip.dims(), || format!("dims {:?} vs {:?}", back.dims(), clip.dims()))?;
    ensure(same_bits(back.data(), clip.data()), || format!("patch {spec} on {t}x{h}x{w}x{c} lost values"))
}

pub fn rvc_case(rng: &mut ChaCha8Rng) -> CaseResult {
    let (t, h, w, c) = (
        rng.random_range(1..=4),
        rng.random_range(8..=16),
        rng.random_range(8..=16),
        rng.random_range(1..=4),
    );
    let bytes: Vec<u8> = (0..t * h * w * c).map(|_| rng.random()).collect();
    let clip = VideoClip::from_u8(&bytes, t, h, w, c).map_err(err)?;
    let encoded = encode_rvc(&clip);
    let back = decode_rvc(&encoded).map_err(err)?;
    ensure(back.to_u8() == bytes, || "rvc payload changed".into())?;
    ensure(encode_rvc(&back) == encoded, || "rvc bytes changed on rewrite".into())
}

pub fn stream_case(rng: &mut ChaCha8Rng) -> CaseResult {
    let patch = PatchSpec::new(rng.random_range(1..=2), rng.random_range(4..=8), rng.random_range(4..=8)).map_err(err)?;
    let grid = GridShape {
        tau: rng.random_range(1..=4),
        eta: rng.random_range(2..=4),
        omega: rng.random_range(2..=4),
    };
    let k: u32 = match rng.random_range(0..3) {
        0 => rng.random_range(2..=256),
        1 => rng.random_range(257..=65536),
        _ => rng.random_range(65537..=1 << 20),
    };
    let n_ref: u8 = rng.random_range(1..=3);
    let (h, w) = (patch.h * grid.eta, patch.w * grid.omega);
    let stream = TokenStream {
        n_ref_frames: n_ref,
        grid,
        codebook_size: k,
        patch,
        height: h as u32,
        width: w as u32,
        reference: (0..n_ref as usize * h * w * 3).map(|_| rng.random()).collect(),
        indices: (0..grid.sites()).map(|_| rng.random_range(0..k)).collect(),
    };
    let bytes = stream.to_bytes().map_err(err)?;
    let back = TokenStream::from_bytes(&bytes).map_err(err)?;
    ensure(back == stream, || "token stream changed".into())?;
    ensure(back.to_bytes().map_err(err)? == bytes, || "token stream bytes changed on rewrite".into())
}

fn random_codebook(rng: &mut ChaCha8Rng) -> Result<Codebook, String> {
    let (k, d) = (rng.random_range(2..=40), rng.random_range(1..=16));
    let vectors = (0..k * d).map(|_| random_f32(rng)).collect();
    let usage = (0..k).map(|_| rng.random_range(0.0f32..10.0)).collect();
    Codebook::new(k, d, vectors, usage).map_err(err)
}

pub fn codebook_case(rng: &mut ChaCha8Rng) -> CaseResult {
    let book = random_codebook(rng)?;
    let bytes = book.to_bytes();
    let (back, used) = Codebook::from_bytes(&bytes).map_err(err)?;
    ensure(used == bytes.len(), || format!("codebook read {used} of {} bytes", bytes.len()))?;
    ensure(
        same_bits(back.vectors(), book.vectors()) && same_bits(back.usage(), book.usage()),
        || "codebook values changed".into(),
    )?;
    ensure(back.to_bytes() == bytes, || "codebook bytes changed on rewrite".into())
}

pub fn record_case(rng: &mut ChaCha8Rng) -> CaseResult {
    let target_shape = GridShape {
        tau: rng.random_range(1..=4),
        eta: rng.random_range(1..=4),
        omega: rng.random_range(1..=4),
    };
    let ref_shape = GridShape {
        tau: rng.random_range(1..=2),
        ..target_shape
    };
    let k = rng.random_range(2..=5000);
    let dim = rng.random_range(1..=12);
    let id_len = rng.random_range(0..12);
    let source_id: String = (0..id_len).map(|_| rng.random_range('a'..='z')).collect();
    let rec = TokenDatasetRecord {
        source_id,
        codebook_size: k,
        target_shape,
        indices: (0..target_shape.sites()).map(|_| rng.random_range(0..k as u32)).collect(),
        h_r: TokenGrid::continuous(ref_shape, dim, (0..ref_shape.sites() * dim).map(|_| random_f32(rng)).collect())
            .map_err(err)?,
    };
    let mut bytes = Vec::new();
    rec.write_to(&mut bytes).map_err(err)?;
    let (back, used) = TokenDatasetRecord::read_from(&bytes).map_err(err)?;
    ensure(used == bytes.len(), || "record length mismatch".into())?;
    ensure(back.indices == rec.indices && back.source_id == rec.source_id, || "record fields changed".into())?;
    ensure(
        same_bits(back.h_r.continuous_data().unwrap().1, rec.h_r.continuous_data().unwrap().1),
        || "record reference tokens changed".into(),
    )?;
    let mut again = Vec::new();
    back.write_to(&mut again).map_err(err)?;
    ensure(again == bytes, || "record bytes changed on rewrite".into())
}

pub fn checkpoint_case(rng: &mut ChaCha8Rng) -> CaseResult {
    let kind = if rng.random_bool(0.5) {
        CheckpointKind::Tokenizer
    } else {
        CheckpointKind::Generator
    };
    let tensors = (0..rng.random_range(0..6))
        .map(|i| {
            let dims: Vec<usize> = (0..rng.random_range(0..=3)).map(|_| rng.random_range(1..=5)).collect();
            let n = dims.iter().product();
            NamedTensor {
                name: format!("layer{i}.w"),
                dims,
                data: (0..n).map(|_| random_f32(rng)).collect(),
            }
        })
        .collect();
    let codebook = match kind {
        CheckpointKind::Tokenizer => Some(random_codebook(rng)?),
        CheckpointKind::Generator => None,
    };
    let ckpt = Checkpoint {
        kind,
        header: serde_json::json!({ "step": rng.random_range(0..100000u32), "note": "random" }),
        tensors,
        codebook,
    };
    let bytes = ckpt.to_bytes().map_err(err)?;
    let back = Checkpoint::from_bytes(&bytes).map_err(err)?;
    ensure(back.tensors.len() == ckpt.tensors.len(), || "tensor count changed".into())?;
    for (a, b) in back.tensors.iter().zip(&ckpt.tensors) {
        ensure(a.name == b.name && a.dims == b.dims && same_bits(&a.data, &b.data), || {
            format!("tensor {} changed", b.name)
        })?;
    }
    ensure(back.to_bytes().map_err(err)? == bytes, || "checkpoint bytes changed on rewrite".into())
}

/// Every format case, by name.
pub const FORMAT_CASES: &[(&str, fn(&mut ChaCha8Rng) -> CaseResult)] = &[
    ("patchify", patch_case),
    ("rvc", rvc_case),
    ("rtk stream", stream_case),
    ("codebook", codebook_case),
    ("token record", record_case),
    ("checkpoint", checkpoint_case),
];

fn uniform_clip(rng: &mut ChaCha8Rng, t: usize, h: usize, w: usize) -> VideoClip {
    let v = (0..t * h * w * 3).map(|_| rng.random()).collect();
    VideoClip::new(v, t, h, w, 3).expect("valid clip")
}

/// Uniform-noise clip split matching a model's geometry.
pub fn random_split(rng: &mut ChaCha8Rng, m: &ModelConfig) -> ClipSplit {
    let r = uniform_clip(rng, m.n_ref_frames, m.height, m.width);
    let t = uniform_clip(rng, m.target_frames, m.height, m.width);
    ClipSplit::new(r, t).expect("matching frames")
}

/// Largest `|h_r - h_r'|` over `trials` random `(x_r, x_t, x_t')` triples for
/// a freshly initialized desk-size encoder under `mode`.
pub fn causality_max_diff(mode: MaskMode, trials: usize, seed: u64) -> f64 {
    let model = ModelConfig {
        mask_mode: mode,
        init_seed: seed,
        ..ModelConfig::default()
    };
    let tok = Tokenizer::new(model.clone(), Default::default(), DType::F32).expect("tokenizer");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..trials {
        let a = random_split(&mut rng, &model);
        let other = random_split(&mut rng, &model);
        let b = ClipSplit::new(a.reference.clone(), other.target).expect("matching frames");
        let enc = |s: &ClipSplit| {
            tok.encoder
                .encode(s, mode, false, 0, DType::F32, tok.device())
                .expect("encode")
                .h_r
                .expect("reference tokens")
        };
        let (ha, hb) = (enc(&a), enc(&b));
        let (_, da) = ha.continuous_data().unwrap();
        let (_, db) = hb.continuous_data().unwrap();
        for (x, y) in da.iter().zip(db) {
            worst = worst.max((x - y).abs() as f64);
        }
    }
    worst
}
