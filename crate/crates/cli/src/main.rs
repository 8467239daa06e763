use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use reftok::checkpoint::{load_tokenizer, load_train_state, save_train_state};
use reftok::codec::{decode_stream, encode_stream, TokenStream};
use reftok::config::RunConfig;
use reftok::dataio::{load_clip, read_rvc, split_reference, write_contact_sheet, write_rvc, VideoClip};
use reftok::maskgen::{
    export_token_dataset, generate_tokens, generator_checkpoint, load_generator, masked_accuracy,
    read_token_dataset, train_generator, write_token_dataset, GenSchedule,
};
use reftok::metrics::{
    comparison_table, difference_mask, evaluate, format_l1, load_eval_dir, lpips_plugin, region_change,
    EvalReport,
};
use reftok::model::Tokenizer;
use reftok::patchgrid::compression_ratio;
use reftok::trainer::{StepMetrics, TrainState};
use reftok::{DType, Error, Result};

#[derive(Parser)]
#[command(name = "reftok", version, about = "Reference-conditioned video tokenizer")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a tokenizer from a TOML config.
    Train(TrainArgs),
    /// Tokenize a clip into a `.rtk` stream.
    Encode(EncodeArgs),
    /// Decode a `.rtk` stream, optionally with an edited reference.
    Decode(DecodeArgs),
    /// Score a checkpoint (or two, side by side) on held-out clips.
    Evaluate(EvaluateArgs),
    /// Tokenize training clips into a generator dataset.
    ExportTokens(ExportArgs),
    /// Train the masked-token generator on an exported dataset.
    TrainGenerator(TrainGeneratorArgs),
    /// Predict target frames from a reference clip.
    Generate(GenerateArgs),
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    /// Where the final checkpoint is written.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Continue from this checkpoint instead of starting fresh.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// JSON-lines metrics log.
    #[arg(long)]
    metrics: Option<PathBuf>,
    /// Overrides `train.steps`.
    #[arg(long)]
    steps: Option<usize>,
}

#[derive(Args)]
struct EncodeArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// `.rvc` file or directory of PNG frames.
    #[arg(long)]
    clip: PathBuf,
    #[arg(long, default_value_t = 0)]
    start: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct DecodeArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    stream: PathBuf,
    /// Decoded target frames as `.rvc`.
    #[arg(long)]
    out: PathBuf,
    /// Replacement reference frames (`.rvc`), e.g. an edited copy of the stored one.
    #[arg(long)]
    reference: Option<PathBuf>,
    /// PNG contact sheet: reference row, decoded row, and the stored-reference
    /// decode when an override is given.
    #[arg(long)]
    png: Option<PathBuf>,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Second checkpoint for a side-by-side comparison.
    #[arg(long)]
    compare: Option<PathBuf>,
    /// Directory of `.rvc` clips or PNG frame directories.
    #[arg(long, conflicts_with = "config")]
    eval_dir: Option<PathBuf>,
    /// Use the config's synthetic held-out clips instead of a directory.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory for `report.json` and `report.txt`.
    #[arg(long)]
    out: PathBuf,
    /// External perceptual-distance program, called as `cmd a.rvc b.rvc`.
    #[arg(long)]
    lpips: Option<String>,
}

#[derive(Args)]
struct ExportArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Number of clips to export (one per source, in order).
    #[arg(long)]
    clips: Option<usize>,
}

#[derive(Args)]
struct TrainGeneratorArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    tokens: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    generator: PathBuf,
    /// Reference frames as `.rvc`.
    #[arg(long)]
    reference: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    png: Option<PathBuf>,
    /// Overrides the configured number of decoding steps.
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    temperature: Option<f64>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Encode(a) => cmd_encode(a),
        Command::Decode(a) => cmd_decode(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::ExportTokens(a) => cmd_export(a),
        Command::TrainGenerator(a) => cmd_train_generator(a),
        Command::Generate(a) => cmd_generate(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let cfg = RunConfig::load(&a.config)?;
    let mut state = match &a.resume {
        Some(path) => {
            let state = load_train_state(path)?;
            eprintln!("resuming at step {}", state.step);
            state
        }
        None => {
            let tok = Tokenizer::new(cfg.model.clone(), cfg.vq.clone(), DType::F32)?;
            TrainState::new(tok, cfg.train.clone())?
        }
    };
    let until = a.steps.unwrap_or(state.train.steps);
    let sources = cfg.data.load_sources()?;
    let mut log = match &a.metrics {
        Some(p) => Some(BufWriter::new(
            fs::OpenOptions::new().create(true).append(true).open(p)?,
        )),
        None => None,
    };
    let every = state.train.log_every.max(1);
    let mut io_err = None;
    let result = state.fit(&sources, until, None, |m: &StepMetrics| {
        if m.step % every == 0 || m.step == until {
            eprintln!(
                "step {:>6}  recon {:.4}  ppl {:6.1}  util {:.2}  K {}  lr {:.2e}",
                m.step, m.recon, m.perplexity, m.utilization, m.codebook_size, m.lr
            );
            if let Some(w) = log.as_mut() {
                if let Err(e) = writeln!(w, "{}", m.log_line()) {
                    io_err.get_or_insert(e);
                }
            }
        }
    });
    if let Some(w) = log.as_mut() {
        w.flush()?;
    }
    if let Some(e) = io_err {
        return Err(e.into());
    }
    result?;
    save_train_state(&a.checkpoint, &state)?;
    eprintln!("wrote {} at step {}", a.checkpoint.display(), state.step);
    Ok(())
}

fn load_split(tok: &Tokenizer, path: &Path, start: usize) -> Result<reftok::dataio::ClipSplit> {
    let m = &tok.model;
    let clip = load_clip(path, start, m.clip_frames(), 1)?;
    split_reference(&clip, m.n_ref_frames)
}

fn cmd_encode(a: EncodeArgs) -> Result<()> {
    let tok = load_tokenizer(&a.checkpoint)?;
    let split = load_split(&tok, &a.clip, a.start)?;
    let stream = encode_stream(&tok, &split)?;
    stream.write(&a.out)?;
    let m = &tok.model;
    let pixels = split.target.t() * split.target.h() * split.target.w();
    let tokens = stream.indices.len();
    println!("tokens          {tokens} ({}x{}x{})", stream.grid.tau, stream.grid.eta, stream.grid.omega);
    println!("pixels/token    {} ({})", pixels / tokens, compression_ratio(m.patch));
    println!("index bits      {} ({} per token)", stream.index_bits(), stream.index_bits() / tokens as u64);
    println!("reference bytes {}", stream.reference.len());
    Ok(())
}

fn cmd_decode(a: DecodeArgs) -> Result<()> {
    let tok = load_tokenizer(&a.checkpoint)?;
    let stream = TokenStream::read(&a.stream)?;
    let stored = stream.reference_clip()?;
    let alt = a.reference.as_deref().map(read_rvc).transpose()?;
    let decoded = decode_stream(&tok, &stream, alt.as_ref())?;
    write_rvc(&a.out, &decoded)?;
    let mut sheet: Vec<VideoClip> = vec![alt.clone().unwrap_or_else(|| stored.clone()), decoded.clone()];
    if let Some(alt) = &alt {
        let base = decode_stream(&tok, &stream, None)?;
        let mask = difference_mask(&stored, alt, 0.5 / 255.0)?;
        let changed = mask.iter().filter(|&&m| m).count();
        if changed == 0 {
            println!("override reference equals the stored one");
        } else if changed == mask.len() {
            println!("override changes every reference pixel; no region to compare");
        } else {
            let r = region_change(&base, &decoded, &mask)?;
            println!(
                "edited region {changed} px: mean change inside {:.4}, outside {:.4}, ratio {:.2}",
                r.inside, r.outside, r.ratio
            );
        }
        sheet.push(base);
    }
    if let Some(png) = &a.png {
        let rows: Vec<&VideoClip> = sheet.iter().collect();
        write_contact_sheet(png, &rows)?;
    }
    Ok(())
}

fn eval_one(
    path: &Path,
    clips: &[VideoClip],
    lpips: Option<&str>,
) -> Result<(EvalReport, Option<f64>)> {
    let tok = load_tokenizer(path)?;
    let m = &tok.model;
    let report = evaluate(&tok, clips, m.n_ref_frames, compression_ratio(m.patch).to_string())?;
    let lp = match lpips {
        Some(cmd) => {
            let mut sum = 0.0;
            for clip in clips {
                let split = split_reference(clip, m.n_ref_frames)?;
                sum += lpips_plugin(cmd, &split.target, &tok.reconstruct(&split)?)?;
            }
            Some(sum / clips.len() as f64)
        }
        None => None,
    };
    Ok((report, lp))
}

fn cmd_evaluate(a: EvaluateArgs) -> Result<()> {
    let frames = load_tokenizer(&a.checkpoint)?.model.clip_frames();
    let clips = match (&a.eval_dir, &a.config) {
        (Some(dir), _) => load_eval_dir(dir, frames)?,
        (None, Some(cfg)) => RunConfig::load(cfg)?.data.synthetic_eval_clips(frames)?,
        (None, None) => return Err(Error::Config("evaluate needs --eval-dir or --config".into())),
    };
    fs::create_dir_all(&a.out)?;
    let (report, lp) = eval_one(&a.checkpoint, &clips, a.lpips.as_deref())?;
    fs::write(a.out.join("report.json"), report.to_json()?)?;
    let mut text = report.text_table();
    if let Some(lp) = lp {
        text.push_str(&format!("lpips {lp:.4}\n"));
    }
    if let Some(other) = &a.compare {
        let (report_b, lp_b) = eval_one(other, &clips, a.lpips.as_deref())?;
        fs::write(a.out.join("report_compare.json"), report_b.to_json()?)?;
        let name = |p: &Path| p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        text = comparison_table(&name(&a.checkpoint), &report, &name(other), &report_b);
        if let (Some(x), Some(y)) = (lp, lp_b) {
            text.push_str(&format!("lpips {x:.4} vs {y:.4}\n"));
        }
    }
    fs::write(a.out.join("report.txt"), &text)?;
    print!("{text}");
    println!("L1 x1e-2: {}", format_l1(report.l1));
    Ok(())
}

fn cmd_export(a: ExportArgs) -> Result<()> {
    let tok = load_tokenizer(&a.checkpoint)?;
    let cfg = RunConfig::load(&a.config)?;
    let sources = cfg.data.load_sources()?;
    let n = a.clips.unwrap_or(sources.len()).min(sources.len());
    let frames = tok.model.clip_frames();
    let splits = sources[..n]
        .iter()
        .map(|s| split_reference(&s.slice_frames(0, frames)?, tok.model.n_ref_frames))
        .collect::<Result<Vec<_>>>()?;
    let records = export_token_dataset(&tok, &splits)?;
    write_token_dataset(&a.out, &records)?;
    println!("exported {} records to {}", records.len(), a.out.display());
    Ok(())
}

fn cmd_train_generator(a: TrainGeneratorArgs) -> Result<()> {
    let cfg = RunConfig::load(&a.config)?;
    let records = read_token_dataset(&a.tokens)?;
    let every = (cfg.generate.steps / 20).max(1);
    let gen = train_generator(&records, &cfg.generate, |m| {
        if m.step % every == 0 {
            eprintln!("step {:>6}  loss {:.4}  lr {:.2e}", m.step, m.loss, m.lr);
        }
    })?;
    let acc = masked_accuracy(&gen, &records, 0.5, cfg.generate.seed, false)?;
    println!("masked-token accuracy at 50% masking: {:.3}", acc);
    generator_checkpoint(&gen)?.save(&a.out)?;
    Ok(())
}

fn cmd_generate(a: GenerateArgs) -> Result<()> {
    let tok = load_tokenizer(&a.checkpoint)?;
    let gen = load_generator(&a.generator)?;
    if gen.cfg.codebook_size != tok.codebook.k() {
        return Err(Error::Config(format!(
            "generator predicts K={} but the tokenizer has {}",
            gen.cfg.codebook_size,
            tok.codebook.k()
        )));
    }
    let reference = read_rvc(&a.reference)?;
    if reference.t() != tok.model.n_ref_frames {
        return Err(Error::Shape(format!(
            "reference has {} frames, the tokenizer expects {}",
            reference.t(),
            tok.model.n_ref_frames
        )));
    }
    // same rounding the token streams apply
    let reference = reference.quantized_u8();
    let schedule = GenSchedule {
        total_steps: a.steps.unwrap_or(gen.cfg.generate.schedule_steps),
        temperature: a.temperature.unwrap_or(gen.cfg.generate.temperature),
    };
    let h_r = tok.reference_tokens(&reference)?;
    let ids = generate_tokens(&gen, &h_r, &schedule, a.seed)?;
    let clip = tok.detokenize(&ids, &reference)?;
    write_rvc(&a.out, &clip)?;
    println!("generated {} frames from seed {}", clip.t(), a.seed);
    if let Some(png) = &a.png {
        write_contact_sheet(png, &[&reference, &clip])?;
    }
    Ok(())
}
