//! Command-line front end: data generation, discrepancy maps, training,
//! sampling, and reports.
//!
//! Exit codes: 0 success, 2 config error, 3 i/o error, 4 numerical
//! failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use ltd_lab::diffusion::{ddim_sample, SamplerConfig};
use ltd_lab::error::{Error, Result};
use ltd_lab::harness::config::ExperimentConfig;
use ltd_lab::harness::corpus::{pixel_clips, streams};
use ltd_lab::harness::report::{
    compare_peaks, frame_profile, report_heatmaps, write_frame_profile, write_peaks_csv,
    SeedPeaks,
};
use ltd_lab::harness::train::{load_checkpoint, load_runlog, run_training};
use ltd_lab::harness::Mode;
use ltd_lab::io::{load_tensor, save_tensor};
use ltd_lab::ltd::{ltd_map, weight_map, ChannelNorm, LtdConfig};
use ltd_lab::rng::Rng;
use ltd_lab::synthetic::pseudo_decode;
use ltd_lab::tensor::LatentVideo;

#[derive(Parser)]
#[command(name = "ltd-lab", about = "Latent temporal discrepancy laboratory")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic pixel-video corpus plus a manifest.
    GenData {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compute the discrepancy map of a latent tensor file.
    LtdMap {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long, default_value_t = 3)]
        tau: usize,
        #[arg(long, default_value = "l2")]
        norm: String,
        #[arg(long)]
        out: PathBuf,
        /// Also write the ln(e + D) weight map.
        #[arg(long)]
        weights: Option<PathBuf>,
        /// Also export per-frame PGM heatmaps of ln(e + D).
        #[arg(long)]
        heatmap: Option<PathBuf>,
    },
    /// Train baseline and/or LTD-weighted models.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Override the config's loss mode: baseline, ltd, or both.
        #[arg(long)]
        mode: Option<String>,
    },
    /// Draw a latent sample from a checkpoint with DDIM.
    Sample {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long = "class")]
        class: usize,
        #[arg(long, default_value_t = 50)]
        steps: usize,
        #[arg(long, default_value_t = 7.5)]
        guidance: f64,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Also decode the sample back to pixel space.
        #[arg(long)]
        decode: Option<PathBuf>,
    },
    /// Reports over finished runs.
    Report {
        #[command(subcommand)]
        what: ReportCmd,
    },
}

#[derive(Subcommand)]
enum ReportCmd {
    /// Per-frame profile CSV and summary from a run directory.
    Frames {
        #[arg(long)]
        runs: PathBuf,
        #[arg(long, default_value_t = 50)]
        window: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Discrepancy heatmaps of a latent tensor file.
    Heatmaps {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long, default_value_t = 3)]
        tau: usize,
        #[arg(long, default_value = "l2")]
        norm: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Peak-to-mean comparison between the two loss modes of a run.
    Peaks {
        #[arg(long)]
        runs: PathBuf,
        #[arg(long, default_value_t = 50)]
        window: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn gen_data(config: &Path, out: &Path) -> Result<()> {
    let cfg = ExperimentConfig::load(config)?;
    std::fs::create_dir_all(out)?;
    let mut manifest = String::new();
    for (i, (spec, video, label)) in pixel_clips(&cfg)?.into_iter().enumerate() {
        let name = format!("clip_{i:03}.ltdt");
        save_tensor(video.tensor(), &out.join(&name))?;
        manifest.push_str(&format!(
            "{name}\t{}\t{label}\t{}\n",
            spec.kind.name(),
            spec.seed
        ));
    }
    std::fs::write(out.join("manifest.tsv"), manifest)?;
    println!("wrote {} clips to {}", cfg.data.clips, out.display());
    Ok(())
}

fn ltd_map_cmd(
    input: &Path,
    tau: usize,
    norm: &str,
    out: &Path,
    weights: Option<&Path>,
    heatmap: Option<&Path>,
) -> Result<()> {
    let cfg = LtdConfig {
        tau,
        norm: ChannelNorm::parse(norm)?,
    };
    let latent = LatentVideo::new(load_tensor(input)?)?;
    let d = ltd_map(&latent, &cfg)?;
    save_tensor(d.tensor(), out)?;
    if weights.is_some() || heatmap.is_some() {
        let w = weight_map(&d)?;
        if let Some(path) = weights {
            save_tensor(w.tensor(), path)?;
        }
        if let Some(dir) = heatmap {
            ltd_lab::ltd::export_frame_heatmaps(w.tensor(), dir)?;
        }
    }
    Ok(())
}

fn train_cmd(config: &Path, mode: Option<&str>) -> Result<()> {
    let mut cfg = ExperimentConfig::load(config)?;
    if let Some(mode) = mode {
        cfg.train.mode = Mode::parse(mode)?;
    }
    let artifacts = run_training(&cfg)?;
    for (mode, digest) in &artifacts.log.digests {
        println!("{} draw digest {digest:016x}", mode.name());
    }
    if let Some(last) = artifacts.log.records.last() {
        println!(
            "finished {} steps, final loss {:.6e}",
            last.step + 1,
            last.total
        );
    }
    println!("artifacts in {}", cfg.out_dir.display());
    Ok(())
}

fn sample_cmd(
    checkpoint: &Path,
    class: usize,
    steps: usize,
    guidance: f64,
    seed: u64,
    out: &Path,
    decode: Option<&Path>,
) -> Result<()> {
    let ck = load_checkpoint(checkpoint)?;
    if class >= ck.params.arch.num_classes {
        return Err(Error::InvalidInput(format!(
            "class {class} outside 0..{}",
            ck.params.arch.num_classes
        )));
    }
    let cfg = SamplerConfig {
        num_steps: steps,
        guidance_scale: guidance,
    };
    let mut rng = Rng::new(seed).stream(streams::SAMPLER);
    let latent = ddim_sample(
        &ck.params,
        ck.params.arch.latent_dims,
        class,
        &cfg,
        &ck.schedule,
        &mut rng,
    )?;
    save_tensor(latent.tensor(), out)?;
    if let Some(path) = decode {
        let video = pseudo_decode(&latent, &ck.encoder, ck.pixel_channels)?;
        save_tensor(video.tensor(), path)?;
    }
    Ok(())
}

fn report_cmd(what: &ReportCmd) -> Result<()> {
    match what {
        ReportCmd::Frames { runs, window, out } => {
            let log = load_runlog(runs)?;
            let profile = frame_profile(&log, *window)?;
            let dir = out.clone().unwrap_or_else(|| runs.clone());
            write_frame_profile(&profile, &dir)?;
            println!("frame profile in {}", dir.display());
            Ok(())
        }
        ReportCmd::Heatmaps {
            input,
            tau,
            norm,
            out,
        } => {
            let cfg = LtdConfig {
                tau: *tau,
                norm: ChannelNorm::parse(norm)?,
            };
            let latent = LatentVideo::new(load_tensor(input)?)?;
            report_heatmaps(&latent, &cfg, out)?;
            println!("heatmaps in {}", out.display());
            Ok(())
        }
        ReportCmd::Peaks { runs, window, out } => {
            let log = load_runlog(runs)?;
            let report = compare_peaks(&log, *window)?;
            println!(
                "baseline peak/mean {:.6}  ltd peak/mean {:.6}  reduction {:+.6}",
                report.baseline_ratio, report.ltd_ratio, report.reduction
            );
            if let Some(path) = out {
                write_peaks_csv(&[SeedPeaks { seed: 0, report }], path)?;
            }
            Ok(())
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match &cli.cmd {
        Cmd::GenData { config, out } => gen_data(config, out),
        Cmd::LtdMap {
            input,
            tau,
            norm,
            out,
            weights,
            heatmap,
        } => ltd_map_cmd(input, *tau, norm, out, weights.as_deref(), heatmap.as_deref()),
        Cmd::Train { config, mode } => train_cmd(config, mode.as_deref()),
        Cmd::Sample {
            checkpoint,
            class,
            steps,
            guidance,
            seed,
            out,
            decode,
        } => sample_cmd(
            checkpoint,
            *class,
            *steps,
            *guidance,
            *seed,
            out,
            decode.as_deref(),
        ),
        Cmd::Report { what } => report_cmd(what),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
