//! Diagnostics: per-frame profiles, discrepancy heatmaps, and the
//! peak-reduction comparison between baseline and LTD runs.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::ltd::{export_frame_heatmaps, ltd_map, weight_map, LtdConfig};
use crate::parallel;
use crate::tensor::LatentVideo;

use super::config::ExperimentConfig;
use super::corpus::build_corpus;
use super::train::{run_single, LossMode, RunLog};

/// Max over entries divided by their mean; `None` when the mean is 0.
pub fn peak_to_mean(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    if mean == 0.0 {
        return None;
    }
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    Some(max / mean)
}

/// Pearson correlation; `None` when either side has zero variance.
pub fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    assert_eq!(x.len(), y.len());
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some(sxy / (sxx * syy).sqrt())
}

#[derive(Debug, Clone)]
pub struct FrameProfile {
    pub frame_ltd: Vec<f64>,
    pub baseline: Option<Vec<f64>>,
    pub ltd: Option<Vec<f64>>,
    pub window: usize,
}

impl FrameProfile {
    /// Correlation between the per-frame discrepancy and the baseline
    /// per-frame loss; the Fig.-style diagnostic.
    pub fn ltd_loss_correlation(&self) -> Option<f64> {
        self.baseline
            .as_ref()
            .and_then(|b| pearson(&self.frame_ltd, b))
    }
}

/// Average the trailing `window` steps of each available mode into a
/// per-frame profile.
pub fn frame_profile(log: &RunLog, window: usize) -> Result<FrameProfile> {
    if window == 0 {
        return Err(Error::InvalidConfig("report window must be >= 1".into()));
    }
    let baseline = if log.has_mode(LossMode::Baseline) {
        Some(log.trailing_frame_profile(LossMode::Baseline, window)?)
    } else {
        None
    };
    let ltd = if log.has_mode(LossMode::Ltd) {
        Some(log.trailing_frame_profile(LossMode::Ltd, window)?)
    } else {
        None
    };
    if baseline.is_none() && ltd.is_none() {
        return Err(Error::InvalidInput("run log has no records".into()));
    }
    Ok(FrameProfile {
        frame_ltd: log.frame_ltd.clone(),
        baseline,
        ltd,
        window,
    })
}

fn fmt_opt(v: Option<f64>) -> String {
    match v {
        Some(v) => format!("{v:.16e}"),
        None => "n/a".to_string(),
    }
}

/// Write `frame_profile.csv` and `summary.txt`.
pub fn write_frame_profile(profile: &FrameProfile, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let frames = profile.frame_ltd.len();
    let mut csv = String::from("frame_index,mean_ltd,baseline_loss,ltd_loss\n");
    for f in 0..frames {
        writeln!(
            csv,
            "{f},{:.16e},{},{}",
            profile.frame_ltd[f],
            fmt_opt(profile.baseline.as_ref().map(|v| v[f])),
            fmt_opt(profile.ltd.as_ref().map(|v| v[f])),
        )
        .expect("string write");
    }
    std::fs::write(dir.join("frame_profile.csv"), csv)?;

    let mut summary = String::new();
    writeln!(summary, "window = {}", profile.window).expect("string write");
    writeln!(
        summary,
        "peak_to_mean.mean_ltd = {}",
        fmt_opt(peak_to_mean(&profile.frame_ltd))
    )
    .expect("string write");
    writeln!(
        summary,
        "peak_to_mean.baseline = {}",
        fmt_opt(profile.baseline.as_deref().and_then(peak_to_mean))
    )
    .expect("string write");
    writeln!(
        summary,
        "peak_to_mean.ltd = {}",
        fmt_opt(profile.ltd.as_deref().and_then(peak_to_mean))
    )
    .expect("string write");
    writeln!(
        summary,
        "correlation.mean_ltd_vs_baseline_loss = {}",
        fmt_opt(profile.ltd_loss_correlation())
    )
    .expect("string write");
    std::fs::write(dir.join("summary.txt"), summary)?;
    Ok(())
}

/// Render ln(e + D) of a latent as per-frame PGM heatmaps.
pub fn report_heatmaps(latent: &LatentVideo, cfg: &LtdConfig, dir: &Path) -> Result<()> {
    let d = ltd_map(latent, cfg)?;
    let w = weight_map(&d)?;
    export_frame_heatmaps(w.tensor(), dir)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PeakReport {
    pub baseline_ratio: f64,
    pub ltd_ratio: f64,
    /// Positive when the LTD run is flatter across frames.
    pub reduction: f64,
}

/// Peak-to-mean ratios of the final-window per-frame losses of a paired
/// log. Requires both modes.
pub fn compare_peaks(log: &RunLog, window: usize) -> Result<PeakReport> {
    for mode in [LossMode::Baseline, LossMode::Ltd] {
        if !log.has_mode(mode) {
            return Err(Error::InvalidInput(format!(
                "peak comparison needs mode `{}` in the log",
                mode.name()
            )));
        }
    }
    let base = log.trailing_frame_profile(LossMode::Baseline, window)?;
    let ltd = log.trailing_frame_profile(LossMode::Ltd, window)?;
    let baseline_ratio = peak_to_mean(&base)
        .ok_or_else(|| Error::Numerical("baseline per-frame loss mean is 0".into()))?;
    let ltd_ratio = peak_to_mean(&ltd)
        .ok_or_else(|| Error::Numerical("ltd per-frame loss mean is 0".into()))?;
    Ok(PeakReport {
        baseline_ratio,
        ltd_ratio,
        reduction: baseline_ratio - ltd_ratio,
    })
}

#[derive(Debug, Clone, Copy)]
pub struct SeedPeaks {
    pub seed: u64,
    pub report: PeakReport,
}

/// Paired-seed experiment: rerun the config under each seed with both
/// loss modes sharing all draws, then compare final-window peak ratios.
/// Seeds run concurrently; outputs keep seed order.
pub fn paired_peak_experiment(
    cfg: &ExperimentConfig,
    seeds: &[u64],
    window: usize,
) -> Result<Vec<SeedPeaks>> {
    let runs = parallel::map_indexed(seeds.len(), |i| -> Result<SeedPeaks> {
        let mut cfg = cfg.clone();
        cfg.train.seed = seeds[i];
        let corpus = build_corpus(&cfg)?;
        let mut log = RunLog {
            frame_ltd: corpus.frame_ltd.clone(),
            ..RunLog::default()
        };
        for mode in [LossMode::Baseline, LossMode::Ltd] {
            let (records, _, _) = run_single(&cfg, &corpus, mode)?;
            log.records.extend(records);
        }
        Ok(SeedPeaks {
            seed: seeds[i],
            report: compare_peaks(&log, window)?,
        })
    });
    runs.into_iter().collect()
}

/// Per-seed breakdown CSV for the peak comparison.
pub fn write_peaks_csv(peaks: &[SeedPeaks], path: &Path) -> Result<()> {
    let mut out = String::from("seed,baseline_ratio,ltd_ratio,reduction\n");
    for p in peaks {
        writeln!(
            out,
            "{},{:.16e},{:.16e},{:.16e}",
            p.seed, p.report.baseline_ratio, p.report.ltd_ratio, p.report.reduction
        )
        .expect("string write");
    }
    std::fs::write(path, out)?;
    Ok(())
}
