//! Experiment configuration: a flat key-value text format with dotted
//! section keys, e.g. `ltd.tau = 3`. Unknown keys are errors, `#` starts
//! a comment, and the `LTD_SEED` environment variable overrides the
//! master seed.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::ltd::{ChannelNorm, LtdConfig};
use crate::synthetic::{EncoderConfig, SceneKind, SceneSpec};

pub const ENV_SEED: &str = "LTD_SEED";

const KNOWN_KEYS: &[&str] = &[
    "data.kind",
    "data.clips",
    "data.frames",
    "data.height",
    "data.width",
    "data.channels",
    "data.square_size",
    "data.vel_x",
    "data.vel_y",
    "data.flicker_amplitude",
    "data.flicker_period",
    "data.boundaries",
    "encoder.temporal_factor",
    "encoder.spatial_factor",
    "encoder.latent_channels",
    "ltd.tau",
    "ltd.norm",
    "schedule.steps",
    "schedule.beta_start",
    "schedule.beta_end",
    "arch.hidden_width",
    "arch.hidden_layers",
    "arch.time_embed_dim",
    "arch.cond_embed_dim",
    "sampler.steps",
    "sampler.guidance",
    "train.lr",
    "train.steps",
    "train.batch_size",
    "train.cond_dropout",
    "train.mode",
    "train.seed",
    "report.window",
    "out.dir",
];

/// Parse `key = value` lines into a map, rejecting duplicates and
/// malformed lines. Caller decides which keys are legal.
pub fn parse_kv(text: &str) -> Result<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = match raw.find('#') {
            Some(i) => &raw[..i],
            None => raw,
        }
        .trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            Error::InvalidConfig(format!("line {}: expected `key = value`", lineno + 1))
        })?;
        let key = key.trim().to_string();
        let value = value.trim().to_string();
        if key.is_empty() {
            return Err(Error::InvalidConfig(format!("line {}: empty key", lineno + 1)));
        }
        if map.insert(key.clone(), value).is_some() {
            return Err(Error::InvalidConfig(format!("duplicate key `{key}`")));
        }
    }
    Ok(map)
}

fn check_known(map: &BTreeMap<String, String>) -> Result<()> {
    for key in map.keys() {
        if !KNOWN_KEYS.contains(&key.as_str()) {
            return Err(Error::InvalidConfig(format!("unknown key `{key}`")));
        }
    }
    Ok(())
}

struct Getter<'a> {
    map: &'a BTreeMap<String, String>,
}

impl<'a> Getter<'a> {
    fn parse<T: std::str::FromStr>(&self, key: &str, default: T) -> Result<T> {
        match self.map.get(key) {
            None => Ok(default),
            Some(raw) => raw.parse().map_err(|_| {
                Error::InvalidConfig(format!("key `{key}`: cannot parse `{raw}`"))
            }),
        }
    }

    fn string(&self, key: &str, default: &str) -> String {
        self.map
            .get(key)
            .cloned()
            .unwrap_or_else(|| default.to_string())
    }

    fn usize_list(&self, key: &str, default: Vec<usize>) -> Result<Vec<usize>> {
        match self.map.get(key) {
            None => Ok(default),
            Some(raw) => raw
                .split(',')
                .map(|p| {
                    p.trim().parse().map_err(|_| {
                        Error::InvalidConfig(format!("key `{key}`: bad element `{p}`"))
                    })
                })
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataConfig {
    pub kind: String,
    pub clips: usize,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub square_size: usize,
    pub vel: (i64, i64),
    pub flicker_amplitude: f64,
    pub flicker_period: usize,
    pub boundaries: Vec<usize>,
}

impl DataConfig {
    pub fn scene_kind(&self) -> Result<SceneKind> {
        match self.kind.as_str() {
            "static" => Ok(SceneKind::Static),
            "moving_square" => Ok(SceneKind::MovingSquare {
                size: self.square_size,
                vel: self.vel,
            }),
            "flicker" => Ok(SceneKind::Flicker {
                amplitude: self.flicker_amplitude,
                period: self.flicker_period,
            }),
            "mixed_segments" => Ok(SceneKind::MixedSegments {
                boundaries: self.boundaries.clone(),
                size: self.square_size,
                vel: self.vel,
            }),
            other => Err(Error::InvalidConfig(format!("unknown data.kind `{other}`"))),
        }
    }

    pub fn scene_spec(&self, seed: u64) -> Result<SceneSpec> {
        Ok(SceneSpec {
            kind: self.scene_kind()?,
            frames: self.frames,
            height: self.height,
            width: self.width,
            channels: self.channels,
            seed,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ArchHyper {
    pub hidden_width: usize,
    pub hidden_layers: usize,
    pub time_embed_dim: usize,
    pub cond_embed_dim: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Baseline,
    Ltd,
    Both,
}

impl Mode {
    pub fn parse(s: &str) -> Result<Mode> {
        match s {
            "baseline" => Ok(Mode::Baseline),
            "ltd" => Ok(Mode::Ltd),
            "both" => Ok(Mode::Both),
            other => Err(Error::InvalidConfig(format!(
                "unknown mode `{other}` (expected baseline, ltd, or both)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub cond_dropout: f64,
    pub mode: Mode,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub data: DataConfig,
    pub encoder: EncoderConfig,
    pub ltd: LtdConfig,
    pub schedule: ScheduleConfig,
    pub arch: ArchHyper,
    pub sampler_steps: usize,
    pub guidance_scale: f64,
    pub train: TrainConfig,
    pub report_window: usize,
    pub out_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            data: DataConfig {
                kind: "mixed_segments".into(),
                clips: 8,
                frames: 16,
                height: 32,
                width: 32,
                channels: 1,
                square_size: 8,
                vel: (2, 1),
                flicker_amplitude: 0.25,
                flicker_period: 8,
                boundaries: vec![8],
            },
            encoder: EncoderConfig {
                temporal_factor: 2,
                spatial_factor: 4,
                latent_channels: 4,
            },
            ltd: LtdConfig::default(),
            schedule: ScheduleConfig {
                steps: 1000,
                beta_start: 1e-4,
                beta_end: 0.02,
            },
            arch: ArchHyper {
                hidden_width: 64,
                hidden_layers: 2,
                time_embed_dim: 16,
                cond_embed_dim: 8,
            },
            sampler_steps: 50,
            guidance_scale: 7.5,
            train: TrainConfig {
                lr: 2e-5,
                steps: 200,
                batch_size: 8,
                cond_dropout: 0.1,
                mode: Mode::Both,
                seed: 42,
            },
            report_window: 50,
            out_dir: PathBuf::from("runs"),
        }
    }
}

impl ExperimentConfig {
    pub fn from_entries(map: &BTreeMap<String, String>) -> Result<ExperimentConfig> {
        check_known(map)?;
        let g = Getter { map };
        let d = ExperimentConfig::default();
        let cfg = ExperimentConfig {
            data: DataConfig {
                kind: g.string("data.kind", &d.data.kind),
                clips: g.parse("data.clips", d.data.clips)?,
                frames: g.parse("data.frames", d.data.frames)?,
                height: g.parse("data.height", d.data.height)?,
                width: g.parse("data.width", d.data.width)?,
                channels: g.parse("data.channels", d.data.channels)?,
                square_size: g.parse("data.square_size", d.data.square_size)?,
                vel: (
                    g.parse("data.vel_x", d.data.vel.0)?,
                    g.parse("data.vel_y", d.data.vel.1)?,
                ),
                flicker_amplitude: g.parse("data.flicker_amplitude", d.data.flicker_amplitude)?,
                flicker_period: g.parse("data.flicker_period", d.data.flicker_period)?,
                boundaries: g.usize_list("data.boundaries", d.data.boundaries.clone())?,
            },
            encoder: EncoderConfig {
                temporal_factor: g.parse("encoder.temporal_factor", d.encoder.temporal_factor)?,
                spatial_factor: g.parse("encoder.spatial_factor", d.encoder.spatial_factor)?,
                latent_channels: g.parse("encoder.latent_channels", d.encoder.latent_channels)?,
            },
            ltd: LtdConfig {
                tau: g.parse("ltd.tau", d.ltd.tau)?,
                norm: ChannelNorm::parse(&g.string("ltd.norm", d.ltd.norm.name()))?,
            },
            schedule: ScheduleConfig {
                steps: g.parse("schedule.steps", d.schedule.steps)?,
                beta_start: g.parse("schedule.beta_start", d.schedule.beta_start)?,
                beta_end: g.parse("schedule.beta_end", d.schedule.beta_end)?,
            },
            arch: ArchHyper {
                hidden_width: g.parse("arch.hidden_width", d.arch.hidden_width)?,
                hidden_layers: g.parse("arch.hidden_layers", d.arch.hidden_layers)?,
                time_embed_dim: g.parse("arch.time_embed_dim", d.arch.time_embed_dim)?,
                cond_embed_dim: g.parse("arch.cond_embed_dim", d.arch.cond_embed_dim)?,
            },
            sampler_steps: g.parse("sampler.steps", d.sampler_steps)?,
            guidance_scale: g.parse("sampler.guidance", d.guidance_scale)?,
            train: TrainConfig {
                lr: g.parse("train.lr", d.train.lr)?,
                steps: g.parse("train.steps", d.train.steps)?,
                batch_size: g.parse("train.batch_size", d.train.batch_size)?,
                cond_dropout: g.parse("train.cond_dropout", d.train.cond_dropout)?,
                mode: Mode::parse(&g.string("train.mode", "both"))?,
                seed: g.parse("train.seed", d.train.seed)?,
            },
            report_window: g.parse("report.window", d.report_window)?,
            out_dir: PathBuf::from(g.string("out.dir", d.out_dir.to_str().unwrap())),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_str_with_env(text: &str) -> Result<ExperimentConfig> {
        let mut cfg = ExperimentConfig::from_entries(&parse_kv(text)?)?;
        if let Ok(raw) = std::env::var(ENV_SEED) {
            cfg.train.seed = raw.parse().map_err(|_| {
                Error::InvalidConfig(format!("{ENV_SEED}: cannot parse `{raw}` as u64"))
            })?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<ExperimentConfig> {
        let text = std::fs::read_to_string(path)?;
        Self::from_str_with_env(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if self.data.clips == 0 {
            return Err(Error::InvalidConfig("data.clips must be >= 1".into()));
        }
        if self.train.steps == 0 {
            return Err(Error::InvalidConfig("train.steps must be >= 1".into()));
        }
        if self.train.batch_size == 0 {
            return Err(Error::InvalidConfig("train.batch_size must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.train.cond_dropout) {
            return Err(Error::InvalidConfig(
                "train.cond_dropout must lie in [0, 1]".into(),
            ));
        }
        if self.report_window == 0 {
            return Err(Error::InvalidConfig("report.window must be >= 1".into()));
        }
        // Scene and schedule invariants surface when those objects are
        // built; this catches them at config time for exit-code purposes.
        self.data.scene_spec(0)?;
        Ok(())
    }

    pub fn latent_dims(&self) -> [usize; 4] {
        self.encoder.latent_dims(&[
            self.data.frames,
            self.data.height,
            self.data.width,
            self.data.channels,
        ])
    }
}
