//! Synthetic video corpora and the deterministic pseudo-encoder.
//!
//! Four scene families cover the motion regimes the discrepancy prior
//! must distinguish: fully static content, displacement motion (a square
//! translating at integer pixels per frame), non-displacement dynamics
//! (spatially uniform sinusoidal flicker), and mixed clips whose frames
//! alternate between frozen and fast-motion segments.
//!
//! The pseudo-encoder stands in for a frozen VAE: block-average pooling
//! for the first channels, plus fixed finite-difference mixtures for the
//! extra latent channels, all linear and deterministic.

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{LatentVideo, PixelVideo, Tensor};

/// Scene classes double as conditioning labels, in this order.
pub const NUM_CLASSES: usize = 4;

pub const BACKGROUND: f64 = 0.1;
pub const FOREGROUND: f64 = 1.0;

#[derive(Debug, Clone, PartialEq)]
pub enum SceneKind {
    /// One seeded frame repeated.
    Static,
    /// A bright square translating at integer pixels per frame.
    MovingSquare { size: usize, vel: (i64, i64) },
    /// Spatially uniform sinusoidal brightness modulation.
    Flicker { amplitude: f64, period: usize },
    /// Frozen and fast-motion segments concatenated; `boundaries` split
    /// the frame range, segments alternating static, motion, static, ...
    MixedSegments {
        boundaries: Vec<usize>,
        size: usize,
        vel: (i64, i64),
    },
}

impl SceneKind {
    /// Conditioning label: the enum discriminant.
    pub fn class_label(&self) -> usize {
        match self {
            SceneKind::Static => 0,
            SceneKind::MovingSquare { .. } => 1,
            SceneKind::Flicker { .. } => 2,
            SceneKind::MixedSegments { .. } => 3,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            SceneKind::Static => "static",
            SceneKind::MovingSquare { .. } => "moving_square",
            SceneKind::Flicker { .. } => "flicker",
            SceneKind::MixedSegments { .. } => "mixed_segments",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub kind: SceneKind,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub seed: u64,
}

impl SceneSpec {
    fn validate(&self) -> Result<()> {
        if self.frames == 0 {
            return Err(invalid("frames", "must be >= 1"));
        }
        if self.height == 0 || self.width == 0 {
            return Err(invalid("height/width", "must be positive"));
        }
        if self.channels != 1 && self.channels != 3 {
            return Err(invalid("channels", "must be 1 or 3"));
        }
        match &self.kind {
            SceneKind::Static => {}
            SceneKind::MovingSquare { size, .. } => {
                if *size == 0 || *size > self.height || *size > self.width {
                    return Err(invalid("size", "square must fit inside the frame"));
                }
            }
            SceneKind::Flicker { amplitude, period } => {
                if !(0.0..=0.5).contains(amplitude) {
                    return Err(invalid("amplitude", "must lie in [0, 0.5]"));
                }
                if *period == 0 {
                    return Err(invalid("period", "must be >= 1"));
                }
            }
            SceneKind::MixedSegments {
                boundaries, size, ..
            } => {
                if *size == 0 || *size > self.height || *size > self.width {
                    return Err(invalid("size", "square must fit inside the frame"));
                }
                if boundaries.is_empty() {
                    return Err(invalid("boundaries", "need at least one boundary"));
                }
                for pair in boundaries.windows(2) {
                    if pair[0] >= pair[1] {
                        return Err(invalid("boundaries", "must be strictly increasing"));
                    }
                }
                if *boundaries.last().unwrap() >= self.frames {
                    return Err(invalid("boundaries", "must lie within [0, frames)"));
                }
            }
        }
        Ok(())
    }
}

fn invalid(field: &'static str, reason: &str) -> Error {
    Error::InvalidSpec {
        field,
        reason: reason.to_string(),
    }
}

/// Segment index of pixel frame `f` given the boundary list.
fn segment_index(boundaries: &[usize], f: usize) -> usize {
    boundaries.iter().take_while(|&&b| b <= f).count()
}

/// True when frame `f` belongs to a motion segment (odd segments move).
pub fn frame_in_motion_segment(boundaries: &[usize], f: usize) -> bool {
    segment_index(boundaries, f) % 2 == 1
}

/// Per-frame top-left square positions for a clip, clamped to the frame.
///
/// The start is drawn from the region where the whole trajectory avoids
/// clamping when such a region exists, so the motion equation stays
/// exactly linear in the common configurations.
pub fn square_trajectory(
    frames: usize,
    height: usize,
    width: usize,
    size: usize,
    vel: (i64, i64),
    motion_mask: &[bool],
    rng: &mut Rng,
) -> Vec<(usize, usize)> {
    let steps = motion_mask.iter().skip(1).filter(|&&m| m).count() as i64;
    let pick = |extent: usize, v: i64, rng: &mut Rng| -> i64 {
        let max_pos = (extent - size) as i64;
        let travel = v * steps;
        let lo = 0.max(-travel);
        let hi = max_pos - 0.max(travel);
        if lo <= hi {
            lo + rng.next_index((hi - lo + 1) as usize) as i64
        } else if v >= 0 {
            0
        } else {
            max_pos
        }
    };
    let mut x = pick(width, vel.0, rng);
    let mut y = pick(height, vel.1, rng);
    let clamp = |p: i64, extent: usize| -> i64 { p.max(0).min((extent - size) as i64) };
    let mut out = Vec::with_capacity(frames);
    out.push((x as usize, y as usize));
    for &moving in &motion_mask[1..frames] {
        if moving {
            x = clamp(x + vel.0, width);
            y = clamp(y + vel.1, height);
        }
        out.push((x as usize, y as usize));
    }
    out
}

/// A seeded arrangement of rectangles over a flat background; values kept
/// inside [lo, hi].
fn rectangle_pattern(
    height: usize,
    width: usize,
    channels: usize,
    lo: f64,
    hi: f64,
    rng: &mut Rng,
) -> Vec<f64> {
    let bg = lo + 0.5 * (hi - lo);
    let mut frame = vec![bg; height * width * channels];
    for _ in 0..3 {
        let y0 = rng.next_index(height);
        let x0 = rng.next_index(width);
        let rh = 1 + rng.next_index(height - y0);
        let rw = 1 + rng.next_index(width - x0);
        let vals: Vec<f64> = (0..channels)
            .map(|_| lo + rng.next_f64() * (hi - lo))
            .collect();
        for y in y0..y0 + rh {
            for x in x0..x0 + rw {
                for (c, &v) in vals.iter().enumerate() {
                    frame[(y * width + x) * channels + c] = v;
                }
            }
        }
    }
    frame
}

fn paint_square(
    frame: &mut [f64],
    width: usize,
    channels: usize,
    pos: (usize, usize),
    size: usize,
) {
    let (x, y) = pos;
    for yy in y..y + size {
        for xx in x..x + size {
            for c in 0..channels {
                frame[(yy * width + xx) * channels + c] = FOREGROUND;
            }
        }
    }
}

/// Render a labeled clip. Deterministic in `spec.seed`.
pub fn generate(spec: &SceneSpec) -> Result<(PixelVideo, usize)> {
    spec.validate()?;
    let (f_n, h, w, c) = (spec.frames, spec.height, spec.width, spec.channels);
    let frame_len = h * w * c;
    let rng = Rng::new(spec.seed);
    let mut data = Vec::with_capacity(f_n * frame_len);

    match &spec.kind {
        SceneKind::Static => {
            let frame = rectangle_pattern(h, w, c, 0.1, 0.9, &mut rng.stream(0));
            for _ in 0..f_n {
                data.extend_from_slice(&frame);
            }
        }
        SceneKind::MovingSquare { size, vel } => {
            let mask = vec![true; f_n];
            let traj = square_trajectory(f_n, h, w, *size, *vel, &mask, &mut rng.stream(0));
            for pos in traj {
                let mut frame = vec![BACKGROUND; frame_len];
                paint_square(&mut frame, w, c, pos, *size);
                data.extend_from_slice(&frame);
            }
        }
        SceneKind::Flicker { amplitude, period } => {
            let base = rectangle_pattern(h, w, c, *amplitude, 1.0 - amplitude, &mut rng.stream(0));
            for f in 0..f_n {
                let off =
                    amplitude * (2.0 * std::f64::consts::PI * f as f64 / *period as f64).sin();
                data.extend(base.iter().map(|v| v + off));
            }
        }
        SceneKind::MixedSegments {
            boundaries,
            size,
            vel,
        } => {
            let mask: Vec<bool> = (0..f_n)
                .map(|f| frame_in_motion_segment(boundaries, f))
                .collect();
            let traj = square_trajectory(f_n, h, w, *size, *vel, &mask, &mut rng.stream(0));
            for pos in traj {
                let mut frame = vec![BACKGROUND; frame_len];
                paint_square(&mut frame, w, c, pos, *size);
                data.extend_from_slice(&frame);
            }
        }
    }

    let video = PixelVideo::new(Tensor::from_vec(vec![f_n, h, w, c], data)?)?;
    Ok((video, spec.kind.class_label()))
}

/// Downsampling factors and latent width of the pseudo-encoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EncoderConfig {
    pub temporal_factor: usize,
    pub spatial_factor: usize,
    pub latent_channels: usize,
}

impl EncoderConfig {
    fn validate(&self, video_dims: &[usize]) -> Result<()> {
        let (f_n, h, w, c) = (video_dims[0], video_dims[1], video_dims[2], video_dims[3]);
        if self.temporal_factor == 0 || f_n % self.temporal_factor != 0 {
            return Err(Error::InvalidConfig(format!(
                "temporal_factor {} must divide frame count {f_n}",
                self.temporal_factor
            )));
        }
        if self.spatial_factor == 0
            || h % self.spatial_factor != 0
            || w % self.spatial_factor != 0
        {
            return Err(Error::InvalidConfig(format!(
                "spatial_factor {} must divide height {h} and width {w}",
                self.spatial_factor
            )));
        }
        if self.latent_channels < c {
            return Err(Error::InvalidConfig(format!(
                "latent_channels {} must be >= pixel channels {c}",
                self.latent_channels
            )));
        }
        Ok(())
    }

    pub fn latent_dims(&self, video_dims: &[usize]) -> [usize; 4] {
        [
            video_dims[0] / self.temporal_factor,
            video_dims[1] / self.spatial_factor,
            video_dims[2] / self.spatial_factor,
            self.latent_channels,
        ]
    }
}

/// Block-average pooling plus finite-difference channel mixtures.
///
/// Channels `0..C` hold the pooled pixel channels. Each extra channel
/// `j >= C` applies one of three difference filters (temporal, then
/// horizontal, then vertical, cycling) to pooled channel `(j - C) % C`,
/// with zeros at the trailing edge.
pub fn pseudo_encode(x: &PixelVideo, cfg: &EncoderConfig) -> Result<LatentVideo> {
    cfg.validate(x.tensor().dims())?;
    let (ft, fs) = (cfg.temporal_factor, cfg.spatial_factor);
    let [fl, hl, wl, cl] = cfg.latent_dims(x.tensor().dims());
    let c = x.channels();
    let block = (ft * fs * fs) as f64;

    // Pooled pixel channels, row-major (fl, hl, wl, c).
    let mut pooled = vec![0.0; fl * hl * wl * c];
    for f in 0..fl {
        for h in 0..hl {
            for w in 0..wl {
                for ch in 0..c {
                    let mut acc = 0.0;
                    for df in 0..ft {
                        for dh in 0..fs {
                            for dw in 0..fs {
                                acc += x.at(f * ft + df, h * fs + dh, w * fs + dw, ch);
                            }
                        }
                    }
                    pooled[((f * hl + h) * wl + w) * c + ch] = acc / block;
                }
            }
        }
    }

    let p = |f: usize, h: usize, w: usize, ch: usize| pooled[((f * hl + h) * wl + w) * c + ch];
    let mut data = vec![0.0; fl * hl * wl * cl];
    for f in 0..fl {
        for h in 0..hl {
            for w in 0..wl {
                for j in 0..cl {
                    let v = if j < c {
                        p(f, h, w, j)
                    } else {
                        let src = (j - c) % c;
                        match (j - c) / c % 3 {
                            0 => {
                                if f + 1 < fl {
                                    p(f + 1, h, w, src) - p(f, h, w, src)
                                } else {
                                    0.0
                                }
                            }
                            1 => {
                                if w + 1 < wl {
                                    p(f, h, w + 1, src) - p(f, h, w, src)
                                } else {
                                    0.0
                                }
                            }
                            _ => {
                                if h + 1 < hl {
                                    p(f, h + 1, w, src) - p(f, h, w, src)
                                } else {
                                    0.0
                                }
                            }
                        }
                    };
                    data[((f * hl + h) * wl + w) * cl + j] = v;
                }
            }
        }
    }
    LatentVideo::new(Tensor::from_vec(vec![fl, hl, wl, cl], data)?)
}

/// Nearest-neighbor upsampling of the first `channels` latent channels,
/// clamped into [0, 1].
pub fn pseudo_decode(
    z: &LatentVideo,
    cfg: &EncoderConfig,
    channels: usize,
) -> Result<PixelVideo> {
    if channels == 0 || channels > z.channels() {
        return Err(Error::InvalidShape(format!(
            "cannot decode {channels} channels from a {}-channel latent",
            z.channels()
        )));
    }
    if channels != 1 && channels != 3 {
        return Err(Error::InvalidShape(format!(
            "pixel channels must be 1 or 3, got {channels}"
        )));
    }
    let (ft, fs) = (cfg.temporal_factor, cfg.spatial_factor);
    if ft == 0 || fs == 0 {
        return Err(Error::InvalidConfig("encoder factors must be positive".into()));
    }
    let (f_n, h, w) = (z.frames() * ft, z.height() * fs, z.width() * fs);
    let mut data = Vec::with_capacity(f_n * h * w * channels);
    for f in 0..f_n {
        for y in 0..h {
            for x in 0..w {
                for ch in 0..channels {
                    let v = z.at(f / ft, y / fs, x / fs, ch);
                    data.push(v.clamp(0.0, 1.0));
                }
            }
        }
    }
    PixelVideo::new(Tensor::from_vec(vec![f_n, h, w, channels], data)?)
}
