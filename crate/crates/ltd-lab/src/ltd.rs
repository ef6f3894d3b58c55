//! Latent temporal discrepancy: the per-voxel motion prior and the loss
//! weight map derived from it.
//!
//! For a latent video z and a sliding window of size tau, the dynamic
//! intensity at 1-based frame f is
//!
//! ```text
//! D_f = 1/(R_f - L_f) * sum_{i=L_f}^{R_f - 1} ||z(i+1) - z(i)||
//! L_f = max(1, f - floor(tau/2)),  R_f = min(F_l, f + floor(tau/2))
//! ```
//!
//! with the norm taken over channels only, so D keeps the per-voxel
//! shape (F_l, H_l, W_l). Degenerate windows (R_f == L_f, i.e. a single
//! latent frame or tau == 1) define D = 0. The loss weight is ln(e + D),
//! exactly 1 where nothing moves.
//!
//! D is always computed on the clean latent, never on a noised one, and
//! is constant with respect to both timestep and model parameters.
//!
//! Frame indices are 1-based in the formulas above and 0-based in
//! storage; [`window_bounds`] is the single place that speaks 1-based.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::parallel;
use crate::pgm;
use crate::tensor::{LatentVideo, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ChannelNorm {
    /// sqrt of the sum of squared channel differences.
    L2,
    /// Sum of absolute channel differences.
    L1,
}

impl ChannelNorm {
    pub fn parse(s: &str) -> Result<ChannelNorm> {
        match s {
            "l2" => Ok(ChannelNorm::L2),
            "l1" => Ok(ChannelNorm::L1),
            other => Err(Error::InvalidConfig(format!(
                "unknown norm `{other}` (expected l1 or l2)"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            ChannelNorm::L2 => "l2",
            ChannelNorm::L1 => "l1",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LtdConfig {
    pub tau: usize,
    pub norm: ChannelNorm,
}

impl Default for LtdConfig {
    fn default() -> Self {
        LtdConfig {
            tau: 3,
            norm: ChannelNorm::L2,
        }
    }
}

impl LtdConfig {
    fn validate(&self) -> Result<()> {
        if self.tau == 0 {
            return Err(Error::InvalidConfig("ltd window tau must be >= 1".into()));
        }
        Ok(())
    }
}

/// Non-negative per-voxel dynamic intensity, dims (F_l, H_l, W_l).
#[derive(Debug, Clone, PartialEq)]
pub struct DiscrepancyTensor {
    tensor: Tensor,
}

impl DiscrepancyTensor {
    pub fn new(tensor: Tensor) -> Result<DiscrepancyTensor> {
        if tensor.rank() != 3 {
            return Err(Error::InvalidShape(format!(
                "discrepancy tensor must be rank 3, got {:?}",
                tensor.dims()
            )));
        }
        if let Some(bad) = tensor.data().iter().find(|&&v| v < 0.0) {
            return Err(Error::InvalidInput(format!(
                "discrepancy element {bad} is negative"
            )));
        }
        Ok(DiscrepancyTensor { tensor })
    }

    pub fn tensor(&self) -> &Tensor {
        &self.tensor
    }

    pub fn frames(&self) -> usize {
        self.tensor.dims()[0]
    }

    /// Mean intensity per latent frame.
    pub fn frame_means(&self) -> Vec<f64> {
        let (f_n, spatial) = (self.frames(), self.tensor.len() / self.frames());
        (0..f_n)
            .map(|f| {
                let mut acc = 0.0;
                for v in &self.tensor.data()[f * spatial..(f + 1) * spatial] {
                    acc += v;
                }
                acc / spatial as f64
            })
            .collect()
    }
}

/// Dimensionless loss weights ln(e + D), every element >= 1.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightTensor {
    tensor: Tensor,
}

impl WeightTensor {
    pub fn tensor(&self) -> &Tensor {
        &self.tensor
    }
}

/// Inclusive 1-based window bounds (L_f, R_f) around frame `f`.
pub fn window_bounds(f: usize, frames: usize, tau: usize) -> (usize, usize) {
    debug_assert!(f >= 1 && f <= frames && tau >= 1);
    let half = tau / 2;
    let lo = f.saturating_sub(half).max(1);
    let hi = (f + half).min(frames);
    (lo, hi)
}

fn pair_norm_l2(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = 0.0;
    for c in 0..a.len() {
        let d = b[c] - a[c];
        acc += d * d;
    }
    acc.sqrt()
}

fn pair_norm_l1(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = 0.0;
    for c in 0..a.len() {
        acc += (b[c] - a[c]).abs();
    }
    acc
}

/// Dynamic intensity map of a clean latent video.
///
/// Consecutive-frame pair norms are computed once and shared across the
/// windows that reuse them; every voxel's window sum runs in ascending
/// frame order, so the result is bit-identical to the brute-force
/// transcription.
pub fn ltd_map(z: &LatentVideo, cfg: &LtdConfig) -> Result<DiscrepancyTensor> {
    cfg.validate()?;
    let (f_n, h_n, w_n) = (z.frames(), z.height(), z.width());
    let spatial = h_n * w_n;

    if f_n == 1 {
        return DiscrepancyTensor::new(Tensor::zeros(vec![f_n, h_n, w_n])?);
    }

    // Pair norms: entry (i, h, w) holds ||z(i+1) - z(i)|| at that site,
    // 0-based i in 0..f_n-1.
    let norm = cfg.norm;
    let pair = parallel::map_indexed((f_n - 1) * spatial, |idx| {
        let (i, s) = (idx / spatial, idx % spatial);
        let (h, w) = (s / w_n, s % w_n);
        let a = z.voxel(i, h, w);
        let b = z.voxel(i + 1, h, w);
        match norm {
            ChannelNorm::L2 => pair_norm_l2(a, b),
            ChannelNorm::L1 => pair_norm_l1(a, b),
        }
    });

    let tau = cfg.tau;
    let data = parallel::map_indexed(f_n * spatial, |idx| {
        let (f0, s) = (idx / spatial, idx % spatial);
        let (lo, hi) = window_bounds(f0 + 1, f_n, tau);
        if hi == lo {
            return 0.0;
        }
        let mut acc = 0.0;
        for i in lo..hi {
            // pair index is 0-based: 1-based pair i covers frames (i, i+1).
            acc += pair[(i - 1) * spatial + s];
        }
        acc / (hi - lo) as f64
    });

    DiscrepancyTensor::new(Tensor::from_vec(vec![f_n, h_n, w_n], data)?)
}

/// Literal nested-loop transcription of the dynamic intensity formula.
///
/// Recomputes every frame difference in place, shares nothing, and runs
/// sequentially. Serves as the reference the fast path is checked
/// against.
pub fn ltd_map_bruteforce(z: &LatentVideo, cfg: &LtdConfig) -> Result<DiscrepancyTensor> {
    cfg.validate()?;
    let (f_n, h_n, w_n, c_n) = (z.frames(), z.height(), z.width(), z.channels());
    let half = cfg.tau / 2;
    let mut out = Vec::with_capacity(f_n * h_n * w_n);

    for f in 1..=f_n {
        let lo = f.saturating_sub(half).max(1);
        let hi = (f + half).min(f_n);
        for h in 0..h_n {
            for w in 0..w_n {
                let value = if hi == lo {
                    0.0
                } else {
                    let mut acc = 0.0;
                    for i in lo..hi {
                        let mut nrm = 0.0;
                        for c in 0..c_n {
                            let d = z.at(i, h, w, c) - z.at(i - 1, h, w, c);
                            match cfg.norm {
                                ChannelNorm::L2 => nrm += d * d,
                                ChannelNorm::L1 => nrm += d.abs(),
                            }
                        }
                        if cfg.norm == ChannelNorm::L2 {
                            nrm = nrm.sqrt();
                        }
                        acc += nrm;
                    }
                    acc / (hi - lo) as f64
                };
                out.push(value);
            }
        }
    }
    DiscrepancyTensor::new(Tensor::from_vec(vec![f_n, h_n, w_n], out)?)
}

/// Loss weight map ln(e + D).
pub fn weight_map(d: &DiscrepancyTensor) -> Result<WeightTensor> {
    if let Some(bad) = d.tensor().data().iter().find(|&&v| v < 0.0) {
        return Err(Error::InvalidInput(format!(
            "weight_map input element {bad} is negative"
        )));
    }
    let data: Vec<f64> = d
        .tensor()
        .data()
        .iter()
        .map(|&v| (std::f64::consts::E + v).ln())
        .collect();
    Ok(WeightTensor {
        tensor: Tensor::from_vec(d.tensor().dims().to_vec(), data)?,
    })
}

/// Replicate a per-voxel weight map across `channels`.
pub fn broadcast_weight(w: &WeightTensor, channels: usize) -> Result<Tensor> {
    if channels == 0 {
        return Err(Error::InvalidShape("channel count must be >= 1".into()));
    }
    let dims = w.tensor().dims();
    let mut data = Vec::with_capacity(w.tensor().len() * channels);
    for &v in w.tensor().data() {
        for _ in 0..channels {
            data.push(v);
        }
    }
    Tensor::from_vec(vec![dims[0], dims[1], dims[2], channels], data)
}

/// Export a rank-3 map as one 8-bit PGM per frame, each frame min-max
/// normalized independently, plus a `scale.tsv` sidecar recording the
/// per-frame (min, max) so values stay recoverable. A frame with
/// min == max maps to all zeros.
pub fn export_frame_heatmaps(map: &Tensor, dir: &Path) -> Result<()> {
    if map.rank() != 3 {
        return Err(Error::InvalidShape(format!(
            "heatmap export needs rank 3, got {:?}",
            map.dims()
        )));
    }
    std::fs::create_dir_all(dir)?;
    let (f_n, h_n, w_n) = (map.dims()[0], map.dims()[1], map.dims()[2]);
    let spatial = h_n * w_n;
    let mut sidecar = String::from("frame\tmin\tmax\n");
    for f in 0..f_n {
        let frame = &map.data()[f * spatial..(f + 1) * spatial];
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for &v in frame {
            lo = lo.min(v);
            hi = hi.max(v);
        }
        let pixels: Vec<u8> = frame
            .iter()
            .map(|&v| {
                if hi > lo {
                    ((v - lo) / (hi - lo) * 255.0).round().clamp(0.0, 255.0) as u8
                } else {
                    0
                }
            })
            .collect();
        pgm::write_pgm(&dir.join(format!("frame_{f:03}.pgm")), w_n, h_n, &pixels)?;
        writeln!(sidecar, "{f}\t{lo:.16e}\t{hi:.16e}").expect("string write");
    }
    std::fs::write(dir.join("scale.tsv"), sidecar)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{sample_gaussian, Rng};

    fn latent(dims: [usize; 4], data: Vec<f64>) -> LatentVideo {
        LatentVideo::new(Tensor::from_vec(dims.to_vec(), data).unwrap()).unwrap()
    }

    fn single_voxel(frames: &[f64]) -> LatentVideo {
        latent([frames.len(), 1, 1, 1], frames.to_vec())
    }

    fn cfg(tau: usize, norm: ChannelNorm) -> LtdConfig {
        LtdConfig { tau, norm }
    }

    #[test]
    fn window_bounds_paper_cases() {
        assert_eq!(window_bounds(1, 8, 3), (1, 2));
        assert_eq!(window_bounds(4, 8, 3), (3, 5));
        assert_eq!(window_bounds(1, 1, 3), (1, 1));
        assert_eq!(window_bounds(8, 8, 3), (7, 8));
    }

    #[test]
    fn identical_frames_give_zero() {
        let z = latent([4, 2, 2, 3], vec![0.7; 4 * 2 * 2 * 3]);
        let d = ltd_map(&z, &LtdConfig::default()).unwrap();
        assert!(d.tensor().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn two_frame_single_pair() {
        let d = ltd_map(&single_voxel(&[0.0, 3.0]), &LtdConfig::default()).unwrap();
        assert_eq!(d.tensor().data(), &[3.0, 3.0]);
    }

    #[test]
    fn three_frame_fixture() {
        // Brute-force evaluation of the window formula on z = (0, 1, 4):
        // f=1 -> |1-0| = 1; f=2 -> (|1-0| + |4-1|)/2 = 2; f=3 -> |4-1| = 3.
        let d = ltd_map(&single_voxel(&[0.0, 1.0, 4.0]), &LtdConfig::default()).unwrap();
        let expect = [1.0, 2.0, 3.0];
        for (got, want) in d.tensor().data().iter().zip(expect) {
            assert!((got - want).abs() < 1e-12, "{got} vs {want}");
        }
        let bf = ltd_map_bruteforce(&single_voxel(&[0.0, 1.0, 4.0]), &LtdConfig::default())
            .unwrap();
        assert!(bf.tensor().bit_eq(d.tensor()));
    }

    #[test]
    fn bruteforce_agrees_bitwise_on_random_latents() {
        let root = Rng::new(99);
        for trial in 0..100 {
            let t = sample_gaussian(&mut root.stream(trial), &[5, 4, 4, 3]).unwrap();
            let z = LatentVideo::new(t).unwrap();
            for tau in [1, 2, 3, 5] {
                for norm in [ChannelNorm::L2, ChannelNorm::L1] {
                    let fast = ltd_map(&z, &cfg(tau, norm)).unwrap();
                    let brute = ltd_map_bruteforce(&z, &cfg(tau, norm)).unwrap();
                    assert!(
                        fast.tensor().bit_eq(brute.tensor()),
                        "mismatch at trial {trial} tau {tau} {norm:?}"
                    );
                }
            }
        }
    }

    #[test]
    fn tau_one_collapses_to_zero() {
        let z = single_voxel(&[0.0, 1.0, 4.0, 2.0]);
        let d = ltd_map(&z, &cfg(1, ChannelNorm::L2)).unwrap();
        assert!(d.tensor().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn weight_map_fixtures() {
        let e = std::f64::consts::E;
        let d = DiscrepancyTensor::new(
            Tensor::from_vec(vec![3, 1, 1], vec![0.0, e * e - e, 10.0]).unwrap(),
        )
        .unwrap();
        let w = weight_map(&d).unwrap();
        let got = w.tensor().data();
        assert_eq!(got[0], 1.0);
        assert!((got[1] - 2.0).abs() < 1e-12);
        assert!((got[2] - (e + 10.0).ln()).abs() < 1e-15);
    }

    #[test]
    fn negative_discrepancy_rejected() {
        let t = Tensor::from_vec(vec![1, 1, 1], vec![-0.5]).unwrap();
        assert!(matches!(
            DiscrepancyTensor::new(t),
            Err(Error::InvalidInput(_))
        ));
    }

    #[test]
    fn broadcast_copies_each_channel() {
        let d = ltd_map(&single_voxel(&[0.0, 1.0, 4.0]), &LtdConfig::default()).unwrap();
        let w = weight_map(&d).unwrap();
        let b = broadcast_weight(&w, 2).unwrap();
        assert_eq!(b.dims(), &[3, 1, 1, 2]);
        for f in 0..3 {
            let base = w.tensor().data()[f];
            assert_eq!(b.at4(f, 0, 0, 0), base);
            assert_eq!(b.at4(f, 0, 0, 1), base);
        }
    }

    #[test]
    fn positive_homogeneity() {
        let t = sample_gaussian(&mut Rng::new(3), &[5, 3, 3, 2]).unwrap();
        let z = LatentVideo::new(t).unwrap();
        for norm in [ChannelNorm::L2, ChannelNorm::L1] {
            let base = ltd_map(&z, &cfg(3, norm)).unwrap();
            for k in [0.5, 2.0, 10.0] {
                let zk = LatentVideo::new(z.tensor().scale(k).unwrap()).unwrap();
                let dk = ltd_map(&zk, &cfg(3, norm)).unwrap();
                for (a, b) in dk.tensor().data().iter().zip(base.tensor().data()) {
                    let want = k * b;
                    assert!((a - want).abs() <= 1e-9 * want.abs().max(1e-300));
                }
            }
        }
    }

    #[test]
    fn translation_invariance_exact() {
        // Values on a dyadic grid keep the translation itself exact, so
        // the differences (and hence D) are bit-identical.
        let raw = sample_gaussian(&mut Rng::new(4), &[4, 3, 3, 2]).unwrap();
        let snapped: Vec<f64> = raw
            .data()
            .iter()
            .map(|v| (v * 1024.0).round() / 1024.0)
            .collect();
        let t = Tensor::from_vec(raw.dims().to_vec(), snapped).unwrap();
        let z = LatentVideo::new(t.clone()).unwrap();
        let shifted = LatentVideo::new(
            Tensor::from_vec(
                t.dims().to_vec(),
                t.data().iter().map(|v| v + 17.25).collect(),
            )
            .unwrap(),
        )
        .unwrap();
        let a = ltd_map(&z, &LtdConfig::default()).unwrap();
        let b = ltd_map(&shifted, &LtdConfig::default()).unwrap();
        assert!(a.tensor().bit_eq(b.tensor()));
    }

    #[test]
    fn locality_in_space() {
        let t = sample_gaussian(&mut Rng::new(5), &[4, 3, 3, 2]).unwrap();
        let mut bumped = t.data().to_vec();
        // Perturb all frames/channels at site (1, 2).
        let (h, w) = (1, 2);
        for f in 0..4 {
            for c in 0..2 {
                bumped[((f * 3 + h) * 3 + w) * 2 + c] += 0.9;
            }
        }
        let a = ltd_map(
            &LatentVideo::new(t.clone()).unwrap(),
            &LtdConfig::default(),
        )
        .unwrap();
        let b = ltd_map(
            &LatentVideo::new(Tensor::from_vec(t.dims().to_vec(), bumped).unwrap()).unwrap(),
            &LtdConfig::default(),
        )
        .unwrap();
        for f in 0..4 {
            for hh in 0..3 {
                for ww in 0..3 {
                    let i = (f * 3 + hh) * 3 + ww;
                    if (hh, ww) != (h, w) {
                        assert_eq!(a.tensor().data()[i], b.tensor().data()[i]);
                    }
                }
            }
        }
    }

    #[test]
    fn window_support_bound() {
        let tau = 3usize;
        let f_n = 9usize;
        let t = sample_gaussian(&mut Rng::new(6), &[f_n, 2, 2, 1]).unwrap();
        let g = 4usize; // 0-based frame to perturb
        let mut bumped = t.data().to_vec();
        for s in 0..4 {
            bumped[g * 4 + s] += 2.0;
        }
        let a = ltd_map(
            &LatentVideo::new(t.clone()).unwrap(),
            &cfg(tau, ChannelNorm::L2),
        )
        .unwrap();
        let b = ltd_map(
            &LatentVideo::new(Tensor::from_vec(t.dims().to_vec(), bumped).unwrap()).unwrap(),
            &cfg(tau, ChannelNorm::L2),
        )
        .unwrap();
        let reach = tau / 2 + 1;
        for f0 in 0..f_n {
            let changed = (0..4).any(|s| a.tensor().data()[f0 * 4 + s] != b.tensor().data()[f0 * 4 + s]);
            if changed {
                assert!(
                    f0.abs_diff(g) <= reach,
                    "frame {f0} changed, outside reach {reach} of {g}"
                );
            }
        }
    }

    #[test]
    fn weight_floor_iff_zero_discrepancy() {
        let d = ltd_map(&single_voxel(&[0.5, 0.5, 1.5]), &LtdConfig::default()).unwrap();
        let w = weight_map(&d).unwrap();
        let min = w
            .tensor()
            .data()
            .iter()
            .cloned()
            .fold(f64::INFINITY, f64::min);
        // f=1's window only sees the equal pair, so D hits 0 there.
        assert_eq!(d.tensor().data()[0], 0.0);
        assert_eq!(min, 1.0);

        let d2 = ltd_map(&single_voxel(&[0.0, 1.0, 2.0]), &LtdConfig::default()).unwrap();
        assert!(d2.tensor().data().iter().all(|&v| v > 0.0));
        let w2 = weight_map(&d2).unwrap();
        assert!(w2.tensor().data().iter().all(|&v| v > 1.0));
    }

    #[test]
    fn heatmap_export_writes_frames_and_sidecar() {
        let dir = tempfile::tempdir().unwrap();
        let d = ltd_map(&single_voxel(&[0.0, 1.0, 4.0]), &LtdConfig::default()).unwrap();
        let w = weight_map(&d).unwrap();
        export_frame_heatmaps(w.tensor(), dir.path()).unwrap();
        for f in 0..3 {
            assert!(dir.path().join(format!("frame_{f:03}.pgm")).exists());
        }
        let sidecar = std::fs::read_to_string(dir.path().join("scale.tsv")).unwrap();
        assert!(sidecar.starts_with("frame\tmin\tmax\n"));
        assert_eq!(sidecar.lines().count(), 4);
    }
}
