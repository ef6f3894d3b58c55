//! Forward noising process, training objectives, and the deterministic
//! DDIM sampler with classifier-free guidance.
//!
//! The forward process follows the closed form
//! `z_t = sqrt(abar_t) z_0 + sqrt(1 - abar_t) eps` over a linear beta
//! schedule. Training minimizes either the plain noise MSE or its
//! discrepancy-weighted variant
//! `mean((1 + ln(e + D)) * (eps - eps_pred)^2)`, whose weights are
//! constants with respect to the model parameters.

use crate::error::{Error, Result};
use crate::ltd::{broadcast_weight, weight_map, DiscrepancyTensor};
use crate::rng::{sample_gaussian, Rng};
use crate::tensor::{LatentVideo, Tensor};

/// Per-timestep beta and running alpha-bar arrays, 1-based access.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    /// Linear beta schedule inclusive of both endpoints.
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
        if steps == 0 {
            return Err(Error::InvalidConfig("schedule needs at least 1 step".into()));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "need 0 < beta_start <= beta_end < 1, got [{beta_start}, {beta_end}]"
            )));
        }
        let mut betas = Vec::with_capacity(steps);
        let mut alpha_bars = Vec::with_capacity(steps);
        let mut prod = 1.0;
        for i in 0..steps {
            let beta = if steps == 1 {
                beta_start
            } else {
                beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64
            };
            prod *= 1.0 - beta;
            betas.push(beta);
            alpha_bars.push(prod);
        }
        Ok(NoiseSchedule { betas, alpha_bars })
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t - 1]
    }
}

/// DDIM sampling parameters; timesteps are spaced evenly over [1, T].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SamplerConfig {
    pub num_steps: usize,
    pub guidance_scale: f64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            num_steps: 50,
            guidance_scale: 7.5,
        }
    }
}

/// Closed-form forward noising at timestep `t`.
pub fn q_sample(
    z0: &LatentVideo,
    t: usize,
    eps: &Tensor,
    sched: &NoiseSchedule,
) -> Result<LatentVideo> {
    if eps.dims() != z0.tensor().dims() {
        return Err(Error::InvalidShape(format!(
            "noise dims {:?} vs latent dims {:?}",
            eps.dims(),
            z0.tensor().dims()
        )));
    }
    if t < 1 || t > sched.steps() {
        return Err(Error::InvalidInput(format!(
            "timestep {t} outside [1, {}]",
            sched.steps()
        )));
    }
    let a = sched.alpha_bar(t);
    let (sa, sb) = (a.sqrt(), (1.0 - a).sqrt());
    let data: Vec<f64> = z0
        .tensor()
        .data()
        .iter()
        .zip(eps.data())
        .map(|(z, e)| sa * z + sb * e)
        .collect();
    LatentVideo::new(Tensor::from_vec(z0.tensor().dims().to_vec(), data)?)
}

/// Plain noise-prediction MSE, mean over all elements.
pub fn diffusion_loss(eps: &Tensor, eps_pred: &Tensor) -> Result<f64> {
    if eps.dims() != eps_pred.dims() {
        return Err(Error::InvalidShape(format!(
            "loss dims {:?} vs {:?}",
            eps.dims(),
            eps_pred.dims()
        )));
    }
    let mut acc = 0.0;
    for (a, b) in eps.data().iter().zip(eps_pred.data()) {
        let d = a - b;
        acc += d * d;
    }
    Ok(acc / eps.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LtdLoss {
    /// Mean of (1 + ln(e + D)) times the per-voxel squared error.
    pub total: f64,
    /// The unweighted MSE, returned for logging.
    pub unweighted: f64,
}

/// Discrepancy-weighted training loss.
///
/// The weight tensor is a constant: no gradient flows through D.
pub fn ltd_loss(eps: &Tensor, eps_pred: &Tensor, d: &DiscrepancyTensor) -> Result<LtdLoss> {
    if eps.dims() != eps_pred.dims() {
        return Err(Error::InvalidShape(format!(
            "loss dims {:?} vs {:?}",
            eps.dims(),
            eps_pred.dims()
        )));
    }
    if eps.rank() != 4 || eps.dims()[..3] != *d.tensor().dims() {
        return Err(Error::InvalidShape(format!(
            "error dims {:?} incompatible with discrepancy dims {:?}",
            eps.dims(),
            d.tensor().dims()
        )));
    }
    let channels = eps.dims()[3];
    let weights = broadcast_weight(&weight_map(d)?, channels)?;
    let mut total = 0.0;
    let mut unweighted = 0.0;
    for i in 0..eps.len() {
        let diff = eps.data()[i] - eps_pred.data()[i];
        let e = diff * diff;
        unweighted += e;
        total += (1.0 + weights.data()[i]) * e;
    }
    let n = eps.len() as f64;
    Ok(LtdLoss {
        total: total / n,
        unweighted: unweighted / n,
    })
}

/// A conditional noise predictor; `cond = None` is the null class used
/// for classifier-free guidance.
pub trait NoisePredictor {
    fn predict(&self, z_t: &LatentVideo, t: usize, cond: Option<usize>) -> Result<Tensor>;
}

/// Descending timestep subsequence: `num_steps` values evenly spaced
/// over [1, t_max], rounded and deduplicated.
pub fn ddim_timesteps(num_steps: usize, t_max: usize) -> Result<Vec<usize>> {
    if num_steps == 0 || num_steps > t_max {
        return Err(Error::InvalidConfig(format!(
            "num_steps {num_steps} outside [1, {t_max}]"
        )));
    }
    let mut ts: Vec<usize> = if num_steps == 1 {
        vec![t_max]
    } else {
        (0..num_steps)
            .map(|k| {
                let x = 1.0 + (t_max - 1) as f64 * k as f64 / (num_steps - 1) as f64;
                x.round() as usize
            })
            .collect()
    };
    ts.reverse();
    ts.dedup();
    Ok(ts)
}

/// One deterministic (eta = 0) DDIM update.
///
/// Returns the next latent and the clean-latent estimate `z0_hat`.
/// `a_next = 1` denotes the final step, which lands on `z0_hat` itself.
pub fn ddim_step(z_t: &Tensor, eps_hat: &Tensor, a_t: f64, a_next: f64) -> (Tensor, Tensor) {
    debug_assert_eq!(z_t.dims(), eps_hat.dims());
    let (sa, sb) = (a_t.sqrt(), (1.0 - a_t).sqrt());
    let (san, sbn) = (a_next.sqrt(), (1.0 - a_next).sqrt());
    let mut z0_hat = Vec::with_capacity(z_t.len());
    let mut z_next = Vec::with_capacity(z_t.len());
    for (z, e) in z_t.data().iter().zip(eps_hat.data()) {
        let z0 = (z - sb * e) / sa;
        z0_hat.push(z0);
        z_next.push(san * z0 + sbn * e);
    }
    (
        Tensor::from_vec(z_t.dims().to_vec(), z_next).expect("ddim step shape"),
        Tensor::from_vec(z_t.dims().to_vec(), z0_hat).expect("ddim step shape"),
    )
}

/// Deterministic DDIM sampling from pure noise down to a clean latent,
/// guiding with `eps_u + s * (eps_c - eps_u)`.
pub fn ddim_sample(
    model: &dyn NoisePredictor,
    dims: [usize; 4],
    cond: usize,
    cfg: &SamplerConfig,
    sched: &NoiseSchedule,
    rng: &mut Rng,
) -> Result<LatentVideo> {
    if cfg.guidance_scale < 0.0 {
        return Err(Error::InvalidConfig(format!(
            "guidance scale must be >= 0, got {}",
            cfg.guidance_scale
        )));
    }
    let ts = ddim_timesteps(cfg.num_steps, sched.steps())?;
    let mut z = sample_gaussian(rng, &dims)?;
    for (j, &t) in ts.iter().enumerate() {
        let z_lat = LatentVideo::new(z.clone())?;
        let eps_u = model.predict(&z_lat, t, None)?;
        if eps_u.dims() != z.dims() {
            return Err(Error::InvalidShape(format!(
                "model output dims {:?} vs latent dims {:?}",
                eps_u.dims(),
                z.dims()
            )));
        }
        let eps_hat = if cfg.guidance_scale == 0.0 {
            eps_u
        } else {
            let eps_c = model.predict(&z_lat, t, Some(cond))?;
            let s = cfg.guidance_scale;
            let data: Vec<f64> = eps_u
                .data()
                .iter()
                .zip(eps_c.data())
                .map(|(u, c)| u + s * (c - u))
                .collect();
            Tensor::from_vec(z.dims().to_vec(), data)?
        };
        let a_t = sched.alpha_bar(t);
        let a_next = if j + 1 < ts.len() {
            sched.alpha_bar(ts[j + 1])
        } else {
            1.0
        };
        let (z_next, _) = ddim_step(&z, &eps_hat, a_t, a_next);
        z = z_next;
    }
    LatentVideo::new(z)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ltd::{ltd_map, LtdConfig};
    use proptest::{prop_assert, proptest};

    fn toy_latent(vals: &[f64]) -> LatentVideo {
        LatentVideo::new(Tensor::from_vec(vec![vals.len(), 1, 1, 1], vals.to_vec()).unwrap())
            .unwrap()
    }

    #[test]
    fn single_step_schedule() {
        let s = NoiseSchedule::linear(1, 0.5, 0.5).unwrap();
        assert_eq!(s.beta(1), 0.5);
        assert_eq!(s.alpha_bar(1), 0.5);
    }

    #[test]
    fn thousand_step_terminal_alpha_bar() {
        let s = NoiseSchedule::linear(1000, 1e-4, 0.02).unwrap();
        // Independent route: product via summed logs.
        let mut log_sum = 0.0;
        for t in 1..=1000 {
            log_sum += (1.0 - s.beta(t)).ln();
        }
        let via_logs = log_sum.exp();
        let got = s.alpha_bar(1000);
        assert!((got - via_logs).abs() <= 1e-10 * via_logs);
        assert!((got - 4.04e-5).abs() < 2e-7, "alpha_bar(T) = {got}");
    }

    #[test]
    fn alpha_bar_strictly_decreasing() {
        let s = NoiseSchedule::linear(100, 1e-4, 0.02).unwrap();
        for t in 2..=100 {
            assert!(s.alpha_bar(t) < s.alpha_bar(t - 1));
        }
        assert!(s.alpha_bar(1) < 1.0);
        assert!(s.alpha_bar(100) > 0.0);
    }

    #[test]
    fn invalid_schedules_rejected() {
        assert!(NoiseSchedule::linear(0, 1e-4, 0.02).is_err());
        assert!(NoiseSchedule::linear(10, 0.02, 1e-4).is_err());
        assert!(NoiseSchedule::linear(10, 0.0, 0.02).is_err());
        assert!(NoiseSchedule::linear(10, 0.5, 1.0).is_err());
    }

    #[test]
    fn q_sample_zero_signal() {
        let sched = NoiseSchedule::linear(10, 0.1, 0.2).unwrap();
        let z0 = toy_latent(&[0.0, 0.0, 0.0]);
        let eps = Tensor::from_vec(vec![3, 1, 1, 1], vec![1.0, -2.0, 0.5]).unwrap();
        let zt = q_sample(&z0, 4, &eps, &sched).unwrap();
        let sb = (1.0 - sched.alpha_bar(4)).sqrt();
        for (got, e) in zt.tensor().data().iter().zip(eps.data()) {
            assert_eq!(*got, sb * e);
        }
    }

    #[test]
    fn q_sample_scalar_fixture() {
        // alpha_bar = 0.25 via a single step with beta = 0.75.
        let sched = NoiseSchedule::linear(1, 0.75, 0.75).unwrap();
        let z0 = toy_latent(&[2.0]);
        let eps = Tensor::from_vec(vec![1, 1, 1, 1], vec![-1.0]).unwrap();
        let zt = q_sample(&z0, 1, &eps, &sched).unwrap();
        let expect = 0.25f64.sqrt() * 2.0 - 0.75f64.sqrt();
        assert!((zt.tensor().data()[0] - expect).abs() < 1e-12);
        assert!((expect - 0.133_974_596_215_561_4).abs() < 1e-12);
    }

    #[test]
    fn q_sample_stays_near_signal_at_high_alpha() {
        let sched = NoiseSchedule::linear(1000, 1e-4, 0.02).unwrap();
        let z0 = toy_latent(&[0.3, -0.7]);
        let eps = Tensor::from_vec(vec![2, 1, 1, 1], vec![1.5, -2.5]).unwrap();
        let zt = q_sample(&z0, 1, &eps, &sched).unwrap();
        let bound = (1.0 - sched.alpha_bar(1)).sqrt() * 2.5 + 1e-12;
        for (z, z0v) in zt.tensor().data().iter().zip(z0.tensor().data()) {
            assert!((z - z0v).abs() <= bound + z0v.abs() * (1.0 - sched.alpha_bar(1).sqrt()));
        }
    }

    #[test]
    fn diffusion_loss_fixtures() {
        let a = Tensor::from_vec(vec![2], vec![0.0, 0.0]).unwrap();
        let b = Tensor::from_vec(vec![2], vec![1.0, 1.0]).unwrap();
        assert_eq!(diffusion_loss(&a, &a).unwrap(), 0.0);
        assert_eq!(diffusion_loss(&a, &b).unwrap(), 1.0);
    }

    #[test]
    fn diffusion_loss_matches_scalar_loop() {
        let rng = Rng::new(12);
        let a = sample_gaussian(&mut rng.stream(0), &[2, 2, 2, 2]).unwrap();
        let b = sample_gaussian(&mut rng.stream(1), &[2, 2, 2, 2]).unwrap();
        let got = diffusion_loss(&a, &b).unwrap();
        let mut acc = 0.0;
        for i in 0..16 {
            let d = a.data()[i] - b.data()[i];
            acc += d * d;
        }
        let expect = acc / 16.0;
        assert!((got - expect).abs() <= 1e-15 * expect);
    }

    #[test]
    fn ltd_loss_floor_identity() {
        let rng = Rng::new(13);
        let eps = sample_gaussian(&mut rng.stream(0), &[3, 2, 2, 2]).unwrap();
        let pred = sample_gaussian(&mut rng.stream(1), &[3, 2, 2, 2]).unwrap();
        let d = DiscrepancyTensor::new(Tensor::zeros(vec![3, 2, 2]).unwrap()).unwrap();
        let l = ltd_loss(&eps, &pred, &d).unwrap();
        assert_eq!(l.total, 2.0 * l.unweighted);
    }

    #[test]
    fn ltd_loss_single_voxel_fixture() {
        let e = std::f64::consts::E;
        let eps = Tensor::from_vec(vec![1, 1, 1, 1], vec![1.0]).unwrap();
        let pred = Tensor::zeros(vec![1, 1, 1, 1]).unwrap();
        let d =
            DiscrepancyTensor::new(Tensor::from_vec(vec![1, 1, 1], vec![e * e - e]).unwrap())
                .unwrap();
        let l = ltd_loss(&eps, &pred, &d).unwrap();
        assert!((l.total - 3.0).abs() < 1e-12);
        assert_eq!(l.unweighted, 1.0);
    }

    #[test]
    fn raising_discrepancy_raises_loss_only_where_error_lives() {
        let eps = Tensor::from_vec(vec![2, 1, 1, 1], vec![1.0, 0.0]).unwrap();
        let pred = Tensor::zeros(vec![2, 1, 1, 1]).unwrap();
        let d0 = DiscrepancyTensor::new(Tensor::zeros(vec![2, 1, 1]).unwrap()).unwrap();
        let base = ltd_loss(&eps, &pred, &d0).unwrap().total;
        // Bump D at the voxel with error: total must rise.
        let d1 = DiscrepancyTensor::new(
            Tensor::from_vec(vec![2, 1, 1], vec![5.0, 0.0]).unwrap(),
        )
        .unwrap();
        assert!(ltd_loss(&eps, &pred, &d1).unwrap().total > base);
        // Bump D at the error-free voxel: total unchanged.
        let d2 = DiscrepancyTensor::new(
            Tensor::from_vec(vec![2, 1, 1], vec![0.0, 5.0]).unwrap(),
        )
        .unwrap();
        assert_eq!(ltd_loss(&eps, &pred, &d2).unwrap().total, base);
    }

    #[test]
    fn ddim_timestep_selection() {
        assert_eq!(ddim_timesteps(1, 100).unwrap(), vec![100]);
        assert_eq!(ddim_timesteps(2, 100).unwrap(), vec![100, 1]);
        let ts = ddim_timesteps(50, 1000).unwrap();
        assert_eq!(ts.len(), 50);
        assert_eq!(ts[0], 1000);
        assert_eq!(*ts.last().unwrap(), 1);
        assert!(ts.windows(2).all(|p| p[0] > p[1]));
        assert!(ddim_timesteps(0, 100).is_err());
        assert!(ddim_timesteps(101, 100).is_err());
    }

    /// Always predicts the fixed tensor it was built with.
    struct ConstantModel(Tensor);

    impl NoisePredictor for ConstantModel {
        fn predict(&self, _z: &LatentVideo, _t: usize, _c: Option<usize>) -> Result<Tensor> {
            Ok(self.0.clone())
        }
    }

    /// Distinguishes conditional from unconditional calls.
    struct SplitModel {
        uncond: Tensor,
        cond: Tensor,
    }

    impl NoisePredictor for SplitModel {
        fn predict(&self, _z: &LatentVideo, _t: usize, c: Option<usize>) -> Result<Tensor> {
            Ok(match c {
                None => self.uncond.clone(),
                Some(_) => self.cond.clone(),
            })
        }
    }

    #[test]
    fn oracle_reconstruction_single_step() {
        let sched = NoiseSchedule::linear(1000, 1e-4, 0.02).unwrap();
        let rng = Rng::new(21);
        let z0 = sample_gaussian(&mut rng.stream(0), &[2, 2, 2, 2]).unwrap();
        let eps = sample_gaussian(&mut rng.stream(1), &[2, 2, 2, 2]).unwrap();
        for t in [1, 500, 1000] {
            let zt = q_sample(
                &LatentVideo::new(z0.clone()).unwrap(),
                t,
                &eps,
                &sched,
            )
            .unwrap();
            let (_, z0_hat) = ddim_step(zt.tensor(), &eps, sched.alpha_bar(t), 1.0);
            for (got, want) in z0_hat.data().iter().zip(z0.data()) {
                assert!(
                    (got - want).abs() <= 1e-10 * want.abs().max(1.0),
                    "t={t}: {got} vs {want}"
                );
            }
        }
    }

    #[test]
    fn zero_guidance_ignores_conditional_branch() {
        let sched = NoiseSchedule::linear(20, 1e-3, 0.02).unwrap();
        let dims = [2, 2, 2, 1];
        let uncond = sample_gaussian(&mut Rng::new(2).stream(0), &dims).unwrap();
        let weird = uncond.scale(-40.0).unwrap();
        let split = SplitModel {
            uncond: uncond.clone(),
            cond: weird,
        };
        let plain = ConstantModel(uncond);
        let cfg = SamplerConfig {
            num_steps: 10,
            guidance_scale: 0.0,
        };
        let a = ddim_sample(&split, dims, 1, &cfg, &sched, &mut Rng::new(5)).unwrap();
        let b = ddim_sample(&plain, dims, 1, &cfg, &sched, &mut Rng::new(5)).unwrap();
        assert!(a.tensor().bit_eq(b.tensor()));
    }

    #[test]
    fn full_step_count_settles_on_first_estimate() {
        let steps = 12;
        let sched = NoiseSchedule::linear(steps, 1e-3, 0.05).unwrap();
        let dims = [2, 2, 2, 1];
        let eps_star = sample_gaussian(&mut Rng::new(3).stream(7), &dims).unwrap();
        let model = ConstantModel(eps_star.clone());
        let cfg = SamplerConfig {
            num_steps: steps,
            guidance_scale: 0.0,
        };
        let out = ddim_sample(&model, dims, 0, &cfg, &sched, &mut Rng::new(8)).unwrap();
        // Reproduce z_T from the same stream and invert the first step.
        let z_t = sample_gaussian(&mut Rng::new(8), &dims).unwrap();
        let (_, z0_first) = ddim_step(&z_t, &eps_star, sched.alpha_bar(steps), 1.0);
        for (got, want) in out.tensor().data().iter().zip(z0_first.data()) {
            assert!((got - want).abs() <= 1e-10 * want.abs().max(1.0));
        }
    }

    #[test]
    fn sampling_is_deterministic() {
        let sched = NoiseSchedule::linear(100, 1e-4, 0.02).unwrap();
        let dims = [2, 2, 2, 2];
        let model = ConstantModel(sample_gaussian(&mut Rng::new(4), &dims).unwrap());
        let cfg = SamplerConfig {
            num_steps: 7,
            guidance_scale: 7.5,
        };
        let a = ddim_sample(&model, dims, 2, &cfg, &sched, &mut Rng::new(6)).unwrap();
        let b = ddim_sample(&model, dims, 2, &cfg, &sched, &mut Rng::new(6)).unwrap();
        assert!(a.tensor().bit_eq(b.tensor()));
    }

    #[test]
    fn q_sample_variance_tracks_schedule() {
        let sched = NoiseSchedule::linear(1000, 1e-4, 0.02).unwrap();
        let dims = [100_000];
        let eps = sample_gaussian(&mut Rng::new(30), &dims).unwrap();
        for t in [250, 999] {
            let a = sched.alpha_bar(t);
            let sb = (1.0 - a).sqrt();
            // z0 = 0, so z_t = sqrt(1 - abar) * eps elementwise.
            let zt: Vec<f64> = eps.data().iter().map(|e| sb * e).collect();
            let mean: f64 = zt.iter().sum::<f64>() / zt.len() as f64;
            let var: f64 =
                zt.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / zt.len() as f64;
            let expect = 1.0 - a;
            assert!(
                (var - expect).abs() <= 0.03 * expect,
                "t={t}: var {var} vs {expect}"
            );
        }
    }

    proptest! {
        #[test]
        fn weighted_total_dominates_twice_unweighted(
            seed in 0u64..500,
            dscale in 0.0f64..4.0,
        ) {
            let rng = Rng::new(seed);
            let eps = sample_gaussian(&mut rng.stream(0), &[3, 2, 2, 2]).unwrap();
            let pred = sample_gaussian(&mut rng.stream(1), &[3, 2, 2, 2]).unwrap();
            let z = LatentVideo::new(
                sample_gaussian(&mut rng.stream(2), &[3, 2, 2, 2]).unwrap()
                    .scale(dscale).unwrap(),
            ).unwrap();
            let d = ltd_map(&z, &LtdConfig::default()).unwrap();
            let l = ltd_loss(&eps, &pred, &d).unwrap();
            prop_assert!(l.total >= 2.0 * l.unweighted - 1e-12 * l.total.abs());
            if dscale == 0.0 {
                prop_assert!((l.total - 2.0 * l.unweighted).abs() <= 1e-12 * l.total.abs());
            }
        }
    }
}
