//! A small conditional noise predictor with exact hand-derived
//! gradients.
//!
//! The network is a per-voxel MLP: every latent voxel feeds its channel
//! values, a shared sinusoidal time embedding, and a learned class
//! embedding through `hidden_layers` tanh layers to predict that voxel's
//! noise channels. Weight sharing across voxels keeps the parameter
//! vector small enough for finite-difference verification of the whole
//! gradient.
//!
//! Parameters live in one flat vector; the layout (class table, then
//! each layer's weight and bias, then the output head) is derived from
//! the architecture and covers the vector exactly.

use crate::diffusion::{q_sample, NoisePredictor, NoiseSchedule};
use crate::error::{Error, Result};
use crate::ltd::DiscrepancyTensor;
use crate::parallel;
use crate::rng::Rng;
use crate::tensor::{LatentVideo, Tensor};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DenoiserArch {
    pub latent_dims: [usize; 4],
    pub hidden_width: usize,
    pub hidden_layers: usize,
    pub time_embed_dim: usize,
    pub cond_embed_dim: usize,
    pub num_classes: usize,
}

impl DenoiserArch {
    pub fn validate(&self) -> Result<()> {
        if self.latent_dims.contains(&0) {
            return Err(Error::InvalidConfig("latent dims must be positive".into()));
        }
        if self.hidden_width == 0 || self.hidden_layers == 0 {
            return Err(Error::InvalidConfig("hidden geometry must be positive".into()));
        }
        if self.time_embed_dim == 0 || !self.time_embed_dim.is_multiple_of(2) {
            return Err(Error::InvalidConfig(
                "time embedding dim must be positive and even".into(),
            ));
        }
        if self.cond_embed_dim == 0 || self.num_classes == 0 {
            return Err(Error::InvalidConfig(
                "condition embedding needs positive dims".into(),
            ));
        }
        Ok(())
    }

    pub fn channels(&self) -> usize {
        self.latent_dims[3]
    }

    pub fn voxels(&self) -> usize {
        self.latent_dims[0] * self.latent_dims[1] * self.latent_dims[2]
    }

    pub fn input_dim(&self) -> usize {
        self.channels() + self.time_embed_dim + self.cond_embed_dim
    }

    /// Rows of the class table: one per class plus the null row.
    pub fn cond_rows(&self) -> usize {
        self.num_classes + 1
    }

    fn layer_input(&self, layer: usize) -> usize {
        if layer == 0 {
            self.input_dim()
        } else {
            self.hidden_width
        }
    }

    /// (offset, len) of each named block, in storage order.
    pub fn blocks(&self) -> Vec<(String, usize, usize)> {
        let mut out = Vec::new();
        let mut off = 0;
        let mut push = |name: String, len: usize, off: &mut usize| {
            out.push((name, *off, len));
            *off += len;
        };
        push("cond_table".into(), self.cond_rows() * self.cond_embed_dim, &mut off);
        for l in 0..self.hidden_layers {
            push(format!("w{l}"), self.hidden_width * self.layer_input(l), &mut off);
            push(format!("b{l}"), self.hidden_width, &mut off);
        }
        push("w_out".into(), self.channels() * self.hidden_width, &mut off);
        push("b_out".into(), self.channels(), &mut off);
        out
    }

    pub fn param_count(&self) -> usize {
        self.blocks().iter().map(|(_, _, len)| len).sum()
    }

    fn cond_row_offset(&self, row: usize) -> usize {
        row * self.cond_embed_dim
    }

    fn layer_w_offset(&self, layer: usize) -> usize {
        let mut off = self.cond_rows() * self.cond_embed_dim;
        for l in 0..layer {
            off += self.hidden_width * self.layer_input(l) + self.hidden_width;
        }
        off
    }

    fn layer_b_offset(&self, layer: usize) -> usize {
        self.layer_w_offset(layer) + self.hidden_width * self.layer_input(layer)
    }

    fn out_w_offset(&self) -> usize {
        self.layer_w_offset(self.hidden_layers)
    }

    fn out_b_offset(&self) -> usize {
        self.out_w_offset() + self.channels() * self.hidden_width
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserParams {
    pub arch: DenoiserArch,
    pub values: Vec<f64>,
}

/// Weights ~ N(0, 1/fan_in), biases 0, embedding table ~ N(0, 0.02^2).
pub fn init_params(arch: &DenoiserArch, rng: &mut Rng) -> Result<DenoiserParams> {
    arch.validate()?;
    let mut values = vec![0.0; arch.param_count()];
    let table_len = arch.cond_rows() * arch.cond_embed_dim;
    for v in values.iter_mut().take(table_len) {
        *v = 0.02 * rng.next_gaussian();
    }
    for l in 0..arch.hidden_layers {
        let std = 1.0 / (arch.layer_input(l) as f64).sqrt();
        let off = arch.layer_w_offset(l);
        for i in 0..arch.hidden_width * arch.layer_input(l) {
            values[off + i] = std * rng.next_gaussian();
        }
    }
    let std = 1.0 / (arch.hidden_width as f64).sqrt();
    let off = arch.out_w_offset();
    for i in 0..arch.channels() * arch.hidden_width {
        values[off + i] = std * rng.next_gaussian();
    }
    Ok(DenoiserParams {
        arch: arch.clone(),
        values,
    })
}

/// Sinusoidal embedding of an integer timestep.
pub fn time_embedding(t: usize, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = Vec::with_capacity(dim);
    for i in 0..half {
        let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
        let angle = t as f64 * freq;
        out.push(angle.sin());
        out.push(angle.cos());
    }
    out
}

/// Reusable per-voxel forward/backward scratch.
struct Workspace {
    x: Vec<f64>,
    hidden: Vec<Vec<f64>>,
    y: Vec<f64>,
    g_hidden: Vec<f64>,
    g_pre: Vec<f64>,
    g_x: Vec<f64>,
}

impl Workspace {
    fn new(arch: &DenoiserArch) -> Workspace {
        Workspace {
            x: vec![0.0; arch.input_dim()],
            hidden: vec![vec![0.0; arch.hidden_width]; arch.hidden_layers],
            y: vec![0.0; arch.channels()],
            g_hidden: vec![0.0; arch.hidden_width],
            g_pre: vec![0.0; arch.hidden_width],
            g_x: vec![0.0; arch.input_dim()],
        }
    }
}

fn forward_voxel(arch: &DenoiserArch, values: &[f64], ws: &mut Workspace) {
    let width = arch.hidden_width;
    for l in 0..arch.hidden_layers {
        let n_in = arch.layer_input(l);
        let w_off = arch.layer_w_offset(l);
        let b_off = arch.layer_b_offset(l);
        // Split borrows: read previous activation, write current.
        let (src, dst) = if l == 0 {
            (&ws.x[..], &mut ws.hidden[0])
        } else {
            let (a, b) = ws.hidden.split_at_mut(l);
            (&a[l - 1][..], &mut b[0])
        };
        for u in 0..width {
            let row = &values[w_off + u * n_in..w_off + (u + 1) * n_in];
            let mut z = values[b_off + u];
            for (wv, xv) in row.iter().zip(src) {
                z += wv * xv;
            }
            dst[u] = z.tanh();
        }
    }
    let last = &ws.hidden[arch.hidden_layers - 1];
    let w_off = arch.out_w_offset();
    let b_off = arch.out_b_offset();
    for c in 0..arch.channels() {
        let row = &values[w_off + c * width..w_off + (c + 1) * width];
        let mut z = values[b_off + c];
        for (wv, hv) in row.iter().zip(last) {
            z += wv * hv;
        }
        ws.y[c] = z;
    }
}

/// Accumulate parameter gradients for one voxel given dL/dy in `g_y`.
/// The condition-embedding slot of the input gradient lands in the
/// class-table rows via `cond_row`.
fn backward_voxel(
    arch: &DenoiserArch,
    values: &[f64],
    ws: &mut Workspace,
    g_y: &[f64],
    grad: &mut [f64],
    cond_row: usize,
) {
    let width = arch.hidden_width;
    let last = arch.hidden_layers - 1;

    // Output head.
    let w_off = arch.out_w_offset();
    let b_off = arch.out_b_offset();
    ws.g_hidden.iter_mut().for_each(|g| *g = 0.0);
    for c in 0..arch.channels() {
        let gy = g_y[c];
        grad[b_off + c] += gy;
        let row_off = w_off + c * width;
        for u in 0..width {
            grad[row_off + u] += gy * ws.hidden[last][u];
            ws.g_hidden[u] += values[row_off + u] * gy;
        }
    }

    for l in (0..arch.hidden_layers).rev() {
        let n_in = arch.layer_input(l);
        let w_off = arch.layer_w_offset(l);
        let b_off = arch.layer_b_offset(l);
        for u in 0..width {
            let h = ws.hidden[l][u];
            ws.g_pre[u] = ws.g_hidden[u] * (1.0 - h * h);
        }
        if l == 0 {
            ws.g_x.iter_mut().for_each(|g| *g = 0.0);
        } else {
            ws.g_hidden.iter_mut().for_each(|g| *g = 0.0);
        }
        for u in 0..width {
            let gz = ws.g_pre[u];
            grad[b_off + u] += gz;
            let row_off = w_off + u * n_in;
            if l == 0 {
                for i in 0..n_in {
                    grad[row_off + i] += gz * ws.x[i];
                    ws.g_x[i] += values[row_off + i] * gz;
                }
            } else {
                let src = &ws.hidden[l - 1];
                for i in 0..n_in {
                    grad[row_off + i] += gz * src[i];
                    ws.g_hidden[i] += values[row_off + i] * gz;
                }
            }
        }
    }

    // Only the condition slice of the input is learned.
    let c_off = arch.channels() + arch.time_embed_dim;
    let row = arch.cond_row_offset(cond_row);
    for k in 0..arch.cond_embed_dim {
        grad[row + k] += ws.g_x[c_off + k];
    }
}

fn cond_row(arch: &DenoiserArch, cond: Option<usize>) -> Result<usize> {
    match cond {
        None => Ok(arch.num_classes),
        Some(c) if c < arch.num_classes => Ok(c),
        Some(c) => Err(Error::InvalidInput(format!(
            "class label {c} outside 0..{}",
            arch.num_classes
        ))),
    }
}

/// Predict the noise component of `z_t`; output shape equals input shape.
pub fn forward(
    params: &DenoiserParams,
    z_t: &LatentVideo,
    t: usize,
    cond: Option<usize>,
) -> Result<Tensor> {
    let arch = &params.arch;
    if z_t.tensor().dims() != arch.latent_dims {
        return Err(Error::InvalidShape(format!(
            "latent dims {:?} vs arch {:?}",
            z_t.tensor().dims(),
            arch.latent_dims
        )));
    }
    let row = cond_row(arch, cond)?;
    let temb = time_embedding(t, arch.time_embed_dim);
    let cemb =
        &params.values[arch.cond_row_offset(row)..arch.cond_row_offset(row) + arch.cond_embed_dim];
    let (channels, frames) = (arch.channels(), arch.latent_dims[0]);
    let frame_voxels = arch.latent_dims[1] * arch.latent_dims[2];

    // One task per frame keeps workspace reuse while staying data-parallel.
    let frames_out = parallel::map_indexed(frames, |f| {
        let mut ws = Workspace::new(arch);
        ws.x[channels..channels + arch.time_embed_dim].copy_from_slice(&temb);
        ws.x[channels + arch.time_embed_dim..].copy_from_slice(cemb);
        let mut out = vec![0.0; frame_voxels * channels];
        for s in 0..frame_voxels {
            let (h, w) = (s / arch.latent_dims[2], s % arch.latent_dims[2]);
            ws.x[..channels].copy_from_slice(z_t.voxel(f, h, w));
            forward_voxel(arch, &params.values, &mut ws);
            out[s * channels..(s + 1) * channels].copy_from_slice(&ws.y);
        }
        out
    });
    let mut data = Vec::with_capacity(arch.voxels() * channels);
    for f in frames_out {
        data.extend_from_slice(&f);
    }
    Tensor::from_vec(arch.latent_dims.to_vec(), data)
}

impl NoisePredictor for DenoiserParams {
    fn predict(&self, z_t: &LatentVideo, t: usize, cond: Option<usize>) -> Result<Tensor> {
        forward(self, z_t, t, cond)
    }
}

/// One training example; the discrepancy map rides along precomputed.
#[derive(Debug, Clone)]
pub struct TrainExample<'a> {
    pub z0: &'a LatentVideo,
    pub d: &'a DiscrepancyTensor,
    pub t: usize,
    pub eps: Tensor,
    pub cond: Option<usize>,
}

pub type TrainBatch<'a> = Vec<TrainExample<'a>>;

#[derive(Debug, Clone)]
pub struct LossAndGrad {
    pub loss: f64,
    pub grad: Vec<f64>,
    pub unweighted: f64,
    /// Unweighted per-latent-frame MSE, averaged over the batch.
    pub per_frame: Vec<f64>,
}

struct ExampleResult {
    loss: f64,
    grad: Vec<f64>,
    frame_sums: Vec<f64>,
}

/// Where each voxel's loss weight comes from. Every variant is a
/// constant with respect to the parameters.
#[derive(Clone, Copy)]
enum WeightMode<'w> {
    Unit,
    FromDiscrepancy,
    Frozen(&'w Tensor),
}

impl WeightMode<'_> {
    fn at(&self, ex: &TrainExample<'_>, site: usize) -> f64 {
        match self {
            WeightMode::Unit => 1.0,
            WeightMode::FromDiscrepancy => {
                1.0 + (std::f64::consts::E + ex.d.tensor().data()[site]).ln()
            }
            WeightMode::Frozen(w) => w.data()[site],
        }
    }
}

fn example_pass(
    params: &DenoiserParams,
    ex: &TrainExample<'_>,
    sched: &NoiseSchedule,
    weight_mode: WeightMode<'_>,
    with_grad: bool,
) -> Result<ExampleResult> {
    let arch = &params.arch;
    if ex.z0.tensor().dims() != arch.latent_dims {
        return Err(Error::InvalidShape(format!(
            "example dims {:?} vs arch {:?}",
            ex.z0.tensor().dims(),
            arch.latent_dims
        )));
    }
    if ex.d.tensor().dims() != &arch.latent_dims[..3] {
        return Err(Error::InvalidShape(format!(
            "discrepancy dims {:?} vs arch {:?}",
            ex.d.tensor().dims(),
            arch.latent_dims
        )));
    }
    let z_t = q_sample(ex.z0, ex.t, &ex.eps, sched)?;
    let row = cond_row(arch, ex.cond)?;
    let temb = time_embedding(ex.t, arch.time_embed_dim);
    let cemb =
        &params.values[arch.cond_row_offset(row)..arch.cond_row_offset(row) + arch.cond_embed_dim];

    let channels = arch.channels();
    let n = (arch.voxels() * channels) as f64;
    let (frames, height, width) = (
        arch.latent_dims[0],
        arch.latent_dims[1],
        arch.latent_dims[2],
    );
    let mut ws = Workspace::new(arch);
    ws.x[channels..channels + arch.time_embed_dim].copy_from_slice(&temb);
    ws.x[channels + arch.time_embed_dim..].copy_from_slice(cemb);

    let mut grad = vec![0.0; if with_grad { params.values.len() } else { 0 }];
    let mut g_y = vec![0.0; channels];
    let mut frame_sums = vec![0.0; frames];
    let mut weighted_sum = 0.0;

    for f in 0..frames {
        for h in 0..height {
            for w in 0..width {
                ws.x[..channels].copy_from_slice(z_t.voxel(f, h, w));
                forward_voxel(arch, &params.values, &mut ws);
                let target = ex.eps.data();
                let base = ex.eps.offset4(f, h, w, 0);
                let wgt = weight_mode.at(ex, (f * height + h) * width + w);
                for c in 0..channels {
                    let diff = ws.y[c] - target[base + c];
                    frame_sums[f] += diff * diff;
                    weighted_sum += wgt * diff * diff;
                    g_y[c] = wgt * 2.0 * diff / n;
                }
                if with_grad {
                    backward_voxel(arch, &params.values, &mut ws, &g_y, &mut grad, row);
                }
            }
        }
    }

    Ok(ExampleResult {
        loss: weighted_sum / n,
        grad,
        frame_sums,
    })
}

fn batch_pass(
    params: &DenoiserParams,
    batch: &TrainBatch<'_>,
    sched: &NoiseSchedule,
    weight_mode: WeightMode<'_>,
) -> Result<LossAndGrad> {
    if batch.is_empty() {
        return Err(Error::InvalidInput("empty training batch".into()));
    }
    let results = parallel::map_indexed(batch.len(), |i| {
        example_pass(params, &batch[i], sched, weight_mode, true)
    });
    let mut results_ok = Vec::with_capacity(results.len());
    for r in results {
        results_ok.push(r?);
    }

    let arch = &params.arch;
    let b = results_ok.len() as f64;
    let mut grad = vec![0.0; params.values.len()];
    let mut loss = 0.0;
    let mut per_frame = vec![0.0; arch.latent_dims[0]];
    let frame_elems = (arch.latent_dims[1] * arch.latent_dims[2] * arch.channels()) as f64;
    for r in &results_ok {
        loss += r.loss;
        for (g, rg) in grad.iter_mut().zip(&r.grad) {
            *g += rg;
        }
        for (pf, fs) in per_frame.iter_mut().zip(&r.frame_sums) {
            *pf += fs;
        }
    }
    loss /= b;
    for g in grad.iter_mut() {
        *g /= b;
    }
    for pf in per_frame.iter_mut() {
        *pf /= frame_elems * b;
    }
    // Mean over frames, so the logged scalar and the per-frame profile
    // satisfy the same identity the reports assert.
    let unweighted = per_frame.iter().sum::<f64>() / per_frame.len() as f64;
    if !loss.is_finite() {
        return Err(Error::Numerical(format!("loss became {loss}")));
    }
    Ok(LossAndGrad {
        loss,
        grad,
        unweighted,
        per_frame,
    })
}

/// Batch loss, exact gradient, and per-frame diagnostics.
///
/// Per-example passes may run in parallel; the reduction always walks
/// examples in order, so results do not depend on scheduling.
pub fn loss_and_grad(
    params: &DenoiserParams,
    batch: &TrainBatch<'_>,
    sched: &NoiseSchedule,
    use_ltd: bool,
) -> Result<LossAndGrad> {
    let mode = if use_ltd {
        WeightMode::FromDiscrepancy
    } else {
        WeightMode::Unit
    };
    batch_pass(params, batch, sched, mode)
}

/// Like [`loss_and_grad`] with the discrepancy mode, but the per-voxel
/// weights come in as an opaque rank-3 constant tensor. Exists so the
/// no-gradient-through-D property can be asserted against the same
/// engine.
pub fn loss_and_grad_frozen(
    params: &DenoiserParams,
    batch: &TrainBatch<'_>,
    sched: &NoiseSchedule,
    weights: &Tensor,
) -> Result<LossAndGrad> {
    if weights.dims() != &params.arch.latent_dims[..3] {
        return Err(Error::InvalidShape(format!(
            "weight dims {:?} vs latent dims {:?}",
            weights.dims(),
            params.arch.latent_dims
        )));
    }
    batch_pass(params, batch, sched, WeightMode::Frozen(weights))
}

/// Loss only; shares the forward path with [`loss_and_grad`].
pub fn batch_loss(
    params: &DenoiserParams,
    batch: &TrainBatch<'_>,
    sched: &NoiseSchedule,
    use_ltd: bool,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::InvalidInput("empty training batch".into()));
    }
    let mode = if use_ltd {
        WeightMode::FromDiscrepancy
    } else {
        WeightMode::Unit
    };
    let mut loss = 0.0;
    for ex in batch {
        loss += example_pass(params, ex, sched, mode, false)?.loss;
    }
    Ok(loss / batch.len() as f64)
}

#[derive(Debug, Clone)]
pub struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
}

impl AdamState {
    pub fn new(param_count: usize) -> AdamState {
        AdamState {
            m: vec![0.0; param_count],
            v: vec![0.0; param_count],
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// Bias-corrected Adam update, in place.
pub fn adam_step(
    params: &mut DenoiserParams,
    grad: &[f64],
    state: &mut AdamState,
    lr: f64,
) -> Result<()> {
    if grad.len() != params.values.len() || grad.len() != state.m.len() {
        return Err(Error::InvalidShape(format!(
            "gradient len {} vs params {} vs state {}",
            grad.len(),
            params.values.len(),
            state.m.len()
        )));
    }
    state.step += 1;
    let c1 = 1.0 - ADAM_BETA1.powi(state.step as i32);
    let c2 = 1.0 - ADAM_BETA2.powi(state.step as i32);
    for i in 0..grad.len() {
        let g = grad[i];
        state.m[i] = ADAM_BETA1 * state.m[i] + (1.0 - ADAM_BETA1) * g;
        state.v[i] = ADAM_BETA2 * state.v[i] + (1.0 - ADAM_BETA2) * g * g;
        let m_hat = state.m[i] / c1;
        let v_hat = state.v[i] / c2;
        params.values[i] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
    }
    Ok(())
}

/// Worst relative error between the analytic gradient and central
/// finite differences over `num_coords` randomly chosen coordinates.
pub fn finite_diff_check(
    params: &DenoiserParams,
    batch: &TrainBatch<'_>,
    sched: &NoiseSchedule,
    use_ltd: bool,
    num_coords: usize,
    h: f64,
    rng: &mut Rng,
) -> Result<f64> {
    if num_coords > params.values.len() {
        return Err(Error::InvalidInput(format!(
            "{num_coords} coords exceed {} params",
            params.values.len()
        )));
    }
    let analytic = loss_and_grad(params, batch, sched, use_ltd)?;
    let mut worst = 0.0f64;
    let mut probe = params.clone();
    for _ in 0..num_coords {
        let i = rng.next_index(params.values.len());
        let orig = probe.values[i];
        probe.values[i] = orig + h;
        let plus = batch_loss(&probe, batch, sched, use_ltd)?;
        probe.values[i] = orig - h;
        let minus = batch_loss(&probe, batch, sched, use_ltd)?;
        probe.values[i] = orig;
        let numeric = (plus - minus) / (2.0 * h);
        let denom = analytic.grad[i].abs().max(numeric.abs()).max(1e-12);
        worst = worst.max((analytic.grad[i] - numeric).abs() / denom);
    }
    Ok(worst)
}
