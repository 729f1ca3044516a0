//! Two-stage accuracy recovery after compression.
//!
//! Stage one (BQPO) re-optimizes the surviving weights of each block in
//! isolation: latent FP32 weights pass through the quantizer on every
//! forward, gradients cross the rounding step via a straight-through
//! estimator, and the target is the FP block's output on calibration
//! inputs. Stage two (E2E-OQP) freezes every integer code and trains only
//! the continuous quantization parameters (scale, zero-point) plus biases
//! against the FP model's final outputs, with gradients flowing through the
//! whole stack.
//!
//! Both stages run plain AdamW with zero weight decay, evaluate the full
//! calibration loss at every epoch boundary, and return the best
//! checkpoint seen (the untouched input counts as a candidate), so a
//! finished stage never reports a loss above its starting point.

use std::time::Instant;

use crate::dense::{Activation, CalibrationSet, DenseVector, ToyModel};
use crate::engine::gemv_reference;
use crate::error::{Error, Result};
use crate::gqs::GqsLayer;
use crate::quant::{compute_qparams, max_code, pack_codes, quantize_group, unpack_codes, SCALE_EPS};

// ---------------------------------------------------------------------------
// configuration and reporting
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy)]
pub struct TuneConfig {
    pub lr: f32,
    pub epochs_bqpo: usize,
    pub epochs_e2e: usize,
    /// Calibration samples per optimizer step, walked in order without
    /// shuffling. One sample per step keeps the total parameter movement
    /// proportionate to the small fixed learning rate.
    pub batch_size: usize,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub weight_decay: f32,
}

impl Default for TuneConfig {
    fn default() -> Self {
        TuneConfig {
            lr: 1e-5,
            epochs_bqpo: 5,
            epochs_e2e: 2,
            batch_size: 1,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

impl TuneConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::Domain(format!("learning rate {} out of range", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::Domain("batch size must be at least 1".into()));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Domain(format!("{name} must lie in [0, 1), got {b}")));
            }
        }
        if !(self.eps > 0.0) {
            return Err(Error::Domain("optimizer epsilon must be positive".into()));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::Domain("weight decay must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Bqpo,
    E2e,
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Stage::Bqpo => write!(f, "bqpo"),
            Stage::E2e => write!(f, "e2e"),
        }
    }
}

/// One optimizer step in the loss trajectory.
#[derive(Debug, Clone)]
pub struct TraceRow {
    pub stage: Stage,
    /// Block index for BQPO; `None` for the end-to-end stage.
    pub block: Option<usize>,
    pub epoch: usize,
    pub batch: usize,
    pub loss: f64,
}

#[derive(Debug, Clone)]
pub struct TuneReport {
    pub trace: Vec<TraceRow>,
    /// End-to-end MSE against the FP model before the stage ran.
    pub initial_mse: f64,
    /// Same measurement on the returned layers.
    pub final_mse: f64,
    pub wall_ms: u64,
    /// Scales driven to the positivity floor during E2E-OQP.
    pub scale_clamp_warnings: usize,
}

// ---------------------------------------------------------------------------
// optimizer
// ---------------------------------------------------------------------------

/// AdamW over one flat parameter vector (decoupled decay, zero by default).
struct Adam {
    m: Vec<f32>,
    v: Vec<f32>,
    step: u32,
    lr: f32,
    beta1: f32,
    beta2: f32,
    eps: f32,
    weight_decay: f32,
}

impl Adam {
    fn new(n: usize, cfg: &TuneConfig) -> Self {
        Adam {
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
            lr: cfg.lr,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
            weight_decay: cfg.weight_decay,
        }
    }

    fn step(&mut self, params: &mut [f32], grads: &[f32]) {
        debug_assert_eq!(params.len(), self.m.len());
        debug_assert_eq!(grads.len(), self.m.len());
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for ((p, &g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            if self.weight_decay > 0.0 {
                *p -= self.lr * self.weight_decay * *p;
            }
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *p -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
    }
}

// ---------------------------------------------------------------------------
// shared checks and measurements
// ---------------------------------------------------------------------------

fn check_model_layers(model: &ToyModel, layers: &[GqsLayer]) -> Result<()> {
    if layers.len() != model.blocks.len() {
        return Err(Error::Shape(format!(
            "{} layers for a {}-block model",
            layers.len(),
            model.blocks.len()
        )));
    }
    for (k, (layer, block)) in layers.iter().zip(&model.blocks).enumerate() {
        if layer.rows != block.weight.rows || layer.cols != block.weight.cols {
            return Err(Error::Shape(format!(
                "block {k}: layer is {}x{}, FP weight is {}x{}",
                layer.rows, layer.cols, block.weight.rows, block.weight.cols
            )));
        }
    }
    Ok(())
}

fn check_calib(model: &ToyModel, calib: &CalibrationSet) -> Result<()> {
    if calib.samples.is_empty() {
        return Err(Error::Domain("calibration set is empty".into()));
    }
    if calib.dim() != model.input_dim() {
        return Err(Error::Shape(format!(
            "calibration dim {} does not match model input dim {}",
            calib.dim(),
            model.input_dim()
        )));
    }
    Ok(())
}

/// Mean squared error between the FP model and the compressed model over the
/// calibration set, averaged over samples and output dimensions.
pub fn end_to_end_mse(
    model: &ToyModel,
    layers: &[GqsLayer],
    calib: &CalibrationSet,
) -> Result<f64> {
    check_model_layers(model, layers)?;
    check_calib(model, calib)?;
    let out_dim = model.output_dim();
    let mut total = 0.0f64;
    for sample in &calib.samples {
        let fp = model.forward(sample)?;
        let mut cur = sample.clone();
        for (layer, block) in layers.iter().zip(&model.blocks) {
            let mut pre = gemv_reference(layer, &cur)?;
            for v in pre.data.iter_mut() {
                *v = block.activation.apply(*v);
            }
            cur = pre;
        }
        for (a, b) in cur.data.iter().zip(&fp.data) {
            total += ((a - b) as f64).powi(2);
        }
    }
    Ok(total / (calib.samples.len() as f64 * out_dim as f64))
}

fn wall_ms(t0: Instant) -> u64 {
    t0.elapsed().as_millis() as u64
}

// ---------------------------------------------------------------------------
// BQPO: block-wise latent-weight optimization
// ---------------------------------------------------------------------------

/// Trainable view of one compressed block: FP32 latent values for the kept
/// groups plus the bias, over a frozen sparse topology.
#[derive(Debug, Clone)]
pub struct LatentBlock {
    pub rows: usize,
    pub cols: usize,
    pub group_size: usize,
    pub bits: u8,
    pub row_index: Vec<u32>,
    pub group_cols: Vec<u16>,
    /// nnzg x group_size values in slot order.
    pub latent: Vec<f32>,
    pub bias: DenseVector,
    pub activation: Activation,
}

/// Forward-pass state `ste_backward` consumes.
#[derive(Debug, Clone)]
pub struct SteCache {
    x: Vec<f32>,
    pre: Vec<f32>,
    /// Per latent value: pre-clamp code landed inside [0, 2^bits - 1].
    in_range: Vec<bool>,
}

impl LatentBlock {
    /// Initialize from a compressed layer: latent values are the dequantized
    /// codes, so the first forward reproduces the layer's outputs.
    pub fn from_layer(layer: &GqsLayer, activation: Activation) -> Result<Self> {
        let g = layer.group_size;
        let nnzg = layer.nnzg();
        let codes = unpack_codes(&layer.packed_codes, nnzg * g, layer.bits)?;
        let mut latent = Vec::with_capacity(nnzg * g);
        for slot in 0..nnzg {
            let scale = layer.scales[slot];
            let zero = layer.zeros[slot];
            for &c in &codes[slot * g..(slot + 1) * g] {
                latent.push((c as f32 - zero) * scale);
            }
        }
        let bias = match &layer.bias {
            Some(b) => b.clone(),
            None => DenseVector::zeros(layer.rows),
        };
        Ok(LatentBlock {
            rows: layer.rows,
            cols: layer.cols,
            group_size: g,
            bits: layer.bits,
            row_index: layer.row_index.clone(),
            group_cols: layer.group_cols.clone(),
            latent,
            bias,
            activation,
        })
    }

    fn nnzg(&self) -> usize {
        self.group_cols.len()
    }

    /// Re-quantize the latent values into a fresh layer on the same topology.
    pub fn to_layer(&self) -> Result<GqsLayer> {
        let g = self.group_size;
        let nnzg = self.nnzg();
        let mut scales = Vec::with_capacity(nnzg);
        let mut zeros = Vec::with_capacity(nnzg);
        let mut codes = Vec::with_capacity(nnzg * g);
        for slot in 0..nnzg {
            let group = &self.latent[slot * g..(slot + 1) * g];
            let params = compute_qparams(group, self.bits)?;
            let q = quantize_group(group, &params)?;
            scales.push(params.scale);
            zeros.push(params.zero);
            codes.extend_from_slice(&q.codes);
        }
        Ok(GqsLayer {
            rows: self.rows,
            cols: self.cols,
            group_size: g,
            bits: self.bits,
            row_index: self.row_index.clone(),
            group_cols: self.group_cols.clone(),
            scales,
            zeros,
            packed_codes: pack_codes(&codes, self.bits)?,
            bias: Some(self.bias.clone()),
        })
    }

    /// Quantize-dequantize the latent weights with parameters recomputed
    /// from each group's current min/max, then run the block forward.
    pub fn ste_forward(&self, x: &[f32]) -> Result<(Vec<f32>, SteCache)> {
        if x.len() != self.cols {
            return Err(Error::Shape(format!(
                "input has length {}, block expects {}",
                x.len(),
                self.cols
            )));
        }
        let g = self.group_size;
        let hi = max_code(self.bits) as f32;
        let mut w_hat = vec![0.0f32; self.latent.len()];
        let mut in_range = vec![false; self.latent.len()];
        for slot in 0..self.nnzg() {
            let group = &self.latent[slot * g..(slot + 1) * g];
            let params = compute_qparams(group, self.bits)?;
            let z_rounded = params.zero.round();
            for (i, &w) in group.iter().enumerate() {
                let q = (w / params.scale).round() + z_rounded;
                in_range[slot * g + i] = (0.0..=hi).contains(&q);
                w_hat[slot * g + i] = (q.clamp(0.0, hi) - params.zero) * params.scale;
            }
        }
        let mut pre = vec![0.0f32; self.rows];
        for (r, out) in pre.iter_mut().enumerate() {
            let mut acc = 0.0f32;
            for slot in self.row_index[r] as usize..self.row_index[r + 1] as usize {
                let col0 = self.group_cols[slot] as usize * g;
                for i in 0..g {
                    acc += w_hat[slot * g + i] * x[col0 + i];
                }
            }
            *out = acc + self.bias.data[r];
        }
        let y = pre.iter().map(|&v| self.activation.apply(v)).collect();
        Ok((
            y,
            SteCache {
                x: x.to_vec(),
                pre,
                in_range,
            },
        ))
    }

    /// Straight-through gradients for the latent weights and bias.
    ///
    /// The rounding step passes gradients unchanged where the pre-clamp code
    /// was representable and blocks them where it clamped; scale and
    /// zero-point are treated as constants within the step.
    pub fn ste_backward(&self, cache: &SteCache, d_y: &[f32]) -> (Vec<f32>, Vec<f32>) {
        assert_eq!(d_y.len(), self.rows, "output gradient length mismatch");
        let g = self.group_size;
        let mut d_latent = vec![0.0f32; self.latent.len()];
        let mut d_bias = vec![0.0f32; self.rows];
        for r in 0..self.rows {
            let d_pre = d_y[r] * self.activation.grad(cache.pre[r]);
            if d_pre == 0.0 {
                continue;
            }
            d_bias[r] = d_pre;
            for slot in self.row_index[r] as usize..self.row_index[r + 1] as usize {
                let col0 = self.group_cols[slot] as usize * g;
                for i in 0..g {
                    if cache.in_range[slot * g + i] {
                        d_latent[slot * g + i] = d_pre * cache.x[col0 + i];
                    }
                }
            }
        }
        (d_latent, d_bias)
    }
}

/// Mean per-sample MSE of the quantized block against precomputed targets.
fn block_loss(block: &LatentBlock, xs: &[DenseVector], ts: &[DenseVector]) -> Result<f64> {
    let mut total = 0.0f64;
    for (x, t) in xs.iter().zip(ts) {
        let (y, _) = block.ste_forward(&x.data)?;
        for (a, b) in y.iter().zip(&t.data) {
            total += ((a - b) as f64).powi(2);
        }
    }
    Ok(total / (xs.len() as f64 * block.rows as f64))
}

/// Block-wise recovery: each block's latent weights and bias are tuned to
/// reproduce the FP block's outputs on FP-propagated calibration inputs,
/// then re-quantized into fresh codes and parameters.
pub fn bqpo(
    model: &ToyModel,
    layers: &[GqsLayer],
    calib: &CalibrationSet,
    cfg: &TuneConfig,
) -> Result<(Vec<GqsLayer>, TuneReport)> {
    let t0 = Instant::now();
    cfg.validate()?;
    check_model_layers(model, layers)?;
    check_calib(model, calib)?;
    let initial_mse = end_to_end_mse(model, layers, calib)?;
    if cfg.epochs_bqpo == 0 {
        return Ok((
            layers.to_vec(),
            TuneReport {
                trace: Vec::new(),
                initial_mse,
                final_mse: initial_mse,
                wall_ms: wall_ms(t0),
                scale_clamp_warnings: 0,
            },
        ));
    }

    // Per-block inputs and targets under FP propagation, gathered once.
    let n_blocks = model.blocks.len();
    let n = calib.samples.len();
    let mut inputs: Vec<Vec<DenseVector>> = vec![Vec::with_capacity(n); n_blocks];
    let mut targets: Vec<Vec<DenseVector>> = vec![Vec::with_capacity(n); n_blocks];
    for sample in &calib.samples {
        let (final_y, block_inputs) = model.forward_with_activations(sample)?;
        for k in 0..n_blocks {
            inputs[k].push(block_inputs[k].clone());
            targets[k].push(if k + 1 < n_blocks {
                block_inputs[k + 1].clone()
            } else {
                final_y.clone()
            });
        }
    }

    let batches = n.div_ceil(cfg.batch_size);
    let mut trace = Vec::new();
    let mut tuned = Vec::with_capacity(n_blocks);
    for (k, layer) in layers.iter().enumerate() {
        let mut block = LatentBlock::from_layer(layer, model.blocks[k].activation)?;
        let out_dim = block.rows;
        let mut adam_w = Adam::new(block.latent.len(), cfg);
        let mut adam_b = Adam::new(block.bias.len(), cfg);
        let mut best_loss = block_loss(&block, &inputs[k], &targets[k])?;
        let mut best = (block.latent.clone(), block.bias.data.clone());
        for epoch in 0..cfg.epochs_bqpo {
            for b in 0..batches {
                let lo = b * cfg.batch_size;
                let hi = (lo + cfg.batch_size).min(n);
                let bsz = (hi - lo) as f32;
                let mut gw = vec![0.0f32; block.latent.len()];
                let mut gb = vec![0.0f32; block.bias.len()];
                let mut loss = 0.0f64;
                for s in lo..hi {
                    let (y, cache) = block.ste_forward(&inputs[k][s].data)?;
                    let t = &targets[k][s].data;
                    let mut d_y = vec![0.0f32; out_dim];
                    for r in 0..out_dim {
                        let diff = y[r] - t[r];
                        loss += (diff as f64).powi(2);
                        d_y[r] = 2.0 * diff / (out_dim as f32 * bsz);
                    }
                    let (dw, db) = block.ste_backward(&cache, &d_y);
                    for (a, d) in gw.iter_mut().zip(&dw) {
                        *a += d;
                    }
                    for (a, d) in gb.iter_mut().zip(&db) {
                        *a += d;
                    }
                }
                let loss = loss / (out_dim as f64 * bsz as f64);
                if !loss.is_finite() {
                    return Err(Error::Tuning(format!(
                        "block {k} loss diverged at epoch {epoch}, batch {b}"
                    )));
                }
                adam_w.step(&mut block.latent, &gw);
                adam_b.step(&mut block.bias.data, &gb);
                trace.push(TraceRow {
                    stage: Stage::Bqpo,
                    block: Some(k),
                    epoch,
                    batch: b,
                    loss,
                });
            }
            let epoch_loss = block_loss(&block, &inputs[k], &targets[k])?;
            if epoch_loss < best_loss {
                best_loss = epoch_loss;
                best = (block.latent.clone(), block.bias.data.clone());
            }
        }
        block.latent = best.0;
        block.bias = DenseVector::from_vec(best.1);
        tuned.push(block.to_layer()?);
    }
    let final_mse = end_to_end_mse(model, &tuned, calib)?;
    Ok((
        tuned,
        TuneReport {
            trace,
            initial_mse,
            final_mse,
            wall_ms: wall_ms(t0),
            scale_clamp_warnings: 0,
        },
    ))
}

// ---------------------------------------------------------------------------
// E2E-OQP: end-to-end scale/zero optimization over frozen codes
// ---------------------------------------------------------------------------

/// Immutable per-layer state during E2E-OQP: topology, unpacked codes, and
/// the block activation.
struct FrozenLayer {
    rows: usize,
    cols: usize,
    group_size: usize,
    row_index: Vec<u32>,
    group_cols: Vec<u16>,
    codes: Vec<u8>,
    activation: Activation,
}

/// The trainable parameters of one layer during E2E-OQP.
#[derive(Clone)]
struct E2eParams {
    scales: Vec<f32>,
    zeros: Vec<f32>,
    bias: Vec<f32>,
}

/// Gradients with respect to one layer's scales, zeros, and bias.
#[derive(Debug, Clone)]
pub struct E2eGradients {
    pub d_scales: Vec<f32>,
    pub d_zeros: Vec<f32>,
    pub d_bias: Vec<f32>,
}

fn freeze_layers(model: &ToyModel, layers: &[GqsLayer]) -> Result<(Vec<FrozenLayer>, Vec<E2eParams>)> {
    let mut frozen = Vec::with_capacity(layers.len());
    let mut params = Vec::with_capacity(layers.len());
    for (layer, block) in layers.iter().zip(&model.blocks) {
        let codes = unpack_codes(&layer.packed_codes, layer.nnzg() * layer.group_size, layer.bits)?;
        frozen.push(FrozenLayer {
            rows: layer.rows,
            cols: layer.cols,
            group_size: layer.group_size,
            row_index: layer.row_index.clone(),
            group_cols: layer.group_cols.clone(),
            codes,
            activation: block.activation,
        });
        params.push(E2eParams {
            scales: layer.scales.clone(),
            zeros: layer.zeros.clone(),
            bias: match &layer.bias {
                Some(b) => b.data.clone(),
                None => vec![0.0; layer.rows],
            },
        });
    }
    Ok((frozen, params))
}

/// Forward pass caching each block's input and pre-activation.
fn e2e_forward(
    frozen: &[FrozenLayer],
    params: &[E2eParams],
    x: &[f32],
) -> (Vec<Vec<f32>>, Vec<Vec<f32>>, Vec<f32>) {
    let mut xs = Vec::with_capacity(frozen.len());
    let mut pres = Vec::with_capacity(frozen.len());
    let mut cur = x.to_vec();
    for (layer, p) in frozen.iter().zip(params) {
        let g = layer.group_size;
        let mut pre = vec![0.0f32; layer.rows];
        for (r, out) in pre.iter_mut().enumerate() {
            let mut acc = 0.0f32;
            for slot in layer.row_index[r] as usize..layer.row_index[r + 1] as usize {
                let scale = p.scales[slot];
                let zero = p.zeros[slot];
                let col0 = layer.group_cols[slot] as usize * g;
                for i in 0..g {
                    let w = (layer.codes[slot * g + i] as f32 - zero) * scale;
                    acc += w * cur[col0 + i];
                }
            }
            *out = acc + p.bias[r];
        }
        let y: Vec<f32> = pre.iter().map(|&v| layer.activation.apply(v)).collect();
        xs.push(cur);
        pres.push(pre);
        cur = y;
    }
    (xs, pres, cur)
}

/// Backward pass from an output gradient, accumulating into `grads`.
fn e2e_backward(
    frozen: &[FrozenLayer],
    params: &[E2eParams],
    xs: &[Vec<f32>],
    pres: &[Vec<f32>],
    d_out: Vec<f32>,
    grads: &mut [E2eGradients],
) {
    let mut d_y = d_out;
    for k in (0..frozen.len()).rev() {
        let layer = &frozen[k];
        let p = &params[k];
        let g = layer.group_size;
        let x = &xs[k];
        let mut d_x = vec![0.0f32; layer.cols];
        for r in 0..layer.rows {
            let d_pre = d_y[r] * layer.activation.grad(pres[k][r]);
            if d_pre == 0.0 {
                continue;
            }
            grads[k].d_bias[r] += d_pre;
            for slot in layer.row_index[r] as usize..layer.row_index[r + 1] as usize {
                let scale = p.scales[slot];
                let zero = p.zeros[slot];
                let col0 = layer.group_cols[slot] as usize * g;
                let mut ds = 0.0f32;
                let mut dz = 0.0f32;
                for i in 0..g {
                    let c = layer.codes[slot * g + i] as f32;
                    let xv = x[col0 + i];
                    ds += d_pre * xv * (c - zero);
                    dz += d_pre * xv * (-scale);
                    d_x[col0 + i] += d_pre * (c - zero) * scale;
                }
                grads[k].d_scales[slot] += ds;
                grads[k].d_zeros[slot] += dz;
            }
        }
        d_y = d_x;
    }
}

fn zeroed_gradients(frozen: &[FrozenLayer], params: &[E2eParams]) -> Vec<E2eGradients> {
    frozen
        .iter()
        .zip(params)
        .map(|(layer, p)| E2eGradients {
            d_scales: vec![0.0; p.scales.len()],
            d_zeros: vec![0.0; p.zeros.len()],
            d_bias: vec![0.0; layer.rows],
        })
        .collect()
}

fn e2e_full_loss(
    frozen: &[FrozenLayer],
    params: &[E2eParams],
    calib: &CalibrationSet,
    targets: &[DenseVector],
) -> f64 {
    let out_dim = targets[0].len();
    let mut total = 0.0f64;
    for (sample, t) in calib.samples.iter().zip(targets) {
        let (_, _, y) = e2e_forward(frozen, params, &sample.data);
        for (a, b) in y.iter().zip(&t.data) {
            total += ((a - b) as f64).powi(2);
        }
    }
    total / (calib.samples.len() as f64 * out_dim as f64)
}

/// Loss and analytic gradients of the end-to-end objective at the given
/// layer parameters, averaged over `samples`. The FP model provides both
/// the targets and the activations; integer codes stay fixed, so the loss
/// is smooth in every trainable parameter.
pub fn e2e_loss_and_gradients(
    model: &ToyModel,
    layers: &[GqsLayer],
    samples: &[DenseVector],
) -> Result<(f64, Vec<E2eGradients>)> {
    check_model_layers(model, layers)?;
    if samples.is_empty() {
        return Err(Error::Domain("need at least one sample".into()));
    }
    let (frozen, params) = freeze_layers(model, layers)?;
    let out_dim = model.output_dim();
    let n = samples.len() as f32;
    let mut grads = zeroed_gradients(&frozen, &params);
    let mut loss = 0.0f64;
    for sample in samples {
        let target = model.forward(sample)?;
        let (xs, pres, y) = e2e_forward(&frozen, &params, &sample.data);
        let mut d_out = vec![0.0f32; out_dim];
        for r in 0..out_dim {
            let diff = y[r] - target.data[r];
            loss += (diff as f64).powi(2);
            d_out[r] = 2.0 * diff / (out_dim as f32 * n);
        }
        e2e_backward(&frozen, &params, &xs, &pres, d_out, &mut grads);
    }
    Ok((loss / (out_dim as f64 * samples.len() as f64), grads))
}

/// End-to-end recovery over frozen codes: scales, zero-points, and biases
/// are trained against the FP model's final outputs; zero-points drift
/// continuously (no re-rounding), and any scale pushed below the positivity
/// floor is clamped there and counted in the report.
pub fn e2e_oqp(
    model: &ToyModel,
    layers: &[GqsLayer],
    calib: &CalibrationSet,
    cfg: &TuneConfig,
) -> Result<(Vec<GqsLayer>, TuneReport)> {
    let t0 = Instant::now();
    cfg.validate()?;
    check_model_layers(model, layers)?;
    check_calib(model, calib)?;
    let initial_mse = end_to_end_mse(model, layers, calib)?;
    if cfg.epochs_e2e == 0 {
        return Ok((
            layers.to_vec(),
            TuneReport {
                trace: Vec::new(),
                initial_mse,
                final_mse: initial_mse,
                wall_ms: wall_ms(t0),
                scale_clamp_warnings: 0,
            },
        ));
    }

    let targets: Vec<DenseVector> = calib
        .samples
        .iter()
        .map(|s| model.forward(s))
        .collect::<Result<_>>()?;
    let (frozen, mut params) = freeze_layers(model, layers)?;
    let out_dim = model.output_dim();
    let n = calib.samples.len();
    let batches = n.div_ceil(cfg.batch_size);
    let mut adams: Vec<(Adam, Adam, Adam)> = params
        .iter()
        .map(|p| {
            (
                Adam::new(p.scales.len(), cfg),
                Adam::new(p.zeros.len(), cfg),
                Adam::new(p.bias.len(), cfg),
            )
        })
        .collect();
    let mut best_loss = e2e_full_loss(&frozen, &params, calib, &targets);
    let mut best = params.clone();
    let mut warnings = 0usize;
    let mut trace = Vec::new();
    for epoch in 0..cfg.epochs_e2e {
        for b in 0..batches {
            let lo = b * cfg.batch_size;
            let hi = (lo + cfg.batch_size).min(n);
            let bsz = (hi - lo) as f32;
            let mut grads = zeroed_gradients(&frozen, &params);
            let mut loss = 0.0f64;
            for s in lo..hi {
                let (xs, pres, y) = e2e_forward(&frozen, &params, &calib.samples[s].data);
                let mut d_out = vec![0.0f32; out_dim];
                for r in 0..out_dim {
                    let diff = y[r] - targets[s].data[r];
                    loss += (diff as f64).powi(2);
                    d_out[r] = 2.0 * diff / (out_dim as f32 * bsz);
                }
                e2e_backward(&frozen, &params, &xs, &pres, d_out, &mut grads);
            }
            let loss = loss / (out_dim as f64 * bsz as f64);
            if !loss.is_finite() {
                return Err(Error::Tuning(format!(
                    "end-to-end loss diverged at epoch {epoch}, batch {b}"
                )));
            }
            for k in 0..params.len() {
                let p = &mut params[k];
                let (adam_s, adam_z, adam_b) = &mut adams[k];
                adam_s.step(&mut p.scales, &grads[k].d_scales);
                adam_z.step(&mut p.zeros, &grads[k].d_zeros);
                adam_b.step(&mut p.bias, &grads[k].d_bias);
                for s in p.scales.iter_mut() {
                    if *s < SCALE_EPS {
                        *s = SCALE_EPS;
                        warnings += 1;
                    }
                }
            }
            trace.push(TraceRow {
                stage: Stage::E2e,
                block: None,
                epoch,
                batch: b,
                loss,
            });
        }
        let epoch_loss = e2e_full_loss(&frozen, &params, calib, &targets);
        if epoch_loss < best_loss {
            best_loss = epoch_loss;
            best = params.clone();
        }
    }
    params = best;
    let mut tuned = layers.to_vec();
    for (layer, p) in tuned.iter_mut().zip(&params) {
        layer.scales = p.scales.clone();
        layer.zeros = p.zeros.clone();
        layer.bias = Some(DenseVector::from_vec(p.bias.clone()));
    }
    let final_mse = end_to_end_mse(model, &tuned, calib)?;
    Ok((
        tuned,
        TuneReport {
            trace,
            initial_mse,
            final_mse,
            wall_ms: wall_ms(t0),
            scale_clamp_warnings: warnings,
        },
    ))
}
