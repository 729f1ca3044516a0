//! The one-shot compression pipeline: estimate the Hessian proxy from the
//! activations a layer sees, score its groups, prune the globally least
//! salient fraction, and quantize the survivors.

use crate::dense::{CalibrationSet, DenseMatrix, DenseVector, ToyModel};
use crate::error::{Error, Result};
use crate::gqs::{build_gqs, GqsLayer};
use crate::quant::validate_bits;
use crate::saliency::{estimate_hessian, group_saliency, weight_saliency, DEFAULT_DAMPING};

#[derive(Debug, Clone, Copy)]
pub struct CompressionConfig {
    /// Fraction of groups to prune, in [0, 1).
    pub sparsity: f32,
    pub bits: u8,
    pub group_size: usize,
    pub seed: u64,
    /// Coefficient on the mean diagonal when damping the Hessian proxy.
    pub hessian_damping: f32,
}

impl Default for CompressionConfig {
    fn default() -> Self {
        CompressionConfig {
            sparsity: 0.5,
            bits: 4,
            group_size: 16,
            seed: 0,
            hessian_damping: DEFAULT_DAMPING,
        }
    }
}

impl CompressionConfig {
    fn validate(&self) -> Result<()> {
        validate_bits(self.bits)?;
        if !(0.0..1.0).contains(&self.sparsity) {
            return Err(Error::Domain(format!(
                "sparsity {} must lie in [0, 1)",
                self.sparsity
            )));
        }
        if self.group_size == 0 {
            return Err(Error::Domain("group size must be positive".into()));
        }
        Ok(())
    }
}

/// Keep mask over all groups of a layer: prune exactly
/// floor(sparsity * total) groups with the lowest scores.
///
/// Selection is global across the layer. Ties break lexicographically on
/// (row, group), lower indices pruned first, so the outcome is deterministic.
pub fn select_groups(per_group: &DenseMatrix, sparsity: f32) -> Result<Vec<bool>> {
    if !(0.0..1.0).contains(&sparsity) {
        return Err(Error::Domain(format!(
            "sparsity {sparsity} must lie in [0, 1)"
        )));
    }
    if per_group.data.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("saliency scores must be finite".into()));
    }
    let total = per_group.rows * per_group.cols;
    let prune = (sparsity as f64 * total as f64).floor() as usize;
    let mut order: Vec<u32> = (0..total as u32).collect();
    order.sort_by(|&a, &b| {
        per_group.data[a as usize]
            .total_cmp(&per_group.data[b as usize])
            .then(a.cmp(&b))
    });
    let mut keep = vec![true; total];
    for &idx in &order[..prune] {
        keep[idx as usize] = false;
    }
    Ok(keep)
}

/// Compress one layer given the inputs it sees at calibration time.
pub fn compress_layer(
    w: &DenseMatrix,
    inputs: &[DenseVector],
    cfg: &CompressionConfig,
) -> Result<GqsLayer> {
    cfg.validate()?;
    let hessian = estimate_hessian(inputs, cfg.hessian_damping)?;
    let per_weight = weight_saliency(w, &hessian)?;
    let per_group = group_saliency(&per_weight, cfg.group_size)?;
    let keep = select_groups(&per_group, cfg.sparsity)?;
    build_gqs(w, &keep, cfg.group_size, cfg.bits)
}

/// Compress every block of a toy model, each against the FP activations that
/// actually reach it. Biases ride along uncompressed.
pub fn compress_model(
    model: &ToyModel,
    calib: &CalibrationSet,
    cfg: &CompressionConfig,
) -> Result<Vec<GqsLayer>> {
    cfg.validate()?;
    if calib.dim() != model.input_dim() {
        return Err(Error::Shape(format!(
            "calibration dimension {} does not match model input {}",
            calib.dim(),
            model.input_dim()
        )));
    }
    let n_blocks = model.blocks.len();
    let mut block_inputs: Vec<Vec<DenseVector>> = vec![Vec::new(); n_blocks];
    for sample in &calib.samples {
        let (_, acts) = model.forward_with_activations(sample)?;
        for (b, act) in acts.into_iter().enumerate() {
            block_inputs[b].push(act);
        }
    }
    let mut layers = Vec::with_capacity(n_blocks);
    for (b, block) in model.blocks.iter().enumerate() {
        let mut layer = compress_layer(&block.weight, &block_inputs[b], cfg)?;
        layer.bias = Some(block.bias.clone());
        layers.push(layer);
    }
    Ok(layers)
}
