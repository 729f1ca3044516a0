//! Dense FP32 building blocks: matrices, vectors, toy MLP models, and the
//! calibration sets every downstream stage consumes.
//!
//! Everything here is deliberately plain. The dense GEMV is the numerical
//! oracle the sparse engine is checked against, so it accumulates strictly
//! left to right and never reorders sums.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// Row-major FP32 matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f32>,
}

impl DenseMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        DenseMatrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "matrix data length {} does not match {rows}x{cols}",
                data.len()
            )));
        }
        Ok(DenseMatrix { rows, cols, data })
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f32 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f32) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f32] {
        &self.data[r * self.cols..][..self.cols]
    }
}

/// FP32 vector; length is implied by the backing storage.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseVector {
    pub data: Vec<f32>,
}

impl DenseVector {
    pub fn zeros(n: usize) -> Self {
        DenseVector { data: vec![0.0; n] }
    }

    pub fn from_vec(data: Vec<f32>) -> Self {
        DenseVector { data }
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

/// y = W x with strict left-to-right accumulation per row.
pub fn dense_gemv(w: &DenseMatrix, x: &DenseVector) -> Result<DenseVector> {
    if w.cols != x.len() {
        return Err(Error::Shape(format!(
            "gemv: matrix is {}x{} but vector has length {}",
            w.rows,
            w.cols,
            x.len()
        )));
    }
    let mut y = vec![0.0f32; w.rows];
    for (r, out) in y.iter_mut().enumerate() {
        let row = w.row(r);
        let mut acc = 0.0f32;
        for (wv, xv) in row.iter().zip(&x.data) {
            acc += wv * xv;
        }
        *out = acc;
    }
    Ok(DenseVector::from_vec(y))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    ReLU,
    Identity,
}

impl Activation {
    #[inline]
    pub fn apply(&self, v: f32) -> f32 {
        match self {
            Activation::ReLU => v.max(0.0),
            Activation::Identity => v,
        }
    }

    /// Derivative used in backward passes; ReLU masks non-positive pre-activations.
    #[inline]
    pub fn grad(&self, pre: f32) -> f32 {
        match self {
            Activation::ReLU => {
                if pre > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }
}

/// One linear block of the toy model: y = act(W x + b).
#[derive(Debug, Clone)]
pub struct Block {
    pub weight: DenseMatrix,
    pub bias: DenseVector,
    pub activation: Activation,
}

impl Block {
    pub fn forward(&self, x: &DenseVector) -> Result<DenseVector> {
        let mut y = dense_gemv(&self.weight, x)?;
        for (v, b) in y.data.iter_mut().zip(&self.bias.data) {
            *v = self.activation.apply(*v + b);
        }
        Ok(y)
    }
}

/// Small MLP stand-in for a transformer stack: a chain of linear blocks with
/// ReLU between them and an Identity head.
#[derive(Debug, Clone)]
pub struct ToyModel {
    pub blocks: Vec<Block>,
}

/// Weight scale of synthetic toy models. Trained networks sit at a few
/// hundredths, not unit variance, and the recovery stages inherit their
/// fixed learning rate from that regime.
const TOY_WEIGHT_STD: f32 = 0.02;
/// Fraction of weight variance carried by a shared low-rank factor, so that
/// layer outputs are correlated the way trained features are.
const TOY_STRUCTURE_FRACTION: f32 = 0.75;
/// Bias std as a fraction of the pre-activation std.
const TOY_BIAS_FRACTION: f32 = 0.25;

impl ToyModel {
    pub fn new(blocks: Vec<Block>) -> Result<Self> {
        if blocks.is_empty() {
            return Err(Error::Domain("model needs at least one block".into()));
        }
        for (i, pair) in blocks.windows(2).enumerate() {
            if pair[0].weight.rows != pair[1].weight.cols {
                return Err(Error::Shape(format!(
                    "block {} outputs {} values but block {} expects {}",
                    i,
                    pair[0].weight.rows,
                    i + 1,
                    pair[1].weight.cols
                )));
            }
        }
        Ok(ToyModel { blocks })
    }

    /// Deterministic synthetic model: `n_blocks` blocks, the first mapping
    /// `input_dim -> width`, the rest `width -> width`. Hidden blocks use
    /// ReLU, the last block Identity.
    ///
    /// Weights are low-rank-plus-noise rather than i.i.d. gaussian: each
    /// block draws a rank-`width/8` factor carrying most of the variance,
    /// which gives the cross-channel correlation that pruning recovery
    /// exploits in real networks.
    pub fn synthetic(input_dim: usize, width: usize, n_blocks: usize, seed: u64) -> Result<Self> {
        if input_dim == 0 || width == 0 || n_blocks == 0 {
            return Err(Error::Domain(
                "synthetic model dimensions must be positive".into(),
            ));
        }
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let mut blocks = Vec::with_capacity(n_blocks);
        for b in 0..n_blocks {
            let cols = if b == 0 { input_dim } else { width };
            let rank = (width.min(cols) / 8).max(2);
            let gamma = TOY_WEIGHT_STD * (TOY_STRUCTURE_FRACTION / rank as f32).sqrt();
            let delta = TOY_WEIGHT_STD * (1.0 - TOY_STRUCTURE_FRACTION).sqrt();

            let u: Vec<f32> = (0..width * rank)
                .map(|_| rng.sample::<f32, _>(StandardNormal))
                .collect();
            let v: Vec<f32> = (0..rank * cols)
                .map(|_| rng.sample::<f32, _>(StandardNormal))
                .collect();
            let mut weight = DenseMatrix::zeros(width, cols);
            for r in 0..width {
                for c in 0..cols {
                    let mut structured = 0.0f32;
                    for k in 0..rank {
                        structured += u[r * rank + k] * v[k * cols + c];
                    }
                    let noise: f32 = rng.sample(StandardNormal);
                    weight.set(r, c, gamma * structured + delta * noise);
                }
            }

            let bias_std = TOY_BIAS_FRACTION * TOY_WEIGHT_STD * (cols as f32).sqrt();
            let bias: Vec<f32> = (0..width)
                .map(|_| bias_std * rng.sample::<f32, _>(StandardNormal))
                .collect();

            let activation = if b + 1 == n_blocks {
                Activation::Identity
            } else {
                Activation::ReLU
            };
            blocks.push(Block {
                weight,
                bias: DenseVector::from_vec(bias),
                activation,
            });
        }
        ToyModel::new(blocks)
    }

    pub fn input_dim(&self) -> usize {
        self.blocks[0].weight.cols
    }

    pub fn output_dim(&self) -> usize {
        self.blocks.last().unwrap().weight.rows
    }

    pub fn forward(&self, x: &DenseVector) -> Result<DenseVector> {
        let mut cur = x.clone();
        for block in &self.blocks {
            cur = block.forward(&cur)?;
        }
        Ok(cur)
    }

    /// Forward pass that also returns the input seen by each block;
    /// `activations[b]` feeds block `b`, and the final output comes last.
    pub fn forward_with_activations(&self, x: &DenseVector) -> Result<(DenseVector, Vec<DenseVector>)> {
        let mut activations = Vec::with_capacity(self.blocks.len());
        let mut cur = x.clone();
        for block in &self.blocks {
            activations.push(cur.clone());
            cur = block.forward(&cur)?;
        }
        Ok((cur, activations))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Distribution {
    /// i.i.d. standard normal entries.
    Gaussian,
    /// Standard normal entries scaled per row by 10^u, u ~ U(-1, 1), to
    /// emulate channel imbalance.
    RowScaledGaussian,
}

/// Deterministic synthetic matrix for layer-level experiments.
pub fn make_synthetic(rows: usize, cols: usize, seed: u64, dist: Distribution) -> Result<DenseMatrix> {
    if rows == 0 || cols == 0 {
        return Err(Error::Domain("matrix dimensions must be positive".into()));
    }
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut m = DenseMatrix::zeros(rows, cols);
    match dist {
        Distribution::Gaussian => {
            for v in m.data.iter_mut() {
                *v = rng.sample(StandardNormal);
            }
        }
        Distribution::RowScaledGaussian => {
            for r in 0..rows {
                let scale = 10f32.powf(rng.gen_range(-1.0..1.0));
                for c in 0..cols {
                    let g: f32 = rng.sample(StandardNormal);
                    m.set(r, c, scale * g);
                }
            }
        }
    }
    Ok(m)
}

/// Calibration inputs: i.i.d. standard normal vectors, reproducible from the seed.
#[derive(Debug, Clone)]
pub struct CalibrationSet {
    pub samples: Vec<DenseVector>,
    pub seed: u64,
}

impl CalibrationSet {
    pub fn synthetic(n_samples: usize, dim: usize, seed: u64) -> Result<Self> {
        if n_samples == 0 || dim == 0 {
            return Err(Error::Domain(
                "calibration set needs at least one sample and one dimension".into(),
            ));
        }
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let samples = (0..n_samples)
            .map(|_| {
                DenseVector::from_vec(
                    (0..dim)
                        .map(|_| rng.sample::<f32, _>(StandardNormal))
                        .collect(),
                )
            })
            .collect();
        Ok(CalibrationSet { samples, seed })
    }

    pub fn dim(&self) -> usize {
        self.samples.first().map_or(0, |s| s.len())
    }
}
