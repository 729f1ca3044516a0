//! Group-quantized sparse layers for desk-scale experiments.
//!
//! The pipeline turns a dense FP32 layer into a block-sparse, group-quantized
//! one: weights are grouped along rows (1 x G), the least salient groups are
//! pruned using a Hessian proxy built from calibration activations, and the
//! survivors are quantized to a few bits with per-group scale/zero-point.
//! Two recovery stages claw back accuracy (per-block latent-weight tuning,
//! then end-to-end scale/zero tuning), and a multithreaded GEMV engine runs
//! the result without ever materialising the dense matrix.

pub mod compress;
pub mod dense;
pub mod engine;
pub mod error;
pub mod format;
pub mod gqs;
pub mod quant;
pub mod saliency;
pub mod tune;

pub use compress::{compress_layer, compress_model, select_groups, CompressionConfig};
pub use dense::{
    dense_gemv, make_synthetic, Activation, Block, CalibrationSet, DenseMatrix, DenseVector,
    Distribution, ToyModel,
};
pub use engine::{
    bench_gemv, gemv_parallel, gemv_reference, partition_slice_k, partition_stream_k,
    BalanceStats, EngineConfig, Strategy, TimingReport, WorkPartition,
};
pub use error::{Error, FormatError, Result};
pub use format::{deserialize, read_gqs_file, serialize, write_gqs_file};
pub use gqs::{build_gqs, decompress, footprint, footprint_model, FootprintReport, GqsLayer};
pub use quant::{
    compute_qparams, dequantize_group, pack_codes, pack_nibbles, quantize_group, unpack_codes,
    unpack_nibbles, PackedNibbles, QuantParams, QuantizedGroup,
};
pub use saliency::{estimate_hessian, group_saliency, weight_saliency, HessianEstimate, SaliencyMap};
pub use tune::{
    bqpo, e2e_loss_and_gradients, e2e_oqp, end_to_end_mse, E2eGradients, LatentBlock, Stage,
    TraceRow, TuneConfig, TuneReport,
};
