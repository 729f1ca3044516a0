//! Sparse GEMV without materialising the dense matrix: codes are unpacked
//! and dequantized group by group, in registers, straight into the dot
//! product.
//!
//! Two parallel schedules are provided. Slice-K hands each worker a
//! contiguous chunk of rows, which is cheap but stalls on skewed layers
//! where a few rows own most groups. Stream-K splits the flat group array
//! into near-equal ranges regardless of row boundaries; rows cut by a range
//! boundary are patched up afterwards in ascending worker order, so results
//! are deterministic for a fixed worker count.

use std::ops::Range;
use std::time::Instant;

use crate::dense::DenseVector;
use crate::error::{Error, Result};
use crate::gqs::{footprint, GqsLayer};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Strategy {
    /// Single-threaded row walk; the correctness baseline.
    Reference,
    /// Contiguous row chunks per worker.
    SliceK,
    /// Contiguous group-index ranges per worker with a fix-up reduction.
    StreamK,
}

impl std::fmt::Display for Strategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Strategy::Reference => write!(f, "reference"),
            Strategy::SliceK => write!(f, "slicek"),
            Strategy::StreamK => write!(f, "streamk"),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct EngineConfig {
    pub workers: usize,
    pub strategy: Strategy,
    /// Rows per inner tile in the Slice-K worker loop.
    pub tile_rows: usize,
}

impl Default for EngineConfig {
    fn default() -> Self {
        EngineConfig {
            workers: 4,
            strategy: Strategy::StreamK,
            tile_rows: 64,
        }
    }
}

/// Per-worker work assignment plus the group counts it implies.
#[derive(Debug, Clone)]
pub struct WorkPartition {
    pub strategy: Strategy,
    /// Row ranges for Slice-K, global group-index ranges for Stream-K.
    pub ranges: Vec<Range<usize>>,
    pub group_counts: Vec<usize>,
}

/// Load-balance summary of a partition.
#[derive(Debug, Clone, PartialEq)]
pub struct BalanceStats {
    pub per_worker: Vec<usize>,
    /// max / mean over workers; 1.0 is perfectly balanced.
    pub imbalance: f64,
    /// max / min over workers, with min clamped to 1 group.
    pub straggler_ratio: f64,
}

impl BalanceStats {
    fn from_counts(per_worker: Vec<usize>) -> Self {
        let total: usize = per_worker.iter().sum();
        let max = per_worker.iter().copied().max().unwrap_or(0);
        let min = per_worker.iter().copied().min().unwrap_or(0);
        let (imbalance, straggler_ratio) = if total == 0 {
            (1.0, 1.0)
        } else {
            let mean = total as f64 / per_worker.len() as f64;
            (max as f64 / mean, max as f64 / min.max(1) as f64)
        };
        BalanceStats {
            per_worker,
            imbalance,
            straggler_ratio,
        }
    }
}

impl WorkPartition {
    pub fn balance_stats(&self) -> BalanceStats {
        BalanceStats::from_counts(self.group_counts.clone())
    }
}

fn check_workers(p: usize) -> Result<()> {
    if p == 0 {
        return Err(Error::Domain("worker count must be positive".into()));
    }
    Ok(())
}

/// Rows split into P contiguous chunks of ceil(rows / P); the tail chunk may
/// be short or empty.
pub fn partition_slice_k(layer: &GqsLayer, workers: usize) -> Result<WorkPartition> {
    check_workers(workers)?;
    let chunk = layer.rows.div_ceil(workers);
    let mut ranges = Vec::with_capacity(workers);
    let mut group_counts = Vec::with_capacity(workers);
    for w in 0..workers {
        let lo = (w * chunk).min(layer.rows);
        let hi = ((w + 1) * chunk).min(layer.rows);
        group_counts.push((layer.row_index[hi] - layer.row_index[lo]) as usize);
        ranges.push(lo..hi);
    }
    Ok(WorkPartition {
        strategy: Strategy::SliceK,
        ranges,
        group_counts,
    })
}

/// The flat group array split into P contiguous ranges whose sizes differ by
/// at most one group.
pub fn partition_stream_k(layer: &GqsLayer, workers: usize) -> Result<WorkPartition> {
    check_workers(workers)?;
    let nnzg = layer.nnzg();
    let base = nnzg / workers;
    let rem = nnzg % workers;
    let mut ranges = Vec::with_capacity(workers);
    let mut group_counts = Vec::with_capacity(workers);
    let mut lo = 0usize;
    for w in 0..workers {
        let size = base + usize::from(w < rem);
        ranges.push(lo..lo + size);
        group_counts.push(size);
        lo += size;
    }
    Ok(WorkPartition {
        strategy: Strategy::StreamK,
        ranges,
        group_counts,
    })
}

/// Row owning global group index `g` (bisection over the row offsets).
#[inline]
fn row_of_group(layer: &GqsLayer, g: usize) -> usize {
    layer.row_index.partition_point(|&v| v as usize <= g) - 1
}

/// Dot-product contribution of group slots [lo, hi), accumulated left to
/// right. All execution paths funnel through here so that single-worker runs
/// are bit-identical to the reference walk.
#[inline]
fn accumulate_slots(layer: &GqsLayer, x: &[f32], lo: usize, hi: usize) -> f32 {
    let g = layer.group_size;
    let mut acc = 0.0f32;
    if layer.bits == 4 && g % 2 == 0 {
        // two codes per byte, group start is byte-aligned because G is even
        for slot in lo..hi {
            let scale = layer.scales[slot];
            let zero = layer.zeros[slot];
            let col0 = layer.group_cols[slot] as usize * g;
            let bytes = &layer.packed_codes[slot * g / 2..][..g / 2];
            let xs = &x[col0..][..g];
            for (k, &byte) in bytes.iter().enumerate() {
                let w0 = ((byte & 0xF) as f32 - zero) * scale;
                acc += w0 * xs[2 * k];
                let w1 = ((byte >> 4) as f32 - zero) * scale;
                acc += w1 * xs[2 * k + 1];
            }
        }
    } else {
        for slot in lo..hi {
            let scale = layer.scales[slot];
            let zero = layer.zeros[slot];
            let col0 = layer.group_cols[slot] as usize * g;
            let base = slot * g;
            let xs = &x[col0..][..g];
            for (i, &xv) in xs.iter().enumerate() {
                let code = crate::quant::read_code(&layer.packed_codes, base + i, layer.bits);
                let wv = (code as f32 - zero) * scale;
                acc += wv * xv;
            }
        }
    }
    acc
}

/// Single-threaded GEMV over the sparse layer: y = W_hat x + bias.
///
/// Assumes a validated layer. Each row accumulates its kept groups left to
/// right; pruned groups contribute nothing, and empty rows return exactly
/// their bias entry.
pub fn gemv_reference(layer: &GqsLayer, x: &DenseVector) -> Result<DenseVector> {
    if x.len() != layer.cols {
        return Err(Error::Shape(format!(
            "input has length {}, layer expects {}",
            x.len(),
            layer.cols
        )));
    }
    let mut y = vec![0.0f32; layer.rows];
    for (r, out) in y.iter_mut().enumerate() {
        let lo = layer.row_index[r] as usize;
        let hi = layer.row_index[r + 1] as usize;
        *out = accumulate_slots(layer, &x.data, lo, hi);
    }
    if let Some(bias) = &layer.bias {
        for (out, &b) in y.iter_mut().zip(&bias.data) {
            *out += b;
        }
    }
    Ok(DenseVector::from_vec(y))
}

/// Multithreaded GEMV under the configured schedule. Deterministic for a
/// fixed worker count: partials for rows split across Stream-K workers are
/// folded in ascending worker order.
pub fn gemv_parallel(
    layer: &GqsLayer,
    x: &DenseVector,
    cfg: &EngineConfig,
) -> Result<(DenseVector, BalanceStats)> {
    if x.len() != layer.cols {
        return Err(Error::Shape(format!(
            "input has length {}, layer expects {}",
            x.len(),
            layer.cols
        )));
    }
    check_workers(cfg.workers)?;
    match cfg.strategy {
        Strategy::Reference => {
            let y = gemv_reference(layer, x)?;
            let stats = BalanceStats::from_counts(vec![layer.nnzg()]);
            Ok((y, stats))
        }
        Strategy::SliceK => {
            let partition = partition_slice_k(layer, cfg.workers)?;
            let stats = partition.balance_stats();
            let tile = cfg.tile_rows.max(1);
            let chunks: Vec<Vec<f32>> = std::thread::scope(|s| {
                let handles: Vec<_> = partition
                    .ranges
                    .iter()
                    .map(|range| {
                        let range = range.clone();
                        s.spawn(move || {
                            let mut out = Vec::with_capacity(range.len());
                            let mut tile_lo = range.start;
                            while tile_lo < range.end {
                                let tile_hi = (tile_lo + tile).min(range.end);
                                for r in tile_lo..tile_hi {
                                    let lo = layer.row_index[r] as usize;
                                    let hi = layer.row_index[r + 1] as usize;
                                    out.push(accumulate_slots(layer, &x.data, lo, hi));
                                }
                                tile_lo = tile_hi;
                            }
                            out
                        })
                    })
                    .collect();
                handles.into_iter().map(|h| h.join().unwrap()).collect()
            });
            let mut y = vec![0.0f32; layer.rows];
            for (range, chunk) in partition.ranges.iter().zip(chunks) {
                y[range.clone()].copy_from_slice(&chunk);
            }
            add_bias(layer, &mut y);
            Ok((DenseVector::from_vec(y), stats))
        }
        Strategy::StreamK => {
            let partition = partition_stream_k(layer, cfg.workers)?;
            let stats = partition.balance_stats();
            let partials: Vec<Vec<(usize, f32)>> = std::thread::scope(|s| {
                let handles: Vec<_> = partition
                    .ranges
                    .iter()
                    .map(|range| {
                        let range = range.clone();
                        s.spawn(move || {
                            let mut out = Vec::new();
                            let mut g = range.start;
                            while g < range.end {
                                let row = row_of_group(layer, g);
                                let row_end = layer.row_index[row + 1] as usize;
                                let seg_end = row_end.min(range.end);
                                out.push((row, accumulate_slots(layer, &x.data, g, seg_end)));
                                g = seg_end;
                            }
                            out
                        })
                    })
                    .collect();
                handles.into_iter().map(|h| h.join().unwrap()).collect()
            });
            let mut y = vec![0.0f32; layer.rows];
            let mut touched = vec![false; layer.rows];
            for worker in &partials {
                for &(r, p) in worker {
                    if touched[r] {
                        y[r] += p;
                    } else {
                        y[r] = p;
                        touched[r] = true;
                    }
                }
            }
            add_bias(layer, &mut y);
            Ok((DenseVector::from_vec(y), stats))
        }
    }
}

fn add_bias(layer: &GqsLayer, y: &mut [f32]) {
    if let Some(bias) = &layer.bias {
        for (out, &b) in y.iter_mut().zip(&bias.data) {
            *out += b;
        }
    }
}

/// GEMV timing over `reps` runs after a short warmup.
#[derive(Debug, Clone)]
pub struct TimingReport {
    pub median_ns: u64,
    pub p10_ns: u64,
    pub p90_ns: u64,
    pub reps: usize,
    /// Serialized payload bytes of the structures the kernel reads.
    pub bytes_touched: u64,
    /// Effective bandwidth implied by the median time.
    pub gbps: f64,
    pub stats: BalanceStats,
}

fn percentile(sorted: &[u64], q: f64) -> u64 {
    let idx = ((sorted.len() - 1) as f64 * q).round() as usize;
    sorted[idx]
}

/// Time `gemv_parallel` on a monotonic clock; the warmup rep is discarded.
pub fn bench_gemv(
    layer: &GqsLayer,
    x: &DenseVector,
    cfg: &EngineConfig,
    reps: usize,
) -> Result<TimingReport> {
    if reps == 0 {
        return Err(Error::Domain("need at least one timed rep".into()));
    }
    let warmup = (reps / 10).max(1);
    let mut stats = None;
    for _ in 0..warmup {
        stats = Some(gemv_parallel(layer, x, cfg)?.1);
    }
    let mut times = Vec::with_capacity(reps);
    for _ in 0..reps {
        let start = Instant::now();
        let (_, s) = gemv_parallel(layer, x, cfg)?;
        times.push(start.elapsed().as_nanos() as u64);
        stats = Some(s);
    }
    times.sort_unstable();
    let median_ns = percentile(&times, 0.5);
    let bytes_touched = footprint(layer)?.payload_bits / 8;
    let gbps = if median_ns == 0 {
        f64::INFINITY
    } else {
        bytes_touched as f64 / median_ns as f64 // bytes/ns == GB/s
    };
    Ok(TimingReport {
        median_ns,
        p10_ns: percentile(&times, 0.1),
        p90_ns: percentile(&times, 0.9),
        reps,
        bytes_touched,
        gbps,
        stats: stats.unwrap(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dense::{dense_gemv, make_synthetic, Distribution};
    use crate::gqs::{build_gqs, decompress};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    fn random_layer(
        rows: usize,
        cols: usize,
        group_size: usize,
        bits: u8,
        sparsity: f64,
        bias: bool,
        seed: u64,
    ) -> GqsLayer {
        let w = make_synthetic(rows, cols, seed, Distribution::Gaussian).unwrap();
        let gpr = cols / group_size;
        let mut rng = ChaCha12Rng::seed_from_u64(seed ^ 0x9e3779b97f4a7c15);
        let keep: Vec<bool> = (0..rows * gpr).map(|_| rng.gen::<f64>() >= sparsity).collect();
        let mut layer = build_gqs(&w, &keep, group_size, bits).unwrap();
        if bias {
            let b: Vec<f32> = (0..rows).map(|_| rng.gen_range(-1.0..1.0)).collect();
            layer.bias = Some(DenseVector::from_vec(b));
        }
        layer
    }

    fn random_input(cols: usize, seed: u64) -> DenseVector {
        let m = make_synthetic(1, cols, seed, Distribution::Gaussian).unwrap();
        DenseVector::from_vec(m.data)
    }

    /// Dense oracle: decompress, multiply, add bias.
    fn dense_oracle(layer: &GqsLayer, x: &DenseVector) -> DenseVector {
        let w = decompress(layer).unwrap();
        let mut y = dense_gemv(&w, x).unwrap();
        if let Some(bias) = &layer.bias {
            for (v, &b) in y.data.iter_mut().zip(&bias.data) {
                *v += b;
            }
        }
        y
    }

    fn assert_close(actual: &DenseVector, reference: &DenseVector, tol: f64) {
        assert_eq!(actual.len(), reference.len());
        let scale = reference
            .data
            .iter()
            .map(|v| v.abs() as f64)
            .fold(1.0f64, f64::max);
        for i in 0..actual.len() {
            let diff = (actual.data[i] - reference.data[i]).abs() as f64;
            assert!(
                diff <= tol * scale,
                "element {i}: {} vs {} (diff {diff}, scale {scale})",
                actual.data[i],
                reference.data[i]
            );
        }
    }

    #[test]
    fn reference_matches_dense_oracle() {
        let mut case = 0u64;
        for &(rows, cols, g) in &[(5usize, 16usize, 4usize), (8, 24, 3), (16, 64, 16), (3, 8, 1)] {
            for &bits in &[2u8, 3, 4, 8] {
                for &sparsity in &[0.0f64, 0.4, 0.9] {
                    case += 1;
                    let layer = random_layer(rows, cols, g, bits, sparsity, case % 2 == 0, case);
                    let x = random_input(cols, case ^ 0xff);
                    let y = gemv_reference(&layer, &x).unwrap();
                    assert_close(&y, &dense_oracle(&layer, &x), 1e-4);
                }
            }
        }
    }

    #[test]
    fn all_pruned_layer_returns_bias() {
        let w = make_synthetic(4, 8, 1, Distribution::Gaussian).unwrap();
        let mut layer = build_gqs(&w, &[false; 8], 4, 4).unwrap();
        let bias = DenseVector::from_vec(vec![0.5, -1.5, 0.0, 3.25]);
        layer.bias = Some(bias.clone());
        let x = random_input(8, 1);
        let y = gemv_reference(&layer, &x).unwrap();
        assert_eq!(y.data, bias.data);
    }

    #[test]
    fn empty_rows_pass_bias_through_exactly() {
        let w = make_synthetic(4, 8, 2, Distribution::Gaussian).unwrap();
        // row 1 fully pruned
        let keep = [true, true, true, true, false, false, false, false,
                    true, false, true, true, true, true, true, true];
        let mut layer = build_gqs(&w, &keep, 2, 4).unwrap();
        layer.bias = Some(DenseVector::from_vec(vec![1.0, 2.5, -0.125, 0.0]));
        let x = random_input(8, 2);
        let y = gemv_reference(&layer, &x).unwrap();
        assert_eq!(y.data[1], 2.5);
        for cfg in [
            EngineConfig { workers: 3, strategy: Strategy::StreamK, tile_rows: 2 },
            EngineConfig { workers: 3, strategy: Strategy::SliceK, tile_rows: 2 },
        ] {
            let (yp, _) = gemv_parallel(&layer, &x, &cfg).unwrap();
            assert_eq!(yp.data[1], 2.5);
        }
    }

    #[test]
    fn rejects_mismatched_input_and_zero_workers() {
        let layer = random_layer(4, 16, 4, 4, 0.2, false, 7);
        let x = random_input(8, 3);
        assert!(matches!(gemv_reference(&layer, &x), Err(Error::Shape(_))));
        let x = random_input(16, 3);
        let cfg = EngineConfig { workers: 0, ..Default::default() };
        assert!(matches!(
            gemv_parallel(&layer, &x, &cfg),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn single_worker_runs_are_bit_identical_to_reference() {
        for seed in 0..6u64 {
            let layer = random_layer(9, 32, 4, 4, 0.3, seed % 2 == 0, seed);
            let x = random_input(32, seed ^ 0xabc);
            let want = gemv_reference(&layer, &x).unwrap();
            for strategy in [Strategy::Reference, Strategy::SliceK, Strategy::StreamK] {
                let cfg = EngineConfig { workers: 1, strategy, tile_rows: 3 };
                let (got, _) = gemv_parallel(&layer, &x, &cfg).unwrap();
                for (a, b) in got.data.iter().zip(&want.data) {
                    assert_eq!(a.to_bits(), b.to_bits(), "{strategy} diverged");
                }
            }
        }
    }

    #[test]
    fn parallel_strategies_match_reference() {
        for seed in 0..8u64 {
            let (rows, cols, g) = [(16, 64, 16), (7, 48, 8), (32, 32, 4)][seed as usize % 3];
            let layer = random_layer(rows, cols, g, 4, 0.4, true, seed);
            let x = random_input(cols, seed ^ 0x123);
            let want = gemv_reference(&layer, &x).unwrap();
            for workers in [2usize, 3, 4, 8] {
                for strategy in [Strategy::SliceK, Strategy::StreamK] {
                    let cfg = EngineConfig { workers, strategy, tile_rows: 5 };
                    let (got, _) = gemv_parallel(&layer, &x, &cfg).unwrap();
                    assert_close(&got, &want, 1e-4);
                }
            }
        }
    }

    #[test]
    fn parallel_results_are_deterministic_per_worker_count() {
        let layer = random_layer(16, 64, 8, 4, 0.5, true, 3);
        let x = random_input(64, 4);
        for strategy in [Strategy::SliceK, Strategy::StreamK] {
            let cfg = EngineConfig { workers: 4, strategy, tile_rows: 4 };
            let (a, _) = gemv_parallel(&layer, &x, &cfg).unwrap();
            let (b, _) = gemv_parallel(&layer, &x, &cfg).unwrap();
            assert_eq!(a.data, b.data);
        }
    }

    #[test]
    fn slice_k_chunks_rows_evenly() {
        let layer = random_layer(10, 16, 4, 4, 0.0, false, 1);
        let p = partition_slice_k(&layer, 3).unwrap();
        assert_eq!(p.ranges, vec![0..4, 4..8, 8..10]);
        assert_eq!(p.group_counts.iter().sum::<usize>(), layer.nnzg());
        // more workers than rows: tail ranges are empty
        let p = partition_slice_k(&layer, 16).unwrap();
        assert_eq!(p.ranges.len(), 16);
        assert!(p.ranges[10..].iter().all(|r| r.is_empty()));
    }

    #[test]
    fn stream_k_sizes_differ_by_at_most_one() {
        let layer = random_layer(10, 16, 4, 4, 0.0, false, 1);
        assert_eq!(layer.nnzg(), 40);
        let p = partition_stream_k(&layer, 3).unwrap();
        assert_eq!(p.group_counts, vec![14, 13, 13]);
        assert_eq!(p.ranges[0], 0..14);
        assert_eq!(p.ranges[2], 27..40);
        for workers in 1..12 {
            let layer = random_layer(6, 24, 4, 4, 0.55, false, workers as u64);
            let p = partition_stream_k(&layer, workers).unwrap();
            let max = p.group_counts.iter().max().unwrap();
            let min = p.group_counts.iter().min().unwrap();
            assert!(max - min <= 1, "P={workers}: {:?}", p.group_counts);
            assert_eq!(p.group_counts.iter().sum::<usize>(), layer.nnzg());
        }
    }

    #[test]
    fn balance_stats_capture_skew() {
        let layer = random_layer(8, 16, 4, 4, 0.0, false, 2);
        let single = partition_slice_k(&layer, 1).unwrap().balance_stats();
        assert_eq!(single.imbalance, 1.0);
        assert_eq!(single.straggler_ratio, 1.0);

        // all groups in the first two rows
        let w = make_synthetic(8, 16, 3, Distribution::Gaussian).unwrap();
        let mut keep = vec![false; 8 * 4];
        for slot in keep.iter_mut().take(8) {
            *slot = true;
        }
        let skewed = build_gqs(&w, &keep, 4, 4).unwrap();
        let stats = partition_slice_k(&skewed, 4).unwrap().balance_stats();
        assert_eq!(stats.per_worker, vec![8, 0, 0, 0]);
        assert_eq!(stats.imbalance, 4.0);
        assert_eq!(stats.straggler_ratio, 8.0); // min clamped to 1
        let stats = partition_stream_k(&skewed, 4).unwrap().balance_stats();
        assert_eq!(stats.per_worker, vec![2, 2, 2, 2]);
        assert_eq!(stats.straggler_ratio, 1.0);
    }

    #[test]
    fn bench_reports_consistent_percentiles() {
        let layer = random_layer(32, 64, 16, 4, 0.5, true, 5);
        let x = random_input(64, 6);
        let cfg = EngineConfig { workers: 2, strategy: Strategy::StreamK, tile_rows: 8 };
        let report = bench_gemv(&layer, &x, &cfg, 11).unwrap();
        assert!(report.p10_ns <= report.median_ns);
        assert!(report.median_ns <= report.p90_ns);
        assert_eq!(report.reps, 11);
        let fp = footprint(&layer).unwrap();
        assert_eq!(report.bytes_touched, fp.payload_bits / 8);
        assert!(report.gbps > 0.0);
        assert!(matches!(bench_gemv(&layer, &x, &cfg, 0), Err(Error::Domain(_))));
    }
}
