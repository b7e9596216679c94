use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::renet::{renet_group, CellKind, CellParams, Direction, Exec, ReNetGroup, ReNetLayer};
use crate::tensor::Tensor;

use super::train::with_threads;

/// Input channels fed to the benchmarked group.
pub const BENCH_CHANNELS: usize = 16;
/// Timed repetitions per cell; the median is reported.
pub const BENCH_REPS: usize = 5;

#[derive(Clone, Debug, PartialEq)]
pub struct BenchRow {
    pub height: usize,
    pub width: usize,
    pub hidden: usize,
    pub threads: usize,
    pub sequential_ms: f64,
    pub parallel_ms: f64,
    /// Parallel and sequential outputs agreed bit for bit.
    pub identical: bool,
}

impl BenchRow {
    pub fn speedup(&self) -> f64 {
        self.sequential_ms / self.parallel_ms
    }
}

pub fn bench_csv(rows: &[BenchRow]) -> String {
    let mut s = String::from("height,width,hidden,threads,sequential_ms,parallel_ms,speedup,identical\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{},{:.3},{:.3},{:.3},{}\n",
            r.height,
            r.width,
            r.hidden,
            r.threads,
            r.sequential_ms,
            r.parallel_ms,
            r.speedup(),
            r.identical
        ));
    }
    s
}

fn random_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Result<Tensor<f32>> {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-0.2f32..=0.2)).collect())
}

fn random_layer(direction: Direction, p: usize, d: usize, rng: &mut ChaCha8Rng) -> Result<ReNetLayer<f32>> {
    let mut cell = || -> Result<CellParams<f32>> {
        let mut ts = Vec::with_capacity(12);
        for _ in 0..4 {
            ts.push(random_tensor(&[d, p], rng)?);
            ts.push(random_tensor(&[d, d], rng)?);
            ts.push(random_tensor(&[d], rng)?);
        }
        CellParams::from_tensors(CellKind::Lstm, ts)
    };
    Ok(ReNetLayer {
        direction,
        patch: (1, 1),
        forward: cell()?,
        backward: cell()?,
    })
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    xs[xs.len() / 2]
}

/// Median wall time of sequential against lane-parallel forward passes of an
/// LSTM group, per input size, hidden width and worker count. Every
/// parallel output is compared with the sequential one.
pub fn bench_sweeps(sizes: &[(usize, usize)], widths: &[usize], threads: &[usize]) -> Result<Vec<BenchRow>> {
    if sizes.is_empty() || widths.is_empty() || threads.is_empty() {
        return Err(Error::arg("benchmark needs at least one size, width and thread count"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut rows = Vec::new();
    for &(h, w) in sizes {
        let map = random_tensor(&[BENCH_CHANNELS, h, w], &mut rng)?;
        for &d in widths {
            let group = ReNetGroup {
                first: random_layer(Direction::Vertical, BENCH_CHANNELS, d, &mut rng)?,
                second: random_layer(Direction::Horizontal, 2 * d, d, &mut rng)?,
            };
            // warm-up, also the reference output
            let reference = renet_group(&map, &group, Exec::Sequential)?;
            for &t in threads {
                let row = with_threads(Some(t), || -> Result<BenchRow> {
                    let mut seq = Vec::with_capacity(BENCH_REPS);
                    let mut par = Vec::with_capacity(BENCH_REPS);
                    let mut identical = true;
                    for _ in 0..BENCH_REPS {
                        let t0 = Instant::now();
                        let a = renet_group(&map, &group, Exec::Sequential)?;
                        seq.push(t0.elapsed().as_secs_f64() * 1e3);
                        let t0 = Instant::now();
                        let b = renet_group(&map, &group, Exec::Parallel)?;
                        par.push(t0.elapsed().as_secs_f64() * 1e3);
                        identical &= a == reference && b == reference;
                    }
                    Ok(BenchRow {
                        height: h,
                        width: w,
                        hidden: d,
                        threads: t,
                        sequential_ms: median(seq),
                        parallel_ms: median(par),
                        identical,
                    })
                })??;
                rows.push(row);
            }
        }
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn outputs_agree() {
        let rows = bench_sweeps(&[(6, 9)], &[3], &[1, 2]).unwrap();
        assert_eq!(rows.len(), 2);
        assert!(rows.iter().all(|r| r.identical && r.parallel_ms > 0.0));
        assert!(bench_csv(&rows).lines().count() == 3);
    }
}
