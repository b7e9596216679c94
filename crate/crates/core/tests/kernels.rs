mod common;

use common::*;
use rand::Rng;
use renet_seg::layers::{bilinear_upsample_to, conv2d, maxpool, ConvConfig, PoolConfig};
use renet_seg::renet::{renet_sweep, CellKind, CellParams, Direction, Exec, IrnnParams, LstmParams, ReNetLayer};
use renet_seg::Tensor;

fn random_cell(kind: CellKind, p: usize, d: usize, rng: &mut rand_chacha::ChaCha8Rng) -> CellParams<f64> {
    match kind {
        CellKind::Lstm => {
            let mut t = || random_tensor(&[d, p], -0.5, 0.5, rng);
            let w = [t(), t(), t(), t()];
            let mut t = || random_tensor(&[d, d], -0.5, 0.5, rng);
            let u = [t(), t(), t(), t()];
            let mut t = || random_tensor(&[d], -0.5, 0.5, rng);
            let b = [t(), t(), t(), t()];
            CellParams::Lstm(LstmParams { w, u, b })
        }
        CellKind::Irnn => CellParams::Irnn(IrnnParams {
            w: random_tensor(&[d, p], -0.5, 0.5, rng),
            u: random_tensor(&[d, d], -0.3, 0.3, rng),
            b: random_tensor(&[d], -0.1, 0.1, rng),
        }),
    }
}

#[test]
fn conv_matches_direct_sum() {
    let mut r = rng(11);
    for case in 0..12 {
        let (c, o, k) = (r.random_range(1..4), r.random_range(1..4), [1, 3, 5][case % 3]);
        let dilation = [1, 2, 12][case % 3];
        let stride = if case % 4 == 0 { 2 } else { 1 };
        let (h, w) = (r.random_range(3..20), r.random_range(3..20));
        let cfg = ConvConfig::new(c, o, k).with_dilation(dilation).with_stride(stride);
        let x = random_tensor(&[2, c, h, w], -1.0, 1.0, &mut r);
        let wt = random_tensor(&cfg.weight_shape(), -1.0, 1.0, &mut r);
        let b = random_tensor(&[o], -1.0, 1.0, &mut r);
        let got = conv2d(&x, &wt, &b, &cfg).unwrap();
        let want = conv2d_naive(&x, &wt, &b, stride, dilation, cfg.pad());
        assert!(max_diff(&got, &want) < 1e-12, "case {case}");
    }
}

#[test]
fn pool_and_upsample_match_oracles() {
    let mut r = rng(12);
    for &(k, s) in &[(2, 2), (3, 1), (3, 2), (1, 1)] {
        let x = random_tensor(&[2, 3, r.random_range(1..12), r.random_range(1..12)], -1.0, 1.0, &mut r);
        let (got, _) = maxpool(&x, &PoolConfig::new(k, s)).unwrap();
        assert_eq!(got.data(), maxpool_naive(&x, k, s).data());
    }
    for factor in [1, 2, 3, 8] {
        let (h, w) = (r.random_range(1..6), r.random_range(1..6));
        let x = random_tensor(&[1, 2, h, w], -1.0, 1.0, &mut r);
        let target = (h * factor - r.random_range(0..factor), w * factor);
        let got = bilinear_upsample_to(&x, factor, target).unwrap();
        assert!(max_diff(&got, &upsample_naive(&x, factor, target)) < 1e-12);
    }
}

#[test]
fn sweeps_match_unrolled_recurrence() {
    let mut r = rng(13);
    for case in 0..8 {
        let kind = if case % 2 == 0 { CellKind::Lstm } else { CellKind::Irnn };
        let direction = if case % 4 < 2 { Direction::Vertical } else { Direction::Horizontal };
        let (p, d) = (r.random_range(1..6), r.random_range(1..5));
        let layer = ReNetLayer {
            direction,
            patch: (1, 1),
            forward: random_cell(kind, p, d, &mut r),
            backward: random_cell(kind, p, d, &mut r),
        };
        let grid = random_tensor(&[2, r.random_range(1..6), r.random_range(1..6), p], -1.0, 1.0, &mut r);
        let got = renet_sweep(&grid, &layer, Exec::Sequential).unwrap();
        assert!(max_diff(&got, &sweep_naive(&grid, &layer)) < 1e-12, "case {case}");
    }
}

#[test]
fn single_cell_grid_sees_no_context() {
    let mut r = rng(14);
    let layer = ReNetLayer {
        direction: Direction::Horizontal,
        patch: (1, 1),
        forward: random_cell(CellKind::Lstm, 2, 3, &mut r),
        backward: random_cell(CellKind::Lstm, 2, 3, &mut r),
    };
    let grid = Tensor::from_vec(&[1, 1, 1, 2], vec![0.3, -0.7]).unwrap();
    let out = renet_sweep(&grid, &layer, Exec::Parallel).unwrap();
    assert_eq!(out.shape(), &[1, 1, 1, 6]);
    assert!(max_diff(&out, &sweep_naive(&grid, &layer)) < 1e-15);
}
