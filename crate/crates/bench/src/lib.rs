//! Fixtures shared by the benchmarks.

use std::sync::Arc;

use stratflow_core::flow::{make_initial_data, InitialData};
use stratflow_core::gmt::WeightedPointCloud;
use stratflow_core::{FieldSnapshot, Grid, SpacePoint};

/// Smooth periodic map `T^2 -> S^2` on `count^2` nodes.
pub fn smooth_snapshot(count: usize) -> FieldSnapshot {
    let grid = Arc::new(Grid::periodic_box(2, 1.0, count).expect("grid"));
    make_initial_data(
        &InitialData::RandomSmooth {
            target_dim: 3,
            modes: 2,
            amplitude: 0.5,
            seed: 1,
        },
        grid,
    )
    .expect("initial data")
}

/// Unit-weight points on a helix in the unit ball.
pub fn helix_cloud(m: usize) -> WeightedPointCloud {
    let pts = (0..m)
        .map(|i| {
            let t = i as f64 / m as f64;
            let a = 6.0 * t;
            SpacePoint::new(&[0.5 * a.cos(), 0.5 * a.sin(), t - 0.5]).expect("point")
        })
        .collect();
    WeightedPointCloud::unit(pts).expect("cloud")
}

/// `m` evenly spaced points on the `x_1`-axis segment of length `2r`.
pub fn axis_samples(m: usize, r: f64) -> Vec<SpacePoint> {
    (0..m)
        .map(|i| {
            let x = -r + 2.0 * r * i as f64 / (m - 1) as f64;
            SpacePoint::new(&[x, 0.0, 0.0]).expect("point")
        })
        .collect()
}
