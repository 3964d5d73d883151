//! Regularity scales, singular-set extraction, quantitative strata,
//! Minkowski contents and weak Lorentz norms.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::densities::{backward_energy_density, directional_energy_matrix, symmetry_defect};
use crate::error::{Error, Result};
use crate::geometry::{Grid, SpacePoint, SpaceTimeField, SpaceTimePoint, MAX_DIM};
use crate::io::write_csv;

/// Geometric radii `r_min * 2^{j / steps_per_octave}` up to `r_max`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Ladder {
    pub r_min: f64,
    pub r_max: f64,
    pub steps_per_octave: usize,
}

impl Ladder {
    pub fn dyadic(r_min: f64, r_max: f64) -> Self {
        Ladder {
            r_min,
            r_max,
            steps_per_octave: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.r_min > 0.0 && self.r_min <= self.r_max && self.r_max.is_finite()) {
            return Err(Error::invalid(format!(
                "ladder needs 0 < r_min <= r_max, got [{}, {}]",
                self.r_min, self.r_max
            )));
        }
        if self.steps_per_octave == 0 {
            return Err(Error::invalid("steps_per_octave must be positive"));
        }
        Ok(())
    }

    /// Increasing radii.
    pub fn radii(&self) -> Vec<f64> {
        let mut out = Vec::new();
        let mut j = 0;
        loop {
            let r = self.r_min * 2f64.powf(j as f64 / self.steps_per_octave as f64);
            if r > self.r_max * (1.0 + 1e-12) {
                break;
            }
            out.push(r);
            j += 1;
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectionParams {
    /// Nodes are flagged when the backward energy at scale `2r` exceeds
    /// `epsilon^2` for every ladder radius `r`.
    pub epsilon: f64,
    pub ladder: Ladder,
    /// Radii at which directional-energy symmetry is tested.
    pub symmetry_ladder: Ladder,
    /// Trace-normalized defect threshold per `k`; the last entry repeats.
    pub defect_threshold: Vec<f64>,
}

impl Default for DetectionParams {
    fn default() -> Self {
        DetectionParams {
            epsilon: 0.05,
            ladder: Ladder::dyadic(0.0125, 0.1),
            symmetry_ladder: Ladder::dyadic(0.025, 0.1),
            defect_threshold: vec![0.1],
        }
    }
}

impl DetectionParams {
    /// Parameters scaled to a grid of spacing `h`: the smallest backward
    /// ball holds a single node and the smallest symmetry ball its nearest
    /// neighbours.
    pub fn for_spacing(h: f64) -> Self {
        DetectionParams {
            epsilon: 1.0,
            ladder: Ladder::dyadic(0.45 * h, 3.6 * h),
            symmetry_ladder: Ladder::dyadic(1.05 * h, 4.2 * h),
            defect_threshold: vec![0.1],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0) {
            return Err(Error::invalid("epsilon must be positive"));
        }
        self.ladder.validate()?;
        self.symmetry_ladder.validate()?;
        if self.defect_threshold.is_empty() || self.defect_threshold.iter().any(|v| !(*v >= 0.0)) {
            return Err(Error::invalid("defect thresholds must be nonnegative"));
        }
        Ok(())
    }

    pub fn threshold(&self, k: usize) -> f64 {
        let t = &self.defect_threshold;
        t[k.min(t.len() - 1)]
    }
}

/// Largest ladder radius `r <= 1` with `sup_{P_r(X)} (r^2 |u_t| + r |grad u|) <= 1`,
/// or 0 when none qualifies. The supremum runs over grid nodes of the recorded
/// snapshots inside the parabolic ball and the slice at `X.t`.
pub fn regularity_scale(f: &SpaceTimeField, x: &SpaceTimePoint, ladder: &Ladder) -> Result<f64> {
    ladder.validate()?;
    f.check_coverage(x.t, x.t)?;
    let grid = f.grid();
    if x.x.dim() != grid.dim() {
        return Err(Error::DimensionMismatch {
            expected: grid.dim(),
            found: x.x.dim(),
        });
    }
    let d = f.target_dim();
    let mut radii: Vec<f64> = ladder.radii().into_iter().filter(|&r| r <= 1.0).collect();
    radii.reverse();
    let times = f.times();
    let mut velocities: Vec<Option<Vec<f64>>> = vec![None; times.len()];
    for r in radii {
        let mut slices: Vec<usize> = if f.is_stationary() {
            vec![0]
        } else {
            (0..times.len())
                .filter(|&k| (times[k] - x.t).abs() < r * r)
                .collect()
        };
        let br = f.bracket(x.t)?;
        slices.push(br.lo);
        slices.push(br.hi);
        slices.sort_unstable();
        slices.dedup();
        let mut sup: f64 = 0.0;
        for k in slices {
            let snap = &f.snapshots()[k];
            if velocities[k].is_none() {
                velocities[k] = Some(if f.is_stationary() {
                    vec![0.0; snap.values().len()]
                } else {
                    f.velocity(k)
                });
            }
            let vel = velocities[k].as_ref().expect("velocity computed");
            grid.for_each_in_ball(&x.x, r, |idx, _, _| {
                let g = snap.grad_norm2(idx).sqrt();
                let v = vel[idx * d..(idx + 1) * d]
                    .iter()
                    .map(|a| a * a)
                    .sum::<f64>()
                    .sqrt();
                sup = sup.max(r * r * v + r * g);
            });
            if sup > 1.0 {
                break;
            }
        }
        if sup <= 1.0 {
            return Ok(r);
        }
    }
    Ok(0.0)
}

/// Grid nodes whose backward energy `E_-(u, (x, t), 2r)` exceeds `epsilon^2`
/// at every ladder radius. Returns node indices in increasing order.
pub fn singular_nodes(f: &SpaceTimeField, t: f64, p: &DetectionParams) -> Result<Vec<usize>> {
    p.validate()?;
    let radii = p.ladder.radii();
    let r_top = radii[radii.len() - 1];
    f.check_coverage(t - 4.0 * r_top * r_top, t)?;
    let grid = f.grid();
    let eps2 = p.epsilon * p.epsilon;
    let flags: Vec<Result<bool>> = (0..grid.len())
        .into_par_iter()
        .map(|idx| {
            let x = SpaceTimePoint::new(grid.node(idx), t)?;
            for &r in &radii {
                if backward_energy_density(f, &x, 2.0 * r)? <= eps2 {
                    return Ok(false);
                }
            }
            Ok(true)
        })
        .collect();
    let mut out = Vec::new();
    for (idx, fl) in flags.into_iter().enumerate() {
        if fl? {
            out.push(idx);
        }
    }
    Ok(out)
}

/// Flagged grid points of the time slice `t`.
pub fn extract_singular_slice(
    f: &SpaceTimeField,
    t: f64,
    p: &DetectionParams,
) -> Result<Vec<SpacePoint>> {
    let grid = f.grid();
    Ok(singular_nodes(f, t, p)?.into_iter().map(|i| grid.node(i)).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StratumSample {
    pub t: f64,
    pub k: usize,
    pub points: Vec<SpacePoint>,
    pub node_indices: Vec<usize>,
    pub ladder: Vec<f64>,
    pub threshold: f64,
}

/// Nodes at which no ladder scale looks `(k + 1)`-symmetric: for every
/// symmetry radius `s`, the sum of the `k + 1` smallest eigenvalues of the
/// directional energy matrix exceeds `threshold(k) * trace`.
pub fn quantitative_stratum(
    f: &SpaceTimeField,
    t: f64,
    k: usize,
    p: &DetectionParams,
) -> Result<StratumSample> {
    p.validate()?;
    let grid = f.grid();
    let n = grid.dim();
    if k >= n {
        return Err(Error::invalid(format!("k = {k} must be below n = {n}")));
    }
    let radii = p.symmetry_ladder.radii();
    let r_top = radii[radii.len() - 1];
    f.check_coverage(t - 4.0 * r_top * r_top, t)?;
    let threshold = p.threshold(k);
    let floor = 1e-12 * slice_energy(f, t)?;
    let floor = floor.max(f64::MIN_POSITIVE);
    let flags: Vec<Result<bool>> = (0..grid.len())
        .into_par_iter()
        .map(|idx| {
            let x = grid.node(idx);
            for &s in &radii {
                let m = directional_energy_matrix(f, &x, t, s)?;
                let ratio = symmetry_defect(&m, k)? / m.trace().max(floor);
                if ratio <= threshold {
                    return Ok(false);
                }
            }
            Ok(true)
        })
        .collect();
    let mut node_indices = Vec::new();
    for (idx, fl) in flags.into_iter().enumerate() {
        if fl? {
            node_indices.push(idx);
        }
    }
    Ok(StratumSample {
        t,
        k,
        points: node_indices.iter().map(|&i| grid.node(i)).collect(),
        node_indices,
        ladder: radii,
        threshold,
    })
}

/// `sum_nodes h^n |grad u|^2` on the slice `t`.
fn slice_energy(f: &SpaceTimeField, t: f64) -> Result<f64> {
    let br = f.bracket(t)?;
    let grid = f.grid();
    let (a, b) = (&f.snapshots()[br.lo], &f.snapshots()[br.hi]);
    Ok((0..grid.len())
        .map(|i| (1.0 - br.w) * a.grad_norm2(i) + br.w * b.grad_norm2(i))
        .sum::<f64>()
        * grid.cell_volume())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Flavor {
    Spatial,
    Parabolic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContentReport {
    pub alpha: f64,
    pub r: f64,
    pub content: f64,
    pub flavor: Flavor,
    /// Counting cells per `r` along each spatial axis (and per `r^2` in time).
    pub refine: usize,
    pub cells_marked: u64,
}

/// A finite set for content estimation.
#[derive(Debug, Clone, Copy)]
pub enum PointSet<'a> {
    Spatial(&'a [SpacePoint]),
    SpaceTime(&'a [SpaceTimePoint]),
}

/// Default counting refinement (cells per `r`).
pub const CONTENT_REFINE: usize = 8;

/// Spatial: `(2r)^{alpha - n} Vol(B_r(S))`; parabolic:
/// `(2r)^{alpha - (n + 2)} Vol(P_r(S))`. Neighbourhood volumes are counted on
/// a lattice with `refine` cells per `r` (and per `r^2` in time).
pub fn minkowski_content(
    set: PointSet,
    alpha: f64,
    r: f64,
    refine: usize,
) -> Result<ContentReport> {
    if !(r > 0.0 && r.is_finite()) {
        return Err(Error::invalid(format!("r = {r} must be positive")));
    }
    if refine < 4 {
        return Err(Error::invalid("refinement factor must be at least 4"));
    }
    let (coords, n, flavor): (Vec<[f64; MAX_DIM + 1]>, usize, Flavor) = match set {
        PointSet::Spatial(s) => {
            let n = s.first().ok_or_else(|| Error::Empty("point set".into()))?.dim();
            let mut v = Vec::with_capacity(s.len());
            for p in s {
                if p.dim() != n {
                    return Err(Error::DimensionMismatch {
                        expected: n,
                        found: p.dim(),
                    });
                }
                let mut c = [0.0; MAX_DIM + 1];
                c[..n].copy_from_slice(p.coords());
                v.push(c);
            }
            (v, n, Flavor::Spatial)
        }
        PointSet::SpaceTime(s) => {
            let n = s.first().ok_or_else(|| Error::Empty("point set".into()))?.x.dim();
            let mut v = Vec::with_capacity(s.len());
            for p in s {
                if p.x.dim() != n {
                    return Err(Error::DimensionMismatch {
                        expected: n,
                        found: p.x.dim(),
                    });
                }
                let mut c = [0.0; MAX_DIM + 1];
                c[..n].copy_from_slice(p.x.coords());
                c[n] = p.t;
                v.push(c);
            }
            (v, n, Flavor::Parabolic)
        }
    };
    let dims = if flavor == Flavor::Parabolic { n + 1 } else { n };
    let cell = r / refine as f64;
    let tcell = r * r / refine as f64;
    let size = |a: usize| if a < n { cell } else { tcell };
    let reach = |a: usize| if a < n { r } else { r * r };
    let mut lo = [i64::MAX; MAX_DIM + 1];
    let mut hi = [i64::MIN; MAX_DIM + 1];
    for c in &coords {
        for a in 0..dims {
            lo[a] = lo[a].min(((c[a] - reach(a)) / size(a)).floor() as i64);
            hi[a] = hi[a].max(((c[a] + reach(a)) / size(a)).ceil() as i64);
        }
    }
    let mut ext = [1usize; MAX_DIM + 1];
    let mut total: u128 = 1;
    for a in 0..dims {
        ext[a] = (hi[a] - lo[a] + 1) as usize;
        total *= ext[a] as u128;
    }
    if total > 4_000_000_000 {
        return Err(Error::CostGuard(format!("{total} counting cells")));
    }
    let mut bits = vec![0u64; (total as usize).div_ceil(64)];
    let r2 = r * r;
    for c in &coords {
        // cell centres within the neighbourhood of this point
        let mut clo = [0i64; MAX_DIM + 1];
        let mut chi = [0i64; MAX_DIM + 1];
        for a in 0..dims {
            clo[a] = ((c[a] - reach(a)) / size(a) - 0.5).ceil() as i64;
            chi[a] = ((c[a] + reach(a)) / size(a) - 0.5).floor() as i64;
        }
        let mut cur = clo;
        'cells: loop {
            let mut d2 = 0.0;
            let mut ok = true;
            for a in 0..dims {
                let centre = (cur[a] as f64 + 0.5) * size(a);
                let dv = centre - c[a];
                if a < n {
                    d2 += dv * dv;
                } else if dv.abs() >= r2 {
                    ok = false;
                }
            }
            if ok && d2 < r2 {
                let mut lin = 0usize;
                for a in 0..dims {
                    lin = lin * ext[a] + (cur[a] - lo[a]) as usize;
                }
                bits[lin / 64] |= 1 << (lin % 64);
            }
            let mut a = dims;
            loop {
                if a == 0 {
                    break 'cells;
                }
                a -= 1;
                if cur[a] < chi[a] {
                    cur[a] += 1;
                    break;
                }
                cur[a] = clo[a];
            }
        }
    }
    let marked: u64 = bits.iter().map(|w| w.count_ones() as u64).sum();
    let mut volume = marked as f64 * cell.powi(n as i32);
    let codim = match flavor {
        Flavor::Spatial => n as f64,
        Flavor::Parabolic => {
            volume *= tcell;
            n as f64 + 2.0
        }
    };
    Ok(ContentReport {
        alpha,
        r,
        content: (2.0 * r).powf(alpha - codim) * volume,
        flavor,
        refine,
        cells_marked: marked,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LorentzOptions {
    /// Points of the logarithmic level grid.
    pub levels: usize,
    /// Superlevel sets with fewer nodes are ignored (the distribution function
    /// is not resolved there).
    pub min_count: usize,
}

impl Default for LorentzOptions {
    fn default() -> Self {
        LorentzOptions {
            levels: 512,
            min_count: 1000,
        }
    }
}

/// `sup_s s * Vol{|g| > s}^{1/p}` over a logarithmic grid of levels spanning
/// the positive values of `|g|`, with node-counting volumes.
pub fn weak_lorentz_norm(g: &[f64], cell_volume: f64, p: f64, opts: &LorentzOptions) -> Result<f64> {
    if g.is_empty() {
        return Err(Error::Empty("no samples in the ball".into()));
    }
    if !(p >= 1.0) {
        return Err(Error::invalid(format!("p = {p} must be at least 1")));
    }
    let mut a: Vec<f64> = g.iter().map(|v| v.abs()).filter(|v| *v > 0.0).collect();
    if a.is_empty() {
        return Ok(0.0);
    }
    a.sort_by(|x, y| x.total_cmp(y));
    let lo = a[0] * (1.0 - 1e-9);
    let hi = a[a.len() - 1] * (1.0 - 1e-9);
    let levels = opts.levels.max(2);
    let min_count = opts.min_count.min(a.len());
    let mut best: f64 = 0.0;
    for j in 0..levels {
        let s = if hi > lo {
            lo * (hi / lo).powf(j as f64 / (levels - 1) as f64)
        } else {
            lo
        };
        let count = a.len() - a.partition_point(|&v| v <= s);
        if count == 0 || count < min_count {
            continue;
        }
        best = best.max(s * (count as f64 * cell_volume).powf(1.0 / p));
    }
    Ok(best)
}

/// Samples `g` on the grid nodes inside a ball and evaluates the weak norm.
pub fn weak_lorentz_on_ball<G>(
    grid: &Grid,
    center: &SpacePoint,
    radius: f64,
    g: G,
    p: f64,
    opts: &LorentzOptions,
) -> Result<f64>
where
    G: Fn(&SpacePoint) -> f64,
{
    let mut vals = Vec::new();
    grid.for_each_in_ball(center, radius, |idx, _, _| vals.push(g(&grid.node(idx))));
    weak_lorentz_norm(&vals, grid.cell_volume(), p, opts)
}

/// CSV `(x..., t, k, flag)` over every grid node.
pub fn write_flags_csv(path: &Path, grid: &Grid, samples: &[StratumSample]) -> Result<()> {
    let n = grid.dim();
    let names: Vec<String> = (1..=n).map(|i| format!("x{i}")).collect();
    let mut header: Vec<&str> = names.iter().map(|s| s.as_str()).collect();
    header.extend(["t", "k", "flag"]);
    let mut rows = Vec::new();
    for s in samples {
        let mut flagged = vec![false; grid.len()];
        for &i in &s.node_indices {
            flagged[i] = true;
        }
        for (i, f) in flagged.iter().enumerate() {
            let mut row = grid.node(i).coords().to_vec();
            row.extend([s.t, s.k as f64, if *f { 1.0 } else { 0.0 }]);
            rows.push(row);
        }
    }
    write_csv(path, &header, &rows)
}

/// CSV `(alpha, r, content)`.
pub fn write_content_csv(path: &Path, reports: &[ContentReport]) -> Result<()> {
    let rows: Vec<Vec<f64>> = reports.iter().map(|c| vec![c.alpha, c.r, c.content]).collect();
    write_csv(path, &["alpha", "r", "content"], &rows)
}
