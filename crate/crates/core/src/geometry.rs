//! Points, balls, grids and sampled fields.

use std::sync::{Arc, OnceLock};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Largest supported spatial (and target) dimension.
pub const MAX_DIM: usize = 4;

#[derive(Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct SpacePoint {
    c: [f64; MAX_DIM],
    n: usize,
}

impl std::fmt::Debug for SpacePoint {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_list().entries(self.coords()).finish()
    }
}

impl TryFrom<Vec<f64>> for SpacePoint {
    type Error = Error;
    fn try_from(v: Vec<f64>) -> Result<Self> {
        SpacePoint::new(&v)
    }
}

impl From<SpacePoint> for Vec<f64> {
    fn from(p: SpacePoint) -> Vec<f64> {
        p.coords().to_vec()
    }
}

impl SpacePoint {
    pub fn new(coords: &[f64]) -> Result<Self> {
        let n = coords.len();
        if n == 0 || n > MAX_DIM {
            return Err(Error::invalid(format!("dimension {n} outside 1..={MAX_DIM}")));
        }
        if coords.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("non-finite coordinate"));
        }
        let mut c = [0.0; MAX_DIM];
        c[..n].copy_from_slice(coords);
        Ok(SpacePoint { c, n })
    }

    pub fn origin(n: usize) -> Self {
        assert!((1..=MAX_DIM).contains(&n));
        SpacePoint { c: [0.0; MAX_DIM], n }
    }

    /// Builds a point from a padded array, no validation beyond the dimension.
    pub(crate) fn from_array(c: [f64; MAX_DIM], n: usize) -> Self {
        SpacePoint { c, n }
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn coords(&self) -> &[f64] {
        &self.c[..self.n]
    }

    pub(crate) fn raw(&self) -> &[f64; MAX_DIM] {
        &self.c
    }

    pub fn dist2(&self, other: &SpacePoint) -> f64 {
        debug_assert_eq!(self.n, other.n);
        (0..self.n).map(|i| (self.c[i] - other.c[i]).powi(2)).sum()
    }

    pub fn dist(&self, other: &SpacePoint) -> f64 {
        self.dist2(other).sqrt()
    }

    pub fn norm(&self) -> f64 {
        self.coords().iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// `self + s * v`, with `v` given in padded form.
    pub fn offset(&self, v: &[f64], s: f64) -> SpacePoint {
        let mut c = self.c;
        for i in 0..self.n {
            c[i] += s * v[i];
        }
        SpacePoint { c, n: self.n }
    }

    pub fn sub(&self, other: &SpacePoint) -> [f64; MAX_DIM] {
        let mut d = [0.0; MAX_DIM];
        for i in 0..self.n {
            d[i] = self.c[i] - other.c[i];
        }
        d
    }

    pub fn scaled(&self, s: f64) -> SpacePoint {
        let mut c = self.c;
        c.iter_mut().for_each(|v| *v *= s);
        SpacePoint { c, n: self.n }
    }

    fn check_dim(&self, other: &SpacePoint) -> Result<()> {
        if self.n != other.n {
            return Err(Error::DimensionMismatch {
                expected: self.n,
                found: other.n,
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpaceTimePoint {
    pub x: SpacePoint,
    pub t: f64,
}

impl SpaceTimePoint {
    pub fn new(x: SpacePoint, t: f64) -> Result<Self> {
        if !t.is_finite() {
            return Err(Error::invalid("non-finite time"));
        }
        Ok(SpaceTimePoint { x, t })
    }
}

/// `(|x - y|^2 + |t - s|)^{1/2}`.
pub fn parabolic_distance(a: &SpaceTimePoint, b: &SpaceTimePoint) -> Result<f64> {
    a.x.check_dim(&b.x)?;
    Ok((a.x.dist2(&b.x) + (a.t - b.t).abs()).sqrt())
}

/// `B_r(x) x (t - r^2, t + r^2)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ParabolicBall {
    pub center: SpaceTimePoint,
    pub radius: f64,
}

impl ParabolicBall {
    pub fn new(center: SpaceTimePoint, radius: f64) -> Result<Self> {
        if !(radius > 0.0 && radius.is_finite()) {
            return Err(Error::invalid(format!("radius {radius} must be positive")));
        }
        Ok(ParabolicBall { center, radius })
    }

    pub fn contains(&self, p: &SpaceTimePoint) -> bool {
        p.x.dim() == self.center.x.dim()
            && self.center.x.dist2(&p.x) < self.radius * self.radius
            && (p.t - self.center.t).abs() < self.radius * self.radius
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpatialBall {
    pub center: SpacePoint,
    pub radius: f64,
}

impl SpatialBall {
    pub fn new(center: SpacePoint, radius: f64) -> Result<Self> {
        if !(radius > 0.0) {
            return Err(Error::invalid(format!("radius {radius} must be positive")));
        }
        Ok(SpatialBall { center, radius })
    }

    /// Closed-ball membership.
    pub fn contains(&self, p: &SpacePoint) -> bool {
        self.center.dist2(p) <= self.radius * self.radius
    }
}

/// Uniform axis-aligned grid. Node `i` along an axis sits at `lower + i * h`;
/// nodes are stored row-major with the last axis fastest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    n: usize,
    lower: [f64; MAX_DIM],
    h: f64,
    counts: [usize; MAX_DIM],
    periodic: bool,
}

impl Grid {
    pub fn new(lower: &[f64], h: f64, counts: &[usize], periodic: bool) -> Result<Self> {
        let n = lower.len();
        if n == 0 || n > MAX_DIM {
            return Err(Error::invalid(format!("grid dimension {n} outside 1..={MAX_DIM}")));
        }
        if counts.len() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                found: counts.len(),
            });
        }
        if !(h > 0.0 && h.is_finite()) {
            return Err(Error::invalid(format!("spacing {h} must be positive")));
        }
        if counts.iter().any(|&c| c < 3) {
            return Err(Error::invalid("at least 3 nodes per axis"));
        }
        if lower.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("non-finite grid origin"));
        }
        let mut lo = [0.0; MAX_DIM];
        lo[..n].copy_from_slice(lower);
        let mut cn = [1; MAX_DIM];
        cn[..n].copy_from_slice(counts);
        Ok(Grid {
            n,
            lower: lo,
            h,
            counts: cn,
            periodic,
        })
    }

    /// Non-periodic cube `[-half, half]^n` with `count` nodes per axis.
    pub fn centered(n: usize, half_width: f64, count: usize) -> Result<Self> {
        let h = 2.0 * half_width / (count.max(2) - 1) as f64;
        Grid::new(&vec![-half_width; n], h, &vec![count; n], false)
    }

    /// Periodic torus of side `length` centered at the origin.
    pub fn periodic_box(n: usize, length: f64, count: usize) -> Result<Self> {
        let h = length / count.max(1) as f64;
        Grid::new(&vec![-0.5 * length; n], h, &vec![count; n], true)
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn spacing(&self) -> f64 {
        self.h
    }

    pub fn counts(&self) -> &[usize] {
        &self.counts[..self.n]
    }

    pub fn lower(&self) -> &[f64] {
        &self.lower[..self.n]
    }

    pub fn is_periodic(&self) -> bool {
        self.periodic
    }

    /// Physical extent `h * (count - 1)` along an axis.
    pub fn extent(&self, axis: usize) -> f64 {
        self.h * (self.counts[axis] - 1) as f64
    }

    /// Period along an axis for periodic grids.
    pub fn period(&self, axis: usize) -> f64 {
        self.h * self.counts[axis] as f64
    }

    pub fn len(&self) -> usize {
        self.counts[..self.n].iter().product()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn cell_volume(&self) -> f64 {
        self.h.powi(self.n as i32)
    }

    pub fn stride(&self, axis: usize) -> usize {
        self.counts[axis + 1..self.n].iter().product()
    }

    pub fn index(&self, mi: &[usize]) -> usize {
        let mut idx = 0;
        for a in 0..self.n {
            idx = idx * self.counts[a] + mi[a];
        }
        idx
    }

    pub fn multi_index(&self, mut idx: usize) -> [usize; MAX_DIM] {
        let mut mi = [0; MAX_DIM];
        for a in (0..self.n).rev() {
            mi[a] = idx % self.counts[a];
            idx /= self.counts[a];
        }
        mi
    }

    pub fn node(&self, idx: usize) -> SpacePoint {
        let mi = self.multi_index(idx);
        let mut c = [0.0; MAX_DIM];
        for a in 0..self.n {
            c[a] = self.lower[a] + mi[a] as f64 * self.h;
        }
        SpacePoint::from_array(c, self.n)
    }

    pub fn contains(&self, x: &SpacePoint) -> bool {
        if x.dim() != self.n {
            return false;
        }
        self.periodic
            || (0..self.n).all(|a| {
                let v = x.raw()[a] - self.lower[a];
                v >= -1e-12 * self.h && v <= self.extent(a) + 1e-12 * self.h
            })
    }

    /// `node - from`, using the minimum image on periodic grids.
    pub fn displacement(&self, from: &SpacePoint, idx: usize) -> [f64; MAX_DIM] {
        let p = self.node(idx);
        let mut d = p.sub(from);
        if self.periodic {
            for (a, v) in d.iter_mut().enumerate().take(self.n) {
                let per = self.period(a);
                *v -= per * (*v / per).round();
            }
        }
        d
    }

    /// Visits every node within `radius` of `center` (strict), passing the node
    /// index, the displacement `node - center` and its squared length.
    /// An infinite radius visits the whole grid.
    pub fn for_each_in_ball<F>(&self, center: &SpacePoint, radius: f64, mut f: F)
    where
        F: FnMut(usize, &[f64; MAX_DIM], f64),
    {
        let n = self.n;
        let mut lo = [0i64; MAX_DIM];
        let mut hi = [0i64; MAX_DIM];
        let mut full = [false; MAX_DIM];
        for a in 0..n {
            let c = self.counts[a] as i64;
            if !radius.is_finite() {
                lo[a] = 0;
                hi[a] = c - 1;
                full[a] = true;
                continue;
            }
            let l = ((center.raw()[a] - radius - self.lower[a]) / self.h).ceil() as i64;
            let u = ((center.raw()[a] + radius - self.lower[a]) / self.h).floor() as i64;
            if self.periodic {
                if u - l + 1 >= c {
                    lo[a] = 0;
                    hi[a] = c - 1;
                    full[a] = true;
                } else {
                    lo[a] = l;
                    hi[a] = u;
                }
            } else {
                lo[a] = l.max(0);
                hi[a] = u.min(c - 1);
                if lo[a] > hi[a] {
                    return;
                }
            }
        }
        let r2 = radius * radius;
        let mut cur = lo;
        loop {
            let mut idx = 0usize;
            let mut disp = [0.0; MAX_DIM];
            let mut d2 = 0.0;
            for a in 0..n {
                let c = self.counts[a] as i64;
                let w = cur[a].rem_euclid(c);
                idx = idx * self.counts[a] + w as usize;
                let mut v = self.lower[a] + cur[a] as f64 * self.h - center.raw()[a];
                if self.periodic && full[a] {
                    let per = self.period(a);
                    v = self.lower[a] + w as f64 * self.h - center.raw()[a];
                    v -= per * (v / per).round();
                }
                disp[a] = v;
                d2 += v * v;
            }
            if d2 < r2 || !radius.is_finite() {
                f(idx, &disp, d2);
            }
            let mut a = n;
            loop {
                if a == 0 {
                    return;
                }
                a -= 1;
                if cur[a] < hi[a] {
                    cur[a] += 1;
                    break;
                }
                cur[a] = lo[a];
            }
        }
    }
}

/// Field values on a grid at one time, with lazily cached gradients.
#[derive(Debug, Clone)]
pub struct FieldSnapshot {
    grid: Arc<Grid>,
    time: f64,
    d: usize,
    values: Vec<f64>,
    grad: OnceLock<Vec<f64>>,
    dudt: Option<Vec<f64>>,
}

impl FieldSnapshot {
    pub fn new(grid: Arc<Grid>, time: f64, d: usize, values: Vec<f64>) -> Result<Self> {
        if d == 0 || d > MAX_DIM {
            return Err(Error::invalid(format!("target dimension {d} outside 1..={MAX_DIM}")));
        }
        if values.len() != grid.len() * d {
            return Err(Error::DimensionMismatch {
                expected: grid.len() * d,
                found: values.len(),
            });
        }
        if !time.is_finite() || values.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("non-finite field data"));
        }
        Ok(FieldSnapshot {
            grid,
            time,
            d,
            values,
            grad: OnceLock::new(),
            dudt: None,
        })
    }

    /// Samples `f` at every node.
    pub fn from_fn<F>(grid: Arc<Grid>, time: f64, d: usize, f: F) -> Result<Self>
    where
        F: Fn(&SpacePoint) -> Vec<f64>,
    {
        let mut values = Vec::with_capacity(grid.len() * d);
        for i in 0..grid.len() {
            let v = f(&grid.node(i));
            if v.len() != d {
                return Err(Error::DimensionMismatch {
                    expected: d,
                    found: v.len(),
                });
            }
            values.extend_from_slice(&v);
        }
        FieldSnapshot::new(grid, time, d, values)
    }

    pub fn grid(&self) -> &Arc<Grid> {
        &self.grid
    }

    pub fn time(&self) -> f64 {
        self.time
    }

    pub fn set_time(&mut self, t: f64) {
        self.time = t;
    }

    pub fn target_dim(&self) -> usize {
        self.d
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn value(&self, idx: usize) -> &[f64] {
        &self.values[idx * self.d..(idx + 1) * self.d]
    }

    /// Mutable access to node values; drops the gradient cache.
    pub fn values_mut(&mut self) -> &mut [f64] {
        self.grad = OnceLock::new();
        &mut self.values
    }

    /// Gradient at a node as `n` rows of `d` entries (`row a = d u / d x_a`).
    pub fn gradient(&self, idx: usize) -> &[f64] {
        let nd = self.grid.dim() * self.d;
        &self.gradients()[idx * nd..(idx + 1) * nd]
    }

    pub fn gradients(&self) -> &[f64] {
        self.grad.get_or_init(|| compute_gradients(&self.grid, self.d, &self.values))
    }

    pub fn grad_norm2(&self, idx: usize) -> f64 {
        self.gradient(idx).iter().map(|v| v * v).sum()
    }

    pub fn with_time_derivative(mut self, dudt: Vec<f64>) -> Result<Self> {
        if dudt.len() != self.values.len() {
            return Err(Error::DimensionMismatch {
                expected: self.values.len(),
                found: dudt.len(),
            });
        }
        self.dudt = Some(dudt);
        Ok(self)
    }

    pub fn time_derivative(&self) -> Option<&[f64]> {
        self.dudt.as_deref()
    }

    pub fn clear_time_derivative(&mut self) {
        self.dudt = None;
    }

    /// `max_i ||u_i| - 1|`.
    pub fn max_unit_deviation(&self) -> f64 {
        self.values
            .chunks(self.d)
            .map(|v| (v.iter().map(|x| x * x).sum::<f64>().sqrt() - 1.0).abs())
            .fold(0.0, f64::max)
    }
}

fn compute_gradients(grid: &Grid, d: usize, values: &[f64]) -> Vec<f64> {
    let n = grid.dim();
    let h = grid.spacing();
    let nd = n * d;
    let mut out = vec![0.0; grid.len() * nd];
    for (idx, g) in out.chunks_mut(nd).enumerate() {
        let mi = grid.multi_index(idx);
        for a in 0..n {
            let c = grid.counts()[a];
            let s = grid.stride(a);
            let i = mi[a];
            let at = |j: usize, comp: usize| values[(idx - i * s + j * s) * d + comp];
            for comp in 0..d {
                let v = if grid.is_periodic() {
                    let ip = (i + 1) % c;
                    let im = (i + c - 1) % c;
                    (at(ip, comp) - at(im, comp)) / (2.0 * h)
                } else if i == 0 {
                    (-3.0 * at(0, comp) + 4.0 * at(1, comp) - at(2, comp)) / (2.0 * h)
                } else if i == c - 1 {
                    (3.0 * at(i, comp) - 4.0 * at(i - 1, comp) + at(i - 2, comp)) / (2.0 * h)
                } else {
                    (at(i + 1, comp) - at(i - 1, comp)) / (2.0 * h)
                };
                g[a * d + comp] = v;
            }
        }
    }
    out
}

/// Multilinear interpolation of node values; exact at nodes.
pub fn sample_field(f: &FieldSnapshot, x: &SpacePoint) -> Result<Vec<f64>> {
    let grid = f.grid();
    let n = grid.dim();
    if x.dim() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            found: x.dim(),
        });
    }
    if !grid.contains(x) {
        return Err(Error::OutOfDomain(format!("{x:?} outside grid box")));
    }
    let h = grid.spacing();
    let mut base = [0usize; MAX_DIM];
    let mut frac = [0.0; MAX_DIM];
    let mut next = [0usize; MAX_DIM];
    for a in 0..n {
        let c = grid.counts()[a];
        let mut s = (x.raw()[a] - grid.lower()[a]) / h;
        if grid.is_periodic() {
            s = s.rem_euclid(c as f64);
            let i = (s.floor() as usize).min(c - 1);
            base[a] = i;
            frac[a] = s - i as f64;
            next[a] = (i + 1) % c;
        } else {
            s = s.clamp(0.0, (c - 1) as f64);
            let i = (s.floor() as usize).min(c - 2);
            base[a] = i;
            frac[a] = s - i as f64;
            next[a] = i + 1;
        }
    }
    let d = f.target_dim();
    let mut out = vec![0.0; d];
    for corner in 0..(1usize << n) {
        let mut w = 1.0;
        let mut mi = [0usize; MAX_DIM];
        for a in 0..n {
            if corner >> a & 1 == 1 {
                w *= frac[a];
                mi[a] = next[a];
            } else {
                w *= 1.0 - frac[a];
                mi[a] = base[a];
            }
        }
        if w == 0.0 {
            continue;
        }
        let v = f.value(grid.index(&mi));
        for k in 0..d {
            out[k] += w * v[k];
        }
    }
    Ok(out)
}

/// Per-step monitor values recorded by the flow integrator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub time: f64,
    pub max_dudt: f64,
    pub max_grad: f64,
    pub max_unit_deviation: f64,
}

/// Snapshots at strictly increasing times on a shared grid. A stationary
/// field holds one snapshot valid at every time.
#[derive(Debug, Clone)]
pub struct SpaceTimeField {
    snapshots: Vec<FieldSnapshot>,
    stationary: bool,
    monitor: Vec<StepRecord>,
}

/// Linear-interpolation bracket `(1 - w) * snap[lo] + w * snap[hi]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bracket {
    pub lo: usize,
    pub hi: usize,
    pub w: f64,
}

impl SpaceTimeField {
    pub fn new(snapshots: Vec<FieldSnapshot>) -> Result<Self> {
        let first = snapshots
            .first()
            .ok_or_else(|| Error::Empty("no snapshots".into()))?;
        for pair in snapshots.windows(2) {
            if !(pair[1].time > pair[0].time) {
                return Err(Error::invalid(format!(
                    "snapshot times not strictly increasing: {} then {}",
                    pair[0].time, pair[1].time
                )));
            }
        }
        for s in &snapshots {
            if !(Arc::ptr_eq(s.grid(), first.grid()) || s.grid() == first.grid())
                || s.target_dim() != first.target_dim()
            {
                return Err(Error::invalid("snapshots do not share one grid"));
            }
        }
        Ok(SpaceTimeField {
            snapshots,
            stationary: false,
            monitor: Vec::new(),
        })
    }

    /// A time-independent field.
    pub fn stationary(snapshot: FieldSnapshot) -> Self {
        SpaceTimeField {
            snapshots: vec![snapshot],
            stationary: true,
            monitor: Vec::new(),
        }
    }

    pub fn with_monitor(mut self, monitor: Vec<StepRecord>) -> Self {
        self.monitor = monitor;
        self
    }

    pub fn monitor(&self) -> &[StepRecord] {
        &self.monitor
    }

    pub fn is_stationary(&self) -> bool {
        self.stationary
    }

    pub fn snapshots(&self) -> &[FieldSnapshot] {
        &self.snapshots
    }

    pub fn grid(&self) -> &Arc<Grid> {
        self.snapshots[0].grid()
    }

    pub fn target_dim(&self) -> usize {
        self.snapshots[0].target_dim()
    }

    pub fn times(&self) -> Vec<f64> {
        self.snapshots.iter().map(|s| s.time()).collect()
    }

    pub fn time_span(&self) -> (f64, f64) {
        if self.stationary {
            (f64::NEG_INFINITY, f64::INFINITY)
        } else {
            (
                self.snapshots[0].time(),
                self.snapshots[self.snapshots.len() - 1].time(),
            )
        }
    }

    fn time_tol(&self) -> f64 {
        let (a, b) = self.time_span();
        if self.stationary {
            0.0
        } else {
            1e-9 * (b - a).abs().max(a.abs()).max(b.abs()).max(1e-300)
        }
    }

    /// Fails with a coverage error unless `[a, b]` lies within the recorded span.
    pub fn check_coverage(&self, a: f64, b: f64) -> Result<()> {
        let (lo, hi) = self.time_span();
        let tol = self.time_tol();
        if a < lo - tol {
            return Err(Error::Coverage {
                from: a,
                to: lo.min(b),
            });
        }
        if b > hi + tol {
            return Err(Error::Coverage {
                from: hi.max(a),
                to: b,
            });
        }
        Ok(())
    }

    pub fn bracket(&self, t: f64) -> Result<Bracket> {
        if self.stationary {
            return Ok(Bracket { lo: 0, hi: 0, w: 0.0 });
        }
        self.check_coverage(t, t)?;
        let times: Vec<f64> = self.times();
        let last = times.len() - 1;
        let tol = self.time_tol();
        if (t - times[last]).abs() <= tol {
            return Ok(Bracket { lo: last, hi: last, w: 0.0 });
        }
        let k = times.partition_point(|&s| s <= t + tol).max(1) - 1;
        if (t - times[k]).abs() <= tol || k == last {
            return Ok(Bracket { lo: k, hi: k, w: 0.0 });
        }
        let w = (t - times[k]) / (times[k + 1] - times[k]);
        Ok(Bracket {
            lo: k,
            hi: k + 1,
            w: w.clamp(0.0, 1.0),
        })
    }

    /// Index of a snapshot recorded at exactly `t` (relative tolerance 1e-9).
    pub fn recorded_index(&self, t: f64) -> Result<usize> {
        if self.stationary {
            return Ok(0);
        }
        let times = self.times();
        let tol = self.time_tol();
        if let Some(i) = times.iter().position(|&s| (s - t).abs() <= tol) {
            return Ok(i);
        }
        let below = times.iter().copied().rfind(|&s| s < t);
        let above = times.iter().copied().find(|&s| s > t);
        Err(Error::UnrecordedTime {
            requested: t,
            below,
            above,
        })
    }

    /// Time derivative at snapshot `k`: the stored field if present, else a
    /// difference quotient between neighbouring snapshots.
    pub fn velocity(&self, k: usize) -> Vec<f64> {
        let s = &self.snapshots[k];
        if let Some(v) = s.time_derivative() {
            return v.to_vec();
        }
        if self.stationary || self.snapshots.len() < 2 {
            return vec![0.0; s.values().len()];
        }
        let (a, b) = if k + 1 < self.snapshots.len() {
            (k, k + 1)
        } else {
            (k - 1, k)
        };
        let (sa, sb) = (&self.snapshots[a], &self.snapshots[b]);
        let dt = sb.time() - sa.time();
        sa.values()
            .iter()
            .zip(sb.values())
            .map(|(x, y)| (y - x) / dt)
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p(v: &[f64]) -> SpacePoint {
        SpacePoint::new(v).unwrap()
    }

    #[test]
    fn parabolic_distance_examples() {
        let a = SpaceTimePoint::new(p(&[0.0, 0.0]), 1.0).unwrap();
        let b = SpaceTimePoint::new(p(&[0.0, 0.0]), 0.0).unwrap();
        assert_eq!(parabolic_distance(&a, &a).unwrap(), 0.0);
        assert!((parabolic_distance(&a, &b).unwrap() - 1.0).abs() < 1e-15);
        let x = SpaceTimePoint::new(p(&[3.0, 0.0]), 7.0).unwrap();
        let y = SpaceTimePoint::new(p(&[0.0, 0.0]), 0.0).unwrap();
        assert!((parabolic_distance(&x, &y).unwrap() - 4.0).abs() < 1e-15);
        let z = SpaceTimePoint::new(p(&[0.0, 0.0, 0.0]), 0.0).unwrap();
        assert!(matches!(
            parabolic_distance(&x, &z),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn point_validation() {
        assert!(SpacePoint::new(&[]).is_err());
        assert!(SpacePoint::new(&[0.0; 5]).is_err());
        assert!(SpacePoint::new(&[f64::NAN]).is_err());
        let q = p(&[1.0, 2.0]);
        let js = serde_json::to_string(&q).unwrap();
        assert_eq!(js, "[1.0,2.0]");
        let back: SpacePoint = serde_json::from_str(&js).unwrap();
        assert_eq!(back, q);
    }

    #[test]
    fn ball_membership() {
        let c = SpaceTimePoint::new(p(&[0.0, 0.0]), 0.0).unwrap();
        let b = ParabolicBall::new(c, 0.5).unwrap();
        assert!(b.contains(&SpaceTimePoint::new(p(&[0.3, 0.0]), 0.2).unwrap()));
        assert!(!b.contains(&SpaceTimePoint::new(p(&[0.3, 0.0]), 0.25).unwrap()));
        assert!(!b.contains(&SpaceTimePoint::new(p(&[0.5, 0.0]), 0.0).unwrap()));
        assert!(ParabolicBall::new(c, 0.0).is_err());
    }

    #[test]
    fn grid_indexing_round_trip() {
        let g = Grid::new(&[0.0, 1.0, -1.0], 0.5, &[3, 4, 5], false).unwrap();
        assert_eq!(g.len(), 60);
        for i in 0..g.len() {
            assert_eq!(g.index(&g.multi_index(i)), i);
        }
        let x = g.node(g.index(&[2, 1, 3]));
        assert_eq!(x.coords(), &[1.0, 1.5, 0.5]);
        assert_eq!(g.stride(2), 1);
        assert_eq!(g.stride(0), 20);
        assert!(Grid::new(&[0.0], 0.1, &[2], false).is_err());
        assert!(Grid::new(&[0.0], -0.1, &[3], false).is_err());
        assert!((g.extent(1) - 1.5).abs() < 1e-15);
    }

    #[test]
    fn ball_iteration_matches_brute_force() {
        for periodic in [false, true] {
            let g = if periodic {
                Grid::periodic_box(2, 1.0, 10).unwrap()
            } else {
                Grid::centered(2, 0.5, 11).unwrap()
            };
            let c = p(&[0.42, -0.31]);
            let r = 0.27;
            let mut seen = Vec::new();
            g.for_each_in_ball(&c, r, |i, d, d2| {
                let disp = g.displacement(&c, i);
                assert!((disp[0] - d[0]).abs() < 1e-12 && (disp[1] - d[1]).abs() < 1e-12);
                assert!(d2 < r * r);
                seen.push(i);
            });
            seen.sort();
            let brute: Vec<usize> = (0..g.len())
                .filter(|&i| {
                    let d = g.displacement(&c, i);
                    d[0] * d[0] + d[1] * d[1] < r * r
                })
                .collect();
            assert_eq!(seen, brute, "periodic = {periodic}");
        }
    }

    #[test]
    fn gradients_exact_on_quadratics() {
        let g = Arc::new(Grid::centered(2, 1.0, 9).unwrap());
        let f = FieldSnapshot::from_fn(g.clone(), 0.0, 2, |x| {
            let (a, b) = (x.coords()[0], x.coords()[1]);
            vec![a * a + 3.0 * b, a * b]
        })
        .unwrap();
        for i in 0..g.len() {
            let x = g.node(i);
            let (a, b) = (x.coords()[0], x.coords()[1]);
            let gr = f.gradient(i);
            let want = [2.0 * a, b, 3.0, a];
            for k in 0..4 {
                assert!((gr[k] - want[k]).abs() < 1e-12, "node {i} entry {k}");
            }
        }
    }

    #[test]
    fn gradient_cache_resets_on_mutation() {
        let g = Arc::new(Grid::centered(1, 1.0, 5).unwrap());
        let mut f = FieldSnapshot::new(g, 0.0, 1, vec![0.0; 5]).unwrap();
        assert_eq!(f.gradient(2), &[0.0]);
        f.values_mut().copy_from_slice(&[-1.0, -0.5, 0.0, 0.5, 1.0]);
        assert!((f.gradient(2)[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn periodic_gradient_wraps() {
        let g = Arc::new(Grid::periodic_box(1, 1.0, 64).unwrap());
        let two_pi = 2.0 * std::f64::consts::PI;
        let f = FieldSnapshot::from_fn(g.clone(), 0.0, 1, |x| vec![(two_pi * x.coords()[0]).sin()])
            .unwrap();
        let h = g.spacing();
        for i in 0..g.len() {
            let x = g.node(i).coords()[0];
            let exact = two_pi * (two_pi * x).cos() * (two_pi * h).sin() / (two_pi * h);
            assert!((f.gradient(i)[0] - exact).abs() < 1e-10);
        }
    }

    #[test]
    fn sample_field_examples() {
        let g = Arc::new(Grid::new(&[0.0], 1.0, &[3], false).unwrap());
        let f = FieldSnapshot::new(g.clone(), 0.0, 1, vec![0.0, 1.0, 1.0]).unwrap();
        assert!((sample_field(&f, &p(&[0.5])).unwrap()[0] - 0.5).abs() < 1e-15);
        assert_eq!(sample_field(&f, &p(&[1.0])).unwrap(), vec![1.0]);
        assert!(matches!(
            sample_field(&f, &p(&[2.5])),
            Err(Error::OutOfDomain(_))
        ));
        let c = FieldSnapshot::from_fn(g, 0.0, 2, |_| vec![0.3, -0.7]).unwrap();
        let v = sample_field(&c, &p(&[1.37])).unwrap();
        assert!((v[0] - 0.3).abs() < 1e-15 && (v[1] + 0.7).abs() < 1e-15);
    }

    #[test]
    fn sample_field_exact_on_affine() {
        let g = Arc::new(Grid::new(&[-1.0, 0.0, 2.0], 0.25, &[5, 6, 4], false).unwrap());
        let aff = |x: &[f64]| vec![1.0 + 2.0 * x[0] - x[1] + 0.5 * x[2], 3.0 * x[1] - x[2]];
        let f = FieldSnapshot::from_fn(g, 0.0, 2, |x| aff(x.coords())).unwrap();
        for q in [[-0.9, 0.1, 2.3], [-0.13, 1.21, 2.74], [0.0, 1.25, 2.75]] {
            let v = sample_field(&f, &p(&q)).unwrap();
            let w = aff(&q);
            assert!((v[0] - w[0]).abs() < 1e-12 && (v[1] - w[1]).abs() < 1e-12);
        }
    }

    #[test]
    fn space_time_field_validation_and_brackets() {
        let g = Arc::new(Grid::centered(1, 1.0, 3).unwrap());
        let mk = |t: f64, v: f64| FieldSnapshot::new(g.clone(), t, 1, vec![v; 3]).unwrap();
        assert!(SpaceTimeField::new(vec![mk(0.0, 0.0), mk(0.0, 1.0)]).is_err());
        assert!(SpaceTimeField::new(vec![]).is_err());
        let f = SpaceTimeField::new(vec![mk(0.0, 0.0), mk(1.0, 1.0), mk(2.0, 3.0)]).unwrap();
        let b = f.bracket(1.5).unwrap();
        assert_eq!((b.lo, b.hi), (1, 2));
        assert!((b.w - 0.5).abs() < 1e-15);
        assert_eq!(f.bracket(2.0).unwrap().lo, 2);
        assert!(matches!(f.bracket(2.5), Err(Error::Coverage { .. })));
        assert!(matches!(
            f.recorded_index(0.5),
            Err(Error::UnrecordedTime { below: Some(_), above: Some(_), .. })
        ));
        assert_eq!(f.velocity(2), vec![2.0; 3]);
    }
}
