//! Sources of gradient data for space-time quadrature: recorded grid fields and
//! closed-form fields on adaptive lattices.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{SpacePoint, SpaceTimeField, MAX_DIM};

/// One spatial quadrature point.
pub struct Sample<'a> {
    /// Point minus the query center.
    pub disp: &'a [f64; MAX_DIM],
    pub weight: f64,
    /// `n` rows of `d` entries.
    pub grad: &'a [f64],
    pub dudt: Option<&'a [f64]>,
}

#[derive(Debug, Clone, Copy)]
pub struct BallQuery {
    pub t: f64,
    pub center: SpacePoint,
    /// Support radius (strict); infinite means unbounded.
    pub radius: f64,
    /// Half-width beyond which the integrand is negligible.
    pub window: f64,
    pub need_dudt: bool,
}

/// Time quadrature: `(t, weight)` pairs and the number of nodes that needed
/// interpolation between recorded snapshots.
#[derive(Debug, Clone, Default)]
pub struct TimeRule {
    pub nodes: Vec<(f64, f64)>,
    pub interpolated: usize,
}

pub trait FieldSource: Sync {
    fn space_dim(&self) -> usize;
    fn target_dim(&self) -> usize;
    fn time_span(&self) -> (f64, f64);
    fn time_rule(&self, a: f64, b: f64) -> Result<TimeRule>;
    /// Calls `visit` for every quadrature point of the ball at time `q.t` and
    /// returns the number of points visited.
    fn visit_ball(&self, q: &BallQuery, visit: &mut dyn FnMut(&Sample)) -> Result<usize>;
    /// Whether data at `t` is stored rather than interpolated.
    fn is_recorded(&self, _t: f64) -> bool {
        true
    }
    /// Time-independent sources integrate time-independent integrands with a
    /// single node.
    fn is_stationary(&self) -> bool {
        false
    }
}

/// Composite Simpson rule with `intervals` (even) subintervals.
pub fn simpson_rule(a: f64, b: f64, intervals: usize) -> Vec<(f64, f64)> {
    if b <= a {
        return Vec::new();
    }
    let m = intervals.max(2) + intervals % 2;
    let h = (b - a) / m as f64;
    (0..=m)
        .map(|i| {
            let w = if i == 0 || i == m {
                1.0
            } else if i % 2 == 1 {
                4.0
            } else {
                2.0
            };
            (a + i as f64 * h, w * h / 3.0)
        })
        .collect()
}

/// Time intervals used by stationary sources.
pub const STATIONARY_TIME_INTERVALS: usize = 64;

impl FieldSource for SpaceTimeField {
    fn space_dim(&self) -> usize {
        self.grid().dim()
    }

    fn target_dim(&self) -> usize {
        SpaceTimeField::target_dim(self)
    }

    fn time_span(&self) -> (f64, f64) {
        SpaceTimeField::time_span(self)
    }

    fn time_rule(&self, a: f64, b: f64) -> Result<TimeRule> {
        if b <= a {
            return Ok(TimeRule::default());
        }
        if self.is_stationary() {
            return Ok(TimeRule {
                nodes: simpson_rule(a, b, STATIONARY_TIME_INTERVALS),
                interpolated: 0,
            });
        }
        self.check_coverage(a, b)?;
        let times = self.times();
        let span = (b - a).abs().max(a.abs()).max(b.abs());
        let tol = 1e-9 * span;
        let mut ts = vec![a];
        ts.extend(times.iter().copied().filter(|&s| s > a + tol && s < b - tol));
        ts.push(b);
        let mut interpolated = 0;
        for &end in [a, b].iter() {
            if !times.iter().any(|&s| (s - end).abs() <= tol) {
                interpolated += 1;
            }
        }
        let mut nodes = Vec::with_capacity(ts.len());
        for i in 0..ts.len() {
            let left = if i > 0 { ts[i] - ts[i - 1] } else { 0.0 };
            let right = if i + 1 < ts.len() { ts[i + 1] - ts[i] } else { 0.0 };
            nodes.push((ts[i], 0.5 * (left + right)));
        }
        Ok(TimeRule { nodes, interpolated })
    }

    fn is_recorded(&self, t: f64) -> bool {
        self.recorded_index(t).is_ok()
    }

    fn is_stationary(&self) -> bool {
        SpaceTimeField::is_stationary(self)
    }

    fn visit_ball(&self, q: &BallQuery, visit: &mut dyn FnMut(&Sample)) -> Result<usize> {
        let grid = self.grid();
        if q.center.dim() != grid.dim() {
            return Err(Error::DimensionMismatch {
                expected: grid.dim(),
                found: q.center.dim(),
            });
        }
        let br = self.bracket(q.t)?;
        let n = grid.dim();
        let d = SpaceTimeField::target_dim(self);
        let nd = n * d;
        let lo = &self.snapshots()[br.lo];
        let hi = &self.snapshots()[br.hi];
        let (vlo, vhi) = if q.need_dudt {
            (Some(self.velocity(br.lo)), Some(self.velocity(br.hi)))
        } else {
            (None, None)
        };
        let weight = grid.cell_volume();
        let reach = q.radius.min(q.window);
        let mut count = 0;
        let mut gbuf = [0.0; MAX_DIM * MAX_DIM];
        let mut vbuf = [0.0; MAX_DIM];
        let w = br.w;
        grid.for_each_in_ball(&q.center, reach, |idx, disp, _| {
            let grad: &[f64] = if w == 0.0 {
                lo.gradient(idx)
            } else {
                let (a, b) = (lo.gradient(idx), hi.gradient(idx));
                for k in 0..nd {
                    gbuf[k] = (1.0 - w) * a[k] + w * b[k];
                }
                &gbuf[..nd]
            };
            let dudt = match (&vlo, &vhi) {
                (Some(a), Some(b)) => {
                    for k in 0..d {
                        vbuf[k] = (1.0 - w) * a[idx * d + k] + w * b[idx * d + k];
                    }
                    Some(&vbuf[..d])
                }
                _ => None,
            };
            visit(&Sample {
                disp,
                weight,
                grad,
                dudt,
            });
            count += 1;
        });
        Ok(count)
    }
}

/// Closed-form fields used as analytic oracles.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum AnalyticKind {
    /// `x / |x|` into `S^{n-1}`.
    Hedgehog { n: usize },
    /// `(x_2, x_3) / |(x_2, x_3)|` into `S^1`, singular along the `x_1` axis.
    LineSingular,
    Constant { n: usize, value: Vec<f64> },
}

/// A time-independent closed-form field integrated on a lattice that is
/// refined around the known singular set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalyticField {
    pub kind: AnalyticKind,
    /// Cells per axis of the base lattice.
    pub cells: usize,
    /// Maximal number of bisections of cells touching the singular set.
    pub refine_depth: usize,
}

impl AnalyticField {
    pub fn new(kind: AnalyticKind) -> Result<Self> {
        match &kind {
            AnalyticKind::Hedgehog { n } if !(2..=MAX_DIM).contains(n) => {
                return Err(Error::invalid(format!("hedgehog dimension {n}")));
            }
            AnalyticKind::Constant { n, value }
                if !(1..=MAX_DIM).contains(n) || value.is_empty() || value.len() > MAX_DIM =>
            {
                return Err(Error::invalid("constant field dimensions"));
            }
            _ => {}
        }
        Ok(AnalyticField {
            kind,
            cells: 96,
            refine_depth: 6,
        })
    }

    pub fn hedgehog(n: usize) -> Self {
        AnalyticField::new(AnalyticKind::Hedgehog { n }).expect("valid hedgehog dimension")
    }

    pub fn line_singular() -> Self {
        AnalyticField::new(AnalyticKind::LineSingular).expect("line field")
    }

    pub fn with_resolution(mut self, cells: usize, refine_depth: usize) -> Self {
        self.cells = cells.max(2);
        self.refine_depth = refine_depth;
        self
    }

    pub fn dims(&self) -> (usize, usize) {
        match &self.kind {
            AnalyticKind::Hedgehog { n } => (*n, *n),
            AnalyticKind::LineSingular => (3, 2),
            AnalyticKind::Constant { n, value } => (*n, value.len()),
        }
    }

    /// Distance from `x` to the singular set (infinite when smooth).
    pub fn singular_distance(&self, x: &[f64]) -> f64 {
        match &self.kind {
            AnalyticKind::Hedgehog { n } => x[..*n].iter().map(|v| v * v).sum::<f64>().sqrt(),
            AnalyticKind::LineSingular => x[1].hypot(x[2]),
            AnalyticKind::Constant { .. } => f64::INFINITY,
        }
    }

    /// Field value, `None` on the singular set.
    pub fn value(&self, x: &[f64]) -> Option<Vec<f64>> {
        match &self.kind {
            AnalyticKind::Hedgehog { n } => {
                let r = self.singular_distance(x);
                (r > 0.0).then(|| x[..*n].iter().map(|v| v / r).collect())
            }
            AnalyticKind::LineSingular => {
                let r = self.singular_distance(x);
                (r > 0.0).then(|| vec![x[1] / r, x[2] / r])
            }
            AnalyticKind::Constant { value, .. } => Some(value.clone()),
        }
    }

    /// Gradient rows written into `out` (`n * d` entries); false on the
    /// singular set.
    pub fn gradient(&self, x: &[f64], out: &mut [f64]) -> bool {
        let (n, d) = self.dims();
        out[..n * d].iter_mut().for_each(|v| *v = 0.0);
        match &self.kind {
            AnalyticKind::Hedgehog { .. } => {
                let r = self.singular_distance(x);
                if r == 0.0 {
                    return false;
                }
                for i in 0..n {
                    for a in 0..d {
                        let delta = if i == a { 1.0 } else { 0.0 };
                        out[i * d + a] = (delta - x[i] * x[a] / (r * r)) / r;
                    }
                }
                true
            }
            AnalyticKind::LineSingular => {
                let r = self.singular_distance(x);
                if r == 0.0 {
                    return false;
                }
                let y = [x[1], x[2]];
                for j in 0..2 {
                    for a in 0..2 {
                        let delta = if j == a { 1.0 } else { 0.0 };
                        out[(j + 1) * d + a] = (delta - y[j] * y[a] / (r * r)) / r;
                    }
                }
                true
            }
            AnalyticKind::Constant { .. } => true,
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn visit_cell(
        &self,
        q: &BallQuery,
        c: &[f64; MAX_DIM],
        hc: f64,
        depth: usize,
        visit: &mut dyn FnMut(&Sample),
        count: &mut usize,
        gbuf: &mut [f64],
    ) {
        let (n, _) = self.dims();
        let mut x = [0.0; MAX_DIM];
        for a in 0..n {
            x[a] = q.center.coords()[a] + c[a];
        }
        if depth < self.refine_depth && self.singular_distance(&x) < (n as f64).sqrt() * hc {
            let quarter = 0.25 * hc;
            for child in 0..(1usize << n) {
                let mut cc = *c;
                for a in 0..n {
                    cc[a] += if child >> a & 1 == 1 { quarter } else { -quarter };
                }
                self.visit_cell(q, &cc, 0.5 * hc, depth + 1, visit, count, gbuf);
            }
            return;
        }
        let r2: f64 = c[..n].iter().map(|v| v * v).sum();
        if q.radius.is_finite() && r2 >= q.radius * q.radius {
            return;
        }
        if !self.gradient(&x, gbuf) {
            return;
        }
        let zero = [0.0; MAX_DIM];
        visit(&Sample {
            disp: c,
            weight: hc.powi(n as i32),
            grad: gbuf,
            dudt: q.need_dudt.then_some(&zero[..self.dims().1]),
        });
        *count += 1;
    }
}

impl FieldSource for AnalyticField {
    fn space_dim(&self) -> usize {
        self.dims().0
    }

    fn target_dim(&self) -> usize {
        self.dims().1
    }

    fn time_span(&self) -> (f64, f64) {
        (f64::NEG_INFINITY, f64::INFINITY)
    }

    fn is_stationary(&self) -> bool {
        true
    }

    fn time_rule(&self, a: f64, b: f64) -> Result<TimeRule> {
        Ok(TimeRule {
            nodes: simpson_rule(a, b, STATIONARY_TIME_INTERVALS),
            interpolated: 0,
        })
    }

    fn visit_ball(&self, q: &BallQuery, visit: &mut dyn FnMut(&Sample)) -> Result<usize> {
        let (n, d) = self.dims();
        if q.center.dim() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                found: q.center.dim(),
            });
        }
        let half = q.radius.min(q.window);
        if !half.is_finite() {
            return Err(Error::invalid("analytic quadrature needs a finite radius or window"));
        }
        let m = self.cells;
        let hc = 2.0 * half / m as f64;
        let mut count = 0;
        let mut gbuf = vec![0.0; n * d];
        let mut mi = [0usize; MAX_DIM];
        loop {
            let mut c = [0.0; MAX_DIM];
            for a in 0..n {
                c[a] = -half + (mi[a] as f64 + 0.5) * hc;
            }
            self.visit_cell(q, &c, hc, 0, visit, &mut count, &mut gbuf);
            let mut a = n;
            loop {
                if a == 0 {
                    return Ok(count);
                }
                a -= 1;
                if mi[a] + 1 < m {
                    mi[a] += 1;
                    break;
                }
                mi[a] = 0;
            }
        }
    }
}
