//! Backward heat kernel, the scale-normalized densities and their audits.

use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{SpacePoint, SpaceTimePoint, MAX_DIM};
use crate::io::write_csv;
use crate::source::{BallQuery, FieldSource, Sample};

/// `ln(1e16)`: the Gaussian factor drops below `1e-16` of its peak at
/// `|x - x0| = sqrt(4 tau ln(1e16))`.
const GAUSS_TAIL: f64 = 36.841_361_487_904_734;

/// Radius beyond which the kernel at lag `tau` is below `1e-16` of its maximum.
pub fn kernel_truncation_radius(tau: f64) -> f64 {
    (4.0 * tau * GAUSS_TAIL).sqrt()
}

fn kernel(n: usize, r2: f64, tau: f64) -> f64 {
    (4.0 * std::f64::consts::PI * tau).powf(-(n as f64) / 2.0) * (-r2 / (4.0 * tau)).exp()
}

/// `(4 pi (t0 - t))^{-n/2} exp(-|x - x0|^2 / (4 (t0 - t)))`, defined for `t < t0`.
pub fn backward_heat_kernel(x0: &SpaceTimePoint, x: &SpaceTimePoint) -> Result<f64> {
    if x0.x.dim() != x.x.dim() {
        return Err(Error::DimensionMismatch {
            expected: x0.x.dim(),
            found: x.x.dim(),
        });
    }
    let tau = x0.t - x.t;
    if !(tau > 0.0) {
        return Err(Error::OutOfDomain(format!(
            "kernel needs t < t0 (t = {}, t0 = {})",
            x.t, x0.t
        )));
    }
    Ok(kernel(x0.x.dim(), x0.x.dist2(&x.x), tau))
}

/// Radial quintic bump: 1 on `B_s(c)`, 0 outside `B_{2s}(c)`, and
/// `1 - S(|x - c|/s - 1)` in between with `S(u) = 6u^5 - 15u^4 + 10u^3`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CutoffProfile {
    pub center: SpacePoint,
    pub scale: f64,
}

impl CutoffProfile {
    /// Largest slope of the unit-scale profile.
    pub const MAX_SLOPE: f64 = 1.875;

    pub fn new(center: SpacePoint, scale: f64) -> Result<Self> {
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(Error::invalid(format!("cutoff scale {scale} must be positive")));
        }
        Ok(CutoffProfile { center, scale })
    }

    pub fn profile_id(&self) -> &'static str {
        "quintic-radial"
    }

    pub fn support_radius(&self) -> f64 {
        2.0 * self.scale
    }

    fn radial(&self, r: f64) -> (f64, f64) {
        let u = r / self.scale - 1.0;
        if u <= 0.0 {
            (1.0, 0.0)
        } else if u >= 1.0 {
            (0.0, 0.0)
        } else {
            let s = u * u * u * (10.0 + u * (-15.0 + 6.0 * u));
            let ds = 30.0 * u * u * (1.0 - u) * (1.0 - u);
            (1.0 - s, -ds / self.scale)
        }
    }

    /// Value at displacement `disp = x - center`.
    pub fn value_at(&self, disp: &[f64; MAX_DIM]) -> f64 {
        let r = disp[..self.center.dim()].iter().map(|v| v * v).sum::<f64>().sqrt();
        self.radial(r).0
    }

    pub fn gradient_at(&self, disp: &[f64; MAX_DIM]) -> [f64; MAX_DIM] {
        let n = self.center.dim();
        let r = disp[..n].iter().map(|v| v * v).sum::<f64>().sqrt();
        let mut g = [0.0; MAX_DIM];
        let (_, dr) = self.radial(r);
        if dr != 0.0 {
            for a in 0..n {
                g[a] = dr * disp[a] / r;
            }
        }
        g
    }

    pub fn value(&self, x: &SpacePoint) -> f64 {
        self.value_at(&x.sub(&self.center))
    }

    pub fn gradient(&self, x: &SpacePoint) -> [f64; MAX_DIM] {
        self.gradient_at(&x.sub(&self.center))
    }
}

/// Spatial weight inside the Gaussian densities.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Cutoff {
    /// `phi = 1` everywhere.
    Global,
    /// Quintic bump of the given scale centered at the density center.
    Bump { scale: f64 },
}

impl Cutoff {
    fn profile(&self, center: &SpacePoint) -> Result<Option<CutoffProfile>> {
        match self {
            Cutoff::Global => Ok(None),
            Cutoff::Bump { scale } => CutoffProfile::new(*center, *scale).map(Some),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct QuadratureMeta {
    /// Spatial quadrature points summed over all time nodes.
    pub spatial_nodes: usize,
    pub time_nodes: usize,
    /// Largest spatial truncation radius used by a kernel integral.
    pub truncation_radius: f64,
    /// Time nodes obtained by interpolating between recorded snapshots.
    pub interpolated_slices: usize,
}

impl QuadratureMeta {
    fn merge(&mut self, o: &QuadratureMeta) {
        self.spatial_nodes += o.spatial_nodes;
        self.time_nodes += o.time_nodes;
        self.truncation_radius = self.truncation_radius.max(o.truncation_radius);
        self.interpolated_slices += o.interpolated_slices;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DensityReport {
    pub center: SpaceTimePoint,
    pub radius: f64,
    #[serde(rename = "E")]
    pub e: f64,
    #[serde(rename = "E_minus")]
    pub e_minus: f64,
    #[serde(rename = "Psi")]
    pub psi: f64,
    #[serde(rename = "Phi")]
    pub phi: f64,
    pub cutoff: Cutoff,
    pub meta: QuadratureMeta,
}

fn grad2(s: &Sample) -> f64 {
    s.grad.iter().map(|v| v * v).sum()
}

/// Time rule for `[a, b]`; a single midpoint node when neither the source nor
/// the integrand depends on time.
pub(crate) fn rule_for(
    src: &dyn FieldSource,
    a: f64,
    b: f64,
    time_independent: bool,
) -> Result<crate::source::TimeRule> {
    if time_independent && src.is_stationary() {
        let nodes = if b > a { vec![(0.5 * (a + b), b - a)] } else { Vec::new() };
        return Ok(crate::source::TimeRule { nodes, interpolated: 0 });
    }
    src.time_rule(a, b)
}

/// Integrates `f(t, sample)` over `[a, b]` x ball, with per-time window.
#[allow(clippy::too_many_arguments)]
fn band_integral<W, F>(
    src: &dyn FieldSource,
    center: &SpacePoint,
    a: f64,
    b: f64,
    radius: f64,
    time_independent: bool,
    window: W,
    f: F,
) -> Result<(f64, QuadratureMeta)>
where
    W: Fn(f64) -> f64 + Sync,
    F: Fn(f64, &Sample) -> f64 + Sync,
{
    let rule = rule_for(src, a, b, time_independent)?;
    let parts: Vec<Result<(f64, usize, f64)>> = rule
        .nodes
        .par_iter()
        .map(|&(t, w)| {
            let win = window(t);
            let q = BallQuery {
                t,
                center: *center,
                radius,
                window: win,
                need_dudt: false,
            };
            let mut acc = 0.0;
            let count = src.visit_ball(&q, &mut |s| acc += s.weight * f(t, s))?;
            Ok((w * acc, count, win))
        })
        .collect();
    let mut total = 0.0;
    let mut meta = QuadratureMeta {
        time_nodes: rule.nodes.len(),
        interpolated_slices: rule.interpolated,
        ..Default::default()
    };
    for p in parts {
        let (v, c, win) = p?;
        total += v;
        meta.spatial_nodes += c;
        if win.is_finite() {
            meta.truncation_radius = meta.truncation_radius.max(win.min(radius));
        }
    }
    Ok((total, meta))
}

fn slice_integral<F>(
    src: &dyn FieldSource,
    center: &SpacePoint,
    t: f64,
    radius: f64,
    window: f64,
    f: F,
) -> Result<(f64, QuadratureMeta)>
where
    F: Fn(&Sample) -> f64,
{
    let (lo, hi) = src.time_span();
    if t < lo {
        return Err(Error::Coverage { from: t, to: lo });
    }
    if t > hi {
        return Err(Error::Coverage { from: hi, to: t });
    }
    let q = BallQuery {
        t,
        center: *center,
        radius,
        window,
        need_dudt: false,
    };
    let mut acc = 0.0;
    let count = src.visit_ball(&q, &mut |s| acc += s.weight * f(s))?;
    Ok((
        acc,
        QuadratureMeta {
            spatial_nodes: count,
            time_nodes: 1,
            truncation_radius: window.min(radius),
            interpolated_slices: usize::from(!src.is_recorded(t)),
        },
    ))
}

fn check_center(src: &dyn FieldSource, x0: &SpaceTimePoint, rho: f64) -> Result<()> {
    if x0.x.dim() != src.space_dim() {
        return Err(Error::DimensionMismatch {
            expected: src.space_dim(),
            found: x0.x.dim(),
        });
    }
    if !(rho > 0.0 && rho.is_finite()) {
        return Err(Error::invalid(format!("radius {rho} must be positive")));
    }
    Ok(())
}

/// `rho^{-n} int_{P_rho(X0)} |grad u|^2`.
pub fn energy_density(src: &dyn FieldSource, x0: &SpaceTimePoint, rho: f64) -> Result<f64> {
    energy_with_meta(src, x0, rho, false).map(|p| p.0)
}

/// `rho^{-n} int_{B_rho(x0) x (t0 - rho^2, t0)} |grad u|^2`.
pub fn backward_energy_density(
    src: &dyn FieldSource,
    x0: &SpaceTimePoint,
    rho: f64,
) -> Result<f64> {
    energy_with_meta(src, x0, rho, true).map(|p| p.0)
}

fn energy_with_meta(
    src: &dyn FieldSource,
    x0: &SpaceTimePoint,
    rho: f64,
    backward: bool,
) -> Result<(f64, QuadratureMeta)> {
    check_center(src, x0, rho)?;
    let r2 = rho * rho;
    let end = if backward { x0.t } else { x0.t + r2 };
    let (v, meta) = band_integral(src, &x0.x, x0.t - r2, end, rho, true, |_| f64::INFINITY, |_, s| {
        grad2(s)
    })?;
    Ok((v / rho.powi(src.space_dim() as i32), meta))
}

/// `(rho^2/2) int_{t = t0 - rho^2} phi^2 |grad u|^2 G`.
pub fn psi_density(
    src: &dyn FieldSource,
    x0: &SpaceTimePoint,
    rho: f64,
    cutoff: Cutoff,
) -> Result<f64> {
    psi_with_meta(src, x0, rho, cutoff).map(|p| p.0)
}

fn psi_with_meta(
    src: &dyn FieldSource,
    x0: &SpaceTimePoint,
    rho: f64,
    cutoff: Cutoff,
) -> Result<(f64, QuadratureMeta)> {
    check_center(src, x0, rho)?;
    let n = src.space_dim();
    let prof = cutoff.profile(&x0.x)?;
    let radius = prof.map_or(f64::INFINITY, |p| p.support_radius());
    let tau = rho * rho;
    let (v, meta) = slice_integral(
        src,
        &x0.x,
        x0.t - tau,
        radius,
        kernel_truncation_radius(tau),
        |s| {
            let phi = prof.map_or(1.0, |p| p.value_at(s.disp));
            let r2: f64 = s.disp[..n].iter().map(|v| v * v).sum();
            phi * phi * grad2(s) * kernel(n, r2, tau)
        },
    )?;
    Ok((0.5 * rho * rho * v, meta))
}

/// `(1/2) int_{t0 - 4 rho^2}^{t0 - rho^2} int phi^2 |grad u|^2 G`.
pub fn phi_density(
    src: &dyn FieldSource,
    x0: &SpaceTimePoint,
    rho: f64,
    cutoff: Cutoff,
) -> Result<f64> {
    phi_with_meta(src, x0, rho, cutoff).map(|p| p.0)
}

fn phi_with_meta(
    src: &dyn FieldSource,
    x0: &SpaceTimePoint,
    rho: f64,
    cutoff: Cutoff,
) -> Result<(f64, QuadratureMeta)> {
    check_center(src, x0, rho)?;
    let n = src.space_dim();
    let prof = cutoff.profile(&x0.x)?;
    let radius = prof.map_or(f64::INFINITY, |p| p.support_radius());
    let t0 = x0.t;
    let (v, meta) = band_integral(
        src,
        &x0.x,
        t0 - 4.0 * rho * rho,
        t0 - rho * rho,
        radius,
        false,
        |t| kernel_truncation_radius(t0 - t),
        |t, s| {
            let phi = prof.map_or(1.0, |p| p.value_at(s.disp));
            let r2: f64 = s.disp[..n].iter().map(|v| v * v).sum();
            phi * phi * grad2(s) * kernel(n, r2, t0 - t)
        },
    )?;
    Ok((0.5 * v, meta))
}

/// All four densities at one center and scale.
pub fn density_suite(
    src: &dyn FieldSource,
    x0: &SpaceTimePoint,
    rho: f64,
    cutoff: Cutoff,
) -> Result<DensityReport> {
    let (e, m1) = energy_with_meta(src, x0, rho, false)?;
    let (e_minus, m2) = energy_with_meta(src, x0, rho, true)?;
    let (psi, m3) = psi_with_meta(src, x0, rho, cutoff)?;
    let (phi, m4) = phi_with_meta(src, x0, rho, cutoff)?;
    let mut meta = m1;
    for m in [&m2, &m3, &m4] {
        meta.merge(m);
    }
    Ok(DensityReport {
        center: *x0,
        radius: rho,
        e,
        e_minus,
        psi,
        phi,
        cutoff,
        meta,
    })
}

/// `Phi(R) - Phi(r)`.
pub fn density_gap_w(
    src: &dyn FieldSource,
    x0: &SpaceTimePoint,
    big_r: f64,
    r: f64,
    cutoff: Cutoff,
) -> Result<f64> {
    if !(r > 0.0 && r <= big_r) {
        return Err(Error::invalid(format!("need 0 < r <= R, got r = {r}, R = {big_r}")));
    }
    if r == big_r {
        return Ok(0.0);
    }
    Ok(phi_density(src, x0, big_r, cutoff)? - phi_density(src, x0, r, cutoff)?)
}

/// 40 logarithmically spaced constants in `[1e-4, 1e4]`.
pub fn default_c1_grid() -> Vec<f64> {
    (0..40)
        .map(|i| 10f64.powf(-4.0 + 8.0 * i as f64 / 39.0))
        .collect()
}

/// `F(R) e^{C (R - r)} - F(r) + C (R - r)`.
pub fn monotonicity_expression(r: f64, big_r: f64, f_r: f64, f_big_r: f64, c: f64) -> f64 {
    f_big_r * (c * (big_r - r)).exp() - f_r + c * (big_r - r)
}

/// Least constant (0 first, then the grid) making every expression at least
/// `-tolerance`; `None` when no grid value works.
pub fn least_feasible_c1(
    pairs: &[(f64, f64, f64, f64)],
    c_grid: &[f64],
    tolerance: f64,
) -> Option<f64> {
    let ok = |c: f64| {
        pairs
            .iter()
            .all(|&(r, rr, fr, frr)| monotonicity_expression(r, rr, fr, frr, c) >= -tolerance)
    };
    std::iter::once(0.0).chain(c_grid.iter().copied()).find(|&c| ok(c))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonotonicityPair {
    pub r: f64,
    pub big_r: f64,
    pub phi_r: f64,
    pub phi_big_r: f64,
    pub psi_r: f64,
    pub psi_big_r: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonotonicityReport {
    pub center: SpaceTimePoint,
    pub pairs: Vec<MonotonicityPair>,
    pub c_grid: Vec<f64>,
    pub tolerance: f64,
    /// `None` when no grid constant works for `Phi`.
    pub least_c1_phi: Option<f64>,
    pub least_c1_psi: Option<f64>,
    /// Pairs whose `Psi` expression is negative at the `Phi` constant. The
    /// `Psi` inequality is only expected for almost every radius, so these are
    /// flags rather than failures.
    pub psi_flagged: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonotonicityOptions {
    pub c_grid: Vec<f64>,
    pub tolerance: f64,
}

impl Default for MonotonicityOptions {
    fn default() -> Self {
        MonotonicityOptions {
            c_grid: default_c1_grid(),
            tolerance: 0.0,
        }
    }
}

pub fn monotonicity_audit(
    src: &dyn FieldSource,
    x0: &SpaceTimePoint,
    radii: &[f64],
    cutoff: Cutoff,
    opts: &MonotonicityOptions,
) -> Result<MonotonicityReport> {
    if radii.windows(2).any(|w| !(w[1] > w[0])) || radii.iter().any(|&r| !(r > 0.0)) {
        return Err(Error::invalid("radii must be positive and increasing"));
    }
    let vals: Vec<(f64, f64)> = radii
        .iter()
        .map(|&r| Ok((phi_density(src, x0, r, cutoff)?, psi_density(src, x0, r, cutoff)?)))
        .collect::<Result<_>>()?;
    let pairs: Vec<MonotonicityPair> = (1..radii.len())
        .map(|i| MonotonicityPair {
            r: radii[i - 1],
            big_r: radii[i],
            phi_r: vals[i - 1].0,
            phi_big_r: vals[i].0,
            psi_r: vals[i - 1].1,
            psi_big_r: vals[i].1,
        })
        .collect();
    Ok(summarize_pairs(*x0, pairs, opts))
}

/// Fits the constants over an arbitrary collection of pairs.
pub fn summarize_pairs(
    center: SpaceTimePoint,
    pairs: Vec<MonotonicityPair>,
    opts: &MonotonicityOptions,
) -> MonotonicityReport {
    let phi: Vec<_> = pairs.iter().map(|p| (p.r, p.big_r, p.phi_r, p.phi_big_r)).collect();
    let psi: Vec<_> = pairs.iter().map(|p| (p.r, p.big_r, p.psi_r, p.psi_big_r)).collect();
    let least_c1_phi = least_feasible_c1(&phi, &opts.c_grid, opts.tolerance);
    let least_c1_psi = least_feasible_c1(&psi, &opts.c_grid, opts.tolerance);
    let c_ref = least_c1_phi.unwrap_or_else(|| opts.c_grid.last().copied().unwrap_or(0.0));
    let psi_flagged = psi
        .iter()
        .enumerate()
        .filter(|(_, &(r, rr, a, b))| monotonicity_expression(r, rr, a, b, c_ref) < -opts.tolerance)
        .map(|(i, _)| i)
        .collect();
    MonotonicityReport {
        center,
        pairs,
        c_grid: opts.c_grid.clone(),
        tolerance: opts.tolerance,
        least_c1_phi,
        least_c1_psi,
        psi_flagged,
    }
}

/// `M_ij = r^{-n} int_{t0 - 4r^2}^{t0 - r^2} int_{B_r(x0)} sum_a d_i u^a d_j u^a`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DirectionalEnergyMatrix {
    pub n: usize,
    /// Row-major `n x n`.
    pub m: Vec<f64>,
    pub center: SpacePoint,
    pub t0: f64,
    pub r: f64,
    pub t_from: f64,
    pub t_to: f64,
}

impl DirectionalEnergyMatrix {
    pub fn from_matrix(n: usize, m: Vec<f64>) -> Result<Self> {
        if m.len() != n * n {
            return Err(Error::DimensionMismatch {
                expected: n * n,
                found: m.len(),
            });
        }
        Ok(DirectionalEnergyMatrix {
            n,
            m,
            center: SpacePoint::origin(n.clamp(1, MAX_DIM)),
            t0: 0.0,
            r: 1.0,
            t_from: 0.0,
            t_to: 0.0,
        })
    }

    pub fn entry(&self, i: usize, j: usize) -> f64 {
        self.m[i * self.n + j]
    }

    pub fn trace(&self) -> f64 {
        (0..self.n).map(|i| self.entry(i, i)).sum()
    }

    /// Eigenvalues in increasing order.
    pub fn eigenvalues(&self) -> Vec<f64> {
        let mat = DMatrix::from_row_slice(self.n, self.n, &self.m);
        let mut ev: Vec<f64> = SymmetricEigen::new(mat).eigenvalues.iter().copied().collect();
        ev.sort_by(|a, b| a.total_cmp(b));
        ev
    }
}

pub fn directional_energy_matrix(
    src: &dyn FieldSource,
    x0: &SpacePoint,
    t0: f64,
    r: f64,
) -> Result<DirectionalEnergyMatrix> {
    let x = SpaceTimePoint::new(*x0, t0)?;
    check_center(src, &x, r)?;
    let n = src.space_dim();
    let d = src.target_dim();
    let (a, b) = (t0 - 4.0 * r * r, t0 - r * r);
    let rule = rule_for(src, a, b, true)?;
    let parts: Vec<Result<Vec<f64>>> = rule
        .nodes
        .par_iter()
        .map(|&(t, w)| {
            let q = BallQuery {
                t,
                center: *x0,
                radius: r,
                window: f64::INFINITY,
                need_dudt: false,
            };
            let mut m = vec![0.0; n * n];
            src.visit_ball(&q, &mut |s| {
                for i in 0..n {
                    let gi = &s.grad[i * d..(i + 1) * d];
                    for j in i..n {
                        let gj = &s.grad[j * d..(j + 1) * d];
                        let dot: f64 = gi.iter().zip(gj).map(|(p, q)| p * q).sum();
                        m[i * n + j] += s.weight * dot;
                    }
                }
            })?;
            m.iter_mut().for_each(|v| *v *= w);
            Ok(m)
        })
        .collect();
    let mut m = vec![0.0; n * n];
    for p in parts {
        for (acc, v) in m.iter_mut().zip(p?) {
            *acc += v;
        }
    }
    let scale = r.powi(-(n as i32));
    for i in 0..n {
        for j in i..n {
            let v = m[i * n + j] * scale;
            m[i * n + j] = v;
            m[j * n + i] = v;
        }
    }
    Ok(DirectionalEnergyMatrix {
        n,
        m,
        center: *x0,
        t0,
        r,
        t_from: a,
        t_to: b,
    })
}

/// Sum of the `k + 1` smallest eigenvalues, the least directional energy over
/// `(k + 1)`-dimensional subspaces.
pub fn symmetry_defect(m: &DirectionalEnergyMatrix, k: usize) -> Result<f64> {
    if k >= m.n {
        return Err(Error::invalid(format!("k = {k} must be below n = {}", m.n)));
    }
    let ev = m.eigenvalues();
    Ok(ev[..=k].iter().sum::<f64>().max(0.0))
}

/// CSV with columns `x..., t, rho, E, E_minus, Psi, Phi`.
pub fn write_density_csv(path: &Path, reports: &[DensityReport]) -> Result<()> {
    let n = reports.first().map_or(0, |r| r.center.x.dim());
    let names: Vec<String> = (1..=n).map(|i| format!("x{i}")).collect();
    let mut header: Vec<&str> = names.iter().map(|s| s.as_str()).collect();
    header.extend(["t", "rho", "E", "E_minus", "Psi", "Phi"]);
    let rows: Vec<Vec<f64>> = reports
        .iter()
        .map(|r| {
            let mut row = r.center.x.coords().to_vec();
            row.extend([r.center.t, r.radius, r.e, r.e_minus, r.psi, r.phi]);
            row
        })
        .collect();
    write_csv(path, &header, &rows)
}
