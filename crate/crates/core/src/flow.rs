//! Explicit integration of the harmonic map flow into spheres and of its
//! Ginzburg-Landau relaxation.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::densities::CutoffProfile;
use crate::error::{Error, Result};
use crate::geometry::{FieldSnapshot, Grid, SpaceTimeField, SpatialBall, StepRecord, MAX_DIM};
use crate::source::{AnalyticField, AnalyticKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scheme {
    ProjectedExplicit,
    GinzburgLandau,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Boundary {
    /// Boundary nodes keep their initial values.
    FixedDirichlet,
    Periodic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlowConfig {
    pub scheme: Scheme,
    pub dt: f64,
    pub end_time: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gl_epsilon: Option<f64>,
    pub boundary: Boundary,
    pub record_every: usize,
}

impl FlowConfig {
    pub fn projected(dt: f64, end_time: f64, boundary: Boundary) -> Self {
        FlowConfig {
            scheme: Scheme::ProjectedExplicit,
            dt,
            end_time,
            gl_epsilon: None,
            boundary,
            record_every: 1,
        }
    }

    pub fn ginzburg_landau(dt: f64, end_time: f64, epsilon: f64, boundary: Boundary) -> Self {
        FlowConfig {
            scheme: Scheme::GinzburgLandau,
            dt,
            end_time,
            gl_epsilon: Some(epsilon),
            boundary,
            record_every: 1,
        }
    }

    pub fn with_record_every(mut self, k: usize) -> Self {
        self.record_every = k;
        self
    }

    /// Largest stable step `h^2 / (4n)`.
    pub fn max_stable_dt(grid: &Grid) -> f64 {
        grid.spacing().powi(2) / (4.0 * grid.dim() as f64)
    }

    pub fn validate(&self, grid: &Grid) -> Result<()> {
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(Error::invalid(format!("dt = {} must be positive", self.dt)));
        }
        let guard = Self::max_stable_dt(grid);
        if self.dt > guard * (1.0 + 1e-12) {
            return Err(Error::invalid(format!(
                "dt = {} exceeds the stability bound h^2/(4n) = {guard}",
                self.dt
            )));
        }
        if !self.end_time.is_finite() {
            return Err(Error::invalid("end_time must be finite"));
        }
        if self.record_every == 0 {
            return Err(Error::invalid("record_every must be positive"));
        }
        if (self.boundary == Boundary::Periodic) != grid.is_periodic() {
            return Err(Error::invalid("boundary kind does not match the grid"));
        }
        if self.scheme == Scheme::GinzburgLandau {
            let eps = self
                .gl_epsilon
                .ok_or_else(|| Error::invalid("gl_epsilon required for ginzburg-landau"))?;
            if !(eps > 0.0) {
                return Err(Error::invalid("gl_epsilon must be positive"));
            }
            if self.dt * 2.0 / (eps * eps) > 1.0 {
                return Err(Error::invalid(format!(
                    "dt = {} too large for the penalty: need dt <= eps^2/2 = {}",
                    self.dt,
                    eps * eps / 2.0
                )));
            }
        }
        Ok(())
    }
}

/// `|grad u|^2 u`, the sphere form of the second fundamental form term.
pub fn second_fundamental_term(value: &[f64], gradient: &[f64]) -> Result<Vec<f64>> {
    let norm = value.iter().map(|v| v * v).sum::<f64>().sqrt();
    if (norm - 1.0).abs() > 1e-8 {
        return Err(Error::Constraint(format!("|u| = {norm} is not 1")));
    }
    let d = value.len();
    if d == 0 || !gradient.len().is_multiple_of(d) {
        return Err(Error::DimensionMismatch {
            expected: d,
            found: gradient.len(),
        });
    }
    let g2: f64 = gradient.iter().map(|v| v * v).sum();
    Ok(value.iter().map(|v| g2 * v).collect())
}

/// Standard `2n + 1` point Laplacian. Boundary nodes of non-periodic grids get 0.
pub fn laplacian(f: &FieldSnapshot) -> Vec<f64> {
    let grid = f.grid();
    let n = grid.dim();
    let d = f.target_dim();
    let h2 = grid.spacing().powi(2);
    let vals = f.values();
    let mut out = vec![0.0; vals.len()];
    out.par_chunks_mut(d).enumerate().for_each(|(idx, o)| {
        let mi = grid.multi_index(idx);
        let mut nb = [[0usize; 2]; MAX_DIM];
        for a in 0..n {
            let c = grid.counts()[a];
            let s = grid.stride(a);
            let i = mi[a];
            if grid.is_periodic() {
                nb[a] = [
                    idx - i * s + ((i + c - 1) % c) * s,
                    idx - i * s + ((i + 1) % c) * s,
                ];
            } else {
                if i == 0 || i == c - 1 {
                    return;
                }
                nb[a] = [idx - s, idx + s];
            }
        }
        for k in 0..d {
            let centre = vals[idx * d + k];
            let mut acc = 0.0;
            for pair in nb.iter().take(n) {
                acc += vals[pair[0] * d + k] + vals[pair[1] * d + k] - 2.0 * centre;
            }
            o[k] = acc / h2;
        }
    });
    out
}

fn is_boundary(grid: &Grid, idx: usize) -> bool {
    if grid.is_periodic() {
        return false;
    }
    let mi = grid.multi_index(idx);
    (0..grid.dim()).any(|a| mi[a] == 0 || mi[a] == grid.counts()[a] - 1)
}

/// One explicit Euler step of size `cfg.dt`.
pub fn flow_step(f: &FieldSnapshot, cfg: &FlowConfig) -> Result<FieldSnapshot> {
    step_with(f, cfg, cfg.dt)
}

fn step_with(f: &FieldSnapshot, cfg: &FlowConfig, dt: f64) -> Result<FieldSnapshot> {
    let grid = f.grid().clone();
    cfg.validate(&grid)?;
    let d = f.target_dim();
    let n = grid.dim();
    if cfg.scheme == Scheme::ProjectedExplicit {
        let dev = f.max_unit_deviation();
        if dev > 1e-8 {
            return Err(Error::Constraint(format!(
                "projected scheme needs unit values, max ||u| - 1| = {dev:e}"
            )));
        }
    }
    let lap = laplacian(f);
    let grads = f.gradients();
    let vals = f.values();
    let inv_eps2 = cfg.gl_epsilon.map(|e| 1.0 / (e * e)).unwrap_or(0.0);
    let mut out = vec![0.0; vals.len()];
    let bad = out
        .par_chunks_mut(d)
        .enumerate()
        .map(|(idx, w)| {
            let u = &vals[idx * d..(idx + 1) * d];
            if is_boundary(&grid, idx) {
                w.copy_from_slice(u);
                return None;
            }
            let l = &lap[idx * d..(idx + 1) * d];
            match cfg.scheme {
                Scheme::ProjectedExplicit => {
                    let g2: f64 = grads[idx * n * d..(idx + 1) * n * d]
                        .iter()
                        .map(|v| v * v)
                        .sum();
                    for k in 0..d {
                        w[k] = u[k] + dt * (l[k] + g2 * u[k]);
                    }
                    let norm = w.iter().map(|v| v * v).sum::<f64>().sqrt();
                    if norm < 1e-8 {
                        return Some((idx, norm));
                    }
                    w.iter_mut().for_each(|v| *v /= norm);
                }
                Scheme::GinzburgLandau => {
                    let m = u.iter().map(|v| v * v).sum::<f64>().sqrt();
                    if m < 1e-8 {
                        return Some((idx, m));
                    }
                    let pull = inv_eps2 * 2.0 * (1.0 - m) / m;
                    for k in 0..d {
                        w[k] = u[k] + dt * (l[k] + pull * u[k]);
                    }
                }
            }
            None
        })
        .flatten()
        .min_by_key(|(idx, _)| *idx);
    if let Some((node, norm)) = bad {
        return Err(Error::DegenerateStep { node, norm });
    }
    FieldSnapshot::new(grid, f.time() + dt, d, out)
}

/// Integrates from `initial.time()` to `cfg.end_time`, recording every
/// `record_every`-th state and the final one. Each recorded snapshot carries
/// the discrete velocity of the step that produced it.
pub fn run_flow(initial: &FieldSnapshot, cfg: &FlowConfig) -> Result<SpaceTimeField> {
    cfg.validate(initial.grid())?;
    let t0 = initial.time();
    let total = cfg.end_time - t0;
    let steps = if total <= 0.0 {
        0
    } else {
        (total / cfg.dt - 1e-9).ceil().max(1.0) as usize
    };
    let mut recorded = vec![initial.clone()];
    let mut monitor = Vec::with_capacity(steps);
    let mut cur = initial.clone();
    cur.clear_time_derivative();
    for k in 1..=steps {
        let dt = if k == steps {
            cfg.end_time - cur.time()
        } else {
            cfg.dt
        };
        let mut next = step_with(&cur, cfg, dt).map_err(|e| Error::StepFailed {
            time: cur.time(),
            source: Box::new(e),
        })?;
        if k == steps {
            next.set_time(cfg.end_time);
        }
        let vel: Vec<f64> = next
            .values()
            .iter()
            .zip(cur.values())
            .map(|(a, b)| (a - b) / dt)
            .collect();
        let d = next.target_dim();
        let max_dudt = vel
            .chunks(d)
            .map(|v| v.iter().map(|x| x * x).sum::<f64>().sqrt())
            .fold(0.0, f64::max);
        let max_grad = (0..next.grid().len())
            .map(|i| next.grad_norm2(i))
            .fold(0.0, f64::max)
            .sqrt();
        monitor.push(StepRecord {
            time: next.time(),
            max_dudt,
            max_grad,
            max_unit_deviation: next.max_unit_deviation(),
        });
        if k == 1 && recorded[0].time_derivative().is_none() {
            let first = recorded.pop().expect("initial snapshot");
            recorded.push(first.with_time_derivative(vel.clone())?);
        }
        if k % cfg.record_every == 0 || k == steps {
            recorded.push(next.clone().with_time_derivative(vel)?);
        }
        cur = next;
    }
    Ok(SpaceTimeField::new(recorded)?.with_monitor(monitor))
}

/// What to do when a grid node falls on the singular set of a closed-form map.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum SingularPolicy {
    #[default]
    Reject,
    /// Move the singular set by half a cell along every axis.
    ShiftHalfCell,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum InitialData {
    /// `x / |x|` into `S^{n-1}`.
    Hedgehog {
        #[serde(default)]
        on_singular: SingularPolicy,
    },
    /// `(x_2, x_3) / |(x_2, x_3)|` into `S^1` on a 3D grid.
    LineSingular {
        #[serde(default)]
        on_singular: SingularPolicy,
    },
    /// Degree-one equivariant map of the plane into `S^2` with polar angle
    /// `amplitude * min(|x| / radius, 1)`.
    EquivariantDisk { amplitude: f64, radius: f64 },
    /// Band-limited perturbation of the last pole, normalized nodewise.
    RandomSmooth {
        target_dim: usize,
        modes: usize,
        amplitude: f64,
        seed: u64,
    },
    Constant { value: Vec<f64> },
}

pub fn make_initial_data(kind: &InitialData, grid: Arc<Grid>) -> Result<FieldSnapshot> {
    let n = grid.dim();
    let h = grid.spacing();
    match kind {
        InitialData::Hedgehog { on_singular } | InitialData::LineSingular { on_singular } => {
            let line = matches!(kind, InitialData::LineSingular { .. });
            if line && n != 3 {
                return Err(Error::invalid("line-singular data needs a 3D grid"));
            }
            if !line && n < 2 {
                return Err(Error::invalid("hedgehog data needs n >= 2"));
            }
            let field = if line {
                AnalyticField::line_singular()
            } else {
                AnalyticField::new(AnalyticKind::Hedgehog { n })?
            };
            let shift = match on_singular {
                SingularPolicy::Reject => 0.0,
                SingularPolicy::ShiftHalfCell => 0.5 * h,
            };
            let d = field.dims().1;
            let mut values = Vec::with_capacity(grid.len() * d);
            for i in 0..grid.len() {
                let mut x = grid.node(i).coords().to_vec();
                x.iter_mut().for_each(|v| *v -= shift);
                let v = field.value(&x).filter(|_| field.singular_distance(&x) > 1e-12 * h);
                match v {
                    Some(v) => values.extend_from_slice(&v),
                    None => {
                        return Err(Error::OutOfDomain(format!(
                            "node {i} at {:?} lies on the singular set",
                            grid.node(i)
                        )))
                    }
                }
            }
            FieldSnapshot::new(grid, 0.0, d, values)
        }
        InitialData::EquivariantDisk { amplitude, radius } => {
            if n != 2 {
                return Err(Error::invalid("equivariant disk data needs a 2D grid"));
            }
            if !(*radius > 0.0) {
                return Err(Error::invalid("disk radius must be positive"));
            }
            FieldSnapshot::from_fn(grid, 0.0, 3, |x| {
                let (a, b) = (x.coords()[0], x.coords()[1]);
                let r = a.hypot(b);
                let theta = amplitude * (r / radius).min(1.0);
                if r == 0.0 {
                    vec![0.0, 0.0, theta.cos()]
                } else {
                    let s = theta.sin();
                    vec![s * a / r, s * b / r, theta.cos()]
                }
            })
        }
        InitialData::RandomSmooth {
            target_dim,
            modes,
            amplitude,
            seed,
        } => {
            let d = *target_dim;
            if !(2..=MAX_DIM).contains(&d) || *modes == 0 {
                return Err(Error::invalid("random-smooth needs 2 <= d <= 4 and modes > 0"));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(*seed);
            let lengths: Vec<f64> = (0..n)
                .map(|a| {
                    if grid.is_periodic() {
                        grid.period(a)
                    } else {
                        grid.extent(a)
                    }
                })
                .collect();
            let mut wave = Vec::with_capacity(*modes);
            for _ in 0..*modes {
                let mut k = vec![0i32; n];
                while k.iter().all(|&v| v == 0) {
                    k.iter_mut().for_each(|v| *v = rng.random_range(-2..=2));
                }
                let phase = rng.random_range(0.0..std::f64::consts::TAU);
                let coef: Vec<f64> = (0..d)
                    .map(|_| rng.random_range(-1.0..1.0) / *modes as f64)
                    .collect();
                wave.push((k, phase, coef));
            }
            let lower = grid.lower().to_vec();
            FieldSnapshot::from_fn(grid, 0.0, d, |x| {
                let mut v = vec![0.0; d];
                v[d - 1] = 1.0;
                for (k, phase, coef) in &wave {
                    let arg: f64 = (0..n)
                        .map(|a| {
                            std::f64::consts::TAU * k[a] as f64 * (x.coords()[a] - lower[a])
                                / lengths[a]
                        })
                        .sum::<f64>()
                        + phase;
                    let c = arg.cos();
                    for j in 0..d {
                        v[j] += amplitude * coef[j] * c;
                    }
                }
                let m = v.iter().map(|a| a * a).sum::<f64>().sqrt();
                v.iter().map(|a| a / m).collect()
            })
        }
        InitialData::Constant { value } => {
            if value.is_empty() || value.len() > MAX_DIM {
                return Err(Error::invalid("constant value dimension"));
            }
            let v = value.clone();
            FieldSnapshot::from_fn(grid, 0.0, v.len(), move |_| v.clone())
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnergyAuditReport {
    /// `int int |u_t|^2 phi^2 + int |grad u(t)|^2 phi^2`
    pub left: f64,
    /// `int |grad u(s)|^2 phi^2 + 4 int int |grad u|^2 |grad phi|^2`
    pub right: f64,
    /// `right - left`.
    pub residual: f64,
    pub cutoff_profile: String,
    pub s: f64,
    pub t: f64,
    /// Space-time integral of the stationarity expression tested against
    /// `phi^2 e_1`; recorded only.
    pub stationary_residual: f64,
}

/// Both sides of the localized energy inequality between recorded times
/// `s <= t`, by trapezoid in time and node quadrature in space.
pub fn local_energy_audit(
    field: &SpaceTimeField,
    ball: &SpatialBall,
    phi: &CutoffProfile,
    s: f64,
    t: f64,
) -> Result<EnergyAuditReport> {
    if s > t {
        return Err(Error::invalid(format!("s = {s} exceeds t = {t}")));
    }
    if phi.support_radius() > ball.radius * (1.0 + 1e-12) || phi.center != ball.center {
        return Err(Error::invalid("cutoff must be supported in the ball"));
    }
    let ks = field.recorded_index(s)?;
    let kt = field.recorded_index(t)?;
    let grid = field.grid();
    let n = grid.dim();
    let d = field.target_dim();
    let cell = grid.cell_volume();

    struct Slice {
        energy: f64,
        kinetic: f64,
        cross: f64,
        stationary: f64,
    }
    let slice = |k: usize| -> Slice {
        let snap = &field.snapshots()[k];
        let vel = if field.is_stationary() {
            vec![0.0; snap.values().len()]
        } else {
            field.velocity(k)
        };
        let mut acc = Slice {
            energy: 0.0,
            kinetic: 0.0,
            cross: 0.0,
            stationary: 0.0,
        };
        grid.for_each_in_ball(&ball.center, ball.radius, |idx, disp, _| {
            let p = phi.value_at(disp);
            if p == 0.0 {
                return;
            }
            let gp = phi.gradient_at(disp);
            let g = snap.gradient(idx);
            let g2: f64 = g.iter().map(|v| v * v).sum();
            let v = &vel[idx * d..(idx + 1) * d];
            let v2: f64 = v.iter().map(|x| x * x).sum();
            let gp2: f64 = gp[..n].iter().map(|x| x * x).sum();
            acc.energy += cell * g2 * p * p;
            acc.kinetic += cell * v2 * p * p;
            acc.cross += cell * g2 * gp2;
            let d1 = &g[0..d];
            let mut dxi = 0.0;
            for i in 0..n {
                let di = &g[i * d..(i + 1) * d];
                let dot: f64 = di.iter().zip(d1).map(|(a, b)| a * b).sum();
                dxi += 2.0 * p * gp[i] * dot;
            }
            let vt: f64 = v.iter().zip(d1).map(|(a, b)| a * b).sum();
            acc.stationary += cell * (g2 * 2.0 * p * gp[0] - 2.0 * dxi + 2.0 * p * p * vt);
        });
        acc
    };

    let (mut kin, mut cross, mut stat) = (0.0, 0.0, 0.0);
    let times = field.times();
    if kt > ks {
        let slices: Vec<Slice> = (ks..=kt).map(slice).collect();
        for (j, k) in (ks..=kt).enumerate() {
            let left = if k > ks { times[k] - times[k - 1] } else { 0.0 };
            let right = if k < kt { times[k + 1] - times[k] } else { 0.0 };
            let w = 0.5 * (left + right);
            kin += w * slices[j].kinetic;
            cross += w * slices[j].cross;
            stat += w * slices[j].stationary;
        }
    }
    let es = slice(ks).energy;
    let et = slice(kt).energy;
    let left = kin + et;
    let right = es + 4.0 * cross;
    Ok(EnergyAuditReport {
        left,
        right,
        residual: right - left,
        cutoff_profile: phi.profile_id().to_string(),
        s,
        t,
        stationary_residual: stat,
    })
}
