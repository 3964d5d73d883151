//! Good/bad ball classification against a density oracle, good and bad
//! trees, the alternating main covering and its audit.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::densities::{phi_density, Cutoff};
use crate::error::{Error, Result};
use crate::geometry::{SpacePoint, SpaceTimePoint, SpatialBall, MAX_DIM};
use crate::gmt::{moment_spectrum, AffineSubspace, WeightedPointCloud};
use crate::io::write_csv;
use crate::source::FieldSource;

/// `(y, s) -> Phi(u, (y, t0), s)`.
pub trait DensityOracle: Sync {
    fn phi(&self, y: &SpacePoint, s: f64) -> Result<f64>;
}

/// Oracle value with the finiteness contract enforced.
pub fn evaluate(oracle: &dyn DensityOracle, y: &SpacePoint, s: f64) -> Result<f64> {
    let fail = |reason: String| Error::Oracle {
        point: y.coords().to_vec(),
        radius: s,
        reason,
    };
    match oracle.phi(y, s) {
        Ok(v) if v.is_finite() && v >= 0.0 => Ok(v),
        Ok(v) => Err(fail(format!("value {v} is not finite and nonnegative"))),
        Err(Error::Oracle { point, radius, reason }) => Err(Error::Oracle { point, radius, reason }),
        Err(e) => Err(fail(e.to_string())),
    }
}

/// Densities computed from a field.
pub struct FieldOracle<'a> {
    pub src: &'a dyn FieldSource,
    pub t0: f64,
    pub cutoff: Cutoff,
}

impl DensityOracle for FieldOracle<'_> {
    fn phi(&self, y: &SpacePoint, s: f64) -> Result<f64> {
        phi_density(self.src, &SpaceTimePoint::new(*y, self.t0)?, s, self.cutoff)
    }
}

/// `A / (1 + (dist(y, L) / s)^2)`: constant on `L`, decaying off it at a
/// rate set by the scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistanceOracle {
    pub amplitude: f64,
    pub set: AffineSubspace,
}

impl DistanceOracle {
    pub fn point(p: SpacePoint, amplitude: f64) -> Self {
        DistanceOracle {
            amplitude,
            set: AffineSubspace {
                base: p,
                basis: vec![],
            },
        }
    }

    /// The `x_1`-axis in `R^n`.
    pub fn axis(n: usize, amplitude: f64) -> Self {
        let mut e1 = vec![0.0; n];
        e1[0] = 1.0;
        DistanceOracle {
            amplitude,
            set: AffineSubspace {
                base: SpacePoint::origin(n),
                basis: vec![e1],
            },
        }
    }
}

impl DensityOracle for DistanceOracle {
    fn phi(&self, y: &SpacePoint, s: f64) -> Result<f64> {
        Ok(self.amplitude / (1.0 + self.set.dist2(y) / (s * s)))
    }
}

/// Closure-backed oracle.
pub struct FnOracle<F>(pub F);

impl<F> DensityOracle for FnOracle<F>
where
    F: Fn(&SpacePoint, f64) -> Result<f64> + Sync,
{
    fn phi(&self, y: &SpacePoint, s: f64) -> Result<f64> {
        (self.0)(y, s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NetRule {
    /// Scan candidates in order, keeping each one separated from all kept.
    FirstFit,
    /// Repeatedly add the candidate farthest from the current net.
    FarthestPoint,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CoveringParams {
    pub epsilon: f64,
    pub eta: f64,
    pub eta_prime: f64,
    pub gamma: f64,
    pub rho: f64,
    /// Stopping scale as a fraction of the root radius.
    pub big_r: f64,
    pub k: usize,
    /// Density ceiling; estimated at the root when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub energy: Option<f64>,
    pub net_rule: NetRule,
}

impl Default for CoveringParams {
    fn default() -> Self {
        CoveringParams::new(1, 1.0 / 16.0)
    }
}

impl CoveringParams {
    pub fn new(k: usize, big_r: f64) -> Self {
        let rho = 1.0 / 20.0;
        CoveringParams {
            epsilon: 0.05,
            eta: rho / 200.0,
            eta_prime: 1.0 / 20.0,
            gamma: 1.0 / 10.0,
            rho,
            big_r,
            k,
            energy: None,
            net_rule: NetRule::FirstFit,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("epsilon", self.epsilon),
            ("eta", self.eta),
            ("eta_prime", self.eta_prime),
            ("gamma", self.gamma),
            ("rho", self.rho),
            ("R", self.big_r),
        ] {
            if !(v > 0.0 && v < 0.25) {
                return Err(Error::invalid(format!("{name} = {v} must lie in (0, 1/4)")));
            }
        }
        if self.eta > self.rho / 100.0 {
            return Err(Error::invalid(format!(
                "eta = {} must not exceed rho / 100 = {}",
                self.eta,
                self.rho / 100.0
            )));
        }
        if let Some(e) = self.energy {
            if !(e.is_finite() && e >= 0.0) {
                return Err(Error::invalid(format!("energy ceiling {e} must be finite")));
            }
        }
        Ok(())
    }

    /// `ceil(log_rho R) + 10`.
    pub fn alternation_guard(&self) -> usize {
        (self.big_r.ln() / self.rho.ln()).ceil().max(0.0) as usize + 10
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Label {
    Stop,
    FinalGood,
    FinalBad,
}

impl Label {
    fn code(self) -> f64 {
        match self {
            Label::Stop => 0.0,
            Label::FinalGood => 1.0,
            Label::FinalBad => 2.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverBall {
    pub center: SpacePoint,
    pub radius: f64,
    pub label: Label,
    pub tree: usize,
    pub level: usize,
    /// Stop balls only: whether `eta R r <= r_y <= R r`.
    pub in_window: bool,
    /// Stop balls outside the window: sampled `sup Phi(z, 2 r_y)` over
    /// `B_{2 r_y}(y)`.
    pub certificate: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TreeKind {
    Good,
    Bad,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeRecord {
    pub id: usize,
    pub kind: TreeKind,
    pub root: SpatialBall,
    /// Tree whose final ball seeded this one.
    pub parent: Option<usize>,
    pub alternation: usize,
    /// Net spacings used per level, for the separation audit.
    pub nets: Vec<NetRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetRecord {
    pub level: usize,
    pub spacing: f64,
    pub centers: Vec<SpacePoint>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Classification {
    Good,
    Bad(Option<AffineSubspace>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverResult {
    pub root: SpatialBall,
    pub k: usize,
    pub params: CoveringParams,
    pub energy: f64,
    pub alternations: usize,
    pub balls: Vec<CoverBall>,
    pub trees: Vec<TreeRecord>,
    /// `sum r_y^k` over stop balls.
    pub content_sum: f64,
}

impl CoverResult {
    pub fn stop_balls(&self) -> impl Iterator<Item = &CoverBall> {
        self.balls.iter().filter(|b| b.label == Label::Stop)
    }
}

/// Indices (into `pts`) of a maximal `spacing`-separated subset of `cand`.
pub fn greedy_net(pts: &[SpacePoint], cand: &[usize], spacing: f64, rule: NetRule) -> Vec<usize> {
    let mut net: Vec<usize> = Vec::new();
    if cand.is_empty() {
        return net;
    }
    match rule {
        NetRule::FirstFit => {
            let s2 = spacing * spacing;
            for &i in cand {
                if net.iter().all(|&j| pts[i].dist2(&pts[j]) >= s2) {
                    net.push(i);
                }
            }
        }
        NetRule::FarthestPoint => {
            let mut dmin = vec![f64::INFINITY; cand.len()];
            let mut next = 0;
            loop {
                let c = cand[next];
                net.push(c);
                let mut best = (0usize, -1.0);
                for (slot, &i) in cand.iter().enumerate() {
                    dmin[slot] = dmin[slot].min(pts[i].dist(&pts[c]));
                    if dmin[slot] > best.1 {
                        best = (slot, dmin[slot]);
                    }
                }
                if best.1 < spacing {
                    break;
                }
                next = best.0;
            }
        }
    }
    net
}

fn in_ball(p: &SpacePoint, c: &SpacePoint, r: f64) -> bool {
    p.dist2(c) <= r * r * (1.0 + 1e-12)
}

/// Good iff `Phi(z, gamma rho s) >= E - eta'` at every stratum point of the
/// ball; otherwise bad with the best-fit `(k - 1)`-plane of the points where
/// `Phi(z, 2 eta s) >= E - eta / 2`.
pub fn classify_ball(
    oracle: &dyn DensityOracle,
    s_pts: &[SpacePoint],
    ball: &SpatialBall,
    energy: f64,
    p: &CoveringParams,
) -> Result<Classification> {
    let inside: Vec<usize> = (0..s_pts.len())
        .filter(|&i| in_ball(&s_pts[i], &ball.center, ball.radius))
        .collect();
    classify_indices(oracle, s_pts, &inside, ball, energy, p)
}

fn classify_indices(
    oracle: &dyn DensityOracle,
    s_pts: &[SpacePoint],
    inside: &[usize],
    ball: &SpatialBall,
    energy: f64,
    p: &CoveringParams,
) -> Result<Classification> {
    let s = ball.radius;
    let low = inside
        .par_iter()
        .map(|&i| evaluate(oracle, &s_pts[i], p.gamma * p.rho * s).map(|v| v < energy - p.eta_prime))
        .collect::<Result<Vec<bool>>>()?;
    if !low.iter().any(|b| *b) {
        return Ok(Classification::Good);
    }
    if p.k == 0 {
        return Ok(Classification::Bad(None));
    }
    let vals = inside
        .par_iter()
        .map(|&i| evaluate(oracle, &s_pts[i], 2.0 * p.eta * s))
        .collect::<Result<Vec<f64>>>()?;
    let high: Vec<SpacePoint> = inside
        .iter()
        .zip(&vals)
        .filter(|(_, v)| **v >= energy - p.eta / 2.0)
        .map(|(&i, _)| s_pts[i])
        .collect();
    let n = ball.center.dim();
    let plane = if high.len() >= p.k {
        let cloud = WeightedPointCloud::unit(high)?;
        let spec = moment_spectrum(&cloud, &SpatialBall { center: ball.center, radius: ball.radius * (1.0 + 1e-9) })?;
        spec.plane(p.k - 1)?
    } else {
        let best = inside
            .iter()
            .zip(&vals)
            .max_by(|a, b| a.1.total_cmp(b.1))
            .map(|(&i, _)| s_pts[i])
            .expect("bad ball holds a stratum point");
        let basis = (0..p.k - 1)
            .map(|a| {
                let mut e = vec![0.0; n];
                e[a] = 1.0;
                e
            })
            .collect();
        AffineSubspace { base: best, basis }
    };
    Ok(Classification::Bad(Some(plane)))
}

/// Partial cover produced by one tree.
#[derive(Debug, Clone, Default)]
pub struct TreeOutput {
    pub stop: Vec<CoverBall>,
    /// Final balls, to seed the next alternation.
    pub finals: Vec<CoverBall>,
    pub nets: Vec<NetRecord>,
}

struct Ctx<'a> {
    oracle: &'a dyn DensityOracle,
    s_pts: &'a [SpacePoint],
    energy: f64,
    p: &'a CoveringParams,
    /// `R r`.
    stop_scale: f64,
    tree: usize,
}

impl Ctx<'_> {
    fn candidates(&self, balls: &[(SpacePoint, f64)]) -> Vec<usize> {
        (0..self.s_pts.len())
            .filter(|&i| balls.iter().any(|(c, r)| in_ball(&self.s_pts[i], c, *r)))
            .collect()
    }

    fn stop_ball(&self, center: SpacePoint, radius: f64, level: usize) -> Result<CoverBall> {
        let rr = self.stop_scale;
        let in_window = radius >= self.p.eta * rr * (1.0 - 1e-12) && radius <= rr * (1.0 + 1e-12);
        let certificate = if in_window {
            None
        } else {
            let mut zs: Vec<SpacePoint> = self
                .s_pts
                .iter()
                .filter(|z| in_ball(z, &center, 2.0 * radius))
                .copied()
                .collect();
            zs.push(center);
            let v = zs
                .par_iter()
                .map(|z| evaluate(self.oracle, z, 2.0 * radius))
                .collect::<Result<Vec<f64>>>()?;
            Some(v.into_iter().fold(0.0, f64::max))
        };
        Ok(CoverBall {
            center,
            radius,
            label: Label::Stop,
            tree: self.tree,
            level,
            in_window,
            certificate,
        })
    }

    fn net(&self, cand: &[usize], spacing: f64, level: usize, nets: &mut Vec<NetRecord>) -> Vec<SpacePoint> {
        let idx = greedy_net(self.s_pts, cand, spacing, self.p.net_rule);
        let centers: Vec<SpacePoint> = idx.iter().map(|&i| self.s_pts[i]).collect();
        nets.push(NetRecord {
            level,
            spacing,
            centers: centers.clone(),
        });
        centers
    }

    fn final_ball(&self, center: SpacePoint, radius: f64, label: Label, level: usize) -> CoverBall {
        CoverBall {
            center,
            radius,
            label,
            tree: self.tree,
            level,
            in_window: false,
            certificate: None,
        }
    }

    fn classify(&self, balls: &[SpatialBall]) -> Result<Vec<Classification>> {
        balls
            .iter()
            .map(|b| classify_ball(self.oracle, self.s_pts, b, self.energy, self.p))
            .collect()
    }
}

fn good_tree(ctx: &Ctx, root: &SpatialBall) -> Result<TreeOutput> {
    let mut out = TreeOutput::default();
    let mut good = vec![(root.center, root.radius)];
    let mut r_prev = root.radius;
    let mut level = 1;
    while !good.is_empty() {
        let r_i = ctx.p.rho * r_prev;
        let cand = ctx.candidates(&good);
        if cand.is_empty() {
            break;
        }
        let centers = ctx.net(&cand, 2.0 * r_i / 5.0, level, &mut out.nets);
        if r_i <= ctx.stop_scale {
            for c in centers {
                out.stop.push(ctx.stop_ball(c, r_i, level)?);
            }
            break;
        }
        let balls: Vec<SpatialBall> = centers.iter().map(|c| SpatialBall { center: *c, radius: r_i }).collect();
        let cls = ctx.classify(&balls)?;
        good.clear();
        for (b, c) in balls.iter().zip(cls) {
            match c {
                Classification::Good => good.push((b.center, r_i)),
                Classification::Bad(_) => out.finals.push(ctx.final_ball(b.center, r_i, Label::FinalBad, level)),
            }
        }
        r_prev = r_i;
        level += 1;
    }
    Ok(out)
}

fn bad_tree(ctx: &Ctx, root: &SpatialBall, plane: Option<AffineSubspace>) -> Result<TreeOutput> {
    let mut out = TreeOutput::default();
    let mut bad = vec![(root.center, root.radius, plane)];
    let mut r_prev = root.radius;
    let mut level = 1;
    while !bad.is_empty() {
        let r_i = ctx.p.rho * r_prev;
        let stop_r = ctx.p.eta * r_prev;
        let balls: Vec<(SpacePoint, f64)> = bad.iter().map(|(c, r, _)| (*c, *r)).collect();
        let cand = ctx.candidates(&balls);
        if cand.is_empty() {
            break;
        }
        if r_i <= ctx.stop_scale {
            for c in ctx.net(&cand, 2.0 * stop_r / 5.0, level, &mut out.nets) {
                out.stop.push(ctx.stop_ball(c, stop_r, level)?);
            }
            break;
        }
        // a candidate is in the tube when it lies within 2 rho r_{i-1} of the
        // plane of some bad ball containing it
        let tube = 2.0 * ctx.p.rho * r_prev;
        let (mut inside, mut outside) = (Vec::new(), Vec::new());
        for &i in &cand {
            let z = &ctx.s_pts[i];
            let hit = bad.iter().any(|(c, r, l)| {
                in_ball(z, c, *r) && l.as_ref().is_some_and(|l| l.dist2(z) < tube * tube)
            });
            if hit {
                inside.push(i);
            } else {
                outside.push(i);
            }
        }
        for c in ctx.net(&outside, 2.0 * stop_r / 5.0, level, &mut out.nets) {
            out.stop.push(ctx.stop_ball(c, stop_r, level)?);
        }
        let centers = ctx.net(&inside, 2.0 * r_i / 5.0, level, &mut out.nets);
        let next: Vec<SpatialBall> = centers.iter().map(|c| SpatialBall { center: *c, radius: r_i }).collect();
        let cls = ctx.classify(&next)?;
        bad.clear();
        for (b, c) in next.iter().zip(cls) {
            match c {
                Classification::Good => out.finals.push(ctx.final_ball(b.center, r_i, Label::FinalGood, level)),
                Classification::Bad(l) => bad.push((b.center, r_i, l)),
            }
        }
        r_prev = r_i;
        level += 1;
    }
    Ok(out)
}

/// Good tree from a root classified good. `stop_scale` is `R r` of the
/// enclosing covering.
pub fn build_good_tree(
    oracle: &dyn DensityOracle,
    s_pts: &[SpacePoint],
    root: &SpatialBall,
    energy: f64,
    stop_scale: f64,
    p: &CoveringParams,
) -> Result<TreeOutput> {
    p.validate()?;
    let ctx = Ctx {
        oracle,
        s_pts,
        energy,
        p,
        stop_scale,
        tree: 0,
    };
    good_tree(&ctx, root)
}

/// Bad tree from a root classified bad with pruning plane `plane`.
pub fn build_bad_tree(
    oracle: &dyn DensityOracle,
    s_pts: &[SpacePoint],
    root: &SpatialBall,
    plane: Option<AffineSubspace>,
    energy: f64,
    stop_scale: f64,
    p: &CoveringParams,
) -> Result<TreeOutput> {
    p.validate()?;
    let ctx = Ctx {
        oracle,
        s_pts,
        energy,
        p,
        stop_scale,
        tree: 0,
    };
    bad_tree(&ctx, root, plane)
}

/// `sup Phi(z, 2r)` over a lattice of pitch `r/4` in `B_{2r}(x0)` and the
/// stratum points there.
pub fn root_energy(oracle: &dyn DensityOracle, s_pts: &[SpacePoint], root: &SpatialBall) -> Result<f64> {
    let n = root.center.dim();
    let r = root.radius;
    let pitch = r / 4.0;
    let mut zs: Vec<SpacePoint> = s_pts.iter().filter(|z| in_ball(z, &root.center, 2.0 * r)).copied().collect();
    let mut cur = [-8i64; MAX_DIM];
    'lat: loop {
        let off: Vec<f64> = (0..n).map(|a| cur[a] as f64 * pitch).collect();
        if off.iter().map(|v| v * v).sum::<f64>() <= 4.0 * r * r * (1.0 + 1e-12) {
            zs.push(root.center.offset(&off, 1.0));
        }
        let mut a = n;
        loop {
            if a == 0 {
                break 'lat;
            }
            a -= 1;
            if cur[a] < 8 {
                cur[a] += 1;
                break;
            }
            cur[a] = -8;
        }
    }
    let v = zs
        .par_iter()
        .map(|z| evaluate(oracle, z, 2.0 * r))
        .collect::<Result<Vec<f64>>>()?;
    Ok(v.into_iter().fold(0.0, f64::max))
}

/// Alternates good and bad trees from the root until no final balls remain.
pub fn main_covering(
    oracle: &dyn DensityOracle,
    s_pts: &[SpacePoint],
    root: &SpatialBall,
    p: &CoveringParams,
) -> Result<CoverResult> {
    p.validate()?;
    let n = root.center.dim();
    if p.k > n {
        return Err(Error::invalid(format!("k = {} exceeds n = {n}", p.k)));
    }
    if let Some(z) = s_pts.iter().find(|z| z.dim() != n) {
        return Err(Error::DimensionMismatch {
            expected: n,
            found: z.dim(),
        });
    }
    let energy = match p.energy {
        Some(e) => e,
        None => root_energy(oracle, s_pts, root)?,
    };
    let stop_scale = p.big_r * root.radius;
    let guard = p.alternation_guard();
    let mut balls = Vec::new();
    let mut trees: Vec<TreeRecord> = Vec::new();
    // (ball, parent tree)
    let mut frontier: Vec<(SpatialBall, Option<usize>)> = vec![(*root, None)];
    let mut alternations = 0;
    while !frontier.is_empty() {
        if alternations >= guard {
            return Err(Error::Structural(format!(
                "covering did not terminate within {guard} alternations ({} open balls)",
                frontier.len()
            )));
        }
        let mut next = Vec::new();
        for (b, parent) in frontier {
            let id = trees.len();
            let ctx = Ctx {
                oracle,
                s_pts,
                energy,
                p,
                stop_scale,
                tree: id,
            };
            let (kind, out) = match classify_ball(oracle, s_pts, &b, energy, p)? {
                Classification::Good => (TreeKind::Good, good_tree(&ctx, &b)?),
                Classification::Bad(l) => (TreeKind::Bad, bad_tree(&ctx, &b, l)?),
            };
            trees.push(TreeRecord {
                id,
                kind,
                root: b,
                parent,
                alternation: alternations,
                nets: out.nets,
            });
            for f in &out.finals {
                next.push((
                    SpatialBall {
                        center: f.center,
                        radius: f.radius,
                    },
                    Some(id),
                ));
            }
            balls.extend(out.stop);
            balls.extend(out.finals);
        }
        frontier = next;
        alternations += 1;
    }
    let content_sum = balls
        .iter()
        .filter(|b| b.label == Label::Stop)
        .map(|b| b.radius.powi(p.k as i32))
        .sum();
    Ok(CoverResult {
        root: *root,
        k: p.k,
        params: p.clone(),
        energy,
        alternations,
        balls,
        trees,
        content_sum,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelSummary {
    pub label: Label,
    pub count: usize,
    pub sum_rk: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverAudit {
    pub covered: bool,
    pub uncovered: Vec<SpacePoint>,
    /// `sum r_y^k` over stop balls.
    pub sum_rk: f64,
    pub normalized_sum: f64,
    pub stop_count: usize,
    /// Stop count times `(R r)^k`.
    pub count_times_rk: f64,
    pub by_label: Vec<LabelSummary>,
    /// Every recorded net is separated by its spacing.
    pub nets_separated: bool,
    /// Stop balls with neither the radius window nor a certificate
    /// `<= E - eta / 3`.
    pub window_violations: Vec<usize>,
}

pub fn cover_audit(c: &CoverResult, s_pts: &[SpacePoint], k: usize) -> CoverAudit {
    let stops: Vec<&CoverBall> = c.stop_balls().collect();
    let uncovered: Vec<SpacePoint> = s_pts
        .par_iter()
        .filter(|z| in_ball(z, &c.root.center, c.root.radius))
        .filter(|z| !stops.iter().any(|b| in_ball(z, &b.center, b.radius)))
        .copied()
        .collect();
    let sum_rk: f64 = stops.iter().map(|b| b.radius.powi(k as i32)).sum();
    let by_label = [Label::Stop, Label::FinalGood, Label::FinalBad]
        .into_iter()
        .map(|l| {
            let sel: Vec<&CoverBall> = c.balls.iter().filter(|b| b.label == l).collect();
            LabelSummary {
                label: l,
                count: sel.len(),
                sum_rk: sel.iter().map(|b| b.radius.powi(k as i32)).sum(),
            }
        })
        .collect();
    let nets_separated = c.trees.iter().flat_map(|t| &t.nets).all(|net| {
        let s2 = net.spacing * net.spacing * (1.0 - 1e-12);
        net.centers
            .iter()
            .enumerate()
            .all(|(i, a)| net.centers[i + 1..].iter().all(|b| a.dist2(b) >= s2))
    });
    let drop = c.energy - c.params.eta / 3.0;
    let window_violations = c
        .balls
        .iter()
        .enumerate()
        .filter(|(_, b)| b.label == Label::Stop && !b.in_window && !b.certificate.is_some_and(|v| v <= drop))
        .map(|(i, _)| i)
        .collect();
    let rr = c.params.big_r * c.root.radius;
    CoverAudit {
        covered: uncovered.is_empty(),
        uncovered,
        sum_rk,
        normalized_sum: sum_rk / c.root.radius.powi(k as i32),
        stop_count: stops.len(),
        count_times_rk: stops.len() as f64 * rr.powi(k as i32),
        by_label,
        nets_separated,
        window_violations,
    }
}

/// CSV `(y..., r_y, label, tree, level)` with labels 0 stop, 1 final-good,
/// 2 final-bad.
pub fn write_cover_csv(path: &Path, c: &CoverResult) -> Result<()> {
    let n = c.root.center.dim();
    let names: Vec<String> = (1..=n).map(|i| format!("y{i}")).collect();
    let mut header: Vec<&str> = names.iter().map(|s| s.as_str()).collect();
    header.extend(["r_y", "label", "tree", "level"]);
    let rows: Vec<Vec<f64>> = c
        .balls
        .iter()
        .map(|b| {
            let mut row = b.center.coords().to_vec();
            row.extend([b.radius, b.label.code(), b.tree as f64, b.level as f64]);
            row
        })
        .collect();
    write_csv(path, &header, &rows)
}

pub fn write_cover_json(path: &Path, c: &CoverResult) -> Result<()> {
    let s = serde_json::to_string_pretty(c).map_err(|e| Error::Format(e.to_string()))?;
    std::fs::write(path, s)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sp(v: &[f64]) -> SpacePoint {
        SpacePoint::new(v).unwrap()
    }

    fn ball(c: &[f64], r: f64) -> SpatialBall {
        SpatialBall { center: sp(c), radius: r }
    }

    fn axis_samples(m: usize, half: f64) -> Vec<SpacePoint> {
        (0..m)
            .map(|i| sp(&[-half + 2.0 * half * i as f64 / (m - 1) as f64, 0.0, 0.0]))
            .collect()
    }

    #[test]
    fn params_validation() {
        let p = CoveringParams::new(1, 1.0 / 16.0);
        p.validate().unwrap();
        assert!((p.eta - 1.0 / 4000.0).abs() < 1e-18);
        let mut q = p.clone();
        q.eta = q.rho / 50.0;
        assert!(q.validate().is_err());
        q = p.clone();
        q.big_r = 0.5;
        assert!(q.validate().is_err());
        assert_eq!(p.alternation_guard(), 1 + 10);
    }

    #[test]
    fn nets_are_separated_and_maximal() {
        let pts: Vec<SpacePoint> = (0..300)
            .map(|i| {
                let a = i as f64 * 0.61803;
                sp(&[a.sin() * (i as f64 / 300.0), a.cos()])
            })
            .collect();
        let cand: Vec<usize> = (0..pts.len()).collect();
        for rule in [NetRule::FirstFit, NetRule::FarthestPoint] {
            let net = greedy_net(&pts, &cand, 0.2, rule);
            for (a, &i) in net.iter().enumerate() {
                for &j in &net[a + 1..] {
                    assert!(pts[i].dist(&pts[j]) >= 0.2);
                }
            }
            for &c in &cand {
                assert!(net.iter().any(|&j| pts[c].dist(&pts[j]) < 0.2));
            }
        }
        assert!(greedy_net(&pts, &[], 0.1, NetRule::FirstFit).is_empty());
    }

    #[test]
    fn classification_examples() {
        let p = CoveringParams::new(1, 1.0 / 16.0);
        let b = ball(&[0.0, 0.0, 0.0], 0.5);
        let flat = FnOracle(|_: &SpacePoint, _: f64| Ok(1.0));
        assert_eq!(classify_ball(&flat, &[], &b, 1.0, &p).unwrap(), Classification::Good);
        let s = axis_samples(21, 0.4);
        assert_eq!(classify_ball(&flat, &s, &b, 1.0, &p).unwrap(), Classification::Good);
        // a dip at the first sample
        let dip = FnOracle(|y: &SpacePoint, _: f64| Ok(if y.coords()[0] < -0.39 { 0.5 } else { 1.0 }));
        match classify_ball(&dip, &s, &b, 1.0, &p).unwrap() {
            Classification::Bad(Some(l)) => {
                assert_eq!(l.dim(), 0);
                let rest: Vec<SpacePoint> = s[1..].to_vec();
                let mean = rest.iter().map(|z| z.coords()[0]).sum::<f64>() / rest.len() as f64;
                assert!((l.base.coords()[0] - mean).abs() < 1e-12);
            }
            other => panic!("{other:?}"),
        }
        let nan = FnOracle(|_: &SpacePoint, _: f64| Ok(f64::NAN));
        match classify_ball(&nan, &s, &b, 1.0, &p) {
            Err(Error::Oracle { point, .. }) => assert_eq!(point.len(), 3),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn good_tree_examples() {
        let p = CoveringParams::new(1, 1.0 / 16.0);
        let o = DistanceOracle::axis(3, 1.0);
        let root = ball(&[0.0, 0.0, 0.0], 0.5);
        let single = [sp(&[0.1, 0.0, 0.0])];
        let out = build_good_tree(&o, &single, &root, 1.0, 0.5 / 16.0, &p).unwrap();
        assert_eq!(out.stop.len(), 1);
        assert!(out.finals.is_empty());
        assert!(build_good_tree(&o, &[], &root, 1.0, 0.5 / 16.0, &p).unwrap().stop.is_empty());
        let s = axis_samples(2001, 0.5);
        let out = build_good_tree(&o, &s, &root, 1.0, 0.5 / 16.0, &p).unwrap();
        assert!(out.finals.is_empty());
        let sum: f64 = out.stop.iter().map(|b| b.radius).sum();
        // a first-fit net at spacing 2 r_i / 5 along a diameter has about
        // 5 r / r_i points
        assert!((sum / (5.0 * 0.5) - 1.0).abs() < 0.1, "{sum}");
        assert!(out.stop.iter().all(|b| b.center.coords()[1] == 0.0 && b.in_window));
    }

    #[test]
    fn bad_tree_examples() {
        let p = CoveringParams::new(1, 1.0 / 64.0);
        let root = ball(&[0.0, 0.0, 0.0], 0.5);
        let rr = 0.5 / 64.0;
        // high density concentrates at the origin: the pruning "plane" for
        // k = 1 is the origin, and every sample sits in its tube
        let o = DistanceOracle::point(SpacePoint::origin(3), 1.0);
        let s: Vec<SpacePoint> = (0..9).map(|i| sp(&[(i as f64 - 4.0) * 0.005, 0.0, 0.0])).collect();
        let plane = AffineSubspace {
            base: SpacePoint::origin(3),
            basis: vec![],
        };
        let out = build_bad_tree(&o, &s, &root, Some(plane.clone()), 1.0, rr, &p).unwrap();
        assert!(out.stop.iter().all(|b| b.level > 1), "{:?}", out.stop);
        // a single point off the tube
        let far = [sp(&[0.3, 0.2, 0.0])];
        let out = build_bad_tree(&o, &far, &root, Some(plane), 1.0, rr, &p).unwrap();
        assert_eq!(out.stop.len(), 1);
        let b = &out.stop[0];
        assert!((b.radius - p.eta * 0.5).abs() < 1e-15);
        assert!(b.in_window || b.certificate.unwrap() <= 1.0 - p.eta / 3.0);
        assert!(build_bad_tree(&o, &[], &root, None, 1.0, rr, &p).unwrap().stop.is_empty());
    }

    #[test]
    fn main_covering_examples() {
        let o = DistanceOracle::axis(3, 1.0);
        let root = ball(&[0.0, 0.0, 0.0], 0.5);
        let p = CoveringParams::new(1, 1.0 / 16.0);
        let empty = main_covering(&o, &[], &root, &p).unwrap();
        assert!(empty.stop_balls().next().is_none());
        let a = cover_audit(&empty, &[], 1);
        assert!(a.covered && a.sum_rk == 0.0);
        let s = axis_samples(4001, 0.5);
        let c = main_covering(&o, &s, &root, &p).unwrap();
        let a = cover_audit(&c, &s, 1);
        assert!(a.covered && a.nets_separated && a.window_violations.is_empty());
        assert!(c.alternations <= (p.big_r.ln() / p.rho.ln()).ceil() as usize + 2);
        assert!(a.normalized_sum < 10.0, "{}", a.normalized_sum);
        // fault injection
        let mut broken = c.clone();
        let z = s[2000];
        broken
            .balls
            .retain(|b| !(b.label == Label::Stop && in_ball(&z, &b.center, b.radius)));
        let a = cover_audit(&broken, &s, 1);
        assert!(!a.covered && a.uncovered.contains(&z));
    }

    #[test]
    fn point_covering_counts_balls() {
        let o = DistanceOracle::point(SpacePoint::origin(3), 1.0);
        let s = [SpacePoint::origin(3)];
        let mut p = CoveringParams::new(0, 1.0 / 16.0);
        p.k = 0;
        let c = main_covering(&o, &s, &ball(&[0.0, 0.0, 0.0], 0.5), &p).unwrap();
        let a = cover_audit(&c, &s, 0);
        assert!(a.covered);
        assert_eq!(a.sum_rk, a.stop_count as f64);
        assert!(a.stop_count <= 2);
    }

    #[test]
    fn cover_emitters() {
        let o = DistanceOracle::axis(3, 1.0);
        let s = axis_samples(101, 0.5);
        let c = main_covering(&o, &s, &ball(&[0.0, 0.0, 0.0], 0.5), &CoveringParams::new(1, 0.125)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_cover_csv(&dir.path().join("c.csv"), &c).unwrap();
        write_cover_json(&dir.path().join("c.json"), &c).unwrap();
        let back: CoverResult =
            serde_json::from_str(&std::fs::read_to_string(dir.path().join("c.json")).unwrap()).unwrap();
        assert_eq!(back.balls.len(), c.balls.len());
    }
}
