//! Weighted point clouds, second-moment spectra, displacement, the discrete
//! Reifenberg check and the Jones-type functional.

use std::f64::consts::{LN_2, PI};
use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::densities::{density_gap_w, Cutoff};
use crate::error::{Error, Result};
use crate::geometry::{SpacePoint, SpaceTimePoint, SpatialBall, MAX_DIM};
use crate::io::{read_csv, write_csv};
use crate::source::FieldSource;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightedPointCloud {
    points: Vec<SpacePoint>,
    weights: Vec<f64>,
}

impl WeightedPointCloud {
    pub fn new(points: Vec<SpacePoint>, weights: Vec<f64>) -> Result<Self> {
        if points.len() != weights.len() {
            return Err(Error::invalid(format!(
                "{} points but {} weights",
                points.len(),
                weights.len()
            )));
        }
        if let Some(p0) = points.first() {
            for p in &points {
                if p.dim() != p0.dim() {
                    return Err(Error::DimensionMismatch {
                        expected: p0.dim(),
                        found: p.dim(),
                    });
                }
            }
        }
        if let Some(w) = weights.iter().find(|w| !(**w > 0.0 && w.is_finite())) {
            return Err(Error::invalid(format!("weight {w} must be positive and finite")));
        }
        Ok(WeightedPointCloud { points, weights })
    }

    pub fn unit(points: Vec<SpacePoint>) -> Result<Self> {
        let w = vec![1.0; points.len()];
        Self::new(points, w)
    }

    pub fn points(&self) -> &[SpacePoint] {
        &self.points
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Dimension of the points, `None` when empty.
    pub fn dim(&self) -> Option<usize> {
        self.points.first().map(|p| p.dim())
    }

    /// Indices of the atoms in the closed ball.
    pub fn indices_in(&self, ball: &SpatialBall) -> Vec<usize> {
        (0..self.len()).filter(|&i| ball.contains(&self.points[i])).collect()
    }

    pub fn mass_in(&self, ball: &SpatialBall) -> f64 {
        self.indices_in(ball).iter().map(|&i| self.weights[i]).sum()
    }

    pub fn total_mass(&self) -> f64 {
        self.weights.iter().sum()
    }

    fn check_ball(&self, ball: &SpatialBall) -> Result<()> {
        match self.dim() {
            Some(n) if n != ball.center.dim() => Err(Error::DimensionMismatch {
                expected: n,
                found: ball.center.dim(),
            }),
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AffineSubspace {
    pub base: SpacePoint,
    pub basis: Vec<Vec<f64>>,
}

impl AffineSubspace {
    pub fn new(base: SpacePoint, basis: Vec<Vec<f64>>) -> Result<Self> {
        let n = base.dim();
        if basis.len() > n {
            return Err(Error::invalid(format!("{} basis vectors in R^{n}", basis.len())));
        }
        for (i, a) in basis.iter().enumerate() {
            if a.len() != n {
                return Err(Error::DimensionMismatch {
                    expected: n,
                    found: a.len(),
                });
            }
            for (j, b) in basis.iter().enumerate().take(i + 1) {
                let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
                let want = if i == j { 1.0 } else { 0.0 };
                if (dot - want).abs() > 1e-12 {
                    return Err(Error::invalid(format!(
                        "basis not orthonormal: <v{i}, v{j}> = {dot}"
                    )));
                }
            }
        }
        Ok(AffineSubspace { base, basis })
    }

    pub fn dim(&self) -> usize {
        self.basis.len()
    }

    pub fn dist2(&self, y: &SpacePoint) -> f64 {
        let n = self.base.dim();
        let d = y.sub(&self.base);
        let mut r2: f64 = d[..n].iter().map(|v| v * v).sum();
        for b in &self.basis {
            let p: f64 = b.iter().zip(&d[..n]).map(|(x, y)| x * y).sum();
            r2 -= p * p;
        }
        r2.max(0.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MomentSpectrum {
    pub center: SpacePoint,
    pub mass: f64,
    /// Descending, clamped at 0.
    pub eigenvalues: Vec<f64>,
    pub eigenvectors: Vec<Vec<f64>>,
}

impl MomentSpectrum {
    /// `x_cm + span{v_1, ..., v_k}`.
    pub fn plane(&self, k: usize) -> Result<AffineSubspace> {
        let n = self.eigenvalues.len();
        if k > n {
            return Err(Error::invalid(format!("k = {k} exceeds n = {n}")));
        }
        Ok(AffineSubspace {
            base: self.center,
            basis: self.eigenvectors[..k].to_vec(),
        })
    }

    pub fn tail(&self, k: usize) -> f64 {
        self.eigenvalues[k.min(self.eigenvalues.len())..].iter().sum()
    }
}

pub fn center_of_mass(mu: &WeightedPointCloud, ball: &SpatialBall) -> Result<SpacePoint> {
    mu.check_ball(ball)?;
    let idx = mu.indices_in(ball);
    let n = ball.center.dim();
    let mass: f64 = idx.iter().map(|&i| mu.weights[i]).sum();
    if !(mass > 0.0) {
        return Err(Error::ZeroMass);
    }
    // accumulate offsets from the ball centre to limit cancellation
    let mut acc = [0.0; MAX_DIM];
    for &i in &idx {
        let d = mu.points[i].sub(&ball.center);
        for a in 0..n {
            acc[a] += mu.weights[i] * d[a];
        }
    }
    Ok(ball.center.offset(&acc[..n], 1.0 / mass))
}

fn second_moment(mu: &WeightedPointCloud, idx: &[usize], cm: &SpacePoint, mass: f64) -> DMatrix<f64> {
    let n = cm.dim();
    let mut m = DMatrix::<f64>::zeros(n, n);
    for &i in idx {
        let d = mu.points[i].sub(cm);
        let w = mu.weights[i] / mass;
        for a in 0..n {
            for b in a..n {
                m[(a, b)] += w * d[a] * d[b];
            }
        }
    }
    for a in 0..n {
        for b in 0..a {
            m[(a, b)] = m[(b, a)];
        }
    }
    m
}

/// Spectrum of the mass-normalized second moment matrix about the centre of
/// mass. Eigenvectors are signed so their first entry above `1e-12` in
/// magnitude is positive.
pub fn moment_spectrum(mu: &WeightedPointCloud, ball: &SpatialBall) -> Result<MomentSpectrum> {
    let cm = center_of_mass(mu, ball)?;
    let idx = mu.indices_in(ball);
    let mass: f64 = idx.iter().map(|&i| mu.weights[i]).sum();
    let n = cm.dim();
    let eig = SymmetricEigen::new(second_moment(mu, &idx, &cm, mass));
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let mut eigenvalues = Vec::with_capacity(n);
    let mut eigenvectors = Vec::with_capacity(n);
    for &j in &order {
        eigenvalues.push(eig.eigenvalues[j].max(0.0));
        let mut v: Vec<f64> = eig.eigenvectors.column(j).iter().copied().collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.iter_mut().for_each(|x| *x /= norm);
        if let Some(first) = v.iter().find(|x| x.abs() > 1e-12) {
            if *first < 0.0 {
                v.iter_mut().for_each(|x| *x = -*x);
            }
        }
        eigenvectors.push(v);
    }
    Ok(MomentSpectrum {
        center: cm,
        mass,
        eigenvalues,
        eigenvectors,
    })
}

/// `|avg((y - x_cm) . v_i)(y - x_cm) - lambda_i v_i|` for each `i`, computed
/// from the atoms directly.
pub fn eigen_residuals(
    mu: &WeightedPointCloud,
    ball: &SpatialBall,
    spec: &MomentSpectrum,
) -> Result<Vec<f64>> {
    mu.check_ball(ball)?;
    let idx = mu.indices_in(ball);
    let n = spec.center.dim();
    let mut out = Vec::with_capacity(n);
    for (lam, v) in spec.eigenvalues.iter().zip(&spec.eigenvectors) {
        let mut acc = vec![0.0; n];
        for &i in &idx {
            let d = mu.points[i].sub(&spec.center);
            let p: f64 = (0..n).map(|a| d[a] * v[a]).sum();
            let w = mu.weights[i] / spec.mass;
            for a in 0..n {
                acc[a] += w * p * d[a];
            }
        }
        out.push((0..n).map(|a| (acc[a] - lam * v[a]).powi(2)).sum::<f64>().sqrt());
    }
    Ok(out)
}

fn check_k(k: usize, n: usize) -> Result<()> {
    if k > n {
        return Err(Error::invalid(format!("k = {k} must lie in [0, {n}]")));
    }
    Ok(())
}

/// `D^k_mu(x0, r) = r^{-k-2} mu(B_r) sum_{i > k} lambda_i`.
pub fn displacement(mu: &WeightedPointCloud, ball: &SpatialBall, k: usize) -> Result<f64> {
    check_k(k, ball.center.dim())?;
    let spec = moment_spectrum(mu, ball)?;
    Ok(ball.radius.powi(-(k as i32) - 2) * spec.mass * spec.tail(k))
}

/// As [`displacement`], but 0 when the ball carries no mass.
fn displacement_or_zero(mu: &WeightedPointCloud, ball: &SpatialBall, k: usize) -> Result<f64> {
    match displacement(mu, ball, k) {
        Err(Error::ZeroMass) => Ok(0.0),
        other => other,
    }
}

/// `r^{-k-2} int dist^2(y, L) dmu` over the ball.
pub fn displacement_to_plane(
    mu: &WeightedPointCloud,
    ball: &SpatialBall,
    plane: &AffineSubspace,
) -> Result<f64> {
    mu.check_ball(ball)?;
    let k = plane.dim() as i32;
    let s: f64 = mu
        .indices_in(ball)
        .iter()
        .map(|&i| mu.weights[i] * plane.dist2(&mu.points[i]))
        .sum();
    Ok(ball.radius.powi(-k - 2) * s)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BruteForceOptions {
    /// Base-point lattice points per axis across the ball.
    pub lattice: usize,
    /// Polar angle steps of the direction mesh (twice as many azimuthal).
    pub directions: usize,
    /// Coarse candidates refined by pattern search.
    pub seeds: usize,
}

impl Default for BruteForceOptions {
    fn default() -> Self {
        BruteForceOptions {
            lattice: 5,
            directions: 12,
            seeds: 6,
        }
    }
}

pub const BRUTE_FORCE_MAX_DIM: usize = 3;
pub const BRUTE_FORCE_MAX_POINTS: usize = 60;

/// Direct minimization of `r^{-k-2} int dist^2(y, L) dmu` over affine
/// `k`-planes: a coarse search over base points and directions followed by
/// Hooke-Jeeves refinement of the best candidates.
pub fn displacement_bruteforce(
    mu: &WeightedPointCloud,
    ball: &SpatialBall,
    k: usize,
    opts: &BruteForceOptions,
) -> Result<f64> {
    mu.check_ball(ball)?;
    let n = ball.center.dim();
    check_k(k, n)?;
    let idx = mu.indices_in(ball);
    if n > BRUTE_FORCE_MAX_DIM || idx.len() > BRUTE_FORCE_MAX_POINTS {
        return Err(Error::CostGuard(format!(
            "brute force limited to n <= {BRUTE_FORCE_MAX_DIM} and {BRUTE_FORCE_MAX_POINTS} points, got n = {n}, {} points",
            idx.len()
        )));
    }
    let mass: f64 = idx.iter().map(|&i| mu.weights[i]).sum();
    if !(mass > 0.0) {
        return Err(Error::ZeroMass);
    }
    let scale = ball.radius.powi(-(k as i32) - 2);
    if k == n {
        return Ok(0.0);
    }
    let r = ball.radius;
    // atoms relative to the ball centre, in units of r
    let pts: Vec<([f64; 3], f64)> = idx
        .iter()
        .map(|&i| {
            let d = mu.points[i].sub(&ball.center);
            let mut c = [0.0; 3];
            for a in 0..n {
                c[a] = d[a] / r;
            }
            (c, mu.weights[i])
        })
        .collect();
    let angles = match (n, k) {
        (_, 0) => 0,
        (2, 1) => 1,
        (3, _) => 2,
        _ => 0,
    };
    let cost = |x: &[f64]| -> f64 {
        let mut b = [0.0; 3];
        b[..n].copy_from_slice(&x[angles..angles + n]);
        let dir = unit_vector(n, &x[..angles]);
        let mut s = 0.0;
        for (p, w) in &pts {
            let mut d = [0.0; 3];
            let mut d2 = 0.0;
            for a in 0..n {
                d[a] = p[a] - b[a];
                d2 += d[a] * d[a];
            }
            let proj: f64 = (0..n).map(|a| d[a] * dir[a]).sum();
            let dist2 = if k == 0 {
                d2
            } else if k == 1 {
                d2 - proj * proj
            } else {
                // k = 2 in R^3: dir is the normal
                proj * proj
            };
            s += w * dist2.max(0.0);
        }
        s
    };
    // coarse candidates
    let m = opts.lattice.max(2);
    let lattice: Vec<f64> = (0..m).map(|i| -1.0 + 2.0 * i as f64 / (m - 1) as f64).collect();
    let nd = opts.directions.max(2);
    let mut dirs: Vec<Vec<f64>> = Vec::new();
    match angles {
        0 => dirs.push(vec![]),
        1 => {
            for i in 0..2 * nd {
                dirs.push(vec![PI * i as f64 / (2 * nd) as f64]);
            }
        }
        _ => {
            for i in 0..=nd {
                for j in 0..2 * nd {
                    dirs.push(vec![PI * i as f64 / nd as f64, PI * j as f64 / nd as f64]);
                }
            }
        }
    }
    let mut bases: Vec<Vec<f64>> = vec![vec![]];
    for _ in 0..n {
        let mut next = Vec::new();
        for b in &bases {
            for v in &lattice {
                let mut c = b.clone();
                c.push(*v);
                next.push(c);
            }
        }
        bases = next;
    }
    let mut cands: Vec<(f64, Vec<f64>)> = Vec::new();
    for d in &dirs {
        for b in &bases {
            if b.iter().map(|v| v * v).sum::<f64>() > 1.0 + 1e-12 {
                continue;
            }
            let mut x = d.clone();
            x.extend(b);
            cands.push((cost(&x), x));
        }
    }
    cands.sort_by(|a, b| a.0.total_cmp(&b.0));
    cands.truncate(opts.seeds.max(1));
    let best = cands
        .into_par_iter()
        .map(|(_, x)| hooke_jeeves(&cost, x, 0.25, 1e-11))
        .reduce(|| f64::INFINITY, f64::min);
    Ok(scale * best * r * r)
}

fn unit_vector(n: usize, ang: &[f64]) -> [f64; 3] {
    match ang.len() {
        0 => [0.0; 3],
        1 => [ang[0].cos(), ang[0].sin(), 0.0],
        _ => {
            let (t, p) = (ang[0], ang[1]);
            let v = [t.sin() * p.cos(), t.sin() * p.sin(), t.cos()];
            debug_assert_eq!(n, 3);
            v
        }
    }
}

fn hooke_jeeves<F: Fn(&[f64]) -> f64>(f: &F, mut x: Vec<f64>, mut step: f64, tol: f64) -> f64 {
    let mut fx = f(&x);
    let explore = |base: &[f64], fb: f64, step: f64| -> (Vec<f64>, f64) {
        let mut y = base.to_vec();
        let mut fy = fb;
        for i in 0..y.len() {
            for s in [step, -step] {
                let old = y[i];
                y[i] = old + s;
                let v = f(&y);
                if v < fy {
                    fy = v;
                    break;
                }
                y[i] = old;
            }
        }
        (y, fy)
    };
    let mut iters = 0usize;
    while step > tol && iters < 200_000 {
        iters += 1;
        let (y, fy) = explore(&x, fx, step);
        if fy < fx {
            // pattern moves along the improving direction
            let mut prev = x;
            let mut cur = y;
            let mut fcur = fy;
            loop {
                let probe: Vec<f64> = cur.iter().zip(&prev).map(|(c, p)| 2.0 * c - p).collect();
                let fp = f(&probe);
                let (z, fz) = explore(&probe, fp, step);
                if fz < fcur {
                    prev = cur;
                    cur = z;
                    fcur = fz;
                } else {
                    break;
                }
            }
            x = cur;
            fx = fcur;
        } else {
            step *= 0.5;
        }
    }
    fx
}

/// Volume of the unit `k`-ball.
pub fn unit_ball_volume(k: usize) -> f64 {
    // pi^{k/2} / Gamma(k/2 + 1) by the two-step recursion
    match k {
        0 => 1.0,
        1 => 2.0,
        _ => 2.0 * PI / k as f64 * unit_ball_volume(k - 2),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PackingMeasure {
    pub k: usize,
    pub centers: Vec<SpacePoint>,
    pub radii: Vec<f64>,
    /// Set once the doubled balls have been verified pairwise disjoint.
    pub disjoint: bool,
}

impl PackingMeasure {
    pub fn new(centers: Vec<SpacePoint>, radii: Vec<f64>, k: usize) -> Result<Self> {
        if centers.len() != radii.len() {
            return Err(Error::invalid("centers and radii differ in length"));
        }
        if let Some(r) = radii.iter().find(|r| !(**r > 0.0 && r.is_finite())) {
            return Err(Error::invalid(format!("radius {r} must be positive")));
        }
        if let Some(c) = centers.first() {
            check_k(k, c.dim())?;
            if let Some(p) = centers.iter().find(|p| p.dim() != c.dim()) {
                return Err(Error::DimensionMismatch {
                    expected: c.dim(),
                    found: p.dim(),
                });
            }
        }
        Ok(PackingMeasure {
            k,
            centers,
            radii,
            disjoint: false,
        })
    }

    /// Checks that the balls `B_{2 r_y}(y)` are pairwise disjoint (touching
    /// allowed) and sets the flag.
    pub fn verify_disjoint(&mut self) -> Result<()> {
        let mut order: Vec<usize> = (0..self.centers.len()).collect();
        let key = |i: usize| self.centers[i].coords()[0];
        order.sort_by(|&a, &b| key(a).total_cmp(&key(b)));
        let rmax = self.radii.iter().cloned().fold(0.0, f64::max);
        for (a, &i) in order.iter().enumerate() {
            for &j in &order[a + 1..] {
                if key(j) - key(i) >= 2.0 * (self.radii[i] + rmax) {
                    break;
                }
                let need = 2.0 * (self.radii[i] + self.radii[j]);
                let d = self.centers[i].dist(&self.centers[j]);
                if d < need * (1.0 - 1e-12) {
                    let (p, q) = (i.min(j), i.max(j));
                    return Err(Error::Structural(format!(
                        "doubled balls {p} and {q} overlap: distance {d} < {need}"
                    )));
                }
            }
        }
        self.disjoint = true;
        Ok(())
    }

    /// `sum omega_k r_y^k delta_y`.
    pub fn measure(&self) -> Result<WeightedPointCloud> {
        let wk = unit_ball_volume(self.k);
        let w = self.radii.iter().map(|r| wk * r.powi(self.k as i32)).collect();
        WeightedPointCloud::new(self.centers.clone(), w)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestBallSum {
    pub center: SpacePoint,
    pub radius: f64,
    pub sum: f64,
    pub bound: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReifenbergReport {
    pub k: usize,
    pub delta: f64,
    pub root: SpatialBall,
    /// `mu(B_r(x0)) / r^k`.
    pub packing_ratio: f64,
    /// Dyadic radii `2^{-i} r` at which displacements were evaluated; below
    /// the last one every ball around an atom holds that atom only.
    pub levels: Vec<f64>,
    pub test_radii: Vec<f64>,
    pub lattice_pitch: f64,
    pub balls: Vec<TestBallSum>,
    pub max_ratio: f64,
    /// Test radii at which some ball violates `sum < delta t^k`.
    pub failing_scales: Vec<f64>,
    pub holds: bool,
}

/// For test balls `B_t(x)` inside `B_{2r}(x0)` (centres on a lattice of pitch
/// `r/4`, dyadic `t` from `2r` down to `4 min r_y`), evaluates
/// `sum_{r_i <= 2t} int_{B_t(x)} D^k_mu(y, r_i) dmu(y)` over `r_i = 2^{-i} r`.
pub fn reifenberg_check(
    p: &mut PackingMeasure,
    root: &SpatialBall,
    delta: f64,
) -> Result<ReifenbergReport> {
    if !(delta > 0.0) {
        return Err(Error::invalid("delta must be positive"));
    }
    p.verify_disjoint()?;
    let n = root.center.dim();
    let k = p.k;
    check_k(k, n)?;
    if let Some(c) = p.centers.iter().find(|c| c.dim() != n) {
        return Err(Error::DimensionMismatch {
            expected: n,
            found: c.dim(),
        });
    }
    if let Some(c) = p.centers.iter().find(|c| c.dist(&root.center) > root.radius * (1.0 + 1e-12)) {
        return Err(Error::invalid(format!("center {:?} lies outside the root ball", c.coords())));
    }
    let mu = p.measure()?;
    let r = root.radius;
    let packing_ratio = mu.mass_in(root) / r.powi(k as i32);
    let rmin = p.radii.iter().cloned().fold(f64::INFINITY, f64::min);
    // levels 2r, r, r/2, ... while balls can hold a second atom
    let mut levels = Vec::new();
    let mut s = 2.0 * r;
    while rmin.is_finite() && s >= 2.0 * rmin {
        levels.push(s);
        s *= 0.5;
    }
    let disp: Vec<Vec<f64>> = levels
        .par_iter()
        .map(|&s| {
            (0..mu.len())
                .map(|i| {
                    let b = SpatialBall {
                        center: mu.points()[i],
                        radius: s,
                    };
                    displacement_or_zero(&mu, &b, k)
                })
                .collect::<Result<Vec<f64>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    let mut test_radii = Vec::new();
    let mut t = 2.0 * r;
    let tmin = if rmin.is_finite() { 4.0 * rmin } else { 2.0 * r };
    while t >= tmin * (1.0 - 1e-12) {
        test_radii.push(t);
        t *= 0.5;
    }
    let pitch = r / 4.0;
    let steps = 8i64;
    let mut centers = Vec::new();
    let mut cur = [-steps; MAX_DIM];
    'lat: loop {
        let off: Vec<f64> = (0..n).map(|a| cur[a] as f64 * pitch).collect();
        let norm = off.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm <= 2.0 * r {
            centers.push(root.center.offset(&off, 1.0));
        }
        let mut a = n;
        loop {
            if a == 0 {
                break 'lat;
            }
            a -= 1;
            if cur[a] < steps {
                cur[a] += 1;
                break;
            }
            cur[a] = -steps;
        }
    }
    let mut jobs = Vec::new();
    for &t in &test_radii {
        for c in &centers {
            if c.dist(&root.center) + t <= 2.0 * r * (1.0 + 1e-12) {
                jobs.push((*c, t));
            }
        }
    }
    let balls: Vec<TestBallSum> = jobs
        .par_iter()
        .map(|&(c, t)| {
            let b = SpatialBall { center: c, radius: t };
            let inside = mu.indices_in(&b);
            let mut sum = 0.0;
            for (li, &s) in levels.iter().enumerate() {
                if s <= 2.0 * t * (1.0 + 1e-12) {
                    for &i in &inside {
                        sum += mu.weights()[i] * disp[li][i];
                    }
                }
            }
            TestBallSum {
                center: c,
                radius: t,
                sum,
                bound: delta * t.powi(k as i32),
            }
        })
        .collect();
    let mut failing_scales: Vec<f64> = Vec::new();
    let mut max_ratio: f64 = 0.0;
    for b in &balls {
        max_ratio = max_ratio.max(b.sum / b.bound);
        if b.sum >= b.bound && !failing_scales.contains(&b.radius) {
            failing_scales.push(b.radius);
        }
    }
    Ok(ReifenbergReport {
        k,
        delta,
        root: *root,
        packing_ratio,
        levels,
        test_radii,
        lattice_pitch: pitch,
        holds: failing_scales.is_empty(),
        balls,
        max_ratio,
        failing_scales,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JonesReport {
    pub scales: Vec<f64>,
    /// `D^k_mu(x, s) ln 2` per scale.
    pub terms: Vec<f64>,
    pub total: f64,
}

/// `sum_s D^k_mu(x, s) ln 2`, a dyadic discretization of
/// `int_0^1 D^k_mu(x, s) ds / s`.
pub fn jones_functional(
    mu: &WeightedPointCloud,
    x: &SpacePoint,
    k: usize,
    scales: &[f64],
) -> Result<JonesReport> {
    check_k(k, x.dim())?;
    let top = scales
        .iter()
        .cloned()
        .fold(f64::NEG_INFINITY, f64::max);
    if scales.is_empty() {
        return Err(Error::Empty("no scales".into()));
    }
    if mu.mass_in(&SpatialBall { center: *x, radius: top }) <= 0.0 {
        return Err(Error::ZeroMass);
    }
    let terms = scales
        .par_iter()
        .map(|&s| {
            displacement_or_zero(mu, &SpatialBall { center: *x, radius: s }, k).map(|d| d * LN_2)
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(JonesReport {
        scales: scales.to_vec(),
        total: terms.iter().sum(),
        terms,
    })
}

/// `s, s/2, ..., s / 2^{count - 1}`.
pub fn dyadic_scales(top: f64, count: usize) -> Vec<f64> {
    (0..count).map(|i| top * 0.5f64.powi(i as i32)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct L2BestReport {
    pub r: f64,
    pub k: usize,
    pub lhs: f64,
    pub rhs_raw: f64,
    pub ratio: f64,
    /// `W(u, (y, t0), 2r, r/2)` per atom in the ball.
    pub gaps: Vec<f64>,
}

/// `D^k_mu(x0, r)` against `r^{-k} int [W(u, (y, t0), 2r, r/2) + r] dmu(y)`.
pub fn l2_best_audit(
    src: &dyn FieldSource,
    mu: &WeightedPointCloud,
    ball: &SpatialBall,
    t0: f64,
    k: usize,
    cutoff: Cutoff,
) -> Result<L2BestReport> {
    mu.check_ball(ball)?;
    let n = ball.center.dim();
    check_k(k, n)?;
    let idx = mu.indices_in(ball);
    if idx.len() != mu.len() {
        return Err(Error::invalid("cloud is not supported in the ball"));
    }
    let r = ball.radius;
    let lhs = displacement(mu, ball, k)?;
    let gaps = idx
        .par_iter()
        .map(|&i| {
            let y = SpaceTimePoint::new(mu.points()[i], t0)?;
            density_gap_w(src, &y, 2.0 * r, 0.5 * r, cutoff)
        })
        .collect::<Result<Vec<f64>>>()?;
    let rhs_raw = r.powi(-(k as i32))
        * idx
            .iter()
            .zip(&gaps)
            .map(|(&i, g)| mu.weights()[i] * (g + r))
            .sum::<f64>();
    Ok(L2BestReport {
        r,
        k,
        lhs,
        rhs_raw,
        ratio: lhs / rhs_raw,
        gaps,
    })
}

/// CSV `(x..., weight)`.
pub fn write_cloud_csv(path: &Path, mu: &WeightedPointCloud) -> Result<()> {
    let n = mu.dim().unwrap_or(0);
    let names: Vec<String> = (1..=n).map(|i| format!("x{i}")).collect();
    let mut header: Vec<&str> = names.iter().map(|s| s.as_str()).collect();
    header.push("weight");
    let rows: Vec<Vec<f64>> = mu
        .points()
        .iter()
        .zip(mu.weights())
        .map(|(p, w)| {
            let mut r = p.coords().to_vec();
            r.push(*w);
            r
        })
        .collect();
    write_csv(path, &header, &rows)
}

fn split_rows(rows: Vec<Vec<f64>>) -> Result<(Vec<SpacePoint>, Vec<f64>)> {
    let mut pts = Vec::with_capacity(rows.len());
    let mut last = Vec::with_capacity(rows.len());
    for r in rows {
        let (x, v) = r.split_at(r.len().saturating_sub(1));
        pts.push(SpacePoint::new(x)?);
        last.push(*v.first().ok_or_else(|| Error::Format("empty row".into()))?);
    }
    Ok((pts, last))
}

pub fn read_cloud_csv(path: &Path) -> Result<WeightedPointCloud> {
    let (header, rows) = read_csv(path)?;
    if header.last().map(|s| s.as_str()) != Some("weight") {
        return Err(Error::Format("cloud CSV must end with a weight column".into()));
    }
    let (p, w) = split_rows(rows)?;
    WeightedPointCloud::new(p, w)
}

/// CSV `(y..., r_y)`.
pub fn write_packing_csv(path: &Path, p: &PackingMeasure) -> Result<()> {
    let n = p.centers.first().map(|c| c.dim()).unwrap_or(0);
    let names: Vec<String> = (1..=n).map(|i| format!("y{i}")).collect();
    let mut header: Vec<&str> = names.iter().map(|s| s.as_str()).collect();
    header.push("r_y");
    let rows: Vec<Vec<f64>> = p
        .centers
        .iter()
        .zip(&p.radii)
        .map(|(c, r)| {
            let mut row = c.coords().to_vec();
            row.push(*r);
            row
        })
        .collect();
    write_csv(path, &header, &rows)
}

pub fn read_packing_csv(path: &Path, k: usize) -> Result<PackingMeasure> {
    let (header, rows) = read_csv(path)?;
    if header.last().map(|s| s.as_str()) != Some("r_y") {
        return Err(Error::Format("packing CSV must end with an r_y column".into()));
    }
    let (c, r) = split_rows(rows)?;
    PackingMeasure::new(c, r, k)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn sp(v: &[f64]) -> SpacePoint {
        SpacePoint::new(v).unwrap()
    }

    fn ball(c: &[f64], r: f64) -> SpatialBall {
        SpatialBall { center: sp(c), radius: r }
    }

    fn square() -> WeightedPointCloud {
        WeightedPointCloud::unit(vec![
            sp(&[1.0, 1.0]),
            sp(&[-1.0, 1.0]),
            sp(&[1.0, -1.0]),
            sp(&[-1.0, -1.0]),
        ])
        .unwrap()
    }

    #[test]
    fn center_of_mass_examples() {
        let one = WeightedPointCloud::unit(vec![sp(&[0.3, -0.2])]).unwrap();
        let c = center_of_mass(&one, &ball(&[0.0, 0.0], 1.0)).unwrap();
        assert!(c.dist(&sp(&[0.3, -0.2])) < 1e-15);
        let two = WeightedPointCloud::unit(vec![sp(&[0.0, 0.0]), sp(&[1.0, 2.0])]).unwrap();
        let c = center_of_mass(&two, &ball(&[0.0, 0.0], 3.0)).unwrap();
        assert!(c.dist(&sp(&[0.5, 1.0])) < 1e-15);
        let tri = WeightedPointCloud::new(
            vec![sp(&[0.0, 0.0]), sp(&[2.0, 0.0]), sp(&[0.0, 2.0])],
            vec![1.0, 1.0, 2.0],
        )
        .unwrap();
        let c = center_of_mass(&tri, &ball(&[0.0, 0.0], 3.0)).unwrap();
        assert!(c.dist(&sp(&[0.5, 1.0])) < 1e-15);
        assert!(matches!(
            center_of_mass(&tri, &ball(&[9.0, 9.0], 1.0)),
            Err(Error::ZeroMass)
        ));
        assert!(WeightedPointCloud::new(vec![sp(&[0.0])], vec![0.0]).is_err());
    }

    #[test]
    fn spectrum_examples() {
        let axis = WeightedPointCloud::unit(
            (0..7).map(|i| sp(&[i as f64 * 0.1 - 0.3, 0.0, 0.0])).collect(),
        )
        .unwrap();
        let s = moment_spectrum(&axis, &ball(&[0.0, 0.0, 0.0], 1.0)).unwrap();
        assert!(s.eigenvalues[1] < 1e-15 && s.eigenvalues[2] < 1e-15);
        assert!((s.eigenvectors[0][0].abs() - 1.0).abs() < 1e-12);
        assert!(s.eigenvectors[0][0] > 0.0);
        let sq = moment_spectrum(&square(), &ball(&[0.0, 0.0], 2.0)).unwrap();
        assert!((sq.eigenvalues[0] - 1.0).abs() < 1e-14);
        assert!((sq.eigenvalues[1] - 1.0).abs() < 1e-14);
        // tie: residuals vanish whatever basis comes back
        let res = eigen_residuals(&square(), &ball(&[0.0, 0.0], 2.0), &sq).unwrap();
        assert!(res.iter().all(|v| *v < 1e-14));
        let plane = sq.plane(1).unwrap();
        assert!(AffineSubspace::new(plane.base, plane.basis.clone()).is_ok());
    }

    #[test]
    fn displacement_examples() {
        let b = ball(&[0.0, 0.0], 2.0);
        assert!((displacement(&square(), &b, 1).unwrap() - 0.5).abs() < 1e-14);
        assert_eq!(displacement(&square(), &b, 2).unwrap(), 0.0);
        assert!(displacement(&square(), &b, 3).is_err());
        let line = WeightedPointCloud::unit(
            (0..5).map(|i| sp(&[0.1 * i as f64, 0.2 * i as f64])).collect(),
        )
        .unwrap();
        assert!(displacement(&line, &b, 1).unwrap() < 1e-14);
        let opts = BruteForceOptions::default();
        let bf = displacement_bruteforce(&square(), &b, 1, &opts).unwrap();
        assert!((bf - 0.5).abs() < 5e-4, "{bf}");
        assert!(displacement_bruteforce(&line, &b, 1, &opts).unwrap() < 1e-12);
        let spec = moment_spectrum(&square(), &b).unwrap();
        let direct = displacement_to_plane(&square(), &b, &spec.plane(1).unwrap()).unwrap();
        assert!((direct - 0.5).abs() < 1e-14);
    }

    #[test]
    fn bruteforce_cost_guard() {
        let many = WeightedPointCloud::unit((0..61).map(|i| sp(&[i as f64 / 100.0])).collect()).unwrap();
        assert!(matches!(
            displacement_bruteforce(&many, &ball(&[0.0], 1.0), 0, &BruteForceOptions::default()),
            Err(Error::CostGuard(_))
        ));
    }

    fn random_cloud(rng: &mut ChaCha8Rng, n: usize, m: usize) -> WeightedPointCloud {
        let mut pts = Vec::new();
        let mut w = Vec::new();
        while pts.len() < m {
            let v: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
            if v.iter().map(|x| x * x).sum::<f64>() < 1.0 {
                pts.push(sp(&v));
                w.push(rng.random_range(0.5..2.0));
            }
        }
        WeightedPointCloud::new(pts, w).unwrap()
    }

    #[test]
    fn spectral_matches_bruteforce_on_random_clouds() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let opts = BruteForceOptions::default();
        for trial in 0..12 {
            let n = 2 + trial % 2;
            let mu = random_cloud(&mut rng, n, 10 + trial);
            let b = ball(&vec![0.0; n], 1.0);
            for k in 0..n {
                let s = displacement(&mu, &b, k).unwrap();
                let bf = displacement_bruteforce(&mu, &b, k, &opts).unwrap();
                assert!((s - bf).abs() <= 1e-3 * s.max(bf), "n={n} k={k}: {s} vs {bf}");
                assert!(bf >= s * (1.0 - 1e-9));
            }
        }
    }

    #[test]
    fn displacement_invariances() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mu = random_cloud(&mut rng, 3, 20);
        let b = ball(&[0.0, 0.0, 0.0], 1.0);
        // rotation about e3 plus translation
        let (c, s) = (0.7f64.cos(), 0.7f64.sin());
        let shift = [0.3, -1.2, 2.0];
        let moved: Vec<SpacePoint> = mu
            .points()
            .iter()
            .map(|p| {
                let x = p.coords();
                sp(&[c * x[0] - s * x[1] + shift[0], s * x[0] + c * x[1] + shift[1], x[2] + shift[2]])
            })
            .collect();
        let mu2 = WeightedPointCloud::new(moved, mu.weights().to_vec()).unwrap();
        let b2 = ball(&shift, 1.0);
        for k in 0..=3 {
            let lam = 2.5f64;
            let d = displacement(&mu, &b, k).unwrap();
            let d2 = displacement(&mu2, &b2, k).unwrap();
            assert!((d - d2).abs() <= 1e-12 * d.max(1e-300), "{d} {d2}");
            let scaled = WeightedPointCloud::new(
                mu.points().iter().map(|p| p.scaled(lam)).collect(),
                mu.weights().iter().map(|w| w * lam.powi(k as i32)).collect(),
            )
            .unwrap();
            let d3 = displacement(&scaled, &ball(&[0.0, 0.0, 0.0], lam), k).unwrap();
            assert!((d - d3).abs() <= 1e-12 * d.max(1e-300), "{d} {d3}");
        }
    }

    #[test]
    fn unit_ball_volumes() {
        assert_eq!(unit_ball_volume(0), 1.0);
        assert_eq!(unit_ball_volume(1), 2.0);
        assert!((unit_ball_volume(2) - PI).abs() < 1e-15);
        assert!((unit_ball_volume(3) - 4.0 * PI / 3.0).abs() < 1e-14);
    }

    #[test]
    fn packing_disjointness() {
        let mut ok = PackingMeasure::new(vec![sp(&[0.0, 0.0]), sp(&[0.4, 0.0])], vec![0.1, 0.1], 1).unwrap();
        ok.verify_disjoint().unwrap();
        assert!(ok.disjoint);
        let mut bad = PackingMeasure::new(vec![sp(&[0.0, 0.0]), sp(&[0.39, 0.0])], vec![0.1, 0.1], 1).unwrap();
        let e = bad.verify_disjoint().unwrap_err();
        assert!(e.to_string().contains("0 and 1"), "{e}");
    }

    #[test]
    fn reifenberg_single_atom_and_line() {
        let mut one = PackingMeasure::new(vec![sp(&[0.1, 0.0, 0.0])], vec![0.05], 1).unwrap();
        let rep = reifenberg_check(&mut one, &ball(&[0.0, 0.0, 0.0], 1.0), 0.01).unwrap();
        assert!(rep.balls.iter().all(|b| b.sum == 0.0));
        assert!((rep.packing_ratio - 0.1).abs() < 1e-15);
        let rho = 1.0 / 32.0;
        let centers: Vec<SpacePoint> = (-8..=8).map(|i| sp(&[4.0 * rho * i as f64, 0.0, 0.0])).collect();
        let radii = vec![rho; centers.len()];
        let mut line = PackingMeasure::new(centers, radii, 1).unwrap();
        let rep = reifenberg_check(&mut line, &ball(&[0.0, 0.0, 0.0], 1.0), 0.01).unwrap();
        assert!(rep.holds);
        assert!(rep.balls.iter().all(|b| b.sum < 1e-20));
        assert!(rep.packing_ratio <= PI / 2.0 + 0.1, "{}", rep.packing_ratio);
    }

    #[test]
    fn jones_examples() {
        let line = WeightedPointCloud::unit((0..50).map(|i| sp(&[i as f64 / 49.0 - 0.5, 0.0])).collect()).unwrap();
        let scales = dyadic_scales(1.0, 8);
        let j = jones_functional(&line, &sp(&[0.0, 0.0]), 1, &scales).unwrap();
        assert!(j.total < 1e-14);
        let circle = |m: usize| {
            WeightedPointCloud::new(
                (0..m)
                    .map(|i| {
                        let a = 2.0 * PI * i as f64 / m as f64;
                        sp(&[a.cos(), a.sin()])
                    })
                    .collect(),
                vec![2.0 * PI / m as f64; m],
            )
            .unwrap()
        };
        let x = sp(&[1.0, 0.0]);
        let a = jones_functional(&circle(2000), &x, 1, &scales).unwrap().total;
        let b = jones_functional(&circle(4000), &x, 1, &scales).unwrap().total;
        assert!(a > 0.0 && (a / b - 1.0).abs() < 0.1, "{a} {b}");
        // additivity under splitting the scale list
        let (s1, s2) = scales.split_at(3);
        let c1 = jones_functional(&circle(2000), &x, 1, s1).unwrap().total;
        let c2 = jones_functional(&circle(2000), &x, 1, s2).unwrap().total;
        assert_eq!(c1 + c2, jones_functional(&circle(2000), &x, 1, &[s1, s2].concat()).unwrap().total);
        assert!(matches!(
            jones_functional(&circle(10), &sp(&[5.0, 5.0]), 1, &scales),
            Err(Error::ZeroMass)
        ));
    }

    #[test]
    fn csv_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("cloud.csv");
        let mu = WeightedPointCloud::new(vec![sp(&[0.1, 1.0 / 3.0]), sp(&[-2.0, 5e-7])], vec![1.5, 0.25]).unwrap();
        write_cloud_csv(&p, &mu).unwrap();
        assert_eq!(read_cloud_csv(&p).unwrap(), mu);
        let q = dir.path().join("pack.csv");
        let pk = PackingMeasure::new(vec![sp(&[0.0, 0.0, 0.1])], vec![0.01], 2).unwrap();
        write_packing_csv(&q, &pk).unwrap();
        assert_eq!(read_packing_csv(&q, 2).unwrap(), pk);
    }

    proptest::proptest! {
        #[test]
        fn displacement_is_translation_invariant(
            raw in proptest::collection::vec((-1.0f64..1.0, -1.0f64..1.0, -1.0f64..1.0), 3..30),
            shift in (-5.0f64..5.0, -5.0f64..5.0, -5.0f64..5.0),
            k in 0usize..3,
        ) {
            let pts: Vec<SpacePoint> = raw.iter().map(|&(a, b, c)| sp(&[a, b, c])).collect();
            let moved: Vec<SpacePoint> = raw
                .iter()
                .map(|&(a, b, c)| sp(&[a + shift.0, b + shift.1, c + shift.2]))
                .collect();
            let d0 = displacement(&WeightedPointCloud::unit(pts).unwrap(), &ball(&[0.0; 3], 2.0), k).unwrap();
            let d1 = displacement(
                &WeightedPointCloud::unit(moved).unwrap(),
                &ball(&[shift.0, shift.1, shift.2], 2.0),
                k,
            )
            .unwrap();
            proptest::prop_assert!(d0 >= 0.0);
            proptest::prop_assert!((d0 - d1).abs() <= 1e-9 * (1.0 + d0));
        }
    }
}
