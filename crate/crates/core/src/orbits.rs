//! Delocalised periodic flow curves: search, Newton refinement, linearised
//! Poincare maps and primitive periods.
//!
//! A curve `gamma` is `(x, l)`-periodic when `phi_l(gamma(0)) = x gamma(0)`.
//! On a compact quotient the closing element is a deck transformation instead
//! of a group element.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::flow::CoverSystem;
use crate::geometry::{CutoffFunction, DeckElt, GroupElt, Point, SampleBox};
use crate::ode::Trajectory;
use crate::quad;

pub const RESIDUAL_TOL: f64 = 1e-9;
pub const DEDUP_PERIOD_TOL: f64 = 1e-7;
pub const DEDUP_DISTANCE_TOL: f64 = 1e-6;
pub const NEWTON_TRUST: f64 = 0.1;
pub const MAX_NEWTON: usize = 50;
pub const MAX_DIVISOR: usize = 12;

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Window {
    pub lo: f64,
    pub hi: f64,
}

impl Window {
    pub fn new(lo: f64, hi: f64) -> Result<Window> {
        if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
            return Err(Error::Validation {
                key: "window".into(),
                reason: format!("need l_min < l_max, got ({lo}, {hi})"),
            });
        }
        if lo <= 0.0 && hi >= 0.0 {
            return Err(Error::Validation {
                key: "window".into(),
                reason: "periods must avoid 0".into(),
            });
        }
        Ok(Window { lo, hi })
    }

    pub fn contains(&self, l: f64) -> bool {
        l >= self.lo && l <= self.hi
    }

    /// End of the window farthest from 0.
    pub fn far(&self) -> f64 {
        if self.hi > 0.0 {
            self.hi
        } else {
            self.lo
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SeedSpec {
    /// Seed points per chart axis.
    pub per_axis: usize,
    /// Time resolution of the near-return scan.
    pub time_step: f64,
    /// Largest closing distance that still triggers a Newton solve.
    pub capture: f64,
}

impl Default for SeedSpec {
    fn default() -> Self {
        SeedSpec {
            per_axis: 6,
            time_step: 0.02,
            capture: 0.5,
        }
    }
}

/// The element closing a curve: `phi_l(m) = deck (x m)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Target {
    pub x: GroupElt,
    pub deck: Option<DeckElt>,
}

impl Target {
    pub fn payload(&self) -> String {
        match &self.deck {
            Some(d) => d.payload(),
            None => self.x.payload(),
        }
    }

    pub fn apply(&self, sys: &CoverSystem, m: &Point) -> Point {
        let y = sys.group.act(&self.x, m);
        match (&self.deck, &sys.chart.quotient) {
            (Some(d), Some(q)) => q.act(d, &y),
            _ => y,
        }
    }

    pub fn jacobian(&self, sys: &CoverSystem, m: &Point) -> DMatrix<f64> {
        let jx = sys.group.act_jacobian(&self.x, m);
        match (&self.deck, &sys.chart.quotient) {
            (Some(d), Some(q)) => q.act_jacobian(d, &sys.group.act(&self.x, m)) * jx,
            _ => jx,
        }
    }

    pub fn inverse(&self, sys: &CoverSystem) -> Target {
        // (d x)^{-1} = x^{-1} d^{-1}; decks only occur with a trivial group
        Target {
            x: sys.group.inverse(&self.x),
            deck: match (&self.deck, &sys.chart.quotient) {
                (Some(d), Some(q)) => Some(q.inverse(d)),
                _ => None,
            },
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum OrbitKind {
    Periodic { t_sharp: f64 },
    ProperLine,
}

impl OrbitKind {
    pub fn name(&self) -> &'static str {
        match self {
            OrbitKind::Periodic { .. } => "periodic",
            OrbitKind::ProperLine => "proper-line",
        }
    }

    pub fn t_sharp(&self) -> Option<f64> {
        match self {
            OrbitKind::Periodic { t_sharp } => Some(*t_sharp),
            OrbitKind::ProperLine => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DelocalizedOrbit {
    pub target: Target,
    pub l: f64,
    pub m0: Point,
    pub kind: OrbitKind,
    pub residual: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PoincareData {
    /// Row-major `(n-1) x (n-1)` block on the orthogonal complement of the flow.
    pub p: Vec<f64>,
    pub det_one_minus_p: f64,
    pub nondegenerate: bool,
    /// `|A u(m0) - u(m0)|` for the full linearisation `A`.
    pub eigen_defect: f64,
}

pub const DEFAULT_DEGENERACY: f64 = 1e-8;

fn closing_residual(sys: &CoverSystem, target: &Target, m: &Point, l: f64) -> Result<f64> {
    Ok((sys.flow(m, l)? - target.apply(sys, m)).norm())
}

/// Damped Newton for `phi_l(m) = target(m)` with the phase condition
/// `<u(m_seed), m - m_seed> = 0`. Unknowns are `(m, l)`.
pub fn refine(sys: &CoverSystem, seed: (&Point, f64), target: &Target) -> Result<DelocalizedOrbit> {
    let n = sys.dim();
    let (m_seed, l_seed) = seed;
    let u_seed = sys.field.at(m_seed);
    let mut m = m_seed.clone();
    let mut l = l_seed;
    let evaluate = |m: &Point, l: f64| -> Result<(DVector<f64>, Point, DMatrix<f64>)> {
        let (fm, j) = sys.flow_with_jacobian(m, l)?;
        let r = &fm - target.apply(sys, m);
        let mut full = DVector::zeros(n + 1);
        full.rows_mut(0, n).copy_from(&r);
        full[n] = u_seed.dot(&(m - m_seed));
        Ok((full, fm, j))
    };
    let (mut res, mut fm, mut jac) = evaluate(&m, l)?;
    let mut history = vec![res.norm()];
    let mut rank_deficient = false;
    // trust radius: flat closing maps produce huge raw steps that jump basins
    let mut radius = NEWTON_TRUST;
    for _ in 0..MAX_NEWTON {
        let r_norm = res.rows(0, n).norm();
        if r_norm <= 1e-12 * (1.0 + m.norm()) && res[n].abs() <= 1e-12 {
            break;
        }
        let mut big = DMatrix::zeros(n + 1, n + 1);
        let dx = target.jacobian(sys, &m);
        big.view_mut((0, 0), (n, n)).copy_from(&(&jac - dx));
        let uf = sys.field.at(&fm);
        big.view_mut((0, n), (n, 1)).copy_from(&uf);
        big.view_mut((n, 0), (1, n)).copy_from(&u_seed.transpose());
        let svd = big.svd(true, true);
        let smax = svd.singular_values.max();
        let cut = 1e-12 * smax.max(1e-300);
        if svd.singular_values.iter().any(|&s| s <= cut) {
            rank_deficient = true;
        }
        let step = svd
            .solve(&(-&res), cut)
            .map_err(|_| Error::SingularJacobian {
                point: m.as_slice().to_vec(),
            })?;
        let old = res.norm();
        let capped = step.norm() > radius;
        let mut lambda = if capped { radius / step.norm() } else { 1.0 };
        let first = lambda;
        let mut accepted = false;
        while lambda >= 1e-7 {
            let m_try = &m + step.rows(0, n) * lambda;
            let l_try = l + step[n] * lambda;
            if l_try.abs() <= sys.field.t_max && l_try != 0.0 {
                if let Ok((r_try, fm_try, j_try)) = evaluate(&m_try, l_try) {
                    if r_try.norm() < (1.0 - 0.25 * lambda) * old || r_try.norm() <= 1e-13 {
                        m = m_try;
                        l = l_try;
                        res = r_try;
                        fm = fm_try;
                        jac = j_try;
                        accepted = true;
                        radius = if capped && lambda == first {
                            2.0 * radius
                        } else {
                            radius.max(lambda * step.norm())
                        };
                        break;
                    }
                }
            }
            lambda *= 0.5;
        }
        history.push(res.norm());
        if !accepted {
            break;
        }
    }
    log::trace!("newton residuals {history:?}");
    let residual = res.rows(0, n).norm();
    if residual > RESIDUAL_TOL || !residual.is_finite() {
        if rank_deficient && residual < 1e-4 {
            return Err(Error::SingularJacobian {
                point: m.as_slice().to_vec(),
            });
        }
        return Err(Error::NoConvergence { residual });
    }
    let kind = classify(sys, target, &m, l)?;
    Ok(DelocalizedOrbit {
        target: target.clone(),
        l,
        m0: m,
        kind,
        residual,
    })
}

/// Periodic or proper line, with the primitive period from divisor tests.
fn classify(sys: &CoverSystem, target: &Target, m0: &Point, l: f64) -> Result<OrbitKind> {
    let full = if target.deck.is_some() {
        l.abs()
    } else {
        match sys.group.element_order(&target.x) {
            Some(k) => k as f64 * l.abs(),
            None => return Ok(OrbitKind::ProperLine),
        }
    };
    let closes = |p: f64| -> Result<bool> {
        if p > sys.field.t_max {
            return Ok(false);
        }
        let end = sys.flow(m0, p)?;
        let d = match &sys.chart.quotient {
            Some(q) if target.deck.is_some() => q.distance(m0, &end),
            _ => (end - m0).norm(),
        };
        Ok(d <= RESIDUAL_TOL)
    };
    for j in (1..=MAX_DIVISOR).rev() {
        let p = full / j as f64;
        if closes(p)? {
            return Ok(OrbitKind::Periodic { t_sharp: p });
        }
    }
    // the full period closes by construction up to integration error
    Ok(OrbitKind::Periodic { t_sharp: full })
}

/// Linearised delocalised Poincare map at the base point.
pub fn poincare(sys: &CoverSystem, orbit: &DelocalizedOrbit, threshold: f64) -> Result<PoincareData> {
    let n = sys.dim();
    let m0 = &orbit.m0;
    let inv = orbit.target.inverse(sys);
    let back = inv.apply(sys, m0);
    let (_, dphi) = sys.flow_with_jacobian(&back, orbit.l)?;
    let a_full = dphi * inv.jacobian(sys, m0);
    let u = sys.field.at(m0);
    let eigen_defect = (&a_full * &u - &u).norm();
    if n == 1 {
        return Ok(PoincareData {
            p: vec![],
            det_one_minus_p: 1.0,
            nondegenerate: true,
            eigen_defect,
        });
    }
    let basis = flow_adapted_basis(&u);
    let conj = basis
        .clone()
        .try_inverse()
        .ok_or_else(|| Error::SingularJacobian {
            point: m0.as_slice().to_vec(),
        })?
        * a_full
        * basis;
    let p = conj.view((1, 1), (n - 1, n - 1)).into_owned();
    let det = (DMatrix::identity(n - 1, n - 1) - &p).determinant();
    let mut flat = Vec::with_capacity((n - 1) * (n - 1));
    for i in 0..n - 1 {
        for j in 0..n - 1 {
            flat.push(p[(i, j)]);
        }
    }
    Ok(PoincareData {
        p: flat,
        det_one_minus_p: det,
        nondegenerate: det.abs() >= threshold,
        eigen_defect,
    })
}

/// Columns `u, e_2, ..., e_n` with `e_i` orthonormal and orthogonal to `u`.
fn flow_adapted_basis(u: &Point) -> DMatrix<f64> {
    let n = u.len();
    let mut cols: Vec<DVector<f64>> = vec![u.normalize()];
    for k in 0..n {
        if cols.len() == n {
            break;
        }
        let mut v = DVector::zeros(n);
        v[k] = 1.0;
        for c in &cols {
            let d = c.dot(&v);
            v -= c * d;
        }
        // second pass for stability
        for c in &cols {
            let d = c.dot(&v);
            v -= c * d;
        }
        if v.norm() > 1e-6 {
            cols.push(v.normalize());
        }
    }
    let mut b = DMatrix::zeros(n, n);
    b.set_column(0, u);
    for (i, c) in cols.iter().enumerate().skip(1) {
        b.set_column(i, c);
    }
    b
}

/// The same curve with base point moved to `gamma(s)`.
pub fn time_shift(sys: &CoverSystem, orbit: &DelocalizedOrbit, s: f64) -> Result<DelocalizedOrbit> {
    let m0 = sys.flow(&orbit.m0, s)?;
    let residual = closing_residual(sys, &orbit.target, &m0, orbit.l)?;
    Ok(DelocalizedOrbit {
        m0,
        residual,
        ..orbit.clone()
    })
}

/// Dense sweep of the curve long enough to leave the support of `chi`
/// (proper lines) or one primitive period (periodic curves).
struct Sweep {
    forward: Trajectory,
    backward: Option<Trajectory>,
}

impl Sweep {
    fn eval(&self, s: f64) -> Point {
        let v = if s >= 0.0 || self.backward.is_none() {
            self.forward.eval(s)
        } else {
            self.backward.as_ref().expect("checked").eval(s)
        };
        DVector::from_vec(v)
    }
}

fn leaves_ball(sys: &CoverSystem, p: &Point, center: &Point, radius: f64, outward: f64) -> bool {
    let rel = p - center;
    rel.norm() > radius && outward * rel.dot(&sys.field.at(p)) > 0.0
}

/// `T_gamma`: integral of `chi` along one injective sweep of the curve.
pub fn primitive_period(sys: &CoverSystem, orbit: &DelocalizedOrbit, chi: &CutoffFunction) -> Result<f64> {
    match orbit.kind {
        OrbitKind::Periodic { t_sharp } => {
            if let CutoffFunction::Constant(c) = chi {
                return Ok(c * t_sharp);
            }
            let tr = sys.trajectory(&orbit.m0, t_sharp)?;
            let v = quad::integrate(
                |s| chi.eval(&DVector::from_vec(tr.eval(s))),
                0.0,
                t_sharp,
                1e-14,
                1e-13,
            );
            Ok(v.max(0.0))
        }
        OrbitKind::ProperLine => {
            let (center, radius) = chi.support_ball().ok_or_else(|| {
                Error::Model("a proper-line curve needs a compactly supported cutoff".into())
            })?;
            let mut s = orbit.l.abs().max(1.0);
            loop {
                if s > sys.field.t_max {
                    return Err(Error::SupportEscape { s });
                }
                let fwd = sys.trajectory(&orbit.m0, s)?;
                let bwd = sys.trajectory(&orbit.m0, -s)?;
                let pf = DVector::from_column_slice(fwd.end());
                let pb = DVector::from_column_slice(bwd.end());
                if leaves_ball(sys, &pf, &center, radius, 1.0) && leaves_ball(sys, &pb, &center, radius, -1.0) {
                    let sweep = Sweep {
                        forward: fwd,
                        backward: Some(bwd),
                    };
                    let v = quad::integrate(|t| chi.eval(&sweep.eval(t)), -s, s, 1e-14, 1e-13);
                    return Ok(v.max(0.0));
                }
                s *= 2.0;
            }
        }
    }
}

/// Distance from `p` to the curve of `orbit` (modulo deck transformations in
/// quotient mode), searching `s` in `[lo, hi]`.
fn distance_to_curve(sys: &CoverSystem, sweep: &Sweep, lo: f64, hi: f64, p: &Point, quotient: bool) -> f64 {
    let dist = |s: f64| -> f64 {
        let c = sweep.eval(s);
        match (&sys.chart.quotient, quotient) {
            (Some(q), true) => q.distance(p, &c),
            _ => (c - p).norm(),
        }
    };
    let samples = 400;
    let h = (hi - lo) / samples as f64;
    let mut best = (f64::INFINITY, lo);
    for k in 0..=samples {
        let s = lo + h * k as f64;
        let d = dist(s);
        if d < best.0 {
            best = (d, s);
        }
    }
    // golden-section polish around the best sample
    let (mut a, mut b) = ((best.1 - h).max(lo), (best.1 + h).min(hi));
    let g = 0.5 * (5f64.sqrt() - 1.0);
    let mut c = b - g * (b - a);
    let mut d = a + g * (b - a);
    let (mut fc, mut fd) = (dist(c), dist(d));
    for _ in 0..80 {
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - g * (b - a);
            fc = dist(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + g * (b - a);
            fd = dist(d);
        }
    }
    best.0.min(fc).min(fd)
}

fn same_class(sys: &CoverSystem, a: &DelocalizedOrbit, b: &DelocalizedOrbit, reach: f64) -> Result<bool> {
    if (a.l - b.l).abs() > DEDUP_PERIOD_TOL || a.target.x != b.target.x {
        return Ok(false);
    }
    let quotient = a.target.deck.is_some();
    let direct = match (&sys.chart.quotient, quotient) {
        (Some(q), true) => q.distance(&a.m0, &b.m0),
        _ => (&a.m0 - &b.m0).norm(),
    };
    if direct <= DEDUP_DISTANCE_TOL {
        return Ok(true);
    }
    let (sweep, lo, hi) = match a.kind {
        OrbitKind::Periodic { t_sharp } => (
            Sweep {
                forward: sys.trajectory(&a.m0, t_sharp)?,
                backward: None,
            },
            0.0,
            t_sharp,
        ),
        OrbitKind::ProperLine => {
            let s = reach.min(sys.field.t_max);
            (
                Sweep {
                    forward: sys.trajectory(&a.m0, s)?,
                    backward: Some(sys.trajectory(&a.m0, -s)?),
                },
                -s,
                s,
            )
        }
    };
    Ok(distance_to_curve(sys, &sweep, lo, hi, &b.m0, quotient) <= DEDUP_DISTANCE_TOL)
}

/// Region scanned for seeds: the cutoff support for proper actions with a
/// compact cutoff, otherwise the chart sample box. A finite group's cutoff
/// may be supported far outside the dynamics, so there the two are clipped.
pub fn seed_region(sys: &CoverSystem) -> SampleBox {
    if sys.chart.quotient.is_none() {
        if let Some(b) = sys.cutoff.support_box() {
            if sys.group.order().is_none() {
                return b;
            }
            let chart = &sys.chart.sample_box;
            let lo: Vec<f64> = b.lo.iter().zip(&chart.lo).map(|(a, c)| a.max(*c)).collect();
            let hi: Vec<f64> = b.hi.iter().zip(&chart.hi).map(|(a, c)| a.min(*c)).collect();
            if lo.iter().zip(&hi).all(|(l, h)| l < h) {
                return SampleBox { lo, hi };
            }
        }
    }
    sys.chart.sample_box.clone()
}

fn lex_cmp(a: &Point, b: &Point) -> std::cmp::Ordering {
    for (x, y) in a.iter().zip(b.iter()) {
        match x.total_cmp(y) {
            std::cmp::Ordering::Equal => continue,
            o => return o,
        }
    }
    std::cmp::Ordering::Equal
}

/// Near-returns of the curve through `m` inside the window: local minima of
/// the closing distance below the capture radius.
fn scan_seed(sys: &CoverSystem, x: &GroupElt, window: Window, spec: &SeedSpec, m: &Point) -> Vec<(Point, f64, Target)> {
    let far = window.far();
    let Ok(tr) = sys.trajectory(m, far) else {
        return vec![];
    };
    let xm = sys.group.act(x, m);
    let steps = (((window.hi - window.lo) / spec.time_step).ceil() as usize).max(8);
    let dt = (window.hi - window.lo) / steps as f64;
    let mut samples = Vec::with_capacity(steps + 1);
    for k in 0..=steps {
        let t = window.lo + dt * k as f64;
        let p = DVector::from_vec(tr.eval(t));
        let (d, deck) = match &sys.chart.quotient {
            Some(q) => {
                let dk = q.nearest(&xm, &p);
                ((q.act(&dk, &xm) - &p).norm(), Some(dk))
            }
            None => ((&p - &xm).norm(), None),
        };
        samples.push((t, d, deck));
    }
    let mut out = Vec::new();
    for k in 0..samples.len() {
        let d = samples[k].1;
        let left = if k > 0 { samples[k - 1].1 } else { f64::INFINITY };
        let right = samples.get(k + 1).map(|s| s.1).unwrap_or(f64::INFINITY);
        if d <= spec.capture && d <= left && d < right {
            out.push((
                m.clone(),
                samples[k].0,
                Target {
                    x: x.clone(),
                    deck: samples[k].2.clone(),
                },
            ));
        }
    }
    out
}

/// All `(x, l)`-periodic curve classes with `l` in the window that are
/// reachable from the seed grid, sorted by `(l, m0)`.
pub fn find_orbits(sys: &CoverSystem, x: &GroupElt, window: Window, spec: &SeedSpec) -> Result<Vec<DelocalizedOrbit>> {
    if window.far().abs() > sys.field.t_max {
        return Err(Error::Validation {
            key: "window".into(),
            reason: format!("window exceeds the time horizon {}", sys.field.t_max),
        });
    }
    let region = seed_region(sys);
    // Cell centres shifted by a fixed irrational fraction: symmetric models
    // otherwise put seeds exactly on critical points of the closing map.
    let jitter = 0.5 * (5f64.sqrt() - 2.0);
    let points: Vec<Point> = region
        .grid(&vec![spec.per_axis; sys.dim()])
        .into_iter()
        .map(|mut p| {
            for i in 0..p.len() {
                p[i] += jitter * (region.hi[i] - region.lo[i]) / spec.per_axis as f64;
            }
            p
        })
        .collect();
    let seeds: Vec<(Point, f64, Target)> = points
        .par_iter()
        .map(|m| scan_seed(sys, x, window, spec, m))
        .collect::<Vec<_>>()
        .into_iter()
        .flatten()
        .collect();
    let refined: Vec<Result<DelocalizedOrbit>> = seeds
        .par_iter()
        .map(|(m, t, target)| refine(sys, (m, *t), target))
        .collect();
    let mut found = Vec::new();
    for r in refined {
        match r {
            Ok(o) if window.contains(o.l) => found.push(o),
            // an iterate that escapes to where the flow blows up is a failed seed
            Ok(_)
            | Err(Error::NoConvergence { .. })
            | Err(Error::SingularJacobian { .. })
            | Err(Error::StepFailure { .. }) => {}
            Err(e) => return Err(e),
        }
    }
    log::debug!("{} seeds, {} converged", seeds.len(), found.len());
    found.sort_by(|a, b| a.l.total_cmp(&b.l).then_with(|| lex_cmp(&a.m0, &b.m0)));
    let diam = region
        .lo
        .iter()
        .zip(&region.hi)
        .map(|(a, b)| (b - a).powi(2))
        .sum::<f64>()
        .sqrt();
    let mut classes: Vec<DelocalizedOrbit> = Vec::new();
    for o in found {
        let speed = sys.field.at(&o.m0).norm().max(1e-6);
        let reach = 2.0 * diam / speed + o.l.abs();
        let mut dup = false;
        for c in classes.iter().rev() {
            if (c.l - o.l).abs() > DEDUP_PERIOD_TOL {
                break;
            }
            if same_class(sys, c, &o, reach)? {
                dup = true;
                break;
            }
        }
        if !dup {
            classes.push(o);
        }
    }
    Ok(classes)
}

/// Map `(g, l)`-curves to `(h g h^{-1}, l)`-curves through `m0 -> h m0`.
pub fn conjugate_orbits(sys: &CoverSystem, h: &GroupElt, orbits: &[DelocalizedOrbit]) -> Result<Vec<DelocalizedOrbit>> {
    if sys.group.is_identity(h) {
        return Ok(orbits.to_vec());
    }
    orbits
        .iter()
        .map(|o| {
            let target = Target {
                x: sys.group.conjugate(h, &o.target.x),
                deck: o.target.deck.clone(),
            };
            let m0 = sys.group.act(h, &o.m0);
            let residual = closing_residual(sys, &target, &m0, o.l)?;
            Ok(DelocalizedOrbit {
                target,
                l: o.l,
                m0,
                kind: o.kind,
                residual,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::tests::system;
    use crate::geometry::{build_cutoff, GroupModel, MapSpec, QuotientDeck, WindowSpec};

    fn unit_shift(n: usize, axis: usize) -> MapSpec {
        let mut b = DVector::zeros(n);
        b[axis] = 1.0;
        MapSpec::Affine {
            linear: DMatrix::identity(n, n),
            offset: b,
        }
    }

    fn translation_example() -> CoverSystem {
        let g = GroupModel::translation_line(DVector::from_vec(vec![1.0])).unwrap();
        let mut s = system(&["x"], &["1"], g, vec![-1.0], vec![1.0], None);
        s.cutoff = build_cutoff(
            &WindowSpec::Bump {
                center: vec![0.1],
                radius: 0.5,
            },
            &s.group,
            &s.chart.sample_box,
            8,
        )
        .unwrap();
        s
    }

    #[test]
    fn translation_orbit_is_a_single_line() {
        let s = translation_example();
        for a in [0.7, -1.3] {
            let w = if a > 0.0 { Window::new(0.2, 2.0) } else { Window::new(-2.0, -0.2) }.unwrap();
            let found = find_orbits(&s, &GroupElt::Real(a), w, &SeedSpec::default()).unwrap();
            assert_eq!(found.len(), 1);
            let o = &found[0];
            assert!((o.l - a).abs() < 1e-12);
            assert_eq!(o.kind, OrbitKind::ProperLine);
            let p = poincare(&s, o, DEFAULT_DEGENERACY).unwrap();
            assert_eq!(p.det_one_minus_p, 1.0);
            let t = primitive_period(&s, o, &s.cutoff).unwrap();
            assert!((t - 1.0).abs() < 1e-10, "{t}");
        }
    }

    #[test]
    fn irrational_slope_has_no_closed_curves() {
        let g = GroupModel::free_abelian(2, vec![unit_shift(2, 0), unit_shift(2, 1)]).unwrap();
        let mut s = system(&["x", "y"], &["1", "sqrt(2)"], g, vec![0.0, 0.0], vec![1.0, 1.0], None);
        s.cutoff = build_cutoff(
            &WindowSpec::Bump {
                center: vec![0.5, 0.5],
                radius: 0.9,
            },
            &s.group,
            &s.chart.sample_box,
            6,
        )
        .unwrap();
        let found = find_orbits(&s, &GroupElt::Lattice(vec![0, 0]), Window::new(0.5, 10.0).unwrap(), &SeedSpec::default()).unwrap();
        assert!(found.is_empty());
    }

    fn suspension(amplitude: f64) -> CoverSystem {
        let g = GroupModel::free_abelian(
            2,
            vec![
                unit_shift(2, 0),
                MapSpec::CircleLift {
                    coord: 0,
                    amplitude,
                    shift: DVector::from_vec(vec![0.0, -1.0]),
                },
            ],
        )
        .unwrap();
        let mut s = system(&["x", "s"], &["0", "1"], g, vec![0.0, 0.0], vec![1.0, 1.0], None);
        s.cutoff = build_cutoff(
            &WindowSpec::Bump {
                center: vec![0.5, 0.5],
                radius: 0.9,
            },
            &s.group,
            &s.chart.sample_box,
            8,
        )
        .unwrap();
        s
    }

    fn lift(x: f64, n: usize) -> (f64, f64) {
        // f^n(x) and its derivative by the chain rule
        let mut y = x;
        let mut d = 1.0;
        for _ in 0..n {
            d *= 1.0 + 0.1 * 2.0 * std::f64::consts::PI * (2.0 * std::f64::consts::PI * y).cos();
            y += 0.1 * (2.0 * std::f64::consts::PI * y).sin();
        }
        (y, d)
    }

    /// Roots of `f^n(x) - x - k` on `[lo, hi]` by a bisection sweep.
    fn bisection_roots(n: usize, k: f64, lo: f64, hi: f64) -> Vec<f64> {
        let g = |x: f64| lift(x, n).0 - x - k;
        let cells = 4000;
        let mut roots = Vec::new();
        let h = (hi - lo) / cells as f64;
        for i in 0..cells {
            let (mut a, mut b) = (lo + h * i as f64, lo + h * (i + 1) as f64);
            let (ga, gb) = (g(a), g(b));
            if ga == 0.0 {
                roots.push(a);
                continue;
            }
            if ga * gb < 0.0 {
                for _ in 0..200 {
                    let c = 0.5 * (a + b);
                    if g(a) * g(c) <= 0.0 {
                        b = c;
                    } else {
                        a = c;
                    }
                }
                roots.push(0.5 * (a + b));
            }
        }
        roots
    }

    #[test]
    fn suspension_orbits_match_bisection_roots() {
        let s = suspension(0.1);
        for n in 1..=2usize {
            // the element tau^{-n} closes curves with l = n
            let x = GroupElt::Lattice(vec![0, -(n as i64)]);
            let w = Window::new(n as f64 - 0.5, n as f64 + 0.5).unwrap();
            // the repelling root at 0.5 has a narrow Newton basin for n = 2
            let spec = SeedSpec {
                per_axis: 16,
                ..SeedSpec::default()
            };
            let found = find_orbits(&s, &x, w, &spec).unwrap();
            let (lo, hi) = (-0.4, 1.4);
            let roots = bisection_roots(n, 0.0, lo, hi);
            // curves outside the window support may also be found; they carry no weight
            let mut xs: Vec<f64> = found.iter().map(|o| o.m0[0]).filter(|x| (lo..=hi).contains(x)).collect();
            xs.sort_by(f64::total_cmp);
            assert_eq!(xs.len(), roots.len(), "{xs:?} vs {roots:?}");
            for (a, b) in xs.iter().zip(&roots) {
                assert!((a - b).abs() < 1e-9, "{xs:?} vs {roots:?}");
            }
            for o in &found {
                assert_eq!(o.kind, OrbitKind::ProperLine);
                assert!(o.residual <= RESIDUAL_TOL);
                let p = poincare(&s, o, DEFAULT_DEGENERACY).unwrap();
                let (_, d) = lift(o.m0[0], n);
                assert!((p.det_one_minus_p - (1.0 - d)).abs() < 1e-8);
                for k in 0..5 {
                    let shifted = time_shift(&s, o, -0.4 + 0.2 * k as f64).unwrap();
                    let q = poincare(&s, &shifted, DEFAULT_DEGENERACY).unwrap();
                    assert!((q.det_one_minus_p - p.det_one_minus_p).abs() <= 1e-9);
                }
            }
        }
    }

    #[test]
    fn newton_fixed_point_and_quadratic_convergence() {
        let s = suspension(0.1);
        let x = GroupElt::Lattice(vec![0, -1]);
        let target = Target { x, deck: None };
        let exact = DVector::from_vec(vec![0.5, 0.2]);
        let o = refine(&s, (&exact, 1.0), &target).unwrap();
        assert!((&o.m0 - &exact).norm() < 1e-12 && (o.l - 1.0).abs() < 1e-12);
        let near = DVector::from_vec(vec![0.501, 0.2]);
        let o = refine(&s, (&near, 1.001), &target).unwrap();
        assert!((o.m0[0] - 0.5).abs() < 1e-10);
        let far = DVector::from_vec(vec![0.25, 0.2]);
        assert!(matches!(
            refine(&s, (&far, 1.0), &Target { x: GroupElt::Lattice(vec![3, -1]), deck: None }),
            Err(Error::NoConvergence { .. }) | Err(Error::SingularJacobian { .. })
        ));
    }

    #[test]
    fn degenerate_suspension_has_zero_determinant() {
        let s = suspension(0.0);
        let target = Target {
            x: GroupElt::Lattice(vec![0, -1]),
            deck: None,
        };
        let o = refine(&s, (&DVector::from_vec(vec![0.3, 0.1]), 1.05), &target).unwrap();
        let p = poincare(&s, &o, DEFAULT_DEGENERACY).unwrap();
        assert!(!p.nondegenerate);
    }

    #[test]
    fn catmap_quotient_orbits() {
        let cat = MapSpec::Affine {
            linear: DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 1.0]),
            offset: DVector::zeros(2),
        };
        let q = QuotientDeck::new(3, cat).unwrap();
        let s = system(&["a", "b", "s"], &["0", "0", "1"], GroupModel::trivial(3), vec![0.0; 3], vec![1.0; 3], Some(q));
        let found = find_orbits(&s, &GroupElt::Identity, Window::new(0.5, 3.5).unwrap(), &SeedSpec::default()).unwrap();
        let count = |l: f64| found.iter().filter(|o| (o.l - l).abs() < 1e-9).count();
        // one fixed point, two period-2 curves plus the fixed one, five period-3 plus the fixed one
        assert_eq!((count(1.0), count(2.0), count(3.0)), (1, 3, 6));
        for o in &found {
            let p = poincare(&s, o, DEFAULT_DEGENERACY).unwrap();
            let expect = [1.0, 5.0, 16.0][o.l.round() as usize - 1];
            assert!((p.det_one_minus_p.abs() - expect).abs() < 1e-8);
        }
        let t_sharp: f64 = found
            .iter()
            .filter(|o| (o.l - 3.0).abs() < 1e-9)
            .map(|o| o.kind.t_sharp().unwrap())
            .sum();
        assert!((t_sharp - 16.0).abs() < 1e-9);
    }

    #[test]
    fn conjugation_by_identity_is_noop() {
        let s = suspension(0.1);
        let x = GroupElt::Lattice(vec![0, -1]);
        let found = find_orbits(&s, &x, Window::new(0.5, 1.5).unwrap(), &SeedSpec::default()).unwrap();
        let same = conjugate_orbits(&s, &s.group.identity(), &found).unwrap();
        assert_eq!(same, found);
        let moved = conjugate_orbits(&s, &GroupElt::Lattice(vec![1, 0]), &found).unwrap();
        for (a, b) in moved.iter().zip(&found) {
            assert_eq!(a.target.x, b.target.x);
            assert!((a.m0[0] - b.m0[0] - 1.0).abs() < 1e-12 && a.residual <= RESIDUAL_TOL);
        }
    }
}
