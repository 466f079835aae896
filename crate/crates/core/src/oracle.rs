//! Independent checks of the assembled comb: gaussian-mollified quadrature of
//! the kernel on the diagonal, the covering decomposition over a deck group,
//! and exact enumeration for the cat map.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::flow::CoverSystem;
use crate::geometry::{GroupElt, Point, SampleBox};
use crate::orbits::Target;
use crate::quad::Sum;
use crate::trace::{self, AssembleSpec, TestFunction};

// ---------------------------------------------------------------------------
// mollified quadrature

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MollifierSpec {
    /// Strictly decreasing widths.
    pub ladder: Vec<f64>,
    /// Grid nodes per `eps` along every axis (spacing `eps / points_per_eps`).
    pub points_per_eps: usize,
    /// Largest total number of `(m, t)` nodes over the ladder.
    pub budget: u128,
}

impl Default for MollifierSpec {
    fn default() -> Self {
        MollifierSpec {
            ladder: vec![0.08, 0.04, 0.02],
            points_per_eps: 4,
            budget: 4_000_000_000,
        }
    }
}

impl MollifierSpec {
    pub fn validate(&self) -> Result<()> {
        if self.ladder.is_empty() || self.ladder.iter().any(|e| !(*e > 0.0)) {
            return Err(Error::Validation {
                key: "eps_ladder".into(),
                reason: "widths must be positive".into(),
            });
        }
        if self.ladder.windows(2).any(|w| w[1] >= w[0]) {
            return Err(Error::Validation {
                key: "eps_ladder".into(),
                reason: "widths must be strictly decreasing".into(),
            });
        }
        if self.points_per_eps < 4 {
            return Err(Error::Validation {
                key: "points_per_eps".into(),
                reason: "the grid must resolve the mollifier (at least 4 nodes per width)".into(),
            });
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Rung {
    pub eps: f64,
    pub value: f64,
    pub nodes: u128,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MollifiedReport {
    pub ladder: Vec<Rung>,
    /// Empirical order of the leading error term.
    pub order: f64,
    pub extrapolate: f64,
}

/// Gaussian tails beyond this many widths are dropped.
const TAIL: f64 = 9.0;
/// Fine time nodes per distance probe.
const BLOCK: usize = 8;

/// Midpoint grid along one axis.
#[derive(Clone, Copy, Debug)]
struct Axis {
    lo: f64,
    h: f64,
    n: usize,
}

impl Axis {
    fn new(lo: f64, hi: f64, spacing: f64) -> Axis {
        let n = ((hi - lo) / spacing).ceil().max(1.0) as usize;
        Axis {
            lo,
            h: (hi - lo) / n as f64,
            n,
        }
    }

    #[inline]
    fn node(&self, i: usize) -> f64 {
        self.lo + (i as f64 + 0.5) * self.h
    }
}

/// Region of `m` integration: the fundamental domain on a quotient chart,
/// otherwise the support of the cutoff.
fn domain(sys: &CoverSystem) -> Result<SampleBox> {
    if sys.chart.quotient.is_some() {
        return Ok(sys.chart.sample_box.clone());
    }
    sys.cutoff.support_box().ok_or_else(|| {
        Error::Model("the mollified oracle needs a compactly supported cutoff or a quotient chart".into())
    })
}

/// Deck images of `m` by powers of the suspension generator, computed on
/// first use and indexed by turns in `[j0, j0 + len)`.
struct Images {
    point: Point,
    j0: i64,
    fibre: Vec<Option<Vec<f64>>>,
}

/// Fixed per-run data shared by all nodes.
struct Plan<'a> {
    sys: &'a CoverSystem,
    targets: Vec<Target>,
    psi: &'a TestFunction,
    axes: Vec<Axis>,
    time: Axis,
    speed: f64,
}

impl Plan<'_> {
    fn images(&self, m: &[f64]) -> Option<Images> {
        self.sys.chart.quotient.as_ref()?;
        // turns j with m_s - j near phi_t(m)_s = m_s + O(speed t)
        let reach = self.speed * self.time.lo.abs().max((self.time.lo + self.time.h * self.time.n as f64).abs());
        let j0 = (-reach).floor() as i64 - 1;
        let j1 = reach.ceil() as i64 + 1;
        Some(Images {
            point: DVector::from_column_slice(m),
            j0,
            fibre: vec![None; (j1 - j0 + 1) as usize],
        })
    }

    /// Squared distance from `p` to the nearest image of `m`.
    #[inline]
    fn dist2(&self, m: &[f64], images: &mut Option<Images>, p: &[f64]) -> f64 {
        match images {
            None => m.iter().zip(p).map(|(a, b)| (a - b) * (a - b)).sum(),
            Some(im) => {
                let k = m.len() - 1;
                let j = (m[k] - p[k]).round() as i64;
                let ds = p[k] - (m[k] - j as f64);
                let idx = j - im.j0;
                if idx < 0 || idx as usize >= im.fibre.len() {
                    return f64::INFINITY;
                }
                let slot = &mut im.fibre[idx as usize];
                if slot.is_none() {
                    let q = self.sys.chart.quotient.as_ref().expect("quotient chart");
                    let d = crate::geometry::DeckElt {
                        shift: vec![0; k],
                        turns: j,
                    };
                    *slot = Some(q.act(&d, &im.point).as_slice()[..k].to_vec());
                }
                let fv = slot.as_ref().expect("filled");
                let mut acc = ds * ds;
                for i in 0..k {
                    let d = p[i] - fv[i];
                    let d = d - d.round();
                    acc += d * d;
                }
                acc
            }
        }
    }

    /// `int psi(t) tr(...) g_eps(phi_t(y) - m) dt` at one spatial node, with
    /// `y = target^{-1} m`, summed over the closing elements.
    fn node_value(&self, m: &[f64], eps: f64, buf: &mut [f64]) -> Result<f64> {
        let sys = self.sys;
        let n = sys.dim();
        let point = DVector::from_column_slice(m);
        let chi = sys.cutoff.eval(&point);
        if chi == 0.0 {
            return Ok(0.0);
        }
        let mut images = self.images(m);
        let norm = (2.0 * std::f64::consts::PI * eps * eps).powf(-0.5 * n as f64);
        let cut2 = (TAIL * eps) * (TAIL * eps);
        let t_far = if self.time.lo > 0.0 {
            self.time.lo + self.time.h * self.time.n as f64
        } else {
            self.time.lo
        };
        let bundle = !sys.bundle.is_trivial();
        let mut total = Sum::default();
        for target in &self.targets {
            let y = target.inverse(sys).apply(sys, &point);
            let (tr, static_part) = if bundle {
                let tr = sys.transport_trajectory(&y, t_far)?;
                let a = sys.endomorphism(&point) * sys.fiber_action(&target.x, &y);
                (tr, Some(a))
            } else {
                (sys.trajectory(&y, t_far)?, None)
            };
            let probe = 0.5 * BLOCK as f64 * self.time.h * self.speed;
            let mut b = 0;
            while b < self.time.n {
                let end = (b + BLOCK).min(self.time.n);
                let mid = self.time.lo + 0.5 * (b + end) as f64 * self.time.h;
                tr.eval_into(mid, buf);
                let d = self.dist2(m, &mut images, &buf[..n]).sqrt();
                if d - probe > TAIL * eps {
                    b = end;
                    continue;
                }
                for i in b..end {
                    let t = self.time.node(i);
                    let w = self.psi.eval(t);
                    if w == 0.0 {
                        continue;
                    }
                    tr.eval_into(t, buf);
                    let r2 = self.dist2(m, &mut images, &buf[..n]);
                    if r2 > cut2 {
                        continue;
                    }
                    let fibre = match &static_part {
                        None => 1.0,
                        Some(a) => {
                            let r = sys.rank();
                            let f = DMatrix::from_row_slice(r, r, &buf[n..n + r * r]);
                            let back = f.try_inverse().ok_or_else(|| Error::SingularJacobian {
                                point: m.to_vec(),
                            })?;
                            (a * back).trace()
                        }
                    };
                    total.add(w * fibre * norm * (-0.5 * r2 / (eps * eps)).exp());
                }
                b = end;
            }
        }
        Ok(chi * total.value())
    }
}

/// Mollified-kernel approximation of the pairing at each width of the ladder,
/// with a Richardson extrapolate.
pub fn mollified_trace(sys: &CoverSystem, g: &GroupElt, psi: &TestFunction, spec: &MollifierSpec) -> Result<MollifiedReport> {
    spec.validate()?;
    let region = domain(sys)?;
    let (t_lo, t_hi) = psi.support();
    if t_lo.abs() > sys.field.t_max || t_hi.abs() > sys.field.t_max {
        return Err(Error::Validation {
            key: "psi".into(),
            reason: format!("support of {psi} exceeds the time horizon"),
        });
    }
    let n = sys.dim();
    // closing elements h g h^{-1} over coset representatives
    let targets: Vec<Target> = sys
        .group
        .coset_representatives(g, 0)
        .iter()
        .map(|h| Target {
            x: sys.group.conjugate(h, g),
            deck: None,
        })
        .collect();
    let speed = 1.5 * sys.max_speed(16) + 1e-12;
    let mut nodes_total: u128 = 0;
    let mut plans = Vec::new();
    for &eps in &spec.ladder {
        let spacing = eps / spec.points_per_eps as f64;
        let axes: Vec<Axis> = (0..n).map(|i| Axis::new(region.lo[i], region.hi[i], spacing)).collect();
        let time = Axis::new(t_lo, t_hi, spacing);
        let nodes = axes.iter().map(|a| a.n as u128).product::<u128>() * time.n as u128 * targets.len() as u128;
        nodes_total += nodes;
        plans.push((eps, axes, time, nodes));
    }
    if nodes_total > spec.budget {
        return Err(Error::QuadratureBudgetExceeded {
            nodes: nodes_total,
            budget: spec.budget,
        });
    }
    let mut ladder = Vec::new();
    for (eps, axes, time, nodes) in plans {
        let plan = Plan {
            sys,
            targets: targets.clone(),
            psi,
            axes,
            time,
            speed,
        };
        let value = integrate_grid(&plan, eps)?;
        log::info!("mollified eps = {eps}: {value:.12e} over {nodes} nodes");
        ladder.push(Rung { eps, value, nodes });
    }
    let (order, extrapolate) = richardson(&ladder)?;
    Ok(MollifiedReport {
        ladder,
        order,
        extrapolate,
    })
}

/// Midpoint rule over the spatial grid; slices along the first axis are
/// reduced in index order so the result does not depend on scheduling.
fn integrate_grid(plan: &Plan, eps: f64) -> Result<f64> {
    let n = plan.axes.len();
    let first = plan.axes[0];
    let rest: Vec<Axis> = plan.axes[1..].to_vec();
    let inner: usize = rest.iter().map(|a| a.n).product();
    let width = plan.sys.dim() + plan.sys.rank() * plan.sys.rank();
    let slices: Vec<Result<f64>> = (0..first.n)
        .into_par_iter()
        .map(|i0| {
            let mut m = vec![0.0; n];
            let mut buf = vec![0.0; width];
            let mut idx = vec![0usize; n - 1];
            let mut s = Sum::default();
            m[0] = first.node(i0);
            for _ in 0..inner {
                for (k, a) in rest.iter().enumerate() {
                    m[k + 1] = a.node(idx[k]);
                }
                s.add(plan.node_value(&m, eps, &mut buf)?);
                // odometer over the remaining axes
                for k in (0..n - 1).rev() {
                    idx[k] += 1;
                    if idx[k] < rest[k].n {
                        break;
                    }
                    idx[k] = 0;
                }
            }
            Ok(s.value())
        })
        .collect();
    let mut total = Sum::default();
    for s in slices {
        total.add(s?);
    }
    let cell: f64 = plan.axes.iter().map(|a| a.h).product::<f64>() * plan.time.h;
    Ok(total.value() * cell)
}

/// Extrapolate to zero width with a Romberg table in powers of `eps^2` (the
/// gaussian is even, so odd powers cancel). The empirical order of the
/// leading term is returned alongside for the report; a ladder whose steps
/// grow is rejected.
pub fn richardson(ladder: &[Rung]) -> Result<(f64, f64)> {
    let k = ladder.len();
    let mut order = f64::NAN;
    if k >= 3 {
        let (z, a, b) = (&ladder[k - 3], &ladder[k - 2], &ladder[k - 1]);
        let d1 = a.value - z.value;
        let d2 = b.value - a.value;
        let floor = 1e-12 * b.value.abs().max(1.0);
        if d2.abs() > d1.abs() && d2.abs() > floor {
            return Err(Error::NonConvergentLadder {
                values: ladder.iter().map(|r| r.value).collect(),
            });
        }
        if d1.abs() > floor && d2.abs() > floor && d1 * d2 > 0.0 {
            order = (d1 / d2).ln() / (z.eps / a.eps).ln();
        }
    }
    let mut table: Vec<f64> = ladder.iter().map(|r| r.value).collect();
    for j in 1..k {
        for i in (j..k).rev() {
            let ratio = (ladder[i - j].eps / ladder[i].eps).powi(2);
            table[i] += (table[i] - table[i - 1]) / (ratio - 1.0);
        }
    }
    Ok((order, table[k - 1]))
}

// ---------------------------------------------------------------------------
// cat map

const CAT: [[i64; 2]; 2] = [[2, 1], [1, 1]];

fn mat_mul(a: [[i64; 2]; 2], b: [[i64; 2]; 2]) -> [[i64; 2]; 2] {
    let mut c = [[0; 2]; 2];
    for i in 0..2 {
        for j in 0..2 {
            c[i][j] = a[i][0] * b[0][j] + a[i][1] * b[1][j];
        }
    }
    c
}

fn cat_power(n: u32) -> [[i64; 2]; 2] {
    let mut p = [[1, 0], [0, 1]];
    for _ in 0..n {
        p = mat_mul(CAT, p);
    }
    p
}

/// `|det(I - A^n)|` for the cat matrix.
pub fn cat_det(n: u32) -> i64 {
    let p = cat_power(n);
    ((1 - p[0][0]) * (1 - p[1][1]) - p[0][1] * p[1][0]).abs()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CatOrbit {
    /// Primitive period.
    pub period: u32,
    /// `|det(I - A^period)|`.
    pub det: i64,
    /// Points as numerators over the common denominator.
    pub points: Vec<[i64; 2]>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CatReport {
    pub n: u32,
    /// `|det(A^n - I)|`, also the denominator of every fixed point.
    pub det: i64,
    pub fixed_points: usize,
    pub orbits: Vec<CatOrbit>,
    /// Predicted atom weight at `l = n`: sum of primitive periods over `det`.
    pub weight: f64,
}

/// Fixed points of `A^n` on the torus by exact integer arithmetic.
pub fn catmap_fixed_points(n: u32) -> Result<CatReport> {
    if n == 0 || n > 12 {
        return Err(Error::Validation {
            key: "n".into(),
            reason: "cat-map enumeration needs 1 <= n <= 12".into(),
        });
    }
    let p = cat_power(n);
    let m = [[p[0][0] - 1, p[0][1]], [p[1][0], p[1][1] - 1]];
    let det = m[0][0] * m[1][1] - m[0][1] * m[1][0];
    let d = det.abs();
    // v = M^{-1} k with v in [0,1)^2, i.e. adj(M) k / det in [0,1)^2.
    let adj = [[m[1][1], -m[0][1]], [-m[1][0], m[0][0]]];
    let corners = [[0, 0], [m[0][0], m[1][0]], [m[0][1], m[1][1]], [m[0][0] + m[0][1], m[1][0] + m[1][1]]];
    let (k0lo, k0hi) = (corners.iter().map(|c| c[0]).min().unwrap(), corners.iter().map(|c| c[0]).max().unwrap());
    let (k1lo, k1hi) = (corners.iter().map(|c| c[1]).min().unwrap(), corners.iter().map(|c| c[1]).max().unwrap());
    let mut points = Vec::new();
    for k0 in k0lo..=k0hi {
        for k1 in k1lo..=k1hi {
            // numerators over |det|
            let mut num = [adj[0][0] * k0 + adj[0][1] * k1, adj[1][0] * k0 + adj[1][1] * k1];
            if det < 0 {
                num = [-num[0], -num[1]];
            }
            if num.iter().all(|&x| (0..d).contains(&x)) {
                points.push(num);
            }
        }
    }
    points.sort_unstable();
    points.dedup();
    let index: BTreeMap<[i64; 2], usize> = points.iter().enumerate().map(|(i, p)| (*p, i)).collect();
    let step = |q: [i64; 2]| -> [i64; 2] {
        [
            (CAT[0][0] * q[0] + CAT[0][1] * q[1]).rem_euclid(d),
            (CAT[1][0] * q[0] + CAT[1][1] * q[1]).rem_euclid(d),
        ]
    };
    let mut seen = vec![false; points.len()];
    let mut orbits = Vec::new();
    for i in 0..points.len() {
        if seen[i] {
            continue;
        }
        let mut cycle = vec![points[i]];
        seen[i] = true;
        let mut q = step(points[i]);
        while q != points[i] {
            let j = *index.get(&q).ok_or_else(|| Error::Model("cat-map orbit left the fixed-point set".into()))?;
            seen[j] = true;
            cycle.push(q);
            q = step(q);
        }
        let period = cycle.len() as u32;
        orbits.push(CatOrbit {
            period,
            det: cat_det(period),
            points: cycle,
        });
    }
    let periods: i64 = orbits.iter().map(|o| o.period as i64).sum();
    Ok(CatReport {
        n,
        det: d,
        fixed_points: points.len(),
        orbits,
        weight: periods as f64 / d as f64,
    })
}

// ---------------------------------------------------------------------------
// covering decomposition

/// Closed-form flows on compact quotients.
#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(tag = "model", rename_all = "kebab-case")]
pub enum Downstairs {
    /// Unit-speed flow on the circle.
    Circle,
    /// Suspension of the circle map `x + a sin(2 pi x)`.
    CircleMap { amplitude: f64 },
    /// Suspension of the cat map.
    CatMap,
}

/// `(l, weight)` atoms of the classical flat trace on the quotient for the
/// integer periods in `[lo, hi]`.
pub fn downstairs_atoms(model: &Downstairs, lo: f64, hi: f64) -> Result<Vec<(f64, f64)>> {
    let mut atoms = Vec::new();
    for n in (lo.ceil() as i64)..=(hi.floor() as i64) {
        if n == 0 {
            continue;
        }
        let k = n.unsigned_abs() as u32;
        let w = match model {
            Downstairs::Circle => 1.0,
            Downstairs::CatMap => catmap_fixed_points(k)?.weight,
            Downstairs::CircleMap { amplitude } => circle_map_weight(*amplitude, k, n < 0),
        };
        atoms.push((n as f64, w));
    }
    Ok(atoms)
}

/// `f^n` and its derivative for the circle-map lift.
pub fn circle_map_iterate(a: f64, x: f64, n: u32) -> (f64, f64) {
    let tau = 2.0 * std::f64::consts::PI;
    let (mut y, mut d) = (x, 1.0);
    for _ in 0..n {
        d *= 1.0 + a * tau * (tau * y).cos();
        y += a * (tau * y).sin();
    }
    (y, d)
}

/// `sum over Fix(f^n) of 1 / |1 - (f^{+-n})'|` by a bisection sweep of one period.
fn circle_map_weight(a: f64, n: u32, backward: bool) -> f64 {
    // an irrational offset keeps grid nodes off the symmetric roots
    let lo = -(5f64.sqrt() - 2.0);
    let cells = 4000;
    let h = 1.0 / cells as f64;
    let reach = (a.abs() * n as f64).ceil() as i64 + 1;
    let mut s = Sum::default();
    for k in -reach..=reach {
        let g = |x: f64| circle_map_iterate(a, x, n).0 - x - k as f64;
        for i in 0..cells {
            let (mut x0, mut x1) = (lo + h * i as f64, lo + h * (i + 1) as f64);
            let (g0, g1) = (g(x0), g(x1));
            if g0 * g1 > 0.0 || g1 == 0.0 {
                continue;
            }
            for _ in 0..100 {
                let mid = 0.5 * (x0 + x1);
                if g(x0) * g(mid) <= 0.0 {
                    x1 = mid;
                } else {
                    x0 = mid;
                }
            }
            let (_, d) = circle_map_iterate(a, 0.5 * (x0 + x1), n);
            let d = if backward { 1.0 / d } else { d };
            s.add(1.0 / (1.0 - d).abs());
        }
    }
    s.value()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ElementPairing {
    pub element: String,
    pub value: f64,
    pub atoms: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CoveringReport {
    pub model: Downstairs,
    pub radius: usize,
    pub lhs: f64,
    pub rhs: f64,
    pub discrepancy: f64,
    pub terms: Vec<ElementPairing>,
    /// Smallest displacement `|x m - m|` over the cutoff support for the first omitted shell.
    pub omitted_displacement: f64,
    /// Largest displacement the flow can produce within the support of the test function.
    pub reach: f64,
    pub exact: bool,
}

/// Compare the downstairs trace with the sum of upstairs traces over deck
/// elements of word length at most `radius`. The upstairs system's group is
/// the deck group; abelian, so conjugacy classes are elements.
pub fn covering_check(
    sys: &CoverSystem,
    model: &Downstairs,
    psi: &TestFunction,
    radius: usize,
    assemble: &AssembleSpec,
) -> Result<CoveringReport> {
    if !sys.group.is_abelian() || sys.chart.quotient.is_some() {
        return Err(Error::Model("covering check needs an abelian deck group acting on the cover".into()));
    }
    let (lo, hi) = psi.support();
    let lhs_atoms = downstairs_atoms(model, lo, hi)?;
    let mut lhs = Sum::default();
    for (l, w) in &lhs_atoms {
        lhs.add(w * psi.eval(*l));
    }
    let mut terms = Vec::new();
    let mut rhs = Sum::default();
    for x in sys.group.elements_within(radius) {
        let asm = trace::assemble(sys, &x, assemble)?;
        let value = trace::pair(&asm.comb, psi);
        rhs.add(value);
        if !asm.comb.atoms.is_empty() {
            terms.push(ElementPairing {
                element: x.payload(),
                value,
                atoms: asm.comb.atoms.len(),
            });
        }
    }
    let reach = lo.abs().max(hi.abs()) * sys.max_speed(16);
    let omitted_displacement = shell_displacement(sys, radius + 1)?;
    let (lhs, rhs) = (lhs.value(), rhs.value());
    Ok(CoveringReport {
        model: model.clone(),
        radius,
        lhs,
        rhs,
        discrepancy: (lhs - rhs).abs(),
        terms,
        omitted_displacement,
        reach,
        exact: omitted_displacement > reach,
    })
}

/// Lower bound, over the cutoff support, of `|x m - m|` for `x` of word length
/// exactly `k`. Each grid cell gets a per-coordinate margin from the largest
/// sampled row of `D(x m - m)` at its centre and corners, doubled: a global
/// Lipschitz constant is useless here, since inverse circle lifts compose to
/// constants in the thousands along coordinates that do not move at all.
fn shell_displacement(sys: &CoverSystem, k: usize) -> Result<f64> {
    let (center, r) = sys
        .cutoff
        .support_ball()
        .ok_or_else(|| Error::Model("covering check needs a compactly supported cutoff".into()))?;
    let n = sys.dim();
    let per_axis = 24;
    let b = SampleBox::new(center.iter().map(|c| c - r).collect(), center.iter().map(|c| c + r).collect())?;
    let half = r / per_axis as f64;
    let cells: Vec<Point> = b
        .grid(&vec![per_axis; n])
        .into_iter()
        .filter(|m| (m - &center).norm() <= r + 2.0 * half * (n as f64).sqrt())
        .collect();
    let corners: Vec<Point> = (0..1usize << n)
        .map(|bits| Point::from_iterator(n, (0..n).map(|i| if bits >> i & 1 == 1 { half } else { -half })))
        .collect();
    let shell: Vec<GroupElt> = sys
        .group
        .elements_within(k)
        .into_iter()
        .filter(|x| sys.group.word_length(x) == k)
        .collect();
    let bounds: Vec<f64> = shell
        .par_iter()
        .map(|x| {
            let mut best = f64::INFINITY;
            let eye = DMatrix::<f64>::identity(n, n);
            for m in &cells {
                let delta = sys.group.act(x, m) - m;
                let mut slope = vec![0.0f64; n];
                for p in std::iter::once(m.clone()).chain(corners.iter().map(|c| m + c)) {
                    let d = sys.group.act_jacobian(x, &p) - &eye;
                    for (i, s) in slope.iter_mut().enumerate() {
                        *s = s.max(d.row(i).iter().map(|v| v.abs()).sum());
                    }
                }
                let low: f64 = (0..n)
                    .map(|i| (delta[i].abs() - 2.0 * slope[i] * half).max(0.0).powi(2))
                    .sum::<f64>()
                    .sqrt();
                best = best.min(low);
            }
            best
        })
        .collect();
    Ok(bounds.into_iter().fold(f64::INFINITY, f64::min))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::tests::system;
    use crate::geometry::{build_cutoff, GroupModel, MapSpec, QuotientDeck, WindowSpec};
    use crate::orbits::{SeedSpec, Window, DEFAULT_DEGENERACY};

    fn shift(n: usize, axis: usize) -> MapSpec {
        let mut b = DVector::zeros(n);
        b[axis] = 1.0;
        MapSpec::Affine {
            linear: DMatrix::identity(n, n),
            offset: b,
        }
    }

    fn with_window(mut s: CoverSystem, center: Vec<f64>, radius: f64) -> CoverSystem {
        s.cutoff = build_cutoff(&WindowSpec::Bump { center, radius }, &s.group, &s.chart.sample_box, 12).unwrap();
        s
    }

    fn assemble_spec(lo: f64, hi: f64) -> AssembleSpec {
        AssembleSpec {
            radius: 2,
            window: Window::new(lo, hi).unwrap(),
            seeds: SeedSpec {
                per_axis: 16,
                ..SeedSpec::default()
            },
            degeneracy: DEFAULT_DEGENERACY,
            seed: 11,
        }
    }

    #[test]
    fn catmap_enumeration_matches_integer_determinants() {
        assert_eq!(cat_det(1), 1);
        assert_eq!(cat_det(2), 5);
        assert_eq!(cat_det(3), 16);
        for n in 1..=8 {
            let r = catmap_fixed_points(n).unwrap();
            assert_eq!(r.det, cat_det(n));
            assert_eq!(r.fixed_points as i64, r.det);
            let total: i64 = r.orbits.iter().map(|o| o.period as i64).sum();
            assert_eq!(total, r.det);
            assert!(r.orbits.iter().all(|o| n % o.period == 0));
            assert!((r.weight - 1.0).abs() < 1e-15);
        }
        let one = catmap_fixed_points(1).unwrap();
        assert_eq!(one.orbits[0].points, vec![[0, 0]]);
        assert!(catmap_fixed_points(13).is_err());
    }

    #[test]
    fn richardson_recovers_quadratic_limit() {
        let rungs: Vec<Rung> = [0.08, 0.04, 0.02]
            .iter()
            .map(|&e| Rung {
                eps: e,
                value: 0.7 + 0.3 * e * e + 0.1 * e * e * e,
                nodes: 0,
            })
            .collect();
        let (p, x) = richardson(&rungs).unwrap();
        assert!((p - 2.0).abs() < 0.2, "{p}");
        assert!((x - 0.7).abs() < 1e-5);
        let bad: Vec<Rung> = [(0.08, 1.0), (0.04, 1.01), (0.02, 1.2)]
            .iter()
            .map(|&(eps, value)| Rung { eps, value, nodes: 0 })
            .collect();
        assert!(matches!(richardson(&bad), Err(Error::NonConvergentLadder { .. })));
    }

    fn translation() -> CoverSystem {
        let g = GroupModel::translation_line(DVector::from_vec(vec![1.0])).unwrap();
        with_window(system(&["x"], &["1"], g, vec![-2.0], vec![2.0], None), vec![0.0], 0.8)
    }

    #[test]
    fn mollified_translation_matches_smoothed_test_function() {
        let s = translation();
        let a = 0.7;
        let psi = TestFunction::gaussian(a, 0.1).unwrap();
        // widths well below the test function's own width keep the ladder asymptotic
        let spec = MollifierSpec {
            ladder: vec![0.04, 0.02, 0.01],
            ..MollifierSpec::default()
        };
        let r = mollified_trace(&s, &GroupElt::Real(a), &psi, &spec).unwrap();
        for rung in &r.ladder {
            // psi convolved with the unit gaussian of width eps, evaluated at a
            let w2 = 0.01 + rung.eps * rung.eps;
            let want = (0.01 / w2).sqrt();
            assert!((rung.value - want).abs() < 1e-6, "{} vs {want}", rung.value);
        }
        assert!((r.extrapolate - 1.0).abs() < 1e-4, "{}", r.extrapolate);
    }

    #[test]
    fn mollified_value_vanishes_away_from_periods() {
        let s = translation();
        let psi = TestFunction::bump(2.0, 0.5).unwrap();
        let spec = MollifierSpec {
            ladder: vec![0.1, 0.05],
            ..MollifierSpec::default()
        };
        let r = mollified_trace(&s, &GroupElt::Real(0.7), &psi, &spec).unwrap();
        for rung in &r.ladder {
            assert!(rung.value.abs() < (-0.3 / (rung.eps * rung.eps)).exp(), "{rung:?}");
        }
    }

    #[test]
    fn budget_is_enforced() {
        let s = translation();
        let psi = TestFunction::gaussian(0.7, 0.1).unwrap();
        let spec = MollifierSpec {
            budget: 10,
            ..MollifierSpec::default()
        };
        assert!(matches!(
            mollified_trace(&s, &GroupElt::Real(0.7), &psi, &spec),
            Err(Error::QuadratureBudgetExceeded { .. })
        ));
    }

    #[test]
    fn mollified_catmap_first_atom() {
        let a = MapSpec::Affine {
            linear: DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 1.0]),
            offset: DVector::zeros(2),
        };
        let q = QuotientDeck::new(3, a).unwrap();
        let s = system(&["u", "v", "s"], &["0", "0", "1"], GroupModel::trivial(3), vec![0.0; 3], vec![1.0; 3], Some(q));
        let psi = TestFunction::bump(1.0, 0.45).unwrap();
        let spec = MollifierSpec {
            ladder: vec![0.16, 0.08],
            ..MollifierSpec::default()
        };
        let r = mollified_trace(&s, &GroupElt::Identity, &psi, &spec).unwrap();
        let want = psi.eval(1.0);
        assert!((r.extrapolate - want).abs() < 0.02 * want, "{r:?} vs {want}");
    }

    #[test]
    fn circle_covering_is_exact() {
        let g = GroupModel::free_abelian(1, vec![shift(1, 0)]).unwrap();
        let s = with_window(system(&["x"], &["1"], g, vec![0.0], vec![1.0], None), vec![0.5], 0.8);
        let psi = TestFunction::bump(2.0, 1.4).unwrap();
        let r = covering_check(&s, &Downstairs::Circle, &psi, 4, &assemble_spec(0.5, 3.5)).unwrap();
        assert!(r.exact, "{r:?}");
        assert!(r.discrepancy < 1e-10, "{r:?}");
        // only k = 1, 2, 3 carry periods inside the support
        assert_eq!(r.terms.len(), 3);
    }

    #[test]
    fn single_deck_element_for_narrow_support() {
        let g = GroupModel::free_abelian(1, vec![shift(1, 0)]).unwrap();
        let s = with_window(system(&["x"], &["1"], g, vec![0.0], vec![1.0], None), vec![0.5], 0.8);
        let psi = TestFunction::bump(1.0, 0.5).unwrap();
        let r = covering_check(&s, &Downstairs::Circle, &psi, 3, &assemble_spec(0.5, 1.5)).unwrap();
        assert!(r.exact);
        assert_eq!(r.terms.len(), 1);
        assert_eq!(r.terms[0].element, "1");
        assert!(r.discrepancy < 1e-10);
    }

    #[test]
    fn circle_map_weights_match_chain_rule() {
        // fixed points 0 and 1/2 of x + a sin(2 pi x) for small a
        let a = 0.1;
        let t = 2.0 * std::f64::consts::PI * a;
        let want = 1.0 / t + 1.0 / t;
        assert!((circle_map_weight(a, 1, false) - want).abs() < 1e-12);
        let atoms = downstairs_atoms(&Downstairs::Circle, 0.5, 3.5).unwrap();
        assert_eq!(atoms, vec![(1.0, 1.0), (2.0, 1.0), (3.0, 1.0)]);
    }
}
