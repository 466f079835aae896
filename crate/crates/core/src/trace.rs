//! Assembly of the trace distribution as a weighted Dirac comb on the
//! nonzero reals, and its pairing with test functions.

use std::fmt;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::flow::CoverSystem;
use crate::geometry::{bump_profile, GroupElt, GroupKind};
use crate::orbits::{self, DelocalizedOrbit, OrbitKind, SeedSpec, Window};
use crate::quad::Sum;

/// Contributions closer than this in `l` share one atom.
pub const MERGE_TOL: f64 = 1e-7;
pub const T_INDEPENDENCE_TOL: f64 = 1e-7;
/// Share of the total carried by the outermost shell that triggers a warning.
pub const SHELL_WARNING: f64 = 1e-10;
/// Gaussians count as compactly supported within this many widths.
const GAUSSIAN_REACH: f64 = 6.0;

// ---------------------------------------------------------------------------
// test functions

#[derive(Clone, Debug, PartialEq)]
pub enum TestFunction {
    /// `exp(-(t - c)^2 / (2 w^2))`
    Gaussian { center: f64, width: f64 },
    /// `exp(-1 / (1 - ((t - c) / r)^2))`
    Bump { center: f64, radius: f64 },
    /// `p(t - c)` times the bump, coefficients in increasing degree.
    PolyBump { center: f64, radius: f64, coeffs: Vec<f64> },
}

impl TestFunction {
    pub fn gaussian(center: f64, width: f64) -> Result<TestFunction> {
        let f = TestFunction::Gaussian { center, width };
        f.validate()?;
        Ok(f)
    }

    pub fn bump(center: f64, radius: f64) -> Result<TestFunction> {
        let f = TestFunction::Bump { center, radius };
        f.validate()?;
        Ok(f)
    }

    /// `gaussian(c, w)`, `bump(c, r)` or `polybump(c, r, a0, a1, ...)`.
    pub fn parse(spec: &str) -> Result<TestFunction> {
        let bad = |why: String| Error::Validation {
            key: "psi".into(),
            reason: format!("`{spec}`: {why}"),
        };
        let s = spec.trim();
        let open = s.find('(').ok_or_else(|| bad("expected family(args)".into()))?;
        if !s.ends_with(')') {
            return Err(bad("missing `)`".into()));
        }
        let family = s[..open].trim();
        let args: Vec<f64> = s[open + 1..s.len() - 1]
            .split(',')
            .map(|a| a.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| bad(format!("bad number: {e}")))?;
        let f = match (family, args.len()) {
            ("gaussian", 2) => TestFunction::Gaussian {
                center: args[0],
                width: args[1],
            },
            ("bump", 2) => TestFunction::Bump {
                center: args[0],
                radius: args[1],
            },
            ("polybump", n) if n >= 3 => TestFunction::PolyBump {
                center: args[0],
                radius: args[1],
                coeffs: args[2..].to_vec(),
            },
            _ => return Err(bad("unknown family or wrong argument count".into())),
        };
        f.validate()?;
        Ok(f)
    }

    fn validate(&self) -> Result<()> {
        let bad = |why: &str| Error::Validation {
            key: "psi".into(),
            reason: format!("`{self}`: {why}"),
        };
        let finite = match self {
            TestFunction::Gaussian { center, width } => center.is_finite() && width.is_finite(),
            TestFunction::Bump { center, radius } => center.is_finite() && radius.is_finite(),
            TestFunction::PolyBump { center, radius, coeffs } => {
                center.is_finite() && radius.is_finite() && coeffs.iter().all(|c| c.is_finite())
            }
        };
        if !finite {
            return Err(bad("parameters must be finite"));
        }
        match self {
            TestFunction::Gaussian { center, width } => {
                if *width <= 0.0 {
                    return Err(bad("width must be positive"));
                }
                if center.abs() < 6.0 * width {
                    return Err(bad("gaussians need |center| >= 6 width"));
                }
            }
            TestFunction::Bump { radius, .. } | TestFunction::PolyBump { radius, .. } => {
                if *radius <= 0.0 {
                    return Err(bad("radius must be positive"));
                }
            }
        }
        let (lo, hi) = self.support();
        if lo < 0.0 && hi > 0.0 {
            return Err(bad("periods must avoid 0"));
        }
        Ok(())
    }

    pub fn eval(&self, t: f64) -> f64 {
        match self {
            TestFunction::Gaussian { center, width } => {
                let z = (t - center) / width;
                (-0.5 * z * z).exp()
            }
            TestFunction::Bump { center, radius } => {
                let q = (t - center) / radius;
                bump_profile(q * q)
            }
            TestFunction::PolyBump { center, radius, coeffs } => {
                let q = (t - center) / radius;
                let b = bump_profile(q * q);
                if b == 0.0 {
                    return 0.0;
                }
                let d = t - center;
                coeffs.iter().rev().fold(0.0, |acc, c| acc * d + c) * b
            }
        }
    }

    /// Interval outside which the function vanishes (to round-off for gaussians).
    pub fn support(&self) -> (f64, f64) {
        match self {
            TestFunction::Gaussian { center, width } => {
                (center - GAUSSIAN_REACH * width, center + GAUSSIAN_REACH * width)
            }
            TestFunction::Bump { center, radius } | TestFunction::PolyBump { center, radius, .. } => {
                (center - radius, center + radius)
            }
        }
    }

    pub fn center(&self) -> f64 {
        match self {
            TestFunction::Gaussian { center, .. }
            | TestFunction::Bump { center, .. }
            | TestFunction::PolyBump { center, .. } => *center,
        }
    }

    /// Same shape moved to a new center.
    pub fn recentered(&self, c: f64) -> TestFunction {
        let mut f = self.clone();
        match &mut f {
            TestFunction::Gaussian { center, .. }
            | TestFunction::Bump { center, .. }
            | TestFunction::PolyBump { center, .. } => *center = c,
        }
        f
    }

    pub fn max_abs(&self) -> f64 {
        let (lo, hi) = self.support();
        let n = 2000;
        (0..=n)
            .map(|k| self.eval(lo + (hi - lo) * k as f64 / n as f64).abs())
            .fold(0.0, f64::max)
    }
}

impl fmt::Display for TestFunction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TestFunction::Gaussian { center, width } => write!(f, "gaussian({center}, {width})"),
            TestFunction::Bump { center, radius } => write!(f, "bump({center}, {radius})"),
            TestFunction::PolyBump { center, radius, coeffs } => {
                write!(f, "polybump({center}, {radius}")?;
                for c in coeffs {
                    write!(f, ", {c}")?;
                }
                write!(f, ")")
            }
        }
    }
}

// ---------------------------------------------------------------------------
// fibre traces

/// `tr(A rho(x) Phi_{-l})` on the fibre over `p`, where `p` lies on the curve.
fn fiber_trace_at(sys: &CoverSystem, orbit: &DelocalizedOrbit, p: &crate::geometry::Point) -> Result<f64> {
    let transport = sys.fiber_transport(p, orbit.l)?;
    let back = transport.try_inverse().ok_or_else(|| Error::SingularJacobian {
        point: p.as_slice().to_vec(),
    })?;
    // E_p -> E_{x p} -> E_p, the deck part acts trivially on fibres
    let m = sys.endomorphism(p) * back * sys.fiber_action(&orbit.target.x, p);
    Ok(m.trace())
}

/// Fibre trace of the lifted flow along the curve, checked for independence
/// of the base point at three further points of the curve.
pub fn fiber_trace(sys: &CoverSystem, orbit: &DelocalizedOrbit, seed: u64) -> Result<f64> {
    if sys.bundle.is_trivial() {
        return Ok(1.0);
    }
    let v0 = fiber_trace_at(sys, orbit, &orbit.m0)?;
    let span = orbit.kind.t_sharp().unwrap_or(orbit.l.abs()).min(sys.field.t_max - orbit.l.abs());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..3 {
        let t = rng.gen_range(-span..span);
        let p = sys.flow(&orbit.m0, t)?;
        let v = fiber_trace_at(sys, orbit, &p)?;
        worst = worst.max((v - v0).abs() / v0.abs().max(1.0));
    }
    if worst > T_INDEPENDENCE_TOL {
        return Err(Error::TIndependenceViolation { deviation: worst });
    }
    Ok(v0)
}

/// Dense reference for a constant generator `B`: `tr(A rho e^{-l B})`.
pub fn constant_transport_trace(a: &DMatrix<f64>, rho: &DMatrix<f64>, b: &DMatrix<f64>, l: f64) -> f64 {
    (a * rho * (b * -l).exp()).trace()
}

// ---------------------------------------------------------------------------
// the comb

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Contributor {
    /// Coset representative `h`.
    pub rep: String,
    /// Index into the assembly's orbit records.
    pub orbit: usize,
    pub weight: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Atom {
    pub l: f64,
    pub weight: f64,
    pub contributors: Vec<Contributor>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DeltaComb {
    pub window: Window,
    pub atoms: Vec<Atom>,
}

impl DeltaComb {
    pub fn total_variation(&self) -> f64 {
        self.atoms.iter().map(|a| a.weight.abs()).sum()
    }

    /// Merge `(l, weight, contributor)` entries into sorted atoms.
    fn merge(window: Window, mut parts: Vec<(f64, Contributor)>) -> DeltaComb {
        parts.sort_by(|a, b| {
            a.0.total_cmp(&b.0)
                .then_with(|| a.1.rep.cmp(&b.1.rep))
                .then_with(|| a.1.orbit.cmp(&b.1.orbit))
        });
        let mut atoms: Vec<Atom> = Vec::new();
        let mut sums: Vec<(Sum, Sum)> = Vec::new();
        let mut last_l = f64::NAN;
        for (l, c) in parts {
            if atoms.is_empty() || (l - last_l).abs() > MERGE_TOL {
                atoms.push(Atom {
                    l,
                    weight: 0.0,
                    contributors: vec![],
                });
                sums.push((Sum::default(), Sum::default()));
            }
            let k = atoms.len() - 1;
            sums[k].0.add(c.weight);
            sums[k].1.add(l);
            atoms[k].contributors.push(c);
            last_l = l;
        }
        for (a, (w, ls)) in atoms.iter_mut().zip(sums) {
            a.weight = w.value();
            a.l = ls.value() / a.contributors.len() as f64;
        }
        DeltaComb { window, atoms }
    }
}

/// `sum weight psi(l)` in sorted order.
pub fn pair(comb: &DeltaComb, psi: &TestFunction) -> f64 {
    if truncates(comb, psi) {
        log::warn!("test function {psi} reaches outside the period window ({}, {})", comb.window.lo, comb.window.hi);
    }
    pair_with(comb, |t| psi.eval(t))
}

pub fn pair_with<F: Fn(f64) -> f64>(comb: &DeltaComb, f: F) -> f64 {
    let mut s = Sum::default();
    for a in &comb.atoms {
        s.add(a.weight * f(a.l));
    }
    s.value()
}

/// The test function sees periods the comb was not assembled for.
pub fn truncates(comb: &DeltaComb, psi: &TestFunction) -> bool {
    let (lo, hi) = psi.support();
    lo < comb.window.lo || hi > comb.window.hi
}

// ---------------------------------------------------------------------------
// assembly

#[derive(Clone, Debug, Serialize)]
pub struct OrbitRecord {
    pub id: usize,
    pub rep: String,
    pub target: String,
    pub l: f64,
    pub m0: Vec<f64>,
    #[serde(flatten)]
    pub kind: OrbitKind,
    pub t_gamma: f64,
    pub det_one_minus_p: f64,
    pub fiber_trace: f64,
    pub weight: f64,
    pub residual: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct Shell {
    pub radius: usize,
    pub partial_sum: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct Assembly {
    pub comb: DeltaComb,
    pub orbits: Vec<OrbitRecord>,
    pub shells: Vec<Shell>,
    /// The coset enumeration covered every class.
    pub complete: bool,
    pub truncation_warning: bool,
}

#[derive(Clone, Debug)]
pub struct AssembleSpec {
    pub radius: usize,
    pub window: Window,
    pub seeds: SeedSpec,
    pub degeneracy: f64,
    pub seed: u64,
}

/// Orbit data for one `(h, curve)` pair; everything the comb needs.
fn evaluate_orbit(sys: &CoverSystem, orbit: &DelocalizedOrbit, spec: &AssembleSpec, salt: u64) -> Result<(f64, f64, f64)> {
    let p = orbits::poincare(sys, orbit, spec.degeneracy)?;
    if !p.nondegenerate {
        return Err(Error::DegenerateOrbit {
            l: orbit.l,
            det: p.det_one_minus_p,
            point: orbit.m0.as_slice().to_vec(),
        });
    }
    let t_gamma = orbits::primitive_period(sys, orbit, &sys.cutoff)?;
    let fib = fiber_trace(sys, orbit, spec.seed ^ salt)?;
    Ok((t_gamma, p.det_one_minus_p, fib))
}

/// Comb for `g` from curves of `h g h^{-1}` over the coset representatives.
pub fn assemble(sys: &CoverSystem, g: &GroupElt, spec: &AssembleSpec) -> Result<Assembly> {
    let base = orbits::find_orbits(sys, g, spec.window, &spec.seeds)?;
    assemble_from(sys, g, &base, spec)
}

/// As `assemble`, with the curves for `g` already found.
pub fn assemble_from(sys: &CoverSystem, g: &GroupElt, base: &[DelocalizedOrbit], spec: &AssembleSpec) -> Result<Assembly> {
    let reps = sys.group.coset_representatives(g, spec.radius);
    let complete = matches!(sys.group.kind, GroupKind::Finite { .. }) || sys.group.is_abelian();
    let mut jobs: Vec<(GroupElt, DelocalizedOrbit)> = Vec::new();
    for h in &reps {
        for o in orbits::conjugate_orbits(sys, h, base)? {
            jobs.push((h.clone(), o));
        }
    }
    let evaluated: Vec<Result<(f64, f64, f64)>> = jobs
        .par_iter()
        .enumerate()
        .map(|(i, (_, o))| evaluate_orbit(sys, o, spec, i as u64))
        .collect();
    let mut records = Vec::with_capacity(jobs.len());
    let mut parts = Vec::new();
    let mut by_shell: Vec<Sum> = Vec::new();
    for (id, ((h, o), r)) in jobs.into_iter().zip(evaluated).enumerate() {
        let (t_gamma, det, fib) = r?;
        let weight = fib * t_gamma / det.abs();
        let rep = h.payload();
        if weight != 0.0 {
            parts.push((
                o.l,
                Contributor {
                    rep: rep.clone(),
                    orbit: id,
                    weight,
                },
            ));
        }
        let shell = sys.group.word_length(&h);
        if by_shell.len() <= shell {
            by_shell.resize(shell + 1, Sum::default());
        }
        by_shell[shell].add(weight.abs());
        records.push(OrbitRecord {
            id,
            rep,
            target: o.target.payload(),
            l: o.l,
            m0: o.m0.as_slice().to_vec(),
            kind: o.kind,
            t_gamma,
            det_one_minus_p: det,
            fiber_trace: fib,
            weight,
            residual: o.residual,
        });
    }
    let mut running = Sum::default();
    let shells: Vec<Shell> = by_shell
        .iter()
        .enumerate()
        .map(|(radius, s)| {
            running.add(s.value());
            Shell {
                radius,
                partial_sum: running.value(),
            }
        })
        .collect();
    let total = running.value();
    let last = by_shell.last().map(|s| s.value()).unwrap_or(0.0);
    let truncation_warning = !complete && shells.len() > 1 && last > SHELL_WARNING * total;
    if truncation_warning {
        log::warn!("outermost coset shell carries {last:e} of {total:e}; the G/Z sum may be truncated");
    }
    Ok(Assembly {
        comb: DeltaComb::merge(spec.window, parts),
        orbits: records,
        shells,
        complete,
        truncation_warning,
    })
}
