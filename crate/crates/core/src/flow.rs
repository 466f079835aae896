//! Flows of chart vector fields, their linearisation, and bundle transport.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::expr::{self, Compiled, MatrixExpr};
use crate::geometry::{CoverChart, CutoffFunction, DeckElt, GroupElt, GroupKind, GroupModel, Point};
use crate::ode::{self, Tolerances, Trajectory};

/// Threshold every hypothesis check must meet.
pub const HYPOTHESIS_TOL: f64 = 1e-7;

#[derive(Clone, Debug)]
pub struct FlowField {
    pub dim: usize,
    components: Vec<Compiled>,
    /// Row-major `du_i / dm_j`.
    jacobian: Vec<Compiled>,
    sources: Vec<String>,
    pub tol: Tolerances,
    pub t_max: f64,
}

impl FlowField {
    pub fn parse(sources: &[String], labels: &[String], tol: Tolerances, t_max: f64) -> Result<FlowField> {
        let n = labels.len();
        if sources.len() != n {
            return Err(Error::Model(format!(
                "vector field has {} components, chart has {n} coordinates",
                sources.len()
            )));
        }
        let exprs = sources
            .iter()
            .map(|s| expr::parse(s, labels))
            .collect::<Result<Vec<_>>>()?;
        let mut jacobian = Vec::with_capacity(n * n);
        for e in &exprs {
            for j in 0..n {
                jacobian.push(Compiled::new(&e.derivative(j)));
            }
        }
        Ok(FlowField {
            dim: n,
            components: exprs.iter().map(Compiled::new).collect(),
            jacobian,
            sources: sources.iter().map(|s| s.trim().to_string()).collect(),
            tol,
            t_max,
        })
    }

    pub fn sources(&self) -> &[String] {
        &self.sources
    }

    #[inline]
    pub fn eval_into(&self, m: &[f64], out: &mut [f64]) {
        for (o, c) in out.iter_mut().zip(&self.components) {
            *o = c.eval(m);
        }
    }

    #[inline]
    pub fn jacobian_into(&self, m: &[f64], out: &mut [f64]) {
        for (o, c) in out.iter_mut().zip(&self.jacobian) {
            *o = c.eval(m);
        }
    }

    pub fn at(&self, m: &Point) -> Point {
        let mut out = DVector::zeros(self.dim);
        self.eval_into(m.as_slice(), out.as_mut_slice());
        out
    }

    pub fn jacobian_at(&self, m: &Point) -> DMatrix<f64> {
        let n = self.dim;
        let mut buf = vec![0.0; n * n];
        self.jacobian_into(m.as_slice(), &mut buf);
        DMatrix::from_row_slice(n, n, &buf)
    }
}

/// Fibre-linear lift of the flow to a trivial rank-`r` bundle over the chart.
#[derive(Clone, Debug)]
pub struct BundleCocycle {
    pub rank: usize,
    /// Transport generator `B(m)`: `dF/dt = B(phi_t m) F`.
    pub generator: MatrixExpr,
    /// Endomorphism `A(m)`.
    pub endomorphism: MatrixExpr,
    /// `rho(s, m)` for each group generator `s`.
    pub fiber_actions: Vec<MatrixExpr>,
}

impl BundleCocycle {
    pub fn trivial(generators: usize) -> BundleCocycle {
        BundleCocycle {
            rank: 1,
            generator: MatrixExpr::parse("0", &[]).expect("constant"),
            endomorphism: MatrixExpr::identity(1),
            fiber_actions: vec![MatrixExpr::identity(1); generators],
        }
    }

    pub fn validate(&self, generators: usize) -> Result<()> {
        let r = self.rank;
        let square = |m: &MatrixExpr, what: &str| {
            if m.rows != r || m.cols != r {
                Err(Error::Model(format!("{what} must be {r}x{r}")))
            } else {
                Ok(())
            }
        };
        square(&self.generator, "bundle generator")?;
        square(&self.endomorphism, "bundle endomorphism")?;
        if self.fiber_actions.len() != generators {
            return Err(Error::Model(format!(
                "bundle needs one fibre action per group generator ({generators}), got {}",
                self.fiber_actions.len()
            )));
        }
        for f in &self.fiber_actions {
            square(f, "fibre action")?;
        }
        Ok(())
    }

    /// Rank one, zero generator, identity endomorphism and fibre actions.
    pub fn is_trivial(&self) -> bool {
        self.rank == 1
            && self.generator.is_zero()
            && self.endomorphism.is_identity()
            && self.fiber_actions.iter().all(|f| f.is_identity())
    }

    pub fn transport_is_identity(&self) -> bool {
        self.generator.is_zero()
    }
}

#[derive(Clone, Debug)]
pub struct CoverSystem {
    pub chart: CoverChart,
    pub group: Arc<GroupModel>,
    pub field: FlowField,
    pub bundle: BundleCocycle,
    pub cutoff: CutoffFunction,
}

#[derive(Clone, Debug, Serialize)]
pub struct HypothesisReport {
    pub samples: usize,
    pub min_speed: f64,
    pub flow_equivariance: f64,
    pub bundle_equivariance: f64,
    pub endomorphism_commutation: f64,
}

impl CoverSystem {
    pub fn dim(&self) -> usize {
        self.chart.dim
    }

    pub fn rank(&self) -> usize {
        self.bundle.rank
    }

    fn check_time(&self, t: f64) -> Result<()> {
        if !t.is_finite() || t.abs() > self.field.t_max * (1.0 + 1e-12) {
            return Err(Error::Model(format!(
                "time {t} outside the horizon |t| <= {}",
                self.field.t_max
            )));
        }
        Ok(())
    }

    /// Dense trajectory of `phi_s(m)` for `s` between 0 and `t`.
    pub fn trajectory(&self, m: &Point, t: f64) -> Result<Trajectory> {
        self.check_time(t)?;
        let f = &self.field;
        ode::integrate(|_, y, d| f.eval_into(y, d), 0.0, m.as_slice(), t, f.tol, true)
    }

    pub fn flow(&self, m: &Point, t: f64) -> Result<Point> {
        self.check_time(t)?;
        if t == 0.0 {
            return Ok(m.clone());
        }
        let f = &self.field;
        let tr = ode::integrate(|_, y, d| f.eval_into(y, d), 0.0, m.as_slice(), t, f.tol, false)?;
        Ok(DVector::from_column_slice(tr.end()))
    }

    /// `(phi_t(m), D phi_t(m))` from the variational equation.
    pub fn flow_with_jacobian(&self, m: &Point, t: f64) -> Result<(Point, DMatrix<f64>)> {
        self.check_time(t)?;
        let n = self.dim();
        if t == 0.0 {
            return Ok((m.clone(), DMatrix::identity(n, n)));
        }
        let mut y0 = m.as_slice().to_vec();
        for i in 0..n {
            for j in 0..n {
                y0.push(if i == j { 1.0 } else { 0.0 });
            }
        }
        let f = &self.field;
        let mut du = vec![0.0; n * n];
        let rhs = |_: f64, y: &[f64], d: &mut [f64]| {
            let (pos, jac) = y.split_at(n);
            f.eval_into(pos, &mut d[..n]);
            f.jacobian_into(pos, &mut du);
            for i in 0..n {
                for j in 0..n {
                    let mut s = 0.0;
                    for k in 0..n {
                        s += du[i * n + k] * jac[k * n + j];
                    }
                    d[n + i * n + j] = s;
                }
            }
        };
        let tr = ode::integrate(rhs, 0.0, &y0, t, f.tol, false)?;
        let end = tr.end();
        Ok((
            DVector::from_column_slice(&end[..n]),
            DMatrix::from_row_slice(n, n, &end[n..]),
        ))
    }

    fn transport_rhs<'a>(&'a self) -> impl FnMut(f64, &[f64], &mut [f64]) + 'a {
        let n = self.dim();
        let r = self.rank();
        let mut b = vec![0.0; r * r];
        move |_, y, d| {
            let (pos, fm) = y.split_at(n);
            self.field.eval_into(pos, &mut d[..n]);
            self.bundle.generator.eval_into(pos, &mut b);
            for i in 0..r {
                for j in 0..r {
                    let mut s = 0.0;
                    for k in 0..r {
                        s += b[i * r + k] * fm[k * r + j];
                    }
                    d[n + i * r + j] = s;
                }
            }
        }
    }

    fn transport_start(&self, m: &Point) -> Vec<f64> {
        let r = self.rank();
        let mut y0 = m.as_slice().to_vec();
        for i in 0..r {
            for j in 0..r {
                y0.push(if i == j { 1.0 } else { 0.0 });
            }
        }
        y0
    }

    /// Matrix of `Phi_t` from the fibre over `m` to the fibre over `phi_t(m)`.
    pub fn fiber_transport(&self, m: &Point, t: f64) -> Result<DMatrix<f64>> {
        self.check_time(t)?;
        let r = self.rank();
        if t == 0.0 || self.bundle.transport_is_identity() {
            return Ok(DMatrix::identity(r, r));
        }
        let y0 = self.transport_start(m);
        let tr = ode::integrate(self.transport_rhs(), 0.0, &y0, t, self.field.tol, false)?;
        let f = DMatrix::from_row_slice(r, r, &tr.end()[self.dim()..]);
        log::trace!("fibre transport over t = {t}: det {:e}", f.determinant());
        Ok(f)
    }

    /// Dense trajectory of the point together with the transport matrix
    /// (row-major after the `n` point coordinates).
    pub fn transport_trajectory(&self, m: &Point, t: f64) -> Result<Trajectory> {
        self.check_time(t)?;
        let y0 = self.transport_start(m);
        ode::integrate(self.transport_rhs(), 0.0, &y0, t, self.field.tol, true)
    }

    /// `rho(g, m)`: fibre over `m` to fibre over `g m`.
    pub fn fiber_action(&self, g: &GroupElt, m: &Point) -> DMatrix<f64> {
        let r = self.rank();
        let mut out = DMatrix::identity(r, r);
        let gens = self.group.generators();
        let mut y = m.clone();
        for (i, inv) in self.group.steps(g) {
            if inv {
                let prev = gens[i].apply(&y, true);
                let rho = self.bundle.fiber_actions[i].eval(prev.as_slice());
                out = rho.try_inverse().unwrap_or_else(|| DMatrix::from_element(r, r, f64::NAN)) * out;
                y = prev;
            } else {
                let rho = self.bundle.fiber_actions[i].eval(y.as_slice());
                out = rho * out;
                y = gens[i].apply(&y, false);
            }
        }
        out
    }

    pub fn endomorphism(&self, m: &Point) -> DMatrix<f64> {
        self.bundle.endomorphism.eval(m.as_slice())
    }

    /// Largest flow speed on a grid of the sample box.
    pub fn max_speed(&self, per_axis: usize) -> f64 {
        let counts = vec![per_axis; self.dim()];
        self.chart
            .sample_box
            .grid(&counts)
            .iter()
            .map(|m| self.field.at(m).norm())
            .fold(0.0, f64::max)
    }

    /// Random group elements used by the symmetry checks.
    fn probe_elements(&self, rng: &mut ChaCha8Rng) -> Vec<GroupElt> {
        match &self.group.kind {
            GroupKind::Trivial => vec![],
            GroupKind::TranslationLine { .. } => {
                (0..3).map(|_| GroupElt::Real(rng.gen_range(-2.0..2.0))).collect()
            }
            _ => self
                .group
                .elements_within(2)
                .into_iter()
                .filter(|g| !self.group.is_identity(g))
                .collect(),
        }
    }

    fn probe_decks(&self) -> Vec<DeckElt> {
        match &self.chart.quotient {
            None => vec![],
            Some(q) => {
                let k = q.fibre_dim();
                let mut out = Vec::new();
                for i in 0..k {
                    let mut shift = vec![0; k];
                    shift[i] = 1;
                    out.push(DeckElt { shift, turns: 0 });
                }
                out.push(DeckElt {
                    shift: vec![0; k],
                    turns: 1,
                });
                out.push(DeckElt {
                    shift: vec![0; k],
                    turns: -1,
                });
                out
            }
        }
    }

    /// Measure the standing hypotheses on random samples: no zeroes of the
    /// field, equivariance of the flow and of the bundle lift, and
    /// commutation of the endomorphism with transport and fibre actions.
    pub fn check_hypotheses(&self, samples: usize, seed: u64) -> Result<HypothesisReport> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bx = &self.chart.sample_box;
        let n = self.dim();
        let per_axis = ((4096f64).powf(1.0 / n as f64).floor() as usize).max(2);
        let mut min_speed = f64::INFINITY;
        let mut slowest = DVector::zeros(n);
        for m in bx.grid(&vec![per_axis; n]) {
            let s = self.field.at(&m).norm();
            if s < min_speed {
                min_speed = s;
                slowest = m;
            }
        }
        if min_speed < 1e-6 {
            return Err(Error::HypothesisViolation {
                check: "field has no zeroes".into(),
                violation: min_speed,
                point: slowest.as_slice().to_vec(),
            });
        }

        let mut worst = [(0.0f64, Vec::new()), (0.0, Vec::new()), (0.0, Vec::new())];
        let mut note = |slot: usize, v: f64, m: &Point| {
            let v = if v.is_nan() { f64::INFINITY } else { v };
            if v > worst[slot].0 {
                worst[slot] = (v, m.as_slice().to_vec());
            }
        };
        let horizon = self.field.t_max.min(2.0);
        let elements = self.probe_elements(&mut rng);
        let decks = self.probe_decks();
        let trivial_bundle = self.bundle.is_trivial();
        for _ in 0..samples {
            let m = bx.sample(&mut rng);
            let t = rng.gen_range(-horizon..horizon);
            let fm = self.flow(&m, t)?;
            let transport = self.fiber_transport(&m, t)?;
            if !trivial_bundle {
                let a0 = self.endomorphism(&m);
                let a1 = self.endomorphism(&fm);
                let scale = 1.0 + transport.norm() * a0.norm();
                note(2, (&a1 * &transport - &transport * &a0).norm() / scale, &m);
            }
            for g in &elements {
                let gm = self.group.act(g, &m);
                let lhs = self.flow(&gm, t)?;
                let rhs = self.group.act(g, &fm);
                note(0, (lhs - &rhs).norm() / (1.0 + rhs.norm()), &m);
                if !trivial_bundle {
                    let rho0 = self.fiber_action(g, &m);
                    let rho1 = self.fiber_action(g, &fm);
                    let tg = self.fiber_transport(&gm, t)?;
                    let l = &rho1 * &transport;
                    let r = &tg * &rho0;
                    note(1, (&l - &r).norm() / (1.0 + l.norm()), &m);
                    let a0 = self.endomorphism(&m);
                    let ag = self.endomorphism(&gm);
                    note(2, (&ag * &rho0 - &rho0 * &a0).norm() / (1.0 + rho0.norm() * a0.norm()), &m);
                }
            }
            if let Some(q) = &self.chart.quotient {
                for d in &decks {
                    let lhs = self.flow(&q.act(d, &m), t)?;
                    let rhs = q.act(d, &fm);
                    note(0, (lhs - &rhs).norm() / (1.0 + rhs.norm()), &m);
                }
            }
        }
        let names = [
            "flow equivariance",
            "bundle equivariance",
            "endomorphism commutation",
        ];
        for (slot, name) in names.iter().enumerate() {
            if worst[slot].0 > HYPOTHESIS_TOL {
                return Err(Error::HypothesisViolation {
                    check: name.to_string(),
                    violation: worst[slot].0,
                    point: worst[slot].1.clone(),
                });
            }
        }
        Ok(HypothesisReport {
            samples,
            min_speed,
            flow_equivariance: worst[0].0,
            bundle_equivariance: worst[1].0,
            endomorphism_commutation: worst[2].0,
        })
    }
}
