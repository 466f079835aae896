//! Dormand-Prince 5(4) with Hairer's continuous extension.

use crate::error::{Error, Result};

const C2: f64 = 1.0 / 5.0;
const C3: f64 = 3.0 / 10.0;
const C4: f64 = 4.0 / 5.0;
const C5: f64 = 8.0 / 9.0;
const A21: f64 = 1.0 / 5.0;
const A31: f64 = 3.0 / 40.0;
const A32: f64 = 9.0 / 40.0;
const A41: f64 = 44.0 / 45.0;
const A42: f64 = -56.0 / 15.0;
const A43: f64 = 32.0 / 9.0;
const A51: f64 = 19372.0 / 6561.0;
const A52: f64 = -25360.0 / 2187.0;
const A53: f64 = 64448.0 / 6561.0;
const A54: f64 = -212.0 / 729.0;
const A61: f64 = 9017.0 / 3168.0;
const A62: f64 = -355.0 / 33.0;
const A63: f64 = 46732.0 / 5247.0;
const A64: f64 = 49.0 / 176.0;
const A65: f64 = -5103.0 / 18656.0;
const A71: f64 = 35.0 / 384.0;
const A73: f64 = 500.0 / 1113.0;
const A74: f64 = 125.0 / 192.0;
const A75: f64 = -2187.0 / 6784.0;
const A76: f64 = 11.0 / 84.0;
const E1: f64 = 71.0 / 57600.0;
const E3: f64 = -71.0 / 16695.0;
const E4: f64 = 71.0 / 1920.0;
const E5: f64 = -17253.0 / 339200.0;
const E6: f64 = 22.0 / 525.0;
const E7: f64 = -1.0 / 40.0;
const D1: f64 = -12715105075.0 / 11282082432.0;
const D3: f64 = 87487479700.0 / 32700410799.0;
const D4: f64 = -10690763975.0 / 1880347072.0;
const D5: f64 = 701980252875.0 / 199316789632.0;
const D6: f64 = -1453857185.0 / 822651844.0;
const D7: f64 = 69997945.0 / 29380423.0;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Tolerances {
    pub rtol: f64,
    pub atol: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Tolerances {
            rtol: 1e-10,
            atol: 1e-12,
        }
    }
}

const MAX_STEPS: usize = 200_000;

/// Dense solution over `[t0, t1]` (either orientation).
#[derive(Clone, Debug)]
pub struct Trajectory {
    pub dim: usize,
    pub t0: f64,
    pub t1: f64,
    /// Step start times, in integration order.
    starts: Vec<f64>,
    steps: Vec<f64>,
    /// Five coefficient vectors per step, concatenated.
    coeffs: Vec<f64>,
    end: Vec<f64>,
}

impl Trajectory {
    pub fn end(&self) -> &[f64] {
        &self.end
    }

    pub fn n_steps(&self) -> usize {
        self.steps.len()
    }

    fn locate(&self, t: f64) -> usize {
        let forward = self.t1 >= self.t0;
        // first step whose start is beyond t, minus one
        let k = self
            .starts
            .partition_point(|&s| if forward { s <= t } else { s >= t });
        k.saturating_sub(1).min(self.steps.len() - 1)
    }

    /// Evaluate the interpolant; `t` is clamped to the integrated range.
    pub fn eval_into(&self, t: f64, out: &mut [f64]) {
        if self.steps.is_empty() {
            out.copy_from_slice(&self.end);
            return;
        }
        let (lo, hi) = if self.t0 <= self.t1 {
            (self.t0, self.t1)
        } else {
            (self.t1, self.t0)
        };
        let t = t.clamp(lo, hi);
        if t == self.t1 {
            out.copy_from_slice(&self.end);
            return;
        }
        let k = self.locate(t);
        let n = self.dim;
        let theta = (t - self.starts[k]) / self.steps[k];
        let theta1 = 1.0 - theta;
        let c = &self.coeffs[5 * n * k..5 * n * (k + 1)];
        for i in 0..n {
            out[i] = c[i]
                + theta
                    * (c[n + i]
                        + theta1 * (c[2 * n + i] + theta * (c[3 * n + i] + theta1 * c[4 * n + i])));
        }
    }

    pub fn eval(&self, t: f64) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        self.eval_into(t, &mut out);
        out
    }
}

fn weighted_rms(n: usize, v: &[f64], y0: &[f64], y1: &[f64], tol: Tolerances) -> f64 {
    let mut acc = 0.0;
    for i in 0..n {
        let sk = tol.atol + tol.rtol * y0[i].abs().max(y1[i].abs());
        let r = v[i] / sk;
        acc += r * r;
    }
    (acc / n as f64).sqrt()
}

/// Integrate `y' = f(t, y)` from `t0` to `t1`. When `dense` is false the
/// returned trajectory only carries the end state.
pub fn integrate<F>(
    mut f: F,
    t0: f64,
    y0: &[f64],
    t1: f64,
    tol: Tolerances,
    dense: bool,
) -> Result<Trajectory>
where
    F: FnMut(f64, &[f64], &mut [f64]),
{
    let n = y0.len();
    let mut traj = Trajectory {
        dim: n,
        t0,
        t1,
        starts: Vec::new(),
        steps: Vec::new(),
        coeffs: Vec::new(),
        end: y0.to_vec(),
    };
    if t1 == t0 {
        return Ok(traj);
    }
    let dir = (t1 - t0).signum();
    let span = (t1 - t0).abs();

    let mut y = y0.to_vec();
    let mut k1 = vec![0.0; n];
    let mut k2 = vec![0.0; n];
    let mut k3 = vec![0.0; n];
    let mut k4 = vec![0.0; n];
    let mut k5 = vec![0.0; n];
    let mut k6 = vec![0.0; n];
    let mut k7 = vec![0.0; n];
    let mut ytmp = vec![0.0; n];
    let mut y1 = vec![0.0; n];
    let mut err = vec![0.0; n];

    let mut t = t0;
    f(t, &y, &mut k1);

    // initial step (Hairer's hinit)
    let mut h = {
        let mut dnf = 0.0;
        let mut dny = 0.0;
        for i in 0..n {
            let sk = tol.atol + tol.rtol * y[i].abs();
            dnf += (k1[i] / sk).powi(2);
            dny += (y[i] / sk).powi(2);
        }
        let mut h = if dnf <= 1e-10 || dny <= 1e-10 {
            1e-6
        } else {
            0.01 * (dny / dnf).sqrt()
        };
        h = h.min(span);
        for i in 0..n {
            ytmp[i] = y[i] + dir * h * k1[i];
        }
        f(t + dir * h, &ytmp, &mut k2);
        let mut der2 = 0.0;
        for i in 0..n {
            let sk = tol.atol + tol.rtol * y[i].abs();
            der2 += ((k2[i] - k1[i]) / sk).powi(2);
        }
        let der2 = der2.sqrt() / h;
        let der12 = der2.max(dnf.sqrt());
        let h1 = if der12 <= 1e-15 {
            (h * 1e-3).max(1e-6)
        } else {
            (0.01 / der12).powf(0.2)
        };
        (100.0 * h).min(h1).min(span)
    };

    let mut rejected_last = false;
    for _ in 0..MAX_STEPS {
        let remaining = (t1 - t).abs();
        let last = h >= remaining * (1.0 - 1e-13);
        if last {
            h = remaining;
        }
        if h < 1e-14 * t.abs().max(1.0) {
            return Err(Error::StepFailure { t, state: y });
        }
        let hs = dir * h;
        for i in 0..n {
            ytmp[i] = y[i] + hs * A21 * k1[i];
        }
        f(t + C2 * hs, &ytmp, &mut k2);
        for i in 0..n {
            ytmp[i] = y[i] + hs * (A31 * k1[i] + A32 * k2[i]);
        }
        f(t + C3 * hs, &ytmp, &mut k3);
        for i in 0..n {
            ytmp[i] = y[i] + hs * (A41 * k1[i] + A42 * k2[i] + A43 * k3[i]);
        }
        f(t + C4 * hs, &ytmp, &mut k4);
        for i in 0..n {
            ytmp[i] = y[i] + hs * (A51 * k1[i] + A52 * k2[i] + A53 * k3[i] + A54 * k4[i]);
        }
        f(t + C5 * hs, &ytmp, &mut k5);
        for i in 0..n {
            ytmp[i] = y[i]
                + hs * (A61 * k1[i] + A62 * k2[i] + A63 * k3[i] + A64 * k4[i] + A65 * k5[i]);
        }
        let tnew = if last { t1 } else { t + hs };
        f(tnew, &ytmp, &mut k6);
        for i in 0..n {
            y1[i] = y[i]
                + hs * (A71 * k1[i] + A73 * k3[i] + A74 * k4[i] + A75 * k5[i] + A76 * k6[i]);
        }
        f(tnew, &y1, &mut k7);
        for i in 0..n {
            err[i] = hs
                * (E1 * k1[i] + E3 * k3[i] + E4 * k4[i] + E5 * k5[i] + E6 * k6[i] + E7 * k7[i]);
        }
        let e = weighted_rms(n, &err, &y, &y1, tol);
        if !e.is_finite() {
            h *= 0.2;
            rejected_last = true;
            continue;
        }
        let fac = (0.9 * e.powf(-0.2)).clamp(0.2, 10.0);
        if e <= 1.0 {
            if dense {
                traj.starts.push(t);
                traj.steps.push(hs);
                let base = traj.coeffs.len();
                traj.coeffs.resize(base + 5 * n, 0.0);
                let c = &mut traj.coeffs[base..];
                for i in 0..n {
                    let ydiff = y1[i] - y[i];
                    let bspl = hs * k1[i] - ydiff;
                    c[i] = y[i];
                    c[n + i] = ydiff;
                    c[2 * n + i] = bspl;
                    c[3 * n + i] = ydiff - hs * k7[i] - bspl;
                    c[4 * n + i] = hs
                        * (D1 * k1[i]
                            + D3 * k3[i]
                            + D4 * k4[i]
                            + D5 * k5[i]
                            + D6 * k6[i]
                            + D7 * k7[i]);
                }
            }
            std::mem::swap(&mut y, &mut y1);
            std::mem::swap(&mut k1, &mut k7);
            t = tnew;
            if last {
                traj.end = y;
                return Ok(traj);
            }
            let grow = if rejected_last { fac.min(1.0) } else { fac };
            h *= grow;
            rejected_last = false;
        } else {
            h *= fac.min(1.0);
            rejected_last = true;
        }
    }
    Err(Error::StepFailure { t, state: y })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exponential_decay_and_dense_output() {
        let tol = Tolerances::default();
        let tr = integrate(|_, y, d| d[0] = -y[0], 0.0, &[1.0], 3.0, tol, true).unwrap();
        assert!((tr.end()[0] - (-3.0f64).exp()).abs() < 1e-10);
        for t in [0.0, 0.1, 0.77, 1.5, 2.999] {
            let v = tr.eval(t)[0];
            assert!((v - (-t as f64).exp()).abs() < 1e-9, "t={t}");
        }
    }

    #[test]
    fn backward_integration() {
        let tol = Tolerances::default();
        let tr = integrate(|_, y, d| {
            d[0] = y[1];
            d[1] = -y[0];
        }, 0.0, &[0.0, 1.0], -2.0, tol, true)
        .unwrap();
        assert!((tr.end()[0] - (-2.0f64).sin()).abs() < 1e-9);
        assert!((tr.eval(-1.0)[1] - 1.0f64.cos()).abs() < 1e-9);
    }

    #[test]
    fn zero_span_returns_start() {
        let tr = integrate(|_, _, d| d[0] = 1.0, 1.0, &[0.5], 1.0, Tolerances::default(), true).unwrap();
        assert_eq!(tr.end(), &[0.5]);
        assert_eq!(tr.eval(1.0), vec![0.5]);
    }

    #[test]
    fn blowup_reports_step_failure() {
        let r = integrate(|_, y, d| d[0] = y[0] * y[0], 0.0, &[1.0], 2.0, Tolerances::default(), false);
        assert!(matches!(r, Err(Error::StepFailure { .. })));
    }
}
