//! Command orchestration: builds the configured system, runs the requested
//! stages and writes CSV/JSON artifacts. Self-check failures are collected,
//! not raised, so every artifact still gets written.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::{json, Value};

use crate::config::{RunConfig, VerifyMode};
use crate::error::{Error, Result};
use crate::flow::{CoverSystem, HypothesisReport};
use crate::geometry::{GroupElt, WindowSpec};
use crate::oracle::{catmap_fixed_points, covering_check, mollified_trace};
use crate::orbits::{self, OrbitKind, Window};
use crate::trace::{self, assemble_from, pair, pair_with, Assembly, DeltaComb, TestFunction, MERGE_TOL};

/// Relative agreement required between the mollified extrapolate and the comb.
pub const MOLLIFIED_TOL: f64 = 1e-2;
/// Absolute agreement required by the covering identity.
pub const COVERING_TOL: f64 = 1e-6;
/// Relative agreement between comb weights and the cat-map enumeration.
pub const CATMAP_TOL: f64 = 1e-8;
/// Atom-wise weight agreement between the two cutoff windows.
pub const WINDOW_TOL: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Command {
    Orbits,
    Trace,
    Verify,
    All,
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Orbits => "orbits",
            Command::Trace => "trace",
            Command::Verify => "verify",
            Command::All => "all",
        }
    }
}

/// Command-line replacements for configured values.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub g: Option<String>,
    pub psi: Vec<String>,
    pub modes: Option<Vec<VerifyMode>>,
}

impl Overrides {
    pub fn apply(&self, cfg: &mut RunConfig) -> Result<()> {
        if let Some(g) = &self.g {
            cfg.group.g = g.trim().to_string();
        }
        if !self.psi.is_empty() {
            cfg.trace.psi = self.psi.iter().map(|s| TestFunction::parse(s)).collect::<Result<_>>()?;
            let first = cfg.trace.psi.first().cloned();
            cfg.oracle.mollified_psi = first.clone();
            cfg.oracle.covering_psi = first;
        }
        if let Some(m) = &self.modes {
            cfg.oracle.modes = m.clone();
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Failure {
    pub check: String,
    pub kind: String,
    pub message: String,
}

impl Failure {
    fn from_error(check: &str, e: &Error) -> Failure {
        Failure {
            check: check.to_string(),
            kind: e.kind().to_string(),
            message: e.to_string(),
        }
    }

    fn new(check: &str, kind: &str, message: String) -> Failure {
        Failure {
            check: check.to_string(),
            kind: kind.to_string(),
            message,
        }
    }
}

#[derive(Debug, Default)]
pub struct Outcome {
    pub failures: Vec<Failure>,
    pub artifacts: Vec<PathBuf>,
}

impl Outcome {
    pub fn ok(&self) -> bool {
        self.failures.is_empty()
    }

    pub fn summary_json(&self, command: Command) -> Value {
        json!({
            "command": command.name(),
            "ok": self.ok(),
            "failures": self.failures,
            "artifacts": self.artifacts.iter().map(|p| p.display().to_string()).collect::<Vec<_>>(),
        })
    }
}

/// Everything the stages share: the system, `g`, and the comb (or why there is none).
struct Context<'a> {
    cfg: &'a RunConfig,
    sys: CoverSystem,
    g: GroupElt,
    hypotheses: std::result::Result<HypothesisReport, Failure>,
    assembly: std::result::Result<Assembly, Failure>,
}

impl<'a> Context<'a> {
    fn new(cfg: &'a RunConfig) -> Result<Context<'a>> {
        let sys = cfg.build_system()?;
        let g = sys.group.parse_elt(&cfg.group.g).map_err(|e| match e {
            Error::Validation { reason, .. } => Error::Validation {
                key: "group.g".into(),
                reason,
            },
            other => other,
        })?;
        let hypotheses = if cfg.orbits.hypothesis_samples == 0 {
            Err(Failure::new("hypotheses", "Skipped", "hypothesis_samples = 0".into()))
        } else {
            sys.check_hypotheses(cfg.orbits.hypothesis_samples, cfg.seed)
                .map_err(|e| Failure::from_error("hypotheses", &e))
        };
        let spec = cfg.assemble_spec();
        let base = orbits::find_orbits(&sys, &g, spec.window, &spec.seeds)?;
        log::info!("{} curve class(es) for g = {} in ({}, {})", base.len(), g.payload(), spec.window.lo, spec.window.hi);
        let assembly = assemble_from(&sys, &g, &base, &spec).map_err(|e| Failure::from_error("assemble", &e));
        Ok(Context {
            cfg,
            sys,
            g,
            hypotheses,
            assembly,
        })
    }

    fn hypothesis_failure(&self) -> Option<Failure> {
        match &self.hypotheses {
            Err(f) if f.kind != "Skipped" => Some(f.clone()),
            _ => None,
        }
    }
}

pub fn run(command: Command, cfg: &RunConfig, out: &Path) -> Result<Outcome> {
    fs::create_dir_all(out)?;
    let ctx = Context::new(cfg)?;
    let mut outcome = Outcome::default();
    if let Some(f) = ctx.hypothesis_failure() {
        outcome.failures.push(f);
    }
    if let Err(f) = &ctx.assembly {
        outcome.failures.push(f.clone());
    }
    if matches!(command, Command::Orbits | Command::All) {
        let path = out.join("orbits.csv");
        fs::write(&path, orbits_csv(&ctx))?;
        outcome.artifacts.push(path);
    }
    if matches!(command, Command::Trace | Command::All) {
        let (report, failures) = trace_report(&ctx)?;
        outcome.failures.extend(failures);
        let path = out.join("trace.json");
        fs::write(&path, to_json(&report, &outcome.failures))?;
        outcome.artifacts.push(path);
        let path = out.join("pairing-curve.csv");
        fs::write(&path, pairing_curve(&ctx))?;
        outcome.artifacts.push(path);
    }
    if matches!(command, Command::Verify | Command::All) {
        let (report, failures) = verify_report(&ctx)?;
        outcome.failures.extend(failures);
        let path = out.join("verify.json");
        fs::write(&path, to_json(&report, &outcome.failures))?;
        outcome.artifacts.push(path);
    }
    Ok(outcome)
}

fn to_json(report: &Value, failures: &[Failure]) -> String {
    let mut report = report.clone();
    report["failures"] = json!(failures);
    let mut s = serde_json::to_string_pretty(&report).expect("report serialises");
    s.push('\n');
    s
}

// ---------------------------------------------------------------------------
// orbits.csv

/// Header plus rows as CSV, quoting only where a field needs it.
fn csv_text<I: IntoIterator<Item = Vec<String>>>(header: &[String], rows: I) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header).expect("in-memory csv");
    for r in rows {
        w.write_record(&r).expect("in-memory csv");
    }
    String::from_utf8(w.into_inner().expect("in-memory csv")).expect("utf-8 fields")
}

fn num(x: f64) -> String {
    format!("{x:.16e}")
}

fn orbits_csv(ctx: &Context) -> String {
    let labels = &ctx.sys.chart.labels;
    let mut header = vec!["x_payload".to_string(), "l".into()];
    header.extend(labels.iter().map(|l| format!("m0_{l}")));
    header.extend(
        ["kind", "T_sharp", "T_gamma", "det_one_minus_P", "residual", "rep", "fiber_trace", "weight"]
            .iter()
            .map(|s| s.to_string()),
    );
    let Ok(asm) = &ctx.assembly else {
        return csv_text(&header, []);
    };
    let rows = asm.orbits.iter().map(|r| {
        let mut row = vec![r.target.clone(), num(r.l)];
        row.extend(r.m0.iter().map(|v| num(*v)));
        row.push(r.kind.name().to_string());
        row.push(match r.kind {
            OrbitKind::Periodic { t_sharp } => num(t_sharp),
            OrbitKind::ProperLine => String::new(),
        });
        row.push(num(r.t_gamma));
        row.push(num(r.det_one_minus_p));
        row.push(num(r.residual));
        row.push(r.rep.clone());
        row.push(num(r.fiber_trace));
        row.push(num(r.weight));
        row
    });
    csv_text(&header, rows)
}

// ---------------------------------------------------------------------------
// trace.json and the pairing curve

/// Atom-wise comparison of two combs: `None` when they agree.
pub fn comb_mismatch(a: &DeltaComb, b: &DeltaComb, tol: f64) -> Option<String> {
    if a.atoms.len() != b.atoms.len() {
        return Some(format!("{} atoms against {}", a.atoms.len(), b.atoms.len()));
    }
    for (x, y) in a.atoms.iter().zip(&b.atoms) {
        if (x.l - y.l).abs() > MERGE_TOL {
            return Some(format!("atom at l = {} against l = {}", x.l, y.l));
        }
        let d = (x.weight - y.weight).abs();
        if d > tol * x.weight.abs().max(1.0) {
            return Some(format!("weight at l = {}: {} against {} (difference {d:e})", x.l, x.weight, y.weight));
        }
    }
    None
}

fn trace_report(ctx: &Context) -> Result<(Value, Vec<Failure>)> {
    let cfg = ctx.cfg;
    let spec = cfg.assemble_spec();
    let mut failures = Vec::new();
    let hypotheses = match &ctx.hypotheses {
        Ok(h) => json!(h),
        Err(f) => json!({ "failed": f }),
    };
    let mut report = json!({
        "resolved_config": cfg.to_json(),
        "g": ctx.g.payload(),
        "radius": spec.radius,
        "window": { "lo": spec.window.lo, "hi": spec.window.hi },
    });
    let Ok(asm) = &ctx.assembly else {
        report["atoms"] = json!([]);
        report["pairings"] = json!([]);
        report["diagnostics"] = json!({ "hypotheses": hypotheses });
        return Ok((report, failures));
    };
    let pairings: Vec<Value> = cfg
        .trace
        .psi
        .iter()
        .map(|p| {
            json!({
                "psi_spec": p.to_string(),
                "value": pair(&asm.comb, p),
                "truncated": trace::truncates(&asm.comb, p),
            })
        })
        .collect();

    let grid_stable = if cfg.orbits.grid_check {
        let stable = grid_stable(ctx, asm)?;
        if !stable {
            log::warn!("doubling the seed grid changes the curve classes; the orbit search may be incomplete");
        }
        json!(stable)
    } else {
        Value::Null
    };

    let window_alt = match &cfg.group.window_alt {
        None => Value::Null,
        Some(w) => {
            let (value, failure) = window_check(ctx, w)?;
            failures.extend(failure);
            value
        }
    };

    report["atoms"] = json!(asm.comb.atoms);
    report["pairings"] = json!(pairings);
    report["orbits"] = json!(asm.orbits);
    report["diagnostics"] = json!({
        "hypotheses": hypotheses,
        "shells": asm.shells,
        "complete": asm.complete,
        "truncation_warning": asm.truncation_warning,
        "grid_stable": grid_stable,
        "total_variation": asm.comb.total_variation(),
        "window_alt": window_alt,
    });
    Ok((report, failures))
}

/// Doubling the seed density leaves the comb unchanged. Classes that miss the
/// cutoff support carry no weight, so the comb is what has to be stable.
fn grid_stable(ctx: &Context, asm: &Assembly) -> Result<bool> {
    let mut spec = ctx.cfg.assemble_spec();
    spec.seeds.per_axis *= 2;
    Ok(match trace::assemble(&ctx.sys, &ctx.g, &spec) {
        Ok(finer) => comb_mismatch(&asm.comb, &finer.comb, WINDOW_TOL).is_none(),
        Err(_) => false,
    })
}

/// Reassemble with the alternate cutoff window and compare atom by atom.
fn window_check(ctx: &Context, window: &WindowSpec) -> Result<(Value, Option<Failure>)> {
    let Ok(asm) = &ctx.assembly else {
        return Ok((Value::Null, None));
    };
    let alt = ctx.cfg.build_system_with_window(window)?;
    let spec = ctx.cfg.assemble_spec();
    let other = match trace::assemble(&alt, &ctx.g, &spec) {
        Ok(a) => a,
        Err(e) => return Ok((Value::Null, Some(Failure::from_error("window_alt", &e)))),
    };
    let mismatch = comb_mismatch(&asm.comb, &other.comb, WINDOW_TOL);
    let value = json!({
        "atoms": other.comb.atoms.iter().map(|a| json!({"l": a.l, "weight": a.weight})).collect::<Vec<_>>(),
        "agrees": mismatch.is_none(),
        "tolerance": WINDOW_TOL,
    });
    let failure = mismatch.map(|m| Failure::new("window_alt", "WindowDependence", m));
    Ok((value, failure))
}

/// Shape swept across the window: the first configured test function, or a
/// narrow gaussian when none is configured.
fn sweep_shape(cfg: &RunConfig) -> TestFunction {
    cfg.trace.psi.first().cloned().unwrap_or(TestFunction::Gaussian {
        center: 0.0,
        width: (cfg.trace.sweep.hi - cfg.trace.sweep.lo) / 100.0,
    })
}

fn pairing_curve(ctx: &Context) -> String {
    let sweep = &ctx.cfg.trace.sweep;
    let shape = sweep_shape(ctx.cfg);
    let header = ["center", "value", "psi"].map(String::from);
    let Ok(asm) = &ctx.assembly else {
        return csv_text(&header, []);
    };
    let rows = (0..sweep.count).map(|k| {
        let c = sweep.lo + (sweep.hi - sweep.lo) * k as f64 / (sweep.count - 1) as f64;
        let f = shape.recentered(c);
        let v = pair_with(&asm.comb, |t| f.eval(t));
        vec![num(c), num(v), f.to_string()]
    });
    csv_text(&header, rows)
}

// ---------------------------------------------------------------------------
// verify.json

fn verify_report(ctx: &Context) -> Result<(Value, Vec<Failure>)> {
    let cfg = ctx.cfg;
    let mut failures = Vec::new();
    let mut checks = Vec::new();
    for mode in &cfg.oracle.modes {
        let (value, failure) = match mode {
            VerifyMode::Mollified => verify_mollified(ctx)?,
            VerifyMode::Covering => verify_covering(ctx)?,
            VerifyMode::Catmap => verify_catmap(ctx)?,
        };
        checks.push(value);
        failures.extend(failure);
    }
    Ok((
        json!({
            "resolved_config": cfg.to_json(),
            "g": ctx.g.payload(),
            "checks": checks,
        }),
        failures,
    ))
}

fn verify_mollified(ctx: &Context) -> Result<(Value, Option<Failure>)> {
    let psi = ctx.cfg.oracle.mollified_psi.clone().ok_or_else(|| Error::Validation {
        key: "oracle.mollified_psi".into(),
        reason: "required by the mollified mode".into(),
    })?;
    let mut value = json!({ "mode": "mollified", "psi_spec": psi.to_string(), "tolerance": MOLLIFIED_TOL });
    let Ok(asm) = &ctx.assembly else {
        return Ok((value, None));
    };
    let target = pair(&asm.comb, &psi);
    value["comb_pairing"] = json!(target);
    match mollified_trace(&ctx.sys, &ctx.g, &psi, &ctx.cfg.oracle.mollifier) {
        Ok(r) => {
            let discrepancy = (r.extrapolate - target).abs() / target.abs().max(1.0);
            value["ladder"] = json!(r.ladder);
            value["order"] = json!(r.order);
            value["extrapolate"] = json!(r.extrapolate);
            value["discrepancy"] = json!(discrepancy);
            let passed = discrepancy <= MOLLIFIED_TOL;
            value["passed"] = json!(passed);
            let failure = (!passed).then(|| {
                Failure::new(
                    "mollified",
                    "OracleDisagreement",
                    format!("extrapolate {} against comb pairing {target} (relative {discrepancy:e})", r.extrapolate),
                )
            });
            Ok((value, failure))
        }
        Err(e) => {
            value["passed"] = json!(false);
            Ok((value, Some(Failure::from_error("mollified", &e))))
        }
    }
}

fn verify_covering(ctx: &Context) -> Result<(Value, Option<Failure>)> {
    let cfg = ctx.cfg;
    let (model, psi) = match (&cfg.oracle.covering_model, &cfg.oracle.covering_psi) {
        (Some(m), Some(p)) => (m.clone(), p.clone()),
        _ => {
            return Err(Error::Validation {
                key: "oracle.covering_model".into(),
                reason: "the covering mode needs a model and a test function".into(),
            })
        }
    };
    // the upstairs combs only need the periods the test function sees
    let (lo, hi) = psi.support();
    let mut spec = cfg.assemble_spec();
    spec.window = Window::new(lo, hi).map_err(|e| match e {
        Error::Validation { reason, .. } => Error::Validation {
            key: "oracle.covering_psi".into(),
            reason,
        },
        other => other,
    })?;
    match covering_check(&ctx.sys, &model, &psi, cfg.oracle.covering_radius, &spec) {
        Ok(r) => {
            let passed = r.exact && r.discrepancy <= COVERING_TOL;
            let mut value = json!(r);
            value["mode"] = json!("covering");
            value["psi_spec"] = json!(psi.to_string());
            value["tolerance"] = json!(COVERING_TOL);
            value["passed"] = json!(passed);
            let failure = if !r.exact {
                Some(Failure::new(
                    "covering",
                    "NotExact",
                    format!(
                        "first omitted shell moves points by {} but the flow reaches {}; raise covering_radius",
                        r.omitted_displacement, r.reach
                    ),
                ))
            } else if r.discrepancy > COVERING_TOL {
                Some(Failure::new(
                    "covering",
                    "OracleDisagreement",
                    format!("downstairs {} against upstairs {} (difference {:e})", r.lhs, r.rhs, r.discrepancy),
                ))
            } else {
                None
            };
            Ok((value, failure))
        }
        Err(e) => Ok((json!({ "mode": "covering", "passed": false }), Some(Failure::from_error("covering", &e)))),
    }
}

fn verify_catmap(ctx: &Context) -> Result<(Value, Option<Failure>)> {
    let mut value = json!({ "mode": "catmap", "tolerance": CATMAP_TOL });
    let Ok(asm) = &ctx.assembly else {
        return Ok((value, None));
    };
    let window = ctx.cfg.window();
    let mut rows = Vec::new();
    let mut failure = None;
    for n in 1..=ctx.cfg.oracle.catmap_max {
        if !window.contains(n as f64) {
            continue;
        }
        let report = catmap_fixed_points(n)?;
        let comb: f64 = asm
            .comb
            .atoms
            .iter()
            .filter(|a| (a.l - n as f64).abs() <= MERGE_TOL)
            .map(|a| a.weight)
            .sum();
        let rel = (comb - report.weight).abs() / report.weight.abs();
        if rel > CATMAP_TOL && failure.is_none() {
            failure = Some(Failure::new(
                "catmap",
                "OracleDisagreement",
                format!("weight at l = {n}: comb {comb} against enumeration {}", report.weight),
            ));
        }
        rows.push(json!({
            "n": n,
            "comb_weight": comb,
            "oracle": report,
            "relative_error": rel,
        }));
    }
    value["periods"] = json!(rows);
    value["passed"] = json!(failure.is_none());
    Ok((value, failure))
}
