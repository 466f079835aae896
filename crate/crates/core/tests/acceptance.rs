//! Acceptance suite: one line per criterion, each at its stated tolerance.
//! Runs as a plain binary so the lines are printed even when everything passes.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use equitrace::config::{parse_config, RunConfig};
use equitrace::flow::CoverSystem;
use equitrace::geometry::{CutoffFunction, GroupElt};
use equitrace::oracle::{cat_det, catmap_fixed_points, circle_map_iterate, covering_check, mollified_trace, Downstairs, MollifierSpec};
use equitrace::orbits::{self, find_orbits, poincare, time_shift, DelocalizedOrbit, SeedSpec, Window, DEFAULT_DEGENERACY};
use equitrace::quad;
use equitrace::run::{comb_mismatch, run, Command};
use equitrace::trace::{self, assemble, pair, Assembly, TestFunction};

type Check = Result<String, String>;

fn e<T>(r: equitrace::Result<T>) -> Result<T, String> {
    r.map_err(|e| e.to_string())
}

fn ensure(ok: bool, what: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(what())
    }
}

fn model(name: &str) -> RunConfig {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("models").join(format!("{name}.cfg"));
    parse_config(&std::fs::read_to_string(&path).expect("model file")).expect("model parses")
}

fn system(cfg: &RunConfig) -> Result<(CoverSystem, GroupElt), String> {
    let sys = e(cfg.build_system())?;
    let g = e(sys.group.parse_elt(&cfg.group.g))?;
    Ok((sys, g))
}

// ---------------------------------------------------------------------------

fn translation_comb() -> Check {
    let cfg = model("translation");
    let (sys, _) = system(&cfg)?;
    let mut worst: f64 = 0.0;
    for a in [0.7, -1.3] {
        let g = e(sys.group.parse_elt(&a.to_string()))?;
        let mut spec = cfg.assemble_spec();
        spec.window = if a > 0.0 { e(Window::new(0.05, 3.0))? } else { e(Window::new(-3.0, -0.05))? };
        let asm = e(assemble(&sys, &g, &spec))?;
        ensure(asm.comb.atoms.len() == 1, || format!("g = {a}: {} atoms", asm.comb.atoms.len()))?;
        let atom = &asm.comb.atoms[0];
        ensure((atom.l - a).abs() <= 1e-10 && (atom.weight - 1.0).abs() <= 1e-10, || {
            format!("g = {a}: atom ({}, {})", atom.l, atom.weight)
        })?;
        worst = worst.max((atom.weight - 1.0).abs());
        for (dc, w) in [(0.0, 0.1), (0.2, 0.15), (-0.1, 0.05)] {
            let psi = e(TestFunction::gaussian(a + dc, w))?;
            let got = pair(&asm.comb, &psi);
            let want = (-(dc * dc) / (2.0 * w * w)).exp();
            ensure((got - want).abs() <= 1e-8, || format!("g = {a}, {psi}: {got} against {want}"))?;
            worst = worst.max((got - want).abs());
        }
    }
    Ok(format!("single atoms (0.7, 1) and (-1.3, 1), worst deviation {worst:.1e}"))
}

fn catmap_limit() -> Check {
    let cfg = model("catmap");
    let (sys, g) = system(&cfg)?;
    let spec = cfg.assemble_spec();
    ensure(spec.window.lo == 0.5 && spec.window.hi == 3.5, || "catmap window is not (0.5, 3.5)".into())?;
    let asm = e(assemble(&sys, &g, &spec))?;
    let mut worst: f64 = 0.0;
    for n in 1..=3u32 {
        let oracle = e(catmap_fixed_points(n))?;
        let w: f64 = asm.comb.atoms.iter().filter(|a| (a.l - n as f64).abs() < 1e-7).map(|a| a.weight).sum();
        let rel = (w - oracle.weight).abs() / oracle.weight;
        ensure(rel <= 1e-8, || format!("l = {n}: comb {w} against enumeration {}", oracle.weight))?;
        worst = worst.max(rel);
    }
    let psi = e(TestFunction::bump(1.0, 0.45))?;
    let target = pair(&asm.comb, &psi);
    let spec = MollifierSpec::default();
    ensure(spec.ladder == vec![0.08, 0.04, 0.02], || "default ladder changed".into())?;
    let m = e(mollified_trace(&sys, &g, &psi, &spec))?;
    let rel = (m.extrapolate - target).abs() / target.abs();
    ensure(rel <= 1e-2, || format!("mollified {} against comb {target}", m.extrapolate))?;
    Ok(format!(
        "weights rel {worst:.1e}; mollified {:.9} vs comb {target:.9} (rel {rel:.1e}, order {:.2})",
        m.extrapolate, m.order
    ))
}

fn covering() -> Check {
    let circle = model("circle");
    let (sys, _) = system(&circle)?;
    let psi = e(TestFunction::bump(2.0, 1.4))?;
    let mut spec = circle.assemble_spec();
    spec.window = e(Window::new(0.5, 3.5))?;
    let r = e(covering_check(&sys, &Downstairs::Circle, &psi, 4, &spec))?;
    ensure(r.exact && r.discrepancy <= 1e-10, || format!("circle: {r:?}"))?;

    let susp = model("suspension");
    let (sys, _) = system(&susp)?;
    let psi = e(TestFunction::bump(2.0, 1.45))?;
    let (lo, hi) = psi.support();
    ensure(lo > 0.5 && hi < 3.5, || "test function leaves (0.5, 3.5)".into())?;
    let mut spec = susp.assemble_spec();
    spec.window = e(Window::new(lo, hi))?;
    let s = e(covering_check(&sys, &Downstairs::CircleMap { amplitude: 0.1 }, &psi, 6, &spec))?;
    ensure(s.exact && s.discrepancy <= 1e-6, || format!("suspension: {s:?}"))?;
    Ok(format!(
        "circle |lhs - rhs| = {:.1e}, suspension |lhs - rhs| = {:.1e} over {} deck elements, both exact",
        r.discrepancy,
        s.discrepancy,
        s.terms.len()
    ))
}

/// Primitive periods summed over the curves of one atom that share a
/// Poincare determinant: curves related by the centralizer trade weight
/// between each other when the cutoff changes, their sum does not.
fn period_groups(asm: &Assembly) -> BTreeMap<(i64, i64), f64> {
    let mut out = BTreeMap::new();
    for o in &asm.orbits {
        let key = ((o.l * 1e6).round() as i64, (o.det_one_minus_p * 1e6).round() as i64);
        *out.entry(key).or_insert(0.0) += o.t_gamma;
    }
    out
}

fn chi_independence() -> Check {
    let mut notes = Vec::new();
    for name in ["translation", "circle", "suspension", "dihedral"] {
        let cfg = model(name);
        let alt = cfg.group.window_alt.clone().ok_or_else(|| format!("{name} has no second window"))?;
        let (sys, g) = system(&cfg)?;
        let other = e(cfg.build_system_with_window(&alt))?;
        let spec = cfg.assemble_spec();
        let a = e(assemble(&sys, &g, &spec))?;
        let b = e(assemble(&other, &g, &spec))?;
        if let Some(m) = comb_mismatch(&a.comb, &b.comb, 1e-8) {
            return Err(format!("{name}: {m}"));
        }
        let (pa, pb) = (period_groups(&a), period_groups(&b));
        ensure(pa.len() == pb.len() && pa.keys().eq(pb.keys()), || format!("{name}: curve families differ"))?;
        let mut worst: f64 = 0.0;
        for (k, v) in &pa {
            worst = worst.max((v - pb[k]).abs());
        }
        ensure(worst <= 1e-8, || format!("{name}: primitive periods differ by {worst:e}"))?;
        notes.push(format!("{name} {worst:.0e}"));
    }
    Ok(format!(
        "combs and periods agree ({}); catmap has G trivial, so chi = 1 is its only cutoff",
        notes.join(", ")
    ))
}

fn all_orbits(sys: &CoverSystem, g: &GroupElt, cfg: &RunConfig) -> Result<Vec<DelocalizedOrbit>, String> {
    let spec = cfg.assemble_spec();
    let base = e(find_orbits(sys, g, spec.window, &spec.seeds))?;
    let mut out = Vec::new();
    for h in sys.group.coset_representatives(g, spec.radius) {
        out.extend(e(orbits::conjugate_orbits(sys, &h, &base))?);
    }
    Ok(out)
}

fn invariance() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst_shift: f64 = 0.0;
    let mut curves = 0;
    for name in ["suspension", "catmap", "dihedral"] {
        let cfg = model(name);
        let (sys, g) = system(&cfg)?;
        for o in all_orbits(&sys, &g, &cfg)? {
            let d0 = e(poincare(&sys, &o, DEFAULT_DEGENERACY))?.det_one_minus_p;
            for _ in 0..5 {
                let s = rng.gen_range(-1.0..1.0) * o.l.abs();
                let shifted = e(time_shift(&sys, &o, s))?;
                let d = e(poincare(&sys, &shifted, DEFAULT_DEGENERACY))?.det_one_minus_p;
                worst_shift = worst_shift.max((d - d0).abs());
            }
            curves += 1;
        }
    }
    ensure(worst_shift <= 1e-9, || format!("det(1 - P) moves by {worst_shift:e} under time shifts"))?;

    let cfg = model("dihedral");
    let (sys, g) = system(&cfg)?;
    let spec = cfg.assemble_spec();
    let reference = e(assemble(&sys, &g, &spec))?;
    let periods = |x: &GroupElt| -> Result<Vec<f64>, String> {
        let mut l: Vec<f64> = e(find_orbits(&sys, x, spec.window, &spec.seeds))?.iter().map(|o| o.l).collect();
        l.sort_by(f64::total_cmp);
        Ok(l)
    };
    let base_periods = periods(&g)?;
    let order = sys.group.order().ok_or("dihedral group is not finite")?;
    let mut seen = vec![g.clone()];
    for i in 0..order {
        let h = GroupElt::Finite(i);
        let c = sys.group.conjugate(&h, &g);
        if seen.contains(&c) {
            continue;
        }
        seen.push(c.clone());
        let p = periods(&c)?;
        ensure(
            p.len() == base_periods.len() && p.iter().zip(&base_periods).all(|(a, b)| (a - b).abs() <= 1e-8),
            || format!("periods for {} differ: {p:?} against {base_periods:?}", c.payload()),
        )?;
        let asm = e(assemble(&sys, &c, &spec))?;
        if let Some(m) = comb_mismatch(&reference.comb, &asm.comb, 1e-8) {
            return Err(format!("comb for {}: {m}", c.payload()));
        }
    }
    Ok(format!(
        "time-shift drift {worst_shift:.1e} over {curves} curves; {} conjugate(s) of g match",
        seen.len() - 1
    ))
}

fn fibre_traces() -> Check {
    let cfg = model("dihedral");
    let (sys, g) = system(&cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut drift: f64 = 0.0;
    let mut closed: f64 = 0.0;
    for o in all_orbits(&sys, &g, &cfg)? {
        let f0 = e(trace::fiber_trace(&sys, &o, 1))?;
        // rho(R) = rot(2 pi / 3) against transport exp(-l (0.3 I + 0.4 z J)); the
        // circle at z = 1 closes at l = 1, the one at z = -1 at l = 2
        let z = if o.l < 1.5 { 1.0 } else { -1.0 };
        let want = 1.5 * (-0.3 * o.l).exp() * 2.0 * (2.0 * std::f64::consts::PI / 3.0 - 0.4 * o.l * z).cos();
        closed = closed.max((f0 - want).abs());
        for _ in 0..3 {
            let s = rng.gen_range(0.0..3.0);
            let moved = e(time_shift(&sys, &o, s))?;
            drift = drift.max((e(trace::fiber_trace(&sys, &moved, 2))? - f0).abs());
        }
    }
    ensure(drift <= 1e-7, || format!("fibre trace moves by {drift:e} along curves"))?;
    ensure(closed <= 1e-7, || format!("fibre trace misses the closed form by {closed:e}"))?;

    let mut scalar = cfg.clone();
    scalar.bundle.rank = 1;
    scalar.bundle.generator = "0".into();
    scalar.bundle.endomorphism = "1".into();
    scalar.bundle.fiber_actions = vec!["1".into(); cfg.group.generators.len()];
    let (ssys, _) = system(&scalar)?;
    let spec = cfg.assemble_spec();
    let with_bundle = e(assemble(&sys, &g, &spec))?;
    let without = e(assemble(&ssys, &g, &spec))?;
    ensure(with_bundle.comb.atoms.len() == without.comb.atoms.len(), || "atom counts differ".into())?;
    let mut worst: f64 = 0.0;
    for (a, b) in with_bundle.comb.atoms.iter().zip(&without.comb.atoms) {
        let mut predicted = 0.0;
        for (ca, cb) in a.contributors.iter().zip(&b.contributors) {
            let (ra, rb) = (&with_bundle.orbits[ca.orbit], &without.orbits[cb.orbit]);
            ensure((ra.l - rb.l).abs() < 1e-9 && ra.rep == rb.rep, || "contributors differ".into())?;
            predicted += cb.weight * ra.fiber_trace;
        }
        worst = worst.max((a.weight - predicted).abs() / predicted.abs().max(1.0));
    }
    ensure(worst <= 1e-8, || format!("bundle comb differs from scalar comb x fibre trace by {worst:e}"))?;
    Ok(format!("t-drift {drift:.1e}, closed form {closed:.1e}, factorisation {worst:.1e}"))
}

fn nondegeneracy() -> Check {
    let cfg = model("suspension");
    let (sys, _) = system(&cfg)?;
    let mut worst: f64 = 0.0;
    let mut count = 0;
    for n in 1..=3i64 {
        let g = GroupElt::Lattice(vec![0, -n]);
        let w = e(Window::new(n as f64 - 0.5, n as f64 + 0.5))?;
        let seeds = SeedSpec {
            per_axis: 16,
            ..SeedSpec::default()
        };
        for o in e(find_orbits(&sys, &g, w, &seeds))? {
            let up = e(poincare(&sys, &o, DEFAULT_DEGENERACY))?.det_one_minus_p;
            let (_, d) = circle_map_iterate(0.1, o.m0[0], n as u32);
            worst = worst.max((up - (1.0 - d)).abs());
            count += 1;
        }
    }
    let cat = model("catmap");
    let (csys, cg) = system(&cat)?;
    for o in all_orbits(&csys, &cg, &cat)? {
        let up = e(poincare(&csys, &o, DEFAULT_DEGENERACY))?.det_one_minus_p;
        let n = o.l.round() as u32;
        worst = worst.max((up.abs() - cat_det(n) as f64).abs());
        count += 1;
    }
    ensure(count > 0, || "no curves found".into())?;
    ensure(worst <= 1e-8, || format!("upstairs and downstairs determinants differ by {worst:e}"))?;
    Ok(format!("{count} curves, worst |det upstairs - det downstairs| = {worst:.1e}"))
}

fn hygiene() -> Check {
    // variational Jacobian against central differences
    let cfg = model("dihedral");
    let (sys, _) = system(&cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut jac: f64 = 0.0;
    for _ in 0..5 {
        let m = DVector::from_iterator(4, (0..4).map(|_| rng.gen_range(-1.0..1.0)));
        let t = 0.7;
        let (_, j) = e(sys.flow_with_jacobian(&m, t))?;
        let h = 1e-5;
        let mut fd = DMatrix::zeros(4, 4);
        for k in 0..4 {
            let mut p = m.clone();
            let mut q = m.clone();
            p[k] += h;
            q[k] -= h;
            let col = (e(sys.flow(&p, t))? - e(sys.flow(&q, t))?) / (2.0 * h);
            fd.set_column(k, &col);
        }
        jac = jac.max((j - fd).amax());
    }
    ensure(jac <= 1e-5, || format!("Jacobian differs from finite differences by {jac:e}"))?;

    // partition of unity
    let mut pou: f64 = 0.0;
    for name in ["circle", "suspension", "dihedral"] {
        let c = model(name);
        let alt = c.group.window_alt.clone().expect("second window");
        let s = e(c.build_system_with_window(&alt))?;
        let elements = s.group.elements_within(8);
        for m in s.chart.sample_box.grid(&vec![9; s.dim()]) {
            let total: f64 = elements.iter().map(|x| s.cutoff.eval(&s.group.act(x, &m))).sum();
            pou = pou.max((total - 1.0).abs());
        }
    }
    let t = model("translation");
    let (ts, _) = system(&t)?;
    if let CutoffFunction::Line { .. } = ts.cutoff {
        for k in 0..9 {
            let m = -2.0 + 0.5 * k as f64;
            let total = quad::integrate(|s| ts.cutoff.eval(&DVector::from_element(1, m + s)), -4.0 - m, 4.0 - m, 1e-14, 1e-13);
            pou = pou.max((total - 1.0).abs());
        }
    }
    ensure(pou <= 1e-10, || format!("partition of unity residual {pou:e}"))?;

    // determinism of every artifact
    let root = std::env::temp_dir().join(format!("equitrace-acceptance-{}", std::process::id()));
    let mut files = 0;
    for name in ["suspension", "dihedral"] {
        let c = model(name);
        let dirs: Vec<PathBuf> = (0..2).map(|i| root.join(format!("{name}-{i}"))).collect();
        for d in &dirs {
            e(run(Command::All, &c, d))?;
        }
        for f in ["orbits.csv", "trace.json", "verify.json", "pairing-curve.csv"] {
            let a = std::fs::read(dirs[0].join(f)).map_err(|e| e.to_string())?;
            let b = std::fs::read(dirs[1].join(f)).map_err(|e| e.to_string())?;
            ensure(a == b, || format!("{name}/{f} differs between runs"))?;
            files += 1;
        }
    }
    let _ = std::fs::remove_dir_all(&root);
    Ok(format!("Jacobian {jac:.1e}, partition of unity {pou:.1e}, {files} artifacts byte-identical"))
}

fn main() {
    let criteria: Vec<(u32, &str, Option<Duration>, fn() -> Check)> = vec![
        (1, "translation comb", Some(Duration::from_secs(5)), translation_comb),
        (2, "classical limit on the cat map", Some(Duration::from_secs(120)), catmap_limit),
        (3, "covering decomposition", Some(Duration::from_secs(60)), covering),
        (4, "cutoff independence", None, chi_independence),
        (5, "representative and conjugation invariance", None, invariance),
        (6, "fibre traces and scalar factorisation", None, fibre_traces),
        (7, "nondegeneracy across the cover", None, nondegeneracy),
        (8, "numerical hygiene", None, hygiene),
    ];
    let mut failed = 0;
    for (id, title, budget, check) in criteria {
        let start = Instant::now();
        let result = check();
        let took = start.elapsed();
        let over = budget.filter(|b| took > *b);
        let (status, detail) = match (&result, over) {
            (Ok(d), None) => ("PASS", d.clone()),
            (Ok(d), Some(b)) => ("FAIL", format!("{d}; over the {} s budget", b.as_secs())),
            (Err(d), _) => ("FAIL", d.clone()),
        };
        if status == "FAIL" {
            failed += 1;
        }
        println!("[{status}] {id}. {title}: {detail} ({:.2} s)", took.as_secs_f64());
    }
    if failed > 0 {
        println!("{failed} criterion/criteria failed");
        std::process::exit(1);
    }
}
