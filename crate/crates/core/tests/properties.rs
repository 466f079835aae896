use std::path::Path;

use nalgebra::DVector;
use proptest::prelude::*;

use equitrace::config::{parse_config, RunConfig};
use equitrace::expr;
use equitrace::geometry::GroupElt;
use equitrace::oracle::circle_map_iterate;
use equitrace::orbits::Window;
use equitrace::trace::{pair, pair_with, Atom, DeltaComb, TestFunction};

fn model_text(name: &str) -> String {
    std::fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("models").join(format!("{name}.cfg"))).unwrap()
}

fn model(name: &str) -> RunConfig {
    parse_config(&model_text(name)).unwrap()
}

fn comb(atoms: &[(f64, f64)]) -> DeltaComb {
    DeltaComb {
        window: Window::new(0.1, 10.0).unwrap(),
        atoms: atoms
            .iter()
            .map(|&(l, weight)| Atom {
                l,
                weight,
                contributors: vec![],
            })
            .collect(),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn pairing_is_linear_and_bounded(
        atoms in prop::collection::vec((0.2f64..9.0, -5.0f64..5.0), 0..8),
        c in 0.5f64..9.0,
        frac in 0.05f64..1.0,
        a in -3.0f64..3.0,
        b in -3.0f64..3.0,
    ) {
        // widths keep the support on positive periods
        let w = frac * c / 7.0;
        let k = comb(&atoms);
        let f = TestFunction::gaussian(c, w).unwrap();
        let g = TestFunction::bump(c, w).unwrap();
        let mixed = pair_with(&k, |t| a * f.eval(t) + b * g.eval(t));
        prop_assert!((mixed - (a * pair(&k, &f) + b * pair(&k, &g))).abs() <= 1e-12 * (1.0 + mixed.abs()));
        let mass: f64 = atoms.iter().map(|x| x.1.abs()).sum();
        prop_assert!(pair(&k, &f).abs() <= mass + 1e-12);
    }

    #[test]
    fn single_atom_samples_the_test_function(l in 0.2f64..9.0, c in 0.5f64..9.0, frac in 0.05f64..1.0) {
        let w = frac * c / 7.0;
        let f = TestFunction::gaussian(c, w).unwrap();
        prop_assert_eq!(pair(&comb(&[(l, 1.0)]), &f), f.eval(l));
    }

    #[test]
    fn config_round_trips(seed in 0u64..1_000_000, g in 0.1f64..2.5, c in 0.4f64..2.5, w in 0.01f64..0.06) {
        let mut cfg = model("translation");
        cfg.seed = seed;
        cfg.group.g = format!("{g:?}");
        cfg.trace.psi = vec![TestFunction::gaussian(c, w).unwrap()];
        let again = parse_config(&cfg.to_text()).unwrap();
        prop_assert_eq!(again.entries(), cfg.entries());
        prop_assert_eq!(again.to_json(), cfg.to_json());
    }

    #[test]
    fn lattice_action_is_a_homomorphism(
        a in prop::collection::vec(-2i64..=2, 2),
        b in prop::collection::vec(-2i64..=2, 2),
        x in 0.0f64..1.0,
        s in 0.0f64..1.0,
    ) {
        let sys = model("suspension").build_system().unwrap();
        let (ga, gb) = (GroupElt::Lattice(a), GroupElt::Lattice(b));
        let m = DVector::from_vec(vec![x, s]);
        let left = sys.group.act(&sys.group.compose(&ga, &gb), &m);
        let right = sys.group.act(&ga, &sys.group.act(&gb, &m));
        prop_assert!((left - right).amax() <= 1e-9);
        let back = sys.group.act(&sys.group.inverse(&ga), &sys.group.act(&ga, &m));
        prop_assert!((back - m).amax() <= 1e-9);
    }

    #[test]
    fn cutoff_partitions_unity(x in -2.0f64..3.0, s in -2.0f64..3.0) {
        let sys = model("suspension").build_system().unwrap();
        let m = DVector::from_vec(vec![x, s]);
        let total: f64 = sys.group.elements_within(10).iter().map(|e| sys.cutoff.eval(&sys.group.act(e, &m))).sum();
        prop_assert!((total - 1.0).abs() <= 1e-10);
    }

    #[test]
    fn circle_map_chain_rule(x in 0.0f64..1.0, n in 1u32..4, k in 1u32..4) {
        let (y, dn) = circle_map_iterate(0.1, x, n);
        let (z, dk) = circle_map_iterate(0.1, y, k);
        let (w, dnk) = circle_map_iterate(0.1, x, n + k);
        prop_assert!((z - w).abs() <= 1e-12);
        prop_assert!((dk * dn - dnk).abs() <= 1e-10 * dnk.abs());
    }

    #[test]
    fn symbolic_derivative_matches_differences(x in -2.0f64..2.0, y in -2.0f64..2.0) {
        let labels = vec!["x".to_string(), "y".to_string()];
        let e = expr::parse("x*(1 - x^2 - y^2)/(1 + x^2 + y^2) + sin(x*y) - exp(-y)", &labels).unwrap();
        let h = 1e-6;
        for (var, p, q) in [(0, [x + h, y], [x - h, y]), (1, [x, y + h], [x, y - h])] {
            let fd = (e.eval(&p) - e.eval(&q)) / (2.0 * h);
            let d = e.derivative(var).eval(&[x, y]);
            prop_assert!((d - fd).abs() <= 1e-6 * (1.0 + d.abs()));
        }
    }
}
