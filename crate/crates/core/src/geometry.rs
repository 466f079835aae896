//! Chart, symmetry groups, deck groups of compact quotients, and cutoff functions.
//!
//! The cover `M` is a single global chart `R^n`. A [`GroupModel`] acts on it
//! properly; a compact quotient, when one is modelled, is described by a
//! [`QuotientDeck`] of lattice translations plus one suspension generator.

use std::cmp::Ordering;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::quad;

pub type Point = DVector<f64>;

const TWO_PI: f64 = 2.0 * std::f64::consts::PI;

/// Sampling region of the chart, one `[lo, hi]` interval per coordinate.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleBox {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl SampleBox {
    pub fn new(lo: Vec<f64>, hi: Vec<f64>) -> Result<SampleBox> {
        if lo.len() != hi.len() || lo.iter().zip(&hi).any(|(a, b)| !(a < b)) {
            return Err(Error::Model(format!("bad sample box {lo:?}..{hi:?}")));
        }
        Ok(SampleBox { lo, hi })
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    /// Tensor grid with `counts[i]` cell-centred points along axis `i`.
    pub fn grid(&self, counts: &[usize]) -> Vec<Point> {
        let n = self.dim();
        let mut out = Vec::new();
        let total: usize = counts.iter().product();
        for flat in 0..total {
            let mut rem = flat;
            let mut p = DVector::zeros(n);
            for i in (0..n).rev() {
                let k = rem % counts[i];
                rem /= counts[i];
                let h = (self.hi[i] - self.lo[i]) / counts[i] as f64;
                p[i] = self.lo[i] + (k as f64 + 0.5) * h;
            }
            out.push(p);
        }
        out
    }

    pub fn sample<R: rand::Rng>(&self, rng: &mut R) -> Point {
        DVector::from_iterator(
            self.dim(),
            self.lo.iter().zip(&self.hi).map(|(a, b)| rng.gen_range(*a..*b)),
        )
    }
}

#[derive(Clone, Debug)]
pub struct CoverChart {
    pub dim: usize,
    pub labels: Vec<String>,
    pub sample_box: SampleBox,
    pub quotient: Option<QuotientDeck>,
}

impl CoverChart {
    pub fn new(
        labels: Vec<String>,
        sample_box: SampleBox,
        quotient: Option<QuotientDeck>,
    ) -> Result<CoverChart> {
        let dim = labels.len();
        if dim == 0 {
            return Err(Error::Model("chart dimension must be at least 1".into()));
        }
        if sample_box.dim() != dim {
            return Err(Error::Model("sample box dimension differs from chart".into()));
        }
        if let Some(q) = &quotient {
            if q.dim != dim {
                return Err(Error::Model("quotient deck dimension differs from chart".into()));
            }
        }
        Ok(CoverChart {
            dim,
            labels,
            sample_box,
            quotient,
        })
    }

    pub fn check_point(&self, m: &Point) -> Result<()> {
        if m.len() != self.dim || m.iter().any(|v| !v.is_finite()) {
            return Err(Error::Model(format!("invalid point {:?}", m.as_slice())));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// action maps

/// A diffeomorphism of `R^n` used as a group or deck generator.
#[derive(Clone, Debug, PartialEq)]
pub enum MapSpec {
    /// `m -> L m + b`.
    Affine { linear: DMatrix<f64>, offset: Point },
    /// Coordinate `coord` goes to `x + a sin(2 pi x)`, then everything is shifted.
    /// Commutes with integer translations of that coordinate.
    CircleLift {
        coord: usize,
        amplitude: f64,
        shift: Point,
    },
}

impl MapSpec {
    pub fn dim(&self) -> usize {
        match self {
            MapSpec::Affine { offset, .. } => offset.len(),
            MapSpec::CircleLift { shift, .. } => shift.len(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            MapSpec::Affine { linear, offset } => {
                if linear.nrows() != offset.len() || linear.ncols() != offset.len() {
                    return Err(Error::Model("affine map shape mismatch".into()));
                }
                if offset.len() > 0 && linear.clone().lu().determinant().abs() < 1e-12 {
                    return Err(Error::Model("affine map is not invertible".into()));
                }
            }
            MapSpec::CircleLift {
                coord,
                amplitude,
                shift,
            } => {
                if *coord >= shift.len() {
                    return Err(Error::Model("circle lift coordinate out of range".into()));
                }
                if TWO_PI * amplitude.abs() >= 1.0 {
                    return Err(Error::Model(
                        "circle lift amplitude must satisfy 2 pi |a| < 1".into(),
                    ));
                }
            }
        }
        Ok(())
    }

    pub fn apply(&self, m: &Point, inverse: bool) -> Point {
        match self {
            MapSpec::Affine { linear, offset } => {
                if inverse {
                    let lu = linear.clone().lu();
                    lu.solve(&(m - offset)).expect("validated invertible")
                } else {
                    linear * m + offset
                }
            }
            MapSpec::CircleLift {
                coord,
                amplitude,
                shift,
            } => {
                if inverse {
                    let mut y = m - shift;
                    y[*coord] = invert_circle_lift(y[*coord], *amplitude);
                    y
                } else {
                    let mut y = m.clone();
                    let x = y[*coord];
                    y[*coord] = x + amplitude * (TWO_PI * x).sin();
                    y + shift
                }
            }
        }
    }

    pub fn jacobian(&self, m: &Point, inverse: bool) -> DMatrix<f64> {
        match self {
            MapSpec::Affine { linear, .. } => {
                if inverse {
                    linear.clone().try_inverse().expect("validated invertible")
                } else {
                    linear.clone()
                }
            }
            MapSpec::CircleLift {
                coord, amplitude, ..
            } => {
                let n = m.len();
                let mut j = DMatrix::identity(n, n);
                // derivative is evaluated at the preimage coordinate
                let x = if inverse {
                    self.apply(m, true)[*coord]
                } else {
                    m[*coord]
                };
                let d = 1.0 + amplitude * TWO_PI * (TWO_PI * x).cos();
                j[(*coord, *coord)] = if inverse { 1.0 / d } else { d };
                j
            }
        }
    }

    /// Upper bound on the Lipschitz constant of the map (or its inverse).
    pub fn lipschitz(&self, inverse: bool) -> f64 {
        match self {
            MapSpec::Affine { linear, .. } => {
                if inverse {
                    linear
                        .clone()
                        .try_inverse()
                        .map(|l| l.norm())
                        .unwrap_or(f64::INFINITY)
                } else {
                    linear.norm()
                }
            }
            MapSpec::CircleLift { amplitude, .. } => {
                let k = TWO_PI * amplitude.abs();
                if inverse {
                    1.0 / (1.0 - k)
                } else {
                    1.0 + k
                }
            }
        }
    }

    fn affine_parts(&self) -> Option<(&DMatrix<f64>, &Point)> {
        match self {
            MapSpec::Affine { linear, offset } => Some((linear, offset)),
            _ => None,
        }
    }
}

/// Solve `x + a sin(2 pi x) = y` (monotone for `2 pi |a| < 1`).
fn invert_circle_lift(y: f64, a: f64) -> f64 {
    if a == 0.0 {
        return y;
    }
    let (mut lo, mut hi) = (y - a.abs(), y + a.abs());
    let mut x = y;
    for _ in 0..100 {
        let f = x + a * (TWO_PI * x).sin() - y;
        if f.abs() <= 1e-16 * (1.0 + y.abs()) {
            return x;
        }
        if f > 0.0 {
            hi = x;
        } else {
            lo = x;
        }
        let d = 1.0 + a * TWO_PI * (TWO_PI * x).cos();
        let next = x - f / d;
        x = if next > lo && next < hi {
            next
        } else {
            0.5 * (lo + hi)
        };
        if hi - lo < 4.0 * f64::EPSILON * (1.0 + y.abs()) {
            break;
        }
    }
    x
}

// ---------------------------------------------------------------------------
// groups

#[derive(Clone, Debug, PartialEq)]
pub enum GroupElt {
    Identity,
    Lattice(Vec<i64>),
    Finite(usize),
    Real(f64),
}

impl GroupElt {
    /// Payload as written in configuration files and reports.
    pub fn payload(&self) -> String {
        match self {
            GroupElt::Identity => "e".to_string(),
            GroupElt::Lattice(v) => v
                .iter()
                .map(|k| k.to_string())
                .collect::<Vec<_>>()
                .join(","),
            GroupElt::Finite(i) => i.to_string(),
            GroupElt::Real(s) => format!("{s}"),
        }
    }

    /// Lexicographic order in payload.
    pub fn lex_cmp(&self, other: &GroupElt) -> Ordering {
        match (self, other) {
            (GroupElt::Lattice(a), GroupElt::Lattice(b)) => a.cmp(b),
            (GroupElt::Finite(a), GroupElt::Finite(b)) => a.cmp(b),
            (GroupElt::Real(a), GroupElt::Real(b)) => a.total_cmp(b),
            _ => Ordering::Equal,
        }
    }
}

#[derive(Clone, Debug)]
pub struct FiniteElement {
    pub linear: DMatrix<f64>,
    pub offset: Point,
    /// Generator indices in product order: `g = s[0] * s[1] * ...`.
    pub word: Vec<usize>,
}

#[derive(Clone, Debug)]
pub enum GroupKind {
    Trivial,
    FreeAbelian {
        generators: Vec<MapSpec>,
    },
    Finite {
        generators: Vec<MapSpec>,
        elements: Vec<FiniteElement>,
        table: Vec<Vec<usize>>,
        inverses: Vec<usize>,
    },
    TranslationLine {
        direction: Point,
    },
}

/// Haar measure convention attached to a group model.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Haar {
    Counting,
    Lebesgue,
}

/// One generator application: `(generator index, inverse?)`.
pub type Step = (usize, bool);

#[derive(Clone, Debug)]
pub struct GroupModel {
    pub dim: usize,
    pub kind: GroupKind,
}

const MAX_FINITE_ORDER: usize = 4096;

impl GroupModel {
    pub fn trivial(dim: usize) -> GroupModel {
        GroupModel {
            dim,
            kind: GroupKind::Trivial,
        }
    }

    pub fn translation_line(direction: Point) -> Result<GroupModel> {
        if direction.norm() == 0.0 {
            return Err(Error::Model("translation direction must be nonzero".into()));
        }
        Ok(GroupModel {
            dim: direction.len(),
            kind: GroupKind::TranslationLine { direction },
        })
    }

    pub fn free_abelian(dim: usize, generators: Vec<MapSpec>) -> Result<GroupModel> {
        if generators.is_empty() {
            return Err(Error::Model("free abelian group needs generators".into()));
        }
        for g in &generators {
            g.validate()?;
            if g.dim() != dim {
                return Err(Error::Model("generator dimension differs from chart".into()));
            }
        }
        Ok(GroupModel {
            dim,
            kind: GroupKind::FreeAbelian { generators },
        })
    }

    /// Close the affine generators under composition and tabulate the group.
    pub fn finite(dim: usize, generators: Vec<MapSpec>) -> Result<GroupModel> {
        let mut gens = Vec::new();
        for g in &generators {
            g.validate()?;
            if g.dim() != dim {
                return Err(Error::Model("generator dimension differs from chart".into()));
            }
            let (l, b) = g
                .affine_parts()
                .ok_or_else(|| Error::Model("finite group generators must be affine".into()))?;
            gens.push((l.clone(), b.clone()));
        }
        let same = |a: &(DMatrix<f64>, Point), b: &FiniteElement| {
            (&a.0 - &b.linear).amax() < 1e-9 && (&a.1 - &b.offset).amax() < 1e-9
        };
        let mut elements = vec![FiniteElement {
            linear: DMatrix::identity(dim, dim),
            offset: DVector::zeros(dim),
            word: vec![],
        }];
        let mut head = 0;
        while head < elements.len() {
            for (gi, (gl, gb)) in gens.iter().enumerate() {
                // e * s : apply s first, then e
                let e = &elements[head];
                let cand = (&e.linear * gl, &e.linear * gb + &e.offset);
                if !elements.iter().any(|x| same(&cand, x)) {
                    let mut word = e.word.clone();
                    word.push(gi);
                    elements.push(FiniteElement {
                        linear: cand.0,
                        offset: cand.1,
                        word,
                    });
                    if elements.len() > MAX_FINITE_ORDER {
                        return Err(Error::Model("finite group generators do not close".into()));
                    }
                }
            }
            head += 1;
        }
        let n = elements.len();
        let mut table = vec![vec![0usize; n]; n];
        for i in 0..n {
            for j in 0..n {
                let a = &elements[i];
                let b = &elements[j];
                let prod = (&a.linear * &b.linear, &a.linear * &b.offset + &a.offset);
                table[i][j] = elements
                    .iter()
                    .position(|x| same(&prod, x))
                    .ok_or_else(|| Error::Model("finite group table is not closed".into()))?;
            }
        }
        let inverses = (0..n)
            .map(|i| table[i].iter().position(|&k| k == 0).expect("group has inverses"))
            .collect();
        Ok(GroupModel {
            dim,
            kind: GroupKind::Finite {
                generators,
                elements,
                table,
                inverses,
            },
        })
    }

    pub fn haar(&self) -> Haar {
        match self.kind {
            GroupKind::TranslationLine { .. } => Haar::Lebesgue,
            _ => Haar::Counting,
        }
    }

    pub fn kind_name(&self) -> &'static str {
        match self.kind {
            GroupKind::Trivial => "trivial",
            GroupKind::FreeAbelian { .. } => "free-abelian",
            GroupKind::Finite { .. } => "finite",
            GroupKind::TranslationLine { .. } => "translation-line",
        }
    }

    pub fn generators(&self) -> &[MapSpec] {
        match &self.kind {
            GroupKind::FreeAbelian { generators } | GroupKind::Finite { generators, .. } => {
                generators
            }
            _ => &[],
        }
    }

    pub fn is_abelian(&self) -> bool {
        match &self.kind {
            GroupKind::Finite { table, .. } => {
                let n = table.len();
                (0..n).all(|i| (0..n).all(|j| table[i][j] == table[j][i]))
            }
            _ => true,
        }
    }

    pub fn order(&self) -> Option<usize> {
        match &self.kind {
            GroupKind::Trivial => Some(1),
            GroupKind::Finite { elements, .. } => Some(elements.len()),
            _ => None,
        }
    }

    pub fn identity(&self) -> GroupElt {
        match &self.kind {
            GroupKind::Trivial => GroupElt::Identity,
            GroupKind::FreeAbelian { generators } => GroupElt::Lattice(vec![0; generators.len()]),
            GroupKind::Finite { .. } => GroupElt::Finite(0),
            GroupKind::TranslationLine { .. } => GroupElt::Real(0.0),
        }
    }

    pub fn is_identity(&self, g: &GroupElt) -> bool {
        match g {
            GroupElt::Identity => true,
            GroupElt::Lattice(v) => v.iter().all(|&k| k == 0),
            GroupElt::Finite(i) => *i == 0,
            GroupElt::Real(s) => *s == 0.0,
        }
    }

    pub fn parse_elt(&self, payload: &str) -> Result<GroupElt> {
        let bad = |why: &str| Error::Validation {
            key: "g".into(),
            reason: format!("`{payload}`: {why}"),
        };
        let p = payload.trim();
        match &self.kind {
            GroupKind::Trivial => match p {
                "e" | "" | "0" => Ok(GroupElt::Identity),
                _ => Err(bad("trivial group has only `e`")),
            },
            GroupKind::FreeAbelian { generators } => {
                if p == "e" {
                    return Ok(self.identity());
                }
                let v: std::result::Result<Vec<i64>, _> =
                    p.split(',').map(|s| s.trim().parse::<i64>()).collect();
                let v = v.map_err(|_| bad("expected comma-separated integers"))?;
                if v.len() != generators.len() {
                    return Err(bad("wrong number of exponents"));
                }
                Ok(GroupElt::Lattice(v))
            }
            GroupKind::Finite { elements, .. } => {
                if p == "e" {
                    return Ok(GroupElt::Finite(0));
                }
                let i: usize = p.parse().map_err(|_| bad("expected an element index"))?;
                if i >= elements.len() {
                    return Err(bad("element index out of range"));
                }
                Ok(GroupElt::Finite(i))
            }
            GroupKind::TranslationLine { .. } => {
                if p == "e" {
                    return Ok(GroupElt::Real(0.0));
                }
                let s: f64 = p.parse().map_err(|_| bad("expected a real number"))?;
                if !s.is_finite() {
                    return Err(bad("not finite"));
                }
                Ok(GroupElt::Real(s))
            }
        }
    }

    pub fn compose(&self, a: &GroupElt, b: &GroupElt) -> GroupElt {
        match (&self.kind, a, b) {
            (GroupKind::FreeAbelian { .. }, GroupElt::Lattice(x), GroupElt::Lattice(y)) => {
                GroupElt::Lattice(x.iter().zip(y).map(|(p, q)| p + q).collect())
            }
            (GroupKind::Finite { table, .. }, GroupElt::Finite(i), GroupElt::Finite(j)) => {
                GroupElt::Finite(table[*i][*j])
            }
            (GroupKind::TranslationLine { .. }, GroupElt::Real(s), GroupElt::Real(t)) => {
                GroupElt::Real(s + t)
            }
            _ => GroupElt::Identity,
        }
    }

    pub fn inverse(&self, a: &GroupElt) -> GroupElt {
        match (&self.kind, a) {
            (_, GroupElt::Lattice(x)) => GroupElt::Lattice(x.iter().map(|k| -k).collect()),
            (GroupKind::Finite { inverses, .. }, GroupElt::Finite(i)) => {
                GroupElt::Finite(inverses[*i])
            }
            (_, GroupElt::Real(s)) => GroupElt::Real(-s),
            _ => GroupElt::Identity,
        }
    }

    pub fn conjugate(&self, h: &GroupElt, g: &GroupElt) -> GroupElt {
        self.compose(&self.compose(h, g), &self.inverse(h))
    }

    /// Generator applications realising `g`, in the order they act on a point.
    pub fn steps(&self, g: &GroupElt) -> Vec<Step> {
        match (&self.kind, g) {
            (GroupKind::FreeAbelian { .. }, GroupElt::Lattice(v)) => {
                let mut out = Vec::new();
                for (i, &k) in v.iter().enumerate().rev() {
                    for _ in 0..k.unsigned_abs() {
                        out.push((i, k < 0));
                    }
                }
                out
            }
            (GroupKind::Finite { elements, .. }, GroupElt::Finite(i)) => {
                elements[*i].word.iter().rev().map(|&s| (s, false)).collect()
            }
            _ => Vec::new(),
        }
    }

    pub fn act(&self, g: &GroupElt, m: &Point) -> Point {
        match (&self.kind, g) {
            (GroupKind::Trivial, _) => m.clone(),
            (GroupKind::TranslationLine { direction }, GroupElt::Real(s)) => m + direction * *s,
            (GroupKind::Finite { elements, .. }, GroupElt::Finite(i)) => {
                let e = &elements[*i];
                &e.linear * m + &e.offset
            }
            (GroupKind::FreeAbelian { generators }, GroupElt::Lattice(_)) => {
                let mut y = m.clone();
                for (i, inv) in self.steps(g) {
                    y = generators[i].apply(&y, inv);
                }
                y
            }
            _ => m.clone(),
        }
    }

    pub fn act_jacobian(&self, g: &GroupElt, m: &Point) -> DMatrix<f64> {
        let n = self.dim;
        match (&self.kind, g) {
            (GroupKind::Finite { elements, .. }, GroupElt::Finite(i)) => elements[*i].linear.clone(),
            (GroupKind::FreeAbelian { generators }, GroupElt::Lattice(_)) => {
                let mut y = m.clone();
                let mut j = DMatrix::identity(n, n);
                for (i, inv) in self.steps(g) {
                    j = generators[i].jacobian(&y, inv) * j;
                    y = generators[i].apply(&y, inv);
                }
                j
            }
            _ => DMatrix::identity(n, n),
        }
    }

    pub fn lipschitz(&self, g: &GroupElt) -> f64 {
        match (&self.kind, g) {
            (GroupKind::Finite { elements, .. }, GroupElt::Finite(i)) => elements[*i].linear.norm(),
            (GroupKind::FreeAbelian { generators }, GroupElt::Lattice(_)) => self
                .steps(g)
                .iter()
                .map(|&(i, inv)| generators[i].lipschitz(inv))
                .product(),
            _ => 1.0,
        }
    }

    pub fn word_length(&self, g: &GroupElt) -> usize {
        match g {
            GroupElt::Lattice(v) => v.iter().map(|k| k.unsigned_abs() as usize).sum(),
            GroupElt::Finite(i) => match &self.kind {
                GroupKind::Finite { elements, .. } => elements[*i].word.len(),
                _ => 0,
            },
            _ => 0,
        }
    }

    /// Order of `g`, `None` when infinite.
    pub fn element_order(&self, g: &GroupElt) -> Option<usize> {
        if self.is_identity(g) {
            return Some(1);
        }
        match (&self.kind, g) {
            (GroupKind::Finite { table, .. }, GroupElt::Finite(i)) => {
                let mut k = 1;
                let mut cur = *i;
                while cur != 0 {
                    cur = table[cur][*i];
                    k += 1;
                }
                Some(k)
            }
            _ => None,
        }
    }

    /// All elements of word length at most `radius` (all elements for finite
    /// groups), in lexicographic payload order.
    pub fn elements_within(&self, radius: usize) -> Vec<GroupElt> {
        match &self.kind {
            GroupKind::Trivial => vec![GroupElt::Identity],
            GroupKind::TranslationLine { .. } => vec![GroupElt::Real(0.0)],
            GroupKind::Finite { elements, .. } => {
                (0..elements.len()).map(GroupElt::Finite).collect()
            }
            GroupKind::FreeAbelian { generators } => {
                let k = generators.len();
                let r = radius as i64;
                let mut out = Vec::new();
                let mut v = vec![-r; k];
                loop {
                    if v.iter().map(|x| x.abs()).sum::<i64>() <= r {
                        out.push(GroupElt::Lattice(v.clone()));
                    }
                    let mut i = k;
                    loop {
                        if i == 0 {
                            return out;
                        }
                        i -= 1;
                        if v[i] < r {
                            v[i] += 1;
                            for x in v.iter_mut().skip(i + 1) {
                                *x = -r;
                            }
                            break;
                        }
                    }
                }
            }
        }
    }

    pub fn centralizer(&self, g: &GroupElt) -> Vec<GroupElt> {
        match (&self.kind, g) {
            (GroupKind::Finite { table, .. }, GroupElt::Finite(i)) => (0..table.len())
                .filter(|&z| table[z][*i] == table[*i][z])
                .map(GroupElt::Finite)
                .collect(),
            _ => vec![self.identity()],
        }
    }

    /// Representatives `h` of the cosets `hZ` of the centraliser of `g`.
    /// Abelian and continuous kinds give `[e]`; finite kinds ignore `radius`.
    pub fn coset_representatives(&self, g: &GroupElt, radius: usize) -> Vec<GroupElt> {
        let _ = radius;
        match (&self.kind, g) {
            (GroupKind::Finite { table, .. }, GroupElt::Finite(_)) => {
                let z: Vec<usize> = self
                    .centralizer(g)
                    .into_iter()
                    .map(|e| match e {
                        GroupElt::Finite(i) => i,
                        _ => unreachable!(),
                    })
                    .collect();
                let n = table.len();
                let mut covered = vec![false; n];
                let mut reps = Vec::new();
                for h in 0..n {
                    if covered[h] {
                        continue;
                    }
                    reps.push(GroupElt::Finite(h));
                    for &zz in &z {
                        covered[table[h][zz]] = true;
                    }
                }
                reps
            }
            _ => vec![self.identity()],
        }
    }
}

// ---------------------------------------------------------------------------
// deck group of a compact quotient

/// Deck element `(shift k, turns j)` acting by `(v, s) -> (F^j(v) + k, s - j)`,
/// where `v` are the first `n - 1` coordinates and `F` is the base map.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct DeckElt {
    pub shift: Vec<i64>,
    pub turns: i64,
}

impl DeckElt {
    pub fn payload(&self) -> String {
        let mut parts: Vec<String> = self.shift.iter().map(|k| k.to_string()).collect();
        parts.push(format!("t{}", self.turns));
        parts.join(",")
    }
}

/// Deck group of a mapping torus: unit translations of the fibre lattice
/// `Z^{n-1}` together with the suspension generator `(v, s) -> (F(v), s - 1)`.
/// The flow returning from `s = 0` to `s = 1` then realises `F` on the quotient.
#[derive(Clone, Debug)]
pub struct QuotientDeck {
    pub dim: usize,
    pub base: MapSpec,
    /// Integer matrix `M` with `F(v + k) = F(v) + M k`.
    pub lattice: Vec<Vec<i64>>,
    lattice_inv: Vec<Vec<i64>>,
}

fn imat_mul(a: &[Vec<i64>], b: &[Vec<i64>]) -> Vec<Vec<i64>> {
    let n = a.len();
    (0..n)
        .map(|i| (0..n).map(|j| (0..n).map(|k| a[i][k] * b[k][j]).sum()).collect())
        .collect()
}

fn imat_vec(a: &[Vec<i64>], v: &[i64]) -> Vec<i64> {
    a.iter()
        .map(|row| row.iter().zip(v).map(|(x, y)| x * y).sum())
        .collect()
}

fn imat_identity(n: usize) -> Vec<Vec<i64>> {
    (0..n)
        .map(|i| (0..n).map(|j| i64::from(i == j)).collect())
        .collect()
}

impl QuotientDeck {
    pub fn new(dim: usize, base: MapSpec) -> Result<QuotientDeck> {
        if dim == 0 || base.dim() != dim - 1 {
            return Err(Error::Model(
                "quotient base map must act on the first n - 1 coordinates".into(),
            ));
        }
        base.validate()?;
        let k = dim - 1;
        let lattice = match &base {
            MapSpec::Affine { linear, .. } => {
                let mut m = vec![vec![0i64; k]; k];
                for i in 0..k {
                    for j in 0..k {
                        let v = linear[(i, j)];
                        if (v - v.round()).abs() > 1e-12 {
                            return Err(Error::Model(
                                "quotient base map must preserve the integer lattice".into(),
                            ));
                        }
                        m[i][j] = v.round() as i64;
                    }
                }
                m
            }
            MapSpec::CircleLift { .. } => imat_identity(k),
        };
        let linv = if k == 0 {
            Vec::new()
        } else {
            let f = DMatrix::from_fn(k, k, |i, j| lattice[i][j] as f64);
            let inv = f
                .try_inverse()
                .ok_or_else(|| Error::Model("quotient lattice map is singular".into()))?;
            let r: Vec<Vec<i64>> = (0..k)
                .map(|i| (0..k).map(|j| inv[(i, j)].round() as i64).collect())
                .collect();
            if imat_mul(&lattice, &r) != imat_identity(k) {
                return Err(Error::Model("quotient lattice map is not unimodular".into()));
            }
            r
        };
        Ok(QuotientDeck {
            dim,
            base,
            lattice,
            lattice_inv: linv,
        })
    }

    pub fn fibre_dim(&self) -> usize {
        self.dim - 1
    }

    pub fn identity(&self) -> DeckElt {
        DeckElt {
            shift: vec![0; self.fibre_dim()],
            turns: 0,
        }
    }

    fn lattice_pow(&self, j: i64) -> Vec<Vec<i64>> {
        let base = if j >= 0 {
            &self.lattice
        } else {
            &self.lattice_inv
        };
        let mut out = imat_identity(self.fibre_dim());
        for _ in 0..j.unsigned_abs() {
            out = imat_mul(base, &out);
        }
        out
    }

    pub fn compose(&self, a: &DeckElt, b: &DeckElt) -> DeckElt {
        let mk = imat_vec(&self.lattice_pow(a.turns), &b.shift);
        DeckElt {
            shift: a.shift.iter().zip(&mk).map(|(x, y)| x + y).collect(),
            turns: a.turns + b.turns,
        }
    }

    pub fn inverse(&self, a: &DeckElt) -> DeckElt {
        let mk = imat_vec(&self.lattice_pow(-a.turns), &a.shift);
        DeckElt {
            shift: mk.iter().map(|x| -x).collect(),
            turns: -a.turns,
        }
    }

    fn base_power(&self, v: &Point, j: i64) -> Point {
        let mut y = v.clone();
        for _ in 0..j.unsigned_abs() {
            y = self.base.apply(&y, j < 0);
        }
        y
    }

    fn base_power_jacobian(&self, v: &Point, j: i64) -> DMatrix<f64> {
        let k = self.fibre_dim();
        let mut y = v.clone();
        let mut jac = DMatrix::identity(k, k);
        for _ in 0..j.unsigned_abs() {
            jac = self.base.jacobian(&y, j < 0) * jac;
            y = self.base.apply(&y, j < 0);
        }
        jac
    }

    pub fn act(&self, d: &DeckElt, m: &Point) -> Point {
        let k = self.fibre_dim();
        let v = Point::from_iterator(k, m.iter().take(k).copied());
        let fv = self.base_power(&v, d.turns);
        let mut out = m.clone();
        for i in 0..k {
            out[i] = fv[i] + d.shift[i] as f64;
        }
        out[k] = m[k] - d.turns as f64;
        out
    }

    pub fn act_jacobian(&self, d: &DeckElt, m: &Point) -> DMatrix<f64> {
        let k = self.fibre_dim();
        let v = Point::from_iterator(k, m.iter().take(k).copied());
        let jv = self.base_power_jacobian(&v, d.turns);
        let mut j = DMatrix::identity(self.dim, self.dim);
        j.view_mut((0, 0), (k, k)).copy_from(&jv);
        j
    }

    /// Deck element `d` with `d * source` closest to `target`.
    pub fn nearest(&self, source: &Point, target: &Point) -> DeckElt {
        let k = self.fibre_dim();
        let turns = (source[k] - target[k]).round() as i64;
        let v = Point::from_iterator(k, source.iter().take(k).copied());
        let fv = self.base_power(&v, turns);
        let shift = (0..k).map(|i| (target[i] - fv[i]).round() as i64).collect();
        DeckElt { shift, turns }
    }

    /// Reduce `m` into the fundamental domain `[0,1)^n`.
    pub fn fold(&self, m: &Point) -> (DeckElt, Point) {
        let k = self.fibre_dim();
        let turns = m[k].floor() as i64;
        let v = Point::from_iterator(k, m.iter().take(k).copied());
        let fv = self.base_power(&v, turns);
        let shift: Vec<i64> = (0..k).map(|i| -(fv[i].floor() as i64)).collect();
        let d = DeckElt { shift, turns };
        let y = self.act(&d, m);
        (d, y)
    }

    /// Distance from `a` to the deck orbit of `b` (nearest image).
    pub fn distance(&self, a: &Point, b: &Point) -> f64 {
        let d = self.nearest(b, a);
        (self.act(&d, b) - a).norm()
    }
}

// ---------------------------------------------------------------------------
// cutoff functions

/// `w(m) = exp(-1 / (1 - |m - c|^2 / r^2))` inside the ball, zero outside.
#[derive(Clone, Debug, PartialEq)]
pub struct Bump {
    pub center: Point,
    pub radius: f64,
}

impl Bump {
    #[inline]
    pub fn eval(&self, m: &Point) -> f64 {
        let q = (m - &self.center).norm_squared() / (self.radius * self.radius);
        bump_profile(q)
    }
}

#[inline]
pub fn bump_profile(q: f64) -> f64 {
    if q < 1.0 {
        (-1.0 / (1.0 - q)).exp()
    } else {
        0.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum WindowSpec {
    Constant,
    Bump { center: Vec<f64>, radius: f64 },
}

#[derive(Clone, Debug)]
pub enum CutoffFunction {
    /// `chi = 1 / |G|` for trivial or finite groups.
    Constant(f64),
    /// Pointwise quotient `w(m) / sum_x w(x m)` over a discrete group.
    Partition {
        bump: Bump,
        group: Arc<GroupModel>,
        neighbours: Vec<GroupElt>,
    },
    /// `w(m) / int_R w(m + s d) ds` for the translation line.
    Line { bump: Bump, direction: Point },
}

/// Word radius used to enumerate elements whose translates may meet the window.
pub const DEFAULT_PROPERNESS_RADIUS: usize = 6;

impl CutoffFunction {
    pub fn eval(&self, m: &Point) -> f64 {
        match self {
            CutoffFunction::Constant(c) => *c,
            CutoffFunction::Partition {
                bump,
                group,
                neighbours,
            } => {
                let w = bump.eval(m);
                if w == 0.0 {
                    return 0.0;
                }
                let total: f64 = neighbours.iter().map(|x| bump.eval(&group.act(x, m))).sum();
                w / total
            }
            CutoffFunction::Line { bump, direction } => {
                let w = bump.eval(m);
                if w == 0.0 {
                    return 0.0;
                }
                w / line_integral(bump, m, direction)
            }
        }
    }

    /// Enclosing ball of the support, `None` when the support is the chart.
    pub fn support_ball(&self) -> Option<(Point, f64)> {
        match self {
            CutoffFunction::Constant(_) => None,
            CutoffFunction::Partition { bump, .. } | CutoffFunction::Line { bump, .. } => {
                Some((bump.center.clone(), bump.radius))
            }
        }
    }

    pub fn support_box(&self) -> Option<SampleBox> {
        self.support_ball().map(|(c, r)| SampleBox {
            lo: c.iter().map(|x| x - r).collect(),
            hi: c.iter().map(|x| x + r).collect(),
        })
    }

    /// Number of group elements whose window translate meets the window.
    pub fn properness_count(&self) -> usize {
        match self {
            CutoffFunction::Partition { neighbours, .. } => neighbours.len(),
            _ => 1,
        }
    }
}

/// `int_R w(m + s d) ds` by Gauss-Kronrod over the chord through the ball.
fn line_integral(bump: &Bump, m: &Point, direction: &Point) -> f64 {
    // |m + s d - c|^2 < r^2  <=>  a s^2 + 2 b s + c0 < 0
    let rel = m - &bump.center;
    let a = direction.norm_squared();
    let b = rel.dot(direction);
    let c0 = rel.norm_squared() - bump.radius * bump.radius;
    let disc = b * b - a * c0;
    if disc <= 0.0 {
        return 0.0;
    }
    let root = disc.sqrt();
    let (s0, s1) = ((-b - root) / a, (-b + root) / a);
    quad::integrate(|s| bump.eval(&(m + direction * s)), s0, s1, 1e-15, 1e-14)
}

/// Build the cutoff for `window` and check that translates of the window
/// cover every grid point of the sample box.
pub fn build_cutoff(
    window: &WindowSpec,
    group: &Arc<GroupModel>,
    sample_box: &SampleBox,
    grid_per_axis: usize,
) -> Result<CutoffFunction> {
    match (window, &group.kind) {
        (WindowSpec::Constant, GroupKind::Trivial | GroupKind::Finite { .. }) => Ok(
            CutoffFunction::Constant(1.0 / group.order().expect("finite") as f64),
        ),
        (WindowSpec::Constant, _) => Err(Error::Model(
            "a constant cutoff is only admissible for trivial or finite groups".into(),
        )),
        (WindowSpec::Bump { center, radius }, kind) => {
            if center.len() != group.dim || !(*radius > 0.0) {
                return Err(Error::Model("bad cutoff window".into()));
            }
            let bump = Bump {
                center: DVector::from_vec(center.clone()),
                radius: *radius,
            };
            let counts = vec![grid_per_axis; sample_box.dim()];
            match kind {
                GroupKind::TranslationLine { direction } => {
                    for m in sample_box.grid(&counts) {
                        let cov = line_integral(&bump, &m, direction);
                        if cov < 1e-8 {
                            return Err(Error::CoverageFailure {
                                point: m.as_slice().to_vec(),
                                coverage: cov,
                            });
                        }
                    }
                    Ok(CutoffFunction::Line {
                        bump,
                        direction: direction.clone(),
                    })
                }
                GroupKind::Trivial | GroupKind::Finite { .. } | GroupKind::FreeAbelian { .. } => {
                    let candidates = group.elements_within(DEFAULT_PROPERNESS_RADIUS);
                    for m in sample_box.grid(&counts) {
                        let cov: f64 = candidates.iter().map(|x| bump.eval(&group.act(x, &m))).sum();
                        if cov < 1e-8 {
                            return Err(Error::CoverageFailure {
                                point: m.as_slice().to_vec(),
                                coverage: cov,
                            });
                        }
                    }
                    // x can map a point of the ball into the ball only if
                    // |x c - c| < r (1 + Lip(x)).
                    let neighbours: Vec<GroupElt> = candidates
                        .into_iter()
                        .filter(|x| {
                            let moved = (group.act(x, &bump.center) - &bump.center).norm();
                            moved < bump.radius * (1.0 + group.lipschitz(x)) + 1e-12
                        })
                        .collect();
                    log::debug!(
                        "cutoff: {} group elements move the window onto itself",
                        neighbours.len()
                    );
                    Ok(CutoffFunction::Partition {
                        bump,
                        group: Arc::clone(group),
                        neighbours,
                    })
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn translations(n: usize) -> Vec<MapSpec> {
        (0..n)
            .map(|i| {
                let mut b = DVector::zeros(n);
                b[i] = 1.0;
                MapSpec::Affine {
                    linear: DMatrix::identity(n, n),
                    offset: b,
                }
            })
            .collect()
    }

    fn circle_lift_group() -> GroupModel {
        let mut gens = translations(2);
        gens.truncate(1);
        gens.push(MapSpec::CircleLift {
            coord: 0,
            amplitude: 0.1,
            shift: DVector::from_vec(vec![0.0, -1.0]),
        });
        GroupModel::free_abelian(2, gens).unwrap()
    }

    #[test]
    fn translation_actions() {
        let z = GroupModel::free_abelian(1, translations(1)).unwrap();
        let m = DVector::from_vec(vec![0.25]);
        assert_eq!(z.act(&GroupElt::Lattice(vec![3]), &m)[0], 3.25);
        let z2 = GroupModel::free_abelian(2, translations(2)).unwrap();
        let p = DVector::from_vec(vec![0.5, 0.5]);
        let y = z2.act(&GroupElt::Lattice(vec![1, -2]), &p);
        assert_eq!(y.as_slice(), &[1.5, -1.5]);
        assert_eq!(z2.act(&z2.identity(), &p), p);
        assert_eq!(z2.act_jacobian(&GroupElt::Lattice(vec![4, 1]), &p), DMatrix::identity(2, 2));
    }

    #[test]
    fn rotation_by_pi_has_jacobian_minus_identity() {
        let g = GroupModel::finite(
            2,
            vec![MapSpec::Affine {
                linear: -DMatrix::identity(2, 2),
                offset: DVector::zeros(2),
            }],
        )
        .unwrap();
        assert_eq!(g.order(), Some(2));
        let j = g.act_jacobian(&GroupElt::Finite(1), &DVector::from_vec(vec![0.3, 0.1]));
        assert_eq!(j, -DMatrix::identity(2, 2));
    }

    #[test]
    fn circle_lift_jacobian_matches_differences() {
        let g = circle_lift_group();
        for elt in [vec![0, 1], vec![0, -1], vec![2, 3], vec![-1, -2]] {
            let x = GroupElt::Lattice(elt);
            let m = DVector::from_vec(vec![0.3, 0.2]);
            let j = g.act_jacobian(&x, &m);
            let h = 1e-6;
            for c in 0..2 {
                let mut a = m.clone();
                let mut b = m.clone();
                a[c] += h;
                b[c] -= h;
                let fd = (g.act(&x, &a) - g.act(&x, &b)) / (2.0 * h);
                for r in 0..2 {
                    assert!((j[(r, c)] - fd[r]).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn circle_lift_commutes_with_unit_translation() {
        let f = MapSpec::CircleLift {
            coord: 0,
            amplitude: 0.1,
            shift: DVector::zeros(1),
        };
        for x in [0.0, 0.3, 0.77, -1.2] {
            let a = f.apply(&DVector::from_vec(vec![x + 1.0]), false)[0];
            let b = f.apply(&DVector::from_vec(vec![x]), false)[0] + 1.0;
            assert!((a - b).abs() < 1e-14);
            let back = f.apply(&DVector::from_vec(vec![a]), true)[0];
            assert!((back - x - 1.0).abs() < 1e-14);
        }
    }

    fn s3_permutations() -> GroupModel {
        let perm = |p: [usize; 3]| {
            let mut l = DMatrix::zeros(3, 3);
            for (i, &j) in p.iter().enumerate() {
                l[(i, j)] = 1.0;
            }
            MapSpec::Affine {
                linear: l,
                offset: DVector::zeros(3),
            }
        };
        GroupModel::finite(3, vec![perm([1, 0, 2]), perm([0, 2, 1])]).unwrap()
    }

    #[test]
    fn symmetric_group_cosets_of_a_transposition() {
        let g = s3_permutations();
        assert_eq!(g.order(), Some(6));
        assert!(!g.is_abelian());
        // element 1 is the first generator, a transposition
        let t = GroupElt::Finite(1);
        assert_eq!(g.element_order(&t), Some(2));
        assert_eq!(g.centralizer(&t).len(), 2);
        let reps = g.coset_representatives(&t, 0);
        assert_eq!(reps.len(), 3);
        assert_eq!(reps[0], GroupElt::Finite(0));
        // reps are in distinct cosets: h1^{-1} h2 not in Z
        let z = g.centralizer(&t);
        for a in &reps {
            for b in &reps {
                if a != b {
                    assert!(!z.contains(&g.compose(&g.inverse(a), b)));
                }
            }
        }
    }

    #[test]
    fn abelian_and_trivial_cosets_are_identity() {
        let z2 = GroupModel::free_abelian(2, translations(2)).unwrap();
        assert_eq!(
            z2.coset_representatives(&GroupElt::Lattice(vec![1, 3]), 5),
            vec![GroupElt::Lattice(vec![0, 0])]
        );
        let t = GroupModel::trivial(2);
        assert_eq!(t.coset_representatives(&GroupElt::Identity, 3), vec![GroupElt::Identity]);
        let line = GroupModel::translation_line(DVector::from_vec(vec![1.0])).unwrap();
        assert_eq!(line.coset_representatives(&GroupElt::Real(0.7), 3), vec![GroupElt::Real(0.0)]);
    }

    #[test]
    fn group_axioms_on_random_triples() {
        let groups = [circle_lift_group(), s3_permutations()];
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        use rand::Rng;
        for g in &groups {
            let els = g.elements_within(3);
            for _ in 0..1000 {
                let a = &els[rng.gen_range(0..els.len())];
                let b = &els[rng.gen_range(0..els.len())];
                let m = DVector::from_fn(g.dim, |_, _| rng.gen_range(-2.0..2.0));
                let lhs = g.act(&g.compose(a, b), &m);
                let rhs = g.act(a, &g.act(b, &m));
                assert!((lhs - rhs).amax() < 1e-12);
                let back = g.act(&g.inverse(a), &g.act(a, &m));
                assert!((back - &m).amax() < 1e-12);
            }
        }
    }

    #[test]
    fn partition_of_unity_on_the_line() {
        let g = Arc::new(GroupModel::free_abelian(1, translations(1)).unwrap());
        let sb = SampleBox::new(vec![0.0], vec![1.0]).unwrap();
        let chi = build_cutoff(
            &WindowSpec::Bump {
                center: vec![0.0],
                radius: 0.75,
            },
            &g,
            &sb,
            32,
        )
        .unwrap();
        for m in [0.0, 0.3, 0.49] {
            let s: f64 = (-3..=3)
                .map(|k| chi.eval(&DVector::from_vec(vec![m + k as f64])))
                .sum();
            assert!((s - 1.0).abs() <= 1e-10);
        }
    }

    #[test]
    fn partition_of_unity_for_nonlinear_deck_group() {
        let g = Arc::new(circle_lift_group());
        let sb = SampleBox::new(vec![0.0, 0.0], vec![1.0, 1.0]).unwrap();
        let chi = build_cutoff(
            &WindowSpec::Bump {
                center: vec![0.5, 0.5],
                radius: 0.9,
            },
            &g,
            &sb,
            10,
        )
        .unwrap();
        let all = g.elements_within(6);
        let mut worst: f64 = 0.0;
        for m in sb.grid(&[10, 10]) {
            let s: f64 = all.iter().map(|x| chi.eval(&g.act(x, &m))).sum();
            worst = worst.max((s - 1.0).abs());
        }
        assert!(worst <= 1e-10, "{worst}");
        assert!(chi.properness_count() > 1 && chi.properness_count() <= all.len());
    }

    #[test]
    fn window_too_small_is_rejected() {
        let g = Arc::new(GroupModel::free_abelian(1, translations(1)).unwrap());
        let sb = SampleBox::new(vec![0.0], vec![1.0]).unwrap();
        let r = build_cutoff(
            &WindowSpec::Bump {
                center: vec![0.0],
                radius: 0.3,
            },
            &g,
            &sb,
            16,
        );
        assert!(matches!(r, Err(Error::CoverageFailure { .. })));
    }

    #[test]
    fn line_cutoff_integrates_to_one() {
        let g = Arc::new(GroupModel::translation_line(DVector::from_vec(vec![1.0])).unwrap());
        let sb = SampleBox::new(vec![-1.0], vec![1.0]).unwrap();
        let chi = build_cutoff(
            &WindowSpec::Bump {
                center: vec![0.2],
                radius: 0.6,
            },
            &g,
            &sb,
            8,
        )
        .unwrap();
        for m in [-3.0, 0.0, 0.37] {
            let v = quad::integrate(|s| chi.eval(&DVector::from_vec(vec![m + s])), -5.0, 5.0, 1e-14, 1e-13);
            assert!((v - 1.0).abs() < 1e-10, "{v}");
        }
    }

    #[test]
    fn trivial_group_constant_cutoff() {
        let g = Arc::new(GroupModel::trivial(2));
        let sb = SampleBox::new(vec![0.0, 0.0], vec![1.0, 1.0]).unwrap();
        let chi = build_cutoff(&WindowSpec::Constant, &g, &sb, 4).unwrap();
        assert_eq!(chi.eval(&DVector::from_vec(vec![7.0, -3.0])), 1.0);
    }

    #[test]
    fn deck_group_laws() {
        let cat = MapSpec::Affine {
            linear: DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 1.0]),
            offset: DVector::zeros(2),
        };
        let q = QuotientDeck::new(3, cat).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        use rand::Rng;
        for _ in 0..200 {
            let a = DeckElt {
                shift: vec![rng.gen_range(-3..4), rng.gen_range(-3..4)],
                turns: rng.gen_range(-2..3),
            };
            let b = DeckElt {
                shift: vec![rng.gen_range(-3..4), rng.gen_range(-3..4)],
                turns: rng.gen_range(-2..3),
            };
            let m = DVector::from_fn(3, |_, _| rng.gen_range(-1.0..1.0));
            let lhs = q.act(&q.compose(&a, &b), &m);
            let rhs = q.act(&a, &q.act(&b, &m));
            assert!((lhs - rhs).amax() < 1e-9);
            let back = q.act(&q.inverse(&a), &q.act(&a, &m));
            assert!((back - &m).amax() < 1e-9);
            let (d, y) = q.fold(&q.act(&a, &m));
            assert!(y.iter().all(|c| (-1e-12..1.0 + 1e-12).contains(c)));
            assert!((q.act(&d, &q.act(&a, &m)) - y).amax() < 1e-12);
            let n = q.nearest(&m, &q.act(&a, &m));
            assert_eq!(n, a);
        }
    }
}
