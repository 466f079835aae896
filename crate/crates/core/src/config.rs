//! Run configuration: a flat `key = value` format split into `[sections]`.
//!
//! Every optional key is resolved at parse time, so `to_text` of a parsed
//! config is the fully defaulted config and parses back to an equal value.

use std::fmt::Write as _;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde_json::{Map, Value};

use crate::error::{Error, Result};
use crate::expr::{self, MatrixExpr};
use crate::flow::{BundleCocycle, CoverSystem, FlowField};
use crate::geometry::{build_cutoff, CoverChart, GroupModel, MapSpec, QuotientDeck, SampleBox, WindowSpec};
use crate::ode::Tolerances;
use crate::oracle::{Downstairs, MollifierSpec};
use crate::orbits::{SeedSpec, Window, DEFAULT_DEGENERACY};
use crate::trace::{AssembleSpec, TestFunction};

const SECTIONS: [&str; 7] = ["chart", "group", "flow", "bundle", "orbits", "trace", "oracle"];

fn known_keys(section: &str) -> &'static [&'static str] {
    match section {
        "" => &["name", "seed"],
        "chart" => &["labels", "lo", "hi", "quotient"],
        "group" => &["kind", "generator", "direction", "window", "window_alt", "g", "cutoff_grid"],
        "flow" => &["rtol", "atol", "t_max"],
        "bundle" => &["rank", "generator", "endomorphism", "fiber_action"],
        "orbits" => &["window", "seeds_per_axis", "time_step", "capture", "degeneracy", "hypothesis_samples", "grid_check"],
        "trace" => &["radius", "psi", "sweep"],
        "oracle" => &[
            "modes",
            "eps_ladder",
            "points_per_eps",
            "budget",
            "mollified_psi",
            "covering_model",
            "covering_radius",
            "covering_psi",
            "catmap_max",
        ],
        _ => &[],
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GroupKindName {
    Trivial,
    FreeAbelian,
    Finite,
    TranslationLine,
}

impl GroupKindName {
    fn parse(s: &str) -> Option<GroupKindName> {
        Some(match s {
            "trivial" => GroupKindName::Trivial,
            "free-abelian" => GroupKindName::FreeAbelian,
            "finite" => GroupKindName::Finite,
            "translation-line" => GroupKindName::TranslationLine,
            _ => return None,
        })
    }

    pub fn name(&self) -> &'static str {
        match self {
            GroupKindName::Trivial => "trivial",
            GroupKindName::FreeAbelian => "free-abelian",
            GroupKindName::Finite => "finite",
            GroupKindName::TranslationLine => "translation-line",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum VerifyMode {
    Mollified,
    Covering,
    Catmap,
}

impl VerifyMode {
    pub fn parse(s: &str) -> Option<VerifyMode> {
        Some(match s.trim() {
            "mollified" => VerifyMode::Mollified,
            "covering" => VerifyMode::Covering,
            "catmap" => VerifyMode::Catmap,
            _ => return None,
        })
    }

    pub fn name(&self) -> &'static str {
        match self {
            VerifyMode::Mollified => "mollified",
            VerifyMode::Covering => "covering",
            VerifyMode::Catmap => "catmap",
        }
    }
}

/// A map as written, kept next to its parsed form so the text survives a round trip.
#[derive(Clone, Debug, PartialEq)]
pub struct MapEntry {
    pub source: String,
    pub map: MapSpec,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ChartConfig {
    pub labels: Vec<String>,
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
    /// Deck map on the first `n - 1` coordinates; the last one winds.
    pub quotient: Option<MapEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GroupConfig {
    pub kind: GroupKindName,
    pub generators: Vec<MapEntry>,
    pub direction: Option<Vec<f64>>,
    pub window: WindowSpec,
    /// Second cutoff window, used to check independence of the choice.
    pub window_alt: Option<WindowSpec>,
    pub g: String,
    pub cutoff_grid: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FlowConfig {
    /// Vector field components in label order.
    pub field: Vec<String>,
    pub rtol: f64,
    pub atol: f64,
    pub t_max: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BundleConfig {
    pub rank: usize,
    pub generator: String,
    pub endomorphism: String,
    pub fiber_actions: Vec<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OrbitsConfig {
    pub window: (f64, f64),
    pub seeds_per_axis: usize,
    pub time_step: f64,
    pub capture: f64,
    pub degeneracy: f64,
    pub hypothesis_samples: usize,
    /// Re-run the search on a doubled seed grid and report whether it changed.
    pub grid_check: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sweep {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TraceConfig {
    pub radius: usize,
    pub psi: Vec<TestFunction>,
    pub sweep: Sweep,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OracleConfig {
    pub modes: Vec<VerifyMode>,
    pub mollifier: MollifierSpec,
    pub mollified_psi: Option<TestFunction>,
    pub covering_model: Option<Downstairs>,
    pub covering_radius: usize,
    pub covering_psi: Option<TestFunction>,
    pub catmap_max: u32,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub name: String,
    pub seed: u64,
    pub chart: ChartConfig,
    pub group: GroupConfig,
    pub flow: FlowConfig,
    pub bundle: BundleConfig,
    pub orbits: OrbitsConfig,
    pub trace: TraceConfig,
    pub oracle: OracleConfig,
}

// ---------------------------------------------------------------------------
// raw sections

struct Section {
    name: &'static str,
    entries: Vec<(String, usize, String)>,
    used: Vec<bool>,
}

impl Section {
    fn qualified(&self, key: &str) -> String {
        if self.name.is_empty() {
            key.to_string()
        } else {
            format!("{}.{key}", self.name)
        }
    }

    fn one(&mut self, key: &str) -> Result<Option<(usize, String)>> {
        let mut found: Option<(usize, String)> = None;
        for (i, (k, line, v)) in self.entries.iter().enumerate() {
            if k == key {
                if found.is_some() {
                    return Err(Error::Parse {
                        line: *line,
                        message: format!("duplicate key `{}`", self.qualified(key)),
                    });
                }
                self.used[i] = true;
                found = Some((*line, v.clone()));
            }
        }
        Ok(found)
    }

    fn many(&mut self, key: &str) -> Vec<(usize, String)> {
        let mut out = Vec::new();
        for (i, (k, line, v)) in self.entries.iter().enumerate() {
            if k == key {
                self.used[i] = true;
                out.push((*line, v.clone()));
            }
        }
        out
    }

    /// Reject keys no section accepts, before any value is interpreted.
    fn check_known(&self) -> Result<()> {
        let known = known_keys(self.name);
        for (k, line, _) in &self.entries {
            let vector = self.name == "flow" && k.starts_with("u.");
            if !vector && !known.contains(&k.as_str()) {
                return Err(Error::Validation {
                    key: self.qualified(k),
                    reason: format!("unknown key (line {line})"),
                });
            }
        }
        Ok(())
    }

    fn finish(self) -> Result<()> {
        match self.entries.iter().zip(&self.used).find(|(_, u)| !**u) {
            Some(((k, line, _), _)) => Err(Error::Validation {
                key: self.qualified(k),
                reason: format!("unknown key (line {line})"),
            }),
            None => Ok(()),
        }
    }
}

fn split_sections(text: &str) -> Result<Vec<Section>> {
    let mut sections = vec![Section {
        name: "",
        entries: Vec::new(),
        used: Vec::new(),
    }];
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let body = raw.split('#').next().unwrap_or("").trim();
        if body.is_empty() {
            continue;
        }
        if let Some(rest) = body.strip_prefix('[') {
            let name = rest.strip_suffix(']').ok_or_else(|| Error::Parse {
                line,
                message: format!("malformed section header `{body}`"),
            })?;
            let name = name.trim();
            let known = SECTIONS.iter().find(|s| **s == name).ok_or_else(|| Error::Parse {
                line,
                message: format!("unknown section `[{name}]`"),
            })?;
            if sections.iter().any(|s| s.name == *known) {
                return Err(Error::Parse {
                    line,
                    message: format!("section `[{name}]` appears twice"),
                });
            }
            sections.push(Section {
                name: known,
                entries: Vec::new(),
                used: Vec::new(),
            });
            continue;
        }
        let (k, v) = body.split_once('=').ok_or_else(|| Error::Parse {
            line,
            message: format!("expected `key = value`, got `{body}`"),
        })?;
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() || k.contains(char::is_whitespace) {
            return Err(Error::Parse {
                line,
                message: format!("malformed key `{k}`"),
            });
        }
        let s = sections.last_mut().expect("preamble");
        s.entries.push((k.to_string(), line, v.to_string()));
        s.used.push(false);
    }
    Ok(sections)
}

// ---------------------------------------------------------------------------
// value helpers

/// Split on `sep` outside parentheses.
fn split_top(s: &str, sep: char) -> Vec<&str> {
    let mut out = Vec::new();
    let mut depth = 0i32;
    let mut start = 0;
    for (i, c) in s.char_indices() {
        match c {
            '(' => depth += 1,
            ')' => depth -= 1,
            c if c == sep && depth == 0 => {
                out.push(s[start..i].trim());
                start = i + c.len_utf8();
            }
            _ => {}
        }
    }
    out.push(s[start..].trim());
    out
}

/// `name(inner)` -> `inner`.
fn call<'a>(s: &'a str, name: &str) -> Option<&'a str> {
    s.trim()
        .strip_prefix(name)?
        .trim_start()
        .strip_prefix('(')?
        .strip_suffix(')')
}

fn parse_err(line: usize, key: &str, why: impl std::fmt::Display) -> Error {
    Error::Parse {
        line,
        message: format!("`{key}`: {why}"),
    }
}

fn invalid(key: &str, reason: impl Into<String>) -> Error {
    Error::Validation {
        key: key.to_string(),
        reason: reason.into(),
    }
}

/// A constant expression such as `0.5` or `cos(2*pi/3)`.
fn constant(src: &str) -> std::result::Result<f64, String> {
    let e = expr::parse(src, &[]).map_err(|e| e.to_string())?;
    let v = e.eval(&[]);
    if v.is_finite() {
        Ok(v)
    } else {
        Err(format!("`{src}` is not finite"))
    }
}

fn num(line: usize, key: &str, src: &str) -> Result<f64> {
    constant(src).map_err(|e| parse_err(line, key, e))
}

fn nums(line: usize, key: &str, src: &str) -> Result<Vec<f64>> {
    if src.trim().is_empty() {
        return Ok(Vec::new());
    }
    split_top(src, ',').into_iter().map(|s| num(line, key, s)).collect()
}

fn count<T: std::str::FromStr>(line: usize, key: &str, src: &str) -> Result<T> {
    src.trim()
        .parse::<T>()
        .map_err(|_| parse_err(line, key, format!("expected a non-negative integer, got `{src}`")))
}

/// Text form of a float that parses back to the same bits.
fn fnum(x: f64) -> String {
    format!("{x:?}")
}

fn fnums(xs: &[f64]) -> String {
    xs.iter().map(|x| fnum(*x)).collect::<Vec<_>>().join(", ")
}

/// `affine(L | b)`, `shift(b)` or `circle-lift(coord, amplitude | shift)`.
pub fn parse_map(src: &str) -> std::result::Result<MapSpec, String> {
    let map = if let Some(inner) = call(src, "affine") {
        let parts = split_top(inner, '|');
        if parts.len() != 2 {
            return Err("affine map needs `rows | offset`".into());
        }
        let offset = parts[1]
            .split(',')
            .map(constant)
            .collect::<std::result::Result<Vec<_>, _>>()?;
        let n = offset.len();
        let mut entries = Vec::with_capacity(n * n);
        let rows: Vec<&str> = parts[0].split(';').collect();
        if rows.len() != n {
            return Err(format!("affine map has {} rows but offset of length {n}", rows.len()));
        }
        for row in rows {
            let r = row.split(',').map(constant).collect::<std::result::Result<Vec<_>, _>>()?;
            if r.len() != n {
                return Err("affine matrix must be square and match the offset".into());
            }
            entries.extend(r);
        }
        MapSpec::Affine {
            linear: DMatrix::from_row_slice(n, n, &entries),
            offset: DVector::from_vec(offset),
        }
    } else if let Some(inner) = call(src, "shift") {
        let offset = inner
            .split(',')
            .map(constant)
            .collect::<std::result::Result<Vec<_>, _>>()?;
        let n = offset.len();
        MapSpec::Affine {
            linear: DMatrix::identity(n, n),
            offset: DVector::from_vec(offset),
        }
    } else if let Some(inner) = call(src, "circle-lift") {
        let parts = split_top(inner, '|');
        if parts.len() != 2 {
            return Err("circle lift needs `coord, amplitude | shift`".into());
        }
        let head: Vec<&str> = parts[0].split(',').map(str::trim).collect();
        if head.len() != 2 {
            return Err("circle lift needs `coord, amplitude | shift`".into());
        }
        let coord: usize = head[0].parse().map_err(|_| format!("bad coordinate index `{}`", head[0]))?;
        let amplitude = constant(head[1])?;
        let shift = parts[1]
            .split(',')
            .map(constant)
            .collect::<std::result::Result<Vec<_>, _>>()?;
        MapSpec::CircleLift {
            coord,
            amplitude,
            shift: DVector::from_vec(shift),
        }
    } else {
        return Err(format!("unknown map `{src}` (expected affine, shift or circle-lift)"));
    };
    map.validate().map_err(|e| e.to_string())?;
    Ok(map)
}

fn map_entry(line: usize, key: &str, src: &str) -> Result<MapEntry> {
    let map = parse_map(src).map_err(|e| parse_err(line, key, e))?;
    Ok(MapEntry {
        source: src.trim().to_string(),
        map,
    })
}

fn parse_window(line: usize, key: &str, src: &str) -> Result<WindowSpec> {
    let s = src.trim();
    if s == "constant" {
        return Ok(WindowSpec::Constant);
    }
    let inner = call(s, "bump").ok_or_else(|| parse_err(line, key, "expected `constant` or `bump(center | radius)`"))?;
    let parts = split_top(inner, '|');
    if parts.len() != 2 {
        return Err(parse_err(line, key, "expected `bump(center | radius)`"));
    }
    let center = nums(line, key, parts[0])?;
    let radius = num(line, key, parts[1])?;
    if center.is_empty() || !(radius > 0.0) {
        return Err(invalid(key, "bump window needs a center and a positive radius"));
    }
    Ok(WindowSpec::Bump { center, radius })
}

fn window_text(w: &WindowSpec) -> String {
    match w {
        WindowSpec::Constant => "constant".into(),
        WindowSpec::Bump { center, radius } => format!("bump({} | {})", fnums(center), fnum(*radius)),
    }
}

fn parse_downstairs(line: usize, key: &str, src: &str) -> Result<Downstairs> {
    let s = src.trim();
    match s {
        "circle" => return Ok(Downstairs::Circle),
        "catmap" => return Ok(Downstairs::CatMap),
        _ => {}
    }
    let inner = call(s, "circle-map")
        .ok_or_else(|| parse_err(line, key, "expected `circle`, `catmap` or `circle-map(amplitude)`"))?;
    Ok(Downstairs::CircleMap {
        amplitude: num(line, key, inner)?,
    })
}

fn downstairs_text(d: &Downstairs) -> String {
    match d {
        Downstairs::Circle => "circle".into(),
        Downstairs::CatMap => "catmap".into(),
        Downstairs::CircleMap { amplitude } => format!("circle-map({})", fnum(*amplitude)),
    }
}

fn psi(line: usize, key: &str, src: &str) -> Result<TestFunction> {
    TestFunction::parse(src).map_err(|e| match e {
        Error::Validation { reason, .. } => invalid(key, reason),
        other => parse_err(line, key, other),
    })
}

/// Re-key validation errors raised by lower layers with their config key.
fn rekey(key: &str) -> impl Fn(Error) -> Error + '_ {
    move |e| match e {
        Error::Validation { reason, .. } => invalid(key, reason),
        Error::Expr(m) | Error::Model(m) => invalid(key, m),
        other => other,
    }
}

fn positive(key: &str, v: f64) -> Result<f64> {
    if v > 0.0 && v.is_finite() {
        Ok(v)
    } else {
        Err(invalid(key, format!("must be positive, got {v}")))
    }
}

fn zero_matrix(r: usize) -> String {
    (0..r)
        .map(|_| vec!["0"; r].join(", "))
        .collect::<Vec<_>>()
        .join("; ")
}

// ---------------------------------------------------------------------------
// parsing

pub fn parse_config(text: &str) -> Result<RunConfig> {
    let mut sections = split_sections(text)?;
    for s in &sections {
        s.check_known()?;
    }
    let mut take = |name: &str| -> Section {
        let i = sections.iter().position(|s| s.name == name);
        match i {
            Some(i) => sections.remove(i),
            None => Section {
                name: SECTIONS.iter().find(|s| **s == name).copied().unwrap_or(""),
                entries: Vec::new(),
                used: Vec::new(),
            },
        }
    };

    // preamble
    let mut pre = take("");
    let name = pre.one("name")?.map(|(_, v)| v).unwrap_or_else(|| "unnamed".into());
    let seed = match pre.one("seed")? {
        Some((l, v)) => count::<u64>(l, "seed", &v)?,
        None => 0,
    };
    pre.finish()?;

    // chart
    let mut s = take("chart");
    let (_, labels_src) = s.one("labels")?.ok_or_else(|| invalid("chart.labels", "required"))?;
    let labels: Vec<String> = labels_src.split(',').map(|l| l.trim().to_string()).collect();
    for (i, l) in labels.iter().enumerate() {
        let ok = l.chars().next().is_some_and(|c| c.is_ascii_alphabetic() || c == '_')
            && l.chars().all(|c| c.is_ascii_alphanumeric() || c == '_')
            && l != "pi";
        if !ok || labels[..i].contains(l) {
            return Err(invalid("chart.labels", format!("bad or repeated label `{l}`")));
        }
    }
    let n = labels.len();
    let (l, v) = s.one("lo")?.ok_or_else(|| invalid("chart.lo", "required"))?;
    let lo = nums(l, "chart.lo", &v)?;
    let (l, v) = s.one("hi")?.ok_or_else(|| invalid("chart.hi", "required"))?;
    let hi = nums(l, "chart.hi", &v)?;
    if lo.len() != n || hi.len() != n || lo.iter().zip(&hi).any(|(a, b)| !(a < b)) {
        return Err(invalid("chart.lo", format!("need {n} bounds with lo < hi")));
    }
    let quotient = match s.one("quotient")? {
        Some((l, v)) => Some(map_entry(l, "chart.quotient", &v)?),
        None => None,
    };
    s.finish()?;
    let chart = ChartConfig {
        labels: labels.clone(),
        lo,
        hi,
        quotient,
    };

    // group
    let mut s = take("group");
    let kind = match s.one("kind")? {
        Some((_, v)) => GroupKindName::parse(&v).ok_or_else(|| {
            invalid("group.kind", format!("`{v}` is not one of trivial, free-abelian, finite, translation-line"))
        })?,
        None => GroupKindName::Trivial,
    };
    let generators = s
        .many("generator")
        .iter()
        .map(|(l, v)| map_entry(*l, "group.generator", v))
        .collect::<Result<Vec<_>>>()?;
    let direction = match s.one("direction")? {
        Some((l, v)) => Some(nums(l, "group.direction", &v)?),
        None => None,
    };
    let window = match s.one("window")? {
        Some((l, v)) => parse_window(l, "group.window", &v)?,
        None => WindowSpec::Constant,
    };
    let window_alt = match s.one("window_alt")? {
        Some((l, v)) => Some(parse_window(l, "group.window_alt", &v)?),
        None => None,
    };
    let g = s.one("g")?.map(|(_, v)| v).unwrap_or_else(|| "e".into());
    let cutoff_grid = match s.one("cutoff_grid")? {
        Some((l, v)) => count(l, "group.cutoff_grid", &v)?,
        None => 8,
    };
    s.finish()?;
    match kind {
        GroupKindName::FreeAbelian | GroupKindName::Finite if generators.is_empty() => {
            return Err(invalid("group.generator", "this group kind needs generators"));
        }
        GroupKindName::Trivial | GroupKindName::TranslationLine if !generators.is_empty() => {
            return Err(invalid("group.generator", "this group kind takes no generators"));
        }
        GroupKindName::TranslationLine if direction.is_none() => {
            return Err(invalid("group.direction", "required for translation-line"));
        }
        _ => {}
    }
    if direction.is_some() && kind != GroupKindName::TranslationLine {
        return Err(invalid("group.direction", "only used by translation-line"));
    }
    let group = GroupConfig {
        kind,
        generators,
        direction,
        window,
        window_alt,
        g,
        cutoff_grid,
    };

    // flow
    let mut s = take("flow");
    let mut field = Vec::with_capacity(n);
    for l in &labels {
        let (_, v) = s
            .one(&format!("u.{l}"))?
            .ok_or_else(|| invalid(&format!("flow.u.{l}"), "missing vector field component"))?;
        field.push(v);
    }
    let tol = Tolerances::default();
    let rtol = match s.one("rtol")? {
        Some((l, v)) => positive("flow.rtol", num(l, "flow.rtol", &v)?)?,
        None => tol.rtol,
    };
    let atol = match s.one("atol")? {
        Some((l, v)) => positive("flow.atol", num(l, "flow.atol", &v)?)?,
        None => tol.atol,
    };
    let t_max = match s.one("t_max")? {
        Some((l, v)) => positive("flow.t_max", num(l, "flow.t_max", &v)?)?,
        None => 64.0,
    };
    s.finish()?;
    FlowField::parse(&field, &labels, Tolerances { rtol, atol }, t_max).map_err(rekey("flow.u"))?;
    let flow = FlowConfig {
        field,
        rtol,
        atol,
        t_max,
    };

    // bundle
    let mut s = take("bundle");
    let rank = match s.one("rank")? {
        Some((l, v)) => count(l, "bundle.rank", &v)?,
        None => 1,
    };
    if rank == 0 {
        return Err(invalid("bundle.rank", "must be at least 1"));
    }
    let generator = s.one("generator")?.map(|(_, v)| v).unwrap_or_else(|| zero_matrix(rank));
    let endomorphism = s
        .one("endomorphism")?
        .map(|(_, v)| v)
        .unwrap_or_else(|| MatrixExpr::identity(rank).source().to_string());
    let mut fiber_actions: Vec<String> = s.many("fiber_action").into_iter().map(|(_, v)| v).collect();
    if fiber_actions.is_empty() {
        fiber_actions = vec![MatrixExpr::identity(rank).source().to_string(); group.generators.len()];
    }
    s.finish()?;
    let bundle = BundleConfig {
        rank,
        generator,
        endomorphism,
        fiber_actions,
    };
    bundle_cocycle(&bundle, &labels, group.generators.len())?;

    // orbits
    let mut s = take("orbits");
    let (l, v) = s.one("window")?.ok_or_else(|| invalid("orbits.window", "required"))?;
    let w = nums(l, "orbits.window", &v)?;
    if w.len() != 2 {
        return Err(invalid("orbits.window", "expected `l_min, l_max`"));
    }
    let window = Window::new(w[0], w[1]).map_err(rekey("orbits.window"))?;
    if window.lo.abs().max(window.hi.abs()) > t_max {
        return Err(invalid("orbits.window", format!("periods exceed the flow horizon t_max = {t_max}")));
    }
    let seeds = SeedSpec::default();
    let seeds_per_axis = match s.one("seeds_per_axis")? {
        Some((l, v)) => count(l, "orbits.seeds_per_axis", &v)?,
        None => seeds.per_axis,
    };
    if seeds_per_axis == 0 {
        return Err(invalid("orbits.seeds_per_axis", "must be at least 1"));
    }
    let time_step = match s.one("time_step")? {
        Some((l, v)) => positive("orbits.time_step", num(l, "orbits.time_step", &v)?)?,
        None => seeds.time_step,
    };
    let capture = match s.one("capture")? {
        Some((l, v)) => positive("orbits.capture", num(l, "orbits.capture", &v)?)?,
        None => seeds.capture,
    };
    let degeneracy = match s.one("degeneracy")? {
        Some((l, v)) => positive("orbits.degeneracy", num(l, "orbits.degeneracy", &v)?)?,
        None => DEFAULT_DEGENERACY,
    };
    let hypothesis_samples = match s.one("hypothesis_samples")? {
        Some((l, v)) => count(l, "orbits.hypothesis_samples", &v)?,
        None => 256,
    };
    let grid_check = match s.one("grid_check")? {
        Some((_, v)) if v == "true" => true,
        Some((_, v)) if v == "false" => false,
        Some((l, v)) => return Err(parse_err(l, "orbits.grid_check", format!("expected true or false, got `{v}`"))),
        None => true,
    };
    s.finish()?;
    let orbits = OrbitsConfig {
        window: (window.lo, window.hi),
        seeds_per_axis,
        time_step,
        capture,
        degeneracy,
        hypothesis_samples,
        grid_check,
    };

    // trace
    let mut s = take("trace");
    let radius = match s.one("radius")? {
        Some((l, v)) => count(l, "trace.radius", &v)?,
        None => 2,
    };
    let psis = s
        .many("psi")
        .iter()
        .map(|(l, v)| psi(*l, "trace.psi", v))
        .collect::<Result<Vec<_>>>()?;
    let sweep = match s.one("sweep")? {
        Some((l, v)) => {
            let parts = split_top(&v, ',');
            if parts.len() != 3 {
                return Err(invalid("trace.sweep", "expected `lo, hi, count`"));
            }
            let sw = Sweep {
                lo: num(l, "trace.sweep", parts[0])?,
                hi: num(l, "trace.sweep", parts[1])?,
                count: count(l, "trace.sweep", parts[2])?,
            };
            if !(sw.lo < sw.hi) || sw.count < 2 {
                return Err(invalid("trace.sweep", "need lo < hi and at least 2 points"));
            }
            sw
        }
        None => Sweep {
            lo: window.lo,
            hi: window.hi,
            count: 201,
        },
    };
    s.finish()?;

    // oracle
    let mut s = take("oracle");
    let modes = match s.one("modes")? {
        Some((_, v)) if v.trim().is_empty() || v.trim() == "none" => Vec::new(),
        Some((_, v)) => v
            .split(',')
            .map(|m| VerifyMode::parse(m).ok_or_else(|| invalid("oracle.modes", format!("unknown mode `{}`", m.trim()))))
            .collect::<Result<Vec<_>>>()?,
        None => Vec::new(),
    };
    let mut mollifier = MollifierSpec::default();
    if let Some((l, v)) = s.one("eps_ladder")? {
        mollifier.ladder = nums(l, "oracle.eps_ladder", &v)?;
    }
    if let Some((l, v)) = s.one("points_per_eps")? {
        mollifier.points_per_eps = count(l, "oracle.points_per_eps", &v)?;
    }
    if let Some((l, v)) = s.one("budget")? {
        let b = num(l, "oracle.budget", &v)?;
        if !(b >= 1.0) || b.fract() != 0.0 {
            return Err(invalid("oracle.budget", "must be a positive integer"));
        }
        mollifier.budget = b as u128;
    }
    mollifier.validate().map_err(|e| match e {
        Error::Validation { key, reason } => invalid(&format!("oracle.{key}"), reason),
        other => other,
    })?;
    let mollified_psi = match s.one("mollified_psi")? {
        Some((l, v)) => Some(psi(l, "oracle.mollified_psi", &v)?),
        None => psis.first().cloned(),
    };
    let covering_model = match s.one("covering_model")? {
        Some((l, v)) => Some(parse_downstairs(l, "oracle.covering_model", &v)?),
        None => None,
    };
    let covering_radius = match s.one("covering_radius")? {
        Some((l, v)) => count(l, "oracle.covering_radius", &v)?,
        None => 4,
    };
    let covering_psi = match s.one("covering_psi")? {
        Some((l, v)) => Some(psi(l, "oracle.covering_psi", &v)?),
        None => psis.first().cloned(),
    };
    let catmap_max = match s.one("catmap_max")? {
        Some((l, v)) => count(l, "oracle.catmap_max", &v)?,
        None => 3,
    };
    if !(1..=12).contains(&catmap_max) {
        return Err(invalid("oracle.catmap_max", "must lie in 1..=12"));
    }
    s.finish()?;
    if modes.contains(&VerifyMode::Covering) && covering_model.is_none() {
        return Err(invalid("oracle.covering_model", "required by the covering mode"));
    }
    if modes.contains(&VerifyMode::Mollified) && mollified_psi.is_none() {
        return Err(invalid("oracle.mollified_psi", "required by the mollified mode"));
    }
    if modes.contains(&VerifyMode::Covering) && covering_psi.is_none() {
        return Err(invalid("oracle.covering_psi", "required by the covering mode"));
    }

    Ok(RunConfig {
        name,
        seed,
        chart,
        group,
        flow,
        bundle,
        orbits,
        trace: TraceConfig {
            radius,
            psi: psis,
            sweep,
        },
        oracle: OracleConfig {
            modes,
            mollifier,
            mollified_psi,
            covering_model,
            covering_radius,
            covering_psi,
            catmap_max,
        },
    })
}

fn bundle_cocycle(b: &BundleConfig, labels: &[String], generators: usize) -> Result<BundleCocycle> {
    let cocycle = BundleCocycle {
        rank: b.rank,
        generator: MatrixExpr::parse(&b.generator, labels).map_err(rekey("bundle.generator"))?,
        endomorphism: MatrixExpr::parse(&b.endomorphism, labels).map_err(rekey("bundle.endomorphism"))?,
        fiber_actions: b
            .fiber_actions
            .iter()
            .map(|f| MatrixExpr::parse(f, labels))
            .collect::<Result<Vec<_>>>()
            .map_err(rekey("bundle.fiber_action"))?,
    };
    cocycle.validate(generators).map_err(rekey("bundle"))?;
    Ok(cocycle)
}

// ---------------------------------------------------------------------------
// emission and derived objects

impl RunConfig {
    /// Sections in canonical order as `(section, [(key, value)])`; the
    /// preamble is the section named "".
    pub fn entries(&self) -> Vec<(&'static str, Vec<(String, String)>)> {
        let kv = |k: &str, v: String| (k.to_string(), v);
        let mut chart = vec![
            kv("labels", self.chart.labels.join(", ")),
            kv("lo", fnums(&self.chart.lo)),
            kv("hi", fnums(&self.chart.hi)),
        ];
        if let Some(q) = &self.chart.quotient {
            chart.push(kv("quotient", q.source.clone()));
        }
        let mut group = vec![kv("kind", self.group.kind.name().into())];
        for g in &self.group.generators {
            group.push(kv("generator", g.source.clone()));
        }
        if let Some(d) = &self.group.direction {
            group.push(kv("direction", fnums(d)));
        }
        group.push(kv("window", window_text(&self.group.window)));
        if let Some(w) = &self.group.window_alt {
            group.push(kv("window_alt", window_text(w)));
        }
        group.push(kv("g", self.group.g.clone()));
        group.push(kv("cutoff_grid", self.group.cutoff_grid.to_string()));
        let mut flow: Vec<_> = self
            .chart
            .labels
            .iter()
            .zip(&self.flow.field)
            .map(|(l, u)| kv(&format!("u.{l}"), u.clone()))
            .collect();
        flow.push(kv("rtol", fnum(self.flow.rtol)));
        flow.push(kv("atol", fnum(self.flow.atol)));
        flow.push(kv("t_max", fnum(self.flow.t_max)));
        let mut bundle = vec![
            kv("rank", self.bundle.rank.to_string()),
            kv("generator", self.bundle.generator.clone()),
            kv("endomorphism", self.bundle.endomorphism.clone()),
        ];
        for f in &self.bundle.fiber_actions {
            bundle.push(kv("fiber_action", f.clone()));
        }
        let o = &self.orbits;
        let orbits = vec![
            kv("window", fnums(&[o.window.0, o.window.1])),
            kv("seeds_per_axis", o.seeds_per_axis.to_string()),
            kv("time_step", fnum(o.time_step)),
            kv("capture", fnum(o.capture)),
            kv("degeneracy", fnum(o.degeneracy)),
            kv("hypothesis_samples", o.hypothesis_samples.to_string()),
            kv("grid_check", o.grid_check.to_string()),
        ];
        let t = &self.trace;
        let mut trace = vec![kv("radius", t.radius.to_string())];
        for p in &t.psi {
            trace.push(kv("psi", p.to_string()));
        }
        trace.push(kv(
            "sweep",
            format!("{}, {}, {}", fnum(t.sweep.lo), fnum(t.sweep.hi), t.sweep.count),
        ));
        let q = &self.oracle;
        let modes = if q.modes.is_empty() {
            "none".to_string()
        } else {
            q.modes.iter().map(|m| m.name()).collect::<Vec<_>>().join(", ")
        };
        let mut oracle = vec![
            kv("modes", modes),
            kv("eps_ladder", fnums(&q.mollifier.ladder)),
            kv("points_per_eps", q.mollifier.points_per_eps.to_string()),
            kv("budget", q.mollifier.budget.to_string()),
        ];
        if let Some(p) = &q.mollified_psi {
            oracle.push(kv("mollified_psi", p.to_string()));
        }
        if let Some(m) = &q.covering_model {
            oracle.push(kv("covering_model", downstairs_text(m)));
        }
        oracle.push(kv("covering_radius", q.covering_radius.to_string()));
        if let Some(p) = &q.covering_psi {
            oracle.push(kv("covering_psi", p.to_string()));
        }
        oracle.push(kv("catmap_max", q.catmap_max.to_string()));
        vec![
            ("", vec![kv("name", self.name.clone()), kv("seed", self.seed.to_string())]),
            ("chart", chart),
            ("group", group),
            ("flow", flow),
            ("bundle", bundle),
            ("orbits", orbits),
            ("trace", trace),
            ("oracle", oracle),
        ]
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (section, kvs) in self.entries() {
            if !section.is_empty() {
                let _ = writeln!(out, "\n[{section}]");
            }
            for (k, v) in kvs {
                let _ = writeln!(out, "{k} = {v}");
            }
        }
        out
    }

    /// JSON echo for reports. Repeated keys become arrays.
    pub fn to_json(&self) -> Value {
        let mut root = Map::new();
        for (section, kvs) in self.entries() {
            let mut obj = Map::new();
            for (k, v) in kvs {
                match obj.get_mut(&k) {
                    Some(Value::Array(a)) => a.push(Value::String(v)),
                    Some(prev) => {
                        let first = prev.take();
                        *prev = Value::Array(vec![first, Value::String(v)]);
                    }
                    None => {
                        obj.insert(k, Value::String(v));
                    }
                }
            }
            if section.is_empty() {
                root.extend(obj);
            } else {
                root.insert(section.to_string(), Value::Object(obj));
            }
        }
        Value::Object(root)
    }

    pub fn summary(&self) -> String {
        format!(
            "{}: {}-dimensional chart ({}), group {} with {} generator(s), rank-{} bundle, periods in [{}, {}], g = {}",
            self.name,
            self.chart.labels.len(),
            self.chart.labels.join(", "),
            self.group.kind.name(),
            self.group.generators.len(),
            self.bundle.rank,
            self.orbits.window.0,
            self.orbits.window.1,
            self.group.g,
        )
    }

    pub fn window(&self) -> Window {
        Window {
            lo: self.orbits.window.0,
            hi: self.orbits.window.1,
        }
    }

    pub fn seed_spec(&self) -> SeedSpec {
        SeedSpec {
            per_axis: self.orbits.seeds_per_axis,
            time_step: self.orbits.time_step,
            capture: self.orbits.capture,
        }
    }

    pub fn assemble_spec(&self) -> AssembleSpec {
        AssembleSpec {
            radius: self.trace.radius,
            window: self.window(),
            seeds: self.seed_spec(),
            degeneracy: self.orbits.degeneracy,
            seed: self.seed,
        }
    }

    pub fn group_model(&self) -> Result<GroupModel> {
        let n = self.chart.labels.len();
        let gens: Vec<MapSpec> = self.group.generators.iter().map(|g| g.map.clone()).collect();
        if gens.iter().any(|g| g.dim() != n) {
            return Err(invalid("group.generator", format!("generators must act on R^{n}")));
        }
        match self.group.kind {
            GroupKindName::Trivial => Ok(GroupModel::trivial(n)),
            GroupKindName::FreeAbelian => GroupModel::free_abelian(n, gens).map_err(rekey("group.generator")),
            GroupKindName::Finite => GroupModel::finite(n, gens).map_err(rekey("group.generator")),
            GroupKindName::TranslationLine => {
                let d = self.group.direction.clone().unwrap_or_default();
                if d.len() != n {
                    return Err(invalid("group.direction", format!("needs {n} components")));
                }
                GroupModel::translation_line(DVector::from_vec(d)).map_err(rekey("group.direction"))
            }
        }
    }

    pub fn build_system(&self) -> Result<CoverSystem> {
        self.build_system_with_window(&self.group.window)
    }

    /// The configured system with the cutoff built from `window`.
    pub fn build_system_with_window(&self, window: &WindowSpec) -> Result<CoverSystem> {
        let labels = self.chart.labels.clone();
        let n = labels.len();
        let group = Arc::new(self.group_model()?);
        let sample_box = SampleBox::new(self.chart.lo.clone(), self.chart.hi.clone()).map_err(rekey("chart.lo"))?;
        let quotient = match &self.chart.quotient {
            Some(q) => Some(QuotientDeck::new(n, q.map.clone()).map_err(rekey("chart.quotient"))?),
            None => None,
        };
        let cutoff = build_cutoff(window, &group, &sample_box, self.group.cutoff_grid).map_err(rekey("group.window"))?;
        let field = FlowField::parse(
            &self.flow.field,
            &labels,
            Tolerances {
                rtol: self.flow.rtol,
                atol: self.flow.atol,
            },
            self.flow.t_max,
        )
        .map_err(rekey("flow.u"))?;
        let bundle = bundle_cocycle(&self.bundle, &labels, group.generators().len())?;
        Ok(CoverSystem {
            chart: CoverChart::new(labels, sample_box, quotient).map_err(rekey("chart"))?,
            group,
            field,
            bundle,
            cutoff,
        })
    }
}
