//! Declarative scenario files.
//!
//! A scenario is a TOML document with flat sections. Every key is checked:
//! unknown keys, missing keys and out-of-range values are all collected and
//! reported together, each with the dotted path of the offending key.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use toml::{Table, Value};

use crate::comparison::ProbeBox;
use crate::linear::SystemForm;
use crate::model::{LinearCoefficients, MeanFunctional, TerminalCondition};
use crate::paths::{Atom, LevyMeasure};
use crate::picard::{PicardSettings, RegressionBasis, Scheme};
use crate::profile::{AtomProfile, Profile, ScalarFn};
use crate::utility::{JRoute, UtilityCoefficients, WealthParams};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Picard,
    Linear,
    Compare,
    Utility,
    QCheck,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::Picard => "picard",
            Mode::Linear => "linear",
            Mode::Compare => "compare",
            Mode::Utility => "utility",
            Mode::QCheck => "qcheck",
        }
    }
}

impl FromStr for Mode {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Ok(match s {
            "picard" => Mode::Picard,
            "linear" => Mode::Linear,
            "compare" => Mode::Compare,
            "utility" => Mode::Utility,
            "qcheck" => Mode::QCheck,
            other => return Err(format!("unknown mode {other:?} (expected picard, linear, compare, utility or qcheck)")),
        })
    }
}

/// A built-in driver with its parameters.
#[derive(Clone, Debug, PartialEq)]
pub enum DriverSpec {
    Zero,
    Time { gamma: Profile },
    Affine { constant: f64, y: f64, z: f64, k: Vec<f64>, mean: Vec<f64> },
    Mixed { constant: f64, y_lin: f64, y_sin: f64, z_lin: f64, z_tanh: f64, k_lin: f64, k_tanh: f64, mean_lin: f64, mean_tanh: f64 },
    /// Uses the `[linear]` coefficients.
    Linear,
}

#[derive(Clone, Debug)]
pub struct CompareSpec {
    pub driver2: DriverSpec,
    pub terminal2: TerminalCondition,
    pub eta_bound: AtomProfile,
    pub probes: ProbeBox,
    pub override_hypotheses: bool,
}

#[derive(Clone, Debug)]
pub struct UtilitySpec {
    pub wealth: WealthParams,
    pub coeffs: UtilityCoefficients,
    pub route: JRoute,
    /// Evaluate the perturbation family around the candidate control.
    pub scan: bool,
}

#[derive(Clone, Debug)]
pub struct ScenarioConfig {
    pub mode: Mode,
    pub seed: u64,
    pub n_paths: usize,
    pub horizon: f64,
    pub steps: usize,
    pub levy: LevyMeasure,
    pub driver: DriverSpec,
    pub mean: MeanFunctional,
    pub terminal: TerminalCondition,
    pub solver: PicardSettings,
    pub scheme: Scheme,
    pub linear: LinearCoefficients,
    pub form: SystemForm,
    pub direct: bool,
    pub qcheck_picard: bool,
    pub compare: Option<CompareSpec>,
    pub utility: Option<UtilitySpec>,
}

/// One validation failure with the dotted path of the key.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfigIssue {
    pub path: String,
    pub message: String,
}

impl fmt::Display for ConfigIssue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.path, self.message)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfigErrors(pub Vec<ConfigIssue>);

impl fmt::Display for ConfigErrors {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, e) in self.0.iter().enumerate() {
            if i > 0 {
                writeln!(f)?;
            }
            write!(f, "{e}")?;
        }
        Ok(())
    }
}

impl std::error::Error for ConfigErrors {}

impl ConfigErrors {
    pub fn mentions(&self, path: &str) -> bool {
        self.0.iter().any(|e| e.path == path)
    }
}

#[derive(Default)]
struct Issues(Vec<ConfigIssue>);

impl Issues {
    fn push(&mut self, path: impl Into<String>, message: impl Into<String>) {
        self.0.push(ConfigIssue { path: path.into(), message: message.into() });
    }
}

fn join(prefix: &str, key: &str) -> String {
    if prefix.is_empty() {
        key.to_string()
    } else {
        format!("{prefix}.{key}")
    }
}

/// A table being read; keys that are never looked at are reported as
/// unknown by `finish`.
struct Section<'a> {
    path: String,
    table: Option<&'a Table>,
    seen: BTreeSet<String>,
}

impl<'a> Section<'a> {
    fn new(path: &str, table: Option<&'a Table>) -> Self {
        Section { path: path.to_string(), table, seen: BTreeSet::new() }
    }

    fn of(parent: &mut Section<'a>, key: &str, is: &mut Issues) -> Section<'a> {
        let path = join(&parent.path, key);
        match parent.raw(key) {
            None => Section::new(&path, None),
            Some(Value::Table(t)) => Section::new(&path, Some(t)),
            Some(_) => {
                is.push(&path, "expected a table");
                Section::new(&path, None)
            }
        }
    }

    fn present(&self) -> bool {
        self.table.is_some()
    }

    fn key(&self, key: &str) -> String {
        join(&self.path, key)
    }

    fn raw(&mut self, key: &str) -> Option<&'a Value> {
        self.seen.insert(key.to_string());
        self.table.and_then(|t| t.get(key))
    }

    fn f64_opt(&mut self, key: &str, is: &mut Issues) -> Option<f64> {
        let v = self.raw(key)?;
        match v {
            Value::Float(x) if x.is_finite() => Some(*x),
            Value::Integer(i) => Some(*i as f64),
            _ => {
                is.push(self.key(key), "expected a finite number");
                None
            }
        }
    }

    fn f64_or(&mut self, key: &str, default: f64, is: &mut Issues) -> f64 {
        self.f64_opt(key, is).unwrap_or(default)
    }

    fn f64_req(&mut self, key: &str, is: &mut Issues) -> Option<f64> {
        if self.table.is_some_and(|t| t.contains_key(key)) {
            self.f64_opt(key, is)
        } else {
            self.seen.insert(key.to_string());
            is.push(self.key(key), "missing required key");
            None
        }
    }

    fn int_opt(&mut self, key: &str, is: &mut Issues) -> Option<i64> {
        match self.raw(key)? {
            Value::Integer(i) => Some(*i),
            _ => {
                is.push(self.key(key), "expected an integer");
                None
            }
        }
    }

    fn bool_or(&mut self, key: &str, default: bool, is: &mut Issues) -> bool {
        match self.raw(key) {
            None => default,
            Some(Value::Boolean(b)) => *b,
            Some(_) => {
                is.push(self.key(key), "expected true or false");
                default
            }
        }
    }

    fn str_opt(&mut self, key: &str, is: &mut Issues) -> Option<&'a str> {
        match self.raw(key)? {
            Value::String(s) => Some(s.as_str()),
            _ => {
                is.push(self.key(key), "expected a string");
                None
            }
        }
    }

    fn f64_list(&mut self, key: &str, is: &mut Issues) -> Vec<f64> {
        match self.raw(key) {
            None => Vec::new(),
            Some(Value::Array(a)) => {
                let mut out = Vec::with_capacity(a.len());
                for (i, v) in a.iter().enumerate() {
                    match v {
                        Value::Float(x) if x.is_finite() => out.push(*x),
                        Value::Integer(x) => out.push(*x as f64),
                        _ => is.push(format!("{}[{i}]", self.key(key)), "expected a finite number"),
                    }
                }
                out
            }
            Some(_) => {
                is.push(self.key(key), "expected an array of numbers");
                Vec::new()
            }
        }
    }

    fn finish(self, is: &mut Issues) {
        if let Some(t) = self.table {
            for k in t.keys() {
                if !self.seen.contains(k) {
                    is.push(join(&self.path, k), "unknown key");
                }
            }
        }
    }
}

fn parse_profile(path: &str, v: &Value, is: &mut Issues) -> Option<Profile> {
    match v {
        Value::Float(x) if x.is_finite() => Some(Profile::Constant(*x)),
        Value::Integer(x) => Some(Profile::Constant(*x as f64)),
        Value::Table(t) => {
            let mut s = Section::new(path, Some(t));
            let kind = s.str_opt("kind", is);
            let p = match kind {
                Some("constant") => s.f64_req("value", is).map(Profile::Constant),
                Some("affine") => match (s.f64_req("intercept", is), s.f64_req("slope", is)) {
                    (Some(intercept), Some(slope)) => Some(Profile::Affine { intercept, slope }),
                    _ => None,
                },
                Some("exponential") => match (s.f64_req("scale", is), s.f64_req("rate", is)) {
                    (Some(scale), Some(rate)) => Some(Profile::Exponential { scale, rate }),
                    _ => None,
                },
                Some("periodic") => match (s.f64_req("mean", is), s.f64_req("amplitude", is), s.f64_req("frequency", is)) {
                    (Some(mean), Some(amplitude), Some(frequency)) => Some(Profile::Periodic { mean, amplitude, frequency }),
                    _ => None,
                },
                Some(other) => {
                    is.push(join(path, "kind"), format!("unknown profile {other:?} (constant, affine, exponential, periodic)"));
                    return None;
                }
                None => {
                    is.push(join(path, "kind"), "missing required key");
                    return None;
                }
            };
            s.finish(is);
            p
        }
        _ => {
            is.push(path, "expected a number or a profile table");
            None
        }
    }
}

fn parse_atom_profile(path: &str, v: &Value, is: &mut Issues) -> Option<AtomProfile> {
    match v {
        Value::Array(a) => {
            let ps: Vec<Option<Profile>> =
                a.iter().enumerate().map(|(i, x)| parse_profile(&format!("{path}[{i}]"), x, is)).collect();
            ps.into_iter().collect::<Option<Vec<_>>>().map(AtomProfile::PerAtom)
        }
        Value::Table(t) if t.get("kind").and_then(Value::as_str) == Some("mark_scaled") => {
            let mut s = Section::new(path, Some(t));
            s.raw("kind");
            let p = match s.raw("profile") {
                Some(inner) => parse_profile(&s.key("profile"), inner, is),
                None => {
                    is.push(s.key("profile"), "missing required key");
                    None
                }
            };
            s.finish(is);
            p.map(AtomProfile::MarkScaled)
        }
        other => parse_profile(path, other, is).map(AtomProfile::Uniform),
    }
}

fn parse_scalar_fn(path: &str, v: &Value, is: &mut Issues) -> Option<ScalarFn> {
    let Value::Table(t) = v else {
        is.push(path, "expected a function table");
        return None;
    };
    let mut s = Section::new(path, Some(t));
    let f = match s.str_opt("kind", is) {
        Some("polynomial") => {
            let c = s.f64_list("coefficients", is);
            if c.is_empty() {
                is.push(s.key("coefficients"), "needs at least one coefficient");
                None
            } else {
                Some(ScalarFn::Polynomial(c))
            }
        }
        Some("exp") => match (s.f64_req("scale", is), s.f64_req("rate", is)) {
            (Some(scale), Some(rate)) => Some(ScalarFn::Exp { scale, rate }),
            _ => None,
        },
        Some("sin") => match (s.f64_req("offset", is), s.f64_req("amplitude", is), s.f64_req("frequency", is)) {
            (Some(offset), Some(amplitude), Some(frequency)) => Some(ScalarFn::Sin { offset, amplitude, frequency }),
            _ => None,
        },
        Some(other) => {
            is.push(s.key("kind"), format!("unknown function {other:?} (polynomial, exp, sin)"));
            None
        }
        None => {
            is.push(s.key("kind"), "missing required key");
            None
        }
    };
    s.finish(is);
    f
}

fn profile_key(s: &mut Section<'_>, key: &str, is: &mut Issues) -> Profile {
    let path = s.key(key);
    s.raw(key).and_then(|v| parse_profile(&path, v, is)).unwrap_or_default()
}

fn atom_profile_key(s: &mut Section<'_>, key: &str, is: &mut Issues) -> AtomProfile {
    let path = s.key(key);
    s.raw(key).and_then(|v| parse_atom_profile(&path, v, is)).unwrap_or_default()
}

fn check_atom_count(path: &str, p: &AtomProfile, atoms: usize, is: &mut Issues) {
    if let Some(n) = p.atom_count() {
        if n != atoms {
            is.push(path, format!("lists {n} profiles but the measure has {atoms} atoms"));
        }
    }
}

/// Checks `lower < value` (or `≤` when `inclusive`) for an atom profile on
/// the grid nodes and atoms.
fn check_atom_bound(path: &str, p: &AtomProfile, nodes: &[f64], levy: &LevyMeasure, lower: f64, inclusive: bool, is: &mut Issues) {
    if p.atom_count().is_some_and(|n| n != levy.len()) {
        return;
    }
    for &t in nodes {
        for (j, a) in levy.atoms().iter().enumerate() {
            let v = p.value(t, j, a.mark);
            let ok = if inclusive { v >= lower } else { v > lower };
            if !ok {
                let rel = if inclusive { "at least" } else { "greater than" };
                is.push(path, format!("value {v} at t = {t}, atom {j} must be {rel} {lower}"));
                return;
            }
        }
    }
}

fn check_finite(path: &str, p: &Profile, nodes: &[f64], is: &mut Issues) {
    if let Some(t) = nodes.iter().find(|&&t| !p.value(t).is_finite()) {
        is.push(path, format!("not finite at t = {t}"));
    }
}

fn parse_terminal(mut s: Section<'_>, levy: &LevyMeasure, is: &mut Issues) -> Option<TerminalCondition> {
    if !s.present() {
        is.push(&s.path, "missing required section");
        return None;
    }
    let kind = s.str_opt("kind", is);
    let tc = match kind {
        Some("constant") => s.f64_req("c", is).map(TerminalCondition::Constant),
        Some("brownian_linear") => match (s.f64_req("a", is), s.f64_req("b", is)) {
            (Some(a), Some(b)) => Some(TerminalCondition::BrownianLinear { a, b }),
            _ => None,
        },
        Some("jump_linear") => {
            let psi = atom_profile_key(&mut s, "psi", is);
            check_atom_count(&s.key("psi"), &psi, levy.len(), is);
            Some(TerminalCondition::JumpLinear { psi })
        }
        Some("smooth_brownian") => {
            let p = s.key("phi");
            s.raw("phi").and_then(|v| parse_scalar_fn(&p, v, is)).map(|phi| TerminalCondition::SmoothOfBrownian { phi })
        }
        Some("smooth_jump") => {
            let p = s.key("phi");
            let phi = s.raw("phi").and_then(|v| parse_scalar_fn(&p, v, is));
            let psi = atom_profile_key(&mut s, "psi", is);
            check_atom_count(&s.key("psi"), &psi, levy.len(), is);
            phi.map(|phi| TerminalCondition::SmoothOfJump { phi, psi })
        }
        Some(other) => {
            is.push(
                s.key("kind"),
                format!("unknown terminal condition {other:?} (constant, brownian_linear, jump_linear, smooth_brownian, smooth_jump)"),
            );
            None
        }
        None => {
            is.push(s.key("kind"), "missing required key");
            None
        }
    };
    s.finish(is);
    tc
}

fn parse_driver(mut s: Section<'_>, levy: &LevyMeasure, is: &mut Issues) -> (DriverSpec, Option<MeanFunctional>) {
    let mean = match s.str_opt("mean", is) {
        None => None,
        Some("y") => Some(MeanFunctional::Y),
        Some("yzk") => Some(MeanFunctional::YZK),
        Some("full") => Some(MeanFunctional::Full),
        Some("y_squared") => Some(MeanFunctional::YSquared),
        Some(other) => {
            is.push(s.key("mean"), format!("unknown mean functional {other:?} (y, yzk, full, y_squared)"));
            None
        }
    };
    let spec = match s.str_opt("kind", is).unwrap_or("zero") {
        "zero" => DriverSpec::Zero,
        "time" => DriverSpec::Time { gamma: profile_key(&mut s, "gamma", is) },
        "affine" => {
            let k = s.f64_list("k", is);
            if !k.is_empty() && k.len() != levy.len() {
                is.push(s.key("k"), format!("has {} entries but the measure has {} atoms", k.len(), levy.len()));
            }
            DriverSpec::Affine {
                constant: s.f64_or("constant", 0.0, is),
                y: s.f64_or("y", 0.0, is),
                z: s.f64_or("z", 0.0, is),
                k,
                mean: s.f64_list("mean_coefficients", is),
            }
        }
        "mixed" => DriverSpec::Mixed {
            constant: s.f64_or("constant", 0.0, is),
            y_lin: s.f64_or("y_lin", 0.0, is),
            y_sin: s.f64_or("y_sin", 0.0, is),
            z_lin: s.f64_or("z_lin", 0.0, is),
            z_tanh: s.f64_or("z_tanh", 0.0, is),
            k_lin: s.f64_or("k_lin", 0.0, is),
            k_tanh: s.f64_or("k_tanh", 0.0, is),
            mean_lin: s.f64_or("mean_lin", 0.0, is),
            mean_tanh: s.f64_or("mean_tanh", 0.0, is),
        },
        "linear" => DriverSpec::Linear,
        other => {
            is.push(s.key("kind"), format!("unknown driver {other:?} (zero, time, affine, mixed, linear)"));
            DriverSpec::Zero
        }
    };
    s.finish(is);
    (spec, mean)
}

fn default_mean(spec: &DriverSpec) -> MeanFunctional {
    match spec {
        DriverSpec::Linear => MeanFunctional::Full,
        DriverSpec::Affine { mean, .. } if mean.len() > 1 => MeanFunctional::YZK,
        _ => MeanFunctional::Y,
    }
}

/// Parses and validates a scenario document.
pub fn parse_config(text: &str) -> std::result::Result<ScenarioConfig, ConfigErrors> {
    let root: Table = text.parse().map_err(|e: toml::de::Error| {
        ConfigErrors(vec![ConfigIssue { path: "<document>".into(), message: e.message().to_string() }])
    })?;
    let mut is = Issues::default();
    let mut top = Section::new("", Some(&root));

    let mode = match top.str_opt("mode", &mut is) {
        Some(m) => m.parse::<Mode>().map_err(|e| is.push("mode", e)).ok(),
        None => {
            is.push("mode", "missing required key");
            None
        }
    };
    let seed = match top.int_opt("seed", &mut is) {
        Some(s) if s >= 0 => s as u64,
        Some(s) => {
            is.push("seed", format!("must be non-negative, got {s}"));
            0
        }
        None => 0,
    };
    let n_paths = match top.int_opt("n_paths", &mut is) {
        Some(n) if n >= 1 => n as usize,
        Some(n) => {
            is.push("n_paths", format!("must be at least 1, got {n}"));
            1
        }
        None => {
            is.push("n_paths", "missing required key");
            1
        }
    };

    let mut grid = Section::of(&mut top, "grid", &mut is);
    if !grid.present() {
        is.push("grid", "missing required section");
    }
    let horizon = match grid.f64_req("horizon", &mut is) {
        Some(h) if h > 0.0 => h,
        Some(h) => {
            is.push("grid.horizon", format!("must be positive, got {h}"));
            1.0
        }
        None => 1.0,
    };
    let steps = match grid.int_opt("steps", &mut is) {
        Some(m) if m >= 1 => m as usize,
        Some(m) => {
            is.push("grid.steps", format!("must be at least 1, got {m}"));
            1
        }
        None => {
            if grid.present() {
                is.push("grid.steps", "missing required key");
            }
            1
        }
    };
    grid.finish(&mut is);
    let nodes: Vec<f64> = (0..=steps).map(|i| i as f64 * (horizon / steps as f64)).collect();

    let mut lev = Section::of(&mut top, "levy", &mut is);
    let marks = lev.f64_list("marks", &mut is);
    let weights = lev.f64_list("weights", &mut is);
    let mut levy = LevyMeasure::empty();
    if marks.len() != weights.len() {
        is.push("levy.weights", format!("has {} entries but levy.marks has {}", weights.len(), marks.len()));
    } else {
        let mut ok = true;
        for (j, (&m, &w)) in marks.iter().zip(&weights).enumerate() {
            if m == 0.0 {
                is.push(format!("levy.marks[{j}]"), "mark must be nonzero");
                ok = false;
            }
            if w <= 0.0 {
                is.push(format!("levy.weights[{j}]"), format!("weight must be positive, got {w}"));
                ok = false;
            }
            if marks[..j].contains(&m) {
                is.push(format!("levy.marks[{j}]"), format!("duplicate atom mark {m}"));
                ok = false;
            }
        }
        if ok {
            match LevyMeasure::new(marks.iter().zip(&weights).map(|(&mark, &weight)| Atom { mark, weight }).collect()) {
                Ok(l) => levy = l,
                Err(e) => is.push("levy", e.to_string()),
            }
        }
    }
    lev.finish(&mut is);

    let dsec = Section::of(&mut top, "driver", &mut is);
    let (driver, mean) = parse_driver(dsec, &levy, &mut is);
    let mean = mean.unwrap_or_else(|| default_mean(&driver));
    if driver == DriverSpec::Linear && mean != MeanFunctional::Full {
        is.push("driver.mean", "the linear driver reads the full mean vector; use mean = \"full\"");
    }
    if let DriverSpec::Affine { mean: m, .. } = &driver {
        if m.len() > mean.dim(levy.len()) {
            is.push("driver.mean_coefficients", format!("has {} entries but the mean functional has {}", m.len(), mean.dim(levy.len())));
        }
    }

    let needs_terminal = !matches!(mode, Some(Mode::Utility));
    let tsec = Section::of(&mut top, "terminal", &mut is);
    let terminal = if needs_terminal || tsec.present() {
        parse_terminal(tsec, &levy, &mut is)
    } else {
        tsec.finish(&mut is);
        None
    }
    .unwrap_or(TerminalCondition::Constant(0.0));

    let mut sol = Section::of(&mut top, "solver", &mut is);
    let mut solver = PicardSettings::default();
    solver.tol = sol.f64_or("tol", solver.tol, &mut is);
    if !(solver.tol > 0.0) {
        is.push("solver.tol", format!("must be positive, got {}", solver.tol));
    }
    if let Some(n) = sol.int_opt("max_iter", &mut is) {
        if n < 1 {
            is.push("solver.max_iter", format!("must be at least 1, got {n}"));
        } else {
            solver.max_iter = n as usize;
        }
    }
    let mut basis = RegressionBasis::default();
    if let Some(d) = sol.int_opt("degree", &mut is) {
        if !(1..=8).contains(&d) {
            is.push("solver.degree", format!("must lie in 1..=8, got {d}"));
        } else {
            basis.degree = d as usize;
        }
    }
    basis.ridge = sol.f64_or("ridge", basis.ridge, &mut is);
    if basis.ridge < 0.0 {
        is.push("solver.ridge", format!("must be non-negative, got {}", basis.ridge));
    }
    basis.jumps = sol.bool_or("jump_features", true, &mut is);
    solver.basis = basis;
    let scheme = match sol.str_opt("scheme", &mut is) {
        None | Some("full_freeze") => Scheme::FullFreeze,
        Some("mean_freeze") => Scheme::MeanFreeze,
        Some(other) => {
            is.push("solver.scheme", format!("unknown scheme {other:?} (full_freeze, mean_freeze)"));
            Scheme::FullFreeze
        }
    };
    sol.finish(&mut is);

    let mut lin = Section::of(&mut top, "linear", &mut is);
    let mut linear = LinearCoefficients::zero(terminal.clone());
    linear.alpha1 = profile_key(&mut lin, "alpha1", &mut is);
    linear.alpha2 = profile_key(&mut lin, "alpha2", &mut is);
    linear.beta1 = profile_key(&mut lin, "beta1", &mut is);
    linear.beta2 = profile_key(&mut lin, "beta2", &mut is);
    linear.eta1 = atom_profile_key(&mut lin, "eta1", &mut is);
    linear.eta2 = atom_profile_key(&mut lin, "eta2", &mut is);
    linear.gamma = profile_key(&mut lin, "gamma", &mut is);
    for (k, p) in [("alpha1", &linear.alpha1), ("alpha2", &linear.alpha2), ("beta1", &linear.beta1), ("beta2", &linear.beta2), ("gamma", &linear.gamma)] {
        check_finite(&format!("linear.{k}"), p, &nodes, &mut is);
    }
    for (k, p) in [("eta1", &linear.eta1), ("eta2", &linear.eta2)] {
        check_atom_count(&format!("linear.{k}"), p, levy.len(), &mut is);
    }
    check_atom_bound("linear.eta1", &linear.eta1, &nodes, &levy, -1.0, false, &mut is);
    let form = match lin.str_opt("form", &mut is) {
        None | Some("derived") => SystemForm::Derived,
        Some("published") => SystemForm::Published,
        Some(other) => {
            is.push("linear.form", format!("unknown system form {other:?} (derived, published)"));
            SystemForm::Derived
        }
    };
    let direct = lin.bool_or("direct", true, &mut is);
    lin.finish(&mut is);

    let mut q = Section::of(&mut top, "qcheck", &mut is);
    let qcheck_picard = q.bool_or("picard", false, &mut is);
    q.finish(&mut is);
    if mode == Some(Mode::QCheck) && (!linear.beta2.is_zero() || !linear.eta2.is_zero()) {
        is.push("linear.beta2", "qcheck needs beta2 = 0 and eta2 = 0");
    }

    let mut csec = Section::of(&mut top, "compare", &mut is);
    let compare = if mode == Some(Mode::Compare) || csec.present() {
        if !csec.present() {
            is.push("compare", "missing required section");
        }
        let d2 = Section::of(&mut top, "driver2", &mut is);
        if !d2.present() {
            is.push("driver2", "missing required section");
        }
        let (driver2, mean2) = parse_driver(d2, &levy, &mut is);
        if mean2.is_some_and(|m| m != mean) {
            is.push("driver2.mean", "both drivers must read the same mean functional");
        }
        let terminal2 = parse_terminal(Section::of(&mut top, "terminal2", &mut is), &levy, &mut is);
        let eta_bound = atom_profile_key(&mut csec, "eta_bound", &mut is);
        check_atom_count("compare.eta_bound", &eta_bound, levy.len(), &mut is);
        check_atom_bound("compare.eta_bound", &eta_bound, &nodes, &levy, -1.0, true, &mut is);
        let mut probes = ProbeBox::default();
        probes.seed = seed ^ 0x5eed;
        if let Some(n) = csec.int_opt("probes", &mut is) {
            if n < 1 {
                is.push("compare.probes", format!("must be at least 1, got {n}"));
            } else {
                probes.probes = n as usize;
            }
        }
        let b = csec.f64_or("probe_box", 5.0, &mut is);
        if !(b > 0.0) {
            is.push("compare.probe_box", format!("must be positive, got {b}"));
        }
        (probes.y, probes.z, probes.k, probes.mean) = (b, b, b, b);
        let override_hypotheses = csec.bool_or("override_hypotheses", false, &mut is);
        csec.finish(&mut is);
        terminal2.map(|terminal2| CompareSpec { driver2, terminal2, eta_bound, probes, override_hypotheses })
    } else {
        csec.finish(&mut is);
        None
    };

    let mut w = Section::of(&mut top, "wealth", &mut is);
    let mut u = Section::of(&mut top, "utility", &mut is);
    let utility = if mode == Some(Mode::Utility) || u.present() || w.present() {
        if !w.present() {
            is.push("wealth", "missing required section");
        }
        if !u.present() {
            is.push("utility", "missing required section");
        }
        let x0 = w.f64_or("x0", 1.0, &mut is);
        if !(x0 > 0.0) {
            is.push("wealth.x0", format!("must be positive, got {x0}"));
        }
        let wealth = WealthParams {
            x0,
            b0: profile_key(&mut w, "b0", &mut is),
            sigma0: profile_key(&mut w, "sigma0", &mut is),
            gamma0: atom_profile_key(&mut w, "gamma0", &mut is),
        };
        check_atom_count("wealth.gamma0", &wealth.gamma0, levy.len(), &mut is);
        check_atom_bound("wealth.gamma0", &wealth.gamma0, &nodes, &levy, -1.0, false, &mut is);
        w.finish(&mut is);

        let theta = match u.raw("theta") {
            None => Some(TerminalCondition::Constant(1.0)),
            Some(Value::Float(x)) => Some(TerminalCondition::Constant(*x)),
            Some(Value::Integer(x)) => Some(TerminalCondition::Constant(*x as f64)),
            Some(v) => parse_scalar_fn("utility.theta", v, &mut is).map(|phi| TerminalCondition::SmoothOfBrownian { phi }),
        };
        if let Some(TerminalCondition::Constant(c)) = theta {
            if !(c > 0.0) {
                is.push("utility.theta", format!("must be positive, got {c}"));
            }
        }
        if let Some(TerminalCondition::SmoothOfBrownian { phi }) = &theta {
            if !phi.lower_bound().is_some_and(|b| b > 0.0) {
                is.push("utility.theta", "must be bounded below by a positive constant");
            }
        }
        let coeffs = UtilityCoefficients {
            alpha0: profile_key(&mut u, "alpha0", &mut is),
            alpha1: profile_key(&mut u, "alpha1", &mut is),
            beta0: profile_key(&mut u, "beta0", &mut is),
            beta1: profile_key(&mut u, "beta1", &mut is),
            eta0: atom_profile_key(&mut u, "eta0", &mut is),
            eta1: atom_profile_key(&mut u, "eta1", &mut is),
            theta: theta.unwrap_or(TerminalCondition::Constant(1.0)),
        };
        for (k, p) in [("eta0", &coeffs.eta0), ("eta1", &coeffs.eta1)] {
            check_atom_count(&format!("utility.{k}"), p, levy.len(), &mut is);
        }
        check_atom_bound("utility.eta0", &coeffs.eta0, &nodes, &levy, -1.0, false, &mut is);
        check_atom_bound("utility.eta1", &coeffs.eta1, &nodes, &levy, -1.0, true, &mut is);
        let route = match u.str_opt("route", &mut is) {
            None | Some("mean_system") => JRoute::MeanSystem,
            Some("duality") => JRoute::Duality,
            Some("picard") => JRoute::Picard,
            Some(other) => {
                is.push("utility.route", format!("unknown route {other:?} (mean_system, duality, picard)"));
                JRoute::MeanSystem
            }
        };
        let scan = u.bool_or("scan", true, &mut is);
        u.finish(&mut is);
        Some(UtilitySpec { wealth, coeffs, route, scan })
    } else {
        w.finish(&mut is);
        u.finish(&mut is);
        None
    };

    for name in ["driver2", "terminal2"] {
        if compare.is_none() && mode != Some(Mode::Compare) {
            Section::of(&mut top, name, &mut is).finish(&mut is);
        }
    }
    top.finish(&mut is);

    if !is.0.is_empty() {
        return Err(ConfigErrors(is.0));
    }
    Ok(ScenarioConfig {
        mode: mode.expect("validated"),
        seed,
        n_paths,
        horizon,
        steps,
        levy,
        driver,
        mean,
        terminal,
        solver,
        scheme,
        linear,
        form,
        direct,
        qcheck_picard,
        compare,
        utility,
    })
}
