//! Deterministic coefficient functions of time and of (time, atom).

use std::f64::consts::PI;

/// A deterministic function of time.
#[derive(Clone, Debug, PartialEq)]
pub enum Profile {
    Constant(f64),
    /// `intercept + slope * t`
    Affine { intercept: f64, slope: f64 },
    /// `scale * exp(rate * t)`
    Exponential { scale: f64, rate: f64 },
    /// `mean + amplitude * sin(2π frequency t)`
    Periodic { mean: f64, amplitude: f64, frequency: f64 },
}

impl Default for Profile {
    fn default() -> Self {
        Profile::Constant(0.0)
    }
}

impl From<f64> for Profile {
    fn from(c: f64) -> Self {
        Profile::Constant(c)
    }
}

impl Profile {
    pub fn value(&self, t: f64) -> f64 {
        match *self {
            Profile::Constant(c) => c,
            Profile::Affine { intercept, slope } => intercept + slope * t,
            Profile::Exponential { scale, rate } => scale * (rate * t).exp(),
            Profile::Periodic { mean, amplitude, frequency } => {
                mean + amplitude * (2.0 * PI * frequency * t).sin()
            }
        }
    }

    /// True when the profile is identically zero.
    pub fn is_zero(&self) -> bool {
        match *self {
            Profile::Constant(c) => c == 0.0,
            Profile::Affine { intercept, slope } => intercept == 0.0 && slope == 0.0,
            Profile::Exponential { scale, .. } => scale == 0.0,
            Profile::Periodic { mean, amplitude, .. } => mean == 0.0 && amplitude == 0.0,
        }
    }

    /// Largest absolute value over the given nodes.
    pub fn sup_abs(&self, nodes: &[f64]) -> f64 {
        nodes.iter().map(|&t| self.value(t).abs()).fold(0.0, f64::max)
    }
}

/// A deterministic function of (time, atom).
#[derive(Clone, Debug, PartialEq)]
pub enum AtomProfile {
    /// Same profile for every atom.
    Uniform(Profile),
    /// One profile per atom, in atom order.
    PerAtom(Vec<Profile>),
    /// `mark * profile(t)`
    MarkScaled(Profile),
}

impl Default for AtomProfile {
    fn default() -> Self {
        AtomProfile::Uniform(Profile::Constant(0.0))
    }
}

impl From<f64> for AtomProfile {
    fn from(c: f64) -> Self {
        AtomProfile::Uniform(Profile::Constant(c))
    }
}

impl AtomProfile {
    /// Value at time `t` for atom `j` with mark `mark`.
    ///
    /// `PerAtom` lists shorter than the atom count read as zero past the end;
    /// configuration validation rejects such lists up front.
    pub fn value(&self, t: f64, j: usize, mark: f64) -> f64 {
        match self {
            AtomProfile::Uniform(p) => p.value(t),
            AtomProfile::PerAtom(ps) => ps.get(j).map_or(0.0, |p| p.value(t)),
            AtomProfile::MarkScaled(p) => mark * p.value(t),
        }
    }

    pub fn is_zero(&self) -> bool {
        match self {
            AtomProfile::Uniform(p) | AtomProfile::MarkScaled(p) => p.is_zero(),
            AtomProfile::PerAtom(ps) => ps.iter().all(Profile::is_zero),
        }
    }

    pub fn atom_count(&self) -> Option<usize> {
        match self {
            AtomProfile::PerAtom(ps) => Some(ps.len()),
            _ => None,
        }
    }
}

/// A scalar function with its derivative, used inside terminal conditions.
#[derive(Clone, Debug, PartialEq)]
pub enum ScalarFn {
    /// `Σ c_k x^k`, coefficients in ascending order.
    Polynomial(Vec<f64>),
    /// `scale * exp(rate * x)`
    Exp { scale: f64, rate: f64 },
    /// `offset + amplitude * sin(frequency * x)`
    Sin { offset: f64, amplitude: f64, frequency: f64 },
}

impl ScalarFn {
    pub fn value(&self, x: f64) -> f64 {
        match self {
            ScalarFn::Polynomial(c) => c.iter().rev().fold(0.0, |acc, &ck| acc * x + ck),
            ScalarFn::Exp { scale, rate } => scale * (rate * x).exp(),
            ScalarFn::Sin { offset, amplitude, frequency } => {
                offset + amplitude * (frequency * x).sin()
            }
        }
    }

    pub fn derivative(&self, x: f64) -> f64 {
        match self {
            ScalarFn::Polynomial(c) => c
                .iter()
                .enumerate()
                .skip(1)
                .rev()
                .fold(0.0, |acc, (k, &ck)| acc * x + k as f64 * ck),
            ScalarFn::Exp { scale, rate } => scale * rate * (rate * x).exp(),
            ScalarFn::Sin { amplitude, frequency, .. } => {
                amplitude * frequency * (frequency * x).cos()
            }
        }
    }

    /// Lower bound of the function over the real line, when one exists.
    pub fn lower_bound(&self) -> Option<f64> {
        match self {
            ScalarFn::Sin { offset, amplitude, .. } => Some(offset - amplitude.abs()),
            ScalarFn::Exp { scale, .. } if *scale >= 0.0 => Some(0.0),
            ScalarFn::Polynomial(c) if c.len() == 1 => Some(c[0]),
            _ => None,
        }
    }

    /// True when the function is bounded on the real line.
    pub fn is_bounded(&self) -> bool {
        match self {
            ScalarFn::Sin { .. } => true,
            ScalarFn::Polynomial(c) => c.iter().skip(1).all(|&x| x == 0.0),
            ScalarFn::Exp { scale, rate } => *scale == 0.0 || *rate == 0.0,
        }
    }
}
