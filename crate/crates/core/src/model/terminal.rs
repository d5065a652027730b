use std::sync::Arc;

use crate::error::{Error, Result};
use crate::paths::{PathEnsemble, PathView};
use crate::profile::{AtomProfile, ScalarFn};
use crate::utility::{simulate_wealth, wealth_terminal_path, ControlProcess, WealthParams};

/// Terminal wealth configuration used by [`TerminalCondition::WealthLinear`].
#[derive(Clone, Debug)]
pub struct WealthModel {
    pub params: WealthParams,
    pub control: ControlProcess,
}

/// Catalog of terminal conditions with closed-form Malliavin derivatives.
#[derive(Clone, Debug)]
pub enum TerminalCondition {
    Constant(f64),
    /// `a·B(T) + b`
    BrownianLinear { a: f64, b: f64 },
    /// `G = Σ_i Σ_j ψ(t_i, ζ_j) ΔÑ_j(t_i)`
    JumpLinear { psi: AtomProfile },
    /// `φ(B(T))`
    SmoothOfBrownian { phi: ScalarFn },
    /// `φ(G)` with `G` as in `JumpLinear`
    SmoothOfJump { phi: ScalarFn, psi: AtomProfile },
    /// `θ·X(T)` with `θ` a constant or a function of `B(T)`
    WealthLinear { theta: Box<TerminalCondition>, wealth: Arc<WealthModel> },
}

fn jump_integral(psi: &AtomProfile, path: &PathView<'_>) -> f64 {
    let ens = path.ens;
    let grid = ens.grid();
    let atoms = ens.levy().atoms();
    let mut g = 0.0;
    for i in 0..grid.steps() {
        let t = grid.node(i);
        for (j, a) in atoms.iter().enumerate() {
            g += psi.value(t, j, a.mark) * path.dn_p(i, j);
        }
    }
    g
}

fn jump_integrals(psi: &AtomProfile, ens: &PathEnsemble) -> Vec<f64> {
    let grid = ens.grid();
    let atoms = ens.levy().atoms();
    let mut g = vec![0.0; ens.n_paths()];
    for i in 0..grid.steps() {
        let t = grid.node(i);
        for (j, a) in atoms.iter().enumerate() {
            let c = psi.value(t, j, a.mark);
            if c == 0.0 {
                continue;
            }
            let wdt = a.weight * grid.dt();
            for (n, gn) in g.iter_mut().enumerate() {
                *gn += c * (ens.counts(i, j)[n] as f64 - wdt);
            }
        }
    }
    g
}

fn check_theta(theta: &TerminalCondition) -> Result<()> {
    match theta {
        TerminalCondition::Constant(_) | TerminalCondition::SmoothOfBrownian { .. } => Ok(()),
        other => Err(Error::Capability(format!(
            "wealth-linear terminal conditions take a constant or smooth-of-Brownian factor, got {}",
            other.kind()
        ))),
    }
}

impl TerminalCondition {
    pub fn kind(&self) -> &'static str {
        match self {
            TerminalCondition::Constant(_) => "constant",
            TerminalCondition::BrownianLinear { .. } => "brownian_linear",
            TerminalCondition::JumpLinear { .. } => "jump_linear",
            TerminalCondition::SmoothOfBrownian { .. } => "smooth_of_brownian",
            TerminalCondition::SmoothOfJump { .. } => "smooth_of_jump",
            TerminalCondition::WealthLinear { .. } => "wealth_linear",
        }
    }

    /// True when the value does not depend on the path.
    pub fn is_deterministic(&self) -> bool {
        match self {
            TerminalCondition::Constant(_) => true,
            TerminalCondition::BrownianLinear { a, .. } => *a == 0.0,
            TerminalCondition::JumpLinear { psi } => psi.is_zero(),
            _ => false,
        }
    }
}

/// ξ evaluated on one path.
pub fn terminal_value(tc: &TerminalCondition, path: PathView<'_>) -> Result<f64> {
    let m = path.ens.grid().steps();
    Ok(match tc {
        TerminalCondition::Constant(c) => *c,
        TerminalCondition::BrownianLinear { a, b } => a * path.brownian(m) + b,
        TerminalCondition::JumpLinear { psi } => jump_integral(psi, &path),
        TerminalCondition::SmoothOfBrownian { phi } => phi.value(path.brownian(m)),
        TerminalCondition::SmoothOfJump { phi, psi } => phi.value(jump_integral(psi, &path)),
        TerminalCondition::WealthLinear { theta, wealth } => {
            check_theta(theta)?;
            let x = wealth_terminal_path(&wealth.params, &wealth.control, path)?;
            terminal_value(theta, path)? * x
        }
    })
}

/// ξ on every path of the ensemble.
pub fn terminal_values(tc: &TerminalCondition, ens: &PathEnsemble) -> Result<Vec<f64>> {
    Ok(PreparedTerminal::new(tc, ens)?.values)
}

fn check_time(t: f64, ens: &PathEnsemble) -> Result<()> {
    let horizon = ens.grid().horizon();
    if !(0.0..=horizon).contains(&t) {
        return Err(Error::Domain(format!("Malliavin time {t} outside [0, {horizon}]")));
    }
    Ok(())
}

/// Brownian Malliavin derivative `D_t ξ` on one path.
///
/// At `t = T` the value is the left limit.
pub fn malliavin_b(tc: &TerminalCondition, t: f64, path: PathView<'_>) -> Result<f64> {
    check_time(t, path.ens)?;
    let m = path.ens.grid().steps();
    Ok(match tc {
        TerminalCondition::Constant(_) | TerminalCondition::JumpLinear { .. } | TerminalCondition::SmoothOfJump { .. } => 0.0,
        TerminalCondition::BrownianLinear { a, .. } => *a,
        TerminalCondition::SmoothOfBrownian { phi } => phi.derivative(path.brownian(m)),
        TerminalCondition::WealthLinear { theta, wealth } => {
            check_theta(theta)?;
            require_deterministic(&wealth.control)?;
            let x = wealth_terminal_path(&wealth.params, &wealth.control, path)?;
            let th = terminal_value(theta, path)?;
            let dth = malliavin_b(theta, t, path)?;
            (dth + th * wealth.params.sigma0.value(t)) * x
        }
    })
}

/// Jump Malliavin derivative `D_{t,ζ_j} ξ` on one path.
pub fn malliavin_n(tc: &TerminalCondition, t: f64, j: usize, path: PathView<'_>) -> Result<f64> {
    check_time(t, path.ens)?;
    let atoms = path.ens.levy().atoms();
    let Some(atom) = atoms.get(j) else {
        return Err(Error::Domain(format!("atom index {j} out of range ({} atoms)", atoms.len())));
    };
    Ok(match tc {
        TerminalCondition::Constant(_)
        | TerminalCondition::BrownianLinear { .. }
        | TerminalCondition::SmoothOfBrownian { .. } => 0.0,
        TerminalCondition::JumpLinear { psi } => psi.value(t, j, atom.mark),
        TerminalCondition::SmoothOfJump { phi, psi } => {
            let g = jump_integral(psi, &path);
            phi.value(g + psi.value(t, j, atom.mark)) - phi.value(g)
        }
        TerminalCondition::WealthLinear { theta, wealth } => {
            check_theta(theta)?;
            require_deterministic(&wealth.control)?;
            let x = wealth_terminal_path(&wealth.params, &wealth.control, path)?;
            terminal_value(theta, path)? * wealth.params.gamma0.value(t, j, atom.mark) * x
        }
    })
}

fn require_deterministic(control: &ControlProcess) -> Result<()> {
    match control {
        ControlProcess::Deterministic(_) => Ok(()),
        ControlProcess::Adapted { .. } => Err(Error::Capability(
            "closed-form Malliavin derivatives of terminal wealth need a deterministic control".into(),
        )),
    }
}

/// ξ and the path quantities its Malliavin derivatives need, computed once
/// per ensemble.
pub struct PreparedTerminal<'a> {
    tc: &'a TerminalCondition,
    ens: &'a PathEnsemble,
    pub values: Vec<f64>,
    jump_g: Option<Vec<f64>>,
    wealth_t: Option<Vec<f64>>,
    theta: Option<Vec<f64>>,
}

impl<'a> PreparedTerminal<'a> {
    pub fn new(tc: &'a TerminalCondition, ens: &'a PathEnsemble) -> Result<Self> {
        let m = ens.grid().steps();
        let bt = ens.brownian(m);
        let mut jump_g = None;
        let mut wealth_t = None;
        let mut theta_v = None;
        let values = match tc {
            TerminalCondition::Constant(c) => vec![*c; ens.n_paths()],
            TerminalCondition::BrownianLinear { a, b } => bt.iter().map(|x| a * x + b).collect(),
            TerminalCondition::JumpLinear { psi } => jump_integrals(psi, ens),
            TerminalCondition::SmoothOfBrownian { phi } => bt.iter().map(|&x| phi.value(x)).collect(),
            TerminalCondition::SmoothOfJump { phi, psi } => {
                let g = jump_integrals(psi, ens);
                let v = g.iter().map(|&x| phi.value(x)).collect();
                jump_g = Some(g);
                v
            }
            TerminalCondition::WealthLinear { theta, wealth } => {
                check_theta(theta)?;
                let th = PreparedTerminal::new(theta, ens)?.values;
                let x = simulate_wealth(&wealth.params, &wealth.control, ens)?;
                let xt = x.at(m).to_vec();
                let v = th.iter().zip(&xt).map(|(a, b)| a * b).collect();
                wealth_t = Some(xt);
                theta_v = Some(th);
                v
            }
        };
        Ok(PreparedTerminal { tc, ens, values, jump_g, wealth_t, theta: theta_v })
    }

    /// True when `D_t ξ` vanishes identically.
    pub fn brownian_free(&self) -> bool {
        matches!(
            self.tc,
            TerminalCondition::Constant(_) | TerminalCondition::JumpLinear { .. } | TerminalCondition::SmoothOfJump { .. }
        ) || matches!(self.tc, TerminalCondition::BrownianLinear { a, .. } if *a == 0.0)
    }

    /// `D_t ξ` on path `n`.
    pub fn malliavin_b(&self, t: f64, n: usize) -> Result<f64> {
        let m = self.ens.grid().steps();
        Ok(match self.tc {
            TerminalCondition::Constant(_) | TerminalCondition::JumpLinear { .. } | TerminalCondition::SmoothOfJump { .. } => 0.0,
            TerminalCondition::BrownianLinear { a, .. } => *a,
            TerminalCondition::SmoothOfBrownian { phi } => phi.derivative(self.ens.brownian(m)[n]),
            TerminalCondition::WealthLinear { theta, wealth } => {
                require_deterministic(&wealth.control)?;
                let dth = match theta.as_ref() {
                    TerminalCondition::SmoothOfBrownian { phi } => phi.derivative(self.ens.brownian(m)[n]),
                    _ => 0.0,
                };
                let th = self.theta.as_ref().map_or(0.0, |v| v[n]);
                let x = self.wealth_t.as_ref().map_or(0.0, |v| v[n]);
                (dth + th * wealth.params.sigma0.value(t)) * x
            }
        })
    }

    /// `D_{t,ζ_j} ξ` on path `n`.
    pub fn malliavin_n(&self, t: f64, j: usize, n: usize) -> Result<f64> {
        let mark = self.ens.levy().atoms()[j].mark;
        Ok(match self.tc {
            TerminalCondition::Constant(_)
            | TerminalCondition::BrownianLinear { .. }
            | TerminalCondition::SmoothOfBrownian { .. } => 0.0,
            TerminalCondition::JumpLinear { psi } => psi.value(t, j, mark),
            TerminalCondition::SmoothOfJump { phi, psi } => {
                let g = self.jump_g.as_ref().map_or(0.0, |v| v[n]);
                phi.value(g + psi.value(t, j, mark)) - phi.value(g)
            }
            TerminalCondition::WealthLinear { wealth, .. } => {
                require_deterministic(&wealth.control)?;
                let th = self.theta.as_ref().map_or(0.0, |v| v[n]);
                let x = self.wealth_t.as_ref().map_or(0.0, |v| v[n]);
                th * wealth.params.gamma0.value(t, j, mark) * x
            }
        })
    }

    /// Empirical second moment; errors when it is not finite.
    pub fn second_moment(&self) -> Result<f64> {
        let m2 = crate::stats::chunked_sum(self.values.len(), |n| self.values[n] * self.values[n])
            / self.values.len() as f64;
        if !m2.is_finite() {
            return Err(Error::Domain("terminal condition has no finite second moment on the ensemble".into()));
        }
        Ok(m2)
    }
}
