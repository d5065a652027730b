//! Least-squares conditional expectations on polynomial path features.

use std::sync::{Arc, OnceLock};

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::paths::PathEnsemble;
use crate::stats::{self, CHUNK};
use crate::utility::WealthGrid;

/// Features at node `i`: powers `B(t_i)^d` and `Ñ_j(t_i)^d` for
/// `d = 1..=degree`, optionally `X(t_i)` and `ln X(t_i)`. The intercept is
/// always present.
#[derive(Clone, Debug)]
pub struct RegressionBasis {
    pub degree: usize,
    pub jumps: bool,
    pub wealth: Option<Arc<WealthGrid>>,
    /// Relative ridge factor: the penalty is `ridge · trace(G) / p`.
    pub ridge: f64,
}

impl Default for RegressionBasis {
    fn default() -> Self {
        RegressionBasis { degree: 3, jumps: true, wealth: None, ridge: 1e-8 }
    }
}

impl RegressionBasis {
    pub fn with_degree(degree: usize) -> Self {
        RegressionBasis { degree, ..Default::default() }
    }

    pub fn with_wealth(mut self, wealth: Arc<WealthGrid>) -> Self {
        self.wealth = Some(wealth);
        self
    }

    fn full_width(&self, atoms: usize) -> usize {
        self.degree * (1 + if self.jumps { atoms } else { 0 }) + if self.wealth.is_some() { 2 } else { 0 }
    }

    fn names(&self, atoms: usize) -> Vec<String> {
        let mut v = Vec::new();
        for d in 1..=self.degree {
            v.push(if d == 1 { "B".to_string() } else { format!("B^{d}") });
        }
        if self.jumps {
            for j in 0..atoms {
                for d in 1..=self.degree {
                    v.push(if d == 1 { format!("N{j}") } else { format!("N{j}^{d}") });
                }
            }
        }
        if self.wealth.is_some() {
            v.push("X".into());
            v.push("lnX".into());
        }
        v
    }
}

/// Raw feature sources at one node.
struct Sources<'a> {
    b: &'a [f64],
    n: Vec<&'a [f64]>,
    x: Option<&'a [f64]>,
    degree: usize,
}

impl<'a> Sources<'a> {
    fn new(ens: &'a PathEnsemble, basis: &'a RegressionBasis, node: usize) -> Self {
        let atoms = if basis.jumps { ens.atoms() } else { 0 };
        Sources {
            b: ens.brownian(node),
            n: (0..atoms).map(|j| ens.compensated(node, j)).collect(),
            x: basis.wealth.as_ref().map(|w| w.at(node)),
            degree: basis.degree,
        }
    }

    fn raw(&self, p: usize, out: &mut [f64]) {
        let mut c = 0;
        let mut push_powers = |v: f64, out: &mut [f64]| {
            let mut acc = 1.0;
            for _ in 0..self.degree {
                acc *= v;
                out[c] = acc;
                c += 1;
            }
        };
        push_powers(self.b[p], out);
        for nj in &self.n {
            push_powers(nj[p], out);
        }
        if let Some(x) = self.x {
            out[c] = x[p];
            out[c + 1] = x[p].ln();
        }
    }
}

/// Standardized design at a node with its factorized normal matrix.
#[derive(Clone, Debug)]
pub struct NodeDesign {
    node: usize,
    full_width: usize,
    kept: Vec<usize>,
    names: Vec<String>,
    means: Vec<f64>,
    scales: Vec<f64>,
    chol: Option<Cholesky<f64, Dyn>>,
    penalty: f64,
}

impl NodeDesign {
    pub fn build(ens: &PathEnsemble, basis: &RegressionBasis, node: usize) -> Result<Self> {
        let np = ens.n_paths();
        let full = basis.full_width(ens.atoms());
        let all_names = basis.names(ens.atoms());
        let src = Sources::new(ens, basis, node);
        let sums = stats::chunked_sum_vec_with(np, full, || vec![0.0; full], |p, f, acc| {
            src.raw(p, f);
            for (a, v) in acc.iter_mut().zip(f.iter()) {
                *a += v;
            }
        });
        let means: Vec<f64> = sums.iter().map(|s| s / np as f64).collect();
        let sq = stats::chunked_sum_vec_with(np, full, || vec![0.0; full], |p, f, acc| {
            src.raw(p, f);
            for ((a, v), m) in acc.iter_mut().zip(f.iter()).zip(&means) {
                *a += (v - m) * (v - m);
            }
        });
        let mut kept = Vec::new();
        let mut scales = Vec::new();
        for (c, s) in sq.iter().enumerate() {
            let sd = (s / np as f64).sqrt();
            if !means[c].is_finite() || !sd.is_finite() {
                return Err(Error::Numerical { node, message: format!("feature {} is not finite", all_names[c]) });
            }
            if sd > 1e-12 * (1.0 + means[c].abs()) {
                kept.push(c);
                scales.push(sd);
            }
        }
        let p = kept.len();
        let kept_means: Vec<f64> = kept.iter().map(|&c| means[c]).collect();
        let names = kept.iter().map(|&c| all_names[c].clone()).collect();
        let mut design = NodeDesign {
            node,
            full_width: full,
            kept,
            names,
            means: kept_means,
            scales,
            chol: None,
            penalty: 0.0,
        };
        if p == 0 {
            return Ok(design);
        }
        if np <= p + 1 {
            return Err(Error::Numerical { node, message: format!("{np} paths cannot identify {} basis functions", p + 1) });
        }
        let gram = stats::chunked_sum_vec_with(np, p * p, || (vec![0.0; full], vec![0.0; p]), |q, (f, s), acc| {
            design.standardized(&src, q, f, s);
            for a in 0..p {
                for b in 0..=a {
                    acc[a * p + b] += s[a] * s[b];
                }
            }
        });
        let mut g = DMatrix::<f64>::zeros(p, p);
        for a in 0..p {
            for b in 0..=a {
                g[(a, b)] = gram[a * p + b];
                g[(b, a)] = gram[a * p + b];
            }
        }
        let penalty = basis.ridge * g.trace() / p as f64;
        for a in 0..p {
            g[(a, a)] += penalty;
        }
        let chol = Cholesky::new(g).ok_or_else(|| Error::Numerical {
            node,
            message: "normal matrix is not positive definite after ridge regularization".into(),
        })?;
        design.chol = Some(chol);
        design.penalty = penalty;
        Ok(design)
    }

    fn standardized(&self, src: &Sources<'_>, p: usize, raw: &mut [f64], out: &mut [f64]) {
        src.raw(p, raw);
        for (o, ((&c, m), s)) in out.iter_mut().zip(self.kept.iter().zip(&self.means).zip(&self.scales)) {
            *o = (raw[c] - m) / s;
        }
    }

    pub fn node(&self) -> usize {
        self.node
    }
    pub fn feature_names(&self) -> &[String] {
        &self.names
    }
    /// Absolute ridge penalty added to the normal matrix diagonal.
    pub fn penalty(&self) -> f64 {
        self.penalty
    }

    /// Coefficients on the standardized features for each target, with the
    /// target means.
    fn coefficients(&self, src: &Sources<'_>, targets: &[&[f64]]) -> (Vec<f64>, Vec<DVector<f64>>) {
        let np = src.b.len();
        let p = self.kept.len();
        let tm: Vec<f64> = targets.iter().map(|t| stats::mean(t)).collect();
        let Some(chol) = &self.chol else {
            return (tm, vec![DVector::zeros(0); targets.len()]);
        };
        let nt = targets.len();
        let rhs = stats::chunked_sum_vec_with(np, nt * p, || (vec![0.0; self.full_width], vec![0.0; p]), |q, (f, s), acc| {
            self.standardized(src, q, f, s);
            for (k, t) in targets.iter().enumerate() {
                let r = t[q] - tm[k];
                for a in 0..p {
                    acc[k * p + a] += s[a] * r;
                }
            }
        });
        let coefs = (0..nt).map(|k| chol.solve(&DVector::from_column_slice(&rhs[k * p..(k + 1) * p]))).collect();
        (tm, coefs)
    }

    /// Fitted conditional expectations for several targets at once.
    pub fn fit_many(&self, ens: &PathEnsemble, basis: &RegressionBasis, targets: &[&[f64]]) -> Vec<Vec<f64>> {
        let np = ens.n_paths();
        let src = Sources::new(ens, basis, self.node);
        let mut out: Vec<Vec<f64>> = Vec::with_capacity(targets.len());
        let constant: Vec<Option<f64>> = targets
            .iter()
            .map(|t| if t.iter().all(|v| v.to_bits() == t[0].to_bits()) { Some(t[0]) } else { None })
            .collect();
        let live: Vec<usize> = (0..targets.len()).filter(|&k| constant[k].is_none()).collect();
        let live_targets: Vec<&[f64]> = live.iter().map(|&k| targets[k]).collect();
        let (tm, coefs) = self.coefficients(&src, &live_targets);
        let p = self.kept.len();
        let mut fitted: Vec<Vec<f64>> = vec![vec![0.0; np]; live.len()];
        if p == 0 {
            for (f, m) in fitted.iter_mut().zip(&tm) {
                f.iter_mut().for_each(|v| *v = *m);
            }
        } else if !live.is_empty() {
            // path-major chunks, each filling its slice of every output
            let chunks: Vec<Vec<Vec<f64>>> = (0..np.div_ceil(CHUNK))
                .into_par_iter()
                .map(|c| {
                    let lo = c * CHUNK;
                    let hi = (lo + CHUNK).min(np);
                    let mut f = vec![0.0; self.full_width];
                    let mut s = vec![0.0; p];
                    let mut res = vec![Vec::with_capacity(hi - lo); live.len()];
                    for q in lo..hi {
                        self.standardized(&src, q, &mut f, &mut s);
                        for (k, r) in res.iter_mut().enumerate() {
                            let mut v = tm[k];
                            for a in 0..p {
                                v += coefs[k][a] * s[a];
                            }
                            r.push(v);
                        }
                    }
                    res
                })
                .collect();
            for (c, res) in chunks.into_iter().enumerate() {
                let lo = c * CHUNK;
                for (k, r) in res.into_iter().enumerate() {
                    fitted[k][lo..lo + r.len()].copy_from_slice(&r);
                }
            }
        }
        let mut live_iter = fitted.into_iter();
        for c in &constant {
            match c {
                Some(v) => out.push(vec![*v; np]),
                None => out.push(live_iter.next().unwrap_or_default()),
            }
        }
        out
    }

    /// Full regression summary for a single target, in original feature units.
    pub fn summarize(&self, ens: &PathEnsemble, basis: &RegressionBasis, target: &[f64]) -> RegressionFit {
        let src = Sources::new(ens, basis, self.node);
        let fitted = self.fit_many(ens, basis, &[target]).pop().unwrap_or_default();
        let np = target.len();
        let p = self.kept.len();
        let (tm, coefs) = self.coefficients(&src, &[target]);
        let rss = stats::chunked_sum(np, |q| (target[q] - fitted[q]).powi(2));
        let dof = (np as f64 - p as f64 - 1.0).max(1.0);
        let s2 = rss / dof;
        let mut coefficients = Vec::with_capacity(p);
        let mut intercept = tm[0];
        if let Some(chol) = &self.chol {
            let inv = chol.inverse();
            for a in 0..p {
                let c = coefs[0][a] / self.scales[a];
                intercept -= c * self.means[a];
                coefficients.push(Coefficient {
                    name: self.names[a].clone(),
                    value: c,
                    se: (s2 * inv[(a, a)]).sqrt() / self.scales[a],
                });
            }
        }
        RegressionFit { intercept, intercept_se: (s2 / np as f64).sqrt(), coefficients, fitted }
    }
}

#[derive(Clone, Debug)]
pub struct Coefficient {
    pub name: String,
    pub value: f64,
    pub se: f64,
}

/// Regression result in original feature units.
#[derive(Clone, Debug)]
pub struct RegressionFit {
    pub intercept: f64,
    /// Standard error of the target mean (the intercept on centred features).
    pub intercept_se: f64,
    pub coefficients: Vec<Coefficient>,
    pub fitted: Vec<f64>,
}

impl RegressionFit {
    pub fn coefficient(&self, name: &str) -> Option<&Coefficient> {
        self.coefficients.iter().find(|c| c.name == name)
    }
}

/// Fitted `E[target | features at node]` per path.
pub fn condexp(targets: &[f64], ens: &PathEnsemble, basis: &RegressionBasis, node: usize) -> Result<Vec<f64>> {
    check_len(targets, ens)?;
    let d = NodeDesign::build(ens, basis, node)?;
    Ok(d.fit_many(ens, basis, &[targets]).pop().unwrap_or_default())
}

/// Regression summary with coefficient standard errors.
pub fn regress(targets: &[f64], ens: &PathEnsemble, basis: &RegressionBasis, node: usize) -> Result<RegressionFit> {
    check_len(targets, ens)?;
    let d = NodeDesign::build(ens, basis, node)?;
    Ok(d.summarize(ens, basis, targets))
}

fn check_len(targets: &[f64], ens: &PathEnsemble) -> Result<()> {
    if targets.len() != ens.n_paths() {
        return Err(Error::Domain(format!("{} targets for {} paths", targets.len(), ens.n_paths())));
    }
    if targets.iter().any(|v| !v.is_finite()) {
        return Err(Error::Domain("regression targets must be finite".into()));
    }
    Ok(())
}

/// Per-node designs built on first use and reused across sweeps.
pub struct ConditionalExpectation<'a> {
    ens: &'a PathEnsemble,
    basis: RegressionBasis,
    designs: Vec<OnceLock<NodeDesign>>,
}

impl<'a> ConditionalExpectation<'a> {
    pub fn new(ens: &'a PathEnsemble, basis: RegressionBasis) -> Self {
        let designs = (0..=ens.grid().steps()).map(|_| OnceLock::new()).collect();
        ConditionalExpectation { ens, basis, designs }
    }

    pub fn ensemble(&self) -> &'a PathEnsemble {
        self.ens
    }
    pub fn basis(&self) -> &RegressionBasis {
        &self.basis
    }

    pub fn design(&self, node: usize) -> Result<&NodeDesign> {
        if let Some(d) = self.designs[node].get() {
            return Ok(d);
        }
        let d = NodeDesign::build(self.ens, &self.basis, node)?;
        Ok(self.designs[node].get_or_init(|| d))
    }

    pub fn fit(&self, node: usize, targets: &[&[f64]]) -> Result<Vec<Vec<f64>>> {
        for t in targets {
            if let Some(p) = t.iter().position(|v| !v.is_finite()) {
                return Err(Error::Numerical { node, message: format!("non-finite regression target on path {p}") });
            }
        }
        Ok(self.design(node)?.fit_many(self.ens, &self.basis, targets))
    }
}
