//! Chebyshev polynomialization of the known non-polynomial dynamics.
//!
//! Non-polynomial subtrees of `g` are replaced by Chebyshev interpolants
//! fitted at Chebyshev–Gauss–Lobatto nodes, converted to the monomial basis,
//! and recombined with the polynomial parts into a single polynomial `Pk`
//! per component, together with a per-component remainder bound (formal when
//! a growth estimate `(m, rho)` is supplied for every replaced analytic
//! subtree, empirical otherwise).

use std::collections::BTreeMap;

use thiserror::Error;

use crate::exprlang::{BinaryOp, Expr, SystemDefinition, UnaryOp};
use crate::poly::Poly;

/// Monomial conversion above this degree is refused: the power-basis change
/// of basis is numerically meaningless well before this point.
pub const MONOMIAL_DEGREE_CAP: u32 = 30;
/// Conversion at or above this degree logs a conditioning warning.
pub const MONOMIAL_DEGREE_WARN: u32 = 20;
/// Per-axis degree cap for bivariate tensor interpolants.
pub const BIVARIATE_AXIS_CAP: u32 = 10;
/// Number of grid samples used for empirical remainder estimation.
pub const EMPIRICAL_GRID_POINTS: usize = 2000;

#[derive(Debug, Error)]
pub enum ChebError {
    #[error("interpolation degree must be >= 1")]
    DegreeZero,
    #[error("degenerate interval [{0}, {1}]")]
    BadInterval(f64, f64),
    #[error("remainder bound requires rho > 1, got {0}")]
    BadRho(f64),
    #[error(
        "monomial conversion of degree {0} exceeds cap {MONOMIAL_DEGREE_CAP}; \
         the power basis is too ill-conditioned at this degree"
    )]
    DegreeTooHigh(u32),
    #[error("non-polynomial subtree `{0}` involves {1} variables; only univariate and bivariate terms are supported")]
    UnsupportedArity(String, usize),
    #[error("sampling `{subtree}` failed: {msg}")]
    Sample { subtree: String, msg: String },
}

/// Affine map between an interval `[a, b]` and the reference `[-1, 1]`.
#[derive(Debug, Clone, Copy)]
pub struct IntervalMap {
    pub a: f64,
    pub b: f64,
}

impl IntervalMap {
    pub fn new(a: f64, b: f64) -> Result<Self, ChebError> {
        if !(a < b) {
            return Err(ChebError::BadInterval(a, b));
        }
        Ok(IntervalMap { a, b })
    }

    /// `x in [a, b]` to `u in [-1, 1]`: `u = (2x - (b + a)) / (b - a)`.
    pub fn forward(&self, x: f64) -> f64 {
        (2.0 * x - (self.b + self.a)) / (self.b - self.a)
    }

    /// `u in [-1, 1]` back to `x in [a, b]`.
    pub fn inverse(&self, u: f64) -> f64 {
        0.5 * ((self.b - self.a) * u + self.b + self.a)
    }

    /// The forward map as a degree-1 polynomial in one variable.
    pub fn forward_poly(&self) -> Poly {
        let scale = 2.0 / (self.b - self.a);
        let shift = -(self.b + self.a) / (self.b - self.a);
        &Poly::var(1, 0).scale(scale) + &Poly::constant(1, shift)
    }
}

/// A univariate Chebyshev interpolant on an interval.
#[derive(Debug, Clone)]
pub struct ChebApprox {
    pub map: IntervalMap,
    /// Coefficients `[alpha_0, ..., alpha_k]` over Chebyshev basis
    /// `tau_i(u) = cos(i arccos u)` in the mapped coordinate.
    pub coeffs: Vec<f64>,
}

/// Chebyshev–Gauss–Lobatto nodes `cos(j pi / k)`, `j = 0..=k`, in `[-1, 1]`.
pub fn cgl_nodes(k: usize) -> Vec<f64> {
    (0..=k)
        .map(|j| (j as f64 * std::f64::consts::PI / k as f64).cos())
        .collect()
}

/// Discrete Chebyshev transform of samples taken at CGL nodes.
fn cgl_coeffs(samples: &[f64]) -> Vec<f64> {
    let k = samples.len() - 1;
    let kf = k as f64;
    (0..=k)
        .map(|i| {
            let mut s = 0.0;
            for (j, &fj) in samples.iter().enumerate() {
                let w = if j == 0 || j == k { 0.5 } else { 1.0 };
                s += w * fj * (i as f64 * j as f64 * std::f64::consts::PI / kf).cos();
            }
            let lead = if i == 0 || i == k { 1.0 } else { 2.0 };
            lead * s / kf
        })
        .collect()
}

/// Fit a degree-`k` Chebyshev interpolant to `func` on `[a, b]` by sampling
/// at the CGL nodes.
pub fn cheb_fit(
    func: impl Fn(f64) -> f64,
    a: f64,
    b: f64,
    k: usize,
) -> Result<ChebApprox, ChebError> {
    if k == 0 {
        return Err(ChebError::DegreeZero);
    }
    let map = IntervalMap::new(a, b)?;
    let samples: Vec<f64> = cgl_nodes(k).into_iter().map(|u| func(map.inverse(u))).collect();
    Ok(ChebApprox { map, coeffs: cgl_coeffs(&samples) })
}

impl ChebApprox {
    pub fn degree(&self) -> usize {
        self.coeffs.len() - 1
    }

    /// Evaluate via the Clenshaw recurrence.
    pub fn eval(&self, x: f64) -> f64 {
        let u = self.map.forward(x);
        let mut b1 = 0.0;
        let mut b2 = 0.0;
        for &c in self.coeffs.iter().skip(1).rev() {
            let t = 2.0 * u * b1 - b2 + c;
            b2 = b1;
            b1 = t;
        }
        self.coeffs[0] + u * b1 - b2
    }

    /// Maximum absolute deviation from `func` on a uniform grid.
    pub fn max_error_on_grid(&self, func: impl Fn(f64) -> f64, points: usize) -> f64 {
        let mut worst: f64 = 0.0;
        for i in 0..points {
            let x = self.map.a + (self.map.b - self.map.a) * i as f64 / (points - 1) as f64;
            worst = worst.max((self.eval(x) - func(x)).abs());
        }
        worst
    }

    /// Convert to an expanded univariate polynomial in the original
    /// coordinate (monomial basis).
    pub fn to_monomial(&self) -> Result<Poly, ChebError> {
        let p_in_u = cheb_to_monomial(&self.coeffs)?;
        let fwd = self.map.forward_poly();
        let scale = fwd.coeff(&[1]);
        let shift = fwd.coeff(&[0]);
        Ok(p_in_u.substitute_affine(&[scale], &[shift]))
    }
}

/// Expand a Chebyshev-basis polynomial `sum_i coeffs[i] tau_i(u)` into the
/// monomial basis (one variable, reference coordinate).
pub fn cheb_to_monomial(coeffs: &[f64]) -> Result<Poly, ChebError> {
    let deg = coeffs.len().saturating_sub(1) as u32;
    if deg > MONOMIAL_DEGREE_CAP {
        return Err(ChebError::DegreeTooHigh(deg));
    }
    if deg >= MONOMIAL_DEGREE_WARN {
        log::warn!(
            "converting degree-{deg} Chebyshev series to the monomial basis; \
             coefficients grow like 2^degree and may lose precision"
        );
    }
    let u = Poly::var(1, 0);
    let mut t_prev = Poly::constant(1, 1.0); // tau_0
    let mut t_cur = u.clone(); // tau_1
    let mut acc = t_prev.scale(coeffs[0]);
    if coeffs.len() > 1 {
        acc = &acc + &t_cur.scale(coeffs[1]);
    }
    for &c in coeffs.iter().skip(2) {
        let t_next = &(&u * &t_cur).scale(2.0) - &t_prev;
        acc = &acc + &t_next.scale(c);
        t_prev = t_cur;
        t_cur = t_next;
    }
    Ok(acc)
}

/// Lemma-2 style truncation bound `4 m rho^{-k} / (rho - 1)` for a function
/// analytically continuable to the Bernstein ellipse of parameter `rho > 1`
/// with modulus bound `m`.
pub fn remainder_bound(m: f64, rho: f64, k: u32) -> Result<f64, ChebError> {
    if !(rho > 1.0) {
        return Err(ChebError::BadRho(rho));
    }
    Ok(4.0 * m * rho.powi(-(k as i32)) / (rho - 1.0))
}

// ---------------------------------------------------------------------------
// Whole-system approximation
// ---------------------------------------------------------------------------

/// Growth estimate for one replaced subtree, keyed by its printed form.
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct RhoEstimate {
    pub m: f64,
    pub rho: f64,
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct ChebConfig {
    /// Interpolation degree for univariate terms.
    pub degree: usize,
    /// Per-axis degree for bivariate tensor terms (capped at 10).
    pub bivariate_degree: usize,
    /// Optional `(m, rho)` per replaced subtree, keyed by printed subtree.
    pub rho_estimates: BTreeMap<String, RhoEstimate>,
}

impl Default for ChebConfig {
    fn default() -> Self {
        ChebConfig { degree: 4, bivariate_degree: 8, rho_estimates: BTreeMap::new() }
    }
}

/// How the recorded per-component remainder was obtained.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RemainderBound {
    /// Component had no replaced subtree; `Pk` reproduces it exactly.
    Zero,
    /// Sum of Lemma-2 bounds (plus the origin-correction offset).
    Formal(f64),
    /// Max error over a deterministic sample grid.
    Empirical(f64),
}

impl RemainderBound {
    pub fn value(&self) -> f64 {
        match self {
            RemainderBound::Zero => 0.0,
            RemainderBound::Formal(v) | RemainderBound::Empirical(v) => *v,
        }
    }
}

/// A system with the known non-polynomial part replaced by polynomials:
/// `xdot ~= f(x) + Pk(x) (+ unknown residual)`.
#[derive(Debug, Clone)]
pub struct ApproximatedSystem {
    pub state_dim: usize,
    pub f: Vec<Poly>,
    pub pk: Vec<Poly>,
    pub remainders: Vec<RemainderBound>,
    pub warnings: Vec<String>,
    pub domain: Vec<(f64, f64)>,
}

impl ApproximatedSystem {
    /// Component `i` of the polynomialized field `f + Pk`.
    pub fn known_field(&self, i: usize) -> Poly {
        &self.f[i] + &self.pk[i]
    }

    pub fn known_field_all(&self) -> Vec<Poly> {
        (0..self.state_dim).map(|i| self.known_field(i)).collect()
    }

    pub fn eval_known(&self, x: &[f64]) -> Vec<f64> {
        (0..self.state_dim)
            .map(|i| self.f[i].eval(x) + self.pk[i].eval(x))
            .collect()
    }
}

/// Split an expression through `+`, `-`, and unary negation into signed terms.
fn split_terms(e: &Expr, sign: f64, out: &mut Vec<(f64, Expr)>) {
    match e {
        Expr::Binary(BinaryOp::Add, a, b) => {
            split_terms(a, sign, out);
            split_terms(b, sign, out);
        }
        Expr::Binary(BinaryOp::Sub, a, b) => {
            split_terms(a, sign, out);
            split_terms(b, -sign, out);
        }
        Expr::Unary(UnaryOp::Neg, a) => split_terms(a, -sign, out),
        other => out.push((sign, other.clone())),
    }
}

fn contains_kink(e: &Expr) -> bool {
    match e {
        Expr::Const(_) | Expr::Var(_) => false,
        Expr::Unary(UnaryOp::Abs, _) => true,
        Expr::Unary(_, a) => contains_kink(a),
        Expr::Binary(_, a, b) => contains_kink(a) || contains_kink(b),
        Expr::Pow(a, _) => contains_kink(a),
    }
}

/// Replace every non-polynomial subtree of `g` with Chebyshev interpolants
/// and return the polynomialized system.
///
/// Each component of `g` is split into additive terms. Polynomial terms
/// carry over exactly; univariate non-polynomial terms get a degree-`k`
/// interpolant over that variable's domain interval; bivariate terms get a
/// tensor interpolant (per-axis degree capped); higher arity is unsupported.
/// A constant offset is folded into `Pk` so the assembled known field
/// `f + Pk` vanishes at the origin exactly.
pub fn approximate_system(
    sys: &SystemDefinition,
    cfg: &ChebConfig,
) -> Result<ApproximatedSystem, ChebError> {
    let n = sys.state_dim;
    let mut pk = Vec::with_capacity(n);
    let mut remainders = Vec::with_capacity(n);
    let mut warnings = Vec::new();

    for ci in 0..n {
        let mut terms = Vec::new();
        split_terms(&sys.g[ci], 1.0, &mut terms);

        let mut acc = Poly::zero(n);
        let mut replaced_any = false;
        let mut all_formal = true;
        let mut formal_sum = 0.0;

        for (sign, term) in &terms {
            if let Some(p) = term.try_to_polynomial(n) {
                acc = &acc + &p.scale(*sign);
                continue;
            }
            replaced_any = true;
            let vars: Vec<usize> = term.free_vars().into_iter().collect();
            let fitted = match vars.len() {
                1 => fit_univariate(term, vars[0], sys, cfg)?,
                2 => fit_bivariate(term, vars[0], vars[1], sys, cfg)?,
                arity => {
                    return Err(ChebError::UnsupportedArity(term.to_string(), arity));
                }
            };
            acc = &acc + &fitted.scale(*sign);

            let kinked = contains_kink(term);
            let key = term.to_string();
            match (kinked, cfg.rho_estimates.get(&key)) {
                (false, Some(est)) => {
                    let k = if vars.len() == 1 {
                        cfg.degree as u32
                    } else {
                        cfg.bivariate_degree.min(BIVARIATE_AXIS_CAP as usize) as u32
                    };
                    formal_sum += remainder_bound(est.m, est.rho, k)?;
                }
                (true, Some(_)) => {
                    warnings.push(format!(
                        "`{key}`: growth estimate ignored — term contains |.| and may \
                         not be analytic on the interval; falling back to an \
                         empirical remainder"
                    ));
                    all_formal = false;
                }
                (true, None) => {
                    warnings.push(format!(
                        "`{key}`: non-analytic term (contains |.|); remainder is \
                         empirical-only"
                    ));
                    all_formal = false;
                }
                (false, None) => {
                    all_formal = false;
                }
            }
        }

        // pin the assembled known field to zero at the origin
        let correction = -(sys.f[ci].eval(&vec![0.0; n]) + acc.eval(&vec![0.0; n]));
        if correction != 0.0 {
            acc = &acc + &Poly::constant(n, correction);
        }

        let remainder = if !replaced_any {
            RemainderBound::Zero
        } else if all_formal {
            RemainderBound::Formal(formal_sum + correction.abs())
        } else {
            RemainderBound::Empirical(empirical_component_error(sys, ci, &acc)?)
        };

        pk.push(acc);
        remainders.push(remainder);
    }

    for w in &warnings {
        log::warn!("{w}");
    }

    Ok(ApproximatedSystem {
        state_dim: n,
        f: sys.f.clone(),
        pk,
        remainders,
        warnings,
        domain: sys.domain.clone(),
    })
}

fn fit_univariate(
    term: &Expr,
    var: usize,
    sys: &SystemDefinition,
    cfg: &ChebConfig,
) -> Result<Poly, ChebError> {
    let n = sys.state_dim;
    let (a, b) = sys.domain[var];
    let map = IntervalMap::new(a, b)?;
    let mut point = vec![0.0; n];
    let mut samples = Vec::with_capacity(cfg.degree + 1);
    for u in cgl_nodes(cfg.degree) {
        point[var] = map.inverse(u);
        let v = term.eval(&point).map_err(|e| ChebError::Sample {
            subtree: term.to_string(),
            msg: e.to_string(),
        })?;
        samples.push(v);
    }
    let approx = ChebApprox { map, coeffs: cgl_coeffs(&samples) };
    Ok(approx.to_monomial()?.embed_univariate(n, var))
}

fn fit_bivariate(
    term: &Expr,
    v1: usize,
    v2: usize,
    sys: &SystemDefinition,
    cfg: &ChebConfig,
) -> Result<Poly, ChebError> {
    let n = sys.state_dim;
    let k = cfg.bivariate_degree.min(BIVARIATE_AXIS_CAP as usize).max(1);
    let m1 = IntervalMap::new(sys.domain[v1].0, sys.domain[v1].1)?;
    let m2 = IntervalMap::new(sys.domain[v2].0, sys.domain[v2].1)?;
    let nodes = cgl_nodes(k);

    // samples[r][c] = term(x with v1 = node r, v2 = node c)
    let mut point = vec![0.0; n];
    let mut samples = vec![vec![0.0; k + 1]; k + 1];
    for (r, &ur) in nodes.iter().enumerate() {
        for (c, &uc) in nodes.iter().enumerate() {
            point[v1] = m1.inverse(ur);
            point[v2] = m2.inverse(uc);
            samples[r][c] = term.eval(&point).map_err(|e| ChebError::Sample {
                subtree: term.to_string(),
                msg: e.to_string(),
            })?;
        }
    }

    // tensor transform: rows first, then columns
    let row_t: Vec<Vec<f64>> = samples.iter().map(|row| cgl_coeffs(row)).collect();
    let mut alpha = vec![vec![0.0; k + 1]; k + 1];
    for q in 0..=k {
        let col: Vec<f64> = (0..=k).map(|r| row_t[r][q]).collect();
        let tcol = cgl_coeffs(&col);
        for p in 0..=k {
            alpha[p][q] = tcol[p];
        }
    }

    // expand tau_p(u1) tau_q(u2) into n-var monomials
    let tau_polys_1: Vec<Poly> = tau_monomials(k, &m1)?
        .into_iter()
        .map(|t| t.embed_univariate(n, v1))
        .collect();
    let tau_polys_2: Vec<Poly> = tau_monomials(k, &m2)?
        .into_iter()
        .map(|t| t.embed_univariate(n, v2))
        .collect();
    let mut acc = Poly::zero(n);
    for p in 0..=k {
        for q in 0..=k {
            if alpha[p][q].abs() > 0.0 {
                acc = &acc + &(&tau_polys_1[p] * &tau_polys_2[q]).scale(alpha[p][q]);
            }
        }
    }
    Ok(acc)
}

/// `tau_0..tau_k` composed with an interval map, as univariate polynomials.
fn tau_monomials(k: usize, map: &IntervalMap) -> Result<Vec<Poly>, ChebError> {
    (0..=k)
        .map(|i| {
            let mut coeffs = vec![0.0; i + 1];
            coeffs[i] = 1.0;
            let in_u = cheb_to_monomial(&coeffs)?;
            let fwd = map.forward_poly();
            Ok(in_u.substitute_affine(&[fwd.coeff(&[1])], &[fwd.coeff(&[0])]))
        })
        .collect()
}

/// Max deviation `|g_i - Pk_i|` over a deterministic lattice of roughly
/// `EMPIRICAL_GRID_POINTS` points covering the domain box.
fn empirical_component_error(
    sys: &SystemDefinition,
    ci: usize,
    pk_i: &Poly,
) -> Result<f64, ChebError> {
    let n = sys.state_dim;
    let per_axis = (EMPIRICAL_GRID_POINTS as f64).powf(1.0 / n as f64).ceil() as usize;
    let per_axis = per_axis.max(2);
    let mut idx = vec![0usize; n];
    let mut point = vec![0.0; n];
    let mut worst: f64 = 0.0;
    loop {
        for (d, &i) in idx.iter().enumerate() {
            let (a, b) = sys.domain[d];
            point[d] = a + (b - a) * i as f64 / (per_axis - 1) as f64;
        }
        let g_val = sys.g[ci].eval(&point).map_err(|e| ChebError::Sample {
            subtree: sys.g[ci].to_string(),
            msg: e.to_string(),
        })?;
        worst = worst.max((g_val - pk_i.eval(&point)).abs());
        // odometer increment
        let mut d = 0;
        loop {
            idx[d] += 1;
            if idx[d] < per_axis {
                break;
            }
            idx[d] = 0;
            d += 1;
            if d == n {
                return Ok(worst);
            }
        }
    }
}
