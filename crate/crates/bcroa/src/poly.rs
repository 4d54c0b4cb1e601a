//! Sparse multivariate polynomials over f64.
//!
//! Terms are keyed by exponent vectors in a `BTreeMap`, so iteration order —
//! and therefore every serialized artifact built on top — is deterministic.
//! Coefficients with |c| < `COEFF_EPS` are dropped on every construction so
//! that representations stay canonical under arithmetic.

use std::collections::BTreeMap;
use std::fmt;

use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

/// Coefficients at or below this magnitude are treated as exact zeros.
pub const COEFF_EPS: f64 = 1e-14;

#[derive(Debug, Clone, PartialEq)]
pub struct Poly {
    n: usize,
    terms: BTreeMap<Vec<u32>, f64>,
}

impl Poly {
    pub fn zero(n: usize) -> Self {
        Poly { n, terms: BTreeMap::new() }
    }

    pub fn constant(n: usize, c: f64) -> Self {
        let mut p = Poly::zero(n);
        p.add_term(vec![0; n], c);
        p
    }

    /// The variable `x_i` (zero-based index).
    pub fn var(n: usize, i: usize) -> Self {
        assert!(i < n, "variable index {i} out of range for {n} variables");
        let mut e = vec![0; n];
        e[i] = 1;
        let mut p = Poly::zero(n);
        p.add_term(e, 1.0);
        p
    }

    /// Single term `c * x^exps`.
    pub fn monomial(n: usize, exps: &[u32], c: f64) -> Self {
        assert_eq!(exps.len(), n);
        let mut p = Poly::zero(n);
        p.add_term(exps.to_vec(), c);
        p
    }

    pub fn from_terms<I>(n: usize, it: I) -> Self
    where
        I: IntoIterator<Item = (Vec<u32>, f64)>,
    {
        let mut p = Poly::zero(n);
        for (e, c) in it {
            assert_eq!(e.len(), n);
            p.add_term(e, c);
        }
        p
    }

    pub fn nvars(&self) -> usize {
        self.n
    }

    pub fn is_zero(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn num_terms(&self) -> usize {
        self.terms.len()
    }

    pub fn coeff(&self, exps: &[u32]) -> f64 {
        self.terms.get(exps).copied().unwrap_or(0.0)
    }

    pub fn terms(&self) -> impl Iterator<Item = (&Vec<u32>, f64)> {
        self.terms.iter().map(|(e, &c)| (e, c))
    }

    /// Total degree; the zero polynomial reports 0.
    pub fn degree(&self) -> u32 {
        self.terms.keys().map(|e| e.iter().sum()).max().unwrap_or(0)
    }

    pub fn max_abs_coeff(&self) -> f64 {
        self.terms.values().fold(0.0, |a, &c| a.max(c.abs()))
    }

    fn add_term(&mut self, e: Vec<u32>, c: f64) {
        debug_assert_eq!(e.len(), self.n);
        use std::collections::btree_map::Entry;
        match self.terms.entry(e) {
            Entry::Occupied(mut o) => {
                *o.get_mut() += c;
                if o.get().abs() < COEFF_EPS {
                    o.remove();
                }
            }
            Entry::Vacant(v) => {
                if c.abs() >= COEFF_EPS {
                    v.insert(c);
                }
            }
        }
    }

    pub fn scale(&self, s: f64) -> Poly {
        let mut out = Poly::zero(self.n);
        for (e, c) in &self.terms {
            out.add_term(e.clone(), c * s);
        }
        out
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        assert_eq!(x.len(), self.n);
        let mut acc = 0.0;
        for (e, c) in &self.terms {
            let mut m = *c;
            for (i, &ei) in e.iter().enumerate() {
                if ei > 0 {
                    m *= x[i].powi(ei as i32);
                }
            }
            acc += m;
        }
        acc
    }

    /// Partial derivative with respect to `x_i`.
    pub fn grad(&self, i: usize) -> Poly {
        assert!(i < self.n);
        let mut out = Poly::zero(self.n);
        for (e, c) in &self.terms {
            if e[i] > 0 {
                let mut e2 = e.clone();
                e2[i] -= 1;
                out.add_term(e2, c * e[i] as f64);
            }
        }
        out
    }

    pub fn gradient(&self) -> Vec<Poly> {
        (0..self.n).map(|i| self.grad(i)).collect()
    }

    pub fn eval_gradient(&self, x: &[f64]) -> Vec<f64> {
        (0..self.n).map(|i| self.grad(i).eval(x)).collect()
    }

    /// Substitute `x_i = scale_i * y_i + shift_i` for every variable.
    pub fn substitute_affine(&self, scale: &[f64], shift: &[f64]) -> Poly {
        assert_eq!(scale.len(), self.n);
        assert_eq!(shift.len(), self.n);
        let mut out = Poly::zero(self.n);
        for (e, c) in &self.terms {
            // running expansion of c * prod_i (s_i y_i + t_i)^{e_i}
            let mut acc: BTreeMap<Vec<u32>, f64> = BTreeMap::new();
            acc.insert(vec![0; self.n], *c);
            for (i, &ei) in e.iter().enumerate() {
                if ei == 0 {
                    continue;
                }
                let mut next: BTreeMap<Vec<u32>, f64> = BTreeMap::new();
                for (ea, ca) in &acc {
                    for k in 0..=ei {
                        let w = binomial(ei, k)
                            * scale[i].powi(k as i32)
                            * shift[i].powi((ei - k) as i32);
                        if w == 0.0 {
                            continue;
                        }
                        let mut e2 = ea.clone();
                        e2[i] += k;
                        *next.entry(e2).or_insert(0.0) += ca * w;
                    }
                }
                acc = next;
            }
            for (e2, c2) in acc {
                out.add_term(e2, c2);
            }
        }
        out
    }

    /// Re-embed into `n` variables placing this polynomial's single variable
    /// at `axis`. Panics unless `self` is univariate.
    pub fn embed_univariate(&self, n: usize, axis: usize) -> Poly {
        assert_eq!(self.n, 1, "embed_univariate requires a univariate polynomial");
        assert!(axis < n);
        let mut out = Poly::zero(n);
        for (e, c) in &self.terms {
            let mut e2 = vec![0; n];
            e2[axis] = e[0];
            out.add_term(e2, *c);
        }
        out
    }

    pub fn pow(&self, k: u32) -> Poly {
        let mut out = Poly::constant(self.n, 1.0);
        for _ in 0..k {
            out = &out * self;
        }
        out
    }
}

fn binomial(n: u32, k: u32) -> f64 {
    let mut r = 1.0;
    for i in 0..k.min(n - k) {
        r = r * (n - i) as f64 / (i + 1) as f64;
    }
    r
}

impl std::ops::Add for &Poly {
    type Output = Poly;
    fn add(self, rhs: &Poly) -> Poly {
        assert_eq!(self.n, rhs.n);
        let mut out = self.clone();
        for (e, c) in &rhs.terms {
            out.add_term(e.clone(), *c);
        }
        out
    }
}

impl std::ops::Sub for &Poly {
    type Output = Poly;
    fn sub(self, rhs: &Poly) -> Poly {
        assert_eq!(self.n, rhs.n);
        let mut out = self.clone();
        for (e, c) in &rhs.terms {
            out.add_term(e.clone(), -c);
        }
        out
    }
}

impl std::ops::Mul for &Poly {
    type Output = Poly;
    fn mul(self, rhs: &Poly) -> Poly {
        assert_eq!(self.n, rhs.n);
        let mut out = Poly::zero(self.n);
        for (ea, ca) in &self.terms {
            for (eb, cb) in &rhs.terms {
                let e: Vec<u32> = ea.iter().zip(eb).map(|(a, b)| a + b).collect();
                out.add_term(e, ca * cb);
            }
        }
        out
    }
}

impl std::ops::Neg for &Poly {
    type Output = Poly;
    fn neg(self) -> Poly {
        self.scale(-1.0)
    }
}

macro_rules! forward_value_ops {
    ($($t:ident :: $m:ident),*) => {$(
        impl std::ops::$t for Poly {
            type Output = Poly;
            fn $m(self, rhs: Poly) -> Poly { (&self).$m(&rhs) }
        }
        impl std::ops::$t<&Poly> for Poly {
            type Output = Poly;
            fn $m(self, rhs: &Poly) -> Poly { (&self).$m(rhs) }
        }
        impl std::ops::$t<Poly> for &Poly {
            type Output = Poly;
            fn $m(self, rhs: Poly) -> Poly { self.$m(&rhs) }
        }
    )*};
}
forward_value_ops!(Add::add, Sub::sub, Mul::mul);

impl std::ops::Neg for Poly {
    type Output = Poly;
    fn neg(self) -> Poly {
        self.scale(-1.0)
    }
}

/// All exponent vectors of total degree <= `max_deg` in graded order:
/// ascending total degree, lexicographic within a degree.
pub fn monomial_basis(n: usize, max_deg: u32) -> Vec<Vec<u32>> {
    let mut out = Vec::new();
    for d in 0..=max_deg {
        let mut level = Vec::new();
        gen_exact(n, d, &mut vec![0; n], 0, &mut level);
        level.sort();
        out.extend(level);
    }
    out
}

fn gen_exact(n: usize, left: u32, cur: &mut Vec<u32>, i: usize, out: &mut Vec<Vec<u32>>) {
    if i == n - 1 {
        cur[i] = left;
        out.push(cur.clone());
        cur[i] = 0;
        return;
    }
    for v in 0..=left {
        cur[i] = v;
        gen_exact(n, left - v, cur, i + 1, out);
    }
    cur[i] = 0;
}

/// Linear map from a symmetric Gram matrix on a monomial basis `z` to the
/// polynomial `z^T Q z`. `pairs[m]` lists the positions (i, j), i <= j, with
/// `z_i * z_j = m`; off-diagonal positions contribute twice.
#[derive(Debug, Clone)]
pub struct GramLinearMap {
    basis: Vec<Vec<u32>>,
    pairs: BTreeMap<Vec<u32>, Vec<(usize, usize)>>,
    n: usize,
}

impl GramLinearMap {
    pub fn new(n: usize, basis: Vec<Vec<u32>>) -> Self {
        let mut pairs: BTreeMap<Vec<u32>, Vec<(usize, usize)>> = BTreeMap::new();
        for i in 0..basis.len() {
            for j in i..basis.len() {
                let m: Vec<u32> = basis[i].iter().zip(&basis[j]).map(|(a, b)| a + b).collect();
                pairs.entry(m).or_default().push((i, j));
            }
        }
        GramLinearMap { basis, pairs, n }
    }

    pub fn basis(&self) -> &[Vec<u32>] {
        &self.basis
    }

    pub fn nvars(&self) -> usize {
        self.n
    }

    /// Product monomials representable as z_i * z_j, in graded order.
    pub fn monomials(&self) -> impl Iterator<Item = &Vec<u32>> {
        self.pairs.keys()
    }

    pub fn pairs(&self, m: &[u32]) -> Option<&[(usize, usize)]> {
        self.pairs.get(m).map(|v| v.as_slice())
    }

    /// coeff(m) = sum over diagonal pairs Q_ii + 2 * sum over off-diagonal Q_ij.
    pub fn reconstruct(&self, q: &nalgebra::DMatrix<f64>) -> Poly {
        assert_eq!(q.nrows(), self.basis.len());
        assert_eq!(q.ncols(), self.basis.len());
        let mut out = Poly::zero(self.n);
        for (m, ps) in &self.pairs {
            let mut c = 0.0;
            for &(i, j) in ps {
                c += if i == j { q[(i, i)] } else { 2.0 * q[(i, j)] };
            }
            out.add_term(m.clone(), c);
        }
        out
    }
}

impl fmt::Display for Poly {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.terms.is_empty() {
            return write!(f, "0");
        }
        // graded order reads better than raw lex
        let mut keys: Vec<&Vec<u32>> = self.terms.keys().collect();
        keys.sort_by_key(|e| (e.iter().sum::<u32>(), (*e).clone()));
        for (idx, e) in keys.iter().enumerate() {
            let c = self.terms[*e];
            let mag = c.abs();
            if idx == 0 {
                if c < 0.0 {
                    write!(f, "-")?;
                }
            } else if c < 0.0 {
                write!(f, " - ")?;
            } else {
                write!(f, " + ")?;
            }
            let is_const = e.iter().all(|&x| x == 0);
            if is_const || (mag - 1.0).abs() > COEFF_EPS {
                write!(f, "{}", mag)?;
                if !is_const {
                    write!(f, "*")?;
                }
            }
            let mut first = true;
            for (i, &ei) in e.iter().enumerate() {
                if ei == 0 {
                    continue;
                }
                if !first {
                    write!(f, "*")?;
                }
                first = false;
                write!(f, "x{}", i + 1)?;
                if ei > 1 {
                    write!(f, "^{}", ei)?;
                }
            }
        }
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
struct PolyRepr {
    state_dim: usize,
    terms: BTreeMap<String, f64>,
}

impl Serialize for Poly {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        let terms = self
            .terms
            .iter()
            .map(|(e, &c)| {
                let key = e.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
                (key, c)
            })
            .collect();
        PolyRepr { state_dim: self.n, terms }.serialize(s)
    }
}

impl<'de> Deserialize<'de> for Poly {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let repr = PolyRepr::deserialize(d)?;
        let mut p = Poly::zero(repr.state_dim);
        for (k, c) in repr.terms {
            let e: Vec<u32> = k
                .split(',')
                .map(|s| s.trim().parse::<u32>())
                .collect::<Result<_, _>>()
                .map_err(|_| D::Error::custom(format!("bad exponent key {k:?}")))?;
            if e.len() != repr.state_dim {
                return Err(D::Error::custom(format!(
                    "exponent key {k:?} has {} entries, expected {}",
                    e.len(),
                    repr.state_dim
                )));
            }
            p.add_term(e, c);
        }
        Ok(p)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn p2(terms: &[(&[u32], f64)]) -> Poly {
        Poly::from_terms(2, terms.iter().map(|(e, c)| (e.to_vec(), *c)))
    }

    #[test]
    fn arithmetic_matches_pointwise() {
        let a = p2(&[(&[2, 0], 1.0), (&[0, 1], -0.5)]);
        let b = p2(&[(&[1, 1], 2.0), (&[0, 0], 3.0)]);
        let x = [1.3, -0.7];
        assert_relative_eq!((&a + &b).eval(&x), a.eval(&x) + b.eval(&x), epsilon = 1e-12);
        assert_relative_eq!((&a - &b).eval(&x), a.eval(&x) - b.eval(&x), epsilon = 1e-12);
        assert_relative_eq!((&a * &b).eval(&x), a.eval(&x) * b.eval(&x), epsilon = 1e-12);
    }

    #[test]
    fn cancellation_is_canonical() {
        let a = p2(&[(&[1, 0], 1.0)]);
        let d = &a - &a;
        assert!(d.is_zero());
        assert_eq!(d.degree(), 0);
    }

    #[test]
    fn gradient_of_known_polynomial() {
        // d/dx1 (2 x1^2 x2) = 4 x1 x2 ; d/dx2 = 2 x1^2
        let p = p2(&[(&[2, 1], 2.0)]);
        assert_eq!(p.grad(0), p2(&[(&[1, 1], 4.0)]));
        assert_eq!(p.grad(1), p2(&[(&[2, 0], 2.0)]));
    }

    #[test]
    fn substitute_affine_univariate_square() {
        // (2y + 1)^2 = 4y^2 + 4y + 1
        let p = Poly::monomial(1, &[2], 1.0);
        let q = p.substitute_affine(&[2.0], &[1.0]);
        assert_eq!(q, Poly::from_terms(1, [(vec![0], 1.0), (vec![1], 4.0), (vec![2], 4.0)]));
    }

    #[test]
    fn basis_ordering_is_graded_lex() {
        let b = monomial_basis(2, 2);
        let expect: Vec<Vec<u32>> = vec![
            vec![0, 0],
            vec![0, 1],
            vec![1, 0],
            vec![0, 2],
            vec![1, 1],
            vec![2, 0],
        ];
        assert_eq!(b, expect);
    }

    #[test]
    fn basis_count_matches_binomial() {
        // #monomials of degree <= d in n vars = C(n + d, n)
        assert_eq!(monomial_basis(3, 4).len(), 35);
        assert_eq!(monomial_basis(2, 8).len(), 45);
    }

    #[test]
    fn display_format() {
        let p = p2(&[(&[2, 1], 2.0), (&[0, 1], -0.5)]);
        assert_eq!(p.to_string(), "-0.5*x2 + 2*x1^2*x2");
        assert_eq!(Poly::zero(2).to_string(), "0");
        assert_eq!(Poly::constant(2, 1.0).to_string(), "1");
        assert_eq!(Poly::var(2, 0).to_string(), "x1");
    }

    #[test]
    fn json_round_trip() {
        let p = p2(&[(&[2, 1], 2.0), (&[0, 1], -0.5)]);
        let s = serde_json::to_string(&p).unwrap();
        assert!(s.contains("\"state_dim\":2"));
        assert!(s.contains("\"2,1\":2.0"));
        let q: Poly = serde_json::from_str(&s).unwrap();
        assert_eq!(p, q);
    }

    #[test]
    fn gram_reconstruct_matches_quadratic_form() {
        // oracle: evaluate z(x)^T Q z(x) directly at sample points
        let basis = monomial_basis(2, 2);
        let map = GramLinearMap::new(2, basis.clone());
        let k = basis.len();
        let mut q = nalgebra::DMatrix::zeros(k, k);
        let mut v = 0.3;
        for i in 0..k {
            for j in i..k {
                v = (v * 1.7 + 0.13) % 1.0;
                q[(i, j)] = v - 0.5;
                q[(j, i)] = q[(i, j)];
            }
        }
        let p = map.reconstruct(&q);
        for &x in &[[0.4, -1.2], [1.0, 0.5], [-0.3, -0.3]] {
            let z: Vec<f64> = basis
                .iter()
                .map(|e| Poly::monomial(2, e, 1.0).eval(&x))
                .collect();
            let zv = nalgebra::DVector::from_vec(z);
            let direct = (zv.transpose() * &q * &zv)[(0, 0)];
            assert_relative_eq!(p.eval(&x), direct, epsilon = 1e-10);
        }
    }

    proptest! {
        #[test]
        fn eval_distributes_over_mul(
            ea in proptest::collection::vec(0u32..4, 2),
            eb in proptest::collection::vec(0u32..4, 2),
            ca in -3.0f64..3.0,
            cb in -3.0f64..3.0,
            x in proptest::collection::vec(-2.0f64..2.0, 2),
        ) {
            let a = Poly::monomial(2, &ea, ca);
            let b = Poly::monomial(2, &eb, cb);
            let lhs = (&a * &b).eval(&x);
            let rhs = a.eval(&x) * b.eval(&x);
            prop_assert!((lhs - rhs).abs() <= 1e-9 * (1.0 + rhs.abs()));
        }

        #[test]
        fn gradient_matches_finite_differences(
            coefs in proptest::collection::vec(-2.0f64..2.0, 6),
            x in proptest::collection::vec(-1.5f64..1.5, 2),
        ) {
            let basis = monomial_basis(2, 2);
            let p = Poly::from_terms(2, basis.iter().cloned().zip(coefs.iter().copied()));
            let h = 1e-5;
            for i in 0..2 {
                let mut xp = x.clone();
                let mut xm = x.clone();
                xp[i] += h;
                xm[i] -= h;
                let fd = (p.eval(&xp) - p.eval(&xm)) / (2.0 * h);
                let an = p.grad(i).eval(&x);
                prop_assert!((fd - an).abs() <= 1e-6 * (1.0 + an.abs()),
                    "fd={fd} analytic={an}");
            }
        }

        #[test]
        fn affine_substitution_commutes_with_eval(
            coefs in proptest::collection::vec(-2.0f64..2.0, 6),
            s in proptest::collection::vec(0.5f64..2.0, 2),
            t in proptest::collection::vec(-1.0f64..1.0, 2),
            y in proptest::collection::vec(-1.0f64..1.0, 2),
        ) {
            let basis = monomial_basis(2, 2);
            let p = Poly::from_terms(2, basis.iter().cloned().zip(coefs.iter().copied()));
            let q = p.substitute_affine(&s, &t);
            let x: Vec<f64> = (0..2).map(|i| s[i] * y[i] + t[i]).collect();
            prop_assert!((q.eval(&y) - p.eval(&x)).abs() <= 1e-9 * (1.0 + p.eval(&x).abs()));
        }
    }
}
