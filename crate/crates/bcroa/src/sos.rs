//! Sum-of-squares programming layer: compiles polynomial nonnegativity
//! programs into block SDPs and runs the three-step barrier synthesis.
//!
//! Step 1 certifies an initial Lyapunov sublevel set `{V <= c*}` by
//! bisection on `c`. Step 2 finds SOS multipliers for a fixed barrier.
//! Step 3 fixes the multipliers and enlarges the barrier by maximizing a
//! trace surrogate for region volume. Steps 2 and 3 alternate.
//!
//! Every feasibility question is posed in *margin form*: all Gram blocks are
//! shifted by `t I` and `t` is maximized. The optimal margin is never
//! meaningfully positive (the certified products vanish at the origin, which
//! pins a Gram diagonal entry to zero), so feasibility is read from `t*`
//! being numerically indistinguishable from zero rather than from solver
//! status. Accepted certificates are re-audited independently of the solver:
//! the Gram identity residual and minimum eigenvalue are checked directly.

use nalgebra::DMatrix;
use std::collections::BTreeMap;
use thiserror::Error;

use crate::poly::{monomial_basis, GramLinearMap, Poly};
use crate::sdp::{self, SdpProblem, SdpSolution, SdpStatus, SparseSym};

/// Margins above this value classify an SOS membership as feasible.
///
/// The margin optimum is degenerate (exactly zero) whenever the tested
/// polynomial vanishes at a point, which is the normal situation for
/// level-set probes at an equilibrium; the solver then lands within its
/// accepted accuracy of zero from either side. Separation observed on the
/// reference problems: genuinely feasible memberships settle above `-3e-6`,
/// infeasible ones below `-1e-4`, so any threshold between is safe; `-1e-5`
/// leaves an order of magnitude on each side.
pub const MARGIN_FEASIBLE_TOL: f64 = -1e-5;
/// `h(0)` must stay at least this positive while enlarging.
pub const ORIGIN_MARGIN_DEFAULT: f64 = 1e-3;
/// Cap on the trace surrogate, preventing runaway scaling of `h`.
pub const TRACE_CAP_DEFAULT: f64 = 1e4;
/// Max absolute coefficient residual accepted when auditing a certificate.
pub const AUDIT_RESIDUAL_TOL: f64 = 1e-8;
/// Most negative Gram eigenvalue accepted when auditing a certificate.
pub const AUDIT_EIGMIN_TOL: f64 = -1e-7;
/// Positive-definiteness screening shift for Lyapunov candidates.
pub const SCREEN_EPSILON: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum SosError {
    #[error("monomial {monomial:?} appears in the target but no Gram pair or free coefficient can produce it")]
    UnrepresentableMonomial { monomial: Vec<u32> },
    #[error("two identity rows demand different values for the same coefficient pattern")]
    InconsistentRows,
    #[error("free variable `{0}` appears in the objective but in no identity")]
    UnconstrainedFree(String),
    #[error("SDP solve ended with status {0:?}")]
    Solver(SdpStatus),
    #[error("V is not certifiable on any sublevel set: margin {margin:.3e} at c = {c:.3e}")]
    NotCertifiable { c: f64, margin: f64 },
    #[error("V failed positive-definiteness screening: {0}")]
    VNotPositiveDefinite(String),
    #[error("initial barrier not certifiable: step-2 margin {0:.3e} on the first round")]
    InitialBarrierNotCertifiable(f64),
    #[error("certificate audit failed: residual {residual:.3e}, min Gram eigenvalue {eigmin:.3e}")]
    AuditFailed { residual: f64, eigmin: f64 },
    #[error(transparent)]
    Sdp(#[from] sdp::SdpError),
}

// ---------------------------------------------------------------------------
// Program builder and compiler
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GramId(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FreeId(usize);

struct GramVar {
    name: String,
    map: GramLinearMap,
}

/// One polynomial identity `sum of terms == 0`, enforced coefficient-wise.
#[derive(Default)]
pub struct Identity {
    gram_terms: Vec<(GramId, Poly)>,
    free_terms: Vec<(FreeId, Poly)>,
    constant: Option<Poly>,
}

impl Identity {
    pub fn new() -> Self {
        Identity::default()
    }

    /// Add `(z^T G z) * mult` for the Gram variable `g`.
    pub fn gram(mut self, g: GramId, mult: Poly) -> Self {
        self.gram_terms.push((g, mult));
        self
    }

    /// Add `f * poly` for the free scalar `f`.
    pub fn free(mut self, f: FreeId, poly: Poly) -> Self {
        self.free_terms.push((f, poly));
        self
    }

    /// Add a known polynomial.
    pub fn constant(mut self, p: Poly) -> Self {
        self.constant = Some(match self.constant.take() {
            Some(q) => &q + &p,
            None => p,
        });
        self
    }
}

pub struct SosProgramBuilder {
    n: usize,
    grams: Vec<GramVar>,
    frees: Vec<String>,
    identities: Vec<Identity>,
    objective_free: Vec<(FreeId, f64)>,
    objective_gram_diag: Vec<(GramId, f64)>,
}

impl SosProgramBuilder {
    pub fn new(n: usize) -> Self {
        SosProgramBuilder {
            n,
            grams: Vec::new(),
            frees: Vec::new(),
            identities: Vec::new(),
            objective_free: Vec::new(),
            objective_gram_diag: Vec::new(),
        }
    }

    /// Declare an SOS slot with Gram basis `z` = the given monomials.
    pub fn add_gram(&mut self, name: &str, basis: Vec<Vec<u32>>) -> GramId {
        self.grams.push(GramVar {
            name: name.to_string(),
            map: GramLinearMap::new(self.n, basis),
        });
        GramId(self.grams.len() - 1)
    }

    pub fn add_free(&mut self, name: &str) -> FreeId {
        self.frees.push(name.to_string());
        FreeId(self.frees.len() - 1)
    }

    pub fn add_identity(&mut self, id: Identity) {
        self.identities.push(id);
    }

    /// Add `weight * f` to the minimized objective.
    pub fn minimize_free(&mut self, f: FreeId, weight: f64) {
        self.objective_free.push((f, weight));
    }

    /// Add `weight * Tr(G)` to the minimized objective.
    pub fn minimize_gram_trace(&mut self, g: GramId, weight: f64) {
        self.objective_gram_diag.push((g, weight));
    }

    pub fn gram_basis(&self, g: GramId) -> &[Vec<u32>] {
        self.grams[g.0].map.basis()
    }

    /// `sum_i z_i^2` over a Gram basis (the margin companion polynomial).
    pub fn basis_square_sum(&self, g: GramId) -> Poly {
        let mut p = Poly::zero(self.n);
        for m in self.grams[g.0].map.basis() {
            let double: Vec<u32> = m.iter().map(|e| e * 2).collect();
            p = &p + &Poly::monomial(self.n, &double, 1.0);
        }
        p
    }

    pub fn compile(self) -> Result<CompiledSos, SosError> {
        let nf = self.frees.len();

        #[derive(Clone)]
        struct Row {
            sdp: BTreeMap<(usize, usize, usize), f64>,
            free: Vec<f64>,
            rhs: f64,
            monomial: Vec<u32>,
        }

        fn row_entry<'a>(
            map: &'a mut BTreeMap<Vec<u32>, Row>,
            m: &[u32],
            nf: usize,
        ) -> &'a mut Row {
            map.entry(m.to_vec()).or_insert_with(|| Row {
                sdp: BTreeMap::new(),
                free: vec![0.0; nf],
                rhs: 0.0,
                monomial: m.to_vec(),
            })
        }

        // assemble one row per (identity, monomial)
        let mut rows: Vec<Row> = Vec::new();
        for ident in &self.identities {
            let mut by_monomial: BTreeMap<Vec<u32>, Row> = BTreeMap::new();
            for (gid, mult) in &ident.gram_terms {
                let gv = &self.grams[gid.0];
                for prod in gv.map.monomials() {
                    let pairs = gv.map.pairs(prod).unwrap();
                    for (mexp, mc) in mult.terms() {
                        let target: Vec<u32> =
                            prod.iter().zip(mexp).map(|(a, b)| a + b).collect();
                        let row = row_entry(&mut by_monomial, &target, nf);
                        for &(i, j) in pairs {
                            *row.sdp.entry((gid.0, i, j)).or_insert(0.0) += mc;
                        }
                    }
                }
            }
            for (fid, poly) in &ident.free_terms {
                for (mexp, mc) in poly.terms() {
                    row_entry(&mut by_monomial, mexp, nf).free[fid.0] += mc;
                }
            }
            if let Some(cp) = &ident.constant {
                for (mexp, mc) in cp.terms() {
                    // move to the right-hand side
                    row_entry(&mut by_monomial, mexp, nf).rhs -= mc;
                }
            }
            rows.extend(by_monomial.into_values());
        }

        // objective as a synthetic row, run through the same elimination
        let mut obj = Row {
            sdp: BTreeMap::new(),
            free: vec![0.0; nf],
            rhs: 0.0,
            monomial: vec![],
        };
        for (fid, w) in &self.objective_free {
            obj.free[fid.0] += w;
        }
        for (gid, w) in &self.objective_gram_diag {
            for i in 0..self.grams[gid.0].map.basis().len() {
                *obj.sdp.entry((gid.0, i, i)).or_insert(0.0) += w;
            }
        }

        // Gauss-Jordan elimination of the free scalars
        let mut pivot_rows: Vec<(usize, Row)> = Vec::new(); // (free idx, defining row)
        let mut is_pivot = vec![false; rows.len()];
        for f in 0..nf {
            let mut best: Option<(usize, f64)> = None;
            for (r, row) in rows.iter().enumerate() {
                if is_pivot[r] {
                    continue;
                }
                let a = row.free[f].abs();
                if a > 1e-12 && best.map_or(true, |(_, b)| a > b) {
                    best = Some((r, a));
                }
            }
            let Some((p, _)) = best else {
                if obj.free[f].abs() > 1e-12 {
                    return Err(SosError::UnconstrainedFree(self.frees[f].clone()));
                }
                continue;
            };
            is_pivot[p] = true;
            let pivot = rows[p].clone();
            let pc = pivot.free[f];
            let eliminate = |row: &mut Row| {
                let lam = row.free[f] / pc;
                if lam == 0.0 {
                    return;
                }
                for (k, v) in &pivot.sdp {
                    let e = row.sdp.entry(*k).or_insert(0.0);
                    *e -= lam * v;
                    if e.abs() < 1e-14 {
                        row.sdp.remove(k);
                    }
                }
                for k in 0..nf {
                    row.free[k] -= lam * pivot.free[k];
                }
                row.free[f] = 0.0; // exact by construction
                row.rhs -= lam * pivot.rhs;
            };
            for (r, row) in rows.iter_mut().enumerate() {
                if r != p && !is_pivot[r] {
                    eliminate(row);
                }
            }
            for (_, row) in pivot_rows.iter_mut() {
                eliminate(row);
            }
            eliminate(&mut obj);
            pivot_rows.push((f, pivot));
        }

        // Remaining rows are pure SDP equalities. Orthonormalize them in the
        // Frobenius geometry (modified Gram-Schmidt, two passes): the free-
        // variable elimination can leave nearly dependent rows, and an
        // orthonormal row system keeps the interior-point Schur complement
        // well conditioned. Dependent rows drop out here; dependent rows
        // with a conflicting right-hand side are an error.
        let block_sizes: Vec<usize> =
            self.grams.iter().map(|g| g.map.basis().len()).collect();
        let offsets: Vec<usize> = block_sizes
            .iter()
            .scan(0usize, |acc, &s| {
                let o = *acc;
                *acc += s * (s + 1) / 2;
                Some(o)
            })
            .collect();
        let svec_dim: usize = block_sizes.iter().map(|&s| s * (s + 1) / 2).sum();
        let sq2 = std::f64::consts::SQRT_2;
        // upper-triangle row-major position of (i, j), i <= j
        let svec_idx = |b: usize, i: usize, j: usize| {
            offsets[b] + i * block_sizes[b] - i * (i + 1) / 2 + j
        };

        let mut ortho: Vec<(Vec<f64>, f64)> = Vec::new();
        for (r, row) in rows.iter().enumerate() {
            if is_pivot[r] {
                continue;
            }
            debug_assert!(row.free.iter().all(|v| v.abs() <= 1e-9));
            let scale = row
                .sdp
                .values()
                .map(|v| v.abs())
                .fold(row.rhs.abs(), f64::max);
            if row.sdp.is_empty() || scale <= 1e-12 {
                if row.rhs.abs() > 1e-9 {
                    return Err(SosError::UnrepresentableMonomial {
                        monomial: row.monomial.clone(),
                    });
                }
                continue; // vacuous 0 = 0 row
            }
            let inv = 1.0 / scale;
            let mut v = vec![0.0; svec_dim];
            for (&(b, i, j), &val) in &row.sdp {
                // sqrt(2) off-diagonal scaling makes the dot product match
                // the Frobenius pairing of the symmetric matrices
                v[svec_idx(b, i, j)] = if i == j { val * inv } else { val * inv * sq2 };
            }
            let mut beta = row.rhs * inv;
            for _pass in 0..2 {
                for (u, bu) in &ortho {
                    let c: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
                    if c != 0.0 {
                        for (vi, ui) in v.iter_mut().zip(u) {
                            *vi -= c * ui;
                        }
                        beta -= c * bu;
                    }
                }
            }
            let nv = v.iter().map(|a| a * a).sum::<f64>().sqrt();
            if nv <= 1e-10 {
                if beta.abs() > 1e-8 {
                    return Err(SosError::InconsistentRows);
                }
                continue; // dependent row, consistent with the others
            }
            let renorm = 1.0 / nv;
            for vi in v.iter_mut() {
                *vi *= renorm;
            }
            ortho.push((v, beta * renorm));
        }

        let mut constraints: Vec<SparseSym> = Vec::new();
        let mut rhs: Vec<f64> = Vec::new();
        for (v, beta) in &ortho {
            let mut entries = Vec::new();
            for (b, &size) in block_sizes.iter().enumerate() {
                for i in 0..size {
                    for j in i..size {
                        let val = v[svec_idx(b, i, j)];
                        if val.abs() > 1e-14 {
                            entries.push((b, i, j, if i == j { val } else { val / sq2 }));
                        }
                    }
                }
            }
            constraints.push(SparseSym::new(entries));
            rhs.push(*beta);
        }
        let objective = SparseSym::new(
            obj.sdp.iter().map(|(&(b, i, j), &v)| (b, i, j, v)).collect(),
        );
        let problem = SdpProblem::new(block_sizes, objective, constraints, rhs)?;

        Ok(CompiledSos {
            problem,
            gram_maps: self.grams.into_iter().map(|g| (g.name, g.map)).collect(),
            pivot_rows: pivot_rows
                .into_iter()
                .map(|(f, row)| PivotRow {
                    free_idx: f,
                    sdp: row.sdp.into_iter().collect(),
                    free: row.free,
                    rhs: row.rhs,
                })
                .collect(),
            num_frees: nf,
            objective_offset: -obj.rhs,
        })
    }
}

struct PivotRow {
    free_idx: usize,
    sdp: Vec<((usize, usize, usize), f64)>,
    free: Vec<f64>,
    rhs: f64,
}

/// A compiled SOS program plus the bookkeeping to map an SDP solution back
/// to Gram matrices, polynomials, and eliminated free scalars.
pub struct CompiledSos {
    pub problem: SdpProblem,
    gram_maps: Vec<(String, GramLinearMap)>,
    pivot_rows: Vec<PivotRow>,
    num_frees: usize,
    /// Constant folded out of the objective during elimination; the true
    /// objective value is `sdp value + objective_offset`.
    pub objective_offset: f64,
}

impl CompiledSos {
    pub fn solve(&self) -> SdpSolution {
        sdp::solve(&self.problem)
    }

    pub fn gram_matrix<'a>(&self, sol: &'a SdpSolution, g: GramId) -> &'a DMatrix<f64> {
        &sol.x[g.0]
    }

    /// Reconstruct the polynomial of an SOS slot from its solved Gram block.
    pub fn gram_poly(&self, sol: &SdpSolution, g: GramId) -> Poly {
        self.gram_maps[g.0].1.reconstruct(&sol.x[g.0])
    }

    pub fn gram_map(&self, g: GramId) -> &GramLinearMap {
        &self.gram_maps[g.0].1
    }

    /// Recover all eliminated free scalars by substituting the solved Gram
    /// entries into the pivot rows.
    pub fn free_values(&self, sol: &SdpSolution) -> Vec<f64> {
        let mut vals = vec![0.0; self.num_frees];
        for p in &self.pivot_rows {
            let mut acc = p.rhs;
            for &((b, i, j), v) in &p.sdp {
                let factor = if i == j { 1.0 } else { 2.0 };
                acc -= factor * v * sol.x[b][(i, j)];
            }
            for (k, &c) in p.free.iter().enumerate() {
                if k != p.free_idx && c != 0.0 {
                    acc -= c * vals[k];
                }
            }
            vals[p.free_idx] = acc / p.free[p.free_idx];
        }
        vals
    }
}

// ---------------------------------------------------------------------------
// SOS membership with margin
// ---------------------------------------------------------------------------

/// Gram basis for representing a polynomial of the given degree.
pub fn sos_basis(n: usize, degree: u32) -> Vec<Vec<u32>> {
    monomial_basis(n, degree.div_ceil(2))
}

/// Smallest even multiplier degree keeping every certified product at an
/// even top degree: a field of degree `d` makes `grad V . xdot` top out at
/// `deg V - 1 + d`, and the multiplier must reach past it through `L * V`.
pub fn auto_multiplier_degree(xdot: &[Poly]) -> u32 {
    let fdeg = xdot.iter().map(|p| p.degree()).max().unwrap_or(1);
    2 * fdeg.saturating_sub(1).div_ceil(2).max(1)
}

/// Maximize `t` such that `p = z^T G z` with `G - t I` PSD. Returns the
/// optimal margin and the Gram matrix (shift already added back).
pub fn sos_margin(p: &Poly) -> Result<(f64, DMatrix<f64>), SosError> {
    let n = p.nvars();
    let scale = p.max_abs_coeff().max(1e-12);
    let scaled = p.scale(1.0 / scale);
    let mut b = SosProgramBuilder::new(n);
    let g = b.add_gram("p", sos_basis(n, p.degree()));
    let t = b.add_free("t");
    let sq = b.basis_square_sum(g);
    b.add_identity(
        Identity::new()
            .gram(g, Poly::constant(n, 1.0))
            .free(t, sq)
            .constant(-&scaled),
    );
    b.minimize_free(t, -1.0); // maximize t
    let compiled = b.compile()?;
    let sol = compiled.solve();
    if !sol.is_optimal() {
        return Err(SosError::Solver(sol.status));
    }
    let tval = compiled.free_values(&sol)[0];
    let mut gram = compiled.gram_matrix(&sol, g).clone();
    for i in 0..gram.nrows() {
        gram[(i, i)] += tval;
    }
    Ok((tval, gram * scale))
}

/// Margin-based SOS membership test.
pub fn is_sos(p: &Poly) -> Result<bool, SosError> {
    if p.is_zero() {
        return Ok(true);
    }
    let (margin, _) = sos_margin(p)?;
    Ok(margin >= MARGIN_FEASIBLE_TOL)
}

/// Positive-definiteness screening for a Lyapunov candidate: `V` must be SOS
/// and remain SOS after subtracting a small positive form built from the
/// even degrees actually present in `V` (so purely quartic candidates are
/// shifted by fourth powers rather than squares).
pub fn screen_lyapunov(v: &Poly) -> Result<(), SosError> {
    if v.is_zero() {
        return Err(SosError::VNotPositiveDefinite("V is identically zero".into()));
    }
    let n = v.nvars();
    let at0 = v.eval(&vec![0.0; n]);
    if at0.abs() > 1e-12 {
        return Err(SosError::VNotPositiveDefinite(format!("V(0) = {at0:.3e} != 0")));
    }
    if !is_sos(v)? {
        return Err(SosError::VNotPositiveDefinite("V is not SOS".into()));
    }
    let degrees: Vec<u32> = {
        let mut ds: Vec<u32> = v.terms().map(|(e, _)| e.iter().sum()).collect();
        ds.sort_unstable();
        ds.dedup();
        ds
    };
    let dlo = *degrees.first().unwrap();
    let dhi = *degrees.last().unwrap();
    if dlo % 2 == 1 || dhi % 2 == 1 {
        return Err(SosError::VNotPositiveDefinite(format!(
            "odd-degree terms (degrees {dlo}..{dhi}) cannot be positive definite"
        )));
    }
    let mut shift = Poly::zero(n);
    for i in 0..n {
        let mut lo = vec![0u32; n];
        lo[i] = dlo;
        shift = &shift + &Poly::monomial(n, &lo, 1.0);
        if dhi != dlo {
            let mut hi = vec![0u32; n];
            hi[i] = dhi;
            shift = &shift + &Poly::monomial(n, &hi, 1.0);
        }
    }
    let shifted = v - &shift.scale(SCREEN_EPSILON);
    if !is_sos(&shifted)? {
        return Err(SosError::VNotPositiveDefinite(format!(
            "V minus {SCREEN_EPSILON:.0e} times a degree-({dlo},{dhi}) positive form is not SOS"
        )));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Step 1: initial region by bisection
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct Step1Result {
    /// Largest certified level.
    pub c_star: f64,
    /// Multiplier certifying the level.
    pub multiplier: Poly,
    /// Margin of the certifying solve.
    pub margin: f64,
    /// Number of SDP solves spent.
    pub probes: usize,
    /// True when `c_max` itself was feasible.
    pub saturated: bool,
}

/// Feasibility margin of level `c`: maximize `t` over
/// `-grad V . xdot - L (c - V) = SOS`, `L = SOS`, all Grams shifted by `t I`.
fn step1_margin(
    v: &Poly,
    xdot: &[Poly],
    c: f64,
    mult_degree: u32,
) -> Result<(f64, Poly), SosError> {
    let n = v.nvars();
    let vdot = v
        .gradient()
        .iter()
        .zip(xdot)
        .fold(Poly::zero(n), |acc, (gi, fi)| &acc + &(gi * fi));
    let cv = &Poly::constant(n, c) - v;
    let target_deg = (-&vdot).degree().max(cv.degree() + mult_degree);

    let mut b = SosProgramBuilder::new(n);
    let gq = b.add_gram("main", sos_basis(n, target_deg));
    let gl = b.add_gram("L", sos_basis(n, mult_degree));
    let t = b.add_free("t");
    let sq_q = b.basis_square_sum(gq);
    let sq_l = b.basis_square_sum(gl);
    // z^T Gq z + t S_q + (z^T Gl z + t S_l)(c - V) + grad V . xdot = 0
    b.add_identity(
        Identity::new()
            .gram(gq, Poly::constant(n, 1.0))
            .free(t, sq_q)
            .gram(gl, cv.clone())
            .free(t, &sq_l * &cv)
            .constant(vdot),
    );
    b.minimize_free(t, -1.0);
    let compiled = b.compile()?;
    let sol = compiled.solve();
    if !sol.is_optimal() {
        return Err(SosError::Solver(sol.status));
    }
    let tval = compiled.free_values(&sol)[0];
    let mut gram_l = compiled.gram_matrix(&sol, gl).clone();
    for i in 0..gram_l.nrows() {
        gram_l[(i, i)] += tval.max(0.0);
    }
    let lpoly = compiled.gram_map(gl).reconstruct(&gram_l);
    Ok((tval, lpoly))
}

/// Largest `c` in `(0, c_max]` such that `{V <= c}` is certified invariant
/// and attracted to the origin, found by bisection.
///
/// The first probe is at `c = tol`; failure there means `V` certifies no
/// sublevel set at all. The bisection resolves `c` to within `tol * c_max`,
/// re-verifies the returned level with a fresh solve, and checks that
/// `c* + 2 tol c_max` is infeasible (when still below `c_max`).
pub fn step1_initial_region(
    v: &Poly,
    xdot: &[Poly],
    c_max: f64,
    mult_degree: u32,
    tol: f64,
) -> Result<Step1Result, SosError> {
    screen_lyapunov(v)?;
    let mut probes = 0;
    let mut probe = |c: f64| -> Result<(bool, f64, Poly), SosError> {
        probes += 1;
        let res = step1_margin(v, xdot, c, mult_degree);
        match &res {
            Ok((margin, _)) => log::debug!("level probe at c = {c:.6e}: margin {margin:.3e}"),
            Err(e) => log::debug!("level probe at c = {c:.6e}: {e}"),
        }
        let (margin, l) = res?;
        Ok((margin >= MARGIN_FEASIBLE_TOL, margin, l))
    };

    let (ok, margin, _) = probe(tol)?;
    if !ok {
        return Err(SosError::NotCertifiable { c: tol, margin });
    }
    let mut lo = tol;
    let (top_ok, top_margin, top_l) = probe(c_max)?;
    if top_ok {
        return Ok(Step1Result {
            c_star: c_max,
            multiplier: top_l,
            margin: top_margin,
            probes,
            saturated: true,
        });
    }
    let mut hi = c_max;
    while hi - lo > tol * c_max {
        let mid = 0.5 * (lo + hi);
        let (ok, _, _) = probe(mid)?;
        if ok {
            lo = mid;
        } else {
            hi = mid;
        }
    }

    // fresh certifying solve at the returned level
    let (ok, margin, l) = probe(lo)?;
    if !ok {
        return Err(SosError::NotCertifiable { c: lo, margin });
    }
    // the level just above the resolution window must be infeasible
    let above = lo + 2.0 * tol * c_max;
    if above < c_max {
        let (above_ok, above_margin, _) = probe(above)?;
        if above_ok {
            log::warn!(
                "bisection returned c* = {lo:.6} but c* + 2 tol c_max = {above:.6} is \
                 still feasible (margin {above_margin:.3e}); c* is conservative"
            );
        }
    }
    Ok(Step1Result { c_star: lo, multiplier: l, margin, probes, saturated: false })
}

// ---------------------------------------------------------------------------
// Step 2: multipliers for a fixed barrier
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct Step2Result {
    pub l1: Poly,
    pub l2: Poly,
    /// Containment multiplier tying `{h0 >= 0}` inside `{h >= 0}`.
    pub l3: Poly,
    /// Stage-1 feasibility margin.
    pub margin: f64,
    /// Whether the trace-centered stage-2 multipliers were adopted.
    pub centered: bool,
}

struct Step2Blocks {
    compiled: CompiledSos,
    gl1: GramId,
    gl2: GramId,
    gl3: GramId,
    t: Option<FreeId>,
}

/// Build the step-2 program. With `margin` the Gram blocks are shifted by a
/// maximized `t`; without it the program is a plain feasibility/centering
/// problem minimizing the multiplier traces.
fn build_step2(
    v: &Poly,
    h: &Poly,
    h0: &Poly,
    xdot: &[Poly],
    mult_degree: u32,
    margin: bool,
) -> Result<Step2Blocks, SosError> {
    let n = v.nvars();
    let vdot = v
        .gradient()
        .iter()
        .zip(xdot)
        .fold(Poly::zero(n), |acc, (gi, fi)| &acc + &(gi * fi));
    let hdot = h
        .gradient()
        .iter()
        .zip(xdot)
        .fold(Poly::zero(n), |acc, (gi, fi)| &acc + &(gi * fi));

    let deg_a = vdot.degree().max(h.degree() + mult_degree);
    let deg_b = hdot.degree().max(h.degree() + mult_degree);
    let deg_c = h.degree().max(h0.degree() + mult_degree);

    let mut b = SosProgramBuilder::new(n);
    let ga = b.add_gram("sosA", sos_basis(n, deg_a));
    let gl1 = b.add_gram("L1", sos_basis(n, mult_degree));
    let gb = b.add_gram("sosB", sos_basis(n, deg_b));
    let gl2 = b.add_gram("L2", sos_basis(n, mult_degree));
    let gc = b.add_gram("sosC", sos_basis(n, deg_c));
    let gl3 = b.add_gram("L3", sos_basis(n, mult_degree));
    let t = if margin { Some(b.add_free("t")) } else { None };

    let one = Poly::constant(n, 1.0);
    // I1: sosA + L1 h + grad V . xdot = 0
    let mut i1 = Identity::new()
        .gram(ga, one.clone())
        .gram(gl1, h.clone())
        .constant(vdot);
    // I2: sosB + L2 h - grad h . xdot = 0
    let mut i2 = Identity::new()
        .gram(gb, one.clone())
        .gram(gl2, h.clone())
        .constant(-&hdot);
    // I3: sosC + L3 h0 - h = 0
    let mut i3 = Identity::new()
        .gram(gc, one.clone())
        .gram(gl3, h0.clone())
        .constant(-h);
    if let Some(t) = t {
        i1 = i1
            .free(t, b.basis_square_sum(ga))
            .free(t, &b.basis_square_sum(gl1) * h);
        i2 = i2
            .free(t, b.basis_square_sum(gb))
            .free(t, &b.basis_square_sum(gl2) * h);
        i3 = i3
            .free(t, b.basis_square_sum(gc))
            .free(t, &b.basis_square_sum(gl3) * h0);
        b.minimize_free(t, -1.0);
    } else {
        b.minimize_gram_trace(gl1, 1.0);
        b.minimize_gram_trace(gl2, 1.0);
        b.minimize_gram_trace(gl3, 1.0);
    }
    b.add_identity(i1);
    b.add_identity(i2);
    b.add_identity(i3);
    let compiled = b.compile()?;
    Ok(Step2Blocks { compiled, gl1, gl2, gl3, t })
}

/// Find SOS multipliers `(L1, L2, L3)` certifying the fixed barrier `h`:
///
/// * `-grad V . xdot - L1 h` is SOS (level sets of `V` keep shrinking on `{h >= 0}`),
/// * `grad h . xdot - L2 h` is SOS (`{h >= 0}` is invariant),
/// * `h - L3 h0` is SOS (`{h0 >= 0}` stays inside `{h >= 0}`).
///
/// Stage 1 maximizes the Gram margin to decide feasibility; stage 2 re-solves
/// at zero margin minimizing the multiplier traces, which centers the
/// multipliers and leaves room for the enlargement step.
pub fn step2_multipliers(
    v: &Poly,
    h: &Poly,
    h0: &Poly,
    xdot: &[Poly],
    mult_degree: u32,
) -> Result<Step2Result, SosError> {
    let stage1 = build_step2(v, h, h0, xdot, mult_degree, true)?;
    let sol = stage1.compiled.solve();
    if !sol.is_optimal() {
        return Err(SosError::Solver(sol.status));
    }
    let margin = stage1.compiled.free_values(&sol)[stage1.t.unwrap().0];
    if margin < MARGIN_FEASIBLE_TOL {
        return Err(SosError::InitialBarrierNotCertifiable(margin));
    }
    let extract = |blocks: &Step2Blocks, sol: &SdpSolution, shift: f64| {
        let get = |g: GramId| {
            let mut gram = blocks.compiled.gram_matrix(sol, g).clone();
            for i in 0..gram.nrows() {
                gram[(i, i)] += shift;
            }
            blocks.compiled.gram_map(g).reconstruct(&gram)
        };
        (get(blocks.gl1), get(blocks.gl2), get(blocks.gl3))
    };
    let (l1m, l2m, l3m) = extract(&stage1, &sol, margin.max(0.0));

    // stage 2: trace-centered multipliers at zero margin
    let stage2 = build_step2(v, h, h0, xdot, mult_degree, false)?;
    let sol2 = stage2.compiled.solve();
    if sol2.is_optimal() {
        let (l1, l2, l3) = extract(&stage2, &sol2, 0.0);
        Ok(Step2Result { l1, l2, l3, margin, centered: true })
    } else {
        log::warn!(
            "multiplier centering solve failed with {:?}; keeping margin-stage multipliers",
            sol2.status
        );
        Ok(Step2Result { l1: l1m, l2: l2m, l3: l3m, margin, centered: false })
    }
}

// ---------------------------------------------------------------------------
// Step 3: barrier enlargement
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct Step3Result {
    pub h: Poly,
    /// Canonical Gram of `h` (trace equals `trace`).
    pub gram: DMatrix<f64>,
    /// Trace surrogate value attained.
    pub trace: f64,
    /// Certificate audit outcome for the two invariance identities.
    pub audit_residual: f64,
    pub audit_eigmin: f64,
}

/// Canonical Gram spread of a polynomial: each coefficient is split evenly
/// across the Gram pairs that can produce its monomial. Returns the matrix
/// over the given map's basis.
pub fn canonical_gram(map: &GramLinearMap, h: &Poly) -> Result<DMatrix<f64>, SosError> {
    let size = map.basis().len();
    let mut q = DMatrix::zeros(size, size);
    for (m, c) in h.terms() {
        let pairs = map
            .pairs(m)
            .ok_or_else(|| SosError::UnrepresentableMonomial { monomial: m.clone() })?;
        let share = c / pairs.len() as f64;
        for &(i, j) in pairs {
            if i == j {
                q[(i, i)] += share;
            } else {
                q[(i, j)] += 0.5 * share;
                q[(j, i)] += 0.5 * share;
            }
        }
    }
    Ok(q)
}

/// Trace of the canonical Gram as a linear functional on `h` coefficients:
/// weight per monomial = (number of diagonal pairs) / (number of pairs).
fn trace_weights(map: &GramLinearMap) -> BTreeMap<Vec<u32>, f64> {
    let mut w = BTreeMap::new();
    for m in map.monomials() {
        let pairs = map.pairs(m).unwrap();
        let diag = pairs.iter().filter(|(i, j)| i == j).count();
        if diag > 0 {
            w.insert(m.clone(), diag as f64 / pairs.len() as f64);
        }
    }
    w
}

/// Independent certificate audit: `target` must equal `z^T G z` up to
/// `AUDIT_RESIDUAL_TOL` coefficient-wise, with `G` PSD up to
/// `AUDIT_EIGMIN_TOL`. Returns (residual, eigmin).
fn audit_identity(map: &GramLinearMap, gram: &DMatrix<f64>, target: &Poly) -> (f64, f64) {
    let reconstructed = map.reconstruct(gram);
    let diff = &reconstructed - target;
    let residual = diff.max_abs_coeff();
    let eigmin = gram
        .symmetric_eigenvalues()
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min);
    (residual, eigmin)
}

struct Step3Blocks {
    compiled: CompiledSos,
    h_monomials: Vec<Vec<u32>>,
    h_frees: Vec<FreeId>,
    ga: GramId,
    gb: GramId,
    gram_map: GramLinearMap,
    /// PSD relaxation applied to each Gram block (`G >= -eps I`).
    eps_psd: f64,
}

/// PSD relaxation restoring a strictly feasible interior in step 3.
///
/// The invariance targets vanish at the origin, which pins a Gram diagonal
/// entry to zero and leaves the exact problem without interior. Allowing
/// `G >= -eps I` reopens it; the audit tolerances absorb the shift because
/// `eps` is an order of magnitude below `AUDIT_EIGMIN_TOL`.
const STEP3_EPS_PSD: f64 = 1e-8;

fn build_step3(
    v: &Poly,
    l1: &Poly,
    l2: &Poly,
    l3: &Poly,
    h0: &Poly,
    xdot: &[Poly],
    barrier_degree: u32,
    origin_margin: f64,
    trace_cap: f64,
) -> Result<Step3Blocks, SosError> {
    let n = v.nvars();
    let vdot = v
        .gradient()
        .iter()
        .zip(xdot)
        .fold(Poly::zero(n), |acc, (gi, fi)| &acc + &(gi * fi));

    let h_monomials = monomial_basis(n, barrier_degree);
    let gram_map = GramLinearMap::new(n, monomial_basis(n, barrier_degree.div_ceil(2)));
    let weights = trace_weights(&gram_map);

    let mut b = SosProgramBuilder::new(n);
    // free coefficients of h
    let h_frees: Vec<FreeId> = h_monomials
        .iter()
        .map(|m| b.add_free(&format!("h[{m:?}]")))
        .collect();

    let mult_deg = l1.degree().max(l2.degree()).max(l3.degree());
    let deg_a = vdot.degree().max(barrier_degree + mult_deg);
    let hdot_deg =
        barrier_degree.saturating_sub(1) + xdot.iter().map(|p| p.degree()).max().unwrap_or(0);
    let deg_b = hdot_deg.max(barrier_degree + mult_deg);
    let deg_c = barrier_degree.max(h0.degree() + mult_deg);

    let ga = b.add_gram("sosA", sos_basis(n, deg_a));
    let gb = b.add_gram("sosB", sos_basis(n, deg_b));
    let gc = b.add_gram("sosC", sos_basis(n, deg_c));
    // scalar slacks for the origin and trace guards
    let g_origin = b.add_gram("origin_slack", vec![vec![0; n]]);
    let g_trace = b.add_gram("trace_slack", vec![vec![0; n]]);

    let one = Poly::constant(n, 1.0);
    let eps = STEP3_EPS_PSD;

    // I1: sosA + L1 h + grad V . xdot = eps S_A  (h enters via its coefficients)
    let mut i1 = Identity::new()
        .gram(ga, one.clone())
        .constant(&vdot - &b.basis_square_sum(ga).scale(eps));
    // I2: sosB + L2 h - grad h . xdot = eps S_B
    let mut i2 = Identity::new()
        .gram(gb, one.clone())
        .constant(-&b.basis_square_sum(gb).scale(eps));
    // I3: sosC + L3 h0 - h = eps S_C
    let mut i3 = Identity::new()
        .gram(gc, one.clone())
        .constant(&(l3 * h0) - &b.basis_square_sum(gc).scale(eps));
    // guard rows: h(0) - origin_margin = slack, and
    // trace_cap - sum w h = trace_cap * slack' (the trace slack is kept in
    // units of the cap so its optimal value is O(1) and the row stays well
    // scaled after normalization)
    let mut guard_origin = Identity::new()
        .gram(g_origin, one.clone())
        .constant(Poly::constant(n, origin_margin));
    let mut guard_trace = Identity::new()
        .gram(g_trace, Poly::constant(n, trace_cap))
        .constant(Poly::constant(n, -trace_cap));

    for (m, fid) in h_monomials.iter().zip(&h_frees) {
        let xm = Poly::monomial(n, m, 1.0);
        i1 = i1.free(*fid, l1 * &xm);
        // L2 x^m - grad(x^m) . xdot, the coefficient of h_m in I2
        let mut dmon = Poly::zero(n);
        for (i, fi) in xdot.iter().enumerate() {
            dmon = &dmon + &(&xm.grad(i) * fi);
        }
        i2 = i2.free(*fid, &(l2 * &xm) - &dmon);
        i3 = i3.free(*fid, -&xm);
        if m.iter().all(|&e| e == 0) {
            guard_origin = guard_origin.free(*fid, Poly::constant(n, -1.0));
        }
        if let Some(&w) = weights.get(m) {
            guard_trace = guard_trace.free(*fid, Poly::constant(n, w));
            b.minimize_free(*fid, -w); // maximize the trace surrogate
        }
    }

    b.add_identity(i1);
    b.add_identity(i2);
    b.add_identity(i3);
    b.add_identity(guard_origin);
    b.add_identity(guard_trace);

    let compiled = b.compile()?;
    Ok(Step3Blocks {
        compiled,
        h_monomials,
        h_frees,
        ga,
        gb,
        gram_map,
        eps_psd: eps,
    })
}

/// Enlarge the barrier with the multipliers fixed: maximize the canonical
/// Gram trace of `h` subject to the two invariance identities, the
/// containment identity, `h(0) >= origin_margin`, and a trace cap. The
/// accepted certificate is audited independently of the solver.
pub fn step3_enlarge(
    v: &Poly,
    l1: &Poly,
    l2: &Poly,
    l3: &Poly,
    h0: &Poly,
    xdot: &[Poly],
    barrier_degree: u32,
    origin_margin: f64,
    trace_cap: f64,
) -> Result<Step3Result, SosError> {
    let n = v.nvars();
    let blocks = build_step3(
        v, l1, l2, l3, h0, xdot, barrier_degree, origin_margin, trace_cap,
    )?;
    let compiled = &blocks.compiled;
    let sol = compiled.solve();
    if !sol.is_optimal() {
        return Err(SosError::Solver(sol.status));
    }
    let frees = compiled.free_values(&sol);
    let mut h = Poly::zero(n);
    for (m, fid) in blocks.h_monomials.iter().zip(&blocks.h_frees) {
        let c = frees[fid.0];
        if c.abs() > 1e-13 {
            h = &h + &Poly::monomial(n, m, c);
        }
    }

    // audit the two invariance certificates against the returned h; the
    // audited Grams carry the PSD relaxation shift
    let vdot = v
        .gradient()
        .iter()
        .zip(xdot)
        .fold(Poly::zero(n), |acc, (gi, fi)| &acc + &(gi * fi));
    let hdot = h
        .gradient()
        .iter()
        .zip(xdot)
        .fold(Poly::zero(n), |acc, (gi, fi)| &acc + &(gi * fi));
    let target_a = -&vdot - &(l1 * &h);
    let target_b = &hdot - &(l2 * &h);
    let true_gram = |g: GramId| {
        let mut m = compiled.gram_matrix(&sol, g).clone();
        for i in 0..m.nrows() {
            m[(i, i)] -= blocks.eps_psd;
        }
        m
    };
    let (ra, ea) = audit_identity(compiled.gram_map(blocks.ga), &true_gram(blocks.ga), &target_a);
    let (rb, eb) = audit_identity(compiled.gram_map(blocks.gb), &true_gram(blocks.gb), &target_b);
    let scale_a = target_a.max_abs_coeff().max(1.0);
    let scale_b = target_b.max_abs_coeff().max(1.0);
    let residual = (ra / scale_a).max(rb / scale_b);
    let eigmin = ea.min(eb);
    if residual > AUDIT_RESIDUAL_TOL || eigmin < AUDIT_EIGMIN_TOL {
        return Err(SosError::AuditFailed { residual, eigmin });
    }

    let gram = canonical_gram(&blocks.gram_map, &h)?;
    let trace = gram.trace();
    Ok(Step3Result { h, gram, trace, audit_residual: residual, audit_eigmin: eigmin })
}

// ---------------------------------------------------------------------------
// Alternation
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub enum StopReason {
    /// Trace improvement fell below the tolerance.
    Converged,
    /// Round limit reached.
    MaxRounds,
    /// A later-round step failed; the last audited barrier is kept.
    StepFailed(String),
}

#[derive(Debug, Clone)]
pub struct AlternationResult {
    pub h: Poly,
    pub gram: DMatrix<f64>,
    pub l1: Poly,
    pub l2: Poly,
    pub trace_history: Vec<f64>,
    pub rounds: usize,
    pub stop: StopReason,
}

impl AlternationResult {
    /// Gram matrix as row-major nested vectors (for serialization).
    pub fn gram_rows(&self) -> Vec<Vec<f64>> {
        (0..self.gram.nrows())
            .map(|i| (0..self.gram.ncols()).map(|j| self.gram[(i, j)]).collect())
            .collect()
    }
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct AlternationConfig {
    pub barrier_degree: u32,
    pub mult_degree: u32,
    pub max_rounds: usize,
    /// Stop when the trace gain drops to this value; `f64::INFINITY` runs
    /// exactly one round.
    pub eps: f64,
    pub origin_margin: f64,
    pub trace_cap: f64,
}

impl Default for AlternationConfig {
    fn default() -> Self {
        AlternationConfig {
            barrier_degree: 4,
            mult_degree: 2,
            max_rounds: 10,
            eps: 1e-3,
            origin_margin: ORIGIN_MARGIN_DEFAULT,
            trace_cap: TRACE_CAP_DEFAULT,
        }
    }
}

/// Alternate steps 2 and 3 from the initial barrier `h0` until the trace
/// surrogate stalls. A first-round step-2 failure is an error (the initial
/// barrier is not certifiable); failures on later rounds stop the
/// alternation gracefully, keeping the last audited barrier.
pub fn alternate(
    v: &Poly,
    h0: &Poly,
    xdot: &[Poly],
    cfg: &AlternationConfig,
) -> Result<AlternationResult, SosError> {
    let gram_map = GramLinearMap::new(
        v.nvars(),
        monomial_basis(v.nvars(), cfg.barrier_degree.div_ceil(2)),
    );
    let mut h = h0.clone();
    let mut gram = canonical_gram(&gram_map, &h)?;
    let mut best_l: Option<(Poly, Poly)> = None;
    let mut trace_history = vec![gram.trace()];
    let mut rounds = 0;
    let mut stop = StopReason::MaxRounds;

    for round in 0..cfg.max_rounds {
        let s2 = match step2_multipliers(v, &h, h0, xdot, cfg.mult_degree) {
            Ok(s2) => s2,
            Err(e) => {
                if round == 0 {
                    return Err(match e {
                        SosError::InitialBarrierNotCertifiable(m) => {
                            SosError::InitialBarrierNotCertifiable(m)
                        }
                        other => other,
                    });
                }
                stop = StopReason::StepFailed(format!("round {round} step 2: {e}"));
                break;
            }
        };
        let s3 = match step3_enlarge(
            v,
            &s2.l1,
            &s2.l2,
            &s2.l3,
            h0,
            xdot,
            cfg.barrier_degree,
            cfg.origin_margin,
            cfg.trace_cap,
        ) {
            Ok(s3) => s3,
            Err(e) => {
                if round == 0 {
                    // keep h0 with its multipliers; enlargement failed but
                    // the initial barrier is certified
                    best_l = Some((s2.l1, s2.l2));
                    stop = StopReason::StepFailed(format!("round 0 step 3: {e}"));
                    break;
                }
                stop = StopReason::StepFailed(format!("round {round} step 3: {e}"));
                break;
            }
        };
        rounds = round + 1;
        let prev = *trace_history.last().unwrap();
        let gain = s3.trace - prev;
        if gain < -1e-6 * (1.0 + prev.abs()) {
            // the previous barrier was feasible for this step, so the trace
            // cannot genuinely decrease; treat as numerical stall
            stop = StopReason::StepFailed(format!(
                "round {round} step 3: trace regressed from {prev:.6} to {:.6}",
                s3.trace
            ));
            break;
        }
        h = s3.h;
        gram = s3.gram;
        best_l = Some((s2.l1, s2.l2));
        trace_history.push(s3.trace);
        if gain <= cfg.eps {
            stop = StopReason::Converged;
            break;
        }
    }

    let (l1, l2) = match best_l {
        Some(pair) => pair,
        None => {
            // no successful round; certify h0 directly for the return value
            let s2 = step2_multipliers(v, &h, h0, xdot, cfg.mult_degree)?;
            (s2.l1, s2.l2)
        }
    };
    Ok(AlternationResult { h, gram, l1, l2, trace_history, rounds, stop })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::exprlang::parse_expr;
    use approx::assert_abs_diff_eq;

    fn poly2(src: &str) -> Poly {
        parse_expr(src, 2).unwrap().try_to_polynomial(2).unwrap()
    }

    fn poly3(src: &str) -> Poly {
        parse_expr(src, 3).unwrap().try_to_polynomial(3).unwrap()
    }

    #[test]
    fn sos_membership_basics() {
        assert!(is_sos(&poly2("(x1+1)^2")).unwrap());
        assert!(is_sos(&poly2("x1^2 + x2^2")).unwrap());
        assert!(is_sos(&poly2("2*x1^2 - 2*x1*x2 + x2^2")).unwrap());
        assert!(!is_sos(&poly2("-x1^2")).unwrap());
        assert!(!is_sos(&poly2("x1")).unwrap());
        // nonnegative but famously not a sum of squares
        let motzkin = poly2("x1^4*x2^2 + x1^2*x2^4 - 3*x1^2*x2^2 + 1");
        assert!(!is_sos(&motzkin).unwrap());
    }

    #[test]
    fn sos_margin_separation() {
        // feasible cases sit just below zero; infeasible ones far below
        let (m_feas, gram) = sos_margin(&poly2("(x1+1)^2")).unwrap();
        assert!(m_feas >= MARGIN_FEASIBLE_TOL, "feasible margin {m_feas}");
        assert!(m_feas <= 1e-6);
        let eig = gram.symmetric_eigenvalues();
        assert!(eig.iter().cloned().fold(f64::INFINITY, f64::min) >= -1e-7);
        let (m_inf, _) = sos_margin(&poly2("x1^2 - 0.1*x2^2")).unwrap();
        assert!(m_inf < 1e2 * MARGIN_FEASIBLE_TOL, "infeasible margin {m_inf}");
    }

    #[test]
    fn free_scalar_elimination_recovers_values() {
        // G11 + t = 3 and G11 - t = 1 force G11 = 2, t = 1
        let mut b = SosProgramBuilder::new(1);
        let g = b.add_gram("g", vec![vec![0]]);
        let t = b.add_free("t");
        b.add_identity(
            Identity::new()
                .gram(g, Poly::constant(1, 1.0))
                .free(t, Poly::constant(1, 1.0))
                .constant(Poly::constant(1, -3.0)),
        );
        b.add_identity(
            Identity::new()
                .gram(g, Poly::constant(1, 1.0))
                .free(t, Poly::constant(1, -1.0))
                .constant(Poly::constant(1, -1.0)),
        );
        let compiled = b.compile().unwrap();
        assert_eq!(compiled.problem.num_constraints(), 1);
        let sol = compiled.solve();
        assert!(sol.is_optimal());
        assert_abs_diff_eq!(sol.x[0][(0, 0)], 2.0, epsilon = 1e-6);
        assert_abs_diff_eq!(compiled.free_values(&sol)[0], 1.0, epsilon = 1e-6);
    }

    #[test]
    fn unrepresentable_monomial_rejected() {
        // basis {x1} can only produce x1^2; asking for x1 must fail
        let mut b = SosProgramBuilder::new(1);
        let g = b.add_gram("g", vec![vec![1]]);
        b.add_identity(
            Identity::new()
                .gram(g, Poly::constant(1, 1.0))
                .constant(-&Poly::var(1, 0)),
        );
        match b.compile() {
            Err(SosError::UnrepresentableMonomial { monomial }) => {
                assert_eq!(monomial, vec![1]);
            }
            other => panic!("expected unrepresentable monomial, got {:?}", other.is_ok()),
        }
    }

    #[test]
    fn lyapunov_screening() {
        // classic mixed-degree Lyapunov candidates pass
        screen_lyapunov(&poly2(
            "x1^4 + x2^4 + x1^2*x2^2 + x1^2 + x2^2 + x1*x2",
        ))
        .unwrap();
        // purely quartic positive definite form (no quadratic part) passes
        screen_lyapunov(&poly3(
            "10*x1^4 + x2^4 + 20*x3^4 + 2*x1^2*x2^2 - 4*x3^2*x2^2 + 3*x1^2*x3^2",
        ))
        .unwrap();
        // indefinite candidates fail
        assert!(screen_lyapunov(&poly2("x1^2 - x2^2")).is_err());
        // nonzero at the origin fails
        assert!(screen_lyapunov(&poly2("x1^2 + 1")).is_err());
    }

    fn saturation_1d() -> (Poly, Vec<Poly>) {
        // xdot = -x + x^3: the true attraction basin is |x| < 1 and
        // V = x^2 certifies exactly c* = 1
        let v = Poly::monomial(1, &[2], 1.0);
        let f = &Poly::monomial(1, &[1], -1.0) + &Poly::monomial(1, &[3], 1.0);
        (v, vec![f])
    }

    fn saturation_2d() -> (Poly, Vec<Poly>) {
        let v = poly2("x1^2 + x2^2");
        let f1 = poly2("x1^3 - x1");
        let f2 = poly2("x2^3 - x2");
        (v, vec![f1, f2])
    }

    #[test]
    fn step1_finds_sharp_level() {
        let (v, xdot) = saturation_1d();
        let r = step1_initial_region(&v, &xdot, 2.0, 2, 1e-3).unwrap();
        assert!(
            (r.c_star - 1.0).abs() <= 2e-2,
            "expected c* near 1, got {}",
            r.c_star
        );
        assert!(!r.saturated);
        assert!(r.margin >= MARGIN_FEASIBLE_TOL);
        assert!(is_sos(&r.multiplier).unwrap());
    }

    #[test]
    fn step1_saturates_at_cmax() {
        let (v, xdot) = saturation_1d();
        let r = step1_initial_region(&v, &xdot, 0.5, 2, 1e-3).unwrap();
        assert_eq!(r.c_star, 0.5);
        assert!(r.saturated);
    }

    #[test]
    fn step1_rejects_unstable_system() {
        // xdot = +x is unstable at the origin
        let v = Poly::monomial(1, &[2], 1.0);
        let f = Poly::monomial(1, &[1], 1.0);
        match step1_initial_region(&v, &[f], 2.0, 2, 1e-3) {
            Err(SosError::NotCertifiable { .. }) => {}
            other => panic!("expected not-certifiable, got ok={}", other.is_ok()),
        }
    }

    #[test]
    fn step2_certifies_interior_level_set() {
        let (v, xdot) = saturation_2d();
        let h0 = &Poly::constant(2, 0.9) - &v;
        let r = step2_multipliers(&v, &h0, &h0, &xdot, 2).unwrap();
        assert!(r.margin >= MARGIN_FEASIBLE_TOL);
        assert!(is_sos(&r.l1).unwrap());
        assert!(is_sos(&r.l2).unwrap());
        // the certified products really are SOS
        let vdot = v
            .gradient()
            .iter()
            .zip(&xdot)
            .fold(Poly::zero(2), |a, (g, f)| &a + &(g * f));
        assert!(is_sos(&(-&vdot - &(&r.l1 * &h0))).unwrap());
    }

    #[test]
    fn step2_rejects_uncertifiable_barrier() {
        let (v, xdot) = saturation_2d();
        // a barrier reaching far outside the attraction basin
        let h_bad = &Poly::constant(2, 9.0) - &v;
        match step2_multipliers(&v, &h_bad, &h_bad, &xdot, 2) {
            Err(SosError::InitialBarrierNotCertifiable(m)) => {
                assert!(m < MARGIN_FEASIBLE_TOL);
            }
            other => panic!("expected infeasible, got ok={}", other.is_ok()),
        }
    }

    #[test]
    fn alternation_grows_the_region() {
        let (v, xdot) = saturation_2d();
        let h0 = &Poly::constant(2, 0.9) - &v;
        let cfg = AlternationConfig { max_rounds: 3, ..Default::default() };
        let r = alternate(&v, &h0, &xdot, &cfg).unwrap();
        assert!(r.rounds >= 1, "no successful round, stop = {:?}", r.stop);
        // trace history is monotone and strictly grew somewhere
        for w in r.trace_history.windows(2) {
            assert!(w[1] >= w[0] - 1e-9);
        }
        assert!(
            r.trace_history.last().unwrap() > &(r.trace_history[0] + 0.1),
            "no real growth: {:?}",
            r.trace_history
        );
        // the enlarged zero-sublevel region stays within the true basin
        // |x_i| < 1 and contains the initial region
        let grid = 41;
        let mut contained_h0 = true;
        for i in 0..grid {
            for j in 0..grid {
                let x = [
                    -1.2 + 2.4 * i as f64 / (grid - 1) as f64,
                    -1.2 + 2.4 * j as f64 / (grid - 1) as f64,
                ];
                let hval = r.h.eval(&x);
                if hval >= 0.0 {
                    let inside_basin = x[0].abs() < 1.0 + 1e-6 && x[1].abs() < 1.0 + 1e-6;
                    assert!(inside_basin, "h >= 0 at {x:?} outside the basin");
                }
                if h0.eval(&x) >= 0.0 && hval < -1e-7 {
                    contained_h0 = false;
                }
            }
        }
        assert!(contained_h0, "initial region escaped the enlarged barrier");
        // origin guard respected
        assert!(r.h.eval(&[0.0, 0.0]) >= ORIGIN_MARGIN_DEFAULT - 1e-9);
    }

    #[test]
    fn alternation_single_round_when_eps_infinite() {
        let (v, xdot) = saturation_2d();
        let h0 = &Poly::constant(2, 0.5) - &v;
        let cfg = AlternationConfig {
            eps: f64::INFINITY,
            max_rounds: 10,
            ..Default::default()
        };
        let r = alternate(&v, &h0, &xdot, &cfg).unwrap();
        assert_eq!(r.rounds, 1);
        assert!(matches!(r.stop, StopReason::Converged));
        assert_eq!(r.trace_history.len(), 2);
    }

    #[test]
    fn alternation_rejects_bad_initial_barrier() {
        let (v, xdot) = saturation_2d();
        let h_bad = &Poly::constant(2, 9.0) - &v;
        match alternate(&v, &h_bad, &xdot, &AlternationConfig::default()) {
            Err(SosError::InitialBarrierNotCertifiable(_)) => {}
            other => panic!("expected initial-barrier error, got ok={}", other.is_ok()),
        }
    }

    #[test]
    fn step3_recovers_maximal_quadratic_barrier() {
        // with the exact multipliers for h0 = 0.9 - |x|^2 fixed, the
        // enlargement step should push the barrier out to the inscribed
        // quadratic optimum h ~ 1 - x1^2 - x2^2 (trace 0), up from the
        // initial trace 0.9 - 0.5 - 0.5 = -0.1
        let (v, xdot) = saturation_2d();
        let h0 = &Poly::constant(2, 0.9) - &v;
        let s2 = step2_multipliers(&v, &h0, &h0, &xdot, 2).unwrap();
        let r = step3_enlarge(&v, &s2.l1, &s2.l2, &s2.l3, &h0, &xdot, 4, 1e-3, 1e4).unwrap();
        assert!((r.trace - 0.0).abs() <= 1e-3, "trace {}", r.trace);
        assert!((r.h.eval(&[0.0, 0.0]) - 1.0).abs() <= 1e-3);
        assert!((r.h.eval(&[1.0, 0.0])).abs() <= 1e-3);
        assert!(r.audit_residual <= AUDIT_RESIDUAL_TOL);
        assert!(r.audit_eigmin >= AUDIT_EIGMIN_TOL);
    }

    #[test]
    fn auto_degree_tracks_field_degree() {
        let lin = vec![Poly::var(2, 0), Poly::var(2, 1)];
        assert_eq!(auto_multiplier_degree(&lin), 2);
        let (_, cubic) = saturation_2d();
        assert_eq!(auto_multiplier_degree(&cubic), 2);
        let quartic = vec![poly2("x1^4 + x2"), poly2("x2")];
        assert_eq!(auto_multiplier_degree(&quartic), 4);
        let quintic = vec![poly2("x1^5"), poly2("x2")];
        assert_eq!(auto_multiplier_degree(&quintic), 4);
    }

    #[test]
    fn canonical_gram_reconstructs() {
        let map = GramLinearMap::new(2, monomial_basis(2, 2));
        let h = poly2("1 + x1^2 - 0.5*x1*x2 + x2^4");
        let q = canonical_gram(&map, &h).unwrap();
        let back = map.reconstruct(&q);
        assert!((&back - &h).max_abs_coeff() <= 1e-12);
        // trace weights agree with the explicit matrix trace
        let w = trace_weights(&map);
        let t: f64 = h
            .terms()
            .filter_map(|(m, c)| w.get(m).map(|w| w * c))
            .sum();
        assert_abs_diff_eq!(q.trace(), t, epsilon = 1e-12);
    }
}
