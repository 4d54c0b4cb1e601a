//! Embedded semidefinite programming solver.
//!
//! Solves block-diagonal SDPs in primal standard form
//!
//! ```text
//!   minimize    <C, X>
//!   subject to  <A_i, X> = b_i,   i = 1..m
//!               X  block-diagonal, each block PSD
//! ```
//!
//! with a primal-dual interior-point method: Nesterov–Todd scaling,
//! Mehrotra predictor-corrector steps, and a fraction-to-boundary rule.
//! Infeasibility and unboundedness are reported with improving-ray
//! certificates. Problems can be exported to and imported from the sparse
//! SDPA text format for cross-checking against external solvers.

use nalgebra::DMatrix;
use thiserror::Error;

/// Relative accuracy targeted by the iteration.
pub const GAP_TARGET: f64 = 1e-8;
/// Worst relative accuracy still reported as `Optimal` when the iteration
/// stalls and falls back to its best iterate. Problems with degenerate
/// optima (no strictly complementary solution) routinely stall a little
/// short of `GAP_TARGET`; their best iterates are still accurate to a few
/// parts in a million, which downstream consumers re-audit anyway.
pub const GAP_ACCEPT: f64 = 1e-5;
/// Iteration cap.
pub const MAX_ITERATIONS: usize = 100;
/// Fraction-to-boundary step damping.
pub const STEP_FRACTION: f64 = 0.98;

#[derive(Debug, Error)]
pub enum SdpError {
    #[error("block sizes must be positive, got {0}")]
    BadBlockSize(usize),
    #[error("entry references block {blk} of {nblocks} / index ({i}, {j}) in block of size {size}")]
    EntryOutOfRange { blk: usize, nblocks: usize, i: usize, j: usize, size: usize },
    #[error("non-finite coefficient in problem data")]
    NonFinite,
    #[error("constraints {0} and {1} are identical rows; remove the duplicate")]
    DuplicateRows(usize, usize),
    #[error("rhs length {0} does not match constraint count {1}")]
    RhsMismatch(usize, usize),
    #[error("SDPA parse error at line {line}: {msg}")]
    Sdpa { line: usize, msg: String },
}

/// Sparse symmetric block matrix: canonical entries `(block, i, j, value)`
/// with `i <= j`, zero-based. An off-diagonal entry `(i, j, v)` stands for
/// `v` in both `(i, j)` and `(j, i)`, so the Frobenius pairing is
/// `<A, X> = sum_diag v X_ii + sum_offdiag 2 v X_ij`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SparseSym {
    pub entries: Vec<(usize, usize, usize, f64)>,
}

impl SparseSym {
    pub fn new(mut entries: Vec<(usize, usize, usize, f64)>) -> Self {
        for e in &mut entries {
            if e.1 > e.2 {
                std::mem::swap(&mut e.1, &mut e.2);
            }
        }
        entries.sort_by(|a, b| (a.0, a.1, a.2).cmp(&(b.0, b.1, b.2)));
        // merge duplicate positions
        let mut merged: Vec<(usize, usize, usize, f64)> = Vec::with_capacity(entries.len());
        for e in entries {
            match merged.last_mut() {
                Some(last) if (last.0, last.1, last.2) == (e.0, e.1, e.2) => last.3 += e.3,
                _ => merged.push(e),
            }
        }
        merged.retain(|e| e.3 != 0.0);
        SparseSym { entries: merged }
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Frobenius pairing with a dense block iterate.
    pub fn dot(&self, x: &[DMatrix<f64>]) -> f64 {
        self.entries
            .iter()
            .map(|&(b, i, j, v)| {
                if i == j {
                    v * x[b][(i, j)]
                } else {
                    2.0 * v * x[b][(i, j)]
                }
            })
            .sum()
    }

    /// Add `scale * self` into dense blocks.
    pub fn add_into(&self, x: &mut [DMatrix<f64>], scale: f64) {
        for &(b, i, j, v) in &self.entries {
            x[b][(i, j)] += scale * v;
            if i != j {
                x[b][(j, i)] += scale * v;
            }
        }
    }

    pub fn to_dense(&self, block_sizes: &[usize]) -> Vec<DMatrix<f64>> {
        let mut out: Vec<DMatrix<f64>> =
            block_sizes.iter().map(|&s| DMatrix::zeros(s, s)).collect();
        self.add_into(&mut out, 1.0);
        out
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.entries
            .iter()
            .map(|&(_, i, j, v)| if i == j { v * v } else { 2.0 * v * v })
            .sum::<f64>()
            .sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.entries.iter().map(|e| e.3.abs()).fold(0.0, f64::max)
    }

    pub fn scale(&self, s: f64) -> SparseSym {
        SparseSym {
            entries: self.entries.iter().map(|&(b, i, j, v)| (b, i, j, v * s)).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SdpProblem {
    pub block_sizes: Vec<usize>,
    pub objective: SparseSym,
    pub constraints: Vec<SparseSym>,
    pub rhs: Vec<f64>,
}

impl SdpProblem {
    pub fn new(
        block_sizes: Vec<usize>,
        objective: SparseSym,
        constraints: Vec<SparseSym>,
        rhs: Vec<f64>,
    ) -> Result<Self, SdpError> {
        if rhs.len() != constraints.len() {
            return Err(SdpError::RhsMismatch(rhs.len(), constraints.len()));
        }
        for &s in &block_sizes {
            if s == 0 {
                return Err(SdpError::BadBlockSize(s));
            }
        }
        let check = |m: &SparseSym| -> Result<(), SdpError> {
            for &(b, i, j, v) in &m.entries {
                if b >= block_sizes.len() || j >= block_sizes[b] || i > j {
                    return Err(SdpError::EntryOutOfRange {
                        blk: b,
                        nblocks: block_sizes.len(),
                        i,
                        j,
                        size: block_sizes.get(b).copied().unwrap_or(0),
                    });
                }
                if !v.is_finite() {
                    return Err(SdpError::NonFinite);
                }
            }
            Ok(())
        };
        check(&objective)?;
        for c in &constraints {
            check(c)?;
        }
        if rhs.iter().any(|v| !v.is_finite()) {
            return Err(SdpError::NonFinite);
        }
        // duplicate-row rejection: identical sparse rows make the Newton
        // system singular and always indicate a modelling bug upstream
        for i in 0..constraints.len() {
            for j in (i + 1)..constraints.len() {
                if constraints[i] == constraints[j] {
                    return Err(SdpError::DuplicateRows(i, j));
                }
            }
        }
        Ok(SdpProblem { block_sizes, objective, constraints, rhs })
    }

    pub fn num_constraints(&self) -> usize {
        self.constraints.len()
    }

    pub fn total_dim(&self) -> usize {
        self.block_sizes.iter().sum()
    }

    /// `A(X)`: all constraint pairings at once.
    pub fn apply(&self, x: &[DMatrix<f64>]) -> Vec<f64> {
        self.constraints.iter().map(|a| a.dot(x)).collect()
    }

    /// `A*(y)` accumulated into dense blocks.
    pub fn apply_adjoint(&self, y: &[f64]) -> Vec<DMatrix<f64>> {
        let mut out: Vec<DMatrix<f64>> =
            self.block_sizes.iter().map(|&s| DMatrix::zeros(s, s)).collect();
        for (a, &yi) in self.constraints.iter().zip(y) {
            if yi != 0.0 {
                a.add_into(&mut out, yi);
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum SdpStatus {
    /// KKT residuals and relative gap within tolerance.
    Optimal,
    /// No PSD `X` satisfies the constraints; an improving dual ray certifies it.
    Infeasible,
    /// The objective decreases without bound; an improving primal ray certifies it.
    Unbounded,
    /// Iteration cap reached without meeting the acceptance tolerance.
    MaxIterations,
    /// Linear algebra broke down before reaching the acceptance tolerance.
    NumericalFailure,
}

/// Improving ray backing an `Infeasible` or `Unbounded` status.
#[derive(Debug, Clone)]
pub enum Certificate {
    /// `y` with `b^T y = 1` and `-A*(y)` PSD: no feasible `X` exists.
    DualRay(Vec<f64>),
    /// Unit-norm PSD `X` with `A(X) = 0` and `<C, X> < 0`.
    PrimalRay(Vec<DMatrix<f64>>),
}

#[derive(Debug, Clone)]
pub struct SdpSolution {
    pub status: SdpStatus,
    pub x: Vec<DMatrix<f64>>,
    pub y: Vec<f64>,
    pub s: Vec<DMatrix<f64>>,
    pub primal_objective: f64,
    pub dual_objective: f64,
    pub iterations: usize,
    pub primal_residual: f64,
    pub dual_residual: f64,
    pub relative_gap: f64,
    pub certificate: Option<Certificate>,
}

impl SdpSolution {
    pub fn is_optimal(&self) -> bool {
        self.status == SdpStatus::Optimal
    }
}

// ---------------------------------------------------------------------------
// Interior-point solver
// ---------------------------------------------------------------------------

struct Scaling {
    /// NT scaling point per block: `W S W = X`.
    w: Vec<DMatrix<f64>>,
    /// Factor `G` with `G G^T = W`.
    g: Vec<DMatrix<f64>>,
    /// `G^{-1}`.
    ginv: Vec<DMatrix<f64>>,
}

fn sym(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Cholesky with escalating diagonal jitter; `None` when hopeless.
fn robust_cholesky(m: &DMatrix<f64>) -> Option<nalgebra::Cholesky<f64, nalgebra::Dyn>> {
    if let Some(c) = nalgebra::Cholesky::new(m.clone()) {
        return Some(c);
    }
    let scale = m.diagonal().amax().max(1.0);
    let mut jitter = 1e-14 * scale;
    while jitter <= 1e-6 * scale {
        let mut j = m.clone();
        for i in 0..j.nrows() {
            j[(i, i)] += jitter;
        }
        if let Some(c) = nalgebra::Cholesky::new(j) {
            return Some(c);
        }
        jitter *= 100.0;
    }
    None
}

fn nt_scaling(x: &[DMatrix<f64>], s: &[DMatrix<f64>]) -> Option<Scaling> {
    let mut w = Vec::with_capacity(x.len());
    let mut g = Vec::with_capacity(x.len());
    let mut ginv = Vec::with_capacity(x.len());
    for (xb, sb) in x.iter().zip(s) {
        let lx = robust_cholesky(xb)?.l();
        let ls = robust_cholesky(sb)?.l();
        let prod = ls.transpose() * &lx;
        let svd = prod.svd(true, true);
        let u_t = svd.v_t?; // right factors: prod = U D V^T
        let d = svd.singular_values;
        if d.iter().any(|&v| v <= 0.0 || !v.is_finite()) {
            return None;
        }
        // G = L_x V D^{-1/2} gives G G^T = L_x V D^{-1} V^T L_x^T = W
        let v = u_t.transpose();
        let mut gb = &lx * v;
        for c in 0..gb.ncols() {
            let f = 1.0 / d[c].sqrt();
            for r in 0..gb.nrows() {
                gb[(r, c)] *= f;
            }
        }
        let wb = &gb * gb.transpose();
        let gi = gb.clone().try_inverse()?;
        w.push(sym(&wb));
        g.push(gb);
        ginv.push(gi);
    }
    Some(Scaling { w, g, ginv })
}

/// Largest `alpha` with `X + alpha D` still PSD (per-block, via the minimum
/// eigenvalue of `L^{-1} D L^{-T}`).
fn max_step(x: &[DMatrix<f64>], d: &[DMatrix<f64>]) -> f64 {
    let mut best = f64::INFINITY;
    for (xb, db) in x.iter().zip(d) {
        let l = match robust_cholesky(xb) {
            Some(c) => c.l(),
            None => return 0.0,
        };
        let linv = match l.clone().try_inverse() {
            Some(m) => m,
            None => return 0.0,
        };
        let scaled = sym(&(&linv * db * linv.transpose()));
        let eig = scaled.symmetric_eigenvalues();
        let lmin = eig.iter().cloned().fold(f64::INFINITY, f64::min);
        if lmin < 0.0 {
            best = best.min(-1.0 / lmin);
        }
    }
    best
}

fn min_eigenvalue(blocks: &[DMatrix<f64>]) -> f64 {
    blocks
        .iter()
        .flat_map(|b| {
            let e = sym(b).symmetric_eigenvalues();
            e.iter().cloned().collect::<Vec<_>>()
        })
        .fold(f64::INFINITY, f64::min)
}

fn frob_norm(blocks: &[DMatrix<f64>]) -> f64 {
    blocks.iter().map(|b| b.norm_squared()).sum::<f64>().sqrt()
}

fn block_dot(a: &[DMatrix<f64>], b: &[DMatrix<f64>]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x.dot(y)).sum()
}

/// Solve the problem; `m = 0` is handled analytically.
pub fn solve(problem: &SdpProblem) -> SdpSolution {
    let m = problem.num_constraints();
    let nu = problem.total_dim() as f64;

    if m == 0 {
        // minimize <C, X> over PSD X: zero if C is PSD, unbounded otherwise
        let c_dense = problem.objective.to_dense(&problem.block_sizes);
        let zeros: Vec<DMatrix<f64>> =
            problem.block_sizes.iter().map(|&s| DMatrix::zeros(s, s)).collect();
        let lmin = min_eigenvalue(&c_dense);
        if lmin >= -1e-12 {
            return SdpSolution {
                status: SdpStatus::Optimal,
                x: zeros,
                y: vec![],
                s: c_dense,
                primal_objective: 0.0,
                dual_objective: 0.0,
                iterations: 0,
                primal_residual: 0.0,
                dual_residual: 0.0,
                relative_gap: 0.0,
                certificate: None,
            };
        }
        // improving ray along the most negative eigenvector of C
        let mut ray = zeros.clone();
        'outer: for (bi, cb) in c_dense.iter().enumerate() {
            let eig = sym(cb).symmetric_eigen();
            for (k, &lam) in eig.eigenvalues.iter().enumerate() {
                if (lam - lmin).abs() <= 1e-12 * (1.0 + lmin.abs()) {
                    let v = eig.eigenvectors.column(k);
                    ray[bi] = &v * v.transpose();
                    break 'outer;
                }
            }
        }
        return SdpSolution {
            status: SdpStatus::Unbounded,
            x: zeros.clone(),
            y: vec![],
            s: c_dense,
            primal_objective: f64::NEG_INFINITY,
            dual_objective: 0.0,
            iterations: 0,
            primal_residual: 0.0,
            dual_residual: 0.0,
            relative_gap: f64::INFINITY,
            certificate: Some(Certificate::PrimalRay(ray)),
        };
    }

    // scaled-identity start
    let b_scale = problem.rhs.iter().fold(0.0f64, |a, &v| a.max(v.abs()));
    let c_scale = problem.objective.max_abs();
    let a_scale = problem.constraints.iter().map(|a| a.max_abs()).fold(0.0, f64::max);
    let eta_p = (1.0 + b_scale / (1.0 + a_scale)).sqrt().max(1.0) * 10.0;
    let eta_d = (1.0 + c_scale).sqrt().max(1.0) * 10.0;

    let mut x: Vec<DMatrix<f64>> = problem
        .block_sizes
        .iter()
        .map(|&sz| DMatrix::identity(sz, sz) * eta_p)
        .collect();
    let mut s: Vec<DMatrix<f64>> = problem
        .block_sizes
        .iter()
        .map(|&sz| DMatrix::identity(sz, sz) * eta_d)
        .collect();
    let mut y = vec![0.0; m];

    let b_norm = problem.rhs.iter().map(|v| v * v).sum::<f64>().sqrt();
    let c_norm = problem.objective.frobenius_norm();

    let mut best: Option<(f64, SdpSolution)> = None;
    let mut best_iter = 0;
    let mut fail_status = SdpStatus::MaxIterations;
    let mut iterations = 0;
    let trace = std::env::var_os("BCROA_SDP_TRACE").is_some();

    for iter in 0..MAX_ITERATIONS {
        iterations = iter + 1;

        // residuals and gap
        let ax = problem.apply(&x);
        let rp: Vec<f64> = problem.rhs.iter().zip(&ax).map(|(b, a)| b - a).collect();
        let mut rd = problem.apply_adjoint(&y);
        for (rb, sb) in rd.iter_mut().zip(&s) {
            *rb = -(rb.clone()) - sb;
        }
        problem.objective.add_into(&mut rd, 1.0); // rd = C - A*(y) - S

        let pobj = problem.objective.dot(&x);
        let dobj: f64 = problem.rhs.iter().zip(&y).map(|(b, y)| b * y).sum();
        let gap = (pobj - dobj).abs() / (1.0 + pobj.abs() + dobj.abs());
        let pres = rp.iter().map(|v| v * v).sum::<f64>().sqrt() / (1.0 + b_norm);
        let dres = frob_norm(&rd) / (1.0 + c_norm);
        let merit = gap.max(pres).max(dres);

        let snapshot = |status: SdpStatus| SdpSolution {
            status,
            x: x.clone(),
            y: y.clone(),
            s: s.clone(),
            primal_objective: pobj,
            dual_objective: dobj,
            iterations,
            primal_residual: pres,
            dual_residual: dres,
            relative_gap: gap,
            certificate: None,
        };

        if merit.is_finite() {
            if best.as_ref().map_or(true, |(bm, _)| merit < *bm) {
                best = Some((merit, snapshot(SdpStatus::Optimal)));
                best_iter = iter;
            }
        } else {
            fail_status = SdpStatus::NumericalFailure;
            break;
        }

        if merit <= GAP_TARGET {
            return snapshot(SdpStatus::Optimal);
        }

        // stagnation guard: near machine precision the iterates start to
        // drift instead of improving; stop and fall back to the best iterate
        if iter >= best_iter + 10 {
            break;
        }

        // infeasibility / unboundedness certificates from diverging iterates
        if iter >= 5 {
            let bty = dobj;
            let y_norm = y.iter().map(|v| v * v).sum::<f64>().sqrt();
            if bty > 1e-6 * (1.0 + y_norm) && y_norm > 1e4 {
                let yhat: Vec<f64> = y.iter().map(|v| v / bty).collect();
                let mut ray_s = problem.apply_adjoint(&yhat);
                for rb in ray_s.iter_mut() {
                    *rb = -(rb.clone());
                }
                let norm = frob_norm(&ray_s).max(1e-12);
                if min_eigenvalue(&ray_s) >= -1e-7 * (1.0 + norm) {
                    let mut sol = snapshot(SdpStatus::Infeasible);
                    sol.certificate = Some(Certificate::DualRay(yhat));
                    return sol;
                }
            }
            let x_norm = frob_norm(&x);
            if pobj < -1e6 && x_norm > 1e4 {
                let xhat: Vec<DMatrix<f64>> = x.iter().map(|b| b / x_norm).collect();
                let ax_hat = problem.apply(&xhat);
                let feas = ax_hat.iter().map(|v| v.abs()).fold(0.0, f64::max);
                if feas <= 1e-7 && problem.objective.dot(&xhat) <= -1e-7 {
                    let mut sol = snapshot(SdpStatus::Unbounded);
                    sol.certificate = Some(Certificate::PrimalRay(xhat));
                    return sol;
                }
            }
        }

        let mu = block_dot(&x, &s) / nu;
        if mu <= 0.0 {
            // complementarity at or below the numerical noise floor
            break;
        }

        let scaling = match nt_scaling(&x, &s) {
            Some(sc) => sc,
            None => {
                fail_status = SdpStatus::NumericalFailure;
                break;
            }
        };

        // Schur complement M_ij = <A_i, W A_j W>
        let wa: Vec<Vec<DMatrix<f64>>> = problem
            .constraints
            .iter()
            .map(|a| {
                let ad = a.to_dense(&problem.block_sizes);
                ad.iter()
                    .zip(&scaling.w)
                    .map(|(ab, wb)| sym(&(wb * ab * wb)))
                    .collect()
            })
            .collect();
        let mut mmat = DMatrix::zeros(m, m);
        for i in 0..m {
            for j in i..m {
                let v = problem.constraints[i].dot(&wa[j]);
                mmat[(i, j)] = v;
                mmat[(j, i)] = v;
            }
        }
        let mchol = match robust_cholesky(&mmat) {
            Some(c) => c,
            None => {
                fail_status = SdpStatus::NumericalFailure;
                break;
            }
        };

        // W R_d W, reused by both predictor and corrector
        let wrdw: Vec<DMatrix<f64>> = rd
            .iter()
            .zip(&scaling.w)
            .map(|(rb, wb)| sym(&(wb * rb * wb)))
            .collect();

        // predictor: complementarity rhs = -X
        let solve_direction = |rc: &[DMatrix<f64>]| -> Option<(Vec<DMatrix<f64>>, Vec<f64>, Vec<DMatrix<f64>>)> {
            // M dy = rp - A(rc) + A(W Rd W)
            let mut rhs = nalgebra::DVector::zeros(m);
            for i in 0..m {
                rhs[i] = rp[i] - problem.constraints[i].dot(rc)
                    + problem.constraints[i].dot(&wrdw);
            }
            let dy = mchol.solve(&rhs);
            // dS = Rd - A*(dy)
            let mut ds = problem.apply_adjoint(dy.as_slice());
            for (db, rb) in ds.iter_mut().zip(&rd) {
                *db = rb - db.clone();
            }
            // dX = rc - W dS W
            let dx: Vec<DMatrix<f64>> = rc
                .iter()
                .zip(ds.iter().zip(&scaling.w))
                .map(|(rcb, (db, wb))| sym(&(rcb - &(wb * db * wb))))
                .collect();
            if dx.iter().chain(ds.iter()).all(|b| b.iter().all(|v| v.is_finite())) {
                Some((dx, dy.as_slice().to_vec(), ds))
            } else {
                None
            }
        };

        let rc_aff: Vec<DMatrix<f64>> = x.iter().map(|b| -b.clone()).collect();
        let (dx_aff, _dy_aff, ds_aff) = match solve_direction(&rc_aff) {
            Some(d) => d,
            None => {
                fail_status = SdpStatus::NumericalFailure;
                break;
            }
        };

        let ap_aff = max_step(&x, &dx_aff).min(1.0);
        let ad_aff = max_step(&s, &ds_aff).min(1.0);
        let mut x_try = x.clone();
        let mut s_try = s.clone();
        for (xb, db) in x_try.iter_mut().zip(&dx_aff) {
            *xb += db * ap_aff;
        }
        for (sb, db) in s_try.iter_mut().zip(&ds_aff) {
            *sb += db * ad_aff;
        }
        let mu_aff = block_dot(&x_try, &s_try).max(0.0) / nu;
        let sigma = ((mu_aff / mu).powi(3)).clamp(1e-8, 1.0);

        // corrector: rc = sigma mu S^{-1} - X - G E G^T with the Mehrotra
        // cross term E formed in the scaled space
        let mut rc = Vec::with_capacity(x.len());
        let mut ok = true;
        for (bi, xb) in x.iter().enumerate() {
            let sinv = match robust_cholesky(&s[bi]) {
                Some(c) => c.inverse(),
                None => {
                    ok = false;
                    break;
                }
            };
            let gi = &scaling.ginv[bi];
            let gb = &scaling.g[bi];
            let dxt = gi * &dx_aff[bi] * gi.transpose();
            let dst = gb.transpose() * &ds_aff[bi] * gb;
            let e = (&dxt * &dst + &dst * &dxt) * 0.5;
            let corr = gb * e * gb.transpose();
            rc.push(sym(&(sinv * (sigma * mu) - xb - corr)));
        }
        if !ok {
            fail_status = SdpStatus::NumericalFailure;
            break;
        }

        let (dx, dy, ds) = match solve_direction(&rc) {
            Some(d) => d,
            None => {
                fail_status = SdpStatus::NumericalFailure;
                break;
            }
        };

        let ap = (STEP_FRACTION * max_step(&x, &dx)).min(1.0);
        let ad = (STEP_FRACTION * max_step(&s, &ds)).min(1.0);
        if trace {
            eprintln!(
                "sdp iter {iter:3}: mu {mu:9.2e} gap {gap:9.2e} pres {pres:9.2e} \
                 dres {dres:9.2e} pobj {pobj:12.5e} dobj {dobj:12.5e} \
                 sigma {sigma:8.2e} ap {ap:8.2e} ad {ad:8.2e}"
            );
        }
        if ap <= 1e-10 && ad <= 1e-10 {
            // no progress possible
            break;
        }
        for (xb, db) in x.iter_mut().zip(&dx) {
            *xb = sym(&(xb.clone() + db * ap));
        }
        for (sb, db) in s.iter_mut().zip(&ds) {
            *sb = sym(&(sb.clone() + db * ad));
        }
        for (yi, di) in y.iter_mut().zip(&dy) {
            *yi += ad * di;
        }
    }

    match best {
        Some((merit, mut sol)) => {
            sol.status = if merit <= GAP_ACCEPT { SdpStatus::Optimal } else { fail_status };
            sol.iterations = iterations;
            sol
        }
        None => SdpSolution {
            status: SdpStatus::NumericalFailure,
            x,
            y,
            s,
            primal_objective: f64::NAN,
            dual_objective: f64::NAN,
            iterations,
            primal_residual: f64::NAN,
            dual_residual: f64::NAN,
            relative_gap: f64::NAN,
            certificate: None,
        },
    }
}

// ---------------------------------------------------------------------------
// SDPA sparse format
// ---------------------------------------------------------------------------

/// Serialize to the sparse SDPA text format (`.dat-s` layout).
///
/// The exported file encodes this problem's Lagrangian dual in SDPA's native
/// form `min c^T v  s.t.  sum_i v_i F_i - F_0 PSD` with `F_0 = -C`,
/// `F_i = A_i`, `c = b`; an external SDPA solve therefore reports the
/// *negated* optimum of this problem. Entry ordering is deterministic:
/// matrices in index order, entries sorted by (block, row, column),
/// one-based indices, upper triangle only.
pub fn export_sdpa(problem: &SdpProblem) -> String {
    let mut out = String::new();
    out.push_str(&format!("{}\n", problem.num_constraints()));
    out.push_str(&format!("{}\n", problem.block_sizes.len()));
    let sizes: Vec<String> = problem.block_sizes.iter().map(|s| s.to_string()).collect();
    out.push_str(&format!("{}\n", sizes.join(" ")));
    let rhs: Vec<String> = problem.rhs.iter().map(|v| format!("{v}")).collect();
    out.push_str(&format!("{}\n", rhs.join(" ")));
    let mut write_mat = |idx: usize, m: &SparseSym, negate: bool| {
        for &(b, i, j, v) in &m.entries {
            let v = if negate { -v } else { v };
            out.push_str(&format!("{} {} {} {} {}\n", idx, b + 1, i + 1, j + 1, v));
        }
    };
    write_mat(0, &problem.objective, true); // F0 = -C
    for (k, a) in problem.constraints.iter().enumerate() {
        write_mat(k + 1, a, false);
    }
    out
}

/// Parse the sparse SDPA text format produced by [`export_sdpa`] (or by
/// external tools, as long as only positive block sizes are used).
pub fn import_sdpa(text: &str) -> Result<SdpProblem, SdpError> {
    let err = |line: usize, msg: &str| SdpError::Sdpa { line, msg: msg.to_string() };
    let mut header: Vec<(usize, String)> = Vec::new();
    let mut entries: Vec<(usize, String)> = Vec::new();
    for (ln, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.starts_with('*') || line.starts_with('"') {
            continue;
        }
        if header.len() < 4 {
            header.push((ln + 1, line.to_string()));
        } else if !line.is_empty() {
            entries.push((ln + 1, line.to_string()));
        }
    }
    if header.len() < 4 {
        return Err(err(text.lines().count(), "truncated header"));
    }
    let m: usize = header[0]
        .1
        .split_whitespace()
        .next()
        .ok_or_else(|| err(header[0].0, "missing constraint count"))?
        .parse()
        .map_err(|_| err(header[0].0, "bad constraint count"))?;
    let nblocks: usize = header[1]
        .1
        .split_whitespace()
        .next()
        .ok_or_else(|| err(header[1].0, "missing block count"))?
        .parse()
        .map_err(|_| err(header[1].0, "bad block count"))?;
    let sizes: Vec<isize> = header[2]
        .1
        .split(|c: char| c.is_whitespace() || c == ',' || c == '(' || c == ')' || c == '{' || c == '}')
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<isize>().map_err(|_| err(header[2].0, "bad block size")))
        .collect::<Result<_, _>>()?;
    if sizes.len() != nblocks {
        return Err(err(header[2].0, "block size count does not match block count"));
    }
    let mut block_sizes = Vec::with_capacity(nblocks);
    for s in sizes {
        if s <= 0 {
            return Err(err(header[2].0, "diagonal (negative-size) blocks are not supported"));
        }
        block_sizes.push(s as usize);
    }
    let rhs: Vec<f64> = header[3]
        .1
        .split(|c: char| c.is_whitespace() || c == ',')
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<f64>().map_err(|_| err(header[3].0, "bad rhs value")))
        .collect::<Result<_, _>>()?;
    if rhs.len() != m {
        return Err(err(header[3].0, "rhs length does not match constraint count"));
    }

    let mut mats: Vec<Vec<(usize, usize, usize, f64)>> = vec![Vec::new(); m + 1];
    for (ln, line) in entries {
        let parts: Vec<&str> = line
            .split(|c: char| c.is_whitespace() || c == ',')
            .filter(|s| !s.is_empty())
            .collect();
        if parts.len() != 5 {
            return Err(err(ln, "entry must have 5 fields: matno block i j value"));
        }
        let k: usize = parts[0].parse().map_err(|_| err(ln, "bad matrix index"))?;
        let b: usize = parts[1].parse().map_err(|_| err(ln, "bad block index"))?;
        let i: usize = parts[2].parse().map_err(|_| err(ln, "bad row index"))?;
        let j: usize = parts[3].parse().map_err(|_| err(ln, "bad column index"))?;
        let v: f64 = parts[4].parse().map_err(|_| err(ln, "bad value"))?;
        if k > m {
            return Err(err(ln, "matrix index exceeds constraint count"));
        }
        if b == 0 || b > nblocks || i == 0 || j == 0 {
            return Err(err(ln, "indices are one-based"));
        }
        if i > block_sizes[b - 1] || j > block_sizes[b - 1] {
            return Err(err(ln, "index exceeds block size"));
        }
        mats[k].push((b - 1, i - 1, j - 1, v));
    }

    let objective = SparseSym::new(mats[0].iter().map(|&(b, i, j, v)| (b, i, j, -v)).collect());
    let constraints: Vec<SparseSym> =
        mats[1..].iter().map(|es| SparseSym::new(es.clone())).collect();
    SdpProblem::new(block_sizes, objective, constraints, rhs)
}
