//! Episode-loop orchestration: assemble the learned system, run the
//! certify-and-enlarge loop per episode, book-keep failure probabilities,
//! and audit certificates on evaluation grids.
//!
//! Each episode fits a GP to the accumulated residual measurements, rebuilds
//! the learned polynomial field, re-certifies an initial sublevel region,
//! enlarges it by barrier alternation, then picks the next measurement
//! trajectory by the variance-seeking sampling policy. Probability bounds
//! over the collection of episodes take the min (union of regions) or max
//! (intersection) of the per-episode confidences.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cheb::{approximate_system, ApproximatedSystem, ChebConfig, ChebError};
use crate::exprlang::{ExprError, SystemDefinition};
use crate::gp::{
    confidence, delta_for_beta, fit, Dataset, DeltaOutcome, GpConfig, GpError, GpModel,
    ModelDump,
};
use crate::poly::Poly;
use crate::sim::{
    grid_candidates, integrate, measure, select_sample, SimConfig, SimError,
};
use crate::sos::{
    alternate, auto_multiplier_degree, step1_initial_region, AlternationConfig, SosError,
    StopReason,
};

/// Tolerance for the learned field's magnitude at the origin.
pub const ORIGIN_ASSEMBLY_TOL: f64 = 1e-6;
/// Grid audit slack for the two invariance conditions.
pub const VALIDATION_TOL: f64 = 1e-6;

const SEED_STRIDE: u64 = 0x9E37_79B9_7F4A_7C15;

#[derive(Debug, Error)]
pub enum RoaError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("empty input: {0}")]
    Empty(String),
    #[error(transparent)]
    Expr(#[from] ExprError),
    #[error(transparent)]
    Cheb(#[from] ChebError),
    #[error(transparent)]
    Gp(#[from] GpError),
    #[error(transparent)]
    Sos(#[from] SosError),
    #[error("{stage}: {source}")]
    Step {
        stage: &'static str,
        source: SosError,
    },
    #[error(transparent)]
    Sim(#[from] SimError),
}

/// Full pipeline configuration. The GP's noise, feature scales, constant
/// feature, and norm bound are overridden from the system definition when
/// the loop runs; the remaining GP fields (kernel hyperparameters, mean
/// degree) are taken as configured here.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RoaConfig {
    /// Lyapunov function certifying the initial region.
    pub v: Poly,
    /// Initial sublevel `{V <= c0}` assumed safe for the first trajectories.
    pub c0: f64,
    /// Number of learning episodes.
    pub episodes: usize,
    /// Confidence multiplier; enters the failure-probability bound squared.
    pub beta: f64,
    pub master_seed: u64,
    /// Start states for the initial measurement trajectories.
    pub initial_starts: Vec<Vec<f64>>,
    pub cheb: ChebConfig,
    pub gp: GpConfig,
    pub alternation: AlternationConfig,
    /// Upper limit for the initial-region level search.
    pub c_max: f64,
    /// Relative tolerance of the level bisection.
    pub step1_tol: f64,
    pub sim: SimConfig,
    /// Candidate-start grid resolution for the sampling policy.
    pub candidates_per_axis: usize,
    /// Validation grid resolution; 0 picks 100/axis in 2D and 40/axis above.
    pub validation_per_axis: usize,
}

impl Default for RoaConfig {
    fn default() -> Self {
        RoaConfig {
            v: Poly::zero(1),
            c0: 0.1,
            episodes: 3,
            beta: 2.0,
            master_seed: 0,
            initial_starts: Vec::new(),
            cheb: ChebConfig::default(),
            gp: GpConfig::default(),
            alternation: AlternationConfig::default(),
            c_max: 10.0,
            step1_tol: 1e-3,
            sim: SimConfig::default(),
            candidates_per_axis: 15,
            validation_per_axis: 0,
        }
    }
}

pub fn default_validation_per_axis(state_dim: usize) -> usize {
    if state_dim <= 2 {
        100
    } else {
        40
    }
}

/// Grid audit of a barrier certificate: on the grid points where the
/// barrier holds, both invariance conditions must hold up to the audit
/// slack, and the region should stay inside the modeling domain.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ValidationReport {
    pub grid_points: usize,
    /// Points with `h >= 0`.
    pub region_points: usize,
    /// Region points violating `grad h . xdot >= -tol`.
    pub barrier_violations: usize,
    /// Region points violating `-grad V . xdot >= -tol`.
    pub lyapunov_violations: usize,
    /// Points with `V <= c_star` but `h < 0` (sublevel containment).
    pub sublevel_violations: usize,
    /// All region points lie inside the domain box.
    pub contained_in_domain: bool,
    pub region_empty: bool,
    pub accepted: bool,
}

/// One accepted episode: the enlarged barrier, its certificate data, and
/// the probability bookkeeping attached to the dataset that produced it.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RoaEstimate {
    pub episode: usize,
    pub barrier: Poly,
    /// Canonical Gram of the barrier (row-major).
    pub gram: Vec<Vec<f64>>,
    pub c_star: f64,
    pub delta: DeltaOutcome,
    pub sample_count: usize,
    /// `(1 - delta)^n` when the failure probability was attained.
    pub confidence: Option<f64>,
    pub info_gain: f64,
    pub validation: ValidationReport,
    pub learned_field: Vec<Poly>,
    pub trace_history: Vec<f64>,
    pub rounds: usize,
    pub stop: StopReason,
}

/// Output of the episode loop. Timings are excluded from serialization so
/// reports are byte-identical across same-seed runs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpisodeReport {
    pub estimates: Vec<RoaEstimate>,
    pub deltas: Vec<DeltaOutcome>,
    /// `min (1-delta_i)^{n_i}`; requires every episode's delta attained.
    pub union_bound: Option<f64>,
    /// `max (1-delta_i)^{n_i}`; same requirement.
    pub intersection_bound: Option<f64>,
    pub episodes_requested: usize,
    /// Reason the loop stopped early, if it did.
    pub truncated: Option<String>,
    /// Dump of the last fitted discrepancy model.
    pub final_model: Option<ModelDump>,
    /// Measurements behind the last fit; refitting with the dumped config
    /// rebuilds the posterior (e.g. for variance surfaces) exactly.
    pub final_dataset: Option<Dataset>,
    /// Wall-clock seconds per episode (not serialized).
    #[serde(skip)]
    pub timings: Vec<f64>,
}

/// The learned vector field `f + Pk + mean`, componentwise.
pub fn assemble_learned_system(
    approx: &ApproximatedSystem,
    model: &GpModel,
) -> Result<Vec<Poly>, RoaError> {
    let n = approx.state_dim;
    if model.output_dim() != n {
        return Err(RoaError::Dimension(format!(
            "model has {} outputs for state dimension {n}",
            model.output_dim()
        )));
    }
    let means = model.mean_polynomials();
    let learned: Vec<Poly> = (0..n).map(|i| &approx.known_field(i) + &means[i]).collect();
    let origin = vec![0.0; n];
    for (i, p) in learned.iter().enumerate() {
        let at0 = p.eval(&origin);
        if at0.abs() > ORIGIN_ASSEMBLY_TOL {
            log::warn!(
                "learned field component {} is {:.3e} at the origin; equilibrium drifted",
                i + 1,
                at0
            );
        }
    }
    Ok(learned)
}

/// Probability bounds over a collection of episodes: the union of the
/// regions holds with at least the worst per-episode confidence, the
/// intersection with the best.
pub fn theorem2_bounds(entries: &[(f64, usize)]) -> Result<(f64, f64), RoaError> {
    if entries.is_empty() {
        return Err(RoaError::Empty("no episodes to bound".into()));
    }
    for &(delta, _) in entries {
        if !(0.0 < delta && delta < 1.0) {
            return Err(RoaError::Empty(format!("delta {delta} outside (0, 1)")));
        }
    }
    let confs: Vec<f64> = entries.iter().map(|&(d, n)| confidence(d, n)).collect();
    let union = confs.iter().cloned().fold(f64::INFINITY, f64::min);
    let inter = confs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    Ok((union, inter))
}

/// Pointwise membership masks and grid-cell area estimates for a family of
/// barrier regions `{h_i >= 0}` over a shared axis-aligned grid.
#[derive(Debug, Clone)]
pub struct RegionMasks {
    pub points: Vec<Vec<f64>>,
    pub masks: Vec<Vec<bool>>,
    pub union: Vec<bool>,
    pub intersection: Vec<bool>,
    pub areas: Vec<f64>,
    pub union_area: f64,
    pub intersection_area: f64,
    pub cell_volume: f64,
}

pub fn region_ops(
    h_list: &[Poly],
    bounds: &[(f64, f64)],
    per_axis: usize,
) -> Result<RegionMasks, RoaError> {
    if per_axis < 2 {
        return Err(RoaError::Empty("grid needs at least 2 points per axis".into()));
    }
    if h_list.is_empty() {
        return Err(RoaError::Empty("no regions given".into()));
    }
    let points = grid_candidates(bounds, per_axis);
    let cell_volume: f64 = bounds
        .iter()
        .map(|&(a, b)| (b - a) / (per_axis - 1) as f64)
        .product();
    let masks: Vec<Vec<bool>> = h_list
        .iter()
        .map(|h| points.iter().map(|p| h.eval(p) >= 0.0).collect())
        .collect();
    let union: Vec<bool> = (0..points.len())
        .map(|i| masks.iter().any(|m| m[i]))
        .collect();
    let intersection: Vec<bool> = (0..points.len())
        .map(|i| masks.iter().all(|m| m[i]))
        .collect();
    let area = |m: &[bool]| m.iter().filter(|&&b| b).count() as f64 * cell_volume;
    let areas = masks.iter().map(|m| area(m)).collect();
    Ok(RegionMasks {
        union_area: area(&union),
        intersection_area: area(&intersection),
        areas,
        points,
        masks,
        union,
        intersection,
        cell_volume,
    })
}

/// Audit a barrier against the learned dynamics on a grid: inside
/// `{h >= 0}` both `grad h . xdot` and `-grad V . xdot` must clear the
/// audit slack, the sublevel `{V <= c_star}` must sit inside the region,
/// and the region must not leak outside the domain box.
pub fn validate_certificate(
    h: &Poly,
    learned: &[Poly],
    v: &Poly,
    c_star: f64,
    domain: &[(f64, f64)],
    per_axis: usize,
) -> ValidationReport {
    let points = grid_candidates(domain, per_axis);
    let hgrad: Vec<Poly> = (0..h.nvars()).map(|i| h.grad(i)).collect();
    let vgrad: Vec<Poly> = (0..v.nvars()).map(|i| v.grad(i)).collect();
    let mut region_points = 0;
    let mut barrier_violations = 0;
    let mut lyapunov_violations = 0;
    let mut sublevel_violations = 0;
    let mut contained = true;
    for p in &points {
        let hv = h.eval(p);
        if v.eval(p) <= c_star && hv < 0.0 {
            sublevel_violations += 1;
        }
        if hv < 0.0 {
            continue;
        }
        region_points += 1;
        let xdot: Vec<f64> = learned.iter().map(|f| f.eval(p)).collect();
        let hdot: f64 = hgrad.iter().zip(&xdot).map(|(g, &d)| g.eval(p) * d).sum();
        if hdot < -VALIDATION_TOL {
            barrier_violations += 1;
        }
        let vdot: f64 = vgrad.iter().zip(&xdot).map(|(g, &d)| g.eval(p) * d).sum();
        if -vdot < -VALIDATION_TOL {
            lyapunov_violations += 1;
        }
        if !p.iter().zip(domain).all(|(&x, &(a, b))| x >= a && x <= b) {
            contained = false;
        }
    }
    ValidationReport {
        grid_points: points.len(),
        region_points,
        barrier_violations,
        lyapunov_violations,
        sublevel_violations,
        contained_in_domain: contained,
        region_empty: region_points == 0,
        accepted: barrier_violations == 0
            && lyapunov_violations == 0
            && sublevel_violations == 0,
    }
}

fn dmatrix_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect())
        .collect()
}

/// Run the full episode loop on a system definition.
///
/// Preprocessing replaces the known non-polynomial part by interpolants and
/// seeds the dataset from the configured start trajectories. Every episode
/// then fits the GP, assembles the learned field, re-certifies the largest
/// Lyapunov sublevel, enlarges it by alternation, audits the result on the
/// validation grid, records the failure probability, and (between
/// episodes) acquires one more trajectory chosen by the sampling policy.
/// A step failure truncates the report at the last successful episode.
pub fn run_algorithm1(
    sys: &SystemDefinition,
    cfg: &RoaConfig,
) -> Result<EpisodeReport, RoaError> {
    let n = sys.state_dim;
    if cfg.v.nvars() != n {
        return Err(RoaError::Dimension(format!(
            "V has {} variables for state dimension {n}",
            cfg.v.nvars()
        )));
    }
    let mut report = EpisodeReport {
        estimates: Vec::new(),
        deltas: Vec::new(),
        union_bound: None,
        intersection_bound: None,
        episodes_requested: cfg.episodes,
        truncated: None,
        final_model: None,
        final_dataset: None,
        timings: Vec::new(),
    };
    if cfg.episodes == 0 {
        return Ok(report);
    }

    // effective GP configuration: measurement noise, origin-preserving
    // features, and the norm bound all come from the system definition
    let mut gp_cfg = cfg.gp.clone();
    gp_cfg.noise_sigma_n = sys.noise_sigma_n.max(1e-6);
    gp_cfg.feature_scales = sys
        .domain
        .iter()
        .map(|&(a, b)| a.abs().max(b.abs()).max(1e-12))
        .collect();
    gp_cfg.include_constant_feature = false;
    gp_cfg.rkhs_bound_b = sys.rkhs_bound_cg;

    let mut true_sim = cfg.sim.clone();
    true_sim.domain = Some(sys.domain.clone());

    let approx = match approximate_system(sys, &cfg.cheb) {
        Ok(a) => a,
        Err(e) => {
            report.truncated = Some(format!("preprocessing: {e}"));
            return Ok(report);
        }
    };

    if cfg.initial_starts.is_empty() {
        report.truncated = Some("no initial start states configured".into());
        return Ok(report);
    }
    for start in &cfg.initial_starts {
        if cfg.v.eval(start) > cfg.c0 {
            log::warn!(
                "initial start {start:?} lies outside the assumed-safe sublevel (V = {:.4} > {})",
                cfg.v.eval(start),
                cfg.c0
            );
        }
    }

    let mut dataset = Dataset::new(Vec::new(), vec![Vec::new(); n])
        .expect("empty aligned dataset");
    let true_field = |x: &[f64]| {
        sys.eval_true_field(x)
            .unwrap_or_else(|_| vec![f64::NAN; x.len()])
    };
    for (j, start) in cfg.initial_starts.iter().enumerate() {
        let seed = cfg.master_seed.wrapping_add((j as u64).wrapping_mul(SEED_STRIDE));
        let batch = (|| -> Result<_, RoaError> {
            let traj = integrate(true_field, start, &true_sim)?;
            Ok(measure(sys, &approx, &traj, true_sim.stride, seed)?)
        })();
        match batch {
            Ok(b) => dataset
                .extend(&b.to_dataset())
                .expect("measurement batches align with the dataset"),
            Err(e) => {
                report.truncated = Some(format!("initial trajectory {}: {e}", j + 1));
                return Ok(report);
            }
        }
    }

    let validation_per_axis = if cfg.validation_per_axis == 0 {
        default_validation_per_axis(n)
    } else {
        cfg.validation_per_axis
    };

    for episode in 1..=cfg.episodes {
        let t0 = std::time::Instant::now();
        let outcome = (|| -> Result<(RoaEstimate, GpModel), RoaError> {
            let model = fit(&dataset, &gp_cfg)?;
            let learned = assemble_learned_system(&approx, &model)?;
            // multiplier degree 0 means: derive from the learned field
            let mut alt_cfg = cfg.alternation.clone();
            if alt_cfg.mult_degree == 0 {
                alt_cfg.mult_degree = auto_multiplier_degree(&learned);
            }
            let s1 = step1_initial_region(
                &cfg.v,
                &learned,
                cfg.c_max,
                alt_cfg.mult_degree,
                cfg.step1_tol,
            )
            .map_err(|e| RoaError::Step {
                stage: "initial level search",
                source: e,
            })?;
            let h0 = &Poly::constant(n, s1.c_star) - &cfg.v;
            let alt = alternate(&cfg.v, &h0, &learned, &alt_cfg).map_err(|e| RoaError::Step {
                stage: "barrier enlargement",
                source: e,
            })?;
            let gamma = model.info_gain();
            let delta = delta_for_beta(cfg.beta, dataset.count(), gamma, gp_cfg.rkhs_bound_b)?;
            let conf = delta.value().map(|d| confidence(d, dataset.count()));
            let validation = validate_certificate(
                &alt.h,
                &learned,
                &cfg.v,
                s1.c_star,
                &sys.domain,
                validation_per_axis,
            );
            let est = RoaEstimate {
                episode,
                barrier: alt.h.clone(),
                gram: dmatrix_rows(&alt.gram),
                c_star: s1.c_star,
                delta,
                sample_count: dataset.count(),
                confidence: conf,
                info_gain: gamma,
                validation,
                learned_field: learned,
                trace_history: alt.trace_history,
                rounds: alt.rounds,
                stop: alt.stop,
            };
            Ok((est, model))
        })();
        let est = match outcome {
            Ok((e, model)) => {
                report.final_model = Some(model.dump());
                report.final_dataset = Some(model.dataset().clone());
                e
            }
            Err(e) => {
                report.truncated = Some(format!("episode {episode}: {e}"));
                break;
            }
        };
        report.deltas.push(est.delta.clone());
        report.estimates.push(est);
        report.timings.push(t0.elapsed().as_secs_f64());

        if episode == cfg.episodes {
            break;
        }
        // sampling policy: next trajectory starts where the certified
        // region still carries the most posterior variance
        let resample = (|| -> Result<(), RoaError> {
            let model = fit(&dataset, &gp_cfg)?;
            let last = report.estimates.last().expect("just pushed");
            let h = last.barrier.clone();
            let learned = last.learned_field.clone();
            let learned_field =
                move |x: &[f64]| learned.iter().map(|p| p.eval(x)).collect::<Vec<f64>>();
            let candidates = grid_candidates(&sys.domain, cfg.candidates_per_axis);
            let region = {
                let domain = sys.domain.clone();
                move |x: &[f64]| {
                    h.eval(x) >= 0.0
                        && x.iter().zip(&domain).all(|(&xi, &(a, b))| xi >= a && xi <= b)
                }
            };
            let pick = select_sample(&model, learned_field, region, &candidates, &cfg.sim)?;
            let seed = cfg.master_seed.wrapping_add(
                ((cfg.initial_starts.len() + episode) as u64).wrapping_mul(SEED_STRIDE),
            );
            let traj = integrate(true_field, &pick.state, &true_sim)?;
            let batch = measure(sys, &approx, &traj, true_sim.stride, seed)?;
            dataset
                .extend(&batch.to_dataset())
                .expect("measurement batches align with the dataset");
            Ok(())
        })();
        if let Err(e) = resample {
            report.truncated = Some(format!("resampling after episode {episode}: {e}"));
            break;
        }
    }

    let attained: Vec<(f64, usize)> = report
        .estimates
        .iter()
        .filter_map(|e| e.delta.value().map(|d| (d, e.sample_count)))
        .collect();
    if !report.estimates.is_empty() && attained.len() == report.estimates.len() {
        let (u, i) = theorem2_bounds(&attained)?;
        report.union_bound = Some(u);
        report.intersection_bound = Some(i);
    }
    Ok(report)
}

// ---------------------------------------------------------------------------
// contour extraction
// ---------------------------------------------------------------------------

/// Edges of the evaluation lattice; a contour crossing lives on exactly one
/// edge, so chaining segments by edge identity needs no float comparisons.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum EdgeId {
    /// Between lattice points (i, j) and (i+1, j).
    H(usize, usize),
    /// Between lattice points (i, j) and (i, j+1).
    V(usize, usize),
}

/// Zero-level polylines of a scalar field sampled on a `per_axis`^2 lattice
/// (marching squares with center-sign disambiguation). Closed loops repeat
/// their first vertex at the end.
pub fn marching_squares<F>(
    eval: F,
    bounds: &[(f64, f64); 2],
    per_axis: usize,
) -> Vec<Vec<(f64, f64)>>
where
    F: Fn(f64, f64) -> f64,
{
    assert!(per_axis >= 2, "contour lattice needs at least 2 points per axis");
    let coord = |axis: usize, idx: usize| -> f64 {
        let (a, b) = bounds[axis];
        a + (b - a) * idx as f64 / (per_axis - 1) as f64
    };
    let vals: Vec<Vec<f64>> = (0..per_axis)
        .map(|i| (0..per_axis).map(|j| eval(coord(0, i), coord(1, j))).collect())
        .collect();

    // crossing position on an edge, exact at corners that are exactly zero
    let point = |e: EdgeId| -> (f64, f64) {
        match e {
            EdgeId::H(i, j) => {
                let (va, vb) = (vals[i][j], vals[i + 1][j]);
                let t = va / (va - vb);
                (coord(0, i) + t * (coord(0, i + 1) - coord(0, i)), coord(1, j))
            }
            EdgeId::V(i, j) => {
                let (va, vb) = (vals[i][j], vals[i][j + 1]);
                let t = va / (va - vb);
                (coord(0, i), coord(1, j) + t * (coord(1, j + 1) - coord(1, j)))
            }
        }
    };

    let mut segments: Vec<(EdgeId, EdgeId)> = Vec::new();
    for i in 0..per_axis - 1 {
        for j in 0..per_axis - 1 {
            let inside = |v: f64| v >= 0.0;
            let c00 = inside(vals[i][j]);
            let c10 = inside(vals[i + 1][j]);
            let c11 = inside(vals[i + 1][j + 1]);
            let c01 = inside(vals[i][j + 1]);
            let case = (c00 as u8) | (c10 as u8) << 1 | (c11 as u8) << 2 | (c01 as u8) << 3;
            let left = EdgeId::V(i, j);
            let right = EdgeId::V(i + 1, j);
            let bottom = EdgeId::H(i, j);
            let top = EdgeId::H(i, j + 1);
            match case {
                0 | 15 => {}
                1 | 14 => segments.push((left, bottom)),
                2 | 13 => segments.push((bottom, right)),
                3 | 12 => segments.push((left, right)),
                4 | 11 => segments.push((right, top)),
                6 | 9 => segments.push((bottom, top)),
                7 | 8 => segments.push((left, top)),
                5 | 10 => {
                    let center = 0.25
                        * (vals[i][j] + vals[i + 1][j] + vals[i + 1][j + 1] + vals[i][j + 1]);
                    let band_through = inside(center) == (case == 5);
                    if band_through {
                        // the inside region connects diagonally through the cell
                        segments.push((left, top));
                        segments.push((bottom, right));
                    } else {
                        segments.push((left, bottom));
                        segments.push((right, top));
                    }
                }
                _ => unreachable!(),
            }
        }
    }

    // chain segments sharing an edge into polylines
    let mut adjacency: std::collections::BTreeMap<EdgeId, Vec<usize>> = Default::default();
    for (idx, &(a, b)) in segments.iter().enumerate() {
        adjacency.entry(a).or_default().push(idx);
        adjacency.entry(b).or_default().push(idx);
    }
    let mut used = vec![false; segments.len()];
    let mut polylines = Vec::new();
    for start in 0..segments.len() {
        if used[start] {
            continue;
        }
        used[start] = true;
        let (a, b) = segments[start];
        let mut chain = std::collections::VecDeque::from([a, b]);
        for (end_is_back, mut tip) in [(true, b), (false, a)] {
            loop {
                let next = adjacency[&tip]
                    .iter()
                    .copied()
                    .find(|&s| !used[s]);
                let Some(s) = next else { break };
                used[s] = true;
                let (p, q) = segments[s];
                tip = if p == tip { q } else { p };
                if end_is_back {
                    chain.push_back(tip);
                } else {
                    chain.push_front(tip);
                }
            }
        }
        let mut pts: Vec<(f64, f64)> = chain.iter().map(|&e| point(e)).collect();
        if chain.front() == chain.back() && chain.len() > 2 {
            // already closed by the walk
        } else if adjacency[chain.front().unwrap()].len() == 2
            && adjacency[chain.back().unwrap()].len() == 2
            && chain.front() != chain.back()
        {
            // both tips saturated means the loop closed between them
            pts.push(pts[0]);
        }
        polylines.push(pts);
    }
    polylines
}

/// Zero-level contours of a two-variable polynomial.
pub fn contour_polylines(
    h: &Poly,
    bounds: &[(f64, f64)],
    per_axis: usize,
) -> Result<Vec<Vec<(f64, f64)>>, RoaError> {
    if h.nvars() != 2 || bounds.len() != 2 {
        return Err(RoaError::Dimension(
            "contour extraction works on two-variable barriers".into(),
        ));
    }
    let b = [bounds[0], bounds[1]];
    Ok(marching_squares(|x, y| h.eval(&[x, y]), &b, per_axis))
}

/// Contours of a three-variable polynomial as a stack of axis-aligned
/// slices along the last coordinate: `(x3 value, polylines in (x1, x2))`.
pub fn contour_slices(
    h: &Poly,
    bounds: &[(f64, f64)],
    per_axis: usize,
    slices: usize,
) -> Result<Vec<(f64, Vec<Vec<(f64, f64)>>)>, RoaError> {
    if h.nvars() != 3 || bounds.len() != 3 {
        return Err(RoaError::Dimension(
            "slice contours work on three-variable barriers".into(),
        ));
    }
    if slices < 1 {
        return Err(RoaError::Empty("need at least one slice".into()));
    }
    let (a3, b3) = bounds[2];
    let b = [bounds[0], bounds[1]];
    let mut out = Vec::with_capacity(slices);
    for s in 0..slices {
        let z = if slices == 1 {
            0.5 * (a3 + b3)
        } else {
            a3 + (b3 - a3) * s as f64 / (slices - 1) as f64
        };
        let polys = marching_squares(|x, y| h.eval(&[x, y, z]), &b, per_axis);
        out.push((z, polys));
    }
    Ok(out)
}

/// CSV rows `polyline,vertex,x_1,x_2` for a family of polylines.
pub fn contours_to_csv(polylines: &[Vec<(f64, f64)>]) -> String {
    let mut out = String::from("polyline,vertex,x_1,x_2\n");
    for (pi, line) in polylines.iter().enumerate() {
        for (vi, (x, y)) in line.iter().enumerate() {
            out.push_str(&format!("{pi},{vi},{x},{y}\n"));
        }
    }
    out
}

/// CSV rows `slice_x3,polyline,vertex,x_1,x_2` for sliced 3D contours.
pub fn slices_to_csv(slices: &[(f64, Vec<Vec<(f64, f64)>>)]) -> String {
    let mut out = String::from("slice_x3,polyline,vertex,x_1,x_2\n");
    for (z, polylines) in slices {
        for (pi, line) in polylines.iter().enumerate() {
            for (vi, (x, y)) in line.iter().enumerate() {
                out.push_str(&format!("{z},{pi},{vi},{x},{y}\n"));
            }
        }
    }
    out
}

/// CSV of the GP posterior variance over a grid: `x_1..x_n,variance`.
pub fn variance_surface_csv(
    model: &GpModel,
    bounds: &[(f64, f64)],
    per_axis: usize,
) -> String {
    let n = bounds.len();
    let mut out = String::new();
    let header: Vec<String> = (1..=n)
        .map(|i| format!("x_{i}"))
        .chain(std::iter::once("variance".to_string()))
        .collect();
    out.push_str(&header.join(","));
    out.push('\n');
    for p in grid_candidates(bounds, per_axis) {
        let (_, var) = model.predict(&p);
        let row: Vec<String> = p
            .iter()
            .map(|v| format!("{v}"))
            .chain(std::iter::once(format!("{var}")))
            .collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::exprlang::parse_system;
    use crate::gp::fit;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn saturation_system(noise: f64) -> SystemDefinition {
        parse_system(&format!(
            "states: x1 x2\n\
             domain: x1 in [-2, 2]; x2 in [-2, 2]\n\
             f: -x1 + x1^3; -x2 + x2^3\n\
             noise_sigma_n: {noise}\n"
        ))
        .unwrap()
    }

    fn quadratic_v() -> Poly {
        let x1 = Poly::var(2, 0);
        let x2 = Poly::var(2, 1);
        &(&x1 * &x1) + &(&x2 * &x2)
    }

    #[test]
    fn assemble_zero_model_reduces_to_known_field() {
        let sys = saturation_system(0.0);
        let approx = approximate_system(&sys, &ChebConfig::default()).unwrap();
        // all-zero targets fit to exactly zero weights
        let inputs = vec![vec![0.2, 0.1], vec![-0.3, 0.4], vec![0.5, -0.2]];
        let targets = vec![vec![0.0; 3], vec![0.0; 3]];
        let data = Dataset::new(inputs, targets).unwrap();
        let model = fit(&data, &GpConfig { include_constant_feature: false, ..Default::default() })
            .unwrap();
        let learned = assemble_learned_system(&approx, &model).unwrap();
        for i in 0..2 {
            let diff = &learned[i] - &approx.known_field(i);
            assert_eq!(diff.max_abs_coeff(), 0.0);
        }
    }

    #[test]
    fn assemble_matches_pointwise_oracle() {
        let sys = saturation_system(0.0);
        let approx = approximate_system(&sys, &ChebConfig::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let inputs: Vec<Vec<f64>> =
            (0..12).map(|_| (0..2).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
        let targets = vec![
            inputs.iter().map(|x| 0.3 * x[0] * x[1]).collect(),
            inputs.iter().map(|x| -0.2 * x[1] * x[1]).collect(),
        ];
        let data = Dataset::new(inputs, targets).unwrap();
        let model = fit(&data, &GpConfig { include_constant_feature: false, ..Default::default() })
            .unwrap();
        let learned = assemble_learned_system(&approx, &model).unwrap();
        for _ in 0..100 {
            let x: Vec<f64> = (0..2).map(|_| rng.gen_range(-1.5..1.5)).collect();
            let (mean, _) = model.predict(&x);
            for i in 0..2 {
                let oracle = approx.known_field(i).eval(&x) + mean[i];
                assert_abs_diff_eq!(learned[i].eval(&x), oracle, epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn theorem2_bounds_reference_values() {
        let (u, i) = theorem2_bounds(&[(0.05, 1), (0.03, 1)]).unwrap();
        assert_abs_diff_eq!(u, 0.95, epsilon = 1e-12);
        assert_abs_diff_eq!(i, 0.97, epsilon = 1e-12);
        let (u, i) = theorem2_bounds(&[(0.2, 4)]).unwrap();
        assert_eq!(u, i);
        let (u, i) = theorem2_bounds(&[(0.1, 2), (0.1, 3)]).unwrap();
        assert_abs_diff_eq!(u, 0.9f64.powi(3), epsilon = 1e-12);
        assert_abs_diff_eq!(i, 0.9f64.powi(2), epsilon = 1e-12);
        assert!(theorem2_bounds(&[]).is_err());
        assert!(theorem2_bounds(&[(1.2, 1)]).is_err());

        // union <= every confidence <= intersection
        let entries = [(0.05, 3), (0.2, 1), (0.11, 7)];
        let (u, i) = theorem2_bounds(&entries).unwrap();
        // recomputed confidences can differ by an ulp (powi const-folding),
        // so the sandwich check carries a tiny slack
        for &(d, n) in &entries {
            let c = confidence(d, n);
            assert!(u <= c + 1e-12 && c <= i + 1e-12, "u = {u}, c = {c}, i = {i}");
        }
    }

    #[test]
    fn region_ops_masks_and_areas() {
        let v = quadratic_v();
        let h = &Poly::constant(2, 0.5) - &v; // disc of radius sqrt(0.5)
        let bounds = [(-2.0, 2.0), (-2.0, 2.0)];
        let r = region_ops(&[h.clone()], &bounds, 101).unwrap();
        assert_eq!(r.masks.len(), 1);
        assert_eq!(r.union, r.masks[0]);
        assert_eq!(r.intersection, r.masks[0]);
        // grid area approximates the disc area pi/2
        assert_abs_diff_eq!(r.areas[0], std::f64::consts::PI / 2.0, epsilon = 0.1);

        // independent re-evaluation oracle
        for (p, &m) in r.points.iter().zip(&r.masks[0]) {
            assert_eq!(m, h.eval(p) >= 0.0);
        }

        // h and -h intersect only where h = 0 exactly; this grid has no such point
        let r2 = region_ops(&[h.clone(), -&h], &bounds, 101).unwrap();
        assert_eq!(r2.intersection_area, 0.0);
        assert_eq!(r2.union.iter().filter(|&&b| b).count(), r2.union.len());

        assert!(region_ops(&[h], &bounds, 1).is_err());
    }

    #[test]
    fn validate_certificate_counts_violations() {
        let v = quadratic_v();
        let learned = vec![
            -&Poly::var(2, 0) + Poly::monomial(2, &[3, 0], 1.0),
            -&Poly::var(2, 1) + Poly::monomial(2, &[0, 3], 1.0),
        ];
        let h = &Poly::constant(2, 0.8) - &v;
        let domain = [(-2.0, 2.0), (-2.0, 2.0)];
        let good = validate_certificate(&h, &learned, &v, 0.8, &domain, 60);
        assert!(good.accepted, "violations: {good:?}");
        assert_eq!(good.barrier_violations + good.lyapunov_violations, 0);
        assert_eq!(good.sublevel_violations, 0);
        assert!(good.contained_in_domain);
        assert!(!good.region_empty);

        // a barrier reaching outside the basin must trip the audit
        let bad = &Poly::constant(2, 3.0) - &v;
        let r = validate_certificate(&bad, &learned, &v, 0.8, &domain, 60);
        assert!(r.barrier_violations > 0 || r.lyapunov_violations > 0);
        assert!(!r.accepted);

        // empty region is vacuously clean but flagged
        let empty = validate_certificate(
            &Poly::constant(2, -1.0),
            &learned,
            &v,
            -2.0,
            &domain,
            30,
        );
        assert!(empty.region_empty);
        assert_eq!(empty.barrier_violations, 0);
        assert!(empty.accepted);
    }

    #[test]
    fn zero_episode_run_is_empty() {
        let sys = saturation_system(0.01);
        let cfg = RoaConfig {
            v: quadratic_v(),
            episodes: 0,
            initial_starts: vec![vec![0.1, 0.1]],
            ..Default::default()
        };
        let report = run_algorithm1(&sys, &cfg).unwrap();
        assert!(report.estimates.is_empty());
        assert!(report.deltas.is_empty());
        assert!(report.truncated.is_none());
    }

    fn fast_roa_config() -> RoaConfig {
        RoaConfig {
            v: quadratic_v(),
            c0: 0.5,
            episodes: 2,
            initial_starts: vec![vec![0.5, -0.4]],
            alternation: AlternationConfig {
                barrier_degree: 2,
                mult_degree: 2,
                max_rounds: 2,
                ..Default::default()
            },
            sim: SimConfig {
                t_horizon: 2.0,
                dt: 1e-2,
                stride: 10,
                ..Default::default()
            },
            candidates_per_axis: 7,
            validation_per_axis: 60,
            master_seed: 42,
            ..Default::default()
        }
    }

    #[test]
    fn two_episode_loop_grows_data_and_validates() {
        let sys = saturation_system(0.01);
        let cfg = fast_roa_config();
        let report = run_algorithm1(&sys, &cfg).unwrap();
        assert!(report.truncated.is_none(), "truncated: {:?}", report.truncated);
        assert_eq!(report.estimates.len(), 2);
        let [e1, e2] = &report.estimates[..] else { panic!() };
        assert!(e2.sample_count > e1.sample_count, "dataset must strictly grow");
        for e in &report.estimates {
            assert!(e.validation.accepted, "validation failed: {:?}", e.validation);
            assert!(!e.validation.region_empty);
            assert!(e.c_star > 0.5, "certified level too small: {}", e.c_star);
            // trace history never regresses within an alternation
            for w in e.trace_history.windows(2) {
                assert!(w[1] >= w[0] - 1e-6);
            }
        }
        // learning a zero residual must not materially shrink the region
        let masks = region_ops(
            &[e1.barrier.clone(), e2.barrier.clone()],
            &sys.domain,
            101,
        )
        .unwrap();
        assert!(
            masks.areas[1] >= 0.95 * masks.areas[0],
            "episode areas {:?}",
            masks.areas
        );
        // failure probability recorded for every episode, attained or not
        assert_eq!(report.deltas.len(), 2);
    }

    #[test]
    fn report_is_byte_identical_under_fixed_seed() {
        let sys = saturation_system(0.01);
        let cfg = fast_roa_config();
        let a = serde_json::to_string(&run_algorithm1(&sys, &cfg).unwrap()).unwrap();
        let b = serde_json::to_string(&run_algorithm1(&sys, &cfg).unwrap()).unwrap();
        assert_eq!(a, b);
        let mut cfg2 = fast_roa_config();
        cfg2.master_seed = 43;
        let c = serde_json::to_string(&run_algorithm1(&sys, &cfg2).unwrap()).unwrap();
        assert_ne!(a, c, "different seed must change the noise stream");
    }

    #[test]
    fn unstable_system_truncates_with_reason() {
        let sys = parse_system(
            "states: x1\n\
             domain: x1 in [-2, 2]\n\
             f: x1\n\
             noise_sigma_n: 0.01\n",
        )
        .unwrap();
        let x = Poly::var(1, 0);
        let cfg = RoaConfig {
            v: &x * &x,
            episodes: 2,
            initial_starts: vec![vec![0.1]],
            sim: SimConfig { t_horizon: 0.5, dt: 1e-2, stride: 5, ..Default::default() },
            ..Default::default()
        };
        let report = run_algorithm1(&sys, &cfg).unwrap();
        assert!(report.estimates.is_empty());
        let reason = report.truncated.expect("must truncate");
        assert!(reason.contains("episode 1"), "reason: {reason}");
    }

    #[test]
    fn marching_squares_traces_the_unit_circle() {
        let v = quadratic_v();
        let h = &Poly::constant(2, 1.0) - &v;
        let lines = contour_polylines(&h, &[(-2.0, 2.0), (-2.0, 2.0)], 81).unwrap();
        assert!(!lines.is_empty());
        let mut total_len = 0.0;
        for line in &lines {
            for w in line.windows(2) {
                let (dx, dy) = (w[1].0 - w[0].0, w[1].1 - w[0].1);
                total_len += (dx * dx + dy * dy).sqrt();
            }
            for &(x, y) in line {
                assert_abs_diff_eq!(x * x + y * y, 1.0, epsilon = 5e-3);
            }
        }
        assert_abs_diff_eq!(total_len, 2.0 * std::f64::consts::PI, epsilon = 0.05);
        // a closed loop repeats its first vertex
        assert_eq!(lines[0].first(), lines[0].last());
    }

    #[test]
    fn contour_slices_shrink_with_height() {
        // unit sphere: slices at |x3| < 1 are circles of radius sqrt(1-z^2)
        let n = 3;
        let v: Poly = (0..n)
            .map(|i| {
                let x = Poly::var(n, i);
                &x * &x
            })
            .fold(Poly::zero(n), |a, b| &a + &b);
        let h = &Poly::constant(n, 1.0) - &v;
        let slices =
            contour_slices(&h, &[(-2.0, 2.0), (-2.0, 2.0), (-0.5, 0.5)], 61, 3).unwrap();
        assert_eq!(slices.len(), 3);
        for (z, lines) in &slices {
            let r2 = 1.0 - z * z;
            for line in lines {
                for &(x, y) in line {
                    assert_abs_diff_eq!(x * x + y * y, r2, epsilon = 2e-2);
                }
            }
        }
        let csv = slices_to_csv(&slices);
        assert!(csv.starts_with("slice_x3,polyline,vertex,x_1,x_2\n"));
    }

    #[test]
    fn variance_surface_covers_grid() {
        let data = Dataset::new(
            vec![vec![0.0, 0.0], vec![0.5, 0.5]],
            vec![vec![0.1, 0.2], vec![0.0, -0.1]],
        )
        .unwrap();
        let model = fit(&data, &GpConfig::default()).unwrap();
        let csv = variance_surface_csv(&model, &[(-1.0, 1.0), (-1.0, 1.0)], 5);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "x_1,x_2,variance");
        assert_eq!(lines.len(), 1 + 25);
        for row in &lines[1..] {
            let var: f64 = row.rsplit(',').next().unwrap().parse().unwrap();
            assert!((0.0..=1.0 + 1e-12).contains(&var));
        }
    }
}
