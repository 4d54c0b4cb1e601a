//! Gaussian-process regression with a polynomial mean over residual
//! measurements, plus the confidence machinery that turns information gain
//! into per-episode failure probabilities.
//!
//! The mean is a Bayesian linear model over monomial features (weight prior
//! `N(0, sigma_p^2 I)`, observation noise `sigma_n^2`); features are
//! computed on domain-box-normalized coordinates internally for
//! conditioning, and the fitted weights are mapped back so the published
//! mean polynomial lives in original coordinates. Posterior variance and
//! information gain come from the RBF kernel on the raw inputs. Output
//! dimensions are fitted as independent models sharing one configuration.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::poly::{monomial_basis, Poly};

#[derive(Debug, Error)]
pub enum GpError {
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("dataset misaligned: {0}")]
    Misaligned(String),
    #[error("factorization of K + sigma_n^2 I failed; condition estimate {cond:.3e}")]
    Factorization { cond: f64 },
    #[error("invalid configuration: {0}")]
    BadConfig(String),
    #[error("dataset csv: {0}")]
    Csv(String),
}

/// Shared hyperparameters for all output dimensions.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GpConfig {
    /// RBF signal variance (the kernel's value at zero distance).
    pub signal_variance: f64,
    /// RBF length scale.
    pub length_scale: f64,
    /// Observation noise standard deviation.
    pub noise_sigma_n: f64,
    /// Prior variance of the mean-function weights.
    pub prior_weight_variance: f64,
    /// Total degree of the monomial feature basis.
    pub mean_degree: u32,
    /// Norm bound on the unknown function, used in the confidence bound.
    pub rkhs_bound_b: f64,
    /// Per-axis feature normalization `u_i = x_i / scale_i`; empty means
    /// unit scales.
    #[serde(default)]
    pub feature_scales: Vec<f64>,
    /// Keep the constant feature. Disabling it pins the mean to zero at the
    /// origin, preserving the equilibrium of a learned vector field.
    #[serde(default = "default_true")]
    pub include_constant_feature: bool,
}

fn default_true() -> bool {
    true
}

impl Default for GpConfig {
    fn default() -> Self {
        GpConfig {
            signal_variance: 1.0,
            length_scale: 1.0,
            noise_sigma_n: 0.01,
            prior_weight_variance: 1.0,
            mean_degree: 2,
            rkhs_bound_b: 1.0,
            feature_scales: Vec::new(),
            include_constant_feature: true,
        }
    }
}

impl GpConfig {
    pub fn validate(&self) -> Result<(), GpError> {
        for (name, v) in [
            ("signal_variance", self.signal_variance),
            ("length_scale", self.length_scale),
            ("noise_sigma_n", self.noise_sigma_n),
            ("prior_weight_variance", self.prior_weight_variance),
        ] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(GpError::BadConfig(format!("{name} must be positive, got {v}")));
            }
        }
        if self.rkhs_bound_b < 0.0 {
            return Err(GpError::BadConfig("rkhs_bound_b must be nonnegative".into()));
        }
        if self.feature_scales.iter().any(|&s| !(s > 0.0)) {
            return Err(GpError::BadConfig("feature scales must be positive".into()));
        }
        Ok(())
    }

    /// Set feature scales from a domain box: `scale_i = max(|a_i|, |b_i|)`.
    pub fn with_domain_scales(mut self, domain: &[(f64, f64)]) -> Self {
        self.feature_scales = domain
            .iter()
            .map(|&(a, b)| a.abs().max(b.abs()).max(1e-12))
            .collect();
        self
    }
}

/// Aligned measurements: `targets[dim][i]` belongs to `inputs[i]`.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct Dataset {
    pub inputs: Vec<Vec<f64>>,
    pub targets: Vec<Vec<f64>>,
}

impl Dataset {
    pub fn new(inputs: Vec<Vec<f64>>, targets: Vec<Vec<f64>>) -> Result<Self, GpError> {
        let d = Dataset { inputs, targets };
        d.validate()?;
        Ok(d)
    }

    pub fn validate(&self) -> Result<(), GpError> {
        let k = self.inputs.len();
        if let Some(bad) = self.targets.iter().position(|t| t.len() != k) {
            return Err(GpError::Misaligned(format!(
                "target dimension {bad} has {} entries for {k} inputs",
                self.targets[bad].len()
            )));
        }
        let n = self.inputs.first().map_or(0, |x| x.len());
        if self.inputs.iter().any(|x| x.len() != n) {
            return Err(GpError::Misaligned("inputs have mixed state dimensions".into()));
        }
        Ok(())
    }

    pub fn count(&self) -> usize {
        self.inputs.len()
    }

    pub fn state_dim(&self) -> usize {
        self.inputs.first().map_or(0, |x| x.len())
    }

    pub fn output_dim(&self) -> usize {
        self.targets.len()
    }

    /// Append one measurement (one input, one target per output dimension).
    pub fn push(&mut self, input: Vec<f64>, target: Vec<f64>) -> Result<(), GpError> {
        if target.len() != self.targets.len() {
            return Err(GpError::Misaligned(format!(
                "push with {} targets into {} output dimensions",
                target.len(),
                self.targets.len()
            )));
        }
        self.inputs.push(input);
        for (dim, v) in self.targets.iter_mut().zip(target) {
            dim.push(v);
        }
        self.validate()
    }

    /// Merge another dataset (same shape) into this one.
    pub fn extend(&mut self, other: &Dataset) -> Result<(), GpError> {
        if other.targets.len() != self.targets.len() {
            return Err(GpError::Misaligned("output dimension mismatch in extend".into()));
        }
        self.inputs.extend(other.inputs.iter().cloned());
        for (dst, src) in self.targets.iter_mut().zip(&other.targets) {
            dst.extend(src.iter().copied());
        }
        self.validate()
    }

    /// FNV-1a over the exact bit patterns, so equal data always hashes equal.
    pub fn checksum(&self) -> String {
        let mut h: u64 = 0xcbf29ce484222325;
        let mut eat = |v: f64| {
            for b in v.to_bits().to_le_bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x100000001b3);
            }
        };
        for x in &self.inputs {
            for &v in x {
                eat(v);
            }
        }
        for t in &self.targets {
            for &v in t {
                eat(v);
            }
        }
        format!("{h:016x}")
    }

    /// Parse a CSV with a header `x_1,..,x_n,y_1,..,y_m` (also accepts
    /// `x1`/`y1` style names).
    pub fn from_csv(text: &str) -> Result<Self, GpError> {
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let (_, header) = lines
            .next()
            .ok_or_else(|| GpError::Csv("empty file".into()))?;
        let cols: Vec<&str> = header.split(',').map(str::trim).collect();
        let nx = cols.iter().take_while(|c| c.starts_with('x')).count();
        let ny = cols.len() - nx;
        if nx == 0 || ny == 0 || !cols[nx..].iter().all(|c| c.starts_with('y')) {
            return Err(GpError::Csv(format!(
                "header must be x-columns then y-columns, got {header:?}"
            )));
        }
        let mut inputs = Vec::new();
        let mut targets = vec![Vec::new(); ny];
        for (lineno, line) in lines {
            let vals: Vec<f64> = line
                .split(',')
                .map(|t| t.trim().parse::<f64>())
                .collect::<Result<_, _>>()
                .map_err(|e| GpError::Csv(format!("line {}: {e}", lineno + 1)))?;
            if vals.len() != nx + ny {
                return Err(GpError::Csv(format!(
                    "line {}: {} fields, expected {}",
                    lineno + 1,
                    vals.len(),
                    nx + ny
                )));
            }
            inputs.push(vals[..nx].to_vec());
            for (dim, &v) in targets.iter_mut().zip(&vals[nx..]) {
                dim.push(v);
            }
        }
        Dataset::new(inputs, targets)
    }

    pub fn to_csv(&self) -> String {
        let nx = self.state_dim();
        let ny = self.output_dim();
        let mut out = String::new();
        let header: Vec<String> = (1..=nx)
            .map(|i| format!("x_{i}"))
            .chain((1..=ny).map(|i| format!("y_{i}")))
            .collect();
        out.push_str(&header.join(","));
        out.push('\n');
        for (i, x) in self.inputs.iter().enumerate() {
            let row: Vec<String> = x
                .iter()
                .map(|v| format!("{v}"))
                .chain(self.targets.iter().map(|t| format!("{}", t[i])))
                .collect();
            out.push_str(&row.join(","));
            out.push('\n');
        }
        out
    }
}

/// RBF kernel value on raw (unnormalized) inputs.
pub fn rbf(cfg: &GpConfig, a: &[f64], b: &[f64]) -> f64 {
    let d2: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    cfg.signal_variance * (-d2 / (2.0 * cfg.length_scale * cfg.length_scale)).exp()
}

fn kernel_gram(cfg: &GpConfig, inputs: &[Vec<f64>]) -> DMatrix<f64> {
    let k = inputs.len();
    DMatrix::from_fn(k, k, |i, j| rbf(cfg, &inputs[i], &inputs[j]))
}

/// One entry of the per-episode confidence ledger.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConfidenceEntry {
    pub episode: usize,
    pub samples: usize,
    pub delta: DeltaOutcome,
    pub beta: f64,
    pub gamma: f64,
}

/// Result of inverting the confidence bound for a failure probability.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum DeltaOutcome {
    /// A valid failure probability in (0, 1).
    Attained(f64),
    /// The requested discount cannot be met; the reason says why.
    Unattainable { reason: String },
}

impl DeltaOutcome {
    pub fn value(&self) -> Option<f64> {
        match self {
            DeltaOutcome::Attained(d) => Some(*d),
            DeltaOutcome::Unattainable { .. } => None,
        }
    }
}

/// Fitted model: polynomial mean per output dimension plus cached kernel
/// machinery for posterior variance. Immutable after `fit`.
pub struct GpModel {
    config: GpConfig,
    /// Feature exponents over normalized coordinates.
    basis: Vec<Vec<u32>>,
    /// Fitted weights per output dimension (aligned with `basis`).
    w_hat: Vec<DVector<f64>>,
    /// Mean polynomials in original coordinates.
    means: Vec<Poly>,
    dataset: Dataset,
    chol: Cholesky<f64, Dyn>,
}

fn feature_basis(n: usize, cfg: &GpConfig) -> Vec<Vec<u32>> {
    monomial_basis(n, cfg.mean_degree)
        .into_iter()
        .filter(|e| cfg.include_constant_feature || e.iter().any(|&x| x > 0))
        .collect()
}

fn feature_row(basis: &[Vec<u32>], scales: &[f64], x: &[f64]) -> Vec<f64> {
    let u: Vec<f64> = x
        .iter()
        .enumerate()
        .map(|(i, &v)| v / scales.get(i).copied().unwrap_or(1.0))
        .collect();
    basis
        .iter()
        .map(|e| {
            e.iter()
                .zip(&u)
                .map(|(&p, &ui)| ui.powi(p as i32))
                .product()
        })
        .collect()
}

/// Fit the polynomial mean by MAP estimation (ridge form of the weight
/// posterior) and cache the kernel factorization for variance queries.
pub fn fit(data: &Dataset, cfg: &GpConfig) -> Result<GpModel, GpError> {
    cfg.validate()?;
    data.validate()?;
    let k = data.count();
    if k == 0 {
        return Err(GpError::EmptyDataset);
    }
    let n = data.state_dim();
    let scales = if cfg.feature_scales.is_empty() {
        vec![1.0; n]
    } else if cfg.feature_scales.len() == n {
        cfg.feature_scales.clone()
    } else {
        return Err(GpError::BadConfig(format!(
            "{} feature scales for state dimension {n}",
            cfg.feature_scales.len()
        )));
    };
    let basis = feature_basis(n, cfg);
    let p = basis.len();

    let phi = DMatrix::from_fn(k, p, |i, j| {
        feature_row(&basis, &scales, &data.inputs[i])[j]
    });
    // ridge normal equations: (Phi^T Phi + (sigma_n^2/sigma_p^2) I) w = Phi^T y
    let lambda = cfg.noise_sigma_n.powi(2) / cfg.prior_weight_variance;
    let mut ata = phi.transpose() * &phi;
    for i in 0..p {
        ata[(i, i)] += lambda;
    }
    let ata_chol = Cholesky::new(ata.clone()).ok_or_else(|| {
        let cond = condition_estimate(&ata);
        GpError::Factorization { cond }
    })?;

    let mut w_hat = Vec::with_capacity(data.output_dim());
    let mut means = Vec::with_capacity(data.output_dim());
    for t in &data.targets {
        let y = DVector::from_column_slice(t);
        let w = ata_chol.solve(&(phi.transpose() * y));
        // map weights over normalized coordinates back to a polynomial in x
        let mut mean_u = Poly::zero(n);
        for (e, &wi) in basis.iter().zip(w.iter()) {
            mean_u = &mean_u + &Poly::monomial(n, e, wi);
        }
        let inv_scales: Vec<f64> = scales.iter().map(|s| 1.0 / s).collect();
        means.push(mean_u.substitute_affine(&inv_scales, &vec![0.0; n]));
        w_hat.push(w);
    }

    let mut gram = kernel_gram(cfg, &data.inputs);
    for i in 0..k {
        gram[(i, i)] += cfg.noise_sigma_n.powi(2);
    }
    let chol = Cholesky::new(gram.clone())
        .ok_or_else(|| GpError::Factorization { cond: condition_estimate(&gram) })?;

    Ok(GpModel { config: cfg.clone(), basis, w_hat, means, dataset: data.clone(), chol })
}

fn condition_estimate(m: &DMatrix<f64>) -> f64 {
    let sym = (m + m.transpose()) * 0.5;
    let eig = sym.symmetric_eigenvalues();
    let max = eig.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let min = eig.iter().cloned().fold(f64::INFINITY, f64::min);
    if min.abs() < 1e-300 { f64::INFINITY } else { max / min }
}

impl GpModel {
    pub fn config(&self) -> &GpConfig {
        &self.config
    }

    pub fn dataset(&self) -> &Dataset {
        &self.dataset
    }

    pub fn output_dim(&self) -> usize {
        self.means.len()
    }

    pub fn feature_exponents(&self) -> &[Vec<u32>] {
        &self.basis
    }

    pub fn weights(&self) -> &[DVector<f64>] {
        &self.w_hat
    }

    /// Posterior mean and variance at a query point. The mean comes from the
    /// fitted polynomial; the variance from the kernel posterior
    /// `k(x,x) - k_*^T (K + sigma_n^2 I)^{-1} k_*`, clamped to
    /// `[0, k(x,x)]` against round-off.
    pub fn predict(&self, x_star: &[f64]) -> (Vec<f64>, f64) {
        let means: Vec<f64> = self.means.iter().map(|m| m.eval(x_star)).collect();
        let kxx = self.config.signal_variance;
        let kstar = DVector::from_fn(self.dataset.count(), |i, _| {
            rbf(&self.config, &self.dataset.inputs[i], x_star)
        });
        let v = self.chol.solve(&kstar);
        let var = (kxx - kstar.dot(&v)).clamp(0.0, kxx);
        (means, var)
    }

    /// The exact mean polynomials, one per output dimension, in original
    /// coordinates.
    pub fn mean_polynomials(&self) -> &[Poly] {
        &self.means
    }

    /// Information gain of the dataset under this kernel:
    /// `1/2 log det(I + sigma_n^{-2} K)`.
    pub fn info_gain(&self) -> f64 {
        info_gain(&self.config, &self.dataset.inputs)
    }

    /// Serializable summary: config, basis exponents, weights, dataset
    /// checksum.
    pub fn dump(&self) -> ModelDump {
        ModelDump {
            config: self.config.clone(),
            basis: self.basis.clone(),
            weights: self.w_hat.iter().map(|w| w.iter().copied().collect()).collect(),
            mean_polynomials: self.means.clone(),
            dataset_checksum: self.dataset.checksum(),
            dataset_count: self.dataset.count(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelDump {
    pub config: GpConfig,
    pub basis: Vec<Vec<u32>>,
    pub weights: Vec<Vec<f64>>,
    pub mean_polynomials: Vec<Poly>,
    pub dataset_checksum: String,
    pub dataset_count: usize,
}

/// Information gain `1/2 log det(I + sigma_n^{-2} K)`; an empty dataset
/// carries none.
pub fn info_gain(cfg: &GpConfig, inputs: &[Vec<f64>]) -> f64 {
    let k = inputs.len();
    if k == 0 {
        return 0.0;
    }
    let mut m = kernel_gram(cfg, inputs) / cfg.noise_sigma_n.powi(2);
    for i in 0..k {
        m[(i, i)] += 1.0;
    }
    match Cholesky::new(m) {
        Some(c) => c.l().diagonal().iter().map(|d| d.ln()).sum::<f64>(),
        None => f64::INFINITY,
    }
}

/// Invert the confidence discount `beta^2 = 2 B^2 + 300 gamma log^3(k/delta)`
/// for the failure probability `delta`.
pub fn delta_for_beta(beta: f64, k: usize, gamma: f64, b: f64) -> Result<DeltaOutcome, GpError> {
    if !(beta > 0.0) {
        return Err(GpError::BadConfig(format!("beta must be positive, got {beta}")));
    }
    if k < 1 {
        return Err(GpError::BadConfig("k must be at least 1".into()));
    }
    if gamma < 0.0 || b < 0.0 {
        return Err(GpError::BadConfig("gamma and B must be nonnegative".into()));
    }
    let excess = beta * beta - 2.0 * b * b;
    if excess <= 0.0 {
        return Ok(DeltaOutcome::Unattainable {
            reason: format!(
                "beta^2 = {:.4e} does not exceed 2 B^2 = {:.4e}",
                beta * beta,
                2.0 * b * b
            ),
        });
    }
    if gamma == 0.0 {
        return Ok(DeltaOutcome::Unattainable {
            reason: "zero information gain makes the bound degenerate".into(),
        });
    }
    let delta = k as f64 * (-(excess / (300.0 * gamma)).cbrt()).exp();
    if delta > 0.0 && delta < 1.0 {
        Ok(DeltaOutcome::Attained(delta))
    } else {
        Ok(DeltaOutcome::Unattainable {
            reason: format!("solved delta = {delta:.4e} falls outside (0, 1)"),
        })
    }
}

/// Probability that all `k` measurements stay inside the confidence tube.
pub fn confidence(delta: f64, k: usize) -> f64 {
    (1.0 - delta).powi(k as i32)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn dataset_1d(pairs: &[(f64, f64)]) -> Dataset {
        Dataset::new(
            pairs.iter().map(|&(x, _)| vec![x]).collect(),
            vec![pairs.iter().map(|&(_, y)| y).collect()],
        )
        .unwrap()
    }

    fn random_dataset(rng: &mut ChaCha8Rng, n: usize, k: usize) -> Dataset {
        let inputs: Vec<Vec<f64>> =
            (0..k).map(|_| (0..n).map(|_| rng.gen_range(-1.5..1.5)).collect()).collect();
        let targets = vec![inputs
            .iter()
            .map(|x| x.iter().sum::<f64>().sin() + 0.1 * rng.gen_range(-1.0..1.0))
            .collect()];
        Dataset::new(inputs, targets).unwrap()
    }

    #[test]
    fn fit_recovers_identity_line() {
        // three points on y = x with a wide prior pin w ~ [0, 1]
        let data = dataset_1d(&[(0.0, 0.0), (1.0, 1.0), (-1.0, -1.0)]);
        let cfg = GpConfig {
            noise_sigma_n: 1e-6,
            prior_weight_variance: 1e6, // sigma_p = 1e3
            mean_degree: 1,
            ..Default::default()
        };
        let model = fit(&data, &cfg).unwrap();
        let m = &model.mean_polynomials()[0];
        assert_abs_diff_eq!(m.coeff(&[0]), 0.0, epsilon = 1e-3);
        assert_abs_diff_eq!(m.coeff(&[1]), 1.0, epsilon = 1e-3);
    }

    #[test]
    fn single_origin_measurement_gives_zero_mean_at_origin() {
        let data = dataset_1d(&[(0.0, 0.0)]);
        let model = fit(&data, &GpConfig::default()).unwrap();
        assert!(model.mean_polynomials()[0].eval(&[0.0]).abs() <= 1e-9);
    }

    #[test]
    fn three_map_forms_agree() {
        // Eq-28 form, ridge form, and the precision form of the weight
        // posterior are the same matrix identity; all must agree
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for trial in 0..10 {
            let data = random_dataset(&mut rng, 2, 8 + trial);
            let cfg = GpConfig {
                noise_sigma_n: 0.05,
                prior_weight_variance: 3.0,
                mean_degree: 2,
                ..Default::default()
            };
            let model = fit(&data, &cfg).unwrap();
            let p = model.feature_exponents().len();
            let k = data.count();
            let phi = DMatrix::from_fn(k, p, |i, j| {
                feature_row(model.feature_exponents(), &[1.0, 1.0], &data.inputs[i])[j]
            });
            let y = DVector::from_column_slice(&data.targets[0]);
            let sp2 = cfg.prior_weight_variance;
            let sn2 = cfg.noise_sigma_n.powi(2);
            // form 1: sigma_p^2 Phi^T (sigma_p^2 Phi Phi^T + sigma_n^2 I)^{-1} y
            let mut big = &phi * phi.transpose() * sp2;
            for i in 0..k {
                big[(i, i)] += sn2;
            }
            let w1 = phi.transpose() * big.try_inverse().unwrap() * &y * sp2;
            // form 2: ridge (Phi^T Phi + (sn2/sp2) I)^{-1} Phi^T y
            let mut ata = phi.transpose() * &phi;
            for i in 0..p {
                ata[(i, i)] += sn2 / sp2;
            }
            let w2 = ata.clone().try_inverse().unwrap() * phi.transpose() * &y;
            // form 3: precision A = sn^{-2} Phi^T Phi + sp^{-2} I, w = sn^{-2} A^{-1} Phi^T y
            let mut a = phi.transpose() * &phi / sn2;
            for i in 0..p {
                a[(i, i)] += 1.0 / sp2;
            }
            let w3 = a.try_inverse().unwrap() * phi.transpose() * &y / sn2;
            let wf = &model.weights()[0];
            for j in 0..p {
                assert_abs_diff_eq!(w1[j], w2[j], epsilon = 1e-6);
                assert_abs_diff_eq!(w2[j], w3[j], epsilon = 1e-6);
                assert_abs_diff_eq!(wf[j], w2[j], epsilon = 1e-6);
            }
        }
    }

    #[test]
    fn predict_interpolates_with_small_noise() {
        let data = dataset_1d(&[(-0.8, 0.2), (0.1, -0.4), (0.9, 0.7)]);
        let cfg = GpConfig { noise_sigma_n: 1e-5, ..Default::default() };
        let model = fit(&data, &cfg).unwrap();
        for x in &data.inputs {
            let (_, var) = model.predict(x);
            assert!(var <= 1e-8, "variance {var} at a training input");
        }
        // far away with a small length scale the prior variance returns
        let cfg2 = GpConfig { length_scale: 0.1, ..cfg };
        let model2 = fit(&data, &cfg2).unwrap();
        let (_, far) = model2.predict(&[50.0]);
        assert_abs_diff_eq!(far, cfg2.signal_variance, epsilon = 1e-9);
    }

    #[test]
    fn variance_matches_dense_inverse_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let data = random_dataset(&mut rng, 2, 20);
        let cfg = GpConfig { noise_sigma_n: 0.1, signal_variance: 1.7, ..Default::default() };
        let model = fit(&data, &cfg).unwrap();
        let k = data.count();
        let mut gram = kernel_gram(&cfg, &data.inputs);
        for i in 0..k {
            gram[(i, i)] += cfg.noise_sigma_n.powi(2);
        }
        let inv = gram.try_inverse().unwrap();
        for _ in 0..100 {
            let x: Vec<f64> = (0..2).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let kstar = DVector::from_fn(k, |i, _| rbf(&cfg, &data.inputs[i], &x));
            let oracle = cfg.signal_variance - (kstar.transpose() * &inv * &kstar)[(0, 0)];
            let (_, var) = model.predict(&x);
            assert_abs_diff_eq!(var, oracle.max(0.0), epsilon = 1e-8);
        }
    }

    #[test]
    fn variance_bounds_and_monotonicity() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let cfg = GpConfig { noise_sigma_n: 0.05, ..Default::default() };
        for _ in 0..20 {
            let mut data = random_dataset(&mut rng, 2, 6);
            let model = fit(&data, &cfg).unwrap();
            let queries: Vec<Vec<f64>> = (0..50)
                .map(|_| (0..2).map(|_| rng.gen_range(-2.0..2.0)).collect())
                .collect();
            let before: Vec<f64> = queries.iter().map(|q| model.predict(q).1).collect();
            for &v in &before {
                assert!((0.0..=cfg.signal_variance + 1e-12).contains(&v));
            }
            // one more measurement can only sharpen the posterior
            data.push(
                (0..2).map(|_| rng.gen_range(-1.5..1.5)).collect(),
                vec![rng.gen_range(-1.0..1.0)],
            )
            .unwrap();
            let model2 = fit(&data, &cfg).unwrap();
            for (q, &b) in queries.iter().zip(&before) {
                let after = model2.predict(q).1;
                assert!(after <= b + 1e-10, "variance rose {b} -> {after} at {q:?}");
            }
        }
    }

    #[test]
    fn mean_polynomial_matches_predict_and_degree() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let data = random_dataset(&mut rng, 2, 12);
        let cfg = GpConfig {
            mean_degree: 2,
            feature_scales: vec![2.0, 3.0],
            ..Default::default()
        };
        let model = fit(&data, &cfg).unwrap();
        let mean = &model.mean_polynomials()[0];
        assert!(mean.degree() <= 2);
        for _ in 0..20 {
            let x: Vec<f64> = (0..2).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let (m, _) = model.predict(&x);
            assert_abs_diff_eq!(m[0], mean.eval(&x), epsilon = 1e-12);
        }
    }

    #[test]
    fn dropping_constant_feature_pins_origin() {
        let data = dataset_1d(&[(0.5, 0.9), (-0.7, 0.8), (1.1, 1.2), (0.2, 1.0)]);
        let cfg = GpConfig { include_constant_feature: false, ..Default::default() };
        let model = fit(&data, &cfg).unwrap();
        assert_eq!(model.mean_polynomials()[0].eval(&[0.0]), 0.0);
        // with the constant allowed the same data wants a nonzero offset
        let cfg2 = GpConfig { include_constant_feature: true, ..Default::default() };
        let model2 = fit(&data, &cfg2).unwrap();
        assert!(model2.mean_polynomials()[0].eval(&[0.0]).abs() > 0.1);
    }

    #[test]
    fn info_gain_reference_values() {
        let cfg = GpConfig { signal_variance: 2.0, noise_sigma_n: 0.5, ..Default::default() };
        assert_eq!(info_gain(&cfg, &[]), 0.0);
        // single point: 1/2 log(1 + sigma^2 / sigma_n^2)
        let single = info_gain(&cfg, &[vec![0.3]]);
        assert_abs_diff_eq!(single, 0.5 * (1.0f64 + 2.0 / 0.25).ln(), epsilon = 1e-12);
    }

    #[test]
    fn info_gain_matches_eigenvalue_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cfg = GpConfig { noise_sigma_n: 0.2, ..Default::default() };
        let inputs: Vec<Vec<f64>> =
            (0..10).map(|_| (0..2).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
        let gram = kernel_gram(&cfg, &inputs);
        let oracle: f64 = gram
            .symmetric_eigenvalues()
            .iter()
            .map(|l| 0.5 * (1.0 + l.max(0.0) / cfg.noise_sigma_n.powi(2)).ln())
            .sum();
        assert_abs_diff_eq!(info_gain(&cfg, &inputs), oracle, epsilon = 1e-9);
    }

    #[test]
    fn delta_inversion_reference_case() {
        // beta = 2, B = 0, k = 1, gamma = 1e-3: exp(-(4/0.3)^(1/3)) ~ 0.0934
        match delta_for_beta(2.0, 1, 1e-3, 0.0).unwrap() {
            DeltaOutcome::Attained(d) => assert_abs_diff_eq!(d, 0.0934, epsilon = 1e-4),
            other => panic!("expected attained, got {other:?}"),
        }
        // the solved delta satisfies the defining equation
        let d = delta_for_beta(2.0, 1, 0.02, 0.5).unwrap().value().unwrap();
        let lhs = 2.0 * 0.5f64.powi(2) + 300.0 * 0.02 * (1.0 / d).ln().powi(3);
        assert_abs_diff_eq!(lhs, 4.0, epsilon = 1e-9);
    }

    #[test]
    fn delta_inversion_edge_cases() {
        // vanishing information gain drives delta to zero (confidence to 1)
        let d = delta_for_beta(2.0, 1, 1e-9, 0.0).unwrap().value().unwrap();
        assert!(d < 1e-60);
        // boundary beta^2 = 2 B^2 is unattainable
        assert!(matches!(
            delta_for_beta(2.0, 1, 0.1, (2.0f64).sqrt()).unwrap(),
            DeltaOutcome::Unattainable { .. }
        ));
        // large gamma pushes delta above 1: unattainable, not clamped
        assert!(matches!(
            delta_for_beta(2.0, 10, 1e3, 0.0).unwrap(),
            DeltaOutcome::Unattainable { .. }
        ));
        assert!(delta_for_beta(-1.0, 1, 0.1, 0.0).is_err());
    }

    #[test]
    fn confidence_values_and_monotonicity() {
        assert_abs_diff_eq!(confidence(0.05, 1), 0.95, epsilon = 1e-15);
        assert_abs_diff_eq!(confidence(0.03, 1), 0.97, epsilon = 1e-15);
        assert_eq!(confidence(0.42, 0), 1.0);
        let mut prev = 1.0;
        for k in 1..30 {
            let c = confidence(0.1, k);
            assert!(c < prev, "confidence must strictly decrease in k");
            prev = c;
        }
    }

    #[test]
    fn csv_round_trip_and_checksum() {
        let text = "x_1,x_2,y_1,y_2\n0.5,-1.0,0.25,3.0\n1.5,2.0,-0.75,0.125\n";
        let data = Dataset::from_csv(text).unwrap();
        assert_eq!(data.count(), 2);
        assert_eq!(data.state_dim(), 2);
        assert_eq!(data.output_dim(), 2);
        assert_eq!(data.targets[1], vec![3.0, 0.125]);
        let back = Dataset::from_csv(&data.to_csv()).unwrap();
        assert_eq!(back.inputs, data.inputs);
        assert_eq!(back.targets, data.targets);
        assert_eq!(back.checksum(), data.checksum());
        // any change shifts the checksum
        let mut other = data.clone();
        other.targets[0][0] += 1e-12;
        assert_ne!(other.checksum(), data.checksum());
        assert!(Dataset::from_csv("a,b\n1,2\n").is_err());
        assert!(Dataset::from_csv("x_1,y_1\n1\n").is_err());
    }

    #[test]
    fn model_dump_is_deterministic_json() {
        let data = dataset_1d(&[(0.1, 0.2), (0.4, -0.3)]);
        let model = fit(&data, &GpConfig::default()).unwrap();
        let a = serde_json::to_string(&model.dump()).unwrap();
        let b = serde_json::to_string(&fit(&data, &GpConfig::default()).unwrap().dump()).unwrap();
        assert_eq!(a, b);
        assert!(a.contains("dataset_checksum"));
    }
}
