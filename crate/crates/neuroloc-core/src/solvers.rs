//! Depth weighting, the closed-form regularized inverse, and sLORETA
//! standardization.
//!
//! All solvers pre-whiten the system with the Cholesky factor of the noise
//! covariance instead of forming its inverse: with `C = W Wᵀ`, the inverse
//! `S Lᵀ (L S Lᵀ + λC)⁻¹ b` becomes `S L̃ᵀ (L̃ S L̃ᵀ + λI)⁻¹ b̃` for the
//! whitened `L̃ = W⁻¹L`, `b̃ = W⁻¹b`. The M×M system is factorized (SPD
//! Cholesky), never inverted explicitly.

use nalgebra::{Cholesky, DMatrix, DVector, Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::headmodel::{LeadField, SourceSpace};
use crate::io::{self, Segment};
use crate::simulate::Observation;

/// Eigenvalues of a 3x3 posterior block below this fraction of the largest
/// are treated as the silent (radial) direction and lifted by
/// `rtol * trace` before inversion.
const SLORETA_BLOCK_RTOL: f64 = 1e-10;

/// Per-location prior variances `s_k` (relative scale) with their exponent.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DepthWeights {
    /// One positive weight per source point, rescaled so `max_k s_k = 1`.
    pub s: Vec<f64>,
    /// Depth-weighting exponent. `p = 0` gives uniform weights.
    pub p: f64,
    /// The max of the raw weights, i.e. the factor divided out of `s`.
    pub normalization: f64,
}

impl DepthWeights {
    /// Uniform weights (`p = 0`) for a space of `n` points.
    pub fn uniform(n: usize) -> DepthWeights {
        DepthWeights {
            s: vec![1.0; n],
            p: 0.0,
            normalization: 1.0,
        }
    }

    pub fn len(&self) -> usize {
        self.s.len()
    }

    pub fn is_empty(&self) -> bool {
        self.s.is_empty()
    }
}

/// Solver output: the current vector plus its per-point readout.
///
/// For MNE and the deep-prior solver, `per_point_amplitude[k]` is the
/// Euclidean norm of the k-th moment triple of `q_hat`. sLORETA instead
/// stores its standardized power there (that is its localization readout);
/// `q_hat` still holds the underlying unstandardized solution.
#[derive(Debug, Clone)]
pub struct CurrentEstimate {
    pub q_hat: DVector<f64>,
    pub per_point_amplitude: Vec<f64>,
    pub method: String,
    pub lambda: f64,
    pub solver_diagnostics: BTreeMap<String, f64>,
}

/// Norms of the 3-entry moment triples of a current vector.
pub fn per_point_amplitudes(q: &DVector<f64>) -> Vec<f64> {
    q.as_slice()
        .chunks_exact(3)
        .map(|c| (c[0] * c[0] + c[1] * c[1] + c[2] * c[2]).sqrt())
        .collect()
}

/// Depth weights: `s_k = (‖l_x‖² + ‖l_y‖² + ‖l_z‖²)^(-p)` over the three
/// columns of each source point, rescaled to `max_k s_k = 1`.
pub fn depth_weights(lead: &LeadField, p: f64) -> Result<DepthWeights> {
    if !(p >= 0.0) || !p.is_finite() {
        return Err(Error::InvalidParameter(format!(
            "depth exponent must be finite and >= 0, got {p}"
        )));
    }
    let n = lead.n_points();
    let mut raw = Vec::with_capacity(n);
    for k in 0..n {
        let g = lead.column_triple_norm_sq(k);
        if g == 0.0 {
            return Err(Error::SilentSource { index: k });
        }
        raw.push(g.powf(-p));
    }
    let normalization = raw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !normalization.is_finite() || normalization <= 0.0 {
        return Err(Error::InvalidParameter(format!(
            "depth weights are not finite (max raw weight {normalization})"
        )));
    }
    let s = raw.iter().map(|v| v / normalization).collect();
    Ok(DepthWeights { s, p, normalization })
}

/// Whiten the system with the Cholesky factor of the observation's noise
/// covariance: returns `(W⁻¹ L, W⁻¹ b)`.
pub fn whitened_system(lead: &LeadField, obs: &Observation) -> Result<(DMatrix<f64>, DVector<f64>)> {
    let m = lead.n_sensors();
    if obs.n_sensors() != m {
        return Err(Error::DimensionMismatch(format!(
            "observation has {} sensors, lead field {}",
            obs.n_sensors(),
            m
        )));
    }
    let chol = Cholesky::new(obs.noise_cov.clone()).ok_or_else(|| Error::Singular {
        context: "noise covariance".into(),
        cond: spd_condition_estimate(&obs.noise_cov),
    })?;
    let w = chol.l();
    let ltil = w
        .solve_lower_triangular(&lead.matrix)
        .ok_or_else(|| Error::Singular {
            context: "whitening (lead field)".into(),
            cond: f64::NAN,
        })?;
    let btil = w
        .solve_lower_triangular(&obs.b_obs)
        .ok_or_else(|| Error::Singular {
            context: "whitening (observation)".into(),
            cond: f64::NAN,
        })?;
    Ok((ltil, btil))
}

/// Largest/smallest symmetric eigenvalue magnitude ratio; reported with
/// factorization failures.
fn spd_condition_estimate(g: &DMatrix<f64>) -> f64 {
    let eig = g.clone().symmetric_eigen();
    let max = eig.eigenvalues.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let min = eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
    if min <= 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

/// Gram matrix `L̃ S L̃ᵀ + λ I` for diagonal `S` expanded from per-point
/// weights (each `s_k` repeated for x, y, z).
fn weighted_gram(ltil: &DMatrix<f64>, weights: &DepthWeights, lambda: f64) -> DMatrix<f64> {
    let m = ltil.nrows();
    let mut scaled = ltil.clone();
    for (j, mut col) in scaled.column_iter_mut().enumerate() {
        col *= weights.s[j / 3];
    }
    let mut g = scaled * ltil.transpose();
    for i in 0..m {
        g[(i, i)] += lambda;
    }
    g
}

/// Closed-form depth-weighted minimum-norm estimate
/// `q̂ = S L̃ᵀ (L̃ S L̃ᵀ + λI)⁻¹ b̃`.
pub fn mne_solve(
    lead: &LeadField,
    obs: &Observation,
    weights: &DepthWeights,
    lambda: f64,
) -> Result<CurrentEstimate> {
    if !(lambda >= 0.0) {
        return Err(Error::InvalidParameter(format!(
            "lambda must be >= 0, got {lambda}"
        )));
    }
    if weights.len() != lead.n_points() {
        return Err(Error::DimensionMismatch(format!(
            "weights cover {} points, lead field has {}",
            weights.len(),
            lead.n_points()
        )));
    }
    let (ltil, btil) = whitened_system(lead, obs)?;
    let gram = weighted_gram(&ltil, weights, lambda);
    let chol = Cholesky::new(gram.clone()).ok_or_else(|| Error::Singular {
        context: format!("MNE gram matrix at lambda={lambda}"),
        cond: spd_condition_estimate(&gram),
    })?;
    let y = chol.solve(&btil);
    let mut q_hat = ltil.transpose() * y;
    for (j, v) in q_hat.iter_mut().enumerate() {
        *v *= weights.s[j / 3];
    }

    let per_point_amplitude = per_point_amplitudes(&q_hat);
    let mut diag = BTreeMap::new();
    diag.insert("lambda".into(), lambda);
    diag.insert("p".into(), weights.p);
    Ok(CurrentEstimate {
        q_hat,
        per_point_amplitude,
        method: "mne".into(),
        lambda,
        solver_diagnostics: diag,
    })
}

/// sLORETA: unweighted MNE followed by per-point standardization with the
/// 3×3 diagonal blocks of the posterior covariance
/// `R = L̃ᵀ (L̃ L̃ᵀ + λI)⁻¹ L̃`; the readout is
/// `sqrt(q̂_kᵀ R_kk⁻¹ q̂_k)`.
pub fn sloreta_solve(lead: &LeadField, obs: &Observation, lambda: f64) -> Result<CurrentEstimate> {
    if !(lambda >= 0.0) {
        return Err(Error::InvalidParameter(format!(
            "lambda must be >= 0, got {lambda}"
        )));
    }
    let (ltil, btil) = whitened_system(lead, obs)?;
    let n = lead.n_points();
    let weights = DepthWeights::uniform(n);
    let gram = weighted_gram(&ltil, &weights, lambda);
    let chol = Cholesky::new(gram.clone()).ok_or_else(|| Error::Singular {
        context: format!("sLORETA gram matrix at lambda={lambda}"),
        cond: spd_condition_estimate(&gram),
    })?;
    let q_hat = ltil.transpose() * chol.solve(&btil);
    // Posterior columns: X = (L̃L̃ᵀ + λI)⁻¹ L̃, so R_kk = L̃_kᵀ X_k.
    let x = chol.solve(&ltil);

    let mut per_point_amplitude = vec![0.0; n];
    let mut regularized_blocks = 0usize;
    for k in 0..n {
        let lk = ltil.columns(3 * k, 3);
        let xk = x.columns(3 * k, 3);
        let rkk_d = lk.transpose() * xk;
        let mut rkk = Matrix3::zeros();
        for i in 0..3 {
            for j in 0..3 {
                rkk[(i, j)] = rkk_d[(i, j)];
            }
        }
        // Symmetrize against factorization round-off.
        rkk = (rkk + rkk.transpose()) * 0.5;
        let qk = Vector3::new(q_hat[3 * k], q_hat[3 * k + 1], q_hat[3 * k + 2]);

        // The block is standardized through its eigendecomposition. On a
        // spherical conductor the radial direction of every source is
        // magnetically silent, so R_kk is numerically rank 2: a plain 3x3
        // inverse would divide rounding noise by a rounding-sized
        // eigenvalue. Near-null eigenvalues (relative to the largest) are
        // lifted by eps * trace before inverting.
        let eig = rkk.symmetric_eigen();
        let e_max = eig.eigenvalues.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if !(e_max > 0.0) {
            if qk.norm() == 0.0 {
                continue;
            }
            return Err(Error::SingularBlock { index: k });
        }
        let cutoff = SLORETA_BLOCK_RTOL * e_max;
        let needs_lift = eig.eigenvalues.iter().any(|&e| e < cutoff);
        let lift = if needs_lift {
            regularized_blocks += 1;
            SLORETA_BLOCK_RTOL * rkk.trace()
        } else {
            0.0
        };
        let mut power = 0.0;
        for i in 0..3 {
            let e = eig.eigenvalues[i] + lift;
            if !(e > 0.0) {
                return Err(Error::SingularBlock { index: k });
            }
            let proj = eig.eigenvectors.column(i).dot(&qk);
            power += proj * proj / e;
        }
        per_point_amplitude[k] = power.max(0.0).sqrt();
    }

    let mut diag = BTreeMap::new();
    diag.insert("lambda".into(), lambda);
    diag.insert("regularized_blocks".into(), regularized_blocks as f64);
    Ok(CurrentEstimate {
        q_hat,
        per_point_amplitude,
        method: "sloreta".into(),
        lambda,
        solver_diagnostics: diag,
    })
}

/// Coordinates of the source point with the largest per-point amplitude;
/// ties break toward the lower raster index.
pub fn localize(est: &CurrentEstimate, space: &SourceSpace) -> Result<[f64; 3]> {
    if est.per_point_amplitude.len() != space.n_points() {
        return Err(Error::DimensionMismatch(format!(
            "estimate covers {} points, space has {}",
            est.per_point_amplitude.len(),
            space.n_points()
        )));
    }
    if est.per_point_amplitude.is_empty() {
        return Err(Error::InvalidParameter("estimate is empty".into()));
    }
    let mut best = 0usize;
    let mut best_v = est.per_point_amplitude[0];
    for (k, &v) in est.per_point_amplitude.iter().enumerate().skip(1) {
        if v > best_v {
            best = k;
            best_v = v;
        }
    }
    if best_v == 0.0 {
        return Err(Error::NoActivity);
    }
    Ok(space.points[best])
}

impl CurrentEstimate {
    /// Export as `<stem>.json` + `<stem>.bin` (q_hat then amplitudes).
    pub fn export(&self, stem: &Path) -> Result<()> {
        let mut data = Vec::with_capacity(self.q_hat.len() + self.per_point_amplitude.len());
        data.extend(self.q_hat.iter());
        data.extend(self.per_point_amplitude.iter());
        let segments = vec![
            Segment { name: "q_hat".into(), offset: 0, len: self.q_hat.len() },
            Segment {
                name: "per_point_amplitude".into(),
                offset: self.q_hat.len(),
                len: self.per_point_amplitude.len(),
            },
        ];
        let bin = stem.with_extension("bin");
        io::write_f64_bin(&bin, &data)?;
        let header = EstimateHeader {
            method: self.method.clone(),
            lambda: self.lambda,
            n_points: self.per_point_amplitude.len(),
            solver_diagnostics: self.solver_diagnostics.clone(),
            dtype: "f64le".into(),
            data_file: bin
                .file_name()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default(),
            segments,
        };
        io::write_json(&stem.with_extension("json"), &header)
    }

    pub fn import(stem: &Path) -> Result<CurrentEstimate> {
        let header: EstimateHeader = io::read_json(&stem.with_extension("json"))?;
        let data = io::read_f64_bin(&stem.with_extension("bin"))?;
        let q = io::take_segment(&data, &header.segments, "q_hat")?;
        let a = io::take_segment(&data, &header.segments, "per_point_amplitude")?;
        if q.len() != 3 * header.n_points || a.len() != header.n_points {
            return Err(Error::Format("estimate segment sizes disagree".into()));
        }
        Ok(CurrentEstimate {
            q_hat: DVector::from_column_slice(q),
            per_point_amplitude: a.to_vec(),
            method: header.method,
            lambda: header.lambda,
            solver_diagnostics: header.solver_diagnostics,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct EstimateHeader {
    method: String,
    lambda: f64,
    n_points: usize,
    solver_diagnostics: BTreeMap<String, f64>,
    dtype: String,
    data_file: String,
    segments: Vec<Segment>,
}
