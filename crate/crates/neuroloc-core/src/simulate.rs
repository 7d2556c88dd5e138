//! Ground-truth dipoles, forward projection, and noisy observations.
//!
//! An [`Observation`] bundles the noisy sensor vector with the exact noise
//! covariance used to draw it, so downstream whitening is consistent by
//! construction. Noise strength is stated as peak signal-to-noise: the peak
//! of the clean sensor vector over the rms of the noise, in dB (the
//! peak-to-peak-noise alternative is available via [`PsnrDefinition`]).

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::error::{Error, Result};
use crate::headmodel::{sub3, LeadField, SourceSpace};
use crate::io::{self, Segment};

/// Variance floor (fT^2) used for the covariance of a noiseless observation.
pub const NOISELESS_COV_FLOOR: f64 = 1.0;

/// A single dipole pinned to a source-space point.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GroundTruthSource {
    /// Location (mm); always exactly one of the source-space points.
    pub location: [f64; 3],
    /// Raster index of that point in the source space.
    pub point_index: usize,
    /// Dipole moment (nAm).
    pub moment: [f64; 3],
    pub label: String,
}

/// How the scalar noise level is read off the clean signal.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PsnrDefinition {
    /// 20 log10( max|clean| / rms(noise) )  — the default.
    PeakToRms,
    /// 20 log10( max|clean| / max|noise| )
    PeakToPeak,
}

impl Default for PsnrDefinition {
    fn default() -> Self {
        PsnrDefinition::PeakToRms
    }
}

/// Requested noise covariance structure, normalized to unit mean diagonal
/// before scaling.
#[derive(Debug, Clone)]
pub enum CovShape {
    Identity,
    Diagonal(Vec<f64>),
    Full(DMatrix<f64>),
}

/// Noisy sensor snapshot plus everything needed to whiten it.
#[derive(Debug, Clone)]
pub struct Observation {
    pub b_obs: DVector<f64>,
    /// Exact covariance of the additive noise (sigma^2 * Sigma0).
    pub noise_cov: DMatrix<f64>,
    /// Clean forward projection, kept for diagnostics.
    pub clean: DVector<f64>,
    /// Realized peak SNR in dB (infinite for noiseless observations).
    pub psnr_db: f64,
    pub rng_seed: u64,
}

/// Snap a dipole onto the source-space point nearest `nearest_to`
/// (ties break toward the lower raster index).
pub fn make_dipole(
    space: &SourceSpace,
    nearest_to: [f64; 3],
    moment: [f64; 3],
    label: &str,
) -> Result<GroundTruthSource> {
    if space.n_points() == 0 {
        return Err(Error::InvalidParameter("source space is empty".into()));
    }
    let norm = (moment[0] * moment[0] + moment[1] * moment[1] + moment[2] * moment[2]).sqrt();
    if !(norm > 0.0) {
        return Err(Error::InvalidParameter(
            "dipole moment must be nonzero".into(),
        ));
    }
    let k = space.nearest_point(nearest_to).unwrap();
    Ok(GroundTruthSource {
        location: space.points[k],
        point_index: k,
        moment,
        label: label.to_string(),
    })
}

/// Forward-project a single dipole: assemble the dense current vector (zero
/// except the source's three entries) and apply the lead-field matrix.
pub fn forward(lead: &LeadField, source: &GroundTruthSource) -> Result<DVector<f64>> {
    let k = source.point_index;
    if k >= lead.n_points() || lead.source_space.points[k] != source.location {
        return Err(Error::InvalidParameter(format!(
            "source point {k} is not part of the lead field's source space"
        )));
    }
    let mut q = DVector::zeros(3 * lead.n_points());
    for c in 0..3 {
        q[3 * k + c] = source.moment[c];
    }
    Ok(&lead.matrix * q)
}

fn normalized_shape(shape: &CovShape, m: usize) -> Result<DMatrix<f64>> {
    let sigma0 = match shape {
        CovShape::Identity => DMatrix::identity(m, m),
        CovShape::Diagonal(d) => {
            if d.len() != m {
                return Err(Error::DimensionMismatch(format!(
                    "diagonal has {} entries, expected {m}",
                    d.len()
                )));
            }
            if d.iter().any(|&v| !(v > 0.0)) {
                return Err(Error::InvalidParameter(
                    "diagonal covariance entries must be positive".into(),
                ));
            }
            DMatrix::from_diagonal(&DVector::from_vec(d.clone()))
        }
        CovShape::Full(s) => {
            if s.nrows() != m || s.ncols() != m {
                return Err(Error::DimensionMismatch(format!(
                    "covariance is {}x{}, expected {m}x{m}",
                    s.nrows(),
                    s.ncols()
                )));
            }
            s.clone()
        }
    };
    let mean_diag = sigma0.diagonal().sum() / m as f64;
    if !(mean_diag > 0.0) {
        return Err(Error::InvalidParameter(
            "covariance diagonal must have positive mean".into(),
        ));
    }
    Ok(sigma0 / mean_diag)
}

/// Add Gaussian noise of the requested shape, scaled so the realized PSNR
/// hits `target_psnr_db`. Pass `f64::INFINITY` for a noiseless observation
/// (covariance falls back to a small identity floor).
pub fn add_noise(
    clean: &DVector<f64>,
    target_psnr_db: f64,
    shape: &CovShape,
    definition: PsnrDefinition,
    seed: u64,
) -> Result<Observation> {
    let m = clean.len();
    let peak = clean.amax();
    if !(peak > 0.0) {
        return Err(Error::InvalidParameter(
            "clean signal is all zero; PSNR is undefined".into(),
        ));
    }
    if target_psnr_db.is_nan() {
        return Err(Error::InvalidParameter("target PSNR is NaN".into()));
    }

    if target_psnr_db.is_infinite() && target_psnr_db > 0.0 {
        return Ok(Observation {
            b_obs: clean.clone(),
            noise_cov: DMatrix::identity(m, m) * NOISELESS_COV_FLOOR,
            clean: clean.clone(),
            psnr_db: f64::INFINITY,
            rng_seed: seed,
        });
    }

    let sigma0 = normalized_shape(shape, m)?;
    let chol = Cholesky::new(sigma0.clone()).ok_or_else(|| Error::Singular {
        context: "noise covariance shape".into(),
        cond: f64::NAN,
    })?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let g = DVector::from_iterator(m, (0..m).map(|_| StandardNormal.sample(&mut rng)));
    let raw = chol.l() * g;

    // Scale the draw so the realized PSNR equals the target.
    let level = match definition {
        PsnrDefinition::PeakToRms => (raw.dot(&raw) / m as f64).sqrt(),
        PsnrDefinition::PeakToPeak => raw.amax(),
    };
    if !(level > 0.0) {
        return Err(Error::InvalidParameter(
            "degenerate noise draw (zero level)".into(),
        ));
    }
    let target_level = peak / 10f64.powf(target_psnr_db / 20.0);
    let sigma = target_level / level;
    let noise = &raw * sigma;
    let b_obs = clean + &noise;

    let realized_level = match definition {
        PsnrDefinition::PeakToRms => (noise.dot(&noise) / m as f64).sqrt(),
        PsnrDefinition::PeakToPeak => noise.amax(),
    };
    let psnr_db = 20.0 * (peak / realized_level).log10();

    Ok(Observation {
        b_obs,
        noise_cov: sigma0 * (sigma * sigma),
        clean: clean.clone(),
        psnr_db,
        rng_seed: seed,
    })
}

impl Observation {
    pub fn n_sensors(&self) -> usize {
        self.b_obs.len()
    }

    /// Export as `<stem>.json` + `<stem>.bin` so sweeps can reuse one
    /// observation bit-exactly across solvers.
    pub fn export(&self, stem: &Path) -> Result<()> {
        let m = self.n_sensors();
        let mut data = Vec::with_capacity(2 * m + m * m);
        data.extend(self.b_obs.iter());
        data.extend(self.clean.iter());
        for i in 0..m {
            for j in 0..m {
                data.push(self.noise_cov[(i, j)]);
            }
        }
        let segments = vec![
            Segment { name: "b_obs".into(), offset: 0, len: m },
            Segment { name: "clean".into(), offset: m, len: m },
            Segment { name: "noise_cov".into(), offset: 2 * m, len: m * m },
        ];
        let bin = stem.with_extension("bin");
        io::write_f64_bin(&bin, &data)?;
        let header = ObservationHeader {
            n_sensors: m,
            psnr_db: if self.psnr_db.is_finite() {
                Some(self.psnr_db)
            } else {
                None
            },
            rng_seed: self.rng_seed,
            cov_layout: "row-major".into(),
            dtype: "f64le".into(),
            data_file: bin
                .file_name()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default(),
            segments,
        };
        io::write_json(&stem.with_extension("json"), &header)
    }

    pub fn import(stem: &Path) -> Result<Observation> {
        let header: ObservationHeader = io::read_json(&stem.with_extension("json"))?;
        let data = io::read_f64_bin(&stem.with_extension("bin"))?;
        let m = header.n_sensors;
        let b_obs = io::take_segment(&data, &header.segments, "b_obs")?;
        let clean = io::take_segment(&data, &header.segments, "clean")?;
        let cov = io::take_segment(&data, &header.segments, "noise_cov")?;
        if b_obs.len() != m || clean.len() != m || cov.len() != m * m {
            return Err(Error::Format("observation segment sizes disagree".into()));
        }
        Ok(Observation {
            b_obs: DVector::from_column_slice(b_obs),
            clean: DVector::from_column_slice(clean),
            noise_cov: DMatrix::from_row_slice(m, m, cov),
            psnr_db: header.psnr_db.unwrap_or(f64::INFINITY),
            rng_seed: header.rng_seed,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct ObservationHeader {
    n_sensors: usize,
    /// None encodes a noiseless (infinite-PSNR) observation.
    psnr_db: Option<f64>,
    rng_seed: u64,
    cov_layout: String,
    dtype: String,
    data_file: String,
    segments: Vec<Segment>,
}

/// Euclidean distance (mm) between an estimated location and the truth.
pub fn localization_error(estimated: [f64; 3], truth: &GroundTruthSource) -> f64 {
    let d = sub3(estimated, truth.location);
    (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::headmodel::{build_sensor_array, build_source_space, compute_lead_field};
    use approx::assert_relative_eq;

    fn model() -> LeadField {
        let space = build_source_space(90.0, 30.0, 10.0).unwrap();
        let sensors = build_sensor_array(40, 90.0, 110.0, 0.5).unwrap();
        compute_lead_field(&space, &sensors).unwrap()
    }

    #[test]
    fn dipole_snaps_to_exact_grid_point() {
        let lead = model();
        let d = make_dipole(&lead.source_space, [10.0, 0.0, 10.0], [0.0, 50.0, 0.0], "t").unwrap();
        assert_eq!(d.location, [10.0, 0.0, 10.0]);
    }

    #[test]
    fn dipole_midpoint_tie_breaks_to_lower_raster_index() {
        let lead = model();
        // Exactly between (0,0,0) and (10,0,0): the lower raster index wins.
        let d = make_dipole(&lead.source_space, [5.0, 0.0, 0.0], [0.0, 1.0, 0.0], "t").unwrap();
        let k0 = lead.source_space.nearest_point([0.0, 0.0, 0.0]).unwrap();
        assert_eq!(d.point_index, k0);
    }

    #[test]
    fn dipole_matches_exhaustive_scan() {
        let lead = model();
        let space = &lead.source_space;
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let mut draw = || -> f64 { StandardNormal.sample(&mut rng) };
            let t = [60.0 * draw(), 60.0 * draw(), 60.0 * draw()];
            let d = make_dipole(space, t, [1.0, 0.0, 0.0], "t").unwrap();
            // Brute force with explicit loop, < comparison keeps first min.
            let mut best = 0usize;
            let mut best_d = f64::INFINITY;
            for (k, p) in space.points.iter().enumerate() {
                let dd = (p[0] - t[0]).powi(2) + (p[1] - t[1]).powi(2) + (p[2] - t[2]).powi(2);
                if dd < best_d {
                    best_d = dd;
                    best = k;
                }
            }
            assert_eq!(d.point_index, best);
        }
    }

    #[test]
    fn zero_moment_rejected() {
        let lead = model();
        assert!(make_dipole(&lead.source_space, [0.0; 3], [0.0; 3], "z").is_err());
    }

    #[test]
    fn forward_is_linear_in_the_moment() {
        let lead = model();
        let space = &lead.source_space;
        for alpha in [0.0, 1.0, 2.0] {
            let base = make_dipole(space, [10.0, 10.0, 0.0], [3.0, -2.0, 1.0], "t").unwrap();
            let scaled = GroundTruthSource {
                moment: [alpha * 3.0, alpha * -2.0, alpha * 1.0],
                ..base.clone()
            };
            let b1 = forward(&lead, &base).unwrap();
            let b2 = forward(&lead, &scaled).unwrap();
            for i in 0..b1.len() {
                assert_eq!(b2[i], alpha * b1[i]);
            }
        }
    }

    #[test]
    fn radial_moment_projects_to_silence() {
        let lead = model();
        let space = &lead.source_space;
        let k = space.nearest_point([10.0, 10.0, 10.0]).unwrap();
        let p = space.points[k];
        let d = GroundTruthSource {
            location: p,
            point_index: k,
            moment: [p[0], p[1], p[2]],
            label: "radial".into(),
        };
        let b = forward(&lead, &d).unwrap();
        let scale = lead.matrix.amax() * crate::headmodel::norm3(p);
        assert!(b.amax() <= 1e-10 * scale);
    }

    #[test]
    fn forward_superposition_matches_dense_assembly() {
        let lead = model();
        let space = &lead.source_space;
        let d1 = make_dipole(space, [10.0, 0.0, 10.0], [5.0, 1.0, 0.0], "a").unwrap();
        let d2 = make_dipole(space, [-10.0, 10.0, 0.0], [0.0, -3.0, 2.0], "b").unwrap();
        let sum = forward(&lead, &d1).unwrap() + forward(&lead, &d2).unwrap();
        // Independent dense assembly of the combined current vector.
        let mut q = DVector::zeros(3 * space.n_points());
        for c in 0..3 {
            q[3 * d1.point_index + c] += d1.moment[c];
            q[3 * d2.point_index + c] += d2.moment[c];
        }
        let direct = &lead.matrix * q;
        for i in 0..direct.len() {
            assert_relative_eq!(sum[i], direct[i], max_relative = 1e-12, epsilon = 1e-12);
        }
    }

    #[test]
    fn noiseless_sentinel_returns_clean_with_floor_cov() {
        let clean = DVector::from_vec(vec![1.0, -2.0, 3.0, 4.0]);
        let obs = add_noise(&clean, f64::INFINITY, &CovShape::Identity,
                            PsnrDefinition::PeakToRms, 1).unwrap();
        assert_eq!(obs.b_obs, clean);
        assert!(obs.psnr_db.is_infinite());
        assert_eq!(obs.noise_cov[(0, 0)], NOISELESS_COV_FLOOR);
        assert_eq!(obs.noise_cov[(0, 1)], 0.0);
    }

    #[test]
    fn realized_psnr_hits_target() {
        let lead = model();
        let d = make_dipole(&lead.source_space, [10.0, 0.0, 20.0], [0.0, 50.0, 0.0], "t").unwrap();
        let clean = forward(&lead, &d).unwrap();
        let obs = add_noise(&clean, 21.6, &CovShape::Identity,
                            PsnrDefinition::PeakToRms, 7).unwrap();
        assert!(obs.psnr_db > 21.1 && obs.psnr_db < 22.1, "psnr {}", obs.psnr_db);
        // The recorded value is recomputed from b_obs - clean.
        let n = &obs.b_obs - &obs.clean;
        let rms = (n.dot(&n) / n.len() as f64).sqrt();
        let re = 20.0 * (obs.clean.amax() / rms).log10();
        assert_relative_eq!(re, obs.psnr_db, epsilon = 1e-9);
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let clean = DVector::from_vec((0..64).map(|i| (i as f64 * 0.7).sin()).collect::<Vec<_>>());
        let a = add_noise(&clean, 10.0, &CovShape::Identity, PsnrDefinition::PeakToRms, 42).unwrap();
        let b = add_noise(&clean, 10.0, &CovShape::Identity, PsnrDefinition::PeakToRms, 42).unwrap();
        for i in 0..clean.len() {
            assert_eq!(a.b_obs[i].to_bits(), b.b_obs[i].to_bits());
        }
        let c = add_noise(&clean, 10.0, &CovShape::Identity, PsnrDefinition::PeakToRms, 43).unwrap();
        assert!(a.b_obs != c.b_obs);
    }

    #[test]
    fn all_zero_clean_rejected() {
        let clean = DVector::zeros(16);
        assert!(add_noise(&clean, 20.0, &CovShape::Identity, PsnrDefinition::PeakToRms, 1).is_err());
    }

    #[test]
    fn covariance_is_spd_and_unit_mean_shape() {
        let clean = DVector::from_vec((0..32).map(|i| 1.0 + (i as f64).cos()).collect::<Vec<_>>());
        let d: Vec<f64> = (0..32).map(|i| 0.5 + (i % 5) as f64).collect();
        let obs = add_noise(&clean, 15.0, &CovShape::Diagonal(d.clone()),
                            PsnrDefinition::PeakToRms, 3).unwrap();
        // Symmetric within 1e-12 and positive eigenvalues via Cholesky.
        for i in 0..32 {
            for j in 0..32 {
                assert!((obs.noise_cov[(i, j)] - obs.noise_cov[(j, i)]).abs() < 1e-12);
            }
        }
        assert!(Cholesky::new(obs.noise_cov.clone()).is_some());
        // Shape normalization: cov proportional to diag(d) with unit mean.
        let mean_d = d.iter().sum::<f64>() / 32.0;
        let sigma2 = obs.noise_cov[(0, 0)] / (d[0] / mean_d);
        for i in 0..32 {
            assert_relative_eq!(
                obs.noise_cov[(i, i)],
                sigma2 * d[i] / mean_d,
                max_relative = 1e-10
            );
        }
    }

    #[test]
    fn full_covariance_shape_is_normalized_and_used() {
        let m = 16;
        let clean = DVector::from_vec((0..m).map(|i| 2.0 + (i as f64).sin()).collect::<Vec<_>>());
        // SPD shape with off-diagonal structure.
        let a = DMatrix::from_fn(m, m, |i, j| ((i * 7 + j * 3) % 5) as f64 * 0.1);
        let sigma = DMatrix::identity(m, m) + &a * a.transpose();
        let obs = add_noise(&clean, 14.0, &CovShape::Full(sigma.clone()),
                            PsnrDefinition::PeakToRms, 6).unwrap();
        // cov proportional to sigma, with the shape's mean diagonal
        // normalized out before scaling.
        let mean_diag = sigma.diagonal().sum() / m as f64;
        let ratio = obs.noise_cov[(0, 0)] / (sigma[(0, 0)] / mean_diag);
        for i in 0..m {
            for j in 0..m {
                assert_relative_eq!(
                    obs.noise_cov[(i, j)],
                    ratio * sigma[(i, j)] / mean_diag,
                    max_relative = 1e-9,
                    epsilon = 1e-12
                );
            }
        }
        assert!(obs.psnr_db > 13.9 && obs.psnr_db < 14.1);
    }

    #[test]
    fn peak_to_peak_definition_scales_by_max() {
        let clean = DVector::from_vec((0..48).map(|i| (i as f64 * 0.3).sin() * 5.0).collect::<Vec<_>>());
        let obs = add_noise(&clean, 12.0, &CovShape::Identity, PsnrDefinition::PeakToPeak, 9).unwrap();
        let n = &obs.b_obs - &obs.clean;
        let re = 20.0 * (obs.clean.amax() / n.amax()).log10();
        assert_relative_eq!(re, 12.0, epsilon = 1e-9);
    }

    #[test]
    fn localization_error_examples() {
        let truth = GroundTruthSource {
            location: [0.0, 0.0, 0.0],
            point_index: 0,
            moment: [1.0, 0.0, 0.0],
            label: "t".into(),
        };
        assert_eq!(localization_error([0.0, 0.0, 0.0], &truth), 0.0);
        assert_eq!(localization_error([3.0, 4.0, 0.0], &truth), 5.0);
    }

    #[test]
    fn observation_roundtrip_is_bit_exact() {
        let clean = DVector::from_vec((0..24).map(|i| (i as f64 * 1.3).sin()).collect::<Vec<_>>());
        let obs = add_noise(&clean, 18.0, &CovShape::Identity, PsnrDefinition::PeakToRms, 5).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let stem = dir.path().join("obs");
        obs.export(&stem).unwrap();
        let back = Observation::import(&stem).unwrap();
        for i in 0..clean.len() {
            assert_eq!(obs.b_obs[i].to_bits(), back.b_obs[i].to_bits());
            assert_eq!(obs.clean[i].to_bits(), back.clean[i].to_bits());
        }
        for (a, b) in obs.noise_cov.iter().zip(back.noise_cov.iter()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        assert_eq!(obs.rng_seed, back.rng_seed);
    }
}
