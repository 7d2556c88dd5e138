//! Spherical head geometry, gridded source space, sensor array, and the
//! analytic lead field.
//!
//! Geometry conventions used throughout the crate:
//!
//! * The conductor is a homogeneous sphere centered at the origin. All
//!   positions are in millimetres.
//! * Candidate source locations live on a regular lattice clipped to a ball
//!   of `region_radius` around the origin. Points are stored in raster order
//!   with **x fastest, then y, then z**: the flat index of lattice cell
//!   `(ix, iy, iz)` is `ix + nx * (iy + ny * iz)`. Current vectors and
//!   generator volumes rely on this ordering.
//! * The lead-field matrix is `M x 3N`; columns `3k, 3k+1, 3k+2` are the
//!   sensor responses to a unit dipole along x, y, z at point `k`. Entries
//!   are in femtotesla per nanoampere-metre (fT/nAm).
//!
//! The field of a current dipole inside the sphere is evaluated with the
//! closed-form solution for a homogeneous spherical conductor, which includes
//! the secondary (volume-current) contribution through the gradient term.
//! Two consequences of that geometry are used as test anchors: a dipole at
//! the sphere center produces no field at all, and the radial component of
//! any dipole moment is magnetically silent.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::error::{Error, Result};
use crate::io;

/// fT/nAm for positions in metres: mu0/4pi (1e-7 T·m/A) * 1e-9 (nAm) * 1e15 (fT).
const FIELD_SCALE: f64 = 0.1;

/// Sensors closer than this to a source point trip the singularity guard (mm).
const SINGULARITY_EPS_MM: f64 = 1e-6;

// ---------------------------------------------------------------------------
// small vector helpers
// ---------------------------------------------------------------------------

pub fn dot3(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub fn cross3(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

pub fn norm3(a: [f64; 3]) -> f64 {
    dot3(a, a).sqrt()
}

pub fn sub3(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

// ---------------------------------------------------------------------------
// SourceSpace
// ---------------------------------------------------------------------------

/// Regular lattice of candidate source locations inside the conductor.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SourceSpace {
    /// Lattice pitch in mm.
    pub grid_spacing: f64,
    /// Coordinates (mm) of lattice cell (0, 0, 0).
    pub origin: [f64; 3],
    /// Occupancy over the full rectangular lattice, raster order (x fastest).
    pub mask: Vec<bool>,
    /// Masked-in lattice points (mm), ordered by raster index.
    pub points: Vec<[f64; 3]>,
    /// Lattice extents (nx, ny, nz).
    pub grid_dims: (usize, usize, usize),
}

impl SourceSpace {
    pub fn n_points(&self) -> usize {
        self.points.len()
    }

    /// Flat raster index of lattice cell (ix, iy, iz), x fastest.
    pub fn flat_index(&self, ix: usize, iy: usize, iz: usize) -> usize {
        let (nx, ny, _) = self.grid_dims;
        ix + nx * (iy + ny * iz)
    }

    /// Lattice cell of stored point `k` (recovered from its coordinates).
    pub fn lattice_index(&self, k: usize) -> (usize, usize, usize) {
        let p = self.points[k];
        let i = |c: usize| ((p[c] - self.origin[c]) / self.grid_spacing).round() as usize;
        (i(0), i(1), i(2))
    }

    /// Index of the stored point nearest to `target`, ties broken by the
    /// lowest raster index (i.e. the first minimum in storage order).
    pub fn nearest_point(&self, target: [f64; 3]) -> Option<usize> {
        let mut best: Option<(usize, f64)> = None;
        for (k, p) in self.points.iter().enumerate() {
            let d = dot3(sub3(*p, target), sub3(*p, target));
            match best {
                Some((_, bd)) if d >= bd => {}
                _ => best = Some((k, d)),
            }
        }
        best.map(|(k, _)| k)
    }

    /// New space keeping only the points where `keep[k]` is true.
    pub fn retain(&self, keep: &[bool]) -> SourceSpace {
        assert_eq!(keep.len(), self.points.len(), "retain: keep length");
        let mut mask = self.mask.clone();
        let mut points = Vec::new();
        for (k, p) in self.points.iter().enumerate() {
            if keep[k] {
                points.push(*p);
            } else {
                let (ix, iy, iz) = self.lattice_index(k);
                let f = self.flat_index(ix, iy, iz);
                mask[f] = false;
            }
        }
        SourceSpace {
            grid_spacing: self.grid_spacing,
            origin: self.origin,
            mask,
            points,
            grid_dims: self.grid_dims,
        }
    }
}

/// Build the lattice of all points with `|p| <= region_radius`, pitch
/// `grid_spacing`, centered on the sphere center.
pub fn build_source_space(
    sphere_radius: f64,
    region_radius: f64,
    grid_spacing: f64,
) -> Result<SourceSpace> {
    if !(grid_spacing > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "grid_spacing must be > 0, got {grid_spacing}"
        )));
    }
    if !(region_radius > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "region_radius must be > 0, got {region_radius}"
        )));
    }
    if !(region_radius < sphere_radius) {
        return Err(Error::InvalidParameter(format!(
            "region_radius ({region_radius}) must be < sphere_radius ({sphere_radius}); \
             sources must be interior"
        )));
    }

    let k_max = (region_radius / grid_spacing).floor() as i64;
    let n = (2 * k_max + 1) as usize;
    let origin = [-(k_max as f64) * grid_spacing; 3];
    let r2 = region_radius * region_radius;

    let mut mask = vec![false; n * n * n];
    let mut points = Vec::new();
    for iz in 0..n {
        for iy in 0..n {
            for ix in 0..n {
                let p = [
                    origin[0] + ix as f64 * grid_spacing,
                    origin[1] + iy as f64 * grid_spacing,
                    origin[2] + iz as f64 * grid_spacing,
                ];
                if dot3(p, p) <= r2 {
                    mask[ix + n * (iy + n * iz)] = true;
                    points.push(p);
                }
            }
        }
    }

    Ok(SourceSpace {
        grid_spacing,
        origin,
        mask,
        points,
        grid_dims: (n, n, n),
    })
}

// ---------------------------------------------------------------------------
// SensorArray
// ---------------------------------------------------------------------------

/// Point magnetometers on a spherical shell outside the conductor.
///
/// Orientations cycle radial / tangential-theta / tangential-phi with sensor
/// index, mimicking triplet MEG layouts with a single measured component per
/// sensor.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SensorArray {
    pub positions: Vec<[f64; 3]>,
    pub orientations: Vec<[f64; 3]>,
    pub sphere_center: [f64; 3],
    pub sphere_radius: f64,
}

impl SensorArray {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }
}

/// Distribute `n_sensors` quasi-uniformly (Fibonacci lattice) over the
/// spherical cap holding `coverage_fraction` of the full solid angle,
/// measured down from the +z pole. `coverage_fraction = 0.5` is the upper
/// hemisphere, `1.0` the full sphere. A single sensor sits at the pole.
pub fn build_sensor_array(
    n_sensors: usize,
    sphere_radius: f64,
    shell_radius: f64,
    coverage_fraction: f64,
) -> Result<SensorArray> {
    if n_sensors == 0 {
        return Err(Error::InvalidParameter("n_sensors must be >= 1".into()));
    }
    if !(shell_radius > sphere_radius) {
        return Err(Error::InvalidParameter(format!(
            "shell_radius ({shell_radius}) must be > sphere_radius ({sphere_radius})"
        )));
    }
    if !(coverage_fraction > 0.0 && coverage_fraction <= 1.0) {
        return Err(Error::InvalidParameter(format!(
            "coverage_fraction must be in (0, 1], got {coverage_fraction}"
        )));
    }

    let golden = std::f64::consts::PI * (3.0 - 5.0_f64.sqrt());
    let m = n_sensors;
    let mut positions = Vec::with_capacity(m);
    let mut orientations = Vec::with_capacity(m);
    for i in 0..m {
        // Cosine of the polar angle, marched from the pole down the cap.
        let z = if m == 1 {
            1.0
        } else {
            1.0 - 2.0 * coverage_fraction * (i as f64 + 0.5) / m as f64
        };
        let sin_theta = (1.0 - z * z).max(0.0).sqrt();
        let phi = golden * i as f64;
        let (sin_phi, cos_phi) = phi.sin_cos();
        let unit = [sin_theta * cos_phi, sin_theta * sin_phi, z];
        positions.push([
            shell_radius * unit[0],
            shell_radius * unit[1],
            shell_radius * unit[2],
        ]);

        // theta/phi tangent frame; well defined at the pole where
        // sin_theta = 0 collapses e_theta to (cos_phi, sin_phi, 0).
        let e_theta = [z * cos_phi, z * sin_phi, -sin_theta];
        let e_phi = [-sin_phi, cos_phi, 0.0];
        let raw = match i % 3 {
            0 => unit,
            1 => e_theta,
            _ => e_phi,
        };
        let n = norm3(raw);
        orientations.push([raw[0] / n, raw[1] / n, raw[2] / n]);
    }

    Ok(SensorArray {
        positions,
        orientations,
        sphere_center: [0.0; 3],
        sphere_radius,
    })
}

// ---------------------------------------------------------------------------
// Lead field
// ---------------------------------------------------------------------------

/// Dense `M x 3N` forward operator mapping dipole currents (nAm) to sensor
/// readings (fT).
#[derive(Debug, Clone)]
pub struct LeadField {
    pub matrix: DMatrix<f64>,
    pub source_space: SourceSpace,
    pub sensor_array: SensorArray,
}

/// Projected field at one sensor for unit dipoles along x, y, z at `r0_mm`.
///
/// Closed-form field of a current dipole in a homogeneous conducting sphere
/// centered at the origin, evaluated at `r_mm` outside the conductor and
/// projected on `orientation`. Returns fT per nAm.
fn dipole_triplet_ft_per_nam(r_mm: [f64; 3], orientation: [f64; 3], r0_mm: [f64; 3]) -> [f64; 3] {
    let r = [r_mm[0] * 1e-3, r_mm[1] * 1e-3, r_mm[2] * 1e-3];
    let r0 = [r0_mm[0] * 1e-3, r0_mm[1] * 1e-3, r0_mm[2] * 1e-3];

    let a_vec = sub3(r, r0);
    let a = norm3(a_vec);
    let rn = norm3(r);
    let adotr = dot3(a_vec, r);

    let f = a * (rn * a + rn * rn - dot3(r0, r));
    let c1 = a * a / rn + adotr / a + 2.0 * a + 2.0 * rn;
    let c2 = a + 2.0 * rn + adotr / a;
    let grad_f = [
        c1 * r[0] - c2 * r0[0],
        c1 * r[1] - c2 * r0[1],
        c1 * r[2] - c2 * r0[2],
    ];

    let mut out = [0.0; 3];
    for (c, slot) in out.iter_mut().enumerate() {
        let mut e = [0.0; 3];
        e[c] = 1.0;
        let m = cross3(e, r0);
        let mdotr = dot3(m, r);
        let b = [
            FIELD_SCALE / (f * f) * (f * m[0] - mdotr * grad_f[0]),
            FIELD_SCALE / (f * f) * (f * m[1] - mdotr * grad_f[1]),
            FIELD_SCALE / (f * f) * (f * m[2] - mdotr * grad_f[2]),
        ];
        *slot = dot3(b, orientation);
    }
    out
}

/// Assemble the lead-field matrix for every (sensor, source point) pair.
pub fn compute_lead_field(space: &SourceSpace, sensors: &SensorArray) -> Result<LeadField> {
    let radius = sensors.sphere_radius;
    for (k, p) in space.points.iter().enumerate() {
        if norm3(*p) >= radius {
            return Err(Error::InvalidParameter(format!(
                "source point {k} is not strictly inside the conductor sphere"
            )));
        }
    }
    for (i, s) in sensors.positions.iter().enumerate() {
        if norm3(*s) <= radius {
            return Err(Error::InvalidParameter(format!(
                "sensor {i} is not strictly outside the conductor sphere"
            )));
        }
    }
    for (k, p) in space.points.iter().enumerate() {
        for (i, s) in sensors.positions.iter().enumerate() {
            let d = norm3(sub3(*s, *p));
            if d < SINGULARITY_EPS_MM {
                return Err(Error::SensorTooClose {
                    sensor: i,
                    point: k,
                    dist_mm: d,
                });
            }
        }
    }

    let m = sensors.len();
    let n = space.n_points();
    let mut matrix = DMatrix::zeros(m, 3 * n);
    for (k, p) in space.points.iter().enumerate() {
        for i in 0..m {
            let triple =
                dipole_triplet_ft_per_nam(sensors.positions[i], sensors.orientations[i], *p);
            for c in 0..3 {
                matrix[(i, 3 * k + c)] = triple[c];
            }
        }
    }

    Ok(LeadField {
        matrix,
        source_space: space.clone(),
        sensor_array: sensors.clone(),
    })
}

impl LeadField {
    /// Wrap an existing matrix; dimensions must match the space and sensors.
    pub fn from_parts(
        matrix: DMatrix<f64>,
        source_space: SourceSpace,
        sensor_array: SensorArray,
    ) -> Result<LeadField> {
        if matrix.nrows() != sensor_array.len() || matrix.ncols() != 3 * source_space.n_points() {
            return Err(Error::DimensionMismatch(format!(
                "lead field is {}x{}, expected {}x{}",
                matrix.nrows(),
                matrix.ncols(),
                sensor_array.len(),
                3 * source_space.n_points()
            )));
        }
        Ok(LeadField {
            matrix,
            source_space,
            sensor_array,
        })
    }

    pub fn n_sensors(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn n_points(&self) -> usize {
        self.matrix.ncols() / 3
    }

    /// Sum of squared entries of the three columns of source point `k`.
    pub fn column_triple_norm_sq(&self, k: usize) -> f64 {
        let mut acc = 0.0;
        for c in 0..3 {
            let col = self.matrix.column(3 * k + c);
            acc += col.dot(&col);
        }
        acc
    }

    /// Export as `<stem>.json` + `<stem>.bin` (row-major f64le matrix).
    pub fn export(&self, stem: &Path) -> Result<()> {
        let rows = self.matrix.nrows();
        let cols = self.matrix.ncols();
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(self.matrix[(i, j)]);
            }
        }
        let bin = stem.with_extension("bin");
        io::write_f64_bin(&bin, &data)?;
        let header = LeadFieldHeader {
            rows,
            cols,
            ordering: "row-major".into(),
            dtype: "f64le".into(),
            units: "fT_per_nAm".into(),
            column_convention: "columns 3k,3k+1,3k+2 are x,y,z of source k".into(),
            data_file: bin
                .file_name()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default(),
            source_space: self.source_space.clone(),
            sensor_array: self.sensor_array.clone(),
        };
        io::write_json(&stem.with_extension("json"), &header)
    }

    pub fn import(stem: &Path) -> Result<LeadField> {
        let header: LeadFieldHeader = io::read_json(&stem.with_extension("json"))?;
        let data = io::read_f64_bin(&stem.with_extension("bin"))?;
        if data.len() != header.rows * header.cols {
            return Err(Error::Format(format!(
                "payload has {} values, header says {}x{}",
                data.len(),
                header.rows,
                header.cols
            )));
        }
        let matrix = DMatrix::from_row_slice(header.rows, header.cols, &data);
        LeadField::from_parts(matrix, header.source_space, header.sensor_array)
    }
}

#[derive(Serialize, Deserialize)]
struct LeadFieldHeader {
    rows: usize,
    cols: usize,
    ordering: String,
    dtype: String,
    units: String,
    column_convention: String,
    data_file: String,
    source_space: SourceSpace,
    sensor_array: SensorArray,
}

/// Drop source points whose lead-field column triple is numerically zero
/// (the sphere center is magnetically silent and would make the depth
/// weights of Eq.-style `s_k` blow up). Returns the pruned space and lead
/// field plus the removed point indices.
pub fn prune_silent_sources(lead: &LeadField) -> (SourceSpace, LeadField, Vec<usize>) {
    let n = lead.n_points();
    let norms: Vec<f64> = (0..n).map(|k| lead.column_triple_norm_sq(k)).collect();
    let max = norms.iter().cloned().fold(0.0, f64::max);
    let tol = max * 1e-24;
    let keep: Vec<bool> = norms.iter().map(|&v| v > tol).collect();
    let removed: Vec<usize> = (0..n).filter(|&k| !keep[k]).collect();
    if removed.is_empty() {
        return (lead.source_space.clone(), lead.clone(), removed);
    }

    let space = lead.source_space.retain(&keep);
    let m = lead.n_sensors();
    let mut matrix = DMatrix::zeros(m, 3 * space.n_points());
    let mut col = 0;
    for k in 0..n {
        if keep[k] {
            for c in 0..3 {
                matrix.set_column(col, &lead.matrix.column(3 * k + c));
                col += 1;
            }
        }
    }
    let pruned = LeadField {
        matrix,
        source_space: space.clone(),
        sensor_array: lead.sensor_array.clone(),
    };
    (space, pruned, removed)
}
