//! Result views: the per-method table, sweep plot data, and 2-D slices of
//! an estimated current distribution.

use serde::{Deserialize, Serialize};

use neuroloc_core::headmodel::SourceSpace;
use neuroloc_core::simulate::GroundTruthSource;
use neuroloc_core::solvers::CurrentEstimate;
use neuroloc_core::{Error, Result};

use crate::sweep::{median, BestRow, SweepResult};

/// Text table plus its CSV twin; both end with a config-hash footer.
pub struct TableOutput {
    pub text: String,
    pub csv: String,
}

/// One row per (method, p): the best lambda and its median error.
pub fn emit_table(result: &SweepResult) -> Result<TableOutput> {
    if result.cells.is_empty() {
        return Err(Error::InvalidParameter("empty sweep result".into()));
    }
    let mut rows: Vec<BestRow> = result.best_rows.clone();
    rows.sort_by(|a, b| {
        (a.method.as_str(), a.median_error_mm, a.p)
            .partial_cmp(&(b.method.as_str(), b.median_error_mm, b.p))
            .unwrap()
    });

    let mut text = String::new();
    text.push_str(&format!(
        "{:<12} {:>6} {:>12} {:>10} {:>8}\n",
        "method", "p", "best lambda", "error[mm]", "seeds"
    ));
    for r in &rows {
        text.push_str(&format!(
            "{:<12} {:>6} {:>12.6} {:>10.2} {:>8}\n",
            r.method, r.p, r.lambda, r.median_error_mm, r.n_seeds
        ));
    }
    text.push_str(&format!("# config {}\n", result.config_hash));

    let mut csv = String::from("method,p,best_lambda,median_error_mm,n_seeds\n");
    for r in &rows {
        csv.push_str(&format!(
            "{},{},{},{},{}\n",
            r.method, r.p, r.lambda, r.median_error_mm, r.n_seeds
        ));
    }
    csv.push_str(&format!("# config {}\n", result.config_hash));
    Ok(TableOutput { text, csv })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SeriesPoint {
    pub lambda: f64,
    pub error_median_mm: f64,
    pub error_min_mm: f64,
    pub error_max_mm: f64,
    pub n_seeds: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Series {
    pub method: String,
    pub p: f64,
    pub points: Vec<SeriesPoint>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PlotData {
    pub config_hash: String,
    pub series: Vec<Series>,
}

impl PlotData {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "method,p,lambda,error_median_mm,error_min_mm,error_max_mm,n_seeds\n",
        );
        for s in &self.series {
            for pt in &s.points {
                out.push_str(&format!(
                    "{},{},{},{},{},{},{}\n",
                    s.method,
                    s.p,
                    pt.lambda,
                    pt.error_median_mm,
                    pt.error_min_mm,
                    pt.error_max_mm,
                    pt.n_seeds
                ));
            }
        }
        out
    }
}

/// Per-(method, p) series of localization error against lambda (ascending),
/// with median/min/max over seeds.
pub fn emit_sweep_plotdata(result: &SweepResult) -> PlotData {
    let mut series: Vec<Series> = Vec::new();
    for c in result.cells.iter().filter(|c| c.is_ok()) {
        let Some(err) = c.localization_error_mm else { continue };
        let s = match series
            .iter_mut()
            .find(|s| s.method == c.method && s.p == c.p)
        {
            Some(s) => s,
            None => {
                series.push(Series { method: c.method.clone(), p: c.p, points: Vec::new() });
                series.last_mut().unwrap()
            }
        };
        match s.points.iter_mut().find(|pt| pt.lambda == c.lambda) {
            Some(pt) => {
                pt.error_min_mm = pt.error_min_mm.min(err);
                pt.error_max_mm = pt.error_max_mm.max(err);
                // Medians are recomputed below once all errors are known.
                pt.n_seeds += 1;
            }
            None => s.points.push(SeriesPoint {
                lambda: c.lambda,
                error_median_mm: f64::NAN,
                error_min_mm: err,
                error_max_mm: err,
                n_seeds: 1,
            }),
        }
    }
    // Second pass for the medians.
    for s in &mut series {
        for pt in &mut s.points {
            let errs: Vec<f64> = result
                .cells
                .iter()
                .filter(|c| {
                    c.is_ok() && c.method == s.method && c.p == s.p && c.lambda == pt.lambda
                })
                .filter_map(|c| c.localization_error_mm)
                .collect();
            pt.error_median_mm = median(&errs);
        }
        s.points.sort_by(|a, b| a.lambda.partial_cmp(&b.lambda).unwrap());
    }
    series.sort_by(|a, b| {
        (a.method.as_str(), a.p)
            .partial_cmp(&(b.method.as_str(), b.p))
            .unwrap()
    });
    PlotData { config_hash: result.config_hash.clone(), series }
}

/// One 2-D amplitude slice through the estimate's argmax point.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SlicePlane {
    /// "xz", "yz", or "xy".
    pub plane: String,
    /// Axis held fixed ("y", "x", or "z") and its lattice index.
    pub fixed_axis: String,
    pub fixed_index: usize,
    pub fixed_mm: f64,
    pub n_rows: usize,
    pub n_cols: usize,
    /// Row-major amplitudes.
    pub values: Vec<f64>,
    pub row_coords_mm: Vec<f64>,
    pub col_coords_mm: Vec<f64>,
    /// Truth-marker position within this slice's row/col coordinates.
    pub truth_row: usize,
    pub truth_col: usize,
}

impl SlicePlane {
    pub fn to_csv(&self) -> String {
        let mut out = format!(
            "# plane={} fixed_axis={} fixed_index={} fixed_mm={} truth_row={} truth_col={}\n",
            self.plane, self.fixed_axis, self.fixed_index, self.fixed_mm,
            self.truth_row, self.truth_col
        );
        out.push_str(&format!(
            "# row_coords_mm={:?} col_coords_mm={:?}\n",
            self.row_coords_mm, self.col_coords_mm
        ));
        for r in 0..self.n_rows {
            let row: Vec<String> = (0..self.n_cols)
                .map(|c| self.values[r * self.n_cols + c].to_string())
                .collect();
            out.push_str(&row.join(","));
            out.push('\n');
        }
        out
    }
}

pub struct SlicePlanes {
    pub xz: SlicePlane,
    pub yz: SlicePlane,
    pub xy: SlicePlane,
    /// Lattice index of the amplitude argmax the planes pass through.
    pub argmax_lattice: (usize, usize, usize),
}

/// Reconstruct the 3-D amplitude volume and slice it through the argmax
/// point's y, x, and z coordinates (xz, yz, and xy planes respectively).
pub fn emit_slices(
    est: &CurrentEstimate,
    space: &SourceSpace,
    truth: &GroundTruthSource,
) -> Result<SlicePlanes> {
    let n = space.n_points();
    if est.per_point_amplitude.len() != n {
        return Err(Error::DimensionMismatch(format!(
            "estimate covers {} points, space has {n}",
            est.per_point_amplitude.len()
        )));
    }
    if n == 0 {
        return Err(Error::InvalidParameter("empty estimate".into()));
    }
    let (nx, ny, nz) = space.grid_dims;
    let mut volume = vec![0.0; nx * ny * nz];
    let mut argmax_k = 0usize;
    for k in 0..n {
        let (ix, iy, iz) = space.lattice_index(k);
        volume[(ix * ny + iy) * nz + iz] = est.per_point_amplitude[k];
        if est.per_point_amplitude[k] > est.per_point_amplitude[argmax_k] {
            argmax_k = k;
        }
    }
    let (ax, ay, az) = space.lattice_index(argmax_k);
    let (tx, ty, tz) = space.lattice_index(truth.point_index);

    let coord = |axis: usize, i: usize| space.origin[axis] + i as f64 * space.grid_spacing;
    let coords = |axis: usize, len: usize| (0..len).map(|i| coord(axis, i)).collect::<Vec<_>>();

    let xz = SlicePlane {
        plane: "xz".into(),
        fixed_axis: "y".into(),
        fixed_index: ay,
        fixed_mm: coord(1, ay),
        n_rows: nx,
        n_cols: nz,
        values: (0..nx)
            .flat_map(|x| (0..nz).map(move |z| (x, z)))
            .map(|(x, z)| volume[(x * ny + ay) * nz + z])
            .collect(),
        row_coords_mm: coords(0, nx),
        col_coords_mm: coords(2, nz),
        truth_row: tx,
        truth_col: tz,
    };
    let yz = SlicePlane {
        plane: "yz".into(),
        fixed_axis: "x".into(),
        fixed_index: ax,
        fixed_mm: coord(0, ax),
        n_rows: ny,
        n_cols: nz,
        values: (0..ny)
            .flat_map(|y| (0..nz).map(move |z| (y, z)))
            .map(|(y, z)| volume[(ax * ny + y) * nz + z])
            .collect(),
        row_coords_mm: coords(1, ny),
        col_coords_mm: coords(2, nz),
        truth_row: ty,
        truth_col: tz,
    };
    let xy = SlicePlane {
        plane: "xy".into(),
        fixed_axis: "z".into(),
        fixed_index: az,
        fixed_mm: coord(2, az),
        n_rows: nx,
        n_cols: ny,
        values: (0..nx)
            .flat_map(|x| (0..ny).map(move |y| (x, y)))
            .map(|(x, y)| volume[(x * ny + y) * nz + az])
            .collect(),
        row_coords_mm: coords(0, nx),
        col_coords_mm: coords(1, ny),
        truth_row: tx,
        truth_col: ty,
    };

    Ok(SlicePlanes { xz, yz, xy, argmax_lattice: (ax, ay, az) })
}
