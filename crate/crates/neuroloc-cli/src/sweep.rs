//! Sweep execution: build the model and observation once, run every
//! (method, lambda, p, seed) cell, cache cells on disk, and aggregate.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use neuroloc_core::deep_prior::{build_generator, fit, DeepPriorConfig};
use neuroloc_core::headmodel::{
    build_sensor_array, build_source_space, compute_lead_field, prune_silent_sources, LeadField,
    SourceSpace,
};
use neuroloc_core::simulate::{
    add_noise, forward, localization_error, make_dipole, CovShape, GroundTruthSource, Observation,
};
use neuroloc_core::solvers::{
    depth_weights, localize, mne_solve, sloreta_solve, CurrentEstimate, DepthWeights,
};
use neuroloc_core::{Error, Result};

use crate::config::{ExperimentConfig, Method, NoiseShapeConfig};

/// One sweep cell: a solver run at fixed (lambda, p, seed).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CellResult {
    pub method: String,
    pub lambda: f64,
    pub p: f64,
    pub seed: u64,
    /// "ok" or "error: ...". Errors do not abort the sweep.
    pub status: String,
    pub localization_error_mm: Option<f64>,
    pub argmax_mm: Option<[f64; 3]>,
    pub runtime_s: f64,
    /// Relative path of the deep-prior trace CSV, when present.
    pub trace_file: Option<String>,
    /// Relative stem of the exported estimate (.json/.bin).
    pub estimate_file: Option<String>,
}

impl CellResult {
    pub fn is_ok(&self) -> bool {
        self.status == "ok"
    }
}

/// Per-(method, p) winner: the lambda with the smallest median error.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BestRow {
    pub method: String,
    pub p: f64,
    pub lambda: f64,
    pub median_error_mm: f64,
    pub n_seeds: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepResult {
    pub config_hash: String,
    pub config: ExperimentConfig,
    pub truth: GroundTruthSource,
    /// Realized peak SNR of the shared observation (None = noiseless).
    pub realized_psnr_db: Option<f64>,
    pub n_source_points: usize,
    pub cells: Vec<CellResult>,
    pub best_rows: Vec<BestRow>,
}

impl SweepResult {
    pub fn all_ok(&self) -> bool {
        self.cells.iter().all(|c| c.is_ok())
    }

    pub fn load(path: &Path) -> Result<SweepResult> {
        let text = std::fs::read_to_string(path)?;
        let mut result: SweepResult = serde_json::from_str(&text)?;
        // The best rows are derived data; recompute on load so a stale or
        // edited file cannot disagree with its own grid.
        result.best_rows = best_rows(&result.cells);
        Ok(result)
    }
}

/// Median of an unordered slice (mean of the middle pair for even sizes).
pub fn median(values: &[f64]) -> f64 {
    assert!(!values.is_empty());
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Shared per-sweep context: model and observation are built once and every
/// cell consumes the same objects bit-exactly.
pub struct SweepContext {
    pub space: SourceSpace,
    pub lead: LeadField,
    pub truth: GroundTruthSource,
    pub observation: Observation,
}

/// Build the head model (with silent points pruned), the snapped dipole,
/// and the shared noisy observation.
pub fn build_context(config: &ExperimentConfig) -> Result<SweepContext> {
    let hm = &config.headmodel;
    let space = build_source_space(hm.sphere_radius_mm, hm.region_radius_mm, hm.grid_spacing_mm)?;
    let sensors = build_sensor_array(
        hm.n_sensors,
        hm.sphere_radius_mm,
        hm.sensor_shell_radius_mm,
        hm.coverage_fraction,
    )?;
    let lead = compute_lead_field(&space, &sensors)?;
    let (space, lead, _) = prune_silent_sources(&lead);

    let truth = make_dipole(
        &space,
        config.source.nearest_to_mm,
        config.source.moment_nam,
        &config.source.label,
    )?;
    let clean = forward(&lead, &truth)?;
    let shape = match config.noise.shape {
        NoiseShapeConfig::Identity => CovShape::Identity,
        NoiseShapeConfig::Diagonal => CovShape::Diagonal(
            config
                .noise
                .diagonal_variances
                .clone()
                .ok_or_else(|| Error::InvalidParameter("diagonal shape needs variances".into()))?,
        ),
    };
    let target = config.noise.target_psnr_db.unwrap_or(f64::INFINITY);
    let observation = add_noise(
        &clean,
        target,
        &shape,
        config.noise.psnr_definition,
        config.noise.seed,
    )?;
    Ok(SweepContext { space, lead, truth, observation })
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct CellKey {
    method: Method,
    lambda: f64,
    p: f64,
    seed: u64,
    solver_index: usize,
}

impl CellKey {
    fn id(&self) -> String {
        format!("{}_p{}_l{}_s{}", self.method.name(), self.p, self.lambda, self.seed)
    }
}

fn enumerate_cells(config: &ExperimentConfig) -> Vec<CellKey> {
    let mut keys = Vec::new();
    for (solver_index, solver) in config.solvers.iter().enumerate() {
        let seeds: &[u64] = match solver.method {
            Method::DeepPrior => &config.seeds,
            _ => &[0],
        };
        let p_grid: &[f64] = match solver.method {
            // Standard sLORETA does not compose with depth weighting.
            Method::Sloreta => &[0.0],
            _ => &solver.p_grid,
        };
        for &p in p_grid {
            for &lambda in &solver.lambda_grid {
                for &seed in seeds {
                    keys.push(CellKey { method: solver.method, lambda, p, seed, solver_index });
                }
            }
        }
    }
    keys
}

fn run_cell(
    key: &CellKey,
    config: &ExperimentConfig,
    ctx: &SweepContext,
    weights_for_p: &[(f64, DepthWeights)],
    paths: &OutputPaths,
) -> CellResult {
    let start = Instant::now();
    let solver = &config.solvers[key.solver_index];
    let cell_id = key.id();

    let estimate = (|| -> Result<(CurrentEstimate, Option<String>)> {
        let weights = weights_for_p
            .iter()
            .find(|(p, _)| *p == key.p)
            .map(|(_, w)| w)
            .ok_or_else(|| Error::InvalidParameter(format!("no weights for p={}", key.p)))?;
        match key.method {
            Method::Mne => Ok((mne_solve(&ctx.lead, &ctx.observation, weights, key.lambda)?, None)),
            Method::Sloreta => Ok((sloreta_solve(&ctx.lead, &ctx.observation, key.lambda)?, None)),
            Method::DeepPrior => {
                let net = build_generator(&ctx.space, solver.latent_dim, key.seed, solver.init_scale)?;
                let mut dp = DeepPriorConfig::new(key.lambda, key.p);
                dp.iterations = solver.iterations;
                dp.learning_rate = solver.learning_rate;
                dp.snapshot_every = solver.snapshot_every;
                dp.init_scale = solver.init_scale;
                dp.seed = key.seed;
                let (est, trace) = fit(&net, &ctx.lead, &ctx.observation, weights, &dp)?;
                let trace_rel = format!("traces/{}/{}.csv", paths.hash, cell_id);
                trace.write_csv(&paths.root.join(&trace_rel))?;
                Ok((est, Some(trace_rel)))
            }
        }
    })();

    match estimate {
        Ok((est, trace_file)) => {
            let estimate_rel = format!("estimates/{}/{}", paths.hash, cell_id);
            let mut cell = CellResult {
                method: key.method.name().to_string(),
                lambda: key.lambda,
                p: key.p,
                seed: key.seed,
                status: "ok".into(),
                localization_error_mm: None,
                argmax_mm: None,
                runtime_s: start.elapsed().as_secs_f64(),
                trace_file,
                estimate_file: Some(estimate_rel.clone()),
            };
            if let Err(e) = est.export(&paths.root.join(&estimate_rel)) {
                cell.status = format!("error: {e}");
                cell.estimate_file = None;
                return cell;
            }
            match localize(&est, &ctx.space) {
                Ok(argmax) => {
                    cell.argmax_mm = Some(argmax);
                    cell.localization_error_mm =
                        Some(localization_error(argmax, &ctx.truth));
                }
                Err(e) => {
                    cell.status = format!("error: {e}");
                }
            }
            cell.runtime_s = start.elapsed().as_secs_f64();
            cell
        }
        Err(e) => CellResult {
            method: key.method.name().to_string(),
            lambda: key.lambda,
            p: key.p,
            seed: key.seed,
            status: format!("error: {e}"),
            localization_error_mm: None,
            argmax_mm: None,
            runtime_s: start.elapsed().as_secs_f64(),
            trace_file: None,
            estimate_file: None,
        },
    }
}

struct OutputPaths {
    root: PathBuf,
    hash: String,
}

impl OutputPaths {
    fn cell_file(&self, id: &str) -> PathBuf {
        self.root.join("cells").join(&self.hash).join(format!("{id}.json"))
    }
}

fn write_atomic(path: &Path, contents: &str) -> Result<()> {
    let tmp = path.with_extension("json.tmp");
    std::fs::write(&tmp, contents)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

/// Group ok-cells by (method, p, lambda), take the median error over seeds,
/// and keep the best lambda per (method, p).
pub fn best_rows(cells: &[CellResult]) -> Vec<BestRow> {
    let mut groups: Vec<(String, f64, f64, Vec<f64>)> = Vec::new();
    for c in cells.iter().filter(|c| c.is_ok()) {
        let Some(err) = c.localization_error_mm else { continue };
        match groups
            .iter_mut()
            .find(|(m, p, l, _)| *m == c.method && *p == c.p && *l == c.lambda)
        {
            Some((_, _, _, errs)) => errs.push(err),
            None => groups.push((c.method.clone(), c.p, c.lambda, vec![err])),
        }
    }
    let mut best: Vec<BestRow> = Vec::new();
    for (method, p, lambda, errs) in groups {
        let med = median(&errs);
        match best.iter_mut().find(|b| b.method == method && b.p == p) {
            Some(row) => {
                if med < row.median_error_mm {
                    row.lambda = lambda;
                    row.median_error_mm = med;
                    row.n_seeds = errs.len();
                }
            }
            None => best.push(BestRow {
                method,
                p,
                lambda,
                median_error_mm: med,
                n_seeds: errs.len(),
            }),
        }
    }
    best.sort_by(|a, b| {
        (a.method.as_str(), a.p)
            .partial_cmp(&(b.method.as_str(), b.p))
            .unwrap()
    });
    best
}

/// Quote a CSV field when it holds delimiters (error messages may carry
/// commas or quotes).
fn csv_field(s: &str) -> String {
    if s.contains(',') || s.contains('"') || s.contains('\n') {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Deterministic CSV of all cells (runtime deliberately excluded so two
/// identical runs produce identical bytes).
pub fn results_csv(cells: &[CellResult]) -> String {
    let mut out =
        String::from("method,p,lambda,seed,status,error_mm,argmax_x_mm,argmax_y_mm,argmax_z_mm\n");
    for c in cells {
        let err = c
            .localization_error_mm
            .map(|v| v.to_string())
            .unwrap_or_default();
        let (ax, ay, az) = match c.argmax_mm {
            Some(a) => (a[0].to_string(), a[1].to_string(), a[2].to_string()),
            None => (String::new(), String::new(), String::new()),
        };
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            c.method,
            c.p,
            c.lambda,
            c.seed,
            csv_field(&c.status),
            err,
            ax,
            ay,
            az
        ));
    }
    out
}

/// Run (or resume) every cell of the configured sweep. Cells already cached
/// under this config's hash are reused; fresh cells are written atomically,
/// so an interrupted sweep recomputes only what is missing. Worker count
/// comes from `NEUROLOC_WORKERS` (default: available parallelism).
pub fn run_experiment(config: &ExperimentConfig) -> Result<SweepResult> {
    config.validate()?;
    let hash = config.content_hash();
    let paths = OutputPaths { root: config.output_dir.clone(), hash: hash.clone() };

    std::fs::create_dir_all(paths.root.join("cells").join(&hash))?;
    std::fs::create_dir_all(paths.root.join("traces").join(&hash))?;
    std::fs::create_dir_all(paths.root.join("estimates").join(&hash))?;
    std::fs::create_dir_all(paths.root.join("shared"))?;

    let ctx = build_context(config)?;

    // Shared artifacts for the record and for external cross-checking.
    ctx.lead.export(&paths.root.join("shared/leadfield"))?;
    ctx.observation.export(&paths.root.join("shared/observation"))?;
    std::fs::write(
        paths.root.join("shared/ground_truth.json"),
        serde_json::to_string_pretty(&ctx.truth)?,
    )?;

    // Depth weights per distinct exponent, shared across cells.
    let mut p_values: Vec<f64> = Vec::new();
    for key in enumerate_cells(config) {
        if !p_values.contains(&key.p) {
            p_values.push(key.p);
        }
    }
    let mut weights_for_p = Vec::new();
    for &p in &p_values {
        weights_for_p.push((p, depth_weights(&ctx.lead, p)?));
    }

    let keys = enumerate_cells(config);
    let workers = std::env::var("NEUROLOC_WORKERS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n >= 1)
        .unwrap_or_else(|| {
            std::thread::available_parallelism()
                .map(|n| n.get())
                .unwrap_or(1)
        });
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::InvalidParameter(format!("worker pool: {e}")))?;

    let mut cells: Vec<CellResult> = pool.install(|| {
        keys.par_iter()
            .map(|key| {
                let cell_path = paths.cell_file(&key.id());
                if let Ok(text) = std::fs::read_to_string(&cell_path) {
                    if let Ok(cell) = serde_json::from_str::<CellResult>(&text) {
                        return Ok(cell);
                    }
                }
                let cell = run_cell(key, config, &ctx, &weights_for_p, &paths);
                write_atomic(&cell_path, &serde_json::to_string_pretty(&cell)?)?;
                Ok(cell)
            })
            .collect::<Result<Vec<_>>>()
    })?;

    cells.sort_by(|a, b| {
        (a.method.as_str(), a.p, a.lambda, a.seed)
            .partial_cmp(&(b.method.as_str(), b.p, b.lambda, b.seed))
            .unwrap()
    });

    let result = SweepResult {
        config_hash: hash,
        config: config.clone(),
        truth: ctx.truth.clone(),
        realized_psnr_db: if ctx.observation.psnr_db.is_finite() {
            Some(ctx.observation.psnr_db)
        } else {
            None
        },
        n_source_points: ctx.space.n_points(),
        best_rows: best_rows(&cells),
        cells,
    };

    std::fs::write(
        paths.root.join("results.json"),
        serde_json::to_string_pretty(&result)?,
    )?;
    std::fs::write(paths.root.join("results.csv"), results_csv(&result.cells))?;
    Ok(result)
}
