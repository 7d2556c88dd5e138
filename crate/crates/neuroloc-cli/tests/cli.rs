//! Smoke tests of the `neuroloc` binary: subcommands, produced files, and
//! exit codes.

use std::path::Path;
use std::process::Command;

fn neuroloc() -> Command {
    Command::new(env!("CARGO_BIN_EXE_neuroloc"))
}

fn write_config(dir: &Path) -> std::path::PathBuf {
    let out = dir.join("out");
    let text = format!(
        r#"
        output_dir = "{}"
        seeds = [1]

        [headmodel]
        sphere_radius_mm = 90.0
        region_radius_mm = 30.0
        grid_spacing_mm = 10.0
        n_sensors = 20
        sensor_shell_radius_mm = 115.0

        [source]
        nearest_to_mm = [10.0, 0.0, 20.0]
        moment_nam = [0.0, 50.0, 0.0]

        [noise]
        target_psnr_db = 18.0
        seed = 5

        [[solvers]]
        method = "mne"
        lambda_grid = [0.1, 1.0]

        [[solvers]]
        method = "deep_prior"
        lambda_grid = [0.0, 1.0]
        p_grid = [0.5]
        iterations = 40
        latent_dim = 32
        "#,
        out.display()
    );
    let path = dir.join("experiment.toml");
    std::fs::write(&path, text).unwrap();
    path
}

#[test]
fn run_table_plotdata_slices_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path());
    let out = dir.path().join("out");

    let status = neuroloc().args(["run"]).arg(&config).status().unwrap();
    assert!(status.success(), "run failed");
    let results = out.join("results.json");
    assert!(results.exists());
    assert!(out.join("results.csv").exists());
    assert!(out.join("shared/observation.bin").exists());
    assert!(out.join("shared/leadfield.json").exists());

    let output = neuroloc().args(["table"]).arg(&results).output().unwrap();
    assert!(output.status.success());
    let stdout = String::from_utf8(output.stdout).unwrap();
    assert!(stdout.contains("method"), "table header missing: {stdout}");
    assert!(out.join("table.csv").exists());

    let status = neuroloc().args(["plotdata"]).arg(&results).status().unwrap();
    assert!(status.success());
    assert!(out.join("plotdata.csv").exists());
    assert!(out.join("plotdata.json").exists());

    let status = neuroloc()
        .args(["slices"])
        .arg(&results)
        .args(["--method", "deep_prior", "--lambda", "1.0", "--seed", "1"])
        .status()
        .unwrap();
    assert!(status.success());
    for plane in ["xz", "yz", "xy"] {
        let path = out.join(format!("slices_deep_prior_p0.5_l1_s1_{plane}.csv"));
        assert!(path.exists(), "missing {path:?}");
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with(&format!("# plane={plane}")));
    }
}

#[test]
fn exit_code_reflects_cell_failures() {
    // A 3x3x3 grid cannot host the generator: deep-prior cells fail and the
    // run must exit nonzero while still writing results.
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let text = format!(
        r#"
        output_dir = "{}"
        seeds = [1]

        [headmodel]
        sphere_radius_mm = 90.0
        region_radius_mm = 15.0
        grid_spacing_mm = 10.0
        n_sensors = 16
        sensor_shell_radius_mm = 115.0

        [source]
        nearest_to_mm = [10.0, 0.0, 0.0]
        moment_nam = [0.0, 50.0, 0.0]

        [[solvers]]
        method = "deep_prior"
        lambda_grid = [1.0]
        "#,
        out.display()
    );
    let config = dir.path().join("bad.toml");
    std::fs::write(&config, text).unwrap();

    let status = neuroloc().args(["run"]).arg(&config).status().unwrap();
    assert!(!status.success());
    assert!(out.join("results.json").exists());
}

#[test]
fn unknown_builtin_and_missing_args_fail_cleanly() {
    let status = neuroloc()
        .args(["run", "--builtin", "nonexistent"])
        .status()
        .unwrap();
    assert!(!status.success());

    let status = neuroloc().args(["run"]).status().unwrap();
    assert!(!status.success());
}
