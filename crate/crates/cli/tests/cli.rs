use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn softpd(dir: &Path, args: &[&str], config: Option<&str>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_softpd"));
    cmd.args(args).arg("--out").arg(dir.join("out"));
    if let Some(text) = config {
        let path = dir.join("run.toml");
        fs::write(&path, text).unwrap();
        cmd.arg("--config").arg(path);
    }
    cmd.output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned() + &String::from_utf8_lossy(&o.stderr)
}

#[test]
fn simulate_writes_one_snapshot_per_step() {
    let dir = tempfile::tempdir().unwrap();
    let o = softpd(dir.path(), &["simulate"], Some("[scene]\nkind = \"cantilever\"\nresolution = [6, 2, 2]\nsteps = 25\n"));
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    let out = dir.path().join("out");
    let frames = fs::read_dir(out.join("frames")).unwrap().count();
    assert_eq!(frames, 25);
    let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["frames"].as_array().unwrap().len(), 25);
    assert_eq!(manifest["all_converged"], true);
    let run: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("run.json")).unwrap()).unwrap();
    assert_eq!(run["config_sha256"].as_str().unwrap().len(), 64);
    let timing = fs::read_to_string(out.join("timing.csv")).unwrap();
    assert!(timing.starts_with("step,iterations,"));
    assert_eq!(timing.lines().count(), 26);
}

#[test]
fn zero_steps_write_only_the_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let o = softpd(dir.path(), &["simulate"], Some("[scene]\nkind = \"resting_block\"\nsteps = 0\n"));
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    let out = dir.path().join("out");
    let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    assert!(manifest["frames"].as_array().unwrap().is_empty());
    assert_eq!(fs::read_dir(out.join("frames")).unwrap().count(), 0);
}

#[test]
fn repeated_runs_are_byte_identical() {
    let config = "seed = 3\n[scene]\nkind = \"rolling_sphere\"\nsteps = 6\n[solver]\ntol = 1e-6\n";
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    assert_eq!(softpd(a.path(), &["simulate"], Some(config)).status.code(), Some(0));
    assert_eq!(softpd(b.path(), &["simulate"], Some(config)).status.code(), Some(0));
    for k in 1..=6 {
        let name = format!("out/frames/frame_{k:04}.csv");
        assert_eq!(fs::read(a.path().join(&name)).unwrap(), fs::read(b.path().join(&name)).unwrap());
    }
    assert_eq!(fs::read(a.path().join("out/manifest.json")).unwrap(), fs::read(b.path().join("out/manifest.json")).unwrap());
}

#[test]
fn invalid_configs_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let o = softpd(dir.path(), &["simulate"], Some("[solver]\ntolerance = 1e-3\n"));
    assert_eq!(o.status.code(), Some(2));
    assert!(stdout(&o).contains("tolerance"));
    let o = softpd(dir.path(), &["simulate"], Some("[scene]\nkind = \"teapot\"\n"));
    assert_eq!(o.status.code(), Some(2));
    let o = softpd(dir.path(), &["simulate", "--threads", "0"], None);
    assert_eq!(o.status.code(), Some(2));
    let o = softpd(dir.path(), &["fly"], None);
    assert_eq!(o.status.code(), Some(2));
    let o = softpd(dir.path(), &[], None);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn nonconverged_frames_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let o = softpd(dir.path(), &["simulate"], Some("[scene]\nkind = \"cantilever\"\nsteps = 2\n[solver]\ntol = 1e-12\nmax_iters = 1\n"));
    assert_eq!(o.status.code(), Some(1), "{}", stdout(&o));
    let manifest = fs::read_to_string(dir.path().join("out/manifest.json")).unwrap();
    assert!(manifest.contains("\"converged\": false"));
}

#[test]
fn single_cell_benchmark_has_one_row() {
    let dir = tempfile::tempdir().unwrap();
    let config = "[scene]\nkind = \"cantilever\"\nresolution = [6, 2, 2]\nsteps = 5\n[benchmark]\nmethods = [\"pd\"]\ntolerances = [1e-4]\nthreads = [1]\n";
    let o = softpd(dir.path(), &["benchmark"], Some(config));
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    let csv = fs::read_to_string(dir.path().join("out/benchmark.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 2);
    assert!(lines[0].starts_with("method,threads,tolerance,forward_s,backward_s,loss,grad_norm"));
    assert!(lines[1].starts_with("pd,1,0.0001,"));
}

#[test]
fn gradcheck_passes_on_particle_at_tight_tolerance() {
    let dir = tempfile::tempdir().unwrap();
    let o = softpd(dir.path(), &["gradcheck"], Some("[scene]\nkind = \"particle\"\n[gradcheck]\ntol = 1e-8\n"));
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    let csv = fs::read_to_string(dir.path().join("out/gradcheck.csv")).unwrap();
    assert!(csv.lines().skip(1).all(|l| l.ends_with(",true")));
}

#[test]
fn gradcheck_passes_on_small_cantilever() {
    let dir = tempfile::tempdir().unwrap();
    let o = softpd(dir.path(), &["gradcheck"], Some("[scene]\nkind = \"cantilever\"\nresolution = [6, 2, 2]\nsteps = 5\n"));
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
}

#[test]
fn corrupted_gradient_is_caught() {
    let dir = tempfile::tempdir().unwrap();
    let o = softpd(dir.path(), &["gradcheck"], Some("[scene]\nkind = \"particle\"\n[gradcheck]\ncorrupt = true\n"));
    assert_eq!(o.status.code(), Some(1), "{}", stdout(&o));
    assert!(stdout(&o).contains("checks failed"));
}

#[test]
fn optimize_with_zero_iterations_reports_start() {
    let dir = tempfile::tempdir().unwrap();
    let o = softpd(dir.path(), &["optimize"], Some("[optimize]\ntask = \"tendon_reach\"\nmax_iters = 0\nsteps = 4\n"));
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    let result: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join("out/result.json")).unwrap()).unwrap();
    assert_eq!(result["x"], result["start"]);
    assert_eq!(result["loss"], result["initial_loss"]);
    assert_eq!(result["baseline_losses"].as_array().unwrap().len(), 16);
    let history = fs::read_to_string(dir.path().join("out/loss_history.csv")).unwrap();
    assert!(history.starts_with("evaluation_index,loss,grad_norm,wall_time_s"));
}

#[test]
fn optimize_recovers_tendon_actuation() {
    let dir = tempfile::tempdir().unwrap();
    let o = softpd(dir.path(), &["optimize"], Some("[optimize]\ntask = \"tendon_reach\"\nsteps = 5\n"));
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    let result: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join("out/result.json")).unwrap()).unwrap();
    assert!(result["loss"].as_f64().unwrap() < 1e-6);
    assert!(result["normalized_loss"].as_f64().unwrap().abs() < 1e-3);
    assert!(dir.path().join("out/manifest.json").exists());
}
