use std::fs;
use std::path::Path;
use std::process::Command;

fn ensda(args: &[&str]) -> String {
    let out = Command::new(env!("CARGO_BIN_EXE_ensda")).args(args).output().unwrap();
    assert!(
        out.status.success(),
        "ensda {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn write_config(dir: &Path, extra: &str) -> String {
    let path = dir.join("exp.cfg");
    let text = format!(
        "# small ring experiment\n\
         model = lorenz96\n\
         cycles = 30\n\
         spinup = 5\n\
         nature.spinup = 50\n\
         ensemble.size = 10\n\
         da.relaxation = rtpp\n\
         obs.source = synth\n\
         synth.network = ring\n\
         synth.stride = 2\n\
         synth.error = 1.0\n\
         output.dir = {}\n\
         {extra}",
        dir.join("run").display()
    );
    fs::write(&path, text).unwrap();
    path.display().to_string()
}

#[test]
fn cycle_then_forecast_from_archive() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "output.archive_every = 5\n");
    let msg = ensda(&["cycle", &cfg]);
    assert!(msg.starts_with("30 cycles run"), "{msg}");
    let reports = fs::read_to_string(dir.path().join("run/reports.csv")).unwrap();
    assert_eq!(reports.lines().count(), 1 + 30);

    ensda(&["forecast", &cfg, "--max-lead", "3", "--cycles", "10:30:5"]);
    let lead = fs::read_to_string(dir.path().join("run/lead_time.csv")).unwrap();
    let rows: Vec<&str> = lead.lines().collect();
    assert_eq!(rows[0], "lead,variable,level_hpa,rmse,spread,n_init");
    assert_eq!(rows.len(), 1 + 4);
    assert!(rows[1].ends_with(",5"));
}

#[test]
fn nature_states_score_against_themselves() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    ensda(&["nature", &cfg, dir.path().join("nature").to_str().unwrap(), "--every", "10"]);
    let states: Vec<_> = fs::read_dir(dir.path().join("nature")).unwrap().collect();
    assert_eq!(states.len(), 4);
    let a = dir.path().join("nature/truth_c00010");
    let b = dir.path().join("nature/truth_c00020");
    let same = ensda(&["metrics", a.to_str().unwrap(), a.to_str().unwrap()]);
    assert_eq!(same, "variable,level_hpa,rmse\nX,,0\n");
    let apart = ensda(&["metrics", a.to_str().unwrap(), b.to_str().unwrap()]);
    let r: f64 = apart.lines().nth(1).unwrap().rsplit(',').next().unwrap().parse().unwrap();
    assert!(r > 0.5, "{apart}");
}

#[test]
fn synthetic_obs_thinned_on_a_grid() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("grid.cfg");
    fs::write(
        &cfg,
        "model = surrogate\nmodel.n_lon = 16\nmodel.n_lat = 8\nmodel.levels = 850,500\n\
         cycles = 1\nnature.spinup = 5\nensemble.size = 4\n\
         obs.source = synth\nsynth.network = clustered\nsynth.count = 60\nsynth.clusters = 2\n\
         synth.variables = T,U\nthinning.enabled = true\nthinning.r_h = 2000\n",
    )
    .unwrap();
    let cfg = cfg.to_str().unwrap();
    let obs = dir.path().join("obs.csv");
    let thinned = dir.path().join("thinned.csv");
    let density = dir.path().join("density.csv");
    assert!(ensda(&["synth-obs", cfg, obs.to_str().unwrap()]).starts_with("240 observations"));
    let msg = ensda(&[
        "thin",
        obs.to_str().unwrap(),
        thinned.to_str().unwrap(),
        "--config",
        cfg,
        "--density",
        density.to_str().unwrap(),
    ]);
    let kept = fs::read_to_string(&thinned).unwrap().lines().count() - 1;
    // 60 sites, two variables on two levels each
    assert!(kept > 0 && kept < 240, "{msg}");
    let header = fs::read_to_string(&density).unwrap();
    assert!(header.starts_with("variable,grid_index"));
}

#[test]
fn bad_config_fails_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "da.no_such_key = 1\n");
    let out = Command::new(env!("CARGO_BIN_EXE_ensda")).args(["cycle", &cfg]).output().unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("no_such_key"));
}
