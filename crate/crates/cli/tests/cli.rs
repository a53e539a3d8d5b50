use std::path::PathBuf;
use std::process::Command;

fn root() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn skelnet(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_skelnet"))
        .args(args)
        .output()
        .expect("runs")
}

fn run_with(sub: &str, skeleton: &str, config: &str) -> (std::process::Output, tempfile::TempDir) {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.cfg");
    std::fs::write(&cfg, config).unwrap();
    let skel = root().join("skeletons").join(skeleton);
    let out = dir.path().join("out");
    let o = skelnet(&[
        sub,
        "--skeleton",
        skel.to_str().unwrap(),
        "--config",
        cfg.to_str().unwrap(),
        "--seed",
        "3",
        "--out",
        out.to_str().unwrap(),
    ]);
    (o, dir)
}

fn summary(dir: &tempfile::TempDir) -> String {
    std::fs::read_to_string(dir.path().join("out/summary.txt")).unwrap()
}

#[test]
fn grad_check_writes_report_and_summary() {
    let (o, dir) = run_with("grad-check", "tanh_deep.skel", "coords = 50\n");
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let s = summary(&dir);
    assert!(s.lines().any(|l| l.starts_with("PASS AC1:")), "{s}");
    let csv = std::fs::read_to_string(dir.path().join("out/report.csv")).unwrap();
    assert!(csv.starts_with("section,run,metric,value\n"));
    assert_eq!(csv.lines().count(), 1 + 3 * 50);
}

#[test]
fn kernel_concentration_small() {
    let cfg = "d = 3\nr_grid = 16, 64\nseeds = 2\npairs = 10\nr_small = 16\nr_large = 64\nbig_r = 128\nconjugate.points = 11\n";
    let (o, dir) = run_with("kernel-concentration", "pairwise_relu.skel", cfg);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let s = summary(&dir);
    assert!(s.contains(" AC3:") && s.contains("PASS AC2:"), "{s}");
}

#[test]
fn init_conditions_sections() {
    let cfg = "spectral = false\nmoments.r = 32\nmoments.inputs = 20\nmoments.seeds = 2\nmoments.low = 0\nmoments.high = 10\nloss.r = 16\nloss.inputs = 20\nloss.seeds = 2\nloss.gauss_trials = 100\n";
    let (o, dir) = run_with("init-conditions", "pairwise_erf.skel", cfg);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let s = summary(&dir);
    assert!(s.contains("PASS AC4:") && s.contains(" AC8:") && !s.contains(" AC5:"), "{s}");
}

#[test]
fn perceptron_bound_small() {
    let cfg = "norms = 2\nclasses = 2\nseeds = 2\npool = 50\nsgd.runs = 2\nsgd.epsilon = 0.5\n";
    let (o, dir) = run_with("perceptron-bound", "linear.skel", cfg);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let s = summary(&dir);
    assert!(s.contains("PASS AC6:") && s.contains(" AC10:"), "{s}");
}

#[test]
fn drift_small() {
    let cfg = "r = 64\nd = 4\nruns = 1\nsteps = 5\nprobes = 2\n";
    let (o, dir) = run_with("drift", "skip_relu.skel", cfg);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(summary(&dir).contains(" AC7:"));
}

#[test]
fn main_theorem_smoke_config() {
    let cfg = std::fs::read_to_string(root().join("configs/smoke.cfg")).unwrap();
    let (o, dir) = run_with("main-theorem", "skip_relu.skel", &cfg);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let s = summary(&dir);
    assert!(s.contains(" AC9:"), "{s}");
    let csv = std::fs::read_to_string(dir.path().join("out/report.csv")).unwrap();
    assert!(csv.contains("summary,0,planted_loss,"));
}

#[test]
fn unknown_config_key_is_an_error() {
    let (o, _dir) = run_with("grad-check", "tanh_deep.skel", "coords = 5\nbogus = 1\n");
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("bogus"));
}

#[test]
fn missing_skeleton_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = skelnet(&[
        "drift",
        "--skeleton",
        dir.path().join("nope.skel").to_str().unwrap(),
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn strict_fails_on_failed_criterion() {
    // With a zero tolerance the check cannot pass.
    let (o, _dir) = run_with("grad-check", "tanh_deep.skel", "coords = 20\ntol = 0\n");
    assert!(o.status.success());
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.cfg");
    std::fs::write(&cfg, "coords = 20\ntol = 0\n").unwrap();
    let o = skelnet(&[
        "grad-check",
        "--skeleton",
        root().join("skeletons/tanh_deep.skel").to_str().unwrap(),
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        dir.path().join("out").to_str().unwrap(),
        "--strict",
    ]);
    assert_eq!(o.status.code(), Some(1));
}
