use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use dissflow_cli::artifacts::{FAILED, MANIFEST};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_dissflow"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

const POTENTIAL: &str = r#"
scenario = "potential-flow"
seed = 4
n = 200

[domain]
lower = [-2.0, -2.0]
upper = [2.0, 2.0]

[target]
kind = "point"
center = [0.0, 0.0]

[disturbance]
kind = "constant"
u = 0.0

[flow]
dt = 0.01
t_end = 10.0
log_every = 20
"#;

fn write(dir: &Path, name: &str, body: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, body).unwrap();
    p
}

fn files(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        if path.is_dir() {
            out.extend(files(&path));
        } else {
            out.push((path.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&path).unwrap()));
        }
    }
    out.sort();
    out
}

fn manifest_value(dir: &Path, key: &str) -> String {
    let text = fs::read_to_string(dir.join(MANIFEST)).unwrap();
    let table: toml::Table = toml::from_str(&text).unwrap();
    table["results"][key].as_str().unwrap().to_string()
}

#[test]
fn version_and_help_exit_zero() {
    let out = run(&["version"]);
    assert_eq!(code(&out), 0);
    assert_eq!(stdout(&out).trim(), format!("dissflow {}", env!("CARGO_PKG_VERSION")));
    assert_eq!(code(&run(&["--help"])), 0);
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(code(&run(&["frobnicate"])), 1);
    assert_eq!(code(&run(&["simulate"])), 1);
    assert_eq!(code(&run(&["simulate", "/nonexistent/config.toml"])), 1);
}

#[test]
fn invalid_configs_exit_one() {
    let tmp = tempfile::tempdir().unwrap();
    let cases = [
        ("unknown_field.toml", POTENTIAL.replace("seed = 4", "seed = 4\nbogus = 1")),
        ("zero_n.toml", POTENTIAL.replace("n = 200", "n = 0")),
        ("bad_dt.toml", POTENTIAL.replace("dt = 0.01", "dt = -0.01")),
        ("outside.toml", POTENTIAL.replace("center = [0.0, 0.0]", "center = [5.0, 0.0]")),
        ("dims.toml", POTENTIAL.replace("center = [0.0, 0.0]", "center = [0.0]")),
        ("syntax.toml", "scenario = ".to_string()),
    ];
    for (name, body) in cases {
        let cfg = write(tmp.path(), name, &body);
        let out = run(&["simulate", cfg.to_str().unwrap(), "--out", tmp.path().join("o").to_str().unwrap()]);
        assert_eq!(code(&out), 1, "{name}: {}", String::from_utf8_lossy(&out.stderr));
    }
}

#[test]
fn unperturbed_potential_flow_converges_and_reruns_identically() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(tmp.path(), "pf.toml", POTENTIAL);
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for dir in [&a, &b] {
        let out = run(&["simulate", cfg.to_str().unwrap(), "--out", dir.to_str().unwrap()]);
        assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
        assert!(stdout(&out).contains("VERDICT PASS check=decay"));
    }
    let final_w2: f64 = manifest_value(&a, "finalW2").parse().unwrap();
    assert!(final_w2 < 1e-2, "{final_w2}");
    let (fa, fb) = (files(&a), files(&b));
    assert_eq!(fa.len(), fb.len());
    for ((pa, ba), (pb, bb)) in fa.iter().zip(&fb) {
        assert_eq!(pa, pb);
        assert!(ba == bb, "{} differs between reruns", pa.display());
    }
    for name in ["trajectory.csv", "initial_positions.csv", "final_positions.csv", "decay.csv", MANIFEST] {
        assert!(a.join(name).exists(), "{name}");
    }
}

#[test]
fn numerical_failure_exits_two_with_marker() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(tmp.path(), "blowup.toml", &POTENTIAL.replace("u = 0.0", "u = 1e6"));
    let dir = tmp.path().join("out");
    let out = run(&["simulate", cfg.to_str().unwrap(), "--out", dir.to_str().unwrap()]);
    assert_eq!(code(&out), 2);
    let marker = fs::read_to_string(dir.join(FAILED)).unwrap();
    assert!(marker.contains("exit_code=2"), "{marker}");
    assert!(!dir.join(MANIFEST).exists());
}

#[test]
fn stale_failed_marker_is_cleared() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(tmp.path(), "pf.toml", POTENTIAL);
    let dir = tmp.path().join("out");
    fs::create_dir_all(&dir).unwrap();
    fs::write(dir.join(FAILED), "old").unwrap();
    let out = run(&["simulate", cfg.to_str().unwrap(), "--out", dir.to_str().unwrap()]);
    assert_eq!(code(&out), 0);
    assert!(!dir.join(FAILED).exists());
}

#[test]
fn check_certifies_and_rejects() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(tmp.path(), "pf.toml", &POTENTIAL.replace("u = 0.0", "u = 0.1"));
    let dir = tmp.path().join("run");
    assert_eq!(code(&run(&["simulate", cfg.to_str().unwrap(), "--out", dir.to_str().unwrap()])), 0);
    let traj = dir.join("trajectory.csv");
    let monitor = write(
        tmp.path(),
        "monitor.toml",
        "[decay]\nlambda = 1.0\ngamma_gain = 0.5\nthreshold = 0.99\nslack = 1.0\n\n[positivity]\npsi1 = { a = 0.5, p = 2.0 }\npsi2 = { a = 0.5, p = 2.0 }\n",
    );
    let report = tmp.path().join("report");
    let out = run(&["check", traj.to_str().unwrap(), monitor.to_str().unwrap(), "--out", report.to_str().unwrap()]);
    assert_eq!(code(&out), 0, "{}", stdout(&out));
    assert!(report.join("verdicts.txt").exists() && report.join(MANIFEST).exists());

    let strict = write(tmp.path(), "strict.toml", "[decay]\nlambda = 50.0\ngamma_gain = 0.0\nthreshold = 0.99\nslack = 1.0\n");
    let out = run(&["check", traj.to_str().unwrap(), strict.to_str().unwrap()]);
    assert_eq!(code(&out), 3, "{}", stdout(&out));
    assert!(stdout(&out).contains("VERDICT FAIL"));

    let empty = write(tmp.path(), "empty.toml", "");
    assert_eq!(code(&run(&["check", traj.to_str().unwrap(), empty.to_str().unwrap()])), 1);
    let junk = write(tmp.path(), "junk.csv", "not,a,log\n1,2,3\n");
    assert_eq!(code(&run(&["check", junk.to_str().unwrap(), monitor.to_str().unwrap()])), 1);
}

#[test]
fn sweep_writes_ordered_summary_and_fails_wrong_trend() {
    let tmp = tempfile::tempdir().unwrap();
    let body = POTENTIAL.replace("n = 200", "n = 50").replace("t_end = 10.0", "t_end = 6.0")
        + "\n[sweep]\naxis = \"u\"\nvalues = [0.3, 0.1, 0.2]\nexpect = \"increasing\"\n";
    let cfg = write(tmp.path(), "sweep.toml", &body);
    let dir = tmp.path().join("up");
    let out = run(&["sweep", cfg.to_str().unwrap(), "--out", dir.to_str().unwrap(), "--workers", "2"]);
    assert_eq!(code(&out), 0, "{}{}", stdout(&out), String::from_utf8_lossy(&out.stderr));
    let summary = fs::read_to_string(dir.join("summary.csv")).unwrap();
    let values: Vec<f64> = summary
        .lines()
        .skip(1)
        .filter(|l| !l.starts_with('#'))
        .map(|l| l.split(',').next().unwrap().parse().unwrap())
        .collect();
    assert_eq!(values, vec![0.1, 0.2, 0.3]);
    assert!(dir.join("u=0.2/seed=4/trajectory.csv").exists());

    let wrong = write(tmp.path(), "wrong.toml", &body.replace("\"increasing\"", "\"decreasing\""));
    let out = run(&["sweep", wrong.to_str().unwrap(), "--out", tmp.path().join("down").to_str().unwrap()]);
    assert_eq!(code(&out), 3, "{}", stdout(&out));
}

#[test]
fn sdot_and_demo_figures() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(
        tmp.path(),
        "sdot.toml",
        "scenario = \"sdot\"\nn = 8\n[domain]\nlower = [0.0]\nupper = [1.0]\n[target]\nkind = \"uniform\"\ngrid = 2048\n[sdot]\nns = [4, 8, 16]\n",
    );
    let dir = tmp.path().join("sdot");
    let out = run(&["sdot", cfg.to_str().unwrap(), "--out", dir.to_str().unwrap()]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(fs::read_to_string(dir.join("quantization.csv")).unwrap().starts_with("N,ultimateEnergy,slopeWindowFlag"));

    let demo = tmp.path().join("demo");
    let out = run(&["demo-figures", demo.to_str().unwrap()]);
    assert_eq!(code(&out), 0);
    for name in ["equal_l2.csv", "displacement_shift.csv", "interpolation.csv", "demo_summary.txt", MANIFEST] {
        assert!(demo.join(name).exists(), "{name}");
    }
}
