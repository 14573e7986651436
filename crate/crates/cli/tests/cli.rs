use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"
[campaign]
n_initial = 4
n_max = 6
[qoi]
n_inner = 200
[hmc]
n_samples = 300
burn_in = 100
thin_to = 4
[bgo]
n_init = 4
n_total = 8
n_candidates = 50
[ekld]
b_hypothetical = 8
s_paths = 8
[kle]
n_quad = 40
"#;

fn mixture_config() -> String {
    format!("seed = 1\n[oracle]\nbenchmark = \"gaussian-mixture-1d\"\n{TINY}")
}

fn manual_config() -> String {
    format!("seed = 1\n[oracle]\nbounds = [[0.0, 1.0]]\n{TINY}")
}

fn bode(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bode")).args(args).env_remove("BODE_SEED").output().expect("spawn bode")
}

fn write_config(dir: &Path, text: &str) -> String {
    let p = dir.join("c.toml");
    fs::write(&p, text).unwrap();
    p.display().to_string()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn trace_rows(out: &Path) -> Vec<String> {
    fs::read_to_string(out.join("trace.csv")).unwrap().lines().skip(1).map(str::to_string).collect()
}

/// Trace rows with the wall-clock column removed.
fn timeless(rows: &[String]) -> Vec<String> {
    rows.iter().map(|r| r.rsplit_once(',').unwrap().0.to_string()).collect()
}

fn manifest(out: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap()
}

fn observations(out: &Path) -> usize {
    manifest(out)["observations"].as_u64().unwrap() as usize
}

#[test]
fn run_completes_and_writes_trace() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), &mixture_config());
    let out = tmp.path().join("out");
    let o = bode(&["run", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(trace_rows(&out).len(), 2);
    assert_eq!(fs::read_to_string(out.join("trace_raw.csv")).unwrap().lines().count(), 3);
    let m = manifest(&out);
    assert_eq!(m["status"], "done");
    assert_eq!(m["observations"], 6);
    assert!(!out.join(".lock").exists());

    // refuses to overwrite
    let o = bode(&["run", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn invalid_alpha_names_field_and_line() {
    let tmp = tempfile::tempdir().unwrap();
    let text = mixture_config().replace("[qoi]\n", "[qoi]\nkind = \"percentile\"\nalpha = 1.5\n");
    let cfg = write_config(tmp.path(), &text);
    let out = tmp.path().join("out");
    let o = bode(&["run", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    let line = text.lines().position(|l| l.starts_with("alpha")).unwrap() + 1;
    let e = stderr(&o);
    assert!(e.contains("qoi.alpha") && e.contains(&format!("c.toml:{line}")), "{e}");
    assert!(!out.join("manifest.json").exists());
}

#[test]
fn staged_run_matches_uninterrupted() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), &mixture_config());
    let full = tmp.path().join("full");
    let staged = tmp.path().join("staged");
    assert!(bode(&["run", "--config", &cfg, "--out", full.to_str().unwrap()]).status.success());
    let o = bode(&["run", "--config", &cfg, "--out", staged.to_str().unwrap(), "--max-iterations", "1"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(trace_rows(&staged).len(), 1);
    assert_eq!(manifest(&staged)["status"], "running");
    let o = bode(&["resume", "--out", staged.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(timeless(&trace_rows(&staged)), timeless(&trace_rows(&full)));
}

#[test]
fn suggest_is_pure_and_record_grows_dataset() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), &manual_config());
    let out = tmp.path().join("out");
    let out_s = out.to_str().unwrap();

    // manual campaigns cannot run
    assert_eq!(bode(&["run", "--config", &cfg, "--out", out_s]).status.code(), Some(2));
    fs::remove_dir_all(&out).ok();

    for i in 0..4 {
        let cfg_arg: &[&str] = if i == 0 { &["--config", &cfg] } else { &[] };
        let o = bode(&[&["suggest", "--out", out_s][..], cfg_arg].concat());
        assert!(o.status.success(), "{}", stderr(&o));
        let x = stdout(&o).trim().to_string();
        let v: f64 = x.parse().unwrap();
        assert!((0.0..=1.0).contains(&v));
        let y = (6.0 * v).sin().to_string();
        let o = bode(&[&["record", "--out", out_s, "--x", &x, "--y", &y][..], cfg_arg].concat());
        assert!(o.status.success(), "{}", stderr(&o));
        assert_eq!(observations(&out), i + 1);
    }

    let state_before = fs::read(out.join("state.json")).unwrap();
    let a = bode(&["suggest", "--out", out_s]);
    let b = bode(&["suggest", "--out", out_s]);
    assert!(a.status.success(), "{}", stderr(&a));
    assert_eq!(stdout(&a), stdout(&b));
    assert_eq!(fs::read(out.join("state.json")).unwrap(), state_before);
    let x: f64 = stdout(&a).trim().parse().unwrap();
    assert!((0.0..=1.0).contains(&x));

    let o = bode(&["record", "--out", out_s, "--x", "0.123", "--y", "-0.5"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(observations(&out), 5);
    let c = bode(&["suggest", "--out", out_s]);
    assert_ne!(stdout(&a), stdout(&c));
}

#[test]
fn record_rejects_bad_input_and_warns_on_duplicates() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), &manual_config());
    let out = tmp.path().join("out");
    let out_s = out.to_str().unwrap();
    let o = bode(&["record", "--out", out_s, "--config", &cfg, "--x", "0.5", "--y", "1.0"]);
    assert!(o.status.success(), "{}", stderr(&o));

    let o = bode(&["record", "--out", out_s, "--x", "1.5", "--y", "1.0"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("outside"), "{}", stderr(&o));
    let o = bode(&["record", "--out", out_s, "--x", "abc", "--y", "1.0"]);
    assert_eq!(o.status.code(), Some(2));
    let o = bode(&["record", "--out", out_s, "--x", "0.1,0.2", "--y", "1.0"]);
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(observations(&out), 1);

    let o = bode(&["record", "--out", out_s, "--x", "0.5", "--y", "1.1"]);
    assert!(o.status.success());
    assert!(stderr(&o).contains("already observed"), "{}", stderr(&o));
    assert_eq!(observations(&out), 2);
}

#[test]
fn oracle_failure_keeps_partial_state() {
    let tmp = tempfile::tempdir().unwrap();
    let counter = tmp.path().join("calls");
    // succeeds five times, then fails
    let script = format!(
        "n=$(cat {c} 2>/dev/null || echo 0); n=$((n+1)); echo $n > {c}; [ $n -le 5 ] || exit 1; awk -F, '{{print sin(6*$1)}}'",
        c = counter.display()
    );
    let script_path = tmp.path().join("oracle.sh");
    fs::write(&script_path, script).unwrap();
    let text = format!(
        "seed = 1\n[oracle]\ncommand = [\"sh\", {:?}]\nbounds = [[0.0, 1.0]]\n{}",
        script_path.display().to_string(),
        TINY.replace("n_max = 6", "n_max = 8")
    );
    let cfg = write_config(tmp.path(), &text);
    let out = tmp.path().join("out");
    let o = bode(&["run", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    let m = manifest(&out);
    assert_eq!(m["status"], "aborted");
    assert_eq!(m["observations"], 5);
    assert_eq!(trace_rows(&out).len(), 1);
    assert!(!out.join(".lock").exists());
}

#[test]
fn lock_conflict_fails_fast() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), &mixture_config());
    let out = tmp.path().join("out");
    let out_s = out.to_str().unwrap();
    assert!(bode(&["run", "--config", &cfg, "--out", out_s, "--max-iterations", "0"]).status.success());
    fs::write(out.join(".lock"), "1").unwrap();
    let o = bode(&["resume", "--out", out_s]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("locked"), "{}", stderr(&o));
    assert_eq!(trace_rows(&out).len(), 0);
}

#[test]
fn oracle_qoi_prints_value() {
    let o = bode(&["oracle-qoi", "--benchmark", "gaussian-mixture-1d", "--kind", "expectation", "--n", "2001"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let v: f64 = stdout(&o).trim().parse().unwrap();
    assert!((v - 2.0).abs() < 0.05, "{v}");
    assert_eq!(bode(&["oracle-qoi", "--benchmark", "nope"]).status.code(), Some(2));
}
