use std::io::{Read, Write};
use std::net::{TcpListener, TcpStream};
use std::path::PathBuf;
use std::process::{Command, Output, Stdio};
use std::time::{Duration, Instant};

use servobot::jacobian::COMPARISON_CSV_HEADER;
use servobot::tfod::{PendingFailure, TrialStatus};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_servobot"))
}

fn scenario(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("scenarios").join(name)
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn text(b: &[u8]) -> String {
    String::from_utf8_lossy(b).into_owned()
}

#[test]
fn run_learning_scenario_reports_update_count() {
    let s = scenario("vs_learning.json");
    let out = run(&["run", "--scenario", s.to_str().unwrap(), "--seed", "7"]);
    assert_eq!(out.status.code(), Some(0), "{}", text(&out.stderr));
    let stdout = text(&out.stdout);
    assert!(stdout.contains("converged true after"), "{stdout}");
    assert!(stdout.contains("1 clicks, 1 Find examples"), "{stdout}");
}

#[test]
fn compare_writes_comparison_layout() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().to_str().unwrap();
    let out = run(&["compare", "--trials", "10", "--seed", "1", "--out-dir", d, "--format", "csv"]);
    assert_eq!(out.status.code(), Some(0), "{}", text(&out.stderr));
    let csv = std::fs::read_to_string(dir.path().join("report.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], COMPARISON_CSV_HEADER);
    let names: Vec<&str> = lines[1..].iter().map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(names, ["masked", "vosvs", "broyden_bad", "broyden_good"]);
    assert!(lines[1].contains(",10,10,"), "all masked trials converge: {}", lines[1]);
    assert!(!dir.path().join("report.json").exists());
}

#[test]
fn scenario_errors_exit_2_with_position() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, "{\n  \"protocol\": \"vosvs_bench\",\n  \"seed\": nope\n}").unwrap();
    let out = run(&["run", "--scenario", bad.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(text(&out.stderr).contains("line 3"), "{}", text(&out.stderr));

    let out = run(&["run", "--scenario", dir.path().join("none.json").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(text(&out.stderr).contains("missing file"));

    let out = run(&["run"]);
    assert_eq!(out.status.code(), Some(2));
    let out = run(&["run", "--protocol", "pick_place", "--trials", "0"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn ci_mode_exits_3_on_acceptance_miss() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("strict.json");
    // nothing clears a confidence threshold of 1
    std::fs::write(
        &cfg,
        r#"{"protocol": "vosvs_bench", "trials": 1, "example_cap": 3, "thresholds": {"confidence": 1.0}}"#,
    )
    .unwrap();
    let c = cfg.to_str().unwrap();
    let out = run(&["run", "--scenario", c, "--ci"]);
    assert_eq!(out.status.code(), Some(3), "{}", text(&out.stderr));
    assert!(text(&out.stderr).contains("acceptance:"));
    assert_eq!(run(&["run", "--scenario", c]).status.code(), Some(0));
}

#[test]
fn replay_reproduces_report_files() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let s = scenario("tabletop.json");
    let out = run(&["run", "--scenario", s.to_str().unwrap(), "--out-dir", a.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0), "{}", text(&out.stderr));
    assert!(a.path().join("failures").is_dir());
    assert!(a.path().join("depth_series").is_dir());
    let report = a.path().join("report.json");
    let out = run(&["replay", report.to_str().unwrap(), "--out-dir", b.path().to_str().unwrap(), "--ci"]);
    assert_eq!(out.status.code(), Some(0), "{}", text(&out.stderr));
    for f in ["report.json", "report.csv"] {
        assert_eq!(std::fs::read(a.path().join(f)).unwrap(), std::fs::read(b.path().join(f)).unwrap(), "{f}");
    }
}

fn http(port: u16, method: &str, path: &str, body: Option<&str>) -> Option<(u16, String)> {
    let mut s = TcpStream::connect(("127.0.0.1", port)).ok()?;
    let body = body.unwrap_or("");
    write!(
        s,
        "{method} {path} HTTP/1.1\r\nHost: localhost\r\nConnection: close\r\nContent-Type: application/json\r\nContent-Length: {}\r\n\r\n{body}",
        body.len()
    )
    .ok()?;
    let mut bytes = Vec::new();
    s.read_to_end(&mut bytes).ok()?;
    let raw = String::from_utf8_lossy(&bytes);
    let code = raw.split_whitespace().nth(1)?.parse().ok()?;
    let (_, payload) = raw.split_once("\r\n\r\n")?;
    Some((code, payload.to_string()))
}

fn poll<T>(deadline: Instant, mut f: impl FnMut() -> Option<T>) -> T {
    loop {
        if let Some(v) = f() {
            return v;
        }
        assert!(Instant::now() < deadline, "timed out");
        std::thread::sleep(Duration::from_millis(50));
    }
}

#[test]
fn serve_resumes_the_trial_after_a_scripted_annotation() {
    let port = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let dir = tempfile::tempdir().unwrap();
    let s = scenario("vs_learning.json");
    let mut child = bin()
        .args(["serve", "--port", &port.to_string(), "--scenario", s.to_str().unwrap()])
        .args(["--trials", "2", "--out-dir", dir.path().to_str().unwrap()])
        .stdout(Stdio::null())
        .stderr(Stdio::null())
        .spawn()
        .unwrap();
    let deadline = Instant::now() + Duration::from_secs(60);
    let pending: PendingFailure = poll(deadline, || {
        let (_, body) = http(port, "GET", "/api/failures", None)?;
        let list: Vec<PendingFailure> = serde_json::from_str(&body).ok()?;
        list.into_iter().next()
    });
    assert_eq!(pending.image_urls.len(), 1);
    let (code, _) = http(port, "GET", &pending.image_urls[0], None).unwrap();
    assert_eq!(code, 200);

    // the racquetball sits under the principal point
    let sub = format!(
        r#"{{"event_id": {}, "image_id": {}, "boxes": [{{"class": "racquetball", "x": 272, "y": 192, "w": 96, "h": 96}}]}}"#,
        pending.event_id, pending.image_ids[0]
    );
    let (code, body) = http(port, "POST", "/api/v1/annotations", Some(&sub)).unwrap();
    assert_eq!(code, 201, "{body}");
    assert!(body.contains("\"clicks\":1"), "{body}");
    let (code, _) = http(port, "POST", "/api/annotations", Some(&sub)).unwrap();
    assert_eq!(code, 409);

    let status: TrialStatus = poll(deadline, || {
        let (_, body) = http(port, "GET", "/api/status", None)?;
        let st: TrialStatus = serde_json::from_str(&body).ok()?;
        (st.phase == "done").then_some(st)
    });
    assert_eq!(status.pending, 0);
    poll(deadline, || dir.path().join("report.json").exists().then_some(()));
    child.kill().unwrap();
    child.wait().unwrap();
    let report = std::fs::read_to_string(dir.path().join("report.json")).unwrap();
    let r = servobot::bench::RunReport::from_json(&report).unwrap();
    let l = r.learning.unwrap();
    assert_eq!(l.ledger.clicks, 1);
    assert!(l.session.converged);
}

#[test]
fn every_fixture_loads() {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("scenarios");
    let mut n = 0;
    for e in std::fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.extension().is_some_and(|x| x == "json") {
            servobot::bench::ScenarioConfig::load(&p).unwrap_or_else(|e| panic!("{}: {e}", p.display()));
            n += 1;
        }
    }
    assert_eq!(n, 6);
}
