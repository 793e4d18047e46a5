use std::io::{Read, Write};
use std::net::{TcpListener, TcpStream};
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Output, Stdio};
use std::time::{Duration, Instant};

use serde_json::{json, Value};

use segxal_core::model::ModelConfig;
use segxal_core::orchestrator::RunConfig;

fn segxal() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_segxal"));
    c.env_remove("SEGXAL_RUN_ROOT");
    c
}

fn run(args: &[&str]) -> Output {
    segxal().args(args).output().unwrap()
}

fn text(b: &[u8]) -> String {
    String::from_utf8_lossy(b).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// Small benchmark and model so a whole run takes well under a second.
fn tiny_config(run_dir: Option<&Path>) -> Value {
    let mut cfg = RunConfig::default();
    cfg.model = ModelConfig {
        levels: 2,
        base_channels: 4,
        epochs_per_cycle: 2,
        ..ModelConfig::desk(5, 16, 32)
    };
    cfg.al.num_cycles = 2;
    cfg.al.query_fraction_per_cycle = 0.1;
    cfg.extract.min_region_px = 2;
    let mut v = serde_json::to_value(cfg).unwrap();
    v["benchmark"] = json!({ "n_train": 24, "n_val": 6, "width": 32, "height": 16, "max_objects": 2 });
    v["poll_ms"] = json!(50);
    if let Some(d) = run_dir {
        v["run_dir"] = json!(d);
    }
    v
}

fn write_config(dir: &Path, v: &Value) -> PathBuf {
    let path = dir.join("config.json");
    std::fs::write(&path, serde_json::to_vec_pretty(v).unwrap()).unwrap();
    path
}

fn files(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let path = e.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.push((path.strip_prefix(dir).unwrap().to_path_buf(), std::fs::read(&path).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn free_port() -> u16 {
    TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port()
}

/// Minimal HTTP/1.1 client: returns the status code and the body.
fn http(port: u16, method: &str, path: &str, body: Option<&Value>) -> Option<(u16, Value)> {
    let mut s = TcpStream::connect(("127.0.0.1", port)).ok()?;
    let payload = body.map(|b| serde_json::to_vec(b).unwrap()).unwrap_or_default();
    let head = format!(
        "{method} {path} HTTP/1.1\r\nHost: localhost\r\nConnection: close\r\nContent-Type: application/json\r\nContent-Length: {}\r\n\r\n",
        payload.len()
    );
    s.write_all(head.as_bytes()).ok()?;
    s.write_all(&payload).ok()?;
    let mut raw = Vec::new();
    s.read_to_end(&mut raw).ok()?;
    let raw = text(&raw);
    let code = raw.split_whitespace().nth(1)?.parse().ok()?;
    let body = raw.split_once("\r\n\r\n").map(|(_, b)| b).unwrap_or("");
    Some((code, serde_json::from_str(body).unwrap_or(Value::Null)))
}

struct Server(Child);

impl Drop for Server {
    fn drop(&mut self) {
        let _ = self.0.kill();
        let _ = self.0.wait();
    }
}

fn start_server(run_dir: &Path, port: u16) -> Server {
    let child = segxal()
        .args(["serve", "--run", p(run_dir), "--port", &port.to_string()])
        .stdout(Stdio::null())
        .stderr(Stdio::null())
        .spawn()
        .unwrap();
    let server = Server(child);
    let deadline = Instant::now() + Duration::from_secs(20);
    while Instant::now() < deadline {
        if http(port, "GET", "/api/status", None).is_some() {
            return server;
        }
        std::thread::sleep(Duration::from_millis(50));
    }
    panic!("service did not come up on port {port}");
}

#[test]
fn gen_data_handles_zero_samples() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("empty");
    let o = run(&["gen-data", "--out", p(&out), "--n", "0"]);
    assert!(o.status.success(), "{}", text(&o.stderr));
    let m: Value = serde_json::from_slice(&std::fs::read(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(m["ids"], json!([]));
}

#[test]
fn gen_data_is_byte_identical_across_runs() {
    let tmp = tempfile::tempdir().unwrap();
    let dirs = [tmp.path().join("a"), tmp.path().join("b")];
    for d in &dirs {
        let o = run(&["gen-data", "--out", p(d), "--n", "5", "--seed", "1", "--width", "64", "--height", "32"]);
        assert!(o.status.success(), "{}", text(&o.stderr));
    }
    let a = files(&dirs[0]);
    assert_eq!(a.len(), 1 + 3 * 5);
    assert_eq!(a, files(&dirs[1]));
}

#[test]
fn gen_data_into_unwritable_path_exits_2() {
    let tmp = tempfile::tempdir().unwrap();
    let blocker = tmp.path().join("file");
    std::fs::write(&blocker, b"x").unwrap();
    let o = run(&["gen-data", "--out", p(&blocker.join("sub")), "--n", "1"]);
    assert_eq!(o.status.code(), Some(2), "{}", text(&o.stderr));
}

#[test]
fn machine_run_report_and_resume() {
    let tmp = tempfile::tempdir().unwrap();
    let run_dir = tmp.path().join("run");
    let cfg = write_config(tmp.path(), &tiny_config(Some(&run_dir)));
    let o = run(&["run", "--config", p(&cfg), "--strategy", "random"]);
    assert!(o.status.success(), "{}", text(&o.stderr));
    let stdout = text(&o.stdout);
    let cycles: Vec<&str> = stdout.lines().filter(|l| l.starts_with("cycle ")).collect();
    assert_eq!(cycles.len(), 2, "{stdout}");
    assert!(cycles[0].starts_with("cycle 1: mIoU="));

    // The flag overrides the file, and the effective config is echoed.
    let echo: Value = serde_json::from_slice(&std::fs::read(run_dir.join("segxal.json")).unwrap()).unwrap();
    assert_eq!(echo["strategy"], "random");
    assert_eq!(echo["benchmark"]["n_train"], 24);

    let csv = run(&["report", "--run", p(&run_dir), "--format", "csv"]);
    assert!(csv.status.success());
    let csv = text(&csv.stdout);
    let mut lines = csv.lines();
    assert_eq!(lines.next().unwrap(), "cycle,iou_0,iou_1,iou_2,iou_3,iou_4,miou,samples_labeled");
    let rows: Vec<Vec<String>> = lines.map(|l| l.split(',').map(String::from).collect()).collect();
    assert_eq!(rows.len(), 2);

    let json_out = run(&["report", "--run", p(&run_dir), "--format", "json"]);
    let table: Vec<Value> = serde_json::from_slice(&json_out.stdout).unwrap();
    assert_eq!(table.len(), rows.len());
    let header = ["cycle", "iou_0", "iou_1", "iou_2", "iou_3", "iou_4", "miou", "samples_labeled"];
    for (row, obj) in rows.iter().zip(&table) {
        for (cell, key) in row.iter().zip(header) {
            let from_json = obj[key].as_f64();
            let from_csv = (!cell.is_empty()).then(|| cell.parse::<f64>().unwrap());
            assert_eq!(from_csv, from_json, "{key}");
        }
    }

    let md = text(&run(&["report", "--run", p(&run_dir), "--format", "md"]).stdout);
    assert_eq!(md.lines().count(), 2 + 2);
    assert!(md.starts_with("| Cycle | Labeled | Class 0 |"));

    let again = run(&["run", "--resume", p(&run_dir)]);
    assert!(again.status.success());
    assert!(text(&again.stdout).contains("nothing to do"));

    let clash = run(&["run", "--config", p(&cfg)]);
    assert_eq!(clash.status.code(), Some(1));
    assert!(text(&clash.stderr).contains("--resume"));
}

#[test]
fn run_root_comes_from_the_environment() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), &tiny_config(None));
    let root = tmp.path().join("root");
    let o = segxal()
        .args(["run", "--config", p(&cfg), "--strategy", "entropy", "--seed", "3"])
        .env("SEGXAL_RUN_ROOT", &root)
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", text(&o.stderr));
    assert!(root.join("entropy_only-s3/cycle_2/metrics.json").is_file());
}

#[test]
fn report_on_empty_or_missing_run_exits_5() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(run(&["report", "--run", p(tmp.path())]).status.code(), Some(5));
    assert_eq!(run(&["report", "--run", p(&tmp.path().join("nope"))]).status.code(), Some(5));
}

#[test]
fn resume_with_stale_schema_exits_4() {
    let tmp = tempfile::tempdir().unwrap();
    let run_dir = tmp.path().join("run");
    let mut v = tiny_config(Some(&run_dir));
    v["al"]["num_cycles"] = json!(1);
    let cfg = write_config(tmp.path(), &v);
    assert!(run(&["run", "--config", p(&cfg)]).status.success());
    let state_path = run_dir.join("state.json");
    let mut state: Value = serde_json::from_slice(&std::fs::read(&state_path).unwrap()).unwrap();
    state["schema"] = json!("segxal/0");
    std::fs::write(&state_path, serde_json::to_vec(&state).unwrap()).unwrap();
    let o = run(&["run", "--resume", p(&run_dir)]);
    assert_eq!(o.status.code(), Some(4), "{}", text(&o.stderr));
}

#[test]
fn missing_depth_files_exit_3_with_ids() {
    let tmp = tempfile::tempdir().unwrap();
    let depth = tmp.path().join("depth");
    std::fs::create_dir(&depth).unwrap();
    let cfg = write_config(tmp.path(), &tiny_config(Some(&tmp.path().join("run"))));
    let o = run(&["run", "--config", p(&cfg), "--depth", "midas-files", "--depth-dir", p(&depth)]);
    assert_eq!(o.status.code(), Some(3));
    assert!(text(&o.stderr).contains("train_0001"));
}

#[test]
fn serve_exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = run(&["serve", "--run", p(&tmp.path().join("nope")), "--port", "1"]);
    assert_eq!(missing.status.code(), Some(5));

    let taken = TcpListener::bind("127.0.0.1:0").unwrap();
    let port = taken.local_addr().unwrap().port().to_string();
    let busy = run(&["serve", "--run", p(tmp.path()), "--port", &port]);
    assert_eq!(busy.status.code(), Some(6), "{}", text(&busy.stderr));
}

/// Human oracle end to end: the run stops for lack of a service, the
/// service is started, and a resumed run polls until annotators submit.
#[test]
fn human_loop_across_processes() {
    let tmp = tempfile::tempdir().unwrap();
    let run_dir = tmp.path().join("run");
    let port = free_port();
    let mut v = tiny_config(Some(&run_dir));
    v["al"]["num_cycles"] = json!(1);
    v["al"]["dice_threshold_theta"] = json!(0.0);
    v["oracle"] = json!("human");
    v["service_addr"] = json!(format!("127.0.0.1:{port}"));
    let cfg = write_config(tmp.path(), &v);

    let first = run(&["run", "--config", p(&cfg)]);
    assert_eq!(first.status.code(), Some(7));
    assert!(text(&first.stderr).contains("segxal serve"));

    let _server = start_server(&run_dir, port);
    let mut resumed = segxal()
        .args(["run", "--resume", p(&run_dir)])
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .unwrap();

    let (code, list) = http(port, "GET", "/api/queue", None).unwrap();
    assert_eq!(code, 200);
    let ids: Vec<String> = list.as_array().unwrap().iter().map(|t| t["ticket_id"].as_str().unwrap().to_string()).collect();
    assert!(!ids.is_empty());
    for id in &ids {
        let (code, _) = http(port, "POST", &format!("/api/tickets/{id}/claim"), Some(&json!({ "annotator_id": "h" }))).unwrap();
        assert_eq!(code, 200);
        let edits = json!({ "annotator_id": "h", "edits": [{ "kind": "polygon", "class_id": 2, "points": [[0, 0], [0, 8], [4, 8], [4, 0]] }] });
        let (code, body) = http(port, "POST", &format!("/api/tickets/{id}/annotation"), Some(&edits)).unwrap();
        assert_eq!(code, 200, "{body}");
        assert_eq!(body["checksum"].as_str().unwrap().len(), 64);
    }

    let deadline = Instant::now() + Duration::from_secs(60);
    let status = loop {
        if let Some(s) = resumed.try_wait().unwrap() {
            break s;
        }
        assert!(Instant::now() < deadline, "resumed run did not finish");
        std::thread::sleep(Duration::from_millis(50));
    };
    let mut out = String::new();
    resumed.stdout.take().unwrap().read_to_string(&mut out).unwrap();
    assert!(status.success(), "{out}");
    assert!(out.contains("cycle 1: mIoU="), "{out}");

    let (code, s) = http(port, "GET", "/api/status", None).unwrap();
    assert_eq!(code, 200);
    assert_eq!(s["cycle"], 1);
    assert_eq!(s["queue"]["resolved"], ids.len());
    assert_eq!(s["trend"].as_array().unwrap().len(), 2);
}
