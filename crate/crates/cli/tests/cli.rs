use std::net::{TcpListener, TcpStream};
use std::path::Path;
use std::process::{Child, Command, Output, Stdio};
use std::time::{Duration, Instant};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_pseudosso"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn free_port() -> u16 {
    TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port()
}

struct Service(Child);

impl Drop for Service {
    fn drop(&mut self) {
        let _ = self.0.kill();
        let _ = self.0.wait();
    }
}

fn wait_for(port: u16, extra: Option<&Path>) {
    let deadline = Instant::now() + Duration::from_secs(30);
    while Instant::now() < deadline {
        if TcpStream::connect(("127.0.0.1", port)).is_ok() && extra.map(Path::exists).unwrap_or(true) {
            return;
        }
        std::thread::sleep(Duration::from_millis(50));
    }
    panic!("port {port} never opened");
}

#[test]
fn scenario_emits_json_and_succeeds() {
    let out = run(&["scenario", "--group", "toy", "--users", "2", "--rps", "2", "--logins", "2", "--out", "json"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let doc: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(doc["passed"], true);
    assert_eq!(doc["details"]["logins"].as_array().unwrap().len(), 8);
}

#[test]
fn scenario_writes_transcripts() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("t.jsonl");
    let out = run(&["scenario", "--users", "1", "--rps", "1", "--logins", "3", "--transcripts", path.to_str().unwrap()]);
    assert!(out.status.success());
    let text = std::fs::read_to_string(path).unwrap();
    assert_eq!(text.lines().count(), 3);
    for line in text.lines() {
        let t: serde_json::Value = serde_json::from_str(line).unwrap();
        assert_eq!(t["outcome"]["status"], "LoginSuccess");
    }
}

#[test]
fn security_suite_passes() {
    let out = run(&["security", "--out", "json"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stdout));
    let doc: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(doc["details"]["cases"].as_array().unwrap().len(), 8);
}

#[test]
fn privacy_violation_sets_exit_code() {
    let out = run(&["privacy", "--users", "1", "--rps", "1", "--logins", "1200"]);
    assert_eq!(out.status.code(), Some(1), "1200 toy logins must repeat a PID_RP");
    let ok = run(&["privacy", "--group", "p256", "--users", "1", "--rps", "2", "--logins", "3"]);
    assert!(ok.status.success(), "{}", String::from_utf8_lossy(&ok.stdout));
}

#[test]
fn bad_flags_are_rejected() {
    assert!(!run(&["scenario", "--group", "p384"]).status.success());
    assert_eq!(run(&["scenario", "--validity-secs", "0"]).status.code(), Some(2));
}

#[test]
fn live_services_over_http() {
    let dir = tempfile::tempdir().unwrap();
    let d = |name: &str| dir.path().join(name).to_str().unwrap().to_string();
    let out = run(&["keygen", "--out", &d("idp.pem"), "--public", &d("idp.pub.pem")]);
    assert!(out.status.success());

    let (idp_port, rp_port) = (free_port(), free_port());
    let idp_toml = format!(
        r#"listen = "127.0.0.1:{idp_port}"
group = "p256"
key = '{key}'
snapshot = '{snap}'

[[users]]
username = "alice"
password = "wonderland"
attributes = {{ email = "alice@example.com" }}

[[rps]]
endpoint = "http://127.0.0.1:{rp_port}/uploadToken"
cert_out = '{cert}'
"#,
        key = d("idp.pem"),
        snap = d("idp-state.json"),
        cert = d("rp.cert.json"),
    );
    std::fs::write(d("idp.toml"), idp_toml).unwrap();
    let rp_toml = format!(
        r#"listen = "127.0.0.1:{rp_port}"
endpoint = "http://127.0.0.1:{rp_port}/uploadToken"
idp_script_url = "http://127.0.0.1:{idp_port}/script"
group = "p256"
cert = '{cert}'
idp_public_key = '{pk}'
accounts = '{accounts}'
"#,
        cert = d("rp.cert.json"),
        pk = d("idp.pub.pem"),
        accounts = d("accounts.jsonl"),
    );
    std::fs::write(d("rp.toml"), rp_toml).unwrap();

    let _idp = Service(bin().args(["serve-idp", "--config", &d("idp.toml")]).stdout(Stdio::null()).spawn().unwrap());
    wait_for(idp_port, Some(&dir.path().join("rp.cert.json")));
    let _rp = Service(bin().args(["serve-rp", "--config", &d("rp.toml")]).stdout(Stdio::null()).spawn().unwrap());
    wait_for(rp_port, None);

    let rp = format!("http://127.0.0.1:{rp_port}");
    let login =
        |password: &str| run(&["login", "--rp", &rp, "--username", "alice", "--password", password, "--transcript", &d("login.jsonl")]);
    let first = login("wonderland");
    assert!(first.status.success(), "{}", String::from_utf8_lossy(&first.stdout));
    let second = login("wonderland");
    assert_eq!(first.stdout, second.stdout, "same account both times");
    assert_eq!(login("wrong").status.code(), Some(1));

    let accounts = std::fs::read_to_string(d("accounts.jsonl")).unwrap();
    assert_eq!(accounts.lines().count(), 1);
    assert_eq!(std::fs::read_to_string(d("login.jsonl")).unwrap().lines().count(), 3);
}
