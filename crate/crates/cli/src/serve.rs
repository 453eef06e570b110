//! Long-running services and one-shot live logins.

use std::collections::BTreeMap;
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::Args;
use serde::Deserialize;

use pseudosso::agent::{run_login_flow, Browser, FlowOptions, Network};
use pseudosso::clock::SystemClock;
use pseudosso::group::GroupId;
use pseudosso::harness::HarnessError;
use pseudosso::http::{serve, Channel, HttpChannel, Request, ServerHandle};
use pseudosso::idp::{Credential, IdpConfig, IdpError, IdpService};
use pseudosso::rp::{AccountStore, RpConfig, RpService};
use pseudosso::{PublicKey, RngHandle, RpCertificate, SigningKeyPair, Validity};

#[derive(Args)]
pub struct ServeArgs {
    /// TOML configuration file.
    #[arg(long)]
    config: PathBuf,
}

#[derive(Args)]
pub struct KeygenArgs {
    /// Private key output (PKCS#8 PEM).
    #[arg(long)]
    out: PathBuf,
    /// Public key output (SPKI PEM).
    #[arg(long)]
    public: Option<PathBuf>,
}

#[derive(Args)]
pub struct LoginArgs {
    /// RP origin, e.g. http://127.0.0.1:8001
    #[arg(long)]
    rp: String,
    #[arg(long)]
    username: String,
    #[arg(long)]
    password: String,
    #[arg(long)]
    seed: Option<u64>,
    /// Append the transcript to this file as one JSON line.
    #[arg(long)]
    transcript: Option<PathBuf>,
}

fn fail(msg: impl std::fmt::Display) -> HarnessError {
    HarnessError::Config(msg.to_string())
}

fn read(path: &Path) -> Result<String, HarnessError> {
    std::fs::read_to_string(path).map_err(|e| fail(format!("{}: {e}", path.display())))
}

fn parse_config<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, HarnessError> {
    toml::from_str(&read(path)?).map_err(|e| fail(format!("{}: {e}", path.display())))
}

fn default_validity() -> u64 {
    Validity::default().secs()
}

#[derive(Deserialize)]
struct UserEntry {
    username: String,
    password: String,
    #[serde(default)]
    attributes: BTreeMap<String, String>,
}

#[derive(Deserialize)]
struct RpEntry {
    endpoint: String,
    /// Where the signed certificate is written for the RP to load.
    cert_out: PathBuf,
    #[serde(default)]
    supplementary: BTreeMap<String, String>,
}

#[derive(Deserialize)]
struct IdpFile {
    listen: String,
    issuer: Option<String>,
    group: GroupId,
    key: PathBuf,
    #[serde(default = "default_validity")]
    validity_secs: u64,
    session_ttl_secs: Option<u64>,
    /// Users and certificates persist here across restarts.
    snapshot: Option<PathBuf>,
    #[serde(default)]
    plain_mode: bool,
    #[serde(default)]
    users: Vec<UserEntry>,
    #[serde(default)]
    rps: Vec<RpEntry>,
}

#[derive(Deserialize)]
struct RpFile {
    listen: String,
    endpoint: String,
    idp_script_url: String,
    group: GroupId,
    cert: PathBuf,
    idp_public_key: PathBuf,
    accounts: Option<PathBuf>,
    #[serde(default)]
    plain_mode: bool,
}

fn run_forever(handle: ServerHandle) -> ! {
    println!("listening on {}", handle.origin());
    loop {
        std::thread::park();
    }
}

fn bind(addr: &str) -> Result<TcpListener, HarnessError> {
    TcpListener::bind(addr).map_err(|e| fail(format!("bind {addr}: {e}")))
}

pub fn serve_idp(args: &ServeArgs) -> Result<ExitCode, HarnessError> {
    let file: IdpFile = parse_config(&args.config)?;
    let key = SigningKeyPair::from_pem(&read(&file.key)?).map_err(fail)?;
    let mut config = IdpConfig::new(file.issuer.as_deref().unwrap_or(&format!("http://{}", file.listen)), file.group);
    config.validity = Validity::new(file.validity_secs).map_err(fail)?;
    config.plain_mode = file.plain_mode;
    if let Some(ttl) = file.session_ttl_secs {
        config.session_ttl_secs = ttl;
    }
    let idp = Arc::new(IdpService::new(config, Arc::new(key), Arc::new(SystemClock), RngHandle::os()));
    if let Some(path) = file.snapshot.as_deref().filter(|p| p.exists()) {
        idp.load_snapshot(path).map_err(fail)?;
    }
    for u in &file.users {
        match idp.register_user(&u.username, &u.password, u.attributes.clone()) {
            Ok(_) | Err(IdpError::Duplicate(_)) => {}
            Err(e) => return Err(fail(e)),
        }
    }
    for rp in &file.rps {
        let cert = match idp.register_rp(&rp.endpoint, rp.supplementary.clone()) {
            Ok(c) => c,
            Err(IdpError::Duplicate(_)) => {
                idp.certificates().into_iter().find(|c| c.content.endpoint == rp.endpoint).ok_or_else(|| fail("lost certificate"))?
            }
            Err(e) => return Err(fail(e)),
        };
        std::fs::write(&rp.cert_out, serde_json::to_string_pretty(&cert.to_json()).expect("serializable"))?;
    }
    if let Some(path) = &file.snapshot {
        idp.save_snapshot(path).map_err(fail)?;
    }
    let handle = serve(bind(&file.listen)?, idp)?;
    run_forever(handle)
}

pub fn serve_rp(args: &ServeArgs) -> Result<ExitCode, HarnessError> {
    let file: RpFile = parse_config(&args.config)?;
    let cert_json: serde_json::Value = serde_json::from_str(&read(&file.cert)?).map_err(fail)?;
    let cert = RpCertificate::from_json(&cert_json).map_err(fail)?;
    let idp_pk = PublicKey::from_pem(&read(&file.idp_public_key)?).map_err(fail)?;
    let accounts = match &file.accounts {
        Some(p) => AccountStore::open(p)?,
        None => AccountStore::in_memory(),
    };
    let config = RpConfig { endpoint: file.endpoint, idp_script_url: file.idp_script_url, group: file.group, plain_mode: file.plain_mode };
    let rp = RpService::new(config, cert, idp_pk, Arc::new(SystemClock), RngHandle::os(), accounts).map_err(fail)?;
    let handle = serve(bind(&file.listen)?, Arc::new(rp))?;
    run_forever(handle)
}

pub fn keygen(args: &KeygenArgs) -> Result<ExitCode, HarnessError> {
    let key = SigningKeyPair::generate(&mut RngHandle::os()).map_err(fail)?;
    std::fs::write(&args.out, key.to_pem())?;
    if let Some(p) = &args.public {
        std::fs::write(p, key.public_key().to_pem())?;
    }
    Ok(ExitCode::SUCCESS)
}

pub fn login(args: &LoginArgs) -> Result<ExitCode, HarnessError> {
    let rp: Arc<dyn Channel> = Arc::new(HttpChannel::new(&args.rp).map_err(fail)?);
    let descriptor = rp.send(&Request::get("/script")).map_err(fail)?.body;
    let idp_origin = descriptor["idp_origin"].as_str().ok_or_else(|| fail("RP script names no IdP"))?;
    let mut network = Network::new();
    network.add(rp.clone());
    network.add(Arc::new(HttpChannel::new(idp_origin).map_err(fail)?));
    let seed = match args.seed {
        Some(s) => RngHandle::seeded(s).fork_seed(),
        None => RngHandle::os().fork_seed(),
    };
    let credential = Credential { username: args.username.clone(), password: args.password.clone() };
    let options = FlowOptions { seed, ..FlowOptions::default() };
    let outcome = run_login_flow(&network, rp.origin(), &mut Browser::new(), &credential, &options);
    let transcript = match &outcome {
        Ok(t) => Some(t),
        Err(e) => e.transcript(),
    };
    if let (Some(path), Some(t)) = (&args.transcript, transcript) {
        use std::io::Write;
        let mut f = std::fs::OpenOptions::new().create(true).append(true).open(path)?;
        writeln!(f, "{}", serde_json::to_string(t).expect("serializable"))?;
    }
    match outcome {
        Ok(t) => {
            println!("logged in; account {}", t.account.map(|a| a.to_string()).unwrap_or_default());
            Ok(ExitCode::SUCCESS)
        }
        Err(e) => {
            println!("login failed: {e}");
            Ok(ExitCode::from(1))
        }
    }
}
