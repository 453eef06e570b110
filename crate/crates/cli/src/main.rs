use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use pseudosso::group::GroupId;
use pseudosso::harness::{
    bench, check_account_consistency, check_idp_unlinkability, check_rp_linkage_structure, run_collusion, run_scenario, run_security_suite,
    BenchConfig, BenchReport, HarnessError, Report, ScenarioConfig, Transport,
};
use pseudosso::Validity;

mod serve;

#[derive(Parser)]
#[command(name = "pseudosso", version, about = "Pseudonymous SSO test harness and services")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run logins for every (user, RP) pair and check account consistency.
    Scenario(RunArgs),
    /// Run the adversarial cases and the colluding-users construction.
    Security(RunArgs),
    /// Check what the IdP and colluding RPs can learn from honest logins.
    Privacy(RunArgs),
    /// Time the login phases.
    Bench(RunArgs),
    /// Serve the IdP described by a TOML config.
    ServeIdp(serve::ServeArgs),
    /// Serve an RP described by a TOML config.
    ServeRp(serve::ServeArgs),
    /// Generate an RSA-2048 signing key for the IdP.
    Keygen(serve::KeygenArgs),
    /// Log in once against running services with the headless agent.
    Login(serve::LoginArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum OutFormat {
    Table,
    Json,
}

#[derive(Clone, Copy, ValueEnum)]
enum TransportArg {
    InProcess,
    Loopback,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    group: Option<GroupId>,
    #[arg(long)]
    users: Option<usize>,
    #[arg(long)]
    rps: Option<usize>,
    /// Logins per (user, RP) pair.
    #[arg(long)]
    logins: Option<usize>,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, default_value_t = 180)]
    validity_secs: u64,
    #[arg(long, value_enum, default_value_t = OutFormat::Table)]
    out: OutFormat,
    /// Skip identity transformation. For `bench`, also run it as a baseline.
    #[arg(long)]
    baseline_plain: bool,
    #[arg(long, value_enum)]
    transport: Option<TransportArg>,
    /// Write every transcript to this file as JSON lines.
    #[arg(long)]
    transcripts: Option<PathBuf>,
}

struct Defaults {
    group: GroupId,
    users: usize,
    rps: usize,
    logins: usize,
    transport: TransportArg,
}

impl RunArgs {
    fn scenario(&self, d: Defaults) -> Result<ScenarioConfig, HarnessError> {
        let mut cfg = ScenarioConfig::new(
            self.group.unwrap_or(d.group),
            self.users.unwrap_or(d.users),
            self.rps.unwrap_or(d.rps),
            self.logins.unwrap_or(d.logins),
            self.seed,
        );
        cfg.validity = Validity::new(self.validity_secs).map_err(|e| HarnessError::Config(e.to_string()))?;
        cfg.transport = match self.transport.unwrap_or(d.transport) {
            TransportArg::InProcess => Transport::InProcess,
            TransportArg::Loopback => Transport::Loopback,
        };
        cfg.plain = self.baseline_plain;
        Ok(cfg)
    }
}

fn print_reports(out: OutFormat, reports: &[Report], extra: serde_json::Value) {
    match out {
        OutFormat::Json => {
            let doc = json!({ "reports": reports, "details": extra, "passed": reports.iter().all(Report::passed) });
            println!("{}", serde_json::to_string_pretty(&doc).expect("serializable"));
        }
        OutFormat::Table => {
            for r in reports {
                println!("{}", r.summary());
                for v in r.violations.iter().take(10) {
                    println!("  violation: {v}");
                }
                if r.violations.len() > 10 {
                    println!("  ... {} more", r.violations.len() - 10);
                }
                for n in &r.notes {
                    println!("  note: {n}");
                }
            }
        }
    }
}

fn verdict(reports: &[Report]) -> ExitCode {
    if reports.iter().all(Report::passed) {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(1)
    }
}

fn scenario_cmd(args: &RunArgs) -> Result<ExitCode, HarnessError> {
    let cfg = args.scenario(Defaults { group: GroupId::Toy, users: 2, rps: 2, logins: 3, transport: TransportArg::InProcess })?;
    let ts = run_scenario(&cfg)?;
    if let Some(path) = &args.transcripts {
        ts.write_jsonl(path)?;
    }
    let reports = vec![check_account_consistency(&ts)];
    let outcomes: Vec<_> =
        ts.transcripts.iter().map(|t| json!({ "instance": t.instance, "user": t.user, "rp": t.rp_origin, "account": t.account })).collect();
    if matches!(args.out, OutFormat::Table) {
        println!("{} logins ({} users x {} RPs x {} rounds)", ts.transcripts.len(), cfg.users, cfg.rps, cfg.logins_per_pair);
    }
    print_reports(args.out, &reports, json!({ "logins": outcomes }));
    Ok(verdict(&reports))
}

fn security_cmd(args: &RunArgs) -> Result<ExitCode, HarnessError> {
    let suite = run_security_suite(args.seed)?;
    let collusion = run_collusion(args.seed)?;
    let mut suite_report = Report { name: "security suite".into(), checked: suite.cases.len(), ..Report::default() };
    for c in &suite.cases {
        if !c.passed() {
            suite_report.violations.push(format!("{}: expected {}, observed {}", c.name, c.expected, c.observed));
        }
    }
    let mut collusion_report = Report { name: "colluding users".into(), checked: collusion.cases.len(), ..Report::default() };
    for c in &collusion.cases {
        if !c.passed() {
            collusion_report.violations.push(format!("{c:?}"));
        }
    }
    if matches!(args.out, OutFormat::Table) {
        for c in &suite.cases {
            println!("{:<46} expected {:<22} observed {}", c.name, c.expected, c.observed);
        }
        for c in &collusion.cases {
            println!(
                "collusion: registered for {}, {} authenticated -> {:?}",
                c.registered_for,
                c.authenticated,
                c.account.map(|a| a.to_string())
            );
        }
    }
    let reports = vec![suite_report, collusion_report];
    print_reports(args.out, &reports, json!({ "cases": suite.cases, "collusion": collusion }));
    Ok(verdict(&reports))
}

fn privacy_cmd(args: &RunArgs) -> Result<ExitCode, HarnessError> {
    let cfg = args.scenario(Defaults { group: GroupId::Toy, users: 5, rps: 4, logins: 500, transport: TransportArg::InProcess })?;
    let ts = run_scenario(&cfg)?;
    if let Some(path) = &args.transcripts {
        ts.write_jsonl(path)?;
    }
    let unlinkability = check_idp_unlinkability(&ts);
    let mut reports = vec![unlinkability.to_report(), check_account_consistency(&ts)];
    if ts.group == GroupId::P256 {
        reports.push(check_rp_linkage_structure(&ts));
    } else if matches!(args.out, OutFormat::Table) {
        println!("RP linkage scan skipped: toy-group values collide by chance; use --group p256");
    }
    print_reports(args.out, &reports, json!({ "unlinkability": unlinkability }));
    Ok(verdict(&reports))
}

fn bench_cmd(args: &RunArgs) -> Result<ExitCode, HarnessError> {
    let mut cfg = args.scenario(Defaults { group: GroupId::P256, users: 10, rps: 4, logins: 25, transport: TransportArg::Loopback })?;
    cfg.plain = false;
    let mut runs: Vec<BenchReport> = vec![bench(&BenchConfig { scenario: cfg.clone(), micro_iterations: 2000 })?];
    if args.baseline_plain {
        cfg.plain = true;
        runs.push(bench(&BenchConfig { scenario: cfg, micro_iterations: 2000 })?);
    }
    match args.out {
        OutFormat::Json => println!("{}", serde_json::to_string_pretty(&runs).expect("serializable")),
        OutFormat::Table => {
            for r in &runs {
                println!("{}", r.to_table());
            }
        }
    }
    let sane = runs[0].derive_pid_u_us < runs[0].token_signing_us;
    Ok(if sane { ExitCode::SUCCESS } else { ExitCode::from(1) })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Scenario(a) => scenario_cmd(a),
        Command::Security(a) => security_cmd(a),
        Command::Privacy(a) => privacy_cmd(a),
        Command::Bench(a) => bench_cmd(a),
        Command::ServeIdp(a) => serve::serve_idp(a),
        Command::ServeRp(a) => serve::serve_rp(a),
        Command::Keygen(a) => serve::keygen(a),
        Command::Login(a) => serve::login(a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
