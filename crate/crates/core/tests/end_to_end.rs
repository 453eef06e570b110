use pseudosso::agent::{
    idp_script_step, run_login_flow, AgentEvent, Browser, BusMessage, Command, FlowError, FlowOptions, IdpScriptState, Initiator,
    MessageBus, ScriptInput, Target,
};
use pseudosso::group::{GroupElement, GroupId};
use pseudosso::harness::{enroll_users, Actor, Deployment, DeploymentConfig, Transport};
use pseudosso::http::Request;
use pseudosso::idp::Credential;
use serde_json::Value;

fn credential(i: usize) -> Credential {
    Credential { username: format!("user{i}"), password: format!("password-{i}") }
}

fn login(dep: &Deployment, browser: &mut Browser, user: usize, rp: usize, seed: u8) -> pseudosso::agent::LoginTranscript {
    let options = FlowOptions { seed: [seed; 32], ..FlowOptions::default() };
    run_login_flow(&dep.network, &dep.rp_origins[rp], browser, &credential(user), &options).expect("login succeeds")
}

#[test]
fn loopback_login_over_http() {
    let mut cfg = DeploymentConfig::new(GroupId::P256, 2, 1);
    cfg.transport = Transport::Loopback;
    let dep = Deployment::boot(cfg).unwrap();
    let users = enroll_users(&dep, 1).unwrap();
    let mut browser = Browser::new();

    let first = login(&dep, &mut browser, 0, 0, 1);
    dep.advance(181);
    let second = login(&dep, &mut browser, 0, 0, 2);
    let other = login(&dep, &mut browser, 0, 1, 3);

    assert_eq!(first.account, second.account);
    assert_ne!(first.account, other.account);
    assert_ne!(first.pid_rp, second.pid_rp);
    let expected = pseudosso::transform::direct_account(&pseudosso::UserId::new(users[0].uid).unwrap(), dep.rps[0].id_rp()).unwrap();
    assert_eq!(first.account, Some(expected));
    assert!(dep.rps[0].accounts().contains(&expected));

    let idp_paths = |t: &pseudosso::agent::LoginTranscript| t.idp_view.iter().map(|e| e.exchange.request.path.clone()).collect::<Vec<_>>();
    assert!(idp_paths(&first).contains(&"/login".to_string()));
    assert!(!idp_paths(&second).contains(&"/login".to_string()), "the IdP session is reused");
}

#[test]
fn views_hold_what_each_party_should_see() {
    let dep = Deployment::boot(DeploymentConfig::new(GroupId::P256, 1, 2)).unwrap();
    enroll_users(&dep, 1).unwrap();
    let t = login(&dep, &mut Browser::new(), 0, 0, 4);

    let idp_text = serde_json::to_string(&t.idp_view).unwrap();
    for needle in [t.pid_rp.unwrap().to_string(), t.pseudo_endpoint.clone().unwrap(), t.pid_u.unwrap().to_string()] {
        assert!(idp_text.contains(&needle), "IdP view lacks {needle}");
    }
    let id_rp = dep.rps[0].id_rp().point().to_string();
    assert!(!idp_text.contains(&id_rp));
    assert!(!idp_text.contains(dep.rps[0].endpoint()));
    assert!(!idp_text.contains(&t.trapdoor.unwrap().to_string()));

    let rp_text = serde_json::to_string(&t.rp_view).unwrap();
    for needle in [id_rp, t.trapdoor.unwrap().to_string(), t.pid_u.unwrap().to_string()] {
        assert!(rp_text.contains(&needle), "RP view lacks {needle}");
    }
    assert!(!rp_text.contains(&t.pseudo_endpoint.clone().unwrap()));

    for event in &t.agent_view {
        if let AgentEvent::Http { origin, initiator: Initiator::RpScript, .. } = event {
            assert_eq!(origin, &dep.rp_origins[0], "RP script contacted another origin");
        }
    }
    let timings = t.timings;
    assert!(timings.total_ms >= timings.prepare_request_ms + timings.token_generation_ms);
}

#[test]
fn wrong_password_halts_at_authentication() {
    let dep = Deployment::boot(DeploymentConfig::new(GroupId::Toy, 1, 3)).unwrap();
    enroll_users(&dep, 1).unwrap();
    let bad = Credential { username: "user0".into(), password: "nope".into() };
    let err = run_login_flow(&dep.network, &dep.rp_origins[0], &mut Browser::new(), &bad, &FlowOptions::default()).unwrap_err();
    match err {
        FlowError::Halted { step, .. } => assert_eq!(step, "4.2"),
        e => panic!("{e}"),
    }
}

#[test]
fn unknown_script_halts_at_download() {
    struct Bogus;
    impl pseudosso::http::Endpoint for Bogus {
        fn handle(&self, _: &Request) -> pseudosso::http::Response {
            pseudosso::http::Response::ok(serde_json::json!({"script": "something-else", "version": 1}))
        }
    }
    let mut network = pseudosso::agent::Network::new();
    network.add(std::sync::Arc::new(pseudosso::http::LocalChannel::new("https://bogus.example", std::sync::Arc::new(Bogus))));
    let err = run_login_flow(&network, "https://bogus.example", &mut Browser::new(), &credential(0), &FlowOptions::default()).unwrap_err();
    assert!(matches!(err, FlowError::Halted { ref step, .. } if step == "1"), "{err}");
}

/// A malicious page opens the IdP window itself and relays everything to an
/// honest RP. It sees `t` and the registration result, never the token.
#[test]
fn token_never_reaches_a_foreign_parent() {
    let dep = Deployment::boot(DeploymentConfig::new(GroupId::Toy, 1, 5)).unwrap();
    enroll_users(&dep, 1).unwrap();
    let rp = dep.rp_origins[0].clone();
    let idp_origin = dep.idp_origin.clone();
    let descriptor = dep.channel(&idp_origin).send(&Request::get("/script")).unwrap().body;
    let pk = pseudosso::PublicKey::from_pem(descriptor["public_key"].as_str().unwrap()).unwrap();

    let mut bus = MessageBus::new();
    let attacker = bus.open_window("https://attacker.example", None);
    let idp_window = bus.open_window(&idp_origin, Some(attacker));
    let mut state = IdpScriptState::new(&idp_origin, pk, GroupId::Toy, credential(0), [9; 32]);
    let mut script_browser = Browser::new();
    let mut relay = Actor::new(&dep.network);

    let mut queue = vec![ScriptInput::Trigger];
    let mut token_dropped = false;
    let mut steps = 0;
    while let Some(input) = queue.pop() {
        steps += 1;
        assert!(steps < 50);
        let (next, commands) = idp_script_step(&state, &input);
        state = next;
        for cmd in commands {
            match cmd {
                Command::PostMessage { target, content, origin } => {
                    assert_eq!(target, Target::Parent);
                    let delivered =
                        bus.post(BusMessage { source: idp_window, target: attacker, content: content.clone(), origin_restriction: origin });
                    if content.get("Token").is_some() {
                        assert!(!delivered);
                        token_dropped = true;
                        continue;
                    }
                    assert!(delivered);
                    if let Some(t) = content["t"].as_str() {
                        let body = relay.call(&rp, Request::post("/startNegotiation", serde_json::json!({ "t": t }))).body;
                        queue.push(ScriptInput::Message { origin: rp.clone(), content: serde_json::json!({ "Cert": body["Cert"] }) });
                    } else if content.get("RegistrationResult").is_some() {
                        let req = relay.submit_result(&rp, &content["RegistrationResult"]);
                        assert!(req.get("PID_RP").is_some(), "{req}");
                        queue.push(ScriptInput::Message { origin: rp.clone(), content: req });
                    }
                }
                Command::Xhr { ref_id, mut request } => {
                    request.cookie = script_browser.cookie(&idp_origin);
                    let resp = dep.channel(&idp_origin).send(&request).unwrap();
                    if let Some(c) = &resp.set_cookie {
                        script_browser.set_cookie(&idp_origin, c);
                    }
                    queue.push(ScriptInput::XhrResponse { ref_id, status: resp.status, body: resp.body });
                }
                other => panic!("unexpected {other:?}"),
            }
        }
    }
    assert!(token_dropped);
    let received: Vec<&Value> = bus.received(attacker).iter().map(|m| &m.content).collect();
    assert!(received.iter().any(|c| c.get("t").is_some()));
    assert!(received.iter().any(|c| c.get("RegistrationResult").is_some()));
    assert!(received.iter().all(|c| c.get("Token").is_none()));
    assert_eq!(bus.dropped().len(), 1);
    assert!(dep.rps[0].accounts().is_empty());
}

#[test]
fn plain_mode_exposes_rp_identity_to_idp() {
    let mut cfg = DeploymentConfig::new(GroupId::Toy, 1, 6);
    cfg.plain = true;
    let dep = Deployment::boot(cfg).unwrap();
    enroll_users(&dep, 1).unwrap();
    let t = login(&dep, &mut Browser::new(), 0, 0, 7);
    let id_rp: GroupElement = *dep.rps[0].id_rp().point();
    assert_eq!(t.pid_rp.map(|p| *p.point()), Some(id_rp));
    let paths: Vec<_> = t.idp_view.iter().map(|e| e.exchange.request.path.as_str()).collect();
    assert!(!paths.contains(&"/dynamicRegistration"));
    let authorize = t.idp_view.iter().find(|e| e.exchange.request.path == "/authorize").unwrap();
    assert_eq!(authorize.exchange.request.query.get("Enpt").map(String::as_str), Some(dep.rps[0].endpoint()));
}
