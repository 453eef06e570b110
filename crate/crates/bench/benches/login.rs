use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};

use pseudosso::agent::{run_login_flow, Browser, FlowOptions};
use pseudosso::group::{GroupId, GroupParams};
use pseudosso::harness::{enroll_users, Deployment, DeploymentConfig};
use pseudosso::idp::Credential;
use pseudosso::testing::fixture_keypair;
use pseudosso::token::{issue_token, verify_token, Attributes, Validity};
use pseudosso::transform::{derive_account, derive_pid_rp, derive_pid_u, RpId, Trapdoor, UserId};
use pseudosso::RngHandle;

fn transformation(c: &mut Criterion) {
    let mut group = c.benchmark_group("transform");
    for id in [GroupId::P256, GroupId::Toy] {
        let p = GroupParams::new(id);
        let mut rng = RngHandle::seeded(1);
        let id_rp = RpId::new(p.mul_generator(&p.random_scalar(1, &mut rng)).unwrap()).unwrap();
        let uid = UserId::new(p.random_scalar(1, &mut rng)).unwrap();
        let t = Trapdoor::random(&p, &mut rng);
        let pid_rp = derive_pid_rp(&id_rp, &t).unwrap();
        let pid_u = derive_pid_u(&uid, &pid_rp).unwrap();
        group.bench_with_input(BenchmarkId::new("pid_rp", id), &id, |b, _| b.iter(|| derive_pid_rp(black_box(&id_rp), &t)));
        group.bench_with_input(BenchmarkId::new("pid_u", id), &id, |b, _| b.iter(|| derive_pid_u(black_box(&uid), &pid_rp)));
        group.bench_with_input(BenchmarkId::new("account", id), &id, |b, _| b.iter(|| derive_account(black_box(&pid_u), &t)));
        group.bench_with_input(BenchmarkId::new("trapdoor", id), &id, |b, _| b.iter(|| Trapdoor::random(&p, &mut rng)));
    }
    group.finish();
}

fn tokens(c: &mut Criterion) {
    let p = GroupParams::P256;
    let mut rng = RngHandle::seeded(2);
    let pid_rp = derive_pid_rp(&RpId::new(p.generator()).unwrap(), &Trapdoor::random(&p, &mut rng)).unwrap();
    let pid_u = derive_pid_u(&UserId::new(p.random_scalar(1, &mut rng)).unwrap(), &pid_rp).unwrap();
    let key = fixture_keypair();
    let token = issue_token(pid_rp, pid_u, "https://idp.example", Attributes::new(), 0, Validity::default(), key);
    let mut group = c.benchmark_group("token");
    group.bench_function("sign", |b| {
        b.iter(|| issue_token(pid_rp, pid_u, "https://idp.example", Attributes::new(), 0, Validity::default(), key))
    });
    group.bench_function("verify", |b| b.iter(|| verify_token(black_box(&token), key.public_key(), 1)));
    group.finish();
}

fn logins(c: &mut Criterion) {
    let mut group = c.benchmark_group("login");
    group.sample_size(30);
    for plain in [false, true] {
        let mut cfg = DeploymentConfig::new(GroupId::P256, 1, 3);
        cfg.plain = plain;
        let dep = Deployment::boot(cfg).unwrap();
        let user = &enroll_users(&dep, 1).unwrap()[0];
        let credential = Credential { username: user.name.clone(), password: user.password.clone() };
        let mut browser = Browser::new();
        let mut n = 0u64;
        let name = if plain { "plain" } else { "pseudonymous" };
        group.bench_function(name, |b| {
            b.iter(|| {
                n += 1;
                let options = FlowOptions { instance: n, seed: RngHandle::seeded(n).fork_seed(), ..FlowOptions::default() };
                let t = run_login_flow(&dep.network, &dep.rp_origins[0], &mut browser, &credential, &options).unwrap();
                dep.advance(1);
                t
            })
        });
    }
    group.finish();
}

criterion_group!(benches, transformation, tokens, logins);
criterion_main!(benches);
