//! Parallel vs sequential throughput on the two fan-out hot spots: local
//! client training within a round, and batch-chunked robust evaluation.
//!
//! Run with `cargo bench -p fedadv`. Build with
//! `--no-default-features` to confirm the sequential fallback compiles; the
//! comparison itself needs the default `parallel` feature.

use criterion::{criterion_group, criterion_main, Criterion};

use fedadv::attacks::{attack, AttackConfig};
use fedadv::data::{make_synthetic_digits, partition_iid, ClientShard, Dataset};
use fedadv::exec;
use fedadv::federation::{local_train, FedConfig};
use fedadv::losses::{DefenseConfig, DefenseKind};
use fedadv::nn::{forward, NetworkSpec, ParamSet};
use fedadv::rng::stream;
use fedadv::tensor::argmax;

struct Fixture {
    spec: NetworkSpec,
    params: ParamSet,
    dataset: Dataset,
    shards: Vec<ClientShard>,
    cfg: FedConfig,
}

fn fixture() -> Fixture {
    let dataset = make_synthetic_digits(640, 42).unwrap();
    let shards = partition_iid(&dataset, 8, 42).unwrap();
    let spec = NetworkSpec::mlp(784, &[64], 10).unwrap();
    let params = spec.init_params(&mut stream(42, "init", &[]));
    let cfg = FedConfig {
        clients: 8,
        clients_per_round: 8,
        local_epochs: 1,
        batch_size: 32,
        lr: 0.05,
        rounds: 1,
        defense: DefenseConfig {
            kind: DefenseKind::PgdAt,
            beta: 0.0,
            attack: AttackConfig::pgd(0.3, 0.1, 4),
            disable_reweighting: false,
        },
        prox_mu: 0.0,
        seed: 42,
    };
    Fixture {
        spec,
        params,
        dataset,
        shards,
        cfg,
    }
}

fn bench_round_fanout(c: &mut Criterion) {
    let fx = fixture();
    let ids: Vec<usize> = (0..fx.shards.len()).collect();
    let train_one = |&cid: &usize| {
        local_train(
            &fx.spec,
            &fx.dataset,
            &fx.shards[cid],
            &fx.params,
            &fx.cfg,
            0,
        )
        .unwrap()
        .n_k
    };

    let mut group = c.benchmark_group("round_fanout");
    group.sample_size(10);
    group.bench_function("sequential", |b| {
        b.iter(|| exec::map_seq(&ids, train_one).iter().sum::<usize>())
    });
    group.bench_function("parallel", |b| {
        b.iter(|| exec::map(&ids, train_one).iter().sum::<usize>())
    });
    group.finish();
}

fn bench_robust_eval(c: &mut Criterion) {
    let fx = fixture();
    let atk = AttackConfig::pgd(0.3, 0.03, 10);
    let chunks: Vec<Vec<usize>> = (0..fx.dataset.len())
        .collect::<Vec<_>>()
        .chunks(64)
        .map(<[usize]>::to_vec)
        .collect();
    let eval_chunk = |idx: &Vec<usize>| {
        let (x, y) = fx.dataset.batch(idx);
        let mut rng = stream(7, "bench-attack", &[idx[0] as u64]);
        let x_adv = attack(&fx.spec, &fx.params, &x, &y, &atk, &mut rng).unwrap();
        let (logits, _) = forward(&fx.spec, &fx.params, &x_adv).unwrap();
        (0..x.rows()).filter(|&i| argmax(logits.row(i)) == y[i]).count()
    };

    let mut group = c.benchmark_group("robust_eval");
    group.sample_size(10);
    group.bench_function("sequential", |b| {
        b.iter(|| exec::map_seq(&chunks, eval_chunk).iter().sum::<usize>())
    });
    group.bench_function("parallel", |b| {
        b.iter(|| exec::map(&chunks, eval_chunk).iter().sum::<usize>())
    });
    group.finish();
}

criterion_group!(benches, bench_round_fanout, bench_robust_eval);
criterion_main!(benches);
