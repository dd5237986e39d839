//! Scratch harness for sizing desk-scale runs: trains one defense on the
//! synthetic digit set and prints the headline metrics.
//!
//! Usage: calibrate <mode> <seed> [rounds]
//!   big modes  (5000 samples, 20 clients, IID):      plain | pgd_at | dbfat
//!   small modes (2000 samples, 10 clients, shards_2): plain2 | pgd_at2 |
//!       dbfat2 | dbfat2-nw (uniform weights) | dbfat2-nb (beta = 0)

use std::time::Instant;

use fedadv::attacks::AttackConfig;
use fedadv::data::{make_synthetic_digits, partition, PartitionKind, PartitionSpec};
use fedadv::eval::{accuracy_clean, accuracy_robust};
use fedadv::federation::{run_round, FedConfig, ServerState};
use fedadv::losses::{DefenseConfig, DefenseKind};
use fedadv::nn::NetworkSpec;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let mode = args.get(1).map(String::as_str).unwrap_or("plain");
    let seed: u64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(0);
    let small = mode.ends_with('2') || mode.contains("2-");
    let beta: f64 = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(1.5);
    let rounds: u64 = args
        .get(3)
        .and_then(|s| s.parse().ok())
        .unwrap_or(if small { 10 } else { 30 });

    let (n_train, n_test, clients, per_round, epochs, hidden): (usize, usize, usize, usize, usize, Vec<usize>) =
        if small {
            (2000, 2000, 10, 2, 8, vec![64])
        } else {
            (5000, 1000, 20, 10, 5, vec![128, 64])
        };

    let full = make_synthetic_digits(n_train + n_test, 1234).unwrap();
    let (train, test_full) = full.split_at(n_train);
    let test = test_full.subset(&(0..n_test).collect::<Vec<_>>());

    let part = PartitionSpec {
        kind: if small {
            PartitionKind::Shards { q: 2 }
        } else {
            PartitionKind::Iid
        },
        clients,
        seed,
    };
    let shards = partition(&train, &part).unwrap();

    let spec = NetworkSpec::mlp(784, &hidden, 10).unwrap();
    let train_attack = if small {
        AttackConfig::pgd(0.3, 0.1, 5)
    } else {
        AttackConfig::pgd(0.3, 0.05, 10)
    };
    let base = mode.trim_end_matches("2").trim_end_matches("2-nw").trim_end_matches("2-nb");
    let kind = match base {
        "plain" => DefenseKind::Plain,
        "pgd_at" => DefenseKind::PgdAt,
        "dbfat" => DefenseKind::Dbfat,
        other => panic!("unknown mode {other}"),
    };
    let defense = DefenseConfig {
        kind,
        beta: if mode.ends_with("-nb") { 0.0 } else { beta },
        attack: train_attack,
        disable_reweighting: mode.ends_with("-nw"),
    };
    let cfg = FedConfig {
        clients,
        clients_per_round: per_round,
        local_epochs: epochs,
        batch_size: if small { 16 } else { 32 },
        lr: if small { 0.1 } else { 0.05 },
        rounds,
        defense,
        prox_mu: 0.0,
        seed,
    };

    let started = Instant::now();
    let mut server = ServerState::new(&spec, cfg.seed);
    for r in 0..cfg.rounds {
        let (next, report) = run_round(server, &spec, &train, &shards, &cfg).unwrap();
        server = next;
        if r % 5 == 0 || r == cfg.rounds - 1 {
            let a_cln = accuracy_clean(&spec, &server.global_params, &test).unwrap();
            println!(
                "round {r}: a_cln={a_cln:.4} mean_loss={:.4} [{:?}]",
                report.client_losses.iter().map(|(_, l)| l).sum::<f64>()
                    / report.client_losses.len() as f64,
                started.elapsed()
            );
        }
    }

    let attacks = vec![
        ("fgsm".to_string(), AttackConfig::fgsm(0.3)),
        ("mim".to_string(), AttackConfig::mim(0.3, 0.03, 20, 1.0)),
        ("pgd".to_string(), AttackConfig::pgd(0.3, 0.025, 20)),
        ("pgd40".to_string(), AttackConfig::pgd(0.3, 0.01, 40)),
    ];
    let a_cln = accuracy_clean(&spec, &server.global_params, &test).unwrap();
    let (per, avg3) = accuracy_robust(&spec, &server.global_params, &test, &attacks[..3], 5).unwrap();
    let (per40, _) = accuracy_robust(&spec, &server.global_params, &test, &attacks[3..], 5).unwrap();
    println!("RESULT mode={mode} seed={seed} rounds={rounds} beta={beta} a_cln={a_cln:.4} a_rob_avg3={avg3:.4} per={per:?} pgd40={:.4} wall={:?}",
        per40[0].1, started.elapsed());
}
