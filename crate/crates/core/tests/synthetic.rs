use std::time::Instant;

use clustr::attacks::{evaluate_robust_accuracy, AttackConfig, Norm, Objective};
use clustr::datasets::{gen_circles, gen_moons, split, LabeledDataset};
use clustr::train::{train, ArchConfig, Pipeline, TrainConfig};

fn data(name: &str, seed: u64) -> (LabeledDataset, LabeledDataset) {
    let full = match name {
        "moons" => gen_moons(1000, 0.1, seed).unwrap(),
        _ => gen_circles(1000, 0.5, 0.05, seed).unwrap(),
    };
    split(&full, 0.3, seed).unwrap()
}

fn config(p: Pipeline, seed: u64) -> TrainConfig {
    let mut cfg = TrainConfig::new(p);
    cfg.samples_per_cluster = 16;
    cfg.seed = seed;
    cfg
}

#[test]
fn nominal_reaches_99_percent_on_moons() {
    for seed in 0..5 {
        let (tr, te) = data("moons", seed);
        let mut cfg = config(Pipeline::Nominal, seed);
        cfg.warm_epochs = 200;
        let acc = train(&tr, &ArchConfig::default(), &cfg).unwrap().accuracy(&te).unwrap();
        assert!(acc >= 0.99, "seed {seed}: test accuracy {acc}");
    }
}

#[test]
fn full_clustr_run_is_fast() {
    let t = Instant::now();
    let (tr, te) = data("moons", 1);
    let a = train(&tr, &ArchConfig::default(), &config(Pipeline::Clustr, 1)).unwrap();
    a.accuracy(&te).unwrap();
    assert!(t.elapsed().as_secs() < 300);
}

#[test]
fn qtrades_is_at_least_as_robust_on_average() {
    let arch = ArchConfig::default();
    for name in ["moons", "circles"] {
        let (mut plain, mut adv) = (0.0, 0.0);
        for seed in 0..5 {
            let (tr, te) = data(name, seed);
            let atk = AttackConfig {
                norm: Norm::Linf,
                epsilon: 0.05,
                eta: 0.0125,
                iterations: 20,
                restarts: 3,
                objective: Objective::CeVsLabel,
                seed,
            };
            for (p, acc) in [(Pipeline::Clustr, &mut plain), (Pipeline::ClustrQtrades, &mut adv)] {
                let a = train(&tr, &arch, &config(p, seed)).unwrap();
                *acc += evaluate_robust_accuracy(&a.net, a.clusters().unwrap(), &a.magnet, &te, &atk).unwrap().accuracy / 5.0;
            }
        }
        eprintln!("{name}: robust accuracy ClusTR {plain:.4}, ClusTR+QTRADES {adv:.4}");
        assert!(adv >= plain, "{name}: {adv} < {plain}");
    }
}
