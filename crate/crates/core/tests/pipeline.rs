use hawkes_causal::metrics::{auc, type_accuracy};
use hawkes_causal::trainer::dataset_loss;
use hawkes_causal::*;

fn poisson(rates: &[f64]) -> MhpParams {
    let k = rates.len();
    MhpParams {
        mu: rates.to_vec(),
        alpha: vec![vec![0.0; k]; k],
        gamma: vec![vec![1.0; k]; k],
    }
}

/// Interval-sum Poisson NLL up to each sequence's last event.
fn poisson_nll(rates: &[f64], ds: &Dataset) -> f64 {
    let total: f64 = rates.iter().sum();
    ds.sequences()
        .iter()
        .map(|s| {
            let last = s.events().last().map_or(0.0, |e| e.t);
            total * last - s.events().iter().map(|e| rates[e.k].ln()).sum::<f64>()
        })
        .sum()
}

#[test]
fn unregularized_isahp_matches_poisson_likelihood() {
    let rates = [0.5, 1.0];
    let ds = simulate_mhp(&poisson(&rates), &SimConfig::new(240, 20.0, 4)).unwrap();
    let sp = split(&ds, [0.7, 0.15, 0.15], 4).unwrap();
    let (tr, va) = (ds.subset(&sp.train), ds.subset(&sp.validation));
    let cfg = IsahpConfig {
        omega1: 0.0,
        omega2: 0.0,
        ..IsahpConfig::default()
    };
    let mut m = IsahpModel::init(&tr, cfg, 0).unwrap();
    let tc = TrainConfig {
        learning_rate: 0.01,
        max_epochs: 80,
        ..TrainConfig::default()
    };
    train(&mut m, &tr, &va, &tc, |_| {}).unwrap();
    let model_nll: f64 = va.sequences().iter().map(|s| m.sequence_nll(s).unwrap()).sum();
    let oracle = poisson_nll(&rates, &va);
    let rel = (model_nll - oracle).abs() / oracle;
    assert!(rel < 0.02, "model {model_nll} oracle {oracle} rel {rel}");
    assert!((dataset_loss(&m, &va, 8).unwrap() - model_nll).abs() < 1e-6 * oracle);
}

#[test]
fn hexp_pipeline_recovers_zero_kernel_entry() {
    let p = MhpParams {
        mu: vec![0.3, 0.3],
        alpha: vec![vec![0.4, 0.0], vec![0.3, 0.2]],
        gamma: vec![vec![1.0; 2]; 2],
    };
    let ds = simulate_mhp(&p, &SimConfig::new(150, 100.0, 9)).unwrap();
    let sp = split(&ds, [0.7, 0.15, 0.15], 9).unwrap();
    let (tr, va, te) = (ds.subset(&sp.train), ds.subset(&sp.validation), ds.subset(&sp.test));
    let tc = TrainConfig {
        learning_rate: 0.02,
        max_epochs: 150,
        ..TrainConfig::default()
    };
    let (m, rep) = mhp::fit_hexp(&tr, &va, HexpConfig::default(), &tc, |_| {}).unwrap();
    assert!(rep.best_val_loss.is_finite());
    let truth = ds.ground_truth().unwrap();
    assert_eq!(auc(&mhp::hexp_causality(&m), truth, true).unwrap(), 1.0);
    let (acc, n) = type_accuracy(&m, &te).unwrap();
    assert_eq!(n, te.total_events());
    assert!((0.0..=1.0).contains(&acc));
}

#[test]
fn files_round_trip_through_disk() {
    let dir = tempfile::tempdir().unwrap();
    let ds = simulate_pgem(&simulate::PgemSpec::synergy(), &SimConfig::new(20, 10.0, 1)).unwrap();
    let path = dir.path().join("d.jsonl");
    save_jsonl(&ds, &path).unwrap();
    let back = load_jsonl(&path).unwrap();
    assert_eq!(back.sequences(), ds.sequences());
    assert_eq!(back.ground_truth(), ds.ground_truth());

    let m = IsahpModel::init(&ds, IsahpConfig::default(), 2).unwrap();
    let ar = attribute(&m, &ds).unwrap();
    let ap = dir.path().join("a.json");
    ar.write_json(&ap).unwrap();
    let ar2 = AttributionResult::read_json(&ap).unwrap();
    assert_eq!(ar2, ar);
    assert_eq!(aggregate(&ar2.sequences, ar2.num_types), ar.aggregate);
}
