use proptest::prelude::*;
use simon_core::config::{Backprop, ModelConfig, TrainConfig};
use simon_core::model::SimOn;
use simon_core::train::{
    accumulate_full, accumulate_truncated, dataset_loss, focal_loss, synth_dataset, synth_dataset_generate, SynthConfig, Trainer,
};

fn small_trainer(seed: u64, lr: f64, backprop: Backprop) -> Trainer {
    let model = SimOn::init(ModelConfig::toy(6, 3, 2), seed).unwrap();
    let cfg = TrainConfig {
        lr_main: lr,
        lr_ctx: lr / 10.0,
        batch_size: 4,
        dropout: 0.0,
        weight_decay: 0.0,
        seed,
        backprop,
        ..TrainConfig::default()
    };
    Trainer::new(model, cfg).unwrap()
}

#[test]
fn one_small_step_lowers_the_loss() {
    for backprop in [Backprop::Truncated, Backprop::Full] {
        let mut decreased = 0;
        for seed in 0..20u64 {
            let data = synth_dataset(&SynthConfig::new(seed, 3, 6, 20, 0.3, 4)).unwrap();
            let seqs: Vec<_> = data.iter().map(|s| s.to_sequence()).collect();
            let mut tr = small_trainer(seed, 1e-4, backprop);
            let before = dataset_loss(&tr.model, &seqs, 0.25, 2.0).unwrap();
            let batch: Vec<_> = seqs.iter().collect();
            let reported = tr.train_step(&batch).unwrap();
            assert!((reported - before).abs() < 1e-12, "step loss is the pre-update loss");
            let after = dataset_loss(&tr.model, &seqs, 0.25, 2.0).unwrap();
            decreased += usize::from(after < before);
        }
        assert!(decreased >= 18, "{backprop:?}: loss fell on only {decreased}/20 seeds");
    }
}

#[test]
fn repeated_accumulation_doubles_gradients() {
    let mut model = SimOn::init(ModelConfig::toy(6, 3, 2), 1).unwrap();
    let seq = synth_dataset_generate(1, 3, 6, 8, 0.3).unwrap().to_sequence();
    let grads = |m: &SimOn| -> Vec<Vec<f64>> { m.params.leaves().iter().map(|p| p.grad.data().to_vec()).collect() };

    // one graph per pass: each buffer receives a single add
    model.params.zero_grad();
    accumulate_full(&mut model, &seq, 0.25, 2.0, 1.0, None).unwrap();
    let once = grads(&model);
    accumulate_full(&mut model, &seq, 0.25, 2.0, 1.0, None).unwrap();
    for (p, g) in grads(&model).iter().zip(&once) {
        for (a, b) in p.iter().zip(g) {
            assert_eq!(*a, 2.0 * b);
        }
    }

    // per-step graphs: the second pass adds in a different order
    model.params.zero_grad();
    accumulate_truncated(&mut model, &seq, 0.25, 2.0, 1.0, None).unwrap();
    let once = grads(&model);
    accumulate_truncated(&mut model, &seq, 0.25, 2.0, 1.0, None).unwrap();
    for (p, g) in grads(&model).iter().zip(&once) {
        for (a, b) in p.iter().zip(g) {
            assert!((a - 2.0 * b).abs() <= 1e-12 * b.abs().max(1e-300) + 1e-300, "{a} vs {b}");
        }
    }
}

#[test]
fn training_is_deterministic() {
    let data = synth_dataset(&SynthConfig::new(4, 3, 6, 15, 0.3, 3)).unwrap();
    let seqs: Vec<_> = data.iter().map(|s| s.to_sequence()).collect();
    let run = || {
        let mut tr = Trainer::new(
            SimOn::init(ModelConfig::toy(6, 3, 2), 4).unwrap(),
            TrainConfig {
                batch_size: 2,
                epochs: 2,
                lr_main: 1e-3,
                ..TrainConfig::default()
            },
        )
        .unwrap();
        let mut log = Vec::new();
        tr.fit(&seqs, |r| log.push(r.csv_line())).unwrap();
        (tr.model, log)
    };
    let (a, log_a) = run();
    let (b, log_b) = run();
    assert_eq!(a, b);
    assert_eq!(log_a, log_b);
    assert_eq!(log_a.len(), 4);
}

#[test]
fn diverging_training_reports_non_finite() {
    let data = synth_dataset(&SynthConfig::new(2, 3, 6, 10, 0.3, 1)).unwrap();
    let mut seq = data[0].to_sequence();
    seq.features[3][0] = f64::NAN;
    let mut tr = small_trainer(2, 1e-3, Backprop::Truncated);
    let err = tr.train_step(&[&seq]).unwrap_err();
    assert!(matches!(err, simon_core::Error::NonFinite(_)), "{err}");
}

proptest! {
    #[test]
    fn unfocused_balanced_focal_is_half_bce(
        pairs in proptest::collection::vec((1e-6f64..1.0 - 1e-6, proptest::bool::ANY), 1..8)
    ) {
        let c: Vec<f64> = pairs.iter().map(|p| p.0).collect();
        let y: Vec<f64> = pairs.iter().map(|p| f64::from(p.1 as u8)).collect();
        let bce: f64 = c.iter().zip(&y).map(|(c, y)| -(y * c.ln() + (1.0 - y) * (1.0 - c).ln())).sum();
        let fl = focal_loss(&c, &y, 0.5, 0.0).unwrap();
        prop_assert!((fl - 0.5 * bce).abs() < 1e-12);
        prop_assert!(focal_loss(&c, &y, 0.25, 2.0).unwrap() >= 0.0);
    }
}
