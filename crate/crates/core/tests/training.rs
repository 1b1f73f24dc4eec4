mod common;

use proptest::prelude::*;
use rand::Rng;
use xlmp::data::{encode_corpus, generate_synthetic_corpus, CorpusConfig, EncodedLanguage, Vocabulary};
use xlmp::encoder::{EncoderConfig, EncoderModel};
use xlmp::numerics::{ParamSet, Tensor};
use xlmp::objectives::InfoNceConfig;
use xlmp::rng::substream;
use xlmp::training::*;
use xlmp::Error;

fn corpus(n: usize) -> (Vocabulary, Vec<EncodedLanguage>) {
    let specs = CorpusConfig::uniform(2, 0.5).build(2).unwrap();
    let text = generate_synthetic_corpus(&specs, n, 2).unwrap();
    let vocab = Vocabulary::from_lines(text.iter().flat_map(|l| l.sentences.iter().map(String::as_str)), 1).unwrap();
    let enc = encode_corpus(&text, &vocab, 30);
    (vocab, enc)
}

fn small(vocab: usize) -> EncoderConfig {
    EncoderConfig { max_seq_len: 40, ..common::micro(vocab) }
}

fn cfg(steps: u64) -> TrainConfig {
    TrainConfig { total_steps: steps, warmup_steps: 2, batch_size: 4, learning_rate: 1e-2, seed: 5, ..TrainConfig::default() }
}

#[test]
fn adam_matches_hand_computed_updates() {
    let c = TrainConfig { learning_rate: 0.05, warmup_steps: 0, total_steps: 1000, weight_decay: 0.1, ..TrainConfig::default() };
    let mut rng = substream(30, "adam", 0);
    let init: Vec<f64> = (0..7).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mut params = ParamSet::<f64>::new();
    params.insert("w", Tensor::new(vec![7], init.clone()).unwrap());
    let mut state = AdamState::zeros_like(&params);
    let mut oracle: Vec<(f64, common::ScalarAdam)> = init.iter().map(|&p| (p, common::ScalarAdam { m: 0.0, v: 0.0 })).collect();
    for step in 1..=20u64 {
        let grads: Vec<f64> = (0..7).map(|_| rng.random_range(-2.0..2.0)).collect();
        params.get_mut("w").unwrap().set_grad(grads.clone()).unwrap();
        let lr = adam_step(&mut params, &mut state, &c, step).unwrap();
        assert_eq!(lr, 0.05 * lr_multiplier(step, 0, 1000));
        for ((p, s), g) in oracle.iter_mut().zip(&grads) {
            *p = s.step(*p, *g, step, lr, c.beta1, c.beta2, c.epsilon, c.weight_decay);
        }
        for (got, (want, _)) in params.get("w").unwrap().data().iter().zip(&oracle) {
            assert!((got - want).abs() < 1e-12, "step {step}: {got} vs {want}");
        }
    }
}

#[test]
fn parameters_without_gradients_are_untouched() {
    let mut params = ParamSet::<f64>::new();
    params.insert("a", Tensor::full(vec![2], 1.0));
    params.insert("b", Tensor::full(vec![2], 1.0));
    params.get_mut("a").unwrap().set_grad(vec![1.0, 1.0]).unwrap();
    let mut state = AdamState::zeros_like(&params);
    adam_step(&mut params, &mut state, &cfg(10), 1).unwrap();
    assert_eq!(params.get("b").unwrap().data(), &[1.0, 1.0]);
    assert_ne!(params.get("a").unwrap().data(), &[1.0, 1.0]);
}

#[test]
fn non_finite_gradient_aborts_before_any_update() {
    let mut params = ParamSet::<f64>::new();
    params.insert("a", Tensor::full(vec![2], 1.0));
    params.insert("b", Tensor::full(vec![3], 1.0));
    params.get_mut("a").unwrap().set_grad(vec![0.5, 0.5]).unwrap();
    params.get_mut("b").unwrap().set_grad(vec![0.0, f64::NAN, 0.0]).unwrap();
    let before = params.clone();
    let mut state = AdamState::zeros_like(&params);
    let err = adam_step(&mut params, &mut state, &cfg(10), 3).unwrap_err();
    assert!(matches!(err, Error::NonFiniteGradient { ref param, index: 1, step: 3 } if param == "b"));
    assert_eq!(params.get("a").unwrap().data(), before.get("a").unwrap().data());
}

proptest! {
    #[test]
    fn schedule_stays_in_unit_interval(step in 0u64..2000, warmup in 0u64..500, extra in 0u64..1500) {
        let total = warmup + extra;
        let m = lr_multiplier(step, warmup, total);
        prop_assert!((0.0..=1.0).contains(&m));
        if warmup > 0 && step <= warmup {
            prop_assert!((m - (step as f64 / warmup as f64).min(1.0)).abs() < 1e-12 || total == warmup);
        }
    }
}

#[test]
fn training_is_deterministic() {
    let (vocab, enc) = corpus(20);
    let run = || {
        let model = EncoderModel::new(small(vocab.len()), 1).unwrap();
        let (m, metrics) = pretrain(model, &enc, &cfg(6)).unwrap();
        (m.params, metrics.iter().map(|x| x.loss.to_bits()).collect::<Vec<_>>())
    };
    assert_eq!(run(), run());
}

#[test]
fn checkpoint_round_trip_is_bitwise() {
    let (vocab, enc) = corpus(10);
    let model = EncoderModel::new(small(vocab.len()), 1).unwrap();
    let mut t = Trainer::new(TrainState::fresh(model), cfg(10), Some(InfoNceConfig::default()), &enc).unwrap();
    t.step().unwrap();
    let ck = t.checkpoint(Some(&vocab));
    let bytes = ck.to_bytes().unwrap();
    let back = Checkpoint::from_bytes(&bytes).unwrap();
    assert_eq!(back, ck);
    assert_eq!(back.to_bytes().unwrap(), bytes);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.xlmp");
    save_checkpoint(&ck, &path).unwrap();
    assert_eq!(load_checkpoint(&path).unwrap(), ck);
    assert!(load_checkpoint_expecting(&path, &EncoderConfig { hidden: 16, ..ck.config.clone() }).is_err());
}

#[test]
fn corrupt_checkpoints_are_rejected() {
    let model = EncoderModel::new(small(20), 1).unwrap();
    let bytes = Checkpoint::from_model(&model, None).to_bytes().unwrap();
    assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 4]).is_err());
    let mut longer = bytes.clone();
    longer.push(0);
    assert!(Checkpoint::from_bytes(&longer).is_err());
    let mut bad = bytes.clone();
    bad[0] = b'Y';
    assert!(Checkpoint::from_bytes(&bad).is_err());
}

#[test]
fn resumed_training_follows_the_same_trajectory() {
    let (vocab, enc) = corpus(20);
    let c = cfg(12);
    let model = EncoderModel::new(small(vocab.len()), 3).unwrap();
    let mut full = Trainer::new(TrainState::fresh(model.clone()), c.clone(), None, &enc).unwrap();
    let all = full.run().unwrap();

    let mut first = Trainer::new(TrainState::fresh(model), c.clone(), None, &enc).unwrap();
    for _ in 0..5 {
        first.step().unwrap();
    }
    let ck = Checkpoint::from_bytes(&first.checkpoint(Some(&vocab)).to_bytes().unwrap()).unwrap();
    let state = TrainState { model: ck.model().unwrap(), adam: ck.adam.clone().unwrap(), step: ck.step };
    let mut second = Trainer::new(state, ck.train.clone().unwrap(), None, &enc).unwrap();
    let rest = second.run().unwrap();
    let a: Vec<u64> = all[5..].iter().map(|m| m.loss.to_bits()).collect();
    let b: Vec<u64> = rest.iter().map(|m| m.loss.to_bits()).collect();
    assert_eq!(a, b);
    assert_eq!(second.state.model.params, full.state.model.params);
}

#[test]
fn posttraining_reports_both_losses() {
    let (vocab, enc) = corpus(10);
    let model = EncoderModel::new(small(vocab.len()), 1).unwrap();
    let (_, metrics) = posttrain_infonce(model, &enc, &cfg(3), &InfoNceConfig::default()).unwrap();
    for m in metrics {
        let nce = m.infonce_loss.unwrap();
        assert!((m.loss - (m.mlm_loss + nce)).abs() < 1e-5);
    }
}

#[test]
fn posttraining_needs_a_pool_and_a_batch_of_two() {
    let (vocab, enc) = corpus(5);
    let plain = EncoderModel::new(small(vocab.len()).without_pool(), 1).unwrap();
    assert!(Trainer::new(TrainState::fresh(plain), cfg(3), Some(InfoNceConfig::default()), &enc).is_err());
    let model = EncoderModel::new(small(vocab.len()), 1).unwrap();
    let one = TrainConfig { batch_size: 1, ..cfg(3) };
    assert!(Trainer::new(TrainState::fresh(model), one, Some(InfoNceConfig::default()), &enc).is_err());
}

#[test]
fn divergence_keeps_the_last_good_state() {
    let (vocab, enc) = corpus(10);
    let mut model = EncoderModel::new(small(vocab.len()), 1).unwrap();
    model.params.get_mut("mlm.bias").unwrap().data_mut()[5] = f32::INFINITY;
    let dir = tempfile::tempdir().unwrap();
    let mut t = Trainer::new(TrainState::fresh(model.clone()), cfg(4), None, &enc).unwrap();
    let err = run_training(&mut t, dir.path(), Some(&vocab)).unwrap_err();
    assert!(matches!(err, Error::Divergence { step: 1, .. } | Error::NonFiniteGradient { .. }), "{err}");
    let saved = load_checkpoint(&dir.path().join("last_good.xlmp")).unwrap();
    assert_eq!(saved.step, 0);
    assert_eq!(saved.params, model.params);
}

#[test]
fn run_training_writes_metrics_and_checkpoints() {
    let (vocab, enc) = corpus(10);
    let model = EncoderModel::new(small(vocab.len()), 1).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let mut t = Trainer::new(TrainState::fresh(model), TrainConfig { checkpoint_every: 2, ..cfg(4) }, None, &enc).unwrap();
    run_training(&mut t, dir.path(), Some(&vocab)).unwrap();
    let lines = std::fs::read_to_string(dir.path().join("metrics.jsonl")).unwrap();
    assert_eq!(lines.lines().count(), 4);
    for f in ["step-2.xlmp", "step-4.xlmp", "final.xlmp"] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
    assert_eq!(load_checkpoint(&dir.path().join("final.xlmp")).unwrap().vocab.unwrap(), vocab);
}

#[test]
fn config_problems_are_listed_together() {
    let bad = TrainConfig { beta2: 1.5, warmup_steps: 100, total_steps: 10, batch_size: 0, ..TrainConfig::default() };
    assert_eq!(bad.problems().len(), 3, "{:?}", bad.problems());
    assert!(TrainConfig::preset("base").unwrap().learning_rate > 0.0);
}
