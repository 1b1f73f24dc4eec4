mod common;

use proptest::prelude::*;
use rand::Rng;
use xlmp::data::MaskedBatch;
use xlmp::encoder::EncoderModel;
use xlmp::numerics::{ParamSet, Tape, Tensor};
use xlmp::prompt_pool::{prompt_param_count, PromptPool};
use xlmp::rng::substream;

#[test]
fn pool_sizes_at_base_and_large_width() {
    assert_eq!(prompt_param_count(256, 4, 768), 983_040);
    assert_eq!(prompt_param_count(256, 4, 1024), 1_310_720);
}

#[test]
fn pool_adds_keys_values_and_query_projection() {
    let cfg = common::tiny(50);
    let with = EncoderModel::<f32>::new(cfg.clone(), 0).unwrap();
    let without = EncoderModel::<f32>::new(cfg.without_pool(), 0).unwrap();
    assert_eq!(with.params.numel() - without.params.numel(), prompt_param_count(8, 2, 64) + 64 * 64);
}

fn pool_params(pool: &PromptPool, seed: u64, std: f64) -> ParamSet<f64> {
    let mut p = ParamSet::new();
    pool.init_params(&mut p, std, &mut substream(seed, "test-pool", 0));
    p
}

#[test]
fn single_prompt_pool_selects_it_with_weight_one() {
    let pool = PromptPool::new(1, 3, 5).unwrap();
    let params = pool_params(&pool, 1, 1.0);
    let mut rng = substream(2, "emb", 0);
    for _ in 0..20 {
        let emb = Tensor::from_fn(vec![4, 5], |_| rng.random_range(-3.0..3.0));
        let r = pool.retrieve_one(&params, &emb, &[true, true, false, true]).unwrap();
        assert_eq!(r.alpha, vec![1.0]);
        assert_eq!(r.prompt.data(), params.get("prompt.values").unwrap().data());
    }
}

#[test]
fn retrieval_matches_straight_line_oracle() {
    let mut rng = substream(3, "instances", 0);
    for case in 0..100u64 {
        let (m, lp, d) = (rng.random_range(1..6), rng.random_range(1..4), rng.random_range(1..7));
        let seq = rng.random_range(1..6);
        let pool = PromptPool::new(m, lp, d).unwrap();
        let params = pool_params(&pool, case, 0.5);
        let rows: Vec<Vec<f64>> = (0..seq).map(|_| (0..d).map(|_| rng.random_range(-2.0..2.0)).collect()).collect();
        let mut valid: Vec<bool> = (0..seq).map(|_| rng.random_bool(0.7)).collect();
        valid[0] = true;
        let got = pool.retrieve_one(&params, &Tensor::from_rows(&rows).unwrap(), &valid).unwrap();
        let (alpha, prompt) = common::oracle_retrieve(&params, &rows, &valid, lp);
        for (a, b) in got.alpha.iter().zip(&alpha) {
            assert!((a - b).abs() < 1e-6, "case {case}: alpha {a} vs {b}");
        }
        for (a, b) in got.prompt.data().iter().zip(prompt.concat()) {
            assert!((a - b).abs() < 1e-6, "case {case}: prompt {a} vs {b}");
        }
    }
}

#[test]
fn batched_retrieval_equals_per_sequence_retrieval() {
    let model = EncoderModel::<f64>::new(common::tiny(40), 5).unwrap();
    let seqs = common::random_seqs(&mut substream(5, "seqs", 0), 6, 40, 2, 9);
    let batch = MaskedBatch::unmasked(&seqs).unwrap();
    let mut tape = Tape::new();
    let vars = model.retrieve(&mut tape, &batch).unwrap();
    for (b, s) in seqs.iter().enumerate() {
        let one = MaskedBatch::unmasked(std::slice::from_ref(s)).unwrap();
        let mut t1 = Tape::new();
        let v1 = model.retrieve(&mut t1, &one).unwrap();
        assert_eq!(tape.value(vars.alpha).row(b), t1.value(v1.alpha).row(0));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn retrieval_weights_lie_on_the_simplex(
        m in 1usize..10,
        d in 1usize..8,
        seq in 1usize..8,
        scale in 0.01f64..20.0,
        seed in any::<u64>(),
    ) {
        let pool = PromptPool::new(m, 2, d).unwrap();
        let params = pool_params(&pool, seed, scale);
        let mut rng = substream(seed, "emb", 1);
        let emb = Tensor::from_fn(vec![seq, d], |_| rng.random_range(-scale..scale));
        let r = pool.retrieve_one(&params, &emb, &vec![true; seq]).unwrap();
        prop_assert!(r.alpha.iter().all(|&a| a >= 0.0));
        prop_assert!((r.alpha.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        prop_assert_eq!(r.prompt.shape(), &[2, d]);
    }

    #[test]
    fn retrieval_ignores_padding_content(seed in any::<u64>(), junk in -50.0f64..50.0) {
        let pool = PromptPool::new(4, 2, 3).unwrap();
        let params = pool_params(&pool, seed, 1.0);
        let mut rng = substream(seed, "emb", 2);
        let mut emb = Tensor::from_fn(vec![5, 3], |_| rng.random_range(-1.0..1.0));
        let valid = [true, true, true, false, false];
        let a = pool.retrieve_one(&params, &emb, &valid).unwrap();
        for x in &mut emb.data_mut()[9..] {
            *x = junk;
        }
        let b = pool.retrieve_one(&params, &emb, &valid).unwrap();
        prop_assert_eq!(a, b);
    }
}
