mod common;

use proptest::prelude::*;
use rand::Rng;
use xlmp::encoder::EncoderModel;
use xlmp::evaluation::*;
use xlmp::rng::substream;
use xlmp::Error;

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    dot / (a.iter().map(|x| x * x).sum::<f64>().sqrt() * b.iter().map(|x| x * x).sum::<f64>().sqrt())
}

#[test]
fn nearest_neighbours_match_brute_force() {
    let mut rng = substream(40, "nn", 0);
    let mut vecs = |n: usize| -> Vec<Vec<f64>> { (0..n).map(|_| (0..5).map(|_| rng.random_range(-1.0..1.0)).collect()).collect() };
    let (q, k) = (vecs(30), vecs(40));
    let got = nearest_neighbors(&q, &k).unwrap();
    for (qi, &g) in q.iter().zip(&got) {
        let best = k.iter().map(|kv| cosine(qi, kv)).fold(f64::NEG_INFINITY, f64::max);
        assert!((cosine(qi, &k[g]) - best).abs() < 1e-12);
    }
}

#[test]
fn nearest_neighbour_ties_go_to_the_lowest_index() {
    let k = vec![vec![1.0, 0.0], vec![2.0, 0.0], vec![0.0, 1.0]];
    assert_eq!(nearest_neighbors(&[vec![3.0, 0.0]], &k).unwrap(), vec![0]);
    assert!(matches!(nearest_neighbors(&[vec![0.0, 0.0]], &k), Err(Error::ZeroNorm { index: 0 })));
}

#[test]
fn identical_sides_retrieve_perfectly_at_every_layer() {
    let model = EncoderModel::<f32>::new(common::micro(40), 3).unwrap();
    let mut seqs = common::random_seqs(&mut substream(3, "s", 0), 12, 40, 3, 9);
    seqs.dedup();
    let sweep = layer_sweep(&seqs, &seqs, &model, true, false).unwrap();
    assert_eq!(sweep.len(), 2 * 3);
    assert!(sweep.iter().all(|r| r.accuracy == 1.0));
    let csv = sweep_csv(&sweep);
    assert_eq!(csv.lines().count(), 1 + 2 * 3);
    assert!(csv.starts_with("layer,direction,accuracy\n0,src->tgt,1"));
}

#[test]
fn single_layer_retrieval_agrees_with_the_sweep() {
    let model = EncoderModel::<f32>::new(common::micro(40), 3).unwrap();
    let src = common::random_seqs(&mut substream(3, "a", 0), 10, 40, 3, 9);
    let tgt = common::random_seqs(&mut substream(3, "b", 0), 10, 40, 3, 9);
    for include in [false, true] {
        let sweep = layer_sweep(&src, &tgt, &model, true, include).unwrap();
        for layer in 0..=2 {
            let opts = RepresentationOptions { layer, prompts: true, include_prompt_positions: include };
            let one = retrieval_accuracy(&src, &tgt, &model, &opts).unwrap();
            assert_eq!(one[0], sweep[2 * layer]);
            assert_eq!(one[1], sweep[2 * layer + 1]);
        }
    }
    assert!(layer_sweep(&src, &tgt[..3], &model, true, false).is_err());
}

#[test]
fn prompt_export_has_one_row_per_sentence() {
    let model = EncoderModel::<f32>::new(common::micro(40), 3).unwrap();
    let seqs = common::random_seqs(&mut substream(3, "s", 0), 5, 40, 3, 9);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("p.csv");
    let data = [
        LabelledSentences { lang: "a".into(), ids: vec![0, 1, 2], sentences: seqs[..3].to_vec() },
        LabelledSentences { lang: "b".into(), ids: vec![7, 9], sentences: seqs[3..].to_vec() },
    ];
    assert_eq!(export_prompt_representations(&model, &data, &path).unwrap(), 5);
    let text = std::fs::read_to_string(&path).unwrap();
    let header: Vec<&str> = text.lines().next().unwrap().split(',').collect();
    assert_eq!(header.len(), 2 + 2 * 8);
    assert!(text.lines().nth(5).unwrap().starts_with("b,9,"));
}

#[test]
fn histogram_counts_every_sentence() {
    let model = EncoderModel::<f32>::new(common::micro(40), 3).unwrap();
    let seqs = common::random_seqs(&mut substream(3, "s", 0), 20, 40, 3, 9);
    let h = prompt_selection_histogram(&model, &seqs).unwrap();
    assert_eq!(h.instances(), 20);
    assert!((h.mean_alpha.iter().sum::<f64>() - 1.0).abs() < 1e-6);
    let a = prompt_selection_histogram(&model, &seqs[..7]).unwrap();
    let b = prompt_selection_histogram(&model, &seqs[7..]).unwrap();
    let m = a.merge(&b);
    assert_eq!(m.counts, h.counts);
    for (x, y) in m.mean_alpha.iter().zip(&h.mean_alpha) {
        assert!((x - y).abs() < 1e-12);
    }
    let csv = histogram_csv(&[("l0".into(), h)]);
    assert_eq!(csv.lines().count(), 1 + 3);
}

fn simplex(rng: &mut impl Rng, m: usize, peak: Option<usize>) -> Vec<f64> {
    let mut v: Vec<f64> = (0..m).map(|_| rng.random_range(0.0..1.0)).collect();
    if let Some(p) = peak {
        v[p] += 5.0;
    }
    let s: f64 = v.iter().sum();
    v.iter().map(|x| x / s).collect()
}

#[test]
fn separated_languages_score_high_and_the_null_does_not() {
    let mut rng = substream(41, "sep", 0);
    let groups: Vec<Vec<Vec<f64>>> = (0..4).map(|l| (0..200).map(|_| simplex(&mut rng, 8, Some(l))).collect()).collect();
    let s = language_separation_score(&groups).unwrap();
    assert!(s.ratio > 10.0, "{s:?}");
    let null = permutation_null(&groups, 20, 1).unwrap();
    assert!((0.8..=1.2).contains(&null.ratio), "{null:?}");
}

#[test]
fn identical_weights_are_degenerate() {
    let groups = vec![vec![vec![0.5, 0.5]; 4]; 3];
    let s = language_separation_score(&groups).unwrap();
    assert!(s.degenerate);
    assert_eq!(s.ratio, 1.0);
    assert!(language_separation_score(&groups[..1]).is_err());
    assert!(language_separation_score(&[vec![vec![1.0]], vec![vec![1.0], vec![1.0]]]).is_err());
}

proptest! {
    #[test]
    fn jsd_is_a_bounded_symmetric_divergence(seed in any::<u64>(), m in 1usize..12) {
        let mut rng = substream(seed, "jsd", 0);
        let p = simplex(&mut rng, m, None);
        let q = simplex(&mut rng, m, None);
        let d = jsd(&p, &q);
        prop_assert!((0.0..=1.0 + 1e-12).contains(&d));
        prop_assert!((d - jsd(&q, &p)).abs() < 1e-12);
        prop_assert!(jsd(&p, &p).abs() < 1e-12);
    }
}

#[test]
fn disjoint_distributions_are_one_bit_apart() {
    assert!((jsd(&[1.0, 0.0], &[0.0, 1.0]) - 1.0).abs() < 1e-9);
}
