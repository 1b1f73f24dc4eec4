mod common;

use xlmp::encoder::EncoderModel;
use xlmp::evaluation::{layer_sweep, retrieval_weights};
use xlmp::rng::substream;

#[test]
fn results_do_not_depend_on_the_thread_count() {
    let model = EncoderModel::<f32>::new(common::micro(40), 8).unwrap();
    let src = common::random_seqs(&mut substream(8, "a", 0), 150, 40, 2, 10);
    let tgt = common::random_seqs(&mut substream(8, "b", 0), 150, 40, 2, 10);
    let run = |threads: &str| {
        std::env::set_var("XLMP_THREADS", threads);
        (layer_sweep(&src, &tgt, &model, true, true).unwrap(), retrieval_weights(&model, &src).unwrap())
    };
    let one = run("1");
    assert_eq!(run("3"), one);
    assert_eq!(run("8"), one);
}
