mod common;

use sasrecllm::baselines::RnnModel;
use sasrecllm::gradcheck::gradcheck;
use sasrecllm::{Mode, RngStream, Tape};

use common::*;

const TOL: f64 = 1e-3;

#[test]
fn encoder_block_gradients() {
    let (params, r) = gradcheck_sasrec_block();
    assert!(params <= 1000, "{params} parameters");
    assert!(r.max_abs_grad > 1e-4, "vacuous check");
    assert!(r.max_rel_error < TOL, "{r:?}");
}

#[test]
fn decoder_layer_with_lora_gradients() {
    let (params, r) = gradcheck_llm_layer();
    assert!(params <= 1000, "{params} parameters");
    assert_eq!(r.skipped_frozen, 0);
    assert!(r.max_rel_error < TOL, "{r:?}");
}

#[test]
fn hybrid_splice_gradients_reach_encoder_mapping_and_lora() {
    let (trainable, r) = gradcheck_hybrid();
    assert!(trainable <= 1000, "{trainable} trainable parameters");
    assert!(r.skipped_frozen > 0, "base model must be frozen");
    assert!(r.max_rel_error < TOL, "{r:?}");
}

#[test]
fn hybrid_gradient_is_nonzero_on_each_trainable_component() {
    use sasrecllm::system::Predictor;
    use sasrecllm::Component;
    let mut sys = tiny_system(8);
    randomize_lora_b(&mut sys.store, 9);
    let example = ex(1, 3, 1, 10, &[1, 2]);
    let titles = tiny_titles();
    let g = {
        let mut tape = Tape::new(&sys.store);
        let mut rng = RngStream::new(0);
        let p = sys
            .model
            .forward(&mut tape, &example, &titles, Predictor::Hybrid, Mode::Eval, &mut rng)
            .unwrap();
        let l = tape.bce(p, 1.0).unwrap();
        tape.backward(l).unwrap().into_params()
    };
    sys.store.zero_grads();
    sys.store.accumulate(&g, 1.0);
    for c in [Component::Sasrec, Component::Mapping, Component::Lora] {
        assert!(sys.store.grad_norm(c) > 0.0, "{c:?} received no gradient");
    }
}

#[test]
fn gru_gradients() {
    let mut m = RnnModel::new(4, 3, 5, 0.5, 2).unwrap();
    let example = ex(1, 2, 1, 0, &[1, 3, 4, 1]);
    let net = m.net.clone();
    let r = gradcheck(
        &mut m.store,
        |s| {
            use sasrecllm::baselines::ScoreNet;
            let mut tape = Tape::new(s);
            let mut rng = RngStream::new(0);
            let p = net.score(&mut tape, &example, Mode::Eval, &mut rng)?;
            let l = tape.bce(p, 1.0)?;
            let loss = tape.scalar(l);
            Ok((loss, tape.backward(l)?.into_params()))
        },
        &opts(),
    )
    .unwrap();
    assert!(r.max_rel_error < TOL, "{r:?}");
    assert!(r.max_abs_grad > 1e-4);
}
