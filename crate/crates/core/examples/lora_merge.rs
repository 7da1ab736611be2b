//! Attaching LoRA is the identity until `B` moves; merging folds the
//! low-rank update into the base weights without changing the logits.

use sasrecllm::llm::{LlmConfig, TinyLlm};
use sasrecllm::{Component, Mode, ParamStore, RngStream, Tape, Tensor};

fn logits(llm: &TinyLlm, store: &ParamStore, e: &Tensor) -> Tensor {
    let mut tape = Tape::new(store);
    let x = tape.constant(e.clone());
    let l = llm.decoder_forward(&mut tape, x, Mode::Eval, &mut RngStream::new(0)).unwrap();
    tape.value(l).clone()
}

fn main() -> Result<(), sasrecllm::Error> {
    let cfg = LlmConfig {
        d2: 16,
        layers: 2,
        heads: 2,
        ffn_dim: 32,
        context_len: 12,
        ..LlmConfig::desk(40)
    };
    let mut store = ParamStore::new();
    let mut llm = TinyLlm::new(cfg, &mut store, &mut RngStream::new(1))?;
    println!(
        "base {} scalars, adapters {} scalars (rank {})",
        store.num_scalars(Some(Component::LlmBase)),
        store.num_scalars(Some(Component::Lora)),
        llm.config.lora_rank
    );
    let e = Tensor::randn(&[12, 16], 1.0, &mut RngStream::new(2));
    let fresh = logits(&llm, &store, &e);

    // pretend some tuning happened
    let mut rng = RngStream::new(3);
    for id in store.ids_of(Component::Lora) {
        if store.get(id).name.ends_with("lora_b") {
            let shape = store.value(id).shape().to_vec();
            *store.value_mut(id) = Tensor::randn(&shape, 0.2, &mut rng);
        }
    }
    let tuned = logits(&llm, &store, &e);
    llm.merge_adapters(&mut store)?;
    let merged = logits(&llm, &store, &e);
    println!("tuning moved logits by up to {:.3e}", fresh.max_abs_diff(&tuned));
    println!("merge changed them by      {:.3e}", tuned.max_abs_diff(&merged));
    llm.unmerge_adapters(&mut store)?;
    println!("unmerge restores within    {:.3e}", tuned.max_abs_diff(&logits(&llm, &store, &e)));
    Ok(())
}
