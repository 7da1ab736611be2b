#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::PathBuf;

use sasrecllm::data::{self, LabeledExample, SplitBundle};
use sasrecllm::metrics::ScoredExample;
use sasrecllm::gradcheck::{gradcheck, GradcheckOptions, GradcheckReport};
use sasrecllm::llm::{LlmConfig, TinyLlm};
use sasrecllm::sasrec::{standardize_sequence, SasrecConfig, SasrecModel};
use sasrecllm::synthetic::{self, SyntheticConfig};
use sasrecllm::system::{Predictor, System, SystemConfig, Titles};
use sasrecllm::training::{set_freeze, FreezeMask};
use sasrecllm::vocab::{self, Vocab};
use sasrecllm::{Component, Mode, ParamStore, Real, RngStream, Tape, Tensor};

pub fn fixture(rel: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(rel)
}

pub fn ex(user: usize, item: usize, label: u8, timestamp: u64, history: &[usize]) -> LabeledExample {
    LabeledExample {
        user,
        item,
        label,
        timestamp,
        history: history.to_vec(),
    }
}

pub fn synthetic_bundle(cfg: &SyntheticConfig) -> SplitBundle {
    let world = synthetic::generate(cfg).unwrap();
    data::prepare_bundle(&world.records).unwrap()
}

pub fn tiny_titles() -> Titles {
    BTreeMap::from([(1, "a".into()), (2, "b".into()), (3, "a b".into())])
}

pub fn tiny_sasrec_config(num_items: usize) -> SasrecConfig {
    SasrecConfig {
        num_items,
        d1: 4,
        n: 3,
        blocks: 1,
        heads: 2,
        dropout: 0.0,
        init_std: 0.5,
    }
}

pub fn tiny_llm_config(vocab_size: usize, context_len: usize) -> LlmConfig {
    LlmConfig {
        d2: 8,
        layers: 1,
        heads: 2,
        ffn_dim: 16,
        context_len,
        lora_rank: 2,
        lora_alpha: 4.0,
        embed_std: 0.5,
        ..LlmConfig::desk(vocab_size)
    }
}

/// A hybrid system small enough for exhaustive finite differences. Most
/// template words fall back to `<unk>`.
pub fn tiny_system(seed: u64) -> System {
    let vocab = Vocab::build(["a b"]);
    let cfg = SystemConfig {
        sasrec: tiny_sasrec_config(3),
        llm: tiny_llm_config(vocab.len(), 64),
        proj_token_num: 1,
        max_titles: 2,
    };
    System::new(cfg, vocab, seed).unwrap()
}

/// Gives every LoRA `B` random entries so the `A` gradients are not trivially zero.
pub fn randomize_lora_b(store: &mut ParamStore, seed: u64) {
    let mut rng = RngStream::new(seed);
    for id in store.ids_of(Component::Lora) {
        if store.get(id).name.ends_with("lora_b") {
            let shape = store.value(id).shape().to_vec();
            *store.value_mut(id) = Tensor::randn(&shape, 0.3, &mut rng);
        }
    }
}

pub fn opts() -> GradcheckOptions {
    GradcheckOptions {
        delta: 1e-4,
        coords_per_param: None,
        seed: 3,
    }
}

/// One encoder block under the pretraining BCE with one sampled negative.
pub fn gradcheck_sasrec_block() -> (usize, GradcheckReport) {
    let mut store = ParamStore::new();
    let cfg = SasrecConfig {
        n: 4,
        ..tiny_sasrec_config(5)
    };
    let model = SasrecModel::new(cfg, &mut store, &mut RngStream::new(5)).unwrap();
    let seq = standardize_sequence(1, &[2, 4, 1, 5], 4).unwrap();
    let params = store.num_scalars(None);
    let report = gradcheck(
        &mut store,
        |s| {
            let mut tape = Tape::new(s);
            let mut rng = RngStream::new(9);
            let (l, _) = model.sequence_loss(&mut tape, &seq, Mode::Eval, &mut rng)?.unwrap();
            let loss = tape.scalar(l);
            Ok((loss, tape.backward(l)?.into_params()))
        },
        &opts(),
    )
    .unwrap();
    (params, report)
}

/// One decoder layer with LoRA on Q/V, everything trainable, BCE on the
/// yes/no head.
pub fn gradcheck_llm_layer() -> (usize, GradcheckReport) {
    let mut store = ParamStore::new();
    let cfg = tiny_llm_config(8, 6);
    let llm = TinyLlm::new(cfg, &mut store, &mut RngStream::new(6)).unwrap();
    randomize_lora_b(&mut store, 7);
    store.set_component_trainable(Component::LlmBase, true);
    let ids = [6, 7, vocab::UNK, 6, vocab::ITEM];
    let params = store.num_scalars(None);
    let report = gradcheck(
        &mut store,
        |s| {
            let mut tape = Tape::new(s);
            let mut rng = RngStream::new(0);
            let e = llm.embed_tokens(&mut tape, &ids)?;
            let p = llm.predict_yes_prob(&mut tape, e, Mode::Eval, &mut rng)?;
            let l = tape.bce(p, 1.0)?;
            let loss = tape.scalar(l);
            Ok((loss, tape.backward(l)?.into_params()))
        },
        &opts(),
    )
    .unwrap();
    (params, report)
}

/// BCE through the splice: encoder, mapping layer and LoRA trainable, base
/// language model frozen. Returns the trainable-parameter count.
pub fn gradcheck_hybrid() -> (usize, GradcheckReport) {
    let mut sys = tiny_system(8);
    randomize_lora_b(&mut sys.store, 9);
    set_freeze(
        &mut sys.store,
        FreezeMask {
            sasrec: true,
            mapping: true,
            lora: true,
            llm_base: false,
        },
    )
    .unwrap();
    let example = ex(1, 3, 0, 10, &[1, 2]);
    let titles = tiny_titles();
    let trainable: usize = [Component::Sasrec, Component::Mapping, Component::Lora]
        .iter()
        .map(|&c| sys.store.num_scalars(Some(c)))
        .sum();
    let System { store, model } = &mut sys;
    let report = gradcheck(
        store,
        |s| {
            let mut tape = Tape::new(s);
            let mut rng = RngStream::new(0);
            let p = model.forward(&mut tape, &example, &titles, Predictor::Hybrid, Mode::Eval, &mut rng)?;
            let l = tape.bce(p, 0.0)?;
            let loss = tape.scalar(l);
            Ok((loss, tape.backward(l)?.into_params()))
        },
        &opts(),
    )
    .unwrap();
    (trainable, report)
}

pub fn mean(xs: &[Real]) -> Real {
    xs.iter().sum::<Real>() / xs.len() as Real
}

/// Perturbing position `t` of the input never changes encoder outputs at
/// positions before `t`.
pub fn encoder_is_causal() -> bool {
    let mut store = ParamStore::new();
    let cfg = SasrecConfig {
        n: 6,
        ..tiny_sasrec_config(7)
    };
    let model = SasrecModel::new(cfg, &mut store, &mut RngStream::new(1)).unwrap();
    let base = [0, 0, 3, 1, 6, 2];
    let run = |items: &[usize]| {
        let mut tape = Tape::new(&store);
        let h = model.forward_hidden(&mut tape, items, Mode::Eval, &mut RngStream::new(0)).unwrap();
        tape.value(h).clone()
    };
    let h0 = run(&base);
    (2..base.len()).all(|t| {
        let mut items = base;
        items[t] = if items[t] == 7 { 1 } else { items[t] + 1 };
        let h = run(&items);
        (0..t).all(|r| h.row(r).iter().zip(h0.row(r)).all(|(a, b)| a.to_bits() == b.to_bits()))
            && h.row(t) != h0.row(t)
    })
}

pub fn decoder_is_causal() -> bool {
    let mut store = ParamStore::new();
    let llm = TinyLlm::new(tiny_llm_config(8, 6), &mut store, &mut RngStream::new(2)).unwrap();
    randomize_lora_b(&mut store, 3);
    let e0 = Tensor::randn(&[6, 8], 1.0, &mut RngStream::new(4));
    let run = |e: &Tensor| {
        let mut tape = Tape::new(&store);
        let x = tape.constant(e.clone());
        let l = llm.decoder_forward(&mut tape, x, Mode::Eval, &mut RngStream::new(0)).unwrap();
        tape.value(l).clone()
    };
    let l0 = run(&e0);
    (0..6).all(|t| {
        let mut e = e0.clone();
        e.row_mut(t).iter_mut().for_each(|v| *v += 0.7);
        let l = run(&e);
        (0..t).all(|r| l.row(r).iter().zip(l0.row(r)).all(|(a, b)| a.to_bits() == b.to_bits()))
    })
}

fn llm_logits(llm: &TinyLlm, store: &ParamStore, e: &Tensor) -> Tensor {
    let mut tape = Tape::new(store);
    let x = tape.constant(e.clone());
    let l = llm.decoder_forward(&mut tape, x, Mode::Eval, &mut RngStream::new(0)).unwrap();
    tape.value(l).clone()
}

/// Freshly attached adapters (`B = 0`) leave the logits bit-identical to the
/// adapter-free path.
pub fn lora_zero_init_is_identity() -> bool {
    let mut store = ParamStore::new();
    let mut llm = TinyLlm::new(tiny_llm_config(8, 5), &mut store, &mut RngStream::new(5)).unwrap();
    let e = Tensor::randn(&[5, 8], 1.0, &mut RngStream::new(6));
    let with_adapters = llm_logits(&llm, &store, &e);
    // merged adapters bypass the low-rank path entirely
    llm.merge_adapters(&mut store).unwrap();
    let without = llm_logits(&llm, &store, &e);
    with_adapters.bit_eq(&without)
}

/// Largest logit change from folding trained adapters into the base weights.
pub fn lora_merge_max_diff() -> Real {
    let mut store = ParamStore::new();
    let mut llm = TinyLlm::new(tiny_llm_config(8, 5), &mut store, &mut RngStream::new(7)).unwrap();
    randomize_lora_b(&mut store, 8);
    let e = Tensor::randn(&[5, 8], 1.0, &mut RngStream::new(9));
    let unmerged = llm_logits(&llm, &store, &e);
    llm.merge_adapters(&mut store).unwrap();
    let merged = llm_logits(&llm, &store, &e);
    llm.unmerge_adapters(&mut store).unwrap();
    let back = llm_logits(&llm, &store, &e);
    unmerged.max_abs_diff(&merged).max(unmerged.max_abs_diff(&back))
}

/// Five optimizer steps under the LoRA-only mask: every frozen tensor stays
/// bit-identical while the adapters move. Returns (frozen intact, trainable moved).
pub fn freeze_contract() -> (bool, bool) {
    use sasrecllm::optim::OptimizerState;
    use sasrecllm::training::{train_epoch, TrainConfig};
    let mut sys = tiny_system(10);
    set_freeze(&mut sys.store, FreezeMask::LORA_ONLY).unwrap();
    let before = sys.store.snapshot();
    let titles = tiny_titles();
    let examples: Vec<LabeledExample> = (0..5).map(|k| ex(1 + k % 2, 1 + k % 3, (k % 2) as u8, k as u64, &[2])).collect();
    let cfg = TrainConfig {
        batch_size: 1,
        weight_decay: 0.1,
        ..TrainConfig::default()
    };
    let mut opt = OptimizerState::new(&sys.store, cfg.adamw());
    let mut schedule = cfg.schedule(examples.len());
    let mut rng = RngStream::new(0);
    let System { store, model } = &mut sys;
    let out = train_epoch(store, &mut opt, &examples, &cfg, &mut schedule, &mut rng, 0, |tape, e, rng| {
        model.forward(tape, e, &titles, Predictor::Textual, Mode::Train, rng)
    })
    .unwrap();
    assert_eq!(out.batches, 5);
    assert_eq!(opt.step_count(), 5);
    let mut frozen_ok = true;
    let mut moved = false;
    for ((id, p), old) in sys.store.iter().zip(&before) {
        if sys.store.is_trainable(id) {
            moved |= !p.value.bit_eq(old);
        } else {
            frozen_ok &= p.value.bit_eq(old);
        }
    }
    (frozen_ok, moved)
}

/// Save → load → save produces identical bytes, and restoring into a
/// differently initialised system reproduces every tensor bit for bit.
pub fn checkpoint_round_trip(dir: &std::path::Path) -> bool {
    use sasrecllm::checkpoint::{Checkpoint, MANIFEST, TENSORS};
    let a = tiny_system(11);
    let mut c = Checkpoint::capture(&a.store, &a.component_hashes(), &[]).unwrap();
    c.epoch = 3;
    c.stage = "C".into();
    c.monitor = "auc".into();
    c.monitor_value = Some(0.625);
    c.save(dir).unwrap();
    let loaded = Checkpoint::load(dir).unwrap();
    let d2 = dir.join("again");
    loaded.save(&d2).unwrap();
    let same = |f: &str| std::fs::read(dir.join(f)).unwrap() == std::fs::read(d2.join(f)).unwrap();
    let mut b = tiny_system(12);
    let hashes = b.component_hashes();
    loaded.restore(&mut b.store, &hashes, &[]).unwrap();
    let identical = a
        .store
        .iter()
        .zip(b.store.iter())
        .all(|((_, p), (_, q))| p.name == q.name && p.value.bit_eq(&q.value));
    same(MANIFEST) && same(TENSORS) && loaded == c && identical
}

/// Pairwise definition: positives beating negatives count 1, ties ½.
pub fn auc_double_loop(xs: &[ScoredExample]) -> Option<Real> {
    let pos: Vec<Real> = xs.iter().filter(|e| e.label >= 0.5).map(|e| e.score).collect();
    let neg: Vec<Real> = xs.iter().filter(|e| e.label < 0.5).map(|e| e.score).collect();
    if pos.is_empty() || neg.is_empty() {
        return None;
    }
    let mut s = 0.0;
    for p in &pos {
        for n in &neg {
            if p > n {
                s += 1.0;
            } else if p == n {
                s += 0.5;
            }
        }
    }
    Some(s / (pos.len() * neg.len()) as Real)
}

/// Causal attention written as explicit per-head loops; `valid[j]` marks
/// keys that may be attended to.
pub fn naive_attention(q: &Tensor, k: &Tensor, v: &Tensor, heads: usize, valid: &[bool]) -> Tensor {
    let (len, d) = (q.rows(), q.cols());
    let dh = d / heads;
    let scale = 1.0 / (dh as Real).sqrt();
    let mut out = Tensor::zeros(&[len, d]);
    for h in 0..heads {
        for i in 0..len {
            let allowed: Vec<usize> = (0..=i).filter(|&j| valid[j]).collect();
            if allowed.is_empty() {
                continue;
            }
            let scores: Vec<Real> = allowed
                .iter()
                .map(|&j| (0..dh).map(|t| q.at(i, h * dh + t) * k.at(j, h * dh + t)).sum::<Real>() * scale)
                .collect();
            let mx = scores.iter().cloned().fold(Real::NEG_INFINITY, Real::max);
            let z: Real = scores.iter().map(|s| (s - mx).exp()).sum();
            for (w, &j) in scores.iter().zip(&allowed) {
                for t in 0..dh {
                    out.row_mut(i)[h * dh + t] += (w - mx).exp() / z * v.at(j, h * dh + t);
                }
            }
        }
    }
    out
}
