//! End to end on a synthetic world: pretrain the encoder, tune LoRA on
//! text-only prompts, fine-tune the fusion path, then compare the three
//! predictors on warm and cold users.

use sasrecllm::data::prepare_bundle;
use sasrecllm::orchestrate::{Runner, Stage, StageConfigs};
use sasrecllm::synthetic::{generate, SyntheticConfig};
use sasrecllm::system::{build_vocab, Predictor, System, SystemConfig};
use sasrecllm::training::evaluate_epoch;

fn main() -> Result<(), sasrecllm::Error> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let world = generate(&SyntheticConfig {
        users: 200,
        ..SyntheticConfig::default()
    })?;
    let b = prepare_bundle(&world.records)?;
    println!(
        "{} train / {} validation / {} test examples ({} warm, {} cold)",
        b.train.len(),
        b.validation.len(),
        b.test.len(),
        b.warm_test.len(),
        b.cold_test.len()
    );
    let vocab = build_vocab(&b.titles)?;
    let cfg = SystemConfig::desk(b.num_items(), vocab.len());
    let mut sys = System::new(cfg.clone(), vocab.clone(), 3)?;

    let dir = std::env::temp_dir().join(format!("quickstart_{}", std::process::id()));
    let mut runner = Runner::new(&b, &dir, false);
    let mut stages = StageConfigs::desk(3);
    stages.a.max_epochs = 15;
    stages.b.max_epochs = 6;
    stages.c.max_epochs = 6;
    for s in runner.dual_stage(&mut sys, &stages)? {
        println!("stage {}: best {:?} at epoch {:?}", s.stage.name(), s.best_value, s.best_epoch);
    }

    // the text-only and encoder-only predictors at their own best weights
    let mut textual = System::new(cfg.clone(), vocab.clone(), 3)?;
    runner.load(&mut textual, Stage::B.best_dir(), Stage::B.saved_components())?;
    let mut encoder = System::new(cfg, vocab, 3)?;
    runner.load(&mut encoder, Stage::A.best_dir(), Stage::A.saved_components())?;

    for (name, split) in [("warm", &b.warm_test), ("cold", &b.cold_test)] {
        for (label, s, p) in [
            ("hybrid", &sys, Predictor::Hybrid),
            ("text only", &textual, Predictor::Textual),
            ("encoder", &encoder, Predictor::Sasrec),
        ] {
            let (r, _) = evaluate_epoch(split, |ex| s.predict(ex, &b.titles, p))?;
            println!("{name:>5} {label:>9}: auc {:?}", r.auc);
        }
    }
    Ok(())
}
