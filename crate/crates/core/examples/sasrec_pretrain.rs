//! Next-item pretraining of the self-attentive encoder alone (Stage A),
//! then its stand-alone preference estimate on the test split.

use sasrecllm::data::prepare_bundle;
use sasrecllm::orchestrate::{Runner, StageConfigs};
use sasrecllm::synthetic::{generate, SyntheticConfig};
use sasrecllm::system::{build_vocab, Predictor, System, SystemConfig};
use sasrecllm::training::evaluate_epoch;

fn main() -> Result<(), sasrecllm::Error> {
    let world = generate(&SyntheticConfig {
        users: 200,
        ..SyntheticConfig::default()
    })?;
    let b = prepare_bundle(&world.records)?;
    let vocab = build_vocab(&b.titles)?;
    let mut sys = System::new(SystemConfig::desk(b.num_items(), vocab.len()), vocab, 7)?;

    let dir = std::env::temp_dir().join(format!("sasrec_pretrain_{}", std::process::id()));
    let mut runner = Runner::new(&b, &dir, false);
    let mut cfg = StageConfigs::desk(7).a;
    cfg.max_epochs = 15;
    let s = runner.run_stage_a(&mut sys, &cfg)?;
    println!("stage A: epochs {}..={}, best validation auc {:?}", s.first_epoch, s.last_epoch, s.best_value);

    let (r, _) = evaluate_epoch(&b.test, |ex| sys.predict(ex, &b.titles, Predictor::Sasrec))?;
    println!("test auc {:?}, uauc {:?}", r.auc, r.uauc);
    println!("logs and checkpoints in {}", dir.display());
    Ok(())
}
