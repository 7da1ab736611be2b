//! The experiment harness without the CLI: prepare, train, evaluate and
//! verify one baseline in a scratch run directory.

use sasrecllm::config::{ExperimentConfig, ModelKind};
use sasrecllm::experiment::Experiment;

fn main() -> Result<(), sasrecllm::Error> {
    let mut cfg = ExperimentConfig::defaults(true);
    cfg.data.run_dir = std::env::temp_dir().join(format!("experiment_{}", std::process::id()));
    cfg.data.synthetic.users = 150;
    cfg.model.kind = ModelKind::Mf;
    cfg.train.seeds = vec![1, 2];

    let exp = Experiment::new(cfg, false);
    let prepared = exp.prepare()?;
    println!("bundle at {}", prepared.bundle_path.display());
    for s in exp.train()? {
        println!("{} seed {} trained in {:.1}s", s.model.name(), s.seed, s.seconds);
    }
    print!("{}", exp.evaluate()?.csv());
    let v = exp.verify()?;
    println!("verify: {} values recomputed, max deviation {:.1e}", v.checked, v.max_deviation);
    Ok(())
}
