//! Reading an experiment INI and inspecting what it resolves to.

use std::path::Path;

use sasrecllm::config::ExperimentConfig;

const INI: &str = "
[data]
dataset = synthetic
run_dir = runs/demo
synthetic_users = 120

[model]
model = sasrecllm
d1 = 16
d2 = 32

[train]
seeds = 1, 2, 3
patience = 3
stage_a.max_epochs = 25

[eval]
splits = test, warm_test, cold_test
";

fn main() -> Result<(), sasrecllm::Error> {
    let cfg = ExperimentConfig::parse(INI, Path::new("/tmp/experiments"), true)?;
    println!("model {} on {:?}, seeds {:?}", cfg.model.kind.name(), cfg.data.dataset, cfg.train.seeds);
    println!("run dir {}", cfg.data.run_dir.display());
    let s = cfg.stages_for_seed(2);
    for (name, t) in [("A", &s.a), ("B", &s.b), ("C", &s.c)] {
        println!(
            "stage {name}: batch {}, {} epochs, patience {}, lr {}, seed {}",
            t.batch_size, t.max_epochs, t.patience, t.peak_lr, t.seed
        );
    }
    println!("config hash {}", cfg.hash(0));

    let err = ExperimentConfig::parse("[model]\nd1 = 0x10\n", Path::new("."), true).unwrap_err();
    println!("bad value -> {err}");
    Ok(())
}
