//! The conventional recommenders side by side on a small synthetic world.

use sasrecllm::baselines::{McModel, MfModel, NcfModel, RnnModel};
use sasrecllm::data::prepare_bundle;
use sasrecllm::synthetic::{generate, SyntheticConfig};
use sasrecllm::training::TrainConfig;

fn main() -> Result<(), sasrecllm::Error> {
    let world = generate(&SyntheticConfig {
        users: 150,
        items: 80,
        ..SyntheticConfig::default()
    })?;
    let b = prepare_bundle(&world.records)?;
    let (users, items) = (b.num_users(), b.num_items());
    let cfg = TrainConfig {
        batch_size: 64,
        max_epochs: 30,
        patience: 4,
        peak_lr: 5e-3,
        ..TrainConfig::default()
    };

    let mut mf = MfModel::new(users, items, 16, 0.1, 1)?;
    mf.observe(&b.train);
    mf.fit(&b, &cfg, "mf")?;
    let mut ncf = NcfModel::new(users, items, 16, &[32, 16], 0.1, 1)?;
    ncf.fit(&b, &cfg, "ncf")?;
    let mut rnn = RnnModel::new(items, 16, 10, 0.1, 1)?;
    rnn.fit(&b, &cfg, "rnn")?;
    let mc = McModel::fit(&b.train, items);

    let results = [
        ("mf", mf.evaluate(&b.test)?.0),
        ("ncf", ncf.evaluate(&b.test)?.0),
        ("rnn", rnn.evaluate(&b.test)?.0),
        ("mc", mc.evaluate(&b.test)?.0),
    ];
    for (name, r) in results {
        println!("{name:>4}: auc {:?} uauc {:?} log loss {:.4}", r.auc, r.uauc, r.logloss);
    }
    Ok(())
}
