//! Per-component checkpoints: save everything, then swap only the encoder
//! into a differently initialised system.

use sasrecllm::checkpoint::Checkpoint;
use sasrecllm::orchestrate::pnp_load;
use sasrecllm::system::{System, SystemConfig};
use sasrecllm::vocab::Vocab;
use sasrecllm::Component;

fn main() -> Result<(), sasrecllm::Error> {
    let vocab = Vocab::build(["some words for the titles"]);
    let cfg = SystemConfig::desk(30, vocab.len());
    let donor = System::new(cfg.clone(), vocab.clone(), 1)?;
    let mut target = System::new(cfg, vocab, 2)?;

    let dir = std::env::temp_dir().join(format!("checkpoints_{}", std::process::id()));
    let mut c = Checkpoint::capture(&donor.store, &donor.component_hashes(), &[])?;
    c.stage = "demo".into();
    c.save(&dir)?;
    println!("saved {} tensors across {:?}", c.tensors.len(), c.components());

    let differs = |a: &System, b: &System, comp: Component| {
        a.store
            .iter()
            .zip(b.store.iter())
            .filter(|((_, p), _)| p.component == comp)
            .any(|((_, p), (_, q))| !p.value.bit_eq(&q.value))
    };
    pnp_load(&dir, Component::Sasrec, &mut target)?;
    for comp in [Component::Sasrec, Component::Mapping, Component::Lora, Component::LlmBase] {
        println!("{:>8} differs from donor: {}", comp.name(), differs(&donor, &target, comp));
    }
    std::fs::remove_dir_all(&dir).ok();
    Ok(())
}
