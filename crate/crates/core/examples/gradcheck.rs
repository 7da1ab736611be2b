//! Finite differences against the tape's analytic gradients for the
//! encoder's next-item loss.

use sasrecllm::gradcheck::{gradcheck, GradcheckOptions};
use sasrecllm::sasrec::{standardize_sequence, SasrecConfig, SasrecModel};
use sasrecllm::{Mode, ParamStore, RngStream, Tape};

fn main() -> Result<(), sasrecllm::Error> {
    let cfg = SasrecConfig {
        num_items: 6,
        d1: 4,
        n: 5,
        blocks: 1,
        heads: 2,
        dropout: 0.0,
        init_std: 0.5,
    };
    let mut store = ParamStore::new();
    let model = SasrecModel::new(cfg, &mut store, &mut RngStream::new(4))?;
    let seq = standardize_sequence(1, &[3, 1, 4, 1, 5, 6], 5)?;
    let opts = GradcheckOptions {
        delta: 1e-4,
        coords_per_param: None,
        seed: 0,
    };
    let r = gradcheck(
        &mut store,
        |s| {
            let mut tape = Tape::new(s);
            let (l, _) = model
                .sequence_loss(&mut tape, &seq, Mode::Eval, &mut RngStream::new(9))?
                .expect("sequence has targets");
            let loss = tape.scalar(l);
            Ok((loss, tape.backward(l)?.into_params()))
        },
        &opts,
    )?;
    println!(
        "{} coordinates, max relative error {:.2e} (worst {:?}), largest gradient {:.3}",
        r.checked, r.max_rel_error, r.worst, r.max_abs_grad
    );
    Ok(())
}
