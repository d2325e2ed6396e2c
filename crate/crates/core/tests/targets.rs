// SPDX-License-Identifier: MIT OR Apache-2.0

//! Target-model presets train below their stated loss ceilings.

use spd_core::experiment::preset;
use spd_core::train::train_target;

fn final_loss(name: &str, seed: u64) -> (f64, f64) {
    let cfg = preset(name).unwrap();
    let mut model = cfg.model.build(seed);
    let curve = train_target(
        &mut model,
        &cfg.distribution(),
        &cfg.target,
        seed,
        |_, _| {},
    )
    .unwrap();
    let ceiling = cfg.target.loss_ceiling.expect("preset states a ceiling");
    (curve.tail_mean(100).unwrap(), ceiling)
}

#[test]
fn tms_5_2_target_reaches_its_ceiling() {
    for seed in [0, 1, 2] {
        let (loss, ceiling) = final_loss("tms_5_2", seed);
        assert!(
            loss < ceiling,
            "seed {seed}: final loss {loss:.3e} vs ceiling {ceiling:.3e}"
        );
    }
}

#[test]
fn tms_5_2_id_target_reaches_its_ceiling() {
    let (loss, ceiling) = final_loss("tms_5_2_id", 0);
    assert!(
        loss < ceiling,
        "final loss {loss:.3e} vs ceiling {ceiling:.3e}"
    );
}
