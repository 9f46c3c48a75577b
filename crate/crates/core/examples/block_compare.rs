//! Validation Dice per epoch for each block kind under identical seeds.

use continuum::data::{synth_blobs, BlobCount};
use continuum::experiments::TAU;
use continuum::unet::{convergence_compare, BlockKind, TrainConfig, UNetConfig};

fn main() -> continuum::Result<()> {
    let data = synth_blobs(120, 32, BlobCount::default(), 2)?;
    let base = UNetConfig {
        steps_per_block: 2,
        ..UNetConfig::default()
    };
    let tcfg = TrainConfig {
        epochs: 8,
        batch_size: 8,
        seed: 2,
        ..TrainConfig::default()
    };
    let result = convergence_compare(&BlockKind::ALL, &base, &data, &tcfg)?;
    print!("{}", result.to_csv());
    for (kind, e) in result.epochs_to_tau(TAU) {
        match e {
            Some(e) => println!("{kind}: dice {TAU} after {e} epochs"),
            None => println!("{kind}: dice {TAU} not reached"),
        }
    }
    Ok(())
}
