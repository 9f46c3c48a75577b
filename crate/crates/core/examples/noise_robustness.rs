//! Train DB and PLN nets on the same blobs, then score both on noisy copies
//! of the validation split.

use continuum::data::{synth_blobs, train_val_split, BlobCount};
use continuum::experiments::{noise_rows, DEFAULT_SIGMAS};
use continuum::unet::{train_split, BlockKind, ContinuousUNet, TrainConfig, UNetConfig};

fn main() -> continuum::Result<()> {
    let data = synth_blobs(120, 32, BlobCount::default(), 1)?;
    let (tr, va) = train_val_split(&data, 1);
    let tcfg = TrainConfig {
        epochs: 10,
        batch_size: 8,
        seed: 1,
        ..TrainConfig::default()
    };
    for kind in [BlockKind::DB, BlockKind::PLN] {
        let cfg = UNetConfig {
            steps_per_block: 2,
            ..UNetConfig::with_kind(kind)
        };
        let mut net = ContinuousUNet::build(&cfg, 1)?;
        train_split(&mut net, &tr, &va, &tcfg)?;
        for row in noise_rows(&net, &va, &DEFAULT_SIGMAS, 1)? {
            println!(
                "{kind:<4} sigma {:.1}  dice {:.4}  acc {:.4}  ahd {:.3}",
                row.sigma, row.report.dice, row.report.accuracy, row.report.ahd
            );
        }
    }
    Ok(())
}
