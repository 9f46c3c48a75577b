//! Train a small continuous U-Net on synthetic blobs and save a checkpoint.
//!
//! cargo run --release --example train_blobs -- [epochs] [checkpoint path]

use std::path::PathBuf;

use continuum::data::{synth_blobs, BlobCount};
use continuum::unet::{train, BlockKind, ContinuousUNet, TrainConfig, UNetConfig};

fn main() -> continuum::Result<()> {
    let mut args = std::env::args().skip(1);
    let epochs = args.next().map_or(8, |a| a.parse().expect("epochs"));
    let path = args.next().map_or_else(|| std::env::temp_dir().join("blobs.ckpt"), PathBuf::from);

    let data = synth_blobs(120, 32, BlobCount::default(), 0)?;
    let cfg = UNetConfig {
        steps_per_block: 2,
        ..UNetConfig::with_kind(BlockKind::DB)
    };
    let mut net = ContinuousUNet::build(&cfg, 0)?;
    println!("{} parameters", net.num_params());
    let tcfg = TrainConfig {
        epochs,
        batch_size: 8,
        ..TrainConfig::default()
    };
    let log = train(&mut net, &data, &tcfg)?;
    for r in &log.rows {
        println!("epoch {:>3}  loss {:.4}  val dice {:.4}", r.epoch, r.loss, r.val_dice);
    }
    net.save(&path)?;
    println!("saved {}", path.display());
    Ok(())
}
