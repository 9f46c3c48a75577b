//! Write synthetic blob images and masks as PNG pairs, then read them back
//! the way real datasets are ingested.
//!
//! cargo run --release --example blobs_to_png -- <dir>

use std::path::PathBuf;

use continuum::data::{load_image_dir, save_sample_png, synth_blobs, BlobCount};

fn main() -> continuum::Result<()> {
    let dir = std::env::args().nth(1).map_or_else(|| std::env::temp_dir().join("blobs"), PathBuf::from);
    let (images, masks) = (dir.join("images"), dir.join("masks"));
    for d in [&images, &masks] {
        std::fs::create_dir_all(d).expect("create output directory");
    }
    let samples = synth_blobs(8, 64, BlobCount { min: 1, max: 4 }, 7)?;
    for (i, s) in samples.iter().enumerate() {
        let name = format!("blob{i:02}.png");
        save_sample_png(s, &images.join(&name), &masks.join(&name))?;
    }
    let loaded = load_image_dir(&images, &masks, 32)?;
    let fg: f64 = loaded.iter().map(|s| s.mask.sum()).sum::<f64>() / (loaded.len() * 32 * 32) as f64;
    println!("{} pairs in {}, resized to 32x32, foreground fraction {fg:.3}", loaded.len(), dir.display());
    Ok(())
}
