//! Generates the synthetic fine-grained toy dataset as folder-per-class
//! PNGs: every class shares the same vehicle-like base; only a small
//! dot-matrix badge differs.
//!
//!   cargo run --release --example make_toy_data -- [out_dir]

use antinoise::data::{make_toy_dataset, write_folder_dataset};
use std::path::PathBuf;

fn main() -> anyhow::Result<()> {
    let out: PathBuf = std::env::args()
        .nth(1)
        .map(Into::into)
        .unwrap_or_else(|| "toy_data".into());
    let ds = make_toy_dataset(8, 50, 64, 1);
    write_folder_dataset(&ds, &out)?;
    println!(
        "wrote {} images, {} classes, to {}",
        ds.len(),
        ds.num_classes(),
        out.display()
    );
    Ok(())
}
