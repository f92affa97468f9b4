//! Write a tiny IDX image/label pair and load it back as a dataset
//! scaled into [0, 1].

use adlab::data::{load_idx, write_idx};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dir = tempfile::tempdir()?;
    let (images, labels) = (dir.path().join("images.idx3"), dir.path().join("labels.idx1"));
    let (rows, cols) = (4, 4);
    let pixels: Vec<u8> = (0..3 * rows * cols).map(|i| (i * 17 % 256) as u8).collect();
    write_idx(&images, &labels, rows, cols, &pixels, &[0, 1, 2])?;

    let data = load_idx(&images, &labels, [0.0, 1.0])?;
    println!("{} samples of dimension {}, labels {:?}", data.len(), data.dims(), data.labels);
    println!("first image: {:?}", &data.x.row(0)[..cols]);
    Ok(())
}
