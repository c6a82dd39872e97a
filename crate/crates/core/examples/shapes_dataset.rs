//! Generates synthetic scenes, saves one as a PPM and exports a split.
//!
//!     cargo run --example shapes_dataset -- [out_dir]

use std::path::PathBuf;

use protoneck::data::{generate, load, pad_to_square, read_export, write_export, DatasetSpec, Split, SHAPE_NAMES};
use protoneck::viz::photo;

fn main() -> protoneck::Result<()> {
    let out = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "runs/examples/shapes".into()));
    std::fs::create_dir_all(&out)?;
    let spec = DatasetSpec::default();
    for i in 0..3 {
        let s = load(1234, Split::Train, i, &spec)?;
        println!("train {i}:");
        for t in &s.targets {
            let b = t.bbox;
            println!("  {:<8} cx {:.3} cy {:.3} w {:.3} h {:.3}", SHAPE_NAMES[t.class], b.cx, b.cy, b.w, b.h);
        }
    }
    let first = load(1234, Split::Train, 0, &spec)?;
    photo(&first.image).write_ppm(&out.join("train_0.ppm"))?;

    // a 48×64 scene padded to 64×64: the bottom band of cells is masked
    let wide = DatasetSpec { height: 48, ..spec };
    let padded = pad_to_square(&generate(1234, 0, &wide)?, 64, spec.patch)?;
    let masked = padded.pad_mask.iter().filter(|&&m| m).count();
    println!("padded 48x64 -> 64x64: {masked} of {} cells masked", padded.pad_mask.len());

    let samples: Vec<_> = (0..16).map(|i| load(1234, Split::Val, i, &spec)).collect::<protoneck::Result<_>>()?;
    let path = out.join("val.bin");
    write_export(std::fs::File::create(&path)?, &samples)?;
    let back = read_export(std::fs::File::open(&path)?)?;
    println!("exported {} records to {}", back.len(), path.display());
    Ok(())
}
