//! One scene geometry rendered in every domain style, plus the heavy
//! photometric augmentation used for single-source training. Writes PPM
//! images and PGM label maps.
//!
//!     cargo run --example domains -- [out_dir]

use std::path::PathBuf;

use pinmem::domains::{default_domains, generate, heavy_augment, Augmentation, SceneConfig};
use pinmem::raster::{encode_pgm, encode_ppm, write_file};
use rand::SeedableRng;

fn main() -> pinmem::Result<()> {
    let out = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "target/examples/domains".into()));
    let scene = SceneConfig::default();
    let (h, w) = (scene.height, scene.width);
    let geometry = 42;

    let mut labels = None;
    for spec in default_domains() {
        let s = generate(&spec, &scene, geometry, 7)?;
        write_file(&out.join(format!("{}.ppm", spec.id)), &encode_ppm(&s.image, h, w))?;
        let mean: Vec<f64> = (0..3).map(|c| s.image[c * h * w..(c + 1) * h * w].iter().sum::<f64>() / (h * w) as f64).collect();
        println!("{:<7} mean rgb {:.2} {:.2} {:.2}", spec.id, mean[0], mean[1], mean[2]);
        // geometry alone decides the labels
        assert!(labels.as_ref().map_or(true, |l| *l == s.labels));
        labels = Some(s.labels);
    }
    let labels = labels.expect("at least one domain");
    // stretch class ids over the grey range, ignore pixels white
    let grey: Vec<u8> = labels.iter().map(|&l| if l == pinmem::batch::IGNORE_LABEL { 255 } else { l * 50 }).collect();
    write_file(&out.join("labels.pgm"), &encode_pgm(&grey, h, w))?;

    let heavy = Augmentation::heavy();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
    let base = generate(&default_domains()[0], &scene, geometry, 7)?;
    for k in 0..4 {
        let a = heavy_augment(&base, &heavy.jitter, &heavy.blur, &mut rng);
        assert_eq!(a.labels, base.labels);
        write_file(&out.join(format!("heavy_{k}.ppm")), &encode_ppm(&a.image, h, w))?;
    }
    println!("wrote images to {}", out.display());
    Ok(())
}
