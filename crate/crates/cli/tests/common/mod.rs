#![allow(dead_code)]

use std::path::{Path, PathBuf};

use narrator_core::dataset::{DatasetManifest, ManifestEntry};
use narrator_core::{Raster, Split};

pub const REFERENCES: &[&str] = &[
    "Five villas are built on both sides of the road.",
    "Some houses appear along the street.",
    "Several trees are removed near the parking lot.",
    "A warehouse is constructed beside the river.",
    "The scene remains the same with no change in the area.",
];

/// Writes `n` distinct image pairs plus a manifest; returns
/// (manifest path, images root).
pub fn corpus(dir: &Path, n: usize) -> (PathBuf, PathBuf) {
    let images = dir.join("images");
    std::fs::create_dir_all(&images).unwrap();
    let entries = (0..n)
        .map(|i| {
            let mut a = Raster::filled(8, 6, [(i * 7) as u8, 30, 60]).unwrap();
            let mut b = a.clone();
            for x in 0..=(i % 8) as u32 {
                a.set_pixel(x, 0, [200, i as u8, 0]);
                b.set_pixel(x, 5, [0, 200, i as u8]);
            }
            std::fs::write(images.join(format!("{i:03}_A.png")), a.to_png().unwrap()).unwrap();
            std::fs::write(images.join(format!("{i:03}_B.png")), b.to_png().unwrap()).unwrap();
            ManifestEntry {
                pair_id: format!("pair_{i:03}"),
                path_before: format!("{i:03}_A.png"),
                path_after: format!("{i:03}_B.png"),
                captions: vec![
                    REFERENCES[i % REFERENCES.len()].to_string(),
                    REFERENCES[(i + 1) % REFERENCES.len()].to_string(),
                ],
                split: if i % 5 == 4 { Split::Val } else { Split::Test },
            }
        })
        .collect();
    let manifest = dir.join("manifest.json");
    std::fs::write(&manifest, DatasetManifest { entries }.to_json()).unwrap();
    (manifest, images)
}

/// A run config with two mock backends, `cap` (vision) and `comp` (text).
pub fn mock_config(store: &Path, cache: &Path, out: &Path, strategy: &str, n: usize) -> String {
    let composer = if strategy == "step-by-step" { "comp" } else { "cap" };
    format!(
        r#"store = {store:?}
strategy = "{strategy}"
captioner = "cap"
composer = "{composer}"
n = {n}
seed = 11
cache = {cache:?}
parallelism = 3
out = {out:?}

[[backends]]
name = "cap"
kind = "mock"
model_id = "mock-vision"
supports_images = true

[[backends]]
name = "comp"
kind = "mock"
model_id = "mock-text"
supports_images = false
"#
    )
}
