//! Seeded synthetic dataset generator.
//!
//! Plants bright class-colored blobs with known centroids on noisy
//! backgrounds, so curation and counting invariants can be exercised end
//! to end without real imagery. Images are written as OVCT tensors and
//! annotations as the normalized JSONL schema. Instance counts straddle
//! the minimum-instance filter boundary on purpose: some samples carry
//! exactly 3 instances (dropped) and some exactly 4 (kept).

use std::path::{Path, PathBuf};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::curation::{DetectionRecord, Geometry};
use crate::error::{Error, Result};
use crate::io;
use crate::tensor::Tensor;

/// Object classes the generator knows how to draw.
pub const FIXTURE_CLASSES: [&str; 4] = ["disc", "square", "ring", "cross"];

const CLASS_COLORS: [[f64; 3]; 4] = [
    [0.9, 0.2, 0.1],
    [0.1, 0.9, 0.2],
    [0.2, 0.1, 0.9],
    [0.7, 0.7, 0.1],
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FixtureSpec {
    pub images: usize,
    pub seed: u64,
    /// Square image side; must be divisible by 32 for the fixture encoder.
    pub size: usize,
}

impl Default for FixtureSpec {
    fn default() -> Self {
        FixtureSpec {
            images: 20,
            seed: 7,
            size: 64,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FixtureSummary {
    pub images: usize,
    pub instances: usize,
    pub image_dir: PathBuf,
    pub annotation_path: PathBuf,
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

fn draw_blob(pixels: &mut [f64], size: usize, class_idx: usize, cx: f64, cy: f64, r: f64) {
    let color = CLASS_COLORS[class_idx];
    let lo_y = (cy - r).floor().max(0.0) as usize;
    let hi_y = ((cy + r).ceil() as usize).min(size - 1);
    let lo_x = (cx - r).floor().max(0.0) as usize;
    let hi_x = ((cx + r).ceil() as usize).min(size - 1);
    for y in lo_y..=hi_y {
        for x in lo_x..=hi_x {
            let dx = x as f64 + 0.5 - cx;
            let dy = y as f64 + 0.5 - cy;
            let dist = (dx * dx + dy * dy).sqrt();
            let inside = match class_idx {
                0 => dist <= r,
                1 => dx.abs() <= r && dy.abs() <= r,
                2 => dist <= r && dist >= r - 1.25,
                _ => dx.abs() <= 0.9 || dy.abs() <= 0.9,
            };
            if inside {
                let px = &mut pixels[(y * size + x) * 3..(y * size + x) * 3 + 3];
                for (p, &c) in px.iter_mut().zip(&color) {
                    *p = (*p + 0.8 * c).min(1.0);
                }
            }
        }
    }
}

/// One generated image with its instance annotations.
#[derive(Debug, Clone)]
pub struct FixtureImage {
    pub image_id: String,
    pub image: Tensor,
    pub records: Vec<DetectionRecord>,
}

/// Generates the dataset in memory. Deterministic in (spec.images,
/// spec.seed, spec.size); every value is snapped to f32 so the in-memory
/// tensors match their on-disk form exactly.
pub fn generate_images(spec: &FixtureSpec) -> Result<Vec<FixtureImage>> {
    if spec.size == 0 || !spec.size.is_multiple_of(32) {
        return Err(Error::arg(
            "fixtures",
            format!("image size {} must be a positive multiple of 32", spec.size),
        ));
    }
    if spec.images == 0 {
        return Err(Error::arg("fixtures", "need at least one image".to_string()));
    }
    let size = spec.size;
    let mut out = Vec::with_capacity(spec.images);
    for idx in 0..spec.images {
        let image_id = format!("img{idx:04}");
        let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(spec.seed) ^ splitmix64(idx as u64));

        let mut pixels = vec![0.0f64; size * size * 3];
        for p in pixels.iter_mut() {
            *p = 0.08 + rng.random_range(0.0..0.05);
        }

        // 1 to 3 distinct classes per image, chosen in class order.
        let n_classes = rng.random_range(1..=3usize);
        let mut class_ids: Vec<usize> = (0..FIXTURE_CLASSES.len()).collect();
        for i in 0..n_classes {
            let j = rng.random_range(i..class_ids.len());
            class_ids.swap(i, j);
        }
        let mut class_ids = class_ids[..n_classes].to_vec();
        class_ids.sort_unstable();

        let mut records = Vec::new();
        let mut instance_serial = 0usize;
        for class_idx in class_ids {
            // Weighted counts: the 3/4 boundary shows up regularly.
            let roll = rng.random_range(0..100u32);
            let count = if roll < 18 {
                3
            } else if roll < 36 {
                4
            } else {
                rng.random_range(5..=11usize)
            };
            for _ in 0..count {
                let r = rng.random_range(2.0..3.5f64);
                let margin = r + 1.5;
                let cx = rng.random_range(margin..size as f64 - margin);
                let cy = rng.random_range(margin..size as f64 - margin);
                draw_blob(&mut pixels, size, class_idx, cx, cy, r);
                // Every fifth instance is annotated as a diamond quad; its
                // vertex mean is still the blob center.
                let geometry = if instance_serial % 5 == 4 {
                    Geometry::Quad([
                        [cx, cy - r],
                        [cx + r, cy],
                        [cx, cy + r],
                        [cx - r, cy],
                    ])
                } else {
                    Geometry::Box([cx - r, cy - r, cx + r, cy + r])
                };
                instance_serial += 1;
                records.push(DetectionRecord {
                    image_id: image_id.clone(),
                    width: size,
                    height: size,
                    class: FIXTURE_CLASSES[class_idx].to_string(),
                    geometry,
                });
            }
        }

        // Snap to the f32 grid the OVCT file will hold.
        for p in pixels.iter_mut() {
            *p = *p as f32 as f64;
        }
        out.push(FixtureImage {
            image_id,
            image: Tensor::new(vec![size, size, 3], pixels)?,
            records,
        });
    }
    Ok(out)
}

/// Writes images (OVCT) and annotations (JSONL) under `out`.
pub fn generate_dataset(spec: &FixtureSpec, out: &Path) -> Result<FixtureSummary> {
    let images = generate_images(spec)?;
    let image_dir = out.join("images");
    std::fs::create_dir_all(&image_dir).map_err(|e| Error::io(&image_dir, e))?;
    let mut lines = String::new();
    let mut instances = 0;
    for img in &images {
        io::save_tensor(&image_dir.join(format!("{}.ovct", img.image_id)), &img.image)?;
        for r in &img.records {
            lines.push_str(&serde_json::to_string(r)?);
            lines.push('\n');
            instances += 1;
        }
    }
    let annotation_path = out.join("annotations.jsonl");
    std::fs::write(&annotation_path, lines).map_err(|e| Error::io(&annotation_path, e))?;
    Ok(FixtureSummary {
        images: images.len(),
        instances,
        image_dir,
        annotation_path,
    })
}
