use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::Tensor;
use crate::error::{MctError, Result};
use crate::model::ModelConfig;
use crate::parallel::Execution;
use crate::training::LabelVector;

/// Grid geometry a dataset is generated for.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct SceneGeometry {
    pub num_classes: usize,
    pub grid_side: usize,
    pub patch_size: usize,
}

impl SceneGeometry {
    pub fn image_side(&self) -> usize {
        self.grid_side * self.patch_size
    }
}

impl From<&ModelConfig> for SceneGeometry {
    fn from(c: &ModelConfig) -> Self {
        Self {
            num_classes: c.num_classes,
            grid_side: c.grid_side,
            patch_size: c.patch_size,
        }
    }
}

/// One scene: image `3×S×S`, multi-hot labels and the patch-level mask
/// (`0` = background, `c + 1` = class `c`).
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSample {
    pub image: Tensor,
    pub labels: LabelVector,
    pub gt_mask: Vec<u8>,
}

const NOISE_STD: f64 = 0.08;
const TEXTURE_AMPLITUDE: f64 = 0.12;
const MAX_OBJECTS: usize = 3;
const PLACEMENT_TRIES: usize = 64;
const SCENE_TRIES: usize = 32;

/// Mean RGB of class `c` out of `num_classes`: evenly spaced hues at high
/// saturation, so every pair differs by far more than the pixel noise.
pub fn class_color(c: usize, num_classes: usize) -> [f64; 3] {
    let hue = c as f64 / num_classes as f64;
    let (s, v) = (0.75, 0.85);
    let h6 = hue * 6.0;
    let f = h6 - h6.floor();
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    match h6.floor() as usize % 6 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

/// Class-specific texture offset at pixel `(y, x)`.
fn texture(c: usize, y: usize, x: usize) -> f64 {
    let on = match c % 3 {
        0 => (y / 2).is_multiple_of(2),
        1 => (x / 2).is_multiple_of(2),
        _ => (x + y).is_multiple_of(2),
    };
    if on {
        TEXTURE_AMPLITUDE
    } else {
        -TEXTURE_AMPLITUDE
    }
}

#[derive(Clone, Copy, Debug)]
enum Shape {
    Rect,
    Ellipse,
    Cross,
}

/// Patch cells of a shape with bounding box `h×w` anchored at `(top, left)`.
fn shape_cells(shape: Shape, top: usize, left: usize, h: usize, w: usize) -> Vec<(usize, usize)> {
    let mut cells = Vec::new();
    for dy in 0..h {
        for dx in 0..w {
            let keep = match shape {
                Shape::Rect => true,
                Shape::Ellipse => {
                    let ny = (dy as f64 + 0.5) / h as f64 - 0.5;
                    let nx = (dx as f64 + 0.5) / w as f64 - 0.5;
                    ny * ny + nx * nx <= 0.25 + 1e-9
                }
                Shape::Cross => dy == h / 2 || dx == w / 2,
            };
            if keep {
                cells.push((top + dy, left + dx));
            }
        }
    }
    cells
}

fn size_range(n: usize) -> (usize, usize) {
    let lo = if n >= 4 { 2 } else { 1 };
    (lo, (n / 2).max(lo))
}

/// Tries to place one object of class `c`; returns false if no free spot was
/// found.
fn place(rng: &mut impl Rng, mask: &mut [u8], n: usize, c: usize) -> bool {
    let (lo, hi) = size_range(n);
    for _ in 0..PLACEMENT_TRIES {
        let h = rng.random_range(lo..=hi);
        let w = rng.random_range(lo..=hi);
        let shape = match rng.random_range(0..3) {
            0 => Shape::Rect,
            1 => Shape::Ellipse,
            _ => Shape::Cross,
        };
        let top = rng.random_range(0..=n - h);
        let left = rng.random_range(0..=n - w);
        let cells = shape_cells(shape, top, left, h, w);
        if cells.is_empty() || cells.iter().any(|&(y, x)| mask[y * n + x] != 0) {
            continue;
        }
        for (y, x) in cells {
            mask[y * n + x] = (c + 1) as u8;
        }
        return true;
    }
    false
}

fn scene_mask(rng: &mut impl Rng, geo: &SceneGeometry) -> Vec<u8> {
    let n = geo.grid_side;
    for _ in 0..SCENE_TRIES {
        let k = rng.random_range(1..=MAX_OBJECTS.min(geo.num_classes));
        let classes = sample_indices(rng, geo.num_classes, k);
        let mut mask = vec![0u8; n * n];
        if classes.iter().all(|c| place(rng, &mut mask, n, c)) {
            return mask;
        }
    }
    // a single-patch object always fits an empty grid
    let mut mask = vec![0u8; n * n];
    let c = rng.random_range(0..geo.num_classes);
    mask[rng.random_range(0..n * n)] = (c + 1) as u8;
    mask
}

fn render(rng: &mut impl Rng, geo: &SceneGeometry, mask: &[u8]) -> Tensor {
    let (n, p, side) = (geo.grid_side, geo.patch_size, geo.image_side());
    let noise = Normal::new(0.0, NOISE_STD).expect("valid std");
    let background = rng.random_range(0.35..0.55);
    let mut data = vec![0.0; 3 * side * side];
    for y in 0..side {
        for x in 0..side {
            let label = mask[(y / p) * n + x / p];
            for ch in 0..3 {
                let base = if label == 0 {
                    background
                } else {
                    let c = (label - 1) as usize;
                    class_color(c, geo.num_classes)[ch] + texture(c, y, x)
                };
                data[(ch * side + y) * side + x] = base + noise.sample(rng);
            }
        }
    }
    Tensor::new(&[3, side, side], data).expect("image shape")
}

/// Sample `index` of the dataset seeded with `seed`. Each sample has its own
/// ChaCha stream so samples can be generated independently.
pub fn generate_sample(seed: u64, index: u64, geo: &SceneGeometry) -> SyntheticSample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    let gt_mask = scene_mask(&mut rng, geo);
    let image = render(&mut rng, geo, &gt_mask);
    let present: Vec<usize> = (0..geo.num_classes)
        .filter(|&c| gt_mask.contains(&((c + 1) as u8)))
        .collect();
    let labels = LabelVector::from_indices(geo.num_classes, &present).expect("scene has an object");
    SyntheticSample { image, labels, gt_mask }
}

pub fn generate_dataset(seed: u64, count: usize, geo: &SceneGeometry, exec: Execution) -> Result<Vec<SyntheticSample>> {
    if count == 0 {
        return Err(MctError::Config("dataset count must be >= 1".into()));
    }
    if geo.num_classes == 0 || geo.num_classes > 254 || geo.grid_side < 2 || geo.patch_size == 0 {
        return Err(MctError::Config(format!("unsupported scene geometry {geo:?}")));
    }
    Ok(exec.map_indexed(count, |i| generate_sample(seed, i as u64, geo)))
}
