//! Shapes-15: a synthetic segmentation suite with fifteen shape classes.
//!
//! Class `k` (1-based) combines a shape family, cycled by `(k − 1) mod 5`,
//! with one of three size bands, `(k − 1) / 5`. Each class also has a fixed
//! style: the band sets the intensity and the family sets the texture, so
//! every class is recognizable from a small neighbourhood. Every image holds
//! one non-overlapping instance of each class on a zero background.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::target::{Sample, NUM_CLASSES};
use crate::tensor::Array;

const BANDS: [(f64, f64); 3] = [(1.5, 1.9), (2.0, 2.4), (2.5, 2.9)];
const INTENSITY: [f64; 3] = [0.45, 0.7, 0.95];
/// Relative intensity of the "off" cells of a textured shape.
const TEXTURE_LOW: f64 = 0.55;
const GAP: f64 = 0.5;
const PLACEMENT_TRIES: usize = 400;
const IMAGE_TRIES: usize = 50;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    Circle,
    Square,
    Triangle,
    Ring,
    Bar,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Texture {
    Solid,
    HorizontalStripes,
    VerticalStripes,
    Checker,
    Diagonal,
}

impl Texture {
    fn factor(self, x: usize, y: usize) -> f64 {
        let on = match self {
            Texture::Solid => true,
            Texture::HorizontalStripes => y % 2 == 0,
            Texture::VerticalStripes => x % 2 == 0,
            Texture::Checker => (x + y) % 2 == 0,
            Texture::Diagonal => (x + 4 - y % 4) % 4 < 2,
        };
        if on {
            1.0
        } else {
            TEXTURE_LOW
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ShapesTaskSpec {
    pub class_id: u8,
    pub family: Family,
    /// Range of the defining radius.
    pub size: (f64, f64),
    pub intensity: f64,
    pub texture: Texture,
}

impl ShapesTaskSpec {
    pub fn for_class(class_id: u8) -> Self {
        assert!((1..=NUM_CLASSES as u8).contains(&class_id), "class {class_id}");
        let k = (class_id - 1) as usize;
        let family = [
            Family::Circle,
            Family::Square,
            Family::Triangle,
            Family::Ring,
            Family::Bar,
        ][k % 5];
        let texture = [
            Texture::Solid,
            Texture::HorizontalStripes,
            Texture::VerticalStripes,
            Texture::Checker,
            Texture::Diagonal,
        ][k % 5];
        ShapesTaskSpec {
            class_id,
            family,
            size: BANDS[k / 5],
            intensity: INTENSITY[k / 5],
            texture,
        }
    }

    pub fn all() -> Vec<Self> {
        (1..=NUM_CLASSES as u8).map(Self::for_class).collect()
    }
}

/// A class instance at a concrete position.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct PlacedShape {
    pub class_id: u8,
    pub family: Family,
    pub cx: f64,
    pub cy: f64,
    pub radius: f64,
}

impl PlacedShape {
    /// Radius of a disc around the center that contains the whole shape.
    pub fn bound(&self) -> f64 {
        bound(self.family, self.radius)
    }

    /// Analytic membership test for the point `(x, y)`.
    pub fn contains(&self, x: f64, y: f64) -> bool {
        let dx = x - self.cx;
        let dy = y - self.cy;
        let r = self.radius;
        match self.family {
            Family::Circle => dx * dx + dy * dy <= r * r,
            Family::Square => dx.abs() <= 0.75 * r && dy.abs() <= 0.75 * r,
            Family::Triangle => {
                // equilateral, circumradius r, apex up (y grows downwards)
                let s3 = 3f64.sqrt();
                dy <= 0.5 * r && s3 * dx - dy <= r && -s3 * dx - dy <= r
            }
            Family::Ring => {
                let d2 = dx * dx + dy * dy;
                d2 <= r * r && d2 >= 0.25 * r * r
            }
            Family::Bar => dx.abs() <= r && dy.abs() <= r / 3.0,
        }
    }
}

fn bound(family: Family, r: f64) -> f64 {
    match family {
        Family::Circle | Family::Ring | Family::Triangle => r,
        Family::Square => 0.75 * r * 2f64.sqrt(),
        Family::Bar => r * (1.0 + 1.0 / 9.0f64).sqrt(),
    }
}

/// One image with its label map and the shapes that produced it.
pub fn render(shapes: &[PlacedShape], size: usize) -> Sample {
    let mut pixels = vec![0.0; size * size];
    let mut labels = vec![0u8; size * size];
    for s in shapes {
        let tex = ShapesTaskSpec::for_class(s.class_id);
        for y in 0..size {
            for x in 0..size {
                if s.contains(x as f64 + 0.5, y as f64 + 0.5) {
                    labels[y * size + x] = s.class_id;
                    pixels[y * size + x] = tex.intensity * tex.texture.factor(x, y);
                }
            }
        }
    }
    Sample {
        image: Array::new(vec![1, size, size], pixels).unwrap(),
        labels,
    }
}

/// Place all fifteen classes without overlap, largest first. Fails only if
/// a shape cannot be placed within the retry budget.
pub fn place_shapes(rng: &mut impl Rng, size: usize) -> Option<Vec<PlacedShape>> {
    let mut specs = ShapesTaskSpec::all();
    specs.sort_by(|a, b| b.size.0.total_cmp(&a.size.0).then(a.class_id.cmp(&b.class_id)));
    let mut placed: Vec<PlacedShape> = Vec::with_capacity(specs.len());
    for spec in specs {
        let radius = rng.random_range(spec.size.0..spec.size.1);
        let b = bound(spec.family, radius);
        let lo = b;
        let hi = size as f64 - b;
        let mut ok = None;
        for _ in 0..PLACEMENT_TRIES {
            let cx = rng.random_range(lo..hi);
            let cy = rng.random_range(lo..hi);
            let clear = placed.iter().all(|p| {
                let d2 = (p.cx - cx).powi(2) + (p.cy - cy).powi(2);
                d2 >= (p.bound() + b + GAP).powi(2)
            });
            if clear {
                ok = Some(PlacedShape {
                    class_id: spec.class_id,
                    family: spec.family,
                    cx,
                    cy,
                    radius,
                });
                break;
            }
        }
        placed.push(ok?);
    }
    placed.sort_by_key(|p| p.class_id);
    Some(placed)
}

/// Draw one complete image; every class mask is guaranteed non-empty.
pub fn generate_image(rng: &mut impl Rng, size: usize) -> Result<(Sample, Vec<PlacedShape>)> {
    for _ in 0..IMAGE_TRIES {
        let Some(shapes) = place_shapes(rng, size) else {
            continue;
        };
        let sample = render(&shapes, size);
        let complete = (1..=NUM_CLASSES as u8).all(|k| sample.labels.contains(&k));
        if complete {
            return Ok((sample, shapes));
        }
    }
    Err(Error::Generation(format!(
        "could not place {NUM_CLASSES} shapes on a {size}x{size} canvas after {IMAGE_TRIES} attempts"
    )))
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClientShard {
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub image_size: usize,
    pub clients: Vec<ClientShard>,
}

/// Per-client images split 4:1 into train and test. Each client draws from
/// its own random stream, so shards are independent of the client count.
pub fn generate_dataset(
    num_clients: usize,
    images_per_client: usize,
    image_size: usize,
    seed: u64,
) -> Result<Dataset> {
    if images_per_client < 10 {
        return Err(Error::config("images_per_client", "must be >= 10"));
    }
    if image_size < 16 {
        return Err(Error::config("image_size", "must be >= 16"));
    }
    let mut clients = Vec::with_capacity(num_clients);
    for c in 0..num_clients {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(c as u64 + 1);
        let mut images = Vec::with_capacity(images_per_client);
        for _ in 0..images_per_client {
            images.push(generate_image(&mut rng, image_size)?.0);
        }
        let n_train = images_per_client * 4 / 5;
        let test = images.split_off(n_train);
        clients.push(ClientShard {
            train: images,
            test,
        });
    }
    Ok(Dataset {
        image_size,
        clients,
    })
}

/// Binary 8-bit PGM.
pub fn write_pgm(path: &Path, width: usize, height: usize, pixels: &[u8], maxval: u8) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write!(f, "P5\n{width} {height}\n{maxval}\n").map_err(|e| Error::io(path, e))?;
    f.write_all(pixels).map_err(|e| Error::io(path, e))
}

#[derive(Serialize)]
struct Manifest<'a> {
    seed: u64,
    image_size: usize,
    classes: Vec<ShapesTaskSpec>,
    clients: Vec<ManifestClient<'a>>,
}

#[derive(Serialize)]
struct ManifestClient<'a> {
    client: usize,
    train: Vec<&'a str>,
    test: Vec<&'a str>,
}

/// Write every image and label map as PGM files plus a `manifest.json`.
pub fn export_dataset(data: &Dataset, seed: u64, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let n = data.image_size;
    let mut names: Vec<(Vec<String>, Vec<String>)> = Vec::new();
    for (c, shard) in data.clients.iter().enumerate() {
        let mut split_names = (Vec::new(), Vec::new());
        for (split, samples, out) in [
            ("train", &shard.train, &mut split_names.0),
            ("test", &shard.test, &mut split_names.1),
        ] {
            for (i, s) in samples.iter().enumerate() {
                let stem = format!("client{c}_{split}_{i:04}");
                let px: Vec<u8> = s
                    .image
                    .data()
                    .iter()
                    .map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8)
                    .collect();
                write_pgm(&dir.join(format!("{stem}_image.pgm")), n, n, &px, 255)?;
                write_pgm(&dir.join(format!("{stem}_labels.pgm")), n, n, &s.labels, NUM_CLASSES as u8)?;
                out.push(stem);
            }
        }
        names.push(split_names);
    }
    let manifest = Manifest {
        seed,
        image_size: n,
        classes: ShapesTaskSpec::all(),
        clients: names
            .iter()
            .enumerate()
            .map(|(c, (tr, te))| ManifestClient {
                client: c,
                train: tr.iter().map(String::as_str).collect(),
                test: te.iter().map(String::as_str).collect(),
            })
            .collect(),
    };
    let path = dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest)?;
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}
