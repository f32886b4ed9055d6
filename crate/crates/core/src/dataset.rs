//! Synthetic multi-object sprite scenes with instance labels.
//!
//! Every sample is a pure function of `(spec, split seed, index)`, so serial
//! and parallel generation agree bitwise.
//!
//! Split files are little-endian:
//!
//! ```text
//! 8 bytes   magic "SLOTDSET"
//! u32       format version (1)
//! u32       header length J
//! J bytes   UTF-8 JSON {"spec": SceneSpec, "count", "height", "width"}
//! count ×   u32 object_count
//!           H·W·3 f32 image values in [-1, 1], row-major, RGB interleaved
//!           H·W u8 labels, 0 = background
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"SLOTDSET";
pub const VERSION: u32 = 1;
const PLACEMENT_RETRIES: usize = 100;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shape {
    Circle,
    Square,
    Triangle,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSpec {
    pub height: usize,
    pub width: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    pub shapes: Vec<Shape>,
    /// Bounding-box side in pixels, inclusive range.
    pub min_size: usize,
    pub max_size: usize,
    pub palette: Vec<[u8; 3]>,
    pub background: [u8; 3],
    pub allow_occlusion: bool,
    pub seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            height: 32,
            width: 32,
            min_objects: 2,
            max_objects: 6,
            shapes: vec![Shape::Circle, Shape::Square, Shape::Triangle],
            min_size: 6,
            max_size: 10,
            palette: vec![
                [230, 25, 75],
                [60, 180, 75],
                [255, 225, 25],
                [0, 130, 200],
                [245, 130, 48],
                [145, 30, 180],
                [70, 240, 240],
                [240, 50, 230],
                [250, 190, 212],
                [128, 128, 0],
            ],
            background: [40, 40, 40],
            allow_occlusion: true,
            seed: 0,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(format!("scene spec: {msg}")));
        if self.min_objects < 1 || self.min_objects > self.max_objects {
            return fail(format!(
                "object range [{}, {}]",
                self.min_objects, self.max_objects
            ));
        }
        if self.max_objects > u8::MAX as usize {
            return fail("at most 255 objects fit 8-bit labels".into());
        }
        if self.shapes.is_empty() {
            return fail("no shapes".into());
        }
        if self.min_size < 3
            || self.min_size > self.max_size
            || self.max_size > self.height.min(self.width)
        {
            return fail(format!(
                "sizes [{}, {}] must be >= 3 and fit a {}x{} image",
                self.min_size, self.max_size, self.height, self.width
            ));
        }
        let mut distinct = self.palette.clone();
        distinct.sort();
        distinct.dedup();
        if distinct.len() != self.palette.len()
            || self.palette.len() < 8
            || self.palette.len() < self.max_objects
        {
            return fail("palette needs at least max(8, max_objects) distinct colors".into());
        }
        if self.palette.contains(&self.background) {
            return fail("background color must not be in the palette".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneSample {
    /// `[H, W, 3]`, values in `[-1, 1]` (exactly representable as `f32`).
    pub image: Tensor,
    /// `H * W` instance ids, row-major; 0 is background.
    pub labels: Vec<u8>,
    pub object_count: usize,
}

impl SceneSample {
    pub fn height(&self) -> usize {
        self.image.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.image.shape()[1]
    }
}

fn channel_value(c: u8) -> f64 {
    (c as f64 / 127.5 - 1.0) as f32 as f64
}

/// Whether offset `(dr, dc)` inside an `s × s` bounding box belongs to the
/// shape, testing the pixel center.
fn covers(shape: Shape, s: usize, dr: usize, dc: usize) -> bool {
    let (y, x) = (dr as f64 + 0.5, dc as f64 + 0.5);
    let s = s as f64;
    match shape {
        Shape::Square => true,
        Shape::Circle => {
            let r = s / 2.0;
            (y - r).powi(2) + (x - r).powi(2) <= r * r
        }
        // Apex at the top center, base along the bottom edge.
        Shape::Triangle => (x - s / 2.0).abs() <= y / 2.0,
    }
}

/// Renders one scene from `rng`.
pub fn generate_scene(spec: &SceneSpec, rng: &mut ChaCha8Rng) -> Result<SceneSample> {
    spec.validate()?;
    let (h, w) = (spec.height, spec.width);
    let count = rng.random_range(spec.min_objects..=spec.max_objects);
    let colors: Vec<[u8; 3]> = sample(rng, spec.palette.len(), count)
        .into_iter()
        .map(|i| spec.palette[i])
        .collect();
    let mut labels = vec![0u8; h * w];
    for id in 1..=count {
        let mut placed = false;
        for _ in 0..PLACEMENT_RETRIES {
            let shape = spec.shapes[rng.random_range(0..spec.shapes.len())];
            let size = rng.random_range(spec.min_size..=spec.max_size);
            let r0 = rng.random_range(0..=h - size);
            let c0 = rng.random_range(0..=w - size);
            let mut next = labels.clone();
            let mut overlap = false;
            for dr in 0..size {
                for dc in 0..size {
                    if covers(shape, size, dr, dc) {
                        let px = &mut next[(r0 + dr) * w + c0 + dc];
                        overlap |= *px != 0;
                        *px = id as u8;
                    }
                }
            }
            if overlap && !spec.allow_occlusion {
                continue;
            }
            let mut visible = vec![false; id + 1];
            next.iter().for_each(|&l| visible[l as usize] = true);
            if visible[1..].iter().all(|&v| v) {
                labels = next;
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(Error::Generation(format!(
                "could not place object {id} of {count} after {PLACEMENT_RETRIES} attempts"
            )));
        }
    }
    let mut image = Vec::with_capacity(h * w * 3);
    for &l in &labels {
        let c = if l == 0 {
            spec.background
        } else {
            colors[l as usize - 1]
        };
        image.extend(c.iter().map(|&v| channel_value(v)));
    }
    Ok(SceneSample {
        image: Tensor::new(&[h, w, 3], image)?,
        labels,
        object_count: count,
    })
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed of a named split ("train", "val", "test", ...) of a dataset seed.
pub fn split_seed(dataset_seed: u64, split: &str) -> u64 {
    // FNV-1a over the name, then mixed with the dataset seed.
    let name = split.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0100_0000_01b3)
    });
    splitmix64(splitmix64(dataset_seed) ^ name)
}

/// Seed of sample `index` within a split.
pub fn sample_seed(split_seed: u64, index: u64) -> u64 {
    splitmix64(splitmix64(split_seed).wrapping_add(index))
}

/// The scene at `index` of the split seeded by `split_seed`.
pub fn scene_at(spec: &SceneSpec, split_seed: u64, index: u64) -> Result<SceneSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(sample_seed(split_seed, index));
    generate_scene(spec, &mut rng)
}

/// The first `n` scenes (by index) with at most `max_objects` objects.
pub fn make_split(
    spec: &SceneSpec,
    n: usize,
    max_objects: usize,
    split_seed: u64,
) -> Result<Vec<SceneSample>> {
    spec.validate()?;
    if max_objects > spec.max_objects || max_objects < spec.min_objects {
        return Err(Error::contract(
            "make_split",
            format!(
                "max_objects {max_objects} outside [{}, {}]",
                spec.min_objects, spec.max_objects
            ),
        ));
    }
    let mut out = Vec::with_capacity(n);
    let mut start = 0u64;
    let chunk = (n as u64).max(64);
    while out.len() < n {
        let batch = (start..start + chunk)
            .into_par_iter()
            .map(|i| scene_at(spec, split_seed, i))
            .collect::<Result<Vec<_>>>()?;
        out.extend(
            batch
                .into_iter()
                .filter(|s| s.object_count <= max_objects)
                .take(n - out.len()),
        );
        start += chunk;
    }
    Ok(out)
}

/// Mirrors image and labels along the width axis.
pub fn hflip(sample: &SceneSample) -> SceneSample {
    let (h, w) = (sample.height(), sample.width());
    let src = sample.image.data();
    let mut image = Vec::with_capacity(src.len());
    let mut labels = Vec::with_capacity(sample.labels.len());
    for r in 0..h {
        for c in (0..w).rev() {
            image.extend_from_slice(&src[(r * w + c) * 3..][..3]);
            labels.push(sample.labels[r * w + c]);
        }
    }
    SceneSample {
        image: Tensor::new(&[h, w, 3], image).expect("same shape"),
        labels,
        object_count: sample.object_count,
    }
}

/// Flips with probability 1/2.
pub fn augment_hflip(sample: &SceneSample, rng: &mut ChaCha8Rng) -> SceneSample {
    if rng.random_bool(0.5) {
        hflip(sample)
    } else {
        sample.clone()
    }
}

/// Stacks images into `[L, H, W, 3]`.
pub fn stack_images<'a>(samples: impl IntoIterator<Item = &'a SceneSample>) -> Result<Tensor> {
    let mut data = Vec::new();
    let mut shape: Option<Vec<usize>> = None;
    let mut l = 0;
    for s in samples {
        match &shape {
            None => shape = Some(s.image.shape().to_vec()),
            Some(sh) if sh != s.image.shape() => {
                return Err(Error::shape(
                    "stack_images",
                    format!("{sh:?} vs {:?}", s.image.shape()),
                ));
            }
            _ => {}
        }
        data.extend_from_slice(s.image.data());
        l += 1;
    }
    let shape = shape.ok_or_else(|| Error::contract("stack_images", "no samples"))?;
    let mut full = vec![l];
    full.extend(shape);
    Tensor::new(&full, data)
}

/// Number of samples per object count.
pub fn count_histogram(samples: &[SceneSample]) -> BTreeMap<usize, usize> {
    let mut h = BTreeMap::new();
    for s in samples {
        *h.entry(s.object_count).or_insert(0) += 1;
    }
    h
}

#[derive(Serialize, Deserialize)]
struct Header {
    spec: SceneSpec,
    count: usize,
    height: usize,
    width: usize,
}

pub fn write_split(path: &Path, spec: &SceneSpec, samples: &[SceneSample]) -> Result<()> {
    let (height, width) = (spec.height, spec.width);
    if let Some(s) = samples
        .iter()
        .find(|s| s.height() != height || s.width() != width)
    {
        return Err(Error::shape(
            "write_split",
            format!(
                "sample is {}x{}, spec {height}x{width}",
                s.height(),
                s.width()
            ),
        ));
    }
    let header = serde_json::to_vec(&Header {
        spec: spec.clone(),
        count: samples.len(),
        height,
        width,
    })?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    let mut write = |bytes: &[u8]| out.write_all(bytes).map_err(|e| Error::io(path, e));
    write(MAGIC)?;
    write(&VERSION.to_le_bytes())?;
    write(&(header.len() as u32).to_le_bytes())?;
    write(&header)?;
    for s in samples {
        write(&(s.object_count as u32).to_le_bytes())?;
        let img: Vec<u8> = s
            .image
            .data()
            .iter()
            .flat_map(|&v| (v as f32).to_le_bytes())
            .collect();
        write(&img)?;
        write(&s.labels)?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

pub fn read_split(path: &Path) -> Result<(SceneSpec, Vec<SceneSample>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |detail: String| Error::Format {
        kind: "dataset",
        path: path.to_path_buf(),
        detail,
    };
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(bad("missing SLOTDSET magic".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let hlen = u32::from_le_bytes(bytes[12..16].try_into().expect("4 bytes")) as usize;
    let body = 16 + hlen;
    if body > bytes.len() {
        return Err(bad("header length exceeds file".into()));
    }
    let header: Header =
        serde_json::from_slice(&bytes[16..body]).map_err(|e| bad(format!("header: {e}")))?;
    let pixels = header.height * header.width;
    let record = 4 + pixels * 3 * 4 + pixels;
    if bytes.len() - body != record * header.count {
        return Err(bad(format!(
            "expected {} sample bytes, found {}",
            record * header.count,
            bytes.len() - body
        )));
    }
    let mut samples = Vec::with_capacity(header.count);
    for rec in bytes[body..].chunks_exact(record) {
        let object_count = u32::from_le_bytes(rec[..4].try_into().expect("4 bytes")) as usize;
        let image = rec[4..4 + pixels * 12]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect();
        let labels = rec[4 + pixels * 12..].to_vec();
        samples.push(SceneSample {
            image: Tensor::new(&[header.height, header.width, 3], image)?,
            labels,
            object_count,
        });
    }
    Ok((header.spec, samples))
}
