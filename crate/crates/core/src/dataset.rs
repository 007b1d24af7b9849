//! Labelled image sets: ingestion from disk, seeded iteration order,
//! augmentation and synthetic generators.

use std::collections::BTreeSet;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::colour::{hsv_pixel_to_rgb, Chip, HsvPixel, RgbImage, WcsGrid};
use crate::error::{config_err, input_err, Error, Result};
use crate::wcs::chip_rgb_with_saturation;

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub image: RgbImage,
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    items: Vec<Sample>,
    num_classes: usize,
}

impl Dataset {
    pub fn new(items: Vec<Sample>, num_classes: usize) -> Result<Self> {
        if let Some(s) = items.iter().find(|s| s.label >= num_classes) {
            return Err(input_err(format!("label {} out of range for {num_classes} classes", s.label)));
        }
        Ok(Self { items, num_classes })
    }

    pub fn items(&self) -> &[Sample] {
        &self.items
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn images(&self) -> impl Iterator<Item = &RgbImage> {
        self.items.iter().map(|s| &s.image)
    }

    /// First `n` samples and the rest.
    pub fn split_at(&self, n: usize) -> (Dataset, Dataset) {
        let n = n.min(self.items.len());
        (
            Dataset { items: self.items[..n].to_vec(), num_classes: self.num_classes },
            Dataset { items: self.items[n..].to_vec(), num_classes: self.num_classes },
        )
    }

    /// Sample order for one epoch, a pure function of `(seed, epoch)`.
    pub fn epoch_order(&self, seed: u64, epoch: usize) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.items.len()).collect();
        order.shuffle(&mut epoch_rng(seed, epoch, 0));
        order
    }
}

/// Independent stream per `(seed, epoch, purpose)`.
pub(crate) fn epoch_rng(seed: u64, epoch: usize, purpose: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((epoch as u64) << 8 | purpose);
    rng
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetFormat {
    /// CIFAR-10 binary batches: 1 label byte + 3072 pixel bytes per record.
    Cifar10,
    /// CIFAR-100 binary batches: coarse and fine label bytes, fine label used.
    Cifar100,
    /// Directory of PNG images plus a `labels.csv` manifest.
    Directory,
}

impl FromStr for DatasetFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cifar10" => Ok(Self::Cifar10),
            "cifar100" => Ok(Self::Cifar100),
            "dir" | "directory" => Ok(Self::Directory),
            other => Err(config_err(format!("unknown dataset format {other:?}"))),
        }
    }
}

const CIFAR_SIDE: usize = 32;
const CIFAR_PIXELS: usize = CIFAR_SIDE * CIFAR_SIDE;

/// Loads a dataset. For CIFAR formats `path` is a batch file or a directory
/// of `*.bin` batches (read in name order).
pub fn ingest_dataset(path: &Path, format: DatasetFormat) -> Result<Dataset> {
    match format {
        DatasetFormat::Cifar10 | DatasetFormat::Cifar100 => {
            let files = if path.is_dir() {
                let mut files: Vec<_> = std::fs::read_dir(path)?
                    .filter_map(|e| e.ok().map(|e| e.path()))
                    .filter(|p| p.extension().is_some_and(|x| x == "bin"))
                    .collect();
                files.sort();
                files
            } else {
                vec![path.to_path_buf()]
            };
            let mut items = Vec::new();
            for f in files {
                items.extend(parse_cifar(&std::fs::read(&f)?, format)?);
            }
            let classes = if format == DatasetFormat::Cifar10 { 10 } else { 100 };
            Dataset::new(items, classes)
        }
        DatasetFormat::Directory => ingest_directory(path),
    }
}

pub fn parse_cifar(bytes: &[u8], format: DatasetFormat) -> Result<Vec<Sample>> {
    let (label_bytes, classes) = match format {
        DatasetFormat::Cifar10 => (1, 10),
        DatasetFormat::Cifar100 => (2, 100),
        DatasetFormat::Directory => return Err(config_err("not a CIFAR format")),
    };
    let record = label_bytes + 3 * CIFAR_PIXELS;
    if bytes.len() % record != 0 {
        let offset = (bytes.len() / record * record) as u64;
        return Err(Error::Corrupt { offset, message: format!("truncated record ({} trailing bytes)", bytes.len() % record) });
    }
    bytes
        .chunks_exact(record)
        .enumerate()
        .map(|(i, rec)| {
            let label = rec[label_bytes - 1] as usize;
            if label >= classes {
                return Err(Error::Corrupt {
                    offset: (i * record + label_bytes - 1) as u64,
                    message: format!("label {label} out of range for {classes} classes"),
                });
            }
            let planes = &rec[label_bytes..];
            let data = (0..CIFAR_PIXELS)
                .flat_map(|p| (0..3).map(move |ch| f64::from(planes[ch * CIFAR_PIXELS + p]) / 255.0))
                .collect();
            Ok(Sample { image: RgbImage::new(CIFAR_SIDE, CIFAR_SIDE, data)?, label })
        })
        .collect()
}

/// Serialises samples (32×32 only) as a CIFAR-10 style batch.
pub fn write_cifar10(samples: &[Sample]) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(samples.len() * (1 + 3 * CIFAR_PIXELS));
    for s in samples {
        if s.image.height() != CIFAR_SIDE || s.image.width() != CIFAR_SIDE || s.label > 9 {
            return Err(input_err("CIFAR-10 records need 32x32 images and labels below 10"));
        }
        out.push(s.label as u8);
        let bytes = s.image.to_rgb8().into_raw();
        for ch in 0..3 {
            out.extend(bytes.iter().skip(ch).step_by(3));
        }
    }
    Ok(out)
}

/// `labels.csv` rows are `file,label`; the label is a class name. Classes
/// come from `classes.txt` (one per line) when present, else from the
/// sorted set of labels in the manifest.
fn ingest_directory(dir: &Path) -> Result<Dataset> {
    let manifest = dir.join("labels.csv");
    let text = std::fs::read_to_string(&manifest)?;
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') || (i == 0 && line.starts_with("file,")) {
            continue;
        }
        let (file, label) = line.split_once(',').ok_or_else(|| Error::Load {
            path: manifest.clone(),
            line: line_no,
            message: "expected file,label".into(),
        })?;
        rows.push((file.trim().to_string(), label.trim().to_string(), line_no));
    }
    let classes_path = dir.join("classes.txt");
    let classes: Vec<String> = if classes_path.exists() {
        std::fs::read_to_string(&classes_path)?.lines().map(str::trim).filter(|l| !l.is_empty()).map(String::from).collect()
    } else {
        rows.iter().map(|r| r.1.clone()).collect::<BTreeSet<_>>().into_iter().collect()
    };
    let mut items = Vec::with_capacity(rows.len());
    for (file, label, line) in rows {
        let label = classes.iter().position(|c| *c == label).ok_or_else(|| Error::Load {
            path: manifest.clone(),
            line,
            message: format!("unknown label {label:?}"),
        })?;
        let img = image::open(dir.join(&file))?.to_rgb8();
        items.push(Sample { image: RgbImage::from_rgb8(&img)?, label });
    }
    Dataset::new(items, classes.len().max(1))
}

/// Random crop from a 4-pixel reflect-padded copy, then a random
/// horizontal flip.
pub fn augment(img: &RgbImage, rng: &mut impl Rng) -> RgbImage {
    const PAD: usize = 4;
    let (h, w) = (img.height(), img.width());
    let padded = pad_reflect(img, PAD);
    let top = rng.random_range(0..=2 * PAD);
    let left = rng.random_range(0..=2 * PAD);
    let crop = padded.crop(top, left, h, w).expect("crop lies inside the padded image");
    if rng.random_bool(0.5) {
        crop.flip_horizontal()
    } else {
        crop
    }
}

fn pad_reflect(img: &RgbImage, pad: usize) -> RgbImage {
    let (h, w) = (img.height(), img.width());
    let mut data = Vec::with_capacity((h + 2 * pad) * (w + 2 * pad) * 3);
    for r in 0..h + 2 * pad {
        for c in 0..w + 2 * pad {
            let rr = reflect_signed(r as isize - pad as isize, h);
            let cc = reflect_signed(c as isize - pad as isize, w);
            data.extend(img.pixel(rr, cc));
        }
    }
    RgbImage::new(h + 2 * pad, w + 2 * pad, data).expect("padded copy is valid")
}

/// Mirror index without repeating the edge, folded until it lands inside.
fn reflect_signed(mut i: isize, n: usize) -> usize {
    let n = n as isize;
    if n == 1 {
        return 0;
    }
    loop {
        if i < 0 {
            i = -i;
        } else if i >= n {
            i = 2 * (n - 1) - i;
        } else {
            return i as usize;
        }
    }
}

/// Hue centres of the four synthetic classes.
pub const CLASS_HUES_DEG: [f64; 4] = [0.0, 90.0, 180.0, 270.0];

/// Colour-separable 4-class set: a saturated square whose hue encodes the
/// class on a desaturated, lightly textured background.
pub fn synthetic_colour_classes(n: usize, side: usize, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let items = (0..n)
        .map(|i| {
            let label = i % CLASS_HUES_DEG.len();
            let bg_h = rng.random_range(0.0..std::f64::consts::TAU);
            let bg_s = rng.random_range(0.0..0.15);
            let bg_v: f64 = rng.random_range(0.25..0.85);
            let hue = (CLASS_HUES_DEG[label] + rng.random_range(-12.0..12.0)).to_radians();
            let obj = hsv_pixel_to_rgb(HsvPixel::new(hue, rng.random_range(0.6..1.0), rng.random_range(0.55..1.0)));
            let size = rng.random_range(side / 3..=side / 2 + side / 8);
            let top = rng.random_range(0..=side - size);
            let left = rng.random_range(0..=side - size);
            let mut px = Vec::with_capacity(side * side);
            for r in 0..side {
                for c in 0..side {
                    let inside = (top..top + size).contains(&r) && (left..left + size).contains(&c);
                    let p = if inside {
                        obj
                    } else {
                        let v: f64 = (bg_v + rng.random_range(-0.04..0.04)).clamp(0.0, 1.0);
                        hsv_pixel_to_rgb(HsvPixel::new(bg_h, bg_s, v))
                    };
                    px.push(p);
                }
            }
            Sample { image: RgbImage::from_pixels(side, side, &px).expect("valid pixels"), label }
        })
        .collect();
    Dataset::new(items, CLASS_HUES_DEG.len()).expect("labels in range")
}

/// Images tiled with `blocks × blocks` patches, each painted with a chip
/// centre colour (saturation 1) drawn from `chips`. The label is the
/// majority term under `modes` (per-chip term index), lowest term on ties.
pub fn synthetic_chip_dataset(
    n: usize,
    side: usize,
    blocks: usize,
    chips: &[Chip],
    modes: &[usize],
    num_terms: usize,
    seed: u64,
) -> Result<Dataset> {
    if chips.is_empty() || blocks == 0 || side % blocks != 0 {
        return Err(config_err("chip dataset needs chips and a side divisible by the block count"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cell = side / blocks;
    let items = (0..n)
        .map(|_| {
            let picks: Vec<Chip> = (0..blocks * blocks).map(|_| chips[rng.random_range(0..chips.len())]).collect();
            let mut votes = vec![0usize; num_terms];
            for c in &picks {
                votes[modes[c.flat()]] += 1;
            }
            let label = crate::cqformer::argmax_lowest(&votes.iter().map(|&v| v as f64).collect::<Vec<_>>());
            let mut px = vec![[0.0; 3]; side * side];
            for (b, chip) in picks.iter().enumerate() {
                let colour = chip_rgb_with_saturation(*chip, 1.0);
                let (br, bc) = (b / blocks, b % blocks);
                for r in 0..cell {
                    for c in 0..cell {
                        px[(br * cell + r) * side + bc * cell + c] = colour;
                    }
                }
            }
            Sample { image: RgbImage::from_pixels(side, side, &px).expect("valid pixels"), label }
        })
        .collect();
    Dataset::new(items, num_terms)
}

/// All chips of the grid.
pub fn all_chips() -> Vec<Chip> {
    WcsGrid::chips().collect()
}
