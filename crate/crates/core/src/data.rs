//! Dataset ingestion, binarization, splits and the half-image view.

use std::fs::File;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;
use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::Rng as _;

use crate::error::{shape_err, Error, Result};
use crate::rng::{tags, RngTree};

const IMAGE_MAGIC: u32 = 0x0000_0803;
const LABEL_MAGIC: u32 = 0x0000_0801;

#[derive(Clone, Debug, PartialEq)]
pub enum Idx {
    /// One row per image, pixels scaled to `[0, 1]`.
    Images { rows: usize, cols: usize, pixels: Array2<f64> },
    Labels(Vec<u8>),
}

fn read_all(path: &Path) -> Result<Vec<u8>> {
    let mut raw = Vec::new();
    File::open(path)?.read_to_end(&mut raw)?;
    if path.extension().is_some_and(|e| e == "gz") {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice()).read_to_end(&mut out)?;
        return Ok(out);
    }
    Ok(raw)
}

/// Reads an IDX image or label file; `.gz` files are decompressed.
pub fn load_idx(path: impl AsRef<Path>) -> Result<Idx> {
    parse_idx(&read_all(path.as_ref())?)
}

pub fn parse_idx(bytes: &[u8]) -> Result<Idx> {
    let word = |i: usize| -> Result<usize> {
        bytes
            .get(4 * i..4 * i + 4)
            .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]) as usize)
            .ok_or_else(|| Error::Format("truncated IDX header".into()))
    };
    let magic = word(0)? as u32;
    match magic {
        IMAGE_MAGIC => {
            let (n, rows, cols) = (word(1)?, word(2)?, word(3)?);
            let body = &bytes[16..];
            let need = n * rows * cols;
            if body.len() < need {
                return Err(Error::Format(format!(
                    "IDX image file holds {} of {need} pixel bytes",
                    body.len()
                )));
            }
            let pixels = Array2::from_shape_fn((n, rows * cols), |(i, j)| body[i * rows * cols + j] as f64 / 255.0);
            Ok(Idx::Images { rows, cols, pixels })
        }
        LABEL_MAGIC => {
            let n = word(1)?;
            let body = &bytes[8..];
            if body.len() < n {
                return Err(Error::Format(format!("IDX label file holds {} of {n} labels", body.len())));
            }
            Ok(Idx::Labels(body[..n].to_vec()))
        }
        other => Err(Error::Format(format!("unknown IDX magic {other:#010x}"))),
    }
}

/// Writes images (values in `[0, 1]`, rounded to bytes) as an uncompressed
/// IDX image file.
pub fn write_idx_images(path: impl AsRef<Path>, rows: usize, cols: usize, pixels: ArrayView2<f64>) -> Result<()> {
    if pixels.ncols() != rows * cols {
        return Err(shape_err("pixel rows do not match the image shape"));
    }
    let mut f = std::io::BufWriter::new(File::create(path)?);
    for v in [IMAGE_MAGIC, pixels.nrows() as u32, rows as u32, cols as u32] {
        f.write_all(&v.to_be_bytes())?;
    }
    let bytes: Vec<u8> = pixels.iter().map(|&p| (p.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    f.write_all(&bytes)?;
    f.flush()?;
    Ok(())
}

/// Plain-text matrix: one case per line, whitespace-separated numbers.
pub fn load_amat(path: impl AsRef<Path>) -> Result<Array2<f64>> {
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (i, line) in BufReader::new(File::open(path)?).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let row = line
            .split_whitespace()
            .map(|t| t.parse::<f64>().map_err(|e| Error::Format(format!("line {}: {e}", i + 1))))
            .collect::<Result<Vec<_>>>()?;
        if let Some(first) = rows.first() {
            if first.len() != row.len() {
                return Err(Error::Format(format!(
                    "line {} has {} values, expected {}",
                    i + 1,
                    row.len(),
                    first.len()
                )));
            }
        }
        rows.push(row);
    }
    let cols = rows.first().map_or(0, Vec::len);
    Array2::from_shape_vec((rows.len(), cols), rows.concat()).map_err(|e| shape_err(e.to_string()))
}

pub fn write_amat(path: impl AsRef<Path>, m: ArrayView2<f64>) -> Result<()> {
    let mut f = std::io::BufWriter::new(File::create(path)?);
    for row in m.outer_iter() {
        let line: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
        writeln!(f, "{}", line.join(" "))?;
    }
    f.flush()?;
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Binarization {
    /// The input is already binary and is used verbatim.
    FixedFile,
    /// `p ≥ 0.5 → 1`
    Threshold,
    /// One Bernoulli draw per pixel from a seeded stream.
    Stochastic { seed: u64 },
}

impl std::str::FromStr for Binarization {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fixed" | "fixed-file" => Ok(Binarization::FixedFile),
            "threshold" => Ok(Binarization::Threshold),
            _ => match s.strip_prefix("stochastic") {
                Some("") => Ok(Binarization::Stochastic { seed: 0 }),
                Some(rest) => rest
                    .trim_start_matches([':', '-'])
                    .parse()
                    .map(|seed| Binarization::Stochastic { seed })
                    .map_err(|_| Error::Config(format!("bad binarization seed in {s:?}"))),
                None => Err(Error::Config(format!("unknown binarization {s:?}"))),
            },
        }
    }
}

pub fn binarize(raw: ArrayView2<f64>, strategy: Binarization) -> Result<Array2<f64>> {
    if let Some(&bad) = raw.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::Probability(bad));
    }
    match strategy {
        Binarization::FixedFile => {
            if raw.iter().any(|&v| v != 0.0 && v != 1.0) {
                return Err(Error::Format("fixed binarization expects 0/1 entries".into()));
            }
            Ok(raw.to_owned())
        }
        Binarization::Threshold => Ok(raw.mapv(|p| if p >= 0.5 { 1.0 } else { 0.0 })),
        Binarization::Stochastic { seed } => {
            let mut rng = RngTree::new(seed).stream(&[tags::BINARIZE]);
            Ok(raw.mapv(|p| if rng.gen::<f64>() < p { 1.0 } else { 0.0 }))
        }
    }
}

/// Per-pixel mean of the training split.
pub fn centering_stats(train: ArrayView2<f64>) -> Result<Array1<f64>> {
    train.mean_axis(Axis(0)).ok_or(Error::Empty)
}

/// Top rows become the context, bottom rows the observation.
pub fn sop_view(images: ArrayView2<f64>, height: usize, width: usize) -> Result<(Array2<f64>, Array2<f64>)> {
    if images.ncols() != height * width || height < 2 {
        return Err(shape_err(format!(
            "expected {height}×{width} images, rows have {} pixels",
            images.ncols()
        )));
    }
    let cut = (height / 2) * width;
    Ok((
        images.slice(s![.., ..cut]).to_owned(),
        images.slice(s![.., cut..]).to_owned(),
    ))
}

pub fn reassemble<'a>(context: ArrayView2<'a, f64>, observation: ArrayView2<'a, f64>) -> Result<Array2<f64>> {
    ndarray::concatenate(Axis(1), &[context, observation]).map_err(|e| shape_err(e.to_string()))
}

/// Binary images split into train / validation / test.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub height: usize,
    pub width: usize,
    pub train: Array2<f64>,
    pub valid: Array2<f64>,
    pub test: Array2<f64>,
}

impl Dataset {
    /// Splits `images` in order into consecutive blocks of the given sizes.
    pub fn from_images(images: Array2<f64>, height: usize, width: usize, sizes: [usize; 3]) -> Result<Self> {
        if images.ncols() != height * width {
            return Err(shape_err("image rows do not match the image shape"));
        }
        let need: usize = sizes.iter().sum();
        if need > images.nrows() {
            return Err(Error::Config(format!(
                "splits need {need} images, only {} available",
                images.nrows()
            )));
        }
        if images.iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::Format("dataset entries must be binary".into()));
        }
        let [a, b, c] = sizes;
        Ok(Self {
            height,
            width,
            train: images.slice(s![..a, ..]).to_owned(),
            valid: images.slice(s![a..a + b, ..]).to_owned(),
            test: images.slice(s![a + b..a + b + c, ..]).to_owned(),
        })
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }
}

/// A dataset split as the model sees it.
#[derive(Clone, Debug, PartialEq)]
pub struct Cases {
    pub observations: Array2<f64>,
    pub contexts: Option<Array2<f64>>,
}

impl Cases {
    pub fn len(&self) -> usize {
        self.observations.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn full(images: &Array2<f64>) -> Self {
        Self {
            observations: images.clone(),
            contexts: None,
        }
    }

    pub fn sop(images: &Array2<f64>, height: usize, width: usize) -> Result<Self> {
        let (c, o) = sop_view(images.view(), height, width)?;
        Ok(Self {
            observations: o,
            contexts: Some(c),
        })
    }
}

/// Where a [`Dataset`] comes from.
#[derive(Clone, Debug, PartialEq)]
pub enum DataSource {
    /// Generated [`toy_bars`] images.
    Bars { side: usize, cases: usize, noise: f64, seed: u64 },
    /// An IDX image file, binarized and split in order.
    Idx {
        path: PathBuf,
        binarization: Binarization,
        sizes: [usize; 3],
    },
    /// Three pre-binarized plain-text matrices.
    Amat {
        train: PathBuf,
        valid: PathBuf,
        test: PathBuf,
        height: usize,
        width: usize,
    },
}

impl DataSource {
    pub fn load(&self) -> Result<Dataset> {
        match self {
            DataSource::Bars { side, cases, noise, seed } => {
                let imgs = toy_bars(*side, *cases, *noise, *seed);
                let valid = cases / 5;
                Dataset::from_images(imgs, *side, *side, [cases - 2 * valid, valid, valid])
            }
            DataSource::Idx {
                path,
                binarization,
                sizes,
            } => match load_idx(path)? {
                Idx::Images { rows, cols, pixels } => {
                    let need: usize = sizes.iter().sum();
                    let used = pixels.slice(s![..need.min(pixels.nrows()), ..]);
                    Dataset::from_images(binarize(used, *binarization)?, rows, cols, *sizes)
                }
                Idx::Labels(_) => Err(Error::Format(format!("{} holds labels, not images", path.display()))),
            },
            DataSource::Amat {
                train,
                valid,
                test,
                height,
                width,
            } => {
                let load = |p: &Path| -> Result<Array2<f64>> {
                    let m = binarize(load_amat(p)?.view(), Binarization::FixedFile)?;
                    if m.ncols() != height * width {
                        return Err(shape_err(format!("{} rows are not {height}×{width} images", p.display())));
                    }
                    Ok(m)
                };
                Ok(Dataset {
                    height: *height,
                    width: *width,
                    train: load(train)?,
                    valid: load(valid)?,
                    test: load(test)?,
                })
            }
        }
    }
}

/// Horizontal and vertical bars on a `side × side` grid, with each pixel
/// flipped with probability `noise`. A small stand-in for digit data.
pub fn toy_bars(side: usize, n: usize, noise: f64, seed: u64) -> Array2<f64> {
    let mut rng = RngTree::new(seed).stream(&[tags::BINARIZE, 1]);
    let mut out = Array2::zeros((n, side * side));
    let lines: Vec<usize> = (0..side).collect();
    for mut row in out.outer_iter_mut() {
        let vertical = rng.gen::<bool>();
        let count = rng.gen_range(1..=side.div_ceil(2).max(1));
        let picked: Vec<usize> = lines.choose_multiple(&mut rng, count).copied().collect();
        for &l in &picked {
            for t in 0..side {
                let idx = if vertical { t * side + l } else { l * side + t };
                row[idx] = 1.0;
            }
        }
        for v in row.iter_mut() {
            if rng.gen::<f64>() < noise {
                *v = 1.0 - *v;
            }
        }
    }
    out
}
