//! Image datasets: binary PPM ingestion, seeded synthetic images, batching.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::rng::Stream;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

/// Ordered images of identical extent, each `[h, w, 3]` with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    images: Vec<Tensor>,
    pub split: Split,
    pub source: String,
}

impl Dataset {
    pub fn new(images: Vec<Tensor>, split: Split, source: impl Into<String>) -> Result<Self> {
        let first = images.first().ok_or(Error::EmptyDataset)?.shape().to_vec();
        if first.len() != 3 || first[2] != 3 {
            return Err(Error::shape(
                "dataset",
                format!("images must be [h, w, 3], got {first:?}"),
            ));
        }
        for img in &images {
            if img.shape() != first.as_slice() {
                return Err(Error::shape(
                    "dataset",
                    format!("mixed extents {first:?} and {:?}", img.shape()),
                ));
            }
            if img.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(Error::shape("dataset", "pixel values outside [0, 1]"));
            }
        }
        Ok(Self {
            images,
            split,
            source: source.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn images(&self) -> &[Tensor] {
        &self.images
    }

    /// `(h, w)` shared by every image.
    pub fn extent(&self) -> (usize, usize) {
        let s = self.images[0].shape();
        (s[0], s[1])
    }

    /// Stacks the selected images into `[B, h, w, 3]`.
    pub fn batch_tensor(&self, indices: &[usize]) -> Result<Tensor> {
        let (h, w) = self.extent();
        let mut data = Vec::with_capacity(indices.len() * h * w * 3);
        for &i in indices {
            data.extend_from_slice(self.images.get(i).ok_or(Error::EmptyDataset)?.data());
        }
        Tensor::new(vec![indices.len(), h, w, 3], data)
    }
}

/// Epoch batches: a permutation from `stream`, cut into chunks of
/// `batch_size`; the last batch may be short.
pub fn batches(n: usize, batch_size: usize, stream: &mut Stream) -> Result<Vec<Vec<usize>>> {
    if n == 0 {
        return Err(Error::EmptyDataset);
    }
    if batch_size == 0 {
        return Err(Error::Config("batch_size must be at least 1".into()));
    }
    Ok(stream
        .permutation(n)
        .chunks(batch_size)
        .map(<[usize]>::to_vec)
        .collect())
}

/// Decoded P6 image: `width × height` RGB bytes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Ppm {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

fn ppm_error(path: &Path, detail: impl Into<String>) -> Error {
    Error::Ppm {
        path: path.to_path_buf(),
        detail: detail.into(),
    }
}

/// Parses a binary PPM with maxval 255. Header tokens may be separated by
/// any whitespace and `#` comments; exactly one whitespace byte separates
/// the maxval from the raster.
pub fn parse_ppm(bytes: &[u8], path: &Path) -> Result<Ppm> {
    let mut pos = 0;
    let token = |pos: &mut usize| -> Result<String> {
        loop {
            match bytes.get(*pos) {
                Some(b) if b.is_ascii_whitespace() => *pos += 1,
                Some(b'#') => {
                    while bytes.get(*pos).is_some_and(|&b| b != b'\n') {
                        *pos += 1;
                    }
                }
                Some(_) => break,
                None => return Err(ppm_error(path, "truncated header")),
            }
        }
        let start = *pos;
        while bytes.get(*pos).is_some_and(|b| !b.is_ascii_whitespace()) {
            *pos += 1;
        }
        Ok(String::from_utf8_lossy(&bytes[start..*pos]).into_owned())
    };
    if token(&mut pos)? != "P6" {
        return Err(ppm_error(path, "not a binary PPM (P6)"));
    }
    let number = |what: &str, pos: &mut usize| -> Result<usize> {
        let t = token(pos)?;
        t.parse().map_err(|_| ppm_error(path, format!("bad {what} `{t}`")))
    };
    let width = number("width", &mut pos)?;
    let height = number("height", &mut pos)?;
    let maxval = number("maxval", &mut pos)?;
    if width == 0 || height == 0 {
        return Err(ppm_error(path, "zero extent"));
    }
    if maxval != 255 {
        return Err(ppm_error(path, format!("maxval {maxval}, only 255 is supported")));
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(ppm_error(path, "missing raster separator"));
    }
    pos += 1;
    let need = width * height * 3;
    let raster = &bytes[pos..];
    if raster.len() < need {
        return Err(ppm_error(
            path,
            format!("raster has {} bytes, need {need}", raster.len()),
        ));
    }
    Ok(Ppm {
        width,
        height,
        pixels: raster[..need].to_vec(),
    })
}

pub fn read_ppm(path: &Path) -> Result<Ppm> {
    parse_ppm(&fs::read(path)?, path)
}

/// Encodes `[h, w, 3]` values in `[0, 1]` as P6 bytes, `round(255·v)` after clamping.
pub fn encode_ppm(image: &Tensor) -> Result<Vec<u8>> {
    let (h, w) = match *image.shape() {
        [h, w, 3] => (h, w),
        ref s => return Err(Error::shape("encode_ppm", format!("expected [h, w, 3], got {s:?}"))),
    };
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    out.extend(image.data().iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    Ok(out)
}

pub fn write_ppm(path: &Path, image: &Tensor) -> Result<()> {
    fs::write(path, encode_ppm(image)?)?;
    Ok(())
}

/// Center `crop×crop` window of a PPM, scaled to `[0, 1]`. The window
/// starts at `((height−crop)/2, (width−crop)/2)`, rounding down.
pub fn center_crop(ppm: &Ppm, crop: usize, path: &Path) -> Result<Tensor> {
    if ppm.width < crop || ppm.height < crop {
        return Err(ppm_error(
            path,
            format!("{}×{} is smaller than crop {crop}", ppm.width, ppm.height),
        ));
    }
    let top = (ppm.height - crop) / 2;
    let left = (ppm.width - crop) / 2;
    let mut data = Vec::with_capacity(crop * crop * 3);
    for r in top..top + crop {
        let row = &ppm.pixels[(r * ppm.width + left) * 3..(r * ppm.width + left + crop) * 3];
        data.extend(row.iter().map(|&b| f64::from(b) / 255.0));
    }
    Tensor::new(vec![crop, crop, 3], data)
}

/// Loads every `*.ppm` in `dir`, in byte-wise lexicographic filename order,
/// center-cropped to `crop`. `limit` caps the number of files taken.
pub fn load_ppm_dir(dir: &Path, crop: usize, limit: Option<usize>, split: Split) -> Result<Dataset> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && p.extension().is_some_and(|e| e.eq_ignore_ascii_case("ppm")))
        .collect();
    files.sort_by(|a, b| {
        a.file_name()
            .map(|n| n.as_encoded_bytes())
            .cmp(&b.file_name().map(|n| n.as_encoded_bytes()))
    });
    if let Some(limit) = limit {
        files.truncate(limit);
    }
    let images = files
        .iter()
        .map(|p| center_crop(&read_ppm(p)?, crop, p))
        .collect::<Result<Vec<_>>>()?;
    Dataset::new(images, split, dir.display().to_string())
}

/// Seeded synthetic images: per channel a smooth Gaussian random field, a
/// linear ramp along a random direction, and a faint checkerboard, mixed
/// with random weights and min-max normalized to `[0, 1]` per image.
pub fn synth_dataset(n: usize, extent: usize, seed: u64, split: Split) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::EmptyDataset);
    }
    if extent < 2 {
        return Err(Error::Config(format!("synthetic extent {extent} is too small")));
    }
    let images = (0..n)
        .map(|i| synth_image(extent, &mut Stream::derive_indexed(seed, "synth", i as u64)))
        .collect::<Result<Vec<_>>>()?;
    Dataset::new(images, split, format!("synthetic:{n}:{extent}:{seed}"))
}

fn synth_image(extent: usize, stream: &mut Stream) -> Result<Tensor> {
    let e = extent;
    let sigma = e as f64 * (0.06 + 0.1 * stream.next_f64());
    let theta = std::f64::consts::TAU * stream.next_f64();
    let period = 2 + stream.below(3) * 2;
    let mut planes = Vec::with_capacity(3);
    for _ in 0..3 {
        let field = gaussian_field(e, sigma, stream);
        let w_field = 0.6 + 0.4 * stream.next_f64();
        let w_ramp = stream.next_f64();
        let w_check = 0.15 * stream.next_f64();
        let mut plane = vec![0.0; e * e];
        for r in 0..e {
            for c in 0..e {
                let ramp = ((c as f64) * theta.cos() + (r as f64) * theta.sin()) / e as f64;
                let check = if (r / period + c / period) % 2 == 0 { 1.0 } else { -1.0 };
                plane[r * e + c] = w_field * field[r * e + c] + w_ramp * ramp + w_check * check;
            }
        }
        planes.push(plane);
    }
    let (lo, hi) = planes
        .iter()
        .flatten()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
    let span = (hi - lo).max(1e-12);
    let mut data = Vec::with_capacity(e * e * 3);
    for px in 0..e * e {
        for plane in &planes {
            data.push(((plane[px] - lo) / span).clamp(0.0, 1.0));
        }
    }
    Tensor::new(vec![e, e, 3], data)
}

/// White noise blurred by a periodic separable Gaussian, scaled to unit std.
fn gaussian_field(e: usize, sigma: f64, stream: &mut Stream) -> Vec<f64> {
    let noise: Vec<f64> = (0..e * e).map(|_| stream.normal()).collect();
    let radius = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-radius..=radius)
        .map(|k| (-(k * k) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let wrap = |i: isize| i.rem_euclid(e as isize) as usize;
    let mut rows = vec![0.0; e * e];
    for r in 0..e {
        for c in 0..e {
            rows[r * e + c] = kernel
                .iter()
                .enumerate()
                .map(|(k, wgt)| wgt * noise[r * e + wrap(c as isize + k as isize - radius)])
                .sum();
        }
    }
    let mut out = vec![0.0; e * e];
    for r in 0..e {
        for c in 0..e {
            out[r * e + c] = kernel
                .iter()
                .enumerate()
                .map(|(k, wgt)| wgt * rows[wrap(r as isize + k as isize - radius) * e + c])
                .sum();
        }
    }
    let mean = out.iter().sum::<f64>() / out.len() as f64;
    let std = (out.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / out.len() as f64)
        .sqrt()
        .max(1e-12);
    out.iter_mut().for_each(|v| *v = (*v - mean) / std);
    out
}
