//! Image sets: MNIST IDX and CIFAR-10 binary loaders, the synthetic
//! noisy-digit set and multi-image grids for the pointing game.

mod glyphs;
mod pnm;

pub use glyphs::digit_glyph;
pub use pnm::{decode_pnm, load_pnm};

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Rng, Scalar, Tensor};

/// Images with values in `[0, 1]` and one class label each.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledImageSet {
    /// `N x C x H x W`
    images: Tensor<f32>,
    labels: Vec<usize>,
    class_names: Vec<String>,
}

impl LabeledImageSet {
    pub fn new(images: Tensor<f32>, labels: Vec<usize>, class_names: Vec<String>) -> Result<Self> {
        let n = match images.shape() {
            &[n, _, _, _] => n,
            s => return Err(Error::shape("LabeledImageSet", s, &[labels.len()])),
        };
        if n != labels.len() {
            return Err(Error::Input(format!("{n} images but {} labels", labels.len())));
        }
        if let Some((i, l)) = labels.iter().enumerate().find(|(_, &l)| l >= class_names.len()) {
            return Err(Error::Input(format!(
                "label {l} of image {i} outside [0, {})",
                class_names.len()
            )));
        }
        if images.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Input("pixel values must lie in [0, 1]".into()));
        }
        Ok(LabeledImageSet {
            images,
            labels,
            class_names,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    /// `(C, H, W)` of every image.
    pub fn image_shape(&self) -> (usize, usize, usize) {
        let s = self.images.shape();
        (s[1], s[2], s[3])
    }

    pub fn images(&self) -> &Tensor<f32> {
        &self.images
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn image<S: Scalar>(&self, i: usize) -> Tensor<S> {
        let (c, h, w) = self.image_shape();
        let per = c * h * w;
        let data = self.images.data()[i * per..(i + 1) * per]
            .iter()
            .map(|&v| S::of(v as f64))
            .collect();
        Tensor::new(&[c, h, w], data).expect("sizes agree")
    }

    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        let (c, h, w) = self.image_shape();
        let per = c * h * w;
        let mut data = Vec::with_capacity(indices.len() * per);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::Index {
                    index: i,
                    limit: self.len(),
                });
            }
            data.extend_from_slice(&self.images.data()[i * per..(i + 1) * per]);
            labels.push(self.labels[i]);
        }
        LabeledImageSet::new(
            Tensor::new(&[indices.len(), c, h, w], data)?,
            labels,
            self.class_names.clone(),
        )
    }

    /// The first `n` images (or all of them).
    pub fn take(&self, n: usize) -> Self {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.subset(&idx).expect("indices in range")
    }
}

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

fn be_u32(bytes: &[u8], offset: usize) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes(b.try_into().expect("4 bytes")))
        .ok_or(Error::Format {
            offset: offset as u64,
            msg: "truncated header".into(),
        })
}

/// Decodes an IDX image file (magic `0x00000803`): `(count, rows, cols, pixels)`.
pub fn parse_idx_images(bytes: &[u8]) -> Result<(usize, usize, usize, &[u8])> {
    let magic = be_u32(bytes, 0)?;
    if magic != 0x0803 {
        return Err(Error::Format {
            offset: 0,
            msg: format!("bad IDX image magic {magic:#010x}"),
        });
    }
    let (n, h, w) = (
        be_u32(bytes, 4)? as usize,
        be_u32(bytes, 8)? as usize,
        be_u32(bytes, 12)? as usize,
    );
    let need = n * h * w;
    let body = &bytes[16..];
    if body.len() < need {
        return Err(Error::Format {
            offset: bytes.len() as u64,
            msg: format!("truncated payload: expected {need} pixel bytes, found {}", body.len()),
        });
    }
    Ok((n, h, w, &body[..need]))
}

/// Decodes an IDX label file (magic `0x00000801`).
pub fn parse_idx_labels(bytes: &[u8]) -> Result<&[u8]> {
    let magic = be_u32(bytes, 0)?;
    if magic != 0x0801 {
        return Err(Error::Format {
            offset: 0,
            msg: format!("bad IDX label magic {magic:#010x}"),
        });
    }
    let n = be_u32(bytes, 4)? as usize;
    let body = &bytes[8..];
    if body.len() < n {
        return Err(Error::Format {
            offset: bytes.len() as u64,
            msg: format!("truncated payload: expected {n} labels, found {}", body.len()),
        });
    }
    Ok(&body[..n])
}

/// Builds a grayscale set from IDX image and label bytes.
pub fn decode_idx(images: &[u8], labels: &[u8]) -> Result<LabeledImageSet> {
    let (n, h, w, pixels) = parse_idx_images(images)?;
    let labels = parse_idx_labels(labels)?;
    if labels.len() != n {
        return Err(Error::Input(format!("{n} images but {} labels", labels.len())));
    }
    let classes = labels.iter().map(|&l| l as usize + 1).max().unwrap_or(0).max(10);
    LabeledImageSet::new(
        Tensor::new(&[n, 1, h, w], pixels.iter().map(|&p| p as f32 / 255.0).collect())?,
        labels.iter().map(|&l| l as usize).collect(),
        (0..classes).map(|c| c.to_string()).collect(),
    )
}

pub fn load_idx(images: impl AsRef<Path>, labels: impl AsRef<Path>) -> Result<LabeledImageSet> {
    decode_idx(&read(images.as_ref())?, &read(labels.as_ref())?)
}

/// Loads the MNIST training or test split from a directory holding the
/// four standard uncompressed IDX files.
pub fn load_mnist(dir: impl AsRef<Path>, train: bool) -> Result<LabeledImageSet> {
    let prefix = if train { "train" } else { "t10k" };
    let dir = dir.as_ref();
    load_idx(
        dir.join(format!("{prefix}-images-idx3-ubyte")),
        dir.join(format!("{prefix}-labels-idx1-ubyte")),
    )
}

pub const CIFAR10_CLASSES: [&str; 10] = [
    "airplane",
    "automobile",
    "bird",
    "cat",
    "deer",
    "dog",
    "frog",
    "horse",
    "ship",
    "truck",
];

const CIFAR_RECORD: usize = 1 + 3 * 32 * 32;

/// Decodes CIFAR-10 binary records: one label byte, then 3072 channel-major
/// pixel bytes.
pub fn decode_cifar10(bytes: &[u8]) -> Result<LabeledImageSet> {
    if !bytes.len().is_multiple_of(CIFAR_RECORD) {
        return Err(Error::Format {
            offset: (bytes.len() - bytes.len() % CIFAR_RECORD) as u64,
            msg: format!("file size {} is not a multiple of {CIFAR_RECORD}", bytes.len()),
        });
    }
    let n = bytes.len() / CIFAR_RECORD;
    let mut labels = Vec::with_capacity(n);
    let mut pixels = Vec::with_capacity(n * (CIFAR_RECORD - 1));
    for (i, rec) in bytes.chunks_exact(CIFAR_RECORD).enumerate() {
        if rec[0] > 9 {
            return Err(Error::Format {
                offset: (i * CIFAR_RECORD) as u64,
                msg: format!("label byte {} outside 0..=9", rec[0]),
            });
        }
        labels.push(rec[0] as usize);
        pixels.extend(rec[1..].iter().map(|&p| p as f32 / 255.0));
    }
    LabeledImageSet::new(
        Tensor::new(&[n, 3, 32, 32], pixels)?,
        labels,
        CIFAR10_CLASSES.iter().map(|s| s.to_string()).collect(),
    )
}

pub fn load_cifar10_bin(path: impl AsRef<Path>) -> Result<LabeledImageSet> {
    decode_cifar10(&read(path.as_ref())?)
}

/// `n` noisy copies of the clean `bases`: `clamp(base + Normal(0, std), 0, 1)`
/// labelled by base index, in blocks of `n / bases.len()`.
pub fn make_noisy_digits(bases: &[Tensor<f32>], n: usize, noise_std: f64, rng: &mut Rng) -> Result<LabeledImageSet> {
    let k = bases.len();
    if k == 0 || !n.is_multiple_of(k) {
        return Err(Error::Input(format!(
            "{n} samples cannot be split evenly over {k} bases"
        )));
    }
    let [c, h, w] = bases[0].shape()[..] else {
        return Err(Error::shape("make_noisy_digits", bases[0].shape(), &[]));
    };
    if bases.iter().any(|b| b.shape() != [c, h, w]) {
        return Err(Error::Input("bases differ in shape".into()));
    }
    let per = n / k;
    let mut data = Vec::with_capacity(n * c * h * w);
    let mut labels = Vec::with_capacity(n);
    for (label, base) in bases.iter().enumerate() {
        for _ in 0..per {
            let noise: Tensor<f32> = rng.normal(base.shape(), 0.0, noise_std);
            data.extend(
                base.data()
                    .iter()
                    .zip(noise.data())
                    .map(|(&b, &e)| (b + e).clamp(0.0, 1.0)),
            );
            labels.push(label);
        }
    }
    LabeledImageSet::new(
        Tensor::new(&[n, c, h, w], data)?,
        labels,
        (0..k).map(|i| format!("base{i}")).collect(),
    )
}

/// Number of samples in the synthetic alignment experiment.
pub const NOISY_DIGITS_DEFAULT_N: usize = 3072;
pub const NOISY_DIGITS_DEFAULT_NOISE: f64 = 0.25;

/// An `n x n` multi-image with distinct classes per cell.
#[derive(Clone, Debug, PartialEq)]
pub struct GridSample {
    pub n: usize,
    /// `C x n*H x n*W`
    pub image: Tensor<f32>,
    /// Class of each cell, row-major.
    pub cells: Vec<usize>,
    /// Source image index of each cell.
    pub sources: Vec<usize>,
}

impl GridSample {
    /// Cell of `class`, if present.
    pub fn cell_of(&self, class: usize) -> Option<usize> {
        self.cells.iter().position(|&c| c == class)
    }
}

/// Builds `count` grids of `n x n` images from `set`.
///
/// Each grid draws `n^2` distinct classes uniformly among those with unused
/// images left, and fills each cell with the highest-`score` unused image of
/// that class. Images are never reused.
pub fn make_grids(
    set: &LabeledImageSet,
    scores: &[f64],
    n: usize,
    count: usize,
    rng: &mut Rng,
) -> Result<Vec<GridSample>> {
    if scores.len() != set.len() {
        return Err(Error::Input(format!(
            "{} scores for {} images",
            scores.len(),
            set.len()
        )));
    }
    if n == 0 {
        return Err(Error::Input("grid size must be positive".into()));
    }
    let k = set.num_classes();
    let mut queues: Vec<Vec<usize>> = vec![Vec::new(); k];
    for i in 0..set.len() {
        queues[set.label(i)].push(i);
    }
    for q in &mut queues {
        // descending score, ties by index; reversed so `pop` yields the best
        q.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
        q.reverse();
    }
    let (c, h, w) = set.image_shape();
    let cells = n * n;
    let mut grids = Vec::with_capacity(count);
    for built in 0..count {
        let mut available: Vec<usize> = (0..k).filter(|&c| !queues[c].is_empty()).collect();
        if available.len() < cells {
            return Err(Error::PoolExhausted {
                built,
                reason: format!("{} classes have unused images, {cells} needed", available.len()),
            });
        }
        rng.shuffle(&mut available);
        let classes = &available[..cells];
        let mut image = vec![0.0f32; c * n * h * n * w];
        let mut sources = Vec::with_capacity(cells);
        for (cell, &class) in classes.iter().enumerate() {
            let src = queues[class].pop().expect("non-empty");
            sources.push(src);
            let img = set.image::<f32>(src);
            let (gr, gc) = (cell / n, cell % n);
            for ch in 0..c {
                for y in 0..h {
                    let dst = (ch * n * h + gr * h + y) * n * w + gc * w;
                    let s = (ch * h + y) * w;
                    image[dst..dst + w].copy_from_slice(&img.data()[s..s + w]);
                }
            }
        }
        grids.push(GridSample {
            n,
            image: Tensor::new(&[c, n * h, n * w], image)?,
            cells: classes.to_vec(),
            sources,
        });
    }
    Ok(grids)
}

#[cfg(test)]
mod tests;
