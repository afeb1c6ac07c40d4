//! Dataset ingestion from raw files, plus synthetic stand-in generators.
//!
//! Two on-disk formats are parsed bit-exactly: the MNIST IDX format
//! (big-endian magic + dims, one byte per pixel) and the CIFAR-10 binary
//! format (3073-byte records: label byte + 3×32×32 pixel bytes). Images
//! are normalized with the standard per-channel constants at load time.
//!
//! The synthetic generators write class-constellation images *through the
//! same file formats*, so every loader code path is exercised even on
//! machines without the real datasets.

use std::fs;
use std::path::{Path, PathBuf};

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

use crate::error::{Error, Result};

pub const MNIST_MEAN: f32 = 0.1307;
pub const MNIST_STD: f32 = 0.3081;
pub const CIFAR_MEAN: [f32; 3] = [0.4914, 0.4822, 0.4465];
pub const CIFAR_STD: [f32; 3] = [0.2470, 0.2435, 0.2616];

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;
const CIFAR_RECORD: usize = 3073;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

/// One split of a classification dataset: normalized NCHW images and
/// integer labels in `[0, classes)`.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub images: Vec<f32>,
    /// `[n, channels, height, width]`
    pub shape: [usize; 4],
    pub labels: Vec<u8>,
    pub classes: usize,
    pub split: Split,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.shape[0]
    }

    pub fn is_empty(&self) -> bool {
        self.shape[0] == 0
    }

    pub fn sample_len(&self) -> usize {
        self.shape[1] * self.shape[2] * self.shape[3]
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let s = self.sample_len();
        &self.images[i * s..(i + 1) * s]
    }

    /// Copies the given samples into one contiguous batch.
    pub fn gather(&self, indices: &[usize]) -> (Vec<f32>, Vec<usize>) {
        let s = self.sample_len();
        let mut images = Vec::with_capacity(indices.len() * s);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            images.extend_from_slice(self.image(i));
            labels.push(self.labels[i] as usize);
        }
        (images, labels)
    }

    /// Deterministic subset: the first `n` entries of a seeded shuffle.
    pub fn subset(&self, n: usize, seed: u64) -> Dataset {
        let n = n.min(self.len());
        let mut order: Vec<usize> = (0..self.len()).collect();
        let mut rng = StdRng::seed_from_u64(seed);
        for i in (1..order.len()).rev() {
            order.swap(i, rng.gen_range(0..=i));
        }
        order.truncate(n);
        let (images, labels) = self.gather(&order);
        Dataset {
            images,
            shape: [n, self.shape[1], self.shape[2], self.shape[3]],
            labels: labels.iter().map(|&l| l as u8).collect(),
            classes: self.classes,
            split: self.split,
        }
    }

    /// Writes the dataset to a single binary cache file; [`Dataset::load`]
    /// reproduces it bit-identically.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = Vec::with_capacity(32 + self.labels.len() + self.images.len() * 4);
        out.extend_from_slice(b"LGDS");
        out.push(match self.split {
            Split::Train => 0,
            Split::Test => 1,
        });
        out.extend_from_slice(&(self.classes as u32).to_le_bytes());
        for d in self.shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        out.extend_from_slice(&(self.labels.len() as u32).to_le_bytes());
        out.extend_from_slice(&self.labels);
        for v in &self.images {
            out.extend_from_slice(&v.to_le_bytes());
        }
        fs::write(path, out).map_err(|e| Error::io(path.display().to_string(), e))
    }

    pub fn load(path: &Path) -> Result<Dataset> {
        let name = path.display().to_string();
        let buf = fs::read(path).map_err(|e| Error::io(name.clone(), e))?;
        let mut c = Cursor::new(&buf, &name);
        let magic = c.bytes(4)?;
        if magic != b"LGDS" {
            return Err(c.fail_at(0, "bad magic, expected \"LGDS\""));
        }
        let split = match c.bytes(1)?[0] {
            0 => Split::Train,
            1 => Split::Test,
            b => return Err(c.fail_at(c.pos - 1, format!("bad split byte {b}"))),
        };
        let classes = c.le_u32()? as usize;
        let mut shape = [0usize; 4];
        for d in &mut shape {
            *d = c.le_u32()? as usize;
        }
        let n_labels = c.le_u32()? as usize;
        let labels = c.bytes(n_labels)?.to_vec();
        let n_px = shape.iter().product::<usize>();
        let raw = c.bytes(n_px * 4)?;
        let images: Vec<f32> = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        if n_labels != shape[0] {
            return Err(c.fail_at(9, format!("{n_labels} labels for {} images", shape[0])));
        }
        Ok(Dataset {
            images,
            shape,
            labels,
            classes,
            split,
        })
    }
}

/// Byte-slice reader that reports failures by file offset.
pub(crate) struct Cursor<'a> {
    buf: &'a [u8],
    pub(crate) pos: usize,
    path: &'a str,
}

impl<'a> Cursor<'a> {
    pub(crate) fn new(buf: &'a [u8], path: &'a str) -> Cursor<'a> {
        Cursor { buf, pos: 0, path }
    }

    pub(crate) fn fail_at(&self, offset: usize, msg: impl Into<String>) -> Error {
        Error::Format {
            path: self.path.to_string(),
            offset: offset as u64,
            msg: msg.into(),
        }
    }

    pub(crate) fn bytes(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(self.fail_at(
                self.buf.len(),
                format!("unexpected end of file, wanted {n} bytes at offset {}", self.pos),
            ));
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    pub(crate) fn be_u32(&mut self) -> Result<u32> {
        let b = self.bytes(4)?;
        Ok(u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
    }

    pub(crate) fn le_u32(&mut self) -> Result<u32> {
        let b = self.bytes(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    pub(crate) fn le_f32(&mut self) -> Result<f32> {
        let b = self.bytes(4)?;
        Ok(f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    pub(crate) fn le_u8(&mut self) -> Result<u8> {
        Ok(self.bytes(1)?[0])
    }

    /// Length-prefixed UTF-8 string (u32 length).
    pub(crate) fn str(&mut self) -> Result<String> {
        let at = self.pos;
        let n = self.le_u32()? as usize;
        if n > 4096 {
            return Err(self.fail_at(at, format!("string length {n} is implausible")));
        }
        let raw = self.bytes(n)?;
        String::from_utf8(raw.to_vec())
            .map_err(|_| self.fail_at(at + 4, "string is not valid UTF-8"))
    }
}

fn read_idx_images(path: &Path) -> Result<(Vec<u8>, usize, usize, usize)> {
    let name = path.display().to_string();
    let buf = fs::read(path).map_err(|e| Error::io(name.clone(), e))?;
    let mut c = Cursor::new(&buf, &name);
    let magic = c.be_u32()?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(c.fail_at(0, format!("magic {magic:#010x}, expected {IDX_IMAGES_MAGIC:#010x}")));
    }
    let n = c.be_u32()? as usize;
    let rows = c.be_u32()? as usize;
    let cols = c.be_u32()? as usize;
    let px = c.bytes(n * rows * cols)?.to_vec();
    Ok((px, n, rows, cols))
}

fn read_idx_labels(path: &Path, classes: usize) -> Result<Vec<u8>> {
    let name = path.display().to_string();
    let buf = fs::read(path).map_err(|e| Error::io(name.clone(), e))?;
    let mut c = Cursor::new(&buf, &name);
    let magic = c.be_u32()?;
    if magic != IDX_LABELS_MAGIC {
        return Err(c.fail_at(0, format!("magic {magic:#010x}, expected {IDX_LABELS_MAGIC:#010x}")));
    }
    let n = c.be_u32()? as usize;
    let labels = c.bytes(n)?.to_vec();
    if let Some(i) = labels.iter().position(|&l| l as usize >= classes) {
        return Err(c.fail_at(8 + i, format!("label {} out of range", labels[i])));
    }
    Ok(labels)
}

/// Loads one MNIST split from the canonical IDX files in `dir`
/// (`train-images-idx3-ubyte` etc.), normalized to mean 0.1307 / std
/// 0.3081.
pub fn load_mnist(dir: &Path, split: Split) -> Result<Dataset> {
    let (img_file, lbl_file) = match split {
        Split::Train => ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
        Split::Test => ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
    };
    let (px, n, rows, cols) = read_idx_images(&dir.join(img_file))?;
    let labels = read_idx_labels(&dir.join(lbl_file), 10)?;
    if labels.len() != n {
        return Err(Error::Format {
            path: dir.join(lbl_file).display().to_string(),
            offset: 4,
            msg: format!("{} labels for {n} images", labels.len()),
        });
    }
    let images = px
        .iter()
        .map(|&p| (p as f32 / 255.0 - MNIST_MEAN) / MNIST_STD)
        .collect();
    Ok(Dataset {
        images,
        shape: [n, 1, rows, cols],
        labels,
        classes: 10,
        split,
    })
}

fn cifar_batch_files(split: Split) -> Vec<&'static str> {
    match split {
        Split::Train => vec![
            "data_batch_1.bin",
            "data_batch_2.bin",
            "data_batch_3.bin",
            "data_batch_4.bin",
            "data_batch_5.bin",
        ],
        Split::Test => vec!["test_batch.bin"],
    }
}

/// Loads one CIFAR-10 split from the binary batch files in `dir` (or its
/// `cifar-10-batches-bin` subdirectory), normalized per channel.
pub fn load_cifar10(dir: &Path, split: Split) -> Result<Dataset> {
    let base = if dir.join("data_batch_1.bin").exists() || dir.join("test_batch.bin").exists() {
        dir.to_path_buf()
    } else {
        dir.join("cifar-10-batches-bin")
    };
    let mut images: Vec<f32> = Vec::new();
    let mut labels: Vec<u8> = Vec::new();
    for file in cifar_batch_files(split) {
        let path = base.join(file);
        let name = path.display().to_string();
        let buf = fs::read(&path).map_err(|e| Error::io(name.clone(), e))?;
        if buf.len() % CIFAR_RECORD != 0 {
            return Err(Error::Format {
                path: name,
                offset: (buf.len() / CIFAR_RECORD * CIFAR_RECORD) as u64,
                msg: format!(
                    "file size {} is not a multiple of the {CIFAR_RECORD}-byte record",
                    buf.len()
                ),
            });
        }
        for (r, rec) in buf.chunks_exact(CIFAR_RECORD).enumerate() {
            let label = rec[0];
            if label > 9 {
                return Err(Error::Format {
                    path: name,
                    offset: (r * CIFAR_RECORD) as u64,
                    msg: format!("label {label} out of range"),
                });
            }
            labels.push(label);
            for ch in 0..3 {
                for px in 0..1024 {
                    let p = rec[1 + ch * 1024 + px] as f32 / 255.0;
                    images.push((p - CIFAR_MEAN[ch]) / CIFAR_STD[ch]);
                }
            }
        }
    }
    let n = labels.len();
    Ok(Dataset {
        images,
        shape: [n, 3, 32, 32],
        labels,
        classes: 10,
        split,
    })
}

// ---- synthetic stand-ins ----------------------------------------------------

/// Deterministic class-constellation image: each class places three
/// Gaussian blobs on a ring at class-specific angles; samples jitter the
/// constellation's position, size, and brightness, add a distractor blob
/// at a random spot, and drown everything in uniform noise. Hard enough
/// that small models stay below ceiling accuracy.
fn synth_pixels(
    rng: &mut StdRng,
    label: u8,
    side: usize,
    channel_phase: f32,
    out: &mut [u8],
) {
    let half = side as f32 / 2.0;
    let radius = if label % 2 == 0 { 0.42 } else { 0.62 } * half;
    let (dx, dy) = (rng.gen_range(-3.0..=3.0f32), rng.gen_range(-3.0..=3.0f32));
    let amp = rng.gen_range(130.0..=210.0f32);
    let sigma = rng.gen_range(0.13..=0.19) * side as f32;
    let mut centers = [(0.0f32, 0.0f32); 3];
    for (i, ctr) in centers.iter_mut().enumerate() {
        let angle = std::f32::consts::TAU * (label as f32 / 10.0 + i as f32 / 3.0)
            + channel_phase;
        *ctr = (
            half + radius * angle.cos() + dx,
            half + radius * angle.sin() + dy,
        );
    }
    let distractor = (
        rng.gen_range(0.0..side as f32),
        rng.gen_range(0.0..side as f32),
        rng.gen_range(0.3..=0.7f32) * amp,
    );
    for y in 0..side {
        for x in 0..side {
            let mut v = rng.gen_range(0.0..=70.0f32);
            for (cx, cy) in centers {
                let d2 = (x as f32 - cx).powi(2) + (y as f32 - cy).powi(2);
                v += amp * (-d2 / (2.0 * sigma * sigma)).exp();
            }
            let d2 = (x as f32 - distractor.0).powi(2) + (y as f32 - distractor.1).powi(2);
            v += distractor.2 * (-d2 / (2.0 * sigma * sigma)).exp();
            out[y * side + x] = v.min(255.0) as u8;
        }
    }
}

/// Writes a synthetic MNIST-shaped dataset as real IDX files in `dir`.
/// Labels cycle 0..9; the same seed always produces identical files.
pub fn write_synth_mnist(dir: &Path, train_n: usize, test_n: usize, seed: u64) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    for (split_seed, n, img_file, lbl_file) in [
        (seed, train_n, "train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
        (seed ^ 0x5eed, test_n, "t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
    ] {
        let mut rng = StdRng::seed_from_u64(split_seed);
        let mut images = Vec::with_capacity(16 + n * 784);
        images.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
        images.extend_from_slice(&(n as u32).to_be_bytes());
        images.extend_from_slice(&28u32.to_be_bytes());
        images.extend_from_slice(&28u32.to_be_bytes());
        let mut labels = Vec::with_capacity(8 + n);
        labels.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
        labels.extend_from_slice(&(n as u32).to_be_bytes());
        let mut px = vec![0u8; 784];
        for i in 0..n {
            let label = (i % 10) as u8;
            synth_pixels(&mut rng, label, 28, 0.0, &mut px);
            images.extend_from_slice(&px);
            labels.push(label);
        }
        let ip = dir.join(img_file);
        fs::write(&ip, images).map_err(|e| Error::io(ip.display().to_string(), e))?;
        let lp = dir.join(lbl_file);
        fs::write(&lp, labels).map_err(|e| Error::io(lp.display().to_string(), e))?;
    }
    Ok(())
}

/// Writes a synthetic CIFAR-shaped dataset as real binary batch files in
/// `dir` (all five train batches plus the test batch).
pub fn write_synth_cifar10(dir: &Path, train_n: usize, test_n: usize, seed: u64) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    let mut rng = StdRng::seed_from_u64(seed);
    let mut plane = vec![0u8; 1024];
    let mut write_batch = |path: PathBuf, count: usize, start: usize| -> Result<()> {
        let mut buf = Vec::with_capacity(count * CIFAR_RECORD);
        for i in 0..count {
            let label = ((start + i) % 10) as u8;
            buf.push(label);
            for ch in 0..3 {
                let phase = ch as f32 * 0.7;
                synth_pixels(&mut rng, label, 32, phase, &mut plane);
                buf.extend_from_slice(&plane);
            }
        }
        fs::write(&path, buf).map_err(|e| Error::io(path.display().to_string(), e))
    };
    let per = train_n / 5;
    let mut extra = train_n % 5;
    let mut start = 0;
    for b in 1..=5 {
        let count = per + usize::from(extra > 0);
        extra = extra.saturating_sub(1);
        write_batch(dir.join(format!("data_batch_{b}.bin")), count, start)?;
        start += count;
    }
    write_batch(dir.join("test_batch.bin"), test_n, 0)
}
