//! CIFAR-10 binary ingestion, input normalization and augmentation.

use std::fs;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const IMAGE_SIDE: usize = 32;
pub const IMAGE_BYTES: usize = 3 * IMAGE_SIDE * IMAGE_SIDE;
/// One label byte followed by the R, G and B planes.
pub const RECORD_BYTES: usize = 1 + IMAGE_BYTES;
pub const CLASSES: usize = 10;
/// Zero padding added on each side before random cropping.
pub const CROP_PAD: usize = 4;

pub const TRAIN_FILES: [&str; 5] = [
    "data_batch_1.bin",
    "data_batch_2.bin",
    "data_batch_3.bin",
    "data_batch_4.bin",
    "data_batch_5.bin",
];
pub const TEST_FILE: &str = "test_batch.bin";

/// Raw records, kept as bytes until batching.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pixels: Vec<u8>,
    labels: Vec<u8>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i] as usize
    }

    pub fn pixels(&self, i: usize) -> &[u8] {
        &self.pixels[i * IMAGE_BYTES..(i + 1) * IMAGE_BYTES]
    }

    /// The first `n` records (all of them if `n` is larger).
    pub fn take(&self, n: usize) -> Dataset {
        let n = n.min(self.len());
        Dataset {
            pixels: self.pixels[..n * IMAGE_BYTES].to_vec(),
            labels: self.labels[..n].to_vec(),
        }
    }

    fn extend(&mut self, other: Dataset) {
        self.pixels.extend(other.pixels);
        self.labels.extend(other.labels);
    }

    /// Per-channel mean of the pixels scaled to `[0, 1]`.
    pub fn channel_means(&self) -> [f64; 3] {
        let plane = IMAGE_SIDE * IMAGE_SIDE;
        let mut sums = [0u64; 3];
        for img in self.pixels.chunks(IMAGE_BYTES) {
            for (c, s) in sums.iter_mut().enumerate() {
                *s += img[c * plane..(c + 1) * plane].iter().map(|&p| p as u64).sum::<u64>();
            }
        }
        let count = (self.len() * plane) as f64 * 255.0;
        sums.map(|s| if count > 0.0 { s as f64 / count } else { 0.0 })
    }
}

/// Parse one CIFAR-10 binary batch file.
pub fn read_cifar_file(path: &Path) -> Result<Dataset> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_records(&bytes, path)
}

fn parse_records(bytes: &[u8], path: &Path) -> Result<Dataset> {
    let whole = bytes.len() / RECORD_BYTES;
    if bytes.len() % RECORD_BYTES != 0 {
        let offset = whole * RECORD_BYTES;
        return Err(Error::Data {
            file: path.to_path_buf(),
            offset: offset as u64,
            message: format!(
                "truncated record: expected {RECORD_BYTES} bytes, found {}",
                bytes.len() - offset
            ),
        });
    }
    let mut ds = Dataset {
        pixels: Vec::with_capacity(whole * IMAGE_BYTES),
        labels: Vec::with_capacity(whole),
    };
    for (i, rec) in bytes.chunks_exact(RECORD_BYTES).enumerate() {
        if rec[0] as usize >= CLASSES {
            return Err(Error::Data {
                file: path.to_path_buf(),
                offset: (i * RECORD_BYTES) as u64,
                message: format!("label {} out of range", rec[0]),
            });
        }
        ds.labels.push(rec[0]);
        ds.pixels.extend_from_slice(&rec[1..]);
    }
    Ok(ds)
}

/// Training and test splits plus the input normalization.
#[derive(Clone, Debug)]
pub struct Cifar10 {
    pub train: Dataset,
    pub test: Dataset,
    /// Per-channel training-set mean subtracted from every image.
    pub mean: [f64; 3],
}

impl Cifar10 {
    pub fn new(train: Dataset, test: Dataset) -> Self {
        let mean = train.channel_means();
        Cifar10 { train, test, mean }
    }

    /// Keep the first records of each split; the normalization is recomputed
    /// on the retained training records.
    pub fn subset(&self, train: Option<usize>, test: Option<usize>) -> Cifar10 {
        let tr = train.map_or_else(|| self.train.clone(), |n| self.train.take(n));
        let te = test.map_or_else(|| self.test.clone(), |n| self.test.take(n));
        Cifar10::new(tr, te)
    }

    /// Normalized images and labels for the given record indices.
    pub fn batch(&self, split: &Dataset, indices: &[usize]) -> LabeledBatch {
        let mut data = Vec::with_capacity(indices.len() * IMAGE_BYTES);
        let plane = IMAGE_SIDE * IMAGE_SIDE;
        for &i in indices {
            for (c, chunk) in split.pixels(i).chunks(plane).enumerate() {
                data.extend(chunk.iter().map(|&p| p as f64 / 255.0 - self.mean[c]));
            }
        }
        LabeledBatch {
            images: Tensor::new([indices.len(), 3, IMAGE_SIDE, IMAGE_SIDE], data).expect("sized above"),
            labels: indices.iter().map(|&i| split.label(i)).collect(),
        }
    }
}

/// Load the five training batches and the test batch from `dir`.
pub fn load_cifar10(dir: &Path) -> Result<Cifar10> {
    let mut train = Dataset::default();
    for f in TRAIN_FILES {
        train.extend(read_cifar_file(&dir.join(f))?);
    }
    let test = read_cifar_file(&dir.join(TEST_FILE))?;
    Ok(Cifar10::new(train, test))
}

#[derive(Clone, Debug)]
pub struct LabeledBatch {
    pub images: Tensor,
    pub labels: Vec<usize>,
}

/// Random crop offset (each in `0..=2*CROP_PAD`) and flip for one image.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Augmentation {
    pub dy: usize,
    pub dx: usize,
    pub flip: bool,
}

impl Augmentation {
    pub const IDENTITY: Augmentation = Augmentation {
        dy: CROP_PAD,
        dx: CROP_PAD,
        flip: false,
    };

    pub fn sample<R: Rng + ?Sized>(rng: &mut R) -> Self {
        Augmentation {
            dy: rng.random_range(0..=2 * CROP_PAD),
            dx: rng.random_range(0..=2 * CROP_PAD),
            flip: rng.random_bool(0.5),
        }
    }
}

/// Apply one augmentation to every sample of `images`: zero-pad by
/// [`CROP_PAD`], crop back to the original size at `(dy, dx)`, then
/// optionally mirror horizontally.
pub fn apply_augmentation(images: &Tensor, aug: &[Augmentation]) -> Tensor {
    let [n, c, h, w] = images.shape();
    assert_eq!(aug.len(), n, "one augmentation per sample");
    Tensor::from_fn([n, c, h, w], |i, ch, y, x| {
        let a = aug[i];
        let x = if a.flip { w - 1 - x } else { x };
        let (sy, sx) = ((y + a.dy) as isize - CROP_PAD as isize, (x + a.dx) as isize - CROP_PAD as isize);
        if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
            0.0
        } else {
            images.at(i, ch, sy as usize, sx as usize)
        }
    })
}

/// Random pad-crop-flip augmentation of a whole batch.
pub fn augment<R: Rng + ?Sized>(batch: &LabeledBatch, rng: &mut R) -> LabeledBatch {
    let aug: Vec<Augmentation> = (0..batch.images.batch()).map(|_| Augmentation::sample(rng)).collect();
    LabeledBatch {
        images: apply_augmentation(&batch.images, &aug),
        labels: batch.labels.clone(),
    }
}

/// Class-dependent synthetic images in the CIFAR-10 record layout: each
/// class has its own colour balance and stripe orientation, plus noise.
pub fn synthetic_records(n: usize, seed: u64) -> Vec<u8> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n * RECORD_BYTES);
    for _ in 0..n {
        let label = rng.random_range(0..CLASSES);
        out.push(label as u8);
        let phase: f64 = rng.random_range(0.0..6.3);
        for c in 0..3 {
            let base = 60.0 + 25.0 * ((label * (c + 2)) % 7) as f64;
            for y in 0..IMAGE_SIDE {
                for x in 0..IMAGE_SIDE {
                    let coord = if label % 2 == 0 { y } else { x } as f64;
                    let freq = 0.2 + 0.15 * (label / 2) as f64;
                    let v = base + 40.0 * (freq * coord + phase).sin() + rng.random_range(-30.0..30.0);
                    out.push(v.clamp(0.0, 255.0) as u8);
                }
            }
        }
    }
    out
}

/// Write a CIFAR-10-layout directory of synthetic data: `per_train_file`
/// records in each training batch file and `test` in the test file.
pub fn write_synthetic_cifar(dir: &Path, per_train_file: usize, test: usize, seed: u64) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let write = |name: &str, bytes: Vec<u8>| -> Result<()> {
        let path = dir.join(name);
        fs::write(&path, bytes).map_err(|e| Error::io(&path, e))
    };
    for (i, f) in TRAIN_FILES.iter().enumerate() {
        write(f, synthetic_records(per_train_file, seed.wrapping_add(i as u64)))?;
    }
    write(TEST_FILE, synthetic_records(test, seed.wrapping_add(1000)))
}
