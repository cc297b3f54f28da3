//! Grayscale image I/O, AWGN corruption and patch datasets.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::{ChaCha20Rng, ChaCha8Rng};
use rand_distr::StandardNormal;
use sha2::{Digest, Sha256};

use crate::error::{Error, PgmError, Result};
use crate::fsutil::write_atomic;
use crate::tensor::{Real, Tensor};

/// 8-bit grayscale image, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrayImage {
    width: usize,
    height: usize,
    pixels: Vec<u8>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 || width * height != pixels.len() {
            return Err(Error::InvalidArgument(format!(
                "{width}x{height} image cannot hold {} pixels",
                pixels.len()
            )));
        }
        Ok(Self { width, height, pixels })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    /// `[1, 1, H, W]` tensor with samples scaled to `[0, 1]`.
    pub fn to_tensor<T: Real>(&self) -> Tensor<T> {
        let scale = 1.0 / 255.0;
        let data = self
            .pixels
            .iter()
            .map(|&p| T::from_f64_lossy(p as f64 * scale))
            .collect();
        Tensor::from_vec(&[1, 1, self.height, self.width], data).expect("image extents")
    }

    /// Clamps to `[0, 1]`, scales by 255 and rounds half away from zero.
    pub fn from_tensor<T: Real>(t: &Tensor<T>) -> Result<Self> {
        let [n, c, h, w] = t.dims4()?;
        if n != 1 || c != 1 {
            return Err(Error::InvalidShape {
                shape: t.shape().to_vec(),
                reason: "expected a single grayscale image".into(),
            });
        }
        let pixels = t
            .data()
            .iter()
            .map(|v| (v.to_f64_lossy().clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        Self::new(w, h, pixels)
    }

    pub fn crop(&self, x0: usize, y0: usize, w: usize, h: usize) -> Result<Self> {
        if x0 + w > self.width || y0 + h > self.height {
            return Err(Error::InvalidArgument(format!(
                "crop {w}x{h}+{x0}+{y0} exceeds {}x{}",
                self.width, self.height
            )));
        }
        let pixels = (y0..y0 + h)
            .flat_map(|y| {
                self.pixels[y * self.width + x0..y * self.width + x0 + w]
                    .iter()
                    .copied()
            })
            .collect();
        Self::new(w, h, pixels)
    }

    /// Element `k` (0..8) of the dihedral group: `k % 4` quarter turns
    /// counter-clockwise, followed by a horizontal flip when `k >= 4`.
    pub fn dihedral(&self, k: u8) -> Self {
        let mut img = self.clone();
        for _ in 0..k % 4 {
            img = img.rot90();
        }
        if k >= 4 {
            img = img.flip_horizontal();
        }
        img
    }

    fn rot90(&self) -> Self {
        let (w, h) = (self.width, self.height);
        let mut pixels = Vec::with_capacity(w * h);
        for y in 0..w {
            for x in 0..h {
                pixels.push(self.pixels[x * w + (w - 1 - y)]);
            }
        }
        Self {
            width: h,
            height: w,
            pixels,
        }
    }

    fn flip_horizontal(&self) -> Self {
        let pixels = self
            .pixels
            .chunks(self.width)
            .flat_map(|row| row.iter().rev().copied())
            .collect();
        Self { pixels, ..self.clone() }
    }
}

/// Parses a binary (P5) PGM with maxval 255.
pub fn decode_pgm(bytes: &[u8]) -> std::result::Result<GrayImage, PgmError> {
    if bytes.len() < 2 || bytes[0] != b'P' {
        return Err(PgmError::BadMagic);
    }
    match bytes[1] {
        b'5' => {}
        d @ b'1'..=b'7' => return Err(PgmError::Unsupported(format!("P{}", d as char))),
        _ => return Err(PgmError::BadMagic),
    }
    let mut pos = 2;
    let mut fields = [0u32; 3];
    for (i, field) in fields.iter_mut().enumerate() {
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                _ => break,
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        let name = ["width", "height", "maxval"][i];
        if start == pos {
            return Err(PgmError::Header(format!("missing {name}")));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .filter(|&v| v > 0)
            .ok_or_else(|| PgmError::Header(format!("invalid {name}")))?;
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(PgmError::Header("missing whitespace after maxval".into()));
    }
    pos += 1;
    let [width, height, maxval] = fields;
    if maxval != 255 {
        return Err(PgmError::MaxVal(maxval));
    }
    let expected = width as usize * height as usize;
    let payload = &bytes[pos..];
    if payload.len() < expected {
        return Err(PgmError::Truncated {
            expected,
            found: payload.len(),
        });
    }
    Ok(GrayImage {
        width: width as usize,
        height: height as usize,
        pixels: payload[..expected].to_vec(),
    })
}

pub fn encode_pgm(image: &GrayImage) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", image.width, image.height).into_bytes();
    out.extend_from_slice(&image.pixels);
    out
}

pub fn read_pgm(path: impl AsRef<Path>) -> Result<GrayImage> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_pgm(&bytes).map_err(|reason| Error::Pgm {
        path: path.to_path_buf(),
        reason,
    })
}

pub fn write_pgm(image: &GrayImage, path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path.as_ref(), &encode_pgm(image))
}

/// Additive white gaussian noise: `sigma` in 8-bit units, realization fixed
/// by `seed`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseSpec {
    pub sigma: f64,
    pub seed: u64,
}

impl NoiseSpec {
    pub fn new(sigma: f64, seed: u64) -> Result<Self> {
        let spec = Self { sigma, seed };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "noise sigma must be finite and >= 0, got {}",
                self.sigma
            )));
        }
        Ok(())
    }

    pub fn with_seed(self, seed: u64) -> Self {
        Self { seed, ..self }
    }
}

/// `clean + N(0, (sigma/255)^2)` per element, unclipped. Noise comes from a
/// ChaCha20 stream seeded with `spec.seed`, one standard normal per element
/// in row-major order.
pub fn add_awgn<T: Real>(clean: &Tensor<T>, spec: NoiseSpec) -> Result<Tensor<T>> {
    spec.validate()?;
    if spec.sigma == 0.0 {
        return Ok(clean.clone());
    }
    let std = spec.sigma / 255.0;
    let mut rng = ChaCha20Rng::seed_from_u64(spec.seed);
    let data = clean
        .data()
        .iter()
        .map(|&v| {
            let z: f64 = rng.sample(StandardNormal);
            v + T::from_f64_lossy(z * std)
        })
        .collect();
    Tensor::from_vec(clean.shape(), data)
}

/// splitmix64 finalizer.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed for item `index` of a stream rooted at `seed`.
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    mix64(seed ^ mix64(index))
}

/// Seed derived from a name (FNV-1a), independent of listing order.
pub fn seed_for_name(seed: u64, name: &str) -> u64 {
    let h = name.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    });
    derive_seed(seed, h)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Augment {
    #[default]
    None,
    /// All eight flips/rotations of each patch.
    Dihedral,
}

impl Augment {
    fn transforms(self) -> &'static [u8] {
        match self {
            Augment::None => &[0],
            Augment::Dihedral => &[0, 1, 2, 3, 4, 5, 6, 7],
        }
    }
}

/// Sliding-window patches in raster order; with augmentation, the eight
/// dihedral variants of each window follow one another.
pub fn extract_patches(
    image: &GrayImage,
    patch_size: usize,
    stride: usize,
    augment: Augment,
) -> Result<Vec<GrayImage>> {
    Ok(patch_windows(image, patch_size, stride)?
        .into_iter()
        .flat_map(|(x, y)| {
            let base = image.crop(x, y, patch_size, patch_size).expect("window inside image");
            augment.transforms().iter().map(move |&k| base.dihedral(k))
        })
        .collect())
}

fn patch_windows(image: &GrayImage, patch_size: usize, stride: usize) -> Result<Vec<(usize, usize)>> {
    if patch_size == 0 || stride == 0 {
        return Err(Error::InvalidArgument("patch size and stride must be positive".into()));
    }
    if patch_size > image.width || patch_size > image.height {
        return Err(Error::InvalidArgument(format!(
            "patch {patch_size} larger than {}x{} image",
            image.width, image.height
        )));
    }
    let xs = (image.width - patch_size) / stride + 1;
    let ys = (image.height - patch_size) / stride + 1;
    Ok((0..ys)
        .flat_map(|j| (0..xs).map(move |i| (i * stride, j * stride)))
        .collect())
}

/// `.pgm` files of a directory sorted by file name.
pub fn list_pgm_files(dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && p.extension().is_some_and(|e| e.eq_ignore_ascii_case("pgm")))
        .collect();
    files.sort_by(|a, b| a.file_name().cmp(&b.file_name()));
    Ok(files)
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct PatchEntry {
    pub file: String,
    /// Index of the patch within its source image (after augmentation).
    pub index: usize,
    pub transform: u8,
    pub noise_seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DatasetSpec {
    pub noise: NoiseSpec,
    pub patch_size: usize,
    pub stride: usize,
    pub augment: Augment,
    pub shuffle_seed: u64,
    /// Keep at most this many patches (after shuffling).
    pub max_patches: Option<usize>,
}

impl DatasetSpec {
    pub fn new(noise: NoiseSpec) -> Self {
        Self {
            noise,
            patch_size: 40,
            stride: 10,
            augment: Augment::None,
            shuffle_seed: 0,
            max_patches: None,
        }
    }
}

/// Clean/noisy training pairs plus the manifest that reproduces them.
#[derive(Debug, Clone)]
pub struct PatchSet<T> {
    pub patch_size: usize,
    pub sigma: f64,
    pub entries: Vec<PatchEntry>,
    pub clean: Vec<Tensor<T>>,
    pub noisy: Vec<Tensor<T>>,
}

impl<T: Real> PatchSet<T> {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Line-oriented manifest: `file<TAB>patch_index<TAB>transform<TAB>seed`.
    pub fn manifest(&self) -> String {
        let mut s = format!("# patch_size={} sigma={}\n", self.patch_size, self.sigma);
        for e in &self.entries {
            let _ = writeln!(s, "{}\t{}\t{}\t{}", e.file, e.index, e.transform, e.noise_seed);
        }
        s
    }

    pub fn manifest_hash(&self) -> String {
        Sha256::digest(self.manifest().as_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    /// Stacks the selected pairs into `(clean, noisy)` batches.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor<T>, Tensor<T>)> {
        let clean: Vec<_> = indices.iter().map(|&i| &self.clean[i]).collect();
        let noisy: Vec<_> = indices.iter().map(|&i| &self.noisy[i]).collect();
        Ok((Tensor::stack_batch(&clean)?, Tensor::stack_batch(&noisy)?))
    }

    /// Splits off the last `count` pairs.
    pub fn split_off(&mut self, count: usize) -> Self {
        let at = self.len().saturating_sub(count);
        Self {
            patch_size: self.patch_size,
            sigma: self.sigma,
            entries: self.entries.split_off(at),
            clean: self.clean.split_off(at),
            noisy: self.noisy.split_off(at),
        }
    }
}

/// Builds a dataset from every `.pgm` in `dir`. Patch `i` (global raster
/// order over sorted files) is corrupted with seed `derive_seed(noise.seed, i)`;
/// the set is then shuffled by `shuffle_seed`.
pub fn make_dataset<T: Real>(dir: impl AsRef<Path>, spec: &DatasetSpec) -> Result<PatchSet<T>> {
    let dir = dir.as_ref();
    spec.noise.validate()?;
    let files = list_pgm_files(dir)?;
    if files.is_empty() {
        return Err(Error::Dataset(format!("no .pgm images in {}", dir.display())));
    }
    let mut items = Vec::new();
    for path in &files {
        let image = read_pgm(path)?;
        let name = path.file_name().unwrap().to_string_lossy().into_owned();
        let windows =
            patch_windows(&image, spec.patch_size, spec.stride).map_err(|e| Error::Dataset(format!("{name}: {e}")))?;
        let mut index = 0;
        for (x, y) in windows {
            let base = image.crop(x, y, spec.patch_size, spec.patch_size)?;
            for &k in spec.augment.transforms() {
                let seed = derive_seed(spec.noise.seed, items.len() as u64);
                let entry = PatchEntry {
                    file: name.clone(),
                    index,
                    transform: k,
                    noise_seed: seed,
                };
                items.push((entry, base.dihedral(k)));
                index += 1;
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.shuffle_seed);
    items.shuffle(&mut rng);
    if let Some(max) = spec.max_patches {
        items.truncate(max);
    }
    let mut set = PatchSet {
        patch_size: spec.patch_size,
        sigma: spec.noise.sigma,
        entries: Vec::with_capacity(items.len()),
        clean: Vec::with_capacity(items.len()),
        noisy: Vec::with_capacity(items.len()),
    };
    for (entry, patch) in items {
        let clean = patch.to_tensor::<T>();
        let noisy = add_awgn(&clean, spec.noise.with_seed(entry.noise_seed))?;
        set.entries.push(entry);
        set.clean.push(clean);
        set.noisy.push(noisy);
    }
    Ok(set)
}
