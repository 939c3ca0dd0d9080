use std::fs;
use std::io::{BufReader, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const CIFAR_SIDE: usize = 32;
const CIFAR_RECORD: usize = 1 + 3 * CIFAR_SIDE * CIFAR_SIDE;
const INDEX_FILE: &str = ".cooc-index.json";

/// Labelled RGB images with values in [0, 1], each C×H×W.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub images: Vec<Tensor<f32>>,
    pub labels: Vec<usize>,
    pub classes: usize,
}

impl Dataset {
    pub fn new(images: Vec<Tensor<f32>>, labels: Vec<usize>, classes: usize) -> Result<Self> {
        if images.len() != labels.len() {
            return Err(Error::Data(format!("{} images but {} labels", images.len(), labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
            return Err(Error::Data(format!("label {bad} out of range for {classes} classes")));
        }
        if let Some(img) = images.iter().find(|t| t.ndim() != 3 || t.shape()[0] != 3) {
            return Err(Error::Data(format!("expected 3×H×W images, found {:?}", img.shape())));
        }
        Ok(Dataset { images, labels, classes })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// First `n` images.
    pub fn take(&self, n: usize) -> Dataset {
        let n = n.min(self.len());
        Dataset { images: self.images[..n].to_vec(), labels: self.labels[..n].to_vec(), classes: self.classes }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetFormat {
    /// Directory of `data_batch_*.bin` and `test_batch.bin`.
    Cifar,
    /// `train/<class>/*` and `test/<class>/*` with PNG or PPM files.
    ImageFolder,
    /// Generated in memory; the path is ignored.
    Synthetic,
}

impl DatasetFormat {
    pub fn name(self) -> &'static str {
        match self {
            DatasetFormat::Cifar => "cifar",
            DatasetFormat::ImageFolder => "image_folder",
            DatasetFormat::Synthetic => "synthetic",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.replace('-', "_").as_str() {
            "cifar" => Some(DatasetFormat::Cifar),
            "image_folder" => Some(DatasetFormat::ImageFolder),
            "synthetic" => Some(DatasetFormat::Synthetic),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

/// Where and how to read the data.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub format: DatasetFormat,
    pub path: PathBuf,
    /// Images per split for the synthetic format.
    pub synthetic_train: usize,
    pub synthetic_test: usize,
    pub synthetic_seed: u64,
}

impl DatasetSpec {
    pub fn synthetic(train: usize, test: usize, seed: u64) -> Self {
        DatasetSpec {
            format: DatasetFormat::Synthetic,
            path: PathBuf::new(),
            synthetic_train: train,
            synthetic_test: test,
            synthetic_seed: seed,
        }
    }

    pub fn load(&self, split: Split) -> Result<Dataset> {
        match self.format {
            DatasetFormat::Cifar => load_cifar_dir(&self.path, split),
            DatasetFormat::ImageFolder => {
                let sub = match split {
                    Split::Train => "train",
                    Split::Test => "test",
                };
                load_image_folder(&self.path.join(sub))
            }
            DatasetFormat::Synthetic => {
                let (n, seed) = match split {
                    Split::Train => (self.synthetic_train, self.synthetic_seed),
                    Split::Test => (self.synthetic_test, self.synthetic_seed ^ 0x5eed_7e57),
                };
                Ok(synthetic_dataset(n, seed))
            }
        }
    }
}

/// Parse CIFAR-10 binary records: one label byte, then 1024 red, 1024 green
/// and 1024 blue bytes.
pub fn parse_cifar_records(bytes: &[u8], source: &str) -> Result<Dataset> {
    if bytes.is_empty() || !bytes.len().is_multiple_of(CIFAR_RECORD) {
        return Err(Error::Data(format!(
            "{source}: {} bytes is not a whole number of {CIFAR_RECORD}-byte records",
            bytes.len()
        )));
    }
    let mut images = Vec::with_capacity(bytes.len() / CIFAR_RECORD);
    let mut labels = Vec::with_capacity(images.capacity());
    for (i, rec) in bytes.chunks(CIFAR_RECORD).enumerate() {
        let label = rec[0] as usize;
        if label >= 10 {
            return Err(Error::Data(format!("{source}: record {i} has label {label}")));
        }
        labels.push(label);
        let px = rec[1..].iter().map(|&b| b as f32 / 255.0).collect();
        images.push(Tensor::new(&[3, CIFAR_SIDE, CIFAR_SIDE], px)?);
    }
    Dataset::new(images, labels, 10)
}

pub fn load_cifar_file(path: &Path) -> Result<Dataset> {
    let bytes = fs::read(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    parse_cifar_records(&bytes, &path.display().to_string())
}

pub fn load_cifar_dir(dir: &Path, split: Split) -> Result<Dataset> {
    let files: Vec<PathBuf> = match split {
        Split::Test => vec![dir.join("test_batch.bin")],
        Split::Train => {
            let mut v: Vec<PathBuf> = fs::read_dir(dir)
                .map_err(|e| Error::Data(format!("{}: {e}", dir.display())))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| {
                    p.file_name().and_then(|n| n.to_str()).is_some_and(|n| n.starts_with("data_batch_") && n.ends_with(".bin"))
                })
                .collect();
            v.sort();
            v
        }
    };
    if files.is_empty() {
        return Err(Error::Data(format!("{}: no data_batch_*.bin files", dir.display())));
    }
    let mut all = Dataset { images: Vec::new(), labels: Vec::new(), classes: 10 };
    for f in files {
        let d = load_cifar_file(&f)?;
        all.images.extend(d.images);
        all.labels.extend(d.labels);
    }
    Ok(all)
}

/// Write 32×32 images as CIFAR-10 binary records.
pub fn write_cifar_binary(path: &Path, data: &Dataset) -> Result<()> {
    let mut out = Vec::with_capacity(data.len() * CIFAR_RECORD);
    for (img, &label) in data.images.iter().zip(&data.labels) {
        if img.shape() != [3, CIFAR_SIDE, CIFAR_SIDE] || label > 255 {
            return Err(Error::Data(format!("cannot store image {:?} with label {label} as CIFAR", img.shape())));
        }
        out.push(label as u8);
        out.extend(img.data().iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&out)?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct FolderIndex {
    classes: Vec<String>,
    entries: Vec<(String, usize)>,
}

fn scan_folder(root: &Path) -> Result<FolderIndex> {
    let read = |p: &Path| fs::read_dir(p).map_err(|e| Error::Data(format!("{}: {e}", p.display())));
    let mut classes: Vec<String> = read(root)?
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_dir())
        .filter_map(|e| e.file_name().to_str().map(String::from))
        .collect();
    classes.sort();
    if classes.is_empty() {
        return Err(Error::Data(format!("{}: no class subdirectories", root.display())));
    }
    let mut entries = Vec::new();
    for (label, class) in classes.iter().enumerate() {
        let mut files: Vec<String> = read(&root.join(class))?
            .filter_map(|e| e.ok())
            .filter_map(|e| e.file_name().to_str().map(String::from))
            .filter(|n| {
                let lower = n.to_ascii_lowercase();
                lower.ends_with(".png") || lower.ends_with(".ppm")
            })
            .collect();
        files.sort();
        entries.extend(files.into_iter().map(|f| (format!("{class}/{f}"), label)));
    }
    Ok(FolderIndex { classes, entries })
}

/// Class-per-subdirectory images. The file list is cached in an index file
/// on first scan; a stale or unreadable index triggers a rescan.
pub fn load_image_folder(root: &Path) -> Result<Dataset> {
    let index_path = root.join(INDEX_FILE);
    let cached = fs::read(&index_path).ok().and_then(|b| serde_json::from_slice::<FolderIndex>(&b).ok());
    let index = match cached {
        Some(ix) if ix.entries.iter().all(|(p, _)| root.join(p).is_file()) => ix,
        _ => {
            let ix = scan_folder(root)?;
            if let Ok(json) = serde_json::to_vec_pretty(&ix) {
                if fs::write(&index_path, json).is_err() {
                    log::warn!("could not cache the image index at {}", index_path.display());
                }
            }
            ix
        }
    };
    if index.entries.is_empty() {
        return Err(Error::Data(format!("{}: no PNG or PPM images", root.display())));
    }
    let mut images = Vec::with_capacity(index.entries.len());
    let mut labels = Vec::with_capacity(index.entries.len());
    for (rel, label) in &index.entries {
        images.push(read_image(&root.join(rel))?);
        labels.push(*label);
    }
    Dataset::new(images, labels, index.classes.len())
}

/// Decode a PNG or binary PPM into a 3×H×W tensor in [0, 1].
pub fn read_image(path: &Path) -> Result<Tensor<f32>> {
    let ext = path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase);
    let err = |m: String| Error::Data(format!("{}: {m}", path.display()));
    match ext.as_deref() {
        Some("png") => read_png(path).map_err(|e| err(e.to_string())),
        Some("ppm") => {
            let bytes = fs::read(path).map_err(|e| err(e.to_string()))?;
            parse_ppm(&bytes).map_err(|e| err(e.to_string()))
        }
        _ => Err(err("unsupported image type".into())),
    }
}

fn read_png(path: &Path) -> Result<Tensor<f32>> {
    let mut decoder = png::Decoder::new(BufReader::new(fs::File::open(path)?));
    decoder.set_transformations(png::Transformations::normalize_to_color8());
    let mut reader = decoder.read_info().map_err(|e| Error::Data(e.to_string()))?;
    let mut buf = vec![0; reader.output_buffer_size().ok_or_else(|| Error::Data("image too large".into()))?];
    let info = reader.next_frame(&mut buf).map_err(|e| Error::Data(e.to_string()))?;
    let channels = info.color_type.samples();
    let (w, h) = (info.width as usize, info.height as usize);
    let bytes = &buf[..info.buffer_size()];
    interleaved_to_planar(bytes, w, h, channels)
}

fn interleaved_to_planar(bytes: &[u8], w: usize, h: usize, channels: usize) -> Result<Tensor<f32>> {
    let plane = w * h;
    if bytes.len() < plane * channels {
        return Err(Error::Data("truncated pixel data".into()));
    }
    let mut out = vec![0.0f32; 3 * plane];
    for i in 0..plane {
        for c in 0..3 {
            // Gray replicates; alpha is dropped.
            let src = if channels < 3 { 0 } else { c };
            out[c * plane + i] = bytes[i * channels + src] as f32 / 255.0;
        }
    }
    Tensor::new(&[3, h, w], out)
}

/// Binary PPM (P6) with maxval ≤ 255.
pub fn parse_ppm(bytes: &[u8]) -> Result<Tensor<f32>> {
    let mut pos = 0;
    let mut token = || -> Result<String> {
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            break;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Data("truncated PPM header".into()));
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    if token()? != "P6" {
        return Err(Error::Data("only binary P6 PPM is supported".into()));
    }
    let num = |s: String| s.parse::<usize>().map_err(|_| Error::Data(format!("bad PPM header field `{s}`")));
    let w = num(token()?)?;
    let h = num(token()?)?;
    let max = num(token()?)?;
    if w == 0 || h == 0 || max == 0 || max > 255 {
        return Err(Error::Data(format!("unsupported PPM geometry {w}×{h} maxval {max}")));
    }
    let data = bytes.get(pos + 1..).unwrap_or(&[]);
    let scaled: Vec<u8> = data.iter().map(|&b| ((b as usize * 255) / max) as u8).collect();
    interleaved_to_planar(&scaled, w, h, 3)
}

pub fn write_ppm(path: &Path, image: &Tensor<f32>) -> Result<()> {
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let plane = h * w;
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    for i in 0..plane {
        for c in 0..3 {
            out.push((image.data()[c * plane + i].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    fs::write(path, out)?;
    Ok(())
}

/// 7×7 binary motifs: plus, hollow square, X, disk, stripes.
fn motif(kind: usize, y: usize, x: usize) -> bool {
    let (cy, cx) = (y as isize - 3, x as isize - 3);
    match kind {
        0 => cy.abs() <= 1 || cx.abs() <= 1,
        1 => y == 0 || y == 6 || x == 0 || x == 6,
        2 => cy == cx || cy == -cx,
        3 => cy * cy + cx * cx <= 10,
        _ => y.is_multiple_of(2),
    }
}

const MOTIFS: usize = 5;

/// Unordered motif pair of each of the ten classes.
pub fn class_motifs(class: usize) -> (usize, usize) {
    let mut k = 0;
    for a in 0..MOTIFS {
        for b in a + 1..MOTIFS {
            if k == class {
                return (a, b);
            }
            k += 1;
        }
    }
    panic!("class {class} out of range")
}

/// Ten balanced classes of 32×32 images. Each image holds the two motifs of
/// its class, each in a different random quadrant with a random colour, on a
/// noisy smooth background. Class identity needs both motifs, which never
/// fall inside one small receptive field.
pub fn synthetic_dataset(n: usize, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let side = CIFAR_SIDE;
    let plane = side * side;
    let mut images = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % 10;
        let mut px = vec![0.0f32; 3 * plane];
        let base: [f32; 3] = [rng.random_range(0.1..0.5), rng.random_range(0.1..0.5), rng.random_range(0.1..0.5)];
        let tilt: [f32; 2] = [rng.random_range(-0.15..0.15), rng.random_range(-0.15..0.15)];
        for c in 0..3 {
            for y in 0..side {
                for x in 0..side {
                    let g = tilt[0] * (y as f32 / side as f32) + tilt[1] * (x as f32 / side as f32);
                    px[c * plane + y * side + x] = base[c] + g + rng.random_range(-0.06..0.06);
                }
            }
        }
        let (a, b) = class_motifs(class);
        let mut quadrants = [0usize, 1, 2, 3];
        quadrants.shuffle(&mut rng);
        let kinds = if rng.random_bool(0.5) { [a, b] } else { [b, a] };
        for (kind, q) in kinds.into_iter().zip(quadrants) {
            let oy = (q / 2) * 16 + rng.random_range(1..=8);
            let ox = (q % 2) * 16 + rng.random_range(1..=8);
            let colour: [f32; 3] = [rng.random_range(0.55..1.0), rng.random_range(0.55..1.0), rng.random_range(0.55..1.0)];
            for y in 0..7 {
                for x in 0..7 {
                    if motif(kind, y, x) {
                        for c in 0..3 {
                            px[c * plane + (oy + y) * side + ox + x] = colour[c];
                        }
                    }
                }
            }
        }
        px.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
        images.push(Tensor::new(&[3, side, side], px).expect("fixed shape"));
        labels.push(class);
    }
    Dataset { images, labels, classes: 10 }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn class_pairs_are_distinct() {
        let pairs: Vec<_> = (0..10).map(class_motifs).collect();
        for (i, p) in pairs.iter().enumerate() {
            assert!(p.0 < p.1);
            assert!(!pairs[i + 1..].contains(p));
        }
    }

    #[test]
    fn synthetic_is_balanced_and_seeded() {
        let a = synthetic_dataset(40, 3);
        assert_eq!(a, synthetic_dataset(40, 3));
        assert_ne!(a, synthetic_dataset(40, 4));
        for k in 0..10 {
            assert_eq!(a.labels.iter().filter(|&&y| y == k).count(), 4);
        }
    }

    #[test]
    fn ppm_round_trip() {
        let img = Tensor::<f32>::from_fn(&[3, 2, 3], |i| i as f32 / 17.0);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.ppm");
        write_ppm(&p, &img).unwrap();
        let back = read_image(&p).unwrap();
        assert!(img.max_abs_diff(&back).unwrap() < 1.0 / 255.0);
    }
}
