//! Netpbm images, box text files and dataset manifests.
//!
//! Box file: one box per line as `x0 y0 x1 y1` (inclusive pixel corners);
//! blank lines and text after `#` are ignored.
//!
//! Manifest: one entry per line, `image<TAB>mask|-<TAB>boxes|-`, paths
//! relative to the manifest's directory. A line `# split: <tag>` names the
//! split. Entries need a mask, a box file, or both; when a box file is given
//! the entry is box-supervised and the mask, if any, is kept for scoring.

use std::fs;
use std::path::{Path, PathBuf};

use super::SyntheticSample;
use crate::boxops::{boxes_to_mask, BoxRect};
use crate::error::{DataError, Error, Result};
use crate::tensor::Tensor;

/// A loaded dataset entry.
#[derive(Debug, Clone, PartialEq)]
pub struct DataSample {
    pub name: String,
    /// `3 x H x W` in [0, 1].
    pub image: Tensor<f64>,
    /// Binary `H x W`.
    pub mask: Option<Tensor<f64>>,
    pub boxes: Option<Vec<BoxRect>>,
}

impl DataSample {
    pub fn height(&self) -> usize {
        self.image.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.image.shape()[2]
    }

    pub fn is_box_supervised(&self) -> bool {
        self.boxes.is_some()
    }

    /// Box-filled mask `b`, when boxes are present.
    pub fn box_mask(&self) -> Option<Result<Tensor<f64>>> {
        self.boxes
            .as_ref()
            .map(|b| boxes_to_mask(b, self.height(), self.width()))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub image: PathBuf,
    pub mask: Option<PathBuf>,
    pub boxes: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Manifest {
    /// Directory the entry paths are relative to.
    pub root: PathBuf,
    pub split: String,
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = read_text(path)?;
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let mut split = String::from("all");
        let mut entries = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = raw.trim_end_matches('\r');
            if let Some(comment) = line.trim_start().strip_prefix('#') {
                if let Some(tag) = comment.trim().strip_prefix("split:") {
                    split = tag.trim().to_string();
                }
                continue;
            }
            if line.trim().is_empty() {
                continue;
            }
            let bad = |reason: &str| DataError::Manifest {
                path: path.to_path_buf(),
                line: line_no,
                reason: reason.to_string(),
            };
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 3 {
                return Err(bad(&format!("expected 3 tab-separated fields, found {}", fields.len())).into());
            }
            let opt = |f: &str| (f != "-").then(|| PathBuf::from(f));
            let entry = ManifestEntry {
                image: PathBuf::from(fields[0]),
                mask: opt(fields[1]),
                boxes: opt(fields[2]),
            };
            if fields[0].is_empty() || fields[0] == "-" {
                return Err(bad("missing image path").into());
            }
            if entry.mask.is_none() && entry.boxes.is_none() {
                return Err(bad("entry has neither a mask nor a box file").into());
            }
            entries.push(entry);
        }
        Ok(Self { root, split, entries })
    }

    pub fn to_text(&self) -> String {
        let show = |p: &Option<PathBuf>| p.as_ref().map_or("-".to_string(), |p| p.display().to_string());
        let mut out = format!("# split: {}\n", self.split);
        for e in &self.entries {
            out.push_str(&format!("{}\t{}\t{}\n", e.image.display(), show(&e.mask), show(&e.boxes)));
        }
        out
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        self.root.join(p)
    }
}

/// Reads and checks one manifest entry.
pub fn load_sample(manifest: &Manifest, entry: &ManifestEntry) -> Result<DataSample> {
    let image_path = manifest.resolve(&entry.image);
    let image = read_ppm(&image_path)?;
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let mask = match &entry.mask {
        Some(p) => {
            let path = manifest.resolve(p);
            let m = read_pgm(&path)?;
            if m.shape() != [h, w] {
                return Err(DataError::SizeMismatch {
                    path,
                    expected: (h, w),
                    found: (m.shape()[0], m.shape()[1]),
                }
                .into());
            }
            Some(m.map(|v| if v >= 0.5 { 1.0 } else { 0.0 }))
        }
        None => None,
    };
    let boxes = match &entry.boxes {
        Some(p) => Some(read_boxes(&manifest.resolve(p), Some((h, w)))?),
        None => None,
    };
    let name = entry
        .image
        .file_stem()
        .map_or_else(String::new, |s| s.to_string_lossy().into_owned());
    Ok(DataSample {
        name,
        image,
        mask,
        boxes,
    })
}

pub fn load_dataset(manifest: &Manifest) -> Result<Vec<DataSample>> {
    manifest.entries.iter().map(|e| load_sample(manifest, e)).collect()
}

/// Writes `images/`, `masks/`, `boxes/` and `manifest.txt` under `dir`.
pub fn save_dataset(dir: &Path, samples: &[SyntheticSample], split: &str) -> Result<Manifest> {
    for sub in ["images", "masks", "boxes"] {
        fs::create_dir_all(dir.join(sub))?;
    }
    let mut entries = Vec::with_capacity(samples.len());
    for (i, s) in samples.iter().enumerate() {
        let stem = format!("{i:05}");
        let entry = ManifestEntry {
            image: PathBuf::from(format!("images/{stem}.ppm")),
            mask: Some(PathBuf::from(format!("masks/{stem}.pgm"))),
            boxes: Some(PathBuf::from(format!("boxes/{stem}.txt"))),
        };
        write_ppm(&dir.join(&entry.image), &s.image)?;
        write_pgm(&dir.join(entry.mask.as_ref().expect("set above")), &s.mask)?;
        write_boxes(&dir.join(entry.boxes.as_ref().expect("set above")), &s.boxes)?;
        entries.push(entry);
    }
    let manifest = Manifest {
        root: dir.to_path_buf(),
        split: split.to_string(),
        entries,
    };
    fs::write(dir.join("manifest.txt"), manifest.to_text())?;
    Ok(manifest)
}

fn read_text(path: &Path) -> Result<String> {
    let bytes = read_bytes(path)?;
    String::from_utf8(bytes).map_err(|_| {
        DataError::ImageFormat {
            path: path.to_path_buf(),
            reason: "file is not UTF-8 text".into(),
        }
        .into()
    })
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => DataError::MissingFile {
            path: path.to_path_buf(),
        }
        .into(),
        _ => Error::Io(e),
    })
}

pub fn read_boxes(path: &Path, frame: Option<(usize, usize)>) -> Result<Vec<BoxRect>> {
    let text = read_text(path)?;
    let mut boxes = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let bad = |reason: String| -> Error {
            DataError::BoxParse {
                path: path.to_path_buf(),
                line: i + 1,
                reason,
            }
            .into()
        };
        let nums = line
            .split_whitespace()
            .map(|t| t.parse::<i64>().map_err(|_| bad(format!("`{t}` is not an integer"))))
            .collect::<Result<Vec<_>>>()?;
        let [x0, y0, x1, y1] = nums[..] else {
            return Err(bad(format!("expected 4 values, found {}", nums.len())));
        };
        if nums.iter().any(|&v| v < 0) {
            return Err(bad("negative coordinate".into()));
        }
        if x1 < x0 || y1 < y0 {
            return Err(bad("corners are not ordered".into()));
        }
        if let Some((h, w)) = frame {
            if x1 as usize >= w || y1 as usize >= h {
                return Err(bad(format!("box exceeds the {w}x{h} image")));
            }
        }
        boxes.push(BoxRect::new(x0 as usize, y0 as usize, x1 as usize, y1 as usize));
    }
    Ok(boxes)
}

pub fn write_boxes(path: &Path, boxes: &[BoxRect]) -> Result<()> {
    let text: String = boxes
        .iter()
        .map(|b| format!("{} {} {} {}\n", b.x0, b.y0, b.x1, b.y1))
        .collect();
    fs::write(path, text)?;
    Ok(())
}

fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes a `3 x H x W` image as binary P6.
pub fn write_ppm(path: &Path, image: &Tensor<f64>) -> Result<()> {
    let [3, h, w] = image.shape()[..] else {
        return Err(Error::Shape(format!("ppm needs a 3 x H x W image, got {:?}", image.shape())));
    };
    let n = h * w;
    let d = image.data();
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    for k in 0..n {
        out.extend((0..3).map(|c| to_byte(d[c * n + k])));
    }
    fs::write(path, out)?;
    Ok(())
}

/// Writes an `H x W` map in [0, 1] as binary P5.
pub fn write_pgm(path: &Path, map: &Tensor<f64>) -> Result<()> {
    let (h, w) = map.hw()?;
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(map.data().iter().map(|&v| to_byte(v)));
    fs::write(path, out)?;
    Ok(())
}

/// Writes a map after rescaling it from `[lo, hi]` to 0..255.
pub fn write_map_pgm(path: &Path, map: &Tensor<f64>, lo: f64, hi: f64) -> Result<()> {
    let span = if hi > lo { hi - lo } else { 1.0 };
    write_pgm(path, &map.map(|v| (v - lo) / span))
}

pub fn read_ppm(path: &Path) -> Result<Tensor<f64>> {
    let (w, h, px) = read_netpbm(path, b"P6", 3)?;
    let n = w * h;
    let mut data = vec![0.0; 3 * n];
    for k in 0..n {
        for c in 0..3 {
            data[c * n + k] = f64::from(px[3 * k + c]) / 255.0;
        }
    }
    Tensor::new(&[3, h, w], data)
}

pub fn read_pgm(path: &Path) -> Result<Tensor<f64>> {
    let (w, h, px) = read_netpbm(path, b"P5", 1)?;
    Tensor::new(&[h, w], px.iter().map(|&b| f64::from(b) / 255.0).collect())
}

fn read_netpbm(path: &Path, magic: &[u8; 2], channels: usize) -> Result<(usize, usize, Vec<u8>)> {
    let bytes = read_bytes(path)?;
    let bad = |reason: &str| -> Error {
        DataError::ImageFormat {
            path: path.to_path_buf(),
            reason: reason.to_string(),
        }
        .into()
    };
    if bytes.len() < 2 || &bytes[..2] != magic {
        return Err(bad(&format!("expected {} header", String::from_utf8_lossy(magic))));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for f in &mut fields {
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                _ => break,
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        *f = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| bad("malformed header"))?;
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(bad("malformed header"));
    }
    pos += 1;
    let [w, h, maxval] = fields;
    if maxval != 255 {
        return Err(bad(&format!("unsupported maxval {maxval}")));
    }
    let need = w * h * channels;
    let px = &bytes[pos..];
    if px.len() != need {
        return Err(bad(&format!("expected {need} pixel bytes, found {}", px.len())));
    }
    Ok((w, h, px.to_vec()))
}
