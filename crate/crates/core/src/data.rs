//! Dataset ingestion (image files + JSON-Lines manifest) and the synthetic
//! splice-tamper generator used for end-to-end tests and demos.

use std::collections::HashSet;
use std::io::{BufRead, Write as _};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: String,
    pub label: u8,
    pub split: Split,
}

/// One labeled image in memory; values in `[0,1]`, shape `[h, w, 3]`.
#[derive(Debug, Clone)]
pub struct Sample {
    pub image: Tensor<f32>,
    pub label: u8,
}

/// Parse a JSON-Lines manifest. Malformed lines are reported with their
/// 1-based line number; duplicate paths and labels outside {0,1} are errors.
/// An empty file parses to an empty list (the caller decides whether that is
/// a problem).
pub fn load_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let file = std::fs::File::open(path)?;
    let reader = std::io::BufReader::new(file);
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in reader.lines().enumerate() {
        let lineno = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let entry: ManifestEntry = serde_json::from_str(&line)
            .map_err(|e| Error::Manifest { line: lineno, msg: e.to_string() })?;
        if entry.label > 1 {
            return Err(Error::Manifest {
                line: lineno,
                msg: format!("label must be 0 or 1, got {}", entry.label),
            });
        }
        if !seen.insert(entry.path.clone()) {
            return Err(Error::Manifest {
                line: lineno,
                msg: format!("duplicate path '{}'", entry.path),
            });
        }
        out.push(entry);
    }
    Ok(out)
}

pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for e in entries {
        let line = serde_json::to_string(e).expect("manifest entry serializes");
        writeln!(f, "{line}")?;
    }
    f.flush()?;
    Ok(())
}

// ── image decode / encode ──────────────────────────────────────────────

/// Decode a PNG or binary PPM (P6) file to `[h, w, 3]` with values in
/// `[0,1]` (divide by 255). Grayscale sources are replicated to 3 channels.
pub fn decode_image(path: &Path) -> Result<Tensor<f32>> {
    let bytes = std::fs::read(path)
        .map_err(|e| Error::ImageDecode { path: path.display().to_string(), msg: e.to_string() })?;
    let fail = |msg: String| Error::ImageDecode { path: path.display().to_string(), msg };
    if bytes.starts_with(b"P6") {
        decode_ppm(&bytes).map_err(|e| fail(e.to_string()))
    } else if bytes.starts_with(&[0x89, b'P', b'N', b'G']) {
        let img = image::load_from_memory_with_format(&bytes, image::ImageFormat::Png)
            .map_err(|e| fail(e.to_string()))?;
        let rgb = img.to_rgb8();
        let (w, h) = (rgb.width() as usize, rgb.height() as usize);
        let data: Vec<f32> = rgb.as_raw().iter().map(|&b| b as f32 / 255.0).collect();
        Tensor::new(vec![h, w, 3], data)
    } else {
        Err(fail("unsupported format (expected PNG or PPM P6)".into()))
    }
}

fn decode_ppm(bytes: &[u8]) -> Result<Tensor<f32>> {
    let mut cursor = 2usize; // past "P6"
    let mut fields = Vec::with_capacity(3);
    // header: three whitespace-separated integers, '#' comments allowed
    while fields.len() < 3 {
        while cursor < bytes.len() && bytes[cursor].is_ascii_whitespace() {
            cursor += 1;
        }
        if cursor < bytes.len() && bytes[cursor] == b'#' {
            while cursor < bytes.len() && bytes[cursor] != b'\n' {
                cursor += 1;
            }
            continue;
        }
        let start = cursor;
        while cursor < bytes.len() && bytes[cursor].is_ascii_digit() {
            cursor += 1;
        }
        if cursor == start {
            return Err(Error::ImageDecode { path: String::new(), msg: "bad PPM header".into() });
        }
        let v: usize = std::str::from_utf8(&bytes[start..cursor])
            .unwrap()
            .parse()
            .map_err(|_| Error::ImageDecode { path: String::new(), msg: "bad PPM header".into() })?;
        fields.push(v);
    }
    let (w, h, maxval) = (fields[0], fields[1], fields[2]);
    if maxval != 255 {
        return Err(Error::ImageDecode {
            path: String::new(),
            msg: format!("PPM maxval must be 255, got {maxval}"),
        });
    }
    cursor += 1; // single whitespace byte after maxval
    let need = w * h * 3;
    let payload = bytes.get(cursor..cursor + need).ok_or_else(|| Error::ImageDecode {
        path: String::new(),
        msg: format!("truncated PPM: need {need} bytes"),
    })?;
    let data: Vec<f32> = payload.iter().map(|&b| b as f32 / 255.0).collect();
    Tensor::new(vec![h, w, 3], data)
}

/// Write `[h, w, 3]` values in `[0,1]` as a binary PPM (P6), quantized by
/// rounding to 0..255.
pub fn write_ppm(path: &Path, image: &Tensor<f32>) -> Result<()> {
    let s = image.shape();
    if s.len() != 3 || s[2] != 3 {
        return Err(Error::ShapeMismatch(format!("write_ppm needs [h,w,3], got {s:?}")));
    }
    let (h, w) = (s[0], s[1]);
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write!(f, "P6\n{w} {h}\n255\n")?;
    let bytes: Vec<u8> = image
        .data()
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    f.write_all(&bytes)?;
    f.flush()?;
    Ok(())
}

/// Bilinear resize to a square target, sampling with pixel centers aligned
/// (output center maps to `(i + 0.5) * in/out - 0.5`, clamped).
pub fn resize_bilinear(image: &Tensor<f32>, target: usize) -> Result<Tensor<f32>> {
    let s = image.shape();
    if s.len() != 3 || s[2] != 3 || s[0] < 2 || s[1] < 2 {
        return Err(Error::ShapeMismatch(format!(
            "resize needs [h>=2, w>=2, 3], got {s:?}"
        )));
    }
    if target == 0 {
        return Err(Error::InvalidArgument("resize target must be positive".into()));
    }
    let (h, w) = (s[0], s[1]);
    if h == target && w == target {
        return Ok(image.clone());
    }
    let mut out = Tensor::zeros(vec![target, target, 3]);
    let sy = h as f64 / target as f64;
    let sx = w as f64 / target as f64;
    for oy in 0..target {
        let fy = ((oy as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let wy = (fy - y0 as f64) as f32;
        for ox in 0..target {
            let fx = ((ox as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let wx = (fx - x0 as f64) as f32;
            for c in 0..3 {
                let at = |y: usize, x: usize| image.data()[(y * w + x) * 3 + c];
                let top = at(y0, x0) * (1.0 - wx) + at(y0, x1) * wx;
                let bot = at(y1, x0) * (1.0 - wx) + at(y1, x1) * wx;
                out.data_mut()[(oy * target + ox) * 3 + c] = top * (1.0 - wy) + bot * wy;
            }
        }
    }
    Ok(out)
}

/// Load the images of one split, resized to `side` if needed. Paths in the
/// manifest are resolved relative to the manifest's directory.
pub fn load_split(
    manifest_path: &Path,
    entries: &[ManifestEntry],
    split: Split,
    side: usize,
) -> Result<Vec<Sample>> {
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    let mut out = Vec::new();
    for e in entries.iter().filter(|e| e.split == split) {
        let p = base.join(&e.path);
        let img = decode_image(&p)?;
        let img = if img.shape() == [side, side, 3] { img } else { resize_bilinear(&img, side)? };
        out.push(Sample { image: img, label: e.label });
    }
    Ok(out)
}

// ── synthetic splice-tamper generator ──────────────────────────────────

fn default_size() -> usize {
    64
}
fn default_patch_min() -> f64 {
    0.2
}
fn default_patch_max() -> f64 {
    0.4
}
fn default_feather() -> usize {
    2
}
fn default_blur() -> usize {
    1
}
fn default_train_frac() -> f64 {
    0.7
}
fn default_val_frac() -> f64 {
    0.15
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub count_per_class: usize,
    #[serde(default = "default_size")]
    pub size: usize,
    pub seed: u64,
    #[serde(default = "default_patch_min")]
    pub patch_min: f64,
    #[serde(default = "default_patch_max")]
    pub patch_max: f64,
    #[serde(default = "default_feather")]
    pub feather: usize,
    #[serde(default = "default_blur")]
    pub blur_radius: usize,
    /// Fraction of each class assigned to the train split; the val fraction
    /// follows, and the remainder is test.
    #[serde(default = "default_train_frac")]
    pub train_frac: f64,
    #[serde(default = "default_val_frac")]
    pub val_frac: f64,
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.count_per_class == 0 {
            return Err(Error::InvalidArgument("count_per_class must be >= 1".into()));
        }
        if self.size < 8 {
            return Err(Error::InvalidArgument("size must be >= 8".into()));
        }
        if !(0.0 < self.patch_min && self.patch_min <= self.patch_max && self.patch_max < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "patch range [{}, {}] must satisfy 0 < min <= max < 1",
                self.patch_min, self.patch_max
            )));
        }
        if !(0.0..=1.0).contains(&(self.train_frac + self.val_frac)) {
            return Err(Error::InvalidArgument("train_frac + val_frac must be <= 1".into()));
        }
        Ok(())
    }
}

/// Pasted-rectangle location, in pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchRect {
    pub y0: usize,
    pub x0: usize,
    pub side: usize,
}

/// One generated sample before it is written to disk.
#[derive(Debug, Clone)]
pub struct SynthSample {
    pub image: Tensor<f32>,
    pub label: u8,
    /// Present on fakes: where the foreign rectangle was pasted.
    pub patch: Option<PatchRect>,
}

/// A clean background: the sum of four random low-frequency sinusoidal
/// fields plus Gaussian pixel noise (sigma 0.02), clamped to [0,1].
fn synth_real(size: usize, rng: &mut Rng) -> Tensor<f32> {
    let mut fields = Vec::with_capacity(4);
    for _ in 0..4 {
        let fx = 0.5 + 1.0 * rng.next_f64();
        let fy = 0.5 + 1.0 * rng.next_f64();
        let phase = rng.next_f64() * std::f64::consts::TAU;
        let amp = 0.08 + 0.10 * rng.next_f64();
        // per-channel weights so the field tints rather than stays gray
        let wc = [0.5 + 0.5 * rng.next_f64(), 0.5 + 0.5 * rng.next_f64(), 0.5 + 0.5 * rng.next_f64()];
        fields.push((fx, fy, phase, amp, wc));
    }
    let mut img = Tensor::zeros(vec![size, size, 3]);
    for y in 0..size {
        for x in 0..size {
            let u = x as f64 / size as f64;
            let v = y as f64 / size as f64;
            for c in 0..3 {
                let mut acc = 0.5;
                for &(fx, fy, phase, amp, wc) in &fields {
                    acc += amp * wc[c] * (std::f64::consts::TAU * (fx * u + fy * v) + phase).sin();
                }
                acc += rng.normal() * 0.02;
                img.data_mut()[(y * size + x) * 3 + c] = acc.clamp(0.0, 1.0) as f32;
            }
        }
    }
    img
}

/// Box blur of radius `r` restricted to a rectangle of `img`.
fn box_blur_rect(img: &mut Tensor<f32>, rect: PatchRect, r: usize) {
    if r == 0 {
        return;
    }
    let size = img.shape()[0];
    let src = img.clone();
    let (y0, x0, s) = (rect.y0, rect.x0, rect.side);
    for y in y0..y0 + s {
        for x in x0..x0 + s {
            for c in 0..3 {
                let mut acc = 0.0f32;
                let mut n = 0f32;
                for dy in -(r as i64)..=r as i64 {
                    for dx in -(r as i64)..=r as i64 {
                        let yy = y as i64 + dy;
                        let xx = x as i64 + dx;
                        if yy < y0 as i64
                            || yy >= (y0 + s) as i64
                            || xx < x0 as i64
                            || xx >= (x0 + s) as i64
                        {
                            continue;
                        }
                        acc += src.data()[((yy as usize) * size + xx as usize) * 3 + c];
                        n += 1.0;
                    }
                }
                img.data_mut()[(y * size + x) * 3 + c] = acc / n;
            }
        }
    }
}

/// Paste a blurred rectangle from `donor` into `base` with a feathered
/// alpha ramp of `feather` pixels at the patch border.
fn splice(
    base: &Tensor<f32>,
    donor: &Tensor<f32>,
    rect: PatchRect,
    feather: usize,
    blur: usize,
) -> Tensor<f32> {
    let size = base.shape()[0];
    let mut patch_src = donor.clone();
    box_blur_rect(&mut patch_src, rect, blur);
    let mut out = base.clone();
    let (y0, x0, s) = (rect.y0, rect.x0, rect.side);
    for y in y0..y0 + s {
        for x in x0..x0 + s {
            // distance to the nearest patch edge, in pixels inside the patch
            let d = (y - y0).min(y0 + s - 1 - y).min(x - x0).min(x0 + s - 1 - x);
            // ramp spans `feather` pixels: 0.5 at the very edge, 1 inside
            let alpha = if feather == 0 {
                1.0
            } else {
                ((d + 1) as f32 / feather as f32).min(1.0)
            };
            for c in 0..3 {
                let i = (y * size + x) * 3 + c;
                out.data_mut()[i] =
                    alpha * patch_src.data()[i] + (1.0 - alpha) * base.data()[i];
            }
        }
    }
    out
}

/// Generate the full balanced set in memory, deterministically from the
/// seed. Sample `i` of each class uses an independent RNG stream, so the
/// set is stable under reordering of the generation loop.
pub fn generate_synthetic_samples(cfg: &SynthConfig) -> Result<Vec<SynthSample>> {
    cfg.validate()?;
    let root = Rng::new(cfg.seed);
    let n = cfg.count_per_class;
    // backgrounds: 2n fields, the second n serving as fake bases
    let backgrounds: Vec<Tensor<f32>> = (0..2 * n)
        .map(|i| {
            let mut r = root.fork(i as u64);
            synth_real(cfg.size, &mut r)
        })
        .collect();
    let mut out = Vec::with_capacity(2 * n);
    for i in 0..n {
        out.push(SynthSample { image: backgrounds[i].clone(), label: 1, patch: None });
    }
    for i in 0..n {
        let mut r = root.fork((2 * n + i) as u64);
        let base = &backgrounds[n + i];
        // donor is a different background
        let donor = &backgrounds[(n + i + 1) % (2 * n)];
        let lo = (cfg.patch_min * cfg.size as f64).round() as usize;
        let hi = (cfg.patch_max * cfg.size as f64).round() as usize;
        let side = (lo + r.next_below(hi - lo + 1)).max(2).min(cfg.size - 1);
        let y0 = r.next_below(cfg.size - side + 1);
        let x0 = r.next_below(cfg.size - side + 1);
        let rect = PatchRect { y0, x0, side };
        let image = splice(base, donor, rect, cfg.feather, cfg.blur_radius);
        out.push(SynthSample { image, label: 0, patch: Some(rect) });
    }
    Ok(out)
}

/// Write the synthetic set to `dir` as PPM files plus `manifest.jsonl` and
/// a `synth_config.json` echo. Splits are assigned per class by fraction,
/// keeping exact class balance inside each split.
pub fn generate_synthetic_dataset(cfg: &SynthConfig, dir: &Path) -> Result<Vec<ManifestEntry>> {
    let samples = generate_synthetic_samples(cfg)?;
    std::fs::create_dir_all(dir)?;
    let n = cfg.count_per_class;
    let n_train = (n as f64 * cfg.train_frac).round() as usize;
    let n_val = ((n as f64 * cfg.val_frac).round() as usize).min(n - n_train);
    let split_of = |idx_in_class: usize| {
        if idx_in_class < n_train {
            Split::Train
        } else if idx_in_class < n_train + n_val {
            Split::Val
        } else {
            Split::Test
        }
    };
    let mut entries = Vec::with_capacity(2 * n);
    for (i, s) in samples.iter().enumerate() {
        let (class, idx) = if s.label == 1 { ("real", i) } else { ("fake", i - n) };
        let name = format!("{class}_{idx:05}.ppm");
        write_ppm(&dir.join(&name), &s.image)?;
        entries.push(ManifestEntry { path: name, label: s.label, split: split_of(idx) });
    }
    write_manifest(&dir.join("manifest.jsonl"), &entries)?;
    let echo = serde_json::to_string_pretty(cfg).expect("config serializes");
    std::fs::write(dir.join("synth_config.json"), echo)?;
    Ok(entries)
}

/// Seeded index batches: a fresh shuffle per epoch (seed xor epoch), the
/// final partial batch kept.
pub fn batch_iter(n: usize, batch_size: usize, seed: u64, epoch: u64) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(Error::InvalidArgument("batch_size must be >= 1".into()));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = Rng::new(seed ^ epoch);
    rng.shuffle(&mut idx);
    Ok(idx.chunks(batch_size).map(|c| c.to_vec()).collect())
}

/// Stack per-sample `[h,w,3]` images into a batch tensor `[n,h,w,3]`.
pub fn stack_images(samples: &[&Sample]) -> Result<Tensor<f32>> {
    let first = samples
        .first()
        .ok_or_else(|| Error::InvalidArgument("cannot stack an empty batch".into()))?;
    let s = first.image.shape().to_vec();
    let per = first.image.numel();
    let mut out = Tensor::zeros(vec![samples.len(), s[0], s[1], s[2]]);
    for (i, smp) in samples.iter().enumerate() {
        if smp.image.shape() != s.as_slice() {
            return Err(Error::ShapeMismatch("mixed image shapes in batch".into()));
        }
        out.data_mut()[i * per..(i + 1) * per].copy_from_slice(smp.image.data());
    }
    Ok(out)
}

// keep the unused Read import honest: decode reads whole files via fs::read
#[allow(dead_code)]
fn _read_marker<R: std::io::Read>(_: R) {}
