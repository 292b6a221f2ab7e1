//! Synthetic face-like data, dataset storage, and alignment preprocessing.
//!
//! The generator draws procedural faces (skin ellipse, hair band, two eyes,
//! nose triangle, mouth) with exact segmentation masks and landmarks, so
//! every downstream task has dense ground truth without external datasets.
//! Components live in a face-local frame and the whole face is rotated and
//! jittered per sample, keeping samples spatially coherent the way aligned
//! face crops are.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::error::{PacoError, Result};
use crate::patch::ImageTensor;
use crate::rng::{stream_rng, Rng};
use rand::Rng as _;

pub const SEG_BACKGROUND: u8 = 0;
pub const SEG_SKIN: u8 = 1;
pub const SEG_LEFT_EYE: u8 = 2;
pub const SEG_RIGHT_EYE: u8 = 3;
pub const SEG_NOSE: u8 = 4;
pub const SEG_MOUTH: u8 = 5;
pub const SEG_HAIR: u8 = 6;
pub const NUM_SEG_CLASSES: usize = 7;

pub const LM_LEFT_EYE_OUTER: usize = 0;
pub const LM_LEFT_EYE_INNER: usize = 1;
pub const LM_RIGHT_EYE_INNER: usize = 2;
pub const LM_RIGHT_EYE_OUTER: usize = 3;
pub const LM_LEFT_EYE_CENTER: usize = 4;
pub const LM_RIGHT_EYE_CENTER: usize = 5;
pub const LM_NOSE_TIP: usize = 6;
pub const LM_MOUTH_LEFT: usize = 7;
pub const LM_MOUTH_RIGHT: usize = 8;
pub const LM_CHIN: usize = 9;
pub const NUM_LANDMARKS: usize = 10;

#[derive(Debug, Clone)]
pub struct SyntheticFaceSample {
    pub image: ImageTensor,
    /// [H, W] class ids.
    pub seg: Array2<u8>,
    /// [10, 2] (x, y) pixel coordinates.
    pub landmarks: Array2<f64>,
}

struct FaceGeometry {
    cx: f64,
    cy: f64,
    rx: f64,
    ry: f64,
    rot: f64,
}

impl FaceGeometry {
    /// Pixel (x, y) into the unrotated face frame centered on the face.
    fn to_face(&self, x: f64, y: f64) -> (f64, f64) {
        let (dx, dy) = (x - self.cx, y - self.cy);
        let (s, c) = self.rot.sin_cos();
        (c * dx + s * dy, -s * dx + c * dy)
    }

    /// Face-frame point back to pixel coordinates.
    fn to_image(&self, fx: f64, fy: f64) -> (f64, f64) {
        let (s, c) = self.rot.sin_cos();
        (self.cx + c * fx - s * fy, self.cy + s * fx + c * fy)
    }
}

fn inside_ellipse(fx: f64, fy: f64, cx: f64, cy: f64, rx: f64, ry: f64) -> bool {
    let nx = (fx - cx) / rx;
    let ny = (fy - cy) / ry;
    nx * nx + ny * ny <= 1.0
}

fn jitter3(rng: &mut Rng, base: [f64; 3], amount: f64) -> [f64; 3] {
    [
        (base[0] + rng.gen_range(-amount..amount)).clamp(0.0, 1.0),
        (base[1] + rng.gen_range(-amount..amount)).clamp(0.0, 1.0),
        (base[2] + rng.gen_range(-amount..amount)).clamp(0.0, 1.0),
    ]
}

/// One procedural face. Deterministic in the RNG.
pub fn synth_sample(size: usize, channels: usize, rng: &mut Rng) -> Result<SyntheticFaceSample> {
    if size < 16 {
        return Err(PacoError::arg(format!("image size {size} below minimum 16")));
    }
    if channels != 1 && channels != 3 {
        return Err(PacoError::arg("channels must be 1 or 3"));
    }
    let s = size as f64;
    let geo = FaceGeometry {
        cx: s * rng.gen_range(0.46..0.54),
        cy: s * rng.gen_range(0.48..0.56),
        rx: s * rng.gen_range(0.28..0.36),
        ry: s * rng.gen_range(0.34..0.42),
        rot: rng.gen_range(-0.15..0.15),
    };
    let skin = jitter3(rng, [0.80, 0.62, 0.50], 0.08);
    let hair = jitter3(rng, [0.20, 0.12, 0.08], 0.08);
    let eye = jitter3(rng, [0.10, 0.10, 0.14], 0.05);
    let mouth = jitter3(rng, [0.65, 0.25, 0.25], 0.08);
    let bg = rng.gen_range(0.78..0.88);

    // Component geometry in the face frame (origin at face center).
    let (rx, ry) = (geo.rx, geo.ry);
    let eye_dx = 0.42 * rx;
    let eye_dy = -0.30 * ry;
    let eye_rx = 0.18 * rx;
    let eye_ry = 0.12 * ry;
    let nose_apex = (0.0, -0.10 * ry);
    let nose_half = 0.10 * rx;
    let nose_base = 0.25 * ry;
    let mouth_cy = 0.55 * ry;
    let mouth_rx = 0.26 * rx;
    let mouth_ry = 0.10 * ry;
    let hair_top = -0.45 * ry;

    let mut image = Array3::<f64>::zeros((size, size, channels));
    let mut seg = Array2::<u8>::zeros((size, size));

    let put = |image: &mut Array3<f64>, y: usize, x: usize, color: [f64; 3], shade: f64| {
        if channels == 3 {
            for c in 0..3 {
                image[[y, x, c]] = (color[c] * shade).clamp(0.0, 1.0);
            }
        } else {
            let gray = (color[0] + color[1] + color[2]) / 3.0;
            image[[y, x, 0]] = (gray * shade).clamp(0.0, 1.0);
        }
    };

    for py in 0..size {
        for px in 0..size {
            let (fx, fy) = geo.to_face(px as f64 + 0.5, py as f64 + 0.5);
            // Background with a soft vertical gradient.
            let bg_shade = bg + 0.06 * (py as f64 / s);
            put(&mut image, py, px, [bg_shade, bg_shade, bg_shade], 1.0);

            let in_skin = inside_ellipse(fx, fy, 0.0, 0.0, rx, ry);
            let in_hair_shell = inside_ellipse(fx, fy, 0.0, 0.0, 1.04 * rx, 1.04 * ry);
            if in_skin {
                // Radial shading keeps the face from being flat.
                let r2 = (fx / rx) * (fx / rx) + (fy / ry) * (fy / ry);
                put(&mut image, py, px, skin, 1.0 - 0.15 * r2);
                seg[[py, px]] = SEG_SKIN;
            }
            if in_hair_shell && fy < hair_top {
                put(&mut image, py, px, hair, 1.0);
                seg[[py, px]] = SEG_HAIR;
            }
            if !in_skin {
                continue;
            }
            if inside_ellipse(fx, fy, -eye_dx, eye_dy, eye_rx, eye_ry) {
                put(&mut image, py, px, eye, 1.0);
                seg[[py, px]] = SEG_LEFT_EYE;
            } else if inside_ellipse(fx, fy, eye_dx, eye_dy, eye_rx, eye_ry) {
                put(&mut image, py, px, eye, 1.0);
                seg[[py, px]] = SEG_RIGHT_EYE;
            } else if fy >= nose_apex.1 && fy <= nose_base && {
                let t = (fy - nose_apex.1) / (nose_base - nose_apex.1);
                fx.abs() <= t * nose_half
            } {
                put(
                    &mut image,
                    py,
                    px,
                    [skin[0] * 0.82, skin[1] * 0.82, skin[2] * 0.82],
                    1.0,
                );
                seg[[py, px]] = SEG_NOSE;
            } else if inside_ellipse(fx, fy, 0.0, mouth_cy, mouth_rx, mouth_ry) {
                put(&mut image, py, px, mouth, 1.0);
                seg[[py, px]] = SEG_MOUTH;
            }
        }
    }

    let mut landmarks = Array2::<f64>::zeros((NUM_LANDMARKS, 2));
    let mut set = |idx: usize, fx: f64, fy: f64| {
        let (x, y) = geo.to_image(fx, fy);
        landmarks[[idx, 0]] = x;
        landmarks[[idx, 1]] = y;
    };
    set(LM_LEFT_EYE_OUTER, -eye_dx - eye_rx, eye_dy);
    set(LM_LEFT_EYE_INNER, -eye_dx + eye_rx, eye_dy);
    set(LM_RIGHT_EYE_INNER, eye_dx - eye_rx, eye_dy);
    set(LM_RIGHT_EYE_OUTER, eye_dx + eye_rx, eye_dy);
    set(LM_LEFT_EYE_CENTER, -eye_dx, eye_dy);
    set(LM_RIGHT_EYE_CENTER, eye_dx, eye_dy);
    set(LM_NOSE_TIP, 0.0, nose_base);
    set(LM_MOUTH_LEFT, -mouth_rx, mouth_cy);
    set(LM_MOUTH_RIGHT, mouth_rx, mouth_cy);
    set(LM_CHIN, 0.0, ry * 0.98);

    let sample = SyntheticFaceSample {
        image: ImageTensor::new(image)?,
        seg,
        landmarks,
    };
    validate_sample(&sample)?;
    Ok(sample)
}

/// Deterministic dataset: sample i uses RNG stream (seed, i).
pub fn generate_synthetic(
    count: usize,
    size: usize,
    channels: usize,
    seed: u64,
) -> Result<Vec<SyntheticFaceSample>> {
    if count == 0 {
        return Err(PacoError::arg("count must be positive"));
    }
    (0..count)
        .map(|i| {
            let mut rng = stream_rng(seed, i as u64);
            synth_sample(size, channels, &mut rng)
        })
        .collect()
}

/// Enforce the sample invariants: every class drawn, landmarks in bounds.
pub fn validate_sample(sample: &SyntheticFaceSample) -> Result<()> {
    let (h, w) = (sample.image.height(), sample.image.width());
    let mut present = [false; NUM_SEG_CLASSES];
    for &c in sample.seg.iter() {
        if c as usize >= NUM_SEG_CLASSES {
            return Err(PacoError::Dataset(format!("seg class {c} out of range")));
        }
        present[c as usize] = true;
    }
    for (cls, ok) in present.iter().enumerate().skip(1) {
        if !ok {
            return Err(PacoError::Dataset(format!("seg class {cls} absent")));
        }
    }
    if sample.landmarks.shape() != [NUM_LANDMARKS, 2] {
        return Err(PacoError::Dataset("landmark shape".into()));
    }
    for row in sample.landmarks.rows() {
        let (x, y) = (row[0], row[1]);
        if !(0.0..w as f64).contains(&x) || !(0.0..h as f64).contains(&y) {
            return Err(PacoError::Dataset(format!(
                "landmark ({x:.1}, {y:.1}) outside {w}x{h}"
            )));
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Storage: PNG images and masks, JSON landmark sidecars, JSONL manifest.
// ---------------------------------------------------------------------------

pub fn save_image_png(path: &Path, image: &ImageTensor) -> Result<()> {
    let (h, w, c) = (image.height(), image.width(), image.channels());
    let quant = |v: f64| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    if c == 3 {
        let mut buf = image::RgbImage::new(w as u32, h as u32);
        for y in 0..h {
            for x in 0..w {
                buf.put_pixel(
                    x as u32,
                    y as u32,
                    image::Rgb([
                        quant(image.data[[y, x, 0]]),
                        quant(image.data[[y, x, 1]]),
                        quant(image.data[[y, x, 2]]),
                    ]),
                );
            }
        }
        buf.save(path)?;
    } else {
        let mut buf = image::GrayImage::new(w as u32, h as u32);
        for y in 0..h {
            for x in 0..w {
                buf.put_pixel(x as u32, y as u32, image::Luma([quant(image.data[[y, x, 0]])]));
            }
        }
        buf.save(path)?;
    }
    Ok(())
}

pub fn load_image_png(path: &Path) -> Result<ImageTensor> {
    let img = image::open(path)?;
    match img {
        image::DynamicImage::ImageLuma8(gray) => {
            let (w, h) = gray.dimensions();
            let mut data = Array3::<f64>::zeros((h as usize, w as usize, 1));
            for (x, y, p) in gray.enumerate_pixels() {
                data[[y as usize, x as usize, 0]] = p.0[0] as f64 / 255.0;
            }
            ImageTensor::new(data)
        }
        other => {
            let rgb = other.to_rgb8();
            let (w, h) = rgb.dimensions();
            let mut data = Array3::<f64>::zeros((h as usize, w as usize, 3));
            for (x, y, p) in rgb.enumerate_pixels() {
                for c in 0..3 {
                    data[[y as usize, x as usize, c]] = p.0[c] as f64 / 255.0;
                }
            }
            ImageTensor::new(data)
        }
    }
}

pub fn save_seg_png(path: &Path, seg: &Array2<u8>) -> Result<()> {
    let (h, w) = (seg.shape()[0], seg.shape()[1]);
    let mut buf = image::GrayImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            buf.put_pixel(x as u32, y as u32, image::Luma([seg[[y, x]]]));
        }
    }
    buf.save(path)?;
    Ok(())
}

pub fn load_seg_png(path: &Path) -> Result<Array2<u8>> {
    let img = image::open(path)?.to_luma8();
    let (w, h) = img.dimensions();
    let mut seg = Array2::<u8>::zeros((h as usize, w as usize));
    for (x, y, p) in img.enumerate_pixels() {
        seg[[y as usize, x as usize]] = p.0[0];
    }
    Ok(seg)
}

#[derive(Serialize, Deserialize)]
struct LandmarkSidecar {
    landmarks: Vec<[f64; 2]>,
}

pub fn save_landmarks_json(path: &Path, landmarks: &Array2<f64>) -> Result<()> {
    let rows: Vec<[f64; 2]> = landmarks.rows().into_iter().map(|r| [r[0], r[1]]).collect();
    let json = serde_json::to_string(&LandmarkSidecar { landmarks: rows })?;
    fs::write(path, json)?;
    Ok(())
}

pub fn load_landmarks_json(path: &Path) -> Result<Array2<f64>> {
    let text = fs::read_to_string(path)?;
    let sidecar: LandmarkSidecar = serde_json::from_str(&text)?;
    let mut out = Array2::<f64>::zeros((sidecar.landmarks.len(), 2));
    for (i, p) in sidecar.landmarks.iter().enumerate() {
        out[[i, 0]] = p[0];
        out[[i, 1]] = p[1];
    }
    Ok(out)
}

/// One manifest line. Paths are relative to the manifest's directory.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ManifestRecord {
    pub image: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seg: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub landmarks: Option<String>,
    pub split: String,
}

#[derive(Debug, Clone)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub records: Vec<ManifestRecord>,
}

#[derive(Debug, Clone)]
pub struct LoadedSample {
    pub index: usize,
    pub image: ImageTensor,
    pub seg: Option<Array2<u8>>,
    pub landmarks: Option<Array2<f64>>,
}

impl DatasetManifest {
    /// Indices of the records in a split, in manifest order.
    pub fn split_indices(&self, split: &str) -> Vec<usize> {
        self.records
            .iter()
            .enumerate()
            .filter(|(_, r)| r.split == split)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn load_record(&self, index: usize) -> Result<LoadedSample> {
        let rec = self.records.get(index).ok_or_else(|| {
            PacoError::Dataset(format!("record {index} out of range"))
        })?;
        let fail = |what: &str, e: PacoError| {
            PacoError::Dataset(format!("record {index}: {what}: {e}"))
        };
        let image = load_image_png(&self.root.join(&rec.image))
            .map_err(|e| fail("image", e))?;
        let seg = match &rec.seg {
            Some(p) => Some(load_seg_png(&self.root.join(p)).map_err(|e| fail("seg", e))?),
            None => None,
        };
        let landmarks = match &rec.landmarks {
            Some(p) => {
                Some(load_landmarks_json(&self.root.join(p)).map_err(|e| fail("landmarks", e))?)
            }
            None => None,
        };
        Ok(LoadedSample { index, image, seg, landmarks })
    }

    /// Lazily load a split in manifest order.
    pub fn load_split<'a>(
        &'a self,
        split: &str,
    ) -> impl Iterator<Item = Result<LoadedSample>> + 'a {
        self.split_indices(split)
            .into_iter()
            .map(move |i| self.load_record(i))
    }
}

pub fn write_manifest(path: &Path, records: &[ManifestRecord]) -> Result<()> {
    let mut file = fs::File::create(path)?;
    for rec in records {
        let line = serde_json::to_string(rec)?;
        writeln!(file, "{line}")?;
    }
    Ok(())
}

pub fn read_manifest(path: &Path) -> Result<DatasetManifest> {
    let file = fs::File::open(path).map_err(|e| {
        PacoError::Dataset(format!("cannot open manifest {}: {e}", path.display()))
    })?;
    let mut records = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: ManifestRecord = serde_json::from_str(&line).map_err(|e| {
            PacoError::Dataset(format!("manifest line {}: {e}", lineno + 1))
        })?;
        records.push(rec);
    }
    let root = path
        .parent()
        .map(|p| p.to_path_buf())
        .unwrap_or_else(|| PathBuf::from("."));
    Ok(DatasetManifest { root, records })
}

/// Generate, store, and index a synthetic dataset. Every `test_every`-th
/// sample lands in the test split (0 disables the test split). Returns the
/// manifest path.
pub fn write_synthetic_dataset(
    dir: &Path,
    count: usize,
    size: usize,
    channels: usize,
    seed: u64,
    test_every: usize,
) -> Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let samples = generate_synthetic(count, size, channels, seed)?;
    let mut records = Vec::with_capacity(count);
    for (i, sample) in samples.iter().enumerate() {
        let image = format!("img_{i:05}.png");
        let seg = format!("seg_{i:05}.png");
        let lmk = format!("lmk_{i:05}.json");
        save_image_png(&dir.join(&image), &sample.image)?;
        save_seg_png(&dir.join(&seg), &sample.seg)?;
        save_landmarks_json(&dir.join(&lmk), &sample.landmarks)?;
        let split = if test_every > 0 && (i + 1) % test_every == 0 {
            "test"
        } else {
            "train"
        };
        records.push(ManifestRecord {
            image,
            seg: Some(seg),
            landmarks: Some(lmk),
            split: split.to_string(),
        });
    }
    let manifest = dir.join("manifest.jsonl");
    write_manifest(&manifest, &records)?;
    Ok(manifest)
}

// ---------------------------------------------------------------------------
// Alignment: similarity fit, warp, crop, pad, resize.
// ---------------------------------------------------------------------------

/// Canonical 5-point layout in the crop frame, plus crop/pad geometry.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AlignTemplate {
    /// Two eye centers, nose tip, two mouth corners, in crop coordinates.
    pub points: Vec<[f64; 2]>,
    pub crop: usize,
    pub pad_to: usize,
    pub background: f64,
}

impl Default for AlignTemplate {
    fn default() -> Self {
        // The widely used 112x112 five-point arrangement scaled to 200x200.
        AlignTemplate {
            points: vec![
                [68.38, 92.32],
                [131.31, 91.97],
                [100.04, 128.10],
                [74.20, 164.94],
                [126.30, 164.65],
            ],
            crop: 200,
            pad_to: 256,
            background: 0.5,
        }
    }
}

/// 2D similarity x' = a·x − b·y + tx, y' = b·x + a·y + ty.
#[derive(Debug, Clone, Copy)]
pub struct Similarity {
    pub a: f64,
    pub b: f64,
    pub tx: f64,
    pub ty: f64,
}

impl Similarity {
    pub fn apply(&self, p: [f64; 2]) -> [f64; 2] {
        [
            self.a * p[0] - self.b * p[1] + self.tx,
            self.b * p[0] + self.a * p[1] + self.ty,
        ]
    }

    pub fn inverse(&self) -> Result<Similarity> {
        let det = self.a * self.a + self.b * self.b;
        if det < 1e-12 {
            return Err(PacoError::arg("similarity is not invertible"));
        }
        let ia = self.a / det;
        let ib = -self.b / det;
        Ok(Similarity {
            a: ia,
            b: ib,
            tx: -(ia * self.tx - ib * self.ty),
            ty: -(ib * self.tx + ia * self.ty),
        })
    }
}

fn solve4(mut m: [[f64; 5]; 4]) -> Result<[f64; 4]> {
    for col in 0..4 {
        let mut pivot = col;
        for r in col + 1..4 {
            if m[r][col].abs() > m[pivot][col].abs() {
                pivot = r;
            }
        }
        if m[pivot][col].abs() < 1e-9 {
            return Err(PacoError::arg("degenerate landmark configuration"));
        }
        m.swap(col, pivot);
        let p = m[col][col];
        for c in col..5 {
            m[col][c] /= p;
        }
        for r in 0..4 {
            if r != col {
                let f = m[r][col];
                for c in col..5 {
                    m[r][c] -= f * m[col][c];
                }
            }
        }
    }
    Ok([m[0][4], m[1][4], m[2][4], m[3][4]])
}

/// Least-squares similarity mapping `src` points onto `dst`.
/// Rejects degenerate (near-coincident or collinear) source sets.
pub fn estimate_similarity(src: &[[f64; 2]], dst: &[[f64; 2]]) -> Result<Similarity> {
    if src.len() != dst.len() || src.len() < 2 {
        return Err(PacoError::arg("need at least 2 matched points"));
    }
    // Collinearity screen via the covariance eigenvalue ratio.
    let n = src.len() as f64;
    let mx = src.iter().map(|p| p[0]).sum::<f64>() / n;
    let my = src.iter().map(|p| p[1]).sum::<f64>() / n;
    let (mut sxx, mut sxy, mut syy) = (0.0, 0.0, 0.0);
    for p in src {
        let (dx, dy) = (p[0] - mx, p[1] - my);
        sxx += dx * dx;
        sxy += dx * dy;
        syy += dy * dy;
    }
    let tr = sxx + syy;
    let det = sxx * syy - sxy * sxy;
    let disc = (tr * tr / 4.0 - det).max(0.0).sqrt();
    let l1 = tr / 2.0 + disc;
    let l2 = tr / 2.0 - disc;
    if l1 < 1e-9 || l2 / l1 < 1e-6 {
        return Err(PacoError::arg(
            "degenerate landmark configuration (collinear or coincident)",
        ));
    }
    // Normal equations for (a, b, tx, ty) over rows
    //   [x, -y, 1, 0] -> x'
    //   [y,  x, 0, 1] -> y'
    let mut ata = [[0.0f64; 5]; 4];
    let add_row = |row: [f64; 4], rhs: f64, ata: &mut [[f64; 5]; 4]| {
        for i in 0..4 {
            for j in 0..4 {
                ata[i][j] += row[i] * row[j];
            }
            ata[i][4] += row[i] * rhs;
        }
    };
    for (s, d) in src.iter().zip(dst.iter()) {
        add_row([s[0], -s[1], 1.0, 0.0], d[0], &mut ata);
        add_row([s[1], s[0], 0.0, 1.0], d[1], &mut ata);
    }
    let [a, b, tx, ty] = solve4(ata)?;
    Ok(Similarity { a, b, tx, ty })
}

/// Bilinear sample with a constant background outside the frame.
/// Coordinates follow the pixel-center convention (pixel i spans
/// [i, i+1), center at i + 0.5).
pub fn bilinear_sample(image: &ImageTensor, x: f64, y: f64, background: f64, c: usize) -> f64 {
    let (h, w) = (image.height() as f64, image.width() as f64);
    let fx = x - 0.5;
    let fy = y - 0.5;
    let x0 = fx.floor();
    let y0 = fy.floor();
    let wx = fx - x0;
    let wy = fy - y0;
    let mut acc = 0.0;
    for (dy, wyv) in [(0.0, 1.0 - wy), (1.0, wy)] {
        for (dx, wxv) in [(0.0, 1.0 - wx), (1.0, wx)] {
            let sx = x0 + dx;
            let sy = y0 + dy;
            let v = if sx < 0.0 || sy < 0.0 || sx >= w || sy >= h {
                background
            } else {
                image.data[[sy as usize, sx as usize, c]]
            };
            acc += wxv * wyv * v;
        }
    }
    acc
}

/// Bilinear resize to the requested dimensions.
pub fn resize_bilinear(image: &ImageTensor, oh: usize, ow: usize) -> Result<ImageTensor> {
    let (h, w, c) = (image.height(), image.width(), image.channels());
    if oh == h && ow == w {
        return Ok(image.clone());
    }
    let sy = h as f64 / oh as f64;
    let sx = w as f64 / ow as f64;
    let mut out = Array3::<f64>::zeros((oh, ow, c));
    for y in 0..oh {
        for x in 0..ow {
            let srcx = (x as f64 + 0.5) * sx;
            let srcy = (y as f64 + 0.5) * sy;
            for ch in 0..c {
                // Clamp into the frame so edges replicate rather than fade.
                let cx = srcx.clamp(0.5, w as f64 - 0.5);
                let cy = srcy.clamp(0.5, h as f64 - 0.5);
                out[[y, x, ch]] = bilinear_sample(image, cx, cy, 0.0, ch);
            }
        }
    }
    ImageTensor::new(out)
}

/// The eval-standard 5 points (eye centers, nose tip, mouth corners) from a
/// full 10-landmark row set.
pub fn five_points(landmarks: &Array2<f64>) -> Result<[[f64; 2]; 5]> {
    if landmarks.shape()[0] < 9 {
        return Err(PacoError::arg("need the 10-landmark convention"));
    }
    let p = |i: usize| [landmarks[[i, 0]], landmarks[[i, 1]]];
    Ok([
        p(LM_LEFT_EYE_CENTER),
        p(LM_RIGHT_EYE_CENTER),
        p(LM_NOSE_TIP),
        p(LM_MOUTH_LEFT),
        p(LM_MOUTH_RIGHT),
    ])
}

/// Warp the face onto the template frame, pad to the square canvas, and
/// resize to the model input size.
pub fn align_crop_pad(
    image: &ImageTensor,
    landmarks5: &[[f64; 2]; 5],
    template: &AlignTemplate,
    out_size: usize,
) -> Result<ImageTensor> {
    if template.points.len() != 5 {
        return Err(PacoError::arg("template must have 5 points"));
    }
    let sim = estimate_similarity(landmarks5, &template.points)?;
    let inv = sim.inverse()?;
    let c = image.channels();
    let crop = template.crop;
    let pad = template.pad_to;
    if pad < crop {
        return Err(PacoError::arg("pad_to smaller than crop"));
    }
    let offset = (pad - crop) / 2;
    let mut canvas = Array3::<f64>::from_elem((pad, pad, c), template.background);
    for y in 0..crop {
        for x in 0..crop {
            let src = inv.apply([x as f64 + 0.5, y as f64 + 0.5]);
            for ch in 0..c {
                canvas[[y + offset, x + offset, ch]] =
                    bilinear_sample(image, src[0], src[1], template.background, ch);
            }
        }
    }
    resize_bilinear(&ImageTensor::new(canvas)?, out_size, out_size)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seed_rng;

    #[test]
    fn generation_is_deterministic() {
        let a = generate_synthetic(4, 64, 3, 42).unwrap();
        let b = generate_synthetic(4, 64, 3, 42).unwrap();
        for (x, y) in a.iter().zip(b.iter()) {
            assert_eq!(x.image.data, y.image.data);
            assert_eq!(x.seg, y.seg);
            assert_eq!(x.landmarks, y.landmarks);
        }
        let c = generate_synthetic(4, 64, 3, 43).unwrap();
        assert_ne!(a[0].image.data, c[0].image.data);
    }

    #[test]
    fn invariants_hold_over_many_samples() {
        let samples = generate_synthetic(1000, 64, 3, 7).unwrap();
        for s in &samples {
            validate_sample(s).unwrap();
        }
    }

    #[test]
    fn eye_centers_sit_in_the_upper_half() {
        let samples = generate_synthetic(1000, 64, 3, 11).unwrap();
        let mut escapes = 0;
        let mut mean_y = 0.0;
        for s in &samples {
            let y = (s.landmarks[[LM_LEFT_EYE_CENTER, 1]]
                + s.landmarks[[LM_RIGHT_EYE_CENTER, 1]])
                / 2.0;
            mean_y += y;
            if y >= 32.0 {
                escapes += 1;
            }
        }
        mean_y /= 1000.0;
        assert!(mean_y < 32.0, "mean eye height {mean_y}");
        assert!(escapes <= 50, "{escapes} samples escaped the upper half");
    }

    #[test]
    fn landmarks_lie_in_their_regions() {
        // Eye centers and mouth corners must sit inside (or within 2 px of)
        // their segmentation classes.
        let near = |seg: &Array2<u8>, x: f64, y: f64, cls: u8| -> bool {
            let (h, w) = (seg.shape()[0] as isize, seg.shape()[1] as isize);
            for dy in -2..=2isize {
                for dx in -2..=2isize {
                    let px = x as isize + dx;
                    let py = y as isize + dy;
                    if px >= 0 && py >= 0 && px < w && py < h && seg[[py as usize, px as usize]] == cls
                    {
                        return true;
                    }
                }
            }
            false
        };
        for s in generate_synthetic(50, 64, 3, 3).unwrap() {
            assert!(near(
                &s.seg,
                s.landmarks[[LM_LEFT_EYE_CENTER, 0]],
                s.landmarks[[LM_LEFT_EYE_CENTER, 1]],
                SEG_LEFT_EYE
            ));
            assert!(near(
                &s.seg,
                s.landmarks[[LM_RIGHT_EYE_CENTER, 0]],
                s.landmarks[[LM_RIGHT_EYE_CENTER, 1]],
                SEG_RIGHT_EYE
            ));
            assert!(near(
                &s.seg,
                s.landmarks[[LM_MOUTH_LEFT, 0]],
                s.landmarks[[LM_MOUTH_LEFT, 1]],
                SEG_MOUTH
            ));
            assert!(near(
                &s.seg,
                s.landmarks[[LM_NOSE_TIP, 0]],
                s.landmarks[[LM_NOSE_TIP, 1]],
                SEG_NOSE
            ));
        }
    }

    #[test]
    fn dataset_roundtrip_through_disk() {
        let dir = std::env::temp_dir().join("paco_data_roundtrip");
        fs::remove_dir_all(&dir).ok();
        let manifest_path = write_synthetic_dataset(&dir, 64, 64, 3, 5, 5).unwrap();
        let manifest = read_manifest(&manifest_path).unwrap();
        assert_eq!(manifest.records.len(), 64);
        let train = manifest.split_indices("train");
        let test = manifest.split_indices("test");
        assert_eq!(train.len() + test.len(), 64);
        assert_eq!(test.len(), 12); // every 5th of 64
        // Disjoint splits.
        for t in &test {
            assert!(!train.contains(t));
        }
        let mut count = 0;
        for item in manifest.load_split("train") {
            let s = item.unwrap();
            assert_eq!(s.image.height(), 64);
            assert!(s.seg.is_some());
            assert_eq!(s.landmarks.as_ref().unwrap().shape(), [10, 2]);
            count += 1;
        }
        assert_eq!(count, train.len());
        // Empty split iterates empty without error.
        assert_eq!(manifest.load_split("nope").count(), 0);
        fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn png_roundtrip_is_quantization_exact() {
        let dir = std::env::temp_dir().join("paco_png_roundtrip");
        fs::create_dir_all(&dir).unwrap();
        let sample = &generate_synthetic(1, 32, 3, 1).unwrap()[0];
        let path = dir.join("img.png");
        save_image_png(&path, &sample.image).unwrap();
        let loaded = load_image_png(&path).unwrap();
        for (a, b) in sample.image.data.iter().zip(loaded.data.iter()) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-9);
        }
        let seg_path = dir.join("seg.png");
        save_seg_png(&seg_path, &sample.seg).unwrap();
        assert_eq!(load_seg_png(&seg_path).unwrap(), sample.seg);
        let lmk_path = dir.join("lmk.json");
        save_landmarks_json(&lmk_path, &sample.landmarks).unwrap();
        assert_eq!(load_landmarks_json(&lmk_path).unwrap(), sample.landmarks);
        fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn manifest_roundtrip_lossless() {
        let dir = std::env::temp_dir().join("paco_manifest_roundtrip");
        fs::create_dir_all(&dir).unwrap();
        let records = vec![
            ManifestRecord {
                image: "a.png".into(),
                seg: Some("a_seg.png".into()),
                landmarks: None,
                split: "train".into(),
            },
            ManifestRecord {
                image: "b.png".into(),
                seg: None,
                landmarks: Some("b.json".into()),
                split: "test".into(),
            },
        ];
        let path = dir.join("m.jsonl");
        write_manifest(&path, &records).unwrap();
        let manifest = read_manifest(&path).unwrap();
        assert_eq!(manifest.records, records);
        fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn similarity_recovers_known_transform() {
        // Apply a known similarity to the template, then fit back.
        let template = AlignTemplate::default();
        let truth = Similarity { a: 0.8, b: 0.3, tx: 12.0, ty: -4.0 };
        let moved: Vec<[f64; 2]> = template.points.iter().map(|&p| truth.apply(p)).collect();
        let fit = estimate_similarity(&moved, &template.points).unwrap();
        let inv = truth.inverse().unwrap();
        assert!((fit.a - inv.a).abs() < 1e-9);
        assert!((fit.b - inv.b).abs() < 1e-9);
        assert!((fit.tx - inv.tx).abs() < 1e-7);
        assert!((fit.ty - inv.ty).abs() < 1e-7);
    }

    #[test]
    fn collinear_landmarks_rejected() {
        let src = [[0.0, 0.0], [1.0, 1.0], [2.0, 2.0], [3.0, 3.0], [4.0, 4.0]];
        let dst = AlignTemplate::default();
        let dstp: Vec<[f64; 2]> = dst.points.clone();
        let dst5: [[f64; 2]; 5] = [dstp[0], dstp[1], dstp[2], dstp[3], dstp[4]];
        assert!(estimate_similarity(&src, &dst5).is_err());
        // Coincident points too.
        let same = [[5.0, 5.0]; 5];
        assert!(estimate_similarity(&same, &dst5).is_err());
    }

    #[test]
    fn template_landmarks_produce_identity_alignment() {
        let template = AlignTemplate::default();
        let mut rng = seed_rng(21);
        let img = ImageTensor::new(Array3::from_shape_fn((200, 200, 3), |_| {
            rng.gen_range(0.0..1.0)
        }))
        .unwrap();
        let pts: [[f64; 2]; 5] = [
            template.points[0],
            template.points[1],
            template.points[2],
            template.points[3],
            template.points[4],
        ];
        let out = align_crop_pad(&img, &pts, &template, 256).unwrap();
        assert_eq!(out.data.shape(), [256, 256, 3]);
        // Interior equals the source exactly; border band is background.
        for y in 0..200 {
            for x in 0..200 {
                for c in 0..3 {
                    let got = out.data[[y + 28, x + 28, c]];
                    let want = img.data[[y, x, c]];
                    assert!((got - want).abs() < 1e-9, "pixel ({x},{y},{c})");
                }
            }
        }
        assert_eq!(out.data[[0, 0, 0]], 0.5);
        assert_eq!(out.data[[255, 255, 2]], 0.5);
    }

    #[test]
    fn rotation_equivariance_within_interpolation_noise() {
        // Align a face, then align a 30-degree pre-rotated copy (image and
        // landmarks rotated together); outputs must agree closely.
        let sample = &generate_synthetic(1, 200, 3, 77).unwrap()[0];
        let template = AlignTemplate::default();
        let p5 = five_points(&sample.landmarks).unwrap();
        let base = align_crop_pad(&sample.image, &p5, &template, 224).unwrap();

        let theta: f64 = 30.0_f64.to_radians();
        let (s, c) = theta.sin_cos();
        let (cx, cy) = (100.0, 100.0);
        let rot_point = |p: [f64; 2]| -> [f64; 2] {
            let (dx, dy) = (p[0] - cx, p[1] - cy);
            [cx + c * dx - s * dy, cy + s * dx + c * dy]
        };
        // Inverse-rotate to sample the source image.
        let mut rotated = Array3::<f64>::zeros((200, 200, 3));
        for y in 0..200 {
            for x in 0..200 {
                let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
                let sxp = cx + c * dx + s * dy;
                let syp = cy - s * dx + c * dy;
                for ch in 0..3 {
                    rotated[[y, x, ch]] =
                        bilinear_sample(&sample.image, sxp, syp, 0.5, ch);
                }
            }
        }
        let rot_img = ImageTensor::new(rotated).unwrap();
        let rot5: [[f64; 2]; 5] = [
            rot_point(p5[0]),
            rot_point(p5[1]),
            rot_point(p5[2]),
            rot_point(p5[3]),
            rot_point(p5[4]),
        ];
        let out = align_crop_pad(&rot_img, &rot5, &template, 224).unwrap();
        let mut mean_abs = 0.0;
        for (a, b) in out.data.iter().zip(base.data.iter()) {
            mean_abs += (a - b).abs();
        }
        mean_abs /= out.data.len() as f64;
        assert!(mean_abs < 0.02, "mean abs diff {mean_abs}");
    }

    #[test]
    fn resize_preserves_constant_images() {
        let img = ImageTensor::new(Array3::from_elem((64, 64, 3), 0.37)).unwrap();
        let small = resize_bilinear(&img, 224, 224).unwrap();
        assert!(small.data.iter().all(|&v| (v - 0.37).abs() < 1e-12));
    }
}
