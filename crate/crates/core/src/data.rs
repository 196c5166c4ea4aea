//! Synthetic shape scenes, binary PPM images, JSON-lines annotations and
//! detection overlays.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inference::Detection;
use crate::matching::{BBox, GroundTruthBox};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Shape {
    Rectangle,
    Ellipse,
    Triangle,
}

/// Shape and fill color of class `k`.
pub fn class_style(k: usize) -> (Shape, [f64; 3]) {
    const SHAPES: [Shape; 3] = [Shape::Rectangle, Shape::Ellipse, Shape::Triangle];
    const FILLS: [[f64; 3]; 6] = [
        [0.90, 0.20, 0.20],
        [0.20, 0.85, 0.25],
        [0.25, 0.35, 0.95],
        [0.90, 0.85, 0.15],
        [0.85, 0.25, 0.85],
        [0.15, 0.85, 0.85],
    ];
    (SHAPES[k % 3], FILLS[k % 6])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneSpec {
    pub image_h: usize,
    pub image_w: usize,
    pub num_classes: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    /// `sqrt(hw)` is log-uniform on `[min_sqrt_hw, max_sqrt_hw]`.
    pub min_sqrt_hw: f64,
    pub max_sqrt_hw: f64,
    /// `ln(w / h)` is uniform on `[-max_log_aspect, max_log_aspect]`.
    pub max_log_aspect: f64,
    /// Objects overlapping an earlier one above this IoU are re-placed.
    pub max_overlap_iou: f64,
    /// Amplitude of the uniform per-pixel noise.
    pub noise: f64,
    /// Fraction of images written to the validation split.
    pub val_fraction: f64,
    /// Leading training images also listed as the search subset.
    pub search_subset: usize,
    pub seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            image_h: 256,
            image_w: 256,
            num_classes: 3,
            min_objects: 1,
            max_objects: 4,
            min_sqrt_hw: 20.0,
            max_sqrt_hw: 160.0,
            max_log_aspect: std::f64::consts::LN_2,
            max_overlap_iou: 0.3,
            noise: 0.08,
            val_fraction: 0.2,
            search_subset: 200,
            seed: 0,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.image_h == 0 || self.image_w == 0 {
            return bad("image size must be positive");
        }
        if self.num_classes == 0 || self.num_classes > 6 {
            return bad("num_classes must be in 1..=6");
        }
        if self.min_objects == 0 || self.min_objects > self.max_objects {
            return bad("need 1 <= min_objects <= max_objects");
        }
        if !(self.min_sqrt_hw > 0.0 && self.min_sqrt_hw <= self.max_sqrt_hw) {
            return bad("need 0 < min_sqrt_hw <= max_sqrt_hw");
        }
        if !(self.max_log_aspect >= 0.0) {
            return bad("max_log_aspect must be >= 0");
        }
        let widest = self.max_sqrt_hw * (0.5 * self.max_log_aspect).exp();
        if widest > self.image_h.min(self.image_w) as f64 {
            return bad("largest box does not fit in the image");
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return bad("val_fraction must be in [0, 1)");
        }
        if !(0.0..=1.0).contains(&self.noise) || !(0.0..=1.0).contains(&self.max_overlap_iou) {
            return bad("noise and max_overlap_iou must be in [0, 1]");
        }
        Ok(())
    }

    fn image_rng(&self, index: usize) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.seed ^ index as u64)
    }
}

const PLACE_TRIES: usize = 100;

/// Ground truths of image `index`. An object whose size cannot be placed
/// without excess overlap ends the scene early.
pub fn sample_layout(spec: &SceneSpec, index: usize) -> Vec<GroundTruthBox> {
    sample_layout_with(spec, &mut spec.image_rng(index))
}

fn sample_layout_with(spec: &SceneSpec, rng: &mut ChaCha8Rng) -> Vec<GroundTruthBox> {
    let n = rng.gen_range(spec.min_objects..=spec.max_objects);
    let (lo, hi) = (spec.min_sqrt_hw.ln(), spec.max_sqrt_hw.ln());
    let (iw, ih) = (spec.image_w as f64, spec.image_h as f64);
    let mut boxes: Vec<GroundTruthBox> = Vec::with_capacity(n);
    for _ in 0..n {
        let s = if hi > lo { rng.gen_range(lo..hi).exp() } else { spec.min_sqrt_hw };
        let r = if spec.max_log_aspect > 0.0 {
            rng.gen_range(-spec.max_log_aspect..spec.max_log_aspect)
        } else {
            0.0
        };
        let w = s * (0.5 * r).exp();
        let h = s * (-0.5 * r).exp();
        let class_id = rng.gen_range(0..spec.num_classes);
        let mut placed = None;
        for _ in 0..PLACE_TRIES {
            let cx = rng.gen_range(0.5 * w..=iw - 0.5 * w);
            let cy = rng.gen_range(0.5 * h..=ih - 0.5 * h);
            let b = GroundTruthBox { cx, cy, w, h, class_id };
            if boxes.iter().all(|o| o.bbox().iou(&b.bbox()) <= spec.max_overlap_iou) {
                placed = Some(b);
                break;
            }
        }
        match placed {
            Some(b) => boxes.push(b),
            None => break,
        }
    }
    boxes
}

fn inside(shape: Shape, b: &BBox, x: f64, y: f64) -> bool {
    let [x0, y0, x1, y1] = b.corners();
    if x < x0 || x >= x1 || y < y0 || y >= y1 {
        return false;
    }
    match shape {
        Shape::Rectangle => true,
        Shape::Ellipse => {
            let u = (x - b.cx) / (0.5 * b.w);
            let v = (y - b.cy) / (0.5 * b.h);
            u * u + v * v <= 1.0
        }
        // apex at the top center, base along the bottom edge
        Shape::Triangle => {
            let t = (y - y0) / b.h;
            (x - b.cx).abs() <= 0.5 * b.w * t
        }
    }
}

/// Renders a scene (`[3, H, W]`, values in `[0, 1]`). Later objects paint over
/// earlier ones.
pub fn render_scene(spec: &SceneSpec, boxes: &[GroundTruthBox], rng: &mut ChaCha8Rng) -> Tensor {
    let (h, w) = (spec.image_h, spec.image_w);
    let plane = h * w;
    let mut data = vec![0.0; 3 * plane];
    for v in data.iter_mut() {
        *v = 0.45 + rng.gen_range(-spec.noise..=spec.noise);
    }
    for gt in boxes {
        let (shape, fill) = class_style(gt.class_id);
        let b = gt.bbox();
        let [x0, y0, x1, y1] = b.corners();
        let (ys, ye) = (y0.floor().max(0.0) as usize, (y1.ceil() as usize).min(h));
        let (xs, xe) = (x0.floor().max(0.0) as usize, (x1.ceil() as usize).min(w));
        for y in ys..ye {
            for x in xs..xe {
                if inside(shape, &b, x as f64 + 0.5, y as f64 + 0.5) {
                    for (c, f) in fill.iter().enumerate() {
                        data[c * plane + y * w + x] = f + rng.gen_range(-spec.noise..=spec.noise);
                    }
                }
            }
        }
    }
    data.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    Tensor::new(vec![3, h, w], data).expect("3 * H * W values")
}

/// Image and ground truths of scene `index`.
pub fn sample_scene(spec: &SceneSpec, index: usize) -> (Tensor, Vec<GroundTruthBox>) {
    let mut rng = spec.image_rng(index);
    let boxes = sample_layout_with(spec, &mut rng);
    let image = render_scene(spec, &boxes, &mut rng);
    (image, boxes)
}

/// Writes a `[3, H, W]` tensor as binary PPM, rounding to 8 bits.
pub fn write_ppm(path: &Path, image: &Tensor) -> Result<()> {
    let [3, h, w] = image.shape() else {
        return Err(Error::shape("write_ppm", format!("image must be [3, H, W], got {:?}", image.shape())));
    };
    let (h, w) = (*h, *w);
    let plane = h * w;
    let mut bytes = format!("P6\n{w} {h}\n255\n").into_bytes();
    let d = image.data();
    for p in 0..plane {
        for c in 0..3 {
            bytes.push((d[c * plane + p].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Reads a binary PPM with maxval 255 into `[3, H, W]` values in `[0, 1]`.
pub fn read_ppm(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let fail = |msg: &str| Error::Format {
        path: path.to_path_buf(),
        msg: msg.to_string(),
    };
    let mut pos = 0;
    let mut fields = Vec::with_capacity(4);
    while fields.len() < 4 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(fail("truncated PPM header"));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    pos += 1; // single whitespace byte before the raster
    if fields[0] != "P6" {
        return Err(fail("not a binary PPM (P6)"));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| fail("bad number in PPM header"));
    let (w, h, maxval) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
    if maxval != 255 {
        return Err(fail("only 8-bit PPM is supported"));
    }
    let plane = w * h;
    if w == 0 || h == 0 || bytes.len() < pos + 3 * plane {
        return Err(fail("PPM raster is truncated"));
    }
    let raster = &bytes[pos..pos + 3 * plane];
    let mut data = vec![0.0; 3 * plane];
    for p in 0..plane {
        for c in 0..3 {
            data[c * plane + p] = raster[3 * p + c] as f64 / 255.0;
        }
    }
    Tensor::new(vec![3, h, w], data)
}

/// One line of an annotation file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Annotation {
    /// Image path relative to the annotation file.
    pub image: String,
    pub boxes: Vec<GroundTruthBox>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Splits {
    pub train: String,
    pub val: String,
    pub search_subset: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub spec: SceneSpec,
    pub num_images: usize,
    pub splits: Splits,
}

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    SearchSubset,
}

impl Split {
    fn file<'a>(&self, s: &'a Splits) -> &'a str {
        match self {
            Split::Train => &s.train,
            Split::Val => &s.val,
            Split::SearchSubset => &s.search_subset,
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "search" | "search_subset" | "search-subset" => Ok(Split::SearchSubset),
            _ => Err(Error::invalid(format!("unknown split '{s}' (train, val, search_subset)"))),
        }
    }
}

fn write_jsonl(path: &Path, records: &[Annotation]) -> Result<()> {
    let mut out = Vec::new();
    for r in records {
        serde_json::to_writer(&mut out, r).expect("annotation serializes");
        out.push(b'\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Writes `n_images` scenes under `out_dir`: `images/NNNNN.ppm`, one JSONL
/// file per split and `manifest.json`.
pub fn generate_dataset(spec: &SceneSpec, n_images: usize, out_dir: &Path) -> Result<Manifest> {
    if n_images == 0 {
        return Err(Error::invalid("empty dataset requested"));
    }
    spec.validate()?;
    let img_dir = out_dir.join("images");
    fs::create_dir_all(&img_dir).map_err(|e| Error::io(&img_dir, e))?;
    let n_val = ((n_images as f64) * spec.val_fraction).round() as usize;
    let n_train = n_images - n_val;
    let mut records = Vec::with_capacity(n_images);
    for i in 0..n_images {
        let (image, boxes) = sample_scene(spec, i);
        let rel = format!("images/{i:05}.ppm");
        write_ppm(&out_dir.join(&rel), &image)?;
        records.push(Annotation { image: rel, boxes });
    }
    let splits = Splits {
        train: "train.jsonl".into(),
        val: "val.jsonl".into(),
        search_subset: "search_subset.jsonl".into(),
    };
    write_jsonl(&out_dir.join(&splits.train), &records[..n_train])?;
    write_jsonl(&out_dir.join(&splits.val), &records[n_train..])?;
    write_jsonl(&out_dir.join(&splits.search_subset), &records[..spec.search_subset.min(n_train)])?;
    let manifest = Manifest {
        spec: spec.clone(),
        num_images: n_images,
        splits,
    };
    let path = out_dir.join(MANIFEST_FILE);
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, json + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = if dir.is_dir() { dir.join(MANIFEST_FILE) } else { dir.to_path_buf() };
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Format { path, msg: e.to_string() })
}

/// Parses an annotation file; errors name the offending line.
pub fn read_annotations(path: &Path) -> Result<Vec<Annotation>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: Annotation = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg: e.to_string(),
        })?;
        out.push(rec);
    }
    Ok(out)
}

/// A loaded image with its ground truths.
#[derive(Debug, Clone)]
pub struct Sample {
    pub path: PathBuf,
    pub image: Tensor,
    pub boxes: Vec<GroundTruthBox>,
}

const BOUNDS_EPS: f64 = 1e-9;

/// Loads every image of an annotation file and checks each box against the
/// image bounds and, when given, the class count.
pub fn load_annotation_file(path: &Path, num_classes: Option<usize>) -> Result<Vec<Sample>> {
    let base = path.parent().unwrap_or(Path::new("."));
    let mut out = Vec::new();
    for (i, rec) in read_annotations(path)?.into_iter().enumerate() {
        let img_path = base.join(&rec.image);
        let image = read_ppm(&img_path)?;
        let (h, w) = (image.shape()[1] as f64, image.shape()[2] as f64);
        for b in &rec.boxes {
            let [x0, y0, x1, y1] = b.bbox().corners();
            let ok = b.w > 0.0
                && b.h > 0.0
                && x0 >= -BOUNDS_EPS
                && y0 >= -BOUNDS_EPS
                && x1 <= w + BOUNDS_EPS
                && y1 <= h + BOUNDS_EPS;
            if !ok {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    line: i + 1,
                    msg: format!("box {:?} is outside image {} ({w}x{h})", b, img_path.display()),
                });
            }
            if num_classes.is_some_and(|n| b.class_id >= n) {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    line: i + 1,
                    msg: format!("class {} out of range", b.class_id),
                });
            }
        }
        out.push(Sample {
            path: img_path,
            image,
            boxes: rec.boxes,
        });
    }
    Ok(out)
}

/// Loads one split of a generated dataset.
pub fn load_dataset(dir: &Path, split: Split) -> Result<Vec<Sample>> {
    let m = read_manifest(dir)?;
    let root = if dir.is_dir() { dir } else { dir.parent().unwrap_or(Path::new(".")) };
    load_annotation_file(&root.join(split.file(&m.splits)), Some(m.spec.num_classes))
}

/// Outline colors, one per class.
pub fn class_color(k: usize) -> [u8; 3] {
    const COLORS: [[u8; 3]; 6] = [
        [255, 40, 40],
        [40, 230, 40],
        [60, 90, 255],
        [255, 230, 0],
        [255, 0, 255],
        [0, 230, 230],
    ];
    COLORS[k % COLORS.len()]
}

// 3x5 digit glyphs, one row per u8 (low three bits, MSB left)
const DIGITS: [[u8; 5]; 10] = [
    [7, 5, 5, 5, 7],
    [2, 6, 2, 2, 7],
    [7, 1, 7, 4, 7],
    [7, 1, 7, 1, 7],
    [5, 5, 7, 1, 1],
    [7, 4, 7, 1, 7],
    [7, 4, 7, 5, 7],
    [7, 1, 1, 1, 1],
    [7, 5, 7, 5, 7],
    [7, 5, 7, 1, 7],
];

/// 8-bit RGB canvas for overlays.
struct Canvas {
    w: usize,
    h: usize,
    px: Vec<[u8; 3]>,
}

impl Canvas {
    fn from_tensor(image: &Tensor) -> Result<Self> {
        let [3, h, w] = image.shape() else {
            return Err(Error::shape("render", format!("image must be [3, H, W], got {:?}", image.shape())));
        };
        let (h, w) = (*h, *w);
        let plane = h * w;
        let d = image.data();
        let px = (0..plane)
            .map(|p| [0, 1, 2].map(|c| (d[c * plane + p].clamp(0.0, 1.0) * 255.0).round() as u8))
            .collect();
        Ok(Canvas { w, h, px })
    }

    fn set(&mut self, x: i64, y: i64, c: [u8; 3]) {
        if x >= 0 && y >= 0 && (x as usize) < self.w && (y as usize) < self.h {
            self.px[y as usize * self.w + x as usize] = c;
        }
    }

    fn rect(&mut self, x0: i64, y0: i64, x1: i64, y1: i64, c: [u8; 3]) {
        for x in x0..=x1 {
            self.set(x, y0, c);
            self.set(x, y1, c);
        }
        for y in y0..=y1 {
            self.set(x0, y, c);
            self.set(x1, y, c);
        }
    }

    fn digits(&mut self, x: i64, y: i64, text: &str, c: [u8; 3]) {
        for (k, ch) in text.chars().enumerate() {
            let Some(d) = ch.to_digit(10) else { continue };
            for (row, bits) in DIGITS[d as usize].iter().enumerate() {
                for col in 0..3 {
                    if bits & (4 >> col) != 0 {
                        self.set(x + 4 * k as i64 + col, y + row as i64, c);
                    }
                }
            }
        }
    }

    fn to_ppm(&self) -> Vec<u8> {
        let mut bytes = format!("P6\n{} {}\n255\n", self.w, self.h).into_bytes();
        for p in &self.px {
            bytes.extend_from_slice(p);
        }
        bytes
    }
}

/// PPM bytes of `image` with detections drawn as class-colored 1-pixel
/// outlines and two-digit score labels (hundredths) above each box.
pub fn draw_detections(image: &Tensor, dets: &[Detection]) -> Result<Vec<u8>> {
    let mut cv = Canvas::from_tensor(image)?;
    for d in dets {
        if d.bbox.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("detection box {:?}", d.bbox)));
        }
        let [x0, y0, x1, y1] = d.bbox.map(|v| v.round() as i64);
        let c = class_color(d.class_id);
        cv.rect(x0, y0, x1 - 1, y1 - 1, c);
        let pct = ((d.score * 100.0).floor() as i64).clamp(0, 99);
        let ty = if y0 >= 6 { y0 - 6 } else { y0 + 1 };
        cv.digits(x0, ty, &format!("{pct:02}"), c);
    }
    Ok(cv.to_ppm())
}

/// Draws `dets` onto `image`. Grouped renders write one file per source
/// anchor (in order of first appearance) named `<stem>_a<k>.ppm` next to
/// `out_path`; otherwise a single file at `out_path`. Returns the paths.
pub fn render_overlay(image: &Tensor, dets: &[Detection], group_by_anchor: bool, out_path: &Path) -> Result<Vec<PathBuf>> {
    if let Some(parent) = out_path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let write = |path: &Path, bytes: Vec<u8>| -> Result<()> {
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(path, e))
    };
    if !group_by_anchor {
        write(out_path, draw_detections(image, dets)?)?;
        return Ok(vec![out_path.to_path_buf()]);
    }
    let mut groups: Vec<(crate::anchors::AnchorEncoding, Vec<Detection>)> = Vec::new();
    for d in dets {
        match groups.iter_mut().find(|(a, _)| *a == d.source_anchor) {
            Some((_, v)) => v.push(*d),
            None => groups.push((d.source_anchor, vec![*d])),
        }
    }
    let stem = out_path.file_stem().and_then(|s| s.to_str()).unwrap_or("overlay");
    let dir = out_path.parent().unwrap_or(Path::new(""));
    let mut paths = Vec::with_capacity(groups.len());
    for (k, (_, group)) in groups.iter().enumerate() {
        let p = dir.join(format!("{stem}_a{k}.ppm"));
        write(&p, draw_detections(image, group)?)?;
        paths.push(p);
    }
    Ok(paths)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::anchors::AnchorEncoding;

    fn small_spec() -> SceneSpec {
        SceneSpec {
            image_h: 64,
            image_w: 64,
            min_sqrt_hw: 8.0,
            max_sqrt_hw: 32.0,
            search_subset: 2,
            ..SceneSpec::default()
        }
    }

    #[test]
    fn boxes_stay_inside_and_overlap_is_capped() {
        let spec = small_spec();
        for i in 0..300 {
            let boxes = sample_layout(&spec, i);
            assert!(!boxes.is_empty());
            for (k, b) in boxes.iter().enumerate() {
                let [x0, y0, x1, y1] = b.bbox().corners();
                assert!(x0 >= 0.0 && y0 >= 0.0 && x1 <= 64.0 && y1 <= 64.0);
                assert!(b.class_id < 3);
                for o in &boxes[..k] {
                    assert!(o.bbox().iou(&b.bbox()) <= 0.3);
                }
            }
        }
    }

    fn ks_uniform(mut u: Vec<f64>) -> f64 {
        u.sort_by(f64::total_cmp);
        let n = u.len() as f64;
        u.iter()
            .enumerate()
            .map(|(i, &x)| (x - i as f64 / n).abs().max(((i + 1) as f64 / n - x).abs()))
            .fold(0.0, f64::max)
    }

    #[test]
    fn size_and_aspect_marginals() {
        let spec = SceneSpec::default();
        let boxes: Vec<GroundTruthBox> = (0..1000).flat_map(|i| sample_layout(&spec, i)).collect();
        let n = boxes.len() as f64;
        let crit = 1.628 / n.sqrt(); // alpha = 0.01
        let (lo, hi) = (spec.min_sqrt_hw.ln(), spec.max_sqrt_hw.ln());
        let size_u: Vec<f64> = boxes.iter().map(|b| (((b.w * b.h).sqrt().ln()) - lo) / (hi - lo)).collect();
        let a = spec.max_log_aspect;
        let aspect_u: Vec<f64> = boxes.iter().map(|b| ((b.w / b.h).ln() + a) / (2.0 * a)).collect();
        let ds = ks_uniform(size_u);
        let da = ks_uniform(aspect_u);
        assert!(ds < crit, "size KS {ds} >= {crit}");
        assert!(da < crit, "aspect KS {da} >= {crit}");
    }

    #[test]
    fn single_forced_object() {
        let spec = SceneSpec {
            min_objects: 1,
            max_objects: 1,
            ..small_spec()
        };
        let dir = tempfile::tempdir().unwrap();
        let m = generate_dataset(&SceneSpec { val_fraction: 0.0, ..spec }, 1, dir.path()).unwrap();
        assert_eq!(m.num_images, 1);
        let recs = read_annotations(&dir.path().join("train.jsonl")).unwrap();
        assert_eq!(recs.len(), 1);
        assert_eq!(recs[0].boxes.len(), 1);
    }

    #[test]
    fn generation_is_byte_deterministic_and_round_trips() {
        let spec = small_spec();
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        generate_dataset(&spec, 6, a.path()).unwrap();
        generate_dataset(&spec, 6, b.path()).unwrap();
        for f in ["manifest.json", "train.jsonl", "val.jsonl", "search_subset.jsonl", "images/00003.ppm"] {
            assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap(), "{f}");
        }
        let train = load_dataset(a.path(), Split::Train).unwrap();
        let val = load_dataset(a.path(), Split::Val).unwrap();
        let search = load_dataset(a.path(), Split::SearchSubset).unwrap();
        assert_eq!((train.len(), val.len(), search.len()), (5, 1, 2));
        for (i, s) in train.iter().chain(&val).enumerate() {
            let (img, boxes) = sample_scene(&spec, i);
            assert_eq!(s.boxes, boxes);
            assert!(s.image.max_abs_diff(&img) <= 0.5 / 255.0 + 1e-12);
        }
        assert!(generate_dataset(&spec, 0, a.path()).is_err());
    }

    #[test]
    fn malformed_line_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.jsonl");
        fs::write(&p, "{\"image\":\"x.ppm\",\"boxes\":[]}\n{\"image\":\"y.ppm\",\"bo").unwrap();
        match read_annotations(&p) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected a parse error, got {other:?}"),
        }
    }

    #[test]
    fn out_of_bounds_box_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        write_ppm(&dir.path().join("i.ppm"), &Tensor::zeros(vec![3, 10, 10])).unwrap();
        let p = dir.path().join("a.jsonl");
        fs::write(&p, "{\"image\":\"i.ppm\",\"boxes\":[{\"cx\":8,\"cy\":5,\"w\":6,\"h\":2,\"class\":0}]}\n").unwrap();
        let err = load_annotation_file(&p, None).unwrap_err().to_string();
        assert!(err.contains("i.ppm"), "{err}");
    }

    #[test]
    fn hand_written_fixture_loads() {
        let p = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/two_boxes/ann.jsonl");
        let s = load_annotation_file(&p, Some(3)).unwrap();
        assert_eq!(s.len(), 1);
        assert_eq!(s[0].image.shape(), &[3, 4, 6]);
        assert_eq!(
            s[0].boxes,
            vec![
                GroundTruthBox { cx: 1.5, cy: 1.0, w: 3.0, h: 2.0, class_id: 0 },
                GroundTruthBox { cx: 4.5, cy: 2.5, w: 2.0, h: 3.0, class_id: 2 },
            ]
        );
        // pixel (row 1, col 2) is pure red, (row 3, col 5) mid gray
        let d = s[0].image.data();
        let plane = 24;
        assert_eq!([d[8], d[plane + 8], d[2 * plane + 8]], [1.0, 0.0, 0.0]);
        assert_eq!(d[23], 128.0 / 255.0);
    }

    #[test]
    fn ppm_header_with_comment() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.ppm");
        let mut bytes = b"P6\n# made by hand\n2 1\n255\n".to_vec();
        bytes.extend_from_slice(&[255, 0, 0, 0, 0, 255]);
        fs::write(&p, bytes).unwrap();
        let t = read_ppm(&p).unwrap();
        assert_eq!(t.data(), &[1.0, 0.0, 0.0, 0.0, 0.0, 1.0]);
        fs::write(&p, b"P6\n2 1\n255\n\x00").unwrap();
        assert!(read_ppm(&p).is_err());
    }

    fn det(b: [f64; 4], score: f64, class_id: usize, anchor: AnchorEncoding) -> Detection {
        Detection {
            bbox: b,
            score,
            class_id,
            source_anchor: anchor,
            level: 0,
        }
    }

    #[test]
    fn overlay_without_detections_copies_the_image() {
        let dir = tempfile::tempdir().unwrap();
        let (img, _) = sample_scene(&small_spec(), 0);
        let out = dir.path().join("o.ppm");
        render_overlay(&img, &[], false, &out).unwrap();
        write_ppm(&dir.path().join("ref.ppm"), &img).unwrap();
        assert_eq!(fs::read(&out).unwrap(), fs::read(dir.path().join("ref.ppm")).unwrap());
    }

    #[test]
    fn grouped_overlay_writes_one_file_per_anchor() {
        let dir = tempfile::tempdir().unwrap();
        let (img, _) = sample_scene(&small_spec(), 0);
        let a = AnchorEncoding { eh: 0.1, ew: 0.0 };
        let b = AnchorEncoding { eh: -0.1, ew: 0.2 };
        let dets = [
            det([2.0, 10.0, 20.0, 30.0], 0.9, 0, a),
            det([5.0, 12.0, 25.0, 40.0], 0.6, 1, b),
            det([30.0, 30.0, 50.0, 60.0], 0.7, 2, a),
        ];
        let paths = render_overlay(&img, &dets, true, &dir.path().join("fig.ppm")).unwrap();
        assert_eq!(paths.len(), 2);
        assert!(paths.iter().all(|p| p.exists()));
    }

    #[test]
    fn overlay_matches_golden_fixture() {
        let (img, _) = sample_scene(&small_spec(), 7);
        let a = AnchorEncoding::STANDARD;
        let dets = [
            det([4.0, 9.0, 30.0, 33.0], 0.87, 0, a),
            det([20.0, 2.0, 60.0, 22.0], 0.42, 1, a),
            det([36.0, 36.0, 62.0, 63.0], 0.05, 2, a),
        ];
        let got = draw_detections(&img, &dets).unwrap();
        let golden = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/overlay_golden.ppm");
        if std::env::var_os("METAANCHOR_BLESS").is_some() {
            fs::write(&golden, &got).unwrap();
        }
        let want = fs::read(&golden).unwrap();
        assert_eq!(got.len(), want.len());
        let diff = got.iter().zip(&want).filter(|(x, y)| x != y).count();
        assert_eq!(diff, 0, "{diff} bytes differ from the golden overlay");
    }
}
