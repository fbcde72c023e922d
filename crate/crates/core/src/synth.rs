//! Deterministic synthetic tiny-object scenes and their on-disk dataset form.
//!
//! Every scene is a pure function of `(spec, index)`: the generator is a
//! ChaCha8 stream seeded with `spec.seed` and positioned on stream `index`,
//! so scenes can be produced in any order or in parallel.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::assign::{BBox, GtImage};
use crate::error::{Error, Result};
use crate::tensor::{self, DType, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneSpec {
    pub height: usize,
    pub width: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    /// Object side range in pixels; width and height are drawn
    /// independently and log-uniformly, then rounded.
    pub min_side: usize,
    pub max_side: usize,
    pub num_classes: usize,
    /// Scale of the per-class colour offsets from the background.
    pub contrast: f64,
    /// Amplitude of the smooth background texture.
    pub texture: f64,
    /// Standard deviation of additive Gaussian noise.
    pub noise: f64,
    pub seed: u64,
    /// Enforces `max_side <= 16`.
    pub tiny_only: bool,
    /// Placement attempts per object before the spec is declared infeasible.
    pub max_retries: usize,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            height: 128,
            width: 128,
            min_objects: 4,
            max_objects: 10,
            min_side: 4,
            max_side: 16,
            num_classes: 3,
            contrast: 1.0,
            texture: 0.08,
            noise: 0.03,
            seed: 0,
            tiny_only: true,
            max_retries: 200,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Invalid(m));
        if self.height == 0 || self.width == 0 {
            return bad("image size must be positive".into());
        }
        if self.min_objects > self.max_objects {
            return bad(format!("min_objects {} > max_objects {}", self.min_objects, self.max_objects));
        }
        if self.min_side == 0 || self.min_side > self.max_side {
            return bad(format!("invalid side range {}..={}", self.min_side, self.max_side));
        }
        if self.max_side > self.height.min(self.width) {
            return bad(format!("max_side {} exceeds the image", self.max_side));
        }
        if self.tiny_only && self.max_side > 16 {
            return bad(format!("tiny-only spec with max_side {}", self.max_side));
        }
        if self.num_classes == 0 {
            return bad("num_classes must be positive".into());
        }
        for (name, v) in [("contrast", self.contrast), ("texture", self.texture), ("noise", self.noise)] {
            if !v.is_finite() || v < 0.0 {
                return bad(format!("{name} must be finite and non-negative"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GtBox {
    pub bbox: BBox,
    pub category: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    /// `[3, H, W]`, values in `[0, 1]`, all exactly representable as f32.
    pub image: Tensor,
    pub gts: Vec<GtBox>,
}

impl Scene {
    pub fn gt_image(&self) -> GtImage {
        let (_, h, w) = self.image.chw().expect("scene images are 3-d");
        GtImage { height: h, width: w, boxes: self.gts.iter().map(|g| g.bbox).collect() }
    }
}

const BACKGROUND: f64 = 0.5;

/// RGB offset from the background for a class. The first three classes are
/// the primaries; later ones cycle through fixed mixtures.
pub fn class_signature(class: usize) -> [f64; 3] {
    const TABLE: [[f64; 3]; 6] = [
        [0.4, -0.3, -0.3],
        [-0.3, 0.4, -0.3],
        [-0.3, -0.3, 0.4],
        [0.4, 0.4, -0.4],
        [-0.4, 0.4, 0.4],
        [0.4, -0.4, 0.4],
    ];
    let base = TABLE[class % TABLE.len()];
    let shrink = 1.0 / (1 + class / TABLE.len()) as f64;
    base.map(|v| v * shrink)
}

fn scene_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

fn log_uniform_side(rng: &mut ChaCha8Rng, lo: usize, hi: usize) -> usize {
    if lo == hi {
        return lo;
    }
    let v: f64 = rng.random_range((lo as f64).ln()..=(hi as f64).ln());
    (v.exp().round() as usize).clamp(lo, hi)
}

fn overlaps(a: &BBox, b: &BBox) -> bool {
    a.x1 < b.x2 && b.x1 < a.x2 && a.y1 < b.y2 && b.y1 < a.y2
}

fn to_f32_grid(v: f64) -> f64 {
    v.clamp(0.0, 1.0) as f32 as f64
}

/// Generates scene number `index` of the stream defined by `spec`.
pub fn generate_scene(spec: &SceneSpec, index: u64) -> Result<Scene> {
    spec.validate()?;
    let mut rng = scene_rng(spec.seed, index);
    let (h, w) = (spec.height, spec.width);

    let count = rng.random_range(spec.min_objects..=spec.max_objects);
    let mut gts: Vec<GtBox> = Vec::with_capacity(count);
    let mut discs = Vec::with_capacity(count);
    for _ in 0..count {
        let mut placed = false;
        for _ in 0..spec.max_retries.max(1) {
            let bw = log_uniform_side(&mut rng, spec.min_side, spec.max_side);
            let bh = log_uniform_side(&mut rng, spec.min_side, spec.max_side);
            let x1 = rng.random_range(0..=w - bw) as f64;
            let y1 = rng.random_range(0..=h - bh) as f64;
            let b = BBox { x1, y1, x2: x1 + bw as f64, y2: y1 + bh as f64 };
            if gts.iter().any(|g| overlaps(&g.bbox, &b)) {
                continue;
            }
            let category = rng.random_range(0..spec.num_classes);
            discs.push(rng.random_bool(0.5));
            gts.push(GtBox { bbox: b, category });
            placed = true;
            break;
        }
        if !placed {
            return Err(Error::Infeasible(format!(
                "could not place object {} of {count} in scene {index} after {} attempts",
                gts.len() + 1,
                spec.max_retries
            )));
        }
    }

    // Smooth background: sum of two random plane waves.
    let waves: Vec<(f64, f64, f64)> = (0..2)
        .map(|_| {
            let fx = rng.random_range(0.02..0.12);
            let fy = rng.random_range(0.02..0.12);
            let phase = rng.random_range(0.0..std::f64::consts::TAU);
            (fx, fy, phase)
        })
        .collect();
    let mut img = vec![0.0; 3 * h * w];
    for y in 0..h {
        for x in 0..w {
            let t: f64 = waves.iter().map(|(fx, fy, p)| (fx * x as f64 + fy * y as f64 + p).sin()).sum::<f64>() * 0.5;
            for c in 0..3 {
                img[(c * h + y) * w + x] = BACKGROUND + spec.texture * t;
            }
        }
    }

    for (g, &disc) in gts.iter().zip(&discs) {
        let sig = class_signature(g.category);
        let b = g.bbox;
        let (cx, cy) = b.center();
        let (rx, ry) = (b.width() * 0.5, b.height() * 0.5);
        for y in b.y1 as usize..b.y2 as usize {
            for x in b.x1 as usize..b.x2 as usize {
                if disc {
                    let dx = (x as f64 + 0.5 - cx) / rx;
                    let dy = (y as f64 + 0.5 - cy) / ry;
                    if dx * dx + dy * dy > 1.0 {
                        continue;
                    }
                }
                for (c, s) in sig.iter().enumerate() {
                    img[(c * h + y) * w + x] = BACKGROUND + spec.contrast * s;
                }
            }
        }
    }

    if spec.noise > 0.0 {
        let normal = Normal::new(0.0, spec.noise).map_err(|e| Error::Invalid(e.to_string()))?;
        for v in img.iter_mut() {
            *v += normal.sample(&mut rng);
        }
    }
    img.iter_mut().for_each(|v| *v = to_f32_grid(*v));
    Ok(Scene { image: Tensor::new(&[3, h, w], img)?, gts })
}

/// Scenes `start..start + n`, generated in parallel; order is by index.
pub fn generate_scenes(spec: &SceneSpec, start: u64, n: usize) -> Result<Vec<Scene>> {
    (0..n as u64).into_par_iter().map(|i| generate_scene(spec, start + i)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub id: usize,
    pub file: String,
    pub height: usize,
    pub width: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub image_id: usize,
    pub bbox: [f64; 4],
    pub category: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Annotations {
    pub images: Vec<ImageRecord>,
    pub annotations: Vec<AnnotationRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format: String,
    pub version: u32,
    pub count: usize,
    pub first_index: u64,
    pub num_objects: usize,
    pub spec: SceneSpec,
}

const DATASET_FORMAT: &str = "efpn-synth";

/// A loaded dataset: scenes in image-id order.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub manifest: Option<DatasetManifest>,
    pub scenes: Vec<Scene>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.scenes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scenes.is_empty()
    }

    pub fn gt_images(&self) -> Vec<GtImage> {
        self.scenes.iter().map(Scene::gt_image).collect()
    }

    pub fn num_classes(&self) -> usize {
        self.manifest.as_ref().map(|m| m.spec.num_classes).unwrap_or_else(|| {
            self.scenes.iter().flat_map(|s| &s.gts).map(|g| g.category + 1).max().unwrap_or(0)
        })
    }
}

pub fn annotations_of(scenes: &[Scene]) -> Annotations {
    let mut images = Vec::with_capacity(scenes.len());
    let mut annotations = Vec::new();
    for (id, s) in scenes.iter().enumerate() {
        let (_, h, w) = s.image.chw().expect("scene images are 3-d");
        images.push(ImageRecord { id, file: format!("images/{id:05}.efbt"), height: h, width: w });
        annotations.extend(s.gts.iter().map(|g| AnnotationRecord {
            image_id: id,
            bbox: g.bbox.to_array(),
            category: g.category,
        }));
    }
    Annotations { images, annotations }
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

/// Generates scenes `0..n` and writes them under `dir`.
pub fn write_dataset(spec: &SceneSpec, n: usize, dir: &Path) -> Result<Dataset> {
    write_dataset_from(spec, 0, n, dir)
}

/// Generates scenes `start..start + n` and writes them under `dir`.
pub fn write_dataset_from(spec: &SceneSpec, start: u64, n: usize, dir: &Path) -> Result<Dataset> {
    let scenes = generate_scenes(spec, start, n)?;
    let ann = annotations_of(&scenes);
    let manifest = DatasetManifest {
        format: DATASET_FORMAT.into(),
        version: 1,
        count: n,
        first_index: start,
        num_objects: ann.annotations.len(),
        spec: spec.clone(),
    };
    let img_dir = dir.join("images");
    fs::create_dir_all(&img_dir).map_err(|e| Error::io(&img_dir, e))?;
    for (rec, s) in ann.images.iter().zip(&scenes) {
        tensor::write_tensor(&dir.join(&rec.file), &s.image, DType::F32)?;
    }
    write_json(&dir.join("annotations.json"), &ann)?;
    write_json(&dir.join("manifest.json"), &manifest)?;
    Ok(Dataset { manifest: Some(manifest), scenes })
}

fn schema_err(path: &Path, message: String) -> Error {
    Error::Schema { path: path.to_path_buf(), message }
}

/// Parses and validates `annotations.json`. Syntax and type errors carry the
/// line and column; semantic errors name the offending record.
pub fn read_annotations(path: &Path) -> Result<Annotations> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let ann: Annotations = serde_json::from_str(&text).map_err(|e| Error::parse(path, &e))?;
    for (i, rec) in ann.images.iter().enumerate() {
        if rec.id != i {
            return Err(schema_err(path, format!("images[{i}].id is {}, expected {i}", rec.id)));
        }
        if rec.height == 0 || rec.width == 0 {
            return Err(schema_err(path, format!("images[{i}] has zero size")));
        }
    }
    for (i, a) in ann.annotations.iter().enumerate() {
        let Some(img) = ann.images.get(a.image_id) else {
            return Err(schema_err(path, format!("annotations[{i}].image_id {} is unknown", a.image_id)));
        };
        let [x1, y1, x2, y2] = a.bbox;
        let b = BBox::new(x1, y1, x2, y2).map_err(|e| schema_err(path, format!("annotations[{i}].bbox: {e}")))?;
        if b.x1 < 0.0 || b.y1 < 0.0 || b.x2 > img.width as f64 || b.y2 > img.height as f64 {
            return Err(schema_err(path, format!("annotations[{i}].bbox lies outside image {}", a.image_id)));
        }
    }
    Ok(ann)
}

/// Ground truth per image straight from `annotations.json`, without images.
pub fn read_gt_images(dir: &Path) -> Result<Vec<GtImage>> {
    let ann = read_annotations(&dir.join("annotations.json"))?;
    let mut out: Vec<GtImage> =
        ann.images.iter().map(|r| GtImage { height: r.height, width: r.width, boxes: Vec::new() }).collect();
    for a in &ann.annotations {
        let [x1, y1, x2, y2] = a.bbox;
        out[a.image_id].boxes.push(BBox { x1, y1, x2, y2 });
    }
    Ok(out)
}

fn manifest_path(dir: &Path) -> PathBuf {
    dir.join("manifest.json")
}

pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let mpath = manifest_path(dir);
    let manifest = if mpath.exists() {
        let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
        let m: DatasetManifest = serde_json::from_str(&text).map_err(|e| Error::parse(&mpath, &e))?;
        if m.format != DATASET_FORMAT {
            return Err(schema_err(&mpath, format!("unexpected format {:?}", m.format)));
        }
        Some(m)
    } else {
        None
    };
    let apath = dir.join("annotations.json");
    let ann = read_annotations(&apath)?;
    if let Some(m) = &manifest {
        if m.count != ann.images.len() {
            return Err(schema_err(&mpath, format!("count {} but {} images listed", m.count, ann.images.len())));
        }
    }
    let mut scenes = Vec::with_capacity(ann.images.len());
    for rec in &ann.images {
        let ipath = dir.join(&rec.file);
        let image = tensor::read_tensor(&ipath)?;
        if image.dims() != [3, rec.height, rec.width] {
            return Err(schema_err(&ipath, format!("dims {:?} disagree with annotations", image.dims())));
        }
        scenes.push(Scene { image, gts: Vec::new() });
    }
    for a in &ann.annotations {
        let [x1, y1, x2, y2] = a.bbox;
        scenes[a.image_id].gts.push(GtBox { bbox: BBox { x1, y1, x2, y2 }, category: a.category });
    }
    if let Some(m) = &manifest {
        if let Some(a) = ann.annotations.iter().find(|a| a.category >= m.spec.num_classes) {
            return Err(schema_err(&apath, format!("category {} out of range", a.category)));
        }
    }
    Ok(Dataset { manifest, scenes })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_index_addressed() {
        let spec = SceneSpec::default();
        let a = generate_scene(&spec, 3).unwrap();
        let b = generate_scene(&spec, 3).unwrap();
        assert!(a.image.bit_eq(&b.image));
        assert_eq!(a.gts, b.gts);
        let batch = generate_scenes(&spec, 2, 3).unwrap();
        assert_eq!(batch[1], a);
        assert_ne!(generate_scene(&spec, 4).unwrap(), a);
    }

    #[test]
    fn two_plateaus_without_noise() {
        let spec =
            SceneSpec { min_objects: 1, max_objects: 1, texture: 0.0, noise: 0.0, ..SceneSpec::default() };
        let s = generate_scene(&spec, 0).unwrap();
        let (_, h, w) = s.image.chw().unwrap();
        for c in 0..3 {
            let mut vals: Vec<f64> = s.image.data()[c * h * w..(c + 1) * h * w].to_vec();
            vals.sort_by(f64::total_cmp);
            vals.dedup();
            assert_eq!(vals.len(), 2, "channel {c}: {vals:?}");
        }
    }

    #[test]
    fn boxes_valid_and_inside() {
        let spec = SceneSpec::default();
        for i in 0..50 {
            let s = generate_scene(&spec, i).unwrap();
            assert!((4..=10).contains(&s.gts.len()));
            for g in &s.gts {
                g.bbox.validate().unwrap();
                assert!(g.bbox.x1 >= 0.0 && g.bbox.y1 >= 0.0 && g.bbox.x2 <= 128.0 && g.bbox.y2 <= 128.0);
                assert!((4.0..=16.0).contains(&g.bbox.width()) && (4.0..=16.0).contains(&g.bbox.height()));
            }
            assert!(s.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn infeasible_spec_rejected() {
        let spec = SceneSpec {
            height: 16,
            width: 16,
            min_objects: 20,
            max_objects: 20,
            min_side: 8,
            max_side: 8,
            max_retries: 20,
            ..SceneSpec::default()
        };
        assert!(matches!(generate_scene(&spec, 0), Err(Error::Infeasible(_))));
        let spec = SceneSpec { max_side: 20, ..SceneSpec::default() };
        assert!(generate_scene(&spec, 0).is_err());
    }

    #[test]
    fn round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SceneSpec::default();
        let written = write_dataset(&spec, 10, dir.path()).unwrap();
        let back = read_dataset(dir.path()).unwrap();
        assert_eq!(back.manifest.as_ref().unwrap().count, 10);
        assert_eq!(back.len(), 10);
        for (a, b) in written.scenes.iter().zip(&back.scenes) {
            assert!(a.image.bit_eq(&b.image));
            assert_eq!(a.gts, b.gts);
        }
        assert_eq!(read_gt_images(dir.path()).unwrap(), written.gt_images());
    }

    #[test]
    fn bad_annotations_report_location() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("annotations.json");
        fs::write(&p, "{\n  \"images\": [],\n  \"annotations\": [\n    {\"image_id\": 0, \"bbox\": [1, 2]}\n  ]\n}\n")
            .unwrap();
        match read_annotations(&p) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 4),
            other => panic!("{other:?}"),
        }
        fs::write(
            &p,
            r#"{"images":[{"id":0,"file":"x","height":8,"width":8}],"annotations":[{"image_id":0,"bbox":[1,1,9,4],"category":0}]}"#,
        )
        .unwrap();
        let e = read_annotations(&p).unwrap_err().to_string();
        assert!(e.contains("annotations[0]"), "{e}");
    }
}
