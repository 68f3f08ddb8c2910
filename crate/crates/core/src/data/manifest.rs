//! COCO-style manifests with 8-bit RGB PNG images.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::{self, File};
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{generate_scene, SceneSpec};
use crate::error::{Error, Result};
use crate::head::{BBox, GroundTruth};
use crate::tensor::{seeded_rng, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub id: u64,
    /// Relative to the manifest's directory.
    pub file_name: String,
    pub width: usize,
    pub height: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub id: u64,
    pub image_id: u64,
    pub category_id: u64,
    /// `[x, y, width, height]` in pixels.
    pub bbox: [f64; 4],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryRecord {
    pub id: u64,
    pub name: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub images: Vec<ImageRecord>,
    pub annotations: Vec<AnnotationRecord>,
    pub categories: Vec<CategoryRecord>,
}

impl DatasetManifest {
    /// Checks id uniqueness, references and box bounds. Problems name the
    /// offending record as `field[index].member`.
    pub fn validate(&self) -> std::result::Result<(), String> {
        let mut image_ids = HashMap::new();
        for (i, im) in self.images.iter().enumerate() {
            if image_ids.insert(im.id, im).is_some() {
                return Err(format!("images[{i}].id: duplicate id {}", im.id));
            }
            if im.width == 0 || im.height == 0 {
                return Err(format!("images[{i}]: zero extent {}x{}", im.width, im.height));
            }
        }
        let mut cat_ids = HashSet::new();
        for (i, c) in self.categories.iter().enumerate() {
            if !cat_ids.insert(c.id) {
                return Err(format!("categories[{i}].id: duplicate id {}", c.id));
            }
        }
        let mut ann_ids = HashSet::new();
        for (i, a) in self.annotations.iter().enumerate() {
            if !ann_ids.insert(a.id) {
                return Err(format!("annotations[{i}].id: duplicate id {}", a.id));
            }
            let Some(im) = image_ids.get(&a.image_id) else {
                return Err(format!("annotations[{i}].image_id: {} is not in images", a.image_id));
            };
            if !cat_ids.contains(&a.category_id) {
                return Err(format!("annotations[{i}].category_id: {} is not in categories", a.category_id));
            }
            let [x, y, w, h] = a.bbox;
            let fits = x >= 0.0 && y >= 0.0 && x + w <= im.width as f64 + 1e-9 && y + h <= im.height as f64 + 1e-9;
            if !(w > 0.0 && h > 0.0 && fits) {
                return Err(format!("annotations[{i}].bbox: {:?} is empty or outside {}x{}", a.bbox, im.width, im.height));
            }
        }
        Ok(())
    }

    /// Class index of each category id (position in id order).
    pub fn class_of(&self) -> BTreeMap<u64, usize> {
        let mut ids: Vec<u64> = self.categories.iter().map(|c| c.id).collect();
        ids.sort_unstable();
        ids.into_iter().enumerate().map(|(i, id)| (id, i)).collect()
    }

    pub fn ground_truth(&self, image_id: u64) -> GroundTruth {
        let class_of = self.class_of();
        GroundTruth::new(
            self.annotations
                .iter()
                .filter(|a| a.image_id == image_id)
                .map(|a| (class_of[&a.category_id], xywh_box(a.bbox)))
                .collect(),
        )
    }
}

fn xywh_box([x, y, w, h]: [f64; 4]) -> BBox {
    BBox::from_xywh(x, y, w, h)
}

fn manifest_err(path: &Path, detail: impl Into<String>) -> Error {
    Error::Manifest { path: path.to_path_buf(), detail: detail.into() }
}

pub fn write_dataset(path: &Path, manifest: &DatasetManifest) -> Result<()> {
    manifest.validate().map_err(|d| manifest_err(path, d))?;
    let text = serde_json::to_string_pretty(manifest).map_err(|e| manifest_err(path, e.to_string()))?;
    fs::write(path, text)?;
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<DatasetManifest> {
    let text = fs::read_to_string(path).map_err(|e| manifest_err(path, format!("cannot read: {e}")))?;
    let m: DatasetManifest = serde_json::from_str(&text).map_err(|e| manifest_err(path, e.to_string()))?;
    m.validate().map_err(|d| manifest_err(path, d))?;
    Ok(m)
}

/// Writes `[3, H, W]` values in [0, 1] as an 8-bit RGB PNG.
pub fn save_image(path: &Path, image: &Tensor<f32>) -> Result<()> {
    let s = image.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(Error::shape("save_image", format!("expected [3, H, W], got {s:?}")));
    }
    let (h, w) = (s[1], s[2]);
    let plane = h * w;
    let d = image.data();
    let mut bytes = Vec::with_capacity(3 * plane);
    for i in 0..plane {
        for ch in 0..3 {
            bytes.push((d[ch * plane + i].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    let img_err = |e: png::EncodingError| Error::Image { path: path.to_path_buf(), detail: e.to_string() };
    let mut enc = png::Encoder::new(BufWriter::new(File::create(path)?), w as u32, h as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc.write_header().map_err(img_err)?;
    writer.write_image_data(&bytes).map_err(img_err)?;
    writer.finish().map_err(img_err)?;
    Ok(())
}

/// Reads an 8-bit RGB PNG into `[3, H, W]` with values `byte / 255`.
pub fn load_image(path: &Path) -> Result<Tensor<f32>> {
    let img_err = |detail: String| Error::Image { path: path.to_path_buf(), detail };
    let file = File::open(path).map_err(|e| img_err(e.to_string()))?;
    let mut reader = png::Decoder::new(BufReader::new(file)).read_info().map_err(|e| img_err(e.to_string()))?;
    let mut buf = vec![0u8; reader.output_buffer_size().ok_or_else(|| img_err("image too large".into()))?];
    let info = reader.next_frame(&mut buf).map_err(|e| img_err(e.to_string()))?;
    if info.color_type != png::ColorType::Rgb || info.bit_depth != png::BitDepth::Eight {
        return Err(img_err(format!("expected 8-bit RGB, got {:?} {:?}", info.color_type, info.bit_depth)));
    }
    let (h, w) = (info.height as usize, info.width as usize);
    let plane = h * w;
    let mut data = vec![0.0f32; 3 * plane];
    for i in 0..plane {
        for ch in 0..3 {
            data[ch * plane + i] = buf[i * 3 + ch] as f32 / 255.0;
        }
    }
    Tensor::from_vec(&[3, h, w], data)
}

/// Renders `count` scenes into `dir` (PNG files plus `annotations.json`)
/// using up to `threads` workers. Output does not depend on `threads`.
pub fn generate_dataset(dir: &Path, spec: &SceneSpec, count: usize, threads: usize) -> Result<DatasetManifest> {
    spec.validate()?;
    fs::create_dir_all(dir.join("images"))?;
    let threads = threads.clamp(1, count.max(1));
    let chunk = count.div_ceil(threads).max(1);
    let per_image: Vec<Result<GroundTruth>> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..count)
            .step_by(chunk)
            .map(|start| {
                s.spawn(move || {
                    (start..(start + chunk).min(count))
                        .map(|i| {
                            let scene = generate_scene(&spec.for_image(i as u64))?;
                            save_image(&dir.join(image_file(i)), &scene.image)?;
                            Ok(scene.gt)
                        })
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        handles.into_iter().flat_map(|h| h.join().expect("generator thread panicked")).collect()
    });
    let mut m = DatasetManifest {
        categories: (0..spec.num_classes)
            .map(|k| CategoryRecord { id: k as u64 + 1, name: format!("class{k}") })
            .collect(),
        ..DatasetManifest::default()
    };
    for (i, gt) in per_image.into_iter().enumerate() {
        let gt = gt?;
        let image_id = i as u64 + 1;
        m.images.push(ImageRecord { id: image_id, file_name: image_file(i), width: spec.size, height: spec.size });
        for (k, b) in gt.objects {
            let id = m.annotations.len() as u64 + 1;
            m.annotations.push(AnnotationRecord { id, image_id, category_id: k as u64 + 1, bbox: b.to_xywh() });
        }
    }
    write_dataset(&dir.join("annotations.json"), &m)?;
    Ok(m)
}

fn image_file(i: usize) -> String {
    format!("images/{i:06}.png")
}

/// Image subset of `floor(fraction * n)` images, sampled uniformly inside
/// strata keyed by each image's majority class (lowest class on ties,
/// unannotated images on their own). Leftover slots after the per-stratum
/// floors go to the largest remainders. Kept images retain their order.
pub fn subset(m: &DatasetManifest, fraction: f64, seed: u64) -> Result<DatasetManifest> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::invalid("subset", format!("fraction {fraction} outside (0, 1]")));
    }
    if fraction == 1.0 {
        return Ok(m.clone());
    }
    let target = (fraction * m.images.len() as f64).floor() as usize;
    if target == 0 {
        return Err(Error::invalid("subset", format!("fraction {fraction} of {} images is empty", m.images.len())));
    }
    let mut counts: HashMap<u64, BTreeMap<u64, usize>> = HashMap::new();
    for a in &m.annotations {
        *counts.entry(a.image_id).or_default().entry(a.category_id).or_default() += 1;
    }
    let mut strata: BTreeMap<Option<u64>, Vec<usize>> = BTreeMap::new();
    for (i, im) in m.images.iter().enumerate() {
        let key = counts.get(&im.id).and_then(|c| {
            c.iter().max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0))).map(|(k, _)| *k)
        });
        strata.entry(key).or_default().push(i);
    }
    let n = m.images.len() as f64;
    let mut quotas: Vec<(usize, f64)> = strata
        .values()
        .map(|v| {
            let share = target as f64 * v.len() as f64 / n;
            (share.floor() as usize, share - share.floor())
        })
        .collect();
    let mut left = target - quotas.iter().map(|q| q.0).sum::<usize>();
    let mut by_remainder: Vec<usize> = (0..quotas.len()).collect();
    by_remainder.sort_by(|&a, &b| quotas[b].1.total_cmp(&quotas[a].1).then(a.cmp(&b)));
    for i in by_remainder {
        if left == 0 {
            break;
        }
        quotas[i].0 += 1;
        left -= 1;
    }
    let mut rng = seeded_rng(seed);
    let mut keep: Vec<usize> = Vec::with_capacity(target);
    for (members, (q, _)) in strata.values().zip(&quotas) {
        let mut members = members.clone();
        members.shuffle(&mut rng);
        keep.extend(&members[..*q]);
    }
    keep.sort_unstable();
    let images: Vec<ImageRecord> = keep.iter().map(|&i| m.images[i].clone()).collect();
    let ids: HashSet<u64> = images.iter().map(|im| im.id).collect();
    Ok(DatasetManifest {
        images,
        annotations: m.annotations.iter().filter(|a| ids.contains(&a.image_id)).cloned().collect(),
        categories: m.categories.clone(),
    })
}

/// One decoded training or evaluation image.
#[derive(Debug, Clone)]
pub struct Sample {
    pub image_id: u64,
    pub image: Tensor<f32>,
    pub gt: GroundTruth,
}

/// Reads a manifest and decodes all its images (paths relative to the
/// manifest).
pub fn load_samples(path: &Path) -> Result<(DatasetManifest, Vec<Sample>)> {
    let m = read_dataset(path)?;
    let root: PathBuf = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let mut samples = Vec::with_capacity(m.images.len());
    for im in &m.images {
        let image = load_image(&root.join(&im.file_name))?;
        if image.shape()[1..] != [im.height, im.width] {
            return Err(manifest_err(path, format!("image {}: file is {:?}, manifest says {}x{}", im.id, image.shape(), im.height, im.width)));
        }
        samples.push(Sample { image_id: im.id, image, gt: m.ground_truth(im.id) });
    }
    Ok((m, samples))
}
