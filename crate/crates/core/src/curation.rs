//! Detection-to-counting dataset curation: centroid conversion, class
//! remapping, single-class decomposition, minimum-instance filtering,
//! exemplar/ground-truth splitting and train/val/test/calibration split
//! construction.
//!
//! Everything here is a pure, seeded transformation: the same annotation
//! files and the same seed always produce byte-identical outputs.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Instance geometry: an axis-aligned box (x0, y0, x1, y1) or a
/// quadrilateral of four distinct vertices, both in image pixels.
#[derive(Debug, Clone, PartialEq)]
pub enum Geometry {
    Box([f64; 4]),
    Quad([[f64; 2]; 4]),
}

#[derive(Serialize, Deserialize)]
struct GeometryJson {
    #[serde(rename = "type")]
    kind: String,
    coords: Vec<f64>,
}

impl Serialize for Geometry {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let json = match self {
            Geometry::Box(b) => GeometryJson {
                kind: "box".to_string(),
                coords: b.to_vec(),
            },
            Geometry::Quad(q) => GeometryJson {
                kind: "quad".to_string(),
                coords: q.iter().flatten().copied().collect(),
            },
        };
        json.serialize(s)
    }
}

impl<'de> Deserialize<'de> for Geometry {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let json = GeometryJson::deserialize(d)?;
        match (json.kind.as_str(), json.coords.len()) {
            ("box", 4) => Ok(Geometry::Box([
                json.coords[0],
                json.coords[1],
                json.coords[2],
                json.coords[3],
            ])),
            ("quad", 8) => {
                let q = std::array::from_fn(|i| [json.coords[2 * i], json.coords[2 * i + 1]]);
                Ok(Geometry::Quad(q))
            }
            (kind, n) => Err(serde::de::Error::custom(format!(
                "geometry type {kind:?} with {n} coords"
            ))),
        }
    }
}

impl Geometry {
    pub fn validate(&self) -> Result<()> {
        match self {
            Geometry::Box(b) => {
                if !(b[2] > b[0] && b[3] > b[1]) {
                    return Err(Error::Data(format!("degenerate box {:?}", b)));
                }
            }
            Geometry::Quad(q) => {
                for i in 0..4 {
                    for j in i + 1..4 {
                        if q[i] == q[j] {
                            return Err(Error::Data(format!(
                                "degenerate quad, vertices {i} and {j} coincide: {:?}",
                                q
                            )));
                        }
                    }
                }
            }
        }
        Ok(())
    }

    /// Centroid: box midpoint, or the vertex mean for quadrilaterals.
    pub fn centroid(&self) -> [f64; 2] {
        match self {
            Geometry::Box(b) => [(b[0] + b[2]) / 2.0, (b[1] + b[3]) / 2.0],
            Geometry::Quad(q) => {
                let sx: f64 = q.iter().map(|v| v[0]).sum();
                let sy: f64 = q.iter().map(|v| v[1]).sum();
                [sx / 4.0, sy / 4.0]
            }
        }
    }

    /// Axis-aligned bounding box; exemplar conditioning wants plain boxes,
    /// so quads contribute their hull box.
    pub fn aabb(&self) -> [f64; 4] {
        match self {
            Geometry::Box(b) => *b,
            Geometry::Quad(q) => {
                let xs: Vec<f64> = q.iter().map(|v| v[0]).collect();
                let ys: Vec<f64> = q.iter().map(|v| v[1]).collect();
                [
                    xs.iter().cloned().fold(f64::INFINITY, f64::min),
                    ys.iter().cloned().fold(f64::INFINITY, f64::min),
                    xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
                    ys.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
                ]
            }
        }
    }
}

/// One annotated instance as it appears in the normalized JSONL input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionRecord {
    pub image_id: String,
    pub width: usize,
    pub height: usize,
    pub class: String,
    pub geometry: Geometry,
}

impl DetectionRecord {
    pub fn validate(&self) -> Result<()> {
        self.geometry.validate()?;
        let b = self.geometry.aabb();
        if b[0] < 0.0 || b[1] < 0.0 || b[2] > self.width as f64 || b[3] > self.height as f64 {
            return Err(Error::Data(format!(
                "geometry {:?} outside image {}x{} of {}",
                b, self.width, self.height, self.image_id
            )));
        }
        Ok(())
    }
}

/// An instance after centroid conversion.
#[derive(Debug, Clone, PartialEq)]
pub struct PointInstance {
    pub image_id: String,
    pub class: String,
    pub dataset: String,
    pub image_dims: (usize, usize),
    pub point: [f64; 2],
    pub exemplar_box: [f64; 4],
}

/// All instances of one class in one image, ready for exemplar splitting.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassSample {
    pub image_id: String,
    pub class: String,
    pub dataset: String,
    pub image_dims: (usize, usize),
    pub instances: Vec<PointInstance>,
}

impl ClassSample {
    pub fn sample_id(&self) -> String {
        format!("{}__{}", self.image_id, self.class.replace(' ', "_"))
    }
}

/// A curated single-class counting sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CountingSample {
    pub sample_id: String,
    pub image_id: String,
    pub class: String,
    pub prompt: String,
    pub exemplar_boxes: Vec<[f64; 4]>,
    pub gt_points: Vec<[f64; 2]>,
    pub dataset: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SplitSection {
    pub ids: Vec<String>,
    pub classes: Vec<String>,
}

/// The four split id lists plus per-split class lists and the seed that
/// produced them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub seed: u64,
    pub train: SplitSection,
    pub validation: SplitSection,
    pub test: SplitSection,
    pub calibration: SplitSection,
}

/// Converts detection records to point instances (centroid plus hull box).
pub fn convert_detections(records: &[DetectionRecord], dataset: &str) -> Result<Vec<PointInstance>> {
    records
        .iter()
        .map(|r| {
            r.validate()?;
            Ok(PointInstance {
                image_id: r.image_id.clone(),
                class: r.class.clone(),
                dataset: dataset.to_string(),
                image_dims: (r.height, r.width),
                point: r.geometry.centroid(),
                exemplar_box: r.geometry.aabb(),
            })
        })
        .collect()
}

const BOAT_CLASSES: [&str; 3] = ["Tugboat", "Motorboat", "Fishing-boat"];
const SHIP_CLASSES: [&str; 4] = ["Warship", "Cargo-ship", "Engineering-ship", "Passenger-ship"];

/// Splits the umbrella ship label into two semantically distinct classes:
/// small craft become "boat", large vessels become "ship". Anything else
/// passes through unchanged.
pub fn remap_fair1m_ships(label: &str) -> String {
    if BOAT_CLASSES.contains(&label) {
        "boat".to_string()
    } else if SHIP_CLASSES.contains(&label) {
        "ship".to_string()
    } else {
        label.to_string()
    }
}

/// Groups one image's instances into one sample per distinct class.
/// Instance counts are preserved; classes come out sorted.
pub fn decompose_by_class(instances: &[PointInstance]) -> Vec<ClassSample> {
    let mut by_class: BTreeMap<String, Vec<PointInstance>> = BTreeMap::new();
    for inst in instances {
        by_class.entry(inst.class.clone()).or_default().push(inst.clone());
    }
    by_class
        .into_iter()
        .map(|(class, list)| ClassSample {
            image_id: list[0].image_id.clone(),
            dataset: list[0].dataset.clone(),
            image_dims: list[0].image_dims,
            class,
            instances: list,
        })
        .collect()
}

/// Keeps samples with at least `min_count` instances.
pub fn filter_min_instances(samples: Vec<ClassSample>, min_count: usize) -> Vec<ClassSample> {
    samples
        .into_iter()
        .filter(|s| s.instances.len() >= min_count)
        .collect()
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn sample_rng(seed: u64, tag: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ fnv1a(tag.as_bytes()))
}

/// Picks `count` distinct indices out of `n` by partial Fisher-Yates,
/// returned sorted ascending.
fn seeded_choice(rng: &mut ChaCha8Rng, n: usize, count: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    for i in 0..count.min(n) {
        let j = rng.random_range(i..n);
        idx.swap(i, j);
    }
    let mut chosen = idx[..count.min(n)].to_vec();
    chosen.sort_unstable();
    chosen
}

/// Splits a sample's instances into `shots` exemplar boxes (seeded uniform
/// choice, original boxes retained) and ground-truth points (everything
/// else). Deterministic per (sample id, seed).
pub fn split_exemplars(sample: &ClassSample, shots: usize, seed: u64) -> Result<CountingSample> {
    let n = sample.instances.len();
    if n < shots + 1 {
        return Err(Error::Data(format!(
            "sample {} has {} instances, needs at least {} for {}-shot conditioning",
            sample.sample_id(),
            n,
            shots + 1,
            shots
        )));
    }
    let sample_id = sample.sample_id();
    let mut rng = sample_rng(seed, &sample_id);
    let chosen = seeded_choice(&mut rng, n, shots);
    let mut exemplar_boxes = Vec::with_capacity(shots);
    let mut gt_points = Vec::with_capacity(n - shots);
    let mut pick = chosen.iter().peekable();
    for (i, inst) in sample.instances.iter().enumerate() {
        if pick.peek() == Some(&&i) {
            exemplar_boxes.push(inst.exemplar_box);
            pick.next();
        } else {
            gt_points.push(inst.point);
        }
    }
    Ok(CountingSample {
        sample_id,
        image_id: sample.image_id.clone(),
        class: sample.class.clone(),
        prompt: sample.class.to_lowercase(),
        exemplar_boxes,
        gt_points,
        dataset: sample.dataset.clone(),
    })
}

fn section(ids: Vec<String>, classes: BTreeSet<String>) -> SplitSection {
    SplitSection {
        ids,
        classes: classes.into_iter().collect(),
    }
}

/// Routes samples into train/validation/test by class, then carves a
/// per-dataset calibration holdout of min(`calib_per_dataset`, available)
/// seeded-random train samples. Test classes never appear in train or
/// validation.
pub fn build_splits(
    samples: &[CountingSample],
    test_classes: &[String],
    val_classes: &[String],
    calib_per_dataset: usize,
    seed: u64,
) -> Result<SplitManifest> {
    for c in test_classes {
        if val_classes.contains(c) {
            return Err(Error::Data(format!(
                "class {c:?} appears in both the test and validation lists"
            )));
        }
    }
    let mut train: Vec<&CountingSample> = Vec::new();
    let mut val: Vec<&CountingSample> = Vec::new();
    let mut test: Vec<&CountingSample> = Vec::new();
    let mut sorted: Vec<&CountingSample> = samples.iter().collect();
    sorted.sort_by(|a, b| a.sample_id.cmp(&b.sample_id));
    for s in sorted {
        if test_classes.contains(&s.class) {
            test.push(s);
        } else if val_classes.contains(&s.class) {
            val.push(s);
        } else {
            train.push(s);
        }
    }

    // Calibration: seeded choice per dataset, removed from train.
    let mut by_dataset: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, s) in train.iter().enumerate() {
        by_dataset.entry(s.dataset.as_str()).or_default().push(i);
    }
    let mut calib_idx: BTreeSet<usize> = BTreeSet::new();
    for (dataset, indices) in &by_dataset {
        let take = calib_per_dataset.min(indices.len());
        let mut rng = sample_rng(seed, &format!("calibration/{dataset}"));
        for local in seeded_choice(&mut rng, indices.len(), take) {
            calib_idx.insert(indices[local]);
        }
    }
    let calibration: Vec<&CountingSample> = calib_idx.iter().map(|&i| train[i]).collect();
    let train: Vec<&CountingSample> = train
        .iter()
        .enumerate()
        .filter(|(i, _)| !calib_idx.contains(i))
        .map(|(_, s)| *s)
        .collect();

    let collect = |list: &[&CountingSample]| {
        section(
            list.iter().map(|s| s.sample_id.clone()).collect(),
            list.iter().map(|s| s.class.clone()).collect(),
        )
    };
    let manifest = SplitManifest {
        seed,
        train: collect(&train),
        validation: collect(&val),
        test: collect(&test),
        calibration: collect(&calibration),
    };
    validate_manifest(&manifest)?;
    Ok(manifest)
}

/// Checks the manifest invariants: id sets pairwise disjoint and no test
/// class used for conditioning in train or validation.
pub fn validate_manifest(m: &SplitManifest) -> Result<()> {
    let sections = [
        ("train", &m.train),
        ("validation", &m.validation),
        ("test", &m.test),
        ("calibration", &m.calibration),
    ];
    let mut seen: BTreeMap<&str, &str> = BTreeMap::new();
    for (name, sec) in &sections {
        for id in &sec.ids {
            if let Some(prev) = seen.insert(id.as_str(), name) {
                return Err(Error::Invariant {
                    name: "split-disjointness",
                    detail: format!("sample {id:?} appears in both {prev} and {name}"),
                });
            }
        }
    }
    for class in &m.test.classes {
        for (name, sec) in [
            ("train", &m.train),
            ("validation", &m.validation),
            ("calibration", &m.calibration),
        ] {
            if sec.classes.contains(class) {
                return Err(Error::Invariant {
                    name: "test-class-separation",
                    detail: format!("test class {class:?} appears in {name}"),
                });
            }
        }
    }
    Ok(())
}

/// Parses a JSONL annotation file; parse errors carry the line number.
pub fn parse_annotations(path: &Path) -> Result<Vec<DetectionRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let record: DetectionRecord = serde_json::from_str(line).map_err(|e| {
            Error::Data(format!("{}:{}: {e}", path.display(), lineno + 1))
        })?;
        out.push(record);
    }
    Ok(out)
}

/// Serializes curated samples as JSONL, one object per line, in input
/// order.
pub fn write_curated(path: &Path, samples: &[CountingSample]) -> Result<()> {
    let mut text = String::new();
    for s in samples {
        let _ = writeln!(text, "{}", serde_json::to_string(s)?);
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_curated(path: &Path) -> Result<Vec<CountingSample>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let sample: CountingSample = serde_json::from_str(line).map_err(|e| {
            Error::Data(format!("{}:{}: {e}", path.display(), lineno + 1))
        })?;
        out.push(sample);
    }
    Ok(out)
}

/// Knobs of the curation pipeline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurationConfig {
    pub min_instances: usize,
    pub shots: usize,
    pub calib_per_dataset: usize,
    pub test_classes: Vec<String>,
    pub val_classes: Vec<String>,
    pub seed: u64,
}

impl Default for CurationConfig {
    fn default() -> Self {
        CurationConfig {
            min_instances: 4,
            shots: 3,
            calib_per_dataset: 100,
            test_classes: Vec::new(),
            val_classes: Vec::new(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct CurationOutput {
    pub samples: Vec<CountingSample>,
    pub manifest: SplitManifest,
    pub per_class_counts: BTreeMap<String, usize>,
}

/// The whole curation pipeline: convert, remap, decompose, filter, split
/// exemplars, build splits. `inputs` pairs a dataset tag with its records.
pub fn curate(inputs: &[(String, Vec<DetectionRecord>)], cfg: &CurationConfig) -> Result<CurationOutput> {
    let mut all_samples: Vec<CountingSample> = Vec::new();
    for (dataset, records) in inputs {
        let mut instances = convert_detections(records, dataset)?;
        for inst in &mut instances {
            inst.class = remap_fair1m_ships(&inst.class);
        }
        let mut by_image: BTreeMap<String, Vec<PointInstance>> = BTreeMap::new();
        for inst in instances {
            by_image.entry(inst.image_id.clone()).or_default().push(inst);
        }
        for (_, image_instances) in by_image {
            let decomposed = decompose_by_class(&image_instances);
            for sample in filter_min_instances(decomposed, cfg.min_instances) {
                all_samples.push(split_exemplars(&sample, cfg.shots, cfg.seed)?);
            }
        }
    }
    all_samples.sort_by(|a, b| a.sample_id.cmp(&b.sample_id));
    let manifest = build_splits(
        &all_samples,
        &cfg.test_classes,
        &cfg.val_classes,
        cfg.calib_per_dataset,
        cfg.seed,
    )?;
    let mut per_class_counts = BTreeMap::new();
    for s in &all_samples {
        *per_class_counts.entry(s.class.clone()).or_insert(0) += 1;
    }
    Ok(CurationOutput {
        samples: all_samples,
        manifest,
        per_class_counts,
    })
}
