//! On-disk formats, all JSON:
//!
//! - [`AnnotationFile`]: COCO-style images, annotations (boxes as
//!   `[x, y, w, h]`, optional `weight` and `provenance`), categories.
//! - [`DetectionFile`]: a flat COCO result list, optionally tagged with
//!   `run_index` for multi-run output.
//! - [`RunManifest`]: what produced a multi-run detection file.
//! - [`SceneFile`]: how to rebuild scene features, optionally with the grids
//!   embedded.
//!
//! Unknown fields are kept and written back. Loading validates everything
//! before returning, so a bad file never yields a partial dataset.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::accumulator::{AccumulatedDetections, DetectionRun};
use crate::boxgeom::Bbox;
use crate::diffusion::SamplerConfig;
use crate::error::{Error, Result};
use crate::evaluation::GtBox;
use crate::features::FeatureGrid;
use crate::ids::{ClassId, ImageId};
use crate::nms::Detection;
use crate::pseudolabel::{Provenance, PseudoLabel};
use crate::simworld::{self, DomainConfig, Scene};

pub const VOCABULARY: [&str; 4] = ["person", "car", "bus", "truck"];
pub const DEFAULT_MERGES: [(&str, &str); 1] = [("pedestrian", "person")];

type Extra = BTreeMap<String, Value>;

fn parse<T: DeserializeOwned>(text: &str, what: &str) -> Result<T> {
    let de = &mut serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(de).map_err(|e| Error::Parse {
        context: format!("{what} at `{}`", e.path()),
        message: e.inner().to_string(),
    })
}

fn render<T: Serialize>(value: &T, what: &str) -> Result<String> {
    let mut s = serde_json::to_string_pretty(value).map_err(|e| Error::Parse {
        context: what.to_string(),
        message: e.to_string(),
    })?;
    s.push('\n');
    Ok(s)
}

fn finite(values: &[f64], what: impl FnOnce() -> String) -> Result<()> {
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(what()));
    }
    Ok(())
}

fn xywh_box(b: &[f64; 4], what: impl Fn() -> String) -> Result<Bbox> {
    finite(b, &what)?;
    if b[2] < 0.0 || b[3] < 0.0 {
        return Err(Error::Integrity(format!(
            "{}: negative box size {:?}",
            what(),
            b
        )));
    }
    Bbox::from_xywh(b[0], b[1], b[2], b[3])
        .map_err(|e| Error::Integrity(format!("{}: {e}", what())))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub id: ImageId,
    pub width: f64,
    pub height: f64,
    #[serde(flatten)]
    pub extra: Extra,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub id: u64,
    pub image_id: ImageId,
    pub category_id: ClassId,
    pub bbox: [f64; 4],
    /// Absent means 1.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weight: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provenance: Option<Provenance>,
    #[serde(flatten)]
    pub extra: Extra,
}

impl AnnotationRecord {
    pub fn weight(&self) -> f64 {
        self.weight.unwrap_or(1.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Category {
    pub id: ClassId,
    pub name: String,
    #[serde(flatten)]
    pub extra: Extra,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct AnnotationFile {
    pub images: Vec<ImageRecord>,
    pub annotations: Vec<AnnotationRecord>,
    pub categories: Vec<Category>,
    #[serde(flatten)]
    pub extra: Extra,
}

fn categories_for(names: &[String]) -> Vec<Category> {
    names
        .iter()
        .enumerate()
        .map(|(i, n)| Category {
            id: ClassId(i as u32),
            name: n.clone(),
            extra: Extra::new(),
        })
        .collect()
}

fn image_record(id: ImageId, width: f64, height: f64) -> ImageRecord {
    ImageRecord {
        id,
        width,
        height,
        extra: Extra::new(),
    }
}

impl AnnotationFile {
    pub fn from_json(text: &str) -> Result<Self> {
        let f: AnnotationFile = parse(text, "annotation file")?;
        f.validate()?;
        Ok(f)
    }

    pub fn to_json(&self) -> Result<String> {
        self.validate()?;
        render(self, "annotation file")
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    /// Ground truth of simulated scenes.
    pub fn from_scenes(scenes: &[Scene], class_names: &[String]) -> Self {
        let mut next = 1;
        let mut annotations = Vec::new();
        for s in scenes {
            for o in &s.objects {
                annotations.push(AnnotationRecord {
                    id: next,
                    image_id: s.image_id,
                    category_id: o.class_id,
                    bbox: o.bbox.to_xywh(),
                    weight: None,
                    provenance: None,
                    extra: Extra::new(),
                });
                next += 1;
            }
        }
        AnnotationFile {
            images: scenes
                .iter()
                .map(|s| image_record(s.image_id, s.width, s.height))
                .collect(),
            annotations,
            categories: categories_for(class_names),
            extra: Extra::new(),
        }
    }

    /// A weighted pseudo-label dataset over `images`.
    pub fn from_pseudo_labels(
        images: &[(ImageId, f64, f64)],
        labels: &[PseudoLabel],
        class_names: &[String],
    ) -> Self {
        AnnotationFile {
            images: images
                .iter()
                .map(|&(id, w, h)| image_record(id, w, h))
                .collect(),
            annotations: labels
                .iter()
                .enumerate()
                .map(|(i, l)| AnnotationRecord {
                    id: i as u64 + 1,
                    image_id: l.image_id,
                    category_id: l.class_id,
                    bbox: l.bbox.to_xywh(),
                    weight: Some(l.weight),
                    provenance: Some(l.provenance),
                    extra: Extra::new(),
                })
                .collect(),
            categories: categories_for(class_names),
            extra: Extra::new(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut sizes = BTreeMap::new();
        for im in &self.images {
            finite(&[im.width, im.height], || format!("image {}", im.id))?;
            if !(im.width > 0.0 && im.height > 0.0) {
                return Err(Error::Integrity(format!(
                    "image {} has non-positive size",
                    im.id
                )));
            }
            if sizes.insert(im.id, (im.width, im.height)).is_some() {
                return Err(Error::Integrity(format!("duplicate image id {}", im.id)));
            }
        }
        let mut cats = BTreeSet::new();
        for c in &self.categories {
            if !cats.insert(c.id) {
                return Err(Error::Integrity(format!("duplicate category id {}", c.id)));
            }
        }
        let mut ids = BTreeSet::new();
        for a in &self.annotations {
            let what = || format!("annotation {}", a.id);
            if !ids.insert(a.id) {
                return Err(Error::Integrity(format!(
                    "duplicate annotation id {}",
                    a.id
                )));
            }
            let &(w, h) = sizes.get(&a.image_id).ok_or_else(|| {
                Error::Integrity(format!(
                    "{} references missing image {}",
                    what(),
                    a.image_id
                ))
            })?;
            if !cats.contains(&a.category_id) {
                return Err(Error::Integrity(format!(
                    "{} references missing category {}",
                    what(),
                    a.category_id
                )));
            }
            let b = xywh_box(&a.bbox, what)?;
            if b.clip(w, h).area() <= 0.0 && b.area() > 0.0 {
                return Err(Error::Integrity(format!(
                    "{} lies outside image {}",
                    what(),
                    a.image_id
                )));
            }
            if let Some(wt) = a.weight {
                if !(wt > 0.0 && wt <= 1.0) {
                    return Err(Error::Integrity(format!(
                        "{} weight {wt} outside (0, 1]",
                        what()
                    )));
                }
            }
        }
        Ok(())
    }

    /// Category names indexed by id. Ids must be `0..K`.
    pub fn class_names(&self) -> Result<Vec<String>> {
        let mut sorted: Vec<&Category> = self.categories.iter().collect();
        sorted.sort_by_key(|c| c.id);
        for (i, c) in sorted.iter().enumerate() {
            if c.id.index() != i {
                return Err(Error::Integrity(format!(
                    "category ids must be 0..{}, found {}",
                    sorted.len(),
                    c.id
                )));
            }
        }
        Ok(sorted.into_iter().map(|c| c.name.clone()).collect())
    }

    pub fn image_sizes(&self) -> BTreeMap<ImageId, (f64, f64)> {
        self.images
            .iter()
            .map(|i| (i.id, (i.width, i.height)))
            .collect()
    }

    fn boxes(&self) -> Result<BTreeMap<ImageId, Vec<(Bbox, &AnnotationRecord)>>> {
        let sizes = self.image_sizes();
        let mut out: BTreeMap<ImageId, Vec<(Bbox, &AnnotationRecord)>> =
            sizes.keys().map(|k| (*k, Vec::new())).collect();
        for a in &self.annotations {
            let (w, h) = sizes[&a.image_id];
            let b = xywh_box(&a.bbox, || format!("annotation {}", a.id))?.clip(w, h);
            out.get_mut(&a.image_id).expect("validated").push((b, a));
        }
        Ok(out)
    }

    /// Ground truth per image (every image present), boxes clipped to the
    /// image.
    pub fn ground_truth(&self) -> Result<BTreeMap<ImageId, Vec<GtBox>>> {
        Ok(self
            .boxes()?
            .into_iter()
            .map(|(k, v)| {
                (
                    k,
                    v.into_iter()
                        .map(|(bbox, a)| GtBox {
                            bbox,
                            class_id: a.category_id,
                        })
                        .collect(),
                )
            })
            .collect())
    }

    /// Annotations as pseudo-labels, keeping weights.
    pub fn labels(&self) -> Result<Vec<PseudoLabel>> {
        Ok(self
            .boxes()?
            .into_iter()
            .flat_map(|(id, v)| {
                v.into_iter().map(move |(bbox, a)| PseudoLabel {
                    image_id: id,
                    bbox,
                    class_id: a.category_id,
                    weight: a.weight(),
                    provenance: a.provenance.unwrap_or(Provenance::GroundTruth),
                })
            })
            .collect())
    }
}

/// Outcome of [`class_map`].
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RemapReport {
    pub kept: usize,
    /// Dropped annotation counts by source class name.
    pub dropped: BTreeMap<String, usize>,
}

/// Relabel `file` into `target` (new ids `0..target.len()`). A source class
/// named in `merges` maps to its merge target; one whose name is in `target`
/// maps to itself; anything else is dropped and counted.
pub fn class_map(
    file: &AnnotationFile,
    target: &[&str],
    merges: &[(&str, &str)],
) -> Result<(AnnotationFile, RemapReport)> {
    let target_index: BTreeMap<&str, u32> = target
        .iter()
        .enumerate()
        .map(|(i, n)| (*n, i as u32))
        .collect();
    if target_index.len() != target.len() {
        return Err(Error::Config(
            "target vocabulary has duplicate names".into(),
        ));
    }
    let source: BTreeMap<&str, ClassId> = file
        .categories
        .iter()
        .map(|c| (c.name.as_str(), c.id))
        .collect();
    let mut rule: BTreeMap<ClassId, u32> = BTreeMap::new();
    for (from, to) in merges {
        let src = source
            .get(from)
            .ok_or_else(|| Error::UnknownClass(format!("merge source `{from}`")))?;
        let dst = target_index
            .get(to)
            .ok_or_else(|| Error::UnknownClass(format!("merge target `{to}`")))?;
        rule.insert(*src, *dst);
    }
    for c in &file.categories {
        if let Some(&dst) = target_index.get(c.name.as_str()) {
            rule.entry(c.id).or_insert(dst);
        }
    }
    let names: BTreeMap<ClassId, &str> = file
        .categories
        .iter()
        .map(|c| (c.id, c.name.as_str()))
        .collect();
    let mut report = RemapReport::default();
    let mut annotations = Vec::new();
    for a in &file.annotations {
        match rule.get(&a.category_id) {
            Some(&dst) => {
                annotations.push(AnnotationRecord {
                    category_id: ClassId(dst),
                    ..a.clone()
                });
                report.kept += 1;
            }
            None => {
                let name = names
                    .get(&a.category_id)
                    .copied()
                    .unwrap_or("?")
                    .to_string();
                *report.dropped.entry(name).or_default() += 1;
            }
        }
    }
    let target_names: Vec<String> = target.iter().map(|s| s.to_string()).collect();
    let out = AnnotationFile {
        images: file.images.clone(),
        annotations,
        categories: categories_for(&target_names),
        extra: file.extra.clone(),
    };
    out.validate()?;
    Ok((out, report))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionRecord {
    pub image_id: ImageId,
    pub category_id: ClassId,
    pub bbox: [f64; 4],
    pub score: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub run_index: Option<u32>,
    #[serde(flatten)]
    pub extra: Extra,
}

impl DetectionRecord {
    fn detection(&self) -> Result<Detection> {
        let what = || format!("detection on image {}", self.image_id);
        let b = xywh_box(&self.bbox, what)?;
        finite(&[self.score], what)?;
        Detection::new(b, self.category_id, self.score)
            .map_err(|e| Error::Integrity(format!("{}: {e}", what())))
    }

    fn from_detection(image_id: ImageId, run_index: Option<u32>, d: &Detection) -> Self {
        DetectionRecord {
            image_id,
            category_id: d.class_id,
            bbox: d.bbox.to_xywh(),
            score: d.confidence,
            run_index,
            extra: Extra::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct DetectionFile {
    pub records: Vec<DetectionRecord>,
}

impl DetectionFile {
    pub fn from_json(text: &str) -> Result<Self> {
        let f: DetectionFile = parse(text, "detection file")?;
        f.validate()?;
        Ok(f)
    }

    pub fn to_json(&self) -> Result<String> {
        self.validate()?;
        render(self, "detection file")
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        for r in &self.records {
            r.detection()?;
            if r.run_index == Some(0) {
                return Err(Error::Integrity(format!(
                    "detection on image {}: run_index must be >= 1",
                    r.image_id
                )));
            }
        }
        Ok(())
    }

    pub fn from_runs(runs: &[DetectionRun]) -> Self {
        DetectionFile {
            records: runs
                .iter()
                .flat_map(|r| {
                    r.detections
                        .iter()
                        .map(|d| DetectionRecord::from_detection(r.image_id, Some(r.run_index), d))
                })
                .collect(),
        }
    }

    pub fn from_accumulated(acc: &[AccumulatedDetections]) -> Self {
        DetectionFile {
            records: acc
                .iter()
                .flat_map(|a| {
                    a.detections
                        .iter()
                        .map(|d| DetectionRecord::from_detection(a.image_id, None, d))
                })
                .collect(),
        }
    }

    /// Detections per image, ignoring run tags, in file order.
    pub fn by_image(&self) -> Result<BTreeMap<ImageId, Vec<Detection>>> {
        let mut out: BTreeMap<ImageId, Vec<Detection>> = BTreeMap::new();
        for r in &self.records {
            out.entry(r.image_id).or_default().push(r.detection()?);
        }
        Ok(out)
    }

    /// Runs per image in run order. Untagged records belong to run 1.
    pub fn runs(&self) -> Result<BTreeMap<ImageId, Vec<DetectionRun>>> {
        let mut grouped: BTreeMap<ImageId, BTreeMap<u32, Vec<Detection>>> = BTreeMap::new();
        for r in &self.records {
            grouped
                .entry(r.image_id)
                .or_default()
                .entry(r.run_index.unwrap_or(1))
                .or_default()
                .push(r.detection()?);
        }
        Ok(grouped
            .into_iter()
            .map(|(id, runs)| {
                let runs = runs
                    .into_iter()
                    .map(|(run_index, detections)| DetectionRun {
                        image_id: id,
                        run_index,
                        detections,
                    })
                    .collect();
                (id, runs)
            })
            .collect())
    }
}

/// Provenance of a command's output.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Metadata {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub seed: u64,
    /// SHA-256 of the canonical JSON of the command's configuration.
    pub config_hash: String,
    pub config: Value,
    #[serde(flatten)]
    pub extra: Extra,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub checkpoint: String,
    pub n_runs: usize,
    /// Base seed of each run, in run order.
    pub seeds: Vec<u64>,
    pub sampler: SamplerConfig,
    pub metadata: Metadata,
    #[serde(flatten)]
    pub extra: Extra,
}

impl RunManifest {
    pub fn validate(&self) -> Result<()> {
        if self.seeds.len() != self.n_runs {
            return Err(Error::Integrity(format!(
                "manifest lists {} seeds for {} runs",
                self.seeds.len(),
                self.n_runs
            )));
        }
        self.sampler
            .validate()
            .map_err(|e| Error::Integrity(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let m: RunManifest = parse(text, "run manifest")?;
        m.validate()?;
        Ok(m)
    }

    pub fn to_json(&self) -> Result<String> {
        self.validate()?;
        render(self, "run manifest")
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneRecord {
    pub image_id: ImageId,
    /// When absent the grid is regenerated from the domain.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub features: Option<FeatureGrid>,
}

/// Scene features for a set of images of one simulated domain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneFile {
    pub domain: DomainConfig,
    pub scenes: Vec<SceneRecord>,
    #[serde(flatten)]
    pub extra: Extra,
}

impl SceneFile {
    pub fn new(domain: &DomainConfig, scenes: &[Scene], embed_features: bool) -> Self {
        SceneFile {
            domain: domain.clone(),
            scenes: scenes
                .iter()
                .map(|s| SceneRecord {
                    image_id: s.image_id,
                    features: embed_features.then(|| s.features.clone()),
                })
                .collect(),
            extra: Extra::new(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.domain
            .validate()
            .map_err(|e| Error::Integrity(e.to_string()))?;
        let mut seen = BTreeSet::new();
        for s in &self.scenes {
            if s.image_id.0 == 0 || !seen.insert(s.image_id) {
                return Err(Error::Integrity(format!(
                    "scene id {} is zero or repeated",
                    s.image_id
                )));
            }
            if let Some(g) = &s.features {
                g.validate()?;
                if g.num_classes() != self.domain.classes.len() {
                    return Err(Error::Integrity(format!(
                        "scene {}: feature classes do not match the domain",
                        s.image_id
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let f: SceneFile = parse(text, "scene file")?;
        f.validate()?;
        Ok(f)
    }

    pub fn to_json(&self) -> Result<String> {
        self.validate()?;
        render(self, "scene file")
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    /// Full scenes, features taken from the file when embedded.
    pub fn scenes(&self) -> Result<Vec<Scene>> {
        self.scenes
            .iter()
            .map(|r| {
                let mut s = simworld::scene(&self.domain, r.image_id)?;
                if let Some(g) = &r.features {
                    s.features = g.clone();
                }
                Ok(s)
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{"images":[{"id":1,"width":100,"height":80}],"annotations":[],"categories":[{"id":0,"name":"person"}]}"#;

    #[test]
    fn minimal_round_trip() {
        let f = AnnotationFile::from_json(MINIMAL).unwrap();
        assert_eq!(AnnotationFile::from_json(&f.to_json().unwrap()).unwrap(), f);
    }

    #[test]
    fn unknown_fields_survive() {
        let text = r#"{"info":{"year":2024},"images":[{"id":1,"width":100,"height":80,"file_name":"a.jpg"}],
            "annotations":[{"id":5,"image_id":1,"category_id":0,"bbox":[1,2,3,4],"iscrowd":0,"weight":0.75}],
            "categories":[{"id":0,"name":"person","supercategory":"human"}]}"#;
        let f = AnnotationFile::from_json(text).unwrap();
        assert_eq!(f.images[0].extra["file_name"], "a.jpg");
        assert_eq!(f.annotations[0].extra["iscrowd"], 0);
        assert_eq!(f.annotations[0].weight(), 0.75);
        let back = AnnotationFile::from_json(&f.to_json().unwrap()).unwrap();
        assert_eq!(back, f);
        assert!(back.to_json().unwrap().contains("supercategory"));
    }

    #[test]
    fn integrity_errors_name_the_reference() {
        let bad = MINIMAL.replace(
            r#""annotations":[]"#,
            r#""annotations":[{"id":1,"image_id":9,"category_id":0,"bbox":[0,0,1,1]}]"#,
        );
        match AnnotationFile::from_json(&bad) {
            Err(Error::Integrity(m)) => assert!(m.contains("image 9"), "{m}"),
            other => panic!("{other:?}"),
        }
        let neg = MINIMAL.replace(
            r#""annotations":[]"#,
            r#""annotations":[{"id":1,"image_id":1,"category_id":0,"bbox":[0,0,-1,1]}]"#,
        );
        assert!(matches!(
            AnnotationFile::from_json(&neg),
            Err(Error::Integrity(_))
        ));
        let cat = MINIMAL.replace(
            r#""annotations":[]"#,
            r#""annotations":[{"id":1,"image_id":1,"category_id":3,"bbox":[0,0,1,1]}]"#,
        );
        assert!(matches!(
            AnnotationFile::from_json(&cat),
            Err(Error::Integrity(_))
        ));
    }

    #[test]
    fn parse_errors_carry_the_path() {
        let text = MINIMAL.replace(r#""width":100"#, r#""width":"wide""#);
        match AnnotationFile::from_json(&text) {
            Err(Error::Parse { context, message }) => {
                assert!(context.contains("images[0].width"), "{context}");
                assert!(message.contains("line"), "{message}");
            }
            other => panic!("{other:?}"),
        }
    }

    fn vocab_file(names: &[&str]) -> AnnotationFile {
        let cats: Vec<String> = names.iter().map(|s| s.to_string()).collect();
        let mut f = AnnotationFile {
            images: vec![image_record(ImageId(1), 100.0, 100.0)],
            categories: categories_for(&cats),
            ..AnnotationFile::default()
        };
        for (i, _) in names.iter().enumerate() {
            f.annotations.push(AnnotationRecord {
                id: i as u64 + 1,
                image_id: ImageId(1),
                category_id: ClassId(i as u32),
                bbox: [1.0, 1.0, 5.0, 5.0],
                weight: None,
                provenance: None,
                extra: Extra::new(),
            });
        }
        f
    }

    #[test]
    fn vocabulary_ids_are_stable() {
        let f = vocab_file(&VOCABULARY);
        let back = AnnotationFile::from_json(&f.to_json().unwrap()).unwrap();
        assert_eq!(
            back.class_names().unwrap(),
            VOCABULARY.map(String::from).to_vec()
        );
    }

    #[test]
    fn class_mapping() {
        let f = vocab_file(&["pedestrian", "person", "car", "bicycle", "bus", "truck"]);
        let (out, report) = class_map(&f, &VOCABULARY, &DEFAULT_MERGES).unwrap();
        assert_eq!(
            out.class_names().unwrap(),
            VOCABULARY.map(String::from).to_vec()
        );
        let persons = out
            .annotations
            .iter()
            .filter(|a| a.category_id == ClassId(0))
            .count();
        assert_eq!(persons, 2);
        assert_eq!(report.kept, 5);
        assert_eq!(report.dropped, [("bicycle".to_string(), 1)].into());

        let g = vocab_file(&VOCABULARY);
        let (same, r) = class_map(&g, &VOCABULARY, &[]).unwrap();
        assert_eq!(same, g);
        assert!(r.dropped.is_empty());

        assert!(matches!(
            class_map(&g, &VOCABULARY, &DEFAULT_MERGES),
            Err(Error::UnknownClass(_))
        ));
    }

    #[test]
    fn detection_runs_round_trip() {
        let d = |x: f64, c: f64| {
            Detection::new(Bbox::from_xywh(x, 0.0, 4.0, 4.0).unwrap(), ClassId(1), c).unwrap()
        };
        let runs = vec![
            DetectionRun {
                image_id: ImageId(2),
                run_index: 1,
                detections: vec![d(0.0, 0.5), d(1.0, 0.25)],
            },
            DetectionRun {
                image_id: ImageId(2),
                run_index: 2,
                detections: vec![d(3.0, 0.125)],
            },
        ];
        let f = DetectionFile::from_runs(&runs);
        let back = DetectionFile::from_json(&f.to_json().unwrap()).unwrap();
        assert_eq!(back, f);
        assert_eq!(back.runs().unwrap()[&ImageId(2)], runs);
        let bad = f.to_json().unwrap().replace("0.5", "1.5");
        assert!(DetectionFile::from_json(&bad).is_err());
    }

    #[test]
    fn manifest_seed_count() {
        let m = RunManifest {
            checkpoint: "m.json".into(),
            n_runs: 2,
            seeds: vec![1, 2],
            sampler: SamplerConfig::default(),
            metadata: Metadata::default(),
            extra: Extra::new(),
        };
        assert_eq!(RunManifest::from_json(&m.to_json().unwrap()).unwrap(), m);
        let bad = RunManifest {
            seeds: vec![1],
            ..m
        };
        assert!(matches!(bad.validate(), Err(Error::Integrity(_))));
    }

    #[test]
    fn scene_file_round_trip() {
        let mut domain = DomainConfig::preset("source").unwrap();
        domain.grid = 8;
        let scenes = simworld::generate_domain(&domain, 2).unwrap();
        for embed in [false, true] {
            let f = SceneFile::new(&domain, &scenes, embed);
            let back = SceneFile::from_json(&f.to_json().unwrap()).unwrap();
            assert_eq!(back, f);
            assert_eq!(back.scenes().unwrap(), scenes);
        }
    }

    #[test]
    fn non_finite_is_rejected() {
        let mut f = AnnotationFile::from_json(MINIMAL).unwrap();
        f.images[0].width = f64::NAN;
        assert!(matches!(f.to_json(), Err(Error::NonFinite(_))));
    }
}
