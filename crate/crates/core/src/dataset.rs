//! On-disk dataset layout, loading, and the synthetic generator.
//!
//! ```text
//! <root>/manifest.json        name, dims, image entries, region categories
//! <root>/partscheme.json      PartScheme JSON
//! <root>/tags.json            {"<id>": ["tag", ...], ...}
//! <root>/features/<id>.f32    "PVSEF1", u32 I, J, D, then I·J·D f32 (LE)
//! <root>/segmentation/<id>.seg "PVSEG1" label map
//! ```

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::embedding::{GridFeatureTensor, ModelParams, TagVocabulary};
use crate::error::{Error, Result};
use crate::par;
use crate::partmap::{
    compute_grid_part_fractions, compute_grid_weight_map, GridPartFractions, GridWeightMap, PartScheme,
    SegmentationMap,
};
use crate::train::TrainingSample;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const SCHEME_FILE: &str = "partscheme.json";
pub const TAGS_FILE: &str = "tags.json";
const FEATURE_MAGIC: &[u8; 6] = b"PVSEF1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureDims {
    #[serde(rename = "I")]
    pub rows: usize,
    #[serde(rename = "J")]
    pub cols: usize,
    #[serde(rename = "D")]
    pub dim: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PixelDims {
    pub height: usize,
    pub width: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageEntry {
    pub id: String,
    pub features: PathBuf,
    pub segmentation: PathBuf,
}

/// A named group of parts and the tags that describe them.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegionCategory {
    pub name: String,
    pub parts: Vec<String>,
    pub tags: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub name: String,
    pub feature_dims: FeatureDims,
    pub pixel_dims: PixelDims,
    pub part_scheme: PathBuf,
    pub tags: PathBuf,
    pub images: Vec<ImageEntry>,
    #[serde(default)]
    pub region_categories: Vec<RegionCategory>,
}

pub fn features_to_bytes(feat: &GridFeatureTensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(18 + 4 * feat.values().len());
    out.extend_from_slice(FEATURE_MAGIC);
    for n in [feat.rows(), feat.cols(), feat.dim()] {
        out.extend_from_slice(&(n as u32).to_le_bytes());
    }
    for &v in feat.values() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

pub fn features_from_bytes(bytes: &[u8]) -> std::result::Result<GridFeatureTensor, String> {
    if bytes.len() < 18 || &bytes[..6] != FEATURE_MAGIC {
        return Err("missing PVSEF1 header".into());
    }
    let dim = |k: usize| u32::from_le_bytes(bytes[6 + 4 * k..10 + 4 * k].try_into().unwrap()) as usize;
    let (rows, cols, d) = (dim(0), dim(1), dim(2));
    let body = &bytes[18..];
    let count = rows
        .checked_mul(cols)
        .and_then(|n| n.checked_mul(d))
        .ok_or("feature dimensions overflow")?;
    if body.len() != 4 * count {
        return Err(format!(
            "{rows}x{cols}x{d} features need {} bytes, found {}",
            4 * count,
            body.len()
        ));
    }
    let values = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    GridFeatureTensor::new(rows, cols, d, values).map_err(|e| e.to_string())
}

pub fn read_features(path: &Path) -> Result<GridFeatureTensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    features_from_bytes(&bytes).map_err(|r| Error::format(path, r))
}

pub fn write_features(feat: &GridFeatureTensor, path: &Path) -> Result<()> {
    fs::write(path, features_to_bytes(feat)).map_err(|e| Error::io(path, e))
}

/// A fully validated dataset held in memory.
#[derive(Clone, Debug)]
pub struct Dataset {
    root: PathBuf,
    manifest: DatasetManifest,
    scheme: PartScheme,
    features: Vec<GridFeatureTensor>,
    segmentations: Vec<SegmentationMap>,
    tags: Vec<Vec<String>>,
    vocab: TagVocabulary,
    id_index: HashMap<String, usize>,
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
}

fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("serializable");
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

/// Loads and validates every file. Any failure rejects the whole dataset.
pub fn load_dataset(root: &Path) -> Result<Dataset> {
    let manifest_path = root.join(MANIFEST_FILE);
    if !manifest_path.is_file() {
        return Err(Error::format(&manifest_path, "manifest missing"));
    }
    let manifest: DatasetManifest = read_json(&manifest_path)?;
    let scheme = PartScheme::load(&root.join(&manifest.part_scheme))?;
    let tags_path = root.join(&manifest.tags);
    let mut tag_map: BTreeMap<String, Vec<String>> = read_json(&tags_path)?;

    let FeatureDims { rows, cols, dim } = manifest.feature_dims;
    let PixelDims { height, width } = manifest.pixel_dims;
    if rows == 0 || cols == 0 || dim == 0 || rows > height || cols > width {
        return Err(Error::format(
            &manifest_path,
            format!("grid {rows}x{cols}x{dim} does not fit {height}x{width} pixels"),
        ));
    }
    if manifest.images.is_empty() {
        return Err(Error::format(&manifest_path, "no images"));
    }

    let mut id_index = HashMap::with_capacity(manifest.images.len());
    for (i, e) in manifest.images.iter().enumerate() {
        if e.id.is_empty() || id_index.insert(e.id.clone(), i).is_some() {
            return Err(Error::format(&manifest_path, format!("empty or duplicate image id '{}'", e.id)));
        }
    }
    if let Some(extra) = tag_map.keys().find(|k| !id_index.contains_key(*k)) {
        return Err(Error::format(&tags_path, format!("tags for unknown image '{extra}'")));
    }
    let mut tags = Vec::with_capacity(manifest.images.len());
    for e in &manifest.images {
        let list = tag_map.remove(&e.id).unwrap_or_default();
        if list.iter().any(String::is_empty) {
            return Err(Error::format(&tags_path, format!("empty tag on image '{}'", e.id)));
        }
        tags.push(list);
    }

    let loaded = par::map(&manifest.images, |e| -> Result<(GridFeatureTensor, SegmentationMap)> {
        let fpath = root.join(&e.features);
        let feat = read_features(&fpath)?;
        if (feat.rows(), feat.cols(), feat.dim()) != (rows, cols, dim) {
            return Err(Error::format(
                &fpath,
                format!(
                    "features are {}x{}x{}, manifest says {rows}x{cols}x{dim}",
                    feat.rows(),
                    feat.cols(),
                    feat.dim()
                ),
            ));
        }
        let spath = root.join(&e.segmentation);
        let seg = SegmentationMap::read(&spath)?;
        if (seg.height(), seg.width()) != (height, width) {
            return Err(Error::format(
                &spath,
                format!(
                    "segmentation is {}x{}, manifest says {height}x{width}",
                    seg.height(),
                    seg.width()
                ),
            ));
        }
        seg.validate(&scheme).map_err(|e| Error::format(&spath, e.to_string()))?;
        Ok((feat, seg))
    });
    let mut features = Vec::with_capacity(loaded.len());
    let mut segmentations = Vec::with_capacity(loaded.len());
    for r in loaded {
        let (f, s) = r?;
        features.push(f);
        segmentations.push(s);
    }

    let vocab = TagVocabulary::from_tag_lists(tags.iter().map(Vec::as_slice))
        .map_err(|e| Error::format(&tags_path, e.to_string()))?;
    for cat in &manifest.region_categories {
        for p in &cat.parts {
            scheme.part_index(p).ok_or_else(|| {
                Error::format(&manifest_path, format!("category '{}' names unknown part '{p}'", cat.name))
            })?;
        }
        for t in &cat.tags {
            vocab
                .index_of(t)
                .map_err(|_| Error::format(&manifest_path, format!("category '{}' names unknown tag '{t}'", cat.name)))?;
        }
    }

    Ok(Dataset {
        root: root.to_path_buf(),
        manifest,
        scheme,
        features,
        segmentations,
        tags,
        vocab,
        id_index,
    })
}

impl Dataset {
    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn manifest(&self) -> &DatasetManifest {
        &self.manifest
    }

    pub fn name(&self) -> &str {
        &self.manifest.name
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn scheme(&self) -> &PartScheme {
        &self.scheme
    }

    pub fn vocab(&self) -> &TagVocabulary {
        &self.vocab
    }

    pub fn feature_dims(&self) -> FeatureDims {
        self.manifest.feature_dims
    }

    pub fn pixel_dims(&self) -> PixelDims {
        self.manifest.pixel_dims
    }

    pub fn ids(&self) -> impl ExactSizeIterator<Item = &str> {
        self.manifest.images.iter().map(|e| e.id.as_str())
    }

    pub fn id(&self, idx: usize) -> &str {
        &self.manifest.images[idx].id
    }

    pub fn index_of(&self, id: &str) -> Result<usize> {
        self.id_index
            .get(id)
            .copied()
            .ok_or_else(|| Error::UnknownImage(id.to_string()))
    }

    pub fn features(&self, idx: usize) -> &GridFeatureTensor {
        &self.features[idx]
    }

    pub fn segmentation(&self, idx: usize) -> &SegmentationMap {
        &self.segmentations[idx]
    }

    pub fn tags(&self, idx: usize) -> &[String] {
        &self.tags[idx]
    }

    pub fn has_tag(&self, idx: usize, tag: &str) -> bool {
        self.tags[idx].iter().any(|t| t == tag)
    }

    pub fn region_categories(&self) -> &[RegionCategory] {
        &self.manifest.region_categories
    }

    /// Total number of (image, tag) attachments.
    pub fn attachment_count(&self) -> usize {
        self.tags.iter().map(Vec::len).sum()
    }

    pub fn grid_weight_maps(&self) -> Result<Vec<GridWeightMap>> {
        let FeatureDims { rows, cols, .. } = self.manifest.feature_dims;
        par::map(&self.segmentations, |s| compute_grid_weight_map(s, &self.scheme, rows, cols))
            .into_iter()
            .collect()
    }

    pub fn grid_part_fractions(&self) -> Result<Vec<GridPartFractions>> {
        let FeatureDims { rows, cols, .. } = self.manifest.feature_dims;
        par::map(&self.segmentations, |s| compute_grid_part_fractions(s, &self.scheme, rows, cols))
            .into_iter()
            .collect()
    }

    /// Pooled training pairs with tag indices taken from `vocab`.
    /// Images without tags are left out.
    pub fn training_samples(&self, vocab: &TagVocabulary) -> Result<Vec<TrainingSample>> {
        let gwms = self.grid_weight_maps()?;
        let tagged: Vec<usize> = (0..self.len()).filter(|&i| !self.tags[i].is_empty()).collect();
        par::map(&tagged, |&i| {
            TrainingSample::new(&self.features[i], &gwms[i], vocab.indices_of(&self.tags[i])?)
        })
        .into_iter()
        .collect()
    }
}

/// One disagreement between a model and a dataset.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct Mismatch {
    pub field: String,
    pub model: String,
    pub dataset: String,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct CompatReport {
    pub mismatches: Vec<Mismatch>,
}

impl CompatReport {
    pub fn is_ok(&self) -> bool {
        self.mismatches.is_empty()
    }

    pub fn into_result(self) -> Result<()> {
        if self.is_ok() {
            return Ok(());
        }
        let text = self
            .mismatches
            .iter()
            .map(|m| format!("{} (model {}, dataset {})", m.field, m.model, m.dataset))
            .collect::<Vec<_>>()
            .join("; ");
        Err(Error::Incompatible(text))
    }
}

/// Checks `D`, `I`, `J`, the part scheme, and that the model vocabulary
/// contains every dataset tag in the same relative order.
pub fn validate_model_dataset_compat(model: &ModelParams, data: &Dataset) -> CompatReport {
    let mut report = CompatReport::default();
    let mut check = |field: &str, m: String, d: String| {
        if m != d {
            report.mismatches.push(Mismatch {
                field: field.into(),
                model: m,
                dataset: d,
            });
        }
    };
    let dims = data.feature_dims();
    check("D", model.feature_dim().to_string(), dims.dim.to_string());
    check("I", model.grid().0.to_string(), dims.rows.to_string());
    check("J", model.grid().1.to_string(), dims.cols.to_string());
    if model.scheme() != data.scheme() {
        check("scheme", model.scheme().to_json(), data.scheme().to_json());
    }

    let mut missing = Vec::new();
    let mut positions = Vec::new();
    for t in data.vocab().tags() {
        match model.vocab().index_of(t) {
            Ok(i) => positions.push(i),
            Err(_) => missing.push(t.as_str()),
        }
    }
    if !missing.is_empty() {
        check("vocabulary", "missing tags".into(), missing.join(","));
    }
    if let Some(w) = positions.windows(2).find(|w| w[0] > w[1]) {
        check(
            "vocabulary order",
            format!(
                "'{}' before '{}'",
                model.vocab().tags()[w[1]],
                model.vocab().tags()[w[0]]
            ),
            format!(
                "'{}' before '{}'",
                model.vocab().tags()[w[0]],
                model.vocab().tags()[w[1]]
            ),
        );
    }
    report
}

/// Parameters of the synthetic generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub images: usize,
    pub parts: usize,
    pub tags_per_part: usize,
    pub abstract_tags: usize,
    pub sigma: f64,
    pub seed: u64,
    pub grid_rows: usize,
    pub grid_cols: usize,
    pub feature_dim: usize,
    pub height: usize,
    pub width: usize,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            images: 512,
            parts: 4,
            tags_per_part: 16,
            abstract_tags: 4,
            sigma: 0.1,
            seed: 0,
            grid_rows: 8,
            grid_cols: 8,
            feature_dim: 32,
            height: 64,
            width: 64,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let sizes = [
            self.images,
            self.parts,
            self.tags_per_part,
            self.grid_rows,
            self.grid_cols,
            self.feature_dim,
            self.height,
            self.width,
        ];
        if sizes.contains(&0) {
            return Err(Error::arg("synthetic sizes must be positive"));
        }
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return Err(Error::arg(format!("noise level {} must be finite and >= 0", self.sigma)));
        }
        if self.grid_rows > self.height || self.grid_cols > self.width || self.parts > self.height {
            return Err(Error::arg("grid or part bands exceed the pixel size"));
        }
        if self.parts > 255 {
            return Err(Error::arg("at most 255 parts fit in u8 labels"));
        }
        Ok(())
    }

    /// `pvse4` for four parts, otherwise `part-1 .. part-L`.
    pub fn scheme(&self) -> Result<PartScheme> {
        if self.parts == 4 {
            Ok(PartScheme::pvse4())
        } else {
            PartScheme::numbered(self.parts)
        }
    }

    /// Pixel rows covered by part `p`.
    pub fn band(&self, p: usize) -> std::ops::Range<usize> {
        p * self.height / self.parts..(p + 1) * self.height / self.parts
    }
}

pub fn concrete_tag_name(scheme: &PartScheme, part: usize, item: usize) -> String {
    format!("{}-item-{item:02}", scheme.parts()[part])
}

pub fn abstract_tag_name(k: usize) -> String {
    format!("style-{k:02}")
}

/// Parts joined by abstract tag `k`, and the item parities it requires.
pub fn abstract_rule(k: usize, parts: usize) -> ((usize, usize), (usize, usize)) {
    let p1 = k % parts;
    let p2 = (k + 1) % parts;
    ((p1, (k / parts) % 2), (p2, (k / (2 * parts)) % 2))
}

fn unit_gaussian(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-12 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

/// Writes a seeded synthetic dataset to `root` and returns its manifest.
///
/// Part `p` fills the full-width pixel band `band(p)`. Each image picks one
/// item per part; cells whose dominant part is `p` get that item's unit
/// prototype plus `N(0, σ²)` noise, stored as `f32`. Abstract tag `k` fires
/// when the items of its two parts have the parities given by
/// [`abstract_rule`].
pub fn generate_synthetic(spec: &SynthSpec, root: &Path) -> Result<DatasetManifest> {
    spec.validate()?;
    let scheme = spec.scheme()?;
    let l = spec.parts;
    let d = spec.feature_dim;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let noise = Normal::new(0.0, spec.sigma).map_err(|e| Error::arg(e.to_string()))?;

    let prototypes: Vec<Vec<Vec<f64>>> = (0..l)
        .map(|_| (0..spec.tags_per_part).map(|_| unit_gaussian(&mut rng, d)).collect())
        .collect();

    let mut labels = vec![0u8; spec.height * spec.width];
    for p in 0..l {
        let lab = scheme
            .representative_label(p)
            .ok_or_else(|| Error::arg(format!("part {p} has no label")))?;
        for r in spec.band(p) {
            labels[r * spec.width..(r + 1) * spec.width].fill(lab);
        }
    }
    let seg = SegmentationMap::new(spec.height, spec.width, labels)?;
    let fractions = compute_grid_part_fractions(&seg, &scheme, spec.grid_rows, spec.grid_cols)?;

    for dir in ["features", "segmentation"] {
        let p = root.join(dir);
        fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
    }

    let width = spec.images.saturating_sub(1).to_string().len().max(4);
    let mut entries = Vec::with_capacity(spec.images);
    let mut tag_map = BTreeMap::new();
    for n in 0..spec.images {
        let id = format!("img-{n:0width$}");
        let items: Vec<usize> = (0..l).map(|_| rng.gen_range(0..spec.tags_per_part)).collect();
        let mut feat = GridFeatureTensor::zeros(spec.grid_rows, spec.grid_cols, d);
        for i in 0..spec.grid_rows {
            for j in 0..spec.grid_cols {
                let base = fractions.dominant_part(i, j).map(|p| &prototypes[p][items[p]]);
                for (k, v) in feat.cell_mut(i, j).iter_mut().enumerate() {
                    let x = base.map_or(0.0, |b| b[k]) + noise.sample(&mut rng);
                    *v = x as f32 as f64;
                }
            }
        }
        let mut tags: Vec<String> = (0..l).map(|p| concrete_tag_name(&scheme, p, items[p])).collect();
        for k in 0..spec.abstract_tags {
            let ((p1, b1), (p2, b2)) = abstract_rule(k, l);
            if items[p1] % 2 == b1 && items[p2] % 2 == b2 {
                tags.push(abstract_tag_name(k));
            }
        }

        let fpath = PathBuf::from("features").join(format!("{id}.f32"));
        let spath = PathBuf::from("segmentation").join(format!("{id}.seg"));
        write_features(&feat, &root.join(&fpath))?;
        seg.write(&root.join(&spath))?;
        tag_map.insert(id.clone(), tags);
        entries.push(ImageEntry {
            id,
            features: fpath,
            segmentation: spath,
        });
    }

    let attached: std::collections::BTreeSet<&String> = tag_map.values().flatten().collect();
    let region_categories = (0..l)
        .map(|p| RegionCategory {
            name: scheme.parts()[p].clone(),
            parts: vec![scheme.parts()[p].clone()],
            tags: (0..spec.tags_per_part)
                .map(|t| concrete_tag_name(&scheme, p, t))
                .filter(|t| attached.contains(t))
                .collect(),
        })
        .collect();

    let manifest = DatasetManifest {
        name: format!("synthetic-{}", spec.seed),
        feature_dims: FeatureDims {
            rows: spec.grid_rows,
            cols: spec.grid_cols,
            dim: d,
        },
        pixel_dims: PixelDims {
            height: spec.height,
            width: spec.width,
        },
        part_scheme: SCHEME_FILE.into(),
        tags: TAGS_FILE.into(),
        images: entries,
        region_categories,
    };
    scheme.save(&root.join(SCHEME_FILE))?;
    write_json(&tag_map, &root.join(TAGS_FILE))?;
    write_json(&manifest, &root.join(MANIFEST_FILE))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec(seed: u64) -> SynthSpec {
        SynthSpec {
            images: 24,
            tags_per_part: 3,
            abstract_tags: 2,
            feature_dim: 6,
            seed,
            ..SynthSpec::default()
        }
    }

    #[test]
    fn feature_bytes_layout() {
        let feat = GridFeatureTensor::new(1, 2, 2, vec![1.0, -2.0, 0.5, 0.25]).unwrap();
        let bytes = features_to_bytes(&feat);
        assert_eq!(&bytes[..6], b"PVSEF1");
        assert_eq!(&bytes[6..18], &[1, 0, 0, 0, 2, 0, 0, 0, 2, 0, 0, 0]);
        assert_eq!(&bytes[18..22], &1.0f32.to_le_bytes());
        assert_eq!(&bytes[22..26], &(-2.0f32).to_le_bytes());
        assert_eq!(features_from_bytes(&bytes).unwrap(), feat);
        assert!(features_from_bytes(&bytes[..bytes.len() - 1]).is_err());
        assert!(features_from_bytes(b"PVSEF0\0\0\0\0\0\0\0\0\0\0\0\0").is_err());
    }

    #[test]
    fn empty_dir_reports_missing_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let err = load_dataset(dir.path()).unwrap_err();
        assert!(err.to_string().contains("manifest missing"), "{err}");
    }

    #[test]
    fn generate_then_load_roundtrips_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let spec = small_spec(3);
        generate_synthetic(&spec, dir.path()).unwrap();
        let data = load_dataset(dir.path()).unwrap();
        assert_eq!(data.len(), 24);
        for i in 0..data.len() {
            let path = dir.path().join(&data.manifest().images[i].features);
            let raw = fs::read(path).unwrap();
            assert_eq!(features_to_bytes(data.features(i)), raw);
        }
        let total: u32 = data.vocab().frequencies().iter().sum();
        assert_eq!(total as usize, data.attachment_count());
    }

    #[test]
    fn same_seed_gives_identical_bytes() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        generate_synthetic(&small_spec(9), a.path()).unwrap();
        generate_synthetic(&small_spec(9), b.path()).unwrap();
        for entry in walk(a.path()) {
            let rel = entry.strip_prefix(a.path()).unwrap();
            assert_eq!(fs::read(&entry).unwrap(), fs::read(b.path().join(rel)).unwrap(), "{rel:?}");
        }
    }

    fn walk(dir: &Path) -> Vec<PathBuf> {
        let mut out = Vec::new();
        for e in fs::read_dir(dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                out.extend(walk(&p));
            } else {
                out.push(p);
            }
        }
        out
    }

    #[test]
    fn bands_follow_declared_layout() {
        let spec = SynthSpec::default();
        for p in 0..4 {
            assert_eq!(spec.band(p), 16 * p..16 * (p + 1));
        }
        let dir = tempfile::tempdir().unwrap();
        generate_synthetic(&small_spec(1), dir.path()).unwrap();
        let data = load_dataset(dir.path()).unwrap();
        let seg = data.segmentation(0);
        let scheme = data.scheme();
        for r in 0..64 {
            let want = scheme.representative_label(r / 16).unwrap();
            assert!((0..64).all(|c| seg.label(r, c) == want));
        }
    }

    #[test]
    fn noiseless_items_share_features() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SynthSpec {
            sigma: 0.0,
            ..small_spec(5)
        };
        generate_synthetic(&spec, dir.path()).unwrap();
        let data = load_dataset(dir.path()).unwrap();
        let tag = "upper-body-item-01";
        let with: Vec<usize> = (0..data.len()).filter(|&i| data.has_tag(i, tag)).collect();
        assert!(with.len() >= 2);
        // upper-body covers grid rows 2 and 3
        for i in 2..4 {
            for j in 0..8 {
                let first = data.features(with[0]).cell(i, j);
                for &w in &with[1..] {
                    assert_eq!(data.features(w).cell(i, j), first);
                }
            }
        }
    }

    #[test]
    fn abstract_tags_follow_rule() {
        let dir = tempfile::tempdir().unwrap();
        generate_synthetic(&small_spec(11), dir.path()).unwrap();
        let data = load_dataset(dir.path()).unwrap();
        for i in 0..data.len() {
            let item = |p: usize| -> usize {
                let prefix = format!("{}-item-", data.scheme().parts()[p]);
                let t = data.tags(i).iter().find(|t| t.starts_with(&prefix)).unwrap();
                t[prefix.len()..].parse().unwrap()
            };
            for k in 0..2 {
                let ((p1, b1), (p2, b2)) = abstract_rule(k, 4);
                let fires = item(p1) % 2 == b1 && item(p2) % 2 == b2;
                assert_eq!(data.has_tag(i, &abstract_tag_name(k)), fires);
            }
        }
    }

    #[test]
    fn corrupt_file_rejects_dataset() {
        let dir = tempfile::tempdir().unwrap();
        generate_synthetic(&small_spec(2), dir.path()).unwrap();
        let victim = dir.path().join("features/img-0007.f32");
        let bytes = fs::read(&victim).unwrap();
        fs::write(&victim, &bytes[..bytes.len() - 4]).unwrap();
        let err = load_dataset(dir.path()).unwrap_err();
        assert!(err.to_string().contains("img-0007.f32"), "{err}");
    }

    #[test]
    fn bad_label_rejects_dataset() {
        let dir = tempfile::tempdir().unwrap();
        generate_synthetic(&small_spec(2), dir.path()).unwrap();
        let seg = SegmentationMap::new(64, 64, vec![200; 64 * 64]).unwrap();
        seg.write(&dir.path().join("segmentation/img-0003.seg")).unwrap();
        let err = load_dataset(dir.path()).unwrap_err();
        assert!(err.to_string().contains("img-0003.seg"), "{err}");
    }

    #[test]
    fn one_image_fixture() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SynthSpec {
            images: 1,
            abstract_tags: 0,
            ..small_spec(4)
        };
        generate_synthetic(&spec, dir.path()).unwrap();
        let data = load_dataset(dir.path()).unwrap();
        assert_eq!(data.vocab().len(), data.tags(0).len());
    }

    #[test]
    fn compat_report_names_mismatches() {
        use crate::embedding::{FrequencyScope, ModelShape};
        let dir = tempfile::tempdir().unwrap();
        generate_synthetic(&small_spec(6), dir.path()).unwrap();
        let data = load_dataset(dir.path()).unwrap();
        let shape = |d| ModelShape {
            embed_dim: 8,
            feature_dim: d,
            grid_rows: 8,
            grid_cols: 8,
        };
        let ok = ModelParams::init(data.scheme().clone(), data.vocab().clone(), shape(6), FrequencyScope::Dataset, 0)
            .unwrap();
        assert!(validate_model_dataset_compat(&ok, &data).is_ok());

        let wrong_d =
            ModelParams::init(data.scheme().clone(), data.vocab().clone(), shape(7), FrequencyScope::Dataset, 0)
                .unwrap();
        let rep = validate_model_dataset_compat(&wrong_d, &data);
        assert_eq!(
            rep.mismatches,
            vec![Mismatch {
                field: "D".into(),
                model: "7".into(),
                dataset: "6".into()
            }]
        );

        let mut tags = data.vocab().tags().to_vec();
        let mut freq = data.vocab().frequencies().to_vec();
        tags.swap(0, 1);
        freq.swap(0, 1);
        let permuted = TagVocabulary::new(tags, freq).unwrap();
        let p = ModelParams::init(data.scheme().clone(), permuted, shape(6), FrequencyScope::Dataset, 0).unwrap();
        let rep = validate_model_dataset_compat(&p, &data);
        assert_eq!(rep.mismatches.len(), 1);
        assert_eq!(rep.mismatches[0].field, "vocabulary order");
        assert!(rep.into_result().is_err());
    }
}
