//! Hierarchical training-example sampling.
//!
//! The default CMD order draws a structure class first, then a modality
//! carrying it, then a dataset, then an image, and finally centers the patch
//! on a random annotated voxel of that class. Every level is uniform over its
//! nonempty options, which balances small structures and small datasets
//! against large ones. MDC reverses the outer levels; RANDOM ignores
//! annotations entirely. Images without any annotated voxel live in a
//! separate bucket reached with configurable probability.

use std::collections::BTreeMap;

use rand::Rng;

use crate::error::{Error, Result};
use crate::label::{AnnotatedSubset, AnnotatedVolume, Annotation, ClassSet};
use crate::volume::{coord_of, strides_of, Volume};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Strategy {
    Cmd,
    Mdc,
    Random,
}

impl Strategy {
    pub fn as_str(&self) -> &'static str {
        match self {
            Strategy::Cmd => "cmd",
            Strategy::Mdc => "mdc",
            Strategy::Random => "random",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "cmd" => Ok(Strategy::Cmd),
            "mdc" => Ok(Strategy::Mdc),
            "random" => Ok(Strategy::Random),
            other => Err(Error::Contract(format!(
                "unknown sampling strategy '{}', expected cmd|mdc|random",
                other
            ))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct SamplerConfig {
    pub strategy: Strategy,
    pub patch_shape: Vec<usize>,
    /// Maximum per-axis jitter (voxels) applied to the chosen center.
    pub jitter: usize,
    /// Probability of drawing from the empty-annotation bucket. `None` means
    /// the default 1/(N+1). Ignored when the bucket is empty.
    pub empty_bucket_prob: Option<f64>,
    pub seed: u64,
}

impl SamplerConfig {
    pub fn new(strategy: Strategy, patch_shape: Vec<usize>, seed: u64) -> Self {
        SamplerConfig { strategy, patch_shape, jitter: 0, empty_bucket_prob: None, seed }
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_shape.is_empty() || self.patch_shape.iter().any(|&e| e == 0) {
            return Err(Error::Contract(format!(
                "patch shape must be positive, got {:?}",
                self.patch_shape
            )));
        }
        if let Some(p) = self.empty_bucket_prob {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Contract(format!(
                    "empty bucket probability must be in [0,1], got {}",
                    p
                )));
            }
        }
        Ok(())
    }
}

/// Where one training patch comes from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SampleKey {
    /// `None` for empty-bucket and RANDOM draws.
    pub class_id: Option<u8>,
    pub modality_id: String,
    pub dataset_id: String,
    pub image_id: String,
    pub image_idx: usize,
    pub patch_center: Vec<usize>,
}

#[derive(Debug, Clone)]
struct ImageEntry {
    image_id: String,
    dataset_id: String,
    modality_id: String,
    shape: Vec<usize>,
    /// Flat indices of released annotated voxels, per class.
    class_voxels: BTreeMap<u8, Vec<usize>>,
}

#[derive(Debug, Clone)]
struct DatasetNode<K: Ord> {
    key: K,
    images: Vec<usize>,
}

#[derive(Debug, Clone)]
struct LevelNode<K: Ord, Child> {
    key: K,
    children: Vec<Child>,
}

type CmdTree = Vec<LevelNode<u8, LevelNode<String, DatasetNode<String>>>>;
type MdcTree = Vec<LevelNode<String, LevelNode<String, DatasetNode<u8>>>>;

/// Immutable sampling index over a corpus.
#[derive(Debug, Clone)]
pub struct CorpusIndex {
    images: Vec<ImageEntry>,
    /// class -> images holding at least one released voxel of it (ascending).
    class_candidates: BTreeMap<u8, Vec<usize>>,
    empty_bucket: Vec<usize>,
    n_structures: usize,
    cmd_tree: CmdTree,
    mdc_tree: MdcTree,
}

/// Build the sampling index. Classes with zero candidates stay in the map
/// with empty lists so they can be reported; images with no annotated voxel
/// at all go to the empty-annotation bucket.
pub fn build_index<'a>(
    volumes: impl IntoIterator<Item = &'a AnnotatedVolume>,
    classes: &ClassSet,
) -> Result<CorpusIndex> {
    let mut images = Vec::new();
    for v in volumes {
        let mut class_voxels: BTreeMap<u8, Vec<usize>> = BTreeMap::new();
        for (i, &l) in v.labels.data().iter().enumerate() {
            if l != 0 {
                class_voxels.entry(l).or_default().push(i);
            }
        }
        images.push(ImageEntry {
            image_id: v.image_id.clone(),
            dataset_id: v.dataset_id.clone(),
            modality_id: v.modality_id.clone(),
            shape: v.shape().to_vec(),
            class_voxels,
        });
    }

    let mut class_candidates: BTreeMap<u8, Vec<usize>> =
        classes.members().map(|c| (c, vec![])).collect();
    let mut empty_bucket = vec![];
    for (idx, e) in images.iter().enumerate() {
        if e.class_voxels.is_empty() {
            empty_bucket.push(idx);
        }
        for &c in e.class_voxels.keys() {
            if !classes.contains(c) {
                return Err(Error::InvalidAnnotation(format!(
                    "image {} labels class {} outside the universe",
                    e.image_id, c
                )));
            }
            class_candidates.get_mut(&c).unwrap().push(idx);
        }
    }

    // class -> modality -> dataset -> images
    let mut cmd_tree: CmdTree = vec![];
    for (&c, cands) in &class_candidates {
        if cands.is_empty() {
            continue;
        }
        let mut by_mod: BTreeMap<String, BTreeMap<String, Vec<usize>>> = BTreeMap::new();
        for &i in cands {
            by_mod
                .entry(images[i].modality_id.clone())
                .or_default()
                .entry(images[i].dataset_id.clone())
                .or_default()
                .push(i);
        }
        cmd_tree.push(LevelNode {
            key: c,
            children: by_mod
                .into_iter()
                .map(|(m, by_ds)| LevelNode {
                    key: m,
                    children: by_ds
                        .into_iter()
                        .map(|(d, imgs)| DatasetNode { key: d, images: imgs })
                        .collect(),
                })
                .collect(),
        });
    }

    // modality -> dataset -> class -> images
    let mut by_mod: BTreeMap<String, BTreeMap<String, BTreeMap<u8, Vec<usize>>>> = BTreeMap::new();
    for (idx, e) in images.iter().enumerate() {
        for &c in e.class_voxels.keys() {
            by_mod
                .entry(e.modality_id.clone())
                .or_default()
                .entry(e.dataset_id.clone())
                .or_default()
                .entry(c)
                .or_default()
                .push(idx);
        }
    }
    let mdc_tree: MdcTree = by_mod
        .into_iter()
        .map(|(m, by_ds)| LevelNode {
            key: m,
            children: by_ds
                .into_iter()
                .map(|(d, by_c)| LevelNode {
                    key: d,
                    children: by_c
                        .into_iter()
                        .map(|(c, imgs)| DatasetNode { key: c, images: imgs })
                        .collect(),
                })
                .collect(),
        })
        .collect();

    Ok(CorpusIndex {
        images,
        class_candidates,
        empty_bucket,
        n_structures: classes.n_structures(),
        cmd_tree,
        mdc_tree,
    })
}

impl CorpusIndex {
    pub fn n_images(&self) -> usize {
        self.images.len()
    }

    pub fn image_id(&self, idx: usize) -> &str {
        &self.images[idx].image_id
    }

    pub fn image_shape(&self, idx: usize) -> &[usize] {
        &self.images[idx].shape
    }

    /// Classes that no image annotates.
    pub fn empty_classes(&self) -> Vec<u8> {
        self.class_candidates
            .iter()
            .filter(|(_, v)| v.is_empty())
            .map(|(&c, _)| c)
            .collect()
    }

    pub fn empty_bucket(&self) -> &[usize] {
        &self.empty_bucket
    }

    pub fn candidates(&self, class: u8) -> &[usize] {
        self.class_candidates.get(&class).map(|v| v.as_slice()).unwrap_or(&[])
    }

    pub fn effective_empty_prob(&self, cfg: &SamplerConfig) -> f64 {
        if self.empty_bucket.is_empty() {
            0.0
        } else {
            cfg.empty_bucket_prob
                .unwrap_or(1.0 / (self.n_structures as f64 + 1.0))
        }
    }

    fn has_class_candidates(&self) -> bool {
        !self.cmd_tree.is_empty()
    }
}

fn center_range(extent: usize, patch: usize) -> Result<(usize, usize)> {
    if patch > extent {
        return Err(Error::Contract(format!(
            "patch extent {} exceeds image extent {}",
            patch, extent
        )));
    }
    let lo = patch / 2;
    Ok((lo, extent - patch + lo))
}

fn check_rank(cfg: &SamplerConfig, shape: &[usize]) -> Result<()> {
    if cfg.patch_shape.len() != shape.len() {
        return Err(Error::Contract(format!(
            "patch shape {:?} does not match image rank {:?}",
            cfg.patch_shape, shape
        )));
    }
    Ok(())
}

fn uniform_center(
    shape: &[usize],
    cfg: &SamplerConfig,
    rng: &mut impl Rng,
) -> Result<Vec<usize>> {
    check_rank(cfg, shape)?;
    shape
        .iter()
        .zip(&cfg.patch_shape)
        .map(|(&e, &p)| {
            let (lo, hi) = center_range(e, p)?;
            Ok(rng.gen_range(lo..=hi))
        })
        .collect()
}

fn jittered_center(
    voxel_coord: &[usize],
    shape: &[usize],
    cfg: &SamplerConfig,
    rng: &mut impl Rng,
) -> Result<Vec<usize>> {
    check_rank(cfg, shape)?;
    let j = cfg.jitter as i64;
    voxel_coord
        .iter()
        .zip(shape.iter().zip(&cfg.patch_shape))
        .map(|(&c, (&e, &p))| {
            let (lo, hi) = center_range(e, p)?;
            let wiggled = c as i64 + rng.gen_range(-j..=j);
            Ok(wiggled.clamp(lo as i64, hi as i64) as usize)
        })
        .collect()
}

fn key_for_empty_draw(
    idx: &CorpusIndex,
    image_idx: usize,
    cfg: &SamplerConfig,
    rng: &mut impl Rng,
) -> Result<SampleKey> {
    let e = &idx.images[image_idx];
    Ok(SampleKey {
        class_id: None,
        modality_id: e.modality_id.clone(),
        dataset_id: e.dataset_id.clone(),
        image_id: e.image_id.clone(),
        image_idx,
        patch_center: uniform_center(&e.shape, cfg, rng)?,
    })
}

fn key_for_class_draw(
    idx: &CorpusIndex,
    image_idx: usize,
    class: u8,
    cfg: &SamplerConfig,
    rng: &mut impl Rng,
) -> Result<SampleKey> {
    let e = &idx.images[image_idx];
    let voxels = e.class_voxels.get(&class).ok_or_else(|| {
        Error::Contract(format!("image {} has no voxels of class {}", e.image_id, class))
    })?;
    let flat = voxels[rng.gen_range(0..voxels.len())];
    let coord = coord_of(flat, &e.shape);
    Ok(SampleKey {
        class_id: Some(class),
        modality_id: e.modality_id.clone(),
        dataset_id: e.dataset_id.clone(),
        image_id: e.image_id.clone(),
        image_idx,
        patch_center: jittered_center(&coord, &e.shape, cfg, rng)?,
    })
}

/// Returns true when this draw should come from the empty-annotation bucket.
fn draw_bucket(idx: &CorpusIndex, cfg: &SamplerConfig, rng: &mut impl Rng) -> Result<bool> {
    let has_classes = idx.has_class_candidates();
    let has_bucket = !idx.empty_bucket.is_empty();
    match (has_classes, has_bucket) {
        (false, false) => Err(Error::UnsampleableCorpus(
            "no annotated voxels and no unannotated images".into(),
        )),
        (false, true) => Ok(true),
        (true, false) => Ok(false),
        (true, true) => Ok(rng.gen::<f64>() < idx.effective_empty_prob(cfg)),
    }
}

/// Class -> modality -> dataset -> image -> annotated voxel (+ jitter).
pub fn sample_cmd(
    idx: &CorpusIndex,
    cfg: &SamplerConfig,
    rng: &mut impl Rng,
) -> Result<SampleKey> {
    cfg.validate()?;
    if draw_bucket(idx, cfg, rng)? {
        let image_idx = idx.empty_bucket[rng.gen_range(0..idx.empty_bucket.len())];
        return key_for_empty_draw(idx, image_idx, cfg, rng);
    }
    let class_node = &idx.cmd_tree[rng.gen_range(0..idx.cmd_tree.len())];
    let mod_node = &class_node.children[rng.gen_range(0..class_node.children.len())];
    let ds_node = &mod_node.children[rng.gen_range(0..mod_node.children.len())];
    let image_idx = ds_node.images[rng.gen_range(0..ds_node.images.len())];
    key_for_class_draw(idx, image_idx, class_node.key, cfg, rng)
}

/// Modality -> dataset -> class -> image -> annotated voxel (+ jitter).
pub fn sample_mdc(
    idx: &CorpusIndex,
    cfg: &SamplerConfig,
    rng: &mut impl Rng,
) -> Result<SampleKey> {
    cfg.validate()?;
    if draw_bucket(idx, cfg, rng)? {
        let image_idx = idx.empty_bucket[rng.gen_range(0..idx.empty_bucket.len())];
        return key_for_empty_draw(idx, image_idx, cfg, rng);
    }
    let mod_node = &idx.mdc_tree[rng.gen_range(0..idx.mdc_tree.len())];
    let ds_node = &mod_node.children[rng.gen_range(0..mod_node.children.len())];
    let class_node = &ds_node.children[rng.gen_range(0..ds_node.children.len())];
    let image_idx = class_node.images[rng.gen_range(0..class_node.images.len())];
    key_for_class_draw(idx, image_idx, class_node.key, cfg, rng)
}

/// Uniform image, uniform in-bounds center, no class conditioning.
pub fn sample_random(
    idx: &CorpusIndex,
    cfg: &SamplerConfig,
    rng: &mut impl Rng,
) -> Result<SampleKey> {
    cfg.validate()?;
    if idx.images.is_empty() {
        return Err(Error::UnsampleableCorpus("corpus has no images".into()));
    }
    let image_idx = rng.gen_range(0..idx.images.len());
    key_for_empty_draw(idx, image_idx, cfg, rng)
}

pub fn sample(
    idx: &CorpusIndex,
    cfg: &SamplerConfig,
    rng: &mut impl Rng,
) -> Result<SampleKey> {
    match cfg.strategy {
        Strategy::Cmd => sample_cmd(idx, cfg, rng),
        Strategy::Mdc => sample_mdc(idx, cfg, rng),
        Strategy::Random => sample_random(idx, cfg, rng),
    }
}

/// Patch origin (minimal corner) for a key under this config.
pub fn patch_origin(key: &SampleKey, cfg: &SamplerConfig) -> Vec<usize> {
    key.patch_center
        .iter()
        .zip(&cfg.patch_shape)
        .map(|(&c, &p)| c - p / 2)
        .collect()
}

/// Copy the axis-aligned patch around `key.patch_center` out of the volume,
/// restricting sparse annotations to the slices the patch intersects.
pub fn extract_patch(
    v: &AnnotatedVolume,
    key: &SampleKey,
    cfg: &SamplerConfig,
    classes: &ClassSet,
) -> Result<AnnotatedVolume> {
    check_rank(cfg, v.shape())?;
    let shape = v.shape();
    let origin: Vec<usize> = key
        .patch_center
        .iter()
        .zip(shape.iter().zip(&cfg.patch_shape))
        .map(|(&c, (&e, &p))| {
            let (lo, hi) = center_range(e, p)?;
            if c < lo || c > hi {
                return Err(Error::Contract(format!(
                    "patch center {} outside valid range [{}, {}] for extent {}",
                    c, lo, hi, e
                )));
            }
            Ok(c - p / 2)
        })
        .collect::<Result<_>>()?;

    let n_patch: usize = cfg.patch_shape.iter().product();
    let strides = strides_of(shape);
    let mut flat_src = Vec::with_capacity(n_patch);
    // Odometer over patch coordinates, row-major.
    let mut coord = vec![0usize; shape.len()];
    'outer: loop {
        let src: usize = coord
            .iter()
            .zip(&origin)
            .zip(&strides)
            .map(|((&c, &o), &s)| (c + o) * s)
            .sum();
        flat_src.push(src);
        for axis in (0..shape.len()).rev() {
            coord[axis] += 1;
            if coord[axis] < cfg.patch_shape[axis] {
                continue 'outer;
            }
            coord[axis] = 0;
            if axis == 0 {
                break 'outer;
            }
        }
    }

    let intensities: Vec<f32> = flat_src.iter().map(|&i| v.intensities.data()[i]).collect();
    let labels: Vec<u8> = flat_src.iter().map(|&i| v.labels.data()[i]).collect();
    let annotation = match &v.annotation {
        Annotation::Partial(s) => Annotation::Partial(s.clone()),
        Annotation::Sparse { axis, slices } => {
            let lo = origin[*axis];
            let hi = lo + cfg.patch_shape[*axis];
            let local: BTreeMap<usize, AnnotatedSubset> = slices
                .iter()
                .filter(|(&i, _)| i >= lo && i < hi)
                .map(|(&i, s)| (i - lo, s.clone()))
                .collect();
            Annotation::Sparse { axis: *axis, slices: local }
        }
    };
    AnnotatedVolume::new(
        Volume::new(cfg.patch_shape.clone(), intensities)?,
        Volume::new(cfg.patch_shape.clone(), labels)?,
        annotation,
        v.dataset_id.clone(),
        v.modality_id.clone(),
        v.image_id.clone(),
        classes,
    )
}

/// Level-by-level option lists, used by the statistical audit.
pub(crate) mod tree_access {
    use super::*;

    pub fn cmd_classes(idx: &CorpusIndex) -> Vec<u8> {
        idx.cmd_tree.iter().map(|n| n.key).collect()
    }

    pub fn cmd_modalities(idx: &CorpusIndex, class: u8) -> Vec<String> {
        idx.cmd_tree
            .iter()
            .find(|n| n.key == class)
            .map(|n| n.children.iter().map(|m| m.key.clone()).collect())
            .unwrap_or_default()
    }

    pub fn cmd_datasets(idx: &CorpusIndex, class: u8, modality: &str) -> Vec<String> {
        idx.cmd_tree
            .iter()
            .find(|n| n.key == class)
            .and_then(|n| n.children.iter().find(|m| m.key == modality))
            .map(|m| m.children.iter().map(|d| d.key.clone()).collect())
            .unwrap_or_default()
    }

    pub fn cmd_images(idx: &CorpusIndex, class: u8, modality: &str, dataset: &str) -> Vec<usize> {
        idx.cmd_tree
            .iter()
            .find(|n| n.key == class)
            .and_then(|n| n.children.iter().find(|m| m.key == modality))
            .and_then(|m| m.children.iter().find(|d| d.key == dataset))
            .map(|d| d.images.clone())
            .unwrap_or_default()
    }

    pub fn mdc_modalities(idx: &CorpusIndex) -> Vec<String> {
        idx.mdc_tree.iter().map(|n| n.key.clone()).collect()
    }

    pub fn mdc_datasets(idx: &CorpusIndex, modality: &str) -> Vec<String> {
        idx.mdc_tree
            .iter()
            .find(|n| n.key == modality)
            .map(|n| n.children.iter().map(|d| d.key.clone()).collect())
            .unwrap_or_default()
    }

    pub fn mdc_classes(idx: &CorpusIndex, modality: &str, dataset: &str) -> Vec<u8> {
        idx.mdc_tree
            .iter()
            .find(|n| n.key == modality)
            .and_then(|n| n.children.iter().find(|d| d.key == dataset))
            .map(|d| d.children.iter().map(|c| c.key).collect())
            .unwrap_or_default()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate, DatasetSpec, GenSpec, LabelKind};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_corpus() -> (Vec<AnnotatedVolume>, ClassSet) {
        let datasets = vec![
            DatasetSpec::new("da", "ct", &[1], LabelKind::Partial),
            DatasetSpec::new("db", "mr", &[2], LabelKind::Partial),
        ];
        let mut spec = GenSpec::new(vec![24, 24], 2, datasets);
        spec.n_images = 3;
        spec.seed = 11;
        let corpus = generate(&spec).unwrap();
        let classes = corpus.classes;
        (corpus.volumes.into_iter().map(|g| g.annotated).collect(), classes)
    }

    #[test]
    fn index_partitions_candidates() {
        let (vols, classes) = small_corpus();
        let idx = build_index(vols.iter(), &classes).unwrap();
        assert_eq!(idx.n_images(), 6);
        assert_eq!(idx.candidates(1).len(), 3);
        assert_eq!(idx.candidates(2).len(), 3);
        assert!(idx.empty_bucket().is_empty());
        assert!(idx.empty_classes().is_empty());
    }

    #[test]
    fn class_never_annotated_is_flagged() {
        let datasets = vec![DatasetSpec::new("da", "ct", &[1], LabelKind::Partial)];
        let mut spec = GenSpec::new(vec![24, 24], 3, datasets);
        spec.allow_uncovered = true;
        spec.n_images = 2;
        let corpus = generate(&spec).unwrap();
        let vols: Vec<_> = corpus.volumes.iter().map(|g| &g.annotated).collect();
        let idx = build_index(vols.into_iter(), &corpus.classes).unwrap();
        assert_eq!(idx.empty_classes(), vec![2, 3]);
        assert!(idx.candidates(2).is_empty());
    }

    #[test]
    fn forced_choices() {
        let (vols, classes) = small_corpus();
        let idx = build_index(vols.iter(), &classes).unwrap();
        let cfg = SamplerConfig::new(Strategy::Cmd, vec![12, 12], 5);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        for _ in 0..50 {
            let key = sample_cmd(&idx, &cfg, &mut rng).unwrap();
            // Class 1 only lives in dataset da / modality ct, class 2 in db/mr.
            match key.class_id.unwrap() {
                1 => assert_eq!((key.dataset_id.as_str(), key.modality_id.as_str()), ("da", "ct")),
                2 => assert_eq!((key.dataset_id.as_str(), key.modality_id.as_str()), ("db", "mr")),
                other => panic!("unexpected class {}", other),
            }
        }
    }

    #[test]
    fn determinism() {
        let (vols, classes) = small_corpus();
        let idx = build_index(vols.iter(), &classes).unwrap();
        for strategy in [Strategy::Cmd, Strategy::Mdc, Strategy::Random] {
            let cfg = SamplerConfig::new(strategy, vec![12, 12], 99);
            let draw = |seed| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                (0..200).map(|_| sample(&idx, &cfg, &mut rng).unwrap()).collect::<Vec<_>>()
            };
            assert_eq!(draw(99), draw(99));
            assert_ne!(draw(99), draw(100));
        }
    }

    #[test]
    fn cmd_patch_contains_chosen_class() {
        let (vols, classes) = small_corpus();
        let idx = build_index(vols.iter(), &classes).unwrap();
        let cfg = SamplerConfig::new(Strategy::Cmd, vec![8, 8], 3);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        for _ in 0..100 {
            let key = sample_cmd(&idx, &cfg, &mut rng).unwrap();
            let class = key.class_id.unwrap();
            let patch = extract_patch(&vols[key.image_idx], &key, &cfg, &classes).unwrap();
            assert!(
                patch.labels.data().iter().any(|&l| l == class),
                "patch misses class {}",
                class
            );
        }
    }

    #[test]
    fn jitter_respects_bounds() {
        let (vols, classes) = small_corpus();
        let idx = build_index(vols.iter(), &classes).unwrap();
        let mut cfg = SamplerConfig::new(Strategy::Cmd, vec![16, 16], 4);
        cfg.jitter = 30; // larger than the image, forcing clamps
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        for _ in 0..100 {
            let key = sample_cmd(&idx, &cfg, &mut rng).unwrap();
            let patch = extract_patch(&vols[key.image_idx], &key, &cfg, &classes).unwrap();
            assert_eq!(patch.labels.shape(), &[16, 16]);
        }
    }

    #[test]
    fn empty_bucket_probability_zero_and_one() {
        let datasets = vec![
            DatasetSpec::new("da", "ct", &[1], LabelKind::Partial),
            DatasetSpec::new("db", "ct", &[], LabelKind::Partial),
        ];
        let mut spec = GenSpec::new(vec![24, 24], 1, datasets);
        spec.n_images = 2;
        spec.seed = 3;
        let corpus = generate(&spec).unwrap();
        let vols: Vec<_> = corpus.volumes.iter().map(|g| &g.annotated).collect();
        let idx = build_index(vols.into_iter(), &corpus.classes).unwrap();
        assert_eq!(idx.empty_bucket().len(), 2);

        let mut cfg = SamplerConfig::new(Strategy::Cmd, vec![12, 12], 8);
        cfg.empty_bucket_prob = Some(0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let key = sample_cmd(&idx, &cfg, &mut rng).unwrap();
            assert!(key.class_id.is_some());
        }
        cfg.empty_bucket_prob = Some(1.0);
        for _ in 0..100 {
            let key = sample_cmd(&idx, &cfg, &mut rng).unwrap();
            assert!(key.class_id.is_none());
            assert_eq!(key.dataset_id, "db");
        }
    }

    #[test]
    fn unsampleable_corpus_errors() {
        let classes = ClassSet::new(2).unwrap();
        let idx = build_index(std::iter::empty(), &classes).unwrap();
        let cfg = SamplerConfig::new(Strategy::Cmd, vec![4, 4], 0);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(
            sample_cmd(&idx, &cfg, &mut rng),
            Err(Error::UnsampleableCorpus(_))
        ));
        assert!(matches!(
            sample_random(&idx, &cfg, &mut rng),
            Err(Error::UnsampleableCorpus(_))
        ));
    }

    #[test]
    fn full_image_patch_is_identity() {
        let (vols, classes) = small_corpus();
        let idx = build_index(vols.iter(), &classes).unwrap();
        let cfg = SamplerConfig::new(Strategy::Random, vec![24, 24], 17);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let key = sample_random(&idx, &cfg, &mut rng).unwrap();
        let patch = extract_patch(&vols[key.image_idx], &key, &cfg, &classes).unwrap();
        assert_eq!(patch.intensities.data(), vols[key.image_idx].intensities.data());
        assert_eq!(patch.labels.data(), vols[key.image_idx].labels.data());
    }

    #[test]
    fn sparse_patch_keeps_local_subsets() {
        let datasets = vec![DatasetSpec::new("da", "ct", &[1, 2], LabelKind::Sparse)];
        let mut spec = GenSpec::new(vec![24, 24], 2, datasets);
        spec.n_images = 1;
        spec.sparse_fraction = 0.25;
        spec.seed = 21;
        let corpus = generate(&spec).unwrap();
        let v = &corpus.volumes[0].annotated;
        let global_slices: Vec<usize> = match &v.annotation {
            Annotation::Sparse { slices, .. } => slices.keys().copied().collect(),
            _ => panic!(),
        };
        let cfg = SamplerConfig::new(Strategy::Random, vec![12, 24], 2);
        let key = SampleKey {
            class_id: None,
            modality_id: v.modality_id.clone(),
            dataset_id: v.dataset_id.clone(),
            image_id: v.image_id.clone(),
            image_idx: 0,
            patch_center: vec![12, 12], // rows 6..18
        };
        let patch = extract_patch(v, &key, &cfg, &corpus.classes).unwrap();
        match &patch.annotation {
            Annotation::Sparse { axis, slices } => {
                assert_eq!(*axis, 0);
                let expect: Vec<usize> = global_slices
                    .iter()
                    .filter(|&&s| s >= 6 && s < 18)
                    .map(|&s| s - 6)
                    .collect();
                let got: Vec<usize> = slices.keys().copied().collect();
                assert_eq!(got, expect);
            }
            _ => panic!("patch should stay sparse"),
        }
    }

    #[test]
    fn out_of_bounds_center_rejected() {
        let (vols, classes) = small_corpus();
        let cfg = SamplerConfig::new(Strategy::Random, vec![16, 16], 0);
        let key = SampleKey {
            class_id: None,
            modality_id: "ct".into(),
            dataset_id: "da".into(),
            image_id: vols[0].image_id.clone(),
            image_idx: 0,
            patch_center: vec![2, 12],
        };
        assert!(extract_patch(&vols[0], &key, &cfg, &classes).is_err());
    }
}
