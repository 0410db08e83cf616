//! Synthetic multi-source segmentation corpora with controllable partial and
//! sparse annotation.
//!
//! Every image gets one random superellipse blob per structure class on a
//! noisy background. Classes are separable by intensity level; each dataset
//! applies its own monotone intensity transform (a stand-in for modality
//! differences) and releases labels only for its annotated subset, either
//! volume-wide or on an evenly spaced fraction of slices. The fully labeled
//! ground truth is kept alongside for evaluation.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::label::{
    AnnotatedSubset, AnnotatedVolume, Annotation, ClassSet,
};
use crate::volume::{strides_of, Volume};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LabelKind {
    Partial,
    Sparse,
}

impl LabelKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            LabelKind::Partial => "partial",
            LabelKind::Sparse => "sparse",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "partial" => Ok(LabelKind::Partial),
            "sparse" => Ok(LabelKind::Sparse),
            other => Err(Error::Contract(format!(
                "unknown labeling kind '{}', expected partial|sparse",
                other
            ))),
        }
    }
}

/// One data source: which classes it annotates, how, and how its scanner
/// renders intensities.
#[derive(Debug, Clone)]
pub struct DatasetSpec {
    pub dataset_id: String,
    pub modality_id: String,
    pub subset: Vec<u8>,
    pub kind: LabelKind,
    /// Intensity transform: raw = contrast * base + bias + noise.
    pub contrast: f64,
    pub bias: f64,
    pub noise_sigma: f64,
}

impl DatasetSpec {
    pub fn new(dataset_id: &str, modality_id: &str, subset: &[u8], kind: LabelKind) -> Self {
        DatasetSpec {
            dataset_id: dataset_id.to_string(),
            modality_id: modality_id.to_string(),
            subset: subset.to_vec(),
            kind,
            contrast: 1.0,
            bias: 0.0,
            noise_sigma: 0.03,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GenSpec {
    /// Rank 2 or 3; every image in the corpus shares this shape.
    pub image_shape: Vec<usize>,
    pub n_structures: usize,
    pub datasets: Vec<DatasetSpec>,
    /// Images generated per dataset.
    pub n_images: usize,
    /// Fraction of slices annotated in sparse datasets, in (0, 1].
    pub sparse_fraction: f64,
    pub sparse_axis: usize,
    pub seed: u64,
    /// Clip range applied before mapping intensities to [0, 1].
    pub lo_clip: f64,
    pub hi_clip: f64,
    /// Permit classes that no dataset annotates.
    pub allow_uncovered: bool,
}

impl GenSpec {
    pub fn new(image_shape: Vec<usize>, n_structures: usize, datasets: Vec<DatasetSpec>) -> Self {
        GenSpec {
            image_shape,
            n_structures,
            datasets,
            n_images: 8,
            sparse_fraction: 0.2,
            sparse_axis: 0,
            seed: 0,
            lo_clip: 0.0,
            hi_clip: 1.0,
            allow_uncovered: false,
        }
    }

    pub fn classes(&self) -> Result<ClassSet> {
        ClassSet::new(self.n_structures)
    }

    pub fn validate(&self) -> Result<()> {
        let rank = self.image_shape.len();
        if rank != 2 && rank != 3 {
            return Err(Error::Contract(format!(
                "image shape must be rank 2 or 3, got {:?}",
                self.image_shape
            )));
        }
        let min_dim = *self.image_shape.iter().min().unwrap();
        if min_dim < 16 {
            return Err(Error::Contract(format!(
                "image extents must be >= 16 to fit blobs, got {:?}",
                self.image_shape
            )));
        }
        let classes = self.classes()?;
        if self.datasets.is_empty() {
            return Err(Error::Contract("at least one dataset required".into()));
        }
        let mut covered = vec![false; self.n_structures + 1];
        for d in &self.datasets {
            let subset = AnnotatedSubset::new(d.subset.iter().copied(), &classes)?;
            for &c in subset.members() {
                covered[c as usize] = true;
            }
            if !(d.noise_sigma >= 0.0) {
                return Err(Error::Contract(format!(
                    "dataset {}: noise sigma must be >= 0",
                    d.dataset_id
                )));
            }
            check_token(&d.dataset_id)?;
            check_token(&d.modality_id)?;
        }
        if !self.allow_uncovered {
            if let Some(c) = (1..=self.n_structures).find(|&c| !covered[c]) {
                return Err(Error::Contract(format!(
                    "class {} is annotated by no dataset (set allow_uncovered to permit)",
                    c
                )));
            }
        }
        if !(self.sparse_fraction > 0.0 && self.sparse_fraction <= 1.0) {
            return Err(Error::Contract(format!(
                "sparse fraction must be in (0, 1], got {}",
                self.sparse_fraction
            )));
        }
        if self.sparse_axis >= rank {
            return Err(Error::Contract(format!(
                "sparse axis {} out of range for rank {}",
                self.sparse_axis, rank
            )));
        }
        if !(self.lo_clip < self.hi_clip) {
            return Err(Error::Contract(format!(
                "degenerate clip range [{}, {}]",
                self.lo_clip, self.hi_clip
            )));
        }
        if self.n_images == 0 || self.n_images > 9999 {
            return Err(Error::Contract(format!(
                "images per dataset must be in 1..=9999, got {}",
                self.n_images
            )));
        }
        Ok(())
    }
}

/// An image with its released annotation and the complete labels kept for
/// evaluation only.
#[derive(Debug, Clone)]
pub struct GroundTruthVolume {
    pub annotated: AnnotatedVolume,
    pub full_labels: Volume<u8>,
}

#[derive(Debug, Clone)]
pub struct Corpus {
    pub volumes: Vec<GroundTruthVolume>,
    pub classes: ClassSet,
}

fn check_token(token: &str) -> Result<()> {
    if token.is_empty()
        || !token.bytes().all(|b| b.is_ascii_lowercase() || b.is_ascii_digit() || b == b'_')
    {
        return Err(Error::Naming(format!(
            "'{}' (need nonempty lowercase alphanumerics/underscore)",
            token
        )));
    }
    Ok(())
}

/// Compose the canonical image id "<dataset>_<modality>_<base>".
pub fn name_image(dataset_id: &str, modality_id: &str, base: &str) -> Result<String> {
    check_token(dataset_id)?;
    check_token(modality_id)?;
    check_token(base)?;
    Ok(format!("{}_{}_{}", dataset_id, modality_id, base))
}

/// Clamp to [lo, hi] and map affinely onto [0, 1].
pub fn normalize_intensity(raw: f64, lo_clip: f64, hi_clip: f64) -> Result<f64> {
    if !(lo_clip < hi_clip) {
        return Err(Error::Contract(format!(
            "degenerate clip range [{}, {}]",
            lo_clip, hi_clip
        )));
    }
    Ok((raw.clamp(lo_clip, hi_clip) - lo_clip) / (hi_clip - lo_clip))
}

/// Indices of the evenly spaced annotated slices: n = clamp(round(f*E), 1, E)
/// slices at floor(j*E/n), starting at 0.
pub fn evenly_spaced_slices(extent: usize, fraction: f64) -> Vec<usize> {
    let n = ((fraction * extent as f64).round() as usize).clamp(1, extent);
    (0..n).map(|j| j * extent / n).collect()
}

/// Background intensity level before the per-dataset transform.
pub const BACKGROUND_LEVEL: f64 = 0.1;

/// Canonical per-class intensity level before the per-dataset transform:
/// evenly spaced over [0.3, 0.9].
pub fn class_level(class: u8, n_structures: usize) -> f64 {
    if n_structures <= 1 {
        0.9
    } else {
        0.3 + 0.6 * (class as f64 - 1.0) / (n_structures as f64 - 1.0)
    }
}

fn image_rng(seed: u64, dataset_idx: usize, image_idx: usize) -> ChaCha8Rng {
    let mut bytes = [0u8; 32];
    bytes[0..8].copy_from_slice(&seed.to_le_bytes());
    bytes[8..16].copy_from_slice(&(dataset_idx as u64).to_le_bytes());
    bytes[16..24].copy_from_slice(&(image_idx as u64).to_le_bytes());
    bytes[24..32].copy_from_slice(&0x73796e7468646174u64.to_le_bytes());
    ChaCha8Rng::from_seed(bytes)
}

struct Blob {
    center: Vec<f64>,
    axes: Vec<f64>,
    angle: f64,
    exponent: f64,
}

impl Blob {
    fn contains(&self, coord: &[usize]) -> bool {
        // Rotate the offset in the plane of the last two axes; any leading
        // axis is unrotated.
        let d: Vec<f64> =
            coord.iter().zip(&self.center).map(|(&c, &cc)| c as f64 - cc).collect();
        let rank = d.len();
        let (s, c) = self.angle.sin_cos();
        let mut r = d.clone();
        r[rank - 2] = c * d[rank - 2] + s * d[rank - 1];
        r[rank - 1] = -s * d[rank - 2] + c * d[rank - 1];
        let mut acc = 0.0;
        for (rc, ax) in r.iter().zip(&self.axes) {
            acc += (rc.abs() / ax).powf(self.exponent);
        }
        acc <= 1.0
    }
}

fn place_blobs(
    shape: &[usize],
    n_structures: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Volume<u8>> {
    let mut labels = Volume::<u8>::zeros(shape.to_vec());
    let strides = strides_of(shape);
    let min_dim = *shape.iter().min().unwrap() as f64;
    let (ax_lo, ax_hi) = (min_dim / 12.0, min_dim / 5.0);
    const MAX_TRIES: usize = 60;

    for class in 1..=n_structures as u8 {
        let mut placed = false;
        for _ in 0..MAX_TRIES {
            let axes: Vec<f64> = shape.iter().map(|_| rng.gen_range(ax_lo..ax_hi)).collect();
            let margin = axes.iter().cloned().fold(0.0, f64::max).ceil() as usize + 1;
            if shape.iter().any(|&e| e <= 2 * margin) {
                continue;
            }
            let center: Vec<f64> = shape
                .iter()
                .map(|&e| rng.gen_range(margin as f64..(e - margin) as f64))
                .collect();
            let blob = Blob {
                center,
                axes,
                angle: rng.gen_range(0.0..std::f64::consts::PI),
                exponent: rng.gen_range(1.6..3.5),
            };
            let voxels = rasterize(&blob, shape, &strides);
            if voxels.is_empty() || voxels.iter().any(|&i| labels.data()[i] != 0) {
                continue;
            }
            for &i in &voxels {
                labels.data_mut()[i] = class;
            }
            placed = true;
            break;
        }
        if !placed {
            return Err(Error::Generation(format!(
                "could not place a non-overlapping blob for class {} after {} tries",
                class, MAX_TRIES
            )));
        }
    }
    Ok(labels)
}

fn rasterize(blob: &Blob, shape: &[usize], strides: &[usize]) -> Vec<usize> {
    // Walk the blob's bounding box only.
    let lo: Vec<usize> = blob
        .center
        .iter()
        .zip(&blob.axes)
        .map(|(&c, &a)| (c - a - 1.0).floor().max(0.0) as usize)
        .collect();
    let hi: Vec<usize> = blob
        .center
        .iter()
        .zip(&blob.axes)
        .zip(shape)
        .map(|((&c, &a), &e)| ((c + a + 1.0).ceil() as usize + 1).min(e))
        .collect();
    let mut out = vec![];
    let mut coord = lo.clone();
    'outer: loop {
        if blob.contains(&coord) {
            out.push(coord.iter().zip(strides).map(|(&c, &s)| c * s).sum());
        }
        for axis in (0..shape.len()).rev() {
            coord[axis] += 1;
            if coord[axis] < hi[axis] {
                continue 'outer;
            }
            coord[axis] = lo[axis];
            if axis == 0 {
                break 'outer;
            }
        }
    }
    out
}

/// Generate the corpus described by `spec`. Deterministic in `spec.seed`,
/// including per-image streams, so regeneration is bit-identical.
pub fn generate(spec: &GenSpec) -> Result<Corpus> {
    spec.validate()?;
    let classes = spec.classes()?;
    let shape = &spec.image_shape;
    let n_vox: usize = shape.iter().product();
    let mut volumes = Vec::with_capacity(spec.datasets.len() * spec.n_images);

    for (di, ds) in spec.datasets.iter().enumerate() {
        let subset = AnnotatedSubset::new(ds.subset.iter().copied(), &classes)?;
        for ii in 0..spec.n_images {
            let mut rng = image_rng(spec.seed, di, ii);
            let full_labels = place_blobs(shape, spec.n_structures, &mut rng).map_err(|e| {
                Error::Generation(format!("{} image {}: {}", ds.dataset_id, ii, e))
            })?;

            let noise = if ds.noise_sigma > 0.0 {
                Some(Normal::new(0.0, ds.noise_sigma).map_err(|e| {
                    Error::Generation(format!("bad noise sigma {}: {}", ds.noise_sigma, e))
                })?)
            } else {
                None
            };
            let mut intensities = vec![0.0f32; n_vox];
            for (i, x) in intensities.iter_mut().enumerate() {
                let l = full_labels.data()[i];
                let base = if l == 0 {
                    BACKGROUND_LEVEL
                } else {
                    class_level(l, spec.n_structures)
                };
                let mut raw = ds.contrast * base + ds.bias;
                if let Some(n) = &noise {
                    raw += n.sample(&mut rng);
                }
                *x = normalize_intensity(raw, spec.lo_clip, spec.hi_clip)? as f32;
            }

            let mut released = full_labels.clone();
            for l in released.data_mut() {
                if *l > 0 && !subset.contains(*l) {
                    *l = 0;
                }
            }
            let annotation = match ds.kind {
                LabelKind::Partial => Annotation::Partial(subset.clone()),
                LabelKind::Sparse => {
                    let axis = spec.sparse_axis;
                    let keep = evenly_spaced_slices(shape[axis], spec.sparse_fraction);
                    let keep_set: std::collections::BTreeSet<usize> =
                        keep.iter().copied().collect();
                    let strides = strides_of(shape);
                    for i in 0..n_vox {
                        let slice_idx = i / strides[axis] % shape[axis];
                        if !keep_set.contains(&slice_idx) {
                            released.data_mut()[i] = 0;
                        }
                    }
                    let slices: BTreeMap<usize, AnnotatedSubset> =
                        keep.into_iter().map(|i| (i, subset.clone())).collect();
                    Annotation::Sparse { axis, slices }
                }
            };

            let base = format!("im{:04}", ii);
            let image_id = name_image(&ds.dataset_id, &ds.modality_id, &base)?;
            let annotated = AnnotatedVolume::new(
                Volume::new(shape.clone(), intensities)?,
                released,
                annotation,
                ds.dataset_id.clone(),
                ds.modality_id.clone(),
                image_id,
                &classes,
            )?;
            volumes.push(GroundTruthVolume { annotated, full_labels });
        }
    }
    Ok(Corpus { volumes, classes })
}
