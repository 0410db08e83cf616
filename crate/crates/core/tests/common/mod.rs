//! Shared fixtures for the integration suites. The reference computations
//! here rebuild every quantity from its definition, without touching the
//! library's channel maps or gradient plumbing, so the suites compare two
//! independent routes to the same number.
#![allow(dead_code)]

use ambiseg::label::{AnnotatedSubset, AnnotatedVolume, Annotation, ClassSet, ProbField};
use ambiseg::loss::softmax;
use ambiseg::volume::{Field, Volume};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_logits(rng: &mut ChaCha8Rng, channels: usize, n_voxels: usize) -> Field {
    let data: Vec<f64> = (0..channels * n_voxels).map(|_| rng.gen_range(-3.0..3.0)).collect();
    Field::from_data(channels, vec![n_voxels], data).unwrap()
}

pub fn random_probs(rng: &mut ChaCha8Rng, channels: usize, n_voxels: usize) -> ProbField {
    softmax(&random_logits(rng, channels, n_voxels)).unwrap()
}

/// Uniformly sized random subset of the universe, possibly empty.
pub fn random_subset(rng: &mut ChaCha8Rng, classes: &ClassSet) -> AnnotatedSubset {
    let n = classes.n_structures();
    let size = rng.gen_range(0..=n);
    let mut ids: Vec<u8> = (1..=n as u8).collect();
    ids.shuffle(rng);
    ids.truncate(size);
    AnnotatedSubset::new(ids, classes).unwrap()
}

pub fn random_nonempty_subset(rng: &mut ChaCha8Rng, classes: &ClassSet) -> AnnotatedSubset {
    loop {
        let s = random_subset(rng, classes);
        if !s.is_empty() {
            return s;
        }
    }
}

/// Labels drawn uniformly from {0} plus the subset members.
pub fn random_labels(rng: &mut ChaCha8Rng, members: &[u8], n_voxels: usize) -> Vec<u8> {
    (0..n_voxels)
        .map(|_| {
            let k = rng.gen_range(0..=members.len());
            if k == 0 {
                0
            } else {
                members[k - 1]
            }
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Reference channel pooling, recomputed from the definition.

/// Output channel c pools these input channels: channel 0 is {0} plus every
/// class outside the subset (ascending), channel k is the k-th member.
pub fn merge_groups(subset: &[u8], n_structures: usize) -> Vec<Vec<usize>> {
    let mut members = subset.to_vec();
    members.sort_unstable();
    members.dedup();
    let mut background = vec![0usize];
    for j in 1..=n_structures as u8 {
        if !members.contains(&j) {
            background.push(j as usize);
        }
    }
    let mut groups = vec![background];
    groups.extend(members.iter().map(|&m| vec![m as usize]));
    groups
}

pub fn oracle_merge(field: &Field, subset: &[u8], n_structures: usize) -> Field {
    let groups = merge_groups(subset, n_structures);
    let n = field.n_voxels();
    let mut out = Field::zeros(groups.len(), field.spatial().to_vec());
    for (g, channels) in groups.iter().enumerate() {
        let dst = out.plane_mut(g);
        for &j in channels {
            let src = field.plane(j);
            for v in 0..n {
                dst[v] += src[v];
            }
        }
    }
    out
}

/// Pooled channel that a raw label lands on.
pub fn merged_channel_of(label: u8, subset: &[u8], _n_structures: usize) -> usize {
    let mut members = subset.to_vec();
    members.sort_unstable();
    members.dedup();
    match members.iter().position(|&m| m == label) {
        Some(k) if label != 0 => k + 1,
        _ => 0,
    }
}

// ---------------------------------------------------------------------------
// Reference loss values (scalar only, no gradients).

pub fn oracle_focal_value(
    p: &ProbField,
    labels: &[u8],
    subset: &[u8],
    n_structures: usize,
    gamma: f64,
) -> f64 {
    if subset.is_empty() {
        return 0.0;
    }
    let merged = oracle_merge(p.field(), subset, n_structures);
    let mut sum = 0.0;
    for (v, &l) in labels.iter().enumerate() {
        let q = merged.at(merged_channel_of(l, subset, n_structures), v);
        sum += (1.0 - q).powf(gamma) * q.max(1e-12).ln();
    }
    -sum / labels.len() as f64
}

pub fn oracle_dice_value(
    p: &ProbField,
    labels: &[u8],
    subset: &[u8],
    n_structures: usize,
    epsilon: f64,
) -> f64 {
    if subset.is_empty() {
        return 0.0;
    }
    let merged = oracle_merge(p.field(), subset, n_structures);
    let k = merged.channels();
    let mut ratio_sum = 0.0;
    for c in 0..k {
        let (mut tp, mut fp, mut fneg) = (0.0, 0.0, 0.0);
        for (v, &l) in labels.iter().enumerate() {
            let q = merged.at(c, v);
            if merged_channel_of(l, subset, n_structures) == c {
                tp += q;
                fneg += 1.0 - q;
            } else {
                fp += q;
            }
        }
        ratio_sum += (2.0 * tp + epsilon) / (2.0 * tp + fp + fneg + epsilon);
    }
    1.0 - ratio_sum / k as f64
}

pub fn oracle_entropy_value(p: &ProbField) -> f64 {
    let field = p.field();
    let n = field.n_voxels();
    let mut sum = 0.0;
    for v in 0..n {
        for c in 0..field.channels() {
            let q = field.at(c, v);
            if q > 0.0 {
                sum -= q * q.max(1e-12).ln();
            }
        }
    }
    sum / n as f64
}

/// Plain mean cross-entropy over the full, unpooled channels.
pub fn standard_ce_value(p: &ProbField, labels: &[u8]) -> f64 {
    let field = p.field();
    let mut sum = 0.0;
    for (v, &l) in labels.iter().enumerate() {
        sum -= field.at(l as usize, v).max(1e-12).ln();
    }
    sum / labels.len() as f64
}

/// Textbook soft dice over all channels with one-hot targets.
pub fn standard_soft_dice_value(p: &ProbField, labels: &[u8], epsilon: f64) -> f64 {
    let field = p.field();
    let k = field.channels();
    let mut ratio_sum = 0.0;
    for c in 0..k {
        let (mut tp, mut fp, mut fneg) = (0.0, 0.0, 0.0);
        for (v, &l) in labels.iter().enumerate() {
            let q = field.at(c, v);
            if l as usize == c {
                tp += q;
                fneg += 1.0 - q;
            } else {
                fp += q;
            }
        }
        ratio_sum += (2.0 * tp + epsilon) / (2.0 * tp + fp + fneg + epsilon);
    }
    1.0 - ratio_sum / k as f64
}

// ---------------------------------------------------------------------------
// Finite differences.

/// Central finite-difference gradient of `f` at `x`.
pub fn central_diff(x: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..probe.len())
        .map(|i| {
            let keep = probe[i];
            probe[i] = keep + h;
            let hi = f(&probe);
            probe[i] = keep - h;
            let lo = f(&probe);
            probe[i] = keep;
            (hi - lo) / (2.0 * h)
        })
        .collect()
}

/// Worst elementwise disagreement, relative where the magnitude admits it.
pub fn grad_gap(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| {
            let scale = a.abs().max(n.abs());
            let d = (a - n).abs();
            if scale > 1e-6 {
                d / scale
            } else {
                d
            }
        })
        .fold(0.0, f64::max)
}

// ---------------------------------------------------------------------------
// Hand-built annotated volumes.

pub fn partial_volume(
    shape: &[usize],
    subset_ids: &[u8],
    labels: Vec<u8>,
    dataset: &str,
    modality: &str,
    image: &str,
    classes: &ClassSet,
) -> AnnotatedVolume {
    let n: usize = shape.iter().product();
    AnnotatedVolume::new(
        Volume::new(shape.to_vec(), vec![0.5f32; n]).unwrap(),
        Volume::new(shape.to_vec(), labels).unwrap(),
        Annotation::Partial(AnnotatedSubset::new(subset_ids.iter().copied(), classes).unwrap()),
        dataset.into(),
        modality.into(),
        image.into(),
        classes,
    )
    .unwrap()
}

/// Rank-2 label map with filled rectangles: (class, [row, col] corner,
/// [rows, cols] extent). Later blocks overwrite earlier ones.
pub fn rect_labels(shape: &[usize], blocks: &[(u8, [usize; 2], [usize; 2])]) -> Vec<u8> {
    assert_eq!(shape.len(), 2);
    let mut labels = vec![0u8; shape[0] * shape[1]];
    for &(class, corner, extent) in blocks {
        for r in corner[0]..corner[0] + extent[0] {
            for c in corner[1]..corner[1] + extent[1] {
                labels[r * shape[1] + c] = class;
            }
        }
    }
    labels
}

/// Random image with a random annotation record: either one whole-volume
/// subset or per-slice subsets along axis 0. Labels respect whatever subset
/// governs their view.
pub fn random_annotated(
    rng: &mut ChaCha8Rng,
    shape: &[usize],
    classes: &ClassSet,
    sparse: bool,
    image: &str,
) -> AnnotatedVolume {
    let n: usize = shape.iter().product();
    let intensities: Vec<f32> = (0..n).map(|_| rng.gen::<f32>()).collect();
    let (labels, annotation) = if sparse {
        let extent = shape[0];
        let per_slice: usize = shape[1..].iter().product();
        let mut labels = vec![0u8; n];
        let mut slices = BTreeMap::new();
        for s in 0..extent {
            let subset = random_subset(rng, classes);
            let row = random_labels(rng, subset.members(), per_slice);
            labels[s * per_slice..(s + 1) * per_slice].copy_from_slice(&row);
            if !subset.is_empty() || rng.gen_bool(0.5) {
                slices.insert(s, subset);
            }
        }
        (labels, Annotation::Sparse { axis: 0, slices })
    } else {
        let subset = random_subset(rng, classes);
        let labels = random_labels(rng, subset.members(), n);
        (labels, Annotation::Partial(subset))
    };
    AnnotatedVolume::new(
        Volume::new(shape.to_vec(), intensities).unwrap(),
        Volume::new(shape.to_vec(), labels).unwrap(),
        annotation,
        "d".into(),
        "m".into(),
        image.into(),
        classes,
    )
    .unwrap()
}

/// Four class blocks at fixed corners; the subset decides which are labeled.
pub fn block_image(
    subset: &[u8],
    dataset: &str,
    modality: &str,
    image: &str,
    classes: &ClassSet,
) -> AnnotatedVolume {
    let corners = [[4, 4], [20, 4], [4, 20], [20, 20]];
    let blocks: Vec<(u8, [usize; 2], [usize; 2])> =
        subset.iter().map(|&c| (c, corners[c as usize - 1], [8, 8])).collect();
    let labels = rect_labels(&[32, 32], &blocks);
    partial_volume(&[32, 32], subset, labels, dataset, modality, image, classes)
}

/// Overlapping subsets across two modalities plus two images with nothing
/// annotated at all.
pub fn mixed_corpus(classes: &ClassSet) -> Vec<AnnotatedVolume> {
    let mut vols = vec![];
    for i in 0..3 {
        vols.push(block_image(&[1, 2], "a", "ct", &format!("a_ct_{}", i), classes));
    }
    for i in 0..2 {
        vols.push(block_image(&[1, 3], "b", "mr", &format!("b_mr_{}", i), classes));
    }
    for i in 0..2 {
        vols.push(block_image(&[3, 4], "c", "ct", &format!("c_ct_{}", i), classes));
    }
    for i in 0..2 {
        vols.push(block_image(&[2, 4], "d", "mr", &format!("d_mr_{}", i), classes));
    }
    for i in 0..2 {
        vols.push(block_image(&[], "e", "ct", &format!("e_ct_{}", i), classes));
    }
    vols
}

/// One source dominates: twelve images release class 1, a single image
/// releases class 2. Image-uniform sampling starves the rare class.
pub fn imbalanced_corpus(classes: &ClassSet) -> Vec<AnnotatedVolume> {
    let mut vols = vec![];
    for i in 0..12 {
        let labels = rect_labels(&[48, 48], &[(1, [18, 18], [12, 12])]);
        vols.push(partial_volume(
            &[48, 48],
            &[1],
            labels,
            "big",
            "ct",
            &format!("big_ct_{}", i),
            classes,
        ));
    }
    let labels = rect_labels(&[48, 48], &[(2, [18, 18], [12, 12])]);
    vols.push(partial_volume(&[48, 48], &[2], labels, "small", "ct", "small_ct_0", classes));
    vols
}
