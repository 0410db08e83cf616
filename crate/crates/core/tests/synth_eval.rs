//! Generated corpora against their own ground truth, and the scoring
//! harness against hand-computed overlaps.

mod common;

use ambiseg::eval::{dsc, evaluate, EvalOptions, EvalPair};
use ambiseg::label::{Annotation, ClassSet};
use ambiseg::synth::{evenly_spaced_slices, generate, DatasetSpec, GenSpec, LabelKind};
use ambiseg::volume::Volume;
use common::rng;
use rand::prelude::*;

fn small_spec(seed: u64) -> GenSpec {
    let mut spec = GenSpec::new(
        vec![32, 32],
        4,
        vec![
            DatasetSpec::new("a", "ct", &[1, 2], LabelKind::Partial),
            DatasetSpec::new("b", "mr", &[3], LabelKind::Partial),
            DatasetSpec::new("c", "ct", &[2, 4], LabelKind::Sparse),
        ],
    );
    spec.n_images = 3;
    spec.seed = seed;
    spec
}

#[test]
fn released_labels_agree_with_full_labels() {
    let spec = small_spec(31);
    let corpus = generate(&spec).unwrap();
    assert_eq!(corpus.volumes.len(), 9);
    for gt in &corpus.volumes {
        let released = gt.annotated.labels.data();
        let full = gt.full_labels.data();
        let declared = gt.annotated.annotation.declared_classes();
        for (v, (&r, &f)) in released.iter().zip(full).enumerate() {
            if r != 0 {
                assert_eq!(r, f, "voxel {} of {}", v, gt.annotated.image_id);
                assert!(declared.contains(&r));
            }
        }
        // Nothing outside the dataset subset leaks into the release.
        let subset: &[u8] = match gt.annotated.dataset_id.as_str() {
            "a" => &[1, 2],
            "b" => &[3],
            _ => &[2, 4],
        };
        assert!(declared.iter().all(|c| subset.contains(c)));
    }
}

#[test]
fn sparse_releases_follow_the_slice_schedule() {
    let mut spec = small_spec(38);
    spec.sparse_fraction = 0.25;
    spec.sparse_axis = 0;
    let corpus = generate(&spec).unwrap();
    let annotated_rows = evenly_spaced_slices(32, 0.25);
    for gt in corpus.volumes.iter().filter(|g| g.annotated.dataset_id == "c") {
        match &gt.annotated.annotation {
            Annotation::Sparse { axis, slices } => {
                assert_eq!(*axis, 0);
                let rows: Vec<usize> = slices.keys().copied().collect();
                assert_eq!(rows, annotated_rows);
            }
            other => panic!("dataset c should be sparse, got {:?}", other.kind_str()),
        }
        // Released voxels appear only on scheduled rows.
        for (v, &r) in gt.annotated.labels.data().iter().enumerate() {
            if r != 0 {
                assert!(annotated_rows.contains(&(v / 32)));
            }
        }
    }
}

#[test]
fn slice_schedule_is_even_and_complete() {
    assert_eq!(evenly_spaced_slices(10, 1.0), (0..10).collect::<Vec<_>>());
    assert_eq!(evenly_spaced_slices(10, 0.2), vec![0, 5]);
    assert_eq!(evenly_spaced_slices(48, 0.2), (0..10).map(|j| j * 48 / 10).collect::<Vec<_>>());
    // Tiny fractions still release one slice.
    assert_eq!(evenly_spaced_slices(10, 0.001), vec![0]);
}

#[test]
fn same_seed_regenerates_identical_corpus() {
    let a = generate(&small_spec(33)).unwrap();
    let b = generate(&small_spec(33)).unwrap();
    assert_eq!(a.volumes.len(), b.volumes.len());
    for (x, y) in a.volumes.iter().zip(&b.volumes) {
        assert_eq!(x.annotated, y.annotated);
        assert_eq!(x.full_labels, y.full_labels);
    }

    let c = generate(&small_spec(34)).unwrap();
    assert!(
        a.volumes.iter().zip(&c.volumes).any(|(x, y)| x.annotated.intensities
            != y.annotated.intensities),
        "different seeds should not reproduce the same intensities"
    );
}

#[test]
fn dsc_is_symmetric_and_permutation_invariant() {
    let mut rng = rng(35);
    let shape = vec![6, 6];
    let a: Vec<u8> = (0..36).map(|_| rng.gen_range(0..3)).collect();
    let b: Vec<u8> = (0..36).map(|_| rng.gen_range(0..3)).collect();
    let va = Volume::new(shape.clone(), a.clone()).unwrap();
    let vb = Volume::new(shape.clone(), b.clone()).unwrap();
    for class in [1u8, 2] {
        let ab = dsc(&va, &vb, class).unwrap();
        let ba = dsc(&vb, &va, class).unwrap();
        assert_eq!(ab, ba);
    }

    let mut order: Vec<usize> = (0..36).collect();
    order.shuffle(&mut rng);
    let pa: Vec<u8> = order.iter().map(|&i| a[i]).collect();
    let pb: Vec<u8> = order.iter().map(|&i| b[i]).collect();
    let pva = Volume::new(shape.clone(), pa).unwrap();
    let pvb = Volume::new(shape, pb).unwrap();
    for class in [1u8, 2] {
        assert_eq!(dsc(&va, &vb, class).unwrap(), dsc(&pva, &pvb, class).unwrap());
    }
}

#[test]
fn dsc_matches_hand_counts() {
    // pred marks 4 voxels, truth marks 6, overlap 3.
    let shape = vec![3, 4];
    let mut pred = vec![0u8; 12];
    let mut truth = vec![0u8; 12];
    for i in [0, 1, 2, 5] {
        pred[i] = 1;
    }
    for i in [1, 2, 5, 6, 7, 8] {
        truth[i] = 1;
    }
    let p = Volume::new(shape.clone(), pred).unwrap();
    let t = Volume::new(shape.clone(), truth).unwrap();
    assert_eq!(dsc(&p, &t, 1).unwrap(), Some(2.0 * 3.0 / (4.0 + 6.0)));

    let none = Volume::new(shape, vec![0u8; 12]).unwrap();
    assert_eq!(dsc(&none, &none, 1).unwrap(), None);
    assert_eq!(dsc(&none, &t, 1).unwrap(), Some(0.0));
}

fn scored_pairs(seed: u64) -> (Vec<EvalPair>, ClassSet) {
    let corpus = generate(&small_spec(seed)).unwrap();
    let mut rng = rng(seed ^ 0xe7a1);
    let pairs = corpus
        .volumes
        .iter()
        .map(|gt| {
            // A noisy prediction: the truth with a few voxels scrambled.
            let mut pred = gt.full_labels.data().to_vec();
            for _ in 0..40 {
                let i = rng.gen_range(0..pred.len());
                pred[i] = rng.gen_range(0..=4);
            }
            EvalPair {
                image_id: gt.annotated.image_id.clone(),
                dataset_id: gt.annotated.dataset_id.clone(),
                pred: Volume::new(gt.full_labels.shape().to_vec(), pred).unwrap(),
                truth: gt.full_labels.clone(),
            }
        })
        .collect();
    (pairs, corpus.classes)
}

#[test]
fn report_ignores_pair_order() {
    let (mut pairs, classes) = scored_pairs(36);
    let before = evaluate(&pairs, &classes, EvalOptions::default()).unwrap();
    pairs.reverse();
    let after = evaluate(&pairs, &classes, EvalOptions::default()).unwrap();
    assert_eq!(before.subject_level.mean, after.subject_level.mean);
    assert_eq!(before.structure_grand_mean, after.structure_grand_mean);
    assert_eq!(before.subjects, after.subjects);
    assert_eq!(before.structures, after.structures);
    for (d, _) in &before.datasets {
        assert_eq!(
            before.dataset_mean(d).unwrap().mean,
            after.dataset_mean(d).unwrap().mean
        );
    }
}

#[test]
fn perfect_predictions_score_one_everywhere() {
    let corpus = generate(&small_spec(37)).unwrap();
    let pairs: Vec<EvalPair> = corpus
        .volumes
        .iter()
        .map(|gt| EvalPair {
            image_id: gt.annotated.image_id.clone(),
            dataset_id: gt.annotated.dataset_id.clone(),
            pred: gt.full_labels.clone(),
            truth: gt.full_labels.clone(),
        })
        .collect();
    let report = evaluate(&pairs, &corpus.classes, EvalOptions::default()).unwrap();
    assert_eq!(report.subject_level.mean, 1.0);
    assert_eq!(report.structure_grand_mean, 1.0);
    for (_, stat) in &report.structures {
        assert_eq!(stat.mean, 1.0);
        assert_eq!(stat.sd, 0.0);
    }
}
