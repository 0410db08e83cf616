//! DSC evaluation and its three aggregation protocols.
//!
//! A pair is one (image, class). Classes absent from an image's true labels
//! are excluded upstream, so a hallucinated structure in an image that never
//! contains it costs nothing; a flag instead scores empty-empty pairs as 1.
//! Aggregations: per subject (mean over a subject's pairs, then across
//! subjects), per structure (mean over images containing the class, grand
//! mean across classes), per dataset (subject means grouped by dataset).

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::label::{AnnotatedVolume, ClassSet, ProbField};
use crate::loss::softmax;
use crate::net::TinyNet;
use crate::volume::Volume;

#[derive(Debug, Clone, Default)]
pub struct EvalOptions {
    /// Score pairs where prediction and truth are both empty as 1.0 instead
    /// of excluding them.
    pub score_empty_pairs: bool,
    /// Restrict scoring to these classes; `None` scores the whole universe.
    pub class_filter: Option<Vec<u8>>,
}

#[derive(Debug, Clone)]
pub struct EvalPair {
    pub image_id: String,
    pub dataset_id: String,
    pub pred: Volume<u8>,
    pub truth: Volume<u8>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairScore {
    pub image_id: String,
    pub dataset_id: String,
    pub class_id: u8,
    pub dsc: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeanSd {
    pub mean: f64,
    pub sd: f64,
    pub n: usize,
}

impl MeanSd {
    /// Population standard deviation.
    pub fn of(values: &[f64]) -> MeanSd {
        let n = values.len();
        if n == 0 {
            return MeanSd { mean: f64::NAN, sd: f64::NAN, n: 0 };
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        MeanSd { mean, sd: var.sqrt(), n }
    }
}

/// 2|P∩T| / (|P|+|T|) for one class; `None` when both masks are empty.
pub fn dsc(pred: &Volume<u8>, truth: &Volume<u8>, class_id: u8) -> Result<Option<f64>> {
    if pred.shape() != truth.shape() {
        return Err(Error::Eval(format!(
            "prediction shape {:?} != truth shape {:?}",
            pred.shape(),
            truth.shape()
        )));
    }
    let mut p = 0u64;
    let mut t = 0u64;
    let mut both = 0u64;
    for (&a, &b) in pred.data().iter().zip(truth.data()) {
        let in_p = a == class_id;
        let in_t = b == class_id;
        p += in_p as u64;
        t += in_t as u64;
        both += (in_p && in_t) as u64;
    }
    if p + t == 0 {
        return Ok(None);
    }
    Ok(Some(2.0 * both as f64 / (p + t) as f64))
}

#[derive(Debug, Clone)]
pub struct EvalReport {
    pub pairs: Vec<PairScore>,
    pub n_excluded: usize,
    /// Per-subject mean over that subject's scored pairs.
    pub subjects: Vec<(String, f64)>,
    /// Mean and sd across subject means.
    pub subject_level: MeanSd,
    /// Per-class mean over the images containing the class.
    pub structures: Vec<(u8, MeanSd)>,
    /// Mean of the per-class means.
    pub structure_grand_mean: f64,
    /// Subject means grouped by dataset.
    pub datasets: Vec<(String, MeanSd)>,
}

impl EvalReport {
    pub fn dataset_mean(&self, dataset_id: &str) -> Result<MeanSd> {
        self.datasets
            .iter()
            .find(|(d, _)| d == dataset_id)
            .map(|(_, m)| *m)
            .ok_or_else(|| Error::Eval(format!("unknown dataset id {:?}", dataset_id)))
    }

    pub fn structure_mean(&self, class_id: u8) -> Result<MeanSd> {
        self.structures
            .iter()
            .find(|(c, _)| *c == class_id)
            .map(|(_, m)| *m)
            .ok_or_else(|| Error::Eval(format!("class {} scored in no image", class_id)))
    }

    /// Human-readable tables, percentages with one decimal.
    pub fn render(&self) -> String {
        let pct = |v: f64| format!("{:.1}", 100.0 * v);
        let mut out = String::new();
        out.push_str("subject\tdataset\tdsc\n");
        let ds_of: BTreeMap<&str, &str> = self
            .pairs
            .iter()
            .map(|p| (p.image_id.as_str(), p.dataset_id.as_str()))
            .collect();
        for (s, m) in &self.subjects {
            out.push_str(&format!("{}\t{}\t{}\n", s, ds_of.get(s.as_str()).unwrap_or(&"?"), pct(*m)));
        }
        out.push_str(&format!(
            "\nsubject_level\t{} ± {} (n={})\n",
            pct(self.subject_level.mean),
            pct(self.subject_level.sd),
            self.subject_level.n
        ));
        out.push_str("\nstructure\tdsc\tn_images\n");
        for (c, m) in &self.structures {
            out.push_str(&format!("{}\t{} ± {}\t{}\n", c, pct(m.mean), pct(m.sd), m.n));
        }
        out.push_str(&format!("structure_grand_mean\t{}\n", pct(self.structure_grand_mean)));
        out.push_str("\ndataset\tdsc\tn_subjects\n");
        for (d, m) in &self.datasets {
            out.push_str(&format!("{}\t{} ± {}\t{}\n", d, pct(m.mean), pct(m.sd), m.n));
        }
        out
    }

    /// Machine-readable key=value lines at full precision.
    pub fn to_kv(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("subject_mean={}\n", self.subject_level.mean));
        out.push_str(&format!("subject_sd={}\n", self.subject_level.sd));
        out.push_str(&format!("n_subjects={}\n", self.subject_level.n));
        out.push_str(&format!("structure_grand_mean={}\n", self.structure_grand_mean));
        out.push_str(&format!("n_pairs={}\n", self.pairs.len()));
        out.push_str(&format!("n_excluded={}\n", self.n_excluded));
        for (c, m) in &self.structures {
            out.push_str(&format!("structure.{}.mean={}\n", c, m.mean));
            out.push_str(&format!("structure.{}.sd={}\n", c, m.sd));
        }
        for (d, m) in &self.datasets {
            out.push_str(&format!("dataset.{}.mean={}\n", d, m.mean));
            out.push_str(&format!("dataset.{}.sd={}\n", d, m.sd));
        }
        out
    }
}

pub fn evaluate(pairs: &[EvalPair], classes: &ClassSet, opts: EvalOptions) -> Result<EvalReport> {
    if pairs.is_empty() {
        return Err(Error::Eval("empty evaluation set".into()));
    }
    let scored_classes: Vec<u8> = match &opts.class_filter {
        None => classes.members().collect(),
        Some(filter) => {
            if filter.is_empty() {
                return Err(Error::Eval("class filter selects nothing".into()));
            }
            for &c in filter {
                if !classes.contains(c) {
                    return Err(Error::Eval(format!(
                        "class {} is outside the corpus universe 1..={}",
                        c,
                        classes.n_structures()
                    )));
                }
            }
            let mut f = filter.clone();
            f.sort_unstable();
            f.dedup();
            f
        }
    };
    let mut scored = vec![];
    let mut n_excluded = 0usize;
    for item in pairs {
        for &class_id in &scored_classes {
            let t_count = item.truth.data().iter().filter(|&&l| l == class_id).count();
            if t_count > 0 {
                let d = dsc(&item.pred, &item.truth, class_id)?.expect("nonempty truth");
                scored.push(PairScore {
                    image_id: item.image_id.clone(),
                    dataset_id: item.dataset_id.clone(),
                    class_id,
                    dsc: d,
                });
            } else if opts.score_empty_pairs
                && item.pred.data().iter().all(|&l| l != class_id)
            {
                scored.push(PairScore {
                    image_id: item.image_id.clone(),
                    dataset_id: item.dataset_id.clone(),
                    class_id,
                    dsc: 1.0,
                });
            } else {
                n_excluded += 1;
            }
        }
    }
    if scored.is_empty() {
        return Err(Error::Eval("every (image, class) pair was excluded".into()));
    }

    // Aggregate in sorted (image, class) order so every reported number is
    // independent of the input ordering, bit for bit.
    let mut canon: Vec<&PairScore> = scored.iter().collect();
    canon.sort_by(|a, b| (&a.image_id, a.class_id).cmp(&(&b.image_id, b.class_id)));

    let mut subject_scores: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    let mut subject_dataset: BTreeMap<String, String> = BTreeMap::new();
    for p in &canon {
        subject_scores.entry(p.image_id.clone()).or_default().push(p.dsc);
        subject_dataset.entry(p.image_id.clone()).or_insert_with(|| p.dataset_id.clone());
    }
    let subjects: Vec<(String, f64)> = subject_scores
        .iter()
        .map(|(s, v)| (s.clone(), v.iter().sum::<f64>() / v.len() as f64))
        .collect();
    let subject_level = MeanSd::of(&subjects.iter().map(|(_, m)| *m).collect::<Vec<_>>());

    // Per-structure means across images.
    let mut by_class: BTreeMap<u8, Vec<f64>> = BTreeMap::new();
    for p in &canon {
        by_class.entry(p.class_id).or_default().push(p.dsc);
    }
    let structures: Vec<(u8, MeanSd)> =
        by_class.iter().map(|(c, v)| (*c, MeanSd::of(v))).collect();
    let structure_grand_mean =
        structures.iter().map(|(_, m)| m.mean).sum::<f64>() / structures.len() as f64;

    // Subject means grouped by dataset.
    let mut by_dataset: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for (s, m) in &subjects {
        by_dataset.entry(subject_dataset[s].clone()).or_default().push(*m);
    }
    let datasets: Vec<(String, MeanSd)> =
        by_dataset.iter().map(|(d, v)| (d.clone(), MeanSd::of(v))).collect();

    Ok(EvalReport {
        pairs: scored,
        n_excluded,
        subjects,
        subject_level,
        structures,
        structure_grand_mean,
        datasets,
    })
}

/// Argmax class map from the network's logits.
pub fn predict(net: &TinyNet, intensities: &Volume<f32>) -> Result<Volume<u8>> {
    let pass = net.forward(intensities)?;
    let n = pass.logits.n_voxels();
    let c = pass.logits.channels();
    let mut out = vec![0u8; n];
    for v in 0..n {
        let mut best = 0usize;
        let mut best_val = pass.logits.at(0, v);
        for ch in 1..c {
            let val = pass.logits.at(ch, v);
            if val > best_val {
                best_val = val;
                best = ch;
            }
        }
        out[v] = best as u8;
    }
    Volume::new(intensities.shape().to_vec(), out)
}

/// Softmax probabilities from the network.
pub fn predict_probs(net: &TinyNet, intensities: &Volume<f32>) -> Result<ProbField> {
    let pass = net.forward(intensities)?;
    softmax(&pass.logits)
}

/// True where the released label is 0, i.e. the voxel is unannotated.
pub fn unannotated_mask(vol: &AnnotatedVolume) -> Vec<bool> {
    vol.labels.data().iter().map(|&l| l == 0).collect()
}

/// Mean Shannon entropy of the per-voxel distributions under the mask.
pub fn mean_entropy(probs: &ProbField, mask: &[bool]) -> Result<f64> {
    let field = probs.field();
    if mask.len() != field.n_voxels() {
        return Err(Error::Eval(format!(
            "mask length {} != voxel count {}",
            mask.len(),
            field.n_voxels()
        )));
    }
    let mut sum = 0.0;
    let mut count = 0usize;
    for (v, &keep) in mask.iter().enumerate() {
        if !keep {
            continue;
        }
        let mut h = 0.0;
        for c in 0..field.channels() {
            let q = field.at(c, v);
            if q > 0.0 {
                h -= q * q.ln();
            }
        }
        sum += h;
        count += 1;
    }
    if count == 0 {
        return Err(Error::Eval("mask selects no voxels".into()));
    }
    Ok(sum / count as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vol(shape: Vec<usize>, data: Vec<u8>) -> Volume<u8> {
        Volume::new(shape, data).unwrap()
    }

    #[test]
    fn dsc_basics() {
        let a = vol(vec![4], vec![1, 1, 0, 0]);
        let b = vol(vec![4], vec![1, 1, 0, 0]);
        assert_eq!(dsc(&a, &b, 1).unwrap(), Some(1.0));

        let c = vol(vec![4], vec![1, 1, 0, 0]);
        let d = vol(vec![4], vec![0, 0, 1, 1]);
        assert_eq!(dsc(&c, &d, 1).unwrap(), Some(0.0));

        // |P| = 2, |T| = 2, overlap 1.
        let e = vol(vec![4], vec![1, 1, 0, 0]);
        let f = vol(vec![4], vec![0, 1, 1, 0]);
        assert_eq!(dsc(&e, &f, 1).unwrap(), Some(0.5));

        assert_eq!(dsc(&a, &b, 2).unwrap(), None);
        let g = vol(vec![2], vec![0, 0]);
        assert!(dsc(&a, &g, 1).is_err());
    }

    #[test]
    fn dsc_symmetric_and_permutation_invariant() {
        let a = vol(vec![6], vec![1, 0, 1, 2, 0, 1]);
        let b = vol(vec![6], vec![1, 1, 0, 2, 0, 1]);
        assert_eq!(dsc(&a, &b, 1).unwrap(), dsc(&b, &a, 1).unwrap());
        let perm = [5, 3, 0, 4, 1, 2];
        let ap = vol(vec![6], perm.iter().map(|&i| a.data()[i]).collect());
        let bp = vol(vec![6], perm.iter().map(|&i| b.data()[i]).collect());
        assert_eq!(dsc(&a, &b, 1).unwrap(), dsc(&ap, &bp, 1).unwrap());
    }

    fn two_subject_pairs() -> Vec<EvalPair> {
        // Subject a: class 1 perfect (1.0), class 2 half (0.5).
        // Subject b: class 1 at 0.9 is hard to build exactly; use disjoint
        // sizes to land on a clean ratio instead: |P|=|T|=2, overlap 2 → 1.0
        // then replace one voxel for 2·1/4 = 0.5... keep it simple: 1.0.
        let a_truth = vol(vec![8], vec![1, 1, 2, 2, 0, 0, 0, 0]);
        let a_pred = vol(vec![8], vec![1, 1, 2, 0, 2, 0, 0, 0]);
        let b_truth = vol(vec![4], vec![1, 1, 0, 0]);
        let b_pred = vol(vec![4], vec![1, 1, 0, 0]);
        vec![
            EvalPair {
                image_id: "ds1_ct_a".into(),
                dataset_id: "ds1".into(),
                pred: a_pred,
                truth: a_truth,
            },
            EvalPair {
                image_id: "ds2_ct_b".into(),
                dataset_id: "ds2".into(),
                pred: b_pred,
                truth: b_truth,
            },
        ]
    }

    #[test]
    fn aggregation_protocols() {
        let pairs = two_subject_pairs();
        let classes = ClassSet::new(2).unwrap();
        let report = evaluate(&pairs, &classes, EvalOptions::default()).unwrap();

        // Subject a: (1.0 + 0.5)/2 = 0.75; subject b: 1.0 (class 2 absent
        // from truth and prediction is penalty-free: excluded).
        assert_eq!(report.subjects.len(), 2);
        assert!((report.subjects[0].1 - 0.75).abs() < 1e-12);
        assert!((report.subjects[1].1 - 1.0).abs() < 1e-12);
        assert!((report.subject_level.mean - 0.875).abs() < 1e-12);
        assert!((report.subject_level.sd - 0.125).abs() < 1e-12);

        // Structures: class 1 over both images (1.0, 1.0) → 1.0; class 2 only
        // in image a → 0.5. Grand mean (1.0 + 0.5)/2 = 0.75.
        assert_eq!(report.structure_mean(1).unwrap().n, 2);
        assert!((report.structure_mean(1).unwrap().mean - 1.0).abs() < 1e-12);
        assert!((report.structure_mean(2).unwrap().mean - 0.5).abs() < 1e-12);
        assert!((report.structure_grand_mean - 0.75).abs() < 1e-12);

        // Datasets: ds1 holds subject a, ds2 subject b.
        assert!((report.dataset_mean("ds1").unwrap().mean - 0.75).abs() < 1e-12);
        assert!((report.dataset_mean("ds2").unwrap().mean - 1.0).abs() < 1e-12);
        assert!(report.dataset_mean("ds3").is_err());

        assert_eq!(report.n_excluded, 1);
    }

    #[test]
    fn order_invariance() {
        let mut pairs = two_subject_pairs();
        let classes = ClassSet::new(2).unwrap();
        let fwd = evaluate(&pairs, &classes, EvalOptions::default()).unwrap();
        pairs.reverse();
        let rev = evaluate(&pairs, &classes, EvalOptions::default()).unwrap();
        assert_eq!(fwd.subject_level, rev.subject_level);
        assert_eq!(fwd.structure_grand_mean, rev.structure_grand_mean);
        assert_eq!(fwd.datasets, rev.datasets);
    }

    #[test]
    fn perfect_predictions_score_exactly_one() {
        let truth = vol(vec![3, 3], vec![0, 1, 1, 2, 2, 0, 3, 0, 0]);
        let pairs = vec![EvalPair {
            image_id: "d_m_x".into(),
            dataset_id: "d".into(),
            pred: truth.clone(),
            truth,
        }];
        let classes = ClassSet::new(3).unwrap();
        let report = evaluate(&pairs, &classes, EvalOptions::default()).unwrap();
        assert_eq!(report.subject_level.mean, 1.0);
        assert_eq!(report.structure_grand_mean, 1.0);
        assert_eq!(report.datasets[0].1.mean, 1.0);
    }

    #[test]
    fn empty_pair_flag() {
        let truth = vol(vec![4], vec![1, 1, 0, 0]);
        let pred = vol(vec![4], vec![1, 1, 0, 0]);
        let pairs = vec![EvalPair {
            image_id: "d_m_x".into(),
            dataset_id: "d".into(),
            pred,
            truth,
        }];
        let classes = ClassSet::new(2).unwrap();
        let strict = evaluate(&pairs, &classes, EvalOptions::default()).unwrap();
        assert_eq!(strict.pairs.len(), 1);
        assert_eq!(strict.n_excluded, 1);
        let lenient = evaluate(
            &pairs,
            &classes,
            EvalOptions { score_empty_pairs: true, ..EvalOptions::default() },
        )
        .unwrap();
        assert_eq!(lenient.pairs.len(), 2);
        assert_eq!(lenient.n_excluded, 0);
        assert_eq!(lenient.subjects[0].1, 1.0);
    }

    #[test]
    fn class_filter_restricts_and_validates() {
        let pairs = two_subject_pairs();
        let classes = ClassSet::new(2).unwrap();
        let only_1 = evaluate(
            &pairs,
            &classes,
            EvalOptions { class_filter: Some(vec![1]), ..EvalOptions::default() },
        )
        .unwrap();
        assert_eq!(only_1.structures.len(), 1);
        assert_eq!(only_1.structures[0].0, 1);
        assert_eq!(only_1.structure_grand_mean, 1.0);
        for bad in [vec![0], vec![3], vec![]] {
            let opts = EvalOptions { class_filter: Some(bad), ..EvalOptions::default() };
            assert!(evaluate(&pairs, &classes, opts).is_err());
        }
    }

    #[test]
    fn empty_set_errors() {
        let classes = ClassSet::new(2).unwrap();
        assert!(evaluate(&[], &classes, EvalOptions::default()).is_err());
    }

    #[test]
    fn render_uses_percent_with_one_decimal() {
        let pairs = two_subject_pairs();
        let classes = ClassSet::new(2).unwrap();
        let report = evaluate(&pairs, &classes, EvalOptions::default()).unwrap();
        let text = report.render();
        assert!(text.contains("87.5"), "render:\n{}", text);
        assert!(text.contains("75.0"));
        let kv = report.to_kv();
        assert!(kv.contains("subject_mean=0.875"));
        assert!(kv.contains("structure.2.mean=0.5"));
    }

    #[test]
    fn entropy_mask_helpers() {
        use crate::volume::Field;
        let mut f = Field::zeros(2, vec![2, 2]);
        f.plane_mut(0).copy_from_slice(&[0.5, 1.0, 0.5, 0.25]);
        f.plane_mut(1).copy_from_slice(&[0.5, 0.0, 0.5, 0.75]);
        let p = ProbField::new(f).unwrap();
        let mask = vec![true, true, false, false];
        // Voxel 0: ln 2; voxel 1: 0.
        let got = mean_entropy(&p, &mask).unwrap();
        assert!((got - 0.5 * std::f64::consts::LN_2).abs() < 1e-12);
        assert!(mean_entropy(&p, &[false; 4]).is_err());
        assert!(mean_entropy(&p, &[true; 3]).is_err());
    }
}
