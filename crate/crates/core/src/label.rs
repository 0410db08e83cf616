//! Label universe, annotation records, and the merged-background mapping.
//!
//! A corpus knows N structure classes (ids 1..=N) plus the implicit
//! background id 0. Any single image only annotates a subset of the classes,
//! either throughout the volume ("partial") or on selected slices ("sparse").
//! Voxels labeled 0 are *ambiguous*: they may be real background or any
//! unannotated structure. The merge operations below pool those
//! possibilities into a single merged-background channel so that losses can
//! treat the ambiguity honestly.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::volume::{Field, ViewSpan, Volume};

/// The class universe: structure ids 1..=N. Background 0 is implicit.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ClassSet {
    n_structures: usize,
}

impl ClassSet {
    pub fn new(n_structures: usize) -> Result<Self> {
        if n_structures == 0 || n_structures > u8::MAX as usize {
            return Err(Error::Contract(format!(
                "number of structures must be in 1..=255, got {}",
                n_structures
            )));
        }
        Ok(ClassSet { n_structures })
    }

    pub fn n_structures(&self) -> usize {
        self.n_structures
    }

    /// Channel count of an unmerged probability field: N structures + background.
    pub fn n_channels(&self) -> usize {
        self.n_structures + 1
    }

    pub fn members(&self) -> impl Iterator<Item = u8> {
        1..=self.n_structures as u8
    }

    pub fn contains(&self, id: u8) -> bool {
        id >= 1 && (id as usize) <= self.n_structures
    }
}

/// A sorted, duplicate-free set of annotated class ids. May be empty
/// (a fully unannotated slice or volume).
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct AnnotatedSubset {
    members: Vec<u8>,
}

impl AnnotatedSubset {
    pub fn new(ids: impl IntoIterator<Item = u8>, classes: &ClassSet) -> Result<Self> {
        let mut members: Vec<u8> = ids.into_iter().collect();
        members.sort_unstable();
        members.dedup();
        for &id in &members {
            if !classes.contains(id) {
                return Err(Error::InvalidAnnotation(format!(
                    "class id {} outside universe 1..={}",
                    id,
                    classes.n_structures()
                )));
            }
        }
        Ok(AnnotatedSubset { members })
    }

    pub fn empty() -> Self {
        AnnotatedSubset { members: vec![] }
    }

    /// Sorted and deduplicated, but not checked against any class universe.
    /// For callers that learn the universe only later, e.g. manifest parsing.
    pub fn from_ids(ids: impl IntoIterator<Item = u8>) -> Self {
        let mut members: Vec<u8> = ids.into_iter().collect();
        members.sort_unstable();
        members.dedup();
        AnnotatedSubset { members }
    }

    /// The full universe as a subset (merge becomes the identity).
    pub fn full(classes: &ClassSet) -> Self {
        AnnotatedSubset { members: classes.members().collect() }
    }

    pub fn members(&self) -> &[u8] {
        &self.members
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn contains(&self, id: u8) -> bool {
        self.members.binary_search(&id).is_ok()
    }
}

/// How an image's released labels are governed.
#[derive(Debug, Clone, PartialEq)]
pub enum Annotation {
    /// One subset governs the whole volume.
    Partial(AnnotatedSubset),
    /// Per-slice subsets along one axis. Slices absent from the map carry
    /// empty subsets. Mixed-axis sparse annotation is not representable.
    Sparse { axis: usize, slices: BTreeMap<usize, AnnotatedSubset> },
}

impl Annotation {
    pub fn kind_str(&self) -> &'static str {
        match self {
            Annotation::Partial(_) => "partial",
            Annotation::Sparse { .. } => "sparse",
        }
    }

    /// Union of all class ids that appear in any governing subset.
    pub fn declared_classes(&self) -> Vec<u8> {
        let mut out: Vec<u8> = match self {
            Annotation::Partial(s) => s.members().to_vec(),
            Annotation::Sparse { slices, .. } => {
                slices.values().flat_map(|s| s.members().iter().copied()).collect()
            }
        };
        out.sort_unstable();
        out.dedup();
        out
    }

    /// True when no view carries any annotated class.
    pub fn is_fully_unannotated(&self) -> bool {
        self.declared_classes().is_empty()
    }
}

/// An image with its released labels and the annotation record that governs
/// them. Labels are 0..=N where 0 means "unannotated/ambiguous", never
/// "confirmed background".
#[derive(Debug, Clone, PartialEq)]
pub struct AnnotatedVolume {
    pub intensities: Volume<f32>,
    pub labels: Volume<u8>,
    pub annotation: Annotation,
    pub dataset_id: String,
    pub modality_id: String,
    pub image_id: String,
}

impl AnnotatedVolume {
    pub fn new(
        intensities: Volume<f32>,
        labels: Volume<u8>,
        annotation: Annotation,
        dataset_id: String,
        modality_id: String,
        image_id: String,
        classes: &ClassSet,
    ) -> Result<Self> {
        let v = AnnotatedVolume { intensities, labels, annotation, dataset_id, modality_id, image_id };
        v.validate(classes)?;
        Ok(v)
    }

    pub fn shape(&self) -> &[usize] {
        self.intensities.shape()
    }

    pub fn validate(&self, classes: &ClassSet) -> Result<()> {
        if self.intensities.shape() != self.labels.shape() {
            return Err(Error::InvalidAnnotation(format!(
                "intensity shape {:?} != label shape {:?}",
                self.intensities.shape(),
                self.labels.shape()
            )));
        }
        if let Some(bad) = self.intensities.data().iter().find(|x| !x.is_finite()) {
            return Err(Error::InvalidAnnotation(format!("non-finite intensity {}", bad)));
        }
        let n = classes.n_structures() as u8;
        let over: usize = self.labels.data().iter().filter(|&&l| l > n).count();
        if over > 0 {
            return Err(Error::InvalidAnnotation(format!(
                "{} voxels carry labels above the class universe (N={})",
                over, n
            )));
        }
        match &self.annotation {
            Annotation::Partial(subset) => {
                for &l in self.labels.data() {
                    if l > 0 && !subset.contains(l) {
                        return Err(Error::InvalidAnnotation(format!(
                            "voxel labeled {} but volume subset is {:?}",
                            l,
                            subset.members()
                        )));
                    }
                }
            }
            Annotation::Sparse { axis, slices } => {
                let shape = self.labels.shape();
                if *axis >= shape.len() {
                    return Err(Error::InvalidAnnotation(format!(
                        "sparse axis {} out of range for shape {:?}",
                        axis, shape
                    )));
                }
                if let Some((&i, _)) = slices.iter().find(|(&i, _)| i >= shape[*axis]) {
                    return Err(Error::InvalidAnnotation(format!(
                        "sparse slice index {} out of range for axis {} (extent {})",
                        i, axis, shape[*axis]
                    )));
                }
                let empty = AnnotatedSubset::empty();
                for i in 0..shape[*axis] {
                    let subset = slices.get(&i).unwrap_or(&empty);
                    let span = ViewSpan::slice(shape, *axis, i)?;
                    for idx in span.indices() {
                        let l = self.labels.data()[idx];
                        if l > 0 && !subset.contains(l) {
                            return Err(Error::InvalidAnnotation(format!(
                                "slice {} along axis {} has voxel labeled {} outside its subset {:?}",
                                i,
                                axis,
                                l,
                                subset.members()
                            )));
                        }
                    }
                }
            }
        }
        Ok(())
    }

    /// The loss views of this volume as index spans: the whole volume for a
    /// partial annotation, one span per slice (annotated or not) for sparse.
    pub fn view_spans(&self) -> Result<Vec<(ViewSpan, AnnotatedSubset)>> {
        let shape = self.labels.shape();
        match &self.annotation {
            Annotation::Partial(subset) => {
                Ok(vec![(ViewSpan::whole(self.labels.len()), subset.clone())])
            }
            Annotation::Sparse { axis, slices } => {
                let mut out = Vec::with_capacity(shape[*axis]);
                for i in 0..shape[*axis] {
                    let subset = slices.get(&i).cloned().unwrap_or_else(AnnotatedSubset::empty);
                    out.push((ViewSpan::slice(shape, *axis, i)?, subset));
                }
                Ok(out)
            }
        }
    }
}

/// One materialized view: the intensities and labels of a slice (or the whole
/// volume) together with the subset governing it.
#[derive(Debug, Clone, PartialEq)]
pub struct View {
    pub intensities: Volume<f32>,
    pub labels: Volume<u8>,
    pub subset: AnnotatedSubset,
}

/// Materialize the views of a volume. Sparse volumes yield one view per slice
/// along the annotation axis (slices without annotations carry empty
/// subsets); partial volumes yield a single whole-volume view.
pub fn slice_views(v: &AnnotatedVolume) -> Result<Vec<View>> {
    let shape = v.shape();
    let spans = v.view_spans()?;
    let view_shape: Vec<usize> = match &v.annotation {
        Annotation::Partial(_) => shape.to_vec(),
        Annotation::Sparse { axis, .. } => {
            let mut s = shape.to_vec();
            s.remove(*axis);
            s
        }
    };
    spans
        .into_iter()
        .map(|(span, subset)| {
            let gather_f32: Vec<f32> =
                span.indices().map(|i| v.intensities.data()[i]).collect();
            let gather_u8: Vec<u8> = span.indices().map(|i| v.labels.data()[i]).collect();
            Ok(View {
                intensities: Volume::new(view_shape.clone(), gather_f32)?,
                labels: Volume::new(view_shape.clone(), gather_u8)?,
                subset,
            })
        })
        .collect()
}

/// Per-voxel probability vectors over the N+1 unmerged channels.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbField(Field);

impl ProbField {
    /// Validates nonnegativity and per-voxel sums within 1e-6 of 1.
    pub fn new(field: Field) -> Result<Self> {
        let n = field.n_voxels();
        for v in 0..n {
            let mut sum = 0.0;
            for c in 0..field.channels() {
                let p = field.at(c, v);
                if !(p >= 0.0) {
                    return Err(Error::Contract(format!(
                        "probability {} at channel {}, voxel {} is negative or NaN",
                        p, c, v
                    )));
                }
                sum += p;
            }
            if (sum - 1.0).abs() > 1e-6 {
                return Err(Error::Contract(format!(
                    "voxel {} probabilities sum to {}, expected 1",
                    v, sum
                )));
            }
        }
        Ok(ProbField(field))
    }

    /// Wrap a field that is normalized by construction (softmax output,
    /// gathered softmax columns). Debug builds still verify.
    pub(crate) fn new_unchecked(field: Field) -> Self {
        #[cfg(debug_assertions)]
        {
            let n = field.n_voxels();
            for v in 0..n {
                let sum: f64 = (0..field.channels()).map(|c| field.at(c, v)).sum();
                debug_assert!((sum - 1.0).abs() <= 1e-6, "voxel {} sums to {}", v, sum);
            }
        }
        ProbField(field)
    }

    pub fn field(&self) -> &Field {
        &self.0
    }

    pub fn into_field(self) -> Field {
        self.0
    }
}

/// Per-voxel one-hot vectors over the N+1 unmerged channels.
#[derive(Debug, Clone, PartialEq)]
pub struct OneHotField(Field);

impl OneHotField {
    pub fn new(field: Field) -> Result<Self> {
        let n = field.n_voxels();
        for v in 0..n {
            let mut ones = 0;
            for c in 0..field.channels() {
                let x = field.at(c, v);
                if x != 0.0 && x != 1.0 {
                    return Err(Error::Contract(format!(
                        "one-hot field holds {} at channel {}, voxel {}",
                        x, c, v
                    )));
                }
                if x == 1.0 {
                    ones += 1;
                }
            }
            if ones != 1 {
                return Err(Error::Contract(format!(
                    "voxel {} has {} hot channels, expected exactly 1",
                    v, ones
                )));
            }
        }
        Ok(OneHotField(field))
    }

    /// Encode integer labels (0..=N) as one-hot vectors over N+1 channels.
    pub fn from_labels(labels: &[u8], classes: &ClassSet) -> Result<Self> {
        let mut field = Field::zeros(classes.n_channels(), vec![labels.len()]);
        let n = labels.len();
        for (v, &l) in labels.iter().enumerate() {
            if l as usize >= classes.n_channels() {
                return Err(Error::Contract(format!(
                    "label {} outside 0..={}",
                    l,
                    classes.n_structures()
                )));
            }
            field.data_mut()[l as usize * n + v] = 1.0;
        }
        Ok(OneHotField(field))
    }

    pub fn field(&self) -> &Field {
        &self.0
    }
}

/// Precomputed channel mapping for one subset: original channel j goes to
/// merged channel `merged_of[j]`. Merged channel 0 pools background with
/// every class outside the subset; merged channel k (k >= 1) is the k-th
/// member of the sorted subset.
#[derive(Debug, Clone)]
pub struct MergeMap {
    merged_of: Vec<usize>,
    n_merged: usize,
}

impl MergeMap {
    pub fn new(subset: &AnnotatedSubset, classes: &ClassSet) -> Result<Self> {
        for &id in subset.members() {
            if !classes.contains(id) {
                return Err(Error::InvalidAnnotation(format!(
                    "subset member {} outside universe 1..={}",
                    id,
                    classes.n_structures()
                )));
            }
        }
        let mut merged_of = vec![0usize; classes.n_channels()];
        for (k, &id) in subset.members().iter().enumerate() {
            merged_of[id as usize] = k + 1;
        }
        Ok(MergeMap { merged_of, n_merged: subset.len() + 1 })
    }

    pub fn n_merged(&self) -> usize {
        self.n_merged
    }

    /// Merged channel index for original channel `j`.
    pub fn merged_of(&self, j: usize) -> usize {
        self.merged_of[j]
    }

    pub fn merged_of_label(&self, label: u8) -> usize {
        self.merged_of[label as usize]
    }

    /// Original channels pooled into merged channel 0, ascending.
    pub fn background_group(&self) -> impl Iterator<Item = usize> + '_ {
        self.merged_of.iter().enumerate().filter(|(_, &m)| m == 0).map(|(j, _)| j)
    }
}

/// Pool probability mass of unannotated classes into the merged background.
/// Output channel 0 sums channel 0 and every class outside the subset (in
/// ascending channel order); output channel k copies the k-th subset member.
pub fn merge_probs(p: &ProbField, subset: &AnnotatedSubset, classes: &ClassSet) -> Result<Field> {
    let field = p.field();
    if field.channels() != classes.n_channels() {
        return Err(Error::Contract(format!(
            "probability field has {} channels, universe needs {}",
            field.channels(),
            classes.n_channels()
        )));
    }
    let map = MergeMap::new(subset, classes)?;
    Ok(merge_field(field, &map))
}

pub(crate) fn merge_field(field: &Field, map: &MergeMap) -> Field {
    let n = field.n_voxels();
    let mut out = Field::zeros(map.n_merged(), field.spatial().to_vec());
    for j in map.background_group() {
        let src = field.plane(j);
        let dst = out.plane_mut(0);
        for v in 0..n {
            dst[v] += src[v];
        }
    }
    for j in 0..field.channels() {
        let m = map.merged_of(j);
        if m != 0 {
            out.plane_mut(m).copy_from_slice(field.plane(j));
        }
    }
    out
}

/// Map one-hot targets into the merged space. Label-0 voxels land on merged
/// channel 0; annotated voxels land on their class's merged channel.
pub fn merge_targets(y: &OneHotField, subset: &AnnotatedSubset, classes: &ClassSet) -> Result<Field> {
    let field = y.field();
    if field.channels() != classes.n_channels() {
        return Err(Error::Contract(format!(
            "target field has {} channels, universe needs {}",
            field.channels(),
            classes.n_channels()
        )));
    }
    // A one-hot voxel of a class outside the subset would silently merge into
    // background; the label model forbids it, so catch it here.
    let map = MergeMap::new(subset, classes)?;
    let n = field.n_voxels();
    for j in 1..field.channels() {
        if map.merged_of(j) == 0 {
            let plane = field.plane(j);
            if let Some(v) = (0..n).find(|&v| plane[v] == 1.0) {
                return Err(Error::InvalidAnnotation(format!(
                    "voxel {} labeled class {} which is outside the subset {:?}",
                    v,
                    j,
                    subset.members()
                )));
            }
        }
    }
    Ok(merge_field(field, &map))
}
