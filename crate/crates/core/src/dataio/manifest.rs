//! Corpus manifests: one UTF-8 line per image, tab-separated.
//!
//! Columns: image_id, intensity path, label path, dataset_id, modality_id,
//! labeling kind, annotation, full-label path. Paths are relative to the
//! manifest's directory. The annotation column holds a comma-separated subset
//! for partial labels ("-" when empty) and "axis:index=ids;index=ids" for
//! sparse ones, where an index with no ids is a selected but empty slice and
//! a bare "axis:" selects none. The final column is "-" when no full label
//! map exists. Lines starting with '#' are comments.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::label::{AnnotatedSubset, AnnotatedVolume, Annotation, ClassSet};
use crate::synth::{Corpus, GroundTruthVolume};
use crate::volume::Volume;

use super::tensor::{read_tensor, write_tensor, Tensor};

pub const MANIFEST_NAME: &str = "manifest.tsv";

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestRecord {
    pub image_id: String,
    pub intensity_path: String,
    pub labels_path: String,
    pub dataset_id: String,
    pub modality_id: String,
    pub annotation: Annotation,
    pub full_labels_path: Option<String>,
}

fn encode_subset(s: &AnnotatedSubset) -> String {
    if s.members().is_empty() {
        "-".into()
    } else {
        s.members().iter().map(|c| c.to_string()).collect::<Vec<_>>().join(",")
    }
}

fn parse_ids(s: &str, line: usize) -> Result<Vec<u8>> {
    s.split(',')
        .map(|tok| {
            match tok.parse::<u8>() {
                Ok(0) | Err(_) => Err(Error::Manifest {
                    line,
                    msg: format!("bad class id {:?}", tok),
                }),
                Ok(id) => Ok(id),
            }
        })
        .collect()
}

fn parse_subset(s: &str, line: usize) -> Result<AnnotatedSubset> {
    if s == "-" {
        return Ok(AnnotatedSubset::empty());
    }
    Ok(AnnotatedSubset::from_ids(parse_ids(s, line)?))
}

fn encode_annotation(a: &Annotation) -> String {
    match a {
        Annotation::Partial(s) => encode_subset(s),
        Annotation::Sparse { axis, slices } => {
            let entries: Vec<String> = slices
                .iter()
                .map(|(idx, subset)| {
                    let ids = subset
                        .members()
                        .iter()
                        .map(|c| c.to_string())
                        .collect::<Vec<_>>()
                        .join(",");
                    format!("{}={}", idx, ids)
                })
                .collect();
            format!("{}:{}", axis, entries.join(";"))
        }
    }
}

fn parse_annotation(kind: &str, field: &str, line: usize) -> Result<Annotation> {
    match kind {
        "partial" => Ok(Annotation::Partial(parse_subset(field, line)?)),
        "sparse" => {
            let (axis_str, rest) = field.split_once(':').ok_or_else(|| Error::Manifest {
                line,
                msg: format!("sparse annotation {:?} lacks an axis prefix", field),
            })?;
            let axis: usize = axis_str.parse().map_err(|_| Error::Manifest {
                line,
                msg: format!("bad sparse axis {:?}", axis_str),
            })?;
            let mut slices = BTreeMap::new();
            if !rest.is_empty() {
                for entry in rest.split(';') {
                    let (idx_str, ids) = entry.split_once('=').ok_or_else(|| Error::Manifest {
                        line,
                        msg: format!("bad slice entry {:?}", entry),
                    })?;
                    let idx: usize = idx_str.parse().map_err(|_| Error::Manifest {
                        line,
                        msg: format!("bad slice index {:?}", idx_str),
                    })?;
                    let subset = if ids.is_empty() {
                        AnnotatedSubset::empty()
                    } else {
                        AnnotatedSubset::from_ids(parse_ids(ids, line)?)
                    };
                    if slices.insert(idx, subset).is_some() {
                        return Err(Error::Manifest {
                            line,
                            msg: format!("duplicate slice index {}", idx),
                        });
                    }
                }
            }
            Ok(Annotation::Sparse { axis, slices })
        }
        other => Err(Error::Manifest { line, msg: format!("unknown labeling kind {:?}", other) }),
    }
}

fn record_line(r: &ManifestRecord) -> String {
    let kind = r.annotation.kind_str();
    format!(
        "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
        r.image_id,
        r.intensity_path,
        r.labels_path,
        r.dataset_id,
        r.modality_id,
        kind,
        encode_annotation(&r.annotation),
        r.full_labels_path.as_deref().unwrap_or("-"),
    )
}

pub fn write_manifest(path: &Path, records: &[ManifestRecord]) -> Result<()> {
    let mut out = String::from(
        "# image_id\tintensity\tlabels\tdataset\tmodality\tkind\tannotation\tfull_labels\n",
    );
    for r in records {
        out.push_str(&record_line(r));
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut records = vec![];
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let trimmed = raw.trim_end_matches('\r');
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = trimmed.split('\t').collect();
        if fields.len() != 8 {
            return Err(Error::Manifest {
                line,
                msg: format!("expected 8 tab-separated fields, found {}", fields.len()),
            });
        }
        let prefix = format!("{}_{}_", fields[3], fields[4]);
        if !fields[0].starts_with(&prefix) {
            return Err(Error::Manifest {
                line,
                msg: format!(
                    "image id {:?} does not carry the {:?} prefix",
                    fields[0], prefix
                ),
            });
        }
        let annotation = parse_annotation(fields[5], fields[6], line)?;
        records.push(ManifestRecord {
            image_id: fields[0].into(),
            intensity_path: fields[1].into(),
            labels_path: fields[2].into(),
            dataset_id: fields[3].into(),
            modality_id: fields[4].into(),
            annotation,
            full_labels_path: if fields[7] == "-" { None } else { Some(fields[7].into()) },
        });
    }
    Ok(records)
}

#[derive(Debug, Clone)]
pub struct LoadedImage {
    pub annotated: AnnotatedVolume,
    pub full_labels: Option<Volume<u8>>,
}

#[derive(Debug, Clone)]
pub struct LoadedCorpus {
    pub images: Vec<LoadedImage>,
    pub classes: ClassSet,
}

impl LoadedCorpus {
    pub fn annotated_refs(&self) -> Vec<&AnnotatedVolume> {
        self.images.iter().map(|i| &i.annotated).collect()
    }

    /// Ground-truth view of the corpus; errors if any image lacks full labels.
    pub fn to_ground_truth(&self) -> Result<Corpus> {
        let mut volumes = Vec::with_capacity(self.images.len());
        for img in &self.images {
            let full = img.full_labels.clone().ok_or_else(|| Error::CorpusLoad {
                image_id: img.annotated.image_id.clone(),
                msg: "no full label map in the manifest".into(),
            })?;
            volumes.push(GroundTruthVolume { annotated: img.annotated.clone(), full_labels: full });
        }
        Ok(Corpus { volumes, classes: self.classes })
    }
}

/// Write every image of a corpus as tensor files plus a manifest; returns the
/// manifest path.
pub fn write_corpus(dir: &Path, corpus: &Corpus) -> Result<PathBuf> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut records = Vec::with_capacity(corpus.volumes.len());
    for gt in &corpus.volumes {
        let v = &gt.annotated;
        let int_name = format!("{}.int.sgt", v.image_id);
        let lab_name = format!("{}.lab.sgt", v.image_id);
        let full_name = format!("{}.full.sgt", v.image_id);
        write_tensor(&dir.join(&int_name), &Tensor::F32(v.intensities.clone()))?;
        write_tensor(&dir.join(&lab_name), &Tensor::U8(v.labels.clone()))?;
        write_tensor(&dir.join(&full_name), &Tensor::U8(gt.full_labels.clone()))?;
        records.push(ManifestRecord {
            image_id: v.image_id.clone(),
            intensity_path: int_name,
            labels_path: lab_name,
            dataset_id: v.dataset_id.clone(),
            modality_id: v.modality_id.clone(),
            annotation: v.annotation.clone(),
            full_labels_path: Some(full_name),
        });
    }
    let manifest = dir.join(MANIFEST_NAME);
    write_manifest(&manifest, &records)?;
    Ok(manifest)
}

/// Load a corpus, re-validating every label-model invariant. The structure
/// count is inferred from the largest class id seen in any annotation or
/// label map.
pub fn load_corpus(manifest_path: &Path) -> Result<LoadedCorpus> {
    let records = read_manifest(manifest_path)?;
    let base = manifest_path.parent().unwrap_or_else(|| Path::new("."));

    let mut max_class: u8 = 0;
    let mut raw = Vec::with_capacity(records.len());
    for r in &records {
        let load_err = |msg: String| Error::CorpusLoad { image_id: r.image_id.clone(), msg };
        let intensities = read_tensor(&base.join(&r.intensity_path))?
            .as_f32()
            .map_err(|e| load_err(format!("intensity tensor: {}", e)))?
            .clone();
        let labels = read_tensor(&base.join(&r.labels_path))?
            .as_u8()
            .map_err(|e| load_err(format!("label tensor: {}", e)))?
            .clone();
        let full = match &r.full_labels_path {
            Some(p) => Some(
                read_tensor(&base.join(p))?
                    .as_u8()
                    .map_err(|e| load_err(format!("full label tensor: {}", e)))?
                    .clone(),
            ),
            None => None,
        };
        for &l in labels.data() {
            max_class = max_class.max(l);
        }
        if let Some(f) = &full {
            for &l in f.data() {
                max_class = max_class.max(l);
            }
        }
        for c in r.annotation.declared_classes() {
            max_class = max_class.max(c);
        }
        raw.push((intensities, labels, full));
    }
    if max_class == 0 {
        return Err(Error::Contract(
            "cannot infer the structure count: no class id appears anywhere in the corpus".into(),
        ));
    }
    let classes = ClassSet::new(max_class as usize)?;

    let mut images = Vec::with_capacity(records.len());
    for (r, (intensities, labels, full)) in records.into_iter().zip(raw) {
        let annotated = AnnotatedVolume::new(
            intensities,
            labels,
            r.annotation,
            r.dataset_id,
            r.modality_id,
            r.image_id.clone(),
            &classes,
        )
        .map_err(|e| Error::CorpusLoad { image_id: r.image_id, msg: e.to_string() })?;
        if let Some(f) = &full {
            if f.shape() != annotated.labels.shape() {
                return Err(Error::CorpusLoad {
                    image_id: annotated.image_id,
                    msg: "full label shape differs from the released labels".into(),
                });
            }
        }
        images.push(LoadedImage { annotated, full_labels: full });
    }
    Ok(LoadedCorpus { images, classes })
}
