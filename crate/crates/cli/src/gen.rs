//! `gen`: synthesize a corpus and write it with a manifest.

use std::collections::BTreeMap;

use ambiseg::config::{Config, IdList, Shape};
use ambiseg::dataio::write_corpus;
use ambiseg::synth::{generate, DatasetSpec, GenSpec, LabelKind};
use ambiseg::{Error, Result};

use crate::common::{ensure_out_dir, kv, resolve_config, write_effective};
use crate::{CommonArgs, EXIT_OK};

fn default_datasets() -> Vec<DatasetSpec> {
    vec![
        DatasetSpec::new("a", "ct", &[1, 2], LabelKind::Partial),
        DatasetSpec::new("b", "mr", &[3], LabelKind::Partial),
        DatasetSpec::new("c", "ct", &[4], LabelKind::Sparse),
    ]
}

/// Distinct `<k>` tokens of `dataset.<k>.*` keys, numerically when possible.
fn dataset_groups(cfg: &Config) -> Result<Vec<String>> {
    let mut groups: Vec<String> = vec![];
    for key in cfg.keys_with_prefix("dataset.") {
        let rest = &key["dataset.".len()..];
        let group = rest.split('.').next().unwrap_or("");
        if group.is_empty() || rest == group {
            return Err(Error::Config {
                line: 0,
                msg: format!("dataset key {:?} is not dataset.<k>.<field>", key),
            });
        }
        if !groups.iter().any(|g| g == group) {
            groups.push(group.to_string());
        }
    }
    groups.sort_by(|a, b| match (a.parse::<u64>(), b.parse::<u64>()) {
        (Ok(x), Ok(y)) => x.cmp(&y),
        _ => a.cmp(b),
    });
    Ok(groups)
}

fn read_datasets(cfg: &Config) -> Result<Vec<DatasetSpec>> {
    let groups = dataset_groups(cfg)?;
    if groups.is_empty() {
        return Ok(default_datasets());
    }
    let mut out = Vec::with_capacity(groups.len());
    for g in &groups {
        let key = |field: &str| format!("dataset.{}.{}", g, field);
        let subset: IdList = cfg.require(&key("subset"))?;
        let mut d = DatasetSpec::new(
            &cfg.require::<String>(&key("id"))?,
            &cfg.require::<String>(&key("modality"))?,
            &subset.0,
            LabelKind::parse(&cfg.get_or(&key("kind"), "partial".to_string())?)?,
        );
        d.contrast = cfg.get_or(&key("contrast"), d.contrast)?;
        d.bias = cfg.get_or(&key("bias"), d.bias)?;
        d.noise_sigma = cfg.get_or(&key("noise_sigma"), d.noise_sigma)?;
        out.push(d);
    }
    Ok(out)
}

fn read_spec(cfg: &Config, args: &CommonArgs) -> Result<GenSpec> {
    let mut spec = GenSpec::new(
        cfg.get_or("gen.image_shape", Shape(vec![48, 48]))?.0,
        cfg.get_or("gen.n_structures", 4usize)?,
        read_datasets(cfg)?,
    );
    spec.n_images = cfg.get_or("gen.n_images", spec.n_images)?;
    spec.sparse_fraction = cfg.get_or("gen.sparse_fraction", spec.sparse_fraction)?;
    spec.sparse_axis = cfg.get_or("gen.sparse_axis", spec.sparse_axis)?;
    spec.lo_clip = cfg.get_or("gen.lo_clip", spec.lo_clip)?;
    spec.hi_clip = cfg.get_or("gen.hi_clip", spec.hi_clip)?;
    spec.allow_uncovered = cfg.get_or("gen.allow_uncovered", spec.allow_uncovered)?;
    spec.seed = cfg.get_or("gen.seed", spec.seed)?;
    if let Some(s) = args.seed {
        spec.seed = s;
    }
    cfg.ensure_fully_consumed()?;
    Ok(spec)
}

fn effective_pairs(spec: &GenSpec) -> BTreeMap<String, String> {
    let shape: Vec<String> = spec.image_shape.iter().map(|e| e.to_string()).collect();
    let mut pairs = BTreeMap::new();
    kv(&mut pairs, "gen.image_shape", shape.join("x"));
    kv(&mut pairs, "gen.n_structures", spec.n_structures);
    kv(&mut pairs, "gen.n_images", spec.n_images);
    kv(&mut pairs, "gen.sparse_fraction", spec.sparse_fraction);
    kv(&mut pairs, "gen.sparse_axis", spec.sparse_axis);
    kv(&mut pairs, "gen.lo_clip", spec.lo_clip);
    kv(&mut pairs, "gen.hi_clip", spec.hi_clip);
    kv(&mut pairs, "gen.allow_uncovered", spec.allow_uncovered);
    kv(&mut pairs, "gen.seed", spec.seed);
    for (i, d) in spec.datasets.iter().enumerate() {
        let key = |field: &str| format!("dataset.{}.{}", i + 1, field);
        let subset: Vec<String> = d.subset.iter().map(|c| c.to_string()).collect();
        kv(&mut pairs, &key("id"), &d.dataset_id);
        kv(&mut pairs, &key("modality"), &d.modality_id);
        kv(&mut pairs, &key("subset"), if subset.is_empty() { "-".into() } else { subset.join(",") });
        kv(&mut pairs, &key("kind"), d.kind.as_str());
        kv(&mut pairs, &key("contrast"), d.contrast);
        kv(&mut pairs, &key("bias"), d.bias);
        kv(&mut pairs, &key("noise_sigma"), d.noise_sigma);
    }
    pairs
}

/// One row per dataset, one column per class: `x` annotated everywhere,
/// `s` annotated on a slice subset, `.` not annotated.
fn availability_matrix(spec: &GenSpec) -> String {
    let mut out = String::from("dataset\tmodality\tkind\timages");
    for c in 1..=spec.n_structures {
        out.push_str(&format!("\t{}", c));
    }
    out.push('\n');
    for d in &spec.datasets {
        out.push_str(&format!(
            "{}\t{}\t{}\t{}",
            d.dataset_id,
            d.modality_id,
            d.kind.as_str(),
            spec.n_images
        ));
        for c in 1..=spec.n_structures {
            let mark = if d.subset.contains(&(c as u8)) {
                match d.kind {
                    LabelKind::Partial => "x",
                    LabelKind::Sparse => "s",
                }
            } else {
                "."
            };
            out.push_str(&format!("\t{}", mark));
        }
        out.push('\n');
    }
    out
}

pub fn cmd_gen(args: &CommonArgs) -> Result<i32> {
    let cfg = resolve_config(args)?;
    let spec = read_spec(&cfg, args)?;
    let out = ensure_out_dir(args)?;

    let corpus = generate(&spec)?;
    let manifest = write_corpus(&out, &corpus)?;
    write_effective(&out, "gen", &effective_pairs(&spec))?;

    print!("{}", availability_matrix(&spec));
    println!(
        "\ngenerated {} images across {} datasets, {} structures",
        corpus.volumes.len(),
        spec.datasets.len(),
        spec.n_structures
    );
    println!("manifest: {}", manifest.display());
    Ok(EXIT_OK)
}
