//! `audit-sampler`: chi-square uniformity of the sampling hierarchy plus
//! per-class patch exposure.

use std::collections::BTreeMap;
use std::path::PathBuf;

use ambiseg::audit::{audit_hierarchy, exposure_report};
use ambiseg::config::Shape;
use ambiseg::dataio::load_corpus;
use ambiseg::sampler::{build_index, SamplerConfig, Strategy};
use ambiseg::{Error, Result};

use crate::common::{ensure_out_dir, kv, resolve_config, write_effective};
use crate::{CommonArgs, EXIT_OK};

pub fn cmd_audit_sampler(args: &CommonArgs) -> Result<i32> {
    let cfg = resolve_config(args)?;
    let corpus_path: String = cfg.require("data.corpus")?;
    let strategy = Strategy::parse(&cfg.get_or("audit.strategy", "cmd".to_string())?)?;
    let draws: usize = cfg.get_or("audit.draws", 100_000usize)?;
    let patch = cfg.get_or("audit.patch", Shape(vec![24, 24]))?.0;
    let jitter: usize = cfg.get_or("audit.jitter", 0usize)?;
    let empty_bucket_prob: Option<f64> = cfg.get("audit.empty_bucket_prob")?;
    let mut seed: u64 = cfg.get_or("audit.seed", 0u64)?;
    if let Some(s) = args.seed {
        seed = s;
    }
    cfg.ensure_fully_consumed()?;
    let out = ensure_out_dir(args)?;

    let mut pairs = BTreeMap::new();
    kv(&mut pairs, "data.corpus", &corpus_path);
    kv(&mut pairs, "audit.strategy", strategy.as_str());
    kv(&mut pairs, "audit.draws", draws);
    let patch_s: Vec<String> = patch.iter().map(|e| e.to_string()).collect();
    kv(&mut pairs, "audit.patch", patch_s.join("x"));
    kv(&mut pairs, "audit.jitter", jitter);
    if let Some(p) = empty_bucket_prob {
        kv(&mut pairs, "audit.empty_bucket_prob", p);
    }
    kv(&mut pairs, "audit.seed", seed);
    write_effective(&out, "audit-sampler", &pairs)?;

    let loaded = load_corpus(PathBuf::from(&corpus_path).as_path())?;
    let volumes = loaded.annotated_refs();
    let index = build_index(volumes.iter().copied(), &loaded.classes)?;
    let mut sampler_cfg = SamplerConfig::new(strategy, patch, seed);
    sampler_cfg.jitter = jitter;
    sampler_cfg.empty_bucket_prob = empty_bucket_prob;

    let hierarchy = audit_hierarchy(&index, &sampler_cfg, draws)?;
    let exposure = exposure_report(&volumes, &index, &sampler_cfg, draws)?;

    let text = format!("{}\n{}", hierarchy.render(), exposure.render());
    let path = out.join("audit.txt");
    std::fs::write(&path, &text).map_err(|e| Error::io(&path, e))?;
    print!("{}", text);
    println!("\naudit: {}", path.display());
    Ok(EXIT_OK)
}
