//! `eval`: score a checkpoint against a corpus with reference labels.

use std::collections::BTreeMap;
use std::path::PathBuf;

use ambiseg::config::IdList;
use ambiseg::dataio::{load_checkpoint, load_corpus};
use ambiseg::eval::{evaluate, predict, EvalOptions, EvalPair};
use ambiseg::trainer::net_from_checkpoint;
use ambiseg::{Error, Result};

use crate::common::{ensure_out_dir, kv, resolve_config, write_effective};
use crate::{CommonArgs, EXIT_OK};

pub fn cmd_eval(args: &CommonArgs) -> Result<i32> {
    let cfg = resolve_config(args)?;
    let ckpt_path: String = cfg.require("eval.checkpoint")?;
    let corpus_path: String = cfg.require("eval.corpus")?;
    let class_filter: Option<IdList> = cfg.get("eval.classes")?;
    let score_empty_pairs: bool = cfg.get_or("eval.score_empty_pairs", false)?;
    cfg.ensure_fully_consumed()?;
    let out = ensure_out_dir(args)?;

    let mut pairs_kv = BTreeMap::new();
    kv(&mut pairs_kv, "eval.checkpoint", &ckpt_path);
    kv(&mut pairs_kv, "eval.corpus", &corpus_path);
    if let Some(f) = &class_filter {
        let ids: Vec<String> = f.0.iter().map(|c| c.to_string()).collect();
        kv(&mut pairs_kv, "eval.classes", ids.join(","));
    }
    kv(&mut pairs_kv, "eval.score_empty_pairs", score_empty_pairs);
    write_effective(&out, "eval", &pairs_kv)?;

    let net = net_from_checkpoint(&load_checkpoint(PathBuf::from(&ckpt_path).as_path())?)?;
    let loaded = load_corpus(PathBuf::from(&corpus_path).as_path())?;
    let corpus = loaded.to_ground_truth()?;

    let mut pairs = Vec::with_capacity(corpus.volumes.len());
    for gt in &corpus.volumes {
        pairs.push(EvalPair {
            image_id: gt.annotated.image_id.clone(),
            dataset_id: gt.annotated.dataset_id.clone(),
            pred: predict(&net, &gt.annotated.intensities)?,
            truth: gt.full_labels.clone(),
        });
    }
    let opts = EvalOptions { score_empty_pairs, class_filter: class_filter.map(|f| f.0) };
    let report = evaluate(&pairs, &corpus.classes, opts)?;

    let table_path = out.join("report.tsv");
    std::fs::write(&table_path, report.render()).map_err(|e| Error::io(&table_path, e))?;
    let kv_path = out.join("report.kv");
    std::fs::write(&kv_path, report.to_kv()).map_err(|e| Error::io(&kv_path, e))?;

    print!("{}", report.render());
    println!("\nreport: {}", table_path.display());
    Ok(EXIT_OK)
}
