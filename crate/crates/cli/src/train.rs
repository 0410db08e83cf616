//! `train`: fit a model on a corpus manifest, writing checkpoint and log.

use std::collections::BTreeMap;
use std::path::PathBuf;

use ambiseg::config::{Config, Shape};
use ambiseg::dataio::load_corpus;
use ambiseg::sampler::Strategy;
use ambiseg::trainer::{eval_mean_dsc, train, TrainConfig};
use ambiseg::Result;

use crate::common::{ensure_out_dir, kv, resolve_config, write_effective};
use crate::{CommonArgs, EXIT_OK};

pub struct TrainPlan {
    pub corpus: String,
    pub eval_corpus: Option<String>,
    pub cfg: TrainConfig,
}

pub fn read_plan(cfg: &Config, args: &CommonArgs) -> Result<TrainPlan> {
    let corpus: String = cfg.require("data.corpus")?;
    let eval_corpus: Option<String> = cfg.get("data.eval_corpus")?;

    let mut t = TrainConfig::default();
    t.iterations = cfg.get_or("train.iterations", t.iterations)?;
    t.batch_size = cfg.get_or("train.batch_size", t.batch_size)?;
    t.patch_shape = cfg.get_or("train.patch", Shape(t.patch_shape.clone()))?.0;
    t.strategy = Strategy::parse(&cfg.get_or("train.strategy", t.strategy.as_str().to_string())?)?;
    t.jitter = cfg.get_or("train.jitter", t.jitter)?;
    t.empty_bucket_prob = cfg.get("train.empty_bucket_prob")?;
    t.hidden = cfg.get_or("train.hidden", t.hidden)?;
    t.kernel = cfg.get_or("train.kernel", t.kernel)?;
    t.augment = cfg.get_or("train.augment", t.augment)?;
    t.lambda_per_patch = cfg.get_or("train.lambda_per_patch", t.lambda_per_patch)?;
    t.log_every = cfg.get_or("train.log_every", t.log_every)?;
    let default_eval_every = if eval_corpus.is_some() { t.log_every } else { 0 };
    t.eval_every = cfg.get_or("train.eval_every", default_eval_every)?;
    t.seed = cfg.get_or("train.seed", t.seed)?;
    if let Some(s) = args.seed {
        t.seed = s;
    }
    t.threads = cfg.get_or("train.threads", t.threads)?;
    if let Some(n) = args.threads {
        t.threads = n;
    }

    t.loss.epsilon = cfg.get_or("loss.epsilon", t.loss.epsilon)?;
    t.loss.focal_exponent = cfg.get_or("loss.focal_exponent", t.loss.focal_exponent)?;
    t.loss.lambda_annotated = cfg.get_or("loss.lambda_annotated", t.loss.lambda_annotated)?;
    t.loss.lambda_unannotated = cfg.get_or("loss.lambda_unannotated", t.loss.lambda_unannotated)?;
    t.loss.ambiguity_aware = cfg.get_or("loss.ambiguity_aware", t.loss.ambiguity_aware)?;

    t.optim.base_lr = cfg.get_or("optim.base_lr", t.optim.base_lr)?;
    t.optim.weight_decay = cfg.get_or("optim.weight_decay", t.optim.weight_decay)?;
    t.optim.beta1 = cfg.get_or("optim.beta1", t.optim.beta1)?;
    t.optim.beta2 = cfg.get_or("optim.beta2", t.optim.beta2)?;
    t.optim.epsilon = cfg.get_or("optim.epsilon", t.optim.epsilon)?;
    t.optim.lr_power = cfg.get_or("optim.lr_power", t.optim.lr_power)?;

    cfg.ensure_fully_consumed()?;
    Ok(TrainPlan { corpus, eval_corpus, cfg: t })
}

pub fn effective_pairs(plan: &TrainPlan) -> BTreeMap<String, String> {
    let t = &plan.cfg;
    let patch: Vec<String> = t.patch_shape.iter().map(|e| e.to_string()).collect();
    let mut pairs = BTreeMap::new();
    kv(&mut pairs, "data.corpus", &plan.corpus);
    if let Some(e) = &plan.eval_corpus {
        kv(&mut pairs, "data.eval_corpus", e);
    }
    kv(&mut pairs, "train.iterations", t.iterations);
    kv(&mut pairs, "train.batch_size", t.batch_size);
    kv(&mut pairs, "train.patch", patch.join("x"));
    kv(&mut pairs, "train.strategy", t.strategy.as_str());
    kv(&mut pairs, "train.jitter", t.jitter);
    if let Some(p) = t.empty_bucket_prob {
        kv(&mut pairs, "train.empty_bucket_prob", p);
    }
    kv(&mut pairs, "train.hidden", t.hidden);
    kv(&mut pairs, "train.kernel", t.kernel);
    kv(&mut pairs, "train.augment", t.augment);
    kv(&mut pairs, "train.lambda_per_patch", t.lambda_per_patch);
    kv(&mut pairs, "train.log_every", t.log_every);
    kv(&mut pairs, "train.eval_every", t.eval_every);
    kv(&mut pairs, "train.seed", t.seed);
    kv(&mut pairs, "train.threads", t.threads);
    kv(&mut pairs, "loss.epsilon", t.loss.epsilon);
    kv(&mut pairs, "loss.focal_exponent", t.loss.focal_exponent);
    kv(&mut pairs, "loss.lambda_annotated", t.loss.lambda_annotated);
    kv(&mut pairs, "loss.lambda_unannotated", t.loss.lambda_unannotated);
    kv(&mut pairs, "loss.ambiguity_aware", t.loss.ambiguity_aware);
    kv(&mut pairs, "optim.base_lr", t.optim.base_lr);
    kv(&mut pairs, "optim.weight_decay", t.optim.weight_decay);
    kv(&mut pairs, "optim.beta1", t.optim.beta1);
    kv(&mut pairs, "optim.beta2", t.optim.beta2);
    kv(&mut pairs, "optim.epsilon", t.optim.epsilon);
    kv(&mut pairs, "optim.lr_power", t.optim.lr_power);
    pairs
}

pub fn cmd_train(args: &CommonArgs) -> Result<i32> {
    let cfg = resolve_config(args)?;
    let mut plan = read_plan(&cfg, args)?;
    let out = ensure_out_dir(args)?;
    plan.cfg.checkpoint_path = Some(out.join("model.sgc"));
    plan.cfg.log_path = Some(out.join("train.tsv"));

    let loaded = load_corpus(PathBuf::from(&plan.corpus).as_path())?;
    let eval_set = match &plan.eval_corpus {
        Some(path) => Some(load_corpus(PathBuf::from(path).as_path())?.to_ground_truth()?),
        None => None,
    };
    write_effective(&out, "train", &effective_pairs(&plan))?;

    let started = std::time::Instant::now();
    let outcome = train(&loaded.annotated_refs(), &loaded.classes, eval_set.as_ref(), &plan.cfg)?;

    println!(
        "trained {} iterations on {} images ({} params) in {:.1}s",
        plan.cfg.iterations,
        loaded.images.len(),
        outcome.net.params().len(),
        started.elapsed().as_secs_f64()
    );
    println!("final loss: {:e}", outcome.final_loss);
    if let Some(corpus) = &eval_set {
        let dsc = eval_mean_dsc(&outcome.net, corpus, &loaded.classes)?;
        println!("final eval dsc: {:.4}", dsc);
    }
    println!("checkpoint: {}", out.join("model.sgc").display());
    println!("log: {}", out.join("train.tsv").display());
    Ok(EXIT_OK)
}
