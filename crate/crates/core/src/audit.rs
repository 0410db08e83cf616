//! Statistical audit of the sampling hierarchy.
//!
//! For each level of the chosen strategy the audit groups draws by their
//! prefix (the levels already decided) and tests the conditional choice for
//! uniformity over the nonempty options with a chi-square goodness-of-fit
//! test, pooling cells across prefixes. It also measures per-class patch
//! exposure: the fraction of drawn patches containing at least one released
//! voxel of each class.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::error::{Error, Result};
use crate::label::AnnotatedVolume;
use crate::sampler::{
    patch_origin, sample, tree_access, CorpusIndex, SampleKey, SamplerConfig, Strategy,
};
use crate::volume::strides_of;

/// One cell of the audit table: a concrete option at a concrete prefix.
#[derive(Debug, Clone)]
pub struct AuditRow {
    pub level: String,
    /// Prefix-qualified option, e.g. "class=2/modality=ct".
    pub option: String,
    pub count: u64,
    pub expected: f64,
    pub contribution: f64,
}

#[derive(Debug, Clone)]
pub struct LevelStat {
    pub level: String,
    pub chi2: f64,
    pub df: usize,
    pub p_value: f64,
}

#[derive(Debug, Clone)]
pub struct AuditReport {
    pub strategy: Strategy,
    pub n_draws: usize,
    pub rows: Vec<AuditRow>,
    pub levels: Vec<LevelStat>,
}

impl AuditReport {
    pub fn level(&self, name: &str) -> Option<&LevelStat> {
        self.levels.iter().find(|l| l.level == name)
    }

    pub fn min_p_value(&self) -> f64 {
        self.levels.iter().map(|l| l.p_value).fold(f64::INFINITY, f64::min)
    }

    /// Render as a delimited table: level, option, count, expected, contribution.
    pub fn render(&self) -> String {
        let mut out = String::from("level\toption\tcount\texpected\tcontribution\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{}\t{}\t{}\t{:.2}\t{:.4}\n",
                r.level, r.option, r.count, r.expected, r.contribution
            ));
        }
        out.push('\n');
        out.push_str("level\tchi2\tdf\tp_value\tverdict\n");
        for l in &self.levels {
            out.push_str(&format!(
                "{}\t{:.3}\t{}\t{:.6}\t{}\n",
                l.level,
                l.chi2,
                l.df,
                l.p_value,
                if l.p_value > 0.01 { "PASS" } else { "FAIL" }
            ));
        }
        out
    }
}

/// Accumulates (prefix, option) counts for one level and turns them into a
/// pooled conditional chi-square statistic.
struct LevelCounter {
    level: &'static str,
    /// prefix -> (options in canonical order, option -> count)
    groups: BTreeMap<String, (Vec<String>, BTreeMap<String, u64>)>,
}

impl LevelCounter {
    fn new(level: &'static str) -> Self {
        LevelCounter { level, groups: BTreeMap::new() }
    }

    fn record(&mut self, prefix: String, options: Vec<String>, chosen: &str) {
        let entry = self.groups.entry(prefix).or_insert_with(|| (options, BTreeMap::new()));
        *entry.1.entry(chosen.to_string()).or_insert(0) += 1;
    }

    fn finish(&self, rows: &mut Vec<AuditRow>) -> LevelStat {
        let mut chi2 = 0.0;
        let mut df = 0usize;
        for (prefix, (options, counts)) in &self.groups {
            let total: u64 = counts.values().sum();
            let k = options.len();
            let expected = total as f64 / k as f64;
            if k > 1 {
                df += k - 1;
            }
            for opt in options {
                let count = counts.get(opt).copied().unwrap_or(0);
                let contribution = if expected > 0.0 {
                    let d = count as f64 - expected;
                    d * d / expected
                } else {
                    0.0
                };
                if k > 1 {
                    chi2 += contribution;
                }
                let option = if prefix.is_empty() {
                    opt.clone()
                } else {
                    format!("{}/{}", prefix, opt)
                };
                rows.push(AuditRow {
                    level: self.level.to_string(),
                    option,
                    count,
                    expected,
                    contribution,
                });
            }
        }
        LevelStat {
            level: self.level.to_string(),
            chi2,
            df,
            p_value: chi_square_p(chi2, df),
        }
    }
}

/// Upper-tail p-value of the chi-square distribution; 1.0 when there are no
/// degrees of freedom (every choice was forced).
pub fn chi_square_p(chi2: f64, df: usize) -> f64 {
    if df == 0 {
        return 1.0;
    }
    let dist = ChiSquared::new(df as f64).expect("df > 0");
    1.0 - dist.cdf(chi2)
}

/// Draw `n_draws` samples and audit conditional uniformity at every level of
/// the strategy's hierarchy.
pub fn audit_hierarchy(
    idx: &CorpusIndex,
    cfg: &SamplerConfig,
    n_draws: usize,
) -> Result<AuditReport> {
    if n_draws == 0 {
        return Err(Error::Contract("audit needs at least one draw".into()));
    }
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let mut bucket = LevelCounter::new("bucket");
    let mut counters: Vec<LevelCounter> = match cfg.strategy {
        Strategy::Cmd => ["class", "modality", "dataset", "image"]
            .into_iter()
            .map(LevelCounter::new)
            .collect(),
        Strategy::Mdc => ["modality", "dataset", "class", "image"]
            .into_iter()
            .map(LevelCounter::new)
            .collect(),
        Strategy::Random => vec![LevelCounter::new("image")],
    };
    let has_bucket = !idx.empty_bucket().is_empty();

    for _ in 0..n_draws {
        let key = sample(idx, cfg, &mut rng)?;
        if has_bucket && cfg.strategy != Strategy::Random {
            bucket.record(
                String::new(),
                vec!["empty".into(), "annotated".into()],
                if key.class_id.is_none() { "empty" } else { "annotated" },
            );
        }
        match cfg.strategy {
            Strategy::Cmd => {
                let Some(class) = key.class_id else { continue };
                let c = format!("class={}", class);
                let m = format!("modality={}", key.modality_id);
                let d = format!("dataset={}", key.dataset_id);
                counters[0].record(
                    String::new(),
                    tree_access::cmd_classes(idx)
                        .iter()
                        .map(|c| format!("class={}", c))
                        .collect(),
                    &c,
                );
                counters[1].record(
                    c.clone(),
                    tree_access::cmd_modalities(idx, class)
                        .iter()
                        .map(|m| format!("modality={}", m))
                        .collect(),
                    &m,
                );
                counters[2].record(
                    format!("{}/{}", c, m),
                    tree_access::cmd_datasets(idx, class, &key.modality_id)
                        .iter()
                        .map(|d| format!("dataset={}", d))
                        .collect(),
                    &d,
                );
                counters[3].record(
                    format!("{}/{}/{}", c, m, d),
                    tree_access::cmd_images(idx, class, &key.modality_id, &key.dataset_id)
                        .iter()
                        .map(|i| format!("image={}", idx.image_id(*i)))
                        .collect(),
                    &format!("image={}", key.image_id),
                );
            }
            Strategy::Mdc => {
                let Some(class) = key.class_id else { continue };
                let m = format!("modality={}", key.modality_id);
                let d = format!("dataset={}", key.dataset_id);
                let c = format!("class={}", class);
                counters[0].record(
                    String::new(),
                    tree_access::mdc_modalities(idx)
                        .iter()
                        .map(|m| format!("modality={}", m))
                        .collect(),
                    &m,
                );
                counters[1].record(
                    m.clone(),
                    tree_access::mdc_datasets(idx, &key.modality_id)
                        .iter()
                        .map(|d| format!("dataset={}", d))
                        .collect(),
                    &d,
                );
                counters[2].record(
                    format!("{}/{}", m, d),
                    tree_access::mdc_classes(idx, &key.modality_id, &key.dataset_id)
                        .iter()
                        .map(|c| format!("class={}", c))
                        .collect(),
                    &c,
                );
                counters[3].record(
                    format!("{}/{}/{}", m, d, c),
                    // In MDC the image level is uniform over the images of the
                    // (modality, dataset) group holding the class.
                    mdc_group_images(idx, &key)
                        .iter()
                        .map(|i| format!("image={}", idx.image_id(*i)))
                        .collect(),
                    &format!("image={}", key.image_id),
                );
            }
            Strategy::Random => {
                counters[0].record(
                    String::new(),
                    (0..idx.n_images()).map(|i| format!("image={}", idx.image_id(i))).collect(),
                    &format!("image={}", key.image_id),
                );
            }
        }
    }

    let mut rows = vec![];
    let mut levels = vec![];
    if has_bucket && cfg.strategy != Strategy::Random {
        levels.push(bucket.finish(&mut rows));
        // The bucket split is a fixed-probability Bernoulli, not a uniform
        // choice, so replace the uniform expectation with the configured one.
        let p = idx.effective_empty_prob(cfg);
        let total: u64 = rows
            .iter()
            .filter(|r| r.level == "bucket")
            .map(|r| r.count)
            .sum();
        let mut chi2 = 0.0;
        for r in rows.iter_mut().filter(|r| r.level == "bucket") {
            let p_opt = if r.option == "empty" { p } else { 1.0 - p };
            r.expected = total as f64 * p_opt;
            let d = r.count as f64 - r.expected;
            r.contribution = if r.expected > 0.0 { d * d / r.expected } else { 0.0 };
            chi2 += r.contribution;
        }
        let stat = levels.last_mut().unwrap();
        stat.chi2 = chi2;
        stat.df = 1;
        stat.p_value = chi_square_p(chi2, 1);
    }
    for c in &counters {
        levels.push(c.finish(&mut rows));
    }
    Ok(AuditReport { strategy: cfg.strategy, n_draws, rows, levels })
}

fn mdc_group_images(idx: &CorpusIndex, key: &SampleKey) -> Vec<usize> {
    tree_access::cmd_images(
        idx,
        key.class_id.expect("class draw"),
        &key.modality_id,
        &key.dataset_id,
    )
}

/// Fraction of drawn patches containing at least one released voxel of each
/// class. `volumes` must be the corpus the index was built from, in order.
#[derive(Debug, Clone)]
pub struct ExposureReport {
    pub strategy: Strategy,
    pub n_draws: usize,
    /// (class id, fraction of patches containing it)
    pub exposures: Vec<(u8, f64)>,
}

impl ExposureReport {
    pub fn exposure(&self, class: u8) -> f64 {
        self.exposures
            .iter()
            .find(|(c, _)| *c == class)
            .map(|(_, f)| *f)
            .unwrap_or(0.0)
    }

    pub fn mean_exposure(&self) -> f64 {
        if self.exposures.is_empty() {
            return 0.0;
        }
        self.exposures.iter().map(|(_, f)| f).sum::<f64>() / self.exposures.len() as f64
    }

    pub fn render(&self) -> String {
        let mut out = String::from("class\texposure\n");
        for (c, f) in &self.exposures {
            out.push_str(&format!("{}\t{:.4}\n", c, f));
        }
        out
    }
}

pub fn exposure_report(
    volumes: &[&AnnotatedVolume],
    idx: &CorpusIndex,
    cfg: &SamplerConfig,
    n_draws: usize,
) -> Result<ExposureReport> {
    if n_draws == 0 {
        return Err(Error::Contract("exposure report needs at least one draw".into()));
    }
    if volumes.len() != idx.n_images() {
        return Err(Error::Contract(format!(
            "{} volumes for an index over {} images",
            volumes.len(),
            idx.n_images()
        )));
    }
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let classes: Vec<u8> = {
        let mut all = tree_access::cmd_classes(idx);
        all.extend(idx.empty_classes());
        all.sort_unstable();
        all
    };
    let mut hits: BTreeMap<u8, u64> = classes.iter().map(|&c| (c, 0)).collect();

    for _ in 0..n_draws {
        let key = sample(idx, cfg, &mut rng)?;
        let v = volumes[key.image_idx];
        let origin = patch_origin(&key, cfg);
        let shape = v.shape();
        let strides = strides_of(shape);
        let mut present = [false; 256];
        // Walk the patch box.
        let mut coord = vec![0usize; shape.len()];
        'outer: loop {
            let flat: usize = coord
                .iter()
                .zip(&origin)
                .zip(&strides)
                .map(|((&c, &o), &s)| (c + o) * s)
                .sum();
            let l = v.labels.data()[flat];
            if l != 0 {
                present[l as usize] = true;
            }
            for axis in (0..shape.len()).rev() {
                coord[axis] += 1;
                if coord[axis] < cfg.patch_shape[axis] {
                    continue 'outer;
                }
                coord[axis] = 0;
                if axis == 0 {
                    break 'outer;
                }
            }
        }
        for (&c, hit) in hits.iter_mut() {
            if present[c as usize] {
                *hit += 1;
            }
        }
    }
    Ok(ExposureReport {
        strategy: cfg.strategy,
        n_draws,
        exposures: hits.into_iter().map(|(c, h)| (c, h as f64 / n_draws as f64)).collect(),
    })
}
