//! The training loop: sample → patch → forward → loss → backward → update.

use std::collections::BTreeMap;
use std::path::PathBuf;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dataio::checkpoint::{fnv1a, save_checkpoint, Checkpoint};
use crate::dataio::tensor::Tensor;
use crate::error::{Error, Result};
use crate::eval::{evaluate, predict, EvalOptions, EvalPair};
use crate::label::{AnnotatedSubset, AnnotatedVolume, Annotation, ClassSet};
use crate::loss::{total_loss, LossConfig};
use crate::net::{NetConfig, TinyNet};
use crate::optim::{adamw_step, poly_lr, OptimConfig, OptimState};
use crate::sampler::{build_index, extract_patch, sample, SamplerConfig, Strategy};
use crate::synth::Corpus;
use crate::volume::Volume;

const NET_SEED_SALT: u64 = 0x6e65_7472_6e67; // "netrng"

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub iterations: u64,
    pub batch_size: usize,
    pub patch_shape: Vec<usize>,
    pub seed: u64,
    pub strategy: Strategy,
    pub jitter: usize,
    /// `None` defaults to 1/(N+1) inside the sampler.
    pub empty_bucket_prob: Option<f64>,
    pub hidden: usize,
    pub kernel: usize,
    pub loss: LossConfig,
    pub optim: OptimConfig,
    /// Random 90°-multiple rotation and ±10% nearest-neighbor scaling.
    pub augment: bool,
    /// Choose the entropy weight once per patch (any annotation anywhere
    /// makes the whole patch "annotated") instead of per view.
    pub lambda_per_patch: bool,
    pub log_every: u64,
    /// Evaluate on the eval set every this many iterations; 0 disables.
    pub eval_every: u64,
    pub threads: usize,
    pub checkpoint_path: Option<PathBuf>,
    pub log_path: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            iterations: 2000,
            batch_size: 8,
            patch_shape: vec![48, 48],
            seed: 0,
            strategy: Strategy::Cmd,
            jitter: 0,
            empty_bucket_prob: None,
            hidden: 8,
            kernel: 3,
            loss: LossConfig::default(),
            optim: OptimConfig::default(),
            augment: false,
            lambda_per_patch: false,
            log_every: 50,
            eval_every: 0,
            threads: 1,
            checkpoint_path: None,
            log_path: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::Contract("iterations must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Contract("batch size must be positive".into()));
        }
        if self.patch_shape.len() != 2 {
            return Err(Error::Contract(format!(
                "the network is 2-d; patch shape {:?} has rank {}",
                self.patch_shape,
                self.patch_shape.len()
            )));
        }
        if self.patch_shape.iter().any(|&p| p == 0) {
            return Err(Error::Contract("patch extents must be positive".into()));
        }
        if self.log_every == 0 {
            return Err(Error::Contract("log_every must be positive".into()));
        }
        if self.threads == 0 {
            return Err(Error::Contract("threads must be positive".into()));
        }
        if !(self.loss.epsilon > 0.0) {
            return Err(Error::Contract(
                "training requires a positive dice smoothing epsilon".into(),
            ));
        }
        self.loss.validate()?;
        self.optim.validate()?;
        Ok(())
    }

    fn sampler_config(&self) -> SamplerConfig {
        let mut s = SamplerConfig::new(self.strategy, self.patch_shape.clone(), self.seed);
        s.jitter = self.jitter;
        s.empty_bucket_prob = self.empty_bucket_prob;
        s
    }

    /// Stable fingerprint of everything that affects the trained result.
    pub fn fingerprint(&self, classes: &ClassSet) -> u64 {
        let text = format!(
            "iterations={};batch={};patch={:?};seed={};strategy={};jitter={};empty={:?};\
             hidden={};kernel={};eps={};gamma={};lam_a={};lam_u={};aware={};\
             lr={};wd={};b1={};b2={};eps_opt={};power={};augment={};per_patch={};n={}",
            self.iterations,
            self.batch_size,
            self.patch_shape,
            self.seed,
            self.strategy.as_str(),
            self.jitter,
            self.empty_bucket_prob,
            self.hidden,
            self.kernel,
            self.loss.epsilon,
            self.loss.focal_exponent,
            self.loss.lambda_annotated,
            self.loss.lambda_unannotated,
            self.loss.ambiguity_aware,
            self.optim.base_lr,
            self.optim.weight_decay,
            self.optim.beta1,
            self.optim.beta2,
            self.optim.epsilon,
            self.optim.lr_power,
            self.augment,
            self.lambda_per_patch,
            classes.n_structures(),
        );
        fnv1a(text.as_bytes())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainRecord {
    pub iter: u64,
    pub lr: f64,
    pub loss: f64,
    pub focal: f64,
    pub dice: f64,
    pub entropy: f64,
    pub eval_dsc: Option<f64>,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub net: TinyNet,
    pub log: Vec<TrainRecord>,
    pub final_loss: f64,
}

pub fn render_log(records: &[TrainRecord], param_count: usize) -> String {
    let mut out = format!("# params={}\niter\tlr\tloss\tfocal\tdice\tentropy\teval_dsc\n", param_count);
    for r in records {
        out.push_str(&format!(
            "{}\t{:e}\t{:e}\t{:e}\t{:e}\t{:e}\t{}\n",
            r.iter,
            r.lr,
            r.loss,
            r.focal,
            r.dice,
            r.entropy,
            r.eval_dsc.map(|d| format!("{:e}", d)).unwrap_or_else(|| "-".into()),
        ));
    }
    out
}

struct MemberOut {
    value: f64,
    focal: f64,
    dice: f64,
    entropy: f64,
    grads: Vec<f64>,
}

fn member_pass(
    net: &TinyNet,
    patch: &AnnotatedVolume,
    classes: &ClassSet,
    loss_cfg: &LossConfig,
    lambda_per_patch: bool,
) -> Result<MemberOut> {
    let pass = net.forward(&patch.intensities)?;
    let mut cfg = loss_cfg.clone();
    if lambda_per_patch {
        if patch.annotation.is_fully_unannotated() {
            cfg.lambda_annotated = loss_cfg.lambda_unannotated;
        } else {
            cfg.lambda_unannotated = loss_cfg.lambda_annotated;
        }
    }
    let total = total_loss(&pass.logits, patch, classes, &cfg)?;
    let grads = net.backward(&pass, &total.grad_logits)?;
    Ok(MemberOut {
        value: total.value,
        focal: total.focal,
        dice: total.dice,
        entropy: total.entropy,
        grads,
    })
}

/// Rotate a 2-d volume 90° counterclockwise `k` times.
fn rot90<T: Copy + Default>(v: &Volume<T>, k: usize) -> Volume<T> {
    let mut cur = v.clone();
    for _ in 0..k % 4 {
        let (r, c) = (cur.shape()[0], cur.shape()[1]);
        let mut out = Volume::<T>::zeros(vec![c, r]);
        for i in 0..c {
            for j in 0..r {
                out.data_mut()[i * r + j] = cur.data()[j * c + (c - 1 - i)];
            }
        }
        cur = out;
    }
    cur
}

/// One counterclockwise quarter turn of a sparse annotation on a square
/// patch: rows become columns with the same index, columns become rows with
/// flipped index.
fn rot90_annotation(a: &Annotation, extent: usize) -> Annotation {
    match a {
        Annotation::Partial(s) => Annotation::Partial(s.clone()),
        Annotation::Sparse { axis: 0, slices } => {
            Annotation::Sparse { axis: 1, slices: slices.clone() }
        }
        Annotation::Sparse { axis: 1, slices } => Annotation::Sparse {
            axis: 0,
            slices: slices.iter().map(|(i, s)| (extent - 1 - i, s.clone())).collect(),
        },
        Annotation::Sparse { axis, .. } => {
            unreachable!("2-d patches cannot be sparse along axis {}", axis)
        }
    }
}

/// Nearest-neighbor source index for zoom about the patch center.
fn zoom_src(i: usize, extent: usize, scale: f64) -> usize {
    let c = (extent as f64 - 1.0) / 2.0;
    let src = c + (i as f64 - c) / scale;
    (src.round().max(0.0) as usize).min(extent - 1)
}

fn zoom_annotation(a: &Annotation, shape: &[usize], scale: f64) -> Annotation {
    match a {
        Annotation::Partial(s) => Annotation::Partial(s.clone()),
        Annotation::Sparse { axis, slices } => {
            let extent = shape[*axis];
            let mut out: BTreeMap<usize, AnnotatedSubset> = BTreeMap::new();
            for i in 0..extent {
                if let Some(s) = slices.get(&zoom_src(i, extent, scale)) {
                    out.insert(i, s.clone());
                }
            }
            Annotation::Sparse { axis: *axis, slices: out }
        }
    }
}

/// Random 90°-multiple rotation plus ±10% zoom; the patch shape is kept.
/// Odd quarter turns are skipped for non-square patches.
pub fn augment_patch<R: Rng>(
    patch: &AnnotatedVolume,
    classes: &ClassSet,
    rng: &mut R,
) -> Result<AnnotatedVolume> {
    let square = patch.shape()[0] == patch.shape()[1];
    let k = if square { rng.gen_range(0..4usize) } else { 2 * rng.gen_range(0..2usize) };
    let scale: f64 = rng.gen_range(0.9..=1.1);

    let mut intensities = patch.intensities.clone();
    let mut labels = patch.labels.clone();
    let mut annotation = patch.annotation.clone();
    for _ in 0..k {
        let extent = intensities.shape()[1];
        intensities = rot90(&intensities, 1);
        labels = rot90(&labels, 1);
        annotation = rot90_annotation(&annotation, extent);
    }

    let shape = intensities.shape().to_vec();
    let mut zi = Volume::<f32>::zeros(shape.clone());
    let mut zl = Volume::<u8>::zeros(shape.clone());
    for i in 0..shape[0] {
        let si = zoom_src(i, shape[0], scale);
        for j in 0..shape[1] {
            let sj = zoom_src(j, shape[1], scale);
            zi.data_mut()[i * shape[1] + j] = intensities.data()[si * shape[1] + sj];
            zl.data_mut()[i * shape[1] + j] = labels.data()[si * shape[1] + sj];
        }
    }
    let annotation = zoom_annotation(&annotation, &shape, scale);

    AnnotatedVolume::new(
        zi,
        zl,
        annotation,
        patch.dataset_id.clone(),
        patch.modality_id.clone(),
        patch.image_id.clone(),
        classes,
    )
}

pub fn train(
    train_vols: &[&AnnotatedVolume],
    classes: &ClassSet,
    eval_set: Option<&Corpus>,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_vols.is_empty() {
        return Err(Error::UnsampleableCorpus("no training volumes".into()));
    }
    let index = build_index(train_vols.iter().copied(), classes)?;
    let sampler_cfg = cfg.sampler_config();
    sampler_cfg.validate()?;

    let net_cfg = NetConfig {
        in_channels: 1,
        hidden: cfg.hidden,
        kernel: cfg.kernel,
        out_channels: classes.n_channels(),
    };
    let mut net_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ NET_SEED_SALT);
    let mut net = TinyNet::init(net_cfg, &mut net_rng)?;
    let mut state = OptimState::new(net.params().len());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let mut log: Vec<TrainRecord> = vec![];
    let mut last_loss = f64::NAN;

    for it in 0..cfg.iterations {
        let lr = poly_lr(cfg.optim.base_lr, it, cfg.iterations, cfg.optim.lr_power);

        // Sequential draws keep the random stream independent of threading.
        let mut patches = Vec::with_capacity(cfg.batch_size);
        for _ in 0..cfg.batch_size {
            let key = sample(&index, &sampler_cfg, &mut rng)?;
            let patch = extract_patch(train_vols[key.image_idx], &key, &sampler_cfg, classes)?;
            let patch =
                if cfg.augment { augment_patch(&patch, classes, &mut rng)? } else { patch };
            patches.push(patch);
        }

        let members = run_batch(&net, &patches, classes, cfg)
            .map_err(|e| annotate_iteration(e, it + 1))?;

        let b = cfg.batch_size as f64;
        let mut grad_mean = vec![0.0; net.params().len()];
        let (mut loss_sum, mut focal_sum, mut dice_sum, mut entropy_sum) = (0.0, 0.0, 0.0, 0.0);
        for m in &members {
            loss_sum += m.value;
            focal_sum += m.focal;
            dice_sum += m.dice;
            entropy_sum += m.entropy;
            for (g, mg) in grad_mean.iter_mut().zip(&m.grads) {
                *g += mg;
            }
        }
        for g in &mut grad_mean {
            *g /= b;
        }
        last_loss = loss_sum / b;

        adamw_step(net.params_mut(), &grad_mean, &mut state, &cfg.optim, lr)
            .map_err(|e| annotate_iteration(e, it + 1))?;

        let iter_1 = it + 1;
        let should_log = iter_1 % cfg.log_every == 0 || iter_1 == cfg.iterations || it == 0;
        if should_log {
            let eval_dsc = match eval_set {
                Some(corpus)
                    if cfg.eval_every > 0
                        && (iter_1 % cfg.eval_every == 0 || iter_1 == cfg.iterations) =>
                {
                    Some(eval_mean_dsc(&net, corpus, classes)?)
                }
                _ => None,
            };
            log.push(TrainRecord {
                iter: iter_1,
                lr,
                loss: last_loss,
                focal: focal_sum / b,
                dice: dice_sum / b,
                entropy: entropy_sum / b,
                eval_dsc,
            });
        }
    }

    if let Some(path) = &cfg.log_path {
        std::fs::write(path, render_log(&log, net.params().len()))
            .map_err(|e| Error::io(path, e))?;
    }
    if let Some(path) = &cfg.checkpoint_path {
        let ckpt = net_to_checkpoint(&net, checkpoint_meta(cfg, classes, last_loss))?;
        save_checkpoint(path, &ckpt)?;
    }

    Ok(TrainOutcome { net, log, final_loss: last_loss })
}

fn annotate_iteration(e: Error, iter: u64) -> Error {
    match e {
        Error::NonFinite(msg) => Error::NonFinite(format!("iteration {}: {}", iter, msg)),
        other => other,
    }
}

fn run_batch(
    net: &TinyNet,
    patches: &[AnnotatedVolume],
    classes: &ClassSet,
    cfg: &TrainConfig,
) -> Result<Vec<MemberOut>> {
    if cfg.threads == 1 || patches.len() == 1 {
        return patches
            .iter()
            .map(|p| member_pass(net, p, classes, &cfg.loss, cfg.lambda_per_patch))
            .collect();
    }
    let n_workers = cfg.threads.min(patches.len());
    let mut slots: Vec<Option<Result<MemberOut>>> = Vec::new();
    slots.resize_with(patches.len(), || None);
    std::thread::scope(|scope| {
        let mut handles = vec![];
        for w in 0..n_workers {
            handles.push(scope.spawn(move || {
                let mut outs = vec![];
                let mut i = w;
                while i < patches.len() {
                    outs.push((
                        i,
                        member_pass(net, &patches[i], classes, &cfg.loss, cfg.lambda_per_patch),
                    ));
                    i += n_workers;
                }
                outs
            }));
        }
        for h in handles {
            for (i, out) in h.join().expect("worker panicked") {
                slots[i] = Some(out);
            }
        }
    });
    // Fixed reduction order: batch index, regardless of which worker ran it.
    slots.into_iter().map(|s| s.expect("all slots filled")).collect()
}

/// Subject-level mean DSC of the net's argmax predictions against the
/// corpus's full label maps.
pub fn eval_mean_dsc(net: &TinyNet, corpus: &Corpus, classes: &ClassSet) -> Result<f64> {
    let mut pairs = Vec::with_capacity(corpus.volumes.len());
    for gt in &corpus.volumes {
        pairs.push(EvalPair {
            image_id: gt.annotated.image_id.clone(),
            dataset_id: gt.annotated.dataset_id.clone(),
            pred: predict(net, &gt.annotated.intensities)?,
            truth: gt.full_labels.clone(),
        });
    }
    let report = evaluate(&pairs, classes, EvalOptions::default())?;
    Ok(report.subject_level.mean)
}

fn checkpoint_meta(
    cfg: &TrainConfig,
    classes: &ClassSet,
    final_loss: f64,
) -> BTreeMap<String, String> {
    let mut meta = BTreeMap::new();
    meta.insert("iterations".into(), cfg.iterations.to_string());
    meta.insert("seed".into(), cfg.seed.to_string());
    meta.insert("config_hash".into(), format!("{:016x}", cfg.fingerprint(classes)));
    meta.insert("final_loss".into(), format!("{:e}", final_loss));
    meta
}

/// Store the parameters as named f32 tensors plus architecture metadata.
pub fn net_to_checkpoint(
    net: &TinyNet,
    mut meta: BTreeMap<String, String>,
) -> Result<Checkpoint> {
    let cfg = net.config();
    meta.insert("arch.in_channels".into(), cfg.in_channels.to_string());
    meta.insert("arch.hidden".into(), cfg.hidden.to_string());
    meta.insert("arch.kernel".into(), cfg.kernel.to_string());
    meta.insert("arch.out_channels".into(), cfg.out_channels.to_string());
    meta.insert("param_count".into(), cfg.param_count().to_string());
    let mut tensors = BTreeMap::new();
    for (name, shape, range) in cfg.layer_specs() {
        let data: Vec<f32> = net.params()[range].iter().map(|&p| p as f32).collect();
        tensors.insert(name.to_string(), Tensor::F32(Volume::new(shape, data)?));
    }
    Ok(Checkpoint { meta, tensors })
}

pub fn net_from_checkpoint(ckpt: &Checkpoint) -> Result<TinyNet> {
    let cfg = NetConfig {
        in_channels: ckpt.meta_usize("arch.in_channels")?,
        hidden: ckpt.meta_usize("arch.hidden")?,
        kernel: ckpt.meta_usize("arch.kernel")?,
        out_channels: ckpt.meta_usize("arch.out_channels")?,
    };
    cfg.validate()?;
    let mut params = vec![0.0f64; cfg.param_count()];
    for (name, shape, range) in cfg.layer_specs() {
        let t = ckpt.tensor(name)?.as_f32()?;
        if t.shape() != shape.as_slice() {
            return Err(Error::Contract(format!(
                "checkpoint tensor {:?} has shape {:?}, expected {:?}",
                name,
                t.shape(),
                shape
            )));
        }
        for (dst, &src) in params[range].iter_mut().zip(t.data()) {
            *dst = src as f64;
        }
    }
    TinyNet::from_params(cfg, params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::checkpoint::load_checkpoint;
    use crate::synth::{generate, DatasetSpec, GenSpec, LabelKind};

    fn tiny_cfg(iterations: u64) -> TrainConfig {
        TrainConfig {
            iterations,
            batch_size: 2,
            patch_shape: vec![20, 20],
            hidden: 4,
            log_every: 1,
            ..TrainConfig::default()
        }
    }

    fn one_image_corpus(seed: u64) -> Corpus {
        let datasets = vec![DatasetSpec::new("solo", "ct", &[1, 2], LabelKind::Partial)];
        let mut spec = GenSpec::new(vec![20, 20], 2, datasets);
        spec.n_images = 1;
        spec.seed = seed;
        generate(&spec).unwrap()
    }

    #[test]
    fn overfit_single_image() {
        let corpus = one_image_corpus(11);
        let refs: Vec<&AnnotatedVolume> = corpus.volumes.iter().map(|g| &g.annotated).collect();
        let mut cfg = tiny_cfg(800);
        cfg.hidden = 6;
        cfg.optim.base_lr = 5e-3;
        let out = train(&refs, &corpus.classes, None, &cfg).unwrap();
        let early: f64 = out.log[..10].iter().map(|r| r.loss).sum::<f64>() / 10.0;
        let late: f64 =
            out.log[out.log.len() - 10..].iter().map(|r| r.loss).sum::<f64>() / 10.0;
        assert!(
            late <= 0.1 * early,
            "loss went from {:.4} (first 10) to {:.4} (last 10)",
            early,
            late
        );
        assert!(out.log.iter().all(|r| r.loss.is_finite()));
    }

    #[test]
    fn unannotated_corpus_trains_on_entropy_alone() {
        let datasets = vec![DatasetSpec::new("blank", "ct", &[], LabelKind::Partial)];
        let mut spec = GenSpec::new(vec![20, 20], 2, datasets);
        spec.n_images = 2;
        spec.seed = 4;
        spec.allow_uncovered = true;
        let corpus = generate(&spec).unwrap();
        let refs: Vec<&AnnotatedVolume> = corpus.volumes.iter().map(|g| &g.annotated).collect();
        let cfg = tiny_cfg(20);
        let out = train(&refs, &corpus.classes, None, &cfg).unwrap();
        for r in &out.log {
            let lam = cfg.loss.lambda_unannotated;
            assert!(
                (r.loss - lam * r.entropy).abs() <= 1e-12 * r.loss.abs().max(1.0),
                "iter {}: loss {} vs λ·entropy {}",
                r.iter,
                r.loss,
                lam * r.entropy
            );
            assert_eq!(r.focal, 0.0);
            assert_eq!(r.dice, 0.0);
        }
    }

    #[test]
    fn same_seed_same_parameters() {
        let corpus = one_image_corpus(8);
        let refs: Vec<&AnnotatedVolume> = corpus.volumes.iter().map(|g| &g.annotated).collect();
        let cfg = tiny_cfg(30);
        let a = train(&refs, &corpus.classes, None, &cfg).unwrap();
        let b = train(&refs, &corpus.classes, None, &cfg).unwrap();
        assert_eq!(a.net.params(), b.net.params());
        let mut c_cfg = cfg.clone();
        c_cfg.seed = 1;
        let c = train(&refs, &corpus.classes, None, &c_cfg).unwrap();
        assert_ne!(a.net.params(), c.net.params());
    }

    #[test]
    fn threaded_batches_match_single_thread() {
        let corpus = one_image_corpus(15);
        let refs: Vec<&AnnotatedVolume> = corpus.volumes.iter().map(|g| &g.annotated).collect();
        let mut cfg = tiny_cfg(10);
        cfg.batch_size = 4;
        let single = train(&refs, &corpus.classes, None, &cfg).unwrap();
        cfg.threads = 3;
        let threaded = train(&refs, &corpus.classes, None, &cfg).unwrap();
        assert_eq!(single.net.params(), threaded.net.params());
        assert_eq!(single.log, threaded.log);
    }

    #[test]
    fn checkpoint_and_log_files_written() {
        let dir = tempfile::tempdir().unwrap();
        let corpus = one_image_corpus(2);
        let refs: Vec<&AnnotatedVolume> = corpus.volumes.iter().map(|g| &g.annotated).collect();
        let mut cfg = tiny_cfg(5);
        cfg.checkpoint_path = Some(dir.path().join("model.sgc"));
        cfg.log_path = Some(dir.path().join("train.tsv"));
        cfg.eval_every = 5;
        let out = train(&refs, &corpus.classes, Some(&corpus), &cfg).unwrap();

        let log_text = std::fs::read_to_string(dir.path().join("train.tsv")).unwrap();
        assert!(log_text.starts_with("# params="));
        assert!(log_text.lines().count() >= 3);
        assert!(out.log.last().unwrap().eval_dsc.is_some());

        let ckpt = load_checkpoint(&dir.path().join("model.sgc")).unwrap();
        assert_eq!(ckpt.meta_usize("iterations").unwrap(), 5);
        assert_eq!(ckpt.meta_usize("arch.hidden").unwrap(), 4);
        let back = net_from_checkpoint(&ckpt).unwrap();
        assert_eq!(back.params().len(), out.net.params().len());
        for (a, b) in back.params().iter().zip(out.net.params()) {
            assert_eq!(*a, *b as f32 as f64);
        }
    }

    #[test]
    fn augmentation_preserves_validity_and_identity_cases() {
        let corpus = {
            let datasets = vec![DatasetSpec::new("sp", "ct", &[1, 2], LabelKind::Sparse)];
            let mut spec = GenSpec::new(vec![20, 20], 2, datasets);
            spec.n_images = 3;
            spec.seed = 6;
            spec.sparse_fraction = 0.3;
            generate(&spec).unwrap()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for gt in &corpus.volumes {
            for _ in 0..20 {
                // Construction re-validates every label-model invariant.
                let aug = augment_patch(&gt.annotated, &corpus.classes, &mut rng).unwrap();
                assert_eq!(aug.shape(), gt.annotated.shape());
            }
        }
    }

    #[test]
    fn rotation_helpers_are_exact() {
        let v = Volume::new(vec![2, 3], vec![1u8, 2, 3, 4, 5, 6]).unwrap();
        let r1 = rot90(&v, 1);
        assert_eq!(r1.shape(), &[3, 2]);
        assert_eq!(r1.data(), &[3, 6, 2, 5, 1, 4]);
        let r4 = rot90(&v, 4);
        assert_eq!(r4, v);

        // Square sparse annotation: axis 0 row 1 becomes axis 1 column 1.
        let slices: BTreeMap<usize, AnnotatedSubset> =
            [(1usize, AnnotatedSubset::from_ids([1u8]))].into_iter().collect();
        let a = Annotation::Sparse { axis: 0, slices };
        match rot90_annotation(&a, 4) {
            Annotation::Sparse { axis: 1, slices } => {
                assert!(slices.contains_key(&1));
            }
            other => panic!("unexpected {:?}", other),
        }
        // And a column annotation flips its index.
        let b = rot90_annotation(&rot90_annotation(&a, 4), 4);
        match b {
            Annotation::Sparse { axis: 0, slices } => {
                assert!(slices.contains_key(&(4 - 1 - 1)));
            }
            other => panic!("unexpected {:?}", other),
        }
    }

    #[test]
    fn per_patch_lambda_changes_mixed_patches_only() {
        // A sparse volume with one annotated slice has both annotated and
        // empty views; the per-patch rule must weight the empty ones with
        // λ_annotated instead of λ_unannotated.
        let datasets = vec![DatasetSpec::new("sp", "ct", &[1], LabelKind::Sparse)];
        let mut spec = GenSpec::new(vec![16, 16], 1, datasets);
        spec.n_images = 1;
        spec.seed = 12;
        spec.sparse_fraction = 0.1;
        let corpus = generate(&spec).unwrap();
        let vol = &corpus.volumes[0].annotated;

        let net_cfg = NetConfig { in_channels: 1, hidden: 2, kernel: 3, out_channels: 2 };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let net = TinyNet::init(net_cfg, &mut rng).unwrap();

        let per_view =
            member_pass(&net, vol, &corpus.classes, &LossConfig::default(), false).unwrap();
        let per_patch =
            member_pass(&net, vol, &corpus.classes, &LossConfig::default(), true).unwrap();
        assert!(per_view.value > per_patch.value, "empty views lose their 3x weight");
        assert_eq!(per_view.focal, per_patch.focal);
        assert_eq!(per_view.dice, per_patch.dice);
    }

    #[test]
    fn invalid_configs_rejected() {
        let cfg = TrainConfig { iterations: 0, ..TrainConfig::default() };
        assert!(cfg.validate().is_err());
        let cfg = TrainConfig { patch_shape: vec![8, 8, 8], ..TrainConfig::default() };
        assert!(cfg.validate().is_err());
        let cfg = TrainConfig { threads: 0, ..TrainConfig::default() };
        assert!(cfg.validate().is_err());
    }
}
