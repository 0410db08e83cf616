//! `gradcheck`: central finite differences against the analytic gradients,
//! per loss term and through the network.

use std::collections::BTreeMap;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use ambiseg::config::Shape;
use ambiseg::dataio::checkpoint::fnv1a;
use ambiseg::label::{
    AnnotatedSubset, AnnotatedVolume, Annotation, ClassSet, ProbField,
};
use ambiseg::loss::{dice, entropy_reg, focal_ce, softmax, total_loss, LossConfig};
use ambiseg::net::{NetConfig, TinyNet};
use ambiseg::volume::{Field, Volume};
use ambiseg::{Error, Result};

use crate::common::{ensure_out_dir, kv, resolve_config, write_effective};
use crate::{CommonArgs, EXIT_NUMERICAL, EXIT_OK};

struct CheckSettings {
    instances: usize,
    step: f64,
    tolerance: f64,
    net_tolerance: f64,
    spatial: Vec<usize>,
    n_structures: usize,
    seed: u64,
    loss: LossConfig,
}

struct CheckRow {
    name: &'static str,
    cases: usize,
    max_err: f64,
    tolerance: f64,
}

impl CheckRow {
    fn passed(&self) -> bool {
        self.max_err.is_finite() && self.max_err < self.tolerance
    }
}

/// Worst element error, relative to each element's own magnitude where that
/// magnitude is meaningful, absolute below it.
fn grad_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let mut worst = 0.0f64;
    for (&a, &n) in analytic.iter().zip(numeric) {
        let scale = a.abs().max(n.abs());
        let err = if scale > 1e-6 { (a - n).abs() / scale } else { (a - n).abs() };
        worst = worst.max(err);
    }
    worst
}

fn central_diff(f: &mut dyn FnMut(&[f64]) -> Result<f64>, x: &[f64], h: f64) -> Result<Vec<f64>> {
    let mut probe = x.to_vec();
    let mut grad = vec![0.0; x.len()];
    for i in 0..x.len() {
        probe[i] = x[i] + h;
        let up = f(&probe)?;
        probe[i] = x[i] - h;
        let down = f(&probe)?;
        probe[i] = x[i];
        grad[i] = (up - down) / (2.0 * h);
    }
    Ok(grad)
}

fn random_logits(rng: &mut ChaCha8Rng, channels: usize, spatial: &[usize]) -> Field {
    let n: usize = spatial.iter().product();
    let data: Vec<f64> = (0..channels * n).map(|_| rng.gen_range(-2.0..2.0)).collect();
    Field::from_data(channels, spatial.to_vec(), data).expect("consistent size")
}

fn random_subset(rng: &mut ChaCha8Rng, classes: &ClassSet) -> AnnotatedSubset {
    let n = classes.n_structures();
    let size = rng.gen_range(0..=n);
    let mut ids: Vec<u8> = (1..=n as u8).collect();
    ids.shuffle(rng);
    ids.truncate(size);
    AnnotatedSubset::new(ids, classes).expect("ids drawn from the universe")
}

fn random_labels(rng: &mut ChaCha8Rng, subset: &AnnotatedSubset, n: usize) -> Vec<u8> {
    let mut pool = vec![0u8];
    pool.extend_from_slice(subset.members());
    (0..n).map(|_| *pool.choose(rng).expect("nonempty pool")).collect()
}

fn probs_of(logits: &[f64], channels: usize, spatial: &[usize]) -> Result<ProbField> {
    softmax(&Field::from_data(channels, spatial.to_vec(), logits.to_vec())?)
}

/// A volume whose labels obey a randomly chosen partial or sparse record.
fn random_volume(rng: &mut ChaCha8Rng, s: &CheckSettings, classes: &ClassSet) -> AnnotatedVolume {
    let (rows, cols) = (s.spatial[0], s.spatial[1]);
    let intensities: Vec<f32> = (0..rows * cols).map(|_| rng.gen_range(0.0..1.0)).collect();

    let annotation = if rng.gen_bool(0.5) {
        Annotation::Partial(random_subset(rng, classes))
    } else {
        let axis = rng.gen_range(0..2usize);
        let extent = s.spatial[axis];
        let mut slices = BTreeMap::new();
        for idx in 0..extent {
            if rng.gen_bool(0.6) {
                slices.insert(idx, random_subset(rng, classes));
            }
        }
        Annotation::Sparse { axis, slices }
    };

    let labels: Vec<u8> = (0..rows * cols)
        .map(|v| {
            let coord = [v / cols, v % cols];
            let subset = match &annotation {
                Annotation::Partial(sub) => Some(sub),
                Annotation::Sparse { axis, slices } => slices.get(&coord[*axis]),
            };
            match subset {
                Some(sub) if !sub.is_empty() && rng.gen_bool(0.7) => {
                    *sub.members().choose(rng).expect("nonempty")
                }
                _ => 0,
            }
        })
        .collect();

    AnnotatedVolume::new(
        Volume::new(vec![rows, cols], intensities).expect("consistent size"),
        Volume::new(vec![rows, cols], labels).expect("consistent size"),
        annotation,
        "d".into(),
        "m".into(),
        "d_m_probe".into(),
        classes,
    )
    .expect("labels drawn from governing subsets")
}

fn check_view_losses(s: &CheckSettings, which: &'static str) -> Result<CheckRow> {
    let classes = ClassSet::new(s.n_structures)?;
    let channels = classes.n_channels();
    let mut rng = ChaCha8Rng::seed_from_u64(s.seed ^ fnv_tag(which));
    let mut worst = 0.0f64;
    for _ in 0..s.instances {
        let logits = random_logits(&mut rng, channels, &s.spatial);
        let subset = random_subset(&mut rng, &classes);
        let labels = random_labels(&mut rng, &subset, logits.n_voxels());
        let mut value = |x: &[f64]| -> Result<f64> {
            let p = probs_of(x, channels, &s.spatial)?;
            let r = match which {
                "focal_ce" => focal_ce(&p, &labels, &subset, &classes, &s.loss)?,
                "dice" => dice(&p, &labels, &subset, &classes, &s.loss)?,
                "entropy_reg" => entropy_reg(&p)?,
                _ => unreachable!("unknown view loss"),
            };
            Ok(r.value)
        };
        let analytic = {
            let p = probs_of(logits.data(), channels, &s.spatial)?;
            match which {
                "focal_ce" => focal_ce(&p, &labels, &subset, &classes, &s.loss)?,
                "dice" => dice(&p, &labels, &subset, &classes, &s.loss)?,
                "entropy_reg" => entropy_reg(&p)?,
                _ => unreachable!("unknown view loss"),
            }
            .grad_logits
        };
        let numeric = central_diff(&mut value, logits.data(), s.step)?;
        worst = worst.max(grad_error(analytic.data(), &numeric));
    }
    Ok(CheckRow { name: which, cases: s.instances, max_err: worst, tolerance: s.tolerance })
}

fn check_total(s: &CheckSettings) -> Result<CheckRow> {
    let classes = ClassSet::new(s.n_structures)?;
    let channels = classes.n_channels();
    let mut rng = ChaCha8Rng::seed_from_u64(s.seed ^ fnv_tag("total_loss"));
    let mut worst = 0.0f64;
    for _ in 0..s.instances {
        let vol = random_volume(&mut rng, s, &classes);
        let logits = random_logits(&mut rng, channels, &s.spatial);
        let mut value = |x: &[f64]| -> Result<f64> {
            let f = Field::from_data(channels, s.spatial.clone(), x.to_vec())?;
            Ok(total_loss(&f, &vol, &classes, &s.loss)?.value)
        };
        let analytic = total_loss(&logits, &vol, &classes, &s.loss)?.grad_logits;
        let numeric = central_diff(&mut value, logits.data(), s.step)?;
        worst = worst.max(grad_error(analytic.data(), &numeric));
    }
    Ok(CheckRow { name: "total_loss", cases: s.instances, max_err: worst, tolerance: s.tolerance })
}

fn check_net(s: &CheckSettings, name: &'static str, kernel: usize) -> Result<CheckRow> {
    let classes = ClassSet::new(s.n_structures)?;
    let cfg = NetConfig {
        in_channels: 1,
        hidden: 3,
        kernel,
        out_channels: classes.n_channels(),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(s.seed ^ fnv_tag(name));
    let cases = s.instances.clamp(1, 4);
    let mut worst = 0.0f64;
    for _ in 0..cases {
        // Generic parameter point: random nonzero values keep the hidden
        // pre-activations away from the ReLU kink where one-sided derivatives
        // disagree with the finite-difference stencil.
        let params: Vec<f64> =
            (0..cfg.param_count()).map(|_| rng.gen_range(-0.7..0.7)).collect();
        let vol = random_volume(&mut rng, s, &classes);
        let mut value = |x: &[f64]| -> Result<f64> {
            let net = TinyNet::from_params(cfg.clone(), x.to_vec())?;
            let pass = net.forward(&vol.intensities)?;
            Ok(total_loss(&pass.logits, &vol, &classes, &s.loss)?.value)
        };
        let net = TinyNet::from_params(cfg.clone(), params.clone())?;
        let pass = net.forward(&vol.intensities)?;
        let total = total_loss(&pass.logits, &vol, &classes, &s.loss)?;
        let analytic = net.backward(&pass, &total.grad_logits)?;
        let numeric = central_diff(&mut value, &params, s.step)?;
        worst = worst.max(grad_error(&analytic, &numeric));
    }
    Ok(CheckRow { name, cases, max_err: worst, tolerance: s.net_tolerance })
}

fn fnv_tag(name: &str) -> u64 {
    fnv1a(name.as_bytes())
}

fn render(rows: &[CheckRow], epsilon: f64) -> String {
    let mut out = String::new();
    if epsilon == 0.0 {
        out.push_str("note: dice smoothing epsilon is 0; probing the unsmoothed loss\n");
    }
    out.push_str("check\tcases\tmax_rel_err\ttolerance\tverdict\n");
    for r in rows {
        out.push_str(&format!(
            "{}\t{}\t{:.3e}\t{:.1e}\t{}\n",
            r.name,
            r.cases,
            r.max_err,
            r.tolerance,
            if r.passed() { "PASS" } else { "FAIL" }
        ));
    }
    out
}

pub fn cmd_gradcheck(args: &CommonArgs) -> Result<i32> {
    let cfg = resolve_config(args)?;
    let mut loss = LossConfig::default();
    loss.epsilon = cfg.get_or("loss.epsilon", loss.epsilon)?;
    loss.focal_exponent = cfg.get_or("loss.focal_exponent", loss.focal_exponent)?;
    loss.lambda_annotated = cfg.get_or("loss.lambda_annotated", loss.lambda_annotated)?;
    loss.lambda_unannotated = cfg.get_or("loss.lambda_unannotated", loss.lambda_unannotated)?;
    loss.ambiguity_aware = cfg.get_or("loss.ambiguity_aware", loss.ambiguity_aware)?;
    loss.validate()?;

    let mut s = CheckSettings {
        instances: cfg.get_or("gradcheck.instances", 20usize)?,
        step: cfg.get_or("gradcheck.step", 1e-4)?,
        tolerance: cfg.get_or("gradcheck.tolerance", 1e-4)?,
        net_tolerance: cfg.get_or("gradcheck.net_tolerance", 1e-3)?,
        spatial: cfg.get_or("gradcheck.shape", Shape(vec![6, 5]))?.0,
        n_structures: cfg.get_or("gradcheck.classes", 4usize)?,
        seed: cfg.get_or("gradcheck.seed", 0u64)?,
        loss,
    };
    if let Some(seed) = args.seed {
        s.seed = seed;
    }
    cfg.ensure_fully_consumed()?;
    if s.instances == 0 {
        return Err(Error::Contract("gradcheck needs at least one instance".into()));
    }
    if !(s.step > 0.0) {
        return Err(Error::Contract(format!("step must be positive, got {}", s.step)));
    }
    if s.spatial.len() != 2 {
        return Err(Error::Contract(format!(
            "gradcheck probes rank-2 volumes, got shape {:?}",
            s.spatial
        )));
    }
    let out = ensure_out_dir(args)?;

    let mut pairs = BTreeMap::new();
    kv(&mut pairs, "gradcheck.instances", s.instances);
    kv(&mut pairs, "gradcheck.step", s.step);
    kv(&mut pairs, "gradcheck.tolerance", s.tolerance);
    kv(&mut pairs, "gradcheck.net_tolerance", s.net_tolerance);
    let shape: Vec<String> = s.spatial.iter().map(|e| e.to_string()).collect();
    kv(&mut pairs, "gradcheck.shape", shape.join("x"));
    kv(&mut pairs, "gradcheck.classes", s.n_structures);
    kv(&mut pairs, "gradcheck.seed", s.seed);
    kv(&mut pairs, "loss.epsilon", s.loss.epsilon);
    kv(&mut pairs, "loss.focal_exponent", s.loss.focal_exponent);
    kv(&mut pairs, "loss.lambda_annotated", s.loss.lambda_annotated);
    kv(&mut pairs, "loss.lambda_unannotated", s.loss.lambda_unannotated);
    kv(&mut pairs, "loss.ambiguity_aware", s.loss.ambiguity_aware);
    write_effective(&out, "gradcheck", &pairs)?;

    let rows = vec![
        check_view_losses(&s, "focal_ce")?,
        check_view_losses(&s, "dice")?,
        check_view_losses(&s, "entropy_reg")?,
        check_total(&s)?,
        check_net(&s, "net_k1", 1)?,
        check_net(&s, "net_k3", 3)?,
    ];
    let text = render(&rows, s.loss.epsilon);
    let path = out.join("gradcheck.txt");
    std::fs::write(&path, &text).map_err(|e| Error::io(&path, e))?;
    print!("{}", text);

    if rows.iter().all(|r| r.passed()) {
        println!("gradient check passed");
        Ok(EXIT_OK)
    } else {
        println!("gradient check FAILED");
        Ok(EXIT_NUMERICAL)
    }
}
