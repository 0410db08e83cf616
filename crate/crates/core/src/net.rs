//! A small fully convolutional segmentation network.
//!
//! Two same-padded KxK convolutions with ReLU, then a 1x1 head producing one
//! logit channel per label channel. Parameters live in a single flat vector
//! (conv1 weights, conv1 bias, conv2 weights, conv2 bias, head weights, head
//! bias) so the optimizer can treat the model as one array. All arithmetic is
//! f64; inputs arrive as f32 intensities and are widened on entry.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::volume::{Field, Volume};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NetConfig {
    pub in_channels: usize,
    pub hidden: usize,
    pub kernel: usize,
    pub out_channels: usize,
}

impl NetConfig {
    pub fn new(out_channels: usize) -> Self {
        NetConfig { in_channels: 1, hidden: 8, kernel: 3, out_channels }
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.hidden == 0 || self.out_channels == 0 {
            return Err(Error::Contract("channel counts must be positive".into()));
        }
        if self.kernel == 0 || self.kernel % 2 == 0 {
            return Err(Error::Contract(format!(
                "kernel size must be odd, got {}",
                self.kernel
            )));
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        let k2 = self.kernel * self.kernel;
        self.hidden * self.in_channels * k2
            + self.hidden
            + self.hidden * self.hidden * k2
            + self.hidden
            + self.out_channels * self.hidden
            + self.out_channels
    }

    fn offsets(&self) -> [usize; 7] {
        let k2 = self.kernel * self.kernel;
        let mut off = [0usize; 7];
        off[1] = off[0] + self.hidden * self.in_channels * k2;
        off[2] = off[1] + self.hidden;
        off[3] = off[2] + self.hidden * self.hidden * k2;
        off[4] = off[3] + self.hidden;
        off[5] = off[4] + self.out_channels * self.hidden;
        off[6] = off[5] + self.out_channels;
        off
    }

    /// Layer name, tensor shape, and range in the flat parameter vector.
    pub fn layer_specs(&self) -> Vec<(&'static str, Vec<usize>, std::ops::Range<usize>)> {
        let off = self.offsets();
        let (ci, h, k, c) = (self.in_channels, self.hidden, self.kernel, self.out_channels);
        vec![
            ("conv1.weight", vec![h, ci, k, k], off[0]..off[1]),
            ("conv1.bias", vec![h], off[1]..off[2]),
            ("conv2.weight", vec![h, h, k, k], off[2]..off[3]),
            ("conv2.bias", vec![h], off[3]..off[4]),
            ("head.weight", vec![c, h], off[4]..off[5]),
            ("head.bias", vec![c], off[5]..off[6]),
        ]
    }
}

#[derive(Debug, Clone)]
pub struct TinyNet {
    cfg: NetConfig,
    params: Vec<f64>,
}

/// Activations kept from a forward pass for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardPass {
    pub logits: Field,
    x: Field,
    a1: Field,
    a2: Field,
}

impl TinyNet {
    /// He-initialized weights, zero biases.
    pub fn init<R: Rng>(cfg: NetConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let k2 = cfg.kernel * cfg.kernel;
        let mut params = vec![0.0; cfg.param_count()];
        let off = cfg.offsets();
        let mut fill = |range: std::ops::Range<usize>, fan_in: usize, params: &mut Vec<f64>| {
            let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive sd");
            for p in &mut params[range] {
                *p = normal.sample(rng);
            }
        };
        fill(off[0]..off[1], cfg.in_channels * k2, &mut params);
        fill(off[2]..off[3], cfg.hidden * k2, &mut params);
        fill(off[4]..off[5], cfg.hidden, &mut params);
        Ok(TinyNet { cfg, params })
    }

    pub fn from_params(cfg: NetConfig, params: Vec<f64>) -> Result<Self> {
        cfg.validate()?;
        if params.len() != cfg.param_count() {
            return Err(Error::Contract(format!(
                "expected {} parameters, got {}",
                cfg.param_count(),
                params.len()
            )));
        }
        if !params.iter().all(|p| p.is_finite()) {
            return Err(Error::NonFinite("network parameters".into()));
        }
        Ok(TinyNet { cfg, params })
    }

    pub fn config(&self) -> &NetConfig {
        &self.cfg
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn forward(&self, intensities: &Volume<f32>) -> Result<ForwardPass> {
        if intensities.rank() != 2 {
            return Err(Error::Contract(format!(
                "network expects 2-d input, got rank {}",
                intensities.rank()
            )));
        }
        if self.cfg.in_channels != 1 {
            return Err(Error::Contract(
                "single-channel intensities for a multi-channel network".into(),
            ));
        }
        let spatial = intensities.shape().to_vec();
        let x = Field::from_data(
            1,
            spatial.clone(),
            intensities.data().iter().map(|&v| v as f64).collect(),
        )?;
        let off = self.cfg.offsets();
        let (h, k, c) = (self.cfg.hidden, self.cfg.kernel, self.cfg.out_channels);

        let mut a1 = Field::zeros(h, spatial.clone());
        conv_forward(
            &x,
            &self.params[off[0]..off[1]],
            &self.params[off[1]..off[2]],
            k,
            &mut a1,
        );
        relu_inplace(&mut a1);

        let mut a2 = Field::zeros(h, spatial.clone());
        conv_forward(
            &a1,
            &self.params[off[2]..off[3]],
            &self.params[off[3]..off[4]],
            k,
            &mut a2,
        );
        relu_inplace(&mut a2);

        let mut logits = Field::zeros(c, spatial);
        head_forward(
            &a2,
            &self.params[off[4]..off[5]],
            &self.params[off[5]..off[6]],
            &mut logits,
        );
        if !logits.all_finite() {
            return Err(Error::NonFinite("network logits".into()));
        }
        Ok(ForwardPass { logits, x, a1, a2 })
    }

    /// Parameter gradients for the given logit gradients, in the flat layout.
    pub fn backward(&self, pass: &ForwardPass, grad_logits: &Field) -> Result<Vec<f64>> {
        if !grad_logits.same_shape(&pass.logits) {
            return Err(Error::Contract("gradient shape does not match logits".into()));
        }
        if pass.x.channels() != self.cfg.in_channels
            || pass.a1.channels() != self.cfg.hidden
            || pass.a2.channels() != self.cfg.hidden
            || pass.logits.channels() != self.cfg.out_channels
            || pass.a1.spatial() != pass.x.spatial()
        {
            return Err(Error::Contract(
                "cached activations do not match this network's shape".into(),
            ));
        }
        let off = self.cfg.offsets();
        let (h, k) = (self.cfg.hidden, self.cfg.kernel);
        let mut grads = vec![0.0; self.params.len()];

        let mut g2 = Field::zeros(h, pass.a2.spatial().to_vec());
        head_backward(
            &pass.a2,
            &self.params[off[4]..off[5]],
            grad_logits,
            &mut grads[off[4]..off[6]].split_at_mut(off[5] - off[4]),
            &mut g2,
        );
        relu_backward(&pass.a2, &mut g2);

        let mut g1 = Field::zeros(h, pass.a1.spatial().to_vec());
        conv_backward(
            &pass.a1,
            &self.params[off[2]..off[3]],
            &g2,
            k,
            &mut grads[off[2]..off[4]].split_at_mut(off[3] - off[2]),
            Some(&mut g1),
        );
        relu_backward(&pass.a1, &mut g1);

        conv_backward(
            &pass.x,
            &self.params[off[0]..off[1]],
            &g1,
            k,
            &mut grads[off[0]..off[2]].split_at_mut(off[1] - off[0]),
            None,
        );
        if !grads.iter().all(|g| g.is_finite()) {
            return Err(Error::NonFinite("network parameter gradients".into()));
        }
        Ok(grads)
    }
}

fn relu_inplace(f: &mut Field) {
    for v in f.data_mut() {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
}

/// Gate gradients by the stored post-activation values.
fn relu_backward(activations: &Field, grads: &mut Field) {
    for (g, &a) in grads.data_mut().iter_mut().zip(activations.data()) {
        if a <= 0.0 {
            *g = 0.0;
        }
    }
}

/// Same-padded KxK convolution via shifted row segments.
fn conv_forward(x: &Field, w: &[f64], b: &[f64], k: usize, out: &mut Field) {
    let (rows, cols) = (x.spatial()[0], x.spatial()[1]);
    let pad = k / 2;
    let cin = x.channels();
    for co in 0..out.channels() {
        out.plane_mut(co).fill(b[co]);
        for ci in 0..cin {
            let src_plane = x.plane(ci);
            for di in 0..k {
                let (i0, i1) = shift_range(rows, pad, di);
                for dj in 0..k {
                    let wgt = w[((co * cin + ci) * k + di) * k + dj];
                    let (j0, j1) = shift_range(cols, pad, dj);
                    if j0 >= j1 {
                        continue;
                    }
                    let dst_plane = out.plane_mut(co);
                    for i in i0..i1 {
                        let si = i + di - pad;
                        let src = &src_plane[si * cols + j0 + dj - pad..si * cols + j1 + dj - pad];
                        let dst = &mut dst_plane[i * cols + j0..i * cols + j1];
                        for (d, s) in dst.iter_mut().zip(src) {
                            *d += wgt * *s;
                        }
                    }
                }
            }
        }
    }
}

/// Weight and bias gradients plus, optionally, input gradients.
fn conv_backward(
    x: &Field,
    w: &[f64],
    g_out: &Field,
    k: usize,
    (gw, gb): &mut (&mut [f64], &mut [f64]),
    mut gx: Option<&mut Field>,
) {
    let (rows, cols) = (x.spatial()[0], x.spatial()[1]);
    let pad = k / 2;
    let cin = x.channels();
    for co in 0..g_out.channels() {
        let g_plane = g_out.plane(co);
        gb[co] += g_plane.iter().sum::<f64>();
        for ci in 0..cin {
            let src_plane = x.plane(ci);
            for di in 0..k {
                let (i0, i1) = shift_range(rows, pad, di);
                for dj in 0..k {
                    let (j0, j1) = shift_range(cols, pad, dj);
                    if j0 >= j1 {
                        continue;
                    }
                    let widx = ((co * cin + ci) * k + di) * k + dj;
                    let wgt = w[widx];
                    let mut acc = 0.0;
                    for i in i0..i1 {
                        let si = i + di - pad;
                        let src = &src_plane[si * cols + j0 + dj - pad..si * cols + j1 + dj - pad];
                        let g = &g_plane[i * cols + j0..i * cols + j1];
                        for (gv, sv) in g.iter().zip(src) {
                            acc += gv * sv;
                        }
                        if let Some(gx) = gx.as_deref_mut() {
                            let dst = &mut gx.plane_mut(ci)
                                [si * cols + j0 + dj - pad..si * cols + j1 + dj - pad];
                            for (d, gv) in dst.iter_mut().zip(g) {
                                *d += wgt * *gv;
                            }
                        }
                    }
                    gw[widx] += acc;
                }
            }
        }
    }
}

fn shift_range(extent: usize, pad: usize, d: usize) -> (usize, usize) {
    let lo = pad.saturating_sub(d);
    let hi = (extent + pad).saturating_sub(d).min(extent);
    (lo, hi.max(lo))
}

fn head_forward(a: &Field, w: &[f64], b: &[f64], out: &mut Field) {
    let h = a.channels();
    for co in 0..out.channels() {
        out.plane_mut(co).fill(b[co]);
        for ci in 0..h {
            let wgt = w[co * h + ci];
            let src = a.plane(ci);
            let dst = out.plane_mut(co);
            for (d, s) in dst.iter_mut().zip(src) {
                *d += wgt * *s;
            }
        }
    }
}

fn head_backward(
    a: &Field,
    w: &[f64],
    g_out: &Field,
    (gw, gb): &mut (&mut [f64], &mut [f64]),
    gx: &mut Field,
) {
    let h = a.channels();
    for co in 0..g_out.channels() {
        let g = g_out.plane(co);
        gb[co] += g.iter().sum::<f64>();
        for ci in 0..h {
            let src = a.plane(ci);
            let mut acc = 0.0;
            for (gv, sv) in g.iter().zip(src) {
                acc += gv * sv;
            }
            gw[co * h + ci] += acc;
            let wgt = w[co * h + ci];
            let dst = gx.plane_mut(ci);
            for (d, gv) in dst.iter_mut().zip(g) {
                *d += wgt * *gv;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_input(rows: usize, cols: usize, seed: u64) -> Volume<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<f32> = (0..rows * cols).map(|_| rng.gen_range(0.0..1.0)).collect();
        Volume::new(vec![rows, cols], data).unwrap()
    }

    #[test]
    fn param_count_matches_layout() {
        let cfg = NetConfig::new(5);
        assert_eq!(cfg.param_count(), 8 * 9 + 8 + 64 * 9 + 8 + 40 + 5);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let net = TinyNet::init(cfg.clone(), &mut rng).unwrap();
        assert_eq!(net.params().len(), cfg.param_count());
    }

    #[test]
    fn forward_shapes_and_determinism() {
        let cfg = NetConfig::new(4);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let net = TinyNet::init(cfg.clone(), &mut rng).unwrap();
        let mut rng2 = ChaCha8Rng::seed_from_u64(7);
        let net2 = TinyNet::init(cfg, &mut rng2).unwrap();
        assert_eq!(net.params(), net2.params());

        let x = small_input(10, 12, 3);
        let pass = net.forward(&x).unwrap();
        assert_eq!(pass.logits.channels(), 4);
        assert_eq!(pass.logits.spatial(), &[10, 12]);
        let pass2 = net2.forward(&x).unwrap();
        assert_eq!(pass.logits.data(), pass2.logits.data());
    }

    #[test]
    fn rejects_bad_shapes() {
        let cfg = NetConfig::new(3);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let net = TinyNet::init(cfg.clone(), &mut rng).unwrap();
        let x3 = Volume::<f32>::zeros(vec![4, 4, 4]);
        assert!(net.forward(&x3).is_err());
        assert!(TinyNet::from_params(cfg, vec![0.0; 3]).is_err());
        let mut bad = NetConfig::new(3);
        bad.kernel = 4;
        assert!(bad.validate().is_err());
    }

    #[test]
    fn conv_identity_kernel_passes_through() {
        // One hidden channel, center-tap kernel, identity head: logits == input.
        let cfg = NetConfig { in_channels: 1, hidden: 1, kernel: 3, out_channels: 1 };
        let mut params = vec![0.0; cfg.param_count()];
        params[4] = 1.0; // conv1 center tap
        let off = cfg.offsets();
        params[off[2] + 4] = 1.0; // conv2 center tap
        params[off[4]] = 1.0; // head weight
        let net = TinyNet::from_params(cfg, params).unwrap();
        let x = small_input(6, 5, 11);
        let pass = net.forward(&x).unwrap();
        for (l, v) in pass.logits.data().iter().zip(x.data()) {
            assert!((l - *v as f64).abs() < 1e-12);
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let cfg = NetConfig { in_channels: 1, hidden: 3, kernel: 3, out_channels: 3 };
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        // Draw every parameter, biases included, from a continuous
        // distribution: with zero biases whole regions sit exactly on the
        // ReLU kink, where central differences and the subgradient disagree.
        let params: Vec<f64> =
            (0..cfg.param_count()).map(|_| rng.gen_range(-0.7..0.7)).collect();
        let net = TinyNet::from_params(cfg.clone(), params).unwrap();
        let x = small_input(7, 6, 5);

        // Scalar probe: L = sum of coeff * logits, so dL/dlogits = coeff.
        let n = 3 * 7 * 6;
        let coeff: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let loss = |net: &TinyNet| -> f64 {
            let pass = net.forward(&x).unwrap();
            pass.logits.data().iter().zip(&coeff).map(|(l, c)| l * c).sum()
        };

        let pass = net.forward(&x).unwrap();
        let g_logits = Field::from_data(3, vec![7, 6], coeff.clone()).unwrap();
        let grads = net.backward(&pass, &g_logits).unwrap();

        let h = 1e-5;
        let mut worst = 0.0f64;
        for pi in (0..net.params().len()).step_by(7) {
            let mut plus = net.clone();
            plus.params_mut()[pi] += h;
            let mut minus = net.clone();
            minus.params_mut()[pi] -= h;
            let fd = (loss(&plus) - loss(&minus)) / (2.0 * h);
            let denom = fd.abs().max(grads[pi].abs()).max(1e-6);
            worst = worst.max((fd - grads[pi]).abs() / denom);
        }
        assert!(worst < 1e-6, "worst relative gradient error {}", worst);
    }

    #[test]
    fn zero_logit_gradient_gives_zero_parameter_gradient() {
        let cfg = NetConfig::new(3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let net = TinyNet::init(cfg, &mut rng).unwrap();
        let x = small_input(8, 8, 1);
        let pass = net.forward(&x).unwrap();
        let g = Field::zeros(3, vec![8, 8]);
        let grads = net.backward(&pass, &g).unwrap();
        assert!(grads.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn gradient_is_linear_in_the_upstream_gradient() {
        let cfg = NetConfig { in_channels: 1, hidden: 2, kernel: 3, out_channels: 2 };
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let net = TinyNet::init(cfg, &mut rng).unwrap();
        let x = small_input(6, 6, 2);
        let pass = net.forward(&x).unwrap();
        let g_data: Vec<f64> = (0..2 * 36).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let g = Field::from_data(2, vec![6, 6], g_data.clone()).unwrap();
        let scaled =
            Field::from_data(2, vec![6, 6], g_data.iter().map(|v| 2.5 * v).collect()).unwrap();
        let base = net.backward(&pass, &g).unwrap();
        let twice = net.backward(&pass, &scaled).unwrap();
        for (b, t) in base.iter().zip(&twice) {
            assert!((t - 2.5 * b).abs() <= 1e-12 * b.abs().max(1.0));
        }
    }

    #[test]
    fn stale_cache_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let wide = TinyNet::init(NetConfig { in_channels: 1, hidden: 4, kernel: 3, out_channels: 3 }, &mut rng).unwrap();
        let narrow = TinyNet::init(NetConfig { in_channels: 1, hidden: 2, kernel: 3, out_channels: 3 }, &mut rng).unwrap();
        let x = small_input(5, 5, 3);
        let pass = wide.forward(&x).unwrap();
        let g = Field::zeros(3, vec![5, 5]);
        assert!(narrow.backward(&pass, &g).is_err());
    }

    #[test]
    fn bias_gradient_is_spatial_sum() {
        let cfg = NetConfig { in_channels: 1, hidden: 2, kernel: 3, out_channels: 2 };
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let net = TinyNet::init(cfg.clone(), &mut rng).unwrap();
        let x = small_input(5, 5, 8);
        let pass = net.forward(&x).unwrap();
        let mut g = Field::zeros(2, vec![5, 5]);
        g.plane_mut(1).fill(1.0);
        let grads = net.backward(&pass, &g).unwrap();
        let off = cfg.offsets();
        // Head bias of channel 1 sees every voxel once.
        assert_eq!(grads[off[5] + 1], 25.0);
        assert_eq!(grads[off[5]], 0.0);
    }
}
