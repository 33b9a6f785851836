//! Learnable building blocks: convolution layers, adaptive instance
//! normalization, cross-scale feature transforms, co-attention fusion, and
//! self-calibrated convolution.
//!
//! Blocks own only parameter *names* and hyperparameters; the tensors live
//! in a [`ParamStore`] so one block definition drives both the f32 training
//! path and the f64 gradient-verification path. Construction draws initial
//! weights from the caller's RNG in a fixed order, which makes
//! `config + seed -> initial weights` deterministic.
//!
//! Activation convention: leaky ReLU (slope 0.2) between stacked
//! convolutions; affine heads (gamma/beta), single-conv transforms, and
//! residual outputs stay linear.

use rand::Rng;

use crate::graph::{Graph, NodeId, PadMode, ParamStore};
use crate::tensor::{Scalar, Tensor};

/// Negative-side slope of every leaky ReLU in the network.
pub const LRELU_SLOPE: f64 = 0.2;

/// Epsilon inside the instance-normalization square root.
pub const AIN_EPSILON: f64 = 1e-5;

/// Channel-reduction ratio of the co-attention descriptor bottleneck.
pub const CA_REDUCTION: usize = 4;

fn uniform_tensor<T: Scalar, R: Rng>(rng: &mut R, shape: &[usize], bound: f64) -> Tensor<T> {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| T::from_f64(rng.gen_range(-bound..bound)))
        .collect();
    Tensor::from_vec(shape, data)
}

/// A named 2-D convolution layer.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub name: String,
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad_mode: PadMode,
}

impl Conv2d {
    /// Register weights (fan-in-scaled uniform) and a zero bias.
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad_mode: PadMode,
    ) -> Self {
        Self::new_with_bias(store, rng, name, cin, cout, k, stride, pad_mode, 0.0)
    }

    /// Same as [`Conv2d::new`] but with a constant bias initializer.
    #[allow(clippy::too_many_arguments)]
    pub fn new_with_bias<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad_mode: PadMode,
        bias: f64,
    ) -> Self {
        let bound = 1.0 / ((cin * k * k) as f64).sqrt();
        let w = uniform_tensor(rng, &[cout, cin, k, k], bound);
        store.add(&format!("{name}.w"), w);
        store.add(&format!("{name}.b"), Tensor::full(&[cout], T::from_f64(bias)));
        Conv2d {
            name: name.to_string(),
            cin,
            cout,
            k,
            stride,
            pad_mode,
        }
    }

    pub fn weight_name(&self) -> String {
        format!("{}.w", self.name)
    }

    pub fn bias_name(&self) -> String {
        format!("{}.b", self.name)
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: NodeId) -> NodeId {
        let w = g.param(store, &self.weight_name());
        let b = g.param(store, &self.bias_name());
        g.conv2d(x, w, b, self.stride, self.k / 2, self.pad_mode)
    }
}

/// A named transposed convolution doubling spatial dims (kernel 2, stride 2).
#[derive(Clone, Debug)]
pub struct ConvT2x {
    pub name: String,
    pub cin: usize,
    pub cout: usize,
}

impl ConvT2x {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        cin: usize,
        cout: usize,
    ) -> Self {
        // With kernel 2 / stride 2 each output pixel sees exactly one tap per
        // input channel, so the fan-in is cin.
        let bound = 1.0 / (cin as f64).sqrt();
        let w = uniform_tensor(rng, &[cin, cout, 2, 2], bound);
        store.add(&format!("{name}.w"), w);
        store.add(&format!("{name}.b"), Tensor::zeros(&[cout]));
        ConvT2x {
            name: name.to_string(),
            cin,
            cout,
        }
    }

    pub fn weight_name(&self) -> String {
        format!("{}.w", self.name)
    }

    pub fn bias_name(&self) -> String {
        format!("{}.b", self.name)
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: NodeId) -> NodeId {
        let w = g.param(store, &self.weight_name());
        let b = g.param(store, &self.bias_name());
        g.conv_transpose2x(x, w, b)
    }
}

/// Per-channel mean and population standard deviation, accumulated in f64.
pub fn instance_stats<T: Scalar>(x: &Tensor<T>) -> (Vec<f64>, Vec<f64>) {
    let (c, h, w) = x.dims3();
    let pix = (h * w) as f64;
    let mut mu = Vec::with_capacity(c);
    let mut sigma = Vec::with_capacity(c);
    for ch in 0..c {
        let slice = &x.data()[ch * h * w..(ch + 1) * h * w];
        let mean = slice.iter().map(|v| v.to_f64()).sum::<f64>() / pix;
        let var = slice
            .iter()
            .map(|v| {
                let d = v.to_f64() - mean;
                d * d
            })
            .sum::<f64>()
            / pix;
        mu.push(mean);
        sigma.push(var.sqrt());
    }
    (mu, sigma)
}

/// Adaptive instance normalization: the coarser scale's feature `h'`
/// (2C, H/2, W/2) is upsampled and predicts per-pixel gamma/beta maps that
/// modulate the instance-normalized current-scale feature `h` (C, H, W);
/// a residual connection preserves the original feature.
#[derive(Clone, Debug)]
pub struct Ain {
    pub up: ConvT2x,
    pub gamma: Conv2d,
    pub beta: Conv2d,
    pub out: Conv2d,
    pub channels: usize,
}

/// Probe handles into one AIN forward pass.
pub struct AinForward {
    pub upsampled: NodeId,
    pub gamma: NodeId,
    pub beta: NodeId,
    /// `(h - mu) / sqrt(sigma^2 + eps)`.
    pub normalized: NodeId,
    /// `gamma * normalized + beta`.
    pub modulated: NodeId,
    pub out: NodeId,
}

impl Ain {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        channels: usize,
    ) -> Self {
        let up = ConvT2x::new(store, rng, &format!("{name}.up"), 2 * channels, channels);
        let gamma = Conv2d::new_with_bias(
            store,
            rng,
            &format!("{name}.gamma"),
            channels,
            channels,
            3,
            1,
            PadMode::Reflect,
            1.0,
        );
        let beta = Conv2d::new(
            store,
            rng,
            &format!("{name}.beta"),
            channels,
            channels,
            3,
            1,
            PadMode::Reflect,
        );
        let out = Conv2d::new(
            store,
            rng,
            &format!("{name}.out"),
            channels,
            channels,
            3,
            1,
            PadMode::Reflect,
        );
        Ain {
            up,
            gamma,
            beta,
            out,
            channels,
        }
    }

    /// `h` is `(C,H,W)`, `h_prime` is `(2C,H/2,W/2)` with exact halves.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        h: NodeId,
        h_prime: NodeId,
    ) -> AinForward {
        let (c, hh, ww) = g.value(h).dims3();
        assert_eq!(c, self.channels, "AIN channel mismatch");
        assert_eq!(
            g.value(h_prime).dims3(),
            (2 * c, hh / 2, ww / 2),
            "AIN coarse-scale shape mismatch"
        );
        assert!(hh % 2 == 0 && ww % 2 == 0, "AIN needs even spatial dims");
        let up0 = self.up.forward(g, store, h_prime);
        let upsampled = g.leaky_relu(up0, LRELU_SLOPE);
        let gamma = self.gamma.forward(g, store, upsampled);
        let beta = self.beta.forward(g, store, upsampled);
        let normalized = g.instance_norm(h, AIN_EPSILON);
        let scaled = g.mul(normalized, gamma);
        let modulated = g.add(scaled, beta);
        let refit = self.out.forward(g, store, modulated);
        let out = g.add(h, refit);
        AinForward {
            upsampled,
            gamma,
            beta,
            normalized,
            modulated,
            out,
        }
    }
}

/// Resolves a feature map from one pyramid scale to another: strided
/// convolutions downward, nearest-neighbor upsampling plus a 1x1 projection
/// upward, and the identity on the diagonal.
#[derive(Clone, Debug)]
pub enum ScaleTransform {
    Identity,
    Down2(Conv2d),
    Down4 { first: Conv2d, second: Conv2d },
    Up { factor: usize, project: Conv2d },
}

impl ScaleTransform {
    /// `widths[s]` is the channel count of scale `s`; scale 0 is full
    /// resolution and each higher scale halves the spatial dims.
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        from_scale: usize,
        to_scale: usize,
        widths: &[usize; 3],
    ) -> Self {
        assert!(from_scale < 3 && to_scale < 3);
        let (cf, ct) = (widths[from_scale], widths[to_scale]);
        match to_scale as isize - from_scale as isize {
            0 => ScaleTransform::Identity,
            1 => ScaleTransform::Down2(Conv2d::new(
                store,
                rng,
                name,
                cf,
                ct,
                3,
                2,
                PadMode::Zero,
            )),
            2 => ScaleTransform::Down4 {
                first: Conv2d::new(store, rng, &format!("{name}.0"), cf, cf, 3, 2, PadMode::Zero),
                second: Conv2d::new(store, rng, &format!("{name}.1"), cf, ct, 3, 2, PadMode::Zero),
            },
            d @ (-1 | -2) => ScaleTransform::Up {
                factor: 1 << (-d as usize),
                project: Conv2d::new(store, rng, name, cf, ct, 1, 1, PadMode::Zero),
            },
            _ => unreachable!(),
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: NodeId) -> NodeId {
        match self {
            ScaleTransform::Identity => x,
            ScaleTransform::Down2(conv) => conv.forward(g, store, x),
            ScaleTransform::Down4 { first, second } => {
                let mid = first.forward(g, store, x);
                let mid = g.leaky_relu(mid, LRELU_SLOPE);
                second.forward(g, store, mid)
            }
            ScaleTransform::Up { factor, project } => {
                let (_, h, w) = g.value(x).dims3();
                let up = g.upsample_nearest(x, h * factor, w * factor);
                project.forward(g, store, up)
            }
        }
    }
}

/// Self-calibrated convolution: channels split into halves; the first half
/// is gated by a sigmoid of itself plus a low-resolution latent, the second
/// half passes through a plain convolution; halves are concatenated back.
#[derive(Clone, Debug)]
pub struct SelfCalib {
    pub pool_conv: Conv2d,
    pub pre_gate: Conv2d,
    pub post_gate: Conv2d,
    pub plain: Conv2d,
    pub half: usize,
}

/// Probe handles into one self-calibration forward pass.
pub struct SelfCalibForward {
    pub gate: NodeId,
    pub out: NodeId,
}

impl SelfCalib {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        channels: usize,
    ) -> crate::error::Result<Self> {
        if channels % 2 != 0 || channels == 0 {
            return Err(crate::error::Error::Shape(format!(
                "self-calibration needs a positive even channel count, got {channels}"
            )));
        }
        let half = channels / 2;
        let conv = |store: &mut ParamStore<T>, rng: &mut R, leaf: &str| {
            Conv2d::new(
                store,
                rng,
                &format!("{name}.{leaf}"),
                half,
                half,
                3,
                1,
                PadMode::Reflect,
            )
        };
        Ok(SelfCalib {
            pool_conv: conv(store, rng, "pool"),
            pre_gate: conv(store, rng, "pre"),
            post_gate: conv(store, rng, "post"),
            plain: conv(store, rng, "plain"),
            half,
        })
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: NodeId,
    ) -> SelfCalibForward {
        let (c, h, w) = g.value(x).dims3();
        assert_eq!(c, 2 * self.half, "self-calibration channel mismatch");
        let a = g.slice_c(x, 0, self.half);
        let b = g.slice_c(x, self.half, self.half);
        let pooled = g.avg_pool_ceil(a, 4);
        let latent = self.pool_conv.forward(g, store, pooled);
        let up = g.upsample_nearest(latent, h, w);
        let pre = g.add(a, up);
        let gate = g.sigmoid(pre);
        let main = self.pre_gate.forward(g, store, a);
        let gated = g.mul(gate, main);
        let calibrated = self.post_gate.forward(g, store, gated);
        let passthrough = self.plain.forward(g, store, b);
        let out = g.concat_c(&[calibrated, passthrough]);
        SelfCalibForward { gate, out }
    }
}

/// Co-attention fusion of three same-shape feature maps: global descriptors
/// drive a per-channel softmax across the branches, the convex combination
/// is refined by a self-calibrated convolution.
#[derive(Clone, Debug)]
pub struct CoAttention {
    pub reduce: Conv2d,
    pub heads: Vec<Conv2d>,
    pub sc: SelfCalib,
    pub channels: usize,
}

/// Probe handles into one co-attention forward pass.
pub struct CoAttentionForward {
    /// `(3C,1,1)`: branch weights, summing to one across branches per channel.
    pub alphas: NodeId,
    /// Convex combination before self-calibration.
    pub fused: NodeId,
    pub gate: NodeId,
    pub out: NodeId,
}

impl CoAttention {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        channels: usize,
        reduction: usize,
    ) -> crate::error::Result<Self> {
        assert!(reduction >= 1);
        let d = (3 * channels).div_ceil(reduction);
        let reduce = Conv2d::new(
            store,
            rng,
            &format!("{name}.reduce"),
            3 * channels,
            d,
            1,
            1,
            PadMode::Zero,
        );
        let heads = (0..3)
            .map(|k| {
                Conv2d::new(
                    store,
                    rng,
                    &format!("{name}.head{k}"),
                    d,
                    channels,
                    1,
                    1,
                    PadMode::Zero,
                )
            })
            .collect();
        let sc = SelfCalib::new(store, rng, &format!("{name}.sc"), channels)?;
        Ok(CoAttention {
            reduce,
            heads,
            sc,
            channels,
        })
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        ys: [NodeId; 3],
    ) -> CoAttentionForward {
        let shape = g.value(ys[0]).dims3();
        for &y in &ys[1..] {
            assert_eq!(g.value(y).dims3(), shape, "co-attention branch shapes");
        }
        assert_eq!(shape.0, self.channels, "co-attention channel mismatch");
        let u = g.concat_c(&ys);
        let s = g.global_avg_pool(u);
        let red = self.reduce.forward(g, store, s);
        let t = g.leaky_relu(red, LRELU_SLOPE);
        let logits: Vec<NodeId> = self.heads.iter().map(|h| h.forward(g, store, t)).collect();
        let stacked = g.concat_c(&logits);
        let alphas = g.branch_softmax(stacked, 3);
        let mut fused = None;
        for (k, &y) in ys.iter().enumerate() {
            let ak = g.slice_c(alphas, k * self.channels, self.channels);
            let part = g.mul_channel(y, ak);
            fused = Some(match fused {
                None => part,
                Some(acc) => g.add(acc, part),
            });
        }
        let fused = fused.unwrap();
        let sc = self.sc.forward(g, store, fused);
        CoAttentionForward {
            alphas,
            fused,
            gate: sc.gate,
            out: sc.out,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::check_gradients;
    use crate::rng::rng_from_seed;

    fn rand_tensor(shape: &[usize], seed: u64, scale: f64) -> Tensor<f64> {
        let mut rng = rng_from_seed(seed);
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.gen_range(-scale..scale)).collect();
        Tensor::from_vec(shape, data)
    }

    fn set_param(store: &mut ParamStore<f64>, name: &str, f: impl Fn(usize) -> f64) {
        let idx = store.idx(name).unwrap_or_else(|| panic!("no param {name}"));
        let t = store.value_mut(idx);
        for (i, v) in t.data_mut().iter_mut().enumerate() {
            *v = f(i);
        }
    }

    #[test]
    fn instance_statistics_hand_examples() {
        let constant = Tensor::<f64>::full(&[1, 2, 2], 3.0);
        let (mu, sigma) = instance_stats(&constant);
        assert_eq!((mu[0], sigma[0]), (3.0, 0.0));

        let two = Tensor::<f64>::from_vec(&[1, 1, 2], vec![0.0, 2.0]);
        let (mu, sigma) = instance_stats(&two);
        assert_eq!((mu[0], sigma[0]), (1.0, 1.0));
    }

    #[test]
    fn instance_statistics_match_two_pass_oracle() {
        let x = rand_tensor(&[4, 8, 8], 50, 1.0);
        let (mu, sigma) = instance_stats(&x);
        for ch in 0..4 {
            let xs = &x.data()[ch * 64..(ch + 1) * 64];
            let m: f64 = xs.iter().sum::<f64>() / 64.0;
            let v: f64 = xs.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / 64.0;
            assert!((mu[ch] - m).abs() < 1e-6);
            assert!((sigma[ch] - v.sqrt()).abs() < 1e-6);
        }
    }

    fn build_ain(seed: u64) -> (ParamStore<f64>, Ain) {
        let mut store = ParamStore::new();
        let mut rng = rng_from_seed(seed);
        let ain = Ain::new(&mut store, &mut rng, "ain", 4);
        (store, ain)
    }

    #[test]
    fn ain_normalized_probe_has_unit_statistics() {
        let (store, ain) = build_ain(60);
        let h = rand_tensor(&[4, 8, 8], 61, 1.0);
        let hp = rand_tensor(&[8, 4, 4], 62, 1.0);
        let mut g = Graph::new();
        let hn = g.input(h, false);
        let hpn = g.input(hp, false);
        let fwd = ain.forward(&mut g, &store, hn, hpn);
        let (mu, sigma) = instance_stats(g.value(fwd.normalized));
        for ch in 0..4 {
            assert!(mu[ch].abs() < 1e-4, "channel {ch} mean {}", mu[ch]);
            assert!(
                (sigma[ch] - 1.0).abs() < 1e-3,
                "channel {ch} std {}",
                sigma[ch]
            );
        }
    }

    #[test]
    fn ain_matches_normalization_when_heads_are_forced() {
        // gamma == 1, beta == 0, out conv == per-channel identity: the block
        // output minus the input must equal the normalized intermediate.
        let (mut store, ain) = build_ain(63);
        set_param(&mut store, "ain.gamma.w", |_| 0.0);
        set_param(&mut store, "ain.gamma.b", |_| 1.0);
        set_param(&mut store, "ain.beta.w", |_| 0.0);
        set_param(&mut store, "ain.beta.b", |_| 0.0);
        set_param(&mut store, "ain.out.b", |_| 0.0);
        // Identity 3x3 kernel: center tap of the matching in/out channel.
        set_param(&mut store, "ain.out.w", |i| {
            let (co, rest) = (i / (4 * 9), i % (4 * 9));
            let (ci, tap) = (rest / 9, rest % 9);
            if co == ci && tap == 4 {
                1.0
            } else {
                0.0
            }
        });
        let h = rand_tensor(&[4, 8, 8], 64, 1.0);
        let hp = rand_tensor(&[8, 4, 4], 65, 1.0);
        let mut g = Graph::new();
        let hn = g.input(h, false);
        let hpn = g.input(hp, false);
        let fwd = ain.forward(&mut g, &store, hn, hpn);
        let out = g.value(fwd.out).data();
        let hin = g.value(hn).data();
        let norm = g.value(fwd.normalized).data();
        for i in 0..out.len() {
            assert!(
                ((out[i] - hin[i]) - norm[i]).abs() < 1e-5,
                "coord {i}: {} vs {}",
                out[i] - hin[i],
                norm[i]
            );
        }
    }

    #[test]
    fn ain_constant_channels_reduce_to_beta() {
        let (store, ain) = build_ain(66);
        let mut h = Tensor::<f64>::zeros(&[4, 8, 8]);
        for ch in 0..4 {
            for v in &mut h.data_mut()[ch * 64..(ch + 1) * 64] {
                *v = 0.3 + 0.2 * ch as f64;
            }
        }
        let hp = rand_tensor(&[8, 4, 4], 67, 1.0);
        let mut g = Graph::new();
        let hn = g.input(h, false);
        let hpn = g.input(hp, false);
        let fwd = ain.forward(&mut g, &store, hn, hpn);
        for (m, b) in g.value(fwd.modulated).data().iter().zip(g.value(fwd.beta).data()) {
            assert!((m - b).abs() < 1e-9, "modulated {m} vs beta {b}");
        }
    }

    #[test]
    fn ain_normalization_is_shift_scale_equivariant() {
        let (store, ain) = build_ain(68);
        let h = rand_tensor(&[4, 8, 8], 69, 3.0);
        let hp = rand_tensor(&[8, 4, 4], 70, 1.0);
        // Per-channel affine reparameterization of h.
        let mut h2 = h.clone();
        let coeffs = [(0.5, -1.0), (2.0, 0.3), (1.3, 0.0), (0.7, 2.0)];
        for ch in 0..4 {
            let (a, b) = coeffs[ch];
            for v in &mut h2.data_mut()[ch * 64..(ch + 1) * 64] {
                *v = a * *v + b;
            }
        }
        let norm = |h: Tensor<f64>| {
            let mut g = Graph::new();
            let hn = g.input(h, false);
            let hpn = g.input(hp.clone(), false);
            let fwd = ain.forward(&mut g, &store, hn, hpn);
            g.value(fwd.normalized).data().to_vec()
        };
        let n1 = norm(h);
        let n2 = norm(h2);
        for (a, b) in n1.iter().zip(&n2) {
            assert!((a - b).abs() < 1e-5, "{a} vs {b}");
        }
    }

    #[test]
    fn scale_transforms_produce_declared_shapes() {
        let widths = [4usize, 8, 16];
        let dims = [(4usize, 16usize, 16usize), (8, 8, 8), (16, 4, 4)];
        for from in 0..3 {
            for to in 0..3 {
                let mut store = ParamStore::<f64>::new();
                let mut rng = rng_from_seed(80);
                let t = ScaleTransform::new(
                    &mut store,
                    &mut rng,
                    &format!("t{from}{to}"),
                    from,
                    to,
                    &widths,
                );
                let mut g = Graph::new();
                let x = g.input(rand_tensor(&[dims[from].0, dims[from].1, dims[from].2], 81, 1.0), false);
                let y = t.forward(&mut g, &store, x);
                let got = g.value(y).dims3();
                assert_eq!(got, dims[to], "transform {from}->{to}");
            }
        }
    }

    #[test]
    fn same_scale_transform_is_bitwise_identity() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = rng_from_seed(82);
        let t = ScaleTransform::new(&mut store, &mut rng, "id", 1, 1, &[4, 8, 16]);
        assert_eq!(store.len(), 0, "identity transform has no parameters");
        let x = rand_tensor(&[8, 8, 8], 83, 1.0);
        let mut g = Graph::new();
        let xn = g.input(x.clone(), false);
        let y = t.forward(&mut g, &store, xn);
        assert_eq!(y, xn, "identity must return the same node");
        assert_eq!(g.value(y).data(), x.data());
    }

    #[test]
    fn upsample_transform_spreads_one_hot_into_blocks() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = rng_from_seed(84);
        let t = ScaleTransform::new(&mut store, &mut rng, "up", 2, 0, &[4, 8, 16]);
        // Identity 1x1 projection onto the first four channels; zero bias.
        set_param(&mut store, "up.w", |i| {
            let (co, ci) = (i / 16, i % 16);
            if co == ci {
                1.0
            } else {
                0.0
            }
        });
        set_param(&mut store, "up.b", |_| 0.0);
        let mut x = Tensor::<f64>::zeros(&[16, 4, 4]);
        x.data_mut()[1 * 4 + 2] = 1.0; // channel 0, row 1, col 2
        let mut g = Graph::new();
        let xn = g.input(x, false);
        let y = t.forward(&mut g, &store, xn);
        let got = g.value(y);
        assert_eq!(got.dims3(), (4, 16, 16));
        for ch in 0..4 {
            for r in 0..16 {
                for c in 0..16 {
                    let want = if ch == 0 && (4..8).contains(&r) && (8..12).contains(&c) {
                        1.0
                    } else {
                        0.0
                    };
                    assert_eq!(got.data()[(ch * 16 + r) * 16 + c], want, "({ch},{r},{c})");
                }
            }
        }
    }

    fn build_ca(seed: u64, channels: usize) -> (ParamStore<f64>, CoAttention) {
        let mut store = ParamStore::new();
        let mut rng = rng_from_seed(seed);
        let ca = CoAttention::new(&mut store, &mut rng, "ca", channels, CA_REDUCTION).unwrap();
        (store, ca)
    }

    #[test]
    fn co_attention_weights_sum_to_one() {
        let (store, ca) = build_ca(90, 6);
        let mut g = Graph::new();
        let ys = [
            g.input(rand_tensor(&[6, 8, 8], 91, 1.0), false),
            g.input(rand_tensor(&[6, 8, 8], 92, 1.0), false),
            g.input(rand_tensor(&[6, 8, 8], 93, 1.0), false),
        ];
        let fwd = ca.forward(&mut g, &store, ys);
        let a = g.value(fwd.alphas).data();
        for ch in 0..6 {
            let sum = a[ch] + a[6 + ch] + a[12 + ch];
            assert!((sum - 1.0).abs() < 1e-12, "channel {ch} sum {sum}");
            for k in 0..3 {
                assert!(a[k * 6 + ch] > 0.0);
            }
        }
    }

    #[test]
    fn co_attention_identical_inputs_pass_through() {
        let (store, ca) = build_ca(94, 6);
        let y = rand_tensor(&[6, 8, 8], 95, 1.0);
        let mut g = Graph::new();
        let y0 = g.input(y.clone(), false);
        let y1 = g.input(y.clone(), false);
        let y2 = g.input(y.clone(), false);
        let fwd = ca.forward(&mut g, &store, [y0, y1, y2]);
        for (f, v) in g.value(fwd.fused).data().iter().zip(y.data()) {
            assert!((f - v).abs() < 1e-12, "fused {f} vs input {v}");
        }
    }

    #[test]
    fn co_attention_identical_heads_give_uniform_weights() {
        let (mut store, ca) = build_ca(96, 6);
        // Copy head 0's parameters into heads 1 and 2.
        for leaf in ["w", "b"] {
            let src = store
                .value_by_name(&format!("ca.head0.{leaf}"))
                .unwrap()
                .clone();
            for k in 1..3 {
                let idx = store.idx(&format!("ca.head{k}.{leaf}")).unwrap();
                *store.value_mut(idx) = src.clone();
            }
        }
        let mut g = Graph::new();
        let ys = [
            g.input(rand_tensor(&[6, 8, 8], 97, 1.0), false),
            g.input(rand_tensor(&[6, 8, 8], 98, 1.0), false),
            g.input(rand_tensor(&[6, 8, 8], 99, 1.0), false),
        ];
        let fwd = ca.forward(&mut g, &store, ys);
        for &a in g.value(fwd.alphas).data() {
            assert!((a - 1.0 / 3.0).abs() < 1e-6, "alpha {a}");
        }
    }

    #[test]
    fn branch_softmax_scaling_preserves_argmax() {
        let logits = rand_tensor(&[12, 1, 1], 100, 2.0);
        let argmax = |scale: f64| {
            let mut g = Graph::<f64>::new();
            let x = g.input(logits.clone(), false);
            let s = g.scale(x, scale);
            let a = g.branch_softmax(s, 3);
            let d = g.value(a).data().to_vec();
            (0..4)
                .map(|ch| {
                    (0..3)
                        .max_by(|&i, &j| d[i * 4 + ch].partial_cmp(&d[j * 4 + ch]).unwrap())
                        .unwrap()
                })
                .collect::<Vec<_>>()
        };
        assert_eq!(argmax(1.0), argmax(7.3));
    }

    #[test]
    fn self_calibration_rejects_odd_channels() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = rng_from_seed(101);
        assert!(SelfCalib::new(&mut store, &mut rng, "sc", 5).is_err());
    }

    #[test]
    fn self_calibration_preserves_shape_and_gate_range() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = rng_from_seed(102);
        let sc = SelfCalib::new(&mut store, &mut rng, "sc", 64).unwrap();
        let mut g = Graph::new();
        let x = g.input(rand_tensor(&[64, 16, 16], 103, 1.0), false);
        let fwd = sc.forward(&mut g, &store, x);
        assert_eq!(g.value(fwd.out).dims3(), (64, 16, 16));
        for &v in g.value(fwd.gate).data() {
            assert!(v > 0.0 && v < 1.0, "gate {v}");
        }
    }

    #[test]
    fn self_calibration_gate_reduces_to_sigmoid_with_zero_latent_conv() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = rng_from_seed(104);
        let sc = SelfCalib::new(&mut store, &mut rng, "sc", 8).unwrap();
        set_param(&mut store, "sc.pool.w", |_| 0.0);
        set_param(&mut store, "sc.pool.b", |_| 0.0);
        let x = rand_tensor(&[8, 8, 8], 105, 2.0);
        let mut g = Graph::new();
        let xn = g.input(x.clone(), false);
        let fwd = sc.forward(&mut g, &store, xn);
        let gate = g.value(fwd.gate).data();
        for i in 0..4 * 64 {
            let want = 1.0 / (1.0 + (-x.data()[i]).exp());
            assert!((gate[i] - want).abs() < 1e-12, "coord {i}");
        }
    }

    #[test]
    fn blocks_remain_finite_for_extreme_inputs() {
        let extreme = |shape: &[usize], seed: u64| {
            let mut t = rand_tensor(shape, seed, 1.0);
            for v in t.data_mut() {
                *v = if *v > 0.0 { 1e3 } else { -1e3 };
            }
            t
        };
        // AIN.
        let (store, ain) = build_ain(110);
        let mut g = Graph::new();
        let h = g.input(extreme(&[4, 8, 8], 111), false);
        let hp = g.input(extreme(&[8, 4, 4], 112), false);
        let fwd = ain.forward(&mut g, &store, h, hp);
        assert!(g.value(fwd.out).all_finite());
        // Scale transforms down and up.
        let mut store = ParamStore::<f64>::new();
        let mut rng = rng_from_seed(113);
        let down = ScaleTransform::new(&mut store, &mut rng, "d", 0, 2, &[4, 8, 16]);
        let up = ScaleTransform::new(&mut store, &mut rng, "u", 2, 0, &[4, 8, 16]);
        let mut g = Graph::new();
        let x = g.input(extreme(&[4, 8, 8], 114), false);
        let dn = down.forward(&mut g, &store, x);
        let un = up.forward(&mut g, &store, dn);
        assert!(g.value(dn).all_finite() && g.value(un).all_finite());
        // Co-attention.
        let (store, ca) = build_ca(115, 6);
        let mut g = Graph::new();
        let ys = [
            g.input(extreme(&[6, 8, 8], 116), false),
            g.input(extreme(&[6, 8, 8], 117), false),
            g.input(extreme(&[6, 8, 8], 118), false),
        ];
        let fwd = ca.forward(&mut g, &store, ys);
        assert!(g.value(fwd.alphas).all_finite());
        assert!(g.value(fwd.out).all_finite());
    }

    #[test]
    fn grad_ain_block() {
        // Seed chosen so no leaky-ReLU pre-activation sits within the
        // finite-difference band (a kink inside [z-h, z+h] invalidates the
        // central difference, not the analytic gradient).
        let (mut store, ain) = build_ain(131);
        assert!(store.param_count() <= 5000, "toy block too large");
        let inputs = vec![rand_tensor(&[4, 8, 8], 1131, 1.0), rand_tensor(&[8, 4, 4], 2131, 1.0)];
        let report = check_gradients(&mut store, &inputs, 1e-3, &|g, store, ids| {
            ain.forward(g, store, ids[0], ids[1]).out
        });
        assert!(
            report.max_rel_err < 1e-4,
            "worst {} ({})",
            report.max_rel_err,
            report.worst
        );
    }

    #[test]
    fn grad_scale_transform_round_trip() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = rng_from_seed(123);
        let down = ScaleTransform::new(&mut store, &mut rng, "d", 0, 2, &[4, 8, 16]);
        let up = ScaleTransform::new(&mut store, &mut rng, "u", 2, 0, &[4, 8, 16]);
        assert!(store.param_count() <= 5000);
        let inputs = vec![rand_tensor(&[4, 8, 8], 124, 1.0)];
        let report = check_gradients(&mut store, &inputs, 1e-3, &|g, store, ids| {
            let dn = down.forward(g, store, ids[0]);
            up.forward(g, store, dn)
        });
        assert!(
            report.max_rel_err < 1e-4,
            "worst {} ({})",
            report.max_rel_err,
            report.worst
        );
    }

    #[test]
    fn grad_co_attention_block() {
        let (mut store, ca) = build_ca(125, 4);
        assert!(store.param_count() <= 5000);
        let inputs = vec![
            rand_tensor(&[4, 8, 8], 126, 1.0),
            rand_tensor(&[4, 8, 8], 127, 1.0),
            rand_tensor(&[4, 8, 8], 128, 1.0),
        ];
        let report = check_gradients(&mut store, &inputs, 1e-3, &|g, store, ids| {
            ca.forward(g, store, [ids[0], ids[1], ids[2]]).out
        });
        assert!(
            report.max_rel_err < 1e-4,
            "worst {} ({})",
            report.max_rel_err,
            report.worst
        );
    }
}
