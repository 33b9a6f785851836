//! The full denoising network: initial per-scale feature extraction, a
//! coarse fusion stack that modulates finer scales with coarser context,
//! a fine fusion stack exchanging features across all scale pairs through
//! co-attention, and a final residual reconstruction.
//!
//! The network predicts the noise residual; the denoised cube is
//! `noisy - residual` by construction.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use crate::blocks::{Ain, CoAttention, Conv2d, ScaleTransform, LRELU_SLOPE};
use crate::cube::HSICube;
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId, PadMode, ParamStore};
use crate::rng::{self, stream};
use crate::tensor::{Scalar, Tensor};

/// Structural hyperparameters. `base_channels` picks the variant
/// (32 = S, 64 = B, 128 = L); scales use `(C, 2C, 4C)` channels at
/// full, half, and quarter resolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NetworkConfig {
    pub bands: usize,
    pub base_channels: usize,
    pub coarse_blocks: usize,
    pub fine_layers: usize,
    pub reduction: usize,
    pub seed: u64,
}

impl NetworkConfig {
    pub fn small(seed: u64) -> Self {
        NetworkConfig {
            bands: 31,
            base_channels: 32,
            coarse_blocks: 4,
            fine_layers: 3,
            reduction: 4,
            seed,
        }
    }

    pub fn base(seed: u64) -> Self {
        NetworkConfig {
            base_channels: 64,
            ..Self::small(seed)
        }
    }

    pub fn large(seed: u64) -> Self {
        NetworkConfig {
            base_channels: 128,
            ..Self::small(seed)
        }
    }

    /// Variant by letter: `S`, `B`, or `L`.
    pub fn variant(name: &str, seed: u64) -> Result<Self> {
        match name {
            "S" | "s" => Ok(Self::small(seed)),
            "B" | "b" => Ok(Self::base(seed)),
            "L" | "l" => Ok(Self::large(seed)),
            other => Err(Error::Config(format!(
                "unknown variant {other:?}; expected S, B, or L"
            ))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.bands == 0 {
            return Err(Error::Config("bands must be >= 1".into()));
        }
        if self.base_channels == 0 || self.base_channels % 2 != 0 {
            return Err(Error::Config(format!(
                "base_channels must be positive and even, got {}",
                self.base_channels
            )));
        }
        if self.coarse_blocks == 0 {
            return Err(Error::Config("coarse_blocks must be >= 1".into()));
        }
        if self.fine_layers == 0 {
            return Err(Error::Config("fine_layers must be >= 1".into()));
        }
        if self.reduction == 0 {
            return Err(Error::Config("reduction must be >= 1".into()));
        }
        Ok(())
    }

    /// Channel widths of the three scales.
    pub fn widths(&self) -> [usize; 3] {
        let c = self.base_channels;
        [c, 2 * c, 4 * c]
    }
}

/// One coarse-fusion stage: the coarsest scale is refined by a plain
/// convolution; each finer scale is modulated by the next-coarser output.
/// Information moves strictly from low resolution to high resolution.
#[derive(Clone, Debug)]
pub struct CoarseStage {
    pub s2_conv: Conv2d,
    pub ain1: Ain,
    pub ain0: Ain,
}

impl CoarseStage {
    fn new<T: Scalar, R: rand::Rng>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        widths: &[usize; 3],
    ) -> Self {
        CoarseStage {
            s2_conv: Conv2d::new(
                store,
                rng,
                &format!("{name}.s2"),
                widths[2],
                widths[2],
                3,
                1,
                PadMode::Reflect,
            ),
            ain1: Ain::new(store, rng, &format!("{name}.ain1"), widths[1]),
            ain0: Ain::new(store, rng, &format!("{name}.ain0"), widths[0]),
        }
    }

    /// `(s0, s1, s2)` in, same shapes out.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        s0: NodeId,
        s1: NodeId,
        s2: NodeId,
    ) -> (NodeId, NodeId, NodeId) {
        let s2_pre = self.s2_conv.forward(g, store, s2);
        let s2_out = g.leaky_relu(s2_pre, LRELU_SLOPE);
        let s1_out = self.ain1.forward(g, store, s1, s2_out).out;
        let s0_out = self.ain0.forward(g, store, s0, s1_out).out;
        (s0_out, s1_out, s2_out)
    }
}

/// One fine-fusion layer: every scale receives all three branches through
/// scale transforms (identity on the diagonal) and fuses them with its own
/// co-attention module.
#[derive(Clone, Debug)]
pub struct FineLayer {
    /// `transforms[from][to]`.
    pub transforms: Vec<Vec<ScaleTransform>>,
    pub cas: Vec<CoAttention>,
}

impl FineLayer {
    fn new<T: Scalar, R: rand::Rng>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        widths: &[usize; 3],
        reduction: usize,
    ) -> Result<Self> {
        let mut transforms = Vec::new();
        for from in 0..3 {
            let mut row = Vec::new();
            for to in 0..3 {
                row.push(ScaleTransform::new(
                    store,
                    rng,
                    &format!("{name}.t{from}{to}"),
                    from,
                    to,
                    widths,
                ));
            }
            transforms.push(row);
        }
        let mut cas = Vec::new();
        for to in 0..3 {
            cas.push(CoAttention::new(
                store,
                rng,
                &format!("{name}.ca{to}"),
                widths[to],
                reduction,
            )?);
        }
        Ok(FineLayer { transforms, cas })
    }

    /// Returns the three fused outputs plus the three attention nodes.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        xs: [NodeId; 3],
    ) -> ([NodeId; 3], [NodeId; 3]) {
        let mut outs = [xs[0]; 3];
        let mut alphas = [xs[0]; 3];
        for to in 0..3 {
            let branches = [
                self.transforms[0][to].forward(g, store, xs[0]),
                self.transforms[1][to].forward(g, store, xs[1]),
                self.transforms[2][to].forward(g, store, xs[2]),
            ];
            let fwd = self.cas[to].forward(g, store, branches);
            outs[to] = fwd.out;
            alphas[to] = fwd.alphas;
        }
        (outs, alphas)
    }
}

/// A forward-ready network: block definitions only; tensors live in the
/// accompanying [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Network {
    pub config: NetworkConfig,
    pub initial: Vec<Conv2d>,
    pub coarse: Vec<CoarseStage>,
    pub fine: Vec<FineLayer>,
    /// Resolve fine outputs of scales 1 and 2 to full resolution.
    pub final_up: Vec<ScaleTransform>,
    pub final_ca: CoAttention,
    pub recon: Conv2d,
}

/// Handles into one forward pass.
pub struct ForwardOutputs {
    pub noisy: NodeId,
    pub residual: NodeId,
    pub denoised: NodeId,
    /// Every co-attention weight node, in evaluation order.
    pub alphas: Vec<NodeId>,
}

impl Network {
    /// Construct blocks and draw initial weights. Identical config (including
    /// seed) yields bitwise-identical stores.
    pub fn build<T: Scalar>(config: NetworkConfig) -> Result<(Self, ParamStore<T>)> {
        config.validate()?;
        let widths = config.widths();
        let mut store = ParamStore::new();
        let mut rng = rng::rng_from_seed(rng::split(config.seed, stream::INIT));

        let initial = (0..3)
            .map(|s| {
                Conv2d::new(
                    &mut store,
                    &mut rng,
                    &format!("initial.{s}"),
                    config.bands,
                    widths[s],
                    3,
                    1,
                    PadMode::Reflect,
                )
            })
            .collect();
        let coarse = (0..config.coarse_blocks)
            .map(|i| CoarseStage::new(&mut store, &mut rng, &format!("coarse.{i}"), &widths))
            .collect();
        let fine = (0..config.fine_layers)
            .map(|i| FineLayer::new(&mut store, &mut rng, &format!("fine.{i}"), &widths, config.reduction))
            .collect::<Result<Vec<_>>>()?;
        let final_up = (1..3)
            .map(|s| {
                ScaleTransform::new(&mut store, &mut rng, &format!("final.up{s}"), s, 0, &widths)
            })
            .collect();
        let final_ca = CoAttention::new(&mut store, &mut rng, "final.ca", widths[0], config.reduction)?;
        let recon = Conv2d::new(
            &mut store,
            &mut rng,
            "final.recon",
            widths[0],
            config.bands,
            3,
            1,
            PadMode::Reflect,
        );

        Ok((
            Network {
                config,
                initial,
                coarse,
                fine,
                final_up,
                final_ca,
                recon,
            },
            store,
        ))
    }

    /// Validate an input cube against the config.
    fn check_input(&self, noisy: &HSICube) -> Result<()> {
        let (b, h, w) = noisy.dims();
        if b != self.config.bands {
            return Err(Error::Shape(format!(
                "cube has {b} bands but the network expects {}",
                self.config.bands
            )));
        }
        if h % 4 != 0 || w % 4 != 0 {
            return Err(Error::Shape(format!(
                "spatial dims ({h}, {w}) must be divisible by 4"
            )));
        }
        if h < 4 || w < 4 {
            return Err(Error::Shape(format!("spatial dims ({h}, {w}) too small")));
        }
        Ok(())
    }

    /// Build the forward graph for one cube. The three pyramid levels enter
    /// as constants; gradients flow through the network parameters only.
    pub fn forward_graph<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        noisy: &HSICube,
    ) -> Result<ForwardOutputs> {
        self.check_input(noisy)?;
        let pyramid = noisy.build_pyramid()?;
        let noisy_node = g.input(noisy.to_tensor().cast::<T>(), false);
        let levels: Vec<NodeId> = pyramid
            .levels
            .iter()
            .map(|lvl| g.input(lvl.to_tensor().cast::<T>(), false))
            .collect();

        // Initial per-scale feature extraction.
        let mut feats = [NodeId(0); 3];
        for s in 0..3 {
            let c = self.initial[s].forward(g, store, levels[s]);
            feats[s] = g.leaky_relu(c, LRELU_SLOPE);
        }

        // Coarse fusion: strictly low-resolution to high-resolution flow.
        for stage in &self.coarse {
            let (s0, s1, s2) = stage.forward(g, store, feats[0], feats[1], feats[2]);
            feats = [s0, s1, s2];
        }

        // Fine fusion: all-pairs exchange through co-attention.
        let mut alphas = Vec::new();
        for layer in &self.fine {
            let (outs, a) = layer.forward(g, store, feats);
            feats = outs;
            alphas.extend_from_slice(&a);
        }

        // Resolve to full resolution and fuse once more.
        let b1 = self.final_up[0].forward(g, store, feats[1]);
        let b2 = self.final_up[1].forward(g, store, feats[2]);
        let fused = self.final_ca.forward(g, store, [feats[0], b1, b2]);
        alphas.push(fused.alphas);

        let residual = self.recon.forward(g, store, fused.out);
        let denoised = g.sub(noisy_node, residual);
        Ok(ForwardOutputs {
            noisy: noisy_node,
            residual,
            denoised,
            alphas,
        })
    }

    /// Run inference and return `(residual, denoised)` cubes.
    pub fn denoise_cube(
        &self,
        store: &ParamStore<f32>,
        noisy: &HSICube,
    ) -> Result<(HSICube, HSICube)> {
        let mut g = Graph::new();
        let out = self.forward_graph(&mut g, store, noisy)?;
        let residual = g.value(out.residual);
        let denoised = g.value(out.denoised);
        if !residual.all_finite() || !denoised.all_finite() {
            return Err(Error::Data("network output is not finite".into()));
        }
        let res = HSICube::new(
            noisy.dims().0,
            noisy.dims().1,
            noisy.dims().2,
            residual.data().to_vec(),
        )?;
        let den = HSICube::new(
            noisy.dims().0,
            noisy.dims().1,
            noisy.dims().2,
            denoised.data().to_vec(),
        )?;
        Ok((res, den))
    }
}

// ----------------------------------------------------------------------
// Flexible inference: arbitrary spatial sizes and band counts
// ----------------------------------------------------------------------

/// Mirror-tiled index: reflects with edge repetition and wraps, so any
/// padding amount is valid for any source length.
fn sym_index(i: usize, n: usize) -> usize {
    let p = 2 * n;
    let m = i % p;
    if m < n {
        m
    } else {
        p - 1 - m
    }
}

/// Round up to the next multiple of 4.
fn ceil4(n: usize) -> usize {
    n.div_ceil(4) * 4
}

/// Reflect-pad a cube to `(bands, height, width)` (each >= the source).
fn reflect_pad_cube(cube: &HSICube, bands: usize, height: usize, width: usize) -> HSICube {
    let (b, h, w) = cube.dims();
    let mut data = vec![0.0f32; bands * height * width];
    for bb in 0..bands {
        let sb = sym_index(bb, b);
        for i in 0..height {
            let si = sym_index(i, h);
            for j in 0..width {
                let sj = sym_index(j, w);
                data[(bb * height + i) * width + j] = cube.data()[(sb * h + si) * w + sj];
            }
        }
    }
    HSICube::new(bands, height, width, data).expect("padded cube is valid")
}

/// Triangular blend weight of position `k` inside a group of `n` bands.
fn tri_weight(k: usize, n: usize) -> f32 {
    (k + 1).min(n - k) as f32
}

impl Network {
    /// Denoise a cube whose spatial size or band count differs from the
    /// network's native input.
    ///
    /// Spatial dims are reflect-padded up to multiples of 4 and the result
    /// cropped back. A cube with fewer bands than the network is
    /// reflect-padded spectrally; one with more bands is processed in
    /// overlapping groups of the native band count at half-group stride,
    /// blended with triangular weights. Cubes with fewer than 2 bands are
    /// rejected.
    pub fn denoise_flexible(
        &self,
        store: &ParamStore<f32>,
        noisy: &HSICube,
    ) -> Result<HSICube> {
        let (b, h, w) = noisy.dims();
        if b < 2 {
            return Err(Error::Data(format!(
                "denoising needs at least 2 bands, got {b}"
            )));
        }
        if h < 2 || w < 2 {
            return Err(Error::Shape(format!(
                "spatial dims ({h}, {w}) too small to denoise"
            )));
        }
        let bn = self.config.bands;
        if b == bn {
            return self.denoise_padded(store, noisy);
        }
        if b < bn {
            let padded = reflect_pad_cube(noisy, bn, h, w);
            let den = self.denoise_padded(store, &padded)?;
            let mut data = Vec::with_capacity(b * h * w);
            data.extend_from_slice(&den.data()[..b * h * w]);
            return HSICube::new(b, h, w, data);
        }

        // More bands than native: overlapping groups, half-group stride.
        let stride = (bn / 2).max(1);
        let mut starts = Vec::new();
        let mut s = 0usize;
        loop {
            let start = s.min(b - bn);
            if starts.last() != Some(&start) {
                starts.push(start);
            }
            if start == b - bn {
                break;
            }
            s += stride;
        }
        let plane = h * w;
        let mut acc = vec![0.0f32; b * plane];
        let mut wsum = vec![0.0f32; b];
        for &start in &starts {
            let mut gdata = Vec::with_capacity(bn * plane);
            gdata.extend_from_slice(&noisy.data()[start * plane..(start + bn) * plane]);
            let group = HSICube::new(bn, h, w, gdata)?;
            let den = self.denoise_padded(store, &group)?;
            for k in 0..bn {
                let wgt = tri_weight(k, bn);
                wsum[start + k] += wgt;
                let src = &den.data()[k * plane..(k + 1) * plane];
                let dst = &mut acc[(start + k) * plane..(start + k + 1) * plane];
                for (d, &v) in dst.iter_mut().zip(src) {
                    *d += wgt * v;
                }
            }
        }
        for band in 0..b {
            let inv = 1.0 / wsum[band];
            for v in &mut acc[band * plane..(band + 1) * plane] {
                *v *= inv;
            }
        }
        HSICube::new(b, h, w, acc)
    }

    /// Denoise one native-band cube, reflect-padding spatial dims to
    /// multiples of 4 and cropping the result back.
    fn denoise_padded(&self, store: &ParamStore<f32>, noisy: &HSICube) -> Result<HSICube> {
        let (b, h, w) = noisy.dims();
        let (ph, pw) = (ceil4(h).max(4), ceil4(w).max(4));
        if (ph, pw) == (h, w) {
            return self.denoise_cube(store, noisy).map(|(_, den)| den);
        }
        let padded = reflect_pad_cube(noisy, b, ph, pw);
        let (_, den) = self.denoise_cube(store, &padded)?;
        let mut data = Vec::with_capacity(b * h * w);
        for bb in 0..b {
            for i in 0..h {
                let src = (bb * ph + i) * pw;
                data.extend_from_slice(&den.data()[src..src + w]);
            }
        }
        HSICube::new(b, h, w, data)
    }
}

// ----------------------------------------------------------------------
// Checkpoint format
// ----------------------------------------------------------------------
//
// Layout (little-endian throughout):
//   magic "MAFW" | version u8 | flags u8 | reserved u16
//   config: bands u32, base_channels u32, coarse_blocks u32,
//           fine_layers u32, reduction u32, pad u32 (zero), seed u64
//   n_records u32
//   records sorted by path:
//     path_len u16 | path utf8 | ndim u8 | dims u32 x ndim | f32 payload
//   sections until EOF (flags bit 0 set when any present):
//     kind u8 | length u64 | payload

const CKPT_MAGIC: &[u8; 4] = b"MAFW";
const CKPT_VERSION: u8 = 1;

/// Trailing checkpoint section carrying non-weight state.
#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointSection {
    pub kind: u8,
    pub payload: Vec<u8>,
}

/// Optimizer first/second moments and step counter.
pub const SECTION_OPTIMIZER: u8 = 1;
/// Training progress: stage index, epoch, comparable counters.
pub const SECTION_PROGRESS: u8 = 2;
/// Per-stage loss history, UTF-8 text.
pub const SECTION_HISTORY: u8 = 3;

/// Serialize config + weights (+ optional sections) to a byte buffer.
pub fn checkpoint_to_bytes(
    config: &NetworkConfig,
    store: &ParamStore<f32>,
    sections: &[CheckpointSection],
) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(CKPT_MAGIC);
    out.push(CKPT_VERSION);
    out.push(u8::from(!sections.is_empty()));
    out.extend_from_slice(&0u16.to_le_bytes());
    for v in [
        config.bands,
        config.base_channels,
        config.coarse_blocks,
        config.fine_layers,
        config.reduction,
        0,
    ] {
        let v = u32::try_from(v).map_err(|_| Error::Format("config field exceeds u32".into()))?;
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend_from_slice(&config.seed.to_le_bytes());

    let order = store.sorted_indices();
    let n = u32::try_from(order.len()).map_err(|_| Error::Format("too many records".into()))?;
    out.extend_from_slice(&n.to_le_bytes());
    for idx in order {
        let name = store.name(idx).as_bytes();
        let len = u16::try_from(name.len()).map_err(|_| Error::Format("path too long".into()))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name);
        let t = store.value(idx);
        out.push(u8::try_from(t.shape().len()).map_err(|_| Error::Format("rank too high".into()))?);
        for &d in t.shape() {
            let d = u32::try_from(d).map_err(|_| Error::Format("dim exceeds u32".into()))?;
            out.extend_from_slice(&d.to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    for s in sections {
        out.push(s.kind);
        out.extend_from_slice(&(s.payload.len() as u64).to_le_bytes());
        out.extend_from_slice(&s.payload);
    }
    Ok(out)
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Format(format!(
                "checkpoint truncated at offset {} (need {n} more bytes)",
                self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Parse a checkpoint buffer into config, named weights, and sections.
pub fn checkpoint_from_bytes(
    buf: &[u8],
) -> Result<(NetworkConfig, HashMap<String, Tensor<f32>>, Vec<CheckpointSection>)> {
    let mut c = Cursor { buf, pos: 0 };
    if c.take(4)? != CKPT_MAGIC {
        return Err(Error::Format("bad checkpoint magic".into()));
    }
    let version = c.u8()?;
    if version != CKPT_VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let flags = c.u8()?;
    if flags > 1 {
        return Err(Error::Format(format!("unknown checkpoint flags {flags:#x}")));
    }
    if c.u16()? != 0 {
        return Err(Error::Format("nonzero reserved field".into()));
    }
    let mut fields = [0usize; 6];
    for f in &mut fields {
        *f = c.u32()? as usize;
    }
    if fields[5] != 0 {
        return Err(Error::Format("nonzero config padding".into()));
    }
    let seed = c.u64()?;
    let config = NetworkConfig {
        bands: fields[0],
        base_channels: fields[1],
        coarse_blocks: fields[2],
        fine_layers: fields[3],
        reduction: fields[4],
        seed,
    };
    config.validate().map_err(|e| Error::Format(format!("checkpoint config invalid: {e}")))?;

    let n = c.u32()? as usize;
    let mut weights = HashMap::new();
    let mut prev_name: Option<String> = None;
    for _ in 0..n {
        let len = c.u16()? as usize;
        let name = std::str::from_utf8(c.take(len)?)
            .map_err(|_| Error::Format("record path is not UTF-8".into()))?
            .to_string();
        if let Some(p) = &prev_name {
            if *p >= name {
                return Err(Error::Format(format!(
                    "record paths out of order: {p:?} then {name:?}"
                )));
            }
        }
        let ndim = c.u8()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        let mut numel = 1usize;
        for _ in 0..ndim {
            let d = c.u32()? as usize;
            numel = numel
                .checked_mul(d)
                .ok_or_else(|| Error::Format("record size overflow".into()))?;
            shape.push(d);
        }
        let raw = c.take(numel * 4)?;
        let data: Vec<f32> = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Format(format!("record {name:?} has non-finite values")));
        }
        weights.insert(name.clone(), Tensor::from_vec(&shape, data));
        prev_name = Some(name);
    }

    let mut sections = Vec::new();
    while c.pos < buf.len() {
        let kind = c.u8()?;
        let len = c.u64()? as usize;
        sections.push(CheckpointSection {
            kind,
            payload: c.take(len)?.to_vec(),
        });
    }
    if (flags & 1 == 0) && !sections.is_empty() {
        return Err(Error::Format("sections present but flag bit clear".into()));
    }
    Ok((config, weights, sections))
}

/// Write a checkpoint file.
pub fn save_checkpoint(
    path: &Path,
    config: &NetworkConfig,
    store: &ParamStore<f32>,
    sections: &[CheckpointSection],
) -> Result<()> {
    let bytes = checkpoint_to_bytes(config, store, sections)?;
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Load a checkpoint file and rebuild the network with its exact weights.
pub fn load_checkpoint(path: &Path) -> Result<(Network, ParamStore<f32>, Vec<CheckpointSection>)> {
    let mut buf = Vec::new();
    std::fs::File::open(path)
        .map_err(|e| Error::io(path, e))?
        .read_to_end(&mut buf)
        .map_err(|e| Error::io(path, e))?;
    restore_checkpoint(&buf)
}

/// Rebuild a network and its exact weights from checkpoint bytes.
pub fn restore_checkpoint(buf: &[u8]) -> Result<(Network, ParamStore<f32>, Vec<CheckpointSection>)> {
    let (config, mut weights, sections) = checkpoint_from_bytes(buf)?;
    let (net, mut store) = Network::build::<f32>(config)?;
    if weights.len() != store.len() {
        return Err(Error::Format(format!(
            "checkpoint has {} weight records but the config builds {}",
            weights.len(),
            store.len()
        )));
    }
    for idx in 0..store.len() {
        let name = store.name(idx).to_string();
        let t = weights.remove(&name).ok_or_else(|| {
            Error::Format(format!("checkpoint is missing parameter {name:?}"))
        })?;
        if t.shape() != store.value(idx).shape() {
            return Err(Error::Format(format!(
                "parameter {name:?} has shape {:?} but the config expects {:?}",
                t.shape(),
                store.value(idx).shape()
            )));
        }
        *store.value_mut(idx) = t;
    }
    Ok((net, store, sections))
}
