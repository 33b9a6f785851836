//! Hyperspectral cube container, on-disk format, normalization, and the
//! Gaussian pyramid used by the multiscale network.
//!
//! A cube is `bands x height x width` of `f32`, stored band-major. The HSD
//! file layout is fixed byte-for-byte:
//!
//! ```text
//! offset  size  field
//! 0       4     magic "HSDC"
//! 4       1     format version, currently 1
//! 5       1     dtype code, 0 = f32 little-endian
//! 6       2     reserved, zero
//! 8       4     bands  (u32 LE)
//! 12      4     height (u32 LE)
//! 16      4     width  (u32 LE)
//! 20      -     payload: bands*height*width f32 LE, band-major
//! ```

use std::fs;
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::rng::{self, stream};
use crate::tensor::Tensor;

/// Size of the fixed HSD header in bytes.
pub const HSD_HEADER_LEN: usize = 20;
const HSD_MAGIC: &[u8; 4] = b"HSDC";
const HSD_VERSION: u8 = 1;
const HSD_DTYPE_F32: u8 = 0;

/// Binomial smoothing kernel `[1,4,6,4,1]/16` shared by the pyramid and the
/// synthetic cube generator.
pub const PYRAMID_KERNEL: [f32; 5] = [
    1.0 / 16.0,
    4.0 / 16.0,
    6.0 / 16.0,
    4.0 / 16.0,
    1.0 / 16.0,
];

/// Hyperspectral cube with a declared physical value range.
#[derive(Clone, Debug, PartialEq)]
pub struct HSICube {
    bands: usize,
    height: usize,
    width: usize,
    data: Vec<f32>,
    /// Physical range the voxel values refer to; `(0, 1)` for normalized data.
    pub value_range: (f32, f32),
}

/// How [`HSICube::normalize`] picked its affine map, kept for inversion.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NormalizationRecord {
    pub lo: f32,
    pub hi: f32,
    pub mode: NormalizationMode,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormalizationMode {
    /// Use the cube's own min/max.
    GlobalMinMax,
    /// Use the cube's declared `value_range`.
    FixedRange,
}

/// Three-level Gaussian pyramid: full, half, and quarter resolution.
#[derive(Clone, Debug)]
pub struct ImagePyramid {
    pub levels: Vec<HSICube>,
}

impl HSICube {
    /// Build a cube from raw band-major data, validating shape and finiteness.
    pub fn new(bands: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if bands == 0 || height == 0 || width == 0 {
            return Err(Error::Shape(format!(
                "cube dimensions must be positive, got ({bands}, {height}, {width})"
            )));
        }
        let expected = bands
            .checked_mul(height)
            .and_then(|n| n.checked_mul(width))
            .ok_or_else(|| Error::Shape("cube dimensions overflow".into()))?;
        if data.len() != expected {
            return Err(Error::Shape(format!(
                "cube data length {} does not match dims ({bands}, {height}, {width})",
                data.len()
            )));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::Data("cube contains NaN or infinite voxels".into()));
        }
        Ok(HSICube {
            bands,
            height,
            width,
            data,
            value_range: (0.0, 1.0),
        })
    }

    pub fn zeros(bands: usize, height: usize, width: usize) -> Self {
        HSICube {
            bands,
            height,
            width,
            data: vec![0.0; bands * height * width],
            value_range: (0.0, 1.0),
        }
    }

    pub fn bands(&self) -> usize {
        self.bands
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.bands, self.height, self.width)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    #[inline]
    pub fn index(&self, band: usize, y: usize, x: usize) -> usize {
        (band * self.height + y) * self.width + x
    }

    #[inline]
    pub fn get(&self, band: usize, y: usize, x: usize) -> f32 {
        self.data[self.index(band, y, x)]
    }

    #[inline]
    pub fn set(&mut self, band: usize, y: usize, x: usize, v: f32) {
        let i = self.index(band, y, x);
        self.data[i] = v;
    }

    /// One band as a contiguous `height*width` slice.
    pub fn band(&self, band: usize) -> &[f32] {
        let n = self.height * self.width;
        &self.data[band * n..(band + 1) * n]
    }

    pub fn band_mut(&mut self, band: usize) -> &mut [f32] {
        let n = self.height * self.width;
        &mut self.data[band * n..(band + 1) * n]
    }

    pub fn mean(&self) -> f64 {
        let sum: f64 = self.data.iter().map(|&v| v as f64).sum();
        sum / self.data.len() as f64
    }

    pub fn to_tensor(&self) -> Tensor<f32> {
        Tensor::from_vec(&[self.bands, self.height, self.width], self.data.clone())
    }

    pub fn from_tensor(t: &Tensor<f32>) -> Result<Self> {
        let (b, h, w) = t.dims3();
        HSICube::new(b, h, w, t.data().to_vec())
    }

    // ------------------------------------------------------------------
    // HSD file format
    // ------------------------------------------------------------------

    /// Serialize to the HSD byte layout.
    pub fn to_hsd_bytes(&self) -> Result<Vec<u8>> {
        if !self.data.iter().all(|v| v.is_finite()) {
            return Err(Error::Data(
                "refusing to serialize cube with NaN or infinite voxels".into(),
            ));
        }
        let dims_ok = self.bands <= u32::MAX as usize
            && self.height <= u32::MAX as usize
            && self.width <= u32::MAX as usize;
        if !dims_ok {
            return Err(Error::Shape("cube dimensions exceed u32 range".into()));
        }
        let mut out = Vec::with_capacity(HSD_HEADER_LEN + self.data.len() * 4);
        out.extend_from_slice(HSD_MAGIC);
        out.push(HSD_VERSION);
        out.push(HSD_DTYPE_F32);
        out.extend_from_slice(&[0u8, 0u8]);
        out.extend_from_slice(&(self.bands as u32).to_le_bytes());
        out.extend_from_slice(&(self.height as u32).to_le_bytes());
        out.extend_from_slice(&(self.width as u32).to_le_bytes());
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        Ok(out)
    }

    /// Parse the HSD byte layout.
    pub fn from_hsd_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HSD_HEADER_LEN {
            return Err(Error::Format(format!(
                "HSD header truncated: {} bytes, need {}",
                bytes.len(),
                HSD_HEADER_LEN
            )));
        }
        if &bytes[0..4] != HSD_MAGIC {
            return Err(Error::Format("bad magic, not an HSD file".into()));
        }
        if bytes[4] != HSD_VERSION {
            return Err(Error::Format(format!("unsupported HSD version {}", bytes[4])));
        }
        if bytes[5] != HSD_DTYPE_F32 {
            return Err(Error::Format(format!("unsupported HSD dtype code {}", bytes[5])));
        }
        if bytes[6] != 0 || bytes[7] != 0 {
            return Err(Error::Format("nonzero reserved header bytes".into()));
        }
        let read_u32 = |off: usize| u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap());
        let bands = read_u32(8) as usize;
        let height = read_u32(12) as usize;
        let width = read_u32(16) as usize;
        if bands == 0 || height == 0 || width == 0 {
            return Err(Error::Format(format!(
                "zero dimension in header: ({bands}, {height}, {width})"
            )));
        }
        let numel = bands
            .checked_mul(height)
            .and_then(|n| n.checked_mul(width))
            .ok_or_else(|| Error::Format("header dimensions overflow".into()))?;
        let expected = HSD_HEADER_LEN + numel * 4;
        if bytes.len() != expected {
            return Err(Error::Format(format!(
                "payload length mismatch: file has {} bytes, header implies {}",
                bytes.len(),
                expected
            )));
        }
        let mut data = Vec::with_capacity(numel);
        for i in 0..numel {
            let off = HSD_HEADER_LEN + i * 4;
            data.push(f32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::Data("HSD payload contains NaN or infinite voxels".into()));
        }
        HSICube::new(bands, height, width, data)
    }

    pub fn save_hsd(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let bytes = self.to_hsd_bytes()?;
        fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load_hsd(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        HSICube::from_hsd_bytes(&bytes)
    }

    // ------------------------------------------------------------------
    // Normalization
    // ------------------------------------------------------------------

    /// Map values affinely into `[0, 1]` and return the inverse record.
    pub fn normalize(&self, mode: NormalizationMode) -> Result<(HSICube, NormalizationRecord)> {
        let (lo, hi) = match mode {
            NormalizationMode::GlobalMinMax => {
                let lo = self.data.iter().cloned().fold(f32::INFINITY, f32::min);
                let hi = self.data.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
                (lo, hi)
            }
            NormalizationMode::FixedRange => self.value_range,
        };
        if !(hi > lo) {
            return Err(Error::DegenerateRange(format!(
                "cannot normalize with lo={lo}, hi={hi}"
            )));
        }
        let scale = 1.0 / (hi - lo);
        if mode == NormalizationMode::FixedRange {
            if let Some(v) = self.data.iter().find(|v| **v < lo || **v > hi) {
                return Err(Error::Data(format!(
                    "value {v} outside declared range [{lo}, {hi}]"
                )));
            }
        }
        let data: Vec<f32> = self.data.iter().map(|&v| (v - lo) * scale).collect();
        let mut out = HSICube::new(self.bands, self.height, self.width, data)?;
        out.value_range = (0.0, 1.0);
        Ok((out, NormalizationRecord { lo, hi, mode }))
    }

    /// Invert [`HSICube::normalize`].
    pub fn denormalize(&self, record: &NormalizationRecord) -> Result<HSICube> {
        if !(record.hi > record.lo) {
            return Err(Error::DegenerateRange(format!(
                "cannot denormalize with lo={}, hi={}",
                record.lo, record.hi
            )));
        }
        let span = record.hi - record.lo;
        let data: Vec<f32> = self.data.iter().map(|&v| v * span + record.lo).collect();
        let mut out = HSICube::new(self.bands, self.height, self.width, data)?;
        out.value_range = (record.lo, record.hi);
        Ok(out)
    }

    // ------------------------------------------------------------------
    // Gaussian pyramid
    // ------------------------------------------------------------------

    /// Three-level pyramid: the cube itself plus binomially smoothed versions
    /// decimated by 2 and 4. Level `k` has spatial dims `ceil(H/2^k)` by
    /// `ceil(W/2^k)`; band count never changes.
    pub fn build_pyramid(&self) -> Result<ImagePyramid> {
        if self.height < 4 || self.width < 4 {
            return Err(Error::Shape(format!(
                "pyramid needs height and width >= 4, got ({}, {})",
                self.height, self.width
            )));
        }
        let mut levels = vec![self.clone()];
        for _ in 0..2 {
            let prev = levels.last().unwrap();
            levels.push(prev.smooth_and_decimate());
        }
        Ok(ImagePyramid { levels })
    }

    /// One pyramid step: separable 5-tap blur with reflected borders, then
    /// keep every second row/column starting at index 0.
    fn smooth_and_decimate(&self) -> HSICube {
        let (b, h, w) = self.dims();
        let oh = h.div_ceil(2);
        let ow = w.div_ceil(2);
        let mut out = HSICube::zeros(b, oh, ow);
        out.value_range = self.value_range;
        let mut rows = vec![0.0f32; h * w];
        for band in 0..b {
            let src = self.band(band);
            // Horizontal pass.
            for y in 0..h {
                for x in 0..w {
                    let mut acc = 0.0f32;
                    for (t, &k) in PYRAMID_KERNEL.iter().enumerate() {
                        let xi = reflect_index(x as isize + t as isize - 2, w);
                        acc += k * src[y * w + xi];
                    }
                    rows[y * w + x] = acc;
                }
            }
            // Vertical pass fused with 2x decimation of both axes.
            let dst = out.band_mut(band);
            for oy in 0..oh {
                let y = oy * 2;
                for ox in 0..ow {
                    let x = ox * 2;
                    let mut acc = 0.0f32;
                    for (t, &k) in PYRAMID_KERNEL.iter().enumerate() {
                        let yi = reflect_index(y as isize + t as isize - 2, h);
                        acc += k * rows[yi * w + x];
                    }
                    dst[oy * ow + ox] = acc;
                }
            }
        }
        out
    }
}

/// Reflect an out-of-range index into `[0, n)` without repeating the border
/// sample (`-1 -> 1`, `n -> n-2`).
#[inline]
pub fn reflect_index(i: isize, n: usize) -> usize {
    debug_assert!(n > 0);
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let mut i = i.rem_euclid(period);
    if i >= n as isize {
        i = period - i;
    }
    i as usize
}

/// Generate a smooth, spectrally correlated random cube with values spanning
/// `[lo, hi]`. Bands blend two shared spatial fields with slowly varying
/// weights plus a small per-band detail field, all binomially smoothed, so the
/// result behaves like reflectance data rather than white noise.
pub fn smooth_random_cube(
    bands: usize,
    height: usize,
    width: usize,
    lo: f32,
    hi: f32,
    seed: u64,
) -> Result<HSICube> {
    if bands == 0 || height < 4 || width < 4 {
        return Err(Error::Shape(format!(
            "generator needs bands >= 1 and spatial dims >= 4, got ({bands}, {height}, {width})"
        )));
    }
    if !(hi > lo) {
        return Err(Error::DegenerateRange(format!(
            "generator range [{lo}, {hi}] is empty"
        )));
    }
    let base_seed = rng::split(seed, stream::SYNTH);
    let field = |tag: u64| -> Vec<f32> {
        let mut r = rng::rng_from_seed(rng::split(base_seed, tag));
        let mut f: Vec<f32> = (0..height * width)
            .map(|_| r.sample::<f32, _>(StandardNormal))
            .collect();
        for _ in 0..4 {
            f = blur_field(&f, height, width);
        }
        f
    };
    let base_a = field(0);
    let base_b = field(1);
    let mut cube = HSICube::zeros(bands, height, width);
    for b in 0..bands {
        // Weights rotate slowly across the spectrum so neighboring bands stay
        // strongly correlated while distant bands decorrelate.
        let theta = if bands == 1 {
            0.0
        } else {
            std::f32::consts::FRAC_PI_2 * b as f32 / (bands - 1) as f32
        };
        let (wa, wb) = (theta.cos(), theta.sin());
        let detail = field(100 + b as u64);
        let dst = cube.band_mut(b);
        for i in 0..height * width {
            dst[i] = wa * base_a[i] + wb * base_b[i] + 0.25 * detail[i];
        }
    }
    // Rescale globally so the spectrum keeps its shape.
    let min = cube.data.iter().cloned().fold(f32::INFINITY, f32::min);
    let max = cube.data.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
    let span = if max > min { max - min } else { 1.0 };
    for v in cube.data.iter_mut() {
        *v = lo + (*v - min) / span * (hi - lo);
    }
    Ok(cube)
}

fn blur_field(src: &[f32], h: usize, w: usize) -> Vec<f32> {
    let mut mid = vec![0.0f32; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0f32;
            for (t, &k) in PYRAMID_KERNEL.iter().enumerate() {
                let xi = reflect_index(x as isize + t as isize - 2, w);
                acc += k * src[y * w + xi];
            }
            mid[y * w + x] = acc;
        }
    }
    let mut out = vec![0.0f32; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0f32;
            for (t, &k) in PYRAMID_KERNEL.iter().enumerate() {
                let yi = reflect_index(y as isize + t as isize - 2, h);
                acc += k * mid[yi * w + x];
            }
            out[y * w + x] = acc;
        }
    }
    out
}
