//! Python bindings: cubes, noise synthesis, the denoising network,
//! training, and quality metrics. Data crosses the boundary as plain
//! `list[float]` in band-major (band, row, column) order.

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;

use mafnet::cube::{smooth_random_cube, HSICube};
use mafnet::metrics::MetricsTable;
use mafnet::model::{load_checkpoint, save_checkpoint, Network, NetworkConfig};
use mafnet::noise::{synthesize_case, NoiseCase, NoiseSpec};
use mafnet::train::{init_state, run_schedule, PatchDims, StageKind, TrainConfig};

fn to_py(e: mafnet::Error) -> PyErr {
    match e.exit_code() {
        3 => PyIOError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn parse_case(tok: &str) -> PyResult<NoiseCase> {
    Ok(match tok {
        "g30" => NoiseCase::GaussFixed(30.0),
        "g50" => NoiseCase::GaussFixed(50.0),
        "g70" => NoiseCase::GaussFixed(70.0),
        "blind" => NoiseCase::GaussBlind,
        "1" => NoiseCase::Case1,
        "2" => NoiseCase::Case2,
        "3" => NoiseCase::Case3,
        "4" => NoiseCase::Case4,
        "5" => NoiseCase::Case5,
        _ => {
            return Err(PyValueError::new_err(format!(
                "unknown case '{tok}' (expected g30, g50, g70, blind, or 1-5)"
            )))
        }
    })
}

/// A hyperspectral cube: `bands` spectral slices of `height` x `width`.
#[pyclass(from_py_object)]
#[derive(Clone)]
struct Cube {
    inner: HSICube,
}

#[pymethods]
impl Cube {
    #[new]
    fn new(bands: usize, height: usize, width: usize, data: Vec<f32>) -> PyResult<Self> {
        Ok(Cube {
            inner: HSICube::new(bands, height, width, data).map_err(to_py)?,
        })
    }

    /// Smooth random reflectance cube with values in `[lo, hi]`.
    #[staticmethod]
    fn smooth_random(
        bands: usize,
        height: usize,
        width: usize,
        lo: f32,
        hi: f32,
        seed: u64,
    ) -> PyResult<Self> {
        Ok(Cube {
            inner: smooth_random_cube(bands, height, width, lo, hi, seed).map_err(to_py)?,
        })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(Cube {
            inner: HSICube::load_hsd(std::path::Path::new(path)).map_err(to_py)?,
        })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        self.inner.save_hsd(std::path::Path::new(path)).map_err(to_py)
    }

    #[getter]
    fn bands(&self) -> usize {
        self.inner.bands()
    }

    #[getter]
    fn height(&self) -> usize {
        self.inner.height()
    }

    #[getter]
    fn width(&self) -> usize {
        self.inner.width()
    }

    /// Voxel values, band-major.
    fn data(&self) -> Vec<f32> {
        self.inner.data().to_vec()
    }

    fn __repr__(&self) -> String {
        format!(
            "Cube(bands={}, height={}, width={})",
            self.inner.bands(),
            self.inner.height(),
            self.inner.width()
        )
    }
}

/// Corrupt a clean cube (values in [0, 1]) with one of the noise
/// protocols; returns the noisy cube and the synthesis report text.
#[pyfunction]
fn synthesize(cube: &Cube, case: &str, seed: u64) -> PyResult<(Cube, String)> {
    let spec = NoiseSpec::new(parse_case(case)?, seed);
    let (noisy, report) = synthesize_case(&cube.inner, &spec).map_err(to_py)?;
    Ok((Cube { inner: noisy }, report.to_text()))
}

/// Mean quality metrics `(psnr_db, ssim, sam_radians)` of an estimate
/// against a reference.
#[pyfunction]
#[pyo3(signature = (estimate, reference, data_range=1.0))]
fn metrics(estimate: &Cube, reference: &Cube, data_range: f64) -> PyResult<(f64, f64, f64)> {
    let t = MetricsTable::compute(&estimate.inner, &reference.inner, data_range).map_err(to_py)?;
    Ok((t.psnr_mean_db, t.ssim_mean, t.sam_mean_rad))
}

/// Per-band metrics table in the same text format the CLI writes.
#[pyfunction]
#[pyo3(signature = (estimate, reference, data_range=1.0))]
fn metrics_table(estimate: &Cube, reference: &Cube, data_range: f64) -> PyResult<String> {
    let t = MetricsTable::compute(&estimate.inner, &reference.inner, data_range).map_err(to_py)?;
    Ok(t.to_text())
}

/// The denoising network plus its trained weights.
#[pyclass]
struct Net {
    net: Network,
    store: mafnet::graph::ParamStore<f32>,
}

#[pymethods]
impl Net {
    /// Freshly initialized network. `variant` is S, B, or L; the advanced
    /// keyword arguments shrink the network for experiments.
    #[staticmethod]
    #[pyo3(signature = (variant, bands, seed, base_channels=None, coarse_blocks=None, fine_layers=None))]
    fn build(
        variant: &str,
        bands: usize,
        seed: u64,
        base_channels: Option<usize>,
        coarse_blocks: Option<usize>,
        fine_layers: Option<usize>,
    ) -> PyResult<Self> {
        let mut cfg = NetworkConfig::variant(variant, seed).map_err(to_py)?;
        cfg.bands = bands;
        if let Some(v) = base_channels {
            cfg.base_channels = v;
        }
        if let Some(v) = coarse_blocks {
            cfg.coarse_blocks = v;
        }
        if let Some(v) = fine_layers {
            cfg.fine_layers = v;
        }
        let (net, store) = Network::build::<f32>(cfg).map_err(to_py)?;
        Ok(Net { net, store })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        let (net, store, _) = load_checkpoint(std::path::Path::new(path)).map_err(to_py)?;
        Ok(Net { net, store })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        save_checkpoint(std::path::Path::new(path), &self.net.config, &self.store, &[]).map_err(to_py)
    }

    /// Remove the predicted noise from a cube of any compatible size;
    /// spatial sizes and band counts that differ from the training shape
    /// are handled by reflective padding and overlapping band groups.
    fn denoise(&self, noisy: &Cube) -> PyResult<Cube> {
        Ok(Cube {
            inner: self.net.denoise_flexible(&self.store, &noisy.inner).map_err(to_py)?,
        })
    }

    /// Number of learnable scalars.
    #[getter]
    fn param_count(&self) -> usize {
        self.store.param_count()
    }

    #[getter]
    fn bands(&self) -> usize {
        self.net.config.bands
    }

    fn __repr__(&self) -> String {
        format!(
            "Net(bands={}, base_channels={}, params={})",
            self.net.config.bands,
            self.net.config.base_channels,
            self.store.param_count()
        )
    }
}

/// Train a network over the staged curriculum and return it.
///
/// `stages` is a list drawn from {"sigma30", "sigma50", "sigma70",
/// "blind", "complex"}; the default runs all five in that order. Each
/// stage warm-starts from the previous stage's weights. Log lines go to
/// the returned transcript, one `stage epoch lr rec grad total` line per
/// epoch.
#[pyfunction]
#[pyo3(signature = (net, sources, epochs_per_stage=5, batch_size=4, patch_bands=8,
    patch_height=32, patch_width=32, patches_per_epoch=32, lr_init=1e-4,
    lr_decay=0.97, lambda_grad=0.01, val_fraction=0.1, seed=0, stages=None))]
#[allow(clippy::too_many_arguments)]
fn train(
    net: &mut Net,
    sources: Vec<Cube>,
    epochs_per_stage: usize,
    batch_size: usize,
    patch_bands: usize,
    patch_height: usize,
    patch_width: usize,
    patches_per_epoch: usize,
    lr_init: f64,
    lr_decay: f64,
    lambda_grad: f64,
    val_fraction: f64,
    seed: u64,
    stages: Option<Vec<String>>,
) -> PyResult<String> {
    let stage_kinds: Vec<StageKind> = match stages {
        None => StageKind::SCHEDULE.to_vec(),
        Some(names) => names
            .iter()
            .map(|n| StageKind::from_name(n))
            .collect::<mafnet::Result<_>>()
            .map_err(to_py)?,
    };
    let cfg = TrainConfig {
        epochs_per_stage,
        batch_size,
        patch: PatchDims { bands: patch_bands, height: patch_height, width: patch_width },
        patches_per_epoch,
        lr_init,
        lr_decay,
        lambda: lambda_grad,
        val_fraction,
        seed,
    };
    let cubes: Vec<HSICube> = sources.iter().map(|c| c.inner.clone()).collect();
    let mut state = init_state(net.net.config.clone()).map_err(to_py)?;
    state.store = net.store.clone();
    let mut transcript = String::new();
    let mut sink = |line: &str| {
        transcript.push_str(line);
        transcript.push('\n');
    };
    run_schedule(&mut state, &cfg, &cubes, &stage_kinds, None, &mut sink).map_err(to_py)?;
    net.net = state.net;
    net.store = state.store;
    Ok(transcript)
}

#[pymodule]
fn mafnet_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Cube>()?;
    m.add_class::<Net>()?;
    m.add_function(wrap_pyfunction!(synthesize, m)?)?;
    m.add_function(wrap_pyfunction!(metrics, m)?)?;
    m.add_function(wrap_pyfunction!(metrics_table, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    Ok(())
}
