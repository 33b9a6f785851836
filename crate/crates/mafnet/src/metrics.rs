//! Quality metrics for denoised cubes: per-band peak signal-to-noise ratio,
//! per-band structural similarity (11x11 Gaussian-weighted windows over the
//! valid region), and the mean spectral angle in radians, plus a delimited
//! text table that serializes the per-band values with a summary row.

use crate::cube::HSICube;
use crate::error::{Error, Result};

/// Structural-similarity window size (square).
pub const SSIM_WINDOW: usize = 11;
/// Standard deviation of the Gaussian window.
pub const SSIM_SIGMA: f64 = 1.5;
/// Stabilizer scale for the luminance term.
pub const SSIM_K1: f64 = 0.01;
/// Stabilizer scale for the contrast term.
pub const SSIM_K2: f64 = 0.03;
/// Spectral vectors with a norm below this are treated as zero spectra and
/// contribute a zero angle.
pub const SAM_NORM_EPS: f64 = 1e-8;

/// Peak signal-to-noise ratio of every band plus the mean over bands whose
/// mean squared error is nonzero.
#[derive(Clone, Debug)]
pub struct PsnrResult {
    /// Mean over finite bands; `+inf` when every band is an exact match.
    pub mean_db: f64,
    /// Per-band values; exact matches report `+inf`.
    pub per_band_db: Vec<f64>,
    /// How many bands were excluded from the mean as exact matches.
    pub infinite_bands: usize,
}

fn check_pair(est: &HSICube, reference: &HSICube) -> Result<()> {
    if est.dims() != reference.dims() {
        return Err(Error::Shape(format!(
            "cube shapes differ: {:?} vs {:?}",
            est.dims(),
            reference.dims()
        )));
    }
    Ok(())
}

fn check_range(data_range: f64) -> Result<()> {
    if !(data_range > 0.0) || !data_range.is_finite() {
        return Err(Error::Param(format!(
            "data range must be positive and finite, got {data_range}"
        )));
    }
    Ok(())
}

/// Per-band PSNR in decibels: `10 log10(range^2 / MSE)`.
pub fn psnr(est: &HSICube, reference: &HSICube, data_range: f64) -> Result<PsnrResult> {
    check_pair(est, reference)?;
    check_range(data_range)?;
    let (b, h, w) = est.dims();
    let plane = h * w;
    let mut per_band_db = Vec::with_capacity(b);
    let mut finite_sum = 0.0f64;
    let mut finite_count = 0usize;
    for band in 0..b {
        let lo = band * plane;
        let mse: f64 = est.data()[lo..lo + plane]
            .iter()
            .zip(&reference.data()[lo..lo + plane])
            .map(|(&a, &r)| {
                let d = (a - r) as f64;
                d * d
            })
            .sum::<f64>()
            / plane as f64;
        if mse == 0.0 {
            per_band_db.push(f64::INFINITY);
        } else {
            let v = 10.0 * (data_range * data_range / mse).log10();
            per_band_db.push(v);
            finite_sum += v;
            finite_count += 1;
        }
    }
    let infinite_bands = b - finite_count;
    let mean_db = if finite_count == 0 {
        f64::INFINITY
    } else {
        finite_sum / finite_count as f64
    };
    Ok(PsnrResult {
        mean_db,
        per_band_db,
        infinite_bands,
    })
}

/// Normalized 1-D Gaussian window used separably in both spatial directions.
fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let mut w = [0.0f64; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    for (i, v) in w.iter_mut().enumerate() {
        let d = i as f64 - c;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = w.iter().sum();
    for v in &mut w {
        *v /= s;
    }
    w
}

/// Weighted moving sums over all fully interior window positions, computed
/// with a horizontal then vertical pass.
fn filter_valid(img: &[f64], h: usize, w: usize, win: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let ow = w - SSIM_WINDOW + 1;
    let oh = h - SSIM_WINDOW + 1;
    let mut tmp = vec![0.0f64; h * ow];
    for i in 0..h {
        for j in 0..ow {
            let mut acc = 0.0;
            for (u, &wu) in win.iter().enumerate() {
                acc += wu * img[i * w + j + u];
            }
            tmp[i * ow + j] = acc;
        }
    }
    let mut out = vec![0.0f64; oh * ow];
    for i in 0..oh {
        for j in 0..ow {
            let mut acc = 0.0;
            for (u, &wu) in win.iter().enumerate() {
                acc += wu * tmp[(i + u) * ow + j];
            }
            out[i * ow + j] = acc;
        }
    }
    out
}

/// Mean structural similarity of one band pair over the valid region.
fn ssim_band(est: &[f32], reference: &[f32], h: usize, w: usize, data_range: f64) -> f64 {
    let win = gaussian_window();
    let x: Vec<f64> = est.iter().map(|&v| v as f64).collect();
    let y: Vec<f64> = reference.iter().map(|&v| v as f64).collect();
    let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
    let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
    let xy: Vec<f64> = x.iter().zip(&y).map(|(a, b)| a * b).collect();
    let mu_x = filter_valid(&x, h, w, &win);
    let mu_y = filter_valid(&y, h, w, &win);
    let m_xx = filter_valid(&xx, h, w, &win);
    let m_yy = filter_valid(&yy, h, w, &win);
    let m_xy = filter_valid(&xy, h, w, &win);
    let c1 = (SSIM_K1 * data_range) * (SSIM_K1 * data_range);
    let c2 = (SSIM_K2 * data_range) * (SSIM_K2 * data_range);
    let mut acc = 0.0f64;
    for k in 0..mu_x.len() {
        let vx = m_xx[k] - mu_x[k] * mu_x[k];
        let vy = m_yy[k] - mu_y[k] * mu_y[k];
        let cxy = m_xy[k] - mu_x[k] * mu_y[k];
        let num = (2.0 * mu_x[k] * mu_y[k] + c1) * (2.0 * cxy + c2);
        let den = (mu_x[k] * mu_x[k] + mu_y[k] * mu_y[k] + c1) * (vx + vy + c2);
        acc += num / den;
    }
    acc / mu_x.len() as f64
}

/// Per-band mean structural similarity plus its mean over bands. Requires
/// spatial dimensions of at least the window size.
pub fn ssim(est: &HSICube, reference: &HSICube, data_range: f64) -> Result<(f64, Vec<f64>)> {
    check_pair(est, reference)?;
    check_range(data_range)?;
    let (b, h, w) = est.dims();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::Shape(format!(
            "structural similarity needs spatial dims >= {SSIM_WINDOW}, got ({h}, {w})"
        )));
    }
    let plane = h * w;
    let per_band: Vec<f64> = (0..b)
        .map(|band| {
            let lo = band * plane;
            ssim_band(
                &est.data()[lo..lo + plane],
                &reference.data()[lo..lo + plane],
                h,
                w,
                data_range,
            )
        })
        .collect();
    let mean = per_band.iter().sum::<f64>() / b as f64;
    Ok((mean, per_band))
}

/// Mean spectral angle in radians over all pixels. Spectra are compared as
/// whole band vectors; near-zero spectra contribute a zero angle. Requires at
/// least two bands.
pub fn sam(est: &HSICube, reference: &HSICube) -> Result<f64> {
    check_pair(est, reference)?;
    let (b, h, w) = est.dims();
    if b < 2 {
        return Err(Error::Shape(format!(
            "spectral angle needs at least 2 bands, got {b}"
        )));
    }
    let plane = h * w;
    let mut acc = 0.0f64;
    for p in 0..plane {
        let mut dot = 0.0f64;
        let mut ne = 0.0f64;
        let mut nr = 0.0f64;
        for band in 0..b {
            let a = est.data()[band * plane + p] as f64;
            let r = reference.data()[band * plane + p] as f64;
            dot += a * r;
            ne += a * a;
            nr += r * r;
        }
        let (ne, nr) = (ne.sqrt(), nr.sqrt());
        if ne >= SAM_NORM_EPS && nr >= SAM_NORM_EPS {
            acc += (dot / (ne * nr)).clamp(-1.0, 1.0).acos();
        }
    }
    Ok(acc / plane as f64)
}

/// Per-band and summary metrics of one cube pair, serializable as a
/// delimited text table with one row per band plus one summary row.
#[derive(Clone, Debug)]
pub struct MetricsTable {
    pub per_band_psnr: Vec<f64>,
    pub per_band_ssim: Vec<f64>,
    pub psnr_mean_db: f64,
    pub ssim_mean: f64,
    pub sam_mean_rad: f64,
}

impl MetricsTable {
    pub fn compute(est: &HSICube, reference: &HSICube, data_range: f64) -> Result<Self> {
        let p = psnr(est, reference, data_range)?;
        let (ssim_mean, per_band_ssim) = ssim(est, reference, data_range)?;
        let sam_mean_rad = sam(est, reference)?;
        Ok(MetricsTable {
            per_band_psnr: p.per_band_db,
            per_band_ssim,
            psnr_mean_db: p.mean_db,
            ssim_mean,
            sam_mean_rad,
        })
    }

    pub fn bands(&self) -> usize {
        self.per_band_psnr.len()
    }

    /// Single-line summary in the form printed by the evaluator.
    pub fn summary_line(&self) -> String {
        format!(
            "PSNR={:.4} SSIM={:.4} SAM={:.4}",
            self.psnr_mean_db, self.ssim_mean, self.sam_mean_rad
        )
    }

    /// Space-delimited table: one row per band (`band psnr_db ssim`) and one
    /// summary row (`mean psnr_db ssim sam_rad`). Comment lines start with
    /// `#`. Values use the shortest representation that parses back exactly.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str("# band psnr_db ssim\n");
        for (i, (p, s)) in self.per_band_psnr.iter().zip(&self.per_band_ssim).enumerate() {
            out.push_str(&format!("{i} {p} {s}\n"));
        }
        out.push_str("# summary: mean psnr_db ssim sam_rad\n");
        out.push_str(&format!(
            "mean {} {} {}\n",
            self.psnr_mean_db, self.ssim_mean, self.sam_mean_rad
        ));
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut per_band_psnr = Vec::new();
        let mut per_band_ssim = Vec::new();
        let mut summary: Option<(f64, f64, f64)> = None;
        let parse = |tok: &str| -> Result<f64> {
            tok.parse::<f64>()
                .map_err(|_| Error::Data(format!("bad numeric field '{tok}' in metrics table")))
        };
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields[0] == "mean" {
                if fields.len() != 4 || summary.is_some() {
                    return Err(Error::Data("malformed metrics summary row".into()));
                }
                summary = Some((parse(fields[1])?, parse(fields[2])?, parse(fields[3])?));
                continue;
            }
            if fields.len() != 3 || summary.is_some() {
                return Err(Error::Data(format!("malformed metrics row '{line}'")));
            }
            let band: usize = fields[0]
                .parse()
                .map_err(|_| Error::Data(format!("bad band index '{}'", fields[0])))?;
            if band != per_band_psnr.len() {
                return Err(Error::Data(format!(
                    "band rows out of order: expected {}, got {band}",
                    per_band_psnr.len()
                )));
            }
            per_band_psnr.push(parse(fields[1])?);
            per_band_ssim.push(parse(fields[2])?);
        }
        let (psnr_mean_db, ssim_mean, sam_mean_rad) =
            summary.ok_or_else(|| Error::Data("metrics table missing summary row".into()))?;
        if per_band_psnr.is_empty() {
            return Err(Error::Data("metrics table has no band rows".into()));
        }
        Ok(MetricsTable {
            per_band_psnr,
            per_band_ssim,
            psnr_mean_db,
            ssim_mean,
            sam_mean_rad,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cube::smooth_random_cube;
    use crate::rng::rng_from_seed;
    use rand::Rng;
    use rand_distr::{Distribution, Normal};

    fn random_cube(b: usize, h: usize, w: usize, seed: u64) -> HSICube {
        let mut rng = rng_from_seed(seed);
        let data = (0..b * h * w).map(|_| rng.gen_range(0.0..1.0)).collect();
        HSICube::new(b, h, w, data).unwrap()
    }

    /// Gaussian perturbation without clipping, so sample statistics stay
    /// unbiased for the closed-form checks.
    fn perturb(cube: &HSICube, sigma: f64, seed: u64) -> HSICube {
        let mut rng = rng_from_seed(seed);
        let normal = Normal::new(0.0f64, sigma).unwrap();
        let (b, h, w) = cube.dims();
        let data = cube
            .data()
            .iter()
            .map(|&v| v + normal.sample(&mut rng) as f32)
            .collect();
        HSICube::new(b, h, w, data).unwrap()
    }

    #[test]
    fn psnr_constant_offset_closed_form() {
        let reference = HSICube::new(3, 8, 8, vec![0.5; 192]).unwrap();
        let est = HSICube::new(3, 8, 8, vec![0.6; 192]).unwrap();
        let r = psnr(&est, &reference, 1.0).unwrap();
        assert_eq!(r.infinite_bands, 0);
        for v in &r.per_band_db {
            assert!((v - 20.0).abs() < 1e-4, "got {v}");
        }
        assert!((r.mean_db - 20.0).abs() < 1e-4);
    }

    #[test]
    fn psnr_identical_bands_are_flagged_infinite() {
        let a = random_cube(4, 8, 8, 50);
        let r = psnr(&a, &a, 1.0).unwrap();
        assert_eq!(r.infinite_bands, 4);
        assert!(r.mean_db.is_infinite());
        assert!(r.per_band_db.iter().all(|v| v.is_infinite()));

        // One differing band: the mean covers only that band.
        let mut b = a.clone();
        b.data_mut()[0] += 0.5;
        let r = psnr(&b, &a, 1.0).unwrap();
        assert_eq!(r.infinite_bands, 3);
        assert!(r.mean_db.is_finite());
        assert_eq!(r.mean_db, r.per_band_db[0]);
    }

    #[test]
    fn psnr_monte_carlo_matches_noise_level() {
        let clean = smooth_random_cube(4, 128, 128, 0.25, 0.75, 51).unwrap();
        let noisy = perturb(&clean, 0.1, 52);
        let r = psnr(&noisy, &clean, 1.0).unwrap();
        for v in &r.per_band_db {
            assert!((v - 20.0).abs() < 0.3, "band deviates: {v}");
        }
    }

    #[test]
    fn psnr_decreases_with_noise_level() {
        let clean = smooth_random_cube(3, 32, 32, 0.2, 0.8, 53).unwrap();
        let mut means = Vec::new();
        for (i, sigma255) in [10.0, 30.0, 50.0].iter().enumerate() {
            let sigma = sigma255 / 255.0;
            let mut acc = 0.0;
            for trial in 0..20u64 {
                let noisy = perturb(&clean, sigma, 1000 + 100 * i as u64 + trial);
                acc += psnr(&noisy, &clean, 1.0).unwrap().mean_db;
            }
            means.push(acc / 20.0);
        }
        assert!(means[0] > means[1] && means[1] > means[2], "{means:?}");
    }

    #[test]
    fn ssim_identical_is_exactly_one() {
        let a = random_cube(3, 16, 20, 54);
        let (mean, per_band) = ssim(&a, &a, 1.0).unwrap();
        assert_eq!(mean, 1.0);
        assert!(per_band.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn ssim_constant_images_closed_form() {
        let a = HSICube::new(2, 16, 16, vec![0.2; 512]).unwrap();
        let b = HSICube::new(2, 16, 16, vec![0.4; 512]).unwrap();
        let (mean, _) = ssim(&a, &b, 1.0).unwrap();
        // mu_x = 0.2, mu_y = 0.4, zero variances:
        // (2*0.08 + 1e-4) / (0.04 + 0.16 + 1e-4) = 0.1601 / 0.2001.
        let want = 0.1601 / 0.2001;
        assert!((mean - want).abs() < 1e-9, "got {mean}, want {want}");
    }

    #[test]
    fn ssim_matches_windowed_oracle() {
        let a = random_cube(2, 14, 17, 55);
        let b = perturb(&a, 0.05, 56);
        let (_, got) = ssim(&a, &b, 1.0).unwrap();

        // Brute-force: explicit 2-D window sums at every valid position.
        let win = gaussian_window();
        let (bands, h, w) = a.dims();
        let plane = h * w;
        let c1 = (SSIM_K1 * SSIM_K1) as f64;
        let c2 = (SSIM_K2 * SSIM_K2) as f64;
        for band in 0..bands {
            let xs = &a.data()[band * plane..(band + 1) * plane];
            let ys = &b.data()[band * plane..(band + 1) * plane];
            let mut acc = 0.0f64;
            let mut count = 0usize;
            for i0 in 0..=h - SSIM_WINDOW {
                for j0 in 0..=w - SSIM_WINDOW {
                    let (mut mx, mut my, mut mxx, mut myy, mut mxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                    for u in 0..SSIM_WINDOW {
                        for v in 0..SSIM_WINDOW {
                            let wgt = win[u] * win[v];
                            let x = xs[(i0 + u) * w + j0 + v] as f64;
                            let y = ys[(i0 + u) * w + j0 + v] as f64;
                            mx += wgt * x;
                            my += wgt * y;
                            mxx += wgt * x * x;
                            myy += wgt * y * y;
                            mxy += wgt * x * y;
                        }
                    }
                    let vx = mxx - mx * mx;
                    let vy = myy - my * my;
                    let cxy = mxy - mx * my;
                    acc += ((2.0 * mx * my + c1) * (2.0 * cxy + c2))
                        / ((mx * mx + my * my + c1) * (vx + vy + c2));
                    count += 1;
                }
            }
            let want = acc / count as f64;
            assert!(
                (got[band] - want).abs() < 1e-6,
                "band {band}: {} vs {want}",
                got[band]
            );
        }
    }

    #[test]
    fn ssim_stays_within_bounds() {
        for seed in 60..70u64 {
            let a = random_cube(2, 12, 12, seed);
            let b = random_cube(2, 12, 12, seed + 1000);
            let (_, per_band) = ssim(&a, &b, 1.0).unwrap();
            for v in per_band {
                assert!((-1.0..=1.0).contains(&v), "out of range: {v}");
            }
        }
    }

    #[test]
    fn ssim_rejects_small_images() {
        let a = random_cube(2, 10, 16, 57);
        assert!(matches!(ssim(&a, &a, 1.0), Err(Error::Shape(_))));
    }

    #[test]
    fn sam_identities_and_angles() {
        // acos near a cosine of 1 resolves to ~1e-8, not exactly zero.
        let a = random_cube(4, 8, 8, 58);
        assert!(sam(&a, &a).unwrap() < 1e-7);

        // Parallel spectra at a different magnitude still give a zero angle.
        let scaled =
            HSICube::new(4, 8, 8, a.data().iter().map(|v| v * 2.0).collect()).unwrap();
        assert!(sam(&scaled, &a).unwrap() < 1e-6);

        // Orthogonal two-band spectra: everywhere (1,0) vs (0,1).
        let e = HSICube::new(2, 4, 4, [vec![1.0; 16], vec![0.0; 16]].concat()).unwrap();
        let r = HSICube::new(2, 4, 4, [vec![0.0; 16], vec![1.0; 16]].concat()).unwrap();
        assert!((sam(&e, &r).unwrap() - std::f64::consts::FRAC_PI_2).abs() < 1e-12);
    }

    #[test]
    fn sam_scale_invariance_and_zero_spectra() {
        let a = random_cube(4, 8, 8, 59);
        let b = perturb(&a, 0.05, 60);
        let base = sam(&a, &b).unwrap();
        let scaled =
            HSICube::new(4, 8, 8, a.data().iter().map(|v| v * 3.7).collect()).unwrap();
        assert!((sam(&scaled, &b).unwrap() - base).abs() < 1e-6);

        // A zero spectrum contributes zero angle rather than NaN.
        let z = HSICube::new(2, 2, 2, vec![0.0; 8]).unwrap();
        let r = random_cube(2, 2, 2, 61);
        assert_eq!(sam(&z, &r).unwrap(), 0.0);
    }

    #[test]
    fn sam_requires_two_bands() {
        let a = random_cube(1, 8, 8, 62);
        assert!(matches!(sam(&a, &a), Err(Error::Shape(_))));
    }

    #[test]
    fn metrics_disagree_on_shape_mismatch() {
        let a = random_cube(2, 12, 12, 63);
        let b = random_cube(2, 12, 14, 64);
        assert!(matches!(psnr(&a, &b, 1.0), Err(Error::Shape(_))));
        assert!(matches!(ssim(&a, &b, 1.0), Err(Error::Shape(_))));
        assert!(matches!(sam(&a, &b), Err(Error::Shape(_))));
        assert!(matches!(psnr(&a, &a, 0.0), Err(Error::Param(_))));
    }

    #[test]
    fn table_round_trips_and_counts_rows() {
        let clean = smooth_random_cube(5, 16, 16, 0.2, 0.8, 65).unwrap();
        let noisy = perturb(&clean, 0.08, 66);
        let table = MetricsTable::compute(&noisy, &clean, 1.0).unwrap();
        assert_eq!(table.bands(), 5);
        assert!(
            (table.psnr_mean_db
                - table.per_band_psnr.iter().sum::<f64>() / table.bands() as f64)
                .abs()
                < 1e-12
        );

        let text = table.to_text();
        let rows = text
            .lines()
            .filter(|l| !l.trim().is_empty() && !l.starts_with('#'))
            .count();
        assert_eq!(rows, table.bands() + 1);

        let back = MetricsTable::from_text(&text).unwrap();
        assert_eq!(back.per_band_psnr, table.per_band_psnr);
        assert_eq!(back.per_band_ssim, table.per_band_ssim);
        assert_eq!(back.psnr_mean_db, table.psnr_mean_db);
        assert_eq!(back.ssim_mean, table.ssim_mean);
        assert_eq!(back.sam_mean_rad, table.sam_mean_rad);
    }

    #[test]
    fn table_serializes_infinities_and_summary_formats() {
        let a = random_cube(3, 16, 16, 67);
        let table = MetricsTable::compute(&a, &a, 1.0).unwrap();
        assert_eq!(table.summary_line(), "PSNR=inf SSIM=1.0000 SAM=0.0000");
        let back = MetricsTable::from_text(&table.to_text()).unwrap();
        assert!(back.psnr_mean_db.is_infinite());
        assert!(back.per_band_psnr.iter().all(|v| v.is_infinite()));
    }

    #[test]
    fn table_rejects_malformed_text() {
        assert!(MetricsTable::from_text("").is_err());
        assert!(MetricsTable::from_text("0 1.0 0.9\n").is_err()); // no summary
        assert!(MetricsTable::from_text("1 1.0 0.9\nmean 1 1 1\n").is_err()); // bad index
        assert!(MetricsTable::from_text("0 x 0.9\nmean 1 1 1\n").is_err());
        assert!(MetricsTable::from_text("mean 1 1 1\n").is_err()); // no bands
    }
}
