//! Chart emission as plain-text SVG.
//!
//! Each chart is a standalone SVG document whose polylines carry the raw
//! data in `data-label` / `data-points` attributes alongside the rendered
//! pixel coordinates, and whose root carries the axis ranges in `data-*`
//! attributes. Charts therefore render in any SVG viewer and can be parsed
//! back losslessly for verification.

use crate::error::{Error, Result};
use crate::metrics::MetricsTable;

/// Overall canvas size in pixels.
pub const CANVAS_W: f64 = 640.0;
pub const CANVAS_H: f64 = 400.0;
/// Plot rectangle (left, top, width, height) inside the canvas.
pub const PLOT_X: f64 = 70.0;
pub const PLOT_Y: f64 = 30.0;
pub const PLOT_W: f64 = 540.0;
pub const PLOT_H: f64 = 310.0;

const STROKES: [&str; 6] = [
    "#1b6ca8", "#d1495b", "#66a182", "#8d6a9f", "#edae49", "#30323d",
];

/// One plotted line.
#[derive(Clone, Debug, PartialEq)]
pub struct Series {
    pub label: String,
    pub xs: Vec<f64>,
    pub ys: Vec<f64>,
}

/// A titled chart with labeled axes and any number of series.
#[derive(Clone, Debug, PartialEq)]
pub struct Chart {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub series: Vec<Series>,
}

impl Chart {
    pub fn new(title: &str, x_label: &str, y_label: &str) -> Self {
        Chart {
            title: title.into(),
            x_label: x_label.into(),
            y_label: y_label.into(),
            series: Vec::new(),
        }
    }

    /// Add a series; non-finite points are dropped (they cannot be drawn).
    pub fn push_series(&mut self, label: &str, xs: &[f64], ys: &[f64]) -> Result<()> {
        if xs.len() != ys.len() {
            return Err(Error::Shape(format!(
                "series '{label}' has {} x values but {} y values",
                xs.len(),
                ys.len()
            )));
        }
        let (mut fx, mut fy) = (Vec::new(), Vec::new());
        for (&x, &y) in xs.iter().zip(ys) {
            if x.is_finite() && y.is_finite() {
                fx.push(x);
                fy.push(y);
            }
        }
        self.series.push(Series {
            label: label.into(),
            xs: fx,
            ys: fy,
        });
        Ok(())
    }

    /// Axis ranges spanning every finite data point; `(0, 1)` axes when
    /// there is no data at all.
    pub fn ranges(&self) -> ((f64, f64), (f64, f64)) {
        let (mut xmin, mut xmax) = (f64::INFINITY, f64::NEG_INFINITY);
        let (mut ymin, mut ymax) = (f64::INFINITY, f64::NEG_INFINITY);
        for s in &self.series {
            for (&x, &y) in s.xs.iter().zip(&s.ys) {
                xmin = xmin.min(x);
                xmax = xmax.max(x);
                ymin = ymin.min(y);
                ymax = ymax.max(y);
            }
        }
        if !xmin.is_finite() {
            return ((0.0, 1.0), (0.0, 1.0));
        }
        ((xmin, xmax), (ymin, ymax))
    }

    pub fn to_svg(&self) -> String {
        let ((xmin, xmax), (ymin, ymax)) = self.ranges();
        let sx = |x: f64| {
            if xmax > xmin {
                PLOT_X + (x - xmin) / (xmax - xmin) * PLOT_W
            } else {
                PLOT_X + PLOT_W / 2.0
            }
        };
        let sy = |y: f64| {
            if ymax > ymin {
                PLOT_Y + PLOT_H - (y - ymin) / (ymax - ymin) * PLOT_H
            } else {
                PLOT_Y + PLOT_H / 2.0
            }
        };
        let mut out = String::new();
        out.push_str(&format!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" viewBox=\"0 0 {CANVAS_W} {CANVAS_H}\" \
             data-x-min=\"{xmin}\" data-x-max=\"{xmax}\" data-y-min=\"{ymin}\" data-y-max=\"{ymax}\">\n"
        ));
        out.push_str(&format!("  <title>{}</title>\n", escape(&self.title)));
        out.push_str(&format!(
            "  <text x=\"{:.1}\" y=\"18\" text-anchor=\"middle\" font-size=\"14\">{}</text>\n",
            PLOT_X + PLOT_W / 2.0,
            escape(&self.title)
        ));
        out.push_str(&format!(
            "  <rect x=\"{PLOT_X}\" y=\"{PLOT_Y}\" width=\"{PLOT_W}\" height=\"{PLOT_H}\" \
             fill=\"none\" stroke=\"#30323d\"/>\n"
        ));
        // Axis labels and the extreme tick labels.
        out.push_str(&format!(
            "  <text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\" font-size=\"12\">{}</text>\n",
            PLOT_X + PLOT_W / 2.0,
            CANVAS_H - 8.0,
            escape(&self.x_label)
        ));
        out.push_str(&format!(
            "  <text x=\"16\" y=\"{:.1}\" text-anchor=\"middle\" font-size=\"12\" \
             transform=\"rotate(-90 16 {:.1})\">{}</text>\n",
            PLOT_Y + PLOT_H / 2.0,
            PLOT_Y + PLOT_H / 2.0,
            escape(&self.y_label)
        ));
        for (x, anchor, v) in [
            (PLOT_X, "start", xmin),
            (PLOT_X + PLOT_W, "end", xmax),
        ] {
            out.push_str(&format!(
                "  <text x=\"{x:.1}\" y=\"{:.1}\" text-anchor=\"{anchor}\" font-size=\"11\">{}</text>\n",
                PLOT_Y + PLOT_H + 16.0,
                short(v)
            ));
        }
        for (y, v) in [(PLOT_Y + PLOT_H, ymin), (PLOT_Y + 10.0, ymax)] {
            out.push_str(&format!(
                "  <text x=\"{:.1}\" y=\"{y:.1}\" text-anchor=\"end\" font-size=\"11\">{}</text>\n",
                PLOT_X - 6.0,
                short(v)
            ));
        }
        for (i, s) in self.series.iter().enumerate() {
            let stroke = STROKES[i % STROKES.len()];
            let pixels: Vec<String> = s
                .xs
                .iter()
                .zip(&s.ys)
                .map(|(&x, &y)| format!("{:.2},{:.2}", sx(x), sy(y)))
                .collect();
            let data: Vec<String> = s
                .xs
                .iter()
                .zip(&s.ys)
                .map(|(&x, &y)| format!("{x}:{y}"))
                .collect();
            out.push_str(&format!(
                "  <polyline fill=\"none\" stroke=\"{stroke}\" stroke-width=\"1.5\" \
                 data-label=\"{}\" data-points=\"{}\" points=\"{}\"/>\n",
                escape(&s.label),
                data.join(" "),
                pixels.join(" ")
            ));
            // Legend entry.
            out.push_str(&format!(
                "  <text x=\"{:.1}\" y=\"{:.1}\" font-size=\"11\" fill=\"{stroke}\">{}</text>\n",
                PLOT_X + 8.0,
                PLOT_Y + 16.0 + 14.0 * i as f64,
                escape(&s.label)
            ));
        }
        out.push_str("</svg>\n");
        out
    }

    /// Parse a chart emitted by [`Chart::to_svg`]. Data round-trips exactly;
    /// pixel coordinates are ignored.
    pub fn from_svg(text: &str) -> Result<Chart> {
        if !text.trim_start().starts_with("<svg") {
            return Err(Error::Format("not an SVG chart".into()));
        }
        let title = between(text, "<title>", "</title>")
            .map(|s| unescape(&s))
            .ok_or_else(|| Error::Format("chart has no title".into()))?;
        let mut chart = Chart::new(&title, "", "");
        // Axis labels: first two standalone <text> elements carry x then y.
        let mut labels = Vec::new();
        for tag in text.split('<').filter(|t| t.starts_with("text ")) {
            if let Some(body) = tag.split('>').nth(1) {
                labels.push(unescape(body));
            }
        }
        // labels[0] is the title banner; [1] and [2] are the axis labels.
        if labels.len() >= 3 {
            chart.x_label = labels[1].clone();
            chart.y_label = labels[2].clone();
        }
        for tag in text.split('<').filter(|t| t.starts_with("polyline ")) {
            let label = attr(tag, "data-label")
                .map(unescape)
                .ok_or_else(|| Error::Format("polyline without data-label".into()))?;
            let raw = attr(tag, "data-points")
                .ok_or_else(|| Error::Format("polyline without data-points".into()))?;
            let (mut xs, mut ys) = (Vec::new(), Vec::new());
            for pair in raw.split_whitespace() {
                let (x, y) = pair
                    .split_once(':')
                    .ok_or_else(|| Error::Format(format!("bad data point '{pair}'")))?;
                xs.push(parse_f64(x)?);
                ys.push(parse_f64(y)?);
            }
            chart.series.push(Series { label, xs, ys });
        }
        Ok(chart)
    }
}

fn parse_f64(tok: &str) -> Result<f64> {
    tok.parse::<f64>()
        .map_err(|_| Error::Format(format!("bad numeric value '{tok}' in chart")))
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

fn unescape(s: &str) -> String {
    s.replace("&quot;", "\"")
        .replace("&gt;", ">")
        .replace("&lt;", "<")
        .replace("&amp;", "&")
}

/// Compact tick label.
fn short(v: f64) -> String {
    if v == 0.0 || (v.abs() >= 1e-3 && v.abs() < 1e5) {
        let s = format!("{v:.3}");
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    } else {
        format!("{v:.2e}")
    }
}

fn between<'a>(text: &'a str, open: &str, close: &str) -> Option<String> {
    let start = text.find(open)? + open.len();
    let end = text[start..].find(close)? + start;
    Some(text[start..end].to_string())
}

fn attr<'a>(tag: &'a str, name: &str) -> Option<&'a str> {
    // Anchor on the preceding space so `points` does not match inside
    // `data-points`.
    let probe = format!(" {name}=\"");
    let start = tag.find(&probe)? + probe.len();
    let end = tag[start..].find('"')? + start;
    Some(&tag[start..end])
}

/// Per-band PSNR and SSIM charts of one metrics table.
pub fn metrics_charts(table: &MetricsTable) -> (Chart, Chart) {
    let bands: Vec<f64> = (0..table.bands()).map(|b| b as f64).collect();
    let mut psnr = Chart::new("PSNR per band", "band", "psnr_db");
    psnr.push_series("psnr", &bands, &table.per_band_psnr).unwrap();
    let mut ssim = Chart::new("SSIM per band", "band", "ssim");
    ssim.push_series("ssim", &bands, &table.per_band_ssim).unwrap();
    (psnr, ssim)
}

/// One parsed training-log line.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainLogRecord {
    pub stage: String,
    pub epoch: usize,
    pub lr: f64,
    pub rec: f64,
    pub grad: f64,
    pub total: f64,
}

/// Parse `stage epoch lr loss_rec loss_grad loss_total` lines; blank lines
/// and `#` comments are skipped.
pub fn parse_train_log(text: &str) -> Result<Vec<TrainLogRecord>> {
    let mut out = Vec::new();
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() != 6 {
            return Err(Error::Data(format!(
                "training log line has {} fields, expected 6: '{line}'",
                f.len()
            )));
        }
        out.push(TrainLogRecord {
            stage: f[0].to_string(),
            epoch: f[1]
                .parse()
                .map_err(|_| Error::Data(format!("bad epoch '{}'", f[1])))?,
            lr: parse_field(f[2])?,
            rec: parse_field(f[3])?,
            grad: parse_field(f[4])?,
            total: parse_field(f[5])?,
        });
    }
    Ok(out)
}

fn parse_field(tok: &str) -> Result<f64> {
    tok.parse::<f64>()
        .map_err(|_| Error::Data(format!("bad numeric field '{tok}' in training log")))
}

/// Overlay the total-loss curves of several training logs; x is the running
/// line index of each log so staged runs remain comparable end to end.
pub fn loss_overlay_chart(logs: &[(String, Vec<TrainLogRecord>)]) -> Result<Chart> {
    if logs.is_empty() {
        return Err(Error::Data("no training logs to plot".into()));
    }
    let mut chart = Chart::new("Training loss", "epoch (cumulative)", "loss_total");
    for (name, records) in logs {
        let xs: Vec<f64> = (0..records.len()).map(|i| i as f64).collect();
        let ys: Vec<f64> = records.iter().map(|r| r.total).collect();
        chart.push_series(name, &xs, &ys)?;
    }
    Ok(chart)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_chart() -> Chart {
        let mut c = Chart::new("demo <title> & more", "band", "psnr_db");
        c.push_series("a", &[0.0, 1.0, 2.0], &[30.5, 31.25, 29.75]).unwrap();
        c.push_series("b \"q\"", &[0.0, 1.0, 2.0], &[28.0, 28.5, 28.25]).unwrap();
        c
    }

    #[test]
    fn axes_cover_data_extremes() {
        let c = sample_chart();
        let ((xmin, xmax), (ymin, ymax)) = c.ranges();
        assert_eq!((xmin, xmax), (0.0, 2.0));
        assert_eq!((ymin, ymax), (28.0, 31.25));
        let svg = c.to_svg();
        assert!(svg.contains("data-x-min=\"0\""));
        assert!(svg.contains("data-x-max=\"2\""));
        assert!(svg.contains("data-y-min=\"28\""));
        assert!(svg.contains("data-y-max=\"31.25\""));
    }

    #[test]
    fn pixel_coordinates_stay_inside_plot_rect() {
        let svg = sample_chart().to_svg();
        for tag in svg.split('<').filter(|t| t.starts_with("polyline ")) {
            for pair in attr(tag, "points").unwrap().split_whitespace() {
                let (x, y) = pair.split_once(',').unwrap();
                let (x, y): (f64, f64) = (x.parse().unwrap(), y.parse().unwrap());
                assert!((PLOT_X..=PLOT_X + PLOT_W).contains(&x), "x {x}");
                assert!((PLOT_Y..=PLOT_Y + PLOT_H).contains(&y), "y {y}");
            }
        }
    }

    #[test]
    fn svg_round_trips_data_exactly() {
        let c = sample_chart();
        let back = Chart::from_svg(&c.to_svg()).unwrap();
        assert_eq!(back.title, c.title);
        assert_eq!(back.x_label, "band");
        assert_eq!(back.y_label, "psnr_db");
        assert_eq!(back.series, c.series);
    }

    #[test]
    fn degenerate_and_empty_charts_still_emit() {
        // Single point: degenerate ranges centered in the plot.
        let mut c = Chart::new("one", "x", "y");
        c.push_series("p", &[3.0], &[5.0]).unwrap();
        let svg = c.to_svg();
        let back = Chart::from_svg(&svg).unwrap();
        assert_eq!(back.series[0].xs, vec![3.0]);

        // Non-finite points are dropped at insertion.
        let mut c = Chart::new("inf", "x", "y");
        c.push_series("p", &[0.0, 1.0, 2.0], &[1.0, f64::INFINITY, 3.0]).unwrap();
        assert_eq!(c.series[0].xs, vec![0.0, 2.0]);
        let back = Chart::from_svg(&c.to_svg()).unwrap();
        assert_eq!(back.series[0].ys, vec![1.0, 3.0]);
    }

    #[test]
    fn metrics_tables_become_two_charts() {
        let table = MetricsTable {
            per_band_psnr: vec![30.0, f64::INFINITY, 32.0],
            per_band_ssim: vec![0.9, 1.0, 0.92],
            psnr_mean_db: 31.0,
            ssim_mean: 0.94,
            sam_mean_rad: 0.05,
        };
        let (psnr, ssim) = metrics_charts(&table);
        assert_eq!(psnr.series[0].xs, vec![0.0, 2.0]); // inf band dropped
        assert_eq!(ssim.series[0].ys, vec![0.9, 1.0, 0.92]);
        assert!(psnr.to_svg().contains("psnr_db"));
        assert!(ssim.to_svg().contains("ssim"));
    }

    #[test]
    fn train_log_parses_and_overlays() {
        let log_a = "sigma30 0 0.0001 0.09 0.01 0.0901\nsigma30 1 0.000097 0.07 0.008 0.07008\n";
        let log_b = "# comment\ncomplex 0 0.0001 0.2 0.02 0.2002\n\n";
        let a = parse_train_log(log_a).unwrap();
        assert_eq!(a.len(), 2);
        assert_eq!(a[0].stage, "sigma30");
        assert_eq!(a[1].epoch, 1);
        assert!((a[1].total - 0.07008).abs() < 1e-12);
        let b = parse_train_log(log_b).unwrap();
        assert_eq!(b.len(), 1);

        let chart = loss_overlay_chart(&[("run_a".into(), a), ("run_b".into(), b)]).unwrap();
        assert_eq!(chart.series.len(), 2);
        let back = Chart::from_svg(&chart.to_svg()).unwrap();
        assert_eq!(back.series.len(), 2);
        assert_eq!(back.series[0].label, "run_a");
        assert_eq!(back.series[0].ys, chart.series[0].ys);
    }

    #[test]
    fn malformed_inputs_are_rejected() {
        assert!(Chart::from_svg("not svg").is_err());
        assert!(parse_train_log("sigma30 0 0.1 0.2").is_err());
        assert!(parse_train_log("sigma30 x 0.1 0.2 0.3 0.4").is_err());
        assert!(loss_overlay_chart(&[]).is_err());
        let mut c = Chart::new("t", "x", "y");
        assert!(c.push_series("bad", &[1.0], &[1.0, 2.0]).is_err());
    }
}
