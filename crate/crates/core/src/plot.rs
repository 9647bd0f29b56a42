//! Loss-curve plots from a metrics CSV and tap-grid images.

use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use image::{GrayImage, Luma, RgbImage};
use plotters::prelude::*;

use crate::data::PairedSample;
use crate::generator::Generator;
use crate::raster::ImageTensor;
use crate::trainer::METRICS_HEADER;
use crate::{Error, Result};

/// One parsed row of a metrics CSV.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricsRow {
    pub epoch: usize,
    pub l_dis_e: f64,
    pub l_dis_d: f64,
    pub l_g_dis: f64,
    pub l_g_l1: f64,
    pub l_g_total: f64,
    pub val_f1: f64,
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>> {
    let mut reader = csv::Reader::from_path(path)?;
    let header: Vec<String> = reader.headers()?.iter().map(str::to_string).collect();
    if header.join(",") != METRICS_HEADER {
        return Err(Error::Plot(format!(
            "{} does not have the metrics header {METRICS_HEADER}",
            path.display()
        )));
    }
    let mut rows = Vec::new();
    for (line, record) in reader.records().enumerate() {
        let record = record?;
        let num = |i: usize| -> Result<f64> {
            record[i]
                .parse::<f64>()
                .map_err(|_| Error::Plot(format!("row {}: {:?} is not a number", line + 1, &record[i])))
        };
        rows.push(MetricsRow {
            epoch: num(0)? as usize,
            l_dis_e: num(1)?,
            l_dis_d: num(2)?,
            l_g_dis: num(3)?,
            l_g_l1: num(4)?,
            l_g_total: num(5)?,
            val_f1: num(6)?,
        });
    }
    Ok(rows)
}

const FONT_PATHS: &[&str] = &[
    "/usr/share/fonts/truetype/dejavu/DejaVuSans.ttf",
    "/usr/share/fonts/dejavu/DejaVuSans.ttf",
    "/usr/share/fonts/TTF/DejaVuSans.ttf",
    "/Library/Fonts/Arial.ttf",
    "C:\\Windows\\Fonts\\arial.ttf",
];

/// Register a system sans-serif font once; false when none was found, in
/// which case plots are drawn without text.
fn font_available() -> bool {
    static FONT: OnceLock<bool> = OnceLock::new();
    *FONT.get_or_init(|| {
        let path = std::env::var_os("MSGDD_FONT")
            .map(PathBuf::from)
            .into_iter()
            .chain(FONT_PATHS.iter().map(PathBuf::from))
            .find(|p| p.is_file());
        let Some(bytes) = path.and_then(|p| std::fs::read(p).ok()) else {
            return false;
        };
        let bytes: &'static [u8] = Box::leak(bytes.into_boxed_slice());
        plotters::style::register_font("sans-serif", FontStyle::Normal, bytes).is_ok()
    })
}

const BLUE: RGBColor = RGBColor(31, 119, 180);
const ORANGE: RGBColor = RGBColor(255, 127, 14);

fn plot_err(e: impl std::fmt::Display) -> Error {
    Error::Plot(e.to_string())
}

/// Draw the two generator losses per epoch: adversarial in blue, L1 in orange.
pub fn loss_curve(rows: &[MetricsRow], width: u32, height: u32) -> Result<RgbImage> {
    if rows.is_empty() {
        return Err(Error::Plot("metrics file has no rows".into()));
    }
    let first = rows[0].epoch as f64;
    let last = rows[rows.len() - 1].epoch as f64;
    let x_range = if last > first {
        first..last
    } else {
        first - 0.5..first + 0.5
    };
    let top = rows
        .iter()
        .flat_map(|r| [r.l_g_dis, r.l_g_l1])
        .filter(|v| v.is_finite())
        .fold(0.0f64, f64::max)
        .max(1e-6)
        * 1.05;
    let mut buffer = vec![0u8; (width * height * 3) as usize];
    {
        let root = BitMapBackend::with_buffer(&mut buffer, (width, height)).into_drawing_area();
        root.fill(&WHITE).map_err(plot_err)?;
        let text = font_available();
        let mut builder = ChartBuilder::on(&root);
        builder.margin(12);
        if text {
            builder
                .caption("generator losses", ("sans-serif", 20))
                .x_label_area_size(36)
                .y_label_area_size(52);
        }
        let mut chart = builder.build_cartesian_2d(x_range, 0.0..top).map_err(plot_err)?;
        let mut mesh = chart.configure_mesh();
        if text {
            mesh.x_desc("epoch").y_desc("loss");
        } else {
            mesh.disable_x_mesh().disable_y_mesh().x_labels(0).y_labels(0);
        }
        mesh.draw().map_err(plot_err)?;
        for (color, label, pick) in [
            (
                BLUE,
                "adversarial",
                (|r: &MetricsRow| r.l_g_dis) as fn(&MetricsRow) -> f64,
            ),
            (ORANGE, "L1", |r: &MetricsRow| r.l_g_l1),
        ] {
            let series = chart
                .draw_series(LineSeries::new(
                    rows.iter().map(|r| (r.epoch as f64, pick(r))),
                    color.stroke_width(2),
                ))
                .map_err(plot_err)?;
            if text {
                series
                    .label(label)
                    .legend(move |(x, y)| PathElement::new([(x, y), (x + 18, y)], color.stroke_width(2)));
            }
        }
        if text {
            chart
                .configure_series_labels()
                .background_style(WHITE.mix(0.8))
                .border_style(BLACK)
                .draw()
                .map_err(plot_err)?;
        }
        root.present().map_err(plot_err)?;
    }
    RgbImage::from_raw(width, height, buffer).ok_or_else(|| Error::Plot("bitmap size mismatch".into()))
}

/// Read `metrics` and write its loss curve as a PNG at `out`.
pub fn plot_metrics(metrics: &Path, out: &Path) -> Result<()> {
    let rows = read_metrics(metrics)?;
    let img = loss_curve(&rows, 800, 480)?;
    save_png(&img, out)
}

fn save_png<P, C>(img: &image::ImageBuffer<P, C>, out: &Path) -> Result<()>
where
    P: image::PixelWithColorType,
    [P::Subpixel]: image::EncodableLayout,
    C: std::ops::Deref<Target = [P::Subpixel]>,
{
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(Error::io(format!("creating {}", dir.display())))?;
    }
    img.save(out).map_err(|source| Error::Image {
        path: out.to_path_buf(),
        source,
    })
}

const GAP: usize = 2;

fn blit(canvas: &mut GrayImage, img: &ImageTensor, x0: usize, y0: usize, size: usize) {
    let factor = size / img.height();
    for r in 0..size {
        for c in 0..size {
            let v = img.get(0, r / factor, c / factor);
            let p = ((v + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8;
            canvas.put_pixel((x0 + c) as u32, (y0 + r) as u32, Luma([p]));
        }
    }
}

/// One row per sample: input, encoder taps, decoder taps, output and ground
/// truth, every panel scaled to full resolution with nearest-neighbour.
pub fn tap_grid(generator: &Generator, samples: &[PairedSample]) -> Result<GrayImage> {
    let first = samples
        .first()
        .ok_or_else(|| Error::Plot("tap grid needs at least one sample".into()))?;
    let size = first.input.height();
    let panels = 2 * generator.scales() + 3;
    let width = panels * size + (panels - 1) * GAP;
    let height = samples.len() * size + (samples.len() - 1) * GAP;
    let mut canvas = GrayImage::from_pixel(width as u32, height as u32, Luma([255]));
    for (row, sample) in samples.iter().enumerate() {
        let out = generator.generate(&sample.input)?;
        let mut images: Vec<&ImageTensor> = vec![&sample.input];
        images.extend(out.encoder_taps.levels());
        images.extend(out.decoder_taps.levels());
        images.push(&out.output);
        images.push(&sample.target);
        for (col, img) in images.into_iter().enumerate() {
            blit(&mut canvas, img, col * (size + GAP), row * (size + GAP), size);
        }
    }
    Ok(canvas)
}

pub fn save_tap_grid(generator: &Generator, samples: &[PairedSample], out: &Path) -> Result<()> {
    save_png(&tap_grid(generator, samples)?, out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelConfig;
    use crate::data::synth_shapes;
    use crate::rng::seeded_rng;

    #[test]
    fn tap_grid_has_one_panel_per_image() {
        let model = ModelConfig {
            image_size: 16,
            scales: 2,
            base_channels: 2,
            ..ModelConfig::default()
        };
        let g = Generator::new(&model, &mut seeded_rng(0));
        let samples = synth_shapes(2, 16, 1).unwrap();
        let grid = tap_grid(&g, &samples).unwrap();
        assert_eq!(grid.dimensions(), ((7 * 16 + 6 * 2) as u32, (2 * 16 + 2) as u32));
    }

    #[test]
    fn loss_curve_uses_both_colors() {
        let rows: Vec<MetricsRow> = (1..=5)
            .map(|e| MetricsRow {
                epoch: e,
                l_dis_e: 0.2,
                l_dis_d: 0.2,
                l_g_dis: 0.5 / e as f64,
                l_g_l1: 1.0 / e as f64,
                l_g_total: 0.0,
                val_f1: 0.5,
            })
            .collect();
        let img = loss_curve(&rows, 320, 240).unwrap();
        let has = |c: RGBColor| img.pixels().any(|p| p.0 == [c.0, c.1, c.2]);
        assert!(has(BLUE) && has(ORANGE));
    }
}
