//! Minimal static charts. Axes and gridlines only; values are listed
//! next to each plot in the report tables.

use super::HarnessError;
use image::{Rgb, RgbImage};
use imageproc::drawing::{draw_filled_rect_mut, draw_hollow_rect_mut, draw_line_segment_mut};
use imageproc::rect::Rect;
use std::path::Path;

const WIDTH: u32 = 640;
const HEIGHT: u32 = 400;
const MARGIN: f32 = 40.0;
const BACKGROUND: Rgb<u8> = Rgb([255, 255, 255]);
const AXIS: Rgb<u8> = Rgb([40, 40, 40]);
const GRID: Rgb<u8> = Rgb([225, 225, 225]);
const PALETTE: [Rgb<u8>; 6] = [
    Rgb([31, 119, 180]),
    Rgb([255, 127, 14]),
    Rgb([44, 160, 44]),
    Rgb([214, 39, 40]),
    Rgb([148, 103, 189]),
    Rgb([140, 86, 75]),
];

fn canvas() -> RgbImage {
    let mut img = RgbImage::from_pixel(WIDTH, HEIGHT, BACKGROUND);
    let (x0, y0, x1, y1) = frame();
    for i in 1..5 {
        let y = y0 + (y1 - y0) * i as f32 / 5.0;
        draw_line_segment_mut(&mut img, (x0, y), (x1, y), GRID);
    }
    draw_hollow_rect_mut(
        &mut img,
        Rect::at(x0 as i32, y0 as i32).of_size((x1 - x0) as u32 + 1, (y1 - y0) as u32 + 1),
        AXIS,
    );
    img
}

/// Plot area as (left, top, right, bottom).
fn frame() -> (f32, f32, f32, f32) {
    (
        MARGIN,
        MARGIN / 2.0,
        WIDTH as f32 - MARGIN / 2.0,
        HEIGHT as f32 - MARGIN,
    )
}

fn range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values
        .filter(|v| v.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    if !lo.is_finite() {
        (0.0, 1.0)
    } else if hi - lo < 1e-12 {
        (lo - 0.5, hi + 0.5)
    } else {
        (lo, hi)
    }
}

fn save(img: &RgbImage, path: &Path) -> Result<(), HarnessError> {
    img.save(path).map_err(|e| HarnessError::Plot {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

/// One polyline per series of (x, y) points, sharing both axes.
pub fn line_chart(series: &[Vec<(f64, f64)>], path: &Path) -> Result<(), HarnessError> {
    let mut img = canvas();
    let (x0, y0, x1, y1) = frame();
    let (xmin, xmax) = range(series.iter().flatten().map(|p| p.0));
    let (ymin, ymax) = range(series.iter().flatten().map(|p| p.1));
    let to_px = |(x, y): (f64, f64)| {
        (
            x0 + ((x - xmin) / (xmax - xmin)) as f32 * (x1 - x0),
            y1 - ((y - ymin) / (ymax - ymin)) as f32 * (y1 - y0),
        )
    };
    for (i, points) in series.iter().enumerate() {
        let colour = PALETTE[i % PALETTE.len()];
        let finite: Vec<_> = points.iter().filter(|p| p.0.is_finite() && p.1.is_finite()).collect();
        for pair in finite.windows(2) {
            draw_line_segment_mut(&mut img, to_px(*pair[0]), to_px(*pair[1]), colour);
        }
    }
    save(&img, path)
}

/// Bars on a [0, 1] axis, e.g. per-seed Dice.
pub fn unit_bar_chart(values: &[f64], path: &Path) -> Result<(), HarnessError> {
    let mut img = canvas();
    let (x0, y0, x1, y1) = frame();
    let n = values.len().max(1) as f32;
    let slot = (x1 - x0) / n;
    for (i, &v) in values.iter().enumerate() {
        let h = (v.clamp(0.0, 1.0) as f32 * (y1 - y0)).round() as u32;
        if h == 0 {
            continue;
        }
        let left = x0 + slot * (i as f32 + 0.2);
        let rect = Rect::at(left as i32, (y1 as u32 - h) as i32).of_size((slot * 0.6).max(1.0) as u32, h);
        draw_filled_rect_mut(&mut img, rect, PALETTE[i % PALETTE.len()]);
    }
    save(&img, path)
}
