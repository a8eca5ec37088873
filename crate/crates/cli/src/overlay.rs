use std::path::Path;

use anyhow::Result;
use image::{Rgb, RgbImage};
use imageproc::drawing::{draw_hollow_rect_mut, draw_line_segment_mut};
use imageproc::rect::Rect;
use rotsiam::{ImagePatch, ResultRow};

const PRED: Rgb<u8> = Rgb([230, 40, 40]);
const TRUTH: Rgb<u8> = Rgb([40, 200, 60]);

fn to_rgb(frame: &ImagePatch) -> RgbImage {
    let (h, w) = (frame.height(), frame.width());
    let data = frame.tensor().data();
    let plane = h * w;
    RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let i = y as usize * w + x as usize;
        let px = |c: usize| {
            let c = if frame.channels() == 1 { 0 } else { c };
            (data[c * plane + i].clamp(0.0, 1.0) * 255.0).round() as u8
        };
        Rgb([px(0), px(1), px(2)])
    })
}

fn draw_box(img: &mut RgbImage, x: f64, y: f64, w: f64, h: f64, color: Rgb<u8>) {
    let (w, h) = (w.round().max(1.0) as u32, h.round().max(1.0) as u32);
    draw_hollow_rect_mut(img, Rect::at(x.round() as i32, y.round() as i32).of_size(w, h), color);
}

/// Draws the predicted box, an arrow along the estimated orientation
/// (counter-clockwise from the x axis) and optionally the true box.
pub fn render(frame: &ImagePatch, row: &ResultRow, truth: Option<(f64, f64, f64, f64)>) -> RgbImage {
    let mut img = to_rgb(frame);
    if let Some((x, y, w, h)) = truth {
        draw_box(&mut img, x, y, w, h, TRUTH);
    }
    draw_box(&mut img, row.x, row.y, row.w, row.h, PRED);
    let (cx, cy) = (row.x + row.w / 2.0, row.y + row.h / 2.0);
    let len = row.w.min(row.h) / 2.0;
    let a = row.orientation_deg.to_radians();
    let tip = (cx + len * a.cos(), cy - len * a.sin());
    draw_line_segment_mut(&mut img, (cx as f32, cy as f32), (tip.0 as f32, tip.1 as f32), PRED);
    for side in [-1.0, 1.0] {
        let b = a + std::f64::consts::PI + side * 0.5;
        let end = (tip.0 + 0.3 * len * b.cos(), tip.1 - 0.3 * len * b.sin());
        draw_line_segment_mut(&mut img, (tip.0 as f32, tip.1 as f32), (end.0 as f32, end.1 as f32), PRED);
    }
    img
}

pub fn save(path: &Path, img: &RgbImage) -> Result<()> {
    img.save(path)?;
    Ok(())
}
