//! Heatmap overlays: the image blended with a colored activation map, the
//! ground-truth (green) and predicted (red) boxes, and a caption strip.

use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use lesionloc::dataset::{BBox, GrayImage};

use crate::CliError;

const GT_COLOR: Rgb<u8> = Rgb([40, 220, 60]);
const PRED_COLOR: Rgb<u8> = Rgb([235, 40, 40]);
const CAPTION_COLOR: Rgb<u8> = Rgb([255, 255, 255]);
const FOOTER_BG: Rgb<u8> = Rgb([0, 0, 0]);

/// Blend weight at map value 1; zero activation leaves the image unchanged.
const MAX_ALPHA: f64 = 0.55;

pub struct Overlay<'a> {
    pub image: &'a GrayImage,
    /// Normalized map at image resolution, row-major.
    pub map: Option<&'a [f64]>,
    pub predicted: Option<BBox>,
    pub gt: Vec<BBox>,
    pub caption: String,
}

/// Piecewise-linear jet colormap on `[0, 1]`.
pub fn jet(v: f64) -> [f64; 3] {
    let v = v.clamp(0.0, 1.0);
    let ramp = |c: f64| (1.5 - (4.0 * v - c).abs()).clamp(0.0, 1.0);
    [ramp(3.0), ramp(2.0), ramp(1.0)]
}

fn to_u8(x: f64) -> u8 {
    (x * 255.0).round().clamp(0.0, 255.0) as u8
}

fn draw_rect(img: &mut RgbImage, b: &BBox, scale: u32, height: u32, color: Rgb<u8>) {
    let w = img.width();
    let x0 = (b.x * f64::from(scale)).floor().max(0.0) as u32;
    let y0 = (b.y * f64::from(scale)).floor().max(0.0) as u32;
    let x1 = ((b.right() * f64::from(scale)).ceil() as u32).clamp(x0 + 1, w) - 1;
    let y1 = ((b.bottom() * f64::from(scale)).ceil() as u32).clamp(y0 + 1, height) - 1;
    if x0 >= w || y0 >= height {
        return;
    }
    let t = scale.clamp(1, 2);
    for x in x0..=x1 {
        for d in 0..t {
            img.put_pixel(x, (y0 + d).min(y1), color);
            img.put_pixel(x, y1.saturating_sub(d).max(y0), color);
        }
    }
    for y in y0..=y1 {
        for d in 0..t {
            img.put_pixel((x0 + d).min(x1), y, color);
            img.put_pixel(x1.saturating_sub(d).max(x0), y, color);
        }
    }
}

/// 3×5 bitmap glyphs, one row per entry, most significant of 3 bits on the
/// left.
fn glyph(c: char) -> [u8; 5] {
    match c.to_ascii_uppercase() {
        '0' => [7, 5, 5, 5, 7],
        '1' => [2, 6, 2, 2, 7],
        '2' => [7, 1, 7, 4, 7],
        '3' => [7, 1, 7, 1, 7],
        '4' => [5, 5, 7, 1, 1],
        '5' => [7, 4, 7, 1, 7],
        '6' => [7, 4, 7, 5, 7],
        '7' => [7, 1, 1, 1, 1],
        '8' => [7, 5, 7, 5, 7],
        '9' => [7, 5, 7, 1, 7],
        'A' => [2, 5, 7, 5, 5],
        'B' => [6, 5, 6, 5, 6],
        'C' => [3, 4, 4, 4, 3],
        'D' => [6, 5, 5, 5, 6],
        'E' => [7, 4, 6, 4, 7],
        'F' => [7, 4, 6, 4, 4],
        'G' => [3, 4, 5, 5, 3],
        'H' => [5, 5, 7, 5, 5],
        'I' => [7, 2, 2, 2, 7],
        'J' => [1, 1, 1, 5, 2],
        'K' => [5, 5, 6, 5, 5],
        'L' => [4, 4, 4, 4, 7],
        'M' => [5, 7, 7, 5, 5],
        'N' => [6, 5, 5, 5, 5],
        'O' => [2, 5, 5, 5, 2],
        'P' => [6, 5, 6, 4, 4],
        'Q' => [2, 5, 5, 6, 3],
        'R' => [6, 5, 6, 5, 5],
        'S' => [3, 4, 2, 1, 6],
        'T' => [7, 2, 2, 2, 2],
        'U' => [5, 5, 5, 5, 7],
        'V' => [5, 5, 5, 5, 2],
        'W' => [5, 5, 7, 7, 5],
        'X' => [5, 5, 2, 5, 5],
        'Y' => [5, 5, 2, 2, 2],
        'Z' => [7, 1, 2, 4, 7],
        '.' => [0, 0, 0, 0, 2],
        '=' => [0, 7, 0, 7, 0],
        ':' => [0, 2, 0, 2, 0],
        '-' => [0, 0, 7, 0, 0],
        '_' => [0, 0, 0, 0, 7],
        '/' => [1, 1, 2, 4, 4],
        ' ' => [0; 5],
        _ => [7, 1, 2, 0, 2],
    }
}

fn draw_text(img: &mut RgbImage, text: &str, x0: u32, y0: u32, px: u32, color: Rgb<u8>) {
    let mut x = x0;
    for c in text.chars() {
        if x + 3 * px > img.width() {
            break;
        }
        for (row, bits) in glyph(c).iter().enumerate() {
            for col in 0..3u32 {
                if bits >> (2 - col) & 1 == 1 {
                    for dy in 0..px {
                        for dx in 0..px {
                            let (xx, yy) = (x + col * px + dx, y0 + row as u32 * px + dy);
                            if xx < img.width() && yy < img.height() {
                                img.put_pixel(xx, yy, color);
                            }
                        }
                    }
                }
            }
        }
        x += 4 * px;
    }
}

/// Renders one overlay, upscaled by an integer `scale`, with a caption strip
/// under the image.
pub fn render_overlay(o: &Overlay<'_>, scale: u32) -> RgbImage {
    let scale = scale.max(1);
    let side = o.image.side() as u32;
    let w = side * scale;
    let h = w;
    let px = (scale / 2).max(1);
    let footer = 7 * px;
    let mut img = RgbImage::from_pixel(w, h + footer, FOOTER_BG);
    for y in 0..h {
        for x in 0..w {
            let (sx, sy) = ((x / scale) as usize, (y / scale) as usize);
            let g = f64::from(o.image.get(sx, sy));
            let a = o.map.map_or(0.0, |m| MAX_ALPHA * m[sy * side as usize + sx].clamp(0.0, 1.0));
            let c = jet(o.map.map_or(0.0, |m| m[sy * side as usize + sx]));
            img.put_pixel(
                x,
                y,
                Rgb([
                    to_u8((1.0 - a) * g + a * c[0]),
                    to_u8((1.0 - a) * g + a * c[1]),
                    to_u8((1.0 - a) * g + a * c[2]),
                ]),
            );
        }
    }
    for b in &o.gt {
        draw_rect(&mut img, b, scale, h, GT_COLOR);
    }
    if let Some(b) = &o.predicted {
        draw_rect(&mut img, b, scale, h, PRED_COLOR);
    }
    draw_text(&mut img, &o.caption, px, h + px, px, CAPTION_COLOR);
    img
}

/// Writes `<out_dir>/<name>.png` for every overlay; returns the paths.
pub fn render_overlays(items: &[(String, Overlay<'_>)], out_dir: &Path, scale: u32) -> Result<Vec<PathBuf>, CliError> {
    std::fs::create_dir_all(out_dir).map_err(|e| CliError::io(out_dir, e))?;
    items
        .iter()
        .map(|(name, o)| {
            let path = out_dir.join(format!("{name}.png"));
            render_overlay(o, scale)
                .save_with_format(&path, image::ImageFormat::Png)
                .map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
            Ok(path)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn test_image() -> GrayImage {
        GrayImage::from_vec(16, (0..256).map(|i| (i % 16) as f32 / 15.0).collect()).unwrap()
    }

    #[test]
    fn zero_map_keeps_image_outside_gt_outline() {
        let img = test_image();
        let zero = vec![0.0; 256];
        let gt = BBox {
            x: 4.0,
            y: 4.0,
            w: 6.0,
            h: 6.0,
        };
        let o = Overlay {
            image: &img,
            map: Some(&zero),
            predicted: None,
            gt: vec![gt],
            caption: String::new(),
        };
        let out = render_overlay(&o, 1);
        for y in 0..16u32 {
            for x in 0..16u32 {
                let on_outline = (x == 4 || x == 9) && (4..=9).contains(&y) || (y == 4 || y == 9) && (4..=9).contains(&x);
                let p = out.get_pixel(x, y);
                if on_outline {
                    assert_eq!(*p, GT_COLOR);
                } else {
                    let g = to_u8(f64::from(img.get(x as usize, y as usize)));
                    assert_eq!(*p, Rgb([g, g, g]), "({x},{y})");
                }
            }
        }
    }

    #[test]
    fn jet_endpoints() {
        assert_eq!(jet(0.0), [0.0, 0.0, 0.5]);
        assert_eq!(jet(1.0), [0.5, 0.0, 0.0]);
        assert_eq!(jet(0.5), [0.5, 1.0, 0.5]);
    }

    #[test]
    fn rendering_is_deterministic() {
        let img = test_image();
        let map: Vec<f64> = (0..256).map(|i| i as f64 / 255.0).collect();
        let o = Overlay {
            image: &img,
            map: Some(&map),
            predicted: Some(BBox {
                x: 1.0,
                y: 1.0,
                w: 3.0,
                h: 3.0,
            }),
            gt: vec![],
            caption: "DISC P=0.93".into(),
        };
        let dir = tempfile::tempdir().unwrap();
        let a = render_overlays(&[("a".into(), o)], dir.path(), 4).unwrap();
        let first = std::fs::read(&a[0]).unwrap();
        let o = Overlay {
            image: &img,
            map: Some(&map),
            predicted: Some(BBox {
                x: 1.0,
                y: 1.0,
                w: 3.0,
                h: 3.0,
            }),
            gt: vec![],
            caption: "DISC P=0.93".into(),
        };
        let b = render_overlays(&[("b".into(), o)], dir.path(), 4).unwrap();
        assert_eq!(first, std::fs::read(&b[0]).unwrap());
    }
}
