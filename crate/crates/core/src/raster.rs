//! Minimal RGB drawing: clipped rectangles, alpha fills, outlines, 8x8 bitmap text.

use font8x8::legacy::BASIC_LEGACY;
use image::{Rgb, RgbImage};

pub type Color = [u8; 3];

/// Pixel width of `text` at integer `scale` (8 px per glyph per scale step).
pub fn text_width(text: &str, scale: u32) -> u32 {
    text.chars().count() as u32 * 8 * scale
}

fn span(start: i64, len: i64, limit: u32) -> std::ops::Range<u32> {
    let a = start.clamp(0, limit as i64) as u32;
    let b = (start + len).clamp(0, limit as i64) as u32;
    a..b
}

pub fn fill_rect(img: &mut RgbImage, x: i64, y: i64, w: i64, h: i64, c: Color) {
    for py in span(y, h, img.height()) {
        for px in span(x, w, img.width()) {
            img.put_pixel(px, py, Rgb(c));
        }
    }
}

/// `dst = (1 - alpha) * dst + alpha * c`, per channel, rounded.
pub fn blend_rect(img: &mut RgbImage, x: i64, y: i64, w: i64, h: i64, c: Color, alpha: f64) {
    let a = alpha.clamp(0.0, 1.0);
    for py in span(y, h, img.height()) {
        for px in span(x, w, img.width()) {
            let p = img.get_pixel_mut(px, py);
            for k in 0..3 {
                p.0[k] = ((1.0 - a) * p.0[k] as f64 + a * c[k] as f64).round() as u8;
            }
        }
    }
}

/// Border of `t` pixels drawn inside the box.
pub fn stroke_rect(img: &mut RgbImage, x: i64, y: i64, w: i64, h: i64, t: i64, c: Color) {
    let t = t.min(w / 2).min(h / 2).max(1);
    fill_rect(img, x, y, w, t, c);
    fill_rect(img, x, y + h - t, w, t, c);
    fill_rect(img, x, y, t, h, c);
    fill_rect(img, x + w - t, y, t, h, c);
}

/// Draws ASCII text with its top-left corner at `(x, y)`. Non-ASCII characters render blank.
pub fn draw_text(img: &mut RgbImage, x: i64, y: i64, text: &str, scale: u32, c: Color) {
    let s = scale as i64;
    for (i, ch) in text.chars().enumerate() {
        let glyph = if (ch as u32) < 128 {
            BASIC_LEGACY[ch as usize]
        } else {
            [0; 8]
        };
        let gx = x + i as i64 * 8 * s;
        for (row, bits) in glyph.iter().enumerate() {
            for col in 0..8 {
                if bits >> col & 1 == 1 {
                    fill_rect(img, gx + col * s, y + row as i64 * s, s, s, c);
                }
            }
        }
    }
}

/// Copies `src` with its top-left corner at `(x, y)`, clipped.
pub fn blit(img: &mut RgbImage, src: &RgbImage, x: i64, y: i64) {
    for sy in 0..src.height() {
        for sx in 0..src.width() {
            let (dx, dy) = (x + sx as i64, y + sy as i64);
            if dx >= 0 && dy >= 0 && (dx as u32) < img.width() && (dy as u32) < img.height() {
                img.put_pixel(dx as u32, dy as u32, *src.get_pixel(sx, sy));
            }
        }
    }
}

/// Nearest-neighbour resize.
pub fn resize_nearest(src: &RgbImage, w: u32, h: u32) -> RgbImage {
    RgbImage::from_fn(w, h, |x, y| {
        *src.get_pixel(x * src.width() / w, y * src.height() / h)
    })
}

/// Pixels of the box `(x, y, w, h)`, row-major; `None` if it leaves the image.
pub fn crop(img: &RgbImage, x: u32, y: u32, w: u32, h: u32) -> Option<Vec<u8>> {
    if x + w > img.width() || y + h > img.height() {
        return None;
    }
    let mut out = Vec::with_capacity((w * h * 3) as usize);
    for py in y..y + h {
        for px in x..x + w {
            out.extend_from_slice(&img.get_pixel(px, py).0);
        }
    }
    Some(out)
}
