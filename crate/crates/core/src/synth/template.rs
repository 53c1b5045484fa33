//! Per-domain look: palette and layout geometry.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::raster::Color;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Palette {
    pub background: Color,
    pub text: Color,
    pub header: Color,
    pub header_text: Color,
    pub footer: Color,
    pub footer_text: Color,
    pub price: Color,
    pub button: Color,
    pub button_text: Color,
    pub rating: Color,
    pub logo: Color,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Template {
    pub name: String,
    pub palette: Palette,
    /// Header band height, a multiple of 32.
    pub header_h: u32,
    /// Side of the main product image.
    pub image_size: u32,
    pub image_left: bool,
    pub n_nav: usize,
    pub n_footer: usize,
    /// Where each sidebar price slot sits among the promo items, as a fraction.
    pub slot_fracs: Vec<f64>,
    pub brand: String,
}

const BRANDS: [&str; 12] = [
    "ACME", "SHOPLY", "MARTO", "BUYIT", "KART", "VENDA", "TRADO", "STORI", "MALLO", "GOODS",
    "DEALZ", "NOVA",
];

fn light(rng: &mut ChaCha8Rng) -> Color {
    [
        rng.random_range(225..=255),
        rng.random_range(225..=255),
        rng.random_range(225..=255),
    ]
}

fn dark(rng: &mut ChaCha8Rng) -> Color {
    [
        rng.random_range(0..=60),
        rng.random_range(0..=60),
        rng.random_range(0..=60),
    ]
}

fn mid(rng: &mut ChaCha8Rng) -> Color {
    [
        rng.random_range(60..=170),
        rng.random_range(60..=170),
        rng.random_range(60..=170),
    ]
}

/// One saturated channel (red or green dominant), the others low.
fn accent(rng: &mut ChaCha8Rng) -> Color {
    let hi = rng.random_range(170..=230);
    let lo = || 0u8;
    let mut c = [lo(), lo(), lo()];
    let ch = if rng.random_bool(0.5) { 0 } else { 1 };
    c[ch] = hi;
    c[2] = rng.random_range(0..=50);
    c
}

impl Template {
    pub fn random(index: usize, rng: &mut ChaCha8Rng, fixed_palette: bool, n_slots: usize) -> Self {
        let palette = if fixed_palette {
            Palette {
                background: [250, 250, 250],
                text: [20, 20, 20],
                header: [40, 60, 110],
                header_text: [255, 255, 255],
                footer: [60, 60, 60],
                footer_text: [230, 230, 230],
                price: [200, 20, 20],
                button: [240, 150, 20],
                button_text: [255, 255, 255],
                rating: [230, 180, 0],
                logo: [250, 200, 40],
            }
        } else {
            Palette {
                background: light(rng),
                text: dark(rng),
                header: mid(rng),
                header_text: light(rng),
                footer: mid(rng),
                footer_text: light(rng),
                price: accent(rng),
                button: mid(rng),
                button_text: light(rng),
                rating: [rng.random_range(200..=255), rng.random_range(150..=210), 0],
                logo: mid(rng),
            }
        };
        let slot_fracs = (0..n_slots)
            .map(|k| (k as f64 + rng.random_range(0.2..0.8)) / n_slots as f64)
            .collect();
        Template {
            name: format!("shop{index:03}"),
            palette,
            header_h: if rng.random_bool(0.5) { 64 } else { 96 },
            image_size: if rng.random_bool(0.5) { 320 } else { 384 },
            image_left: rng.random_bool(0.5),
            n_nav: rng.random_range(4..=6),
            n_footer: rng.random_range(3..=5),
            slot_fracs,
            brand: BRANDS[rng.random_range(0..BRANDS.len())].to_string(),
        }
    }
}
