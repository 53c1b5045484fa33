//! Attention overlays: the classified element outlined in red, each context
//! element shaded green with opacity `0.8 * alpha` when `alpha` exceeds the
//! threshold.

use std::collections::BTreeMap;

use image::RgbImage;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dom::Webpage;
use crate::geom::BBox;
use crate::raster::{blend_rect, stroke_rect, Color};

pub const OUTLINE: Color = [255, 0, 0];
pub const SHADE: Color = [0, 200, 0];
pub const MAX_OPACITY: f64 = 0.8;
pub const DEFAULT_THRESHOLD: f64 = 0.05;
const OUTLINE_PX: i64 = 3;

#[derive(Debug, Error, PartialEq)]
pub enum VizError {
    #[error("element {0} is not on page {1:?}")]
    UnknownElement(u32, String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NeighborScore {
    pub element_id: u32,
    pub alpha: f64,
    /// Drawn with a shade; false when `alpha <= threshold`.
    pub shaded: bool,
    pub opacity: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionReport {
    pub page_id: String,
    pub element_id: u32,
    pub threshold: f64,
    /// Every context element, ascending id.
    pub neighbors: Vec<NeighborScore>,
    /// Fraction of context elements above the threshold; 0 without context.
    pub activated_fraction: f64,
}

impl AttentionReport {
    /// The attention map as given to [`render_attention`].
    pub fn attn(&self) -> BTreeMap<u32, f64> {
        self.neighbors
            .iter()
            .map(|n| (n.element_id, n.alpha))
            .collect()
    }
}

fn rect(img: &RgbImage, b: &BBox) -> (i64, i64, i64, i64) {
    let c = b.clip(img.width() as f64, img.height() as f64);
    (
        c.x.floor() as i64,
        c.y.floor() as i64,
        c.w.ceil() as i64,
        c.h.ceil() as i64,
    )
}

/// Draws the overlay on a copy of `screenshot`.
pub fn render_attention(
    page: &Webpage,
    screenshot: &RgbImage,
    element_id: u32,
    attn: &BTreeMap<u32, f64>,
    threshold: f64,
) -> Result<(RgbImage, AttentionReport), VizError> {
    let unknown = |id| VizError::UnknownElement(id, page.page_id.clone());
    let target = page
        .element(element_id)
        .ok_or_else(|| unknown(element_id))?;
    let mut img = screenshot.clone();
    let mut neighbors = Vec::with_capacity(attn.len());
    for (&id, &alpha) in attn {
        let e = page.element(id).ok_or_else(|| unknown(id))?;
        let shaded = alpha > threshold;
        let opacity = MAX_OPACITY * alpha.clamp(0.0, 1.0);
        if shaded {
            let (x, y, w, h) = rect(&img, &e.bbox);
            blend_rect(&mut img, x, y, w, h, SHADE, opacity);
        }
        neighbors.push(NeighborScore {
            element_id: id,
            alpha,
            shaded,
            opacity: if shaded { opacity } else { 0.0 },
        });
    }
    let (x, y, w, h) = rect(&img, &target.bbox);
    stroke_rect(
        &mut img,
        x - OUTLINE_PX,
        y - OUTLINE_PX,
        w + 2 * OUTLINE_PX,
        h + 2 * OUTLINE_PX,
        OUTLINE_PX,
        OUTLINE,
    );
    let activated_fraction = if neighbors.is_empty() {
        0.0
    } else {
        neighbors.iter().filter(|n| n.shaded).count() as f64 / neighbors.len() as f64
    };
    let report = AttentionReport {
        page_id: page.page_id.clone(),
        element_id,
        threshold,
        neighbors,
        activated_fraction,
    };
    Ok((img, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dom::{Label, WebElement};

    fn page() -> Webpage {
        let el = |id: u32, x: f64| WebElement {
            element_id: id,
            bbox: BBox::new(x, 10.0, 10.0, 10.0),
            tag: "DIV".into(),
            text: None,
            font_size: None,
            label: Label::Background,
            preorder_index: id as usize,
            dom_path: vec![],
        };
        Webpage {
            page_id: "p".into(),
            domain: "d".into(),
            screenshot_ref: None,
            elements: (0..5).map(|i| el(i, 10.0 + 20.0 * i as f64)).collect(),
            fully_labeled: false,
            dom: None,
        }
    }

    fn white() -> RgbImage {
        RgbImage::from_pixel(120, 40, image::Rgb([255, 255, 255]))
    }

    #[test]
    fn uniform_attention_equal_shades() {
        let attn: BTreeMap<u32, f64> = (1..5).map(|i| (i, 0.25)).collect();
        let (img, rep) = render_attention(&page(), &white(), 0, &attn, DEFAULT_THRESHOLD).unwrap();
        let shades: Vec<[u8; 3]> = (1..5).map(|i| img.get_pixel(15 + 20 * i, 15).0).collect();
        assert!(shades.windows(2).all(|w| w[0] == w[1]));
        // 0.2 opacity over white.
        assert_eq!(shades[0], [204, 244, 204]);
        assert_eq!(rep.activated_fraction, 1.0);
        assert_eq!(img.get_pixel(8, 8).0, OUTLINE);
    }

    #[test]
    fn single_neighbor_full_opacity() {
        let attn = BTreeMap::from([(3, 1.0)]);
        let (img, rep) = render_attention(&page(), &white(), 0, &attn, DEFAULT_THRESHOLD).unwrap();
        assert_eq!(img.get_pixel(75, 15).0, [51, 211, 51]);
        assert_eq!(rep.neighbors[0].opacity, MAX_OPACITY);
    }

    #[test]
    fn below_threshold_listed_not_drawn() {
        let attn = BTreeMap::from([(1, 0.96), (2, 0.04)]);
        let (img, rep) = render_attention(&page(), &white(), 0, &attn, DEFAULT_THRESHOLD).unwrap();
        assert_eq!(img.get_pixel(55, 15).0, [255, 255, 255]);
        assert_eq!(rep.neighbors.len(), 2);
        assert!(!rep.neighbors[1].shaded);
        assert_eq!(rep.activated_fraction, 0.5);
    }

    #[test]
    fn unknown_ids_rejected() {
        let e = render_attention(&page(), &white(), 9, &BTreeMap::new(), 0.05).unwrap_err();
        assert_eq!(e, VizError::UnknownElement(9, "p".into()));
        assert!(render_attention(&page(), &white(), 0, &BTreeMap::from([(7, 1.0)]), 0.05).is_err());
    }

    #[test]
    fn json_round_trips_attention_exactly() {
        let attn = BTreeMap::from([
            (1, 0.1 + 0.2),
            (2, 1.0 / 3.0),
            (4, 1.0 - (0.1 + 0.2) - 1.0 / 3.0),
        ]);
        let (_, rep) = render_attention(&page(), &white(), 0, &attn, 0.05).unwrap();
        let back: AttentionReport =
            serde_json::from_str(&serde_json::to_string(&rep).unwrap()).unwrap();
        assert_eq!(back.attn(), attn);
    }
}
