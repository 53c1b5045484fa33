//! Layout, DOM construction and rasterization of one synthetic page.
//!
//! Canvas regions (pixels, 1280 x 1280):
//!
//! ```text
//! header band     y in [0, H)               H in {64, 96}, present when E >= 24
//! main column     x in [32, 928), y from Y = H + 32 (32 without header)
//!   image         S x S, S in {320, 384}, left or right; 64 px thumb below it
//!   info          breadcrumb Y, title Y+48, slot A Y+128, rating Y+192, button Y+240,
//!                 tagline Y+304
//! details grid    y from align32(Y + S + 112) to 1184, 32 px rows, 3 columns of 288
//! sidebar         x in [960, 1248): 80 px promo items, sidebar slots at x = 992
//! footer band     y in [1216, 1280)
//! ```
//!
//! A price slot is a 32-aligned cell run reserved for one price string and
//! left otherwise empty, so every slot renders the same pixels for the same
//! string. The true price's DOM node directly follows the title; decoy
//! nodes sit among the promo items, at least 25 leaves after the title. The
//! true price shows in a uniformly chosen slot and decoys fill the rest, so
//! the screenshot never tells which slot is the answer.
//!
//! The tagline follows the price in DOM order and is drawn like the title
//! (same scale, color, word distribution and offset within the 32 px grid)
//! below the button. Title and
//! tagline share nearly all DOM neighbors, so geometry is what separates them.

use image::RgbImage;
use rand::seq::IndexedRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::template::Template;
use super::{RenderStyle, SynthError, SynthSpec, VIEWPORT};
use crate::dom::{DomDump, DomNode, LabelManifest};
use crate::geom::BBox;
use crate::raster::{blit, draw_text, fill_rect, resize_nearest, stroke_rect, text_width, Color};

const ADJECTIVES: [&str; 15] = [
    "Classic", "Modern", "Urban", "Deluxe", "Compact", "Smart", "Vintage", "Pro", "Ultra", "Eco",
    "Royal", "Swift", "Bold", "Prime", "Nova",
];
const NOUNS: [&str; 16] = [
    "Boot", "Lamp", "Watch", "Chair", "Kettle", "Jacket", "Mixer", "Drone", "Backpack", "Speaker",
    "Blender", "Sofa", "Camera", "Helmet", "Mug", "Tent",
];
const CATEGORIES: [&str; 8] = [
    "Home", "Shoes", "Audio", "Decor", "Sport", "Tools", "Kids", "Bags",
];
const NAV: [&str; 7] = ["Home", "Deals", "New", "Sale", "Brands", "Gifts", "Help"];
const FOOTER: [&str; 6] = ["About", "Contact", "Privacy", "Terms", "Careers", "Stores"];
const COLORS: [&str; 6] = ["Red", "Blue", "Black", "Olive", "Sand", "Grey"];
const SIZES: [&str; 5] = ["S", "M", "L", "XL", "XXL"];

/// Bottom of the details grid and the sidebar.
const CONTENT_BOTTOM: u32 = 1184;
const FOOTER_TOP: u32 = 1216;
const SIDEBAR_X: u32 = 992;
const PROMO_PITCH: u32 = 80;
/// Vertical budget of one sidebar slot: alignment slack, the cell row and a gap.
const SIDEBAR_SLOT_PITCH: u32 = 96;
const DETAIL_COLS: usize = 3;
const DETAIL_COL_W: u32 = 288;
const ROW_H: u32 = 32;
/// Fewest leaves between the main column and the first decoy; with the four
/// main-column leaves after the title this keeps decoys over 24 leaves away.
pub(crate) const MIN_DECOY_GAP: usize = 21;
/// Element count from which thumb, breadcrumb, rating, button and tagline appear.
pub(crate) const EXTRAS_FROM: usize = 16;
/// Element count from which the header and the footer links appear.
pub(crate) const HEADER_FROM: usize = 24;

/// One leaf of the generator's own manifest, in DOM preorder.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LeafRecord {
    pub element_id: u32,
    pub preorder_index: usize,
    pub tag: String,
    pub bbox: BBox,
}

/// Ground truth of one page as emitted to `leaves.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PageTruth {
    pub page_id: String,
    pub domain: String,
    pub price_id: u32,
    pub title_id: u32,
    pub image_id: u32,
    pub decoy_ids: Vec<u32>,
    /// Slot showing the true price: 0 is the main-column slot, k > 0 the k-th sidebar slot.
    pub price_slot: usize,
    /// Leaves that survive default pruning, in preorder.
    pub leaves: Vec<LeafRecord>,
}

impl PageTruth {
    pub fn labels(&self) -> LabelManifest {
        LabelManifest::new(
            Some(self.price_id),
            Some(self.title_id),
            Some(self.image_id),
        )
    }

    fn leaf_index(&self, id: u32) -> usize {
        self.leaves
            .iter()
            .position(|l| l.element_id == id)
            .expect("labeled ids are leaves")
    }

    /// Preorder leaf index distance between two labeled or decoy elements.
    pub fn leaf_distance(&self, a: u32, b: u32) -> usize {
        self.leaf_index(a).abs_diff(self.leaf_index(b))
    }
}

pub struct SynthPage {
    pub truth: PageTruth,
    pub dom: DomDump,
    pub screenshot: RgbImage,
    /// Box of every price slot, main-column slot first.
    pub slot_boxes: Vec<BBox>,
}

/// Leaf budget of one page.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct Counts {
    pub extras: bool,
    pub header: bool,
    pub details: usize,
    pub promos: usize,
}

pub(crate) fn align32(v: u32) -> u32 {
    v.div_ceil(32) * 32
}

/// Details capacity and sidebar capacity for a template geometry.
pub(crate) fn capacities(header_h: u32, image_size: u32, decoys: usize) -> (usize, usize) {
    let y_main = header_h + 32;
    let details_top = align32(y_main + image_size + 112);
    let rows = (CONTENT_BOTTOM.saturating_sub(details_top) / ROW_H) as usize;
    let side = (CONTENT_BOTTOM - y_main).saturating_sub(decoys as u32 * SIDEBAR_SLOT_PITCH);
    (rows * DETAIL_COLS, (side / PROMO_PITCH) as usize)
}

pub(crate) fn counts(spec: &SynthSpec, t: &Template) -> Result<Counts, SynthError> {
    let e = spec.elements_per_page;
    let decoys = spec.n_decoy_prices;
    let extras = e >= EXTRAS_FROM;
    let header = e >= HEADER_FROM;
    let mut fixed = 3 + if extras { 5 } else { 0 };
    fixed += if header { 1 + t.n_nav + t.n_footer } else { 1 };
    let rest = e.checked_sub(fixed + decoys).ok_or_else(|| {
        SynthError::Spec(format!("{e} elements leave no room for the page skeleton"))
    })?;
    if !extras {
        return Ok(Counts {
            extras,
            header,
            details: rest,
            promos: 0,
        });
    }
    let (detail_cap, promo_cap) =
        capacities(if header { t.header_h } else { 0 }, t.image_size, decoys);
    let mut promos = (rest / 4).min(promo_cap);
    if rest - 2 * promos > detail_cap {
        promos = (rest - detail_cap).div_ceil(2);
    }
    if decoys > 0 && rest - 2 * promos < MIN_DECOY_GAP {
        promos = rest.saturating_sub(MIN_DECOY_GAP) / 2;
    }
    let details = rest - 2 * promos;
    if promos > promo_cap || details > detail_cap || (decoys > 0 && details < MIN_DECOY_GAP) {
        return Err(SynthError::Spec(format!(
            "{e} elements with {decoys} decoys do not fit the page layout"
        )));
    }
    Ok(Counts {
        extras,
        header,
        details,
        promos,
    })
}

struct Builder {
    nodes: Vec<DomNode>,
    leaves: Vec<LeafRecord>,
    img: RgbImage,
}

impl Builder {
    fn push(
        &mut self,
        parent: Option<u32>,
        tag: &str,
        bbox: BBox,
        text: Option<&str>,
        font: Option<f64>,
    ) -> u32 {
        let id = self.nodes.len() as u32;
        self.nodes.push(DomNode {
            id,
            tag: tag.to_string(),
            bbox,
            text: text.map(String::from),
            font_size: font,
            children: Vec::new(),
        });
        if let Some(p) = parent {
            self.nodes[p as usize].children.push(id);
        }
        id
    }

    /// A visible leaf; recorded in the leaf manifest.
    fn leaf(
        &mut self,
        parent: u32,
        tag: &str,
        bbox: BBox,
        text: Option<&str>,
        font: Option<f64>,
    ) -> u32 {
        let id = self.push(Some(parent), tag, bbox, text, font);
        self.leaves.push(LeafRecord {
            element_id: id,
            preorder_index: self.leaves.len(),
            tag: tag.into(),
            bbox,
        });
        id
    }

    fn text_leaf(
        &mut self,
        parent: u32,
        tag: &str,
        x: u32,
        y: u32,
        text: &str,
        scale: u32,
        c: Color,
    ) -> u32 {
        draw_text(&mut self.img, x as i64, y as i64, text, scale, c);
        let bbox = BBox::new(
            x as f64,
            y as f64,
            text_width(text, scale) as f64,
            (8 * scale) as f64,
        );
        self.leaf(parent, tag, bbox, Some(text), Some((8 * scale) as f64))
    }

    fn image_leaf(&mut self, parent: u32, x: u32, y: u32, photo: &RgbImage) -> u32 {
        blit(&mut self.img, photo, x as i64, y as i64);
        self.leaf(
            parent,
            "IMG",
            bx(x, y, photo.width(), photo.height()),
            None,
            None,
        )
    }
}

fn bx(x: u32, y: u32, w: u32, h: u32) -> BBox {
    BBox::new(x as f64, y as f64, w as f64, h as f64)
}

fn random_color(rng: &mut ChaCha8Rng) -> Color {
    [rng.random(), rng.random(), rng.random()]
}

/// Vertical gradient with a few rectangles and a disc.
pub(crate) fn photo(rng: &mut ChaCha8Rng, w: u32, h: u32) -> RgbImage {
    let (c1, c2) = (random_color(rng), random_color(rng));
    let mut img = RgbImage::from_fn(w, h, |_, y| {
        let t = y as f64 / h as f64;
        image::Rgb(std::array::from_fn(|k| {
            ((1.0 - t) * c1[k] as f64 + t * c2[k] as f64) as u8
        }))
    });
    for _ in 0..rng.random_range(3..7) {
        let (rw, rh) = (
            rng.random_range(w / 8..=w / 2),
            rng.random_range(h / 8..=h / 2),
        );
        let (rx, ry) = (rng.random_range(0..w - rw), rng.random_range(0..h - rh));
        let c = random_color(rng);
        fill_rect(&mut img, rx as i64, ry as i64, rw as i64, rh as i64, c);
    }
    let r = rng.random_range(w / 8..=w / 3) as i64;
    let (cx, cy) = (rng.random_range(0..w) as i64, rng.random_range(0..h) as i64);
    let c = random_color(rng);
    for y in (cy - r).max(0)..(cy + r).min(h as i64) {
        for x in (cx - r).max(0)..(cx + r).min(w as i64) {
            if (x - cx).pow(2) + (y - cy).pow(2) <= r * r {
                img.put_pixel(x as u32, y as u32, image::Rgb(c));
            }
        }
    }
    img
}

fn title_text(rng: &mut ChaCha8Rng, max_chars: usize) -> String {
    loop {
        let t = format!(
            "{} {}",
            ADJECTIVES.choose(rng).expect("nonempty"),
            NOUNS.choose(rng).expect("nonempty")
        );
        if t.len() <= max_chars {
            return t;
        }
    }
}

fn price_text(rng: &mut ChaCha8Rng) -> String {
    format!(
        "${}.{:02}",
        rng.random_range(1..=999),
        rng.random_range(0..100)
    )
}

fn detail_text(rng: &mut ChaCha8Rng) -> String {
    match rng.random_range(0..9) {
        0 => format!("Color: {}", COLORS.choose(rng).expect("nonempty")),
        1 => format!("Size: {}", SIZES.choose(rng).expect("nonempty")),
        2 => format!("SKU {}", rng.random_range(10000..100000)),
        3 => format!("Weight {} kg", rng.random_range(1..10)),
        4 => format!("Stock: {}", rng.random_range(1..100)),
        5 => format!(
            "Model {}{}",
            (b'A' + rng.random_range(0..26u8)) as char,
            rng.random_range(100..1000)
        ),
        6 => "Free returns".to_string(),
        7 => "Ships fast".to_string(),
        _ => "In stock".to_string(),
    }
}

fn promo_text(rng: &mut ChaCha8Rng) -> String {
    let noun = NOUNS.choose(rng).expect("nonempty");
    if rng.random_bool(0.5) {
        noun.to_string()
    } else {
        format!("{noun} {}", rng.random_range(2..10))
    }
}

/// Width and height of a price slot for `price_scale`.
pub(crate) fn slot_size(style: &RenderStyle) -> (u32, u32) {
    (align32(7 * 8 * style.price_scale), ROW_H)
}

/// Builds page `index` of `spec` on template `t`.
pub(crate) fn build_page(
    spec: &SynthSpec,
    t: &Template,
    index: usize,
    rng: &mut ChaCha8Rng,
) -> Result<SynthPage, SynthError> {
    let c = counts(spec, t)?;
    let style = &spec.render_style;
    let pal = &t.palette;
    let ts = style.text_scale;
    let decoys = spec.n_decoy_prices;

    let mut b = Builder {
        nodes: Vec::new(),
        leaves: Vec::new(),
        img: RgbImage::new(VIEWPORT, VIEWPORT),
    };
    fill_rect(
        &mut b.img,
        0,
        0,
        VIEWPORT as i64,
        VIEWPORT as i64,
        pal.background,
    );
    let body = b.push(None, "BODY", bx(0, 0, VIEWPORT, VIEWPORT), None, None);
    if spec.noise {
        b.push(Some(body), "SCRIPT", bx(0, 0, 0, 0), Some("track()"), None);
    }

    // Header.
    let header_h = if c.header { t.header_h } else { 0 };
    if c.header {
        fill_rect(
            &mut b.img,
            0,
            0,
            VIEWPORT as i64,
            header_h as i64,
            pal.header,
        );
        let header = b.push(
            Some(body),
            "HEADER",
            bx(0, 0, VIEWPORT, header_h),
            None,
            None,
        );
        let (lw, lh) = (160, 32);
        let ly = (header_h - lh) / 2;
        fill_rect(&mut b.img, 32, ly as i64, lw as i64, lh as i64, pal.logo);
        draw_text(
            &mut b.img,
            40,
            (ly + 8) as i64,
            &t.brand,
            2,
            pal.header_text,
        );
        b.leaf(
            header,
            "DIV",
            bx(32, ly, lw, lh),
            Some(&t.brand),
            Some(16.0),
        );
        let nav = b.push(
            Some(header),
            "NAV",
            bx(320, ly, 128 * t.n_nav as u32, lh),
            None,
            None,
        );
        for (i, item) in NAV.iter().take(t.n_nav).enumerate() {
            b.text_leaf(
                nav,
                "A",
                320 + 128 * i as u32,
                header_h / 2 - 8,
                item,
                2,
                pal.header_text,
            );
        }
    }

    // Main column.
    let y_main = header_h + 32;
    let s = if c.extras { t.image_size } else { 320 };
    let (image_x, info_x) = if t.image_left {
        (32, 32 + s + 32)
    } else {
        (928 - s, 32)
    };
    let info_w = 928 - info_x;
    let (slot_w, slot_h) = slot_size(style);
    let main_h = if c.extras { s + 80 } else { s };
    let main = b.push(Some(body), "MAIN", bx(0, y_main, 960, main_h), None, None);
    let product = photo(rng, s, s);
    let max_title = ((info_w / (8 * style.title_scale)) as usize).min(14);
    let title = title_text(rng, max_title);
    let price = price_text(rng);
    let title_y = if c.extras { y_main + 48 } else { y_main };
    let slot_a = bx(info_x, y_main + 128, slot_w, slot_h);

    let (image_id, title_id, price_id);
    if c.extras {
        let gallery = b.push(
            Some(main),
            "DIV",
            bx(image_x, y_main, s, s + 80),
            None,
            None,
        );
        b.image_leaf(
            gallery,
            image_x,
            y_main + s + 16,
            &resize_nearest(&product, 64, 64),
        );
        image_id = b.image_leaf(gallery, image_x, y_main, &product);
        let info = b.push(
            Some(main),
            "DIV",
            bx(info_x, y_main, info_w, 328),
            None,
            None,
        );
        let crumb = CATEGORIES.choose(rng).expect("nonempty");
        b.text_leaf(
            info,
            "A",
            info_x,
            y_main,
            crumb,
            style.title_scale,
            pal.text,
        );
        title_id = b.text_leaf(
            info,
            "H1",
            info_x,
            title_y,
            &title,
            style.title_scale,
            pal.text,
        );
        price_id = b.leaf(info, "SPAN", slot_a, Some(&price), None);
        let tagline = loop {
            let t = title_text(rng, max_title);
            if t != title {
                break t;
            }
        };
        b.text_leaf(
            info,
            "H2",
            info_x,
            y_main + 304,
            &tagline,
            style.title_scale,
            pal.text,
        );
        let stars = rng.random_range(3..=5);
        for k in 0..5 {
            let x = (info_x + 28 * k) as i64;
            if k < stars {
                fill_rect(&mut b.img, x, (y_main + 192) as i64, 20, 20, pal.rating);
            } else {
                stroke_rect(&mut b.img, x, (y_main + 192) as i64, 20, 20, 2, pal.rating);
            }
        }
        b.leaf(info, "DIV", bx(info_x, y_main + 192, 132, 20), None, None);
        fill_rect(
            &mut b.img,
            info_x as i64,
            (y_main + 240) as i64,
            192,
            40,
            pal.button,
        );
        let label = "ADD TO CART";
        draw_text(
            &mut b.img,
            (info_x + 8) as i64,
            (y_main + 252) as i64,
            label,
            2,
            pal.button_text,
        );
        b.leaf(
            info,
            "BUTTON",
            bx(info_x, y_main + 240, 192, 40),
            Some(label),
            Some(16.0),
        );
    } else {
        image_id = b.image_leaf(main, image_x, y_main, &product);
        title_id = b.text_leaf(
            main,
            "H1",
            info_x,
            title_y,
            &title,
            style.title_scale,
            pal.text,
        );
        price_id = b.leaf(main, "SPAN", slot_a, Some(&price), None);
    }

    // Details grid.
    let details_top = if c.extras {
        align32(y_main + s + 112)
    } else {
        align32(y_main + s + 32)
    };
    if c.details > 0 {
        let rows = c.details.div_ceil(DETAIL_COLS) as u32;
        let details = b.push(
            Some(body),
            "DIV",
            bx(32, details_top, 864, rows * ROW_H),
            None,
            None,
        );
        for r in 0..rows {
            let y = details_top + r * ROW_H;
            let row = b.push(Some(details), "DIV", bx(32, y, 864, ROW_H), None, None);
            let first = r as usize * DETAIL_COLS;
            for k in first..(first + DETAIL_COLS).min(c.details) {
                let x = 32 + DETAIL_COL_W * (k - first) as u32;
                let text = detail_text(rng);
                b.text_leaf(
                    row,
                    "SPAN",
                    x,
                    y + (ROW_H - 8 * ts) / 2,
                    &text,
                    ts,
                    pal.text,
                );
            }
            if spec.noise && r == 0 {
                b.push(Some(row), "SPAN", bx(900, y, 0, 0), Some(""), None);
            }
        }
    }

    // Sidebar: promo items interleaved with the decoy slots.
    let slot_after: Vec<usize> = t
        .slot_fracs
        .iter()
        .take(decoys)
        .map(|f| ((f * c.promos as f64) as usize).min(c.promos))
        .collect();
    let mut slot_boxes = vec![slot_a];
    let mut decoy_nodes = Vec::new();
    if c.promos > 0 || decoys > 0 {
        let aside = b.push(
            Some(body),
            "ASIDE",
            bx(960, y_main, 288, CONTENT_BOTTOM - y_main),
            None,
            None,
        );
        let mut y = y_main;
        let mut next_slot = 0;
        for item in 0..=c.promos {
            while next_slot < slot_after.len() && slot_after[next_slot] == item {
                let sy = align32(y);
                let bbox = bx(SIDEBAR_X, sy, slot_w, slot_h);
                slot_boxes.push(bbox);
                decoy_nodes.push(b.leaf(aside, "SPAN", bbox, Some(&price), None));
                y = sy + slot_h + 16;
                next_slot += 1;
            }
            if item == c.promos {
                break;
            }
            let card = b.push(Some(aside), "DIV", bx(SIDEBAR_X, y, 256, 64), None, None);
            let thumb = photo(rng, 64, 64);
            b.image_leaf(card, SIDEBAR_X, y, &thumb);
            let name = promo_text(rng);
            b.text_leaf(card, "SPAN", SIDEBAR_X + 72, y + 24, &name, ts, pal.text);
            y += PROMO_PITCH;
        }
        debug_assert!(y <= CONTENT_BOTTOM);
    }

    // Footer.
    fill_rect(
        &mut b.img,
        0,
        FOOTER_TOP as i64,
        VIEWPORT as i64,
        (VIEWPORT - FOOTER_TOP) as i64,
        pal.footer,
    );
    let footer = b.push(
        Some(body),
        "FOOTER",
        bx(0, FOOTER_TOP, VIEWPORT, VIEWPORT - FOOTER_TOP),
        None,
        None,
    );
    if c.header {
        for (i, item) in FOOTER.iter().take(t.n_footer).enumerate() {
            b.text_leaf(
                footer,
                "A",
                32 + 160 * i as u32,
                FOOTER_TOP + 24,
                item,
                2,
                pal.footer_text,
            );
        }
    } else {
        b.text_leaf(
            footer,
            "P",
            32,
            FOOTER_TOP + 24,
            "All rights reserved",
            2,
            pal.footer_text,
        );
    }
    if spec.noise {
        let hidden = b.push(Some(body), "DIV", bx(1300, 200, 200, 100), None, None);
        b.push(
            Some(hidden),
            "SPAN",
            bx(1310, 210, 160, 16),
            Some("Hidden offer"),
            Some(16.0),
        );
        b.push(Some(body), "SPAN", bx(640, 640, 0, 0), Some(""), None);
    }

    // Price strings: the same text in every slot, the true node on a uniform slot.
    let py = (slot_h - 8 * style.price_scale) / 2;
    for sb in &slot_boxes {
        draw_text(
            &mut b.img,
            sb.x as i64,
            sb.y as i64 + py as i64,
            &price,
            style.price_scale,
            pal.price,
        );
    }
    let price_slot = rng.random_range(0..=decoys);
    let mut order: Vec<usize> = (0..slot_boxes.len()).filter(|&k| k != price_slot).collect();
    order.insert(0, price_slot);
    let text_box = |sb: &BBox| {
        BBox::new(
            sb.x,
            sb.y + py as f64,
            text_width(&price, style.price_scale) as f64,
            (8 * style.price_scale) as f64,
        )
    };
    let font = Some((8 * style.price_scale) as f64);
    for (node, &slot) in std::iter::once(&price_id)
        .chain(decoy_nodes.iter())
        .zip(&order)
    {
        let bbox = text_box(&slot_boxes[slot]);
        let n = &mut b.nodes[*node as usize];
        n.bbox = bbox;
        n.font_size = font;
        let leaf = b
            .leaves
            .iter_mut()
            .find(|l| l.element_id == *node)
            .expect("price nodes are leaves");
        leaf.bbox = bbox;
    }

    let dom = DomDump::new([VIEWPORT, VIEWPORT], b.nodes, body)?;
    let truth = PageTruth {
        page_id: super::page_id(index),
        domain: t.name.clone(),
        price_id,
        title_id,
        image_id,
        decoy_ids: decoy_nodes,
        price_slot,
        leaves: b.leaves,
    };
    Ok(SynthPage {
        truth,
        dom,
        screenshot: b.img,
        slot_boxes,
    })
}
