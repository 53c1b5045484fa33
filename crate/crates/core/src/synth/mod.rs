//! Deterministic synthetic product pages with ambiguous prices.
//!
//! Every page shows one product (image, title, price) plus background
//! content, and `n_decoy_prices` extra copies of the price string. The copies
//! are pixel-identical and the true price's slot is chosen uniformly, so
//! only DOM context tells the true price apart. Templates act as domains:
//! each has its own palette and layout geometry.
//!
//! [`write_dataset`] emits a directory readable by [`crate::dom`]:
//!
//! ```text
//! spec.json        the generating spec
//! manifest.csv     page_id,domain,screenshot_path,dom_path
//! labels.csv       page_id,price_id,title_id,image_id
//! leaves.jsonl     one PageTruth per line, the generator's leaf manifest
//! pages/<id>.png   screenshot
//! pages/<id>.json  DOM dump
//! ```

mod page;
mod template;

pub use page::{LeafRecord, PageTruth, SynthPage};
pub use template::{Palette, Template};

use std::collections::BTreeMap;
use std::io::{BufRead, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dom::{DatasetManifest, DomError, LabelTable, PageRecord};

/// Side of every generated screenshot.
pub const VIEWPORT: u32 = 1280;
/// Most decoys the sidebar layout can hold.
pub const MAX_DECOYS: usize = 3;
const TEMPLATE_STREAM: u64 = 1 << 40;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid synth spec: {0}")]
    Spec(String),
    #[error("dom: {0}")]
    Dom(#[from] DomError),
    #[error("image: {0}")]
    Image(#[from] image::ImageError),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("toml: {0}")]
    Toml(#[from] toml::de::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RenderStyle {
    /// Glyph scale of title and breadcrumb, 3 or 4.
    pub title_scale: u32,
    /// Glyph scale of price strings, 2 or 3.
    pub price_scale: u32,
    /// Glyph scale of details and promo text, 1 or 2.
    pub text_scale: u32,
    /// Random palette per template; a single fixed palette otherwise.
    pub vary_palette: bool,
}

impl Default for RenderStyle {
    fn default() -> Self {
        RenderStyle {
            title_scale: 4,
            price_scale: 3,
            text_scale: 2,
            vary_palette: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub n_pages: usize,
    /// Templates; page `i` uses template `i mod n_domains`.
    pub n_domains: usize,
    /// Leaves per page that survive pruning.
    pub elements_per_page: usize,
    pub n_decoy_prices: usize,
    pub seed: u64,
    /// Adds nodes that pruning removes: a script, an off-screen block, zero-size spans.
    pub noise: bool,
    pub render_style: RenderStyle,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            n_pages: 100,
            n_domains: 10,
            elements_per_page: 90,
            n_decoy_prices: 1,
            seed: 0,
            noise: true,
            render_style: RenderStyle::default(),
        }
    }
}

impl SynthSpec {
    pub fn from_toml(text: &str) -> Result<Self, SynthError> {
        let spec: SynthSpec = toml::from_str(text)?;
        spec.validate()?;
        Ok(spec)
    }

    /// Checks the spec against every template geometry the generator can draw.
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: String| Err(SynthError::Spec(m));
        if self.n_pages == 0 || self.n_domains == 0 {
            return bad("n_pages and n_domains must be positive".into());
        }
        if self.elements_per_page < 4 {
            return bad(format!(
                "elements_per_page must be at least 4, got {}",
                self.elements_per_page
            ));
        }
        if self.n_decoy_prices > MAX_DECOYS {
            return bad(format!(
                "at most {MAX_DECOYS} decoy prices fit, got {}",
                self.n_decoy_prices
            ));
        }
        let r = &self.render_style;
        if !(3..=4).contains(&r.title_scale)
            || !(2..=3).contains(&r.price_scale)
            || !(1..=2).contains(&r.text_scale)
        {
            return bad(format!("render scales out of range: {r:?}"));
        }
        for header_h in [64, 96] {
            for image_size in [320, 384] {
                for n_nav in 4..=6 {
                    for n_footer in 3..=5 {
                        let t = Template {
                            header_h,
                            image_size,
                            n_nav,
                            n_footer,
                            ..Template::random(
                                0,
                                &mut ChaCha8Rng::seed_from_u64(0),
                                true,
                                self.n_decoy_prices,
                            )
                        };
                        page::counts(self, &t)?;
                    }
                }
            }
        }
        Ok(())
    }

    /// The per-domain templates, a pure function of `seed` and the style.
    pub fn templates(&self) -> Vec<Template> {
        (0..self.n_domains)
            .map(|d| {
                let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
                rng.set_stream(TEMPLATE_STREAM + d as u64);
                Template::random(
                    d,
                    &mut rng,
                    !self.render_style.vary_palette,
                    self.n_decoy_prices,
                )
            })
            .collect()
    }
}

pub fn page_id(index: usize) -> String {
    format!("page{index:05}")
}

/// Generates page `index` (0-based). Pages are independent: each draws from
/// its own stream of the spec seed.
pub fn generate_page(
    spec: &SynthSpec,
    templates: &[Template],
    index: usize,
) -> Result<SynthPage, SynthError> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(index as u64);
    page::build_page(spec, &templates[index % templates.len()], index, &mut rng)
}

/// All pages in memory. Each screenshot takes about 5 MB; large datasets go
/// through [`write_dataset`].
pub fn generate(spec: &SynthSpec) -> Result<Vec<SynthPage>, SynthError> {
    spec.validate()?;
    let templates = spec.templates();
    (0..spec.n_pages)
        .into_par_iter()
        .map(|i| generate_page(spec, &templates, i))
        .collect()
}

/// Paths of a written dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthDataset {
    pub dir: PathBuf,
    pub manifest: PathBuf,
    pub labels: PathBuf,
    pub leaves: PathBuf,
}

impl SynthDataset {
    pub fn at(dir: &Path) -> Self {
        SynthDataset {
            dir: dir.to_path_buf(),
            manifest: dir.join("manifest.csv"),
            labels: dir.join("labels.csv"),
            leaves: dir.join("leaves.jsonl"),
        }
    }
}

/// Generates the dataset into `out`, streaming pages to disk. Output bytes
/// depend only on the spec.
pub fn write_dataset(spec: &SynthSpec, out: &Path) -> Result<SynthDataset, SynthError> {
    spec.validate()?;
    let templates = spec.templates();
    std::fs::create_dir_all(out.join("pages"))?;
    std::fs::write(out.join("spec.json"), serde_json::to_string_pretty(spec)?)?;
    let truths: Vec<PageTruth> = (0..spec.n_pages)
        .into_par_iter()
        .map(|i| -> Result<PageTruth, SynthError> {
            let p = generate_page(spec, &templates, i)?;
            let id = &p.truth.page_id;
            p.screenshot.save_with_format(
                out.join("pages").join(format!("{id}.png")),
                image::ImageFormat::Png,
            )?;
            std::fs::write(
                out.join("pages").join(format!("{id}.json")),
                p.dom.to_json(),
            )?;
            Ok(p.truth)
        })
        .collect::<Result<_, _>>()?;

    let ds = SynthDataset::at(out);
    let manifest = DatasetManifest {
        base_dir: out.to_path_buf(),
        pages: truths
            .iter()
            .map(|t| PageRecord {
                page_id: t.page_id.clone(),
                domain: t.domain.clone(),
                screenshot_path: PathBuf::from(format!("pages/{}.png", t.page_id)),
                dom_path: PathBuf::from(format!("pages/{}.json", t.page_id)),
            })
            .collect(),
    };
    manifest.write(std::fs::File::create(&ds.manifest)?)?;
    let labels = LabelTable {
        pages: truths
            .iter()
            .map(|t| (t.page_id.clone(), t.labels()))
            .collect::<BTreeMap<_, _>>(),
    };
    labels.write(std::fs::File::create(&ds.labels)?)?;
    write_truths(&truths, std::fs::File::create(&ds.leaves)?)?;
    Ok(ds)
}

/// Writes one JSON object per line.
pub fn write_truths<W: Write>(truths: &[PageTruth], w: W) -> Result<(), SynthError> {
    let mut w = BufWriter::new(w);
    for t in truths {
        serde_json::to_writer(&mut w, t)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_truths<R: std::io::Read>(r: R) -> Result<Vec<PageTruth>, SynthError> {
    let mut out = Vec::new();
    for line in std::io::BufReader::new(r).lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}
