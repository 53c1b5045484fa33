use std::collections::BTreeMap;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use super::{DomError, Label, WebElement};

/// The three non-background classes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Target {
    Price,
    Title,
    Image,
}

impl Target {
    pub const ALL: [Target; 3] = [Target::Price, Target::Title, Target::Image];

    pub fn label(self) -> Label {
        match self {
            Target::Price => Label::Price,
            Target::Title => Label::Title,
            Target::Image => Label::Image,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Target::Price => "price",
            Target::Title => "title",
            Target::Image => "image",
        }
    }
}

/// Label assignments for one page. May contain repeated classes when built
/// from a malformed source; [`attach_labels`] rejects those.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LabelManifest {
    pub assignments: Vec<(Target, u32)>,
}

impl LabelManifest {
    pub fn new(price: Option<u32>, title: Option<u32>, image: Option<u32>) -> Self {
        let assignments = [
            (Target::Price, price),
            (Target::Title, title),
            (Target::Image, image),
        ]
        .into_iter()
        .filter_map(|(t, id)| id.map(|id| (t, id)))
        .collect();
        LabelManifest { assignments }
    }

    pub fn get(&self, target: Target) -> Option<u32> {
        self.assignments
            .iter()
            .find(|(t, _)| *t == target)
            .map(|&(_, id)| id)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Labeled {
    pub elements: Vec<WebElement>,
    /// True when each of PRICE, TITLE and IMAGE was assigned exactly once.
    pub fully_labeled: bool,
}

/// Applies `labels` to `elements`; everything not referenced becomes BACKGROUND.
pub fn attach_labels(
    mut elements: Vec<WebElement>,
    labels: &LabelManifest,
) -> Result<Labeled, DomError> {
    let mut seen_class = [false; 3];
    let mut seen_id = BTreeMap::new();
    for &(target, id) in &labels.assignments {
        let slot = &mut seen_class[target.label().index()];
        if *slot {
            return Err(DomError::DuplicateLabel(format!(
                "{} assigned twice",
                target.name()
            )));
        }
        *slot = true;
        if let Some(prev) = seen_id.insert(id, target) {
            return Err(DomError::DuplicateLabel(format!(
                "element {id} labeled both {} and {}",
                prev.name(),
                target.name()
            )));
        }
        if !elements.iter().any(|e| e.element_id == id) {
            return Err(DomError::MissingElement(id));
        }
    }
    for e in &mut elements {
        e.label = seen_id
            .get(&e.element_id)
            .map_or(Label::Background, |t| t.label());
    }
    Ok(Labeled {
        elements,
        fully_labeled: seen_class.iter().all(|&s| s),
    })
}

#[derive(Debug, Serialize, Deserialize)]
struct LabelRow {
    page_id: String,
    price_id: Option<u32>,
    title_id: Option<u32>,
    image_id: Option<u32>,
}

/// The label manifest CSV: `page_id,price_id,title_id,image_id`, empty cells for missing labels.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LabelTable {
    pub pages: BTreeMap<String, LabelManifest>,
}

impl LabelTable {
    pub fn read<R: Read>(reader: R) -> Result<Self, DomError> {
        let mut rdr = csv::Reader::from_reader(reader);
        check_header(
            rdr.headers()?,
            &["page_id", "price_id", "title_id", "image_id"],
        )?;
        let mut pages: BTreeMap<String, LabelManifest> = BTreeMap::new();
        for row in rdr.deserialize() {
            let row: LabelRow = row?;
            // Repeated rows for a page merge, so duplicates surface in attach_labels.
            let m = pages.entry(row.page_id).or_default();
            m.assignments
                .extend(LabelManifest::new(row.price_id, row.title_id, row.image_id).assignments);
        }
        Ok(LabelTable { pages })
    }

    pub fn write<W: Write>(&self, writer: W) -> Result<(), DomError> {
        let mut w = csv::Writer::from_writer(writer);
        for (page_id, m) in &self.pages {
            w.serialize(LabelRow {
                page_id: page_id.clone(),
                price_id: m.get(Target::Price),
                title_id: m.get(Target::Title),
                image_id: m.get(Target::Image),
            })?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn get(&self, page_id: &str) -> Option<&LabelManifest> {
        self.pages.get(page_id)
    }
}

pub(super) fn check_header(found: &csv::StringRecord, expected: &[&str]) -> Result<(), DomError> {
    let got: Vec<&str> = found.iter().map(str::trim).collect();
    if got != expected {
        return Err(DomError::Schema(format!(
            "expected CSV header {expected:?}, found {got:?}"
        )));
    }
    Ok(())
}
