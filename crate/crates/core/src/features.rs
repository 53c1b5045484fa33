//! Hand-crafted per-element features (tag, text and box statistics).
//!
//! Layout of the flattened vector: tag one-hot over the vocabulary, then the
//! binary block `has_currency, has_text, has_number`, then the numeric block
//! `font_size, num_words, x, y, w, h, w/h`. Box values are raw pixels.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use unicode_general_category::{get_general_category, GeneralCategory};

use crate::dom::{WebElement, Webpage};

pub const DEFAULT_VOCAB_SIZE: usize = 32;

/// Currency codes and symbols matched in addition to the Unicode `Sc` category.
pub const CURRENCY_LEXICON: [&str; 9] = ["USD", "EUR", "GBP", "Rs", "RMB", "¥", "€", "£", "$"];

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TagVocabulary {
    pub tags: Vec<String>,
}

impl TagVocabulary {
    /// The `size` most frequent tags over `pages`, ties broken alphabetically.
    pub fn from_pages<'a>(pages: impl IntoIterator<Item = &'a Webpage>, size: usize) -> Self {
        let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
        for p in pages {
            for e in &p.elements {
                *counts.entry(e.tag.as_str()).or_default() += 1;
            }
        }
        let mut ranked: Vec<(&str, usize)> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
        TagVocabulary {
            tags: ranked
                .into_iter()
                .take(size)
                .map(|(t, _)| t.to_string())
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.tags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tags.is_empty()
    }

    pub fn position(&self, tag: &str) -> Option<usize> {
        self.tags.iter().position(|t| t.eq_ignore_ascii_case(tag))
    }

    /// Total feature dimension for this vocabulary.
    pub fn feature_dim(&self) -> usize {
        self.len() + BINARY_COLUMNS.len() + NUMERIC_COLUMNS.len()
    }

    /// Column names in vector order.
    pub fn column_names(&self) -> Vec<String> {
        self.tags
            .iter()
            .map(|t| format!("tag_{t}"))
            .chain(BINARY_COLUMNS.iter().map(|s| s.to_string()))
            .chain(NUMERIC_COLUMNS.iter().map(|s| s.to_string()))
            .collect()
    }
}

const BINARY_COLUMNS: [&str; 3] = ["has_currency", "has_text", "has_number"];
const NUMERIC_COLUMNS: [&str; 7] = ["font_size", "num_words", "x", "y", "w", "h", "w_over_h"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeuristicFeatures {
    pub tag_onehot: Vec<u8>,
    pub font_size: f64,
    pub num_words: usize,
    pub has_currency: u8,
    pub has_text: u8,
    pub has_number: u8,
    /// `(x, y, w, h, w/h)`, pixels.
    pub bbox_feats: [f64; 5],
}

impl HeuristicFeatures {
    pub fn to_vec(&self) -> Vec<f64> {
        let mut v: Vec<f64> = self.tag_onehot.iter().map(|&b| b as f64).collect();
        v.extend([self.has_currency, self.has_text, self.has_number].map(f64::from));
        v.push(self.font_size);
        v.push(self.num_words as f64);
        v.extend(self.bbox_feats);
        v
    }
}

pub fn count_words(text: &str) -> usize {
    text.split_whitespace().count()
}

pub fn has_decimal_digit(text: &str) -> bool {
    text.chars()
        .any(|c| get_general_category(c) == GeneralCategory::DecimalNumber)
}

pub fn has_currency(text: &str) -> bool {
    if text
        .chars()
        .any(|c| get_general_category(c) == GeneralCategory::CurrencySymbol)
    {
        return true;
    }
    CURRENCY_LEXICON
        .iter()
        .any(|code| contains_code(text, code))
}

/// Alphabetic codes only count when not embedded in a longer word.
fn contains_code(text: &str, code: &str) -> bool {
    let alphabetic = code.chars().all(char::is_alphabetic);
    text.match_indices(code).any(|(i, m)| {
        if !alphabetic {
            return true;
        }
        let before = text[..i].chars().next_back();
        let after = text[i + m.len()..].chars().next();
        !before.is_some_and(char::is_alphabetic) && !after.is_some_and(char::is_alphabetic)
    })
}

/// Features of one element. Unknown tags get an all-zero one-hot block.
pub fn heuristic_features(e: &WebElement, vocab: &TagVocabulary) -> HeuristicFeatures {
    let mut tag_onehot = vec![0u8; vocab.len()];
    if let Some(i) = vocab.position(&e.tag) {
        tag_onehot[i] = 1;
    }
    let text = e.text.as_deref().unwrap_or("");
    HeuristicFeatures {
        tag_onehot,
        font_size: e.font_size.unwrap_or(0.0),
        num_words: count_words(text),
        has_currency: has_currency(text) as u8,
        has_text: !text.trim().is_empty() as u8,
        has_number: has_decimal_digit(text) as u8,
        bbox_feats: e.bbox.raw_features(),
    }
}

/// Column manifest written next to an exported feature matrix.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FeatureManifest {
    pub columns: Vec<String>,
    pub binary_columns: usize,
    pub numeric_columns: usize,
    pub vocabulary: Vec<String>,
}

impl FeatureManifest {
    pub fn new(vocab: &TagVocabulary) -> Self {
        FeatureManifest {
            columns: vocab.column_names(),
            binary_columns: vocab.len() + BINARY_COLUMNS.len(),
            numeric_columns: NUMERIC_COLUMNS.len(),
            vocabulary: vocab.tags.clone(),
        }
    }
}

/// One row per element, binary columns first.
pub fn feature_matrix(page: &Webpage, vocab: &TagVocabulary) -> Vec<Vec<f64>> {
    page.elements
        .iter()
        .map(|e| heuristic_features(e, vocab).to_vec())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dom::Label;
    use crate::geom::BBox;

    fn el(tag: &str, text: Option<&str>, bbox: BBox) -> WebElement {
        WebElement {
            element_id: 0,
            bbox,
            tag: tag.into(),
            text: text.map(String::from),
            font_size: None,
            label: Label::Background,
            preorder_index: 0,
            dom_path: vec![],
        }
    }

    fn vocab() -> TagVocabulary {
        TagVocabulary {
            tags: vec!["IMG".into(), "SPAN".into(), "H1".into()],
        }
    }

    #[test]
    fn image_without_text() {
        let f = heuristic_features(&el("IMG", None, BBox::new(0., 0., 400., 300.)), &vocab());
        assert_eq!(f.has_text, 0);
        assert_eq!(f.num_words, 0);
        assert_eq!(f.has_currency, 0);
        assert_eq!(f.bbox_feats[4], 4.0 / 3.0);
        assert_eq!(f.tag_onehot, vec![1, 0, 0]);
    }

    #[test]
    fn price_text() {
        let f = heuristic_features(
            &el("SPAN", Some("$ 12.99"), BBox::new(0., 0., 10., 10.)),
            &vocab(),
        );
        assert_eq!(
            (f.has_currency, f.has_number, f.num_words, f.has_text),
            (1, 1, 2, 1)
        );
    }

    #[test]
    fn unknown_tag_zero_block() {
        let f = heuristic_features(&el("TABLE", Some("x"), BBox::new(0., 0., 1., 1.)), &vocab());
        assert!(f.tag_onehot.iter().all(|&b| b == 0));
        assert_eq!(f.to_vec().len(), vocab().feature_dim());
    }

    #[test]
    fn currency_lexicon() {
        assert!(has_currency("Rs. 499"));
        assert!(has_currency("49 EUR"));
        assert!(has_currency("₹ 100"));
        assert!(!has_currency("Brsome text"));
        assert!(!has_currency("USDA organic"));
        assert!(!has_currency("plain words"));
    }

    #[test]
    fn vocabulary_by_frequency() {
        let mk = |tags: &[&str]| Webpage {
            page_id: "p".into(),
            domain: "d".into(),
            screenshot_ref: None,
            elements: tags
                .iter()
                .map(|t| el(t, None, BBox::new(0., 0., 1., 1.)))
                .collect(),
            fully_labeled: false,
            dom: None,
        };
        let pages = [mk(&["P", "P", "IMG"]), mk(&["SPAN", "P", "IMG", "A"])];
        let v = TagVocabulary::from_pages(&pages, 3);
        assert_eq!(v.tags, vec!["P", "IMG", "A"]);
        assert_eq!(v.feature_dim(), 3 + 10);
        let m = FeatureManifest::new(&v);
        assert_eq!(m.columns.len(), v.feature_dim());
        assert_eq!(m.columns[3], "has_currency");
    }
}
