use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::{DomDump, DomError, Label, WebElement};

/// Rules deciding which DOM nodes can render content.
///
/// A node fails when its box has zero area, lies fully outside the viewport,
/// or its tag is blocklisted. Blocklisted nodes take their whole subtree with
/// them; geometric failures remove only the node itself, so visible
/// descendants of a collapsed wrapper still count.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PruneConfig {
    /// Overrides the dump's own viewport when set.
    pub viewport: Option<(f64, f64)>,
    pub tag_blocklist: BTreeSet<String>,
}

impl Default for PruneConfig {
    fn default() -> Self {
        PruneConfig {
            viewport: None,
            tag_blocklist: ["SCRIPT", "STYLE", "NOSCRIPT", "META", "LINK"]
                .into_iter()
                .map(String::from)
                .collect(),
        }
    }
}

impl PruneConfig {
    fn blocked(&self, tag: &str) -> bool {
        self.tag_blocklist.contains(&tag.to_ascii_uppercase())
    }
}

/// Extracts the surviving leaves of `dom` in preorder.
///
/// A surviving node is a leaf when none of its descendants survive. Leaf
/// boxes are clipped to the viewport.
pub fn extract_leaves(dom: &DomDump, rules: &PruneConfig) -> Result<Vec<WebElement>, DomError> {
    let (vw, vh) = rules.viewport.unwrap_or_else(|| dom.viewport_size());
    let mut out = Vec::new();
    let mut path: Vec<u32> = Vec::new();
    walk(dom, dom.root, rules, vw, vh, &mut path, &mut out);
    if out.is_empty() {
        return Err(DomError::EmptyPage);
    }
    for (i, e) in out.iter_mut().enumerate() {
        e.preorder_index = i;
    }
    Ok(out)
}

/// Returns true when the subtree rooted at `id` contributed at least one surviving node.
fn walk(
    dom: &DomDump,
    id: u32,
    rules: &PruneConfig,
    vw: f64,
    vh: f64,
    path: &mut Vec<u32>,
    out: &mut Vec<WebElement>,
) -> bool {
    let node = dom.node(id).expect("validated dump");
    if rules.blocked(&node.tag) {
        return false;
    }
    let passes = node.bbox.area() > 0.0 && !node.bbox.outside(vw, vh);
    if passes {
        path.push(id);
    }
    let mut any_child = false;
    for &c in &node.children {
        any_child |= walk(dom, c, rules, vw, vh, path, out);
    }
    if passes {
        if !any_child {
            out.push(WebElement {
                element_id: id,
                bbox: node.bbox.clip(vw, vh),
                tag: node.tag.to_ascii_uppercase(),
                text: node.text.clone(),
                font_size: node.font_size,
                label: Label::Background,
                preorder_index: 0,
                dom_path: path.clone(),
            });
        }
        path.pop();
    }
    passes || any_child
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dom::{DomNode, DOM_SCHEMA_VERSION};
    use crate::geom::BBox;

    fn n(id: u32, tag: &str, bbox: [f64; 4], children: Vec<u32>) -> DomNode {
        DomNode {
            id,
            tag: tag.into(),
            bbox: bbox.into(),
            text: None,
            font_size: None,
            children,
        }
    }

    fn tree(nodes: Vec<DomNode>) -> DomDump {
        DomDump::new([1280, 1280], nodes, 0).unwrap()
    }

    #[test]
    fn four_leaves_in_preorder() {
        let d = tree(vec![
            n(0, "BODY", [0., 0., 1280., 1280.], vec![1, 2]),
            n(1, "DIV", [0., 0., 600., 600.], vec![3, 4]),
            n(2, "DIV", [600., 0., 600., 600.], vec![5, 6]),
            n(3, "P", [0., 0., 10., 10.], vec![]),
            n(4, "P", [0., 20., 10., 10.], vec![]),
            n(5, "P", [600., 0., 10., 10.], vec![]),
            n(6, "P", [600., 20., 10., 10.], vec![]),
        ]);
        let leaves = extract_leaves(&d, &PruneConfig::default()).unwrap();
        let ids: Vec<u32> = leaves.iter().map(|e| e.element_id).collect();
        assert_eq!(ids, vec![3, 4, 5, 6]);
        let idx: Vec<usize> = leaves.iter().map(|e| e.preorder_index).collect();
        assert_eq!(idx, vec![0, 1, 2, 3]);
        assert_eq!(leaves[2].dom_path, vec![0, 2, 5]);
        assert_eq!(DOM_SCHEMA_VERSION, d.version);
    }

    #[test]
    fn zero_width_leaves_pruned() {
        let d = tree(vec![
            n(0, "BODY", [0., 0., 1280., 1280.], vec![1, 2]),
            n(1, "SPAN", [0., 0., 0., 10.], vec![]),
            n(2, "SPAN", [0., 0., 5., 10.], vec![]),
        ]);
        let leaves = extract_leaves(&d, &PruneConfig::default()).unwrap();
        assert_eq!(leaves.len(), 1);
        assert_eq!(leaves[0].element_id, 2);
    }

    #[test]
    fn parent_of_pruned_children_becomes_leaf() {
        let d = tree(vec![
            n(0, "BODY", [0., 0., 1280., 1280.], vec![1]),
            n(1, "DIV", [0., 0., 100., 100.], vec![2, 3]),
            n(2, "SCRIPT", [0., 0., 100., 100.], vec![]),
            n(3, "SPAN", [1300., 0., 5., 10.], vec![]),
        ]);
        let leaves = extract_leaves(&d, &PruneConfig::default()).unwrap();
        assert_eq!(
            leaves.iter().map(|e| e.element_id).collect::<Vec<_>>(),
            vec![1]
        );
    }

    #[test]
    fn collapsed_wrapper_keeps_visible_children() {
        let d = tree(vec![
            n(0, "BODY", [0., 0., 1280., 1280.], vec![1]),
            n(1, "DIV", [0., 0., 0., 0.], vec![2]),
            n(2, "SPAN", [5., 5., 5., 10.], vec![]),
        ]);
        let leaves = extract_leaves(&d, &PruneConfig::default()).unwrap();
        assert_eq!(leaves.len(), 1);
        assert_eq!(leaves[0].dom_path, vec![0, 2]);
    }

    #[test]
    fn blocklisted_subtree_dropped_entirely() {
        let d = tree(vec![
            n(0, "BODY", [0., 0., 1280., 1280.], vec![1, 3]),
            n(1, "noscript", [0., 0., 100., 100.], vec![2]),
            n(2, "IMG", [0., 0., 100., 100.], vec![]),
            n(3, "P", [0., 200., 100., 100.], vec![]),
        ]);
        let leaves = extract_leaves(&d, &PruneConfig::default()).unwrap();
        assert_eq!(
            leaves.iter().map(|e| e.element_id).collect::<Vec<_>>(),
            vec![3]
        );
    }

    #[test]
    fn everything_pruned_is_empty_page() {
        let d = tree(vec![n(0, "BODY", [0., 0., 0., 0.], vec![])]);
        assert!(matches!(
            extract_leaves(&d, &PruneConfig::default()),
            Err(DomError::EmptyPage)
        ));
    }

    #[test]
    fn boxes_clipped_to_viewport() {
        let d = tree(vec![
            n(0, "BODY", [0., 0., 1280., 1280.], vec![1]),
            n(1, "IMG", [1200., 1250., 200., 100.], vec![]),
        ]);
        let leaves = extract_leaves(&d, &PruneConfig::default()).unwrap();
        assert_eq!(leaves[0].bbox, BBox::new(1200., 1250., 80., 30.));
    }
}
