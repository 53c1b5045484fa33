//! Ingest of rendered DOM dumps.
//!
//! A dump is the JSON document
//!
//! ```json
//! {"version": "1", "viewport": [1280, 1280], "root": 0,
//!  "nodes": [{"id": 0, "tag": "BODY", "bbox": [0, 0, 1280, 1280],
//!             "text": null, "font_size": null, "children": []}]}
//! ```
//!
//! [`parse_dom_dump`] validates the tree, [`extract_leaves`] turns it into the
//! leaf [`WebElement`]s that get classified, and [`attach_labels`] applies a
//! label manifest.

mod dataset;
mod labels;
mod leaves;

pub use dataset::{DatasetManifest, PageRecord};
pub use labels::{attach_labels, LabelManifest, LabelTable, Labeled, Target};
pub use leaves::{extract_leaves, PruneConfig};

use std::collections::HashMap;
use std::path::PathBuf;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geom::BBox;

/// Schema version understood by [`parse_dom_dump`].
pub const DOM_SCHEMA_VERSION: &str = "1";

#[derive(Debug, Error)]
pub enum DomError {
    #[error("schema error: {0}")]
    Schema(String),
    #[error("cycle through node {0}")]
    Cycle(u32),
    #[error("node {id} has negative or non-finite size ({w} x {h})")]
    Bounds { id: u32, w: f64, h: f64 },
    #[error("no leaf element survives pruning")]
    EmptyPage,
    #[error("duplicate label: {0}")]
    DuplicateLabel(String),
    #[error("label manifest references missing element {0}")]
    MissingElement(u32),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// One node of a rendered DOM tree.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomNode {
    pub id: u32,
    pub tag: String,
    pub bbox: BBox,
    pub text: Option<String>,
    pub font_size: Option<f64>,
    pub children: Vec<u32>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomDump {
    pub version: String,
    pub viewport: [u32; 2],
    pub nodes: Vec<DomNode>,
    pub root: u32,
    #[serde(skip)]
    index: HashMap<u32, usize>,
}

impl DomDump {
    /// Builds and validates a dump from parts.
    pub fn new(viewport: [u32; 2], nodes: Vec<DomNode>, root: u32) -> Result<Self, DomError> {
        let mut dump = DomDump {
            version: DOM_SCHEMA_VERSION.to_string(),
            viewport,
            nodes,
            root,
            index: HashMap::new(),
        };
        dump.validate()?;
        Ok(dump)
    }

    pub fn node(&self, id: u32) -> Option<&DomNode> {
        self.index.get(&id).map(|&i| &self.nodes[i])
    }

    pub fn root_node(&self) -> &DomNode {
        &self.nodes[self.index[&self.root]]
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn viewport_size(&self) -> (f64, f64) {
        (self.viewport[0] as f64, self.viewport[1] as f64)
    }

    /// Serializes to compact JSON in the dump schema.
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("dom dump serializes")
    }

    /// Node ids in depth-first preorder starting at the root.
    pub fn preorder(&self) -> Vec<u32> {
        let mut out = Vec::with_capacity(self.nodes.len());
        let mut stack = vec![self.root];
        while let Some(id) = stack.pop() {
            out.push(id);
            let node = self.node(id).expect("validated");
            stack.extend(node.children.iter().rev());
        }
        out
    }

    fn validate(&mut self) -> Result<(), DomError> {
        if self.version != DOM_SCHEMA_VERSION {
            return Err(DomError::Schema(format!(
                "unsupported version {:?}",
                self.version
            )));
        }
        if self.viewport[0] == 0 || self.viewport[1] == 0 {
            return Err(DomError::Schema("viewport must be positive".into()));
        }
        self.index.clear();
        for (i, n) in self.nodes.iter().enumerate() {
            if self.index.insert(n.id, i).is_some() {
                return Err(DomError::Schema(format!("duplicate node id {}", n.id)));
            }
            if n.tag.is_empty() {
                return Err(DomError::Schema(format!("node {} has an empty tag", n.id)));
            }
            if !n.bbox.is_finite() || n.bbox.w < 0.0 || n.bbox.h < 0.0 {
                return Err(DomError::Bounds {
                    id: n.id,
                    w: n.bbox.w,
                    h: n.bbox.h,
                });
            }
            if let Some(fs) = n.font_size {
                if !fs.is_finite() || fs < 0.0 {
                    return Err(DomError::Schema(format!(
                        "node {} has invalid font_size {fs}",
                        n.id
                    )));
                }
            }
        }
        if !self.index.contains_key(&self.root) {
            return Err(DomError::Schema(format!(
                "root {} is not a node",
                self.root
            )));
        }
        for n in &self.nodes {
            for c in &n.children {
                if !self.index.contains_key(c) {
                    return Err(DomError::Schema(format!(
                        "node {} lists unknown child {c}",
                        n.id
                    )));
                }
            }
        }
        self.check_acyclic()?;
        let mut parent_count = vec![0usize; self.nodes.len()];
        for n in &self.nodes {
            for c in &n.children {
                parent_count[self.index[c]] += 1;
            }
        }
        for (i, &count) in parent_count.iter().enumerate() {
            let id = self.nodes[i].id;
            if count > 1 {
                return Err(DomError::Schema(format!("node {id} has {count} parents")));
            }
            if id == self.root && count != 0 {
                return Err(DomError::Schema("root has a parent".into()));
            }
            if id != self.root && count == 0 {
                return Err(DomError::Schema(format!(
                    "node {id} is not reachable from the root"
                )));
            }
        }
        Ok(())
    }

    fn check_acyclic(&self) -> Result<(), DomError> {
        #[derive(Clone, Copy, PartialEq)]
        enum Mark {
            New,
            Open,
            Done,
        }
        let mut mark = vec![Mark::New; self.nodes.len()];
        for start in 0..self.nodes.len() {
            if mark[start] != Mark::New {
                continue;
            }
            // (node index, next child position)
            let mut stack = vec![(start, 0usize)];
            mark[start] = Mark::Open;
            while let Some(&mut (i, ref mut pos)) = stack.last_mut() {
                let children = &self.nodes[i].children;
                if *pos < children.len() {
                    let c = self.index[&children[*pos]];
                    *pos += 1;
                    match mark[c] {
                        Mark::Open => return Err(DomError::Cycle(self.nodes[c].id)),
                        Mark::New => {
                            mark[c] = Mark::Open;
                            stack.push((c, 0));
                        }
                        Mark::Done => {}
                    }
                } else {
                    mark[i] = Mark::Done;
                    stack.pop();
                }
            }
        }
        Ok(())
    }
}

/// Parses and validates a serialized DOM dump.
///
/// Rejects dumps whose `version` differs from `schema_version`, duplicate or
/// dangling ids, cycles, nodes with several parents and negative sizes.
pub fn parse_dom_dump(raw: &[u8], schema_version: &str) -> Result<DomDump, DomError> {
    let mut dump: DomDump =
        serde_json::from_slice(raw).map_err(|e| DomError::Schema(e.to_string()))?;
    if dump.version != schema_version {
        return Err(DomError::Schema(format!(
            "expected version {schema_version:?}, found {:?}",
            dump.version
        )));
    }
    dump.validate()?;
    Ok(dump)
}

/// Classification label of a leaf element. Discriminants give the logit column order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Label {
    Price = 0,
    Title = 1,
    Image = 2,
    Background = 3,
}

impl Label {
    pub const ALL: [Label; 4] = [Label::Price, Label::Title, Label::Image, Label::Background];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Label> {
        Label::ALL.get(i).copied()
    }
}

/// A leaf of the pruned DOM tree.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WebElement {
    pub element_id: u32,
    pub bbox: BBox,
    pub tag: String,
    pub text: Option<String>,
    pub font_size: Option<f64>,
    pub label: Label,
    pub preorder_index: usize,
    /// Surviving ancestors from the root down to (and including) this element.
    #[serde(default)]
    pub dom_path: Vec<u32>,
}

/// A labeled page: its leaf elements in preorder plus the tree they came from.
#[derive(Clone, Debug, Serialize)]
pub struct Webpage {
    pub page_id: String,
    pub domain: String,
    pub screenshot_ref: Option<PathBuf>,
    pub elements: Vec<WebElement>,
    pub fully_labeled: bool,
    #[serde(skip)]
    pub dom: Option<Arc<DomDump>>,
}

impl Webpage {
    pub fn len(&self) -> usize {
        self.elements.len()
    }

    pub fn is_empty(&self) -> bool {
        self.elements.is_empty()
    }

    pub fn element(&self, element_id: u32) -> Option<&WebElement> {
        self.elements.iter().find(|e| e.element_id == element_id)
    }

    /// Element id labeled with `label`, if exactly one exists.
    pub fn labeled(&self, label: Label) -> Option<u32> {
        let mut it = self.elements.iter().filter(|e| e.label == label);
        match (it.next(), it.next()) {
            (Some(e), None) => Some(e.element_id),
            _ => None,
        }
    }

    pub fn labels(&self) -> Vec<Label> {
        self.elements.iter().map(|e| e.label).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn node(id: u32, children: Vec<u32>) -> serde_json::Value {
        serde_json::json!({"id": id, "tag": "DIV", "bbox": [0, 0, 10, 10],
                           "text": null, "font_size": null, "children": children})
    }

    fn dump(nodes: Vec<serde_json::Value>, root: u32) -> Vec<u8> {
        serde_json::to_vec(&serde_json::json!({
            "version": "1", "viewport": [1280, 1280], "nodes": nodes, "root": root
        }))
        .unwrap()
    }

    #[test]
    fn single_node_dump() {
        let raw = br#"{"version":"1","viewport":[1280,1280],"root":0,
            "nodes":[{"id":0,"tag":"BODY","bbox":[0,0,1280,1280],"text":null,"font_size":null,"children":[]}]}"#;
        let d = parse_dom_dump(raw, "1").unwrap();
        assert_eq!(d.len(), 1);
        let leaves = extract_leaves(&d, &PruneConfig::default()).unwrap();
        assert_eq!(leaves.len(), 1);
    }

    #[test]
    fn self_child_is_cycle() {
        let raw = dump(vec![node(0, vec![0])], 0);
        assert!(matches!(parse_dom_dump(&raw, "1"), Err(DomError::Cycle(0))));
    }

    #[test]
    fn longer_cycle_detected() {
        let raw = dump(
            vec![node(0, vec![1]), node(1, vec![2]), node(2, vec![1])],
            0,
        );
        assert!(matches!(parse_dom_dump(&raw, "1"), Err(DomError::Cycle(_))));
    }

    #[test]
    fn duplicate_ids_rejected() {
        let raw = dump(vec![node(0, vec![1]), node(1, vec![]), node(1, vec![])], 0);
        assert!(matches!(
            parse_dom_dump(&raw, "1"),
            Err(DomError::Schema(_))
        ));
    }

    #[test]
    fn two_parents_rejected() {
        let raw = dump(
            vec![
                node(0, vec![1, 2]),
                node(1, vec![3]),
                node(2, vec![3]),
                node(3, vec![]),
            ],
            0,
        );
        assert!(matches!(
            parse_dom_dump(&raw, "1"),
            Err(DomError::Schema(_))
        ));
    }

    #[test]
    fn negative_size_is_bounds_error() {
        let mut n = node(0, vec![]);
        n["bbox"] = serde_json::json!([0, 0, -1, 5]);
        let raw = dump(vec![n], 0);
        assert!(matches!(
            parse_dom_dump(&raw, "1"),
            Err(DomError::Bounds { id: 0, .. })
        ));
    }

    #[test]
    fn malformed_field_is_schema_error() {
        let mut n = node(0, vec![]);
        n["bbox"] = serde_json::json!([0, 0, 5]);
        let raw = dump(vec![n], 0);
        assert!(matches!(
            parse_dom_dump(&raw, "1"),
            Err(DomError::Schema(_))
        ));
        let raw = dump(vec![node(0, vec![])], 0);
        assert!(matches!(
            parse_dom_dump(&raw, "2"),
            Err(DomError::Schema(_))
        ));
        assert!(matches!(
            parse_dom_dump(b"{", "1"),
            Err(DomError::Schema(_))
        ));
    }

    #[test]
    fn unreachable_node_rejected() {
        let raw = dump(vec![node(0, vec![]), node(1, vec![])], 0);
        assert!(matches!(
            parse_dom_dump(&raw, "1"),
            Err(DomError::Schema(_))
        ));
    }

    #[test]
    fn preorder_is_depth_first_left_to_right() {
        let raw = dump(
            vec![
                node(0, vec![1, 4]),
                node(1, vec![2, 3]),
                node(2, vec![]),
                node(3, vec![]),
                node(4, vec![]),
            ],
            0,
        );
        let d = parse_dom_dump(&raw, "1").unwrap();
        assert_eq!(d.preorder(), vec![0, 1, 2, 3, 4]);
    }
}
