//! Context graphs over the leaf elements of a page.
//!
//! Each element is linked to the `k` leaves closest to it in the DOM. The
//! default distance is the gap between preorder leaf indices; tree-path
//! distance (edges between the two leaves in the pruned tree) is available
//! as an alternative.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::dom::WebElement;

/// Default neighborhood size.
pub const DEFAULT_K: usize = 24;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GraphMetric {
    #[default]
    Preorder,
    TreePath,
}

impl std::str::FromStr for GraphMetric {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "preorder" => Ok(GraphMetric::Preorder),
            "tree_path" | "tree-path" => Ok(GraphMetric::TreePath),
            other => Err(format!("unknown graph metric {other:?}")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ContextGraph {
    pub page_id: String,
    pub k: usize,
    /// element id → neighbor element ids, ascending by preorder index.
    pub neighbors: BTreeMap<u32, Vec<u32>>,
    /// Element ids by preorder index.
    #[serde(skip)]
    ids: Vec<u32>,
    /// Neighbor preorder indices by preorder index.
    #[serde(skip)]
    index_lists: Vec<Vec<usize>>,
}

impl ContextGraph {
    fn from_index_lists(
        page_id: &str,
        k: usize,
        ids: Vec<u32>,
        index_lists: Vec<Vec<usize>>,
    ) -> Self {
        let neighbors = ids
            .iter()
            .zip(&index_lists)
            .map(|(&id, list)| (id, list.iter().map(|&j| ids[j]).collect()))
            .collect();
        ContextGraph {
            page_id: page_id.to_string(),
            k,
            neighbors,
            ids,
            index_lists,
        }
    }

    /// Neighbor lists addressed by preorder index, the layout the model consumes.
    pub fn index_lists(&self) -> &[Vec<usize>] {
        &self.index_lists
    }

    pub fn neighbor_ids(&self, element_id: u32) -> Option<&[u32]> {
        self.neighbors.get(&element_id).map(Vec::as_slice)
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// JSON export `{"page_id":..., "k":..., "neighbors": {id: [ids...]}}`.
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("graph serializes")
    }

    /// Context-free graph: every neighborhood empty.
    pub fn empty(page_id: &str, elements: &[WebElement]) -> Self {
        build_graph(page_id, elements, 0)
    }
}

/// Elements sorted by preorder index; the result is independent of storage order.
fn by_preorder(elements: &[WebElement]) -> Vec<&WebElement> {
    let mut v: Vec<&WebElement> = elements.iter().collect();
    v.sort_by_key(|e| e.preorder_index);
    v
}

/// For each leaf, the `min(k, N-1)` leaves nearest in preorder, ties toward
/// the smaller preorder index, listed in ascending preorder.
pub fn build_graph(page_id: &str, elements: &[WebElement], k: usize) -> ContextGraph {
    let sorted = by_preorder(elements);
    let n = sorted.len();
    let take = k.min(n.saturating_sub(1));
    let mut lists = Vec::with_capacity(n);
    for i in 0..n {
        let mut list = Vec::with_capacity(take);
        let mut d = 1;
        while list.len() < take {
            if i >= d {
                list.push(i - d);
            }
            if list.len() < take && i + d < n {
                list.push(i + d);
            }
            d += 1;
        }
        list.sort_unstable();
        lists.push(list);
    }
    ContextGraph::from_index_lists(
        page_id,
        k,
        sorted.iter().map(|e| e.element_id).collect(),
        lists,
    )
}

/// Like [`build_graph`] but with a selectable distance. Tree-path ties fall
/// back to preorder distance, then to the smaller preorder index.
pub fn build_graph_with(
    page_id: &str,
    elements: &[WebElement],
    k: usize,
    metric: GraphMetric,
) -> ContextGraph {
    match metric {
        GraphMetric::Preorder => build_graph(page_id, elements, k),
        GraphMetric::TreePath => {
            let sorted = by_preorder(elements);
            let n = sorted.len();
            let take = k.min(n.saturating_sub(1));
            let lists = (0..n)
                .map(|i| {
                    let mut cand: Vec<(usize, usize, usize)> = (0..n)
                        .filter(|&j| j != i)
                        .map(|j| {
                            (
                                tree_distance(&sorted[i].dom_path, &sorted[j].dom_path),
                                i.abs_diff(j),
                                j,
                            )
                        })
                        .collect();
                    cand.sort_unstable();
                    let mut list: Vec<usize> = cand.into_iter().take(take).map(|c| c.2).collect();
                    list.sort_unstable();
                    list
                })
                .collect();
            ContextGraph::from_index_lists(
                page_id,
                k,
                sorted.iter().map(|e| e.element_id).collect(),
                lists,
            )
        }
    }
}

/// Number of tree edges between two nodes given their root paths.
pub fn tree_distance(a: &[u32], b: &[u32]) -> usize {
    let common = a.iter().zip(b).take_while(|(x, y)| x == y).count();
    a.len() + b.len() - 2 * common
}

/// Every other leaf is a neighbor.
pub fn neighborhood_complete(page_id: &str, elements: &[WebElement]) -> ContextGraph {
    let sorted = by_preorder(elements);
    let n = sorted.len();
    let lists = (0..n)
        .map(|i| (0..n).filter(|&j| j != i).collect())
        .collect();
    ContextGraph::from_index_lists(
        page_id,
        n.saturating_sub(1),
        sorted.iter().map(|e| e.element_id).collect(),
        lists,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dom::Label;
    use crate::geom::BBox;

    fn leaves(n: usize) -> Vec<WebElement> {
        (0..n)
            .map(|i| WebElement {
                element_id: 100 + i as u32,
                bbox: BBox::new(0.0, 0.0, 1.0, 1.0),
                tag: "P".into(),
                text: None,
                font_size: None,
                label: Label::Background,
                preorder_index: i,
                dom_path: vec![0, 100 + i as u32],
            })
            .collect()
    }

    #[test]
    fn five_leaves_k2_middle() {
        let g = build_graph("p", &leaves(5), 2);
        assert_eq!(g.neighbor_ids(102).unwrap(), &[101, 103]);
        // At the edge the window extends to one side only.
        assert_eq!(g.neighbor_ids(100).unwrap(), &[101, 102]);
    }

    #[test]
    fn ties_go_to_smaller_index() {
        let g = build_graph("p", &leaves(5), 3);
        assert_eq!(g.index_lists()[2], vec![0, 1, 3]);
    }

    #[test]
    fn k_zero_and_single_leaf_are_empty() {
        let g = build_graph("p", &leaves(6), 0);
        assert!(g.neighbors.values().all(|v| v.is_empty()));
        let g = build_graph("p", &leaves(1), 24);
        assert!(g.neighbors.values().all(|v| v.is_empty()));
        assert_eq!(DEFAULT_K, 24);
    }

    #[test]
    fn complete_graph() {
        let g = neighborhood_complete("p", &leaves(3));
        assert!(g.neighbors.values().all(|v| v.len() == 2));
        let g = neighborhood_complete("p", &leaves(1));
        assert!(g.neighbors.values().all(|v| v.is_empty()));
        let els = leaves(9);
        assert_eq!(
            neighborhood_complete("p", &els).neighbors,
            build_graph("p", &els, 8).neighbors
        );
    }

    #[test]
    fn tree_metric_prefers_siblings() {
        let mut els = leaves(4);
        // 0 and 1 under div 1; 2 and 3 under div 2.
        els[0].dom_path = vec![0, 1, 10];
        els[1].dom_path = vec![0, 1, 11];
        els[2].dom_path = vec![0, 2, 12];
        els[3].dom_path = vec![0, 2, 13];
        let g = build_graph_with("p", &els, 1, GraphMetric::TreePath);
        assert_eq!(g.index_lists()[1], vec![0]);
        assert_eq!(g.index_lists()[2], vec![3]);
        assert_eq!(tree_distance(&[0, 1, 10], &[0, 2, 13]), 4);
    }

    #[test]
    fn json_export_shape() {
        let g = build_graph("pg", &leaves(3), 1);
        let v: serde_json::Value = serde_json::from_str(&g.to_json()).unwrap();
        assert_eq!(v["page_id"], "pg");
        assert_eq!(v["k"], 1);
        assert_eq!(v["neighbors"]["101"], serde_json::json!([100]));
    }
}
