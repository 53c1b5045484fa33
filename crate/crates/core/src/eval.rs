//! Per-class detection, accuracy metrics and domain-disjoint folds.
//!
//! Each class picks one element per page: the element with the largest
//! softmax probability over the page's elements in that class's logit
//! column. Ranking on the column alone makes the choice invariant to a
//! positive rescaling of the column; it coincides with the element of
//! highest logit, ties going to the smaller preorder index.

use std::collections::{BTreeMap, BTreeSet};

use ndarray::ArrayView2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dom::{DatasetManifest, Target};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("no ground truth for page {0:?}")]
    MissingTruth(String),
    #[error("{domains} distinct domains cannot fill {folds} folds")]
    TooFewDomains { domains: usize, folds: usize },
}

/// Ground-truth `[price, title, image]` element ids by page id.
pub type Truth = BTreeMap<String, [u32; 3]>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub page_id: String,
    pub price_id: u32,
    pub title_id: u32,
    pub image_id: u32,
    /// Element ids in preorder; rows of `probs`.
    pub element_ids: Vec<u32>,
    /// Per element, the softmax over elements of the price, title and image columns.
    pub probs: Vec<[f64; 3]>,
}

impl Prediction {
    pub fn id(&self, t: Target) -> u32 {
        match t {
            Target::Price => self.price_id,
            Target::Title => self.title_id,
            Target::Image => self.image_id,
        }
    }

    /// Preorder rows ranked by probability for `t`, best first, ties by index.
    pub fn ranking(&self, t: Target) -> Vec<usize> {
        let c = t.label().index();
        let mut idx: Vec<usize> = (0..self.element_ids.len()).collect();
        idx.sort_by(|&a, &b| {
            self.probs[b][c]
                .total_cmp(&self.probs[a][c])
                .then(a.cmp(&b))
        });
        idx
    }
}

/// Per-class argmax over the rows of `logits` (preorder, ids in `element_ids`).
pub fn predict_page(page_id: &str, element_ids: &[u32], logits: ArrayView2<'_, f64>) -> Prediction {
    assert!(
        logits.nrows() >= 1 && logits.nrows() == element_ids.len(),
        "one logit row per element"
    );
    let n = logits.nrows();
    let mut probs = vec![[0.0; 3]; n];
    let mut winners = [0usize; 3];
    for t in Target::ALL {
        let c = t.label().index();
        let col = logits.column(c);
        let mut best = 0;
        for i in 1..n {
            if col[i] > col[best] {
                best = i;
            }
        }
        winners[c] = best;
        let m = col[best];
        let z: f64 = col.iter().map(|&v| (v - m).exp()).sum();
        for i in 0..n {
            probs[i][c] = (col[i] - m).exp() / z;
        }
    }
    Prediction {
        page_id: page_id.to_string(),
        price_id: element_ids[winners[0]],
        title_id: element_ids[winners[1]],
        image_id: element_ids[winners[2]],
        element_ids: element_ids.to_vec(),
        probs,
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ClassAccuracy {
    pub price: f64,
    pub title: f64,
    pub image: f64,
}

impl ClassAccuracy {
    pub fn get(&self, t: Target) -> f64 {
        match t {
            Target::Price => self.price,
            Target::Title => self.title,
            Target::Image => self.image,
        }
    }

    pub fn mean(&self) -> f64 {
        (self.price + self.title + self.image) / 3.0
    }
}

/// Fraction of pages whose true element ranks within the top `k` per class
/// (`k` clamped to the page size).
pub fn topk_accuracy(
    preds: &[Prediction],
    truth: &Truth,
    k: usize,
) -> Result<ClassAccuracy, EvalError> {
    if preds.is_empty() {
        return Ok(ClassAccuracy::default());
    }
    let mut hits = [0usize; 3];
    for p in preds {
        let t = truth
            .get(&p.page_id)
            .ok_or_else(|| EvalError::MissingTruth(p.page_id.clone()))?;
        for (c, target) in Target::ALL.into_iter().enumerate() {
            let kk = k.min(p.element_ids.len());
            if p.ranking(target)[..kk]
                .iter()
                .any(|&i| p.element_ids[i] == t[c])
            {
                hits[c] += 1;
            }
        }
    }
    let n = preds.len() as f64;
    Ok(ClassAccuracy {
        price: hits[0] as f64 / n,
        title: hits[1] as f64 / n,
        image: hits[2] as f64 / n,
    })
}

/// Fraction of pages where the predicted element is exactly the true one.
pub fn cross_domain_accuracy(
    preds: &[Prediction],
    truth: &Truth,
) -> Result<ClassAccuracy, EvalError> {
    if preds.is_empty() {
        return Ok(ClassAccuracy::default());
    }
    let mut hits = [0usize; 3];
    for p in preds {
        let t = truth
            .get(&p.page_id)
            .ok_or_else(|| EvalError::MissingTruth(p.page_id.clone()))?;
        for (c, target) in Target::ALL.into_iter().enumerate() {
            hits[c] += (p.id(target) == t[c]) as usize;
        }
    }
    let n = preds.len() as f64;
    Ok(ClassAccuracy {
        price: hits[0] as f64 / n,
        title: hits[1] as f64 / n,
        image: hits[2] as f64 / n,
    })
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldSplit {
    pub fold_id: usize,
    pub train_domains: BTreeSet<String>,
    pub val_domains: BTreeSet<String>,
    pub test_domains: BTreeSet<String>,
}

/// Domain groups: the `n_folds` largest domains (ties by name) seed one
/// group each, the rest are shuffled by `seed` and dealt round-robin. Fold
/// `f` tests group `f`, validates on group `f + 1 mod n`, trains on the rest.
pub fn make_folds(
    domain_counts: &[(String, usize)],
    n_folds: usize,
    seed: u64,
) -> Result<Vec<FoldSplit>, EvalError> {
    let mut domains: Vec<(String, usize)> = domain_counts.to_vec();
    domains.sort_by(|a, b| a.0.cmp(&b.0));
    domains.dedup_by(|a, b| {
        if a.0 == b.0 {
            b.1 += a.1;
            true
        } else {
            false
        }
    });
    if n_folds < 3 || domains.len() < n_folds {
        return Err(EvalError::TooFewDomains {
            domains: domains.len(),
            folds: n_folds,
        });
    }
    domains.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    let mut groups: Vec<BTreeSet<String>> = vec![BTreeSet::new(); n_folds];
    for (g, (d, _)) in domains.iter().take(n_folds).enumerate() {
        groups[g].insert(d.clone());
    }
    let mut rest: Vec<String> = domains[n_folds..].iter().map(|d| d.0.clone()).collect();
    rest.sort();
    rest.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    for (i, d) in rest.into_iter().enumerate() {
        groups[i % n_folds].insert(d);
    }
    Ok((0..n_folds)
        .map(|f| {
            let v = (f + 1) % n_folds;
            FoldSplit {
                fold_id: f,
                test_domains: groups[f].clone(),
                val_domains: groups[v].clone(),
                train_domains: groups
                    .iter()
                    .enumerate()
                    .filter(|&(g, _)| g != f && g != v)
                    .flat_map(|(_, s)| s.iter().cloned())
                    .collect(),
            }
        })
        .collect())
}

/// [`make_folds`] over the domains of a dataset manifest.
pub fn make_folds_for(
    manifest: &DatasetManifest,
    n_folds: usize,
    seed: u64,
) -> Result<Vec<FoldSplit>, EvalError> {
    make_folds(&manifest.domain_counts(), n_folds, seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn single_element_wins_everything() {
        let p = predict_page("p", &[7], array![[0.1, -3.0, 2.0, 9.0]].view());
        assert_eq!((p.price_id, p.title_id, p.image_id), (7, 7, 7));
        assert_eq!(p.probs[0], [1.0, 1.0, 1.0]);
    }

    #[test]
    fn hand_table_argmax() {
        let logits = array![
            [2.0, 0.0, 1.0, 0.0],
            [1.0, 3.0, 1.0, 0.0],
            [0.0, 1.0, 5.0, 0.0]
        ];
        let p = predict_page("p", &[10, 11, 12], logits.view());
        assert_eq!((p.price_id, p.title_id, p.image_id), (10, 11, 12));
        let e = std::f64::consts::E;
        assert!((p.probs[0][0] - e * e / (e * e + e + 1.0)).abs() < 1e-15);
    }

    #[test]
    fn ties_prefer_smaller_index() {
        let p = predict_page(
            "p",
            &[4, 5, 6],
            array![[1.0, 0., 0., 0.], [1.0, 0., 0., 0.], [0.0, 0., 0., 0.]].view(),
        );
        assert_eq!((p.price_id, p.title_id), (4, 4));
    }

    #[test]
    fn accuracy_and_topk() {
        let logits = array![[3.0, 0., 0., 0.], [2.0, 1., 0., 0.], [1.0, 0., 1., 0.]];
        let p1 = predict_page("a", &[1, 2, 3], logits.view());
        let p2 = predict_page("b", &[1, 2, 3], logits.view());
        let truth: Truth = [("a".to_string(), [1, 2, 3]), ("b".to_string(), [2, 2, 3])]
            .into_iter()
            .collect();
        let acc = cross_domain_accuracy(&[p1.clone(), p2.clone()], &truth).unwrap();
        assert_eq!(
            acc,
            ClassAccuracy {
                price: 0.5,
                title: 1.0,
                image: 1.0
            }
        );
        let top2 = topk_accuracy(&[p1.clone(), p2.clone()], &truth, 2).unwrap();
        assert_eq!(top2.price, 1.0);
        assert_eq!(
            topk_accuracy(&[p1.clone(), p2.clone()], &truth, 1).unwrap(),
            acc
        );
        assert_eq!(
            topk_accuracy(&[p1.clone()], &truth, 3).unwrap(),
            ClassAccuracy {
                price: 1.0,
                title: 1.0,
                image: 1.0
            }
        );
        let partial: Truth = [("a".to_string(), [1, 2, 3])].into_iter().collect();
        assert!(matches!(
            cross_domain_accuracy(&[p1, p2], &partial),
            Err(EvalError::MissingTruth(_))
        ));
    }

    #[test]
    fn five_domains_five_folds() {
        let counts: Vec<(String, usize)> = (0..5).map(|i| (format!("d{i}"), 10 - i)).collect();
        let folds = make_folds(&counts, 5, 3).unwrap();
        for f in &folds {
            assert_eq!(f.test_domains.len(), 1);
            assert_eq!(f.val_domains.len(), 1);
            assert_eq!(f.train_domains.len(), 3);
            assert!(f.test_domains.is_disjoint(&f.val_domains));
            assert!(f.test_domains.is_disjoint(&f.train_domains));
        }
        assert_eq!(folds[0].test_domains, folds[4].val_domains);
        assert!(matches!(
            make_folds(&counts[..4], 5, 0),
            Err(EvalError::TooFewDomains { .. })
        ));
    }
}
