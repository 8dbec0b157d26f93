//! Exact cosine nearest-neighbor search and Recall@K.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet, HashSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{dot, norm, NORM_EPS};

/// Tolerance on the unit norm of indexed descriptors.
pub const INDEX_UNIT_TOL: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct Neighbor {
    pub id: String,
    pub similarity: f64,
}

/// Database descriptors, immutable once built.
#[derive(Clone, Debug)]
pub struct DescriptorIndex {
    ids: Vec<String>,
    dim: usize,
    data: Vec<f32>,
}

/// Descending similarity, then ascending id.
fn rank_order(a: &Neighbor, b: &Neighbor) -> Ordering {
    b.similarity
        .partial_cmp(&a.similarity)
        .unwrap_or(Ordering::Equal)
        .then_with(|| a.id.cmp(&b.id))
}

impl DescriptorIndex {
    pub fn build<I, S>(entries: I) -> Result<Self>
    where
        I: IntoIterator<Item = (S, Vec<f32>)>,
        S: Into<String>,
    {
        let mut ids = Vec::new();
        let mut data = Vec::new();
        let mut seen = HashSet::new();
        let mut dim = None;
        for (id, v) in entries {
            let id = id.into();
            if !seen.insert(id.clone()) {
                return Err(Error::invalid(format!("duplicate database id {id}")));
            }
            let d = *dim.get_or_insert(v.len());
            if v.len() != d {
                return Err(Error::invalid(format!(
                    "descriptor {id} has length {} not {d}",
                    v.len()
                )));
            }
            crate::tensor::check_finite(&v, &format!("descriptor {id}"))?;
            let n = norm(&v);
            if (n - 1.0).abs() > INDEX_UNIT_TOL {
                return Err(Error::invalid(format!("database descriptor {id} has norm {n}")));
            }
            ids.push(id);
            data.extend_from_slice(&v);
        }
        Ok(Self {
            ids,
            dim: dim.unwrap_or(0),
            data,
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn contains(&self, id: &str) -> bool {
        self.ids.iter().any(|x| x == id)
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    /// Every database entry ordered by similarity to `query`.
    pub fn rank_all(&self, query: &[f32]) -> Result<Vec<Neighbor>> {
        if query.len() != self.dim {
            return Err(Error::Shape {
                op: "knn_query",
                left: (1, query.len()),
                right: (self.len(), self.dim),
            });
        }
        crate::tensor::check_finite(query, "query descriptor")?;
        let n = norm(query);
        let scale = if (n - 1.0).abs() > INDEX_UNIT_TOL {
            log::warn!("query descriptor has norm {n:.6}; normalizing");
            1.0 / n.max(NORM_EPS)
        } else {
            1.0
        };
        let mut out: Vec<Neighbor> = self
            .ids
            .iter()
            .enumerate()
            .map(|(i, id)| Neighbor {
                id: id.clone(),
                similarity: dot(query, self.row(i)) * scale,
            })
            .collect();
        out.sort_by(rank_order);
        Ok(out)
    }

    /// Top-`k` neighbors by cosine similarity; ties go to the smaller id.
    pub fn knn_query(&self, query: &[f32], k: usize) -> Result<Vec<Neighbor>> {
        if k > self.len() {
            return Err(Error::invalid(format!("k = {k} exceeds database size {}", self.len())));
        }
        let mut all = self.rank_all(query)?;
        all.truncate(k);
        Ok(all)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecallEntry {
    #[serde(rename = "K")]
    pub k: usize,
    pub recall: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub dataset: String,
    pub num_queries: usize,
    pub num_excluded: usize,
    pub results: Vec<RecallEntry>,
    /// 1-based rank of the first positive for every included query.
    pub ranks: BTreeMap<String, usize>,
}

impl EvalReport {
    pub fn recall_at(&self, k: usize) -> Option<f64> {
        self.results.iter().find(|r| r.k == k).map(|r| r.recall)
    }

    pub fn is_monotone(&self) -> bool {
        let mut sorted = self.results.clone();
        sorted.sort_by_key(|r| r.k);
        sorted.windows(2).all(|w| w[0].recall <= w[1].recall)
    }

    /// Whitespace-separated table, one line per K.
    pub fn to_table(&self) -> String {
        let mut s = String::from("# ranking: cosine similarity descending, ties by ascending id\n");
        s.push_str("dataset K recall num_queries num_excluded\n");
        for r in &self.results {
            s.push_str(&format!(
                "{} {} {:.6} {} {}\n",
                self.dataset, r.k, r.recall, self.num_queries, self.num_excluded
            ));
        }
        s
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Recall@K over `queries`. Queries with no positives are excluded and
/// counted in `num_excluded`. `K` larger than the database is clamped.
pub fn recall_at_k(
    dataset: &str,
    index: &DescriptorIndex,
    queries: &[(String, Vec<f32>)],
    positives: &BTreeMap<String, BTreeSet<String>>,
    ks: &[usize],
) -> Result<EvalReport> {
    if ks.is_empty() || ks.contains(&0) {
        return Err(Error::invalid("K values must be positive"));
    }
    for (q, set) in positives {
        if let Some(bad) = set.iter().find(|id| !index.contains(id)) {
            return Err(Error::invalid(format!(
                "positive {bad} of query {q} is not in the database"
            )));
        }
    }
    let mut ranks = BTreeMap::new();
    let mut excluded = 0;
    for (qid, desc) in queries {
        let Some(pos) = positives.get(qid).filter(|s| !s.is_empty()) else {
            excluded += 1;
            continue;
        };
        let ranking = index.rank_all(desc)?;
        let rank = ranking
            .iter()
            .position(|n| pos.contains(&n.id))
            .map(|r| r + 1)
            .expect("positives resolved above");
        ranks.insert(qid.clone(), rank);
    }
    let included = ranks.len();
    let mut ks = ks.to_vec();
    ks.sort_unstable();
    ks.dedup();
    let results = ks
        .into_iter()
        .map(|k| {
            let hits = ranks.values().filter(|&&r| r <= k.min(index.len())).count();
            RecallEntry {
                k,
                recall: if included == 0 {
                    0.0
                } else {
                    hits as f64 / included as f64
                },
            }
        })
        .collect();
    Ok(EvalReport {
        dataset: dataset.to_string(),
        num_queries: included,
        num_excluded: excluded,
        results,
        ranks,
    })
}
