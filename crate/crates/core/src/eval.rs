//! Full-catalog top-K ranking and Precision/Recall/NDCG@K evaluation.
//!
//! Training positives are excluded from every user's candidate list; score
//! ties break toward the smaller item id so rankings are reproducible.
//! Metrics are macro-averaged over users that have at least one held-out
//! positive.

use std::io::Write;

use serde::Serialize;

use crate::encoder::{dot_rows, EmbeddingTable};
use crate::error::{Error, Result};
use crate::ingest::InteractionDataset;
use crate::losses::LossKind;

/// Which geometry the ranker scores with.  Temperature scaling never
/// changes cosine order, so it has no place here.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Similarity {
    Dot,
    Cosine,
}

impl From<LossKind> for Similarity {
    /// The geometry each objective trains: the augmented objective scores
    /// by temperature-scaled cosine, every baseline by inner product.
    fn from(kind: LossKind) -> Self {
        match kind {
            LossKind::Proposed => Similarity::Cosine,
            _ => Similarity::Dot,
        }
    }
}

/// Precision, recall and NDCG for one user at one cutoff.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricTriple {
    pub precision: f64,
    pub recall: f64,
    pub ndcg: f64,
}

/// Macro-averaged metrics per cutoff, in the order of `cutoffs`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RankingReport {
    pub cutoffs: Vec<usize>,
    pub precision: Vec<f64>,
    pub recall: Vec<f64>,
    pub ndcg: Vec<f64>,
    pub num_evaluated_users: usize,
}

impl RankingReport {
    fn at(&self, k: usize, values: &[f64]) -> Option<f64> {
        self.cutoffs
            .iter()
            .position(|&c| c == k)
            .map(|idx| values[idx])
    }

    pub fn precision_at(&self, k: usize) -> Option<f64> {
        self.at(k, &self.precision)
    }

    pub fn recall_at(&self, k: usize) -> Option<f64> {
        self.at(k, &self.recall)
    }

    pub fn ndcg_at(&self, k: usize) -> Option<f64> {
        self.at(k, &self.ndcg)
    }
}

fn item_norms(table: &EmbeddingTable) -> Vec<f64> {
    (0..table.num_items())
        .map(|i| dot_rows(table.item_row(i), table.item_row(i)).sqrt())
        .collect()
}

/// Scores every non-train item for `u` and returns the `k_max` best item
/// ids, best first, ties broken by ascending id.
pub fn rank_for_user(
    table: &EmbeddingTable,
    ds: &InteractionDataset,
    u: usize,
    k_max: usize,
    sim: Similarity,
) -> Result<Vec<u32>> {
    let norms = match sim {
        Similarity::Cosine => Some(item_norms(table)),
        Similarity::Dot => None,
    };
    rank_core(table, ds, u, k_max, sim, norms.as_deref())
}

fn rank_core(
    table: &EmbeddingTable,
    ds: &InteractionDataset,
    u: usize,
    k_max: usize,
    sim: Similarity,
    norms: Option<&[f64]>,
) -> Result<Vec<u32>> {
    if u >= ds.num_users {
        return Err(Error::IndexOutOfRange {
            kind: "user",
            index: u,
            size: ds.num_users,
        });
    }
    let train = &ds.train_pos[u];
    let eligible = ds.num_items - train.len();
    if k_max == 0 || k_max > eligible {
        return Err(Error::InvalidConfig(format!(
            "cutoff {k_max} outside 1..={eligible} eligible items for user {u}"
        )));
    }

    let user = table.user_row(u);
    let user_norm = match sim {
        Similarity::Cosine => {
            let n = dot_rows(user, user).sqrt();
            if n == 0.0 {
                return Err(Error::DegenerateEmbedding(format!(
                    "user {u} has a zero-norm row"
                )));
            }
            n
        }
        Similarity::Dot => 1.0,
    };

    let mut scored: Vec<(f64, u32)> = Vec::with_capacity(eligible);
    for i in 0..ds.num_items {
        if train.binary_search(&(i as u32)).is_ok() {
            continue;
        }
        let raw = dot_rows(user, table.item_row(i));
        let score = match sim {
            Similarity::Dot => raw,
            Similarity::Cosine => {
                let n = norms.map_or_else(
                    || dot_rows(table.item_row(i), table.item_row(i)).sqrt(),
                    |ns| ns[i],
                );
                if n == 0.0 {
                    // A dead row carries no preference signal; rank it last.
                    f64::NEG_INFINITY
                } else {
                    raw / (user_norm * n)
                }
            }
        };
        scored.push((score, i as u32));
    }
    scored.sort_unstable_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    scored.truncate(k_max);
    Ok(scored.into_iter().map(|(_, i)| i).collect())
}

/// Precision@k, Recall@k and NDCG@k of a ranked list against a sorted
/// held-out positive list.  Gains are binary; the ideal DCG places one hit
/// at each of the first `min(k, |test|)` positions.
pub fn metrics_at_k(topk: &[u32], test_pos: &[u32], k: usize) -> Result<MetricTriple> {
    if test_pos.is_empty() {
        return Err(Error::EmptyTestSet);
    }
    if k == 0 || k > topk.len() {
        return Err(Error::InvalidConfig(format!(
            "cutoff {k} outside the ranked list of length {}",
            topk.len()
        )));
    }
    debug_assert!(test_pos.windows(2).all(|w| w[0] < w[1]));

    let mut hits = 0usize;
    let mut dcg = 0.0f64;
    for (pos, item) in topk[..k].iter().enumerate() {
        if test_pos.binary_search(item).is_ok() {
            hits += 1;
            dcg += 1.0 / ((pos + 2) as f64).log2();
        }
    }
    let ideal: f64 = (0..k.min(test_pos.len()))
        .map(|pos| 1.0 / ((pos + 2) as f64).log2())
        .sum();
    Ok(MetricTriple {
        precision: hits as f64 / k as f64,
        recall: hits as f64 / test_pos.len() as f64,
        ndcg: dcg / ideal,
    })
}

fn check_cutoffs(cutoffs: &[usize]) -> Result<usize> {
    if cutoffs.is_empty() {
        return Err(Error::InvalidConfig("no cutoffs requested".into()));
    }
    if cutoffs.iter().any(|&k| k == 0) {
        return Err(Error::InvalidConfig("cutoffs must be at least 1".into()));
    }
    Ok(*cutoffs.iter().max().expect("non-empty"))
}

fn user_metrics(
    table: &EmbeddingTable,
    ds: &InteractionDataset,
    u: usize,
    cutoffs: &[usize],
    k_max: usize,
    sim: Similarity,
    norms: Option<&[f64]>,
) -> Result<Option<Vec<MetricTriple>>> {
    if ds.test_pos[u].is_empty() {
        return Ok(None);
    }
    let topk = rank_core(table, ds, u, k_max, sim, norms)?;
    let triples = cutoffs
        .iter()
        .map(|&k| metrics_at_k(&topk, &ds.test_pos[u], k))
        .collect::<Result<Vec<_>>>()?;
    Ok(Some(triples))
}

fn reduce_user_metrics(
    cutoffs: &[usize],
    per_user: impl IntoIterator<Item = Option<Vec<MetricTriple>>>,
) -> Result<RankingReport> {
    let mut precision = vec![0.0f64; cutoffs.len()];
    let mut recall = vec![0.0f64; cutoffs.len()];
    let mut ndcg = vec![0.0f64; cutoffs.len()];
    let mut users = 0usize;
    for triples in per_user.into_iter().flatten() {
        users += 1;
        for (idx, t) in triples.iter().enumerate() {
            precision[idx] += t.precision;
            recall[idx] += t.recall;
            ndcg[idx] += t.ndcg;
        }
    }
    if users == 0 {
        return Err(Error::EmptyTestSet);
    }
    let scale = 1.0 / users as f64;
    for v in precision.iter_mut().chain(&mut recall).chain(&mut ndcg) {
        *v *= scale;
    }
    Ok(RankingReport {
        cutoffs: cutoffs.to_vec(),
        precision,
        recall,
        ndcg,
        num_evaluated_users: users,
    })
}

/// Macro-averaged ranking metrics over all users with held-out positives.
/// Dispatches to the rayon implementation when the `parallel` feature is
/// enabled; both paths reduce in user order and agree bit for bit.
pub fn evaluate(
    table: &EmbeddingTable,
    ds: &InteractionDataset,
    cutoffs: &[usize],
    sim: Similarity,
) -> Result<RankingReport> {
    #[cfg(feature = "parallel")]
    {
        evaluate_par(table, ds, cutoffs, sim)
    }
    #[cfg(not(feature = "parallel"))]
    {
        evaluate_seq(table, ds, cutoffs, sim)
    }
}

/// Single-threaded evaluation; the reference the parallel path must match.
pub fn evaluate_seq(
    table: &EmbeddingTable,
    ds: &InteractionDataset,
    cutoffs: &[usize],
    sim: Similarity,
) -> Result<RankingReport> {
    let k_max = check_cutoffs(cutoffs)?;
    let norms = match sim {
        Similarity::Cosine => Some(item_norms(table)),
        Similarity::Dot => None,
    };
    let per_user = (0..ds.num_users)
        .map(|u| user_metrics(table, ds, u, cutoffs, k_max, sim, norms.as_deref()))
        .collect::<Result<Vec<_>>>()?;
    reduce_user_metrics(cutoffs, per_user)
}

/// Evaluation with users scored on the rayon pool.  Per-user results are
/// collected in user order before the sequential reduction, so the output
/// is identical to [`evaluate_seq`] regardless of thread count.
#[cfg(feature = "parallel")]
pub fn evaluate_par(
    table: &EmbeddingTable,
    ds: &InteractionDataset,
    cutoffs: &[usize],
    sim: Similarity,
) -> Result<RankingReport> {
    use rayon::prelude::*;

    let k_max = check_cutoffs(cutoffs)?;
    let norms = match sim {
        Similarity::Cosine => Some(item_norms(table)),
        Similarity::Dot => None,
    };
    let per_user = (0..ds.num_users)
        .into_par_iter()
        .map(|u| user_metrics(table, ds, u, cutoffs, k_max, sim, norms.as_deref()))
        .collect::<Result<Vec<_>>>()?;
    reduce_user_metrics(cutoffs, per_user)
}

/// Writes `metric,K,value` rows, one per metric and cutoff, cutoffs in
/// report order.
pub fn write_metrics_csv<W: Write>(mut w: W, report: &RankingReport) -> std::io::Result<()> {
    writeln!(w, "metric,K,value")?;
    for (name, values) in [
        ("precision", &report.precision),
        ("recall", &report.recall),
        ("ndcg", &report.ndcg),
    ] {
        for (k, v) in report.cutoffs.iter().zip(values) {
            writeln!(w, "{name},{k},{v}")?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::init_embeddings;
    use crate::ingest::{build_dataset, RawInteraction};
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn tiny_dataset(num_users: usize, num_items: usize) -> InteractionDataset {
        // Every user interacts with every item so ids are dense, then the
        // split is overridden by hand in each test.
        let rows: Vec<RawInteraction> = (0..num_users)
            .flat_map(|u| {
                (0..num_items).map(move |i| RawInteraction {
                    user_token: format!("u{u}"),
                    item_token: format!("i{i}"),
                    weight: 1.0,
                })
            })
            .collect();
        build_dataset(&rows, 0.2, 0).unwrap()
    }

    fn table_from_rows(users: Vec<Vec<f32>>, items: Vec<Vec<f32>>) -> EmbeddingTable {
        let dim = users[0].len();
        EmbeddingTable::from_vecs(
            users.len(),
            items.len(),
            dim,
            users.concat(),
            items.concat(),
        )
        .unwrap()
    }

    #[test]
    fn ranking_excludes_train_positives_and_orders_by_score() {
        let table = table_from_rows(
            vec![vec![1.0, 0.0]],
            vec![
                vec![0.9, 0.0],  // item 0: score 0.9, train positive
                vec![0.1, 0.0],  // item 1: score 0.1
                vec![0.5, 0.0],  // item 2: score 0.5
                vec![-0.2, 0.0], // item 3: score -0.2
            ],
        );
        let mut ds = tiny_dataset(1, 4);
        ds.train_pos[0] = vec![0];
        ds.test_pos[0] = vec![2];
        let top = rank_for_user(&table, &ds, 0, 3, Similarity::Dot).unwrap();
        assert_eq!(top, vec![2, 1, 3]);
    }

    #[test]
    fn ranking_breaks_ties_by_ascending_id() {
        let table = table_from_rows(
            vec![vec![1.0, 0.0]],
            vec![vec![0.5, 0.0], vec![0.5, 0.0], vec![0.5, 0.0]],
        );
        let mut ds = tiny_dataset(1, 3);
        ds.train_pos[0] = vec![];
        ds.test_pos[0] = vec![0];
        let top = rank_for_user(&table, &ds, 0, 3, Similarity::Dot).unwrap();
        assert_eq!(top, vec![0, 1, 2]);
    }

    #[test]
    fn cosine_ranking_ignores_magnitude() {
        let table = table_from_rows(
            vec![vec![1.0, 0.0]],
            // Item 0 is long but misaligned; item 1 short but aligned.
            vec![vec![5.0, 8.0], vec![0.2, 0.01]],
        );
        let mut ds = tiny_dataset(1, 2);
        ds.train_pos[0] = vec![];
        ds.test_pos[0] = vec![0];
        let dot = rank_for_user(&table, &ds, 0, 2, Similarity::Dot).unwrap();
        let cos = rank_for_user(&table, &ds, 0, 2, Similarity::Cosine).unwrap();
        assert_eq!(dot, vec![0, 1]);
        assert_eq!(cos, vec![1, 0]);
    }

    #[test]
    fn ranking_rejects_oversized_cutoffs() {
        let table = init_embeddings(1, 4, 2, 0).unwrap();
        let mut ds = tiny_dataset(1, 4);
        ds.train_pos[0] = vec![0, 1];
        assert!(rank_for_user(&table, &ds, 0, 2, Similarity::Dot).is_ok());
        assert!(rank_for_user(&table, &ds, 0, 3, Similarity::Dot).is_err());
        assert!(rank_for_user(&table, &ds, 0, 0, Similarity::Dot).is_err());
        assert!(rank_for_user(&table, &ds, 5, 1, Similarity::Dot).is_err());
    }

    #[test]
    fn metrics_match_hand_values() {
        // top 3 = [a, b, c] with test = {a, c}.
        let m = metrics_at_k(&[10, 11, 12], &[10, 12], 3).unwrap();
        assert_relative_eq!(m.precision, 2.0 / 3.0, epsilon = 1e-15);
        assert_relative_eq!(m.recall, 1.0, epsilon = 1e-15);
        let idcg = 1.0 + 1.0 / 3f64.log2();
        assert_relative_eq!(m.ndcg, (1.0 + 0.5) / idcg, epsilon = 1e-12);
    }

    #[test]
    fn perfect_prefix_scores_full_ndcg() {
        let m = metrics_at_k(&[1, 2, 3, 4, 5], &[1, 2, 3], 5).unwrap();
        assert_relative_eq!(m.ndcg, 1.0, epsilon = 1e-15);
        assert_relative_eq!(m.recall, 1.0, epsilon = 1e-15);
        assert_relative_eq!(m.precision, 0.6, epsilon = 1e-15);

        let none = metrics_at_k(&[7, 8, 9], &[1, 2], 3).unwrap();
        assert_eq!(none.precision, 0.0);
        assert_eq!(none.recall, 0.0);
        assert_eq!(none.ndcg, 0.0);
    }

    #[test]
    fn metrics_reject_bad_inputs() {
        assert!(matches!(
            metrics_at_k(&[1, 2], &[], 2),
            Err(Error::EmptyTestSet)
        ));
        assert!(metrics_at_k(&[1, 2], &[1], 3).is_err());
        assert!(metrics_at_k(&[1, 2], &[1], 0).is_err());
    }

    #[test]
    fn evaluate_skips_users_without_holdout() {
        let table = init_embeddings(3, 6, 4, 1).unwrap();
        let mut ds = tiny_dataset(3, 6);
        ds.train_pos[0] = vec![0, 1];
        ds.test_pos[0] = vec![2];
        ds.train_pos[1] = (0..6).collect();
        ds.test_pos[1] = vec![];
        ds.train_pos[2] = vec![3];
        ds.test_pos[2] = vec![0, 5];
        let report = evaluate(&table, &ds, &[2, 4], Similarity::Dot).unwrap();
        assert_eq!(report.num_evaluated_users, 2);
        assert_eq!(report.cutoffs, vec![2, 4]);
        assert!(report.precision_at(2).is_some());
        assert!(report.precision_at(3).is_none());
    }

    #[test]
    fn evaluate_requires_some_holdout_and_valid_cutoffs() {
        let table = init_embeddings(2, 4, 2, 0).unwrap();
        let mut ds = tiny_dataset(2, 4);
        for u in 0..2 {
            ds.train_pos[u] = (0..4).collect();
            ds.test_pos[u] = vec![];
        }
        assert!(matches!(
            evaluate(&table, &ds, &[2], Similarity::Dot),
            Err(Error::EmptyTestSet)
        ));
        assert!(evaluate(&table, &ds, &[], Similarity::Dot).is_err());
        assert!(evaluate(&table, &ds, &[0], Similarity::Dot).is_err());
    }

    #[cfg(feature = "parallel")]
    #[test]
    fn parallel_evaluation_matches_sequential_bitwise() {
        let table = init_embeddings(40, 80, 8, 5).unwrap();
        let rows: Vec<RawInteraction> = (0..40)
            .flat_map(|u| {
                (0..80).filter(move |i| (u * 7 + i * 3) % 5 != 0).map(move |i| {
                    RawInteraction {
                        user_token: format!("u{u}"),
                        item_token: format!("i{i}"),
                        weight: 1.0,
                    }
                })
            })
            .collect();
        let ds = build_dataset(&rows, 0.3, 9).unwrap();
        for sim in [Similarity::Dot, Similarity::Cosine] {
            let seq = evaluate_seq(&table, &ds, &[5, 10], sim).unwrap();
            let par = evaluate_par(&table, &ds, &[5, 10], sim).unwrap();
            assert_eq!(seq, par);
        }
    }

    #[test]
    fn csv_layout_is_stable() {
        let report = RankingReport {
            cutoffs: vec![5, 10],
            precision: vec![0.25, 0.2],
            recall: vec![0.1, 0.15],
            ndcg: vec![0.3, 0.35],
            num_evaluated_users: 4,
        };
        let mut buf = Vec::new();
        write_metrics_csv(&mut buf, &report).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "metric,K,value\nprecision,5,0.25\nprecision,10,0.2\nrecall,5,0.1\n\
             recall,10,0.15\nndcg,5,0.3\nndcg,10,0.35\n"
        );
    }

    #[test]
    fn similarity_follows_loss_kind() {
        assert_eq!(Similarity::from(LossKind::Proposed), Similarity::Cosine);
        assert_eq!(Similarity::from(LossKind::Bpr), Similarity::Dot);
        assert_eq!(Similarity::from(LossKind::Hcl), Similarity::Dot);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn metrics_agree_with_set_oracle(
            ranked in proptest::collection::vec(0u32..30, 5..15),
            test in proptest::collection::vec(0u32..30, 1..8),
            k in 1usize..5,
        ) {
            let mut ranked = ranked;
            ranked.sort_unstable();
            ranked.dedup();
            prop_assume!(ranked.len() >= k);
            let mut test = test;
            test.sort_unstable();
            test.dedup();

            let m = metrics_at_k(&ranked, &test, k).unwrap();
            let test_set: std::collections::HashSet<u32> = test.iter().copied().collect();
            let hits = ranked[..k].iter().filter(|i| test_set.contains(i)).count();
            prop_assert_eq!(m.precision, hits as f64 / k as f64);
            prop_assert_eq!(m.recall, hits as f64 / test.len() as f64);
            prop_assert!(m.ndcg >= 0.0 && m.ndcg <= 1.0 + 1e-12);
            // A fully-hit prefix is the ideal ordering.
            if hits == k {
                prop_assert!((m.ndcg - 1.0).abs() < 1e-12);
            }
        }
    }
}
