//! The two training-time augmentations and their statistical verifiers.
//!
//! On the positive side, a user's *interest center* is the mean embedding
//! of a small sample of their training items.  On the negative side, two
//! uniform non-positive candidates are drawn and the higher-scored one is
//! kept with probability `alpha` (the lower-scored one otherwise).  This
//! module also provides the exact selection distribution of that rule by
//! pair enumeration, a Monte-Carlo estimate of it, and an affine fit of
//! selection probability against relative score rank, which is how the
//! `verify-lemma2` command checks the sampler.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Distribution;

use crate::encoder::{EmbeddingTable, RowSource};
use crate::error::{Error, Result};

/// Thresholds used when judging a sampler check.  A per-item deviation is
/// measured in binomial standard errors; the slope test applies at
/// `alpha = 0.5` where the exact distribution is flat.
pub const MAX_ITEM_SIGMA: f64 = 5.0;
pub const MAX_SLOPE_SIGMA: f64 = 4.0;
pub const MIN_R_SQUARED: f64 = 0.99;

/// Mean embedding of a sample of a user's training positives, kept in
/// `f64` together with the items that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct InterestCenter {
    pub vec: Vec<f64>,
    /// Distinct training items whose rows were averaged, in draw order.
    pub source_items: Vec<u32>,
}

/// Both candidates of one negative draw plus the labeling outcome.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NegativeChoice {
    pub candidates: (u32, u32),
    pub selected: u32,
    /// Whether the accept branch (keep the higher-scored candidate) ran.
    pub took_max: bool,
}

/// Samples `min(m, train_pos.len())` distinct positives and averages
/// their item rows.  When every sampled row is identical the center
/// reproduces that row exactly.
pub fn interest_center<R: Rng + ?Sized>(
    table: &EmbeddingTable,
    train_pos: &[u32],
    m: usize,
    rng: &mut R,
) -> Result<InterestCenter> {
    interest_center_from(table, train_pos, m, rng)
}

pub(crate) fn interest_center_from<S: RowSource, R: Rng + ?Sized>(
    rows: &S,
    train_pos: &[u32],
    m: usize,
    rng: &mut R,
) -> Result<InterestCenter> {
    let mut vec = Vec::new();
    let mut source_items = Vec::new();
    fill_center(rows, train_pos, m, rng, &mut vec, &mut source_items)?;
    Ok(InterestCenter { vec, source_items })
}

/// Allocation-free form of [`interest_center`] for the training hot loop:
/// writes the center into `out_vec` and the drawn items into `out_items`.
pub(crate) fn fill_center<S: RowSource, R: Rng + ?Sized>(
    rows: &S,
    train_pos: &[u32],
    m: usize,
    rng: &mut R,
    out_vec: &mut Vec<f64>,
    out_items: &mut Vec<u32>,
) -> Result<()> {
    if train_pos.is_empty() {
        return Err(Error::NoPositives);
    }
    if m == 0 {
        return Err(Error::InvalidConfig(
            "interest center needs m >= 1 sampled positives".into(),
        ));
    }
    let m_eff = m.min(train_pos.len());
    floyd_sample_into(rng, train_pos.len() as u32, m_eff as u32, out_items);
    for idx in out_items.iter_mut() {
        *idx = train_pos[*idx as usize];
    }

    out_vec.resize(rows.dim(), 0.0);
    let dim = rows.dim();

    // With direct row views the center forms in one pass: each entry is
    // widened and summed left to right in source order and scaled by the
    // same factor as the buffered path, so the result is bit-equal while
    // the intermediate store/reload per source row disappears.  Only the
    // common small arities get a fused loop — fixed shapes keep the
    // compiler from spilling — and scaling by the reciprocal is exact for
    // these power-of-two sizes.
    match *out_items.as_slice() {
        [a] => {
            if let Some(s0) = rows.item_row_f32(a as usize) {
                // A one-item center is the row itself; the buffered path's
                // scaling multiplies by exactly 1.0, which returns each
                // entry unchanged.
                let s0 = &s0[..dim];
                let out = &mut out_vec[..dim];
                for k in 0..dim {
                    out[k] = s0[k] as f64;
                }
                return Ok(());
            }
        }
        [a, b] => {
            if let (Some(s0), Some(s1)) = (
                rows.item_row_f32(a as usize),
                rows.item_row_f32(b as usize),
            ) {
                let (s0, s1) = (&s0[..dim], &s1[..dim]);
                let out = &mut out_vec[..dim];
                for k in 0..dim {
                    out[k] = (s0[k] as f64 + s1[k] as f64) * 0.5;
                }
                return Ok(());
            }
        }
        [a, b, c, d] => {
            if let (Some(s0), Some(s1), Some(s2), Some(s3)) = (
                rows.item_row_f32(a as usize),
                rows.item_row_f32(b as usize),
                rows.item_row_f32(c as usize),
                rows.item_row_f32(d as usize),
            ) {
                let (s0, s1, s2, s3) = (&s0[..dim], &s1[..dim], &s2[..dim], &s3[..dim]);
                let out = &mut out_vec[..dim];
                for k in 0..dim {
                    out[k] =
                        (s0[k] as f64 + s1[k] as f64 + s2[k] as f64 + s3[k] as f64) * 0.25;
                }
                return Ok(());
            }
        }
        _ => {}
    }

    let (&first, rest) = out_items.split_first().expect("m_eff >= 1");
    rows.read_item_into(first as usize, out_vec);
    for &item in rest {
        rows.accum_item_into(item as usize, out_vec);
    }
    // Reciprocal scaling is exact when `m_eff` is a power of two — the
    // common case by far — and a hardware divide is several times the cost
    // of a multiply per entry; other sizes keep the division to stay exact.
    if m_eff.is_power_of_two() {
        let inv = 1.0 / m_eff as f64;
        for v in out_vec.iter_mut() {
            *v *= inv;
        }
    } else {
        let m = m_eff as f64;
        for v in out_vec.iter_mut() {
            *v /= m;
        }
    }
    Ok(())
}

/// Floyd's combination sampling: `amount` distinct indices from
/// `0..length`, fully shuffled, written into `out` without allocating.
/// Draw-for-draw compatible with `rand::seq::index::sample` for small
/// amounts (which routes to the same algorithm), so it can replace it in
/// the training loop without changing trajectories; the linear duplicate
/// scan keeps it cheap for the small `amount` used there.
fn floyd_sample_into<R: Rng + ?Sized>(rng: &mut R, length: u32, amount: u32, out: &mut Vec<u32>) {
    debug_assert!(amount <= length);
    out.clear();
    for j in length - amount..length {
        let t = rng.random_range(..=j);
        if let Some(pos) = out.iter().position(|&x| x == t) {
            out[pos] = j;
        }
        out.push(t);
    }
}

/// Draws `count` independent uniform non-positive items (repeats allowed)
/// into `out`.
pub(crate) fn sample_negatives<R: Rng + ?Sized>(
    train_pos: &[u32],
    num_items: usize,
    count: usize,
    rng: &mut R,
    out: &mut Vec<u32>,
) -> Result<()> {
    let available = num_items.saturating_sub(train_pos.len());
    if available == 0 {
        return Err(Error::NotEnoughNegatives { available });
    }
    out.clear();
    for _ in 0..count {
        out.push(loop {
            let c = rng.random_range(0..num_items as u32);
            if train_pos.binary_search(&c).is_err() {
                break c;
            }
        });
    }
    Ok(())
}

/// Draws two distinct items uniformly from the user's non-positive set by
/// rejection against the sorted positive list.  Cost depends on the
/// positive count, not on the catalog size.
pub fn sample_negative_pair<R: Rng + ?Sized>(
    train_pos: &[u32],
    num_items: usize,
    rng: &mut R,
) -> Result<(u32, u32)> {
    let available = num_items.saturating_sub(train_pos.len());
    if available < 2 {
        return Err(Error::NotEnoughNegatives { available });
    }
    let mut draw_excluding = |also_not: Option<u32>| -> u32 {
        loop {
            let c = rng.random_range(0..num_items as u32);
            if Some(c) != also_not && train_pos.binary_search(&c).is_err() {
                return c;
            }
        }
    };
    let first = draw_excluding(None);
    let second = draw_excluding(Some(first));
    Ok((first, second))
}

/// Accept-reject rule shared by training and the verifiers.  Returns
/// `(first_selected, took_max)`.  Ties fall back to a fair coin while
/// still honoring the accept/reject draw for reporting.
fn select_candidate<R: Rng + ?Sized>(
    x_first: f64,
    x_second: f64,
    alpha: f64,
    rng: &mut R,
) -> (bool, bool) {
    // random::<f64>() is uniform on [0, 1), so the comparison succeeds
    // with probability exactly alpha, including both endpoints.
    let took_max = rng.random::<f64>() < alpha;
    let first_selected = if x_first == x_second {
        rng.random_bool(0.5)
    } else if took_max {
        x_first > x_second
    } else {
        x_first < x_second
    };
    (first_selected, took_max)
}

/// Labels one candidate of the pair as the training negative: the
/// higher-scored one with probability `alpha`, the lower-scored one
/// otherwise.
pub fn label_negative<R: Rng + ?Sized>(
    first: (u32, f64),
    second: (u32, f64),
    alpha: f64,
    rng: &mut R,
) -> Result<NegativeChoice> {
    check_alpha(alpha)?;
    let (first_selected, took_max) = select_candidate(first.1, second.1, alpha, rng);
    Ok(NegativeChoice {
        candidates: (first.0, second.0),
        selected: if first_selected { first.0 } else { second.0 },
        took_max,
    })
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::InvalidConfig(format!(
            "alpha must lie in [0, 1], got {alpha}"
        )));
    }
    Ok(())
}

fn check_scores(scores: &[f64]) -> Result<()> {
    if scores.len() < 2 {
        return Err(Error::InvalidConfig(
            "selection distribution needs at least 2 scores".into(),
        ));
    }
    if !scores.iter().all(|s| s.is_finite()) {
        return Err(Error::InvalidConfig("scores must be finite".into()));
    }
    Ok(())
}

/// Exact probability that each item is the labeled negative, by
/// enumerating all unordered candidate pairs.  Ties split their pair's
/// mass evenly.  The result sums to 1.
pub fn exact_selection_distribution(scores: &[f64], alpha: f64) -> Result<Vec<f64>> {
    check_scores(scores)?;
    check_alpha(alpha)?;
    let n = scores.len();
    let base = 1.0 / (n * (n - 1) / 2) as f64;
    let mut probs = vec![0.0f64; n];
    for l in 0..n {
        for m in (l + 1)..n {
            if scores[l] == scores[m] {
                probs[l] += 0.5 * base;
                probs[m] += 0.5 * base;
            } else {
                let (hi, lo) = if scores[l] > scores[m] { (l, m) } else { (m, l) };
                probs[hi] += alpha * base;
                probs[lo] += (1.0 - alpha) * base;
            }
        }
    }
    Ok(probs)
}

/// Relative rank of every score: the fraction of catalog scores less than
/// or equal to it (itself included), so values lie in `(0, 1]`.
pub fn relative_ranks(scores: &[f64]) -> Vec<f64> {
    let mut sorted = scores.to_vec();
    sorted.sort_unstable_by(f64::total_cmp);
    let n = scores.len() as f64;
    scores
        .iter()
        .map(|&x| sorted.partition_point(|&v| v <= x) as f64 / n)
        .collect()
}

/// Ordinary least-squares line fit plus the slope's standard error.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AffineFit {
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
    pub slope_stderr: f64,
}

pub(crate) fn fit_affine(xs: &[f64], ys: &[f64]) -> AffineFit {
    assert_eq!(xs.len(), ys.len());
    let n = xs.len() as f64;
    let mean_x = xs.iter().sum::<f64>() / n;
    let mean_y = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mean_x).powi(2)).sum();
    let sxy: f64 = xs
        .iter()
        .zip(ys)
        .map(|(x, y)| (x - mean_x) * (y - mean_y))
        .sum();
    let slope = sxy / sxx;
    let intercept = mean_y - slope * mean_x;
    let ss_tot: f64 = ys.iter().map(|y| (y - mean_y).powi(2)).sum();
    let ss_res: f64 = xs
        .iter()
        .zip(ys)
        .map(|(x, y)| (y - (intercept + slope * x)).powi(2))
        .sum();
    let r_squared = if ss_tot == 0.0 { 1.0 } else { 1.0 - ss_res / ss_tot };
    let dof = (xs.len().saturating_sub(2)).max(1) as f64;
    AffineFit {
        slope,
        intercept,
        r_squared,
        slope_stderr: (ss_res / dof / sxx).sqrt(),
    }
}

/// Empirical selection frequencies plus the affine fit of frequency
/// against relative rank.
#[derive(Debug, Clone, PartialEq)]
pub struct SelectionMcReport {
    pub empirical: Vec<f64>,
    pub ranks: Vec<f64>,
    pub fit: AffineFit,
    pub trials: u64,
}

/// Monte-Carlo estimate of the selection distribution, running the same
/// candidate rule as training `trials` times over uniform pairs.
pub fn selection_monte_carlo<R: Rng + ?Sized>(
    scores: &[f64],
    alpha: f64,
    trials: u64,
    rng: &mut R,
) -> Result<SelectionMcReport> {
    check_scores(scores)?;
    check_alpha(alpha)?;
    check_trials(trials)?;
    let mut counts = vec![0u64; scores.len()];
    tally_selections(scores, alpha, trials, rng, &mut counts);
    Ok(finish_report(scores, counts, trials))
}

fn check_trials(trials: u64) -> Result<()> {
    if trials < 10_000 {
        return Err(Error::InvalidConfig(format!(
            "need at least 10000 trials for a meaningful check, got {trials}"
        )));
    }
    Ok(())
}

fn tally_selections<R: Rng + ?Sized>(
    scores: &[f64],
    alpha: f64,
    trials: u64,
    rng: &mut R,
    counts: &mut [u64],
) {
    let n = scores.len();
    for _ in 0..trials {
        let l = rng.random_range(0..n);
        let mut m = rng.random_range(0..n - 1);
        if m >= l {
            m += 1;
        }
        let (first, _) = select_candidate(scores[l], scores[m], alpha, rng);
        counts[if first { l } else { m }] += 1;
    }
}

fn finish_report(scores: &[f64], counts: Vec<u64>, trials: u64) -> SelectionMcReport {
    let empirical: Vec<f64> = counts.iter().map(|&c| c as f64 / trials as f64).collect();
    let ranks = relative_ranks(scores);
    let fit = fit_affine(&ranks, &empirical);
    SelectionMcReport {
        empirical,
        ranks,
        fit,
        trials,
    }
}

/// Same estimate as [`selection_monte_carlo`], split across a fixed number
/// of independent generator streams and tallied on the rayon pool.  The
/// result depends only on `seed`, never on the worker count.
#[cfg(feature = "parallel")]
pub fn selection_monte_carlo_par(
    scores: &[f64],
    alpha: f64,
    trials: u64,
    seed: u64,
) -> Result<SelectionMcReport> {
    use rayon::prelude::*;

    check_scores(scores)?;
    check_alpha(alpha)?;
    check_trials(trials)?;
    const CHUNKS: u64 = 64;
    let per_chunk = trials / CHUNKS;
    let remainder = trials % CHUNKS;
    let counts = (0..CHUNKS)
        .into_par_iter()
        .map(|chunk| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(chunk + 1);
            let chunk_trials = per_chunk + u64::from(chunk < remainder);
            let mut counts = vec![0u64; scores.len()];
            tally_selections(scores, alpha, chunk_trials, &mut rng, &mut counts);
            counts
        })
        .reduce(
            || vec![0u64; scores.len()],
            |mut acc, c| {
                for (a, b) in acc.iter_mut().zip(c) {
                    *a += b;
                }
                acc
            },
        );
    Ok(finish_report(scores, counts, trials))
}

/// Outcome of one sampler check: the exact law, the Monte-Carlo estimate,
/// the per-item deviation in binomial standard errors and the affine-fit
/// verdict.
#[derive(Debug, Clone, PartialEq)]
pub struct SelectionCheck {
    pub alpha: f64,
    pub scores: Vec<f64>,
    pub exact: Vec<f64>,
    pub report: SelectionMcReport,
    pub max_item_sigma: f64,
    /// `|slope| / stderr`, the evidence against a flat law.
    pub slope_sigmas: f64,
    pub passed: bool,
}

/// Runs the full sampler check on `catalog` synthetic distinct scores:
/// Monte-Carlo frequencies must sit within [`MAX_ITEM_SIGMA`] binomial
/// standard errors of the exact law, and the frequency-vs-rank fit must be
/// affine (`R^2 >=` [`MIN_R_SQUARED`], or a slope within
/// [`MAX_SLOPE_SIGMA`] standard errors of zero when `alpha = 0.5` makes
/// the law flat).
pub fn check_selection_distribution(
    catalog: usize,
    alpha: f64,
    trials: u64,
    seed: u64,
) -> Result<SelectionCheck> {
    if catalog < 2 {
        return Err(Error::InvalidConfig(format!(
            "catalog must have at least 2 items, got {catalog}"
        )));
    }
    check_alpha(alpha)?;
    check_trials(trials)?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut scores = Vec::with_capacity(catalog);
    while scores.len() < catalog {
        let s: f64 = rand_distr::StandardNormal.sample(&mut rng);
        if !scores.contains(&s) {
            scores.push(s);
        }
    }

    let exact = exact_selection_distribution(&scores, alpha)?;
    let mut mc_rng = ChaCha8Rng::seed_from_u64(seed);
    mc_rng.set_stream(1);
    let report = selection_monte_carlo(&scores, alpha, trials, &mut mc_rng)?;

    let max_item_sigma = exact
        .iter()
        .zip(&report.empirical)
        .map(|(&p, &f)| {
            let se = (p * (1.0 - p) / trials as f64).sqrt();
            if se == 0.0 {
                if f == p {
                    0.0
                } else {
                    f64::INFINITY
                }
            } else {
                (f - p).abs() / se
            }
        })
        .fold(0.0f64, f64::max);
    let slope_sigmas = report.fit.slope.abs() / report.fit.slope_stderr;
    let flat_law = alpha == 0.5;
    let fit_ok = if flat_law {
        slope_sigmas <= MAX_SLOPE_SIGMA
    } else {
        report.fit.r_squared >= MIN_R_SQUARED
    };
    let passed = max_item_sigma <= MAX_ITEM_SIGMA && fit_ok;
    Ok(SelectionCheck {
        alpha,
        scores,
        exact,
        report,
        max_item_sigma,
        slope_sigmas,
        passed,
    })
}

/// Writes one row per item: id, score, relative rank, exact probability
/// and empirical frequency.
pub fn write_selection_csv<W: Write>(mut w: W, check: &SelectionCheck) -> std::io::Result<()> {
    writeln!(w, "item_id,score,relative_rank,exact_prob,empirical_freq")?;
    for i in 0..check.scores.len() {
        writeln!(
            w,
            "{},{},{},{},{}",
            i,
            check.scores[i],
            check.report.ranks[i],
            check.exact[i],
            check.report.empirical[i]
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::init_embeddings;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn floyd_sampling_matches_rand_draw_for_draw() {
        // The hot loop relies on `floyd_sample_into` consuming the stream
        // exactly like `rand::seq::index::sample`, so sampled sets, their
        // order and the generator state afterwards must all agree.
        let mut out = Vec::new();
        for seed in 0..50u64 {
            for &(length, amount) in &[(1usize, 1usize), (5, 3), (40, 4), (40, 11), (500, 8)] {
                let mut a = rng(seed);
                let mut b = rng(seed);
                floyd_sample_into(&mut a, length as u32, amount as u32, &mut out);
                let reference: Vec<u32> = rand::seq::index::sample(&mut b, length, amount)
                    .iter()
                    .map(|i| i as u32)
                    .collect();
                assert_eq!(out, reference, "length {length}, amount {amount}");
                assert_eq!(a.random::<u64>(), b.random::<u64>(), "stream state diverged");
            }
        }
    }

    #[test]
    fn center_uses_all_positives_when_m_covers_them() {
        let table = init_embeddings(2, 5, 3, 0).unwrap();
        let pos = [0u32, 2, 4];
        let c = interest_center(&table, &pos, 10, &mut rng(1)).unwrap();
        let mut sorted = c.source_items.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, pos);
        for k in 0..3 {
            let mean: f64 = pos
                .iter()
                .map(|&i| table.item_row(i as usize)[k] as f64)
                .sum::<f64>()
                / 3.0;
            assert_relative_eq!(c.vec[k], mean, epsilon = 1e-15);
        }
    }

    #[test]
    fn center_of_identical_rows_is_that_row() {
        let row = vec![0.25f32, -0.1, 0.7];
        let items: Vec<f32> = row.iter().copied().cycle().take(12).collect();
        let table =
            crate::encoder::EmbeddingTable::from_vecs(1, 4, 3, vec![0.0; 3], items).unwrap();
        let c = interest_center(&table, &[0, 1, 2, 3], 3, &mut rng(2)).unwrap();
        assert_eq!(c.source_items.len(), 3);
        for k in 0..3 {
            assert_eq!(c.vec[k], row[k] as f64);
        }
    }

    #[test]
    fn center_samples_without_replacement() {
        let table = init_embeddings(1, 30, 4, 3).unwrap();
        let pos: Vec<u32> = (0..30).step_by(2).collect();
        for seed in 0..20 {
            let c = interest_center(&table, &pos, 6, &mut rng(seed)).unwrap();
            assert_eq!(c.source_items.len(), 6);
            let mut unique = c.source_items.clone();
            unique.sort_unstable();
            unique.dedup();
            assert_eq!(unique.len(), 6, "duplicates in {:?}", c.source_items);
            assert!(unique.iter().all(|i| pos.binary_search(i).is_ok()));
        }
    }

    #[test]
    fn center_rejects_bad_inputs() {
        let table = init_embeddings(1, 3, 2, 0).unwrap();
        assert!(matches!(
            interest_center(&table, &[], 4, &mut rng(0)),
            Err(Error::NoPositives)
        ));
        assert!(matches!(
            interest_center(&table, &[0], 0, &mut rng(0)),
            Err(Error::InvalidConfig(_))
        ));
    }

    #[test]
    fn negative_pair_avoids_positives_and_repeats() {
        let pos: Vec<u32> = (0..50).collect();
        let mut r = rng(7);
        for _ in 0..500 {
            let (a, b) = sample_negative_pair(&pos, 60, &mut r).unwrap();
            assert_ne!(a, b);
            assert!(a >= 50 && b >= 50);
        }
    }

    #[test]
    fn negative_pair_needs_two_candidates() {
        let err = sample_negative_pair(&[0, 1, 2], 4, &mut rng(0)).unwrap_err();
        assert!(matches!(err, Error::NotEnoughNegatives { available: 1 }));
        assert!(sample_negative_pair(&[0, 1], 4, &mut rng(0)).is_ok());
    }

    #[test]
    fn labeling_is_degenerate_at_alpha_endpoints() {
        let mut r = rng(3);
        for _ in 0..200 {
            let hi = label_negative((7, 2.0), (9, -1.0), 1.0, &mut r).unwrap();
            assert_eq!(hi.selected, 7);
            assert!(hi.took_max);
            let lo = label_negative((7, 2.0), (9, -1.0), 0.0, &mut r).unwrap();
            assert_eq!(lo.selected, 9);
            assert!(!lo.took_max);
        }
    }

    #[test]
    fn labeling_matches_alpha_frequency() {
        let mut r = rng(11);
        let trials = 40_000;
        let picks = (0..trials)
            .filter(|_| {
                label_negative((0, 1.0), (1, 0.0), 0.7, &mut r)
                    .unwrap()
                    .selected
                    == 0
            })
            .count();
        let freq = picks as f64 / trials as f64;
        // 5 binomial standard errors around 0.7.
        assert!((freq - 0.7).abs() < 5.0 * (0.7f64 * 0.3 / trials as f64).sqrt());
    }

    #[test]
    fn labeling_breaks_ties_evenly() {
        let mut r = rng(13);
        let trials = 20_000;
        let firsts = (0..trials)
            .filter(|_| {
                label_negative((0, 1.5), (1, 1.5), 1.0, &mut r)
                    .unwrap()
                    .selected
                    == 0
            })
            .count();
        let freq = firsts as f64 / trials as f64;
        assert!((freq - 0.5).abs() < 5.0 * (0.25f64 / trials as f64).sqrt());
    }

    #[test]
    fn labeling_rejects_bad_alpha() {
        assert!(label_negative((0, 1.0), (1, 0.0), -0.1, &mut rng(0)).is_err());
        assert!(label_negative((0, 1.0), (1, 0.0), 1.1, &mut rng(0)).is_err());
    }

    #[test]
    fn exact_distribution_matches_hand_values() {
        let probs = exact_selection_distribution(&[1.0, 2.0, 3.0], 1.0).unwrap();
        assert_relative_eq!(probs[0], 0.0, epsilon = 1e-15);
        assert_relative_eq!(probs[1], 1.0 / 3.0, epsilon = 1e-15);
        assert_relative_eq!(probs[2], 2.0 / 3.0, epsilon = 1e-15);

        let probs = exact_selection_distribution(&[1.0, 2.0, 3.0], 0.75).unwrap();
        assert_relative_eq!(probs[0], 1.0 / 6.0, epsilon = 1e-15);
        assert_relative_eq!(probs[1], 1.0 / 3.0, epsilon = 1e-15);
        assert_relative_eq!(probs[2], 0.5, epsilon = 1e-15);

        let probs = exact_selection_distribution(&[5.0, 1.0, 3.0], 0.5).unwrap();
        for p in probs {
            assert_relative_eq!(p, 1.0 / 3.0, epsilon = 1e-15);
        }

        // A tied pair splits its mass evenly.
        let probs = exact_selection_distribution(&[1.0, 1.0, 2.0], 1.0).unwrap();
        assert_relative_eq!(probs[0], 1.0 / 6.0, epsilon = 1e-15);
        assert_relative_eq!(probs[1], 1.0 / 6.0, epsilon = 1e-15);
        assert_relative_eq!(probs[2], 2.0 / 3.0, epsilon = 1e-15);
    }

    #[test]
    fn exact_distribution_rejects_bad_inputs() {
        assert!(exact_selection_distribution(&[1.0], 0.5).is_err());
        assert!(exact_selection_distribution(&[1.0, f64::NAN], 0.5).is_err());
        assert!(exact_selection_distribution(&[1.0, 2.0], 1.5).is_err());
    }

    #[test]
    fn relative_ranks_count_ties_inclusively() {
        assert_eq!(relative_ranks(&[10.0, 20.0, 30.0]), vec![
            1.0 / 3.0,
            2.0 / 3.0,
            1.0
        ]);
        assert_eq!(relative_ranks(&[1.0, 1.0, 2.0]), vec![
            2.0 / 3.0,
            2.0 / 3.0,
            1.0
        ]);
    }

    #[test]
    fn exact_law_is_affine_in_rank() {
        // With distinct scores the law is exactly affine with slope
        // (2 alpha - 1) * n / C(n, 2).
        let scores: Vec<f64> = (0..40).map(|i| (i as f64 * 0.713).sin() * 3.0).collect();
        for alpha in [0.0, 0.6, 0.75, 1.0] {
            let exact = exact_selection_distribution(&scores, alpha).unwrap();
            let ranks = relative_ranks(&scores);
            let fit = fit_affine(&ranks, &exact);
            let n = scores.len() as f64;
            let expected_slope = (2.0 * alpha - 1.0) * n / (n * (n - 1.0) / 2.0);
            assert_relative_eq!(fit.slope, expected_slope, epsilon = 1e-12);
            if alpha != 0.5 {
                assert!(fit.r_squared > 1.0 - 1e-12, "r2 {}", fit.r_squared);
            }
        }
    }

    #[test]
    fn monte_carlo_tracks_exact_distribution() {
        let scores: Vec<f64> = (0..12).map(|i| (i as f64 * 1.37).cos() * 2.0).collect();
        let exact = exact_selection_distribution(&scores, 0.8).unwrap();
        let trials = 200_000u64;
        let report = selection_monte_carlo(&scores, 0.8, trials, &mut rng(17)).unwrap();
        assert_relative_eq!(report.empirical.iter().sum::<f64>(), 1.0, epsilon = 1e-12);
        for (p, f) in exact.iter().zip(&report.empirical) {
            let se = (p * (1.0 - p) / trials as f64).sqrt();
            assert!((f - p).abs() <= 5.0 * se, "p {p} freq {f}");
        }
    }

    #[cfg(feature = "parallel")]
    #[test]
    fn parallel_monte_carlo_is_deterministic_and_accurate() {
        let scores: Vec<f64> = (0..15).map(|i| (i as f64 * 0.91).sin()).collect();
        let a = selection_monte_carlo_par(&scores, 0.75, 150_000, 5).unwrap();
        let b = selection_monte_carlo_par(&scores, 0.75, 150_000, 5).unwrap();
        assert_eq!(a, b);
        let exact = exact_selection_distribution(&scores, 0.75).unwrap();
        for (p, f) in exact.iter().zip(&a.empirical) {
            let se = (p * (1.0 - p) / 150_000f64).sqrt();
            assert!((f - p).abs() <= 5.0 * se);
        }
    }

    #[test]
    fn check_passes_for_representative_alphas() {
        let steep = check_selection_distribution(30, 1.0, 60_000, 21).unwrap();
        assert!(steep.passed, "alpha=1.0: {steep:?}");
        assert!(steep.report.fit.r_squared >= MIN_R_SQUARED);
        assert!(steep.report.fit.slope > 0.0);

        let flat = check_selection_distribution(30, 0.5, 60_000, 21).unwrap();
        assert!(flat.passed, "alpha=0.5 slope sigmas {}", flat.slope_sigmas);
        assert!(flat.slope_sigmas <= MAX_SLOPE_SIGMA);
    }

    #[test]
    fn check_rejects_bad_parameters() {
        assert!(check_selection_distribution(1, 0.5, 20_000, 0).is_err());
        assert!(check_selection_distribution(10, 2.0, 20_000, 0).is_err());
        assert!(check_selection_distribution(10, 0.5, 100, 0).is_err());
    }

    #[test]
    fn csv_has_header_and_one_row_per_item() {
        let check = check_selection_distribution(8, 0.75, 20_000, 3).unwrap();
        let mut buf = Vec::new();
        write_selection_csv(&mut buf, &check).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 9);
        assert_eq!(lines[0], "item_id,score,relative_rank,exact_prob,empirical_freq");
        assert!(lines[1].starts_with("0,"));
        assert_eq!(lines[1].split(',').count(), 5);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn exact_distribution_sums_to_one(
            raw in proptest::collection::vec(-3.0f64..3.0, 2..30),
            alpha in 0.0f64..=1.0,
            quantize in proptest::bool::ANY,
        ) {
            // Quantizing forces ties so both branches are exercised.
            let scores: Vec<f64> = if quantize {
                raw.iter().map(|x| (x * 2.0).round() / 2.0).collect()
            } else {
                raw
            };
            let probs = exact_selection_distribution(&scores, alpha).unwrap();
            let total: f64 = probs.iter().sum();
            prop_assert!((total - 1.0).abs() < 1e-12);
            prop_assert!(probs.iter().all(|p| *p >= 0.0));
        }

        #[test]
        fn higher_scores_never_get_less_mass_at_high_alpha(
            raw in proptest::collection::vec(-5.0f64..5.0, 3..20),
        ) {
            let probs = exact_selection_distribution(&raw, 1.0).unwrap();
            let mut order: Vec<usize> = (0..raw.len()).collect();
            order.sort_by(|&a, &b| raw[a].total_cmp(&raw[b]));
            for w in order.windows(2) {
                prop_assert!(probs[w[0]] <= probs[w[1]] + 1e-12);
            }
        }
    }
}
