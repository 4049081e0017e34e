//! SGD training loops for all five objectives.
//!
//! One epoch is one shuffled pass over the training interactions.  For the
//! baselines each interaction contributes a (user, positive, sampled
//! negatives) instance; for the augmented objective it contributes an
//! interest center and one labeled negative out of a uniform candidate
//! pair.  Gradients are always evaluated at the pre-update state of every
//! row they touch, and weight decay applies only to touched rows.
//!
//! `TrainMode::Sequential` is bit-for-bit reproducible per seed.
//! `TrainMode::Parallel` (with the `parallel` feature) shards each epoch's
//! interactions across the rayon pool and updates a shared lock-free table
//! with relaxed atomics; races there trade exact reproducibility for
//! throughput, so determinism claims cover the sequential mode only.

use std::io::Write;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{
    fill_center, label_negative, sample_negative_pair, sample_negatives, InterestCenter,
    NegativeChoice,
};
use crate::encoder::{dot64, init_embeddings, norm64, EmbeddingTable, RowSource, Score};
use crate::error::{Error, Result};
use crate::ingest::InteractionDataset;
use crate::losses::{
    loss_bpr, loss_dcl, loss_hcl, loss_infonce, loss_proposed, LossKind, LossValue,
};

/// Everything that shapes a training run.  `Default` gives the tuned
/// values used throughout the test suite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HyperParams {
    /// Embedding dimension.
    pub dim: usize,
    /// Positives sampled per interest center.
    pub m_positives: usize,
    /// Probability of keeping the higher-scored negative candidate.
    pub alpha: f64,
    /// Softmax/cosine temperature.
    pub tau: f64,
    /// Negatives per instance for the batch losses.
    pub num_negatives: usize,
    /// Hardness exponent for `hcl`.
    pub beta: f64,
    /// Positive-class prior for the debiased losses.
    pub tau_plus: f64,
    pub learning_rate: f64,
    /// L2 coefficient applied to rows touched by an update.
    pub weight_decay: f64,
    pub epochs: usize,
    /// Instances per parameter update; gradients are averaged.
    pub batch_size: usize,
    pub seed: u64,
    pub loss: LossKind,
}

impl Default for HyperParams {
    fn default() -> Self {
        Self {
            dim: 64,
            m_positives: 4,
            alpha: 1.0,
            tau: 0.2,
            num_negatives: 8,
            beta: 1.0,
            tau_plus: 0.1,
            learning_rate: 0.05,
            weight_decay: 1e-4,
            epochs: 50,
            batch_size: 1,
            seed: 42,
            loss: LossKind::Proposed,
        }
    }
}

impl HyperParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if self.dim == 0 {
            return bad("dim must be at least 1".into());
        }
        if self.m_positives == 0 {
            return bad("m_positives must be at least 1".into());
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return bad(format!("alpha must lie in [0, 1], got {}", self.alpha));
        }
        if !(self.tau > 0.0) {
            return bad(format!("tau must be positive, got {}", self.tau));
        }
        if self.num_negatives == 0 {
            return bad("num_negatives must be at least 1".into());
        }
        if !(self.beta >= 0.0) {
            return bad(format!("beta must be non-negative, got {}", self.beta));
        }
        if !(0.0..1.0).contains(&self.tau_plus) {
            return bad(format!("tau_plus must lie in [0, 1), got {}", self.tau_plus));
        }
        if !(self.learning_rate > 0.0) {
            return bad(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            ));
        }
        if !(self.weight_decay >= 0.0) {
            return bad(format!(
                "weight_decay must be non-negative, got {}",
                self.weight_decay
            ));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        Ok(())
    }
}

/// How an epoch's instances are executed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrainMode {
    /// One thread, fixed instance order: reproducible per seed.
    Sequential,
    /// Lock-free sharded updates on the rayon pool; needs the `parallel`
    /// feature.
    Parallel,
}

/// One sampled training instance of the augmented objective.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedTriple {
    pub user: u32,
    pub center: InterestCenter,
    pub choice: NegativeChoice,
}

/// Per-epoch training log entry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochReport {
    /// 1-based epoch index.
    pub epoch: usize,
    /// Mean pre-update loss over the epoch's instances.
    pub mean_loss: f64,
    /// Wall time of the epoch.
    pub seconds: f64,
}

/// Log of a whole run, one entry per epoch.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochReport>,
}

impl TrainReport {
    /// One JSON object per line, in epoch order.
    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<()> {
        for e in &self.epochs {
            serde_json::to_writer(&mut w, e)?;
            writeln!(w)?;
        }
        Ok(())
    }

    pub fn final_mean_loss(&self) -> Option<f64> {
        self.epochs.last().map(|e| e.mean_loss)
    }
}

// ---------------------------------------------------------------------------
// Scratch buffers shared by every step so the hot loop never allocates.

struct Workspace {
    u: Vec<f64>,
    p: Vec<f64>,
    q: Vec<f64>,
    tmp: Vec<f64>,
    grad_u: Vec<f64>,
    grad_p: Vec<f64>,
    grad_q: Vec<f64>,
    source_items: Vec<u32>,
    neg_ids: Vec<u32>,
    neg_coeffs: Vec<f64>,
    neg_scores: Vec<Score>,
}

impl Workspace {
    fn new(dim: usize) -> Self {
        Self {
            u: vec![0.0; dim],
            p: Vec::with_capacity(dim),
            q: vec![0.0; dim],
            tmp: vec![0.0; dim],
            grad_u: vec![0.0; dim],
            grad_p: vec![0.0; dim],
            grad_q: vec![0.0; dim],
            source_items: Vec::new(),
            neg_ids: Vec::new(),
            neg_coeffs: Vec::new(),
            neg_scores: Vec::new(),
        }
    }
}

/// Coefficients of the augmented objective's gradients.  With
/// `c_up = cos(u, p)`, `c_uq = cos(u, q)` and score-space gradients `g_p`,
/// `g_q`, every row gradient is a two- or three-term linear combination:
///
/// ```text
/// dL/du = a p + b q + c u      dL/dp = a u + e p      dL/dq = b u + f q
/// ```
struct ProposedCoeffs {
    loss: f64,
    x_up: f64,
    x_uq: f64,
    a: f64,
    b: f64,
    c: f64,
    e: f64,
    f: f64,
}

/// Norms and inner products of one (user, center, negative) triple; the
/// hot loop fills this from fused passes instead of re-walking the rows.
struct TripleStats {
    nu: f64,
    np: f64,
    nq: f64,
    dot_up: f64,
    dot_uq: f64,
}

fn proposed_coeffs(u: &[f64], p: &[f64], q: &[f64], tau: f64) -> Result<ProposedCoeffs> {
    let stats = TripleStats {
        nu: norm64(u),
        np: norm64(p),
        nq: norm64(q),
        dot_up: dot64(u, p),
        dot_uq: dot64(u, q),
    };
    proposed_coeffs_from(&stats, tau)
}

fn proposed_coeffs_from(st: &TripleStats, tau: f64) -> Result<ProposedCoeffs> {
    let TripleStats { nu, np, nq, .. } = *st;
    if nu == 0.0 || np == 0.0 || nq == 0.0 {
        return Err(Error::DegenerateEmbedding(
            "zero-norm vector in augmented step".into(),
        ));
    }
    let cup = st.dot_up / (nu * np);
    let cuq = st.dot_uq / (nu * nq);
    let x_up = cup / tau;
    let x_uq = cuq / tau;
    let lv = loss_proposed(Score(x_up), Score(x_uq));
    let (g_p, g_q) = (lv.grad_pos, lv.grad_negs[0]);
    Ok(ProposedCoeffs {
        loss: lv.value,
        x_up,
        x_uq,
        a: g_p / (tau * nu * np),
        b: g_q / (tau * nu * nq),
        c: -(g_p * cup + g_q * cuq) / (tau * nu * nu),
        e: -g_p * cup / (tau * np * np),
        f: -g_q * cuq / (tau * nq * nq),
    })
}

/// Expands the scalar coefficients into the full per-row gradient buffers
/// for callers that must accumulate (mini-batch, lock-free hogwild).
fn fill_grads(ws: &mut Workspace, co: &ProposedCoeffs) {
    let dim = ws.u.len();
    let (u, p, q) = (&ws.u[..dim], &ws.p[..dim], &ws.q[..dim]);
    let (gu, gp, gq) = (
        &mut ws.grad_u[..dim],
        &mut ws.grad_p[..dim],
        &mut ws.grad_q[..dim],
    );
    for k in 0..dim {
        gu[k] = co.a * p[k] + co.b * q[k] + co.c * u[k];
        gp[k] = co.a * u[k] + co.e * p[k];
        gq[k] = co.b * u[k] + co.f * q[k];
    }
}

/// Draws center and labeled negative for `user` and fills the workspace
/// with rows and ids.  Returns the gradient coefficients; callers either
/// apply them directly or expand them into the grad buffers via
/// [`fill_grads`].
fn draw_and_compute_proposed<S: RowSource, R: Rng + ?Sized>(
    rows: &S,
    train_pos: &[u32],
    user: u32,
    hp: &HyperParams,
    rng: &mut R,
    ws: &mut Workspace,
) -> Result<ProposedCoeffs> {
    rows.read_user_into(user as usize, &mut ws.u);
    fill_center(rows, train_pos, hp.m_positives, rng, &mut ws.p, &mut ws.source_items)?;
    let (j, j_prime) = sample_negative_pair(train_pos, rows.num_items(), rng)?;
    rows.read_item_into(j as usize, &mut ws.tmp);
    rows.read_item_into(j_prime as usize, &mut ws.q);

    // All row reductions for the step in one pass.  Each accumulator still
    // sums in index order, so every value is bit-equal to a separate dot or
    // squared-norm pass per row; fusing only overlaps the dependency
    // chains, which otherwise serialize the step on FP-add latency.  The
    // candidate conversions stay separate passes: folding them in here
    // costs more in register pressure than the reloads it saves.
    let dim = ws.u.len();
    let (u, p, t, q) = (&ws.u[..dim], &ws.p[..dim], &ws.tmp[..dim], &ws.q[..dim]);
    let mut nu_sq = 0.0;
    let (mut dot_up, mut sq_p) = (0.0, 0.0);
    let (mut dot_j, mut sq_j) = (0.0, 0.0);
    let (mut dot_jp, mut sq_jp) = (0.0, 0.0);
    for k in 0..dim {
        let uk = u[k];
        nu_sq += uk * uk;
        dot_up += uk * p[k];
        sq_p += p[k] * p[k];
        dot_j += uk * t[k];
        sq_j += t[k] * t[k];
        dot_jp += uk * q[k];
        sq_jp += q[k] * q[k];
    }
    let nu = nu_sq.sqrt();
    if nu == 0.0 {
        return Err(Error::DegenerateEmbedding(format!(
            "user {user} has a zero-norm row"
        )));
    }

    let cos_tau = |dot: f64, sq: f64, id: u32| -> Result<(f64, f64)> {
        let n = sq.sqrt();
        if n == 0.0 {
            return Err(Error::DegenerateEmbedding(format!(
                "item {id} has a zero-norm row"
            )));
        }
        Ok((dot / (nu * n) / hp.tau, n))
    };
    let (x_j, n_j) = cos_tau(dot_j, sq_j, j)?;
    let (x_jp, n_jp) = cos_tau(dot_jp, sq_jp, j_prime)?;

    let choice = label_negative((j, x_j), (j_prime, x_jp), hp.alpha, rng)?;
    let (dot_uq, nq) = if choice.selected == j {
        std::mem::swap(&mut ws.tmp, &mut ws.q);
        (dot_j, n_j)
    } else {
        (dot_jp, n_jp)
    };
    ws.neg_ids.clear();
    ws.neg_ids.push(choice.selected);

    let stats = TripleStats {
        nu,
        np: sq_p.sqrt(),
        nq,
        dot_up,
        dot_uq,
    };
    proposed_coeffs_from(&stats, hp.tau)
}

/// Scores one baseline instance and fills `ws.grad_u` plus the per-item
/// coefficients (`grad . u_old` factors).  Returns the pre-update loss.
fn compute_baseline<S: RowSource>(
    rows: &S,
    user: u32,
    pos_item: u32,
    negs: &[u32],
    hp: &HyperParams,
    ws: &mut Workspace,
) -> Result<(f64, f64)> {
    rows.read_user_into(user as usize, &mut ws.u);
    rows.read_item_into(pos_item as usize, &mut ws.p);
    ws.neg_scores.clear();
    let x_pos = if let [jn] = negs[..] {
        // Single negative — always the case for bpr, the hot default.
        // Scoring it in the same pass as the positive overlaps the two
        // dependency chains; accumulation order per score is unchanged.
        rows.read_item_into(jn as usize, &mut ws.tmp);
        let dim = ws.u.len();
        let (u, p, t) = (&ws.u[..dim], &ws.p[..dim], &ws.tmp[..dim]);
        let (mut dot_pos, mut dot_neg) = (0.0, 0.0);
        for k in 0..dim {
            dot_pos += u[k] * p[k];
            dot_neg += u[k] * t[k];
        }
        ws.neg_scores.push(Score(dot_neg));
        Score(dot_pos)
    } else {
        let x = Score(dot64(&ws.u, &ws.p));
        for &jn in negs {
            rows.read_item_into(jn as usize, &mut ws.tmp);
            ws.neg_scores.push(Score(dot64(&ws.u, &ws.tmp)));
        }
        x
    };
    let lv: LossValue = match hp.loss {
        LossKind::Bpr => {
            if negs.len() != 1 {
                return Err(Error::InvalidConfig(format!(
                    "bpr uses exactly one negative, got {}",
                    negs.len()
                )));
            }
            loss_bpr(x_pos, ws.neg_scores[0])
        }
        LossKind::Infonce => loss_infonce(x_pos, &ws.neg_scores)?,
        LossKind::Dcl => loss_dcl(x_pos, &ws.neg_scores, &[x_pos], hp.tau_plus, hp.tau)?,
        LossKind::Hcl => loss_hcl(x_pos, &ws.neg_scores, hp.beta, hp.tau_plus, hp.tau)?,
        LossKind::Proposed => {
            return Err(Error::InvalidConfig(
                "the augmented objective trains through its own step".into(),
            ))
        }
    };

    // grad_u = grad_pos * f(i) + sum_n grad_negs[n] * f(j_n), all at the
    // pre-update rows.
    ws.neg_coeffs.clear();
    ws.neg_coeffs.extend_from_slice(&lv.grad_negs);
    if let [g] = lv.grad_negs[..] {
        // Single negative: `ws.tmp` still holds its row from the scoring
        // pass, so skip the re-read and form both terms in one pass.
        let dim = ws.u.len();
        let (p, t, gu) = (&ws.p[..dim], &ws.tmp[..dim], &mut ws.grad_u[..dim]);
        for k in 0..dim {
            gu[k] = lv.grad_pos * p[k] + g * t[k];
        }
    } else {
        for (gu, &pk) in ws.grad_u.iter_mut().zip(&ws.p) {
            *gu = lv.grad_pos * pk;
        }
        for (&jn, &g) in negs.iter().zip(&lv.grad_negs) {
            rows.read_item_into(jn as usize, &mut ws.tmp);
            for (gu, &tk) in ws.grad_u.iter_mut().zip(&ws.tmp) {
                *gu += g * tk;
            }
        }
    }
    Ok((lv.value, lv.grad_pos))
}

// ---------------------------------------------------------------------------
// Update application: plain table and lock-free view.

/// `row <- row - lr * (scale * dir + l2 * row)`, reading each entry once.
fn sgd_update(row: &mut [f32], dir: &[f64], scale: f64, lr: f64, l2: f64) {
    let n = row.len().min(dir.len());
    let (row, dir) = (&mut row[..n], &dir[..n]);
    for k in 0..n {
        let old = row[k] as f64;
        row[k] = (old - lr * (scale * dir[k] + l2 * old)) as f32;
    }
}

/// [`sgd_update`] with the `scale * dir` product already folded into
/// `dir`; `scale * d` and a prescaled entry are the same rounded value,
/// so results are bit-equal while the hot loops skip one multiply per
/// entry.
fn sgd_update_prescaled(row: &mut [f32], dir: &[f64], lr: f64, l2: f64) {
    let n = row.len().min(dir.len());
    let (row, dir) = (&mut row[..n], &dir[..n]);
    for k in 0..n {
        let old = row[k] as f64;
        row[k] = (old - lr * (dir[k] + l2 * old)) as f32;
    }
}

/// Applies one augmented step straight from the coefficients.  The
/// arithmetic per entry is identical to [`fill_grads`] followed by
/// [`sgd_update`], so the result is bit-equal to the buffered path; the
/// full gradient buffers stay reserved for the mini-batch and lock-free
/// paths, which must accumulate.  `ws.grad_p` doubles as scratch for the
/// source-item direction, which all center sources share.
fn apply_proposed_seq(
    table: &mut EmbeddingTable,
    ws: &mut Workspace,
    co: &ProposedCoeffs,
    hp: &HyperParams,
    user: u32,
) {
    let lr = hp.learning_rate;
    let l2 = hp.weight_decay;
    let scale = 1.0 / ws.source_items.len() as f64;
    // Re-slicing everything to `dim` lets the compiler drop per-element
    // bounds checks in these loops, which dominate the epoch.
    let dim = ws.u.len();
    let (u, p, q, dir) = (
        &ws.u[..dim],
        &ws.p[..dim],
        &ws.q[..dim],
        &mut ws.grad_p[..dim],
    );
    // The first source row's pass also materializes the shared direction
    // with the `scale` product folded in: `scale * d` is the same rounded
    // value wherever it is computed, so the stored entries are exactly what
    // the remaining rows would recompute, one multiply cheaper per entry.
    let (&first, rest) = ws
        .source_items
        .split_first()
        .expect("center always has at least one source item");
    {
        let row = &mut table.item_row_mut(first as usize)[..dim];
        for k in 0..dim {
            let d = scale * (co.a * u[k] + co.e * p[k]);
            dir[k] = d;
            let old = row[k] as f64;
            row[k] = (old - lr * (d + l2 * old)) as f32;
        }
    }
    for &src in rest {
        sgd_update_prescaled(&mut table.item_row_mut(src as usize)[..dim], dir, lr, l2);
    }
    // The negative-item and user rows live in separate buffers and both
    // read only the pre-step snapshots in `ws`, so one fused pass updates
    // them in the same order element-wise while their read-modify-write
    // chains overlap.
    let (urow, neg) = table.user_item_rows_mut(user as usize, ws.neg_ids[0] as usize);
    let (urow, neg) = (&mut urow[..dim], &mut neg[..dim]);
    for k in 0..dim {
        let dn = co.b * u[k] + co.f * q[k];
        let old_n = neg[k] as f64;
        neg[k] = (old_n - lr * (dn + l2 * old_n)) as f32;
        let du = co.a * p[k] + co.b * q[k] + co.c * u[k];
        let old_u = urow[k] as f64;
        urow[k] = (old_u - lr * (du + l2 * old_u)) as f32;
    }
}

fn apply_baseline_seq(
    table: &mut EmbeddingTable,
    ws: &Workspace,
    hp: &HyperParams,
    user: u32,
    pos_item: u32,
    pos_coeff: f64,
) {
    let lr = hp.learning_rate;
    let l2 = hp.weight_decay;
    // Item gradients are coeff * u_old; ws.u still holds the old user row.
    sgd_update(table.item_row_mut(pos_item as usize), &ws.u, pos_coeff, lr, l2);
    for (&jn, &g) in ws.neg_ids.iter().zip(&ws.neg_coeffs) {
        sgd_update(table.item_row_mut(jn as usize), &ws.u, g, lr, l2);
    }
    // Unit scale: multiplying by 1.0 returns the operand unchanged, so the
    // prescaled form is bit-equal and skips the wasted multiply.
    sgd_update_prescaled(table.user_row_mut(user as usize), &ws.grad_u, lr, l2);
}

// ---------------------------------------------------------------------------
// Public single-step API.

/// Samples one augmented instance for `user` against the current table:
/// interest center from `m_positives` training items, then a labeled
/// negative out of one uniform candidate pair, scored by
/// temperature-scaled cosine.
pub fn draw_augmented_triple<R: Rng + ?Sized>(
    table: &EmbeddingTable,
    ds: &InteractionDataset,
    user: u32,
    hp: &HyperParams,
    rng: &mut R,
) -> Result<AugmentedTriple> {
    hp.validate()?;
    if user as usize >= ds.num_users {
        return Err(Error::IndexOutOfRange {
            kind: "user",
            index: user as usize,
            size: ds.num_users,
        });
    }
    let train_pos = &ds.train_pos[user as usize];
    let center =
        crate::augment::interest_center(table, train_pos, hp.m_positives, rng)?;
    let (j, j_prime) = sample_negative_pair(train_pos, ds.num_items, rng)?;

    let mut u = vec![0.0f64; table.dim()];
    table.read_user_into(user as usize, &mut u);
    let mut row = vec![0.0f64; table.dim()];
    let mut score_item = |id: u32| -> Result<f64> {
        table.read_item_into(id as usize, &mut row);
        Ok(crate::encoder::score_cos_tau(&u, &row, hp.tau)?.value())
    };
    let x_j = score_item(j)?;
    let x_j_prime = score_item(j_prime)?;
    let choice = label_negative((j, x_j), (j_prime, x_j_prime), hp.alpha, rng)?;
    Ok(AugmentedTriple {
        user,
        center,
        choice,
    })
}

/// Loss and row gradients of the augmented objective at `triple`, without
/// updating anything.  `grad_center` is the gradient with respect to the
/// center vector; each source item receives `grad_center / m_eff`.  The
/// triple's center must have been drawn against the current table state.
#[derive(Debug, Clone, PartialEq)]
pub struct ProposedGradients {
    pub loss: f64,
    pub x_up: Score,
    pub x_uq: Score,
    pub grad_user: Vec<f64>,
    pub grad_center: Vec<f64>,
    pub grad_selected_neg: Vec<f64>,
}

pub fn proposed_gradients(
    table: &EmbeddingTable,
    triple: &AugmentedTriple,
    hp: &HyperParams,
) -> Result<ProposedGradients> {
    let mut ws = Workspace::new(table.dim());
    load_triple(table, triple, &mut ws)?;
    let co = proposed_coeffs(&ws.u, &ws.p, &ws.q, hp.tau)?;
    fill_grads(&mut ws, &co);
    Ok(ProposedGradients {
        loss: co.loss,
        x_up: Score(co.x_up),
        x_uq: Score(co.x_uq),
        grad_user: ws.grad_u,
        grad_center: ws.grad_p,
        grad_selected_neg: ws.grad_q,
    })
}

fn load_triple(table: &EmbeddingTable, triple: &AugmentedTriple, ws: &mut Workspace) -> Result<()> {
    if triple.user as usize >= table.num_users() {
        return Err(Error::IndexOutOfRange {
            kind: "user",
            index: triple.user as usize,
            size: table.num_users(),
        });
    }
    for &i in std::iter::once(&triple.choice.selected).chain(&triple.center.source_items) {
        if i as usize >= table.num_items() {
            return Err(Error::IndexOutOfRange {
                kind: "item",
                index: i as usize,
                size: table.num_items(),
            });
        }
    }
    if triple.center.vec.len() != table.dim() || triple.center.source_items.is_empty() {
        return Err(Error::InvalidConfig(format!(
            "interest center has {} coordinates from {} items; table dimension is {}",
            triple.center.vec.len(),
            triple.center.source_items.len(),
            table.dim()
        )));
    }
    table.read_user_into(triple.user as usize, &mut ws.u);
    ws.p.clear();
    ws.p.extend_from_slice(&triple.center.vec);
    table.read_item_into(triple.choice.selected as usize, &mut ws.q);
    ws.source_items.clear();
    ws.source_items.extend_from_slice(&triple.center.source_items);
    ws.neg_ids.clear();
    ws.neg_ids.push(triple.choice.selected);
    Ok(())
}

/// One SGD step of the augmented objective at `triple`.  Returns the
/// pre-update loss.  Touched rows: the user, each center source item
/// (receiving the center gradient split evenly) and the selected negative.
pub fn train_step_proposed(
    table: &mut EmbeddingTable,
    triple: &AugmentedTriple,
    hp: &HyperParams,
) -> Result<f64> {
    hp.validate()?;
    let mut ws = Workspace::new(table.dim());
    load_triple(table, triple, &mut ws)?;
    let co = proposed_coeffs(&ws.u, &ws.p, &ws.q, hp.tau)?;
    apply_proposed_seq(table, &mut ws, &co, hp, triple.user);
    Ok(co.loss)
}

/// Re-evaluates the augmented loss of `triple` against the current table,
/// re-forming the center from its source items.
pub fn proposed_loss_at(
    table: &EmbeddingTable,
    triple: &AugmentedTriple,
    hp: &HyperParams,
) -> Result<f64> {
    let dim = table.dim();
    let mut u = vec![0.0f64; dim];
    table.read_user_into(triple.user as usize, &mut u);
    let mut center = vec![0.0f64; dim];
    let mut row = vec![0.0f64; dim];
    for &src in &triple.center.source_items {
        table.read_item_into(src as usize, &mut row);
        for (c, v) in center.iter_mut().zip(&row) {
            *c += v;
        }
    }
    let m_eff = triple.center.source_items.len() as f64;
    center.iter_mut().for_each(|c| *c /= m_eff);
    table.read_item_into(triple.choice.selected as usize, &mut row);
    let co = proposed_coeffs(&u, &center, &row, hp.tau)?;
    Ok(co.loss)
}

/// One SGD step of a baseline objective.  `negs` must hold exactly one
/// item for `bpr`; the debiased losses reuse the positive score as their
/// extra-positive estimate.  Returns the pre-update loss.
pub fn train_step_baseline(
    table: &mut EmbeddingTable,
    user: u32,
    pos_item: u32,
    negs: &[u32],
    hp: &HyperParams,
) -> Result<f64> {
    hp.validate()?;
    check_instance(table.num_users(), table.num_items(), user, pos_item, negs)?;
    let mut ws = Workspace::new(table.dim());
    ws.p.resize(table.dim(), 0.0);
    ws.neg_ids.clear();
    ws.neg_ids.extend_from_slice(negs);
    let (loss, pos_coeff) = compute_baseline(table, user, pos_item, negs, hp, &mut ws)?;
    apply_baseline_seq(table, &ws, hp, user, pos_item, pos_coeff);
    Ok(loss)
}

/// Baseline loss at the current table without updating, for descent checks.
pub fn baseline_loss_at(
    table: &EmbeddingTable,
    user: u32,
    pos_item: u32,
    negs: &[u32],
    hp: &HyperParams,
) -> Result<f64> {
    check_instance(table.num_users(), table.num_items(), user, pos_item, negs)?;
    let mut ws = Workspace::new(table.dim());
    ws.p.resize(table.dim(), 0.0);
    let (loss, _) = compute_baseline(table, user, pos_item, negs, hp, &mut ws)?;
    Ok(loss)
}

fn check_instance(
    num_users: usize,
    num_items: usize,
    user: u32,
    pos_item: u32,
    negs: &[u32],
) -> Result<()> {
    if user as usize >= num_users {
        return Err(Error::IndexOutOfRange {
            kind: "user",
            index: user as usize,
            size: num_users,
        });
    }
    if negs.is_empty() {
        return Err(Error::InvalidConfig("no negatives supplied".into()));
    }
    for &i in std::iter::once(&pos_item).chain(negs) {
        if i as usize >= num_items {
            return Err(Error::IndexOutOfRange {
                kind: "item",
                index: i as usize,
                size: num_items,
            });
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Full runs.

/// Trains a fresh table on `ds` under `hp`.  Returns the final table and
/// the per-epoch log.  With `epochs = 0` the freshly initialized table is
/// returned untouched.
pub fn run_training(
    ds: &InteractionDataset,
    hp: &HyperParams,
    mode: TrainMode,
) -> Result<(EmbeddingTable, TrainReport)> {
    hp.validate()?;
    let table = init_embeddings(ds.num_users, ds.num_items, hp.dim, hp.seed)?;
    match mode {
        TrainMode::Sequential => run_sequential(table, ds, hp),
        TrainMode::Parallel => {
            #[cfg(feature = "parallel")]
            {
                run_hogwild(table, ds, hp)
            }
            #[cfg(not(feature = "parallel"))]
            {
                Err(Error::InvalidConfig(
                    "parallel training requires the 'parallel' feature".into(),
                ))
            }
        }
    }
}

fn run_sequential(
    mut table: EmbeddingTable,
    ds: &InteractionDataset,
    hp: &HyperParams,
) -> Result<(EmbeddingTable, TrainReport)> {
    let mut pairs = ds.train_pairs();
    let mut rng = ChaCha8Rng::seed_from_u64(hp.seed);
    rng.set_stream(1);
    let mut ws = Workspace::new(hp.dim);
    ws.p.resize(hp.dim, 0.0);
    let mut report = TrainReport::default();

    for epoch in 1..=hp.epochs {
        let start = Instant::now();
        pairs.shuffle(&mut rng);
        let mut loss_sum = 0.0f64;
        if hp.batch_size == 1 {
            for &(u, i) in &pairs {
                loss_sum += step_once_seq(&mut table, ds, hp, u, i, &mut rng, &mut ws)?;
            }
        } else {
            let mut accum = GradAccum::default();
            for batch in pairs.chunks(hp.batch_size) {
                accum.clear();
                for &(u, i) in batch {
                    loss_sum +=
                        accumulate_once(&table, ds, hp, u, i, &mut rng, &mut ws, &mut accum)?;
                }
                accum.apply_seq(&mut table, hp, batch.len() as f64);
            }
        }
        report.epochs.push(EpochReport {
            epoch,
            mean_loss: loss_sum / pairs.len() as f64,
            seconds: start.elapsed().as_secs_f64(),
        });
    }
    Ok((table, report))
}

/// One draw-compute-apply cycle against the plain table.
fn step_once_seq(
    table: &mut EmbeddingTable,
    ds: &InteractionDataset,
    hp: &HyperParams,
    u: u32,
    i: u32,
    rng: &mut ChaCha8Rng,
    ws: &mut Workspace,
) -> Result<f64> {
    let train_pos = &ds.train_pos[u as usize];
    if hp.loss == LossKind::Proposed {
        let co = draw_and_compute_proposed(table, train_pos, u, hp, rng, ws)?;
        apply_proposed_seq(table, ws, &co, hp, u);
        Ok(co.loss)
    } else {
        let n = if hp.loss == LossKind::Bpr {
            1
        } else {
            hp.num_negatives
        };
        sample_negatives(train_pos, ds.num_items, n, rng, &mut ws.neg_ids)?;
        let negs = std::mem::take(&mut ws.neg_ids);
        let (loss, pos_coeff) = compute_baseline(table, u, i, &negs, hp, ws)?;
        ws.neg_ids = negs;
        apply_baseline_seq(table, ws, hp, u, i, pos_coeff);
        Ok(loss)
    }
}

// ---------------------------------------------------------------------------
// Mini-batch accumulation (batch_size > 1): gradients from every instance
// in a batch are computed against the batch-start table, then the mean is
// applied once per touched row.

#[derive(Default)]
struct GradAccum {
    entries: std::collections::BTreeMap<(bool, u32), Vec<f64>>,
}

impl GradAccum {
    fn clear(&mut self) {
        self.entries.clear();
    }

    fn add(&mut self, is_user: bool, id: u32, dir: &[f64], scale: f64) {
        let slot = self
            .entries
            .entry((is_user, id))
            .or_insert_with(|| vec![0.0; dir.len()]);
        for (s, d) in slot.iter_mut().zip(dir) {
            *s += scale * d;
        }
    }

    fn apply_seq(&self, table: &mut EmbeddingTable, hp: &HyperParams, batch: f64) {
        for (&(is_user, id), grad) in &self.entries {
            let row = if is_user {
                table.user_row_mut(id as usize)
            } else {
                table.item_row_mut(id as usize)
            };
            sgd_update(row, grad, 1.0 / batch, hp.learning_rate, hp.weight_decay);
        }
    }

    #[cfg(feature = "parallel")]
    fn apply_atomic(&self, view: &AtomicTableView, hp: &HyperParams, batch: f64) {
        for (&(is_user, id), grad) in &self.entries {
            view.update_row(is_user, id as usize, grad, 1.0 / batch, hp.learning_rate, hp.weight_decay);
        }
    }
}

/// Computes one instance against the current table and folds its gradients
/// into `accum` instead of applying them.
#[allow(clippy::too_many_arguments)]
fn accumulate_once<S: RowSource, R: Rng + ?Sized>(
    rows: &S,
    ds: &InteractionDataset,
    hp: &HyperParams,
    u: u32,
    i: u32,
    rng: &mut R,
    ws: &mut Workspace,
    accum: &mut GradAccum,
) -> Result<f64> {
    let train_pos = &ds.train_pos[u as usize];
    if hp.loss == LossKind::Proposed {
        let co = draw_and_compute_proposed(rows, train_pos, u, hp, rng, ws)?;
        fill_grads(ws, &co);
        let m_eff = ws.source_items.len() as f64;
        for &src in &ws.source_items {
            accum.add(false, src, &ws.grad_p, 1.0 / m_eff);
        }
        accum.add(false, ws.neg_ids[0], &ws.grad_q, 1.0);
        accum.add(true, u, &ws.grad_u, 1.0);
        Ok(co.loss)
    } else {
        let n = if hp.loss == LossKind::Bpr {
            1
        } else {
            hp.num_negatives
        };
        sample_negatives(train_pos, ds.num_items, n, rng, &mut ws.neg_ids)?;
        let negs = std::mem::take(&mut ws.neg_ids);
        let (loss, pos_coeff) = compute_baseline(rows, u, i, &negs, hp, ws)?;
        accum.add(false, i, &ws.u, pos_coeff);
        for (&jn, &g) in negs.iter().zip(&ws.neg_coeffs) {
            accum.add(false, jn, &ws.u, g);
        }
        accum.add(true, u, &ws.grad_u, 1.0);
        ws.neg_ids = negs;
        Ok(loss)
    }
}

// ---------------------------------------------------------------------------
// Lock-free parallel training.

#[cfg(feature = "parallel")]
pub(crate) struct AtomicTableView {
    num_users: usize,
    num_items: usize,
    dim: usize,
    users: Vec<std::sync::atomic::AtomicU32>,
    items: Vec<std::sync::atomic::AtomicU32>,
}

#[cfg(feature = "parallel")]
impl AtomicTableView {
    fn from_table(table: &EmbeddingTable) -> Self {
        use std::sync::atomic::AtomicU32;
        let to_atomic =
            |s: &[f32]| s.iter().map(|v| AtomicU32::new(v.to_bits())).collect();
        Self {
            num_users: table.num_users(),
            num_items: table.num_items(),
            dim: table.dim(),
            users: to_atomic(table.users_flat()),
            items: to_atomic(table.items_flat()),
        }
    }

    fn into_table(self) -> EmbeddingTable {
        use std::sync::atomic::Ordering::Relaxed;
        let to_f32 = |v: Vec<std::sync::atomic::AtomicU32>| {
            v.into_iter()
                .map(|a| f32::from_bits(a.load(Relaxed)))
                .collect()
        };
        EmbeddingTable::from_flat_unchecked(
            self.num_users,
            self.num_items,
            self.dim,
            to_f32(self.users),
            to_f32(self.items),
        )
    }

    fn row(&self, is_user: bool, idx: usize) -> &[std::sync::atomic::AtomicU32] {
        let cells = if is_user { &self.users } else { &self.items };
        &cells[idx * self.dim..(idx + 1) * self.dim]
    }

    /// Relaxed read-modify-write without compare-and-swap: concurrent
    /// writers may overwrite each other, which lock-free SGD tolerates.
    fn update_row(&self, is_user: bool, idx: usize, dir: &[f64], scale: f64, lr: f64, l2: f64) {
        use std::sync::atomic::Ordering::Relaxed;
        for (cell, d) in self.row(is_user, idx).iter().zip(dir) {
            let old = f32::from_bits(cell.load(Relaxed)) as f64;
            let new = (old - lr * (scale * d + l2 * old)) as f32;
            cell.store(new.to_bits(), Relaxed);
        }
    }
}

#[cfg(feature = "parallel")]
impl RowSource for AtomicTableView {
    fn dim(&self) -> usize {
        self.dim
    }

    fn num_items(&self) -> usize {
        self.num_items
    }

    fn read_user_into(&self, u: usize, out: &mut [f64]) {
        use std::sync::atomic::Ordering::Relaxed;
        for (dst, cell) in out.iter_mut().zip(self.row(true, u)) {
            *dst = f32::from_bits(cell.load(Relaxed)) as f64;
        }
    }

    fn read_item_into(&self, i: usize, out: &mut [f64]) {
        use std::sync::atomic::Ordering::Relaxed;
        for (dst, cell) in out.iter_mut().zip(self.row(false, i)) {
            *dst = f32::from_bits(cell.load(Relaxed)) as f64;
        }
    }

    fn accum_item_into(&self, i: usize, acc: &mut [f64]) {
        use std::sync::atomic::Ordering::Relaxed;
        for (dst, cell) in acc.iter_mut().zip(self.row(false, i)) {
            *dst += f32::from_bits(cell.load(Relaxed)) as f64;
        }
    }
}

#[cfg(feature = "parallel")]
fn apply_proposed_atomic(view: &AtomicTableView, ws: &Workspace, hp: &HyperParams, user: u32) {
    let lr = hp.learning_rate;
    let l2 = hp.weight_decay;
    let m_eff = ws.source_items.len() as f64;
    for &src in &ws.source_items {
        view.update_row(false, src as usize, &ws.grad_p, 1.0 / m_eff, lr, l2);
    }
    view.update_row(false, ws.neg_ids[0] as usize, &ws.grad_q, 1.0, lr, l2);
    view.update_row(true, user as usize, &ws.grad_u, 1.0, lr, l2);
}

#[cfg(feature = "parallel")]
fn apply_baseline_atomic(
    view: &AtomicTableView,
    ws: &Workspace,
    hp: &HyperParams,
    user: u32,
    pos_item: u32,
    pos_coeff: f64,
) {
    let lr = hp.learning_rate;
    let l2 = hp.weight_decay;
    view.update_row(false, pos_item as usize, &ws.u, pos_coeff, lr, l2);
    for (&jn, &g) in ws.neg_ids.iter().zip(&ws.neg_coeffs) {
        view.update_row(false, jn as usize, &ws.u, g, lr, l2);
    }
    view.update_row(true, user as usize, &ws.grad_u, 1.0, lr, l2);
}

#[cfg(feature = "parallel")]
fn run_hogwild(
    table: EmbeddingTable,
    ds: &InteractionDataset,
    hp: &HyperParams,
) -> Result<(EmbeddingTable, TrainReport)> {
    use rayon::prelude::*;

    let view = AtomicTableView::from_table(&table);
    drop(table);
    let mut pairs = ds.train_pairs();
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(hp.seed);
    shuffle_rng.set_stream(1);
    let workers = rayon::current_num_threads().max(1);
    let mut report = TrainReport::default();

    for epoch in 1..=hp.epochs {
        let start = Instant::now();
        pairs.shuffle(&mut shuffle_rng);
        let chunk = pairs.len().div_ceil(workers).max(1);
        let shard_sums: Vec<f64> = pairs
            .par_chunks(chunk)
            .enumerate()
            .map(|(w, shard)| -> Result<f64> {
                let mut rng = ChaCha8Rng::seed_from_u64(hp.seed);
                rng.set_stream((epoch as u64) << 20 | (w as u64 + 2));
                let mut ws = Workspace::new(hp.dim);
                ws.p.resize(hp.dim, 0.0);
                let mut sum = 0.0f64;
                if hp.batch_size == 1 {
                    for &(u, i) in shard {
                        sum += step_once_atomic(&view, ds, hp, u, i, &mut rng, &mut ws)?;
                    }
                } else {
                    let mut accum = GradAccum::default();
                    for batch in shard.chunks(hp.batch_size) {
                        accum.clear();
                        for &(u, i) in batch {
                            sum += accumulate_once(
                                &view, ds, hp, u, i, &mut rng, &mut ws, &mut accum,
                            )?;
                        }
                        accum.apply_atomic(&view, hp, batch.len() as f64);
                    }
                }
                Ok(sum)
            })
            .collect::<Result<Vec<_>>>()?;
        report.epochs.push(EpochReport {
            epoch,
            mean_loss: shard_sums.iter().sum::<f64>() / pairs.len() as f64,
            seconds: start.elapsed().as_secs_f64(),
        });
    }
    Ok((view.into_table(), report))
}

#[cfg(feature = "parallel")]
fn step_once_atomic(
    view: &AtomicTableView,
    ds: &InteractionDataset,
    hp: &HyperParams,
    u: u32,
    i: u32,
    rng: &mut ChaCha8Rng,
    ws: &mut Workspace,
) -> Result<f64> {
    let train_pos = &ds.train_pos[u as usize];
    if hp.loss == LossKind::Proposed {
        let co = draw_and_compute_proposed(view, train_pos, u, hp, rng, ws)?;
        fill_grads(ws, &co);
        apply_proposed_atomic(view, ws, hp, u);
        Ok(co.loss)
    } else {
        let n = if hp.loss == LossKind::Bpr {
            1
        } else {
            hp.num_negatives
        };
        sample_negatives(train_pos, ds.num_items, n, rng, &mut ws.neg_ids)?;
        let negs = std::mem::take(&mut ws.neg_ids);
        let (loss, pos_coeff) = compute_baseline(view, u, i, &negs, hp, ws)?;
        ws.neg_ids = negs;
        apply_baseline_atomic(view, ws, hp, u, i, pos_coeff);
        Ok(loss)
    }
}
