//! Deterministic synthetic implicit-feedback corpora.
//!
//! Real interaction logs are not always on hand, so this module plants the
//! structure the engine is supposed to exploit and emits it as an ordinary
//! interaction log: items live near cluster centers in a latent space,
//! users prefer one or two clusters, exposure mixes preference with a
//! heavy-tailed popularity skew, and a slice of every history is uniform
//! noise.  Generation is a pure function of the config, so corpora can be
//! regenerated anywhere from a seed instead of being checked in.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Gumbel, Normal};

use crate::error::{Error, Result};
use crate::ingest::RawInteraction;

/// Shape and texture of a generated corpus.  `Default` is a small corpus
/// sized for test-suite training runs; [`SynthConfig::ml100k_scale`] matches
/// the row counts of the classic MovieLens log.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub num_users: usize,
    pub num_items: usize,
    /// Latent item clusters; users prefer one or two of them.
    pub clusters: usize,
    /// Dimension of the hidden factor space (independent of the trained
    /// embedding dimension).
    pub latent_dim: usize,
    /// Every user interacts with at least this many items.
    pub min_interactions: usize,
    /// Mean of the exponential tail added on top of `min_interactions`.
    pub mean_extra_interactions: f64,
    /// Fraction of each history drawn uniformly instead of by preference.
    pub noise_fraction: f64,
    /// Scales preference relative to the Gumbel exposure noise; higher
    /// means cleaner cluster structure.
    pub affinity_sharpness: f64,
    /// Log-normal sigma of the per-item popularity bias.
    pub popularity_sigma: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_users: 250,
            num_items: 400,
            clusters: 10,
            latent_dim: 12,
            min_interactions: 12,
            mean_extra_interactions: 18.0,
            noise_fraction: 0.15,
            affinity_sharpness: 6.0,
            popularity_sigma: 2.0,
            seed: 7,
        }
    }
}

impl SynthConfig {
    /// User, item and interaction counts of the MovieLens-100K log.
    pub fn ml100k_scale() -> Self {
        Self {
            num_users: 943,
            num_items: 1682,
            min_interactions: 20,
            mean_extra_interactions: 86.0,
            ..Self::default()
        }
    }

    fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if self.num_users == 0 || self.num_items < 8 {
            return bad("need at least one user and eight items".into());
        }
        if self.num_users > u32::MAX as usize || self.num_items > u32::MAX as usize {
            return bad("user and item counts must fit in u32".into());
        }
        if self.clusters == 0 || self.latent_dim == 0 {
            return bad("clusters and latent_dim must be at least 1".into());
        }
        if self.min_interactions == 0 {
            return bad("min_interactions must be at least 1".into());
        }
        if self.min_interactions > self.num_items / 2 {
            return bad(format!(
                "min_interactions {} exceeds half the catalog ({} items)",
                self.min_interactions, self.num_items
            ));
        }
        if !(0.0..=1.0).contains(&self.noise_fraction) {
            return bad(format!(
                "noise_fraction must lie in [0, 1], got {}",
                self.noise_fraction
            ));
        }
        if !(self.mean_extra_interactions >= 0.0)
            || !(self.affinity_sharpness >= 0.0)
            || !(self.popularity_sigma >= 0.0)
        {
            return bad("tail mean, sharpness and popularity sigma must be non-negative".into());
        }
        Ok(())
    }
}

/// Hidden factors behind a corpus, kept separate from the emitted log so
/// tests can measure how well training recovers them.
struct Latents {
    /// `num_items * latent_dim`, row-major.
    item_vecs: Vec<f64>,
    item_log_pop: Vec<f64>,
    /// Read by the concentration tests only.
    #[allow(dead_code)]
    item_cluster: Vec<usize>,
    /// `num_users * latent_dim`, row-major.
    user_vecs: Vec<f64>,
    /// Primary and secondary preferred cluster per user; test-only, like
    /// `item_cluster`.
    #[allow(dead_code)]
    user_clusters: Vec<(usize, usize)>,
}

fn build_latents(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Latents {
    let d = cfg.latent_dim;
    let unit = Normal::<f64>::new(0.0, 1.0).expect("valid normal parameters");
    let item_jitter = Normal::<f64>::new(0.0, 0.35).expect("valid normal parameters");
    let user_jitter = Normal::<f64>::new(0.0, 0.25).expect("valid normal parameters");
    let log_pop = Normal::<f64>::new(0.0, cfg.popularity_sigma).expect("valid normal parameters");

    let centers: Vec<f64> = (0..cfg.clusters * d).map(|_| unit.sample(rng)).collect();
    let center = |c: usize| &centers[c * d..(c + 1) * d];

    let mut item_vecs = Vec::with_capacity(cfg.num_items * d);
    let mut item_cluster = Vec::with_capacity(cfg.num_items);
    let mut item_log_pop = Vec::with_capacity(cfg.num_items);
    for _ in 0..cfg.num_items {
        let c = rng.random_range(0..cfg.clusters);
        item_cluster.push(c);
        item_vecs.extend(center(c).iter().map(|v| v + item_jitter.sample(rng)));
        item_log_pop.push(log_pop.sample(rng));
    }

    let mut user_vecs = Vec::with_capacity(cfg.num_users * d);
    let mut user_clusters = Vec::with_capacity(cfg.num_users);
    for _ in 0..cfg.num_users {
        let primary = rng.random_range(0..cfg.clusters);
        let secondary = rng.random_range(0..cfg.clusters);
        let w = rng.random_range(0.6..0.9);
        user_clusters.push((primary, secondary));
        let (cp, cs) = (center(primary), center(secondary));
        user_vecs.extend(
            cp.iter()
                .zip(cs)
                .map(|(p, s)| w * p + (1.0 - w) * s + user_jitter.sample(rng)),
        );
    }

    Latents {
        item_vecs,
        item_log_pop,
        item_cluster,
        user_vecs,
        user_clusters,
    }
}

/// Picks one user's history: a preference-plus-popularity Gumbel top-k
/// over the catalog, with a uniform-noise remainder.  Returns item ids in
/// ascending order.
fn pick_history(
    cfg: &SynthConfig,
    lat: &Latents,
    user: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<u32> {
    let d = cfg.latent_dim;
    let gumbel = Gumbel::new(0.0, 1.0).expect("valid gumbel parameters");
    let extra = if cfg.mean_extra_interactions > 0.0 {
        let tail = Exp::new(1.0 / cfg.mean_extra_interactions).expect("positive rate");
        tail.sample(rng) as usize
    } else {
        0
    };
    let n_total = (cfg.min_interactions + extra).min(cfg.num_items / 2);
    let n_noise = ((cfg.noise_fraction * n_total as f64).round() as usize).min(n_total);
    let n_signal = n_total - n_noise;

    let uvec = &lat.user_vecs[user * d..(user + 1) * d];
    let mut keyed: Vec<(f64, u32)> = (0..cfg.num_items)
        .map(|i| {
            let ivec = &lat.item_vecs[i * d..(i + 1) * d];
            let affinity: f64 =
                uvec.iter().zip(ivec).map(|(a, b)| a * b).sum::<f64>() / d as f64;
            let score = cfg.affinity_sharpness * affinity
                + lat.item_log_pop[i]
                + gumbel.sample(rng);
            (score, i as u32)
        })
        .collect();

    let mut chosen = vec![false; cfg.num_items];
    if n_signal > 0 {
        keyed.select_nth_unstable_by(n_signal - 1, |a, b| b.0.total_cmp(&a.0));
        for &(_, i) in &keyed[..n_signal] {
            chosen[i as usize] = true;
        }
    }
    let mut picked = n_signal;
    while picked < n_total {
        let i = rng.random_range(0..cfg.num_items);
        if !chosen[i] {
            chosen[i] = true;
            picked += 1;
        }
    }
    chosen
        .iter()
        .enumerate()
        .filter_map(|(i, &c)| c.then_some(i as u32))
        .collect()
}

/// Generates the full interaction log for `cfg`, users in id order and
/// items ascending within a user.  Same config, same log.
pub fn generate(cfg: &SynthConfig) -> Result<Vec<RawInteraction>> {
    cfg.validate()?;
    let mut latent_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    latent_rng.set_stream(0);
    let lat = build_latents(cfg, &mut latent_rng);

    let mut pick_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    pick_rng.set_stream(1);
    let mut rows = Vec::new();
    for u in 0..cfg.num_users {
        for i in pick_history(cfg, &lat, u, &mut pick_rng) {
            rows.push(RawInteraction {
                user_token: format!("u{u}"),
                item_token: format!("i{i}"),
                weight: 1.0,
            });
        }
    }
    Ok(rows)
}
