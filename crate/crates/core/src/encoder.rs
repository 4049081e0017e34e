//! Embedding tables for users and items, similarity scoring, and a small
//! binary checkpoint format.
//!
//! Rows are stored as `f32`; all arithmetic that consumes them is done in
//! `f64`.  The checkpoint layout is fixed and versioned so that two runs of
//! the same build can be compared byte for byte.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

/// First four bytes of every checkpoint file.
pub const CHECKPOINT_MAGIC: [u8; 4] = *b"CFCT";
/// Bumped whenever the byte layout changes.
pub const CHECKPOINT_VERSION: u32 = 1;

/// A similarity score between a user representation and a target
/// representation, before any loss is applied.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct Score(pub f64);

impl Score {
    pub fn value(self) -> f64 {
        self.0
    }
}

/// Dense user and item embeddings with a shared dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    num_users: usize,
    num_items: usize,
    dim: usize,
    users: Vec<f32>,
    items: Vec<f32>,
}

impl EmbeddingTable {
    /// Builds a table from pre-existing row-major vectors.  Lengths must
    /// match the declared shape and every entry must be finite.
    pub fn from_vecs(
        num_users: usize,
        num_items: usize,
        dim: usize,
        users: Vec<f32>,
        items: Vec<f32>,
    ) -> Result<Self> {
        check_shape(num_users, num_items, dim)?;
        if users.len() != num_users * dim {
            return Err(Error::InvalidConfig(format!(
                "user vector length {} does not match {} x {}",
                users.len(),
                num_users,
                dim
            )));
        }
        if items.len() != num_items * dim {
            return Err(Error::InvalidConfig(format!(
                "item vector length {} does not match {} x {}",
                items.len(),
                num_items,
                dim
            )));
        }
        if !users.iter().chain(items.iter()).all(|v| v.is_finite()) {
            return Err(Error::InvalidConfig(
                "embedding entries must be finite".into(),
            ));
        }
        Ok(Self {
            num_users,
            num_items,
            dim,
            users,
            items,
        })
    }

    pub fn num_users(&self) -> usize {
        self.num_users
    }

    pub fn num_items(&self) -> usize {
        self.num_items
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Borrow of one user row; `u` must be in range.
    pub fn user_row(&self, u: usize) -> &[f32] {
        &self.users[u * self.dim..(u + 1) * self.dim]
    }

    /// Borrow of one item row; `i` must be in range.
    pub fn item_row(&self, i: usize) -> &[f32] {
        &self.items[i * self.dim..(i + 1) * self.dim]
    }

    pub(crate) fn user_row_mut(&mut self, u: usize) -> &mut [f32] {
        &mut self.users[u * self.dim..(u + 1) * self.dim]
    }

    pub(crate) fn item_row_mut(&mut self, i: usize) -> &mut [f32] {
        &mut self.items[i * self.dim..(i + 1) * self.dim]
    }

    /// Simultaneous mutable borrows of one user row and one item row; user
    /// and item embeddings live in separate buffers, so the two never
    /// alias and callers can update both in a single pass.
    pub(crate) fn user_item_rows_mut(
        &mut self,
        u: usize,
        i: usize,
    ) -> (&mut [f32], &mut [f32]) {
        let d = self.dim;
        (
            &mut self.users[u * d..(u + 1) * d],
            &mut self.items[i * d..(i + 1) * d],
        )
    }

    // The flat views and the unchecked constructor exist for the lock-free
    // training table, which round-trips rows through atomics.
    #[cfg_attr(not(feature = "parallel"), allow(dead_code))]
    pub(crate) fn users_flat(&self) -> &[f32] {
        &self.users
    }

    #[cfg_attr(not(feature = "parallel"), allow(dead_code))]
    pub(crate) fn items_flat(&self) -> &[f32] {
        &self.items
    }

    #[cfg_attr(not(feature = "parallel"), allow(dead_code))]
    pub(crate) fn from_flat_unchecked(
        num_users: usize,
        num_items: usize,
        dim: usize,
        users: Vec<f32>,
        items: Vec<f32>,
    ) -> Self {
        Self {
            num_users,
            num_items,
            dim,
            users,
            items,
        }
    }

    fn check_user(&self, u: usize) -> Result<()> {
        if u >= self.num_users {
            return Err(Error::IndexOutOfRange {
                kind: "user",
                index: u,
                size: self.num_users,
            });
        }
        Ok(())
    }

    fn check_item(&self, i: usize) -> Result<()> {
        if i >= self.num_items {
            return Err(Error::IndexOutOfRange {
                kind: "item",
                index: i,
                size: self.num_items,
            });
        }
        Ok(())
    }

    /// Serializes the table into the versioned binary layout: magic,
    /// version, `num_users`, `num_items`, `dim` as little-endian `u32`,
    /// then user rows and item rows as row-major little-endian `f32`.
    pub fn write_checkpoint<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(&CHECKPOINT_MAGIC)?;
        for v in [
            CHECKPOINT_VERSION,
            self.num_users as u32,
            self.num_items as u32,
            self.dim as u32,
        ] {
            w.write_all(&v.to_le_bytes())?;
        }
        for v in self.users.iter().chain(self.items.iter()) {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    /// Parses a table from the layout written by [`write_checkpoint`].
    ///
    /// [`write_checkpoint`]: EmbeddingTable::write_checkpoint
    pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)
            .map_err(|e| Error::Checkpoint(format!("truncated header: {e}")))?;
        if magic != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint(format!(
                "bad magic {magic:02x?}, expected {CHECKPOINT_MAGIC:02x?}"
            )));
        }
        let version = read_u32(&mut r)?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported version {version}, expected {CHECKPOINT_VERSION}"
            )));
        }
        let num_users = read_u32(&mut r)? as usize;
        let num_items = read_u32(&mut r)? as usize;
        let dim = read_u32(&mut r)? as usize;
        check_shape(num_users, num_items, dim)
            .map_err(|e| Error::Checkpoint(e.to_string()))?;
        let user_len = num_users
            .checked_mul(dim)
            .ok_or_else(|| Error::Checkpoint("user table size overflows".into()))?;
        let item_len = num_items
            .checked_mul(dim)
            .ok_or_else(|| Error::Checkpoint("item table size overflows".into()))?;
        let users = read_f32_block(&mut r, user_len, "user")?;
        let items = read_f32_block(&mut r, item_len, "item")?;
        let mut probe = [0u8; 1];
        if r.read(&mut probe)? != 0 {
            return Err(Error::Checkpoint("trailing bytes after item block".into()));
        }
        if !users.iter().chain(items.iter()).all(|v| v.is_finite()) {
            return Err(Error::Checkpoint("non-finite embedding entry".into()));
        }
        Ok(Self {
            num_users,
            num_items,
            dim,
            users,
            items,
        })
    }

    /// Writes the checkpoint to a file, replacing any existing content.
    pub fn save_checkpoint<P: AsRef<Path>>(&self, path: P) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_checkpoint(&mut w)?;
        w.flush()?;
        Ok(())
    }

    /// Loads a checkpoint previously produced by [`save_checkpoint`].
    ///
    /// [`save_checkpoint`]: EmbeddingTable::save_checkpoint
    pub fn load_checkpoint<P: AsRef<Path>>(path: P) -> Result<Self> {
        Self::read_checkpoint(BufReader::new(File::open(path)?))
    }
}

fn check_shape(num_users: usize, num_items: usize, dim: usize) -> Result<()> {
    if num_users == 0 || num_items == 0 {
        return Err(Error::InvalidConfig(
            "embedding table needs at least one user and one item".into(),
        ));
    }
    if dim == 0 {
        return Err(Error::InvalidConfig(
            "embedding dimension must be at least 1".into(),
        ));
    }
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)
        .map_err(|e| Error::Checkpoint(format!("truncated header: {e}")))?;
    Ok(u32::from_le_bytes(buf))
}

fn read_f32_block<R: Read>(r: &mut R, len: usize, what: &str) -> Result<Vec<f32>> {
    let mut bytes = vec![0u8; len.checked_mul(4).ok_or_else(|| {
        Error::Checkpoint(format!("{what} block size overflows"))
    })?];
    r.read_exact(&mut bytes)
        .map_err(|e| Error::Checkpoint(format!("truncated {what} block: {e}")))?;
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

/// Read access to embedding rows as `f64`, shared by the plain table and
/// the lock-free training view so that sampling and gradient math are
/// written once.
pub(crate) trait RowSource: Sync {
    fn dim(&self) -> usize;
    fn num_items(&self) -> usize;
    fn read_user_into(&self, u: usize, out: &mut [f64]);
    fn read_item_into(&self, i: usize, out: &mut [f64]);
    /// `acc[k] += row(i)[k]`, widening each entry once; one pass instead of
    /// a read into scratch followed by an add.
    fn accum_item_into(&self, i: usize, acc: &mut [f64]);
    /// Direct `f32` view of one item row where the backing store allows
    /// it.  Fused hot loops widen entries straight from the view — the
    /// same per-entry conversions in the same order as a buffered read,
    /// minus the intermediate stores.  Sources that read through atomics
    /// return `None` and take the buffered path.
    fn item_row_f32(&self, _i: usize) -> Option<&[f32]> {
        None
    }
}

impl RowSource for EmbeddingTable {
    fn dim(&self) -> usize {
        self.dim
    }

    fn num_items(&self) -> usize {
        self.num_items
    }

    fn read_user_into(&self, u: usize, out: &mut [f64]) {
        let src = self.user_row(u);
        let n = out.len().min(src.len());
        let (out, src) = (&mut out[..n], &src[..n]);
        for k in 0..n {
            out[k] = src[k] as f64;
        }
    }

    fn read_item_into(&self, i: usize, out: &mut [f64]) {
        let src = self.item_row(i);
        let n = out.len().min(src.len());
        let (out, src) = (&mut out[..n], &src[..n]);
        for k in 0..n {
            out[k] = src[k] as f64;
        }
    }

    fn accum_item_into(&self, i: usize, acc: &mut [f64]) {
        let src = self.item_row(i);
        let n = acc.len().min(src.len());
        let (acc, src) = (&mut acc[..n], &src[..n]);
        for k in 0..n {
            acc[k] += src[k] as f64;
        }
    }

    fn item_row_f32(&self, i: usize) -> Option<&[f32]> {
        Some(self.item_row(i))
    }
}

/// Fresh table with every entry drawn independently from a zero-mean
/// normal distribution with standard deviation 0.1, in a fixed order, so
/// the same seed always produces the same table.
pub fn init_embeddings(
    num_users: usize,
    num_items: usize,
    dim: usize,
    seed: u64,
) -> Result<EmbeddingTable> {
    check_shape(num_users, num_items, dim)?;
    let normal = Normal::<f32>::new(0.0, 0.1).expect("valid normal parameters");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let users: Vec<f32> = (0..num_users * dim)
        .map(|_| normal.sample(&mut rng))
        .collect();
    let items: Vec<f32> = (0..num_items * dim)
        .map(|_| normal.sample(&mut rng))
        .collect();
    EmbeddingTable::from_vecs(num_users, num_items, dim, users, items)
}

/// Inner product of a user row and an item row, accumulated in `f64`.
pub fn score_dot(table: &EmbeddingTable, u: usize, i: usize) -> Result<Score> {
    table.check_user(u)?;
    table.check_item(i)?;
    Ok(Score(dot_rows(table.user_row(u), table.item_row(i))))
}

pub(crate) fn dot_rows(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| *x as f64 * *y as f64)
        .sum()
}

pub(crate) fn dot64(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn norm64(a: &[f64]) -> f64 {
    dot64(a, a).sqrt()
}

/// Cosine similarity between two vectors divided by the temperature `tau`.
/// The cosine is clamped into `[-1, 1]` before scaling so the result stays
/// within `[-1/tau, 1/tau]` even under floating-point drift.
pub fn score_cos_tau(user_vec: &[f64], target_vec: &[f64], tau: f64) -> Result<Score> {
    if user_vec.len() != target_vec.len() {
        return Err(Error::InvalidConfig(format!(
            "dimension mismatch: {} vs {}",
            user_vec.len(),
            target_vec.len()
        )));
    }
    if !(tau > 0.0) {
        return Err(Error::InvalidConfig(format!(
            "temperature must be positive, got {tau}"
        )));
    }
    let nu = norm64(user_vec);
    let nt = norm64(target_vec);
    if nu == 0.0 {
        return Err(Error::DegenerateEmbedding("user vector has zero norm".into()));
    }
    if nt == 0.0 {
        return Err(Error::DegenerateEmbedding(
            "target vector has zero norm".into(),
        ));
    }
    let cos = (dot64(user_vec, target_vec) / (nu * nt)).clamp(-1.0, 1.0);
    Ok(Score(cos / tau))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    #[test]
    fn init_is_deterministic_per_seed() {
        let a = init_embeddings(20, 30, 8, 7).unwrap();
        let b = init_embeddings(20, 30, 8, 7).unwrap();
        let c = init_embeddings(20, 30, 8, 8).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn init_matches_declared_spread() {
        let t = init_embeddings(150, 150, 40, 3).unwrap();
        let all: Vec<f64> = t
            .users_flat()
            .iter()
            .chain(t.items_flat())
            .map(|v| *v as f64)
            .collect();
        assert!(all.len() >= 10_000);
        let mean = all.iter().sum::<f64>() / all.len() as f64;
        let var = all.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / all.len() as f64;
        let std = var.sqrt();
        assert!(mean.abs() < 0.01, "mean {mean}");
        assert!((0.05..=0.15).contains(&std), "std {std}");
    }

    #[test]
    fn init_handles_minimal_shape() {
        let t = init_embeddings(1, 1, 1, 0).unwrap();
        assert_eq!(t.user_row(0).len(), 1);
        assert_eq!(t.item_row(0).len(), 1);
    }

    #[test]
    fn init_rejects_zero_dim() {
        assert!(matches!(
            init_embeddings(1, 1, 0, 0),
            Err(Error::InvalidConfig(_))
        ));
        assert!(matches!(
            init_embeddings(0, 1, 4, 0),
            Err(Error::InvalidConfig(_))
        ));
    }

    #[test]
    fn dot_matches_hand_value() {
        let t = EmbeddingTable::from_vecs(
            1,
            1,
            2,
            vec![1.0, 2.0],
            vec![3.0, -1.0],
        )
        .unwrap();
        assert_eq!(score_dot(&t, 0, 0).unwrap().value(), 1.0);
        assert!(matches!(
            score_dot(&t, 1, 0),
            Err(Error::IndexOutOfRange { kind: "user", .. })
        ));
        assert!(matches!(
            score_dot(&t, 0, 3),
            Err(Error::IndexOutOfRange { kind: "item", .. })
        ));
    }

    #[test]
    fn cosine_matches_hand_values() {
        let u = [1.0, 0.0];
        assert_relative_eq!(
            score_cos_tau(&u, &[1.0, 0.0], 0.2).unwrap().value(),
            5.0,
            max_relative = 1e-12
        );
        assert_eq!(score_cos_tau(&u, &[0.0, 1.0], 0.2).unwrap().value(), 0.0);
        assert_relative_eq!(
            score_cos_tau(&u, &[1.0, 1.0], 1.0).unwrap().value(),
            std::f64::consts::FRAC_1_SQRT_2,
            epsilon = 1e-12
        );
    }

    #[test]
    fn cosine_rejects_bad_inputs() {
        assert!(matches!(
            score_cos_tau(&[0.0, 0.0], &[1.0, 0.0], 0.2),
            Err(Error::DegenerateEmbedding(_))
        ));
        assert!(matches!(
            score_cos_tau(&[1.0], &[1.0, 0.0], 0.2),
            Err(Error::InvalidConfig(_))
        ));
        assert!(matches!(
            score_cos_tau(&[1.0, 0.0], &[1.0, 0.0], 0.0),
            Err(Error::InvalidConfig(_))
        ));
    }

    #[test]
    fn checkpoint_bytes_match_layout() {
        let t = EmbeddingTable::from_vecs(
            1,
            1,
            2,
            vec![0.5, -1.0],
            vec![2.0, 0.25],
        )
        .unwrap();
        let mut bytes = Vec::new();
        t.write_checkpoint(&mut bytes).unwrap();
        let expected: Vec<u8> = [
            b"CFCT".as_slice(),
            &1u32.to_le_bytes(),
            &1u32.to_le_bytes(),
            &1u32.to_le_bytes(),
            &2u32.to_le_bytes(),
            &0.5f32.to_le_bytes(),
            &(-1.0f32).to_le_bytes(),
            &2.0f32.to_le_bytes(),
            &0.25f32.to_le_bytes(),
        ]
        .concat();
        assert_eq!(bytes, expected);
    }

    #[test]
    fn checkpoint_roundtrips() {
        let t = init_embeddings(13, 29, 6, 99).unwrap();
        let mut bytes = Vec::new();
        t.write_checkpoint(&mut bytes).unwrap();
        let back = EmbeddingTable::read_checkpoint(bytes.as_slice()).unwrap();
        assert_eq!(t, back);
    }

    #[test]
    fn checkpoint_rejects_corruption() {
        let t = init_embeddings(2, 2, 3, 1).unwrap();
        let mut bytes = Vec::new();
        t.write_checkpoint(&mut bytes).unwrap();

        let mut bad_magic = bytes.clone();
        bad_magic[0] = b'X';
        assert!(matches!(
            EmbeddingTable::read_checkpoint(bad_magic.as_slice()),
            Err(Error::Checkpoint(_))
        ));

        let mut bad_version = bytes.clone();
        bad_version[4] = 9;
        assert!(matches!(
            EmbeddingTable::read_checkpoint(bad_version.as_slice()),
            Err(Error::Checkpoint(_))
        ));

        let truncated = &bytes[..bytes.len() - 3];
        assert!(matches!(
            EmbeddingTable::read_checkpoint(truncated),
            Err(Error::Checkpoint(_))
        ));

        let mut trailing = bytes.clone();
        trailing.push(0);
        assert!(matches!(
            EmbeddingTable::read_checkpoint(trailing.as_slice()),
            Err(Error::Checkpoint(_))
        ));
    }

    #[test]
    fn checkpoint_file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("table.bin");
        let t = init_embeddings(5, 7, 4, 11).unwrap();
        t.save_checkpoint(&path).unwrap();
        assert_eq!(EmbeddingTable::load_checkpoint(&path).unwrap(), t);
    }

    fn vec_strategy() -> impl Strategy<Value = Vec<f64>> {
        proptest::collection::vec(-5.0f64..5.0, 2..16)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn cosine_is_scale_invariant(
            v in vec_strategy(),
            a in 0.1f64..10.0,
            b in 0.1f64..10.0,
        ) {
            let mut w: Vec<f64> = v.iter().map(|x| x + 0.7).collect();
            prop_assume!(norm64(&v) > 1e-6 && norm64(&w) > 1e-6);
            let base = score_cos_tau(&v, &w, 0.5).unwrap().value();
            let scaled_v: Vec<f64> = v.iter().map(|x| a * x).collect();
            w.iter_mut().for_each(|x| *x *= b);
            let scaled = score_cos_tau(&scaled_v, &w, 0.5).unwrap().value();
            prop_assert!((base - scaled).abs() < 1e-9, "{base} vs {scaled}");
            prop_assert!(base.abs() <= 2.0 + 1e-12);
        }

        #[test]
        fn dot_is_bilinear(v in vec_strategy(), a in -4.0f64..4.0) {
            let w: Vec<f64> = v.iter().map(|x| x - 1.3).collect();
            let base = dot64(&v, &w);
            let scaled: Vec<f64> = v.iter().map(|x| a * x).collect();
            prop_assert!((dot64(&scaled, &w) - a * base).abs() < 1e-9);
        }
    }
}
