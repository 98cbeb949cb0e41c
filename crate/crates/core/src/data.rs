//! Multi-view identity datasets: synthetic generation, the `LCRF` feature
//! file, identity-balanced (PK) batch sampling and support-set construction.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const FEATURE_MAGIC: &[u8; 4] = b"LCRF";
pub const FEATURE_VERSION: u32 = 1;
pub const HEADER_LEN: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Image,
    Text,
}

impl Modality {
    fn code(self) -> u8 {
        match self {
            Modality::Image => 0,
            Modality::Text => 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Instance {
    pub identity: u32,
    pub view: u32,
    pub modality: Modality,
    pub feature: Vec<f64>,
}

/// An image instance and a text instance sharing identity and view.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Pair {
    pub image: usize,
    pub text: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    instances: Vec<Instance>,
    input_dim: usize,
    pairs: Vec<Pair>,
    pairs_by_identity: BTreeMap<u32, Vec<usize>>,
    pool: BTreeMap<(u32, Modality), Vec<usize>>,
}

impl Dataset {
    /// Builds a dataset and derives the pairing: at each (identity, view) the
    /// n-th image is paired with the n-th text in instance order.
    pub fn new(instances: Vec<Instance>, input_dim: usize) -> Result<Self> {
        if input_dim == 0 {
            return Err(Error::Config("input_dim must be positive".into()));
        }
        let mut slots: BTreeMap<(u32, u32), (Vec<usize>, Vec<usize>)> = BTreeMap::new();
        let mut pool: BTreeMap<(u32, Modality), Vec<usize>> = BTreeMap::new();
        for (i, inst) in instances.iter().enumerate() {
            if inst.feature.len() != input_dim {
                return Err(Error::dim(
                    "dataset",
                    format!(
                        "instance {i} has {} features, expected {input_dim}",
                        inst.feature.len()
                    ),
                ));
            }
            let slot = slots.entry((inst.identity, inst.view)).or_default();
            match inst.modality {
                Modality::Image => slot.0.push(i),
                Modality::Text => slot.1.push(i),
            }
            pool.entry((inst.identity, inst.modality))
                .or_default()
                .push(i);
        }
        let mut pairs = Vec::new();
        let mut pairs_by_identity: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
        // Pair order follows the image instance order.
        let mut ordered: Vec<Pair> = slots
            .values()
            .flat_map(|(imgs, txts)| {
                imgs.iter()
                    .zip(txts)
                    .map(|(&image, &text)| Pair { image, text })
            })
            .collect();
        ordered.sort_by_key(|p| p.image);
        for p in ordered {
            pairs_by_identity
                .entry(instances[p.image].identity)
                .or_default()
                .push(pairs.len());
            pairs.push(p);
        }
        Ok(Dataset {
            instances,
            input_dim,
            pairs,
            pairs_by_identity,
            pool,
        })
    }

    pub fn instances(&self) -> &[Instance] {
        &self.instances
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn pairs(&self) -> &[Pair] {
        &self.pairs
    }

    pub fn pair(&self, idx: usize) -> Pair {
        self.pairs[idx]
    }

    /// Identities that own at least one pair, ascending.
    pub fn identities(&self) -> Vec<u32> {
        self.pairs_by_identity.keys().copied().collect()
    }

    pub fn pairs_of(&self, identity: u32) -> &[usize] {
        self.pairs_by_identity
            .get(&identity)
            .map_or(&[], Vec::as_slice)
    }

    /// Instance index of one side of a pair.
    pub fn pair_instance(&self, pair: usize, modality: Modality) -> usize {
        let p = self.pairs[pair];
        match modality {
            Modality::Image => p.image,
            Modality::Text => p.text,
        }
    }

    /// Stacks instance features into an `n×input_dim` matrix.
    pub fn features(&self, idx: &[usize]) -> Tensor {
        let mut data = Vec::with_capacity(idx.len() * self.input_dim);
        for &i in idx {
            data.extend_from_slice(&self.instances[i].feature);
        }
        Tensor::matrix(idx.len(), self.input_dim, data).expect("feature lengths validated")
    }

    pub fn labels(&self, idx: &[usize]) -> Vec<u32> {
        idx.iter().map(|&i| self.instances[i].identity).collect()
    }

    /// All instances of one modality, in instance order.
    pub fn modality_indices(&self, modality: Modality) -> Vec<usize> {
        (0..self.instances.len())
            .filter(|&i| self.instances[i].modality == modality)
            .collect()
    }

    fn same_identity_pool(&self, identity: u32, modality: Modality) -> &[usize] {
        self.pool
            .get(&(identity, modality))
            .map_or(&[], Vec::as_slice)
    }
}

// ---------------------------------------------------------------------------
// Synthetic generation

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub n_identities: usize,
    pub views_per_identity: usize,
    pub latent_dim: usize,
    pub input_dim: usize,
    pub view_offset_std: f64,
    pub noise_std: f64,
    /// Set by the caller rather than read from config files.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            n_identities: 64,
            views_per_identity: 4,
            latent_dim: 16,
            input_dim: 32,
            view_offset_std: 0.5,
            noise_std: 0.1,
            seed: 0,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("n_identities", self.n_identities),
            ("views_per_identity", self.views_per_identity),
            ("latent_dim", self.latent_dim),
            ("input_dim", self.input_dim),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        for (name, v) in [
            ("view_offset_std", self.view_offset_std),
            ("noise_std", self.noise_std),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!(
                    "{name} must be a finite value >= 0, got {v}"
                )));
            }
        }
        Ok(())
    }
}

fn gaussian_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Vec<f64> {
    (0..rows * cols)
        .map(|_| {
            let v: f64 = StandardNormal.sample(rng);
            std * v
        })
        .collect()
}

fn project(m: &[f64], cols: usize, x: &[f64]) -> Vec<f64> {
    m.chunks(cols)
        .map(|row| row.iter().zip(x).map(|(a, b)| a * b).sum())
        .collect()
}

/// Generates `n_identities` identities followed by `holdout` further
/// identities drawn from the same projections. Returns (train, holdout).
///
/// Each identity has a latent vector, each view adds an offset shared by the
/// view's image and text, and each modality has its own fixed random linear
/// map into input space plus isotropic noise. Features are stored at `f32`
/// precision so that files reproduce in-memory datasets exactly.
pub fn generate_with_holdout(cfg: &SyntheticConfig, holdout: usize) -> Result<(Dataset, Dataset)> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let proj_std = 1.0 / (cfg.latent_dim as f64).sqrt();
    let img_proj = gaussian_matrix(&mut rng, cfg.input_dim, cfg.latent_dim, proj_std);
    let txt_proj = gaussian_matrix(&mut rng, cfg.input_dim, cfg.latent_dim, proj_std);
    let noise = Normal::new(0.0, cfg.noise_std).map_err(|e| Error::Config(e.to_string()))?;

    let mut sets = [Vec::new(), Vec::new()];
    for id in 0..cfg.n_identities + holdout {
        let latent = gaussian_matrix(&mut rng, 1, cfg.latent_dim, 1.0);
        for view in 0..cfg.views_per_identity {
            let offset = gaussian_matrix(&mut rng, 1, cfg.latent_dim, cfg.view_offset_std);
            let z: Vec<f64> = latent.iter().zip(&offset).map(|(a, b)| a + b).collect();
            for (modality, proj) in [(Modality::Image, &img_proj), (Modality::Text, &txt_proj)] {
                let feature = project(proj, cfg.latent_dim, &z)
                    .into_iter()
                    .map(|v| (v + noise.sample(&mut rng)) as f32 as f64)
                    .collect();
                sets[usize::from(id >= cfg.n_identities)].push(Instance {
                    identity: id as u32,
                    view: view as u32,
                    modality,
                    feature,
                });
            }
        }
    }
    let [train, test] = sets;
    Ok((
        Dataset::new(train, cfg.input_dim)?,
        Dataset::new(test, cfg.input_dim)?,
    ))
}

pub fn generate_synthetic(cfg: &SyntheticConfig) -> Result<Dataset> {
    Ok(generate_with_holdout(cfg, 0)?.0)
}

// ---------------------------------------------------------------------------
// Feature files

pub fn features_to_bytes(ds: &Dataset) -> Vec<u8> {
    let n = ds.instances.len();
    let mut out = Vec::with_capacity(HEADER_LEN + n * (12 + 4 * ds.input_dim));
    out.extend_from_slice(FEATURE_MAGIC);
    out.extend_from_slice(&FEATURE_VERSION.to_le_bytes());
    out.extend_from_slice(&(n as u32).to_le_bytes());
    out.extend_from_slice(&(ds.input_dim as u32).to_le_bytes());
    for inst in &ds.instances {
        out.extend_from_slice(&inst.identity.to_le_bytes());
        out.extend_from_slice(&inst.view.to_le_bytes());
        out.push(inst.modality.code());
        out.extend_from_slice(&[0, 0, 0]);
        for &v in &inst.feature {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

fn read_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(bytes[at..at + 4].try_into().expect("4 bytes"))
}

pub fn features_from_bytes(bytes: &[u8]) -> Result<Dataset> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::format(
            bytes.len() as u64,
            format!("truncated header: {} of {HEADER_LEN} bytes", bytes.len()),
        ));
    }
    if &bytes[0..4] != FEATURE_MAGIC {
        return Err(Error::format(0, format!("bad magic {:?}", &bytes[0..4])));
    }
    let version = read_u32(bytes, 4);
    if version != FEATURE_VERSION {
        return Err(Error::format(4, format!("unsupported version {version}")));
    }
    let n = read_u32(bytes, 8) as usize;
    let dim = read_u32(bytes, 12) as usize;
    if dim == 0 {
        return Err(Error::format(12, "input_dim is zero"));
    }
    let record = 12 + 4 * dim;
    let expected = HEADER_LEN + n * record;
    if bytes.len() < expected {
        let at = HEADER_LEN + ((bytes.len() - HEADER_LEN) / record) * record;
        return Err(Error::format(
            at as u64,
            format!(
                "truncated payload: expected {expected} bytes, found {}",
                bytes.len()
            ),
        ));
    }
    if bytes.len() > expected {
        return Err(Error::format(
            expected as u64,
            format!(
                "{} trailing bytes after {n} instances",
                bytes.len() - expected
            ),
        ));
    }
    let mut instances = Vec::with_capacity(n);
    for i in 0..n {
        let at = HEADER_LEN + i * record;
        let modality = match bytes[at + 8] {
            0 => Modality::Image,
            1 => Modality::Text,
            m => {
                return Err(Error::format(
                    (at + 8) as u64,
                    format!("invalid modality byte {m}"),
                ))
            }
        };
        if bytes[at + 9..at + 12] != [0, 0, 0] {
            return Err(Error::format((at + 9) as u64, "nonzero padding"));
        }
        let feature = bytes[at + 12..at + record]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect();
        instances.push(Instance {
            identity: read_u32(bytes, at),
            view: read_u32(bytes, at + 4),
            modality,
            feature,
        });
    }
    Dataset::new(instances, dim)
}

pub fn save_features(ds: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, features_to_bytes(ds)).map_err(|e| Error::io(path, e))
}

pub fn load_features(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    features_from_bytes(&bytes)
}

// ---------------------------------------------------------------------------
// Sampling

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    /// Identities per batch.
    pub p: usize,
    /// Pairs per identity.
    pub k: usize,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig { p: 16, k: 4 }
    }
}

impl SamplerConfig {
    pub fn batch_size(&self) -> usize {
        self.p * self.k
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub image_features: Tensor,
    pub text_features: Tensor,
    pub labels: Vec<u32>,
    pub pair_indices: Vec<usize>,
}

impl Batch {
    pub fn from_pairs(ds: &Dataset, pair_indices: Vec<usize>) -> Batch {
        let imgs: Vec<usize> = pair_indices.iter().map(|&p| ds.pairs[p].image).collect();
        let txts: Vec<usize> = pair_indices.iter().map(|&p| ds.pairs[p].text).collect();
        Batch {
            image_features: ds.features(&imgs),
            text_features: ds.features(&txts),
            labels: ds.labels(&imgs),
            pair_indices,
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Draws `p` distinct identities and `k` pairs of each. Pairs are drawn
/// without replacement when an identity has at least `k`, otherwise with
/// replacement.
pub fn sample_pk_batch<R: Rng>(ds: &Dataset, cfg: &SamplerConfig, rng: &mut R) -> Result<Batch> {
    if cfg.p == 0 || cfg.k == 0 {
        return Err(Error::Config("P and K must be at least 1".into()));
    }
    let ids = ds.identities();
    if ids.len() < cfg.p {
        return Err(Error::Sampling(format!(
            "need {} identities, dataset has {}",
            cfg.p,
            ids.len()
        )));
    }
    let mut chosen: Vec<u32> = index::sample(rng, ids.len(), cfg.p)
        .into_iter()
        .map(|i| ids[i])
        .collect();
    chosen.sort_unstable();
    let mut pair_indices = Vec::with_capacity(cfg.batch_size());
    for id in chosen {
        let own = ds.pairs_of(id);
        if own.len() >= cfg.k {
            pair_indices.extend(
                index::sample(rng, own.len(), cfg.k)
                    .into_iter()
                    .map(|i| own[i]),
            );
        } else {
            pair_indices.extend((0..cfg.k).map(|_| own[rng.random_range(0..own.len())]));
        }
    }
    Ok(Batch::from_pairs(ds, pair_indices))
}

// ---------------------------------------------------------------------------
// Support sets

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SupportMode {
    /// Same-identity instances other than the anchor.
    #[default]
    ExcludeSelf,
    /// Copies of the anchor itself (no multi-view information).
    DuplicateSelf,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SupportSet {
    /// Pair index of the anchor.
    pub anchor: usize,
    /// Instance index of the anchor on the requested modality.
    pub anchor_instance: usize,
    /// Instance indices of the members.
    pub members: Vec<usize>,
}

pub fn build_support_set<R: Rng>(
    ds: &Dataset,
    anchor: usize,
    modality: Modality,
    k: usize,
    mode: SupportMode,
    rng: &mut R,
) -> Result<SupportSet> {
    if anchor >= ds.pairs.len() {
        return Err(Error::Support(format!(
            "anchor pair {anchor} out of {}",
            ds.pairs.len()
        )));
    }
    let anchor_instance = ds.pair_instance(anchor, modality);
    let members = match mode {
        _ if k == 0 => Vec::new(),
        SupportMode::DuplicateSelf => vec![anchor_instance; k],
        SupportMode::ExcludeSelf => {
            let identity = ds.instances[anchor_instance].identity;
            let candidates: Vec<usize> = ds
                .same_identity_pool(identity, modality)
                .iter()
                .copied()
                .filter(|&i| i != anchor_instance)
                .collect();
            if candidates.is_empty() {
                return Err(Error::Support(format!(
                    "identity {identity} has no other {modality:?} instance for anchor pair {anchor}"
                )));
            }
            if candidates.len() >= k {
                index::sample(rng, candidates.len(), k)
                    .into_iter()
                    .map(|i| candidates[i])
                    .collect()
            } else {
                (0..k)
                    .map(|_| candidates[rng.random_range(0..candidates.len())])
                    .collect()
            }
        }
    };
    Ok(SupportSet {
        anchor,
        anchor_instance,
        members,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(n: usize, views: usize) -> SyntheticConfig {
        SyntheticConfig {
            n_identities: n,
            views_per_identity: views,
            latent_dim: 4,
            input_dim: 6,
            ..SyntheticConfig::default()
        }
    }

    #[test]
    fn synthetic_counts() {
        let ds = generate_synthetic(&small(4, 3)).unwrap();
        assert_eq!(ds.pairs().len(), 12);
        assert_eq!(ds.instances().len(), 24);
        for p in ds.pairs() {
            let (a, b) = (&ds.instances()[p.image], &ds.instances()[p.text]);
            assert_eq!((a.identity, a.view), (b.identity, b.view));
            assert_eq!((a.modality, b.modality), (Modality::Image, Modality::Text));
        }
    }

    #[test]
    fn synthetic_is_deterministic() {
        let a = generate_synthetic(&small(5, 2)).unwrap();
        let b = generate_synthetic(&small(5, 2)).unwrap();
        assert_eq!(features_to_bytes(&a), features_to_bytes(&b));
        assert_eq!(a, b);
    }

    #[test]
    fn degenerate_config_collapses_views() {
        let cfg = SyntheticConfig {
            noise_std: 0.0,
            view_offset_std: 0.0,
            ..small(3, 4)
        };
        let ds = generate_synthetic(&cfg).unwrap();
        for id in ds.identities() {
            let imgs: Vec<&Vec<f64>> = ds
                .pairs_of(id)
                .iter()
                .map(|&p| &ds.instances()[ds.pair(p).image].feature)
                .collect();
            assert!(imgs.windows(2).all(|w| w[0] == w[1]));
        }
    }

    #[test]
    fn holdout_extends_train_stream() {
        let cfg = small(4, 2);
        let (train, test) = generate_with_holdout(&cfg, 3).unwrap();
        assert_eq!(train, generate_synthetic(&cfg).unwrap());
        assert_eq!(test.identities(), vec![4, 5, 6]);
    }

    #[test]
    fn invalid_config() {
        assert!(generate_synthetic(&small(0, 2)).is_err());
        let cfg = SyntheticConfig {
            noise_std: -1.0,
            ..small(2, 2)
        };
        assert!(matches!(generate_synthetic(&cfg), Err(Error::Config(_))));
    }

    #[test]
    fn empty_file_is_header_only() {
        let ds = Dataset::new(Vec::new(), 8).unwrap();
        let bytes = features_to_bytes(&ds);
        assert_eq!(bytes.len(), HEADER_LEN);
        let back = features_from_bytes(&bytes).unwrap();
        assert!(back.instances().is_empty());
        assert_eq!(back.input_dim(), 8);
    }

    #[test]
    fn bad_files() {
        let ds = generate_synthetic(&small(2, 2)).unwrap();
        let good = features_to_bytes(&ds);

        let mut bad = good.clone();
        bad[0] = b'X';
        assert!(matches!(
            features_from_bytes(&bad),
            Err(Error::Format { offset: 0, .. })
        ));

        let mut bad = good.clone();
        bad[4] = 2;
        assert!(matches!(
            features_from_bytes(&bad),
            Err(Error::Format { offset: 4, .. })
        ));

        let bad = &good[..good.len() - 3];
        match features_from_bytes(bad) {
            Err(Error::Format { offset, detail }) => {
                assert!(offset >= HEADER_LEN as u64);
                assert!(detail.contains("expected"), "{detail}");
            }
            other => panic!("{other:?}"),
        }

        let mut bad = good.clone();
        bad[HEADER_LEN + 8] = 7;
        assert!(matches!(
            features_from_bytes(&bad),
            Err(Error::Format { offset, .. }) if offset == HEADER_LEN as u64 + 8
        ));
    }

    #[test]
    fn pk_batch_counts() {
        let ds = generate_synthetic(&small(4, 3)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let b = sample_pk_batch(&ds, &SamplerConfig { p: 2, k: 2 }, &mut rng).unwrap();
        assert_eq!(b.len(), 4);
        let mut labels = b.labels.clone();
        labels.dedup();
        assert_eq!(labels.len(), 2);
        assert_eq!(b.image_features.shape(), &[4, 6]);

        let b = sample_pk_batch(&ds, &SamplerConfig { p: 4, k: 1 }, &mut rng).unwrap();
        assert_eq!(b.labels, vec![0, 1, 2, 3]);

        let err = sample_pk_batch(&ds, &SamplerConfig { p: 5, k: 1 }, &mut rng).unwrap_err();
        assert!(matches!(err, Error::Sampling(_)));
    }

    #[test]
    fn pk_batch_replacement_rule() {
        let ds = generate_synthetic(&small(2, 1)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let b = sample_pk_batch(&ds, &SamplerConfig { p: 1, k: 3 }, &mut rng).unwrap();
        assert_eq!(b.pair_indices.len(), 3);
        assert!(b.pair_indices.windows(2).all(|w| w[0] == w[1]));
    }

    #[test]
    fn support_examples() {
        let ds = generate_synthetic(&small(2, 3)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let anchor = 0;
        let a_txt = ds.pair_instance(anchor, Modality::Text);
        for _ in 0..20 {
            let s = build_support_set(
                &ds,
                anchor,
                Modality::Text,
                1,
                SupportMode::ExcludeSelf,
                &mut rng,
            )
            .unwrap();
            assert_eq!(s.members.len(), 1);
            assert_ne!(s.members[0], a_txt);
            assert_eq!(ds.instances()[s.members[0]].identity, 0);
            assert_eq!(ds.instances()[s.members[0]].modality, Modality::Text);
        }
        let s = build_support_set(
            &ds,
            anchor,
            Modality::Text,
            0,
            SupportMode::ExcludeSelf,
            &mut rng,
        )
        .unwrap();
        assert!(s.members.is_empty());
        let s = build_support_set(
            &ds,
            anchor,
            Modality::Image,
            2,
            SupportMode::DuplicateSelf,
            &mut rng,
        )
        .unwrap();
        let a_img = ds.pair_instance(anchor, Modality::Image);
        assert_eq!(s.members, vec![a_img, a_img]);
        // Pool of 2 others, K=5: with replacement.
        let s = build_support_set(
            &ds,
            anchor,
            Modality::Image,
            5,
            SupportMode::ExcludeSelf,
            &mut rng,
        )
        .unwrap();
        assert_eq!(s.members.len(), 5);
        assert!(!s.members.contains(&a_img));
    }

    #[test]
    fn support_needs_other_views() {
        let ds = generate_synthetic(&small(2, 1)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let err = build_support_set(
            &ds,
            0,
            Modality::Text,
            1,
            SupportMode::ExcludeSelf,
            &mut rng,
        )
        .unwrap_err();
        assert!(matches!(err, Error::Support(_)));
        assert!(build_support_set(
            &ds,
            0,
            Modality::Text,
            1,
            SupportMode::DuplicateSelf,
            &mut rng
        )
        .is_ok());
    }
}
