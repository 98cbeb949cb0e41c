//! Byte-level round trips of feature files and checkpoints.

use lcr2s::data::{
    features_from_bytes, features_to_bytes, generate_synthetic, load_features, save_features,
    SyntheticConfig,
};
use lcr2s::mhaf::MhafConfig;
use lcr2s::training::{Checkpoint, StudentParams, TeacherParams};
use lcr2s::Error;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn feature_bytes_round_trip(n in 1usize..6, views in 1usize..4, dim in 1usize..9, seed in any::<u64>()) {
        let ds = generate_synthetic(&SyntheticConfig {
            n_identities: n,
            views_per_identity: views,
            latent_dim: 3,
            input_dim: dim,
            seed,
            ..SyntheticConfig::default()
        }).unwrap();
        let bytes = features_to_bytes(&ds);
        let back = features_from_bytes(&bytes).unwrap();
        prop_assert_eq!(features_to_bytes(&back), bytes);
        prop_assert_eq!(back.pairs(), ds.pairs());
    }

    #[test]
    fn truncated_feature_bytes_rejected(cut in 1usize..200, seed in any::<u64>()) {
        let ds = generate_synthetic(&SyntheticConfig { n_identities: 2, views_per_identity: 2, latent_dim: 2, input_dim: 4, seed, ..SyntheticConfig::default() }).unwrap();
        let bytes = features_to_bytes(&ds);
        let cut = cut.min(bytes.len());
        let err = features_from_bytes(&bytes[..bytes.len() - cut]).unwrap_err();
        prop_assert!(matches!(err, Error::Format { .. }), "{err}");
    }
}

#[test]
fn feature_file_save_load_save() {
    let dir = tempfile::tempdir().unwrap();
    let ds = generate_synthetic(&SyntheticConfig::default()).unwrap();
    let (a, b) = (dir.path().join("a.lcrf"), dir.path().join("b.lcrf"));
    save_features(&ds, &a).unwrap();
    save_features(&load_features(&a).unwrap(), &b).unwrap();
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    assert_eq!(load_features(&a).unwrap().pairs().len(), 64 * 4);
}

#[test]
fn corrupted_headers() {
    let ds = generate_synthetic(&SyntheticConfig {
        n_identities: 2,
        ..SyntheticConfig::default()
    })
    .unwrap();
    let good = features_to_bytes(&ds);
    for (at, offset) in [(0, 0), (4, 4)] {
        let mut bad = good.clone();
        bad[at] ^= 0xff;
        match features_from_bytes(&bad) {
            Err(Error::Format { offset: o, .. }) => assert_eq!(o, offset),
            other => panic!("byte {at}: {other:?}"),
        }
    }
    assert!(matches!(
        load_features("/nonexistent/x.lcrf"),
        Err(Error::Io { .. })
    ));
}

#[test]
fn checkpoints_save_load_save() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let cfg = MhafConfig {
        heads: 4,
        shared: false,
        ..MhafConfig::default()
    };
    let t = TeacherParams::init(&mut rng, 6, 4, 8, &cfg).unwrap();
    let s = StudentParams::init(&mut rng, 6, 4, 8).unwrap();
    for ck in [
        Checkpoint::from_teacher(&t, "abc", 3),
        Checkpoint::from_student(&s, "def", 4),
    ] {
        let (a, b) = (dir.path().join("a.ckpt"), dir.path().join("b.ckpt"));
        ck.save(&a).unwrap();
        Checkpoint::load(&a).unwrap().save(&b).unwrap();
        assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    }
    assert_eq!(Checkpoint::from_teacher(&t, "abc", 3).teacher().unwrap(), t);

    let mut bytes = Checkpoint::from_student(&s, "def", 4).to_bytes();
    bytes[0] = b'X';
    assert!(matches!(
        Checkpoint::from_bytes(&bytes),
        Err(Error::Format { offset: 0, .. })
    ));
}
