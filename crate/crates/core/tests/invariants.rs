//! Property tests over random instances.

use lcr2s::data::{build_support_set, generate_synthetic, Modality, SupportMode, SyntheticConfig};
use lcr2s::eval::{metrics, rank_k};
use lcr2s::losses::{
    cmpm_loss, kd_feature_loss, kd_relation_loss, CmpmConfig, StudentFeatures, TeacherFeatures,
};
use lcr2s::mhaf::{
    attention_weights, fuse_set, init_mhaf_seeded, mhaf_fuse, AttentionScale, FusionStrategy,
};
use lcr2s::{Tape, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(-2.0f64..2.0, rows * cols)
        .prop_map(move |d| Tensor::matrix(rows, cols, d).unwrap())
}

/// `(heads, d)` with `heads | d`.
fn head_layout() -> impl Strategy<Value = (usize, usize)> {
    prop::sample::select(vec![(1, 2), (1, 4), (2, 4), (2, 8), (4, 8), (4, 16)])
}

fn mhaf_case() -> impl Strategy<Value = (usize, Tensor, Vec<usize>, u64)> {
    (head_layout(), 1usize..6, any::<u64>()).prop_flat_map(|((heads, d), rows, seed)| {
        (
            Just(heads),
            matrix(rows, d),
            Just((0..rows).collect::<Vec<_>>()).prop_shuffle(),
            Just(seed),
        )
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn mhaf_row_permutation_invariant((heads, e, perm, seed) in mhaf_case()) {
        let p = init_mhaf_seeded(seed, e.cols(), heads).unwrap();
        let a = mhaf_fuse(&p, &e, AttentionScale::SqrtD).unwrap();
        let b = mhaf_fuse(&p, &e.select_rows(&perm).unwrap(), AttentionScale::SqrtD).unwrap();
        prop_assert!(a.max_abs_diff(&b) < 1e-10, "{:?} vs {:?}", a.data(), b.data());
        // The mean strategy shares the property.
        let m1 = fuse_set(&p, &e, FusionStrategy::Mean, AttentionScale::SqrtD).unwrap();
        let m2 = fuse_set(&p, &e.select_rows(&perm).unwrap(), FusionStrategy::Mean, AttentionScale::SqrtD).unwrap();
        prop_assert!(m1.max_abs_diff(&m2) < 1e-10);
    }

    #[test]
    fn attention_rows_stochastic((heads, e, _perm, seed) in mhaf_case()) {
        let p = init_mhaf_seeded(seed, e.cols(), heads).unwrap();
        for scale in [AttentionScale::SqrtD, AttentionScale::SqrtHeadDim] {
            let weights = attention_weights(&p, &e, scale).unwrap();
            prop_assert_eq!(weights.len(), heads);
            for a in &weights {
                for r in 0..a.rows() {
                    let row = a.row(r);
                    prop_assert!(row.iter().all(|&w| w >= 0.0));
                    prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                }
            }
        }
    }
}

fn cmpm_case() -> impl Strategy<Value = (Tensor, Tensor, Vec<u32>, Vec<usize>)> {
    (1usize..8, 1usize..6).prop_flat_map(|(n, d)| {
        (
            matrix(n, d),
            matrix(n, d),
            prop::collection::vec(0u32..4, n),
            Just((0..n).collect::<Vec<_>>()).prop_shuffle(),
        )
    })
}

fn cmpm(v: &Tensor, t: &Tensor, y: &[u32], cfg: &CmpmConfig) -> f64 {
    let tape = Tape::new();
    cmpm_loss(tape.constant(v.clone()), tape.constant(t.clone()), y, cfg)
        .unwrap()
        .item()
        .unwrap()
}

proptest! {
    #[test]
    fn cmpm_joint_permutation_invariant((v, t, y, perm) in cmpm_case(), both in any::<bool>()) {
        let cfg = CmpmConfig { normalize_both: both, ..CmpmConfig::default() };
        let a = cmpm(&v, &t, &y, &cfg);
        let yp: Vec<u32> = perm.iter().map(|&i| y[i]).collect();
        let b = cmpm(&v.select_rows(&perm).unwrap(), &t.select_rows(&perm).unwrap(), &yp, &cfg);
        prop_assert!((a - b).abs() < 1e-9 * a.abs().max(1.0), "{} vs {}", a, b);
        // Smoothing q by ε allows a dip of at most -ln(1+Nε) per direction.
        prop_assert!(a >= -2.0 * y.len() as f64 * cfg.epsilon);
    }

    #[test]
    fn kd_losses_zero_at_equality(vh in matrix(4, 3), th in matrix(4, 3), vl in matrix(4, 2), tl in matrix(4, 2)) {
        let tape = Tape::new();
        let c = |x: &Tensor| tape.constant(x.clone());
        let s = StudentFeatures { vl: c(&vl), vh: c(&vh), tl: c(&tl), th: c(&th) };
        let t = TeacherFeatures { vl: c(&vl), vh: c(&vh), vr: c(&vh), tl: c(&tl), th: c(&th), tr: c(&th) };
        prop_assert_eq!(kd_feature_loss(&s, &t).unwrap().item().unwrap(), 0.0);
        prop_assert_eq!(kd_relation_loss(&s, &t).unwrap().item().unwrap(), 0.0);
    }
}

fn retrieval_case() -> impl Strategy<Value = (Tensor, Vec<u32>, Vec<u32>)> {
    (1usize..6, 1usize..10).prop_flat_map(|(q, extra)| {
        let g = q + extra;
        (
            matrix(q, g),
            prop::collection::vec(0u32..3, q),
            prop::collection::vec(0u32..3, extra),
        )
            .prop_map(move |(sim, qids, rest)| {
                // Every query identity appears in the gallery.
                let mut gids = qids.clone();
                gids.extend(rest);
                (sim, qids, gids)
            })
    })
}

proptest! {
    #[test]
    fn rank_k_monotone_in_k((sim, qids, gids) in retrieval_case()) {
        let mut prev = 0.0;
        for k in 1..=gids.len() {
            let r = rank_k(&sim, &qids, &gids, k).unwrap();
            prop_assert!((0.0..=1.0).contains(&r));
            prop_assert!(r >= prev);
            prev = r;
        }
        prop_assert_eq!(prev, 1.0);
    }

    #[test]
    fn metrics_invariant_to_relabeling((sim, qids, gids) in retrieval_case(), shift in 1u32..1000) {
        let rename = |ids: &[u32]| -> Vec<u32> { ids.iter().map(|&i| (2 - i) * 7 + shift).collect() };
        let a = metrics(&sim, &qids, &gids).unwrap();
        let b = metrics(&sim, &rename(&qids), &rename(&gids)).unwrap();
        prop_assert_eq!(a, b);
        prop_assert!(a.map > 0.0 && a.map <= 1.0);
    }

    #[test]
    fn metrics_invariant_to_gallery_order((sim, qids, gids) in retrieval_case(), seed in any::<u64>()) {
        // Continuous random scores are tie-free.
        let g = gids.len();
        let perm: Vec<usize> = {
            use rand::seq::SliceRandom;
            let mut p: Vec<usize> = (0..g).collect();
            p.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            p
        };
        let permuted: Vec<f64> = (0..sim.rows())
            .flat_map(|r| perm.iter().map(move |&c| (r, c)))
            .map(|(r, c)| sim.get(r, c))
            .collect();
        let sim_p = Tensor::matrix(sim.rows(), g, permuted).unwrap();
        let gids_p: Vec<u32> = perm.iter().map(|&c| gids[c]).collect();
        let a = metrics(&sim, &qids, &gids).unwrap();
        let b = metrics(&sim_p, &qids, &gids_p).unwrap();
        prop_assert!((a.rank1 - b.rank1).abs() < 1e-15);
        prop_assert!((a.rank5 - b.rank5).abs() < 1e-15);
        prop_assert!((a.map - b.map).abs() < 1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn support_sets_stay_within_identity(
        views in 2usize..5,
        k in 0usize..5,
        seed in any::<u64>(),
        text in any::<bool>(),
    ) {
        let ds = generate_synthetic(&SyntheticConfig {
            n_identities: 3,
            views_per_identity: views,
            latent_dim: 2,
            input_dim: 3,
            seed,
            ..SyntheticConfig::default()
        }).unwrap();
        let modality = if text { Modality::Text } else { Modality::Image };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for anchor in 0..ds.pairs().len() {
            let s = build_support_set(&ds, anchor, modality, k, SupportMode::ExcludeSelf, &mut rng).unwrap();
            prop_assert_eq!(s.members.len(), k);
            let id = ds.instances()[s.anchor_instance].identity;
            for &m in &s.members {
                prop_assert!(m != s.anchor_instance);
                prop_assert_eq!(ds.instances()[m].identity, id);
                prop_assert_eq!(ds.instances()[m].modality, modality);
            }
            // Distinct members whenever the pool is large enough.
            if k < views {
                let mut u = s.members.clone();
                u.sort_unstable();
                u.dedup();
                prop_assert_eq!(u.len(), k);
            }
            let dup = build_support_set(&ds, anchor, modality, k, SupportMode::DuplicateSelf, &mut rng).unwrap();
            prop_assert!(dup.members.iter().all(|&m| m == s.anchor_instance));
        }
    }
}
