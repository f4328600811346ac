use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use stnas_core::cell::{
    connection_count, discretize, enumerate_connections, ArchParams, CellSpec, Source,
};
use stnas_core::data::{center_sample, segment_bounds, segment_sample};
use stnas_core::operators::{OperatorKind, NUM_OPS};
use stnas_core::Error;

#[test]
fn connection_count_matches_brute_force() {
    for n in 1..=8 {
        // every (dest, source) with source drawn from pp, p and earlier nodes
        let mut brute = 0;
        for dest in 0..n {
            for src in 0..n + 2 {
                if src < 2 || src - 2 < dest {
                    brute += 1;
                }
            }
        }
        let listed = enumerate_connections(n).unwrap();
        assert_eq!(listed.len(), brute, "n = {n}");
        assert_eq!(connection_count(n), brute, "n = {n}");
        assert_eq!(CellSpec::new(n, 4).unwrap().connections(), brute);
        let mut dedup = listed.clone();
        dedup.sort();
        dedup.dedup();
        assert_eq!(dedup.len(), listed.len());
        assert!(listed.iter().all(|&(d, s)| s.valid_for(d)));
    }
    assert_eq!(enumerate_connections(4).unwrap().len(), 14);
    assert!(matches!(enumerate_connections(0), Err(Error::Domain(_))));
}

fn random_alpha(rng: &mut ChaCha8Rng, rows: usize) -> ArchParams {
    let scale = [0.01, 1.0, 10.0][rng.gen_range(0..3)];
    let values = (0..rows * NUM_OPS).map(|_| rng.gen_range(-1.0..1.0) * scale).collect();
    ArchParams::from_values(rows, values).unwrap()
}

#[test]
fn discretized_genotypes_are_well_formed() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for case in 0..1000 {
        let n = rng.gen_range(1..=6);
        let spec = CellSpec::new(n, 4).unwrap();
        let alpha = random_alpha(&mut rng, spec.connections());
        let g = discretize(&spec, &alpha).unwrap();
        g.validate().unwrap();
        assert_eq!(g.n(), n, "case {case}");
        for (i, edges) in g.nodes.iter().enumerate() {
            assert_ne!(edges[0].0, edges[1].0, "case {case}: repeated source");
            for (src, op) in edges {
                assert!(src.valid_for(i), "case {case}: node {i} reads {src}");
                assert_ne!(*op, OperatorKind::Zero, "case {case}");
            }
        }
        assert_eq!(g.nodes.iter().flatten().count(), 2 * n);
        let round = stnas_core::cell::Genotype::parse(&g.to_text()).unwrap();
        assert_eq!(round, g);
    }
}

#[test]
fn discretize_ignores_constant_shifts() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for _ in 0..200 {
        let n = rng.gen_range(1..=5);
        let spec = CellSpec::new(n, 4).unwrap();
        let alpha = random_alpha(&mut rng, spec.connections());
        let base = discretize(&spec, &alpha).unwrap();
        for c in [-7.5, -0.25, 0.5, 3.0, 40.0] {
            let shifted: Vec<f64> = alpha.values().iter().map(|v| v + c).collect();
            let shifted = ArchParams::from_values(spec.connections(), shifted).unwrap();
            assert_eq!(discretize(&spec, &shifted).unwrap(), base, "shift {c}");
        }
    }
}

#[test]
fn discretize_picks_planted_edges() {
    let spec = CellSpec::new(3, 4).unwrap();
    let mut alpha = ArchParams::zeros(spec.connections());
    let plant = |a: &mut ArchParams, dest: usize, src: Source, op: OperatorKind| {
        let k = spec.connection_index(dest, src).unwrap();
        a.row_mut(k)[op.index()] = 5.0;
    };
    plant(&mut alpha, 0, Source::Prev, OperatorKind::Conv3);
    plant(&mut alpha, 0, Source::PrevPrev, OperatorKind::SkipCon);
    plant(&mut alpha, 1, Source::Node(0), OperatorKind::MPool3);
    plant(&mut alpha, 1, Source::PrevPrev, OperatorKind::DilConv3);
    plant(&mut alpha, 2, Source::Node(1), OperatorKind::SpeConv3);
    plant(&mut alpha, 2, Source::Node(0), OperatorKind::APool3);
    // a dominant Zero must not win a connection
    let k = spec.connection_index(2, Source::Prev).unwrap();
    alpha.row_mut(k)[OperatorKind::Zero.index()] = 50.0;
    let g = discretize(&spec, &alpha).unwrap();
    assert_eq!(
        g.to_text(),
        "genotype v1\nnodes 3\nnode 0 pp Skip_Con p Conv_3\nnode 1 pp DilConv_3 n0 MPool_3\nnode 2 n0 APool_3 n1 SpeConv_3\n"
    );
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(10_000))]

    #[test]
    fn segment_sample_properties(
        segments in 1usize..8,
        per_segment in 1usize..5,
        extra in 0usize..40,
        seed in any::<u64>(),
    ) {
        let len = segments * per_segment + extra;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let idx = segment_sample(len, segments, per_segment, &mut rng).unwrap();
        prop_assert_eq!(idx.len(), segments * per_segment);
        prop_assert!(idx.windows(2).all(|w| w[0] < w[1]));
        prop_assert!(idx.iter().all(|&i| i < len));
        for s in 0..segments {
            let (lo, hi) = segment_bounds(len, segments, s);
            let inside = idx.iter().filter(|&&i| lo <= i && i < hi).count();
            prop_assert_eq!(inside, per_segment);
        }
        let center = center_sample(len, segments, per_segment).unwrap();
        prop_assert_eq!(center.len(), segments * per_segment);
        prop_assert!(center.windows(2).all(|w| w[0] < w[1]));
    }
}

#[test]
fn full_sampling_is_the_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..20 {
        assert_eq!(segment_sample(8, 4, 2, &mut rng).unwrap(), (0..8).collect::<Vec<_>>());
    }
    assert_eq!(center_sample(8, 4, 2).unwrap(), (0..8).collect::<Vec<_>>());
}

#[test]
fn short_clips_are_domain_errors() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    assert!(matches!(segment_sample(7, 4, 2, &mut rng), Err(Error::Domain(_))));
    assert!(matches!(segment_sample(8, 0, 2, &mut rng), Err(Error::Domain(_))));
    assert!(matches!(center_sample(3, 2, 2), Err(Error::Domain(_))));
}

#[test]
fn segment_sample_is_uniform_within_segments() {
    // L = 100 in 4 segments of 25 frames, one frame each
    let (len, segments, draws) = (100, 4, 40_000);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut counts = vec![0usize; len];
    for _ in 0..draws {
        for i in segment_sample(len, segments, 1, &mut rng).unwrap() {
            counts[i] += 1;
        }
    }
    for s in 0..segments {
        let (lo, hi) = segment_bounds(len, segments, s);
        let k = hi - lo;
        let expected = draws as f64 / k as f64;
        let chi2: f64 = counts[lo..hi]
            .iter()
            .map(|&c| (c as f64 - expected).powi(2) / expected)
            .sum();
        // 24 degrees of freedom, 0.999 quantile
        assert!(chi2 < 51.18, "segment {s}: chi2 {chi2}");
    }
}
