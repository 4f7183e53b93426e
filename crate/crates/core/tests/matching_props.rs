use std::collections::HashSet;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rcloc::geom::Vec2;
use rcloc::imaging::GrayImage;
use rcloc::matching::{
    detect_and_describe, filter_fundamental, match_descriptors, FilterConfig, MatchPair, MatchSet, DESCRIPTOR_LEN,
};

/// Blocky random image so corners exist at every seed.
fn blocks(seed: u64, w: usize, h: usize) -> GrayImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cells: Vec<f32> = (0..(w / 8 + 1) * (h / 8 + 1)).map(|_| rng.gen()).collect();
    GrayImage::from_fn(w, h, |x, y| cells[(y / 8) * (w / 8 + 1) + x / 8])
}

fn random_pairs(seed: u64, n: usize) -> MatchSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pairs = (0..n)
        .map(|_| MatchPair {
            query: Vec2::new(rng.gen_range(0.0..320.0), rng.gen_range(0.0..240.0)),
            render: Vec2::new(rng.gen_range(0.0..320.0), rng.gen_range(0.0..240.0)),
            confidence: rng.gen(),
        })
        .collect();
    MatchSet::new("q", 0, pairs)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn descriptors_are_unit_vectors(seed in any::<u64>(), max in 1usize..300) {
        let kps = detect_and_describe(&blocks(seed, 96, 80), max).unwrap();
        prop_assert!(kps.len() <= max);
        for kp in &kps {
            prop_assert_eq!(kp.descriptor.len(), DESCRIPTOR_LEN);
            let n: f32 = kp.descriptor.iter().map(|v| v * v).sum::<f32>().sqrt();
            prop_assert!((n - 1.0).abs() < 1e-4, "norm {}", n);
            prop_assert!(kp.position.x >= 0.0 && kp.position.x < 96.0);
            prop_assert!(kp.position.y >= 0.0 && kp.position.y < 80.0);
        }
    }

    #[test]
    fn mutual_matches_are_one_to_one(a in any::<u64>(), b in any::<u64>(), ratio in 0.5..1.0f64) {
        let ka = detect_and_describe(&blocks(a, 96, 80), 200).unwrap();
        let kb = detect_and_describe(&blocks(b, 96, 80), 200).unwrap();
        let m = match_descriptors(&ka, &kb, ratio);
        let q: HashSet<(u64, u64)> = m.pairs.iter().map(|p| (p.query.x.to_bits(), p.query.y.to_bits())).collect();
        let r: HashSet<(u64, u64)> = m.pairs.iter().map(|p| (p.render.x.to_bits(), p.render.y.to_bits())).collect();
        prop_assert_eq!(q.len(), m.len());
        prop_assert_eq!(r.len(), m.len());
        prop_assert!(m.pairs.iter().all(|p| (0.0..=1.0).contains(&p.confidence)));
    }

    #[test]
    fn filtering_returns_a_subset(seed in any::<u64>(), n in 0usize..80) {
        let input = random_pairs(seed, n);
        let out = filter_fundamental(&input, &FilterConfig::default(), seed);
        prop_assert!(out.matches.len() <= input.len());
        prop_assert_eq!(out.kept.len(), out.matches.len());
        prop_assert!(out.kept.windows(2).all(|w| w[0] < w[1]));
        for (&i, p) in out.kept.iter().zip(&out.matches.pairs) {
            prop_assert_eq!(&input.pairs[i], p);
        }
        if out.degenerate {
            prop_assert_eq!(&out.matches, &input);
        }
    }
}
