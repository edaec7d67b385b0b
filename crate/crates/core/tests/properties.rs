use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use pvse_core::embedding::{EmbeddingVector, FrequencyScope, ModelParams, TagVocabulary};
use pvse_core::partmap::{compute_grid_part_fractions, PartScheme, SegmentationMap};
use pvse_core::query::{reorder, retrieve_part_masked, EmbeddingIndex, PartMask, RetrieveOptions};

fn random_setup(seed: u64, n: usize) -> (ModelParams, EmbeddingIndex) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (l, k, d, h) = (3, 2, 4, 5);
    let scheme = PartScheme::numbered(l).unwrap();
    let vocab = TagVocabulary::new((0..h).map(|t| format!("t{t}")).collect(), vec![3; h]).unwrap();
    let image_proj = (0..l).map(|_| (0..d * k).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
    let tag_matrix = (0..h * l * k).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let params =
        ModelParams::from_parts(scheme, vocab, k, d, (2, 2), image_proj, tag_matrix, FrequencyScope::Dataset, 0)
            .unwrap();
    let ids = (0..n).map(|i| format!("id{i:02}")).collect();
    let embs = (0..n)
        .map(|_| EmbeddingVector::new((0..l * k).map(|_| rng.gen_range(-1.0..1.0)).collect(), k).unwrap())
        .collect();
    (params, EmbeddingIndex::from_embeddings(ids, embs, vec![]).unwrap())
}

proptest! {
    #[test]
    fn fractions_recover_part_pixel_counts(
        h in 2usize..30, w in 2usize..30, rows in 1usize..4, cols in 1usize..4, seed in any::<u64>(),
    ) {
        prop_assume!(rows <= h && cols <= w);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scheme = PartScheme::numbered(3).unwrap();
        let labels: Vec<u8> = (0..h * w).map(|_| rng.gen_range(0..4)).collect();
        let seg = SegmentationMap::new(h, w, labels.clone()).unwrap();
        let fr = compute_grid_part_fractions(&seg, &scheme, rows, cols).unwrap();
        for l in 0..3 {
            let mut recovered = 0.0;
            for i in 0..rows {
                for j in 0..cols {
                    recovered += fr.fraction(i, j, l) * fr.grid_pixel_total(i, j) as f64;
                }
            }
            let direct = labels.iter().filter(|&&x| x as usize == l + 1).count() as f64;
            prop_assert!((recovered - direct).abs() < 1e-9);
        }
    }

    #[test]
    fn identical_candidates_score_equal(seed in any::<u64>(), part in 0usize..3) {
        let (params, _) = random_setup(seed, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 1);
        let shared: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let q: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let embs = vec![
            EmbeddingVector::new(q, 2).unwrap(),
            EmbeddingVector::new(shared.clone(), 2).unwrap(),
            EmbeddingVector::new(shared, 2).unwrap(),
        ];
        let index = EmbeddingIndex::from_embeddings(vec!["q".into(), "a".into(), "b".into()], embs, vec![]).unwrap();
        let mask = PartMask::from_indices(&[part], 3, 2).unwrap();
        let r = retrieve_part_masked(&index, &params, "q", &["t1"], &mask, RetrieveOptions::default()).unwrap();
        prop_assert_eq!(r.results[0].score, r.results[1].score);
        prop_assert_eq!(&r.results[0].id, "a");
    }

    #[test]
    fn reorder_all_parts_equals_pure_tag_query(seed in any::<u64>(), tag in 0usize..5) {
        let (params, index) = random_setup(seed, 8);
        let name = format!("t{tag}");
        let all = PartMask::all(3, 2);
        let by_reorder = reorder(&index, &params, &name, &all, false, None).unwrap();
        let opts = RetrieveOptions { top_m: 8, exclude_query: false };
        let by_retrieve = retrieve_part_masked(&index, &params, "id00", &[&name], &all, opts).unwrap();
        prop_assert_eq!(by_reorder.results.len(), by_retrieve.results.len());
        for (a, b) in by_reorder.results.iter().zip(&by_retrieve.results) {
            prop_assert_eq!(&a.id, &b.id);
            prop_assert!((a.score - b.score).abs() < 1e-12);
        }
    }
}
