use std::collections::BTreeSet;

use clipsim::predmae::{masked_count, tube_mask};
use clipsim::retrieval::{average_precision, clip_boundaries, CorpusIndex};
use clipsim::rng::SeedRng;
use clipsim::similarity::{chamfer, topk_cs, ClipMatrix};
use clipsim::simlearn::{fcs_loss, mine_pairs, shotmix_sample, CutEnd};
use proptest::prelude::*;

fn unit_rows(rows: usize, dim: usize) -> impl Strategy<Value = ClipMatrix> {
    prop::collection::vec(prop::collection::vec(-1.0f32..1.0, dim), rows).prop_filter_map("zero row", |rows| {
        let flat: Vec<f32> = rows.concat();
        ClipMatrix::normalized(rows.len(), rows[0].len(), flat).ok()
    })
}

fn pair() -> impl Strategy<Value = (ClipMatrix, ClipMatrix)> {
    (1usize..10, 1usize..10, 1usize..16).prop_flat_map(|(n, m, d)| (unit_rows(n, d), unit_rows(m, d)))
}

fn reverse(m: &ClipMatrix) -> ClipMatrix {
    let order: Vec<usize> = (0..m.rows()).rev().collect();
    m.permuted(&order).unwrap()
}

proptest! {
    #[test]
    fn topk_non_increasing_in_k((a, b) in pair()) {
        let mut prev = f64::INFINITY;
        for k in 1..=a.rows() + 1 {
            let v = topk_cs(&a, &b, k).unwrap();
            prop_assert!(v <= prev + 1e-12);
            prev = v;
        }
    }

    #[test]
    fn topk_at_least_chamfer((a, b) in pair(), k in 1usize..12) {
        prop_assert!(topk_cs(&a, &b, k).unwrap() >= chamfer(&a, &b).unwrap() - 1e-12);
    }

    #[test]
    fn topk_ignores_clip_order((a, b) in pair(), k in 1usize..12) {
        let base = topk_cs(&a, &b, k).unwrap();
        prop_assert_eq!(topk_cs(&reverse(&a), &b, k).unwrap().to_bits(), base.to_bits());
        prop_assert_eq!(topk_cs(&a, &reverse(&b), k).unwrap().to_bits(), base.to_bits());
    }

    #[test]
    fn scores_bounded((a, b) in pair(), k in 1usize..12) {
        let v = topk_cs(&a, &b, k).unwrap();
        prop_assert!((-1.0 - 1e-6..=1.0 + 1e-6).contains(&v));
    }

    #[test]
    fn mining_shrinks_as_epsilon_grows(
        sims in prop::collection::vec(-1.0f64..1.0, 2..20),
        flags in prop::collection::vec(any::<bool>(), 20),
        e1 in -0.5f64..0.5,
        de in 0.0f64..0.5,
    ) {
        let pos = &flags[..sims.len()];
        let loose = mine_pairs(&sims, pos, e1).unwrap();
        let tight = mine_pairs(&sims, pos, e1 + de).unwrap();
        let subset = |a: &[usize], b: &[usize]| a.iter().all(|x| b.contains(x));
        prop_assert!(subset(&tight.positives, &loose.positives));
        prop_assert!(subset(&tight.negatives, &loose.negatives));
    }

    #[test]
    fn fcs_ignores_triplet_order(
        rows in prop::collection::vec(prop::collection::vec(-1.0f64..1.0, 12), 1..6),
        shift in 0usize..6,
    ) {
        let pick = |o: usize| rows.iter().map(|r| r[o..o + 4].to_vec()).collect::<Vec<_>>();
        let (a, p, f) = (pick(0), pick(4), pick(8));
        prop_assume!(rows.iter().all(|r| r.iter().any(|x| x.abs() > 1e-3)));
        let rot = |v: &Vec<Vec<f64>>| {
            let mut v = v.clone();
            let n = v.len();
            v.rotate_left(shift % n);
            v
        };
        let (l1, _) = fcs_loss(&a, &p, &f, 0.1).unwrap();
        let (l2, _) = fcs_loss(&rot(&a), &rot(&p), &rot(&f), 0.1).unwrap();
        prop_assert!((l1 - l2).abs() < 1e-12);
        prop_assert!(l1 >= 0.0);
    }

    #[test]
    fn store_roundtrip(
        videos in prop::collection::btree_map("[a-z0-9_]{1,12}", (1usize..6, any::<u64>()), 1..8),
        dim in 1usize..12,
    ) {
        let mut index = CorpusIndex::new();
        for (id, (rows, seed)) in &videos {
            let mut rng = SeedRng::new(*seed);
            let data: Vec<f32> = (0..rows * dim).map(|_| rng.normal() as f32 + 0.01).collect();
            index.insert(id.clone(), ClipMatrix::normalized(*rows, dim, data).unwrap()).unwrap();
        }
        let bytes = index.encode().unwrap();
        let back = CorpusIndex::decode(&bytes).unwrap();
        prop_assert_eq!(&back, &index);
        prop_assert_eq!(back.encode().unwrap(), bytes);
    }

    #[test]
    fn ap_bounds_and_perfect_ranking(n in 1usize..30, hits in 1usize..30) {
        let hits = hits.min(n);
        let ranking: Vec<String> = (0..n).map(|i| format!("v{i}")).collect();
        let top: BTreeSet<String> = ranking[..hits].iter().cloned().collect();
        let ap = average_precision(ranking.iter().map(String::as_str), &top).unwrap();
        prop_assert!((ap - 1.0).abs() < 1e-12);
        let bottom: BTreeSet<String> = ranking[n - hits..].iter().cloned().collect();
        let ap = average_precision(ranking.iter().map(String::as_str), &bottom).unwrap();
        prop_assert!(ap > 0.0 && ap <= 1.0);
    }

    #[test]
    fn boundaries_tile_the_video(frames in 1usize..200) {
        let w = clip_boundaries(frames, 8).unwrap();
        prop_assert_eq!(w.len(), frames.div_ceil(8));
        prop_assert_eq!(w[0].start, 0);
        prop_assert_eq!(w.last().unwrap().end, frames);
        prop_assert!(w.windows(2).all(|p| p[0].end == p[1].start && p[0].len() == 8));
    }

    #[test]
    fn tube_mask_size(spatial in 1usize..300, ratio in 0.0f64..=1.0, seed in any::<u64>()) {
        let mask = tube_mask(spatial, ratio, &mut SeedRng::new(seed)).unwrap();
        prop_assert_eq!(mask.masked_count(), masked_count(spatial, ratio));
        prop_assert_eq!(mask.masked().len() + mask.visible().len(), spatial);
    }
}

#[test]
fn masked_count_rounds_half_to_even() {
    assert_eq!(masked_count(196, 0.9), 176);
    assert_eq!(masked_count(5, 0.5), 2);
    assert_eq!(masked_count(7, 0.5), 4);
    assert_eq!(masked_count(4, 0.9), 4);
}

#[test]
fn shotmix_invariants_over_many_draws() {
    let mut rng = SeedRng::new(7);
    let (f, mut ends, mut cuts) = (8usize, [0usize; 2], 0);
    for draw in 0..1000 {
        let len = 16 + draw % 40;
        let spec = shotmix_sample(len, f, &mut rng).unwrap();
        spec.validate().unwrap();
        assert!(spec.ratio > 0.7 && spec.ratio < 1.0);
        let overlap = (spec.ratio * f as f64).ceil() as usize;
        assert_eq!(spec.overlap(), overlap);
        assert!(spec.cut_len <= f - overlap);
        assert_eq!(spec.anchor_start.abs_diff(spec.positive_start), f - overlap);
        let idx = spec.positive_indices();
        assert_eq!(idx.len(), f);
        assert!(idx.iter().all(|&i| i < len));
        ends[matches!(spec.cut_end, CutEnd::End) as usize] += 1;
        cuts += (spec.cut_len > 0) as usize;
    }
    assert!(ends[0] > 400 && ends[1] > 400);
    assert!(cuts > 300);
}

#[test]
fn shotmix_short_video_fallback() {
    let mut rng = SeedRng::new(7);
    for len in 8..16 {
        let spec = shotmix_sample(len, 8, &mut rng).unwrap();
        assert_eq!(spec.anchor_start, spec.positive_start);
        assert_eq!((spec.ratio, spec.cut_len), (1.0, 0));
    }
    assert!(shotmix_sample(7, 8, &mut rng).is_err());
}
