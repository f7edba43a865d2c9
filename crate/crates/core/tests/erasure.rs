//! Mask placement against sort and pixel-scan oracles.

use gabn::erasure::{apply_masks, erase_top_n, random_centers, top_n_centers, MaskConfig};
use gabn::gam::GamMap;
use gabn::Tensor;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Indices ordered by value descending, then row-major.
fn sort_oracle(values: &[f64], w: usize, n: usize) -> Vec<(usize, usize)> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    idx[..n].iter().map(|&i| (i / w, i % w)).collect()
}

#[test]
fn top_centres_match_full_sort_on_1000_maps() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for case in 0..1000 {
        let h = rng.gen_range(1..20);
        let w = rng.gen_range(1..20);
        // coarse values so ties are common
        let levels = rng.gen_range(2..50);
        let values: Vec<f64> = (0..h * w)
            .map(|_| rng.gen_range(0..levels) as f64 / levels as f64)
            .collect();
        let n = rng.gen_range(0..=(h * w).min(6));
        let map = GamMap::new(h, w, values.clone()).unwrap();
        assert_eq!(
            top_n_centers(&map, n).unwrap(),
            sort_oracle(&values, w, n),
            "case {case}"
        );
    }
}

#[test]
fn top_centres_examples() {
    let map = GamMap::new(2, 2, vec![0.1, 0.9, 0.5, 0.9]).unwrap();
    assert_eq!(top_n_centers(&map, 2).unwrap(), vec![(0, 1), (1, 1)]);
    assert!(top_n_centers(&map, 5).is_err());
    assert!(top_n_centers(&map, 0).unwrap().is_empty());
}

/// Independent inclusive bounds of a mask anchored at `c` with length `len`.
fn span(c: usize, len: usize, limit: usize) -> (i64, i64) {
    let lo = c as i64 - (len / 2) as i64;
    let hi = c as i64 + (len - 1 - len / 2) as i64;
    (lo.max(0), hi.min(limit as i64 - 1))
}

fn numbered_image(c: usize, h: usize, w: usize) -> Tensor<f64> {
    Tensor::new(vec![c, h, w], (0..c * h * w).map(|i| 1.0 + i as f64).collect()).unwrap()
}

#[test]
fn masks_match_pixel_scan_union() {
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    for case in 0..300 {
        let (c, h, w) = (rng.gen_range(1..4), rng.gen_range(3..24), rng.gen_range(3..24));
        let cfg = MaskConfig {
            n_mask: rng.gen_range(1..5),
            h_mask: rng.gen_range(1..=h),
            w_mask: rng.gen_range(1..=w),
            fill_value: -7.5,
        };
        let img = numbered_image(c, h, w);
        let centers = random_centers(h, w, cfg.n_mask, &mut rng);
        let mut mask_rng = ChaCha8Rng::seed_from_u64(case);
        let (out, placements) = apply_masks(&img, &centers, &cfg, &mut mask_rng).unwrap();
        assert_eq!(placements.len(), centers.len());
        let mut union = 0;
        for r in 0..h {
            for col in 0..w {
                let inside = placements.iter().any(|p| {
                    assert!((1..=cfg.h_mask).contains(&p.height));
                    assert!((1..=cfg.w_mask).contains(&p.width));
                    let (r0, r1) = span(p.center.0, p.height, h);
                    let (c0, c1) = span(p.center.1, p.width, w);
                    (r0..=r1).contains(&(r as i64)) && (c0..=c1).contains(&(col as i64))
                });
                union += inside as usize;
                for ch in 0..c {
                    let i = (ch * h + r) * w + col;
                    if inside {
                        assert_eq!(out.data()[i], -7.5, "case {case}");
                    } else {
                        assert_eq!(out.data()[i].to_bits(), img.data()[i].to_bits());
                    }
                }
            }
        }
        let filled = out.data().iter().filter(|&&v| v == -7.5).count();
        assert_eq!(filled, union * c);
    }
}

#[test]
fn masks_are_deterministic_under_seed() {
    let img = numbered_image(3, 16, 16);
    let cfg = MaskConfig::for_image(16, 16);
    let map = GamMap::new(16, 16, (0..256).map(|i| ((i * 37) % 101) as f64).collect()).unwrap();
    let run = |seed| erase_top_n(&img, &map, &cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
    assert_eq!(run(5), run(5));
    let (_, placements) = run(5);
    let centres: Vec<_> = placements.iter().map(|p| p.center).collect();
    assert_eq!(centres, top_n_centers(&map, 3).unwrap());
}

#[test]
fn rejects_bad_inputs() {
    let img = numbered_image(1, 4, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let cfg = MaskConfig::for_image(4, 4);
    assert!(apply_masks(&img, &[(4, 0)], &cfg, &mut rng).is_err());
    let big = MaskConfig { h_mask: 5, ..cfg.clone() };
    assert!(apply_masks(&img, &[(0, 0)], &big, &mut rng).is_err());
    let flat = Tensor::new(vec![16], vec![0.0; 16]).unwrap();
    assert!(apply_masks(&flat, &[], &cfg, &mut rng).is_err());
}

proptest! {
    #[test]
    fn masks_never_leave_the_image(
        h in 1usize..30, w in 1usize..30, seed in any::<u64>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cfg = MaskConfig::for_image(h, w);
        let img = numbered_image(1, h, w);
        let centers = random_centers(h, w, 3, &mut rng);
        let (out, placements) = apply_masks(&img, &centers, &cfg, &mut rng).unwrap();
        prop_assert_eq!(out.shape(), img.shape());
        for p in placements {
            prop_assert!(p.rows.end <= h && p.cols.end <= w);
            prop_assert!(p.contains(p.center.0, p.center.1));
        }
    }
}
