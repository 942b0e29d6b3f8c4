//! Mask codec and overlap metrics against dense pixel-counting oracles.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use relqa_core::geometry::{
    bce_mask, box_iou, dice_coefficient, mask_iou, rle_decode, rle_encode, BoundingBox, Grid,
    ProbabilityGrid,
};

fn random_grid(rng: &mut ChaCha8Rng, h: u32, w: u32) -> Grid {
    let density: f64 = rng.random();
    let rows: Vec<Vec<u8>> = (0..h)
        .map(|_| (0..w).map(|_| u8::from(rng.random::<f64>() < density)).collect())
        .collect();
    Grid::from_rows(&rows).unwrap()
}

fn dense_counts(a: &Grid, b: &Grid) -> (u64, u64, u64) {
    let (mut inter, mut na, mut nb) = (0, 0, 0);
    for r in 0..a.height() as usize {
        for c in 0..a.width() as usize {
            let (x, y) = (a.get(r, c), b.get(r, c));
            na += u64::from(x);
            nb += u64::from(y);
            inter += u64::from(x & y);
        }
    }
    (inter, na, nb)
}

#[test]
fn thousand_random_masks_match_dense_oracles() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for _ in 0..1000 {
        let h = rng.random_range(1..=16);
        let w = rng.random_range(1..=16);
        let ga = random_grid(&mut rng, h, w);
        let gb = random_grid(&mut rng, h, w);
        let (a, b) = (rle_encode(&ga), rle_encode(&gb));
        assert_eq!(rle_decode(&a), ga);
        assert_eq!(rle_encode(&rle_decode(&a)), a);

        let (inter, na, nb) = dense_counts(&ga, &gb);
        assert_eq!(a.area(), na);
        assert_eq!(a.intersection_area(&b).unwrap(), inter);

        let dice = dice_coefficient(&a, &b).unwrap();
        let dice_oracle = if na + nb == 0 { 1.0 } else { 2.0 * inter as f64 / (na + nb) as f64 };
        assert!((dice - dice_oracle).abs() < 1e-12);
        assert!((0.0..=1.0).contains(&dice));
        assert_eq!(dice, dice_coefficient(&b, &a).unwrap());
        assert_eq!(dice_coefficient(&a, &a).unwrap(), 1.0);

        let iou = mask_iou(&a, &b).unwrap();
        let union = na + nb - inter;
        let iou_oracle = if union == 0 { 1.0 } else { inter as f64 / union as f64 };
        assert!((iou - iou_oracle).abs() < 1e-12);

        let mut pred = ProbabilityGrid::filled(h, w, 0.0);
        let mut bce_oracle = 0.0;
        for r in 0..h as usize {
            for c in 0..w as usize {
                let p: f64 = rng.random();
                pred.set(r, c, p);
                let p = p.clamp(1e-7, 1.0 - 1e-7);
                bce_oracle -= if ga.get(r, c) == 1 { p.ln() } else { (1.0 - p).ln() };
            }
        }
        bce_oracle /= f64::from(h * w);
        assert!((bce_mask(&pred, &a).unwrap() - bce_oracle).abs() < 1e-12);
    }
}

#[test]
fn bce_of_half_grid_is_ln2() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let gt = rle_encode(&random_grid(&mut rng, 16, 16));
    let v = bce_mask(&ProbabilityGrid::filled(16, 16, 0.5), &gt).unwrap();
    assert!((v - std::f64::consts::LN_2).abs() < 1e-9);
}

#[test]
fn box_iou_matches_pixel_oracle_on_grid_aligned_boxes() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let n = 16u32;
    for _ in 0..1000 {
        let mut edges = || {
            let a = rng.random_range(0..n);
            let b = rng.random_range(a + 1..=n);
            (a, b)
        };
        let ((ax1, ax2), (ay1, ay2), (bx1, bx2), (by1, by2)) = (edges(), edges(), edges(), edges());
        let bx = |x1: u32, y1: u32, x2: u32, y2: u32| {
            BoundingBox::new(
                f64::from(x1) / f64::from(n),
                f64::from(y1) / f64::from(n),
                f64::from(x2) / f64::from(n),
                f64::from(y2) / f64::from(n),
            )
            .unwrap()
        };
        let a = bx(ax1, ay1, ax2, ay2);
        let b = bx(bx1, by1, bx2, by2);
        let mut inter = 0u32;
        let mut union = 0u32;
        for x in 0..n {
            for y in 0..n {
                let ia = (ax1..ax2).contains(&x) && (ay1..ay2).contains(&y);
                let ib = (bx1..bx2).contains(&x) && (by1..by2).contains(&y);
                inter += u32::from(ia && ib);
                union += u32::from(ia || ib);
            }
        }
        let oracle = f64::from(inter) / f64::from(union);
        assert!((box_iou(&a, &b) - oracle).abs() < 1e-9);
        assert_eq!(box_iou(&a, &b), box_iou(&b, &a));
    }
}
