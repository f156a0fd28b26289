use magn::patching::{fold, fold_nodes, overlap_counts, unfold, unfold_nodes, PatchGeometry};
use magn::{MagnError, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rand_map(h: usize, w: usize, c: usize, seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::new(&[h, w, c], (0..h * w * c).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// Windows enumerated by brute force: every top-left corner on the padded
/// grid whose window fits.
fn enumerate_windows(h: usize, w: usize, win: usize, stride: usize, pad: usize) -> Vec<(isize, isize)> {
    let mut out = Vec::new();
    let mut y = 0;
    while y + win <= h + 2 * pad {
        let mut x = 0;
        while x + win <= w + 2 * pad {
            out.push((y as isize - pad as isize, x as isize - pad as isize));
            x += stride;
        }
        y += stride;
    }
    out
}

#[test]
fn single_patch_covers_the_map() {
    let g = PatchGeometry::square(7, 7, 2, 7, 3).unwrap();
    assert_eq!(g.count(), 1);
    let x = rand_map(7, 7, 2, 1);
    let nodes = unfold_nodes(&x, &g).unwrap();
    assert_eq!(nodes.shape(), &[1, 98]);
    assert_eq!(nodes.data(), x.data());
}

#[test]
fn node_rows_hold_windows() {
    let g = PatchGeometry::square(15, 15, 4, 7, 4).unwrap();
    assert_eq!(g.count(), 9);
    let x = rand_map(15, 15, 4, 2);
    let nodes = unfold_nodes(&x, &g).unwrap();
    for (j, (oy, ox)) in enumerate_windows(15, 15, 7, 4, 0).into_iter().enumerate() {
        assert_eq!(g.origin(j), (oy, ox));
        for py in 0..7 {
            for px in 0..7 {
                for c in 0..4 {
                    let v = x.at(&[oy as usize + py, ox as usize + px, c]);
                    assert_eq!(nodes.at(&[j, (py * 7 + px) * 4 + c]), v);
                }
            }
        }
    }
}

#[test]
fn overlap_counts_on_default_setting() {
    let g = PatchGeometry::square(31, 31, 1, 7, 4).unwrap();
    assert_eq!(g.count(), 49);
    let c = overlap_counts::<f64>(&g);
    assert_eq!(c.at(&[0, 0, 0]), 1.0);
    assert_eq!(c.at(&[5, 5, 0]), 4.0);
    assert_eq!(c.max_abs(), 4.0);
}

#[test]
fn fold_of_constant_nodes_is_constant() {
    let g = PatchGeometry::square(11, 11, 3, 5, 3).unwrap();
    let nodes = Tensor::<f64>::full(&[g.count(), g.patch_len()], 0.3);
    let y = fold_nodes(&nodes, &g).unwrap();
    assert!(y.data().iter().all(|&v| (v - 0.3).abs() < 1e-15));
}

#[test]
fn invalid_geometry_suggests_a_crop() {
    let err = PatchGeometry::square(30, 31, 1, 7, 4).unwrap_err();
    match &err {
        MagnError::Geometry { axis, .. } => assert_eq!(axis, &"height"),
        e => panic!("unexpected error {e}"),
    }
    assert!(err.to_string().contains("27"), "{err}");
    assert!(PatchGeometry::square(31, 31, 1, 7, 8).is_err());
    assert!(PatchGeometry::square(5, 31, 1, 7, 4).is_err());
}

#[test]
fn patch_set_round_trip() {
    let g = PatchGeometry::new((13, 9, 2), (5, 3), (4, 2), (0, 0)).unwrap();
    let x = rand_map(13, 9, 2, 3);
    let set = unfold(&x, &g).unwrap();
    assert_eq!(set.geometry, g);
    let back = fold(&set).unwrap();
    assert!(back.max_abs_diff(&x).unwrap() < 1e-12);
}

fn valid_geometry() -> impl Strategy<Value = (usize, usize, usize, usize, usize, usize, usize, usize)> {
    (1usize..=9, 1usize..=9, 0usize..3, 0usize..5, 0usize..5, 1usize..4, 0usize..2, 0usize..2).prop_flat_map(
        |(wh, ww, _, gh, gw, c, ph, pw)| {
            (1..=wh, 1..=ww).prop_map(move |(sh, sw)| {
                let h = wh + gh * sh - 2 * ph.min(wh / 2);
                let w = ww + gw * sw - 2 * pw.min(ww / 2);
                (h, w, c, wh, ww, sh, sw, ph.min(wh / 2) * 100 + pw.min(ww / 2))
            })
        },
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn count_formula_and_round_trip((h, w, c, wh, ww, sh, sw, pads) in valid_geometry(), seed in any::<u64>()) {
        let (ph, pw) = (pads / 100, pads % 100);
        prop_assume!(h >= 1 && w >= 1);
        let g = PatchGeometry::new((h, w, c), (wh, ww), (sh, sw), (ph, pw)).unwrap();
        let lh = (h + 2 * ph - wh) / sh + 1;
        let lw = (w + 2 * pw - ww) / sw + 1;
        prop_assert_eq!(g.count(), lh * lw);
        let mut brute = 0;
        let mut y = 0;
        while y + wh <= h + 2 * ph {
            let mut x = 0;
            while x + ww <= w + 2 * pw {
                brute += 1;
                x += sw;
            }
            y += sh;
        }
        prop_assert_eq!(g.count(), brute);
        let x = rand_map(h, w, c, seed);
        let back = fold_nodes(&unfold_nodes(&x, &g).unwrap(), &g).unwrap();
        prop_assert!(back.max_abs_diff(&x).unwrap() < 1e-12);
    }
}
