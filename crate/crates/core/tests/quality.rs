use magn::degradation::{add_gaussian_noise, bayer_mosaic, DegradeKind, DegradeSpec};
use magn::metrics::{psnr, ssim, QualityReport};
use magn::Tensor;
use proptest::prelude::*;

mod common;
use common::{naive_psnr, naive_ssim, uniform_image as image};

#[test]
fn noise_has_requested_spread() {
    let clean = Tensor::<f64>::full(&[256, 256, 1], 0.5);
    for sigma in [15.0, 25.0, 50.0] {
        let noisy = add_gaussian_noise(&clean, sigma, 42);
        let d = noisy.sub(&clean).unwrap();
        let n = d.len() as f64;
        let mean = d.sum() / n;
        let std = (d.data().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt();
        let target = sigma / 255.0;
        assert!((std - target).abs() / target < 0.02, "sigma {sigma}: std {std}");
        assert!(mean.abs() < 4.0 * target / n.sqrt(), "sigma {sigma}: mean {mean}");
    }
}

#[test]
fn noise_is_not_clamped_and_is_seeded() {
    let clean = Tensor::<f64>::zeros(&[16, 16, 3]);
    let noisy = add_gaussian_noise(&clean, 50.0, 1);
    assert!(noisy.data().iter().any(|&v| v < 0.0));
    assert_eq!(noisy, add_gaussian_noise(&clean, 50.0, 1));
    assert_ne!(noisy, add_gaussian_noise(&clean, 50.0, 2));
    assert_eq!(add_gaussian_noise(&clean, 0.0, 1), clean);
}

#[test]
fn spec_dispatch_and_validation() {
    let x = image(4, 4, 3, 1);
    assert_eq!(DegradeSpec::mosaic().apply(&x).unwrap(), bayer_mosaic(&x).unwrap());
    let g = DegradeSpec::gaussian(25.0, 9);
    assert_eq!(g.apply(&x).unwrap(), add_gaussian_noise(&x, 25.0, 9));
    assert_ne!(g.for_item(0).apply(&x).unwrap(), g.for_item(1).apply(&x).unwrap());
    assert!(DegradeSpec::gaussian(-1.0, 0).apply(&x).is_err());
    assert!(DegradeSpec::mosaic().apply(&image(4, 4, 1, 1)).is_err());
    for k in [DegradeKind::Gaussian, DegradeKind::Mosaic] {
        assert_eq!(k.to_string().parse::<DegradeKind>().unwrap(), k);
    }
    assert!("jpeg".parse::<DegradeKind>().is_err());
}

#[test]
fn mosaic_keeps_one_channel_per_pixel() {
    let x = image(6, 8, 3, 2).map(|v| v + 0.1);
    let m = bayer_mosaic(&x).unwrap();
    for y in 0..6 {
        for xx in 0..8 {
            let keep = match (y % 2, xx % 2) {
                (0, 0) => 0,
                (1, 1) => 2,
                _ => 1,
            };
            for c in 0..3 {
                let v = m.at(&[y, xx, c]);
                assert_eq!(v, if c == keep { x.at(&[y, xx, c]) } else { 0.0 });
            }
        }
    }
    assert_eq!(bayer_mosaic(&m).unwrap(), m);

    let gray = Tensor::from_fn(&[4, 4, 3], |i| ((i / 3) as f64) / 16.0);
    let gm = bayer_mosaic(&gray).unwrap();
    for p in 0..16 {
        let s: f64 = gm.data()[p * 3..p * 3 + 3].iter().sum();
        assert_eq!(s, p as f64 / 16.0);
    }
    assert!(bayer_mosaic(&image(5, 4, 3, 1)).is_err());
}

#[test]
fn mosaic_lowers_psnr_sharply() {
    let x = image(32, 32, 3, 3);
    assert!(psnr(&bayer_mosaic(&x).unwrap(), &x, 1.0).unwrap() < 12.0);
}

#[test]
fn psnr_values() {
    let a = image(32, 32, 3, 4);
    assert_eq!(psnr(&a, &a, 1.0).unwrap(), f64::INFINITY);
    let b = a.map(|v| v + 1.0 / 255.0);
    assert!((psnr(&a, &b, 1.0).unwrap() - 48.1308).abs() < 1e-3);
    let c = image(32, 32, 3, 5);
    assert!((psnr(&a, &c, 1.0).unwrap() - naive_psnr(&a, &c, 1.0)).abs() < 1e-9);
    assert!((psnr(&a, &c, 255.0).unwrap() - naive_psnr(&a, &c, 255.0)).abs() < 1e-9);
    assert!(psnr(&a, &image(32, 31, 3, 5), 1.0).is_err());
}

#[test]
fn ssim_matches_windowed_oracle() {
    for (c, seed) in [(1, 6), (3, 7)] {
        let a = image(32, 32, c, seed);
        let b = image(32, 32, c, seed + 100);
        assert!((ssim(&a, &b, 1.0).unwrap() - naive_ssim(&a, &b, 1.0)).abs() < 1e-9);
        let noisy = add_gaussian_noise(&a, 25.0, seed);
        assert!((ssim(&a, &noisy, 1.0).unwrap() - naive_ssim(&a, &noisy, 1.0)).abs() < 1e-9);
    }
}

#[test]
fn ssim_special_cases() {
    let a = image(20, 20, 3, 8);
    assert_eq!(ssim(&a, &a, 1.0).unwrap(), 1.0);
    let binary = Tensor::from_fn(&[24, 24, 1], |i| if (i * 7919) % 13 < 6 { 0.0 } else { 1.0 });
    let inverted = binary.map(|v| 1.0 - v);
    assert!(ssim(&binary, &inverted, 1.0).unwrap() < 0.0);
    assert!(ssim(&image(10, 20, 1, 1), &image(10, 20, 1, 2), 1.0).is_err());
}

#[test]
fn psnr_falls_as_noise_grows() {
    let clean = image(48, 48, 3, 9);
    let mean_psnr = |sigma: f64| {
        (0..5)
            .map(|s| psnr(&add_gaussian_noise(&clean, sigma, s), &clean, 1.0).unwrap())
            .sum::<f64>()
            / 5.0
    };
    let levels: Vec<f64> = [5.0, 15.0, 25.0, 50.0].iter().map(|&s| mean_psnr(s)).collect();
    assert!(levels.windows(2).all(|p| p[0] > p[1] + 0.5), "{levels:?}");
}

#[test]
fn report_means_and_csv() {
    let mut r = QualityReport::default();
    r.push("a.png", 30.0, 0.8);
    r.push("b.png", 34.0, 0.9);
    assert_eq!(r.mean_psnr(), 32.0);
    assert!((r.mean_ssim() - 0.85).abs() < 1e-12);
    let csv = r.to_csv();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "file,psnr,ssim");
    assert!(lines[1].starts_with("a.png,30"));
    assert_eq!(lines.len(), 4);

    let mut inf = QualityReport::default();
    inf.push("same.png", f64::INFINITY, 1.0);
    assert!(inf.to_csv().contains("inf"));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn metrics_are_symmetric_and_bounded(s1 in any::<u64>(), s2 in any::<u64>(), c in prop::sample::select(vec![1usize, 3])) {
        let a = image(16, 16, c, s1);
        let b = image(16, 16, c, s2);
        prop_assert_eq!(psnr(&a, &b, 1.0).unwrap(), psnr(&b, &a, 1.0).unwrap());
        let (x, y) = (ssim(&a, &b, 1.0).unwrap(), ssim(&b, &a, 1.0).unwrap());
        prop_assert!((x - y).abs() < 1e-12);
        prop_assert!((-1.0..=1.0).contains(&x));
        let inv = a.map(|v| 1.0 - v);
        prop_assert!((-1.0..=1.0).contains(&ssim(&a, &inv, 1.0).unwrap()));
    }

    #[test]
    fn mosaic_is_idempotent(h in 1usize..6, w in 1usize..6, seed in any::<u64>()) {
        let x = image(2 * h, 2 * w, 3, seed);
        let m = bayer_mosaic(&x).unwrap();
        prop_assert_eq!(bayer_mosaic(&m).unwrap(), m.clone());
        for px in m.data().chunks(3) {
            prop_assert!(px.iter().filter(|&&v| v != 0.0).count() <= 1);
        }
    }
}
