//! Smoothing and text-removal invariants.

use proptest::prelude::*;
use sonoqa_core::preprocess::{
    gaussian_kernel, smooth, strip_overlay_text, GrayImage,
};

fn arb_image(side: usize) -> impl Strategy<Value = GrayImage> {
    proptest::collection::vec(0.0f64..=1.0, side * side)
        .prop_map(move |data| GrayImage::new(side, side, data).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn smoothing_preserves_the_mean(img in arb_image(16)) {
        let k = gaussian_kernel(1.0, 3).unwrap();
        let out = smooth(&img, &k);
        prop_assert!((out.mean() - img.mean()).abs() < 1e-10);
    }

    #[test]
    fn smoothing_shrinks_the_range(img in arb_image(12)) {
        let k = gaussian_kernel(1.3, 4).unwrap();
        let out = smooth(&img, &k);
        let max_in = img.data().iter().cloned().fold(0.0f64, f64::max);
        let min_in = img.data().iter().cloned().fold(1.0f64, f64::min);
        for &v in out.data() {
            prop_assert!(v <= max_in + 1e-12);
            prop_assert!(v >= min_in - 1e-12);
        }
    }

    #[test]
    fn strip_is_idempotent(img in arb_image(20), threshold in 0.3f64..0.95) {
        let once = strip_overlay_text(&img, threshold, 3).unwrap();
        let twice = strip_overlay_text(&once, threshold, 3).unwrap();
        prop_assert_eq!(once, twice);
    }
}

#[test]
fn two_dimensional_smoothing_equals_two_one_dimensional_passes() {
    // separability oracle: apply the 1-d kernel along rows, then columns
    let mut rng = sonoqa_core::rng::Rng::new(17);
    let img = GrayImage::new(14, 14, (0..196).map(|_| rng.next_f64()).collect()).unwrap();
    let sigma = 1.0;
    let radius = 3usize;
    let k2 = gaussian_kernel(sigma, radius).unwrap();
    let full = smooth(&img, &k2);

    // normalized 1-d weights
    let inv = 1.0 / (2.0 * sigma * sigma);
    let r = radius as isize;
    let mut w1: Vec<f64> = (-r..=r).map(|d| (-((d * d) as f64) * inv).exp()).collect();
    let s: f64 = w1.iter().sum();
    w1.iter_mut().for_each(|w| *w /= s);

    let reflect = |i: isize, n: usize| -> usize {
        let n = n as isize;
        let mut i = i;
        loop {
            if i < 0 {
                i = -i - 1;
            } else if i >= n {
                i = 2 * n - 1 - i;
            } else {
                return i as usize;
            }
        }
    };

    let (wd, ht) = (img.width(), img.height());
    let mut rows = vec![0.0; wd * ht];
    for y in 0..ht {
        for x in 0..wd {
            let mut acc = 0.0;
            for (i, &wv) in w1.iter().enumerate() {
                let sx = reflect(x as isize + i as isize - r, wd);
                acc += wv * img.get(sx, y);
            }
            rows[y * wd + x] = acc;
        }
    }
    for y in 0..ht {
        for x in 0..wd {
            let mut acc = 0.0;
            for (i, &wv) in w1.iter().enumerate() {
                let sy = reflect(y as isize + i as isize - r, ht);
                acc += wv * rows[sy * wd + x];
            }
            assert!(
                (acc - full.get(x, y)).abs() < 1e-10,
                "separability violated at ({x},{y}): {acc} vs {}",
                full.get(x, y)
            );
        }
    }
}
