use farmamba_core::autodiff::{Conv2dSpec, Graph};
use farmamba_core::freq::{self, Maskable, MaskKind};
use farmamba_core::oracle::{self, rand_tensor};
use farmamba_core::{Tensor, TensorError};

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn plane(t: &Tensor<f64>, i: usize, hw: usize) -> &[f64] {
    &t.data()[i * hw..(i + 1) * hw]
}

#[test]
fn conv_matches_loop_oracle() {
    let x = rand_tensor(&[1, 2, 5, 5], 1);
    let w = rand_tensor(&[3, 2, 3, 3], 2);
    let b = rand_tensor(&[3], 3);
    let mut g = Graph::new();
    let (xv, wv, bv) = (g.constant(x.clone()), g.constant(w.clone()), g.constant(b.clone()));
    for (stride, pad) in [(1, 1), (2, 1), (1, 0)] {
        let spec = Conv2dSpec {
            stride,
            padding: pad,
            groups: 1,
        };
        let y = g.conv2d(xv, wv, Some(bv), spec).unwrap();
        let want = oracle::conv2d(&x, &w, Some(&b), stride, pad, 1);
        assert_eq!(g.value(y).shape(), want.shape());
        assert!(g.value(y).max_abs_diff(&want) <= 1e-12);
    }
}

#[test]
fn grouped_conv_matches_loop_oracle() {
    let x = rand_tensor(&[2, 4, 6, 6], 4);
    let w = rand_tensor(&[4, 2, 5, 5], 5);
    let mut g = Graph::new();
    let (xv, wv) = (g.constant(x.clone()), g.constant(w.clone()));
    let spec = Conv2dSpec {
        stride: 1,
        padding: 2,
        groups: 2,
    };
    let y = g.conv2d(xv, wv, None, spec).unwrap();
    assert!(g.value(y).max_abs_diff(&oracle::conv2d(&x, &w, None, 1, 2, 2)) <= 1e-12);
}

#[test]
fn linear_matches_dot_product_oracle() {
    let x = rand_tensor(&[3, 4], 6);
    let w = rand_tensor(&[4, 2], 7);
    let mut g = Graph::new();
    let (xv, wv) = (g.constant(x.clone()), g.constant(w.clone()));
    let y = g.linear(xv, wv, None).unwrap();
    assert!(g.value(y).max_abs_diff(&oracle::matmul(&x, &w)) <= 1e-12);

    let eye = Tensor::new(vec![4, 4], (0..16).map(|i| if i % 5 == 0 { 1.0 } else { 0.0 }).collect()).unwrap();
    let ev = g.constant(eye);
    let y = g.linear(xv, ev, None).unwrap();
    assert_eq!(g.value(y).data(), x.data());
}

#[test]
fn dwt_matches_block_formulas() {
    let x = rand_tensor(&[2, 3, 8, 8], 11);
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let s = freq::dwt2(&mut g, xv).unwrap();
    let bands = [s.ll, s.lh, s.hl, s.hh];
    for p in 0..6 {
        let want = oracle::haar2(plane(&x, p, 64), 8, 8);
        for (band, w) in bands.iter().zip(&want) {
            assert!(max_diff(plane(g.value(*band), p, 16), w) <= 1e-9);
        }
    }
    let energy: f64 = bands.iter().map(|&b| g.value(b).sum_sq()).sum();
    assert!((energy - x.sum_sq()).abs() <= 1e-10);
    let back = freq::idwt2(&mut g, &s).unwrap();
    assert!(g.value(back).max_abs_diff(&x) <= 1e-12);
}

#[test]
fn dwt_odd_extent_is_an_error() {
    let mut g = Graph::new();
    let xv = g.constant(rand_tensor(&[1, 1, 6, 5], 12));
    assert!(matches!(freq::dwt2(&mut g, xv), Err(TensorError::OddExtent { .. })));
}

#[test]
fn fft_matches_direct_dft() {
    let x = rand_tensor(&[2, 8, 8], 21);
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let s = freq::fft2(&mut g, xv).unwrap();
    let (re, im) = (s.re(&mut g).unwrap(), s.im(&mut g).unwrap());
    for p in 0..2 {
        let (wr, wi) = oracle::dft2(plane(&x, p, 64), 8, 8);
        assert!(max_diff(plane(g.value(re), p, 64), &wr) <= 1e-9);
        assert!(max_diff(plane(g.value(im), p, 64), &wi) <= 1e-9);
    }
    let spec_energy = (g.value(re).sum_sq() + g.value(im).sum_sq()) / 64.0;
    assert!((spec_energy - x.sum_sq()).abs() <= 1e-8);
    let back = freq::ifft2(&mut g, &s).unwrap();
    assert!(g.value(back).max_abs_diff(&x) <= 1e-10);
}

#[test]
fn fft_rectangular_and_shift_roundtrip() {
    let x = rand_tensor(&[1, 4, 16], 22);
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let s = freq::fft2(&mut g, xv).unwrap();
    let (wr, _) = oracle::dft2(x.data(), 4, 16);
    let re = s.re(&mut g).unwrap();
    assert!(max_diff(g.value(re).data(), &wr) <= 1e-9);
    let c = freq::fftshift(&mut g, &s).unwrap();
    // DC moves to (M/2, N/2)
    let cre = c.re(&mut g).unwrap();
    assert!((g.value(cre).at(&[0, 2, 8]) - x.sum()).abs() <= 1e-12);
    assert!(freq::fftshift(&mut g, &c).is_err());
    let back = freq::ifft2(&mut g, &c).unwrap();
    assert!(g.value(back).max_abs_diff(&x) <= 1e-10);
    let n = freq::ifftshift(&mut g, &c).unwrap();
    assert_eq!(g.value(n.packed).data(), g.value(s.packed).data());
}

#[test]
fn dct_matches_direct_sum() {
    for (m, n) in [(8, 8), (5, 7), (1, 4)] {
        let x = rand_tensor(&[3, m, n], 31 + m as u64);
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let s = freq::dct2(&mut g, xv).unwrap();
        for p in 0..3 {
            let want = oracle::dct2(plane(&x, p, m * n), m, n);
            assert!(max_diff(plane(g.value(s.coef), p, m * n), &want) <= 1e-10);
        }
        assert!((g.value(s.coef).sum_sq() - x.sum_sq()).abs() <= 1e-10);
        let back = freq::idct2(&mut g, &s).unwrap();
        assert!(g.value(back).max_abs_diff(&x) <= 1e-12);
    }
}

#[test]
fn masks_partition_every_grid() {
    for kind in [MaskKind::Ring, MaskKind::Wedge] {
        for h in [8, 16, 32] {
            for w in [8, 16, 32] {
                for k in 1..=4 {
                    let set = freq::make_band_masks(kind, h, w, k).unwrap();
                    let mut cover = vec![0u32; h * w];
                    for b in 0..k {
                        let m = set.mask::<f64>(b);
                        assert!(m.sum() > 0.0, "{kind:?} {h}x{w} K={k} band {b} empty");
                        for (c, &v) in cover.iter_mut().zip(m.data()) {
                            *c += v as u32;
                        }
                    }
                    assert!(cover.iter().all(|&c| c == 1), "{kind:?} {h}x{w} K={k}");
                }
            }
        }
    }
}

#[test]
fn ring_masks_grow_outward() {
    let set = freq::make_band_masks(MaskKind::Ring, 8, 8, 2).unwrap();
    assert_eq!(set.assignment[4 * 8 + 4], 0);
    assert_eq!(set.assignment[0], 1);
    let m0 = set.mask::<f64>(0);
    let m1 = set.mask::<f64>(1);
    assert!(m0.zip_map(&m1, |a, b| a * b).data().iter().all(|&v| v == 0.0));
    assert!(m0.zip_map(&m1, |a, b| a + b).data().iter().all(|&v| v == 1.0));
}

#[test]
fn excessive_band_count_is_an_error() {
    assert!(freq::make_band_masks(MaskKind::Wedge, 2, 2, 4).is_err());
    assert!(freq::make_band_masks(MaskKind::Ring, 8, 8, 0).is_err());
    assert!(freq::make_band_masks(MaskKind::Ring, 1, 8, 1).is_err());
}

#[test]
fn mask_shape_mismatch_is_an_error() {
    let mut g = Graph::new();
    let xv = g.constant(rand_tensor(&[1, 8, 8], 40));
    let s = freq::dct2(&mut g, xv).unwrap();
    let m = freq::make_band_masks(MaskKind::Wedge, 4, 4, 2).unwrap();
    assert!(s.apply_mask(&mut g, &m.mask(0)).is_err());
}

#[test]
fn band_sums_reproduce_input() {
    let x = rand_tensor(&[2, 16, 16], 41);
    for k in 1..=4 {
        let mut g = Graph::<f64>::new();
        let xv = g.constant(x.clone());

        let s = freq::fft2(&mut g, xv).unwrap();
        let s = freq::fftshift(&mut g, &s).unwrap();
        let rings = freq::make_band_masks(MaskKind::Ring, 16, 16, k).unwrap();
        let mut acc = Tensor::zeros(x.shape().to_vec());
        for b in 0..k {
            let band = s.apply_mask(&mut g, &rings.mask(b)).unwrap();
            let y = freq::ifft2(&mut g, &band).unwrap();
            acc.add_assign(g.value(y));
        }
        assert!(acc.max_abs_diff(&x) <= 1e-8, "fft K={k}");

        let d = freq::dct2(&mut g, xv).unwrap();
        let wedges = freq::make_band_masks(MaskKind::Wedge, 16, 16, k).unwrap();
        let mut acc = Tensor::zeros(x.shape().to_vec());
        for b in 0..k {
            let band = d.apply_mask(&mut g, &wedges.mask(b)).unwrap();
            let y = freq::idct2(&mut g, &band).unwrap();
            acc.add_assign(g.value(y));
        }
        assert!(acc.max_abs_diff(&x) <= 1e-8, "dct K={k}");
    }

    // DWT: each sub-band inverted on its own, then summed
    let x4 = x.reshape(vec![1, 2, 16, 16]).unwrap();
    let mut g = Graph::<f64>::new();
    let xv = g.constant(x4.clone());
    let s = freq::dwt2(&mut g, xv).unwrap();
    let zero = g.constant(Tensor::zeros(vec![1, 2, 8, 8]));
    let mut acc = Tensor::zeros(x4.shape().to_vec());
    for keep in 0..4 {
        let pick = |i: usize, v| if i == keep { v } else { zero };
        let only = freq::SubbandSet {
            ll: pick(0, s.ll),
            lh: pick(1, s.lh),
            hl: pick(2, s.hl),
            hh: pick(3, s.hh),
        };
        let y = freq::idwt2(&mut g, &only).unwrap();
        acc.add_assign(g.value(y));
    }
    assert!(acc.max_abs_diff(&x4) <= 1e-8);
}

#[test]
fn low_frequency_input_stays_in_first_band() {
    let x = Tensor::full(vec![1, 8, 8], 0.7);
    let mut g = Graph::<f64>::new();
    let xv = g.constant(x.clone());
    let s = freq::fft2(&mut g, xv).unwrap();
    let s = freq::fftshift(&mut g, &s).unwrap();
    let d = freq::dct2(&mut g, xv).unwrap();
    let rings = freq::make_band_masks(MaskKind::Ring, 8, 8, 3).unwrap();
    let wedges = freq::make_band_masks(MaskKind::Wedge, 8, 8, 3).unwrap();
    for b in 0..3 {
        let f = s.apply_mask(&mut g, &rings.mask(b)).unwrap();
        let f = freq::ifft2(&mut g, &f).unwrap();
        let c = d.apply_mask(&mut g, &wedges.mask(b)).unwrap();
        let c = freq::idct2(&mut g, &c).unwrap();
        for y in [f, c] {
            let err = if b == 0 { g.value(y).max_abs_diff(&x) } else { g.value(y).max_abs() };
            assert!(err <= 1e-8, "band {b}: {err}");
        }
    }
}
