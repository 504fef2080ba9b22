//! Randomized forward-oracle sweep: every dense kernel against its naive
//! loop reference, 120+ cases with values bounded by 4.

mod common;

use lsformer_core::rng::XorShift64;
use lsformer_core::tensor::conv::ConvParams;
use lsformer_core::tensor::{Tape, Tensor};

fn rand(shape: &[usize], rng: &mut XorShift64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.uniform(-4.0, 4.0)).collect()).unwrap()
}

/// Naive six-loop convolution (groups included).
fn conv_naive(
    x: &Tensor,
    w: &Tensor,
    stride: usize,
    padding: usize,
    groups: usize,
) -> Tensor {
    let (n, c_in, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (c_out, c_in_g, kh, kw) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
    let ho = (h + 2 * padding - kh) / stride + 1;
    let wo = (wd + 2 * padding - kw) / stride + 1;
    let c_out_g = c_out / groups;
    let mut out = vec![0.0f32; n * c_out * ho * wo];
    for ni in 0..n {
        for co in 0..c_out {
            let gi = co / c_out_g;
            for oh in 0..ho {
                for ow in 0..wo {
                    let mut acc = 0.0f32;
                    for ci in 0..c_in_g {
                        let cf = gi * (c_in / groups) + ci;
                        for dh in 0..kh {
                            for dw in 0..kw {
                                let ih = (oh * stride + dh) as isize - padding as isize;
                                let iw = (ow * stride + dw) as isize - padding as isize;
                                if ih < 0 || iw < 0 || ih >= h as isize || iw >= wd as isize {
                                    continue;
                                }
                                acc += x.at(&[ni, cf, ih as usize, iw as usize])
                                    * w.at(&[co, ci, dh, dw]);
                            }
                        }
                    }
                    out[((ni * c_out + co) * ho + oh) * wo + ow] = acc;
                }
            }
        }
    }
    Tensor::new(&[n, c_out, ho, wo], out).unwrap()
}

#[test]
fn forward_kernels_match_naive_oracles_over_100_cases() {
    let mut rng = XorShift64::new(2024);
    let tape = Tape::no_grad();
    let mut cases = 0usize;

    // 48 convolution cases over kernel/stride/padding/groups.
    for _ in 0..12 {
        for (stride, padding) in [(1, 0), (1, 1), (2, 0), (2, 1)] {
            let groups = [1usize, 2][rng.below(2)];
            let c_in = 2 * groups;
            let c_out = 2 * groups;
            let k = [1usize, 3][rng.below(2)];
            let h = 3 + rng.below(4);
            let w = 3 + rng.below(4);
            if h + 2 * padding < k || w + 2 * padding < k {
                continue;
            }
            let x = rand(&[2, c_in, h, w], &mut rng);
            let wt = rand(&[c_out, c_in / groups, k, k], &mut rng);
            let expect = conv_naive(&x, &wt, stride, padding, groups);
            let p = ConvParams::from_weight(wt, None, stride, padding, 1, groups).unwrap();
            let got = tape.conv2d(&x, &p).unwrap();
            for (a, b) in got.data().iter().zip(expect.data()) {
                assert!((a - b).abs() <= 1e-5 * 36.0, "conv {a} vs {b}");
            }
            cases += 1;
        }
    }

    // 48 batched matmul cases.
    for _ in 0..48 {
        let (b, m, k, p) = (
            1 + rng.below(3),
            1 + rng.below(5),
            1 + rng.below(5),
            1 + rng.below(5),
        );
        let a = rand(&[b, m, k], &mut rng);
        let bt = rand(&[b, k, p], &mut rng);
        let got = tape.matmul_batched(&a, &bt).unwrap();
        for bi in 0..b {
            for i in 0..m {
                for j in 0..p {
                    let mut acc = 0.0f32;
                    for l in 0..k {
                        acc += a.at(&[bi, i, l]) * bt.at(&[bi, l, j]);
                    }
                    assert!((got.at(&[bi, i, j]) - acc).abs() <= 1e-4);
                }
            }
        }
        cases += 1;
    }

    // 24 elementwise / reduction cases against scalar loops.
    for _ in 0..24 {
        let n = 1 + rng.below(40);
        let a = rand(&[n], &mut rng);
        let b = rand(&[n], &mut rng);
        let sum = tape.add(&a, &b).unwrap();
        let prod = tape.mul(&a, &b).unwrap();
        let sg = tape.sigmoid(&a);
        for i in 0..n {
            assert_eq!(sum.data()[i], a.data()[i] + b.data()[i]);
            assert_eq!(prod.data()[i], a.data()[i] * b.data()[i]);
            let expect = 1.0 / (1.0 + (-a.data()[i] as f64).exp());
            assert!((sg.data()[i] as f64 - expect).abs() <= 1e-6);
        }
        let total = tape.sum_all(&a);
        let expect: f64 = a.data().iter().map(|&v| v as f64).sum();
        assert!((total.scalar_value() as f64 - expect).abs() <= 1e-3);
        cases += 1;
    }

    assert!(cases >= 100, "only {cases} oracle cases ran");
}
