//! Convolution forward pass against a direct nested-loop reference.

use eta_tensor::{Graph, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

#[allow(clippy::too_many_arguments)]
fn direct(x: &[f64], dims: (usize, usize, usize, usize), w: &[f64], c_out: usize, k: usize, b: &[f64], stride: usize, pad: usize) -> Vec<f64> {
    let (n, c, h, wd) = dims;
    let ho = (h + 2 * pad - k) / stride + 1;
    let wo = (wd + 2 * pad - k) / stride + 1;
    let mut out = vec![0.0; n * c_out * ho * wo];
    for bi in 0..n {
        for co in 0..c_out {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut s = b[co];
                    for ci in 0..c {
                        for i in 0..k {
                            for j in 0..k {
                                let iy = (oy * stride + i) as isize - pad as isize;
                                let ix = (ox * stride + j) as isize - pad as isize;
                                if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                                    s += w[((co * c + ci) * k + i) * k + j] * x[((bi * c + ci) * h + iy as usize) * wd + ix as usize];
                                }
                            }
                        }
                    }
                    out[((bi * c_out + co) * ho + oy) * wo + ox] = s;
                }
            }
        }
    }
    out
}

#[test]
fn forward_matches_direct_convolution() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    // (n, c_in, h, w, c_out, k, stride, pad); the last case spans several
    // unfolding chunks.
    let cases = [
        (1, 1, 5, 5, 1, 3, 1, 1),
        (3, 2, 7, 6, 4, 3, 2, 1),
        (2, 3, 8, 8, 2, 5, 2, 2),
        (2, 2, 6, 9, 3, 1, 1, 0),
        (4, 1, 5, 5, 2, 5, 3, 0),
        (9, 16, 64, 64, 2, 3, 1, 1),
    ];
    for (n, c, h, wd, c_out, k, stride, pad) in cases {
        let x = rand_vec(&mut rng, n * c * h * wd);
        let w = rand_vec(&mut rng, c_out * c * k * k);
        let b = rand_vec(&mut rng, c_out);
        let mut g = Graph::<f64>::new();
        let xv = g.constant(Tensor::from_vec(&[n, c, h, wd], x.clone()));
        let wv = g.constant(Tensor::from_vec(&[c_out, c, k, k], w.clone()));
        let bv = g.constant(Tensor::from_vec(&[c_out], b.clone()));
        let y = g.conv2d(xv, wv, Some(bv), stride, pad);
        let want = direct(&x, (n, c, h, wd), &w, c_out, k, &b, stride, pad);
        let got = g.value(y).data();
        assert_eq!(got.len(), want.len());
        let err = got.iter().zip(&want).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(err < 1e-12, "case {:?}: max abs err {err}", (n, c, h, wd, c_out, k, stride, pad));
    }
}
