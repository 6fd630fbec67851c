#![allow(dead_code)]

use fdylka_core::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
}

/// Six-nested-loop cross-correlation with zero padding, stride, dilation and groups.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_loops(
    x: &Tensor,
    w: &Tensor,
    b: Option<&Tensor>,
    stride: (usize, usize),
    padding: (usize, usize),
    dilation: (usize, usize),
    groups: usize,
) -> Tensor {
    let (nb, cin, h, wd) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
    let (cout, cin_g, kh, kw) = (w.dim(0), w.dim(1), w.dim(2), w.dim(3));
    let cout_g = cout / groups;
    assert_eq!(cin_g * groups, cin);
    let oh = (h + 2 * padding.0 - dilation.0 * (kh - 1) - 1) / stride.0 + 1;
    let ow = (wd + 2 * padding.1 - dilation.1 * (kw - 1) - 1) / stride.1 + 1;
    let mut out = Tensor::zeros(&[nb, cout, oh, ow]);
    for n in 0..nb {
        for co in 0..cout {
            let grp = co / cout_g;
            for to in 0..oh {
                for fo in 0..ow {
                    let mut acc = b.map_or(0.0, |b| b.data()[co]);
                    for ci in 0..cin_g {
                        for i in 0..kh {
                            for j in 0..kw {
                                let ti = (to * stride.0 + i * dilation.0) as isize - padding.0 as isize;
                                let fi = (fo * stride.1 + j * dilation.1) as isize - padding.1 as isize;
                                if ti < 0 || fi < 0 || ti >= h as isize || fi >= wd as isize {
                                    continue;
                                }
                                acc += w.get(&[co, ci, i, j])
                                    * x.get(&[n, grp * cin_g + ci, ti as usize, fi as usize]);
                            }
                        }
                    }
                    out.set(&[n, co, to, fo], acc);
                }
            }
        }
    }
    out
}

/// Weighted-sum reduction with fixed random weights, so gradient checks see
/// a generic downstream gradient rather than all ones.
pub fn probe_weights(shape: &[usize], seed: u64) -> Tensor {
    let mut r = rng(seed ^ 0x5eed);
    uniform(shape, -1.0, 1.0, &mut r)
}
