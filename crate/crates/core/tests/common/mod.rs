//! Plain-loop reference ops shared by the integration tests.
#![allow(dead_code)]

use polyseg::Tensor;

/// Same-padded stride-1 convolution on a single `C x H x W` plane stack.
pub fn conv_same(x: &[f64], c: usize, h: usize, w: usize, weight: &Tensor, bias: &Tensor) -> Vec<f64> {
    let (o, ci, k, _) = weight.dims4().unwrap();
    assert_eq!(ci, c);
    let pad = (k / 2) as isize;
    let wd = weight.data();
    let mut out = vec![0.0; o * h * w];
    for oc in 0..o {
        for y in 0..h {
            for xx in 0..w {
                let mut acc = bias.data()[oc];
                for ic in 0..c {
                    for ky in 0..k {
                        for kx in 0..k {
                            let sy = y as isize + ky as isize - pad;
                            let sx = xx as isize + kx as isize - pad;
                            if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                                continue;
                            }
                            acc += wd[((oc * c + ic) * k + ky) * k + kx] * x[(ic * h + sy as usize) * w + sx as usize];
                        }
                    }
                }
                out[(oc * h + y) * w + xx] = acc;
            }
        }
    }
    out
}

/// Group norm with one group per `c / groups` channels, eps 1e-5.
pub fn group_norm(x: &[f64], c: usize, plane: usize, groups: usize, gamma: &[f64], beta: &[f64]) -> Vec<f64> {
    let per = c / groups;
    let mut out = vec![0.0; x.len()];
    for gi in 0..groups {
        let span = gi * per * plane..(gi + 1) * per * plane;
        let n = span.len() as f64;
        let mean = x[span.clone()].iter().sum::<f64>() / n;
        let var = x[span.clone()].iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        for i in span {
            let ch = i / plane;
            out[i] = (x[i] - mean) / (var + 1e-5).sqrt() * gamma[ch] + beta[ch];
        }
    }
    out
}

pub fn relu(v: &[f64]) -> Vec<f64> {
    v.iter().map(|&x| x.max(0.0)).collect()
}

pub fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

pub fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}
