#![allow(dead_code)]

//! Brute-force reference implementations shared by the integration tests.

use dipuq_core::noise::Image;
use dipuq_core::tensor::Tensor;

fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let mut i = i;
    if i < 0 {
        i = -i;
    }
    if i >= n {
        i = 2 * (n - 1) - i;
    }
    i as usize
}

pub fn conv_oracle(
    x: &Tensor<f64>,
    k: &Tensor<f64>,
    b: &Tensor<f64>,
    stride: usize,
    pad: usize,
) -> Tensor<f64> {
    let (ci, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (co, kh, kw) = (k.shape()[0], k.shape()[2], k.shape()[3]);
    let ho = (h + 2 * pad - kh) / stride + 1;
    let wo = (w + 2 * pad - kw) / stride + 1;
    let mut out = vec![0.0; co * ho * wo];
    for o in 0..co {
        for y in 0..ho {
            for xo in 0..wo {
                let mut acc = b.data()[o];
                for c in 0..ci {
                    for i in 0..kh {
                        for j in 0..kw {
                            let r = reflect((y * stride + i) as isize - pad as isize, h);
                            let s = reflect((xo * stride + j) as isize - pad as isize, w);
                            acc += k.data()[((o * ci + c) * kh + i) * kw + j]
                                * x.data()[(c * h + r) * w + s];
                        }
                    }
                }
                out[(o * ho + y) * wo + xo] = acc;
            }
        }
    }
    Tensor::new([co, ho, wo], out).unwrap()
}

fn gaussian_window() -> Vec<Vec<f64>> {
    let mut w = vec![vec![0.0; 11]; 11];
    let mut total = 0.0;
    for (i, row) in w.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            let (di, dj) = (i as f64 - 5.0, j as f64 - 5.0);
            *v = (-(di * di + dj * dj) / (2.0 * 1.5 * 1.5)).exp();
            total += *v;
        }
    }
    w.iter_mut().flatten().for_each(|v| *v /= total);
    w
}

pub fn ssim_oracle(a: &Image, b: &Image) -> f64 {
    let win = gaussian_window();
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let (w, h) = (a.width(), a.height());
    let mut total = 0.0;
    let mut count = 0;
    for r in 0..=h - 11 {
        for c in 0..=w - 11 {
            let (mut ma, mut mb) = (0.0, 0.0);
            for i in 0..11 {
                for j in 0..11 {
                    ma += win[i][j] * a.get(r + i, c + j);
                    mb += win[i][j] * b.get(r + i, c + j);
                }
            }
            let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
            for i in 0..11 {
                for j in 0..11 {
                    let (x, y) = (a.get(r + i, c + j) - ma, b.get(r + i, c + j) - mb);
                    va += win[i][j] * x * x;
                    vb += win[i][j] * y * y;
                    cov += win[i][j] * x * y;
                }
            }
            total += (2.0 * ma * mb + c1) * (2.0 * cov + c2)
                / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            count += 1;
        }
    }
    total / count as f64
}

pub fn calibration_oracle(u: &[f64], e: &[f64], bins: usize) -> (Vec<(f64, f64, usize)>, f64) {
    let max = u.iter().cloned().fold(0.0, f64::max);
    let mut order: Vec<usize> = (0..u.len()).collect();
    order.sort_by(|&i, &j| u[i].total_cmp(&u[j]));
    let mut rows = Vec::new();
    let mut cursor = 0;
    for b in 0..bins {
        let upper = (b + 1) as f64 * max / bins as f64;
        let mut members = Vec::new();
        while cursor < order.len() && (b + 1 == bins || u[order[cursor]] < upper) {
            members.push(order[cursor]);
            cursor += 1;
        }
        members.sort_unstable();
        let n = members.len();
        if n == 0 {
            rows.push((0.0, 0.0, 0));
        } else {
            let mu = members.iter().map(|&i| u[i]).sum::<f64>() / n as f64;
            let me = members.iter().map(|&i| e[i]).sum::<f64>() / n as f64;
            rows.push((mu, me, n));
        }
    }
    let total = u.len() as f64;
    let uce = rows.iter().map(|(mu, me, n)| *n as f64 / total * (me - mu).abs()).sum();
    (rows, uce)
}
