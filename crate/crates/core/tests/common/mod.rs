//! Naive reference implementations used as test oracles. Each one is the
//! most literal loop form of its definition and shares no code with the
//! library.
#![allow(dead_code)]

use gcr_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type Matrix = Vec<Vec<f64>>;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

pub fn random_labels(rng: &mut ChaCha8Rng, n: usize, classes: usize) -> Vec<usize> {
    (0..n).map(|_| rng.random_range(0..classes)).collect()
}

/// Labels where every class in `0..classes` appears at least twice.
pub fn covering_labels(rng: &mut ChaCha8Rng, n: usize, classes: usize) -> Vec<usize> {
    assert!(n >= 2 * classes);
    let mut y: Vec<usize> = (0..n).map(|i| if i < 2 * classes { i / 2 } else { rng.random_range(0..classes) }).collect();
    for i in (1..n).rev() {
        y.swap(i, rng.random_range(0..=i));
    }
    y
}

pub fn rows(t: &Tensor) -> Matrix {
    (0..t.rows()).map(|i| t.row(i).to_vec()).collect()
}

pub fn to_matrix(n: usize, flat: &[f64]) -> Matrix {
    (0..n).map(|i| flat[i * n..(i + 1) * n].to_vec()).collect()
}

pub fn max_diff(a: &Matrix, b: &Matrix) -> f64 {
    let mut m: f64 = 0.0;
    for (ra, rb) in a.iter().zip(b) {
        assert_eq!(ra.len(), rb.len());
        for (x, y) in ra.iter().zip(rb) {
            m = m.max((x - y).abs());
        }
    }
    m
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for k in 0..a.len() {
        s += a[k] * b[k];
    }
    s
}

pub fn matmul(a: &Matrix, b: &Matrix) -> Matrix {
    let (m, k, n) = (a.len(), b.len(), b[0].len());
    let mut c = vec![vec![0.0; n]; m];
    for i in 0..m {
        for j in 0..n {
            for t in 0..k {
                c[i][j] += a[i][t] * b[t][j];
            }
        }
    }
    c
}

/// `max(0, cos)` for every pair, diagonal 1.
pub fn cosine_graph(x: &Matrix) -> Matrix {
    let n = x.len();
    let mut g = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..n {
            g[i][j] = if i == j {
                1.0
            } else {
                let c = dot(&x[i], &x[j]) / (dot(&x[i], &x[i]).sqrt() * dot(&x[j], &x[j]).sqrt());
                c.max(0.0)
            };
        }
    }
    g
}

pub fn softmax(z: &Matrix) -> Matrix {
    z.iter()
        .map(|row| {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
            let s: f64 = e.iter().sum();
            e.iter().map(|v| v / s).collect()
        })
        .collect()
}

pub fn prediction_graph(z: &Matrix) -> Matrix {
    cosine_graph(&softmax(z))
}

pub fn masked(s: &Matrix, labels: &[usize]) -> Matrix {
    let n = s.len();
    let mut p = s.clone();
    for i in 0..n {
        for j in 0..n {
            if labels[i] != labels[j] {
                p[i][j] = 0.0;
            }
        }
    }
    p
}

pub fn alignment(f: &Matrix, p: &Matrix) -> f64 {
    let n = f.len();
    let mut s = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            s += (f[i][j] - p[i][j]).powi(2);
        }
    }
    s
}

pub fn cross_entropy(z: &Matrix, labels: &[usize]) -> f64 {
    let p = softmax(z);
    let mut s = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        s -= p[i][y].ln();
    }
    s / labels.len() as f64
}

pub fn penalty(x: &Matrix, labels: &[usize], tau: f64, beta: f64) -> f64 {
    let n = x.len();
    let (mut s, mut zeta) = (0.0, 0.0);
    for i in 0..n {
        for j in i + 1..n {
            if labels[i] != labels[j] {
                continue;
            }
            zeta += 1.0;
            let c = dot(&x[i], &x[j]) / (dot(&x[i], &x[i]).sqrt() * dot(&x[j], &x[j]).sqrt());
            let theta = c.clamp(0.0, 1.0).acos();
            if theta < tau {
                s += (theta - tau).powi(2);
            }
        }
    }
    if zeta == 0.0 {
        0.0
    } else {
        beta * s / zeta
    }
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for k in 0..a.len() {
        s += (a[k] - b[k]).powi(2);
    }
    s.sqrt()
}

/// Textbook silhouette; singleton clusters contribute 0.
pub fn silhouette(x: &Matrix, labels: &[usize]) -> f64 {
    let n = x.len();
    let mut classes: Vec<usize> = labels.to_vec();
    classes.sort();
    classes.dedup();
    let mut total = 0.0;
    for i in 0..n {
        let own = labels.iter().filter(|&&y| y == labels[i]).count();
        if own == 1 {
            continue;
        }
        let mut a = 0.0;
        for j in 0..n {
            if j != i && labels[j] == labels[i] {
                a += dist(&x[i], &x[j]);
            }
        }
        a /= (own - 1) as f64;
        let mut b = f64::INFINITY;
        for &c in &classes {
            if c == labels[i] {
                continue;
            }
            let (mut s, mut k) = (0.0, 0);
            for j in 0..n {
                if labels[j] == c {
                    s += dist(&x[i], &x[j]);
                    k += 1;
                }
            }
            b = b.min(s / k as f64);
        }
        let m = a.max(b);
        if m > 0.0 {
            total += (b - a) / m;
        }
    }
    total / n as f64
}

pub fn separability(x: &Matrix, labels: &[usize]) -> f64 {
    let (mut intra, mut ni, mut inter, mut ne) = (0.0, 0, 0.0, 0);
    for i in 0..x.len() {
        for j in 0..x.len() {
            if i >= j {
                continue;
            }
            if labels[i] == labels[j] {
                intra += dist(&x[i], &x[j]);
                ni += 1;
            } else {
                inter += dist(&x[i], &x[j]);
                ne += 1;
            }
        }
    }
    (inter / ne as f64) / (intra / ni as f64)
}

pub fn confusion(preds: &[usize], labels: &[usize], c: usize) -> Matrix {
    let mut m = vec![vec![0.0; c]; c];
    for i in 0..c {
        let support = labels.iter().filter(|&&y| y == i).count();
        for j in 0..c {
            let hits = preds.iter().zip(labels).filter(|(&p, &y)| y == i && p == j).count();
            if support > 0 {
                m[i][j] = hits as f64 / support as f64;
            }
        }
    }
    m
}

/// `I - D^{-1/2} A D^{-1/2}` through explicit diagonal matrices.
pub fn normalized_laplacian(a: &Matrix) -> Matrix {
    let n = a.len();
    let mut d = vec![vec![0.0; n]; n];
    for i in 0..n {
        d[i][i] = 1.0 / a[i].iter().sum::<f64>().sqrt();
    }
    let norm = matmul(&matmul(&d, a), &d);
    let mut l = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..n {
            l[i][j] = if i == j { 1.0 } else { 0.0 } - norm[i][j];
        }
    }
    l
}

/// Within-class unbiased covariance traces averaged over classes, and
/// the mean squared distance of class means from the global mean.
pub fn intra_inter(x: &Matrix, labels: &[usize]) -> (f64, f64) {
    let d = x[0].len();
    let mut classes: Vec<usize> = labels.to_vec();
    classes.sort();
    classes.dedup();
    let mut global = vec![0.0; d];
    for row in x {
        for k in 0..d {
            global[k] += row[k] / x.len() as f64;
        }
    }
    let (mut intra, mut inter) = (0.0, 0.0);
    for &c in &classes {
        let members: Vec<&Vec<f64>> = x.iter().zip(labels).filter(|(_, &y)| y == c).map(|(r, _)| r).collect();
        let m = members.len() as f64;
        let mut mean = vec![0.0; d];
        for r in &members {
            for k in 0..d {
                mean[k] += r[k] / m;
            }
        }
        for k in 0..d {
            inter += (mean[k] - global[k]).powi(2);
        }
        if members.len() > 1 {
            let mut trace = 0.0;
            for k in 0..d {
                let mut cov = 0.0;
                for r in &members {
                    cov += (r[k] - mean[k]) * (r[k] - mean[k]);
                }
                trace += cov / (m - 1.0);
            }
            intra += trace;
        }
    }
    let c = classes.len() as f64;
    (intra / c, inter / c)
}

/// Direct cross-correlation with zero padding, stride 1.
pub fn conv2d(x: &Tensor, k: &Tensor, pad: usize) -> Tensor {
    let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (o, kh, kw) = (k.shape()[0], k.shape()[2], k.shape()[3]);
    let (oh, ow) = (h + 2 * pad - kh + 1, w + 2 * pad - kw + 1);
    let xv = |b: usize, ch: usize, i: isize, j: isize| {
        if i < 0 || j < 0 || i >= h as isize || j >= w as isize {
            0.0
        } else {
            x.data()[((b * c + ch) * h + i as usize) * w + j as usize]
        }
    };
    let mut out = vec![0.0; n * o * oh * ow];
    for b in 0..n {
        for f in 0..o {
            for i in 0..oh {
                for j in 0..ow {
                    let mut s = 0.0;
                    for ch in 0..c {
                        for u in 0..kh {
                            for v in 0..kw {
                                let xi = i as isize + u as isize - pad as isize;
                                let xj = j as isize + v as isize - pad as isize;
                                s += xv(b, ch, xi, xj) * k.data()[((f * c + ch) * kh + u) * kw + v];
                            }
                        }
                    }
                    out[((b * o + f) * oh + i) * ow + j] = s;
                }
            }
        }
    }
    Tensor::new(vec![n, o, oh, ow], out).unwrap()
}
