//! Independent 64-bit reference implementations used as test oracles.
//! Written directly from the textbook definitions, sharing no code with the
//! library.
#![allow(dead_code)]

pub const EPS: f64 = 1e-5;

/// A dense f64 array in row-major order.
#[derive(Clone, Debug, PartialEq)]
pub struct Arr {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Arr {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), data.len(), "shape {shape:?}");
        Self { shape, data }
    }

    pub fn from_f32(shape: &[usize], data: &[f32]) -> Self {
        Self::new(shape.to_vec(), data.iter().map(|&v| v as f64).collect())
    }

    pub fn to_f32(&self) -> Vec<f32> {
        self.data.iter().map(|&v| v as f32).collect()
    }

    fn at4(&self, a: usize, b: usize, c: usize, d: usize) -> f64 {
        let s = &self.shape;
        self.data[((a * s[1] + b) * s[2] + c) * s[3] + d]
    }
}

/// `y[n,o,i,j] = b[o] + Σ_{c∈group(o),p,q} w[o,c',p,q]·x[n,c,i·s+p−pad,j·s+q−pad]`.
pub fn conv2d(x: &Arr, w: &Arr, b: Option<&[f64]>, stride: usize, pad: usize, groups: usize) -> Arr {
    let (n, cin, h, wd) = (x.shape[0], x.shape[1], x.shape[2], x.shape[3]);
    let (cout, cin_g, kh, kw) = (w.shape[0], w.shape[1], w.shape[2], w.shape[3]);
    assert_eq!(cin_g * groups, cin);
    let cout_g = cout / groups;
    let ho = (h + 2 * pad - kh) / stride + 1;
    let wo = (wd + 2 * pad - kw) / stride + 1;
    let mut out = vec![0.0; n * cout * ho * wo];
    for ni in 0..n {
        for o in 0..cout {
            let g = o / cout_g;
            for i in 0..ho {
                for j in 0..wo {
                    let mut acc = b.map_or(0.0, |b| b[o]);
                    for cl in 0..cin_g {
                        let c = g * cin_g + cl;
                        for p in 0..kh {
                            for q in 0..kw {
                                let (r, s) = ((i * stride + p) as isize - pad as isize, (j * stride + q) as isize - pad as isize);
                                if r < 0 || s < 0 || r >= h as isize || s >= wd as isize {
                                    continue;
                                }
                                acc += w.at4(o, cl, p, q) * x.at4(ni, c, r as usize, s as usize);
                            }
                        }
                    }
                    out[((ni * cout + o) * ho + i) * wo + j] = acc;
                }
            }
        }
    }
    Arr::new(vec![n, cout, ho, wo], out)
}

/// `y = x·Wᵀ + b` with `W: [out, in]`.
pub fn linear(x: &Arr, w: &Arr, b: Option<&[f64]>) -> Arr {
    let (n, fin) = (x.shape[0], x.shape[1]);
    let fout = w.shape[0];
    let mut out = vec![0.0; n * fout];
    for i in 0..n {
        for o in 0..fout {
            let mut acc = b.map_or(0.0, |b| b[o]);
            for k in 0..fin {
                acc += x.data[i * fin + k] * w.data[o * fin + k];
            }
            out[i * fout + o] = acc;
        }
    }
    Arr::new(vec![n, fout], out)
}

/// Block-diagonal linear map: output block `g` reads input block `g` only.
/// `w: [out, in/groups]`.
pub fn grouped_linear(x: &Arr, w: &Arr, b: Option<&[f64]>, groups: usize) -> Arr {
    let (n, fin) = (x.shape[0], x.shape[1]);
    let (fout, blk_in) = (w.shape[0], w.shape[1]);
    let blk_out = fout / groups;
    assert_eq!(blk_in * groups, fin);
    let mut out = vec![0.0; n * fout];
    for i in 0..n {
        for o in 0..fout {
            let g = o / blk_out;
            let mut acc = b.map_or(0.0, |b| b[o]);
            for k in 0..blk_in {
                acc += x.data[i * fin + g * blk_in + k] * w.data[o * blk_in + k];
            }
            out[i * fout + o] = acc;
        }
    }
    Arr::new(vec![n, fout], out)
}

pub fn relu(x: &Arr) -> Arr {
    Arr::new(x.shape.clone(), x.data.iter().map(|&v| v.max(0.0)).collect())
}

pub fn maxpool2d(x: &Arr, k: usize, stride: usize) -> Arr {
    let (n, c, h, w) = (x.shape[0], x.shape[1], x.shape[2], x.shape[3]);
    let (ho, wo) = ((h - k) / stride + 1, (w - k) / stride + 1);
    let mut out = Vec::with_capacity(n * c * ho * wo);
    for a in 0..n {
        for b in 0..c {
            for i in 0..ho {
                for j in 0..wo {
                    let mut m = f64::NEG_INFINITY;
                    for p in 0..k {
                        for q in 0..k {
                            m = m.max(x.at4(a, b, i * stride + p, j * stride + q));
                        }
                    }
                    out.push(m);
                }
            }
        }
    }
    Arr::new(vec![n, c, ho, wo], out)
}

/// Normalizes over sets of flat indices with biased variance, then applies
/// a per-channel affine map.
fn normalize_sets(x: &Arr, sets: &[Vec<usize>], gamma: &[f64], beta: &[f64]) -> Arr {
    let c = x.shape[1];
    let inner: usize = x.shape[2..].iter().product();
    let mut out = vec![0.0; x.data.len()];
    for set in sets {
        let m = set.iter().map(|&i| x.data[i]).sum::<f64>() / set.len() as f64;
        let v = set.iter().map(|&i| (x.data[i] - m).powi(2)).sum::<f64>() / set.len() as f64;
        for &i in set {
            let ch = (i / inner) % c;
            out[i] = gamma[ch] * (x.data[i] - m) / (v + EPS).sqrt() + beta[ch];
        }
    }
    Arr::new(x.shape.clone(), out)
}

/// Training-mode batch norm: statistics per channel over batch and space.
pub fn batch_norm(x: &Arr, gamma: &[f64], beta: &[f64]) -> Arr {
    let (n, c) = (x.shape[0], x.shape[1]);
    let inner: usize = x.shape[2..].iter().product();
    let sets: Vec<Vec<usize>> = (0..c)
        .map(|ch| (0..n).flat_map(|i| (0..inner).map(move |s| (i * c + ch) * inner + s)).collect())
        .collect();
    normalize_sets(x, &sets, gamma, beta)
}

/// Group norm: statistics per (sample, channel group).
pub fn group_norm(x: &Arr, gamma: &[f64], beta: &[f64], groups: usize) -> Arr {
    let (n, c) = (x.shape[0], x.shape[1]);
    let inner: usize = x.shape[2..].iter().product();
    let per = c / groups;
    let mut sets = Vec::new();
    for i in 0..n {
        for g in 0..groups {
            sets.push((g * per..(g + 1) * per).flat_map(|ch| (0..inner).map(move |s| (i * c + ch) * inner + s)).collect());
        }
    }
    normalize_sets(x, &sets, gamma, beta)
}

/// Mean over rows of `log Σ exp(z) − z[label]`.
pub fn cross_entropy(z: &Arr, labels: &[usize]) -> f64 {
    let (n, c) = (z.shape[0], z.shape[1]);
    let mut total = 0.0;
    for i in 0..n {
        let row = &z.data[i * c..(i + 1) * c];
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        total += lse - row[labels[i]];
    }
    total / n as f64
}

/// Central differences `(f(x+h) − f(x−h)) / 2h` for every coordinate.
pub fn central_diff(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            probe[i] = x[i] + h;
            let up = f(&probe);
            probe[i] = x[i] - h;
            let down = f(&probe);
            probe[i] = x[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)`, or the absolute norm when both are ~0.
pub fn relative_error(a: &[f32], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let diff = a.iter().zip(b).map(|(&x, &y)| (x as f64 - y).powi(2)).sum::<f64>().sqrt();
    let na = a.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
    let nb = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    let scale = na.max(nb);
    if scale < 1e-12 {
        diff
    } else {
        diff / scale
    }
}

/// Weighted sum `Σ r·y`, the scalar probe used for gradient checks.
pub fn dot(y: &Arr, r: &[f64]) -> f64 {
    y.data.iter().zip(r).map(|(a, b)| a * b).sum()
}

/// Uniform-average oracle over models given as flat vectors.
pub fn mean_of(vectors: &[Vec<f64>]) -> Vec<f64> {
    let n = vectors.len() as f64;
    let mut out = vec![0.0; vectors[0].len()];
    for v in vectors {
        for (o, x) in out.iter_mut().zip(v) {
            *o += x / n;
        }
    }
    out
}
pub mod gradcheck;
pub mod criteria;
