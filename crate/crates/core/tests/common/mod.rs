//! Plain-loop reference implementations shared by the oracle tests.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use ridnet_core::Tensor;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

/// Dense `[n][c][h][w]` array.
#[derive(Debug, Clone, PartialEq)]
pub struct Arr {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub v: Vec<f64>,
}

impl Arr {
    pub fn zeros(n: usize, c: usize, h: usize, w: usize) -> Self {
        Arr {
            n,
            c,
            h,
            w,
            v: vec![0.0; n * c * h * w],
        }
    }

    pub fn from_tensor<T: ridnet_core::Scalar>(t: &Tensor<T>) -> Self {
        let s = t.shape();
        Arr {
            n: s[0],
            c: s[1],
            h: s[2],
            w: s[3],
            v: t.data().iter().map(|x| x.as_f64()).collect(),
        }
    }

    pub fn at(&self, n: usize, c: usize, y: usize, x: usize) -> f64 {
        self.v[((n * self.c + c) * self.h + y) * self.w + x]
    }

    pub fn at_mut(&mut self, n: usize, c: usize, y: usize, x: usize) -> &mut f64 {
        let (cc, h, w) = (self.c, self.h, self.w);
        &mut self.v[((n * cc + c) * h + y) * w + x]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Arr {
            v: self.v.iter().map(|&x| f(x)).collect(),
            ..self.clone()
        }
    }

    pub fn add(&self, o: &Arr) -> Self {
        assert_eq!(self.v.len(), o.v.len());
        Arr {
            v: self.v.iter().zip(&o.v).map(|(a, b)| a + b).collect(),
            ..self.clone()
        }
    }
}

/// Seven nested loops, zero padding `d·(k−1)/2`.
pub fn conv(
    x: &Arr,
    weight: &[f64],
    bias: Option<&[f64]>,
    out_ch: usize,
    k: usize,
    d: usize,
) -> Arr {
    let pad = (d * (k - 1) / 2) as isize;
    let mut out = Arr::zeros(x.n, out_ch, x.h, x.w);
    for n in 0..x.n {
        for o in 0..out_ch {
            for y in 0..x.h {
                for xx in 0..x.w {
                    let mut acc = bias.map_or(0.0, |b| b[o]);
                    for c in 0..x.c {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = y as isize + (ky * d) as isize - pad;
                                let ix = xx as isize + (kx * d) as isize - pad;
                                if iy < 0 || ix < 0 || iy >= x.h as isize || ix >= x.w as isize {
                                    continue;
                                }
                                let wv = weight[((o * x.c + c) * k + ky) * k + kx];
                                acc += wv * x.at(n, c, iy as usize, ix as usize);
                            }
                        }
                    }
                    *out.at_mut(n, o, y, xx) = acc;
                }
            }
        }
    }
    out
}

pub fn relu(x: &Arr) -> Arr {
    x.map(|v| v.max(0.0))
}

pub fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

pub fn soft_shrink(v: f64, lambda: f64) -> f64 {
    v.signum() * (v.abs() - lambda).max(0.0)
}

pub fn mean_pool(x: &Arr) -> Arr {
    let mut out = Arr::zeros(x.n, x.c, 1, 1);
    for n in 0..x.n {
        for c in 0..x.c {
            let mut s = 0.0;
            for y in 0..x.h {
                for xx in 0..x.w {
                    s += x.at(n, c, y, xx);
                }
            }
            *out.at_mut(n, c, 0, 0) = s / (x.h * x.w) as f64;
        }
    }
    out
}

pub fn concat(a: &Arr, b: &Arr) -> Arr {
    let mut out = Arr::zeros(a.n, a.c + b.c, a.h, a.w);
    for n in 0..a.n {
        for c in 0..a.c + b.c {
            for y in 0..a.h {
                for x in 0..a.w {
                    *out.at_mut(n, c, y, x) = if c < a.c {
                        a.at(n, c, y, x)
                    } else {
                        b.at(n, c - a.c, y, x)
                    };
                }
            }
        }
    }
    out
}

pub fn scale_channels(x: &Arr, gate: &Arr) -> Arr {
    let mut out = x.clone();
    for n in 0..x.n {
        for c in 0..x.c {
            for y in 0..x.h {
                for xx in 0..x.w {
                    *out.at_mut(n, c, y, xx) *= gate.at(n, c, 0, 0);
                }
            }
        }
    }
    out
}
