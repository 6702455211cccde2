#![allow(dead_code)]

use ian_core::ian::{IanModel, MdcMode, ModelConfig};
use ian_core::Tensor64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// 16×16 model small enough for finite differences.
pub fn tiny_config(mdc: MdcMode) -> ModelConfig {
    let mut c = ModelConfig::new(16, 8);
    c.g_width = 4;
    c.d_width = 4;
    c.mdc = mdc;
    c.mbd_kernels = 4;
    c.mbd_dim = 2;
    c
}

/// Tiny model with every parameter jittered off its initial value: the
/// zero head would make the adversarial terms flat, and zero biases put
/// activations on the leaky-relu kink.
pub fn tiny_model(seed: u64, mdc: MdcMode) -> IanModel<f64> {
    let mut r = rng(seed);
    let mut m = IanModel::new(tiny_config(mdc), &mut r).unwrap();
    let names: Vec<String> = m.params.keys().cloned().collect();
    for name in names {
        let mask = m.layout_of(&name);
        let p = m.params.get_mut(&name).unwrap();
        let noise = Tensor64::randn(p.shape().to_vec(), 0.1, &mut r);
        p.add_assign(&noise);
        if let Some(mask) = mask {
            *p = p.zip_map(&mask, |a, b| a * b).unwrap();
        }
    }
    m
}

/// Monte-Carlo `E_q[log q(z) - log p(z)]` for a diagonal Gaussian `q`.
pub fn kl_monte_carlo(mu: &[f64], logvar: &[f64], samples: usize, seed: u64) -> f64 {
    let mut r = rng(seed);
    let mut total = 0.0;
    for _ in 0..samples {
        let mut acc = 0.0;
        for (&m, &lv) in mu.iter().zip(logvar) {
            let e: f64 = StandardNormal.sample(&mut r);
            let sd = (0.5 * lv).exp();
            let z = m + sd * e;
            // log N(z; m, sd²) - log N(z; 0, 1); the 2π terms cancel
            acc += -0.5 * lv - 0.5 * e * e + 0.5 * z * z;
        }
        total += acc;
    }
    total / samples as f64
}

pub fn kl_closed_form(mu: &[f64], logvar: &[f64]) -> f64 {
    mu.iter()
        .zip(logvar)
        .map(|(&m, &lv)| -0.5 * (1.0 + lv - m * m - lv.exp()))
        .sum()
}

/// Nested-loop "same"-padded dilated cross-correlation.
pub fn naive_same_conv(x: &Tensor64, w: &Tensor64, dilation: usize) -> Tensor64 {
    let s = x.shape();
    let (n, c, h, wd) = (s[0], s[1], s[2], s[3]);
    let (o, f) = (w.shape()[0], w.shape()[2]);
    let pad = ((f - 1) * dilation) as isize / 2;
    let mut out = Tensor64::zeros([n, o, h, wd]);
    for b in 0..n {
        for oc in 0..o {
            for y in 0..h {
                for xx in 0..wd {
                    let mut acc = 0.0;
                    for ic in 0..c {
                        for i in 0..f {
                            for j in 0..f {
                                let iy = y as isize + (i * dilation) as isize - pad;
                                let ix = xx as isize + (j * dilation) as isize - pad;
                                if iy >= 0 && ix >= 0 && iy < h as isize && ix < wd as isize {
                                    acc += x.data()[((b * c + ic) * h + iy as usize) * wd + ix as usize]
                                        * w.data()[((oc * c + ic) * f + i) * f + j];
                                }
                            }
                        }
                    }
                    out.data_mut()[((b * o + oc) * h + y) * wd + xx] = acc;
                }
            }
        }
    }
    out
}

/// Σ_s k[·,s] ⊙ conv(x, W, dilation s), the per-scale definition of the block.
pub fn per_scale_oracle(x: &Tensor64, base: &Tensor64, k: &Tensor64) -> Tensor64 {
    let scales = k.shape()[1];
    let o = base.shape()[0];
    let mut acc: Option<Tensor64> = None;
    for s in 0..scales {
        let y = naive_same_conv(x, base, s + 1);
        let plane = y.shape()[2] * y.shape()[3];
        let scaled = Tensor64::from_fn(y.shape().to_vec(), |i| {
            let oc = (i / plane) % o;
            y.data()[i] * k.data()[oc * scales + s]
        });
        acc = Some(match acc {
            None => scaled,
            Some(a) => a.zip_map(&scaled, |p, q| p + q).unwrap(),
        });
    }
    acc.unwrap()
}
