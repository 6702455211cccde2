mod common;

use common::{rng, tiny_model};
use ian_core::editor::*;
use ian_core::graph::{Graph, Var};
use ian_core::ian::MdcMode;
use ian_core::{Result, Tensor64};
use proptest::prelude::*;

/// Unit-space output `W z + b` with `W: [C·H·W, latent]`.
struct Linear {
    shape: [usize; 3],
    w: Tensor64,
    b: Tensor64,
}

impl LatentGenerator<f64> for Linear {
    fn latent_dim(&self) -> usize {
        self.w.shape()[1]
    }
    fn image_shape(&self) -> [usize; 3] {
        self.shape
    }
    fn generate_on(&self, g: &mut Graph<f64>, z: Var) -> Result<Var> {
        let w = g.constant(self.w.clone());
        let b = g.constant(self.b.clone());
        let y = g.dense(z, w, Some(b))?;
        let y = g.mul_scalar(y, 2.0);
        let y = g.add_scalar(y, -1.0);
        let [c, h, wd] = self.shape;
        g.reshape(y, [1, c, h, wd])
    }
    fn encode_image(&self, _x: &Tensor64) -> Result<(Vec<f64>, Vec<f64>)> {
        Ok((vec![0.0; self.latent_dim()], vec![0.0; self.latent_dim()]))
    }
}

fn one_pixel() -> Linear {
    Linear {
        shape: [3, 1, 1],
        w: Tensor64::ones([3, 1]),
        b: Tensor64::zeros([3]),
    }
}

fn brush(x: f64, y: f64, radius: f64, color: [f64; 3], step: f64) -> Brush {
    Brush { x, y, radius, color, step }
}

#[test]
fn one_pixel_linear_generator_gradient() {
    let g = brush_gradient(&one_pixel(), &[0.0], &brush(0.0, 0.0, 1.0, [1.0; 3], 1.0)).unwrap();
    assert!((g[0] - 2.0).abs() < 1e-12);
    // already at the brush color
    let g = brush_gradient(&one_pixel(), &[0.25], &brush(0.0, 0.0, 1.0, [0.25; 3], 1.0)).unwrap();
    assert_eq!(g, vec![0.0]);
    // disc entirely off the image
    let g = brush_gradient(&one_pixel(), &[0.0], &brush(50.0, 50.0, 2.0, [1.0; 3], 1.0)).unwrap();
    assert_eq!(g, vec![0.0]);
}

fn random_image(seed: u64) -> Tensor64 {
    Tensor64::uniform([3, 16, 16], 0.0, 1.0, &mut rng(seed))
}

#[test]
fn brush_gradient_matches_finite_differences() {
    let model = tiny_model(30, MdcMode::Standard);
    let mut r = rng(31);
    for trial in 0..5 {
        let z = Tensor64::randn([8], 1.0, &mut r).into_data();
        let b = brush(3.0 + 2.0 * trial as f64, 7.0, 3.0, [0.9, 0.2, 0.4], 0.1);
        let analytic = brush_gradient(&model, &z, &b).unwrap();
        let loss = |z: &[f64]| patch_loss_and_grad(&model, z, &b, false).unwrap().unwrap().0;
        for i in 0..z.len() {
            let (mut up, mut dn) = (z.clone(), z.clone());
            up[i] += 1e-5;
            dn[i] -= 1e-5;
            let numeric = -(loss(&up) - loss(&dn)) / 2e-5;
            let err = (analytic[i] - numeric).abs() / numeric.abs().max(1.0);
            assert!(err < 1e-4, "trial {trial} latent {i}: {err}");
        }
    }
}

#[test]
fn brush_validation() {
    assert!(brush(0.0, 0.0, 0.5, [0.0; 3], 0.1).validate().is_err());
    assert!(brush(0.0, 0.0, 2.0, [1.5, 0.0, 0.0], 0.1).validate().is_err());
    assert!(brush(0.0, 0.0, 2.0, [0.0; 3], -1.0).validate().is_err());
    assert!(brush(0.0, 0.0, 2.0, [0.0; 3], 0.0).validate().is_ok());
}

#[test]
fn null_steps_change_nothing() {
    let model = tiny_model(32, MdcMode::Standard);
    let mut s = EditSession::new(&model, random_image(33), 0.5).unwrap();
    let start = s.output().clone();
    let b = brush(8.0, 8.0, 4.0, [1.0, 0.0, 0.0], 0.0);
    s.apply_brush(&model, &b).unwrap();
    assert_eq!(s.output(), &start);
    let once = s.clone();
    s.apply_brush(&model, &b).unwrap();
    assert_eq!(s.output(), once.output());
    assert_eq!(s.latents(), once.latents());
}

#[test]
fn small_steps_descend() {
    let model = tiny_model(34, MdcMode::Standard);
    let s = EditSession::new(&model, random_image(35), 0.5).unwrap();
    let b = brush(6.0, 9.0, 4.0, [0.1, 0.8, 0.3], 0.0);
    let before = s.patch_loss(&model, &b).unwrap().unwrap();
    let improved = [1e-3, 1e-2, 1e-1, 1.0].iter().any(|&step| {
        let mut t = s.clone();
        t.apply_brush(&model, &Brush { step, ..b }).unwrap();
        t.patch_loss(&model, &b).unwrap().unwrap() < before
    });
    assert!(improved);
}

#[test]
fn zero_gradient_stroke_leaves_output_alone() {
    let model = Linear {
        shape: [3, 4, 4],
        w: Tensor64::full([48, 2], 0.1),
        b: Tensor64::full([48], 0.3),
    };
    let x = Tensor64::uniform([3, 4, 4], 0.0, 1.0, &mut rng(36));
    let mut s = EditSession::new(&model, x, 0.0).unwrap();
    let before = s.output().clone();
    // output at z = 0 is 0.3 everywhere: painting 0.3 has zero gradient
    s.apply_brush(&model, &brush(1.0, 1.0, 2.0, [0.3; 3], 0.5)).unwrap();
    assert_eq!(s.output(), &before);
}

#[test]
fn mask_cases() {
    let zero = Tensor64::zeros([3, 5, 5]);
    assert!(compute_mask(&zero, 2.0).unwrap().data().iter().all(|&v| v == 0.0));

    let mut spike = Tensor64::zeros([3, 5, 5]);
    for c in 0..3 {
        spike.data_mut()[c * 25 + 12] = if c == 1 { -1.5 } else { 1.5 };
    }
    let m = compute_mask(&spike, 0.0).unwrap();
    for (i, &v) in m.data().iter().enumerate() {
        assert_eq!(v, if i == 12 { 1.0 } else { 0.0 });
    }
}

#[test]
fn blur_matches_direct_two_dimensional_gaussian() {
    let sigma: f64 = 2.0;
    let k = gaussian_kernel(sigma);
    assert!((k.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    let (h, w) = (11, 13);
    let delta = Tensor64::randn([3, h, w], 0.2, &mut rng(37));
    let got = compute_mask(&delta, sigma).unwrap();

    let r = (3.0 * sigma).ceil() as isize;
    let mut weights = Vec::new();
    for dy in -r..=r {
        for dx in -r..=r {
            weights.push(((dy, dx), (-((dx * dx + dy * dy) as f64) / (2.0 * sigma * sigma)).exp()));
        }
    }
    let total: f64 = weights.iter().map(|(_, v)| v).sum();
    let plane = h * w;
    let mean = |y: usize, x: usize| (0..3).map(|c| delta.data()[c * plane + y * w + x].abs()).sum::<f64>() / 3.0;
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for &((dy, dx), v) in &weights {
                let yy = (y as isize + dy).clamp(0, h as isize - 1) as usize;
                let xx = (x as isize + dx).clamp(0, w as isize - 1) as usize;
                acc += v / total * mean(yy, xx);
            }
            assert!((got.data()[y * w + x] - acc.min(1.0)).abs() < 1e-6);
        }
    }
}

proptest! {
    #[test]
    fn mask_stays_in_unit_range(vals in prop::collection::vec(-1e3f64..1e3, 48), sigma in 0.0f64..3.0) {
        let d = Tensor64::new([3, 4, 4], vals).unwrap();
        let m = compute_mask(&d, sigma).unwrap();
        prop_assert!(m.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }
}

#[test]
fn transfer_identities() {
    let mut r = rng(38);
    let x = Tensor64::uniform([3, 6, 6], 0.0, 1.0, &mut r);
    let xhat = Tensor64::uniform([3, 6, 6], 0.0, 1.0, &mut r);
    let delta = Tensor64::randn([3, 6, 6], 0.3, &mut r);
    let zero = Tensor64::zeros([3, 6, 6]);

    let m0 = compute_mask(&zero, 1.0).unwrap();
    assert_eq!(transfer_edit(&x, &xhat, &zero, &m0).unwrap(), x);
    assert_eq!(transfer_edit(&x, &xhat, &delta, &Tensor64::zeros([6, 6])).unwrap(), x);
    let full = transfer_edit(&x, &xhat, &delta, &Tensor64::ones([6, 6])).unwrap();
    assert_eq!(full, xhat.zip_map(&delta, |a, b| a + b).unwrap());

    // agrees with the textbook arrangement for fractional masks
    let m = Tensor64::uniform([6, 6], 0.0, 1.0, &mut r);
    let y = transfer_edit(&x, &xhat, &delta, &m).unwrap();
    for i in 0..y.len() {
        let mm = m.data()[i % 36];
        let want = xhat.data()[i] + mm * delta.data()[i] + (1.0 - mm) * (x.data()[i] - xhat.data()[i]);
        assert!((y.data()[i] - want).abs() < 1e-12);
    }
}

#[test]
fn fresh_session_output_is_the_photo() {
    let model = tiny_model(39, MdcMode::Standard);
    let x = random_image(40);
    let s = EditSession::new(&model, x.clone(), 0.5).unwrap();
    assert_eq!(s.output(), &x);
    assert!(s.delta().data().iter().all(|&v| v == 0.0));
    assert_eq!(s.latents(), s.posterior().0);
}

#[test]
fn latent_edits_undo_and_reset() {
    let model = tiny_model(41, MdcMode::Standard);
    let x = random_image(42);
    let mut s = EditSession::new(&model, x.clone(), 0.5).unwrap();
    let start = s.clone();

    let v = s.latents()[3];
    s.set_latent(&model, 3, v).unwrap();
    assert_eq!(s.output(), start.output());

    let before = s.clone();
    s.set_latent(&model, 2, 2.5).unwrap();
    assert_ne!(s.output(), before.output());
    assert!(s.undo(&model).unwrap());
    assert_eq!(s, before);

    assert!(s.set_latent(&model, 8, 0.0).is_err());
    assert!(s.set_latent(&model, 0, f64::NAN).is_err());

    s.set_latent(&model, 1, -2.0).unwrap();
    s.apply_brush(&model, &brush(4.0, 4.0, 3.0, [1.0, 1.0, 0.0], 0.5)).unwrap();
    // the mask reflects the total change from the initial reconstruction
    let want = s.current().zip_map(s.reconstruction(), |a, b| a - b).unwrap();
    assert_eq!(s.delta(), &want);
    s.reset();
    assert_eq!(s.output(), &x);
    assert_eq!(s.history_len(), 0);
    let once = s.clone();
    s.reset();
    assert_eq!(s, once);
    assert_eq!(s, start);
}

#[test]
fn latent_sweep_is_continuous() {
    let model = tiny_model(43, MdcMode::Standard);
    let mut s = EditSession::new(&model, random_image(44), 0.5).unwrap();
    let mut frames = Vec::new();
    for i in 0..=60 {
        s.set_latent(&model, 0, -3.0 + 0.1 * i as f64).unwrap();
        frames.push(s.current().clone());
    }
    let mut steps: Vec<f64> = frames
        .windows(2)
        .map(|w| w[0].zip_map(&w[1], |a, b| (a - b).powi(2)).unwrap().sum().sqrt())
        .collect();
    let max = steps.iter().cloned().fold(0.0, f64::max);
    steps.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let median = steps[steps.len() / 2];
    assert!(max <= 10.0 * median, "{max} vs median {median}");
}

#[test]
fn session_rejects_mismatched_images() {
    let model = tiny_model(45, MdcMode::Off);
    assert!(EditSession::new(&model, Tensor64::zeros([3, 8, 8]), 1.0).is_err());
    assert!(EditSession::new(&model, random_image(1), -1.0).is_err());
}
