//! Seeded view generation for contrastive pretraining.
//!
//! Rotation is counter-clockwise for positive angles, about the pixel-grid
//! centre `((H-1)/2, (W-1)/2)`. Elastic displacement fields are smoothed with
//! a separable Gaussian truncated at `ceil(3 sigma)` pixels.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct AugmentPolicy {
    pub flip_prob: f64,
    pub rotation_prob: f64,
    pub rotation_max_degrees: f64,
    pub elastic_prob: f64,
    /// Largest displacement in pixels.
    pub elastic_alpha: f64,
    pub elastic_sigma: f64,
}

impl Default for AugmentPolicy {
    fn default() -> Self {
        Self {
            flip_prob: 0.5,
            rotation_prob: 1.0,
            rotation_max_degrees: 15.0,
            elastic_prob: 0.5,
            elastic_alpha: 3.0,
            elastic_sigma: 4.0,
        }
    }
}

impl AugmentPolicy {
    /// A policy that leaves images untouched.
    pub fn identity() -> Self {
        Self {
            flip_prob: 0.0,
            rotation_prob: 0.0,
            elastic_prob: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, p) in [
            ("flip_prob", self.flip_prob),
            ("rotation_prob", self.rotation_prob),
            ("elastic_prob", self.elastic_prob),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::InvalidArgument(format!("{name} {p} outside [0, 1]")));
            }
        }
        if !(0.0..=180.0).contains(&self.rotation_max_degrees) {
            return Err(Error::InvalidArgument(format!(
                "rotation_max_degrees {} outside [0, 180]",
                self.rotation_max_degrees
            )));
        }
        if !(self.elastic_alpha >= 0.0) || !(self.elastic_sigma > 0.0) {
            return Err(Error::InvalidArgument(
                "elastic_alpha must be >= 0 and elastic_sigma > 0".into(),
            ));
        }
        Ok(())
    }
}

fn dims(image: &Tensor) -> Result<(usize, usize)> {
    match image.shape() {
        [h, w] => Ok((*h, *w)),
        other => Err(Error::shape("augment", other, &[0, 0])),
    }
}

/// Mirrors columns: `out[r][j] = in[r][W-1-j]`.
pub fn hflip(image: &Tensor) -> Result<Tensor> {
    let (h, w) = dims(image)?;
    let mut out = image.clone();
    for r in 0..h {
        out.data_mut()[r * w..(r + 1) * w].reverse();
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Interpolation {
    Nearest,
    #[default]
    Bilinear,
}

fn lerp(a: f64, b: f64, t: f64) -> f64 {
    a + (b - a) * t
}

/// Bilinear sample at `(y, x)`; coordinates must already lie in the grid.
fn bilinear_at(src: &[f64], w: usize, h: usize, y: f64, x: f64) -> f64 {
    let (y0, x0) = (y.floor(), x.floor());
    let (fy, fx) = (y - y0, x - x0);
    let (r0, c0) = (y0 as usize, x0 as usize);
    let (r1, c1) = ((r0 + 1).min(h - 1), (c0 + 1).min(w - 1));
    let top = lerp(src[r0 * w + c0], src[r0 * w + c1], fx);
    let bottom = lerp(src[r1 * w + c0], src[r1 * w + c1], fx);
    lerp(top, bottom, fy)
}

/// Rotates counter-clockwise by `theta_degrees` about the image centre;
/// samples falling outside the source are filled with 0.
pub fn rotate(image: &Tensor, theta_degrees: f64, interpolation: Interpolation) -> Result<Tensor> {
    if !(theta_degrees.abs() <= 180.0) {
        return Err(Error::InvalidArgument(format!(
            "rotation angle {theta_degrees} outside [-180, 180]"
        )));
    }
    let (h, w) = dims(image)?;
    if theta_degrees == 0.0 {
        return Ok(image.clone());
    }
    let (sin, cos) = theta_degrees.to_radians().sin_cos();
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let src = image.data();
    let mut out = Tensor::zeros(&[h, w]);
    const EDGE: f64 = 1e-9;
    for r in 0..h {
        for c in 0..w {
            // y axis points up so that positive angles turn counter-clockwise
            let (x, y) = (c as f64 - cx, cy - r as f64);
            let xs = cos * x + sin * y;
            let ys = -sin * x + cos * y;
            let (col, row) = (xs + cx, cy - ys);
            let v = match interpolation {
                Interpolation::Nearest => {
                    let (rr, cc) = (row.round(), col.round());
                    if rr < 0.0 || cc < 0.0 || rr > (h - 1) as f64 || cc > (w - 1) as f64 {
                        0.0
                    } else {
                        src[rr as usize * w + cc as usize]
                    }
                }
                Interpolation::Bilinear => {
                    let hi_r = (h - 1) as f64;
                    let hi_c = (w - 1) as f64;
                    if row < -EDGE || col < -EDGE || row > hi_r + EDGE || col > hi_c + EDGE {
                        0.0
                    } else {
                        bilinear_at(src, w, h, row.clamp(0.0, hi_r), col.clamp(0.0, hi_c))
                    }
                }
            };
            out.data_mut()[r * w + c] = v;
        }
    }
    Ok(out)
}

/// Normalised 1-D Gaussian taps for offsets `-radius..=radius`,
/// `radius = ceil(3 sigma)`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as i64;
    let taps: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = taps.iter().sum();
    taps.into_iter().map(|t| t / total).collect()
}

/// Separable Gaussian blur with clamp-to-edge borders.
pub fn gaussian_blur(field: &[f64], h: usize, w: usize, sigma: f64) -> Vec<f64> {
    let kernel = gaussian_kernel(sigma);
    let radius = (kernel.len() / 2) as i64;
    let mut tmp = vec![0.0; h * w];
    for r in 0..h {
        for c in 0..w {
            tmp[r * w + c] = kernel
                .iter()
                .enumerate()
                .map(|(k, t)| {
                    let cc = (c as i64 + k as i64 - radius).clamp(0, w as i64 - 1) as usize;
                    t * field[r * w + cc]
                })
                .sum();
        }
    }
    let mut out = vec![0.0; h * w];
    for r in 0..h {
        for c in 0..w {
            out[r * w + c] = kernel
                .iter()
                .enumerate()
                .map(|(k, t)| {
                    let rr = (r as i64 + k as i64 - radius).clamp(0, h as i64 - 1) as usize;
                    t * tmp[rr * w + c]
                })
                .sum();
        }
    }
    out
}

/// Elastic deformation: per-pixel Uniform(-1, 1) displacements per axis,
/// Gaussian-smoothed, rescaled so the largest displacement is `alpha`
/// pixels, and applied by bilinear sampling with border clamping.
pub fn elastic(image: &Tensor, alpha: f64, sigma: f64, seed: u64) -> Result<Tensor> {
    if !(alpha >= 0.0) || !(sigma > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "elastic needs alpha >= 0 and sigma > 0, got {alpha}, {sigma}"
        )));
    }
    let (h, w) = dims(image)?;
    if alpha == 0.0 {
        return Ok(image.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut raw = || -> Vec<f64> { (0..h * w).map(|_| rng.random_range(-1.0..1.0)).collect() };
    let (dx, dy) = (raw(), raw());
    let dx = gaussian_blur(&dx, h, w, sigma);
    let dy = gaussian_blur(&dy, h, w, sigma);
    let peak = dx.iter().chain(&dy).fold(0.0f64, |m, v| m.max(v.abs()));
    let gain = if peak > 0.0 { alpha / peak } else { 0.0 };

    let src = image.data();
    let mut out = Tensor::zeros(&[h, w]);
    for r in 0..h {
        for c in 0..w {
            let i = r * w + c;
            let y = (r as f64 + gain * dy[i]).clamp(0.0, (h - 1) as f64);
            let x = (c as f64 + gain * dx[i]).clamp(0.0, (w - 1) as f64);
            out.data_mut()[i] = bilinear_at(src, w, h, y, x);
        }
    }
    Ok(out)
}

fn augment_once(image: &Tensor, policy: &AugmentPolicy, rng: &mut ChaCha8Rng) -> Result<Tensor> {
    let mut view = image.clone();
    // draw every variate regardless of outcome so streams stay aligned
    let flip = rng.random::<f64>() < policy.flip_prob;
    let rot = rng.random::<f64>() < policy.rotation_prob;
    let theta = rng.random_range(-1.0..=1.0) * policy.rotation_max_degrees;
    let warp = rng.random::<f64>() < policy.elastic_prob;
    let warp_seed = rng.next_u64();
    if flip {
        view = hflip(&view)?;
    }
    if rot {
        view = rotate(&view, theta, Interpolation::Bilinear)?;
    }
    if warp {
        view = elastic(&view, policy.elastic_alpha, policy.elastic_sigma, warp_seed)?;
    }
    Ok(view)
}

/// Two independently augmented views of `image`, drawn from the random
/// streams `(seed, 1)` and `(seed, 2)`.
pub fn make_views(image: &Tensor, policy: &AugmentPolicy, seed: u64) -> Result<(Tensor, Tensor)> {
    policy.validate()?;
    let view = |stream: u64| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        augment_once(image, policy, &mut rng)
    };
    Ok((view(1)?, view(2)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ramp(h: usize, w: usize) -> Tensor {
        let d = (0..h * w).map(|i| i as f64 / (h * w) as f64).collect();
        Tensor::new(vec![h, w], d).unwrap()
    }

    #[test]
    fn hflip_examples() {
        let x = Tensor::matrix(&[[1.0, 2.0], [3.0, 4.0]]);
        assert_eq!(hflip(&x).unwrap().data(), &[2.0, 1.0, 4.0, 3.0]);
        let img = ramp(7, 5);
        assert_eq!(hflip(&hflip(&img).unwrap()).unwrap(), img);
        let flipped = hflip(&img).unwrap();
        for r in 0..7 {
            let a: f64 = img.data()[r * 5..(r + 1) * 5].iter().sum();
            let b: f64 = flipped.data()[r * 5..(r + 1) * 5].iter().sum();
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn rotate_zero_is_identity() {
        let img = ramp(9, 9);
        assert_eq!(rotate(&img, 0.0, Interpolation::Bilinear).unwrap(), img);
    }

    #[test]
    fn rotate_quarter_turn_nearest() {
        let x = Tensor::matrix(&[[1.0, 2.0], [3.0, 4.0]]);
        let r = rotate(&x, 90.0, Interpolation::Nearest).unwrap();
        assert_eq!(r.data(), &[2.0, 4.0, 1.0, 3.0]);
    }

    #[test]
    fn rotate_stays_in_range() {
        let img = ramp(12, 12);
        let (lo, hi) = (img.min(), img.max());
        for theta in [-170.0, -33.0, 12.5, 45.0, 179.0] {
            let r = rotate(&img, theta, Interpolation::Bilinear).unwrap();
            for &v in r.data() {
                assert!(v == 0.0 || (v >= lo - 1e-12 && v <= hi + 1e-12));
            }
        }
        assert!(rotate(&img, 181.0, Interpolation::Bilinear).is_err());
    }

    #[test]
    fn gaussian_kernel_is_truncated_and_normalised() {
        let k = gaussian_kernel(4.0);
        assert_eq!(k.len(), 25);
        assert!((k.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let k = gaussian_kernel(0.5);
        assert_eq!(k.len(), 5);
    }

    #[test]
    fn elastic_examples() {
        let img = ramp(16, 16);
        assert_eq!(elastic(&img, 0.0, 4.0, 1).unwrap(), img);
        assert_eq!(
            elastic(&img, 3.0, 4.0, 7).unwrap(),
            elastic(&img, 3.0, 4.0, 7).unwrap()
        );
        assert_ne!(elastic(&img, 3.0, 4.0, 7).unwrap(), img);
        let flat = Tensor::full(&[16, 16], 0.37);
        assert_eq!(elastic(&flat, 3.0, 4.0, 9).unwrap(), flat);
        assert!(elastic(&img, 1.0, 0.0, 1).is_err());
    }

    #[test]
    fn elastic_displacement_is_bounded_by_alpha() {
        // a column-index image reveals horizontal displacement directly
        let d = (0..20 * 20).map(|i| (i % 20) as f64).collect();
        let img = Tensor::new(vec![20, 20], d).unwrap();
        let out = elastic(&img, 2.0, 3.0, 5).unwrap();
        let worst = out
            .data()
            .iter()
            .zip(img.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(worst <= 2.0 + 1e-9 && worst > 0.1, "worst shift {worst}");
    }

    #[test]
    fn identity_policy_returns_input_views() {
        let img = ramp(10, 10);
        let (a, b) = make_views(&img, &AugmentPolicy::identity(), 3).unwrap();
        assert_eq!(a, img);
        assert_eq!(b, img);
    }

    #[test]
    fn views_are_deterministic_and_distinct() {
        let img = ramp(24, 24);
        let policy = AugmentPolicy::default();
        assert_eq!(
            make_views(&img, &policy, 42).unwrap(),
            make_views(&img, &policy, 42).unwrap()
        );
        let distinct = (0..100u64)
            .filter(|&s| {
                let (a, b) = make_views(&img, &policy, s).unwrap();
                a != b
            })
            .count();
        assert!(distinct >= 99, "{distinct} of 100 view pairs differ");
    }

    #[test]
    fn policy_validation() {
        let mut p = AugmentPolicy::default();
        assert!(p.validate().is_ok());
        p.flip_prob = 1.5;
        assert!(p.validate().is_err());
        let p = AugmentPolicy {
            rotation_max_degrees: 200.0,
            ..AugmentPolicy::default()
        };
        assert!(p.validate().is_err());
    }

    fn image_strategy() -> impl Strategy<Value = Tensor> {
        (3usize..14, 3usize..14, prop_oneof![Just(1.0), 1.0..3.0f64]).prop_flat_map(|(h, w, top)| {
            prop::collection::vec(0.0..=top, h * w)
                .prop_map(move |d| Tensor::new(vec![h, w], d).unwrap())
        })
    }

    fn policy_strategy() -> impl Strategy<Value = AugmentPolicy> {
        (0.0..=1.0f64, 0.0..=1.0f64, 0.0..=180.0f64, 0.0..=1.0f64, 0.0..6.0f64, 0.5..6.0f64).prop_map(
            |(flip, rot, deg, el, alpha, sigma)| AugmentPolicy {
                flip_prob: flip,
                rotation_prob: rot,
                rotation_max_degrees: deg,
                elastic_prob: el,
                elastic_alpha: alpha,
                elastic_sigma: sigma,
            },
        )
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn views_keep_shape_range_and_are_pure(
            img in image_strategy(),
            policy in policy_strategy(),
            seed in any::<u64>(),
        ) {
            let (a, b) = make_views(&img, &policy, seed).unwrap();
            let top = img.data().iter().cloned().fold(1.0, f64::max);
            for v in [&a, &b] {
                prop_assert_eq!(v.shape(), img.shape());
                prop_assert!(v.data().iter().all(|&x| (0.0..=top).contains(&x)));
            }
            let (a2, b2) = make_views(&img, &policy, seed).unwrap();
            prop_assert_eq!(a, a2);
            prop_assert_eq!(b, b2);
        }
    }
}
