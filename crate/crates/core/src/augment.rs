//! Differentiable augmentation applied to every discriminator input.
//!
//! Per sample: brightness shift, contrast scaling about the sample mean,
//! integer translation with zero fill, then a square cutout. Each stage is
//! affine in the input, so the backward pass is exact.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::graph::{Geom, Tensor};

/// Random draws for one sample.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentPlan {
    pub brightness: f64,
    pub contrast: f64,
    pub shift: (isize, isize),
    /// Top-left corner and side of the erased square, possibly partly
    /// outside the image.
    pub cutout: Option<(isize, isize, usize)>,
}

impl AugmentPlan {
    pub fn identity() -> Self {
        AugmentPlan {
            brightness: 0.0,
            contrast: 1.0,
            shift: (0, 0),
            cutout: None,
        }
    }
}

/// Augmentation policy; draws one [`AugmentPlan`] per sample.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Augmenter {
    pub enabled: bool,
    /// Maximum translation as a fraction of the image side.
    pub translation_ratio: f64,
    /// Cutout side as a fraction of the image side.
    pub cutout_ratio: f64,
}

impl Default for Augmenter {
    fn default() -> Self {
        Augmenter {
            enabled: true,
            translation_ratio: 0.125,
            cutout_ratio: 0.5,
        }
    }
}

impl Augmenter {
    pub fn disabled() -> Self {
        Augmenter {
            enabled: false,
            ..Augmenter::default()
        }
    }

    pub fn sample_plan(&self, rng: &mut impl Rng, geom: Geom) -> AugmentPlan {
        if !self.enabled {
            return AugmentPlan::identity();
        }
        let brightness = rng.gen::<f64>() - 0.5;
        let contrast = rng.gen::<f64>() + 0.5;
        let max_dy = (geom.h as f64 * self.translation_ratio).round() as isize;
        let max_dx = (geom.w as f64 * self.translation_ratio).round() as isize;
        let shift = (
            rng.gen_range(-max_dy..=max_dy),
            rng.gen_range(-max_dx..=max_dx),
        );
        let side = ((geom.h.min(geom.w) as f64) * self.cutout_ratio).round() as usize;
        let cutout = (side > 0).then(|| {
            let half = (side / 2) as isize;
            let y0 = rng.gen_range(0..=geom.h as isize) - half;
            let x0 = rng.gen_range(0..=geom.w as isize) - half;
            (y0, x0, side)
        });
        AugmentPlan {
            brightness,
            contrast,
            shift,
            cutout,
        }
    }

    pub fn sample_plans(&self, rng: &mut impl Rng, n: usize, geom: Geom) -> Vec<AugmentPlan> {
        (0..n).map(|_| self.sample_plan(rng, geom)).collect()
    }

    /// Augments a batch outside of any graph. Disabled policies return the
    /// input unchanged, bit for bit.
    pub fn augment(&self, batch: &Tensor, geom: Geom, rng: &mut impl Rng) -> Tensor {
        if !self.enabled {
            return batch.clone();
        }
        let plans = self.sample_plans(rng, batch.nrows(), geom);
        apply_forward(batch, geom, &plans)
    }
}

fn in_cutout(plan: &AugmentPlan, y: usize, x: usize) -> bool {
    match plan.cutout {
        Some((y0, x0, side)) => {
            let (y, x) = (y as isize, x as isize);
            y >= y0 && y < y0 + side as isize && x >= x0 && x < x0 + side as isize
        }
        None => false,
    }
}

pub(crate) fn apply_forward(x: &Tensor, geom: Geom, plans: &[AugmentPlan]) -> Tensor {
    let mut out = Tensor::zeros(x.dim());
    let n_pix = geom.len() as f64;
    for (s, plan) in plans.iter().enumerate() {
        if *plan == AugmentPlan::identity() {
            out.row_mut(s).assign(&x.row(s));
            continue;
        }
        let src = x.row(s);
        let mean = src.sum() / n_pix + plan.brightness;
        let color = |v: f64| (v + plan.brightness - mean) * plan.contrast + mean;
        let (dy, dx) = plan.shift;
        let mut dst = out.row_mut(s);
        for c in 0..geom.c {
            for y in 0..geom.h {
                for xx in 0..geom.w {
                    if in_cutout(plan, y, xx) {
                        continue;
                    }
                    let (sy, sx) = (y as isize - dy, xx as isize - dx);
                    if sy < 0 || sx < 0 || sy >= geom.h as isize || sx >= geom.w as isize {
                        continue;
                    }
                    let v = src[c * geom.area() + sy as usize * geom.w + sx as usize];
                    dst[c * geom.area() + y * geom.w + xx] = color(v);
                }
            }
        }
    }
    out
}

pub(crate) fn apply_backward(g: &Tensor, geom: Geom, plans: &[AugmentPlan]) -> Tensor {
    let mut out = Tensor::zeros(g.dim());
    let n_pix = geom.len() as f64;
    for (s, plan) in plans.iter().enumerate() {
        if *plan == AugmentPlan::identity() {
            out.row_mut(s).assign(&g.row(s));
            continue;
        }
        let gs = g.row(s);
        // Undo cutout and translation.
        let mut g2 = vec![0.0; geom.len()];
        let (dy, dx) = plan.shift;
        for c in 0..geom.c {
            for y in 0..geom.h {
                for xx in 0..geom.w {
                    if in_cutout(plan, y, xx) {
                        continue;
                    }
                    let (sy, sx) = (y as isize - dy, xx as isize - dx);
                    if sy < 0 || sx < 0 || sy >= geom.h as isize || sx >= geom.w as isize {
                        continue;
                    }
                    g2[c * geom.area() + sy as usize * geom.w + sx as usize] +=
                        gs[c * geom.area() + y * geom.w + xx];
                }
            }
        }
        // Contrast Jacobian k*I + (1-k)/N * 11^T is symmetric.
        let mean_g: f64 = g2.iter().sum::<f64>() / n_pix;
        let k = plan.contrast;
        let mut dst = out.row_mut(s);
        for (d, v) in dst.iter_mut().zip(&g2) {
            *d = k * v + (1.0 - k) * mean_g;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Graph;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn batch(rng: &mut ChaCha8Rng, n: usize, geom: Geom) -> Tensor {
        Tensor::from_shape_fn((n, geom.len()), |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn disabled_is_bitwise_identity() {
        let geom = Geom::new(1, 8, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = batch(&mut rng, 5, geom);
        let out = Augmenter::disabled().augment(&x, geom, &mut rng);
        assert_eq!(out, x);
    }

    #[test]
    fn seeded_transform_is_deterministic() {
        let geom = Geom::new(1, 8, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = batch(&mut rng, 6, geom);
        let a = Augmenter::default().augment(&x, geom, &mut ChaCha8Rng::seed_from_u64(9));
        let b = Augmenter::default().augment(&x, geom, &mut ChaCha8Rng::seed_from_u64(9));
        assert_eq!(a, b);
        assert_ne!(a, x);
    }

    #[test]
    fn translation_bounded_by_eighth_of_side() {
        let geom = Geom::new(1, 16, 16);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..500 {
            let p = Augmenter::default().sample_plan(&mut rng, geom);
            assert!(p.shift.0.abs() <= 2 && p.shift.1.abs() <= 2);
            assert!((0.5..1.5).contains(&p.contrast));
        }
    }

    #[test]
    fn gradient_flows_through_augmentation() {
        let geom = Geom::new(2, 4, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = batch(&mut rng, 3, geom);
        let weights = batch(&mut rng, 3, geom);
        let plans = Augmenter::default().sample_plans(&mut rng, 3, geom);
        crate::graph::tests::check_gradients(
            &[x],
            |g: &mut Graph, v| {
                let a = g.augment(v[0], geom, plans.clone());
                let w = g.constant(weights.clone());
                let t = g.mul(a, w);
                let t = g.tanh(t);
                g.sum(t)
            },
            1e-6,
        );
    }
}
