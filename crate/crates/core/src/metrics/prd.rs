//! Precision/recall for distributions over a k-means quantization of the
//! pooled feature space, and the `F_beta` summaries of the resulting curve.

use std::f64::consts::FRAC_PI_2;

use ndarray::Axis;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::FeatureSet;
use crate::error::{Error, Result};
use crate::graph::Tensor;

const EPS: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrdConfig {
    pub clusters: usize,
    pub angles: usize,
    /// Independent clusterings whose curves are averaged.
    pub runs: usize,
    pub max_iters: usize,
    pub seed: u64,
}

impl Default for PrdConfig {
    fn default() -> Self {
        PrdConfig {
            clusters: 20,
            angles: 1001,
            runs: 10,
            max_iters: 100,
            seed: 0,
        }
    }
}

/// Precision and recall at each slope of the angular grid.
#[derive(Debug, Clone, PartialEq)]
pub struct PrdCurve {
    pub precision: Vec<f64>,
    pub recall: Vec<f64>,
}

/// `(1 + b^2) p r / (b^2 p + r)`, 0 when both vanish.
pub fn f_beta(precision: f64, recall: f64, beta: f64) -> f64 {
    let b2 = beta * beta;
    let den = b2 * precision + recall;
    if precision <= EPS || recall <= EPS || den <= 0.0 {
        return 0.0;
    }
    (1.0 + b2) * precision * recall / den
}

impl PrdCurve {
    pub fn max_f_beta(&self, beta: f64) -> f64 {
        self.precision
            .iter()
            .zip(&self.recall)
            .map(|(&p, &r)| f_beta(p, r, beta))
            .fold(0.0, f64::max)
    }
}

/// Curve from two histograms over the same bins; `reference` is the real
/// distribution, `eval` the generated one.
pub fn curve_from_histograms(eval: &[f64], reference: &[f64], angles: usize) -> PrdCurve {
    let mut precision = Vec::with_capacity(angles);
    let mut recall = Vec::with_capacity(angles);
    for i in 0..angles {
        let theta = EPS + (FRAC_PI_2 - 2.0 * EPS) * i as f64 / (angles - 1) as f64;
        let slope = theta.tan();
        let p: f64 = reference
            .iter()
            .zip(eval)
            .map(|(r, e)| (r * slope).min(*e))
            .sum();
        let r = p / slope;
        let clip = |v: f64| if v < EPS { 0.0 } else { v.min(1.0) };
        precision.push(clip(p));
        recall.push(clip(r));
    }
    PrdCurve { precision, recall }
}

fn set_digest(t: &Tensor) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update((t.nrows() as u64).to_le_bytes());
    for v in t.iter() {
        h.update(v.to_bits().to_le_bytes());
    }
    h.finalize().into()
}

/// Lloyd's algorithm with k-means++ seeding. Returns the cluster of each row.
pub fn kmeans(data: &Tensor, k: usize, max_iters: usize, rng: &mut impl Rng) -> Vec<usize> {
    let n = data.nrows();
    let dist2 = |a: ndarray::ArrayView1<f64>, b: ndarray::ArrayView1<f64>| -> f64 {
        a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
    };
    let mut centers = Tensor::zeros((k, data.ncols()));
    centers.row_mut(0).assign(&data.row(rng.gen_range(0..n)));
    let mut best: Vec<f64> = (0..n).map(|i| dist2(data.row(i), centers.row(0))).collect();
    for c in 1..k {
        let total: f64 = best.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.gen::<f64>() * total;
            let mut idx = n - 1;
            for (i, d) in best.iter().enumerate() {
                target -= d;
                if target <= 0.0 {
                    idx = i;
                    break;
                }
            }
            idx
        } else {
            rng.gen_range(0..n)
        };
        centers.row_mut(c).assign(&data.row(pick));
        for i in 0..n {
            best[i] = best[i].min(dist2(data.row(i), centers.row(c)));
        }
    }

    let mut assign = vec![usize::MAX; n];
    for _ in 0..max_iters {
        let mut changed = false;
        for i in 0..n {
            let mut arg = 0;
            let mut dmin = f64::INFINITY;
            for c in 0..k {
                let d = dist2(data.row(i), centers.row(c));
                if d < dmin {
                    dmin = d;
                    arg = c;
                }
            }
            if assign[i] != arg {
                assign[i] = arg;
                changed = true;
            }
        }
        if !changed {
            break;
        }
        let mut sums = Tensor::zeros(centers.dim());
        let mut counts = vec![0usize; k];
        for i in 0..n {
            let mut row = sums.row_mut(assign[i]);
            row += &data.row(i);
            counts[assign[i]] += 1;
        }
        for c in 0..k {
            if counts[c] > 0 {
                let mean = &sums.row(c) / counts[c] as f64;
                centers.row_mut(c).assign(&mean);
            }
        }
    }
    assign
}

/// PRD curve of `fake` against `real`, averaged over `cfg.runs` clusterings.
///
/// The pooled clustering input is ordered by content digest rather than by
/// role, so exchanging the two sets yields the same clusters.
pub fn prd(real: &FeatureSet, fake: &FeatureSet, cfg: &PrdConfig) -> Result<PrdCurve> {
    let (nr, nf) = (real.features.nrows(), fake.features.nrows());
    if nr < cfg.clusters || nf < cfg.clusters {
        return Err(Error::Validation(format!(
            "PRD needs at least {} samples per side, got {nr} real and {nf} fake",
            cfg.clusters
        )));
    }
    if real.dim() != fake.dim() {
        return Err(Error::Validation("feature widths differ".into()));
    }
    if cfg.angles < 3 || cfg.runs == 0 {
        return Err(Error::Validation("PRD needs >= 3 angles and >= 1 run".into()));
    }
    let real_first = set_digest(&real.features) <= set_digest(&fake.features);
    let (a, b) = if real_first {
        (&real.features, &fake.features)
    } else {
        (&fake.features, &real.features)
    };
    let pooled = ndarray::concatenate(Axis(0), &[a.view(), b.view()]).expect("same width");
    let na = a.nrows();

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut precision = vec![0.0; cfg.angles];
    let mut recall = vec![0.0; cfg.angles];
    for _ in 0..cfg.runs {
        let assign = kmeans(&pooled, cfg.clusters, cfg.max_iters, &mut rng);
        let mut hist_a = vec![0.0; cfg.clusters];
        let mut hist_b = vec![0.0; cfg.clusters];
        for (i, &c) in assign.iter().enumerate() {
            if i < na {
                hist_a[c] += 1.0;
            } else {
                hist_b[c] += 1.0;
            }
        }
        hist_a.iter_mut().for_each(|v| *v /= na as f64);
        hist_b.iter_mut().for_each(|v| *v /= (pooled.nrows() - na) as f64);
        let (hist_real, hist_fake) = if real_first { (hist_a, hist_b) } else { (hist_b, hist_a) };
        let c = curve_from_histograms(&hist_fake, &hist_real, cfg.angles);
        for i in 0..cfg.angles {
            precision[i] += c.precision[i] / cfg.runs as f64;
            recall[i] += c.recall[i] / cfg.runs as f64;
        }
    }
    Ok(PrdCurve { precision, recall })
}

/// `(F_{1/8}, F_8)`: the precision-weighted and recall-weighted maxima.
pub fn f_beta_scores(real: &FeatureSet, fake: &FeatureSet, cfg: &PrdConfig) -> Result<(f64, f64)> {
    let curve = prd(real, fake, cfg)?;
    Ok((curve.max_f_beta(1.0 / 8.0), curve.max_f_beta(8.0)))
}
