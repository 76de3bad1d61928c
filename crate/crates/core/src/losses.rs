//! Adversarial and classifier objectives.
//!
//! [`nodes`] holds the differentiable graph versions used by the trainer;
//! the free functions in this module evaluate the same code on plain
//! values. Expectations are batch means.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Tensor};
use crate::label_algebra::{reject_mask, ProbVector, Threshold};
use crate::models::ModelBundle;

/// Which parts of the entropy-regularized classifier loss are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationFlags {
    pub use_entropy_reg: bool,
    pub use_fake_cls: bool,
}

impl Default for AblationFlags {
    fn default() -> Self {
        AblationFlags {
            use_entropy_reg: true,
            use_fake_cls: true,
        }
    }
}

/// Components of one discriminator/generator update.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub adv_lbl: f64,
    pub adv_unlbl: f64,
    pub cls: f64,
    pub lambda: f64,
    pub total_d: f64,
    pub total_g: f64,
}

impl LossTerms {
    /// Recomputes `total_d` from the stored parts.
    pub fn recomposed_d(&self) -> f64 {
        compose_d(self.adv_lbl, self.adv_unlbl, self.cls, self.lambda)
    }
}

fn compose_d(adv_lbl: f64, adv_unlbl: f64, cls: f64, lambda: f64) -> f64 {
    (adv_lbl + adv_unlbl) + lambda * cls
}

/// `L_D = L_adv^lbl + L_adv^unlbl + lambda * L_cls`.
pub fn total_d_loss(adv_lbl: f64, adv_unlbl: f64, cls: f64, lambda: f64) -> Result<LossTerms> {
    if lambda < 0.0 || !lambda.is_finite() {
        return Err(Error::Validation(format!("lambda must be >= 0, got {lambda}")));
    }
    if ![adv_lbl, adv_unlbl, cls].iter().all(|v| v.is_finite()) {
        return Err(Error::Numerical(format!(
            "non-finite loss component ({adv_lbl}, {adv_unlbl}, {cls})"
        )));
    }
    Ok(LossTerms {
        adv_lbl,
        adv_unlbl,
        cls,
        lambda,
        total_d: compose_d(adv_lbl, adv_unlbl, cls, lambda),
        total_g: 0.0,
    })
}

/// Graph versions of every objective.
pub mod nodes {
    use super::*;
    use crate::graph::Var;
    use crate::label_algebra::LOG_EPS;

    fn nonempty(g: &Graph, v: Var, what: &str) -> Result<()> {
        if g.shape(v).0 == 0 {
            return Err(Error::Validation(format!("{what}: empty batch")));
        }
        Ok(())
    }

    /// `max(0, 1 + t)` elementwise.
    pub fn hinge(g: &mut Graph, t: Var) -> Var {
        let shifted = g.add_scalar(t, 1.0);
        g.relu(shifted)
    }

    /// `mean f_D(-s)` over a column of scores.
    pub fn hinge_real(g: &mut Graph, scores: Var) -> Result<Var> {
        nonempty(g, scores, "real scores")?;
        let neg = g.neg(scores);
        let h = hinge(g, neg);
        Ok(g.mean(h))
    }

    /// `mean f_D(s)` over a column of scores.
    pub fn hinge_fake(g: &mut Graph, scores: Var) -> Result<Var> {
        nonempty(g, scores, "fake scores")?;
        let h = hinge(g, scores);
        Ok(g.mean(h))
    }

    /// Labeled adversarial loss: real pairs pushed above +1, fakes below -1.
    pub fn adv_labeled(g: &mut Graph, real: Var, fake: Var) -> Result<Var> {
        let r = hinge_real(g, real)?;
        let f = hinge_fake(g, fake)?;
        Ok(g.add(r, f))
    }

    /// Same reduction as [`adv_labeled`]; the padding to `K + 1` lives in
    /// the condition rows used to compute the scores.
    pub fn adv_labeled_openset(g: &mut Graph, real: Var, fake: Var) -> Result<Var> {
        adv_labeled(g, real, fake)
    }

    /// `mean(-s)` over generated scores.
    pub fn generator_loss(g: &mut Graph, fake: Var) -> Result<Var> {
        nonempty(g, fake, "fake scores")?;
        let m = g.mean(fake);
        Ok(g.neg(m))
    }

    pub fn generator_loss_openset(g: &mut Graph, fake: Var) -> Result<Var> {
        generator_loss(g, fake)
    }

    /// `-mean log p_c(true class)`; `targets` holds one-hot rows.
    pub fn cls_cross_entropy(g: &mut Graph, probs: Var, targets: Var) -> Result<Var> {
        if g.shape(probs) != g.shape(targets) {
            return Err(Error::Validation(format!(
                "cross entropy: {:?} probabilities vs {:?} targets",
                g.shape(probs),
                g.shape(targets)
            )));
        }
        nonempty(g, probs, "cross entropy")?;
        let logp = g.log_clamp(probs, LOG_EPS);
        let picked = g.row_dot(logp, targets);
        let m = g.mean(picked);
        Ok(g.neg(m))
    }

    /// Mean normalized entropy of the rows of `probs`.
    pub fn mean_entropy(g: &mut Graph, probs: Var) -> Result<Var> {
        nonempty(g, probs, "entropy")?;
        let k = g.shape(probs).1;
        if k < 2 {
            return Err(Error::Domain("entropy needs K >= 2".into()));
        }
        let logp = g.log_clamp(probs, LOG_EPS);
        let plogp = g.row_dot(probs, logp);
        let m = g.mean(plogp);
        Ok(g.scale(m, -1.0 / (k as f64).ln()))
    }

    /// Hinge on the kept rows only; 0 when nothing is kept.
    pub fn adv_unlabeled_reject(g: &mut Graph, scores: Var, keep: &[bool]) -> Result<Var> {
        if g.shape(scores).0 != keep.len() {
            return Err(Error::Validation(format!(
                "{} scores but {} mask entries",
                g.shape(scores).0,
                keep.len()
            )));
        }
        let kept = keep.iter().filter(|k| **k).count();
        if kept == 0 {
            log::warn!("every unlabeled sample fell below the confidence threshold");
            return Ok(g.scalar(0.0));
        }
        let mask = Tensor::from_shape_fn((keep.len(), 1), |(i, _)| f64::from(u8::from(keep[i])));
        let mask = g.constant(mask);
        let neg = g.neg(scores);
        let h = hinge(g, neg);
        let masked = g.mul(h, mask);
        let s = g.sum(masked);
        Ok(g.scale(s, 1.0 / kept as f64))
    }

    /// Plain unlabeled hinge, used with open-set, random or uniform
    /// conditions as well as the soft classifier condition.
    pub fn adv_unlabeled(g: &mut Graph, scores: Var) -> Result<Var> {
        hinge_real(g, scores)
    }

    /// Cross entropy minus mean entropy on labeled data, plus the same on
    /// generated data weighted by `balance`.
    #[allow(clippy::too_many_arguments)]
    pub fn cls_loss_ossgan(
        g: &mut Graph,
        labeled_probs: Var,
        labeled_targets: Var,
        fake_probs: Option<Var>,
        fake_targets: Option<Var>,
        flags: AblationFlags,
        balance: f64,
    ) -> Result<Var> {
        let mut loss = cls_cross_entropy(g, labeled_probs, labeled_targets)?;
        if flags.use_entropy_reg {
            let h = mean_entropy(g, labeled_probs)?;
            loss = g.sub(loss, h);
        }
        if flags.use_fake_cls {
            let (Some(fp), Some(ft)) = (fake_probs, fake_targets) else {
                return Err(Error::Validation(
                    "fake classifier term enabled but no fake batch given".into(),
                ));
            };
            let mut fake = cls_cross_entropy(g, fp, ft)?;
            if flags.use_entropy_reg {
                let h = mean_entropy(g, fp)?;
                fake = g.sub(fake, h);
            }
            let weighted = g.scale(fake, balance);
            loss = g.add(loss, weighted);
        }
        Ok(loss)
    }

    /// `(adv_lbl + adv_unlbl) + lambda * cls`, in the same order as
    /// [`total_d_loss`](super::total_d_loss).
    pub fn total_d(g: &mut Graph, adv_lbl: Var, adv_unlbl: Var, cls: Var, lambda: f64) -> Var {
        let adv = g.add(adv_lbl, adv_unlbl);
        let c = g.scale(cls, lambda);
        g.add(adv, c)
    }
}

fn column(g: &mut Graph, values: &[f64]) -> crate::graph::Var {
    g.constant(Tensor::from_shape_vec((values.len(), 1), values.to_vec()).expect("column"))
}

fn rows(g: &mut Graph, vs: &[ProbVector]) -> Result<crate::graph::Var> {
    let k = vs.first().map(|p| p.k()).unwrap_or(0);
    if vs.iter().any(|p| p.k() != k) {
        return Err(Error::Validation("probability vectors of mixed length".into()));
    }
    let mut t = Tensor::zeros((vs.len(), k));
    for (i, p) in vs.iter().enumerate() {
        t.row_mut(i).assign(&ndarray::ArrayView1::from(p.as_slice()));
    }
    Ok(g.constant(t))
}

/// `max(0, 1 + t)`.
pub fn hinge(t: f64) -> f64 {
    let mut g = Graph::new();
    let v = g.scalar(t);
    let h = nodes::hinge(&mut g, v);
    g.scalar_value(h)
}

pub fn adv_labeled(real_scores: &[f64], fake_scores: &[f64]) -> Result<f64> {
    let mut g = Graph::new();
    let (r, f) = (column(&mut g, real_scores), column(&mut g, fake_scores));
    let l = nodes::adv_labeled(&mut g, r, f)?;
    Ok(g.scalar_value(l))
}

pub fn adv_labeled_openset(real_scores: &[f64], fake_scores: &[f64]) -> Result<f64> {
    adv_labeled(real_scores, fake_scores)
}

pub fn generator_loss(fake_scores: &[f64]) -> Result<f64> {
    let mut g = Graph::new();
    let f = column(&mut g, fake_scores);
    let l = nodes::generator_loss(&mut g, f)?;
    Ok(g.scalar_value(l))
}

pub fn generator_loss_openset(fake_scores: &[f64]) -> Result<f64> {
    generator_loss(fake_scores)
}

pub fn cls_cross_entropy(probs: &[ProbVector], labels: &[ProbVector]) -> Result<f64> {
    if probs.len() != labels.len() {
        return Err(Error::Validation(format!(
            "{} predictions but {} labels",
            probs.len(),
            labels.len()
        )));
    }
    let mut g = Graph::new();
    let (p, t) = (rows(&mut g, probs)?, rows(&mut g, labels)?);
    let l = nodes::cls_cross_entropy(&mut g, p, t)?;
    Ok(g.scalar_value(l))
}

/// Rejection-filtered unlabeled loss from scores `D(u, y_hat)` paired with
/// the classifier output that produced `y_hat`.
pub fn adv_unlabeled_reject(scored: &[(f64, ProbVector)], c: Threshold) -> Result<f64> {
    let mut g = Graph::new();
    let scores: Vec<f64> = scored.iter().map(|(s, _)| *s).collect();
    let keep: Vec<bool> = scored.iter().map(|(_, p)| reject_mask(p, c)).collect();
    let s = column(&mut g, &scores);
    let l = nodes::adv_unlabeled_reject(&mut g, s, &keep)?;
    Ok(g.scalar_value(l))
}

pub fn adv_unlabeled_openset(u_scores: &[f64]) -> Result<f64> {
    let mut g = Graph::new();
    let s = column(&mut g, u_scores);
    let l = nodes::adv_unlabeled(&mut g, s)?;
    Ok(g.scalar_value(l))
}

/// Soft-label unlabeled loss: each sample is scored under its own
/// classifier output `C(D~(u))`.
pub fn adv_unlabeled_ossgan(u_samples: &Tensor, model: &ModelBundle) -> Result<f64> {
    let mut g = Graph::new();
    let dv = model.bind_disc(&mut g, false);
    let u = g.constant(u_samples.clone());
    let f = model.features.forward(&mut g, &dv.features, u);
    let p = model.classifier.forward(&mut g, &dv.classifier, f);
    let s = model.projection.forward(&mut g, &dv.projection, f, p);
    let l = nodes::adv_unlabeled(&mut g, s)?;
    Ok(g.scalar_value(l))
}

/// Entropy-regularized classifier loss; pass empty fake slices when the
/// fake term is disabled.
pub fn cls_loss_ossgan(
    labeled_probs: &[ProbVector],
    labeled_targets: &[ProbVector],
    fake_probs: &[ProbVector],
    fake_targets: &[ProbVector],
    flags: AblationFlags,
    balance: f64,
) -> Result<f64> {
    if labeled_probs.len() != labeled_targets.len() || fake_probs.len() != fake_targets.len() {
        return Err(Error::Validation("prediction/target length mismatch".into()));
    }
    let mut g = Graph::new();
    let lp = rows(&mut g, labeled_probs)?;
    let lt = rows(&mut g, labeled_targets)?;
    let (fp, ft) = if flags.use_fake_cls {
        (Some(rows(&mut g, fake_probs)?), Some(rows(&mut g, fake_targets)?))
    } else {
        (None, None)
    };
    let l = nodes::cls_loss_ossgan(&mut g, lp, lt, fp, ft, flags, balance)?;
    Ok(g.scalar_value(l))
}
