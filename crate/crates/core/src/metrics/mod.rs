//! Sample-quality metrics and the open-set entropy diagnostic.

pub mod extractor;
pub mod fid;
pub mod prd;

use ndarray::{s, Axis};
use serde::{Deserialize, Serialize};

use crate::dataset::{OpenSetDataset, Provenance};
use crate::error::{Error, Result};
use crate::graph::Tensor;
use crate::label_algebra::{normalized_entropy_slice, ClassIndex, ProbVector};
use crate::models::{ModelBundle, PriorSampler};

pub use extractor::{feature_extractor_fit, ExtractorFitConfig, MetricExtractor};
pub use fid::fid;
pub use prd::{f_beta_scores, prd, PrdConfig, PrdCurve};

/// Generated samples per evaluation at full scale.
pub const FULL_EVAL_SAMPLES: usize = 10_000;
/// Generated samples per evaluation for toy runs.
pub const TOY_EVAL_SAMPLES: usize = 2_000;

const CHUNK: usize = 500;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Real,
    Fake,
}

/// Embeddings of one sample set, one row per sample.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSet {
    pub features: Tensor,
    pub source: Source,
}

impl FeatureSet {
    pub fn new(features: Tensor) -> Self {
        FeatureSet {
            features,
            source: Source::Real,
        }
    }

    pub fn tagged(features: Tensor, source: Source) -> Self {
        FeatureSet { features, source }
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn len(&self) -> usize {
        self.features.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.features.nrows() == 0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub fid: f64,
    pub is_score: f64,
    /// Max `F_{1/8}` (precision-weighted).
    pub f_small: f64,
    /// Max `F_8` (recall-weighted).
    pub f_large: f64,
    pub entropy_gap: f64,
    pub n_samples: usize,
    pub extractor_hash: String,
    pub prd: PrdConfig,
    pub notes: Vec<String>,
}

/// `exp(mean_i KL(p_i || mean_j p_j))`.
pub fn inception_score(class_probs: &[ProbVector]) -> Result<f64> {
    let n = class_probs.len();
    let Some(first) = class_probs.first() else {
        return Err(Error::Validation("inception score of an empty set".into()));
    };
    let k = first.k();
    if class_probs.iter().any(|p| p.k() != k) {
        return Err(Error::Validation("probability vectors of mixed length".into()));
    }
    let mut marginal = vec![0.0; k];
    for p in class_probs {
        for (m, v) in marginal.iter_mut().zip(p.as_slice()) {
            *m += v;
        }
    }
    marginal.iter_mut().for_each(|m| *m /= n as f64);
    let kl_sum: f64 = class_probs
        .iter()
        .map(|p| {
            p.as_slice()
                .iter()
                .zip(&marginal)
                .filter(|(v, _)| **v > 0.0)
                .map(|(v, m)| v * (v / m).ln())
                .sum::<f64>()
        })
        .sum();
    Ok((kl_sum / n as f64).max(0.0).exp())
}

fn probs_from_rows(t: &Tensor) -> Result<Vec<ProbVector>> {
    t.axis_iter(Axis(0))
        .map(|row| ProbVector::new(row.to_vec()))
        .collect()
}

fn chunked(x: &Tensor, mut f: impl FnMut(&Tensor) -> Result<Tensor>) -> Result<Tensor> {
    let mut parts = Vec::new();
    for start in (0..x.nrows()).step_by(CHUNK) {
        let end = (start + CHUNK).min(x.nrows());
        parts.push(f(&x.slice(s![start..end, ..]).to_owned())?);
    }
    let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
    ndarray::concatenate(Axis(0), &views).map_err(|e| Error::Numerical(e.to_string()))
}

/// Mean normalized entropy of `classify(u)` over open-provenance unlabeled
/// samples minus the same over closed-provenance ones.
pub fn entropy_gap_with(
    ds: &OpenSetDataset,
    classify: impl FnMut(&Tensor) -> Result<Tensor>,
) -> Result<f64> {
    let diag = ds.diagnostics()?;
    let open = diag.indices(Provenance::Open);
    let closed = diag.indices(Provenance::Closed);
    if open.is_empty() || closed.is_empty() {
        return Err(Error::Data(format!(
            "entropy gap needs both groups; got {} open and {} closed samples",
            open.len(),
            closed.len()
        )));
    }
    let probs = chunked(&ds.unlabeled_x, classify)?;
    let mean_h = |idx: &[usize]| {
        idx.iter()
            .map(|&i| normalized_entropy_slice(probs.row(i).as_slice().expect("contiguous row")))
            .sum::<f64>()
            / idx.len() as f64
    };
    Ok(mean_h(&open) - mean_h(&closed))
}

pub fn entropy_gap(models: &ModelBundle, ds: &OpenSetDataset) -> Result<f64> {
    entropy_gap_with(ds, |x| models.classify_batch(x))
}

/// Frozen extractor plus reference features; evaluates checkpoints.
#[derive(Debug, Clone)]
pub struct Evaluator {
    pub extractor: MetricExtractor,
    reference: FeatureSet,
    pub n_samples: usize,
    /// Seed of the latent draws, identical for every evaluation.
    pub prior_seed: u64,
    pub prd: PrdConfig,
    diagnostics: Option<OpenSetDataset>,
}

impl Evaluator {
    /// `reference` holds real samples of the known classes.
    pub fn new(
        extractor: MetricExtractor,
        reference: &Tensor,
        n_samples: usize,
        diagnostics: Option<OpenSetDataset>,
    ) -> Result<Self> {
        let reference = FeatureSet::tagged(extractor.embed(reference)?.features, Source::Real);
        if reference.len() < reference.dim() + 1 {
            return Err(Error::Data(format!(
                "reference set of {} samples is too small for {}-dimensional features",
                reference.len(),
                reference.dim()
            )));
        }
        Ok(Evaluator {
            extractor,
            reference,
            n_samples,
            prior_seed: 0x5eed,
            prd: PrdConfig::default(),
            diagnostics,
        })
    }

    pub fn reference(&self) -> &FeatureSet {
        &self.reference
    }

    /// Balanced class draws with a fixed latent seed.
    pub fn generate(&self, models: &ModelBundle) -> Result<Tensor> {
        let k = models.config.k;
        let mut prior = PriorSampler::new(models.config.latent_dim, k, self.prior_seed);
        let z = prior.sample(self.n_samples)?.z;
        let labels: Vec<ClassIndex> = (0..self.n_samples).map(|i| ClassIndex(i % k)).collect();
        let mut offset = 0;
        chunked(&z, |zc| {
            let y = &labels[offset..offset + zc.nrows()];
            offset += zc.nrows();
            models.generate(zc, y)
        })
    }

    pub fn evaluate(&self, models: &ModelBundle) -> Result<MetricReport> {
        let samples = self.generate(models)?;
        if samples.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("generator produced non-finite samples".into()));
        }
        let fake = FeatureSet::tagged(self.extractor.embed(&samples)?.features, Source::Fake);
        let fid = fid::fid(&self.reference, &fake)?;
        let is_score = inception_score(&probs_from_rows(&self.extractor.class_probs(&samples)?)?)?;
        let (f_small, f_large) = prd::f_beta_scores(&self.reference, &fake, &self.prd)?;
        let entropy_gap = match &self.diagnostics {
            Some(ds) => entropy_gap(models, ds)?,
            None => f64::NAN,
        };

        let mut notes = Vec::new();
        if self.n_samples < FULL_EVAL_SAMPLES {
            notes.push(format!("reduced sample count {} (toy scale)", self.n_samples));
        }
        if self.extractor.is_under_trained() {
            notes.push(format!(
                "extractor holdout accuracy {:.3} below {}",
                self.extractor.holdout_accuracy,
                extractor::MIN_HOLDOUT_ACCURACY
            ));
        }
        Ok(MetricReport {
            fid,
            is_score,
            f_small,
            f_large,
            entropy_gap,
            n_samples: self.n_samples,
            extractor_hash: self.extractor.hash().to_string(),
            prd: self.prd,
            notes,
        })
    }
}
