//! Alternating discriminator/generator training for every method in the
//! registry, with CSV logs, checkpoints and periodic evaluation.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ndarray::Axis;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{AugmentPlan, Augmenter};
use crate::dataset::OpenSetDataset;
use crate::error::{Error, Result};
use crate::graph::{Geom, Graph, Tensor, Var};
use crate::label_algebra::{argmax_slice, reject_mask, threshold_label_extended, ClassIndex, ProbVector, Threshold};
use crate::losses::{nodes, AblationFlags, LossTerms};
use crate::metrics::{Evaluator, MetricReport};
use crate::models::{one_hot_rows, Checkpoint, Module, ModelBundle, ModelConfig, PriorBatch, PriorSampler};
use crate::optim::{Adam, AdamConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MethodName {
    Ossgan,
    Rejectgan,
    Opensetgan,
    Randomgan,
    Singlegan,
    Supervised,
}

impl MethodName {
    pub const ALL: [MethodName; 6] = [
        MethodName::Ossgan,
        MethodName::Rejectgan,
        MethodName::Opensetgan,
        MethodName::Randomgan,
        MethodName::Singlegan,
        MethodName::Supervised,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            MethodName::Ossgan => "ossgan",
            MethodName::Rejectgan => "rejectgan",
            MethodName::Opensetgan => "opensetgan",
            MethodName::Randomgan => "randomgan",
            MethodName::Singlegan => "singlegan",
            MethodName::Supervised => "supervised",
        }
    }

    pub fn uses_threshold(self) -> bool {
        matches!(self, MethodName::Rejectgan | MethodName::Opensetgan)
    }

    pub fn uses_unlabeled(self) -> bool {
        self != MethodName::Supervised
    }
}

impl fmt::Display for MethodName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for MethodName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        MethodName::ALL
            .into_iter()
            .find(|m| m.as_str() == s.to_ascii_lowercase())
            .ok_or_else(|| {
                let names: Vec<_> = MethodName::ALL.iter().map(|m| m.as_str()).collect();
                Error::Config(format!("unknown method {s:?}; expected one of {}", names.join(", ")))
            })
    }
}

/// Default classifier weight sweep.
pub const LAMBDA_GRID: [f64; 4] = [0.1, 0.2, 0.4, 0.6];
/// Default confidence threshold sweep.
pub const THRESHOLD_GRID: [f64; 6] = [0.1, 0.3, 0.5, 0.7, 0.9, 0.95];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MethodSpec {
    pub name: MethodName,
    pub threshold: Option<Threshold>,
    pub lambda: f64,
    pub flags: AblationFlags,
}

impl MethodSpec {
    pub fn new(name: MethodName, threshold: Option<f64>, lambda: f64, flags: AblationFlags) -> Result<Self> {
        let spec = MethodSpec {
            name,
            threshold: threshold.map(Threshold::new).transpose()?,
            lambda,
            flags,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn ossgan(lambda: f64) -> Self {
        MethodSpec {
            name: MethodName::Ossgan,
            threshold: None,
            lambda,
            flags: AblationFlags::default(),
        }
    }

    pub fn rejectgan(c: f64, lambda: f64) -> Result<Self> {
        MethodSpec::new(MethodName::Rejectgan, Some(c), lambda, AblationFlags::default())
    }

    pub fn opensetgan(c: f64, lambda: f64) -> Result<Self> {
        MethodSpec::new(MethodName::Opensetgan, Some(c), lambda, AblationFlags::default())
    }

    pub fn randomgan() -> Self {
        MethodSpec::plain(MethodName::Randomgan)
    }

    pub fn singlegan() -> Self {
        MethodSpec::plain(MethodName::Singlegan)
    }

    pub fn supervised() -> Self {
        MethodSpec::plain(MethodName::Supervised)
    }

    fn plain(name: MethodName) -> Self {
        MethodSpec {
            name,
            threshold: None,
            lambda: 0.0,
            flags: AblationFlags::default(),
        }
    }

    pub fn with_flags(mut self, flags: AblationFlags) -> Self {
        self.flags = flags;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.name.uses_threshold() != self.threshold.is_some() {
            return Err(Error::Config(if self.threshold.is_some() {
                format!("{} takes no threshold", self.name)
            } else {
                format!("{} requires a threshold", self.name)
            }));
        }
        if self.lambda < 0.0 || !self.lambda.is_finite() {
            return Err(Error::Config(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        Ok(())
    }

    /// Projection condition width for `k` known classes.
    pub fn condition_dim(&self, k: usize) -> usize {
        if self.name == MethodName::Opensetgan {
            k + 1
        } else {
            k
        }
    }

    /// Run label such as `rejectgan_c0.5`.
    pub fn label(&self) -> String {
        match self.threshold {
            Some(c) => format!("{}_c{}", self.name, c.value()),
            None => self.name.to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub total_iters: usize,
    pub batch_labeled: usize,
    pub batch_unlabeled: usize,
    pub batch_fake: usize,
    pub lr_g: f64,
    pub lr_d: f64,
    pub betas: (f64, f64),
    pub seed: u64,
    /// Evaluation period in iterations; 0 evaluates only after the last one.
    pub eval_every: usize,
    /// Checkpoint period in iterations; 0 saves only the last one.
    pub checkpoint_every: usize,
    pub augment: bool,
    /// Let the unlabeled adversarial term backpropagate into the classifier
    /// through the soft condition.
    pub unlabeled_condition_grad: bool,
    /// Spectrally normalize the discriminator-side weight matrices.
    pub spectral_norm: bool,
    pub latent_dim: usize,
    pub embed_dim: usize,
    pub feature_dim: usize,
    pub g_width: usize,
    pub d_width: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let desk = ModelConfig::desk(2);
        TrainConfig {
            total_iters: 3000,
            batch_labeled: 64,
            batch_unlabeled: 64,
            batch_fake: 64,
            lr_g: 1e-4,
            lr_d: 4e-4,
            betas: (0.0, 0.999),
            seed: 0,
            eval_every: 0,
            checkpoint_every: 0,
            augment: true,
            unlabeled_condition_grad: true,
            spectral_norm: false,
            latent_dim: desk.latent_dim,
            embed_dim: desk.embed_dim,
            feature_dim: desk.feature_dim,
            g_width: desk.g_width,
            d_width: desk.d_width,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.total_iters == 0 {
            return Err(Error::Config("total iterations must be >= 1".into()));
        }
        if self.batch_labeled == 0 || self.batch_unlabeled == 0 || self.batch_fake == 0 {
            return Err(Error::Config("batch sizes must be positive".into()));
        }
        if !(self.lr_g > 0.0 && self.lr_d > 0.0) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        let (b1, b2) = self.betas;
        if !((0.0..1.0).contains(&b1) && (0.0..1.0).contains(&b2)) {
            return Err(Error::Config(format!("Adam betas must lie in [0, 1), got ({b1}, {b2})")));
        }
        Ok(())
    }

    pub fn model_config(&self, k: usize, geom: Geom, method: &MethodSpec) -> ModelConfig {
        ModelConfig {
            k,
            condition_dim: method.condition_dim(k),
            latent_dim: self.latent_dim,
            embed_dim: self.embed_dim,
            feature_dim: self.feature_dim,
            image: geom,
            g_width: self.g_width,
            d_width: self.d_width,
            spectral_norm: self.spectral_norm,
            self_attention: false,
        }
    }
}

/// Everything one discriminator update consumes, drawn ahead of time.
#[derive(Debug, Clone)]
pub struct DBatch {
    pub x_lbl: Tensor,
    pub y_lbl: Vec<ClassIndex>,
    /// Empty when the method ignores unlabeled data or the pool is empty.
    pub x_unlbl: Tensor,
    pub prior: PriorBatch,
    /// Conditions for the random-label baseline.
    pub random_labels: Vec<ClassIndex>,
    /// One plan per row of `[x_lbl; fake; x_unlbl]`, or `None` without
    /// augmentation.
    pub plans: Option<Vec<AugmentPlan>>,
}

/// Discriminator loss of `batch` and its gradient for every
/// [`ModelBundle::disc_params`] tensor. Generated samples are treated as
/// constants.
pub fn d_loss(
    models: &ModelBundle,
    batch: &DBatch,
    method: &MethodSpec,
    condition_grad: bool,
) -> Result<(LossTerms, Vec<Tensor>)> {
    let k = models.config.k;
    let geom = models.config.image;
    let cond_dim = models.projection.condition_dim();
    if cond_dim != method.condition_dim(k) {
        return Err(Error::Config(format!(
            "{} needs {} condition columns, model has {cond_dim}",
            method.name,
            method.condition_dim(k)
        )));
    }
    let (nl, nf, nu) = (batch.x_lbl.nrows(), batch.prior.y.len(), batch.x_unlbl.nrows());
    if nl == 0 || nf == 0 {
        return Err(Error::Validation("labeled and prior batches must be nonempty".into()));
    }
    let fake = models.generate(&batch.prior.z, &batch.prior.y)?;

    let mut g = Graph::new();
    let dv = models.bind_disc(&mut g, true);
    let mut parts = vec![batch.x_lbl.view(), fake.view()];
    if nu > 0 {
        parts.push(batch.x_unlbl.view());
    }
    let stacked = ndarray::concatenate(Axis(0), &parts).map_err(|e| Error::Config(e.to_string()))?;
    let mut x = g.constant(stacked);
    if let Some(plans) = &batch.plans {
        x = g.augment(x, geom, plans.clone());
    }
    let f_all = models.features.forward(&mut g, &dv.features, x);
    let f_lbl = g.slice_rows(f_all, 0, nl);
    let f_fake = g.slice_rows(f_all, nl, nl + nf);

    let y_lbl = g.constant(padded_one_hot(&batch.y_lbl, k, cond_dim)?);
    let y_fake = g.constant(padded_one_hot(&batch.prior.y, k, cond_dim)?);
    let s_lbl = models.projection.forward(&mut g, &dv.projection, f_lbl, y_lbl);
    let s_fake = models.projection.forward(&mut g, &dv.projection, f_fake, y_fake);
    let adv_lbl = nodes::adv_labeled(&mut g, s_lbl, s_fake)?;

    let p_lbl = models.classifier.forward(&mut g, &dv.classifier, f_lbl);
    let t_lbl = g.constant(one_hot_rows(&batch.y_lbl, k)?);

    let adv_unlbl = if nu > 0 && method.name.uses_unlabeled() {
        let f_u = g.slice_rows(f_all, nl + nf, nl + nf + nu);
        unlabeled_term(&mut g, models, &dv.classifier, f_u, &dv.projection, batch, method, condition_grad)?
    } else {
        g.scalar(0.0)
    };

    let cls = match method.name {
        MethodName::Ossgan => {
            let (fp, ft) = if method.flags.use_fake_cls {
                let p = models.classifier.forward(&mut g, &dv.classifier, f_fake);
                let t = g.constant(one_hot_rows(&batch.prior.y, k)?);
                (Some(p), Some(t))
            } else {
                (None, None)
            };
            let balance = nl as f64 / nf as f64;
            nodes::cls_loss_ossgan(&mut g, p_lbl, t_lbl, fp, ft, method.flags, balance)?
        }
        MethodName::Rejectgan | MethodName::Opensetgan => nodes::cls_cross_entropy(&mut g, p_lbl, t_lbl)?,
        _ => g.scalar(0.0),
    };

    let total = nodes::total_d(&mut g, adv_lbl, adv_unlbl, cls, method.lambda);
    let terms = LossTerms {
        adv_lbl: g.scalar_value(adv_lbl),
        adv_unlbl: g.scalar_value(adv_unlbl),
        cls: g.scalar_value(cls),
        lambda: method.lambda,
        total_d: g.scalar_value(total),
        total_g: 0.0,
    };
    let grads = g.backward(total);
    let vars = dv.features.iter().chain(&dv.projection).chain(&dv.classifier);
    let grads = vars
        .zip(models.disc_params())
        .map(|(v, t)| grads.get_or_zeros(*v, t.dim()))
        .collect();
    Ok((terms, grads))
}

fn padded_one_hot(labels: &[ClassIndex], k: usize, width: usize) -> Result<Tensor> {
    let mut t = Tensor::zeros((labels.len(), width));
    t.slice_mut(ndarray::s![.., ..k]).assign(&one_hot_rows(labels, k)?);
    Ok(t)
}

#[allow(clippy::too_many_arguments)]
fn unlabeled_term(
    g: &mut Graph,
    models: &ModelBundle,
    cls_vars: &[Var],
    f_u: Var,
    proj_vars: &[Var],
    batch: &DBatch,
    method: &MethodSpec,
    condition_grad: bool,
) -> Result<Var> {
    let k = models.config.k;
    let nu = batch.x_unlbl.nrows();
    let probs = models.classifier.forward(g, cls_vars, f_u);
    let hard = |g: &Graph| -> Vec<ProbVector> {
        g.value(probs)
            .axis_iter(Axis(0))
            .map(|r| ProbVector::new(r.to_vec()).expect("softmax rows are distributions"))
            .collect()
    };
    match method.name {
        MethodName::Ossgan => {
            let cond = if condition_grad {
                probs
            } else {
                let v = g.value(probs).clone();
                g.constant(v)
            };
            let s = models.projection.forward(g, proj_vars, f_u, cond);
            nodes::adv_unlabeled(g, s)
        }
        MethodName::Rejectgan => {
            let c = method.threshold.expect("validated");
            let ps = hard(g);
            let keep: Vec<bool> = ps.iter().map(|p| reject_mask(p, c)).collect();
            let labels: Vec<ClassIndex> = ps.iter().map(|p| ClassIndex(argmax_slice(p.as_slice()))).collect();
            let y = g.constant(one_hot_rows(&labels, k)?);
            let s = models.projection.forward(g, proj_vars, f_u, y);
            nodes::adv_unlabeled_reject(g, s, &keep)
        }
        MethodName::Opensetgan => {
            let c = method.threshold.expect("validated");
            let mut y = Tensor::zeros((nu, k + 1));
            for (i, p) in hard(g).iter().enumerate() {
                y[[i, threshold_label_extended(p, c).index().0]] = 1.0;
            }
            let y = g.constant(y);
            let s = models.projection.forward(g, proj_vars, f_u, y);
            nodes::adv_unlabeled(g, s)
        }
        MethodName::Randomgan => {
            let y = g.constant(one_hot_rows(&batch.random_labels, k)?);
            let s = models.projection.forward(g, proj_vars, f_u, y);
            nodes::adv_unlabeled(g, s)
        }
        MethodName::Singlegan => {
            let y = g.constant(Tensor::from_elem((nu, k), 1.0 / k as f64));
            let s = models.projection.forward(g, proj_vars, f_u, y);
            nodes::adv_unlabeled(g, s)
        }
        MethodName::Supervised => Ok(g.scalar(0.0)),
    }
}

/// Generator loss `-mean D(G(z, y), y)` and its gradient for every
/// generator tensor. The discriminator side is constant.
pub fn g_loss(
    models: &ModelBundle,
    prior: &PriorBatch,
    plans: Option<&[AugmentPlan]>,
    method: &MethodSpec,
) -> Result<(f64, Vec<Tensor>)> {
    let k = models.config.k;
    let cond_dim = models.projection.condition_dim();
    let mut g = Graph::new();
    let gp = models.generator.bind(&mut g, true);
    let dv = models.bind_disc(&mut g, false);
    let z = g.constant(prior.z.clone());
    let y_gen = g.constant(one_hot_rows(&prior.y, k)?);
    let mut x = models.generator.forward(&mut g, &gp, z, y_gen);
    if let Some(plans) = plans {
        x = g.augment(x, models.config.image, plans.to_vec());
    }
    let f = models.features.forward(&mut g, &dv.features, x);
    let y = g.constant(padded_one_hot(&prior.y, k, cond_dim)?);
    let s = models.projection.forward(&mut g, &dv.projection, f, y);
    let loss = if method.name == MethodName::Opensetgan {
        nodes::generator_loss_openset(&mut g, s)?
    } else {
        nodes::generator_loss(&mut g, s)?
    };
    let grads = g.backward(loss);
    let grads = gp
        .iter()
        .zip(models.generator.params())
        .map(|(v, t)| grads.get_or_zeros(*v, t.dim()))
        .collect();
    Ok((g.scalar_value(loss), grads))
}

/// Live training state: models, optimizers and every random stream.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub models: ModelBundle,
    pub method: MethodSpec,
    pub cfg: TrainConfig,
    opt_d: Adam,
    opt_g: Adam,
    augmenter: Augmenter,
    lbl_rng: ChaCha8Rng,
    unlbl_rng: ChaCha8Rng,
    label_rng: ChaCha8Rng,
    aug_rng: ChaCha8Rng,
    prior: PriorSampler,
    iteration: usize,
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

impl Trainer {
    pub fn new(ds: &OpenSetDataset, method: MethodSpec, cfg: TrainConfig) -> Result<Self> {
        method.validate()?;
        cfg.validate()?;
        if ds.n_labeled() == 0 {
            return Err(Error::Data("training needs at least one labeled sample".into()));
        }
        let models = ModelBundle::new(cfg.model_config(ds.k, ds.geom, &method), cfg.seed)?;
        Ok(Trainer {
            opt_d: Adam::new(AdamConfig::new(cfg.lr_d, cfg.betas.0, cfg.betas.1)),
            opt_g: Adam::new(AdamConfig::new(cfg.lr_g, cfg.betas.0, cfg.betas.1)),
            augmenter: if cfg.augment { Augmenter::default() } else { Augmenter::disabled() },
            lbl_rng: stream(cfg.seed, 1),
            unlbl_rng: stream(cfg.seed, 2),
            label_rng: stream(cfg.seed, 3),
            aug_rng: stream(cfg.seed, 4),
            prior: PriorSampler::new(cfg.latent_dim, ds.k, cfg.seed.wrapping_add(0x9e37_79b9)),
            models,
            method,
            cfg,
            iteration: 0,
        })
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    /// Draws labeled, unlabeled and prior batches with replacement.
    pub fn sample_d_batch(&mut self, ds: &OpenSetDataset) -> Result<DBatch> {
        let geom = ds.geom;
        let idx: Vec<usize> = (0..self.cfg.batch_labeled)
            .map(|_| self.lbl_rng.gen_range(0..ds.n_labeled()))
            .collect();
        let x_lbl = ds.labeled_x.select(Axis(0), &idx);
        let y_lbl = idx.iter().map(|&i| ds.labeled_y[i]).collect();
        let x_unlbl = if self.method.name.uses_unlabeled() && ds.n_unlabeled() > 0 {
            let idx: Vec<usize> = (0..self.cfg.batch_unlabeled)
                .map(|_| self.unlbl_rng.gen_range(0..ds.n_unlabeled()))
                .collect();
            ds.unlabeled_x.select(Axis(0), &idx)
        } else {
            Tensor::zeros((0, geom.len()))
        };
        let prior = self.prior.sample(self.cfg.batch_fake)?;
        let random_labels = if self.method.name == MethodName::Randomgan {
            (0..x_unlbl.nrows())
                .map(|_| ClassIndex(self.label_rng.gen_range(0..ds.k)))
                .collect()
        } else {
            Vec::new()
        };
        let plans = self.augmenter.enabled.then(|| {
            let n = x_lbl.nrows() + prior.y.len() + x_unlbl.nrows();
            self.augmenter.sample_plans(&mut self.aug_rng, n, geom)
        });
        Ok(DBatch {
            x_lbl,
            y_lbl,
            x_unlbl,
            prior,
            random_labels,
            plans,
        })
    }

    /// One Adam update of the discriminator side on `batch`.
    pub fn d_step(&mut self, batch: &DBatch) -> Result<LossTerms> {
        let (terms, grads) = d_loss(&self.models, batch, &self.method, self.cfg.unlabeled_condition_grad)?;
        if !terms.total_d.is_finite() {
            return Err(Error::Numerical(format!(
                "non-finite discriminator loss at iteration {}: {terms:?}; {}",
                self.iteration + 1,
                batch_stats(batch)
            )));
        }
        let before = self.models.generator.checksum();
        self.opt_d.step(self.models.disc_params_mut(), &grads);
        if self.models.generator.checksum() != before {
            return Err(Error::Numerical("discriminator update touched generator parameters".into()));
        }
        Ok(terms)
    }

    /// One Adam update of the generator on a fresh prior batch.
    pub fn g_step(&mut self) -> Result<f64> {
        let prior = self.prior.sample(self.cfg.batch_fake)?;
        let plans = self.augmenter.enabled.then(|| {
            self.augmenter
                .sample_plans(&mut self.aug_rng, prior.y.len(), self.models.config.image)
        });
        let (loss, grads) = g_loss(&self.models, &prior, plans.as_deref(), &self.method)?;
        if !loss.is_finite() {
            return Err(Error::Numerical(format!(
                "non-finite generator loss at iteration {}; latent mean {:.4}",
                self.iteration + 1,
                prior.z.mean().unwrap_or(f64::NAN)
            )));
        }
        let before = self.models.disc_checksum();
        self.opt_g.step(self.models.generator.params_mut(), &grads);
        if self.models.disc_checksum() != before {
            return Err(Error::Numerical("generator update touched discriminator parameters".into()));
        }
        Ok(loss)
    }

    /// One iteration: a discriminator update followed by a generator update.
    pub fn step(&mut self, ds: &OpenSetDataset) -> Result<LossTerms> {
        let batch = self.sample_d_batch(ds)?;
        let mut terms = self.d_step(&batch)?;
        terms.total_g = self.g_step()?;
        self.iteration += 1;
        Ok(terms)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            models: self.models.clone(),
            iteration: self.iteration,
            seed: self.cfg.seed,
            method: self.method,
        }
    }
}

fn batch_stats(batch: &DBatch) -> String {
    let describe = |name: &str, t: &Tensor| {
        if t.is_empty() {
            return format!("{name}: empty");
        }
        let min = t.iter().copied().fold(f64::INFINITY, f64::min);
        let max = t.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let nan = t.iter().filter(|v| !v.is_finite()).count();
        format!(
            "{name}: n={} mean={:.4} min={min:.4} max={max:.4} non-finite={nan}",
            t.nrows(),
            t.mean().unwrap_or(f64::NAN)
        )
    };
    [
        describe("labeled", &batch.x_lbl),
        describe("unlabeled", &batch.x_unlbl),
        describe("latent", &batch.prior.z),
    ]
    .join("; ")
}

/// One `losses.csv` row.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRow {
    pub iter: usize,
    pub adv_lbl: f64,
    pub adv_unlbl: f64,
    pub cls: f64,
    pub total_d: f64,
    pub total_g: f64,
}

impl LossRow {
    pub fn new(iter: usize, t: &LossTerms) -> Self {
        LossRow {
            iter,
            adv_lbl: t.adv_lbl,
            adv_unlbl: t.adv_unlbl,
            cls: t.cls,
            total_d: t.total_d,
            total_g: t.total_g,
        }
    }
}

/// One `metrics.csv` row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub iter: usize,
    pub fid: f64,
    pub is: f64,
    pub f18: f64,
    pub f8: f64,
    pub entropy_gap: f64,
    pub n_samples: usize,
    pub extractor_hash: String,
}

impl MetricRow {
    pub fn new(iter: usize, r: &MetricReport) -> Self {
        MetricRow {
            iter,
            fid: r.fid,
            is: r.is_score,
            f18: r.f_small,
            f8: r.f_large,
            entropy_gap: r.entropy_gap,
            n_samples: r.n_samples,
            extractor_hash: r.extractor_hash.clone(),
        }
    }
}

pub const LOSSES_FILE: &str = "losses.csv";
pub const METRICS_FILE: &str = "metrics.csv";
pub const RUN_FILE: &str = "run.json";

/// Resolved settings of a run, written next to its logs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub method: MethodSpec,
    pub train: TrainConfig,
    pub model: ModelConfig,
    pub n_labeled: usize,
    pub n_unlabeled: usize,
    pub data_manifest_hash: Option<String>,
    pub extractor_hash: Option<String>,
    pub final_iter: usize,
    pub checkpoints: Vec<String>,
}

impl RunManifest {
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(RUN_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

#[derive(Debug, Clone)]
pub struct RunArtifacts {
    pub losses: Vec<LossRow>,
    pub metrics: Vec<MetricRow>,
    pub reports: Vec<MetricReport>,
    pub models: ModelBundle,
    pub out_dir: Option<PathBuf>,
}

impl RunArtifacts {
    pub fn final_report(&self) -> Option<&MetricReport> {
        self.reports.last()
    }
}

/// Output options for [`train`].
#[derive(Debug, Clone, Default)]
pub struct RunOutput<'a> {
    pub dir: Option<&'a Path>,
    pub evaluator: Option<&'a Evaluator>,
    pub data_manifest_hash: Option<String>,
}

fn due(period: usize, iter: usize, last: usize) -> bool {
    iter == last || (period > 0 && iter.is_multiple_of(period))
}

/// Runs `cfg.total_iters` iterations and writes logs, checkpoints, sample
/// grids and the run manifest under `out.dir` when given.
pub fn train(ds: &OpenSetDataset, method: MethodSpec, cfg: TrainConfig, out: RunOutput<'_>) -> Result<RunArtifacts> {
    let mut trainer = Trainer::new(ds, method, cfg.clone())?;
    let t = cfg.total_iters;
    if let Some(dir) = out.dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut loss_log = out.dir.map(|d| csv::Writer::from_path(d.join(LOSSES_FILE))).transpose()?;
    let mut metric_log = match (out.dir, out.evaluator) {
        (Some(d), Some(_)) => Some(csv::Writer::from_path(d.join(METRICS_FILE))?),
        _ => None,
    };

    let mut losses = Vec::with_capacity(t);
    let mut metrics = Vec::new();
    let mut reports = Vec::new();
    let mut checkpoints = Vec::new();
    for _ in 0..t {
        let terms = trainer.step(ds)?;
        let iter = trainer.iteration();
        let row = LossRow::new(iter, &terms);
        if let Some(w) = loss_log.as_mut() {
            w.serialize(row)?;
        }
        losses.push(row);
        log::debug!("iter {iter}: {terms:?}");

        if let Some(ev) = out.evaluator {
            if due(cfg.eval_every, iter, t) {
                let report = ev.evaluate(&trainer.models)?;
                log::info!("{} iter {iter}: fid {:.4} gap {:.4}", method.label(), report.fid, report.entropy_gap);
                let mrow = MetricRow::new(iter, &report);
                if let Some(w) = metric_log.as_mut() {
                    w.serialize(&mrow)?;
                    w.flush().map_err(|e| Error::io(PathBuf::from(METRICS_FILE), e))?;
                }
                metrics.push(mrow);
                reports.push(report);
            }
        }
        if let Some(dir) = out.dir {
            if due(cfg.checkpoint_every, iter, t) {
                let name = format!("ckpt_{iter}.bin");
                trainer.checkpoint().save(&dir.join(&name))?;
                write_sample_grid(&trainer.models, &dir.join(format!("samples_{iter}.png")))?;
                checkpoints.push(name);
            }
        }
    }
    if let Some(w) = loss_log.as_mut() {
        w.flush().map_err(|e| Error::io(PathBuf::from(LOSSES_FILE), e))?;
    }

    if let Some(dir) = out.dir {
        let manifest = RunManifest {
            method,
            train: cfg,
            model: trainer.models.config.clone(),
            n_labeled: ds.n_labeled(),
            n_unlabeled: ds.n_unlabeled(),
            data_manifest_hash: out.data_manifest_hash.clone(),
            extractor_hash: out.evaluator.map(|e| e.extractor.hash().to_string()),
            final_iter: trainer.iteration(),
            checkpoints,
        };
        let path = dir.join(RUN_FILE);
        fs::write(&path, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&path, e))?;
    }
    Ok(RunArtifacts {
        losses,
        metrics,
        reports,
        models: trainer.models,
        out_dir: out.dir.map(Path::to_path_buf),
    })
}

/// Grid of generated samples: one row per class (up to 16), eight columns,
/// from a fixed latent seed.
pub fn write_sample_grid(models: &ModelBundle, path: &Path) -> Result<()> {
    const COLS: usize = 8;
    let geom = models.config.image;
    let rows = models.config.k.min(16);
    let mut prior = PriorSampler::new(models.config.latent_dim, models.config.k, 7);
    let z = prior.sample(rows * COLS)?.z;
    let labels: Vec<ClassIndex> = (0..rows * COLS).map(|i| ClassIndex(i / COLS)).collect();
    let x = models.generate(&z, &labels)?;
    let pad = 1;
    let (gh, gw) = (rows * (geom.h + pad) + pad, COLS * (geom.w + pad) + pad);
    let mut img = image::RgbImage::new(gw as u32, gh as u32);
    for (i, sample) in x.axis_iter(Axis(0)).enumerate() {
        let (oy, ox) = ((i / COLS) * (geom.h + pad) + pad, (i % COLS) * (geom.w + pad) + pad);
        for yy in 0..geom.h {
            for xx in 0..geom.w {
                let channel = |c: usize| {
                    let v = sample[c.min(geom.c - 1) * geom.area() + yy * geom.w + xx];
                    (((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round()) as u8
                };
                img.put_pixel((ox + xx) as u32, (oy + yy) as u32, image::Rgb([channel(0), channel(1), channel(2)]));
            }
        }
    }
    img.save(path)
        .map_err(|e| Error::io(path, std::io::Error::other(e.to_string())))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{build_splits, make_toy_corpus, SplitConfig};
    use approx::assert_abs_diff_eq;

    fn tiny_cfg(seed: u64) -> TrainConfig {
        TrainConfig {
            total_iters: 2,
            batch_labeled: 8,
            batch_unlabeled: 8,
            batch_fake: 8,
            seed,
            latent_dim: 6,
            embed_dim: 4,
            feature_dim: 12,
            g_width: 4,
            d_width: 3,
            ..TrainConfig::default()
        }
    }

    fn toy(ratio: f64) -> OpenSetDataset {
        let corpus = make_toy_corpus(6, 30, Geom::new(1, 8, 8), 0).unwrap();
        build_splits(&corpus, &SplitConfig::new(3, ratio, 1.0, 0)).unwrap()
    }

    #[test]
    fn method_names_roundtrip() {
        for m in MethodName::ALL {
            assert_eq!(m.as_str().parse::<MethodName>().unwrap(), m);
            assert_eq!(serde_json::to_string(&m).unwrap(), format!("\"{m}\""));
        }
        assert!("biggan".parse::<MethodName>().is_err());
    }

    #[test]
    fn threshold_only_for_threshold_methods() {
        assert!(MethodSpec::new(MethodName::Ossgan, Some(0.5), 0.2, AblationFlags::default()).is_err());
        assert!(MethodSpec::new(MethodName::Rejectgan, None, 0.2, AblationFlags::default()).is_err());
        assert!(MethodSpec::rejectgan(0.5, 0.2).is_ok());
        assert!(MethodSpec::new(MethodName::Ossgan, None, -0.1, AblationFlags::default()).is_err());
    }

    #[test]
    fn supervised_has_zero_unlabeled_term() {
        let ds = toy(0.2);
        let mut tr = Trainer::new(&ds, MethodSpec::supervised(), tiny_cfg(0)).unwrap();
        let t = tr.step(&ds).unwrap();
        assert_eq!(t.adv_unlbl, 0.0);
        assert_eq!(t.cls, 0.0);
    }

    #[test]
    fn ossgan_without_flags_uses_plain_cross_entropy() {
        let ds = toy(0.2);
        let flags = AblationFlags {
            use_entropy_reg: false,
            use_fake_cls: false,
        };
        let oss = MethodSpec::ossgan(0.2).with_flags(flags);
        let rej = MethodSpec::rejectgan(0.5, 0.2).unwrap();
        let mut a = Trainer::new(&ds, oss, tiny_cfg(3)).unwrap();
        let mut b = Trainer::new(&ds, rej, tiny_cfg(3)).unwrap();
        let ba = a.sample_d_batch(&ds).unwrap();
        let bb = b.sample_d_batch(&ds).unwrap();
        let ta = a.d_step(&ba).unwrap();
        let tb = b.d_step(&bb).unwrap();
        assert_abs_diff_eq!(ta.cls, tb.cls, epsilon = 1e-12);
        assert_abs_diff_eq!(ta.adv_lbl, tb.adv_lbl, epsilon = 1e-12);
    }

    #[test]
    fn logged_terms_compose() {
        let ds = toy(0.2);
        for m in [MethodSpec::ossgan(0.4), MethodSpec::opensetgan(0.5, 0.1).unwrap()] {
            let mut tr = Trainer::new(&ds, m, tiny_cfg(1)).unwrap();
            for _ in 0..3 {
                let t = tr.step(&ds).unwrap();
                assert_eq!(t.total_d, t.recomposed_d());
            }
        }
    }

    #[test]
    fn steps_respect_parameter_partition() {
        let ds = toy(0.2);
        for name in MethodName::ALL {
            let m = MethodSpec::new(name, name.uses_threshold().then_some(0.5), 0.2, AblationFlags::default()).unwrap();
            let mut tr = Trainer::new(&ds, m, tiny_cfg(2)).unwrap();
            let g0 = tr.models.generator.checksum();
            let d0 = tr.models.disc_checksum();
            let batch = tr.sample_d_batch(&ds).unwrap();
            tr.d_step(&batch).unwrap();
            assert_eq!(tr.models.generator.checksum(), g0);
            let d1 = tr.models.disc_checksum();
            assert_ne!(d1, d0);
            tr.g_step().unwrap();
            assert_eq!(tr.models.disc_checksum(), d1);
            assert_ne!(tr.models.generator.checksum(), g0);
        }
    }

    #[test]
    fn d_step_descends_on_frozen_batch() {
        let ds = toy(0.2);
        let mut decreased = 0;
        for seed in 0..10 {
            let mut cfg = tiny_cfg(seed);
            cfg.lr_d = 1e-5;
            let mut tr = Trainer::new(&ds, MethodSpec::ossgan(0.2), cfg).unwrap();
            let batch = tr.sample_d_batch(&ds).unwrap();
            let before = tr.d_step(&batch).unwrap().total_d;
            let after = d_loss(&tr.models, &batch, &tr.method, true).unwrap().0.total_d;
            decreased += usize::from(after < before);
        }
        assert_eq!(decreased, 10);
    }

    #[test]
    fn g_loss_matches_external_scores() {
        let ds = toy(0.2);
        let tr = Trainer::new(&ds, MethodSpec::ossgan(0.2), tiny_cfg(4)).unwrap();
        let prior = PriorSampler::new(6, 3, 9).sample(8).unwrap();
        let (loss, _) = g_loss(&tr.models, &prior, None, &tr.method).unwrap();
        let x = tr.models.generate(&prior.z, &prior.y).unwrap();
        let y = one_hot_rows(&prior.y, 3).unwrap();
        let s = tr.models.discriminator_score(&x, &y).unwrap();
        assert_abs_diff_eq!(loss, -s.iter().sum::<f64>() / s.len() as f64, epsilon = 1e-12);
    }

    #[test]
    fn zero_projection_gives_zero_generator_gradient() {
        let ds = toy(0.2);
        let mut tr = Trainer::new(&ds, MethodSpec::ossgan(0.2), tiny_cfg(4)).unwrap();
        tr.models.projection = crate::models::ProjectionHead::zeros(12, 3);
        let prior = PriorSampler::new(6, 3, 9).sample(8).unwrap();
        let (loss, grads) = g_loss(&tr.models, &prior, None, &tr.method).unwrap();
        assert_eq!(loss, 0.0);
        assert!(grads.iter().all(|g| g.iter().all(|v| *v == 0.0)));
    }

    #[test]
    fn openset_generator_matches_with_null_column() {
        let ds = toy(0.2);
        let oss = Trainer::new(&ds, MethodSpec::ossgan(0.2), tiny_cfg(5)).unwrap();
        let mut ose = Trainer::new(&ds, MethodSpec::opensetgan(0.5, 0.2).unwrap(), tiny_cfg(5)).unwrap();
        ose.models = oss.models.clone();
        let mut embed = Tensor::zeros((4, 12));
        embed.slice_mut(ndarray::s![..3, ..]).assign(&oss.models.projection.embed);
        ose.models.projection.embed = embed;
        ose.models.config.condition_dim = 4;
        let prior = PriorSampler::new(6, 3, 2).sample(8).unwrap();
        let (a, ga) = g_loss(&oss.models, &prior, None, &oss.method).unwrap();
        let (b, gb) = g_loss(&ose.models, &prior, None, &ose.method).unwrap();
        assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        for (x, y) in ga.iter().zip(&gb) {
            assert!(x.iter().zip(y).all(|(u, v)| (u - v).abs() < 1e-12));
        }
    }

    #[test]
    fn identical_seeds_give_identical_logs() {
        let ds = toy(0.2);
        let dir = tempfile::tempdir().unwrap();
        let run = |sub: &str| {
            let out = dir.path().join(sub);
            train(&ds, MethodSpec::ossgan(0.2), tiny_cfg(11), RunOutput { dir: Some(&out), ..Default::default() }).unwrap();
            fs::read(out.join(LOSSES_FILE)).unwrap()
        };
        assert_eq!(run("a"), run("b"));
    }

    #[test]
    fn one_iteration_writes_one_of_each() {
        let ds = toy(0.2);
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny_cfg(0);
        cfg.total_iters = 1;
        let art = train(&ds, MethodSpec::randomgan(), cfg, RunOutput { dir: Some(dir.path()), ..Default::default() }).unwrap();
        assert_eq!(art.losses.len(), 1);
        let text = fs::read_to_string(dir.path().join(LOSSES_FILE)).unwrap();
        assert_eq!(text.lines().count(), 2);
        assert!(text.starts_with("iter,adv_lbl,adv_unlbl,cls,total_d,total_g"));
        assert!(dir.path().join("ckpt_1.bin").exists());
        assert!(dir.path().join("ckpt_1.json").exists());
        assert!(dir.path().join("samples_1.png").exists());
        let manifest = RunManifest::load(dir.path()).unwrap();
        assert_eq!(manifest.checkpoints, vec!["ckpt_1.bin".to_string()]);
    }

    #[test]
    fn full_labels_match_supervised_on_first_labeled_term() {
        let corpus = make_toy_corpus(3, 30, Geom::new(1, 8, 8), 0).unwrap();
        let ds = build_splits(&corpus, &SplitConfig::new(3, 1.0, 1.0, 0)).unwrap();
        assert_eq!(ds.n_unlabeled(), 0);
        let mut a = Trainer::new(&ds, MethodSpec::ossgan(0.2), tiny_cfg(6)).unwrap();
        let mut b = Trainer::new(&ds, MethodSpec::supervised(), tiny_cfg(6)).unwrap();
        let ta = a.step(&ds).unwrap();
        let tb = b.step(&ds).unwrap();
        assert!((ta.adv_lbl - tb.adv_lbl).abs() < 1e-6);
    }
}
