//! Desk-scale generator, shared feature extractor, projection head and
//! auxiliary classifier head.
//!
//! The discriminator is `D(x, y) = W1 D~(x) + b + D~(x)^T W2 y` and the
//! classifier is `C(D~(x))`; both read the same [`FeatureExtractor`]
//! activations.

use std::fs;
use std::path::Path;

use ndarray::Axis;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Geom, Graph, Tensor, Var};
use crate::label_algebra::{ClassIndex, ProbVector};
use crate::trainer::MethodSpec;

/// Per-variable latent width of the hierarchical latent at full scale.
pub const FULL_SCALE_LATENT_CHUNK: usize = 20;
/// Shared class-embedding width at full scale.
pub const FULL_SCALE_SHARED_EMBED: usize = 128;

const LEAK: f64 = 0.2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Number of known classes `K`.
    pub k: usize,
    /// Columns of the projection embedding: `K`, or `K + 1` for the
    /// open-set-class method.
    pub condition_dim: usize,
    pub latent_dim: usize,
    pub embed_dim: usize,
    pub feature_dim: usize,
    pub image: Geom,
    pub g_width: usize,
    pub d_width: usize,
    pub spectral_norm: bool,
    pub self_attention: bool,
}

impl ModelConfig {
    /// Desk defaults for `k` classes of 1x8x8 images.
    pub fn desk(k: usize) -> Self {
        ModelConfig {
            k,
            condition_dim: k,
            latent_dim: 32,
            embed_dim: 32,
            feature_dim: 128,
            image: Geom::new(1, 8, 8),
            g_width: 16,
            d_width: 16,
            spectral_norm: false,
            self_attention: false,
        }
    }

    pub fn with_condition_dim(mut self, dim: usize) -> Self {
        self.condition_dim = dim;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.k < 2 {
            return Err(Error::Config(format!("need K >= 2 classes, got {}", self.k)));
        }
        if self.condition_dim != self.k && self.condition_dim != self.k + 1 {
            return Err(Error::Config(format!(
                "projection condition dim {} must be K or K+1 (K = {})",
                self.condition_dim, self.k
            )));
        }
        if !self.image.h.is_multiple_of(4) || !self.image.w.is_multiple_of(4) || self.image.h == 0 {
            return Err(Error::Config(format!(
                "image side must be a positive multiple of 4, got {}x{}",
                self.image.h, self.image.w
            )));
        }
        if self.g_width < 2 || self.d_width < 1 {
            return Err(Error::Config("network widths too small".into()));
        }
        if self.self_attention {
            return Err(Error::Config("self-attention is not available at desk scale".into()));
        }
        Ok(())
    }
}

/// Anything holding trainable tensors.
pub trait Module {
    fn params(&self) -> Vec<&Tensor>;
    fn params_mut(&mut self) -> Vec<&mut Tensor>;

    /// Adds every parameter to `g`, in [`Module::params`] order.
    fn bind(&self, g: &mut Graph, trainable: bool) -> Vec<Var> {
        self.params()
            .into_iter()
            .map(|t| {
                if trainable {
                    g.param(t.clone())
                } else {
                    g.constant(t.clone())
                }
            })
            .collect()
    }

    fn num_params(&self) -> usize {
        self.params().iter().map(|t| t.len()).sum()
    }

    /// Order-sensitive digest of every parameter bit pattern.
    fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for t in self.params() {
            for v in t.iter() {
                h ^= v.to_bits();
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        }
        h
    }
}

fn normal(rng: &mut impl Rng, shape: (usize, usize), std: f64) -> Tensor {
    Tensor::from_shape_fn(shape, |_| std * rng.sample::<f64, _>(StandardNormal))
}

fn he(rng: &mut impl Rng, fan_in: usize, fan_out: usize) -> Tensor {
    let gain = (2.0 / (1.0 + LEAK * LEAK)).sqrt();
    normal(rng, (fan_in, fan_out), gain / (fan_in as f64).sqrt())
}

fn conv_weight(rng: &mut impl Rng, cin: usize, cout: usize) -> Tensor {
    he(rng, cin * 9, cout).reversed_axes().as_standard_layout().to_owned()
}

/// `G(z, y)`: dense projection of `[z; E y]` followed by two upsampling
/// convolution blocks and a `tanh` output convolution.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Generator {
    pub embed: Tensor,
    pub fc_w: Tensor,
    pub fc_b: Tensor,
    pub conv1_w: Tensor,
    pub conv1_b: Tensor,
    pub conv2_w: Tensor,
    pub conv2_b: Tensor,
    pub out_w: Tensor,
    pub out_b: Tensor,
    cfg: ModelConfig,
}

impl Generator {
    pub fn new(cfg: &ModelConfig, rng: &mut impl Rng) -> Self {
        let gw = cfg.g_width;
        let start = Geom::new(gw, cfg.image.h / 4, cfg.image.w / 4);
        Generator {
            embed: normal(rng, (cfg.k, cfg.embed_dim), 1.0),
            fc_w: he(rng, cfg.latent_dim + cfg.embed_dim, start.len()),
            fc_b: Tensor::zeros((1, start.len())),
            conv1_w: conv_weight(rng, gw, gw),
            conv1_b: Tensor::zeros((1, gw)),
            conv2_w: conv_weight(rng, gw, gw / 2),
            conv2_b: Tensor::zeros((1, gw / 2)),
            out_w: conv_weight(rng, gw / 2, cfg.image.c) * (1.0 / 2f64.sqrt()),
            out_b: Tensor::zeros((1, cfg.image.c)),
            cfg: cfg.clone(),
        }
    }

    /// `p` must come from `self.bind`; `y` is `n x K` (one-hot rows).
    pub fn forward(&self, g: &mut Graph, p: &[Var], z: Var, y: Var) -> Var {
        let gw = self.cfg.g_width;
        let (h, w) = (self.cfg.image.h, self.cfg.image.w);
        let e = g.matmul(y, p[0]);
        let input = g.concat_cols(&[z, e]);
        let x = g.matmul(input, p[1]);
        let x = g.add_row(x, p[2]);
        let x = g.leaky_relu(x, LEAK);
        let x = g.upsample2x(x, Geom::new(gw, h / 4, w / 4));
        let x = g.conv3x3(x, p[3], p[4], Geom::new(gw, h / 2, w / 2));
        let x = g.leaky_relu(x, LEAK);
        let x = g.upsample2x(x, Geom::new(gw, h / 2, w / 2));
        let x = g.conv3x3(x, p[5], p[6], Geom::new(gw, h, w));
        let x = g.leaky_relu(x, LEAK);
        let x = g.conv3x3(x, p[7], p[8], Geom::new(gw / 2, h, w));
        g.tanh(x)
    }

    /// Samples for latent rows `z` and class indices `y`.
    pub fn generate(&self, z: &Tensor, y: &[ClassIndex]) -> Result<Tensor> {
        if z.ncols() != self.cfg.latent_dim || z.nrows() != y.len() {
            return Err(Error::Config(format!(
                "generate expects {} latents of width {}, got {}x{}",
                y.len(),
                self.cfg.latent_dim,
                z.nrows(),
                z.ncols()
            )));
        }
        let onehot = one_hot_rows(y, self.cfg.k)?;
        let mut g = Graph::new();
        let p = self.bind(&mut g, false);
        let zv = g.constant(z.clone());
        let yv = g.constant(onehot);
        let out = self.forward(&mut g, &p, zv, yv);
        Ok(g.value(out).clone())
    }
}

impl Module for Generator {
    fn params(&self) -> Vec<&Tensor> {
        vec![
            &self.embed,
            &self.fc_w,
            &self.fc_b,
            &self.conv1_w,
            &self.conv1_b,
            &self.conv2_w,
            &self.conv2_b,
            &self.out_w,
            &self.out_b,
        ]
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        vec![
            &mut self.embed,
            &mut self.fc_w,
            &mut self.fc_b,
            &mut self.conv1_w,
            &mut self.conv1_b,
            &mut self.conv2_w,
            &mut self.conv2_b,
            &mut self.out_w,
            &mut self.out_b,
        ]
    }
}

/// `D~`: three convolutions with average pooling in between, global sum
/// pooling, then a dense map to `h` features.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FeatureExtractor {
    pub conv1_w: Tensor,
    pub conv1_b: Tensor,
    pub conv2_w: Tensor,
    pub conv2_b: Tensor,
    pub conv3_w: Tensor,
    pub conv3_b: Tensor,
    pub fc_w: Tensor,
    pub fc_b: Tensor,
    cfg: ModelConfig,
}

impl FeatureExtractor {
    pub fn new(cfg: &ModelConfig, rng: &mut impl Rng) -> Self {
        let dw = cfg.d_width;
        FeatureExtractor {
            conv1_w: conv_weight(rng, cfg.image.c, dw),
            conv1_b: Tensor::zeros((1, dw)),
            conv2_w: conv_weight(rng, dw, 2 * dw),
            conv2_b: Tensor::zeros((1, 2 * dw)),
            conv3_w: conv_weight(rng, 2 * dw, 2 * dw),
            conv3_b: Tensor::zeros((1, 2 * dw)),
            fc_w: normal(rng, (2 * dw, cfg.feature_dim), 0.5 / (2.0 * dw as f64).sqrt()),
            fc_b: Tensor::zeros((1, cfg.feature_dim)),
            cfg: cfg.clone(),
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.cfg.feature_dim
    }

    pub fn forward(&self, g: &mut Graph, p: &[Var], x: Var) -> Var {
        let Geom { c, h, w } = self.cfg.image;
        let dw = self.cfg.d_width;
        let sn = |g: &mut Graph, v: Var| if self.cfg.spectral_norm { g.spectral_norm(v) } else { v };
        let (w1, w2, w3, wf) = (sn(g, p[0]), sn(g, p[2]), sn(g, p[4]), sn(g, p[6]));
        let a = g.conv3x3(x, w1, p[1], Geom::new(c, h, w));
        let a = g.leaky_relu(a, LEAK);
        let a = g.avg_pool2x(a, Geom::new(dw, h, w));
        let a = g.conv3x3(a, w2, p[3], Geom::new(dw, h / 2, w / 2));
        let a = g.leaky_relu(a, LEAK);
        let a = g.avg_pool2x(a, Geom::new(2 * dw, h / 2, w / 2));
        let a = g.conv3x3(a, w3, p[5], Geom::new(2 * dw, h / 4, w / 4));
        let a = g.leaky_relu(a, LEAK);
        let a = g.sum_pool(a, Geom::new(2 * dw, h / 4, w / 4));
        let f = g.matmul(a, wf);
        g.add_row(f, p[7])
    }

    /// `D~(x)` for a batch of flattened samples.
    pub fn features(&self, x: &Tensor) -> Result<Tensor> {
        check_samples(x, self.cfg.image)?;
        let mut g = Graph::new();
        let p = self.bind(&mut g, false);
        let xv = g.constant(x.clone());
        let f = self.forward(&mut g, &p, xv);
        Ok(g.value(f).clone())
    }
}

impl Module for FeatureExtractor {
    fn params(&self) -> Vec<&Tensor> {
        vec![
            &self.conv1_w,
            &self.conv1_b,
            &self.conv2_w,
            &self.conv2_b,
            &self.conv3_w,
            &self.conv3_b,
            &self.fc_w,
            &self.fc_b,
        ]
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        vec![
            &mut self.conv1_w,
            &mut self.conv1_b,
            &mut self.conv2_w,
            &mut self.conv2_b,
            &mut self.conv3_w,
            &mut self.conv3_b,
            &mut self.fc_w,
            &mut self.fc_b,
        ]
    }
}

/// `W1 f + b + f^T W2 y`. `embed` stores `W2^T` (`condition_dim x h`).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProjectionHead {
    pub w1: Tensor,
    pub b: Tensor,
    pub embed: Tensor,
    /// Divide `w1` and `embed` by their largest singular values.
    #[serde(default)]
    pub spectral_norm: bool,
}

impl ProjectionHead {
    pub fn new(feature_dim: usize, condition_dim: usize, rng: &mut impl Rng) -> Self {
        let std = 1.0 / (feature_dim as f64).sqrt();
        ProjectionHead {
            w1: normal(rng, (feature_dim, 1), std),
            b: Tensor::zeros((1, 1)),
            embed: normal(rng, (condition_dim, feature_dim), std),
            spectral_norm: false,
        }
    }

    pub fn zeros(feature_dim: usize, condition_dim: usize) -> Self {
        ProjectionHead {
            w1: Tensor::zeros((feature_dim, 1)),
            b: Tensor::zeros((1, 1)),
            embed: Tensor::zeros((condition_dim, feature_dim)),
            spectral_norm: false,
        }
    }

    pub fn condition_dim(&self) -> usize {
        self.embed.nrows()
    }

    pub fn feature_dim(&self) -> usize {
        self.w1.nrows()
    }

    /// Scores `n x 1` for features `f` (`n x h`) and conditions `y`
    /// (`n x condition_dim`, any real rows).
    pub fn forward(&self, g: &mut Graph, p: &[Var], f: Var, y: Var) -> Var {
        let (w1, embed) = if self.spectral_norm {
            (g.spectral_norm(p[0]), g.spectral_norm(p[2]))
        } else {
            (p[0], p[2])
        };
        let lin = g.matmul(f, w1);
        let lin = g.add_row(lin, p[1]);
        let proj = g.matmul(y, embed);
        let inner = g.row_dot(f, proj);
        g.add(lin, inner)
    }

    /// Scores for precomputed features.
    pub fn score(&self, features: &Tensor, conditions: &Tensor) -> Result<Vec<f64>> {
        if conditions.ncols() != self.condition_dim() {
            return Err(Error::Config(format!(
                "condition length {} does not match projection columns {}",
                conditions.ncols(),
                self.condition_dim()
            )));
        }
        if features.ncols() != self.feature_dim() || features.nrows() != conditions.nrows() {
            return Err(Error::Config(format!(
                "feature batch {:?} incompatible with {} conditions of width h = {}",
                features.dim(),
                conditions.nrows(),
                self.feature_dim()
            )));
        }
        let mut g = Graph::new();
        let p = self.bind(&mut g, false);
        let fv = g.constant(features.clone());
        let yv = g.constant(conditions.clone());
        let s = self.forward(&mut g, &p, fv, yv);
        Ok(g.value(s).column(0).to_vec())
    }
}

impl Module for ProjectionHead {
    fn params(&self) -> Vec<&Tensor> {
        vec![&self.w1, &self.b, &self.embed]
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.w1, &mut self.b, &mut self.embed]
    }
}

/// One dense layer and a softmax over the `K` known classes.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClassifierHead {
    pub w: Tensor,
    pub b: Tensor,
}

impl ClassifierHead {
    /// Zero-initialized, so the initial output is exactly uniform.
    pub fn new(feature_dim: usize, k: usize) -> Self {
        ClassifierHead {
            w: Tensor::zeros((feature_dim, k)),
            b: Tensor::zeros((1, k)),
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &[Var], f: Var) -> Var {
        let logits = g.matmul(f, p[0]);
        let logits = g.add_row(logits, p[1]);
        g.softmax_rows(logits)
    }
}

impl Module for ClassifierHead {
    fn params(&self) -> Vec<&Tensor> {
        vec![&self.w, &self.b]
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.w, &mut self.b]
    }
}

/// Every network of one run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelBundle {
    pub config: ModelConfig,
    pub generator: Generator,
    pub features: FeatureExtractor,
    pub projection: ProjectionHead,
    pub classifier: ClassifierHead,
}

/// Variables of the discriminator side bound into one graph.
pub struct DiscVars {
    pub features: Vec<Var>,
    pub projection: Vec<Var>,
    pub classifier: Vec<Var>,
}

impl ModelBundle {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let generator = Generator::new(&config, &mut rng);
        let features = FeatureExtractor::new(&config, &mut rng);
        let mut projection = ProjectionHead::new(config.feature_dim, config.condition_dim, &mut rng);
        projection.spectral_norm = config.spectral_norm;
        let classifier = ClassifierHead::new(config.feature_dim, config.k);
        Ok(ModelBundle {
            config,
            generator,
            features,
            projection,
            classifier,
        })
    }

    pub fn bind_disc(&self, g: &mut Graph, trainable: bool) -> DiscVars {
        DiscVars {
            features: self.features.bind(g, trainable),
            projection: self.projection.bind(g, trainable),
            classifier: self.classifier.bind(g, trainable),
        }
    }

    /// Discriminator-side parameters in a fixed order (`D~`, `W1`, `b`,
    /// `W2`, `C`).
    pub fn disc_params(&self) -> Vec<&Tensor> {
        let mut v = self.features.params();
        v.extend(self.projection.params());
        v.extend(self.classifier.params());
        v
    }

    pub fn disc_params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = self.features.params_mut();
        v.extend(self.projection.params_mut());
        v.extend(self.classifier.params_mut());
        v
    }

    pub fn disc_checksum(&self) -> u64 {
        self.features.checksum() ^ self.projection.checksum().rotate_left(21)
            ^ self.classifier.checksum().rotate_left(42)
    }

    /// `D(x, y)` for samples `x` (`n x d`) and condition rows `y`.
    pub fn discriminator_score(&self, x: &Tensor, y: &Tensor) -> Result<Vec<f64>> {
        if y.nrows() != x.nrows() {
            return Err(Error::Config(format!(
                "{} samples but {} conditions",
                x.nrows(),
                y.nrows()
            )));
        }
        if y.ncols() != self.projection.condition_dim() {
            return Err(Error::Config(format!(
                "condition length {} does not match projection columns {}",
                y.ncols(),
                self.projection.condition_dim()
            )));
        }
        let f = self.features.features(x)?;
        self.projection.score(&f, y)
    }

    /// Classifier probabilities `C(D~(x))`, one row per sample.
    pub fn classify_batch(&self, x: &Tensor) -> Result<Tensor> {
        check_samples(x, self.config.image)?;
        let mut g = Graph::new();
        let dv = self.bind_disc(&mut g, false);
        let xv = g.constant(x.clone());
        let f = self.features.forward(&mut g, &dv.features, xv);
        let p = self.classifier.forward(&mut g, &dv.classifier, f);
        Ok(g.value(p).clone())
    }

    pub fn classify(&self, x: &Tensor) -> Result<Vec<ProbVector>> {
        let p = self.classify_batch(x)?;
        p.axis_iter(Axis(0))
            .map(|row| ProbVector::new(row.to_vec()))
            .collect()
    }

    pub fn generate(&self, z: &Tensor, y: &[ClassIndex]) -> Result<Tensor> {
        self.generator.generate(z, y)
    }
}

fn check_samples(x: &Tensor, image: Geom) -> Result<()> {
    if x.ncols() != image.len() {
        return Err(Error::Config(format!(
            "sample width {} does not match image shape {}x{}x{}",
            x.ncols(),
            image.c,
            image.h,
            image.w
        )));
    }
    Ok(())
}

/// `n x k` matrix of one-hot rows.
pub fn one_hot_rows(labels: &[ClassIndex], k: usize) -> Result<Tensor> {
    let mut t = Tensor::zeros((labels.len(), k));
    for (i, c) in labels.iter().enumerate() {
        if c.0 >= k {
            return Err(Error::Domain(format!("class {} outside 1..={k}", c.one_based())));
        }
        t[[i, c.0]] = 1.0;
    }
    Ok(t)
}

/// A batch drawn from `q(z, y) = q(z) q(y)`.
#[derive(Debug, Clone, PartialEq)]
pub struct PriorBatch {
    pub z: Tensor,
    pub y: Vec<ClassIndex>,
}

/// Standard normal latents and uniform one-hot classes.
#[derive(Debug, Clone)]
pub struct PriorSampler {
    latent_dim: usize,
    k: usize,
    rng: ChaCha8Rng,
}

impl PriorSampler {
    pub fn new(latent_dim: usize, k: usize, seed: u64) -> Self {
        PriorSampler {
            latent_dim,
            k,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn sample(&mut self, n: usize) -> Result<PriorBatch> {
        if n == 0 {
            return Err(Error::Validation("prior batch size must be >= 1".into()));
        }
        let rng = &mut self.rng;
        let z = Tensor::from_shape_fn((n, self.latent_dim), |_| rng.sample(StandardNormal));
        let y = (0..n).map(|_| ClassIndex(self.rng.gen_range(0..self.k))).collect();
        Ok(PriorBatch { z, y })
    }
}

/// Sidecar manifest written next to every checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub method: String,
    #[serde(rename = "K")]
    pub k: usize,
    pub l: usize,
    pub h: usize,
    pub iteration: usize,
    pub seed: u64,
}

/// Everything needed to resume evaluation of a run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub models: ModelBundle,
    pub iteration: usize,
    pub seed: u64,
    pub method: MethodSpec,
}

impl Checkpoint {
    pub fn manifest(&self) -> CheckpointManifest {
        CheckpointManifest {
            method: self.method.name.to_string(),
            k: self.models.config.k,
            l: self.models.config.latent_dim,
            h: self.models.config.feature_dim,
            iteration: self.iteration,
            seed: self.seed,
        }
    }

    /// Writes `path` (bincode) and `path` with a `.json` extension.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = bincode::serialize(self)?;
        fs::write(path, bytes).map_err(|e| Error::io(path, e))?;
        let sidecar = path.with_extension("json");
        let json = serde_json::to_string_pretty(&self.manifest())?;
        fs::write(&sidecar, json).map_err(|e| Error::io(&sidecar, e))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Ok(bincode::deserialize(&bytes)?)
    }
}
