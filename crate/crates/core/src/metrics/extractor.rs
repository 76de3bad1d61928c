//! Small supervised network whose penultimate activations serve as the
//! metric feature space.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::FeatureSet;
use crate::dataset::LabeledCorpus;
use crate::error::{Error, Result};
use crate::graph::{Graph, Tensor, Var};
use crate::label_algebra::argmax_slice;
use crate::optim::{Adam, AdamConfig};

pub const EMBED_DIM: usize = 64;
const HIDDEN: usize = 128;
const LEAK: f64 = 0.2;

/// Holdout accuracy under which a fitted extractor is flagged.
pub const MIN_HOLDOUT_ACCURACY: f64 = 0.8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExtractorFitConfig {
    pub seed: u64,
    pub iters: usize,
    pub batch: usize,
    pub lr: f64,
    pub holdout_fraction: f64,
}

impl Default for ExtractorFitConfig {
    fn default() -> Self {
        ExtractorFitConfig {
            seed: 0,
            iters: 1500,
            batch: 128,
            lr: 1e-3,
            holdout_fraction: 0.1,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Mlp {
    w1: Tensor,
    b1: Tensor,
    w2: Tensor,
    b2: Tensor,
    w3: Tensor,
    b3: Tensor,
}

impl Mlp {
    fn new(input: usize, classes: usize, rng: &mut impl Rng) -> Self {
        let init = |rng: &mut dyn rand::RngCore, i: usize, o: usize| {
            let std = (2.0 / i as f64).sqrt();
            Tensor::from_shape_fn((i, o), |_| std * rng.sample::<f64, _>(StandardNormal))
        };
        Mlp {
            w1: init(rng, input, HIDDEN),
            b1: Tensor::zeros((1, HIDDEN)),
            w2: init(rng, HIDDEN, EMBED_DIM),
            b2: Tensor::zeros((1, EMBED_DIM)),
            w3: init(rng, EMBED_DIM, classes) * 0.1,
            b3: Tensor::zeros((1, classes)),
        }
    }

    fn params(&self) -> [&Tensor; 6] {
        [&self.w1, &self.b1, &self.w2, &self.b2, &self.w3, &self.b3]
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        vec![
            &mut self.w1,
            &mut self.b1,
            &mut self.w2,
            &mut self.b2,
            &mut self.w3,
            &mut self.b3,
        ]
    }

    /// (embedding, probabilities)
    fn forward(&self, g: &mut Graph, p: &[Var], x: Var) -> (Var, Var) {
        let h = g.matmul(x, p[0]);
        let h = g.add_row(h, p[1]);
        let h = g.leaky_relu(h, LEAK);
        let e = g.matmul(h, p[2]);
        let e = g.add_row(e, p[3]);
        let e = g.leaky_relu(e, LEAK);
        let logits = g.matmul(e, p[4]);
        let logits = g.add_row(logits, p[5]);
        (e, g.softmax_rows(logits))
    }

    fn bind(&self, g: &mut Graph, trainable: bool) -> Vec<Var> {
        self.params()
            .iter()
            .map(|t| if trainable { g.param((*t).clone()) } else { g.constant((*t).clone()) })
            .collect()
    }
}

/// Frozen metric network plus a content hash shared by every run that uses
/// it.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricExtractor {
    net: Mlp,
    pub input_dim: usize,
    pub n_classes: usize,
    pub holdout_accuracy: f64,
    hash: String,
}

impl MetricExtractor {
    pub fn hash(&self) -> &str {
        &self.hash
    }

    pub fn is_under_trained(&self) -> bool {
        self.holdout_accuracy < MIN_HOLDOUT_ACCURACY
    }

    fn run(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        if x.ncols() != self.input_dim {
            return Err(Error::Config(format!(
                "extractor expects width {}, got {}",
                self.input_dim,
                x.ncols()
            )));
        }
        let mut g = Graph::new();
        let p = self.net.bind(&mut g, false);
        let xv = g.constant(x.clone());
        let (e, probs) = self.net.forward(&mut g, &p, xv);
        Ok((g.value(e).clone(), g.value(probs).clone()))
    }

    pub fn embed(&self, x: &Tensor) -> Result<FeatureSet> {
        Ok(FeatureSet::new(self.run(x)?.0))
    }

    /// Class probabilities over the corpus classes, for the Inception Score.
    pub fn class_probs(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.run(x)?.1)
    }

    pub fn accuracy(&self, x: &Tensor, labels: &[usize]) -> Result<f64> {
        let probs = self.class_probs(x)?;
        let hits = probs
            .rows()
            .into_iter()
            .zip(labels)
            .filter(|(row, &l)| argmax_slice(row.as_slice().unwrap()) == l)
            .count();
        Ok(hits as f64 / labels.len().max(1) as f64)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, bincode::serialize(self)?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let ext: MetricExtractor = bincode::deserialize(&bytes)?;
        if ext.hash != content_hash(&ext.net)? {
            return Err(Error::Data(format!("{}: extractor hash mismatch", path.display())));
        }
        Ok(ext)
    }
}

fn content_hash(net: &Mlp) -> Result<String> {
    Ok(hex::encode(Sha256::digest(bincode::serialize(net)?)))
}

/// Trains the metric network on every labeled sample of `corpus` except a
/// seeded holdout, which measures accuracy.
pub fn feature_extractor_fit(corpus: &LabeledCorpus, cfg: &ExtractorFitConfig) -> Result<MetricExtractor> {
    if corpus.len() < 2 || corpus.n_classes < 2 {
        return Err(Error::Data("extractor needs a corpus with >= 2 classes".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    order.shuffle(&mut rng);
    let n_hold = ((corpus.len() as f64) * cfg.holdout_fraction).round() as usize;
    let n_hold = n_hold.clamp(1, corpus.len() - 1);
    let (hold, train) = order.split_at(n_hold);

    let mut net = Mlp::new(corpus.geom.len(), corpus.n_classes, &mut rng);
    let mut opt = Adam::new(AdamConfig::new(cfg.lr, 0.9, 0.999));
    for _ in 0..cfg.iters {
        let idx: Vec<usize> = (0..cfg.batch).map(|_| train[rng.gen_range(0..train.len())]).collect();
        let x = corpus.images.select(ndarray::Axis(0), &idx);
        let mut y = Tensor::zeros((idx.len(), corpus.n_classes));
        for (r, &i) in idx.iter().enumerate() {
            y[[r, corpus.labels[i]]] = 1.0;
        }
        let mut g = Graph::new();
        let p = net.bind(&mut g, true);
        let xv = g.constant(x);
        let yv = g.constant(y);
        let (_, probs) = net.forward(&mut g, &p, xv);
        let loss = crate::losses::nodes::cls_cross_entropy(&mut g, probs, yv)?;
        let grads = g.backward(loss);
        let gs: Vec<Tensor> = p
            .iter()
            .zip(net.params())
            .map(|(v, t)| grads.get_or_zeros(*v, t.dim()))
            .collect();
        opt.step(net.params_mut(), &gs);
    }

    let hash = content_hash(&net)?;
    let mut ext = MetricExtractor {
        net,
        input_dim: corpus.geom.len(),
        n_classes: corpus.n_classes,
        holdout_accuracy: 0.0,
        hash,
    };
    let hold_x = corpus.images.select(ndarray::Axis(0), hold);
    let hold_y: Vec<usize> = hold.iter().map(|&i| corpus.labels[i]).collect();
    ext.holdout_accuracy = ext.accuracy(&hold_x, &hold_y)?;
    if ext.is_under_trained() {
        log::warn!(
            "metric extractor holdout accuracy {:.3} below {MIN_HOLDOUT_ACCURACY}",
            ext.holdout_accuracy
        );
    }
    Ok(ext)
}
