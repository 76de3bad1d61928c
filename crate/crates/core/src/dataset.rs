//! Open-set semi-supervised splits over a fully-labeled corpus.
//!
//! Construction runs in three stages:
//! 1. shuffle the class ids and take the first `n_closed_classes` as the
//!    known classes, the rest are open;
//! 2. per known class, label `floor(labeled_ratio * n_class)` samples and
//!    leave the remainder unlabeled;
//! 3. draw `floor(open_usage_ratio * n_open)` open-class samples uniformly
//!    and shuffle them together with the unlabeled known-class samples.
//!
//! The closed/open origin of each unlabeled sample is kept, but only
//! [`OpenSetDataset::diagnostics`] exposes it.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Axis;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::graph::{Geom, Tensor};
use crate::label_algebra::ClassIndex;

/// A fully-labeled image corpus; labels are corpus class ids `0..n_classes`.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledCorpus {
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub n_classes: usize,
    pub geom: Geom,
}

impl LabeledCorpus {
    pub fn new(images: Tensor, labels: Vec<usize>, geom: Geom) -> Result<Self> {
        if images.nrows() != labels.len() {
            return Err(Error::Data(format!(
                "{} images but {} labels",
                images.nrows(),
                labels.len()
            )));
        }
        if images.ncols() != geom.len() {
            return Err(Error::Data(format!(
                "image width {} does not match shape {}x{}x{}",
                images.ncols(),
                geom.c,
                geom.h,
                geom.w
            )));
        }
        let n_classes = labels.iter().max().map_or(0, |m| m + 1);
        Ok(LabeledCorpus {
            images,
            labels,
            n_classes,
            geom,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn class_sizes(&self) -> Vec<usize> {
        class_sizes(&self.labels, self.n_classes)
    }

    /// Rows whose label is in `classes`, relabeled by position in `classes`.
    pub fn subset_classes(&self, classes: &[usize]) -> LabeledCorpus {
        let pos: BTreeMap<usize, usize> = classes.iter().enumerate().map(|(i, c)| (*c, i)).collect();
        let keep: Vec<usize> = (0..self.len()).filter(|i| pos.contains_key(&self.labels[*i])).collect();
        LabeledCorpus {
            images: self.images.select(Axis(0), &keep),
            labels: keep.iter().map(|i| pos[&self.labels[*i]]).collect(),
            n_classes: classes.len(),
            geom: self.geom,
        }
    }

    pub fn save(&self, images_path: &Path, labels_path: &Path) -> Result<()> {
        ndarray_npy::write_npy(images_path, &self.images)
            .map_err(|e| Error::Data(format!("{}: {e}", images_path.display())))?;
        let labels = ndarray::Array1::from_iter(self.labels.iter().map(|&l| l as i64));
        ndarray_npy::write_npy(labels_path, &labels)
            .map_err(|e| Error::Data(format!("{}: {e}", labels_path.display())))?;
        Ok(())
    }

    pub fn load(images_path: &Path, labels_path: &Path, geom: Geom) -> Result<Self> {
        let images: Tensor = ndarray_npy::read_npy(images_path)
            .map_err(|e| Error::Data(format!("{}: {e}", images_path.display())))?;
        let labels: ndarray::Array1<i64> = ndarray_npy::read_npy(labels_path)
            .map_err(|e| Error::Data(format!("{}: {e}", labels_path.display())))?;
        if labels.iter().any(|&l| l < 0) {
            return Err(Error::Data("negative class label".into()));
        }
        LabeledCorpus::new(images, labels.iter().map(|&l| l as usize).collect(), geom)
    }
}

fn class_sizes(labels: &[usize], n_classes: usize) -> Vec<usize> {
    let mut sizes = vec![0; n_classes];
    for &l in labels {
        sizes[l] += 1;
    }
    sizes
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitConfig {
    pub n_closed_classes: usize,
    pub labeled_ratio: f64,
    pub open_usage_ratio: f64,
    pub seed: u64,
}

impl SplitConfig {
    pub fn new(n_closed_classes: usize, labeled_ratio: f64, open_usage_ratio: f64, seed: u64) -> Self {
        SplitConfig {
            n_closed_classes,
            labeled_ratio,
            open_usage_ratio,
            seed,
        }
    }

    pub fn validate(&self, total_classes: usize) -> Result<()> {
        if self.n_closed_classes < 1 || self.n_closed_classes > total_classes {
            return Err(Error::Validation(format!(
                "closed class count {} outside 1..={total_classes}",
                self.n_closed_classes
            )));
        }
        if !(self.labeled_ratio > 0.0 && self.labeled_ratio <= 1.0) {
            return Err(Error::Validation(format!(
                "labeled ratio {} outside (0, 1]",
                self.labeled_ratio
            )));
        }
        if !(0.0..=1.0).contains(&self.open_usage_ratio) {
            return Err(Error::Validation(format!(
                "open usage ratio {} outside [0, 1]",
                self.open_usage_ratio
            )));
        }
        Ok(())
    }
}

/// `floor(ratio * n)`, robust to ratios like 0.95 * 500 landing a hair
/// below the integer.
pub fn floor_count(ratio: f64, n: usize) -> usize {
    let x = ratio * n as f64;
    (x + 1e-9 * x.abs().max(1.0)).floor() as usize
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Closed,
    Open,
}

/// Index-level result of the three split stages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub closed_class_ids: Vec<usize>,
    pub open_class_ids: Vec<usize>,
    /// Corpus indices of labeled samples.
    pub labeled_indices: Vec<usize>,
    /// Known-class position of each labeled sample.
    pub labeled_classes: Vec<ClassIndex>,
    pub unlabeled_indices: Vec<usize>,
    pub unlabeled_provenance: Vec<Provenance>,
}

/// Runs the three split stages on corpus labels only.
pub fn plan_splits(labels: &[usize], n_classes: usize, cfg: &SplitConfig) -> Result<SplitPlan> {
    cfg.validate(n_classes)?;
    let sizes = class_sizes(labels, n_classes);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let mut classes: Vec<usize> = (0..n_classes).collect();
    classes.shuffle(&mut rng);
    let closed_class_ids = classes[..cfg.n_closed_classes].to_vec();
    let mut open_class_ids = classes[cfg.n_closed_classes..].to_vec();
    open_class_ids.sort_unstable();
    if let Some(c) = closed_class_ids.iter().find(|c| sizes[**c] == 0) {
        return Err(Error::Validation(format!("closed class {c} has no samples")));
    }

    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); n_classes];
    for (i, &l) in labels.iter().enumerate() {
        by_class[l].push(i);
    }

    let mut labeled_indices = Vec::new();
    let mut labeled_classes = Vec::new();
    let mut unlabeled: Vec<(usize, Provenance)> = Vec::new();
    for (pos, &c) in closed_class_ids.iter().enumerate() {
        let mut members = by_class[c].clone();
        members.shuffle(&mut rng);
        let n_lbl = floor_count(cfg.labeled_ratio, members.len());
        for &i in &members[..n_lbl] {
            labeled_indices.push(i);
            labeled_classes.push(ClassIndex(pos));
        }
        unlabeled.extend(members[n_lbl..].iter().map(|&i| (i, Provenance::Closed)));
    }

    let open_pool: Vec<usize> = open_class_ids.iter().flat_map(|&c| by_class[c].iter().copied()).collect();
    let n_open = floor_count(cfg.open_usage_ratio, open_pool.len());
    let picked = rand::seq::index::sample(&mut rng, open_pool.len(), n_open);
    unlabeled.extend(picked.iter().map(|j| (open_pool[j], Provenance::Open)));
    unlabeled.shuffle(&mut rng);

    Ok(SplitPlan {
        closed_class_ids,
        open_class_ids,
        labeled_indices,
        labeled_classes,
        unlabeled_indices: unlabeled.iter().map(|(i, _)| *i).collect(),
        unlabeled_provenance: unlabeled.iter().map(|(_, p)| *p).collect(),
    })
}

/// Labeled pairs over `K` known classes plus unlabeled samples.
#[derive(Debug, Clone)]
pub struct OpenSetDataset {
    pub labeled_x: Tensor,
    pub labeled_y: Vec<ClassIndex>,
    pub unlabeled_x: Tensor,
    pub k: usize,
    pub geom: Geom,
    provenance: Option<Vec<Provenance>>,
}

/// Read-only view of benchmark-only information.
pub struct Diagnostics<'a> {
    provenance: &'a [Provenance],
}

impl<'a> Diagnostics<'a> {
    pub fn provenance(&self) -> &'a [Provenance] {
        self.provenance
    }

    pub fn indices(&self, which: Provenance) -> Vec<usize> {
        (0..self.provenance.len())
            .filter(|i| self.provenance[*i] == which)
            .collect()
    }
}

impl OpenSetDataset {
    pub fn new(
        labeled_x: Tensor,
        labeled_y: Vec<ClassIndex>,
        unlabeled_x: Tensor,
        k: usize,
        geom: Geom,
        provenance: Option<Vec<Provenance>>,
    ) -> Result<Self> {
        if labeled_x.nrows() != labeled_y.len() {
            return Err(Error::Data("labeled samples and labels differ in length".into()));
        }
        if labeled_y.iter().any(|c| c.0 >= k) {
            return Err(Error::Data(format!("labeled class outside 1..={k}")));
        }
        if let Some(p) = &provenance {
            if p.len() != unlabeled_x.nrows() {
                return Err(Error::Data("provenance length differs from unlabeled set".into()));
            }
        }
        Ok(OpenSetDataset {
            labeled_x,
            labeled_y,
            unlabeled_x,
            k,
            geom,
            provenance,
        })
    }

    pub fn n_labeled(&self) -> usize {
        self.labeled_y.len()
    }

    pub fn n_unlabeled(&self) -> usize {
        self.unlabeled_x.nrows()
    }

    /// Closed/open tags of the unlabeled samples. Benchmarking only; the
    /// training loop never calls this.
    pub fn diagnostics(&self) -> Result<Diagnostics<'_>> {
        self.provenance
            .as_deref()
            .map(|provenance| Diagnostics { provenance })
            .ok_or_else(|| Error::Data("dataset carries no provenance tags".into()))
    }

    /// Copy without provenance tags.
    pub fn without_provenance(&self) -> Self {
        OpenSetDataset {
            provenance: None,
            ..self.clone()
        }
    }

    /// Only the labeled part, for supervised-only training.
    pub fn labeled_only(&self) -> Self {
        OpenSetDataset {
            unlabeled_x: Tensor::zeros((0, self.labeled_x.ncols())),
            provenance: Some(Vec::new()),
            ..self.clone()
        }
    }
}

pub fn materialize(corpus: &LabeledCorpus, plan: &SplitPlan) -> Result<OpenSetDataset> {
    OpenSetDataset::new(
        corpus.images.select(Axis(0), &plan.labeled_indices),
        plan.labeled_classes.clone(),
        corpus.images.select(Axis(0), &plan.unlabeled_indices),
        plan.closed_class_ids.len(),
        corpus.geom,
        Some(plan.unlabeled_provenance.clone()),
    )
}

pub fn build_splits(corpus: &LabeledCorpus, cfg: &SplitConfig) -> Result<OpenSetDataset> {
    let plan = plan_splits(&corpus.labels, corpus.n_classes, cfg)?;
    materialize(corpus, &plan)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub n_labeled: usize,
    pub n_unlabeled_closed: usize,
    pub n_unlabeled_open: usize,
    pub per_class_labeled: Vec<usize>,
}

impl SplitCounts {
    pub fn triple(&self) -> (usize, usize, usize) {
        (self.n_labeled, self.n_unlabeled_closed, self.n_unlabeled_open)
    }
}

pub fn summarize(ds: &OpenSetDataset) -> Result<SplitCounts> {
    let diag = ds.diagnostics()?;
    let mut per_class = vec![0; ds.k];
    for c in &ds.labeled_y {
        per_class[c.0] += 1;
    }
    Ok(SplitCounts {
        n_labeled: ds.n_labeled(),
        n_unlabeled_closed: diag.indices(Provenance::Closed).len(),
        n_unlabeled_open: diag.indices(Provenance::Open).len(),
        per_class_labeled: per_class,
    })
}

impl SplitPlan {
    pub fn counts(&self) -> SplitCounts {
        let mut per_class = vec![0; self.closed_class_ids.len()];
        for c in &self.labeled_classes {
            per_class[c.0] += 1;
        }
        let open = self
            .unlabeled_provenance
            .iter()
            .filter(|p| **p == Provenance::Open)
            .count();
        SplitCounts {
            n_labeled: self.labeled_indices.len(),
            n_unlabeled_closed: self.unlabeled_indices.len() - open,
            n_unlabeled_open: open,
            per_class_labeled: per_class,
        }
    }
}

/// Synthetic class-conditional images: one Gaussian blob per sample whose
/// centre and anisotropic width depend on the class, with per-sample
/// jitter and pixel noise. Class layouts depend only on the class id, so
/// corpora drawn with different seeds share one distribution.
pub fn make_toy_corpus(
    n_classes: usize,
    samples_per_class: usize,
    geom: Geom,
    seed: u64,
) -> Result<LabeledCorpus> {
    if n_classes < 2 {
        return Err(Error::Validation(format!("toy corpus needs >= 2 classes, got {n_classes}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = n_classes * samples_per_class;
    let mut images = Tensor::zeros((n, geom.len()));
    let mut labels = Vec::with_capacity(n);
    let protos: Vec<BlobClass> = (0..n_classes).map(|c| BlobClass::for_class(c, geom)).collect();
    for c in 0..n_classes {
        for j in 0..samples_per_class {
            let row = c * samples_per_class + j;
            protos[c].render(&mut rng, geom, images.row_mut(row).as_slice_mut().expect("row"));
            labels.push(c);
        }
    }
    LabeledCorpus::new(images, labels, geom)
}

#[derive(Debug, Clone, Copy)]
struct BlobClass {
    cy: f64,
    cx: f64,
    sy: f64,
    sx: f64,
}

impl BlobClass {
    fn for_class(c: usize, geom: Geom) -> Self {
        // Additive recurrence of the plastic number spreads centres evenly.
        const A1: f64 = 0.754_877_666_246_692_7;
        const A2: f64 = 0.569_840_290_998_053_3;
        let u = (0.5 + A1 * c as f64).fract();
        let v = (0.5 + A2 * c as f64).fract();
        let margin = 1.5;
        let cy = margin + u * (geom.h as f64 - 1.0 - 2.0 * margin);
        let cx = margin + v * (geom.w as f64 - 1.0 - 2.0 * margin);
        let widths = [0.7, 1.2, 1.9];
        let sy = widths[c % 3];
        let sx = widths[(c / 3 + c) % 3];
        BlobClass { cy, cx, sy, sx }
    }

    fn render(&self, rng: &mut impl Rng, geom: Geom, out: &mut [f64]) {
        let jy = 0.3 * rng.sample::<f64, _>(StandardNormal);
        let jx = 0.3 * rng.sample::<f64, _>(StandardNormal);
        let scale = 1.0 + 0.1 * rng.sample::<f64, _>(StandardNormal);
        let amp = rng.gen_range(0.7..1.0);
        for ch in 0..geom.c {
            for y in 0..geom.h {
                for x in 0..geom.w {
                    let dy = (y as f64 - self.cy - jy) / (self.sy * scale);
                    let dx = (x as f64 - self.cx - jx) / (self.sx * scale);
                    let blob = amp * (-0.5 * (dy * dy + dx * dx)).exp();
                    let noise = 0.1 * rng.sample::<f64, _>(StandardNormal);
                    out[ch * geom.area() + y * geom.w + x] = (-1.0 + 2.0 * blob + noise).clamp(-1.0, 1.0);
                }
            }
        }
    }
}

/// On-disk description of a split: configuration, class partition and
/// every index list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub config: SplitConfig,
    pub seed: u64,
    pub geom: Geom,
    pub n_classes: usize,
    pub class_sizes: Vec<usize>,
    pub closed_class_ids: Vec<usize>,
    pub open_class_ids: Vec<usize>,
    pub labeled_indices: Vec<usize>,
    pub labeled_classes: Vec<ClassIndex>,
    pub unlabeled_indices: Vec<usize>,
    pub unlabeled_provenance: Vec<Provenance>,
    /// Payload files relative to the manifest directory.
    pub images_file: String,
    pub labels_file: String,
    pub eval_images_file: Option<String>,
    pub eval_labels_file: Option<String>,
}

pub const MANIFEST_FILE: &str = "split.json";

impl SplitManifest {
    pub fn new(corpus: &LabeledCorpus, cfg: &SplitConfig, plan: SplitPlan) -> Self {
        SplitManifest {
            config: *cfg,
            seed: cfg.seed,
            geom: corpus.geom,
            n_classes: corpus.n_classes,
            class_sizes: corpus.class_sizes(),
            closed_class_ids: plan.closed_class_ids,
            open_class_ids: plan.open_class_ids,
            labeled_indices: plan.labeled_indices,
            labeled_classes: plan.labeled_classes,
            unlabeled_indices: plan.unlabeled_indices,
            unlabeled_provenance: plan.unlabeled_provenance,
            images_file: "images.npy".into(),
            labels_file: "labels.npy".into(),
            eval_images_file: None,
            eval_labels_file: None,
        }
    }

    pub fn plan(&self) -> SplitPlan {
        SplitPlan {
            closed_class_ids: self.closed_class_ids.clone(),
            open_class_ids: self.open_class_ids.clone(),
            labeled_indices: self.labeled_indices.clone(),
            labeled_classes: self.labeled_classes.clone(),
            unlabeled_indices: self.unlabeled_indices.clone(),
            unlabeled_provenance: self.unlabeled_provenance.clone(),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Hex SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> Result<String> {
        Ok(hex::encode(Sha256::digest(serde_json::to_vec(self)?)))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
    }

    /// Recomputes the split counts and checks every structural identity.
    pub fn verify(&self) -> Result<SplitCounts> {
        let counts = self.plan().counts();
        let fail = |msg: String| Err(Error::Data(msg));
        if self.labeled_indices.len() != self.labeled_classes.len() {
            return fail("labeled index and class lists differ in length".into());
        }
        if self.unlabeled_indices.len() != self.unlabeled_provenance.len() {
            return fail("unlabeled index and provenance lists differ in length".into());
        }
        let mut seen = std::collections::HashSet::new();
        for &i in self.labeled_indices.iter().chain(&self.unlabeled_indices) {
            if !seen.insert(i) {
                return fail(format!("corpus index {i} used twice"));
            }
        }
        let mut all: Vec<usize> = self.closed_class_ids.iter().chain(&self.open_class_ids).copied().collect();
        all.sort_unstable();
        if all != (0..self.n_classes).collect::<Vec<_>>() {
            return fail("closed and open class ids are not a partition".into());
        }
        let closed_total: usize = self.closed_class_ids.iter().map(|c| self.class_sizes[*c]).sum();
        if counts.n_labeled + counts.n_unlabeled_closed != closed_total {
            return fail(format!(
                "labeled + closed-unlabeled = {} but closed classes hold {closed_total}",
                counts.n_labeled + counts.n_unlabeled_closed
            ));
        }
        for (pos, &c) in self.closed_class_ids.iter().enumerate() {
            let expect = floor_count(self.config.labeled_ratio, self.class_sizes[c]);
            if counts.per_class_labeled[pos] != expect {
                return fail(format!(
                    "class {c}: {} labeled, expected {expect}",
                    counts.per_class_labeled[pos]
                ));
            }
        }
        let open_total: usize = self.open_class_ids.iter().map(|c| self.class_sizes[*c]).sum();
        let expect_open = floor_count(self.config.open_usage_ratio, open_total);
        if counts.n_unlabeled_open != expect_open {
            return fail(format!(
                "{} open samples, expected {expect_open}",
                counts.n_unlabeled_open
            ));
        }
        Ok(counts)
    }
}

/// A built dataset directory: manifest plus corpus payloads.
#[derive(Debug, Clone)]
pub struct DataBundle {
    pub dir: PathBuf,
    pub manifest: SplitManifest,
    pub corpus: LabeledCorpus,
    pub eval_corpus: Option<LabeledCorpus>,
}

impl DataBundle {
    /// Loads `split.json` (or the given manifest path) and its payloads.
    pub fn load(manifest_path: &Path) -> Result<Self> {
        let manifest_path = if manifest_path.is_dir() {
            manifest_path.join(MANIFEST_FILE)
        } else {
            manifest_path.to_path_buf()
        };
        if !manifest_path.exists() {
            return Err(Error::Data(format!("no manifest at {}", manifest_path.display())));
        }
        let manifest = SplitManifest::load(&manifest_path)?;
        let dir = manifest_path.parent().unwrap_or(Path::new(".")).to_path_buf();
        let corpus = LabeledCorpus::load(
            &dir.join(&manifest.images_file),
            &dir.join(&manifest.labels_file),
            manifest.geom,
        )?;
        if corpus.class_sizes() != manifest.class_sizes {
            return Err(Error::Data("corpus payload does not match manifest class sizes".into()));
        }
        let eval_corpus = match (&manifest.eval_images_file, &manifest.eval_labels_file) {
            (Some(i), Some(l)) => Some(LabeledCorpus::load(&dir.join(i), &dir.join(l), manifest.geom)?),
            _ => None,
        };
        Ok(DataBundle {
            dir,
            manifest,
            corpus,
            eval_corpus,
        })
    }

    pub fn dataset(&self) -> Result<OpenSetDataset> {
        materialize(&self.corpus, &self.manifest.plan())
    }

    /// Real samples of the known classes used as the metric reference: the
    /// evaluation corpus when present, otherwise the training corpus.
    pub fn reference(&self) -> LabeledCorpus {
        let source = self.eval_corpus.as_ref().unwrap_or(&self.corpus);
        source.subset_classes(&self.manifest.closed_class_ids)
    }
}
