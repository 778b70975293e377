//! Small image classifiers (victim, substitute, auxiliary and baseline
//! models) and their training loop.
//!
//! `conv3` is two conv(3x3)+ReLU+maxpool(2) blocks with 32 and 64 filters
//! followed by one fully connected layer. `mlp` is one hidden layer of 256
//! ReLU units.

use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{params_hash, read_checkpoint, write_checkpoint};
use crate::data::{ImageTensor, LabeledDataset, Shape};
use crate::error::{Error, Result};
use crate::nn::layers::{maxpool2, maxpool2_backward, relu, relu_backward, Conv2d, Linear};
use crate::nn::loss::{cross_entropy, soft_target_mse, softmax};
use crate::nn::optim::Sgd;
use crate::nn::{Init, ParamBuilder};
use crate::par::{self, Execution};
use crate::rng::RngHandle;

/// Rows per parallel work item. Fixed, so results do not depend on the
/// number of worker threads.
pub const CHUNK: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Architecture {
    Conv3,
    Mlp,
}

impl std::str::FromStr for Architecture {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "conv3" => Ok(Architecture::Conv3),
            "mlp" => Ok(Architecture::Mlp),
            o => Err(Error::invalid(format!("unknown architecture `{o}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossKind {
    CrossEntropy,
    MseToSoftTargets,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub seed: u64,
    pub loss: LossKind,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 5,
            batch_size: 64,
            learning_rate: 0.01,
            momentum: 0.9,
            seed: 0,
            loss: LossKind::CrossEntropy,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs < 1 {
            return Err(Error::invalid("epochs must be >= 1"));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::invalid("learning rate must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch size must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Conv3Net {
    conv1: Conv2d,
    conv2: Conv2d,
    fc: Linear,
    h: usize,
    w: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpNet {
    fc1: Linear,
    fc2: Linear,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Net {
    Conv3(Conv3Net),
    Mlp(MlpNet),
}

enum Cache {
    Conv3 {
        col1: Vec<f32>,
        a1: Vec<f32>,
        idx1: Vec<u32>,
        col2: Vec<f32>,
        a2: Vec<f32>,
        idx2: Vec<u32>,
        flat: Vec<f32>,
    },
    Mlp {
        x: Vec<f32>,
        hidden: Vec<f32>,
    },
}

impl Net {
    fn build(arch: Architecture, input: Shape, classes: usize, pb: &mut ParamBuilder) -> Result<Self> {
        match arch {
            Architecture::Conv3 => {
                if input.height % 4 != 0 || input.width % 4 != 0 {
                    return Err(Error::shape("height and width divisible by 4", input));
                }
                let flat = input.height / 4 * input.width / 4 * 64;
                Ok(Net::Conv3(Conv3Net {
                    conv1: Conv2d::new(pb, input.channels, 32, 3),
                    conv2: Conv2d::new(pb, 32, 64, 3),
                    fc: Linear::new(pb, flat, classes, Init::Xavier(flat, classes)),
                    h: input.height,
                    w: input.width,
                }))
            }
            Architecture::Mlp => {
                let d = input.len();
                Ok(Net::Mlp(MlpNet {
                    fc1: Linear::new(pb, d, 256, Init::He(d)),
                    fc2: Linear::new(pb, 256, classes, Init::Xavier(256, classes)),
                }))
            }
        }
    }

    /// `x` is channels-last for conv3, flat for mlp.
    fn forward(&self, p: &[f32], x: &[f32], n: usize) -> (Vec<f32>, Cache) {
        match self {
            Net::Conv3(c) => {
                let (h, w) = (c.h, c.w);
                let (mut a1, col1) = c.conv1.forward(p, x, n, h, w);
                relu(&mut a1);
                let (p1, idx1) = maxpool2(&a1, n, h, w, 32);
                let (mut a2, col2) = c.conv2.forward(p, &p1, n, h / 2, w / 2);
                relu(&mut a2);
                let (flat, idx2) = maxpool2(&a2, n, h / 2, w / 2, 64);
                let logits = c.fc.forward(p, &flat, n);
                (logits, Cache::Conv3 { col1, a1, idx1, col2, a2, idx2, flat })
            }
            Net::Mlp(m) => {
                let mut hidden = m.fc1.forward(p, x, n);
                relu(&mut hidden);
                let logits = m.fc2.forward(p, &hidden, n);
                (logits, Cache::Mlp { x: x.to_vec(), hidden })
            }
        }
    }

    fn backward(&self, p: &[f32], cache: &Cache, dlogits: &[f32], n: usize, g: &mut [f32], need_dx: bool) -> Option<Vec<f32>> {
        match (self, cache) {
            (Net::Conv3(c), Cache::Conv3 { col1, a1, idx1, col2, a2, idx2, flat }) => {
                let (h, w) = (c.h, c.w);
                let dflat = c.fc.backward(p, flat, dlogits, n, g, true).expect("dx");
                let mut da2 = maxpool2_backward(&dflat, idx2, a2.len());
                relu_backward(a2, &mut da2);
                let dp1 = c.conv2.backward(p, col2, &da2, n, h / 2, w / 2, g, true).expect("dx");
                let mut da1 = maxpool2_backward(&dp1, idx1, a1.len());
                relu_backward(a1, &mut da1);
                c.conv1.backward(p, col1, &da1, n, h, w, g, need_dx)
            }
            (Net::Mlp(m), Cache::Mlp { x, hidden }) => {
                let mut dh = m.fc2.backward(p, hidden, dlogits, n, g, true).expect("dx");
                relu_backward(hidden, &mut dh);
                m.fc1.backward(p, x, &dh, n, g, need_dx)
            }
            _ => unreachable!("cache from a different network"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingManifest {
    pub seed: u64,
    pub epochs: usize,
    pub dataset_fingerprint: String,
    pub loss: Option<LossKind>,
    pub epoch_losses: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierModel {
    arch: Architecture,
    net: Net,
    params: Vec<f32>,
    num_classes: usize,
    input: Shape,
    pub manifest: TrainingManifest,
}

#[derive(Serialize, Deserialize)]
struct CheckpointManifest {
    kind: String,
    architecture: Architecture,
    input_shape: Shape,
    num_classes: usize,
    param_count: usize,
    training: TrainingManifest,
    content_hash: String,
}

/// Channel-major -> channels-last.
fn to_hwc(x: &[f32], s: Shape) -> Vec<f32> {
    if s.channels == 1 {
        return x.to_vec();
    }
    let hw = s.height * s.width;
    let mut out = vec![0.0; x.len()];
    for img in 0..x.len() / s.len() {
        let (src, dst) = (&x[img * s.len()..], &mut out[img * s.len()..]);
        for c in 0..s.channels {
            for i in 0..hw {
                dst[i * s.channels + c] = src[c * hw + i];
            }
        }
    }
    out
}

fn to_chw(x: &[f32], s: Shape) -> Vec<f32> {
    if s.channels == 1 {
        return x.to_vec();
    }
    let hw = s.height * s.width;
    let mut out = vec![0.0; x.len()];
    for img in 0..x.len() / s.len() {
        let (src, dst) = (&x[img * s.len()..], &mut out[img * s.len()..]);
        for c in 0..s.channels {
            for i in 0..hw {
                dst[c * hw + i] = src[i * s.channels + c];
            }
        }
    }
    out
}

/// Index of the largest component; ties resolve to the lowest index.
pub fn argmax(p: &[f32]) -> usize {
    let mut best = 0;
    for (i, v) in p.iter().enumerate() {
        if *v > p[best] {
            best = i;
        }
    }
    best
}

impl ClassifierModel {
    pub fn init(arch: Architecture, input: Shape, num_classes: usize, rng: &RngHandle) -> Result<Self> {
        if num_classes < 2 {
            return Err(Error::invalid("a classifier needs at least two classes"));
        }
        let mut pb = ParamBuilder::new(rng.rng());
        let net = Net::build(arch, input, num_classes, &mut pb)?;
        Ok(Self {
            arch,
            net,
            params: pb.finish(),
            num_classes,
            input,
            manifest: TrainingManifest {
                seed: rng.seed,
                epochs: 0,
                dataset_fingerprint: String::new(),
                loss: None,
                epoch_losses: vec![],
            },
        })
    }

    pub fn architecture(&self) -> Architecture {
        self.arch
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn input_shape(&self) -> Shape {
        self.input
    }

    pub fn params(&self) -> &[f32] {
        &self.params
    }

    pub fn content_hash(&self) -> String {
        params_hash(&self.params)
    }

    fn check_shape(&self, s: Shape) -> Result<()> {
        if s != self.input {
            return Err(Error::shape(self.input, s));
        }
        Ok(())
    }

    /// Logits for `n` channel-major images packed in `x`.
    pub fn logits_flat(&self, x: &[f32], n: usize) -> Vec<f32> {
        self.net.forward(&self.params, &to_hwc(x, self.input), n).0
    }

    pub fn predict(&self, x: &ImageTensor) -> Result<Vec<f32>> {
        self.check_shape(x.shape())?;
        Ok(softmax(&self.logits_flat(x.pixels(), 1)))
    }

    pub fn predict_batch(&self, xs: &[ImageTensor]) -> Result<Vec<Vec<f32>>> {
        self.predict_batch_with(Execution::default(), xs)
    }

    pub fn predict_batch_with(&self, exec: Execution, xs: &[ImageTensor]) -> Result<Vec<Vec<f32>>> {
        for x in xs {
            self.check_shape(x.shape())?;
        }
        let chunks = par::chunks(xs.len(), CHUNK);
        let parts = par::map(exec, &chunks, |r| {
            let flat: Vec<f32> = xs[r.clone()].iter().flat_map(|x| x.pixels().iter().copied()).collect();
            self.logits_flat(&flat, r.len())
                .chunks_exact(self.num_classes)
                .map(softmax)
                .collect::<Vec<_>>()
        });
        Ok(parts.into_iter().flatten().collect())
    }

    pub fn predict_dataset(&self, d: &LabeledDataset) -> Result<Vec<Vec<f32>>> {
        self.predict_batch(d.samples())
    }

    /// Mean loss and parameter gradient over `n` images. `head` maps
    /// `(row range, logits)` to `(loss, dlogits)` for one chunk.
    pub fn batch_gradient<H>(&self, exec: Execution, x: &[f32], n: usize, head: H) -> (f32, Vec<f32>)
    where
        H: Fn(std::ops::Range<usize>, &[f32]) -> (f32, Vec<f32>) + Sync + Send,
    {
        gradient_at(&self.net, self.input, &self.params, exec, x, n, head)
    }

    /// Gradient of `sum_k weights[i][k] * logit_k(x_i)` with respect to each
    /// input, channel-major.
    pub fn input_gradient(&self, xs: &[ImageTensor], weights: &[Vec<f32>]) -> Result<Vec<Vec<f32>>> {
        for x in xs {
            self.check_shape(x.shape())?;
        }
        let chunks = par::chunks(xs.len(), CHUNK);
        let per = self.input.len();
        let parts = par::map(Execution::default(), &chunks, |r| {
            let flat: Vec<f32> = xs[r.clone()].iter().flat_map(|x| x.pixels().iter().copied()).collect();
            let (_, cache) = self.net.forward(&self.params, &to_hwc(&flat, self.input), r.len());
            let dlogits: Vec<f32> = weights[r.clone()].iter().flatten().copied().collect();
            let mut g = vec![0.0; self.params.len()];
            let dx = self
                .net
                .backward(&self.params, &cache, &dlogits, r.len(), &mut g, true)
                .expect("dx requested");
            to_chw(&dx, self.input)
                .chunks_exact(per)
                .map(<[f32]>::to_vec)
                .collect::<Vec<_>>()
        });
        Ok(parts.into_iter().flatten().collect())
    }

    /// Layout copy plus mutable weights, for training loops outside this module.
    pub(crate) fn split(&mut self) -> (Net, Shape, &mut Vec<f32>) {
        (self.net.clone(), self.input, &mut self.params)
    }

    pub(crate) fn set_params(&mut self, params: Vec<f32>) {
        assert_eq!(params.len(), self.params.len());
        self.params = params;
    }

    pub fn save(&self, stem: &Path) -> Result<()> {
        let m = CheckpointManifest {
            kind: "classifier".into(),
            architecture: self.arch,
            input_shape: self.input,
            num_classes: self.num_classes,
            param_count: self.params.len(),
            training: self.manifest.clone(),
            content_hash: self.content_hash(),
        };
        write_checkpoint(stem, &m, &self.params)
    }

    pub fn load(stem: &Path) -> Result<Self> {
        let (m, params): (CheckpointManifest, _) = read_checkpoint(stem, |m: &CheckpointManifest| &m.content_hash)?;
        if m.kind != "classifier" {
            return Err(Error::Format(format!("expected a classifier checkpoint, found `{}`", m.kind)));
        }
        let mut model = Self::init(m.architecture, m.input_shape, m.num_classes, &RngHandle::new(0, "layout"))?;
        if model.params.len() != params.len() {
            return Err(Error::Consistency(format!(
                "checkpoint holds {} weights, architecture needs {}",
                params.len(),
                model.params.len()
            )));
        }
        model.params = params;
        model.manifest = m.training;
        Ok(model)
    }
}

pub(crate) fn gradient_at<H>(net: &Net, input: Shape, params: &[f32], exec: Execution, x: &[f32], n: usize, head: H) -> (f32, Vec<f32>)
where
    H: Fn(std::ops::Range<usize>, &[f32]) -> (f32, Vec<f32>) + Sync + Send,
{
    let per = input.len();
    let chunks = par::chunks(n, CHUNK);
    let parts = par::map(exec, &chunks, |r| {
        let xc = to_hwc(&x[r.start * per..r.end * per], input);
        let (logits, cache) = net.forward(params, &xc, r.len());
        let (loss, dlogits) = head(r.clone(), &logits);
        let mut g = vec![0.0; params.len()];
        net.backward(params, &cache, &dlogits, r.len(), &mut g, false);
        (loss, g)
    });
    let loss = parts.iter().map(|p| p.0).sum();
    (loss, par::sum_in_order(parts.into_iter().map(|p| p.1).collect()))
}

/// Shared minibatch loop: shuffles with the config seed, calls `grad` for each
/// batch of sample indices, applies SGD with momentum. Returns epoch-mean losses.
pub(crate) fn sgd_epochs<G>(params: &mut Vec<f32>, n: usize, cfg: &TrainConfig, stream: &str, mut grad: G) -> Result<Vec<f32>>
where
    G: FnMut(&[f32], &[usize]) -> (f32, Vec<f32>),
{
    cfg.validate()?;
    let mut opt = Sgd::new(cfg.learning_rate as f32, cfg.momentum as f32, params.len());
    let rng = RngHandle::new(cfg.seed, stream);
    let mut order: Vec<usize> = (0..n).collect();
    let mut losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng.derive_indexed("epoch", epoch as u64).rng());
        let mut total = 0.0f64;
        for batch in order.chunks(cfg.batch_size) {
            let (loss, g) = grad(params, batch);
            if !loss.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    detail: format!("{stream}: loss {loss}"),
                });
            }
            total += loss as f64 * batch.len() as f64;
            opt.step(params, &g);
        }
        let mean = (total / n as f64) as f32;
        tracing::debug!(stream, epoch, loss = mean, "epoch");
        losses.push(mean);
    }
    Ok(losses)
}

pub(crate) fn gather(samples: &[ImageTensor], idx: &[usize]) -> Vec<f32> {
    idx.iter().flat_map(|&i| samples[i].pixels().iter().copied()).collect()
}

pub fn train_classifier(arch: Architecture, data: &LabeledDataset, cfg: &TrainConfig) -> Result<ClassifierModel> {
    if data.is_empty() {
        return Err(Error::invalid("cannot train on an empty dataset"));
    }
    let mut model = ClassifierModel::init(arch, data.shape(), data.num_classes(), &RngHandle::new(cfg.seed, "classifier/init"))?;
    fit_labels(&mut model, data, cfg)?;
    Ok(model)
}

/// Continues training `model` on `data` with the configured loss.
pub fn fit_labels(model: &mut ClassifierModel, data: &LabeledDataset, cfg: &TrainConfig) -> Result<()> {
    model.check_shape(data.shape())?;
    if data.num_classes() > model.num_classes {
        return Err(Error::invalid("dataset has more classes than the model"));
    }
    let classes = model.num_classes;
    let one_hot: Vec<Vec<f32>> = data
        .labels()
        .iter()
        .map(|&l| (0..classes).map(|k| if k == l { 1.0 } else { 0.0 }).collect())
        .collect();
    let labels = data.labels();
    let samples = data.samples();
    let loss_kind = cfg.loss;
    let (net, input) = (model.net.clone(), model.input);
    let losses = sgd_epochs(&mut model.params, data.len(), cfg, "classifier/shuffle", |p, batch| {
        let x = gather(samples, batch);
        let denom = batch.len() as f32;
        gradient_at(&net, input, p, Execution::default(), &x, batch.len(), |r, logits| match loss_kind {
            LossKind::CrossEntropy => {
                let y: Vec<usize> = batch[r].iter().map(|&i| labels[i]).collect();
                cross_entropy(&y, logits, classes, denom)
            }
            LossKind::MseToSoftTargets => {
                let t: Vec<f32> = batch[r].iter().flat_map(|&i| one_hot[i].iter().copied()).collect();
                soft_target_mse(&t, logits, classes, denom)
            }
        })
    })?;
    model.manifest = TrainingManifest {
        seed: cfg.seed,
        epochs: model.manifest.epochs + cfg.epochs,
        dataset_fingerprint: data.fingerprint(),
        loss: Some(cfg.loss),
        epoch_losses: losses,
    };
    Ok(())
}

/// Trains `model` so its softmax output matches `targets` in mean squared error.
pub fn fit_soft_targets(model: &mut ClassifierModel, inputs: &[ImageTensor], targets: &[Vec<f32>], cfg: &TrainConfig, fingerprint: String) -> Result<()> {
    if inputs.is_empty() {
        return Err(Error::invalid("cannot train on zero samples"));
    }
    if inputs.len() != targets.len() {
        return Err(Error::Consistency(format!("{} inputs but {} targets", inputs.len(), targets.len())));
    }
    for x in inputs {
        model.check_shape(x.shape())?;
    }
    let classes = model.num_classes;
    if let Some(t) = targets.iter().find(|t| t.len() != classes) {
        return Err(Error::invalid(format!("target of length {} for {classes} classes", t.len())));
    }
    let (net, input) = (model.net.clone(), model.input);
    let losses = sgd_epochs(&mut model.params, inputs.len(), cfg, "soft/shuffle", |p, batch| {
        let x = gather(inputs, batch);
        let denom = batch.len() as f32;
        gradient_at(&net, input, p, Execution::default(), &x, batch.len(), |r, logits| {
            let t: Vec<f32> = batch[r].iter().flat_map(|&i| targets[i].iter().copied()).collect();
            soft_target_mse(&t, logits, classes, denom)
        })
    })?;
    model.manifest = TrainingManifest {
        seed: cfg.seed,
        epochs: model.manifest.epochs + cfg.epochs,
        dataset_fingerprint: fingerprint,
        loss: Some(LossKind::MseToSoftTargets),
        epoch_losses: losses,
    };
    Ok(())
}

pub fn evaluate_accuracy(model: &ClassifierModel, data: &LabeledDataset) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::invalid("cannot evaluate on an empty dataset"));
    }
    let preds = model.predict_dataset(data)?;
    let correct = preds
        .iter()
        .zip(data.labels())
        .filter(|(p, l)| argmax(p) == **l)
        .count();
    Ok(correct as f64 / data.len() as f64)
}
