//! Query generators for three extraction-attack families and substitute
//! training.

use std::path::Path;

use rand::seq::index;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::classifier::{argmax, fit_soft_targets, Architecture, ClassifierModel, LossKind, TrainConfig};
use crate::data::{load_archive, save_archive, ImageTensor, LabeledDataset, Shape};
use crate::error::{Error, Result};
use crate::nn::layers::{relu, relu_backward, Linear};
use crate::nn::optim::AdamW;
use crate::nn::{Init, ParamBuilder};
use crate::rng::RngHandle;

/// Black-box access to the victim: images in, probability vectors out.
pub type Oracle<'a> = dyn Fn(&[ImageTensor]) -> Result<Vec<Vec<f32>>> + 'a;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SelectionStrategy {
    Random,
    Balanced,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DfmeMode {
    Noise,
    Generator,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum AttackKind {
    Knockoff {
        proxy: String,
        strategy: SelectionStrategy,
    },
    Jbda {
        #[serde(default = "default_seed_count")]
        seed_count: usize,
        #[serde(default = "default_step")]
        step: f64,
        /// Upper bound on augmentation rounds; unbounded when absent.
        #[serde(default)]
        rounds: Option<usize>,
        #[serde(default = "default_substitute_cfg")]
        substitute: TrainConfig,
    },
    Dfme {
        mode: DfmeMode,
        #[serde(default)]
        generator: GeneratorConfig,
    },
}

fn default_seed_count() -> usize {
    200
}

fn default_step() -> f64 {
    0.1
}

pub fn default_substitute_cfg() -> TrainConfig {
    TrainConfig {
        epochs: 10,
        batch_size: 32,
        learning_rate: 0.5,
        momentum: 0.9,
        seed: 0,
        loss: LossKind::MseToSoftTargets,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    pub iterations: usize,
    pub batch: usize,
    pub latent: usize,
    /// Random directions per forward-difference gradient estimate.
    pub directions: usize,
    pub epsilon: f64,
    pub learning_rate: f64,
    /// Substitute SGD steps per iteration; zero freezes the substitute.
    pub substitute_steps: usize,
    pub substitute_learning_rate: f64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            iterations: 200,
            batch: 8,
            latent: 16,
            directions: 2,
            epsilon: 1e-2,
            learning_rate: 1e-3,
            substitute_steps: 1,
            substitute_learning_rate: 0.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    pub budget: usize,
    pub seed: u64,
    #[serde(flatten)]
    pub kind: AttackKind,
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        if self.budget < 1 {
            return Err(Error::invalid("attack budget must be >= 1"));
        }
        if let AttackKind::Jbda { step, seed_count, .. } = &self.kind {
            if !(*step >= 0.0 && *step <= 1.0) {
                return Err(Error::invalid(format!("jbda step {step} outside [0, 1]")));
            }
            if *seed_count == 0 {
                return Err(Error::invalid("jbda needs at least one seed"));
            }
        }
        Ok(())
    }

    /// Short identifier used in reports, e.g. `jbda` or `dfme-noise`.
    pub fn label(&self) -> String {
        match &self.kind {
            AttackKind::Knockoff { .. } => "knockoff".into(),
            AttackKind::Jbda { .. } => "jbda".into(),
            AttackKind::Dfme { mode: DfmeMode::Noise, .. } => "dfme-noise".into(),
            AttackKind::Dfme { mode: DfmeMode::Generator, .. } => "dfme-generator".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuerySet {
    #[serde(skip)]
    pub samples: Vec<ImageTensor>,
    pub provenance: AttackConfig,
    pub responses: Option<Vec<Vec<f32>>>,
    /// For JBDA, the seed each sample descends from.
    pub origin: Option<Vec<usize>>,
}

impl QuerySet {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn save(&self, stem: &Path) -> Result<()> {
        if self.is_empty() {
            return Err(Error::invalid("cannot save an empty query set"));
        }
        let d = LabeledDataset::new(
            format!("queries-{}", self.provenance.label()),
            1,
            self.samples.clone(),
            vec![0; self.samples.len()],
        )?;
        save_archive(stem, &d, serde_json::to_value(self)?).map(|_| ())
    }

    pub fn load(stem: &Path) -> Result<Self> {
        let (d, m) = load_archive(stem)?;
        let mut q: QuerySet = serde_json::from_value(m.provenance)?;
        q.samples = d.samples().to_vec();
        Ok(q)
    }
}

/// Samples `budget` distinct proxy images.
pub fn knockoff_select(proxy: &LabeledDataset, cfg: &AttackConfig) -> Result<QuerySet> {
    cfg.validate()?;
    let AttackKind::Knockoff { strategy, .. } = &cfg.kind else {
        return Err(Error::invalid("knockoff_select needs a knockoff config"));
    };
    let b = cfg.budget;
    if proxy.len() < b {
        return Err(Error::invalid(format!("proxy has {} samples, budget is {b}", proxy.len())));
    }
    let rng = RngHandle::new(cfg.seed, "attack/knockoff");
    let picked: Vec<usize> = match strategy {
        SelectionStrategy::Random => index::sample(&mut rng.rng(), proxy.len(), b).into_vec(),
        SelectionStrategy::Balanced => {
            let c = proxy.num_classes();
            let per = b / c;
            let mut taken = vec![false; proxy.len()];
            let mut out = Vec::with_capacity(b);
            for class in 0..c {
                let members: Vec<usize> = (0..proxy.len()).filter(|&i| proxy.labels()[i] == class).collect();
                if members.len() < per {
                    return Err(Error::invalid(format!(
                        "proxy class {class} has {} samples, balanced selection needs {per}",
                        members.len()
                    )));
                }
                for j in index::sample(&mut rng.derive_indexed("class", class as u64).rng(), members.len(), per) {
                    taken[members[j]] = true;
                    out.push(members[j]);
                }
            }
            let rest: Vec<usize> = (0..proxy.len()).filter(|&i| !taken[i]).collect();
            for j in index::sample(&mut rng.derive("remainder").rng(), rest.len(), b - out.len()) {
                out.push(rest[j]);
            }
            out
        }
    };
    Ok(QuerySet {
        samples: picked.iter().map(|&i| proxy.samples()[i].clone()).collect(),
        provenance: cfg.clone(),
        responses: None,
        origin: None,
    })
}

fn query(oracle: &Oracle<'_>, xs: &[ImageTensor], offset: usize) -> Result<Vec<Vec<f32>>> {
    let out = oracle(xs).map_err(|e| Error::Oracle {
        index: offset,
        message: e.to_string(),
    })?;
    if out.len() != xs.len() {
        return Err(Error::Oracle {
            index: offset + out.len().min(xs.len()),
            message: format!("oracle answered {} of {} queries", out.len(), xs.len()),
        });
    }
    Ok(out)
}

/// One signed-gradient step on every sample toward the substitute's
/// predicted class.
pub fn jbda_step(substitute: &ClassifierModel, xs: &[ImageTensor], step: f32) -> Result<Vec<ImageTensor>> {
    let probs = substitute.predict_batch(xs)?;
    let k = substitute.num_classes();
    let weights: Vec<Vec<f32>> = probs
        .iter()
        .map(|p| {
            let mut w = vec![0.0; k];
            w[argmax(p)] = 1.0;
            w
        })
        .collect();
    let grads = substitute.input_gradient(xs, &weights)?;
    xs.iter()
        .zip(&grads)
        .map(|(x, g)| {
            let px = x
                .pixels()
                .iter()
                .zip(g)
                .map(|(v, d)| {
                    let s = if *d > 0.0 {
                        1.0
                    } else if *d < 0.0 {
                        -1.0
                    } else {
                        0.0
                    };
                    (v + step * s).clamp(0.0, 1.0)
                })
                .collect();
            ImageTensor::new(x.shape(), px)
        })
        .collect()
}

/// Grows the seed set by repeated signed-gradient augmentation, retraining
/// the substitute on victim answers before each round, until the budget is
/// reached. The final round is truncated, keeping the earliest samples.
pub fn jbda_augment(seeds: &LabeledDataset, substitute: &mut ClassifierModel, oracle: &Oracle<'_>, cfg: &AttackConfig) -> Result<QuerySet> {
    cfg.validate()?;
    let AttackKind::Jbda {
        step,
        rounds,
        substitute: sub_cfg,
        ..
    } = &cfg.kind
    else {
        return Err(Error::invalid("jbda_augment needs a jbda config"));
    };
    if seeds.is_empty() {
        return Err(Error::invalid("jbda needs at least one seed"));
    }
    if cfg.budget < seeds.len() {
        return Err(Error::invalid(format!("budget {} is smaller than the {} seeds", cfg.budget, seeds.len())));
    }
    let mut set: Vec<ImageTensor> = seeds.samples().to_vec();
    let mut origin: Vec<usize> = (0..set.len()).collect();
    let mut responses = query(oracle, &set, 0)?;
    let mut round = 0;
    while set.len() < cfg.budget && rounds.map_or(true, |r| round < r) {
        let tc = TrainConfig {
            seed: sub_cfg.seed ^ round as u64,
            ..sub_cfg.clone()
        };
        fit_soft_targets(substitute, &set, &responses, &tc, format!("jbda-round-{round}"))?;
        let take = (cfg.budget - set.len()).min(set.len());
        let fresh = jbda_step(substitute, &set[..take], *step as f32)?;
        let answers = query(oracle, &fresh, set.len())?;
        origin.extend_from_within(..take);
        set.extend(fresh);
        responses.extend(answers);
        round += 1;
        tracing::debug!(round, size = set.len(), "jbda round");
    }
    Ok(QuerySet {
        samples: set,
        provenance: cfg.clone(),
        responses: Some(responses),
        origin: Some(origin),
    })
}

/// Small fully connected generator: latent -> 256 ReLU -> image (sigmoid).
struct Generator {
    fc1: Linear,
    fc2: Linear,
    params: Vec<f32>,
    slots: Vec<crate::nn::Slot>,
    shape: Shape,
}

impl Generator {
    fn new(latent: usize, shape: Shape, rng: &RngHandle) -> Self {
        let mut pb = ParamBuilder::new(rng.rng());
        let fc1 = Linear::new(&mut pb, latent, 256, Init::He(latent));
        let fc2 = Linear::new(&mut pb, 256, shape.len(), Init::Xavier(256, shape.len()));
        let slots = pb.slots().to_vec();
        Self {
            fc1,
            fc2,
            params: pb.finish(),
            slots,

            shape,
        }
    }

    fn forward(&self, z: &[f32], n: usize) -> (Vec<f32>, Vec<f32>) {
        let mut h = self.fc1.forward(&self.params, z, n);
        relu(&mut h);
        let y = self.fc2.forward(&self.params, &h, n).into_iter().map(|v| 1.0 / (1.0 + (-v).exp())).collect();
        (h, y)
    }

    fn backward(&self, z: &[f32], h: &[f32], y: &[f32], dy: &[f32], n: usize) -> Vec<f32> {
        let mut g = vec![0.0; self.params.len()];
        let dpre: Vec<f32> = y.iter().zip(dy).map(|(s, d)| d * s * (1.0 - s)).collect();
        let mut dh = self.fc2.backward(&self.params, h, &dpre, n, &mut g, true).expect("dx");
        relu_backward(h, &mut dh);
        self.fc1.backward(&self.params, z, &dh, n, &mut g, false);
        g
    }

    fn images(&self, flat: &[f32]) -> Vec<ImageTensor> {
        flat.chunks_exact(self.shape.len())
            .map(|c| ImageTensor::from_clamped(self.shape, c.to_vec()).expect("shape"))
            .collect()
    }
}

/// Mean absolute difference between two probability vectors.
pub fn disagreement(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f32>() / a.len() as f32
}

/// Outcome of generator-mode synthesis beyond the query set itself.
pub struct DfmeTrace {
    /// Mean victim/substitute disagreement on fresh generator samples,
    /// measured before every iteration and once after the last.
    pub disagreement: Vec<f32>,
    pub substitute: ClassifierModel,
}

pub fn dfme_synthesize(oracle: &Oracle<'_>, shape: Shape, num_classes: usize, cfg: &AttackConfig) -> Result<QuerySet> {
    Ok(dfme_synthesize_traced(oracle, shape, num_classes, cfg)?.0)
}

/// Data-free synthesis. Noise mode draws i.i.d. uniform images. Generator
/// mode trains a generator to maximize victim/substitute disagreement using
/// forward-difference gradient estimates through the oracle; every oracle
/// query counts against the budget, and whatever the iterations leave unused
/// is filled with samples from the final generator.
pub fn dfme_synthesize_traced(oracle: &Oracle<'_>, shape: Shape, num_classes: usize, cfg: &AttackConfig) -> Result<(QuerySet, Option<DfmeTrace>)> {
    cfg.validate()?;
    let AttackKind::Dfme { mode, generator: gc } = &cfg.kind else {
        return Err(Error::invalid("dfme_synthesize needs a dfme config"));
    };
    let rng = RngHandle::new(cfg.seed, "attack/dfme");
    if *mode == DfmeMode::Noise {
        let mut r = rng.derive("noise").rng();
        let samples = (0..cfg.budget)
            .map(|_| ImageTensor::new(shape, (0..shape.len()).map(|_| r.gen::<f32>()).collect()))
            .collect::<Result<Vec<_>>>()?;
        let responses = query(oracle, &samples, 0)?;
        let q = QuerySet {
            samples,
            provenance: cfg.clone(),
            responses: Some(responses),
            origin: None,
        };
        return Ok((q, None));
    }

    let mut gen = Generator::new(gc.latent, shape, &rng.derive("generator"));
    let mut gopt = AdamW::new(gen.params.len(), &gen.slots, 0.0);
    let mut sub = ClassifierModel::init(Architecture::Mlp, shape, num_classes, &rng.derive("substitute"))?;
    let mut samples: Vec<ImageTensor> = Vec::new();
    let mut responses: Vec<Vec<f32>> = Vec::new();
    let mut trace = Vec::new();
    let mut zr = rng.derive("latent").rng();
    let mut ur = rng.derive("directions").rng();
    let eval_z: Vec<f32> = (0..32 * gc.latent).map(|_| StandardNormal.sample(&mut zr)).collect();
    let measure = |gen: &Generator, sub: &ClassifierModel| -> Result<f32> {
        let xs = gen.images(&gen.forward(&eval_z, 32).1);
        let pv = oracle(&xs)?;
        let ps = sub.predict_batch(&xs)?;
        Ok(pv.iter().zip(&ps).map(|(a, b)| disagreement(a, b)).sum::<f32>() / 32.0)
    };
    let d = shape.len();
    let eps = gc.epsilon as f32;
    for it in 0..gc.iterations {
        trace.push(measure(&gen, &sub)?);
        let per_iter = gc.batch * (1 + gc.directions);
        if samples.len() + per_iter > cfg.budget {
            break;
        }
        let z: Vec<f32> = (0..gc.batch * gc.latent).map(|_| StandardNormal.sample(&mut zr)).collect();
        let (h, y) = gen.forward(&z, gc.batch);
        let base = gen.images(&y);
        let pv = query(oracle, &base, samples.len())?;
        let loss_of = |xs: &[ImageTensor], pv: &[Vec<f32>]| -> Result<Vec<f32>> {
            let ps = sub.predict_batch(xs)?;
            Ok(pv.iter().zip(&ps).map(|(a, b)| disagreement(a, b)).collect())
        };
        let l0 = loss_of(&base, &pv)?;
        samples.extend(base.iter().cloned());
        responses.extend(pv.iter().cloned());
        // forward-difference estimate of d(disagreement)/dx per sample
        let mut grad_x = vec![0.0f32; gc.batch * d];
        for _ in 0..gc.directions {
            let mut dirs = vec![0.0f32; gc.batch * d];
            for row in dirs.chunks_exact_mut(d) {
                row.iter_mut().for_each(|v| *v = StandardNormal.sample(&mut ur));
                let norm = row.iter().map(|v| v * v).sum::<f32>().sqrt().max(1e-12);
                row.iter_mut().for_each(|v| *v /= norm);
            }
            let moved: Vec<f32> = y.iter().zip(&dirs).map(|(a, u)| a + eps * u).collect();
            let xs = gen.images(&moved);
            let pvm = query(oracle, &xs, samples.len())?;
            let l1 = loss_of(&xs, &pvm)?;
            samples.extend(xs);
            responses.extend(pvm);
            for s in 0..gc.batch {
                let coef = d as f32 * (l1[s] - l0[s]) / eps / gc.directions as f32;
                for j in 0..d {
                    grad_x[s * d + j] += coef * dirs[s * d + j];
                }
            }
        }
        // ascend: minimize the negated disagreement
        let dy: Vec<f32> = grad_x.iter().map(|g| -g / gc.batch as f32).collect();
        let g = gen.backward(&z, &h, &y, &dy, gc.batch);
        gopt.step(&mut gen.params, &g, gc.learning_rate as f32);
        if gc.substitute_steps > 0 {
            let tc = TrainConfig {
                epochs: gc.substitute_steps,
                batch_size: gc.batch,
                learning_rate: gc.substitute_learning_rate,
                momentum: 0.0,
                seed: cfg.seed ^ it as u64,
                loss: LossKind::MseToSoftTargets,
            };
            fit_soft_targets(&mut sub, &base, &pv, &tc, "dfme".into())?;
        }
    }
    trace.push(measure(&gen, &sub)?);
    // spend what is left of the budget on samples from the final generator
    let rest = cfg.budget - samples.len();
    if rest > 0 {
        let z: Vec<f32> = (0..rest * gc.latent).map(|_| StandardNormal.sample(&mut zr)).collect();
        let xs = gen.images(&gen.forward(&z, rest).1);
        responses.extend(query(oracle, &xs, samples.len())?);
        samples.extend(xs);
    }
    let q = QuerySet {
        samples,
        provenance: cfg.clone(),
        responses: Some(responses),
        origin: None,
    };
    Ok((
        q,
        Some(DfmeTrace {
            disagreement: trace,
            substitute: sub,
        }),
    ))
}

/// Trains a substitute to match the victim's probability vectors in MSE.
pub fn train_substitute(queries: &QuerySet, victim_responses: &[Vec<f32>], arch: Architecture, cfg: &TrainConfig) -> Result<ClassifierModel> {
    if queries.is_empty() {
        return Err(Error::invalid("cannot train a substitute on zero queries"));
    }
    if queries.len() != victim_responses.len() {
        return Err(Error::Consistency(format!(
            "{} queries but {} responses",
            queries.len(),
            victim_responses.len()
        )));
    }
    let k = victim_responses[0].len();
    let mut model = ClassifierModel::init(arch, queries.samples[0].shape(), k, &RngHandle::new(cfg.seed, "substitute/init"))?;
    fit_soft_targets(&mut model, &queries.samples, victim_responses, cfg, format!("queries-{}", queries.provenance.label()))?;
    Ok(model)
}

/// Fraction of samples on which both models pick the same class.
pub fn agreement(a: &ClassifierModel, b: &ClassifierModel, data: &LabeledDataset) -> Result<f64> {
    if a.input_shape() != b.input_shape() || a.num_classes() != b.num_classes() {
        return Err(Error::shape(
            format!("{} / {} classes", a.input_shape(), a.num_classes()),
            format!("{} / {} classes", b.input_shape(), b.num_classes()),
        ));
    }
    if data.is_empty() {
        return Err(Error::invalid("cannot measure agreement on an empty dataset"));
    }
    let pa = a.predict_dataset(data)?;
    let pb = b.predict_dataset(data)?;
    let same = pa.iter().zip(&pb).filter(|(x, y)| argmax(x) == argmax(y)).count();
    Ok(same as f64 / data.len() as f64)
}
