//! Masked autoencoder used to reconstruct queries from a random subset of
//! their patches.
//!
//! The encoder only sees kept patches. The decoder sees the encoded kept
//! tokens plus a shared learned mask token at every masked position and
//! predicts raw pixels for all patches. Reconstructions copy kept patches
//! from the input and take the (clipped) prediction elsewhere.

use std::io::Write as _;
use std::path::Path;

use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{params_hash, read_checkpoint, write_checkpoint};
use crate::data::{ImageTensor, LabeledDataset, Shape};
use crate::error::{Error, Result};
use crate::nn::layers::{LayerNorm, LayerNormCache, Linear};
use crate::nn::loss::masked_mse;
use crate::nn::optim::{warmup_cosine, AdamW};
use crate::nn::transformer::{sincos_2d, Block, BlockCache};
use crate::nn::{Init, ParamBuilder, Slot};
use crate::par::{self, Execution};
use crate::rng::RngHandle;

/// Samples per parallel work item during training and batch reconstruction.
const CHUNK: usize = 8;

/// Splits `x` into row-major `patch x patch` tiles. Each tile is flattened
/// channels-last (`py, px, c`).
pub fn patchify(x: &ImageTensor, patch: usize) -> Result<Vec<Vec<f32>>> {
    let s = x.shape();
    check_divisible(s, patch)?;
    let (gh, gw) = (s.height / patch, s.width / patch);
    let px = x.pixels();
    let mut out = Vec::with_capacity(gh * gw);
    for by in 0..gh {
        for bx in 0..gw {
            let mut tile = Vec::with_capacity(patch * patch * s.channels);
            for py in 0..patch {
                for pxi in 0..patch {
                    let (yy, xx) = (by * patch + py, bx * patch + pxi);
                    for c in 0..s.channels {
                        tile.push(px[(c * s.height + yy) * s.width + xx]);
                    }
                }
            }
            out.push(tile);
        }
    }
    Ok(out)
}

/// Inverse of [`patchify`].
pub fn unpatchify(patches: &[Vec<f32>], shape: Shape, patch: usize) -> Result<ImageTensor> {
    check_divisible(shape, patch)?;
    let (gh, gw) = (shape.height / patch, shape.width / patch);
    let pd = patch * patch * shape.channels;
    if patches.len() != gh * gw || patches.iter().any(|t| t.len() != pd) {
        return Err(Error::shape(format!("{} patches of {pd} values", gh * gw), format!("{} patches", patches.len())));
    }
    let mut px = vec![0.0; shape.len()];
    for (i, tile) in patches.iter().enumerate() {
        let (by, bx) = (i / gw, i % gw);
        for py in 0..patch {
            for pxi in 0..patch {
                let (yy, xx) = (by * patch + py, bx * patch + pxi);
                for c in 0..shape.channels {
                    px[(c * shape.height + yy) * shape.width + xx] = tile[(py * patch + pxi) * shape.channels + c];
                }
            }
        }
    }
    ImageTensor::new(shape, px)
}

fn check_divisible(s: Shape, patch: usize) -> Result<()> {
    if patch == 0 || s.height % patch != 0 || s.width % patch != 0 {
        return Err(Error::invalid(format!("image {s} is not divisible into {patch}x{patch} patches")));
    }
    Ok(())
}

/// Patch keep/mask pattern; `bits[i]` is true when patch `i` is kept.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskMatrix {
    pub bits: Vec<bool>,
    pub mask_ratio: f64,
    pub seed: u64,
}

impl MaskMatrix {
    pub fn masked_count(&self) -> usize {
        self.bits.iter().filter(|b| !**b).count()
    }

    fn kept(&self) -> Vec<usize> {
        (0..self.bits.len()).filter(|&i| self.bits[i]).collect()
    }
}

/// Masks exactly `floor(mask_ratio * num_patches)` patches chosen uniformly
/// without replacement.
pub fn sample_mask(num_patches: usize, mask_ratio: f64, rng: &RngHandle) -> Result<MaskMatrix> {
    if !(0.0..1.0).contains(&mask_ratio) {
        return Err(Error::invalid(format!("mask ratio {mask_ratio} outside [0, 1)")));
    }
    let masked = (mask_ratio * num_patches as f64).floor() as usize;
    let mut bits = vec![true; num_patches];
    for i in index::sample(&mut rng.rng(), num_patches, masked) {
        bits[i] = false;
    }
    Ok(MaskMatrix { bits, mask_ratio, seed: rng.seed })
}

/// Mean squared per-pixel difference.
pub fn reconstruction_error(x: &ImageTensor, xh: &ImageTensor) -> Result<f64> {
    if x.shape() != xh.shape() {
        return Err(Error::shape(x.shape(), xh.shape()));
    }
    let sum: f64 = x
        .pixels()
        .iter()
        .zip(xh.pixels())
        .map(|(a, b)| {
            let d = (*a - *b) as f64;
            d * d
        })
        .sum();
    Ok(sum / x.pixels().len() as f64)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MaeArch {
    pub patch: usize,
    pub embed: usize,
    pub depth: usize,
    pub heads: usize,
    pub decoder_embed: usize,
    pub decoder_depth: usize,
    pub decoder_heads: usize,
    pub mlp_ratio: usize,
}

impl Default for MaeArch {
    fn default() -> Self {
        Self {
            patch: 7,
            embed: 64,
            depth: 4,
            heads: 4,
            decoder_embed: 32,
            decoder_depth: 2,
            decoder_heads: 4,
            mlp_ratio: 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MAETrainConfig {
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub mask_ratio: f64,
    pub seed: u64,
    pub weight_decay: f64,
    pub arch: MaeArch,
}

impl Default for MAETrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            warmup_epochs: 5,
            batch_size: 64,
            learning_rate: 1e-3,
            mask_ratio: 0.75,
            seed: 0,
            weight_decay: 0.05,
            arch: MaeArch::default(),
        }
    }
}

impl MAETrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs < 1 {
            return Err(Error::invalid("epochs must be >= 1"));
        }
        if self.warmup_epochs > self.epochs {
            return Err(Error::invalid("warmup epochs exceed total epochs"));
        }
        if !(0.0..1.0).contains(&self.mask_ratio) {
            return Err(Error::invalid(format!("mask ratio {} outside [0, 1)", self.mask_ratio)));
        }
        if self.batch_size == 0 || !(self.learning_rate > 0.0) {
            return Err(Error::invalid("batch size and learning rate must be positive"));
        }
        let a = &self.arch;
        if a.embed % 4 != 0 || a.decoder_embed % 4 != 0 {
            return Err(Error::invalid("embedding sizes must be multiples of 4"));
        }
        if a.embed % a.heads != 0 || a.decoder_embed % a.decoder_heads != 0 {
            return Err(Error::invalid("embedding size must divide evenly across heads"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
struct Layout {
    patch_embed: Linear,
    encoder: Vec<Block>,
    encoder_norm: LayerNorm,
    decoder_embed: Linear,
    mask_token: Slot,
    decoder: Vec<Block>,
    decoder_norm: LayerNorm,
    head: Linear,
}

struct Cache {
    x_kept: Vec<f32>,
    enc: Vec<BlockCache>,
    enc_norm: LayerNormCache,
    latent: Vec<f32>,
    dec: Vec<BlockCache>,
    dec_norm: LayerNormCache,
    dec_out: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaeManifest {
    pub epochs: usize,
    pub seed: u64,
    pub dataset_fingerprint: String,
    /// Epoch-mean training loss, one entry per epoch.
    pub loss_curve: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MAEModel {
    arch: MaeArch,
    shape: Shape,
    mask_ratio: f64,
    layout: Layout,
    slots: Vec<Slot>,
    params: Vec<f32>,
    pos_enc: Vec<f32>,
    pos_dec: Vec<f32>,
    pub manifest: MaeManifest,
}

#[derive(Serialize, Deserialize)]
struct CheckpointManifest {
    kind: String,
    arch: MaeArch,
    input_shape: Shape,
    mask_ratio: f64,
    param_count: usize,
    training: MaeManifest,
    content_hash: String,
}

impl MAEModel {
    pub fn init(arch: MaeArch, shape: Shape, mask_ratio: f64, rng: &RngHandle) -> Result<Self> {
        check_divisible(shape, arch.patch)?;
        if !(0.0..1.0).contains(&mask_ratio) {
            return Err(Error::invalid(format!("mask ratio {mask_ratio} outside [0, 1)")));
        }
        let pd = arch.patch * arch.patch * shape.channels;
        let (m, dd) = (arch.embed, arch.decoder_embed);
        let mut pb = ParamBuilder::new(rng.rng());
        let layout = Layout {
            patch_embed: Linear::new(&mut pb, pd, m, Init::Xavier(pd, m)),
            encoder: (0..arch.depth).map(|_| Block::new(&mut pb, m, arch.heads, m * arch.mlp_ratio)).collect(),
            encoder_norm: LayerNorm::new(&mut pb, m),
            decoder_embed: Linear::new(&mut pb, m, dd, Init::Xavier(m, dd)),
            mask_token: pb.alloc(dd, Init::Normal(0.02), false),
            decoder: (0..arch.decoder_depth)
                .map(|_| Block::new(&mut pb, dd, arch.decoder_heads, dd * arch.mlp_ratio))
                .collect(),
            decoder_norm: LayerNorm::new(&mut pb, dd),
            head: Linear::new(&mut pb, dd, pd, Init::Xavier(dd, pd)),
        };
        let slots = pb.slots().to_vec();
        let (gh, gw) = (shape.height / arch.patch, shape.width / arch.patch);
        Ok(Self {
            pos_enc: sincos_2d(m, gh, gw),
            pos_dec: sincos_2d(dd, gh, gw),
            arch,
            shape,
            mask_ratio,
            layout,
            slots,
            params: pb.finish(),
            manifest: MaeManifest {
                epochs: 0,
                seed: rng.seed,
                dataset_fingerprint: String::new(),
                loss_curve: vec![],
            },
        })
    }

    pub fn arch(&self) -> &MaeArch {
        &self.arch
    }

    pub fn input_shape(&self) -> Shape {
        self.shape
    }

    pub fn mask_ratio(&self) -> f64 {
        self.mask_ratio
    }

    pub fn num_patches(&self) -> usize {
        (self.shape.height / self.arch.patch) * (self.shape.width / self.arch.patch)
    }

    fn patch_dim(&self) -> usize {
        self.arch.patch * self.arch.patch * self.shape.channels
    }

    pub fn content_hash(&self) -> String {
        params_hash(&self.params)
    }

    /// `patches` holds `n` images as `n x P x patch_dim`; every `keep` entry
    /// lists the same number of kept patch indices.
    fn forward(&self, p: &[f32], patches: &[f32], keep: &[Vec<usize>]) -> (Vec<f32>, Cache) {
        let l = &self.layout;
        let n = keep.len();
        let k = keep.first().map_or(0, Vec::len);
        let np = self.num_patches();
        let pd = self.patch_dim();
        let (m, dd) = (self.arch.embed, self.arch.decoder_embed);

        let mut x_kept = Vec::with_capacity(n * k * pd);
        for (s, kept) in keep.iter().enumerate() {
            for &i in kept {
                x_kept.extend_from_slice(&patches[(s * np + i) * pd..(s * np + i + 1) * pd]);
            }
        }
        let mut h = l.patch_embed.forward(p, &x_kept, n * k);
        for (s, kept) in keep.iter().enumerate() {
            for (j, &i) in kept.iter().enumerate() {
                let row = &mut h[(s * k + j) * m..(s * k + j + 1) * m];
                row.iter_mut().zip(&self.pos_enc[i * m..(i + 1) * m]).for_each(|(a, b)| *a += b);
            }
        }
        let mut enc = Vec::with_capacity(l.encoder.len());
        for b in &l.encoder {
            let (y, c) = b.forward(p, &h, n, k);
            enc.push(c);
            h = y;
        }
        let (latent, enc_norm) = l.encoder_norm.forward(p, &h);
        let d = l.decoder_embed.forward(p, &latent, n * k);

        let token = l.mask_token.of(p);
        let mut full = Vec::with_capacity(n * np * dd);
        for _ in 0..n * np {
            full.extend_from_slice(token);
        }
        for (s, kept) in keep.iter().enumerate() {
            for (j, &i) in kept.iter().enumerate() {
                full[(s * np + i) * dd..(s * np + i + 1) * dd].copy_from_slice(&d[(s * k + j) * dd..(s * k + j + 1) * dd]);
            }
        }
        for s in 0..n {
            full[s * np * dd..(s + 1) * np * dd]
                .iter_mut()
                .zip(&self.pos_dec)
                .for_each(|(a, b)| *a += b);
        }
        let mut g = full;
        let mut dec = Vec::with_capacity(l.decoder.len());
        for b in &l.decoder {
            let (y, c) = b.forward(p, &g, n, np);
            dec.push(c);
            g = y;
        }
        let (dec_out, dec_norm) = l.decoder_norm.forward(p, &g);
        let pred = l.head.forward(p, &dec_out, n * np);
        (
            pred,
            Cache {
                x_kept,
                enc,
                enc_norm,
                latent,
                dec,
                dec_norm,
                dec_out,
            },
        )
    }

    fn backward(&self, p: &[f32], c: &Cache, dpred: &[f32], keep: &[Vec<usize>], grad: &mut [f32]) {
        let l = &self.layout;
        let n = keep.len();
        let k = keep.first().map_or(0, Vec::len);
        let np = self.num_patches();
        let dd = self.arch.decoder_embed;

        let dh = l.head.backward(p, &c.dec_out, dpred, n * np, grad, true).expect("dx");
        let mut dg = l.decoder_norm.backward(p, &c.dec_norm, &dh, grad);
        for (b, cache) in l.decoder.iter().zip(&c.dec).rev() {
            dg = b.backward(p, cache, &dg, n, np, grad);
        }
        let mut dd_kept = vec![0.0; n * k * dd];
        let mut is_kept = vec![false; n * np];
        for (s, kept) in keep.iter().enumerate() {
            for (j, &i) in kept.iter().enumerate() {
                is_kept[s * np + i] = true;
                dd_kept[(s * k + j) * dd..(s * k + j + 1) * dd].copy_from_slice(&dg[(s * np + i) * dd..(s * np + i + 1) * dd]);
            }
        }
        let dtoken = l.mask_token.of_mut(grad);
        for (r, kept) in is_kept.iter().enumerate() {
            if !kept {
                dtoken.iter_mut().zip(&dg[r * dd..(r + 1) * dd]).for_each(|(a, b)| *a += b);
            }
        }
        let dlatent = l.decoder_embed.backward(p, &c.latent, &dd_kept, n * k, grad, true).expect("dx");
        let mut dh = l.encoder_norm.backward(p, &c.enc_norm, &dlatent, grad);
        for (b, cache) in l.encoder.iter().zip(&c.enc).rev() {
            dh = b.backward(p, cache, &dh, n, k, grad);
        }
        l.patch_embed.backward(p, &c.x_kept, &dh, n * k, grad, false);
    }

    fn flat_patches(&self, x: &ImageTensor) -> Result<Vec<f32>> {
        if x.shape() != self.shape {
            return Err(Error::shape(self.shape, x.shape()));
        }
        Ok(patchify(x, self.arch.patch)?.concat())
    }

    fn check_mask(&self, mask: &MaskMatrix) -> Result<()> {
        if mask.bits.len() != self.num_patches() {
            return Err(Error::shape(format!("mask over {} patches", self.num_patches()), mask.bits.len()));
        }
        Ok(())
    }

    /// Reconstructs a batch of images that all use masks with the same kept
    /// count.
    fn reconstruct_group(&self, xs: &[&ImageTensor], masks: &[&MaskMatrix]) -> Result<Vec<ImageTensor>> {
        let pd = self.patch_dim();
        let np = self.num_patches();
        let mut flat = Vec::with_capacity(xs.len() * np * pd);
        for x in xs {
            flat.extend(self.flat_patches(x)?);
        }
        let keep: Vec<Vec<usize>> = masks.iter().map(|m| m.kept()).collect();
        let pred = if masks.iter().all(|m| m.masked_count() == 0) {
            Vec::new()
        } else {
            self.forward(&self.params, &flat, &keep).0
        };
        xs.iter()
            .enumerate()
            .map(|(s, x)| {
                let tiles: Vec<Vec<f32>> = (0..np)
                    .map(|i| {
                        let src = if masks[s].bits[i] { &flat } else { &pred };
                        src[(s * np + i) * pd..(s * np + i + 1) * pd]
                            .iter()
                            .map(|v| if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) })
                            .collect()
                    })
                    .collect();
                unpatchify(&tiles, x.shape(), self.arch.patch)
            })
            .collect()
    }

    pub fn reconstruct(&self, x: &ImageTensor, mask: &MaskMatrix) -> Result<ImageTensor> {
        self.check_mask(mask)?;
        Ok(self.reconstruct_group(&[x], &[mask])?.remove(0))
    }

    /// Mask used when scoring `x`: a pure function of the query bytes.
    pub fn scoring_mask(&self, x: &ImageTensor) -> MaskMatrix {
        let d = x.digest();
        let seed = u64::from_le_bytes(d[..8].try_into().expect("8 bytes"));
        sample_mask(self.num_patches(), self.mask_ratio, &RngHandle::new(seed, "mae/score-mask")).expect("validated ratio")
    }

    /// Reconstructs every image with its own mask.
    pub fn reconstruct_batch(&self, exec: Execution, xs: &[ImageTensor], masks: &[MaskMatrix]) -> Result<Vec<ImageTensor>> {
        if xs.len() != masks.len() {
            return Err(Error::Consistency(format!("{} images but {} masks", xs.len(), masks.len())));
        }
        for m in masks {
            self.check_mask(m)?;
        }
        let uniform = masks.windows(2).all(|w| w[0].masked_count() == w[1].masked_count());
        if !uniform {
            return xs.iter().zip(masks).map(|(x, m)| self.reconstruct(x, m)).collect();
        }
        let chunks = par::chunks(xs.len(), CHUNK);
        let parts = par::map(exec, &chunks, |r| {
            let xr: Vec<&ImageTensor> = xs[r.clone()].iter().collect();
            let mr: Vec<&MaskMatrix> = masks[r.clone()].iter().collect();
            self.reconstruct_group(&xr, &mr)
        });
        let mut out = Vec::with_capacity(xs.len());
        for p in parts {
            out.extend(p?);
        }
        Ok(out)
    }

    /// Reconstruction error of each image under its scoring mask.
    pub fn score_batch(&self, exec: Execution, xs: &[ImageTensor]) -> Result<Vec<f64>> {
        let masks: Vec<MaskMatrix> = xs.iter().map(|x| self.scoring_mask(x)).collect();
        let recon = self.reconstruct_batch(exec, xs, &masks)?;
        xs.iter().zip(&recon).map(|(x, r)| reconstruction_error(x, r)).collect()
    }

    /// Masked-pixel loss and parameter gradient for one batch.
    fn batch_gradient(&self, exec: Execution, patches: &[f32], keep: &[Vec<usize>]) -> (f64, Vec<f32>) {
        let n = keep.len();
        let np = self.num_patches();
        let pd = self.patch_dim();
        let chunks = par::chunks(n, CHUNK);
        let parts = par::map(exec, &chunks, |r| {
            let flat = &patches[r.start * np * pd..r.end * np * pd];
            let kr = &keep[r.clone()];
            let (pred, cache) = self.forward(&self.params, flat, kr);
            let mut mask = vec![true; flat.len()];
            for (s, kept) in kr.iter().enumerate() {
                for &i in kept {
                    mask[(s * np + i) * pd..(s * np + i + 1) * pd].iter_mut().for_each(|b| *b = false);
                }
            }
            let (loss, dpred) = masked_mse(flat, &pred, &mask, np * pd, n as f32);
            let mut g = vec![0.0; self.params.len()];
            self.backward(&self.params, &cache, &dpred, kr, &mut g);
            (loss as f64, g)
        });
        let loss = parts.iter().map(|p| p.0).sum();
        (loss, par::sum_in_order(parts.into_iter().map(|p| p.1).collect()))
    }

    pub fn save(&self, stem: &Path) -> Result<()> {
        let m = CheckpointManifest {
            kind: "mae".into(),
            arch: self.arch.clone(),
            input_shape: self.shape,
            mask_ratio: self.mask_ratio,
            param_count: self.params.len(),
            training: self.manifest.clone(),
            content_hash: self.content_hash(),
        };
        write_checkpoint(stem, &m, &self.params)
    }

    pub fn load(stem: &Path) -> Result<Self> {
        let (m, params): (CheckpointManifest, _) = read_checkpoint(stem, |m: &CheckpointManifest| &m.content_hash)?;
        if m.kind != "mae" {
            return Err(Error::Format(format!("expected an mae checkpoint, found `{}`", m.kind)));
        }
        let mut model = Self::init(m.arch, m.input_shape, m.mask_ratio, &RngHandle::new(0, "layout"))?;
        if params.len() != model.params.len() {
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

    /// Writes the loss curve as `epoch,loss` CSV (epochs counted from 1).
    pub fn write_loss_curve(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut body = String::from("epoch,loss\n");
        for (i, l) in self.manifest.loss_curve.iter().enumerate() {
            body.push_str(&format!("{},{l:.8}\n", i + 1));
        }
        f.write_all(body.as_bytes()).map_err(|e| Error::io(path, e))
    }
}

pub fn train_mae(data: &LabeledDataset, cfg: &MAETrainConfig) -> Result<MAEModel> {
    train_mae_with(data, cfg, Execution::default(), |_, _| Ok(()))
}

/// Trains an MAE, calling `on_epoch(epoch, model)` after every epoch
/// (epochs counted from 1).
pub fn train_mae_with<F>(data: &LabeledDataset, cfg: &MAETrainConfig, exec: Execution, mut on_epoch: F) -> Result<MAEModel>
where
    F: FnMut(usize, &MAEModel) -> Result<()>,
{
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::invalid("cannot train on an empty dataset"));
    }
    let root = RngHandle::new(cfg.seed, "mae");
    let mut model = MAEModel::init(cfg.arch.clone(), data.shape(), cfg.mask_ratio, &root.derive("init"))?;
    let patches: Vec<Vec<f32>> = data
        .samples()
        .iter()
        .map(|x| model.flat_patches(x))
        .collect::<Result<_>>()?;
    let np = model.num_patches();
    let steps_per_epoch = data.len().div_ceil(cfg.batch_size);
    let total = steps_per_epoch * cfg.epochs;
    let warmup = steps_per_epoch * cfg.warmup_epochs;
    model.manifest.seed = cfg.seed;
    model.manifest.dataset_fingerprint = data.fingerprint();
    let mut opt = AdamW::new(model.params.len(), &model.slots, cfg.weight_decay as f32);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let er = root.derive_indexed("epoch", epoch as u64);
        rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut er.derive("order").rng());
        let masks = er.derive("masks");
        let mut total_loss = 0.0;
        for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
            let mut flat = Vec::with_capacity(batch.len() * np * model.patch_dim());
            let mut keep = Vec::with_capacity(batch.len());
            for (j, &i) in batch.iter().enumerate() {
                flat.extend_from_slice(&patches[i]);
                let r = masks.derive_indexed("sample", (b * cfg.batch_size + j) as u64);
                keep.push(sample_mask(np, cfg.mask_ratio, &r)?.kept());
            }
            let (loss, g) = model.batch_gradient(exec, &flat, &keep);
            if !loss.is_finite() || g.iter().any(|v| !v.is_finite()) {
                return Err(Error::Diverged {
                    epoch: epoch + 1,
                    detail: format!("mae loss {loss} at step {step}"),
                });
            }
            total_loss += loss * batch.len() as f64;
            let lr = warmup_cosine(cfg.learning_rate as f32, step, warmup, total);
            opt.step(&mut model.params, &g, lr);
            step += 1;
        }
        let mean = total_loss / data.len() as f64;
        tracing::info!(epoch = epoch + 1, loss = mean, "mae epoch");
        model.manifest.loss_curve.push(mean);
        model.manifest.epochs = epoch + 1;
        on_epoch(epoch + 1, &model)?;
    }
    Ok(model)
}
