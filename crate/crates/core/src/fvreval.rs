//! Finger-vein verification baseline: a compact embedding network trained
//! with a cosine-softmax plus batch-hard triplet loss, cosine matching, and
//! equal error rate.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::dataset::Dataset;
use crate::diffcore::nn::Conv;
use crate::diffcore::{self, Array, Graph, ParamId, ParamStore, Session, Sgd, Var};
use crate::error::{Error, Result};
use crate::model::MtModel;
use crate::mtaug::{self, AugConfig, MotionBasis};
use crate::mttrain::Affine;

pub const EMBED_DIM: usize = 128;
pub const CONV_WIDTHS: [usize; 4] = [16, 32, 64, 128];

const BN_EPS: f32 = 1e-5;
const BN_MOMENTUM: f32 = 0.1;

/// `1 / sqrt(var + eps)`, elementwise.
fn inv_sqrt(g: &mut Graph, var: Var) -> Result<Var> {
    let shifted = g.add_scalar(var, BN_EPS)?;
    let log = g.log(shifted)?;
    let half = g.scale(log, -0.5)?;
    g.exp(half)
}

/// Four stride-2 conv blocks, global average pooling, batch normalization of
/// the pooled features, a linear layer and L2 normalization.
#[derive(Clone, Debug)]
pub struct Embedder {
    convs: Vec<Conv>,
    bn_mean: ParamId,
    bn_var: ParamId,
    fc_weight: ParamId,
    fc_bias: ParamId,
    height: usize,
    width: usize,
}

/// Per-feature mean and variance of one training batch.
#[derive(Clone, Debug)]
pub struct BatchStats {
    pub mean: Vec<f32>,
    pub var: Vec<f32>,
}

impl Embedder {
    pub fn new(store: &mut ParamStore, height: usize, width: usize, rng: &mut impl Rng) -> Self {
        let mut c_in = 1;
        let convs = CONV_WIDTHS
            .iter()
            .enumerate()
            .map(|(i, &c)| {
                let conv = Conv::new(store, &format!("embedder.conv{}", i + 1), c_in, c, 3, 2, rng, true);
                c_in = c;
                conv
            })
            .collect();
        let bn_mean = store.add("embedder.bn.mean", Array::zeros(&[1, c_in]), false);
        let bn_var = store.add("embedder.bn.var", Array::full(&[1, c_in], 1.0), false);
        let fc_weight = store.add_he("embedder.fc.weight", &[c_in, EMBED_DIM], c_in, rng, true);
        let fc_bias = store.add("embedder.fc.bias", Array::zeros(&[1, EMBED_DIM]), true);
        Embedder {
            convs,
            bn_mean,
            bn_var,
            fc_weight,
            fc_bias,
            height,
            width,
        }
    }

    /// `1 x h x w` image to a `1 x c` row of pooled features.
    fn pooled(&self, s: &mut Session, image: Var) -> Result<Var> {
        if s.g.shape(image) != [1, self.height, self.width] {
            return Err(Error::shape(
                "embed",
                format!("expected 1x{}x{}, got {:?}", self.height, self.width, s.g.shape(image)),
            ));
        }
        let mut x = image;
        for c in &self.convs {
            x = c.forward_relu(s, x)?;
        }
        let pooled = s.g.mean_spatial(x)?;
        let c = s.g.shape(pooled)[0];
        s.g.reshape(pooled, &[1, c])
    }

    fn project(&self, s: &mut Session, normalized: Var) -> Result<Var> {
        let w = s.param(self.fc_weight);
        let b = s.param(self.fc_bias);
        let y = s.g.matmul(normalized, w)?;
        let rows = s.g.shape(y)[0];
        let b = if rows == 1 {
            b
        } else {
            let ones = s.g.constant(Array::full(&[rows, 1], 1.0));
            s.g.matmul(ones, b)?
        };
        let y = s.g.add(y, b)?;
        s.g.l2_normalize_rows(y)
    }

    /// `1 x h x w` image to a `1 x 128` unit row, normalized with the running statistics.
    pub fn forward(&self, s: &mut Session, image: Var) -> Result<Var> {
        let row = self.pooled(s, image)?;
        let mean = s.param(self.bn_mean);
        let var = s.param(self.bn_var);
        let centered = s.g.sub(row, mean)?;
        let inv = inv_sqrt(&mut s.g, var)?;
        let normalized = s.g.mul(centered, inv)?;
        self.project(s, normalized)
    }

    /// Embeds a batch normalized with its own statistics; `b x 128` rows plus those statistics.
    pub fn forward_train(&self, s: &mut Session, images: &[Var]) -> Result<(Var, BatchStats)> {
        let rows = images.iter().map(|&x| self.pooled(s, x)).collect::<Result<Vec<_>>>()?;
        let x = s.g.concat(&rows)?;
        let b = rows.len();
        let avg = s.g.constant(Array::full(&[1, b], 1.0 / b as f32));
        let ones = s.g.constant(Array::full(&[b, 1], 1.0));
        let mean = s.g.matmul(avg, x)?;
        let mean_b = s.g.matmul(ones, mean)?;
        let centered = s.g.sub(x, mean_b)?;
        let sq = s.g.mul(centered, centered)?;
        let var = s.g.matmul(avg, sq)?;
        let inv = inv_sqrt(&mut s.g, var)?;
        let inv_b = s.g.matmul(ones, inv)?;
        let normalized = s.g.mul(centered, inv_b)?;
        let stats = BatchStats {
            mean: s.g.value(mean).data().to_vec(),
            var: s.g.value(var).data().to_vec(),
        };
        Ok((self.project(s, normalized)?, stats))
    }

    /// Exponential moving update of the inference statistics.
    pub fn update_stats(&self, store: &mut ParamStore, stats: &BatchStats) {
        for (id, batch) in [(self.bn_mean, &stats.mean), (self.bn_var, &stats.var)] {
            for (r, b) in store.value_mut(id).data_mut().iter_mut().zip(batch) {
                *r += BN_MOMENTUM * (b - *r);
            }
        }
    }

    pub fn embed(&self, store: &ParamStore, image: &Array) -> Result<Vec<f32>> {
        let mut s = Session::new(store, false);
        let x = s.g.constant(crate::posedet::as_chw(image)?);
        let e = self.forward(&mut s, x)?;
        Ok(s.g.value(e).data().to_vec())
    }
}

/// Cosine-softmax over unit class prototypes plus batch-hard triplet on
/// cosine distance. Returns `(total, ce, triplet)`; the triplet term is
/// `None` when no anchor has both a positive and a negative.
pub fn fusion_loss(
    g: &mut Graph,
    embeddings: Var,
    labels: &[usize],
    prototypes: Var,
    scale: f32,
    margin: f32,
) -> Result<(Var, Var, Option<Var>)> {
    let protos = g.l2_normalize_rows(prototypes)?;
    let pt = g.transpose(protos)?;
    let cos = g.matmul(embeddings, pt)?;
    let logits = g.scale(cos, scale)?;
    let ce = g.cross_entropy(logits, labels)?;
    let et = g.transpose(embeddings)?;
    let sim = g.matmul(embeddings, et)?;
    let neg = g.neg(sim)?;
    let dist = g.add_scalar(neg, 1.0)?;
    let trip = g.batch_hard_triplet(dist, labels, margin)?;
    let total = match trip {
        Some(t) => g.add(ce, t)?,
        None => {
            log::debug!("batch without positive/negative pairs; triplet term skipped");
            ce
        }
    };
    Ok((total, ce, trip))
}

/// Genuine (same class) and impostor (different class) similarity scores.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ScoreSet {
    pub genuine: Vec<f64>,
    pub impostor: Vec<f64>,
}

impl ScoreSet {
    /// One `label score` line per score.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (label, list) in [("genuine", &self.genuine), ("impostor", &self.impostor)] {
            for v in list {
                writeln!(s, "{label} {v:.9}").expect("string write");
            }
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut out = ScoreSet::default();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let bad = || Error::Data(format!("score line {}: {line:?}", n + 1));
            let (label, value) = line.split_once(char::is_whitespace).ok_or_else(bad)?;
            let v: f64 = value.trim().parse().map_err(|_| bad())?;
            if !v.is_finite() {
                return Err(bad());
            }
            match label {
                "genuine" => out.genuine.push(v),
                "impostor" => out.impostor.push(v),
                _ => return Err(bad()),
            }
        }
        Ok(out)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }
}

/// Equal error rate and its threshold. Candidate thresholds are the midpoints
/// between consecutive distinct scores plus one below and one above all
/// scores; `FAR(t)` counts impostors `>= t`, `FRR(t)` genuines `< t`. The
/// crossing is linearly interpolated between the bracketing candidates.
pub fn compute_eer(scores: &ScoreSet) -> Result<(f64, f64)> {
    let (g, i) = (&scores.genuine, &scores.impostor);
    if g.is_empty() || i.is_empty() {
        return Err(Error::Data("EER needs both genuine and impostor scores".into()));
    }
    if g.iter().chain(i).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { op: "compute_eer" });
    }
    let mut all: Vec<(f64, bool)> = g.iter().map(|&v| (v, true)).chain(i.iter().map(|&v| (v, false))).collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    let (ng, ni) = (g.len() as f64, i.len() as f64);
    // state at a threshold below every score
    let (mut below_g, mut below_i) = (0usize, 0usize);
    let mut prev_t = all[0].0 - 1.0;
    let (mut prev_far, mut prev_frr) = (1.0, 0.0);
    let mut k = 0;
    loop {
        // advance past every score equal to the current value
        let next_t = if k < all.len() {
            let v = all[k].0;
            while k < all.len() && all[k].0 == v {
                if all[k].1 {
                    below_g += 1;
                } else {
                    below_i += 1;
                }
                k += 1;
            }
            if k < all.len() {
                0.5 * (v + all[k].0)
            } else {
                v + 1.0
            }
        } else {
            unreachable!("the last candidate has FAR 0 and FRR 1")
        };
        let far = (ni - below_i as f64) / ni;
        let frr = below_g as f64 / ng;
        let (d0, d1) = (prev_far - prev_frr, far - frr);
        if d1 <= 0.0 {
            let a = if d0 - d1 > 0.0 { d0 / (d0 - d1) } else { 1.0 };
            let eer = prev_far + a * (far - prev_far);
            let t = prev_t + a * (next_t - prev_t);
            return Ok((eer, t));
        }
        prev_t = next_t;
        prev_far = far;
        prev_frr = frr;
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FvrConfig {
    pub epochs: usize,
    /// Classes per batch.
    pub batch_classes: usize,
    /// Samples per class per batch.
    pub batch_samples: usize,
    pub lr: f32,
    /// From this epoch on (0-based) the learning rate is divided by 10.
    pub decay_epoch: usize,
    pub momentum: f32,
    pub scale: f32,
    pub margin: f32,
    /// Crop-resize, small rotation and brightness jitter on every training sample.
    pub conventional_aug: bool,
    /// Score every cross-class test pair instead of an equal-size random subset.
    pub all_impostors: bool,
    pub seed: u64,
}

impl Default for FvrConfig {
    fn default() -> Self {
        FvrConfig {
            epochs: 30,
            batch_classes: 8,
            batch_samples: 4,
            lr: 0.05,
            decay_epoch: 20,
            momentum: 0.9,
            scale: 16.0,
            margin: 0.2,
            conventional_aug: true,
            all_impostors: false,
            seed: 0,
        }
    }
}

impl FvrConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_classes == 0 || self.batch_samples == 0 || !(self.lr > 0.0) || !(self.scale > 0.0) || !(self.margin >= 0.0) {
            return Err(Error::Config(format!("invalid recognition training parameters: {self:?}")));
        }
        Ok(())
    }
}

/// Random crop-resize (zoom up to 10%), rotation within 5 degrees, small
/// shift and brightness/contrast jitter.
pub fn conventional_augment(image: &Array, rng: &mut impl Rng) -> Result<Array> {
    let (_, h, w) = image.dims3()?;
    let a = Affine::about(
        (w as f32 - 1.0) / 2.0,
        (h as f32 - 1.0) / 2.0,
        rng.gen_range(-5.0..=5.0),
        rng.gen_range(1.0..=1.1),
        rng.gen_range(-2.0..=2.0),
        rng.gen_range(-2.0..=2.0),
    );
    let mut out = diffcore::warp(&crate::posedet::as_chw(image)?, &a.warp_flow(h, w)?)?;
    let gain = rng.gen_range(0.9..=1.1);
    let bias = rng.gen_range(-0.05..=0.05);
    out.data_mut().iter_mut().for_each(|v| *v = (*v * gain + bias).clamp(0.0, 1.0));
    Ok(out)
}

/// Optional motion-transfer augmentor applied before conventional augmentation.
#[derive(Clone, Copy)]
pub struct Augmentor<'a> {
    pub model: &'a MtModel,
    pub basis: &'a MotionBasis,
    pub config: AugConfig,
}

pub struct FvrModel {
    pub store: ParamStore,
    pub embedder: Embedder,
}

impl FvrModel {
    pub fn new(height: usize, width: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let embedder = Embedder::new(&mut store, height, width, &mut rng);
        FvrModel { store, embedder }
    }

    pub fn embed(&self, image: &Array) -> Result<Vec<f32>> {
        self.embedder.embed(&self.store, image)
    }

    pub fn param_count(&self) -> usize {
        self.store.count("embedder", true)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FvrEpoch {
    pub epoch: usize,
    pub loss: f32,
}

/// PK batches: `batch_classes` shuffled classes, `batch_samples` random samples of each.
fn pk_batches(ds: &Dataset, cfg: &FvrConfig, rng: &mut impl Rng) -> Vec<Vec<usize>> {
    let mut by_class: Vec<Vec<usize>> = ds.by_class().into_iter().filter(|m| !m.is_empty()).collect();
    by_class.shuffle(rng);
    by_class
        .chunks(cfg.batch_classes)
        .map(|classes| {
            classes
                .iter()
                .flat_map(|members| {
                    let mut m = members.clone();
                    m.shuffle(rng);
                    let mut out = m.clone();
                    while out.len() < cfg.batch_samples {
                        out.push(m[rng.gen_range(0..m.len())]);
                    }
                    out.truncate(cfg.batch_samples);
                    out
                })
                .collect()
        })
        .collect()
}

/// Trains the embedder on `train`; returns per-epoch mean losses.
pub fn train_embedder(model: &mut FvrModel, train: &Dataset, augmentor: Option<Augmentor>, cfg: &FvrConfig) -> Result<Vec<FvrEpoch>> {
    cfg.validate()?;
    if train.is_empty() || train.classes.is_empty() {
        return Err(Error::Data("empty training set".into()));
    }
    if let Some(aug) = &augmentor {
        aug.config.validate()?;
        let (h, w) = train.image_size().expect("non-empty");
        if (aug.model.config.height, aug.model.config.width) != (h, w) {
            return Err(Error::Data(format!(
                "augmentor works on {}x{} images, dataset has {h}x{w}",
                aug.model.config.height, aug.model.config.width
            )));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut head = ParamStore::new();
    let protos = head.add(
        "head.prototypes",
        {
            let n = Normal::new(0.0f32, 1.0).expect("unit normal");
            let mut p = Array::from_fn(&[train.classes.len(), EMBED_DIM], |_| n.sample(&mut rng));
            for row in p.data_mut().chunks_mut(EMBED_DIM) {
                let norm = row.iter().map(|v| v * v).sum::<f32>().sqrt().max(1e-12);
                row.iter_mut().for_each(|v| *v /= norm);
            }
            p
        },
        true,
    );
    let mut log = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let opt = Sgd {
            lr: if epoch >= cfg.decay_epoch { cfg.lr * 0.1 } else { cfg.lr },
            momentum: cfg.momentum,
        };
        let (mut sum, mut n) = (0.0f32, 0usize);
        for batch in pk_batches(train, cfg, &mut rng) {
            let mut images = Vec::with_capacity(batch.len());
            for &i in &batch {
                let mut x = train.images[i].clone();
                if let Some(aug) = &augmentor {
                    if let Some(y) = mtaug::maybe_augment(aug.model, aug.basis, &aug.config, &x, &mut rng)? {
                        x = y;
                    }
                }
                if cfg.conventional_aug {
                    x = conventional_augment(&x, &mut rng)?;
                }
                images.push(x);
            }
            let labels: Vec<usize> = batch.iter().map(|&i| train.labels[i]).collect();
            let mut s = Session::new(&model.store, true);
            let inputs = images
                .iter()
                .map(|x| Ok(s.g.constant(crate::posedet::as_chw(x)?)))
                .collect::<Result<Vec<_>>>()?;
            let (emb, stats) = model.embedder.forward_train(&mut s, &inputs)?;
            let p = s.g.leaf(head.value(protos).clone(), true);
            let (total, _, _) = fusion_loss(&mut s.g, emb, &labels, p, cfg.scale, cfg.margin)?;
            let loss = s.g.value(total).item();
            if !loss.is_finite() {
                return Err(Error::NonFinite { op: "fusion_loss" });
            }
            s.g.backward(total)?;
            let grads = s.grads();
            let proto_grad = s.g.grad(p).expect("prototype gradient");
            drop(s);
            model.store.zero_grad();
            model.store.accumulate(&grads);
            opt.step(&mut model.store)?;
            model.embedder.update_stats(&mut model.store, &stats);
            head.zero_grad();
            head.iter_mut().next().expect("prototypes").grad.copy_from_slice(proto_grad.data());
            opt.step(&mut head)?;
            sum += loss;
            n += 1;
        }
        let e = FvrEpoch {
            epoch: epoch + 1,
            loss: sum / n.max(1) as f32,
        };
        log::info!("fvr epoch {} loss {:.5}", e.epoch, e.loss);
        log.push(e);
    }
    Ok(log)
}

fn cosine(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (*x as f64) * (*y as f64)).sum()
}

/// All same-class test pairs as genuine; cross-class pairs either all or an
/// equal-size seeded random subset as impostor.
pub fn score_pairs(model: &FvrModel, test: &Dataset, all_impostors: bool, seed: u64) -> Result<ScoreSet> {
    let emb = test.images.iter().map(|x| model.embed(x)).collect::<Result<Vec<_>>>()?;
    let mut out = ScoreSet::default();
    let mut cross = Vec::new();
    for i in 0..test.len() {
        for j in i + 1..test.len() {
            if test.labels[i] == test.labels[j] {
                out.genuine.push(cosine(&emb[i], &emb[j]));
            } else {
                cross.push((i, j));
            }
        }
    }
    if !all_impostors && cross.len() > out.genuine.len() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        cross = cross.choose_multiple(&mut rng, out.genuine.len()).copied().collect();
        cross.sort_unstable();
    }
    out.impostor = cross.iter().map(|&(i, j)| cosine(&emb[i], &emb[j])).collect();
    Ok(out)
}

pub struct FvrResult {
    pub model: FvrModel,
    pub log: Vec<FvrEpoch>,
    pub scores: ScoreSet,
    pub eer: f64,
    pub threshold: f64,
}

/// Trains on `train`, scores `test`, and reports the EER.
pub fn train_fvr(train: &Dataset, test: &Dataset, augmentor: Option<Augmentor>, cfg: &FvrConfig) -> Result<FvrResult> {
    let (h, w) = train
        .image_size()
        .ok_or_else(|| Error::Data("empty training set".into()))?;
    let mut model = FvrModel::new(h, w, cfg.seed);
    let log = train_embedder(&mut model, train, augmentor, cfg)?;
    let scores = score_pairs(&model, test, cfg.all_impostors, cfg.seed ^ 0x5eed)?;
    let (eer, threshold) = compute_eer(&scores)?;
    Ok(FvrResult {
        model,
        log,
        scores,
        eer,
        threshold,
    })
}
