//! Self-supervised training of the motion-transfer model on intra-class
//! pairs: a perceptual reconstruction loss over a frozen feature pyramid plus
//! an equivariance loss on the detected keypoints.

use std::fmt;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::diffcore::nn::Conv;
use crate::diffcore::{Array, Graph, ParamStore, Session, Sgd, Var};
use crate::error::{Error, Result};
use crate::model::{self, MtModel};
use crate::posedet;

/// Output widths of the frozen pyramid levels.
pub const PYRAMID_WIDTHS: [usize; 4] = [8, 16, 32, 32];

/// Frozen, randomly initialized convolution pyramid. Level `i > 0` is
/// `relu(conv(down2(level i-1)))` except for the first, which keeps full
/// resolution; level 0 is the raw image.
#[derive(Clone, Debug)]
pub struct FeaturePyramid {
    convs: Vec<Conv>,
}

impl FeaturePyramid {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng) -> Self {
        let mut c_in = 1;
        let convs = PYRAMID_WIDTHS
            .iter()
            .enumerate()
            .map(|(i, &c)| {
                let conv = Conv::new(store, &format!("pyramid.level{}", i + 1), c_in, c, 3, 1, rng, false);
                c_in = c;
                conv
            })
            .collect();
        FeaturePyramid { convs }
    }

    /// Level 0 (the input) followed by every conv level.
    pub fn features(&self, s: &mut Session, x: Var) -> Result<Vec<Var>> {
        let mut out = vec![x];
        let mut cur = x;
        for (i, conv) in self.convs.iter().enumerate() {
            if i > 0 {
                cur = s.g.down2(cur)?;
            }
            cur = conv.forward_relu(s, cur)?;
            out.push(cur);
        }
        Ok(out)
    }
}

/// `sum_i mean |N_i(recon) - N_i(target)|` over all pyramid levels.
pub fn perceptual_loss(s: &mut Session, pyramid: &FeaturePyramid, recon: Var, target: Var) -> Result<Var> {
    if s.g.shape(recon) != s.g.shape(target) {
        return Err(Error::shape(
            "perceptual_loss",
            format!("{:?} vs {:?}", s.g.shape(recon), s.g.shape(target)),
        ));
    }
    let fr = pyramid.features(s, recon)?;
    let ft = pyramid.features(s, target)?;
    let mut total: Option<Var> = None;
    for (a, b) in fr.into_iter().zip(ft) {
        let d = s.g.sub(a, b)?;
        let d = s.g.abs(d)?;
        let m = s.g.mean(d)?;
        total = Some(match total {
            Some(t) => s.g.add(t, m)?,
            None => m,
        });
    }
    Ok(total.expect("at least one level"))
}

/// No-grad perceptual loss between two images.
pub fn perceptual_value(store: &ParamStore, pyramid: &FeaturePyramid, recon: &Array, target: &Array) -> Result<f32> {
    let mut s = Session::new(store, false);
    let a = s.g.constant(posedet::as_chw(recon)?);
    let b = s.g.constant(posedet::as_chw(target)?);
    let l = perceptual_loss(&mut s, pyramid, a, b)?;
    Ok(s.g.value(l).item())
}

/// Planar affine map `x' = m0 x + m1 y + m2`, `y' = m3 x + m4 y + m5` in pixel coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Affine {
    pub m: [f32; 6],
}

impl Affine {
    pub const IDENTITY: Affine = Affine {
        m: [1.0, 0.0, 0.0, 0.0, 1.0, 0.0],
    };

    pub fn translation(tx: f32, ty: f32) -> Self {
        Affine {
            m: [1.0, 0.0, tx, 0.0, 1.0, ty],
        }
    }

    /// Rotation by `deg` and isotropic scaling about `(cx, cy)`, then translation.
    pub fn about(cx: f32, cy: f32, deg: f32, scale: f32, tx: f32, ty: f32) -> Self {
        let (sin, cos) = deg.to_radians().sin_cos();
        let (a, b, d, e) = (scale * cos, -scale * sin, scale * sin, scale * cos);
        Affine {
            m: [a, b, cx - a * cx - b * cy + tx, d, e, cy - d * cx - e * cy + ty],
        }
    }

    pub fn det(&self) -> f32 {
        self.m[0] * self.m[4] - self.m[1] * self.m[3]
    }

    pub fn apply(&self, p: [f32; 2]) -> [f32; 2] {
        let m = &self.m;
        [m[0] * p[0] + m[1] * p[1] + m[2], m[3] * p[0] + m[4] * p[1] + m[5]]
    }

    pub fn inverse(&self) -> Result<Affine> {
        let det = self.det();
        if det.abs() <= 1e-6 {
            return Err(Error::InvalidArgument(format!("singular affine map (det {det})")));
        }
        let [a, b, c, d, e, f] = self.m;
        let (ia, ib, id, ie) = (e / det, -b / det, -d / det, a / det);
        Ok(Affine {
            m: [ia, ib, -(ia * c + ib * f), id, ie, -(id * c + ie * f)],
        })
    }

    /// Flow that warps an image by this map: `flow(y) = A^-1(y) - y`, so that
    /// `warped(A x) = image(x)`.
    pub fn warp_flow(&self, h: usize, w: usize) -> Result<Array> {
        let inv = self.inverse()?;
        let mut flow = Array::zeros(&[2, h, w]);
        let data = flow.data_mut();
        for y in 0..h {
            for x in 0..w {
                let q = inv.apply([x as f32, y as f32]);
                data[y * w + x] = q[0] - x as f32;
                data[h * w + y * w + x] = q[1] - y as f32;
            }
        }
        Ok(flow)
    }
}

/// Rotation within 15 degrees, translation within 10% of each dimension and
/// scale in `[0.9, 1.1]`, about the image centre. Near-singular draws are resampled.
pub fn random_affine(rng: &mut impl Rng, h: usize, w: usize) -> Affine {
    loop {
        let a = Affine::about(
            (w as f32 - 1.0) / 2.0,
            (h as f32 - 1.0) / 2.0,
            rng.gen_range(-15.0..=15.0),
            rng.gen_range(0.9..=1.1),
            rng.gen_range(-0.1..=0.1) * w as f32,
            rng.gen_range(-0.1..=0.1) * h as f32,
        );
        if a.det().abs() > 0.1 {
            return a;
        }
    }
}

/// `mean_k |p_k - A^-1(p_hat_k)|_1` for locations `K x 2`, where `p_hat` was
/// detected on the image transformed by `affine`.
pub fn equivariance_term(g: &mut Graph, p: Var, p_hat: Var, affine: &Affine) -> Result<Var> {
    let k = g.shape(p)[0];
    let back = g.affine_points(p_hat, affine.inverse()?.m)?;
    let d = g.sub(p, back)?;
    let d = g.abs(d)?;
    let s = g.sum(d)?;
    g.scale(s, 1.0 / k as f32)
}

/// Equivariance loss of the detector on `image` given its keypoint rows `kp` on that image.
pub fn equivariance_loss(model: &MtModel, s: &mut Session, image: Var, kp: Var, affine: &Affine) -> Result<Var> {
    let (h, w) = (model.config.height, model.config.width);
    let flow = s.g.constant(affine.warp_flow(h, w)?);
    let warped = s.g.grid_sample(image, flow)?;
    let kp_hat = model.detector.forward(s, warped)?;
    let p = model::locations(s, kp)?;
    let p_hat = model::locations(s, kp_hat)?;
    equivariance_term(&mut s.g, p, p_hat, affine)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f32,
    pub momentum: f32,
    pub decay_epoch: usize,
    pub decay_factor: f32,
    /// Weight of the equivariance term relative to the perceptual term.
    pub eq_weight: f32,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 80,
            batch_size: 32,
            lr: 0.01,
            momentum: 0.9,
            decay_epoch: 40,
            decay_factor: 0.1,
            eq_weight: 1.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || !(self.lr > 0.0) || !(self.decay_factor > 0.0) || !(self.eq_weight >= 0.0) {
            return Err(Error::Config(format!("invalid training parameters: {self:?}")));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum {} outside [0, 1)", self.momentum)));
        }
        if self.epochs > 0 && self.decay_epoch >= self.epochs {
            log::warn!("decay epoch {} is not before the last epoch {}", self.decay_epoch, self.epochs);
        }
        Ok(())
    }

    /// Learning rate used during zero-based `epoch`.
    pub fn lr_at(&self, epoch: usize) -> f32 {
        if epoch >= self.decay_epoch {
            self.lr * self.decay_factor
        } else {
            self.lr
        }
    }
}

/// Ordered intra-class pairs of a labeled dataset.
#[derive(Clone, Debug)]
pub struct PairSampler {
    pairs: Vec<(usize, usize)>,
}

impl PairSampler {
    pub fn new(labels: &[usize]) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::Data("empty dataset".into()));
        }
        let mut classes: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
        for (i, &l) in labels.iter().enumerate() {
            classes.entry(l).or_default().push(i);
        }
        let mut pairs = Vec::new();
        for members in classes.values() {
            if members.len() == 1 {
                log::warn!("class with a single sample: pairs degenerate to S = D");
                pairs.push((members[0], members[0]));
                continue;
            }
            for &s in members {
                for &d in members {
                    if s != d {
                        pairs.push((s, d));
                    }
                }
            }
        }
        Ok(PairSampler { pairs })
    }

    pub fn pairs(&self) -> &[(usize, usize)] {
        &self.pairs
    }

    /// `n` pairs from a fresh shuffle (cycling through reshuffles if `n` exceeds the pair count).
    pub fn epoch(&self, n: usize, rng: &mut impl Rng) -> Vec<(usize, usize)> {
        let mut out = Vec::with_capacity(n);
        while out.len() < n {
            let mut all = self.pairs.clone();
            all.shuffle(rng);
            out.extend(all.into_iter().take(n - out.len()));
        }
        out
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Metrics {
    pub loss_perc: f32,
    pub loss_eq: f32,
    pub total: f32,
}

/// Mean metrics of one epoch (`epoch` is one-based).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub metrics: Metrics,
}

impl fmt::Display for EpochMetrics {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let m = &self.metrics;
        write!(f, "{}\t{:.6}\t{:.6}\t{:.6}", self.epoch, m.loss_perc, m.loss_eq, m.total)
    }
}

/// Per-pair losses with gradients accumulated into the model store, scaled by `weight`.
fn pair_losses(model: &MtModel, source: &Array, driving: &Array, affine: &Affine, eq_weight: f32, weight: f32, backward: bool) -> Result<(f32, f32, crate::diffcore::Gradients)> {
    let mut s = Session::new(&model.store, backward);
    let x = s.g.constant(posedet::as_chw(source)?);
    let d = s.g.constant(posedet::as_chw(driving)?);
    let out = model.transfer_var(&mut s, x, d)?;
    let perc = perceptual_loss(&mut s, &model.pyramid, out.output, d)?;
    let eq = equivariance_loss(model, &mut s, d, out.kp_driving, affine)?;
    let (lp, le) = (s.g.value(perc).item(), s.g.value(eq).item());
    if backward {
        let weq = s.g.scale(eq, eq_weight)?;
        let total = s.g.add(perc, weq)?;
        let total = s.g.scale(total, weight)?;
        s.g.backward(total)?;
    }
    Ok((lp, le, s.grads()))
}

fn check_pair(model: &MtModel, images: &[Array], pair: (usize, usize)) -> Result<()> {
    for i in [pair.0, pair.1] {
        let img = images
            .get(i)
            .ok_or_else(|| Error::Data(format!("pair index {i} outside dataset of {}", images.len())))?;
        model.check_image(img)?;
    }
    Ok(())
}

fn non_finite(batch: &[(usize, usize)], lp: f32, le: f32) -> Error {
    let batch: Vec<usize> = batch.iter().flat_map(|&(a, b)| [a, b]).collect();
    let e = Error::NonFiniteLoss {
        batch,
        loss_perc: lp,
        loss_eq: le,
    };
    log::error!("{e}");
    e
}

/// Loss of a batch without updating anything; affines drawn from `rng` as in [`train_step`].
pub fn evaluate_batch(model: &MtModel, images: &[Array], batch: &[(usize, usize)], eq_weight: f32, rng: &mut impl Rng) -> Result<Metrics> {
    run_batch(model, images, batch, eq_weight, rng, false).map(|(m, _)| m)
}

fn run_batch(model: &MtModel, images: &[Array], batch: &[(usize, usize)], eq_weight: f32, rng: &mut impl Rng, backward: bool) -> Result<(Metrics, Vec<crate::diffcore::Gradients>)> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let (h, w) = (model.config.height, model.config.width);
    let weight = 1.0 / batch.len() as f32;
    let mut m = Metrics::default();
    let mut grads = Vec::with_capacity(batch.len());
    for &pair in batch {
        check_pair(model, images, pair)?;
        let affine = random_affine(rng, h, w);
        let (lp, le, g) = match pair_losses(model, &images[pair.0], &images[pair.1], &affine, eq_weight, weight, backward) {
            Ok(v) => v,
            Err(Error::NonFinite { .. }) => return Err(non_finite(batch, f32::NAN, f32::NAN)),
            Err(e) => return Err(e),
        };
        if !lp.is_finite() || !le.is_finite() {
            return Err(non_finite(batch, lp, le));
        }
        m.loss_perc += lp * weight;
        m.loss_eq += le * weight;
        grads.push(g);
    }
    m.total = m.loss_perc + eq_weight * m.loss_eq;
    Ok((m, grads))
}

/// One SGD step on a batch of `(source, driving)` index pairs. Returns the
/// batch-mean losses measured before the update.
pub fn train_step(
    model: &mut MtModel,
    images: &[Array],
    batch: &[(usize, usize)],
    opt: &Sgd,
    eq_weight: f32,
    rng: &mut impl Rng,
) -> Result<Metrics> {
    let (m, grads) = run_batch(model, images, batch, eq_weight, rng, true)?;
    model.store.zero_grad();
    for g in &grads {
        model.store.accumulate(g);
    }
    opt.step(&mut model.store)?;
    Ok(m)
}

/// Trains for `cfg.epochs` epochs of `images.len()` shuffled intra-class pairs
/// each, calling `on_epoch` after every epoch.
pub fn train(
    model: &mut MtModel,
    images: &[Array],
    labels: &[usize],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochMetrics),
) -> Result<Vec<EpochMetrics>> {
    cfg.validate()?;
    if images.is_empty() || images.len() != labels.len() {
        return Err(Error::Data(format!("{} images with {} labels", images.len(), labels.len())));
    }
    let sampler = PairSampler::new(labels)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut log = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let opt = Sgd {
            lr: cfg.lr_at(epoch),
            momentum: cfg.momentum,
        };
        let pairs = sampler.epoch(images.len(), &mut rng);
        let mut sum = Metrics::default();
        for batch in pairs.chunks(cfg.batch_size) {
            let m = train_step(model, images, batch, &opt, cfg.eq_weight, &mut rng)?;
            let n = batch.len() as f32;
            sum.loss_perc += m.loss_perc * n;
            sum.loss_eq += m.loss_eq * n;
            sum.total += m.total * n;
        }
        let n = pairs.len() as f32;
        let em = EpochMetrics {
            epoch: epoch + 1,
            metrics: Metrics {
                loss_perc: sum.loss_perc / n,
                loss_eq: sum.loss_eq / n,
                total: sum.total / n,
            },
        };
        log::info!("epoch {em}");
        on_epoch(&em);
        log.push(em);
    }
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn tiny_model(seed: u64) -> MtModel {
        MtModel::new(ModelConfig {
            height: 32,
            width: 48,
            keypoints: 3,
            widths: [4, 4, 8, 8],
            seed,
            ..ModelConfig::default()
        })
        .unwrap()
    }

    fn blobs(n: usize, seed: u64) -> Vec<Array> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let (cx, cy) = (rng.gen_range(15.0..33.0f32), rng.gen_range(10.0..22.0f32));
                Array::from_fn(&[1, 32, 48], |i| {
                    let (y, x) = ((i / 48) as f32, (i % 48) as f32);
                    0.2 + 0.7 * (-((x - cx).powi(2) + (y - cy).powi(2)) / 30.0).exp()
                })
            })
            .collect()
    }

    #[test]
    fn perceptual_examples() {
        let m = tiny_model(0);
        let a = blobs(1, 1).remove(0);
        assert_eq!(perceptual_value(&m.store, &m.pyramid, &a, &a).unwrap(), 0.0);
        // constant 0 vs 1: level 0 contributes exactly 1
        let z = Array::zeros(&[1, 32, 48]);
        let o = Array::full(&[1, 32, 48], 1.0);
        let total = perceptual_value(&m.store, &m.pyramid, &z, &o).unwrap();
        assert!(total >= 1.0);
        assert!(perceptual_value(&m.store, &m.pyramid, &z, &Array::zeros(&[1, 16, 48])).is_err());
    }

    #[test]
    fn perceptual_matches_per_level_oracle() {
        let m = tiny_model(2);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = Array::from_fn(&[1, 32, 48], |_| rng.gen_range(0.0..1.0));
        let b = Array::from_fn(&[1, 32, 48], |_| rng.gen_range(0.0..1.0));

        // independent recomputation with raw kernels and hand-written pooling
        let params: Vec<_> = m.store.section("pyramid");
        let pool = |x: &Array| {
            let (c, h, w) = x.dims3().unwrap();
            Array::from_fn(&[c, h / 2, w / 2], |i| {
                let (ch, r, col) = (i / (h / 2 * w / 2), (i / (w / 2)) % (h / 2), i % (w / 2));
                let at = |dy: usize, dx: usize| x.data()[ch * h * w + (2 * r + dy) * w + 2 * col + dx];
                (at(0, 0) + at(0, 1) + at(1, 0) + at(1, 1)) / 4.0
            })
        };
        let levels = |x: &Array| {
            let mut out = vec![x.clone()];
            let mut cur = x.clone();
            for l in 0..4 {
                if l > 0 {
                    cur = pool(&cur);
                }
                let (wt, bias) = (&params[2 * l].1, &params[2 * l + 1].1);
                let (co, ci) = (wt.shape()[0], wt.shape()[1]);
                let (_, h, w) = cur.dims3().unwrap();
                cur = Array::from_fn(&[co, h, w], |i| {
                    let (o, y, x) = (i / (h * w), (i / w) % h, i % w);
                    let mut acc = bias.data()[o] as f64;
                    for c in 0..ci {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let (sy, sx) = (y as isize + ky as isize - 1, x as isize + kx as isize - 1);
                                if sy >= 0 && sx >= 0 && (sy as usize) < h && (sx as usize) < w {
                                    acc += (wt.data()[((o * ci + c) * 3 + ky) * 3 + kx]
                                        * cur.data()[(c * h + sy as usize) * w + sx as usize]) as f64;
                                }
                            }
                        }
                    }
                    (acc as f32).max(0.0)
                });
                out.push(cur.clone());
            }
            out
        };
        let expect: f64 = levels(&a)
            .iter()
            .zip(levels(&b))
            .map(|(x, y)| {
                x.data().iter().zip(y.data()).map(|(p, q)| (p - q).abs() as f64).sum::<f64>() / x.len() as f64
            })
            .sum();
        let got = perceptual_value(&m.store, &m.pyramid, &a, &b).unwrap() as f64;
        assert!((got - expect).abs() <= 1e-6 * expect.max(1.0), "{got} vs {expect}");
    }

    #[test]
    fn affine_inverse_and_flow() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..50 {
            let a = random_affine(&mut rng, 64, 144);
            assert!(a.det().abs() > 0.1);
            let inv = a.inverse().unwrap();
            let p = [rng.gen_range(0.0..144.0), rng.gen_range(0.0..64.0)];
            let q = inv.apply(a.apply(p));
            assert!((q[0] - p[0]).abs() < 1e-3 && (q[1] - p[1]).abs() < 1e-3);
        }
        let f = Affine::translation(3.0, -2.0).warp_flow(4, 5).unwrap();
        assert!(f.data()[..20].iter().all(|&v| v == -3.0));
        assert!(f.data()[20..].iter().all(|&v| v == 2.0));
    }

    #[test]
    fn translated_blob_moves_with_the_map() {
        // warp(image, A) must move content at x to A x
        let img = blobs(1, 3).remove(0);
        let a = Affine::translation(4.0, 2.0);
        let warped = crate::diffcore::warp(&img, &a.warp_flow(32, 48).unwrap()).unwrap();
        assert_eq!(warped.at(0, 12, 14), img.at(0, 10, 10));
    }

    fn term(p: &[f32], p_hat: &[f32], a: &Affine) -> f32 {
        let mut g = Graph::new();
        let k = p.len() / 2;
        let pv = g.constant(Array::new(vec![k, 2], p.to_vec()).unwrap());
        let ph = g.constant(Array::new(vec![k, 2], p_hat.to_vec()).unwrap());
        let l = equivariance_term(&mut g, pv, ph, a).unwrap();
        g.value(l).item()
    }

    #[test]
    fn equivariance_examples() {
        let p = [10.0, 5.0, 30.0, 20.0];
        assert_eq!(term(&p, &p, &Affine::IDENTITY), 0.0);
        // a stub detector that transforms consistently
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = random_affine(&mut rng, 64, 144);
        let ph: Vec<f32> = p.chunks(2).flat_map(|q| a.apply([q[0], q[1]])).collect();
        assert!(term(&p, &ph, &a) < 1e-4);
        // detector output held fixed under a (5, 0) translation
        assert_eq!(term(&[10.0, 5.0], &[10.0, 5.0], &Affine::translation(5.0, 0.0)), 5.0);
    }

    #[test]
    fn equivariance_identity_with_real_detector_is_zero() {
        let m = tiny_model(4);
        let img = blobs(1, 4).remove(0);
        let mut s = Session::new(&m.store, false);
        let x = s.g.constant(img);
        let kp = m.detector.forward(&mut s, x).unwrap();
        let l = equivariance_loss(&m, &mut s, x, kp, &Affine::IDENTITY).unwrap();
        assert_eq!(s.g.value(l).item(), 0.0);
    }

    #[test]
    fn pair_sampler_stays_in_class() {
        let labels = [0, 0, 0, 1, 1, 2];
        let ps = PairSampler::new(&labels).unwrap();
        assert_eq!(ps.pairs().len(), 6 + 2 + 1);
        for &(s, d) in ps.pairs() {
            assert_eq!(labels[s], labels[d]);
            assert!(s != d || s == 5);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(ps.epoch(20, &mut rng).len(), 20);
        assert!(PairSampler::new(&[]).is_err());
    }

    #[test]
    fn lr_decays_at_configured_epoch() {
        let cfg = TrainConfig::default();
        assert_eq!(cfg.lr_at(39), 0.01);
        assert!((cfg.lr_at(40) - 0.001).abs() <= f32::EPSILON * 0.01);
        assert!((cfg.lr_at(79) - 0.1 * cfg.lr).abs() <= 1e-9);
    }

    #[test]
    fn identity_pair_reports_autoencoding_error() {
        let mut m = tiny_model(5);
        let imgs = blobs(1, 5);
        let recon = m.reconstruct(&imgs[0]).unwrap();
        let expect = perceptual_value(&m.store, &m.pyramid, &recon, &imgs[0]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let opt = Sgd { lr: 0.0, momentum: 0.9 };
        let metrics = train_step(&mut m, &imgs, &[(0, 0)], &opt, 1.0, &mut rng).unwrap();
        assert!(metrics.loss_perc.is_finite());
        assert_eq!(metrics.loss_perc, expect);
    }

    #[test]
    fn zero_lr_keeps_weights() {
        let mut m = tiny_model(6);
        let before = m.store.clone();
        let imgs = blobs(4, 6);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let opt = Sgd { lr: 0.0, momentum: 0.9 };
        train_step(&mut m, &imgs, &[(0, 1), (2, 3)], &opt, 1.0, &mut rng).unwrap();
        for (a, b) in before.iter().zip(m.store.iter()) {
            assert_eq!(a.value, b.value, "{}", a.name);
        }
        assert!(m.store.iter().filter(|p| p.trainable).any(|p| p.grad.iter().any(|&g| g != 0.0)));
    }

    #[test]
    fn small_step_descends() {
        let mut failures = 0;
        for seed in 0..3 {
            let mut m = tiny_model(10 + seed);
            let imgs = blobs(4, 20 + seed);
            let batch = [(0, 1), (1, 0), (2, 3)];
            let rng = ChaCha8Rng::seed_from_u64(seed);
            let before = evaluate_batch(&m, &imgs, &batch, 1.0, &mut rng.clone()).unwrap();
            let opt = Sgd { lr: 1e-3, momentum: 0.9 };
            train_step(&mut m, &imgs, &batch, &opt, 1.0, &mut rng.clone()).unwrap();
            let after = evaluate_batch(&m, &imgs, &batch, 1.0, &mut rng.clone()).unwrap();
            if after.total >= before.total {
                failures += 1;
            }
        }
        assert!(failures <= 1);
    }

    #[test]
    fn zero_epochs_leave_init_and_empty_log() {
        let mut m = tiny_model(7);
        let init = m.store.clone();
        let imgs = blobs(4, 7);
        let cfg = TrainConfig { epochs: 0, ..TrainConfig::default() };
        let log = train(&mut m, &imgs, &[0, 0, 1, 1], &cfg, |_| {}).unwrap();
        assert!(log.is_empty());
        for (a, b) in init.iter().zip(m.store.iter()) {
            assert_eq!(a.value, b.value);
        }
    }

    #[test]
    fn training_is_deterministic() {
        let imgs = blobs(4, 8);
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 2,
            decay_epoch: 1,
            seed: 11,
            ..TrainConfig::default()
        };
        let run = || {
            let mut m = tiny_model(8);
            train(&mut m, &imgs, &[0, 0, 1, 1], &cfg, |_| {}).unwrap()
        };
        let (a, b) = (run(), run());
        assert_eq!(a, b);
        assert_eq!(a.len(), 2);
        assert_eq!(a[0].to_string().split('\t').count(), 4);
    }

    #[test]
    fn empty_dataset_is_rejected() {
        let mut m = tiny_model(9);
        let cfg = TrainConfig { epochs: 1, ..TrainConfig::default() };
        assert!(train(&mut m, &[], &[], &cfg, |_| {}).is_err());
    }
}
