//! Motion-transfer augmentation: principal intra-class keypoint motions are
//! fitted once, then random combinations of them animate training images into
//! new poses of the same identity.

use std::fmt::Write as _;

use rand::Rng;
use rand_distr::{Dirichlet, Distribution};

use crate::dataset::Dataset;
use crate::diffcore::Array;
use crate::error::{Error, Result};
use crate::model::MtModel;
use crate::posedet::{KeyPoint, KeyPointSet};

/// Retries before an out-of-frame driving pose is clamped into the image.
pub const MAX_RETRIES: usize = 5;

/// Mean keypoint delta and principal motion directions in `R^{2K}`.
#[derive(Clone, Debug, PartialEq)]
pub struct MotionBasis {
    pub mean: Vec<f64>,
    /// Orthonormal rows, ordered by decreasing variance.
    pub components: Vec<Vec<f64>>,
    pub variances: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugConfig {
    pub n: usize,
    pub scale_min: f32,
    pub scale_max: f32,
    pub probability: f32,
}

impl Default for AugConfig {
    fn default() -> Self {
        AugConfig {
            n: 10,
            scale_min: 0.5,
            scale_max: 1.5,
            probability: 0.5,
        }
    }
}

impl AugConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(Error::Config("n must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.probability) {
            return Err(Error::Config(format!("probability {} outside [0, 1]", self.probability)));
        }
        if !(self.scale_min >= 0.0 && self.scale_min <= self.scale_max && self.scale_max.is_finite()) {
            return Err(Error::Config(format!("bad scale range [{}, {}]", self.scale_min, self.scale_max)));
        }
        Ok(())
    }
}

/// `flatten(p_S - p_D)` for every consecutive pair of each class, in dataset order.
pub fn collect_deltas(dataset: &Dataset, mut detect: impl FnMut(&Array) -> Result<KeyPointSet>) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::new();
    for (c, members) in dataset.by_class().into_iter().enumerate() {
        if members.len() < 2 {
            log::warn!("class {} has {} sample(s); skipped", dataset.classes[c], members.len());
            continue;
        }
        let kps = members
            .iter()
            .map(|&i| detect(&dataset.images[i]))
            .collect::<Result<Vec<_>>>()?;
        for pair in kps.windows(2) {
            let (s, d) = (pair[0].locations(), pair[1].locations());
            out.push(s.iter().zip(&d).map(|(a, b)| (*a - *b) as f64).collect());
        }
    }
    Ok(out)
}

/// Eigen-decomposition of a symmetric `n x n` row-major matrix by cyclic
/// Jacobi rotations. Returns eigenvalues and the matching eigenvectors as rows.
pub fn symmetric_eigen(matrix: &[f64], n: usize) -> (Vec<f64>, Vec<Vec<f64>>) {
    let mut a = matrix.to_vec();
    let mut v = vec![0.0; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }
    let scale: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[i * n + j] * a[i * n + j])
            .sum::<f64>()
            .sqrt();
        if off <= 1e-15 * scale || off == 0.0 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                let theta = (a[q * n + q] - a[p * n + p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (a[k * n + p], a[k * n + q]);
                    a[k * n + p] = c * akp - s * akq;
                    a[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[p * n + k], a[q * n + k]);
                    a[p * n + k] = c * apk - s * aqk;
                    a[q * n + k] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let (vkp, vkq) = (v[k * n + p], v[k * n + q]);
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    let vals = (0..n).map(|i| a[i * n + i]).collect();
    let vecs = (0..n).map(|j| (0..n).map(|i| v[i * n + j]).collect()).collect();
    (vals, vecs)
}

/// Mean-centred PCA of the deltas keeping `min(n, dim, m - 1)` components.
pub fn fit_basis(deltas: &[Vec<f64>], n: usize) -> Result<MotionBasis> {
    let m = deltas.len();
    if m < 2 {
        return Err(Error::Data(format!("need at least 2 motion deltas, got {m}")));
    }
    let dim = deltas[0].len();
    if dim == 0 || deltas.iter().any(|d| d.len() != dim) {
        return Err(Error::shape("fit_basis", "deltas of differing or zero length"));
    }
    if deltas.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { op: "fit_basis" });
    }
    let keep = n.min(dim).min(m - 1);
    if keep < n {
        log::info!("keeping {keep} of {n} requested components");
    }
    let mut mean = vec![0.0; dim];
    for d in deltas {
        mean.iter_mut().zip(d).for_each(|(a, b)| *a += b);
    }
    mean.iter_mut().for_each(|a| *a /= m as f64);
    let mut cov = vec![0.0; dim * dim];
    for d in deltas {
        let c: Vec<f64> = d.iter().zip(&mean).map(|(a, b)| a - b).collect();
        for i in 0..dim {
            for j in 0..dim {
                cov[i * dim + j] += c[i] * c[j];
            }
        }
    }
    cov.iter_mut().for_each(|v| *v /= (m - 1) as f64);
    let (vals, vecs) = symmetric_eigen(&cov, dim);
    let mut order: Vec<usize> = (0..dim).collect();
    order.sort_by(|&a, &b| vals[b].total_cmp(&vals[a]).then(a.cmp(&b)));
    let mut components = Vec::with_capacity(keep);
    let mut variances = Vec::with_capacity(keep);
    for &i in order.iter().take(keep) {
        let mut v = vecs[i].clone();
        let big = v.iter().copied().fold(0.0f64, |best, x| if x.abs() > best.abs() { x } else { best });
        if big < 0.0 {
            v.iter_mut().for_each(|x| *x = -*x);
        }
        components.push(v);
        variances.push(vals[i].max(0.0));
    }
    Ok(MotionBasis {
        mean,
        components,
        variances,
    })
}

/// Simplex weights drawn from a flat Dirichlet distribution.
pub fn sample_weights(n: usize, rng: &mut impl Rng) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![1.0],
        _ => Dirichlet::new_with_size(1.0, n).expect("valid Dirichlet").sample(rng),
    }
}

impl MotionBasis {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn len(&self) -> usize {
        self.components.len()
    }

    pub fn is_empty(&self) -> bool {
        self.components.is_empty()
    }

    /// `scale * sum_i a_i sqrt(var_i) v_i`.
    pub fn combine(&self, weights: &[f64], scale: f64) -> Vec<f64> {
        let mut out = vec![0.0; self.dim()];
        for ((a, var), v) in weights.iter().zip(&self.variances).zip(&self.components) {
            let c = scale * a * var.sqrt();
            out.iter_mut().zip(v).for_each(|(o, x)| *o += c * x);
        }
        out
    }

    /// Random motion: Dirichlet weights combined with [`MotionBasis::combine`].
    pub fn sample_motion(&self, rng: &mut impl Rng, scale: f64) -> Vec<f64> {
        if self.variances.iter().all(|&v| v == 0.0) {
            log::warn!("degenerate motion basis: all variances are zero");
            return vec![0.0; self.dim()];
        }
        let a = sample_weights(self.len(), rng);
        self.combine(&a, scale)
    }

    /// Plain-text export: a `mean` line, then one `variance v...` line per component.
    pub fn to_text(&self) -> String {
        let mut s = String::from("mean");
        for v in &self.mean {
            write!(s, " {v:.9e}").expect("string write");
        }
        s.push('\n');
        for (var, c) in self.variances.iter().zip(&self.components) {
            write!(s, "{var:.9e}").expect("string write");
            for v in c {
                write!(s, " {v:.9e}").expect("string write");
            }
            s.push('\n');
        }
        s
    }

    /// `[mean (dim), variances (n), components (n x dim)]` as f32 tensors.
    pub fn to_tensors(&self) -> Vec<(String, Array)> {
        let f = |v: &[f64]| v.iter().map(|&x| x as f32).collect::<Vec<_>>();
        let comps: Vec<f32> = self.components.iter().flat_map(|c| f(c)).collect();
        vec![
            ("basis.mean".into(), Array::new(vec![self.dim()], f(&self.mean)).expect("shape")),
            ("basis.variances".into(), Array::new(vec![self.len()], f(&self.variances)).expect("shape")),
            ("basis.components".into(), Array::new(vec![self.len(), self.dim()], comps).expect("shape")),
        ]
    }

    pub fn from_tensors(tensors: &[Array]) -> Result<Self> {
        let bad = |d: String| Error::Checkpoint(format!("basis section: {d}"));
        let [mean, vars, comps] = tensors else {
            return Err(bad(format!("expected 3 tensors, found {}", tensors.len())));
        };
        let (dim, n) = (mean.len(), vars.len());
        if comps.shape() != [n, dim] {
            return Err(bad(format!("components {:?} for {n} x {dim}", comps.shape())));
        }
        let f = |v: &[f32]| v.iter().map(|&x| x as f64).collect::<Vec<_>>();
        Ok(MotionBasis {
            mean: f(mean.data()),
            variances: f(vars.data()),
            components: comps.data().chunks(dim.max(1)).take(n).map(f).collect(),
        })
    }
}

/// Animates `x` so that its keypoints move by `motion` (flattened `K x 2`).
/// The driving heatmaps reuse the source covariances.
pub fn augment_with_motion(model: &MtModel, x: &Array, kp_source: &KeyPointSet, motion: &[f32]) -> Result<Array> {
    let k = kp_source.len();
    if motion.len() != 2 * k {
        return Err(Error::shape("augment", format!("motion of length {} for {k} keypoints", motion.len())));
    }
    let driving = kp_source.shifted(motion);
    let dp = Array::new(vec![k, 2], motion.iter().map(|&v| 0.0 - v).collect())?;
    model.animate(x, kp_source, &driving, &dp)
}

fn inside(kp: &KeyPointSet, h: usize, w: usize) -> bool {
    kp.points
        .iter()
        .all(|p| (0.0..=(w - 1) as f32).contains(&p.p[0]) && (0.0..=(h - 1) as f32).contains(&p.p[1]))
}

/// One MT-Aug draw: detect, sample a motion at `scale`, animate. Driving
/// keypoints that leave the frame trigger up to [`MAX_RETRIES`] resamples,
/// after which they are clamped into the image.
pub fn augment(model: &MtModel, basis: &MotionBasis, x: &Array, scale: f64, rng: &mut impl Rng) -> Result<Array> {
    let kp = model.detect(x)?;
    if basis.dim() != 2 * kp.len() {
        return Err(Error::shape(
            "augment",
            format!("basis of dimension {} for {} keypoints", basis.dim(), kp.len()),
        ));
    }
    let (h, w) = (model.config.height, model.config.width);
    let mut motion: Vec<f32> = Vec::new();
    for attempt in 0..=MAX_RETRIES {
        motion = basis.sample_motion(rng, scale).into_iter().map(|v| v as f32).collect();
        if inside(&kp.shifted(&motion), h, w) {
            break;
        }
        if attempt == MAX_RETRIES {
            let clamped: Vec<KeyPoint> = kp
                .shifted(&motion)
                .points
                .into_iter()
                .map(|p| KeyPoint::new([p.p[0].clamp(0.0, (w - 1) as f32), p.p[1].clamp(0.0, (h - 1) as f32)], p.sigma))
                .collect();
            motion = clamped
                .iter()
                .zip(&kp.points)
                .flat_map(|(d, s)| [d.p[0] - s.p[0], d.p[1] - s.p[1]])
                .collect();
        }
    }
    augment_with_motion(model, x, &kp, &motion)
}

/// Applies MT-Aug with probability `cfg.probability` at a scale drawn from
/// the configured range with a random sign (principal directions have no
/// preferred orientation). Returns `None` when not applied.
pub fn maybe_augment(model: &MtModel, basis: &MotionBasis, cfg: &AugConfig, x: &Array, rng: &mut impl Rng) -> Result<Option<Array>> {
    if !(rng.gen::<f32>() < cfg.probability) {
        return Ok(None);
    }
    let mut scale = if cfg.scale_max > cfg.scale_min {
        rng.gen_range(cfg.scale_min..=cfg.scale_max) as f64
    } else {
        cfg.scale_min as f64
    };
    if rng.gen::<bool>() {
        scale = -scale;
    }
    augment(model, basis, x, scale, rng).map(Some)
}
