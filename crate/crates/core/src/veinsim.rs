//! Procedural finger-vein images with controlled pose and ground-truth flow.
//!
//! A finger is a horizontal cylinder whose radius tapers slightly along its
//! length. Veins are cubic Bezier curves on the cylinder surface, in
//! coordinates `(u, s)` where `u` runs along the finger and `s = R0 * theta`
//! is arc length around it. A pose rolls the cylinder about its axis, then
//! rotates and translates it in the image plane.
//!
//! Flows use the forward convention: `flow(q) = pose(q) - q` for a canonical
//! pixel `q`, so sampling the posed image at `q + flow(q)` recovers the
//! canonical image.

use std::f32::consts::FRAC_PI_2;
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::dataset::{self, Dataset};
use crate::diffcore::Array;
use crate::error::{Error, Result};

pub const MAX_ROLL: f32 = 40.0;
const BORDER: f32 = 2.0;
const BACKGROUND: f32 = 0.08;
const CURVE_SAMPLES: usize = 48;

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Pose {
    pub tx: f32,
    pub ty: f32,
    /// In-plane rotation, degrees.
    pub rot: f32,
    /// Rotation about the finger axis, degrees.
    pub roll: f32,
}

/// Symmetric half-ranges of uniformly drawn poses.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PoseRange {
    pub tx: f32,
    pub ty: f32,
    pub rot: f32,
    pub roll: f32,
}

impl Default for PoseRange {
    fn default() -> Self {
        PoseRange {
            tx: 6.0,
            ty: 2.0,
            rot: 2.0,
            roll: 15.0,
        }
    }
}

impl PoseRange {
    pub fn sample(&self, rng: &mut impl Rng) -> Pose {
        let mut u = |r: f32| if r > 0.0 { rng.gen_range(-r..=r) } else { 0.0 };
        Pose {
            tx: u(self.tx),
            ty: u(self.ty),
            rot: u(self.rot),
            roll: u(self.roll),
        }
    }
}

#[derive(Clone, Debug)]
struct Vein {
    /// Polyline samples `(u, s)` of the curve.
    points: Vec<[f32; 2]>,
    sigma: f32,
    depth: f32,
    bbox: [f32; 4],
}

impl Vein {
    fn darkness(&self, u: f32, s: f32) -> f32 {
        let m = 4.0 * self.sigma;
        if u < self.bbox[0] - m || u > self.bbox[1] + m || s < self.bbox[2] - m || s > self.bbox[3] + m {
            return 0.0;
        }
        let mut best = f32::INFINITY;
        for seg in self.points.windows(2) {
            let (a, b) = (seg[0], seg[1]);
            let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
            let len2 = dx * dx + dy * dy;
            let t = if len2 > 0.0 {
                (((u - a[0]) * dx + (s - a[1]) * dy) / len2).clamp(0.0, 1.0)
            } else {
                0.0
            };
            let (px, py) = (a[0] + t * dx - u, a[1] + t * dy - s);
            best = best.min(px * px + py * py);
        }
        self.depth * (-best / (2.0 * self.sigma * self.sigma)).exp()
    }
}

/// One synthetic identity.
#[derive(Clone, Debug)]
pub struct VeinTemplate {
    pub seed: u64,
    height: usize,
    width: usize,
    radius: f32,
    taper: f32,
    veins: Vec<Vein>,
}

fn bezier(p: &[[f32; 2]; 4], t: f32) -> [f32; 2] {
    let m = 1.0 - t;
    let w = [m * m * m, 3.0 * m * m * t, 3.0 * m * t * t, t * t * t];
    let mut out = [0.0; 2];
    for (wi, pi) in w.iter().zip(p) {
        out[0] += wi * pi[0];
        out[1] += wi * pi[1];
    }
    out
}

impl VeinTemplate {
    pub fn new(seed: u64, height: usize, width: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (h, w) = (height as f32, width as f32);
        let radius = h * rng.gen_range(0.27..0.30);
        let taper = rng.gen_range(0.0..0.06);
        let s_max = 0.8 * FRAC_PI_2 * radius;
        let n = rng.gen_range(3..=7);
        let veins = (0..n)
            .map(|_| {
                let u0 = rng.gen_range(-0.1 * w..0.5 * w);
                let u3 = u0 + rng.gen_range(0.5 * w..1.1 * w);
                let s0 = rng.gen_range(-0.7..0.7) * s_max;
                let s3 = (s0 + rng.gen_range(-0.6..0.6) * s_max).clamp(-s_max, s_max);
                let mut ctrl = [[u0, s0], [0.0; 2], [0.0; 2], [u3, s3]];
                for (i, c) in ctrl.iter_mut().enumerate().skip(1).take(2) {
                    let t = i as f32 / 3.0;
                    let u = u0 + t * (u3 - u0) + rng.gen_range(-0.1..0.1) * w;
                    let s = s0 + t * (s3 - s0) + rng.gen_range(-0.35..0.35) * s_max;
                    *c = [u, s.clamp(-s_max, s_max)];
                }
                let points: Vec<[f32; 2]> = (0..=CURVE_SAMPLES)
                    .map(|i| bezier(&ctrl, i as f32 / CURVE_SAMPLES as f32))
                    .collect();
                let bbox = points.iter().fold(
                    [f32::INFINITY, f32::NEG_INFINITY, f32::INFINITY, f32::NEG_INFINITY],
                    |b, p| [b[0].min(p[0]), b[1].max(p[0]), b[2].min(p[1]), b[3].max(p[1])],
                );
                let width_px: f32 = rng.gen_range(1.5..4.0);
                Vein {
                    points,
                    sigma: width_px / 2.3548,
                    depth: rng.gen_range(0.25..0.5),
                    bbox,
                }
            })
            .collect();
        VeinTemplate {
            seed,
            height,
            width,
            radius,
            taper,
            veins,
        }
    }

    fn centre(&self) -> (f32, f32) {
        ((self.width as f32 - 1.0) / 2.0, (self.height as f32 - 1.0) / 2.0)
    }

    /// Finger radius at longitudinal position `u`.
    fn radius_at(&self, u: f32) -> f32 {
        let cx = self.centre().0;
        self.radius * (1.0 - self.taper * (u - cx) / self.width as f32)
    }

    fn rigid(&self, pose: &Pose, p: [f32; 2]) -> [f32; 2] {
        let (cx, cy) = self.centre();
        let (sin, cos) = pose.rot.to_radians().sin_cos();
        let (dx, dy) = (p[0] - cx, p[1] - cy);
        [cx + cos * dx - sin * dy + pose.tx, cy + sin * dx + cos * dy + pose.ty]
    }

    fn rigid_inverse(&self, pose: &Pose, p: [f32; 2]) -> [f32; 2] {
        let (cx, cy) = self.centre();
        let (sin, cos) = pose.rot.to_radians().sin_cos();
        let (dx, dy) = (p[0] - pose.tx - cx, p[1] - pose.ty - cy);
        [cx + cos * dx + sin * dy, cy - sin * dx + cos * dy]
    }

    pub fn validate(&self, pose: &Pose) -> Result<()> {
        let finite = [pose.tx, pose.ty, pose.rot, pose.roll].iter().all(|v| v.is_finite());
        if !finite || pose.roll.abs() > MAX_ROLL {
            return Err(Error::InvalidArgument(format!("pose {pose:?} out of bounds (|roll| <= {MAX_ROLL})")));
        }
        let (h, w) = (self.height as f32, self.width as f32);
        let (_, cy) = self.centre();
        let steps = 4 * self.width;
        for i in 0..=steps {
            let u = -w + 3.0 * w * i as f32 / steps as f32;
            let r = self.radius_at(u);
            for edge in [cy - r, cy + r] {
                let q = self.rigid(pose, [u, edge]);
                if (0.0..=w - 1.0).contains(&q[0]) && !(BORDER..=h - 1.0 - BORDER).contains(&q[1]) {
                    return Err(Error::InvalidArgument(format!(
                        "pose {pose:?} moves the finger within {BORDER} px of the border"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Noise-free intensity of posed pixel `(x, y)`.
    fn intensity(&self, pose: &Pose, x: f32, y: f32) -> f32 {
        let (cx, cy) = self.centre();
        let q = self.rigid_inverse(pose, [x, y]);
        let r = self.radius_at(q[0]);
        let v = (q[1] - cy) / r;
        // soft silhouette edge about one pixel wide
        let inside = ((1.0 - v.abs()) * r + 0.5).clamp(0.0, 1.0);
        if inside == 0.0 {
            return BACKGROUND;
        }
        let vc = v.clamp(-1.0, 1.0);
        let shade = 0.3 + 0.5 * (1.0 - vc * vc).sqrt();
        let falloff = 1.0 - 0.25 * ((q[0] - cx) / (self.width as f32 / 2.0)).powi(2);
        let theta = vc.asin() - pose.roll.to_radians();
        let s = self.radius * theta;
        let dark = self.veins.iter().map(|vn| vn.darkness(q[0], s)).fold(0.0, f32::max);
        let body = shade * falloff * (1.0 - dark);
        BACKGROUND + inside * (body - BACKGROUND)
    }

    /// Ground-truth forward flow of `pose` relative to the canonical pose.
    pub fn flow(&self, pose: &Pose) -> Array {
        let (h, w) = (self.height, self.width);
        let (_, cy) = self.centre();
        let roll = pose.roll.to_radians();
        let mut flow = Array::zeros(&[2, h, w]);
        let data = flow.data_mut();
        for y in 0..h {
            for x in 0..w {
                let (xf, yf) = (x as f32, y as f32);
                let r = self.radius_at(xf);
                let v = (yf - cy) / r;
                let yr = if v.abs() <= 1.0 {
                    let t = (v.asin() + roll).clamp(-FRAC_PI_2, FRAC_PI_2);
                    cy + r * t.sin()
                } else {
                    yf
                };
                let p = self.rigid(pose, [xf, yr]);
                data[y * w + x] = p[0] - xf;
                data[h * w + y * w + x] = p[1] - yf;
            }
        }
        flow
    }

    /// Noise-free render `1 x h x w`.
    pub fn render_clean(&self, pose: &Pose) -> Result<Array> {
        self.validate(pose)?;
        let (h, w) = (self.height, self.width);
        Ok(Array::from_fn(&[1, h, w], |i| self.intensity(pose, (i % w) as f32, (i / w) as f32)))
    }

    /// Render with additive Gaussian sensor noise, plus the ground-truth flow.
    pub fn render(&self, pose: &Pose, noise: f32, rng: &mut impl Rng) -> Result<(Array, Array)> {
        let mut img = self.render_clean(pose)?;
        if noise > 0.0 {
            let n = Normal::new(0.0, noise).map_err(|e| Error::InvalidArgument(e.to_string()))?;
            img.data_mut().iter_mut().for_each(|v| *v = (*v + n.sample(rng)).clamp(0.0, 1.0));
        }
        Ok((img, self.flow(pose)))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub classes: usize,
    pub samples: usize,
    pub height: usize,
    pub width: usize,
    pub ranges: PoseRange,
    pub noise: f32,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            classes: 20,
            samples: 10,
            height: 64,
            width: 144,
            ranges: PoseRange::default(),
            noise: 0.01,
            seed: 7,
        }
    }
}

/// A generated dataset with the pose and ground-truth flow of every image.
#[derive(Clone, Debug)]
pub struct SynthData {
    pub dataset: Dataset,
    pub poses: Vec<Pose>,
    pub flows: Vec<Array>,
}

fn stream(seed: u64, class: usize, sample: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((class as u64) << 32) | (sample as u64 + 1));
    rng
}

/// Seed of the template of class `class`.
pub fn class_seed(seed: u64, class: usize) -> u64 {
    stream(seed, class, usize::MAX >> 32).gen()
}

pub fn generate(cfg: &SynthConfig) -> Result<SynthData> {
    generate_with(cfg, |_, _, rng| cfg.ranges.sample(rng))
}

/// Like [`generate`], with poses chosen by `pose_of(class, sample, rng)`.
pub fn generate_with(cfg: &SynthConfig, mut pose_of: impl FnMut(usize, usize, &mut ChaCha8Rng) -> Pose) -> Result<SynthData> {
    if cfg.classes < 2 || cfg.samples < 2 {
        return Err(Error::InvalidArgument(format!(
            "need at least 2 classes with 2 samples each, got {} x {}",
            cfg.classes, cfg.samples
        )));
    }
    let mut out = SynthData {
        dataset: Dataset::default(),
        poses: Vec::new(),
        flows: Vec::new(),
    };
    for c in 0..cfg.classes {
        let tpl = VeinTemplate::new(class_seed(cfg.seed, c), cfg.height, cfg.width);
        out.dataset.classes.push(format!("{c:03}"));
        for s in 0..cfg.samples {
            let mut rng = stream(cfg.seed, c, s);
            let mut pose = pose_of(c, s, &mut rng);
            // shrink poses that would push the finger out of the frame
            let mut tries = 0;
            while tpl.validate(&pose).is_err() && tries < 20 {
                pose = Pose {
                    tx: pose.tx * 0.8,
                    ty: pose.ty * 0.8,
                    rot: pose.rot * 0.8,
                    roll: pose.roll.clamp(-MAX_ROLL, MAX_ROLL),
                };
                tries += 1;
            }
            let (img, flow) = tpl.render(&pose, cfg.noise, &mut rng)?;
            out.dataset.push(img, c, format!("{c:03}/{s:02}"));
            out.poses.push(pose);
            out.flows.push(flow);
        }
    }
    Ok(out)
}

/// Writes a 2-channel flow in the Middlebury `.flo` layout.
pub fn write_flo(path: &Path, flow: &Array) -> Result<()> {
    let (c, h, w) = flow.dims3()?;
    if c != 2 {
        return Err(Error::shape("write_flo", format!("expected 2 channels, got {c}")));
    }
    let mut buf = Vec::with_capacity(12 + 8 * h * w);
    buf.extend_from_slice(b"PIEH");
    buf.extend_from_slice(&(w as i32).to_le_bytes());
    buf.extend_from_slice(&(h as i32).to_le_bytes());
    let d = flow.data();
    for i in 0..h * w {
        buf.extend_from_slice(&d[i].to_le_bytes());
        buf.extend_from_slice(&d[h * w + i].to_le_bytes());
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn read_flo(path: &Path) -> Result<Array> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = || Error::Data(format!("{}: malformed flow file", path.display()));
    if bytes.len() < 12 || &bytes[..4] != b"PIEH" {
        return Err(bad());
    }
    let dim = |o: usize| i32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes"));
    let (w, h) = (dim(4), dim(8));
    if w <= 0 || h <= 0 || bytes.len() != 12 + 8 * (w as usize) * (h as usize) {
        return Err(bad());
    }
    let (w, h) = (w as usize, h as usize);
    let vals: Vec<f32> = bytes[12..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    let mut out = Array::zeros(&[2, h, w]);
    for i in 0..h * w {
        out.data_mut()[i] = vals[2 * i];
        out.data_mut()[h * w + i] = vals[2 * i + 1];
    }
    Ok(out)
}

/// Writes `<root>/<class>/<sample>.png` plus `.flo` flows and `manifest.txt`.
pub fn write_dataset(root: &Path, data: &SynthData, overwrite: bool) -> Result<()> {
    if root.exists() {
        let non_empty = fs::read_dir(root).map_err(|e| Error::io(root, e))?.next().is_some();
        if non_empty && !overwrite {
            return Err(Error::InvalidArgument(format!(
                "{} exists and is not empty (use --overwrite)",
                root.display()
            )));
        }
        if non_empty {
            fs::remove_dir_all(root).map_err(|e| Error::io(root, e))?;
        }
    }
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    let mut manifest = Vec::new();
    for (i, name) in data.dataset.names.iter().enumerate() {
        let (class, sample) = name.split_once('/').expect("class/sample name");
        let dir = root.join(class);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        dataset::save_image(&dir.join(format!("{sample}.png")), &data.dataset.images[i])?;
        write_flo(&dir.join(format!("{sample}.flo")), &data.flows[i])?;
        let p = data.poses[i];
        writeln!(manifest, "{class} {sample} {:.4} {:.4} {:.4} {:.4}", p.tx, p.ty, p.rot, p.roll).expect("in-memory write");
    }
    let path = root.join("manifest.txt");
    fs::write(&path, manifest).map_err(|e| Error::io(&path, e))
}
