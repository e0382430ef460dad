//! The complete motion-transfer model: keypoint detector, dense motion
//! network, generator and the frozen feature pyramid used by the training loss.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::densemotion::{DenseMotion, MotionOutput};
use crate::diffcore::{Array, ParamStore, Session, Var};
use crate::error::{Error, Result};
use crate::imggen::{self, Generator};
use crate::mttrain::FeaturePyramid;
use crate::posedet::{self, Detector, KeyPointSet};

/// Checkpoint section names; each is also the parameter-name prefix.
pub const SECTIONS: [&str; 4] = ["detector", "densemotion", "generator", "pyramid"];

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub height: usize,
    pub width: usize,
    pub keypoints: usize,
    /// Resolution reduction of the detector and dense motion inputs (power of two).
    pub downscale: usize,
    /// Stem and down-block widths of the U-shaped networks.
    pub widths: [usize; 4],
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            height: 64,
            width: 144,
            keypoints: 5,
            downscale: 2,
            widths: [8, 16, 32, 64],
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = self.downscale * (1 << imggen::LEVELS);
        if self.keypoints == 0 {
            return Err(Error::Config("keypoints must be positive".into()));
        }
        if !self.downscale.is_power_of_two() {
            return Err(Error::Config(format!("downscale {} is not a power of two", self.downscale)));
        }
        if self.height == 0 || self.width == 0 || self.height % unit != 0 || self.width % unit != 0 {
            return Err(Error::Config(format!(
                "image size {}x{} must be a positive multiple of {unit}",
                self.height, self.width
            )));
        }
        if self.widths.contains(&0) {
            return Err(Error::Config("network widths must be positive".into()));
        }
        Ok(())
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.height / self.downscale, self.width / self.downscale)
    }
}

/// Graph handles produced by one source/driving transfer.
#[derive(Clone, Copy, Debug)]
pub struct TransferOutput {
    pub output: Var,
    pub kp_source: Var,
    pub kp_driving: Var,
    pub motion: MotionOutput,
}

#[derive(Clone, Debug)]
pub struct MtModel {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub detector: Detector,
    pub motion: DenseMotion,
    pub generator: Generator,
    pub pyramid: FeaturePyramid,
}

impl MtModel {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let k = config.keypoints;
        let detector = Detector::new(&mut store, k, config.downscale, config.widths, &mut rng);
        let motion = DenseMotion::new(&mut store, k, config.downscale, config.widths, &mut rng);
        let generator = Generator::new(&mut store, config.widths[0], &mut rng);
        let pyramid = FeaturePyramid::new(&mut store, &mut rng);
        Ok(MtModel {
            config,
            store,
            detector,
            motion,
            generator,
            pyramid,
        })
    }

    /// Trainable parameters of detector, dense motion network and generator.
    pub fn param_count(&self) -> usize {
        self.store.count("", true)
    }

    pub fn check_image(&self, image: &Array) -> Result<()> {
        let (c, h, w) = image.dims3()?;
        if c != 1 || h != self.config.height || w != self.config.width {
            return Err(Error::shape(
                "model input",
                format!("expected 1x{}x{}, got {:?}", self.config.height, self.config.width, image.shape()),
            ));
        }
        Ok(())
    }

    /// Animates `source` from keypoints `kp_source` towards `kp_driving`
    /// (both `K x 5`), with `dp = p_S - p_D` supplied as `K x 2`.
    pub fn animate_var(&self, s: &mut Session, source: Var, kp_source: Var, kp_driving: Var, dp: Var) -> Result<(Var, MotionOutput)> {
        let (h, w) = (self.config.height, self.config.width);
        let hs = self.detector.heatmaps(&mut s.g, kp_source, h, w)?;
        let hd = self.detector.heatmaps(&mut s.g, kp_driving, h, w)?;
        let dh = s.g.sub(hs, hd)?;
        let small = posedet::downscale(&mut s.g, source, self.config.downscale)?;
        let motion = self.motion.forward(s, small, dp, dh)?;
        let out = self.generator.forward(s, source, motion.flow, motion.inpaint)?;
        Ok((out, motion))
    }

    /// Full differentiable transfer of `source` into the pose of `driving`.
    pub fn transfer_var(&self, s: &mut Session, source: Var, driving: Var) -> Result<TransferOutput> {
        let kp_source = self.detector.forward(s, source)?;
        let kp_driving = self.detector.forward(s, driving)?;
        let ps = locations(s, kp_source)?;
        let pd = locations(s, kp_driving)?;
        let dp = s.g.sub(ps, pd)?;
        let (output, motion) = self.animate_var(s, source, kp_source, kp_driving, dp)?;
        Ok(TransferOutput {
            output,
            kp_source,
            kp_driving,
            motion,
        })
    }

    pub fn transfer(&self, source: &Array, driving: &Array) -> Result<Array> {
        self.check_image(source)?;
        self.check_image(driving)?;
        let mut s = Session::new(&self.store, false);
        let x = s.g.constant(posedet::as_chw(source)?);
        let d = s.g.constant(posedet::as_chw(driving)?);
        let out = self.transfer_var(&mut s, x, d)?;
        Ok(s.g.value(out.output).clone())
    }

    /// Identity reconstruction: the image driven by itself.
    pub fn reconstruct(&self, image: &Array) -> Result<Array> {
        self.transfer(image, image)
    }

    /// No-grad animation with explicit keypoints and displacement.
    pub fn animate(&self, source: &Array, kp_source: &KeyPointSet, kp_driving: &KeyPointSet, dp: &Array) -> Result<Array> {
        self.check_image(source)?;
        let mut s = Session::new(&self.store, false);
        let x = s.g.constant(posedet::as_chw(source)?);
        let ks = s.g.constant(kp_source.to_rows());
        let kd = s.g.constant(kp_driving.to_rows());
        let d = s.g.constant(dp.clone());
        let (out, _) = self.animate_var(&mut s, x, ks, kd, d)?;
        Ok(s.g.value(out).clone())
    }

    pub fn detect(&self, image: &Array) -> Result<KeyPointSet> {
        self.check_image(image)?;
        self.detector.detect(&self.store, image)
    }
}

/// Keypoint locations `K x 2` out of `K x 5` rows.
pub fn locations(s: &mut Session, rows: Var) -> Result<Var> {
    let k = s.g.shape(rows)[0];
    let t = s.g.transpose(rows)?;
    let p = s.g.narrow(t, 0, &[2, k])?;
    s.g.transpose(p)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn small() -> MtModel {
        MtModel::new(ModelConfig {
            height: 32,
            width: 48,
            widths: [4, 4, 8, 8],
            seed: 3,
            ..ModelConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn default_model_is_compact() {
        let m = MtModel::new(ModelConfig::default()).unwrap();
        let n = m.param_count();
        assert!(n <= 400_000, "{n}");
        assert!(n > 100_000, "{n}");
        // frozen pyramid is not counted
        assert!(m.store.count("pyramid", false) > 0);
        assert_eq!(m.store.count("pyramid", true), 0);
    }

    #[test]
    fn rejects_bad_configs() {
        for cfg in [
            ModelConfig { height: 60, ..ModelConfig::default() },
            ModelConfig { downscale: 3, ..ModelConfig::default() },
            ModelConfig { keypoints: 0, ..ModelConfig::default() },
        ] {
            assert!(matches!(MtModel::new(cfg), Err(Error::Config(_))));
        }
    }

    #[test]
    fn same_seed_same_weights() {
        let a = small();
        let b = small();
        for (pa, pb) in a.store.iter().zip(b.store.iter()) {
            assert_eq!(pa.value, pb.value);
        }
    }

    #[test]
    fn reconstruct_matches_zero_displacement_animation() {
        let m = small();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Array::from_fn(&[1, 32, 48], |_| rng.gen_range(0.0..1.0));
        let kp = m.detect(&x).unwrap();
        let a = m.animate(&x, &kp, &kp, &Array::zeros(&[5, 2])).unwrap();
        let r = m.reconstruct(&x).unwrap();
        assert_eq!(a, r);
        assert_eq!(r.shape(), &[1, 32, 48]);
        assert!(r.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn wrong_image_size_is_rejected() {
        let m = small();
        assert!(m.reconstruct(&Array::zeros(&[1, 64, 144])).is_err());
    }
}
