//! Keypoint and pose detection.
//!
//! A U-shaped network maps the (optionally downscaled) image to `K` raw
//! activation maps. Each map is squashed with a sigmoid, normalized to a
//! spatial distribution, and reduced to its mean (the keypoint) and its
//! covariance (orientation and extent). Gaussian heatmaps built from those
//! moments describe the finger pose densely.

use rand::Rng;

use crate::diffcore::nn::UNet;
use crate::diffcore::{Array, CoordMap, Graph, ParamStore, Session, Var};
use crate::error::{Error, Result};

/// Added to the covariance diagonal so point-mass activations stay invertible.
pub const EPS_REG: f32 = 1e-2;
const HEAD_BIAS: f32 = -4.0;

/// Keypoint location in continuous pixel coordinates (origin at the centre of
/// the top-left pixel, x right, y down) with its covariance in px².
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KeyPoint {
    pub p: [f32; 2],
    pub sigma: [[f32; 2]; 2],
}

impl KeyPoint {
    pub fn new(p: [f32; 2], sigma: [[f32; 2]; 2]) -> Self {
        KeyPoint { p, sigma }
    }

    fn row(&self) -> [f32; 5] {
        [self.p[0], self.p[1], self.sigma[0][0], self.sigma[0][1], self.sigma[1][1]]
    }

    /// Eigenvalues of the covariance, ascending.
    pub fn sigma_eigenvalues(&self) -> [f32; 2] {
        let (a, b, d) = (
            self.sigma[0][0] as f64,
            self.sigma[0][1] as f64,
            self.sigma[1][1] as f64,
        );
        let tr = 0.5 * (a + d);
        let disc = (0.25 * (a - d) * (a - d) + b * b).sqrt();
        [(tr - disc) as f32, (tr + disc) as f32]
    }
}

/// Ordered keypoints of one image; channel `k` of the detector is keypoint `k`.
#[derive(Clone, Debug, PartialEq)]
pub struct KeyPointSet {
    pub points: Vec<KeyPoint>,
}

impl KeyPointSet {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// `K x 5` rows `[px, py, sxx, sxy, syy]`.
    pub fn to_rows(&self) -> Array {
        let data = self.points.iter().flat_map(|k| k.row()).collect();
        Array::new(vec![self.points.len(), 5], data).expect("rows")
    }

    pub fn from_rows(rows: &Array) -> Result<Self> {
        match rows.shape() {
            &[_, 5] => {}
            s => return Err(Error::shape("KeyPointSet::from_rows", format!("expected k x 5, got {s:?}"))),
        }
        let points = rows
            .data()
            .chunks(5)
            .map(|r| KeyPoint::new([r[0], r[1]], [[r[2], r[3]], [r[3], r[4]]]))
            .collect();
        Ok(KeyPointSet { points })
    }

    /// Locations flattened as `[x0, y0, x1, y1, ...]`.
    pub fn locations(&self) -> Vec<f32> {
        self.points.iter().flat_map(|k| k.p).collect()
    }

    /// Same covariances, locations shifted by the flat `[dx0, dy0, ...]` offsets.
    pub fn shifted(&self, offsets: &[f32]) -> KeyPointSet {
        let points = self
            .points
            .iter()
            .zip(offsets.chunks(2))
            .map(|(k, d)| KeyPoint::new([k.p[0] + d[0], k.p[1] + d[1]], k.sigma))
            .collect();
        KeyPointSet { points }
    }
}

/// Gaussian heatmap `exp(-0.5 (x - p)^T S^-1 (x - p))` of one keypoint on an `h x w` pixel grid.
pub fn heatmap(kp: &KeyPoint, h: usize, w: usize) -> Result<Array> {
    let mut g = Graph::new();
    let rows = g.constant(Array::new(vec![1, 5], kp.row().to_vec())?);
    let hm = g.heatmaps(rows, h, w, CoordMap::IDENTITY)?;
    Ok(g.value(hm).clone().reshape(&[h, w])?)
}

/// Soft-argmax keypoints from raw activations `K x h x w`: sigmoid, per-channel
/// normalization, first and second moments. Returns `K x 5` rows.
pub fn keypoints_from_activation(g: &mut Graph, raw: Var, map: CoordMap) -> Result<Var> {
    let act = g.sigmoid(raw)?;
    g.spatial_moments(act, map, EPS_REG)
}

#[derive(Clone, Debug)]
pub struct Detector {
    net: UNet,
    keypoints: usize,
    downscale: usize,
}

impl Detector {
    pub fn new(store: &mut ParamStore, keypoints: usize, downscale: usize, widths: [usize; 4], rng: &mut impl Rng) -> Self {
        let net = UNet::new(store, "detector", 1, keypoints, widths, rng);
        // Sparse initial activations so the normalized map starts peaked rather than flat.
        store.value_mut(net.head_bias()).data_mut().fill(HEAD_BIAS);
        Detector {
            net,
            keypoints,
            downscale,
        }
    }

    pub fn keypoints(&self) -> usize {
        self.keypoints
    }

    /// Coordinates of the grid the detector and heatmaps live on.
    pub fn grid_map(&self) -> CoordMap {
        CoordMap::downsampled(self.downscale)
    }

    /// Keypoint rows `K x 5` (full-resolution pixel units) for an image that has
    /// already been reduced to the detector grid.
    pub fn forward_small(&self, s: &mut Session, small: Var) -> Result<Var> {
        let raw = self.net.forward(s, small)?;
        keypoints_from_activation(&mut s.g, raw, self.grid_map())
    }

    pub fn forward(&self, s: &mut Session, image: Var) -> Result<Var> {
        let small = downscale(&mut s.g, image, self.downscale)?;
        self.forward_small(s, small)
    }

    /// Heatmaps on the detector grid for keypoint rows `K x 5`.
    pub fn heatmaps(&self, g: &mut Graph, kp: Var, full_h: usize, full_w: usize) -> Result<Var> {
        g.heatmaps(kp, full_h / self.downscale, full_w / self.downscale, self.grid_map())
    }

    pub fn detect(&self, store: &ParamStore, image: &Array) -> Result<KeyPointSet> {
        let mut s = Session::new(store, false);
        let x = s.g.constant(as_chw(image)?);
        let kp = self.forward(&mut s, x)?;
        KeyPointSet::from_rows(s.g.value(kp))
    }
}

/// Average-pools by a power-of-two `factor`.
pub fn downscale(g: &mut Graph, x: Var, factor: usize) -> Result<Var> {
    if !factor.is_power_of_two() {
        return Err(Error::InvalidArgument(format!("downscale factor {factor} must be a power of two")));
    }
    let mut cur = x;
    let mut f = factor;
    while f > 1 {
        cur = g.down2(cur)?;
        f /= 2;
    }
    Ok(cur)
}

/// Views an `h x w` or `1 x h x w` image as `1 x h x w`.
pub fn as_chw(image: &Array) -> Result<Array> {
    let (c, h, w) = image.dims3()?;
    if c != 1 {
        return Err(Error::shape("image", format!("expected one channel, got {c}")));
    }
    image.clone().reshape(&[1, h, w])
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn moments(act: Array, map: CoordMap) -> KeyPointSet {
        let mut g = Graph::new();
        let a = g.constant(act);
        let m = g.spatial_moments(a, map, EPS_REG).unwrap();
        KeyPointSet::from_rows(g.value(m)).unwrap()
    }

    #[test]
    fn point_mass_activation() {
        let mut act = Array::zeros(&[1, 64, 144]);
        act.data_mut()[10 * 144 + 20] = 1.0;
        let kp = moments(act, CoordMap::IDENTITY).points[0];
        assert_eq!(kp.p, [20.0, 10.0]);
        assert_eq!(kp.sigma, [[EPS_REG, 0.0], [0.0, EPS_REG]]);
    }

    #[test]
    fn uniform_activation_gives_centroid() {
        let kp = moments(Array::full(&[1, 64, 144], 0.7), CoordMap::IDENTITY).points[0];
        assert!((kp.p[0] - 71.5).abs() < 1e-4);
        assert!((kp.p[1] - 31.5).abs() < 1e-4);
        // the same holds on the downscaled grid mapped back to pixels
        let kp = moments(Array::full(&[1, 32, 72], 0.7), CoordMap::downsampled(2)).points[0];
        assert!((kp.p[0] - 71.5).abs() < 1e-4);
        assert!((kp.p[1] - 31.5).abs() < 1e-4);
    }

    #[test]
    fn gaussian_activation_moments() {
        let act = Array::from_fn(&[1, 64, 144], |i| {
            let (y, x) = ((i / 144) as f32, (i % 144) as f32);
            (-(x - 72.0).powi(2) / (2.0 * 16.0) - (y - 32.0).powi(2) / (2.0 * 4.0)).exp()
        });
        let kp = moments(act, CoordMap::IDENTITY).points[0];
        assert!((kp.sigma[0][0] - 16.0).abs() <= 0.05 * 16.0, "{:?}", kp.sigma);
        assert!((kp.sigma[1][1] - 4.0).abs() <= 0.05 * 4.0, "{:?}", kp.sigma);
        assert!(kp.sigma[0][1].abs() < 1e-3);
        assert!((kp.p[0] - 72.0).abs() < 1e-3 && (kp.p[1] - 32.0).abs() < 1e-3);
    }

    #[test]
    fn heatmap_examples() {
        let kp = KeyPoint::new([5.0, 4.0], [[4.0, 0.0], [0.0, 4.0]]);
        let h = heatmap(&kp, 9, 11).unwrap();
        assert_eq!(h.at(0, 4, 5), 1.0);
        assert!((h.at(0, 4, 7) - (-0.5f32).exp()).abs() < 1e-6);
        assert!((h.at(0, 4, 8) - h.at(0, 7, 5)).abs() < 1e-6);
    }

    #[test]
    fn heatmap_peak_dominates_far_pixels() {
        let kp = KeyPoint::new([20.3, 10.6], [[9.0, 2.0], [2.0, 4.0]]);
        let h = heatmap(&kp, 24, 40).unwrap();
        let peak = h.at(0, 11, 20);
        let sd = kp.sigma_eigenvalues()[1].sqrt();
        for y in 0..24 {
            for x in 0..40 {
                let d = ((x as f32 - kp.p[0]).powi(2) + (y as f32 - kp.p[1]).powi(2)).sqrt();
                if d > 3.0 * sd {
                    assert!(peak >= h.at(0, y, x));
                }
                assert!(h.at(0, y, x) <= 1.0 && h.at(0, y, x) > 0.0);
            }
        }
    }

    #[test]
    fn heatmap_rejects_singular_covariance() {
        let kp = KeyPoint::new([1.0, 1.0], [[1.0, 1.0], [1.0, 1.0]]);
        assert!(heatmap(&kp, 4, 4).is_err());
    }

    #[test]
    fn detector_outputs_regularized_keypoints_inside_image() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::new();
        let det = Detector::new(&mut store, 5, 2, [4, 8, 8, 8], &mut rng);
        let img = Array::from_fn(&[1, 64, 144], |_| rng.gen_range(0.0..1.0));
        let kps = det.detect(&store, &img).unwrap();
        assert_eq!(kps.len(), 5);
        for kp in &kps.points {
            assert!(kp.p[0] >= 0.0 && kp.p[0] <= 143.0 && kp.p[1] >= 0.0 && kp.p[1] <= 63.0);
            assert!(kp.sigma_eigenvalues()[0] >= EPS_REG * (1.0 - 1e-4));
            assert_eq!(kp.sigma[0][1], kp.sigma[1][0]);
        }
        assert_eq!(kps, det.detect(&store, &img).unwrap());
        assert!(det.detect(&store, &Array::zeros(&[2, 64, 144])).is_err());
    }
}
