//! Dense motion estimation.
//!
//! The sparse keypoint displacement `dp_k = p_S,k - p_D,k` is repeated over
//! the grid to give one constant coarse flow per keypoint. The source warped
//! by each coarse flow, stacked with the heatmap difference, is the input of
//! a U-shaped network that predicts `K + 1` softmax masks (the last one is a
//! zero-motion background) and a sigmoid inpainting mask. The dense flow is
//! the mask-weighted mixture of the coarse flows.

use rand::Rng;

use crate::diffcore::nn::UNet;
use crate::diffcore::{Array, Graph, ParamStore, Session, Var};
use crate::error::{Error, Result};

/// Keypoint displacements `p_S - p_D` (`K x 2`, pixels) and heatmap
/// difference `H_S - H_D` (`K x h' x w'` on the detector grid).
#[derive(Clone, Debug, PartialEq)]
pub struct MotionDelta {
    pub dp: Array,
    pub dh: Array,
}

impl MotionDelta {
    pub fn keypoints(&self) -> usize {
        self.dp.shape()[0]
    }

    pub fn zero(keypoints: usize, grid_h: usize, grid_w: usize) -> Self {
        MotionDelta {
            dp: Array::zeros(&[keypoints, 2]),
            dh: Array::zeros(&[keypoints, grid_h, grid_w]),
        }
    }
}

/// Constant per-keypoint flow fields `2 x h x w` repeating each displacement.
pub fn coarse_flow(dp: &Array, h: usize, w: usize) -> Result<Vec<Array>> {
    if dp.shape().len() != 2 || dp.shape()[1] != 2 {
        return Err(Error::shape("coarse_flow", format!("expected k x 2, got {:?}", dp.shape())));
    }
    if !dp.is_finite() {
        return Err(Error::NonFinite { op: "coarse_flow" });
    }
    Ok(dp
        .data()
        .chunks(2)
        .map(|d| Array::from_fn(&[2, h, w], |i| if i < h * w { d[0] } else { d[1] }))
        .collect())
}

/// `F(x) = sum_k M_k(x) dp_k` for masks `(K + 1) x h x w` whose last channel is
/// the zero-motion background, implemented as a 1x1 convolution with `dp^T`.
pub fn combine_flow(g: &mut Graph, masks: Var, dp: Var) -> Result<Var> {
    let k = g.shape(dp)[0];
    let (c, _, _) = match g.shape(masks) {
        &[c, h, w] => (c, h, w),
        s => return Err(Error::shape("combine_flow", format!("masks {s:?}"))),
    };
    if c != k + 1 {
        return Err(Error::shape("combine_flow", format!("{c} masks for {k} keypoints")));
    }
    let fg = g.channels(masks, 0, k)?;
    let t = g.transpose(dp)?;
    let kernel = g.reshape(t, &[2, k, 1, 1])?;
    g.conv2d(fg, kernel, 1, 0)
}

/// Outputs of the dense motion network at full resolution.
#[derive(Clone, Copy, Debug)]
pub struct MotionOutput {
    pub flow: Var,
    pub inpaint: Var,
    pub masks: Var,
}

#[derive(Clone, Debug)]
pub struct DenseMotion {
    net: UNet,
    keypoints: usize,
    downscale: usize,
}

impl DenseMotion {
    pub fn new(store: &mut ParamStore, keypoints: usize, downscale: usize, widths: [usize; 4], rng: &mut impl Rng) -> Self {
        let net = UNet::new(store, "densemotion", 2 * keypoints, keypoints + 2, widths, rng);
        DenseMotion {
            net,
            keypoints,
            downscale,
        }
    }

    /// `small_source`: source reduced to the detector grid; `dp`: `K x 2` in
    /// full-resolution pixels; `dh`: `K x h' x w'` heatmap difference.
    pub fn forward(&self, s: &mut Session, small_source: Var, dp: Var, dh: Var) -> Result<MotionOutput> {
        let k = self.keypoints;
        let (_, hs, ws) = match s.g.shape(small_source) {
            &[c, h, w] if c == 1 => (c, h, w),
            sh => return Err(Error::shape("densemotion", format!("source {sh:?}"))),
        };
        if s.g.shape(dp) != [k, 2] || s.g.shape(dh) != [k, hs, ws] {
            return Err(Error::shape(
                "densemotion",
                format!("dp {:?} / dh {:?} for {k} keypoints on {hs}x{ws}", s.g.shape(dp), s.g.shape(dh)),
            ));
        }
        let dp_small = s.g.scale(dp, 1.0 / self.downscale as f32)?;
        let mut inputs = Vec::with_capacity(k + 1);
        for i in 0..k {
            let d = s.g.narrow(dp_small, 2 * i, &[2])?;
            let flow = s.g.repeat_spatial(d, hs, ws)?;
            inputs.push(s.g.grid_sample(small_source, flow)?);
        }
        inputs.push(dh);
        let x = s.g.concat(&inputs)?;
        let out = self.net.forward(s, x)?;
        let logits = s.g.channels(out, 0, k + 1)?;
        let inp_logit = s.g.channels(out, k + 1, 1)?;
        let mut masks = s.g.softmax_channels(logits)?;
        let mut inpaint = s.g.sigmoid(inp_logit)?;
        let mut f = self.downscale;
        while f > 1 {
            masks = s.g.up2(masks)?;
            inpaint = s.g.up2(inpaint)?;
            f /= 2;
        }
        let flow = combine_flow(&mut s.g, masks, dp)?;
        Ok(MotionOutput { flow, inpaint, masks })
    }

    /// No-grad estimate: `(flow 2 x h x w, inpainting mask 1 x h x w)`.
    pub fn estimate(&self, store: &ParamStore, source: &Array, delta: &MotionDelta) -> Result<(Array, Array)> {
        let mut s = Session::new(store, false);
        let x = s.g.constant(crate::posedet::as_chw(source)?);
        let small = crate::posedet::downscale(&mut s.g, x, self.downscale)?;
        let dp = s.g.constant(delta.dp.clone());
        let dh = s.g.constant(delta.dh.clone());
        let out = self.forward(&mut s, small, dp, dh)?;
        Ok((s.g.value(out.flow).clone(), s.g.value(out.inpaint).clone()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn mix(masks: &Array, dp: &Array) -> Array {
        let mut g = Graph::new();
        let m = g.constant(masks.clone());
        let d = g.constant(dp.clone());
        let f = combine_flow(&mut g, m, d).unwrap();
        g.value(f).clone()
    }

    #[test]
    fn coarse_flow_repeats() {
        let dp = Array::new(vec![1, 2], vec![2.0, -1.0]).unwrap();
        let f = &coarse_flow(&dp, 2, 2).unwrap()[0];
        assert_eq!(f.data(), &[2.0, 2.0, 2.0, 2.0, -1.0, -1.0, -1.0, -1.0]);
        let zero = coarse_flow(&Array::zeros(&[3, 2]), 4, 5).unwrap();
        assert!(zero.iter().all(|f| f.data().iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn coarse_flow_exhaustive() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let dp = Array::from_fn(&[5, 2], |_| rng.gen_range(-8.0..8.0));
        let flows = coarse_flow(&dp, 7, 9).unwrap();
        for (k, f) in flows.iter().enumerate() {
            for y in 0..7 {
                for x in 0..9 {
                    assert_eq!(f.at(0, y, x), dp.data()[2 * k]);
                    assert_eq!(f.at(1, y, x), dp.data()[2 * k + 1]);
                }
            }
        }
    }

    #[test]
    fn one_hot_mask_selects_keypoint_flow() {
        let dp = Array::new(vec![3, 2], vec![1.0, 2.0, -3.0, 0.5, 4.0, -4.0]).unwrap();
        for j in 0..4 {
            let masks = Array::from_fn(&[4, 3, 5], |i| if i / 15 == j { 1.0 } else { 0.0 });
            let f = mix(&masks, &dp);
            let want = if j < 3 { [dp.data()[2 * j], dp.data()[2 * j + 1]] } else { [0.0, 0.0] };
            for y in 0..3 {
                for x in 0..5 {
                    assert_eq!([f.at(0, y, x), f.at(1, y, x)], want);
                }
            }
        }
    }

    #[test]
    fn random_masks_match_convex_combination_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (k, h, w) = (5, 6, 8);
        let dp = Array::from_fn(&[k, 2], |_| rng.gen_range(-6.0..6.0));
        let mut masks = Array::from_fn(&[k + 1, h, w], |_| rng.gen_range(0.0f32..1.0));
        for i in 0..h * w {
            let z: f32 = (0..=k).map(|c| masks.data()[c * h * w + i]).sum();
            for c in 0..=k {
                masks.data_mut()[c * h * w + i] /= z;
            }
        }
        let f = mix(&masks, &dp);
        let bound = dp
            .data()
            .chunks(2)
            .map(|d| (d[0] * d[0] + d[1] * d[1]).sqrt())
            .fold(0.0, f32::max);
        for i in 0..h * w {
            let (mut ox, mut oy) = (0.0f64, 0.0f64);
            for c in 0..k {
                let m = masks.data()[c * h * w + i] as f64;
                ox += m * dp.data()[2 * c] as f64;
                oy += m * dp.data()[2 * c + 1] as f64;
            }
            let (fx, fy) = (f.data()[i], f.data()[h * w + i]);
            assert!((fx as f64 - ox).abs() <= 1e-6 && (fy as f64 - oy).abs() <= 1e-6);
            assert!((fx * fx + fy * fy).sqrt() <= bound + 1e-5);
        }
    }

    #[test]
    fn network_masks_are_a_simplex_and_zero_motion_is_zero_flow() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::new();
        let dm = DenseMotion::new(&mut store, 3, 2, [4, 8, 8, 8], &mut rng);
        let src = Array::from_fn(&[1, 16, 32], |_| rng.gen_range(0.0..1.0));

        let zero = MotionDelta::zero(3, 8, 16);
        let (flow, inpaint) = dm.estimate(&store, &src, &zero).unwrap();
        assert!(flow.data().iter().all(|&v| v == 0.0));
        assert!(inpaint.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert_eq!(inpaint.shape(), &[1, 16, 32]);

        let delta = MotionDelta {
            dp: Array::from_fn(&[3, 2], |_| rng.gen_range(-4.0..4.0)),
            dh: Array::from_fn(&[3, 8, 16], |_| rng.gen_range(-1.0..1.0)),
        };
        let mut s = Session::new(&store, false);
        let x = s.g.constant(src.clone());
        let small = s.g.down2(x).unwrap();
        let dp = s.g.constant(delta.dp.clone());
        let dh = s.g.constant(delta.dh.clone());
        let out = dm.forward(&mut s, small, dp, dh).unwrap();
        let masks = s.g.value(out.masks);
        assert_eq!(masks.shape(), &[4, 16, 32]);
        for i in 0..16 * 32 {
            let z: f32 = (0..4).map(|c| masks.data()[c * 512 + i]).sum();
            assert!((z - 1.0).abs() <= 1e-5);
        }
        let bound = delta
            .dp
            .data()
            .chunks(2)
            .map(|d| (d[0] * d[0] + d[1] * d[1]).sqrt())
            .fold(0.0, f32::max);
        let flow = s.g.value(out.flow);
        for i in 0..512 {
            let n = (flow.data()[i].powi(2) + flow.data()[512 + i].powi(2)).sqrt();
            assert!(n <= bound + 1e-5);
        }
    }

    #[test]
    fn estimate_rejects_mismatched_delta() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::new();
        let dm = DenseMotion::new(&mut store, 3, 2, [4, 8, 8, 8], &mut rng);
        let src = Array::zeros(&[1, 16, 32]);
        assert!(dm.estimate(&store, &src, &MotionDelta::zero(2, 8, 16)).is_err());
    }
}
