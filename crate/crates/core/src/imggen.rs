//! Warping-based image generation: an encoder/decoder whose encoder features
//! are warped by the dense flow and gated by the inpainting mask before they
//! reach the matching decoder level.

use rand::Rng;

use crate::diffcore::nn::Conv;
use crate::diffcore::{Array, Graph, ParamStore, Session, Var};
use crate::error::{Error, Result};

/// Number of down-sampling encoder blocks (and up-sampling decoder blocks).
pub const LEVELS: usize = 3;

#[derive(Clone, Debug)]
pub struct Generator {
    stem: Conv,
    down: [Conv; LEVELS],
    up: [Conv; LEVELS],
    head: Conv,
}

/// Flow at encoder level `level`: average-pooled `level` times, displacements divided by `2^level`.
pub fn flow_at_level(g: &mut Graph, flow: Var, level: usize) -> Result<Var> {
    let mut f = flow;
    for _ in 0..level {
        let d = g.down2(f)?;
        f = g.scale(d, 0.5)?;
    }
    Ok(f)
}

/// Mask at encoder level `level`: average-pooled `level` times.
pub fn mask_at_level(g: &mut Graph, mask: Var, level: usize) -> Result<Var> {
    let mut m = mask;
    for _ in 0..level {
        m = g.down2(m)?;
    }
    Ok(m)
}

/// No-grad version of [`flow_at_level`].
pub fn downscale_flow(flow: &Array, level: usize) -> Result<Array> {
    let mut g = Graph::new();
    let f = g.constant(flow.clone());
    let out = flow_at_level(&mut g, f, level)?;
    Ok(g.value(out).clone())
}

impl Generator {
    /// Encoder widths `w, 2w, 4w, 8w`; decoder mirrors them.
    pub fn new(store: &mut ParamStore, base: usize, rng: &mut impl Rng) -> Self {
        let w = [base, 2 * base, 4 * base, 8 * base];
        let stem = Conv::new(store, "generator.stem", 1, w[0], 3, 1, rng, true);
        let down = [
            Conv::new(store, "generator.down1", w[0], w[1], 3, 1, rng, true),
            Conv::new(store, "generator.down2", w[1], w[2], 3, 1, rng, true),
            Conv::new(store, "generator.down3", w[2], w[3], 3, 1, rng, true),
        ];
        let up = [
            Conv::new(store, "generator.up3", w[3] + w[2], w[2], 3, 1, rng, true),
            Conv::new(store, "generator.up2", w[2] + w[1], w[1], 3, 1, rng, true),
            Conv::new(store, "generator.up1", w[1] + w[0], w[0], 3, 1, rng, true),
        ];
        let head = Conv::new(store, "generator.head", w[0], 1, 3, 1, rng, true);
        Generator { stem, down, up, head }
    }

    /// `source: 1 x h x w`, `flow: 2 x h x w`, `inpaint: 1 x h x w`; output `1 x h x w` in `[0, 1]`.
    pub fn forward(&self, s: &mut Session, source: Var, flow: Var, inpaint: Var) -> Result<Var> {
        let (h, w) = match s.g.shape(source) {
            &[1, h, w] => (h, w),
            sh => return Err(Error::shape("generator", format!("source {sh:?}"))),
        };
        if h % (1 << LEVELS) != 0 || w % (1 << LEVELS) != 0 {
            return Err(Error::shape("generator", format!("{h}x{w} not divisible by {}", 1 << LEVELS)));
        }
        if s.g.shape(flow) != [2, h, w] || s.g.shape(inpaint) != [1, h, w] {
            return Err(Error::shape(
                "generator",
                format!("flow {:?} / inpaint {:?} for {h}x{w}", s.g.shape(flow), s.g.shape(inpaint)),
            ));
        }
        let mut feats = vec![self.stem.forward_relu(s, source)?];
        for blk in &self.down {
            let p = s.g.down2(*feats.last().expect("feature"))?;
            feats.push(blk.forward_relu(s, p)?);
        }
        // warp, then gate, at every encoder level
        let mut warped = Vec::with_capacity(feats.len());
        for (level, &feat) in feats.iter().enumerate() {
            let f = flow_at_level(&mut s.g, flow, level)?;
            let m = mask_at_level(&mut s.g, inpaint, level)?;
            let wf = s.g.grid_sample(feat, f)?;
            warped.push(s.g.mul_map(wf, m)?);
        }
        let mut cur = warped.pop().expect("bottleneck");
        for blk in &self.up {
            let u = s.g.up2(cur)?;
            let skip = warped.pop().expect("skip");
            let cat = s.g.concat(&[u, skip])?;
            cur = blk.forward_relu(s, cat)?;
        }
        let out = self.head.forward(s, cur)?;
        s.g.sigmoid(out)
    }

    pub fn generate(&self, store: &ParamStore, source: &Array, flow: &Array, inpaint: &Array) -> Result<Array> {
        let mut s = Session::new(store, false);
        let x = s.g.constant(crate::posedet::as_chw(source)?);
        let f = s.g.constant(flow.clone());
        let m = s.g.constant(inpaint.clone());
        let y = self.forward(&mut s, x, f, m)?;
        Ok(s.g.value(y).clone())
    }
}
