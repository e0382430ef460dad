use rand::Rng;

use super::graph::Var;
use super::params::{ParamId, ParamStore, Session};
use crate::error::Result;

/// Square convolution with bias and "same" padding.
#[derive(Clone, Debug)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub k: usize,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        rng: &mut impl Rng,
        trainable: bool,
    ) -> Self {
        let weight = store.add_he(format!("{name}.weight"), &[c_out, c_in, k, k], c_in * k * k, rng, trainable);
        let bias = store.add(format!("{name}.bias"), super::Array::zeros(&[c_out]), trainable);
        Conv { weight, bias, stride, k }
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let w = s.param(self.weight);
        let b = s.param(self.bias);
        let y = s.g.conv2d(x, w, self.stride, self.k / 2)?;
        s.g.add_bias(y, b)
    }

    pub fn forward_relu(&self, s: &mut Session, x: Var) -> Result<Var> {
        let y = self.forward(s, x)?;
        s.g.relu(y)
    }
}

/// Three-level U-shaped network: a full-resolution stem, three
/// average-pool + conv down blocks, three upsample + conv up blocks with skip
/// concatenation, and a linear 3x3 head.
#[derive(Clone, Debug)]
pub struct UNet {
    stem: Conv,
    down: [Conv; 3],
    up: [Conv; 3],
    head: Conv,
}

impl UNet {
    /// `widths[0]` is the stem width, `widths[1..=3]` the down-block widths.
    pub fn new(store: &mut ParamStore, name: &str, c_in: usize, c_out: usize, widths: [usize; 4], rng: &mut impl Rng) -> Self {
        let [w0, w1, w2, w3] = widths;
        let stem = Conv::new(store, &format!("{name}.stem"), c_in, w0, 3, 1, rng, true);
        let down = [
            Conv::new(store, &format!("{name}.down1"), w0, w1, 3, 1, rng, true),
            Conv::new(store, &format!("{name}.down2"), w1, w2, 3, 1, rng, true),
            Conv::new(store, &format!("{name}.down3"), w2, w3, 3, 1, rng, true),
        ];
        let up = [
            Conv::new(store, &format!("{name}.up3"), w3 + w2, w2, 3, 1, rng, true),
            Conv::new(store, &format!("{name}.up2"), w2 + w1, w1, 3, 1, rng, true),
            Conv::new(store, &format!("{name}.up1"), w1 + w0, w0, 3, 1, rng, true),
        ];
        let head = Conv::new(store, &format!("{name}.head"), w0, c_out, 3, 1, rng, true);
        UNet { stem, down, up, head }
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let e0 = self.stem.forward_relu(s, x)?;
        let mut skips = vec![e0];
        let mut cur = e0;
        for blk in &self.down {
            let p = s.g.down2(cur)?;
            cur = blk.forward_relu(s, p)?;
            skips.push(cur);
        }
        skips.pop();
        for blk in &self.up {
            let u = s.g.up2(cur)?;
            let skip = skips.pop().expect("skip per level");
            let cat = s.g.concat(&[u, skip])?;
            cur = blk.forward_relu(s, cat)?;
        }
        self.head.forward(s, cur)
    }

    pub fn head_bias(&self) -> ParamId {
        self.head.bias
    }
}
