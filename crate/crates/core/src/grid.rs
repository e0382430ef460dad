//! Visual summary of a motion basis: one row per source image, three columns
//! (scales -1, 0, +1) per basis direction.

use crate::diffcore::Array;
use crate::error::{Error, Result};
use crate::model::MtModel;
use crate::mtaug::{augment_with_motion, MotionBasis};

pub const SCALES: [f64; 3] = [-1.0, 0.0, 1.0];
const SEPARATOR: f32 = 1.0;

/// Motion along basis direction `dir` at `scale` standard deviations.
pub fn direction_motion(basis: &MotionBasis, dir: usize, scale: f64) -> Vec<f32> {
    let mut w = vec![0.0; basis.len()];
    w[dir] = 1.0;
    basis.combine(&w, scale).iter().map(|&v| v as f32).collect()
}

/// Tiles `cells[row][col]` (all `1 x h x w`) into one image with a 1 px
/// separator around every cell: `rows*(h+2) x cols*(w+2)`.
pub fn tile(cells: &[Vec<Array>]) -> Result<Array> {
    let first = cells
        .first()
        .and_then(|r| r.first())
        .ok_or_else(|| Error::InvalidArgument("empty grid".into()))?;
    let (_, h, w) = first.dims3()?;
    let cols = cells[0].len();
    let (ch, cw) = (h + 2, w + 2);
    let mut out = Array::full(&[1, cells.len() * ch, cols * cw], SEPARATOR);
    let stride = cols * cw;
    for (r, row) in cells.iter().enumerate() {
        if row.len() != cols {
            return Err(Error::shape("grid", "ragged rows"));
        }
        for (c, cell) in row.iter().enumerate() {
            if cell.shape() != first.shape() {
                return Err(Error::shape("grid", format!("cell {:?} vs {:?}", cell.shape(), first.shape())));
            }
            for y in 0..h {
                let dst = (r * ch + 1 + y) * stride + c * cw + 1;
                out.data_mut()[dst..dst + w].copy_from_slice(&cell.data()[y * w..(y + 1) * w]);
            }
        }
    }
    Ok(out)
}

pub fn render_grid(model: &MtModel, basis: &MotionBasis, sources: &[Array], dirs: usize) -> Result<Array> {
    if sources.is_empty() || dirs == 0 {
        return Err(Error::InvalidArgument("render-grid needs at least one source and one direction".into()));
    }
    let dirs = dirs.min(basis.len());
    let mut rows = Vec::with_capacity(sources.len());
    for x in sources {
        let kp = model.detect(x)?;
        let mut row = Vec::with_capacity(3 * dirs);
        for d in 0..dirs {
            for s in SCALES {
                row.push(augment_with_motion(model, x, &kp, &direction_motion(basis, d, s))?);
            }
        }
        rows.push(row);
    }
    tile(&rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::mtaug::fit_basis;

    #[test]
    fn tile_layout() {
        let a = Array::full(&[1, 2, 3], 0.25);
        let b = Array::full(&[1, 2, 3], 0.5);
        let g = tile(&[vec![a.clone(), b.clone()], vec![b, a]]).unwrap();
        assert_eq!(g.shape(), &[1, 8, 10]);
        assert_eq!(g.at(0, 0, 0), SEPARATOR);
        assert_eq!(g.at(0, 1, 1), 0.25);
        assert_eq!(g.at(0, 1, 6), 0.5);
        assert_eq!(g.at(0, 1, 5), SEPARATOR);
        assert_eq!(g.at(0, 5, 1), 0.5);
        assert_eq!(g.at(0, 7, 9), SEPARATOR);
    }

    #[test]
    fn grid_size_and_zero_column() {
        let cfg = ModelConfig {
            height: 32,
            width: 48,
            keypoints: 3,
            widths: [4, 4, 8, 8],
            ..ModelConfig::default()
        };
        let m = MtModel::new(cfg).unwrap();
        let deltas: Vec<Vec<f64>> = (0..6).map(|i| (0..6).map(|j| ((i * 7 + j * 3) % 5) as f64 - 2.0).collect()).collect();
        let basis = fit_basis(&deltas, 2).unwrap();
        let x = Array::from_fn(&[1, 32, 48], |i| (i % 11) as f32 / 11.0);
        let g = render_grid(&m, &basis, &[x.clone(), x.clone()], 5).unwrap();
        assert_eq!(g.shape(), &[1, 2 * 34, 2 * 3 * 50]);
        let recon = m.reconstruct(&x).unwrap();
        for y in 0..32 {
            for c in 0..48 {
                assert_eq!(g.at(0, 1 + y, 50 + 1 + c), recon.at(0, y, c));
            }
        }
        assert!(render_grid(&m, &basis, &[], 1).is_err());
    }
}
