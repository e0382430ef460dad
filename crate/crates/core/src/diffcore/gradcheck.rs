//! Central finite-difference checks of analytic gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::kernels::CoordMap;
use super::{Array, Graph, Var};
use crate::error::Result;

/// Builds a scalar from leaves; called once for the analytic pass and twice per perturbed element.
pub type LossFn = Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var>>;

#[derive(Clone, Debug)]
pub struct GradReport {
    /// `|analytic - numeric| / max(|analytic|, |numeric|)` over the stacked gradient vector.
    pub rel_error: f32,
    pub max_abs_error: f32,
}

/// Compares analytic gradients of `f` at `inputs` with central differences of step `eps`.
pub fn check(inputs: &[Array], f: &dyn Fn(&mut Graph, &[Var]) -> Result<Var>, eps: f32) -> Result<GradReport> {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|a| g.leaf(a.clone(), true)).collect();
    let loss = f(&mut g, &vars)?;
    g.backward(loss)?;
    let analytic: Vec<f32> = vars
        .iter()
        .zip(inputs)
        .flat_map(|(&v, a)| g.grad(v).map(|x| x.into_data()).unwrap_or_else(|| vec![0.0; a.len()]))
        .collect();

    let eval = |arrays: &[Array]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = arrays.iter().map(|a| g.leaf(a.clone(), false)).collect();
        let l = f(&mut g, &vars)?;
        Ok(g.value(l).item() as f64)
    };
    let mut numeric = Vec::with_capacity(analytic.len());
    let mut work = inputs.to_vec();
    for i in 0..inputs.len() {
        for j in 0..inputs[i].len() {
            let orig = work[i].data()[j];
            work[i].data_mut()[j] = orig + eps;
            let up = eval(&work)?;
            work[i].data_mut()[j] = orig - eps;
            let dn = eval(&work)?;
            work[i].data_mut()[j] = orig;
            numeric.push(((up - dn) / (2.0 * eps as f64)) as f32);
        }
    }
    let diff: f32 = analytic.iter().zip(&numeric).map(|(a, n)| (a - n) * (a - n)).sum::<f32>().sqrt();
    let na: f32 = analytic.iter().map(|a| a * a).sum::<f32>().sqrt();
    let nn: f32 = numeric.iter().map(|a| a * a).sum::<f32>().sqrt();
    let max_abs_error = analytic.iter().zip(&numeric).map(|(a, n)| (a - n).abs()).fold(0.0, f32::max);
    let denom = na.max(nn).max(1e-12);
    Ok(GradReport {
        rel_error: diff / denom,
        max_abs_error,
    })
}

/// One named operation under test with a generator for random instances.
pub struct OpCase {
    pub name: &'static str,
    pub make: fn(&mut ChaCha8Rng) -> (Vec<Array>, LossFn),
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f32, hi: f32) -> Array {
    Array::from_fn(shape, |_| rng.gen_range(lo..hi))
}

/// Values bounded away from zero so kinks (relu, abs) are never straddled by the step.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Array {
    Array::from_fn(shape, |_| {
        let m = rng.gen_range(0.1f32..1.0);
        if rng.gen_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

/// Flow whose sample positions stay inside the image and keep their fractional part in [0.1, 0.9].
fn subpixel_flow(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Array {
    let mut data = vec![0.0; 2 * h * w];
    for y in 0..h {
        for x in 0..w {
            let tx = rng.gen_range(0..w - 1) as f32 + rng.gen_range(0.1..0.9);
            let ty = rng.gen_range(0..h - 1) as f32 + rng.gen_range(0.1..0.9);
            data[y * w + x] = tx - x as f32;
            data[h * w + y * w + x] = ty - y as f32;
        }
    }
    Array::new(vec![2, h, w], data).expect("flow shape")
}

/// Projects a node onto fixed random weights so every output element matters.
fn project(rng: &mut ChaCha8Rng, shape: &[usize]) -> Array {
    uniform(rng, shape, -1.0, 1.0)
}

fn weighted(weights: Array) -> impl Fn(&mut Graph, Var) -> Result<Var> {
    move |g: &mut Graph, y: Var| {
        let r = g.constant(weights.clone());
        let p = g.mul(y, r)?;
        g.sum(p)
    }
}

macro_rules! case {
    ($name:expr, |$rng:ident| $body:block) => {
        OpCase {
            name: $name,
            make: |$rng: &mut ChaCha8Rng| $body,
        }
    };
}

/// Every differentiable operation the engine exposes, each with a random instance generator.
pub fn standard_cases() -> Vec<OpCase> {
    vec![
        case!("sigmoid", |rng| {
            let x = uniform(rng, &[3, 4], -3.0, 3.0);
            let w = weighted(project(rng, &[3, 4]));
            (vec![x], Box::new(move |g, v| {
                let y = g.sigmoid(v[0])?;
                w(g, y)
            }))
        }),
        case!("relu", |rng| {
            let x = away_from_zero(rng, &[3, 4]);
            let w = weighted(project(rng, &[3, 4]));
            (vec![x], Box::new(move |g, v| {
                let y = g.relu(v[0])?;
                w(g, y)
            }))
        }),
        case!("exp", |rng| {
            let x = uniform(rng, &[5], -2.0, 2.0);
            let w = weighted(project(rng, &[5]));
            (vec![x], Box::new(move |g, v| {
                let y = g.exp(v[0])?;
                w(g, y)
            }))
        }),
        case!("neg", |rng| {
            let x = uniform(rng, &[5], -2.0, 2.0);
            let w = weighted(project(rng, &[5]));
            (vec![x], Box::new(move |g, v| {
                let y = g.neg(v[0])?;
                w(g, y)
            }))
        }),
        case!("log", |rng| {
            let x = uniform(rng, &[5], 0.5, 3.0);
            let w = weighted(project(rng, &[5]));
            (vec![x], Box::new(move |g, v| {
                let y = g.log(v[0])?;
                w(g, y)
            }))
        }),
        case!("abs", |rng| {
            let x = away_from_zero(rng, &[6]);
            let w = weighted(project(rng, &[6]));
            (vec![x], Box::new(move |g, v| {
                let y = g.abs(v[0])?;
                w(g, y)
            }))
        }),
        case!("add", |rng| {
            let a = uniform(rng, &[2, 3], -1.0, 1.0);
            let b = uniform(rng, &[2, 3], -1.0, 1.0);
            let w = weighted(project(rng, &[2, 3]));
            (vec![a, b], Box::new(move |g, v| {
                let y = g.add(v[0], v[1])?;
                w(g, y)
            }))
        }),
        case!("sub", |rng| {
            let a = uniform(rng, &[2, 3], -1.0, 1.0);
            let b = uniform(rng, &[2, 3], -1.0, 1.0);
            let w = weighted(project(rng, &[2, 3]));
            (vec![a, b], Box::new(move |g, v| {
                let y = g.sub(v[0], v[1])?;
                w(g, y)
            }))
        }),
        case!("mul", |rng| {
            let a = uniform(rng, &[2, 3], -1.0, 1.0);
            let b = uniform(rng, &[2, 3], -1.0, 1.0);
            let w = weighted(project(rng, &[2, 3]));
            (vec![a, b], Box::new(move |g, v| {
                let y = g.mul(v[0], v[1])?;
                w(g, y)
            }))
        }),
        case!("mul_scalar_broadcast", |rng| {
            let a = uniform(rng, &[2, 3], -1.0, 1.0);
            let b = uniform(rng, &[1], -1.0, 1.0);
            let w = weighted(project(rng, &[2, 3]));
            (vec![a, b], Box::new(move |g, v| {
                let y = g.mul(v[0], v[1])?;
                w(g, y)
            }))
        }),
        case!("scale", |rng| {
            let a = uniform(rng, &[4], -1.0, 1.0);
            let w = weighted(project(rng, &[4]));
            (vec![a], Box::new(move |g, v| {
                let y = g.scale(v[0], -1.7)?;
                w(g, y)
            }))
        }),
        case!("add_scalar", |rng| {
            let a = uniform(rng, &[4], -1.0, 1.0);
            let w = weighted(project(rng, &[4]));
            (vec![a], Box::new(move |g, v| {
                let y = g.add_scalar(v[0], 0.3)?;
                w(g, y)
            }))
        }),
        case!("conv2d", |rng| {
            let x = uniform(rng, &[2, 5, 6], -1.0, 1.0);
            let k = uniform(rng, &[3, 2, 3, 3], -0.5, 0.5);
            let w = weighted(project(rng, &[3, 5, 6]));
            (vec![x, k], Box::new(move |g, v| {
                let y = g.conv2d(v[0], v[1], 1, 1)?;
                w(g, y)
            }))
        }),
        case!("conv2d_stride2", |rng| {
            let x = uniform(rng, &[2, 6, 6], -1.0, 1.0);
            let k = uniform(rng, &[2, 2, 3, 3], -0.5, 0.5);
            let w = weighted(project(rng, &[2, 3, 3]));
            (vec![x, k], Box::new(move |g, v| {
                let y = g.conv2d(v[0], v[1], 2, 1)?;
                w(g, y)
            }))
        }),
        case!("add_bias", |rng| {
            let x = uniform(rng, &[3, 2, 2], -1.0, 1.0);
            let b = uniform(rng, &[3], -1.0, 1.0);
            let w = weighted(project(rng, &[3, 2, 2]));
            (vec![x, b], Box::new(move |g, v| {
                let y = g.add_bias(v[0], v[1])?;
                w(g, y)
            }))
        }),
        case!("mul_map", |rng| {
            let x = uniform(rng, &[3, 2, 3], -1.0, 1.0);
            let m = uniform(rng, &[1, 2, 3], 0.0, 1.0);
            let w = weighted(project(rng, &[3, 2, 3]));
            (vec![x, m], Box::new(move |g, v| {
                let y = g.mul_map(v[0], v[1])?;
                w(g, y)
            }))
        }),
        case!("grid_sample", |rng| {
            let x = uniform(rng, &[2, 4, 5], -1.0, 1.0);
            let f = subpixel_flow(rng, 4, 5);
            let w = weighted(project(rng, &[2, 4, 5]));
            (vec![x, f], Box::new(move |g, v| {
                let y = g.grid_sample(v[0], v[1])?;
                w(g, y)
            }))
        }),
        case!("down2_avg", |rng| {
            let x = uniform(rng, &[2, 4, 6], -1.0, 1.0);
            let w = weighted(project(rng, &[2, 2, 3]));
            (vec![x], Box::new(move |g, v| {
                let y = g.down2(v[0])?;
                w(g, y)
            }))
        }),
        case!("up2_bilinear", |rng| {
            let x = uniform(rng, &[2, 3, 2], -1.0, 1.0);
            let w = weighted(project(rng, &[2, 6, 4]));
            (vec![x], Box::new(move |g, v| {
                let y = g.up2(v[0])?;
                w(g, y)
            }))
        }),
        case!("concat", |rng| {
            let a = uniform(rng, &[1, 2, 2], -1.0, 1.0);
            let b = uniform(rng, &[2, 2, 2], -1.0, 1.0);
            let w = weighted(project(rng, &[3, 2, 2]));
            (vec![a, b], Box::new(move |g, v| {
                let y = g.concat(&[v[0], v[1]])?;
                w(g, y)
            }))
        }),
        case!("channels", |rng| {
            let a = uniform(rng, &[4, 2, 2], -1.0, 1.0);
            let w = weighted(project(rng, &[2, 2, 2]));
            (vec![a], Box::new(move |g, v| {
                let y = g.channels(v[0], 1, 2)?;
                w(g, y)
            }))
        }),
        case!("reshape", |rng| {
            let a = uniform(rng, &[2, 3], -1.0, 1.0);
            let w = weighted(project(rng, &[3, 2]));
            (vec![a], Box::new(move |g, v| {
                let y = g.reshape(v[0], &[3, 2])?;
                w(g, y)
            }))
        }),
        case!("sum", |rng| {
            let a = uniform(rng, &[2, 3], -1.0, 1.0);
            (vec![a], Box::new(move |g, v| {
                let s = g.sum(v[0])?;
                let sq = g.mul(s, s)?;
                g.sum(sq)
            }))
        }),
        case!("mean", |rng| {
            let a = uniform(rng, &[2, 3], -1.0, 1.0);
            (vec![a], Box::new(move |g, v| {
                let s = g.mean(v[0])?;
                let sq = g.mul(s, s)?;
                g.sum(sq)
            }))
        }),
        case!("mean_spatial", |rng| {
            let a = uniform(rng, &[3, 2, 4], -1.0, 1.0);
            let w = weighted(project(rng, &[3]));
            (vec![a], Box::new(move |g, v| {
                let y = g.mean_spatial(v[0])?;
                w(g, y)
            }))
        }),
        case!("repeat_spatial", |rng| {
            let a = uniform(rng, &[2], -1.0, 1.0);
            let w = weighted(project(rng, &[2, 3, 2]));
            (vec![a], Box::new(move |g, v| {
                let y = g.repeat_spatial(v[0], 3, 2)?;
                w(g, y)
            }))
        }),
        case!("softmax_channels", |rng| {
            let a = uniform(rng, &[4, 2, 3], -2.0, 2.0);
            let w = weighted(project(rng, &[4, 2, 3]));
            (vec![a], Box::new(move |g, v| {
                let y = g.softmax_channels(v[0])?;
                w(g, y)
            }))
        }),
        case!("spatial_moments", |rng| {
            let a = uniform(rng, &[2, 4, 5], 0.2, 1.0);
            let w = weighted(project(rng, &[2, 5]));
            (vec![a], Box::new(move |g, v| {
                let y = g.spatial_moments(v[0], CoordMap::downsampled(2), 0.01)?;
                w(g, y)
            }))
        }),
        case!("heatmaps", |rng| {
            let mut kp = Vec::new();
            for _ in 0..2 {
                let (sxx, syy) = (rng.gen_range(1.5f32..4.0), rng.gen_range(1.5f32..4.0));
                let sxy = rng.gen_range(-0.5f32..0.5) * (sxx * syy).sqrt();
                kp.extend([rng.gen_range(1.0f32..4.0), rng.gen_range(1.0f32..3.0), sxx, sxy, syy]);
            }
            let kp = Array::new(vec![2, 5], kp).expect("kp");
            let w = weighted(project(rng, &[2, 4, 5]));
            (vec![kp], Box::new(move |g, v| {
                let y = g.heatmaps(v[0], 4, 5, CoordMap::IDENTITY)?;
                w(g, y)
            }))
        }),
        case!("affine_points", |rng| {
            let p = uniform(rng, &[3, 2], -5.0, 5.0);
            let m = [0.9, -0.2, 1.5, 0.3, 1.1, -2.0];
            let w = weighted(project(rng, &[3, 2]));
            (vec![p], Box::new(move |g, v| {
                let y = g.affine_points(v[0], m)?;
                w(g, y)
            }))
        }),
        case!("matmul", |rng| {
            let a = uniform(rng, &[3, 4], -1.0, 1.0);
            let b = uniform(rng, &[4, 2], -1.0, 1.0);
            let w = weighted(project(rng, &[3, 2]));
            (vec![a, b], Box::new(move |g, v| {
                let y = g.matmul(v[0], v[1])?;
                w(g, y)
            }))
        }),
        case!("transpose", |rng| {
            let a = uniform(rng, &[3, 4], -1.0, 1.0);
            let w = weighted(project(rng, &[4, 3]));
            (vec![a], Box::new(move |g, v| {
                let y = g.transpose(v[0])?;
                w(g, y)
            }))
        }),
        case!("l2_normalize_rows", |rng| {
            let a = uniform(rng, &[2, 4], -1.0, 1.0);
            let w = weighted(project(rng, &[2, 4]));
            (vec![a], Box::new(move |g, v| {
                let y = g.l2_normalize_rows(v[0])?;
                w(g, y)
            }))
        }),
        case!("cross_entropy", |rng| {
            let a = uniform(rng, &[3, 4], -2.0, 2.0);
            let labels: Vec<usize> = (0..3).map(|_| rng.gen_range(0..4)).collect();
            (vec![a], Box::new(move |g, v| g.cross_entropy(v[0], &labels)))
        }),
        case!("batch_hard_triplet", |rng| {
            // Distinct, well-separated entries so the hardest picks are stable under the step.
            let mut vals: Vec<f32> = (0..16).map(|i| 0.05 * i as f32).collect();
            for i in (1..vals.len()).rev() {
                let j = rng.gen_range(0..=i);
                vals.swap(i, j);
            }
            let d = Array::new(vec![4, 4], vals).expect("dist");
            let labels = vec![0, 0, 1, 1];
            (vec![d], Box::new(move |g, v| {
                g.batch_hard_triplet(v[0], &labels, 0.5)?
                    .ok_or_else(|| crate::Error::InvalidArgument("no valid anchor".into()))
            }))
        }),
    ]
}

/// Runs every standard case on `instances` random draws; returns `(name, worst relative error)`.
pub fn run_suite(instances: usize, eps: f32, seed: u64) -> Result<Vec<(&'static str, f32)>> {
    let mut out = Vec::new();
    for (ci, case) in standard_cases().into_iter().enumerate() {
        let mut worst = 0.0f32;
        for inst in 0..instances {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ ((ci as u64) << 16) ^ inst as u64);
            let (inputs, f) = (case.make)(&mut rng);
            let report = check(&inputs, f.as_ref(), eps)?;
            worst = worst.max(report.rel_error);
        }
        out.push((case.name, worst));
    }
    Ok(out)
}
