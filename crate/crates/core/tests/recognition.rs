use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use veinmotion::fvreval::{compute_eer, train_fvr, FvrConfig, FvrModel, ScoreSet, EMBED_DIM};
use veinmotion::veinsim::{generate, PoseRange, SynthConfig};

fn split(classes: usize, samples: usize, ranges: PoseRange, seed: u64) -> (veinmotion::dataset::Dataset, veinmotion::dataset::Dataset) {
    let cfg = SynthConfig {
        classes,
        samples,
        ranges,
        seed,
        ..SynthConfig::default()
    };
    generate(&cfg).unwrap().dataset.split_per_class(samples / 2)
}

const NARROW: PoseRange = PoseRange { tx: 2.0, ty: 1.0, rot: 1.0, roll: 5.0 };

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

#[test]
fn trained_embedder_separates_held_out_samples() {
    let (train, test) = split(8, 6, NARROW, 11);
    let cfg = FvrConfig {
        epochs: 12,
        decay_epoch: 8,
        batch_classes: 4,
        batch_samples: 3,
        all_impostors: true,
        ..FvrConfig::default()
    };
    let r = train_fvr(&train, &test, None, &cfg).unwrap();
    let (g, i) = (mean(&r.scores.genuine), mean(&r.scores.impostor));
    assert!(g > i, "genuine {g:.4} vs impostor {i:.4}");
    assert!(r.eer < 0.4, "eer {}", r.eer);
}

#[test]
fn training_beats_untrained_weights() {
    let (train, test) = split(20, 6, PoseRange::default(), 12);
    let untrained = FvrConfig {
        epochs: 0,
        all_impostors: true,
        ..FvrConfig::default()
    };
    let r0 = train_fvr(&train, &test, None, &untrained).unwrap();
    assert!(r0.log.is_empty());
    let trained = FvrConfig {
        epochs: 10,
        decay_epoch: 7,
        ..untrained
    };
    let r = train_fvr(&train, &test, None, &trained).unwrap();
    assert!(r.eer < r0.eer, "trained {} vs untrained {}", r.eer, r0.eer);
}

#[test]
fn random_unit_embeddings_are_at_chance() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let n = Normal::new(0.0f64, 1.0).unwrap();
    let (classes, per) = (20, 3);
    let emb: Vec<Vec<f64>> = (0..classes * per)
        .map(|_| {
            let v: Vec<f64> = (0..EMBED_DIM).map(|_| n.sample(&mut rng)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.into_iter().map(|x| x / norm).collect()
        })
        .collect();
    let mut s = ScoreSet::default();
    for i in 0..emb.len() {
        for j in i + 1..emb.len() {
            let c: f64 = emb[i].iter().zip(&emb[j]).map(|(a, b)| a * b).sum();
            if i / per == j / per {
                s.genuine.push(c);
            } else {
                s.impostor.push(c);
            }
        }
    }
    let (eer, _) = compute_eer(&s).unwrap();
    assert!((eer - 0.5).abs() <= 0.1, "eer {eer}");
}

#[test]
fn training_is_reproducible() {
    let (train, test) = split(4, 4, NARROW, 13);
    let cfg = FvrConfig {
        epochs: 2,
        batch_classes: 2,
        batch_samples: 2,
        ..FvrConfig::default()
    };
    let a = train_fvr(&train, &test, None, &cfg).unwrap();
    let b = train_fvr(&train, &test, None, &cfg).unwrap();
    assert_eq!(a.scores, b.scores);
    assert_eq!(a.eer, b.eer);
    assert_eq!(compute_eer(&a.scores).unwrap().0, a.eer);
    for x in test.images.iter().take(3) {
        let e = a.model.embed(x).unwrap();
        assert_eq!(e.len(), EMBED_DIM);
        let n: f32 = e.iter().map(|v| v * v).sum::<f32>().sqrt();
        assert!((n - 1.0).abs() < 1e-5);
    }
    let fresh = FvrModel::new(64, 144, 0);
    assert_ne!(fresh.embed(&test.images[0]).unwrap(), a.model.embed(&test.images[0]).unwrap());
}
