use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::Token;
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::train::{masked_cross_entropy, AdamW};

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeConfig {
    pub folds: usize,
    pub seeds: usize,
    /// Full-batch optimizer steps per fold.
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            folds: 5,
            seeds: 5,
            epochs: 200,
            lr: 0.05,
            weight_decay: 1e-3,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeResult {
    /// Mean over seeds of the cross-validated top-1 accuracy.
    pub mean: f64,
    /// Sample standard deviation over seeds.
    pub std: f64,
    pub per_seed: Vec<f64>,
    pub classes: usize,
    pub n: usize,
}

const MIN_EXAMPLES: usize = 40;
const SPLIT_SALT: u64 = 0x9E37_79B9_7F4A_7C15;

fn standardize(x: &[Vec<f64>], train: &[usize]) -> (Vec<f64>, Vec<f64>) {
    let d = x[0].len();
    let n = train.len() as f64;
    let mut mean = vec![0.0; d];
    for &i in train {
        mean.iter_mut().zip(&x[i]).for_each(|(m, v)| *m += v / n);
    }
    let mut sd = vec![0.0; d];
    for &i in train {
        sd.iter_mut().zip(&x[i]).zip(&mean).for_each(|((s, v), m)| *s += (v - m) * (v - m) / n);
    }
    for s in &mut sd {
        *s = if *s > 1e-24 { s.sqrt() } else { 1.0 };
    }
    (mean, sd)
}

fn design(x: &[Vec<f64>], idx: &[usize], mean: &[f64], sd: &[f64]) -> Result<Tensor> {
    let d = mean.len();
    let data = idx
        .iter()
        .flat_map(|&i| (0..d).map(move |j| (x[i][j] - mean[j]) / sd[j]))
        .collect();
    Tensor::new(data, &[idx.len(), d])
}

fn fold_accuracy(x: &[Vec<f64>], y: &[usize], classes: usize, train: &[usize], test: &[usize], cfg: &ProbeConfig) -> Result<usize> {
    let d = x[0].len();
    let (mean, sd) = standardize(x, train);
    let xt = design(x, train, &mean, &sd)?;
    let targets: Vec<Token> = train.iter().map(|&i| y[i] as Token).collect();
    let all = vec![true; train.len()];
    let params = vec![
        ("probe.weight".to_string(), Tensor::param(vec![0.0; d * classes], &[d, classes])?),
        ("probe.bias".to_string(), Tensor::param(vec![0.0; classes], &[classes])?),
    ];
    let mut opt = AdamW::new(&params, 0.9, 0.999, 1e-8, cfg.weight_decay);
    for _ in 0..cfg.epochs {
        params.iter().for_each(|(_, p)| p.zero_grad());
        let logits = xt.linear(&params[0].1, Some(&params[1].1))?;
        masked_cross_entropy(&logits, &targets, &all)?.backward()?;
        opt.step(&params, cfg.lr)?;
    }
    let logits = design(x, test, &mean, &sd)?.linear(&params[0].1, Some(&params[1].1))?;
    let l = logits.data();
    let correct = test
        .iter()
        .enumerate()
        .filter(|&(r, &i)| {
            let row = &l[r * classes..(r + 1) * classes];
            let best = (0..classes).fold(0, |b, c| if row[c] > row[b] { c } else { b });
            best == y[i]
        })
        .count();
    Ok(correct)
}

/// Cross-validated softmax-regression probe on frozen embeddings.
///
/// For each seed the examples are shuffled and split into `folds` folds;
/// features are standardized with training-fold statistics. The per-seed
/// accuracy is the fraction of held-out predictions that are correct.
pub fn linear_probe(embeddings: &[Vec<f64>], labels: &[usize], cfg: &ProbeConfig) -> Result<ProbeResult> {
    let n = embeddings.len();
    if labels.len() != n {
        return Err(Error::Input(format!("{n} embeddings but {} labels", labels.len())));
    }
    if n < MIN_EXAMPLES {
        return Err(Error::Data(format!("probe needs at least {MIN_EXAMPLES} examples, got {n}")));
    }
    let d = embeddings[0].len();
    if d == 0 || embeddings.iter().any(|e| e.len() != d) {
        return Err(Error::Input("embeddings must share one non-zero width".into()));
    }
    if embeddings.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite embedding value".into()));
    }
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    let distinct = (0..classes).filter(|c| labels.contains(c)).count();
    if distinct < 2 {
        return Err(Error::Data(format!("probe needs at least two classes, found {distinct}")));
    }
    if classes > Token::MAX as usize + 1 {
        return Err(Error::Data(format!("{classes} classes exceed the supported maximum")));
    }
    if cfg.folds < 2 || cfg.folds > n || cfg.seeds == 0 || cfg.epochs == 0 {
        return Err(Error::config(format!(
            "probe: need 2 <= folds <= n and positive seeds/epochs, got folds={} seeds={} epochs={}",
            cfg.folds, cfg.seeds, cfg.epochs
        )));
    }
    let mut per_seed = Vec::with_capacity(cfg.seeds);
    for s in 0..cfg.seeds {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(SPLIT_SALT ^ s as u64));
        let mut correct = 0;
        for f in 0..cfg.folds {
            let (mut train, mut test) = (Vec::new(), Vec::new());
            for (k, &i) in order.iter().enumerate() {
                if k % cfg.folds == f { test.push(i) } else { train.push(i) }
            }
            correct += fold_accuracy(embeddings, labels, classes, &train, &test, cfg)?;
        }
        per_seed.push(correct as f64 / n as f64);
    }
    let mean = per_seed.iter().sum::<f64>() / per_seed.len() as f64;
    let std = if per_seed.len() > 1 {
        (per_seed.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / (per_seed.len() - 1) as f64).sqrt()
    } else {
        0.0
    };
    Ok(ProbeResult {
        mean,
        std,
        per_seed,
        classes,
        n,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn noise(n: usize, d: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| (0..d).map(|_| rng.random::<f64>() - 0.5).collect()).collect()
    }

    #[test]
    fn visible_bit_is_learned_perfectly() {
        let mut x = noise(60, 4, 1);
        let y: Vec<usize> = (0..60).map(|i| (i * 7 % 3 == 0) as usize).collect();
        for (row, &c) in x.iter_mut().zip(&y) {
            row[2] = c as f64;
        }
        let r = linear_probe(&x, &y, &ProbeConfig::default()).unwrap();
        assert_eq!(r.mean, 1.0);
        assert_eq!(r.std, 0.0);
    }

    #[test]
    fn random_labels_are_at_chance() {
        let n = 400;
        let x = noise(n, 8, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let y: Vec<usize> = (0..n).map(|_| rng.random_range(0..2)).collect();
        let r = linear_probe(&x, &y, &ProbeConfig { seeds: 3, epochs: 100, ..ProbeConfig::default() }).unwrap();
        let sigma = (0.25 / n as f64).sqrt();
        assert!((r.mean - 0.5).abs() <= 3.0 * sigma, "{r:?}");
        assert!(r.per_seed.iter().all(|a| (0.0..=1.0).contains(a)));
    }

    #[test]
    fn single_class_is_a_data_error() {
        let x = noise(50, 3, 4);
        assert!(matches!(linear_probe(&x, &[1; 50], &ProbeConfig::default()), Err(Error::Data(_))));
        assert!(matches!(linear_probe(&x[..10], &[0, 1].repeat(5), &ProbeConfig::default()), Err(Error::Data(_))));
    }
}
