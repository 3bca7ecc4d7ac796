//! Deterministic synthetic checkpoints for tests, benchmarks and demos.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::checkpoint::{Checkpoint, Tensor};
use crate::spectral::{to_row_major, Matrix};

/// Base, fine-tuned checkpoints and, where the construction defines one, the conflict-free
/// target the merge should approach.
#[derive(Debug, Clone)]
pub struct Fixture {
    pub base: Checkpoint,
    pub finetuned: Vec<Checkpoint>,
    pub target: Option<Checkpoint>,
}

fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| scale * rng.sample::<f64, _>(StandardNormal))
}

fn orthogonal(rng: &mut ChaCha8Rng, n: usize) -> Matrix {
    gaussian(rng, n, n, 1.0).qr().q()
}

/// `u * [diag(values) | 0] * v^T`, zero-padded to `rows x cols`.
fn from_singular(u: &Matrix, values: &[f64], v: &Matrix) -> Matrix {
    let (rows, cols) = (u.nrows(), v.nrows());
    let mut s = Matrix::zeros(rows, cols);
    for (i, &x) in values.iter().enumerate().take(rows.min(cols)) {
        s[(i, i)] = x;
    }
    u * s * v.transpose()
}

fn tensor(m: &Matrix) -> Tensor {
    let data = to_row_major(m).into_iter().map(|v| v as f32).collect();
    Tensor::new(vec![m.nrows(), m.ncols()], data).expect("fixture shape")
}

fn vector(v: &[f64]) -> Tensor {
    Tensor::new(vec![v.len()], v.iter().map(|&x| x as f32).collect()).expect("fixture shape")
}

fn add(a: &Tensor, delta: &[f64]) -> Tensor {
    let data = a.data().iter().zip(delta).map(|(&x, &d)| (x as f64 + d) as f32).collect();
    Tensor::new(a.shape().to_vec(), data).expect("fixture shape")
}

fn with_source(mut c: Checkpoint, name: &str) -> Checkpoint {
    c.meta.insert("source".into(), name.into());
    c
}

/// Settings for [`planted_conflict`].
#[derive(Debug, Clone, Copy)]
pub struct PlantedConflict {
    pub layers: usize,
    pub dim: usize,
    pub tasks: usize,
    pub seed: u64,
    /// Per-entry std of the task-specific noise in conflicted and middle layers.
    pub noise: f64,
    /// Per-entry std of the task-specific noise in agreeing deep layers.
    pub deep_noise: f64,
}

impl Default for PlantedConflict {
    fn default() -> Self {
        Self {
            layers: 6,
            dim: 16,
            tasks: 2,
            seed: 0,
            noise: 0.3,
            deep_noise: 0.01,
        }
    }
}

/// A block stack with conflicting task deltas in the shallow third, a shared low-rank
/// update commuting with the base in the deeper layers, and near-exact agreement in the
/// deepest third.
///
/// Each block `i` holds `blocks.{i}.attn.weight` (`d x d`), `blocks.{i}.mlp.weight`
/// (`d x 2d`) and `blocks.{i}.attn.bias`. `embed.weight` and `head.weight` are unchanged by
/// fine-tuning. The target is `base + shared`, where `shared` is the component common to
/// every task (zero in the shallow layers).
pub fn planted_conflict(cfg: PlantedConflict) -> Fixture {
    let PlantedConflict { layers, dim: d, tasks, seed, noise, deep_noise } = cfg;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut base = Checkpoint::new();
    let mut target = Checkpoint::new();
    let mut fts = vec![Checkpoint::new(); tasks];

    let embed = tensor(&gaussian(&mut rng, 32, d, 0.1));
    let head = tensor(&gaussian(&mut rng, 4, d, 0.1));
    for c in std::iter::once(&mut base).chain(std::iter::once(&mut target)).chain(fts.iter_mut()) {
        c.insert("embed.weight", embed.clone()).unwrap();
    }

    let third = layers.div_ceil(3);
    for l in 0..layers {
        let shallow = l < third;
        let deep = l >= layers - third;
        let sigma = if deep { deep_noise } else { noise };
        let shapes = [("attn.weight", d, d), ("mlp.weight", d, 2 * d)];
        for (suffix, rows, cols) in shapes {
            let name = format!("blocks.{l}.{suffix}");
            let u = orthogonal(&mut rng, rows);
            let v = if rows == cols { u.clone() } else { orthogonal(&mut rng, cols) };
            let lambda: Vec<f64> = (0..rows.min(cols)).map(|_| rng.random_range(0.5..1.5)).collect();
            let theta0 = from_singular(&u, &lambda, &v);

            let shared = if shallow {
                Matrix::zeros(rows, cols)
            } else {
                let g = [rng.random_range(0.8..1.2), rng.random_range(0.4..0.6)];
                from_singular(&u, &g, &v)
            };
            let conflict = gaussian(&mut rng, rows, cols, 1.0 / (d as f64).sqrt());

            let b = tensor(&theta0);
            for (i, ft) in fts.iter_mut().enumerate() {
                let sign = if i % 2 == 0 { 1.0 } else { -1.0 };
                let mut delta = &shared + gaussian(&mut rng, rows, cols, sigma / (d as f64).sqrt());
                if shallow {
                    delta += sign * &conflict;
                }
                ft.insert(name.clone(), add(&b, &to_row_major(&delta))).unwrap();
            }
            target.insert(name.clone(), add(&b, &to_row_major(&shared))).unwrap();
            base.insert(name, b).unwrap();
        }

        let name = format!("blocks.{l}.attn.bias");
        let b: Vec<f64> = (0..d).map(|_| 0.1 * rng.sample::<f64, _>(StandardNormal)).collect();
        let b = vector(&b);
        let shared: Vec<f64> = if shallow {
            vec![0.0; d]
        } else {
            (0..d).map(|_| 0.1 * rng.sample::<f64, _>(StandardNormal)).collect()
        };
        for ft in fts.iter_mut() {
            let delta: Vec<f64> = shared
                .iter()
                .map(|&s| s + 0.1 * sigma * rng.sample::<f64, _>(StandardNormal))
                .collect();
            ft.insert(name.clone(), add(&b, &delta)).unwrap();
        }
        target.insert(name.clone(), add(&b, &shared)).unwrap();
        base.insert(name, b).unwrap();
    }

    for c in std::iter::once(&mut base).chain(std::iter::once(&mut target)).chain(fts.iter_mut()) {
        c.insert("head.weight", head.clone()).unwrap();
    }
    Fixture {
        base: with_source(base, "planted-base"),
        finetuned: fts
            .into_iter()
            .enumerate()
            .map(|(i, c)| with_source(c, &format!("planted-task-{i}")))
            .collect(),
        target: Some(with_source(target, "planted-target")),
    }
}

/// One task whose delta in block `l` (1-based) is `q diag(exp(-0.1 l j)) q^T`: all deltas
/// commute with a fixed base, and their effective rank falls strictly with depth.
pub fn depth_monotone(layers: usize, dim: usize, seed: u64) -> Fixture {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let q = orthogonal(&mut rng, dim);
    let lambda: Vec<f64> = (0..dim).map(|j| 1.0 + 0.5 * (j as f64 / dim as f64)).collect();
    let theta0 = from_singular(&q, &lambda, &q);
    let mut base = Checkpoint::new();
    let mut ft = Checkpoint::new();
    for l in 0..layers {
        let kappa = 0.1 * (l + 1) as f64;
        let g: Vec<f64> = (0..dim).map(|j| 0.1 * (-kappa * j as f64).exp()).collect();
        let delta = from_singular(&q, &g, &q);
        let name = format!("blocks.{l}.weight");
        let b = tensor(&theta0);
        ft.insert(name.clone(), add(&b, &to_row_major(&delta))).unwrap();
        base.insert(name, b).unwrap();
    }
    Fixture {
        base: with_source(base, "monotone-base"),
        finetuned: vec![with_source(ft, "monotone-task")],
        target: None,
    }
}

/// Unstructured Gaussian checkpoints: per block a square and a rectangular matrix, a bias,
/// plus skip-listed embedding and head tensors.
pub fn random_tasks(layers: usize, dim: usize, tasks: usize, seed: u64) -> Fixture {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut shapes: Vec<(String, Vec<usize>)> = vec![("embed.weight".into(), vec![20, dim])];
    for l in 0..layers {
        shapes.push((format!("blocks.{l}.attn.weight"), vec![dim, dim]));
        shapes.push((format!("blocks.{l}.attn.bias"), vec![dim]));
        shapes.push((format!("blocks.{l}.mlp.weight"), vec![2 * dim, dim]));
        shapes.push((format!("blocks.{l}.norm.weight"), vec![dim]));
    }
    shapes.push(("head.weight".into(), vec![3, dim]));

    let mut base = Checkpoint::new();
    let mut fts = vec![Checkpoint::new(); tasks];
    for (name, shape) in &shapes {
        let n: usize = shape.iter().product();
        let b: Vec<f32> = (0..n).map(|_| rng.sample::<f32, _>(StandardNormal) / dim as f32).collect();
        let b = Tensor::new(shape.clone(), b).unwrap();
        for ft in fts.iter_mut() {
            let delta: Vec<f64> = (0..n).map(|_| 0.02 * rng.sample::<f64, _>(StandardNormal)).collect();
            ft.insert(name.clone(), add(&b, &delta)).unwrap();
        }
        base.insert(name.clone(), b).unwrap();
    }
    Fixture {
        base: with_source(base, "random-base"),
        finetuned: fts
            .into_iter()
            .enumerate()
            .map(|(i, c)| with_source(c, &format!("random-task-{i}")))
            .collect(),
        target: None,
    }
}

/// `sqrt(sum (a - b)^2)` over every tensor, in `f64`. Checkpoints must be aligned.
pub fn parameter_distance(a: &Checkpoint, b: &Checkpoint) -> f64 {
    a.tensors
        .iter()
        .map(|(name, t)| {
            t.data()
                .iter()
                .zip(b.tensors[name].data())
                .map(|(&x, &y)| (x as f64 - y as f64).powi(2))
                .sum::<f64>()
        })
        .sum::<f64>()
        .sqrt()
}
