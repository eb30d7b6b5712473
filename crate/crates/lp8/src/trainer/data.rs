//! Built-in synthetic classification task: seeded Gaussian blobs in 16
//! dimensions, four classes, each class split across an *antipodal* pair of
//! clusters (`+R d_c` and `-R d_c` along its own direction). No linear
//! readout of the raw features separates the classes, so the hidden layers
//! must actually learn rectified pair features, and that learning rides on
//! faithful gradient propagation. An optional per-sample log-normal scale
//! perturbation makes the activation (and hence gradient) magnitudes
//! heavy-tailed.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::matrix::Matrix;

#[derive(Debug, Clone, PartialEq)]
pub struct TaskConfig {
    pub dim: usize,
    pub classes: usize,
    /// Antipodal cluster pairs per class; `classes * directions_per_class`
    /// orthonormal directions must fit in `dim`.
    pub directions_per_class: usize,
    pub train_samples: usize,
    pub test_samples: usize,
    /// Distance of each cluster center from the origin.
    pub mean_radius: f64,
    pub noise_sigma: f64,
    /// Std of the per-sample input scale in octaves; 0 disables the
    /// heavy-tail perturbation.
    pub input_scale_log2_std: f64,
    /// Fraction of *training* labels flipped to a random other class; test
    /// labels stay clean. Resisting the pull of these samples requires the
    /// small confident-correct gradient mass, which is where coarse
    /// quantization hurts.
    pub label_noise: f64,
}

impl Default for TaskConfig {
    fn default() -> Self {
        TaskConfig {
            dim: 16,
            classes: 4,
            directions_per_class: 2,
            train_samples: 4096,
            test_samples: 1024,
            mean_radius: 4.5,
            noise_sigma: 1.0,
            input_scale_log2_std: 0.0,
            label_noise: 0.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub train_x: Matrix,
    pub train_y: Vec<usize>,
    pub test_x: Matrix,
    pub test_y: Vec<usize>,
}

fn normal_vec(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    (0..dim).map(|_| StandardNormal.sample(rng)).collect()
}

fn normalize(v: &mut [f64]) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    for x in v {
        *x /= n;
    }
}

fn project_out(v: &mut [f64], dir: &[f64]) {
    let dot: f64 = v.iter().zip(dir).map(|(a, b)| a * b).sum();
    for (x, &d) in v.iter_mut().zip(dir) {
        *x -= dot * d;
    }
}

impl Dataset {
    pub fn generate(config: &TaskConfig, seed: u64) -> Dataset {
        let num_dirs = config.classes * config.directions_per_class;
        assert!(
            config.classes >= 2 && config.directions_per_class >= 1 && num_dirs <= config.dim,
            "need one orthonormal direction per cluster pair"
        );
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(0xda7a);

        // orthonormal direction bank; class c owns directions
        // c*directions_per_class .. (c+1)*directions_per_class
        let mut dirs: Vec<Vec<f64>> = Vec::with_capacity(num_dirs);
        for _ in 0..num_dirs {
            let mut d = normal_vec(&mut rng, config.dim);
            for prev in &dirs {
                project_out(&mut d, prev);
            }
            normalize(&mut d);
            dirs.push(d);
        }

        let r = config.mean_radius;
        let mut sample_split = |n: usize| {
            let mut x = Matrix::zeros(n, config.dim);
            let mut y = Vec::with_capacity(n);
            for i in 0..n {
                let label = i % config.classes;
                let scale = if config.input_scale_log2_std > 0.0 {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    (z * config.input_scale_log2_std).exp2()
                } else {
                    1.0
                };
                // one of the class's antipodal cluster pairs, either sign
                let which = rng.random_range(0..config.directions_per_class);
                let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
                let dir = &dirs[label * config.directions_per_class + which];
                let row_base = i * config.dim;
                for (j, &d) in dir.iter().enumerate() {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    x.data_mut()[row_base + j] = scale * (sign * r * d + config.noise_sigma * z);
                }
                y.push(label);
            }
            (x, y)
        };

        let (train_x, mut train_y) = sample_split(config.train_samples);
        let (test_x, test_y) = sample_split(config.test_samples);
        if config.label_noise > 0.0 {
            for y in &mut train_y {
                if rng.random::<f64>() < config.label_noise {
                    let shift = rng.random_range(1..config.classes);
                    *y = (*y + shift) % config.classes;
                }
            }
        }
        Dataset {
            train_x,
            train_y,
            test_x,
            test_y,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generation_is_deterministic() {
        let cfg = TaskConfig::default();
        let a = Dataset::generate(&cfg, 3);
        let b = Dataset::generate(&cfg, 3);
        assert_eq!(a.train_x.data(), b.train_x.data());
        assert_eq!(a.test_y, b.test_y);
        let c = Dataset::generate(&cfg, 4);
        assert_ne!(a.train_x.data(), c.train_x.data());
    }

    #[test]
    fn shapes_and_balance() {
        let cfg = TaskConfig::default();
        let d = Dataset::generate(&cfg, 0);
        assert_eq!(d.train_x.rows(), 4096);
        assert_eq!(d.train_x.cols(), 16);
        assert_eq!(d.test_x.rows(), 1024);
        let count = d.train_y.iter().filter(|&&y| y == 2).count();
        assert_eq!(count, 1024);
    }

    #[test]
    fn heavy_tail_widens_magnitude_spread() {
        let base = Dataset::generate(&TaskConfig::default(), 1);
        let heavy = Dataset::generate(
            &TaskConfig {
                input_scale_log2_std: 4.0,
                ..TaskConfig::default()
            },
            1,
        );
        let spread = |x: &Matrix| {
            let max = x.data().iter().fold(0.0f64, |m, &v| m.max(v.abs()));
            let min = x
                .data()
                .iter()
                .filter(|v| **v != 0.0)
                .fold(f64::MAX, |m, &v| m.min(v.abs()));
            (max / min).log2()
        };
        assert!(spread(&heavy.train_x) > spread(&base.train_x) + 4.0);
    }
}
