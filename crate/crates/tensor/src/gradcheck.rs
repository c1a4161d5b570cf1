//! Central finite-difference checks of reverse-mode gradients.
//!
//! The checker only evaluates the loss forward (with perturbed leaf values);
//! it never consults any operation's backward rule, so it serves as an
//! independent oracle for the analytic gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Result, TensorError};
use crate::tensor::{no_grad, Tensor};

/// How perturbation directions are drawn.
#[derive(Clone, Copy, Debug)]
pub enum Directions {
    /// Dense random unit-variance directions across all leaves jointly.
    Random(usize),
    /// Single randomly chosen scalar coordinates.
    Coordinates(usize),
}

#[derive(Clone, Copy, Debug)]
pub struct GradCheck {
    pub directions: Directions,
    pub step: f64,
    /// Denominator floor so derivatives that are both ~0 compare absolutely.
    pub floor: f64,
    pub seed: u64,
}

impl Default for GradCheck {
    fn default() -> Self {
        GradCheck { directions: Directions::Random(20), step: 1e-5, floor: 1e-6, seed: 0x5eed }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_err: f64,
    /// (analytic, numeric) directional derivatives of the worst direction.
    pub worst: (f64, f64),
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err < tol
    }
}

pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

impl GradCheck {
    pub fn new(directions: Directions) -> Self {
        GradCheck { directions, ..Default::default() }
    }

    pub fn seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    /// Checks `d loss / d leaves` where `eval` recomputes the loss from the
    /// current values of `leaves` (which must be trainable leaves). Leaf
    /// values are restored afterwards; leaf gradients are reset.
    pub fn run(&self, leaves: &[Tensor<f64>], eval: impl Fn() -> Result<Tensor<f64>>) -> Result<GradCheckReport> {
        if leaves.iter().any(|l| !l.is_leaf() || !l.requires_grad()) {
            return Err(TensorError::Contract("gradient check needs trainable leaves".into()));
        }
        leaves.iter().for_each(|l| l.zero_grad());
        eval()?.backward()?;
        let analytic: Vec<Vec<f64>> =
            leaves.iter().map(|l| l.grad().unwrap_or_else(|| vec![0.0; l.numel()])).collect();
        leaves.iter().for_each(|l| l.zero_grad());
        let originals: Vec<Vec<f64>> = leaves.iter().map(|l| l.to_vec()).collect();
        let total: usize = leaves.iter().map(|l| l.numel()).sum();

        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let count = match self.directions {
            Directions::Random(n) | Directions::Coordinates(n) => n,
        };
        let mut report = GradCheckReport { checked: 0, max_rel_err: 0.0, worst: (0.0, 0.0) };
        for _ in 0..count {
            let dir: Vec<Vec<f64>> = match self.directions {
                Directions::Random(_) => leaves
                    .iter()
                    .map(|l| (0..l.numel()).map(|_| rng.gen_range(-1.0..1.0)).collect())
                    .collect(),
                Directions::Coordinates(_) => {
                    let mut pick = rng.gen_range(0..total);
                    leaves
                        .iter()
                        .map(|l| {
                            let mut v = vec![0.0; l.numel()];
                            if pick < l.numel() {
                                v[pick] = 1.0;
                                pick = usize::MAX;
                            } else if pick != usize::MAX {
                                pick -= l.numel();
                            }
                            v
                        })
                        .collect()
                }
            };
            let predicted: f64 =
                analytic.iter().zip(&dir).flat_map(|(g, d)| g.iter().zip(d)).map(|(g, d)| g * d).sum();
            let eval_at = |sign: f64| -> Result<f64> {
                for ((leaf, orig), d) in leaves.iter().zip(&originals).zip(&dir) {
                    let moved: Vec<f64> = orig.iter().zip(d).map(|(o, d)| o + sign * self.step * d).collect();
                    leaf.assign(&moved)?;
                }
                no_grad(|| eval().map(|t| t.item()))
            };
            let plus = eval_at(1.0);
            let minus = eval_at(-1.0);
            for (leaf, orig) in leaves.iter().zip(&originals) {
                leaf.assign(orig)?;
            }
            let numeric = (plus? - minus?) / (2.0 * self.step);
            let err = relative_error(predicted, numeric, self.floor);
            report.checked += 1;
            if err >= report.max_rel_err {
                report.max_rel_err = err;
                report.worst = (predicted, numeric);
            }
        }
        Ok(report)
    }
}
