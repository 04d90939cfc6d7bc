//! Central finite-difference checks of analytic gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Result, TensorError};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy)]
pub struct GradCheckConfig {
    /// Perturbation half-width.
    pub h: f64,
    /// Largest accepted relative error.
    pub tolerance: f64,
    /// Denominator floor so that near-zero gradients are compared absolutely.
    pub floor: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self { h: 1e-5, tolerance: 1e-4, floor: 1e-6 }
    }
}

/// One compared coordinate.
#[derive(Debug, Clone, PartialEq)]
pub struct GradSample {
    pub input: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone, Default)]
pub struct GradReport {
    pub samples: Vec<GradSample>,
}

impl GradReport {
    pub fn max_rel_error(&self) -> f64 {
        self.samples.iter().map(|s| s.rel_error).fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&GradSample> {
        self.samples.iter().max_by(|a, b| a.rel_error.total_cmp(&b.rel_error))
    }

    pub fn passes(&self, tolerance: f64) -> bool {
        self.samples.iter().all(|s| s.rel_error <= tolerance)
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares the gradient of the scalar `f(inputs)` against central
/// differences.
///
/// `coords[i]` lists the flat coordinates of `inputs[i]` to probe; `None`
/// probes all of them. Every input must be a `param` leaf.
pub fn check<F, E>(
    f: F,
    inputs: &[Tensor],
    coords: &[Option<Vec<usize>>],
    cfg: GradCheckConfig,
) -> std::result::Result<GradReport, E>
where
    F: Fn(&[Tensor]) -> std::result::Result<Tensor, E>,
    E: From<TensorError>,
{
    assert_eq!(inputs.len(), coords.len(), "one coordinate list per input");
    for t in inputs {
        t.zero_grad();
    }
    let out = f(inputs)?;
    out.backward()?;
    let analytic: Vec<Vec<f64>> = inputs.iter().map(|t| t.grad().unwrap_or_else(|| vec![0.0; t.numel()])).collect();
    for t in inputs {
        t.zero_grad();
    }

    let mut report = GradReport::default();
    for (which, (input, probe)) in inputs.iter().zip(coords).enumerate() {
        let indices: Vec<usize> = match probe {
            Some(list) => list.clone(),
            None => (0..input.numel()).collect(),
        };
        for index in indices {
            let eval = |delta: f64| -> std::result::Result<f64, E> {
                let mut data = input.data().to_vec();
                data[index] += delta;
                let mut perturbed = inputs.to_vec();
                perturbed[which] = input.with_data(data)?;
                Ok(f(&perturbed)?.item())
            };
            let numeric = (eval(cfg.h)? - eval(-cfg.h)?) / (2.0 * cfg.h);
            let a = analytic[which][index];
            report.samples.push(GradSample {
                input: which,
                index,
                analytic: a,
                numeric,
                rel_error: relative_error(a, numeric, cfg.floor),
            });
        }
    }
    Ok(report)
}

// ---- per-op suite -----------------------------------------------------------

pub fn rand_param(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-1.5..1.5)).collect();
    Tensor::param(shape.to_vec(), data).unwrap()
}

fn rand_const(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Tensor::constant(shape.to_vec(), data).unwrap()
}

/// Reduces any tensor to a scalar with a fixed random weighting so every
/// output coordinate contributes a distinct amount.
pub fn probe(t: &Tensor, seed: u64) -> Result<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = rand_const(&mut rng, t.shape());
    Ok(t.mul(&w)?.sum())
}

pub type Case = (Vec<Tensor>, Box<dyn Fn(&[Tensor]) -> Result<Tensor>>);

/// Inputs and scalar objective exercising one listed op.
pub fn op_case(op: &str, rng: &mut ChaCha8Rng) -> Case {
    let r = |rng: &mut ChaCha8Rng, s: &[usize]| rand_param(rng, s);
    match op {
        "matmul" => (vec![r(rng, &[3, 4]), r(rng, &[4, 2])], Box::new(|x| probe(&x[0].matmul(&x[1])?, 1))),
        "matmul_nt" => (vec![r(rng, &[3, 4]), r(rng, &[5, 4])], Box::new(|x| probe(&x[0].matmul_nt(&x[1])?, 2))),
        "transpose" => (vec![r(rng, &[3, 4])], Box::new(|x| probe(&x[0].transpose()?, 3))),
        "reshape" => (vec![r(rng, &[3, 4])], Box::new(|x| probe(&x[0].reshape(vec![2, 6])?, 4))),
        "add" => (vec![r(rng, &[2, 3]), r(rng, &[2, 3])], Box::new(|x| probe(&x[0].add(&x[1])?, 5))),
        "sub" => (vec![r(rng, &[2, 3]), r(rng, &[2, 3])], Box::new(|x| probe(&x[0].sub(&x[1])?, 6))),
        "mul" => (vec![r(rng, &[2, 3]), r(rng, &[2, 3])], Box::new(|x| probe(&x[0].mul(&x[1])?, 7))),
        "scale" => (vec![r(rng, &[2, 3])], Box::new(|x| probe(&x[0].scale(-0.7), 8))),
        "add_scalar" => (vec![r(rng, &[2, 3])], Box::new(|x| probe(&x[0].add_scalar(0.3).mul(&x[0])?, 9))),
        "add_row" => (vec![r(rng, &[3, 4]), r(rng, &[4])], Box::new(|x| probe(&x[0].add_row(&x[1])?, 10))),
        "mul_scalar_tensor" => (vec![r(rng, &[2, 3]), r(rng, &[1])], Box::new(|x| probe(&x[0].mul_scalar_tensor(&x[1])?, 11))),
        "gelu" => (vec![r(rng, &[2, 5])], Box::new(|x| probe(&x[0].gelu(), 12))),
        "sigmoid" => (vec![r(rng, &[2, 5])], Box::new(|x| probe(&x[0].sigmoid(), 13))),
        "softmax_rows" => (vec![r(rng, &[3, 5])], Box::new(|x| probe(&x[0].softmax_rows()?, 14))),
        "softmax_rows_masked" => (
            vec![r(rng, &[2, 4])],
            Box::new(|x| {
                let mask = [true, false, true, true, false, true, true, true];
                probe(&x[0].softmax_rows_masked(&mask)?, 15)
            }),
        ),
        "layer_norm" => {
            (vec![r(rng, &[3, 6]), r(rng, &[6]), r(rng, &[6])], Box::new(|x| probe(&x[0].layer_norm(&x[1], &x[2], 1e-5)?, 16)))
        }
        "embedding" => (vec![r(rng, &[5, 3])], Box::new(|x| probe(&x[0].embedding(&[4, 0, 4, 2])?, 17))),
        "concat_cols" => {
            (vec![r(rng, &[2, 3]), r(rng, &[2, 2])], Box::new(|x| probe(&Tensor::concat_cols(&[&x[0], &x[1]])?, 18)))
        }
        "concat_rows" => {
            (vec![r(rng, &[2, 3]), r(rng, &[1, 3])], Box::new(|x| probe(&Tensor::concat_rows(&[&x[0], &x[1]])?, 19)))
        }
        "slice_cols" => (vec![r(rng, &[3, 6])], Box::new(|x| probe(&x[0].slice_cols(2, 3)?, 20))),
        "gather_rows" => (vec![r(rng, &[5, 3])], Box::new(|x| probe(&x[0].gather_rows(&[3, 1, 3])?, 21))),
        "gather_elements" => (vec![r(rng, &[2, 3])], Box::new(|x| probe(&x[0].gather_elements(&[5, 0, 2, 2], vec![2, 2])?, 22))),
        "sum" => (vec![r(rng, &[2, 3])], Box::new(|x| Ok(x[0].mul(&x[0])?.sum()))),
        "mean" => (vec![r(rng, &[2, 3])], Box::new(|x| Ok(x[0].mul(&x[0])?.mean()))),
        "normalize_sum" => {
            let data = (0..5).map(|_| rng.gen_range(0.2..1.0)).collect();
            (vec![Tensor::param(vec![1, 5], data).unwrap()], Box::new(|x| probe(&x[0].normalize_sum()?, 23)))
        }
        "l2_normalize_rows" => (vec![r(rng, &[3, 4])], Box::new(|x| probe(&x[0].l2_normalize_rows(1e-12)?, 24))),
        "minmax_normalize" => (vec![r(rng, &[1, 6])], Box::new(|x| probe(&x[0].minmax_normalize()?, 25))),
        "cross_entropy_rows" => (vec![r(rng, &[3, 5])], Box::new(|x| x[0].cross_entropy_rows(&[4, 0, 2]))),
        "binary_cross_entropy" => {
            (vec![r(rng, &[2, 3])], Box::new(|x| x[0].sigmoid().binary_cross_entropy(&[1.0, 0.0, 1.0, 1.0, 0.0, 0.0], 1e-7)))
        }
        other => unreachable!("no gradient case for op {other}"),
    }
}

/// Outcome of checking one op at one random point.
#[derive(Debug, Clone)]
pub struct OpCheck {
    pub op: &'static str,
    pub point: u64,
    pub report: GradReport,
}

/// Checks every op of [`crate::fused_ops`] at `points` random points.
pub fn op_suite(points: u64, cfg: GradCheckConfig) -> Result<Vec<OpCheck>> {
    let mut out = Vec::new();
    for &op in crate::fused_ops() {
        for point in 0..points {
            let mut rng = ChaCha8Rng::seed_from_u64(1000 + point);
            let (inputs, f) = op_case(op, &mut rng);
            let coords = vec![None; inputs.len()];
            out.push(OpCheck { op, point, report: check(|x| f(x), &inputs, &coords, cfg)? });
        }
    }
    Ok(out)
}
