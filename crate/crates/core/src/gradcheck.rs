//! Finite-difference checks of the whole model: every parameter tensor is
//! probed through the summed five-part loss of one training step.

use patchsum_tensor::gradcheck::{check, GradCheckConfig, GradReport};
use patchsum_tensor::Tensor;

use crate::model::Model;
use crate::schedule::step_losses;
use crate::synth::SynthSample;
use crate::Result;

/// Relative-error floor for whole-model checks. The central difference of an
/// O(10) loss at `h = 1e-5` resolves about 1e-10 absolutely, so gradients
/// below this are compared with an absolute tolerance of `floor · tolerance`.
/// Attention key biases, whose gradient is identically zero, land there.
pub const MODEL_FLOOR: f64 = 1e-5;

/// The whole-model comparison settings: default step and tolerance with
/// [`MODEL_FLOOR`].
pub fn model_config() -> GradCheckConfig {
    GradCheckConfig { floor: MODEL_FLOOR, ..GradCheckConfig::default() }
}

/// Result for one named parameter tensor.
#[derive(Debug, Clone)]
pub struct ParamCheck {
    pub name: String,
    pub report: GradReport,
}

/// Inputs of one model-level check.
#[derive(Debug, Clone)]
pub struct ModelProbe<'a> {
    pub region: &'a [SynthSample],
    pub paired: &'a [SynthSample],
    pub beta: f64,
    pub mlm_rate: f64,
    /// Seed and step of the masking and negative-sampling streams, held
    /// fixed across every perturbed evaluation.
    pub seed: u64,
    pub rng_step: usize,
    /// Coordinates probed per tensor, largest analytic magnitude first.
    pub per_param: usize,
}

/// Compares analytic and central-difference gradients of the step loss for
/// every parameter of `model`. Parameter values are restored afterwards.
///
/// Probing the largest-magnitude coordinates keeps the comparison above the
/// rounding noise of an O(1) loss while still touching every tensor.
pub fn model_gradcheck(model: &Model, probe: &ModelProbe<'_>, cfg: GradCheckConfig) -> Result<Vec<ParamCheck>> {
    let params: Vec<_> = model.params().iter().cloned().collect();
    let originals: Vec<Tensor> = params.iter().map(|p| p.get()).collect();
    let eval = |inputs: &[Tensor]| -> Result<Tensor> {
        for (p, t) in params.iter().zip(inputs) {
            p.set_tensor(t.clone());
        }
        step_losses(model, probe.region, probe.paired, probe.beta, probe.mlm_rate, probe.seed, probe.rng_step).map(|l| l.total)
    };

    let result = (|| -> Result<GradReport> {
        model.params().zero_grad();
        eval(&originals)?.backward()?;
        let coords: Vec<Option<Vec<usize>>> = originals
            .iter()
            .map(|t| {
                let g = t.grad_or_zeros();
                let mut order: Vec<usize> = (0..g.len()).collect();
                order.sort_by(|&a, &b| g[b].abs().total_cmp(&g[a].abs()).then(a.cmp(&b)));
                order.truncate(probe.per_param);
                Some(order)
            })
            .collect();
        model.params().zero_grad();
        check(eval, &originals, &coords, cfg)
    })();
    for (p, t) in params.iter().zip(&originals) {
        p.set_tensor(t.clone());
    }
    model.params().zero_grad();
    let report = result?;

    let mut out: Vec<ParamCheck> =
        params.iter().map(|p| ParamCheck { name: p.name().to_string(), report: GradReport::default() }).collect();
    for s in report.samples {
        out[s.input].report.samples.push(s);
    }
    Ok(out)
}
