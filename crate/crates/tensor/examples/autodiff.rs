//! Fits a two-feature logistic regression with the autodiff tensors, then
//! checks one gradient against central differences.

use patchsum_tensor::gradcheck::{check, GradCheckConfig};
use patchsum_tensor::{Result, Tensor};

fn main() -> Result<()> {
    // Points above the line y = x are positive.
    let xs = [[0.0, 1.0], [1.0, 2.0], [2.0, 2.5], [1.0, 0.0], [2.0, 1.0], [3.0, 2.0]];
    let ys = [1.0, 1.0, 1.0, 0.0, 0.0, 0.0];
    let x = Tensor::constant(vec![6, 2], xs.concat())?;

    let mut w = vec![0.0, 0.0];
    for step in 0..200 {
        let wt = Tensor::param(vec![2, 1], w.clone())?;
        let logits = x.matmul(&wt)?.reshape(vec![6])?;
        let loss = logits.sigmoid().binary_cross_entropy(&ys, 1e-12)?;
        loss.backward()?;
        let g = wt.grad().expect("parameter leaf");
        for (wi, gi) in w.iter_mut().zip(&g) {
            *wi -= 1.0 * gi;
        }
        if step % 50 == 0 {
            println!("step {step:3}  loss {:.4}  w = [{:+.3}, {:+.3}]", loss.item(), w[0], w[1]);
        }
    }

    let report = check(
        |inputs: &[Tensor]| -> Result<Tensor> {
            let logits = x.matmul(&inputs[0])?.reshape(vec![6])?;
            logits.sigmoid().binary_cross_entropy(&ys, 1e-12)
        },
        &[Tensor::param(vec![2, 1], w.clone())?],
        &[None],
        GradCheckConfig::default(),
    )?;
    println!("finite-difference check: max relative error {:.2e}", report.max_rel_error());
    Ok(())
}
