//! The autodiff core in isolation: record a forward pass on a tape, take
//! gradients, and differentiate through a gradient norm — the mechanism the
//! discriminator's gradient penalty relies on.
//!
//! Run with: cargo run --release --example second_order_gradients

use dtgan::tensor::{finite_diff_grad, Tape, Tensor};
use dtgan::Result;

fn main() -> Result<()> {
    // d/dx sum(x^2) = 2x
    let x = Tensor::from_vec(vec![1.0, 2.0, 3.0], &[3]).requires_grad(true);
    let tape = Tape::new();
    let xw = tape.watch(&x);
    let loss = xw.mul(&xw)?.sum_all()?;
    let grad = tape.backward(&loss, &[&xw], false)?.remove(0);
    println!("d sum(x^2)/dx at [1,2,3]  = {:?}", grad.data());

    // The same gradient from central finite differences.
    let fd = finite_diff_grad(&|t: &Tensor| t.mul(t)?.sum_all(), &x, 1e-5)?;
    println!("finite-difference estimate = {:?}", fd.data());

    // Second order: penalty = ||d f/d x||^4 for f = sum(tanh(x) * x),
    // differentiated again with respect to x. The first backward runs with
    // create_graph so its result stays on the tape.
    let tape = Tape::new();
    let xw = tape.watch(&x);
    let f = xw.tanh()?.mul(&xw)?.sum_all()?;
    let gx = tape.backward(&f, &[&xw], true)?.remove(0);
    assert!(gx.is_attached(), "gradient is itself differentiable");
    let penalty = gx.l2_norm_trailing(1)?.pow_scalar(4.0)?;
    let second = tape.backward(&penalty, &[&xw], false)?.remove(0);
    println!("d ||grad f||^4 / dx        = {:?}", second.data());
    Ok(())
}
