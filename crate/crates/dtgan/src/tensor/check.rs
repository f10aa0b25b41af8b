//! Finite-difference gradient oracle and the check harness built on it.

use super::{Tape, Tensor};
use crate::error::{Error, Result};

/// Central-difference gradient estimate of a scalar-valued function,
/// element by element: (f(x + δeᵢ) − f(x − δeᵢ)) / 2δ.
pub fn finite_diff_grad(
    f: &dyn Fn(&Tensor) -> Result<Tensor>,
    x: &Tensor,
    step: f64,
) -> Result<Tensor> {
    assert!(step > 0.0, "finite_diff_grad: step must be positive");
    let mut grad = vec![0.0; x.numel()];
    for i in 0..x.numel() {
        let mut plus = x.data().to_vec();
        let mut minus = plus.clone();
        plus[i] += step;
        minus[i] -= step;
        let fp = eval_scalar(f, &Tensor::from_vec(plus, x.shape()))?;
        let fm = eval_scalar(f, &Tensor::from_vec(minus, x.shape()))?;
        grad[i] = (fp - fm) / (2.0 * step);
    }
    Ok(Tensor::from_vec(grad, x.shape()))
}

fn eval_scalar(f: &dyn Fn(&Tensor) -> Result<Tensor>, x: &Tensor) -> Result<f64> {
    let y = f(x)?;
    if y.numel() != 1 {
        return Err(Error::invalid(format!(
            "finite_diff_grad: function output must be scalar, got shape {:?}",
            y.shape()
        )));
    }
    Ok(y.scalar_value())
}

/// One named gradient check: a scalar function of several inputs whose
/// analytic gradients are compared against central differences.
pub struct GradCheckItem {
    pub name: String,
    pub inputs: Vec<Tensor>,
    pub f: Box<dyn Fn(&Tape, &[Tensor]) -> Result<Tensor>>,
    pub step: f64,
    pub tolerance: f64,
}

impl GradCheckItem {
    pub fn new(
        name: impl Into<String>,
        inputs: Vec<Tensor>,
        f: impl Fn(&Tape, &[Tensor]) -> Result<Tensor> + 'static,
    ) -> Self {
        GradCheckItem {
            name: name.into(),
            inputs,
            f: Box::new(f),
            step: 1e-5,
            tolerance: 1e-4,
        }
    }

    pub fn with_tolerance(mut self, tol: f64) -> Self {
        self.tolerance = tol;
        self
    }

    pub fn with_step(mut self, step: f64) -> Self {
        self.step = step;
        self
    }

    /// Max relative error between analytic and finite-difference gradients
    /// across all inputs.
    pub fn run(&self) -> Result<f64> {
        let tape = Tape::new();
        let attached: Vec<Tensor> = self
            .inputs
            .iter()
            .map(|t| tape.watch(&t.detach().requires_grad(true)))
            .collect();
        let root = (self.f)(&tape, &attached)?;
        if root.numel() != 1 {
            return Err(Error::invalid(format!(
                "gradcheck '{}': root must be scalar, got {:?}",
                self.name,
                root.shape()
            )));
        }
        let refs: Vec<&Tensor> = attached.iter().collect();
        let analytic = tape.backward(&root, &refs, false)?;

        let mut max_rel = 0.0f64;
        for (idx, input) in self.inputs.iter().enumerate() {
            let others: Vec<Tensor> = self.inputs.clone();
            let f = &self.f;
            // Finite differences run detached: nothing is recorded, the
            // closure is just evaluated 2·numel times.
            let numeric = finite_diff_grad(
                &move |x: &Tensor| {
                    let tape = Tape::new();
                    let mut args: Vec<Tensor> = others.iter().map(|t| t.detach()).collect();
                    args[idx] = x.detach();
                    f(&tape, &args)
                },
                input,
                self.step,
            )?;
            for (&a, &n) in analytic[idx].data().iter().zip(numeric.data()) {
                let denom = a.abs().max(n.abs()).max(0.1);
                max_rel = max_rel.max((a - n).abs() / denom);
            }
        }
        Ok(max_rel)
    }
}

/// Outcome of running a batch of gradient checks.
pub struct GradCheckReport {
    pub lines: Vec<(String, f64, f64, bool)>,
}

impl GradCheckReport {
    pub fn run(items: &[GradCheckItem]) -> Result<GradCheckReport> {
        let mut lines = Vec::with_capacity(items.len());
        for item in items {
            let err = item.run()?;
            lines.push((item.name.clone(), err, item.tolerance, err < item.tolerance));
        }
        Ok(GradCheckReport { lines })
    }

    pub fn all_passed(&self) -> bool {
        self.lines.iter().all(|(_, _, _, ok)| *ok)
    }

    pub fn failures(&self) -> Vec<&str> {
        self.lines
            .iter()
            .filter(|(_, _, _, ok)| !ok)
            .map(|(name, _, _, _)| name.as_str())
            .collect()
    }
}
