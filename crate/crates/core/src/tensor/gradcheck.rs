//! Central-difference gradient checking.

use super::{Result, Tape, Tensor, TensorError, Var};

/// Fixed probe weights used to contract a non-scalar output to a scalar.
fn probe(len: usize) -> Vec<f64> {
    (0..len).map(|i| 1.0 + 0.5 * ((i + 1) as f64 * 0.7).sin()).collect()
}

fn evaluate<F>(f: &F, inputs: &[Tensor]) -> Result<Tensor>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    Ok(tape.value(out).clone())
}

/// Compares the tape gradient of `f` against central differences with the
/// given `step`, perturbing every coordinate of every input. Non-scalar
/// outputs are contracted with fixed probe weights after differencing.
///
/// Returns the largest `|analytic - numeric| / max(1, |numeric|)`.
pub fn grad_check<F>(f: F, inputs: &[Tensor], step: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let out = f(&mut tape, &vars)?;
    let scalar_out = tape.value(out).rank() == 0;
    let weights = if scalar_out {
        vec![1.0]
    } else {
        probe(tape.value(out).len())
    };
    let loss = if scalar_out {
        out
    } else {
        let shape = tape.shape(out).to_vec();
        let w = tape.constant(Tensor::from_parts(shape, weights.clone()));
        let prod = tape.mul(out, w)?;
        tape.sum(prod)?
    };
    tape.backward(loss)?;

    let mut worst: f64 = 0.0;
    let mut work = inputs.to_vec();
    for (which, var) in vars.iter().enumerate() {
        let analytic = match tape.grad(*var) {
            Some(g) => g.data().to_vec(),
            None => vec![0.0; inputs[which].len()],
        };
        for j in 0..inputs[which].len() {
            let orig = inputs[which].data()[j];
            work[which].data_mut()[j] = orig + step;
            let plus = evaluate(&f, &work)?;
            work[which].data_mut()[j] = orig - step;
            let minus = evaluate(&f, &work)?;
            work[which].data_mut()[j] = orig;
            if plus.len() != weights.len() {
                return Err(TensorError::Shape {
                    op: "grad_check",
                    lhs: plus.shape().to_vec(),
                    rhs: vec![weights.len()],
                });
            }
            let numeric: f64 = plus
                .data()
                .iter()
                .zip(minus.data())
                .zip(&weights)
                .map(|((p, m), w)| w * ((p - m) / (2.0 * step)))
                .sum();
            let err = (analytic[j] - numeric).abs() / numeric.abs().max(1.0);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

/// Runs [`grad_check`] on several input sets and returns the worst error.
pub fn grad_check_many<F>(f: F, cases: &[Vec<Tensor>], step: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut worst: f64 = 0.0;
    for inputs in cases {
        worst = worst.max(grad_check(&f, inputs, step)?);
    }
    Ok(worst)
}
