//! Central finite-difference verification of tape gradients.
//!
//! Every differentiable op (and the full encoder) is checked against this
//! oracle: perturb one input element by ±h, rebuild the graph, and compare
//! the symmetric difference quotient with the gradient from the backward
//! sweep. Relative error uses a small floor so that near-zero gradients are
//! judged on absolute error instead of blowing up the quotient.

use super::{NumericsError, Tape, Tensor, Var};

pub const DEFAULT_STEP: f64 = 1e-5;
pub const REL_ERR_FLOOR: f64 = 1e-4;

/// |a - b| / max(|a|, |b|, floor)
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_ERR_FLOOR)
}

fn eval<F>(inputs: &[Tensor], build: &F) -> Result<f64, NumericsError>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var, NumericsError>,
{
    let mut tape = Tape::new();
    let vars = inputs
        .iter()
        .map(|t| tape.leaf(t.clone()))
        .collect::<Result<Vec<_>, _>>()?;
    let root = build(&mut tape, &vars)?;
    Ok(tape.value(root).item())
}

/// Symmetric difference quotient for element `elem` of input `input`.
pub fn central_diff<F>(
    inputs: &[Tensor],
    h: f64,
    build: &F,
    input: usize,
    elem: usize,
) -> Result<f64, NumericsError>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var, NumericsError>,
{
    let mut plus = inputs.to_vec();
    plus[input].data_mut()[elem] += h;
    let mut minus = inputs.to_vec();
    minus[input].data_mut()[elem] -= h;
    Ok((eval(&plus, build)? - eval(&minus, build)?) / (2.0 * h))
}

/// Compare tape gradients with central differences at the given
/// (input, element) probes; returns the worst relative error.
pub fn check_probes<F>(
    inputs: &[Tensor],
    h: f64,
    build: &F,
    probes: &[(usize, usize)],
) -> Result<f64, NumericsError>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var, NumericsError>,
{
    let mut tape = Tape::new();
    let vars = inputs
        .iter()
        .map(|t| tape.leaf(t.clone()))
        .collect::<Result<Vec<_>, _>>()?;
    let root = build(&mut tape, &vars)?;
    let grads = tape.backward(root)?;
    let mut worst = 0.0f64;
    for &(i, j) in probes {
        let fd = central_diff(inputs, h, build, i, j)?;
        let an = grads.get(vars[i]).map(|g| g.data()[j]).unwrap_or(0.0);
        worst = worst.max(rel_err(fd, an));
    }
    Ok(worst)
}

/// Probe every element of every input.
pub fn check_all<F>(inputs: &[Tensor], h: f64, build: &F) -> Result<f64, NumericsError>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var, NumericsError>,
{
    let probes: Vec<(usize, usize)> = inputs
        .iter()
        .enumerate()
        .flat_map(|(i, t)| (0..t.len()).map(move |j| (i, j)))
        .collect();
    check_probes(inputs, h, build, &probes)
}
