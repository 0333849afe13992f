//! Central finite-difference verification of tape gradients.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::tape::{Tape, Var};
use super::value::Tensor;
use crate::error::{Error, Result};

/// Near-zero gradients are compared against this floor instead of their own
/// magnitude, so finite-difference noise on tiny coordinates does not drown
/// the signal (same spirit as atol/rtol pairing).
const REL_FLOOR: f64 = 1e-2;

#[derive(Debug, Clone)]
pub struct GradcheckReport {
    pub max_rel_err: f64,
    pub tol: f64,
    /// (input index, coordinate, analytic, numeric) for the worst coordinate.
    pub worst: Option<(usize, usize, f64, f64)>,
    pub coords_checked: usize,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tol
    }
}

fn forward<F>(f: &F, inputs: &[Tensor]) -> Result<(Tape, Vec<Var>, Var)>
where
    F: Fn(&Tape, &[Var]) -> Result<Var>,
{
    let tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&tape, &vars)?;
    let v = tape.value(out);
    if v.rank() != 0 && v.len() != 1 {
        return Err(Error::ShapeMismatch(format!(
            "gradcheck target must be scalar, got shape {:?}",
            v.shape()
        )));
    }
    if !v.item().is_finite() {
        return Err(Error::NonFinite("gradcheck forward value".into()));
    }
    Ok((tape, vars, out))
}

/// Compare tape gradients of the scalar `f(inputs)` against central finite
/// differences over every coordinate of every input.
pub fn gradcheck<F>(f: F, inputs: &[Tensor], eps: f64, tol: f64) -> Result<GradcheckReport>
where
    F: Fn(&Tape, &[Var]) -> Result<Var>,
{
    let (tape, vars, out) = forward(&f, inputs)?;
    let grads = tape.backward(out)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| grads.get_or_zeros(v, t.shape()))
        .collect();
    for a in &analytic {
        if !a.is_finite() {
            return Err(Error::NonFinite("gradcheck analytic gradient".into()));
        }
    }

    let mut work: Vec<Tensor> = inputs.to_vec();
    let mut max_rel = 0.0f64;
    let mut worst = None;
    let mut coords = 0usize;
    for i in 0..work.len() {
        for j in 0..work[i].len() {
            let orig = work[i].data()[j];
            work[i].data_mut()[j] = orig + eps;
            let (tp, _, op) = forward(&f, &work)?;
            let fp = tp.value(op).item();
            work[i].data_mut()[j] = orig - eps;
            let (tm, _, om) = forward(&f, &work)?;
            let fm = tm.value(om).item();
            work[i].data_mut()[j] = orig;
            let numeric = (fp - fm) / (2.0 * eps);
            if !numeric.is_finite() {
                return Err(Error::NonFinite(format!(
                    "finite difference at input {i} coord {j}"
                )));
            }
            let a = analytic[i].data()[j];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_FLOOR);
            coords += 1;
            if rel > max_rel {
                max_rel = rel;
                worst = Some((i, j, a, numeric));
            }
        }
    }
    Ok(GradcheckReport {
        max_rel_err: max_rel,
        tol,
        worst,
        coords_checked: coords,
    })
}

/// Gradcheck a forward pass that consumes named parameters: every parameter
/// tensor and every extra input tensor is perturbed. The output is reduced
/// with a fixed random weighting so non-scalar outputs work too.
pub fn gradcheck_params<F>(
    f: F,
    params: &super::params::ParamStore,
    extra: &[Tensor],
    scalar_seed: u64,
    eps: f64,
    tol: f64,
) -> Result<GradcheckReport>
where
    F: Fn(&Tape, &super::params::ParamVars, &[Var]) -> Result<Var>,
{
    let names: Vec<String> = params.names().cloned().collect();
    let mut inputs: Vec<Tensor> = Vec::with_capacity(names.len() + extra.len());
    for n in &names {
        inputs.push(params.get(n)?.clone());
    }
    inputs.extend(extra.iter().cloned());
    gradcheck(
        |tape, vars| {
            let pv: super::params::ParamVars = names
                .iter()
                .cloned()
                .zip(vars[..names.len()].iter().copied())
                .collect();
            let out = f(tape, &pv, &vars[names.len()..])?;
            scalarize(tape, out, scalar_seed)
        },
        &inputs,
        eps,
        tol,
    )
}

/// Deterministic random tensor in [-1, 1), handy for gradcheck fixtures.
pub fn random_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
    Tensor::new(shape.to_vec(), data).expect("consistent shape")
}

/// Reduce an arbitrary-shaped var to a scalar via a fixed random weighting,
/// so every output coordinate influences the scalar being checked.
pub fn scalarize(tape: &Tape, v: Var, seed: u64) -> Result<Var> {
    let shape = tape.shape_of(v);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = random_tensor(&shape, &mut rng);
    let weighted = tape.mul_mask(v, &w)?;
    Ok(tape.sum_all(weighted))
}
