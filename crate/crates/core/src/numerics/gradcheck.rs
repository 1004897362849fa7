//! Central-difference verification of tape gradients.
//!
//! The loss closure is evaluated on `f64` tapes so that the finite differences
//! measure the adjoint rules rather than single-precision round-off.

use rand::seq::index::sample;
use thiserror::Error;

use super::param::{ParamId, ParamStore};
use super::rng::SeedKey;
use super::tape::{Tape, Var};
use super::tensor::TensorError;

#[derive(Debug, Error)]
pub enum GradCheckError {
    #[error("loss evaluation failed: {0}")]
    Tensor(#[from] TensorError),
    #[error("loss is not deterministic: {first} vs {second}")]
    NonDeterministic { first: f64, second: f64 },
    #[error("epsilon and tolerance must be positive")]
    BadArgument,
}

#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    pub eps: f64,
    pub tol: f64,
    /// Entries probed per parameter tensor (the largest-gradient entry is
    /// always probed in addition). `None` probes every entry.
    pub samples_per_param: Option<usize>,
    pub seed: u64,
    /// Both gradients below this magnitude count as agreeing zeros.
    pub zero_floor: f64,
}

impl GradCheckOptions {
    pub fn new(eps: f64, tol: f64) -> Self {
        GradCheckOptions {
            eps,
            tol,
            samples_per_param: None,
            seed: 0,
            zero_floor: 1e-10,
        }
    }

    pub fn sampled(mut self, per_param: usize, seed: u64) -> Self {
        self.samples_per_param = Some(per_param);
        self.seed = seed;
        self
    }
}

#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub name: String,
    pub probed: usize,
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.params.iter().all(|p| p.max_rel_error < self.tol)
    }

    pub fn max_rel_error(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_error).fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&ParamCheck> {
        self.params.iter().max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
    }
}

pub fn relative_error(analytic: f64, numeric: f64, zero_floor: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs());
    if scale < zero_floor {
        0.0
    } else {
        (analytic - numeric).abs() / scale
    }
}

/// Compares analytic gradients of `loss_fn` against central differences for
/// every parameter the loss touches.
pub fn gradient_check<F>(store: &ParamStore, loss_fn: F, opts: GradCheckOptions) -> Result<GradCheckReport, GradCheckError>
where
    F: Fn(&mut Tape<f64>, &ParamStore) -> Result<Var, TensorError>,
{
    if !(opts.eps > 0.0 && opts.tol > 0.0) {
        return Err(GradCheckError::BadArgument);
    }
    let eval = |tape: &mut Tape<f64>| -> Result<(f64, Var), TensorError> {
        let l = loss_fn(tape, store)?;
        Ok((tape.value(l).data()[0], l))
    };

    let mut tape = Tape::<f64>::new();
    let (base, loss) = eval(&mut tape)?;
    let mut again = Tape::<f64>::new();
    let (repeat, _) = eval(&mut again)?;
    if base.to_bits() != repeat.to_bits() {
        return Err(GradCheckError::NonDeterministic {
            first: base,
            second: repeat,
        });
    }
    let grads = tape.backward(loss)?;

    let mut checks = Vec::new();
    for id in tape.bound_params() {
        let Some(analytic) = grads.for_param(id) else { continue };
        let indices = probe_indices(analytic, id, &opts);
        let mut worst = ParamCheck {
            name: store.get(id).name.clone(),
            probed: indices.len(),
            max_rel_error: 0.0,
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
        };
        for idx in indices {
            let mut plus = Tape::<f64>::with_perturbation(id, idx, opts.eps);
            let (fp, _) = eval(&mut plus)?;
            let mut minus = Tape::<f64>::with_perturbation(id, idx, -opts.eps);
            let (fm, _) = eval(&mut minus)?;
            let numeric = (fp - fm) / (2.0 * opts.eps);
            let err = relative_error(analytic[idx], numeric, opts.zero_floor);
            if err >= worst.max_rel_error {
                worst.max_rel_error = err;
                worst.worst_index = idx;
                worst.analytic = analytic[idx];
                worst.numeric = numeric;
            }
        }
        checks.push(worst);
    }
    Ok(GradCheckReport {
        params: checks,
        tol: opts.tol,
    })
}

fn probe_indices(analytic: &[f64], id: ParamId, opts: &GradCheckOptions) -> Vec<usize> {
    let n = analytic.len();
    match opts.samples_per_param {
        Some(k) if k < n => {
            let mut rng = SeedKey::new(opts.seed).child(id.0 as u64).rng();
            let mut idx = sample(&mut rng, n, k).into_vec();
            let argmax = (0..n).max_by(|&a, &b| analytic[a].abs().total_cmp(&analytic[b].abs())).unwrap_or(0);
            if !idx.contains(&argmax) {
                idx.push(argmax);
            }
            idx.sort_unstable();
            idx
        }
        _ => (0..n).collect(),
    }
}
