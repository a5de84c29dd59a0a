//! Verification utilities: finite-difference gradient checking.
//!
//! These helpers are independent oracles for test suites; nothing in the
//! runtime pipeline calls them. Central differences evaluate the loss
//! twice per probed element and never touch the reverse-mode path they
//! check.

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::tensor::chain::Chain;
use crate::tensor::optim::ParamSet;
use crate::tensor::{ops, Scalar, Tensor};

/// Outcome of a finite-difference sweep.
#[derive(Debug, Clone)]
pub struct FdReport {
    pub checked: usize,
    pub max_rel_err: f64,
    /// Parameter name and flat element index of the worst error.
    pub worst: Option<(String, usize)>,
}

/// Relative error with a floor so near-zero pairs compare absolutely.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-2)
}

/// Check analytic parameter gradients of `chain` against central finite
/// differences of the summed cross-entropy loss over `batch`.
///
/// `dropout_seed` fixes the dropout masks so the loss is a deterministic
/// function of the parameters; pass `None` to run in evaluation mode.
/// Probes up to `max_probes` parameter elements, spread over all
/// parameters, chosen by `rng`.
pub fn check_chain_gradients(
    chain: &Chain,
    params: &ParamSet,
    batch: &[(Tensor, usize)],
    dropout_seed: Option<u64>,
    max_probes: usize,
    eps: f64,
    rng: &mut ChaCha8Rng,
) -> FdReport {
    let loss_of = |p: &ParamSet| -> f64 {
        let mut total = 0.0f64;
        for (input, label) in batch {
            let trace = match dropout_seed {
                Some(seed) => {
                    let mut dr = ChaCha8Rng::seed_from_u64(seed);
                    chain.forward(p, input, Some(&mut dr)).expect("forward")
                }
                None => chain.forward::<ChaCha8Rng>(p, input, None).expect("forward"),
            };
            let (loss, _) = ops::softmax_cross_entropy(trace.output(), *label).expect("loss");
            total += loss as f64;
        }
        total
    };

    // Analytic gradient of the same summed loss.
    let mut analytic = crate::tensor::optim::Gradients::zeros_like(params);
    for (input, label) in batch {
        let grads = match dropout_seed {
            Some(seed) => {
                let mut dr = ChaCha8Rng::seed_from_u64(seed);
                chain.loss_and_grads(params, input, *label, Some(&mut dr)).expect("grads").1
            }
            None => {
                chain
                    .loss_and_grads::<ChaCha8Rng>(params, input, *label, None)
                    .expect("grads")
                    .1
            }
        };
        analytic.add(&grads);
    }

    // Spread probes across parameters proportionally to size, at least one
    // element each.
    let names: Vec<String> = params.names().cloned().collect();
    let total_elems: usize = params.total_values();
    let mut report = FdReport { checked: 0, max_rel_err: 0.0, worst: None };
    let mut work = params.clone();
    for name in &names {
        let n = params.value(name).expect("param").len();
        let quota =
            ((max_probes as f64 * n as f64 / total_elems as f64).ceil() as usize).clamp(1, n);
        let mut indices: Vec<usize> = (0..n).collect();
        indices.shuffle(rng);
        indices.truncate(quota);
        for idx in indices {
            let original = params.value(name).expect("param").data()[idx];
            work.value_mut(name).expect("param").data_mut()[idx] = original + eps as Scalar;
            let plus = loss_of(&work);
            work.value_mut(name).expect("param").data_mut()[idx] = original - eps as Scalar;
            let minus = loss_of(&work);
            work.value_mut(name).expect("param").data_mut()[idx] = original;
            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic.get(name).expect("grad").data()[idx] as f64;
            let err = rel_err(a, numeric);
            report.checked += 1;
            if err > report.max_rel_err {
                report.max_rel_err = err;
                report.worst = Some((name.clone(), idx));
            }
        }
    }
    report
}

/// Central finite differences of an arbitrary scalar function with respect
/// to a tensor argument, probing every element.
pub fn fd_tensor_gradient(
    f: &dyn Fn(&Tensor) -> f64,
    at: &Tensor,
    eps: f64,
) -> Vec<f64> {
    let mut grads = Vec::with_capacity(at.len());
    let mut probe = at.clone();
    for i in 0..at.len() {
        let original = probe.data()[i];
        probe.data_mut()[i] = original + eps as Scalar;
        let plus = f(&probe);
        probe.data_mut()[i] = original - eps as Scalar;
        let minus = f(&probe);
        probe.data_mut()[i] = original;
        grads.push((plus - minus) / (2.0 * eps));
    }
    grads
}

/// Tensor filled with uniform values in `[lo, hi)`.
pub fn random_tensor<R: Rng>(shape: &[usize], lo: f64, hi: f64, rng: &mut R) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| (lo + (hi - lo) * rng.gen::<f64>()) as Scalar).collect();
    Tensor::from_vec(shape, data)
}

/// Tensor whose elements are a shuffled, well-separated ramp; window maxima
/// are unique with gaps far above finite-difference steps.
pub fn distinct_tensor<R: Rng>(shape: &[usize], rng: &mut R) -> Tensor {
    let n: usize = shape.iter().product();
    let mut values: Vec<Scalar> = (0..n).map(|i| (i as Scalar) * 0.01 - 0.3).collect();
    values.shuffle(rng);
    Tensor::from_vec(shape, values)
}
