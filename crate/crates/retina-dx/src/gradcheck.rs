//! Finite-difference gradient checking.
//!
//! Rebuilds the network in `f64`, computes analytic gradients with one
//! forward/backward pass, then perturbs every parameter element by ±h and
//! compares against the central difference of the loss. Dropout masks are
//! frozen by restoring the mask generator before every loss evaluation, so
//! each perturbed loss sees the same masks as the analytic pass.

use std::collections::BTreeMap;

use crate::error::Result;
use crate::layers::{build_network, xent_from_probs, Mode, Network, NetworkConfig};
use crate::rng::{streams, Rng};
use crate::tensor::Tensor;

/// Central-difference step.
pub const FD_STEP: f64 = 1e-5;

/// Denominator floor for full-network comparisons. A whole forward pass
/// accumulates rounding noise of roughly ulp(loss)·depth/(2h) ≈ 1e-10 in the
/// numeric derivative, so gradients below ~1e-6 are indistinguishable from
/// zero at h = 1e-5 and would register phantom errors against the tighter
/// per-layer floor. (A conv bias feeding straight into batchnorm is exactly
/// such a dead parameter: the mean subtraction cancels it.)
pub const FULL_NET_FLOOR: f64 = 1e-6;

/// Relative error between an analytic and a numeric derivative:
/// |a−n| / max(|a|, |n|, 1e-8). The floor keeps zero-gradient elements
/// from dividing by zero; single-layer checks use this tight form.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    rel_err_with_floor(analytic, numeric, 1e-8)
}

/// [`rel_err`] with an explicit denominator floor.
pub fn rel_err_with_floor(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Worst relative error seen across one parameter tensor.
#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub name: String,
    pub max_rel_err: f64,
}

/// Outcome of a full gradient check. Every trainable parameter appears
/// exactly once in `params`.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
    pub tolerance: f64,
}

impl GradCheckReport {
    /// Worst relative error across all parameters.
    pub fn max_rel_err(&self) -> f64 {
        self.params
            .iter()
            .map(|p| p.max_rel_err)
            .fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.max_rel_err() < self.tolerance
    }
}

/// Checks every element of every trainable parameter of the network built
/// from `config`. The probe batch holds two samples with uniform [−1, 1]
/// pixels and labels 0 and 1, drawn from the seed's gradient-check stream.
pub fn grad_check(config: &NetworkConfig, tolerance: f64, seed: u64) -> Result<GradCheckReport> {
    let mut net: Network<f64> = build_network(config, seed)?;
    let [c, h, w] = config.input;
    let mut rng = Rng::with_stream(seed, streams::GRADCHECK);
    let x = Tensor::from_fn(&[2, c, h, w], || rng.uniform_in(-1.0, 1.0));
    let labels = vec![0usize, 1];

    let snap = net.rng_snapshot();
    net.restore_rng(snap.clone());
    let probs = net.forward(&x, Mode::Training)?;
    let (_, dlogits) = xent_from_probs(&probs, &labels)?;
    let analytic = net.backward(&dlogits)?;

    compare_with_fd(&mut net, &x, &labels, &snap, &analytic, tolerance)
}

/// Compares the supplied analytic gradients against central differences.
/// Split out from [`grad_check`] so tests can feed deliberately corrupted
/// gradients and confirm the harness notices.
pub(crate) fn compare_with_fd(
    net: &mut Network<f64>,
    x: &Tensor<f64>,
    labels: &[usize],
    snap: &Rng,
    analytic: &BTreeMap<String, Tensor<f64>>,
    tolerance: f64,
) -> Result<GradCheckReport> {
    let names: Vec<String> = net
        .trainable_params()
        .into_iter()
        .map(|(name, _)| name)
        .collect();

    let mut params = Vec::with_capacity(names.len());
    for name in names {
        let grad = analytic
            .get(&name)
            .ok_or_else(|| crate::error::Error::ShapeMismatch(format!("no gradient for {name:?}")))?
            .clone();
        let numel = grad.numel();
        let mut worst = 0.0f64;
        for i in 0..numel {
            let original = net.param(&name).expect("trainable name").data()[i];
            net.param_mut(&name).expect("trainable name").data_mut()[i] = original + FD_STEP;
            let loss_plus = loss_with_frozen_masks(net, x, labels, snap)?;
            net.param_mut(&name).expect("trainable name").data_mut()[i] = original - FD_STEP;
            let loss_minus = loss_with_frozen_masks(net, x, labels, snap)?;
            net.param_mut(&name).expect("trainable name").data_mut()[i] = original;

            let numeric = (loss_plus - loss_minus) / (2.0 * FD_STEP);
            worst = worst.max(rel_err_with_floor(grad.data()[i], numeric, FULL_NET_FLOOR));
        }
        params.push(ParamCheck {
            name,
            max_rel_err: worst,
        });
    }
    Ok(GradCheckReport { params, tolerance })
}

fn loss_with_frozen_masks(
    net: &mut Network<f64>,
    x: &Tensor<f64>,
    labels: &[usize],
    snap: &Rng,
) -> Result<f64> {
    net.restore_rng(snap.clone());
    let probs = net.forward(x, Mode::Training)?;
    let (loss, _) = xent_from_probs(&probs, labels)?;
    Ok(loss)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::LayerSpec;

    #[test]
    fn rel_err_examples() {
        assert_eq!(rel_err(1.0, 1.0), 0.0);
        assert!((rel_err(1.0, 1.001) - 0.001 / 1.001).abs() < 1e-12);
        // Both near zero: the 1e-8 floor keeps this finite and small.
        assert!(rel_err(0.0, 1e-12) < 1e-3);
    }

    fn linear_config() -> NetworkConfig {
        NetworkConfig {
            name: "linear".into(),
            input: [1, 2, 2],
            layers: vec![LayerSpec::Fc { output_size: 2 }, LayerSpec::Softmax],
        }
    }

    #[test]
    fn linear_network_gradients_are_nearly_exact() {
        let report = grad_check(&linear_config(), 1e-6, 11).unwrap();
        assert!(
            report.passed(),
            "max rel err {} over tolerance",
            report.max_rel_err()
        );
        assert_eq!(report.params.len(), 2); // fc1.weight, fc1.bias
    }

    #[test]
    fn report_lists_every_trainable_once() {
        let config = NetworkConfig::preset("table1_shrunk").unwrap();
        let report = grad_check(&config, 1e-3, 3).unwrap();
        let net: Network<f64> = build_network(&config, 3).unwrap();
        let mut want: Vec<String> = net
            .trainable_params()
            .into_iter()
            .map(|(n, _)| n)
            .collect();
        let mut got: Vec<String> = report.params.iter().map(|p| p.name.clone()).collect();
        want.sort();
        got.sort();
        assert_eq!(got, want);
    }

    #[test]
    fn shrunk_full_stack_passes_at_1e3() {
        let config = NetworkConfig::preset("table1_shrunk").unwrap();
        let report = grad_check(&config, 1e-3, 7).unwrap();
        assert!(
            report.passed(),
            "max rel err {} over tolerance",
            report.max_rel_err()
        );
    }

    #[test]
    fn corrupted_backward_is_detected() {
        let config = linear_config();
        let seed = 5;
        let mut net: Network<f64> = build_network(&config, seed).unwrap();
        let [c, h, w] = config.input;
        let mut rng = Rng::with_stream(seed, streams::GRADCHECK);
        let x = Tensor::from_fn(&[2, c, h, w], || rng.uniform_in(-1.0, 1.0));
        let labels = vec![0usize, 1];

        let snap = net.rng_snapshot();
        net.restore_rng(snap.clone());
        let probs = net.forward(&x, Mode::Training).unwrap();
        let (_, dlogits) = xent_from_probs(&probs, &labels).unwrap();
        let mut grads = net.backward(&dlogits).unwrap();

        // Honest gradients pass…
        let honest = compare_with_fd(&mut net, &x, &labels, &snap, &grads, 1e-6).unwrap();
        assert!(honest.passed());

        // …then flip the sign of one weight gradient and the check fails.
        let broken = grads.get_mut("fc1.weight").unwrap();
        let v = broken.data()[0];
        broken.data_mut()[0] = -v - 0.5;
        let caught = compare_with_fd(&mut net, &x, &labels, &snap, &grads, 1e-6).unwrap();
        assert!(!caught.passed());
        let bad = caught
            .params
            .iter()
            .find(|p| p.name == "fc1.weight")
            .unwrap();
        assert!(bad.max_rel_err > 1e-2);
    }

    #[test]
    fn probe_batch_is_deterministic() {
        let a = grad_check(&linear_config(), 1e-6, 21).unwrap();
        let b = grad_check(&linear_config(), 1e-6, 21).unwrap();
        let errs =
            |r: &GradCheckReport| r.params.iter().map(|p| p.max_rel_err).collect::<Vec<_>>();
        assert_eq!(errs(&a), errs(&b));
    }
}
