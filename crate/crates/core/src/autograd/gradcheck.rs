use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Scalar;

use super::graph::Graph;

/// Largest relative error found for each trainable parameter.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradCheckReport {
    pub params: Vec<(String, f64)>,
    /// Elements passed over because they straddle a kink.
    pub skipped: usize,
    /// Checked elements whose gradient fell below the magnitude floor.
    pub negligible: usize,
}

impl GradCheckReport {
    /// NaN if any parameter could not be checked.
    pub fn max(&self) -> f64 {
        self.params
            .iter()
            .map(|p| p.1)
            .fold(0.0, |m, e| if m.is_nan() || e.is_nan() { f64::NAN } else { m.max(e) })
    }

    pub fn worst(&self) -> Option<&(String, f64)> {
        self.params.iter().max_by(|a, b| a.1.total_cmp(&b.1))
    }
}

/// Options for [`grad_check_with`].
#[derive(Clone, Copy, Debug)]
pub struct GradCheckConfig {
    pub epsilon: f64,
    /// Check at most this many randomly chosen elements per parameter.
    pub max_elements: Option<usize>,
    pub seed: u64,
    /// Watch for perturbations that flip a ReLU or change a max-pool
    /// winner. Finite differences across a kink say nothing about the
    /// derivative, so the step is shortened; if that keeps crossing, the
    /// element is skipped and another one of the same parameter is drawn.
    pub skip_kinks: bool,
    /// Number of step sizes combined by extrapolation. One gives a plain
    /// central difference.
    pub levels: usize,
    /// Denominator floor of the relative error. Gradients this small are
    /// below what finite differences resolve at the given step.
    pub floor: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            epsilon: 1e-5,
            max_elements: None,
            seed: 0,
            skip_kinks: false,
            levels: 1,
            floor: 1e-8,
        }
    }
}

/// Step sizes tried per element when skipping kinks: epsilon, epsilon/10, ...
const KINK_RETRIES: usize = 3;

/// `|a - n| / max(|a|, |n|, 1e-8)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    relative_error_floored(analytic, numeric, 1e-8)
}

fn relative_error_floored(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares backpropagated gradients with central differences for every
/// element of every trainable parameter. Inputs must already be bound.
/// A parameter left with no kink-free element reports NaN.
pub fn grad_check<T: Scalar>(graph: &mut Graph<T>, epsilon: f64) -> Result<GradCheckReport> {
    grad_check_with(
        graph,
        GradCheckConfig {
            epsilon,
            ..GradCheckConfig::default()
        },
    )
}

pub fn grad_check_with<T: Scalar>(graph: &mut Graph<T>, cfg: GradCheckConfig) -> Result<GradCheckReport> {
    if T::BYTES != 8 {
        return Err(Error::Precision(
            "gradient checking needs a double-precision graph".into(),
        ));
    }
    if !(cfg.epsilon > 0.0) {
        return Err(Error::arg("finite-difference step must be positive"));
    }
    graph.run_forward()?;
    graph.backward()?;
    let trainable: Vec<_> = graph.param_ids().into_iter().filter(|&id| !graph.is_frozen(id)).collect();
    let analytic: Vec<_> = trainable
        .iter()
        .map(|&id| graph.grad(id).cloned())
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let routing = if cfg.skip_kinks { graph.routing() } else { Vec::new() };
    let mut report = GradCheckReport::default();
    for (&id, grad) in trainable.iter().zip(analytic) {
        let name = graph.node(id).name.clone();
        let original = graph.value(id)?.clone();
        let n = original.len();
        let budget = cfg.max_elements.unwrap_or(n).min(n);
        let mut order: Vec<usize> = (0..n).collect();
        if budget < n || cfg.skip_kinks {
            order.shuffle(&mut rng);
            // half the budget goes to the largest gradients, which finite
            // differences resolve best; the rest stays random
            if let Some(g) = grad.as_ref().filter(|_| budget < n) {
                let magnitude = |k: usize| g.data()[k].to_f64().unwrap_or(f64::NAN).abs();
                let mut by_size = order.clone();
                by_size.sort_by(|&a, &b| magnitude(b).total_cmp(&magnitude(a)));
                let top = &by_size[..budget.div_ceil(2)];
                order.retain(|k| !top.contains(k));
                order.splice(0..0, top.iter().copied());
            }
        }
        let mut worst = 0.0f64;
        let mut checked = 0;
        let mut kinks = 0;
        for k in order {
            if checked == budget {
                break;
            }
            let mut probe = |delta: f64| -> Result<(f64, bool)> {
                let mut t = original.clone();
                t.data_mut()[k] += T::of(delta);
                graph.set_param(&name, t)?;
                graph.run_forward()?;
                let kink = cfg.skip_kinks && graph.routing() != routing;
                Ok((graph.loss_value()?.to_f64().unwrap_or(f64::NAN), kink))
            };
            let Some(numeric) = differentiate(&mut probe, cfg)? else {
                kinks += 1;
                continue;
            };
            let a = grad.as_ref().map_or(0.0, |g| g.data()[k].to_f64().unwrap_or(f64::NAN));
            if a.abs().max(numeric.abs()) < cfg.floor {
                report.negligible += 1;
            }
            checked += 1;
            let err = relative_error_floored(a, numeric, cfg.floor);
            if err.is_nan() {
                worst = f64::NAN;
            } else if !worst.is_nan() {
                worst = worst.max(err);
            }
        }
        report.skipped += kinks;
        if kinks == n && n > 0 {
            worst = f64::NAN;
        }
        graph.set_param(&name, original)?;
        report.params.push((name, worst));
    }
    graph.run_forward()?;
    graph.backward()?;
    Ok(report)
}

/// Central differences at `epsilon`, `epsilon / 10`, ... extrapolated to a
/// zero step with Ridders' tableau; returns the entry with the smallest
/// error estimate. Steps whose probes cross a kink are dropped before the
/// first usable one. `None` when every step crossed.
fn differentiate(probe: &mut dyn FnMut(f64) -> Result<(f64, bool)>, cfg: GradCheckConfig) -> Result<Option<f64>> {
    let levels = cfg.levels.max(1);
    let steps = levels + if cfg.skip_kinks { KINK_RETRIES - 1 } else { 0 };
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut best = (f64::NAN, f64::INFINITY);
    let mut h = cfg.epsilon;
    for _ in 0..steps {
        let (plus, kink_plus) = probe(h)?;
        let (minus, kink_minus) = probe(-h)?;
        let step = h;
        h /= 10.0;
        if kink_plus || kink_minus {
            if rows.is_empty() {
                continue;
            }
            break;
        }
        let mut row = vec![(plus - minus) / (2.0 * step)];
        if let Some(prev) = rows.last() {
            let mut fac = 1.0;
            for j in 1..=prev.len() {
                fac *= 100.0;
                let t = (row[j - 1] * fac - prev[j - 1]) / (fac - 1.0);
                let err = (t - row[j - 1]).abs().max((t - prev[j - 1]).abs());
                if err <= best.1 {
                    best = (t, err);
                }
                row.push(t);
            }
            // roundoff has taken over once the diagonal starts to drift
            let drift = (row[prev.len()] - prev[prev.len() - 1]).abs();
            if drift >= 2.0 * best.1 {
                break;
            }
        } else {
            best.0 = row[0];
        }
        rows.push(row);
        if rows.len() == levels {
            break;
        }
    }
    Ok((!rows.is_empty()).then_some(best.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn quadratic_is_exact() {
        let mut g = Graph::<f64>::new();
        let x = g.param("x", Tensor::from_vec(&[3], vec![0.3, -1.7, 2.5]).unwrap()).unwrap();
        let sq = g.square("sq", x).unwrap();
        let l = g.sum("l", sq).unwrap();
        g.set_loss(l).unwrap();
        let r = grad_check(&mut g, 1e-5).unwrap();
        assert!(r.max() < 1e-9, "{r:?}");
    }

    #[test]
    fn kinks_are_skipped() {
        let mut g = Graph::<f64>::new();
        let x = g.param("x", Tensor::from_vec(&[3], vec![0.5, 2e-9, -0.7]).unwrap()).unwrap();
        let r = g.relu("r", x).unwrap();
        let l = g.sum("l", r).unwrap();
        g.set_loss(l).unwrap();
        let plain = grad_check(&mut g, 1e-5).unwrap();
        assert!(plain.max() > 0.1, "{plain:?}");
        let cfg = GradCheckConfig {
            epsilon: 1e-5,
            skip_kinks: true,
            ..GradCheckConfig::default()
        };
        let r = grad_check_with(&mut g, cfg).unwrap();
        assert_eq!(r.skipped, 1);
        assert!(r.max() < 1e-9, "{r:?}");

        let mut g = Graph::<f64>::new();
        let x = g.param("x", Tensor::scalar(-1e-9)).unwrap();
        let r = g.relu("r", x).unwrap();
        g.set_loss(r).unwrap();
        assert!(grad_check_with(&mut g, cfg).unwrap().max().is_nan());
        // close enough for a shorter step to stay on one side
        g.set_param("x", Tensor::scalar(-3e-6)).unwrap();
        let r = grad_check_with(&mut g, cfg).unwrap();
        assert_eq!((r.skipped, r.max()), (0, 0.0));
    }

    #[test]
    fn floor_bounds_tiny_gradients() {
        let mut g = Graph::<f64>::new();
        let x = g.param("x", Tensor::from_vec(&[2], vec![1e-9, 1.0]).unwrap()).unwrap();
        let sq = g.square("sq", x).unwrap();
        let l = g.sum("l", sq).unwrap();
        g.set_loss(l).unwrap();
        let cfg = GradCheckConfig {
            floor: 1e-6,
            ..GradCheckConfig::default()
        };
        let r = grad_check_with(&mut g, cfg).unwrap();
        assert_eq!((r.negligible, r.params.len()), (1, 1));
        assert!(r.max() < 1e-4, "{r:?}");
    }

    #[test]
    fn extrapolation_handles_sharp_curvature() {
        let mut g = Graph::<f64>::new();
        let x = g.param("x", Tensor::from_vec(&[1, 3, 1, 1], vec![3e-3, -1e-3, 2e-3]).unwrap()).unwrap();
        let n = g.l2_norm("n", x, 1.0).unwrap();
        let w = g.input("w", false).unwrap();
        g.bind("w", Tensor::from_vec(&[1, 3, 1, 1], vec![0.3, -0.8, 0.5]).unwrap()).unwrap();
        let l = g.weighted_sum("l", n, w).unwrap();
        g.set_loss(l).unwrap();
        let plain = grad_check(&mut g, 1e-4).unwrap();
        let cfg = GradCheckConfig {
            epsilon: 1e-4,
            levels: 4,
            ..GradCheckConfig::default()
        };
        let extrapolated = grad_check_with(&mut g, cfg).unwrap();
        assert!(plain.max() > 1e-4, "{plain:?}");
        assert!(extrapolated.max() < 1e-8, "{extrapolated:?}");
    }

    #[test]
    fn single_precision_rejected() {
        let mut g = Graph::<f32>::new();
        let x = g.param("x", Tensor::scalar(1.0)).unwrap();
        let l = g.sum("l", x).unwrap();
        g.set_loss(l).unwrap();
        assert!(matches!(grad_check(&mut g, 1e-3), Err(Error::Precision(_))));
    }

    #[test]
    fn frozen_params_absent() {
        let mut g = Graph::<f64>::new();
        let a = g.param("a", Tensor::scalar(1.0)).unwrap();
        let b = g.param("b", Tensor::scalar(2.0)).unwrap();
        let s = g.add("s", a, b).unwrap();
        let sq = g.square("sq", s).unwrap();
        g.set_loss(sq).unwrap();
        g.set_frozen("a", true).unwrap();
        let r = grad_check(&mut g, 1e-5).unwrap();
        assert_eq!(r.params.len(), 1);
        assert_eq!(r.params[0].0, "b");
    }
}
