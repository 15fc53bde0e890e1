//! Central-difference gradient checking in `f64`.
//!
//! The error of one coordinate is
//! `|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)` and a check
//! reports the maximum over all coordinates visited.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::model::{build_model, ModelConfig};
use crate::ops::Mode;
use crate::tensor::Tensor;

pub const DEFAULT_STEP: f64 = 1e-5;
const DENOM_FLOOR: f64 = 1e-8;

#[derive(Clone, Debug, Serialize, PartialEq)]
pub struct Coordinate {
    pub tensor: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug, Serialize, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst: Option<Coordinate>,
    pub checked: usize,
    /// Coordinates whose ±step evaluation crossed a ReLU kink or changed a
    /// max-pool winner; their finite difference is not a derivative.
    pub skipped_kinks: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_rel_error < tolerance
    }
}

#[derive(Clone, Debug)]
pub struct GradCheck {
    pub step: f64,
    /// Check at most this many seeded-random coordinates per tensor.
    pub max_coords_per_tensor: Option<usize>,
    pub seed: u64,
    /// Exclude coordinates whose perturbation changes the branch signature.
    pub skip_kinks: bool,
}

impl Default for GradCheck {
    fn default() -> Self {
        Self {
            step: DEFAULT_STEP,
            max_coords_per_tensor: None,
            seed: 0,
            skip_kinks: true,
        }
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(DENOM_FLOOR)
}

impl GradCheck {
    /// Compares `analytic` against central differences of `eval`, which
    /// returns the loss and a branch signature for a set of points.
    pub fn compare<F>(&self, eval: F, points: &[Tensor<f64>], analytic: &[Tensor<f64>]) -> Result<GradCheckReport>
    where
        F: Fn(&[Tensor<f64>]) -> Result<(f64, u64)>,
    {
        if analytic.len() != points.len() {
            return Err(Error::Invalid("one analytic gradient per point required".into()));
        }
        let (base_loss, base_sig) = eval(points)?;
        if !base_loss.is_finite() {
            return Err(Error::NonFinite {
                what: "loss at the check point".into(),
                index: 0,
            });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut work = points.to_vec();
        let mut report = GradCheckReport {
            max_rel_error: 0.0,
            worst: None,
            checked: 0,
            skipped_kinks: 0,
        };
        for (t, grad) in analytic.iter().enumerate() {
            if grad.shape() != points[t].shape() {
                return Err(Error::shape("grad_check", format!("gradient {t} shape differs from its point")));
            }
            if let Some(i) = grad.first_non_finite() {
                return Err(Error::NonFinite {
                    what: format!("analytic gradient of tensor {t}"),
                    index: i,
                });
            }
            let n = grad.numel();
            let coords: Vec<usize> = match self.max_coords_per_tensor {
                Some(m) if m < n => {
                    let mut v = sample(&mut rng, n, m).into_vec();
                    v.sort_unstable();
                    v
                }
                _ => (0..n).collect(),
            };
            for i in coords {
                let orig = points[t].data()[i];
                work[t].data_mut()[i] = orig + self.step;
                let (plus, sig_p) = eval(&work)?;
                work[t].data_mut()[i] = orig - self.step;
                let (minus, sig_m) = eval(&work)?;
                work[t].data_mut()[i] = orig;
                if !plus.is_finite() || !minus.is_finite() {
                    return Err(Error::NonFinite {
                        what: format!("loss while perturbing tensor {t}"),
                        index: i,
                    });
                }
                if self.skip_kinks && (sig_p != base_sig || sig_m != base_sig) {
                    report.skipped_kinks += 1;
                    continue;
                }
                let numeric = (plus - minus) / (2.0 * self.step);
                let a = grad.data()[i];
                let err = relative_error(a, numeric);
                report.checked += 1;
                if report.worst.is_none() || err > report.max_rel_error {
                    report.max_rel_error = err;
                    report.worst = Some(Coordinate {
                        tensor: t,
                        index: i,
                        analytic: a,
                        numeric,
                    });
                }
            }
        }
        Ok(report)
    }

    /// Checks a tape-built scalar function of `points`. `f` receives the
    /// points registered as leaves, in order, and returns the loss variable.
    pub fn run<F>(&self, f: F, points: &[Tensor<f64>]) -> Result<GradCheckReport>
    where
        F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
    {
        let (analytic, eval) = self.prepare(&f, points)?;
        self.compare(eval, points, &analytic)
    }
}

impl GradCheck {
    /// Directional variant: for each tensor, `directions` seeded Rademacher
    /// vectors `u` (entries ±1) are applied to every coordinate at once and
    /// `(f(x + h·u) - f(x - h·u)) / 2h` is compared with `<grad, u>`.
    /// Reported coordinates carry the direction number as `index`.
    pub fn compare_directional<F>(
        &self,
        eval: F,
        points: &[Tensor<f64>],
        analytic: &[Tensor<f64>],
        directions: usize,
    ) -> Result<GradCheckReport>
    where
        F: Fn(&[Tensor<f64>]) -> Result<(f64, u64)>,
    {
        if analytic.len() != points.len() {
            return Err(Error::Invalid("one analytic gradient per point required".into()));
        }
        let (_, base_sig) = eval(points)?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut work = points.to_vec();
        let mut report = GradCheckReport {
            max_rel_error: 0.0,
            worst: None,
            checked: 0,
            skipped_kinks: 0,
        };
        for (t, grad) in analytic.iter().enumerate() {
            if let Some(i) = grad.first_non_finite() {
                return Err(Error::NonFinite {
                    what: format!("analytic gradient of tensor {t}"),
                    index: i,
                });
            }
            for d in 0..directions {
                let u: Vec<f64> = (0..grad.numel())
                    .map(|_| if rng.gen::<bool>() { 1.0 } else { -1.0 })
                    .collect();
                let a: f64 = grad.data().iter().zip(&u).map(|(g, u)| g * u).sum();
                let shift = |sign: f64, dst: &mut Tensor<f64>| {
                    for ((v, &p), &ui) in dst.data_mut().iter_mut().zip(points[t].data()).zip(&u) {
                        *v = p + sign * self.step * ui;
                    }
                };
                shift(1.0, &mut work[t]);
                let (plus, sig_p) = eval(&work)?;
                shift(-1.0, &mut work[t]);
                let (minus, sig_m) = eval(&work)?;
                work[t] = points[t].clone();
                if !plus.is_finite() || !minus.is_finite() {
                    return Err(Error::NonFinite {
                        what: format!("loss along direction {d} of tensor {t}"),
                        index: d,
                    });
                }
                if self.skip_kinks && (sig_p != base_sig || sig_m != base_sig) {
                    report.skipped_kinks += 1;
                    continue;
                }
                let numeric = (plus - minus) / (2.0 * self.step);
                let err = relative_error(a, numeric);
                report.checked += 1;
                if report.worst.is_none() || err > report.max_rel_error {
                    report.max_rel_error = err;
                    report.worst = Some(Coordinate {
                        tensor: t,
                        index: d,
                        analytic: a,
                        numeric,
                    });
                }
            }
        }
        Ok(report)
    }

    /// Tape-based form of [`GradCheck::compare_directional`].
    pub fn run_directional<F>(&self, f: F, points: &[Tensor<f64>], directions: usize) -> Result<GradCheckReport>
    where
        F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
    {
        let (analytic, eval) = self.prepare(&f, points)?;
        self.compare_directional(eval, points, &analytic, directions)
    }

    #[allow(clippy::type_complexity)]
    fn prepare<'f, F>(
        &self,
        f: &'f F,
        points: &[Tensor<f64>],
    ) -> Result<(Vec<Tensor<f64>>, impl Fn(&[Tensor<f64>]) -> Result<(f64, u64)> + 'f)>
    where
        F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
    {
        let eval_tape = move |pts: &[Tensor<f64>]| -> Result<(Tape<f64>, Vec<Var>, Var)> {
            let mut tape = Tape::new();
            let vars: Vec<Var> = pts.iter().map(|p| tape.leaf(p.clone())).collect();
            let loss = f(&mut tape, &vars)?;
            if tape.value(loss).numel() != 1 {
                return Err(Error::shape("grad_check", "closure must return a scalar loss"));
            }
            Ok((tape, vars, loss))
        };
        let (tape, vars, loss) = eval_tape(points)?;
        let mut grads = tape.backward(loss)?;
        let analytic: Vec<Tensor<f64>> = vars.iter().map(|&v| grads.take(v)).collect();
        let eval = move |pts: &[Tensor<f64>]| -> Result<(f64, u64)> {
            let (tape, _, loss) = eval_tape(pts)?;
            Ok((tape.value(loss).data()[0], tape.branch_signature()))
        };
        Ok((analytic, eval))
    }
}

/// Full check with default settings.
pub fn grad_check<F>(f: F, points: &[Tensor<f64>]) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    GradCheck::default().run(f, points)
}

/// Directional check of a whole network through the cross-entropy loss,
/// with respect to every parameter and a random `batch`-clip input.
pub fn model_gradcheck(
    config: &ModelConfig,
    seed: u64,
    batch: usize,
    mode: Mode,
    directions: usize,
) -> Result<GradCheckReport> {
    let model = build_model::<f64>(config, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(2);
    let mut shape = vec![batch];
    shape.extend_from_slice(&config.clip_shape());
    let mut points = model.params.tensors().to_vec();
    points.push(Tensor::randn(shape, 1.0, &mut rng)?);
    let labels: Vec<usize> = (0..batch).map(|i| i % config.num_classes).collect();
    let np = model.params.len();
    GradCheck {
        seed,
        ..GradCheck::default()
    }
    .run_directional(
        |tape, vars| {
            let out = model.forward_tape(tape, &vars[..np], vars[np], mode)?;
            tape.cross_entropy(out.logits, &labels)
        },
        &points,
        directions,
    )
}

/// Moves every entry at least `margin` away from zero, keeping its sign.
/// Applied to ReLU inputs so ±step never crosses the kink.
pub fn nudge_from_zero(t: &Tensor<f64>, margin: f64) -> Tensor<f64> {
    t.map(|v| {
        if v.abs() >= margin {
            v
        } else if v >= 0.0 {
            v + margin
        } else {
            v - margin
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_is_exact() {
        let x = Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap();
        let r = grad_check(
            |tape, v| {
                let sq = tape.mul(v[0], v[0])?;
                tape.weighted_sum(sq, Tensor::ones(vec![3])?)
            },
            &[x],
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-9, "{r:?}");
        assert_eq!(r.checked, 3);
    }

    #[test]
    fn wrong_gradient_flagged() {
        let x = Tensor::new(vec![2], vec![0.5, -1.5]).unwrap();
        let eval = |p: &[Tensor<f64>]| Ok((p[0].data().iter().map(|v| v * v).sum::<f64>(), 0));
        let bad = Tensor::new(vec![2], vec![1.0 * 1.01, -3.0]).unwrap();
        let r = GradCheck::default().compare(eval, &[x], &[bad]).unwrap();
        assert!(r.max_rel_error > 1e-3);
        assert_eq!(r.worst.unwrap().index, 0);
    }

    #[test]
    fn non_finite_reported_with_coordinate() {
        let x = Tensor::new(vec![2], vec![1.0, 0.0]).unwrap();
        let eval = |p: &[Tensor<f64>]| Ok((p[0].data().iter().map(|v| v.ln()).sum::<f64>(), 0));
        let g = Tensor::new(vec![2], vec![1.0, f64::INFINITY]).unwrap();
        match GradCheck::default().compare(eval, &[x], &[g]) {
            Err(Error::NonFinite { .. }) => {}
            other => panic!("expected non-finite failure, got {other:?}"),
        }
    }

    #[test]
    fn directional_flags_scaled_gradient() {
        let x = Tensor::new(vec![3], vec![0.5, -1.0, 2.0]).unwrap();
        let eval = |p: &[Tensor<f64>]| Ok((p[0].data().iter().map(|v| v * v * v).sum::<f64>(), 0));
        let exact = x.map(|v| 3.0 * v * v);
        let ok = GradCheck::default().compare_directional(eval, &[x.clone()], &[exact.clone()], 4).unwrap();
        assert!(ok.max_rel_error < 1e-8 && ok.checked == 4, "{ok:?}");
        let mut bad = exact;
        bad.scale_assign(1.01);
        let r = GradCheck::default().compare_directional(eval, &[x], &[bad], 4).unwrap();
        assert!(r.max_rel_error > 1e-3);
    }

    #[test]
    fn relu_kink_is_skipped() {
        let x = Tensor::new(vec![2], vec![1e-7, 1.0]).unwrap();
        let r = grad_check(
            |tape, v| {
                let y = tape.relu(v[0]);
                tape.weighted_sum(y, Tensor::ones(vec![2])?)
            },
            &[x],
        )
        .unwrap();
        assert_eq!(r.skipped_kinks, 1);
        assert_eq!(r.checked, 1);
    }
}
