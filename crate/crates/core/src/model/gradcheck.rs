use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::network::{backward_accumulate, run};
use super::{init_params, Activation, Architecture, Mode, ModelParams, Result};
use crate::numops::{relative_error, Matrix};

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckOptions {
    /// Largest central-difference step; halved until two steps agree.
    pub step: f64,
    pub min_step: f64,
    pub tolerance: f64,
    pub seed: u64,
    /// Negates the analytic gradient of the first tensor. Used to confirm
    /// the check can fail.
    pub flip_sign: bool,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-3,
            min_step: 1e-7,
            tolerance: 1e-6,
            seed: 0,
            flip_sign: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TensorCheck {
    pub name: String,
    pub max_rel_error: f64,
    pub checked: usize,
    /// Coordinates where no step size avoided a ReLU or pooling kink.
    pub skipped: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckReport {
    pub tensors: Vec<TensorCheck>,
    pub tolerance: f64,
}

impl GradcheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.tensors
            .iter()
            .map(|t| t.max_rel_error)
            .fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.max_rel_error() < self.tolerance
            && self.tensors.iter().all(|t| t.checked > 0 || t.skipped == 0)
    }
}

/// The one-order network used by the default check: `d=2, T=10, K₁=2, n=3`.
pub fn tiny_architecture() -> Architecture {
    Architecture {
        num_slots: 4,
        rows: 2,
        window: 10,
        filter_sizes: vec![3],
        pool_sizes: vec![2],
        maps: vec![2],
        dense_dim: 3,
        dropout: 0.2,
        activation: Activation::Relu,
    }
}

/// A random valid architecture with at most 3 orders, 4 rows, 16 days and
/// 3 maps per order.
pub fn random_tiny_architecture<R: Rng + ?Sized>(rng: &mut R) -> Architecture {
    loop {
        let orders = rng.random_range(1..=3);
        let arch = Architecture {
            num_slots: rng.random_range(1..=5),
            rows: rng.random_range(1..=4),
            window: rng.random_range(4..=16),
            filter_sizes: (0..orders).map(|_| rng.random_range(1..=4)).collect(),
            pool_sizes: (0..orders).map(|_| rng.random_range(1..=3)).collect(),
            maps: (0..orders).map(|_| rng.random_range(1..=3)).collect(),
            dense_dim: rng.random_range(1..=4),
            dropout: 0.2,
            activation: Activation::Relu,
        };
        if arch.validate().is_ok() {
            return arch;
        }
    }
}

/// Parameters with every entry nonzero so gradients reach all tensors.
fn check_point(arch: &Architecture, seed: u64) -> Result<ModelParams> {
    let mut params = init_params(arch, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
    let head = params.layout().find("w").unwrap().offset;
    for (i, v) in params.values_mut().iter_mut().enumerate() {
        if i >= head {
            *v = rng.random_range(0.5..1.5) * if rng.random_bool(0.5) { 1.0 } else { -1.0 };
        } else if *v == 0.0 {
            *v = rng.random_range(-0.3..0.3);
        }
    }
    Ok(params)
}

/// Compares the analytic gradient of the prediction against central
/// differences for every parameter, with the dropout mask held fixed.
///
/// The prediction is piecewise linear in each single parameter, so a
/// central difference is exact unless the step straddles a kink. Each
/// coordinate is differenced at step `h` and `h/2`; on disagreement the step
/// shrinks, and coordinates that never settle are counted as skipped.
pub fn gradcheck(arch: &Architecture, opts: &GradcheckOptions) -> Result<GradcheckReport> {
    arch.validate()?;
    let params = check_point(arch, opts.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed.wrapping_add(2));
    let inputs: Vec<Matrix> = (0..arch.num_slots)
        .map(|_| {
            let v = (0..arch.rows * arch.window)
                .map(|_| rng.random_range(-2.0..2.0))
                .collect();
            Matrix::from_vec(arch.rows, arch.window, v).expect("shape")
        })
        .collect();
    let (f0, trace) = run(inputs.clone(), &params, Mode::Train(&mut rng))?;
    let trace = trace.expect("train mode records a trace");
    let mask = trace.mask().to_vec();
    let mut grads = params.zeros_like();
    backward_accumulate(&trace, &params, 1.0, &mut grads, None)?;
    if opts.flip_sign {
        let t = &grads.layout().tensors[0].clone();
        grads.values_mut()[t.offset..t.offset + t.len]
            .iter_mut()
            .for_each(|g| *g = -*g);
    }

    let mut work = params.clone();
    let mut eval = |i: usize, x: f64| -> Result<f64> {
        work.values_mut()[i] = x;
        run(inputs.clone(), &work, Mode::Masked(&mask)).map(|(y, _)| y)
    };
    let noise = 64.0 * f64::EPSILON * f0.abs().max(1.0);

    let mut tensors = Vec::new();
    for spec in &params.layout().tensors {
        let mut check = TensorCheck {
            name: spec.name.clone(),
            max_rel_error: 0.0,
            checked: 0,
            skipped: 0,
        };
        for i in spec.offset..spec.offset + spec.len {
            let x = params.values()[i];
            let mut h = opts.step;
            let mut estimate = None;
            while h >= opts.min_step {
                let wide = (eval(i, x + h)? - eval(i, x - h)?) / (2.0 * h);
                let narrow = (eval(i, x + h / 2.0)? - eval(i, x - h / 2.0)?) / h;
                if (wide - narrow).abs() <= 1e-9 * wide.abs().max(narrow.abs()) + noise / h {
                    estimate = Some(narrow);
                    break;
                }
                h /= 8.0;
            }
            eval(i, x)?;
            match estimate {
                Some(n) => {
                    check.checked += 1;
                    check.max_rel_error = check
                        .max_rel_error
                        .max(relative_error(grads.values()[i], n));
                }
                None => check.skipped += 1,
            }
        }
        tensors.push(check);
    }
    Ok(GradcheckReport {
        tensors,
        tolerance: opts.tolerance,
    })
}
