//! Central-difference verification of every backward rule.
//!
//! Each case builds a small graph ending in a fixed random weighted sum (so
//! the upstream gradient is non-uniform and index errors cannot cancel),
//! computes analytic gradients with `backward`, and compares them against
//! `(f(x+h) - f(x-h)) / 2h` per element.

use rand::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256StarStar;

use super::tape::{NodeId, Tape};
use super::tensor::Tensor;
use super::Activation;

/// Central-difference step.
pub const FD_STEP: f64 = 1e-5;
/// Maximum accepted relative error.
pub const FD_TOLERANCE: f64 = 1e-4;
/// Absolute differences below this are treated as matching; central
/// differences carry ~1e-11 of cancellation noise around zero gradients.
pub const FD_ABS_GUARD: f64 = 1e-8;

/// Outcome of checking one layer type across all its seeds.
#[derive(Clone, Debug)]
pub struct LayerCheck {
    pub layer: String,
    pub max_rel_error: f64,
    pub passed: bool,
}

type BuildFn = dyn Fn(&mut Tape, &[Tensor]) -> (Vec<NodeId>, NodeId);

struct Case {
    inputs: Vec<Tensor>,
    build: Box<BuildFn>,
}

/// Worst relative error between `analytic` gradients and central differences
/// of `loss_fn`, across every element of every input.
pub fn max_rel_error(
    inputs: &[Tensor],
    analytic: &[Tensor],
    mut loss_fn: impl FnMut(&[Tensor]) -> f64,
) -> f64 {
    let mut worst = 0.0f64;
    for ti in 0..inputs.len() {
        for ei in 0..inputs[ti].numel() {
            let mut plus = inputs.to_vec();
            plus[ti].data_mut()[ei] += FD_STEP;
            let lp = loss_fn(&plus);
            let mut minus = inputs.to_vec();
            minus[ti].data_mut()[ei] -= FD_STEP;
            let lm = loss_fn(&minus);
            let numeric = (lp - lm) / (2.0 * FD_STEP);
            let ana = analytic[ti].data()[ei];
            let diff = (numeric - ana).abs();
            if diff > FD_ABS_GUARD {
                worst = worst.max(diff / (numeric.abs() + ana.abs()).max(FD_ABS_GUARD));
            }
        }
    }
    worst
}

fn check_case(case: &Case) -> f64 {
    let mut tape = Tape::new();
    let (ids, loss) = (case.build)(&mut tape, &case.inputs);
    tape.backward(loss).expect("gradcheck backward");
    let analytic: Vec<Tensor> = ids
        .iter()
        .zip(&case.inputs)
        .map(|(id, input)| {
            tape.grad(*id)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(input.shape()))
        })
        .collect();
    max_rel_error(&case.inputs, &analytic, |ts| {
        let mut tape = Tape::new();
        let (_, l) = (case.build)(&mut tape, ts);
        tape.value(l).scalar_value()
    })
}

fn rand_tensor<R: Rng>(rng: &mut R, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Tensor::from_vec(shape, data).expect("shape/product agree")
}

/// Random tensor kept away from zero so the relu kink is never crossed by
/// the finite-difference step.
fn rand_tensor_off_zero<R: Rng>(rng: &mut R, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let v: f64 = rng.gen_range(-1.0..1.0);
            v + 0.2 * v.signum()
        })
        .collect();
    Tensor::from_vec(shape, data).expect("shape/product agree")
}

fn rand_coeffs<R: Rng>(rng: &mut R, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

fn conv_case(rng: &mut Xoshiro256StarStar) -> Case {
    let inputs = vec![
        rand_tensor(rng, &[2, 2, 6, 6]),
        rand_tensor(rng, &[3, 2, 3, 3]),
        rand_tensor(rng, &[3]),
    ];
    let coeffs = rand_coeffs(rng, 2 * 3 * 4 * 4);
    Case {
        inputs,
        build: Box::new(move |tape, ts| {
            let ids: Vec<NodeId> = ts.iter().map(|t| tape.leaf(t.clone(), true)).collect();
            let y = tape.conv2d(ids[0], ids[1], ids[2]).unwrap();
            let l = tape.weighted_sum(y, &coeffs).unwrap();
            (ids, l)
        }),
    }
}

fn dense_case(rng: &mut Xoshiro256StarStar) -> Case {
    let inputs = vec![
        rand_tensor(rng, &[3, 4]),
        rand_tensor(rng, &[4, 5]),
        rand_tensor(rng, &[5]),
    ];
    let coeffs = rand_coeffs(rng, 3 * 5);
    Case {
        inputs,
        build: Box::new(move |tape, ts| {
            let ids: Vec<NodeId> = ts.iter().map(|t| tape.leaf(t.clone(), true)).collect();
            let y = tape
                .dense(ids[0], ids[1], ids[2], Activation::Identity)
                .unwrap();
            let l = tape.weighted_sum(y, &coeffs).unwrap();
            (ids, l)
        }),
    }
}

fn unary_case(
    rng: &mut Xoshiro256StarStar,
    shape: &[usize],
    off_zero: bool,
    f: impl Fn(&mut Tape, NodeId) -> NodeId + 'static,
) -> Case {
    let x = if off_zero {
        rand_tensor_off_zero(rng, shape)
    } else {
        rand_tensor(rng, shape)
    };
    let numel = x.numel();
    let coeffs = rand_coeffs(rng, numel);
    Case {
        inputs: vec![x],
        build: Box::new(move |tape, ts| {
            let x = tape.leaf(ts[0].clone(), true);
            let y = f(tape, x);
            let l = tape.weighted_sum(y, &coeffs).unwrap();
            (vec![x], l)
        }),
    }
}

fn maxpool_case(rng: &mut Xoshiro256StarStar) -> Case {
    // 7x7 pooled by 3 -> 2x2 with dropped trailing row/column.
    let x = rand_tensor(rng, &[2, 2, 7, 7]);
    let coeffs = rand_coeffs(rng, 2 * 2 * 2 * 2);
    Case {
        inputs: vec![x],
        build: Box::new(move |tape, ts| {
            let x = tape.leaf(ts[0].clone(), true);
            let y = tape.maxpool2d(x, 3).unwrap();
            let l = tape.weighted_sum(y, &coeffs).unwrap();
            (vec![x], l)
        }),
    }
}

fn batchnorm_case(rng: &mut Xoshiro256StarStar) -> Case {
    let inputs = vec![
        rand_tensor(rng, &[3, 2, 4, 4]),
        rand_tensor(rng, &[2]),
        rand_tensor(rng, &[2]),
    ];
    let coeffs = rand_coeffs(rng, 3 * 2 * 4 * 4);
    Case {
        inputs,
        build: Box::new(move |tape, ts| {
            let ids: Vec<NodeId> = ts.iter().map(|t| tape.leaf(t.clone(), true)).collect();
            let (y, _) = tape.batchnorm_train(ids[0], ids[1], ids[2]).unwrap();
            let l = tape.weighted_sum(y, &coeffs).unwrap();
            (ids, l)
        }),
    }
}

fn dropout_case(rng: &mut Xoshiro256StarStar) -> Case {
    let x = rand_tensor(rng, &[3, 10]);
    let coeffs = rand_coeffs(rng, 30);
    let mask_seed: u64 = rng.gen();
    Case {
        inputs: vec![x],
        build: Box::new(move |tape, ts| {
            let x = tape.leaf(ts[0].clone(), true);
            // Same mask on every evaluation so the loss stays differentiable.
            let mut mask_rng = Xoshiro256StarStar::seed_from_u64(mask_seed);
            let y = tape.dropout(x, 0.4, &mut mask_rng);
            let l = tape.weighted_sum(y, &coeffs).unwrap();
            (vec![x], l)
        }),
    }
}

fn flatten_case(rng: &mut Xoshiro256StarStar) -> Case {
    let x = rand_tensor(rng, &[2, 2, 3, 3]);
    let coeffs = rand_coeffs(rng, 36);
    Case {
        inputs: vec![x],
        build: Box::new(move |tape, ts| {
            let x = tape.leaf(ts[0].clone(), true);
            let y = tape.flatten(x).unwrap();
            let l = tape.weighted_sum(y, &coeffs).unwrap();
            (vec![x], l)
        }),
    }
}

fn concat_case(rng: &mut Xoshiro256StarStar) -> Case {
    let inputs = vec![rand_tensor(rng, &[2, 3]), rand_tensor(rng, &[2, 4])];
    let coeffs = rand_coeffs(rng, 14);
    Case {
        inputs,
        build: Box::new(move |tape, ts| {
            let a = tape.leaf(ts[0].clone(), true);
            let b = tape.leaf(ts[1].clone(), true);
            let y = tape.concat(a, b).unwrap();
            let l = tape.weighted_sum(y, &coeffs).unwrap();
            (vec![a, b], l)
        }),
    }
}

fn softmax_xent_case(rng: &mut Xoshiro256StarStar) -> Case {
    let logits = rand_tensor(rng, &[3, 7]);
    let labels: Vec<usize> = (0..3).map(|_| rng.gen_range(0..7)).collect();
    Case {
        inputs: vec![logits],
        build: Box::new(move |tape, ts| {
            let x = tape.leaf(ts[0].clone(), true);
            let l = tape.softmax_cross_entropy(x, &labels).unwrap();
            (vec![x], l)
        }),
    }
}

fn build_case(layer: &str, rng: &mut Xoshiro256StarStar) -> Case {
    match layer {
        "conv2d" => conv_case(rng),
        "dense" => dense_case(rng),
        "sigmoid" => unary_case(rng, &[3, 6], false, |t, x| t.sigmoid(x)),
        "relu" => unary_case(rng, &[3, 6], true, |t, x| t.relu(x)),
        "softmax" => unary_case(rng, &[2, 5], false, |t, x| t.softmax(x).unwrap()),
        "maxpool2d" => maxpool_case(rng),
        "batchnorm" => batchnorm_case(rng),
        "dropout" => dropout_case(rng),
        "flatten" => flatten_case(rng),
        "concat" => concat_case(rng),
        "softmax_cross_entropy" => softmax_xent_case(rng),
        other => panic!("unknown gradcheck layer {other}"),
    }
}

/// Layer types covered by the gradient check, in report order.
pub const LAYERS: [&str; 11] = [
    "conv2d",
    "dense",
    "sigmoid",
    "relu",
    "softmax",
    "maxpool2d",
    "batchnorm",
    "dropout",
    "flatten",
    "concat",
    "softmax_cross_entropy",
];

/// Ten fixed seeds per layer.
pub fn default_seeds() -> Vec<u64> {
    (1..=10).collect()
}

/// Runs every layer check across the given seeds.
pub fn run_all(seeds: &[u64]) -> Vec<LayerCheck> {
    LAYERS
        .iter()
        .map(|layer| {
            let mut worst = 0.0f64;
            for &seed in seeds {
                let mut rng = Xoshiro256StarStar::seed_from_u64(seed);
                let case = build_case(layer, &mut rng);
                worst = worst.max(check_case(&case));
            }
            LayerCheck {
                layer: layer.to_string(),
                max_rel_error: worst,
                passed: worst < FD_TOLERANCE,
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_layers_pass_with_default_seeds() {
        for check in run_all(&default_seeds()) {
            assert!(
                check.passed,
                "layer {} failed gradient check: max rel error {:.3e}",
                check.layer, check.max_rel_error
            );
        }
    }

    #[test]
    fn corrupted_analytic_gradient_is_flagged() {
        let mut rng = Xoshiro256StarStar::seed_from_u64(3);
        let case = build_case("dense", &mut rng);
        let mut tape = Tape::new();
        let (ids, loss) = (case.build)(&mut tape, &case.inputs);
        tape.backward(loss).unwrap();
        let mut analytic: Vec<Tensor> = ids
            .iter()
            .map(|id| tape.grad(*id).cloned().unwrap())
            .collect();
        // Corrupt one weight gradient by 10%.
        analytic[1].data_mut()[0] *= 1.1;
        let err = max_rel_error(&case.inputs, &analytic, |ts| {
            let mut tape = Tape::new();
            let (_, l) = (case.build)(&mut tape, ts);
            tape.value(l).scalar_value()
        });
        assert!(
            err > FD_TOLERANCE,
            "corrupted gradient slipped through: {err:.3e}"
        );
    }
}
