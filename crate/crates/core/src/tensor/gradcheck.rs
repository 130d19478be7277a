//! Central finite-difference gradient checks for every differentiable op.
//!
//! Each case builds a scalar loss from seeded inputs, compares the tape's
//! analytic gradients against `(f(x+h) - f(x-h)) / 2h` in f64, and reports the
//! worst relative error. The losses are random weighted sums of the op output
//! so that permutation mistakes in the backward pass cannot cancel out.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::conv::PoolKind;
use super::norm::BnStats;
use super::{grad_slot, Tape, TensorId};

pub const FD_STEP: f64 = 1e-3;
pub const REL_ERR_THRESHOLD: f64 = 1e-4;

type BuildFn = Box<dyn Fn(&mut Tape<f64>, &[TensorId]) -> TensorId + Send + Sync>;

pub struct CheckCase {
    pub name: &'static str,
    inputs: Vec<(Vec<usize>, Vec<f64>)>,
    build: BuildFn,
}

impl CheckCase {
    /// Build a custom case, e.g. an end-to-end model check.
    pub fn new(
        name: &'static str,
        inputs: Vec<(Vec<usize>, Vec<f64>)>,
        build: impl Fn(&mut Tape<f64>, &[TensorId]) -> TensorId + Send + Sync + 'static,
    ) -> Self {
        case(name, inputs, build)
    }
}

#[derive(Debug, Clone)]
pub struct CheckResult {
    pub name: &'static str,
    pub max_rel_err: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_err < REL_ERR_THRESHOLD
    }
}

fn uniform(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(lo..hi)).collect()
}

/// Values bounded away from zero, for kinked activations.
fn off_zero(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let mag = rng.gen_range(0.1..1.0);
            if rng.gen_bool(0.5) {
                mag
            } else {
                -mag
            }
        })
        .collect()
}

/// Distinct values with pairwise gaps far above the FD step, for max pooling.
fn well_separated(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let mut order: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }
    order.into_iter().map(|r| r as f64 * 0.1 - 1.0).collect()
}

/// loss = sum(w .* out) with fixed pseudo-random weights.
fn weighted_loss(tape: &mut Tape<f64>, out: TensorId, weights: &[f64]) -> TensorId {
    let shape = tape.shape(out).to_vec();
    let w = tape.leaf(weights.to_vec(), &shape, false).expect("weights match output");
    let p = tape.mul(out, w).expect("same shape");
    tape.sum_all(p)
}

fn case(
    name: &'static str,
    inputs: Vec<(Vec<usize>, Vec<f64>)>,
    build: impl Fn(&mut Tape<f64>, &[TensorId]) -> TensorId + Send + Sync + 'static,
) -> CheckCase {
    CheckCase {
        name,
        inputs,
        build: Box::new(build),
    }
}

/// All registered differentiable-op checks, one entry per op.
pub fn registry() -> Vec<CheckCase> {
    let mut cases = Vec::new();
    let mut seed = 0u64;
    let rng = |s: &mut u64| {
        *s += 1;
        ChaCha8Rng::seed_from_u64(*s * 7919)
    };

    {
        let mut r = rng(&mut seed);
        let w = uniform(&mut r, 6, -1.0, 1.0);
        cases.push(case(
            "add",
            vec![
                (vec![2, 3], uniform(&mut r, 6, -1.0, 1.0)),
                (vec![2, 3], uniform(&mut r, 6, -1.0, 1.0)),
            ],
            move |t, ids| {
                let y = t.add(ids[0], ids[1]).unwrap();
                weighted_loss(t, y, &w)
            },
        ));
    }
    {
        let mut r = rng(&mut seed);
        let w = uniform(&mut r, 12, -1.0, 1.0);
        cases.push(case(
            "add_broadcast",
            vec![
                (vec![2, 2, 3], uniform(&mut r, 12, -1.0, 1.0)),
                (vec![3], uniform(&mut r, 3, -1.0, 1.0)),
            ],
            move |t, ids| {
                let y = t.add_broadcast(ids[0], ids[1]).unwrap();
                weighted_loss(t, y, &w)
            },
        ));
    }
    {
        let mut r = rng(&mut seed);
        let w = uniform(&mut r, 6, -1.0, 1.0);
        cases.push(case(
            "mul",
            vec![
                (vec![2, 3], uniform(&mut r, 6, -1.0, 1.0)),
                (vec![2, 3], uniform(&mut r, 6, -1.0, 1.0)),
            ],
            move |t, ids| {
                let y = t.mul(ids[0], ids[1]).unwrap();
                weighted_loss(t, y, &w)
            },
        ));
    }
    {
        let mut r = rng(&mut seed);
        let w = uniform(&mut r, 5, -1.0, 1.0);
        cases.push(case(
            "scale",
            vec![(vec![5], uniform(&mut r, 5, -1.0, 1.0))],
            move |t, ids| {
                let y = t.scale(ids[0], -1.7);
                weighted_loss(t, y, &w)
            },
        ));
    }
    {
        let mut r = rng(&mut seed);
        let w = uniform(&mut r, 8, -1.0, 1.0);
        cases.push(case(
            "linear",
            vec![
                (vec![2, 3], uniform(&mut r, 6, -1.0, 1.0)),
                (vec![4, 3], uniform(&mut r, 12, -1.0, 1.0)),
                (vec![4], uniform(&mut r, 4, -1.0, 1.0)),
            ],
            move |t, ids| {
                let y = t.linear(ids[0], ids[1], Some(ids[2])).unwrap();
                weighted_loss(t, y, &w)
            },
        ));
    }
    {
        let mut r = rng(&mut seed);
        let w = uniform(&mut r, 2 * 3 * 2, -1.0, 1.0);
        cases.push(case(
            "matmul",
            vec![
                (vec![2, 3, 4], uniform(&mut r, 24, -1.0, 1.0)),
                (vec![2, 4, 2], uniform(&mut r, 16, -1.0, 1.0)),
            ],
            move |t, ids| {
                let y = t.matmul(ids[0], ids[1]).unwrap();
                weighted_loss(t, y, &w)
            },
        ));
    }
    {
        let mut r = rng(&mut seed);
        let w = uniform(&mut r, 24, -1.0, 1.0);
        cases.push(case(
            "permute",
            vec![(vec![2, 3, 4], uniform(&mut r, 24, -1.0, 1.0))],
            move |t, ids| {
                let y = t.permute(ids[0], &[2, 0, 1]).unwrap();
                weighted_loss(t, y, &w)
            },
        ));
    }
    {
        let mut r = rng(&mut seed);
        let w = uniform(&mut r, 12, -1.0, 1.0);
        cases.push(case(
            "reshape",
            vec![(vec![2, 6], uniform(&mut r, 12, -1.0, 1.0))],
            move |t, ids| {
                let y = t.reshape(ids[0], &[3, 4]).unwrap();
                weighted_loss(t, y, &w)
            },
        ));
    }
    {
        let mut r = rng(&mut seed);
        let w = uniform(&mut r, 2 * 3 * 3, -1.0, 1.0);
        cases.push(case(
            "concat",
            vec![
                (vec![2, 2, 3], uniform(&mut r, 12, -1.0, 1.0)),
                (vec![2, 1, 3], uniform(&mut r, 6, -1.0, 1.0)),
            ],
            move |t, ids| {
                let y = t.concat(1, &[ids[0], ids[1]]).unwrap();
                weighted_loss(t, y, &w)
            },
        ));
    }
    {
        let mut r = rng(&mut seed);
        let w = uniform(&mut r, 3 * 6, -1.0, 1.0);
        cases.push(case(
            "broadcast_batch",
            vec![(vec![2, 3], uniform(&mut r, 6, -1.0, 1.0))],
            move |t, ids| {
                let y = t.broadcast_batch(ids[0], 3).unwrap();
                weighted_loss(t, y, &w)
            },
        ));
    }
    {
        let mut r = rng(&mut seed);
        let w = uniform(&mut r, 2 * 3 * 64, -1.0, 1.0);
        cases.push(case(
            "conv3d",
            vec![
                (vec![2, 2, 4, 4, 4], uniform(&mut r, 256, -1.0, 1.0)),
                (vec![3, 2, 3, 3, 3], uniform(&mut r, 162, -1.0, 1.0)),
                (vec![3], uniform(&mut r, 3, -1.0, 1.0)),
            ],
            move |t, ids| {
                let y = t.conv3d(ids[0], ids[1], Some(ids[2]), 1, 1).unwrap();
                weighted_loss(t, y, &w)
            },
        ));
    }
    {
        let mut r = rng(&mut seed);
        let w = uniform(&mut r, 2 * 27, -1.0, 1.0);
        cases.push(case(
            "conv3d_strided",
            vec![
                (vec![1, 2, 5, 5, 5], uniform(&mut r, 250, -1.0, 1.0)),
                (vec![2, 2, 3, 3, 3], uniform(&mut r, 108, -1.0, 1.0)),
                (vec![2], uniform(&mut r, 2, -1.0, 1.0)),
            ],
            move |t, ids| {
                let y = t.conv3d(ids[0], ids[1], Some(ids[2]), 2, 1).unwrap();
                weighted_loss(t, y, &w)
            },
        ));
    }
    {
        let mut r = rng(&mut seed);
        let w = uniform(&mut r, 2 * 27, -1.0, 1.0);
        cases.push(case(
            "maxpool3d",
            vec![(vec![1, 2, 5, 5, 5], well_separated(&mut r, 250))],
            move |t, ids| {
                let y = t.pool3d(ids[0], PoolKind::Max, 3, 2, 1).unwrap();
                weighted_loss(t, y, &w)
            },
        ));
    }
    {
        let mut r = rng(&mut seed);
        let w = uniform(&mut r, 2 * 8, -1.0, 1.0);
        cases.push(case(
            "avgpool3d",
            vec![(vec![1, 2, 4, 4, 4], uniform(&mut r, 128, -1.0, 1.0))],
            move |t, ids| {
                let y = t.pool3d(ids[0], PoolKind::Average, 2, 2, 0).unwrap();
                weighted_loss(t, y, &w)
            },
        ));
    }
    {
        let mut r = rng(&mut seed);
        let w = uniform(&mut r, 3 * 2 * 4, -1.0, 1.0);
        cases.push(case(
            "batchnorm_train",
            vec![
                (vec![3, 2, 4], uniform(&mut r, 24, -1.0, 1.0)),
                (vec![2], uniform(&mut r, 2, 0.5, 1.5)),
                (vec![2], uniform(&mut r, 2, -0.5, 0.5)),
            ],
            move |t, ids| {
                let mut stats = BnStats::new(2);
                let y = t.batchnorm(ids[0], ids[1], ids[2], &mut stats, true).unwrap();
                weighted_loss(t, y, &w)
            },
        ));
    }
    {
        let mut r = rng(&mut seed);
        let w = uniform(&mut r, 3 * 2 * 4, -1.0, 1.0);
        cases.push(case(
            "batchnorm_eval",
            vec![
                (vec![3, 2, 4], uniform(&mut r, 24, -1.0, 1.0)),
                (vec![2], uniform(&mut r, 2, 0.5, 1.5)),
                (vec![2], uniform(&mut r, 2, -0.5, 0.5)),
            ],
            move |t, ids| {
                let mut stats = BnStats {
                    mean: vec![0.3, -0.2],
                    var: vec![1.7, 0.9],
                };
                let y = t.batchnorm(ids[0], ids[1], ids[2], &mut stats, false).unwrap();
                weighted_loss(t, y, &w)
            },
        ));
    }
    {
        let mut r = rng(&mut seed);
        let w = uniform(&mut r, 15, -1.0, 1.0);
        cases.push(case(
            "layernorm",
            vec![
                (vec![3, 5], uniform(&mut r, 15, -1.0, 1.0)),
                (vec![5], uniform(&mut r, 5, 0.5, 1.5)),
                (vec![5], uniform(&mut r, 5, -0.5, 0.5)),
            ],
            move |t, ids| {
                let y = t.layernorm(ids[0], ids[1], ids[2]).unwrap();
                weighted_loss(t, y, &w)
            },
        ));
    }
    {
        let mut r = rng(&mut seed);
        let w = uniform(&mut r, 7, -1.0, 1.0);
        cases.push(case(
            "relu",
            vec![(vec![7], off_zero(&mut r, 7))],
            move |t, ids| {
                let y = t.relu(ids[0]);
                weighted_loss(t, y, &w)
            },
        ));
    }
    {
        let mut r = rng(&mut seed);
        let w = uniform(&mut r, 7, -1.0, 1.0);
        cases.push(case(
            "gelu",
            vec![(vec![7], uniform(&mut r, 7, -2.0, 2.0))],
            move |t, ids| {
                let y = t.gelu(ids[0]);
                weighted_loss(t, y, &w)
            },
        ));
    }
    {
        let mut r = rng(&mut seed);
        let w = uniform(&mut r, 7, -1.0, 1.0);
        cases.push(case(
            "tanh",
            vec![(vec![7], uniform(&mut r, 7, -2.0, 2.0))],
            move |t, ids| {
                let y = t.tanh(ids[0]);
                weighted_loss(t, y, &w)
            },
        ));
    }
    {
        let mut r = rng(&mut seed);
        let w = uniform(&mut r, 15, -1.0, 1.0);
        cases.push(case(
            "softmax",
            vec![(vec![3, 5], uniform(&mut r, 15, -2.0, 2.0))],
            move |t, ids| {
                let y = t.softmax_last_axis(ids[0]);
                weighted_loss(t, y, &w)
            },
        ));
    }
    {
        let mut r = rng(&mut seed);
        cases.push(case(
            "cross_entropy",
            vec![(vec![4, 3], uniform(&mut r, 12, -2.0, 2.0))],
            move |t, ids| t.cross_entropy(ids[0], &[0, 2, 1, 1]).unwrap(),
        ));
    }
    {
        let mut r = rng(&mut seed);
        let w = uniform(&mut r, 8, -1.0, 1.0);
        cases.push(case(
            "mean_axis",
            vec![(vec![2, 3, 4], uniform(&mut r, 24, -1.0, 1.0))],
            move |t, ids| {
                let y = t.mean_axis(ids[0], 1).unwrap();
                weighted_loss(t, y, &w)
            },
        ));
    }
    {
        let mut r = rng(&mut seed);
        cases.push(case(
            "sum_all",
            vec![(vec![6], uniform(&mut r, 6, -1.0, 1.0))],
            move |t, ids| t.sum_all(ids[0]),
        ));
    }

    cases
}

/// Negative-control fixture: an identity op whose backward inflates the
/// gradient by 5%, so the check must fail and name it.
pub fn corrupt_fixture() -> CheckCase {
    let mut r = ChaCha8Rng::seed_from_u64(99);
    let w = uniform(&mut r, 6, -1.0, 1.0);
    case(
        "corrupt-fixture",
        vec![(vec![6], uniform(&mut r, 6, -1.0, 1.0))],
        move |t, ids| {
            let y = faulty_identity(t, ids[0]);
            weighted_loss(t, y, &w)
        },
    )
}

fn faulty_identity(tape: &mut Tape<f64>, x: TensorId) -> TensorId {
    let data = tape.data(x).to_vec();
    let shape = tape.shape(x).to_vec();
    let requires = tape.requires_grad(x);
    let backward = requires.then(|| {
        Box::new(move |_: &[super::Tensor<f64>], g: &[f64], grads: &mut super::GradStore<f64>| {
            let slot = grad_slot(grads, x, g.len());
            for i in 0..g.len() {
                slot[i] += g[i] * 1.05;
            }
        }) as super::BackwardFn<f64>
    });
    tape.push(data, shape, requires, backward)
}

/// Run one case: analytic sweep, then central differences per input element.
pub fn run_case(case: &CheckCase) -> CheckResult {
    let mut tape = Tape::new();
    let ids: Vec<TensorId> = case
        .inputs
        .iter()
        .map(|(s, v)| tape.leaf(v.clone(), s, true).expect("case input"))
        .collect();
    let loss = (case.build)(&mut tape, &ids);
    tape.backward(loss).expect("case loss is scalar");
    let analytic: Vec<Vec<f64>> = ids
        .iter()
        .map(|&id| tape.grad(id).expect("populated").to_vec())
        .collect();

    let eval = |j: usize, e: usize, delta: f64| -> f64 {
        let mut t = Tape::new();
        let ids: Vec<TensorId> = case
            .inputs
            .iter()
            .enumerate()
            .map(|(jj, (s, v))| {
                let mut vv = v.clone();
                if jj == j {
                    vv[e] += delta;
                }
                t.leaf(vv, s, false).expect("case input")
            })
            .collect();
        let l = (case.build)(&mut t, &ids);
        t.data(l)[0]
    };

    let mut max_rel: f64 = 0.0;
    for (j, (_, values)) in case.inputs.iter().enumerate() {
        for e in 0..values.len() {
            let numeric = (eval(j, e, FD_STEP) - eval(j, e, -FD_STEP)) / (2.0 * FD_STEP);
            let a = analytic[j][e];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1.0);
            max_rel = max_rel.max(rel);
        }
    }
    CheckResult {
        name: case.name,
        max_rel_err: max_rel,
    }
}

pub fn run_all(cases: &[CheckCase]) -> Vec<CheckResult> {
    cases.iter().map(run_case).collect()
}
