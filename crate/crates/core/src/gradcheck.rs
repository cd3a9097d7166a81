//! Central finite-difference checking of tape gradients.
//!
//! The numeric side only ever evaluates forward values, so it is independent
//! of every backward rule it is used to audit.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::data::image::GrayImage;
use crate::error::Result;
use crate::kernels::Conv2dSpec;
use crate::model::Model;
use crate::param::Bound;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::training::{mle_loss, ForwardMode};

/// Outcome of one gradient check.
#[derive(Clone, Debug)]
pub struct GradReport {
    /// Largest per-element relative error over all inputs.
    pub max_rel_error: f64,
    /// Number of elements compared.
    pub checked: usize,
    /// Elements left out because the perturbation crossed a kink (a ReLU or
    /// max-pool switch) even at the reduced step.
    pub skipped: usize,
}

/// Relative error with a small floor on the denominator so that elements
/// whose true gradient is (near) zero are judged on absolute error.
pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Compares `backward` against central differences of the scalar returned
/// by `f` with respect to every element of every input.
///
/// `f` must be deterministic: it is re-run twice per perturbed element on a
/// fresh tape.
pub fn check<F>(inputs: &[Tensor], h: f64, f: F) -> Result<GradReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let loss = f(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;

    let eval = |perturbed: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::inference();
        let vars: Vec<Var> = perturbed.iter().map(|t| tape.leaf(t.clone(), false)).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out).item())
    };

    let mut worst: f64 = 0.0;
    let mut checked = 0;
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (k, input) in inputs.iter().enumerate() {
        let analytic = grads.get(vars[k]).unwrap_or_else(|| Tensor::zeros(input.shape().to_vec()));
        for i in 0..input.len() {
            let orig = input.data()[i];
            work[k].data_mut()[i] = orig + h;
            let plus = eval(&work)?;
            work[k].data_mut()[i] = orig - h;
            let minus = eval(&work)?;
            work[k].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            worst = worst.max(rel_error(analytic.data()[i], numeric));
            checked += 1;
        }
    }
    Ok(GradReport {
        max_rel_error: worst,
        checked,
        skipped: 0,
    })
}

/// One named gradient-check case built from a random instance.
pub struct OpCase {
    pub name: &'static str,
    pub inputs: Vec<Tensor>,
    #[allow(clippy::type_complexity)]
    pub build: Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>,
}

fn rand_tensor(rng: &mut impl Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::from_parts(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
}

/// Values bounded away from zero, so kinks (relu) are never straddled by `h`.
fn rand_away_from_zero(rng: &mut impl Rng, shape: &[usize]) -> Tensor {
    rand_tensor(rng, shape).map(|v| if v >= 0.0 { v + 0.05 } else { v - 0.05 })
}

/// Distinct values on a coarse grid, so a max never sits on a tie.
fn rand_distinct(rng: &mut impl Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let mut vals: Vec<f64> = (0..n).map(|i| i as f64 * 0.1 - n as f64 * 0.05).collect();
    vals.shuffle(rng);
    Tensor::from_parts(shape.to_vec(), vals)
}

/// Reduces an op output to a scalar through a fixed random weighting, so the
/// check exercises every output element with a distinct sensitivity.
fn project(tape: &mut Tape, out: Var, weights: &Tensor) -> Result<Var> {
    let w = tape.constant(weights.clone());
    let prod = tape.mul(out, w)?;
    tape.sum(prod)
}

/// Builds the per-op cases for one random instance drawn from `rng`.
pub fn op_cases(rng: &mut impl Rng) -> Vec<OpCase> {
    let mut cases: Vec<OpCase> = Vec::new();
    let (m, k, n) = (rng.random_range(1..4), rng.random_range(1..5), rng.random_range(1..4));

    let wmn = rand_tensor(rng, &[m, n]);
    cases.push(OpCase {
        name: "matmul",
        inputs: vec![rand_tensor(rng, &[m, k]), rand_tensor(rng, &[k, n])],
        build: Box::new(move |t, v| {
            let y = t.matmul(v[0], v[1])?;
            project(t, y, &wmn)
        }),
    });

    let w = rand_tensor(rng, &[m, n]);
    cases.push(OpCase {
        name: "add",
        inputs: vec![rand_tensor(rng, &[m, n]), rand_tensor(rng, &[m, n])],
        build: Box::new(move |t, v| {
            let y = t.add(v[0], v[1])?;
            project(t, y, &w)
        }),
    });

    let w = rand_tensor(rng, &[m, n]);
    cases.push(OpCase {
        name: "add_broadcast",
        inputs: vec![rand_tensor(rng, &[m, n]), rand_tensor(rng, &[n])],
        build: Box::new(move |t, v| {
            let y = t.add(v[0], v[1])?;
            project(t, y, &w)
        }),
    });

    let w = rand_tensor(rng, &[m, n]);
    cases.push(OpCase {
        name: "sub",
        inputs: vec![rand_tensor(rng, &[m, n]), rand_tensor(rng, &[m, n])],
        build: Box::new(move |t, v| {
            let y = t.sub(v[0], v[1])?;
            project(t, y, &w)
        }),
    });

    let w = rand_tensor(rng, &[m, n]);
    cases.push(OpCase {
        name: "multiply",
        inputs: vec![rand_tensor(rng, &[m, n]), rand_tensor(rng, &[m, n])],
        build: Box::new(move |t, v| {
            let y = t.mul(v[0], v[1])?;
            project(t, y, &w)
        }),
    });

    let w = rand_tensor(rng, &[m, n]);
    let factor: f64 = rng.random_range(-2.0..2.0);
    cases.push(OpCase {
        name: "scale",
        inputs: vec![rand_tensor(rng, &[m, n])],
        build: Box::new(move |t, v| {
            let y = t.scale(v[0], factor)?;
            project(t, y, &w)
        }),
    });

    let w = rand_tensor(rng, &[m, n]);
    cases.push(OpCase {
        name: "add_n",
        inputs: (0..3).map(|_| rand_tensor(rng, &[m, n])).collect(),
        build: Box::new(move |t, v| {
            let y = t.add_n(v)?;
            project(t, y, &w)
        }),
    });

    let axis = rng.random_range(0..2);
    let (a_shape, b_shape, out_shape) = if axis == 0 {
        ([m, n], [k, n], [m + k, n])
    } else {
        ([m, n], [m, k], [m, n + k])
    };
    let w = rand_tensor(rng, &out_shape);
    cases.push(OpCase {
        name: "concat",
        inputs: vec![rand_tensor(rng, &a_shape), rand_tensor(rng, &b_shape)],
        build: Box::new(move |t, v| {
            let y = t.concat(&[v[0], v[1]], axis)?;
            project(t, y, &w)
        }),
    });

    let axis = rng.random_range(0..3);
    let shape3 = [m, k, n];
    let mut reduced = shape3;
    reduced[axis] = 1;
    let w = rand_tensor(rng, &reduced);
    cases.push(OpCase {
        name: "mean",
        inputs: vec![rand_tensor(rng, &shape3)],
        build: Box::new(move |t, v| {
            let y = t.mean(v[0], axis)?;
            project(t, y, &w)
        }),
    });

    let c = rng.random_range(0.5..2.0);
    cases.push(OpCase {
        name: "sum",
        inputs: vec![rand_tensor(rng, &[m, k, n])],
        build: Box::new(move |t, v| {
            let s = t.sum(v[0])?;
            let sq = t.mul(s, s)?;
            t.scale(sq, c)
        }),
    });

    // conv2d with a randomly chosen padding/stride combination
    let (batch, cin, cout) = (rng.random_range(1..3), rng.random_range(1..3), rng.random_range(1..3));
    let (h, wd) = (rng.random_range(3..6), rng.random_range(3..6));
    let kh = rng.random_range(1..4usize).min(h);
    let kw = rng.random_range(1..4usize).min(wd);
    let spec = Conv2dSpec {
        kernel: (kh, kw),
        padding: (rng.random_range(0..2), rng.random_range(0..2)),
        stride: (rng.random_range(1..3), rng.random_range(1..3)),
    };
    let (ho, wo) = spec.out_dim(h, wd).expect("kernel fits");
    let w = rand_tensor(rng, &[batch, cout, ho, wo]);
    cases.push(OpCase {
        name: "conv2d",
        inputs: vec![
            rand_tensor(rng, &[batch, cin, h, wd]),
            rand_tensor(rng, &[cout, cin, kh, kw]),
            rand_tensor(rng, &[cout]),
        ],
        build: Box::new(move |t, v| {
            let y = t.conv2d(v[0], v[1], Some(v[2]), spec)?;
            project(t, y, &w)
        }),
    });

    let (ph, pw) = (rng.random_range(1..3), rng.random_range(1..3));
    let (oh, ow) = (rng.random_range(1..3), rng.random_range(1..3));
    let w = rand_tensor(rng, &[batch, cin, oh, ow]);
    cases.push(OpCase {
        name: "maxpool2d",
        inputs: vec![rand_distinct(rng, &[batch, cin, oh * ph, ow * pw])],
        build: Box::new(move |t, v| {
            let y = t.maxpool2d(v[0], (ph, pw), (ph, pw))?;
            project(t, y, &w)
        }),
    });

    let (bn_n, bn_c, bn_h, bn_w) = (rng.random_range(1..3), rng.random_range(1..3), 2, rng.random_range(2..4));
    let w = rand_tensor(rng, &[bn_n, bn_c, bn_h, bn_w]);
    cases.push(OpCase {
        name: "batchnorm2d_train",
        inputs: vec![
            rand_tensor(rng, &[bn_n, bn_c, bn_h, bn_w]),
            rand_tensor(rng, &[bn_c]),
            rand_tensor(rng, &[bn_c]),
        ],
        build: Box::new(move |t, v| {
            let (y, _) = t.batchnorm2d(v[0], v[1], v[2], None, 1e-5)?;
            project(t, y, &w)
        }),
    });

    let w = rand_tensor(rng, &[bn_n, bn_c, bn_h, bn_w]);
    let run_mean: Vec<f64> = (0..bn_c).map(|_| rng.random_range(-0.5..0.5)).collect();
    let run_var: Vec<f64> = (0..bn_c).map(|_| rng.random_range(0.5..2.0)).collect();
    cases.push(OpCase {
        name: "batchnorm2d_eval",
        inputs: vec![
            rand_tensor(rng, &[bn_n, bn_c, bn_h, bn_w]),
            rand_tensor(rng, &[bn_c]),
            rand_tensor(rng, &[bn_c]),
        ],
        build: Box::new(move |t, v| {
            let (y, _) = t.batchnorm2d(v[0], v[1], v[2], Some((&run_mean, &run_var)), 1e-5)?;
            project(t, y, &w)
        }),
    });

    for (name, which) in [("relu", 0), ("sigmoid", 1), ("tanh", 2), ("softmax", 3)] {
        let w = rand_tensor(rng, &[m, n + 1]);
        let input = if which == 0 {
            rand_away_from_zero(rng, &[m, n + 1])
        } else {
            rand_tensor(rng, &[m, n + 1]).map(|v| 2.0 * v)
        };
        cases.push(OpCase {
            name,
            inputs: vec![input],
            build: Box::new(move |t, v| {
                let y = match which {
                    0 => t.relu(v[0])?,
                    1 => t.sigmoid(v[0])?,
                    2 => t.tanh(v[0])?,
                    _ => t.softmax(v[0])?,
                };
                project(t, y, &w)
            }),
        });
    }

    let vocab = rng.random_range(2..6);
    let ids: Vec<usize> = (0..rng.random_range(1..5)).map(|_| rng.random_range(0..vocab)).collect();
    let w = rand_tensor(rng, &[ids.len(), k]);
    cases.push(OpCase {
        name: "embedding_lookup",
        inputs: vec![rand_tensor(rng, &[vocab, k])],
        build: Box::new(move |t, v| {
            let y = t.embedding(v[0], &ids)?;
            project(t, y, &w)
        }),
    });

    let w = rand_tensor(rng, &[m, n]);
    let mask_seed: u64 = rng.random();
    cases.push(OpCase {
        name: "dropout",
        inputs: vec![rand_tensor(rng, &[m, n])],
        build: Box::new(move |t, v| {
            let mut mask_rng = crate::rng::stream(mask_seed, &[]);
            let y = t.dropout(v[0], 0.4, true, &mut mask_rng)?;
            project(t, y, &w)
        }),
    });

    let classes = rng.random_range(2..6);
    let targets: Vec<usize> = (0..m).map(|_| rng.random_range(0..classes)).collect();
    cases.push(OpCase {
        name: "cross_entropy",
        inputs: vec![rand_tensor(rng, &[m, classes]).map(|v| 3.0 * v)],
        build: Box::new(move |t, v| t.cross_entropy(v[0], &targets)),
    });

    let w = rand_tensor(rng, &[n, m]);
    cases.push(OpCase {
        name: "transpose",
        inputs: vec![rand_tensor(rng, &[m, n])],
        build: Box::new(move |t, v| {
            let y = t.transpose(v[0])?;
            project(t, y, &w)
        }),
    });

    let w = rand_tensor(rng, &[n * m]);
    cases.push(OpCase {
        name: "reshape",
        inputs: vec![rand_tensor(rng, &[m, n])],
        build: Box::new(move |t, v| {
            let y = t.reshape(v[0], &[n * m])?;
            project(t, y, &w)
        }),
    });

    let index = rng.random_range(0..m);
    let w = rand_tensor(rng, &[k, n]);
    cases.push(OpCase {
        name: "select",
        inputs: vec![rand_tensor(rng, &[m, k, n])],
        build: Box::new(move |t, v| {
            let y = t.select(v[0], index)?;
            project(t, y, &w)
        }),
    });

    cases
}

/// Runs every op case for `instances` random instances and returns the
/// worst relative error seen per op, in catalog order.
pub fn op_suite(seed: u64, instances: usize, h: f64) -> Result<Vec<(&'static str, f64, usize)>> {
    let mut rng = crate::rng::stream(seed, &[0x6772_6164]);
    let mut worst: Vec<(&'static str, f64, usize)> = Vec::new();
    for _ in 0..instances {
        for case in op_cases(&mut rng) {
            let report = check(&case.inputs, h, &case.build)?;
            match worst.iter_mut().find(|(n, _, _)| *n == case.name) {
                Some(entry) => {
                    entry.1 = entry.1.max(report.max_rel_error);
                    entry.2 += 1;
                }
                None => worst.push((case.name, report.max_rel_error, 1)),
            }
        }
    }
    Ok(worst)
}

/// Checks the full model loss (encoder, positional encoding, attention,
/// decoder unrolled over `target`) against central differences. Up to
/// `per_param` randomly chosen elements of every trainable tensor are
/// perturbed; dropout masks repeat exactly because they are seeded per step.
pub fn model_check(
    model: &Model,
    images: &[&GrayImage],
    targets: &[&[usize]],
    mode: ForwardMode,
    h: f64,
    per_param: usize,
    rng: &mut impl Rng,
) -> Result<GradReport> {
    let ids: Vec<u64> = (0..images.len() as u64).collect();
    let loss_of = |m: &Model, tape: &mut Tape| -> Result<(Var, Bound)> {
        let bound = m.store.bind(tape);
        let (loss, _) = mle_loss(m, tape, &bound, images, targets, mode, &ids)?;
        Ok((loss, bound))
    };
    let mut tape = Tape::new();
    let (loss, bound) = loss_of(model, &mut tape)?;
    let grads = tape.backward(loss)?;
    let mut probe = model.clone();
    probe.store.accumulate(&bound, &grads);

    let eval = |m: &Model| -> Result<f64> {
        let mut tape = Tape::inference();
        let (loss, _) = loss_of(m, &mut tape)?;
        Ok(tape.value(loss).item())
    };
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    let mut skipped = 0;
    let names: Vec<String> = probe.store.iter().filter(|p| p.trainable).map(|p| p.name.clone()).collect();
    for name in names {
        let (n, analytic) = {
            let p = probe.store.by_name(&name).expect("listed above");
            let g = p.grad.clone().unwrap_or_else(|| Tensor::zeros(p.value.shape().to_vec()));
            (p.value.len(), g)
        };
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(rng);
        idx.truncate(per_param);
        for i in idx {
            let orig = probe.store.by_name(&name).expect("listed above").value.data()[i];
            let f0 = eval(&probe)?;
            let mut numeric = None;
            for step in [h, h * 1e-2] {
                let mut at = |v: f64| -> Result<f64> {
                    probe.store.by_name_mut(&name).expect("listed above").value.data_mut()[i] = v;
                    eval(&probe)
                };
                let plus = at(orig + step)?;
                let minus = at(orig - step)?;
                at(orig)?;
                let (right, left) = ((plus - f0) / step, (f0 - minus) / step);
                // one-sided slopes of a smooth function differ by O(step)
                if (right - left).abs() <= 1e-2 * right.abs().max(left.abs()).max(1.0) {
                    numeric = Some((plus - minus) / (2.0 * step));
                    break;
                }
            }
            match numeric {
                Some(numeric) => {
                    worst = worst.max(rel_error(analytic.data()[i], numeric));
                    checked += 1;
                }
                None => skipped += 1,
            }
        }
    }
    Ok(GradReport {
        max_rel_error: worst,
        checked,
        skipped,
    })
}
