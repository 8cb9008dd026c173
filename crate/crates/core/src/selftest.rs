//! Verification suites shared by the `selftest` command and the test targets:
//! an exhaustive CTC-versus-enumeration sweep and central finite-difference
//! gradient checks for every layer.

use ndarray::{Array, Array1, Array2, Array3, Dimension, ShapeBuilder};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::ctc::{ctc_loss, ctc_loss_grad, oracle_ctc};
use crate::error::Result;
use crate::nn::{
    weighted_xent, weighted_xent_grad, BiLstm, Conv2d, Dense, Dropout, Layer, MaxPool2d, Mode, Parameterized,
    Relu, Softmax,
};

/// Central difference step.
pub const FD_STEP: f64 = 1e-5;
/// Relative error denominators never drop below this, so gradients that are
/// zero up to rounding compare on an absolute scale.
pub const REL_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckReport {
    pub name: &'static str,
    pub instances: usize,
    pub max_rel_err: f64,
}

impl CheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err < tol
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepReport {
    pub instances: usize,
    pub max_abs_diff: f64,
}

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

fn max_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| rel_err(a, n))
        .fold(0.0, f64::max)
}

/// Central-difference gradient of `f` with respect to every entry of `x`.
pub fn fd_array<D: Dimension>(x: &Array<f64, D>, f: impl Fn(&Array<f64, D>) -> f64) -> Array<f64, D> {
    let mut probe = x.clone();
    let mut grad = Array::zeros(x.raw_dim());
    let n = x.len();
    for i in 0..n {
        let orig = probe.as_slice().expect("contiguous")[i];
        probe.as_slice_mut().expect("contiguous")[i] = orig + FD_STEP;
        let up = f(&probe);
        probe.as_slice_mut().expect("contiguous")[i] = orig - FD_STEP;
        let down = f(&probe);
        probe.as_slice_mut().expect("contiguous")[i] = orig;
        grad.as_slice_mut().expect("contiguous")[i] = (up - down) / (2.0 * FD_STEP);
    }
    grad
}

/// Central-difference gradient with respect to the parameters at `indices`
/// (all parameters when `None`).
pub fn fd_params<P: Parameterized<f64> + Clone>(p: &P, indices: Option<&[usize]>, f: impl Fn(&P) -> f64) -> Vec<f64> {
    let base = p.flat();
    let all: Vec<usize> = (0..base.len()).collect();
    let idx = indices.unwrap_or(&all);
    let mut probe = p.clone();
    let mut flat = base.clone();
    idx.iter()
        .map(|&i| {
            flat[i] = base[i] + FD_STEP;
            probe.set_flat(&flat);
            let up = f(&probe);
            flat[i] = base[i] - FD_STEP;
            probe.set_flat(&flat);
            let down = f(&probe);
            flat[i] = base[i];
            (up - down) / (2.0 * FD_STEP)
        })
        .collect()
}

fn random_array<D: Dimension, Sh: ShapeBuilder<Dim = D>, R: Rng>(rng: &mut R, dim: Sh, scale: f64) -> Array<f64, D> {
    Array::from_shape_simple_fn(dim, || rng.random_range(-scale..scale))
}

/// Values in logical order, whatever the memory layout.
fn logical<D: Dimension>(a: &Array<f64, D>) -> Vec<f64> {
    a.iter().copied().collect()
}

fn project<D: Dimension>(y: &Array<f64, D>, r: &Array<f64, D>) -> f64 {
    (y * r).sum()
}

/// Check a layer's input and parameter gradients on the scalar loss
/// `⟨forward(x), R⟩` for a fixed random projection `R`. Forward passes in
/// train mode reuse `mask_seed`, so dropout masks stay fixed across probes.
fn check_layer<L, D, E>(layer: &L, x: &Array<f64, D>, train: bool, mask_seed: u64, rng: &mut ChaCha8Rng) -> Result<f64>
where
    D: Dimension,
    E: Dimension,
    L: Layer<f64, Input = Array<f64, D>, Output = Array<f64, E>> + Parameterized<f64> + Clone,
    L::Grads: Parameterized<f64>,
{
    let run = |l: &L, x: &Array<f64, D>| -> Result<(Array<f64, E>, L::Cache)> {
        let mut mrng = ChaCha8Rng::seed_from_u64(mask_seed);
        let mut mode = if train { Mode::Train(&mut mrng) } else { Mode::Eval };
        l.forward(x, &mut mode)
    };
    let (y, cache) = run(layer, x)?;
    let r = random_array(rng, y.raw_dim(), 1.0);
    let (dx, grads) = layer.backward(&cache, &r)?;

    let loss = |l: &L, x: &Array<f64, D>| project(&run(l, x).expect("forward").0, &r);
    let num_dx = fd_array(x, |xp| loss(layer, xp));
    let mut err = max_rel_err(&logical(&dx), &logical(&num_dx));
    if layer.num_params() > 0 {
        let num_dp = fd_params(layer, None, |lp| loss(lp, x));
        err = err.max(max_rel_err(&grads.flat(), &num_dp));
    }
    Ok(err)
}

/// Parameter-free layers only expose input gradients.
fn check_stateless<L, D, E>(layer: &L, x: &Array<f64, D>, train: bool, mask_seed: u64, rng: &mut ChaCha8Rng) -> Result<f64>
where
    D: Dimension,
    E: Dimension,
    L: Layer<f64, Input = Array<f64, D>, Output = Array<f64, E>>,
{
    let run = |x: &Array<f64, D>| -> Result<(Array<f64, E>, L::Cache)> {
        let mut mrng = ChaCha8Rng::seed_from_u64(mask_seed);
        let mut mode = if train { Mode::Train(&mut mrng) } else { Mode::Eval };
        layer.forward(x, &mut mode)
    };
    let (y, cache) = run(x)?;
    let r = random_array(rng, y.raw_dim(), 1.0);
    let (dx, _) = layer.backward(&cache, &r)?;
    let num_dx = fd_array(x, |xp| project(&run(xp).expect("forward").0, &r));
    Ok(max_rel_err(&logical(&dx), &logical(&num_dx)))
}

/// Distinct inputs at least `0.5 / n` from zero, so the finite difference
/// never straddles a ReLU kink or a max-pool tie.
fn spread_input(rng: &mut ChaCha8Rng, dim: (usize, usize, usize)) -> Array3<f64> {
    let n = dim.0 * dim.1 * dim.2;
    let mut vals: Vec<f64> = (0..n).map(|i| (2.0 * i as f64 + 1.5) / n as f64 - 1.0).collect();
    for i in (1..n).rev() {
        vals.swap(i, rng.random_range(0..=i));
    }
    Array3::from_shape_vec(dim, vals).expect("shape")
}

/// Finite-difference checks for every layer type over `instances` random
/// configurations each.
pub fn layer_gradient_suite(seed: u64, instances: usize) -> Result<Vec<CheckReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut reports = Vec::new();
    let mut record = |name: &'static str, errs: Vec<f64>| {
        reports.push(CheckReport {
            name,
            instances: errs.len(),
            max_rel_err: errs.into_iter().fold(0.0, f64::max),
        });
    };

    let mut errs = Vec::new();
    for _ in 0..instances {
        let (cin, cout) = (rng.random_range(1..=3), rng.random_range(1..=3));
        let mut conv = Conv2d::<f64>::new(cin, cout, 3, &mut rng);
        conv.bias = random_array(&mut rng, cout, 0.5);
        let dim = (cin, rng.random_range(2..6), rng.random_range(2..7));
        let x = random_array(&mut rng, dim, 1.0);
        errs.push(check_layer(&conv, &x, false, 0, &mut rng)?);
    }
    record("conv2d", errs);

    let mut errs = Vec::new();
    for _ in 0..instances {
        let dim = (rng.random_range(1..3), rng.random_range(2..7), rng.random_range(3..10));
        let x = spread_input(&mut rng, dim);
        errs.push(check_stateless(&MaxPool2d { time: 2, freq: 3 }, &x, false, 0, &mut rng)?);
    }
    record("maxpool2d", errs);

    let mut errs = Vec::new();
    for _ in 0..instances {
        let dim = (rng.random_range(1..3), rng.random_range(1..5), rng.random_range(1..6));
        let x = spread_input(&mut rng, dim);
        errs.push(check_stateless(&Relu, &x, false, 0, &mut rng)?);
    }
    record("relu", errs);

    let mut errs = Vec::new();
    for _ in 0..instances {
        let (i, o) = (rng.random_range(1..6), rng.random_range(1..6));
        let mut dense = Dense::<f64>::new(i, o, &mut rng);
        dense.bias = random_array(&mut rng, o, 0.5);
        let dim = (rng.random_range(1..5), i);
        let x = random_array(&mut rng, dim, 1.0);
        errs.push(check_layer(&dense, &x, false, 0, &mut rng)?);
    }
    record("dense", errs);

    let mut errs = Vec::new();
    for k in 0..instances {
        let dim = (rng.random_range(1..6), rng.random_range(1..6));
        let x = random_array(&mut rng, dim, 1.0);
        let seed = rng.random();
        errs.push(check_stateless(&Dropout { rate: 0.3 }, &x, k % 2 == 0, seed, &mut rng)?);
    }
    record("dropout", errs);

    let mut errs = Vec::new();
    for _ in 0..instances {
        let dim = (rng.random_range(1..5), rng.random_range(2..6));
        let x = random_array(&mut rng, dim, 2.0);
        errs.push(check_stateless(&Softmax, &x, false, 0, &mut rng)?);
    }
    record("softmax", errs);

    let mut errs = Vec::new();
    for k in 0..instances {
        let (i, h) = (rng.random_range(1..4), rng.random_range(1..4));
        let seq = k % 2 == 0;
        let mut layer = BiLstm::<f64>::new(i, h, seq, 0.25, &mut rng);
        let mut flat = layer.flat();
        flat.iter_mut().for_each(|v| *v += rng.random_range(-0.3..0.3));
        layer.set_flat(&flat);
        let dim = (rng.random_range(1..6), i);
        let x = random_array(&mut rng, dim, 1.0);
        let seed = rng.random();
        errs.push(check_layer(&layer, &x, k % 3 != 0, seed, &mut rng)?);
    }
    record("bilstm", errs);

    let mut errs = Vec::new();
    for _ in 0..instances {
        let classes = rng.random_range(2..6);
        let logits: Array1<f64> = random_array(&mut rng, classes, 2.0);
        let target = rng.random_range(0..classes);
        let weights: Vec<f64> = (0..classes).map(|_| rng.random_range(0.2..3.0)).collect();
        let probs = |z: &Array1<f64>| Softmax::apply(&z.clone().insert_axis(ndarray::Axis(0))).row(0).to_owned();
        let analytic = weighted_xent_grad(probs(&logits).view(), target, &weights)?;
        let numeric = fd_array(&logits, |z| weighted_xent(probs(z).view(), target, &weights).expect("valid target"));
        errs.push(max_rel_err(analytic.as_slice().expect("contiguous"), numeric.as_slice().expect("contiguous")));
    }
    record("weighted_xent", errs);

    Ok(reports)
}

/// Finite-difference check of the CTC gradient on random logits with
/// `frames ≤ 6`, `classes ≤ 4`.
pub fn ctc_gradient_check(seed: u64, instances: usize) -> Result<CheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    let mut done = 0;
    while done < instances {
        let classes = rng.random_range(2..=4);
        let frames = rng.random_range(1..=6);
        let len = rng.random_range(0..=3);
        let labels: Vec<usize> = (0..len).map(|_| rng.random_range(1..classes)).collect();
        if crate::ctc::required_frames(&labels) > frames {
            continue;
        }
        let logits: Array2<f64> = random_array(&mut rng, (frames, classes), 2.0);
        let (_, grad) = ctc_loss_grad(logits.view(), &labels, 0)?;
        let numeric = fd_array(&logits, |z| ctc_loss_grad(z.view(), &labels, 0).expect("alignable").0);
        worst = worst.max(max_rel_err(grad.as_slice().expect("contiguous"), numeric.as_slice().expect("contiguous")));
        done += 1;
    }
    Ok(CheckReport {
        name: "ctc",
        instances,
        max_rel_err: worst,
    })
}

/// Every `(frames ≤ 6, classes ≤ 4, |labels| ≤ 3)` instance with random
/// probability rows: `exp(−ctc_loss)` against path enumeration. Unreachable
/// label sequences must give zero on both sides.
pub fn ctc_oracle_sweep(seed: u64) -> Result<SweepReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut instances = 0;
    let mut worst: f64 = 0.0;
    for classes in 2..=4usize {
        for frames in 1..=6usize {
            for len in 0..=3u32 {
                let count = (classes - 1).pow(len);
                for code in 0..count {
                    let mut c = code;
                    let labels: Vec<usize> = (0..len)
                        .map(|_| {
                            let l = 1 + c % (classes - 1);
                            c /= classes - 1;
                            l
                        })
                        .collect();
                    let mut probs: Array2<f64> = Array2::from_shape_simple_fn((frames, classes), || rng.random_range(0.01..1.0));
                    for mut row in probs.rows_mut() {
                        let s = row.sum();
                        row /= s;
                    }
                    let oracle = oracle_ctc(probs.view(), &labels, 0)?;
                    let model = match ctc_loss(probs.mapv(f64::ln).view(), &labels, 0) {
                        Ok(loss) => (-loss).exp(),
                        Err(crate::Error::Unalignable { .. }) => 0.0,
                        Err(e) => return Err(e),
                    };
                    worst = worst.max((model - oracle).abs());
                    instances += 1;
                }
            }
        }
    }
    Ok(SweepReport {
        instances,
        max_abs_diff: worst,
    })
}
