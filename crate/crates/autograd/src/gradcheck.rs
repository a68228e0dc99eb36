//! Central finite-difference checks of the reverse-mode gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::Result;
use crate::tape::{Padding, Tape, Var};
use crate::tensor::Tensor;

/// Step used for the central differences.
pub const FD_STEP: f64 = 1e-5;
/// Acceptance threshold on the maximum relative error.
pub const TOLERANCE: f64 = 1e-4;
/// Gradient magnitude below which the relative error turns absolute.
pub const REL_FLOOR: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheck {
    pub max_rel_error: f64,
    pub coordinates: usize,
    /// Set when the function itself failed; the check then reports an
    /// infinite error instead of panicking.
    pub error: Option<String>,
}

impl GradCheck {
    pub fn passed(&self, tolerance: f64) -> bool {
        self.error.is_none() && self.max_rel_error < tolerance
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs()).max(REL_FLOOR);
    (analytic - numeric).abs() / scale
}

/// Compares reverse-mode gradients of the scalar `f` at `inputs` against
/// central differences with step `h`. Every input is treated as a parameter.
pub fn grad_check<F>(f: F, inputs: &[Tensor<f64>], h: f64) -> GradCheck
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    check_scaled(&f, inputs, h, 1.0)
}

fn eval<F>(f: &F, inputs: &[Tensor<f64>]) -> Result<(f64, Vec<Tensor<f64>>)>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let value = tape.value(out).data()[0];
    let grads = tape.backward(out)?;
    let g = vars.iter().zip(inputs).map(|(&v, t)| grads.get_or_zeros(v, t.shape())).collect();
    Ok((value, g))
}

fn value_at<F>(f: &F, inputs: &[Tensor<f64>]) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    Ok(tape.value(out).data()[0])
}

fn check_scaled<F>(f: &F, inputs: &[Tensor<f64>], h: f64, analytic_scale: f64) -> GradCheck
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let failed = |e: crate::error::TensorError| GradCheck {
        max_rel_error: f64::INFINITY,
        coordinates: 0,
        error: Some(e.to_string()),
    };
    let analytic = match eval(f, inputs) {
        Ok((_, g)) => g,
        Err(e) => return failed(e),
    };
    let mut point = inputs.to_vec();
    let mut max_rel = 0.0f64;
    let mut coordinates = 0;
    for i in 0..point.len() {
        for j in 0..point[i].numel() {
            let orig = point[i].data()[j];
            point[i].data_mut()[j] = orig + h;
            let plus = value_at(f, &point);
            point[i].data_mut()[j] = orig - h;
            let minus = value_at(f, &point);
            point[i].data_mut()[j] = orig;
            let (plus, minus) = match (plus, minus) {
                (Ok(p), Ok(m)) => (p, m),
                (Err(e), _) | (_, Err(e)) => return failed(e),
            };
            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic[i].data()[j] * analytic_scale;
            max_rel = max_rel.max(relative_error(a, numeric));
            coordinates += 1;
        }
    }
    GradCheck {
        max_rel_error: max_rel,
        coordinates,
        error: None,
    }
}

/// Result of checking one operator over many seeds.
#[derive(Debug, Clone, Serialize)]
pub struct OpReport {
    pub op: &'static str,
    pub seeds: usize,
    pub max_rel_error: f64,
    pub passed: bool,
    pub error: Option<String>,
}

#[derive(Debug, Clone, Default)]
pub struct SuiteOptions {
    pub seeds: usize,
    pub base_seed: u64,
    /// Fault injection: scales the analytic gradient of the named operator
    /// by 1.01 so the check must fail.
    pub corrupt: Option<String>,
}

type CaseFn = fn(&mut ChaCha8Rng) -> (Vec<Tensor<f64>>, Checked);
type Checked = Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>>;

/// Names of every operator covered by [`run_suite`], in report order.
pub const SUITE_OPS: [&str; 11] = [
    "conv1d",
    "avg_pool1d",
    "batch_norm",
    "batch_norm_infer",
    "relu",
    "dense",
    "softmax_xent",
    "flatten",
    "concat",
    "conv1d+relu",
    "conv_block",
];

fn cases() -> [(&'static str, CaseFn); 11] {
    [
        ("conv1d", case_conv),
        ("avg_pool1d", case_pool),
        ("batch_norm", case_batch_norm),
        ("batch_norm_infer", case_batch_norm_infer),
        ("relu", case_relu),
        ("dense", case_dense),
        ("softmax_xent", case_softmax),
        ("flatten", case_flatten),
        ("concat", case_concat),
        ("conv1d+relu", case_conv_relu),
        ("conv_block", case_conv_block),
    ]
}

/// Runs every operator check over `options.seeds` seeds.
pub fn run_suite(options: &SuiteOptions) -> Vec<OpReport> {
    let seeds = options.seeds.max(1);
    cases()
        .iter()
        .enumerate()
        .map(|(stream, (name, case))| {
            let scale = if options.corrupt.as_deref() == Some(*name) { 1.01 } else { 1.0 };
            let mut worst = 0.0f64;
            let mut error = None;
            for s in 0..seeds {
                let mut rng = ChaCha8Rng::seed_from_u64(options.base_seed.wrapping_add(s as u64));
                rng.set_stream(stream as u64);
                let (inputs, f) = case(&mut rng);
                let r = check_scaled(&f, &inputs, FD_STEP, scale);
                worst = worst.max(r.max_rel_error);
                if error.is_none() {
                    error = r.error;
                }
            }
            OpReport {
                op: name,
                seeds,
                max_rel_error: worst,
                passed: error.is_none() && worst < TOLERANCE,
                error,
            }
        })
        .collect()
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

fn projection(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

/// Pushes values away from the ReLU kink at 0.
fn nudge(t: &mut Tensor<f64>, margin: f64) {
    for v in t.data_mut() {
        if v.abs() < margin {
            *v = if *v < 0.0 { -margin } else { margin };
        }
    }
}

fn scalarize(tape: &mut Tape<f64>, out: Var, weights: &[f64]) -> Result<Var> {
    tape.weighted_sum(out, weights.to_vec())
}

fn case_conv(rng: &mut ChaCha8Rng) -> (Vec<Tensor<f64>>, Checked) {
    let inputs = vec![rand_tensor(rng, &[2, 7, 3]), rand_tensor(rng, &[3, 3, 4]), rand_tensor(rng, &[4])];
    let w = projection(rng, 2 * (5 + 7) * 4);
    let f: Checked = Box::new(move |tape, v| {
        let valid = tape.conv1d(v[0], v[1], Some(v[2]), Padding::Valid)?;
        let same = tape.conv1d(v[0], v[1], Some(v[2]), Padding::Same)?;
        let valid = tape.flatten(valid);
        let same = tape.flatten(same);
        let both = tape.concat(&[valid, same])?;
        scalarize(tape, both, &w)
    });
    (inputs, f)
}

fn case_pool(rng: &mut ChaCha8Rng) -> (Vec<Tensor<f64>>, Checked) {
    let inputs = vec![rand_tensor(rng, &[2, 7, 3])];
    let w = projection(rng, 2 * (6 + 3) * 3);
    let f: Checked = Box::new(move |tape, v| {
        let overlapping = tape.avg_pool1d(v[0], 2, 1)?;
        let strided = tape.avg_pool1d(v[0], 2, 2)?;
        let overlapping = tape.flatten(overlapping);
        let strided = tape.flatten(strided);
        let both = tape.concat(&[overlapping, strided])?;
        scalarize(tape, both, &w)
    });
    (inputs, f)
}

fn case_batch_norm(rng: &mut ChaCha8Rng) -> (Vec<Tensor<f64>>, Checked) {
    let inputs = vec![
        rand_tensor(rng, &[3, 4, 2]),
        Tensor::from_fn(&[2], |_| rng.random_range(0.5..1.5)),
        rand_tensor(rng, &[2]),
    ];
    let w = projection(rng, 24);
    let f: Checked = Box::new(move |tape, v| {
        let (y, _) = tape.batch_norm(v[0], v[1], v[2], 1e-5)?;
        scalarize(tape, y, &w)
    });
    (inputs, f)
}

fn case_batch_norm_infer(rng: &mut ChaCha8Rng) -> (Vec<Tensor<f64>>, Checked) {
    let inputs = vec![rand_tensor(rng, &[3, 2]), rand_tensor(rng, &[2]), rand_tensor(rng, &[2])];
    let mean: Vec<f64> = projection(rng, 2);
    let var: Vec<f64> = (0..2).map(|_| rng.random_range(0.2..2.0)).collect();
    let w = projection(rng, 6);
    let f: Checked = Box::new(move |tape, v| {
        let y = tape.batch_norm_infer(v[0], v[1], v[2], &mean, &var, 1e-5)?;
        scalarize(tape, y, &w)
    });
    (inputs, f)
}

fn case_relu(rng: &mut ChaCha8Rng) -> (Vec<Tensor<f64>>, Checked) {
    let mut x = rand_tensor(rng, &[2, 5]);
    nudge(&mut x, 0.05);
    let w = projection(rng, 10);
    let f: Checked = Box::new(move |tape, v| {
        let y = tape.relu(v[0]);
        scalarize(tape, y, &w)
    });
    (vec![x], f)
}

fn case_dense(rng: &mut ChaCha8Rng) -> (Vec<Tensor<f64>>, Checked) {
    let inputs = vec![rand_tensor(rng, &[1, 8]), rand_tensor(rng, &[8, 3]), rand_tensor(rng, &[3])];
    let w = projection(rng, 3);
    let f: Checked = Box::new(move |tape, v| {
        let y = tape.dense(v[0], v[1], v[2])?;
        scalarize(tape, y, &w)
    });
    (inputs, f)
}

fn case_softmax(rng: &mut ChaCha8Rng) -> (Vec<Tensor<f64>>, Checked) {
    let x = Tensor::from_fn(&[3, 4], |_| rng.random_range(-3.0..3.0));
    let labels: Vec<usize> = (0..3).map(|_| rng.random_range(0..4)).collect();
    let f: Checked = Box::new(move |tape, v| Ok(tape.softmax_xent(v[0], &labels)?.0));
    (vec![x], f)
}

fn case_flatten(rng: &mut ChaCha8Rng) -> (Vec<Tensor<f64>>, Checked) {
    let x = rand_tensor(rng, &[2, 3, 2]);
    let w = projection(rng, 12);
    let f: Checked = Box::new(move |tape, v| {
        let y = tape.flatten(v[0]);
        scalarize(tape, y, &w)
    });
    (vec![x], f)
}

fn case_concat(rng: &mut ChaCha8Rng) -> (Vec<Tensor<f64>>, Checked) {
    let inputs = vec![rand_tensor(rng, &[2, 3]), rand_tensor(rng, &[2, 2])];
    let w = projection(rng, 10);
    let f: Checked = Box::new(move |tape, v| {
        let y = tape.concat(&[v[0], v[1]])?;
        scalarize(tape, y, &w)
    });
    (inputs, f)
}

/// Resamples until every pre-activation sits at least `margin` from 0.
fn sample_away_from_kinks(
    rng: &mut ChaCha8Rng,
    shapes: &[&[usize]],
    margin: f64,
    pre_activation: impl Fn(&[Tensor<f64>]) -> Vec<f64>,
) -> Vec<Tensor<f64>> {
    loop {
        let inputs: Vec<Tensor<f64>> = shapes.iter().map(|s| rand_tensor(rng, s)).collect();
        if pre_activation(&inputs).iter().all(|v| v.abs() >= margin) {
            return inputs;
        }
    }
}

fn case_conv_relu(rng: &mut ChaCha8Rng) -> (Vec<Tensor<f64>>, Checked) {
    let inputs = sample_away_from_kinks(rng, &[&[2, 6, 2], &[3, 2, 3], &[3]], 1e-3, |ins| {
        let mut tape = Tape::new();
        let v: Vec<Var> = ins.iter().map(|t| tape.constant(t.clone())).collect();
        let y = tape.conv1d(v[0], v[1], Some(v[2]), Padding::Valid).expect("valid shapes");
        tape.value(y).data().to_vec()
    });
    let w = projection(rng, 2 * 4 * 3);
    let f: Checked = Box::new(move |tape, v| {
        let y = tape.conv1d(v[0], v[1], Some(v[2]), Padding::Valid)?;
        let y = tape.relu(y);
        scalarize(tape, y, &w)
    });
    (inputs, f)
}

/// conv → batch norm → relu → pool → flatten → dense → softmax cross-entropy.
fn case_conv_block(rng: &mut ChaCha8Rng) -> (Vec<Tensor<f64>>, Checked) {
    fn normalized(tape: &mut Tape<f64>, v: &[Var]) -> Result<Var> {
        let y = tape.conv1d(v[0], v[1], Some(v[2]), Padding::Valid)?;
        Ok(tape.batch_norm(y, v[3], v[4], 1e-5)?.0)
    }
    let shapes: [&[usize]; 7] = [&[3, 8, 2], &[3, 2, 2], &[2], &[2], &[2], &[10, 3], &[3]];
    let inputs = sample_away_from_kinks(rng, &shapes, 1e-3, |ins| {
        let mut tape = Tape::new();
        let v: Vec<Var> = ins.iter().map(|t| tape.constant(t.clone())).collect();
        let y = normalized(&mut tape, &v).expect("valid shapes");
        tape.value(y).data().to_vec()
    });
    let labels: Vec<usize> = (0..3).map(|_| rng.random_range(0..3)).collect();
    let f: Checked = Box::new(move |tape, v| {
        let y = normalized(tape, v)?;
        let y = tape.relu(y);
        let y = tape.avg_pool1d(y, 2, 1)?;
        let y = tape.flatten(y);
        let z = tape.dense(y, v[5], v[6])?;
        Ok(tape.softmax_xent(z, &labels)?.0)
    });
    (inputs, f)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_function_has_zero_gradients() {
        let x = Tensor::new(vec![1, 3], vec![0.1, 0.2, 0.3]).unwrap();
        let r = grad_check(
            |tape, v| {
                let z = tape.weighted_sum(v[0], vec![0.0; 3])?;
                Ok(z)
            },
            &[x],
            FD_STEP,
        );
        assert_eq!(r.max_rel_error, 0.0);
        assert_eq!(r.coordinates, 3);
    }

    #[test]
    fn failing_function_is_reported_not_raised() {
        let x = Tensor::<f64>::zeros(&[1, 2, 1]);
        let r = grad_check(|tape, v| tape.avg_pool1d(v[0], 3, 1), &[x], FD_STEP);
        assert!(r.error.is_some());
        assert!(!r.passed(TOLERANCE));
    }

    #[test]
    fn suite_names_match_cases() {
        let names: Vec<&str> = cases().iter().map(|(n, _)| *n).collect();
        assert_eq!(names, SUITE_OPS);
    }
}
