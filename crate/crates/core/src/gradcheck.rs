//! Central finite-difference checks of every differentiable op and loss.
//!
//! Each case reduces the op output to a scalar with a fixed random weight
//! matrix, then compares the tape gradient of every input with
//! `(f(x + eps) - f(x - eps)) / (2 eps)`. Inputs are drawn at least `KINK_GAP`
//! away from ReLU, clamp and sort non-differentiable points.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::autodiff::{Graph, Var};
use crate::error::Result;
use crate::losses::{
    alignment_loss, draw_projections, entropy_loss, source_loss, swd_with, ConfidentSubset,
};
use crate::matrix::Matrix;
use crate::proto::Prototypes;

pub const FD_EPS: f64 = 1e-4;
pub const KINK_GAP: f64 = 1e-3;
pub const TOLERANCE: f64 = 1e-4;
const CLAMP_FLOOR: f64 = 0.2;

/// One randomly drawn instance: differentiable inputs plus fixed data.
#[derive(Clone, Debug, Default)]
pub struct Case {
    pub inputs: Vec<Matrix>,
    pub consts: Vec<Matrix>,
    pub labels: Vec<usize>,
    pub pseudo: Vec<usize>,
}

type Build = fn(&mut Graph, &[Var], &Case) -> Result<Var>;
type Draw = fn(&mut ChaCha8Rng) -> Case;

#[derive(Clone, Debug, PartialEq)]
pub struct OpCheck {
    pub name: &'static str,
    pub instances: usize,
    pub max_rel_err: f64,
}

impl OpCheck {
    pub fn passed(&self) -> bool {
        self.max_rel_err < TOLERANCE
    }
}

/// `|a - n|_inf / max(|a|_inf, |n|_inf, 1e-8)` over all inputs jointly.
pub fn relative_error(analytic: &[Matrix], numeric: &[Matrix]) -> f64 {
    let mut diff = 0.0f64;
    let mut scale = 1e-8f64;
    for (a, n) in analytic.iter().zip(numeric) {
        for (&x, &y) in a.as_slice().iter().zip(n.as_slice()) {
            diff = diff.max((x - y).abs());
            scale = scale.max(x.abs()).max(y.abs());
        }
    }
    diff / scale
}

fn weighted_value(build: Build, inputs: &[Matrix], case: &Case, weights: &Matrix) -> Result<f64> {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|m| g.constant(m.clone())).collect();
    let out = build(&mut g, &vars, case)?;
    Ok(g.value(out)
        .as_slice()
        .iter()
        .zip(weights.as_slice())
        .map(|(a, b)| a * b)
        .sum())
}

/// Tape and finite-difference gradients of `sum(weights * build(inputs))`.
pub fn gradients(build: Build, case: &Case, weights: &Matrix) -> Result<(Vec<Matrix>, Vec<Matrix>)> {
    let mut g = Graph::new();
    let vars: Vec<Var> = case.inputs.iter().map(|m| g.leaf(m.clone(), true)).collect();
    let out = build(&mut g, &vars, case)?;
    let w = g.constant(weights.clone());
    let prod = g.mul(out, w)?;
    let s = g.sum(prod);
    g.backward(s)?;
    let analytic: Vec<Matrix> = vars
        .iter()
        .zip(&case.inputs)
        .map(|(&v, m)| g.grad(v).cloned().unwrap_or_else(|| Matrix::zeros(m.rows(), m.cols())))
        .collect();

    let mut numeric = Vec::with_capacity(case.inputs.len());
    let mut inputs = case.inputs.clone();
    for k in 0..inputs.len() {
        let mut grad = Matrix::zeros(inputs[k].rows(), inputs[k].cols());
        for idx in 0..inputs[k].len() {
            let orig = inputs[k].as_slice()[idx];
            inputs[k].as_mut_slice()[idx] = orig + FD_EPS;
            let up = weighted_value(build, &inputs, case, weights)?;
            inputs[k].as_mut_slice()[idx] = orig - FD_EPS;
            let down = weighted_value(build, &inputs, case, weights)?;
            inputs[k].as_mut_slice()[idx] = orig;
            grad.as_mut_slice()[idx] = (up - down) / (2.0 * FD_EPS);
        }
        numeric.push(grad);
    }
    Ok((analytic, numeric))
}

fn normal(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| scale * rng.sample::<f64, _>(StandardNormal))
}

fn uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
}

/// Entries in `point + [-1, 1]`, at least `KINK_GAP` away from `point`.
fn away_from(rng: &mut ChaCha8Rng, rows: usize, cols: usize, point: f64) -> Matrix {
    uniform(rng, rows, cols).map(|d| {
        let d = if d.abs() < KINK_GAP { 2.0 * KINK_GAP.copysign(d) } else { d };
        point + d
    })
}

fn dims(rng: &mut ChaCha8Rng) -> (usize, usize) {
    (rng.random_range(2..6), rng.random_range(2..6))
}

fn columns_separated(m: &Matrix, gap: f64) -> bool {
    (0..m.cols()).all(|j| {
        let mut col: Vec<f64> = (0..m.rows()).map(|i| m.get(i, j)).collect();
        col.sort_by(f64::total_cmp);
        col.windows(2).all(|w| w[1] - w[0] >= gap)
    })
}

fn softmax_rows(m: &Matrix) -> Matrix {
    let mut out = m.clone();
    for i in 0..out.rows() {
        let row = out.row_mut(i);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        row.iter_mut().for_each(|x| *x = (*x - max).exp());
        let s: f64 = row.iter().sum();
        row.iter_mut().for_each(|x| *x /= s);
    }
    out
}

fn draw_pair(rng: &mut ChaCha8Rng) -> Case {
    let (r, c) = dims(rng);
    Case {
        inputs: vec![uniform(rng, r, c), uniform(rng, r, c)],
        ..Case::default()
    }
}

fn draw_single(rng: &mut ChaCha8Rng) -> Case {
    let (r, c) = dims(rng);
    Case {
        inputs: vec![uniform(rng, r, c)],
        ..Case::default()
    }
}

fn draw_matmul(rng: &mut ChaCha8Rng) -> Case {
    let (r, k) = dims(rng);
    let c = rng.random_range(1..5);
    Case {
        inputs: vec![uniform(rng, r, k), uniform(rng, k, c)],
        ..Case::default()
    }
}

fn draw_add_row(rng: &mut ChaCha8Rng) -> Case {
    let (r, c) = dims(rng);
    Case {
        inputs: vec![uniform(rng, r, c), uniform(rng, 1, c)],
        ..Case::default()
    }
}

fn draw_relu(rng: &mut ChaCha8Rng) -> Case {
    let (r, c) = dims(rng);
    Case {
        inputs: vec![away_from(rng, r, c, 0.0)],
        ..Case::default()
    }
}

fn draw_clamp(rng: &mut ChaCha8Rng) -> Case {
    let (r, c) = dims(rng);
    Case {
        inputs: vec![away_from(rng, r, c, CLAMP_FLOOR)],
        ..Case::default()
    }
}

fn draw_positive(rng: &mut ChaCha8Rng) -> Case {
    let (r, c) = dims(rng);
    Case {
        inputs: vec![Matrix::from_fn(r, c, |_, _| rng.random_range(0.1..3.0))],
        ..Case::default()
    }
}

fn draw_logits(rng: &mut ChaCha8Rng) -> Case {
    let (r, c) = dims(rng);
    Case {
        inputs: vec![normal(rng, r, c, 3.0)],
        ..Case::default()
    }
}

fn draw_sortable(rng: &mut ChaCha8Rng) -> Case {
    loop {
        let (r, c) = dims(rng);
        let m = uniform(rng, r, c);
        if columns_separated(&m, KINK_GAP) {
            return Case {
                inputs: vec![m],
                ..Case::default()
            };
        }
    }
}

fn draw_source_loss(rng: &mut ChaCha8Rng) -> Case {
    let n = rng.random_range(3..7);
    let d = rng.random_range(2..5);
    let c = rng.random_range(2..5);
    Case {
        inputs: vec![normal(rng, n, d, 1.0), normal(rng, d, c, 1.0)],
        consts: vec![normal(rng, c, d, 1.0)],
        labels: (0..n).map(|_| rng.random_range(0..c)).collect(),
        ..Case::default()
    }
}

fn draw_mlp(rng: &mut ChaCha8Rng) -> Case {
    loop {
        let n = rng.random_range(2..6);
        let (d, h, c) = (rng.random_range(2..5), rng.random_range(2..6), rng.random_range(2..4));
        let x = normal(rng, n, d, 1.0);
        let w1 = normal(rng, d, h, 1.0);
        let pre = x.matmul(&w1).expect("shapes agree");
        if pre.as_slice().iter().all(|v| v.abs() >= KINK_GAP) {
            return Case {
                inputs: vec![w1, normal(rng, h, c, 1.0)],
                consts: vec![x],
                labels: (0..n).map(|_| rng.random_range(0..c)).collect(),
                ..Case::default()
            };
        }
    }
}

fn draw_discrepancy(rng: &mut ChaCha8Rng) -> Case {
    loop {
        let n = rng.random_range(3..6);
        let c = rng.random_range(2..5);
        let a = normal(rng, n, c, 2.0);
        let b = normal(rng, n, c, 2.0);
        let theta = draw_projections(c, 4, rng);
        let pa = softmax_rows(&a).matmul(&theta).expect("shapes agree");
        let pb = softmax_rows(&b).matmul(&theta).expect("shapes agree");
        if columns_separated(&pa, KINK_GAP) && columns_separated(&pb, KINK_GAP) {
            return Case {
                inputs: vec![a, b],
                consts: vec![theta],
                ..Case::default()
            };
        }
    }
}

fn draw_alignment(rng: &mut ChaCha8Rng) -> Case {
    let classes = 3;
    let d = rng.random_range(2..5);
    let n_s = rng.random_range(6..10);
    let n_t = rng.random_range(6..10);
    let mut labels: Vec<usize> = (0..n_s).map(|i| i % classes).collect();
    let mut pseudo: Vec<usize> = (0..n_t).map(|i| i % classes).collect();
    labels.shuffle(rng);
    pseudo.shuffle(rng);
    Case {
        inputs: vec![normal(rng, n_s, d, 1.0), normal(rng, n_t, d, 1.0)],
        labels,
        pseudo,
        ..Case::default()
    }
}

fn subset_of(case: &Case) -> ConfidentSubset {
    let mut s = ConfidentSubset::default();
    for (i, &c) in case.pseudo.iter().enumerate() {
        s.indices.push(i);
        s.labels.push(c);
        s.classes_present.insert(c);
    }
    s
}

fn build_alignment(g: &mut Graph, v: &[Var], case: &Case, want_c: bool) -> Result<Var> {
    let a = alignment_loss(g, v[0], &case.labels, v[1], &subset_of(case))?;
    Ok(if want_c { a.l_c } else { a.l_d })
}

fn suite_cases() -> Vec<(&'static str, Draw, Build)> {
    vec![
        ("matmul", draw_matmul, |g, v, _| g.matmul(v[0], v[1])),
        ("add", draw_pair, |g, v, _| g.add(v[0], v[1])),
        ("sub", draw_pair, |g, v, _| g.sub(v[0], v[1])),
        ("mul", draw_pair, |g, v, _| g.mul(v[0], v[1])),
        ("add_row", draw_add_row, |g, v, _| g.add_row(v[0], v[1])),
        ("scale", draw_single, |g, v, _| Ok(g.scale(v[0], -1.7))),
        ("relu", draw_relu, |g, v, _| Ok(g.relu(v[0]))),
        ("exp", draw_single, |g, v, _| Ok(g.exp(v[0]))),
        ("log", draw_positive, |g, v, _| g.log(v[0])),
        ("clamp_min", draw_clamp, |g, v, _| Ok(g.clamp_min(v[0], CLAMP_FLOOR))),
        ("row_softmax", draw_logits, |g, v, _| Ok(g.row_softmax(v[0]))),
        ("row_norm", draw_single, |g, v, _| Ok(g.row_norm(v[0]))),
        ("row_normalize", draw_single, |g, v, _| g.row_normalize(v[0])),
        ("sort_columns", draw_sortable, |g, v, _| Ok(g.sort_columns(v[0]))),
        ("sum", draw_single, |g, v, _| Ok(g.sum(v[0]))),
        ("mean", draw_single, |g, v, _| Ok(g.mean(v[0]))),
        ("row_sum", draw_single, |g, v, _| Ok(g.row_sum(v[0]))),
        ("mlp_cross_entropy", draw_mlp, |g, v, case| {
            let x = g.constant(case.consts[0].clone());
            let h = g.matmul(x, v[0])?;
            let h = g.relu(h);
            let logits = g.matmul(h, v[1])?;
            let p = g.row_softmax(logits);
            crate::losses::cross_entropy(g, p, &case.labels)
        }),
        ("source_loss", draw_source_loss, |g, v, case| {
            let logits = g.matmul(v[0], v[1])?;
            let pn = g.row_softmax(logits);
            let protos = Prototypes {
                mu: case.consts[0].clone(),
                source_counts: vec![1; case.consts[0].rows()],
                target_counts: vec![0; case.consts[0].rows()],
                temperature: 0.5,
            };
            let pp = protos.predict_var(g, v[0])?;
            source_loss(g, pn, pp, &case.labels)
        }),
        ("discrepancy", draw_discrepancy, |g, v, case| {
            let pa = g.row_softmax(v[0]);
            let pb = g.row_softmax(v[1]);
            swd_with(g, pa, pb, &case.consts[0])
        }),
        ("class_alignment", draw_alignment, |g, v, case| build_alignment(g, v, case, true)),
        ("class_divergence", draw_alignment, |g, v, case| build_alignment(g, v, case, false)),
        ("entropy", draw_pair, |g, v, _| {
            let pa = g.row_softmax(v[0]);
            let pb = g.row_softmax(v[1]);
            entropy_loss(g, pa, pb)
        }),
    ]
}

/// Names of every checked op, in suite order.
pub fn op_names() -> Vec<&'static str> {
    suite_cases().into_iter().map(|(n, _, _)| n).collect()
}

/// Runs `instances` random cases of every op and reports the worst relative
/// error of each.
pub fn run_suite(seed: u64, instances: usize) -> Result<Vec<OpCheck>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for (name, draw, build) in suite_cases() {
        let mut worst = 0.0f64;
        for _ in 0..instances {
            let case = draw(&mut rng);
            let shape = {
                let mut g = Graph::new();
                let vars: Vec<Var> = case.inputs.iter().map(|m| g.constant(m.clone())).collect();
                let y = build(&mut g, &vars, &case)?;
                g.shape(y)
            };
            let weights = normal(&mut rng, shape.0, shape.1, 1.0);
            let (a, n) = gradients(build, &case, &weights)?;
            worst = worst.max(relative_error(&a, &n));
        }
        out.push(OpCheck {
            name,
            instances,
            max_rel_err: worst,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_scales_by_largest_entry() {
        let a = Matrix::from_rows(&[[1.0, 2.0]]).unwrap();
        let n = Matrix::from_rows(&[[1.0, 2.5]]).unwrap();
        assert!((relative_error(&[a], &[n]) - 0.2).abs() < 1e-15);
    }

    #[test]
    fn separation_check() {
        let m = Matrix::from_rows(&[[0.0, 1.0], [0.0005, 2.0]]).unwrap();
        assert!(!columns_separated(&m, KINK_GAP));
        let m = Matrix::from_rows(&[[0.0, 1.0], [0.5, 2.0]]).unwrap();
        assert!(columns_separated(&m, KINK_GAP));
    }
}
