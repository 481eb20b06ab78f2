//! Objective terms: source cross-entropy, sliced Wasserstein discrepancy
//! between the two classifiers, confidence-filtered class-mean alignment, and
//! prediction entropy.

use std::collections::BTreeSet;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::matrix::Matrix;

/// Floor applied before every logarithm of a probability.
pub const LOG_FLOOR: f64 = 1e-12;

/// Scalar values of every objective term for one step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_s: f64,
    pub l_dis: f64,
    pub l_c: f64,
    pub l_d: f64,
    pub l_m: f64,
    pub l_em: f64,
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        [self.l_s, self.l_dis, self.l_c, self.l_d, self.l_m, self.l_em]
            .iter()
            .all(|v| v.is_finite())
    }
}

/// Target samples whose prototypical prediction is confident enough to be
/// used as pseudo-labelled data.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ConfidentSubset {
    pub indices: Vec<usize>,
    pub labels: Vec<usize>,
    pub classes_present: BTreeSet<usize>,
}

impl ConfidentSubset {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

fn one_hot(labels: &[usize], classes: usize) -> Matrix {
    let mut m = Matrix::zeros(labels.len(), classes);
    for (i, &c) in labels.iter().enumerate() {
        m.set(i, c, 1.0);
    }
    m
}

fn check_labels(labels: &[usize], shape: (usize, usize)) -> Result<()> {
    if labels.len() != shape.0 {
        return Err(Error::Data(format!(
            "{} labels for {} predictions",
            labels.len(),
            shape.0
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&c| c >= shape.1) {
        return Err(Error::Data(format!("label {bad} outside 0..{}", shape.1)));
    }
    Ok(())
}

/// Mean cross-entropy of probability rows against integer labels.
pub fn cross_entropy(g: &mut Graph, probs: Var, labels: &[usize]) -> Result<Var> {
    let shape = g.shape(probs);
    check_labels(labels, shape)?;
    let mask = g.constant(one_hot(labels, shape.1));
    let clamped = g.clamp_min(probs, LOG_FLOOR);
    let logp = g.log(clamped)?;
    let picked = g.mul(logp, mask)?;
    let total = g.sum(picked);
    Ok(g.scale(total, -1.0 / shape.0.max(1) as f64))
}

/// Source supervision: cross-entropy of both classifiers, summed.
pub fn source_loss(g: &mut Graph, probs_n: Var, probs_p: Var, labels: &[usize]) -> Result<Var> {
    let (sn, sp) = (g.shape(probs_n), g.shape(probs_p));
    if sn != sp {
        return Err(Error::Dimension {
            op: "source_loss",
            left: sn,
            right: sp,
        });
    }
    let a = cross_entropy(g, probs_n, labels)?;
    let b = cross_entropy(g, probs_p, labels)?;
    g.add(a, b)
}

/// `num` unit directions drawn uniformly on the sphere in `dim` dimensions,
/// stored as the columns of a `dim x num` matrix.
pub fn draw_projections(dim: usize, num: usize, rng: &mut impl Rng) -> Matrix {
    let mut theta = Matrix::zeros(dim, num);
    for j in 0..num {
        let mut norm = 0.0;
        while !(norm > 1e-12) {
            norm = 0.0;
            for i in 0..dim {
                let v: f64 = rng.sample(StandardNormal);
                theta.set(i, j, v);
                norm += v * v;
            }
            norm = norm.sqrt();
        }
        for i in 0..dim {
            let v = theta.get(i, j);
            theta.set(i, j, v / norm);
        }
    }
    theta
}

/// Sliced Wasserstein discrepancy between the row distributions of `p` and
/// `q` along the given projection columns: the mean, over projections and
/// order statistics, of squared differences between sorted projections.
pub fn swd_with(g: &mut Graph, p: Var, q: Var, projections: &Matrix) -> Result<Var> {
    let (sp, sq) = (g.shape(p), g.shape(q));
    if sp != sq {
        return Err(Error::Dimension {
            op: "swd",
            left: sp,
            right: sq,
        });
    }
    if projections.rows() != sp.1 || projections.cols() == 0 {
        return Err(Error::Dimension {
            op: "swd projections",
            left: sp,
            right: projections.shape(),
        });
    }
    let theta = g.constant(projections.clone());
    let pp = g.matmul(p, theta)?;
    let qp = g.matmul(q, theta)?;
    let ps = g.sort_columns(pp);
    let qs = g.sort_columns(qp);
    let d = g.sub(ps, qs)?;
    let sq = g.mul(d, d)?;
    Ok(g.mean(sq))
}

/// [`swd_with`] over `num_projections` freshly drawn directions.
pub fn swd(g: &mut Graph, p: Var, q: Var, num_projections: usize, rng: &mut impl Rng) -> Result<Var> {
    if num_projections == 0 {
        return Err(Error::Contract("swd needs at least one projection".into()));
    }
    let dim = g.shape(p).1;
    let theta = draw_projections(dim, num_projections, rng);
    swd_with(g, p, q, &theta)
}

/// Keeps sample `i` with pseudo label `argmax_c p[i, c]` when that maximum
/// probability exceeds `sigma`.
pub fn filter_confident(probs: &Matrix, sigma: f64) -> ConfidentSubset {
    let mut out = ConfidentSubset::default();
    for (i, c) in probs.argmax_rows().into_iter().enumerate() {
        if probs.get(i, c) > sigma {
            out.indices.push(i);
            out.labels.push(c);
            out.classes_present.insert(c);
        }
    }
    out
}

/// Class-mean alignment terms built from a source batch and the confident
/// part of a target batch.
#[derive(Clone, Debug)]
pub struct Alignment {
    /// Mean same-class distance between source and target class means.
    pub l_c: Var,
    /// Mean distance between source and target means of different classes.
    pub l_d: Var,
    /// Classes that entered the terms: confident target classes that also
    /// appear in the source batch.
    pub classes: Vec<usize>,
    /// No class was usable; both terms are constant zero.
    pub skipped: bool,
    /// Fewer than two classes were usable, so `l_d` is constant zero.
    pub single_class: bool,
}

/// Row-averaging matrix: row `r` averages the members of `classes[r]`.
fn averaging(classes: &[usize], members: &[(usize, usize)], n: usize) -> Matrix {
    let mut a = Matrix::zeros(classes.len(), n);
    for (r, &c) in classes.iter().enumerate() {
        let idx: Vec<usize> = members
            .iter()
            .filter(|(_, l)| *l == c)
            .map(|(i, _)| *i)
            .collect();
        let w = 1.0 / idx.len() as f64;
        for i in idx {
            a.set(r, i, w);
        }
    }
    a
}

pub fn alignment_loss(
    g: &mut Graph,
    z_s: Var,
    y_s: &[usize],
    z_t: Var,
    subset: &ConfidentSubset,
) -> Result<Alignment> {
    let (ss, st) = (g.shape(z_s), g.shape(z_t));
    if ss.1 != st.1 {
        return Err(Error::Dimension {
            op: "alignment_loss",
            left: ss,
            right: st,
        });
    }
    if y_s.len() != ss.0 {
        return Err(Error::Data(format!("{} labels for {} source rows", y_s.len(), ss.0)));
    }
    if let Some(&bad) = subset.indices.iter().find(|&&i| i >= st.0) {
        return Err(Error::Data(format!("confident index {bad} outside target batch")));
    }
    let source_classes: BTreeSet<usize> = y_s.iter().copied().collect();
    let classes: Vec<usize> = subset
        .classes_present
        .intersection(&source_classes)
        .copied()
        .collect();
    let k = classes.len();
    if k == 0 {
        let l_c = g.constant(Matrix::scalar(0.0));
        let l_d = g.constant(Matrix::scalar(0.0));
        return Ok(Alignment {
            l_c,
            l_d,
            classes,
            skipped: true,
            single_class: true,
        });
    }
    let src_members: Vec<(usize, usize)> = y_s.iter().copied().enumerate().collect();
    let tgt_members: Vec<(usize, usize)> = subset
        .indices
        .iter()
        .copied()
        .zip(subset.labels.iter().copied())
        .collect();
    let a_s = g.constant(averaging(&classes, &src_members, ss.0));
    let a_t = g.constant(averaging(&classes, &tgt_members, st.0));
    let mean_s = g.matmul(a_s, z_s)?;
    let mean_t = g.matmul(a_t, z_t)?;

    let diff = g.sub(mean_s, mean_t)?;
    let norms = g.row_norm(diff);
    let l_c = g.mean(norms);

    if k < 2 {
        let l_d = g.constant(Matrix::scalar(0.0));
        return Ok(Alignment {
            l_c,
            l_d,
            classes,
            skipped: false,
            single_class: true,
        });
    }
    let pairs = k * (k - 1);
    let mut pick_s = Matrix::zeros(pairs, k);
    let mut pick_t = Matrix::zeros(pairs, k);
    let mut r = 0;
    for a in 0..k {
        for b in 0..k {
            if a != b {
                pick_s.set(r, a, 1.0);
                pick_t.set(r, b, 1.0);
                r += 1;
            }
        }
    }
    let pick_s = g.constant(pick_s);
    let pick_t = g.constant(pick_t);
    let ps = g.matmul(pick_s, mean_s)?;
    let pt = g.matmul(pick_t, mean_t)?;
    let cross = g.sub(ps, pt)?;
    let cross_norms = g.row_norm(cross);
    let l_d = g.mean(cross_norms);
    Ok(Alignment {
        l_c,
        l_d,
        classes,
        skipped: false,
        single_class: false,
    })
}

/// Mean over samples of the summed entropies of both classifiers' rows.
pub fn entropy_loss(g: &mut Graph, probs_n: Var, probs_p: Var) -> Result<Var> {
    let (sn, sp) = (g.shape(probs_n), g.shape(probs_p));
    if sn != sp {
        return Err(Error::Dimension {
            op: "entropy_loss",
            left: sn,
            right: sp,
        });
    }
    let mut total = None;
    for p in [probs_n, probs_p] {
        let clamped = g.clamp_min(p, LOG_FLOOR);
        let logp = g.log(clamped)?;
        let plogp = g.mul(p, logp)?;
        let s = g.sum(plogp);
        total = Some(match total {
            None => s,
            Some(t) => g.add(t, s)?,
        });
    }
    let total = total.expect("two terms");
    Ok(g.scale(total, -1.0 / sn.0.max(1) as f64))
}
