//! Parameter-free prototypical classifier.
//!
//! Each class is represented by the mean embedding of its members. A sample's
//! class probabilities are a temperature softmax over its cosine similarities
//! to the prototypes. Prototypes start at source class centers and are refined
//! on target embeddings by alternating pseudo-label assignment and re-centering.

use serde::{Deserialize, Serialize};

use crate::autodiff::{l2, Graph, Var};
use crate::error::{Error, Result};
use crate::matrix::{Matrix, Trans};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prototypes {
    /// One prototype per class, `classes x embed`.
    pub mu: Matrix,
    pub source_counts: Vec<usize>,
    pub target_counts: Vec<usize>,
    pub temperature: f64,
}

/// Result of [`Prototypes::refine_on_target`].
#[derive(Clone, Debug, PartialEq)]
pub struct Refinement {
    pub prototypes: Prototypes,
    /// Pseudo labels from the last assignment pass.
    pub labels: Vec<usize>,
    /// Class probabilities from the last assignment pass.
    pub probabilities: Matrix,
    /// Number of assignment passes run.
    pub passes: usize,
    /// True when the last pass reproduced the previous assignment.
    pub converged: bool,
}

impl Prototypes {
    /// Class centers of labelled source embeddings. Every class needs a sample.
    pub fn init_from_source(
        z: &Matrix,
        labels: &[usize],
        classes: usize,
        temperature: f64,
    ) -> Result<Self> {
        check_labels(z, labels, classes)?;
        let (mu, counts) = class_means(z, labels, classes);
        if let Some(class) = counts.iter().position(|&n| n == 0) {
            return Err(Error::EmptyClass { class });
        }
        Ok(Prototypes {
            mu,
            source_counts: counts,
            target_counts: vec![0; classes],
            temperature,
        })
    }

    /// Re-centers classes present in `labels`; absent classes keep their
    /// current prototype.
    pub fn update_from_source(&mut self, z: &Matrix, labels: &[usize]) -> Result<()> {
        check_labels(z, labels, self.classes())?;
        let (mu, counts) = class_means(z, labels, self.classes());
        for (c, &n) in counts.iter().enumerate() {
            if n > 0 {
                self.mu.row_mut(c).copy_from_slice(mu.row(c));
            }
        }
        self.source_counts = counts;
        Ok(())
    }

    pub fn classes(&self) -> usize {
        self.mu.rows()
    }

    pub fn dim(&self) -> usize {
        self.mu.cols()
    }

    /// Unit-norm prototypes, transposed to `embed x classes`.
    fn normalized_t(&self) -> Result<Matrix> {
        let mut unit = self.mu.clone();
        for c in 0..unit.rows() {
            let n = l2(unit.row(c));
            if !(n > 0.0) {
                return Err(Error::Degenerate(format!("prototype {c} has zero norm")));
            }
            unit.row_mut(c).iter_mut().for_each(|x| *x /= n);
        }
        Ok(unit.transpose())
    }

    /// Differentiable class probabilities for the embeddings at `z`.
    pub fn predict_var(&self, g: &mut Graph, z: Var) -> Result<Var> {
        let shape = g.shape(z);
        if shape.1 != self.dim() {
            return Err(Error::Dimension {
                op: "proto_predict",
                left: shape,
                right: self.mu.shape(),
            });
        }
        let protos = g.constant(self.normalized_t()?);
        let unit = g.row_normalize(z)?;
        let cos = g.matmul(unit, protos)?;
        let logits = g.scale(cos, 1.0 / self.temperature);
        Ok(g.row_softmax(logits))
    }

    pub fn predict(&self, z: &Matrix) -> Result<Matrix> {
        let mut g = Graph::new();
        let zv = g.constant(z.clone());
        let p = self.predict_var(&mut g, zv)?;
        Ok(g.value(p).clone())
    }

    /// Cosine similarity of every sample to every prototype.
    pub fn cosine(&self, z: &Matrix) -> Result<Matrix> {
        let protos = self.normalized_t()?;
        let mut unit = z.clone();
        for i in 0..unit.rows() {
            let n = l2(unit.row(i));
            if !(n > 0.0) {
                return Err(Error::Degenerate(format!("row {i} has zero norm")));
            }
            unit.row_mut(i).iter_mut().for_each(|x| *x /= n);
        }
        let mut out = Matrix::zeros(z.rows(), self.classes());
        crate::matrix::gemm(1.0, &unit, Trans::No, &protos, Trans::No, 0.0, &mut out);
        Ok(out)
    }

    /// Alternates pseudo-labelling and re-centering on target embeddings for at
    /// most `max_steps` assignment passes, stopping early once assignments stop
    /// changing. Classes that receive no samples keep their prototype.
    pub fn refine_on_target(&self, z: &Matrix, max_steps: usize) -> Result<Refinement> {
        if max_steps == 0 {
            return Err(Error::Contract("refinement needs max_steps >= 1".into()));
        }
        if z.cols() != self.dim() {
            return Err(Error::Dimension {
                op: "refine_on_target",
                left: z.shape(),
                right: self.mu.shape(),
            });
        }
        let mut current = self.clone();
        let mut previous: Option<Vec<usize>> = None;
        let mut passes = 0;
        loop {
            let probabilities = current.predict(z)?;
            let labels = probabilities.argmax_rows();
            passes += 1;
            let converged = previous.as_ref() == Some(&labels);
            if converged || passes == max_steps {
                if !converged {
                    current.recenter_on(z, &labels);
                }
                return Ok(Refinement {
                    prototypes: current,
                    labels,
                    probabilities,
                    passes,
                    converged,
                });
            }
            current.recenter_on(z, &labels);
            previous = Some(labels);
        }
    }

    fn recenter_on(&mut self, z: &Matrix, labels: &[usize]) {
        let (mu, counts) = class_means(z, labels, self.classes());
        for (c, &n) in counts.iter().enumerate() {
            if n > 0 {
                self.mu.row_mut(c).copy_from_slice(mu.row(c));
            }
        }
        self.target_counts = counts;
    }
}

fn check_labels(z: &Matrix, labels: &[usize], classes: usize) -> Result<()> {
    if labels.len() != z.rows() {
        return Err(Error::Data(format!(
            "{} labels for {} embeddings",
            labels.len(),
            z.rows()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::Data(format!("label {bad} outside 0..{classes}")));
    }
    Ok(())
}

/// Per-class means (zero rows for empty classes) and per-class counts.
pub(crate) fn class_means(z: &Matrix, labels: &[usize], classes: usize) -> (Matrix, Vec<usize>) {
    let mut sums = Matrix::zeros(classes, z.cols());
    let mut counts = vec![0usize; classes];
    for (i, &c) in labels.iter().enumerate() {
        counts[c] += 1;
        for (s, v) in sums.row_mut(c).iter_mut().zip(z.row(i)) {
            *s += v;
        }
    }
    for (c, &n) in counts.iter().enumerate() {
        if n > 0 {
            let inv = 1.0 / n as f64;
            sums.row_mut(c).iter_mut().for_each(|x| *x *= inv);
        }
    }
    (sums, counts)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: &[&[f64]]) -> Matrix {
        Matrix::from_rows(rows).unwrap()
    }

    #[test]
    fn sample_on_a_prototype_takes_that_class() {
        let p = Prototypes::init_from_source(
            &m(&[&[1.0, 0.0, 0.0], &[0.0, 1.0, 0.0], &[0.0, 0.0, 2.0]]),
            &[0, 1, 2],
            3,
            1.0,
        )
        .unwrap();
        let probs = p.predict(&m(&[&[0.0, 3.0, 0.0]])).unwrap();
        let row = probs.row(0);
        assert!(row[1] > row[0] && row[1] > row[2]);
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn positive_scaling_leaves_probabilities_unchanged() {
        let p = Prototypes::init_from_source(&m(&[&[1.0, 0.5], &[-0.3, 1.0]]), &[0, 1], 2, 0.5)
            .unwrap();
        let a = p.predict(&m(&[&[0.3, -0.8]])).unwrap();
        let b = p.predict(&m(&[&[0.3 * 17.0, -0.8 * 17.0]])).unwrap();
        assert!(a.max_abs_diff(&b) < 1e-15);
    }

    #[test]
    fn one_sample_per_class_prototypes_are_those_samples() {
        let z = m(&[&[1.0, 2.0], &[3.0, -1.0]]);
        let p = Prototypes::init_from_source(&z, &[1, 0], 2, 1.0).unwrap();
        assert_eq!(p.mu.row(0), &[3.0, -1.0]);
        assert_eq!(p.mu.row(1), &[1.0, 2.0]);
    }

    #[test]
    fn duplicated_source_gives_same_prototypes() {
        let z = m(&[&[1.0, 2.0], &[3.0, -1.0], &[0.5, 0.5]]);
        let y = [0, 1, 0];
        let once = Prototypes::init_from_source(&z, &y, 2, 1.0).unwrap();
        let z2 = m(&[
            &[1.0, 2.0],
            &[3.0, -1.0],
            &[0.5, 0.5],
            &[1.0, 2.0],
            &[3.0, -1.0],
            &[0.5, 0.5],
        ]);
        let twice = Prototypes::init_from_source(&z2, &[0, 1, 0, 0, 1, 0], 2, 1.0).unwrap();
        assert_eq!(once.mu, twice.mu);
    }

    #[test]
    fn empty_class_names_the_class() {
        let z = m(&[&[1.0, 2.0], &[3.0, -1.0]]);
        match Prototypes::init_from_source(&z, &[0, 2], 3, 1.0) {
            Err(Error::EmptyClass { class }) => assert_eq!(class, 1),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn zero_norm_inputs_are_degenerate() {
        let p = Prototypes::init_from_source(&m(&[&[1.0, 0.0], &[0.0, 1.0]]), &[0, 1], 2, 1.0)
            .unwrap();
        assert!(matches!(
            p.predict(&m(&[&[0.0, 0.0]])),
            Err(Error::Degenerate(_))
        ));
        let q = Prototypes::init_from_source(&m(&[&[0.0, 0.0], &[0.0, 1.0]]), &[0, 1], 2, 1.0)
            .unwrap();
        assert!(matches!(
            q.predict(&m(&[&[1.0, 0.0]])),
            Err(Error::Degenerate(_))
        ));
    }

    #[test]
    fn refinement_on_source_copy_converges_immediately() {
        let z = m(&[&[1.0, 0.1], &[0.9, -0.1], &[-0.1, 1.0], &[0.1, 0.8]]);
        let y = [0, 0, 1, 1];
        let p = Prototypes::init_from_source(&z, &y, 2, 1.0).unwrap();
        let r = p.refine_on_target(&z, 3).unwrap();
        assert_eq!(r.labels, y);
        assert!(r.converged);
        assert_eq!(r.passes, 2);
        assert_eq!(r.prototypes.mu, p.mu);
        assert_eq!(r.prototypes.target_counts, vec![2, 2]);
    }

    #[test]
    fn single_step_is_nearest_source_centroid() {
        let src = m(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let p = Prototypes::init_from_source(&src, &[0, 1], 2, 1.0).unwrap();
        let tgt = m(&[&[0.6, 0.4], &[0.45, 0.55], &[2.0, 0.1]]);
        let r = p.refine_on_target(&tgt, 1).unwrap();
        assert_eq!(r.passes, 1);
        assert_eq!(r.labels, p.predict(&tgt).unwrap().argmax_rows());
        assert_eq!(r.labels, vec![0, 1, 0]);
    }

    #[test]
    fn empty_class_keeps_previous_prototype_during_refinement() {
        let src = m(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let p = Prototypes::init_from_source(&src, &[0, 1], 2, 1.0).unwrap();
        let tgt = m(&[&[1.0, 0.2], &[0.9, 0.1]]);
        let r = p.refine_on_target(&tgt, 3).unwrap();
        assert_eq!(r.prototypes.mu.row(1), &[0.0, 1.0]);
        assert_eq!(r.prototypes.target_counts, vec![2, 0]);
    }

    #[test]
    fn refinement_rejects_zero_steps() {
        let p = Prototypes::init_from_source(&m(&[&[1.0, 0.0]]), &[0], 1, 1.0).unwrap();
        assert!(p.refine_on_target(&m(&[&[1.0, 0.0]]), 0).is_err());
    }
}
