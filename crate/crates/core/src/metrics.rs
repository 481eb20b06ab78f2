//! Accuracy reports for both classifiers and a 2-D PCA export for plotting.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Domain};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::trainer::TrainState;

/// Per-classifier accuracy summary. The prototypical classifier (`cp`) is the
/// headline; `cn` is the neural classifier.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub acc_cn: f64,
    pub acc_cp: f64,
    pub per_class_cn: Vec<f64>,
    pub per_class_cp: Vec<f64>,
    /// `confusion[true][predicted]` counts.
    pub confusion_cn: Vec<Vec<usize>>,
    pub confusion_cp: Vec<Vec<usize>>,
    pub n_eval: usize,
}

pub struct ClassScores {
    pub accuracy: f64,
    pub per_class: Vec<f64>,
    pub confusion: Vec<Vec<usize>>,
}

/// Accuracy, per-class recall and confusion counts. Classes without samples
/// report a per-class accuracy of 0.
pub fn score(truth: &[usize], predicted: &[usize], classes: usize) -> ClassScores {
    let mut confusion = vec![vec![0usize; classes]; classes];
    for (&t, &p) in truth.iter().zip(predicted) {
        confusion[t][p] += 1;
    }
    let correct: usize = (0..classes).map(|c| confusion[c][c]).sum();
    let per_class = confusion
        .iter()
        .enumerate()
        .map(|(c, row)| {
            let n: usize = row.iter().sum();
            if n == 0 {
                0.0
            } else {
                row[c] as f64 / n as f64
            }
        })
        .collect();
    ClassScores {
        accuracy: correct as f64 / truth.len().max(1) as f64,
        per_class,
        confusion,
    }
}

impl EvalReport {
    pub fn from_predictions(
        truth: &[usize],
        pred_cn: &[usize],
        pred_cp: &[usize],
        classes: usize,
    ) -> Self {
        let a = score(truth, pred_cn, classes);
        let b = score(truth, pred_cp, classes);
        EvalReport {
            acc_cn: a.accuracy,
            acc_cp: b.accuracy,
            per_class_cn: a.per_class,
            per_class_cp: b.per_class,
            confusion_cn: a.confusion,
            confusion_cp: b.confusion,
            n_eval: truth.len(),
        }
    }

    pub fn headline(&self) -> f64 {
        self.acc_cp
    }

    /// Key-value text with one matrix row per line.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "n_eval = {}", self.n_eval);
        let _ = writeln!(s, "headline = {}", self.acc_cp);
        let _ = writeln!(s, "acc_cn = {}", self.acc_cn);
        let _ = writeln!(s, "acc_cp = {}", self.acc_cp);
        let list = |v: &[f64]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(", ");
        let _ = writeln!(s, "per_class_cn = [{}]", list(&self.per_class_cn));
        let _ = writeln!(s, "per_class_cp = [{}]", list(&self.per_class_cp));
        for (name, m) in [("confusion_cn", &self.confusion_cn), ("confusion_cp", &self.confusion_cp)] {
            let _ = writeln!(s, "{name} = [");
            for row in m {
                let cells: Vec<String> = row.iter().map(|c| c.to_string()).collect();
                let _ = writeln!(s, "  [{}],", cells.join(", "));
            }
            let _ = writeln!(s, "]");
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Data(format!("bad report: {e}")))
    }
}

/// Scores both classifiers of `state` on a labelled target set, in
/// evaluation mode. The prototypes are refined on the evaluated embeddings.
pub fn evaluate(state: &TrainState, target: &Dataset) -> Result<EvalReport> {
    let truth = target
        .labels
        .as_deref()
        .ok_or_else(|| Error::Eval("evaluation needs a labelled target set".into()))?;
    let preds = state.predict(&target.features)?;
    Ok(EvalReport::from_predictions(
        truth,
        &preds.neural,
        &preds.secondary,
        state.classes(),
    ))
}

/// Top-two principal directions and coordinates of a point cloud.
#[derive(Clone, Debug)]
pub struct Pca {
    pub mean: Matrix,
    /// `2 x d`, unit rows, largest-magnitude entry of each row positive.
    pub components: Matrix,
    /// `n x 2`.
    pub coords: Matrix,
    pub variances: [f64; 2],
    /// The data has no variance; coordinates are all zero.
    pub degenerate: bool,
}

pub fn pca_project(z: &Matrix) -> Result<Pca> {
    let (n, d) = z.shape();
    if n < 2 {
        return Err(Error::Data("PCA needs at least two samples".into()));
    }
    let mean = z.column_means();
    let centered = DMatrix::from_fn(n, d, |i, j| z.get(i, j) - mean.get(0, j));
    let cov = centered.transpose() * &centered / (n as f64 - 1.0);
    let total_var = cov.trace();
    if !(total_var > 0.0) {
        return Ok(Pca {
            mean,
            components: Matrix::zeros(2, d),
            coords: Matrix::zeros(n, 2),
            variances: [0.0, 0.0],
            degenerate: true,
        });
    }
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let mut components = Matrix::zeros(2, d);
    let mut variances = [0.0; 2];
    for k in 0..2.min(d) {
        let col = eig.eigenvectors.column(order[k]);
        let mut pivot = 0;
        for j in 1..d {
            if col[j].abs() > col[pivot].abs() {
                pivot = j;
            }
        }
        let sign = if col[pivot] < 0.0 { -1.0 } else { 1.0 };
        for j in 0..d {
            components.set(k, j, sign * col[j]);
        }
        variances[k] = eig.eigenvalues[order[k]].max(0.0);
    }
    let mut coords = Matrix::zeros(n, 2);
    for i in 0..n {
        for k in 0..2 {
            let v: f64 = (0..d).map(|j| centered[(i, j)] * components.get(k, j)).sum();
            coords.set(i, k, v);
        }
    }
    Ok(Pca {
        mean,
        components,
        coords,
        variances,
        degenerate: false,
    })
}

/// One row of the projection export.
#[derive(Clone, Debug, PartialEq)]
pub struct ProjectedPoint {
    pub x: f64,
    pub y: f64,
    pub domain: Domain,
    pub label: Option<usize>,
    pub pred: usize,
}

/// Embeds both domains with the trained generator, projects them jointly onto
/// two principal axes, and attaches labels and prototype-classifier predictions.
pub fn project_domains(
    state: &TrainState,
    source: &Dataset,
    target: &Dataset,
) -> Result<(Vec<ProjectedPoint>, bool)> {
    let zs = state.generator.embed(&source.features)?;
    let zt = state.generator.embed(&target.features)?;
    let src_pred = state.predict_embedded(&zs)?.secondary;
    let tgt_pred = state.predict_embedded(&zt)?.secondary;
    let mut all = Matrix::zeros(zs.rows() + zt.rows(), zs.cols());
    for i in 0..zs.rows() {
        all.row_mut(i).copy_from_slice(zs.row(i));
    }
    for i in 0..zt.rows() {
        all.row_mut(zs.rows() + i).copy_from_slice(zt.row(i));
    }
    let pca = pca_project(&all)?;
    let mut points = Vec::with_capacity(all.rows());
    for (ds, offset, preds) in [(source, 0, &src_pred), (target, zs.rows(), &tgt_pred)] {
        for i in 0..ds.len() {
            points.push(ProjectedPoint {
                x: pca.coords.get(offset + i, 0),
                y: pca.coords.get(offset + i, 1),
                domain: ds.domain,
                label: ds.labels.as_ref().map(|l| l[i]),
                pred: preds[i],
            });
        }
    }
    Ok((points, pca.degenerate))
}

pub fn write_projection_csv(points: &[ProjectedPoint], path: &Path) -> Result<()> {
    let mut s = String::from("x,y,domain,label,pred\n");
    for p in points {
        let domain = match p.domain {
            Domain::Source => "source",
            Domain::Target => "target",
        };
        let label = p.label.map_or_else(|| "-1".to_string(), |l| l.to_string());
        let _ = writeln!(s, "{},{},{},{},{}", p.x, p.y, domain, label, p.pred);
    }
    std::fs::write(path, s).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_predictions() {
        let t = [0, 1, 2, 1];
        let r = EvalReport::from_predictions(&t, &t, &t, 3);
        assert_eq!(r.acc_cp, 1.0);
        assert_eq!(r.confusion_cn, vec![vec![1, 0, 0], vec![0, 2, 0], vec![0, 0, 1]]);
    }

    #[test]
    fn constant_predictor_on_balanced_data() {
        let t = [0, 1, 2, 0, 1, 2];
        let r = EvalReport::from_predictions(&t, &[1; 6], &[2; 6], 3);
        assert!((r.acc_cn - 1.0 / 3.0).abs() < 1e-15);
        assert!((r.acc_cp - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn ten_sample_hand_count() {
        let truth = [0, 0, 0, 1, 1, 1, 1, 2, 2, 2];
        let pred = [0, 1, 0, 1, 1, 2, 1, 2, 0, 2];
        let s = score(&truth, &pred, 3);
        assert_eq!(s.confusion, vec![vec![2, 1, 0], vec![0, 3, 1], vec![1, 0, 2]]);
        assert!((s.accuracy - 0.7).abs() < 1e-15);
        assert!((s.per_class[1] - 0.75).abs() < 1e-15);
        for (c, row) in s.confusion.iter().enumerate() {
            let n = truth.iter().filter(|&&t| t == c).count();
            assert_eq!(row.iter().sum::<usize>(), n);
        }
    }

    #[test]
    fn report_text_round_trip() {
        let truth = [0, 1, 1, 0];
        let r = EvalReport::from_predictions(&truth, &[0, 1, 0, 0], &[1, 1, 1, 0], 2);
        let text = r.to_text();
        let back = EvalReport::from_text(&text).unwrap();
        assert_eq!(back, r);
    }

    #[test]
    fn pca_of_planar_data_reconstructs_exactly() {
        let d = 6;
        let u = [1.0, 2.0, 0.0, -1.0, 0.5, 0.0];
        let v = [0.0, 1.0, 1.0, 1.0, -2.0, 3.0];
        let z = Matrix::from_fn(30, d, |i, j| {
            let a = (i as f64 * 0.37).sin() * 3.0;
            let b = (i as f64 * 1.3).cos();
            1.0 + a * u[j] + b * v[j]
        });
        let p = pca_project(&z).unwrap();
        for i in 0..30 {
            for j in 0..d {
                let rec = p.mean.get(0, j)
                    + p.coords.get(i, 0) * p.components.get(0, j)
                    + p.coords.get(i, 1) * p.components.get(1, j);
                assert!((rec - z.get(i, j)).abs() < 1e-8);
            }
        }
        let means = p.coords.column_means();
        assert!(means.as_slice().iter().all(|m| m.abs() < 1e-10));
        assert!(p.variances[0] >= p.variances[1]);
    }

    #[test]
    fn pca_sign_convention_and_degenerate_case() {
        let z = Matrix::from_fn(10, 3, |i, j| (i * (j + 1)) as f64 * 0.1 - 0.3);
        let p = pca_project(&z).unwrap();
        for k in 0..2 {
            let row = p.components.row(k);
            let pivot = row
                .iter()
                .copied()
                .fold(0.0f64, |a, b| if b.abs() > a.abs() { b } else { a });
            assert!(pivot > 0.0 || p.variances[k] == 0.0);
        }
        let flat = Matrix::filled(5, 4, 2.0);
        let q = pca_project(&flat).unwrap();
        assert!(q.degenerate);
        assert!(q.coords.as_slice().iter().all(|&c| c == 0.0));
        assert!(pca_project(&Matrix::zeros(1, 3)).is_err());
    }
}
