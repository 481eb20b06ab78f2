//! Warm-up on source data followed by the three-step adversarial schedule.
//!
//! Each iteration runs
//! - Step A: source supervision of the generator and the neural classifier,
//! - Step B: the neural classifier alone maximizes its discrepancy with the
//!   prototypical classifier on target data while staying accurate on source,
//! - Step C: the generator alone minimizes that discrepancy together with the
//!   alignment and entropy terms.
//!
//! All randomness comes from ChaCha8 streams derived from the config seed, so a
//! run is a deterministic function of `(source, target, config)`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::config::TrainConfig;
use crate::data::{BatchIterator, Dataset};
use crate::error::{Error, Result};
use crate::losses::{
    alignment_loss, entropy_loss, filter_confident, source_loss, swd, ConfidentSubset, LossBreakdown,
};
use crate::matrix::Matrix;
use crate::metrics::{evaluate, EvalReport};
use crate::nn::{Adam, BoundClassifier, Module, NetDims, NeuralClassifier, Param};
use crate::nn::Generator;
use crate::proto::Prototypes;

const STREAM_INIT: u64 = 0;
const STREAM_RUN: u64 = 1;
const STREAM_SOURCE_A: u64 = 2;
const STREAM_SOURCE_BC: u64 = 3;
const STREAM_TARGET: u64 = 4;
const STREAM_SECOND: u64 = 5;

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// How the alignment term fared in a step.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlignmentStatus {
    Ok,
    /// Only one usable class, so the diff-class term is zero.
    SingleClass,
    /// No confident target class also present in the source batch.
    Skipped,
    /// Not computed in this step.
    NotApplicable,
}

/// Outcome of one optimization step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepReport {
    pub losses: LossBreakdown,
    pub n_confident: usize,
    pub classes_present: Vec<usize>,
    pub alignment: AlignmentStatus,
}

impl StepReport {
    fn supervised(l_s: f64) -> Self {
        StepReport {
            losses: LossBreakdown {
                l_s,
                ..LossBreakdown::default()
            },
            n_confident: 0,
            classes_present: Vec::new(),
            alignment: AlignmentStatus::NotApplicable,
        }
    }
}

/// One line of the run log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LogRecord {
    Iter {
        iter: usize,
        l_s: f64,
        l_dis: f64,
        l_c: f64,
        l_d: f64,
        l_m: f64,
        l_em: f64,
        n_confident: usize,
        classes_present: Vec<usize>,
        alignment: AlignmentStatus,
    },
    Eval {
        iter: usize,
        acc_cn: f64,
        acc_cp: f64,
    },
}

impl LogRecord {
    pub fn from_step(iter: usize, step: &StepReport) -> Self {
        let l = step.losses;
        LogRecord::Iter {
            iter,
            l_s: l.l_s,
            l_dis: l.l_dis,
            l_c: l.l_c,
            l_d: l.l_d,
            l_m: l.l_m,
            l_em: l.l_em,
            n_confident: step.n_confident,
            classes_present: step.classes_present.clone(),
            alignment: step.alignment,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("log record serializes")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSnapshot {
    pub iter: usize,
    pub acc_cn: f64,
    pub acc_cp: f64,
}

/// Class predictions of both classifiers. `secondary` holds the prototypical
/// classifier's labels, or the second neural classifier's in the
/// same-architecture variant.
#[derive(Clone, Debug, PartialEq)]
pub struct Predictions {
    pub neural: Vec<usize>,
    pub secondary: Vec<usize>,
}

/// Everything needed to continue a run exactly where it stopped.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub config: TrainConfig,
    pub dims: NetDims,
    pub generator: Generator,
    pub classifier: NeuralClassifier,
    /// Second neural classifier replacing the prototypical one in the
    /// same-architecture variant.
    pub second: Option<NeuralClassifier>,
    /// Training-time prototypes, re-centered on every source batch that
    /// updates the generator.
    pub prototypes: Prototypes,
    /// Source class centers over the whole source set in evaluation mode,
    /// refreshed at evaluation points. Training never reads them.
    pub eval_prototypes: Prototypes,
    pub opt_g: Adam,
    pub opt_c: Adam,
    pub pretrained: bool,
    /// Completed adversarial iterations.
    pub iteration: usize,
    pub history: Vec<LossBreakdown>,
    pub metrics: Vec<EvalSnapshot>,
    rng: ChaCha8Rng,
    source_a: BatchIterator,
    source_bc: BatchIterator,
    target_batches: BatchIterator,
}

enum SecondaryHead {
    Prototypes,
    Neural(BoundClassifier),
}

/// Checks everything that can be checked before any compute happens.
pub fn validate_inputs(source: &Dataset, target: &Dataset, cfg: &TrainConfig) -> Result<()> {
    cfg.validate()?;
    if !source.is_labeled() {
        return Err(Error::Config("the source set must be labelled".into()));
    }
    if source.dim() != target.dim() {
        return Err(Error::Config(format!(
            "feature dimensions differ: source {}, target {}",
            source.dim(),
            target.dim()
        )));
    }
    if source.classes != target.classes {
        return Err(Error::Config(format!(
            "label spaces differ: source has {} classes, target {}",
            source.classes, target.classes
        )));
    }
    if source.classes < 2 {
        return Err(Error::Config("at least two classes are required".into()));
    }
    Ok(())
}

impl TrainState {
    /// Fresh networks and optimizers; prototypes start at the source class
    /// centers under the untrained generator.
    pub fn new(source: &Dataset, target: &Dataset, cfg: &TrainConfig) -> Result<Self> {
        validate_inputs(source, target, cfg)?;
        let dims = NetDims {
            input: source.dim(),
            hidden: cfg.hidden_dim,
            embed: cfg.embed_dim,
            classes: source.classes,
        };
        let mut init = stream(cfg.seed, STREAM_INIT);
        let generator = Generator::new(&dims, cfg.dropout_retain, &mut init);
        let classifier = NeuralClassifier::new(&dims, &mut init);
        let second = cfg
            .ablation
            .same_classifier_variant
            .then(|| NeuralClassifier::new(&dims, &mut stream(cfg.seed, STREAM_SECOND)));
        let prototypes = source_prototypes(&generator, source, cfg.temperature)?;
        Ok(TrainState {
            config: cfg.clone(),
            dims,
            generator,
            classifier,
            second,
            eval_prototypes: prototypes.clone(),
            prototypes,
            opt_g: Adam::new(cfg.lr),
            opt_c: Adam::new(cfg.lr),
            pretrained: false,
            iteration: 0,
            history: Vec::new(),
            metrics: Vec::new(),
            rng: stream(cfg.seed, STREAM_RUN),
            source_a: BatchIterator::new(source.len(), cfg.batch_size, stream(cfg.seed, STREAM_SOURCE_A)),
            source_bc: BatchIterator::new(source.len(), cfg.batch_size, stream(cfg.seed, STREAM_SOURCE_BC)),
            target_batches: BatchIterator::new(target.len(), cfg.batch_size, stream(cfg.seed, STREAM_TARGET)),
        })
    }

    pub fn classes(&self) -> usize {
        self.dims.classes
    }

    /// Source-only warm-up of the generator and classifiers with their own
    /// optimizers, then prototypes reset to the source class centers.
    pub fn pretrain(&mut self, source: &Dataset) -> Result<()> {
        let mut opt_g = Adam::new(self.config.pretrain_lr);
        let mut opt_c = Adam::new(self.config.pretrain_lr);
        std::mem::swap(&mut opt_g, &mut self.opt_g);
        std::mem::swap(&mut opt_c, &mut self.opt_c);
        let mut outcome = Ok(());
        for it in 0..self.config.pretrain_iters {
            let (x, y) = self.source_a.next_batch(source);
            let y = y.expect("source is labelled");
            let step = self.step_a(&x, &y);
            if let Err(e) = self.numerical_check(step, it + 1) {
                outcome = Err(e);
                break;
            }
        }
        std::mem::swap(&mut opt_g, &mut self.opt_g);
        std::mem::swap(&mut opt_c, &mut self.opt_c);
        outcome?;
        self.prototypes = source_prototypes(&self.generator, source, self.config.temperature)?;
        self.eval_prototypes = self.prototypes.clone();
        self.pretrained = true;
        Ok(())
    }

    fn step_classifiers(&mut self) -> Result<()> {
        let mut p: Vec<&mut Param> = self.classifier.params_mut();
        if let Some(second) = self.second.as_mut() {
            p.extend(second.params_mut());
        }
        self.opt_c.step(&mut p)
    }

    fn bind_secondary(&self, g: &mut Graph) -> SecondaryHead {
        match &self.second {
            Some(c) => SecondaryHead::Neural(c.bind(g)),
            None => SecondaryHead::Prototypes,
        }
    }

    /// Embeds a batch in training mode (dropout active).
    fn embed_train(&mut self, g: &mut Graph, bound: &crate::nn::BoundGenerator, x: &Matrix) -> Result<Var> {
        let xv = g.constant(x.clone());
        bound.forward(g, xv, true, &mut self.rng)
    }

    /// Secondary-head probabilities on a source batch. The prototypes are
    /// first re-centered on the batch when `recenter` is set.
    fn secondary_source(
        &mut self,
        g: &mut Graph,
        head: &SecondaryHead,
        z: Var,
        labels: &[usize],
        recenter: bool,
    ) -> Result<Var> {
        match head {
            SecondaryHead::Neural(b) => b.forward(g, z),
            SecondaryHead::Prototypes => {
                if recenter {
                    let values = g.value(z).clone();
                    self.prototypes.update_from_source(&values, labels)?;
                }
                self.prototypes.predict_var(g, z)
            }
        }
    }

    /// Secondary-head probabilities on a target batch plus the probabilities
    /// used for confidence filtering. Prototypes are refined on the batch.
    fn secondary_target(&self, g: &mut Graph, head: &SecondaryHead, z: Var) -> Result<(Var, Matrix)> {
        match head {
            SecondaryHead::Neural(b) => {
                let p = b.forward(g, z)?;
                let values = g.value(p).clone();
                Ok((p, values))
            }
            SecondaryHead::Prototypes => {
                let values = g.value(z).clone();
                let refined = self
                    .prototypes
                    .refine_on_target(&values, self.config.proto_max_steps)?;
                let p = refined.prototypes.predict_var(g, z)?;
                Ok((p, refined.probabilities))
            }
        }
    }

    fn absorb_all(
        &mut self,
        g: &Graph,
        bg: &crate::nn::BoundGenerator,
        bc: &BoundClassifier,
        head: &SecondaryHead,
    ) {
        self.generator.zero_grads();
        self.classifier.zero_grads();
        self.generator.absorb(g, bg);
        self.classifier.absorb(g, bc);
        if let (Some(second), SecondaryHead::Neural(b)) = (self.second.as_mut(), head) {
            second.zero_grads();
            second.absorb(g, b);
        }
    }

    /// Step A: one update of the generator and classifiers on the source loss.
    pub fn step_a(&mut self, x: &Matrix, y: &[usize]) -> Result<StepReport> {
        let mut g = Graph::new();
        let bg = self.generator.bind(&mut g);
        let bc = self.classifier.bind(&mut g);
        let head = self.bind_secondary(&mut g);
        let z = self.embed_train(&mut g, &bg, x)?;
        let pn = bc.forward(&mut g, z)?;
        let pp = self.secondary_source(&mut g, &head, z, y, true)?;
        let ls = source_loss(&mut g, pn, pp, y)?;
        g.backward(ls)?;
        self.absorb_all(&g, &bg, &bc, &head);
        self.opt_g.step(&mut self.generator.params_mut())?;
        self.step_classifiers()?;
        Ok(StepReport::supervised(g.value(ls).item()))
    }

    /// Step B: the classifiers move to increase their disagreement on the
    /// target batch while staying accurate on the source batch. The generator
    /// is frozen and the prototypes are left untouched.
    pub fn step_b(&mut self, xs: &Matrix, ys: &[usize], xt: &Matrix) -> Result<StepReport> {
        self.generator.freeze(true);
        let out = self.step_b_inner(xs, ys, xt);
        self.generator.freeze(false);
        out
    }

    fn step_b_inner(&mut self, xs: &Matrix, ys: &[usize], xt: &Matrix) -> Result<StepReport> {
        let mut g = Graph::new();
        let bg = self.generator.bind(&mut g);
        let bc = self.classifier.bind(&mut g);
        let head = self.bind_secondary(&mut g);
        let zs = self.embed_train(&mut g, &bg, xs)?;
        let zt = self.embed_train(&mut g, &bg, xt)?;
        let pn_s = bc.forward(&mut g, zs)?;
        let pp_s = self.secondary_source(&mut g, &head, zs, ys, false)?;
        let ls = source_loss(&mut g, pn_s, pp_s, ys)?;
        let pn_t = bc.forward(&mut g, zt)?;
        let (pp_t, _) = self.secondary_target(&mut g, &head, zt)?;
        let dis = swd(&mut g, pn_t, pp_t, self.config.num_projections, &mut self.rng)?;
        let objective = if self.config.ablation.disable_dis {
            ls
        } else {
            let weighted = g.scale(dis, -self.config.lambda1);
            g.add(ls, weighted)?
        };
        g.backward(objective)?;
        self.absorb_all(&g, &bg, &bc, &head);
        self.step_classifiers()?;
        let mut report = StepReport::supervised(g.value(ls).item());
        report.losses.l_dis = g.value(dis).item();
        Ok(report)
    }

    /// Step C: the generator moves to reduce the disagreement, align confident
    /// target class means with source class means and sharpen target
    /// predictions. The classifiers are frozen.
    pub fn step_c(&mut self, xs: &Matrix, ys: &[usize], xt: &Matrix) -> Result<StepReport> {
        self.classifier.freeze(true);
        if let Some(s) = self.second.as_mut() {
            s.freeze(true);
        }
        let out = self.step_c_inner(xs, ys, xt);
        self.classifier.freeze(false);
        if let Some(s) = self.second.as_mut() {
            s.freeze(false);
        }
        out
    }

    fn step_c_inner(&mut self, xs: &Matrix, ys: &[usize], xt: &Matrix) -> Result<StepReport> {
        let cfg = self.config.clone();
        let mut g = Graph::new();
        let bg = self.generator.bind(&mut g);
        let bc = self.classifier.bind(&mut g);
        let head = self.bind_secondary(&mut g);
        let zs = self.embed_train(&mut g, &bg, xs)?;
        let zt = self.embed_train(&mut g, &bg, xt)?;
        let pn_s = bc.forward(&mut g, zs)?;
        let pp_s = self.secondary_source(&mut g, &head, zs, ys, true)?;
        let ls = source_loss(&mut g, pn_s, pp_s, ys)?;
        let pn_t = bc.forward(&mut g, zt)?;
        let (pp_t, filter_probs) = self.secondary_target(&mut g, &head, zt)?;
        let dis = swd(&mut g, pn_t, pp_t, cfg.num_projections, &mut self.rng)?;
        let subset: ConfidentSubset = filter_confident(&filter_probs, cfg.sigma);
        let align = alignment_loss(&mut g, zs, ys, zt, &subset)?;
        let lm = g.sub(align.l_c, align.l_d)?;
        let lem = entropy_loss(&mut g, pn_t, pp_t)?;

        let mut objective = ls;
        if !cfg.ablation.disable_em {
            objective = g.add(objective, lem)?;
        }
        if !cfg.ablation.disable_dis {
            let t = g.scale(dis, cfg.lambda1);
            objective = g.add(objective, t)?;
        }
        if !cfg.ablation.disable_m && !align.skipped {
            let t = g.scale(lm, cfg.lambda2);
            objective = g.add(objective, t)?;
        }
        g.backward(objective)?;
        self.absorb_all(&g, &bg, &bc, &head);
        self.opt_g.step(&mut self.generator.params_mut())?;

        let alignment = if align.skipped {
            AlignmentStatus::Skipped
        } else if align.single_class {
            AlignmentStatus::SingleClass
        } else {
            AlignmentStatus::Ok
        };
        let (l_c, l_d) = (g.value(align.l_c).item(), g.value(align.l_d).item());
        Ok(StepReport {
            losses: LossBreakdown {
                l_s: g.value(ls).item(),
                l_dis: g.value(dis).item(),
                l_c,
                l_d,
                l_m: l_c - l_d,
                l_em: g.value(lem).item(),
            },
            n_confident: subset.len(),
            classes_present: subset.classes_present.iter().copied().collect(),
            alignment,
        })
    }

    /// True when every network parameter is finite.
    pub fn is_finite(&self) -> bool {
        let mut params = self.generator.params();
        params.extend(self.classifier.params());
        if let Some(s) = &self.second {
            params.extend(s.params());
        }
        params.iter().all(|p| p.value.is_finite())
    }

    /// Turns overflow symptoms into a numerical error: non-finite parameters,
    /// or zero/non-finite activations reported by the ops as degenerate or
    /// out-of-domain inputs.
    fn numerical_check(&self, outcome: Result<StepReport>, iteration: usize) -> Result<StepReport> {
        let context = match &outcome {
            Err(e @ (Error::Degenerate(_) | Error::Domain { .. })) => Some(e.to_string()),
            Ok(r) if !r.losses.is_finite() => Some("non-finite loss".to_string()),
            _ if !self.is_finite() => Some("non-finite parameters".to_string()),
            _ => None,
        };
        match context {
            Some(context) => Err(Error::Numerical { iteration, context }),
            None => outcome,
        }
    }

    /// Runs one full iteration and records its Step C losses (Step A's in
    /// source-only mode).
    pub fn run_iteration(&mut self, source: &Dataset, target: &Dataset) -> Result<StepReport> {
        let iter = self.iteration + 1;
        let outcome = self.iteration_steps(source, target, iter);
        let report = self.numerical_check(outcome, iter)?;
        self.iteration = iter;
        self.history.push(report.losses);
        Ok(report)
    }

    fn iteration_steps(&mut self, source: &Dataset, target: &Dataset, iter: usize) -> Result<StepReport> {
        let (xa, ya) = self.source_a.next_batch(source);
        let ya = ya.expect("source is labelled");
        let report = if self.config.source_only {
            self.step_a(&xa, &ya)?
        } else {
            self.step_a(&xa, &ya)?;
            let (xs, ys) = self.source_bc.next_batch(source);
            let ys = ys.expect("source is labelled");
            let (xt, _) = self.target_batches.next_batch(target);
            let b = self.step_b(&xs, &ys, &xt);
            self.numerical_check(b, iter)?;
            self.step_c(&xs, &ys, &xt)?
        };
        Ok(report)
    }

    /// Re-centers the evaluation prototypes on the full source set.
    pub fn refresh_eval_prototypes(&mut self, source: &Dataset) -> Result<()> {
        self.eval_prototypes = source_prototypes(&self.generator, source, self.config.temperature)?;
        Ok(())
    }

    /// Evaluation-mode predictions of both classifiers.
    pub fn predict(&self, x: &Matrix) -> Result<Predictions> {
        let z = self.generator.embed(x)?;
        self.predict_embedded(&z)
    }

    /// Predictions for precomputed embeddings. The prototypical classifier
    /// refines the evaluation prototypes on these embeddings first.
    pub fn predict_embedded(&self, z: &Matrix) -> Result<Predictions> {
        let neural = self.classifier.predict(z)?.argmax_rows();
        let secondary = match &self.second {
            Some(c) => c.predict(z)?.argmax_rows(),
            None => {
                self.eval_prototypes
                    .refine_on_target(z, self.config.proto_max_steps)?
                    .labels
            }
        };
        Ok(Predictions { neural, secondary })
    }

    fn snapshot(
        &mut self,
        source: &Dataset,
        target: &Dataset,
        sink: &mut dyn FnMut(&LogRecord) -> Result<()>,
    ) -> Result<Option<EvalReport>> {
        self.refresh_eval_prototypes(source)?;
        if !target.is_labeled() {
            return Ok(None);
        }
        let report = evaluate(self, target)?;
        let snap = EvalSnapshot {
            iter: self.iteration,
            acc_cn: report.acc_cn,
            acc_cp: report.acc_cp,
        };
        self.metrics.push(snap);
        sink(&LogRecord::Eval {
            iter: snap.iter,
            acc_cn: snap.acc_cn,
            acc_cp: snap.acc_cp,
        })?;
        Ok(Some(report))
    }

    /// Runs adversarial iterations until `config.train_iters`, emitting log
    /// records. Evaluation snapshots are taken before the first iteration,
    /// every `eval_every` iterations and after the last one.
    pub fn run(
        &mut self,
        source: &Dataset,
        target: &Dataset,
        sink: &mut dyn FnMut(&LogRecord) -> Result<()>,
    ) -> Result<()> {
        validate_inputs(source, target, &self.config)?;
        if source.dim() != self.dims.input || source.classes != self.dims.classes {
            return Err(Error::Config("datasets do not match the trained model".into()));
        }
        if self.iteration == 0 {
            self.snapshot(source, target, sink)?;
        }
        while self.iteration < self.config.train_iters {
            let report = self.run_iteration(source, target)?;
            sink(&LogRecord::from_step(self.iteration, &report))?;
            if self.iteration % self.config.eval_every == 0 || self.iteration == self.config.train_iters {
                self.snapshot(source, target, sink)?;
            }
        }
        if self.config.train_iters == 0 {
            self.refresh_eval_prototypes(source)?;
        }
        Ok(())
    }
}

fn source_prototypes(generator: &Generator, source: &Dataset, temperature: f64) -> Result<Prototypes> {
    let labels = source.require_labels("prototype initialization")?;
    let z = generator.embed(&source.features)?;
    Prototypes::init_from_source(&z, labels, source.classes, temperature)
}

/// Pretraining followed by the adversarial iterations.
pub fn train_with(
    source: &Dataset,
    target: &Dataset,
    cfg: &TrainConfig,
    sink: &mut dyn FnMut(&LogRecord) -> Result<()>,
) -> Result<TrainState> {
    let mut state = TrainState::new(source, target, cfg)?;
    state.pretrain(source)?;
    state.run(source, target, sink)?;
    Ok(state)
}

pub fn train(source: &Dataset, target: &Dataset, cfg: &TrainConfig) -> Result<TrainState> {
    train_with(source, target, cfg, &mut |_| Ok(()))
}
