//! Greedy sequence inference: a bridging stage and a final stage, each
//! appending one predicted pillar at a time.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::forward::{PillarLibrary, PillarSequence, MAX_SEQUENCE_LEN, NUM_CLASSES};
use crate::metrics::pmr;
use crate::models::{ApnCModel, ApnModel, ItnModel, PillarClassifier};
use crate::scalar::Scalar;
use crate::shape::FlowShape;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Mode {
    ApnOnly,
    ApnCOnly,
    ApnItn,
    Oracle,
    OracleItn,
}

impl Mode {
    pub fn uses_itn(self) -> bool {
        matches!(self, Mode::ApnItn | Mode::OracleItn)
    }

    pub fn name(self) -> &'static str {
        match self {
            Mode::ApnOnly => "apn",
            Mode::ApnCOnly => "apnc",
            Mode::ApnItn => "apn+itn",
            Mode::Oracle => "oracle",
            Mode::OracleItn => "oracle+itn",
        }
    }

    pub fn parse(s: &str) -> Option<Mode> {
        match s {
            "apn" => Some(Mode::ApnOnly),
            "apnc" => Some(Mode::ApnCOnly),
            "apn+itn" => Some(Mode::ApnItn),
            "oracle" => Some(Mode::Oracle),
            "oracle+itn" => Some(Mode::OracleItn),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct InferenceConfig {
    pub tau_a: f64,
    pub tau_b: f64,
    pub max_steps_total: usize,
    pub max_steps_stage_a: usize,
    pub no_improve_patience: usize,
    pub mode: Mode,
    /// Apply redundant-pillar pruning to the returned sequence.
    pub prune: bool,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self {
            tau_a: 0.95,
            tau_b: 0.99,
            max_steps_total: 20,
            max_steps_stage_a: 10,
            no_improve_patience: 3,
            mode: Mode::ApnItn,
            prune: false,
        }
    }
}

impl InferenceConfig {
    pub fn with_mode(mode: Mode) -> Self {
        Self { mode, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("tau_A", self.tau_a), ("tau_B", self.tau_b)] {
            if !(v > 0.0 && v <= 1.0) {
                return Err(Error::InvalidParameter(format!("{name} must lie in (0, 1], got {v}")));
            }
        }
        if self.max_steps_total == 0 || self.max_steps_stage_a == 0 || self.no_improve_patience == 0 {
            return Err(Error::InvalidParameter("step limits and patience must be at least 1".into()));
        }
        if self.max_steps_total > MAX_SEQUENCE_LEN {
            return Err(Error::InvalidParameter(format!(
                "max steps {} exceeds the sequence cap of {MAX_SEQUENCE_LEN}",
                self.max_steps_total
            )));
        }
        Ok(())
    }
}

/// One-pillar-at-a-time predictor used by a stage.
pub trait Predictor {
    /// Next pillar for `seq` (whose render is `current`) toward `target`,
    /// with the posterior maximum when the predictor has one.
    fn predict(&self, seq: &PillarSequence, current: &FlowShape, target: &FlowShape) -> Result<(usize, Option<f64>)>;
}

/// Exhaustive one-step lookahead over all classes.
pub struct OraclePredictor<'a> {
    pub library: &'a PillarLibrary,
}

impl Predictor for OraclePredictor<'_> {
    fn predict(&self, seq: &PillarSequence, _current: &FlowShape, target: &FlowShape) -> Result<(usize, Option<f64>)> {
        Ok((oracle_step(seq, target, self.library)?, None))
    }
}

fn classifier_step<T: Scalar, M: PillarClassifier<T>>(
    model: &M,
    current: &FlowShape,
    target: &FlowShape,
) -> Result<(usize, Option<f64>)> {
    let (k, post) = model.predict_pillar(current, target)?;
    let max = post.iter().fold(f64::NEG_INFINITY, |m, p| m.max(p.to_f64_lossy()));
    Ok((k, Some(max)))
}

impl<T: Scalar> Predictor for ApnModel<T> {
    fn predict(&self, _seq: &PillarSequence, current: &FlowShape, target: &FlowShape) -> Result<(usize, Option<f64>)> {
        classifier_step(self, current, target)
    }
}

impl<T: Scalar> Predictor for ApnCModel<T> {
    fn predict(&self, _seq: &PillarSequence, current: &FlowShape, target: &FlowShape) -> Result<(usize, Option<f64>)> {
        classifier_step(self, current, target)
    }
}

/// The class maximizing PMR between `render(seq ++ [k])` and `target`;
/// lowest index on ties.
pub fn oracle_step(seq: &PillarSequence, target: &FlowShape, library: &PillarLibrary) -> Result<usize> {
    if seq.len() >= MAX_SEQUENCE_LEN {
        return Err(Error::LengthCap(MAX_SEQUENCE_LEN));
    }
    let mut best = (0usize, f64::NEG_INFINITY);
    let mut cand = seq.clone();
    for k in 1..=NUM_CLASSES {
        cand.push(k);
        let score: f64 = pmr(&library.render(&cand)?, target)?;
        cand = cand.prefix(seq.len());
        if score > best.1 {
            best = (k, score);
        }
    }
    Ok(best.0)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Stage {
    A,
    B,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::A => "A",
            Stage::B => "B",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TraceStep {
    /// 1-based over the whole run.
    pub step: usize,
    pub stage: Stage,
    pub pillar: usize,
    pub posterior_max: Option<f64>,
    pub pmr_stage: f64,
    pub pmr_final: f64,
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct InferenceTrace {
    pub steps: Vec<TraceStep>,
    /// Every appended pillar, in order.
    pub final_sequence: PillarSequence,
    /// Prefix of `final_sequence` with the highest PMR to the final target.
    pub best_sequence: PillarSequence,
    /// ITN estimate used as the Stage A target, when one ran.
    pub bridge: Option<FlowShape>,
}

pub const TRACE_HEADER: &str = "step,stage,pillar,posterior_max,pmr_stage,pmr_final";

impl InferenceTrace {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(TRACE_HEADER);
        out.push('\n');
        for s in &self.steps {
            let post = s.posterior_max.map(|p| format!("{p:.6}")).unwrap_or_default();
            let _ = writeln!(
                out,
                "{},{},{},{},{:.6},{:.6}",
                s.step,
                s.stage.name(),
                s.pillar,
                post,
                s.pmr_stage,
                s.pmr_final
            );
        }
        out
    }
}

/// Limits for one stage.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StageLimits {
    pub threshold: f64,
    pub budget: usize,
    pub patience: usize,
}

/// Appends predicted pillars to `seq` until the stage target is matched to
/// `limits.threshold`, the budget runs out, PMR to the stage target fails to
/// improve for `limits.patience` consecutive steps, or the sequence cap is hit.
#[allow(clippy::too_many_arguments)]
pub fn run_stage(
    seq: PillarSequence,
    stage_target: &FlowShape,
    final_target: &FlowShape,
    predictor: &dyn Predictor,
    library: &PillarLibrary,
    limits: StageLimits,
    stage: Stage,
    trace: &mut Vec<TraceStep>,
) -> Result<PillarSequence> {
    if limits.budget == 0 {
        return Err(Error::InvalidParameter("stage budget must be at least 1".into()));
    }
    let mut seq = seq;
    let mut current = library.render(&seq)?;
    let mut best: f64 = pmr(&current, stage_target)?;
    if best >= limits.threshold {
        return Ok(seq);
    }
    let mut stale = 0;
    for _ in 0..limits.budget {
        if seq.len() >= MAX_SEQUENCE_LEN {
            break;
        }
        let (k, posterior_max) = predictor.predict(&seq, &current, stage_target)?;
        seq.push(k);
        current = library.render(&seq)?;
        let pmr_stage: f64 = pmr(&current, stage_target)?;
        let pmr_final: f64 = pmr(&current, final_target)?;
        trace.push(TraceStep {
            step: trace.len() + 1,
            stage,
            pillar: k,
            posterior_max,
            pmr_stage,
            pmr_final,
        });
        if pmr_stage >= limits.threshold {
            break;
        }
        if pmr_stage > best {
            best = pmr_stage;
            stale = 0;
        } else {
            stale += 1;
            if stale >= limits.patience {
                break;
            }
        }
    }
    Ok(seq)
}

/// Trained networks available to the pipeline.
#[derive(Clone, Copy, Default)]
pub struct Models<'a, T> {
    pub apn: Option<&'a ApnModel<T>>,
    pub apnc: Option<&'a ApnCModel<T>>,
    pub itn: Option<&'a ItnModel<T>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct InferenceResult {
    /// Best-so-far sequence, pruned if requested.
    pub sequence: PillarSequence,
    pub pmr: f64,
    pub trace: InferenceTrace,
}

pub fn run_pipeline<T: Scalar>(
    target: &FlowShape,
    library: &PillarLibrary,
    models: Models<'_, T>,
    config: &InferenceConfig,
) -> Result<InferenceResult> {
    config.validate()?;
    let ch = library.channel();
    if target.dims() != (ch.height, ch.width) {
        return Err(Error::DimensionMismatch {
            expected: format!("{}x{} target", ch.height, ch.width),
            actual: format!("{}x{}", target.height(), target.width()),
        });
    }
    let oracle = OraclePredictor { library };
    let predictor: &dyn Predictor = match config.mode {
        Mode::Oracle | Mode::OracleItn => &oracle,
        Mode::ApnOnly | Mode::ApnItn => models.apn.ok_or(Error::MissingModel("APN"))?,
        Mode::ApnCOnly => models.apnc.ok_or(Error::MissingModel("APN-C"))?,
    };
    let mut steps = Vec::new();
    let mut seq = PillarSequence::new();
    let mut bridge = None;
    let mut used = 0;
    if config.mode.uses_itn() {
        let itn = models.itn.ok_or(Error::MissingModel("ITN"))?;
        let b = itn.predict_bridge(target)?;
        // nothing to bridge toward once the final target is already met
        let met: f64 = pmr(&library.render(&seq)?, target)?;
        if met < config.tau_b {
            let limits = StageLimits {
                threshold: config.tau_a,
                budget: config.max_steps_stage_a.min(config.max_steps_total),
                patience: config.no_improve_patience,
            };
            seq = run_stage(seq, &b, target, predictor, library, limits, Stage::A, &mut steps)?;
            used = seq.len();
        }
        bridge = Some(b);
    }
    if used < config.max_steps_total {
        let limits = StageLimits {
            threshold: config.tau_b,
            budget: config.max_steps_total - used,
            patience: config.no_improve_patience,
        };
        seq = run_stage(seq, target, target, predictor, library, limits, Stage::B, &mut steps)?;
    }

    // best-so-far over every prefix, earliest on ties
    let mut best_len = 0;
    let mut best_pmr: f64 = pmr(&library.initial_shape(), target)?;
    for s in &steps {
        if s.pmr_final > best_pmr {
            best_pmr = s.pmr_final;
            best_len = s.step;
        }
    }
    let best_sequence = seq.prefix(best_len);
    let sequence = if config.prune {
        prune_redundant(&best_sequence, target, library)?
    } else {
        best_sequence.clone()
    };
    let final_pmr = pmr(&library.render(&sequence)?, target)?;
    Ok(InferenceResult {
        sequence,
        pmr: final_pmr,
        trace: InferenceTrace {
            steps,
            final_sequence: seq,
            best_sequence,
            bridge,
        },
    })
}

/// One left-to-right pass dropping every pillar whose removal does not lower
/// PMR to `target`.
pub fn prune_redundant(seq: &PillarSequence, target: &FlowShape, library: &PillarLibrary) -> Result<PillarSequence> {
    let mut cur = seq.clone();
    let mut score: f64 = pmr(&library.render(&cur)?, target)?;
    let mut i = 0;
    while i < cur.len() {
        let cand = cur.without(i);
        let s: f64 = pmr(&library.render(&cand)?, target)?;
        if s >= score {
            cur = cand;
            score = s;
        } else {
            i += 1;
        }
    }
    Ok(cur)
}
