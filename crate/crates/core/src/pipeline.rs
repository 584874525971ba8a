//! Joint training and inference: motion fields, anatomy propagation and
//! pathology segmentation under one weighted objective.
//!
//! The objective for a case is
//! `L_myops + l1 L_anatomy + l2 L_cons + l3 L_motion + l4 L_smooth`, where the
//! last three terms are summed over the selected non-reference frames. It is
//! minimized block by block: the fields of every case (anatomy and pathology
//! fixed), then the anatomy weights, then the pathology weights. A block
//! update that raises the summed objective is undone.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::anatomy::{
    consistency_field_grad, consistency_value, eval_sum, fit, predict_anatomy, AnatomyData, AnatomyParams,
    AnatomyTrainConfig, AnatomyWeights, ConsistencyTarget,
};
use crate::error::{Error, Result};
use crate::grid::{CineSequence, DisplacementField, LabelMap};
use crate::loss::{ce_loss, dice_loss};
use crate::motion::{data_term_gradient_into, estimate_frames, mse_loss, smoothness_gradient_into, smoothness_in, MotionConfig};
use crate::optim::descend;
use crate::pathology::{
    assemble_features, fit_pathology, myops_loss, predict_pathology, select_frames, AggregationMode, FeatureSelection,
    FrameFeatureStack, FrameProportion, PathologyExample, PathologyParams, PathologyTrainConfig, PATHOLOGY_CLASSES,
};
use crate::phantom::SyntheticCase;
use crate::warp_image;

pub const PARAMS_SCHEMA: &str = "params-v1";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Lambdas {
    /// Supervised anatomy loss on the reference frame.
    pub lambda1: f64,
    /// Anatomy consistency across frames.
    pub lambda2: f64,
    /// Photometric motion loss.
    pub lambda3: f64,
    /// Field smoothness.
    pub lambda4: f64,
}

impl Default for Lambdas {
    fn default() -> Self {
        Lambdas {
            lambda1: 5.0,
            lambda2: 2.0,
            lambda3: 1.0,
            lambda4: 100.0,
        }
    }
}

impl Lambdas {
    pub fn zero() -> Self {
        Lambdas {
            lambda1: 0.0,
            lambda2: 0.0,
            lambda3: 0.0,
            lambda4: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
            ("lambda3", self.lambda3),
            ("lambda4", self.lambda4),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::InvalidConfig(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct JointConfig {
    pub lambdas: Lambdas,
    pub proportion: FrameProportion,
    pub features: FeatureSelection,
    pub aggregation: AggregationMode,
    pub consistency_target: ConsistencyTarget,
    /// Also apply the consistency term while refining the fields. Off by
    /// default: with it on, anatomy maps that lag the motion drag the fields
    /// toward zero displacement at the wall and the motion features degrade.
    pub field_consistency: bool,
    /// Solver for the initial fields. Its smoothness units also apply to
    /// `lambda4`, and its step size to the field updates.
    pub motion: MotionConfig,
    pub cycles: usize,
    pub phi_iters: usize,
    pub anatomy_iters: usize,
    pub pathology_iters: usize,
    pub rel_tol: f64,
}

impl Default for JointConfig {
    fn default() -> Self {
        JointConfig {
            lambdas: Lambdas::default(),
            proportion: FrameProportion::default(),
            features: FeatureSelection::default(),
            aggregation: AggregationMode::default(),
            consistency_target: ConsistencyTarget::default(),
            field_consistency: false,
            motion: MotionConfig::default(),
            cycles: 3,
            phi_iters: 40,
            anatomy_iters: 300,
            pathology_iters: 300,
            rel_tol: 1e-9,
        }
    }
}

impl JointConfig {
    pub fn validate(&self) -> Result<()> {
        self.lambdas.validate()?;
        self.features.validate()?;
        self.motion.validate()?;
        if self.cycles == 0 {
            return Err(Error::InvalidConfig("cycles must be >= 1".into()));
        }
        if !(self.rel_tol.is_finite() && self.rel_tol >= 0.0) {
            return Err(Error::InvalidConfig(format!("rel_tol must be finite and >= 0, got {}", self.rel_tol)));
        }
        Ok(())
    }
}

/// A cine sequence with gold labels at its reference frame.
#[derive(Debug, Clone)]
pub struct TrainingCase {
    pub name: String,
    pub sequence: CineSequence,
    pub anatomy: LabelMap,
    pub pathology: LabelMap,
}

impl TrainingCase {
    pub fn new(name: impl Into<String>, sequence: CineSequence, anatomy: LabelMap, pathology: LabelMap) -> Result<Self> {
        let r = sequence.reference();
        crate::grid::ensure_same_shape("training case (anatomy)", &anatomy, r)?;
        crate::grid::ensure_same_shape("training case (pathology)", &pathology, r)?;
        if pathology.classes() != PATHOLOGY_CLASSES {
            return Err(Error::dims("training case pathology classes", PATHOLOGY_CLASSES, pathology.classes()));
        }
        Ok(TrainingCase {
            name: name.into(),
            sequence,
            anatomy,
            pathology,
        })
    }

    pub fn from_synthetic(name: impl Into<String>, case: &SyntheticCase) -> Result<Self> {
        Self::new(name, case.sequence.clone(), case.anatomy.clone(), case.pathology.clone())
    }
}

/// Everything needed to segment a new sequence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub schema: String,
    pub features: FeatureSelection,
    pub aggregation: AggregationMode,
    pub anatomy: AnatomyParams,
    pub pathology: PathologyParams,
}

impl ModelParams {
    pub fn initial(anatomy_classes: usize, features: FeatureSelection, aggregation: AggregationMode) -> Self {
        ModelParams {
            schema: PARAMS_SCHEMA.into(),
            features,
            aggregation,
            anatomy: AnatomyParams::zeros(anatomy_classes),
            pathology: PathologyParams::initial(features.channels(anatomy_classes), PATHOLOGY_CLASSES),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema != PARAMS_SCHEMA {
            return Err(Error::Schema {
                expected: PARAMS_SCHEMA.into(),
                found: self.schema.clone(),
            });
        }
        self.features.validate()?;
        self.anatomy.validate()?;
        self.pathology.validate()?;
        let channels = self.features.channels(self.anatomy.classes);
        if self.pathology.channels != channels {
            return Err(Error::dims("model params (pathology channels)", channels, self.pathology.channels));
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        let text = std::fs::read_to_string(path)?;
        let value: serde_json::Value = serde_json::from_str(&text)?;
        let schema = value.get("schema").and_then(|s| s.as_str()).unwrap_or("<none>");
        if schema != PARAMS_SCHEMA {
            return Err(Error::Schema {
                expected: PARAMS_SCHEMA.into(),
                found: schema.into(),
            });
        }
        let params: ModelParams = serde_json::from_value(value)?;
        params.validate()?;
        Ok(params)
    }
}

/// Unweighted terms of the joint objective and their weighted sum.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub myops: f64,
    pub anatomy: f64,
    pub consistency: f64,
    pub motion: f64,
    pub smoothness: f64,
    pub total: f64,
}

impl LossBreakdown {
    fn weighted(mut self, l: &Lambdas) -> Self {
        self.total = self.myops
            + l.lambda1 * self.anatomy
            + l.lambda2 * self.consistency
            + l.lambda3 * self.motion
            + l.lambda4 * self.smoothness;
        self
    }

    fn add(&mut self, o: &LossBreakdown) {
        self.myops += o.myops;
        self.anatomy += o.anatomy;
        self.consistency += o.consistency;
        self.motion += o.motion;
        self.smoothness += o.smoothness;
        self.total += o.total;
    }
}

/// The selected frames of a sequence as a sequence of their own, reference
/// first.
fn selected(seq: &CineSequence, proportion: FrameProportion) -> Result<(Vec<usize>, CineSequence)> {
    let idx = select_frames(seq.len(), seq.reference_index(), proportion);
    let frames = idx.iter().map(|&i| seq.frame(i).clone()).collect();
    Ok((idx, CineSequence::new(frames, 0)?))
}

fn check_fields(sub: &CineSequence, fields: &[DisplacementField]) -> Result<()> {
    if fields.len() != sub.len() {
        return Err(Error::dims("joint fields (one per selected frame)", sub.len(), fields.len()));
    }
    for f in fields {
        crate::grid::ensure_same_shape("joint field", f, sub.reference())?;
    }
    Ok(())
}

fn anatomy_maps(params: &AnatomyParams, sub: &CineSequence) -> Result<Vec<LabelMap>> {
    sub.frames().par_iter().map(|f| predict_anatomy(params, f)).collect()
}

fn feature_stacks(
    features: FeatureSelection,
    sub: &CineSequence,
    fields: &[DisplacementField],
    maps: &[LabelMap],
) -> Result<Vec<FrameFeatureStack>> {
    (0..sub.len())
        .into_par_iter()
        .map(|i| assemble_features(&fields[i], &maps[i], sub.frame(i), features))
        .collect()
}

fn case_loss(
    params: &ModelParams,
    case: &TrainingCase,
    sub: &CineSequence,
    fields: &[DisplacementField],
    cfg: &JointConfig,
) -> Result<LossBreakdown> {
    let maps = anatomy_maps(&params.anatomy, sub)?;
    let stacks = feature_stacks(params.features, sub, fields, &maps)?;
    let pred = predict_pathology(&params.pathology, &stacks, params.aggregation)?;
    let mut b = LossBreakdown {
        myops: myops_loss(&pred, &case.pathology)?,
        anatomy: dice_loss(&maps[0], &case.anatomy)? + ce_loss(&maps[0], &case.anatomy)?,
        ..LossBreakdown::default()
    };
    let target = match cfg.consistency_target {
        ConsistencyTarget::Predicted => maps[0].data(),
        ConsistencyTarget::Gold => case.anatomy.data(),
    };
    let reference = sub.reference();
    for i in 1..sub.len() {
        b.consistency += consistency_value(&maps[i], target, &fields[i])?;
        b.motion += mse_loss(&warp_image(sub.frame(i), &fields[i])?, reference)?;
        b.smoothness += smoothness_in(&fields[i], cfg.motion.smooth_units);
    }
    Ok(b.weighted(&cfg.lambdas))
}

/// The joint objective of one case. `fields` holds one field per selected
/// frame, reference first (see [`select_frames`]).
pub fn total_loss(
    params: &ModelParams,
    case: &TrainingCase,
    fields: &[DisplacementField],
    cfg: &JointConfig,
) -> Result<LossBreakdown> {
    cfg.validate()?;
    params.validate()?;
    let (_, sub) = selected(&case.sequence, cfg.proportion)?;
    check_fields(&sub, fields)?;
    case_loss(params, case, &sub, fields, cfg)
}

/// Minimizes `l3 mse + l4 smooth` (plus `l2 cons` when
/// `field_consistency` is set) over each non-reference field with the
/// anatomy maps held fixed.
fn refine_fields(
    sub: &CineSequence,
    fields: &mut [DisplacementField],
    maps: &[LabelMap],
    target: &[f64],
    cfg: &JointConfig,
) -> Result<()> {
    let mut l = cfg.lambdas;
    if !cfg.field_consistency {
        l.lambda2 = 0.0;
    }
    if (l.lambda2 == 0.0 && l.lambda3 == 0.0 && l.lambda4 == 0.0) || cfg.phi_iters == 0 {
        return Ok(());
    }
    let reference = sub.reference();
    let units = cfg.motion.smooth_units;
    fields
        .par_iter_mut()
        .enumerate()
        .skip(1)
        .try_for_each(|(i, phi)| {
            let frame = sub.frame(i);
            let mut failure = None;
            let mut eval = |p: &DisplacementField, want_grad: bool| -> (f64, Option<DisplacementField>) {
                let mut g = DisplacementField::zeros(p.width(), p.height());
                let mut v = 0.0;
                if l.lambda3 != 0.0 {
                    v += l.lambda3 * data_term_gradient_into(p, frame, reference, l.lambda3, &mut g);
                }
                if l.lambda4 != 0.0 {
                    v += l.lambda4 * smoothness_in(p, units);
                    if want_grad {
                        smoothness_gradient_into(p, units, l.lambda4, &mut g);
                    }
                }
                if l.lambda2 != 0.0 {
                    let c = if want_grad {
                        consistency_field_grad(&maps[i], target, p, l.lambda2, &mut g)
                    } else {
                        consistency_value(&maps[i], target, p)
                    };
                    match c {
                        Ok(c) => v += l.lambda2 * c,
                        Err(e) => {
                            failure.get_or_insert(e);
                            v = f64::NAN;
                        }
                    }
                }
                (v, want_grad.then_some(g))
            };
            let first_step = cfg.motion.step_size * phi.len() as f64;
            let res = descend(phi, first_step, cfg.phi_iters, cfg.rel_tol, &mut eval);
            match (failure, res) {
                (Some(e), _) => Err(e),
                (None, Err(e)) => Err(e.with_context(format!("field refinement, selected frame {i}"))),
                (None, Ok(_)) => Ok(()),
            }
        })
}

fn initial_fields(seq: &CineSequence, indices: &[usize], cfg: &MotionConfig) -> Result<Vec<DisplacementField>> {
    Ok(estimate_frames(seq, indices, cfg)?.into_iter().map(|r| r.phi).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Initial,
    Fields,
    Anatomy,
    Pathology,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhaseRecord {
    pub cycle: usize,
    pub phase: Phase,
    /// Summed objective after the phase (after any revert).
    pub loss: LossBreakdown,
    pub accepted: bool,
}

#[derive(Debug, Clone)]
pub struct JointTraining {
    pub params: ModelParams,
    /// Per case, one field per selected frame.
    pub fields: Vec<Vec<DisplacementField>>,
    pub trace: Vec<PhaseRecord>,
}

struct CaseState<'a> {
    case: &'a TrainingCase,
    sub: CineSequence,
    fields: Vec<DisplacementField>,
}

fn summed_loss(params: &ModelParams, states: &[CaseState], cfg: &JointConfig) -> Result<LossBreakdown> {
    let parts: Vec<LossBreakdown> = states
        .par_iter()
        .map(|s| case_loss(params, s.case, &s.sub, &s.fields, cfg).map_err(|e| e.with_context(s.case.name.clone())))
        .collect::<Result<_>>()?;
    let mut total = LossBreakdown::default();
    for p in &parts {
        total.add(p);
    }
    Ok(total)
}

/// Block-coordinate training over `cases`.
pub fn train_joint(cases: &[TrainingCase], cfg: &JointConfig) -> Result<JointTraining> {
    cfg.validate()?;
    let first = cases
        .first()
        .ok_or_else(|| Error::InvalidInput("joint training needs at least one case".into()))?;
    let classes = first.anatomy.classes();
    for c in cases {
        if c.anatomy.classes() != classes {
            return Err(Error::dims("training case anatomy classes", classes, c.anatomy.classes()));
        }
    }

    let mut states = Vec::with_capacity(cases.len());
    for case in cases {
        let (idx, sub) = selected(&case.sequence, cfg.proportion)?;
        let fields = initial_fields(&case.sequence, &idx, &cfg.motion).map_err(|e| e.with_context(case.name.clone()))?;
        states.push(CaseState { case, sub, fields });
    }

    let mut params = ModelParams::initial(classes, cfg.features, cfg.aggregation);
    let mut current = summed_loss(&params, &states, cfg)?;
    let mut trace = vec![PhaseRecord {
        cycle: 0,
        phase: Phase::Initial,
        loss: current,
        accepted: true,
    }];

    let anatomy_cfg = AnatomyTrainConfig {
        weights: AnatomyWeights {
            lambda1: cfg.lambdas.lambda1,
            lambda2: cfg.lambdas.lambda2,
            target: cfg.consistency_target,
        },
        max_iters: cfg.anatomy_iters,
        rel_tol: cfg.rel_tol,
        step_size: 1.0,
    };
    let pathology_cfg = PathologyTrainConfig {
        max_iters: cfg.pathology_iters,
        rel_tol: cfg.rel_tol,
        step_size: 1.0,
        mode: cfg.aggregation,
    };

    for cycle in 1..=cfg.cycles {
        for phase in [Phase::Fields, Phase::Anatomy, Phase::Pathology] {
            let saved_params = params.clone();
            let saved_fields: Vec<Vec<DisplacementField>> = states.iter().map(|s| s.fields.clone()).collect();
            match phase {
                Phase::Fields => {
                    for s in states.iter_mut() {
                        let maps = anatomy_maps(&params.anatomy, &s.sub)?;
                        let target: &[f64] = match cfg.consistency_target {
                            ConsistencyTarget::Predicted => maps[0].data(),
                            ConsistencyTarget::Gold => s.case.anatomy.data(),
                        };
                        refine_fields(&s.sub, &mut s.fields, &maps, target, cfg)
                            .map_err(|e| e.with_context(s.case.name.clone()))?;
                    }
                }
                Phase::Anatomy => {
                    if cfg.lambdas.lambda1 != 0.0 || cfg.lambdas.lambda2 != 0.0 {
                        let data: Vec<AnatomyData> = states
                            .iter()
                            .map(|s| AnatomyData::new(&s.sub, &s.fields, &s.case.anatomy))
                            .collect::<Result<_>>()?;
                        fit(&data, &mut params.anatomy, &anatomy_cfg)?;
                    }
                }
                Phase::Pathology => {
                    let examples: Vec<PathologyExample> = states
                        .iter()
                        .map(|s| {
                            let maps = anatomy_maps(&params.anatomy, &s.sub)?;
                            let stacks = feature_stacks(params.features, &s.sub, &s.fields, &maps)?;
                            PathologyExample::new(stacks, s.case.pathology.clone())
                        })
                        .collect::<Result<_>>()?;
                    fit_pathology(&mut params.pathology, &examples, &pathology_cfg)?;
                }
                Phase::Initial => unreachable!(),
            }
            let next = summed_loss(&params, &states, cfg)?;
            let accepted = next.total <= current.total;
            if accepted {
                current = next;
            } else {
                params = saved_params;
                for (s, f) in states.iter_mut().zip(saved_fields) {
                    s.fields = f;
                }
            }
            trace.push(PhaseRecord {
                cycle,
                phase,
                loss: current,
                accepted,
            });
        }
    }

    Ok(JointTraining {
        params,
        fields: states.into_iter().map(|s| s.fields).collect(),
        trace,
    })
}

/// Anatomy loss summed over cases with the given fields, as minimized by the
/// anatomy phase. Exposed for checking the phase objective.
pub fn anatomy_phase_loss(
    params: &AnatomyParams,
    cases: &[TrainingCase],
    fields: &[Vec<DisplacementField>],
    cfg: &JointConfig,
) -> Result<f64> {
    let weights = AnatomyWeights {
        lambda1: cfg.lambdas.lambda1,
        lambda2: cfg.lambdas.lambda2,
        target: cfg.consistency_target,
    };
    let data: Vec<AnatomyData> = cases
        .iter()
        .zip(fields)
        .map(|(c, f)| {
            let (_, sub) = selected(&c.sequence, cfg.proportion)?;
            AnatomyData::new(&sub, f, &c.anatomy)
        })
        .collect::<Result<_>>()?;
    Ok(eval_sum(&data, &params.weights, params.classes, &weights, false)?.0)
}

/// Result of segmenting one sequence, all in the reference frame's space.
#[derive(Debug, Clone)]
pub struct Segmentation {
    /// Indices of the frames used, reference first.
    pub frames: Vec<usize>,
    pub fields: Vec<DisplacementField>,
    pub anatomy: LabelMap,
    pub pathology: LabelMap,
}

/// Estimates and refines the fields of the selected frames, then predicts
/// anatomy and pathology at the reference frame. Refinement always uses the
/// predicted reference anatomy as the consistency target.
pub fn segment_case(params: &ModelParams, seq: &CineSequence, cfg: &JointConfig) -> Result<Segmentation> {
    cfg.validate()?;
    params.validate()?;
    let (frames, sub) = selected(seq, cfg.proportion)?;
    let mut fields = initial_fields(seq, &frames, &cfg.motion)?;
    let maps = anatomy_maps(&params.anatomy, &sub)?;
    refine_fields(&sub, &mut fields, &maps, maps[0].data(), cfg)?;
    let stacks = feature_stacks(params.features, &sub, &fields, &maps)?;
    let pathology = predict_pathology(&params.pathology, &stacks, params.aggregation)?;
    Ok(Segmentation {
        frames,
        fields,
        anatomy: maps[0].clone(),
        pathology,
    })
}

/// Dice of one class between hard label vectors (1 when both are empty).
pub fn class_dice(pred: &[usize], gold: &[usize], class: usize) -> f64 {
    let (mut tp, mut np, mut ng) = (0usize, 0usize, 0usize);
    for (p, g) in pred.iter().zip(gold) {
        let (a, b) = (*p == class, *g == class);
        tp += usize::from(a && b);
        np += usize::from(a);
        ng += usize::from(b);
    }
    if np + ng == 0 {
        1.0
    } else {
        2.0 * tp as f64 / (np + ng) as f64
    }
}

/// Mean held-out Dice of one trained model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeldOutDice {
    pub edema: f64,
    pub scar: f64,
}

impl HeldOutDice {
    pub fn mean(&self) -> f64 {
        0.5 * (self.edema + self.scar)
    }
}

/// Segments every case and averages the edema and scar Dice.
pub fn evaluate_cases(params: &ModelParams, cases: &[TrainingCase], cfg: &JointConfig) -> Result<HeldOutDice> {
    if cases.is_empty() {
        return Err(Error::InvalidInput("no evaluation cases".into()));
    }
    let (mut edema, mut scar) = (0.0, 0.0);
    for c in cases {
        let s = segment_case(params, &c.sequence, cfg).map_err(|e| e.with_context(c.name.clone()))?;
        let (pred, gold) = (s.pathology.argmax(), c.pathology.argmax());
        edema += class_dice(&pred, &gold, crate::phantom::EDEMA);
        scar += class_dice(&pred, &gold, crate::phantom::SCAR);
    }
    let n = cases.len() as f64;
    Ok(HeldOutDice {
        edema: edema / n,
        scar: scar / n,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub proportion: FrameProportion,
    /// Frames used per case (of the first training case).
    pub frames: usize,
    pub dice: HeldOutDice,
}

/// Trains one model per frame proportion and scores each on `test`.
pub fn sweep_frames(
    train: &[TrainingCase],
    test: &[TrainingCase],
    proportions: &[FrameProportion],
    cfg: &JointConfig,
) -> Result<Vec<SweepRow>> {
    let first = train
        .first()
        .ok_or_else(|| Error::InvalidInput("frame sweep needs training cases".into()))?;
    proportions
        .iter()
        .map(|&proportion| {
            let c = JointConfig { proportion, ..*cfg };
            let model = train_joint(train, &c).map_err(|e| e.with_context(format!("proportion {proportion}")))?;
            Ok(SweepRow {
                proportion,
                frames: select_frames(first.sequence.len(), first.sequence.reference_index(), proportion).len(),
                dice: evaluate_cases(&model.params, test, &c)?,
            })
        })
        .collect()
}
