use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::Serialize;

use super::config::ExperimentConfig;
use super::train::{prepare_targets, TrainTarget};
use crate::distill::{distill_loss, DistillMode};
use crate::error::{Error, Result};
use crate::formats::encode_checkpoint;
use crate::model::{backward, forward, ModelParams, Weights};
use crate::objective::{match_predictions, seg_loss_weighted, Matching, TermWeights};
use crate::optim::Adam;
use crate::protocol::{build_protocol, class_ordering, ProtocolSpec};
use crate::synthdata::{generate_scene, make_palette, mix_seed, ClassId, SceneSample};

pub const FD_STEP: f64 = 1e-6;

/// The rounding noise of a central difference is about
/// `EPSILON * |f| / FD_STEP`. Gradients below this many times that noise
/// are compared against the noise level instead of their own magnitude.
pub const NOISE_MULTIPLE: f64 = 1e4;

/// Denominator floor of the relative error for a loss of magnitude `value`.
pub fn resolution_floor(value: f64) -> f64 {
    NOISE_MULTIPLE * f64::EPSILON * value.abs().max(1.0) / FD_STEP
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Component {
    Focal,
    Dice,
    MaskCe,
    Kd,
    Ad,
    Total,
}

impl Component {
    pub const ALL: [Component; 6] = [Self::Focal, Self::Dice, Self::MaskCe, Self::Kd, Self::Ad, Self::Total];

    pub fn name(self) -> &'static str {
        match self {
            Self::Focal => "focal",
            Self::Dice => "dice",
            Self::MaskCe => "mask_ce",
            Self::Kd => "kd",
            Self::Ad => "ad",
            Self::Total => "total",
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ComponentReport {
    pub component: Component,
    pub active: bool,
    pub probes: usize,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    /// Probes whose gradient magnitude fell below the resolution floor.
    pub below_floor: usize,
    /// Tensor, flat index, analytic and numeric value of the worst probe.
    pub worst: Option<(String, usize, f64, f64)>,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradcheckReport {
    pub components: Vec<ComponentReport>,
    /// Largest change of any frozen old-model entry after an optimiser step
    /// on the full loss.
    pub old_model_max_change: f64,
}

impl GradcheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.components
            .iter()
            .filter(|c| c.active)
            .map(|c| c.max_rel_error)
            .fold(0.0, f64::max)
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// A small frozen problem: current model, its predecessor, a batch and its
/// fixed targets and matchings.
pub struct Problem {
    pub current: ModelParams,
    pub old: ModelParams,
    pub batch: Vec<SceneSample>,
    pub targets: Vec<TrainTarget>,
    pub matchings: Vec<Matching>,
    pub lambda_mask: f64,
    pub lambda_d: f64,
    pub alpha: f64,
    pub gamma: f64,
    pub no_object_weight: f64,
    pub distill: DistillMode,
}

fn perturb(weights: &mut Weights, rng: &mut ChaCha8Rng, std: f64) {
    let normal = Normal::new(0.0, std).expect("finite std");
    for (_, w) in weights.named_mut() {
        w.mapv_inplace(|v| v + normal.sample(rng));
    }
}

impl Problem {
    /// Builds the problem from the first two steps of the configured protocol.
    pub fn build(cfg: &ExperimentConfig, batch_size: usize, seed: u64) -> Result<Self> {
        let data = &cfg.data;
        let palette = make_palette(data.palette_size, data.thing_classes, data.channels, data.seed)?;
        let tasks = build_protocol(&ProtocolSpec {
            ordering: class_ordering(data.palette_size, cfg.protocol.ordering_seed),
            initial: cfg.protocol.initial,
            increment: cfg.protocol.increment,
            overlap_mode: cfg.protocol.overlap_mode,
        })?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut old = ModelParams::init(cfg.model_config(), &tasks[0].new_classes, rng.gen());
        perturb(&mut old.weights, &mut rng, 0.05);
        let new_classes: Vec<ClassId> = tasks.get(1).map_or_else(Vec::new, |t| t.new_classes.clone());
        let mut current = if new_classes.is_empty() {
            old.clone()
        } else {
            old.expand_classifier(&new_classes, rng.gen())?
        };
        perturb(&mut current.weights, &mut rng, 0.05);

        let all: Vec<ClassId> = current.classes.clone();
        let new_set: BTreeSet<ClassId> = new_classes.iter().copied().collect();
        let mut batch = Vec::with_capacity(batch_size);
        while batch.len() < batch_size {
            let k = rng.gen_range(1..=2usize.min(all.len()));
            let present: BTreeSet<ClassId> = rand::seq::SliceRandom::choose_multiple(all.as_slice(), &mut rng, k)
                .copied()
                .collect();
            if let Ok(mut s) = generate_scene(mix_seed(rng.gen()), &palette, &present, data.geometry()) {
                if !new_set.is_empty() {
                    s.segments.retain(|g| new_set.contains(&g.class_id));
                }
                batch.push(s);
            }
        }
        let distill = match cfg.losses.distill_mode {
            DistillMode::None => DistillMode::Ad,
            m => m,
        };
        let targets = prepare_targets(&batch, Some(&old), distill, cfg.losses.pseudo_labels)?;
        let matchings = batch
            .iter()
            .zip(&targets)
            .map(|(s, t)| {
                let (preds, _) = forward(&current, &s.image)?;
                match_predictions(&preds, &t.labels, &current.classes)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            current,
            old,
            batch,
            targets,
            matchings,
            lambda_mask: cfg.losses.lambda_mask,
            lambda_d: cfg.losses.lambda_d_for(tasks.len()),
            alpha: cfg.losses.alpha,
            gamma: cfg.losses.gamma,
            no_object_weight: cfg.losses.no_object_weight,
            distill,
        })
    }

    fn seg_terms(&self, component: Component) -> TermWeights {
        let (f, d, c) = match component {
            Component::Focal => (1.0, 0.0, 0.0),
            Component::Dice => (0.0, 1.0, 0.0),
            Component::MaskCe => (0.0, 0.0, 1.0),
            Component::Kd | Component::Ad => (0.0, 0.0, 0.0),
            Component::Total => (1.0, self.lambda_mask, self.lambda_mask),
        };
        TermWeights {
            focal: f,
            dice: d,
            mask_ce: c,
        }
    }

    fn distill_term(&self, component: Component) -> Option<(DistillMode, f64)> {
        match component {
            Component::Kd => Some((DistillMode::Kd, 1.0)),
            Component::Ad => Some((DistillMode::Ad, 1.0)),
            Component::Total => Some((self.distill, self.lambda_d)),
            _ => None,
        }
    }

    /// Scalar value of `component` summed over the batch, with its gradient
    /// when `with_grad` is set.
    pub fn evaluate(&self, params: &ModelParams, component: Component, with_grad: bool) -> Result<(f64, Option<Weights>)> {
        let hyper = crate::objective::SegHyper {
            alpha: self.alpha,
            gamma: self.gamma,
            lambda_mask: self.lambda_mask,
            no_object_weight: self.no_object_weight,
        };
        let terms = self.seg_terms(component);
        let mut value = 0.0;
        let mut grads = with_grad.then(|| params.weights.zeros_like());
        for ((sample, target), matching) in self.batch.iter().zip(&self.targets).zip(&self.matchings) {
            let (preds, cache) = forward(params, &sample.image)?;
            let seg = seg_loss_weighted(&preds, &target.labels, matching, &params.classes, &hyper, terms)?;
            value += terms.scalar(&seg.breakdown);
            let mut d_probs = seg.d_probs;
            if let (Some((mode, weight)), Some(old)) = (self.distill_term(component), &target.old_probs) {
                if let Some(dl) = distill_loss(mode, &preds.class_probs, old)? {
                    value += weight * dl.value;
                    d_probs.scaled_add(weight, &dl.d_probs);
                }
            }
            if let Some(g) = grads.as_mut() {
                let d_logits = preds.mask_logit_grad(&seg.d_masks);
                g.add_assign(&backward(params, &cache, &d_probs, &d_logits)?);
            }
        }
        Ok((value, grads))
    }

    fn check(&self, component: Component, probes: usize, rng: &mut ChaCha8Rng) -> Result<ComponentReport> {
        let (value, grads) = self.evaluate(&self.current, component, true)?;
        let floor = resolution_floor(value);
        let grads = grads.expect("requested");
        let names = Weights::NAMES;
        let mut report = ComponentReport {
            component,
            active: true,
            probes,
            max_rel_error: 0.0,
            max_abs_error: 0.0,
            below_floor: 0,
            worst: None,
        };
        let mut params = self.current.clone();
        for _ in 0..probes {
            let t = rng.gen_range(0..names.len());
            let len = grads.named()[t].1.len();
            let idx = rng.gen_range(0..len);
            let original = params.weights.named()[t].1.as_slice().expect("standard layout")[idx];
            let mut eval_at = |v: f64| -> Result<f64> {
                params.weights.named_mut()[t].1.as_slice_mut().expect("standard layout")[idx] = v;
                Ok(self.evaluate(&params, component, false)?.0)
            };
            let plus = eval_at(original + FD_STEP)?;
            let minus = eval_at(original - FD_STEP)?;
            eval_at(original)?;
            let numeric = (plus - minus) / (2.0 * FD_STEP);
            let analytic = grads.named()[t].1.as_slice().expect("standard layout")[idx];
            let rel = relative_error(analytic, numeric, floor);
            if analytic.abs().max(numeric.abs()) < floor {
                report.below_floor += 1;
            }
            report.max_abs_error = report.max_abs_error.max((analytic - numeric).abs());
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(rel);
                report.worst = Some((names[t].to_string(), idx, analytic, numeric));
            }
        }
        Ok(report)
    }
}

/// Finite-difference check of every loss component at `probes` random
/// parameter entries each, plus a check that one optimiser step on the
/// full loss leaves the old model untouched.
pub fn gradcheck(cfg: &ExperimentConfig, probes: usize, seed: u64) -> Result<GradcheckReport> {
    if probes == 0 {
        return Err(Error::Config("probes must be positive".into()));
    }
    let problem = Problem::build(cfg, 2, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed));
    let mut components = Vec::new();
    for component in Component::ALL {
        let distill_off = problem.lambda_d == 0.0 || problem.targets.iter().all(|t| t.old_probs.is_none());
        if matches!(component, Component::Kd | Component::Ad) && distill_off {
            components.push(ComponentReport {
                component,
                active: false,
                probes: 0,
                max_rel_error: 0.0,
                max_abs_error: 0.0,
                below_floor: 0,
                worst: None,
            });
            continue;
        }
        components.push(problem.check(component, probes, &mut rng)?);
    }

    let before = encode_checkpoint(&problem.old)?;
    let old_snapshot = problem.old.clone();
    let mut current = problem.current.clone();
    let (_, grads) = problem.evaluate(&current, Component::Total, true)?;
    Adam::new(&current.weights, 1e-3).update(&mut current.weights, &grads.expect("requested"));
    let after = encode_checkpoint(&problem.old)?;
    let old_model_max_change = if before == after {
        0.0
    } else {
        old_snapshot
            .weights
            .named()
            .iter()
            .zip(problem.old.weights.named())
            .flat_map(|((_, a), (_, b))| a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()).collect::<Vec<_>>())
            .fold(0.0, f64::max)
    };
    Ok(GradcheckReport {
        components,
        old_model_max_change,
    })
}
