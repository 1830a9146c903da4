use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::config::ExperimentConfig;
use super::plot::{render_curves, RunCurve};
use crate::distill::{distill_loss, generate_pseudo_labels, merge_labels, DistillMode, OldModelOutput};
use crate::error::{Error, Result};
use crate::formats::encode_checkpoint;
use crate::metrics::{aggregate_continual, accumulate_pq, ContinualSummary, IouStats, Metric, PqStats, StepReport};
use crate::model::{backward, forward, infer_panoptic, infer_semantic, predict, ModelParams, Weights};
use crate::objective::{match_predictions, seg_loss, LabelSet, LossBreakdown, SegHyper};
use crate::optim::Adam;
use crate::protocol::{build_protocol, class_ordering, slice_dataset, ProtocolSpec, TaskSpec};
use crate::synthdata::{build_dataset, filter_annotations, make_palette, mix_seed, to_semantic, ClassDef, ClassId, SceneSample};

/// What one training image contributes at a step: its label set and, when
/// distillation is on, the frozen old-model class probabilities.
#[derive(Debug, Clone)]
pub struct TrainTarget {
    pub labels: LabelSet,
    pub old_probs: Option<Array2<f64>>,
}

#[derive(Debug, Clone, Copy)]
pub struct LossSettings {
    pub hyper: SegHyper,
    pub distill: DistillMode,
    pub lambda_d: f64,
}

/// Loss and parameter gradient for one image.
pub fn sample_gradient(
    params: &ModelParams,
    sample: &SceneSample,
    target: &TrainTarget,
    settings: &LossSettings,
) -> Result<(LossBreakdown, Weights)> {
    let (preds, cache) = forward(params, &sample.image)?;
    let matching = match_predictions(&preds, &target.labels, &params.classes)?;
    let seg = seg_loss(&preds, &target.labels, &matching, &params.classes, &settings.hyper)?;
    let mut breakdown = seg.breakdown;
    let mut d_probs = seg.d_probs;
    if let Some(old) = &target.old_probs {
        if let Some(dl) = distill_loss(settings.distill, &preds.class_probs, old)? {
            breakdown.adaptive_distill = dl.value;
            d_probs.scaled_add(settings.lambda_d, &dl.d_probs);
        }
    }
    breakdown.recompute_total(settings.hyper.lambda_mask, settings.lambda_d);
    let d_logits = preds.mask_logit_grad(&seg.d_masks);
    let grads = backward(params, &cache, &d_probs, &d_logits)?;
    Ok((breakdown, grads))
}

/// Builds the per-image targets of a step. Old-model outputs and
/// pseudo-labels are computed once here and reused for every iteration.
pub fn prepare_targets(
    samples: &[SceneSample],
    old: Option<&ModelParams>,
    distill: DistillMode,
    pseudo_labels: bool,
) -> Result<Vec<TrainTarget>> {
    samples
        .iter()
        .map(|s| {
            let Some(old) = old else {
                return Ok(TrainTarget {
                    labels: LabelSet::from_ground_truth(&s.segments)?,
                    old_probs: None,
                });
            };
            let out = OldModelOutput::from(predict(old, &s.image)?);
            let pseudo = if pseudo_labels {
                generate_pseudo_labels(&out, &s.segments, &old.classes)?
            } else {
                Vec::new()
            };
            Ok(TrainTarget {
                labels: merge_labels(&s.segments, &pseudo)?,
                old_probs: (distill != DistillMode::None).then_some(out.class_probs),
            })
        })
        .collect()
}

pub fn evaluate(
    params: &ModelParams,
    test: &[SceneSample],
    step: usize,
    seen: &[ClassId],
    min_confidence: f64,
    min_area: usize,
) -> Result<StepReport> {
    let seen_set: BTreeSet<ClassId> = seen.iter().copied().collect();
    let mut pq = PqStats::default();
    let mut iou = IouStats::default();
    for sample in test {
        let gt = filter_annotations(sample, &seen_set);
        let preds = predict(params, &sample.image)?;
        let segments = infer_panoptic(&preds, &params.classes, min_confidence, min_area);
        accumulate_pq(&segments, &gt.segments, &mut pq)?;
        let semantic = infer_semantic(&preds, &params.classes);
        let truth = to_semantic(&gt.segments, sample.image.height, sample.image.width)?;
        iou.accumulate(&semantic, &truth, &seen_set)?;
    }
    Ok(StepReport::from_stats(step, seen, &pq, &iou))
}

#[derive(Debug, Clone, Serialize)]
pub struct StepLog {
    pub step: usize,
    pub iterations: usize,
    pub train_samples: usize,
    pub pseudo_labels: usize,
    /// Mean total loss over the final tenth of the step's iterations.
    pub final_loss: f64,
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub palette: Vec<ClassDef>,
    pub tasks: Vec<TaskSpec>,
    pub reports: Vec<StepReport>,
    pub summary: ContinualSummary,
    pub logs: Vec<StepLog>,
    pub params: ModelParams,
    /// Encoded checkpoint after every step.
    pub checkpoints: Vec<Vec<u8>>,
}

#[derive(Serialize)]
struct Diagnostic<'a> {
    step: usize,
    iteration: usize,
    sample_seeds: Vec<u64>,
    breakdown: &'a LossBreakdown,
}

fn dump_diagnostic(dir: Option<&Path>, diag: &Diagnostic) -> Error {
    if let Some(dir) = dir {
        if let Ok(text) = serde_json::to_string_pretty(diag) {
            let _ = fs::create_dir_all(dir).and_then(|_| fs::write(dir.join("diagnostic.json"), text));
        }
    }
    Error::Numeric {
        layer: format!("loss at step {} iteration {}", diag.step, diag.iteration),
    }
}

/// Trains every step of the protocol and evaluates after each one.
/// `diag_dir` receives a diagnostic dump if the loss turns non-finite.
pub fn train_protocol(cfg: &ExperimentConfig, diag_dir: Option<&Path>) -> Result<RunResult> {
    cfg.validate()?;
    let data = &cfg.data;
    let palette = make_palette(data.palette_size, data.thing_classes, data.channels, data.seed)?;
    let train = build_dataset(&palette, data.geometry(), data.train_per_class, mix_seed(data.seed))?;
    let test = build_dataset(&palette, data.geometry(), data.test_per_class, data.test_seed)?;
    let tasks = build_protocol(&ProtocolSpec {
        ordering: class_ordering(data.palette_size, cfg.protocol.ordering_seed),
        initial: cfg.protocol.initial,
        increment: cfg.protocol.increment,
        overlap_mode: cfg.protocol.overlap_mode,
    })?;
    let settings = LossSettings {
        hyper: cfg.losses.seg_hyper(),
        distill: cfg.losses.distill_mode,
        lambda_d: cfg.losses.lambda_d_for(tasks.len()),
    };
    let opt = &cfg.optimization;

    let mut params = ModelParams::init(cfg.model_config(), &tasks[0].new_classes, opt.init_seed);
    let mut reports = Vec::with_capacity(tasks.len());
    let mut logs = Vec::with_capacity(tasks.len());
    let mut checkpoints = Vec::with_capacity(tasks.len());
    for (t, task) in tasks.iter().enumerate() {
        let slice = slice_dataset(&train, task, cfg.protocol.overlap_mode);
        if slice.is_empty() {
            return Err(Error::Config(format!("step {t} has no training images")));
        }
        let (targets, iterations, lr) = if t == 0 {
            (prepare_targets(&slice, None, settings.distill, false)?, opt.steps_initial, opt.lr_initial)
        } else {
            let old = params.clone();
            params = params.expand_classifier(&task.new_classes, mix_seed(opt.init_seed.wrapping_add(t as u64)))?;
            let targets = prepare_targets(&slice, Some(&old), settings.distill, cfg.losses.pseudo_labels)?;
            (targets, opt.steps_per_class * task.new_classes.len(), opt.lr_incremental)
        };
        let pseudo_count = targets.iter().map(|t| t.labels.count(crate::objective::LabelOrigin::Pseudo)).sum();

        let mut adam = Adam::new(&params.weights, lr);
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(opt.shuffle_seed.wrapping_add(t as u64)));
        let mut order: Vec<usize> = Vec::new();
        let tail = (iterations / 10).max(1);
        let mut tail_loss = 0.0;
        for it in 0..iterations {
            let mut batch = Vec::with_capacity(opt.batch_size);
            while batch.len() < opt.batch_size {
                if order.is_empty() {
                    order = (0..slice.len()).collect();
                    order.shuffle(&mut rng);
                }
                batch.push(order.pop().expect("refilled"));
            }
            let mut grads = params.weights.zeros_like();
            let mut total = LossBreakdown::default();
            for &idx in &batch {
                let (b, g) = sample_gradient(&params, &slice[idx], &targets[idx], &settings)?;
                total.focal += b.focal;
                total.dice_loss += b.dice_loss;
                total.mask_ce += b.mask_ce;
                total.adaptive_distill += b.adaptive_distill;
                total.total += b.total;
                grads.add_assign(&g);
            }
            if !total.is_finite() || !grads.is_finite() {
                let diag = Diagnostic {
                    step: t,
                    iteration: it,
                    sample_seeds: batch.iter().map(|&i| slice[i].seed).collect(),
                    breakdown: &total,
                };
                return Err(dump_diagnostic(diag_dir, &diag));
            }
            if it + tail >= iterations {
                tail_loss += total.total / batch.len() as f64;
            }
            adam.update(&mut params.weights, &grads);
        }

        checkpoints.push(encode_checkpoint(&params)?);
        reports.push(evaluate(
            &params,
            &test,
            t,
            &task.seen_classes,
            cfg.eval.min_confidence,
            cfg.eval.min_area,
        )?);
        logs.push(StepLog {
            step: t,
            iterations,
            train_samples: slice.len(),
            pseudo_labels: pseudo_count,
            final_loss: tail_loss / tail.min(iterations).max(1) as f64,
        });
    }
    let summary = aggregate_continual(&reports, &tasks)?;
    Ok(RunResult {
        palette,
        tasks,
        reports,
        summary,
        logs,
        params,
        checkpoints,
    })
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(String::new, |v| format!("{:.6}", 100.0 * v))
}

/// Per-class metrics in percentage points; undefined values are empty.
pub fn steps_csv(reports: &[StepReport]) -> String {
    let mut out = String::from("step,class_id,pq,sq,rq,iou\n");
    for r in reports {
        for m in &r.classes {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.step,
                m.class_id,
                cell(m.pq),
                cell(m.sq),
                cell(m.rq),
                cell(m.iou)
            ));
        }
    }
    out
}

#[derive(Serialize)]
struct Group {
    base: Option<f64>,
    new: Option<f64>,
    all: Option<f64>,
    avg: Option<f64>,
}

impl From<crate::metrics::GroupSummary> for Group {
    fn from(g: crate::metrics::GroupSummary) -> Self {
        let pct = |v: Option<f64>| v.map(|v| 100.0 * v);
        Self {
            base: pct(g.base),
            new: pct(g.new),
            all: pct(g.all),
            avg: pct(g.avg),
        }
    }
}

#[derive(Serialize)]
struct SummaryFile<'a> {
    name: &'a str,
    tasks: &'a [TaskSpec],
    pq: Group,
    sq: Group,
    rq: Group,
    miou: Group,
    steps: &'a [StepLog],
}

pub fn summary_json(name: &str, result: &RunResult) -> Result<String> {
    let s = result.summary;
    Ok(serde_json::to_string_pretty(&SummaryFile {
        name,
        tasks: &result.tasks,
        pq: s.pq.into(),
        sq: s.sq.into(),
        rq: s.rq.into(),
        miou: s.miou.into(),
        steps: &result.logs,
    })?)
}

/// Per-step all-seen means, used for the curve plot.
pub fn run_curve(name: &str, result: &RunResult) -> RunCurve {
    let series = |metric| {
        result
            .reports
            .iter()
            .zip(&result.tasks)
            .map(|(r, t)| r.group_mean(&t.seen_classes, metric).map(|v| 100.0 * v))
            .collect()
    };
    RunCurve {
        name: name.to_string(),
        pq: series(Metric::Pq),
        miou: series(Metric::Iou),
    }
}

/// Trains, then writes `steps.csv`, `summary.json`, `curves.svg`, the
/// resolved config and one checkpoint per step into `cfg.output_dir`.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunResult> {
    let dir = cfg.output_dir.as_path();
    let result = train_protocol(cfg, Some(dir))?;
    fs::create_dir_all(dir)?;
    fs::write(dir.join("config.json"), cfg.to_json()?)?;
    fs::write(dir.join("steps.csv"), steps_csv(&result.reports))?;
    fs::write(dir.join("summary.json"), summary_json(&cfg.name, &result)?)?;
    fs::write(dir.join("curves.svg"), render_curves(&[run_curve(&cfg.name, &result)]))?;
    for (t, bytes) in result.checkpoints.iter().enumerate() {
        fs::write(dir.join(format!("step{t}.cmfk")), bytes)?;
    }
    Ok(result)
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn small_config() -> ExperimentConfig {
        let mut cfg = ExperimentConfig::default();
        cfg.data.palette_size = 4;
        cfg.data.thing_classes = 2;
        cfg.data.height = 8;
        cfg.data.width = 8;
        cfg.data.max_instances = 1;
        cfg.data.train_per_class = 3;
        cfg.data.test_per_class = 2;
        cfg.protocol.initial = 2;
        cfg.protocol.increment = 1;
        cfg.model.queries = 4;
        cfg.model.dim = 8;
        cfg.model.hidden = 4;
        cfg.model.ffn = 8;
        cfg.optimization.steps_initial = 3;
        cfg.optimization.steps_per_class = 2;
        cfg.optimization.batch_size = 2;
        cfg
    }

    #[test]
    fn short_run_produces_reports_for_every_step() {
        let result = train_protocol(&small_config(), None).unwrap();
        assert_eq!(result.tasks.len(), 3);
        assert_eq!(result.reports.len(), 3);
        assert_eq!(result.checkpoints.len(), 3);
        assert_eq!(result.params.classes.len(), 4);
        assert_eq!(result.reports[2].classes.len(), 4);
        assert!(result.logs.iter().all(|l| l.final_loss.is_finite()));
    }

    #[test]
    fn runs_are_reproducible() {
        let a = train_protocol(&small_config(), None).unwrap();
        let b = train_protocol(&small_config(), None).unwrap();
        assert_eq!(a.checkpoints, b.checkpoints);
        assert_eq!(steps_csv(&a.reports), steps_csv(&b.reports));
    }

    #[test]
    fn csv_leaves_undefined_cells_empty() {
        let report = StepReport {
            step: 0,
            classes: vec![crate::metrics::ClassMetrics {
                class_id: 3,
                pq: Some(0.5),
                sq: None,
                rq: Some(1.0),
                iou: None,
            }],
        };
        assert_eq!(steps_csv(&[report]), "step,class_id,pq,sq,rq,iou\n0,3,50.000000,,100.000000,\n");
    }
}
