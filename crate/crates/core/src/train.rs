//! Training with minibatch OT coupling, evaluation and coupling export.
//!
//! Each step samples a source and a target minibatch uniformly with
//! replacement, solves entropic OT between them with uniform marginals,
//! evaluates the multi-level objective with the coupling held fixed and
//! takes one SGD step.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use log::{debug, info, warn};

use crate::config::{CouplingCost, RunConfig};
use crate::data::{read_dataset, Dataset, Image, Rng};
use crate::error::{Error, Result};
use crate::jdot::LabelBatch;
use crate::metrics::{metrics_csv_header, metrics_csv_row, ConfusionMatrix};
use crate::nn::{softmax, LossBreakdown, ObjectiveConfig, ObjectiveForward, SegNet, SegNetConfig, Sgd, Tensor, HIGH_LEVEL};
use crate::ot::{format_matrix_csv, sinkhorn, squared_euclidean_cost, CostMatrix, DiscreteMeasure, TransportPlan};

const EVAL_BATCH: usize = 16;
/// Targets listed per source sample in the attention report.
pub const REPORT_TOP: usize = 3;

/// Batch tensor `B × H × W × 3` from images of one size.
pub fn images_tensor(images: &[&Image]) -> Result<Tensor> {
    let first = images.first().ok_or_else(|| Error::invalid("empty image batch"))?;
    let (h, w) = (first.height(), first.width());
    let mut data = Vec::with_capacity(images.len() * h * w * 3);
    for img in images {
        if (img.height(), img.width()) != (h, w) {
            return Err(Error::shape("images in a batch must share one size"));
        }
        data.extend_from_slice(img.data());
    }
    Tensor::new(vec![images.len(), h, w, 3], data)
}

/// `C_ij = ‖x_i − y_j‖²` over flattened RGB images.
pub fn image_cost(source: &[&Image], target: &[&Image]) -> Result<CostMatrix> {
    let flat = |v: &[&Image]| v.iter().map(|i| i.data().to_vec()).collect::<Vec<_>>();
    squared_euclidean_cost(&flat(source), &flat(target))
}

/// Entropic coupling with uniform marginals.
pub fn minibatch_coupling(cost: &CostMatrix, config: &crate::ot::SinkhornConfig) -> Result<TransportPlan> {
    let mu_s = DiscreteMeasure::uniform_weights(cost.n_source())?;
    let mu_t = DiscreteMeasure::uniform_weights(cost.n_target())?;
    sinkhorn(&mu_s, &mu_t, cost, config)
}

/// One training step as logged.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub lr: f64,
    pub losses: LossBreakdown,
    pub source_indices: Vec<usize>,
    pub target_indices: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: SegNet,
    /// `(iteration, confusion matrix)` per evaluation.
    pub evaluations: Vec<(usize, ConfusionMatrix)>,
    pub steps: Vec<StepRecord>,
}

impl TrainOutcome {
    pub fn final_miou(&self) -> Option<f64> {
        self.evaluations.last().and_then(|(_, cm)| cm.miou().ok())
    }
}

/// Objective weights with the OT terms removed when OT is disabled.
pub fn objective_config(cfg: &RunConfig) -> ObjectiveConfig {
    let mut weights = cfg.weights.clone();
    if !cfg.ot_enabled {
        weights.ot_weights.iter_mut().for_each(|w| *w = 0.0);
    }
    ObjectiveConfig {
        weights,
        joint: cfg.joint,
    }
}

pub fn model_config(cfg: &RunConfig, source: &Dataset) -> SegNetConfig {
    SegNetConfig {
        in_channels: 3,
        num_classes: source.manifest.spec.num_classes,
        widths: cfg.model_widths,
    }
}

fn check_data(source: &Dataset, target: &Dataset, eval: Option<&Dataset>) -> Result<()> {
    let s = &source.manifest.spec;
    if source.labels.is_none() {
        return Err(Error::invalid("the source dataset must be labeled"));
    }
    for (name, d) in std::iter::once(("target", target)).chain(eval.map(|e| ("eval", e))) {
        let t = &d.manifest.spec;
        if t.side != s.side || t.num_classes != s.num_classes {
            return Err(Error::shape(format!(
                "{name} data is {}px/{} classes, source is {}px/{} classes",
                t.side, t.num_classes, s.side, s.num_classes
            )));
        }
    }
    if eval.is_some_and(|e| e.labels.is_none()) {
        return Err(Error::invalid("the evaluation dataset must be labeled"));
    }
    Ok(())
}

/// Runs the full schedule on in-memory datasets.
///
/// `on_step` sees every step record as it is produced.
pub fn train_on(
    cfg: &RunConfig,
    source: &Dataset,
    target: &Dataset,
    eval: Option<&Dataset>,
    mut on_step: impl FnMut(&StepRecord),
) -> Result<TrainOutcome> {
    check_data(source, target, eval)?;
    let objective = objective_config(cfg);
    let ot_active = objective.weights.ot_active();
    let mut model = SegNet::new(model_config(cfg, source), cfg.init_seed)?;
    let mut sgd = Sgd::new(cfg.optim)?;
    let mut sampler = Rng::new(cfg.sample_seed);
    let source_labels = source.labels.as_ref().expect("checked above");
    let max = cfg.optim.max_iterations;
    let mut evaluations = Vec::new();
    let mut steps = Vec::with_capacity(max);
    let mut unconverged = 0usize;

    for step in 0..max {
        let si: Vec<usize> = (0..cfg.batch_source).map(|_| sampler.below(source.len())).collect();
        // Target draws happen even without OT so source batches match across ablations.
        let ti: Vec<usize> = (0..cfg.batch_target).map(|_| sampler.below(target.len())).collect();
        let src_imgs: Vec<&Image> = si.iter().map(|&i| &source.images[i]).collect();
        let tgt_imgs: Vec<&Image> = ti.iter().map(|&i| &target.images[i]).collect();
        let xs = images_tensor(&src_imgs)?;
        let ys = LabelBatch::new(si.iter().map(|&i| source_labels[i].clone()).collect())?;
        let xt = if ot_active { Some(images_tensor(&tgt_imgs)?) } else { None };

        let forward = ObjectiveForward::run(&model, &objective, &xs, &ys, xt.as_ref())?;
        let mut plans: Vec<Option<TransportPlan>> = vec![None; objective.weights.levels()];
        if ot_active {
            let shared = match cfg.coupling_cost {
                CouplingCost::Image => Some(minibatch_coupling(&image_cost(&src_imgs, &tgt_imgs)?, &cfg.sinkhorn)?),
                CouplingCost::Joint => None,
            };
            for (level, plan) in plans.iter_mut().enumerate() {
                if objective.weights.ot_weights[level] == 0.0 {
                    continue;
                }
                let p = match &shared {
                    Some(p) => p.clone(),
                    None => minibatch_coupling(&forward.joint_cost(level)?, &cfg.sinkhorn)?,
                };
                if !p.converged {
                    unconverged += 1;
                    debug!("step {step}: sinkhorn marginal violation {:.3e}", p.marginal_violation());
                }
                *plan = Some(p);
            }
        }
        let refs: Vec<Option<&TransportPlan>> = plans.iter().map(Option::as_ref).collect();
        let (losses, grads) = forward.finish(&refs).map_err(|e| match e {
            Error::Numerical(m) => Error::Numerical(format!("step {step}: {m}")),
            other => other,
        })?;
        if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
            return Err(Error::Numerical(format!("step {step}: gradient of parameter {i} is not finite")));
        }
        let lr = sgd.step(&mut model, &grads, step)?;
        debug!("step {step} lr {lr:.6e} total {:.6} seg {:?} ot {:?}", losses.total, losses.seg, losses.ot);
        let record = StepRecord {
            step,
            lr,
            losses,
            source_indices: si,
            target_indices: ti,
        };
        on_step(&record);
        steps.push(record);

        let done = step + 1;
        let due = cfg.eval_interval > 0 && done % cfg.eval_interval == 0;
        if let Some(e) = eval.filter(|_| due || done == max) {
            let cm = evaluate_model(&model, e)?;
            info!("iteration {done}: mIoU {:.4}", cm.miou().unwrap_or(f64::NAN));
            evaluations.push((done, cm));
        }
    }
    if unconverged > 0 {
        warn!("sinkhorn hit its iteration limit for {unconverged} couplings; consider a smaller sinkhorn_lambda");
    }
    Ok(TrainOutcome {
        model,
        evaluations,
        steps,
    })
}

/// Loads the datasets named by `cfg`, trains and writes the checkpoint,
/// metrics CSV and (when configured) the per-step loss log.
pub fn train(cfg: &RunConfig) -> Result<TrainOutcome> {
    let source = read_dataset(&cfg.source_data)?;
    let target = read_dataset(&cfg.target_data)?;
    let eval = match &cfg.eval_data {
        Some(p) => Some(read_dataset(p)?),
        None if target.labels.is_some() => Some(target.clone()),
        None => {
            warn!("no labeled target data; the metrics file will contain only its header");
            None
        }
    };
    let mut log = cfg.loss_log.as_ref().map(|_| {
        let levels = cfg.weights.levels();
        let mut s = String::from("step,lr,total");
        (0..levels).for_each(|l| {
            let _ = write!(s, ",seg_{l}");
        });
        (0..levels).for_each(|l| {
            let _ = write!(s, ",ot_{l}");
        });
        s.push('\n');
        s
    });
    let outcome = train_on(cfg, &source, &target, eval.as_ref(), |r| {
        if let Some(s) = log.as_mut() {
            let _ = write!(s, "{},{:e},{:e}", r.step, r.lr, r.losses.total);
            for v in r.losses.seg.iter().chain(&r.losses.ot) {
                let _ = write!(s, ",{v:e}");
            }
            s.push('\n');
        }
    })?;

    write_file(&cfg.checkpoint, &outcome.model.to_bytes(cfg.optim.max_iterations as u32))?;
    let mut csv = metrics_csv_header(source.manifest.spec.num_classes);
    csv.push('\n');
    for (it, cm) in &outcome.evaluations {
        csv.push_str(&metrics_csv_row(*it, cm)?);
        csv.push('\n');
    }
    write_file(&cfg.metrics, csv.as_bytes())?;
    if let (Some(path), Some(s)) = (&cfg.loss_log, log) {
        write_file(path, s.as_bytes())?;
    }
    Ok(outcome)
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Per-pixel argmax of the high-level softmax for each image.
pub fn predict(model: &SegNet, images: &[&Image]) -> Result<Vec<Vec<usize>>> {
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(EVAL_BATCH) {
        let logits = model.forward(&images_tensor(chunk)?)?;
        let probs = softmax(&logits[HIGH_LEVEL])?;
        let k = *probs.shape().last().expect("rank 4");
        let per_image = probs.len() / chunk.len();
        for sample in probs.data().chunks(per_image) {
            out.push(
                sample
                    .chunks(k)
                    .map(|px| {
                        // first maximum wins ties
                        px.iter()
                            .enumerate()
                            .fold((0, f64::NEG_INFINITY), |best, (c, &v)| if v > best.1 { (c, v) } else { best })
                            .0
                    })
                    .collect(),
            );
        }
    }
    Ok(out)
}

/// Confusion matrix of `model` on a labeled dataset.
pub fn evaluate_model(model: &SegNet, data: &Dataset) -> Result<ConfusionMatrix> {
    let labels = data
        .labels
        .as_ref()
        .ok_or_else(|| Error::invalid("evaluation requires a labeled dataset"))?;
    if data.manifest.spec.num_classes != model.config().num_classes {
        return Err(Error::shape(format!(
            "dataset has {} classes, model predicts {}",
            data.manifest.spec.num_classes,
            model.config().num_classes
        )));
    }
    let mut cm = ConfusionMatrix::new(model.config().num_classes)?;
    let images: Vec<&Image> = data.images.iter().collect();
    for (pred, gt) in predict(model, &images)?.iter().zip(labels) {
        cm.accumulate_masked(pred, gt.labels(), Some(gt.ignore_mask()))?;
    }
    Ok(cm)
}

/// Loads a checkpoint and a dataset directory; returns the metrics CSV
/// (header and one row labelled with the checkpoint's iteration).
pub fn evaluate(checkpoint: &Path, data_dir: &Path) -> Result<String> {
    let (model, iteration) = SegNet::load(checkpoint)?;
    let data = read_dataset(data_dir)?;
    if data.labels.is_none() {
        return Err(Error::data(data_dir, "dataset is unlabeled; evaluation needs ground truth"));
    }
    let cm = evaluate_model(&model, &data)?;
    Ok(format!(
        "{}\n{}\n",
        metrics_csv_header(cm.num_classes()),
        metrics_csv_row(iteration as usize, &cm)?
    ))
}

/// A coupling between chosen source and target samples, read as attention.
#[derive(Debug, Clone)]
pub struct CouplingExport {
    pub source_indices: Vec<usize>,
    pub target_indices: Vec<usize>,
    pub plan: TransportPlan,
}

impl CouplingExport {
    /// Target positions of row `i` by decreasing weight (ties by position).
    pub fn ranking(&self, i: usize) -> Vec<usize> {
        let row = self.plan.coupling.row(i);
        let mut order: Vec<usize> = (0..row.len()).collect();
        order.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
        order
    }

    pub fn report(&self) -> String {
        let mut s = String::from("# coupling as attention: top target samples per source sample\n");
        for (i, &src) in self.source_indices.iter().enumerate() {
            let _ = write!(s, "source {src}:");
            for j in self.ranking(i).into_iter().take(REPORT_TOP) {
                let _ = write!(s, " target {} ({:.6e})", self.target_indices[j], self.plan.coupling[[i, j]]);
            }
            s.push('\n');
        }
        s
    }
}

/// Solves the coupling for explicit sample indices.
///
/// Joint mode uses the high-level outputs of `model`; image mode ignores it.
pub fn compute_coupling(
    cfg: &RunConfig,
    source: &Dataset,
    target: &Dataset,
    source_indices: &[usize],
    target_indices: &[usize],
    model: Option<&SegNet>,
) -> Result<CouplingExport> {
    check_data(source, target, None)?;
    for (name, idx, n) in [("source", source_indices, source.len()), ("target", target_indices, target.len())] {
        if idx.is_empty() {
            return Err(Error::invalid(format!("no {name} indices selected")));
        }
        if let Some(i) = idx.iter().find(|&&i| i >= n) {
            return Err(Error::invalid(format!("{name} index {i} out of range for {n} samples")));
        }
    }
    let src: Vec<&Image> = source_indices.iter().map(|&i| &source.images[i]).collect();
    let tgt: Vec<&Image> = target_indices.iter().map(|&i| &target.images[i]).collect();
    let cost = match cfg.coupling_cost {
        CouplingCost::Image => image_cost(&src, &tgt)?,
        CouplingCost::Joint => {
            let model = model.ok_or_else(|| Error::invalid("joint coupling needs a trained model"))?;
            let labels = source.labels.as_ref().expect("checked");
            let ys = LabelBatch::new(source_indices.iter().map(|&i| labels[i].clone()).collect())?;
            let objective = ObjectiveConfig {
                weights: crate::nn::MultiLevelWeights::new(vec![1.0; 2], vec![1.0; 2])?,
                joint: cfg.joint,
            };
            let xs = images_tensor(&src)?;
            let xt = images_tensor(&tgt)?;
            ObjectiveForward::run(model, &objective, &xs, &ys, Some(&xt))?.joint_cost(HIGH_LEVEL)?
        }
    };
    Ok(CouplingExport {
        source_indices: source_indices.to_vec(),
        target_indices: target_indices.to_vec(),
        plan: minibatch_coupling(&cost, &cfg.sinkhorn)?,
    })
}

/// Writes `coupling.csv` and `attention.txt` into `out_dir`.
pub fn export_coupling(cfg: &RunConfig, out_dir: &Path) -> Result<CouplingExport> {
    let source = read_dataset(&cfg.source_data)?;
    let target = read_dataset(&cfg.target_data)?;
    let si = cfg.export_source.clone().unwrap_or_else(|| (0..cfg.batch_source.min(source.len())).collect());
    let ti = cfg.export_target.clone().unwrap_or_else(|| (0..cfg.batch_target.min(target.len())).collect());
    let model = match cfg.coupling_cost {
        CouplingCost::Joint => Some(SegNet::load(&cfg.checkpoint)?.0),
        CouplingCost::Image => None,
    };
    let export = compute_coupling(cfg, &source, &target, &si, &ti, model.as_ref())?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    write_file(&out_dir.join("coupling.csv"), format_matrix_csv(&export.plan.coupling).as_bytes())?;
    write_file(&out_dir.join("attention.txt"), export.report().as_bytes())?;
    Ok(export)
}
