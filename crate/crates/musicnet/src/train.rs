//! End-to-end driver: data preparation, the multi-scale training loop, and
//! held-out evaluation for each task.
//!
//! A run is fully determined by its [`RunConfig`]: every random draw (splits,
//! masks, batch order, parameter init) comes from a named substream of the run
//! seed, so two runs with the same config produce bit-identical loss traces.

use std::collections::BTreeSet;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;

use crate::checkpoint::{self, CheckpointMeta};
use crate::config::{auto_max_refs, CorrelationKind, RunConfig, Task};
use crate::data::{self, AlignedInstance, Dataset, DatasetSplit, Normalizer};
use crate::losses;
use crate::metrics::{self, ClassificationMetrics};
use crate::model::{self, ModelParams};
use crate::multiscale::{self, MaskingConfig};
use crate::optim::{adamw_step, OptimizerState};
use crate::report::{
    self, ForecastReport, InterpolationReport, LossRow, RunReport,
};
use crate::rng::{derive_seed_indexed, substream_indexed};
use crate::spectral::{self, CorrelationMatrix};
use crate::tensor::{NodeId, Tape};
use crate::{Error, Result};

/// Everything derived from the config before the first optimizer step:
/// normalized data, the split, the channel-correlation matrix, and the
/// hierarchy geometry.
pub struct Prepared {
    /// Channel-normalized values, per-instance times mapped onto [0, 1].
    pub dataset: Dataset,
    pub split: DatasetSplit,
    pub normalizer: Normalizer,
    /// The matrix the model trains with, per the configured correlation kind.
    pub corr: CorrelationMatrix,
    /// Data-driven matrices for artifact dumps, kept regardless of the
    /// configured kind; `None` when the estimate failed (warning recorded).
    pub corr_lspdtw: Option<CorrelationMatrix>,
    pub corr_idtw: Option<CorrelationMatrix>,
    pub aligned: Vec<AlignedInstance>,
    pub num_scales: usize,
    pub max_refs: usize,
    pub num_classes: usize,
    pub warnings: Vec<String>,
}

fn load_dataset(config: &RunConfig) -> Result<Dataset> {
    let dataset = if let Some(spec) = &config.generator {
        data::synth_generate(spec, config.seed)?
    } else {
        let section = config
            .data
            .as_ref()
            .expect("validated config has a data or generator section");
        let mut dataset = data::load_csv(&section.observations)?;
        if let Some(labels) = &section.labels {
            data::load_labels(labels, &mut dataset)?;
        }
        dataset
    };
    if dataset.is_empty() {
        return Err(Error::data("dataset contains no instances"));
    }
    Ok(dataset)
}

fn split_ratios(config: &RunConfig) -> [f64; 3] {
    config
        .split
        .or_else(|| config.data.as_ref().map(|d| d.split))
        .unwrap_or([0.8, 0.1, 0.1])
}

fn lower_median(mut xs: Vec<usize>) -> usize {
    assert!(!xs.is_empty(), "median of empty list");
    xs.sort_unstable();
    xs[(xs.len() - 1) / 2]
}

fn data_driven_corr(
    kind: CorrelationKind,
    train_subset: &Dataset,
) -> Result<CorrelationMatrix> {
    match kind {
        CorrelationKind::LspDtw => {
            let grid = spectral::default_grid(train_subset)?;
            spectral::correlation_matrix(train_subset, &grid)
        }
        CorrelationKind::IDtw => spectral::idtw_matrix(train_subset),
        CorrelationKind::Ones => Ok(CorrelationMatrix::ones(train_subset.num_channels)),
        CorrelationKind::Identity => {
            Ok(CorrelationMatrix::identity(train_subset.num_channels))
        }
    }
}

/// Load (or generate) the dataset, split it, estimate the channel
/// correlation on the raw training split, then normalize values per channel
/// and times per instance and align everything onto per-instance grids.
pub fn prepare(config: &RunConfig) -> Result<Prepared> {
    let raw = load_dataset(config)?;
    let d = raw.num_channels;
    let split_seed = config.split_seed.unwrap_or(config.seed);
    let split = data::split(&raw, split_ratios(config), split_seed)?;
    if split.train.is_empty() {
        return Err(Error::data(
            "training split is empty; increase the dataset or the train ratio",
        ));
    }

    let mut warnings = Vec::new();
    // Correlation is estimated on raw (unnormalized) training data: the
    // frequency content lives in the raw timestamps.
    let train_subset = raw.subset(&split.train);
    let corr = data_driven_corr(config.correlation, &train_subset)?;
    let corr_lspdtw = if config.correlation == CorrelationKind::LspDtw {
        Some(corr.clone())
    } else {
        match data_driven_corr(CorrelationKind::LspDtw, &train_subset) {
            Ok(m) => Some(m),
            Err(e) => {
                warnings.push(format!("lsp-dtw correlation dump unavailable: {}", e));
                None
            }
        }
    };
    let corr_idtw = if config.correlation == CorrelationKind::IDtw {
        Some(corr.clone())
    } else {
        match data_driven_corr(CorrelationKind::IDtw, &train_subset) {
            Ok(m) => Some(m),
            Err(e) => {
                warnings.push(format!("i-dtw correlation dump unavailable: {}", e));
                None
            }
        }
    };

    let num_classes = raw.num_classes();
    if config.task == Task::Classify {
        if raw.instances.iter().any(|i| i.label.is_none()) {
            return Err(Error::data("classification requires a label for every instance"));
        }
        if num_classes < 2 {
            return Err(Error::data(format!(
                "classification requires at least 2 classes, found {}",
                num_classes
            )));
        }
    }

    let normalizer = Normalizer::fit(&raw, &split.train);
    let instances: Vec<_> = raw
        .instances
        .iter()
        .map(|inst| data::normalize_times(&normalizer.apply(inst)))
        .collect();
    let dataset = Dataset { instances, num_channels: d };
    let aligned: Vec<AlignedInstance> =
        dataset.instances.iter().map(data::align).collect::<Result<_>>()?;

    let train_aligned: Vec<AlignedInstance> =
        split.train.iter().map(|&i| aligned[i].clone()).collect();
    let num_scales = match config.num_scales {
        Some(l) => l,
        None => multiscale::choose_num_scales_median(&train_aligned),
    };
    let max_refs = match config.max_refs {
        Some(m) => m,
        None => auto_max_refs(lower_median(
            train_aligned.iter().map(|a| a.len()).collect(),
        )),
    };

    Ok(Prepared {
        dataset,
        split,
        normalizer,
        corr,
        corr_lspdtw,
        corr_idtw,
        aligned,
        num_scales,
        max_refs,
        num_classes,
        warnings,
    })
}

/// Rebuild the run state for evaluating an existing checkpoint: the dataset
/// comes from the config (same seed, same split), but the normalizer,
/// correlation matrix, and hierarchy geometry are the ones stored at
/// training time.
pub fn prepare_for_eval(config: &RunConfig, meta: &CheckpointMeta) -> Result<Prepared> {
    let raw = load_dataset(config)?;
    if raw.num_channels != meta.model.num_channels {
        return Err(Error::data(format!(
            "dataset has {} channels but the checkpoint was trained on {}",
            raw.num_channels, meta.model.num_channels
        )));
    }
    let split = data::split(&raw, split_ratios(config), config.seed)?;
    let num_classes =
        if meta.model.num_classes >= 2 { meta.model.num_classes } else { raw.num_classes() };
    let instances: Vec<_> = raw
        .instances
        .iter()
        .map(|inst| data::normalize_times(&meta.normalizer.apply(inst)))
        .collect();
    let dataset = Dataset { instances, num_channels: raw.num_channels };
    let aligned: Vec<AlignedInstance> =
        dataset.instances.iter().map(data::align).collect::<Result<_>>()?;
    Ok(Prepared {
        dataset,
        split,
        normalizer: meta.normalizer.clone(),
        corr: meta.correlation.clone(),
        corr_lspdtw: None,
        corr_idtw: None,
        aligned,
        num_scales: meta.num_scales,
        max_refs: meta.max_refs,
        num_classes,
        warnings: Vec::new(),
    })
}

/// One batch's loss graph plus the component values that go into the log.
struct BatchOutput {
    total: NodeId,
    recon: f64,
    adjust: f64,
    contrast: f64,
    task: f64,
    warnings: Vec<String>,
}

fn cellwise_visible(obs: &[bool], hidden: &[bool]) -> Vec<bool> {
    obs.iter().zip(hidden).map(|(&o, &h)| o && !h).collect()
}

fn mean_or_zero(
    tape: &mut Tape,
    nodes: &[NodeId],
    what: &str,
    warnings: &mut Vec<String>,
) -> NodeId {
    if nodes.is_empty() {
        warnings.push(format!("no {} contributors in a batch; term contributed 0", what));
        return tape.scalar(0.0);
    }
    let mut sum = nodes[0];
    for &n in &nodes[1..] {
        sum = tape.add(sum, n);
    }
    tape.scale(sum, 1.0 / nodes.len() as f64)
}

fn batch_loss(
    tape: &mut Tape,
    params: &ModelParams,
    bound: &[NodeId],
    c_hat_t: NodeId,
    prepared: &Prepared,
    config: &RunConfig,
    chunk: &[usize],
    epoch: usize,
) -> Result<BatchOutput> {
    let l_total = prepared.num_scales;
    let max_refs = prepared.max_refs;
    let mut warnings = Vec::new();

    let want_contrast = chunk.len() >= 2;
    if !want_contrast {
        warnings.push("batch of one instance; contrastive terms skipped".to_string());
    }
    // Per-level GRU summaries feed the contrastive terms (all levels) and the
    // classifier head (finest level only).
    let want_h = |li: usize| {
        want_contrast || (config.task == Task::Classify && li == l_total - 1)
    };

    let mut recon_nodes: Vec<Vec<NodeId>> = vec![Vec::new(); l_total];
    let mut adjust_nodes: Vec<Vec<NodeId>> = vec![Vec::new(); l_total - 1];
    let mut h_rows: Vec<Vec<NodeId>> = vec![Vec::new(); l_total];
    let mut forecast_nodes: Vec<NodeId> = Vec::new();
    let mut labels: Vec<usize> = Vec::new();

    for &idx in chunk {
        let inst = &prepared.aligned[idx];
        let mask_seed =
            derive_seed_indexed(config.seed, &format!("mask/{}", epoch), idx as u64);
        let hier = multiscale::build_hierarchy(
            inst,
            l_total,
            &MaskingConfig { ratio: config.mask_ratio, seed: mask_seed },
            max_refs,
        );

        let mut xhat_prev: Option<NodeId> = None;
        for li in 0..l_total {
            let lvl = &hier.levels[li];
            let t_len = lvl.data.len();
            let d = lvl.data.num_channels;
            let tau = multiscale::ref_points(li + 1, l_total, max_refs);
            let visible = cellwise_visible(&lvl.data.obs_mask, &lvl.random_mask);
            let r = model::encode(
                tape,
                params,
                bound,
                c_hat_t,
                &lvl.data.grid,
                &lvl.data.values,
                &visible,
                &tau,
            );
            let xhat = model::decode(tape, params, bound, r, &tau, &lvl.data.grid);
            let x_const = tape.constant(vec![t_len, d], lvl.data.values.clone());
            let (rl, empty) = losses::recon_loss(tape, xhat, x_const, &lvl.random_mask);
            if !empty {
                recon_nodes[li].push(rl);
            }
            if li >= 1 {
                let assignment = hier.assignment_to_coarser(li);
                let coarse_obs = &hier.levels[li - 1].data.obs_mask;
                let (al, a_empty) = losses::adjust_loss(
                    tape,
                    xhat,
                    xhat_prev.expect("previous level decoded"),
                    &assignment,
                    coarse_obs,
                )?;
                if !a_empty {
                    adjust_nodes[li - 1].push(al);
                }
            }
            if want_h(li) {
                let h = model::gru_summarize(tape, params, bound, r);
                h_rows[li].push(h);
            }
            xhat_prev = Some(xhat);
        }

        if config.task == Task::Classify {
            labels.push(
                prepared.dataset.instances[idx]
                    .label
                    .expect("classification data is fully labeled"),
            );
        }
        if config.task == Task::Forecast {
            if let Some(node) =
                forecast_instance_loss(tape, params, bound, c_hat_t, inst, config, prepared)?
            {
                forecast_nodes.push(node);
            }
        }
    }

    let recon_means: Vec<NodeId> = (0..l_total)
        .map(|li| mean_or_zero(tape, &recon_nodes[li], "reconstruction", &mut warnings))
        .collect();
    let adjust_means: Vec<NodeId> = (0..l_total - 1)
        .map(|li| mean_or_zero(tape, &adjust_nodes[li], "adjustment", &mut warnings))
        .collect();
    let contrast_terms: Vec<NodeId> = if want_contrast {
        let mut terms = Vec::with_capacity(l_total - 1);
        for li in 1..l_total {
            let h_l = tape.concat_rows(&h_rows[li]);
            let h_lm1 = tape.concat_rows(&h_rows[li - 1]);
            terms.push(losses::contrastive_loss(tape, h_l, h_lm1)?);
        }
        terms
    } else {
        Vec::new()
    };

    let task_node = match config.task {
        Task::Interpolate => None,
        Task::Classify => {
            let h_top = tape.concat_rows(&h_rows[l_total - 1]);
            let logits = model::classify_logits(tape, params, bound, h_top);
            Some(losses::cls_loss(tape, logits, &labels)?)
        }
        Task::Forecast => {
            Some(mean_or_zero(tape, &forecast_nodes, "forecast", &mut warnings))
        }
    };

    let total = losses::total_loss(
        tape,
        &recon_means,
        &adjust_means,
        &contrast_terms,
        task_node,
        &config.weights,
    );

    let mean_of = |tape: &Tape, nodes: &[NodeId], norm: usize| -> f64 {
        if nodes.is_empty() || norm == 0 {
            0.0
        } else {
            nodes.iter().map(|&n| tape.value(n)[0]).sum::<f64>() / norm as f64
        }
    };
    let recon = mean_of(tape, &recon_means, l_total);
    let adjust = mean_of(tape, &adjust_means, l_total - 1);
    let contrast = mean_of(tape, &contrast_terms, l_total.saturating_sub(1).max(1));
    let task = task_node.map(|n| tape.value(n)[0]).unwrap_or(0.0);

    Ok(BatchOutput { total, recon, adjust, contrast, task, warnings })
}

/// Forecast objective for one instance: encode what is visible before the
/// split time, decode at the first `horizon` grid times at or after it, and
/// score only observed target cells. Returns `None` when the instance has
/// nothing to forecast from or to.
fn forecast_instance_loss(
    tape: &mut Tape,
    params: &ModelParams,
    bound: &[NodeId],
    c_hat_t: NodeId,
    inst: &AlignedInstance,
    config: &RunConfig,
    prepared: &Prepared,
) -> Result<Option<NodeId>> {
    let Some(fc) = forecast_setup(inst, config.forecast_split, config.horizon) else {
        return Ok(None);
    };
    let l_total = prepared.num_scales;
    let tau = multiscale::ref_points(l_total, l_total, prepared.max_refs);
    let r = model::encode(
        tape,
        params,
        bound,
        c_hat_t,
        &inst.grid,
        &inst.values,
        &fc.visible,
        &tau,
    );
    let xhat = model::decode(tape, params, bound, r, &tau, &fc.target_times);
    let target = tape.constant(
        vec![fc.target_rows.len(), inst.num_channels],
        fc.target_values.clone(),
    );
    Ok(Some(losses::forecast_loss(tape, xhat, target, &fc.valid)?))
}

/// The geometry of one forecast problem on an aligned instance.
struct ForecastSetup {
    /// Cellwise visibility: observed and strictly before the split time.
    visible: Vec<bool>,
    target_rows: Vec<usize>,
    target_times: Vec<f64>,
    /// Row-major `[targets, channels]` truth (zeros where unobserved).
    target_values: Vec<f64>,
    /// Cellwise mask over the target block: observed target cells.
    valid: Vec<bool>,
}

fn forecast_setup(inst: &AlignedInstance, split: f64, horizon: usize) -> Option<ForecastSetup> {
    let d = inst.num_channels;
    let mut visible = vec![false; inst.len() * d];
    let mut any_visible = false;
    for (row, &t) in inst.grid.iter().enumerate() {
        if t < split {
            for c in 0..d {
                if inst.obs_mask[row * d + c] {
                    visible[row * d + c] = true;
                    any_visible = true;
                }
            }
        }
    }
    if !any_visible {
        return None;
    }
    let target_rows: Vec<usize> = inst
        .grid
        .iter()
        .enumerate()
        .filter(|(_, &t)| t >= split)
        .map(|(row, _)| row)
        .take(horizon)
        .collect();
    if target_rows.is_empty() {
        return None;
    }
    let target_times: Vec<f64> = target_rows.iter().map(|&r| inst.grid[r]).collect();
    let mut target_values = Vec::with_capacity(target_rows.len() * d);
    let mut valid = Vec::with_capacity(target_rows.len() * d);
    for &row in &target_rows {
        for c in 0..d {
            target_values.push(inst.values[row * d + c]);
            valid.push(inst.obs_mask[row * d + c]);
        }
    }
    if valid.iter().all(|&v| !v) {
        return None;
    }
    Some(ForecastSetup { visible, target_rows, target_times, target_values, valid })
}

/// Train a model per the config and write `checkpoint.bin`, `losses.csv`,
/// `report.json`, and the correlation dumps into `out_dir`.
pub fn train(config: &RunConfig, out_dir: &Path) -> Result<RunReport> {
    let start = Instant::now();
    config.validate()?;
    std::fs::create_dir_all(out_dir)
        .map_err(|e| Error::config(format!("cannot create {:?}: {}", out_dir, e)))?;

    let prepared = prepare(config)?;
    let mut warnings: BTreeSet<String> = prepared.warnings.iter().cloned().collect();

    let mut model_cfg = config.model;
    model_cfg.num_channels = prepared.dataset.num_channels;
    model_cfg.num_classes =
        if config.task == Task::Classify { prepared.num_classes } else { 0 };

    let mut params = ModelParams::init(model_cfg, config.seed);
    let mut opt = OptimizerState::new(&params.store, config.base_lr, config.epochs);

    let mut rows: Vec<LossRow> = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        opt.epoch = epoch;
        let lr = opt.lr();
        let mut order = prepared.split.train.clone();
        let mut rng = substream_indexed(config.seed, "batch-order", epoch as u64);
        order.shuffle(&mut rng);

        let mut sums = [0.0f64; 5]; // recon, adjust, contrast, task, total
        let mut weight = 0usize;
        for (step, chunk) in order.chunks(config.batch_size).enumerate() {
            let mut tape = Tape::new();
            let bound = params.bind(&mut tape);
            let c_hat_t = model::mixing_constant(&mut tape, &prepared.corr);
            let out = batch_loss(
                &mut tape, &params, &bound, c_hat_t, &prepared, config, chunk, epoch,
            )?;
            for w in out.warnings {
                warnings.insert(w);
            }
            let total_value = tape.value(out.total)[0];
            if !total_value.is_finite() {
                return Err(Error::numeric(format!(
                    "non-finite loss at epoch {} step {}",
                    epoch + 1,
                    step + 1
                )));
            }
            tape.backward(out.total);
            let grads = params.store.collect_grads(&tape, &bound);
            adamw_step(&mut params.store, &grads, &mut opt, config.weight_decay).map_err(
                |e| Error::numeric(format!("{} (epoch {} step {})", e, epoch + 1, step + 1)),
            )?;

            let w = chunk.len() as f64;
            sums[0] += out.recon * w;
            sums[1] += out.adjust * w;
            sums[2] += out.contrast * w;
            sums[3] += out.task * w;
            sums[4] += total_value * w;
            weight += chunk.len();
        }
        let n = weight.max(1) as f64;
        rows.push(LossRow {
            epoch: epoch + 1,
            recon: sums[0] / n,
            adjust: sums[1] / n,
            contrast: sums[2] / n,
            task: sums[3] / n,
            total: sums[4] / n,
            lr,
        });
    }

    let mut artifacts = Vec::new();
    let meta = CheckpointMeta {
        task: config.task,
        model: model_cfg,
        normalizer: prepared.normalizer.clone(),
        correlation_kind: config.correlation,
        correlation: prepared.corr.clone(),
        num_scales: prepared.num_scales,
        max_refs: prepared.max_refs,
        seed: config.seed,
    };
    checkpoint::save(&out_dir.join("checkpoint.bin"), &meta, &params)?;
    artifacts.push("checkpoint.bin".to_string());

    for (stem, matrix) in [
        ("corr_lspdtw", &prepared.corr_lspdtw),
        ("corr_idtw", &prepared.corr_idtw),
    ] {
        if let Some(m) = matrix {
            match report::dump_correlation(out_dir, stem, m) {
                Ok(files) => artifacts.extend(files),
                Err(e) => {
                    warnings.insert(format!("could not write {} dump: {}", stem, e));
                }
            }
        }
    }

    let (classification, interpolation, forecast, eval_warnings) =
        evaluate_task(&params, &prepared, config)?;
    for w in eval_warnings {
        warnings.insert(w);
    }

    report::write_losses_csv(out_dir, &rows)?;
    artifacts.push("losses.csv".to_string());

    let run = RunReport {
        config: config.clone(),
        num_scales: prepared.num_scales,
        max_refs: prepared.max_refs,
        epochs_run: config.epochs,
        losses: rows,
        classification,
        interpolation,
        forecast,
        artifacts: {
            let mut a = artifacts.clone();
            a.push("report.json".to_string());
            a
        },
        warnings: warnings.into_iter().collect(),
        wall_clock_secs: start.elapsed().as_secs_f64(),
    };
    report::write_report(out_dir, &run)?;
    Ok(run)
}

/// Evaluate an existing checkpoint on the config's held-out split and write
/// `report.json` into `out_dir`. The task, normalizer, correlation, and
/// hierarchy geometry come from the checkpoint, not the config.
pub fn eval_checkpoint(
    config: &RunConfig,
    checkpoint_path: &Path,
    out_dir: &Path,
) -> Result<RunReport> {
    let start = Instant::now();
    config.validate()?;
    std::fs::create_dir_all(out_dir)
        .map_err(|e| Error::config(format!("cannot create {:?}: {}", out_dir, e)))?;
    let (meta, params) = checkpoint::load(checkpoint_path)?;
    let prepared = prepare_for_eval(config, &meta)?;
    let mut warnings: BTreeSet<String> = prepared.warnings.iter().cloned().collect();
    let mut eval_config = config.clone();
    if config.task != meta.task {
        warnings.insert(format!(
            "config task {:?} differs from checkpoint task {:?}; evaluating the checkpoint task",
            config.task, meta.task
        ));
        eval_config.task = meta.task;
    }

    let (classification, interpolation, forecast, eval_warnings) =
        evaluate_task(&params, &prepared, &eval_config)?;
    for w in eval_warnings {
        warnings.insert(w);
    }

    let run = RunReport {
        config: eval_config,
        num_scales: prepared.num_scales,
        max_refs: prepared.max_refs,
        epochs_run: 0,
        losses: Vec::new(),
        classification,
        interpolation,
        forecast,
        artifacts: vec!["report.json".to_string()],
        warnings: warnings.into_iter().collect(),
        wall_clock_secs: start.elapsed().as_secs_f64(),
    };
    report::write_report(out_dir, &run)?;
    Ok(run)
}

/// Pick the evaluation indices: the test split, falling back to validation
/// and then to train (with a warning) when empty.
fn eval_indices<'a>(
    prepared: &'a Prepared,
    warnings: &mut Vec<String>,
) -> &'a [usize] {
    if !prepared.split.test.is_empty() {
        &prepared.split.test
    } else if !prepared.split.validation.is_empty() {
        warnings.push("test split is empty; evaluating on the validation split".to_string());
        &prepared.split.validation
    } else {
        warnings.push("no held-out split; evaluating on the training split".to_string());
        &prepared.split.train
    }
}

type TaskEval = (
    Option<ClassificationMetrics>,
    Option<InterpolationReport>,
    Option<ForecastReport>,
    Vec<String>,
);

fn evaluate_task(
    params: &ModelParams,
    prepared: &Prepared,
    config: &RunConfig,
) -> Result<TaskEval> {
    let mut warnings = Vec::new();
    let indices = eval_indices(prepared, &mut warnings).to_vec();
    let out = match config.task {
        Task::Classify => (
            Some(evaluate_classification(params, prepared, &indices)?),
            None,
            None,
        ),
        Task::Interpolate => (
            None,
            Some(evaluate_interpolation(
                params,
                prepared,
                &indices,
                config.observed_fraction,
                config.seed,
            )?),
            None,
        ),
        Task::Forecast => (
            None,
            None,
            Some(evaluate_forecast(
                params,
                prepared,
                &indices,
                config.forecast_split,
                config.horizon,
            )?),
        ),
    };
    Ok((out.0, out.1, out.2, warnings))
}

/// Encode the finest level of one instance with the given visibility and
/// decode at `targets`; returns the `[targets, channels]` prediction values.
fn predict_values(
    params: &ModelParams,
    prepared: &Prepared,
    inst: &AlignedInstance,
    visible: &[bool],
    targets: &[f64],
) -> Vec<f64> {
    let l_total = prepared.num_scales;
    let tau = multiscale::ref_points(l_total, l_total, prepared.max_refs);
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let c_hat_t = model::mixing_constant(&mut tape, &prepared.corr);
    let r = model::encode(
        &mut tape, params, &bound, c_hat_t, &inst.grid, &inst.values, visible, &tau,
    );
    let xhat = model::decode(&mut tape, params, &bound, r, &tau, targets);
    tape.value(xhat).to_vec()
}

/// Full-observation classification pass over `indices`: per instance, encode
/// the finest level, summarize with the GRU, and apply the classifier head.
/// Scores are the softmax probability of class 1.
pub fn evaluate_classification(
    params: &ModelParams,
    prepared: &Prepared,
    indices: &[usize],
) -> Result<ClassificationMetrics> {
    if indices.is_empty() {
        return Err(Error::data("no instances to evaluate"));
    }
    let num_classes = params.config.num_classes;
    let l_total = prepared.num_scales;
    let tau = multiscale::ref_points(l_total, l_total, prepared.max_refs);
    let mut scores = Vec::with_capacity(indices.len());
    let mut predictions = Vec::with_capacity(indices.len());
    let mut labels = Vec::with_capacity(indices.len());
    for &idx in indices {
        let inst = &prepared.aligned[idx];
        let label = prepared.dataset.instances[idx]
            .label
            .ok_or_else(|| Error::data(format!("instance {} has no label", idx)))?;
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape);
        let c_hat_t = model::mixing_constant(&mut tape, &prepared.corr);
        let r = model::encode(
            &mut tape,
            params,
            &bound,
            c_hat_t,
            &inst.grid,
            &inst.values,
            &inst.obs_mask,
            &tau,
        );
        let h = model::gru_summarize(&mut tape, params, &bound, r);
        let logits_node = model::classify_logits(&mut tape, params, &bound, h);
        let logits = tape.value(logits_node);
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|&v| (v - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        scores.push(exps.get(1).copied().unwrap_or(0.0) / z);
        let pred = logits
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).expect("finite logits"))
            .map(|(i, _)| i)
            .expect("at least one class");
        predictions.push(pred);
        labels.push(label);
    }
    Ok(metrics::classification_metrics(&scores, &predictions, &labels, num_classes))
}

/// Which observed cells of an instance are revealed to the encoder and which
/// are hidden targets during interpolation evaluation.
pub struct RevealPlan {
    pub revealed: Vec<(usize, usize)>,
    pub hidden: Vec<(usize, usize)>,
}

/// Deterministically partition the observed cells of `inst` into revealed
/// and hidden sets: `observed_fraction` of them (at least one, and leaving at
/// least one hidden) are revealed. `None` when fewer than 2 cells are
/// observed.
pub fn reveal_plan(
    inst: &AlignedInstance,
    observed_fraction: f64,
    seed: u64,
    idx: u64,
) -> Option<RevealPlan> {
    let d = inst.num_channels;
    let mut cells: Vec<(usize, usize)> = Vec::new();
    for row in 0..inst.len() {
        for c in 0..d {
            if inst.obs_mask[row * d + c] {
                cells.push((row, c));
            }
        }
    }
    if cells.len() < 2 {
        return None;
    }
    let k = ((observed_fraction * cells.len() as f64).floor() as usize)
        .max(1)
        .min(cells.len() - 1);
    let mut rng = substream_indexed(seed, "reveal", idx);
    cells.shuffle(&mut rng);
    let hidden = cells.split_off(k);
    Some(RevealPlan { revealed: cells, hidden })
}

/// Hide a fraction of each instance's observed cells, reconstruct them from
/// the revealed rest, and report the pooled MSE against a per-channel
/// revealed-mean baseline. Errors when `observed_fraction >= 1` (nothing
/// would be hidden) or when no instance is eligible.
pub fn evaluate_interpolation(
    params: &ModelParams,
    prepared: &Prepared,
    indices: &[usize],
    observed_fraction: f64,
    seed: u64,
) -> Result<InterpolationReport> {
    if observed_fraction >= 1.0 {
        return Err(Error::config(
            "interpolation evaluation needs observed_fraction < 1: no hidden targets",
        ));
    }
    if observed_fraction <= 0.0 {
        return Err(Error::config("observed_fraction must be positive"));
    }
    let mut sq_model = 0.0;
    let mut sq_base = 0.0;
    let mut cells = 0usize;
    let mut evaluated = 0usize;
    let mut skipped = 0usize;
    for &idx in indices {
        let inst = &prepared.aligned[idx];
        let d = inst.num_channels;
        let Some(plan) = reveal_plan(inst, observed_fraction, seed, idx as u64) else {
            skipped += 1;
            continue;
        };
        let mut visible = vec![false; inst.len() * d];
        for &(row, c) in &plan.revealed {
            visible[row * d + c] = true;
        }
        let xhat = predict_values(params, prepared, inst, &visible, &inst.grid);

        let mut channel_sum = vec![0.0; d];
        let mut channel_n = vec![0usize; d];
        for &(row, c) in &plan.revealed {
            channel_sum[c] += inst.values[row * d + c];
            channel_n[c] += 1;
        }
        let channel_mean: Vec<f64> = (0..d)
            .map(|c| if channel_n[c] > 0 { channel_sum[c] / channel_n[c] as f64 } else { 0.0 })
            .collect();

        for &(row, c) in &plan.hidden {
            let truth = inst.values[row * d + c];
            sq_model += (xhat[row * d + c] - truth).powi(2);
            sq_base += (channel_mean[c] - truth).powi(2);
            cells += 1;
        }
        evaluated += 1;
    }
    if evaluated == 0 || cells == 0 {
        return Err(Error::data("no instances eligible for interpolation evaluation"));
    }
    Ok(InterpolationReport {
        mse: sq_model / cells as f64,
        baseline_mse: sq_base / cells as f64,
        evaluated_instances: evaluated,
        skipped_instances: skipped,
        hidden_cells: cells,
    })
}

/// Forecast the first `horizon` grid times at or after the split from what
/// was observed before it; pooled MSE over observed target cells against a
/// per-channel last-observed-value baseline.
pub fn evaluate_forecast(
    params: &ModelParams,
    prepared: &Prepared,
    indices: &[usize],
    split: f64,
    horizon: usize,
) -> Result<ForecastReport> {
    let mut sq_model = 0.0;
    let mut sq_base = 0.0;
    let mut cells = 0usize;
    let mut evaluated = 0usize;
    let mut skipped = 0usize;
    for &idx in indices {
        let inst = &prepared.aligned[idx];
        let d = inst.num_channels;
        let Some(fc) = forecast_setup(inst, split, horizon) else {
            skipped += 1;
            continue;
        };
        let xhat = predict_values(params, prepared, inst, &fc.visible, &fc.target_times);

        // Last observed value per channel among the visible cells.
        let mut last = vec![0.0; d];
        let mut seen = vec![false; d];
        for row in 0..inst.len() {
            for c in 0..d {
                if fc.visible[row * d + c] {
                    last[c] = inst.values[row * d + c];
                    seen[c] = true;
                }
            }
        }
        let _ = &seen;

        for (ti, _row) in fc.target_rows.iter().enumerate() {
            for c in 0..d {
                if fc.valid[ti * d + c] {
                    let truth = fc.target_values[ti * d + c];
                    sq_model += (xhat[ti * d + c] - truth).powi(2);
                    sq_base += (last[c] - truth).powi(2);
                    cells += 1;
                }
            }
        }
        evaluated += 1;
    }
    if evaluated == 0 || cells == 0 {
        return Err(Error::data("no instances eligible for forecast evaluation"));
    }
    Ok(ForecastReport {
        mse: sq_model / cells as f64,
        baseline_mse: sq_base / cells as f64,
        evaluated_instances: evaluated,
        skipped_instances: skipped,
    })
}

/// Estimate and write both data-driven correlation matrices for the config's
/// training split; returns the artifact file names.
pub fn corr_dump(config: &RunConfig, out_dir: &Path) -> Result<Vec<String>> {
    config.validate()?;
    std::fs::create_dir_all(out_dir)
        .map_err(|e| Error::config(format!("cannot create {:?}: {}", out_dir, e)))?;
    let raw = load_dataset(config)?;
    let split = data::split(&raw, split_ratios(config), config.seed)?;
    if split.train.is_empty() {
        return Err(Error::data("training split is empty"));
    }
    let train_subset = raw.subset(&split.train);
    let mut files = Vec::new();
    let lsp = data_driven_corr(CorrelationKind::LspDtw, &train_subset)?;
    files.extend(report::dump_correlation(out_dir, "corr_lspdtw", &lsp)?);
    let idtw = data_driven_corr(CorrelationKind::IDtw, &train_subset)?;
    files.extend(report::dump_correlation(out_dir, "corr_idtw", &idtw)?);
    Ok(files)
}
