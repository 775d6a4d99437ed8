use std::fs::{self, File};
use std::io::Write;
use std::path::Path;

use serde::Serialize;

use super::config::RunConfig;
use crate::attention::{GateForm, GateLocation, GateStage};
use crate::diagnostics::{write_dilution_curve, write_layer_heatmap, MassProfile, Segment};
use crate::error::{RaveError, Result};
use crate::model::{
    evaluate, generate_task, greedy_decode, train, AttentionVariant, Checkpoint, EvalReport,
    TaskParams, ToyModel,
};

pub struct TrainOutcome {
    pub model: ToyModel,
    pub losses: Vec<f64>,
    pub eval: EvalReport,
}

/// Trains from scratch and evaluates on the held-out set.
pub fn train_and_eval(
    cfg: &RunConfig,
    mut progress: impl FnMut(usize, f64),
) -> Result<TrainOutcome> {
    let mut model = cfg.build_model()?;
    let losses = train(&mut model, &cfg.task, &cfg.train, &mut progress)?;
    let eval = evaluate(&model, &cfg.task, cfg.eval.num_examples, cfg.eval.seed)?;
    Ok(TrainOutcome {
        model,
        losses,
        eval,
    })
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = File::create(path).map_err(|e| RaveError::io(path, e))?;
    f.write_all(bytes).map_err(|e| RaveError::io(path, e))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|source| RaveError::Json {
        path: path.to_path_buf(),
        source,
    })?;
    text.push('\n');
    write_file(path, text.as_bytes())
}

fn segment_labels(task: &TaskParams) -> String {
    let n_img = 2 * task.num_pairs;
    let map = crate::diagnostics::SegmentMap::contiguous(task.num_sys, n_img, 1, task.answer_len);
    map.labels()
        .iter()
        .map(|s| s.short_name())
        .collect::<Vec<_>>()
        .join(" ")
}

#[derive(Serialize)]
struct TrainSidecar<'a> {
    command: &'static str,
    config: &'a RunConfig,
    segments: String,
    num_params: usize,
    last_train_loss: Option<f64>,
    eval: &'a EvalReport,
}

/// Writes `checkpoint.bin`, `loss.csv` and `run.json` into `out`. Nothing is
/// written unless training and evaluation succeed.
pub fn cmd_train(
    cfg: &RunConfig,
    out: &Path,
    progress: impl FnMut(usize, f64),
) -> Result<TrainOutcome> {
    let outcome = train_and_eval(cfg, progress)?;
    fs::create_dir_all(out).map_err(|e| RaveError::io(out, e))?;
    Checkpoint::from_model(&outcome.model, outcome.losses.len() as u64)
        .save(&out.join("checkpoint.bin"))?;

    let loss_path = out.join("loss.csv");
    let csv_err = |source| RaveError::Csv {
        path: loss_path.clone(),
        source,
    };
    let mut w = csv::Writer::from_path(&loss_path).map_err(csv_err)?;
    w.write_record(["step", "loss"]).map_err(csv_err)?;
    for (i, loss) in outcome.losses.iter().enumerate() {
        w.write_record([(i + 1).to_string(), loss.to_string()])
            .map_err(csv_err)?;
    }
    w.flush().map_err(|e| RaveError::io(&loss_path, e))?;

    let sidecar = TrainSidecar {
        command: "train",
        config: cfg,
        segments: segment_labels(&cfg.task),
        num_params: outcome.model.params.num_params(),
        last_train_loss: outcome.losses.last().copied(),
        eval: &outcome.eval,
    };
    write_json(&out.join("run.json"), &sidecar)?;
    Ok(outcome)
}

/// Greedy-decodes `cfg.trace.num_prompts` task prompts with attention capture
/// and returns one mass profile per prompt.
pub fn trace_profiles(model: &ToyModel, cfg: &RunConfig) -> Result<Vec<MassProfile>> {
    if cfg.task.answer_len == 0 {
        return Err(RaveError::Config("tracing needs answer_len >= 1".into()));
    }
    let batch = generate_task(
        &cfg.task,
        model.spec.vocab_size,
        cfg.trace.num_prompts,
        cfg.trace.seed,
    )?;
    batch
        .examples
        .iter()
        .map(|ex| {
            let dec = greedy_decode(
                model,
                ex.prompt(),
                &ex.segments.prompt_only(),
                cfg.task.answer_len,
                true,
            )?;
            let trace = dec.trace.as_ref().expect("trace requested");
            MassProfile::from_trace(trace, &dec.segments)
        })
        .collect()
}

#[derive(Serialize)]
struct TraceSidecar<'a> {
    command: &'static str,
    config: &'a RunConfig,
    checkpoint_step: u64,
    segments: String,
}

/// Writes `dilution.csv` and `heatmap_{sys,img,que,ans}.csv`, averaged over
/// the traced prompts. `cfg.model` must equal the checkpoint's spec.
pub fn cmd_trace(cfg: &RunConfig, checkpoint: Checkpoint, out: &Path) -> Result<MassProfile> {
    if cfg.model != checkpoint.spec {
        return Err(RaveError::Config(
            "model spec in config does not match the checkpoint".into(),
        ));
    }
    cfg.validate()?;
    let step = checkpoint.step;
    let model = checkpoint.into_model()?;
    let profile = MassProfile::average(&trace_profiles(&model, cfg)?)?;
    fs::create_dir_all(out).map_err(|e| RaveError::io(out, e))?;
    write_dilution_curve(&profile, &out.join("dilution.csv"))?;
    for seg in Segment::ALL {
        write_layer_heatmap(
            &profile,
            seg,
            &out.join(format!("heatmap_{}.csv", seg.short_name())),
        )?;
    }
    let sidecar = TraceSidecar {
        command: "trace",
        config: cfg,
        checkpoint_step: step,
        segments: segment_labels(&cfg.task),
    };
    write_json(&out.join("trace.json"), &sidecar)?;
    Ok(profile)
}

/// Axes of the variant grid; the grid is their cartesian product.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Grid {
    pub locations: Vec<GateLocation>,
    pub forms: Vec<GateForm>,
    pub head_ratios: Vec<f64>,
    pub stages: Vec<GateStage>,
}

impl Grid {
    pub fn full() -> Self {
        Grid {
            locations: vec![GateLocation::PreSoftmax, GateLocation::PostSoftmax],
            forms: vec![GateForm::Additive, GateForm::Multiplicative],
            head_ratios: vec![0.25, 0.5, 0.75, 1.0],
            stages: vec![GateStage::PrefillAndDecode, GateStage::DecodeOnly],
        }
    }

    pub fn len(&self) -> usize {
        self.locations.len() * self.forms.len() * self.head_ratios.len() * self.stages.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// RAVE configs for every grid cell, in axis order.
    pub fn variants(&self, base: &RunConfig) -> Vec<RunConfig> {
        let mut out = Vec::with_capacity(self.len());
        for &location in &self.locations {
            for &form in &self.forms {
                for &head_ratio in &self.head_ratios {
                    for &stage in &self.stages {
                        let mut cfg = base.clone();
                        cfg.model.variant = AttentionVariant::Rave;
                        let a = &mut cfg.model.attention;
                        a.location = location;
                        a.form = form;
                        a.head_ratio = head_ratio;
                        a.stage = stage;
                        out.push(cfg);
                    }
                }
            }
        }
        out
    }
}

pub fn location_name(l: GateLocation) -> &'static str {
    match l {
        GateLocation::PreSoftmax => "pre",
        GateLocation::PostSoftmax => "post",
    }
}

pub fn form_name(f: GateForm) -> &'static str {
    match f {
        GateForm::Additive => "add",
        GateForm::Multiplicative => "mul",
    }
}

pub fn stage_name(s: GateStage) -> &'static str {
    match s {
        GateStage::PrefillAndDecode => "prefill-decode",
        GateStage::DecodeOnly => "decode-only",
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRow {
    pub name: String,
    pub location: String,
    pub form: String,
    pub head_ratio: f64,
    pub stage: String,
    pub final_loss: Option<f64>,
    pub accuracy: Option<f64>,
    pub mean_alpha_img: Option<f64>,
    pub status: String,
    pub message: String,
}

impl AblationRow {
    pub fn is_ok(&self) -> bool {
        self.status == "ok"
    }
}

/// Trains and evaluates one row.
pub fn ablation_row(cfg: &RunConfig) -> AblationRow {
    let a = &cfg.model.attention;
    let (loc, form, stage) = (
        location_name(a.location),
        form_name(a.form),
        stage_name(a.stage),
    );
    let mut row = AblationRow {
        name: format!("{loc}/{form}/p={}/{stage}", a.head_ratio),
        location: loc.into(),
        form: form.into(),
        head_ratio: a.head_ratio,
        stage: stage.into(),
        final_loss: None,
        accuracy: None,
        mean_alpha_img: None,
        status: "ok".into(),
        message: String::new(),
    };
    match train_and_eval(cfg, |_, _| {}) {
        Ok(o) => {
            row.final_loss = Some(o.eval.loss);
            row.accuracy = Some(o.eval.accuracy);
            row.mean_alpha_img = Some(o.eval.mean_alpha_img);
        }
        Err(e) => {
            row.status = "failed".into();
            row.message = e.to_string();
        }
    }
    row
}

#[derive(Serialize)]
struct AblateSidecar<'a> {
    command: &'static str,
    config: &'a RunConfig,
    grid: &'a Grid,
}

/// Runs every grid cell and writes `results.csv` plus `ablate.json`. A
/// failing cell becomes a `failed` row; the remaining cells still run.
/// `progress` sees `(index, total, row)` after each cell.
pub fn cmd_ablate(
    base: &RunConfig,
    grid: &Grid,
    out: &Path,
    mut progress: impl FnMut(usize, usize, &AblationRow),
) -> Result<Vec<AblationRow>> {
    base.validate()?;
    if grid.is_empty() {
        return Err(RaveError::Config("ablation grid is empty".into()));
    }
    let variants = grid.variants(base);
    let mut rows = Vec::with_capacity(variants.len());
    for (i, cfg) in variants.iter().enumerate() {
        let row = ablation_row(cfg);
        progress(i + 1, variants.len(), &row);
        rows.push(row);
    }
    fs::create_dir_all(out).map_err(|e| RaveError::io(out, e))?;
    let path = out.join("results.csv");
    let csv_err = |source| RaveError::Csv {
        path: path.clone(),
        source,
    };
    let mut w = csv::Writer::from_path(&path).map_err(csv_err)?;
    for row in &rows {
        w.serialize(row).map_err(csv_err)?;
    }
    w.flush().map_err(|e| RaveError::io(&path, e))?;
    write_json(
        &out.join("ablate.json"),
        &AblateSidecar {
            command: "ablate",
            config: base,
            grid,
        },
    )?;
    Ok(rows)
}
