use std::fs;
use std::path::{Path, PathBuf};

use sormamba::analysis::{
    bias_metric, channel_embeddings, correlation_preservation_report, efficiency_report, missingness_curve,
    permutation_robustness, random_permutations, Timing,
};
use sormamba::blocks::Direction;
use sormamba::checkpoint::Checkpoint;
use sormamba::data::{chronological_split, dataset_channel_stats, make_windows, DataSplits, RawSeries, Split};
use sormamba::model::{ModelConfig, SorMamba};
use sormamba::nn::ParamStore;
use sormamba::objectives::global_corr;
use sormamba::report::{write_csv, ExperimentReport, HorizonResult};
use sormamba::tensor::Tensor;
use sormamba::train::{self, evaluate as eval_test, PretrainTask};

use crate::config::RunConfig;
use crate::{AnalysisKind, CliError, Task};

fn prepare_out(cfg: &RunConfig) -> Result<PathBuf, CliError> {
    let dir = cfg.out_dir();
    fs::create_dir_all(&dir)
        .map_err(|e| CliError::Usage(format!("cannot create output directory {}: {e}", dir.display())))?;
    fs::write(dir.join("config.toml"), cfg.to_toml()).map_err(|e| CliError::Runtime(e.into()))?;
    Ok(dir)
}

fn splits(cfg: &RunConfig, series: &RawSeries, horizon: usize) -> Result<DataSplits, CliError> {
    make_windows(series, cfg.data.family, cfg.model.lookback, horizon).map_err(CliError::from_setup)
}

fn header(cols: &[&str]) -> Vec<String> {
    cols.iter().map(|s| s.to_string()).collect()
}

fn matrix_rows(t: &Tensor) -> Vec<Vec<String>> {
    let c = t.shape()[1];
    t.data()
        .chunks(c)
        .map(|r| r.iter().map(f64::to_string).collect())
        .collect()
}

pub fn prepare_data(cfg: &RunConfig) -> Result<PathBuf, CliError> {
    let series = cfg.load_series()?;
    let dir = prepare_out(cfg)?;
    let borders = chronological_split(series.len(), cfg.data.family).map_err(CliError::from_setup)?;
    let horizons = cfg.horizons();
    let mut cols = vec!["split", "start", "end", "rows", "lookback_windows"]
        .into_iter()
        .map(String::from)
        .collect::<Vec<_>>();
    cols.extend(horizons.iter().map(|h| format!("windows_h{h}")));
    let mut rows = vec![cols];
    let lb = borders.lookback_counts(cfg.model.lookback);
    let per_h: Vec<_> = horizons
        .iter()
        .map(|&h| borders.window_counts(cfg.model.lookback, h).map_err(CliError::from_setup))
        .collect::<Result<_, _>>()?;
    for (k, s) in Split::ALL.into_iter().enumerate() {
        let r = borders.range(s);
        let mut row = vec![
            s.as_str().to_string(),
            r.start.to_string(),
            r.end.to_string(),
            r.len().to_string(),
            lb[k].to_string(),
        ];
        row.extend(per_h.iter().map(|c| c[k].to_string()));
        rows.push(row);
    }
    write_csv(dir.join("summary.csv"), &rows)?;
    let (c, corr) = dataset_channel_stats(&series).map_err(CliError::from_setup)?;
    write_csv(
        dir.join("channels.csv"),
        &[
            header(&["name", "rows", "channels", "mean_abs_offdiag_corr"]),
            vec![series.name.clone(), series.len().to_string(), c.to_string(), corr.to_string()],
        ],
    )?;
    Ok(dir)
}

fn save_checkpoint(model: &SorMamba, path: &Path, stage: &str, parent: Option<&Path>) -> Result<(), CliError> {
    Checkpoint::from_model(model, stage, parent.map(|p| p.display().to_string())).save(path)?;
    Ok(())
}

fn finish_report(dir: &Path, name: &str, results: Vec<HorizonResult>) -> Result<PathBuf, CliError> {
    let report = ExperimentReport::new(name, results)?;
    report.write_jsonl(dir.join("report.jsonl"))?;
    report.write_summary_csv(dir.join("summary.csv"))?;
    Ok(dir.to_path_buf())
}

pub fn train(cfg: &RunConfig) -> Result<PathBuf, CliError> {
    let series = cfg.load_series()?;
    let dir = prepare_out(cfg)?;
    let mut results = Vec::new();
    for h in cfg.horizons() {
        let data = splits(cfg, &series, h)?;
        let mut model = SorMamba::new(cfg.model_for(h, series.channels()), cfg.train.seed)?;
        let stages = train::train_pipeline(&mut model, &data, &cfg.train)?;
        let (mse, mae) = eval_test(&model, &data.test, cfg.train.batch_size)?;
        let stage = stages.iter().map(|s| s.objective.as_str()).collect::<Vec<_>>().join("+");
        save_checkpoint(&model, &dir.join(format!("model_h{h}.json")), &stage, None)?;
        results.push(HorizonResult {
            horizon: h,
            seed: cfg.train.seed,
            test_mse: mse,
            test_mae: mae,
            params: model.count_parameters(),
            stages,
        });
    }
    finish_report(&dir, &cfg.name, results)
}

fn task_of(t: Task) -> PretrainTask {
    match t {
        Task::Ccm => PretrainTask::Ccm,
        Task::Mm => PretrainTask::Mm,
        Task::Rec => PretrainTask::Rec,
    }
}

pub fn pretrain(cfg: &RunConfig, task: Task) -> Result<PathBuf, CliError> {
    let series = cfg.load_series()?;
    let dir = prepare_out(cfg)?;
    let h = cfg.horizons()[0];
    let data = splits(cfg, &series, h)?;
    let mut model = SorMamba::new(cfg.model_for(h, series.channels()), cfg.train.seed)?;
    let global = if cfg.train.ccm_global {
        Some(global_corr(&data.train.rows)?)
    } else {
        None
    };
    let task = task_of(task);
    let outcome = train::pretrain(&mut model, &data, task, &cfg.train, global)?;
    let name = outcome.objective.clone();
    save_checkpoint(&model, &dir.join(format!("pretrain_{name}.json")), &format!("pretrain-{name}"), None)?;
    fs::write(
        dir.join("report.jsonl"),
        format!("{}\n", serde_json::to_string(&outcome).map_err(sormamba::Error::from)?),
    )
    .map_err(|e| CliError::Runtime(e.into()))?;
    let ratio = if task == PretrainTask::Mm {
        cfg.train.mask_ratio.to_string()
    } else {
        String::new()
    };
    write_csv(
        dir.join("summary.csv"),
        &[
            header(&["task", "mask_ratio", "initial_val", "best_val", "best_epoch", "epochs_run"]),
            vec![
                name,
                ratio,
                outcome.initial_val.to_string(),
                outcome.best_val.to_string(),
                outcome.best_epoch.to_string(),
                outcome.epochs.len().to_string(),
            ],
        ],
    )?;
    Ok(dir)
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint, CliError> {
    if !path.exists() {
        return Err(CliError::Usage(format!("checkpoint {} does not exist", path.display())));
    }
    Checkpoint::load(path).map_err(CliError::from_setup)
}

/// Model for horizon `h` carrying every non-head parameter of `ck`.
fn from_pretrained(cfg: &RunConfig, ck: &Checkpoint, h: usize, channels: usize) -> Result<SorMamba, CliError> {
    let model_cfg = ModelConfig {
        horizon: h,
        channels,
        ..ck.config.clone()
    };
    let mut model = SorMamba::new(model_cfg, cfg.train.seed)?;
    let mut store = ParamStore::new();
    for p in ck.params.iter().filter(|p| !p.name.starts_with("head.")) {
        store.add(
            p.name.clone(),
            Tensor::new(p.shape.clone(), p.data.clone()).map_err(CliError::from_setup)?,
        );
    }
    model.params.load_from(&store).map_err(CliError::from_setup)?;
    Ok(model)
}

pub fn adapt(cfg: &RunConfig, checkpoint: &Path, fine_tune: bool) -> Result<PathBuf, CliError> {
    let ck = load_checkpoint(checkpoint)?;
    let series = cfg.load_series()?;
    let dir = prepare_out(cfg)?;
    let stage = if fine_tune { "finetune" } else { "probe" };
    let mut results = Vec::new();
    for h in cfg.horizons() {
        let data = splits(cfg, &series, h)?;
        let mut model = from_pretrained(cfg, &ck, h, series.channels())?;
        let outcome = if fine_tune {
            train::fine_tune(&mut model, &data, &cfg.train)?
        } else {
            train::linear_probe(&mut model, &data, &cfg.train)?
        };
        let (mse, mae) = eval_test(&model, &data.test, cfg.train.batch_size)?;
        save_checkpoint(&model, &dir.join(format!("{stage}_h{h}.json")), stage, Some(checkpoint))?;
        results.push(HorizonResult {
            horizon: h,
            seed: cfg.train.seed,
            test_mse: mse,
            test_mae: mae,
            params: model.count_parameters(),
            stages: vec![outcome],
        });
    }
    fs::write(dir.join("lineage.txt"), format!("{stage} <- {}\n", checkpoint.display()))
        .map_err(|e| CliError::Runtime(e.into()))?;
    finish_report(&dir, &cfg.name, results)
}

pub fn evaluate(cfg: &RunConfig, checkpoint: &Path) -> Result<PathBuf, CliError> {
    let model = load_checkpoint(checkpoint)?.to_model().map_err(CliError::from_setup)?;
    let series = cfg.load_series()?;
    let dir = prepare_out(cfg)?;
    let data = splits(cfg, &series, model.config.horizon)?;
    let (mse, mae) = eval_test(&model, &data.test, cfg.train.batch_size).map_err(CliError::from_setup)?;
    let result = HorizonResult {
        horizon: model.config.horizon,
        seed: cfg.train.seed,
        test_mse: mse,
        test_mae: mae,
        params: model.count_parameters(),
        stages: Vec::new(),
    };
    finish_report(&dir, &cfg.name, vec![result])
}

fn model_or_init(cfg: &RunConfig, checkpoint: Option<&Path>, channels: usize) -> Result<SorMamba, CliError> {
    match checkpoint {
        Some(p) => load_checkpoint(p)?.to_model().map_err(CliError::from_setup),
        None => Ok(SorMamba::new(cfg.model_for(cfg.horizons()[0], channels), cfg.train.seed)?),
    }
}

fn write_embeddings(path: &Path, model: &SorMamba, data: &DataSplits, series: &RawSeries, window: usize) -> Result<(), CliError> {
    if window >= data.test.len() {
        return Err(CliError::Usage(format!("window {window} out of range 0..{}", data.test.len())));
    }
    let e = channel_embeddings(model, &data.test, window)?;
    let d = e.shape()[1];
    let mut cols = vec!["channel".to_string()];
    cols.extend((0..d).map(|i| format!("d{i}")));
    let mut rows = vec![cols];
    for (name, r) in series.channel_names.iter().zip(matrix_rows(&e)) {
        let mut row = vec![name.clone()];
        row.extend(r);
        rows.push(row);
    }
    write_csv(path, &rows)?;
    Ok(())
}

pub fn export_embeddings(cfg: &RunConfig, checkpoint: Option<&Path>, window: usize) -> Result<PathBuf, CliError> {
    let series = cfg.load_series()?;
    let model = model_or_init(cfg, checkpoint, series.channels())?;
    let dir = prepare_out(cfg)?;
    let data = splits(cfg, &series, model.config.horizon)?;
    write_embeddings(&dir.join("embeddings.csv"), &model, &data, &series, window)?;
    Ok(dir)
}

fn efficiency_configs(base: &ModelConfig) -> Vec<(String, ModelConfig)> {
    let variants = [
        ("uni", Direction::Unidirectional, false),
        ("uni+conv", Direction::Unidirectional, true),
        ("bi", Direction::Bidirectional, false),
        ("bi+conv", Direction::Bidirectional, true),
    ];
    variants
        .iter()
        .map(|&(l, d, c)| {
            (
                l.to_string(),
                ModelConfig {
                    direction: d,
                    conv: c,
                    ..base.clone()
                },
            )
        })
        .collect()
}

pub fn analyze(
    cfg: &RunConfig,
    kind: AnalysisKind,
    checkpoint: Option<&Path>,
    export_embeddings: bool,
) -> Result<PathBuf, CliError> {
    if kind == AnalysisKind::Efficiency {
        let dir = prepare_out(cfg)?;
        return efficiency(cfg, &dir);
    }
    let series = cfg.load_series()?;
    let c = series.channels();
    match kind {
        AnalysisKind::Bias => {
            let ck = checkpoint.ok_or_else(|| CliError::Usage("analyze bias requires --checkpoint".into()))?;
            let model = load_checkpoint(ck)?.to_model().map_err(CliError::from_setup)?;
            let dir = prepare_out(cfg)?;
            let data = splits(cfg, &series, model.config.horizon)?;
            let g = bias_metric(&model, &data.test, cfg.train.batch_size)?;
            write_csv(
                dir.join("bias.csv"),
                &[
                    header(&["mse_fwd", "mse_rev", "abs_gap", "rel_gap"]),
                    vec![g.mse_fwd.to_string(), g.mse_rev.to_string(), g.abs_gap.to_string(), g.rel_gap.to_string()],
                ],
            )?;
            Ok(dir)
        }
        AnalysisKind::Robustness => {
            let dir = prepare_out(cfg)?;
            let perms = random_permutations(c, cfg.analysis.permutations, cfg.analysis.permutation_seed);
            let model_cfg = cfg.model_for(cfg.horizons()[0], c);
            let r = permutation_robustness(&series, cfg.data.family, &model_cfg, &cfg.train, &perms, cfg.train.seed)
                .map_err(|e| match e {
                    sormamba::Error::Config(m) => CliError::Usage(m),
                    e => CliError::Runtime(e),
                })?;
            let mut rows = vec![header(&["run", "permutation", "test_mse", "final_reg_mean"])];
            for (i, ((p, m), reg)) in r.permutations.iter().zip(&r.test_mse).zip(&r.final_reg).enumerate() {
                let perm = p.iter().map(usize::to_string).collect::<Vec<_>>().join("-");
                let reg_mean = reg.iter().sum::<f64>() / reg.len().max(1) as f64;
                rows.push(vec![i.to_string(), perm, m.to_string(), reg_mean.to_string()]);
            }
            rows.push(vec!["mean".into(), String::new(), r.mean.to_string(), String::new()]);
            rows.push(vec!["std".into(), String::new(), r.std.to_string(), String::new()]);
            write_csv(dir.join("robustness.csv"), &rows)?;
            Ok(dir)
        }
        AnalysisKind::Correlation => {
            let model = model_or_init(cfg, checkpoint, c)?;
            let dir = prepare_out(cfg)?;
            let data = splits(cfg, &series, model.config.horizon)?;
            let r = correlation_preservation_report(
                &model,
                &data.test,
                cfg.analysis.max_windows,
                cfg.train.batch_size,
                cfg.train.ccm_metric,
            )?;
            write_csv(
                dir.join("correlation.csv"),
                &[
                    header(&["windows", "mean_distance"]),
                    vec![r.windows.to_string(), r.mean_distance.to_string()],
                ],
            )?;
            write_csv(dir.join("rx.csv"), &matrix_rows(&r.mean_rx))?;
            write_csv(dir.join("rz.csv"), &matrix_rows(&r.mean_rz))?;
            if export_embeddings {
                write_embeddings(&dir.join("embeddings.csv"), &model, &data, &series, 0)?;
            }
            Ok(dir)
        }
        AnalysisKind::Missingness => {
            let dir = prepare_out(cfg)?;
            let model_cfg = cfg.model_for(cfg.horizons()[0], c);
            let mut rows = vec![header(&["rate", "seed", "removed_cells", "test_mse", "test_mae"])];
            for &seed in &cfg.analysis.seeds {
                for r in missingness_curve(&series, cfg.data.family, &model_cfg, &cfg.train, &cfg.analysis.rates, seed)
                    .map_err(|e| match e {
                        sormamba::Error::Config(m) => CliError::Usage(m),
                        e => CliError::Runtime(e),
                    })?
                {
                    rows.push(vec![
                        r.rate.to_string(),
                        r.seed.to_string(),
                        r.removed_cells.to_string(),
                        r.test_mse.to_string(),
                        r.test_mae.to_string(),
                    ]);
                }
            }
            write_csv(dir.join("missingness.csv"), &rows)?;
            Ok(dir)
        }
        AnalysisKind::Efficiency => unreachable!(),
    }
}

fn efficiency(cfg: &RunConfig, dir: &Path) -> Result<PathBuf, CliError> {
    let timing = Timing {
        steps: cfg.analysis.timing_steps,
        batch_size: cfg.train.batch_size,
    };
    let local = efficiency_report(&efficiency_configs(&cfg.model_for(cfg.horizons()[0], cfg.model.channels)), Some(timing))?;
    let reference = efficiency_report(
        &efficiency_configs(&ModelConfig::traffic_reference(Direction::Unidirectional, false))
            .into_iter()
            .map(|(l, c)| (format!("traffic-reference {l}"), c))
            .collect::<Vec<_>>(),
        None,
    )?;
    let mut rows = vec![header(&[
        "config",
        "in_projector",
        "encoder_cd",
        "encoder_td",
        "out_projector",
        "total",
    ])];
    for r in local.iter().chain(&reference) {
        let c = &r.counts;
        rows.push(vec![
            r.label.clone(),
            c.in_projector.to_string(),
            c.encoder_cd.to_string(),
            c.encoder_td.to_string(),
            c.out_projector.to_string(),
            c.total.to_string(),
        ]);
    }
    write_csv(dir.join("efficiency.csv"), &rows)?;
    let mut timing_lines = String::new();
    for r in &local {
        timing_lines.push_str(&serde_json::to_string(r).map_err(sormamba::Error::from)?);
        timing_lines.push('\n');
    }
    fs::write(dir.join("efficiency_timing.jsonl"), timing_lines).map_err(|e| CliError::Runtime(e.into()))?;
    Ok(dir.to_path_buf())
}
