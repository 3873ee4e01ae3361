use std::collections::BTreeMap;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sfcnn::baseline::BaselineSpec;
use sfcnn::ingest::{parse_logs_with_header_names, Level, LogTable};
use sfcnn::model::{
    gradcheck, load_model, random_tiny_architecture, save_model, tiny_architecture,
    GradcheckOptions, ModelFile,
};
use sfcnn::pipeline::{
    baseline_rows, default_forecast_start, evaluate_rows, load_table, predict_rows, prepare,
    resolve_forecast_start, sweep, Metrics, PipelineError, PredictionRow, RunConfig,
};
use sfcnn::synth::generate;
use sfcnn::train::transfer_train;
use thiserror::Error;

use crate::args::{
    BaselineKind, EvaluateArgs, GradcheckArgs, PredictArgs, SweepArgs, SynthArgs, TrainArgs,
};

#[derive(Debug, Error)]
pub enum Failure {
    #[error("{0}")]
    Validation(String),
    #[error("{0}")]
    Runtime(String),
}

impl Failure {
    pub fn exit_code(&self) -> i32 {
        match self {
            Failure::Validation(_) => 1,
            Failure::Runtime(_) => 2,
        }
    }
}

impl From<PipelineError> for Failure {
    fn from(e: PipelineError) -> Self {
        if e.is_validation() {
            Failure::Validation(e.to_string())
        } else {
            Failure::Runtime(e.to_string())
        }
    }
}

fn runtime(e: impl std::fmt::Display) -> Failure {
    Failure::Runtime(e.to_string())
}

fn load_config(path: Option<&Path>) -> Result<RunConfig, Failure> {
    match path {
        None => Ok(RunConfig::default()),
        Some(p) => RunConfig::load(p).map_err(|e| Failure::Validation(e.to_string())),
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), Failure> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| runtime(format!("{}: {e}", dir.display())))?;
    }
    fs::write(path, bytes).map_err(|e| runtime(format!("{}: {e}", path.display())))
}

fn emit(out: Option<&Path>, bytes: &[u8]) -> Result<(), Failure> {
    match out {
        Some(p) => write_file(p, bytes),
        None => io::stdout().write_all(bytes).map_err(runtime),
    }
}

fn required<'a>(value: &'a Option<PathBuf>, flag: &str) -> Result<&'a Path, Failure> {
    value.as_deref().ok_or_else(|| {
        Failure::Validation(format!(
            "--{flag} is required (flag or config paths.{flag})"
        ))
    })
}

fn table_from(config: &RunConfig) -> Result<LogTable, Failure> {
    let logs = required(&config.paths.logs, "logs")?;
    let items = required(&config.paths.items, "items")?;
    Ok(load_table(logs, items)?)
}

pub fn synth(args: &SynthArgs) -> Result<(), Failure> {
    let mut config = load_config(args.config.config.as_deref())?;
    args.synth.apply(&mut config);
    config
        .synth
        .validate()
        .map_err(|e| Failure::Validation(e.to_string()))?;
    let out = generate(&config.synth).map_err(runtime)?;
    out.write_to(&args.out)
        .map_err(|e| runtime(format!("{}: {e}", args.out.display())))?;
    let s = &config.synth;
    println!(
        "wrote {} log rows ({} items x {} regions x {} days) to {}",
        out.num_rows(),
        s.num_items,
        s.num_regions,
        s.num_days,
        args.out.display()
    );
    Ok(())
}

pub fn model_file_name(region: Option<&str>) -> String {
    match region {
        Some(r) => format!("model_{r}.sfcnn"),
        None => "model_pretrained.sfcnn".to_string(),
    }
}

pub fn train(args: &TrainArgs) -> Result<(), Failure> {
    let mut config = load_config(args.config.config.as_deref())?;
    args.data.apply(&mut config);
    args.model.apply(&mut config);
    if args.out.is_some() {
        config.paths.outputs.clone_from(&args.out);
    }
    config.validate()?;
    let out_dir = required(&config.paths.outputs, "out")?.to_path_buf();
    let table = table_from(&config)?;

    let horizon = config.data.horizon;
    let origin = resolve_forecast_start(&table, config.forecast_start, horizon)?;
    let data = prepare(&table, &config.data, origin, config.train.beta)?;
    let arch = config.architecture(table.num_indicators());
    let mut log = String::new();
    let set = transfer_train(&data.train, &arch, &config.train, &mut |event| {
        println!("{event}");
        log.push_str(&event.to_string());
        log.push('\n');
    })
    .map_err(|e| Failure::from(PipelineError::from(e)))?;

    let file_for = |params| ModelFile {
        params,
        norm: data.stats.clone(),
        indicator_names: table.indicator_names().to_vec(),
        slot_order: Level::frame_slots(config.data.include_supplier),
        horizon,
    };
    fs::create_dir_all(&out_dir).map_err(|e| runtime(format!("{}: {e}", out_dir.display())))?;
    if let Some(pre) = &set.pretrained {
        save_model(
            &file_for(pre.params.clone()),
            out_dir.join(model_file_name(None)),
        )
        .map_err(runtime)?;
    }
    for (region, model) in &set.models {
        save_model(
            &file_for(model.params.clone()),
            out_dir.join(model_file_name(Some(region))),
        )
        .map_err(runtime)?;
    }
    for (region, reason) in &set.failed {
        eprintln!("warning: region {region} failed: {reason}");
    }
    write_file(&out_dir.join("train.log"), log.as_bytes())?;
    let echo = serde_json::to_string_pretty(&config).map_err(runtime)?;
    write_file(&out_dir.join("config.json"), echo.as_bytes())?;
    eprintln!(
        "saved {} regional models to {}",
        set.models.len(),
        out_dir.display()
    );
    Ok(())
}

/// Models keyed by region; a single file serves every region.
struct ModelSource {
    single: Option<ModelFile>,
    dir: Option<PathBuf>,
    loaded: BTreeMap<String, ModelFile>,
}

impl ModelSource {
    fn open(path: &Path, table: &LogTable) -> Result<Self, Failure> {
        if path.is_dir() {
            let mut loaded = BTreeMap::new();
            for region in table.regions() {
                let file = path.join(model_file_name(Some(&region)));
                let model =
                    load_model(&file).map_err(|e| runtime(format!("{}: {e}", file.display())))?;
                loaded.insert(region, model);
            }
            Ok(Self {
                single: None,
                dir: Some(path.to_path_buf()),
                loaded,
            })
        } else {
            let model =
                load_model(path).map_err(|e| runtime(format!("{}: {e}", path.display())))?;
            Ok(Self {
                single: Some(model),
                dir: None,
                loaded: BTreeMap::new(),
            })
        }
    }

    fn get(&self, region: &str) -> Result<&ModelFile, PipelineError> {
        match &self.single {
            Some(m) => Ok(m),
            None => self.loaded.get(region).ok_or_else(|| {
                PipelineError::Config(format!(
                    "no model for region {region} in {}",
                    self.dir.as_deref().unwrap_or(Path::new("?")).display()
                ))
            }),
        }
    }

    fn horizon(&self) -> Option<usize> {
        self.single
            .as_ref()
            .or_else(|| self.loaded.values().next())
            .map(|m| m.horizon)
    }
}

fn model_rows(
    path: &Path,
    table: &LogTable,
    forecast_start: Option<chrono::NaiveDate>,
) -> Result<Vec<PredictionRow>, Failure> {
    let source = ModelSource::open(path, table)?;
    let horizon = source
        .horizon()
        .ok_or_else(|| Failure::Runtime("the data has no regions".into()))?;
    let origin = resolve_forecast_start(table, forecast_start, horizon)?;
    Ok(predict_rows(table, origin, |r| source.get(r))?)
}

pub fn rows_to_csv(rows: &[PredictionRow]) -> Result<Vec<u8>, Failure> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for row in rows {
        w.serialize(row).map_err(runtime)?;
    }
    if rows.is_empty() {
        w.write_record([
            "item_id",
            "region_id",
            "forecast_start",
            "horizon",
            "y_pred",
            "y_true",
        ])
        .map_err(runtime)?;
    }
    w.into_inner().map_err(runtime)
}

pub fn predict(args: &PredictArgs) -> Result<(), Failure> {
    let mut config = load_config(args.config.config.as_deref())?;
    for (slot, flag) in [
        (&mut config.paths.logs, &args.logs),
        (&mut config.paths.items, &args.items),
        (&mut config.paths.model, &args.model),
    ] {
        if flag.is_some() {
            slot.clone_from(flag);
        }
    }
    let start = args.forecast_start.or(config.forecast_start);
    let model = required(&config.paths.model, "model")?.to_path_buf();
    let table = table_from(&config)?;
    let rows = model_rows(&model, &table, start)?;
    emit(args.out.as_deref(), &rows_to_csv(&rows)?)
}

fn read_rows(path: &Path) -> Result<Vec<PredictionRow>, Failure> {
    let mut r =
        csv::Reader::from_path(path).map_err(|e| runtime(format!("{}: {e}", path.display())))?;
    r.deserialize()
        .collect::<Result<Vec<PredictionRow>, _>>()
        .map_err(|e| runtime(format!("{}: {e}", path.display())))
}

pub fn evaluate(args: &EvaluateArgs) -> Result<(), Failure> {
    let mut config = load_config(args.config.config.as_deref())?;
    for (slot, flag) in [
        (&mut config.paths.logs, &args.logs),
        (&mut config.paths.items, &args.items),
        (&mut config.paths.model, &args.model),
    ] {
        if flag.is_some() {
            slot.clone_from(flag);
        }
    }
    if args.predictions.is_empty() && config.paths.model.is_none() && args.baselines.is_empty() {
        return Err(Failure::Validation(
            "nothing to evaluate: pass --predictions, --model or --baselines".into(),
        ));
    }
    let mut names = args.method.iter();
    let mut metrics = Metrics::default();
    for path in &args.predictions {
        let name = names.next().cloned().unwrap_or_else(|| {
            path.file_stem()
                .map_or("predictions".into(), |s| s.to_string_lossy().into_owned())
        });
        metrics
            .methods
            .insert(name, evaluate_rows(&read_rows(path)?)?);
    }
    let start = args.forecast_start.or(config.forecast_start);
    let mut table = None;
    let mut model_horizon = None;
    if let Some(model) = config.paths.model.clone() {
        let t = table_from(&config)?;
        let rows = model_rows(&model, &t, start)?;
        model_horizon = rows.first().map(|r| r.horizon);
        let name = names.next().cloned().unwrap_or_else(|| "model".into());
        metrics.methods.insert(name, evaluate_rows(&rows)?);
        table = Some(t);
    }
    if !args.baselines.is_empty() {
        let t = match table {
            Some(t) => t,
            None => table_from(&config)?,
        };
        let horizon = args
            .horizon
            .or(model_horizon)
            .unwrap_or(config.data.horizon);
        if horizon == 0 {
            return Err(Failure::Validation("--horizon must be >= 1".into()));
        }
        let origin = match start {
            Some(_) => resolve_forecast_start(&t, start, horizon)?,
            None => default_forecast_start(&t, horizon)?,
        };
        for kind in &args.baselines {
            let spec = match kind {
                BaselineKind::Naive => BaselineSpec::NaiveLastWindow,
                BaselineKind::MovingAverage => BaselineSpec::MovingAverage {
                    weeks: args.ma_weeks,
                },
                BaselineKind::ArLs => BaselineSpec::ArLs {
                    order: args.ar_order,
                },
            };
            let rows = baseline_rows(&t, origin, horizon, spec)?;
            metrics.methods.insert(spec.name(), evaluate_rows(&rows)?);
        }
    }
    let mut json = serde_json::to_vec_pretty(&metrics).map_err(runtime)?;
    json.push(b'\n');
    emit(args.out.as_deref(), &json)
}

pub fn gradcheck_cmd(args: &GradcheckArgs) -> Result<(), Failure> {
    if args.tolerance.is_nan() || args.tolerance <= 0.0 {
        return Err(Failure::Validation("--tolerance must be positive".into()));
    }
    let archs = match args.random {
        None => vec![tiny_architecture()],
        Some(n) => {
            let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
            (0..n).map(|_| random_tiny_architecture(&mut rng)).collect()
        }
    };
    let mut worst: f64 = 0.0;
    let mut ok = true;
    for (i, arch) in archs.iter().enumerate() {
        let opts = GradcheckOptions {
            seed: args.seed.wrapping_add(i as u64),
            tolerance: args.tolerance,
            flip_sign: args.inject_sign_flip,
            ..Default::default()
        };
        let report = gradcheck(arch, &opts).map_err(runtime)?;
        println!(
            "arch={i} slots={} rows={} window={} filters={:?} pools={:?} maps={:?} dense={}",
            arch.num_slots,
            arch.rows,
            arch.window,
            arch.filter_sizes,
            arch.pool_sizes,
            arch.maps,
            arch.dense_dim
        );
        for t in &report.tensors {
            println!(
                "tensor={} max_rel_error={:.3e} checked={} skipped={}",
                t.name, t.max_rel_error, t.checked, t.skipped
            );
        }
        worst = worst.max(report.max_rel_error());
        ok &= report.passed();
    }
    if ok {
        println!(
            "gradcheck passed: max_rel_error={worst:.3e} tolerance={:.1e}",
            args.tolerance
        );
        Ok(())
    } else {
        Err(Failure::Runtime(format!(
            "gradcheck failed: max_rel_error={worst:.3e} tolerance={:.1e}",
            args.tolerance
        )))
    }
}

pub fn sweep_cmd(args: &SweepArgs) -> Result<(), Failure> {
    let mut config = load_config(args.config.config.as_deref())?;
    args.data.apply(&mut config);
    args.model.apply(&mut config);
    config.validate()?;
    let table = if config.paths.logs.is_some() || config.paths.items.is_some() {
        table_from(&config)?
    } else {
        config
            .synth
            .validate()
            .map_err(|e| Failure::Validation(e.to_string()))?;
        let out = generate(&config.synth).map_err(runtime)?;
        parse_logs_with_header_names(out.logs_csv.as_bytes(), out.items_csv.as_bytes())
            .map_err(runtime)?
    };
    let rows = sweep(&table, &config, args.param.into(), &args.grid, &mut |e| {
        eprintln!("{e}")
    })?;
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["param", "value", "region", "mse"])
        .map_err(runtime)?;
    for row in &rows {
        if row.mse.is_none() {
            eprintln!("warning: skipped {}={}", row.param.name(), row.value);
        }
        w.write_record([
            row.param.name().to_string(),
            row.value.to_string(),
            row.region.clone(),
            row.mse.map_or(String::new(), |m| m.to_string()),
        ])
        .map_err(runtime)?;
    }
    emit(args.out.as_deref(), &w.into_inner().map_err(runtime)?)
}
