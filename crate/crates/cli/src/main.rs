//! Command-line surface for the counting pipeline: dataset fixtures,
//! curation, threshold calibration, single-sample counting, evaluation,
//! density binning and finetuning.
//!
//! Exit codes: 0 on success, 1 for usage or configuration problems, 2 for
//! data or invariant errors.

mod config;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};

use skycount::curation::{self, CountingSample, CurationConfig, SplitManifest};
use skycount::encoders::{
    encode_image, fixture_text_encoder, load_cv_pyramid, load_features, tokenize, ExemplarBoxes,
    LoadedFeature,
};
use skycount::error::Error as CoreError;
use skycount::evaluation::{
    adaptive_threshold, calibrate_threshold, default_grid, export_confidence_map, per_class_report,
    quantile_bins, write_density_csv, CalibrationResult, EvalMode,
};
use skycount::fixtures::{generate_dataset, FixtureSpec, FIXTURE_CLASSES};
use skycount::io::{self, round6};
use skycount::model::{default_frozen, load_checkpoint, save_checkpoint, ModelParams};
use skycount::pipeline::{count_from_similarity, forward, ForwardInputs, ForwardOutput};
use skycount::training::{finetune_step, OptimizerState, TrainSample};

use config::{PathsSection, RunConfig};

#[derive(Parser)]
#[command(
    name = "skycount",
    version,
    about = "Open-vocabulary object counting for aerial imagery"
)]
struct Cli {
    /// Run configuration JSON; flags override individual fields.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Exemplar count used when curating (0 for zero-shot datasets).
    #[arg(long, global = true)]
    shots: Option<usize>,
    /// Fixed confidence threshold; bypasses calibration.
    #[arg(long, global = true)]
    threshold: Option<f64>,
    /// Conditioning mode: zero-shot or few-shot.
    #[arg(long, global = true, value_parser = parse_mode)]
    mode: Option<EvalMode>,
    /// Output directory; overrides paths.out_dir.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a seeded synthetic dataset with a ready-to-run config.
    Fixtures {
        #[arg(long, default_value_t = 20)]
        images: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
    },
    /// Convert annotations into single-class counting samples and splits.
    Curate,
    /// Grid-search counting thresholds on the calibration holdout.
    Calibrate,
    /// Count a single curated sample.
    Count {
        #[arg(long)]
        sample: String,
        /// Also write the confidence map as CSV and PGM.
        #[arg(long)]
        export_maps: bool,
    },
    /// Count every sample of a split and write the MAE/RMSE report.
    Eval {
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Bin evaluation errors by ground-truth count (quantile bins).
    Bins {
        #[arg(long, default_value_t = 15)]
        bins: usize,
    },
    /// Finetune fusion and decoder parameters on the train split.
    Train {
        #[arg(long, default_value_t = 50)]
        steps: usize,
    },
}

fn parse_mode(s: &str) -> Result<EvalMode, String> {
    match s {
        "zero-shot" => Ok(EvalMode::ZeroShot),
        "few-shot" => Ok(EvalMode::FewShot),
        other => Err(format!("unknown mode {other:?}, expected zero-shot or few-shot")),
    }
}

enum CliError {
    Usage(String),
    Data(CoreError),
}

impl From<CoreError> for CliError {
    fn from(e: CoreError) -> Self {
        CliError::Data(e)
    }
}

type CliResult<T> = Result<T, CliError>;

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(CliError::Data(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

/// Loaded configuration plus resolved locations for one invocation.
struct Ctx {
    cfg: RunConfig,
    /// Directory the config file lives in; relative paths resolve here.
    base: PathBuf,
    out: PathBuf,
    threshold: Option<f64>,
}

impl Ctx {
    fn load(cli: &Cli) -> CliResult<Self> {
        let (mut cfg, base) = match &cli.config {
            Some(path) => {
                let cfg: RunConfig = io::read_json(path)
                    .map_err(|e| usage(format!("cannot load config: {e}")))?;
                let base = path.parent().unwrap_or(Path::new(".")).to_path_buf();
                (cfg, base)
            }
            None => (RunConfig::default(), PathBuf::from(".")),
        };
        if let Some(seed) = cli.seed {
            cfg.seed = seed;
        }
        if let Some(shots) = cli.shots {
            cfg.shots = shots;
        }
        if let Some(mode) = cli.mode {
            cfg.mode = mode;
        }
        // No exemplars means text-only conditioning: the zero-shot path,
        // with adaptive thresholding active.
        if cfg.shots == 0 {
            cfg.mode = EvalMode::ZeroShot;
        }
        if let Some(t) = cli.threshold {
            if !(0.0..=1.0).contains(&t) {
                return Err(usage(format!("--threshold {t} must lie in [0, 1]")));
            }
        }
        cfg.model
            .validate()
            .map_err(|e| usage(format!("bad model config: {e}")))?;
        let out = match (&cli.out, &cfg.paths.out_dir) {
            (Some(o), _) => o.clone(),
            (None, Some(o)) => {
                if o.is_absolute() {
                    o.clone()
                } else {
                    base.join(o)
                }
            }
            (None, None) => return Err(usage("no output directory: pass --out or set paths.out_dir")),
        };
        // Lexical cleanup: drops "." components such as the self-referential
        // out_dir a generated dataset config carries.
        let out: PathBuf = out.components().collect();
        Ok(Ctx {
            cfg,
            base,
            out,
            threshold: cli.threshold,
        })
    }

    fn resolve(&self, p: &Path) -> PathBuf {
        self.cfg.resolve(&self.base, p)
    }

    fn ensure_out(&self) -> CliResult<()> {
        std::fs::create_dir_all(&self.out)
            .map_err(|e| CliError::Data(CoreError::Io {
                path: self.out.clone(),
                source: e,
            }))
    }

    /// Records the effective configuration in the output directory.
    fn echo_config(&self) -> CliResult<()> {
        io::write_json(&self.out.join("config.json"), &self.cfg)?;
        Ok(())
    }

    fn curated_path(&self) -> PathBuf {
        self.out.join("curated.jsonl")
    }

    fn manifest_path(&self) -> PathBuf {
        self.out.join("manifest.json")
    }

    fn calibration_path(&self) -> PathBuf {
        self.out.join("calibration.json")
    }

    fn load_curated(&self) -> CliResult<Vec<CountingSample>> {
        let path = self.curated_path();
        if !path.exists() {
            return Err(usage(format!(
                "{} not found: run `skycount curate` first",
                path.display()
            )));
        }
        Ok(curation::read_curated(&path)?)
    }

    fn load_manifest(&self) -> CliResult<SplitManifest> {
        let path = self.manifest_path();
        if !path.exists() {
            return Err(usage(format!(
                "{} not found: run `skycount curate` first",
                path.display()
            )));
        }
        Ok(io::read_json(&path)?)
    }

    fn load_calibration(&self) -> CliResult<CalibrationResult> {
        let path = self.calibration_path();
        if !path.exists() {
            return Err(usage(format!(
                "{} not found: run `skycount calibrate` first or pass --threshold",
                path.display()
            )));
        }
        Ok(io::read_json(&path)?)
    }

    fn load_model(&self) -> CliResult<ModelParams> {
        match &self.cfg.paths.checkpoints {
            Some(dir) => {
                let dir = self.resolve(dir);
                if !dir.join("manifest.json").exists() {
                    return Err(usage(format!(
                        "checkpoint directory {} has no manifest.json",
                        dir.display()
                    )));
                }
                let (params, _) = load_checkpoint(&dir, &self.cfg.model)?;
                Ok(params)
            }
            None => Ok(ModelParams::init(&self.cfg.model, self.cfg.seed)?),
        }
    }
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Fixtures { images, size } => cmd_fixtures(&cli, images, size),
        Command::Curate => cmd_curate(&Ctx::load(&cli)?),
        Command::Calibrate => cmd_calibrate(&Ctx::load(&cli)?),
        Command::Count {
            ref sample,
            export_maps,
        } => cmd_count(&Ctx::load(&cli)?, sample, export_maps),
        Command::Eval { ref split } => cmd_eval(&Ctx::load(&cli)?, split),
        Command::Bins { bins } => cmd_bins(&Ctx::load(&cli)?, bins),
        Command::Train { steps } => cmd_train(&Ctx::load(&cli)?, steps),
    }
}

fn cmd_fixtures(cli: &Cli, images: usize, size: usize) -> CliResult<()> {
    let out = cli
        .out
        .clone()
        .ok_or_else(|| usage("fixtures needs --out DIR"))?;
    let seed = cli.seed.unwrap_or(7);
    std::fs::create_dir_all(&out)
        .map_err(|e| CliError::Data(CoreError::Io { path: out.clone(), source: e }))?;
    let spec = FixtureSpec { images, seed, size };
    let summary = generate_dataset(&spec, &out)?;

    // A self-contained, relocatable config: every path is relative to the
    // dataset directory.
    let mut cfg = RunConfig {
        seed,
        ..RunConfig::default()
    };
    if let Some(shots) = cli.shots {
        cfg.shots = shots;
    }
    if let Some(mode) = cli.mode {
        cfg.mode = mode;
    }
    cfg.paths = PathsSection {
        annotations: vec![PathBuf::from("annotations.jsonl")],
        images: Some(PathBuf::from("images")),
        features: None,
        checkpoints: None,
        out_dir: Some(PathBuf::from(".")),
    };
    cfg.curation.test_classes = vec![FIXTURE_CLASSES[2].to_string()];
    cfg.curation.val_classes = vec![FIXTURE_CLASSES[3].to_string()];
    cfg.curation.calib_per_dataset = 5;
    io::write_json(&out.join("config.json"), &cfg)?;

    println!(
        "fixtures: {} images, {} instances -> {}",
        summary.images,
        summary.instances,
        out.display()
    );
    println!("config: {}", out.join("config.json").display());
    Ok(())
}

fn cmd_curate(ctx: &Ctx) -> CliResult<()> {
    if ctx.cfg.paths.annotations.is_empty() {
        return Err(usage("no annotation files configured (paths.annotations)"));
    }
    let mut inputs = Vec::new();
    let mut total_records = 0usize;
    for path in &ctx.cfg.paths.annotations {
        let path = ctx.resolve(path);
        if !path.exists() {
            return Err(usage(format!("annotation file {} not found", path.display())));
        }
        let dataset = path
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or("dataset")
            .to_string();
        let records = curation::parse_annotations(&path)?;
        total_records += records.len();
        inputs.push((dataset, records));
    }
    if total_records == 0 {
        return Err(CliError::Data(CoreError::Data(
            "annotation files contain no records".to_string(),
        )));
    }

    let curation_cfg = CurationConfig {
        min_instances: ctx.cfg.curation.min_instances,
        shots: ctx.cfg.shots,
        calib_per_dataset: ctx.cfg.curation.calib_per_dataset,
        test_classes: ctx.cfg.curation.test_classes.clone(),
        val_classes: ctx.cfg.curation.val_classes.clone(),
        seed: ctx.cfg.seed,
    };
    let output = curation::curate(&inputs, &curation_cfg)?;

    ctx.ensure_out()?;
    ctx.echo_config()?;
    curation::write_curated(&ctx.curated_path(), &output.samples)?;
    io::write_json(&ctx.manifest_path(), &output.manifest)?;

    println!("curated {} samples from {} records", output.samples.len(), total_records);
    for (class, count) in &output.per_class_counts {
        println!("  {class}: {count}");
    }
    println!(
        "splits: train {} / validation {} / test {} / calibration {}",
        output.manifest.train.ids.len(),
        output.manifest.validation.ids.len(),
        output.manifest.test.ids.len(),
        output.manifest.calibration.ids.len()
    );
    Ok(())
}

/// Builds the model inputs for one curated sample, either by running the
/// fixture encoders on the stored image tensor or by ingesting feature
/// files from `paths.features/<sample_id>/`.
fn prepare_inputs(ctx: &Ctx, params: &ModelParams, sample: &CountingSample) -> CliResult<ForwardInputs> {
    let d = ctx.cfg.model.d;
    let (z_cv, z_rs) = match &ctx.cfg.paths.features {
        Some(features) => {
            let dir = ctx.resolve(features).join(&sample.sample_id);
            let z_cv = load_cv_pyramid(&dir)?;
            let rs_path = dir.join("rs.ovct");
            let z_rs = match load_features(&rs_path)? {
                LoadedFeature::Pyramid(p) => p.levels()[0].map.clone(),
                LoadedFeature::Tokens(_) => {
                    return Err(CliError::Data(CoreError::Data(format!(
                        "{} does not hold an aerial feature map",
                        rs_path.display()
                    ))))
                }
            };
            (z_cv, z_rs)
        }
        None => {
            let images = ctx
                .cfg
                .paths
                .images
                .as_ref()
                .ok_or_else(|| usage("config needs paths.images (fixture mode) or paths.features"))?;
            let image_path = ctx.resolve(images).join(format!("{}.ovct", sample.image_id));
            if !image_path.exists() {
                return Err(usage(format!("image tensor {} not found", image_path.display())));
            }
            let image = io::load_tensor(&image_path)?;
            encode_image(&image, &params.encoder)?
        }
    };

    let text = match &ctx.cfg.paths.features {
        Some(features) => {
            let text_path = ctx.resolve(features).join(&sample.sample_id).join("text.ovct");
            if text_path.exists() {
                match load_features(&text_path)? {
                    LoadedFeature::Tokens(t) => t,
                    LoadedFeature::Pyramid(_) => {
                        return Err(CliError::Data(CoreError::Data(format!(
                            "{} does not hold text tokens",
                            text_path.display()
                        ))))
                    }
                }
            } else {
                fixture_text_encoder(&tokenize(&sample.prompt)?, ctx.cfg.seed, d)?
            }
        }
        None => fixture_text_encoder(&tokenize(&sample.prompt)?, ctx.cfg.seed, d)?,
    };

    let boxes = match ctx.cfg.mode {
        EvalMode::FewShot => ExemplarBoxes::new(sample.exemplar_boxes.clone(), z_cv.image_dims())?,
        EvalMode::ZeroShot => ExemplarBoxes::empty(),
    };
    Ok(ForwardInputs {
        z_cv,
        z_rs,
        text,
        boxes,
    })
}

fn effective_threshold(ctx: &Ctx, out: &ForwardOutput, calib: Option<&CalibrationResult>) -> CliResult<f64> {
    if let Some(t) = ctx.threshold {
        return Ok(t);
    }
    let calib = calib.ok_or_else(|| {
        usage(format!(
            "{} not found: run `skycount calibrate` first or pass --threshold",
            ctx.calibration_path().display()
        ))
    })?;
    Ok(adaptive_threshold(
        out.sim.max_confidence(),
        calib.sigma_thr,
        calib.tau,
        ctx.cfg.mode == EvalMode::ZeroShot,
    ))
}

fn samples_by_id(samples: Vec<CountingSample>) -> BTreeMap<String, CountingSample> {
    samples.into_iter().map(|s| (s.sample_id.clone(), s)).collect()
}

fn cmd_calibrate(ctx: &Ctx) -> CliResult<()> {
    let samples = samples_by_id(ctx.load_curated()?);
    let manifest = ctx.load_manifest()?;
    if manifest.calibration.ids.is_empty() {
        return Err(CliError::Data(CoreError::Data(
            "calibration split is empty".to_string(),
        )));
    }
    let params = ctx.load_model()?;

    let mut jobs = Vec::new();
    for id in &manifest.calibration.ids {
        let sample = samples
            .get(id)
            .ok_or_else(|| CliError::Data(CoreError::Data(format!("sample {id} missing from curated set"))))?;
        jobs.push(sample.clone());
    }
    let results = skycount::par::map_items(&jobs, |sample| -> CliResult<_> {
        let inputs = prepare_inputs(ctx, &params, sample)?;
        let out = forward(&inputs, &params, &ctx.cfg.model)?;
        Ok((out.sim, sample.gt_points.len()))
    });
    let mut outputs = Vec::with_capacity(results.len());
    for r in results {
        outputs.push(r?);
    }

    let mut calibration = calibrate_threshold(&outputs, &default_grid(), ctx.cfg.seed)?;
    calibration.mae = round6(calibration.mae);
    ctx.ensure_out()?;
    ctx.echo_config()?;
    io::write_json(&ctx.calibration_path(), &calibration)?;
    println!(
        "calibrated on {} samples: sigma_thr {} (holdout MAE {}), tau {}",
        outputs.len(),
        calibration.sigma_thr,
        calibration.mae,
        calibration.tau
    );
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct CountRecord {
    sample_id: String,
    count: usize,
    threshold_used: f64,
    mode: EvalMode,
}

fn cmd_count(ctx: &Ctx, sample_id: &str, export_maps: bool) -> CliResult<()> {
    let samples = samples_by_id(ctx.load_curated()?);
    let sample = samples
        .get(sample_id)
        .ok_or_else(|| usage(format!("sample {sample_id:?} not found in curated set")))?;
    let calib = match ctx.threshold {
        Some(_) => None,
        None => Some(ctx.load_calibration()?),
    };
    let params = ctx.load_model()?;
    let inputs = prepare_inputs(ctx, &params, sample)?;
    let out = forward(&inputs, &params, &ctx.cfg.model)?;
    let threshold = effective_threshold(ctx, &out, calib.as_ref())?;
    let result = count_from_similarity(&out.sim, threshold);

    ctx.ensure_out()?;
    ctx.echo_config()?;
    let record = CountRecord {
        sample_id: sample_id.to_string(),
        count: result.count,
        threshold_used: threshold,
        mode: ctx.cfg.mode,
    };
    io::write_json(&ctx.out.join(format!("count_{sample_id}.json")), &record)?;
    if export_maps {
        let stem = ctx.out.join(format!("map_{sample_id}"));
        let (csv, pgm) = export_confidence_map(&out.sim, &out.token_grid, &stem)?;
        println!("confidence map: {} and {}", csv.display(), pgm.display());
    }
    println!(
        "{sample_id}: count {} at threshold {} (gt {})",
        result.count,
        threshold,
        sample.gt_points.len()
    );
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct EvalSampleRecord {
    sample_id: String,
    class: String,
    pred: usize,
    gt: usize,
    abs_err: f64,
    threshold_used: f64,
}

fn split_ids<'a>(manifest: &'a SplitManifest, split: &str) -> CliResult<&'a [String]> {
    match split {
        "train" => Ok(&manifest.train.ids),
        "validation" => Ok(&manifest.validation.ids),
        "test" => Ok(&manifest.test.ids),
        "calibration" => Ok(&manifest.calibration.ids),
        other => Err(usage(format!(
            "unknown split {other:?}: expected train, validation, test or calibration"
        ))),
    }
}

fn cmd_eval(ctx: &Ctx, split: &str) -> CliResult<()> {
    let samples = samples_by_id(ctx.load_curated()?);
    let manifest = ctx.load_manifest()?;
    let ids = split_ids(&manifest, split)?;
    if ids.is_empty() {
        return Err(CliError::Data(CoreError::Data(format!(
            "split {split:?} has no samples"
        ))));
    }
    let calib = match ctx.threshold {
        Some(_) => None,
        None => Some(ctx.load_calibration()?),
    };
    let params = ctx.load_model()?;

    let mut jobs = Vec::new();
    for id in ids {
        let sample = samples
            .get(id)
            .ok_or_else(|| CliError::Data(CoreError::Data(format!("sample {id} missing from curated set"))))?;
        jobs.push(sample.clone());
    }
    let runs = skycount::par::map_items(&jobs, |sample| -> CliResult<EvalSampleRecord> {
        let inputs = prepare_inputs(ctx, &params, sample)?;
        let out = forward(&inputs, &params, &ctx.cfg.model)?;
        let threshold = effective_threshold(ctx, &out, calib.as_ref())?;
        let result = count_from_similarity(&out.sim, threshold);
        let gt = sample.gt_points.len();
        Ok(EvalSampleRecord {
            sample_id: sample.sample_id.clone(),
            class: sample.class.clone(),
            pred: result.count,
            gt,
            abs_err: (result.count as f64 - gt as f64).abs(),
            threshold_used: threshold,
        })
    });
    let mut records = Vec::with_capacity(runs.len());
    for r in runs {
        records.push(r?);
    }

    let triples: Vec<(String, usize, usize)> = records
        .iter()
        .map(|r| (r.class.clone(), r.pred, r.gt))
        .collect();
    let mut report = per_class_report(&triples, ctx.cfg.mode)?;
    report.sigma_thr = ctx.threshold.or(calib.as_ref().map(|c| c.sigma_thr));
    report.tau = match ctx.cfg.mode {
        EvalMode::ZeroShot => calib.as_ref().map(|c| c.tau),
        EvalMode::FewShot => None,
    };

    ctx.ensure_out()?;
    ctx.echo_config()?;
    io::write_json(&ctx.out.join("report.json"), &report)?;
    let mut lines = String::new();
    for r in &records {
        lines.push_str(&serde_json::to_string(r).map_err(CoreError::Json)?);
        lines.push('\n');
    }
    let samples_path = ctx.out.join("eval_samples.jsonl");
    std::fs::write(&samples_path, lines)
        .map_err(|e| CliError::Data(CoreError::Io { path: samples_path, source: e }))?;

    println!(
        "eval[{split}] {} samples: pooled MAE {} RMSE {}",
        report.samples, report.pooled_mae, report.pooled_rmse
    );
    for (class, m) in &report.per_class {
        println!("  {class}: MAE {} RMSE {} ({} samples)", m.mae, m.rmse, m.samples);
    }
    Ok(())
}

fn cmd_bins(ctx: &Ctx, bins: usize) -> CliResult<()> {
    let path = ctx.out.join("eval_samples.jsonl");
    if !path.exists() {
        return Err(usage(format!(
            "{} not found: run `skycount eval` first",
            path.display()
        )));
    }
    let text = std::fs::read_to_string(&path)
        .map_err(|e| CliError::Data(CoreError::Io { path: path.clone(), source: e }))?;
    let mut samples = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let record: EvalSampleRecord = serde_json::from_str(line).map_err(|e| {
            CliError::Data(CoreError::Data(format!("{}:{}: {e}", path.display(), lineno + 1)))
        })?;
        samples.push((record.gt as f64, record.abs_err));
    }
    let curve = quantile_bins(&samples, bins)?;
    ctx.ensure_out()?;
    let csv = ctx.out.join("density.csv");
    write_density_csv(&csv, &curve)?;
    println!("{} bins over {} samples -> {}", bins, samples.len(), csv.display());
    Ok(())
}

#[derive(Serialize)]
struct TrainLogEntry {
    step: u64,
    total: f64,
    loc: f64,
    cls: f64,
}

fn cmd_train(ctx: &Ctx, steps: usize) -> CliResult<()> {
    if steps == 0 {
        return Err(usage("--steps must be at least 1"));
    }
    let samples = samples_by_id(ctx.load_curated()?);
    let manifest = ctx.load_manifest()?;
    if manifest.train.ids.is_empty() {
        return Err(CliError::Data(CoreError::Data(
            "train split is empty; lower curation.calib_per_dataset or add data".to_string(),
        )));
    }
    let mut params = ctx.load_model()?;

    let mut prepared = Vec::new();
    for id in &manifest.train.ids {
        let sample = samples
            .get(id)
            .ok_or_else(|| CliError::Data(CoreError::Data(format!("sample {id} missing from curated set"))))?;
        let inputs = prepare_inputs(ctx, &params, sample)?;
        let (img_h, img_w) = inputs.z_cv.image_dims();
        let gt_points: Vec<[f64; 2]> = sample
            .gt_points
            .iter()
            .map(|p| [p[0] / img_w as f64, p[1] / img_h as f64])
            .collect();
        prepared.push(TrainSample { inputs, gt_points });
    }

    let mut opt = OptimizerState::new(ctx.cfg.optim.learn_rate, default_frozen());
    opt.beta1 = ctx.cfg.optim.beta1;
    opt.beta2 = ctx.cfg.optim.beta2;
    opt.epsilon = ctx.cfg.optim.epsilon;

    let batch_size = ctx.cfg.optim.batch_size.max(1).min(prepared.len());
    let mut log = Vec::with_capacity(steps);
    for step in 0..steps {
        // Deterministic cyclic batching over the id-sorted train set.
        let batch: Vec<TrainSample> = (0..batch_size)
            .map(|i| prepared[(step * batch_size + i) % prepared.len()].clone())
            .collect();
        let stats = finetune_step(
            &mut params,
            &batch,
            &mut opt,
            &ctx.cfg.model,
            ctx.cfg.loss,
            ctx.cfg.focal,
        )?;
        log.push(TrainLogEntry {
            step: opt.step,
            total: round6(stats.total),
            loc: round6(stats.loc),
            cls: round6(stats.cls),
        });
        if (step + 1) % 10 == 0 || step + 1 == steps {
            println!("step {}: total {} loc {} cls {}", step + 1, stats.total, stats.loc, stats.cls);
        }
    }

    ctx.ensure_out()?;
    ctx.echo_config()?;
    save_checkpoint(&ctx.out.join("checkpoint"), &params, &opt.frozen)?;
    io::write_json(&ctx.out.join("train_log.json"), &log)?;
    println!(
        "saved checkpoint to {} after {} steps",
        ctx.out.join("checkpoint").display(),
        steps
    );
    Ok(())
}
