use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use canopy_core::baselines::{BaselineArtifact, BaselineKind, RfConfig, BASELINE_MAGIC, DEFAULT_K};
use canopy_core::eval::{evaluate_run, write_scatter, EvalReport, Predictor};
use canopy_core::models::{ModelCheckpoint, ModelKind, TrainConfig, CHECKPOINT_MAGIC};
use canopy_core::pipeline::{build_feature_stack, fit_scene_decay, BandSource, ComboSpec, DecayManifest, FeatureStack, SceneDir};
use canopy_core::simulator::{simulate_stack, SceneConfig};
use canopy_core::workflow::{fit_baseline, split_stack, train_network, BaselineOptions, NetworkSpec};
use canopy_core::{Raster, VERSION};
use serde::Serialize;

use crate::config::FileConfig;
use crate::{BaselineArgs, BuildArgs, Cli, Command, EvaluateArgs, FitArgs, PredictArgs, ReportArgs, SimulateArgs, SourceArgs, SplitArgs, TrainArgs};

const DEFAULT_SIZE: usize = 256;
const DEFAULT_SEED: u64 = 0;
const DEFAULT_COMBO: &str = "all,hh,hv";
const DEFAULT_RESOLUTION: u32 = 20;
const DEFAULT_PATCH: usize = 128;
const MANIFEST: &str = "run.json";
const CHECKPOINT_FILE: &str = "model.ckpt";
const BASELINE_FILE: &str = "baseline.bsl";

/// Bad invocation rather than bad data; exits with status 2.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

pub fn exit_code(e: &anyhow::Error) -> u8 {
    let is_usage = e.chain().any(|c| {
        c.is::<UsageError>() || matches!(c.downcast_ref::<canopy_core::Error>(), Some(canopy_core::Error::Usage(_)))
    });
    if is_usage {
        2
    } else {
        1
    }
}

pub fn run(cli: &Cli) -> Result<()> {
    if let Some(n) = cli.workers {
        if n == 0 {
            return Err(usage("--workers must be at least 1"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("starting worker pool")?;
    }
    let file = FileConfig::load(cli.config.as_deref())?;
    let ctx = Ctx { cli, file };
    match &cli.command {
        Command::Simulate(a) => simulate(&ctx, a),
        Command::FitCoherence(a) => fit_coherence(&ctx, a),
        Command::BuildStack(a) => build_stack(&ctx, a),
        Command::Train(a) => train(&ctx, a),
        Command::Baseline(a) => baseline(&ctx, a),
        Command::Predict(a) => predict(&ctx, a),
        Command::Evaluate(a) => evaluate(&ctx, a),
        Command::Report(a) => report(&ctx, a),
    }
}

struct Ctx<'a> {
    cli: &'a Cli,
    file: FileConfig,
}

impl Ctx<'_> {
    fn default_dir(&self, name: &str) -> PathBuf {
        self.cli.root.join(name)
    }

    fn seed(&self, section: &str, flag: Option<u64>) -> Result<u64> {
        match self.file.pick_opt(flag, section, "seed")? {
            Some(s) => Ok(s),
            None => {
                log::info!("no seed given; using the default seed {DEFAULT_SEED}");
                Ok(DEFAULT_SEED)
            }
        }
    }

    /// Refuses a non-empty output directory without `--force`, and any
    /// output directory that is also an input.
    fn prepare_out(&self, out: &Path, inputs: &[&Path]) -> Result<()> {
        for input in inputs {
            if same_path(out, input) {
                return Err(usage(format!("output directory {} is also an input", out.display())));
            }
        }
        if out.exists() {
            if !out.is_dir() {
                return Err(usage(format!("output path {} is not a directory", out.display())));
            }
            let non_empty = fs::read_dir(out)
                .with_context(|| format!("listing {}", out.display()))?
                .next()
                .is_some();
            if non_empty && !self.cli.force {
                bail!("output directory {} is not empty (pass --force to overwrite)", out.display());
            }
        }
        fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))
    }
}

fn same_path(a: &Path, b: &Path) -> bool {
    match (a.canonicalize(), b.canonicalize()) {
        (Ok(x), Ok(y)) => x == y,
        _ => a == b,
    }
}

/// Written next to every command's outputs. `config` is keyed by
/// subcommand so the file can be passed back through `--config`.
#[derive(Serialize)]
struct RunManifest<'a, S: Serialize> {
    command: &'a str,
    canopy_version: &'a str,
    config: BTreeMap<&'a str, &'a S>,
    outputs: Vec<String>,
}

fn write_manifest<S: Serialize>(out: &Path, command: &str, settings: &S, outputs: &[&str]) -> Result<()> {
    let m = RunManifest {
        command,
        canopy_version: VERSION,
        config: BTreeMap::from([(command, settings)]),
        outputs: outputs.iter().map(|s| s.to_string()).collect(),
    };
    let path = out.join(MANIFEST);
    let text = serde_json::to_string_pretty(&m).expect("manifest serializes") + "\n";
    fs::write(&path, text).with_context(|| format!("writing {}", path.display()))
}

#[derive(Serialize)]
struct SimulateSettings {
    size: usize,
    seed: u64,
    spacing: f64,
    ideal: bool,
}

fn simulate(ctx: &Ctx, a: &SimulateArgs) -> Result<()> {
    const S: &str = "simulate";
    let f = &ctx.file;
    let s = SimulateSettings {
        size: f.pick(a.size, S, "size", DEFAULT_SIZE)?,
        seed: ctx.seed(S, a.seed)?,
        spacing: f.pick(a.spacing, S, "spacing", 20.0)?,
        ideal: a.ideal || f.get(S, "ideal")?.unwrap_or(false),
    };
    let out = a.out.clone().unwrap_or_else(|| ctx.default_dir("scene"));
    ctx.prepare_out(&out, &[])?;
    let mut config = SceneConfig {
        spacing: s.spacing,
        ..SceneConfig::square(s.size, s.seed)
    };
    if s.ideal {
        config = config.ideal();
    }
    let scene = simulate_stack(&config)?;
    let manifest = scene.write(&out)?;
    write_manifest(&out, S, &s, &["scene.json"])?;
    println!(
        "wrote {}x{} scene ({} bands, lags {:?}) to {}",
        manifest.width,
        manifest.height,
        manifest.bands.len(),
        manifest.lags,
        out.display()
    );
    Ok(())
}

#[derive(Serialize)]
struct FitSettings {
    scene: PathBuf,
    resolution: u32,
}

fn fit_coherence(ctx: &Ctx, a: &FitArgs) -> Result<()> {
    const S: &str = "fit-coherence";
    let f = &ctx.file;
    let s = FitSettings {
        scene: f.pick(a.scene.clone(), S, "scene", ctx.default_dir("scene"))?,
        resolution: f.pick(a.resolution, S, "resolution", DEFAULT_RESOLUTION)?,
    };
    let out = a.out.clone().unwrap_or_else(|| ctx.default_dir("decay"));
    let src = SceneDir::open(&s.scene)?;
    ctx.prepare_out(&out, &[&s.scene])?;
    let (spacing, maps) = fit_scene_decay(&src, s.resolution)?;
    let manifest = DecayManifest::write_maps(&out, &src.fingerprint(), spacing, &src.lags(), &maps)?;
    write_manifest(&out, S, &s, &["decay.json"])?;
    for (pol, m) in &maps {
        let mut counts = BTreeMap::new();
        for v in m.status.values().iter().filter(|v| !v.is_nan()) {
            *counts.entry(*v as u8).or_insert(0usize) += 1;
        }
        println!("{}: status counts {counts:?}", pol.as_str());
    }
    println!("wrote {} decay map sets at {spacing} m to {}", manifest.bands.len(), out.display());
    Ok(())
}

#[derive(Serialize)]
struct BuildSettings {
    scene: PathBuf,
    decay: Option<PathBuf>,
    combo: String,
    resolution: u32,
}

fn build_stack(ctx: &Ctx, a: &BuildArgs) -> Result<()> {
    const S: &str = "build-stack";
    let f = &ctx.file;
    let s = BuildSettings {
        scene: f.pick(a.scene.clone(), S, "scene", ctx.default_dir("scene"))?,
        decay: f.pick_opt(a.decay.clone(), S, "decay")?,
        combo: f.pick(a.combo.clone(), S, "combo", DEFAULT_COMBO.to_string())?,
        resolution: f.pick(a.resolution, S, "resolution", DEFAULT_RESOLUTION)?,
    };
    let out = a.out.clone().unwrap_or_else(|| ctx.default_dir("stack"));
    let stack = build_feature_stack(&s.scene, &s.combo, s.resolution, s.decay.as_deref())?;
    let mut inputs = vec![s.scene.as_path()];
    inputs.extend(s.decay.as_deref());
    ctx.prepare_out(&out, &inputs)?;
    stack.write(&out)?;
    write_manifest(&out, S, &s, &["stack.json"])?;
    println!(
        "wrote {}x{} stack '{}' ({} bands) to {}",
        stack.width(),
        stack.height(),
        stack.combo,
        stack.n_bands(),
        out.display()
    );
    Ok(())
}

#[derive(Serialize)]
struct SourceSettings {
    scene: PathBuf,
    stack: Option<PathBuf>,
    decay: Option<PathBuf>,
    combo: String,
    resolution: u32,
}

impl SourceSettings {
    fn resolve(ctx: &Ctx, section: &str, a: &SourceArgs) -> Result<Self> {
        let f = &ctx.file;
        Ok(Self {
            scene: f.pick(a.scene.clone(), section, "scene", ctx.default_dir("scene"))?,
            stack: f.pick_opt(a.stack.clone(), section, "stack")?,
            decay: f.pick_opt(a.decay.clone(), section, "decay")?,
            combo: f.pick(a.combo.clone(), section, "combo", DEFAULT_COMBO.to_string())?,
            resolution: f.pick(a.resolution, section, "resolution", DEFAULT_RESOLUTION)?,
        })
    }

    fn inputs(&self) -> Vec<&Path> {
        match &self.stack {
            Some(p) => vec![p.as_path()],
            None => std::iter::once(self.scene.as_path()).chain(self.decay.as_deref()).collect(),
        }
    }

    /// Un-normalized stack from a stack directory or built from the scene.
    fn load(&mut self) -> Result<FeatureStack> {
        let Some(dir) = &self.stack else {
            return Ok(build_feature_stack(&self.scene, &self.combo, self.resolution, self.decay.as_deref())?);
        };
        let stack = FeatureStack::read(dir)?;
        if stack.is_normalized() {
            bail!("stack {} is already normalized; training needs the raw stack", dir.display());
        }
        if ComboSpec::parse(&self.combo)?.id() != stack.combo && self.combo != DEFAULT_COMBO {
            return Err(usage(format!("--combo {} disagrees with stack combo {}", self.combo, stack.combo)));
        }
        self.combo = stack.combo.clone();
        self.resolution = stack.resolution;
        Ok(stack)
    }
}

#[derive(Serialize)]
struct SplitSettings {
    patch_size: usize,
    split_seed: u64,
}

impl SplitSettings {
    fn resolve(ctx: &Ctx, section: &str, a: &SplitArgs) -> Result<Self> {
        let f = &ctx.file;
        Ok(Self {
            patch_size: f.pick(a.patch_size, section, "patch_size", DEFAULT_PATCH)?,
            split_seed: f.pick(a.split_seed, section, "split_seed", DEFAULT_SEED)?,
        })
    }
}

#[derive(Serialize)]
struct TrainSettings {
    #[serde(flatten)]
    source: SourceSettings,
    #[serde(flatten)]
    split: SplitSettings,
    model: ModelKind,
    levels: usize,
    base_channels: usize,
    se_reduction: usize,
    seed: u64,
    lr: f64,
    batch_size: usize,
    epochs: usize,
    weight_decay: f64,
    patience: usize,
}

fn train(ctx: &Ctx, a: &TrainArgs) -> Result<()> {
    const S: &str = "train";
    let f = &ctx.file;
    let model: ModelKind = f
        .pick(a.model.clone(), S, "model", "nested".to_string())?
        .parse()
        .map_err(|e: canopy_core::Error| usage(e.to_string()))?;
    let spec = NetworkSpec::new(model);
    let d = TrainConfig::default();
    let mut s = TrainSettings {
        source: SourceSettings::resolve(ctx, S, &a.source)?,
        split: SplitSettings::resolve(ctx, S, &a.split)?,
        model,
        levels: f.pick(a.levels, S, "levels", spec.levels)?,
        base_channels: f.pick(a.base_channels, S, "base_channels", spec.base_channels)?,
        se_reduction: f.pick(a.se_reduction, S, "se_reduction", spec.se_reduction)?,
        seed: ctx.seed(S, a.seed)?,
        lr: f.pick(a.lr, S, "lr", d.lr)?,
        batch_size: f.pick(a.batch_size, S, "batch_size", d.batch_size)?,
        epochs: f.pick(a.epochs, S, "epochs", d.epochs)?,
        weight_decay: f.pick(a.weight_decay, S, "weight_decay", d.weight_decay)?,
        patience: f.pick(a.patience, S, "patience", d.patience.unwrap_or(0))?,
    };
    let out = a.out.clone().unwrap_or_else(|| ctx.default_dir("train"));
    let raw = s.source.load()?;
    ctx.prepare_out(&out, &s.source.inputs())?;

    let split = split_stack(&raw, s.split.patch_size, s.split.split_seed)?;
    let spec = NetworkSpec {
        kind: s.model,
        levels: s.levels,
        base_channels: s.base_channels,
        se_reduction: s.se_reduction,
    };
    let config = TrainConfig {
        lr: s.lr,
        batch_size: s.batch_size,
        epochs: s.epochs,
        weight_decay: s.weight_decay,
        patience: (s.patience > 0).then_some(s.patience),
        seed: s.seed,
    };
    log::info!(
        "training {} on {} patches ({} train, {} val, {} test) of {} px",
        s.model,
        split.patches.len(),
        split.train.len(),
        split.val.len(),
        split.test.len(),
        split.patch_size
    );
    let ckpt = train_network(&raw, &split, &spec, &config, s.seed)?;
    ckpt.save(&out.join(CHECKPOINT_FILE))?;
    write_manifest(&out, S, &s, &[CHECKPOINT_FILE])?;
    let best = &ckpt.log[ckpt.selected_epoch];
    println!(
        "trained {} ({} parameters) for {} epochs; selected epoch {} with val loss {:.4}; wrote {}",
        s.model,
        ckpt.model.n_params(),
        ckpt.log.len(),
        ckpt.selected_epoch,
        best.val_loss,
        out.join(CHECKPOINT_FILE).display()
    );
    Ok(())
}

#[derive(Serialize)]
struct BaselineSettings {
    #[serde(flatten)]
    source: SourceSettings,
    #[serde(flatten)]
    split: SplitSettings,
    kind: BaselineKind,
    k: usize,
    trees: usize,
    min_leaf: usize,
    max_features: Option<usize>,
    seed: u64,
}

fn baseline(ctx: &Ctx, a: &BaselineArgs) -> Result<()> {
    const S: &str = "baseline";
    let f = &ctx.file;
    let kind: BaselineKind = f
        .pick(a.kind.clone(), S, "kind", "rf".to_string())?
        .parse()
        .map_err(|e: canopy_core::Error| usage(e.to_string()))?;
    let d = RfConfig::default();
    let mut s = BaselineSettings {
        source: SourceSettings::resolve(ctx, S, &a.source)?,
        split: SplitSettings::resolve(ctx, S, &a.split)?,
        kind,
        k: f.pick(a.k, S, "k", DEFAULT_K)?,
        trees: f.pick(a.trees, S, "trees", d.trees)?,
        min_leaf: f.pick(a.min_leaf, S, "min_leaf", d.min_leaf)?,
        max_features: f.pick_opt(a.max_features, S, "max_features")?,
        seed: ctx.seed(S, a.seed)?,
    };
    let out = a.out.clone().unwrap_or_else(|| ctx.default_dir(&format!("baseline-{kind}")));
    let raw = s.source.load()?;
    ctx.prepare_out(&out, &s.source.inputs())?;

    let split = split_stack(&raw, s.split.patch_size, s.split.split_seed)?;
    let options = BaselineOptions {
        k: s.k,
        rf: RfConfig {
            trees: s.trees,
            min_leaf: s.min_leaf,
            max_features: s.max_features,
            seed: s.seed,
            ..d
        },
    };
    let artifact = fit_baseline(&raw, &split, kind, &options)?;
    artifact.save(&out.join(BASELINE_FILE))?;
    write_manifest(&out, S, &s, &[BASELINE_FILE])?;
    println!("fitted {kind} on '{}'; wrote {}", artifact.combo, out.join(BASELINE_FILE).display());
    Ok(())
}

enum Artifact {
    Network(ModelCheckpoint),
    Baseline(BaselineArtifact),
}

impl Artifact {
    fn load(path: &Path) -> Result<Self> {
        if !path.is_file() {
            bail!("checkpoint not found: {}", path.display());
        }
        let mut magic = [0u8; 8];
        fs::File::open(path)
            .and_then(|mut f| f.read_exact(&mut magic))
            .with_context(|| format!("reading {}", path.display()))?;
        if &magic == CHECKPOINT_MAGIC {
            Ok(Artifact::Network(ModelCheckpoint::load(path)?))
        } else if &magic == BASELINE_MAGIC {
            Ok(Artifact::Baseline(BaselineArtifact::load(path)?))
        } else {
            bail!("{} is neither a network checkpoint nor a baseline file", path.display())
        }
    }

    fn predictor(&self) -> Predictor<'_> {
        match self {
            Artifact::Network(c) => Predictor::Network(c),
            Artifact::Baseline(b) => Predictor::Baseline(b),
        }
    }

    fn combo_and_resolution(&self) -> (&str, u32) {
        match self {
            Artifact::Network(c) => (&c.combo, c.resolution),
            Artifact::Baseline(b) => (&b.combo, b.resolution),
        }
    }
}

/// Stack for an already-trained model: the model fixes combo and resolution.
fn stack_for(artifact: &Artifact, scene: &Path, stack: Option<&Path>, decay: Option<&Path>) -> Result<FeatureStack> {
    let (combo, resolution) = artifact.combo_and_resolution();
    match stack {
        Some(dir) => Ok(FeatureStack::read(dir)?),
        None => Ok(build_feature_stack(scene, combo, resolution, decay)?),
    }
}

#[derive(Serialize)]
struct PredictSettings {
    model_file: PathBuf,
    scene: PathBuf,
    stack: Option<PathBuf>,
    decay: Option<PathBuf>,
}

fn predict(ctx: &Ctx, a: &PredictArgs) -> Result<()> {
    const S: &str = "predict";
    let f = &ctx.file;
    let s = PredictSettings {
        model_file: f.pick(a.model_file.clone(), S, "model_file", ctx.default_dir("train").join(CHECKPOINT_FILE))?,
        scene: f.pick(a.scene.clone(), S, "scene", ctx.default_dir("scene"))?,
        stack: f.pick_opt(a.stack.clone(), S, "stack")?,
        decay: f.pick_opt(a.decay.clone(), S, "decay")?,
    };
    let out = a.out.clone().unwrap_or_else(|| ctx.default_dir("predict"));
    let artifact = Artifact::load(&s.model_file)?;
    let stack = stack_for(&artifact, &s.scene, s.stack.as_deref(), s.decay.as_deref())?;
    ctx.prepare_out(&out, &[&s.scene])?;
    let pred = artifact.predictor().predict(&stack)?;
    // Heights are non-negative; the clamp applies to the exported map only.
    let exported: Raster = pred.map(|v| v.max(0.0)).with_role("height_pred", "m");
    exported.write(&out.join("height_pred.rst"))?;
    write_manifest(&out, S, &s, &["height_pred.rst"])?;
    println!(
        "wrote {}x{} height map ({} valid pixels) to {}",
        exported.width(),
        exported.height(),
        exported.valid_count(),
        out.join("height_pred.rst").display()
    );
    Ok(())
}

#[derive(Serialize)]
struct EvaluateSettings {
    model_file: PathBuf,
    scene: PathBuf,
    stack: Option<PathBuf>,
    decay: Option<PathBuf>,
    report: PathBuf,
}

fn evaluate(ctx: &Ctx, a: &EvaluateArgs) -> Result<()> {
    const S: &str = "evaluate";
    let f = &ctx.file;
    let s = EvaluateSettings {
        model_file: f.pick(a.model_file.clone(), S, "model_file", ctx.default_dir("train").join(CHECKPOINT_FILE))?,
        scene: f.pick(a.scene.clone(), S, "scene", ctx.default_dir("scene"))?,
        stack: f.pick_opt(a.stack.clone(), S, "stack")?,
        decay: f.pick_opt(a.decay.clone(), S, "decay")?,
        report: f.pick(a.report.clone(), S, "report", ctx.cli.root.join("report.csv"))?,
    };
    let artifact = Artifact::load(&s.model_file)?;
    let predictor = artifact.predictor();
    let out = a.out.clone().unwrap_or_else(|| ctx.default_dir(&format!("evaluate-{}", predictor.model_id())));
    let stack = stack_for(&artifact, &s.scene, s.stack.as_deref(), s.decay.as_deref())?;
    let split = match &artifact {
        Artifact::Network(c) => c.split.clone(),
        Artifact::Baseline(b) => b.split.clone(),
    }
    .ok_or_else(|| anyhow::anyhow!("{} records no training split", s.model_file.display()))?;
    ctx.prepare_out(&out, &[&s.scene])?;

    let result = evaluate_run(predictor, &stack, &split)?;
    write_scatter(&out.join("scatter.csv"), &result.scatter)?;
    let metrics = serde_json::to_string_pretty(&result.row).expect("row serializes") + "\n";
    fs::write(out.join("metrics.json"), metrics).context("writing metrics.json")?;
    EvalReport::append(&s.report, result.row.clone())?;
    write_manifest(&out, S, &s, &["scatter.csv", "metrics.json"])?;
    let r = &result.row;
    println!(
        "{} '{}' @ {} m seed {}: ME {:.3} m, RMSE {:.3} m, R2 {:.3} over {} pixels; appended to {}",
        r.model,
        r.combo,
        r.resolution_m,
        r.seed,
        r.me_m,
        r.rmse_m,
        r.r2,
        r.n_pixels,
        s.report.display()
    );
    Ok(())
}

#[derive(Serialize)]
struct ReportSettings {
    report: PathBuf,
}

fn report(ctx: &Ctx, a: &ReportArgs) -> Result<()> {
    const S: &str = "report";
    let s = ReportSettings {
        report: ctx.file.pick(a.report.clone(), S, "report", ctx.cli.root.join("report.csv"))?,
    };
    if !s.report.is_file() {
        bail!("report not found: {} (run evaluate first)", s.report.display());
    }
    let report = EvalReport::read(&s.report)?;
    let table = report.rmse_table();
    let out = a.out.clone().unwrap_or_else(|| ctx.default_dir("summary"));
    ctx.prepare_out(&out, &[])?;
    fs::write(out.join("rmse_table.txt"), &table).context("writing rmse_table.txt")?;
    write_manifest(&out, S, &s, &["rmse_table.txt"])?;
    print!("{table}");
    Ok(())
}
