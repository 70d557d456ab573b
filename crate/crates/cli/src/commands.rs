use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use log::{info, warn};
use scai::checkpoint;
use scai::policy::{
    accuracy_vs_budget_curve, curve_csv, parse_thresholds, thresholds_csv, BudgetPlan, CurveMode, OutcomeTable,
};
use scai::sim::{latency_report, records_csv, simulate, Scenario};
use scai::synth::{self, default_recipes, ClassRecipe, Dataset, RecipeFile};
use scai::train::{evaluate, hyper_sweep, sweep_csv, train_with, GridSpec};
use scai::{ScaiConfig, ScaiModel};

use crate::config::{stream_seed, RunConfig, Stream};
use crate::{Cli, Command, CurvesArgs, DataArg, EvalArgs, GenArgs, ModelOverrides, SimulateArgs, SweepArgs, TrainArgs};

struct Ctx {
    cfg: RunConfig,
    out: PathBuf,
}

impl Ctx {
    fn seed(&self, stream: Stream) -> u64 {
        stream_seed(self.cfg.seed, stream)
    }

    fn write(&self, name: &str, contents: &str, written: &mut Vec<PathBuf>) -> Result<()> {
        let path = self.out.join(name);
        std::fs::write(&path, contents).with_context(|| format!("writing {}", path.display()))?;
        written.push(path);
        Ok(())
    }

    fn recipes(&self, width: usize) -> Result<Vec<ClassRecipe>> {
        match &self.cfg.data.recipes {
            None => Ok(default_recipes(width)),
            Some(path) => {
                let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
                let file = RecipeFile::parse(&text)?;
                ensure!(
                    file.width == width,
                    "recipe file is laid out for width {}, the model expects {width}",
                    file.width
                );
                Ok(file.recipes)
            }
        }
    }

    fn dataset(&self, arg: &DataArg) -> Result<Dataset> {
        let path = arg.data.clone().unwrap_or_else(|| self.out.join("dataset.csv"));
        if !path.exists() {
            bail!("dataset {} not found; run `scai gen` first or pass --data", path.display());
        }
        Ok(synth::load_csv(&path, self.cfg.model.num_classes)?)
    }

    /// Train, validation and test splits of the dataset.
    fn splits(&self, arg: &DataArg) -> Result<(Dataset, Dataset, Dataset)> {
        let data = self.dataset(arg)?;
        ensure!(self.cfg.data.split.len() == 3, "data.split needs three ratios");
        let mut parts = synth::split(&data, &self.cfg.data.split, self.seed(Stream::Split))?.into_iter();
        let (a, b, c) = (parts.next(), parts.next(), parts.next());
        Ok((a.expect("three parts"), b.expect("three parts"), c.expect("three parts")))
    }
}

fn stem(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "model".into())
}

fn load_model(path: &Path) -> Result<ScaiModel> {
    if !path.exists() {
        bail!("checkpoint {} not found", path.display());
    }
    Ok(checkpoint::load(path)?)
}

pub fn run(cli: Cli) -> Result<Vec<PathBuf>> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    std::fs::create_dir_all(&cli.out).with_context(|| format!("creating {}", cli.out.display()))?;
    let ctx = Ctx { cfg, out: cli.out };
    let mut written = Vec::new();
    match cli.command {
        Command::Gen(args) => gen(&ctx, args, &mut written)?,
        Command::Train(args) => train(&ctx, args, &mut written)?,
        Command::Eval(args) => eval(&ctx, args, &mut written)?,
        Command::Curves(args) => curves(&ctx, args, &mut written)?,
        Command::Heatmap(args) => heatmap(&ctx, args, &mut written)?,
        Command::Simulate(args) => run_simulation(&ctx, args, &mut written)?,
        Command::Sweep(args) => sweep(&ctx, args, &mut written)?,
    }
    Ok(written)
}

fn gen(ctx: &Ctx, args: GenArgs, written: &mut Vec<PathBuf>) -> Result<()> {
    let mut ctx_cfg = ctx.cfg.clone();
    if let Some(p) = args.recipes {
        ctx_cfg.data.recipes = Some(p);
    }
    let ctx = Ctx {
        cfg: ctx_cfg,
        out: ctx.out.clone(),
    };
    let width = args.width.unwrap_or(ctx.cfg.model.input_width);
    let per_class = args.per_class.unwrap_or(ctx.cfg.data.per_class);
    let recipes = ctx.recipes(width)?;
    let data = synth::build_dataset(&recipes, width, per_class, ctx.seed(Stream::Data))?;
    info!("generated {} curves of width {width}", data.len());
    ctx.write("dataset.csv", &synth::to_csv(&data), written)
}

fn model_config(ctx: &Ctx, o: &ModelOverrides, width: usize) -> Result<ScaiConfig> {
    let mut m = ctx.cfg.model.clone();
    let units = o.units.unwrap_or_else(|| m.units.first().copied().unwrap_or(4));
    let channels = o.channels.unwrap_or_else(|| m.channels.first().copied().unwrap_or(16));
    if o.blocks.is_some() || o.units.is_some() || o.channels.is_some() {
        let blocks = o.blocks.unwrap_or(m.blocks);
        m = m.with_depth(blocks, units, channels);
    }
    if let Some(e) = o.epsilon {
        m.epsilon = e;
    }
    if let Some(g) = o.gamma {
        m.gamma = g;
    }
    if o.no_pa {
        m.pa_enabled = false;
    }
    if o.no_distill {
        m.distill_enabled = false;
    }
    m.input_width = width;
    m.seed = ctx.seed(Stream::Init);
    m.validate()?;
    Ok(m)
}

fn train_config(ctx: &Ctx, o: &ModelOverrides) -> scai::train::TrainConfig {
    let mut t = ctx.cfg.train.clone();
    if let Some(e) = o.epochs {
        t.max_epochs = e;
    }
    if let Some(p) = o.patience {
        t.patience = p;
    }
    t.seed = ctx.seed(Stream::Train);
    t
}

fn train(ctx: &Ctx, args: TrainArgs, written: &mut Vec<PathBuf>) -> Result<()> {
    let (train_set, valid, _) = ctx.splits(&args.data)?;
    let config = model_config(ctx, &args.model, train_set.width)?;
    let name = args.name.unwrap_or_else(|| {
        match (config.pa_enabled, config.distill_enabled) {
            (false, _) => "scai",
            (true, true) => "scai_plus",
            (true, false) => "scai_plus_nokd",
        }
        .to_string()
    });
    let tc = train_config(ctx, &args.model);
    let mut model = ScaiModel::build(config)?;
    info!("training {name} for up to {} epochs", tc.max_epochs);
    let report = train_with(&mut model, &train_set, &valid, &tc, |epoch, improved| {
        if improved {
            info!("epoch {epoch}: new best validation accuracy");
        }
    })?;
    info!(
        "best epoch {} (final-exit validation accuracy {:.4}), stopped at {}",
        report.best_epoch, report.best_valid_accuracy, report.stop_epoch
    );
    ctx.write(&format!("{name}.ckpt"), &checkpoint::to_string(&model), written)?;
    ctx.write(&format!("{name}_train.csv"), &report.to_csv(), written)
}

fn eval(ctx: &Ctx, args: EvalArgs, written: &mut Vec<PathBuf>) -> Result<()> {
    let model = load_model(&args.checkpoint)?;
    let (_, _, test) = ctx.splits(&args.data)?;
    let metrics = evaluate(&model, &test)?;
    let table = OutcomeTable::build(&model, &test)?;
    let costs = model.static_cost_table();
    let mut out = String::from("exit_index,accuracy,loss,static_flops,mean_flops\n");
    for l in 1..=model.num_exits() {
        let mean = table.exits.iter().map(|s| s[l - 1].flops as f64).sum::<f64>() / table.len().max(1) as f64;
        out.push_str(&format!(
            "{l},{},{},{},{mean}\n",
            metrics.accuracy[l - 1],
            metrics.loss[l - 1],
            costs.exit_cost(l)
        ));
    }
    let name = stem(&args.checkpoint);
    ctx.write(&format!("{name}_eval.csv"), &out, written)?;
    ctx.write(&format!("{name}_costs.csv"), &costs.to_csv(), written)
}

fn curves(ctx: &Ctx, args: CurvesArgs, written: &mut Vec<PathBuf>) -> Result<()> {
    let (_, valid, test) = ctx.splits(&args.data)?;
    let fractions = args.budgets.unwrap_or_else(|| ctx.cfg.policy.budget_fractions.clone());
    for path in &args.checkpoint {
        let model = load_model(path)?;
        let costs = model.static_cost_table().as_f64();
        let (first, last) = (costs[0], costs[costs.len() - 1]);
        let test_table = OutcomeTable::build(&model, &test)?;
        let valid_table = OutcomeTable::build(&model, &valid)?;
        let n = test.len() as f64;

        let anytime: Vec<f64> = fractions.iter().map(|f| f * last).collect();
        let mut budgeted = Vec::new();
        for f in &fractions {
            let b = f * n * last;
            if b < n * first {
                warn!("budget fraction {f} is below the cost of the first exit; skipped for budgeted prediction");
            } else {
                budgeted.push(b);
            }
        }
        let name = stem(path);
        let rows = accuracy_vs_budget_curve(&costs, &test_table, &valid_table, CurveMode::Anytime, &anytime)?;
        ctx.write(&format!("{name}_anytime.csv"), &curve_csv(&rows), written)?;
        let rows = accuracy_vs_budget_curve(&costs, &test_table, &valid_table, CurveMode::Budgeted, &budgeted)?;
        ctx.write(&format!("{name}_budgeted.csv"), &curve_csv(&rows), written)?;
    }
    Ok(())
}

fn heatmap(ctx: &Ctx, args: EvalArgs, written: &mut Vec<PathBuf>) -> Result<()> {
    let model = load_model(&args.checkpoint)?;
    if !model.config().pa_enabled {
        bail!(
            "{} is a plain residual model (pa_enabled = false); every position runs every unit, so there is no allocation to map",
            args.checkpoint.display()
        );
    }
    let (_, _, test) = ctx.splits(&args.data)?;
    let curves: Vec<&[f64]> = test.curves.iter().map(|c| c.values.as_slice()).collect();
    let layers = model.mean_layers(&curves)?;
    let width = model.config().input_width;
    let recipes = ctx.recipes(width)?;
    let mut out = String::from("block,position,mean_layers,near_peak\n");
    for (l, row) in layers.iter().enumerate() {
        let mask = synth::peak_mask(&recipes, width, row.len());
        for (i, (v, peak)) in row.iter().zip(mask).enumerate() {
            out.push_str(&format!("{},{i},{v},{}\n", l + 1, peak as u8));
        }
    }
    ctx.write(&format!("{}_heatmap.csv", stem(&args.checkpoint)), &out, written)
}

fn run_simulation(ctx: &Ctx, args: SimulateArgs, written: &mut Vec<PathBuf>) -> Result<()> {
    let model = load_model(&args.checkpoint)?;
    let text = std::fs::read_to_string(&args.scenario)
        .with_context(|| format!("reading {}", args.scenario.display()))?;
    let mut scenario = Scenario::parse(&text)?;
    scenario.seed = ctx.seed(Stream::Simulate).wrapping_add(scenario.seed);
    let (_, valid, test) = ctx.splits(&args.data)?;
    let name = stem(&args.checkpoint);
    let thresholds = match &args.thresholds {
        Some(path) => {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            parse_thresholds(&text, &path.display().to_string())?
        }
        None => {
            let fraction = args.fraction.unwrap_or(ctx.cfg.policy.simulate_fraction);
            let costs = model.static_cost_table().as_f64();
            let n = test.len();
            let table = OutcomeTable::build(&model, &valid)?;
            let plan = BudgetPlan::new(&costs, n, fraction * n as f64 * costs[costs.len() - 1], &table.confidences())?;
            let t = plan.thresholds;
            ctx.write(&format!("{name}_thresholds.csv"), &thresholds_csv(&t), written)?;
            t
        }
    };
    let result = simulate(&model, &thresholds, &scenario, &test)?;
    let agg = result.aggregate();
    info!(
        "{} samples: accuracy {:.4}, offload fraction {:.3}, {} failed",
        agg.samples,
        agg.accuracy,
        agg.offload_fraction(),
        agg.failed
    );
    ctx.write(&format!("{name}_sim_records.csv"), &records_csv(&result), written)?;
    ctx.write(&format!("{name}_sim_report.csv"), &latency_report(&result), written)
}

fn sweep(ctx: &Ctx, args: SweepArgs, written: &mut Vec<PathBuf>) -> Result<()> {
    let grid = match &args.grid {
        Some(path) => {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            toml::from_str::<GridSpec>(&text).with_context(|| format!("parsing {}", path.display()))?
        }
        None => ctx.cfg.sweep.clone(),
    };
    let (train_set, valid, test) = ctx.splits(&args.data)?;
    let base = model_config(ctx, &args.model, train_set.width)?;
    let tc = train_config(ctx, &args.model);
    info!("sweeping {} configurations", grid.configs(&base).len());
    let rows = hyper_sweep(&grid, &base, &tc, (&train_set, &valid, &test))?;
    ctx.write("sweep.csv", &sweep_csv(&rows), written)
}
