use std::path::{Path, PathBuf};

use clap::Args;
use serde::Serialize;
use umct::container::{read_volume, write_label, write_probmap};
use umct::nn::{checkpoint, ViewModel};
use umct::pipeline::{ensemble, multi_view_predict, normalize_intensity, preprocess, EnsembleMode, WindowSpec};
use umct::trainer::experiment::{build_data, read_dataset, CONFIG_JSON};
use umct::trainer::ExperimentConfig;
use umct::{Case, ViewSet};

use crate::{invalid, require_file, CliResult};

#[derive(Args)]
pub struct EvalArgs {
    /// A run directory written by `train` (config and checkpoints are taken from it).
    #[arg(long, conflicts_with_all = ["config", "checkpoints"])]
    run: Option<PathBuf>,
    #[arg(long, requires = "checkpoints")]
    config: Option<PathBuf>,
    #[arg(long, num_args = 1..)]
    checkpoints: Vec<PathBuf>,
    /// Evaluate every labeled case of a dataset directory instead of the config's test split.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long = "ensemble", value_parser = parse_mode, default_values = ["average"])]
    ensembles: Vec<EnsembleMode>,
    /// Use only the first k views.
    #[arg(long)]
    views: Option<usize>,
    #[arg(long)]
    out: PathBuf,
    /// Sliding-window size (cubic) when no config is available.
    #[arg(long, default_value_t = 32)]
    window: usize,
    /// Also write per-case predicted label maps.
    #[arg(long)]
    dump_predictions: bool,
}

fn parse_mode(s: &str) -> Result<EnsembleMode, String> {
    s.parse().map_err(|e: umct::Error| e.to_string())
}

fn mode_name(m: EnsembleMode) -> &'static str {
    match m {
        EnsembleMode::Average => "average",
        EnsembleMode::Majority => "majority",
    }
}

/// Loads checkpoints; `run_hash`, when given, must match every checkpoint.
pub fn load_models(paths: &[PathBuf], run_hash: Option<&str>) -> CliResult<(ViewSet, Vec<ViewModel<f32>>)> {
    if paths.is_empty() {
        return Err(invalid("no checkpoints given"));
    }
    let mut models = Vec::new();
    for p in paths {
        require_file(p)?;
        let ck = checkpoint::load::<f32>(p)?;
        if let Some(h) = run_hash {
            if ck.run_hash != h {
                return Err(umct::Error::HashMismatch { expected: h.to_string(), found: ck.run_hash }.into());
            }
        }
        models.push(ck.model);
    }
    let views = ViewSet::new(models.iter().map(|m| m.view()).collect(), models.iter().map(|m| m.view().token()).collect())?;
    Ok((views, models))
}

#[derive(Serialize)]
struct EvalReport {
    cases: usize,
    per_view_dsc: Vec<f64>,
    ensemble_dsc: Vec<(String, f64)>,
}

fn run_files(args: &EvalArgs) -> CliResult<(Option<ExperimentConfig>, Vec<PathBuf>)> {
    if let Some(run) = &args.run {
        let cfg_path = run.join(CONFIG_JSON);
        require_file(&cfg_path)?;
        let cfg: ExperimentConfig = serde_json::from_str(&std::fs::read_to_string(&cfg_path)?)
            .map_err(|e| invalid(format!("{}: {e}", cfg_path.display())))?;
        let mut ckpts: Vec<PathBuf> = (0..)
            .map(|i| run.join(format!("view{i}.ckpt")))
            .take_while(|p| p.exists())
            .collect();
        if ckpts.is_empty() {
            return Err(invalid(format!("{} holds no checkpoints", run.display())));
        }
        ckpts.sort();
        return Ok((Some(cfg), ckpts));
    }
    let cfg = match &args.config {
        Some(p) => {
            require_file(p)?;
            Some(umct::config::load_toml::<ExperimentConfig>(p)?)
        }
        None => None,
    };
    Ok((cfg, args.checkpoints.clone()))
}

fn eval_cases(args: &EvalArgs, cfg: Option<&ExperimentConfig>) -> CliResult<Vec<Case>> {
    match (&args.data, cfg) {
        (Some(dir), _) => {
            let spacing = cfg.map_or(1.0, |c| c.data.spacing_mm);
            let cases = read_dataset(dir)?
                .into_iter()
                .filter(|c| c.label.is_some())
                .map(|c| preprocess(&c, spacing))
                .collect::<umct::Result<Vec<_>>>()?;
            Ok(cases)
        }
        (None, Some(cfg)) => Ok(build_data(&cfg.data, cfg.train.mode)?.test),
        (None, None) => Err(invalid("pass --data, --config or --run to choose evaluation cases")),
    }
}

pub fn run_eval(args: &EvalArgs) -> CliResult {
    let (cfg, ckpts) = run_files(args)?;
    let hash = cfg.as_ref().map(|c| c.hash()).transpose()?;
    let (views, mut models) = load_models(&ckpts, hash.as_deref())?;
    if let Some(k) = args.views {
        if k == 0 || k > models.len() {
            return Err(invalid(format!("--views {k} outside 1..={}", models.len())));
        }
        models.truncate(k);
    }
    let views = ViewSet::new(views.transforms()[..models.len()].to_vec(), views.names()[..models.len()].to_vec())?;
    let cases = eval_cases(args, cfg.as_ref())?;
    let window = match &cfg {
        Some(c) => c.eval.window(c.train.patch.size),
        None => WindowSpec::half_overlap([args.window; 3]),
    };
    std::fs::create_dir_all(&args.out)?;

    let ids: Vec<String> = cases.iter().map(|c| c.id.clone()).collect();
    let gts: Vec<_> = cases.iter().map(|c| c.label.clone().expect("filtered to labeled cases")).collect();
    let mut per_view = vec![Vec::new(); models.len()];
    let mut ens: Vec<Vec<umct::LabelMap>> = vec![Vec::new(); args.ensembles.len()];
    for case in &cases {
        let preds = multi_view_predict(&models, &views, &case.volume, &window)?;
        for (i, p) in preds.iter().enumerate() {
            per_view[i].push(p.argmax());
        }
        if models.len() > 1 {
            for (k, &m) in args.ensembles.iter().enumerate() {
                ens[k].push(ensemble(&preds, m)?);
            }
        }
        if args.dump_predictions {
            let label = if models.len() > 1 { ensemble(&preds, args.ensembles[0])? } else { preds[0].argmax() };
            write_label(&args.out.join(format!("{}.pred.umct", case.id)), &label)?;
        }
    }
    let mut report = EvalReport { cases: cases.len(), per_view_dsc: Vec::new(), ensemble_dsc: Vec::new() };
    for (i, preds) in per_view.iter().enumerate() {
        let r = umct::metrics::EvalResult::from_predictions(&ids, preds, &gts)?;
        r.write_csv(&args.out.join(format!("eval_view{i}.csv")))?;
        report.per_view_dsc.push(r.mean_foreground());
    }
    if models.len() > 1 {
        for (k, &m) in args.ensembles.iter().enumerate() {
            let r = umct::metrics::EvalResult::from_predictions(&ids, &ens[k], &gts)?;
            r.write_csv(&args.out.join(format!("eval_{}.csv", mode_name(m))))?;
            report.ensemble_dsc.push((mode_name(m).to_string(), r.mean_foreground()));
        }
    }
    std::fs::write(args.out.join("eval_summary.json"), serde_json::to_string_pretty(&report)? + "\n")?;
    println!("{}", serde_json::to_string(&report)?);
    Ok(())
}

#[derive(Args)]
pub struct PredictArgs {
    #[arg(long, num_args = 1.., required = true)]
    checkpoints: Vec<PathBuf>,
    /// Volume container file.
    #[arg(long)]
    input: PathBuf,
    /// Output label map container.
    #[arg(long)]
    out: PathBuf,
    /// Also write the averaged probability map here.
    #[arg(long)]
    probs: Option<PathBuf>,
    #[arg(long, value_parser = parse_mode, default_value = "average")]
    ensemble: EnsembleMode,
    /// Sliding-window size (cubic).
    #[arg(long, default_value_t = 32)]
    window: usize,
    /// Resample to this isotropic spacing first; skip resampling when absent.
    #[arg(long)]
    spacing: Option<f64>,
}

fn predict_volume(args: &PredictArgs, path: &Path) -> CliResult {
    let (views, models) = load_models(&args.checkpoints, None)?;
    let volume = read_volume::<f32>(path)?;
    let case = Case { id: "input".into(), volume, label: None, domain_tag: String::new() };
    let case = match args.spacing {
        Some(mm) => preprocess(&case, mm)?,
        None => Case { volume: normalize_intensity(&case.volume), ..case },
    };
    let window = WindowSpec::half_overlap([args.window; 3]);
    let preds = multi_view_predict(&models, &views, &case.volume, &window)?;
    let label = ensemble(&preds, args.ensemble)?;
    write_label(&args.out, &label)?;
    if let Some(p) = &args.probs {
        let c = preds[0].n_classes();
        let n = preds.len() as f32;
        let mut mean = vec![0.0f32; preds[0].data().len()];
        for p in &preds {
            for (m, &v) in mean.iter_mut().zip(p.data()) {
                *m += v / n;
            }
        }
        write_probmap(p, &umct::ProbMap::new(c, label.shape(), mean)?)?;
    }
    println!("{}", args.out.display());
    Ok(())
}

pub fn run_predict(args: &PredictArgs) -> CliResult {
    require_file(&args.input)?;
    predict_volume(args, &args.input)
}
