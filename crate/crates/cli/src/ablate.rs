use std::path::PathBuf;

use clap::{Args, ValueEnum};
use serde::Serialize;
use umct::trainer::ablation::{
    adaptation_verdict, ordering_verdict, shift_suite, ssl_analog, ssl_verdict, ulf_analog, ulf_verdict, Scale,
    ShiftOutcome, SslOutcome, UlfOutcome, Verdict,
};

use crate::{require_file, CliResult};

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Experiment {
    Ssl,
    Ulf,
    Shift,
    All,
}

#[derive(Args)]
pub struct AblateArgs {
    #[arg(long, value_enum, default_value = "all")]
    experiment: Experiment,
    #[arg(long, value_delimiter = ',', default_values_t = [0u64, 1, 2, 3, 4])]
    seeds: Vec<u64>,
    /// TOML overriding the desk-scale sizes.
    #[arg(long)]
    scale: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Serialize, Default)]
struct Results {
    scale: Option<Scale>,
    ssl: Vec<SslRow>,
    ulf: Vec<UlfOutcome>,
    shift: Vec<ShiftOutcome>,
    verdicts: Vec<Verdict>,
}

#[derive(Serialize)]
struct SslRow {
    seed: u64,
    supervised_dsc: f64,
    umct_dsc: f64,
    umct_per_view_dsc: Vec<f64>,
}

fn write_rows<S: Serialize>(path: PathBuf, rows: &[S]) -> CliResult {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn run(args: &AblateArgs) -> CliResult {
    let scale: Scale = match &args.scale {
        Some(p) => {
            require_file(p)?;
            umct::config::load_toml(p)?
        }
        None => Scale::default(),
    };
    scale.recipe.validate()?;
    std::fs::create_dir_all(&args.out)?;
    let want = |e| args.experiment == e || args.experiment == Experiment::All;
    let mut res = Results { scale: Some(scale.clone()), ..Default::default() };

    if want(Experiment::Ssl) {
        let mut runs: Vec<SslOutcome> = Vec::new();
        for &seed in &args.seeds {
            let o = ssl_analog(&scale, seed)?;
            log::info!("ssl seed {seed}: supervised {:.4} umct {:.4}", o.supervised_dsc, o.umct_dsc);
            std::fs::write(args.out.join(format!("ssl_seed{seed}_metrics.csv")), &o.metrics_csv)?;
            runs.push(o);
        }
        res.verdicts.push(ssl_verdict(&runs));
        res.ssl = runs
            .into_iter()
            .map(|o| SslRow { seed: o.seed, supervised_dsc: o.supervised_dsc, umct_dsc: o.umct_dsc, umct_per_view_dsc: o.umct_per_view_dsc })
            .collect();
        let flat: Vec<_> = res.ssl.iter().map(|r| (r.seed, r.supervised_dsc, r.umct_dsc)).collect();
        write_rows(args.out.join("ssl.csv"), &flat)?;
    }
    if want(Experiment::Ulf) {
        for &seed in &args.seeds {
            let o = ulf_analog(&scale, seed)?;
            log::info!("ulf seed {seed}: ulf {:.4} uniform {:.4} share {:.3}", o.ulf_dsc, o.uniform_dsc, o.lowest_confidence_share);
            res.ulf.push(o);
        }
        res.verdicts.push(ulf_verdict(&res.ulf));
        write_rows(args.out.join("ulf.csv"), &res.ulf)?;
    }
    if want(Experiment::Shift) {
        for &seed in &args.seeds {
            let o = shift_suite(&scale, seed)?;
            log::info!("shift seed {seed}: direct {:.4} adapted {:.4}", o.direct_dsc, o.adapted_dsc);
            res.shift.push(o);
        }
        res.verdicts.push(adaptation_verdict(&res.shift));
        res.verdicts.push(ordering_verdict(&res.shift));
        write_rows(args.out.join("shift.csv"), &res.shift)?;
    }
    std::fs::write(args.out.join("results.json"), serde_json::to_string_pretty(&res)? + "\n")?;
    for v in &res.verdicts {
        println!("{v}");
    }
    Ok(())
}
