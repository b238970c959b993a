use std::path::Path;

use serde::{Deserialize, Serialize};
use umct::synth::{generate_dataset, shift_domain, DomainShift, PhantomRecipe};
use umct::trainer::experiment::write_dataset;

use crate::{require_file, CliResult};

/// Recipe file: phantom parameters plus how many cases to draw.
#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthFile {
    pub n: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub recipe: PhantomRecipe,
    /// Generates the target domain of this shift instead of the recipe itself.
    pub shift: Option<DomainShift>,
}

pub fn run(recipe_path: &Path, out: &Path) -> CliResult {
    require_file(recipe_path)?;
    let spec: SynthFile = umct::config::load_toml(recipe_path)?;
    let recipe = match &spec.shift {
        Some(s) => shift_domain(&spec.recipe, s)?,
        None => spec.recipe.clone(),
    };
    let cases = generate_dataset(spec.n, &recipe, spec.seed)?;
    let manifest = write_dataset(out, &cases, &recipe, spec.seed)?;
    log::info!("wrote {} cases to {}", manifest.case_ids.len(), out.display());
    println!("{}", out.display());
    Ok(())
}
