//! Run configuration: the flag set shared by every subcommand, JSON config
//! files, seed resolution, background parsing, and the run manifest.
//!
//! Every flag has a config-file equivalent (same name, snake_case); flags win
//! on conflict. Each run writes `manifest.json` into its output directory
//! recording the resolved configuration, the tool version, and - when the
//! background is drawn - the fully expanded background document, so any
//! artifact can be reproduced byte-for-byte from its manifest alone.

use std::fmt;
use std::path::{Path, PathBuf};

use clap::Args;
use serde::{Deserialize, Serialize};

use sandpile::background::splitmix64;
use sandpile::{BackgroundSpec, Family};

/// Seed used whenever none is given, so every run is reproducible by default.
pub const DEFAULT_SEED: u64 = 12;

/// Errors split by exit code: `Usage` exits 2, `Failed` exits 1.
#[derive(Debug)]
pub enum CliError {
    /// Bad invocation: unknown values, malformed spec or config files.
    Usage(String),
    /// The run completed but the checked property failed, or a search did
    /// not certify within its budget.
    Failed(String),
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Failed(m) => write!(f, "{m}"),
        }
    }
}

impl From<sandpile::Error> for CliError {
    fn from(e: sandpile::Error) -> Self {
        match e {
            sandpile::Error::Argument(m) | sandpile::Error::Config(m) => CliError::Usage(m),
            sandpile::Error::Resource(m) => CliError::Failed(m),
            sandpile::Error::Io(e) => CliError::Failed(e.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Failed(e.to_string())
    }
}

pub type CliResult<T> = Result<T, CliError>;

pub fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

pub fn failed(msg: impl Into<String>) -> CliError {
    CliError::Failed(msg.into())
}

/// Artifact families a run may emit. The primary JSON report is always
/// written; `pgm` gates image snapshots and `csv` gates tabular grids.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum OutputFormat {
    Pgm,
    Csv,
    Json,
}

/// The shared flag set. Every field is optional so a config file and the
/// command line can each contribute; [`merge`] overlays flags on top of the
/// file. Fields irrelevant to a subcommand are simply ignored by it.
#[derive(Args, Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Params {
    /// Background field: `constant:C`, `bernoulli:A,B,P`, `counterexample:P`,
    /// `counterexample-stacked:P`, or `@spec.json` (a full background document)
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub background: Option<String>,

    /// Lattice dimension for inline background strings (default 2; the
    /// stacked counterexample defaults to 3)
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dim: Option<usize>,

    /// Window radius around the origin (crossing: the cube side k)
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub window: Option<i64>,

    /// Run exactly this many parallel steps instead of stabilizing
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub steps: Option<u64>,

    /// Chips added at the origin (simulate), or the wave source mass (wave)
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub chips: Option<u64>,

    /// Site seed: a number, or `random` to draw one (recorded in the
    /// manifest). Defaults to 12.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<String>,

    /// Seed list for sampling campaigns (comma-separated)
    #[arg(long, value_delimiter = ',')]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seeds: Option<Vec<u64>>,

    /// Scale list, strictly increasing (comma-separated)
    #[arg(long, value_delimiter = ',')]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub scales: Option<Vec<u64>>,

    /// Number of directions in the speed fan (default: 8 in d=2, 26 in d=3)
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub directions: Option<usize>,

    /// Largest arrival scale checked by `counterexample` (default 99)
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub nmax: Option<i64>,

    /// Dimension list for multi-dimension checks (comma-separated)
    #[arg(long, value_delimiter = ',')]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dims: Option<Vec<usize>>,

    /// Box side lengths for recurrence/bootstrap/reduce-dim (comma-separated)
    #[arg(long, value_delimiter = ',')]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sizes: Option<Vec<i64>>,

    /// Number of random trials per point
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub trials: Option<u64>,

    /// Bernoulli parameter for generated fields
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub p: Option<f64>,

    /// Chip budget for threshold searches (default 2^20)
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n_budget: Option<u64>,

    /// Parallel-step budget per run (default: command-specific, documented)
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub step_budget: Option<u64>,

    /// Length of the random frozen path for the filling experiment (wave)
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub path: Option<u64>,

    /// Output directory (default `sandpile-out`)
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,

    /// Worker threads (default: available parallelism). Never changes
    /// numerical output, only wall time.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub workers: Option<usize>,

    /// Artifact families to emit (comma-separated; default pgm,json)
    #[arg(long, value_delimiter = ',')]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub format: Option<Vec<OutputFormat>>,

    /// JSON config file with the same fields (or a manifest from a previous
    /// run); command-line flags win on conflict
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
}

/// The manifest written by every run: the subcommand, the tool version, the
/// resolved parameters, the fully expanded background document (when one is
/// in play), and the drawn seed when `--seed random` was used.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub command: String,
    pub version: String,
    pub params: Params,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub background: Option<BackgroundSpec>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub drawn_seed: Option<u64>,
}

/// Overlay `flags` on top of `file`: any flag that was given wins.
/// List-valued fields replace wholesale.
pub fn merge(file: Params, flags: Params) -> Params {
    Params {
        background: flags.background.or(file.background),
        dim: flags.dim.or(file.dim),
        window: flags.window.or(file.window),
        steps: flags.steps.or(file.steps),
        chips: flags.chips.or(file.chips),
        seed: flags.seed.or(file.seed),
        seeds: flags.seeds.or(file.seeds),
        scales: flags.scales.or(file.scales),
        directions: flags.directions.or(file.directions),
        nmax: flags.nmax.or(file.nmax),
        dims: flags.dims.or(file.dims),
        sizes: flags.sizes.or(file.sizes),
        trials: flags.trials.or(file.trials),
        p: flags.p.or(file.p),
        n_budget: flags.n_budget.or(file.n_budget),
        step_budget: flags.step_budget.or(file.step_budget),
        path: flags.path.or(file.path),
        out: flags.out.or(file.out),
        workers: flags.workers.or(file.workers),
        format: flags.format.or(file.format),
        config: flags.config,
    }
}

/// Everything a subcommand needs: merged parameters, the resolved background
/// document (if any), the created output directory, and the drawn seed.
pub struct Ctx {
    pub command: &'static str,
    pub params: Params,
    pub background: Option<BackgroundSpec>,
    pub drawn_seed: Option<u64>,
    pub out: PathBuf,
}

impl Ctx {
    /// The resolved numeric seed (drawn, given, or the documented default).
    pub fn seed(&self) -> u64 {
        match self.params.seed.as_deref() {
            Some(s) => s.parse().expect("the seed was validated during prepare"),
            None => DEFAULT_SEED,
        }
    }

    /// The background document, or a usage error naming the flag.
    pub fn background(&self) -> CliResult<BackgroundSpec> {
        self.background
            .clone()
            .ok_or_else(|| usage("this command needs --background"))
    }

    /// The background document, falling back to a command default.
    pub fn background_or(&self, default: impl FnOnce() -> CliResult<BackgroundSpec>) -> CliResult<BackgroundSpec> {
        match &self.background {
            Some(b) => Ok(b.clone()),
            None => default(),
        }
    }

    pub fn wants(&self, f: OutputFormat) -> bool {
        match &self.params.format {
            Some(list) => list.contains(&f),
            None => matches!(f, OutputFormat::Pgm | OutputFormat::Json),
        }
    }

    pub fn artifact(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    /// Write `manifest.json` for this run.
    pub fn write_manifest(&self) -> CliResult<()> {
        let manifest = RunConfig {
            command: self.command.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            params: self.params.clone(),
            background: self.background.clone(),
            drawn_seed: self.drawn_seed,
        };
        sandpile::io::write_json(&self.artifact("manifest.json"), &manifest)?;
        Ok(())
    }
}

/// Load the config file (a bare parameter document or a previous run's
/// manifest), merge the command line on top, resolve the seed and the
/// background, size the worker pool, and create the output directory.
pub fn prepare(command: &'static str, flags: Params) -> CliResult<Ctx> {
    let mut stored_background = None;
    let file_params = match &flags.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| usage(format!("cannot read config {}: {e}", path.display())))?;
            let value: serde_json::Value = serde_json::from_str(&text)
                .map_err(|e| usage(format!("malformed config {}: {e}", path.display())))?;
            if value.get("command").is_some() {
                let manifest: RunConfig = serde_json::from_value(value)
                    .map_err(|e| usage(format!("malformed manifest {}: {e}", path.display())))?;
                if manifest.command != command {
                    return Err(usage(format!(
                        "manifest {} records a `{}` run, not `{command}`",
                        path.display(),
                        manifest.command
                    )));
                }
                stored_background = manifest.background;
                manifest.params
            } else {
                let mut p: Params = serde_json::from_value(value)
                    .map_err(|e| usage(format!("malformed config {}: {e}", path.display())))?;
                // `@` background paths in a config file are relative to the
                // file, not to the working directory.
                if let (Some(bg), Some(dir)) = (&p.background, path.parent()) {
                    if let Some(rel) = bg.strip_prefix('@') {
                        if !Path::new(rel).is_absolute() {
                            p.background = Some(format!("@{}", dir.join(rel).display()));
                        }
                    }
                }
                p
            }
        }
        None => Params::default(),
    };
    let explicit_background = flags.background.is_some();
    let mut params = merge(file_params, flags);

    let drawn_seed = resolve_seed(&mut params)?;

    // The stored document is authoritative for reruns unless the command
    // line picked a new background.
    let background = if explicit_background || stored_background.is_none() {
        match &params.background {
            Some(text) => Some(resolve_background(text, &params)?),
            None => None,
        }
    } else {
        stored_background
    };

    let threads = params.workers.unwrap_or(0);
    // A second build_global in the same process is harmless: the pool is
    // already sized, and numerics never depend on it.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global();

    let out = params.out.clone().unwrap_or_else(|| PathBuf::from("sandpile-out"));
    std::fs::create_dir_all(&out)
        .map_err(|e| usage(format!("cannot create output directory {}: {e}", out.display())))?;

    Ok(Ctx { command, params, background, drawn_seed, out })
}

/// Validate the seed field, drawing a fresh one for `random` and writing the
/// drawn value back so the manifest reproduces the run.
fn resolve_seed(params: &mut Params) -> CliResult<Option<u64>> {
    match params.seed.as_deref() {
        None => Ok(None),
        Some("random") => {
            let nanos = std::time::SystemTime::now()
                .duration_since(std::time::UNIX_EPOCH)
                .map(|d| d.subsec_nanos() as u64 ^ d.as_secs())
                .unwrap_or(0);
            let drawn = splitmix64(nanos ^ ((std::process::id() as u64) << 32));
            params.seed = Some(drawn.to_string());
            Ok(Some(drawn))
        }
        Some(s) => match s.parse::<u64>() {
            Ok(_) => Ok(None),
            Err(_) => Err(usage(format!("--seed takes a number or `random`, got `{s}`"))),
        },
    }
}

/// Parse an inline background string or an `@file` document.
fn resolve_background(text: &str, params: &Params) -> CliResult<BackgroundSpec> {
    if let Some(path) = text.strip_prefix('@') {
        let body = std::fs::read_to_string(path)
            .map_err(|e| usage(format!("cannot read background {path}: {e}")))?;
        let mut spec = BackgroundSpec::from_json(&body)?;
        // An explicit --seed overrides the document's own; otherwise the
        // document keeps its seed.
        if let Some(s) = params.seed.as_deref() {
            spec.seed = s.parse().expect("validated in resolve_seed");
            spec.validate()?;
        }
        return Ok(spec);
    }

    let (name, args) = match text.split_once(':') {
        Some((n, a)) => (n, a),
        None => (text, ""),
    };
    let seed = params
        .seed
        .as_deref()
        .map(|s| s.parse::<u64>().expect("validated in resolve_seed"))
        .unwrap_or(DEFAULT_SEED);
    let parse_err = |what: &str| usage(format!("background `{text}`: {what}"));

    let (family, default_dim) = match name {
        "constant" => {
            let c: i32 = args.parse().map_err(|_| parse_err("expected constant:C"))?;
            (Family::Constant { c }, 2)
        }
        "bernoulli" => {
            let parts: Vec<&str> = args.split(',').collect();
            if parts.len() != 3 {
                return Err(parse_err("expected bernoulli:A,B,P"));
            }
            let a: i32 = parts[0].parse().map_err(|_| parse_err("A must be an integer"))?;
            let b: i32 = parts[1].parse().map_err(|_| parse_err("B must be an integer"))?;
            let p: f64 = parts[2].parse().map_err(|_| parse_err("P must be a number"))?;
            (Family::Bernoulli { a, b, p }, 2)
        }
        "counterexample" => {
            let p: f64 = if args.is_empty() {
                1.0
            } else {
                args.parse().map_err(|_| parse_err("expected counterexample:P"))?
            };
            (Family::Counterexample { p_zeta1: p }, 2)
        }
        "counterexample-stacked" => {
            let p: f64 = if args.is_empty() {
                1.0
            } else {
                args.parse().map_err(|_| parse_err("expected counterexample-stacked:P"))?
            };
            (Family::CounterexampleStacked { p_zeta1: p }, 3)
        }
        other => {
            return Err(usage(format!(
                "unknown background family `{other}` (expected constant, bernoulli, \
                 counterexample, counterexample-stacked, or @file.json)"
            )));
        }
    };
    let dim = params.dim.unwrap_or(default_dim);
    Ok(BackgroundSpec::new(dim, seed, family)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn full_params() -> Params {
        Params {
            background: Some("bernoulli:2,3,0.5".into()),
            dim: Some(2),
            window: Some(64),
            steps: Some(100),
            chips: Some(4096),
            seed: Some("7".into()),
            seeds: Some(vec![1, 2, 3]),
            scales: Some(vec![8, 16]),
            directions: Some(8),
            nmax: Some(99),
            dims: Some(vec![2, 3]),
            sizes: Some(vec![4, 8]),
            trials: Some(20),
            p: Some(0.25),
            n_budget: Some(1 << 20),
            step_budget: Some(1 << 14),
            path: Some(32),
            out: Some(PathBuf::from("out")),
            workers: Some(2),
            format: Some(vec![OutputFormat::Pgm, OutputFormat::Json]),
            config: None,
        }
    }

    #[test]
    fn params_round_trip_losslessly() {
        let p = full_params();
        let text = serde_json::to_string_pretty(&p).unwrap();
        let back: Params = serde_json::from_str(&text).unwrap();
        assert_eq!(p, back);

        let empty = Params::default();
        let text = serde_json::to_string(&empty).unwrap();
        assert_eq!(text, "{}");
        let back: Params = serde_json::from_str(&text).unwrap();
        assert_eq!(empty, back);
    }

    #[test]
    fn manifests_round_trip_losslessly() {
        let manifest = RunConfig {
            command: "simulate".into(),
            version: "0.1.0".into(),
            params: full_params(),
            background: Some(
                BackgroundSpec::new(2, 7, Family::Bernoulli { a: 2, b: 3, p: 0.5 }).unwrap(),
            ),
            drawn_seed: Some(99),
        };
        let text = serde_json::to_string_pretty(&manifest).unwrap();
        let back: RunConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(manifest, back);
    }

    #[test]
    fn flags_win_over_the_config_file() {
        let mut file = full_params();
        file.chips = Some(1);
        file.window = Some(9);
        let mut flags = Params::default();
        flags.chips = Some(0);
        let merged = merge(file, flags);
        assert_eq!(merged.chips, Some(0));
        assert_eq!(merged.window, Some(9));
        assert_eq!(merged.seed.as_deref(), Some("7"));
    }

    #[test]
    fn background_strings_parse_into_documents() {
        let params = Params { seed: Some("5".into()), ..Params::default() };
        let spec = resolve_background("constant:3", &params).unwrap();
        assert_eq!(spec.dimension, 2);
        assert_eq!(spec.seed, 5);
        assert_eq!(spec.family, Family::Constant { c: 3 });

        let spec = resolve_background("bernoulli:4,5,0.25", &Params {
            dim: Some(3),
            ..Params::default()
        })
        .unwrap();
        assert_eq!(spec.dimension, 3);
        assert_eq!(spec.seed, DEFAULT_SEED);
        assert_eq!(spec.family, Family::Bernoulli { a: 4, b: 5, p: 0.25 });

        let spec = resolve_background("counterexample-stacked:0.5", &Params::default()).unwrap();
        assert_eq!(spec.dimension, 3);

        assert!(resolve_background("nope:1", &Params::default()).is_err());
        assert!(resolve_background("bernoulli:2,3", &Params::default()).is_err());
    }

    #[test]
    fn random_seeds_are_recorded() {
        let mut params = Params { seed: Some("random".into()), ..Params::default() };
        let drawn = resolve_seed(&mut params).unwrap().expect("a seed is drawn");
        assert_eq!(params.seed.as_deref(), Some(drawn.to_string().as_str()));

        let mut params = Params { seed: Some("oops".into()), ..Params::default() };
        assert!(resolve_seed(&mut params).is_err());
    }
}
