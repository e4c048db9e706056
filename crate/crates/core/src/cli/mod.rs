//! `lls` command-line front end.

pub mod manifest;

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{ArgAction, Args, Parser, Subcommand};
use serde::Serialize;

use crate::error::{io_err, LlsError, Result};
use crate::freq::{Dataset, MomentMatrix, MomentSource};
use crate::oracle::{principal_angles, SyntheticModel};
use crate::plane::{estimate_plane, Basis, PlaneConfig};
use crate::schema::{ResponsePattern, Schema};
use crate::solver::{conditional_moments, moment_residual, ConditionalMomentTable, SolverConfig};

use manifest::{default_manifest_path, FileDigest, Manifest, TOOL};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "lls", version, about = "Linear latent structure model estimation")]
pub struct Cli {
    /// More log output (-v info, -vv debug). RUST_LOG overrides.
    #[arg(short, long, action = ArgAction::Count, global = true)]
    verbose: u8,

    /// Manifest path (default: <primary output>.manifest.json).
    #[arg(long, global = true, value_name = "FILE")]
    manifest: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand, Serialize)]
#[serde(rename_all = "camelCase")]
enum Command {
    /// Draw a synthetic model and a dataset from it.
    Generate(GenerateArgs),
    /// Estimate the plane (basis) from data or exact model moments.
    Estimate(EstimateArgs),
    /// Solve for conditional moments of the latent coordinates.
    Moments(MomentsArgs),
    /// Compare an estimate with a known model.
    Evaluate(EvaluateArgs),
    /// Rerun a recorded invocation and check its outputs match.
    Replay(ReplayArgs),
}

#[derive(Debug, Args, Serialize)]
#[serde(rename_all = "camelCase")]
struct GenerateArgs {
    #[arg(long)]
    schema: PathBuf,
    /// Plane dimension K.
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    k: u64,
    /// Number of support points (at least K).
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    support: u64,
    /// Sample size.
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    n: u64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    model_out: PathBuf,
    #[arg(long)]
    data_out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
#[serde(rename_all = "camelCase")]
struct InputArgs {
    /// Schema file; optional with --from-moments.
    #[arg(long)]
    schema: Option<PathBuf>,
    /// Dataset CSV.
    #[arg(long, required_unless_present = "from_moments", conflicts_with = "from_moments")]
    data: Option<PathBuf>,
    /// Use the exact moments of a model file instead of data.
    #[arg(long, value_name = "MODEL")]
    from_moments: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
#[serde(rename_all = "camelCase")]
struct EstimateArgs {
    #[command(flatten)]
    input: InputArgs,
    /// Largest column-pattern order of the moment matrix.
    #[arg(long, default_value_t = 2, value_parser = clap::value_parser!(u64).range(1..))]
    max_col_order: u64,
    #[arg(long, default_value_t = 1.0, allow_negative_numbers = true)]
    rank_threshold_factor: f64,
    #[arg(long, default_value_t = 1.0, allow_negative_numbers = true)]
    eig_threshold_factor: f64,
    /// Fix K instead of choosing it from the spectrum.
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    k_override: Option<u64>,
    /// Weight columns by inverse sampling variance in the fit.
    #[arg(long)]
    weight_columns: bool,
    #[arg(long)]
    basis_out: PathBuf,
    #[arg(long)]
    report_out: Option<PathBuf>,
    /// Also write the moment matrix CSV.
    #[arg(long)]
    matrix_out: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
#[serde(rename_all = "camelCase")]
struct MomentsArgs {
    #[command(flatten)]
    input: InputArgs,
    #[arg(long)]
    basis: PathBuf,
    /// Pattern file (one comma-separated pattern per line) or `observed`.
    #[arg(long)]
    targets: String,
    /// Largest moment order R.
    #[arg(long, default_value_t = 2, value_parser = clap::value_parser!(u64).range(1..))]
    moment_order: u64,
    #[arg(long, default_value_t = crate::solver::DEFAULT_ANCHOR_WEIGHT, allow_negative_numbers = true)]
    anchor_weight: f64,
    #[arg(long)]
    max_iterations: Option<usize>,
    #[arg(long)]
    out: PathBuf,
    /// Solve report (default: <out> with .json extension).
    #[arg(long)]
    report_out: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
#[serde(rename_all = "camelCase")]
struct EvaluateArgs {
    /// True model.
    #[arg(long)]
    model: PathBuf,
    /// Estimated basis.
    #[arg(long)]
    basis: PathBuf,
    /// Conditional moments CSV to check against the relations.
    #[arg(long)]
    moments: Option<PathBuf>,
    /// Dataset for the frequencies in the residual; exact moments otherwise.
    #[arg(long, requires = "moments")]
    data: Option<PathBuf>,
    #[arg(long, default_value = "evaluation.json")]
    out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
#[serde(rename_all = "camelCase")]
struct ReplayArgs {
    manifest: PathBuf,
}

/// What a command read and wrote; the first output is the primary one.
struct Outcome {
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
}

#[derive(Debug)]
enum CliError {
    Usage(String),
    Lls(LlsError),
}

impl From<LlsError> for CliError {
    fn from(e: LlsError) -> Self {
        CliError::Lls(e)
    }
}

impl CliError {
    fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Lls(e) => e.exit_code(),
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage: {}", m),
            CliError::Lls(e) => write!(f, "{}", e),
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

/// Entry point for the binary; returns the process exit code.
pub fn main() -> i32 {
    run(std::env::args_os())
}

/// Parse `args` (program name first), run, and return the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let args: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    init_logging(cli.verbose);
    let argv: Vec<String> = args
        .iter()
        .skip(1)
        .map(|a| a.to_string_lossy().into_owned())
        .collect();
    match execute(&cli, &argv) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("lls: error: {}", e);
            e.exit_code()
        }
    }
}

fn init_logging(verbose: u8) {
    let level = match verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    let _ = env_logger::Builder::new()
        .filter_level(level)
        .parse_default_env()
        .format_timestamp(None)
        .try_init();
}

fn execute(cli: &Cli, argv: &[String]) -> CliResult<()> {
    let (name, outcome) = match &cli.command {
        Command::Generate(a) => ("generate", generate(a)?),
        Command::Estimate(a) => ("estimate", estimate(a)?),
        Command::Moments(a) => ("moments", moments(a)?),
        Command::Evaluate(a) => ("evaluate", evaluate(a)?),
        Command::Replay(a) => return replay(a),
    };
    write_manifest(cli, name, argv, &outcome)?;
    Ok(())
}

fn write_manifest(cli: &Cli, name: &str, argv: &[String], outcome: &Outcome) -> Result<()> {
    let cwd = std::env::current_dir().map_err(io_err("."))?;
    let config = match &cli.command {
        Command::Generate(a) => serde_json::to_value(a),
        Command::Estimate(a) => serde_json::to_value(a),
        Command::Moments(a) => serde_json::to_value(a),
        Command::Evaluate(a) => serde_json::to_value(a),
        Command::Replay(a) => serde_json::to_value(a),
    }
    .expect("arguments serialize");
    let digests = |paths: &[PathBuf]| -> Result<Vec<FileDigest>> {
        paths.iter().map(|p| FileDigest::of(p)).collect()
    };
    let m = Manifest {
        tool: TOOL.into(),
        version: crate::VERSION.into(),
        command: name.into(),
        argv: argv.to_vec(),
        cwd,
        config,
        inputs: digests(&outcome.inputs)?,
        outputs: digests(&outcome.outputs)?,
    };
    let path = cli
        .manifest
        .clone()
        .unwrap_or_else(|| default_manifest_path(&outcome.outputs[0]));
    m.save(&path)?;
    log::info!("manifest written to {}", path.display());
    Ok(())
}

fn positive(name: &str, v: f64) -> CliResult<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(CliError::Usage(format!("--{} must be a positive number, got {}", name, v)))
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(io_err(path))
}

/// Where moments come from, plus the files read to get them.
enum Source {
    Data(Dataset),
    Model(SyntheticModel),
}

impl Source {
    fn as_source(&self) -> &dyn MomentSource {
        match self {
            Source::Data(d) => d,
            Source::Model(m) => m,
        }
    }

    fn schema(&self) -> &Schema {
        self.as_source().schema()
    }
}

fn load_input(input: &InputArgs, inputs: &mut Vec<PathBuf>) -> CliResult<Source> {
    let schema = match &input.schema {
        Some(p) => {
            inputs.push(p.clone());
            Some(Schema::load(p)?)
        }
        None => None,
    };
    if let Some(path) = &input.data {
        let schema = schema.ok_or_else(|| CliError::Usage("--data requires --schema".into()))?;
        inputs.push(path.clone());
        return Ok(Source::Data(Dataset::load(path, &schema)?));
    }
    let path = input
        .from_moments
        .as_ref()
        .ok_or_else(|| CliError::Usage("one of --data or --from-moments is required".into()))?;
    inputs.push(path.clone());
    let model = SyntheticModel::load(path)?;
    if let Some(s) = schema {
        if &s != model.schema() {
            return Err(LlsError::Data(format!(
                "schema levels {:?} do not match model levels {:?}",
                s.levels(),
                model.schema().levels()
            ))
            .into());
        }
    }
    Ok(Source::Model(model))
}

fn check_same_schema(what: &str, a: &Schema, b: &Schema) -> Result<()> {
    if a != b {
        return Err(LlsError::Data(format!(
            "{} levels {:?} do not match input levels {:?}",
            what,
            a.levels(),
            b.levels()
        )));
    }
    Ok(())
}

fn generate(a: &GenerateArgs) -> CliResult<Outcome> {
    let schema = Schema::load(&a.schema)?;
    let model = SyntheticModel::generate(&schema, a.k as usize, a.support as usize, a.seed)?;
    let data = model.sample_dataset(a.n as usize, a.seed.wrapping_add(1))?;
    model.save(&a.model_out)?;
    data.write_csv(&a.data_out)?;
    println!(
        "generated K={} S={} n={} (J={}, cells={})",
        model.k(),
        model.support().len(),
        data.n(),
        schema.num_vars(),
        schema.total_cells()
    );
    Ok(Outcome {
        inputs: vec![a.schema.clone()],
        outputs: vec![a.model_out.clone(), a.data_out.clone()],
    })
}

fn estimate(a: &EstimateArgs) -> CliResult<Outcome> {
    positive("rank-threshold-factor", a.rank_threshold_factor)?;
    positive("eig-threshold-factor", a.eig_threshold_factor)?;
    let mut inputs = Vec::new();
    let source = load_input(&a.input, &mut inputs)?;
    let order = a.max_col_order as usize;
    let matrix = match &source {
        Source::Data(d) => {
            let counts = d.observed_level_counts();
            if let Some(j) = counts.iter().position(|&c| c < 2) {
                return Err(LlsError::Data(format!(
                    "variable {} takes a single observed value; drop it from the schema",
                    j
                ))
                .into());
            }
            MomentMatrix::from_dataset(d, order)?
        }
        Source::Model(m) => MomentMatrix::from_source(m, order)?,
    };
    let config = PlaneConfig {
        rank_threshold_factor: a.rank_threshold_factor,
        eig_threshold_factor: a.eig_threshold_factor,
        k_override: a.k_override.map(|k| k as usize),
        weight_columns: a.weight_columns,
        ..PlaneConfig::default()
    };
    let (basis, report) = estimate_plane(&matrix, &config)?;
    basis.save(&a.basis_out)?;
    let mut outputs = vec![a.basis_out.clone()];
    if let Some(p) = &a.report_out {
        report.save(p)?;
        outputs.push(p.clone());
    }
    if let Some(p) = &a.matrix_out {
        write_text(p, &matrix.to_csv())?;
        outputs.push(p.clone());
    }
    let top: Vec<String> = report
        .singular_values
        .iter()
        .take(report.k0.max(report.k) + 1)
        .map(|s| format!("{:.4e}", s))
        .collect();
    println!(
        "K0={} K={} minor={}x{} singular=[{}] threshold={:.4e} points={} residual={:.4e}",
        report.k0,
        report.k,
        report.minor_shape.0,
        report.minor_shape.1,
        top.join(", "),
        report.rank_threshold,
        report.points,
        report.residual
    );
    Ok(Outcome { inputs, outputs })
}

fn read_targets(spec: &str, source: &Source, inputs: &mut Vec<PathBuf>) -> CliResult<Vec<ResponsePattern>> {
    if spec == "observed" {
        return match source {
            Source::Data(d) => Ok(d.distinct_patterns()),
            Source::Model(_) => Err(CliError::Usage("--targets observed requires --data".into())),
        };
    }
    let path = PathBuf::from(spec);
    let text = std::fs::read_to_string(&path).map_err(io_err(&path))?;
    inputs.push(path.clone());
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let p = ResponsePattern::parse(source.schema(), line).map_err(|e| LlsError::Parse {
            path: path.clone(),
            line: i + 1,
            msg: e.to_string(),
        })?;
        out.push(p);
    }
    Ok(out)
}

fn moments(a: &MomentsArgs) -> CliResult<Outcome> {
    positive("anchor-weight", a.anchor_weight)?;
    let mut inputs = Vec::new();
    let source = load_input(&a.input, &mut inputs)?;
    inputs.push(a.basis.clone());
    let basis = Basis::load(&a.basis)?;
    check_same_schema("basis", basis.schema(), source.schema())?;
    let targets = read_targets(&a.targets, &source, &mut inputs)?;

    let masses = source.as_source().moments(&targets);
    let (kept, skipped): (Vec<_>, Vec<_>) = targets.into_iter().zip(masses).partition(|(_, m)| *m > 0.0);
    let kept: Vec<ResponsePattern> = kept.into_iter().map(|(p, _)| p).collect();
    let skipped: Vec<String> = skipped.into_iter().map(|(p, _)| p.to_string()).collect();
    for p in &skipped {
        log::warn!("target {} has zero frequency; skipped", p);
    }

    let config = SolverConfig {
        moment_order: a.moment_order as usize,
        anchor_weight: a.anchor_weight,
        max_iterations: a.max_iterations,
        ..SolverConfig::default()
    };
    let (mut table, freq): (ConditionalMomentTable, _) =
        conditional_moments(&basis, source.as_source(), &kept, &config)?;
    let relation_residual = moment_residual(&basis, &freq, &table);
    if let Some(r) = table.report.as_mut() {
        r.skipped_targets = skipped.clone();
        r.relation_residual = Some(relation_residual);
    }
    table.save_csv(&a.out)?;
    let report_out = a.report_out.clone().unwrap_or_else(|| a.out.with_extension("json"));
    write_text(&report_out, &table.report_json())?;

    if let Some(r) = &table.report {
        println!(
            "targets={} skipped={} unknowns={} equations={} (relations {}, anchors {}, normalizations {}) residualNorm={:.4e} relationResidual={:.4e}{}",
            r.targets.len(),
            skipped.len(),
            r.unknowns,
            r.relations + r.anchors + r.normalizations,
            r.relations,
            r.anchors,
            r.normalizations,
            r.residual_norm,
            relation_residual,
            if r.flags.is_empty() { String::new() } else { format!(" flags={}", r.flags.join(",")) }
        );
    }
    Ok(Outcome {
        inputs,
        outputs: vec![a.out.clone(), report_out],
    })
}

#[derive(Serialize)]
#[serde(rename_all = "camelCase")]
struct Evaluation {
    k_true: usize,
    k_estimated: usize,
    principal_angles: Vec<f64>,
    max_angle: f64,
    /// Largest distance of a true support point from the estimated plane.
    support_plane_distance: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    relation_residual: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    conditional_moment_error: Option<f64>,
}

fn evaluate(a: &EvaluateArgs) -> CliResult<Outcome> {
    let mut inputs = vec![a.model.clone(), a.basis.clone()];
    let model = SyntheticModel::load(&a.model)?;
    let basis = Basis::load(&a.basis)?;
    check_same_schema("basis", basis.schema(), model.schema())?;
    let angles = principal_angles(model.basis(), &basis)?;
    let max_angle = angles.iter().cloned().fold(0.0, f64::max);
    let (reexpressed, support_plane_distance) = model.reexpress(&basis)?;

    let mut relation_residual = None;
    let mut conditional_moment_error = None;
    if let Some(mpath) = &a.moments {
        inputs.push(mpath.clone());
        let table = ConditionalMomentTable::load_csv(mpath, model.schema())?;
        let patterns: Vec<ResponsePattern> = {
            let mut ps: Vec<_> = table.rows().iter().map(|r| r.pattern.clone()).collect();
            ps.sort();
            ps.dedup();
            let mut all = Vec::new();
            for p in &ps {
                all.push(p.clone());
                for (j, l) in model.schema().cells().map(|c| (c.variable, c.level)) {
                    if p.is_free(j) {
                        all.push(p.add_level(model.schema(), j, l)?);
                    }
                }
            }
            all
        };
        let freq = match &a.data {
            Some(d) => {
                inputs.push(d.clone());
                let data = Dataset::load(d, model.schema())?;
                crate::freq::FrequencyTable::tabulate(&data, &patterns)
            }
            None => crate::freq::FrequencyTable::tabulate(&model, &patterns),
        };
        relation_residual = Some(moment_residual(&basis, &freq, &table));
        let mut worst: f64 = 0.0;
        for r in table.rows() {
            if let Some(c) = r.conditional {
                if let Ok(exact) = reexpressed.exact_conditional_moment(&r.index, &r.pattern) {
                    worst = worst.max((c - exact).abs());
                }
            }
        }
        conditional_moment_error = Some(worst);
    }

    let ev = Evaluation {
        k_true: model.k(),
        k_estimated: basis.k(),
        principal_angles: angles,
        max_angle,
        support_plane_distance,
        relation_residual,
        conditional_moment_error,
    };
    write_text(&a.out, &serde_json::to_string_pretty(&ev).expect("evaluation serializes"))?;
    let fmt: Vec<String> = ev.principal_angles.iter().map(|x| format!("{:.4e}", x)).collect();
    print!(
        "K true={} estimated={} angles=[{}] maxAngle={:.4e} supportDistance={:.4e}",
        ev.k_true,
        ev.k_estimated,
        fmt.join(", "),
        ev.max_angle,
        ev.support_plane_distance
    );
    if let Some(r) = ev.relation_residual {
        print!(" relationResidual={:.4e}", r);
    }
    if let Some(r) = ev.conditional_moment_error {
        print!(" conditionalMomentError={:.4e}", r);
    }
    println!();
    Ok(Outcome {
        inputs,
        outputs: vec![a.out.clone()],
    })
}

fn replay(a: &ReplayArgs) -> CliResult<()> {
    let m = Manifest::load(&a.manifest)?;
    if m.version != crate::VERSION {
        log::warn!("manifest was written by version {}, running {}", m.version, crate::VERSION);
    }
    for d in &m.inputs {
        let path = m.resolve(&d.path);
        let now = manifest::sha256_file(&path)?;
        if now != d.sha256 {
            return Err(LlsError::Data(format!("input {} changed since the recorded run", path.display())).into());
        }
    }
    let prev = std::env::current_dir().map_err(io_err("."))?;
    std::env::set_current_dir(&m.cwd).map_err(io_err(&m.cwd))?;
    let mut args: Vec<String> = vec![TOOL.into()];
    args.extend(m.argv.iter().cloned());
    let result = Cli::try_parse_from(&args)
        .map_err(|e| CliError::Usage(format!("recorded arguments no longer parse: {}", e)))
        .and_then(|cli| match cli.command {
            Command::Replay(_) => Err(CliError::Usage("cannot replay a replay".into())),
            _ => execute(&cli, &m.argv),
        });
    std::env::set_current_dir(&prev).map_err(io_err(&prev))?;
    result?;

    let mut differing = Vec::new();
    for d in &m.outputs {
        let path = m.resolve(&d.path);
        if manifest::sha256_file(&path)? != d.sha256 {
            differing.push(path.display().to_string());
        }
    }
    if !differing.is_empty() {
        return Err(LlsError::Data(format!("replay produced different outputs: {}", differing.join(", "))).into());
    }
    println!("replay ok: {} outputs identical", m.outputs.len());
    Ok(())
}
