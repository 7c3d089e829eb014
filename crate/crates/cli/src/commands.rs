use std::collections::BTreeSet;
use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use serde::{Deserialize, Serialize};

use limnoplan::dataset::{self, IngestConfig, LakeSeries, RankedLake};
use limnoplan::evaluation::{sample_curve, GridSpec};
use limnoplan::imputation::{mice_impute, CovariateMatrix};
use limnoplan::joint::{FeasibilityGrid, JointSummary, MinimalConfig};
use limnoplan::pipeline::{
    prepare_lake, run_pipeline, write_completed_csv, write_train_test_csv, LakeFailure,
    PipelineOutput, RunConfig, StageCache,
};
use limnoplan::selection::{forward_selection, rank_features};
use limnoplan::synth::{generate_lake, SynthConfig};

use crate::{Cli, Command, GlobalArgs, GridArgs, JointArgs, LakesCommand, Switch};

pub const EXIT_FAILURE: u8 = 1;
pub const EXIT_CONFIG: u8 = 2;

pub struct CliError {
    pub code: u8,
    pub source: anyhow::Error,
}

type CliResult<T> = Result<T, CliError>;

trait OrExit<T> {
    /// Bad arguments or unreadable inputs.
    fn config(self, msg: &str) -> CliResult<T>;
    /// A computation that failed on valid inputs.
    fn failed(self, msg: &str) -> CliResult<T>;
}

impl<T, E: Into<anyhow::Error>> OrExit<T> for Result<T, E> {
    fn config(self, msg: &str) -> CliResult<T> {
        self.map_err(|e| CliError {
            code: EXIT_CONFIG,
            source: e.into().context(msg.to_string()),
        })
    }

    fn failed(self, msg: &str) -> CliResult<T> {
        self.map_err(|e| CliError {
            code: EXIT_FAILURE,
            source: e.into().context(msg.to_string()),
        })
    }
}

fn config_error(msg: String) -> CliError {
    CliError {
        code: EXIT_CONFIG,
        source: anyhow!(msg),
    }
}

pub fn run(cli: &Cli) -> CliResult<u8> {
    let g = &cli.global;
    match &cli.command {
        Command::Ingest { out } => ingest(g, out.as_deref()),
        Command::Lakes {
            command: LakesCommand::Rank { top, out },
        } => lakes_rank(g, *top, out.as_deref()),
        Command::Impute {
            lake,
            sweeps,
            noise,
            out,
            report,
        } => impute(g, *lake, *sweeps, *noise, out, report.as_deref()),
        Command::SampleCurve {
            lake,
            grid,
            out,
            sidecar,
        } => curve(g, *lake, grid, out.as_deref(), sidecar.as_deref()),
        Command::FeatureRank { lake, trees, out } => feature_rank(g, *lake, *trees, out.as_deref()),
        Command::FeatureSelect {
            lake,
            trees,
            out,
            sidecar,
        } => feature_select(g, *lake, *trees, out.as_deref(), sidecar.as_deref()),
        Command::Joint {
            lakes,
            args,
            out,
            emit_grid,
        } => joint(
            g,
            lakes.as_deref(),
            args,
            out.as_deref(),
            emit_grid.as_deref(),
        ),
        Command::Synth { config, out, truth } => synth(g, config, out, truth.as_deref()),
        Command::Report { args, top } => report(g, args, *top),
    }
}

fn resolve(g: &GlobalArgs, path: &Path) -> PathBuf {
    match &g.out_dir {
        Some(dir) if path.is_relative() => dir.join(path),
        _ => path.to_path_buf(),
    }
}

/// Buffered writer for `path`, or stdout.
fn open_out(g: &GlobalArgs, path: Option<&Path>) -> CliResult<Box<dyn Write>> {
    match path {
        None => Ok(Box::new(BufWriter::new(io::stdout().lock()))),
        Some(p) => {
            let p = resolve(g, p);
            if let Some(parent) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(parent)
                    .with_context(|| parent.display().to_string())
                    .config("cannot create output directory")?;
            }
            let f = File::create(&p)
                .with_context(|| p.display().to_string())
                .config("cannot create output file")?;
            Ok(Box::new(BufWriter::new(f)))
        }
    }
}

fn write_json<T: Serialize>(g: &GlobalArgs, path: Option<&Path>, value: &T) -> CliResult<()> {
    let mut w = open_out(g, path)?;
    serde_json::to_writer_pretty(&mut w, value).failed("cannot serialize output")?;
    writeln!(w)
        .and_then(|_| w.flush())
        .config("cannot write output")
}

fn sidecar_path(out: Option<&Path>, sidecar: Option<&Path>) -> Option<PathBuf> {
    sidecar
        .map(Path::to_path_buf)
        .or_else(|| out.map(|o| o.with_extension("json")))
}

fn run_config(g: &GlobalArgs) -> RunConfig {
    RunConfig {
        test_years: g.test_years,
        tolerance: g.tolerance,
        penalty: g.lambda,
        seed: g.seed,
        workers: g.workers,
        apply_exclusions: !g.no_exclusions,
        ..RunConfig::default()
    }
}

fn with_joint_args(mut cfg: RunConfig, a: &JointArgs) -> RunConfig {
    cfg.forest.n_trees = a.trees;
    cfg.grid = grid_spec(&a.grid);
    cfg.exclude_fallback = a.exclude_fallback;
    cfg.global_ranking = a.global_ranking;
    cfg
}

fn grid_spec(a: &GridArgs) -> GridSpec {
    GridSpec {
        n_min: a.n_min,
        stride: a.stride,
    }
}

fn validated(cfg: RunConfig) -> CliResult<RunConfig> {
    cfg.validate().config("invalid settings")?;
    Ok(cfg)
}

/// Parse every input; lakes come back sorted by id, before exclusions.
fn load_lakes(g: &GlobalArgs) -> CliResult<dataset::Ingested> {
    if g.input.is_empty() {
        return Err(config_error("no --input given".into()));
    }
    let ingest = IngestConfig {
        na_tokens: g.na_tokens.clone(),
    };
    let mut merged = dataset::Ingested::default();
    let mut ids = BTreeSet::new();
    for path in &g.input {
        let file = File::open(path)
            .with_context(|| path.display().to_string())
            .config("cannot open input")?;
        let parsed = dataset::parse_dataset(file, &ingest)
            .with_context(|| path.display().to_string())
            .config("cannot parse input")?;
        for lake in &parsed.lakes {
            if !ids.insert(lake.lake_id) {
                return Err(config_error(format!(
                    "lake {} appears in more than one input",
                    lake.lake_id
                )));
            }
        }
        if merged.feature_schema.is_empty() {
            merged.feature_schema = parsed.feature_schema;
        }
        merged.lakes.extend(parsed.lakes);
        merged.rejected.extend(parsed.rejected);
    }
    merged.lakes.sort_by_key(|l| l.lake_id);
    Ok(merged)
}

fn excluded(g: &GlobalArgs, lakes: Vec<LakeSeries>) -> Vec<LakeSeries> {
    if g.no_exclusions {
        lakes
    } else {
        lakes.iter().map(dataset::apply_exclusions).collect()
    }
}

fn load_lake(g: &GlobalArgs, id: u32) -> CliResult<LakeSeries> {
    let raw = load_lakes(g)?
        .lakes
        .into_iter()
        .filter(|l| l.lake_id == id)
        .collect();
    excluded(g, raw)
        .pop()
        .ok_or_else(|| config_error(format!("lake {id} not found in input")))
}

#[derive(Serialize)]
struct IngestSummary {
    feature_schema: Vec<String>,
    lakes: Vec<LakeLine>,
    rejected: Vec<dataset::RowError>,
}

#[derive(Serialize)]
struct LakeLine {
    lake_id: u32,
    lake_name: String,
    n_records: usize,
    n_with_sdd: usize,
    first_date: Option<String>,
    last_date: Option<String>,
}

fn ingest(g: &GlobalArgs, out: Option<&Path>) -> CliResult<u8> {
    let raw = load_lakes(g)?;
    let summary = IngestSummary {
        feature_schema: raw.feature_schema.clone(),
        lakes: raw
            .lakes
            .iter()
            .map(|l| LakeLine {
                lake_id: l.lake_id,
                lake_name: l.lake_name.clone(),
                n_records: l.len(),
                n_with_sdd: l.records.iter().filter(|r| r.sdd.is_some()).count(),
                first_date: l.records.first().map(|r| r.date.to_string()),
                last_date: l.records.last().map(|r| r.date.to_string()),
            })
            .collect(),
        rejected: raw.rejected,
    };
    if !summary.rejected.is_empty() {
        eprintln!("{} rows rejected", summary.rejected.len());
    }
    write_json(g, out, &summary)?;
    Ok(0)
}

#[derive(Debug, Serialize, Deserialize)]
pub struct LakeList {
    pub ranked: Vec<RankedLake>,
    /// Lake ids chosen for downstream commands.
    pub selected: Vec<u32>,
}

fn lakes_rank(g: &GlobalArgs, top: Option<usize>, out: Option<&Path>) -> CliResult<u8> {
    let lakes = excluded(g, load_lakes(g)?.lakes);
    let ranked = dataset::rank_lakes(&lakes).failed("cannot rank lakes")?;
    let k = top.unwrap_or(ranked.len());
    if k > ranked.len() {
        return Err(config_error(format!(
            "--top {k} exceeds the {} lakes available",
            ranked.len()
        )));
    }
    let selected = ranked[..k].iter().map(|r| r.lake_id).collect();
    write_json(g, out, &LakeList { ranked, selected })?;
    Ok(0)
}

fn impute(
    g: &GlobalArgs,
    id: u32,
    sweeps: usize,
    noise: Switch,
    out: &Path,
    report: Option<&Path>,
) -> CliResult<u8> {
    let mut cfg = run_config(g);
    cfg.impute.max_sweeps = sweeps;
    cfg.impute.add_noise = matches!(noise, Switch::On);
    let cfg = validated(cfg)?;
    let series = load_lake(g, id)?;
    let (completed, fit) = mice_impute(
        &CovariateMatrix::from_series(&series),
        &cfg.impute_config_for(id),
    )
    .failed("imputation failed")?;
    write_completed_csv(open_out(g, Some(out))?, &series, &completed)
        .config("cannot write completed matrix")?;
    write_json(g, report, &fit)?;
    Ok(0)
}

#[derive(Serialize)]
struct CurveSidecar {
    lake_id: u32,
    n_pre: usize,
    n_test: usize,
    reference_nmae: f64,
    n_star: Option<usize>,
    tolerance: f64,
}

fn curve(
    g: &GlobalArgs,
    id: u32,
    grid: &GridArgs,
    out: Option<&Path>,
    sidecar: Option<&Path>,
) -> CliResult<u8> {
    let mut cfg = run_config(g);
    cfg.grid = grid_spec(grid);
    let cfg = validated(cfg)?;
    let prepared = prepare_lake(load_lake(g, id)?, &cfg, None).failed("lake preparation failed")?;
    let c = sample_curve(&prepared.frame, &cfg.grid, cfg.tolerance, cfg.penalty)
        .failed("sample curve failed")?;

    let mut w = csv_writer(g, out)?;
    w.write_record(["n", "nmae"]).config("cannot write csv")?;
    for p in &c.points {
        w.write_record([p.n.to_string(), p.nmae.to_string()])
            .config("cannot write csv")?;
    }
    w.flush().config("cannot write csv")?;

    let side = CurveSidecar {
        lake_id: id,
        n_pre: prepared.frame.n_pre(),
        n_test: prepared.frame.n_test(),
        reference_nmae: c.reference_nmae,
        n_star: c.n_star,
        tolerance: c.tolerance,
    };
    if let Some(p) = sidecar_path(out, sidecar) {
        write_json(g, Some(&p), &side)?;
    } else {
        eprintln!(
            "n_star = {:?}, reference nMAE = {}",
            side.n_star, side.reference_nmae
        );
    }
    Ok(0)
}

fn csv_writer(g: &GlobalArgs, out: Option<&Path>) -> CliResult<csv::Writer<Box<dyn Write>>> {
    Ok(csv::Writer::from_writer(open_out(g, out)?))
}

fn feature_rank(g: &GlobalArgs, id: u32, trees: usize, out: Option<&Path>) -> CliResult<u8> {
    let mut cfg = run_config(g);
    cfg.forest.n_trees = trees;
    let cfg = validated(cfg)?;
    let prepared = prepare_lake(load_lake(g, id)?, &cfg, None).failed("lake preparation failed")?;
    let ranking =
        rank_features(&prepared.frame, &cfg.forest_config_for(id)).failed("ranking failed")?;
    write_json(g, out, &ranking)?;
    Ok(0)
}

fn feature_select(
    g: &GlobalArgs,
    id: u32,
    trees: usize,
    out: Option<&Path>,
    sidecar: Option<&Path>,
) -> CliResult<u8> {
    let mut cfg = run_config(g);
    cfg.forest.n_trees = trees;
    let cfg = validated(cfg)?;
    let prepared = prepare_lake(load_lake(g, id)?, &cfg, None).failed("lake preparation failed")?;
    let ranking =
        rank_features(&prepared.frame, &cfg.forest_config_for(id)).failed("ranking failed")?;
    let sel = forward_selection(&prepared.frame, &ranking, cfg.tolerance, cfg.penalty)
        .failed("selection failed")?;

    let mut w = csv_writer(g, out)?;
    w.write_record(["k", "nmae"]).config("cannot write csv")?;
    for p in &sel.nmae_by_k {
        w.write_record([p.k.to_string(), p.nmae.to_string()])
            .config("cannot write csv")?;
    }
    w.flush().config("cannot write csv")?;
    match sidecar_path(out, sidecar) {
        Some(p) => write_json(g, Some(&p), &sel)?,
        None => eprintln!("k* = {} ({})", sel.k_star, sel.subset.join(", ")),
    }
    Ok(0)
}

#[derive(Serialize)]
struct JointOutput<'a> {
    config_hash: &'a str,
    configs: Vec<&'a MinimalConfig>,
    summary: &'a Option<JointSummary>,
    failures: &'a [LakeFailure],
}

fn run_with_cache(
    g: &GlobalArgs,
    lakes: &[LakeSeries],
    cfg: &RunConfig,
) -> CliResult<PipelineOutput> {
    let cache = g.cache_dir.as_ref().map(StageCache::new);
    let out = run_pipeline(lakes, cfg, cache.as_ref()).config("invalid settings")?;
    if let Some(c) = &cache {
        tracing::info!(hits = c.hits(), misses = c.misses(), "stage cache");
    }
    for f in &out.bundle.failures {
        eprintln!(
            "lake {} ({}) skipped at {}: {}",
            f.lake_id, f.lake_name, f.stage, f.message
        );
    }
    Ok(out)
}

fn write_grids(g: &GlobalArgs, path: &Path, grids: &[(u32, &FeasibilityGrid)]) -> CliResult<()> {
    let mut w = csv_writer(g, Some(path))?;
    for (i, (id, grid)) in grids.iter().enumerate() {
        grid.write_rows(&mut w, Some(*id), i == 0)
            .config("cannot write grid")?;
    }
    if grids.is_empty() {
        w.write_record(["midas", "n", "k", "nmae", "feasible"])
            .config("cannot write grid")?;
    }
    w.flush().config("cannot write grid")
}

fn joint(
    g: &GlobalArgs,
    lake_list: Option<&Path>,
    args: &JointArgs,
    out: Option<&Path>,
    emit_grid: Option<&Path>,
) -> CliResult<u8> {
    let cfg = validated(with_joint_args(run_config(g), args))?;
    let mut lakes = load_lakes(g)?.lakes;
    if let Some(path) = lake_list {
        let text = fs::read_to_string(path)
            .with_context(|| path.display().to_string())
            .config("cannot read lake list")?;
        let list: LakeList = serde_json::from_str(&text).config("malformed lake list")?;
        if let Some(id) = list
            .selected
            .iter()
            .find(|id| !lakes.iter().any(|l| l.lake_id == **id))
        {
            return Err(config_error(format!(
                "lake {id} from the list is not in the input"
            )));
        }
        lakes.retain(|l| list.selected.contains(&l.lake_id));
    }
    let result = run_with_cache(g, &lakes, &cfg)?;
    let b = &result.bundle;
    write_json(
        g,
        out,
        &JointOutput {
            config_hash: &b.config_hash,
            configs: b.lakes.iter().map(|l| &l.minimal_config).collect(),
            summary: &b.joint_summary,
            failures: &b.failures,
        },
    )?;
    if let Some(path) = emit_grid {
        let grids: Vec<(u32, &FeasibilityGrid)> = result
            .artifacts
            .iter()
            .map(|a| (a.lake_id, &a.grid))
            .collect();
        write_grids(g, path, &grids)?;
    }
    Ok(b.exit_code() as u8)
}

#[derive(Deserialize)]
#[serde(untagged)]
enum SynthInput {
    Many(Vec<SynthConfig>),
    One(Box<SynthConfig>),
}

fn synth(g: &GlobalArgs, config: &Path, out: &Path, truth: Option<&Path>) -> CliResult<u8> {
    let text = fs::read_to_string(config)
        .with_context(|| config.display().to_string())
        .config("cannot read synth config")?;
    let configs = match serde_json::from_str(&text).config("malformed synth config")? {
        SynthInput::Many(v) => v,
        SynthInput::One(c) => vec![*c],
    };
    let mut lakes = Vec::new();
    let mut truths = Vec::new();
    for c in &configs {
        let (lake, t) = generate_lake(c).config("invalid synth config")?;
        lakes.push(lake);
        truths.push(t);
    }
    let w = open_out(g, Some(out))?;
    dataset::write_dataset(w, &lakes).config("cannot write synthetic data")?;
    if let Some(path) = truth {
        if truths.len() == 1 {
            write_json(g, Some(path), &truths[0])?;
        } else {
            write_json(g, Some(path), &truths)?;
        }
    }
    Ok(0)
}

fn report(g: &GlobalArgs, args: &JointArgs, top: Option<usize>) -> CliResult<u8> {
    let mut cfg = with_joint_args(run_config(g), args);
    cfg.top_lakes = top;
    let cfg = validated(cfg)?;
    let result = run_with_cache(g, &load_lakes(g)?.lakes, &cfg)?;
    let b = &result.bundle;

    write_json(g, Some(Path::new("report.json")), b)?;
    write_train_test_csv(
        open_out(g, Some(Path::new("train_test.csv")))?,
        &b.train_test,
    )
    .config("cannot write train/test table")?;

    let mut w = csv_writer(g, Some(Path::new("sample_curves.csv")))?;
    w.write_record(["midas", "n", "nmae"])
        .config("cannot write csv")?;
    for l in &b.lakes {
        for p in &l.sample_curve.points {
            w.write_record([l.lake_id.to_string(), p.n.to_string(), p.nmae.to_string()])
                .config("cannot write csv")?;
        }
    }
    w.flush().config("cannot write csv")?;

    let mut w = csv_writer(g, Some(Path::new("selection.csv")))?;
    w.write_record(["midas", "k", "nmae"])
        .config("cannot write csv")?;
    for l in &b.lakes {
        for p in &l.selection.nmae_by_k {
            w.write_record([l.lake_id.to_string(), p.k.to_string(), p.nmae.to_string()])
                .config("cannot write csv")?;
        }
    }
    w.flush().config("cannot write csv")?;

    let grids: Vec<(u32, &FeasibilityGrid)> = result
        .artifacts
        .iter()
        .map(|a| (a.lake_id, &a.grid))
        .collect();
    write_grids(g, Path::new("grid.csv"), &grids)?;
    for a in &result.artifacts {
        let name = PathBuf::from("completed").join(format!("{}.csv", a.lake_id));
        write_completed_csv(open_out(g, Some(&name))?, &a.series, &a.completed)
            .config("cannot write completed matrix")?;
    }

    eprintln!(
        "{} lakes reported, {} skipped; mean n* = {}",
        b.lakes.len(),
        b.failures.len(),
        b.mean_n_star
            .map_or_else(|| "n/a".into(), |v| format!("{v:.1}"))
    );
    Ok(b.exit_code() as u8)
}
