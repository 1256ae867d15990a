use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use anyhow::Context;
use serde_json::json;
use trajdest::eval::{evaluate, snippet_evaluate, write_kaggle_csv, EvalReport};
use trajdest::exec::Execution;
use trajdest::geo::GeoPoint;
use trajdest::ingest::{
    attach_weather, generate_synthetic_city, parse_crawdad_sf, parse_porto_csv, read_trips_jsonl,
    split_dataset, write_trips_jsonl, DatasetSplit, SplitIds, Trajectory, TripMetadata,
};
use trajdest::models::{AnyModel, Baseline, EncodedTrip, ModelKind, NeuralModel, Query};
use trajdest::partition::SpacePartition;
use trajdest::preprocess::run_pipeline;
use trajdest::routing::{predict_routes, RoadGraph};
use trajdest::train::{train, write_train_log, TrainError};

use crate::config::{DataFormat, Preset, RunConfig};
use crate::error::{invalid, CliResult};

pub struct Ctx {
    pub cfg: RunConfig,
    pub exec: Execution,
    pub threads: Option<usize>,
    pub command: &'static str,
    pub started: Instant,
}

impl Ctx {
    fn stage(&self, name: &str) -> PathBuf {
        self.cfg.data_dir.join(name)
    }

    fn create_stage(&self, name: &str) -> CliResult<PathBuf> {
        let dir = self.stage(name);
        std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        Ok(dir)
    }

    /// Resolved config snapshot plus the run metadata sidecar.
    fn finish(&self, dir: &Path, cfg: &RunConfig) -> CliResult<()> {
        std::fs::write(dir.join("config.toml"), cfg.to_toml())?;
        let started_unix = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_secs_f64() - self.started.elapsed().as_secs_f64())
            .unwrap_or(0.0);
        let meta = json!({
            "command": self.command,
            "version": env!("CARGO_PKG_VERSION"),
            "started_unix": started_unix,
            "elapsed_s": self.started.elapsed().as_secs_f64(),
            "threads": self.threads,
            "execution": format!("{:?}", self.exec),
        });
        std::fs::write(
            dir.join("run_meta.json"),
            serde_json::to_string_pretty(&meta)?,
        )?;
        Ok(())
    }
}

fn require(path: PathBuf, producer: &str) -> CliResult<PathBuf> {
    if path.exists() {
        Ok(path)
    } else {
        Err(invalid(format!(
            "missing {}; run `trajdest {producer}` first",
            path.display()
        )))
    }
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn csv_file(path: &Path) -> CliResult<BufWriter<File>> {
    Ok(BufWriter::new(
        File::create(path).with_context(|| format!("creating {}", path.display()))?,
    ))
}

pub fn ingest(
    ctx: &Ctx,
    input: Option<PathBuf>,
    format: Option<DataFormat>,
    weather: Option<PathBuf>,
) -> CliResult<()> {
    let mut cfg = ctx.cfg.clone();
    if let Some(f) = format {
        cfg.ingest.format = f;
    }
    if input.is_some() {
        cfg.ingest.input = input;
    }
    if weather.is_some() {
        cfg.ingest.weather = weather;
    }
    let Some(input) = cfg.ingest.input.clone() else {
        return Err(invalid("no input: pass --input or set [ingest] input"));
    };
    if !input.exists() {
        return Err(invalid(format!("input {} does not exist", input.display())));
    }
    if let Some(w) = &cfg.ingest.weather {
        if !w.exists() {
            return Err(invalid(format!(
                "weather file {} does not exist",
                w.display()
            )));
        }
    }
    let offset = cfg.ingest.utc_offset_s;
    let (mut trips, report) = match cfg.ingest.format {
        DataFormat::Porto => parse_porto_csv(&input, offset, ctx.exec),
        DataFormat::Crawdad => parse_crawdad_sf(&input, offset, ctx.exec),
    }
    .map_err(|e| match e {
        trajdest::ingest::IngestError::MissingHeader(_) => invalid(e.to_string()),
        e => anyhow::Error::new(e).context(format!("parsing {}", input.display())),
    })?;
    attach_weather(&mut trips, cfg.ingest.weather.as_deref(), offset);

    let dir = ctx.create_stage("ingest")?;
    write_trips_jsonl(&dir.join("trips.jsonl"), &trips)?;
    write_json(&dir.join("parse_report.json"), &report)?;
    ctx.finish(&dir, &cfg)?;
    println!(
        "ingested {} trips ({} rows, {} rejected, {} missing data) into {}",
        trips.len(),
        report.rows,
        report.rejected,
        report.dropped_missing,
        dir.display()
    );
    Ok(())
}

pub fn synth(ctx: &Ctx) -> CliResult<()> {
    let city = generate_synthetic_city(&ctx.cfg.synth);
    let dir = ctx.create_stage("synth")?;
    write_trips_jsonl(&dir.join("trips.jsonl"), &city.trips)?;
    city.graph
        .write(&dir.join("nodes.txt"), &dir.join("edges.txt"))?;
    let b = city.bbox();
    write_json(
        &dir.join("bbox.json"),
        &[b.min_lat, b.max_lat, b.min_lon, b.max_lon],
    )?;
    ctx.finish(&dir, &ctx.cfg)?;
    println!(
        "generated {} trips on a {}-node road graph into {}",
        city.trips.len(),
        city.graph.num_nodes(),
        dir.display()
    );
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Source {
    Ingest,
    Synth,
}

pub fn preprocess(ctx: &Ctx, source: Option<Source>) -> CliResult<()> {
    let source = match source {
        Some(s) => s,
        None if ctx.stage("ingest").join("trips.jsonl").exists() => Source::Ingest,
        None if ctx.stage("synth").join("trips.jsonl").exists() => Source::Synth,
        None => {
            return Err(invalid(format!(
                "no trips under {}; run `trajdest ingest` or `trajdest synth` first",
                ctx.cfg.data_dir.display()
            )))
        }
    };
    let (stage, producer) = match source {
        Source::Ingest => ("ingest", "ingest"),
        Source::Synth => ("synth", "synth"),
    };
    let trips_path = require(ctx.stage(stage).join("trips.jsonl"), producer)?;
    let preset = ctx
        .cfg
        .preprocess
        .preset
        .unwrap_or(match (source, ctx.cfg.ingest.format) {
            (Source::Synth, _) => Preset::Synthetic,
            (Source::Ingest, DataFormat::Porto) => Preset::Porto,
            (Source::Ingest, DataFormat::Crawdad) => Preset::SanFrancisco,
        });
    let synth_bbox = std::fs::read_to_string(ctx.stage("synth").join("bbox.json"))
        .ok()
        .and_then(|t| serde_json::from_str::<[f64; 4]>(&t).ok());
    let pcfg = ctx.cfg.preprocess.resolve(preset, synth_bbox)?;

    let trips = read_trips_jsonl(&trips_path)
        .with_context(|| format!("reading {}", trips_path.display()))?;
    let (kept, report) = run_pipeline(trips, &pcfg, ctx.exec)?;
    let split = split_dataset(kept.clone(), ctx.cfg.seed).map_err(|e| invalid(e.to_string()))?;

    let dir = ctx.create_stage("preprocess")?;
    write_trips_jsonl(&dir.join("trips.jsonl"), &kept)?;
    report.write_csv(csv_file(&dir.join("report.csv"))?)?;
    write_json(&dir.join("report.json"), &report)?;
    write_json(&dir.join("split.json"), &split.ids())?;

    let mut snapshot = ctx.cfg.clone();
    snapshot.preprocess.preset = Some(preset);
    snapshot.preprocess.min_duration_s = Some(pcfg.min_duration_s);
    snapshot.preprocess.max_duration_s = Some(pcfg.max_duration_s);
    snapshot.preprocess.speed_limit_kmh = Some(pcfg.speed_limit_kmh);
    snapshot.preprocess.bbox = Some(pcfg.bbox);
    snapshot.preprocess.tau_threshold = Some(pcfg.tau_threshold);
    ctx.finish(&dir, &snapshot)?;
    println!(
        "kept {} of {} trips (tau threshold {:.3}); split {}/{}/{} into {}",
        report.final_count(),
        report.rows.first().map_or(0, |r| r.kept_count),
        report.tau_threshold,
        split.train.len(),
        split.validation.len(),
        split.test.len(),
        dir.display()
    );
    Ok(())
}

fn load_split(ctx: &Ctx) -> CliResult<DatasetSplit> {
    let trips_path = require(ctx.stage("preprocess").join("trips.jsonl"), "preprocess")?;
    let ids_path = require(ctx.stage("preprocess").join("split.json"), "preprocess")?;
    let ids: SplitIds = serde_json::from_str(&std::fs::read_to_string(&ids_path)?)
        .with_context(|| format!("reading {}", ids_path.display()))?;
    Ok(DatasetSplit::from_ids(read_trips_jsonl(&trips_path)?, &ids))
}

fn load_partition(ctx: &Ctx) -> CliResult<SpacePartition> {
    let path = require(ctx.stage("partition").join("partition.json"), "partition")?;
    SpacePartition::from_json(&std::fs::read_to_string(&path)?)
        .with_context(|| format!("reading {}", path.display()))
}

pub fn partition(ctx: &Ctx) -> CliResult<()> {
    let split = load_split(ctx)?;
    let points: Vec<GeoPoint> = split
        .train
        .iter()
        .flat_map(|t| t.points.iter().copied())
        .collect();
    let pcfg = ctx.cfg.partition.resolve(points.len())?;
    let part = SpacePartition::build(&points, pcfg).map_err(|e| invalid(e.to_string()))?;
    let dir = ctx.create_stage("partition")?;
    std::fs::write(dir.join("partition.json"), part.to_json()?)?;
    part.export_regions_geojson(&dir.join("regions.geojson"))?;
    let mut snapshot = ctx.cfg.clone();
    snapshot.partition.points_per_region_max = Some(pcfg.points_per_region_max);
    ctx.finish(&dir, &snapshot)?;
    println!(
        "{} regions from {} training points (n_ppr {}) into {}",
        part.num_regions(),
        points.len(),
        pcfg.points_per_region_max,
        dir.display()
    );
    Ok(())
}

pub fn export_regions(ctx: &Ctx, out: Option<PathBuf>) -> CliResult<()> {
    let part = load_partition(ctx)?;
    let out = out.unwrap_or_else(|| ctx.stage("partition").join("regions.geojson"));
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    part.export_regions_geojson(&out)?;
    println!("wrote {} regions to {}", part.num_regions(), out.display());
    Ok(())
}

/// Full-scale recipe used by `--full-repro`.
fn full_repro_recipe(cfg: &mut RunConfig) {
    cfg.model.embed_trip = 64;
    cfg.model.embed_meta = 16;
    cfg.model.lstm_hidden = 256;
    cfg.model.n_lstm = 2;
    cfg.model.n_dense = 2;
    cfg.model.dense_hidden = 512;
    cfg.train.epochs = 60;
    cfg.train.warmup_epochs = 5;
    cfg.train.batch_size = 256;
    cfg.train.lr = 1e-3;
}

fn model_dir(ctx: &Ctx, kind: ModelKind) -> PathBuf {
    ctx.stage("models").join(kind.name())
}

fn encode(trips: &[Trajectory], part: &SpacePartition) -> Vec<EncodedTrip> {
    trips.iter().map(|t| EncodedTrip::new(t, part)).collect()
}

pub fn train_cmd(ctx: &Ctx, kind: ModelKind, full_repro: bool) -> CliResult<()> {
    let mut cfg = ctx.cfg.clone();
    if full_repro {
        full_repro_recipe(&mut cfg);
        log::warn!("--full-repro: full-scale recipe, expect hours of training on full data");
    }
    let split = load_split(ctx)?;
    let part = load_partition(ctx)?;
    let centroids = part.centroids();
    cfg.model.n_regions = part.num_regions();
    let train_set = encode(&split.train, &part);
    let dir = model_dir(ctx, kind);

    let summary = if kind.is_neural() {
        let validation = encode(&split.validation, &part);
        let model = NeuralModel::new(kind, cfg.model.clone(), cfg.train.seed)
            .map_err(|e| invalid(e.to_string()))?;
        let outcome = match train(
            model,
            &train_set,
            &validation,
            &centroids,
            &cfg.train,
            ctx.exec,
        ) {
            Ok(o) => o,
            Err(TrainError::Diverged {
                epoch,
                batch,
                reason,
                state,
            }) => {
                std::fs::create_dir_all(&dir)?;
                let dump = dir.join("diverged_state.json");
                std::fs::write(&dump, state.as_str())?;
                anyhow::bail!(
                    "training diverged at epoch {epoch}, batch {batch}: {reason}; state dumped to {}",
                    dump.display()
                );
            }
            Err(e) => return Err(e.into()),
        };
        std::fs::create_dir_all(&dir)?;
        write_train_log(&outcome.log, csv_file(&dir.join("train_log.csv"))?)?;
        AnyModel::Neural(outcome.best).save(&dir.join("model.json"))?;
        format!("best epoch {} of {}", outcome.best_epoch, cfg.train.epochs)
    } else {
        let dest = train_set.iter().filter_map(|t| t.regions.last().copied());
        let baseline = Baseline::fit(dest, part.num_regions(), cfg.model.baseline_k)?;
        std::fs::create_dir_all(&dir)?;
        let n = baseline.candidates().len();
        AnyModel::Baseline(baseline).save(&dir.join("model.json"))?;
        format!("{n} candidate regions")
    };
    ctx.finish(&dir, &cfg)?;
    println!("trained {kind} ({summary}) into {}", dir.display());
    Ok(())
}

fn load_model(ctx: &Ctx, kind: ModelKind, part: &SpacePartition) -> CliResult<AnyModel> {
    let path = require(
        model_dir(ctx, kind).join("model.json"),
        &format!("train --model {kind}"),
    )?;
    let model = AnyModel::load(&path).with_context(|| format!("loading {}", path.display()))?;
    let n = model.as_predictor().n_regions();
    if n != part.num_regions() {
        return Err(invalid(format!(
            "model {} expects {n} regions but the partition has {}; retrain after `trajdest partition`",
            path.display(),
            part.num_regions()
        )));
    }
    Ok(model)
}

/// Published reference figures for `--full-repro` reports: (dataset, model, E1 m, E2 m).
const REFERENCE_TABLE: [(&str, ModelKind, f64, Option<f64>); 8] = [
    ("porto", ModelKind::Baseline, 2504.0, None),
    ("porto", ModelKind::Mlp, 1595.0, Some(1635.0)),
    ("porto", ModelKind::SingleLstm, 1460.0, Some(1567.0)),
    ("porto", ModelKind::MultiLstm, 1430.0, Some(1480.0)),
    ("san_francisco", ModelKind::Baseline, 2103.0, None),
    ("san_francisco", ModelKind::Mlp, 1573.0, Some(1672.0)),
    ("san_francisco", ModelKind::SingleLstm, 1300.0, Some(1462.0)),
    ("san_francisco", ModelKind::MultiLstm, 1315.0, Some(1388.0)),
];

/// Kaggle public score of the best multi-input model, in meters.
const REFERENCE_KAGGLE_M: f64 = 1995.0;

fn repro_summary(ctx: &Ctx, kind: ModelKind, report: &EvalReport) -> serde_json::Value {
    let dataset = std::fs::read_to_string(ctx.stage("preprocess").join("config.toml"))
        .ok()
        .and_then(|t| toml::from_str::<RunConfig>(&t).ok())
        .and_then(|c| c.preprocess.preset)
        .map(|p| match p {
            Preset::Porto => "porto",
            Preset::SanFrancisco => "san_francisco",
            Preset::Synthetic => "synthetic",
        })
        .unwrap_or("unknown");
    let reference = REFERENCE_TABLE
        .iter()
        .find(|(d, k, _, _)| *d == dataset && *k == kind)
        .map(|(_, _, e1, e2)| json!({ "E1_m": e1, "E2_m": e2 }));
    json!({
        "dataset": dataset,
        "model": kind.name(),
        "gating": false,
        "achieved": { "E1_m": report.e1_m, "E2_m": report.e2_m, "count": report.count },
        "reference": reference,
        "reference_kaggle_m": REFERENCE_KAGGLE_M,
    })
}

pub struct EvalArgs {
    pub kind: ModelKind,
    pub kaggle_out: Option<PathBuf>,
    pub snippet_seconds: Option<i64>,
    pub full_repro: bool,
}

pub fn eval_cmd(ctx: &Ctx, args: EvalArgs) -> CliResult<()> {
    let kind = args.kind;
    let split = load_split(ctx)?;
    let part = load_partition(ctx)?;
    let model = load_model(ctx, kind, &part)?;
    let centroids = part.centroids();
    let test = encode(&split.test, &part);
    let predictor = model.as_predictor();
    let ecfg = &ctx.cfg.eval;

    if let Some(t) = args.snippet_seconds {
        if t <= 0 {
            return Err(invalid("--snippet-seconds must be positive"));
        }
    }
    let report = evaluate(predictor, &test, &centroids, ecfg, ctx.exec)?;
    let dir = ctx.stage("eval").join(kind.name());
    std::fs::create_dir_all(&dir)?;
    write_json(&dir.join("report.json"), &report)?;
    report.write_completion_csv(csv_file(&dir.join("completion.csv"))?)?;
    report.write_histogram_csv(csv_file(&dir.join("histogram.csv"))?)?;
    if let Some(t) = args.snippet_seconds {
        let snip = snippet_evaluate(predictor, &test, &centroids, t, ecfg, ctx.exec)?;
        write_json(&dir.join(format!("snippet_{t}s.json")), &snip)?;
        println!(
            "snippet {t} s: E1 {:.1} m, E2 {:.1} m",
            snip.e1_m, snip.e2_m
        );
    }
    if let Some(path) = &args.kaggle_out {
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent)?;
        }
        let n = write_kaggle_csv(
            predictor,
            &test,
            &centroids,
            ecfg.seed,
            ctx.exec,
            csv_file(path)?,
        )?;
        println!("wrote {n} Kaggle rows to {}", path.display());
    }
    if args.full_repro {
        let summary = repro_summary(ctx, kind, &report);
        write_json(&dir.join("repro.json"), &summary)?;
        println!("full-repro (not gating): {summary}");
    }
    ctx.finish(&dir, &ctx.cfg)?;
    println!(
        "{kind}: {} test trips, E1 {:.1} m, E2 {:.1} m; report in {}",
        report.count,
        report.e1_m,
        report.e2_m,
        dir.display()
    );
    Ok(())
}

/// Partial trajectory input: JSON lines of `[lat, lon]`, plus at most one
/// object line carrying `meta` or `start_time` (and `utc_offset_s`).
pub fn read_partial(path: &Path) -> CliResult<(Vec<GeoPoint>, TripMetadata)> {
    let file =
        File::open(path).map_err(|e| invalid(format!("cannot open {}: {e}", path.display())))?;
    let mut points = Vec::new();
    let mut meta = None;
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let bad = |m: String| invalid(format!("{}:{}: {m}", path.display(), i + 1));
        let value: serde_json::Value =
            serde_json::from_str(&line).map_err(|e| bad(e.to_string()))?;
        match value {
            serde_json::Value::Array(_) => {
                let [lat, lon]: [f64; 2] =
                    serde_json::from_value(value).map_err(|_| bad("expected [lat, lon]".into()))?;
                points.push(GeoPoint::checked(lat, lon).map_err(|e| bad(e.to_string()))?);
            }
            serde_json::Value::Object(obj) => {
                if meta.is_some() {
                    return Err(bad("more than one metadata line".into()));
                }
                let m = if let Some(m) = obj.get("meta") {
                    serde_json::from_value(m.clone()).map_err(|e| bad(format!("meta: {e}")))?
                } else if let Some(t) = obj.get("start_time").and_then(|t| t.as_i64()) {
                    let offset = obj
                        .get("utc_offset_s")
                        .and_then(|o| o.as_i64())
                        .unwrap_or(0);
                    TripMetadata::from_start_time(t, offset as i32)
                } else {
                    return Err(bad("metadata line needs \"meta\" or \"start_time\"".into()));
                };
                meta = Some(m);
            }
            _ => return Err(bad("expected [lat, lon] or a metadata object".into())),
        }
    }
    if points.len() < 2 {
        return Err(invalid(format!(
            "{}: a partial trajectory needs at least 2 points, got {}",
            path.display(),
            points.len()
        )));
    }
    Ok((points, meta.unwrap_or_default()))
}

fn write_output(out: Option<&Path>, value: &serde_json::Value) -> CliResult<()> {
    match out {
        Some(path) => {
            if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
                std::fs::create_dir_all(parent)?;
            }
            write_json(path, value)
        }
        None => {
            let mut stdout = std::io::stdout().lock();
            serde_json::to_writer_pretty(&mut stdout, value)?;
            writeln!(stdout)?;
            Ok(())
        }
    }
}

pub fn predict(ctx: &Ctx, kind: ModelKind, input: &Path, out: Option<&Path>) -> CliResult<()> {
    let (points, meta) = read_partial(input)?;
    let part = load_partition(ctx)?;
    let model = load_model(ctx, kind, &part)?;
    let regions = part.encode_points(&points);
    let q = Query {
        points: &points,
        regions: &regions,
        meta: &meta,
    };
    let prediction = model.as_predictor().predict(&q, &part.centroids())?;
    write_output(out, &prediction.to_json())
}

pub struct RouteArgs {
    pub kind: ModelKind,
    pub input: PathBuf,
    pub n: usize,
    pub nodes: Option<PathBuf>,
    pub edges: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

pub fn route(ctx: &Ctx, args: RouteArgs) -> CliResult<()> {
    if args.n == 0 {
        return Err(invalid("--n must be at least 1"));
    }
    let nodes = require(
        args.nodes
            .unwrap_or_else(|| ctx.stage("synth").join("nodes.txt")),
        "synth",
    )?;
    let edges = require(
        args.edges
            .unwrap_or_else(|| ctx.stage("synth").join("edges.txt")),
        "synth",
    )?;
    let (graph, duplicates) =
        RoadGraph::load(&nodes, &edges).map_err(|e| invalid(e.to_string()))?;
    if duplicates > 0 {
        log::warn!("{duplicates} duplicate edges collapsed to their minimum cost");
    }
    let (points, meta) = read_partial(&args.input)?;
    let part = load_partition(ctx)?;
    let model = load_model(ctx, args.kind, &part)?;
    let regions = part.encode_points(&points);
    let q = Query {
        points: &points,
        regions: &regions,
        meta: &meta,
    };
    let centroids = part.centroids();
    let prediction = model.as_predictor().predict(&q, &centroids)?;
    let last = *points.last().expect("at least 2 points");
    let routes = predict_routes(&graph, last, &prediction, &centroids, args.n)?;
    write_output(args.out.as_deref(), &routes.to_geojson(&graph))?;
    log::info!(
        "{} routes from node {}, {} scored edges",
        routes.routes.len(),
        routes.start_node,
        routes.edge_scores.len()
    );
    Ok(())
}
