use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{self, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::Serialize;

use heatdet::backbone::{BackboneConfig, Network};
use heatdet::benchkit::{time_decode, time_nms, BenchRow};
use heatdet::checks::{run_grad_check, GradTarget};
use heatdet::data::{
    class_stats, dota2dior_table, load_image, map_classes, pad_to_multiple, synthesize, tile, ClassStats, Dataset,
    SyntheticSpec, TileSpec, DIOR_COMMON_CLASSES,
};
use heatdet::decoder::{read_jsonl, write_jsonl, DetectionRecord};
use heatdet::difficulty::ds_image;
use heatdet::eval::{iou_thresholds, map_metric, match_dataset, EvalOptions};
use heatdet::loss::{alpha_table_in_base, LogBase};
use heatdet::svg::{line_chart, Series};
use heatdet::targets::{heat_channel_to_gray, render_pyramid, GaussianSpec};
use heatdet::trainer::{train, write_curve_csv, TrainConfig, TrainSet};
use heatdet::{par, Detection};

use crate::manifest::RunManifest;
use crate::{
    BenchDecodeArgs, Cli, Command, DetectArgs, DifficultyArgs, EvaluateArgs, Fixture, GradCheckArgs, MapClassesArgs,
    RenderTargetsArgs, StatsArgs, StatsSource, StatsView, SynthArgs, TargetArg, TileArgs, TrainToyArgs,
};

struct Ctx {
    seed: u64,
    seed_given: bool,
    manifest: RunManifest,
}

pub fn run(cli: &Cli) -> Result<()> {
    let name = match &cli.command {
        Command::Tile(_) => "tile",
        Command::Stats(_) => "stats",
        Command::MapClasses(_) => "map-classes",
        Command::Synth(_) => "synth",
        Command::RenderTargets(_) => "render-targets",
        Command::Difficulty(_) => "difficulty",
        Command::TrainToy(_) => "train-toy",
        Command::Detect(_) => "detect",
        Command::Evaluate(_) => "evaluate",
        Command::GradCheck(_) => "grad-check",
        Command::BenchDecode(_) => "bench-decode",
    };
    let seed = cli.seed.unwrap_or(0);
    let mut ctx = Ctx {
        seed,
        seed_given: cli.seed.is_some(),
        manifest: RunManifest::new(name, serde_json::to_value(&cli.command)?, seed),
    };
    let main_output = match &cli.command {
        Command::Tile(a) => tile_cmd(&mut ctx, a)?,
        Command::Stats(a) => stats_cmd(&mut ctx, a)?,
        Command::MapClasses(a) => map_classes_cmd(&mut ctx, a)?,
        Command::Synth(a) => synth_cmd(&mut ctx, a)?,
        Command::RenderTargets(a) => render_targets_cmd(&mut ctx, a)?,
        Command::Difficulty(a) => difficulty_cmd(&mut ctx, a)?,
        Command::TrainToy(a) => train_toy_cmd(&mut ctx, a)?,
        Command::Detect(a) => detect_cmd(&mut ctx, a)?,
        Command::Evaluate(a) => evaluate_cmd(&mut ctx, a)?,
        Command::GradCheck(a) => grad_check_cmd(&mut ctx, a)?,
        Command::BenchDecode(a) => bench_decode_cmd(&mut ctx, a)?,
    };
    let manifest_path = cli.manifest.clone().or_else(|| {
        main_output.map(|p| {
            if p.is_dir() {
                p.join("manifest.json")
            } else {
                let mut s = p.into_os_string();
                s.push(".manifest.json");
                PathBuf::from(s)
            }
        })
    });
    ctx.manifest.finish(manifest_path.as_deref())
}

fn warn(message: &str) {
    eprintln!("{}", serde_json::json!({ "warning": message }));
}

fn print_json<T: Serialize>(value: &T) -> Result<()> {
    let mut out = io::stdout().lock();
    serde_json::to_writer_pretty(&mut out, value)?;
    writeln!(out)?;
    Ok(())
}

fn load_dataset(ctx: &mut Ctx, path: &Path) -> Result<Dataset> {
    ctx.manifest.input(path)?;
    let (ds, clipped) = Dataset::load(path)?;
    if clipped > 0 {
        warn(&format!("{}: clipped {clipped} boxes into their image", path.display()));
    }
    Ok(ds)
}

fn dataset_root(path: &Path) -> &Path {
    path.parent().unwrap_or(Path::new("."))
}

/// Open `path` for writing, or stdout when absent.
fn sink(path: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(File::create(p).with_context(|| format!("creating {}", p.display()))?)),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

fn load_network(ctx: &mut Ctx, path: &Path) -> Result<Network> {
    for ext in ["json", "bin"] {
        ctx.manifest.input(&path.with_extension(ext))?;
    }
    Ok(Network::load(path)?)
}

fn tile_cmd(ctx: &mut Ctx, a: &TileArgs) -> Result<Option<PathBuf>> {
    let spec = TileSpec {
        tile: a.tile,
        overlap: a.overlap,
        keep_fraction: a.keep,
    };
    spec.validate()?;
    let ds = load_dataset(ctx, &a.input)?;
    let out = tile(&ds, spec)?;
    out.dataset.save(&a.output)?;
    ctx.manifest.artifact(&a.output);
    if let Some(p) = &a.dropped {
        fs::write(p, serde_json::to_string_pretty(&out.dropped)? + "\n")?;
        ctx.manifest.artifact(p);
    }
    if !out.dropped.is_empty() {
        warn(&format!("{} annotations fell in no tile", out.dropped.len()));
    }
    print_json(&serde_json::json!({
        "images_in": ds.images.len(),
        "images_out": out.dataset.images.len(),
        "annotations_in": ds.annotations.len(),
        "annotations_out": out.dataset.annotations.len(),
        "dropped": out.dropped.len(),
    }))?;
    Ok(Some(a.output.clone()))
}

fn stats_for(ctx: &mut Ctx, src: &StatsSource) -> Result<ClassStats> {
    match (&src.input, src.fixture) {
        (_, Some(Fixture::Dota2dior)) => {
            let fixture = heatdet::data::dota2dior_fixture();
            let names: Vec<&str> = fixture.iter().map(|f| f.0).collect();
            let counts: Vec<u64> = fixture.iter().map(|f| f.1).collect();
            Ok(ClassStats::from_counts(&names, &counts, src.beta))
        }
        (Some(path), None) => {
            let ds = load_dataset(ctx, path)?;
            Ok(class_stats(&ds, src.beta))
        }
        (None, None) => Err(heatdet::Error::Config("give an input dataset or --fixture".into()).into()),
    }
}

fn stats_cmd(ctx: &mut Ctx, a: &StatsArgs) -> Result<Option<PathBuf>> {
    match &a.view {
        None => {
            let s = stats_for(ctx, &a.source)?;
            if s.total == 0 {
                warn("dataset has no annotations");
            }
            print_json(&s)?;
        }
        Some(StatsView::Alpha { source, log_base }) => {
            let s = stats_for(ctx, source)?;
            let base: LogBase = log_base.parse()?;
            let counts: Vec<u64> = s.classes.iter().map(|c| c.count).collect();
            let table = alpha_table_in_base(&counts, source.beta, base)?;
            let mut w = csv::Writer::from_writer(io::stdout().lock());
            w.write_record(["class", "count", "alpha_prime", "alpha"])?;
            for (i, c) in s.classes.iter().enumerate() {
                w.write_record([
                    c.name.clone(),
                    c.count.to_string(),
                    table.alpha_prime[i].to_string(),
                    table.alpha[i].to_string(),
                ])?;
            }
            w.flush()?;
        }
    }
    Ok(None)
}

fn map_classes_cmd(ctx: &mut Ctx, a: &MapClassesArgs) -> Result<Option<PathBuf>> {
    let ds = load_dataset(ctx, &a.input)?;
    let (table, classes) = if a.table == "dota2dior" {
        (dota2dior_table(), DIOR_COMMON_CLASSES.iter().map(|s| s.to_string()).collect())
    } else {
        let path = Path::new(&a.table);
        ctx.manifest.input(path)?;
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let table: BTreeMap<String, String> = serde_json::from_str(&text)
            .map_err(|e| heatdet::Error::Config(format!("mapping table {}: {e}", path.display())))?;
        let mut classes: Vec<String> = table.values().cloned().collect();
        classes.sort();
        classes.dedup();
        (table, classes)
    };
    let (out, report) = map_classes(&ds, &table, &classes)?;
    if report.kept == 0 {
        warn("no annotations survived the class mapping");
    }
    out.save(&a.output)?;
    ctx.manifest.artifact(&a.output);
    print_json(&report)?;
    Ok(Some(a.output.clone()))
}

fn synth_cmd(ctx: &mut Ctx, a: &SynthArgs) -> Result<Option<PathBuf>> {
    let mut spec = match &a.spec {
        Some(p) => {
            ctx.manifest.input(p)?;
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_str::<SyntheticSpec>(&text)
                .map_err(|e| heatdet::Error::Config(format!("synthetic spec {}: {e}", p.display())))?
        }
        None => SyntheticSpec::discs_vs_squares(a.num_images, ctx.seed),
    };
    if ctx.seed_given {
        spec.seed = ctx.seed;
    }
    let out = synthesize(&spec)?;
    out.write(&a.outdir)?;
    ctx.manifest.artifact(a.outdir.join("dataset.json"));
    print_json(&serde_json::json!({
        "images": out.dataset.images.len(),
        "annotations": out.dataset.annotations.len(),
        "seed": spec.seed,
    }))?;
    Ok(Some(a.outdir.clone()))
}

fn render_targets_cmd(ctx: &mut Ctx, a: &RenderTargetsArgs) -> Result<Option<PathBuf>> {
    let ds = load_dataset(ctx, &a.data)?;
    let spec = GaussianSpec::new(a.min_overlap)?;
    let by_image = ds.annotations_by_image()?;
    let images: Vec<_> = ds
        .images
        .iter()
        .filter(|im| a.image.as_ref().is_none_or(|want| &im.id == want))
        .collect();
    if images.is_empty() {
        bail!("no image matches {:?}", a.image);
    }
    for im in images {
        let dir = a.out.join(&im.id);
        fs::create_dir_all(&dir)?;
        let (w, h) = (im.width.div_ceil(32) * 32, im.height.div_ceil(32) * 32);
        let targets = render_pyramid(&by_image[&im.id], w as usize, h as usize, ds.classes.len(), spec)?;
        for t in &targets {
            for c in 0..ds.classes.len() {
                let p = dir.join(format!("heat_s{}_c{c}.pgm", t.stride));
                heat_channel_to_gray(t, c)
                    .save(&p)
                    .with_context(|| format!("writing {}", p.display()))?;
            }
            for (name, tensor) in [("heat", &t.heat), ("size", &t.size), ("offset", &t.offset), ("mask", &t.mask)] {
                tensor.save(dir.join(format!("s{}_{name}.bin", t.stride)))?;
            }
            if t.stats.collisions > 0 || t.stats.skipped > 0 {
                warn(&format!(
                    "{} stride {}: {} centre collisions, {} skipped",
                    im.id, t.stride, t.stats.collisions, t.stats.skipped
                ));
            }
        }
        ctx.manifest.artifact(dir);
    }
    Ok(Some(a.out.clone()))
}

fn difficulty_cmd(ctx: &mut Ctx, a: &DifficultyArgs) -> Result<Option<PathBuf>> {
    let net = load_network(ctx, &a.checkpoint)?;
    let ds = load_dataset(ctx, &a.data)?;
    let root = dataset_root(&a.data);
    let scores = par::try_map(&ds.images, |rec| {
        let image = pad_to_multiple(&load_image(root, rec)?, 32);
        let (_, raw) = net.predict(&image)?;
        ds_image(&[&raw[0], &raw[1], &raw[2]])
    })?;
    let mut w = csv::Writer::from_writer(sink(a.out.as_deref())?);
    w.write_record(["image_id", "ds_level_8", "ds_level_16", "ds_level_32", "ds"])?;
    for (rec, s) in ds.images.iter().zip(&scores) {
        let [l8, l16, l32] = s.per_level;
        w.write_record([rec.id.clone(), l8.to_string(), l16.to_string(), l32.to_string(), s.value.to_string()])?;
    }
    w.flush()?;
    if let Some(p) = &a.out {
        ctx.manifest.artifact(p);
    }
    Ok(a.out.clone())
}

fn train_toy_cmd(ctx: &mut Ctx, a: &TrainToyArgs) -> Result<Option<PathBuf>> {
    let gauss = GaussianSpec::new(a.min_overlap)?;
    let set = match &a.data {
        Some(p) => {
            let ds = load_dataset(ctx, p)?;
            TrainSet::from_dataset(&ds, dataset_root(p), gauss)?
        }
        None => TrainSet::from_synth(&synthesize(&SyntheticSpec::discs_vs_squares(a.num_images, ctx.seed))?, gauss)?,
    };
    let cfg = TrainConfig {
        steps: a.steps,
        batch_size: a.batch_size,
        learning_rate: a.lr,
        momentum: a.momentum,
        seed: ctx.seed,
        ds_floor: a.ds_floor,
        gamma: a.gamma,
        beta: a.beta,
        alpha_floor: a.alpha_floor,
        lambda_size: a.lambda_size,
        lambda_off: a.lambda_off,
        neg_beta: a.neg_beta,
        min_overlap: a.min_overlap,
    };
    let net = Network::new(BackboneConfig {
        base_channels: a.base_channels,
        head_channels: a.head_channels,
        num_classes: set.class_names.len(),
        seed: ctx.seed,
        init_gain: a.init_gain,
        ..Default::default()
    })?;
    let outcome = train(&set, net, &cfg, |r| {
        if r.step % 25 == 0 {
            eprintln!(
                "{}",
                serde_json::json!({ "step": r.step, "total": r.total, "mean_ds": r.mean_ds })
            );
        }
    })?;

    fs::create_dir_all(&a.out)?;
    let ckpt = a.out.join("model");
    outcome.network.save(&ckpt)?;
    write_curve_csv(a.out.join("loss.csv"), &outcome.curve)?;

    let mut w = csv::Writer::from_path(a.out.join("ds.csv"))?;
    w.write_record(["step", "image_id", "ds_level_8", "ds_level_16", "ds_level_32", "ds"])?;
    for r in &outcome.ds_log {
        let [l8, l16, l32] = r.ds.per_level;
        w.write_record([
            r.step.to_string(),
            r.image_id.clone(),
            l8.to_string(),
            l16.to_string(),
            l32.to_string(),
            r.ds.value.to_string(),
        ])?;
    }
    w.flush()?;

    let pts = |f: fn(&heatdet::trainer::StepRecord) -> f64| -> Vec<(f64, f64)> {
        outcome.curve.iter().map(|r| (r.step as f64, f(r))).collect()
    };
    let (total, heat) = (pts(|r| r.total), pts(|r| r.heat));
    let svg = line_chart(
        "training loss",
        "step",
        "loss",
        &[
            Series {
                label: "total",
                points: &total,
            },
            Series {
                label: "heat",
                points: &heat,
            },
        ],
    );
    fs::write(a.out.join("loss.svg"), svg)?;

    let window = 20.min(outcome.curve.len());
    let mean = |rows: &[heatdet::trainer::StepRecord]| rows.iter().map(|r| r.total).sum::<f64>() / rows.len() as f64;
    let first = mean(&outcome.curve[..window]);
    let last = mean(&outcome.curve[outcome.curve.len() - window..]);
    let summary = serde_json::json!({
        "steps": cfg.steps,
        "initial_mean_total": first,
        "final_mean_total": last,
        "ratio": last / first,
        "alpha_weights": outcome.alpha_weights,
        "classes": set.class_names,
    });
    fs::write(a.out.join("summary.json"), serde_json::to_string_pretty(&summary)? + "\n")?;
    print_json(&summary)?;
    for f in ["model.bin", "model.json", "loss.csv", "loss.svg", "ds.csv", "summary.json"] {
        ctx.manifest.artifact(a.out.join(f));
    }
    Ok(Some(a.out.clone()))
}

fn detect_cmd(ctx: &mut Ctx, a: &DetectArgs) -> Result<Option<PathBuf>> {
    let net = load_network(ctx, &a.checkpoint)?;
    let ds = load_dataset(ctx, &a.data)?;
    let root = dataset_root(&a.data);
    let per_image = par::try_map(&ds.images, |rec| {
        let image = pad_to_multiple(&load_image(root, rec)?, 32);
        let dets = net.detect(&image, a.k, a.score_floor)?;
        let (w, h) = (f64::from(rec.width), f64::from(rec.height));
        Ok::<_, heatdet::Error>(
            dets.into_iter()
                .map(|d| Detection {
                    bbox: d.bbox.clip(w, h),
                    ..d
                })
                .map(|d| DetectionRecord::new(&rec.id, &d))
                .collect::<Vec<_>>(),
        )
    })?;
    let records: Vec<DetectionRecord> = per_image.into_iter().flatten().collect();
    let mut out = sink(a.out.as_deref())?;
    write_jsonl(&mut out, &records)?;
    out.flush()?;
    if let Some(p) = &a.out {
        ctx.manifest.artifact(p);
    }
    Ok(a.out.clone())
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn evaluate_cmd(ctx: &mut Ctx, a: &EvaluateArgs) -> Result<Option<PathBuf>> {
    let ds = load_dataset(ctx, &a.gt)?;
    ctx.manifest.input(&a.dets)?;
    let file = File::open(&a.dets).with_context(|| format!("opening {}", a.dets.display()))?;
    let records = read_jsonl(BufReader::new(file))?;
    let gts = ds.annotations_by_image()?;
    let mut dets: BTreeMap<String, Vec<Detection>> = BTreeMap::new();
    for r in &records {
        if !gts.contains_key(&r.image_id) {
            warn(&format!("detections for unknown image `{}` count as false positives", r.image_id));
        }
        dets.entry(r.image_id.clone()).or_default().push(r.detection());
    }
    let opts = EvalOptions {
        zero_gt_as_zero: a.zero_gt_as_zero,
        score_threshold: a.score_threshold,
    };
    let report = map_metric(&dets, &gts, &ds.classes, opts)?;

    if let Some(p) = &a.out_csv {
        let mut w = csv::Writer::from_path(p)?;
        w.write_record(["class", "AP@[0.5:0.95]", "AP@0.5", "P", "R", "F1"])?;
        for c in &report.classes {
            w.write_record([
                c.name.clone(),
                fmt_opt(c.ap),
                fmt_opt(c.ap50),
                c.precision.to_string(),
                c.recall.to_string(),
                c.f1.to_string(),
            ])?;
        }
        w.flush()?;
        ctx.manifest.artifact(p);
    }
    if let Some(p) = &a.out_json {
        fs::write(p, serde_json::to_string_pretty(&report.summary)? + "\n")?;
        ctx.manifest.artifact(p);
    }
    if let Some(p) = &a.pr_svg {
        let matched = match_dataset(&dets, &gts, &iou_thresholds());
        let curves: Vec<(String, Vec<(f64, f64)>)> = (0..ds.classes.len())
            .filter(|&c| matched.num_gt(c) > 0)
            .map(|c| (ds.classes[c].clone(), matched.curve(c, 0).points))
            .collect();
        let series: Vec<Series> = curves
            .iter()
            .map(|(name, pts)| Series {
                label: name,
                points: pts,
            })
            .collect();
        fs::write(p, line_chart("precision-recall at IoU 0.5", "recall", "precision", &series))?;
        ctx.manifest.artifact(p);
    }
    print_json(&report.summary)?;
    Ok(a.out_json.clone().or_else(|| a.out_csv.clone()))
}

fn grad_check_cmd(ctx: &mut Ctx, a: &GradCheckArgs) -> Result<Option<PathBuf>> {
    let target = match a.target {
        TargetArg::Conv => GradTarget::Conv,
        TargetArg::Maxpool => GradTarget::Maxpool,
        TargetArg::Focal => GradTarget::Focal,
        TargetArg::Dwfl => GradTarget::Dwfl,
        TargetArg::Heatmap => GradTarget::Heatmap,
        TargetArg::Csp => GradTarget::Csp,
        TargetArg::Spp => GradTarget::Spp,
        TargetArg::Pipeline => GradTarget::Pipeline,
    };
    let r = run_grad_check(target, ctx.seed, a.eps)?;
    let passed = r.max_rel_error <= a.tolerance;
    print_json(&serde_json::json!({
        "target": target.name(),
        "seed": ctx.seed,
        "elements": r.analytic.len(),
        "max_rel_error": r.max_rel_error,
        "worst_index": r.worst_index,
        "tolerance": a.tolerance,
        "passed": passed,
    }))?;
    if !passed {
        bail!("max relative error {} exceeds {}", r.max_rel_error, a.tolerance);
    }
    Ok(None)
}

fn bench_decode_cmd(ctx: &mut Ctx, a: &BenchDecodeArgs) -> Result<Option<PathBuf>> {
    let mut rows: Vec<BenchRow> = Vec::new();
    for side in [32, 64, 128, 256] {
        rows.push(time_decode(side, 20, a.reps, ctx.seed));
    }
    for objects in [10, 100, 1000] {
        rows.push(time_decode(128, objects, a.reps, ctx.seed));
    }
    let mut n = 100;
    while n <= a.max_proposals {
        rows.push(time_nms(n, a.reps, ctx.seed));
        n *= 10;
    }
    let mut w = csv::Writer::from_writer(sink(a.out.as_deref())?);
    for r in &rows {
        w.serialize(r)?;
    }
    w.flush()?;
    if let Some(p) = &a.out {
        ctx.manifest.artifact(p);
    }
    Ok(a.out.clone())
}
