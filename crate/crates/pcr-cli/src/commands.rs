//! Implementations of the CLI commands.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Subcommand};

use pcr_core::checkpoint;
use pcr_core::config::RunConfig;
use pcr_core::data::{
    build_batch, crop_transform, filter_pseudo_labels, load_annotations, load_category_map,
    load_detections, merge_datasets, mine_hard_negatives, save_annotations, AnnotationSet,
    ImageBuffer, ImageStore,
};
use pcr_core::eval::{
    evaluate_ap, oks_nms, results_from_json, results_to_json, EvalConfig, Metrics, PoseResult,
    PoseResultJson,
};
use pcr_core::heatmap::HeatmapCodec;
use pcr_core::model::{train_step, LossWeights, PcrConfig, PcrModel, StepStats};
use pcr_core::tensor::io as tensor_io;
use pcr_core::{Error, Result, Shape, Tensor};

#[derive(Args)]
pub struct TrainArgs {
    /// Run configuration file (flat key = value lines).
    #[arg(long)]
    config: PathBuf,
    /// COCO-format annotation JSON; overrides the config's `annotations`.
    #[arg(long)]
    annotations: Option<PathBuf>,
    /// Directory of PGM rasters named by the annotation `file_name`s.
    #[arg(long)]
    images: Option<PathBuf>,
    /// Output directory for the checkpoint and the loss log.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Extra hard-negative records to fold into the batch (annotation JSON).
    #[arg(long)]
    extra: Option<PathBuf>,
}

pub fn train(args: TrainArgs) -> Result<()> {
    let mut cfg = RunConfig::load(&args.config)?;
    if let Some(p) = args.annotations {
        cfg.annotations = Some(p);
    }
    if let Some(p) = args.images {
        cfg.images = Some(p);
    }
    if let Some(p) = args.out {
        cfg.out = Some(p);
    }
    cfg.require_paths(&[
        ("annotations", &cfg.annotations),
        ("images", &cfg.images),
    ])?;
    let out_dir = cfg
        .out
        .clone()
        .ok_or_else(|| Error::Config("missing required path 'out'".into()))?;

    let mut set = load_annotations(cfg.annotations.as_ref().unwrap(), cfg.model.joints)?;
    if let Some(extra) = &args.extra {
        let more = load_annotations(extra, cfg.model.joints)?;
        set.records.extend(more.records);
        for im in more.images {
            if !set.images.iter().any(|x| x.id == im.id) {
                set.images.push(im);
            }
        }
    }
    if set.records.is_empty() {
        return Err(Error::Data("annotation file holds no usable instances".into()));
    }
    let images = ImageStore::load_dir(cfg.images.as_ref().unwrap(), &set.images)?;
    let codec = cfg.codec()?;
    let batch = build_batch(
        &set.records,
        &images,
        &codec,
        cfg.model.input_h,
        cfg.model.input_w,
        None,
    )?;

    let mut model = PcrModel::new(cfg.model.clone(), cfg.seed)?;
    let weights = LossWeights::unit(cfg.model.levels);

    fs::create_dir_all(&out_dir)?;
    let mut log = fs::File::create(out_dir.join("loss_log.csv"))?;
    writeln!(
        log,
        "{}",
        StepStats::csv_header(cfg.model.levels, cfg.model.aux_enabled)
    )?;
    for step in 0..cfg.steps {
        let stats = train_step(&mut model, &batch, cfg.lr, &weights)?;
        writeln!(log, "{}", stats.csv_row(step))?;
        if step % 50 == 0 || step + 1 == cfg.steps {
            eprintln!("step {step}: loss {:.6e}", stats.loss);
        }
    }
    log.flush()?;
    checkpoint::save_model(&mut model, &out_dir)?;
    println!("checkpoint written to {}", out_dir.display());
    Ok(())
}

#[derive(Args)]
pub struct InferArgs {
    /// Checkpoint directory produced by `train`.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Detection JSON: `[{"image_id", "bbox": [x, y, w, h], "score"}]`.
    #[arg(long)]
    detections: PathBuf,
    /// Directory of rasters named `<image_id>.pgm`.
    #[arg(long)]
    images: PathBuf,
    /// Results JSON output path.
    #[arg(long)]
    out: PathBuf,
}

pub fn infer(args: InferArgs) -> Result<()> {
    let mut model = checkpoint::load_model(&args.checkpoint)?;
    let cfg = model.config.clone();
    let dets = load_detections(&args.detections)?;
    let codec = HeatmapCodec::new(
        cfg.joints,
        cfg.heatmap_h(),
        cfg.heatmap_w(),
        PcrConfig::HEATMAP_STRIDE as f64,
        HeatmapCodec::DEFAULT_SIGMA,
    )?;

    let mut results: Vec<PoseResult> = Vec::with_capacity(dets.len());
    let mut cache: std::collections::BTreeMap<i64, ImageBuffer> = Default::default();
    for det in &dets {
        let raster = match cache.get(&det.image_id) {
            Some(r) => r,
            None => {
                let path = args.images.join(format!("{}.pgm", det.image_id));
                let img = ImageBuffer::load_pgm(&path)?;
                cache.insert(det.image_id, img);
                cache.get(&det.image_id).unwrap()
            }
        };
        let transform = crop_transform(&det.bbox, cfg.input_w, cfg.input_h)?;
        let mut input = Tensor::zeros(Shape::new(1, 1, cfg.input_h, cfg.input_w));
        for y in 0..cfg.input_h {
            for x in 0..cfg.input_w {
                let (sx, sy) = transform.apply_inverse(x as f64, y as f64);
                *input.at_mut(0, 0, y, x) = raster.sample(sx, sy);
            }
        }
        let maps = model.infer(&input)?;
        let (keypoints, joint_scores) = codec.decode(&maps, &transform)?;
        // Instance score: mean of the per-joint peak scores.
        let score = joint_scores.iter().sum::<f64>() / joint_scores.len().max(1) as f64;
        results.push(PoseResult {
            image_id: det.image_id,
            keypoints,
            joint_scores,
            score,
        });
    }
    write_results(&args.out, &results)?;
    println!("{} poses written to {}", results.len(), args.out.display());
    Ok(())
}

#[derive(Args)]
pub struct EvalArgs {
    /// Results JSON produced by `infer` (or compatible).
    #[arg(long)]
    results: PathBuf,
    /// COCO-format ground-truth annotations.
    #[arg(long)]
    gt: PathBuf,
    /// Optional run configuration supplying joint count and falloffs.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Optional JSON output path for the metrics row.
    #[arg(long)]
    json: Option<PathBuf>,
}

pub fn eval(args: EvalArgs) -> Result<()> {
    let (joints, eval_cfg) = match &args.config {
        Some(path) => {
            let cfg = RunConfig::load(path)?;
            (cfg.model.joints, cfg.eval_config())
        }
        None => {
            let joints = detect_joint_count(&args.gt)?;
            let eval_cfg = if joints == 17 {
                EvalConfig::coco17()
            } else {
                EvalConfig::uniform(joints)
            };
            (joints, eval_cfg)
        }
    };
    let gt_set = load_annotations(&args.gt, joints)?;
    let results = read_results(&args.results)?;
    let metrics = evaluate_ap(&results, &gt_set.to_ground_truth(), &eval_cfg)?;
    print_metrics_table(&metrics);
    if let Some(path) = args.json {
        let mut f = fs::File::create(path)?;
        serde_json::to_writer_pretty(&mut f, &metrics)?;
        f.flush()?;
    }
    Ok(())
}

#[derive(Subcommand)]
pub enum Tools {
    /// Greedy OKS-based suppression over a results file.
    Nms(NmsArgs),
    /// Hard-negative person detection mining.
    MineHn(MineHnArgs),
    /// Pseudo-annotation filtering over pose results.
    Pseudo(PseudoArgs),
    /// Merge an external dataset through a joint-index map.
    Merge(MergeArgs),
    /// Encode annotations into heatmap tensor containers.
    Encode(EncodeArgs),
    /// Decode heatmap tensor containers back into results.
    Decode(DecodeArgs),
    /// Finite-difference verification of every operator and the micro model.
    Gradcheck(GradcheckArgs),
    /// Generate the deterministic synthetic corpus.
    Synth(SynthArgs),
}

pub fn tools(tool: Tools) -> Result<()> {
    match tool {
        Tools::Nms(a) => nms(a),
        Tools::MineHn(a) => mine_hn(a),
        Tools::Pseudo(a) => pseudo(a),
        Tools::Merge(a) => merge(a),
        Tools::Encode(a) => encode(a),
        Tools::Decode(a) => decode(a),
        Tools::Gradcheck(a) => gradcheck(a),
        Tools::Synth(a) => synth(a),
    }
}

#[derive(Args)]
pub struct NmsArgs {
    #[arg(long)]
    results: PathBuf,
    /// Suppression threshold in (0, 1].
    #[arg(long, default_value_t = 0.9)]
    threshold: f64,
    #[arg(long)]
    out: PathBuf,
    /// Optional run configuration supplying the per-joint falloffs.
    #[arg(long)]
    config: Option<PathBuf>,
}

fn nms(args: NmsArgs) -> Result<()> {
    let results = read_results(&args.results)?;
    let eval_cfg = match &args.config {
        Some(path) => RunConfig::load(path)?.eval_config(),
        None => {
            let joints = results.first().map(|r| r.keypoints.len()).unwrap_or(17);
            if joints == 17 {
                EvalConfig::coco17()
            } else {
                EvalConfig::uniform(joints)
            }
        }
    };
    let kept = oks_nms(&results, args.threshold, &eval_cfg)?;
    write_results(&args.out, &kept)?;
    println!("kept {} of {} results", kept.len(), results.len());
    Ok(())
}

#[derive(Args)]
pub struct MineHnArgs {
    #[arg(long)]
    detections: PathBuf,
    #[arg(long)]
    annotations: PathBuf,
    /// Minimum detector score for a candidate.
    #[arg(long, default_value_t = 0.5)]
    score_thr: f64,
    /// Joints per instance in the output records.
    #[arg(long, default_value_t = 17)]
    joints: usize,
    #[arg(long)]
    out: PathBuf,
}

fn mine_hn(args: MineHnArgs) -> Result<()> {
    let set = load_annotations(&args.annotations, args.joints)?;
    let dets = load_detections(&args.detections)?;
    let mined = mine_hard_negatives(&dets, &set, args.score_thr, args.joints)?;
    let out_set = AnnotationSet {
        images: set.images.clone(),
        records: mined,
    };
    save_annotations(&args.out, &out_set)?;
    println!(
        "mined {} hard negatives from {} detections",
        out_set.records.len(),
        dets.len()
    );
    Ok(())
}

#[derive(Args)]
pub struct PseudoArgs {
    #[arg(long)]
    results: PathBuf,
    /// Joints scoring strictly above this become pseudo-labels.
    #[arg(long, default_value_t = 0.9)]
    thr: f64,
    #[arg(long)]
    out: PathBuf,
    /// Optional annotation JSON whose image table patches the emitted
    /// records' file names.
    #[arg(long)]
    images_from: Option<PathBuf>,
}

fn pseudo(args: PseudoArgs) -> Result<()> {
    let results = read_results(&args.results)?;
    let mut records = filter_pseudo_labels(&results, args.thr);
    let mut images = Vec::new();
    if let Some(path) = &args.images_from {
        let joints = records.first().map(|r| r.keypoints.len()).unwrap_or(17);
        let table = load_annotations(path, joints)?;
        for rec in &mut records {
            if let Some(im) = table.image_by_id(rec.image.id) {
                rec.image = im.clone();
            }
        }
        images = table.images;
    }
    let count = records.len();
    save_annotations(&args.out, &AnnotationSet { images, records })?;
    println!("kept {count} pseudo-labeled instances of {}", results.len());
    Ok(())
}

#[derive(Args)]
pub struct MergeArgs {
    /// Primary annotation JSON (passes through unchanged).
    #[arg(long)]
    primary: PathBuf,
    /// External annotation JSON to remap and append.
    #[arg(long)]
    external: PathBuf,
    /// Joint count of the primary skeleton.
    #[arg(long, default_value_t = 17)]
    joints: usize,
    /// Joint count of the external skeleton.
    #[arg(long, default_value_t = 14)]
    external_joints: usize,
    /// Key-value map file (`ext = primary` or `ext = skip` per line).
    /// Defaults to the conventional 14-to-17 limb correspondence.
    #[arg(long)]
    map: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

fn merge(args: MergeArgs) -> Result<()> {
    let primary = load_annotations(&args.primary, args.joints)?;
    let external = load_annotations(&args.external, args.external_joints)?;
    let map = match &args.map {
        Some(path) => load_category_map(path, args.external_joints, args.joints)?,
        None => {
            if args.external_joints != 14 || args.joints != 17 {
                return Err(Error::Config(
                    "the built-in joint map covers 14 -> 17 only; pass --map".into(),
                ));
            }
            pcr_core::data::default_aic_to_coco_map()
        }
    };
    let merged = merge_datasets(&primary.records, &external.records, &map)?;
    let mut images = primary.images.clone();
    for im in &external.images {
        if !images.iter().any(|x| x.id == im.id) {
            images.push(im.clone());
        }
    }
    let count = merged.len();
    save_annotations(&args.out, &AnnotationSet { images, records: merged })?;
    println!(
        "merged {} primary + {} external into {count} records",
        primary.records.len(),
        external.records.len()
    );
    Ok(())
}

#[derive(Args)]
pub struct EncodeArgs {
    #[arg(long)]
    annotations: PathBuf,
    /// Run configuration supplying joint count, input size, and sigma.
    #[arg(long)]
    config: PathBuf,
    /// Output directory for `inst<i>.maps.tsr` / `inst<i>.weights.tsr`.
    #[arg(long)]
    out: PathBuf,
}

fn encode(args: EncodeArgs) -> Result<()> {
    let cfg = RunConfig::load(&args.config)?;
    let set = load_annotations(&args.annotations, cfg.model.joints)?;
    let codec = cfg.codec()?;
    fs::create_dir_all(&args.out)?;
    for (i, rec) in set.records.iter().enumerate() {
        let transform = crop_transform(&rec.bbox, cfg.model.input_w, cfg.model.input_h)?;
        let target = codec.encode(&rec.keypoints, &transform)?;
        tensor_io::save_tensor(args.out.join(format!("inst{i:04}.maps.tsr")), &target.maps)?;
        let weights = Tensor::from_vec(
            Shape::new(1, target.weights.len(), 1, 1),
            target.weights.clone(),
        )?;
        tensor_io::save_tensor(args.out.join(format!("inst{i:04}.weights.tsr")), &weights)?;
    }
    println!("encoded {} instances into {}", set.records.len(), args.out.display());
    Ok(())
}

#[derive(Args)]
pub struct DecodeArgs {
    /// Directory of `inst<i>.maps.tsr` containers from `encode`.
    #[arg(long)]
    heatmaps: PathBuf,
    /// Annotation JSON supplying the box of each instance, in file order.
    #[arg(long)]
    boxes: PathBuf,
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

fn decode(args: DecodeArgs) -> Result<()> {
    let cfg = RunConfig::load(&args.config)?;
    let set = load_annotations(&args.boxes, cfg.model.joints)?;
    let codec = cfg.codec()?;
    let mut results = Vec::new();
    for (i, rec) in set.records.iter().enumerate() {
        let path = args.heatmaps.join(format!("inst{i:04}.maps.tsr"));
        let maps = tensor_io::load_tensor(&path)?;
        let transform = crop_transform(&rec.bbox, cfg.model.input_w, cfg.model.input_h)?;
        let (keypoints, joint_scores) = codec.decode(&maps, &transform)?;
        let score = joint_scores.iter().sum::<f64>() / joint_scores.len().max(1) as f64;
        results.push(PoseResult {
            image_id: rec.image.id,
            keypoints,
            joint_scores,
            score,
        });
    }
    write_results(&args.out, &results)?;
    println!("decoded {} instances", results.len());
    Ok(())
}

#[derive(Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Skip the full micro-model pass and check the operators only.
    #[arg(long)]
    ops_only: bool,
}

fn gradcheck(args: GradcheckArgs) -> Result<()> {
    let reports = if args.ops_only {
        pcr_core::gradcheck::check_all_ops(args.seed)?
    } else {
        let (reports, _) = pcr_core::gradcheck::run_full_suite(args.seed)?;
        reports
    };
    let mut failures = 0usize;
    for r in &reports {
        println!(
            "{} {} (max err {:.3e} over {} coordinates)",
            if r.passed { "ok  " } else { "FAIL" },
            r.name,
            r.max_err,
            r.checked
        );
        if !r.passed {
            failures += 1;
        }
    }
    if failures > 0 {
        return Err(Error::non_finite(
            "gradcheck",
            format!("{failures} of {} checks failed", reports.len()),
        ));
    }
    println!("all {} checks passed", reports.len());
    Ok(())
}

#[derive(Args)]
pub struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 8)]
    count: usize,
    #[arg(long, default_value_t = 4)]
    joints: usize,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// Also write high-score background detections for mining demos.
    #[arg(long)]
    with_detections: bool,
}

fn synth(args: SynthArgs) -> Result<()> {
    let (set, store) = pcr_core::synthetic::toy_dataset(args.count, args.joints, args.seed);
    fs::create_dir_all(&args.out)?;
    let image_dir = args.out.join("images");
    pcr_core::synthetic::write_images(&store, &set, &image_dir)?;
    save_annotations(args.out.join("annotations.json"), &set)?;
    if args.with_detections {
        let dets = pcr_core::synthetic::background_detections(&set, args.count, 0, 0.95);
        pcr_core::data::save_detections(args.out.join("detections.json"), &dets)?;
    }
    println!(
        "wrote {} samples under {}",
        set.records.len(),
        args.out.display()
    );
    Ok(())
}

// Shared helpers.

fn read_results(path: &Path) -> Result<Vec<PoseResult>> {
    let text = fs::read_to_string(path)?;
    let wire: Vec<PoseResultJson> = serde_json::from_str(&text)?;
    results_from_json(wire)
}

fn write_results(path: &Path, results: &[PoseResult]) -> Result<()> {
    let mut f = fs::File::create(path)?;
    serde_json::to_writer_pretty(&mut f, &results_to_json(results))?;
    f.flush()?;
    Ok(())
}

/// Joint count of the first annotation in a COCO-format file.
fn detect_joint_count(path: &Path) -> Result<usize> {
    let text = fs::read_to_string(path)?;
    let value: serde_json::Value = serde_json::from_str(&text)?;
    let keypoints = value
        .get("annotations")
        .and_then(|a| a.get(0))
        .and_then(|a| a.get("keypoints"))
        .and_then(|k| k.as_array())
        .ok_or_else(|| Error::Data("cannot infer joint count from an empty ground truth".into()))?;
    Ok(keypoints.len() / 3)
}

/// Text metrics table in the conventional column order.
fn print_metrics_table(m: &Metrics) {
    println!("    AP   AP@.5  AP@.75   AP_M   AP_L     AR");
    println!(
        " {:.3}  {:.3}   {:.3}  {:.3}  {:.3}  {:.3}",
        m.ap, m.ap50, m.ap75, m.ap_medium, m.ap_large, m.ar
    );
}
