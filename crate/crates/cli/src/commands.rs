use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::json;

use myops_core::io::{read_class_indices, write_class_indices, write_field, write_labelmap};
use myops_core::manifest::{load_case, write_case_set, CaseSet, LoadedCase, Split, SynthConfig};
use myops_core::metrics::{class_report, reports_to_csv, BinaryMask};
use myops_core::motion::estimate_sequence;
use myops_core::pathology::{FeatureSelection, FrameProportion};
use myops_core::phantom::{EDEMA, MYOCARDIUM, SCAR};
use myops_core::pipeline::{segment_case, sweep_frames as run_sweep, train_joint, JointConfig, ModelParams, TrainingCase};
use myops_core::transmurality::{segment_table, transmurality_report, SliceLevel};
use myops_core::{Error, Result, Spacing};

use crate::PipelineArgs;

/// Configuration file of the pipeline commands.
#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    /// Recorded for reproducibility; the pipeline itself draws no random numbers.
    pub seed: u64,
    #[serde(flatten)]
    pub joint: JointConfig,
}

fn read_config<T: for<'de> Deserialize<'de> + Default>(path: Option<&Path>) -> Result<T> {
    let Some(path) = path else {
        return Ok(T::default());
    };
    let text = fs::read_to_string(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingFile(path.to_path_buf()),
        _ => Error::Io(e),
    })?;
    serde_json::from_str(&text).map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))
}

fn resolve(args: &PipelineArgs) -> Result<PipelineConfig> {
    let mut cfg: PipelineConfig = read_config(args.config.as_deref())?;
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if let Some(f) = &args.features {
        cfg.joint.features = f
            .parse::<FeatureSelection>()
            .map_err(|e| Error::InvalidConfig(format!("--features: {e}")))?;
    }
    if let Some(p) = &args.frames {
        cfg.joint.proportion = p
            .parse::<FrameProportion>()
            .map_err(|e| Error::InvalidConfig(format!("--frames: {e}")))?;
    }
    let l = &mut cfg.joint.lambdas;
    for (flag, slot) in [
        (args.lambda1, &mut l.lambda1),
        (args.lambda2, &mut l.lambda2),
        (args.lambda3, &mut l.lambda3),
        (args.lambda4, &mut l.lambda4),
    ] {
        if let Some(v) = flag {
            *slot = v;
        }
    }
    cfg.joint.validate()?;
    Ok(cfg)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

/// Writes `config.json`: the command, its inputs as given and the resolved
/// configuration.
fn echo(out: &Path, command: &str, inputs: serde_json::Value, config: impl Serialize) -> Result<()> {
    write_json(
        &out.join("config.json"),
        &json!({ "command": command, "inputs": inputs, "config": config }),
    )
}

fn case_manifest_path(p: &Path) -> PathBuf {
    if p.is_dir() {
        p.join("manifest.json")
    } else {
        p.to_path_buf()
    }
}

fn training_cases(set: &CaseSet, dir: &Path, split: Split) -> Result<Vec<TrainingCase>> {
    set.manifests(dir, Some(split))
        .iter()
        .map(|m| load_case(m)?.training_case())
        .collect()
}

pub fn synth(config: Option<&Path>, seed: Option<u64>, out: &Path) -> Result<()> {
    let mut cfg: SynthConfig = read_config(config)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate().map_err(|e| match e {
        Error::InvalidInput(m) => Error::InvalidConfig(m),
        other => other,
    })?;
    let set = write_case_set(&cfg, out)?;
    echo(out, "synth", json!({ "config": config }), &cfg)?;
    eprintln!("wrote {} cases to {}", set.cases.len(), out.display());
    Ok(())
}

#[derive(Serialize)]
struct FrameTrace {
    frame: usize,
    iterations: usize,
    final_objective: f64,
    /// Median endpoint error against the stored true field, when present.
    median_epe: Option<f64>,
    objective_trace: Vec<f64>,
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

pub fn motion(case: &Path, args: &PipelineArgs, out: &Path) -> Result<()> {
    let cfg = resolve(args)?;
    let manifest = case_manifest_path(case);
    let loaded = load_case(&manifest)?;
    let results = estimate_sequence(&loaded.sequence, &cfg.joint.motion)?;
    fs::create_dir_all(out.join("fields"))?;
    let mut traces = Vec::with_capacity(results.len());
    for (i, r) in results.into_iter().enumerate() {
        write_field(&out.join(format!("fields/phi_{i:03}.f32g")), &r.phi)?;
        let median_epe = match &loaded.motion_fields {
            Some(truth) => Some(median(r.phi.endpoint_error(&truth[i])?)),
            None => None,
        };
        traces.push(FrameTrace {
            frame: i,
            iterations: r.iterations_used,
            final_objective: r.final_objective,
            median_epe,
            objective_trace: r.objective_trace,
        });
    }
    write_json(&out.join("traces.json"), &traces)?;
    echo(out, "motion", json!({ "case": case }), cfg)
}

pub fn train(cases: &Path, args: &PipelineArgs, out: &Path) -> Result<()> {
    let cfg = resolve(args)?;
    let (set, dir) = CaseSet::load(cases)?;
    let train = training_cases(&set, &dir, Split::Train)?;
    let model = train_joint(&train, &cfg.joint)?;
    fs::create_dir_all(out)?;
    model.params.save(&out.join("params.json"))?;
    write_json(&out.join("trace.json"), &model.trace)?;
    echo(out, "train", json!({ "cases": cases }), cfg)?;
    let last = model.trace.last().expect("trace starts with the initial loss");
    eprintln!("trained on {} cases, final objective {:.6}", train.len(), last.loss.total);
    Ok(())
}

fn mask_labels(labels: &[usize], class: usize) -> Vec<usize> {
    labels.iter().map(|&l| usize::from(l == class)).collect()
}

pub fn segment(case: &Path, params: &Path, args: &PipelineArgs, out: &Path) -> Result<()> {
    let cfg = resolve(args)?;
    let loaded = load_case(&case_manifest_path(case))?;
    let model = ModelParams::load(params)?;
    let seg = segment_case(&model, &loaded.sequence, &cfg.joint)?;
    fs::create_dir_all(out)?;
    let (w, h) = (loaded.sequence.width(), loaded.sequence.height());
    let pathology = seg.pathology.argmax();
    let anatomy = seg.anatomy.argmax();
    write_labelmap(&out.join("pathology.f32g"), &seg.pathology)?;
    write_labelmap(&out.join("anatomy.f32g"), &seg.anatomy)?;
    write_class_indices(&out.join("pathology_labels.f32g"), w, h, &pathology)?;
    write_class_indices(&out.join("anatomy_labels.f32g"), w, h, &anatomy)?;
    write_class_indices(&out.join("myocardium_mask.f32g"), w, h, &mask_labels(&anatomy, MYOCARDIUM))?;
    write_class_indices(&out.join("edema_mask.f32g"), w, h, &mask_labels(&pathology, EDEMA))?;
    write_class_indices(&out.join("scar_mask.f32g"), w, h, &mask_labels(&pathology, SCAR))?;
    write_json(
        &out.join("segmentation.json"),
        &json!({ "case": loaded.manifest.name, "frames": seg.frames }),
    )?;
    echo(out, "segment", json!({ "case": case, "params": params }), cfg)
}

fn read_labels(path: &Path, loaded: &LoadedCase) -> Result<Vec<usize>> {
    let (w, h, labels) = read_class_indices(path)?;
    if (w, h) != (loaded.manifest.width, loaded.manifest.height) {
        return Err(Error::DimensionMismatch {
            context: "evaluate (prediction vs gold)",
            expected: format!("{}x{}", loaded.manifest.width, loaded.manifest.height),
            found: format!("{w}x{h}"),
        });
    }
    Ok(labels)
}

pub fn evaluate(pred: &Path, gold: &Path, out: &Path) -> Result<()> {
    let loaded = load_case(&case_manifest_path(gold))?;
    let name = loaded.manifest.name.clone();
    let missing = |what: &str| Error::InvalidInput(format!("case {name} has no gold {what}"));
    let gold_path = loaded.pathology.as_ref().ok_or_else(|| missing("pathology"))?.argmax();
    let gold_anat = loaded.anatomy.as_ref().ok_or_else(|| missing("anatomy"))?.argmax();
    let pred_path = read_labels(&pred.join("pathology_labels.f32g"), &loaded)?;
    let anat_file = pred.join("anatomy_labels.f32g");
    let pred_anat = if anat_file.exists() {
        Some(read_labels(&anat_file, &loaded)?)
    } else {
        None
    };

    let (w, h, sp): (usize, usize, Spacing) = (loaded.manifest.width, loaded.manifest.height, loaded.manifest.spacing);
    let mask = |labels: &[usize], class| BinaryMask::from_labels(w, h, sp, labels, class);
    let myo = mask(&gold_anat, MYOCARDIUM)?;
    let mut reports = vec![
        class_report(&name, "edema", &mask(&pred_path, EDEMA)?, &mask(&gold_path, EDEMA)?, &myo)?,
        class_report(&name, "scar", &mask(&pred_path, SCAR)?, &mask(&gold_path, SCAR)?, &myo)?,
    ];
    if let Some(pa) = pred_anat {
        let all = BinaryMask::full(w, h, sp);
        reports.push(class_report(&name, "myocardium", &mask(&pa, MYOCARDIUM)?, &myo, &all)?);
    }
    fs::create_dir_all(out)?;
    write_json(&out.join("metrics.json"), &reports)?;
    fs::write(out.join("metrics.csv"), reports_to_csv(&reports))?;
    echo(out, "evaluate", json!({ "pred": pred, "gold": gold }), serde_json::Value::Null)
}

fn read_mask(path: &Path) -> Result<BinaryMask> {
    let (w, h, labels) = read_class_indices(path)?;
    BinaryMask::new(w, h, Spacing::isotropic(1.0), labels.iter().map(|&l| l != 0).collect())
}

pub fn quantify(myo: &Path, scar: &Path, level: &str, start_deg: f64, out: &Path) -> Result<()> {
    let level = match level {
        "basal" => SliceLevel::Basal,
        "mid" => SliceLevel::Mid,
        "apical" => SliceLevel::Apical,
        other => return Err(Error::InvalidConfig(format!("unknown slice level {other:?}"))),
    };
    if !start_deg.is_finite() {
        return Err(Error::InvalidConfig("--start-deg must be finite".into()));
    }
    let report = transmurality_report(&read_mask(myo)?, &read_mask(scar)?)?;
    let segments = segment_table(&report, level, start_deg);
    fs::create_dir_all(out)?;
    write_json(&out.join("chords.json"), &report)?;
    let name = scar.parent().and_then(|p| p.file_name()).map_or("case".into(), |n| n.to_string_lossy().into_owned());
    fs::write(out.join("chords.csv"), report.to_csv(&name))?;
    write_json(&out.join("segments.json"), &segments)?;
    echo(
        out,
        "quantify",
        json!({ "myo": myo, "scar": scar }),
        json!({ "level": level, "start_deg": start_deg }),
    )
}

pub fn sweep_frames(cases: &Path, proportions: Option<&str>, args: &PipelineArgs, out: &Path) -> Result<()> {
    let cfg = resolve(args)?;
    let props: Vec<FrameProportion> = match proportions {
        None => (1..=6).map(FrameProportion::sixths).collect::<Result<_>>()?,
        Some(list) => list
            .split(',')
            .map(|p| p.trim().parse::<FrameProportion>().map_err(|e| Error::InvalidConfig(format!("--proportions: {e}"))))
            .collect::<Result<_>>()?,
    };
    let (set, dir) = CaseSet::load(cases)?;
    let train = training_cases(&set, &dir, Split::Train)?;
    let test = training_cases(&set, &dir, Split::Test)?;
    let rows = run_sweep(&train, &test, &props, &cfg.joint)?;
    fs::create_dir_all(out)?;
    write_json(&out.join("sweep.json"), &rows)?;
    let mut csv = String::from("proportion,frames,edema_dice,scar_dice,mean_dice\n");
    for r in &rows {
        csv.push_str(&format!(
            "{},{},{:.6},{:.6},{:.6}\n",
            r.proportion,
            r.frames,
            r.dice.edema,
            r.dice.scar,
            r.dice.mean()
        ));
    }
    fs::write(out.join("sweep.csv"), csv)?;
    echo(
        out,
        "sweep-frames",
        json!({ "cases": cases, "proportions": props }),
        cfg,
    )
}
