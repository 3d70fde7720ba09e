//! The `dgpsim` command line: train runs, replayed attacks, parameter
//! sweeps, claim verification, communication accounting, and report
//! rendering.
//!
//! Exit codes are a stable contract: 0 success, 2 config error,
//! 3 divergence, 4 inapplicable attack.

use std::fs;
use std::path::{Path, PathBuf};

use serde_json::Value;

use crate::attack::{
    bias_attack, imprint_attack, infer_label, opt_attack, AttackReport, GradObservation,
    LabelResult, OptAttackConfig,
};
use crate::defense::PruneRule;
use crate::defense::{DgpConfig, SparseGradient};
use crate::error::{DgpError, Result};
use crate::metrics::Metric;
use crate::model::{GradientSet, ImprintSpec, MlpModel};
use crate::numerics::Tensor;
use crate::sim::{
    snapshot_gradients, train, write_records_jsonl, Defense, RunConfig, RunRecord,
};
use crate::theory::{
    check_assumption1, check_convergence, check_lemma1, check_prop1, check_theorem1_empirical,
    theorem1_epsilon_prime, BoundReport,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DIVERGED: i32 = 3;
pub const EXIT_INAPPLICABLE: i32 = 4;

const USAGE: &str = "usage: dgpsim <train|attack|sweep|verify|comm|report> \
[--config PATH] [--out DIR] [--key value ...]";

/// Entry point; returns the process exit code.
pub fn run(args: &[String]) -> i32 {
    let result = dispatch(args);
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("dgpsim: {e}");
            match e {
                DgpError::Diverged { .. } => EXIT_DIVERGED,
                DgpError::AttackInapplicable(_) => EXIT_INAPPLICABLE,
                _ => EXIT_CONFIG,
            }
        }
    }
}

fn dispatch(args: &[String]) -> Result<()> {
    let Some(sub) = args.first() else {
        return Err(DgpError::InvalidArgument(USAGE.into()));
    };
    let flags = Flags::parse(&args[1..])?;
    match sub.as_str() {
        "train" => cmd_train(&flags),
        "attack" => cmd_attack(&flags),
        "sweep" => cmd_sweep(&flags),
        "verify" => cmd_verify(&flags),
        "comm" => cmd_comm(&flags),
        "report" => cmd_report(&flags),
        other => Err(DgpError::InvalidArgument(format!(
            "unknown subcommand {other}; {USAGE}"
        ))),
    }
}

/// Parsed `--key value` pairs, order preserved.
struct Flags {
    pairs: Vec<(String, String)>,
}

impl Flags {
    fn parse(args: &[String]) -> Result<Flags> {
        let mut pairs = Vec::new();
        let mut i = 0;
        while i < args.len() {
            let key = args[i]
                .strip_prefix("--")
                .ok_or_else(|| DgpError::InvalidArgument(format!("expected --flag, got {}", args[i])))?;
            let value = args
                .get(i + 1)
                .ok_or_else(|| DgpError::InvalidArgument(format!("--{key} needs a value")))?;
            pairs.push((key.to_string(), value.clone()));
            i += 2;
        }
        Ok(Flags { pairs })
    }

    fn get(&self, key: &str) -> Option<&str> {
        self.pairs
            .iter()
            .rev()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    fn require(&self, key: &str) -> Result<&str> {
        self.get(key)
            .ok_or_else(|| DgpError::InvalidArgument(format!("missing required --{key}")))
    }

    fn out_dir(&self) -> Result<PathBuf> {
        let dir = PathBuf::from(self.require("out")?);
        fs::create_dir_all(&dir)?;
        Ok(dir)
    }

    /// Overrides: every pair except the reserved plumbing flags.
    fn overrides(&self) -> impl Iterator<Item = (&str, &str)> {
        const RESERVED: &[&str] = &[
            "config", "out", "run", "attack", "round", "user", "param", "values", "runs",
            "imprint-spec",
        ];
        self.pairs
            .iter()
            .filter(|(k, _)| !RESERVED.contains(&k.as_str()))
            .map(|(k, v)| (k.as_str(), v.as_str()))
    }
}

/// `none | topk:K | dgp:K1,K2 | adgp:K1,K2,K | dp:STD`
pub fn parse_defense(text: &str) -> Result<Defense> {
    let bad = || DgpError::InvalidConfig(format!("unparsable defense {text:?}"));
    let (kind, params) = text.split_once(':').unwrap_or((text, ""));
    let nums: Vec<f64> = if params.is_empty() {
        vec![]
    } else {
        params
            .split(',')
            .map(|p| p.trim().parse::<f64>().map_err(|_| bad()))
            .collect::<Result<_>>()?
    };
    let defense = match (kind, nums.as_slice()) {
        ("none", []) => Defense::None,
        ("topk", [k]) => Defense::Topk { k: *k },
        ("dgp", [k1, k2]) => Defense::Dgp { k1: *k1, k2: *k2 },
        ("adgp", [k1, k2, k]) => Defense::Adgp { k1: *k1, k2: *k2, k: *k },
        ("dp", [std]) => Defense::Dp { std: *std },
        _ => return Err(bad()),
    };
    defense.validate()?;
    Ok(defense)
}

/// Loads the run config, applies `--key value` overrides, then the
/// DGPSIM_SEED environment override.
fn load_config(flags: &Flags) -> Result<RunConfig> {
    let mut value: Value = match flags.get("config") {
        Some(path) => serde_json::from_str(&fs::read_to_string(path)?)?,
        None => serde_json::to_value(RunConfig::glyphs_default())?,
    };
    let map = value
        .as_object_mut()
        .ok_or_else(|| DgpError::InvalidConfig("config must be a JSON object".into()))?;
    for (key, raw) in flags.overrides() {
        let parsed = if key == "defense" {
            serde_json::to_value(parse_defense(raw)?)?
        } else {
            serde_json::from_str(raw).unwrap_or(Value::String(raw.to_string()))
        };
        map.insert(key.to_string(), parsed);
    }
    let mut cfg: RunConfig = serde_json::from_value(value)?;
    if let Ok(seed) = std::env::var("DGPSIM_SEED") {
        cfg.seed = seed
            .parse()
            .map_err(|_| DgpError::InvalidConfig(format!("DGPSIM_SEED={seed} is not a u64")))?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn load_run_config(run_dir: &Path) -> Result<RunConfig> {
    let cfg: RunConfig =
        serde_json::from_str(&fs::read_to_string(run_dir.join("config.json"))?)?;
    cfg.validate()?;
    Ok(cfg)
}

fn cmd_train(flags: &Flags) -> Result<()> {
    let cfg = load_config(flags)?;
    let out = flags.out_dir()?;
    let result = train(&cfg)?;
    fs::write(out.join("config.json"), serde_json::to_string_pretty(&cfg)?)?;
    write_records_jsonl(&result.records, &out.join("records.jsonl"))?;
    fs::write(out.join("checkpoint.json"), result.model.to_checkpoint_json())?;
    fs::write(out.join("ledger.csv"), result.ledger.to_csv())?;
    let acc = result.final_accuracy().unwrap_or(f64::NAN);
    println!("final accuracy: {acc:.4}");
    Ok(())
}

fn cmd_attack(flags: &Flags) -> Result<()> {
    let run_dir = PathBuf::from(flags.require("run")?);
    let cfg = load_run_config(&run_dir)?;
    let attack = flags.require("attack")?.to_string();
    let round: usize = parse_num(flags.get("round").unwrap_or("0"))?;
    let user: usize = parse_num(flags.get("user").unwrap_or("0"))?;
    let out = flags.out_dir()?;

    let report = match attack.as_str() {
        "bias" => {
            let (obs, batch, model) = snapshot_gradients(&cfg, round, user)?;
            let r = bias_attack(&model, &obs, &batch)?;
            write_image_pairs(&out, &[batch.sample_input(0)], &r.recovered)?;
            r
        }
        "opt-euclid" | "opt-cos" => {
            let (obs, batch, model) = snapshot_gradients(&cfg, round, user)?;
            let attack_cfg = OptAttackConfig {
                distance: if attack == "opt-cos" {
                    Metric::Cosine
                } else {
                    Metric::Euclidean
                },
                seed: cfg.seed,
                ..OptAttackConfig::default()
            };
            let r = opt_attack(&model, &obs, &attack_cfg, &batch)?;
            write_image_pairs(&out, &[batch.sample_input(0)], &r.recovered)?;
            r
        }
        "label" => return cmd_attack_label(&cfg, &out, flags),
        "imprint" => {
            let spec = load_imprint_spec(flags, &cfg)?;
            let (_, batch, base_model) = snapshot_gradients(&cfg, round, user)?;
            let model = base_model.insert_imprint(&spec)?;
            let (_, grads) = model.loss_and_grad(&batch)?;
            let wire = defense_wire(&cfg.defense, &grads)?;
            let obs = GradObservation {
                wire,
                batch_size: batch.size(),
                num_classes: model.num_classes(),
                snapshot_id: format!("imprint-round{round}"),
            };
            let r = imprint_attack(&model, &obs, &spec, &batch)?;
            let truths: Vec<Tensor> = (0..batch.size()).map(|i| batch.sample_input(i)).collect();
            write_image_pairs(&out, &truths, &r.recovered)?;
            r
        }
        other => {
            return Err(DgpError::InvalidArgument(format!(
                "unknown attack {other}; expected opt-euclid|opt-cos|bias|label|imprint"
            )))
        }
    };
    fs::write(out.join("report.json"), serde_json::to_string_pretty(&report)?)?;
    println!(
        "attack {attack}: success={} mean_mse={:.6e} mean_ssim={:.4}",
        report.success,
        report.mean_mse(),
        report.mean_ssim()
    );
    Ok(())
}

/// Label inference over up to 100 rounds; needs single-sample batches,
/// so the replayed variant forces batch_size 1.
fn cmd_attack_label(cfg: &RunConfig, out: &Path, _flags: &Flags) -> Result<()> {
    let mut single = cfg.clone();
    single.batch_size = 1;
    let rounds = cfg.rounds.min(100);
    let mut correct = 0usize;
    let mut decided = 0usize;
    for round in 0..rounds {
        let (obs, batch, model) = snapshot_gradients(&single, round, 0)?;
        match infer_label(&model, &obs) {
            LabelResult::Label(y) => {
                decided += 1;
                if y == batch.labels[0] {
                    correct += 1;
                }
            }
            LabelResult::Undecidable => {}
        }
    }
    let accuracy = correct as f64 / rounds as f64;
    let summary = serde_json::json!({
        "attack": "label",
        "rounds": rounds,
        "decided": decided,
        "correct": correct,
        "accuracy": accuracy,
    });
    fs::write(out.join("report.json"), serde_json::to_string_pretty(&summary)?)?;
    println!("label accuracy: {correct}/{rounds} ({accuracy:.4})");
    Ok(())
}

fn defense_wire(defense: &Defense, grads: &GradientSet) -> Result<SparseGradient> {
    let rule = match *defense {
        Defense::None | Defense::Dp { .. } => PruneRule::Identity,
        Defense::Topk { k } => PruneRule::TopK(k),
        Defense::Dgp { k1, k2 } | Defense::Adgp { k1, k2, .. } => {
            PruneRule::Dgp(DgpConfig::new(k1, k2)?)
        }
    };
    rule.apply(grads)
}

fn load_imprint_spec(flags: &Flags, cfg: &RunConfig) -> Result<ImprintSpec> {
    if let Some(path) = flags.get("imprint-spec") {
        let spec: ImprintSpec = serde_json::from_str(&fs::read_to_string(path)?)?;
        spec.validate()?;
        return Ok(spec);
    }
    // default: mean-brightness measurement with 8 evenly spaced bins
    let d = cfg.model_dims()[0];
    let spec = ImprintSpec {
        measurement: Tensor::from_vec(vec![1.0 / d as f64; d]),
        thresholds: (0..8).map(|i| 0.15 + 0.075 * i as f64).collect(),
        pass_through: true,
    };
    spec.validate()?;
    Ok(spec)
}

fn cmd_sweep(flags: &Flags) -> Result<()> {
    let cfg = load_config(flags)?;
    let out = flags.out_dir()?;
    let param = flags.require("param")?.to_string();
    let values: Vec<f64> = flags
        .require("values")?
        .split(',')
        .map(|v| {
            v.trim()
                .parse::<f64>()
                .map_err(|_| DgpError::InvalidArgument(format!("bad sweep value {v:?}")))
        })
        .collect::<Result<_>>()?;
    if values.is_empty() {
        return Err(DgpError::InvalidArgument("empty sweep values".into()));
    }

    let mut csv = String::from("value,attack_ssim,attack_mse,final_accuracy\n");
    for &value in &values {
        let (k1, k2, attack) = match param.as_str() {
            // total removal swept at fixed ratio p = k1/k2 = 1/15
            "sum_k" => {
                if !(0.0 < value && value < 1.0) {
                    return Err(DgpError::OutOfRange(format!("sum_k {value} outside (0,1)")));
                }
                (value / 16.0, value * 15.0 / 16.0, "imprint")
            }
            // top/bottom ratio swept at fixed total removal 80%
            "p" => {
                if value <= 0.0 {
                    return Err(DgpError::OutOfRange(format!("p {value} must be > 0")));
                }
                (0.8 * value / (1.0 + value), 0.8 / (1.0 + value), "opt")
            }
            other => {
                return Err(DgpError::InvalidArgument(format!(
                    "unknown sweep param {other}; expected sum_k|p"
                )))
            }
        };
        let mut run_cfg = cfg.clone();
        run_cfg.defense = Defense::Dgp { k1, k2 };
        run_cfg.error_feedback = true;
        let result = train(&run_cfg)?;
        let accuracy = result.final_accuracy().unwrap_or(f64::NAN);

        let mut attack_cfg = run_cfg.clone();
        attack_cfg.batch_size = 1;
        let report = match attack {
            "imprint" => {
                let spec = load_imprint_spec(flags, &attack_cfg)?;
                let (_, batch, base_model) = snapshot_gradients(&attack_cfg, 0, 0)?;
                let model = base_model.insert_imprint(&spec)?;
                let (_, grads) = model.loss_and_grad(&batch)?;
                let obs = GradObservation {
                    wire: defense_wire(&attack_cfg.defense, &grads)?,
                    batch_size: 1,
                    num_classes: model.num_classes(),
                    snapshot_id: format!("sweep-{value}"),
                };
                imprint_attack(&model, &obs, &spec, &batch)?
            }
            _ => {
                let (obs, batch, model) = snapshot_gradients(&attack_cfg, 0, 0)?;
                let opt_cfg = OptAttackConfig {
                    seed: attack_cfg.seed,
                    iterations: 800,
                    restarts: 2,
                    ..OptAttackConfig::default()
                };
                opt_attack(&model, &obs, &opt_cfg, &batch)?
            }
        };
        csv.push_str(&format!(
            "{value},{},{},{accuracy}\n",
            report.mean_ssim(),
            report.mean_mse()
        ));
    }
    fs::write(out.join("sweep.csv"), &csv)?;
    print!("{csv}");
    Ok(())
}

fn cmd_verify(flags: &Flags) -> Result<()> {
    let out = flags.out_dir()?;
    let base_seed = match std::env::var("DGPSIM_SEED") {
        Ok(s) => s
            .parse()
            .map_err(|_| DgpError::InvalidConfig(format!("DGPSIM_SEED={s} is not a u64")))?,
        Err(_) => 0u64,
    };
    let reports = run_verification(base_seed)?;

    let mut csv = String::from("claim_id,measured,bound,pass\n");
    let mut jsonl = String::new();
    for r in &reports {
        csv.push_str(&r.csv_row());
        csv.push('\n');
        jsonl.push_str(&serde_json::to_string(r)?);
        jsonl.push('\n');
        println!("{}", r.csv_row());
    }
    fs::write(out.join("verify.csv"), csv)?;
    fs::write(out.join("verify.jsonl"), jsonl)?;
    Ok(())
}

/// All claim checks on freshly generated data; shared by the CLI and the
/// examples.
pub fn run_verification(seed: u64) -> Result<Vec<BoundReport>> {
    use crate::numerics::{gaussian, Rng};
    let mut reports = Vec::new();

    // pruning-loss band on gaussian gradient samples
    let mut rng = Rng::new(seed, 0x7e0);
    for (k1, k2) in [(0.05, 0.75), (0.1, 0.38), (0.2, 0.6)] {
        let cfg = DgpConfig::new(k1, k2)?;
        let samples: Vec<GradientSet> = (0..200)
            .map(|_| {
                let mut g = GradientSet::new();
                g.insert("w", gaussian(&mut rng, &[400], 0.0, 1.0).unwrap());
                g
            })
            .collect();
        let mut r = check_assumption1(&samples, &cfg)?;
        r.claim = format!("assumption1(k1={k1},k2={k2})");
        reports.push(r.clone());
        let mut t1 = check_theorem1_empirical(&samples, &cfg)?;
        t1.claim = format!("theorem1(k1={k1},k2={k2})");
        reports.push(t1);
    }

    // formula spot check recorded as a report row
    let eps_prime = theorem1_epsilon_prime(0.1, 0.25, 2.0, Metric::Euclidean)?;
    reports.push(BoundReport {
        claim: "theorem1-formula".into(),
        measured: eps_prime,
        bound: 1.1,
        satisfied: (eps_prime - 1.1).abs() <= 1e-12,
        note: None,
        inputs: Default::default(),
    });

    // residual bound on an error-feedback run
    let ef_cfg = RunConfig {
        rounds: 200,
        eval_every: 0,
        defense: Defense::Dgp { k1: 0.05, k2: 0.75 },
        error_feedback: true,
        seed,
        ..RunConfig::glyphs_default()
    };
    reports.push(check_lemma1(&train(&ef_cfg)?.records)?);

    // first-order recovery bound diagnostic
    let mut rng = Rng::new(seed, 0x7e1);
    let model = MlpModel::random(&[16, 8, 4], &mut rng)?;
    let x = gaussian(&mut rng, &[16], 0.5, 0.2)?;
    let u = gaussian(&mut rng, &[16], 0.0, 1.0)?;
    let x_prime = x.add(&u.scale(1e-3 / u.norm()))?;
    reports.push(check_prop1(&model, &x, &x_prime, 1)?);

    // convergence shape on blobs
    let conv_base = RunConfig {
        rounds: 120,
        users: 5,
        eval_every: 0,
        learning_rate: 0.3,
        track_full_grad: true,
        seed,
        ..RunConfig::blobs_default()
    };
    let sgd = train(&conv_base)?;
    let dgp = train(&RunConfig {
        defense: Defense::Dgp { k1: 0.05, k2: 0.75 },
        error_feedback: true,
        ..conv_base
    })?;
    reports.push(check_convergence(&dgp.records, &sgd.records)?);
    Ok(reports)
}

fn cmd_comm(flags: &Flags) -> Result<()> {
    let run_dir = PathBuf::from(flags.require("run")?);
    let cfg = load_run_config(&run_dir)?;
    let ledger_text = fs::read_to_string(run_dir.join("ledger.csv"))?;
    let mut upload = 0u64;
    let mut download = 0u64;
    for line in ledger_text.lines().skip(1) {
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() == 4 {
            upload += parse_num::<u64>(cols[2])?;
            download += parse_num::<u64>(cols[3])?;
        }
    }
    let params: usize = cfg
        .model_dims()
        .windows(2)
        .map(|w| w[0] * w[1] + w[1])
        .sum();
    let dense_total = 4u64 * params as u64 * (cfg.users * cfg.rounds) as u64;

    let mut csv = String::from("direction,total_bytes,dense_baseline_bytes,ratio\n");
    csv.push_str(&format!(
        "upload,{upload},{dense_total},{}\n",
        upload as f64 / dense_total as f64
    ));
    csv.push_str(&format!(
        "download,{download},{dense_total},{}\n",
        download as f64 / dense_total as f64
    ));
    if let Some(out) = flags.get("out") {
        let dir = PathBuf::from(out);
        fs::create_dir_all(&dir)?;
        fs::write(dir.join("comm.csv"), &csv)?;
    }
    print!("{csv}");
    println!(
        "upload savings vs dense: {:.4}x; download vs dense: {:.4}x",
        dense_total as f64 / upload.max(1) as f64,
        dense_total as f64 / download.max(1) as f64
    );
    Ok(())
}

fn cmd_report(flags: &Flags) -> Result<()> {
    let out = flags.out_dir()?;
    let runs: Vec<PathBuf> = match flags.get("runs") {
        None => vec![],
        Some(list) if list.is_empty() => vec![],
        Some(list) => list.split(',').map(PathBuf::from).collect(),
    };

    let mut curves: Vec<(String, Vec<(usize, f64)>)> = Vec::new();
    let mut csv = String::from("run,round,accuracy\n");
    for dir in &runs {
        let records = crate::sim::read_records_jsonl(&dir.join("records.jsonl"))?;
        let label = dir
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| dir.display().to_string());
        let points: Vec<(usize, f64)> = records
            .iter()
            .filter_map(|r: &RunRecord| r.test_accuracy.map(|a| (r.round, a)))
            .collect();
        for (round, acc) in &points {
            csv.push_str(&format!("{label},{round},{acc}\n"));
        }
        curves.push((label, points));
    }
    fs::write(out.join("report.csv"), &csv)?;
    fs::write(out.join("report.svg"), svg_curves(&curves))?;
    println!("report written for {} run(s)", runs.len());
    Ok(())
}

fn parse_num<T: std::str::FromStr>(text: &str) -> Result<T> {
    text.trim()
        .parse()
        .map_err(|_| DgpError::InvalidArgument(format!("bad number {text:?}")))
}

/// Plain ASCII PGM (P2), pixel values clamped to [0,1] then scaled to
/// 0..255.
pub fn write_pgm(path: &Path, image: &Tensor) -> Result<()> {
    let (h, w) = pgm_dims(image.len());
    let mut text = format!("P2\n{w} {h}\n255\n");
    for row in 0..h {
        let line: Vec<String> = (0..w)
            .map(|c| {
                let v = image.data()[row * w + c].clamp(0.0, 1.0);
                format!("{}", (v * 255.0).round() as u8)
            })
            .collect();
        text.push_str(&line.join(" "));
        text.push('\n');
    }
    fs::write(path, text)?;
    Ok(())
}

fn pgm_dims(len: usize) -> (usize, usize) {
    let side = (len as f64).sqrt().round() as usize;
    if side * side == len {
        (side, side)
    } else {
        (1, len)
    }
}

fn write_image_pairs(out: &Path, truths: &[Tensor], recovered: &[Tensor]) -> Result<()> {
    for (i, t) in truths.iter().enumerate() {
        write_pgm(&out.join(format!("truth_{i:02}.pgm")), t)?;
    }
    for (i, r) in recovered.iter().enumerate() {
        write_pgm(&out.join(format!("recovered_{i:02}.pgm")), r)?;
    }
    Ok(())
}

/// Minimal standalone SVG: one labeled polyline per run, linear axes.
pub fn svg_curves(curves: &[(String, Vec<(usize, f64)>)]) -> String {
    const W: f64 = 640.0;
    const H: f64 = 400.0;
    const M: f64 = 50.0;
    let max_x = curves
        .iter()
        .flat_map(|(_, pts)| pts.iter().map(|p| p.0))
        .max()
        .unwrap_or(1)
        .max(1) as f64;
    let colors = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#8c564b", "#e377c2"];

    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" \
viewBox=\"0 0 {W} {H}\">\n<rect width=\"{W}\" height=\"{H}\" fill=\"white\"/>\n\
<line x1=\"{M}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>\n\
<line x1=\"{M}\" y1=\"{M}\" x2=\"{M}\" y2=\"{}\" stroke=\"black\"/>\n\
<text x=\"{}\" y=\"{}\" font-size=\"12\">round</text>\n\
<text x=\"8\" y=\"{M}\" font-size=\"12\">accuracy</text>\n",
        H - M,
        W - M,
        H - M,
        H - M,
        W / 2.0 - 20.0,
        H - 12.0,
    );
    for (i, (label, points)) in curves.iter().enumerate() {
        if points.is_empty() {
            continue;
        }
        let color = colors[i % colors.len()];
        let path: Vec<String> = points
            .iter()
            .map(|&(x, y)| {
                let px = M + (x as f64 / max_x) * (W - 2.0 * M);
                let py = (H - M) - y.clamp(0.0, 1.0) * (H - 2.0 * M);
                format!("{px:.1},{py:.1}")
            })
            .collect();
        svg.push_str(&format!(
            "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\" points=\"{}\"/>\n",
            path.join(" ")
        ));
        svg.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" font-size=\"12\" fill=\"{color}\">{label}</text>\n",
            W - M + 4.0,
            M + 16.0 * i as f64,
        ));
    }
    svg.push_str("</svg>\n");
    svg
}

/// Re-exported for integration tests that drive attacks directly.
pub fn attack_report_json(report: &AttackReport) -> Result<String> {
    Ok(serde_json::to_string_pretty(report)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defense_parsing() {
        assert_eq!(parse_defense("none").unwrap(), Defense::None);
        assert_eq!(parse_defense("topk:0.2").unwrap(), Defense::Topk { k: 0.2 });
        assert_eq!(
            parse_defense("dgp:0.05,0.75").unwrap(),
            Defense::Dgp { k1: 0.05, k2: 0.75 }
        );
        assert_eq!(
            parse_defense("adgp:0.05,0.75,0.2").unwrap(),
            Defense::Adgp { k1: 0.05, k2: 0.75, k: 0.2 }
        );
        assert_eq!(parse_defense("dp:0.01").unwrap(), Defense::Dp { std: 0.01 });
        assert!(parse_defense("dgp:0.9,0.9").is_err());
        assert!(parse_defense("bogus").is_err());
    }

    #[test]
    fn missing_config_file_is_config_error() {
        let args: Vec<String> = ["train", "--config", "/nonexistent.json", "--out", "/tmp/x"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        assert_eq!(run(&args), EXIT_CONFIG);
    }

    #[test]
    fn unknown_subcommand_is_config_error() {
        let args = vec!["frobnicate".to_string()];
        assert_eq!(run(&args), EXIT_CONFIG);
    }

    #[test]
    fn pgm_format_shape() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("img.pgm");
        let img = Tensor::from_vec(vec![0.0, 0.5, 1.0, 2.0]);
        write_pgm(&path, &img).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "P2");
        assert_eq!(lines[1], "2 2");
        assert_eq!(lines[2], "255");
        assert_eq!(lines[3], "0 128");
        assert_eq!(lines[4], "255 255");
    }

    #[test]
    fn svg_has_one_curve_per_run() {
        let curves = vec![
            ("base".to_string(), vec![(0, 0.2), (10, 0.9)]),
            ("dgp".to_string(), vec![(0, 0.25), (10, 0.85)]),
        ];
        let svg = svg_curves(&curves);
        assert_eq!(svg.matches("<polyline").count(), 2);
        assert!(svg.contains(">base<") && svg.contains(">dgp<"));
    }

    #[test]
    fn train_and_attack_via_cli_are_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let run_a = dir.path().join("a");
        let run_b = dir.path().join("b");
        for run_dir in [&run_a, &run_b] {
            let args: Vec<String> = [
                "train",
                "--out",
                run_dir.to_str().unwrap(),
                "--dataset",
                "\"blobs\"",
                "--rounds",
                "10",
                "--users",
                "2",
                "--batch_size",
                "1",
                "--eval_every",
                "5",
                "--hidden",
                "[]",
                "--defense",
                "dgp:0.05,0.75",
                "--error_feedback",
                "true",
            ]
            .iter()
            .map(|s| s.to_string())
            .collect();
            assert_eq!(run(&args), EXIT_OK);
        }
        for file in ["config.json", "records.jsonl", "checkpoint.json", "ledger.csv"] {
            assert_eq!(
                fs::read(run_a.join(file)).unwrap(),
                fs::read(run_b.join(file)).unwrap(),
                "{file} differs between identical runs"
            );
        }

        let atk_a = dir.path().join("atk_a");
        let atk_b = dir.path().join("atk_b");
        for (run_dir, atk_dir) in [(&run_a, &atk_a), (&run_b, &atk_b)] {
            let args: Vec<String> = [
                "attack",
                "--run",
                run_dir.to_str().unwrap(),
                "--attack",
                "bias",
                "--round",
                "2",
                "--user",
                "1",
                "--out",
                atk_dir.to_str().unwrap(),
            ]
            .iter()
            .map(|s| s.to_string())
            .collect();
            assert_eq!(run(&args), EXIT_OK);
        }
        for file in ["report.json", "truth_00.pgm", "recovered_00.pgm"] {
            let mut a = fs::read_to_string(atk_a.join(file)).unwrap();
            let mut b = fs::read_to_string(atk_b.join(file)).unwrap();
            if file == "report.json" {
                // wall time is the only nondeterministic field
                a = strip_wall_time(&a);
                b = strip_wall_time(&b);
            }
            assert_eq!(a, b, "{file} differs");
        }
    }

    fn strip_wall_time(text: &str) -> String {
        let mut v: Value = serde_json::from_str(text).unwrap();
        v.as_object_mut().unwrap().remove("wall_time_secs");
        serde_json::to_string(&v).unwrap()
    }

    #[test]
    fn report_with_no_runs_is_ok() {
        let dir = tempfile::tempdir().unwrap();
        let args: Vec<String> = ["report", "--out", dir.path().to_str().unwrap()]
            .iter()
            .map(|s| s.to_string())
            .collect();
        assert_eq!(run(&args), EXIT_OK);
        let csv = fs::read_to_string(dir.path().join("report.csv")).unwrap();
        assert_eq!(csv, "run,round,accuracy\n");
    }
}
