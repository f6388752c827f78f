//! trajlat: dataset generation, training, evaluation, prediction and latent
//! editing driven by one JSON run configuration.
//!
//! Every command is a pure function of (config, inputs, seed): artifacts are
//! byte-identical across repeated invocations except for wallclock columns.
//! Exit codes: 0 success, 1 runtime failure, 2 usage/config error.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use trajlat::config::{apply_set, load_value, RunConfig};
use trajlat::data::{
    load_trajectories, normalize, save_trajectories, split_indices, NormalizationRecord, Segment,
    Trajectory,
};
use trajlat::infer::{self, EditAttribute};
use trajlat::model::TrajModel;
use trajlat::train::{self, load_checkpoint, save_checkpoint, TrainState, METRICS_HEADER};
use trajlat::{Result, TrajError};

#[derive(Parser)]
#[command(name = "trajlat", version, about = "Continuous-time trajectory representations")]
struct Cli {
    /// Worker threads (env TRAJLAT_THREADS is the fallback)
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic dataset and its train/val/test split manifest
    Gen(GenArgs),
    /// Train a model, writing checkpoints and a metrics CSV
    Train(TrainArgs),
    /// Evaluate a checkpoint on one split (F/P/I best-of-M, mean ± std)
    Eval(EvalArgs),
    /// Sample multi-future predictions for one input trajectory
    Predict(PredictArgs),
    /// Fit a temporal edit direction and decode edited variants
    Edit(EditArgs),
}

#[derive(Args)]
struct ConfigArgs {
    /// Run configuration (single JSON document)
    #[arg(long)]
    config: PathBuf,
    /// Dotted-path overrides, e.g. --set train.batch=8
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<RunConfig> {
        let mut v = load_value(&self.config)?;
        for s in &self.set {
            apply_set(&mut v, s)?;
        }
        RunConfig::from_value(v)
    }
}

#[derive(Args)]
struct GenArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Output directory (defaults to the config's out_dir)
    #[arg(long)]
    out: Option<PathBuf>,
    /// Write into a non-empty output directory
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Dataset JSONL (default {out_dir}/data.jsonl)
    #[arg(long)]
    data: Option<PathBuf>,
    /// Split manifest (default {out_dir}/splits.json)
    #[arg(long)]
    splits: Option<PathBuf>,
    /// Resume from this checkpoint directory
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Override the configured total step count
    #[arg(long)]
    steps: Option<u64>,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    splits: Option<PathBuf>,
    /// Split to evaluate: train, val or test
    #[arg(long, default_value = "test")]
    split: String,
    /// Candidates per prediction (overrides eval.m)
    #[arg(long)]
    m: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct PredictArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Input trajectory file (JSONL); the selected record becomes the segment
    #[arg(long)]
    input: PathBuf,
    /// Record id to predict for (default: first record)
    #[arg(long)]
    id: Option<String>,
    /// Query times, comma-separated seconds
    #[arg(long)]
    times: String,
    #[arg(long)]
    m: Option<usize>,
    /// Sampling seed (default: config seed)
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also write one SVG per frame per candidate
    #[arg(long)]
    render: bool,
    /// Skeleton edges as "0-1,1-2" (default: joint chain)
    #[arg(long)]
    skeleton: Option<String>,
}

#[derive(Args)]
struct EditArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Input trajectory file; all records fit the direction (≥ 10 needed)
    #[arg(long)]
    input: PathBuf,
    /// Record id to edit (default: first record)
    #[arg(long)]
    id: Option<String>,
    /// Edited attribute: speed or offset
    #[arg(long, default_value = "speed")]
    attribute: String,
    /// Edit magnitudes, comma-separated
    #[arg(long, default_value = "-2,-1,0,1,2")]
    magnitudes: String,
    /// Scale applied to every magnitude
    #[arg(long, default_value_t = 1.0)]
    lambda0: f64,
    /// Query times (default: the target segment's own times)
    #[arg(long)]
    times: Option<String>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    render: bool,
    #[arg(long)]
    skeleton: Option<String>,
}

fn main() {
    let cli = Cli::parse();
    let threads = cli.threads.or_else(|| {
        std::env::var("TRAJLAT_THREADS").ok().and_then(|s| s.parse().ok())
    });
    if let Some(n) = threads {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    let code = match run(&cli.cmd) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                TrajError::Config(_) => 2,
                _ => 1,
            }
        }
    };
    std::process::exit(code);
}

fn run(cmd: &Cmd) -> Result<()> {
    match cmd {
        Cmd::Gen(a) => cmd_gen(a),
        Cmd::Train(a) => cmd_train(a),
        Cmd::Eval(a) => cmd_eval(a),
        Cmd::Predict(a) => cmd_predict(a),
        Cmd::Edit(a) => cmd_edit(a),
    }
}

// ---------------------------------------------------------------------------
// shared plumbing
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct SplitManifest {
    train: Vec<String>,
    val: Vec<String>,
    test: Vec<String>,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| TrajError::Data(format!("{}: {e}", path.display())))
}

fn parse_floats(what: &str, s: &str) -> Result<Vec<f64>> {
    let vals: std::result::Result<Vec<f64>, _> =
        s.split(',').map(|p| p.trim().parse::<f64>()).collect();
    let vals =
        vals.map_err(|e| TrajError::Config(format!("{what}: cannot parse '{s}': {e}")))?;
    if vals.is_empty() {
        return Err(TrajError::Config(format!("{what}: empty list")));
    }
    Ok(vals)
}

/// Load a trajectory file with every record normalized to its own [0,100]²
/// bounding square.
fn load_normalized(path: &Path) -> Result<Vec<(Trajectory, NormalizationRecord)>> {
    load_trajectories(path)?.iter().map(normalize).collect()
}

fn select_split(
    all: &[(Trajectory, NormalizationRecord)],
    ids: &[String],
    name: &str,
) -> Result<Vec<Trajectory>> {
    let by_id: HashMap<&str, &Trajectory> =
        all.iter().map(|(t, _)| (t.id.as_str(), t)).collect();
    if ids.is_empty() {
        return Err(TrajError::Data(format!("split '{name}' is empty")));
    }
    ids.iter()
        .map(|id| {
            by_id
                .get(id.as_str())
                .map(|&t| t.clone())
                .ok_or_else(|| TrajError::Data(format!("split '{name}': unknown id '{id}'")))
        })
        .collect()
}

fn whole_segment(traj: &Trajectory) -> Result<Segment> {
    let span = (traj.times[0], *traj.times.last().expect("nonempty"));
    Segment::new(
        traj.times.clone(),
        traj.points.clone(),
        traj.visibility.clone(),
        Some(traj.id.clone()),
        span,
    )
}

fn pick_record<'a>(
    all: &'a [(Trajectory, NormalizationRecord)],
    id: Option<&str>,
) -> Result<&'a (Trajectory, NormalizationRecord)> {
    match id {
        None => all.first().ok_or_else(|| TrajError::Data("input file is empty".into())),
        Some(id) => all
            .iter()
            .find(|(t, _)| t.id == id)
            .ok_or_else(|| TrajError::Data(format!("input has no record with id '{id}'"))),
    }
}

/// Rebuild the configured model and overwrite its parameters from a
/// checkpoint. Shape mismatches surface as checkpoint errors.
fn restore_model(cfg: &RunConfig, ckpt: &Path) -> Result<TrajModel> {
    let data = load_checkpoint(ckpt)?;
    let mut rng = ChaCha12Rng::seed_from_u64(cfg.seed);
    let model = cfg.build_model(&mut rng)?;
    Ok(TrainState::restore(model, data, None)?.model)
}

fn out_dir(cfg: &RunConfig, flag: &Option<PathBuf>) -> Result<PathBuf> {
    let dir = flag.clone().unwrap_or_else(|| PathBuf::from(&cfg.out_dir));
    fs::create_dir_all(&dir)?;
    Ok(dir)
}

// ---------------------------------------------------------------------------
// gen
// ---------------------------------------------------------------------------

fn cmd_gen(args: &GenArgs) -> Result<()> {
    let cfg = args.config.load()?;
    let out = args.out.clone().unwrap_or_else(|| PathBuf::from(&cfg.out_dir));
    if out.exists() && out.read_dir()?.next().is_some() && !args.force {
        return Err(TrajError::Io(std::io::Error::new(
            std::io::ErrorKind::AlreadyExists,
            format!("output directory {} is not empty (use --force)", out.display()),
        )));
    }
    fs::create_dir_all(&out)?;

    let trajs = cfg.generate_all()?;
    save_trajectories(&out.join("data.jsonl"), &trajs)?;
    let idx = split_indices(trajs.len(), cfg.seed);
    let ids = |ixs: &[usize]| ixs.iter().map(|&i| trajs[i].id.clone()).collect::<Vec<_>>();
    let manifest =
        SplitManifest { train: ids(&idx.train), val: ids(&idx.val), test: ids(&idx.test) };
    write_json(&out.join("splits.json"), &manifest)?;
    println!(
        "generated {} trajectories ({} train / {} val / {} test) in {}",
        trajs.len(),
        manifest.train.len(),
        manifest.val.len(),
        manifest.test.len(),
        out.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

fn cmd_train(args: &TrainArgs) -> Result<()> {
    let cfg = args.config.load()?;
    let out = PathBuf::from(&cfg.out_dir);
    fs::create_dir_all(&out)?;
    let data_path = args.data.clone().unwrap_or_else(|| out.join("data.jsonl"));
    let splits_path = args.splits.clone().unwrap_or_else(|| out.join("splits.json"));
    let all = load_normalized(&data_path)?;
    let manifest: SplitManifest = read_json(&splits_path)?;
    let train_set = select_split(&all, &manifest.train, "train")?;
    let val_set = select_split(&all, &manifest.val, "val")?;

    let hash = cfg.hash()?;
    let total = args.steps.unwrap_or(cfg.train.steps);
    let mut state = match &args.resume {
        Some(dir) => TrainState::restore(
            {
                let mut rng = ChaCha12Rng::seed_from_u64(cfg.seed);
                cfg.build_model(&mut rng)?
            },
            load_checkpoint(dir)?,
            Some(&hash),
        )?,
        None => {
            let mut rng = ChaCha12Rng::seed_from_u64(cfg.seed);
            TrainState::new(cfg.build_model(&mut rng)?, cfg.seed, &hash)
        }
    };

    let metrics_path = out.join("metrics.csv");
    let mut metrics = if state.step > 0 && metrics_path.exists() {
        fs::OpenOptions::new().append(true).open(&metrics_path)?
    } else {
        let mut f = fs::File::create(&metrics_path)?;
        writeln!(f, "{METRICS_HEADER}")?;
        f
    };

    let t0 = Instant::now();
    let every = cfg.train.checkpoint_every;
    train::run(&mut state, &train_set, &cfg.train, total, |st, m| {
        writeln!(metrics, "{}", m.csv_row(t0.elapsed().as_secs_f64()))?;
        // st.step counts completed updates (m.step is the index before it)
        if st.step % every == 0 || st.step == total {
            save_checkpoint(st, &out.join(format!("checkpoint-{:06}", st.step)))?;
        }
        if st.step % 100 == 0 || st.step == total {
            eprintln!(
                "step {:>6}/{total}  loss_enc {:.4}  loss_dec {:.4}  lr {:.2e}",
                st.step, m.loss_enc, m.loss_dec, m.lr
            );
        }
        Ok(())
    })?;

    let report = infer::evaluate(&state.model, &val_set, &cfg.eval, cfg.seed)?;
    write_json(&out.join("eval_val.json"), &report)?;
    println!(
        "trained to step {} (val F {:.3} / P {:.3} / I {:.3}) in {}",
        state.step, report.model.f.mean, report.model.p.mean, report.model.i.mean,
        out.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

fn cmd_eval(args: &EvalArgs) -> Result<()> {
    let cfg = args.config.load()?;
    let out = out_dir(&cfg, &args.out)?;
    let base = PathBuf::from(&cfg.out_dir);
    let data_path = args.data.clone().unwrap_or_else(|| base.join("data.jsonl"));
    let splits_path = args.splits.clone().unwrap_or_else(|| base.join("splits.json"));
    let all = load_normalized(&data_path)?;
    let manifest: SplitManifest = read_json(&splits_path)?;
    let ids = match args.split.as_str() {
        "train" => &manifest.train,
        "val" => &manifest.val,
        "test" => &manifest.test,
        other => {
            return Err(TrajError::Config(format!(
                "unknown split '{other}' (expected train, val or test)"
            )))
        }
    };
    let set = select_split(&all, ids, &args.split)?;

    let model = restore_model(&cfg, &args.checkpoint)?;
    let mut ecfg = cfg.eval;
    if let Some(m) = args.m {
        ecfg.m = m;
    }
    let report = infer::evaluate(&model, &set, &ecfg, cfg.seed)?;
    write_json(&out.join("eval.json"), &report)?;
    fs::write(out.join("eval.csv"), report.to_csv())?;
    println!(
        "eval[{}] best-of-{}: model F {:.3} / P {:.3} / I {:.3} over {} trajectories ({} seeds)",
        args.split, report.m, report.model.f.mean, report.model.p.mean, report.model.i.mean,
        report.trajectories, report.seeds
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// predict
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct PredictionDoc {
    times: Vec<f64>,
    /// M × len(times) × K, in the normalized frame.
    candidates: Vec<Vec<Vec<f64>>>,
    /// Affine map from raw input coordinates into the normalized frame.
    normalization: NormalizationRecord,
}

fn cmd_predict(args: &PredictArgs) -> Result<()> {
    let cfg = args.config.load()?;
    let out = out_dir(&cfg, &args.out)?;
    let model = restore_model(&cfg, &args.checkpoint)?;
    let all = load_normalized(&args.input)?;
    let (traj, rec) = pick_record(&all, args.id.as_deref())?;
    let seg = whole_segment(traj)?;
    let times = parse_floats("--times", &args.times)?;
    let m = args.m.unwrap_or(cfg.eval.m);
    let mut rng = ChaCha12Rng::seed_from_u64(args.seed.unwrap_or(cfg.seed));
    let candidates = infer::predict(&model, &seg, &times, m, &mut rng)?;

    let doc = PredictionDoc { times, candidates, normalization: *rec };
    write_json(&out.join("predictions.json"), &doc)?;
    if args.render {
        let spec = render_spec(model.k / 2, args.skeleton.as_deref())?;
        let n = render_frames(
            &out.join("render"),
            &doc.times,
            &doc.candidates,
            &doc.normalization,
            &spec,
        )?;
        println!("rendered {n} SVG frames in {}", out.join("render").display());
    }
    println!(
        "wrote {} candidates × {} times for '{}' to {}",
        doc.candidates.len(),
        doc.times.len(),
        traj.id,
        out.join("predictions.json").display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// edit
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct EditDoc {
    attribute: EditAttribute,
    times: Vec<f64>,
    /// λ values actually applied (magnitudes × lambda0).
    magnitudes: Vec<f64>,
    /// One decoded sequence per magnitude: len(magnitudes) × len(times) × K.
    sequences: Vec<Vec<Vec<f64>>>,
    direction: Vec<f64>,
    variance_explained: f64,
    normalization: NormalizationRecord,
}

fn cmd_edit(args: &EditArgs) -> Result<()> {
    let cfg = args.config.load()?;
    let out = out_dir(&cfg, &args.out)?;
    let model = restore_model(&cfg, &args.checkpoint)?;
    let attribute = match args.attribute.as_str() {
        "speed" => EditAttribute::Speed,
        "offset" => EditAttribute::Offset,
        other => {
            return Err(TrajError::Config(format!(
                "unknown attribute '{other}' (expected speed or offset)"
            )))
        }
    };
    let all = load_normalized(&args.input)?;
    let segments: Vec<Segment> =
        all.iter().map(|(t, _)| whole_segment(t)).collect::<Result<_>>()?;
    let refs: Vec<&Segment> = segments.iter().collect();
    let direction = infer::edit_direction(&model, &refs, attribute)?;

    let (target, rec) = pick_record(&all, args.id.as_deref())?;
    let seg = whole_segment(target)?;
    let times = match &args.times {
        Some(s) => parse_floats("--times", s)?,
        None => seg.times.clone(),
    };
    let lambdas: Vec<f64> = parse_floats("--magnitudes", &args.magnitudes)?
        .into_iter()
        .map(|m| m * args.lambda0)
        .collect();
    let sequences = infer::apply_edit(&model, &seg, &direction.direction, &lambdas, &times)?;

    let doc = EditDoc {
        attribute,
        times,
        magnitudes: lambdas,
        sequences,
        direction: direction.direction,
        variance_explained: direction.variance_explained,
        normalization: *rec,
    };
    write_json(&out.join("edit.json"), &doc)?;
    if args.render {
        let spec = render_spec(model.k / 2, args.skeleton.as_deref())?;
        let n = render_frames(
            &out.join("render"),
            &doc.times,
            &doc.sequences,
            &doc.normalization,
            &spec,
        )?;
        println!("rendered {n} SVG frames in {}", out.join("render").display());
    }
    println!(
        "wrote {} edited sequences for '{}' (variance explained {:.3}) to {}",
        doc.sequences.len(),
        target.id,
        doc.variance_explained,
        out.join("edit.json").display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// SVG rendering
// ---------------------------------------------------------------------------

/// How skeleton frames are drawn: which joints connect, canvas size in
/// pixels, and stroke styling.
struct RenderSpec {
    edges: Vec<(usize, usize)>,
    canvas: f64,
    stroke: String,
}

fn render_spec(joints: usize, skeleton: Option<&str>) -> Result<RenderSpec> {
    let edges = match skeleton {
        None => (1..joints).map(|j| (j - 1, j)).collect(),
        Some(s) => {
            let mut edges = Vec::new();
            for part in s.split(',') {
                let (a, b) = part
                    .trim()
                    .split_once('-')
                    .ok_or_else(|| {
                        TrajError::Config(format!("--skeleton: '{part}' is not 'a-b'"))
                    })?;
                let pair: (usize, usize) = (
                    a.parse().map_err(|_| {
                        TrajError::Config(format!("--skeleton: bad joint '{a}'"))
                    })?,
                    b.parse().map_err(|_| {
                        TrajError::Config(format!("--skeleton: bad joint '{b}'"))
                    })?,
                );
                edges.push(pair);
            }
            edges
        }
    };
    for &(a, b) in &edges {
        if a >= joints || b >= joints {
            return Err(TrajError::Config(format!(
                "--skeleton: edge {a}-{b} references a joint ≥ {joints}"
            )));
        }
    }
    Ok(RenderSpec { edges, canvas: 480.0, stroke: "#1f77b4".into() })
}

/// One SVG per frame per candidate, named frame{t}_cand{m}.svg. Coordinates
/// inside the files are the de-normalized predictions; the viewBox spans the
/// bounding box of everything drawn.
fn render_frames(
    dir: &Path,
    times: &[f64],
    candidates: &[Vec<Vec<f64>>],
    norm: &NormalizationRecord,
    spec: &RenderSpec,
) -> Result<usize> {
    fs::create_dir_all(dir)?;
    let denorm: Vec<Vec<Vec<(f64, f64)>>> = candidates
        .iter()
        .map(|cand| {
            cand.iter()
                .map(|row| row.chunks(2).map(|xy| norm.invert(xy[0], xy[1])).collect())
                .collect()
        })
        .collect();

    let (mut min_x, mut min_y) = (f64::INFINITY, f64::INFINITY);
    let (mut max_x, mut max_y) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
    for (x, y) in denorm.iter().flatten().flatten() {
        min_x = min_x.min(*x);
        max_x = max_x.max(*x);
        min_y = min_y.min(*y);
        max_y = max_y.max(*y);
    }
    let extent = (max_x - min_x).max(max_y - min_y).max(1e-9);
    let margin = extent * 0.05;
    let view = format!(
        "{} {} {} {}",
        min_x - margin,
        min_y - margin,
        (max_x - min_x) + 2.0 * margin,
        (max_y - min_y) + 2.0 * margin
    );
    let radius = extent * 0.015;
    let width = extent * 0.008;

    let mut written = 0usize;
    for (mi, cand) in denorm.iter().enumerate() {
        for (ti, joints) in cand.iter().enumerate() {
            let mut svg = String::new();
            svg.push_str(&format!(
                "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{c}\" height=\"{c}\" \
                 viewBox=\"{view}\">\n",
                c = spec.canvas
            ));
            svg.push_str(&format!("  <title>t = {} s, candidate {mi}</title>\n", times[ti]));
            svg.push_str(&format!(
                "  <g stroke=\"{}\" stroke-width=\"{width}\" fill=\"none\">\n",
                spec.stroke
            ));
            for &(a, b) in &spec.edges {
                let (x1, y1) = joints[a];
                let (x2, y2) = joints[b];
                svg.push_str(&format!(
                    "    <line x1=\"{x1}\" y1=\"{y1}\" x2=\"{x2}\" y2=\"{y2}\"/>\n"
                ));
            }
            svg.push_str("  </g>\n");
            svg.push_str(&format!("  <g fill=\"{}\">\n", spec.stroke));
            for &(x, y) in joints {
                svg.push_str(&format!("    <circle cx=\"{x}\" cy=\"{y}\" r=\"{radius}\"/>\n"));
            }
            svg.push_str("  </g>\n</svg>\n");
            fs::write(dir.join(format!("frame{ti:03}_cand{mi:02}.svg")), svg)?;
            written += 1;
        }
    }
    Ok(written)
}
