//! `lfm` command line: data generation, the three training stages, rollout,
//! evaluation, spectra, and the diffusion-path ablation sweep.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};

use crate::container::write_file;
use crate::error::{invalid, Error, Result};
use crate::forecast::{
    check_codec, train_ar_baseline, train_autoencoder, train_flow, write_loss_csv, Bundle, ExperimentConfig, LatentModel, RolloutMode,
    TrainedCodec,
};
use crate::pdelab::{generate, DataConfig, Dataset, Problem, Split, Trajectory};
use crate::schedules::{PathConfig, PathKind};

use super::{emit_report, evaluate_forecasts, frame_image, nrmse_frames, spectra_csv, windowed_spectrum, EvalReport, MetricRow};

#[derive(Parser, Debug)]
#[command(name = "lfm", version, about = "Latent flow-matching surrogate for time-dependent PDEs")]
struct Cli {
    /// Worker threads for data generation (also read from LFM_THREADS).
    #[arg(long, global = true, env = "LFM_THREADS")]
    threads: Option<usize>,
    /// Omit wall-clock timings from written files so reruns are byte-identical.
    #[arg(long, global = true)]
    deterministic: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// JSON experiment config; missing fields take the problem defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset written by gen-data.
    #[arg(long)]
    data: PathBuf,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a toy PDE dataset.
    GenData {
        #[arg(long)]
        problem: String,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train the mesh autoencoder.
    TrainAe {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
        /// Loss curve CSV.
        #[arg(long)]
        log: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train the flow-matching denoiser on latents of a frozen codec.
    TrainFm {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        codec: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        log: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train the deterministic latent next-step baseline.
    TrainAr {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        codec: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        log: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Autoregressive latent rollout of one test trajectory.
    Rollout {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        codec: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        horizon: Option<usize>,
        #[arg(long)]
        ens: Option<usize>,
        /// flow-euler, ddim, ancestral or ar.
        #[arg(long)]
        mode: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
        /// Index within the test split.
        #[arg(long, default_value_t = 0)]
        traj: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// NRMSE, spectra and images for trained models on the test split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        codec: PathBuf,
        #[arg(long)]
        fm: Option<PathBuf>,
        #[arg(long)]
        ar: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Windowed energy spectrum of a dataset trajectory.
    Spectrum {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long, default_value_t = 0)]
        traj: usize,
        #[arg(long)]
        center: usize,
        #[arg(long, default_value_t = 0)]
        half_width: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Diffusion-path sweep: flow K in {5, 10}, exponential sigma_min in
    /// {1e-1, 1e-2, 1e-3, 1e-6}, and dense training with 50 sampling steps.
    AblateSchedules {
        #[command(flatten)]
        common: Common,
        /// Reuse a trained codec instead of training one.
        #[arg(long)]
        codec: Option<PathBuf>,
        /// Override flow-matching training steps for every variant.
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Parse `argv` and run; returns the process exit code.
pub fn cli_main<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    if let Some(n) = cli.threads {
        // a pool may already exist when called repeatedly in one process
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    match run(cli.command, cli.deterministic) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

/// Config from `--config`, or the defaults for the dataset's problem.
fn load(common: &Common) -> Result<(ExperimentConfig, Dataset)> {
    let ds = Dataset::read(&common.data)?;
    let cfg = match &common.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => {
            let mut c = ExperimentConfig::for_problem(ds.problem.unwrap_or(Problem::Heat2d));
            c.resolve();
            c
        }
    };
    if let Some(p) = ds.problem {
        if p != cfg.data.problem {
            return invalid(format!("dataset holds {p:?} but the config describes {:?}", cfg.data.problem));
        }
    }
    Ok((cfg, ds))
}

fn parse_split(s: &str) -> Result<Split> {
    match s {
        "train" => Ok(Split::Train),
        "valid" => Ok(Split::Valid),
        "test" => Ok(Split::Test),
        _ => invalid(format!("unknown split {s:?}")),
    }
}

fn test_split(ds: &Dataset) -> Result<Vec<&Trajectory>> {
    let t = ds.split(Split::Test);
    if t.is_empty() {
        return invalid("dataset has no test trajectories");
    }
    Ok(t)
}

fn refuse(what: &str, e: Error) -> Error {
    match e {
        Error::Digest { expected, found } => Error::InvalidArgument(format!(
            "refusing to use {what}: it was produced under a different configuration or codec (expected digest {expected}, found {found}); retrain or pass the matching files"
        )),
        other => other,
    }
}

fn sampler_mode(cfg: &ExperimentConfig, requested: RolloutMode) -> RolloutMode {
    if requested == RolloutMode::FlowEuler && cfg.path.kind != PathKind::FlowLinear {
        RolloutMode::Ddim
    } else {
        requested
    }
}

fn run(cmd: Command, deterministic: bool) -> Result<()> {
    match cmd {
        Command::GenData { problem, config, out, seed } => {
            let problem: Problem = problem.parse()?;
            let overrides = match config {
                Some(p) => {
                    let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(p)?)?;
                    v.get("data").cloned().unwrap_or(v)
                }
                None => serde_json::json!({}),
            };
            let mut cfg = DataConfig::with_overrides(problem, &overrides)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            generate(&cfg)?.write(&out)
        }
        Command::TrainAe { common, out, log, seed } => {
            let (mut cfg, ds) = load(&common)?;
            if let Some(s) = seed {
                cfg.ae.seed = s;
            }
            let res = train_autoencoder(&cfg, &ds)?;
            if let Some(l) = log {
                write_loss_csv(&l, &res.losses)?;
            }
            write_file(&out, &res.model.to_bytes()?)
        }
        Command::TrainFm { common, codec, out, log, seed } => train_latent_cmd(common, &codec, &out, log, seed, true),
        Command::TrainAr { common, codec, out, log, seed } => train_latent_cmd(common, &codec, &out, log, seed, false),
        Command::Rollout { common, codec, model, horizon, ens, mode, seed, traj, out } => {
            let (cfg, ds) = load(&common)?;
            let bundle = Bundle::load(&codec)?;
            let model = bundle.latent(&std::fs::read(&model)?, &cfg).map_err(|e| refuse("the model checkpoint", e))?;
            let mode = match mode {
                Some(m) => m.parse()?,
                None if model.meta.denoiser.diffusion => sampler_mode(&cfg, cfg.rollout.mode),
                None => RolloutMode::Ar,
            };
            let horizon = horizon.unwrap_or(cfg.rollout.horizon);
            let tests = test_split(&ds)?;
            let t = *tests.get(traj).ok_or_else(|| Error::InvalidArgument(format!("test split has {} trajectories", tests.len())))?;
            let ev = evaluate_forecasts(
                &bundle.codec,
                &model,
                &[t],
                cfg.rollout.start,
                horizon,
                ens.unwrap_or(cfg.rollout.ensemble),
                mode,
                seed.unwrap_or(cfg.rollout.seed),
            )?;
            write_rollout(&out, &ds, &ev.results[0], &ev.references[0], &ev.predictions[0])
        }
        Command::Eval { common, codec, fm, ar, seed, out } => {
            let (cfg, ds) = load(&common)?;
            let bundle = Bundle::load(&codec)?;
            check_codec(&cfg, &bundle.codec).map_err(|e| refuse("the codec checkpoint", e))?;
            let mut models: Vec<(String, LatentModel, RolloutMode)> = Vec::new();
            if let Some(p) = fm {
                let m = bundle.latent(&std::fs::read(p)?, &cfg).map_err(|e| refuse("the flow checkpoint", e))?;
                models.push(("fm".into(), m, sampler_mode(&cfg, cfg.rollout.mode)));
            }
            if let Some(p) = ar {
                let m = bundle.latent(&std::fs::read(p)?, &cfg).map_err(|e| refuse("the baseline checkpoint", e))?;
                models.push(("ar".into(), m, RolloutMode::Ar));
            }
            if models.is_empty() {
                return invalid("eval needs --fm and/or --ar");
            }
            let report = evaluate(&cfg, &ds, &bundle, &models, seed.unwrap_or(cfg.rollout.seed), deterministic)?;
            emit_report(&report, &out)
        }
        Command::Spectrum { data, split, traj, center, half_width, out } => {
            let ds = Dataset::read(&data)?;
            let trajs = ds.split(parse_split(&split)?);
            let t = *trajs.get(traj).ok_or_else(|| Error::InvalidArgument(format!("{split} split has {} trajectories", trajs.len())))?;
            let mut report = EvalReport::default();
            for v in 0..t.channels {
                report.add_spectrum("reference", v, center, half_width, &windowed_spectrum(t, center, half_width, v)?);
            }
            std::fs::create_dir_all(&out)?;
            write_file(&out.join("spectra.csv"), spectra_csv(&report.spectra).as_bytes())
        }
        Command::AblateSchedules { common, codec, steps, seed, out } => {
            let (mut cfg, ds) = load(&common)?;
            if let Some(s) = seed {
                cfg.fm.seed = s;
                cfg.rollout.seed = s;
            }
            if let Some(n) = steps {
                cfg.fm.steps = n;
            }
            let codec_bytes = match codec {
                Some(p) => std::fs::read(p)?,
                None => train_autoencoder(&cfg, &ds)?.model.to_bytes()?,
            };
            let bundle = Bundle::from_bytes(codec_bytes)?;
            let rows = ablate(&cfg, &ds, &bundle.codec)?;
            let mut csv = String::from("variant,seed,horizon,nrmse\n");
            for (name, v) in &rows {
                let _ = writeln!(csv, "{name},{},{},{v:.8e}", cfg.fm.seed, cfg.rollout.horizon);
            }
            std::fs::create_dir_all(&out)?;
            write_file(&out.join("ablation.csv"), csv.as_bytes())
        }
    }
}

fn train_latent_cmd(common: Common, codec: &Path, out: &Path, log: Option<PathBuf>, seed: Option<u64>, flow: bool) -> Result<()> {
    let (mut cfg, ds) = load(&common)?;
    let stage = if flow { &mut cfg.fm } else { &mut cfg.ar };
    if let Some(s) = seed {
        stage.seed = s;
    }
    let bundle = Bundle::load(codec)?;
    check_codec(&cfg, &bundle.codec).map_err(|e| refuse("the codec checkpoint", e))?;
    let res = if flow { train_flow(&cfg, &ds, &bundle.codec)? } else { train_ar_baseline(&cfg, &ds, &bundle.codec)? };
    if let Some(l) = log {
        write_loss_csv(&l, &res.losses)?;
    }
    write_file(out, &res.model.to_bytes()?)
}

/// The diffusion-path variants of the ablation table.
pub fn ablation_variants() -> Vec<(String, PathConfig)> {
    let mut v = vec![("fm-k5".to_string(), PathConfig::flow(5)), ("fm-k10".to_string(), PathConfig::flow(10))];
    for s in [1e-1, 1e-2, 1e-3, 1e-6] {
        v.push((format!("exp-{s:e}"), PathConfig::exponential(s, 10)));
    }
    v.push(("fm-dense-s50".to_string(), PathConfig { sample_steps: Some(50), ..PathConfig::flow(1000) }));
    v
}

/// Train one flow model per variant on the shared codec and report test NRMSE
/// over the configured rollout horizon.
pub fn ablate(cfg: &ExperimentConfig, ds: &Dataset, codec: &TrainedCodec) -> Result<Vec<(String, f64)>> {
    let tests = test_split(ds)?;
    let mut rows = Vec::new();
    for (name, path) in ablation_variants() {
        let mut c = cfg.clone();
        c.path = path;
        c.resolve();
        let model = train_flow(&c, ds, codec)?.model;
        let mode = sampler_mode(&c, RolloutMode::FlowEuler);
        let ev = evaluate_forecasts(codec, &model, &tests, c.rollout.start, c.rollout.horizon, 1, mode, c.rollout.seed)?;
        rows.push((name, ev.nrmse(c.rollout.horizon, 0, None)?));
    }
    Ok(rows)
}

fn evaluate(
    cfg: &ExperimentConfig,
    ds: &Dataset,
    bundle: &Bundle,
    models: &[(String, LatentModel, RolloutMode)],
    seed: u64,
    deterministic: bool,
) -> Result<EvalReport> {
    let tests = test_split(ds)?;
    let horizon = cfg.eval.horizons.iter().copied().max().unwrap_or(cfg.rollout.horizon);
    let mut report = EvalReport { config_digest: crate::container::json_digest(cfg)?, ..Default::default() };
    let mut runtime = Vec::new();
    let (center, hw) = (cfg.eval.spectrum_center.min(horizon.saturating_sub(1)), cfg.eval.spectrum_half_width);
    let mut reference_done = false;
    for (name, model, mode) in models {
        let clock = Instant::now();
        let ensemble = if *mode == RolloutMode::Ar { 1 } else { cfg.rollout.ensemble };
        let ev = evaluate_forecasts(&bundle.codec, model, &tests, cfg.rollout.start, horizon, ensemble, *mode, seed)?;
        runtime.push((name.clone(), clock.elapsed().as_secs_f64()));
        let channels = ev.references[0].channels;
        for v in 0..channels {
            for &h in &cfg.eval.horizons {
                report.metrics.push(MetricRow { model: name.clone(), variable: v, horizon: h, value: ev.nrmse(h, v, None)? });
            }
            if center >= hw && center + hw < horizon {
                if !reference_done {
                    report.add_spectrum("reference", v, center, hw, &windowed_spectrum(&ev.references[0], center, hw, v)?);
                }
                report.add_spectrum(name, v, center, hw, &windowed_spectrum(&ev.predictions[0], center, hw, v)?);
            }
            let last = horizon - 1;
            let (r, p) = (&ev.references[0], &ev.predictions[0]);
            if !reference_done {
                report.images.push(frame_image(&format!("reference_v{v}_t{horizon}"), r.frame(last), &r.extents, r.channels, v));
            }
            report.images.push(frame_image(&format!("{name}_v{v}_t{horizon}"), p.frame(last), &p.extents, p.channels, v));
        }
        reference_done = true;
    }
    if !deterministic {
        report.runtime = Some(runtime);
    }
    Ok(report)
}

fn write_rollout(out: &Path, ds: &Dataset, res: &crate::forecast::RolloutResult, reference: &Trajectory, mean: &Trajectory) -> Result<()> {
    std::fs::create_dir_all(out)?;
    let f = res.frame_len;
    let mut csv = String::from("member,step,rms,nrmse,truncated\n");
    for (e, m) in res.members.iter().enumerate() {
        for s in 0..m.steps {
            let frame = &m.frames[s * f..(s + 1) * f];
            let rms = (frame.iter().map(|v| v * v).sum::<f64>() / f as f64).sqrt();
            let err = nrmse_frames(frame, reference.frame(s), reference.channels, 0).map_or(f64::NAN, |v| v);
            let _ = writeln!(csv, "{e},{s},{rms:.8e},{err:.8e},{}", m.truncated);
        }
    }
    write_file(&out.join("rollout.csv"), csv.as_bytes())?;
    let mut trajs = vec![mean.clone()];
    for m in &res.members {
        trajs.push(Trajectory { frames: m.frames.clone(), ..reference.clone() });
    }
    let splits = vec![Split::Test; trajs.len()];
    let mut bundle = Dataset::new(ds.problem, trajs, splits)?;
    bundle.norm = ds.norm.clone();
    bundle.write(&out.join("rollout.lfmd"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn help_and_unknown_subcommand_exit_codes() {
        assert_eq!(cli_main(["lfm", "--help"]), 0);
        assert_eq!(cli_main(["lfm", "frobnicate"]), 2);
        assert_eq!(cli_main(["lfm", "gen-data", "--bogus"]), 2);
    }

    #[test]
    fn variants_cover_the_sweep() {
        let names: Vec<String> = ablation_variants().into_iter().map(|(n, _)| n).collect();
        assert_eq!(names, ["fm-k5", "fm-k10", "exp-1e-1", "exp-1e-2", "exp-1e-3", "exp-1e-6", "fm-dense-s50"]);
    }

}
