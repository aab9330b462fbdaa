//! Operator surface: train / eval / bench-latency / drift-inspect plus a
//! synthetic-dataset generator. Exit codes: 0 success, 1 runtime failure,
//! 2 configuration error.

use std::io::Write;
use std::path::PathBuf;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};

use driftdecode::channel::ChannelKind;
use driftdecode::checkpoint;
use driftdecode::config::{DataKind, RunConfig};
use driftdecode::data::{synth::write_synth_idx, load_png, ImageFolder, MnistData, Split};
use driftdecode::driftfield::{drift_field, normalize_rows, to_rows, DriftParams};
use driftdecode::error::Error;
use driftdecode::features::{build_extractor, Extractor};
use driftdecode::metrics::eval_csv_header;
use driftdecode::models::{count_flops, JsccSystem};
use driftdecode::training::{evaluate, fit, Source};

#[derive(Parser)]
#[command(name = "driftdecode", version, about = "Wireless image transmission workbench")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model from a config file.
    Train(TrainArgs),
    /// Evaluate a checkpoint over an SNR grid and write a CSV report.
    Eval(EvalArgs),
    /// Measure decoder latency and report FLOP estimates.
    BenchLatency(BenchArgs),
    /// Export drift-field weights and summaries for an image pair.
    DriftInspect(InspectArgs),
    /// Write a synthetic digit dataset in IDX format.
    SynthData(SynthArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// Config file (key = value lines; see README for the key list).
    #[arg(long)]
    config: PathBuf,
    /// Override single keys, e.g. --set lambda_drift=0.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    /// Output root; defaults to $DRIFTDECODE_RUNS or ./runs.
    #[arg(long)]
    out_root: Option<PathBuf>,
    /// Resume from a checkpoint written by an earlier run.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Master seed override (equivalent to --set seed=...).
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Comma-separated SNR grid in dB.
    #[arg(long, default_value = "0,5,10,15")]
    snrs: String,
    /// Channel kind; defaults to the checkpoint's training channel.
    #[arg(long)]
    channel: Option<String>,
    /// Number of test images.
    #[arg(long, default_value_t = 1000)]
    limit: usize,
    /// Dataset directory (IDX files); defaults to the training data_dir.
    #[arg(long)]
    data_dir: Option<PathBuf>,
    /// Output CSV path.
    #[arg(long, default_value = "eval.csv")]
    out: PathBuf,
    /// Evaluation seed for channel realizations.
    #[arg(long, default_value_t = 777)]
    seed: u64,
    /// Evaluate live weights instead of the EMA shadow.
    #[arg(long)]
    live: bool,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value_t = 100)]
    repeats: usize,
    #[arg(long, default_value_t = 10.0)]
    snr_db: f64,
}

#[derive(Args)]
struct InspectArgs {
    /// First image (reconstruction or any probe image).
    #[arg(long)]
    image_a: Option<PathBuf>,
    /// Second image (ground truth).
    #[arg(long)]
    image_b: Option<PathBuf>,
    /// Checkpoint mode: decode sample --index through the channel instead.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    index: usize,
    #[arg(long, default_value_t = 10.0)]
    snr_db: f64,
    #[arg(long)]
    data_dir: Option<PathBuf>,
    /// Comma-separated temperatures.
    #[arg(long, default_value = "0.05,0.2")]
    temps: String,
    /// Extractor seed when no checkpoint is given.
    #[arg(long, default_value_t = 7)]
    extractor_seed: u64,
    #[arg(long, default_value = "drift-inspect")]
    out_dir: PathBuf,
    /// Refuse to materialize weight matrices above this K.
    #[arg(long, default_value_t = 4096)]
    max_k: usize,
    #[arg(long, default_value_t = 777)]
    seed: u64,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 12000)]
    train: usize,
    #[arg(long, default_value_t = 2000)]
    test: usize,
    #[arg(long, default_value_t = 7)]
    seed: u64,
}

fn main() {
    let cli = Cli::parse();
    let code = match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::UnknownConfigKey(_) | Error::ConfigValue { .. } => 2,
                _ => 1,
            }
        }
    };
    std::process::exit(code);
}

fn run(cli: Cli) -> driftdecode::Result<()> {
    match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::BenchLatency(a) => cmd_bench(a),
        Command::DriftInspect(a) => cmd_inspect(a),
        Command::SynthData(a) => {
            write_synth_idx(&a.out, a.seed, a.train, a.test)?;
            println!("wrote {} train / {} test images to {}", a.train, a.test, a.out.display());
            Ok(())
        }
    }
}

fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

fn open_sources(cfg: &RunConfig) -> driftdecode::Result<(Source, Source)> {
    match cfg.data.dataset {
        DataKind::Synth => {
            let dir = &cfg.data.data_dir;
            if !dir.join(Split::Train.image_file()).exists() {
                eprintln!("synthesizing digit dataset into {}", dir.display());
                write_synth_idx(dir, cfg.train.seed, cfg.data.synth_train, cfg.data.synth_test)?;
            }
            Ok((
                Source::Mnist(MnistData::load(dir, Split::Train)?),
                Source::Mnist(MnistData::load(dir, Split::Test)?),
            ))
        }
        DataKind::Mnist => Ok((
            Source::Mnist(MnistData::load(&cfg.data.data_dir, Split::Train)?),
            Source::Mnist(MnistData::load(&cfg.data.data_dir, Split::Test)?),
        )),
        DataKind::Folder => {
            let train = ImageFolder::open(
                &cfg.data.data_dir.join("train"),
                cfg.data.channels,
                cfg.data.crop,
                cfg.data.hflip,
                cfg.train.seed,
            )?;
            let test = ImageFolder::open(
                &cfg.data.data_dir.join("test"),
                cfg.data.channels,
                cfg.data.crop,
                false,
                cfg.train.seed,
            )?;
            Ok((Source::Folder(train), Source::Folder(test)))
        }
    }
}

fn cmd_train(a: TrainArgs) -> driftdecode::Result<()> {
    let map = driftdecode::config::load_file(&a.config)?;
    let mut cfg = RunConfig::from_map(&map)?;
    for s in &a.sets {
        let Some((k, v)) = s.split_once('=') else {
            return Err(Error::ConfigValue {
                key: s.clone(),
                detail: "--set expects KEY=VALUE".into(),
            });
        };
        cfg.apply(k.trim(), v.trim())?;
    }
    if let Some(seed) = a.seed {
        cfg.train.seed = seed;
    }
    cfg.model.validate()?;
    cfg.train.validate()?;

    let out_root = a
        .out_root
        .or_else(|| std::env::var_os("DRIFTDECODE_RUNS").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("runs"));
    let start = unix_now();
    let run_dir = out_root.join(format!("run-{start}-seed{}", cfg.train.seed));
    std::fs::create_dir_all(&run_dir).map_err(|e| Error::io(&run_dir, e))?;

    // Manifest goes down before training starts and is not touched again.
    let manifest = serde_json::json!({
        "config": cfg,
        "master_seed": cfg.train.seed,
        "code_version": env!("CARGO_PKG_VERSION"),
        "start_unix_secs": start,
        "outputs": {
            "metrics": run_dir.join("metrics.jsonl"),
            "checkpoints": run_dir.join("checkpoints"),
        },
    });
    let manifest_path = run_dir.join("manifest.json");
    std::fs::write(&manifest_path, serde_json::to_string_pretty(&manifest).unwrap())
        .map_err(|e| Error::io(&manifest_path, e))?;

    let (train_src, val_src) = open_sources(&cfg)?;
    let out = fit::<f32>(
        &run_dir,
        &cfg.model,
        &cfg.train,
        &cfg.extractor,
        &train_src,
        &val_src,
        cfg.data.train_limit,
        a.resume.as_deref(),
    )?;
    let completion_path = run_dir.join("completion.json");
    let completion = serde_json::json!({
        "end_unix_secs": unix_now(),
        "final_checkpoint": out.final_checkpoint,
        "steps": out.loss_trace.len(),
    });
    std::fs::write(&completion_path, serde_json::to_string_pretty(&completion).unwrap())
        .map_err(|e| Error::io(&completion_path, e))?;
    println!("run dir: {}", run_dir.display());
    println!("final checkpoint: {}", out.final_checkpoint.display());
    Ok(())
}

fn parse_f64_list(s: &str) -> driftdecode::Result<Vec<f64>> {
    s.split(',')
        .map(|p| {
            p.trim().parse::<f64>().map_err(|_| Error::ConfigValue {
                key: "snrs".into(),
                detail: format!("cannot parse {p:?}"),
            })
        })
        .collect()
}

fn cmd_eval(a: EvalArgs) -> driftdecode::Result<()> {
    let state = checkpoint::load::<f32>(&a.checkpoint)?;
    let snrs = parse_f64_list(&a.snrs)?;
    let channel = match &a.channel {
        Some(c) => ChannelKind::parse(c).ok_or_else(|| Error::ConfigValue {
            key: "channel".into(),
            detail: format!("unknown channel {c:?}"),
        })?,
        None => state.meta.train.channel,
    };
    let system: JsccSystem<f32> = JsccSystem::new(state.meta.model.clone(), state.meta.master_seed)?;
    let params = if a.live {
        state.live
    } else {
        state.live.with_tensors(state.ema.clone())
    };
    let extractor: Extractor<f32> = build_extractor(&state.meta.extractor)?;
    let data_dir = a.data_dir.unwrap_or_else(|| PathBuf::from("data"));
    let src = Source::Mnist(MnistData::load(&data_dir, Split::Test)?);

    let points = evaluate(&system, &params, &extractor, &src, a.limit, &snrs, channel, a.seed)?;
    let mut file = std::fs::File::create(&a.out).map_err(|e| Error::io(&a.out, e))?;
    writeln!(file, "{}", eval_csv_header()).map_err(|e| Error::io(&a.out, e))?;
    for p in &points {
        writeln!(
            file,
            "{:.3},{},{:.6},{:.6},{:.8},{}",
            p.report.snr_db,
            p.channel.as_str(),
            p.report.psnr_db,
            p.report.msssim_db,
            p.report.feat_dist,
            p.report.n_images
        )
        .map_err(|e| Error::io(&a.out, e))?;
        println!(
            "snr {:5.1} dB [{}]: psnr {:.3} dB, ms-ssim {:.3} dB, feat_dist {:.6} (n = {}, outages = {})",
            p.report.snr_db,
            p.channel.as_str(),
            p.report.psnr_db,
            p.report.msssim_db,
            p.report.feat_dist,
            p.report.n_images,
            p.outages
        );
    }
    println!("wrote {}", a.out.display());
    Ok(())
}

fn cmd_bench(a: BenchArgs) -> driftdecode::Result<()> {
    let state = checkpoint::load::<f32>(&a.checkpoint)?;
    let system: JsccSystem<f32> = JsccSystem::new(state.meta.model.clone(), state.meta.master_seed)?;
    let params = state.live.with_tensors(state.ema.clone());
    let m = system.config.m_symbols();
    // Deterministic probe signal with unit power.
    let symbols: Vec<driftdecode::channel::Complex64> = (0..m)
        .map(|i| {
            let phase = i as f64 * 0.7;
            driftdecode::channel::Complex64::new(phase.cos(), phase.sin())
        })
        .collect();
    let eq = driftdecode::channel::EqualizedSignal { symbols, effective_snr_db: a.snr_db };
    // warmup
    system.decode_signal_with(&params, &eq)?;
    let calls_before = system.decoder.forward_count();
    let mut times = Vec::with_capacity(a.repeats);
    for _ in 0..a.repeats {
        let t0 = Instant::now();
        let out = system.decode_signal_with(&params, &eq)?;
        times.push(t0.elapsed().as_secs_f64() * 1e3);
        std::hint::black_box(out);
    }
    let forwards = system.decoder.forward_count() - calls_before;
    times.sort_by(f64::total_cmp);
    let median = times[times.len() / 2];
    let p90 = times[(times.len() * 9 / 10).min(times.len() - 1)];
    let flops = count_flops(&system.config)?;
    println!("decoder latency over {} repeats ({}x{} image, M = {m}):", a.repeats, system.config.image_h, system.config.image_w);
    println!("  median: {median:.2} ms");
    println!("  p90:    {p90:.2} ms");
    println!("  steps per decode: {}", forwards as f64 / a.repeats as f64);
    println!("  encoder GFLOPs: {:.3}", flops.encoder_gflops);
    println!("  decoder GFLOPs: {:.3}", flops.decoder_gflops);
    assert_eq!(forwards as usize, a.repeats, "decode must be exactly one forward pass");
    Ok(())
}

fn cmd_inspect(a: InspectArgs) -> driftdecode::Result<()> {
    let temps = parse_f64_list(&a.temps)?;
    std::fs::create_dir_all(&a.out_dir).map_err(|e| Error::io(&a.out_dir, e))?;

    // Build the image pair (a = probe/reconstruction, b = ground truth).
    let (img_a, img_b, extractor): (_, _, Extractor<f32>) = if let Some(ck) = &a.checkpoint {
        let state = checkpoint::load::<f32>(ck)?;
        let system: JsccSystem<f32> = JsccSystem::new(state.meta.model.clone(), state.meta.master_seed)?;
        let params = state.live.with_tensors(state.ema.clone());
        let data_dir = a.data_dir.clone().unwrap_or_else(|| PathBuf::from("data"));
        let src = MnistData::load(&data_dir, Split::Test)?;
        if a.index >= src.len() {
            return Err(Error::invalid("drift-inspect", format!("index {} out of range (n = {})", a.index, src.len())));
        }
        let gt = src.get(a.index).cast::<f32>();
        // one transmission at the requested SNR
        let sys_ref = &system;
        let z = sys_ref.encode_image(&gt)?;
        let mut rng = driftdecode::rng::stream(a.seed, driftdecode::rng::Domain::Eval, a.index as u64, 0);
        let ch = driftdecode::channel::ChannelRealization::sample(state.meta.train.channel, a.snr_db, 1.0, &mut rng);
        let y = driftdecode::channel::transmit(&z, &ch, &mut rng);
        let eq = driftdecode::channel::equalize_zf(&y, &ch)?;
        let recon = sys_ref.decode_signal_with(&params, &eq)?;
        (recon, gt, build_extractor(&state.meta.extractor)?)
    } else {
        let (Some(pa), Some(pb)) = (&a.image_a, &a.image_b) else {
            return Err(Error::invalid(
                "drift-inspect",
                "provide either --checkpoint or both --image-a and --image-b",
            ));
        };
        let ia = load_png(pa, 1)?.cast::<f32>();
        let ib = load_png(pb, 1)?.cast::<f32>();
        let spec = driftdecode::features::ExtractorSpec::fixed_random(a.extractor_seed);
        (ia, ib, build_extractor(&spec)?)
    };
    if img_a.shape() != img_b.shape() {
        return Err(Error::shape(
            "drift-inspect",
            format!("{:?} vs {:?}", img_a.shape(), img_b.shape()),
        ));
    }

    let pyr_a = extractor.extract(&img_a)?;
    let pyr_b = extractor.extract(&img_b)?;
    let params = DriftParams::<f32> {
        temps: temps.iter().map(|&t| t as f32).collect(),
        ..DriftParams::default()
    };
    let weights_path = a.out_dir.join("weights.csv");
    let drift_path = a.out_dir.join("drift.csv");
    let summary_path = a.out_dir.join("summary.csv");
    let mut wf = std::fs::File::create(&weights_path).map_err(|e| Error::io(&weights_path, e))?;
    let mut df = std::fs::File::create(&drift_path).map_err(|e| Error::io(&drift_path, e))?;
    let mut sf = std::fs::File::create(&summary_path).map_err(|e| Error::io(&summary_path, e))?;
    writeln!(wf, "layer,tau,k,j,weight").map_err(|e| Error::io(&weights_path, e))?;
    writeln!(df, "layer,k,drift_norm").map_err(|e| Error::io(&drift_path, e))?;
    writeln!(sf, "layer,tau,diag_mass,drift_rms").map_err(|e| Error::io(&summary_path, e))?;
    for (la, lb) in pyr_a.levels.iter().zip(&pyr_b.levels) {
        let k = la.k;
        if k > a.max_k {
            return Err(Error::invalid(
                "drift-inspect",
                format!("layer {} has K = {k} > --max-k {}; the weights file would hold K^2 rows", la.name, a.max_k),
            ));
        }
        let fh = normalize_rows(&to_rows(&la.features), params.eps_norm)?;
        let gh = normalize_rows(&to_rows(&lb.features), params.eps_norm)?;
        let field = drift_field(&fh, &gh, &params)?;
        for tf in &field.temps {
            let mut diag = 0.0f64;
            for q in 0..k {
                for j in 0..k {
                    writeln!(wf, "{},{},{q},{j},{:.8}", la.name, tf.tau, tf.weights.data()[q * k + j])
                        .map_err(|e| Error::io(&weights_path, e))?;
                }
                diag += tf.weights.data()[q * k + q] as f64;
            }
            let rms = (tf.drift.sq_sum_f64() / k as f64).sqrt();
            writeln!(sf, "{},{},{:.8},{:.8}", la.name, tf.tau, diag / k as f64, rms)
                .map_err(|e| Error::io(&summary_path, e))?;
        }
        let c = fh.c();
        for q in 0..k {
            let row = &field.aggregated.data()[q * c..(q + 1) * c];
            let norm = row.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt();
            writeln!(df, "{},{q},{:.8}", la.name, norm).map_err(|e| Error::io(&drift_path, e))?;
        }
    }
    println!("wrote {}, {}, {}", weights_path.display(), drift_path.display(), summary_path.display());
    Ok(())
}
