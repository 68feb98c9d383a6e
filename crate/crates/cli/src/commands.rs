use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use multimode_asr::data::{
    gen_dataset, load_dataset, save_dataset, split_seed, Dataset, SPLIT_TEST, SPLIT_TRAIN, SPLIT_VALID,
};
use multimode_asr::eval::{context_sweep, ReportMeta, TrainTag};
use multimode_asr::masking::{latency_ms, sample_schedule, ContextSchedule, SamplerSpec};
use multimode_asr::model::ModelConfig;
use multimode_asr::params::{load_checkpoint, save_checkpoint};
use multimode_asr::train::LogRecord;
use multimode_asr::Error;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::{split_list, RunConfig};
use crate::{Classify, CmdResult, Failure, FrameArgs, RunArgs};

const SPLITS: [(&str, u64); 3] = [("train", SPLIT_TRAIN), ("valid", SPLIT_VALID), ("test", SPLIT_TEST)];

fn dataset_file(dir: &Path, split: &str) -> PathBuf {
    dir.join(format!("{split}.mmds"))
}

fn load_config(path: Option<&Path>, seed: Option<u64>, frame: Option<&FrameArgs>) -> anyhow::Result<RunConfig> {
    let mut cfg = RunConfig::load(path)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(f) = frame {
        if let Some(v) = f.frame_ms {
            cfg.frame.frame_ms = v;
        }
        if f.downsample.is_some() {
            cfg.frame.downsample = f.downsample;
        }
        if let Some(v) = f.frontend_frames {
            cfg.frame.frontend_frames = v;
        }
    }
    Ok(cfg)
}

/// Creates the output directory and dumps the merged config next to the outputs.
fn prepare_out(run: &RunArgs, cfg: &RunConfig, command: &str) -> CmdResult<String> {
    let hash = cfg.hash();
    fs::create_dir_all(&run.out)
        .with_context(|| format!("creating {}", run.out.display()))
        .runtime()?;
    let dump = format!("# config_hash = \"{hash}\"\n{}", cfg.to_toml());
    write_file(&run.out.join(format!("{command}.toml")), dump.as_bytes())?;
    Ok(hash)
}

fn write_file(path: &Path, bytes: &[u8]) -> CmdResult {
    fs::write(path, bytes)
        .with_context(|| format!("writing {}", path.display()))
        .runtime()
}

/// Sidecar carrying provenance for a binary artifact whose format has no room for it.
fn write_meta(artifact: &Path, hash: &str, seed: u64, extra: &str) -> CmdResult {
    let mut name = artifact.as_os_str().to_owned();
    name.push(".meta");
    let text = format!("config_hash = \"{hash}\"\nseed = {seed}\n{extra}");
    write_file(Path::new(&name), text.as_bytes())
}

fn require(path: &Path, what: &str) -> CmdResult {
    if path.is_file() {
        Ok(())
    } else {
        Err(Failure::Usage(anyhow!("{what} `{}` does not exist", path.display())))
    }
}

/// Library errors that stem from bad input rather than from the run itself.
fn classify(e: Error) -> Failure {
    match e {
        Error::Spec { .. } | Error::Contract(_) => Failure::Usage(e.into()),
        _ => Failure::Runtime(e.into()),
    }
}

pub fn gen_data(run: &RunArgs) -> CmdResult {
    let mut cfg = load_config(run.config.as_deref(), run.seed, None).usage()?;
    cfg.finish().usage()?;
    let hash = prepare_out(run, &cfg, "gen-data")?;
    let counts = [cfg.data.train, cfg.data.valid, cfg.data.test];
    for ((name, split), count) in SPLITS.into_iter().zip(counts) {
        let utterances = gen_dataset(&cfg.task, count, split_seed(cfg.seed, split), name).map_err(classify)?;
        let path = dataset_file(&run.out, name);
        let ds = Dataset {
            spec: cfg.task,
            utterances,
        };
        save_dataset(&path, &ds)
            .with_context(|| format!("writing {}", path.display()))
            .runtime()?;
        write_meta(&path, &hash, cfg.seed, "")?;
        println!("{}: {count} utterances", path.display());
    }
    Ok(())
}

#[derive(Serialize)]
struct LogHeader<'a> {
    config_hash: &'a str,
    seed: u64,
    sampler: String,
}

fn check_fit(model: &ModelConfig, ds: &Dataset, path: &Path) -> CmdResult {
    if ds.spec.feat_dim != model.feat_dim || ds.spec.vocab != model.vocab {
        return Err(Failure::Usage(anyhow!(
            "{} has feat_dim {} and vocab {}, the model expects {} and {}",
            path.display(),
            ds.spec.feat_dim,
            ds.spec.vocab,
            model.feat_dim,
            model.vocab
        )));
    }
    Ok(())
}

pub fn train(run: &RunArgs, sampler: Option<&str>) -> CmdResult {
    let mut cfg = load_config(run.config.as_deref(), run.seed, None).usage()?;
    if let Some(text) = sampler {
        cfg.train.sampler = text.parse::<SamplerSpec>().usage()?;
    }
    cfg.finish().usage()?;
    let data_dir = cfg.paths.dataset.clone().unwrap_or_else(|| run.out.clone());
    let (train_path, valid_path) = (dataset_file(&data_dir, "train"), dataset_file(&data_dir, "valid"));
    require(&train_path, "training split")?;
    require(&valid_path, "validation split")?;

    let hash = prepare_out(run, &cfg, "train")?;
    let train_set = load_dataset(&train_path).runtime()?;
    let valid_set = load_dataset(&valid_path).runtime()?;
    check_fit(&cfg.model, &train_set, &train_path)?;
    check_fit(&cfg.model, &valid_set, &valid_path)?;

    let log_path = run.out.join("train.log");
    let mut log = std::io::LineWriter::new(
        fs::File::create(&log_path)
            .with_context(|| format!("creating {}", log_path.display()))
            .runtime()?,
    );
    let header = LogHeader {
        config_hash: &hash,
        seed: cfg.seed,
        sampler: cfg.train.sampler.to_string(),
    };
    writeln!(log, "{}", serde_json::to_string(&header).expect("header serializes")).runtime()?;

    let mut io_error: Option<std::io::Error> = None;
    let result = multimode_asr::train::train(
        &cfg.model,
        &cfg.train,
        &train_set.utterances,
        &valid_set.utterances,
        |rec: &LogRecord| {
            if io_error.is_none() {
                let line = serde_json::to_string(rec).expect("log record serializes");
                if let Err(e) = writeln!(log, "{line}") {
                    io_error = Some(e);
                }
            }
        },
    );
    log.flush().runtime()?;
    if let Some(e) = io_error {
        return Err(e)
            .with_context(|| format!("writing {}", log_path.display()))
            .runtime();
    }
    let outcome = result.map_err(classify)?;

    let averaged = outcome.averaged().runtime()?;
    let ckpt = run.out.join("final.ckpt");
    save_checkpoint(&ckpt, &cfg.model.header(), &averaged)
        .with_context(|| format!("writing {}", ckpt.display()))
        .runtime()?;
    let steps: Vec<String> = outcome.best.iter().map(|c| c.step.to_string()).collect();
    let losses: Vec<String> = outcome.best.iter().map(|c| c.val_loss.to_string()).collect();
    let extra = format!(
        "averaged_steps = [{}]\nval_losses = [{}]\n",
        steps.join(", "),
        losses.join(", ")
    );
    write_meta(&ckpt, &hash, cfg.seed, &extra)?;
    println!("{}: average of steps {}", ckpt.display(), steps.join(", "));
    Ok(())
}

pub fn sweep(run: &RunArgs, schedules: Option<&str>) -> CmdResult {
    let mut cfg = load_config(run.config.as_deref(), run.seed, None).usage()?;
    if let Some(text) = schedules {
        cfg.sweep.schedules = split_list(text).usage()?;
    }
    cfg.finish().usage()?;
    let ckpt = cfg
        .paths
        .checkpoint
        .clone()
        .unwrap_or_else(|| run.out.join("final.ckpt"));
    let data_dir = cfg.paths.dataset.clone().unwrap_or_else(|| run.out.clone());
    let test_path = dataset_file(&data_dir, "test");
    require(&ckpt, "checkpoint")?;
    require(&test_path, "test split")?;

    let header_len = ModelConfig::default().header().len();
    let (header, params) = load_checkpoint(&ckpt, header_len)
        .with_context(|| format!("reading {}", ckpt.display()))
        .runtime()?;
    let model = ModelConfig::from_header(&header).runtime()?;
    let schedules = cfg.schedules(model.audio_layers).usage()?;

    let hash = prepare_out(run, &cfg, "sweep")?;
    let test_set = load_dataset(&test_path).runtime()?;
    check_fit(&model, &test_set, &test_path)?;
    let tag = TrainTag {
        sampler: cfg.train.sampler,
        full_branch: cfg.train.weights.uses_full_branch(),
    };
    let mut report = context_sweep(
        &params,
        &model,
        &test_set.utterances,
        &schedules,
        &tag,
        cfg.sweep.max_symbols,
    )
    .map_err(classify)?;
    report.metadata = ReportMeta {
        seed: cfg.seed,
        config_hash: hash,
    };
    let table = report.render_table();
    write_file(
        &run.out.join("report.txt"),
        format!("{}\n{table}", report.render_records()).as_bytes(),
    )?;
    write_file(&run.out.join("report.csv"), report.render_csv().as_bytes())?;
    print!("{table}");
    Ok(())
}

fn schedule_text(s: &ContextSchedule) -> String {
    match s.per_layer() {
        Some(cs) => format!("[{}]", cs.iter().map(usize::to_string).collect::<Vec<_>>().join(",")),
        None => "full".into(),
    }
}

pub fn sample_masks(
    config: Option<&Path>,
    seed: Option<u64>,
    sampler: Option<&str>,
    layers: Option<usize>,
    count: usize,
    frame: &FrameArgs,
) -> CmdResult {
    let cfg = load_config(config, seed, Some(frame)).usage()?;
    let spec = match sampler {
        Some(text) => text.parse::<SamplerSpec>().usage()?,
        None => cfg.train.sampler,
    };
    spec.validate().usage()?;
    let layers = layers.unwrap_or(cfg.model.audio_layers);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let stdout = std::io::stdout();
    let mut out = std::io::BufWriter::new(stdout.lock());
    for _ in 0..count {
        let s = sample_schedule(spec, layers, &mut rng);
        let total = s.total().map_or("inf".to_string(), |c| c.to_string());
        let lat = latency_ms(&s, cfg.frame.frame_ms, cfg.downsample(), cfg.frame.frontend_frames);
        writeln!(out, "{} C={total} latency_ms={lat}", schedule_text(&s)).runtime()?;
    }
    out.flush().runtime()
}

pub fn latency(schedule: &str, config: Option<&Path>, layers: Option<usize>, frame: &FrameArgs) -> CmdResult {
    let cfg = load_config(config, None, Some(frame)).usage()?;
    let layers = layers.unwrap_or(cfg.model.audio_layers);
    let s = ContextSchedule::parse(schedule, layers).usage()?;
    println!(
        "{}",
        latency_ms(&s, cfg.frame.frame_ms, cfg.downsample(), cfg.frame.frontend_frames)
    );
    Ok(())
}
