//! `diarize`: the pipeline driver.
//!
//! Subcommands mirror the processing stages: `synth` makes a labeled
//! corpus, `normalize` levels WAV files, `prepare` segments and caches
//! spectrogram features, `train` fits a model, `evaluate` reports per-file
//! accuracy, `predict` labels a new file, and `plot` renders a
//! truth-vs-prediction strip. Exit codes: 0 success, 1 usage error,
//! 2 data error.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use diarize_core::audio::{measure_dbfs, normalize_to_dbfs, read_wav, write_wav, Loudness};
use diarize_core::features::{cache_read, cache_write, StftParams};
use diarize_core::labels::{clean_intervals, intervals_to_labels, parse_label_csv, LabelScheme, LabelVector, Tier};
use diarize_core::nn::{load_checkpoint, save_checkpoint, ModelSpec};
use diarize_core::segment::segment_channel;
use diarize_core::train::{
    average_accuracy, majority_baseline, predict_segments, split_files, train, DatasetItem,
    Hyperparams, SplitPlan,
};

use diarize_cli::config::{EvalSplit, ModelChoice, Settings};
use diarize_cli::corpus::{synth_corpus, CorpusSpec};
use diarize_cli::pipeline::{
    assemble_split, build_cache, model_spec, prepare_file, raw_items, scan_corpus, spectro_items,
    PreparedFile,
};
use diarize_cli::plot::render_comparison;
use diarize_cli::CliError;

const USAGE: &str = "\
usage: diarize <command> [flags] [paths]

commands:
  synth                       generate a labeled synthetic corpus into --out
  normalize <wav|dir>...      rescale channels to --target-dbfs, write to --out
  prepare <corpus_dir>        segment, label, and cache spectrogram features
  train <corpus_dir>          split by --seed, train --model, save checkpoint
  evaluate <corpus_dir> <ckpt>  print per-file accuracy on the eval split
  predict <wav> <ckpt>        write per-segment class files into --out
  plot <csv> <pred>           render truth-vs-prediction SVG into --out

flags:
  --config PATH    key=value settings file (flags win over the file)
  --seed INT       corpus, split, and training seed            [0]
  --segment-sec F  segment duration in seconds                 [0.1]
  --downsample N   keep the first of every N samples           [4]
  --target-dbfs F  normalization target                        [-20]
  --model M        slp | mlp | rnn | cnn                       [slp]
  --classes N      2 (per-channel) or 4 (joint)                [2]
  --epochs N       training epochs                             [10]
  --batch N        mini-batch size                             [128]
  --out DIR        output directory                            [out]
  --from N, --to N plot window in segment indices (plot only)
";

struct Invocation {
    command: String,
    settings: Settings,
    positional: Vec<PathBuf>,
    from: Option<usize>,
    to: Option<usize>,
}

fn parse_args(args: &[String]) -> Result<Invocation, CliError> {
    let mut command = None;
    let mut positional = Vec::new();
    let mut overrides: Vec<(&'static str, String)> = Vec::new();
    let mut config_path: Option<PathBuf> = None;
    let mut from = None;
    let mut to = None;

    let mut it = args.iter();
    while let Some(arg) = it.next() {
        if let Some(flag) = arg.strip_prefix("--") {
            let mut value_of = |name: &str| -> Result<String, CliError> {
                it.next()
                    .cloned()
                    .ok_or_else(|| CliError::Usage(format!("--{name} needs a value")))
            };
            match flag {
                "config" => config_path = Some(PathBuf::from(value_of("config")?)),
                "seed" => overrides.push(("seed", value_of("seed")?)),
                "segment-sec" => overrides.push(("segment_sec", value_of("segment-sec")?)),
                "downsample" => overrides.push(("downsample", value_of("downsample")?)),
                "target-dbfs" => overrides.push(("target_dbfs", value_of("target-dbfs")?)),
                "model" => overrides.push(("model", value_of("model")?)),
                "classes" => overrides.push(("classes", value_of("classes")?)),
                "epochs" => overrides.push(("epochs", value_of("epochs")?)),
                "batch" => overrides.push(("batch", value_of("batch")?)),
                "out" => overrides.push(("out", value_of("out")?)),
                "from" => {
                    from = Some(value_of("from")?.parse().map_err(|_| {
                        CliError::Usage("--from expects a segment index".into())
                    })?)
                }
                "to" => {
                    to = Some(value_of("to")?.parse().map_err(|_| {
                        CliError::Usage("--to expects a segment index".into())
                    })?)
                }
                other => return Err(CliError::Usage(format!("unknown flag --{other}"))),
            }
        } else if command.is_none() {
            command = Some(arg.clone());
        } else {
            positional.push(PathBuf::from(arg));
        }
    }

    let command = command.ok_or_else(|| CliError::Usage("missing command".into()))?;
    let mut settings = Settings::default();
    if let Some(path) = config_path {
        settings.load_file(&path)?;
    }
    for (key, value) in overrides {
        settings.set(key, &value)?;
    }
    Ok(Invocation {
        command,
        settings,
        positional,
        from,
        to,
    })
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let args: Vec<String> = std::env::args().skip(1).collect();
    if args.iter().any(|a| a == "--help" || a == "help") {
        print!("{USAGE}");
        return ExitCode::SUCCESS;
    }
    let inv = match parse_args(&args) {
        Ok(inv) => inv,
        Err(CliError::Usage(msg)) => {
            if !msg.is_empty() {
                eprintln!("error: {msg}");
            }
            eprint!("{USAGE}");
            return ExitCode::from(1);
        }
        Err(CliError::Data(msg)) => {
            eprintln!("error: {msg}");
            return ExitCode::from(2);
        }
    };
    match run(&inv) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(msg)) => {
            if !msg.is_empty() {
                eprintln!("error: {msg}");
            }
            eprint!("{USAGE}");
            ExitCode::from(1)
        }
        Err(CliError::Data(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}

fn run(inv: &Invocation) -> Result<(), CliError> {
    match inv.command.as_str() {
        "synth" => cmd_synth(&inv.settings),
        "normalize" => cmd_normalize(&inv.settings, &inv.positional),
        "prepare" => cmd_prepare(&inv.settings, one_path(&inv.positional, "corpus directory")?),
        "train" => cmd_train(&inv.settings, one_path(&inv.positional, "corpus directory")?),
        "evaluate" => {
            let (corpus, ckpt) = two_paths(&inv.positional, "corpus directory and checkpoint")?;
            cmd_evaluate(&inv.settings, corpus, ckpt)
        }
        "predict" => {
            let (wav, ckpt) = two_paths(&inv.positional, "wav file and checkpoint")?;
            cmd_predict(&inv.settings, wav, ckpt)
        }
        "plot" => {
            let (csv, pred) = two_paths(&inv.positional, "label csv and prediction file")?;
            cmd_plot(&inv.settings, csv, pred, inv.from, inv.to)
        }
        other => Err(CliError::Usage(format!("unknown command {other:?}"))),
    }
}

fn one_path<'a>(paths: &'a [PathBuf], what: &str) -> Result<&'a Path, CliError> {
    match paths {
        [p] => Ok(p),
        _ => Err(CliError::Usage(format!("expected exactly one {what}"))),
    }
}

fn two_paths<'a>(paths: &'a [PathBuf], what: &str) -> Result<(&'a Path, &'a Path), CliError> {
    match paths {
        [a, b] => Ok((a, b)),
        _ => Err(CliError::Usage(format!("expected {what}"))),
    }
}

fn ensure_out(settings: &Settings) -> Result<(), CliError> {
    std::fs::create_dir_all(&settings.out)
        .map_err(|e| CliError::Data(format!("cannot create {}: {e}", settings.out.display())))
}

fn cmd_synth(settings: &Settings) -> Result<(), CliError> {
    ensure_out(settings)?;
    let spec = CorpusSpec {
        n_files: settings.n_files,
        duration: settings.duration,
        speech_fraction: settings.speech_fraction,
        noise_dbfs: settings.noise_dbfs,
        sample_rate: 44100,
        seed: settings.seed,
    };
    let pairs = synth_corpus(&spec, &settings.out)?;
    for (wav, csv) in &pairs {
        println!("{}\t{}", wav.display(), csv.display());
    }
    println!(
        "synthesized {} files of {:.0} s into {}",
        pairs.len(),
        settings.duration,
        settings.out.display()
    );
    Ok(())
}

fn wav_inputs(paths: &[PathBuf]) -> Result<Vec<PathBuf>, CliError> {
    let mut wavs = Vec::new();
    for p in paths {
        if p.is_dir() {
            let mut in_dir: Vec<PathBuf> = std::fs::read_dir(p)
                .map_err(|e| CliError::Data(format!("cannot read {}: {e}", p.display())))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.extension().is_some_and(|x| x == "wav"))
                .collect();
            in_dir.sort();
            wavs.extend(in_dir);
        } else {
            wavs.push(p.clone());
        }
    }
    if wavs.is_empty() {
        return Err(CliError::Usage("normalize needs wav files or directories".into()));
    }
    Ok(wavs)
}

fn cmd_normalize(settings: &Settings, paths: &[PathBuf]) -> Result<(), CliError> {
    ensure_out(settings)?;
    let target = Loudness {
        dbfs: settings.target_dbfs,
    };
    for wav in wav_inputs(paths)? {
        let clip = read_wav(&wav)?;
        let before: Vec<String> = clip
            .channels
            .iter()
            .map(|ch| {
                measure_dbfs(ch)
                    .map(|l| format!("{:.2}", l.dbfs))
                    .unwrap_or_else(|_| "silent".into())
            })
            .collect();
        let normalized = normalize_to_dbfs(&clip, target)?;
        let name = wav
            .file_name()
            .ok_or_else(|| CliError::Usage(format!("{} is not a file", wav.display())))?;
        let out_path = settings.out.join(name);
        write_wav(&normalized, &out_path)?;
        println!(
            "{} [{}] -> {} dBFS -> {}",
            wav.display(),
            before.join(", "),
            settings.target_dbfs,
            out_path.display()
        );
        // Matching label files travel along so the output dir is a corpus.
        let csv = wav.with_extension("csv");
        if csv.is_file() {
            std::fs::copy(&csv, settings.out.join(csv.file_name().expect("file name")))
                .map_err(|e| CliError::Data(format!("cannot copy {}: {e}", csv.display())))?;
        }
    }
    Ok(())
}

fn cmd_prepare(settings: &Settings, corpus: &Path) -> Result<(), CliError> {
    ensure_out(settings)?;
    let files = scan_corpus(corpus)?;
    let mut prepared = Vec::with_capacity(files.len());
    for file in &files {
        let p = prepare_file(file, settings)?;
        for ch in &p.channels {
            let speech: usize = ch.labels.classes.iter().map(|&c| c as usize).sum();
            println!(
                "{}\t{} segments x {} samples\t{} speech",
                ch.source_id,
                ch.segments.n_segments(),
                ch.segments.samples_per_segment(),
                speech
            );
        }
        prepared.push(p);
    }
    let params = StftParams::default();
    let cache = build_cache(&prepared, &params)?;
    let cache_path = settings.out.join("features.dkfc");
    cache_write(&cache, &cache_path)?;
    println!(
        "cached {} spectrogram entries to {}",
        cache.len(),
        cache_path.display()
    );
    Ok(())
}

fn scheme_of(settings: &Settings) -> LabelScheme {
    if settings.classes == 2 {
        LabelScheme::Binary
    } else {
        LabelScheme::FourClass
    }
}

fn load_split_items(
    settings: &Settings,
    corpus: &Path,
    plan: &SplitPlan,
) -> Result<diarize_core::train::SplitData, CliError> {
    let files = scan_corpus(corpus)?;
    let scheme = scheme_of(settings);
    let cache = if settings.model == ModelChoice::Cnn {
        let path = settings.out.join("features.dkfc");
        let fallback = corpus.join("features.dkfc");
        let found = if path.is_file() {
            Some(path)
        } else if fallback.is_file() {
            Some(fallback)
        } else {
            None
        };
        match found {
            Some(p) => Some(cache_read(&p)?),
            None => {
                return Err(CliError::Data(format!(
                    "no features.dkfc next to {} or in {}; run `diarize prepare` first",
                    corpus.display(),
                    settings.out.display()
                )))
            }
        }
    } else {
        None
    };
    let params = cache
        .as_ref()
        .map(|c| c.params)
        .unwrap_or_default();
    let mut by_stem = BTreeMap::new();
    for file in &files {
        let prepared = prepare_file(file, settings)?;
        let items = match settings.model {
            ModelChoice::Cnn => spectro_items(
                &prepared,
                scheme,
                cache.as_ref(),
                &params,
                settings.log_power,
            )?,
            _ => raw_items(&prepared, scheme)?,
        };
        by_stem.insert(file.stem.clone(), items);
    }
    Ok(assemble_split(plan, by_stem))
}

fn cmd_train(settings: &Settings, corpus: &Path) -> Result<(), CliError> {
    ensure_out(settings)?;
    let files = scan_corpus(corpus)?;
    let stems: Vec<String> = files.iter().map(|f| f.stem.clone()).collect();
    let plan = split_files(&stems, settings.seed)?;
    println!(
        "split {} files -> train {:?} / validation {:?} / test {:?}",
        stems.len(),
        plan.train,
        plan.validation,
        plan.test
    );
    let data = load_split_items(settings, corpus, &plan)?;
    let sample = data
        .train
        .first()
        .ok_or_else(|| CliError::Data("training split is empty".into()))?;
    let spec: ModelSpec = model_spec(settings, sample)?;
    let hp = Hyperparams {
        batch_size: settings.batch,
        epochs: settings.epochs,
        learning_rate: settings.learning_rate,
        dropout: settings.dropout,
        eval_every: settings.eval_every,
        seed: settings.seed,
    };
    let (params, report) = train(&spec, &data, &hp)?;

    for (i, (loss, acc)) in report
        .epoch_train_loss
        .iter()
        .zip(&report.epoch_train_accuracy)
        .enumerate()
    {
        println!("epoch {i}: train loss {loss:.4}, train accuracy {acc:.4}");
    }
    if let Some((batch, acc)) = report.validation_trace.last() {
        println!("validation accuracy after batch {batch}: {acc:.4}");
    }
    for (id, acc) in &report.test_per_file {
        println!("test {id}: {acc:.4}");
    }
    println!(
        "mean test accuracy {:.4} (majority baseline {:.4}) in {:.1} s",
        report.mean_test_accuracy, report.mean_test_baseline, report.wall_seconds
    );

    let ckpt = settings.out.join(format!("{}.dknn", settings.model.as_str()));
    save_checkpoint(&spec, &params, &ckpt)?;
    report.write_log(&settings.out.join("train.log"))?;
    report.write_summary(&settings.out.join("summary.txt"))?;
    println!("checkpoint: {}", ckpt.display());
    Ok(())
}

fn cmd_evaluate(settings: &Settings, corpus: &Path, ckpt: &Path) -> Result<(), CliError> {
    let (spec, params) = load_checkpoint(ckpt)?;
    let files = scan_corpus(corpus)?;
    let stems: Vec<String> = files.iter().map(|f| f.stem.clone()).collect();
    let plan = split_files(&stems, settings.seed)?;
    let eval_stems: Vec<String> = match settings.eval_split {
        EvalSplit::Train => plan.train.clone(),
        EvalSplit::Validation => plan.validation.clone(),
        EvalSplit::Test => plan.test.clone(),
        EvalSplit::All => stems.clone(),
    };
    if eval_stems.is_empty() {
        return Err(CliError::Data(
            "the selected split has no files (try eval_split=all)".into(),
        ));
    }

    // Settings must describe the checkpoint's model so items match.
    let mut settings = settings.clone();
    settings.model = match spec.kind() {
        diarize_core::nn::ModelKind::Slp => ModelChoice::Slp,
        diarize_core::nn::ModelKind::Mlp => ModelChoice::Mlp,
        diarize_core::nn::ModelKind::Rnn => ModelChoice::Rnn,
        diarize_core::nn::ModelKind::Cnn => ModelChoice::Cnn,
    };
    settings.classes = if spec.n_outputs == 1 { 2 } else { 4 };

    let scheme = scheme_of(&settings);
    let cache_path = [settings.out.join("features.dkfc"), corpus.join("features.dkfc")]
        .into_iter()
        .find(|p| p.is_file());
    let cache = cache_path.map(|p| cache_read(&p)).transpose()?;
    let params_stft = cache.as_ref().map(|c| c.params).unwrap_or_default();

    let mut accs = Vec::new();
    for stem in &eval_stems {
        let file = files
            .iter()
            .find(|f| &f.stem == stem)
            .expect("stem from scan");
        let prepared = prepare_file(file, &settings)?;
        let items = match settings.model {
            ModelChoice::Cnn => spectro_items(
                &prepared,
                scheme,
                cache.as_ref(),
                &params_stft,
                settings.log_power,
            )?,
            _ => raw_items(&prepared, scheme)?,
        };
        for item in items {
            let pred = predict_segments(&spec, &params, &item.features, settings.segment_sec)?;
            let acc = diarize_core::train::file_accuracy(&pred, &item.labels)?;
            println!("{}\t{:.4}", item.id, acc);
            accs.push(acc);
        }
    }
    println!("MEAN\t{:.4}", average_accuracy(&accs)?);
    Ok(())
}

fn load_wav_items(settings: &Settings, wav: &Path, spec: &ModelSpec) -> Result<Vec<DatasetItem>, CliError> {
    // Labels are unknown here; build items with all-zero labels but real
    // features, reusing the corpus plumbing.
    let clip = read_wav(wav)?;
    let stem = wav
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let mut channels = Vec::new();
    for (idx, samples) in clip.channels.iter().enumerate() {
        let matrix = segment_channel(samples, f64::from(clip.sample_rate), settings.segment_sec)?
            .downsample_rows(settings.downsample)?;
        let labels = LabelVector {
            classes: vec![0; matrix.n_segments()],
            scheme: LabelScheme::Binary,
            segment_duration: settings.segment_sec,
        };
        let id = format!("{stem}:ch{}", idx + 1);
        channels.push(diarize_core::segment::align(&matrix, &labels, &id)?);
    }
    let prepared = PreparedFile { stem, channels };
    let scheme = if spec.n_outputs == 1 {
        LabelScheme::Binary
    } else {
        LabelScheme::FourClass
    };
    match spec.kind() {
        diarize_core::nn::ModelKind::Cnn => Ok(spectro_items(
            &prepared,
            scheme,
            None,
            &StftParams::default(),
            settings.log_power,
        )?),
        _ => Ok(raw_items(&prepared, scheme)?),
    }
}

fn cmd_predict(settings: &Settings, wav: &Path, ckpt: &Path) -> Result<(), CliError> {
    ensure_out(settings)?;
    let (spec, params) = load_checkpoint(ckpt)?;
    for item in load_wav_items(settings, wav, &spec)? {
        let pred = predict_segments(&spec, &params, &item.features, settings.segment_sec)?;
        let name = format!("{}.pred.txt", item.id.replace(':', "."));
        let path = settings.out.join(name);
        let mut text = String::with_capacity(pred.len() * 2);
        for c in &pred.classes {
            text.push_str(&format!("{c}\n"));
        }
        std::fs::write(&path, text)
            .map_err(|e| CliError::Data(format!("cannot write {}: {e}", path.display())))?;
        let ones = pred.classes.iter().filter(|&&c| c == 1).count();
        println!(
            "{} -> {} ({} segments, {} speech)",
            item.id,
            path.display(),
            pred.len(),
            ones
        );
    }
    Ok(())
}

fn read_predictions(path: &Path, segment_sec: f64) -> Result<LabelVector, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Data(format!("cannot read {}: {e}", path.display())))?;
    let classes = text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            l.trim()
                .parse::<u8>()
                .map_err(|_| CliError::Data(format!("bad class {l:?} in {}", path.display())))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let scheme = if classes.iter().any(|&c| c > 1) {
        LabelScheme::FourClass
    } else {
        LabelScheme::Binary
    };
    Ok(LabelVector {
        classes,
        scheme,
        segment_duration: segment_sec,
    })
}

fn cmd_plot(
    settings: &Settings,
    csv: &Path,
    pred_path: &Path,
    from: Option<usize>,
    to: Option<usize>,
) -> Result<(), CliError> {
    ensure_out(settings)?;
    let pred = read_predictions(pred_path, settings.segment_sec)?;
    let text = std::fs::read_to_string(csv)
        .map_err(|e| CliError::Data(format!("cannot read {}: {e}", csv.display())))?;
    let table = clean_intervals(&parse_label_csv(&text)?)?.table;
    let tier = if settings.plot_channel == 1 {
        Tier::Ch1
    } else {
        Tier::Ch2
    };
    let truth = intervals_to_labels(&table, tier, pred.len(), settings.segment_sec)?;
    let window = match (from, to) {
        (None, None) => None,
        (f, t) => Some((f.unwrap_or(0), t.unwrap_or(pred.len()))),
    };
    let out = settings.out.join("comparison.svg");
    render_comparison(&truth, &pred, &out, window)?;
    let acc = diarize_core::train::file_accuracy(&pred, &truth)?;
    println!(
        "{} vs {} ({} segments, accuracy {:.4}, baseline {:.4}) -> {}",
        pred_path.display(),
        csv.display(),
        pred.len(),
        acc,
        majority_baseline(&truth)?,
        out.display()
    );
    Ok(())
}
