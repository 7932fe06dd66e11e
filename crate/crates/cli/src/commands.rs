use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use cilda_core::augment::{mask_tokens, sample_adversarial_ids};
use cilda_core::data::{build_vocab, gen_synthetic, load_tsv, write_tsv, Dataset, Schema, Split, SyntheticTaskSpec, Vocab, PAD};
use cilda_core::evalkit::{
    evaluate, evaluate_ood, logit_divergence, write_divergence_csv, write_report_csv, MetricReport, ReportRow,
};
use cilda_core::rng::{stream, Stream};
use cilda_core::training::{init_generator, init_student, train_cilda, train_teacher, warmup_generator_mlm, Checkpoint, TrainState};
use serde::{Deserialize, Serialize};

use crate::config::{sha256_hex, Overrides, RunConfig};
use crate::CliError;

/// Provenance attached to every checkpoint the CLI writes.
#[derive(Clone, Debug, Serialize, Deserialize)]
struct RunInfo {
    method: String,
    task: String,
    seed: u64,
    config_sha256: String,
    schema: Schema,
    vocab: Vocab,
}

const RUN_INFO: &str = "run_info";

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

fn write_err(path: &Path) -> impl Fn(std::io::Error) -> CliError + '_ {
    move |e| CliError::Runtime(format!("cannot write {}: {e}", path.display()))
}

fn create_dir(path: &Path) -> Result<(), CliError> {
    fs::create_dir_all(path).map_err(write_err(path))
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), CliError> {
    fs::write(path, contents).map_err(write_err(path))
}

fn read_tsv(path: &Path, schema: Schema, split: Split) -> Result<Dataset, CliError> {
    if !path.is_file() {
        return Err(CliError::Input(format!("data file {} does not exist", path.display())));
    }
    Ok(load_tsv(path, schema, split)?)
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint, CliError> {
    if !path.is_file() {
        return Err(CliError::Input(format!("checkpoint {} does not exist", path.display())));
    }
    Checkpoint::load(path).map_err(|e| match CliError::from(e) {
        CliError::Runtime(m) | CliError::Input(m) => CliError::Input(format!("{}: {m}", path.display())),
    })
}

fn save_checkpoint(mut ck: Checkpoint, info: &RunInfo, path: &Path) -> Result<(), CliError> {
    ck.manifest.counters.insert(RUN_INFO.into(), serde_json::to_value(info)?);
    ck.save(path).map_err(|e| CliError::Runtime(format!("cannot write {}: {e}", path.display())))
}

fn run_info(ck: &Checkpoint, path: &Path) -> Result<RunInfo, CliError> {
    let value = ck
        .manifest
        .counters
        .get(RUN_INFO)
        .ok_or_else(|| CliError::Input(format!("{} was not written by this tool (no run info)", path.display())))?;
    serde_json::from_value(value.clone()).map_err(|e| CliError::Input(format!("{}: bad run info: {e}", path.display())))
}

struct TaskData {
    vocab: Vocab,
    train: Dataset,
    dev: Dataset,
    ood: Option<Dataset>,
}

fn corpus(d: &Dataset) -> Vec<String> {
    d.examples
        .iter()
        .map(|e| match &e.text_b {
            Some(b) => format!("{} {}", e.text_a.join(" "), b.join(" ")),
            None => e.text_a.join(" "),
        })
        .collect()
}

fn load_data(run: &RunConfig) -> Result<TaskData, CliError> {
    let schema = run.data.schema;
    let ood = run.data.ood.as_deref().map(|p| read_tsv(p, schema, Split::Ood)).transpose()?;
    if let Some(spec) = &run.data.synthetic {
        let task = gen_synthetic(spec)?;
        return Ok(TaskData { vocab: task.vocab, train: task.train, dev: task.dev, ood: ood.or(Some(task.ood)) });
    }
    let path = |p: &Option<PathBuf>| p.clone().expect("validated");
    let train = read_tsv(&path(&run.data.train), schema, Split::Train)?;
    let dev = read_tsv(&path(&run.data.dev), schema, Split::Dev)?;
    let vocab = build_vocab(corpus(&train).iter().map(String::as_str))?;
    Ok(TaskData { vocab, train, dev, ood })
}

pub fn train(config: &Path, overrides: &Overrides) -> Result<(), CliError> {
    let loaded = RunConfig::load(config, overrides)?;
    let run = loaded.run;
    run.validate_for_training()?;
    let mode = run.mode();
    if !mode.uses_generator() && loaded.has_generator_section {
        log::warn!("mode {mode} does not use a generator; ignoring the [generator] settings");
    }
    let out = run.out_dir.clone().expect("validated");
    create_dir(&out)?;
    let echo = run.echo()?;
    write_file(&out.join("config.toml"), &echo)?;

    let data = load_data(&run)?;
    let info = RunInfo {
        method: mode.to_string(),
        task: run.data.task.clone(),
        seed: run.seed,
        config_sha256: sha256_hex(echo.as_bytes()),
        schema: run.data.schema,
        vocab: data.vocab.clone(),
    };
    let (v, classes) = (data.vocab.len(), data.train.num_classes);
    let encode = |d: &Dataset| d.encode(&data.vocab, run.data.max_len);
    let train_set = encode(&data.train)?;
    let dev_set = encode(&data.dev)?;
    let student_train = match run.data.student_subsample {
        Some(n) => encode(&data.train.subsample(n, run.seed))?,
        None => train_set.clone(),
    };

    let teacher = match &run.teacher.checkpoint {
        Some(path) => {
            let ck = load_checkpoint(path)?;
            if run_info(&ck, path)?.vocab != data.vocab {
                return Err(CliError::Input(format!("{}: teacher vocabulary differs from the data's", path.display())));
            }
            let model = ck.primary_model()?;
            if model.config.num_classes() != Some(classes) {
                return Err(CliError::Input(format!("{}: teacher label space differs from the data's", path.display())));
            }
            model
        }
        None => {
            let result = train_teacher(&run.teacher.training, run.teacher_model(v, classes), &train_set, &dev_set)?;
            log::info!("teacher best dev accuracy {:.4}", result.best_dev);
            save_checkpoint(result.checkpoint(serde_json::to_value(&run)?)?, &info, &out.join("teacher.ckpt"))?;
            result.model
        }
    };

    let generator = if mode.uses_generator() {
        let mut g = init_generator(run.generator_model(v), run.seed)?;
        warmup_generator_mlm(&mut g, &run.generator.warmup, &train_set)?;
        Some(g)
    } else {
        None
    };
    let student = init_student(run.student_model(v, classes), run.seed)?;
    let mut state = TrainState::new(run.train.clone(), teacher, student, generator)?;
    let metrics_path = out.join("metrics.jsonl");
    let mut metrics = BufWriter::new(fs::File::create(&metrics_path).map_err(write_err(&metrics_path))?);
    train_cilda(&mut state, &student_train, &dev_set, Some(&mut metrics))?;
    metrics.flush().map_err(write_err(&metrics_path))?;
    save_checkpoint(state.student_checkpoint()?, &info, &out.join("student.ckpt"))?;
    save_checkpoint(state.to_checkpoint()?, &info, &out.join("train_state.ckpt"))?;

    let best = &state.best_student;
    let dev = evaluate(best, &dev_set)?;
    let ood = data.ood.as_ref().map(|d| evaluate_ood(best, &encode(d)?)).transpose()?;
    let divergence = logit_divergence(&state.teacher, best, &dev_set, run.train.weights.tau1)?.mean;
    let report = serde_json::json!({
        "method": info.method,
        "task": info.task,
        "seed": info.seed,
        "config_sha256": info.config_sha256,
        "epochs": state.history.len(),
        "dev": dev,
        "ood": ood,
        "logit_divergence": divergence,
    });
    write_file(&out.join("report.json"), serde_json::to_string_pretty(&report)? + "\n")?;
    let mut rows = ReportRow::from_report(&info.method, &info.task, run.seed, &dev);
    if let Some(ood) = &ood {
        rows.extend(ReportRow::from_report(&info.method, &format!("{}-ood", info.task), run.seed, ood));
    }
    rows.push(ReportRow {
        method: info.method.clone(),
        task: info.task.clone(),
        metric: "logit_divergence".into(),
        value: divergence,
        seed: run.seed,
    });
    let csv_path = out.join("report.csv");
    write_report_csv(fs::File::create(&csv_path).map_err(write_err(&csv_path))?, &rows)?;
    println!(
        "{mode} seed {}: dev accuracy {:.4}{}, divergence {divergence:.4}; outputs in {}",
        run.seed,
        dev.accuracy,
        ood.map(|o| format!(", ood accuracy {:.4}", o.accuracy)).unwrap_or_default(),
        out.display()
    );
    Ok(())
}

#[derive(Serialize)]
struct EvalReport<'a> {
    checkpoint: String,
    kind: &'a str,
    split: &'a str,
    method: &'a str,
    task: &'a str,
    seed: u64,
    config_sha256: &'a str,
    metrics: MetricReport,
}

pub fn eval(checkpoint: &Path, data: &Path, ood: bool) -> Result<(), CliError> {
    let ck = load_checkpoint(checkpoint)?;
    let info = run_info(&ck, checkpoint)?;
    let model = ck.primary_model()?;
    let split = if ood { Split::Ood } else { Split::Dev };
    let set = read_tsv(data, info.schema, split)?.encode(&info.vocab, model.config.max_len)?;
    let metrics = if ood { evaluate_ood(&model, &set)? } else { evaluate(&model, &set)? };
    let report = EvalReport {
        checkpoint: checkpoint.display().to_string(),
        kind: &ck.manifest.kind,
        split: if ood { "ood" } else { "dev" },
        method: &info.method,
        task: &info.task,
        seed: info.seed,
        config_sha256: &info.config_sha256,
        metrics,
    };
    println!("{}", serde_json::to_string(&report)?);
    Ok(())
}

pub fn diagnose(teacher: &Path, student: &Path, data: &Path, out: &Path, tau: Option<f64>) -> Result<(), CliError> {
    let (tck, sck) = (load_checkpoint(teacher)?, load_checkpoint(student)?);
    let (tinfo, sinfo) = (run_info(&tck, teacher)?, run_info(&sck, student)?);
    if tinfo.vocab != sinfo.vocab {
        return Err(CliError::Input("teacher and student vocabularies differ".into()));
    }
    let tau = tau
        .or_else(|| sck.manifest.config.pointer("/weights/tau1").and_then(|v| v.as_f64()))
        .unwrap_or(1.0);
    if !(tau > 0.0) {
        return Err(CliError::Input("--tau must be positive".into()));
    }
    let (t, s) = (tck.primary_model()?, sck.primary_model()?);
    let set = read_tsv(data, tinfo.schema, Split::Dev)?.encode(&tinfo.vocab, t.config.max_len.min(s.config.max_len))?;
    let div = logit_divergence(&t, &s, &set, tau)?;
    create_dir(out)?;
    let path = out.join("divergence.csv");
    write_divergence_csv(&path, &div)?;
    println!("mean KL(teacher || student) at tau {tau}: {:.6} over {} examples -> {}", div.mean, div.per_example.len(), path.display());
    Ok(())
}

pub fn gen_data(spec_path: &Path, out: &Path, seed: Option<u64>) -> Result<(), CliError> {
    let text = fs::read_to_string(spec_path)
        .map_err(|e| CliError::Input(format!("cannot read {}: {e}", spec_path.display())))?;
    let mut spec: SyntheticTaskSpec =
        toml::from_str(&text).map_err(|e| CliError::Input(format!("{}: {e}", spec_path.display())))?;
    if let Some(seed) = seed {
        spec.seed = seed;
    }
    let task = gen_synthetic(&spec)?;
    create_dir(out)?;
    for (name, split) in [("train", &task.train), ("dev", &task.dev), ("test", &task.test), ("ood", &task.ood)] {
        let path = out.join(format!("{name}.tsv"));
        write_tsv(split, Schema::Single, &path).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?;
    }
    println!(
        "wrote {} train, {} dev, {} test, {} ood examples to {}",
        task.train.len(),
        task.dev.len(),
        task.test.len(),
        task.ood.len(),
        out.display()
    );
    Ok(())
}

fn row_text(ids: &[usize], vocab: &Vocab) -> String {
    ids.iter()
        .filter(|&&i| i != PAD)
        .map(|&i| vocab.token(i).unwrap_or("[UNK]"))
        .collect::<Vec<_>>()
        .join(" ")
}

pub fn augment(config: &Path, overrides: &Overrides, checkpoint: &Path, data: Option<&Path>) -> Result<(), CliError> {
    let run = RunConfig::load(config, overrides)?.run;
    run.mask().validate()?;
    let out = run
        .out_dir
        .clone()
        .ok_or_else(|| CliError::Input("invalid config field `out_dir`: missing (set it or pass --out)".into()))?;
    let ck = load_checkpoint(checkpoint)?;
    let info = run_info(&ck, checkpoint)?;
    let generator = ck.model("generator")?;
    let dataset = match (data, &run.data.train, &run.data.synthetic) {
        (Some(p), _, _) => read_tsv(p, info.schema, Split::Train)?,
        (None, Some(p), _) => read_tsv(p, info.schema, Split::Train)?,
        (None, None, Some(spec)) => gen_synthetic(spec)?.train,
        (None, None, None) => return Err(CliError::Input("invalid config field `data.train`: missing".into())),
    };
    let set = dataset.encode(&info.vocab, generator.config.max_len)?;
    let mut masking = stream(run.seed, Stream::Masking);
    let mut gumbel = stream(run.seed, Stream::Gumbel);
    create_dir(&out)?;
    let path = out.join("augment.tsv");
    let mut w = BufWriter::new(fs::File::create(&path).map_err(write_err(&path))?);
    let mut lines = String::from("original\tmasked\taugmented\n");
    for batch in set.sequential_batches(run.train.batch_size) {
        let masked = mask_tokens(&batch, run.mask(), &mut masking);
        let aug = sample_adversarial_ids(&generator, &masked, run.train.weights.gumbel_tau, &mut gumbel)?;
        for r in 0..batch.rows {
            lines.push_str(&format!(
                "{}\t{}\t{}\n",
                row_text(batch.row(r), &info.vocab),
                row_text(masked.masked.row(r), &info.vocab),
                row_text(aug.row(r), &info.vocab)
            ));
        }
    }
    w.write_all(lines.as_bytes()).and_then(|_| w.flush()).map_err(write_err(&path))?;
    println!("wrote {} rows to {}", set.len(), path.display());
    Ok(())
}
