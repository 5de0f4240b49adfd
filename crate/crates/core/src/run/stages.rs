use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::{json, Value};

use super::manifest::{sha256_file, sha256_hex, Manifest, MANIFEST_FILE};
use super::RunConfig;
use crate::error::{Error, Result};
use crate::masking::{build_masked_split, read_masked, write_masked, MaskedChunk};
use crate::model::checkpoint::push_params;
use crate::model::{
    load_encoder, perplexity, pretrain, Checkpoint, CheckpointHeader, ClassifierHead, EpochRecord, ParameterSet,
    TrainState,
};
use crate::pipeline::{
    assemble_monthly, cluster_points, filter_trajectories, ingest_path, read_corpus, split_corpus, synth_generate,
    write_checkins_jsonl, write_corpus, UserGroups,
};
use crate::seed::derive_seed;
use crate::subhash::{train_vocab, TokenSequence, Vocabulary};
use crate::tasks::{
    balanced_split, build_dp, build_nsp, build_tua, compare_inits, evaluate_f1, fine_tune, predict, read_jsonl,
    write_jsonl, ClassExample, CompareReport, DestClasses, DestExample, PairExample, Task, FINETUNE_METRICS_HEADER,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Stage {
    Synth,
    Ingest,
    BuildCorpus,
    TrainTokenizer,
    BuildPretrainData,
    Pretrain,
    /// Task datasets; built on demand by `finetune` and `compare`.
    TaskData,
    Finetune,
    Compare,
    Eval,
}

impl Stage {
    pub const ALL: [Stage; 10] = [
        Stage::Synth,
        Stage::Ingest,
        Stage::BuildCorpus,
        Stage::TrainTokenizer,
        Stage::BuildPretrainData,
        Stage::Pretrain,
        Stage::TaskData,
        Stage::Finetune,
        Stage::Compare,
        Stage::Eval,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Synth => "synth",
            Stage::Ingest => "ingest",
            Stage::BuildCorpus => "build-corpus",
            Stage::TrainTokenizer => "train-tokenizer",
            Stage::BuildPretrainData => "build-pretrain-data",
            Stage::Pretrain => "pretrain",
            Stage::TaskData => "task-data",
            Stage::Finetune => "finetune",
            Stage::Compare => "compare",
            Stage::Eval => "eval",
        }
    }

    /// Directory under the run directory holding this stage's artifacts.
    pub fn dir(self) -> &'static str {
        match self {
            Stage::TaskData => "tasks",
            Stage::BuildPretrainData => "pretrain-data",
            Stage::BuildCorpus => "corpus",
            Stage::TrainTokenizer => "tokenizer",
            s => s.name(),
        }
    }

    fn seed_index(self) -> u64 {
        // compare shares splits, heads and batch order with finetune
        let s = if self == Stage::Compare { Stage::Finetune } else { self };
        Stage::ALL.iter().position(|&x| x == s).expect("listed") as u64 + 1
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown stage {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Outcome {
    Ran,
    UpToDate,
}

/// Executes stages of one run directory against one configuration.
pub struct Runner {
    cfg: RunConfig,
    out: PathBuf,
}

impl Runner {
    pub fn new(cfg: RunConfig, out: impl Into<PathBuf>) -> Result<Self> {
        cfg.validate()?;
        Ok(Self { cfg, out: out.into() })
    }

    pub fn config(&self) -> &RunConfig {
        &self.cfg
    }

    pub fn out_dir(&self) -> &Path {
        &self.out
    }

    pub fn stage_dir(&self, stage: Stage) -> PathBuf {
        self.out.join(stage.dir())
    }

    pub fn upstream(&self, stage: Stage) -> Vec<Stage> {
        use Stage::*;
        match stage {
            Synth => vec![],
            Ingest if self.cfg.input.is_some() => vec![],
            Ingest => vec![Synth],
            BuildCorpus => vec![Ingest],
            TrainTokenizer => vec![BuildCorpus],
            BuildPretrainData => vec![BuildCorpus, TrainTokenizer],
            Pretrain => vec![TrainTokenizer, BuildPretrainData],
            TaskData => vec![BuildCorpus, TrainTokenizer],
            Finetune | Compare => vec![Pretrain, TaskData],
            Eval => vec![BuildPretrainData, Pretrain, Finetune],
        }
    }

    /// Stages needed to produce `target`, in execution order.
    pub fn plan(&self, target: Stage) -> Vec<Stage> {
        fn visit(r: &Runner, s: Stage, seen: &mut BTreeSet<Stage>, out: &mut Vec<Stage>) {
            if !seen.insert(s) {
                return;
            }
            for u in r.upstream(s) {
                visit(r, u, seen, out);
            }
            out.push(s);
        }
        let mut out = Vec::new();
        visit(self, target, &mut BTreeSet::new(), &mut out);
        out
    }

    pub fn stage_seed(&self, stage: Stage) -> u64 {
        derive_seed(self.cfg.seed, stage.seed_index())
    }

    /// Configuration that affects this stage alone.
    fn own_config(&self, stage: Stage) -> Value {
        let c = &self.cfg;
        let seed = self.stage_seed(stage);
        match stage {
            Stage::Synth => json!({ "seed": seed, "synth": c.synth }),
            Stage::Ingest => json!({ "source": if c.input.is_some() { "file" } else { "synth" } }),
            Stage::BuildCorpus => json!({ "seed": seed, "corpus": c.corpus }),
            Stage::TrainTokenizer => json!({ "tokenizer": c.tokenizer }),
            Stage::BuildPretrainData => json!({ "seed": seed, "masking": c.masking }),
            Stage::Pretrain => json!({ "seed": seed, "model": c.model, "pretrain": c.pretrain }),
            Stage::TaskData => json!({ "seed": seed, "tasks": c.tasks, "max_len": c.model.max_len }),
            Stage::Finetune | Stage::Compare => json!({
                "seed": seed,
                "finetune": c.finetune,
                "tasks": c.tasks.tasks,
            }),
            Stage::Eval => json!({ "batch_size": c.pretrain.batch_size }),
        }
    }

    /// Hash over the stage's own configuration and, recursively, that of
    /// its upstream stages.
    pub fn config_hash(&self, stage: Stage) -> String {
        let upstream: BTreeMap<&str, String> =
            self.upstream(stage).into_iter().map(|u| (u.name(), self.config_hash(u))).collect();
        let doc = json!({ "stage": stage.name(), "config": self.own_config(stage), "upstream": upstream });
        sha256_hex(doc.to_string().as_bytes())
    }

    fn manifest_path(&self, stage: Stage) -> PathBuf {
        self.stage_dir(stage).join(MANIFEST_FILE)
    }

    fn rel(&self, path: &Path) -> String {
        path.strip_prefix(&self.out)
            .unwrap_or(path)
            .to_string_lossy()
            .replace('\\', "/")
    }

    /// Checks that a stage's manifest matches the current configuration and
    /// that every output it lists is present and unmodified.
    fn verify(&self, stage: Stage) -> Result<Manifest> {
        let path = self.manifest_path(stage);
        if !path.is_file() {
            return Err(Error::MissingArtifact(path));
        }
        let m = Manifest::load(&path)?;
        let expected = self.config_hash(stage);
        if m.config_hash != expected {
            return Err(Error::Stale {
                path,
                msg: format!("built with a different configuration; rerun `{stage}`"),
            });
        }
        for (rel, hash) in &m.outputs {
            let p = self.out.join(rel);
            if !p.is_file() {
                return Err(Error::MissingArtifact(p));
            }
            if &sha256_file(&p)? != hash {
                return Err(Error::Stale {
                    path: p,
                    msg: format!("modified after `{stage}` wrote it"),
                });
            }
        }
        Ok(m)
    }

    fn external_inputs(&self, stage: Stage) -> Result<BTreeMap<String, String>> {
        let mut inputs = BTreeMap::new();
        if let (Stage::Ingest, Some(path)) = (stage, &self.cfg.input) {
            if !path.is_file() {
                return Err(Error::MissingArtifact(path.clone()));
            }
            inputs.insert(path.to_string_lossy().into_owned(), sha256_file(path)?);
        }
        Ok(inputs)
    }

    /// Runs one stage. Upstream stages must already be complete; a stage
    /// whose manifest matches its configuration and inputs is skipped.
    pub fn run(&self, stage: Stage) -> Result<Outcome> {
        let mut inputs = self.external_inputs(stage)?;
        let mut upstream = BTreeMap::new();
        for u in self.upstream(stage) {
            let m = self.verify(u)?;
            upstream.insert(u.name().to_owned(), m.config_hash);
            inputs.extend(m.outputs);
        }
        let config_hash = self.config_hash(stage);
        if let Ok(m) = self.verify(stage) {
            if m.inputs == inputs && m.upstream == upstream {
                log::info!("{stage}: up to date");
                return Ok(Outcome::UpToDate);
            }
        }
        let dir = self.stage_dir(stage);
        if dir.exists() {
            fs::remove_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        }
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        log::info!("{stage}: running");
        let written = self.execute(stage, &dir)?;
        let mut outputs = BTreeMap::new();
        for p in written {
            outputs.insert(self.rel(&p), sha256_file(&p)?);
        }
        let manifest = Manifest {
            stage: stage.name().to_owned(),
            config_hash,
            seed: self.stage_seed(stage),
            upstream,
            inputs,
            outputs,
        };
        manifest.save(&self.manifest_path(stage))?;
        Ok(Outcome::Ran)
    }

    /// Runs `target` and every stage it depends on.
    pub fn run_through(&self, target: Stage) -> Result<Vec<(Stage, Outcome)>> {
        self.plan(target)
            .into_iter()
            .map(|s| self.run(s).map(|o| (s, o)))
            .collect()
    }

    fn execute(&self, stage: Stage, dir: &Path) -> Result<Vec<PathBuf>> {
        match stage {
            Stage::Synth => self.synth(dir),
            Stage::Ingest => self.ingest(dir),
            Stage::BuildCorpus => self.build_corpus(dir),
            Stage::TrainTokenizer => self.train_tokenizer(dir),
            Stage::BuildPretrainData => self.build_pretrain_data(dir),
            Stage::Pretrain => self.pretrain(dir),
            Stage::TaskData => self.task_data(dir),
            Stage::Finetune => self.finetune(dir),
            Stage::Compare => self.compare(dir),
            Stage::Eval => self.eval(dir),
        }
    }

    fn synth(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        let checkins = synth_generate(&self.cfg.synth, self.stage_seed(Stage::Synth))?;
        let path = dir.join("checkins.jsonl");
        write_checkins_jsonl(&path, &checkins)?;
        log::info!("synth: {} check-ins", checkins.len());
        Ok(vec![path])
    }

    fn ingest(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        let source = match &self.cfg.input {
            Some(p) => p.clone(),
            None => self.stage_dir(Stage::Synth).join("checkins.jsonl"),
        };
        let report = ingest_path(&source)?;
        let path = dir.join("checkins.jsonl");
        write_checkins_jsonl(&path, &report.checkins)?;
        let stats = dir.join("report.json");
        write_json(
            &stats,
            &json!({ "total_rows": report.total_rows, "rejected": report.rejected, "kept": report.checkins.len() }),
        )?;
        log::info!("ingest: kept {} of {} rows", report.checkins.len(), report.total_rows);
        Ok(vec![path, stats])
    }

    fn build_corpus(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        let c = &self.cfg.corpus;
        let checkins = ingest_path(&self.stage_dir(Stage::Ingest).join("checkins.jsonl"))?.checkins;
        let raw = assemble_monthly(&checkins)?;
        let clustered = raw
            .iter()
            .map(|t| cluster_points(t, c.precision, c.window_s))
            .collect::<Result<Vec<_>>>()?;
        let n_raw = clustered.len();
        let kept = filter_trajectories(clustered, c.filter);
        let n_kept = kept.len();
        let (split, groups) = split_corpus(kept, self.stage_seed(Stage::BuildCorpus))?;
        let mut out = Vec::new();
        for (name, part) in [("train", &split.train), ("validation", &split.validation), ("test", &split.test)] {
            let p = dir.join(format!("{name}.jsonl"));
            write_corpus(&p, part)?;
            out.push(p);
        }
        let g = dir.join("test_groups.json");
        write_json(&g, &groups)?;
        let stats = dir.join("stats.json");
        write_json(
            &stats,
            &json!({
                "trajectories": n_raw,
                "kept": n_kept,
                "train": split.train.len(),
                "validation": split.validation.len(),
                "test": split.test.len(),
            }),
        )?;
        log::info!("build-corpus: kept {n_kept} of {n_raw} monthly trajectories");
        out.extend([g, stats]);
        Ok(out)
    }

    fn corpus(&self, split: &str) -> Result<Vec<crate::pipeline::ClusteredTrajectory>> {
        read_corpus(&self.stage_dir(Stage::BuildCorpus).join(format!("{split}.jsonl")))
    }

    fn vocab(&self) -> Result<Vocabulary> {
        Vocabulary::load(&self.stage_dir(Stage::TrainTokenizer).join("vocab.txt"))
    }

    fn train_tokenizer(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        let train = self.corpus("train")?;
        let cells = train.iter().flat_map(|t| t.cells());
        let (vocab, stats) = train_vocab(cells, self.cfg.tokenizer.vocab_size)?;
        let distinct: BTreeSet<&str> = train.iter().flat_map(|t| t.cells()).collect();
        let path = dir.join("vocab.txt");
        vocab.save(&path)?;
        let s = dir.join("stats.json");
        write_json(
            &s,
            &json!({ "vocab_size": vocab.len(), "distinct_cells": distinct.len(), "merges": stats }),
        )?;
        log::info!("train-tokenizer: {} tokens for {} distinct cells", vocab.len(), distinct.len());
        Ok(vec![path, s])
    }

    fn build_pretrain_data(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        let vocab = self.vocab()?;
        let seed = self.stage_seed(Stage::BuildPretrainData);
        let mut out = Vec::new();
        let mut stats = serde_json::Map::new();
        for (i, split) in ["train", "validation"].into_iter().enumerate() {
            let seqs: Vec<TokenSequence> =
                self.corpus(split)?.iter().map(|t| vocab.encode_trajectory(&t.cells())).collect();
            let chunks = build_masked_split(&seqs, &self.cfg.masking, derive_seed(seed, i as u64))?;
            let p = dir.join(format!("{split}.jsonl"));
            write_masked(&p, &chunks)?;
            stats.insert(split.into(), masking_stats(&chunks));
            out.push(p);
        }
        let s = dir.join("stats.json");
        write_json(&s, &Value::Object(stats))?;
        out.push(s);
        Ok(out)
    }

    fn pretrain_data(&self, split: &str) -> Result<Vec<MaskedChunk>> {
        read_masked(&self.stage_dir(Stage::BuildPretrainData).join(format!("{split}.jsonl")))
    }

    fn pretrain(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        let vocab = self.vocab()?;
        let train = self.pretrain_data("train")?;
        let val = self.pretrain_data("validation")?;
        let config = self.cfg.model.to_config(vocab.len());
        let mut state = TrainState::init(&config, self.stage_seed(Stage::Pretrain), self.cfg.pretrain.adam)?;
        let metrics_path = dir.join("metrics.csv");
        let mut metrics = create(&metrics_path)?;
        let records = pretrain(&mut state, &train, &val, &self.cfg.pretrain, &mut metrics, |_, _| Ok(()))?;
        drop(metrics);
        let ckpt = dir.join("encoder.ckpt");
        state.to_checkpoint().save(&ckpt)?;
        let epochs = dir.join("epochs.json");
        write_json(&epochs, &records)?;
        if let (Some(first), Some(last)) = (records.first(), records.last()) {
            log::info!(
                "pretrain: validation perplexity {:.3} -> {:.3}",
                first.val_perplexity,
                last.val_perplexity
            );
        }
        Ok(vec![metrics_path, ckpt, epochs])
    }

    fn task_data(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        let test = self.corpus("test")?;
        let vocab = self.vocab()?;
        let gpath = self.stage_dir(Stage::BuildCorpus).join("test_groups.json");
        let groups: UserGroups = read_json(&gpath, "user groups")?;
        let (n, max_len) = (self.cfg.tasks.n_examples, self.cfg.model.max_len);
        let seed = self.stage_seed(Stage::TaskData);
        let mut out = Vec::new();
        for task in &self.cfg.tasks.tasks {
            let s = derive_seed(seed, *task as u64);
            let p = dir.join(format!("{task}.jsonl"));
            match task {
                Task::Nsp => write_jsonl(&p, &build_nsp(&test, &vocab, n, max_len, s)?)?,
                Task::Tua => write_jsonl(&p, &build_tua(&test, &groups, &vocab, n, max_len, s)?)?,
                Task::Dp => {
                    let (examples, classes) = build_dp(&test, &vocab, n, max_len, s)?;
                    write_jsonl(&p, &examples)?;
                    let c = dir.join("dp_classes.json");
                    write_json(&c, &classes)?;
                    out.push(c);
                }
            }
            out.push(p);
        }
        Ok(out)
    }

    /// Packed examples of one task, split into fine-tune train and
    /// validation parts, plus the class count.
    fn task_split(&self, task: Task) -> Result<(Vec<ClassExample>, Vec<ClassExample>, usize)> {
        let dir = self.stage_dir(Stage::TaskData);
        let p = dir.join(format!("{task}.jsonl"));
        let (examples, n_classes): (Vec<ClassExample>, usize) = match task {
            Task::Nsp | Task::Tua => (read_jsonl::<PairExample>(&p)?.iter().map(PairExample::pack).collect(), 2),
            Task::Dp => {
                let classes: DestClasses = read_json(&dir.join("dp_classes.json"), "destination classes")?;
                let ex = read_jsonl::<DestExample>(&p)?;
                (ex.iter().map(DestExample::pack).collect(), classes.cells.len())
            }
        };
        let seed = derive_seed(self.stage_seed(Stage::Finetune), task as u64);
        let (train, val) = balanced_split(examples, self.cfg.finetune.val_frac, seed);
        Ok((train, val, n_classes))
    }

    fn pretrained(&self) -> Result<ParameterSet<f32>> {
        let vocab = self.vocab()?;
        load_encoder(
            &self.stage_dir(Stage::Pretrain).join("encoder.ckpt"),
            &self.cfg.model.to_config(vocab.len()),
        )
    }

    fn finetune(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        let encoder = self.pretrained()?;
        let seed = self.stage_seed(Stage::Finetune);
        let metrics_path = dir.join("metrics.csv");
        let mut metrics = create(&metrics_path)?;
        writeln!(metrics, "{FINETUNE_METRICS_HEADER}").map_err(|e| Error::io(&metrics_path, e))?;
        let mut out = vec![metrics_path.clone()];
        let mut results = Vec::new();
        for &task in &self.cfg.tasks.tasks {
            let (train, val, n_classes) = self.task_split(task)?;
            let task_seed = derive_seed(seed, task as u64);
            let head = ClassifierHead::init(
                encoder.config.d_model,
                n_classes,
                &mut ChaCha8Rng::seed_from_u64(derive_seed(task_seed, 2)),
            )?;
            let r = fine_tune(
                encoder.clone(),
                head,
                &train,
                &val,
                &self.cfg.finetune,
                task_seed,
                task.name(),
                Some(&mut metrics),
            )?;
            let mut header = CheckpointHeader {
                config: r.encoder.config.clone(),
                step: r.steps,
                seed: task_seed,
                adam: None,
                meta: BTreeMap::new(),
            };
            header.meta.insert("task".into(), json!(task.name()));
            header.meta.insert("n_classes".into(), json!(n_classes));
            let mut arrays = Vec::new();
            push_params(&mut arrays, "", &r.encoder);
            for (name, t) in r.head.names().iter().zip(r.head.tensors()) {
                arrays.push((name.to_string(), t.clone()));
            }
            let ck = dir.join(format!("{task}.ckpt"));
            Checkpoint { header, arrays }.save(&ck)?;
            out.push(ck);
            results.push(json!({ "task": task.name(), "val_f1": r.val_f1(), "epochs": r.epochs }));
        }
        metrics.flush().map_err(|e| Error::io(&metrics_path, e))?;
        let res = dir.join("results.json");
        write_json(&res, &results)?;
        out.push(res);
        Ok(out)
    }

    fn compare(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        let encoder = self.pretrained()?;
        let seed = self.stage_seed(Stage::Finetune);
        let metrics_path = dir.join("metrics.csv");
        let mut metrics = create(&metrics_path)?;
        writeln!(metrics, "{FINETUNE_METRICS_HEADER}").map_err(|e| Error::io(&metrics_path, e))?;
        let mut out = vec![metrics_path.clone()];
        let mut reports: Vec<CompareReport> = Vec::new();
        for &task in &self.cfg.tasks.tasks {
            let (train, val, n_classes) = self.task_split(task)?;
            let r = compare_inits(
                task.name(),
                &encoder,
                &train,
                &val,
                n_classes,
                &self.cfg.finetune,
                derive_seed(seed, task as u64),
                Some(&mut metrics),
            )?;
            log::info!(
                "compare {task}: random {:.4}, pre-trained {:.4}, gap {:+.4}",
                r.random_f1,
                r.pretrained_f1,
                r.gap
            );
            let p = dir.join(format!("{task}.json"));
            write_json(&p, &r)?;
            out.push(p);
            reports.push(r);
        }
        metrics.flush().map_err(|e| Error::io(&metrics_path, e))?;
        let random: Vec<f64> = reports.iter().map(|r| r.random_f1).collect();
        let pre: Vec<f64> = reports.iter().map(|r| r.pretrained_f1).collect();
        let summary = dir.join("report.json");
        write_json(
            &summary,
            &json!({ "tasks": reports, "mean_gap": crate::tasks::mean_gap(&pre, &random) }),
        )?;
        out.push(summary);
        Ok(out)
    }

    fn eval(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        let batch = self.cfg.pretrain.batch_size;
        let val = self.pretrain_data("validation")?;
        let ppl = perplexity(&self.pretrained()?, &val, batch)?;
        let mut tasks = serde_json::Map::new();
        for &task in &self.cfg.tasks.tasks {
            let (_, examples, n_classes) = self.task_split(task)?;
            let ck = Checkpoint::load(&self.stage_dir(Stage::Finetune).join(format!("{task}.ckpt")))?;
            let encoder = ck.params("")?;
            let head = ck.classifier(n_classes)?;
            let (preds, loss) = predict(&encoder, &head, &examples, batch)?;
            let labels: Vec<usize> = examples.iter().map(|e| e.label).collect();
            let f1 = evaluate_f1(&preds, &labels)?;
            tasks.insert(task.name().into(), json!({ "f1": f1, "loss": loss, "examples": examples.len() }));
        }
        let p = dir.join("report.json");
        write_json(&p, &json!({ "validation_perplexity": ppl, "tasks": tasks }))?;
        Ok(vec![p])
    }
}

/// Masked occurrences over all cell occurrences of a split.
fn masking_stats(chunks: &[MaskedChunk]) -> Value {
    let mut words = 0usize;
    let mut masked = 0usize;
    for c in chunks {
        let mut seen = BTreeSet::new();
        let mut hit = BTreeSet::new();
        for (i, &w) in c.word_ids.iter().enumerate() {
            if c.attention_mask[i] == 1 {
                seen.insert(w);
                if c.labels[i] != crate::masking::IGNORE_LABEL {
                    hit.insert(w);
                }
            }
        }
        words += seen.len();
        masked += hit.len();
    }
    json!({
        "chunks": chunks.len(),
        "cell_occurrences": words,
        "masked_occurrences": masked,
        "masked_fraction": masked as f64 / words.max(1) as f64,
    })
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path).map(BufWriter::new).map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("artifact serializes");
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path, what: &'static str) -> Result<T> {
    if !path.is_file() {
        return Err(Error::MissingArtifact(path.to_owned()));
    }
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Format {
        what,
        msg: format!("{}: {e}", path.display()),
    })
}

/// Per-epoch perplexities recorded by the `pretrain` stage.
pub fn read_epoch_records(run_dir: &Path) -> Result<Vec<EpochRecord>> {
    read_json(&run_dir.join(Stage::Pretrain.dir()).join("epochs.json"), "epoch records")
}
