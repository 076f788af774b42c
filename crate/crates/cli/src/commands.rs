//! Subcommand implementations. Every primary output is written through
//! an atomic temp-file rename, so a failing run leaves no partial files.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use redfuse::datagen::{
    build_instruction_record, make_group, read_jsonl, synthetic_caption, write_jsonl,
    InstructionRecord, QuestionMode,
};
use redfuse::fusion::FeatureRecord;
use redfuse::gradcheck;
use redfuse::lm::{
    self, LmExample, LmHyper, LowRankAdapter, StageStep, TokenSequence, ToyLmParams,
};
use redfuse::metrics::{evaluate_corpus, EvalPair, MetricReport};
use redfuse::num::GradReport;
use redfuse::sampler::{
    score_group, select_valid, train_sampler_with_targets, AttentionScorerParams, DistillTarget,
    GroupRecord, RedundantGroup, SamplerCheckpoint, ScoreKind, ScorerParams, TrainHyper,
};
use redfuse::{Error, Matrix, Result};

use crate::config::RunConfig;

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes)
        .map_err(|e| Error::Io(format!("writing {}: {e}", tmp.display())))?;
    std::fs::rename(&tmp, path)
        .map_err(|e| Error::Io(format!("renaming into {}: {e}", path.display())))
}

fn write_json_atomic<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut json = serde_json::to_string_pretty(value)
        .map_err(|e| Error::Io(format!("serializing {}: {e}", path.display())))?;
    json.push('\n');
    write_atomic(path, json.as_bytes())
}

fn write_jsonl_atomic<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    write_jsonl(&tmp, records)?;
    std::fs::rename(&tmp, path)
        .map_err(|e| Error::Io(format!("renaming into {}: {e}", path.display())))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub seed: u64,
    pub groups: usize,
    pub images: usize,
    pub instructions: usize,
    pub k: usize,
    pub m: usize,
    pub d: usize,
    pub complementary: bool,
}

/// Generates groups, raw encoder streams, instruction records, and the
/// manifest into the output directory.
pub fn cmd_gen_data(config: &RunConfig, quiet: bool) -> Result<Manifest> {
    config.validate()?;
    let spec = config.group_spec.to_spec(config.seed)?;
    let out = &config.paths.out_dir;
    std::fs::create_dir_all(out)
        .map_err(|e| Error::Io(format!("creating {}: {e}", out.display())))?;

    let count = config.group_spec.count as u64;
    let mut group_records = Vec::with_capacity(config.group_spec.count);
    let mut stream1 = Vec::new();
    let mut stream2 = Vec::new();
    let mut instructions = Vec::with_capacity(config.group_spec.count);
    for idx in 0..count {
        let generated = make_group(&spec, idx)?;
        stream1.extend(generated.stream_records(1));
        stream2.extend(generated.stream_records(2));
        let record = generated.to_record();

        let (site, caption) = synthetic_caption(config.seed, idx);
        let image_ids: Vec<String> = record.images.iter().map(|i| i.image_id.clone()).collect();
        let (mode, site_arg) = if config.ablations.site_prompt {
            (QuestionMode::SiteCue, Some(site.as_str()))
        } else {
            (QuestionMode::NoCue, None)
        };
        instructions.push(build_instruction_record(&caption, &image_ids, mode, site_arg)?);
        group_records.push(record);
    }

    write_jsonl_atomic(&out.join("groups.jsonl"), &group_records)?;
    write_jsonl_atomic(&out.join("features_stream1.jsonl"), &stream1)?;
    write_jsonl_atomic(&out.join("features_stream2.jsonl"), &stream2)?;
    write_jsonl_atomic(&out.join("instructions.jsonl"), &instructions)?;

    let manifest = Manifest {
        seed: config.seed,
        groups: group_records.len(),
        images: stream1.len(),
        instructions: instructions.len(),
        k: spec.k,
        m: spec.m,
        d: spec.d,
        complementary: spec.complementary,
    };
    write_json_atomic(&out.join("manifest.json"), &manifest)?;
    if !quiet {
        println!(
            "gen-data: wrote {} groups ({} images) to {}",
            manifest.groups,
            manifest.images,
            out.display()
        );
    }
    Ok(manifest)
}

/// Loads groups and applies the visual-enhancement ablation: with the
/// flag off, image features are replaced by the raw stream-1 features.
fn load_view_groups(config: &RunConfig) -> Result<Vec<RedundantGroup>> {
    let out = &config.paths.out_dir;
    let records: Vec<GroupRecord> = read_jsonl(&out.join("groups.jsonl"))?;
    if config.ablations.visual_enhancement {
        return records.iter().map(|r| r.to_group()).collect();
    }
    let stream1: Vec<FeatureRecord> = read_jsonl(&out.join("features_stream1.jsonl"))?;
    let table: BTreeMap<&str, &Matrix> =
        stream1.iter().map(|r| (r.image_id.as_str(), &r.features)).collect();
    records
        .iter()
        .map(|r| {
            let images = r
                .images
                .iter()
                .map(|img| {
                    table.get(img.image_id.as_str()).map(|m| (*m).clone()).ok_or_else(|| {
                        Error::Lookup(format!("no stream-1 features for {}", img.image_id))
                    })
                })
                .collect::<Result<Vec<Matrix>>>()?;
            RedundantGroup::new(r.group_id.clone(), images, r.text_features.clone(), r.valid_index)
        })
        .collect()
}

/// Byte-fold encoding of text into the synthetic token alphabet.
fn encode_text(text: &str, vocab: usize, max_len: usize) -> TokenSequence {
    let ids: Vec<usize> =
        text.bytes().take(max_len).map(|b| b as usize % vocab).collect();
    TokenSequence::new(if ids.is_empty() { vec![0] } else { ids })
}

fn init_scorer(config: &RunConfig, d: usize) -> Result<ScorerParams> {
    let attention = AttentionScorerParams::shared_random(
        d,
        config.sampler.d_k,
        config.sampler.n_layers,
        config.seed,
    )?;
    ScorerParams::new(d, attention)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SamplerSummary {
    pub trained: bool,
    pub steps: usize,
    pub final_train_loss: Option<f64>,
    pub entropy_floor: Option<f64>,
    pub held_out_accuracy: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ToyLmSummary {
    pub steps: usize,
    pub final_loss: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainSummary {
    pub sampler: SamplerSummary,
    pub toylm: ToyLmSummary,
}

fn loss_csv(rows: impl Iterator<Item = (usize, String, f64)>) -> String {
    let mut csv = String::from("step,stage,loss\n");
    for (step, stage, loss) in rows {
        csv.push_str(&format!("{step},{stage},{loss}\n"));
    }
    csv
}

/// Trains the sampler by distillation and the toy LM in two stages, per
/// the ablation flags, writing checkpoints, loss curves, and a summary.
pub fn cmd_train(config: &RunConfig, quiet: bool) -> Result<TrainSummary> {
    config.validate()?;
    let out = &config.paths.out_dir;
    let groups = load_view_groups(config)?;
    if groups.is_empty() {
        return Err(Error::Io(format!("no groups found under {}", out.display())));
    }
    let d_view = groups[0].channels();
    let train_n = config.sampler.train_groups.min(groups.len());
    let (train_groups, held_out) = groups.split_at(train_n);

    // sampler distillation
    let init = init_scorer(config, d_view)?;
    let hyper = TrainHyper {
        lr: config.sampler.lr * config.sampler.adr_weight,
        steps: config.sampler.steps,
        temperature: config.sampler.temperature,
        batch: config.sampler.batch,
    };
    let (scorer, history, trained) = if config.ablations.redundancy_adaptation {
        let target = if config.ablations.attention_strategy {
            DistillTarget::AttentionScores
        } else {
            DistillTarget::PlantedOneHot
        };
        let (scorer, history) = train_sampler_with_targets(train_groups, &init, &hyper, target)?;
        (scorer, history, true)
    } else {
        (init, Vec::new(), false)
    };

    let final_train_loss = trained
        .then(|| redfuse::sampler::mean_adr_loss(train_groups, &scorer, hyper.temperature))
        .transpose()?;
    let entropy_floor = trained
        .then(|| redfuse::sampler::mean_attention_entropy(train_groups, &scorer, hyper.temperature))
        .transpose()?;
    let held_out_accuracy = if held_out.iter().any(|g| g.planted_valid_index.is_some()) {
        Some(redfuse::sampler::selection_accuracy(held_out, |g| {
            score_group(g, &scorer, ScoreKind::Feature)
        })?)
    } else {
        None
    };

    let checkpoint = SamplerCheckpoint::from_params(&scorer, config.seed, history.len());
    write_json_atomic(&out.join("sampler.json"), &checkpoint)?;
    let sampler_csv =
        loss_csv(history.iter().enumerate().map(|(i, l)| (i, "distill".to_string(), *l)));
    write_atomic(&out.join("sampler_loss.csv"), sampler_csv.as_bytes())?;

    // toy LM instruction tuning on the selected (or first) image per group
    let instructions: Vec<InstructionRecord> = read_jsonl(&out.join("instructions.jsonl"))?;
    if instructions.len() != groups.len() {
        return Err(Error::Io(format!(
            "row count mismatch: {} instruction records vs {} groups",
            instructions.len(),
            groups.len()
        )));
    }
    let vocab = config.toylm.vocab;
    let mut stage1 = Vec::with_capacity(groups.len());
    let mut stage2 = Vec::with_capacity(groups.len());
    let simple_question = "What does this ultrasound show?";
    for (group, record) in groups.iter().zip(&instructions) {
        let image_idx = if config.ablations.redundancy_adaptation {
            select_valid(&score_group(group, &scorer, ScoreKind::Feature)?)?
        } else {
            0
        };
        let visual = group.image_features[image_idx].clone();
        let answer = encode_text(&record.answer, vocab, config.toylm.answer_len);
        stage1.push(LmExample {
            visual: visual.clone(),
            instruction: encode_text(simple_question, vocab, config.toylm.instruction_len),
            answer: answer.clone(),
        });
        stage2.push(LmExample {
            visual,
            instruction: encode_text(&record.question, vocab, config.toylm.instruction_len),
            answer,
        });
    }

    let mut lm_params = ToyLmParams::init(
        vocab,
        config.toylm.embed_dim,
        config.toylm.d_k,
        d_view,
        config.seed,
    )?;
    if config.toylm.adapter_rank > 0 {
        lm_params.adapters.insert(
            "output_weight".to_string(),
            LowRankAdapter::seeded(
                config.toylm.embed_dim,
                vocab,
                config.toylm.adapter_rank,
                config.toylm.adapter_scale,
                config.seed,
            )?,
        );
    }
    lm_params.freeze_spec = config.toylm.freeze.iter().cloned().collect();
    let lm_hyper = LmHyper {
        lr: config.toylm.lr,
        batch: config.toylm.batch,
        steps_stage1: config.toylm.steps_stage1,
        steps_stage2: if config.ablations.stage2 { config.toylm.steps_stage2 } else { 0 },
        optimizer: config.toylm.optimizer,
    };
    let (lm_trained, lm_history) = lm::train_two_stage(&stage1, &stage2, &lm_params, &lm_hyper)?;
    let final_loss = lm::teacher_forced_loss(&lm_trained, &stage2)?;

    lm::save_checkpoint(&lm_trained, &out.join("toylm.tmp"))?;
    std::fs::rename(out.join("toylm.tmp"), out.join("toylm.json"))
        .map_err(|e| Error::Io(format!("renaming toylm checkpoint: {e}")))?;
    let lm_csv = loss_csv(
        lm_history
            .iter()
            .map(|s: &StageStep| (s.step, format!("stage{}", s.stage), s.loss)),
    );
    write_atomic(&out.join("toylm_loss.csv"), lm_csv.as_bytes())?;

    let summary = TrainSummary {
        sampler: SamplerSummary {
            trained,
            steps: history.len(),
            final_train_loss,
            entropy_floor,
            held_out_accuracy,
        },
        toylm: ToyLmSummary { steps: lm_history.len(), final_loss },
    };
    write_json_atomic(&out.join("train_summary.json"), &summary)?;
    if !quiet {
        match (summary.sampler.final_train_loss, summary.sampler.held_out_accuracy) {
            (Some(loss), Some(acc)) => {
                println!("train: sampler loss {loss:.4}, held-out selection accuracy {acc:.3}")
            }
            _ => println!("train: sampler untrained (redundancy adaptation off)"),
        }
        println!("train: toy LM final per-token loss {final_loss:.4}");
    }
    Ok(summary)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SelectionRow {
    pub group_id: String,
    pub selected: usize,
    pub raw: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SelectionSummary {
    pub n_groups: usize,
    pub n_labeled: usize,
    pub accuracy: Option<f64>,
}

/// Scores every group with the trained feature scorer and writes the
/// chosen index plus raw scores; reports accuracy when labels exist.
pub fn cmd_select(
    config: &RunConfig,
    checkpoint_path: Option<&Path>,
    quiet: bool,
) -> Result<SelectionSummary> {
    config.validate()?;
    let out = &config.paths.out_dir;
    let default_ckpt = out.join("sampler.json");
    let ckpt_path = checkpoint_path.unwrap_or(&default_ckpt);
    let text = std::fs::read_to_string(ckpt_path)
        .map_err(|e| Error::Io(format!("reading {}: {e}", ckpt_path.display())))?;
    let checkpoint: SamplerCheckpoint = serde_json::from_str(&text)
        .map_err(|e| Error::Config(format!("parsing {}: {e}", ckpt_path.display())))?;
    let scorer = checkpoint.to_params()?;

    let groups = load_view_groups(config)?;
    if groups.is_empty() {
        return Err(Error::Io(format!("no groups found under {}", out.display())));
    }
    if groups[0].channels() != scorer.w.len() {
        return Err(Error::Config(format!(
            "checkpoint expects {} channels but groups have {}",
            scorer.w.len(),
            groups[0].channels()
        )));
    }

    let mut rows = Vec::with_capacity(groups.len());
    let mut labeled = 0usize;
    let mut hits = 0usize;
    for group in &groups {
        let scores = score_group(group, &scorer, ScoreKind::Feature)?;
        let selected = select_valid(&scores)?;
        if let Some(planted) = group.planted_valid_index {
            labeled += 1;
            if selected == planted {
                hits += 1;
            }
        }
        rows.push(SelectionRow { group_id: group.group_id.clone(), selected, raw: scores.raw });
    }
    write_jsonl_atomic(&out.join("selections.jsonl"), &rows)?;

    let accuracy = (labeled > 0).then(|| hits as f64 / labeled as f64);
    let summary = SelectionSummary { n_groups: rows.len(), n_labeled: labeled, accuracy };
    write_json_atomic(&out.join("selection_summary.json"), &summary)?;
    if !quiet {
        match accuracy {
            Some(acc) => println!("select: accuracy {acc:.3} over {labeled} labeled groups"),
            None => println!("select: no planted labels present"),
        }
    }
    Ok(summary)
}

pub enum EvalInput<'a> {
    /// Line-aligned plain-text files: candidates and references.
    Lines { predictions: &'a Path, references: &'a Path },
    /// Single JSONL file of {candidate, reference, closed?} rows.
    Pairs(&'a Path),
}

/// Scores predictions against references and writes the metric report.
pub fn cmd_evaluate(
    input: EvalInput<'_>,
    report_path: &Path,
    smoothing: bool,
    quiet: bool,
) -> Result<MetricReport> {
    let pairs: Vec<EvalPair> = match input {
        EvalInput::Lines { predictions, references } => {
            let read = |p: &Path| -> Result<Vec<String>> {
                Ok(std::fs::read_to_string(p)
                    .map_err(|e| Error::Io(format!("reading {}: {e}", p.display())))?
                    .lines()
                    .map(str::to_string)
                    .collect())
            };
            let preds = read(predictions)?;
            let refs = read(references)?;
            if preds.len() != refs.len() {
                return Err(Error::Io(format!(
                    "row count mismatch: {} predictions vs {} references",
                    preds.len(),
                    refs.len()
                )));
            }
            preds
                .into_iter()
                .zip(refs)
                .map(|(candidate, reference)| EvalPair { candidate, reference, closed: false })
                .collect()
        }
        EvalInput::Pairs(path) => read_jsonl(path)?,
    };

    let report = evaluate_corpus(&pairs, smoothing)?;
    write_json_atomic(report_path, &report)?;
    if !quiet {
        let c = &report.corpus;
        println!(
            "evaluate: EM {:.4} P {:.4} R {:.4} F1 {:.4} BLEU {:.4}/{:.4}/{:.4}/{:.4}",
            c.em, c.precision, c.recall, c.f1, c.bleu_uniform, c.bleu_1, c.bleu_2, c.bleu_3
        );
        if let Some(acc) = report.closed_accuracy {
            println!("evaluate: closed-set accuracy {acc:.4}");
        }
    }
    Ok(report)
}

/// Runs the repository-wide gradient audit and prints one row per
/// parameter group.
pub fn cmd_gradcheck(
    n_seeds: usize,
    tol: f64,
    corrupt: Option<&str>,
    quiet: bool,
) -> Result<Vec<GradReport>> {
    let rows = gradcheck::run_gradient_audit_with_corruption(n_seeds, tol, corrupt)?;
    if !quiet {
        println!(
            "{:<42} {:>14} {:>9} {:>6}",
            "parameter", "max_rel_error", "entries", "pass"
        );
        for row in &rows {
            println!(
                "{:<42} {:>14.3e} {:>9} {:>6}",
                row.parameter_name,
                row.max_relative_error,
                row.num_entries_checked,
                if row.pass { "ok" } else { "FAIL" }
            );
        }
    }
    Ok(rows)
}

/// Collects whatever run artifacts exist under the directory into one
/// JSON object on stdout.
pub fn cmd_report(dir: &Path) -> Result<serde_json::Value> {
    let mut out = serde_json::Map::new();
    for (key, file) in [
        ("manifest", "manifest.json"),
        ("train", "train_summary.json"),
        ("selection", "selection_summary.json"),
        ("metrics", "metric_report.json"),
    ] {
        let path = dir.join(file);
        let value = if path.exists() {
            let text = std::fs::read_to_string(&path)
                .map_err(|e| Error::Io(format!("reading {}: {e}", path.display())))?;
            serde_json::from_str(&text)
                .map_err(|e| Error::Parse { line: e.line(), message: e.to_string() })?
        } else {
            serde_json::Value::Null
        };
        out.insert(key.to_string(), value);
    }
    let value = serde_json::Value::Object(out);
    println!("{}", serde_json::to_string_pretty(&value).expect("serializable"));
    Ok(value)
}

/// Stable exit code for an error category: config-class failures exit 2,
/// i/o 3, numeric 4.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) | Error::Domain(_) | Error::Shape(_) | Error::Lookup(_) => 2,
        Error::Io(_) | Error::Parse { .. } => 3,
        Error::Numeric(_) => 4,
    }
}

/// Exit code for a failed acceptance-style check (gradient audit).
pub const EXIT_ACCEPTANCE_FAILURE: i32 = 5;
