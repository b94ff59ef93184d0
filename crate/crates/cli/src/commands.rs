use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use absa_cd::codec::{build_input, build_target, Record};
use absa_cd::constraint::{ConstraintMode, DecoderState, Grammar};
use absa_cd::corpus::{compute_stats, ingest_many, ingest_xml, CorpusStats, IngestOptions, SplitRatio};
use absa_cd::decode::{DecodeItem, DecodeOptions, DecodeResult, Decoder, RemoteScorer, Scorer, ScriptedScorer, SeededRandomScorer};
use absa_cd::llm::{build_prompt, clean_reply, parse_reply, ChatRequest, LlmClient, PromptSpec, PromptTemplate};
use absa_cd::metrics::{aggregate, score_records, EvalReport, Prf, RunAggregate};
use absa_cd::schema::{SchemaConfig, Task};
use absa_cd::vocab::Vocabulary;
use anyhow::{anyhow, bail, Context};
use serde::Serialize;

use crate::io::{emit, provenance_path, read_records, write_json, write_records};
use crate::setup::{load_schema, load_vocab, vocab_source, Problems, RunConfig};
use crate::{Command, EndpointArgs, ModelArgs};

pub enum Failure {
    Config(Vec<String>),
    Fatal(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Fatal(e)
    }
}

type Outcome = Result<(), Failure>;

fn check(problems: Problems) -> Outcome {
    if problems.is_empty() {
        Ok(())
    } else {
        Err(Failure::Config(problems.0))
    }
}

pub fn run(command: Command) -> Outcome {
    match command {
        Command::Ingest {
            input,
            out,
            lang,
            keep_empty,
        } => ingest(&input, &out, &lang, keep_empty),
        Command::Split {
            input,
            train,
            dev,
            seed,
            ratio,
        } => split(&input, &train, &dev, seed, &ratio),
        Command::Stats {
            input,
            lang,
            keep_empty,
            json,
        } => stats(&input, &lang, keep_empty, json),
        Command::BuildData {
            input,
            out,
            task,
            schema,
        } => build_data(&input, &out, task, schema.schema.as_deref()),
        Command::Decode {
            input,
            out,
            scorer,
            model,
            max_len,
            no_mask,
            details,
            endpoint,
        } => decode(DecodeArgs {
            input,
            out,
            scorer,
            model,
            max_len,
            masking: !no_mask,
            details,
            endpoint,
        }),
        Command::Eval {
            pred,
            gold,
            task,
            report,
            json,
        } => eval(&pred, &gold, task, report.as_deref(), json),
        Command::Prompt {
            input,
            sentence,
            task,
            lang,
            schema,
            endpoint,
            out,
        } => prompt(input.as_deref(), sentence.as_deref(), task, &lang, schema.schema.as_deref(), &endpoint, out.as_deref()),
        Command::ExplainConstraints { prefix, sentence, model } => explain(&prefix, &sentence, &model),
    }
}

fn save_provenance(out: &Path, rc: &RunConfig) -> anyhow::Result<()> {
    write_json(&provenance_path(out), rc)
}

fn ingest(inputs: &[PathBuf], out: &Path, lang: &str, keep_empty: bool) -> Outcome {
    let mut problems = Problems::default();
    for p in inputs {
        problems.file(p, "input");
    }
    problems.out_dir(out, "output");
    check(problems)?;

    let opts = IngestOptions {
        language: lang.to_string(),
        keep_empty,
    };
    let paths: Vec<&Path> = inputs.iter().map(PathBuf::as_path).collect();
    let reports = ingest_many(&paths, &opts).map_err(anyhow::Error::from)?;
    let mut records = Vec::new();
    let mut dropped = 0;
    for r in reports {
        for d in &r.diagnostics {
            emit("ingest", &d.sentence_id, &d.message);
        }
        dropped += r.dropped_empty;
        records.extend(r.sentences);
    }
    write_records(out, &records)?;
    let mut rc = RunConfig::new("ingest");
    rc.inputs = inputs.to_vec();
    rc.outputs = vec![out.to_path_buf()];
    rc.language = Some(lang.to_string());
    save_provenance(out, &rc)?;
    eprintln!(
        "wrote {} sentences to {} ({dropped} without opinions {})",
        records.len(),
        out.display(),
        if keep_empty { "kept" } else { "dropped" }
    );
    Ok(())
}

fn parse_ratio(s: &str) -> Option<SplitRatio> {
    let (a, b) = s.split_once(':')?;
    let ratio = SplitRatio {
        train: a.trim().parse().ok()?,
        dev: b.trim().parse().ok()?,
    };
    (ratio.train > 0).then_some(ratio)
}

fn split(input: &Path, train: &Path, dev: &Path, seed: u64, ratio: &str) -> Outcome {
    let mut problems = Problems::default();
    problems.file(input, "input");
    problems.out_dir(train, "train output");
    problems.out_dir(dev, "dev output");
    let parsed = parse_ratio(ratio);
    if parsed.is_none() {
        problems.push(format!("ratio `{ratio}` is not of the form <train>:<dev> with train > 0"));
    }
    check(problems)?;

    let records: Vec<Record> = read_records(input)?;
    let (tr, dv) = absa_cd::corpus::split_train_dev(&records, parsed.expect("validated"), seed).map_err(anyhow::Error::from)?;
    write_records(train, &tr)?;
    write_records(dev, &dv)?;
    let mut rc = RunConfig::new("split");
    rc.seed = Some(seed);
    rc.inputs = vec![input.to_path_buf()];
    rc.outputs = vec![train.to_path_buf(), dev.to_path_buf()];
    save_provenance(train, &rc)?;
    eprintln!("train {} / dev {}", tr.len(), dv.len());
    Ok(())
}

fn is_xml(path: &Path) -> bool {
    if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("xml")) {
        return true;
    }
    std::fs::read_to_string(path)
        .map(|t| t.trim_start().starts_with('<'))
        .unwrap_or(false)
}

#[derive(Serialize)]
struct StatsOutput {
    language: String,
    #[serde(flatten)]
    stats: CorpusStats,
    #[serde(skip_serializing_if = "Option::is_none")]
    without_opinions: Option<usize>,
}

fn stats(input: &Path, lang: &str, keep_empty: bool, json: bool) -> Outcome {
    let mut problems = Problems::default();
    problems.file(input, "input");
    check(problems)?;

    let (records, without) = if is_xml(input) {
        let r = ingest_xml(
            input,
            &IngestOptions {
                language: lang.to_string(),
                keep_empty,
            },
        )
        .map_err(anyhow::Error::from)?;
        for d in &r.diagnostics {
            emit("stats", &d.sentence_id, &d.message);
        }
        (r.sentences, Some(r.dropped_empty))
    } else {
        (read_records::<Record>(input)?, None)
    };
    let s = compute_stats(&records);
    let out = StatsOutput {
        language: lang.to_string(),
        stats: s,
        without_opinions: without,
    };
    if json {
        println!("{}", serde_json::to_string_pretty(&out).map_err(anyhow::Error::from)?);
        return Ok(());
    }
    let rows = [
        ("Sentences", s.sentences),
        ("Triplets", s.triplets),
        ("Categories", s.categories),
        ("POS", s.positive),
        ("NEG", s.negative),
        ("NEU", s.neutral),
        ("NULL", s.null_aspects),
    ];
    println!("{:<12}{:>8}", "", lang);
    for (name, v) in rows {
        println!("{name:<12}{v:>8}");
    }
    if let Some(n) = without {
        println!("({n} sentences without opinions {})", if keep_empty { "included" } else { "dropped" });
    }
    Ok(())
}

#[derive(Serialize)]
struct TrainingPair {
    id: String,
    input: String,
    target: String,
}

fn build_data(input: &Path, out: &Path, task: Task, schema: Option<&Path>) -> Outcome {
    let mut problems = Problems::default();
    problems.file(input, "input");
    problems.out_dir(out, "output");
    let cfg = load_schema(schema, &mut problems);
    check(problems)?;
    let cfg = cfg.expect("validated");

    let records: Vec<Record> = read_records(input)?;
    let mut pairs = Vec::with_capacity(records.len());
    for r in &records {
        let pair = build_input(&r.text, task, &cfg).and_then(|i| {
            build_target(&r.tuples, task, &cfg).map(|t| TrainingPair {
                id: r.id.clone(),
                input: i.render(),
                target: t.rendered,
            })
        });
        match pair {
            Ok(p) => pairs.push(p),
            Err(e) => emit("build-data", &r.id, e.to_string()),
        }
    }
    write_records(out, &pairs)?;
    let mut rc = RunConfig::new("build-data");
    rc.task = Some(task.name().to_string());
    rc.schema = schema.map(Path::to_path_buf);
    rc.inputs = vec![input.to_path_buf()];
    rc.outputs = vec![out.to_path_buf()];
    save_provenance(out, &rc)?;
    eprintln!("wrote {} of {} pairs", pairs.len(), records.len());
    Ok(())
}

enum ScorerSpec {
    Scripted(PathBuf),
    Random(u64),
    Remote,
}

fn scorer_spec(s: &str, problems: &mut Problems) -> Option<ScorerSpec> {
    if let Some(p) = s.strip_prefix("scripted:") {
        let p = PathBuf::from(p);
        problems.file(&p, "scorer script");
        return Some(ScorerSpec::Scripted(p));
    }
    if let Some(seed) = s.strip_prefix("random:") {
        return match seed.parse() {
            Ok(seed) => Some(ScorerSpec::Random(seed)),
            Err(_) => {
                problems.push(format!("random scorer seed `{seed}` is not an unsigned integer"));
                None
            }
        };
    }
    if s == "remote" {
        return Some(ScorerSpec::Remote);
    }
    problems.push(format!("scorer `{s}` is not scripted:<file>, random:<seed> or remote"));
    None
}

/// Prompting setup shared by `prompt` and the remote scorer.
struct PromptSetup {
    spec: PromptSpec,
    template: PromptTemplate,
}

fn prompt_setup(task: Task, lang: &str, e: &EndpointArgs, problems: &mut Problems) -> Option<PromptSetup> {
    let template = match &e.template {
        None => Some(PromptTemplate::default()),
        Some(p) => PromptTemplate::load(p).map_err(|err| problems.push(err.to_string())).ok(),
    };
    let spec = if e.shots == 0 {
        Some(PromptSpec::zero_shot(task, lang))
    } else {
        match &e.train {
            None => {
                problems.push("--shots > 0 needs --train");
                None
            }
            Some(p) if !p.is_file() => {
                problems.push(format!("training file `{}` does not exist", p.display()));
                None
            }
            Some(p) => match read_records::<Record>(p) {
                Ok(train) => PromptSpec::few_shot(task, lang, &train, e.shots)
                    .map_err(|err| problems.push(err.to_string()))
                    .ok(),
                Err(err) => {
                    problems.push(format!("{err:#}"));
                    None
                }
            },
        }
    };
    Some(PromptSetup {
        spec: spec?,
        template: template?,
    })
}

fn client(e: &EndpointArgs, problems: &mut Problems) -> Option<LlmClient> {
    let Some(url) = &e.endpoint else {
        problems.push("--endpoint is required");
        return None;
    };
    LlmClient::from_env(url, &e.api_key_env, Duration::from_secs(e.timeout))
        .map_err(|err| problems.push(err.to_string()))
        .ok()
}

struct DecodeArgs {
    input: PathBuf,
    out: PathBuf,
    scorer: String,
    model: ModelArgs,
    max_len: usize,
    masking: bool,
    details: Option<PathBuf>,
    endpoint: EndpointArgs,
}

#[derive(Serialize)]
struct DetailLine<'a> {
    #[serde(skip_serializing_if = "Option::is_none")]
    id: Option<&'a str>,
    #[serde(flatten)]
    result: Option<&'a DecodeResult>,
    #[serde(skip_serializing_if = "Option::is_none")]
    error: Option<String>,
}

fn decode(a: DecodeArgs) -> Outcome {
    let mut problems = Problems::default();
    problems.file(&a.input, "input");
    problems.out_dir(&a.out, "output");
    if let Some(d) = &a.details {
        problems.out_dir(d, "details");
    }
    if a.max_len == 0 {
        problems.push("--max-len must be positive");
    }
    let cfg = load_schema(a.model.schema.schema.as_deref(), &mut problems);
    let source = vocab_source(&a.model.vocab, &mut problems);
    let spec = scorer_spec(&a.scorer, &mut problems);
    let remote = match spec {
        Some(ScorerSpec::Remote) => {
            let c = client(&a.endpoint, &mut problems);
            let p = prompt_setup(a.model.task, "en", &a.endpoint, &mut problems);
            c.zip(p)
        }
        _ => None,
    };
    let records: Option<Vec<Record>> = if a.input.is_file() {
        read_records(&a.input).map_err(|e| problems.push(format!("{e:#}"))).ok()
    } else {
        None
    };
    let script = match &spec {
        Some(ScorerSpec::Scripted(p)) if p.is_file() => std::fs::read_to_string(p)
            .map_err(|e| problems.push(format!("scorer script `{}`: {e}", p.display())))
            .ok(),
        _ => None,
    };
    let (Some(cfg), Some(records), Some(spec)) = (cfg, records, spec) else {
        return check(problems);
    };

    // whitespace vocabularies must also cover the words a script emits
    let script_texts: Vec<&str> = script
        .iter()
        .flat_map(|s| s.lines())
        .filter(|l| !l.starts_with('#'))
        .filter_map(|l| l.split_once('\t').map(|(_, p)| p))
        .filter(|p| !p.starts_with("ids:"))
        .collect();
    let vocab = match load_vocab(&source, &cfg, records.iter().map(|r| r.text.as_str()).chain(script_texts)) {
        Ok(v) => Some(v),
        Err(e) => {
            problems.push(e);
            None
        }
    };
    let grammar = vocab.as_ref().and_then(|v| {
        Grammar::new(&cfg, v.as_ref(), a.model.task)
            .map_err(|e| problems.push(format!("schema and vocabulary do not fit: {e}")))
            .ok()
    });
    let scorer: Option<Box<dyn Scorer>> = vocab.as_ref().and_then(|v| match &spec {
        ScorerSpec::Scripted(p) => ScriptedScorer::parse(script.as_deref().unwrap_or_default(), v.as_ref())
            .map(|s| Box::new(s) as Box<dyn Scorer>)
            .map_err(|e| problems.push(format!("scorer script `{}`: {e}", p.display())))
            .ok(),
        ScorerSpec::Random(seed) => Some(Box::new(SeededRandomScorer::new(*seed, v.size())) as Box<dyn Scorer>),
        ScorerSpec::Remote => remote.map(|(client, setup)| remote_scorer(client, setup, cfg.clone(), a.endpoint.model.clone(), v.clone())),
    });
    check(problems)?;
    let (vocab, grammar, scorer) = (vocab.expect("validated"), grammar.expect("validated"), scorer.expect("validated"));

    let mut items = Vec::with_capacity(records.len());
    let mut item_errors = Vec::new();
    for r in &records {
        match build_input(&r.text, a.model.task, &cfg) {
            Ok(input) => items.push(DecodeItem { id: r.id.clone(), input }),
            Err(e) => item_errors.push((r.id.clone(), e.to_string())),
        }
    }
    let constraints: Vec<_> = items
        .iter()
        .map(|it| grammar.for_sentence(&it.input.sentence, vocab.as_ref(), a.model.mode))
        .collect();
    let decoder = Decoder::new(
        &cfg,
        vocab.as_ref(),
        DecodeOptions {
            max_len: a.max_len,
            masking: a.masking,
        },
    );
    let results = if matches!(spec, ScorerSpec::Remote) {
        rayon::ThreadPoolBuilder::new()
            .num_threads(a.endpoint.max_in_flight.max(1))
            .build()
            .map_err(anyhow::Error::from)?
            .install(|| decoder.batch_decode(scorer.as_ref(), &constraints, &items))
    } else {
        decoder.batch_decode(scorer.as_ref(), &constraints, &items)
    };

    let mut by_id: std::collections::HashMap<&str, Result<&DecodeResult, String>> = std::collections::HashMap::new();
    for (it, r) in items.iter().zip(&results) {
        by_id.insert(it.id.as_str(), r.as_ref().map_err(|e| e.to_string()));
    }
    for (id, e) in &item_errors {
        by_id.insert(id.as_str(), Err(e.clone()));
    }
    let mut preds = Vec::with_capacity(records.len());
    let mut details = Vec::with_capacity(records.len());
    let mut failures = 0;
    for r in &records {
        let res = by_id.remove(r.id.as_str()).unwrap_or_else(|| Err("duplicate id".into()));
        let tuples = match &res {
            Ok(d) => {
                for diag in &d.diagnostics {
                    emit("decode", &r.id, diag);
                }
                d.tuples.iter().cloned().collect()
            }
            Err(e) => {
                failures += 1;
                emit("decode", &r.id, serde_json::json!({"kind": "error", "message": e}));
                Vec::new()
            }
        };
        preds.push(Record {
            id: r.id.clone(),
            text: r.text.clone(),
            language: r.language.clone(),
            tuples,
        });
        details.push(DetailLine {
            id: res.is_err().then_some(r.id.as_str()),
            result: res.as_ref().ok().copied(),
            error: res.err(),
        });
    }
    write_records(&a.out, &preds)?;
    if let Some(d) = &a.details {
        write_records(d, &details)?;
    }
    let mut rc = RunConfig::new("decode");
    rc.task = Some(a.model.task.name().to_string());
    rc.mode = Some(a.model.mode.to_string());
    rc.schema = a.model.schema.schema.clone();
    rc.vocab = Some(a.model.vocab.clone());
    rc.scorer = Some(a.scorer.clone());
    rc.max_len = Some(a.max_len);
    rc.masking = Some(a.masking);
    rc.inputs = vec![a.input.clone()];
    rc.outputs = std::iter::once(a.out.clone()).chain(a.details.clone()).collect();
    if matches!(spec, ScorerSpec::Remote) {
        rc.endpoint = a.endpoint.endpoint.clone();
        rc.model = Some(a.endpoint.model.clone());
        rc.shots = Some(a.endpoint.shots);
    }
    save_provenance(&a.out, &rc)?;
    if failures > 0 {
        return Err(anyhow!("{failures} of {} sentences failed to decode", records.len()).into());
    }
    eprintln!("decoded {} sentences", records.len());
    Ok(())
}

fn remote_scorer(
    client: LlmClient,
    setup: PromptSetup,
    cfg: SchemaConfig,
    model: String,
    vocab: Arc<dyn Vocabulary>,
) -> Box<dyn Scorer> {
    let task = setup.spec.task;
    Box::new(RemoteScorer::new(vocab, move |item: &DecodeItem| {
        let prompt = build_prompt(&setup.spec, &item.input.sentence, &cfg, &setup.template).map_err(|e| e.to_string())?;
        let reply = client.complete(&ChatRequest::user(&model, prompt)).map_err(|e| e.to_string())?;
        Ok(clean_reply(&reply.text, task, &cfg))
    }))
}

#[derive(Serialize)]
struct EvalOutput {
    runs: Vec<EvalReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    f1_aggregate: Option<RunAggregate>,
}

fn prf_row(label: &str, p: &Prf) -> String {
    format!(
        "{label:<10}{:>9.4}{:>9.4}{:>9.4}{:>8}{:>8}{:>8}",
        p.precision, p.recall, p.f1, p.tp, p.pred_count, p.gold_count
    )
}

fn eval(preds: &[PathBuf], gold: &Path, task: Task, report: Option<&Path>, json: bool) -> Outcome {
    let mut problems = Problems::default();
    for p in preds {
        problems.file(p, "prediction file");
    }
    problems.file(gold, "gold file");
    if let Some(r) = report {
        problems.out_dir(r, "report");
    }
    check(problems)?;

    let gold_records: Vec<Record> = read_records(gold)?;
    let mut runs = Vec::with_capacity(preds.len());
    for p in preds {
        let pred: Vec<Record> = read_records(p)?;
        runs.push(score_records(&pred, &gold_records, task).with_context(|| format!("scoring {}", p.display()))?);
    }
    let f1_aggregate = if runs.len() >= 2 {
        Some(aggregate(&runs.iter().map(|r| r.overall.f1).collect::<Vec<_>>()).map_err(anyhow::Error::from)?)
    } else {
        None
    };
    let output = EvalOutput { runs, f1_aggregate };
    if let Some(r) = report {
        write_json(r, &output)?;
    }
    if json {
        println!("{}", serde_json::to_string_pretty(&output).map_err(anyhow::Error::from)?);
        return Ok(());
    }
    let mut out = std::io::stdout().lock();
    let header = format!("{:<10}{:>9}{:>9}{:>9}{:>8}{:>8}{:>8}", "", "P", "R", "F1", "tp", "pred", "gold");
    for (i, (run, path)) in output.runs.iter().zip(preds).enumerate() {
        if output.runs.len() > 1 {
            writeln!(out, "run {} ({})", i + 1, path.display()).map_err(anyhow::Error::from)?;
        }
        writeln!(out, "task {}", task.name()).map_err(anyhow::Error::from)?;
        writeln!(out, "{header}").map_err(anyhow::Error::from)?;
        writeln!(out, "{}", prf_row("all", &run.overall)).map_err(anyhow::Error::from)?;
        if run.by_language.len() > 1 {
            for (lang, p) in &run.by_language {
                writeln!(out, "{}", prf_row(lang, p)).map_err(anyhow::Error::from)?;
            }
        }
    }
    if let Some(agg) = &output.f1_aggregate {
        writeln!(out, "F1 over {} runs: {:.4} ± {:.4} (95% CI)", agg.runs.len(), agg.mean, agg.half_width)
            .map_err(anyhow::Error::from)?;
    }
    Ok(())
}

#[derive(Serialize)]
struct PromptLine<'a> {
    id: &'a str,
    prompt: String,
}

fn prompt(
    input: Option<&Path>,
    sentence: Option<&str>,
    task: Task,
    lang: &str,
    schema: Option<&Path>,
    e: &EndpointArgs,
    out: Option<&Path>,
) -> Outcome {
    let mut problems = Problems::default();
    if input.is_none() && sentence.is_none() {
        problems.push("one of --in or --sentence is required");
    }
    if let Some(p) = input {
        problems.file(p, "input");
    }
    let cfg = load_schema(schema, &mut problems);
    let setup = prompt_setup(task, lang, e, &mut problems);
    let client = if e.endpoint.is_some() {
        match out {
            None => problems.push("--endpoint needs --out for the predictions"),
            Some(o) => problems.out_dir(o, "output"),
        }
        client(e, &mut problems)
    } else {
        None
    };
    check(problems)?;
    let (cfg, setup) = (cfg.expect("validated"), setup.expect("validated"));

    let records: Vec<Record> = match (input, sentence) {
        (Some(p), _) => read_records(p)?,
        (None, Some(s)) => vec![Record {
            id: "sentence".into(),
            text: s.to_string(),
            language: lang.to_string(),
            tuples: vec![],
        }],
        (None, None) => unreachable!("validated"),
    };
    let mut prompts = Vec::with_capacity(records.len());
    for r in &records {
        prompts.push(build_prompt(&setup.spec, &r.text, &cfg, &setup.template).map_err(anyhow::Error::from)?);
    }

    let Some(client) = client else {
        if sentence.is_some() {
            println!("{}", prompts[0]);
        } else {
            let mut stdout = std::io::stdout().lock();
            for (r, p) in records.iter().zip(prompts) {
                let line = serde_json::to_string(&PromptLine { id: &r.id, prompt: p }).map_err(anyhow::Error::from)?;
                writeln!(stdout, "{line}").map_err(anyhow::Error::from)?;
            }
        }
        return Ok(());
    };

    let out = out.expect("validated");
    let reqs: Vec<ChatRequest> = prompts.into_iter().map(|p| ChatRequest::user(&e.model, p)).collect();
    let replies = client.complete_many(&reqs, e.max_in_flight.max(1));
    let mut preds = Vec::with_capacity(records.len());
    let mut failures = 0;
    for (r, reply) in records.iter().zip(replies) {
        let tuples = match reply {
            Ok(reply) => {
                let parsed = parse_reply(&reply.text, task, &cfg);
                for d in &parsed.diagnostics {
                    emit("prompt", &r.id, d);
                }
                parsed.tuples.into_iter().collect()
            }
            Err(err) => {
                failures += 1;
                emit("prompt", &r.id, serde_json::json!({"kind": "error", "message": err.to_string()}));
                Vec::new()
            }
        };
        preds.push(Record {
            id: r.id.clone(),
            text: r.text.clone(),
            language: r.language.clone(),
            tuples,
        });
    }
    write_records(out, &preds)?;
    let mut rc = RunConfig::new("prompt");
    rc.task = Some(task.name().to_string());
    rc.schema = schema.map(Path::to_path_buf);
    rc.inputs = input.map(Path::to_path_buf).into_iter().collect();
    rc.outputs = vec![out.to_path_buf()];
    rc.endpoint = e.endpoint.clone();
    rc.model = Some(e.model.clone());
    rc.shots = Some(e.shots);
    rc.language = Some(lang.to_string());
    save_provenance(out, &rc)?;
    if failures > 0 {
        bail_failure(failures, records.len())?;
    }
    Ok(())
}

fn bail_failure(failures: usize, total: usize) -> anyhow::Result<()> {
    bail!("{failures} of {total} requests failed")
}

fn explain(prefix: &str, sentence: &str, m: &ModelArgs) -> Outcome {
    let mut problems = Problems::default();
    let cfg = load_schema(m.schema.schema.as_deref(), &mut problems);
    let source = vocab_source(&m.vocab, &mut problems);
    check(problems)?;
    let cfg = cfg.expect("validated");
    let mut problems = Problems::default();
    let vocab = load_vocab(&source, &cfg, [sentence, prefix]).map_err(|e| Failure::Config(vec![e]))?;
    let grammar = Grammar::new(&cfg, vocab.as_ref(), m.task)
        .map_err(|e| problems.push(format!("schema and vocabulary do not fit: {e}")))
        .ok();
    check(problems)?;
    let grammar = grammar.expect("validated");

    let ids = vocab.encode(prefix);
    if ids.contains(&vocab.unk_id()) {
        return Err(anyhow!("prefix contains text outside the vocabulary").into());
    }
    let sc = grammar.for_sentence(sentence, vocab.as_ref(), m.mode);
    let state = DecoderState::from_tokens(&ids, grammar.markers());
    let pieces: Vec<&str> = ids.iter().map(|&t| vocab.piece(t).unwrap_or("?")).collect();
    println!("prefix tokens: {}", if pieces.is_empty() { "(none)".into() } else { pieces.join(" ") });
    println!("task: {}  mode: {}", m.task.name(), m.mode);
    let (row, cands) = sc.explain(&state).map_err(|e| anyhow!("{e}"))?;
    println!("row: {row:?} {row}");
    let mut names: Vec<String> = cands
        .allowed
        .iter()
        .map(|&t| vocab.piece(t).unwrap_or("?").to_string())
        .collect();
    if cands.allow_eos {
        names.push(vocab.piece(vocab.eos_id()).unwrap_or("</s>").to_string());
    }
    println!("candidates ({}): {}", names.len(), names.join(" "));
    if m.mode == ConstraintMode::Bag {
        let span = state.current_span().unwrap_or_default();
        if !span.is_empty() {
            println!(
                "current span: {}",
                span.iter().map(|&t| vocab.piece(t).unwrap_or("?")).collect::<Vec<_>>().join(" ")
            );
        }
    }
    Ok(())
}
