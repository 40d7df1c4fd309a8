// SPDX-License-Identifier: MIT OR Apache-2.0

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use olakit::container::{f64_bytes, read_f64s, Container};
use olakit::mapfile::{map_container, map_file_name, StoredMap};
use olakit::norm::{aggregate_contributions, trace_contributions};
use olakit::ola::{decompose, head_average, Order};
use olakit::preprocess::{augment, AugmentConfig, PreprocessConfig};
use olakit::probe::{
    align_example, collect_labels, params_container, params_from_container, parse_label_file, train_probe,
    transfer_eval, LabelRecord, LabelSet, Task, TaskMetrics, TrainConfig,
};
use olakit::render::{render_heatmap, RenderConfig, ValueMapping};
use olakit::rng::stage_rng;
use olakit::similarity::{format_report, knn_classify, retrieve, PairReport};
use olakit::synth::{attach_projections, synth_tag_labels, synth_trace, text_id, Coupling, SynthConfig, TagSignal};
use olakit::trace::{decode_trace, trace_container, validate_trace, AttentionTrace};
use olakit::{Error, LabeledExample, Matrix, OlaStack};
use rand::Rng;
use rayon::prelude::*;

use crate::args::*;
use crate::corpus::{input_files, invalid, load, read_container, stacks, write_atomic, Item};

pub fn run(command: Command) -> Result<()> {
    match command {
        Command::Synth(a) => synth(a),
        Command::Validate(a) => validate(a),
        Command::Decompose(a) => cmd_decompose(a),
        Command::Retrieve(a) => cmd_retrieve(a),
        Command::Classify(a) => classify(a),
        Command::Contrib(a) => contrib(a),
        Command::ProbeTrain(a) => probe_train(a),
        Command::ProbeEval(a) => probe_eval(a),
        Command::Render(a) => render(a),
    }
}

fn synth(a: SynthArgs) -> Result<()> {
    let cfg = SynthConfig {
        num_layers: a.layers,
        num_heads: a.heads,
        min_len: a.min_len,
        max_len: a.max_len,
        causal: a.causal,
        logit_scale: a.logit_scale,
        noise: a.noise,
        noise_growth: a.noise_growth,
    };
    cfg.validate()?;
    if a.tags.is_some_and(|k| k < 2) {
        return Err(Error::Config("--tags needs at least 2 tags".into()).into());
    }
    if a.model.is_empty() || a.model.contains(['/', '\\']) {
        return Err(Error::Config("--model must be a non-empty name without path separators".into()).into());
    }
    let coupling = if a.independent { Coupling::Independent } else { Coupling::Shared };
    let signal = a.tags.map(|num_tags| TagSignal {
        num_tags,
        strength: a.tag_strength,
    });
    (0..a.texts).into_par_iter().try_for_each(|i| -> Result<()> {
        let text = text_id(i);
        let mut trace = synth_trace(&cfg, a.seed, &a.model, &text, coupling, signal)?;
        if let (Some(d), Some(e)) = (a.hidden_dim, a.head_dim) {
            attach_projections(&mut trace, d, e, a.arch, a.seed)?;
        }
        let path = a.out.join(format!("{}_{text}.olat", a.model));
        write_atomic(&path, &trace_container(&trace)?.to_bytes())
    })?;
    if let Some(k) = a.tags {
        let mut out = String::new();
        for r in synth_tag_labels(&cfg, a.seed, a.texts, k) {
            out.push_str(&label_line(&r));
        }
        write_atomic(&a.out.join("labels.tsv"), out.as_bytes())?;
    }
    eprintln!("wrote {} traces for model {} to {}", a.texts, a.model, a.out.display());
    Ok(())
}

fn label_line(r: &LabelRecord) -> String {
    match &r.annotation {
        olakit::probe::Annotation::Tags(tags) => format!("{}\t{}\t{}\n", r.text_id, r.task, tags.join(" ")),
        _ => unreachable!("synthetic labels are tags"),
    }
}

fn validate(a: ValidateArgs) -> Result<()> {
    let files = input_files(&a.input)?;
    let outcomes: Vec<Result<String, String>> = files
        .par_iter()
        .map(|p| check_file(p).map_err(|e| format!("{e:#}")))
        .collect();
    let mut bad = 0;
    for (p, outcome) in files.iter().zip(&outcomes) {
        match outcome {
            Ok(summary) => println!("ok\t{}\t{summary}", p.display()),
            Err(why) => {
                bad += 1;
                println!("invalid\t{}\t{why}", p.display());
            }
        }
    }
    if bad > 0 {
        return Err(invalid(format!("{bad} of {} files failed validation", files.len())));
    }
    Ok(())
}

fn check_file(p: &Path) -> Result<String> {
    let c = read_container(p)?;
    match c.get("kind") {
        Some("trace") | None => {
            let t = decode_trace(&c)?;
            let report = validate_trace(&t);
            if let Some(first) = report.violations.first() {
                let more = report.violations.len() - 1;
                anyhow::bail!("{first} (+{more} more)");
            }
            let h = &t.header;
            Ok(format!("trace {} {} layers={} heads={} len={}", h.model_id, h.text_id, h.num_layers, h.num_heads, h.seq_len))
        }
        Some("map") => {
            let m: StoredMap<f64> = olakit::mapfile::map_from_container(&c)?;
            if !m.map.matrix.as_slice().iter().all(|v| v.is_finite()) {
                anyhow::bail!("non-finite map entry");
            }
            Ok(format!("map {} {} order={}", m.map.model_id, m.map.text_id, m.map.order))
        }
        Some("probe") => {
            let p: olakit::ProbeParams = params_from_container(&c)?;
            Ok(format!("probe task={} checksum={}", p.task, p.checksum()))
        }
        Some("contrib") => {
            contrib_aggregate(&c)?;
            Ok("contribution maps".into())
        }
        Some(other) => anyhow::bail!("unknown container kind {other:?}"),
    }
}

fn traces(items: Vec<(PathBuf, Item)>) -> Result<Vec<(PathBuf, AttentionTrace)>> {
    items
        .into_iter()
        .map(|(p, item)| match item {
            Item::Trace(t) => Ok((p, t)),
            _ => Err(invalid(format!("{} is not a trace", p.display()))),
        })
        .collect()
}

fn cmd_decompose(a: DecomposeArgs) -> Result<()> {
    let mut orders = a.orders.0;
    orders.push(Order::Rollout);
    orders.sort();
    orders.dedup();
    let traces = traces(load(&a.input)?)?;
    // Everything is computed before the first write so a failing trace
    // leaves the output directory untouched.
    let outputs = traces
        .par_iter()
        .map(|(p, t)| {
            let layers = head_average::<f64>(t);
            let maps = decompose(&layers, &orders, &t.header.model_id, &t.header.text_id)
                .with_context(|| p.display().to_string())?;
            Ok(maps
                .into_iter()
                .map(|map| {
                    let name = map_file_name(&map);
                    let stored = StoredMap {
                        map,
                        causal: t.header.causal,
                        num_layers: t.num_layers(),
                    };
                    (name, map_container(&stored).to_bytes())
                })
                .collect::<Vec<_>>())
        })
        .collect::<Result<Vec<_>>>()?;
    let outputs: Vec<_> = outputs.into_iter().flatten().collect();
    outputs
        .par_iter()
        .try_for_each(|(name, bytes)| write_atomic(&a.out.join(name), bytes))?;
    eprintln!("wrote {} map files to {}", outputs.len(), a.out.display());
    Ok(())
}

fn model_of(stacks: &[OlaStack], role: &str) -> Result<String> {
    let first = stacks.first().ok_or(Error::Empty("stack list"))?;
    if let Some(other) = stacks.iter().find(|s| s.model_id != first.model_id) {
        return Err(Error::MixedIds(format!("{role} holds models {} and {}", first.model_id, other.model_id)).into());
    }
    Ok(first.model_id.clone())
}

fn emit(text: &str, out: Option<&Path>) -> Result<()> {
    print!("{text}");
    if let Some(path) = out {
        write_atomic(path, text.as_bytes())?;
    }
    Ok(())
}

fn cmd_retrieve(a: RetrieveArgs) -> Result<()> {
    let pre = a.preprocess.config();
    let ks = a.k.0;
    let source = load(&a.source)?;
    let target = load(&a.target)?;
    let mut rows = Vec::new();
    for &order in &a.order.0 {
        let gallery = stacks(&source, &[order], &pre)?;
        let queries = stacks(&target, &[order], &pre)?;
        rows.push(PairReport {
            source_model: model_of(&gallery, "source")?,
            target_model: model_of(&queries, "target")?,
            order,
            report: retrieve(&queries, &gallery, &ks)?,
        });
    }
    emit(&format_report(&rows, &ks), a.out.as_deref())
}

fn classify(a: ClassifyArgs) -> Result<()> {
    let pre = a.preprocess.config();
    let train = stacks(&load(&a.train)?, &a.orders.0, &pre)?;
    let test = stacks(&load(&a.test)?, &a.orders.0, &pre)?;
    // Class labels are text indices in sorted text-id order.
    let mut texts: Vec<String> = train.iter().map(|s| s.text_id.clone()).collect();
    texts.sort();
    texts.dedup();
    let index: HashMap<&str, usize> = texts.iter().enumerate().map(|(i, t)| (t.as_str(), i)).collect();
    let label = |s: &OlaStack| -> Result<usize> {
        index
            .get(s.text_id.as_str())
            .copied()
            .ok_or_else(|| Error::MissingGroundTruth(s.text_id.clone()).into())
    };
    let labelled = |v: Vec<OlaStack>| -> Result<Vec<(OlaStack, usize)>> {
        v.into_iter()
            .map(|s| {
                let l = label(&s)?;
                Ok((s, l))
            })
            .collect()
    };
    let (train, test) = (labelled(train)?, labelled(test)?);
    let report = knn_classify(&train, &test, a.k)?;
    let mut out = String::new();
    writeln!(out, "accuracy\t{:.6}", report.accuracy)?;
    writeln!(out, "num_train\t{}", train.len())?;
    writeln!(out, "num_test\t{}", test.len())?;
    writeln!(out, "k\t{}", a.k)?;
    writeln!(out, "true_text\tpredicted_text\tcount")?;
    for (t, p, n) in &report.confusions {
        writeln!(out, "{}\t{}\t{n}", texts[*t], texts[*p])?;
    }
    emit(&out, a.out.as_deref())
}

const CONTRIB_KIND: &str = "contrib";

fn contrib(a: ContribArgs) -> Result<()> {
    let traces = traces(load(&a.input)?)?;
    let outputs = traces
        .par_iter()
        .map(|(p, t)| {
            let per_layer = trace_contributions::<f64>(t).with_context(|| p.display().to_string())?;
            let total = aggregate_contributions(&per_layer)?;
            let mut c = Container::new();
            c.set("kind", CONTRIB_KIND);
            c.set("dtype", "f64");
            c.set("model_id", &t.header.model_id);
            c.set("text_id", &t.header.text_id);
            if let Some(arch) = t.header.architecture {
                c.set("arch", arch);
            }
            c.set("num_layers", per_layer.len());
            c.set("rows", total.matrix.rows());
            c.set("cols", total.matrix.cols());
            for m in &per_layer {
                c.add_section(&format!("layer.{}", m.layer), f64_bytes(m.matrix.as_slice()));
            }
            c.add_section("aggregate", f64_bytes(total.matrix.as_slice()));
            let name = format!("{}_{}_contrib.olat", t.header.model_id, t.header.text_id);
            Ok((name, c.to_bytes()))
        })
        .collect::<Result<Vec<_>>>()?;
    outputs
        .par_iter()
        .try_for_each(|(name, bytes)| write_atomic(&a.out.join(name), bytes))?;
    eprintln!("wrote {} contribution files to {}", outputs.len(), a.out.display());
    Ok(())
}

/// The aggregate map of a contribution file, with its file-name stem.
fn contrib_aggregate(c: &Container) -> Result<(String, Matrix)> {
    let rows: usize = c.parse("rows")?;
    let cols: usize = c.parse("cols")?;
    let m = Matrix::from_vec(rows, cols, read_f64s("aggregate", c.require_section("aggregate")?)?)?;
    Ok((format!("{}_{}_contrib", c.require("model_id")?, c.require("text_id")?), m))
}

fn read_labels(path: &Path, task: Task) -> Result<Vec<LabelRecord>> {
    let text = std::fs::read_to_string(path)
        .map_err(Error::Io)
        .with_context(|| format!("reading {}", path.display()))?;
    let records: Vec<LabelRecord> = parse_label_file(&text)
        .with_context(|| path.display().to_string())?
        .into_iter()
        .filter(|r| r.task == task)
        .collect();
    if records.is_empty() {
        return Err(invalid(format!("{} has no {task} labels", path.display())));
    }
    Ok(records)
}

/// Pairs every stack with its text's annotation; unlabelled texts are
/// skipped.
fn examples(stacks: Vec<OlaStack>, task: Task, records: &[LabelRecord], labels: &LabelSet) -> Result<Vec<LabeledExample>> {
    let mut by_text: HashMap<&str, &LabelRecord> = HashMap::new();
    for r in records {
        if by_text.insert(&r.text_id, r).is_some() {
            return Err(invalid(format!("text {:?} is labelled twice for {task}", r.text_id)));
        }
    }
    let out: Vec<LabeledExample> = stacks
        .into_iter()
        .filter_map(|s| {
            let r = by_text.get(s.text_id.as_str())?;
            Some(align_example(s, task, &r.annotation, labels))
        })
        .collect::<olakit::Result<_>>()?;
    if out.is_empty() {
        return Err(invalid("no input text has a label"));
    }
    Ok(out)
}

fn probe_train(a: ProbeTrainArgs) -> Result<()> {
    let pre = a.preprocess.config();
    let stacks = stacks(&load(&a.input)?, &a.orders.0, &pre)?;
    model_of(&stacks, "input")?;
    let records = read_labels(&a.labels, a.task)?;
    let mut labels = LabelSet::new();
    collect_labels(&records, &mut labels);
    let mut data = examples(stacks, a.task, &records, &labels)?;
    let base = data.len();
    for copy in 0..a.augment_copies {
        let seed: u64 = stage_rng(a.seed, &format!("probe-augment/{copy}")).random();
        let cfg = AugmentConfig {
            seed,
            ..Default::default()
        };
        let extra = data[..base]
            .par_iter()
            .map(|e| {
                Ok(LabeledExample {
                    stack: augment(&e.stack, &cfg)?,
                    ..e.clone()
                })
            })
            .collect::<olakit::Result<Vec<_>>>()?;
        data.extend(extra);
    }
    let cfg = TrainConfig {
        epochs: a.epochs,
        learning_rate: a.lr,
        batch_size: a.batch_size,
        hidden: a.hidden,
        seed: a.seed,
    };
    let (params, log) = train_probe(&data, labels, &cfg)?;
    write_atomic(&a.out, &params_container(&params).to_bytes())?;
    let mut tsv = String::from("epoch\tloss\n");
    for (i, l) in log.epoch_loss.iter().enumerate() {
        writeln!(tsv, "{}\t{l:.9}", i + 1)?;
    }
    write_atomic(&log_path(&a.out), tsv.as_bytes())?;
    eprintln!(
        "trained {} probe on {} examples ({base} labelled texts); final loss {:.6}; checksum {}",
        a.task,
        data.len(),
        log.epoch_loss.last().copied().unwrap_or(f64::NAN),
        params.checksum()
    );
    Ok(())
}

/// `<dir>/<stem>.log.tsv` next to a parameter file.
fn log_path(params: &Path) -> PathBuf {
    let stem = params.file_stem().map_or_else(|| "probe".into(), |s| s.to_string_lossy().into_owned());
    params.with_file_name(format!("{stem}.log.tsv"))
}

fn metrics_tsv(m: &TaskMetrics, examples: usize, checksum: &str) -> String {
    let mut out = format!("task\t{}\n", m.task);
    let fields = [("accuracy", m.accuracy), ("f1", m.f1), ("uas", m.uas), ("las", m.las)];
    for (name, v) in fields {
        if let Some(v) = v {
            out.push_str(&format!("{name}\t{v:.6}\n"));
        }
    }
    out.push_str(&format!("support\t{}\nexamples\t{examples}\nchecksum\t{checksum}\n", m.support));
    out
}

fn probe_eval(a: ProbeEvalArgs) -> Result<()> {
    let bytes = std::fs::read(&a.params)
        .map_err(Error::Io)
        .with_context(|| format!("reading {}", a.params.display()))?;
    let container = Container::from_bytes(&bytes).with_context(|| a.params.display().to_string())?;
    let stored = container.require("checksum")?.to_owned();
    let params: olakit::ProbeParams = params_from_container(&container).with_context(|| a.params.display().to_string())?;
    let pre = PreprocessConfig {
        target_size: params.size,
        outlier_k: a.outlier_k,
        ..Default::default()
    };
    let stacks = stacks(&load(&a.target)?, &params.channel_orders, &pre)?;
    model_of(&stacks, "target")?;
    let records = read_labels(&a.labels, params.task)?;
    let data = examples(stacks, params.task, &records, &params.labels)?;
    let metrics = transfer_eval(&params, &data)?;
    if a.assert_frozen {
        assert_frozen(&a.params, &bytes, &stored, &params)?;
    }
    emit(&metrics_tsv(&metrics, data.len(), &stored), a.out.as_deref())
}

/// Fails with [`Error::Frozen`] unless both the in-memory parameters and the
/// file on disk still match what was loaded.
fn assert_frozen(path: &Path, loaded: &[u8], stored: &str, params: &olakit::ProbeParams) -> Result<()> {
    let after = params.checksum();
    let on_disk = std::fs::read(path).map_err(Error::Io)?;
    let after = if after != stored {
        after
    } else if on_disk != loaded {
        Container::from_bytes(&on_disk)
            .ok()
            .and_then(|c| c.get("checksum").map(str::to_owned))
            .unwrap_or_else(|| "unreadable".into())
    } else {
        return Ok(());
    };
    Err(Error::Frozen {
        before: stored.to_owned(),
        after,
    }
    .into())
}

fn render(a: RenderArgs) -> Result<()> {
    let cfg = RenderConfig {
        scale: a.scale,
        value_mapping: if a.log1p { ValueMapping::Log1p } else { ValueMapping::Linear },
        zero_max_row: a.zero_max_row,
    };
    let items = load(&a.input)?;
    let mut jobs: BTreeMap<String, Matrix> = BTreeMap::new();
    for (p, item) in items {
        match item {
            Item::Map(m) => {
                jobs.insert(format!("{}_{}_{}", m.map.model_id, m.map.text_id, m.map.order), m.map.matrix);
            }
            Item::Trace(t) => {
                let layers = head_average::<f64>(&t);
                let maps = decompose(&layers, &a.orders.0, &t.header.model_id, &t.header.text_id)
                    .with_context(|| p.display().to_string())?;
                for m in maps {
                    jobs.insert(format!("{}_{}_{}", m.model_id, m.text_id, m.order), m.matrix);
                }
            }
            Item::Other(c) if c.get("kind") == Some(CONTRIB_KIND) => {
                let (name, m) = contrib_aggregate(&c).with_context(|| p.display().to_string())?;
                jobs.insert(name, m);
            }
            Item::Other(c) => {
                return Err(invalid(format!(
                    "{}: cannot render {:?} files",
                    p.display(),
                    c.get("kind").unwrap_or("")
                )))
            }
        }
    }
    let images = jobs
        .par_iter()
        .map(|(name, m)| {
            let mut png = Vec::new();
            render_heatmap(m, &cfg, &mut png).with_context(|| name.clone())?;
            Ok((format!("{name}.png"), png))
        })
        .collect::<Result<Vec<_>>>()?;
    images
        .par_iter()
        .try_for_each(|(name, png)| write_atomic(&a.out.join(name), png))?;
    eprintln!("wrote {} images to {}", images.len(), a.out.display());
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use olakit::probe::LabelSet;

    fn params() -> olakit::ProbeParams {
        olakit::ProbeParams::init(Task::Pos, LabelSet::from_names(["a", "b"]), vec![Order::Level(1)], 4, 3, 0).unwrap()
    }

    #[test]
    fn frozen_check_catches_memory_and_disk_changes() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.olat");
        let p = params();
        let bytes = params_container(&p).to_bytes();
        std::fs::write(&path, &bytes).unwrap();
        let sum = p.checksum();
        assert!(assert_frozen(&path, &bytes, &sum, &p).is_ok());

        let mut changed = p.clone();
        changed.proj_b[0] += 1.0;
        let err = assert_frozen(&path, &bytes, &sum, &changed).unwrap_err();
        assert!(matches!(err.downcast_ref::<Error>(), Some(Error::Frozen { .. })));

        std::fs::write(&path, params_container(&changed).to_bytes()).unwrap();
        let err = assert_frozen(&path, &bytes, &sum, &p).unwrap_err();
        match err.downcast_ref::<Error>() {
            Some(Error::Frozen { after, .. }) => assert_eq!(after, &changed.checksum()),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn log_sits_next_to_params() {
        assert_eq!(log_path(Path::new("out/probe.olat")), Path::new("out/probe.log.tsv"));
    }

    #[test]
    fn metrics_list_only_applicable_fields() {
        let m = TaskMetrics {
            task: Task::Dp,
            accuracy: None,
            f1: None,
            uas: Some(0.5),
            las: Some(0.25),
            support: 4,
        };
        assert_eq!(
            metrics_tsv(&m, 2, "abc"),
            "task\tdp\nuas\t0.500000\nlas\t0.250000\nsupport\t4\nexamples\t2\nchecksum\tabc\n"
        );
    }
}
