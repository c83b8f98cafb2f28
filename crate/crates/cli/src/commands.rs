//! Subcommand implementations. Each one delegates to a single library stage.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use log::info;
use ndarray::ArrayView4;
use rayon::prelude::*;
use serde::Deserialize;
use serde_json::json;

use stkit::alignment::{
    join_records, parse_textgrid, read_jsonl, read_units_jsonl, read_words_jsonl, validate_pair, WordsRecord,
};
use stkit::interleaver::{interleave_pair, write_sequences_jsonl, InterleavedSequence};
use stkit::packer::{corpus_stats, pack_ffd, read_corpus, read_corpus_for, write_corpus, write_dump};
use stkit::quantizer::{dedup_consecutive, fit_kmeans, quantize, Codebook, FeatureMatrix};
use stkit::scoring::{attention_modality_profile, evaluate, probe_label_accuracy, wer_detail, NGramScorer};
use stkit::synthcorpus::{files, generate, generate_dialogs, write_corpus_dir, write_dialogs, MetaRecord, SynthConfig};
use stkit::templates::{
    build_template, read_dialogs_jsonl, read_training_jsonl, setup_sequence_seeded, write_training_jsonl, EvalKind,
    PretrainScheme, TemplateKind, TrainingSample,
};
use stkit::tokenizer::Lexicon;
use stkit::vocab::{format_hash, Modality, VocabLayout, DEFAULT_UNIT_COUNT, MIN_TEXT_SIZE};
use stkit::AlignedPair;

use crate::options::{required, Options};
use crate::{Command, ConfigError};

pub const LAYOUT_FILE: &str = "layout.json";
pub const LEXICON_FILE: &str = "lexicon.json";
const MIN_CAPACITY: usize = 16;

pub fn run(command: Command, opts: &Options) -> Result<()> {
    let o = opts.clone().with_defaults();
    info!("{} resolved config {}", command.name(), serde_json::to_string(&o)?);
    match command {
        Command::Synth => synth(&o),
        Command::Quantize => quantize_cmd(&o),
        Command::Align => align(&o),
        Command::Vocab => vocab(&o),
        Command::Interleave => interleave(&o),
        Command::Template => template(&o),
        Command::Pack => pack(&o),
        Command::TrainScorer => train_scorer(&o),
        Command::EvalPpl => eval_ppl(&o),
        Command::Wer => wer_cmd(&o),
        Command::Probe => probe(&o),
        Command::AttnProfile => attn_profile(&o),
        Command::Stats => stats(&o),
    }
}

fn config(msg: impl Into<String>) -> anyhow::Error {
    ConfigError(msg.into()).into()
}

fn open(path: &Path) -> Result<BufReader<File>> {
    Ok(BufReader::new(File::open(path).with_context(|| format!("cannot open {}", path.display()))?))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).with_context(|| format!("cannot create {}", path.display()))?))
}

/// Runs `f` on a writer for `out`, or on stdout without one.
fn with_output(out: Option<&PathBuf>, f: impl FnOnce(&mut dyn Write) -> Result<()>) -> Result<()> {
    match out {
        Some(p) => {
            let mut w = create(p)?;
            f(&mut w)?;
            w.flush()?;
        }
        None => {
            let mut w = std::io::stdout().lock();
            f(&mut w)?;
            w.flush()?;
        }
    }
    Ok(())
}

fn write_json_line(w: &mut dyn Write, value: &serde_json::Value) -> Result<()> {
    serde_json::to_writer(&mut *w, value)?;
    writeln!(w)?;
    Ok(())
}

fn read_words(path: &Path) -> Result<Vec<WordsRecord>> {
    if !path.is_dir() {
        return read_words_jsonl(open(path)?).with_context(|| format!("reading {}", path.display()));
    }
    let mut grids: Vec<PathBuf> =
        std::fs::read_dir(path)?.map(|e| e.map(|e| e.path())).collect::<std::io::Result<_>>()?;
    grids.retain(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("textgrid")));
    grids.sort();
    grids
        .iter()
        .map(|p| {
            let id = p.file_stem().unwrap_or_default().to_string_lossy().into_owned();
            let words = parse_textgrid(&std::fs::read(p)?).with_context(|| format!("reading {}", p.display()))?;
            Ok(WordsRecord { id, words })
        })
        .collect()
}

fn load_pairs(o: &Options) -> Result<Vec<AlignedPair>> {
    let words = read_words(required(&o.words, "words")?)?;
    let units_path = required(&o.units, "units")?;
    let units = read_units_jsonl(open(units_path)?).with_context(|| format!("reading {}", units_path.display()))?;
    Ok(join_records(words, units)?)
}

fn load_vocab(o: &Options) -> Result<(VocabLayout, Lexicon)> {
    let dir = required(&o.vocab, "vocab")?;
    let layout =
        VocabLayout::load(dir.join(LAYOUT_FILE)).with_context(|| format!("loading layout from {}", dir.display()))?;
    let lexicon = Lexicon::load(dir.join(LEXICON_FILE), &layout)
        .with_context(|| format!("loading lexicon from {}", dir.display()))?;
    Ok((layout, lexicon))
}

fn probability(p: f64, flag: &str) -> Result<f64> {
    if !(0.0..=1.0).contains(&p) {
        return Err(config(format!("--{flag} must be in [0, 1], got {p}")));
    }
    Ok(p)
}

fn scheme(o: &Options) -> Result<PretrainScheme> {
    required(&o.setup, "setup")?.parse::<PretrainScheme>().map_err(|e| config(e.to_string()))
}

fn synth(o: &Options) -> Result<()> {
    let out = required(&o.out, "out")?;
    let d = SynthConfig::default();
    let cfg = SynthConfig {
        seed: *required(&o.seed, "seed")?,
        n_samples: o.n_samples.unwrap_or(d.n_samples),
        prosody_offset: o.prosody_offset.unwrap_or(d.prosody_offset),
        noise: o.noise.unwrap_or(d.noise),
        codebook_size: o.unit_count.map_or(d.codebook_size, |k| k as usize),
        ..d
    };
    cfg.validate().map_err(|e| config(e.to_string()))?;
    let corpus = generate(&cfg)?;
    write_corpus_dir(&corpus, out)?;
    let dialogs = generate_dialogs(&cfg)?;
    write_dialogs(&dialogs, &out.join(files::DIALOGS))?;
    info!("wrote {} utterances and {} dialogs to {}", corpus.utterances.len(), dialogs.len(), out.display());
    Ok(())
}

fn quantize_cmd(o: &Options) -> Result<()> {
    let features = FeatureMatrix::load(required(&o.features, "features")?)?;
    let codebook_path = required(&o.codebook, "codebook")?;
    let out = required(&o.out, "out")?;
    let codebook = match o.k {
        Some(k) => {
            let fit = fit_kmeans(&features, k, *required(&o.max_iters, "max-iters")?, *required(&o.seed, "seed")?)?;
            info!("k-means: {} iterations, converged {}, inertia {}", fit.iterations, fit.converged, fit.inertia());
            fit.codebook.save(codebook_path)?;
            fit.codebook
        }
        None => Codebook::load(codebook_path)?,
    };
    let units = quantize(&features, &codebook)?;
    let meta: Vec<MetaRecord> = match &o.meta {
        Some(p) => read_jsonl(open(p)?)?,
        None => vec![MetaRecord { id: "features".into(), n_frames: units.len(), label: 0 }],
    };
    let total: usize = meta.iter().map(|m| m.n_frames).sum();
    if total != units.len() {
        bail!("metadata covers {total} frames but the feature file has {}", units.len());
    }
    with_output(Some(out), |w| {
        let mut pos = 0;
        for m in &meta {
            let span = &units[pos..pos + m.n_frames];
            let span = if o.dedup { dedup_consecutive(span) } else { span.to_vec() };
            write_json_line(w, &json!({ "id": m.id, "units": span }))?;
            pos += m.n_frames;
        }
        Ok(())
    })
}

fn align(o: &Options) -> Result<()> {
    let pairs = load_pairs(o)?;
    let mut failed = 0;
    with_output(o.out.as_ref(), |w| {
        for p in &pairs {
            let report = validate_pair(p);
            failed += usize::from(!report.passed());
            let violations: Vec<_> =
                report.violations.iter().map(|v| json!({ "code": v.code, "detail": v.detail })).collect();
            write_json_line(
                w,
                &json!({ "id": p.id, "n_units": p.units.len(), "words": p.words, "unit_spans": p.unit_spans,
                         "violations": violations }),
            )?;
        }
        Ok(())
    })?;
    if failed > 0 {
        bail!("{failed} of {} pairs failed validation", pairs.len());
    }
    info!("{} pairs aligned", pairs.len());
    Ok(())
}

fn vocab(o: &Options) -> Result<()> {
    let words = read_words(required(&o.words, "words")?)?;
    let out = required(&o.out, "out")?;
    let distinct: std::collections::BTreeSet<&str> =
        words.iter().flat_map(|r| r.words.iter().map(|w| w.word.as_str())).collect();
    // four control ids plus the out-of-vocabulary id
    let text_size = o.text_size.unwrap_or((distinct.len() as u32 + 5).max(MIN_TEXT_SIZE));
    let layout =
        VocabLayout::new(text_size, o.unit_count.unwrap_or(DEFAULT_UNIT_COUNT)).map_err(|e| config(e.to_string()))?;
    let lexicon = Lexicon::build(distinct, &layout).map_err(|e| config(e.to_string()))?;
    std::fs::create_dir_all(out)?;
    layout.save(out.join(LAYOUT_FILE))?;
    lexicon.save(out.join(LEXICON_FILE))?;
    println!(
        "{}",
        json!({ "text_size": text_size, "unit_count": layout.unit_count(), "vocab_size": layout.vocab_size(),
                "words": lexicon.len(), "layout_hash": format_hash(layout.hash()) })
    );
    Ok(())
}

fn interleave(o: &Options) -> Result<()> {
    let pairs = load_pairs(o)?;
    let (layout, lex) = load_vocab(o)?;
    let scheme = scheme(o)?;
    let seed = *required(&o.seed, "seed")?;
    let p = probability(*required(&o.insert_prob, "insert-prob")?, "insert-prob")?;
    let seqs: Vec<InterleavedSequence> = pairs
        .par_iter()
        .map(|pair| -> Result<InterleavedSequence> {
            Ok(match scheme {
                PretrainScheme::Unified => interleave_pair(pair, seed, p, &layout, &lex)?.sequence,
                _ => setup_sequence_seeded(pair, scheme, p, seed, &layout, &lex)?,
            })
        })
        .collect::<Result<_>>()?;
    with_output(o.out.as_ref(), |w| Ok(write_sequences_jsonl(w, &seqs)?))?;
    info!("{} sequences, {} tokens", seqs.len(), seqs.iter().map(|s| s.len()).sum::<usize>());
    Ok(())
}

fn template(o: &Options) -> Result<()> {
    let dialogs = read_dialogs_jsonl(open(required(&o.dialogs, "dialogs")?)?)?;
    let (layout, lex) = load_vocab(o)?;
    let kind: TemplateKind = required(&o.template, "template")?
        .parse()
        .map_err(|e: stkit::templates::TemplateError| config(e.to_string()))?;
    let samples: Vec<TrainingSample> =
        dialogs.par_iter().map(|d| build_template(kind, d, &layout, &lex)).collect::<Result<_, _>>()?;
    with_output(o.out.as_ref(), |w| Ok(write_training_jsonl(w, &samples)?))?;
    info!("{} samples, {} trained tokens", samples.len(), samples.iter().map(|s| s.mask_count()).sum::<usize>());
    Ok(())
}

fn read_samples(o: &Options, layout: &VocabLayout) -> Result<Vec<TrainingSample>> {
    if o.training.is_none() && o.sequences.is_none() {
        return Err(config("one of --training or --sequences is required"));
    }
    let mut samples = Vec::new();
    if let Some(p) = &o.training {
        samples.extend(read_training_jsonl(open(p)?).with_context(|| format!("reading {}", p.display()))?);
    }
    if let Some(p) = &o.sequences {
        let recs =
            stkit::interleaver::read_sequences_jsonl(open(p)?).with_context(|| format!("reading {}", p.display()))?;
        samples.extend(recs.into_iter().map(|r| TrainingSample {
            id: r.id,
            loss_mask: vec![true; r.ids.len()],
            ids: r.ids,
            regions: Vec::new(),
        }));
    }
    for s in &samples {
        if let Some(&bad) = s.ids.iter().find(|&&id| id >= layout.vocab_size()) {
            bail!("sample {:?} has id {bad} outside the vocabulary of {}", s.id, layout.vocab_size());
        }
    }
    Ok(samples)
}

fn pack(o: &Options) -> Result<()> {
    let (layout, _) = load_vocab(o)?;
    let capacity = *required(&o.capacity, "capacity")?;
    if capacity < MIN_CAPACITY || capacity > u32::MAX as usize {
        return Err(config(format!("--capacity must be in [{MIN_CAPACITY}, {}], got {capacity}", u32::MAX)));
    }
    let out = required(&o.out, "out")?;
    let samples = read_samples(o, &layout)?;
    let bins = pack_ffd(&samples, capacity)?;
    let checksum = write_corpus(&bins, &layout, capacity, out)?;
    let stats = corpus_stats(&read_corpus_for(out, &layout)?);
    println!(
        "{}",
        json!({ "capacity": capacity, "n_bins": stats.n_bins, "n_docs": stats.n_docs,
                "total_tokens": stats.total_tokens, "masked_tokens": stats.masked_tokens,
                "fill_ratio": stats.fill_ratio, "checksum": format_hash(checksum) })
    );
    Ok(())
}

fn train_scorer(o: &Options) -> Result<()> {
    let (layout, _) = load_vocab(o)?;
    let order = *required(&o.order, "order")?;
    let add_k = *required(&o.add_k, "add-k")?;
    let out = required(&o.out, "out")?;
    let scorer = match (&o.corpus, &o.sequences) {
        (Some(_), Some(_)) => return Err(config("--corpus and --sequences are mutually exclusive")),
        (Some(p), None) => NGramScorer::train_corpus(&read_corpus_for(p, &layout)?, &layout, order, add_k)
            .map_err(|e| config(e.to_string()))?,
        (None, Some(_)) => {
            let samples = read_samples(o, &layout)?;
            let mut s = NGramScorer::new(&layout, order, add_k).map_err(|e| config(e.to_string()))?;
            for x in &samples {
                s.add_document(&x.ids, None)?;
            }
            s
        }
        (None, None) => return Err(config("one of --corpus or --sequences is required")),
    };
    scorer.save(out)?;
    info!("scorer: order {order}, {} tokens, {} entries", scorer.n_tokens(), scorer.n_entries());
    Ok(())
}

fn eval_ppl(o: &Options) -> Result<()> {
    let (layout, lex) = load_vocab(o)?;
    let scorer = NGramScorer::load(required(&o.scorer, "scorer")?)?;
    if scorer.layout().hash() != layout.hash() {
        return Err(config(format!(
            "scorer layout {} does not match vocabulary layout {}",
            format_hash(scorer.layout().hash()),
            format_hash(layout.hash())
        )));
    }
    let kinds = EvalKind::parse_list(required(&o.kinds, "kinds")?).map_err(|e| config(e.to_string()))?;
    let scheme = scheme(o)?;
    let pairs = load_pairs(o)?;
    let report = evaluate(&scorer, &pairs, &kinds, scheme.eval_junction(), &lex)?;
    with_output(o.out.as_ref(), |w| Ok(w.write_all(report.to_text().as_bytes())?))?;
    if let Some(p) = &o.csv {
        std::fs::write(p, report.to_csv()).with_context(|| format!("writing {}", p.display()))?;
    }
    Ok(())
}

fn read_lines(path: &Path) -> Result<Vec<String>> {
    Ok(open(path)?.lines().collect::<std::io::Result<_>>()?)
}

fn wer_cmd(o: &Options) -> Result<()> {
    let refs = read_lines(required(&o.reference, "reference")?)?;
    let hyps = read_lines(required(&o.hypothesis, "hypothesis")?)?;
    if refs.len() != hyps.len() {
        bail!("{} reference lines but {} hypothesis lines", refs.len(), hyps.len());
    }
    let (mut s, mut d, mut i, mut n) = (0, 0, 0, 0);
    for (line, (r, h)) in refs.iter().zip(&hyps).enumerate() {
        let r: Vec<&str> = r.split_whitespace().collect();
        let h: Vec<&str> = h.split_whitespace().collect();
        let det = wer_detail(&r, &h).with_context(|| format!("line {}", line + 1))?;
        (s, d, i, n) = (s + det.substitutions, d + det.deletions, i + det.insertions, n + det.ref_len);
    }
    if n == 0 {
        bail!("references contain no words");
    }
    println!(
        "{}",
        json!({ "utterances": refs.len(), "substitutions": s, "deletions": d, "insertions": i,
                "reference_words": n, "wer": (s + d + i) as f64 / n as f64 })
    );
    Ok(())
}

fn probe(o: &Options) -> Result<()> {
    let units_path = required(&o.units, "units")?;
    let units = read_units_jsonl(open(units_path)?)?;
    let meta: Vec<MetaRecord> = read_jsonl(open(required(&o.meta, "meta")?)?)?;
    let labels: std::collections::HashMap<&str, usize> = meta.iter().map(|m| (m.id.as_str(), m.label)).collect();
    let data: Vec<(Vec<u32>, usize)> = units
        .into_iter()
        .map(|u| match labels.get(u.id.as_str()) {
            Some(&l) => Ok((u.units, l)),
            None => Err(anyhow::anyhow!("no label for utterance {:?}", u.id)),
        })
        .collect::<Result<_>>()?;
    let f = probability(*required(&o.train_fraction, "train-fraction")?, "train-fraction")?;
    let n_train = (data.len() as f64 * f).floor() as usize;
    let (train, test) = data.split_at(n_train);
    let acc = probe_label_accuracy(train, test)?;
    let n_classes = meta.iter().map(|m| m.label).collect::<std::collections::BTreeSet<_>>().len();
    println!(
        "{}",
        json!({ "train": train.len(), "test": test.len(), "classes": n_classes, "accuracy": acc,
                "chance": 1.0 / n_classes.max(1) as f64 })
    );
    Ok(())
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct AttentionFile {
    /// `[layers, heads, targets, sources]`.
    shape: [usize; 4],
    weights: Vec<f64>,
    tags: Vec<Modality>,
}

fn attn_profile(o: &Options) -> Result<()> {
    let path = required(&o.attention, "attention")?;
    let a: AttentionFile =
        serde_json::from_reader(open(path)?).with_context(|| format!("reading {}", path.display()))?;
    let view = ArrayView4::from_shape(a.shape, &a.weights).context("weights do not match shape")?;
    let profile = attention_modality_profile(view, &a.tags)?;
    let (layers, targets, _) = profile.dim();
    let rows: Vec<Vec<[f64; 3]>> = (0..layers)
        .map(|l| (0..targets).map(|t| [profile[[l, t, 0]], profile[[l, t, 1]], profile[[l, t, 2]]]).collect())
        .collect();
    with_output(o.out.as_ref(), |w| {
        write_json_line(w, &json!({ "columns": ["speech", "text", "other"], "profile": rows }))
    })
}

fn stats(o: &Options) -> Result<()> {
    let path = required(&o.corpus, "corpus")?;
    let corpus = match &o.vocab {
        Some(_) => read_corpus_for(path, &load_vocab(o)?.0)?,
        None => read_corpus(path)?,
    };
    if o.dump {
        return with_output(o.out.as_ref(), |w| Ok(write_dump(&corpus, w)?));
    }
    let s = corpus_stats(&corpus);
    with_output(o.out.as_ref(), |w| {
        write_json_line(
            w,
            &json!({ "layout_hash": format_hash(corpus.layout_hash), "capacity": corpus.capacity,
                     "n_bins": s.n_bins, "n_docs": s.n_docs, "total_tokens": s.total_tokens,
                     "masked_tokens": s.masked_tokens, "fill_ratio": s.fill_ratio }),
        )
    })
}
