use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use svs_core::corpus::{generate_corpus, tokens_from_text, tokens_to_text, Corpus, Split};
use svs_core::metrics::{self, EvalPair, Reference, ALIGNMENT_NOTE};
use svs_core::model::AcousticModel;
use svs_core::score::score_to_tokens;
use svs_core::training::{validate_examples, Checkpoint, Example, LossLog, TrainError, Trainer};
use svs_core::{write_atomic, AcousticFeatureSequence, MusicalScore, PhonemeLexicon, FRAME_SHIFT_S};

use crate::config::{RunConfig, UsageError};
use crate::SplitArg;

pub const CONFIG_FILE: &str = "config.toml";
pub const LOSS_LOG_FILE: &str = "loss_log.tsv";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";

/// `song.feat` -> `song.tokens.tsv`
fn sidecar(features: &Path) -> PathBuf {
    features.with_extension("tokens.tsv")
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn load_lexicon(path: Option<&Path>) -> Result<PhonemeLexicon> {
    match path {
        Some(p) => PhonemeLexicon::parse(&read_text(p)?).with_context(|| format!("lexicon {}", p.display())),
        None => Ok(PhonemeLexicon::builtin()),
    }
}

fn check_vocab(checkpoint: &[String], lexicon: &PhonemeLexicon) -> Result<()> {
    let ours = lexicon.vocab();
    if checkpoint == ours {
        return Ok(());
    }
    let at = checkpoint.iter().zip(ours).position(|(a, b)| a != b);
    match at {
        Some(i) => bail!(
            "phoneme vocabulary mismatch at id {i}: checkpoint has '{}', lexicon has '{}'",
            checkpoint[i],
            ours[i]
        ),
        None => bail!(
            "phoneme vocabulary mismatch: checkpoint has {} phonemes, lexicon has {}",
            checkpoint.len(),
            ours.len()
        ),
    }
}

fn load_model(path: &Path) -> Result<(AcousticModel, Vec<String>)> {
    let ckpt = Checkpoint::load(path).with_context(|| format!("loading {}", path.display()))?;
    let model = AcousticModel::from_parameters(ckpt.config.model.clone(), ckpt.params)?;
    Ok((model, ckpt.vocab))
}

pub fn gen_data(cfg: &RunConfig, songs: usize, out: &Path) -> Result<()> {
    if songs == 0 {
        return Err(UsageError("--songs must be at least 1".into()).into());
    }
    let oracle = cfg.oracle_config();
    oracle.validate().map_err(|e| UsageError(e.to_string()))?;
    let manifest = generate_corpus(songs, cfg.seed, &oracle, out)?;
    println!("{}", manifest.path().display());
    Ok(())
}

pub fn train(cfg: RunConfig, resume: Option<&Path>) -> Result<()> {
    let manifest = cfg
        .manifest
        .clone()
        .ok_or_else(|| UsageError("train needs --manifest or `manifest` in the config".into()))?;
    let requested = cfg.train_config();
    requested.validate().map_err(|e| UsageError(e.to_string()))?;

    let corpus = Corpus::load(&manifest).with_context(|| format!("loading {}", manifest.display()))?;
    let vocab = corpus.lexicon.vocab();
    let (mut trainer, effective) = match resume {
        Some(path) => {
            let ckpt = Checkpoint::load(path).with_context(|| format!("loading {}", path.display()))?;
            check_vocab(&ckpt.vocab, &corpus.lexicon)?;
            let mut stored = ckpt.config.clone();
            stored.total_steps = requested.total_steps;
            if stored != requested {
                log::warn!("resuming: settings other than total_steps are taken from the checkpoint");
            }
            let mut trainer = Trainer::from_checkpoint(ckpt)?;
            trainer.set_total_steps(requested.total_steps);
            log::info!("resuming at step {}", trainer.step());
            let effective = cfg.with_train(trainer.config());
            (trainer, effective)
        }
        None => (Trainer::new(requested)?, cfg),
    };

    let utterances = corpus.split(Split::Train);
    let examples: Vec<Example<'_>> = utterances
        .iter()
        .map(|u| Example {
            tokens: &u.tokens,
            features: &u.features,
        })
        .collect();
    let mut problems = Vec::new();
    for (u, ex) in utterances.iter().zip(&examples) {
        if let Err(TrainError::Validation(list)) = validate_examples(&[*ex], &trainer.config().model) {
            problems.extend(list.into_iter().map(|p| format!("{}: {}", u.name, p.trim_start_matches("example 0: "))));
        }
    }
    if examples.is_empty() {
        problems.push("training split is empty".into());
    }
    if !problems.is_empty() {
        for p in &problems {
            eprintln!("  {p}");
        }
        bail!("{} training utterance problem(s); nothing trained", problems.len());
    }

    let run_dir = &effective.run_dir;
    fs::create_dir_all(run_dir).with_context(|| format!("creating {}", run_dir.display()))?;
    write_atomic(&run_dir.join(CONFIG_FILE), effective.to_toml().as_bytes())?;
    let log_path = run_dir.join(LOSS_LOG_FILE);
    let mut log = if resume.is_some() {
        LossLog::append(&log_path)?
    } else {
        LossLog::create(&log_path)?
    };
    let every = effective.log_every.max(1);
    trainer.run(&examples, |r| {
        log.write(r)?;
        if r.step % every == 0 {
            log::info!("step {} lr {:.3e} loss {:.5}", r.step, r.lr, r.loss.total);
        }
        Ok(())
    })?;
    let ckpt_path = run_dir.join(CHECKPOINT_FILE);
    trainer.checkpoint(vocab).save(&ckpt_path)?;
    println!("{}", ckpt_path.display());
    Ok(())
}

pub fn synth(score: &Path, checkpoint: &Path, out: &Path, lexicon: Option<&Path>) -> Result<()> {
    let lexicon = load_lexicon(lexicon)?;
    let (model, vocab) = load_model(checkpoint)?;
    check_vocab(&vocab, &lexicon)?;
    let score: MusicalScore = read_text(score)?
        .parse()
        .with_context(|| format!("parsing {}", score.display()))?;
    let tokens = score_to_tokens(&score, &lexicon, FRAME_SHIFT_S)?;
    let synthesis = model.synthesize(&tokens)?;
    synthesis.features.write(out)?;
    let timed = tokens.with_durations(synthesis.durations.frames)?;
    write_atomic(&sidecar(out), tokens_to_text(&timed, &lexicon).as_bytes())?;
    println!("{}\t{} frames", out.display(), synthesis.features.frames());
    Ok(())
}

/// One prediction/reference pair, owned.
struct Item {
    name: String,
    pred: AcousticFeatureSequence,
    gt: AcousticFeatureSequence,
    durations: Option<(Vec<usize>, Vec<usize>)>,
}

impl Item {
    fn pair(&self) -> EvalPair<'_> {
        EvalPair {
            name: &self.name,
            pred: &self.pred,
            gt: &self.gt,
            durations: self.durations.as_ref().map(|(p, g)| (p.as_slice(), g.as_slice())),
        }
    }
}

pub fn eval_model(manifest: &Path, checkpoint: &Path, split: SplitArg, out: &Path) -> Result<()> {
    let corpus = Corpus::load(manifest).with_context(|| format!("loading {}", manifest.display()))?;
    let (model, vocab) = load_model(checkpoint)?;
    check_vocab(&vocab, &corpus.lexicon)?;
    let mut items = Vec::new();
    let mut failed = 0;
    for u in &corpus.utterances {
        let wanted = match split {
            SplitArg::All => true,
            SplitArg::Train => u.split == Split::Train,
            SplitArg::Test => u.split == Split::Test,
        };
        if !wanted {
            continue;
        }
        let reference = Reference {
            name: &u.name,
            tokens: &u.tokens,
            features: &u.features,
        };
        match metrics::predict(&model, &reference) {
            Ok(p) => items.push(Item {
                name: u.name.clone(),
                pred: p.aligned,
                gt: u.features.clone(),
                durations: u.tokens.durations().map(|gt| (p.durations, gt.to_vec())),
            }),
            Err(e) => {
                log::error!("{}: {e}", u.name);
                failed += 1;
            }
        }
    }
    write_report(items, failed, vec![ALIGNMENT_NOTE.to_string()], out)
}

pub fn eval_pairs(paths: &[PathBuf], lexicon: Option<&Path>, out: &Path) -> Result<()> {
    let lexicon = load_lexicon(lexicon)?;
    let mut items = Vec::new();
    let mut failed = 0;
    for pair in paths.chunks_exact(2) {
        let (pred, gt) = (&pair[0], &pair[1]);
        match load_pair(pred, gt, &lexicon) {
            Ok(item) => items.push(item),
            Err(e) => {
                log::error!("{} vs {}: {e:#}", pred.display(), gt.display());
                failed += 1;
            }
        }
    }
    write_report(items, failed, Vec::new(), out)
}

fn load_pair(pred: &Path, gt: &Path, lexicon: &PhonemeLexicon) -> Result<Item> {
    let read = |p: &Path| AcousticFeatureSequence::read(p).with_context(|| format!("reading {}", p.display()));
    let durations_of = |p: &Path| -> Result<Option<Vec<usize>>> {
        let path = sidecar(p);
        if !path.exists() {
            return Ok(None);
        }
        let tokens = tokens_from_text(&read_text(&path)?, lexicon)
            .map_err(|e| anyhow::anyhow!("{}: {e}", path.display()))?;
        Ok(tokens.durations().map(<[usize]>::to_vec))
    };
    let durations = match (durations_of(pred)?, durations_of(gt)?) {
        (Some(p), Some(g)) => Some((p, g)),
        (None, None) => None,
        _ => {
            log::warn!("{}: token sidecar on one side only; skipping duration metrics", gt.display());
            None
        }
    };
    let name = gt
        .file_stem()
        .map_or_else(|| gt.display().to_string(), |s| s.to_string_lossy().into_owned());
    Ok(Item {
        name,
        pred: read(pred)?,
        gt: read(gt)?,
        durations,
    })
}

/// Scores each pair alone first so one bad pair only drops itself.
fn write_report(items: Vec<Item>, mut failed: usize, notes: Vec<String>, out: &Path) -> Result<()> {
    let mut good = Vec::with_capacity(items.len());
    for item in items {
        match metrics::evaluate(&[item.pair()]) {
            Ok(_) => good.push(item),
            Err(e) => {
                log::error!("{}: {e}", item.name);
                failed += 1;
            }
        }
    }
    if good.is_empty() {
        bail!("no pair could be evaluated ({failed} failed)");
    }
    if failed > 0 {
        log::warn!("{failed} pair(s) skipped");
    }
    let pairs: Vec<EvalPair<'_>> = good.iter().map(Item::pair).collect();
    let mut report = metrics::evaluate(&pairs)?;
    report.notes = notes;
    let pred_mgc: Vec<&[f64]> = good.iter().map(|i| i.pred.mgc()).collect();
    let gt_mgc: Vec<&[f64]> = good.iter().map(|i| i.gt.mgc()).collect();
    let (gv_pred, gv_gt) = (metrics::gv(&pred_mgc)?, metrics::gv(&gt_mgc)?);

    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let text = report.to_text();
    write_atomic(&out.join("report.txt"), text.as_bytes())?;
    write_atomic(&out.join("utterances.tsv"), report.utterance_table().as_bytes())?;
    write_atomic(&out.join("gv.tsv"), gv_pred.to_table().as_bytes())?;
    write_atomic(&out.join("gv_reference.tsv"), gv_gt.to_table().as_bytes())?;
    print!("{text}");
    Ok(())
}
