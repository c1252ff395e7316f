//! Subcommand drivers: dataset generation, training, evaluation and the
//! ablation sweep. Every artifact lands under the configured output
//! directory next to a manifest that reproduces the run.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::checkpoint::Checkpoint;
use crate::config::{DataSource, NoiseKind, RunConfig, Task};
use crate::encoders::impute_missing;
use crate::error::{Error, Result};
use crate::eval::RankResult;
use crate::graphdata::synthetic::{generate_ea, generate_kgc};
use crate::graphdata::{
    load_attribute_triples, load_pairs, write_attribute_triples, write_pairs, AlignmentSet, KnowledgeGraph,
    ModalityFeatureStore, NamePolicy, Split, Vocab,
};
use crate::kgc::{evaluate, train_kgc, KgcConfig, KgcFusion, KgcModel};
use crate::mmea::{train_mmea, EaData, EaModel, EaPhase, EaTrained};
use crate::modality::Modality;

pub const CODE_VERSION: &str = concat!("mmkg ", env!("CARGO_PKG_VERSION"));

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Command {
    Gen,
    TrainKgc,
    TrainEa,
    EvalKgc,
    EvalEa,
    Ablate,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Gen => "gen",
            Command::TrainKgc => "train-kgc",
            Command::TrainEa => "train-ea",
            Command::EvalKgc => "eval-kgc",
            Command::EvalEa => "eval-ea",
            Command::Ablate => "ablate",
        }
    }
}

impl FromStr for Command {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [
            Command::Gen,
            Command::TrainKgc,
            Command::TrainEa,
            Command::EvalKgc,
            Command::EvalEa,
            Command::Ablate,
        ]
        .into_iter()
        .find(|c| c.name() == s)
        .ok_or_else(|| Error::Config(format!("unknown subcommand `{s}`")))
    }
}

/// Headline metrics and the files a run wrote.
#[derive(Clone, Debug, Default)]
pub struct RunReport {
    pub metrics: Option<RankResult>,
    pub files: Vec<PathBuf>,
}

pub fn run(cmd: Command, cfg: &RunConfig) -> Result<RunReport> {
    fs::create_dir_all(&cfg.out)?;
    let mut report = RunReport::default();
    let (name, effective) = match cmd {
        Command::Gen => (gen(cfg, &mut report)?, cfg.clone()),
        Command::TrainKgc => (train_kgc_cmd(cfg, &mut report)?, cfg.clone()),
        Command::TrainEa => (train_ea_cmd(cfg, &mut report)?, cfg.clone()),
        Command::Ablate => (ablate(cfg, &mut report)?, cfg.clone()),
        Command::EvalKgc => ("eval_manifest.cfg", eval_kgc_cmd(cfg, &mut report)?),
        Command::EvalEa => ("eval_manifest.cfg", eval_ea_cmd(cfg, &mut report)?),
    };
    write_file(&cfg.out.join(name), &manifest_text(cmd, &effective), &mut report)?;
    Ok(report)
}

/// Config echo with the command, seed and code version as comments; it
/// parses back into the same config. Evaluation echoes the checkpoint's
/// config into `eval_manifest.cfg`, every other command writes
/// `manifest.cfg`.
pub fn manifest_text(cmd: Command, cfg: &RunConfig) -> String {
    format!(
        "# command: {}\n# seed: {}\n# version: {CODE_VERSION}\n{}",
        cmd.name(),
        cfg.seed,
        cfg.to_text()
    )
}

fn write_file(path: &Path, body: &str, report: &mut RunReport) -> Result<()> {
    fs::write(path, body)?;
    report.files.push(path.to_path_buf());
    Ok(())
}

fn metrics_csv(rows: &[(&str, &RankResult)]) -> String {
    let mut s = String::from("split,queries,mrr,hits1,hits3,hits10\n");
    for (name, r) in rows {
        let _ = writeln!(
            s,
            "{name},{},{:.6},{:.6},{:.6},{:.6}",
            r.ranks.len(),
            r.mrr,
            r.hits1,
            r.hits3,
            r.hits10
        );
    }
    s
}

fn data_dir(cfg: &RunConfig) -> Result<&Path> {
    cfg.data_dir
        .as_deref()
        .ok_or_else(|| Error::Config("missing key `data.dir`".into()))
}

// ---- completion data ----

fn kgc_data(cfg: &RunConfig, seed: u64) -> Result<(KnowledgeGraph, Vec<ModalityFeatureStore>)> {
    let (kg, raw) = match cfg.source {
        DataSource::Synthetic => {
            let d = generate_kgc(&cfg.synth_kgc, seed)?;
            (d.kg, vec![d.visual, d.surface])
        }
        DataSource::Files => {
            let dir = data_dir(cfg)?;
            let vocab = Vocab::read(&dir.join("entities.txt"))?;
            let opt = |name: &str| Some(dir.join(name)).filter(|p| p.exists());
            let kg = KnowledgeGraph::load(
                &dir.join("train.tsv"),
                opt("valid.tsv").as_deref(),
                opt("test.tsv").as_deref(),
                Some(vocab),
                NamePolicy::Intern,
            )?;
            let stores = read_stores(dir, kg.num_entities())?;
            (kg, stores)
        }
    };
    let stores = raw.iter().map(|s| impute_missing(s, seed)).collect::<Result<_>>()?;
    Ok((kg, stores))
}

fn read_stores(dir: &Path, rows: usize) -> Result<Vec<ModalityFeatureStore>> {
    [(Modality::Visual, "visual.mmft"), (Modality::Surface, "surface.mmft")]
        .into_iter()
        .filter(|(_, f)| dir.join(f).exists())
        .map(|(m, f)| ModalityFeatureStore::read_mmft(&dir.join(f), m, rows))
        .collect()
}

fn feature_dims(stores: &[ModalityFeatureStore]) -> Vec<(Modality, usize)> {
    stores.iter().map(|s| (s.modality(), s.dim())).collect()
}

/// Splits worth reporting: every non-empty one, test first.
fn kgc_splits(kg: &KnowledgeGraph) -> Vec<(&'static str, Split)> {
    [("test", Split::Test), ("valid", Split::Valid), ("train", Split::Train)]
        .into_iter()
        .filter(|(_, s)| !kg.split(*s).is_empty())
        .collect()
}

fn kgc_metrics(
    model: &KgcModel,
    kg: &KnowledgeGraph,
    stores: &[ModalityFeatureStore],
    filtered: bool,
) -> Result<Vec<(&'static str, RankResult)>> {
    kgc_splits(kg)
        .into_iter()
        .map(|(name, split)| Ok((name, evaluate(model, kg, stores, split, filtered)?)))
        .collect()
}

fn write_metrics(path: &Path, results: &[(&str, RankResult)], report: &mut RunReport) -> Result<()> {
    let rows: Vec<(&str, &RankResult)> = results.iter().map(|(n, r)| (*n, r)).collect();
    write_file(path, &metrics_csv(&rows), report)?;
    report.metrics = results.first().map(|(_, r)| r.clone());
    Ok(())
}

fn train_kgc_cmd(cfg: &RunConfig, report: &mut RunReport) -> Result<&'static str> {
    let (kg, stores) = kgc_data(cfg, cfg.seed)?;
    let trained = train_kgc(&kg, &stores, &cfg.kgc, cfg.seed)?;
    let mut trace = String::from("epoch,loss,valid_mrr\n");
    for e in &trained.trace {
        let v = e.valid_mrr.map_or(String::new(), |v| format!("{v:.6}"));
        let _ = writeln!(trace, "{},{:.9},{v}", e.epoch, e.loss);
    }
    write_file(&cfg.out.join("train_trace.csv"), &trace, report)?;
    let ckpt = cfg.out.join("model.ckpt");
    Checkpoint::from_params(&cfg.to_text(), &trained.model.params).write(&ckpt)?;
    report.files.push(ckpt);
    let results = kgc_metrics(&trained.model, &kg, &stores, cfg.filtered)?;
    write_metrics(&cfg.out.join("metrics.csv"), &results, report)?;
    Ok("manifest.cfg")
}

/// Reads `model.ckpt` under the output directory; the model is rebuilt
/// from the config stored in the checkpoint.
fn load_checkpoint(cfg: &RunConfig, expected: Task) -> Result<(Checkpoint, RunConfig)> {
    let ck = Checkpoint::read(&cfg.out.join("model.ckpt"))?;
    let mut model_cfg = RunConfig::parse(&ck.config)?;
    model_cfg.out = cfg.out.clone();
    model_cfg.filtered = cfg.filtered;
    if model_cfg.task != expected {
        return Err(Error::Config("checkpoint was trained for the other task".into()));
    }
    Ok((ck, model_cfg))
}

fn eval_kgc_cmd(cfg: &RunConfig, report: &mut RunReport) -> Result<RunConfig> {
    let (ck, model_cfg) = load_checkpoint(cfg, Task::Kgc)?;
    let (kg, stores) = kgc_data(&model_cfg, model_cfg.seed)?;
    let mut model = KgcModel::new(
        &model_cfg.kgc,
        kg.num_entities(),
        kg.num_relations(),
        &feature_dims(&stores),
        model_cfg.seed,
    )?;
    ck.load_into(&mut model.params)?;
    let results = kgc_metrics(&model, &kg, &stores, cfg.filtered)?;
    write_metrics(&cfg.out.join("eval_metrics.csv"), &results, report)?;
    Ok(model_cfg)
}

// ---- alignment data ----

fn ea_data(cfg: &RunConfig) -> Result<EaData> {
    match cfg.source {
        DataSource::Synthetic => {
            let s = generate_ea(&cfg.synth_ea, cfg.seed)?;
            let stores = |g: &crate::graphdata::synthetic::EaGraph| vec![g.visual.clone(), g.surface.clone()];
            EaData::from_parts(
                (&s.left.kg, &s.left.attributes, stores(&s.left)),
                (&s.right.kg, &s.right.attributes, stores(&s.right)),
                s.alignment.clone(),
                cfg.relation_dim,
                cfg.attribute_dim,
                cfg.bow,
                cfg.seed,
            )
        }
        DataSource::Files => {
            let dir = data_dir(cfg)?;
            let side = |name: &str| -> Result<(KnowledgeGraph, Vec<(usize, String)>, Vec<ModalityFeatureStore>)> {
                let d = dir.join(name);
                let vocab = Vocab::read(&d.join("entities.txt"))?;
                let kg = KnowledgeGraph::load(&d.join("triples.tsv"), None, None, Some(vocab), NamePolicy::Intern)?;
                let attrs_path = d.join("attributes.tsv");
                let attrs = if attrs_path.exists() {
                    load_attribute_triples(&attrs_path, &kg.entities)?
                } else {
                    Vec::new()
                };
                let stores = read_stores(&d, kg.num_entities())?;
                Ok((kg, attrs, stores))
            };
            let (kg1, a1, s1) = side("kg1")?;
            let (kg2, a2, s2) = side("kg2")?;
            let alignment = AlignmentSet {
                seed: load_pairs(&dir.join("seed_pairs.tsv"), &kg1.entities, &kg2.entities)?,
                test: load_pairs(&dir.join("test_pairs.tsv"), &kg1.entities, &kg2.entities)?,
            };
            EaData::from_parts(
                (&kg1, &a1, s1),
                (&kg2, &a2, s2),
                alignment,
                cfg.relation_dim,
                cfg.attribute_dim,
                cfg.bow,
                cfg.seed,
            )
        }
    }
}

fn ea_feature_dims(data: &EaData) -> Vec<(Modality, usize)> {
    feature_dims(&data.stores1)
}

fn train_ea_cmd(cfg: &RunConfig, report: &mut RunReport) -> Result<&'static str> {
    let data = ea_data(cfg)?;
    let trained = train_mmea(&data, &cfg.ea, cfg.seed, cfg.iterative)?;
    write_ea_trace(cfg, &data, &trained, report)?;
    let ckpt = cfg.out.join("model.ckpt");
    Checkpoint::from_params(&cfg.to_text(), &trained.model.params).write(&ckpt)?;
    report.files.push(ckpt);
    let r = trained.evaluate(&data)?;
    write_metrics(&cfg.out.join("metrics.csv"), &[("test", r)], report)?;
    Ok("manifest.cfg")
}

fn write_ea_trace(cfg: &RunConfig, data: &EaData, t: &EaTrained, report: &mut RunReport) -> Result<()> {
    let mut trace = String::from("epoch,phase,loss,gmi,ecia,iir,valid_hits1,promoted\n");
    for e in &t.trace {
        let phase = match e.phase {
            EaPhase::Main => "main",
            EaPhase::Iterative => "iterative",
        };
        let v = e.valid_hits1.map_or(String::new(), |v| format!("{v:.6}"));
        let _ = writeln!(
            trace,
            "{},{phase},{:.9},{:.9},{:.9},{:.9},{v},{}",
            e.epoch, e.loss, e.gmi, e.ecia, e.iir, e.promoted
        );
    }
    write_file(&cfg.out.join("train_trace.csv"), &trace, report)?;
    if cfg.iterative {
        let truth: std::collections::HashSet<(usize, usize)> =
            data.alignment.seed.iter().chain(&data.alignment.test).copied().collect();
        let mut log = String::from("epoch\tleft\tright\tcorrect\n");
        let mut correct = 0;
        for p in &t.promotions {
            let ok = truth.contains(&(p.left, p.right));
            correct += ok as usize;
            let _ = writeln!(
                log,
                "{}\t{}\t{}\t{ok}",
                p.epoch,
                data.kg1.entities.name(p.left),
                data.kg2.entities.name(p.right)
            );
        }
        write_file(&cfg.out.join("promotions.tsv"), &log, report)?;
        let n = t.promotions.len();
        let precision = if n == 0 { String::new() } else { format!("{:.6}", correct as f64 / n as f64) };
        write_file(
            &cfg.out.join("promotion_summary.csv"),
            &format!("promoted,correct,precision\n{n},{correct},{precision}\n"),
            report,
        )?;
    }
    Ok(())
}

fn eval_ea_cmd(cfg: &RunConfig, report: &mut RunReport) -> Result<RunConfig> {
    let (ck, model_cfg) = load_checkpoint(cfg, Task::Ea)?;
    let data = ea_data(&model_cfg)?;
    let mut model = EaModel::new(
        &model_cfg.ea,
        data.kg1.num_entities(),
        data.kg2.num_entities(),
        &ea_feature_dims(&data),
        model_cfg.seed,
    )?;
    ck.load_into(&mut model.params)?;
    let (e1, e2) = model.embeddings(&data)?;
    let r = crate::eval::eval_ea(&e1, &e2, &data.alignment.test, model_cfg.ea.pool)?;
    write_metrics(&cfg.out.join("eval_metrics.csv"), &[("test", r)], report)?;
    Ok(model_cfg)
}

// ---- generation ----

fn gen(cfg: &RunConfig, report: &mut RunReport) -> Result<&'static str> {
    let dir = cfg.out.join("data");
    fs::create_dir_all(&dir)?;
    match cfg.task {
        Task::Kgc => {
            let d = generate_kgc(&cfg.synth_kgc, cfg.seed)?;
            let kg = &d.kg;
            kg.entities.write(&dir.join("entities.txt"))?;
            for (name, split) in [("train.tsv", Split::Train), ("valid.tsv", Split::Valid), ("test.tsv", Split::Test)] {
                crate::graphdata::write_triples(&dir.join(name), kg.split(split), &kg.entities, &kg.relations)?;
            }
            d.visual.write_mmft(&dir.join("visual.mmft"))?;
            d.surface.write_mmft(&dir.join("surface.mmft"))?;
        }
        Task::Ea => {
            let s = generate_ea(&cfg.synth_ea, cfg.seed)?;
            for (name, g) in [("kg1", &s.left), ("kg2", &s.right)] {
                let d = dir.join(name);
                fs::create_dir_all(&d)?;
                g.kg.entities.write(&d.join("entities.txt"))?;
                crate::graphdata::write_triples(&d.join("triples.tsv"), &g.kg.train, &g.kg.entities, &g.kg.relations)?;
                write_attribute_triples(&d.join("attributes.tsv"), &g.attributes, &g.kg.entities)?;
                g.visual.write_mmft(&d.join("visual.mmft"))?;
                g.surface.write_mmft(&d.join("surface.mmft"))?;
            }
            let (l, r) = (&s.left.kg.entities, &s.right.kg.entities);
            write_pairs(&dir.join("seed_pairs.tsv"), &s.alignment.seed, l, r)?;
            write_pairs(&dir.join("test_pairs.tsv"), &s.alignment.test, l, r)?;
        }
    }
    report.files.push(dir);
    Ok("manifest.cfg")
}

// ---- ablation ----

/// One row of the ablation table: a label and the completion config.
pub fn ablation_rows(cfg: &RunConfig) -> Vec<(String, KgcConfig)> {
    let base = cfg.kgc.clone();
    let mut rows = vec![("full".to_string(), base.clone())];
    for &(rho, eps) in &cfg.ablate.grid {
        let mut keys = cfg.noise.clone();
        keys.kind = NoiseKind::Gmnm;
        keys.rho = rho;
        keys.epsilon = eps;
        rows.push((format!("gmnm rho={rho} eps={eps}"), KgcConfig { noise: keys.build(Task::Kgc), ..base.clone() }));
    }
    for &v in &cfg.ablate.variants {
        rows.push((format!("fusion {v}"), KgcConfig { fusion: KgcFusion::Variant(v), ..base.clone() }));
    }
    rows.push(("only h^g".into(), KgcConfig { fusion: KgcFusion::StructureOnly, ..base.clone() }));
    for &p in &cfg.ablate.dropout {
        let mut keys = cfg.noise.clone();
        keys.kind = NoiseKind::Dropout;
        keys.dropout = p;
        rows.push((format!("dropout p={p}"), KgcConfig { noise: keys.build(Task::Kgc), ..base.clone() }));
    }
    let mut keys = cfg.noise.clone();
    keys.kind = NoiseKind::Off;
    rows.push(("no noise".into(), KgcConfig { noise: keys.build(Task::Kgc), ..base }));
    rows
}

/// Seed-mean metrics `[mrr, hits1, hits3, hits10]` for one completion
/// config; each seed regenerates synthetic data with that seed.
pub fn kgc_seed_mean(cfg: &RunConfig, kgc: &KgcConfig, seeds: usize) -> Result<[f64; 4]> {
    let mut sum = [0.0; 4];
    for i in 0..seeds {
        let seed = cfg.seed + i as u64;
        let (kg, stores) = kgc_data(cfg, seed)?;
        let trained = train_kgc(&kg, &stores, kgc, seed)?;
        let (_, split) = kgc_splits(&kg)[0];
        let r = evaluate(&trained.model, &kg, &stores, split, cfg.filtered)?;
        for (s, v) in sum.iter_mut().zip([r.mrr, r.hits1, r.hits3, r.hits10]) {
            *s += v / seeds as f64;
        }
    }
    Ok(sum)
}

fn ablate(cfg: &RunConfig, report: &mut RunReport) -> Result<&'static str> {
    let rows = ablation_rows(cfg);
    let mut results = Vec::with_capacity(rows.len());
    for (label, kgc) in &rows {
        results.push((label.clone(), kgc_seed_mean(cfg, kgc, cfg.ablate.seeds)?));
    }
    let mut csv = String::from("variant,mrr,hits1,hits3,hits10\n");
    let width = results.iter().map(|(l, _)| l.len()).max().unwrap_or(0).max(7);
    let mut table = format!(
        "{:width$}  {:>7}  {:>7}  {:>7}  {:>7}\n",
        "variant", "MRR", "H@1", "H@3", "H@10"
    );
    for (label, m) in &results {
        let _ = writeln!(csv, "{label},{:.6},{:.6},{:.6},{:.6}", m[0], m[1], m[2], m[3]);
        let _ = writeln!(
            table,
            "{label:width$}  {:>7.4}  {:>7.4}  {:>7.4}  {:>7.4}",
            m[0], m[1], m[2], m[3]
        );
    }
    write_file(&cfg.out.join("ablation.csv"), &csv, report)?;
    write_file(&cfg.out.join("ablation.txt"), &table, report)?;
    Ok("manifest.cfg")
}
