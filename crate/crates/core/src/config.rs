//! Plain-text run configuration: one `section.key = value` per line, `#`
//! comments, comma-separated lists. Unknown and repeated keys are errors.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::encoders::HeadMerge;
use crate::error::{Error, Result};
use crate::eval::CandidatePool;
use crate::fusion::FusionVariant;
use crate::gmnm::{NoiseConfig, NoiseMode};
use crate::graphdata::synthetic::{EaSyntheticSpec, KgcSyntheticSpec};
use crate::graphdata::{BowEncoding, BowWeight};
use crate::kgc::{KgcConfig, KgcFusion};
use crate::mmea::EaConfig;
use crate::modality::Modality;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Task {
    Kgc,
    Ea,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DataSource {
    /// Generated from the `synth_kgc` / `synth_ea` sections and the run seed.
    Synthetic,
    /// Read from `data.dir` (the layout `gen` writes).
    Files,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NoiseKind {
    Gmnm,
    Dropout,
    Off,
}

/// Noise keys shared by both tasks; `modalities = None` takes the task
/// default (v,s for completion, all five for alignment).
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseKeys {
    pub kind: NoiseKind,
    pub rho: f64,
    pub epsilon: f64,
    pub dropout: f64,
    pub dropout_scale: bool,
    pub modalities: Option<Vec<Modality>>,
}

impl Default for NoiseKeys {
    fn default() -> Self {
        NoiseKeys {
            kind: NoiseKind::Gmnm,
            rho: 0.2,
            epsilon: 0.7,
            dropout: 0.1,
            dropout_scale: false,
            modalities: None,
        }
    }
}

impl NoiseKeys {
    pub fn build(&self, task: Task) -> NoiseConfig {
        let modalities = self.modalities.clone().unwrap_or_else(|| match task {
            Task::Kgc => vec![Modality::Visual, Modality::Surface],
            Task::Ea => Modality::ALL.to_vec(),
        });
        let mode = match self.kind {
            NoiseKind::Gmnm => NoiseMode::Gmnm,
            NoiseKind::Dropout => NoiseMode::Dropout {
                p: self.dropout,
                scale: self.dropout_scale,
            },
            NoiseKind::Off => NoiseMode::Off,
        };
        NoiseConfig {
            rho: self.rho,
            epsilon: self.epsilon,
            mode,
            modalities,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblateKeys {
    pub seeds: usize,
    pub grid: Vec<(f64, f64)>,
    pub dropout: Vec<f64>,
    pub variants: Vec<FusionVariant>,
}

impl Default for AblateKeys {
    fn default() -> Self {
        AblateKeys {
            seeds: 1,
            grid: vec![(0.2, 0.7), (0.3, 0.6), (0.1, 0.8), (0.4, 0.4), (0.5, 0.2), (0.7, 0.2)],
            dropout: vec![0.1, 0.2, 0.3, 0.4],
            variants: vec![FusionVariant::Fc, FusionVariant::Ws, FusionVariant::At, FusionVariant::Ts],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub task: Task,
    pub seed: u64,
    pub out: PathBuf,
    pub source: DataSource,
    pub data_dir: Option<PathBuf>,
    pub relation_dim: usize,
    pub attribute_dim: usize,
    pub bow: BowEncoding,
    pub filtered: bool,
    pub iterative: bool,
    pub synth_kgc: KgcSyntheticSpec,
    pub synth_ea: EaSyntheticSpec,
    pub noise: NoiseKeys,
    pub kgc: KgcConfig,
    pub ea: EaConfig,
    pub ablate: AblateKeys,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            task: Task::Kgc,
            seed: 0,
            out: PathBuf::from("out"),
            source: DataSource::Synthetic,
            data_dir: None,
            relation_dim: 1000,
            attribute_dim: 1000,
            bow: BowEncoding::default(),
            filtered: true,
            iterative: false,
            synth_kgc: KgcSyntheticSpec::default(),
            synth_ea: EaSyntheticSpec::default(),
            noise: NoiseKeys::default(),
            kgc: KgcConfig::default(),
            ea: EaConfig::default(),
            ablate: AblateKeys::default(),
        }
    }
}

fn list<T: FromStr<Err = Error>>(v: &str) -> Result<Vec<T>> {
    v.split(',').filter(|s| !s.trim().is_empty()).map(|s| s.trim().parse()).collect()
}

fn join<T: ToString>(items: &[T]) -> String {
    items.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

fn num<T: FromStr>(key: &str, v: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    v.parse().map_err(|e| Error::Config(format!("{key} = `{v}`: {e}")))
}

fn boolean(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(Error::Config(format!("{key} = `{v}`: expected true or false"))),
    }
}

fn choice<T: Copy>(key: &str, v: &str, options: &[(&str, T)]) -> Result<T> {
    options.iter().find(|(n, _)| *n == v).map(|(_, t)| *t).ok_or_else(|| {
        let names: Vec<&str> = options.iter().map(|(n, _)| *n).collect();
        Error::Config(format!("{key} = `{v}`: expected one of {}", names.join(", ")))
    })
}

fn name_of<T: Copy + PartialEq>(v: T, options: &[(&'static str, T)]) -> &'static str {
    options.iter().find(|(_, t)| *t == v).map(|(n, _)| *n).expect("option table is complete")
}

const TASKS: [(&str, Task); 2] = [("kgc", Task::Kgc), ("ea", Task::Ea)];
const SOURCES: [(&str, DataSource); 2] = [("synthetic", DataSource::Synthetic), ("files", DataSource::Files)];
const NOISE: [(&str, NoiseKind); 3] = [("gmnm", NoiseKind::Gmnm), ("dropout", NoiseKind::Dropout), ("off", NoiseKind::Off)];
const MERGE: [(&str, HeadMerge); 2] = [("mean", HeadMerge::Mean), ("concat", HeadMerge::Concat)];
const POOL: [(&str, CandidatePool); 2] = [("test", CandidatePool::TestSide), ("full", CandidatePool::Full)];
const BOW: [(&str, BowWeight); 2] = [("count", BowWeight::Count), ("presence", BowWeight::Presence)];

fn kgc_fusion(key: &str, v: &str) -> Result<KgcFusion> {
    match v {
        "transformer" => Ok(KgcFusion::Transformer),
        "structure" => Ok(KgcFusion::StructureOnly),
        other => other
            .parse()
            .map(KgcFusion::Variant)
            .map_err(|_| Error::Config(format!("{key} = `{v}`: expected transformer, structure, fc, ws, at or ts"))),
    }
}

fn kgc_fusion_name(f: &KgcFusion) -> String {
    match f {
        KgcFusion::Transformer => "transformer".into(),
        KgcFusion::StructureOnly => "structure".into(),
        KgcFusion::Variant(v) => v.to_string(),
    }
}

fn grid(key: &str, v: &str) -> Result<Vec<(f64, f64)>> {
    v.split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|pair| {
            let (a, b) = pair
                .trim()
                .split_once(':')
                .ok_or_else(|| Error::Config(format!("{key}: expected rho:epsilon pairs, got `{pair}`")))?;
            Ok((num(key, a.trim())?, num(key, b.trim())?))
        })
        .collect()
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut seen = HashSet::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or_default().trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `section.key = value`", lineno + 1)))?;
            let (key, value) = (key.trim(), value.trim());
            if !seen.insert(key.to_string()) {
                return Err(Error::Config(format!("line {}: key `{key}` set twice", lineno + 1)));
            }
            cfg.set(key, value)
                .map_err(|e| Error::Config(format!("line {}: {}", lineno + 1, strip(e))))?;
        }
        cfg.finish()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Sets one key; values are validated in [`RunConfig::finish`].
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let k = key;
        match key {
            "run.task" => self.task = choice(k, v, &TASKS)?,
            "run.seed" => self.seed = num(k, v)?,
            "run.out" => self.out = PathBuf::from(v),
            "data.source" => self.source = choice(k, v, &SOURCES)?,
            "data.dir" => self.data_dir = Some(PathBuf::from(v)),
            "data.relation_dim" => self.relation_dim = num(k, v)?,
            "data.attribute_dim" => self.attribute_dim = num(k, v)?,
            "data.relation_bow" => self.bow.relation = choice(k, v, &BOW)?,
            "data.attribute_bow" => self.bow.attribute = choice(k, v, &BOW)?,

            "synth_kgc.entities" => self.synth_kgc.entities = num(k, v)?,
            "synth_kgc.relations" => self.synth_kgc.relations = num(k, v)?,
            "synth_kgc.frequencies" => self.synth_kgc.frequencies = num(k, v)?,
            "synth_kgc.visual_dim" => self.synth_kgc.visual_dim = num(k, v)?,
            "synth_kgc.surface_dim" => self.synth_kgc.surface_dim = num(k, v)?,
            "synth_kgc.feature_noise" => self.synth_kgc.feature_noise = num(k, v)?,
            "synth_kgc.image_ratio" => self.synth_kgc.image_ratio = num(k, v)?,
            "synth_kgc.valid_fraction" => self.synth_kgc.valid_fraction = num(k, v)?,
            "synth_kgc.test_fraction" => self.synth_kgc.test_fraction = num(k, v)?,

            "synth_ea.entities" => self.synth_ea.entities = num(k, v)?,
            "synth_ea.relations" => self.synth_ea.relations = num(k, v)?,
            "synth_ea.triples" => self.synth_ea.triples = num(k, v)?,
            "synth_ea.attributes" => self.synth_ea.attributes = num(k, v)?,
            "synth_ea.attributes_per_entity" => self.synth_ea.attributes_per_entity = num(k, v)?,
            "synth_ea.visual_dim" => self.synth_ea.visual_dim = num(k, v)?,
            "synth_ea.surface_dim" => self.synth_ea.surface_dim = num(k, v)?,
            "synth_ea.jitter" => self.synth_ea.jitter = num(k, v)?,
            "synth_ea.image_ratio" => self.synth_ea.image_ratio = num(k, v)?,
            "synth_ea.seed_ratio" => self.synth_ea.seed_ratio = num(k, v)?,

            "gmnm.mode" => self.noise.kind = choice(k, v, &NOISE)?,
            "gmnm.rho" => self.noise.rho = num(k, v)?,
            "gmnm.epsilon" => self.noise.epsilon = num(k, v)?,
            "gmnm.dropout" => self.noise.dropout = num(k, v)?,
            "gmnm.dropout_scale" => self.noise.dropout_scale = boolean(k, v)?,
            "gmnm.modalities" => {
                self.noise.modalities = if v == "default" { None } else { Some(list(v)?) }
            }

            "kgc.dim" => self.kgc.dim = num(k, v)?,
            // Shorthands: the fusion block is shared by both task heads.
            "fusion.heads" => {
                self.kgc.heads = num(k, v)?;
                self.ea.heads = self.kgc.heads;
            }
            "fusion.ffn_dim" => {
                self.kgc.ffn_dim = num(k, v)?;
                self.ea.ffn_dim = self.kgc.ffn_dim;
            }
            "fusion.variant" => self.kgc.fusion = kgc_fusion(k, v)?,
            "kgc.heads" => self.kgc.heads = num(k, v)?,
            "kgc.ffn_dim" => self.kgc.ffn_dim = num(k, v)?,
            "kgc.fusion" => self.kgc.fusion = kgc_fusion(k, v)?,
            "kgc.entity_repr" => self.kgc.entity_repr = v.parse()?,
            "kgc.modalities" => self.kgc.modalities = list(v)?,
            "kgc.margin" => self.kgc.margin = num(k, v)?,
            "kgc.negatives" => self.kgc.negatives = num(k, v)?,
            "kgc.temperature" => self.kgc.temperature = num(k, v)?,
            "kgc.weighting" => self.kgc.weighting = v.parse()?,
            "kgc.batch_size" => self.kgc.batch_size = num(k, v)?,
            "kgc.lr" => self.kgc.lr = num(k, v)?,
            "kgc.weight_decay" => self.kgc.weight_decay = num(k, v)?,
            "kgc.warmup" => self.kgc.warmup_fraction = num(k, v)?,
            "kgc.epochs" => self.kgc.epochs = num(k, v)?,
            "kgc.norm" => self.kgc.norm = v.parse()?,
            "kgc.eval_every" => self.kgc.eval_every = num(k, v)?,
            "kgc.filtered" => self.filtered = boolean(k, v)?,

            "ea.dim" => self.ea.dim = num(k, v)?,
            "ea.heads" => self.ea.heads = num(k, v)?,
            "ea.ffn_dim" => self.ea.ffn_dim = num(k, v)?,
            "ea.gat_layers" => self.ea.gat_layers = num(k, v)?,
            "ea.gat_heads" => self.ea.gat_heads = num(k, v)?,
            "ea.gat_merge" => self.ea.gat_merge = choice(k, v, &MERGE)?,
            "ea.modalities" => self.ea.modalities = list(v)?,
            "ea.tau" => self.ea.tau = num(k, v)?,
            "ea.normalize" => self.ea.normalize = boolean(k, v)?,
            "ea.detach_confidence" => self.ea.detach_confidence = boolean(k, v)?,
            "ea.batch_size" => self.ea.batch_size = num(k, v)?,
            "ea.lr" => self.ea.lr = num(k, v)?,
            "ea.weight_decay" => self.ea.weight_decay = num(k, v)?,
            "ea.warmup" => self.ea.warmup_fraction = num(k, v)?,
            "ea.epochs" => self.ea.epochs = num(k, v)?,
            "ea.iterative" => self.iterative = boolean(k, v)?,
            "ea.iterative_epochs" => self.ea.iterative_epochs = num(k, v)?,
            "ea.valid_ratio" => self.ea.valid_ratio = num(k, v)?,
            "ea.eval_every" => self.ea.eval_every = num(k, v)?,
            "ea.patience" => self.ea.patience = num(k, v)?,
            "ea.probe_every" => self.ea.probe_every = num(k, v)?,
            "ea.promote_after" => self.ea.promote_after = num(k, v)?,
            "ea.pool" => self.ea.pool = choice(k, v, &POOL)?,

            "ablate.seeds" => self.ablate.seeds = num(k, v)?,
            "ablate.grid" => self.ablate.grid = grid(k, v)?,
            "ablate.dropout" => {
                self.ablate.dropout = v
                    .split(',')
                    .filter(|s| !s.trim().is_empty())
                    .map(|s| num(k, s.trim()))
                    .collect::<Result<_>>()?
            }
            "ablate.variants" => self.ablate.variants = list(v)?,
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    /// Derives the task noise configs and validates every value.
    pub fn finish(&mut self) -> Result<()> {
        self.kgc.noise = self.noise.build(Task::Kgc);
        self.ea.noise = self.noise.build(Task::Ea);
        self.kgc.validate()?;
        self.ea.validate()?;
        if self.source == DataSource::Files && self.data_dir.is_none() {
            return Err(Error::Config("missing key `data.dir` (required when data.source = files)".into()));
        }
        if self.relation_dim == 0 || self.attribute_dim == 0 {
            return Err(Error::Config("data.relation_dim and data.attribute_dim must be >= 1".into()));
        }
        if self.ablate.seeds == 0 {
            return Err(Error::Config("ablate.seeds must be >= 1".into()));
        }
        for &(rho, eps) in &self.ablate.grid {
            NoiseConfig::gmnm(rho, eps, vec![]).validate()?;
        }
        if self.ablate.dropout.iter().any(|p| !(0.0..1.0).contains(p)) {
            return Err(Error::Config("ablate.dropout rates must lie in [0, 1)".into()));
        }
        Ok(())
    }

    /// Every key with its current value, parseable by [`RunConfig::parse`].
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut put = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        put("run.task", name_of(self.task, &TASKS).into());
        put("run.seed", self.seed.to_string());
        put("run.out", self.out.display().to_string());
        put("data.source", name_of(self.source, &SOURCES).into());
        if let Some(d) = &self.data_dir {
            put("data.dir", d.display().to_string());
        }
        put("data.relation_dim", self.relation_dim.to_string());
        put("data.attribute_dim", self.attribute_dim.to_string());
        put("data.relation_bow", name_of(self.bow.relation, &BOW).into());
        put("data.attribute_bow", name_of(self.bow.attribute, &BOW).into());

        let k = &self.synth_kgc;
        put("synth_kgc.entities", k.entities.to_string());
        put("synth_kgc.relations", k.relations.to_string());
        put("synth_kgc.frequencies", k.frequencies.to_string());
        put("synth_kgc.visual_dim", k.visual_dim.to_string());
        put("synth_kgc.surface_dim", k.surface_dim.to_string());
        put("synth_kgc.feature_noise", format!("{:?}", k.feature_noise));
        put("synth_kgc.image_ratio", format!("{:?}", k.image_ratio));
        put("synth_kgc.valid_fraction", format!("{:?}", k.valid_fraction));
        put("synth_kgc.test_fraction", format!("{:?}", k.test_fraction));

        let e = &self.synth_ea;
        put("synth_ea.entities", e.entities.to_string());
        put("synth_ea.relations", e.relations.to_string());
        put("synth_ea.triples", e.triples.to_string());
        put("synth_ea.attributes", e.attributes.to_string());
        put("synth_ea.attributes_per_entity", e.attributes_per_entity.to_string());
        put("synth_ea.visual_dim", e.visual_dim.to_string());
        put("synth_ea.surface_dim", e.surface_dim.to_string());
        put("synth_ea.jitter", format!("{:?}", e.jitter));
        put("synth_ea.image_ratio", format!("{:?}", e.image_ratio));
        put("synth_ea.seed_ratio", format!("{:?}", e.seed_ratio));

        let n = &self.noise;
        put("gmnm.mode", name_of(n.kind, &NOISE).into());
        put("gmnm.rho", format!("{:?}", n.rho));
        put("gmnm.epsilon", format!("{:?}", n.epsilon));
        put("gmnm.dropout", format!("{:?}", n.dropout));
        put("gmnm.dropout_scale", n.dropout_scale.to_string());
        put(
            "gmnm.modalities",
            n.modalities.as_ref().map_or("default".into(), |m| join(m)),
        );

        let c = &self.kgc;
        put("kgc.dim", c.dim.to_string());
        put("kgc.heads", c.heads.to_string());
        put("kgc.ffn_dim", c.ffn_dim.to_string());
        put("kgc.fusion", kgc_fusion_name(&c.fusion));
        put("kgc.entity_repr", c.entity_repr.to_string());
        put("kgc.modalities", join(&c.modalities));
        put("kgc.margin", format!("{:?}", c.margin));
        put("kgc.negatives", c.negatives.to_string());
        put("kgc.temperature", format!("{:?}", c.temperature));
        put("kgc.weighting", c.weighting.to_string());
        put("kgc.batch_size", c.batch_size.to_string());
        put("kgc.lr", format!("{:?}", c.lr));
        put("kgc.weight_decay", format!("{:?}", c.weight_decay));
        put("kgc.warmup", format!("{:?}", c.warmup_fraction));
        put("kgc.epochs", c.epochs.to_string());
        put("kgc.norm", c.norm.to_string());
        put("kgc.eval_every", c.eval_every.to_string());
        put("kgc.filtered", self.filtered.to_string());

        let a = &self.ea;
        put("ea.dim", a.dim.to_string());
        put("ea.heads", a.heads.to_string());
        put("ea.ffn_dim", a.ffn_dim.to_string());
        put("ea.gat_layers", a.gat_layers.to_string());
        put("ea.gat_heads", a.gat_heads.to_string());
        put("ea.gat_merge", name_of(a.gat_merge, &MERGE).into());
        put("ea.modalities", join(&a.modalities));
        put("ea.tau", format!("{:?}", a.tau));
        put("ea.normalize", a.normalize.to_string());
        put("ea.detach_confidence", a.detach_confidence.to_string());
        put("ea.batch_size", a.batch_size.to_string());
        put("ea.lr", format!("{:?}", a.lr));
        put("ea.weight_decay", format!("{:?}", a.weight_decay));
        put("ea.warmup", format!("{:?}", a.warmup_fraction));
        put("ea.epochs", a.epochs.to_string());
        put("ea.iterative", self.iterative.to_string());
        put("ea.iterative_epochs", a.iterative_epochs.to_string());
        put("ea.valid_ratio", format!("{:?}", a.valid_ratio));
        put("ea.eval_every", a.eval_every.to_string());
        put("ea.patience", a.patience.to_string());
        put("ea.probe_every", a.probe_every.to_string());
        put("ea.promote_after", a.promote_after.to_string());
        put("ea.pool", name_of(a.pool, &POOL).into());

        let b = &self.ablate;
        put("ablate.seeds", b.seeds.to_string());
        put(
            "ablate.grid",
            b.grid.iter().map(|(r, e)| format!("{r:?}:{e:?}")).collect::<Vec<_>>().join(","),
        );
        put(
            "ablate.dropout",
            b.dropout.iter().map(|p| format!("{p:?}")).collect::<Vec<_>>().join(","),
        );
        put("ablate.variants", join(&b.variants));
        s
    }
}

/// Drops the outer "configuration error: " prefix when re-wrapping.
fn strip(e: Error) -> String {
    match e {
        Error::Config(m) => m,
        other => other.to_string(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_stated_hyperparameters() {
        let c = RunConfig::parse("").unwrap();
        assert_eq!((c.kgc.dim, c.kgc.heads, c.kgc.batch_size, c.kgc.negatives), (256, 2, 1024, 32));
        assert_eq!((c.kgc.lr, c.kgc.margin, c.kgc.temperature), (1e-4, 12.0, 2.0));
        assert_eq!((c.ea.dim, c.ea.heads, c.ea.batch_size, c.ea.epochs), (300, 1, 3500, 500));
        assert_eq!((c.ea.probe_every, c.ea.promote_after), (5, 10));
        assert_eq!((c.noise.rho, c.noise.epsilon), (0.2, 0.7));
        assert_eq!((c.relation_dim, c.attribute_dim), (1000, 1000));
        assert_eq!(c.ablate.grid.len(), 6);
        assert_eq!(c.kgc.noise.modalities, vec![Modality::Visual, Modality::Surface]);
        assert_eq!(c.ea.noise.modalities.len(), 5);
    }

    #[test]
    fn unknown_and_repeated_keys_are_rejected() {
        let e = RunConfig::parse("kgc.lerning_rate = 1").unwrap_err().to_string();
        assert!(e.contains("kgc.lerning_rate"), "{e}");
        assert!(RunConfig::parse("run.seed = 1\nrun.seed = 2").is_err());
        assert!(RunConfig::parse("no equals sign").is_err());
        assert!(RunConfig::parse("gmnm.rho = 1.5").is_err());
    }

    #[test]
    fn fusion_shorthands_set_both_heads() {
        let c = RunConfig::parse("fusion.heads = 4\nfusion.ffn_dim = 64\nfusion.variant = ts").unwrap();
        assert_eq!((c.kgc.heads, c.ea.heads, c.kgc.ffn_dim, c.ea.ffn_dim), (4, 4, 64, 64));
        assert_eq!(c.kgc.fusion, KgcFusion::Variant(FusionVariant::Ts));
        assert_eq!(RunConfig::parse(&c.to_text()).unwrap(), c);
    }

    #[test]
    fn files_source_names_the_missing_key() {
        let e = RunConfig::parse("data.source = files").unwrap_err().to_string();
        assert!(e.contains("data.dir"), "{e}");
    }

    #[test]
    fn text_round_trips() {
        let c = RunConfig::parse(
            "run.task = ea # trailing comment\nkgc.fusion = ws\ngmnm.mode = dropout\ngmnm.dropout = 0.3\nea.lr = 0.0012345678901\nablate.grid = 0.2:0.7,0.5:0.2\ngmnm.modalities = v,s",
        )
        .unwrap();
        assert_eq!(c.task, Task::Ea);
        let again = RunConfig::parse(&c.to_text()).unwrap();
        assert_eq!(c, again);
        assert_eq!(c.to_text(), again.to_text());
    }
}
