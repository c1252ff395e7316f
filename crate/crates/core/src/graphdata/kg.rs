use std::collections::{HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};

/// Bijective name <-> dense id interner.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Vocab {
    names: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_names<I: IntoIterator<Item = String>>(names: I) -> Result<Self> {
        let mut v = Vocab::new();
        for name in names {
            if v.get(&name).is_some() {
                return Err(Error::invalid(format!("duplicate name `{name}`")));
            }
            v.intern(&name);
        }
        Ok(v)
    }

    pub fn intern(&mut self, name: &str) -> usize {
        if let Some(&id) = self.index.get(name) {
            return id;
        }
        let id = self.names.len();
        self.names.push(name.to_string());
        self.index.insert(name.to_string(), id);
        id
    }

    pub fn get(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn name(&self, id: usize) -> &str {
        &self.names[id]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn read(path: &Path) -> Result<Self> {
        let reader = BufReader::new(File::open(path)?);
        let mut names = Vec::new();
        for line in reader.lines() {
            let line = line?;
            let name = line.trim_end_matches('\r');
            if !name.is_empty() {
                names.push(name.to_string());
            }
        }
        Vocab::from_names(names)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        for name in &self.names {
            writeln!(w, "{name}")?;
        }
        w.flush()?;
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Triple {
    pub head: usize,
    pub relation: usize,
    pub tail: usize,
}

impl Triple {
    pub fn new(head: usize, relation: usize, tail: usize) -> Self {
        Triple {
            head,
            relation,
            tail,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Valid,
    Test,
}

/// Relational knowledge graph with train/valid/test splits.
#[derive(Clone, Debug, Default)]
pub struct KnowledgeGraph {
    pub entities: Vocab,
    pub relations: Vocab,
    pub train: Vec<Triple>,
    pub valid: Vec<Triple>,
    pub test: Vec<Triple>,
}

/// Whether unseen names in a split are interned or rejected.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NamePolicy {
    Intern,
    Strict,
}

impl KnowledgeGraph {
    pub fn num_entities(&self) -> usize {
        self.entities.len()
    }

    pub fn num_relations(&self) -> usize {
        self.relations.len()
    }

    pub fn split(&self, split: Split) -> &[Triple] {
        match split {
            Split::Train => &self.train,
            Split::Valid => &self.valid,
            Split::Test => &self.test,
        }
    }

    pub fn all_triples(&self) -> impl Iterator<Item = &Triple> {
        self.train.iter().chain(&self.valid).chain(&self.test)
    }

    /// Every triple known in any split.
    pub fn known(&self) -> HashSet<Triple> {
        self.all_triples().copied().collect()
    }

    /// Undirected neighbor lists from training triples, sorted, deduplicated,
    /// without self-loops.
    pub fn adjacency(&self) -> Vec<Vec<usize>> {
        let mut adj = vec![Vec::new(); self.num_entities()];
        for t in &self.train {
            if t.head != t.tail {
                adj[t.head].push(t.tail);
                adj[t.tail].push(t.head);
            }
        }
        for n in &mut adj {
            n.sort_unstable();
            n.dedup();
        }
        adj
    }

    /// Checks id ranges and split disjointness.
    pub fn validate(&self) -> Result<()> {
        let (ne, nr) = (self.num_entities(), self.num_relations());
        for t in self.all_triples() {
            if t.head >= ne || t.tail >= ne || t.relation >= nr {
                return Err(Error::invalid(format!("triple {t:?} references unknown ids")));
            }
        }
        let train: HashSet<_> = self.train.iter().collect();
        let valid: HashSet<_> = self.valid.iter().collect();
        for t in &self.valid {
            if train.contains(t) {
                return Err(Error::invalid(format!("triple {t:?} in both train and valid")));
            }
        }
        for t in &self.test {
            if train.contains(t) || valid.contains(t) {
                return Err(Error::invalid(format!("test triple {t:?} also in train/valid")));
            }
        }
        Ok(())
    }

    /// Loads split files; `entities` optionally pins the entity id order.
    pub fn load(
        train: &Path,
        valid: Option<&Path>,
        test: Option<&Path>,
        entities: Option<Vocab>,
        policy: NamePolicy,
    ) -> Result<Self> {
        let pinned = entities.is_some();
        let mut kg = KnowledgeGraph {
            entities: entities.unwrap_or_default(),
            ..Default::default()
        };
        let train_policy = if pinned { policy } else { NamePolicy::Intern };
        kg.train = load_triples(train, &mut kg.entities, &mut kg.relations, train_policy)?;
        if let Some(p) = valid {
            kg.valid = load_triples(p, &mut kg.entities, &mut kg.relations, policy)?;
        }
        if let Some(p) = test {
            kg.test = load_triples(p, &mut kg.entities, &mut kg.relations, policy)?;
        }
        kg.validate()?;
        Ok(kg)
    }
}

/// Reads `head<TAB>relation<TAB>tail` lines, interning names.
///
/// Duplicate lines are kept. Under [`NamePolicy::Strict`] an entity or
/// relation missing from the vocabularies is an error.
pub fn load_triples(
    path: &Path,
    entities: &mut Vocab,
    relations: &mut Vocab,
    policy: NamePolicy,
) -> Result<Vec<Triple>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 || fields.iter().any(|f| f.is_empty()) {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: lineno + 1,
                msg: format!("expected head<TAB>relation<TAB>tail, got `{line}`"),
            });
        }
        let resolve = |vocab: &mut Vocab, name: &str, what: &str| -> Result<usize> {
            match policy {
                NamePolicy::Intern => Ok(vocab.intern(name)),
                NamePolicy::Strict => vocab.get(name).ok_or_else(|| Error::Parse {
                    path: path.to_path_buf(),
                    line: lineno + 1,
                    msg: format!("unknown {what} `{name}`"),
                }),
            }
        };
        let h = resolve(entities, fields[0], "entity")?;
        let r = resolve(relations, fields[1], "relation")?;
        let t = resolve(entities, fields[2], "entity")?;
        out.push(Triple::new(h, r, t));
    }
    Ok(out)
}

pub fn write_triples(path: &Path, triples: &[Triple], entities: &Vocab, relations: &Vocab) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for t in triples {
        writeln!(
            w,
            "{}\t{}\t{}",
            entities.name(t.head),
            relations.name(t.relation),
            entities.name(t.tail)
        )?;
    }
    w.flush()?;
    Ok(())
}

/// Attribute triples `(entity, attribute key)`; values are not used.
pub fn load_attribute_triples(path: &Path, entities: &Vocab) -> Result<Vec<(usize, String)>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() < 2 || fields[0].is_empty() || fields[1].is_empty() {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: lineno + 1,
                msg: "expected entity<TAB>attribute[<TAB>value]".into(),
            });
        }
        let e = entities.get(fields[0]).ok_or_else(|| Error::Parse {
            path: path.to_path_buf(),
            line: lineno + 1,
            msg: format!("unknown entity `{}`", fields[0]),
        })?;
        out.push((e, fields[1].to_string()));
    }
    Ok(out)
}

pub fn write_attribute_triples(path: &Path, attrs: &[(usize, String)], entities: &Vocab) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for (e, a) in attrs {
        writeln!(w, "{}\t{}", entities.name(*e), a)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_file(dir: &Path, name: &str, body: &str) -> std::path::PathBuf {
        let p = dir.join(name);
        let mut f = File::create(&p).unwrap();
        f.write_all(body.as_bytes()).unwrap();
        p
    }

    #[test]
    fn three_lines_two_entities_one_relation() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_file(dir.path(), "t.tsv", "a\tr\tb\nb\tr\ta\na\tr\tb\n");
        let kg = KnowledgeGraph::load(&p, None, None, None, NamePolicy::Strict).unwrap();
        assert_eq!(kg.num_entities(), 2);
        assert_eq!(kg.num_relations(), 1);
        assert_eq!(kg.train.len(), 3);
    }

    #[test]
    fn empty_file_gives_empty_split() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_file(dir.path(), "t.tsv", "");
        let kg = KnowledgeGraph::load(&p, None, None, None, NamePolicy::Intern).unwrap();
        assert!(kg.train.is_empty());
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_file(dir.path(), "t.tsv", "a\tr\tb\na\tr\n");
        let err = KnowledgeGraph::load(&p, None, None, None, NamePolicy::Intern).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }), "{err}");
    }

    #[test]
    fn strict_mode_rejects_unknown_test_entity() {
        let dir = tempfile::tempdir().unwrap();
        let train = write_file(dir.path(), "train.tsv", "a\tr\tb\n");
        let test = write_file(dir.path(), "test.tsv", "a\tr\tzzz\n");
        let err = KnowledgeGraph::load(&train, None, Some(&test), None, NamePolicy::Strict).unwrap_err();
        assert!(err.to_string().contains("zzz"));
        let kg = KnowledgeGraph::load(&train, None, Some(&test), None, NamePolicy::Intern).unwrap();
        assert_eq!(kg.num_entities(), 3);
    }

    #[test]
    fn overlapping_splits_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let train = write_file(dir.path(), "train.tsv", "a\tr\tb\n");
        let test = write_file(dir.path(), "test.tsv", "a\tr\tb\n");
        assert!(KnowledgeGraph::load(&train, None, Some(&test), None, NamePolicy::Intern).is_err());
    }

    #[test]
    fn ids_stay_dense_at_db15k_scale() {
        let dir = tempfile::tempdir().unwrap();
        let n = 12_842;
        let body: String = (0..n).map(|i| format!("e{i}\tlink\te{}\n", (i + 1) % n)).collect();
        let p = write_file(dir.path(), "t.tsv", &body);
        let kg = KnowledgeGraph::load(&p, None, None, None, NamePolicy::Intern).unwrap();
        assert_eq!(kg.num_entities(), n);
        let max_id = kg.train.iter().map(|t| t.head.max(t.tail)).max().unwrap();
        assert_eq!(max_id, n - 1);
    }

    #[test]
    fn adjacency_is_symmetric_without_self_loops() {
        let kg = KnowledgeGraph {
            entities: Vocab::from_names(["a", "b", "c"].map(String::from)).unwrap(),
            relations: Vocab::from_names(["r".to_string()]).unwrap(),
            train: vec![Triple::new(0, 0, 1), Triple::new(1, 0, 0), Triple::new(2, 0, 2)],
            ..Default::default()
        };
        assert_eq!(kg.adjacency(), vec![vec![1], vec![0], vec![]]);
    }
}
