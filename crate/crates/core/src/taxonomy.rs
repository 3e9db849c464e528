//! Persuasion-technique taxonomy.
//!
//! The taxonomy is a DAG rooted at a distinguished `ROOT` node. A technique
//! may sit under several parents (e.g. `Whataboutism` is both a
//! `Distraction` and an `Ad Hominem` attack), so ancestor closure is the
//! union over every root-to-node path. `ROOT` itself is never part of a
//! closure; internal nodes are.
//!
//! Taxonomies are loaded from a line-oriented text file with explicit
//! `node`, `edge` and `alias` declarations. The SemEval hierarchy ships with
//! the crate and is available through [`Taxonomy::semeval`].

use std::collections::{BTreeSet, HashMap, VecDeque};
use std::path::Path;

use thiserror::Error;

use crate::label::{Label, LabelSet};

const SEMEVAL_FIXTURE: &str = include_str!("../data/semeval_taxonomy.txt");

#[derive(Debug, Error)]
pub enum TaxonomyError {
    #[error("line {line}: {message}")]
    Syntax { line: usize, message: String },
    #[error("taxonomy declares no root")]
    MissingRoot,
    #[error("duplicate node name: {0}")]
    DuplicateNode(String),
    #[error("line {line}: edge references undeclared node {name:?}")]
    UndeclaredNode { line: usize, name: String },
    #[error("cycle detected through node {0:?}")]
    Cycle(String),
    #[error("node {0:?} is not reachable from the root")]
    Unreachable(String),
    #[error("alias {alias:?} points to unknown node {target:?}")]
    UnknownAliasTarget { alias: String, target: String },
    #[error("unknown label: {0:?}")]
    UnknownLabel(String),
    #[error("failed to read taxonomy file: {0}")]
    Io(#[from] std::io::Error),
}

/// Case-folded lookup key used for names and aliases.
fn fold(raw: &str) -> String {
    raw.trim().to_lowercase()
}

/// An immutable label DAG with precomputed ancestor closures.
#[derive(Debug, Clone)]
pub struct Taxonomy {
    names: Vec<Label>,
    by_name: HashMap<Label, usize>,
    lookup: HashMap<String, usize>,
    parents: Vec<Vec<usize>>,
    children: Vec<Vec<usize>>,
    root: usize,
    closure: Vec<BTreeSet<usize>>,
    aliases: Vec<(String, Label)>,
}

impl Taxonomy {
    /// The shipped SemEval persuasion-technique hierarchy.
    pub fn semeval() -> Taxonomy {
        Taxonomy::parse(SEMEVAL_FIXTURE).expect("shipped taxonomy fixture is valid")
    }

    /// Raw text of the shipped fixture.
    pub fn semeval_source() -> &'static str {
        SEMEVAL_FIXTURE
    }

    pub fn from_path(path: impl AsRef<Path>) -> Result<Taxonomy, TaxonomyError> {
        let text = std::fs::read_to_string(path)?;
        Taxonomy::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Taxonomy, TaxonomyError> {
        let mut names: Vec<Label> = Vec::new();
        let mut lookup: HashMap<String, usize> = HashMap::new();
        let mut root: Option<usize> = None;
        let mut edges: Vec<(usize, String, String)> = Vec::new();
        let mut alias_lines: Vec<(usize, String, String)> = Vec::new();

        fn declare(
            name: &str,
            names: &mut Vec<Label>,
            lookup: &mut HashMap<String, usize>,
        ) -> Result<usize, TaxonomyError> {
            let key = fold(name);
            if lookup.contains_key(&key) {
                return Err(TaxonomyError::DuplicateNode(name.to_string()));
            }
            names.push(Label::new(name));
            lookup.insert(key, names.len() - 1);
            Ok(names.len() - 1)
        }

        for (idx, raw_line) in text.lines().enumerate() {
            let line_no = idx + 1;
            let line = raw_line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (keyword, rest) = line.split_once(' ').ok_or_else(|| TaxonomyError::Syntax {
                line: line_no,
                message: format!("expected `<keyword> <argument>`, got {line:?}"),
            })?;
            let rest = rest.trim();
            match keyword {
                "root" => {
                    if root.is_some() {
                        return Err(TaxonomyError::Syntax {
                            line: line_no,
                            message: "more than one root declared".into(),
                        });
                    }
                    root = Some(declare(rest, &mut names, &mut lookup)?);
                }
                "node" => {
                    declare(rest, &mut names, &mut lookup)?;
                }
                "edge" | "alias" => {
                    let (lhs, rhs) = rest.split_once(" -> ").ok_or_else(|| TaxonomyError::Syntax {
                        line: line_no,
                        message: format!("expected `{keyword} <a> -> <b>`"),
                    })?;
                    let entry = (line_no, lhs.trim().to_string(), rhs.trim().to_string());
                    if keyword == "edge" {
                        edges.push(entry);
                    } else {
                        alias_lines.push(entry);
                    }
                }
                other => {
                    return Err(TaxonomyError::Syntax {
                        line: line_no,
                        message: format!("unknown keyword {other:?}"),
                    })
                }
            }
        }

        let root = root.ok_or(TaxonomyError::MissingRoot)?;
        let n = names.len();
        let mut parents = vec![Vec::new(); n];
        let mut children = vec![Vec::new(); n];
        for (line, parent, child) in &edges {
            let resolve = |name: &str| {
                lookup.get(&fold(name)).copied().ok_or_else(|| TaxonomyError::UndeclaredNode {
                    line: *line,
                    name: name.to_string(),
                })
            };
            let p = resolve(parent)?;
            let c = resolve(child)?;
            if !children[p].contains(&c) {
                children[p].push(c);
                parents[c].push(p);
            }
        }

        check_acyclic(&names, &children)?;

        let mut reached = vec![false; n];
        let mut queue = VecDeque::from([root]);
        reached[root] = true;
        while let Some(node) = queue.pop_front() {
            for &c in &children[node] {
                if !reached[c] {
                    reached[c] = true;
                    queue.push_back(c);
                }
            }
        }
        if let Some(lost) = reached.iter().position(|r| !r) {
            return Err(TaxonomyError::Unreachable(names[lost].to_string()));
        }

        let mut aliases = Vec::new();
        for (_, alias, target) in alias_lines {
            let idx = *lookup.get(&fold(&target)).ok_or_else(|| TaxonomyError::UnknownAliasTarget {
                alias: alias.clone(),
                target: target.clone(),
            })?;
            let key = fold(&alias);
            match lookup.get(&key) {
                Some(&existing) if existing == idx => {}
                Some(_) => return Err(TaxonomyError::DuplicateNode(alias)),
                None => {
                    lookup.insert(key, idx);
                }
            }
            aliases.push((alias, names[idx].clone()));
        }

        let closure = (0..n).map(|node| upward_closure(node, root, &parents)).collect();
        let by_name = names.iter().cloned().enumerate().map(|(i, l)| (l, i)).collect();

        Ok(Taxonomy {
            names,
            by_name,
            lookup,
            parents,
            children,
            root,
            closure,
            aliases,
        })
    }

    pub fn root(&self) -> &Label {
        &self.names[self.root]
    }

    /// All nodes except the root, in declaration order.
    pub fn nodes(&self) -> impl Iterator<Item = &Label> {
        self.names.iter().enumerate().filter(move |(i, _)| *i != self.root).map(|(_, l)| l)
    }

    /// Assignable technique labels: nodes without children.
    pub fn leaves(&self) -> Vec<Label> {
        self.names
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != self.root && self.children[*i].is_empty())
            .map(|(_, l)| l.clone())
            .collect()
    }

    pub fn is_leaf(&self, label: &Label) -> Result<bool, TaxonomyError> {
        Ok(self.children[self.index_of(label)?].is_empty())
    }

    pub fn contains(&self, label: &Label) -> bool {
        self.by_name.contains_key(label) && self.by_name[label] != self.root
    }

    pub fn parents(&self, label: &Label) -> Result<Vec<Label>, TaxonomyError> {
        let idx = self.index_of(label)?;
        Ok(self.parents[idx].iter().map(|&p| self.names[p].clone()).collect())
    }

    pub fn children(&self, label: &Label) -> Result<Vec<Label>, TaxonomyError> {
        let idx = self.index_of(label)?;
        Ok(self.children[idx].iter().map(|&c| self.names[c].clone()).collect())
    }

    /// Alias table as declared: raw alias → canonical label.
    pub fn aliases(&self) -> &[(String, Label)] {
        &self.aliases
    }

    fn index_of(&self, label: &Label) -> Result<usize, TaxonomyError> {
        self.by_name
            .get(label)
            .copied()
            .ok_or_else(|| TaxonomyError::UnknownLabel(label.to_string()))
    }

    /// Every node on any root-to-`label` path, excluding the root and the
    /// label itself.
    pub fn ancestors(&self, label: &Label) -> Result<LabelSet, TaxonomyError> {
        let idx = self.index_of(label)?;
        Ok(self.closure[idx].iter().map(|&a| self.names[a].clone()).collect())
    }

    /// `labels` together with all of their ancestors.
    pub fn expand(&self, labels: &LabelSet) -> Result<LabelSet, TaxonomyError> {
        let mut out = BTreeSet::new();
        for label in labels {
            let idx = self.index_of(label)?;
            if idx != self.root {
                out.insert(idx);
            }
            out.extend(self.closure[idx].iter().copied());
        }
        Ok(out.into_iter().map(|i| self.names[i].clone()).collect())
    }

    /// Resolves a raw label string (trimmed, case-insensitive, aliases
    /// applied) to its canonical label. The root is not a valid label.
    pub fn canonicalize(&self, raw: &str) -> Result<Label, TaxonomyError> {
        match self.lookup.get(&fold(raw)) {
            Some(&idx) if idx != self.root => Ok(self.names[idx].clone()),
            _ => Err(TaxonomyError::UnknownLabel(raw.to_string())),
        }
    }

    /// Canonicalizes every raw string, failing on the first unknown one.
    pub fn canonicalize_all<'a>(
        &self,
        raw: impl IntoIterator<Item = &'a str>,
    ) -> Result<LabelSet, TaxonomyError> {
        raw.into_iter().map(|r| self.canonicalize(r)).collect()
    }
}

fn check_acyclic(names: &[Label], children: &[Vec<usize>]) -> Result<(), TaxonomyError> {
    let n = names.len();
    let mut indegree = vec![0usize; n];
    for kids in children {
        for &c in kids {
            indegree[c] += 1;
        }
    }
    let mut queue: VecDeque<usize> = (0..n).filter(|&i| indegree[i] == 0).collect();
    let mut seen = 0;
    while let Some(node) = queue.pop_front() {
        seen += 1;
        for &c in &children[node] {
            indegree[c] -= 1;
            if indegree[c] == 0 {
                queue.push_back(c);
            }
        }
    }
    if seen == n {
        Ok(())
    } else {
        let stuck = (0..n).find(|&i| indegree[i] > 0).expect("some node left unsorted");
        Err(TaxonomyError::Cycle(names[stuck].to_string()))
    }
}

fn upward_closure(node: usize, root: usize, parents: &[Vec<usize>]) -> BTreeSet<usize> {
    let mut seen = BTreeSet::new();
    let mut queue: VecDeque<usize> = parents[node].iter().copied().collect();
    while let Some(p) = queue.pop_front() {
        if p == root || !seen.insert(p) {
            continue;
        }
        queue.extend(parents[p].iter().copied());
    }
    seen
}
