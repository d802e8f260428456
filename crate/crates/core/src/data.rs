//! Dataset files, train/test splits and the synthetic relational generators.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{CategoricalDataset, DatasetError};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    /// `line` and `column` are 1-based; column 0 means the whole line.
    #[error("parse error at line {line}, column {column}: {message}")]
    Parse { line: usize, column: usize, message: String },
    #[error("line {line}, column {column}: category {value} exceeds declared maximum {cardinality}")]
    CardinalityViolation { line: usize, column: usize, value: usize, cardinality: usize },
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error("grammar error at line {line}: {message}")]
    Grammar { line: usize, message: String },
    #[error("derivation exceeded depth {limit}")]
    DerivationDepthExceeded { limit: usize },
    #[error("invalid split: {0}")]
    Split(String),
}

/// Written for missing cells.
pub const MISSING_TOKEN: &str = "?";

/// Parses the comma-separated dataset format.
///
/// The header names each variable, optionally declaring its largest category
/// index as `name:K`. Undeclared columns take the largest observed index (at
/// least 1). Body cells are category indices or `?`. Blank lines are skipped.
pub fn parse_dataset(text: &str) -> Result<CategoricalDataset, DataError> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (header_idx, header) = lines.next().ok_or(DataError::Parse { line: 1, column: 0, message: "empty file".into() })?;
    let mut names = Vec::new();
    let mut declared = Vec::new();
    for (c, field) in header.split(',').enumerate() {
        let field = field.trim();
        let (name, card) = match field.split_once(':') {
            Some((name, k)) => {
                let k = k.trim().parse::<usize>().map_err(|_| DataError::Parse {
                    line: header_idx + 1,
                    column: c + 1,
                    message: format!("bad cardinality declaration {field:?}"),
                })?;
                (name.trim(), Some(k))
            }
            None => (field, None),
        };
        if name.is_empty() {
            return Err(DataError::Parse { line: header_idx + 1, column: c + 1, message: "empty variable name".into() });
        }
        names.push(name.to_string());
        declared.push(card);
    }
    let d = names.len();

    let mut cells = Vec::new();
    let mut locations = Vec::new();
    for (idx, line) in lines {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != d {
            return Err(DataError::Parse {
                line: idx + 1,
                column: 0,
                message: format!("expected {d} fields, found {}", fields.len()),
            });
        }
        for (c, f) in fields.iter().enumerate() {
            let f = f.trim();
            let cell = if f == MISSING_TOKEN {
                None
            } else {
                Some(f.parse::<usize>().map_err(|_| DataError::Parse {
                    line: idx + 1,
                    column: c + 1,
                    message: format!("expected a category index or '{MISSING_TOKEN}', found {f:?}"),
                })?)
            };
            cells.push(cell);
        }
        locations.push(idx + 1);
    }

    let mut cardinalities = Vec::with_capacity(d);
    for c in 0..d {
        let observed_max = (0..locations.len()).filter_map(|n| cells[n * d + c]).max();
        match declared[c] {
            Some(k) => {
                if let Some(n) = (0..locations.len()).find(|&n| cells[n * d + c].is_some_and(|v| v > k)) {
                    let value = cells[n * d + c].expect("found above");
                    return Err(DataError::CardinalityViolation { line: locations[n], column: c + 1, value, cardinality: k });
                }
                cardinalities.push(k);
            }
            None => cardinalities.push(observed_max.unwrap_or(1).max(1)),
        }
    }
    Ok(CategoricalDataset::new(names, cardinalities, cells)?)
}

/// Inverse of [`parse_dataset`]; cardinalities are always declared.
pub fn format_dataset(data: &CategoricalDataset) -> String {
    let mut out = String::new();
    let header: Vec<String> = data.names().iter().zip(data.cardinalities()).map(|(n, k)| format!("{n}:{k}")).collect();
    out.push_str(&header.join(","));
    out.push('\n');
    for n in 0..data.n_rows() {
        let row: Vec<String> = data.row(n).iter().map(|c| c.map_or(MISSING_TOKEN.to_string(), |v| v.to_string())).collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<CategoricalDataset, DataError> {
    parse_dataset(&std::fs::read_to_string(path)?)
}

pub fn save_dataset(data: &CategoricalDataset, path: impl AsRef<Path>) -> Result<(), DataError> {
    std::fs::write(path, format_dataset(data))?;
    Ok(())
}

/// Ground truth for hidden cells, kept apart from anything a model sees.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnswerKey {
    pub entries: Vec<KeyEntry>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct KeyEntry {
    pub row: usize,
    pub var: usize,
    pub value: usize,
}

impl AnswerKey {
    pub fn targets(&self) -> Vec<(usize, usize)> {
        self.entries.iter().map(|e| (e.row, e.var)).collect()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Comma-separated `row,var,value` table with a header line.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("row,var,value\n");
        for e in &self.entries {
            let _ = writeln!(out, "{},{},{}", e.row, e.var, e.value);
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self, DataError> {
        let mut entries = Vec::new();
        for (idx, line) in text.lines().enumerate().skip(1).filter(|(_, l)| !l.trim().is_empty()) {
            let fields: Vec<&str> = line.split(',').map(str::trim).collect();
            if fields.len() != 3 {
                return Err(DataError::Parse { line: idx + 1, column: 0, message: "expected row,var,value".into() });
            }
            let mut nums = [0usize; 3];
            for (c, f) in fields.iter().enumerate() {
                nums[c] = f.parse().map_err(|_| DataError::Parse {
                    line: idx + 1,
                    column: c + 1,
                    message: format!("expected an integer, found {f:?}"),
                })?;
            }
            entries.push(KeyEntry { row: nums[0], var: nums[1], value: nums[2] });
        }
        Ok(Self { entries })
    }
}

const XOR_TRIPLETS: [[usize; 3]; 4] = [[0, 0, 0], [0, 1, 1], [1, 0, 1], [1, 1, 0]];

/// `n` copies of each XOR triplet followed by the four rows `(a, b, ?)`.
pub fn gen_xor(n_per_config: usize) -> CategoricalDataset {
    let mut rows: Vec<Vec<Option<usize>>> = Vec::with_capacity(4 * n_per_config + 4);
    for _ in 0..n_per_config {
        rows.extend(XOR_TRIPLETS.iter().map(|t| t.iter().map(|&v| Some(v)).collect()));
    }
    rows.extend(XOR_TRIPLETS.iter().map(|t| vec![Some(t[0]), Some(t[1]), None]));
    let names = ["x", "y", "x_xor_y"].iter().map(|s| s.to_string()).collect();
    CategoricalDataset::new(names, vec![1, 1, 1], rows.concat()).expect("valid by construction")
}

/// The hidden third digits of the rows appended by [`gen_xor`].
pub fn xor_answer_key(n_per_config: usize) -> AnswerKey {
    let entries =
        XOR_TRIPLETS.iter().enumerate().map(|(i, t)| KeyEntry { row: 4 * n_per_config + i, var: 2, value: t[2] }).collect();
    AnswerKey { entries }
}

/// One alternative of a production.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rule {
    pub lhs: String,
    pub rhs: Vec<String>,
    pub prob: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PcfgGrammar {
    pub start: String,
    pub nonterminals: Vec<String>,
    /// Sorted; this order fixes the category encoding.
    pub terminals: Vec<String>,
    pub rules: Vec<Rule>,
}

/// The relational grammar over the letters `a` to `g`.
pub const DEFAULT_GRAMMAR: &str = "\
alpha -> A beta [1.0]
beta -> B A [0.5] | C [0.5]
A -> a [0.5] | b [0.3] | c [0.2]
B -> d [0.7] | e [0.3]
C -> f [0.7] | g [0.3]
";

pub const DEFAULT_MAX_DEPTH: usize = 64;

impl PcfgGrammar {
    /// Parses `LHS -> RHS [prob]` lines; alternatives may share a line
    /// separated by `|`. The first left-hand side is the start symbol and
    /// `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self, DataError> {
        let mut rules = Vec::new();
        let mut order: Vec<String> = Vec::new();
        for (idx, raw) in text.lines().enumerate() {
            let line_no = idx + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |message: String| DataError::Grammar { line: line_no, message };
            let (lhs, rest) = line.split_once("->").ok_or_else(|| err("missing '->'".into()))?;
            let lhs = lhs.trim();
            if lhs.is_empty() || lhs.contains(char::is_whitespace) {
                return Err(err(format!("bad left-hand side {lhs:?}")));
            }
            if !order.iter().any(|s| s == lhs) {
                order.push(lhs.to_string());
            }
            for alt in rest.split('|') {
                let alt = alt.trim();
                let open = alt.rfind('[').ok_or_else(|| err(format!("alternative {alt:?} lacks [prob]")))?;
                let close = alt.rfind(']').filter(|&c| c > open).ok_or_else(|| err("unclosed '['".into()))?;
                let prob: f64 =
                    alt[open + 1..close].trim().parse().map_err(|_| err(format!("bad probability in {alt:?}")))?;
                if !(0.0..=1.0).contains(&prob) {
                    return Err(err(format!("probability {prob} outside [0, 1]")));
                }
                let rhs: Vec<String> = alt[..open].split_whitespace().map(str::to_string).collect();
                if rhs.is_empty() {
                    return Err(err("empty right-hand side".into()));
                }
                rules.push(Rule { lhs: lhs.to_string(), rhs, prob });
            }
        }
        let start = order.first().cloned().ok_or(DataError::Grammar { line: 0, message: "no rules".into() })?;
        for nt in &order {
            let total: f64 = rules.iter().filter(|r| &r.lhs == nt).map(|r| r.prob).sum();
            if (total - 1.0).abs() > 1e-12 {
                return Err(DataError::Grammar { line: 0, message: format!("probabilities of {nt} sum to {total}") });
            }
        }
        let terminals: BTreeSet<String> =
            rules.iter().flat_map(|r| r.rhs.iter()).filter(|s| !order.contains(s)).cloned().collect();
        Ok(Self { start, nonterminals: order, terminals: terminals.into_iter().collect(), rules })
    }

    pub fn default_grammar() -> Self {
        Self::parse(DEFAULT_GRAMMAR).expect("built-in grammar parses")
    }

    /// Category index of the start padding symbol; the end symbol follows it.
    pub fn start_pad(&self) -> usize {
        self.terminals.len()
    }

    pub fn end_pad(&self) -> usize {
        self.terminals.len() + 1
    }

    /// Leftmost stochastic derivation of one string of terminals.
    pub fn sample_string<R: Rng + ?Sized>(&self, rng: &mut R, max_depth: usize) -> Result<Vec<String>, DataError> {
        let mut by_lhs: BTreeMap<&str, Vec<&Rule>> = BTreeMap::new();
        for r in &self.rules {
            by_lhs.entry(r.lhs.as_str()).or_default().push(r);
        }
        let mut out = Vec::new();
        // Stack of (symbol, depth), expanded leftmost first.
        let mut stack = vec![(self.start.as_str(), 0usize)];
        while let Some((sym, depth)) = stack.pop() {
            let Some(alts) = by_lhs.get(sym) else {
                out.push(sym.to_string());
                continue;
            };
            if depth >= max_depth {
                return Err(DataError::DerivationDepthExceeded { limit: max_depth });
            }
            let u: f64 = rng.gen();
            let mut acc = 0.0;
            let mut chosen = alts[alts.len() - 1];
            for r in alts {
                acc += r.prob;
                if u < acc {
                    chosen = r;
                    break;
                }
            }
            stack.extend(chosen.rhs.iter().rev().map(|s| (s.as_str(), depth + 1)));
        }
        Ok(out)
    }

    fn encode(&self, symbol: &str) -> usize {
        self.terminals.binary_search_by(|t| t.as_str().cmp(symbol)).expect("sampled symbols are terminals")
    }

    /// Consecutive triplets of `s s ⟨string⟩ s̄ s̄`, as category indices.
    pub fn triplets(&self, string: &[String]) -> Vec<[usize; 3]> {
        let mut padded = vec![self.start_pad(); 2];
        padded.extend(string.iter().map(|s| self.encode(s)));
        padded.extend([self.end_pad(); 2]);
        padded.windows(3).map(|w| [w[0], w[1], w[2]]).collect()
    }

    /// Printable name of a category index (`s` and `/s` for the padding).
    pub fn symbol_name(&self, index: usize) -> String {
        match index {
            i if i < self.terminals.len() => self.terminals[i].clone(),
            i if i == self.start_pad() => "s".into(),
            _ => "/s".into(),
        }
    }
}

/// Samples `n_strings` strings and returns every padded triplet as a row.
pub fn gen_pcfg_triplets(grammar: &PcfgGrammar, n_strings: usize, seed: u64) -> Result<CategoricalDataset, DataError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cells = Vec::new();
    for _ in 0..n_strings {
        let s = grammar.sample_string(&mut rng, DEFAULT_MAX_DEPTH)?;
        for t in grammar.triplets(&s) {
            cells.extend(t.iter().map(|&v| Some(v)));
        }
    }
    let names = ["first", "second", "third"].iter().map(|s| s.to_string()).collect();
    Ok(CategoricalDataset::new(names, vec![grammar.end_pad(); 3], cells)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub test_fraction: f64,
    pub seed: u64,
    pub cells_removed_per_test_row: usize,
}

impl SplitSpec {
    pub fn new(test_fraction: f64, seed: u64) -> Self {
        Self { test_fraction, seed, cells_removed_per_test_row: 1 }
    }
}

/// A model-visible copy of the data together with the hidden truth.
///
/// `visible` keeps every row; test rows lose some observed cells, whose
/// values live only in `key`.
#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub visible: CategoricalDataset,
    pub test_rows: Vec<usize>,
    pub key: AnswerKey,
}

/// Picks `round(test_fraction · N)` rows and hides, in each, a uniformly
/// chosen set of `cells_removed_per_test_row` observed cells.
pub fn make_split(data: &CategoricalDataset, spec: &SplitSpec) -> Result<Split, DataError> {
    if !(spec.test_fraction > 0.0 && spec.test_fraction < 1.0) {
        return Err(DataError::Split(format!("test fraction {} outside (0, 1)", spec.test_fraction)));
    }
    if spec.cells_removed_per_test_row == 0 {
        return Err(DataError::Split("must remove at least one cell per test row".into()));
    }
    let n = data.n_rows();
    let n_test = (spec.test_fraction * n as f64).round() as usize;
    if n_test == 0 || n_test >= n {
        return Err(DataError::Split(format!("{n_test} test rows out of {n}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut test_rows = index::sample(&mut rng, n, n_test).into_vec();
    test_rows.sort_unstable();
    let mut entries = Vec::new();
    for &row in &test_rows {
        let observed: Vec<usize> = (0..data.n_vars()).filter(|&d| data.cell(row, d).is_some()).collect();
        if observed.len() < spec.cells_removed_per_test_row {
            return Err(DataError::Split(format!("row {row} has only {} observed cells", observed.len())));
        }
        let mut picks = index::sample(&mut rng, observed.len(), spec.cells_removed_per_test_row).into_vec();
        picks.sort_unstable();
        for p in picks {
            let var = observed[p];
            entries.push(KeyEntry { row, var, value: data.cell(row, var).expect("observed") });
        }
    }
    let key = AnswerKey { entries };
    Ok(Split { visible: data.with_hidden(&key.targets()), test_rows, key })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    #[test]
    fn parses_the_basic_example() {
        let d = parse_dataset("a,b,c\n0,1,1\n1,0,?\n").unwrap();
        assert_eq!((d.n_rows(), d.n_vars(), d.n_missing()), (2, 3, 1));
        assert_eq!(d.cell(1, 2), None);
        assert_eq!(d.cardinalities(), &[1, 1, 1]);
    }

    #[test]
    fn declared_cardinality_wins_and_violations_are_located() {
        let d = parse_dataset("a:4,b\n0,2\n1,0\n").unwrap();
        assert_eq!(d.cardinalities(), &[4, 2]);
        match parse_dataset("a,b:2\n0,1\n\n1,3\n") {
            Err(DataError::CardinalityViolation { line, column, value, cardinality }) => {
                assert_eq!((line, column, value, cardinality), (4, 2, 3, 2));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn parse_errors_carry_locations() {
        match parse_dataset("a,b\n0,1\n1,x\n") {
            Err(DataError::Parse { line, column, .. }) => assert_eq!((line, column), (3, 2)),
            other => panic!("{other:?}"),
        }
        assert!(matches!(parse_dataset("a,b\n0,1,1\n"), Err(DataError::Parse { line: 2, .. })));
        assert!(matches!(parse_dataset("a:q\n0\n"), Err(DataError::Parse { line: 1, column: 1, .. })));
        assert!(matches!(parse_dataset(""), Err(DataError::Parse { .. })));
    }

    #[test]
    fn save_load_round_trip() {
        let d = gen_xor(2);
        let path = std::env::temp_dir().join(format!("clgp-data-{}.csv", std::process::id()));
        save_dataset(&d, &path).unwrap();
        assert_eq!(load_dataset(&path).unwrap(), d);
        std::fs::remove_file(path).unwrap();
    }

    #[test]
    fn xor_generator_shape_and_relation() {
        let d = gen_xor(25);
        assert_eq!(d.n_rows(), 104);
        assert_eq!(d.n_missing(), 4);
        assert_eq!(gen_xor(1).n_rows(), 8);
        for n in 0..100 {
            let r = d.row(n);
            assert_eq!(r[0].unwrap() ^ r[1].unwrap(), r[2].unwrap());
        }
        let key = xor_answer_key(25);
        assert_eq!(key.targets(), d.missing_cells());
        for e in &key.entries {
            assert_eq!(d.cell(e.row, 0).unwrap() ^ d.cell(e.row, 1).unwrap(), e.value);
        }
    }

    #[test]
    fn default_grammar_structure() {
        let g = PcfgGrammar::default_grammar();
        assert_eq!(g.start, "alpha");
        assert_eq!(g.terminals, ["a", "b", "c", "d", "e", "f", "g"]);
        assert_eq!((g.start_pad(), g.end_pad()), (7, 8));
        assert_eq!(g.rules.len(), 10);
    }

    #[test]
    fn grammar_rejects_bad_probabilities() {
        assert!(matches!(PcfgGrammar::parse("S -> a [0.5] | b [0.4]\n"), Err(DataError::Grammar { .. })));
        assert!(matches!(PcfgGrammar::parse("S -> a 0.5\n"), Err(DataError::Grammar { line: 1, .. })));
        assert!(matches!(PcfgGrammar::parse("S a [1]\n"), Err(DataError::Grammar { line: 1, .. })));
    }

    #[test]
    fn recursive_grammar_hits_the_depth_guard() {
        let g = PcfgGrammar::parse("S -> S a [1.0]\n").unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(g.sample_string(&mut rng, 10), Err(DataError::DerivationDepthExceeded { limit: 10 })));
    }

    #[test]
    fn windowing_of_ceb() {
        let g = PcfgGrammar::default_grammar();
        let s: Vec<String> = ["c", "e", "b"].iter().map(|s| s.to_string()).collect();
        let names: Vec<String> =
            g.triplets(&s).iter().map(|t| t.iter().map(|&i| g.symbol_name(i)).collect::<Vec<_>>().join(" ")).collect();
        assert_eq!(names, ["s s c", "s c e", "c e b", "e b /s", "b /s /s"]);
    }

    #[test]
    fn derivation_frequencies_follow_the_rules() {
        let g = PcfgGrammar::default_grammar();
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let n = 100_000;
        let mut first = [0usize; 3];
        let mut short = 0;
        let mut rule_counts: BTreeMap<(String, Vec<String>), usize> = BTreeMap::new();
        for _ in 0..n {
            let s = g.sample_string(&mut rng, DEFAULT_MAX_DEPTH).unwrap();
            first[(s[0].as_bytes()[0] - b'a') as usize] += 1;
            if s.len() == 2 {
                short += 1;
                *rule_counts.entry(("C".into(), vec![s[1].clone()])).or_default() += 1;
            } else {
                *rule_counts.entry(("B".into(), vec![s[1].clone()])).or_default() += 1;
            }
        }
        let freq: Vec<f64> = first.iter().map(|&c| c as f64 / n as f64).collect();
        for (f, p) in freq.iter().zip([0.5, 0.3, 0.2]) {
            assert!((f - p).abs() < 0.01, "{freq:?}");
        }
        assert!((short as f64 / n as f64 - 0.5).abs() < 0.01);
        // Chi-square over the B and C expansions (2 dof, 0.999 quantile 13.8).
        for (nt, total) in [("B", n - short), ("C", short)] {
            let chi: f64 = g
                .rules
                .iter()
                .filter(|r| r.lhs == nt)
                .map(|r| {
                    let observed = *rule_counts.get(&(nt.to_string(), r.rhs.clone())).unwrap_or(&0) as f64;
                    let expected = r.prob * total as f64;
                    (observed - expected).powi(2) / expected
                })
                .sum();
            assert!(chi < 13.8, "{nt}: chi-square {chi}");
        }
    }

    #[test]
    fn pcfg_triplets_are_deterministic_and_padded() {
        let g = PcfgGrammar::default_grammar();
        let a = gen_pcfg_triplets(&g, 50, 7).unwrap();
        assert_eq!(a, gen_pcfg_triplets(&g, 50, 7).unwrap());
        assert_ne!(a, gen_pcfg_triplets(&g, 50, 8).unwrap());
        assert_eq!(a.cardinalities(), &[8, 8, 8]);
        let starts = (0..a.n_rows()).filter(|&n| a.cell(n, 0) == Some(7) && a.cell(n, 1) == Some(7)).count();
        assert_eq!(starts, 50);
        assert!((200..=250).contains(&a.n_rows()));
    }

    #[test]
    fn split_sizes_and_reconstruction() {
        let g = PcfgGrammar::default_grammar();
        let full = gen_pcfg_triplets(&g, 250, 1).unwrap();
        let data = CategoricalDataset::new(full.names().to_vec(), full.cardinalities().to_vec(), full.cells()[..3000].to_vec()).unwrap();
        let split = make_split(&data, &SplitSpec::new(0.2, 3)).unwrap();
        assert_eq!(split.test_rows.len(), 200);
        assert_eq!(split.key.len(), 200);
        assert_eq!(split, make_split(&data, &SplitSpec::new(0.2, 3)).unwrap());
        assert_eq!(split.visible.n_rows(), 1000);
        let mut rebuilt = split.visible.cells().to_vec();
        for e in &split.key.entries {
            assert_eq!(rebuilt[e.row * 3 + e.var], None);
            rebuilt[e.row * 3 + e.var] = Some(e.value);
        }
        assert_eq!(rebuilt, data.cells());
    }

    #[test]
    fn split_rejects_degenerate_specs() {
        let d = gen_xor(1);
        assert!(matches!(make_split(&d, &SplitSpec::new(0.0, 1)), Err(DataError::Split(_))));
        assert!(matches!(make_split(&d, &SplitSpec::new(0.01, 1)), Err(DataError::Split(_))));
        let spec = SplitSpec { cells_removed_per_test_row: 4, ..SplitSpec::new(0.5, 1) };
        assert!(matches!(make_split(&d, &spec), Err(DataError::Split(_))));
    }

    #[test]
    fn answer_key_csv_round_trip() {
        let key = xor_answer_key(3);
        assert_eq!(AnswerKey::from_csv(&key.to_csv()).unwrap(), key);
    }

    proptest! {
        #[test]
        fn format_parse_round_trip(
            cards in proptest::collection::vec(1usize..6, 1..5),
            seed in any::<u64>(),
            n in 1usize..12,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let rows: Vec<Vec<Option<usize>>> = (0..n)
                .map(|_| cards.iter().map(|&k| if rng.gen_bool(0.2) { None } else { Some(rng.gen_range(0..=k)) }).collect())
                .collect();
            let d = CategoricalDataset::from_rows(cards.clone(), &rows).unwrap();
            prop_assert_eq!(parse_dataset(&format_dataset(&d)).unwrap(), d);
        }

        #[test]
        fn split_partitions_cells(seed in any::<u64>(), frac in 0.1f64..0.9) {
            let d = gen_xor(5);
            let split = make_split(&d, &SplitSpec::new(frac, seed)).unwrap();
            let hidden: usize = split.visible.n_missing() - d.n_missing();
            prop_assert_eq!(hidden, split.key.len());
            for e in &split.key.entries {
                prop_assert_eq!(d.cell(e.row, e.var), Some(e.value));
                prop_assert_eq!(split.visible.cell(e.row, e.var), None);
            }
        }
    }
}
