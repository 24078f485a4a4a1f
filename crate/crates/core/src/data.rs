//! Rating and trust file ingestion, cross-validation folds and cold-start
//! filtering.
//!
//! Ratings files are `user<TAB>item<TAB>weight` and trust files are
//! `truster<TAB>trustee`, UTF-8, one record per line. Lines starting with `#`
//! are comments. Labels are kept verbatim and mapped to dense indices in
//! order of first appearance.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{input, Error, Result};
use crate::sparse::SparseMatrix;

/// Bijection between original labels and dense indices.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LabelIndex {
    labels: Vec<String>,
    index: HashMap<String, usize>,
}

impl LabelIndex {
    pub fn from_labels(labels: impl IntoIterator<Item = String>) -> Result<Self> {
        let mut out = Self::default();
        for l in labels {
            if out.index.contains_key(&l) {
                return input(format!("duplicate label {l:?}"));
            }
            out.intern(&l);
        }
        Ok(out)
    }

    pub fn intern(&mut self, label: &str) -> usize {
        if let Some(&i) = self.index.get(label) {
            return i;
        }
        let i = self.labels.len();
        self.labels.push(label.to_owned());
        self.index.insert(label.to_owned(), i);
        i
    }

    pub fn get(&self, label: &str) -> Option<usize> {
        self.index.get(label).copied()
    }

    pub fn label(&self, i: usize) -> &str {
        &self.labels[i]
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }
}

/// Binary implicit feedback: which users consumed which items.
#[derive(Debug, Clone)]
pub struct InteractionLog {
    pub users: Arc<LabelIndex>,
    pub items: Arc<LabelIndex>,
    /// Sorted by `(user, item)`, no duplicates.
    pub positives: Vec<(usize, usize)>,
    pub y: SparseMatrix,
}

impl InteractionLog {
    pub fn new(
        users: Arc<LabelIndex>,
        items: Arc<LabelIndex>,
        mut positives: Vec<(usize, usize)>,
    ) -> Result<Self> {
        positives.sort_unstable();
        positives.dedup();
        let triplets: Vec<_> = positives.iter().map(|&(u, i)| (u, i, 1.0)).collect();
        let y = SparseMatrix::from_triplets(users.len(), items.len(), &triplets)?;
        Ok(Self {
            users,
            items,
            positives,
            y,
        })
    }

    pub fn n_users(&self) -> usize {
        self.users.len()
    }

    pub fn n_items(&self) -> usize {
        self.items.len()
    }

    pub fn len(&self) -> usize {
        self.positives.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positives.is_empty()
    }

    /// Items consumed by `user`, ascending.
    pub fn items_of(&self, user: usize) -> &[usize] {
        self.y.row(user).0
    }

    pub fn contains(&self, user: usize, item: usize) -> bool {
        self.items_of(user).binary_search(&item).is_ok()
    }

    /// Same label spaces, different interactions.
    pub fn with_positives(&self, positives: Vec<(usize, usize)>) -> Result<Self> {
        Self::new(Arc::clone(&self.users), Arc::clone(&self.items), positives)
    }

    /// Number of positives per user.
    pub fn user_degrees(&self) -> Vec<usize> {
        (0..self.n_users()).map(|u| self.y.row_nnz(u)).collect()
    }

    /// Writes the log as a ratings file with unit weights.
    pub fn write_tsv(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        for &(u, i) in &self.positives {
            writeln!(w, "{}\t{}\t1", self.users.label(u), self.items.label(i))?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Directed binary trust relations over the interaction log's users.
#[derive(Debug, Clone)]
pub struct SocialLog {
    pub s: SparseMatrix,
}

/// Feedback and trust loaded into one user space.
#[derive(Debug, Clone)]
pub struct SocialDataset {
    pub feedback: InteractionLog,
    pub social: SocialLog,
}

#[derive(Debug, Clone, Default)]
pub struct FeedbackOptions {
    /// Keep only rows whose weight is strictly greater than this.
    pub rating_threshold: Option<f64>,
    /// Skip the first non-comment line.
    pub header: bool,
}

fn records(path: &Path, header: bool) -> Result<Vec<(usize, Vec<String>)>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    let mut skip_header = header;
    for (n, line) in reader.lines().enumerate() {
        let line = line?;
        let trimmed = line.trim_end_matches(['\r', '\n']);
        if trimmed.trim().is_empty() || trimmed.starts_with('#') {
            continue;
        }
        if skip_header {
            skip_header = false;
            continue;
        }
        out.push((n + 1, trimmed.split('\t').map(str::to_owned).collect()));
    }
    Ok(out)
}

fn parse_error(path: &Path, line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_owned(),
        line,
        message: message.into(),
    }
}

/// Reads a ratings file into a binary interaction log.
///
/// Without a threshold the weight column is ignored (and may be absent).
pub fn load_feedback(path: &Path, options: &FeedbackOptions) -> Result<InteractionLog> {
    let mut users = LabelIndex::default();
    let mut items = LabelIndex::default();
    let mut pairs = Vec::new();
    for (line, fields) in records(path, options.header)? {
        let fields: Vec<&str> = fields.iter().map(|f| f.trim()).collect();
        if fields.len() < 2 || fields.len() > 3 || fields[..2].iter().any(|f| f.is_empty()) {
            return Err(parse_error(
                path,
                line,
                format!("expected user<TAB>item<TAB>weight, got {} fields", fields.len()),
            ));
        }
        if let Some(threshold) = options.rating_threshold {
            let Some(raw) = fields.get(2) else {
                return Err(parse_error(path, line, "missing weight column"));
            };
            let weight: f64 = raw
                .parse()
                .map_err(|_| parse_error(path, line, format!("weight {raw:?} is not a number")))?;
            if weight <= threshold {
                continue;
            }
        }
        let u = users.intern(fields[0]);
        let i = items.intern(fields[1]);
        pairs.push((u, i));
    }
    if pairs.is_empty() {
        return input(format!("{}: no interactions survived loading", path.display()));
    }
    InteractionLog::new(Arc::new(users), Arc::new(items), pairs)
}

/// Reads a trust file. Users that are new to `feedback` are appended to its
/// user space, so the feedback log is rebuilt with the enlarged user count.
pub fn load_social(path: &Path, header: bool, feedback: &mut InteractionLog) -> Result<SocialLog> {
    let mut users = (*feedback.users).clone();
    let mut edges = Vec::new();
    for (line, fields) in records(path, header)? {
        let fields: Vec<&str> = fields.iter().map(|f| f.trim()).collect();
        if fields.len() < 2 || fields[..2].iter().any(|f| f.is_empty()) {
            return Err(parse_error(path, line, "expected truster<TAB>trustee"));
        }
        let a = users.intern(fields[0]);
        let b = users.intern(fields[1]);
        if a != b {
            edges.push((a, b, 1.0));
        }
    }
    if users.len() != feedback.n_users() {
        *feedback = InteractionLog::new(
            Arc::new(users),
            Arc::clone(&feedback.items),
            std::mem::take(&mut feedback.positives),
        )?;
    }
    let m = feedback.n_users();
    let s = SparseMatrix::from_triplets(m, m, &edges)?.binarized();
    Ok(SocialLog { s })
}

impl SocialDataset {
    pub fn load(
        ratings: &Path,
        trust: &Path,
        options: &FeedbackOptions,
        trust_header: bool,
    ) -> Result<Self> {
        let mut feedback = load_feedback(ratings, options)?;
        let social = load_social(trust, trust_header, &mut feedback)?;
        Ok(Self { feedback, social })
    }
}

/// Fold assignment of every positive of an interaction log.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitPlan {
    pub fold_count: usize,
    pub seed: u64,
    /// `assignment[k]` is the fold of `log.positives[k]`.
    pub assignment: Vec<usize>,
}

/// Per-user stratified random `folds`-way partition of the positives.
///
/// Each user's positives are shuffled and dealt round-robin starting from a
/// random fold, so per-user fold sizes differ by at most one.
pub fn kfold_split(log: &InteractionLog, folds: usize, seed: u64) -> Result<SplitPlan> {
    if folds < 2 {
        return input(format!("kfold_split: need at least 2 folds, got {folds}"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut assignment = vec![0usize; log.len()];
    let mut start = 0;
    while start < log.positives.len() {
        let user = log.positives[start].0;
        let end = start + log.positives[start..].partition_point(|&(u, _)| u == user);
        let mut slots: Vec<usize> = (start..end).collect();
        slots.shuffle(&mut rng);
        let offset = rng.gen_range(0..folds);
        for (rank, slot) in slots.into_iter().enumerate() {
            assignment[slot] = (offset + rank) % folds;
        }
        start = end;
    }
    Ok(SplitPlan {
        fold_count: folds,
        seed,
        assignment,
    })
}

impl SplitPlan {
    /// `(train, test)` for one fold: test is the fold, train everything else.
    pub fn train_test(
        &self,
        log: &InteractionLog,
        fold: usize,
    ) -> Result<(InteractionLog, InteractionLog)> {
        if fold >= self.fold_count {
            return input(format!("fold {fold} out of range 0..{}", self.fold_count));
        }
        if self.assignment.len() != log.len() {
            return input("split plan does not belong to this log");
        }
        let (test, train): (Vec<_>, Vec<_>) = log
            .positives
            .iter()
            .zip(&self.assignment)
            .partition(|(_, &f)| f == fold);
        let strip = |v: Vec<(&(usize, usize), &usize)>| v.into_iter().map(|(p, _)| *p).collect();
        Ok((log.with_positives(strip(train))?, log.with_positives(strip(test))?))
    }

    /// Writes `user<TAB>item<TAB>fold` lines.
    pub fn write_manifest(&self, log: &InteractionLog, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        writeln!(w, "# folds={} seed={}", self.fold_count, self.seed)?;
        for (&(u, i), f) in log.positives.iter().zip(&self.assignment) {
            writeln!(w, "{}\t{}\t{}", log.users.label(u), log.items.label(i), f)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Keeps the interactions of users with strictly fewer than `max_records` of them.
pub fn cold_start_filter(log: &InteractionLog, max_records: usize) -> Result<InteractionLog> {
    if max_records == 0 {
        return input("cold_start_filter: max_records must be at least 1");
    }
    let degrees = log.user_degrees();
    let kept = log
        .positives
        .iter()
        .copied()
        .filter(|&(u, _)| degrees[u] < max_records)
        .collect();
    log.with_positives(kept)
}

/// Moves `floor(fraction · degree)` random positives of every user into a
/// held-out log; returns `(kept, held_out)`.
pub fn holdout(
    log: &InteractionLog,
    fraction: f64,
    seed: u64,
) -> Result<(InteractionLog, InteractionLog)> {
    if !(0.0..1.0).contains(&fraction) {
        return input(format!("holdout fraction {fraction} must be in [0, 1)"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut kept = Vec::with_capacity(log.len());
    let mut held = Vec::new();
    for u in 0..log.n_users() {
        let mut items = log.items_of(u).to_vec();
        items.shuffle(&mut rng);
        let n_held = (items.len() as f64 * fraction).floor() as usize;
        for (rank, i) in items.into_iter().enumerate() {
            if rank < n_held {
                held.push((u, i));
            } else {
                kept.push((u, i));
            }
        }
    }
    Ok((log.with_positives(kept)?, log.with_positives(held)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn file(contents: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(contents.as_bytes()).unwrap();
        f
    }

    #[test]
    fn strict_threshold() {
        let f = file("a\tx\t3\na\ty\t4\n");
        let opts = FeedbackOptions {
            rating_threshold: Some(3.0),
            header: false,
        };
        let log = load_feedback(f.path(), &opts).unwrap();
        assert_eq!(log.len(), 1);
        assert_eq!(log.items.label(log.positives[0].1), "y");
    }

    #[test]
    fn duplicates_collapse() {
        let f = file("# comment\na\tx\t1\na\tx\t5\nb\tx\t2\n");
        let log = load_feedback(f.path(), &FeedbackOptions::default()).unwrap();
        assert_eq!(log.len(), 2);
        assert_eq!(log.y.get(0, 0), 1.0);
    }

    #[test]
    fn malformed_row_reports_line() {
        let f = file("a\tx\t1\nbroken\n");
        let err = load_feedback(f.path(), &FeedbackOptions::default()).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }), "{err}");
        let f = file("a\tx\tlots\n");
        let opts = FeedbackOptions {
            rating_threshold: Some(1.0),
            header: false,
        };
        let err = load_feedback(f.path(), &opts).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 1, .. }), "{err}");
    }

    #[test]
    fn empty_result_is_an_error() {
        let f = file("a\tx\t1\n");
        let opts = FeedbackOptions {
            rating_threshold: Some(3.0),
            header: false,
        };
        assert!(matches!(load_feedback(f.path(), &opts), Err(Error::Input(_))));
    }

    #[test]
    fn header_is_skipped() {
        let f = file("userID\tartistID\tweight\n2\t51\t13883\n");
        let opts = FeedbackOptions {
            rating_threshold: None,
            header: true,
        };
        let log = load_feedback(f.path(), &opts).unwrap();
        assert_eq!(log.users.labels(), &["2".to_owned()]);
    }

    #[test]
    fn social_is_directed_and_drops_self_loops() {
        let fb = file("a\tx\t1\nb\ty\t1\n");
        let tr = file("a\tb\nb\ta\nc\tc\na\tc\n");
        let mut log = load_feedback(fb.path(), &FeedbackOptions::default()).unwrap();
        let social = load_social(tr.path(), false, &mut log).unwrap();
        assert_eq!(log.n_users(), 3);
        assert_eq!(log.y.n_rows(), 3);
        assert_eq!(social.s.nnz(), 3);
        assert_eq!(social.s.get(0, 1), 1.0);
        assert_eq!(social.s.get(1, 0), 1.0);
        assert_eq!(social.s.get(2, 2), 0.0);
        assert!(log.items_of(2).is_empty());
    }

    #[test]
    fn malformed_trust_row() {
        let fb = file("a\tx\t1\n");
        let tr = file("a\tb\nlonely\n");
        let mut log = load_feedback(fb.path(), &FeedbackOptions::default()).unwrap();
        let err = load_social(tr.path(), false, &mut log).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }));
    }

    fn toy_log(per_user: &[usize]) -> InteractionLog {
        let users = LabelIndex::from_labels((0..per_user.len()).map(|u| format!("u{u}"))).unwrap();
        let n_items = per_user.iter().copied().max().unwrap_or(0);
        let items = LabelIndex::from_labels((0..n_items).map(|i| format!("i{i}"))).unwrap();
        let pairs = per_user
            .iter()
            .enumerate()
            .flat_map(|(u, &c)| (0..c).map(move |i| (u, i)))
            .collect();
        InteractionLog::new(Arc::new(users), Arc::new(items), pairs).unwrap()
    }

    #[test]
    fn even_split() {
        let log = toy_log(&[10]);
        let plan = kfold_split(&log, 5, 1).unwrap();
        for f in 0..5 {
            assert_eq!(plan.assignment.iter().filter(|&&a| a == f).count(), 2);
        }
    }

    #[test]
    fn folds_partition_and_are_deterministic() {
        let log = toy_log(&[7, 3, 1, 12, 0, 5]);
        let plan = kfold_split(&log, 5, 42).unwrap();
        assert_eq!(plan, kfold_split(&log, 5, 42).unwrap());
        let mut seen = Vec::new();
        for f in 0..5 {
            let (train, test) = plan.train_test(&log, f).unwrap();
            assert_eq!(train.len() + test.len(), log.len());
            for p in &test.positives {
                assert!(!train.positives.contains(p));
            }
            seen.extend(test.positives);
        }
        seen.sort_unstable();
        assert_eq!(seen, log.positives);
        // per-user balance
        for u in 0..6 {
            let counts: Vec<usize> = (0..5)
                .map(|f| {
                    log.positives
                        .iter()
                        .zip(&plan.assignment)
                        .filter(|(p, &a)| p.0 == u && a == f)
                        .count()
                })
                .collect();
            let (lo, hi) = (counts.iter().min().unwrap(), counts.iter().max().unwrap());
            assert!(hi - lo <= 1, "user {u}: {counts:?}");
        }
    }

    #[test]
    fn too_few_folds() {
        assert!(kfold_split(&toy_log(&[3]), 1, 0).is_err());
    }

    #[test]
    fn cold_start_boundary() {
        let log = toy_log(&[19, 20, 3]);
        let cold = cold_start_filter(&log, 20).unwrap();
        let degrees = cold.user_degrees();
        assert_eq!(degrees, vec![19, 0, 3]);
        assert!(cold_start_filter(&log, 0).is_err());
    }

    #[test]
    fn holdout_partitions() {
        let log = toy_log(&[10, 1, 25]);
        let (kept, held) = holdout(&log, 0.2, 5).unwrap();
        assert_eq!(held.user_degrees(), vec![2, 0, 5]);
        assert_eq!(kept.len() + held.len(), log.len());
        assert!(held.positives.iter().all(|p| !kept.positives.contains(p)));
        assert!(holdout(&log, 1.0, 5).is_err());
    }

    #[test]
    fn round_trip() {
        let log = toy_log(&[3, 1, 4]);
        let f = tempfile::NamedTempFile::new().unwrap();
        log.write_tsv(f.path()).unwrap();
        let back = load_feedback(f.path(), &FeedbackOptions::default()).unwrap();
        assert_eq!(back.y, log.y);
        assert_eq!(back.users.labels(), log.users.labels());
    }
}
