//! Users, time-stamped interactions and the labeled link multigraph.
//!
//! On disk a corpus is UTF-8 JSON lines. The first line is a header, every
//! following line is either an interaction or a link:
//!
//! ```text
//! {"num_users":2,"num_actions":3,"vocab_size":100,"num_labels":1,"time_mode":"normalized"}
//! {"kind":"i","u":0,"a":2,"w":[4,17,17],"t":0.25}
//! {"kind":"i","u":1,"a":0,"w":[],"t":0.5,"tags":[3]}
//! {"kind":"l","s":1,"u":0,"l":0}
//! ```
//!
//! Field order is fixed and unknown fields are rejected. With
//! `"time_mode":"raw"` the `t` values are arbitrary reals and are min-max
//! normalized over the whole corpus on load.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::CorpusError;
use crate::rng;

/// A single user event: an action on a bag of tokens at a normalized time.
#[derive(Debug, Clone, PartialEq)]
pub struct Interaction {
    pub user: usize,
    pub action: usize,
    pub tokens: Vec<usize>,
    pub time: f64,
    /// Optional content tags, consumed only by similarity initialization.
    pub tags: Option<Vec<usize>>,
}

/// Directed labeled edge `source -> target`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Link {
    pub source: usize,
    pub target: usize,
    pub label: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TimeMode {
    Normalized,
    Raw,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct HeaderRecord {
    num_users: usize,
    num_actions: usize,
    vocab_size: usize,
    num_labels: usize,
    time_mode: TimeMode,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct InteractionRecord {
    kind: String,
    u: usize,
    a: usize,
    w: Vec<usize>,
    t: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    tags: Option<Vec<usize>>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LinkRecord {
    kind: String,
    s: usize,
    u: usize,
    l: usize,
}

const HEADER_FIELDS: &[&str] = &["num_users", "num_actions", "vocab_size", "num_labels", "time_mode"];
const INTERACTION_FIELDS: &[&str] = &["kind", "u", "a", "w", "t", "tags"];
const LINK_FIELDS: &[&str] = &["kind", "s", "u", "l"];

/// Immutable, validated corpus with per-user indices.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    num_users: usize,
    num_actions: usize,
    vocab_size: usize,
    num_labels: usize,
    interactions: Vec<Interaction>,
    links: Vec<Link>,
    user_interactions: Vec<Vec<usize>>,
    user_in_links: Vec<Vec<usize>>,
    user_out_links: Vec<Vec<usize>>,
}

impl Corpus {
    /// Validates ids against the declared sizes and builds the per-user
    /// indices. Times must already be normalized.
    pub fn new(
        num_users: usize,
        num_actions: usize,
        vocab_size: usize,
        num_labels: usize,
        interactions: Vec<Interaction>,
        links: Vec<Link>,
    ) -> Result<Self, CorpusError> {
        Self::build(num_users, num_actions, vocab_size, num_labels, interactions, links, false)
    }

    fn build(
        num_users: usize,
        num_actions: usize,
        vocab_size: usize,
        num_labels: usize,
        interactions: Vec<Interaction>,
        links: Vec<Link>,
        allow_empty: bool,
    ) -> Result<Self, CorpusError> {
        for (name, v) in [
            ("num_users", num_users),
            ("num_actions", num_actions),
            ("vocab_size", vocab_size),
            ("num_labels", num_labels),
        ] {
            if v == 0 {
                return Err(CorpusError::Invalid(format!("{name} must be positive")));
            }
        }
        if interactions.is_empty() && !allow_empty {
            return Err(CorpusError::Empty);
        }
        for (i, d) in interactions.iter().enumerate() {
            // Line numbers are reported relative to the record position when
            // the corpus is built in memory.
            let line = i + 2;
            check_bound(line, "u", d.user, num_users)?;
            check_bound(line, "a", d.action, num_actions)?;
            for &w in &d.tokens {
                check_bound(line, "w", w, vocab_size)?;
            }
            if !(0.0..=1.0).contains(&d.time) {
                return Err(CorpusError::TimeOutOfRange { line, value: d.time });
            }
        }
        for (i, l) in links.iter().enumerate() {
            let line = interactions.len() + i + 2;
            check_bound(line, "s", l.source, num_users)?;
            check_bound(line, "u", l.target, num_users)?;
            check_bound(line, "l", l.label, num_labels)?;
            if l.source == l.target {
                return Err(CorpusError::SelfLink { line, user: l.source });
            }
        }

        let mut user_interactions = vec![Vec::new(); num_users];
        for (i, d) in interactions.iter().enumerate() {
            user_interactions[d.user].push(i);
        }
        let mut user_in_links = vec![Vec::new(); num_users];
        let mut user_out_links = vec![Vec::new(); num_users];
        for (i, l) in links.iter().enumerate() {
            user_out_links[l.source].push(i);
            user_in_links[l.target].push(i);
        }
        let corpus = Self {
            num_users,
            num_actions,
            vocab_size,
            num_labels,
            interactions,
            links,
            user_interactions,
            user_in_links,
            user_out_links,
        };
        corpus.check_indices()?;
        Ok(corpus)
    }

    pub fn num_users(&self) -> usize {
        self.num_users
    }

    pub fn num_actions(&self) -> usize {
        self.num_actions
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn num_labels(&self) -> usize {
        self.num_labels
    }

    pub fn interactions(&self) -> &[Interaction] {
        &self.interactions
    }

    pub fn links(&self) -> &[Link] {
        &self.links
    }

    /// Indices into [`Corpus::interactions`] for `user` (the set `D_u`).
    pub fn user_interactions(&self, user: usize) -> &[usize] {
        &self.user_interactions[user]
    }

    /// Indices into [`Corpus::links`] of links pointing at `user`.
    pub fn user_in_links(&self, user: usize) -> &[usize] {
        &self.user_in_links[user]
    }

    /// Indices into [`Corpus::links`] of links leaving `user`.
    pub fn user_out_links(&self, user: usize) -> &[usize] {
        &self.user_out_links[user]
    }

    /// `|D_u| + |L_u|`, the per-user work estimate.
    pub fn user_load(&self, user: usize) -> usize {
        self.user_interactions[user].len() + self.user_in_links[user].len() + self.user_out_links[user].len()
    }

    pub fn has_tags(&self) -> bool {
        self.interactions.iter().any(|d| d.tags.is_some())
    }

    /// Verifies the per-user indices are exact inverses of the flat lists.
    pub fn check_indices(&self) -> Result<(), CorpusError> {
        let bad = |m: &str| Err(CorpusError::Invalid(format!("index mismatch: {m}")));
        let mut seen = vec![false; self.interactions.len()];
        for (u, list) in self.user_interactions.iter().enumerate() {
            for &i in list {
                if self.interactions[i].user != u || std::mem::replace(&mut seen[i], true) {
                    return bad("interactions");
                }
            }
        }
        if seen.iter().any(|s| !s) {
            return bad("interactions");
        }
        let mut out_seen = vec![false; self.links.len()];
        let mut in_seen = vec![false; self.links.len()];
        for u in 0..self.num_users {
            for &i in &self.user_out_links[u] {
                if self.links[i].source != u || std::mem::replace(&mut out_seen[i], true) {
                    return bad("outward links");
                }
            }
            for &i in &self.user_in_links[u] {
                if self.links[i].target != u || std::mem::replace(&mut in_seen[i], true) {
                    return bad("inward links");
                }
            }
        }
        if out_seen.iter().chain(&in_seen).any(|s| !s) {
            return bad("links");
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, CorpusError> {
        Self::read_from(File::open(path)?)
    }

    pub fn read_from(reader: impl Read) -> Result<Self, CorpusError> {
        let reader = BufReader::new(reader);
        let mut header: Option<HeaderRecord> = None;
        let mut interactions = Vec::new();
        let mut links = Vec::new();
        let mut interaction_lines = Vec::new();
        let mut link_lines = Vec::new();

        for (idx, line) in reader.lines().enumerate() {
            let line_no = idx + 1;
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let map: Map<String, Value> = serde_json::from_str(&line)
                .map_err(|e| malformed(line_no, e.to_string()))?;
            match &header {
                None => {
                    check_field_order(line_no, &map, HEADER_FIELDS)?;
                    let h: HeaderRecord = serde_json::from_value(Value::Object(map))
                        .map_err(|e| malformed(line_no, e.to_string()))?;
                    header = Some(h);
                }
                Some(h) => match map.get("kind").and_then(Value::as_str) {
                    Some("i") => {
                        check_field_order(line_no, &map, INTERACTION_FIELDS)?;
                        let r: InteractionRecord = serde_json::from_value(Value::Object(map))
                            .map_err(|e| malformed(line_no, e.to_string()))?;
                        check_bound(line_no, "u", r.u, h.num_users)?;
                        check_bound(line_no, "a", r.a, h.num_actions)?;
                        for &w in &r.w {
                            check_bound(line_no, "w", w, h.vocab_size)?;
                        }
                        if !r.t.is_finite() {
                            return Err(malformed(line_no, "non-finite time".into()));
                        }
                        if h.time_mode == TimeMode::Normalized && !(0.0..=1.0).contains(&r.t) {
                            return Err(CorpusError::TimeOutOfRange { line: line_no, value: r.t });
                        }
                        interaction_lines.push(line_no);
                        interactions.push(Interaction {
                            user: r.u,
                            action: r.a,
                            tokens: r.w,
                            time: r.t,
                            tags: r.tags,
                        });
                    }
                    Some("l") => {
                        check_field_order(line_no, &map, LINK_FIELDS)?;
                        let r: LinkRecord = serde_json::from_value(Value::Object(map))
                            .map_err(|e| malformed(line_no, e.to_string()))?;
                        check_bound(line_no, "s", r.s, h.num_users)?;
                        check_bound(line_no, "u", r.u, h.num_users)?;
                        check_bound(line_no, "l", r.l, h.num_labels)?;
                        if r.s == r.u {
                            return Err(CorpusError::SelfLink { line: line_no, user: r.s });
                        }
                        link_lines.push(line_no);
                        links.push(Link { source: r.s, target: r.u, label: r.l });
                    }
                    Some(other) => return Err(malformed(line_no, format!("unknown record kind {other:?}"))),
                    None => return Err(malformed(line_no, "missing \"kind\"".into())),
                },
            }
        }

        let header = header.ok_or(CorpusError::Empty)?;
        if interactions.is_empty() {
            return Err(CorpusError::Empty);
        }
        if header.time_mode == TimeMode::Raw {
            let raw: Vec<f64> = interactions.iter().map(|d| d.time).collect();
            for (d, t) in interactions.iter_mut().zip(normalize_times(&raw)?) {
                d.time = t;
            }
        }
        Self::new(
            header.num_users,
            header.num_actions,
            header.vocab_size,
            header.num_labels,
            interactions,
            links,
        )
    }

    /// Writes the canonical (normalized-time) form.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), CorpusError> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<(), CorpusError> {
        let header = HeaderRecord {
            num_users: self.num_users,
            num_actions: self.num_actions,
            vocab_size: self.vocab_size,
            num_labels: self.num_labels,
            time_mode: TimeMode::Normalized,
        };
        writeln!(w, "{}", to_json(&header))?;
        for d in &self.interactions {
            let rec = InteractionRecord {
                kind: "i".into(),
                u: d.user,
                a: d.action,
                w: d.tokens.clone(),
                t: d.time,
                tags: d.tags.clone(),
            };
            writeln!(w, "{}", to_json(&rec))?;
        }
        for l in &self.links {
            let rec = LinkRecord { kind: "l".into(), s: l.source, u: l.target, l: l.label };
            writeln!(w, "{}", to_json(&rec))?;
        }
        Ok(())
    }

    /// Canonical file contents as a string.
    pub fn to_canonical_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_to(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("serde_json emits UTF-8")
    }

    /// Per-user stratified train/test split of interactions.
    ///
    /// Each user with `n` interactions contributes `round(n * fraction)` test
    /// interactions, capped so at least one stays in training. Links always
    /// stay in training; the test corpus has none.
    pub fn split_holdout(&self, fraction: f64, seed: u64) -> Result<(Corpus, Corpus), CorpusError> {
        if !(fraction > 0.0 && fraction < 1.0) {
            return Err(CorpusError::Invalid(format!("holdout fraction {fraction} not in (0, 1)")));
        }
        let mut is_test = vec![false; self.interactions.len()];
        for (u, list) in self.user_interactions.iter().enumerate() {
            let n = list.len();
            let n_test = ((n as f64 * fraction).round() as usize).min(n.saturating_sub(1));
            if n_test == 0 {
                continue;
            }
            let mut shuffled = list.clone();
            shuffled.shuffle(&mut rng::stream(seed, u as u64, rng::SPLIT_STREAM));
            for &i in &shuffled[..n_test] {
                is_test[i] = true;
            }
        }
        let (mut train, mut test) = (Vec::new(), Vec::new());
        for (d, &t) in self.interactions.iter().zip(&is_test) {
            if t {
                test.push(d.clone());
            } else {
                train.push(d.clone());
            }
        }
        let build = |ints: Vec<Interaction>, links: Vec<Link>| {
            Corpus::build(self.num_users, self.num_actions, self.vocab_size, self.num_labels, ints, links, true)
        };
        let train = build(train, self.links.clone())?;
        // The test side may be empty when every user is too small to give
        // anything up.
        let test = build(test, Vec::new())?;
        Ok((train, test))
    }
}

fn to_json<T: Serialize>(v: &T) -> String {
    serde_json::to_string(v).expect("record types always serialize")
}

fn malformed(line: usize, message: String) -> CorpusError {
    CorpusError::Malformed { line, message }
}

fn check_bound(line: usize, field: &'static str, value: usize, bound: usize) -> Result<(), CorpusError> {
    if value >= bound {
        Err(CorpusError::OutOfBounds { line, field, value, bound })
    } else {
        Ok(())
    }
}

/// Keys must appear in the order given by `expected`; missing required keys
/// are caught later by the typed deserializer.
fn check_field_order(line: usize, map: &Map<String, Value>, expected: &[&str]) -> Result<(), CorpusError> {
    let mut pos = 0;
    for key in map.keys() {
        match expected[pos..].iter().position(|e| e == key) {
            Some(off) => pos += off + 1,
            None => {
                let msg = if expected.contains(&key.as_str()) {
                    format!("field {key:?} out of order")
                } else {
                    format!("unknown field {key:?}")
                };
                return Err(malformed(line, msg));
            }
        }
    }
    Ok(())
}

/// Affine map of `[min, max]` onto `[0, 1]`; a degenerate range maps to 0.5.
pub fn normalize_times(raw: &[f64]) -> Result<Vec<f64>, CorpusError> {
    if raw.is_empty() {
        return Err(CorpusError::Empty);
    }
    let (lo, hi) = raw
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &t| (lo.min(t), hi.max(t)));
    if !(lo.is_finite() && hi.is_finite()) {
        return Err(CorpusError::Invalid("non-finite timestamp".into()));
    }
    if hi == lo {
        return Ok(vec![0.5; raw.len()]);
    }
    let span = hi - lo;
    Ok(raw.iter().map(|&t| ((t - lo) / span).clamp(0.0, 1.0)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(s: &str) -> Result<Corpus, CorpusError> {
        Corpus::read_from(s.as_bytes())
    }

    const HEADER: &str = r#"{"num_users":1,"num_actions":1,"vocab_size":1,"num_labels":1,"time_mode":"normalized"}"#;

    #[test]
    fn minimal_corpus() {
        let c = parse(&format!("{HEADER}\n{}\n", r#"{"kind":"i","u":0,"a":0,"w":[],"t":0.5}"#)).unwrap();
        assert_eq!(c.interactions().len(), 1);
        assert!(c.links().is_empty());
        assert_eq!(c.interactions()[0].time, 0.5);
    }

    #[test]
    fn raw_times_are_normalized_globally() {
        let text = concat!(
            r#"{"num_users":2,"num_actions":1,"vocab_size":1,"num_labels":1,"time_mode":"raw"}"#,
            "\n",
            r#"{"kind":"i","u":0,"a":0,"w":[],"t":100}"#,
            "\n",
            r#"{"kind":"i","u":1,"a":0,"w":[0],"t":200}"#,
            "\n",
            r#"{"kind":"i","u":1,"a":0,"w":[],"t":300}"#,
            "\n"
        );
        let c = parse(text).unwrap();
        let ts: Vec<f64> = c.interactions().iter().map(|d| d.time).collect();
        assert_eq!(ts, vec![0.0, 0.5, 1.0]);
    }

    #[test]
    fn action_at_bound_is_rejected_with_line() {
        let text = format!("{HEADER}\n{}\n", r#"{"kind":"i","u":0,"a":1,"w":[],"t":0.5}"#);
        match parse(&text) {
            Err(CorpusError::OutOfBounds { line, field, .. }) => {
                assert_eq!(line, 2);
                assert_eq!(field, "a");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn rejects_self_links_unknown_fields_and_bad_order() {
        let h2 = r#"{"num_users":2,"num_actions":1,"vocab_size":1,"num_labels":1,"time_mode":"normalized"}"#;
        let i = r#"{"kind":"i","u":0,"a":0,"w":[],"t":0.5}"#;
        let self_link = format!("{h2}\n{i}\n{}\n", r#"{"kind":"l","s":1,"u":1,"l":0}"#);
        assert!(matches!(parse(&self_link), Err(CorpusError::SelfLink { line: 3, user: 1 })));
        let unknown = format!("{h2}\n{}\n", r#"{"kind":"i","u":0,"a":0,"w":[],"t":0.5,"x":1}"#);
        assert!(matches!(parse(&unknown), Err(CorpusError::Malformed { line: 2, .. })));
        let order = format!("{h2}\n{}\n", r#"{"kind":"i","a":0,"u":0,"w":[],"t":0.5}"#);
        assert!(matches!(parse(&order), Err(CorpusError::Malformed { line: 2, .. })));
        let garbage = format!("{h2}\n{i}\nnot json\n");
        assert!(matches!(parse(&garbage), Err(CorpusError::Malformed { line: 3, .. })));
        assert!(matches!(parse(&format!("{h2}\n")), Err(CorpusError::Empty)));
        let late_time = format!("{h2}\n{}\n", r#"{"kind":"i","u":0,"a":0,"w":[],"t":1.5}"#);
        assert!(matches!(parse(&late_time), Err(CorpusError::TimeOutOfRange { .. })));
    }

    #[test]
    fn normalize_examples() {
        assert_eq!(normalize_times(&[100.0, 200.0, 300.0]).unwrap(), vec![0.0, 0.5, 1.0]);
        assert_eq!(normalize_times(&[7.0, 7.0, 7.0]).unwrap(), vec![0.5, 0.5, 0.5]);
        assert_eq!(normalize_times(&[0.0, 1.0, 4.0]).unwrap(), vec![0.0, 0.25, 1.0]);
        assert!(normalize_times(&[]).is_err());
    }

    fn corpus_with_counts(counts: &[usize]) -> Corpus {
        let mut ints = Vec::new();
        for (u, &n) in counts.iter().enumerate() {
            for j in 0..n {
                ints.push(Interaction { user: u, action: 0, tokens: vec![], time: j as f64 / 10.0, tags: None });
            }
        }
        let links = vec![Link { source: 0, target: 1, label: 0 }];
        Corpus::new(counts.len(), 1, 1, 1, ints, links).unwrap()
    }

    #[test]
    fn holdout_proportions_and_retention() {
        let c = corpus_with_counts(&[10, 1, 2]);
        let (train, test) = c.split_holdout(0.2, 3).unwrap();
        assert_eq!(train.user_interactions(0).len(), 8);
        assert_eq!(test.user_interactions(0).len(), 2);
        let (train, test) = c.split_holdout(0.5, 3).unwrap();
        assert_eq!(train.user_interactions(1).len(), 1);
        assert_eq!(test.user_interactions(1).len(), 0);
        assert_eq!(train.user_interactions(2).len(), 1);
        assert_eq!(train.links().len(), 1);
        assert!(test.links().is_empty());
        let again = c.split_holdout(0.5, 3).unwrap();
        assert_eq!(again.0, train);
        assert_eq!(again.1, test);
    }

    fn arb_corpus() -> impl proptest::strategy::Strategy<Value = Corpus> {
        use proptest::prelude::*;
        (2usize..6, 1usize..4, 1usize..7, 1usize..3).prop_flat_map(|(nu, na, nv, nl)| {
            let ints = proptest::collection::vec(
                (0..nu, 0..na, proptest::collection::vec(0..nv, 0..4), 0.0f64..=1.0),
                1..15,
            );
            let links = proptest::collection::vec((0..nu, 1..nu, 0..nl), 0..6);
            (ints, links).prop_map(move |(ints, links)| {
                let ints = ints
                    .into_iter()
                    .map(|(user, action, tokens, time)| Interaction { user, action, tokens, time, tags: None })
                    .collect();
                let links = links
                    .into_iter()
                    .map(|(source, shift, label)| Link { source, target: (source + shift) % nu, label })
                    .collect();
                Corpus::new(nu, na, nv, nl, ints, links).unwrap()
            })
        })
    }

    proptest::proptest! {
        #[test]
        fn canonical_form_round_trips(c in arb_corpus()) {
            let text = c.to_canonical_string();
            let back = parse(&text).unwrap();
            proptest::prop_assert_eq!(back.to_canonical_string(), text);
            proptest::prop_assert_eq!(back.interactions(), c.interactions());
            proptest::prop_assert_eq!(back.links(), c.links());
            let total: usize = (0..c.num_users()).map(|u| c.user_interactions(u).len()).sum();
            proptest::prop_assert_eq!(total, c.interactions().len());
        }
    }
}
