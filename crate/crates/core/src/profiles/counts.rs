use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, Interaction};

/// Sufficient statistics of the collapsed sampler.
///
/// * `topic_word[k][w]`, with per-topic token totals
/// * `topic_action[k][a]`, with per-topic interaction totals
/// * `profile_topic[r][k]`, with per-profile interaction totals
/// * `link[r][r'][l]` for links from a user in `r` to a user in `r'`, with
///   per-pair totals
///
/// Every link is stored once, under the current profiles of its endpoints.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CountTables {
    num_profiles: usize,
    num_topics: usize,
    vocab_size: usize,
    num_actions: usize,
    num_labels: usize,
    topic_word: Vec<u32>,
    topic_word_total: Vec<u32>,
    topic_action: Vec<u32>,
    topic_action_total: Vec<u32>,
    profile_topic: Vec<u32>,
    profile_total: Vec<u32>,
    link: Vec<u32>,
    link_total: Vec<u32>,
}

#[inline]
fn bump(slot: &mut u32, add: bool) {
    if add {
        *slot += 1;
    } else {
        *slot = slot.checked_sub(1).expect("count table underflow");
    }
}

impl CountTables {
    pub fn new(num_profiles: usize, num_topics: usize, vocab_size: usize, num_actions: usize, num_labels: usize) -> Self {
        Self {
            num_profiles,
            num_topics,
            vocab_size,
            num_actions,
            num_labels,
            topic_word: vec![0; num_topics * vocab_size],
            topic_word_total: vec![0; num_topics],
            topic_action: vec![0; num_topics * num_actions],
            topic_action_total: vec![0; num_topics],
            profile_topic: vec![0; num_profiles * num_topics],
            profile_total: vec![0; num_profiles],
            link: vec![0; num_profiles * num_profiles * num_labels],
            link_total: vec![0; num_profiles * num_profiles],
        }
    }

    /// Counts from scratch for the given user profiles and topic assignments.
    /// Users with no profile contribute neither profile-topic nor link counts.
    pub fn recount(
        corpus: &Corpus,
        num_profiles: usize,
        num_topics: usize,
        profile_of: impl Fn(usize) -> Option<usize>,
        topics: &[u32],
    ) -> Self {
        let mut c = Self::new(num_profiles, num_topics, corpus.vocab_size(), corpus.num_actions(), corpus.num_labels());
        for (d, &k) in corpus.interactions().iter().zip(topics) {
            let k = k as usize;
            c.add_interaction(k, d, true);
            if let Some(r) = profile_of(d.user) {
                c.add_profile_topic(r, k, true);
            }
        }
        for l in corpus.links() {
            if let (Some(rs), Some(rt)) = (profile_of(l.source), profile_of(l.target)) {
                c.add_link(rs, rt, l.label, true);
            }
        }
        c
    }

    pub fn num_profiles(&self) -> usize {
        self.num_profiles
    }

    pub fn num_topics(&self) -> usize {
        self.num_topics
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn num_actions(&self) -> usize {
        self.num_actions
    }

    pub fn num_labels(&self) -> usize {
        self.num_labels
    }

    /// Adds or removes the topic-word and topic-action counts of `d`.
    pub fn add_interaction(&mut self, topic: usize, d: &Interaction, add: bool) {
        for &w in &d.tokens {
            bump(&mut self.topic_word[topic * self.vocab_size + w], add);
            bump(&mut self.topic_word_total[topic], add);
        }
        bump(&mut self.topic_action[topic * self.num_actions + d.action], add);
        bump(&mut self.topic_action_total[topic], add);
    }

    pub fn add_profile_topic(&mut self, profile: usize, topic: usize, add: bool) {
        bump(&mut self.profile_topic[profile * self.num_topics + topic], add);
        bump(&mut self.profile_total[profile], add);
    }

    pub fn add_link(&mut self, source_profile: usize, target_profile: usize, label: usize, add: bool) {
        let pair = source_profile * self.num_profiles + target_profile;
        bump(&mut self.link[pair * self.num_labels + label], add);
        bump(&mut self.link_total[pair], add);
    }

    #[inline]
    pub fn topic_word(&self, topic: usize, word: usize) -> u32 {
        self.topic_word[topic * self.vocab_size + word]
    }

    #[inline]
    pub fn topic_word_total(&self, topic: usize) -> u32 {
        self.topic_word_total[topic]
    }

    #[inline]
    pub fn topic_action(&self, topic: usize, action: usize) -> u32 {
        self.topic_action[topic * self.num_actions + action]
    }

    #[inline]
    pub fn topic_action_total(&self, topic: usize) -> u32 {
        self.topic_action_total[topic]
    }

    #[inline]
    pub fn profile_topic(&self, profile: usize, topic: usize) -> u32 {
        self.profile_topic[profile * self.num_topics + topic]
    }

    #[inline]
    pub fn profile_total(&self, profile: usize) -> u32 {
        self.profile_total[profile]
    }

    #[inline]
    pub fn link(&self, source_profile: usize, target_profile: usize, label: usize) -> u32 {
        self.link[(source_profile * self.num_profiles + target_profile) * self.num_labels + label]
    }

    #[inline]
    pub fn link_total(&self, source_profile: usize, target_profile: usize) -> u32 {
        self.link_total[source_profile * self.num_profiles + target_profile]
    }

    /// Rows of a table as `(row counts, row total)`, used by the prior
    /// estimators.
    pub(crate) fn topic_word_rows(&self) -> impl Iterator<Item = (&[u32], u32)> {
        self.topic_word.chunks(self.vocab_size.max(1)).zip(self.topic_word_total.iter().copied())
    }

    pub(crate) fn topic_action_rows(&self) -> impl Iterator<Item = (&[u32], u32)> {
        self.topic_action.chunks(self.num_actions.max(1)).zip(self.topic_action_total.iter().copied())
    }

    pub(crate) fn profile_topic_rows(&self) -> impl Iterator<Item = (&[u32], u32)> {
        self.profile_topic.chunks(self.num_topics.max(1)).zip(self.profile_total.iter().copied())
    }

    pub(crate) fn link_rows(&self) -> impl Iterator<Item = (&[u32], u32)> {
        self.link.chunks(self.num_labels.max(1)).zip(self.link_total.iter().copied())
    }

    /// Every marginal equals the sum of its row.
    pub fn marginals_consistent(&self) -> bool {
        let ok = |mut rows: Box<dyn Iterator<Item = (&[u32], u32)> + '_>| {
            rows.all(|(row, total)| row.iter().map(|&c| c as u64).sum::<u64>() == total as u64)
        };
        ok(Box::new(self.topic_word_rows()))
            && ok(Box::new(self.topic_action_rows()))
            && ok(Box::new(self.profile_topic_rows()))
            && ok(Box::new(self.link_rows()))
    }

    pub fn total_profile_interactions(&self) -> u64 {
        self.profile_total.iter().map(|&c| c as u64).sum()
    }

    pub fn total_links(&self) -> u64 {
        self.link_total.iter().map(|&c| c as u64).sum()
    }
}
