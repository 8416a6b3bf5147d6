//! Tabular autoregressive softmax policy.
//!
//! The policy conditions on the last `m` tokens of prompt-plus-response. Each
//! materialized context owns a row of per-token logits and a per-language-tag
//! bias; one more tag bias vector is shared by every context. The effective
//! logit of token `j` in context `c` is
//!
//! ```text
//! logit[c][j] = w[c][j] + row_scale * b[c][tag(j)] + global_scale * g[tag(j)]
//! ```
//!
//! With both scales at zero this is a plain table. The tag biases give the toy
//! model the language-level shared structure that lets an update on a few
//! tokens move the rest of their language with them.
//!
//! Gradients are expressed in effective-logit space ([`SparseGradient`]), and
//! [`PolicyTable::apply_update`] maps them onto the underlying parameters
//! through the chain rule, so a step is exact gradient ascent on the
//! parameters.

use std::collections::{BTreeMap, HashMap};
use std::ops::Range;

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::rng;

pub type TokenId = u32;

/// A response or prompt as token ids.
pub type TokenSequence = Vec<TokenId>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LangTag {
    Target,
    Confused,
    English,
    Neutral,
}

impl LangTag {
    pub const ALL: [LangTag; 4] = [
        LangTag::Target,
        LangTag::Confused,
        LangTag::English,
        LangTag::Neutral,
    ];

    pub fn index(self) -> usize {
        self as usize
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VocabEntry {
    pub id: TokenId,
    pub surface: String,
    pub tag: LangTag,
}

#[derive(Serialize, Deserialize)]
struct VocabRecord {
    eos: Option<TokenId>,
    entries: Vec<VocabEntry>,
}

/// Token inventory. Surfaces are raw text; a word-initial token carries its
/// leading space, so decoding is plain concatenation.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(try_from = "VocabRecord", into = "VocabRecord")]
pub struct Vocab {
    entries: Vec<VocabEntry>,
    eos: Option<TokenId>,
    by_surface: HashMap<String, TokenId>,
    max_surface_chars: usize,
}

impl PartialEq for Vocab {
    fn eq(&self, other: &Self) -> bool {
        self.entries == other.entries && self.eos == other.eos
    }
}

impl TryFrom<VocabRecord> for Vocab {
    type Error = Error;

    fn try_from(r: VocabRecord) -> Result<Self> {
        Vocab::new(r.entries, r.eos)
    }
}

impl From<Vocab> for VocabRecord {
    fn from(v: Vocab) -> Self {
        VocabRecord {
            eos: v.eos,
            entries: v.entries,
        }
    }
}

impl Vocab {
    /// Ids must be `0..len` in order; surfaces must be non-empty and unique.
    pub fn new(entries: Vec<VocabEntry>, eos: Option<TokenId>) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::Vocab("empty vocabulary".into()));
        }
        let mut by_surface = HashMap::with_capacity(entries.len());
        let mut max_surface_chars = 0;
        for (i, e) in entries.iter().enumerate() {
            if e.id as usize != i {
                return Err(Error::Vocab(format!(
                    "token ids must be contiguous from 0; entry {i} has id {}",
                    e.id
                )));
            }
            if e.surface.is_empty() {
                return Err(Error::Vocab(format!("token {i} has an empty surface")));
            }
            if by_surface.insert(e.surface.clone(), e.id).is_some() {
                return Err(Error::Vocab(format!("duplicate surface {:?}", e.surface)));
            }
            max_surface_chars = max_surface_chars.max(e.surface.chars().count());
        }
        if let Some(eos) = eos {
            if eos as usize >= entries.len() {
                return Err(Error::Vocab(format!("eos id {eos} out of range")));
            }
        }
        Ok(Vocab {
            entries,
            eos,
            by_surface,
            max_surface_chars,
        })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[VocabEntry] {
        &self.entries
    }

    pub fn eos(&self) -> Option<TokenId> {
        self.eos
    }

    pub fn surface(&self, id: TokenId) -> &str {
        &self.entries[id as usize].surface
    }

    pub fn tag(&self, id: TokenId) -> LangTag {
        self.entries[id as usize].tag
    }

    pub fn tags(&self) -> Vec<LangTag> {
        self.entries.iter().map(|e| e.tag).collect()
    }

    pub fn contains(&self, id: TokenId) -> bool {
        (id as usize) < self.entries.len()
    }

    pub fn id_of(&self, surface: &str) -> Option<TokenId> {
        self.by_surface.get(surface).copied()
    }

    /// Concatenated surfaces, skipping the end-of-sequence token.
    pub fn decode(&self, tokens: &[TokenId]) -> String {
        self.decode_with_spans(tokens).0
    }

    /// Decoded text plus the byte range each token occupies in it. The
    /// end-of-sequence token gets an empty range.
    pub fn decode_with_spans(&self, tokens: &[TokenId]) -> (String, Vec<Range<usize>>) {
        let mut text = String::new();
        let mut spans = Vec::with_capacity(tokens.len());
        for &t in tokens {
            let start = text.len();
            if Some(t) != self.eos {
                text.push_str(self.surface(t));
            }
            spans.push(start..text.len());
        }
        (text, spans)
    }

    /// Tokenization with the fewest tokens; among those, the longest first
    /// token wins at each position.
    pub fn encode(&self, text: &str) -> Result<TokenSequence> {
        let bounds: Vec<usize> = text
            .char_indices()
            .map(|(i, _)| i)
            .chain(std::iter::once(text.len()))
            .collect();
        let n = bounds.len() - 1;
        let piece = |i: usize, k: usize| self.id_of(&text[bounds[i]..bounds[i + k]]);
        // best[i]: fewest tokens covering chars i..n
        let mut best = vec![usize::MAX; n + 1];
        best[n] = 0;
        for i in (0..n).rev() {
            for k in 1..=self.max_surface_chars.min(n - i) {
                if best[i + k] != usize::MAX && piece(i, k).is_some() {
                    best[i] = best[i].min(best[i + k] + 1);
                }
            }
        }
        if best[0] == usize::MAX {
            let stuck = (0..n).find(|&i| best[i] == usize::MAX).unwrap_or(0);
            return Err(Error::Vocab(format!(
                "cannot tokenize {:?} at byte {}",
                text, bounds[stuck]
            )));
        }
        let mut out = Vec::with_capacity(best[0]);
        let mut i = 0;
        while i < n {
            let k = (1..=self.max_surface_chars.min(n - i))
                .rev()
                .find(|&k| {
                    best[i + k] != usize::MAX && best[i + k] + 1 == best[i] && piece(i, k).is_some()
                })
                .expect("a path exists");
            out.push(piece(i, k).expect("checked"));
            i += k;
        }
        Ok(out)
    }

    /// SHA-256 over the canonical JSON form; checkpoints record it.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("vocab serializes");
        hex::encode(Sha256::digest(bytes))
    }
}

/// Conditioning for one next-token prediction. `window` holds at most `m`
/// trailing ids of prompt-plus-response and is the lookup key; `prompt_id` is
/// carried for tracing only.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Context {
    pub prompt_id: u64,
    pub window: Vec<TokenId>,
}

impl Context {
    /// Context after `history`, keeping the last `m` ids.
    pub fn from_history(prompt_id: u64, history: &[TokenId], m: usize) -> Self {
        let start = history.len().saturating_sub(m);
        Context {
            prompt_id,
            window: history[start..].to_vec(),
        }
    }

    pub fn key(&self) -> &[TokenId] {
        &self.window
    }

    /// The context after appending `token`.
    pub fn extended(&self, token: TokenId, m: usize) -> Self {
        let mut window = self.window.clone();
        window.push(token);
        if window.len() > m {
            window.drain(..window.len() - m);
        }
        Context {
            prompt_id: self.prompt_id,
            window,
        }
    }
}

/// Next-token distribution.
#[derive(Clone, Debug, PartialEq)]
pub struct Distribution(Vec<f64>);

impl Distribution {
    /// Max-subtracted softmax.
    pub fn from_logits(logits: &[f64]) -> Self {
        Distribution(softmax(logits))
    }

    pub fn probs(&self) -> &[f64] {
        &self.0
    }

    pub fn prob(&self, token: TokenId) -> f64 {
        self.0[token as usize]
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Most probable token; ties go to the lower id.
    pub fn argmax(&self) -> TokenId {
        let mut best = 0;
        for (i, &p) in self.0.iter().enumerate() {
            if p > self.0[best] {
                best = i;
            }
        }
        best as TokenId
    }

    /// Inverse-CDF draw for `u` in `[0, 1)`.
    pub fn sample_with(&self, u: f64) -> TokenId {
        let mut acc = 0.0;
        let mut last_nonzero = 0;
        for (i, &p) in self.0.iter().enumerate() {
            if p > 0.0 {
                last_nonzero = i;
            }
            acc += p;
            if u < acc {
                return i as TokenId;
            }
        }
        // u landed in the rounding gap above the accumulated sum.
        last_nonzero as TokenId
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> TokenId {
        self.sample_with(rng.gen::<f64>())
    }
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Decoding rule for rollouts and lookaheads.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Decoding {
    /// Temperature-1 multinomial sampling.
    #[default]
    Multinomial,
    Greedy,
}

/// Scales of the shared tag-bias parameters. Zero for both gives a plain
/// tabular softmax.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Coupling {
    pub row_tag: f64,
    pub global_tag: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Row {
    pub logits: Vec<f64>,
    pub tag_bias: [f64; 4],
}

impl Row {
    fn zeros(n: usize) -> Self {
        Row {
            logits: vec![0.0; n],
            tag_bias: [0.0; 4],
        }
    }
}

/// Gradient with respect to the effective logit rows of a few contexts.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SparseGradient {
    rows: BTreeMap<Vec<TokenId>, Vec<f64>>,
}

impl SparseGradient {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn single(key: Vec<TokenId>, row: Vec<f64>) -> Self {
        let mut g = Self::new();
        g.rows.insert(key, row);
        g
    }

    pub fn row(&self, key: &[TokenId]) -> Option<&[f64]> {
        self.rows.get(key).map(Vec::as_slice)
    }

    pub fn rows(&self) -> impl Iterator<Item = (&Vec<TokenId>, &Vec<f64>)> {
        self.rows.iter()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// `self += scale * row` at `key`.
    pub fn add_row(&mut self, key: &[TokenId], row: &[f64], scale: f64) {
        let dst = self
            .rows
            .entry(key.to_vec())
            .or_insert_with(|| vec![0.0; row.len()]);
        for (d, &g) in dst.iter_mut().zip(row) {
            *d += scale * g;
        }
    }

    pub fn add_scaled(&mut self, other: &SparseGradient, scale: f64) {
        for (k, r) in &other.rows {
            self.add_row(k, r, scale);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.rows.values().flatten().all(|g| g.is_finite())
    }

    pub fn max_abs(&self) -> f64 {
        self.rows
            .values()
            .flatten()
            .fold(0.0, |m, g| m.max(g.abs()))
    }
}

/// The policy parameters. Cheap to clone; snapshots are plain clones.
#[derive(Clone, Debug, PartialEq)]
pub struct PolicyTable {
    tags: Vec<LangTag>,
    eos: Option<TokenId>,
    vocab_hash: String,
    window: usize,
    coupling: Coupling,
    global_bias: [f64; 4],
    rows: BTreeMap<Vec<TokenId>, Row>,
}

pub const MAX_WINDOW: usize = 3;

impl PolicyTable {
    /// An empty table: every context reads as uniform until written.
    pub fn new(vocab: &Vocab, window: usize, coupling: Coupling) -> Result<Self> {
        if window == 0 || window > MAX_WINDOW {
            return Err(Error::Config(format!(
                "context window must be in 1..={MAX_WINDOW}, got {window}"
            )));
        }
        if !coupling.row_tag.is_finite() || !coupling.global_tag.is_finite() {
            return Err(Error::Config("coupling scales must be finite".into()));
        }
        Ok(PolicyTable {
            tags: vocab.tags(),
            eos: vocab.eos(),
            vocab_hash: vocab.hash(),
            window,
            coupling,
            global_bias: [0.0; 4],
            rows: BTreeMap::new(),
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.tags.len()
    }

    pub fn window(&self) -> usize {
        self.window
    }

    pub fn coupling(&self) -> Coupling {
        self.coupling
    }

    pub fn vocab_hash(&self) -> &str {
        &self.vocab_hash
    }

    pub fn eos(&self) -> Option<TokenId> {
        self.eos
    }

    pub fn global_bias(&self) -> [f64; 4] {
        self.global_bias
    }

    pub fn contexts(&self) -> impl Iterator<Item = &Vec<TokenId>> {
        self.rows.keys()
    }

    pub fn raw_row(&self, key: &[TokenId]) -> Option<&Row> {
        self.rows.get(key)
    }

    /// Overwrites the token logits of a context (tag bias reset to zero).
    pub fn set_row(&mut self, key: Vec<TokenId>, logits: Vec<f64>) -> Result<()> {
        if logits.len() != self.vocab_size() {
            return Err(Error::Config(format!(
                "row has {} logits, vocabulary has {}",
                logits.len(),
                self.vocab_size()
            )));
        }
        if key.is_empty() || key.len() > self.window {
            return Err(Error::Config(format!(
                "context key length {} outside 1..={}",
                key.len(),
                self.window
            )));
        }
        if let Some(bad) = key.iter().find(|&&t| t as usize >= self.vocab_size()) {
            return Err(Error::Config(format!("context token {bad} out of range")));
        }
        if logits.iter().any(|l| !l.is_finite()) {
            return Err(Error::NonFinite("logit row".into()));
        }
        self.rows.insert(
            key,
            Row {
                logits,
                tag_bias: [0.0; 4],
            },
        );
        Ok(())
    }

    /// Effective logits for a context key.
    pub fn logits(&self, key: &[TokenId]) -> Vec<f64> {
        let c = self.coupling;
        let g = &self.global_bias;
        match self.rows.get(key) {
            Some(row) => row
                .logits
                .iter()
                .zip(&self.tags)
                .map(|(&w, t)| {
                    w + c.row_tag * row.tag_bias[t.index()] + c.global_tag * g[t.index()]
                })
                .collect(),
            None => self
                .tags
                .iter()
                .map(|t| c.global_tag * g[t.index()])
                .collect(),
        }
    }

    pub fn next_token_dist(&self, ctx: &Context) -> Distribution {
        Distribution::from_logits(&self.logits(ctx.key()))
    }

    pub fn dist_for_key(&self, key: &[TokenId]) -> Distribution {
        Distribution::from_logits(&self.logits(key))
    }

    /// Gradient of `log pi(token | ctx)` with respect to the context's
    /// effective logits: `onehot(token) - pi`.
    pub fn logprob_grad(&self, ctx: &Context, token: TokenId) -> Result<SparseGradient> {
        if token as usize >= self.vocab_size() {
            return Err(Error::Domain(format!("token {token} out of range")));
        }
        let mut g: Vec<f64> = self
            .next_token_dist(ctx)
            .probs()
            .iter()
            .map(|p| -p)
            .collect();
        g[token as usize] += 1.0;
        Ok(SparseGradient::single(ctx.window.clone(), g))
    }

    /// `theta += step * grad`, pulled back onto the token logits, the row tag
    /// biases and the shared tag bias. Nothing changes if the update is
    /// rejected.
    pub fn apply_update(&mut self, grad: &SparseGradient, step: f64) -> Result<()> {
        if !step.is_finite() {
            return Err(Error::NonFinite(format!("step size {step}")));
        }
        if !grad.is_finite() {
            return Err(Error::NonFinite("gradient entries".into()));
        }
        let n = self.vocab_size();
        if let Some((k, _)) = grad.rows().find(|(k, r)| r.len() != n || k.is_empty()) {
            return Err(Error::Config(format!("malformed gradient row at {k:?}")));
        }
        if step == 0.0 || grad.is_empty() {
            return Ok(());
        }
        let mut next = self.clone();
        let c = self.coupling;
        let mut global_delta = [0.0; 4];
        for (key, g) in grad.rows() {
            let row = next
                .rows
                .entry(key.clone())
                .or_insert_with(|| Row::zeros(n));
            let mut group = [0.0; 4];
            for ((w, &gj), t) in row.logits.iter_mut().zip(g).zip(&self.tags) {
                *w += step * gj;
                group[t.index()] += gj;
            }
            for i in 0..4 {
                row.tag_bias[i] += step * c.row_tag * group[i];
                global_delta[i] += group[i];
            }
        }
        for (b, d) in next.global_bias.iter_mut().zip(global_delta) {
            *b += step * c.global_tag * d;
        }
        let finite = next.global_bias.iter().all(|b| b.is_finite())
            && next
                .rows
                .values()
                .all(|r| r.logits.iter().chain(&r.tag_bias).all(|x| x.is_finite()));
        if !finite {
            return Err(Error::NonFinite("updated parameters".into()));
        }
        *self = next;
        Ok(())
    }

    /// Autoregressive generation after `prompt`. Stops after emitting the
    /// end-of-sequence token or at `max_len` tokens.
    pub fn sample_sequence(
        &self,
        prompt_id: u64,
        prompt: &[TokenId],
        max_len: usize,
        seed: u64,
        decoding: Decoding,
    ) -> TokenSequence {
        let mut rng = rng::rng_for(seed, &[]);
        let mut history = prompt.to_vec();
        let mut out = Vec::with_capacity(max_len);
        let mut ctx = Context::from_history(prompt_id, &history, self.window);
        for _ in 0..max_len {
            let dist = self.next_token_dist(&ctx);
            let t = match decoding {
                Decoding::Multinomial => dist.sample(&mut rng),
                Decoding::Greedy => dist.argmax(),
            };
            out.push(t);
            if Some(t) == self.eos {
                break;
            }
            history.push(t);
            ctx = ctx.extended(t, self.window);
        }
        out
    }
}

/// Exact `KL(p || q)` in nats.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(&pi, _)| pi > 0.0)
        .map(|(&pi, &qi)| pi * (pi / qi).ln())
        .sum::<f64>()
        .max(0.0)
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

pub const POLICY_FORMAT: &str = "tlpo-policy";
pub const POLICY_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RowRecord {
    pub context: Vec<TokenId>,
    pub logits: Vec<f64>,
    pub tag_bias: [f64; 4],
}

/// On-disk form of a [`PolicyTable`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicyRecord {
    pub format: String,
    pub version: u32,
    pub vocab_hash: String,
    pub window: usize,
    pub coupling: Coupling,
    pub global_bias: [f64; 4],
    pub rows: Vec<RowRecord>,
}

impl PolicyTable {
    pub fn to_record(&self) -> PolicyRecord {
        PolicyRecord {
            format: POLICY_FORMAT.into(),
            version: POLICY_VERSION,
            vocab_hash: self.vocab_hash.clone(),
            window: self.window,
            coupling: self.coupling,
            global_bias: self.global_bias,
            rows: self
                .rows
                .iter()
                .map(|(k, r)| RowRecord {
                    context: k.clone(),
                    logits: r.logits.clone(),
                    tag_bias: r.tag_bias,
                })
                .collect(),
        }
    }

    pub fn from_record(record: PolicyRecord, vocab: &Vocab) -> Result<Self> {
        if record.format != POLICY_FORMAT {
            return Err(Error::Config(format!(
                "not a policy checkpoint (format {:?})",
                record.format
            )));
        }
        if record.version != POLICY_VERSION {
            return Err(Error::Version {
                kind: "policy checkpoint".into(),
                found: record.version,
                expected: POLICY_VERSION,
            });
        }
        let hash = vocab.hash();
        if record.vocab_hash != hash {
            return Err(Error::Vocab(format!(
                "checkpoint was written for vocabulary {}, got {}",
                record.vocab_hash, hash
            )));
        }
        let mut p = PolicyTable::new(vocab, record.window, record.coupling)?;
        if record.global_bias.iter().any(|b| !b.is_finite()) {
            return Err(Error::NonFinite("global bias".into()));
        }
        p.global_bias = record.global_bias;
        for r in record.rows {
            if r.tag_bias.iter().any(|b| !b.is_finite()) {
                return Err(Error::NonFinite(format!("tag bias at {:?}", r.context)));
            }
            let key = r.context.clone();
            p.set_row(r.context, r.logits)?;
            p.rows.get_mut(&key).expect("row just set").tag_bias = r.tag_bias;
        }
        Ok(p)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(&self.to_record()).expect("policy serializes")
    }

    pub fn from_json(s: &str, vocab: &Vocab) -> Result<Self> {
        Self::from_record(serde_json::from_str(s)?, vocab)
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;

    pub(crate) fn vocab4() -> Vocab {
        let entries = ["a", "b", "c", "d"]
            .iter()
            .enumerate()
            .map(|(i, s)| VocabEntry {
                id: i as TokenId,
                surface: s.to_string(),
                tag: LangTag::Target,
            })
            .collect();
        Vocab::new(entries, None).unwrap()
    }

    fn table_with_row(row: Vec<f64>) -> (PolicyTable, Context) {
        let v = vocab4();
        let mut p = PolicyTable::new(&v, 1, Coupling::default()).unwrap();
        p.set_row(vec![0], row).unwrap();
        (
            p,
            Context {
                prompt_id: 0,
                window: vec![0],
            },
        )
    }

    fn assert_close(a: &[f64], b: &[f64], tol: f64) {
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() <= tol, "{a:?} vs {b:?}");
        }
    }

    #[test]
    fn uniform_row() {
        let (p, ctx) = table_with_row(vec![0.0; 4]);
        assert_close(p.next_token_dist(&ctx).probs(), &[0.25; 4], 1e-15);
    }

    #[test]
    fn ln2_row() {
        let (p, ctx) = table_with_row(vec![2f64.ln(), 0.0, 0.0, 0.0]);
        // exp(ln 2) / (2 + 3) = 0.4, 1/5 = 0.2
        assert_close(
            p.next_token_dist(&ctx).probs(),
            &[0.4, 0.2, 0.2, 0.2],
            1e-15,
        );
    }

    #[test]
    fn extreme_logit_does_not_overflow() {
        let (p, ctx) = table_with_row(vec![1000.0, 0.0, 0.0, 0.0]);
        let d = p.next_token_dist(&ctx);
        // Max-subtracted: exp(-1000) underflows to 0 in f64 and in any wider
        // format it is below 1e-434.
        assert!(d.probs().iter().all(|x| x.is_finite()));
        assert_close(d.probs(), &[1.0, 0.0, 0.0, 0.0], 1e-300);
    }

    #[test]
    fn unseen_context_is_uniform() {
        let (p, _) = table_with_row(vec![5.0, 0.0, 0.0, 0.0]);
        let ctx = Context {
            prompt_id: 3,
            window: vec![2],
        };
        assert_close(p.next_token_dist(&ctx).probs(), &[0.25; 4], 1e-15);
    }

    #[test]
    fn degenerate_policy_repeats_token() {
        let v = vocab4();
        let mut p = PolicyTable::new(&v, 1, Coupling::default()).unwrap();
        for k in 0..4 {
            p.set_row(vec![k], vec![-800.0, -800.0, 0.0, -800.0])
                .unwrap();
        }
        let seq = p.sample_sequence(0, &[0], 12, 99, Decoding::Multinomial);
        assert_eq!(seq, vec![2; 12]);
    }

    #[test]
    fn sampling_is_seed_deterministic() {
        let (p, _) = table_with_row(vec![0.3, -0.1, 0.2, 0.0]);
        let a = p.sample_sequence(4, &[0], 30, 1234, Decoding::Multinomial);
        let b = p.sample_sequence(4, &[0], 30, 1234, Decoding::Multinomial);
        assert_eq!(a, b);
        let c = p.sample_sequence(4, &[0], 30, 1235, Decoding::Multinomial);
        assert_ne!(a, c);
    }

    #[test]
    fn stops_at_eos() {
        let mut entries: Vec<VocabEntry> = vocab4().entries().to_vec();
        entries[3].surface = "</s>".into();
        let v = Vocab::new(entries, Some(3)).unwrap();
        let mut p = PolicyTable::new(&v, 1, Coupling::default()).unwrap();
        p.set_row(vec![0], vec![-900.0, -900.0, -900.0, 0.0])
            .unwrap();
        assert_eq!(p.sample_sequence(0, &[0], 10, 1, Decoding::Greedy), vec![3]);
        assert_eq!(v.decode(&[0, 1, 3]), "ab");
    }

    #[test]
    fn empirical_frequency_matches_two_token_distribution() {
        // 0.7 / 0.3 over tokens 0 and 1. With n = 10k the binomial standard
        // error is sqrt(0.21 / 1e4) ~ 0.0046, so +-0.02 is over 4 sigma.
        let (p, ctx) = table_with_row(vec![0.7f64.ln(), 0.3f64.ln(), -1e3, -1e3]);
        let d = p.next_token_dist(&ctx);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let hits = (0..10_000).filter(|_| d.sample(&mut rng) == 0).count();
        let freq = hits as f64 / 10_000.0;
        assert!((freq - 0.7).abs() <= 0.02, "{freq}");
    }

    #[test]
    fn logprob_grad_uniform() {
        let (p, ctx) = table_with_row(vec![0.0; 4]);
        let g = p.logprob_grad(&ctx, 0).unwrap();
        // Central differences at h = 1e-6 give 0.75, -0.25, -0.25, -0.25.
        let fd = central_diff(&p, &ctx, 0, 1e-6);
        assert_close(g.row(&[0]).unwrap(), &fd, 1e-8);
        assert_close(g.row(&[0]).unwrap(), &[0.75, -0.25, -0.25, -0.25], 1e-15);
    }

    #[test]
    fn saturated_token_has_near_zero_gradient() {
        let (p, ctx) = table_with_row(vec![60.0, 0.0, 0.0, 0.0]);
        let g = p.logprob_grad(&ctx, 0).unwrap();
        assert!(g.max_abs() < 1e-20);
    }

    #[test]
    fn apply_update_examples() {
        let (mut p, ctx) = table_with_row(vec![0.0; 4]);
        let before = p.clone();
        p.apply_update(&SparseGradient::single(vec![0], vec![0.0; 4]), 0.7)
            .unwrap();
        assert_eq!(p, before);
        p.apply_update(
            &SparseGradient::single(vec![0], vec![1.0, 2.0, 0.0, 0.0]),
            0.0,
        )
        .unwrap();
        assert_eq!(p, before);
        p.apply_update(
            &SparseGradient::single(vec![0], vec![1.0, 0.0, 0.0, 0.0]),
            2f64.ln(),
        )
        .unwrap();
        assert_close(
            p.next_token_dist(&ctx).probs(),
            &[0.4, 0.2, 0.2, 0.2],
            1e-15,
        );
    }

    #[test]
    fn apply_update_rejects_non_finite() {
        let (mut p, _) = table_with_row(vec![0.0; 4]);
        let before = p.clone();
        let bad = SparseGradient::single(vec![0], vec![f64::NAN, 0.0, 0.0, 0.0]);
        assert!(matches!(
            p.apply_update(&bad, 0.1),
            Err(Error::NonFinite(_))
        ));
        let good = SparseGradient::single(vec![0], vec![1.0, 0.0, 0.0, 0.0]);
        assert!(p.apply_update(&good, f64::INFINITY).is_err());
        assert_eq!(p, before);
    }

    #[test]
    fn update_materializes_unseen_row() {
        let (mut p, _) = table_with_row(vec![0.0; 4]);
        assert!(p.raw_row(&[3]).is_none());
        p.apply_update(
            &SparseGradient::single(vec![3], vec![1.0, 0.0, 0.0, -1.0]),
            0.5,
        )
        .unwrap();
        assert_eq!(p.raw_row(&[3]).unwrap().logits, vec![0.5, 0.0, 0.0, -0.5]);
    }

    #[test]
    fn coupled_update_moves_whole_tag_group() {
        let entries = vec![
            VocabEntry {
                id: 0,
                surface: "x".into(),
                tag: LangTag::Target,
            },
            VocabEntry {
                id: 1,
                surface: "y".into(),
                tag: LangTag::Confused,
            },
            VocabEntry {
                id: 2,
                surface: "z".into(),
                tag: LangTag::Confused,
            },
        ];
        let v = Vocab::new(entries, None).unwrap();
        let coupling = Coupling {
            row_tag: 1.0,
            global_tag: 0.5,
        };
        let mut p = PolicyTable::new(&v, 1, coupling).unwrap();
        p.set_row(vec![0], vec![0.0; 3]).unwrap();
        p.apply_update(&SparseGradient::single(vec![0], vec![0.0, -1.0, 0.0]), 1.0)
            .unwrap();
        let l = p.logits(&[0]);
        // token 1: -1 own, -1 row bias, 0.5 * 0.5 * -1 global
        assert_close(&l, &[0.0, -2.25, -1.25], 1e-15);
        // other contexts only see the global part
        assert_close(&p.logits(&[1]), &[0.0, -0.25, -0.25], 1e-15);
    }

    #[test]
    fn encode_decode_round_trip() {
        let entries = vec![
            VocabEntry {
                id: 0,
                surface: " 가나".into(),
                tag: LangTag::Target,
            },
            VocabEntry {
                id: 1,
                surface: " 가".into(),
                tag: LangTag::Target,
            },
            VocabEntry {
                id: 2,
                surface: "나다".into(),
                tag: LangTag::Target,
            },
            VocabEntry {
                id: 3,
                surface: " ".into(),
                tag: LangTag::Neutral,
            },
        ];
        let v = Vocab::new(entries, None).unwrap();
        let ids = v.encode(" 가나 가나다").unwrap();
        assert_eq!(v.decode(&ids), " 가나 가나다");
        assert_eq!(ids, vec![0, 1, 2]);
        assert!(v.encode("xyz").is_err());
    }

    #[test]
    fn vocab_rejects_bad_entries() {
        let mk = |id, s: &str| VocabEntry {
            id,
            surface: s.into(),
            tag: LangTag::Target,
        };
        assert!(Vocab::new(vec![mk(0, "a"), mk(2, "b")], None).is_err());
        assert!(Vocab::new(vec![mk(0, "a"), mk(1, "a")], None).is_err());
        assert!(Vocab::new(vec![mk(0, "")], None).is_err());
        assert!(Vocab::new(vec![mk(0, "a")], Some(1)).is_err());
    }

    #[test]
    fn checkpoint_rejects_other_vocab_and_version() {
        let (p, _) = table_with_row(vec![0.1, 0.2, 0.3, 0.4]);
        let mut rec = p.to_record();
        rec.version = 9;
        assert!(matches!(
            PolicyTable::from_record(rec, &vocab4()),
            Err(Error::Version { found: 9, .. })
        ));
        let mut entries = vocab4().entries().to_vec();
        entries[0].surface = "q".into();
        let other = Vocab::new(entries, None).unwrap();
        assert!(PolicyTable::from_json(&p.to_json(), &other).is_err());
    }

    pub(crate) fn central_diff(p: &PolicyTable, ctx: &Context, token: TokenId, h: f64) -> Vec<f64> {
        let base = p.logits(ctx.key());
        (0..base.len())
            .map(|j| {
                let mut up = base.clone();
                let mut dn = base.clone();
                up[j] += h;
                dn[j] -= h;
                let lp = softmax(&up)[token as usize].ln();
                let lm = softmax(&dn)[token as usize].ln();
                (lp - lm) / (2.0 * h)
            })
            .collect()
    }

    proptest! {
        #[test]
        fn distributions_normalized_after_updates(
            row in prop::collection::vec(-30.0f64..30.0, 4),
            grads in prop::collection::vec(prop::collection::vec(-5.0f64..5.0, 4), 0..10),
            step in -2.0f64..2.0,
        ) {
            let (mut p, ctx) = table_with_row(row);
            for g in grads {
                p.apply_update(&SparseGradient::single(vec![0], g), step).unwrap();
                let d = p.next_token_dist(&ctx);
                prop_assert!(d.probs().iter().all(|&x| x >= 0.0));
                prop_assert!((d.probs().iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            }
        }

        #[test]
        fn logprob_grad_matches_finite_differences(
            row in prop::collection::vec(-4.0f64..4.0, 4),
            token in 0u32..4,
        ) {
            let (p, ctx) = table_with_row(row);
            let g = p.logprob_grad(&ctx, token).unwrap();
            let g = g.row(&[0]).unwrap();
            prop_assert!(g.iter().sum::<f64>().abs() < 1e-12);
            let fd = central_diff(&p, &ctx, token, 1e-6);
            for (a, b) in g.iter().zip(&fd) {
                let scale = a.abs().max(1e-3);
                prop_assert!((a - b).abs() / scale <= 1e-6, "{a} vs {b}");
            }
        }

        #[test]
        fn checkpoint_round_trip_is_bit_exact(
            rows in prop::collection::vec(prop::collection::vec(-1e6f64..1e6, 4), 1..4),
            bias in prop::collection::vec(-10.0f64..10.0, 4),
        ) {
            let v = vocab4();
            let mut p = PolicyTable::new(&v, 1, Coupling { row_tag: 0.7, global_tag: 0.01 }).unwrap();
            for (i, r) in rows.into_iter().enumerate() {
                p.set_row(vec![i as TokenId], r).unwrap();
            }
            let mut g = SparseGradient::new();
            g.add_row(&[0], &bias, 1.0);
            p.apply_update(&g, 0.123456789).unwrap();
            let back = PolicyTable::from_json(&p.to_json(), &v).unwrap();
            for k in p.contexts() {
                let (a, b) = (p.raw_row(k).unwrap(), back.raw_row(k).unwrap());
                prop_assert!(a.logits.iter().zip(&b.logits).all(|(x, y)| x.to_bits() == y.to_bits()));
                prop_assert!(a.tag_bias.iter().zip(&b.tag_bias).all(|(x, y)| x.to_bits() == y.to_bits()));
            }
            prop_assert_eq!(p, back);
        }
    }
}
