//! Prompt enhancement: a small autoregressive policy over modifier tokens,
//! trained with group-relative policy optimization against a frozen
//! generator, a structure reward and a KL penalty to a reference policy.

use std::collections::BTreeSet;

use diffcore::{Adam, AdamConfig, Graph, ParamStore, RngStream, Var};
use tracing::debug;

use crate::error::{invalid, Error, Result};
use crate::flowsde::{sample_terminals, Cond, NoiseSchedule, PathSpec, SdeSteps};
use crate::genmodel::{FlowNet, Task, PROMPT_EMBED};
use crate::grpoflow::compute_advantages;
use crate::nn::{self, Bind};
use crate::rewards::{reward_aesthetic, reward_alignment, RewardWeights};

/// What a modifier token does to the generator's conditioning.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Effect {
    End,
    /// Adds the generator's learned detail embedding.
    Detail(usize),
    /// Multiplies the initial noise.
    NoiseScale(f64),
    /// Blends the embedding toward the next prompt's by this weight.
    Drift(f64),
    Plain,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModifierVocab {
    names: Vec<String>,
    effects: Vec<Effect>,
    end: usize,
}

impl ModifierVocab {
    pub fn new(tokens: Vec<(String, Effect)>) -> Result<Self> {
        let ends: Vec<usize> = tokens
            .iter()
            .enumerate()
            .filter(|(_, t)| t.1 == Effect::End)
            .map(|(i, _)| i)
            .collect();
        if ends.len() != 1 {
            return Err(invalid(format!("vocabulary needs exactly one END token, found {}", ends.len())));
        }
        let unique: BTreeSet<&String> = tokens.iter().map(|t| &t.0).collect();
        if unique.len() != tokens.len() {
            return Err(invalid("duplicate token names"));
        }
        let (names, effects) = tokens.into_iter().unzip();
        Ok(Self {
            names,
            effects,
            end: ends[0],
        })
    }

    /// END, one detail token per mixture component, two noise modifiers,
    /// a drift distractor and a no-op.
    pub fn standard(num_details: usize) -> Self {
        let mut t = vec![("end".to_string(), Effect::End)];
        for d in 0..num_details {
            t.push((format!("detail-{}", (b'a' + d as u8) as char), Effect::Detail(d)));
        }
        t.push(("sharpen".into(), Effect::NoiseScale(0.6)));
        t.push(("soften".into(), Effect::NoiseScale(1.5)));
        t.push(("drift".into(), Effect::Drift(0.5)));
        t.push(("plain".into(), Effect::Plain));
        Self::new(t).expect("standard vocabulary is valid")
    }

    /// Parses `name:kind[:arg]` entries separated by commas. Kinds are
    /// `end`, `detail:<index>`, `noise:<scale>`, `drift:<weight>` and `plain`.
    pub fn parse(spec: &str) -> Result<Self> {
        let mut tokens = Vec::new();
        for entry in spec.split(',').map(str::trim).filter(|e| !e.is_empty()) {
            let parts: Vec<&str> = entry.split(':').map(str::trim).collect();
            let num = |i: usize| -> Result<f64> {
                parts
                    .get(i)
                    .ok_or_else(|| invalid(format!("token {entry:?} needs an argument")))?
                    .parse::<f64>()
                    .map_err(|_| invalid(format!("bad number in token {entry:?}")))
            };
            let effect = match parts.get(1).copied() {
                Some("end") => Effect::End,
                Some("plain") => Effect::Plain,
                Some("detail") => {
                    let d = num(2)?;
                    if d < 0.0 || d.fract() != 0.0 {
                        return Err(invalid(format!("detail index in {entry:?} must be a whole number")));
                    }
                    Effect::Detail(d as usize)
                }
                Some("noise") => {
                    let s = num(2)?;
                    if !(s > 0.0 && s.is_finite()) {
                        return Err(invalid(format!("noise scale in {entry:?} must be positive")));
                    }
                    Effect::NoiseScale(s)
                }
                Some("drift") => Effect::Drift(num(2)?),
                _ => return Err(invalid(format!("unknown token kind in {entry:?}"))),
            };
            tokens.push((parts[0].to_string(), effect));
        }
        Self::new(tokens)
    }

    /// Inverse of [`ModifierVocab::parse`].
    pub fn describe(&self) -> String {
        self.names
            .iter()
            .zip(&self.effects)
            .map(|(n, e)| match e {
                Effect::End => format!("{n}:end"),
                Effect::Plain => format!("{n}:plain"),
                Effect::Detail(d) => format!("{n}:detail:{d}"),
                Effect::NoiseScale(s) => format!("{n}:noise:{s}"),
                Effect::Drift(w) => format!("{n}:drift:{w}"),
            })
            .collect::<Vec<_>>()
            .join(", ")
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn end(&self) -> usize {
        self.end
    }

    pub fn name(&self, token: usize) -> &str {
        &self.names[token]
    }

    pub fn effect(&self, token: usize) -> Result<Effect> {
        self.effects
            .get(token)
            .copied()
            .ok_or_else(|| invalid(format!("unknown token {token}")))
    }

    pub fn token(&self, name: &str) -> Result<usize> {
        self.names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| invalid(format!("unknown token {name:?}")))
    }

    pub fn render(&self, tokens: &[usize]) -> String {
        tokens.iter().map(|&t| self.names[t].as_str()).collect::<Vec<_>>().join(" ")
    }
}

/// Generator inputs after applying a token sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct Conditioning {
    pub embedding: Vec<f64>,
    pub noise_scale: f64,
}

pub fn apply_effects(vocab: &ModifierVocab, generator: &FlowNet, prompt: usize, tokens: &[usize]) -> Result<Conditioning> {
    let mut e = generator.prompt_embedding(prompt)?;
    let mut noise_scale = 1.0;
    for &tok in tokens {
        match vocab.effect(tok)? {
            Effect::End => break,
            Effect::Detail(d) => {
                for (x, y) in e.iter_mut().zip(generator.detail_embedding(d)?) {
                    *x += y;
                }
            }
            Effect::NoiseScale(s) => noise_scale *= s,
            Effect::Drift(w) => {
                let other = generator.prompt_embedding((prompt + 1) % generator.config.num_prompts)?;
                for (x, y) in e.iter_mut().zip(other) {
                    *x = (1.0 - w) * *x + w * y;
                }
            }
            Effect::Plain => {}
        }
    }
    Ok(Conditioning {
        embedding: e,
        noise_scale,
    })
}

const CTX: usize = 8;

/// Autoregressive categorical policy. Each step sees the prompt's context
/// embedding, the position embedding and the set of tokens used so far.
#[derive(Debug, Clone)]
pub struct EnhancerPolicy {
    pub num_prompts: usize,
    pub vocab_size: usize,
    pub max_len: usize,
    pub hidden: usize,
    pub params: ParamStore,
}

/// One decoding step: prompt, position and the tokens before it.
#[derive(Debug, Clone)]
struct StepRow<'a> {
    prompt: usize,
    position: usize,
    prefix: &'a [usize],
}

impl EnhancerPolicy {
    pub fn new(num_prompts: usize, vocab_size: usize, max_len: usize, hidden: usize, rng: &mut RngStream) -> Self {
        let mut params = ParamStore::new();
        nn::init_table(&mut params, "pe.ctx", num_prompts, CTX, 1.0, rng);
        nn::init_table(&mut params, "pe.pos", max_len, CTX, 1.0, rng);
        nn::init_dense(&mut params, "pe.h", 2 * CTX + vocab_size, hidden, 1.0, rng);
        nn::init_dense(&mut params, "pe.out", hidden, vocab_size, 0.1, rng);
        Self {
            num_prompts,
            vocab_size,
            max_len,
            hidden,
            params,
        }
    }

    fn logits(&self, g: &mut Graph, rows: &[StepRow<'_>], mode: Bind) -> Result<Var> {
        if let Some(r) = rows.iter().find(|r| r.prompt >= self.num_prompts) {
            return Err(Error::UnknownPrompt(r.prompt));
        }
        let k = self.vocab_size;
        let mut used = vec![0.0; rows.len() * k];
        for (i, r) in rows.iter().enumerate() {
            for &t in r.prefix {
                used[i * k + t] = 1.0;
            }
        }
        let ctx = nn::bind(g, &self.params, "pe.ctx", mode)?;
        let ctx = g.gather_rows(ctx, &rows.iter().map(|r| r.prompt).collect::<Vec<_>>())?;
        let pos = nn::bind(g, &self.params, "pe.pos", mode)?;
        let pos = g.gather_rows(pos, &rows.iter().map(|r| r.position).collect::<Vec<_>>())?;
        let used = g.input(rows.len(), k, used)?;
        let h = g.concat_cols(&[ctx, pos, used])?;
        let h = nn::dense(g, &self.params, "pe.h", h, mode)?;
        let h = g.tanh(h);
        nn::dense(g, &self.params, "pe.out", h, mode)
    }

    /// Log-probabilities of the next token after `prefix`.
    pub fn next_logprobs(&self, prompt: usize, prefix: &[usize]) -> Result<Vec<f64>> {
        if prefix.len() >= self.max_len {
            return Err(invalid("prefix already at maximum length"));
        }
        let mut g = Graph::new();
        let row = StepRow {
            prompt,
            position: prefix.len(),
            prefix,
        };
        let l = self.logits(&mut g, &[row], Bind::Frozen)?;
        let lp = g.log_softmax_rows(l);
        Ok(g.value(lp).to_vec())
    }
}

fn step_rows<'a>(prompt: usize, tokens: &'a [usize]) -> impl Iterator<Item = StepRow<'a>> {
    (0..tokens.len()).map(move |i| StepRow {
        prompt,
        position: i,
        prefix: &tokens[..i],
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnhancedPrompt {
    pub prompt: usize,
    pub tokens: Vec<usize>,
    pub logp: f64,
    pub structure_valid: bool,
}

/// Samples tokens one position at a time until END or the length limit.
pub fn sample_enhanced(
    policy: &EnhancerPolicy,
    vocab: &ModifierVocab,
    prompt: usize,
    rng: &mut RngStream,
) -> Result<EnhancedPrompt> {
    if vocab.len() != policy.vocab_size {
        return Err(invalid("policy and vocabulary sizes differ"));
    }
    let mut tokens = Vec::new();
    let mut logp = 0.0;
    let mut parts = Vec::new();
    while tokens.len() < policy.max_len {
        let lp = policy.next_logprobs(prompt, &tokens)?;
        let probs: Vec<f64> = lp.iter().map(|l| l.exp()).collect();
        let tok = rng.categorical(&probs);
        parts.push(lp[tok]);
        tokens.push(tok);
        if tok == vocab.end() {
            break;
        }
    }
    for p in parts {
        logp += p;
    }
    let structure_valid = structure_reward(&tokens, vocab, policy.max_len) == 1.0;
    Ok(EnhancedPrompt {
        prompt,
        tokens,
        logp,
        structure_valid,
    })
}

/// Sum of per-position log-probabilities of each sequence, as a `S x 1` node.
fn sequence_logprob_graph(policy: &EnhancerPolicy, g: &mut Graph, seqs: &[&EnhancedPrompt], mode: Bind) -> Result<Var> {
    let rows: Vec<StepRow<'_>> = seqs.iter().flat_map(|s| step_rows(s.prompt, &s.tokens)).collect();
    if rows.is_empty() {
        return Err(invalid("no tokens to score"));
    }
    let picks: Vec<usize> = seqs.iter().flat_map(|s| s.tokens.iter().copied()).collect();
    let l = policy.logits(g, &rows, mode)?;
    let lp = g.log_softmax_rows(l);
    let chosen = g.pick_cols(lp, &picks)?;
    let seg = segment_matrix(g, seqs.iter().map(|s| s.tokens.len()))?;
    Ok(g.matmul(seg, chosen)?)
}

/// `S x R` 0/1 matrix summing consecutive runs of rows.
fn segment_matrix(g: &mut Graph, lens: impl Iterator<Item = usize> + Clone) -> Result<Var> {
    let total: usize = lens.clone().sum();
    let s = lens.clone().count();
    let mut m = vec![0.0; s * total];
    let mut start = 0;
    for (i, n) in lens.enumerate() {
        for j in start..start + n {
            m[i * total + j] = 1.0;
        }
        start += n;
    }
    Ok(g.input(s, total, m)?)
}

pub fn sequence_logprob(policy: &EnhancerPolicy, prompt: usize, tokens: &[usize]) -> Result<f64> {
    let seq = EnhancedPrompt {
        prompt,
        tokens: tokens.to_vec(),
        logp: 0.0,
        structure_valid: false,
    };
    let mut g = Graph::new();
    let v = sequence_logprob_graph(policy, &mut g, &[&seq], Bind::Frozen)?;
    Ok(g.value(v)[0])
}

/// 1 when the sequence ends with END, fits in `max_len` and repeats no token.
pub fn structure_reward(tokens: &[usize], vocab: &ModifierVocab, max_len: usize) -> f64 {
    let n = tokens.len();
    if n == 0 || n > max_len || tokens[n - 1] != vocab.end() {
        return 0.0;
    }
    let body = &tokens[..n - 1];
    let distinct: BTreeSet<usize> = body.iter().copied().collect();
    if distinct.len() != body.len() || body.contains(&vocab.end()) {
        return 0.0;
    }
    1.0
}

/// Graded variant: 1 minus a quarter per violated rule, floored at 0.
pub fn structure_reward_graded(tokens: &[usize], vocab: &ModifierVocab, max_len: usize) -> f64 {
    let n = tokens.len();
    let mut penalty = 0.0;
    if n == 0 {
        return 0.0;
    }
    if n > max_len {
        penalty += 0.25;
    }
    if tokens[n - 1] != vocab.end() {
        penalty += 0.25;
    }
    let non_end: Vec<usize> = tokens.iter().copied().filter(|&t| t != vocab.end()).collect();
    let distinct: BTreeSet<usize> = non_end.iter().copied().collect();
    if distinct.len() != non_end.len() {
        penalty += 0.25;
    }
    f64::max(0.0, 1.0 - penalty)
}

/// `KL(p || q)` between two categorical distributions.
pub fn categorical_kl(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(p, _)| **p > 0.0)
        .map(|(p, q)| p * (p / q).ln())
        .sum()
}

/// Sum over realized positions of the per-step KL between `policy` and `reference`.
pub fn kl_term(policy: &EnhancerPolicy, reference: &EnhancerPolicy, prompt: usize, tokens: &[usize]) -> Result<f64> {
    let mut total = 0.0;
    for i in 0..tokens.len().min(policy.max_len) {
        let p: Vec<f64> = policy.next_logprobs(prompt, &tokens[..i])?.iter().map(|l| l.exp()).collect();
        let q: Vec<f64> = reference.next_logprobs(prompt, &tokens[..i])?.iter().map(|l| l.exp()).collect();
        total += categorical_kl(&p, &q);
    }
    Ok(total.max(0.0))
}

/// Exact `KL(pi_theta || pi_ref)` over whole sequences for one prompt,
/// by enumerating every prefix the policy can reach.
pub fn exact_sequence_kl(
    policy: &EnhancerPolicy,
    reference: &EnhancerPolicy,
    vocab: &ModifierVocab,
    prompt: usize,
) -> Result<f64> {
    let mut total = 0.0;
    let mut frontier: Vec<(Vec<usize>, f64)> = vec![(Vec::new(), 1.0)];
    while let Some((prefix, mass)) = frontier.pop() {
        if prefix.len() >= policy.max_len {
            continue;
        }
        let lp = policy.next_logprobs(prompt, &prefix)?;
        let lq = reference.next_logprobs(prompt, &prefix)?;
        let p: Vec<f64> = lp.iter().map(|l| l.exp()).collect();
        total += mass * p.iter().zip(lp.iter().zip(&lq)).map(|(p, (a, b))| p * (a - b)).sum::<f64>();
        for (tok, pt) in p.iter().enumerate() {
            if tok != vocab.end() && mass * pt > 1e-12 {
                let mut next = prefix.clone();
                next.push(tok);
                frontier.push((next, mass * pt));
            }
        }
    }
    Ok(total.max(0.0))
}

/// Weights of the enhancer's reward terms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PeRewardWeights {
    pub alignment: f64,
    pub aesthetic: f64,
    pub structure: f64,
}

impl Default for PeRewardWeights {
    fn default() -> Self {
        Self {
            alignment: 0.5,
            aesthetic: 0.3,
            structure: 0.2,
        }
    }
}

/// Everything needed to score a token sequence against a frozen generator.
#[derive(Debug, Clone, Copy)]
pub struct OutcomeScorer<'a> {
    pub task: &'a Task,
    pub generator: &'a FlowNet,
    pub vocab: &'a ModifierVocab,
    /// Normalization statistics of the generator's rewards.
    pub norm: &'a RewardWeights,
    pub schedule: &'a NoiseSchedule,
    pub weights: PeRewardWeights,
    /// Generator samples per evaluation.
    pub samples: usize,
}

impl OutcomeScorer<'_> {
    /// Mean weighted, z-normalized alignment and aesthetic reward of
    /// `samples` generations per sequence, all measured against `prompt`'s
    /// own target. Every sequence sees the same noise draws (`tag`, `group`).
    pub fn outcome_rewards(&self, prompt: usize, seqs: &[&[usize]], seed: u64, group: u64) -> Result<Vec<f64>> {
        let m = self.samples;
        let mut emb = Vec::with_capacity(seqs.len() * m * PROMPT_EMBED);
        let mut specs = Vec::with_capacity(seqs.len() * m);
        for tokens in seqs {
            let c = apply_effects(self.vocab, self.generator, prompt, tokens)?;
            for j in 0..m {
                emb.extend_from_slice(&c.embedding);
                let mut spec = PathSpec::new(prompt, SdeSteps::None, RngStream::derive(seed, "pe-outcome", group, j as u64));
                spec.noise_scale = c.noise_scale;
                specs.push(spec);
            }
        }
        let cond = Cond::Embeddings {
            dim: PROMPT_EMBED,
            values: emb,
        };
        let xs = sample_terminals(self.generator, &cond, self.schedule, specs)?;
        let st = &self.norm.stats;
        let z = |v: f64, i: usize| {
            if st.std[i] >= self.norm.std_floor {
                (v - st.mean[i]) / st.std[i]
            } else {
                0.0
            }
        };
        let mut out = Vec::with_capacity(seqs.len());
        for chunk in xs.chunks(m) {
            let mut total = 0.0;
            for x in chunk {
                let a = z(reward_alignment(self.task, prompt, x)?, 0);
                let v = z(reward_aesthetic(self.task, prompt, x)?, 1);
                total += self.weights.alignment * a + self.weights.aesthetic * v;
            }
            out.push(total / m as f64);
        }
        Ok(out)
    }

    pub fn outcome_reward(&self, prompt: usize, tokens: &[usize], seed: u64, group: u64) -> Result<f64> {
        Ok(self.outcome_rewards(prompt, &[tokens], seed, group)?[0])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PeConfig {
    pub group_size: usize,
    pub clip: f64,
    pub beta_kl: f64,
    pub lr: f64,
    pub iterations: usize,
    pub prompts: Vec<usize>,
}

impl Default for PeConfig {
    fn default() -> Self {
        Self {
            group_size: 8,
            clip: 0.2,
            beta_kl: 0.1,
            lr: 1e-2,
            iterations: 150,
            prompts: vec![0, 1, 2],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PeIterStats {
    pub iteration: usize,
    pub mean_reward: f64,
    pub mean_outcome: f64,
    pub kl: f64,
    pub clip_fraction: f64,
    pub structure_valid: f64,
    pub grad_norm: f64,
}

/// Loss node of the enhancer objective and its diagnostics.
pub struct PeSurrogate {
    pub loss: Var,
    pub ratios: Vec<f64>,
    pub clip_fraction: f64,
    pub kl: f64,
}

/// `-(mean min(r A, clip(r) A) - beta mean KL)` over sequences.
pub fn pe_surrogate(
    g: &mut Graph,
    policy: &EnhancerPolicy,
    reference: &EnhancerPolicy,
    seqs: &[&EnhancedPrompt],
    advantages: &[f64],
    clip: f64,
    beta_kl: f64,
) -> Result<PeSurrogate> {
    let s = seqs.len();
    if advantages.len() != s || s == 0 {
        return Err(invalid("one advantage per sequence required"));
    }
    let lp = sequence_logprob_graph(policy, g, seqs, Bind::Train)?;
    let old = g.input(s, 1, seqs.iter().map(|q| q.logp).collect())?;
    let log_r = g.sub(lp, old)?;
    let r = g.exp(log_r);
    let ratios = g.value(r).to_vec();
    let adv = g.input(s, 1, advantages.to_vec())?;
    let unclipped = g.mul(r, adv);
    let rc = g.clamp(r, 1.0 - clip, 1.0 + clip);
    let clipped = g.mul(rc, adv);
    let term = g.minimum(unclipped, clipped)?;
    let objective = g.mean(term);

    // per-position KL(pi || ref), summed per sequence
    let rows: Vec<StepRow<'_>> = seqs.iter().flat_map(|q| step_rows(q.prompt, &q.tokens)).collect();
    let mut ref_g = Graph::new();
    let ref_l = reference.logits(&mut ref_g, &rows, Bind::Frozen)?;
    let ref_lp = ref_g.log_softmax_rows(ref_l);
    let (nr, k) = ref_g.dims(ref_lp);
    let ref_lp = g.input(nr, k, ref_g.value(ref_lp).to_vec())?;
    let l = policy.logits(g, &rows, Bind::Train)?;
    let lpp = g.log_softmax_rows(l);
    let p = g.exp(lpp);
    let diff = g.sub(lpp, ref_lp)?;
    let pk = g.mul(p, diff);
    let kl_pos = g.sum_cols(pk);
    let seg = segment_matrix(g, seqs.iter().map(|q| q.tokens.len()))?;
    let kl_seq = g.matmul(seg, kl_pos)?;
    let kl = g.mean(kl_seq);
    let kl_value = g.scalar(kl);
    let penalty = g.scale(kl, beta_kl);
    let obj = g.sub(objective, penalty)?;
    let loss = g.neg(obj);
    let clip_fraction = ratios.iter().filter(|r| (*r - 1.0).abs() > clip).count() as f64 / s as f64;
    Ok(PeSurrogate {
        loss,
        ratios,
        clip_fraction,
        kl: kl_value,
    })
}

/// Trains the enhancer in place against the frozen generator behind `scorer`.
pub fn pe_grpo_train(
    policy: &mut EnhancerPolicy,
    reference: &EnhancerPolicy,
    scorer: &OutcomeScorer<'_>,
    cfg: &PeConfig,
    seed: u64,
    mut on_iter: impl FnMut(&PeIterStats),
) -> Result<()> {
    if cfg.group_size < 2 {
        return Err(invalid("enhancer groups need at least 2 members"));
    }
    if !(cfg.clip > 0.0 && cfg.clip < 1.0) || cfg.beta_kl < 0.0 {
        return Err(invalid("clip must lie in (0, 1) and beta_kl be nonnegative"));
    }
    if cfg.prompts.is_empty() {
        return Err(invalid("enhancer training needs prompts"));
    }
    let mut adam = Adam::new(AdamConfig::with_lr(cfg.lr));
    for it in 0..cfg.iterations {
        let mut seqs = Vec::new();
        let mut advantages = Vec::new();
        let (mut reward_sum, mut outcome_sum, mut valid) = (0.0, 0.0, 0usize);
        for (pi, &prompt) in cfg.prompts.iter().enumerate() {
            let group = (it * cfg.prompts.len() + pi) as u64;
            let members: Vec<EnhancedPrompt> = (0..cfg.group_size)
                .map(|m| sample_enhanced(policy, scorer.vocab, prompt, &mut RngStream::derive(seed, "pe", group, m as u64)))
                .collect::<Result<_>>()?;
            let toks: Vec<&[usize]> = members.iter().map(|m| m.tokens.as_slice()).collect();
            let outcome = scorer.outcome_rewards(prompt, &toks, seed, group)?;
            let rewards: Vec<f64> = members
                .iter()
                .zip(&outcome)
                .map(|(m, o)| o + scorer.weights.structure * structure_reward(&m.tokens, scorer.vocab, policy.max_len))
                .collect();
            reward_sum += rewards.iter().sum::<f64>();
            outcome_sum += outcome.iter().sum::<f64>();
            valid += members.iter().filter(|m| m.structure_valid).count();
            advantages.extend(compute_advantages(&rewards, 1e-6)?);
            seqs.extend(members);
        }
        let refs: Vec<&EnhancedPrompt> = seqs.iter().collect();
        let mut g = Graph::new();
        let s = pe_surrogate(&mut g, policy, reference, &refs, &advantages, cfg.clip, cfg.beta_kl)?;
        let loss = g.scalar(s.loss);
        if !loss.is_finite() {
            return Err(Error::NonFinite {
                stage: "pe",
                what: "loss",
                iteration: it,
            });
        }
        g.backward(s.loss, &mut policy.params)?;
        let grad_norm = policy.params.clip_grad_norm(5.0);
        adam.step(&mut policy.params)?;
        let n = seqs.len() as f64;
        let stats = PeIterStats {
            iteration: it,
            mean_reward: reward_sum / n,
            mean_outcome: outcome_sum / n,
            kl: s.kl,
            clip_fraction: s.clip_fraction,
            structure_valid: valid as f64 / n,
            grad_norm,
        };
        debug!(it, reward = stats.mean_reward, kl = stats.kl, "pe iteration");
        on_iter(&stats);
    }
    Ok(())
}
