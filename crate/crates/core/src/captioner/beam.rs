use serde::{Deserialize, Serialize};

/// A next-token model: log-probabilities over the vocabulary given the
/// state reached after feeding a token.
pub trait StepModel {
    type State: Clone;
    fn vocab_size(&self) -> usize;
    /// State before the first token.
    fn initial(&self) -> Self::State;
    /// Feeds `token` and returns the next-token log-probabilities.
    fn step(&self, state: &Self::State, token: usize) -> (Vec<f64>, Self::State);
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchConfig {
    pub beam: usize,
    /// Maximum emitted tokens, the end token included.
    pub max_len: usize,
    pub start: usize,
    pub end: usize,
    /// Tokens never emitted (e.g. padding and the start token).
    pub banned: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Hypothesis {
    /// Emitted tokens, without the start token and without the end token.
    pub tokens: Vec<usize>,
    /// Sum of token log-probabilities, the end token's included.
    pub log_prob: f64,
    /// False when no hypothesis emitted the end token.
    pub finished: bool,
}

/// Length-wise beam search without length normalization.
///
/// Each step scores every one-token expansion of the active hypotheses and
/// keeps the best `beam` of them; kept expansions ending in the end token
/// retire to the finished pool. At `max_len` only end-token expansions are
/// allowed. Search stops once no hypothesis is active or the best finished
/// score is at least the best active score. Ties prefer the earlier
/// hypothesis and then the smaller token id.
pub fn beam_search<M: StepModel>(model: &M, config: &SearchConfig) -> Hypothesis {
    let beam = config.beam.max(1);
    let (lp0, s0) = model.step(&model.initial(), config.start);
    let mut pending = vec![(Vec::<usize>::new(), 0.0, lp0, s0)];
    let mut finished: Option<Hypothesis> = None;
    let mut last_active: Option<Hypothesis> = None;
    for depth in 0..config.max_len.max(1) {
        let last = depth + 1 == config.max_len.max(1);
        // (score, origin, token)
        let mut cands: Vec<(f64, usize, usize)> = Vec::new();
        for (o, (_, score, lp, _)) in pending.iter().enumerate() {
            for (tok, &l) in lp.iter().enumerate() {
                if config.banned.contains(&tok) || (last && tok != config.end) || l == f64::NEG_INFINITY {
                    continue;
                }
                cands.push((score + l, o, tok));
            }
        }
        cands.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        cands.truncate(beam);
        let mut next = Vec::new();
        for (score, o, tok) in cands {
            let (tokens, _, _, state) = &pending[o];
            if tok == config.end {
                if finished.as_ref().is_none_or(|f| score > f.log_prob) {
                    finished = Some(Hypothesis {
                        tokens: tokens.clone(),
                        log_prob: score,
                        finished: true,
                    });
                }
            } else {
                let mut t = tokens.clone();
                t.push(tok);
                let (lp, s) = model.step(state, tok);
                next.push((t, score, lp, s));
            }
        }
        if let Some((t, score, _, _)) = next.first() {
            last_active = Some(Hypothesis {
                tokens: t.clone(),
                log_prob: *score,
                finished: false,
            });
        }
        pending = next;
        let best_active = pending.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max);
        if pending.is_empty() || finished.as_ref().is_some_and(|f| f.log_prob >= best_active) {
            break;
        }
    }
    finished.or(last_active).unwrap_or(Hypothesis {
        tokens: Vec::new(),
        log_prob: f64::NEG_INFINITY,
        finished: false,
    })
}

/// Arg-max decoding: the `beam = 1` case of [`beam_search`].
pub fn greedy_search<M: StepModel>(model: &M, config: &SearchConfig) -> Hypothesis {
    let mut tokens = Vec::new();
    let mut log_prob = 0.0;
    let (mut lp, mut state) = model.step(&model.initial(), config.start);
    for depth in 0..config.max_len.max(1) {
        let last = depth + 1 == config.max_len.max(1);
        let best = lp
            .iter()
            .enumerate()
            .filter(|&(t, &l)| !config.banned.contains(&t) && (!last || t == config.end) && l != f64::NEG_INFINITY)
            .fold(None::<(usize, f64)>, |acc, (t, &l)| match acc {
                Some((_, bl)) if bl >= l => acc,
                _ => Some((t, l)),
            });
        let Some((tok, l)) = best else { break };
        log_prob += l;
        if tok == config.end {
            return Hypothesis { tokens, log_prob, finished: true };
        }
        tokens.push(tok);
        (lp, state) = model.step(&state, tok);
    }
    Hypothesis { tokens, log_prob, finished: false }
}

/// Every end-terminated sequence of at most `max_len` emitted tokens (the
/// end token included) with its log-probability.
pub fn enumerate_sequences<M: StepModel>(model: &M, config: &SearchConfig) -> Vec<Hypothesis> {
    fn rec<M: StepModel>(
        model: &M,
        config: &SearchConfig,
        prefix: &mut Vec<usize>,
        score: f64,
        lp: &[f64],
        state: &M::State,
        out: &mut Vec<Hypothesis>,
    ) {
        if lp[config.end] != f64::NEG_INFINITY {
            out.push(Hypothesis {
                tokens: prefix.clone(),
                log_prob: score + lp[config.end],
                finished: true,
            });
        }
        if prefix.len() + 1 >= config.max_len {
            return;
        }
        for (tok, &l) in lp.iter().enumerate() {
            if tok == config.end || config.banned.contains(&tok) || l == f64::NEG_INFINITY {
                continue;
            }
            let (nlp, ns) = model.step(state, tok);
            prefix.push(tok);
            rec(model, config, prefix, score + l, &nlp, &ns, out);
            prefix.pop();
        }
    }
    let (lp, s) = model.step(&model.initial(), config.start);
    let mut out = Vec::new();
    rec(model, config, &mut Vec::new(), 0.0, &lp, &s, &mut out);
    out
}
