use super::params::{block_index, head_index, POS_EMB, TOK_EMB};
use super::{ParamGrads, PolicyError, PolicyParams};
use crate::numerics::{Gradients, Segment, Tape, Tensor, Var, RMS_EPS};
use crate::tasks::Token;

/// Policy tensors recorded as leaves of one tape.
pub struct BoundParams {
    vars: Vec<Var>,
}

impl BoundParams {
    /// Records every tensor; `trainable` decides whether they receive adjoints.
    pub fn bind(tape: &mut Tape, params: &PolicyParams, trainable: bool) -> Self {
        let vars = params
            .tensors()
            .iter()
            .map(|t| {
                if trainable {
                    tape.param(t.clone())
                } else {
                    tape.constant(t.clone())
                }
            })
            .collect();
        Self { vars }
    }

    pub fn var(&self, index: usize) -> Var {
        self.vars[index]
    }

    /// Gradients in parameter order; untouched tensors get exact zeros.
    pub fn grads(&self, g: &Gradients) -> Result<ParamGrads, PolicyError> {
        let tensors = self
            .vars
            .iter()
            .map(|&v| g.wrt(v).map(|t| t.to_vec()))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(ParamGrads { tensors })
    }
}

/// Backbone activations for a batch of sequences stacked row-wise.
pub struct Hidden {
    /// `states[k - 1]` is the residual stream after block `k`.
    pub states: Vec<Var>,
    pub segments: Vec<Segment>,
}

impl Hidden {
    /// Row of the last token of sequence `i`.
    pub fn last_row(&self, i: usize) -> usize {
        let s = self.segments[i];
        s.start + s.len - 1
    }
}

impl PolicyParams {
    pub fn check_sequence(&self, tokens: &[Token]) -> Result<(), PolicyError> {
        if tokens.is_empty() {
            return Err(PolicyError::EmptyInput);
        }
        if tokens.len() > self.config().context_len {
            return Err(PolicyError::ContextOverflow {
                len: tokens.len(),
                context: self.config().context_len,
            });
        }
        if let Some(&t) = tokens.iter().find(|&&t| t >= self.config().vocab_size) {
            return Err(PolicyError::TokenOutOfVocab(t));
        }
        Ok(())
    }

    /// Runs the first `depth` blocks over every sequence. Sequences do not
    /// attend to each other.
    pub fn backbone(
        &self,
        tape: &mut Tape,
        bound: &BoundParams,
        seqs: &[&[Token]],
        depth: usize,
    ) -> Result<Hidden, PolicyError> {
        let cfg = self.config();
        if depth == 0 || depth > cfg.n_layers {
            return Err(PolicyError::UnknownExit(depth));
        }
        if seqs.is_empty() {
            return Err(PolicyError::EmptyInput);
        }
        let mut ids = Vec::new();
        let mut positions = Vec::new();
        let mut segments = Vec::with_capacity(seqs.len());
        for s in seqs {
            self.check_sequence(s)?;
            segments.push(Segment {
                start: ids.len(),
                len: s.len(),
            });
            ids.extend_from_slice(s);
            positions.extend(0..s.len());
        }
        let tok = tape.embedding(bound.var(TOK_EMB), &ids)?;
        let pos = tape.embedding(bound.var(POS_EMB), &positions)?;
        let mut x = tape.add(tok, pos)?;
        let mut states = Vec::with_capacity(depth);
        for layer in 0..depth {
            let b = block_index(layer);
            let h = tape.rms_norm(x, bound.var(b.attn_norm), RMS_EPS)?;
            let q = tape.matmul(h, bound.var(b.wq))?;
            let k = tape.matmul(h, bound.var(b.wk))?;
            let v = tape.matmul(h, bound.var(b.wv))?;
            let a = tape.causal_attention(q, k, v, &segments, cfg.n_heads)?;
            let o = tape.matmul(a, bound.var(b.wo))?;
            x = tape.add(x, o)?;
            let h = tape.rms_norm(x, bound.var(b.mlp_norm), RMS_EPS)?;
            let u = tape.matmul(h, bound.var(b.w_in))?;
            let u = tape.gelu(u)?;
            let m = tape.matmul(u, bound.var(b.w_out))?;
            x = tape.add(x, m)?;
            states.push(x);
        }
        Ok(Hidden { states, segments })
    }

    /// Applies head `exit_depth` to `rows` (a `[n × d_model]` var taken from
    /// the matching backbone state).
    pub fn head_logits(
        &self,
        tape: &mut Tape,
        bound: &BoundParams,
        rows: Var,
        exit_depth: usize,
    ) -> Result<Var, PolicyError> {
        let e = self.config().exit_index(exit_depth)?;
        let (norm, out) = head_index(self.config(), e);
        let h = tape.rms_norm(rows, bound.var(norm), RMS_EPS)?;
        Ok(tape.matmul(h, bound.var(out))?)
    }

    /// Per-position logits `[len × vocab]` for one sequence at `exit_depth`.
    pub fn forward_logits(&self, tokens: &[Token], exit_depth: usize) -> Result<Tensor, PolicyError> {
        self.config().exit_index(exit_depth)?;
        let mut tape = Tape::new();
        let bound = BoundParams::bind(&mut tape, self, false);
        let hidden = self.backbone(&mut tape, &bound, &[tokens], exit_depth)?;
        let logits = self.head_logits(&mut tape, &bound, hidden.states[exit_depth - 1], exit_depth)?;
        Ok(tape.value(logits)?.clone())
    }

    /// Residual stream after each of the first `depth` blocks.
    pub fn block_states(&self, tokens: &[Token], depth: usize) -> Result<Vec<Tensor>, PolicyError> {
        let mut tape = Tape::new();
        let bound = BoundParams::bind(&mut tape, self, false);
        let hidden = self.backbone(&mut tape, &bound, &[tokens], depth)?;
        hidden
            .states
            .iter()
            .map(|&s| Ok(tape.value(s)?.clone()))
            .collect()
    }

    /// Log-softmax over the vocabulary at the last position of every sequence.
    pub fn next_token_logprobs(
        &self,
        seqs: &[&[Token]],
        exit_depth: usize,
    ) -> Result<Vec<Vec<f64>>, PolicyError> {
        self.config().exit_index(exit_depth)?;
        let mut tape = Tape::new();
        let bound = BoundParams::bind(&mut tape, self, false);
        let hidden = self.backbone(&mut tape, &bound, seqs, exit_depth)?;
        let last: Vec<usize> = (0..seqs.len()).map(|i| hidden.last_row(i)).collect();
        let rows = tape.embedding(hidden.states[exit_depth - 1], &last)?;
        let logits = self.head_logits(&mut tape, &bound, rows, exit_depth)?;
        let lp = tape.log_softmax(logits)?;
        let value = tape.value(lp)?;
        Ok((0..seqs.len()).map(|i| value.row(i).to_vec()).collect())
    }

    /// `log π(next | prefix)` at `exit_depth`.
    pub fn token_logprob(
        &self,
        prefix: &[Token],
        next: Token,
        exit_depth: usize,
    ) -> Result<f64, PolicyError> {
        if next >= self.config().vocab_size {
            return Err(PolicyError::TokenOutOfVocab(next));
        }
        let lp = self.next_token_logprobs(&[prefix], exit_depth)?;
        Ok(lp[0][next])
    }
}
