use super::config::StivConfig;
use crate::nn::MLP_RATIO;

/// Closed-form parameter tally by component.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamCount {
    pub text_table: u64,
    pub embedders: u64,
    pub per_block: u64,
    pub blocks: u64,
    pub total: u64,
}

impl ParamCount {
    pub fn of(c: &StivConfig) -> Self {
        let d = c.hidden_dim as u64;
        let dt = c.text_dim as u64;
        let f = c.freq_dim as u64;
        let p = c.patch_dim() as u64;
        let hd = c.head_dim() as u64;
        let lin = |i: u64, o: u64| i * o + o;
        let attn = |kv: u64| 2 * lin(d, d) + 2 * lin(kv, d) + 2 * hd;
        let ratio = MLP_RATIO as u64;
        let temporal = if c.temporal { attn(d) } else { 0 };
        let per_block = attn(d) + temporal + attn(dt) + lin(d, ratio * d) + lin(ratio * d, d);
        let embedder = |i: u64| lin(i, d) + lin(d, d);
        let singleton = embedder(f) + 2 * embedder(2 * f) + 2 * embedder(f) + lin(dt, d);
        let embedders = lin(p, d) + singleton + 6 * lin(d, d) + d + lin(d, p);
        let blocks = per_block * (c.n_blocks + c.n_decoder_blocks) as u64;
        let text_table = c.vocab_size as u64 * dt;
        Self {
            text_table,
            embedders,
            per_block,
            blocks,
            total: text_table + embedders + blocks,
        }
    }

    /// Everything but the text embedding table, which stands in for a frozen encoder.
    pub fn backbone(&self) -> u64 {
        self.total - self.text_table
    }
}
