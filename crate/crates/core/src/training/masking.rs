use rand::Rng;

use crate::tokenizer::{TokenizedText, MASK};

/// How a selected word was corrupted.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Corruption {
    Mask,
    Random,
    Keep,
}

/// Masked-LM view of one tokenized text. `labels[i]` is set exactly at the
/// tokens of selected words; `positions` lists those tokens in order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskedSequence {
    pub input: Vec<u32>,
    pub labels: Vec<Option<u32>>,
    pub positions: Vec<usize>,
    /// One entry per selected word, in word order.
    pub corruptions: Vec<Corruption>,
}

/// Selects each word independently with probability `rate` and corrupts all
/// of its tokens together: 80% `[MASK]`, 10% random ordinary token, 10% kept.
/// Random replacements are drawn from ids `random_range`.
pub fn whole_word_mask<R: Rng>(
    tok: &TokenizedText,
    rate: f64,
    random_range: std::ops::Range<u32>,
    rng: &mut R,
) -> MaskedSequence {
    let mut out = MaskedSequence {
        input: tok.ids.clone(),
        labels: vec![None; tok.ids.len()],
        positions: Vec::new(),
        corruptions: Vec::new(),
    };
    for &(start, end) in &tok.word_spans {
        if !(rng.gen::<f64>() < rate) {
            continue;
        }
        let u: f64 = rng.gen();
        let how = if u < 0.8 {
            Corruption::Mask
        } else if u < 0.9 {
            Corruption::Random
        } else {
            Corruption::Keep
        };
        out.corruptions.push(how);
        for i in start..end {
            out.labels[i] = Some(tok.ids[i]);
            out.positions.push(i);
            match how {
                Corruption::Mask => out.input[i] = MASK,
                Corruption::Random => out.input[i] = rng.gen_range(random_range.clone()),
                Corruption::Keep => {}
            }
        }
    }
    out
}
