//! Reserved token ids. Word ids start at [`FIRST_WORD`].

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const MASK: usize = 3;
pub const FIRST_WORD: usize = 4;

pub const SPECIAL_NAMES: [&str; FIRST_WORD] = ["<pad>", "<bos>", "<eos>", "[mask]"];

/// Tokens a decoder may put probability on: words and the end symbol.
pub fn is_emittable(token: usize) -> bool {
    token == EOS || token >= FIRST_WORD
}

/// Teacher-forcing inputs for a target sequence: `<bos>` followed by every
/// target but the last.
pub fn shift_right(target: &[usize]) -> Vec<usize> {
    let mut v = Vec::with_capacity(target.len());
    v.push(BOS);
    v.extend_from_slice(&target[..target.len().saturating_sub(1)]);
    v
}
