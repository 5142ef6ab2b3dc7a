//! Attention masks as images.

use videoar_core::AttentionMask;

/// One line per query token, `1` where the key is visible.
pub fn mask_text(mask: &AttentionMask) -> String {
    let n = mask.n_tokens();
    let mut s = String::with_capacity(n * (n + 1));
    for q in 0..n {
        s.extend(mask.row(q).iter().map(|&a| if a { '1' } else { '0' }));
        s.push('\n');
    }
    s
}

/// Binary PGM, white where the key is visible.
pub fn mask_pgm(mask: &AttentionMask) -> Vec<u8> {
    let n = mask.n_tokens();
    let mut out = format!("P5\n{n} {n}\n255\n").into_bytes();
    out.extend(mask.matrix().iter().map(|&a| if a { 255u8 } else { 0 }));
    out
}
