#![allow(dead_code)]

//! Hand-derived trainable-parameter counts, written from the layer table
//! rather than from the model code.

pub fn conv(c_in: usize, c_out: usize, k: usize, bias: bool) -> usize {
    c_out * c_in * k * k + if bias { c_out } else { 0 }
}

pub fn norm(c: usize) -> usize {
    2 * c
}

pub fn linear(c_in: usize, c_out: usize) -> usize {
    c_in * c_out + c_out
}

/// Depthwise groups of kernel 3, 5, ..., 2n+1 (with bias), then the
/// point-wise combination and the embedding, both 1x1 with bias.
pub fn mkfm(c: usize, n: usize) -> usize {
    let w = c / n;
    let groups: usize = (1..=n).map(|j| w * (2 * j + 1) * (2 * j + 1) + w).sum();
    groups + 2 * conv(c, c, 1, true)
}

pub fn ffn(c: usize, ratio: usize) -> usize {
    linear(c, ratio * c) + linear(ratio * c, c)
}

pub fn mkfm_block(c: usize, n: usize, ratio: usize) -> usize {
    2 * norm(c) + mkfm(c, n) + ffn(c, ratio)
}

pub fn attention_block(c: usize, ratio: usize) -> usize {
    2 * norm(c) + 4 * linear(c, c) + ffn(c, ratio)
}

/// Encoder total for widths `c`, depths `d`, `n` MKFM groups and FFN
/// ratios `r`.
pub fn encoder(c: [usize; 4], d: [usize; 4], n: usize, r: [usize; 4]) -> usize {
    let stage1 = conv(3, c[0], 3, true) + conv(c[0], c[0], 2, true) + d[0] * mkfm_block(c[0], n, r[0]);
    let stage2 = conv(c[0], c[1], 3, true) + d[1] * mkfm_block(c[1], n, r[1]);
    let stage3 = conv(c[1], c[2], 3, true) + d[2] * (mkfm_block(c[2], n, r[2]) + attention_block(c[2], r[2]));
    let stage4 = conv(c[2], c[3], 3, true) + d[3] * attention_block(c[3], r[3]);
    stage1 + stage2 + stage3 + stage4
}

/// The full-size encoder: widths 64/128/256/512, blocks 2/2/4/1, `n = 4`,
/// FFN ratios 4/4/4/2.
pub fn full_encoder() -> usize {
    encoder([64, 128, 256, 512], [2, 2, 4, 1], 4, [4, 4, 4, 2])
}
