//! Streaming implementation of the 512-bit Streebog hash (GOST R 34.11-2012).
//!
//! The message is consumed as a little-endian byte string: the first byte of
//! input is the least significant byte of the first 512-bit block, and the
//! 64-byte output is the little-endian encoding of the final chaining value.
//! This is the convention of the published reference implementations; the
//! standard itself prints vectors as big-endian integers, so its test
//! messages and digests appear byte-reversed there.

use super::tables::{LINEAR, PI, ROUND_CONSTANTS};

pub const BLOCK_LEN: usize = 64;
pub const OUTPUT_LEN: usize = 64;

type State = [u64; 8];

/// `LPS_TABLE[j][b]` is the contribution of byte value `b`, found at byte
/// position `i` of input word `j`, to output word `i` after substitution,
/// transposition and the linear map.
static LPS_TABLE: [[u64; 256]; 8] = build_lps_table();

static ROUND_KEYS: [State; 12] = build_round_words();

const fn build_lps_table() -> [[u64; 256]; 8] {
    let mut table = [[0u64; 256]; 8];
    let mut pos = 0;
    while pos < 8 {
        let mut value = 0;
        while value < 256 {
            let substituted = PI[value];
            let mut acc = 0u64;
            let mut bit = 0;
            while bit < 8 {
                if substituted & (1 << bit) != 0 {
                    acc ^= LINEAR[8 * pos + bit];
                }
                bit += 1;
            }
            table[pos][value] = acc;
            value += 1;
        }
        pos += 1;
    }
    table
}

const fn build_round_words() -> [State; 12] {
    let mut out = [[0u64; 8]; 12];
    let mut r = 0;
    while r < 12 {
        let mut w = 0;
        while w < 8 {
            let mut word = 0u64;
            let mut b = 0;
            while b < 8 {
                word |= (ROUND_CONSTANTS[r][8 * w + b] as u64) << (8 * b);
                b += 1;
            }
            out[r][w] = word;
            w += 1;
        }
        r += 1;
    }
    out
}

/// X then LPS: `state <- LPS(state ^ key)`.
#[inline(always)]
fn xlps(state: &mut State, key: &State) {
    let mut x = [0u64; 8];
    for i in 0..8 {
        x[i] = state[i] ^ key[i];
    }
    let mut out = [0u64; 8];
    for (i, o) in out.iter_mut().enumerate() {
        let shift = 8 * i;
        let mut acc = 0u64;
        for (j, word) in x.iter().enumerate() {
            acc ^= LPS_TABLE[j][((word >> shift) & 0xff) as usize];
        }
        *o = acc;
    }
    *state = out;
}

/// Compression function `g_N(h, m)`.
fn compress(h: &mut State, counter: &State, block: &State) {
    let mut key = *h;
    xlps(&mut key, counter);
    let mut state = *block;
    for round_key in ROUND_KEYS.iter() {
        xlps(&mut state, &key);
        xlps(&mut key, round_key);
    }
    for i in 0..8 {
        h[i] ^= state[i] ^ key[i] ^ block[i];
    }
}

/// Addition modulo 2^512.
fn add_512(acc: &mut State, rhs: &State) {
    let mut carry = 0u64;
    for i in 0..8 {
        let (s1, c1) = acc[i].overflowing_add(rhs[i]);
        let (s2, c2) = s1.overflowing_add(carry);
        acc[i] = s2;
        carry = (c1 as u64) + (c2 as u64);
    }
}

fn load_block(bytes: &[u8; BLOCK_LEN]) -> State {
    let mut out = [0u64; 8];
    for (w, chunk) in out.iter_mut().zip(bytes.chunks_exact(8)) {
        *w = u64::from_le_bytes(chunk.try_into().expect("8-byte chunk"));
    }
    out
}

/// Incremental hasher.
#[derive(Clone)]
pub struct Streebog512 {
    h: State,
    counter: State,
    sigma: State,
    buffer: [u8; BLOCK_LEN],
    buffered: usize,
}

impl Default for Streebog512 {
    fn default() -> Self {
        Self::new()
    }
}

impl Streebog512 {
    pub fn new() -> Self {
        Self {
            h: [0; 8],
            counter: [0; 8],
            sigma: [0; 8],
            buffer: [0; BLOCK_LEN],
            buffered: 0,
        }
    }

    fn absorb(&mut self, block: &[u8; BLOCK_LEN], bits: u64) {
        let m = load_block(block);
        compress(&mut self.h, &self.counter, &m);
        add_512(&mut self.counter, &[bits, 0, 0, 0, 0, 0, 0, 0]);
        add_512(&mut self.sigma, &m);
    }

    pub fn update(&mut self, mut data: &[u8]) {
        if self.buffered > 0 {
            let take = (BLOCK_LEN - self.buffered).min(data.len());
            self.buffer[self.buffered..self.buffered + take].copy_from_slice(&data[..take]);
            self.buffered += take;
            data = &data[take..];
            if self.buffered < BLOCK_LEN {
                return;
            }
            let block = self.buffer;
            self.absorb(&block, 512);
            self.buffered = 0;
        }
        let mut blocks = data.chunks_exact(BLOCK_LEN);
        for block in &mut blocks {
            self.absorb(block.try_into().expect("64-byte block"), 512);
        }
        let rest = blocks.remainder();
        self.buffer[..rest.len()].copy_from_slice(rest);
        self.buffered = rest.len();
    }

    pub fn finalize(mut self) -> [u8; OUTPUT_LEN] {
        let mut last = [0u8; BLOCK_LEN];
        last[..self.buffered].copy_from_slice(&self.buffer[..self.buffered]);
        last[self.buffered] = 0x01;
        self.absorb(&last, 8 * self.buffered as u64);

        let zero = [0u64; 8];
        let counter = self.counter;
        let sigma = self.sigma;
        compress(&mut self.h, &zero, &counter);
        compress(&mut self.h, &zero, &sigma);

        let mut out = [0u8; OUTPUT_LEN];
        for (chunk, w) in out.chunks_exact_mut(8).zip(self.h.iter()) {
            chunk.copy_from_slice(&w.to_le_bytes());
        }
        out
    }

    pub fn digest(data: &[u8]) -> [u8; OUTPUT_LEN] {
        let mut h = Self::new();
        h.update(data);
        h.finalize()
    }
}
