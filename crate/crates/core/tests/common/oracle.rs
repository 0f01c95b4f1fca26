//! Brute-force bit-level models of the guard's GF(2) step and signature.

/// Companion matrix as a grid of bits, built from the coefficient string
/// `c8 c7 ... c0`: ones on the superdiagonal, coefficients `c0..c7` in the
/// bottom row.
pub fn grid(coefficients: &str) -> [[bool; 8]; 8] {
    let c: Vec<bool> = coefficients.chars().map(|ch| ch == '1').collect();
    assert_eq!(c.len(), 9);
    let mut m = [[false; 8]; 8];
    for (i, row) in m.iter_mut().enumerate().take(7) {
        row[i + 1] = true;
    }
    for (j, cell) in m[7].iter_mut().enumerate() {
        *cell = c[8 - j];
    }
    m
}

/// Row vector (state bits, most significant first) times the matrix, plus
/// the input byte.
pub fn oracle_step(m: &[[bool; 8]; 8], state: u8, byte: u8) -> u8 {
    let v: Vec<bool> = (0..8).map(|i| state & (0x80 >> i) != 0).collect();
    let mut out = 0u8;
    for j in 0..8 {
        let mut bit = false;
        for i in 0..8 {
            bit ^= v[i] & m[i][j];
        }
        if bit {
            out |= 0x80 >> j;
        }
    }
    out ^ byte
}

/// Straight-line replay of the signature: alternate the two matrices, write
/// each new state at a cyclic position.
pub fn oracle_signature(data: &[u8], sign_len: usize) -> Vec<u8> {
    let ms = [grid("100011101"), grid("110101011")];
    let mut sig = vec![0u8; sign_len];
    let mut state = 0u8;
    for (n, &b) in data.iter().enumerate() {
        state = oracle_step(&ms[n % 2], state, b);
        sig[n % sign_len] = state;
    }
    sig
}
