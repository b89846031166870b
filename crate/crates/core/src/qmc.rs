//! Sobol sequences with optional nested uniform (Owen) scrambling.
//!
//! Direction numbers come from the Joe–Kuo `new-joe-kuo-6.21201` table,
//! shipped under `data/` in its published whitespace format. Dimension 1 is
//! the van der Corput sequence and is not listed in the table.
//!
//! Points are generated in Gray-code order with 32 bits of precision. The
//! first point of the unscrambled sequence (the origin) is kept.

use std::sync::OnceLock;

use crate::error::{Error, Result};

const BITS: usize = 32;
const JOE_KUO: &str = include_str!("../data/new-joe-kuo-6.21201");

/// Largest dimension covered by the embedded direction numbers.
pub const MAX_DIM: usize = 21201;

/// One row of a Joe–Kuo table: primitive-polynomial degree `s`, its packed
/// interior coefficients `a` and the initial direction integers `m`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DirectionEntry {
    pub dim: usize,
    pub degree: u32,
    pub coeffs: u32,
    pub initial: Vec<u32>,
}

/// Parses a direction-number table in the Joe–Kuo text format
/// (`d s a m_1 .. m_s` per line). A header line starting with `d` is skipped.
pub fn parse_direction_numbers(text: &str) -> Result<Vec<DirectionEntry>> {
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('d') || line.starts_with('#') {
            continue;
        }
        let fields: Vec<u64> = line
            .split_whitespace()
            .map(|f| f.parse::<u64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::invalid(format!("direction table line {}: {e}", lineno + 1)))?;
        if fields.len() < 3 {
            return Err(Error::invalid(format!(
                "direction table line {}: expected `d s a m_i...`",
                lineno + 1
            )));
        }
        let degree = fields[1] as u32;
        let initial: Vec<u32> = fields[3..].iter().map(|&m| m as u32).collect();
        if degree == 0 || initial.len() != degree as usize {
            return Err(Error::invalid(format!(
                "direction table line {}: degree {} but {} initial numbers",
                lineno + 1,
                degree,
                initial.len()
            )));
        }
        out.push(DirectionEntry {
            dim: fields[0] as usize,
            degree,
            coeffs: fields[2] as u32,
            initial,
        });
    }
    Ok(out)
}

fn joe_kuo_table() -> &'static [DirectionEntry] {
    static TABLE: OnceLock<Vec<DirectionEntry>> = OnceLock::new();
    TABLE.get_or_init(|| parse_direction_numbers(JOE_KUO).expect("embedded table is well formed"))
}

/// Expands one table row into 32 direction integers `v_k = m_k · 2^(31-k)`.
fn direction_integers(entry: Option<&DirectionEntry>) -> [u32; BITS] {
    let mut v = [0u32; BITS];
    let Some(e) = entry else {
        for (k, vk) in v.iter_mut().enumerate() {
            *vk = 1 << (31 - k);
        }
        return v;
    };
    let s = e.degree as usize;
    let mut m = [0u64; BITS];
    for k in 0..BITS {
        m[k] = if k < s {
            e.initial[k] as u64
        } else {
            let mut mk = m[k - s] ^ (m[k - s] << s);
            for l in 1..s {
                if (e.coeffs >> (s - 1 - l)) & 1 == 1 {
                    mk ^= m[k - l] << l;
                }
            }
            mk
        };
    }
    for k in 0..BITS {
        v[k] = (m[k] << (31 - k)) as u32;
    }
    v
}

#[inline]
pub(crate) fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Nested uniform scramble of a 32-bit coordinate: the flip applied to each
/// digit depends on the seed, the dimension, the digit depth and every
/// higher-order digit.
fn owen_scramble(value: u32, dim: usize, seed: u64) -> u32 {
    let base = mix64(seed ^ mix64(dim as u64 + 0x9e37_79b9_7f4a_7c15));
    let mut out = 0u32;
    for depth in 0..BITS {
        let bit = 31 - depth;
        let prefix = if depth == 0 { 0 } else { (value >> (bit + 1)) as u64 };
        let key = mix64(base ^ mix64(((depth as u64) << 40) ^ prefix));
        let flip = (key & 1) as u32;
        out |= (((value >> bit) & 1) ^ flip) << bit;
    }
    out
}

/// A stream of Sobol points. Advancing is sequential; independent streams
/// may be used from different threads.
#[derive(Debug, Clone)]
pub struct SobolStream {
    dim: usize,
    index: u64,
    scramble_seed: Option<u64>,
    directions: Vec<[u32; BITS]>,
    state: Vec<u32>,
}

impl SobolStream {
    pub fn new(dim: usize, scramble_seed: Option<u64>) -> Result<Self> {
        if dim == 0 || dim > MAX_DIM {
            return Err(Error::invalid(format!(
                "Sobol dimension must be in 1..={MAX_DIM}, got {dim}"
            )));
        }
        let table = joe_kuo_table();
        let directions = (0..dim)
            .map(|j| direction_integers(if j == 0 { None } else { Some(&table[j - 1]) }))
            .collect();
        Ok(SobolStream {
            dim,
            index: 0,
            scramble_seed,
            directions,
            state: vec![0; dim],
        })
    }

    pub fn scrambled(dim: usize, seed: u64) -> Result<Self> {
        Self::new(dim, Some(seed))
    }

    pub fn unscrambled(dim: usize) -> Result<Self> {
        Self::new(dim, None)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Index of the next point to be produced.
    pub fn index(&self) -> u64 {
        self.index
    }

    pub fn next_point(&mut self) -> Vec<f64> {
        if self.index > 0 {
            let c = self.index.trailing_zeros() as usize;
            // 2^32 points exhaust the precision; wrap rather than panic.
            let c = c.min(BITS - 1);
            for (s, v) in self.state.iter_mut().zip(&self.directions) {
                *s ^= v[c];
            }
        }
        self.index += 1;
        const SCALE: f64 = 1.0 / 4_294_967_296.0;
        match self.scramble_seed {
            None => self.state.iter().map(|&s| s as f64 * SCALE).collect(),
            Some(seed) => self
                .state
                .iter()
                .enumerate()
                .map(|(j, &s)| owen_scramble(s, j, seed) as f64 * SCALE)
                .collect(),
        }
    }

    /// The next `n` points as rows.
    pub fn sobol_next(&mut self, n: usize) -> Result<Vec<Vec<f64>>> {
        if n == 0 {
            return Err(Error::invalid("must request at least one Sobol point"));
        }
        Ok((0..n).map(|_| self.next_point()).collect())
    }
}

/// Equal-weight QMC estimate of an integral over the unit cube.
pub fn integrate_mean(fvals: &[f64]) -> Result<f64> {
    if fvals.is_empty() {
        return Err(Error::invalid("cannot integrate over zero nodes"));
    }
    Ok(fvals.iter().sum::<f64>() / fvals.len() as f64)
}
