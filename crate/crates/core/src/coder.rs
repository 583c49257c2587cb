//! Bit-exact range coder over the 255-symbol occupancy alphabet.
//!
//! Probabilities are discretized to integer cumulative frequencies summing
//! to 2^16 before any coder arithmetic, so encoder and decoder stay in sync
//! as long as they see the same probability bits. Everything past the pmf
//! boundary is integer-only.

use crate::error::{LoccError, Result};

pub const PRECISION_BITS: u32 = 16;
pub const TOTAL_FREQ: u32 = 1 << PRECISION_BITS;
/// Coded alphabet is occupancy symbols 1..=255.
pub const ALPHABET: usize = 255;

const RENORM_LIMIT: u32 = 1 << 24;

/// Integer CDF over the 255 coded symbols: `cum[0] = 0`, `cum[255] = 2^16`,
/// strictly increasing (every symbol keeps frequency >= 1).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QuantizedCdf {
    cum: Box<[u32; 256]>,
}

impl QuantizedCdf {
    /// Deterministic largest-remainder quantization with a floor of one
    /// count per symbol. Ties go to the lower symbol index.
    pub fn from_pmf(pmf: &[f64]) -> Result<Self> {
        if pmf.len() != ALPHABET {
            return Err(LoccError::InvalidPmf(format!(
                "{} entries, expected {ALPHABET}",
                pmf.len()
            )));
        }
        let mut sum = 0.0;
        for &p in pmf {
            if !p.is_finite() || p < 0.0 {
                return Err(LoccError::InvalidPmf(format!("entry {p}")));
            }
            sum += p;
        }
        if (sum - 1.0).abs() > 1e-6 {
            return Err(LoccError::InvalidPmf(format!("sum {sum}")));
        }

        let budget = TOTAL_FREQ - ALPHABET as u32; // one count is pre-reserved per symbol
        let mut freq = [1u32; ALPHABET];
        let mut remainders: Vec<(usize, f64)> = Vec::with_capacity(ALPHABET);
        let mut assigned = 0u32;
        for (j, &p) in pmf.iter().enumerate() {
            let raw = p * budget as f64;
            let fl = raw.floor();
            freq[j] += fl as u32;
            assigned += fl as u32;
            remainders.push((j, raw - fl));
        }
        // order: larger remainder first, lower index on ties
        remainders.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
        let mut leftover = budget as i64 - assigned as i64;
        let mut cursor = 0usize;
        while leftover > 0 {
            freq[remainders[cursor % ALPHABET].0] += 1;
            leftover -= 1;
            cursor += 1;
        }
        while leftover < 0 {
            // pmf sum slightly above 1: trim the largest frequencies
            let j = (0..ALPHABET).max_by_key(|&j| freq[j]).unwrap();
            debug_assert!(freq[j] > 1);
            freq[j] -= 1;
            leftover += 1;
        }

        let mut cum = Box::new([0u32; 256]);
        for j in 0..ALPHABET {
            cum[j + 1] = cum[j] + freq[j];
        }
        debug_assert_eq!(cum[255], TOTAL_FREQ);
        Ok(Self { cum })
    }

    /// Fixed CDF used for the shallow direct-coded levels.
    pub fn uniform() -> Self {
        let pmf = [1.0 / ALPHABET as f64; ALPHABET];
        Self::from_pmf(&pmf).expect("uniform pmf is valid")
    }

    pub fn freq(&self, symbol: u8) -> u32 {
        debug_assert!(symbol >= 1);
        self.cum[symbol as usize] - self.cum[symbol as usize - 1]
    }

    pub fn cum_below(&self, symbol: u8) -> u32 {
        self.cum[symbol as usize - 1]
    }

    /// Ideal code length of `symbol` under this quantized model, in bits.
    pub fn cost_bits(&self, symbol: u8) -> f64 {
        PRECISION_BITS as f64 - (self.freq(symbol) as f64).log2()
    }

    /// Largest symbol index whose cumulative start is <= v.
    fn lookup(&self, v: u32) -> u8 {
        let mut lo = 1usize;
        let mut hi = 255usize;
        while lo < hi {
            let mid = (lo + hi + 1) / 2;
            if self.cum[mid - 1] <= v {
                lo = mid;
            } else {
                hi = mid - 1;
            }
        }
        lo as u8
    }
}

/// Byte-granular range encoder (64-bit low, 32-bit range, carry via a
/// cached byte). The leading zero byte of the classic scheme is dropped.
pub struct RangeEncoder {
    low: u64,
    range: u32,
    cache: u8,
    cache_size: u64,
    out: Vec<u8>,
    skipped_first: bool,
}

impl RangeEncoder {
    pub fn new() -> Self {
        Self {
            low: 0,
            range: u32::MAX,
            cache: 0,
            cache_size: 1,
            out: Vec::new(),
            skipped_first: false,
        }
    }

    pub fn bytes_written(&self) -> usize {
        self.out.len()
    }

    fn emit(&mut self, byte: u8) {
        if !self.skipped_first {
            self.skipped_first = true;
            debug_assert_eq!(byte, 0, "first range-coder byte must be zero");
            return;
        }
        self.out.push(byte);
    }

    fn shift_low(&mut self) {
        if self.low < 0xFF00_0000 || self.low > 0xFFFF_FFFF {
            let carry = (self.low >> 32) as u8;
            let first = self.cache.wrapping_add(carry);
            self.emit(first);
            for _ in 1..self.cache_size {
                self.emit(0xFFu8.wrapping_add(carry));
            }
            self.cache = (self.low >> 24) as u8;
            self.cache_size = 0;
        }
        self.cache_size += 1;
        self.low = (self.low << 8) & 0xFFFF_FFFF;
    }

    pub fn encode(&mut self, cdf: &QuantizedCdf, symbol: u8) {
        debug_assert!(symbol >= 1);
        let r = self.range >> PRECISION_BITS;
        self.low += r as u64 * cdf.cum_below(symbol) as u64;
        self.range = r * cdf.freq(symbol);
        while self.range < RENORM_LIMIT {
            self.shift_low();
            self.range <<= 8;
        }
    }

    /// Flush pending state and return the payload.
    pub fn finalize(mut self) -> Vec<u8> {
        for _ in 0..5 {
            self.shift_low();
        }
        self.out
    }
}

impl Default for RangeEncoder {
    fn default() -> Self {
        Self::new()
    }
}

/// Decoder mirroring [`RangeEncoder`]; consumes exactly the encoded bytes.
pub struct RangeDecoder<'a> {
    code: u32,
    range: u32,
    input: &'a [u8],
    pos: usize,
}

impl<'a> RangeDecoder<'a> {
    pub fn open(input: &'a [u8]) -> Result<Self> {
        if input.len() < 4 {
            return Err(LoccError::Truncation(format!(
                "payload of {} bytes",
                input.len()
            )));
        }
        let code = u32::from_be_bytes([input[0], input[1], input[2], input[3]]);
        Ok(Self {
            code,
            range: u32::MAX,
            input,
            pos: 4,
        })
    }

    fn next_byte(&mut self) -> Result<u8> {
        if self.pos >= self.input.len() {
            return Err(LoccError::Truncation("range coder ran past payload".into()));
        }
        let b = self.input[self.pos];
        self.pos += 1;
        Ok(b)
    }

    pub fn decode(&mut self, cdf: &QuantizedCdf) -> Result<u8> {
        let r = self.range >> PRECISION_BITS;
        let v = (self.code / r).min(TOTAL_FREQ - 1);
        let symbol = cdf.lookup(v);
        self.code -= r * cdf.cum_below(symbol);
        self.range = r * cdf.freq(symbol);
        while self.range < RENORM_LIMIT {
            let b = self.next_byte()?;
            self.code = (self.code << 8) | b as u32;
            self.range <<= 8;
        }
        Ok(symbol)
    }

    pub fn bytes_consumed(&self) -> usize {
        self.pos
    }
}
