//! Bit-exact range coder over small alphabets, driven by externally
//! supplied frequency tables, plus the adaptive order-0 model used for the
//! coarsest octree level and the ablation baseline.
//!
//! Byte-stream contract (frozen): a carry-less byte-wise range coder with a
//! 32-bit range and 64-bit low. Interval scaling is exact
//! (`floor(range * cum / total)` at both ends), renormalization emits one
//! byte whenever `range < 2^24`, and the flush rounds `low` up to a multiple
//! of 2^24 and emits two bytes; the decoder reconstructs the implicit
//! trailing zero bytes (at most three) itself. The first cache byte is
//! suppressed, so an empty stream is a single byte.

use crate::error::{Error, Result};

/// All frequency tables sum to exactly this total.
pub const FREQ_TOTAL: u32 = 1 << 16;
const TOP: u32 = 1 << 24;
/// Trailing zero bytes the flush omits; the decoder may synthesize this many.
const FLUSH_SLACK: u32 = 3;

/// Integer frequencies over a small alphabet, summing to 2^16, with a
/// floor of 1 so every symbol stays codable (worst case 16 bits).
#[derive(Clone, Debug, PartialEq)]
pub struct FreqTable {
    cum: Vec<u32>,
}

impl FreqTable {
    pub fn from_freqs(freqs: &[u32]) -> Result<Self> {
        if freqs.is_empty() {
            return Err(Error::Contract("empty frequency table".into()));
        }
        let mut cum = Vec::with_capacity(freqs.len() + 1);
        let mut acc = 0u32;
        cum.push(0);
        for &f in freqs {
            if f == 0 {
                return Err(Error::Contract("zero frequency violates the probability floor".into()));
            }
            acc = acc
                .checked_add(f)
                .ok_or_else(|| Error::Contract("frequency overflow".into()))?;
            cum.push(acc);
        }
        if acc != FREQ_TOTAL {
            return Err(Error::Contract(format!(
                "frequencies sum to {acc}, expected {FREQ_TOTAL}"
            )));
        }
        Ok(FreqTable { cum })
    }

    pub fn symbol_count(&self) -> usize {
        self.cum.len() - 1
    }

    pub fn freq(&self, sym: usize) -> u32 {
        self.cum[sym + 1] - self.cum[sym]
    }

    fn bounds(&self, sym: usize) -> (u32, u32) {
        (self.cum[sym], self.cum[sym + 1])
    }

    /// Largest index s with cum[s] <= target.
    fn find(&self, target: u32) -> usize {
        self.cum.partition_point(|&c| c <= target) - 1
    }

    /// Information content of `sym` under the quantized table, in bits.
    pub fn ideal_bits(&self, sym: usize) -> f64 {
        -((self.freq(sym) as f64 / FREQ_TOTAL as f64).log2())
    }
}

/// Largest-remainder apportionment of a probability vector to integer
/// frequencies totalling 2^16, floor 1 per symbol, ties broken by lower
/// symbol index.
pub fn quantize_distribution(probs: &[f64]) -> Result<FreqTable> {
    if probs.is_empty() {
        return Err(Error::Contract("empty distribution".into()));
    }
    let mut sum = 0.0;
    for &p in probs {
        if !p.is_finite() || p < 0.0 {
            return Err(Error::Numeric(format!("bad probability {p}")));
        }
        sum += p;
    }
    if sum <= 0.0 {
        return Err(Error::Numeric("distribution sums to zero".into()));
    }
    let k = probs.len();
    let mut freqs = vec![0u32; k];
    let mut rema: Vec<(f64, usize)> = Vec::with_capacity(k);
    let mut assigned: i64 = 0;
    for (i, &p) in probs.iter().enumerate() {
        let ideal = p / sum * FREQ_TOTAL as f64;
        let fl = ideal.floor();
        let f = (fl as i64).max(1) as u32;
        freqs[i] = f;
        assigned += f as i64;
        rema.push((ideal - fl, i));
    }
    let mut deficit = FREQ_TOTAL as i64 - assigned;
    if deficit > 0 {
        // Hand out +1 to the largest remainders, lower index first on ties.
        rema.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
        let mut i = 0;
        while deficit > 0 {
            freqs[rema[i % k].1] += 1;
            deficit -= 1;
            i += 1;
        }
    } else if deficit < 0 {
        // Floor clamping oversubscribed; take back from the largest entries.
        let mut order: Vec<usize> = (0..k).collect();
        order.sort_by(|&a, &b| freqs[b].cmp(&freqs[a]).then(a.cmp(&b)));
        let mut i = 0;
        while deficit < 0 {
            let idx = order[i % k];
            if freqs[idx] > 1 {
                freqs[idx] -= 1;
                deficit += 1;
            }
            i += 1;
        }
    }
    FreqTable::from_freqs(&freqs)
}

pub struct RangeEncoder {
    low: u64,
    range: u32,
    cache: u8,
    pending_ff: u64,
    first_done: bool,
    out: Vec<u8>,
}

impl Default for RangeEncoder {
    fn default() -> Self {
        Self::new()
    }
}

impl RangeEncoder {
    pub fn new() -> Self {
        RangeEncoder {
            low: 0,
            range: u32::MAX,
            cache: 0,
            pending_ff: 0,
            first_done: false,
            out: Vec::new(),
        }
    }

    fn shift_low(&mut self) {
        if self.low < 0xFF00_0000 || self.low > 0xFFFF_FFFF {
            let carry = (self.low >> 32) as u8;
            if self.first_done {
                self.out.push(self.cache.wrapping_add(carry));
            }
            self.first_done = true;
            while self.pending_ff > 0 {
                self.out.push(0xFFu8.wrapping_add(carry));
                self.pending_ff -= 1;
            }
            self.cache = (self.low >> 24) as u8;
        } else {
            self.pending_ff += 1;
        }
        self.low = (self.low << 8) & 0xFFFF_FFFF;
    }

    fn encode_interval(&mut self, cum_lo: u32, cum_hi: u32, total: u32) {
        debug_assert!(cum_lo < cum_hi && cum_hi <= total);
        let r = self.range as u64;
        let lo = r * cum_lo as u64 / total as u64;
        let hi = r * cum_hi as u64 / total as u64;
        self.low += lo;
        self.range = (hi - lo) as u32;
        while self.range < TOP {
            self.shift_low();
            self.range <<= 8;
        }
    }

    pub fn encode_symbol(&mut self, table: &FreqTable, sym: usize) {
        let (lo, hi) = table.bounds(sym);
        self.encode_interval(lo, hi, FREQ_TOTAL);
    }

    /// Encodes one symbol of an adaptive model with arbitrary total <= 2^16.
    pub fn encode_adaptive(&mut self, cum_lo: u32, cum_hi: u32, total: u32) {
        self.encode_interval(cum_lo, cum_hi, total);
    }

    pub fn finish(mut self) -> Vec<u8> {
        // Round low up to a multiple of 2^24; the gap is < 2^24 <= range,
        // so the value stays inside the final interval. Only the top byte
        // is meaningful, the decoder zero-fills the rest.
        self.low = ((self.low + (1 << 24) - 1) >> 24) << 24;
        self.shift_low();
        self.shift_low();
        self.out
    }
}

pub struct RangeDecoder<'a> {
    buf: &'a [u8],
    pos: usize,
    range: u32,
    code: u32,
    virtual_reads: u32,
}

impl<'a> RangeDecoder<'a> {
    pub fn new(buf: &'a [u8]) -> Result<Self> {
        let mut d = RangeDecoder {
            buf,
            pos: 0,
            range: u32::MAX,
            code: 0,
            virtual_reads: 0,
        };
        for _ in 0..4 {
            let b = d.next_byte()?;
            d.code = (d.code << 8) | b as u32;
        }
        Ok(d)
    }

    fn next_byte(&mut self) -> Result<u8> {
        if self.pos < self.buf.len() {
            let b = self.buf[self.pos];
            self.pos += 1;
            Ok(b)
        } else {
            self.virtual_reads += 1;
            if self.virtual_reads > FLUSH_SLACK {
                Err(Error::Corrupt("range coder stream underflow".into()))
            } else {
                Ok(0)
            }
        }
    }

    /// Largest cumulative value consistent with the current code window.
    fn target(&self, total: u32) -> u32 {
        let t = ((self.code as u64 + 1) * total as u64 - 1) / self.range as u64;
        (t as u32).min(total - 1)
    }

    fn consume(&mut self, cum_lo: u32, cum_hi: u32, total: u32) -> Result<()> {
        let r = self.range as u64;
        let lo = r * cum_lo as u64 / total as u64;
        let hi = r * cum_hi as u64 / total as u64;
        self.code = self.code.wrapping_sub(lo as u32);
        self.range = (hi - lo) as u32;
        while self.range < TOP {
            let b = self.next_byte()?;
            self.code = (self.code << 8) | b as u32;
            self.range <<= 8;
        }
        Ok(())
    }

    pub fn decode_symbol(&mut self, table: &FreqTable) -> Result<usize> {
        let sym = table.find(self.target(FREQ_TOTAL));
        let (lo, hi) = table.bounds(sym);
        self.consume(lo, hi, FREQ_TOTAL)?;
        Ok(sym)
    }

    /// Adaptive-model decode: returns the target cumulative value; the
    /// caller locates the symbol and then calls `consume_adaptive`.
    pub fn adaptive_target(&self, total: u32) -> u32 {
        self.target(total)
    }

    pub fn consume_adaptive(&mut self, cum_lo: u32, cum_hi: u32, total: u32) -> Result<()> {
        self.consume(cum_lo, cum_hi, total)
    }

    /// Bytes actually consumed from the buffer.
    pub fn consumed(&self) -> usize {
        self.pos
    }
}

/// Order-0 adaptive frequency model: per-symbol counts start at 1 and are
/// incremented after each symbol, identically on encoder and decoder.
/// Counts are halved (floor, min 1) when the total would exceed 2^16.
#[derive(Clone, Debug)]
pub struct AdaptiveModel {
    freq: Vec<u32>,
    total: u32,
}

impl AdaptiveModel {
    pub fn new(alphabet: usize) -> Self {
        assert!(alphabet >= 1 && alphabet <= FREQ_TOTAL as usize / 2);
        AdaptiveModel {
            freq: vec![1; alphabet],
            total: alphabet as u32,
        }
    }

    fn cum_lo(&self, sym: usize) -> u32 {
        self.freq[..sym].iter().sum()
    }

    fn update(&mut self, sym: usize) {
        self.freq[sym] += 1;
        self.total += 1;
        if self.total >= FREQ_TOTAL {
            self.total = 0;
            for f in &mut self.freq {
                *f = (*f + 1) / 2;
                self.total += *f;
            }
        }
    }

    pub fn encode(&mut self, enc: &mut RangeEncoder, sym: usize) {
        let lo = self.cum_lo(sym);
        enc.encode_adaptive(lo, lo + self.freq[sym], self.total);
        self.update(sym);
    }

    pub fn decode(&mut self, dec: &mut RangeDecoder) -> Result<usize> {
        let target = dec.adaptive_target(self.total);
        let mut acc = 0u32;
        let mut sym = self.freq.len() - 1;
        for (i, &f) in self.freq.iter().enumerate() {
            if acc + f > target {
                sym = i;
                break;
            }
            acc += f;
        }
        dec.consume_adaptive(acc, acc + self.freq[sym], self.total)?;
        self.update(sym);
        Ok(sym)
    }

    /// Cost of coding `sym` in bits under the current counts.
    pub fn cost_bits(&self, sym: usize) -> f64 {
        -((self.freq[sym] as f64 / self.total as f64).log2())
    }
}

/// Range-codes a symbol sequence where the table for position i may depend
/// only on symbols before i (causality).
pub fn encode_symbols<F>(symbols: &[u16], mut provider: F) -> Result<Vec<u8>>
where
    F: FnMut(usize, &[u16]) -> FreqTable,
{
    let mut enc = RangeEncoder::new();
    for (i, &s) in symbols.iter().enumerate() {
        let table = provider(i, &symbols[..i]);
        if s as usize >= table.symbol_count() {
            return Err(Error::Contract(format!("symbol {s} outside table")));
        }
        enc.encode_symbol(&table, s as usize);
    }
    Ok(enc.finish())
}

pub fn decode_symbols<F>(bytes: &[u8], mut provider: F, count: usize) -> Result<Vec<u16>>
where
    F: FnMut(usize, &[u16]) -> FreqTable,
{
    let mut out: Vec<u16> = Vec::with_capacity(count);
    if count == 0 {
        return Ok(out);
    }
    let mut dec = RangeDecoder::new(bytes)?;
    for i in 0..count {
        let table = provider(i, &out);
        out.push(dec.decode_symbol(&table)? as u16);
    }
    Ok(out)
}
