//! Canonical, length-limited Huffman coding of integer streams.

use std::cmp::Reverse;
use std::collections::BinaryHeap;

use crate::error::{Error, Result};

pub const MAX_CODE_LEN: u8 = 32;

const MODE_EMPTY: u8 = 0;
const MODE_SINGLE: u8 = 1;
const MODE_TABLE: u8 = 2;

/// Code length per symbol; 0 marks an unused symbol.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct HuffmanTable {
    pub lengths: Vec<u8>,
}

impl HuffmanTable {
    /// Canonical codes: shorter first, then by symbol value.
    pub fn codes(&self) -> Vec<u32> {
        let mut order: Vec<usize> = (0..self.lengths.len()).filter(|&s| self.lengths[s] > 0).collect();
        order.sort_by_key(|&s| (self.lengths[s], s));
        let mut codes = vec![0u32; self.lengths.len()];
        let mut code: u64 = 0;
        let mut prev_len = 0u8;
        for (k, &s) in order.iter().enumerate() {
            let len = self.lengths[s];
            if k > 0 {
                code += 1;
            }
            code <<= len - prev_len;
            prev_len = len;
            codes[s] = code as u32;
        }
        codes
    }

    pub fn kraft_ok(&self) -> bool {
        let sum: f64 = self
            .lengths
            .iter()
            .filter(|&&l| l > 0)
            .map(|&l| 2f64.powi(-(l as i32)))
            .sum();
        sum <= 1.0 + 1e-12
    }
}

/// Optimal code lengths for `freqs`, limited to `max_len` bits.
pub fn code_lengths(freqs: &[u64], max_len: u8) -> Vec<u8> {
    let used: Vec<usize> = (0..freqs.len()).filter(|&s| freqs[s] > 0).collect();
    let mut lengths = vec![0u8; freqs.len()];
    match used.len() {
        0 => return lengths,
        1 => {
            lengths[used[0]] = 1;
            return lengths;
        }
        _ => {}
    }
    // Nodes: leaves 0..m, internal after; parent links give depths.
    let m = used.len();
    let mut parent = vec![usize::MAX; 2 * m - 1];
    let mut heap: BinaryHeap<Reverse<(u64, usize)>> = used.iter().enumerate().map(|(k, &s)| Reverse((freqs[s], k))).collect();
    let mut next = m;
    while heap.len() > 1 {
        let Reverse((fa, a)) = heap.pop().unwrap();
        let Reverse((fb, b)) = heap.pop().unwrap();
        parent[a] = next;
        parent[b] = next;
        heap.push(Reverse((fa + fb, next)));
        next += 1;
    }
    let mut depth = vec![0u32; 2 * m - 1];
    for node in (0..2 * m - 2).rev() {
        depth[node] = depth[parent[node]] + 1;
    }
    let mut lens: Vec<u32> = (0..m).map(|k| depth[k]).collect();
    let limit = max_len as u32;
    if lens.iter().any(|&l| l > limit) {
        for l in lens.iter_mut() {
            *l = (*l).min(limit);
        }
        // Restore Kraft by lengthening the least frequent codes that still
        // have room.
        let unit = |l: u32| 1u64 << (limit - l);
        let mut kraft: u64 = lens.iter().map(|&l| unit(l)).sum();
        let cap = 1u64 << limit;
        let mut by_freq: Vec<usize> = (0..m).collect();
        by_freq.sort_by_key(|&k| (freqs[used[k]], Reverse(k)));
        while kraft > cap {
            let k = *by_freq.iter().find(|&&k| lens[k] < limit).expect("Kraft repair");
            kraft -= unit(lens[k]) - unit(lens[k] + 1);
            lens[k] += 1;
        }
    }
    for (k, &s) in used.iter().enumerate() {
        lengths[s] = lens[k] as u8;
    }
    lengths
}

struct BitWriter {
    bytes: Vec<u8>,
    bits: u64,
}

impl BitWriter {
    fn push(&mut self, code: u32, len: u8) {
        for i in (0..len).rev() {
            if self.bits.is_multiple_of(8) {
                self.bytes.push(0);
            }
            if (code >> i) & 1 == 1 {
                *self.bytes.last_mut().unwrap() |= 0x80 >> (self.bits % 8);
            }
            self.bits += 1;
        }
    }
}

/// Encodes `symbols` (each `< alphabet`) into a self-describing stream:
/// mode byte, symbol count, then nothing (empty), the symbol (single), or
/// the code-length table and the bitstream.
pub fn huffman_encode(symbols: &[u32], alphabet: u32) -> Result<Vec<u8>> {
    if alphabet == 0 {
        return Err(Error::Encoding("alphabet must be non-empty".into()));
    }
    let mut freqs = vec![0u64; alphabet as usize];
    for &s in symbols {
        if s >= alphabet {
            return Err(Error::Encoding(format!("symbol {s} outside alphabet of {alphabet}")));
        }
        freqs[s as usize] += 1;
    }
    let mut out = Vec::new();
    let distinct = freqs.iter().filter(|&&f| f > 0).count();
    if symbols.is_empty() {
        out.push(MODE_EMPTY);
        return Ok(out);
    }
    if distinct == 1 {
        out.push(MODE_SINGLE);
        out.extend_from_slice(&(symbols.len() as u64).to_le_bytes());
        out.extend_from_slice(&symbols[0].to_le_bytes());
        return Ok(out);
    }
    let table = HuffmanTable {
        lengths: code_lengths(&freqs, MAX_CODE_LEN),
    };
    let codes = table.codes();
    let used_len = table.lengths.iter().rposition(|&l| l > 0).map_or(0, |p| p + 1);
    out.push(MODE_TABLE);
    out.extend_from_slice(&(symbols.len() as u64).to_le_bytes());
    out.extend_from_slice(&(used_len as u32).to_le_bytes());
    out.extend_from_slice(&table.lengths[..used_len]);
    let mut w = BitWriter {
        bytes: Vec::new(),
        bits: 0,
    };
    for &s in symbols {
        w.push(codes[s as usize], table.lengths[s as usize]);
    }
    out.extend_from_slice(&w.bits.to_le_bytes());
    out.extend_from_slice(&w.bytes);
    Ok(out)
}

/// Payload bits of an encoded stream, excluding its table and framing.
pub fn payload_bits(stream: &[u8]) -> Result<u64> {
    let mut r = Reader { buf: stream, pos: 0 };
    match r.u8()? {
        MODE_EMPTY | MODE_SINGLE => Ok(0),
        MODE_TABLE => {
            r.u64()?;
            let n = r.u32()? as usize;
            r.take(n)?;
            r.u64()
        }
        m => Err(Error::Decode(format!("unknown Huffman stream mode {m}"))),
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).ok_or_else(|| Error::Truncated("Huffman stream".into()))?;
        let s = self.buf.get(self.pos..end).ok_or_else(|| Error::Truncated("Huffman stream".into()))?;
        self.pos = end;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Decodes one stream produced by [`huffman_encode`]; returns the symbols
/// and the number of bytes consumed.
pub fn huffman_decode(stream: &[u8]) -> Result<(Vec<u32>, usize)> {
    let mut r = Reader { buf: stream, pos: 0 };
    match r.u8()? {
        MODE_EMPTY => Ok((Vec::new(), r.pos)),
        MODE_SINGLE => {
            let n = r.u64()? as usize;
            let s = r.u32()?;
            if n > 1 << 32 {
                return Err(Error::Decode("implausible symbol count".into()));
            }
            Ok((vec![s; n], r.pos))
        }
        MODE_TABLE => {
            let n = r.u64()? as usize;
            let used = r.u32()? as usize;
            let lengths = r.take(used)?.to_vec();
            if lengths.iter().any(|&l| l > MAX_CODE_LEN) {
                return Err(Error::Decode("code length above limit".into()));
            }
            let table = HuffmanTable { lengths };
            if !table.kraft_ok() {
                return Err(Error::Decode("code lengths violate Kraft inequality".into()));
            }
            let bits = r.u64()?;
            let bytes = r.take(bits.div_ceil(8) as usize)?;
            // Every code is at least one bit long.
            if bits < n as u64 {
                return Err(Error::Decode("bit count too small for symbol count".into()));
            }
            let syms = decode_bits(&table, bytes, bits, n)?;
            Ok((syms, r.pos))
        }
        m => Err(Error::Decode(format!("unknown Huffman stream mode {m}"))),
    }
}

fn decode_bits(table: &HuffmanTable, bytes: &[u8], bits: u64, n: usize) -> Result<Vec<u32>> {
    let max = MAX_CODE_LEN as usize;
    let mut count = vec![0u64; max + 1];
    for &l in &table.lengths {
        if l > 0 {
            count[l as usize] += 1;
        }
    }
    let mut order: Vec<u32> = (0..table.lengths.len() as u32).filter(|&s| table.lengths[s as usize] > 0).collect();
    order.sort_by_key(|&s| (table.lengths[s as usize], s));
    // First canonical code and first sorted position of each length.
    let mut first_code = vec![0u64; max + 2];
    let mut first_pos = vec![0usize; max + 2];
    let mut code = 0u64;
    let mut pos = 0usize;
    for len in 1..=max {
        first_code[len] = code;
        first_pos[len] = pos;
        code = (code + count[len]) << 1;
        pos += count[len] as usize;
    }
    let mut out = Vec::with_capacity(n);
    let mut bit = 0u64;
    for _ in 0..n {
        let mut c = 0u64;
        let mut len = 0usize;
        loop {
            if bit >= bits || len >= max {
                return Err(Error::Decode("Huffman bitstream ended mid-symbol".into()));
            }
            let b = (bytes[(bit / 8) as usize] >> (7 - bit % 8)) & 1;
            bit += 1;
            c = (c << 1) | b as u64;
            len += 1;
            if count[len] > 0 && c >= first_code[len] && c - first_code[len] < count[len] {
                out.push(order[first_pos[len] + (c - first_code[len]) as usize]);
                break;
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_example_lengths() {
        assert_eq!(code_lengths(&[2, 1, 1], 32), vec![1, 2, 2]);
        let s = huffman_encode(&[0, 0, 1, 2], 3).unwrap();
        assert_eq!(payload_bits(&s).unwrap(), 6);
        assert_eq!(huffman_decode(&s).unwrap().0, vec![0, 0, 1, 2]);
    }

    #[test]
    fn single_symbol_stream_has_no_payload() {
        let s = huffman_encode(&[7; 50], 8).unwrap();
        assert_eq!(payload_bits(&s).unwrap(), 0);
        assert_eq!(huffman_decode(&s).unwrap().0, vec![7; 50]);
    }

    #[test]
    fn out_of_range_symbol_is_encoding_error() {
        assert!(matches!(huffman_encode(&[3], 3), Err(Error::Encoding(_))));
    }

    #[test]
    fn length_limit_is_enforced() {
        // Fibonacci frequencies force a maximally skewed tree.
        let mut f = vec![1u64, 1];
        while f.len() < 40 {
            let n = f[f.len() - 1] + f[f.len() - 2];
            f.push(n);
        }
        let l = code_lengths(&f, 32);
        assert!(l.iter().all(|x| (1..=32).contains(x)));
        assert!(HuffmanTable { lengths: l }.kraft_ok());
    }
}
