//! Entropy coding and the single-file compressed container.

mod container;
mod huffman;

pub use container::{
    measure, pack, unpack, write_container, read_container, CompressedModel, ModelParts, RawField, SectionKind,
    SizeBreakdown, StreamInfo, CONTAINER_VERSION, MAGIC,
};
pub use huffman::{code_lengths, huffman_decode, huffman_encode, payload_bits, HuffmanTable, MAX_CODE_LEN};

use std::io::{Read, Write};

use lzma_rust2::{LzmaOptions, LzmaReader, LzmaWriter};

use crate::error::{Error, Result};

/// Compresses `bytes` as a `.lzma` stream (13-byte header with the exact
/// uncompressed size) at preset 6.
pub fn lzma_wrap(bytes: &[u8]) -> Result<Vec<u8>> {
    let enc = |e: std::io::Error| Error::Encoding(format!("lzma: {e}"));
    let mut w = LzmaWriter::new_use_header(Vec::new(), &LzmaOptions::with_preset(6), Some(bytes.len() as u64))
        .map_err(enc)?;
    w.write_all(bytes).map_err(enc)?;
    w.finish().map_err(enc)
}

pub fn lzma_unwrap(bytes: &[u8]) -> Result<Vec<u8>> {
    let dec = |e: std::io::Error| Error::Decode(format!("lzma: {e}"));
    let declared = bytes
        .get(5..13)
        .map(|b| u64::from_le_bytes(b.try_into().unwrap()))
        .ok_or_else(|| Error::Truncated("lzma header".into()))?;
    let mut r = LzmaReader::new_mem_limit(bytes, u32::MAX, None).map_err(dec)?;
    let mut out = Vec::new();
    r.read_to_end(&mut out).map_err(dec)?;
    if out.len() as u64 != declared {
        return Err(Error::Decode("lzma: stream shorter than declared".into()));
    }
    Ok(out)
}
