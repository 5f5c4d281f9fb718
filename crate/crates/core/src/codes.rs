//! Relaxed and packed binary codes.
//!
//! A [`RelaxedCode`] is the sigmoid output of the encoder, a point in
//! `[0,1]^q`. Thresholding gives a [`PackedCode`]: `q` bits stored
//! little-endian in 64-bit words (bit 0 of the code is bit 0 of word 0),
//! with every padding bit past `q` kept at zero so Hamming distance is a
//! plain XOR + popcount over the words.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub const DEFAULT_THRESHOLD: f64 = 0.5;

const WORD_BITS: usize = 64;
const DUMP_MAGIC: &[u8; 4] = b"OHC1";

#[inline]
pub fn words_for(bits: usize) -> usize {
    bits.div_ceil(WORD_BITS)
}

/// Encoder output in `[0,1]^q`.
#[derive(Debug, Clone, PartialEq)]
pub struct RelaxedCode(Vec<f64>);

impl RelaxedCode {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::InvalidInput("relaxed code of length zero".into()));
        }
        if let Some((b, v)) = values
            .iter()
            .enumerate()
            .find(|(_, v)| !v.is_finite() || **v < 0.0 || **v > 1.0)
        {
            return Err(Error::InvalidInput(format!(
                "relaxed code element {b} = {v} is not a finite value in [0,1]"
            )));
        }
        Ok(Self(values))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct PackedCode {
    words: Vec<u64>,
    bits: usize,
}

impl PackedCode {
    /// All-zero code of `bits` bits.
    pub fn zeros(bits: usize) -> Self {
        Self {
            words: vec![0; words_for(bits)],
            bits,
        }
    }

    /// Builds a code from raw words. Padding bits must be zero.
    pub fn from_words(words: Vec<u64>, bits: usize) -> Result<Self> {
        if bits == 0 {
            return Err(Error::InvalidInput("code length must be positive".into()));
        }
        if words.len() != words_for(bits) {
            return Err(Error::Dimension {
                expected: words_for(bits),
                actual: words.len(),
            });
        }
        let code = Self { words, bits };
        if code.words.last().copied().unwrap_or(0) & !code.last_word_mask() != 0 {
            return Err(Error::InvalidInput("padding bits beyond q are set".into()));
        }
        Ok(code)
    }

    pub fn from_bits(bits: &[bool]) -> Self {
        let mut code = Self::zeros(bits.len());
        for (b, &on) in bits.iter().enumerate() {
            if on {
                code.words[b / WORD_BITS] |= 1 << (b % WORD_BITS);
            }
        }
        code
    }

    /// Thresholds raw activations; `v >= threshold` maps to 1.
    pub fn from_relaxed(values: &[f64], threshold: f64) -> Result<Self> {
        if !(threshold > 0.0 && threshold < 1.0) {
            return Err(Error::InvalidInput(format!(
                "binarization threshold {threshold} outside (0,1)"
            )));
        }
        if values.is_empty() {
            return Err(Error::InvalidInput("relaxed code of length zero".into()));
        }
        let mut code = Self::zeros(values.len());
        for (b, &v) in values.iter().enumerate() {
            if !v.is_finite() {
                return Err(Error::InvalidInput(format!(
                    "non-finite activation {v} at bit {b}"
                )));
            }
            if v >= threshold {
                code.words[b / WORD_BITS] |= 1 << (b % WORD_BITS);
            }
        }
        Ok(code)
    }

    pub fn bit_len(&self) -> usize {
        self.bits
    }

    pub fn words(&self) -> &[u64] {
        &self.words
    }

    pub fn bit(&self, b: usize) -> bool {
        assert!(b < self.bits, "bit {b} out of range for {}-bit code", self.bits);
        self.words[b / WORD_BITS] >> (b % WORD_BITS) & 1 == 1
    }

    pub fn to_bits(&self) -> Vec<bool> {
        (0..self.bits).map(|b| self.bit(b)).collect()
    }

    pub fn count_ones(&self) -> u32 {
        self.words.iter().map(|w| w.count_ones()).sum()
    }

    /// Bitwise complement over the `q` meaningful bits.
    pub fn complement(&self) -> Self {
        let mut words: Vec<u64> = self.words.iter().map(|w| !w).collect();
        if let Some(last) = words.last_mut() {
            *last &= self.last_word_mask();
        }
        Self {
            words,
            bits: self.bits,
        }
    }

    fn last_word_mask(&self) -> u64 {
        match self.bits % WORD_BITS {
            0 => u64::MAX,
            r => (1u64 << r) - 1,
        }
    }

    /// Hamming distance without the length check. Both codes must have the
    /// same bit length.
    #[inline]
    pub fn hamming_unchecked(&self, other: &Self) -> u32 {
        debug_assert_eq!(self.bits, other.bits);
        self.words
            .iter()
            .zip(&other.words)
            .map(|(a, b)| (a ^ b).count_ones())
            .sum()
    }
}

pub fn binarize(code: &RelaxedCode, threshold: f64) -> Result<PackedCode> {
    PackedCode::from_relaxed(code.values(), threshold)
}

/// Number of differing bits between two codes of equal length.
pub fn hamming(a: &PackedCode, b: &PackedCode) -> Result<u32> {
    if a.bits != b.bits {
        return Err(Error::Dimension {
            expected: a.bits,
            actual: b.bits,
        });
    }
    Ok(a.hamming_unchecked(b))
}

/// Writes codes in the `OHC1` dump format: magic, `u32` q, `u32` count
/// (little-endian), then `count * ceil(q/64)` little-endian `u64` words.
pub fn write_codes<W: Write>(mut w: W, codes: &[PackedCode]) -> std::io::Result<()> {
    let bits = codes.first().map_or(0, |c| c.bits);
    if codes.iter().any(|c| c.bits != bits) {
        return Err(std::io::Error::new(
            std::io::ErrorKind::InvalidInput,
            "codes in one dump must share a bit length",
        ));
    }
    let to_u32 = |n: usize| {
        u32::try_from(n).map_err(|_| {
            std::io::Error::new(std::io::ErrorKind::InvalidInput, "value exceeds u32")
        })
    };
    w.write_all(DUMP_MAGIC)?;
    w.write_all(&to_u32(bits)?.to_le_bytes())?;
    w.write_all(&to_u32(codes.len())?.to_le_bytes())?;
    for c in codes {
        for word in &c.words {
            w.write_all(&word.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_codes<R: Read>(mut r: R) -> std::io::Result<Vec<PackedCode>> {
    let bad = |msg: &str| std::io::Error::new(std::io::ErrorKind::InvalidData, msg.to_string());
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != DUMP_MAGIC {
        return Err(bad("bad magic, expected OHC1"));
    }
    let mut u32buf = [0u8; 4];
    r.read_exact(&mut u32buf)?;
    let bits = u32::from_le_bytes(u32buf) as usize;
    r.read_exact(&mut u32buf)?;
    let count = u32::from_le_bytes(u32buf) as usize;
    if bits == 0 && count > 0 {
        return Err(bad("zero code length"));
    }
    let nwords = words_for(bits);
    let mut codes = Vec::with_capacity(count);
    let mut wbuf = [0u8; 8];
    for _ in 0..count {
        let mut words = Vec::with_capacity(nwords);
        for _ in 0..nwords {
            r.read_exact(&mut wbuf)?;
            words.push(u64::from_le_bytes(wbuf));
        }
        codes.push(PackedCode::from_words(words, bits).map_err(|e| bad(&e.to_string()))?);
    }
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)? != 0 {
        return Err(bad("trailing bytes after last code"));
    }
    Ok(codes)
}

pub fn save_codes(path: &Path, codes: &[PackedCode]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    write_codes(&mut w, codes).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load_codes(path: &Path) -> Result<Vec<PackedCode>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_codes(BufReader::new(file)).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })
}
