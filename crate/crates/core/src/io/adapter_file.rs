//! Binary adapter format.
//!
//! All multi-byte values are little-endian:
//!
//! ```text
//! magic    "LOLDU1"                  6 bytes
//! version  u16
//! flags    u16   bit 0: factors included (full), bit 1: f32 storage
//! m, n, r  u32 × 3
//! alpha    f64
//! sigma    f64
//! init     u8    init method tag
//! seed     u64
//! perm     u32 × m
//! z_r      f64 × r   (f32 with bit 1)
//! L_r      m·r  ┐
//! U_r      r·n  ├ full mode only, row-major, same float width as z_r
//! rsm      m·n  ┘
//! crc32    u32   IEEE, over every preceding byte
//! ```
//!
//! A compact file carries only the trainable state plus what is needed to
//! rebuild the frozen parts from the base weight with one factorization.

use crate::adapter::{InitKind, InitMethod, LolduAdapter};
use crate::linalg::DenseMatrix;

use super::FormatError;

pub const MAGIC: &[u8; 6] = b"LOLDU1";
pub const FORMAT_VERSION: u16 = 1;
pub const FLAG_FACTORS: u16 = 1 << 0;
pub const FLAG_F32: u16 = 1 << 1;
/// Bytes before the permutation: magic, version, flags, m/n/r, alpha, sigma,
/// init tag, seed.
pub const HEADER_LEN: usize = 6 + 2 + 2 + 3 * 4 + 8 + 8 + 1 + 8;
pub const CRC_LEN: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SaveMode {
    /// Frozen factors and residual stored; loads without the base weight.
    Full,
    /// Only perm and trainable state; the base weight is needed to load.
    Compact,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Precision {
    F64,
    F32,
}

impl Precision {
    pub fn width(self) -> usize {
        match self {
            Precision::F64 => 8,
            Precision::F32 => 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdapterHeader {
    pub version: u16,
    pub flags: u16,
    pub m: usize,
    pub n: usize,
    pub r: usize,
    pub alpha: f64,
    pub sigma: f64,
    pub init: InitMethod,
}

impl AdapterHeader {
    pub fn mode(&self) -> SaveMode {
        if self.flags & FLAG_FACTORS != 0 {
            SaveMode::Full
        } else {
            SaveMode::Compact
        }
    }

    pub fn precision(&self) -> Precision {
        if self.flags & FLAG_F32 != 0 {
            Precision::F32
        } else {
            Precision::F64
        }
    }
}

/// Exact encoded size of a compact file: header, `4m` for the permutation,
/// `r` floats and the CRC.
pub fn compact_file_len(m: usize, r: usize, precision: Precision) -> usize {
    HEADER_LEN + 4 * m + precision.width() * r + CRC_LEN
}

/// Exact encoded size of a full file.
pub fn full_file_len(m: usize, n: usize, r: usize, precision: Precision) -> usize {
    compact_file_len(m, r, precision) + precision.width() * (m * r + r * n + m * n)
}

struct Writer {
    buf: Vec<u8>,
    precision: Precision,
}

impl Writer {
    fn float(&mut self, v: f64) {
        match self.precision {
            Precision::F64 => self.buf.extend_from_slice(&v.to_le_bytes()),
            Precision::F32 => self.buf.extend_from_slice(&(v as f32).to_le_bytes()),
        }
    }

    fn floats(&mut self, vs: &[f64]) {
        for &v in vs {
            self.float(v);
        }
    }
}

pub fn save_adapter(adapter: &LolduAdapter, mode: SaveMode) -> Vec<u8> {
    save_adapter_with(adapter, mode, Precision::F64)
}

pub fn save_adapter_with(adapter: &LolduAdapter, mode: SaveMode, precision: Precision) -> Vec<u8> {
    let (m, n) = adapter.base_shape();
    let r = adapter.rank();
    let mut flags = 0u16;
    if mode == SaveMode::Full {
        flags |= FLAG_FACTORS;
    }
    if precision == Precision::F32 {
        flags |= FLAG_F32;
    }
    let capacity = match mode {
        SaveMode::Full => full_file_len(m, n, r, precision),
        SaveMode::Compact => compact_file_len(m, r, precision),
    };
    let mut w = Writer {
        buf: Vec::with_capacity(capacity),
        precision,
    };
    w.buf.extend_from_slice(MAGIC);
    w.buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    w.buf.extend_from_slice(&flags.to_le_bytes());
    for dim in [m, n, r] {
        w.buf.extend_from_slice(&(dim as u32).to_le_bytes());
    }
    w.buf.extend_from_slice(&adapter.alpha().to_le_bytes());
    w.buf.extend_from_slice(&adapter.sigma().to_le_bytes());
    w.buf.push(adapter.init().kind.tag());
    w.buf.extend_from_slice(&adapter.init().seed.to_le_bytes());
    for &p in adapter.perm() {
        w.buf.extend_from_slice(&(p as u32).to_le_bytes());
    }
    w.floats(adapter.z());
    if mode == SaveMode::Full {
        w.floats(adapter.lower().as_slice());
        w.floats(adapter.upper().as_slice());
        w.floats(adapter.residual().as_slice());
    }
    let crc = crc32fast::hash(&w.buf);
    w.buf.extend_from_slice(&crc.to_le_bytes());
    debug_assert_eq!(w.buf.len(), capacity);
    w.buf
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, len: usize) -> Result<&'a [u8], FormatError> {
        let end = self.pos + len;
        if end > self.bytes.len() {
            return Err(FormatError::Truncated {
                needed: end,
                available: self.bytes.len(),
            });
        }
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u16(&mut self) -> Result<u16, FormatError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, FormatError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, FormatError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64, FormatError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn floats(&mut self, count: usize, precision: Precision) -> Result<Vec<f64>, FormatError> {
        let raw = self.take(count * precision.width())?;
        Ok(match precision {
            Precision::F64 => raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect(),
            Precision::F32 => raw
                .chunks_exact(4)
                .map(|c| f64::from(f32::from_le_bytes(c.try_into().unwrap())))
                .collect(),
        })
    }
}

/// Checks magic and CRC, returning the body (everything before the CRC).
fn verified_body(bytes: &[u8]) -> Result<&[u8], FormatError> {
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err(FormatError::BadMagic);
    }
    if bytes.len() < MAGIC.len() + CRC_LEN {
        return Err(FormatError::CrcMismatch {
            stored: 0,
            computed: 0,
        });
    }
    let (body, trailer) = bytes.split_at(bytes.len() - CRC_LEN);
    let stored = u32::from_le_bytes(trailer.try_into().unwrap());
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(FormatError::CrcMismatch { stored, computed });
    }
    Ok(body)
}

fn parse_header(reader: &mut Reader<'_>) -> Result<AdapterHeader, FormatError> {
    reader.take(MAGIC.len())?;
    let version = reader.u16()?;
    if version == 0 || version > FORMAT_VERSION {
        return Err(FormatError::VersionUnsupported(version));
    }
    let flags = reader.u16()?;
    let m = reader.u32()? as usize;
    let n = reader.u32()? as usize;
    let r = reader.u32()? as usize;
    let alpha = reader.f64()?;
    let sigma = reader.f64()?;
    let tag = reader.take(1)?[0];
    let kind = InitKind::from_tag(tag).ok_or(FormatError::BadInitTag(tag))?;
    let seed = reader.u64()?;
    Ok(AdapterHeader {
        version,
        flags,
        m,
        n,
        r,
        alpha,
        sigma,
        init: InitMethod::new(kind, seed),
    })
}

/// Validates magic, CRC and version, then decodes the header only.
pub fn read_header(bytes: &[u8]) -> Result<AdapterHeader, FormatError> {
    let body = verified_body(bytes)?;
    parse_header(&mut Reader {
        bytes: body,
        pos: 0,
    })
}

/// Decodes the header without checking the CRC, for diagnostics on damaged
/// files. Pair with [`verify_crc`].
pub fn read_header_unverified(bytes: &[u8]) -> Result<AdapterHeader, FormatError> {
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err(FormatError::BadMagic);
    }
    parse_header(&mut Reader { bytes, pos: 0 })
}

/// Checks magic and the trailing CRC32.
pub fn verify_crc(bytes: &[u8]) -> Result<(), FormatError> {
    verified_body(bytes).map(|_| ())
}

/// Decodes an adapter. Compact files need `base` (the original `W0`), from
/// which the frozen factors are recomputed deterministically.
pub fn load_adapter(bytes: &[u8], base: Option<&DenseMatrix>) -> Result<LolduAdapter, FormatError> {
    let body = verified_body(bytes)?;
    let mut reader = Reader {
        bytes: body,
        pos: 0,
    };
    let header = parse_header(&mut reader)?;
    let AdapterHeader { m, n, r, .. } = header;
    let precision = header.precision();
    let expected = match header.mode() {
        SaveMode::Full => full_file_len(m, n, r, precision),
        SaveMode::Compact => compact_file_len(m, r, precision),
    };
    if bytes.len() != expected {
        return Err(FormatError::LengthMismatch {
            expected,
            got: bytes.len(),
        });
    }
    let perm = (0..m)
        .map(|_| reader.u32().map(|p| p as usize))
        .collect::<Result<Vec<_>, _>>()?;
    let z = reader.floats(r, precision)?;

    match header.mode() {
        SaveMode::Full => {
            let lower = DenseMatrix::new(m, r, reader.floats(m * r, precision)?)?;
            let upper = DenseMatrix::new(r, n, reader.floats(r * n, precision)?)?;
            let rsm = DenseMatrix::new(m, n, reader.floats(m * n, precision)?)?;
            Ok(LolduAdapter::from_parts(
                perm,
                lower,
                upper,
                z,
                header.sigma,
                rsm,
                header.alpha,
                header.init,
            )?)
        }
        SaveMode::Compact => {
            let base = base.ok_or(FormatError::MissingBase)?;
            if base.shape() != (m, n) {
                return Err(FormatError::BaseMismatch(format!(
                    "base is {:?}, adapter expects ({m}, {n})",
                    base.shape()
                )));
            }
            let mut adapter = LolduAdapter::new(base, r, header.alpha, header.init)?;
            if adapter.perm() != perm.as_slice() {
                return Err(FormatError::BaseMismatch(
                    "pivot order of the base differs from the stored permutation".into(),
                ));
            }
            adapter.set_z(z)?;
            adapter.set_sigma(header.sigma);
            Ok(adapter)
        }
    }
}
