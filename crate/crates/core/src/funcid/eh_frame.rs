//! Call frame information parser for `.eh_frame`.

use std::collections::HashMap;

use thiserror::Error;

use crate::image::{BinaryImage, Mode};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum EhFrameError {
    #[error("record at offset {offset:#x} is truncated")]
    Truncated { offset: u64 },
    #[error("record at offset {offset:#x}: unsupported pointer encoding {encoding:#04x}")]
    UnsupportedEncoding { offset: u64, encoding: u8 },
    #[error("record at offset {offset:#x}: no CIE at offset {cie:#x}")]
    MissingCie { offset: u64, cie: u64 },
    #[error("record at offset {offset:#x}: {message}")]
    BadCie { offset: u64, message: String },
}

/// One frame description entry.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Fde {
    pub offset: u64,
    pub initial_location: u64,
    pub address_range: u64,
}

pub const DW_EH_PE_ABSPTR: u8 = 0x00;
pub const DW_EH_PE_ULEB128: u8 = 0x01;
pub const DW_EH_PE_UDATA2: u8 = 0x02;
pub const DW_EH_PE_UDATA4: u8 = 0x03;
pub const DW_EH_PE_UDATA8: u8 = 0x04;
pub const DW_EH_PE_SLEB128: u8 = 0x09;
pub const DW_EH_PE_SDATA2: u8 = 0x0a;
pub const DW_EH_PE_SDATA4: u8 = 0x0b;
pub const DW_EH_PE_SDATA8: u8 = 0x0c;
pub const DW_EH_PE_PCREL: u8 = 0x10;
pub const DW_EH_PE_OMIT: u8 = 0xff;

struct Cursor<'a> {
    data: &'a [u8],
    pos: usize,
    record: u64,
}

impl Cursor<'_> {
    fn truncated(&self) -> EhFrameError {
        EhFrameError::Truncated {
            offset: self.record,
        }
    }

    fn take(&mut self, n: usize) -> Result<&[u8], EhFrameError> {
        let end = self.pos.checked_add(n).ok_or_else(|| self.truncated())?;
        if end > self.data.len() {
            return Err(self.truncated());
        }
        let s = &self.data[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, EhFrameError> {
        Ok(self.take(1)?[0])
    }

    fn uint(&mut self, n: usize) -> Result<u64, EhFrameError> {
        let b = self.take(n)?;
        let mut buf = [0u8; 8];
        buf[..n].copy_from_slice(b);
        Ok(u64::from_le_bytes(buf))
    }

    fn sint(&mut self, n: usize) -> Result<i64, EhFrameError> {
        let v = self.uint(n)?;
        let shift = 64 - 8 * n as u32;
        Ok(((v << shift) as i64) >> shift)
    }

    fn uleb(&mut self) -> Result<u64, EhFrameError> {
        let mut result = 0u64;
        let mut shift = 0;
        loop {
            let b = self.u8()?;
            if shift < 64 {
                result |= u64::from(b & 0x7f) << shift;
            }
            shift += 7;
            if b & 0x80 == 0 {
                return Ok(result);
            }
        }
    }

    fn sleb(&mut self) -> Result<i64, EhFrameError> {
        let mut result = 0i64;
        let mut shift = 0;
        let mut b;
        loop {
            b = self.u8()?;
            if shift < 64 {
                result |= i64::from(b & 0x7f) << shift;
            }
            shift += 7;
            if b & 0x80 == 0 {
                break;
            }
        }
        if shift < 64 && b & 0x40 != 0 {
            result |= -1i64 << shift;
        }
        Ok(result)
    }

    fn cstr(&mut self) -> Result<String, EhFrameError> {
        let rest = &self.data[self.pos..];
        let n = rest.iter().position(|&b| b == 0).ok_or_else(|| self.truncated())?;
        let s = String::from_utf8_lossy(&rest[..n]).into_owned();
        self.pos += n + 1;
        Ok(s)
    }

    /// Reads a pointer with the given encoding. `base` is the virtual
    /// address of byte 0 of `data`.
    fn encoded(&mut self, enc: u8, mode: Mode, base: u64, apply: bool) -> Result<u64, EhFrameError> {
        let field_addr = base + self.pos as u64;
        let value = match enc & 0x0f {
            DW_EH_PE_ABSPTR => self.uint(mode.pointer_size() as usize)?,
            DW_EH_PE_ULEB128 => self.uleb()?,
            DW_EH_PE_UDATA2 => self.uint(2)?,
            DW_EH_PE_UDATA4 => self.uint(4)?,
            DW_EH_PE_UDATA8 => self.uint(8)?,
            DW_EH_PE_SLEB128 => self.sleb()? as u64,
            DW_EH_PE_SDATA2 => self.sint(2)? as u64,
            DW_EH_PE_SDATA4 => self.sint(4)? as u64,
            DW_EH_PE_SDATA8 => self.sint(8)? as u64,
            _ => {
                return Err(EhFrameError::UnsupportedEncoding {
                    offset: self.record,
                    encoding: enc,
                })
            }
        };
        if !apply {
            return Ok(value);
        }
        let value = match enc & 0x70 {
            0x00 => value,
            DW_EH_PE_PCREL => field_addr.wrapping_add(value),
            _ => {
                return Err(EhFrameError::UnsupportedEncoding {
                    offset: self.record,
                    encoding: enc,
                })
            }
        };
        Ok(if mode == Mode::X86 { value & 0xffff_ffff } else { value })
    }
}

#[derive(Debug, Clone, Copy)]
struct Cie {
    fde_encoding: u8,
    has_augmentation_data: bool,
}

fn parse_cie(c: &mut Cursor<'_>, end: usize, mode: Mode, base: u64) -> Result<Cie, EhFrameError> {
    let version = c.u8()?;
    if !matches!(version, 1 | 3 | 4) {
        return Err(EhFrameError::BadCie {
            offset: c.record,
            message: format!("unsupported version {version}"),
        });
    }
    let aug = c.cstr()?;
    if aug.contains("eh") {
        c.take(mode.pointer_size() as usize)?;
    }
    if version == 4 {
        c.take(2)?;
    }
    c.uleb()?;
    c.sleb()?;
    if version == 1 {
        c.u8()?;
    } else {
        c.uleb()?;
    }
    let mut cie = Cie {
        fde_encoding: DW_EH_PE_ABSPTR,
        has_augmentation_data: false,
    };
    if let Some(rest) = aug.strip_prefix('z') {
        cie.has_augmentation_data = true;
        let len = c.uleb()? as usize;
        let data_end = c.pos + len;
        if data_end > end {
            return Err(c.truncated());
        }
        for ch in rest.chars() {
            match ch {
                'R' => cie.fde_encoding = c.u8()?,
                'L' => {
                    c.u8()?;
                }
                'P' => {
                    let enc = c.u8()?;
                    if enc != DW_EH_PE_OMIT {
                        c.encoded(enc & 0x7f, mode, base, false)?;
                    }
                }
                'S' | 'B' => {}
                other => {
                    return Err(EhFrameError::BadCie {
                        offset: c.record,
                        message: format!("unknown augmentation `{other}`"),
                    })
                }
            }
        }
        c.pos = data_end;
    } else if !aug.is_empty() && aug != "eh" {
        return Err(EhFrameError::BadCie {
            offset: c.record,
            message: format!("unknown augmentation string `{aug}`"),
        });
    }
    Ok(cie)
}

/// Parses every FDE in `data`, which is mapped at `vaddr`.
pub fn parse(data: &[u8], vaddr: u64, mode: Mode) -> Result<Vec<Fde>, EhFrameError> {
    let mut out = Vec::new();
    let mut cies: HashMap<u64, Cie> = HashMap::new();
    let mut pos = 0usize;
    while pos < data.len() {
        let mut c = Cursor {
            data,
            pos,
            record: pos as u64,
        };
        if data.len() - pos < 4 {
            return Err(c.truncated());
        }
        let mut length = c.uint(4)?;
        if length == 0 {
            break;
        }
        if length == 0xffff_ffff {
            length = c.uint(8)?;
        }
        let body = c.pos;
        let end = body
            .checked_add(length as usize)
            .filter(|&e| e <= data.len())
            .ok_or_else(|| c.truncated())?;
        let id_pos = c.pos as u64;
        let id = c.uint(4)?;
        if id == 0 {
            let cie = parse_cie(&mut c, end, mode, vaddr)?;
            cies.insert(pos as u64, cie);
        } else {
            let cie_off = id_pos.checked_sub(id).ok_or(EhFrameError::MissingCie {
                offset: pos as u64,
                cie: 0,
            })?;
            let cie = *cies.get(&cie_off).ok_or(EhFrameError::MissingCie {
                offset: pos as u64,
                cie: cie_off,
            })?;
            let initial_location = c.encoded(cie.fde_encoding, mode, vaddr, true)?;
            let address_range = c.encoded(cie.fde_encoding & 0x0f, mode, vaddr, false)?;
            if cie.has_augmentation_data {
                let n = c.uleb()? as usize;
                c.take(n)?;
            }
            if c.pos > end {
                return Err(c.truncated());
            }
            out.push(Fde {
                offset: pos as u64,
                initial_location,
                address_range,
            });
        }
        pos = end;
    }
    Ok(out)
}

/// Initial locations of every FDE in `.eh_frame`; empty when the section
/// is absent.
pub fn eh_frame_entries(image: &BinaryImage) -> Result<Vec<u64>, EhFrameError> {
    let Some(sec) = image.section_named(".eh_frame") else {
        return Ok(Vec::new());
    };
    Ok(parse(&sec.bytes, sec.vaddr, image.mode)?
        .into_iter()
        .map(|f| f.initial_location)
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_section_is_empty() {
        assert_eq!(parse(&[0, 0, 0, 0], 0x1000, Mode::X64).unwrap(), vec![]);
        assert_eq!(parse(&[], 0x1000, Mode::X64).unwrap(), vec![]);
    }

    #[test]
    fn truncated_length() {
        assert_eq!(
            parse(&[0x10, 0, 0, 0, 0, 0], 0, Mode::X64),
            Err(EhFrameError::Truncated { offset: 0 })
        );
    }

    #[test]
    fn leb128() {
        let data = [0xe5, 0x8e, 0x26, 0x7f, 0x80, 0x7f];
        let mut c = Cursor {
            data: &data,
            pos: 0,
            record: 0,
        };
        assert_eq!(c.uleb().unwrap(), 624485);
        assert_eq!(c.sleb().unwrap(), -1);
        assert_eq!(c.sleb().unwrap(), -128);
    }
}
