//! Just enough PE parsing to find the header bytes a mutator must not touch.

use super::ProtectedRegions;

/// Header bytes protected when the file is not a well-formed PE.
pub const GENERIC_HEADER_LEN: usize = 1024;

const E_LFANEW_OFFSET: usize = 0x3C;
const COFF_HEADER_LEN: usize = 20;
const SECTION_HEADER_LEN: usize = 40;
/// Offset of `SizeOfHeaders` within the optional header (PE32 and PE32+).
const SIZE_OF_HEADERS_OFFSET: usize = 60;
const PE32_MAGIC: u16 = 0x10b;
const PE32_PLUS_MAGIC: u16 = 0x20b;

fn u16_at(f: &[u8], off: usize) -> Option<u16> {
    Some(u16::from_le_bytes(f.get(off..off.checked_add(2)?)?.try_into().ok()?))
}

fn u32_at(f: &[u8], off: usize) -> Option<u32> {
    Some(u32::from_le_bytes(f.get(off..off.checked_add(4)?)?.try_into().ok()?))
}

/// Header span and section table of a PE image, or `None` if malformed.
fn parse(f: &[u8]) -> Option<[(usize, usize); 2]> {
    if f.get(..2)? != b"MZ" {
        return None;
    }
    let pe = u32_at(f, E_LFANEW_OFFSET)? as usize;
    if f.get(pe..pe.checked_add(4)?)? != b"PE\0\0" {
        return None;
    }
    let coff = pe + 4;
    let sections = u16_at(f, coff + 2)? as usize;
    let opt_size = u16_at(f, coff + 16)? as usize;
    let opt = coff + COFF_HEADER_LEN;
    if opt_size < SIZE_OF_HEADERS_OFFSET + 4 {
        return None;
    }
    let magic = u16_at(f, opt)?;
    if magic != PE32_MAGIC && magic != PE32_PLUS_MAGIC {
        return None;
    }
    let size_of_headers = u32_at(f, opt + SIZE_OF_HEADERS_OFFSET)? as usize;
    if size_of_headers == 0 {
        return None;
    }
    let table = opt + opt_size;
    let table_end = table.checked_add(sections * SECTION_HEADER_LEN)?;
    if table_end > f.len() {
        return None;
    }
    Some([(0, size_of_headers.min(f.len())), (table, table_end)])
}

pub fn protected_regions_pe(f: &[u8]) -> ProtectedRegions {
    match parse(f) {
        Some(spans) => ProtectedRegions::new(spans.to_vec(), f.len()),
        None => ProtectedRegions::new(vec![(0, f.len().min(GENERIC_HEADER_LEN))], f.len()),
    }
}
