//! On-disk descriptor grid format.
//!
//! Little-endian binary layout:
//!
//! ```text
//! magic        4 bytes  "RXDG"
//! version      u32      currently 1
//! patch_rows   u32
//! patch_cols   u32
//! descriptor_dim u32
//! patch_size_px  u32
//! origin_x     i32      pixel offset of the patch grid
//! origin_y     i32
//! payload      f32 * (patch_rows * patch_cols * descriptor_dim), row-major
//! ```

use std::path::Path;

use nalgebra::DMatrix;

use super::{DescriptorError, DescriptorGrid};

pub const RXDG_MAGIC: [u8; 4] = *b"RXDG";
pub const RXDG_VERSION: u32 = 1;

const HEADER_LEN: usize = 4 + 4 * 7;

fn read_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(bytes[at..at + 4].try_into().expect("bounds checked"))
}

fn read_i32(bytes: &[u8], at: usize) -> i32 {
    i32::from_le_bytes(bytes[at..at + 4].try_into().expect("bounds checked"))
}

/// Reads a descriptor grid file. The frame association is not stored in the
/// file; the caller supplies it from the recording manifest.
pub fn read_descriptor_grid(path: &Path, frame_id: usize) -> Result<DescriptorGrid, DescriptorError> {
    let bytes = std::fs::read(path)?;
    if bytes.len() < HEADER_LEN {
        return Err(DescriptorError::Truncated {
            expected: HEADER_LEN,
            got: bytes.len(),
        });
    }
    let magic: [u8; 4] = bytes[0..4].try_into().expect("bounds checked");
    if magic != RXDG_MAGIC {
        return Err(DescriptorError::BadMagic { found: magic });
    }
    let version = read_u32(&bytes, 4);
    if version != RXDG_VERSION {
        return Err(DescriptorError::UnsupportedVersion { found: version });
    }
    let patch_rows = read_u32(&bytes, 8);
    let patch_cols = read_u32(&bytes, 12);
    let dim = read_u32(&bytes, 16);
    let patch_size_px = read_u32(&bytes, 20);
    let origin = (read_i32(&bytes, 24), read_i32(&bytes, 28));

    let values = patch_rows as usize * patch_cols as usize * dim as usize;
    let expected = HEADER_LEN + values * 4;
    if bytes.len() != expected {
        return Err(DescriptorError::Truncated {
            expected,
            got: bytes.len(),
        });
    }

    let n = patch_rows as usize * patch_cols as usize;
    let mut data = DMatrix::zeros(n, dim as usize);
    for row in 0..n {
        for col in 0..dim as usize {
            let at = HEADER_LEN + (row * dim as usize + col) * 4;
            let raw = f32::from_le_bytes(bytes[at..at + 4].try_into().expect("bounds checked"));
            data[(row, col)] = raw as f64;
        }
    }
    DescriptorGrid::new(frame_id, patch_rows, patch_cols, patch_size_px, origin, data)
}

/// Writes a descriptor grid. Values are stored as f32, the precision the
/// format carries.
pub fn write_descriptor_grid(path: &Path, grid: &DescriptorGrid) -> Result<(), DescriptorError> {
    let n = grid.patch_count();
    let dim = grid.descriptor_dim();
    let mut bytes = Vec::with_capacity(HEADER_LEN + n * dim * 4);
    bytes.extend_from_slice(&RXDG_MAGIC);
    bytes.extend_from_slice(&RXDG_VERSION.to_le_bytes());
    bytes.extend_from_slice(&grid.patch_rows().to_le_bytes());
    bytes.extend_from_slice(&grid.patch_cols().to_le_bytes());
    bytes.extend_from_slice(&(dim as u32).to_le_bytes());
    bytes.extend_from_slice(&grid.patch_size_px().to_le_bytes());
    bytes.extend_from_slice(&grid.origin().0.to_le_bytes());
    bytes.extend_from_slice(&grid.origin().1.to_le_bytes());
    for row in 0..n {
        for col in 0..dim {
            bytes.extend_from_slice(&(grid.data()[(row, col)] as f32).to_le_bytes());
        }
    }
    std::fs::write(path, bytes)?;
    Ok(())
}

/// Checks only the magic, used by manifest validation to reject files that
/// are not descriptor grids without reading the payload.
pub(crate) fn has_rxdg_magic(path: &Path) -> Result<bool, std::io::Error> {
    use std::io::Read;
    let mut f = std::fs::File::open(path)?;
    let mut magic = [0u8; 4];
    match f.read_exact(&mut magic) {
        Ok(()) => Ok(magic == RXDG_MAGIC),
        Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => Ok(false),
        Err(e) => Err(e),
    }
}
