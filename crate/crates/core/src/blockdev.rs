//! 512-byte block device abstraction used by the FAT layer.

use thiserror::Error;

pub const SECTOR: usize = 512;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum BlockError {
    #[error("block {lba} is out of range")]
    OutOfRange { lba: u64 },
    #[error("buffer length {0} is not a multiple of 512")]
    Misaligned(usize),
    #[error("{0}")]
    Io(String),
}

pub trait BlockDevice {
    fn block_count(&self) -> u64;
    fn read_blocks(&mut self, lba: u64, buf: &mut [u8]) -> Result<(), BlockError>;
    fn write_blocks(&mut self, lba: u64, data: &[u8]) -> Result<(), BlockError>;

    fn flush(&mut self) -> Result<(), BlockError> {
        Ok(())
    }
}

impl<T: BlockDevice + ?Sized> BlockDevice for &mut T {
    fn block_count(&self) -> u64 {
        (**self).block_count()
    }
    fn read_blocks(&mut self, lba: u64, buf: &mut [u8]) -> Result<(), BlockError> {
        (**self).read_blocks(lba, buf)
    }
    fn write_blocks(&mut self, lba: u64, data: &[u8]) -> Result<(), BlockError> {
        (**self).write_blocks(lba, data)
    }
    fn flush(&mut self) -> Result<(), BlockError> {
        (**self).flush()
    }
}

/// Checks alignment and bounds of a multi-block access.
pub fn check_access(count: u64, lba: u64, len: usize) -> Result<(), BlockError> {
    if len % SECTOR != 0 {
        return Err(BlockError::Misaligned(len));
    }
    match lba.checked_add((len / SECTOR) as u64) {
        Some(end) if end <= count => Ok(()),
        _ => Err(BlockError::OutOfRange { lba }),
    }
}

/// An image held in memory.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MemDisk {
    data: Vec<u8>,
}

impl MemDisk {
    pub fn new(blocks: u64) -> Self {
        MemDisk {
            data: vec![0; blocks as usize * SECTOR],
        }
    }

    /// Wraps an image; a trailing partial sector is ignored.
    pub fn from_vec(data: Vec<u8>) -> Self {
        MemDisk { data }
    }

    pub fn as_slice(&self) -> &[u8] {
        &self.data
    }

    pub fn into_inner(self) -> Vec<u8> {
        self.data
    }
}

impl BlockDevice for MemDisk {
    fn block_count(&self) -> u64 {
        (self.data.len() / SECTOR) as u64
    }

    fn read_blocks(&mut self, lba: u64, buf: &mut [u8]) -> Result<(), BlockError> {
        check_access(self.block_count(), lba, buf.len())?;
        let at = lba as usize * SECTOR;
        buf.copy_from_slice(&self.data[at..at + buf.len()]);
        Ok(())
    }

    fn write_blocks(&mut self, lba: u64, data: &[u8]) -> Result<(), BlockError> {
        check_access(self.block_count(), lba, data.len())?;
        let at = lba as usize * SECTOR;
        self.data[at..at + data.len()].copy_from_slice(data);
        Ok(())
    }
}
