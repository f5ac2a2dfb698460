//! A raw image file as a block device, for formatting without loading it.

use std::fs::{File, OpenOptions};
use std::io::{self, Read, Seek, SeekFrom, Write};
use std::path::Path;

use netsd_core::blockdev::{check_access, SECTOR};
use netsd_core::{BlockDevice, BlockError};

pub struct FileDisk {
    file: File,
    blocks: u64,
}

impl FileDisk {
    /// Creates (or truncates) `path` to exactly `capacity` bytes of zeros.
    pub fn create(path: &Path, capacity: u64) -> io::Result<Self> {
        let file = OpenOptions::new()
            .read(true)
            .write(true)
            .create(true)
            .truncate(true)
            .open(path)?;
        file.set_len(capacity)?;
        Ok(FileDisk {
            file,
            blocks: capacity / SECTOR as u64,
        })
    }

    fn seek(&mut self, lba: u64) -> Result<(), BlockError> {
        self.file
            .seek(SeekFrom::Start(lba * SECTOR as u64))
            .map(drop)
            .map_err(io_err)
    }
}

fn io_err(e: io::Error) -> BlockError {
    BlockError::Io(e.to_string())
}

impl BlockDevice for FileDisk {
    fn block_count(&self) -> u64 {
        self.blocks
    }

    fn read_blocks(&mut self, lba: u64, buf: &mut [u8]) -> Result<(), BlockError> {
        check_access(self.blocks, lba, buf.len())?;
        self.seek(lba)?;
        self.file.read_exact(buf).map_err(io_err)
    }

    fn write_blocks(&mut self, lba: u64, data: &[u8]) -> Result<(), BlockError> {
        check_access(self.blocks, lba, data.len())?;
        self.seek(lba)?;
        self.file.write_all(data).map_err(io_err)
    }

    fn flush(&mut self) -> Result<(), BlockError> {
        self.file.sync_all().map_err(io_err)
    }
}
