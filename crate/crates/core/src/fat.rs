//! FAT16/FAT32 with 8.3 names over a [`BlockDevice`].
//!
//! Long-name entries written by other implementations are skipped. The FAT
//! is cached in memory and every change is written to all copies before the
//! directory entry that refers to it.

use std::collections::BTreeSet;
use std::fmt;

use thiserror::Error;

use crate::blockdev::{BlockDevice, BlockError, SECTOR};

const ATTR_READ_ONLY: u8 = 0x01;
const ATTR_VOLUME_ID: u8 = 0x08;
pub const ATTR_DIRECTORY: u8 = 0x10;
pub const ATTR_ARCHIVE: u8 = 0x20;
const ATTR_LFN: u8 = 0x0F;
const ENTRY_LEN: usize = 32;
const DELETED: u8 = 0xE5;
/// 1980-01-01, the FAT epoch.
const EPOCH_DATE: u16 = (1 << 5) | 1;

const FAT16_MIN_CLUSTERS: u32 = 4085;
const FAT32_MIN_CLUSTERS: u32 = 65525;
const FAT16_MAX_CLUSTERS: u32 = 65524;
const FAT32_MASK: u32 = 0x0FFF_FFFF;
/// Volumes below this size are formatted FAT16.
pub const FAT32_THRESHOLD_BYTES: u64 = 32 << 20;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FatVariant {
    Fat16,
    Fat32,
}

impl fmt::Display for FatVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FatVariant::Fat16 => "FAT16",
            FatVariant::Fat32 => "FAT32",
        })
    }
}

#[derive(Debug, Error)]
pub enum FatError {
    #[error("not found")]
    NotFound,
    #[error("name {0:?} is not a valid 8.3 name")]
    NameInvalid(String),
    #[error("no space left on volume")]
    NoSpace,
    #[error("not a directory")]
    NotADirectory,
    #[error("is a directory")]
    IsADirectory,
    #[error("volume is corrupt: {0}")]
    Corrupt(String),
    #[error("unsupported volume: {0}")]
    Unsupported(String),
    #[error(transparent)]
    IoError(#[from] BlockError),
}

pub type Result<T> = std::result::Result<T, FatError>;

/// A directory entry as listed.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DirEntry {
    pub name: String,
    pub short_name: [u8; 11],
    pub attributes: u8,
    pub first_cluster: u32,
    pub size_bytes: u32,
    pub write_date: u16,
    pub write_time: u16,
}

impl DirEntry {
    pub fn is_dir(&self) -> bool {
        self.attributes & ATTR_DIRECTORY != 0
    }

    fn from_raw(raw: &[u8]) -> Self {
        let short_name: [u8; 11] = raw[..11].try_into().expect("entry slice");
        let hi = u16::from_le_bytes([raw[20], raw[21]]) as u32;
        let lo = u16::from_le_bytes([raw[26], raw[27]]) as u32;
        DirEntry {
            name: decode_83(&short_name),
            short_name,
            attributes: raw[11],
            first_cluster: (hi << 16) | lo,
            size_bytes: u32::from_le_bytes([raw[28], raw[29], raw[30], raw[31]]),
            write_time: u16::from_le_bytes([raw[22], raw[23]]),
            write_date: u16::from_le_bytes([raw[24], raw[25]]),
        }
    }
}

fn raw_entry(name: &[u8; 11], attr: u8, cluster: u32, size: u32) -> [u8; ENTRY_LEN] {
    let mut e = [0u8; ENTRY_LEN];
    e[..11].copy_from_slice(name);
    e[11] = attr;
    e[16..18].copy_from_slice(&EPOCH_DATE.to_le_bytes());
    e[18..20].copy_from_slice(&EPOCH_DATE.to_le_bytes());
    e[20..22].copy_from_slice(&((cluster >> 16) as u16).to_le_bytes());
    e[24..26].copy_from_slice(&EPOCH_DATE.to_le_bytes());
    e[26..28].copy_from_slice(&(cluster as u16).to_le_bytes());
    e[28..32].copy_from_slice(&size.to_le_bytes());
    e
}

fn valid_83_char(c: u8) -> bool {
    c.is_ascii_uppercase() || c.is_ascii_digit() || b"!#$%&'()-@^_`{}~".contains(&c)
}

/// Encodes `name` as a space-padded, upper-case 8.3 name.
pub fn encode_83(name: &str) -> Result<[u8; 11]> {
    let invalid = || FatError::NameInvalid(name.to_string());
    let upper = name.to_ascii_uppercase();
    let (base, ext) = match upper.rsplit_once('.') {
        Some((b, e)) => (b, e),
        None => (upper.as_str(), ""),
    };
    if base.is_empty() || base.len() > 8 || ext.len() > 3 || !upper.is_ascii() {
        return Err(invalid());
    }
    if !base.bytes().chain(ext.bytes()).all(valid_83_char) {
        return Err(invalid());
    }
    let mut out = [b' '; 11];
    out[..base.len()].copy_from_slice(base.as_bytes());
    out[8..8 + ext.len()].copy_from_slice(ext.as_bytes());
    Ok(out)
}

pub fn decode_83(raw: &[u8; 11]) -> String {
    let mut base: Vec<u8> = raw[..8].to_vec();
    if base[0] == 0x05 {
        base[0] = DELETED;
    }
    let base = String::from_utf8_lossy(&base).trim_end().to_string();
    let ext = String::from_utf8_lossy(&raw[8..]).trim_end().to_string();
    if ext.is_empty() {
        base
    } else {
        format!("{base}.{ext}")
    }
}

fn split_path(path: &str) -> Vec<&str> {
    path.split('/').filter(|c| !c.is_empty()).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Dir {
    Root16,
    Cluster(u32),
}

#[derive(Clone, Copy, Debug)]
struct Slot {
    lba: u64,
    index: usize,
}

#[derive(Clone, Debug)]
struct Located {
    entry: DirEntry,
    slot: Slot,
}

/// Geometry computed by the formatter.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Layout {
    pub variant: FatVariant,
    pub total_sectors: u32,
    pub sectors_per_cluster: u32,
    pub reserved_sectors: u32,
    pub fat_count: u32,
    pub fat_sectors: u32,
    pub root_entries: u32,
    pub total_clusters: u32,
}

impl Layout {
    fn root_dir_sectors(&self) -> u32 {
        (self.root_entries * ENTRY_LEN as u32).div_ceil(SECTOR as u32)
    }

    fn data_start(&self) -> u32 {
        self.reserved_sectors + self.fat_count * self.fat_sectors + self.root_dir_sectors()
    }

    fn solve(variant: FatVariant, total: u32, spc: u32) -> Layout {
        let (reserved, root_entries, entry_bytes) = match variant {
            FatVariant::Fat16 => (1, 512, 2),
            FatVariant::Fat32 => (32, 0, 4),
        };
        let mut l = Layout {
            variant,
            total_sectors: total,
            sectors_per_cluster: spc,
            reserved_sectors: reserved,
            fat_count: 2,
            fat_sectors: 1,
            root_entries,
            total_clusters: 0,
        };
        loop {
            let data = total.saturating_sub(l.data_start());
            l.total_clusters = data / spc;
            let need = ((l.total_clusters + 2) * entry_bytes).div_ceil(SECTOR as u32);
            if need <= l.fat_sectors {
                return l;
            }
            l.fat_sectors = need;
        }
    }

    /// Picks variant and cluster size for a volume of `total` sectors.
    pub fn for_sectors(total: u64) -> Result<Layout> {
        let total32 = u32::try_from(total).map_err(|_| FatError::Unsupported("volume too large".into()))?;
        let bytes = total * SECTOR as u64;
        if bytes >= FAT32_THRESHOLD_BYTES {
            let spc = match bytes {
                b if b <= 260 << 20 => 1,
                b if b <= 8 << 30 => 8,
                b if b <= 16 << 30 => 16,
                _ => 32,
            };
            let l = Self::solve(FatVariant::Fat32, total32, spc);
            if l.total_clusters >= FAT32_MIN_CLUSTERS {
                return Ok(l);
            }
        }
        let mut spc = 1;
        while spc <= 64 {
            let l = Self::solve(FatVariant::Fat16, total32, spc);
            if l.total_clusters <= FAT16_MAX_CLUSTERS {
                if l.total_clusters < FAT16_MIN_CLUSTERS {
                    break;
                }
                return Ok(l);
            }
            spc *= 2;
        }
        Err(FatError::Unsupported(format!(
            "no FAT16/FAT32 layout for {bytes} bytes"
        )))
    }
}

pub struct FatVolume<D: BlockDevice> {
    dev: D,
    layout: Layout,
    root_cluster: u32,
    fat: Vec<u32>,
    dirty: BTreeSet<u32>,
    free_hint: u32,
}

impl<D: BlockDevice> fmt::Debug for FatVolume<D> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("FatVolume")
            .field("layout", &self.layout)
            .finish_non_exhaustive()
    }
}

impl<D: BlockDevice> FatVolume<D> {
    /// Writes an empty filesystem spanning the whole device and mounts it.
    pub fn format(mut dev: D) -> Result<Self> {
        let layout = Layout::for_sectors(dev.block_count())?;
        let mut boot = [0u8; SECTOR];
        let volume_id: u32 = 0x4E45_5453;
        boot[3..11].copy_from_slice(b"NETSD   ");
        boot[11..13].copy_from_slice(&(SECTOR as u16).to_le_bytes());
        boot[13] = layout.sectors_per_cluster as u8;
        boot[14..16].copy_from_slice(&(layout.reserved_sectors as u16).to_le_bytes());
        boot[16] = layout.fat_count as u8;
        boot[17..19].copy_from_slice(&(layout.root_entries as u16).to_le_bytes());
        let small_total = layout.variant == FatVariant::Fat16 && layout.total_sectors < 0x1_0000;
        if small_total {
            boot[19..21].copy_from_slice(&(layout.total_sectors as u16).to_le_bytes());
        } else {
            boot[32..36].copy_from_slice(&layout.total_sectors.to_le_bytes());
        }
        boot[21] = 0xF8;
        boot[24..26].copy_from_slice(&63u16.to_le_bytes());
        boot[26..28].copy_from_slice(&255u16.to_le_bytes());
        let ext = match layout.variant {
            FatVariant::Fat16 => {
                boot[0..3].copy_from_slice(&[0xEB, 0x3C, 0x90]);
                boot[22..24].copy_from_slice(&(layout.fat_sectors as u16).to_le_bytes());
                36
            }
            FatVariant::Fat32 => {
                boot[0..3].copy_from_slice(&[0xEB, 0x58, 0x90]);
                boot[36..40].copy_from_slice(&layout.fat_sectors.to_le_bytes());
                boot[44..48].copy_from_slice(&2u32.to_le_bytes());
                boot[48..50].copy_from_slice(&1u16.to_le_bytes());
                boot[50..52].copy_from_slice(&6u16.to_le_bytes());
                64
            }
        };
        boot[ext] = 0x80;
        boot[ext + 2] = 0x29;
        boot[ext + 3..ext + 7].copy_from_slice(&volume_id.to_le_bytes());
        boot[ext + 7..ext + 18].copy_from_slice(b"NO NAME    ");
        boot[ext + 18..ext + 26].copy_from_slice(match layout.variant {
            FatVariant::Fat16 => b"FAT16   ",
            FatVariant::Fat32 => b"FAT32   ",
        });
        boot[510] = 0x55;
        boot[511] = 0xAA;

        let zero_sectors = |dev: &mut D, start: u64, count: u64| -> Result<()> {
            let chunk = vec![0u8; 128 * SECTOR];
            let mut at = start;
            while at < start + count {
                let n = (start + count - at).min(128);
                dev.write_blocks(at, &chunk[..n as usize * SECTOR])?;
                at += n;
            }
            Ok(())
        };
        zero_sectors(&mut dev, 0, u64::from(layout.reserved_sectors))?;
        dev.write_blocks(0, &boot)?;
        if layout.variant == FatVariant::Fat32 {
            let mut info = [0u8; SECTOR];
            info[0..4].copy_from_slice(&0x4161_5252u32.to_le_bytes());
            info[484..488].copy_from_slice(&0x6141_7272u32.to_le_bytes());
            // Free count and next-free hint unknown: readers must scan.
            info[488..492].copy_from_slice(&u32::MAX.to_le_bytes());
            info[492..496].copy_from_slice(&u32::MAX.to_le_bytes());
            info[508..512].copy_from_slice(&0xAA55_0000u32.to_le_bytes());
            dev.write_blocks(1, &info)?;
            dev.write_blocks(6, &boot)?;
            dev.write_blocks(7, &info)?;
        }
        let fat_start = u64::from(layout.reserved_sectors);
        zero_sectors(&mut dev, fat_start, u64::from(layout.fat_count * layout.fat_sectors))?;
        let first_data = u64::from(layout.reserved_sectors + layout.fat_count * layout.fat_sectors);
        zero_sectors(&mut dev, first_data, u64::from(layout.root_dir_sectors()))?;

        let mut fat = vec![0u32; layout.total_clusters as usize + 2];
        let root_cluster = match layout.variant {
            FatVariant::Fat16 => {
                fat[0] = 0xFFF8;
                fat[1] = 0xFFFF;
                0
            }
            FatVariant::Fat32 => {
                fat[0] = 0x0FFF_FFF8;
                fat[1] = FAT32_MASK;
                fat[2] = FAT32_MASK;
                2
            }
        };
        let mut vol = FatVolume {
            dev,
            layout,
            root_cluster,
            fat,
            dirty: BTreeSet::new(),
            free_hint: 2,
        };
        if layout.variant == FatVariant::Fat32 {
            vol.zero_cluster(2)?;
        }
        vol.mark_dirty(0);
        vol.mark_dirty(2);
        vol.flush_fat()?;
        vol.dev.flush()?;
        Ok(vol)
    }

    /// Mounts an existing volume, detecting FAT16 or FAT32 from its geometry.
    pub fn mount(mut dev: D) -> Result<Self> {
        let mut boot = [0u8; SECTOR];
        dev.read_blocks(0, &mut boot)?;
        if boot[510] != 0x55 || boot[511] != 0xAA {
            return Err(FatError::Unsupported("missing boot signature".into()));
        }
        let u16at = |o: usize| u32::from(u16::from_le_bytes([boot[o], boot[o + 1]]));
        let u32at = |o: usize| u32::from_le_bytes([boot[o], boot[o + 1], boot[o + 2], boot[o + 3]]);
        if u16at(11) as usize != SECTOR {
            return Err(FatError::Unsupported("sector size other than 512".into()));
        }
        let spc = u32::from(boot[13]);
        let reserved = u16at(14);
        let fat_count = u32::from(boot[16]);
        let root_entries = u16at(17);
        let total = if u16at(19) != 0 { u16at(19) } else { u32at(32) };
        let fat_sectors = if u16at(22) != 0 { u16at(22) } else { u32at(36) };
        if spc == 0 || !spc.is_power_of_two() || fat_count == 0 || reserved == 0 || fat_sectors == 0 {
            return Err(FatError::Corrupt("invalid BIOS parameter block".into()));
        }
        if u64::from(total) > dev.block_count() {
            return Err(FatError::Corrupt("volume larger than device".into()));
        }
        let mut layout = Layout {
            variant: FatVariant::Fat16,
            total_sectors: total,
            sectors_per_cluster: spc,
            reserved_sectors: reserved,
            fat_count,
            fat_sectors,
            root_entries,
            total_clusters: 0,
        };
        layout.total_clusters = total.saturating_sub(layout.data_start()) / spc;
        layout.variant = if layout.total_clusters < FAT16_MIN_CLUSTERS {
            return Err(FatError::Unsupported("FAT12 volumes are not supported".into()));
        } else if layout.total_clusters < FAT32_MIN_CLUSTERS {
            FatVariant::Fat16
        } else {
            FatVariant::Fat32
        };
        let root_cluster = match layout.variant {
            FatVariant::Fat16 => 0,
            FatVariant::Fat32 => u32at(44),
        };
        let entry_bytes = if layout.variant == FatVariant::Fat16 { 2 } else { 4 };
        if (layout.total_clusters as usize + 2) * entry_bytes > fat_sectors as usize * SECTOR {
            return Err(FatError::Corrupt("FAT too small for cluster count".into()));
        }
        let mut raw = vec![0u8; fat_sectors as usize * SECTOR];
        dev.read_blocks(u64::from(reserved), &mut raw)?;
        let n = layout.total_clusters as usize + 2;
        let fat: Vec<u32> = match layout.variant {
            FatVariant::Fat16 => raw
                .chunks(2)
                .take(n)
                .map(|c| u32::from(u16::from_le_bytes([c[0], c[1]])))
                .collect(),
            FatVariant::Fat32 => raw
                .chunks(4)
                .take(n)
                .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]) & FAT32_MASK)
                .collect(),
        };
        Ok(FatVolume {
            dev,
            layout,
            root_cluster,
            fat,
            dirty: BTreeSet::new(),
            free_hint: 2,
        })
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn variant(&self) -> FatVariant {
        self.layout.variant
    }

    pub fn cluster_bytes(&self) -> usize {
        self.layout.sectors_per_cluster as usize * SECTOR
    }

    pub fn total_clusters(&self) -> u32 {
        self.layout.total_clusters
    }

    pub fn device(&self) -> &D {
        &self.dev
    }

    pub fn into_device(self) -> D {
        self.dev
    }

    pub fn free_clusters(&self) -> u32 {
        self.fat[2..].iter().filter(|&&e| e == 0).count() as u32
    }

    fn is_eoc(&self, v: u32) -> bool {
        match self.layout.variant {
            FatVariant::Fat16 => v >= 0xFFF8,
            FatVariant::Fat32 => v >= 0x0FFF_FFF8,
        }
    }

    fn eoc(&self) -> u32 {
        match self.layout.variant {
            FatVariant::Fat16 => 0xFFFF,
            FatVariant::Fat32 => FAT32_MASK,
        }
    }

    fn valid_cluster(&self, c: u32) -> bool {
        c >= 2 && (c as usize) < self.fat.len()
    }

    fn cluster_lba(&self, c: u32) -> u64 {
        u64::from(self.layout.data_start()) + u64::from(c - 2) * u64::from(self.layout.sectors_per_cluster)
    }

    /// Follows a chain from `first`, rejecting loops and dangling links.
    pub fn chain(&self, first: u32) -> Result<Vec<u32>> {
        let mut out = Vec::new();
        if first == 0 {
            return Ok(out);
        }
        let mut c = first;
        loop {
            if !self.valid_cluster(c) {
                return Err(FatError::Corrupt(format!("cluster {c} out of range")));
            }
            out.push(c);
            if out.len() > self.layout.total_clusters as usize {
                return Err(FatError::Corrupt("cluster chain loops".into()));
            }
            let next = self.fat[c as usize];
            if self.is_eoc(next) {
                return Ok(out);
            }
            if next == 0 {
                return Err(FatError::Corrupt(format!("chain through free cluster {c}")));
            }
            c = next;
        }
    }

    fn mark_dirty(&mut self, cluster: u32) {
        let per_sector = if self.layout.variant == FatVariant::Fat16 {
            256
        } else {
            128
        };
        self.dirty.insert(cluster / per_sector);
    }

    fn set_fat(&mut self, cluster: u32, value: u32) {
        self.fat[cluster as usize] = value;
        self.mark_dirty(cluster);
    }

    /// Writes changed FAT sectors to every copy.
    fn flush_fat(&mut self) -> Result<()> {
        let dirty = std::mem::take(&mut self.dirty);
        let per_sector = if self.layout.variant == FatVariant::Fat16 {
            256
        } else {
            128
        };
        for &s in &dirty {
            let mut buf = [0u8; SECTOR];
            let first = s as usize * per_sector;
            for i in 0..per_sector {
                let v = self.fat.get(first + i).copied().unwrap_or(0);
                match self.layout.variant {
                    FatVariant::Fat16 => buf[i * 2..i * 2 + 2].copy_from_slice(&(v as u16).to_le_bytes()),
                    FatVariant::Fat32 => buf[i * 4..i * 4 + 4].copy_from_slice(&v.to_le_bytes()),
                }
            }
            for copy in 0..self.layout.fat_count {
                let lba = u64::from(self.layout.reserved_sectors + copy * self.layout.fat_sectors + s);
                self.dev.write_blocks(lba, &buf)?;
            }
        }
        Ok(())
    }

    /// Takes `n` free clusters in ascending order, without linking them.
    fn find_free(&mut self, n: usize) -> Result<Vec<u32>> {
        let mut out = Vec::with_capacity(n);
        for c in 2..self.fat.len() as u32 {
            if out.len() == n {
                break;
            }
            if self.fat[c as usize] == 0 {
                out.push(c);
            }
        }
        if out.len() < n {
            return Err(FatError::NoSpace);
        }
        if let Some(&last) = out.last() {
            self.free_hint = last + 1;
        }
        Ok(out)
    }

    fn link(&mut self, chain: &[u32]) {
        for w in chain.windows(2) {
            self.set_fat(w[0], w[1]);
        }
        if let Some(&last) = chain.last() {
            let eoc = self.eoc();
            self.set_fat(last, eoc);
        }
    }

    fn free_chain(&mut self, chain: &[u32]) {
        for &c in chain {
            self.set_fat(c, 0);
        }
    }

    fn zero_cluster(&mut self, c: u32) -> Result<()> {
        let buf = vec![0u8; self.cluster_bytes()];
        let lba = self.cluster_lba(c);
        self.dev.write_blocks(lba, &buf)?;
        Ok(())
    }

    /// Writes `data` across `chain`, merging physically adjacent clusters.
    fn write_chain_data(&mut self, chain: &[u32], data: &[u8]) -> Result<()> {
        let cb = self.cluster_bytes();
        let mut i = 0;
        while i < chain.len() {
            let mut j = i + 1;
            while j < chain.len() && chain[j] == chain[j - 1] + 1 && j - i < 128 {
                j += 1;
            }
            let start = i * cb;
            let end = (j * cb).min(data.len());
            let mut buf = vec![0u8; (j - i) * cb];
            if start < end {
                buf[..end - start].copy_from_slice(&data[start..end]);
            }
            let lba = self.cluster_lba(chain[i]);
            self.dev.write_blocks(lba, &buf)?;
            i = j;
        }
        Ok(())
    }

    fn read_chain_data(&mut self, chain: &[u32], len: usize) -> Result<Vec<u8>> {
        let cb = self.cluster_bytes();
        let mut out = Vec::with_capacity(chain.len() * cb);
        let mut i = 0;
        while i < chain.len() && out.len() < len {
            let mut j = i + 1;
            while j < chain.len() && chain[j] == chain[j - 1] + 1 && j - i < 128 {
                j += 1;
            }
            let mut buf = vec![0u8; (j - i) * cb];
            let lba = self.cluster_lba(chain[i]);
            self.dev.read_blocks(lba, &mut buf)?;
            out.extend_from_slice(&buf);
            i = j;
        }
        out.truncate(len);
        Ok(out)
    }

    fn root(&self) -> Dir {
        match self.layout.variant {
            FatVariant::Fat16 => Dir::Root16,
            FatVariant::Fat32 => Dir::Cluster(self.root_cluster),
        }
    }

    fn dir_sectors(&self, dir: Dir) -> Result<Vec<u64>> {
        match dir {
            Dir::Root16 => {
                let start = u64::from(self.layout.reserved_sectors + self.layout.fat_count * self.layout.fat_sectors);
                Ok((start..start + u64::from(self.layout.root_dir_sectors())).collect())
            }
            Dir::Cluster(c) => {
                let spc = u64::from(self.layout.sectors_per_cluster);
                Ok(self
                    .chain(c)?
                    .into_iter()
                    .flat_map(|c| {
                        let lba = self.cluster_lba(c);
                        lba..lba + spc
                    })
                    .collect())
            }
        }
    }

    /// Live short-name entries of a directory, excluding `.` and `..`.
    fn scan(&mut self, dir: Dir) -> Result<Vec<Located>> {
        let mut out = Vec::new();
        for lba in self.dir_sectors(dir)? {
            let mut buf = [0u8; SECTOR];
            self.dev.read_blocks(lba, &mut buf)?;
            for (index, raw) in buf.chunks(ENTRY_LEN).enumerate() {
                match raw[0] {
                    0x00 => return Ok(out),
                    DELETED | b'.' => continue,
                    _ => {}
                }
                if raw[11] & ATTR_LFN == ATTR_LFN || raw[11] & ATTR_VOLUME_ID != 0 {
                    continue;
                }
                out.push(Located {
                    entry: DirEntry::from_raw(raw),
                    slot: Slot { lba, index },
                });
            }
        }
        Ok(out)
    }

    fn find(&mut self, dir: Dir, name: &[u8; 11]) -> Result<Option<Located>> {
        Ok(self.scan(dir)?.into_iter().find(|l| &l.entry.short_name == name))
    }

    fn write_slot(&mut self, slot: Slot, raw: &[u8; ENTRY_LEN]) -> Result<()> {
        let mut buf = [0u8; SECTOR];
        self.dev.read_blocks(slot.lba, &mut buf)?;
        buf[slot.index * ENTRY_LEN..(slot.index + 1) * ENTRY_LEN].copy_from_slice(raw);
        self.dev.write_blocks(slot.lba, &buf)?;
        Ok(())
    }

    /// A free slot in `dir`, growing a cluster directory if it is full.
    fn free_slot(&mut self, dir: Dir) -> Result<Slot> {
        for lba in self.dir_sectors(dir)? {
            let mut buf = [0u8; SECTOR];
            self.dev.read_blocks(lba, &mut buf)?;
            if let Some(index) = buf.chunks(ENTRY_LEN).position(|r| r[0] == 0x00 || r[0] == DELETED) {
                return Ok(Slot { lba, index });
            }
        }
        let Dir::Cluster(first) = dir else {
            return Err(FatError::NoSpace);
        };
        let chain = self.chain(first)?;
        let new = self.find_free(1)?[0];
        self.zero_cluster(new)?;
        let eoc = self.eoc();
        self.set_fat(new, eoc);
        self.set_fat(*chain.last().expect("directory chain is never empty"), new);
        self.flush_fat()?;
        Ok(Slot {
            lba: self.cluster_lba(new),
            index: 0,
        })
    }

    fn make_dir(&mut self, parent: Dir, name: &[u8; 11], root_cluster: u32) -> Result<Dir> {
        let c = self.find_free(1)?[0];
        let mut buf = vec![0u8; self.cluster_bytes()];
        let parent_value = match parent {
            Dir::Cluster(p) if p != root_cluster => p,
            _ => 0,
        };
        buf[..ENTRY_LEN].copy_from_slice(&raw_entry(b".          ", ATTR_DIRECTORY, c, 0));
        buf[ENTRY_LEN..2 * ENTRY_LEN].copy_from_slice(&raw_entry(b"..         ", ATTR_DIRECTORY, parent_value, 0));
        let lba = self.cluster_lba(c);
        self.dev.write_blocks(lba, &buf)?;
        let eoc = self.eoc();
        self.set_fat(c, eoc);
        self.flush_fat()?;
        let slot = self.free_slot(parent)?;
        self.write_slot(slot, &raw_entry(name, ATTR_DIRECTORY, c, 0))?;
        Ok(Dir::Cluster(c))
    }

    fn resolve_dir(&mut self, components: &[&str], create: bool) -> Result<Dir> {
        let mut dir = self.root();
        for comp in components {
            let name = encode_83(comp)?;
            dir = match self.find(dir, &name)? {
                Some(l) if l.entry.is_dir() => {
                    if l.entry.first_cluster == 0 {
                        self.root()
                    } else {
                        Dir::Cluster(l.entry.first_cluster)
                    }
                }
                Some(_) => return Err(FatError::NotADirectory),
                None if create => {
                    let root_cluster = self.root_cluster;
                    self.make_dir(dir, &name, root_cluster)?
                }
                None => return Err(FatError::NotFound),
            };
        }
        Ok(dir)
    }

    fn locate(&mut self, path: &str) -> Result<(Dir, Located)> {
        let comps = split_path(path);
        let (last, parents) = comps.split_last().ok_or(FatError::NotFound)?;
        let dir = self.resolve_dir(parents, false)?;
        let name = encode_83(last)?;
        let found = self.find(dir, &name)?.ok_or(FatError::NotFound)?;
        Ok((dir, found))
    }

    /// The entry at `path`. The root has no entry and yields `NotFound`.
    pub fn stat(&mut self, path: &str) -> Result<DirEntry> {
        Ok(self.locate(path)?.1.entry)
    }

    pub fn list_dir(&mut self, path: &str) -> Result<Vec<DirEntry>> {
        let comps = split_path(path);
        let dir = self.resolve_dir(&comps, false)?;
        Ok(self.scan(dir)?.into_iter().map(|l| l.entry).collect())
    }

    pub fn read_file(&mut self, path: &str) -> Result<Vec<u8>> {
        let (_, found) = self.locate(path)?;
        if found.entry.is_dir() {
            return Err(FatError::IsADirectory);
        }
        let chain = self.chain(found.entry.first_cluster)?;
        let size = found.entry.size_bytes as usize;
        if chain.len() * self.cluster_bytes() < size {
            return Err(FatError::Corrupt("file larger than its cluster chain".into()));
        }
        self.read_chain_data(&chain, size)
    }

    /// Creates or replaces a file, creating missing parent directories.
    pub fn write_file(&mut self, path: &str, data: &[u8]) -> Result<DirEntry> {
        let comps = split_path(path);
        let (last, parents) = comps
            .split_last()
            .ok_or_else(|| FatError::NameInvalid(path.to_string()))?;
        let name = encode_83(last)?;
        for p in parents {
            encode_83(p)?;
        }
        let size = u32::try_from(data.len()).map_err(|_| FatError::NoSpace)?;
        let dir = self.resolve_dir(parents, true)?;
        let existing = self.find(dir, &name)?;
        if existing.as_ref().is_some_and(|l| l.entry.is_dir()) {
            return Err(FatError::IsADirectory);
        }
        let old_chain = match &existing {
            Some(l) => self.chain(l.entry.first_cluster)?,
            None => Vec::new(),
        };

        let needed = data.len().div_ceil(self.cluster_bytes());
        let free = self.free_clusters() as usize;
        if needed > free + old_chain.len() {
            return Err(FatError::NoSpace);
        }
        let slot = match &existing {
            Some(l) => l.slot,
            None => self.free_slot(dir)?,
        };
        let mut old_chain = old_chain;
        if needed > free {
            // Not enough room for both copies: give up the old contents first.
            self.write_slot(slot, &raw_entry(&name, ATTR_ARCHIVE, 0, 0))?;
            self.free_chain(&old_chain);
            self.flush_fat()?;
            old_chain.clear();
        }

        let chain = self.find_free(needed)?;
        self.write_chain_data(&chain, data)?;
        self.link(&chain);
        self.flush_fat()?;
        let first = chain.first().copied().unwrap_or(0);
        let raw = raw_entry(&name, ATTR_ARCHIVE, first, size);
        self.write_slot(slot, &raw)?;
        if !old_chain.is_empty() {
            self.free_chain(&old_chain);
            self.flush_fat()?;
        }
        Ok(DirEntry::from_raw(&raw))
    }

    pub fn delete_file(&mut self, path: &str) -> Result<()> {
        let (_, found) = self.locate(path)?;
        if found.entry.is_dir() {
            return Err(FatError::IsADirectory);
        }
        if found.entry.attributes & ATTR_READ_ONLY != 0 {
            return Err(FatError::NameInvalid(path.to_string()));
        }
        let chain = self.chain(found.entry.first_cluster)?;
        // Entry first: a crash in between leaks clusters instead of cross-linking.
        let mut raw = [0u8; ENTRY_LEN];
        let mut buf = [0u8; SECTOR];
        self.dev.read_blocks(found.slot.lba, &mut buf)?;
        raw.copy_from_slice(&buf[found.slot.index * ENTRY_LEN..(found.slot.index + 1) * ENTRY_LEN]);
        raw[0] = DELETED;
        self.write_slot(found.slot, &raw)?;
        self.free_chain(&chain);
        self.flush_fat()?;
        Ok(())
    }

    /// Clusters reachable from the root through every directory and file.
    pub fn allocated_clusters(&mut self) -> Result<u64> {
        let mut total = 0u64;
        let mut stack = vec![self.root()];
        if let Dir::Cluster(c) = self.root() {
            total += self.chain(c)?.len() as u64;
        }
        while let Some(dir) = stack.pop() {
            for l in self.scan(dir)? {
                total += self.chain(l.entry.first_cluster)?.len() as u64;
                if l.entry.is_dir() && l.entry.first_cluster != 0 {
                    stack.push(Dir::Cluster(l.entry.first_cluster));
                }
            }
        }
        Ok(total)
    }

    /// True when every FAT copy on disk matches the cached table.
    pub fn fat_copies_identical(&mut self) -> Result<bool> {
        let n = self.layout.fat_sectors as usize * SECTOR;
        let mut first = vec![0u8; n];
        self.dev
            .read_blocks(u64::from(self.layout.reserved_sectors), &mut first)?;
        for copy in 1..self.layout.fat_count {
            let mut other = vec![0u8; n];
            let lba = u64::from(self.layout.reserved_sectors + copy * self.layout.fat_sectors);
            self.dev.read_blocks(lba, &mut other)?;
            if other != first {
                return Ok(false);
            }
        }
        Ok(true)
    }

    pub fn flush(&mut self) -> Result<()> {
        self.flush_fat()?;
        self.dev.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::blockdev::MemDisk;
    use proptest::prelude::*;

    fn vol(mib: u64) -> FatVolume<MemDisk> {
        FatVolume::format(MemDisk::new(mib * 2048)).unwrap()
    }

    #[test]
    fn encode_examples() {
        assert_eq!(&encode_83("HELLO.TXT").unwrap(), b"HELLO   TXT");
        assert_eq!(&encode_83("a").unwrap(), b"A          ");
        assert_eq!(&encode_83("CONFIG.JS").unwrap(), b"CONFIG  JS ");
        for bad in [
            "",
            ".",
            "..",
            "TOOLONGNAME.TXT",
            "A.TOOL",
            "A B.TXT",
            "A.B.C",
            "Ä.TXT",
            "A*.TXT",
            ".TXT",
        ] {
            assert!(encode_83(bad).is_err(), "{bad:?}");
        }
    }

    #[test]
    fn decode_inverts_encode() {
        for n in ["HELLO.TXT", "A", "12345678.ABC", "X.Y", "_~$!.{}"] {
            assert_eq!(decode_83(&encode_83(n).unwrap()), n);
        }
    }

    #[test]
    fn layout_thresholds() {
        assert_eq!(Layout::for_sectors(16 * 2048).unwrap().variant, FatVariant::Fat16);
        assert_eq!(Layout::for_sectors(31 * 2048).unwrap().variant, FatVariant::Fat16);
        assert_eq!(Layout::for_sectors(64 * 2048).unwrap().variant, FatVariant::Fat32);
        assert!(Layout::for_sectors(1024).is_err());
        for mib in [3u64, 8, 20, 31, 32, 33, 64, 100, 300, 1024] {
            let l = Layout::for_sectors(mib * 2048).unwrap();
            match l.variant {
                FatVariant::Fat16 => assert!((FAT16_MIN_CLUSTERS..=FAT16_MAX_CLUSTERS).contains(&l.total_clusters)),
                FatVariant::Fat32 => assert!(l.total_clusters >= FAT32_MIN_CLUSTERS),
            }
            let entry = if l.variant == FatVariant::Fat16 { 2 } else { 4 };
            assert!((l.total_clusters + 2) * entry <= l.fat_sectors * 512);
            assert!(l.data_start() + l.total_clusters * l.sectors_per_cluster <= l.total_sectors);
        }
    }

    #[test]
    fn fresh_volume_is_empty() {
        for mib in [8, 64] {
            let mut v = vol(mib);
            assert!(v.list_dir("/").unwrap().is_empty());
            let disk = v.into_device();
            assert_eq!(&disk.as_slice()[510..512], &[0x55, 0xAA]);
            let mut v = FatVolume::mount(disk).unwrap();
            assert!(v.list_dir("/").unwrap().is_empty());
        }
    }

    #[test]
    fn boundary_sizes_round_trip() {
        for mib in [8, 64] {
            let mut v = vol(mib);
            let cb = v.cluster_bytes();
            for (i, len) in [0, 1, cb - 1, cb, cb + 1, 5 * cb + 17].into_iter().enumerate() {
                let data: Vec<u8> = (0..len).map(|x| (x * 7 + i) as u8).collect();
                let path = format!("/F{i}.BIN");
                let e = v.write_file(&path, &data).unwrap();
                assert_eq!(e.size_bytes as usize, len);
                assert_eq!(v.chain(e.first_cluster).unwrap().len(), len.div_ceil(cb));
                assert_eq!(v.read_file(&path).unwrap(), data);
            }
            assert!(v.fat_copies_identical().unwrap());
        }
    }

    #[test]
    fn nested_paths_and_errors() {
        let mut v = vol(8);
        v.write_file("/CFG/SUB/A.BIN", b"abc").unwrap();
        assert_eq!(v.read_file("cfg/sub/a.bin").unwrap(), b"abc");
        let names: Vec<String> = v.list_dir("/CFG").unwrap().into_iter().map(|e| e.name).collect();
        assert_eq!(names, ["SUB"]);
        assert!(matches!(v.read_file("/CFG/SUB/B.BIN"), Err(FatError::NotFound)));
        assert!(matches!(v.read_file("/CFG/SUB/A.BIN/X"), Err(FatError::NotADirectory)));
        assert!(matches!(
            v.write_file("/CFG/SUB/A.BIN/X", b""),
            Err(FatError::NotADirectory)
        ));
        assert!(matches!(v.write_file("/CFG", b""), Err(FatError::IsADirectory)));
        assert!(matches!(
            v.write_file("/toolongname.txt", b""),
            Err(FatError::NameInvalid(_))
        ));
        assert!(matches!(v.delete_file("/NOPE.TXT"), Err(FatError::NotFound)));
        assert!(v.stat("/CFG").unwrap().is_dir());
        assert_eq!(v.stat("/CFG/SUB/A.BIN").unwrap().size_bytes, 3);
        assert!(matches!(v.stat("/"), Err(FatError::NotFound)));
    }

    #[test]
    fn directories_grow_past_one_cluster() {
        let mut v = vol(8);
        let per_cluster = v.cluster_bytes() / ENTRY_LEN;
        v.write_file("/D/X", b"").unwrap();
        for i in 0..per_cluster * 3 {
            v.write_file(&format!("/D/F{i}"), &[i as u8]).unwrap();
        }
        assert_eq!(v.list_dir("/D").unwrap().len(), per_cluster * 3 + 1);
        assert_eq!(v.read_file("/D/F37").unwrap(), [37]);
    }

    #[test]
    fn fat16_root_fills_up() {
        let mut v = vol(8);
        for i in 0..512 {
            v.write_file(&format!("/R{i}"), b"").unwrap();
        }
        assert!(matches!(v.write_file("/R512", b""), Err(FatError::NoSpace)));
    }

    #[test]
    fn no_space_is_reported_and_nothing_leaks() {
        let mut v = vol(3);
        let free = v.free_clusters() as usize;
        let big = vec![1u8; free * v.cluster_bytes() + 1];
        assert!(matches!(v.write_file("/BIG", &big), Err(FatError::NoSpace)));
        assert_eq!(v.free_clusters() as usize, free);
        // Replacing a file that fills the volume with a same-size one works.
        let fill = vec![2u8; (free - 1) * v.cluster_bytes()];
        v.write_file("/FILL", &fill).unwrap();
        v.write_file("/FILL", &fill).unwrap();
        assert_eq!(v.read_file("/FILL").unwrap(), fill);
    }

    #[test]
    fn delete_then_rewrite_reuses_space() {
        let mut v = vol(8);
        let free = v.free_clusters();
        let data = vec![9u8; 10_000];
        v.write_file("/A.BIN", &data).unwrap();
        v.delete_file("/A.BIN").unwrap();
        assert_eq!(v.free_clusters(), free);
        v.write_file("/A.BIN", &data).unwrap();
        v.delete_file("/A.BIN").unwrap();
        assert_eq!(v.free_clusters(), free);
        assert!(v.list_dir("/").unwrap().is_empty());
    }

    #[derive(Clone, Debug)]
    enum Op {
        Write(usize, usize),
        Delete(usize),
    }

    fn ops() -> impl Strategy<Value = Vec<Op>> {
        prop::collection::vec(
            prop_oneof![
                (0usize..12, 0usize..20_000).prop_map(|(f, n)| Op::Write(f, n)),
                (0usize..12).prop_map(Op::Delete),
            ],
            1..40,
        )
    }

    fn path(i: usize) -> String {
        if i % 3 == 0 {
            format!("/DIR{}/F{i}.DAT", i % 2)
        } else {
            format!("/F{i}.DAT")
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]
        #[test]
        fn accounting_is_exact(ops in ops(), big in any::<bool>()) {
            let mut v = vol(if big { 40 } else { 8 });
            let mut model = std::collections::BTreeMap::new();
            for op in ops {
                match op {
                    Op::Write(f, n) => {
                        let data: Vec<u8> = (0..n).map(|x| (x ^ f) as u8).collect();
                        v.write_file(&path(f), &data).unwrap();
                        model.insert(f, data);
                    }
                    Op::Delete(f) => {
                        let r = v.delete_file(&path(f));
                        prop_assert_eq!(r.is_ok(), model.remove(&f).is_some());
                    }
                }
                let used = v.allocated_clusters().unwrap();
                prop_assert_eq!(used + u64::from(v.free_clusters()), u64::from(v.total_clusters()));
            }
            prop_assert!(v.fat_copies_identical().unwrap());
            let mut v = FatVolume::mount(v.into_device()).unwrap();
            for (f, data) in &model {
                prop_assert_eq!(&v.read_file(&path(*f)).unwrap(), data);
            }
        }
    }
}
