//! CRC-7 and CRC-16 as used by SD command frames and data blocks.
//!
//! Both are MSB-first with a zero initial value and no final XOR:
//! CRC-7 uses `x^7 + x^3 + 1`, CRC-16 is CCITT `x^16 + x^12 + x^5 + 1`.

const CRC7_POLY: u8 = 0x09;
const CRC16_POLY: u16 = 0x1021;

const CRC7_TABLE: [u8; 256] = build_crc7_table();
const CRC16_TABLE: [u16; 256] = build_crc16_table();

const fn build_crc7_table() -> [u8; 256] {
    // Entries hold the 7-bit remainder left-aligned in a byte.
    let mut table = [0u8; 256];
    let mut i = 0;
    while i < 256 {
        let mut crc = i as u8;
        let mut bit = 0;
        while bit < 8 {
            crc = if crc & 0x80 != 0 {
                (crc << 1) ^ (CRC7_POLY << 1)
            } else {
                crc << 1
            };
            bit += 1;
        }
        table[i] = crc;
        i += 1;
    }
    table
}

const fn build_crc16_table() -> [u16; 256] {
    let mut table = [0u16; 256];
    let mut i = 0;
    while i < 256 {
        let mut crc = (i as u16) << 8;
        let mut bit = 0;
        while bit < 8 {
            crc = if crc & 0x8000 != 0 {
                (crc << 1) ^ CRC16_POLY
            } else {
                crc << 1
            };
            bit += 1;
        }
        table[i] = crc;
        i += 1;
    }
    table
}

/// CRC-7 over `data`, returned in the low seven bits.
pub fn crc7(data: &[u8]) -> u8 {
    let mut crc = 0u8;
    for &b in data {
        crc = CRC7_TABLE[(crc ^ b) as usize];
    }
    crc >> 1
}

/// CRC-16/CCITT (zero init) over `data`.
pub fn crc16(data: &[u8]) -> u16 {
    let mut crc = 0u16;
    for &b in data {
        crc = (crc << 8) ^ CRC16_TABLE[((crc >> 8) as u8 ^ b) as usize];
    }
    crc
}
