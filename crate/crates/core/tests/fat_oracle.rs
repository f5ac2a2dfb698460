mod common;

use std::collections::BTreeMap;
use std::io::{Cursor, Read, Write};

use netsd_core::bus::BusModel;
use netsd_core::{Arbiter, FatVariant, FatVolume, HostConfig, HostSession, MemDisk, PortId, Testbed};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Tree = BTreeMap<String, Option<Vec<u8>>>;

fn oracle_walk<T: fatfs::ReadWriteSeek>(dir: fatfs::Dir<T>, prefix: &str, out: &mut Tree) {
    for e in dir.iter() {
        let e = e.unwrap();
        let name = e.short_file_name();
        if name == "." || name == ".." {
            continue;
        }
        let path = format!("{prefix}/{name}");
        if e.is_dir() {
            out.insert(path.clone(), None);
            oracle_walk(e.to_dir(), &path, out);
        } else {
            let mut data = Vec::new();
            e.to_file().read_to_end(&mut data).unwrap();
            out.insert(path, Some(data));
        }
    }
}

/// Directory tree and free clusters as the independent implementation sees them.
fn oracle_view(image: Vec<u8>) -> (Tree, u32, fatfs::FatType) {
    let fs = fatfs::FileSystem::new(Cursor::new(image), fatfs::FsOptions::new()).unwrap();
    let mut tree = Tree::new();
    oracle_walk(fs.root_dir(), "", &mut tree);
    let free = fs.stats().unwrap().free_clusters();
    (tree, free, fs.fat_type())
}

fn our_view<D: netsd_core::BlockDevice>(vol: &mut FatVolume<D>) -> Tree {
    let mut tree = Tree::new();
    let mut stack = vec![String::new()];
    while let Some(dir) = stack.pop() {
        for e in vol.list_dir(&dir).unwrap() {
            let path = format!("{dir}/{}", e.name);
            if e.is_dir() {
                tree.insert(path.clone(), None);
                stack.push(path);
            } else {
                let data = vol.read_file(&path).unwrap();
                tree.insert(path, Some(data));
            }
        }
    }
    tree
}

const NAMES: [&str; 6] = ["A.TXT", "LOG.BIN", "CONFIG", "X1.DAT", "README.MD", "Z"];
const DIRS: [&str; 3] = ["", "/ETC", "/VAR/LOG"];

fn random_sequence<D: netsd_core::BlockDevice>(vol: &mut FatVolume<D>, rng: &mut ChaCha8Rng, ops: usize) {
    let cb = vol.cluster_bytes();
    for _ in 0..ops {
        let path = format!(
            "{}/{}",
            DIRS[rng.random_range(0..DIRS.len())],
            NAMES[rng.random_range(0..NAMES.len())]
        );
        if rng.random_bool(0.25) {
            let _ = vol.delete_file(&path);
        } else {
            let len = match rng.random_range(0..4) {
                0 => 0,
                1 => cb * rng.random_range(1..4) + rng.random_range(0..3) - 1,
                _ => rng.random_range(1..6 * cb),
            };
            let mut data = vec![0u8; len];
            rng.fill(&mut data[..]);
            vol.write_file(&path, &data).unwrap();
        }
    }
}

#[test]
fn random_sequences_agree_with_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for round in 0..40 {
        let mib = if round % 2 == 0 { 8 } else { 40 };
        let mut vol = FatVolume::format(MemDisk::new(mib * 2048)).unwrap();
        random_sequence(&mut vol, &mut rng, 30);
        let ours = our_view(&mut vol);
        let free = vol.free_clusters();
        assert_eq!(
            vol.allocated_clusters().unwrap() + u64::from(free),
            u64::from(vol.total_clusters())
        );
        let variant = vol.variant();
        let (theirs, their_free, ty) = oracle_view(vol.into_device().into_inner());
        assert_eq!(ours, theirs, "round {round}");
        assert_eq!(free, their_free, "round {round}");
        let expect = if variant == FatVariant::Fat16 {
            fatfs::FatType::Fat16
        } else {
            fatfs::FatType::Fat32
        };
        assert_eq!(ty, expect);
    }
}

#[test]
fn oracle_formatted_images_are_readable() {
    for (mib, ty) in [(16u64, fatfs::FatType::Fat16), (64, fatfs::FatType::Fat32)] {
        let mut cur = Cursor::new(vec![0u8; (mib << 20) as usize]);
        fatfs::format_volume(&mut cur, fatfs::FormatVolumeOptions::new().fat_type(ty)).unwrap();
        let mut written = Tree::new();
        {
            let fs = fatfs::FileSystem::new(&mut cur, fatfs::FsOptions::new()).unwrap();
            let root = fs.root_dir();
            root.create_dir("SUB").unwrap();
            written.insert("/SUB".into(), None);
            for (i, len) in [0usize, 1, 511, 512, 513, 4096, 70_000].into_iter().enumerate() {
                let path = if i % 2 == 0 {
                    format!("F{i}.BIN")
                } else {
                    format!("SUB/F{i}.BIN")
                };
                let data = common::pattern(len, i as u64);
                root.create_file(&path).unwrap().write_all(&data).unwrap();
                written.insert(format!("/{path}"), Some(data));
            }
            root.create_file("GONE.TXT").unwrap().write_all(b"bye").unwrap();
            root.remove("GONE.TXT").unwrap();
        }
        let image = cur.into_inner();
        let (_, their_free, _) = oracle_view(image.clone());
        let mut vol = FatVolume::mount(MemDisk::from_vec(image)).unwrap();
        assert_eq!(our_view(&mut vol), written);
        assert_eq!(vol.free_clusters(), their_free);

        // And back: our changes are visible to the oracle.
        vol.write_file("/SUB/NEW.DAT", b"from us").unwrap();
        vol.delete_file("/F0.BIN").unwrap();
        written.insert("/SUB/NEW.DAT".into(), Some(b"from us".to_vec()));
        written.remove("/F0.BIN");
        let free = vol.free_clusters();
        let (theirs, their_free, _) = oracle_view(vol.into_device().into_inner());
        assert_eq!(theirs, written);
        assert_eq!(free, their_free);
    }
}

#[test]
fn filesystem_over_the_emulated_card() {
    let probe = common::Probe::new(40 << 20);
    let bed = Testbed::new(
        common::config(40 << 20, 2, BusModel::default(), 3),
        Box::new(probe.clone()),
    )
    .unwrap();
    let arb = Arbiter::new(bed);
    arb.lock().release();
    let host = HostConfig {
        retry_limit: 64,
        ..Default::default()
    };
    let mut dut = HostSession::new(arb, PortId::DUT, host);
    dut.init().unwrap();
    let mut vol = FatVolume::format(dut).unwrap();
    assert_eq!(vol.variant(), FatVariant::Fat32);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    random_sequence(&mut vol, &mut rng, 20);
    vol.flush().unwrap();
    let ours = our_view(&mut vol);
    let free = vol.free_clusters();
    let (theirs, their_free, _) = oracle_view(probe.snapshot());
    assert_eq!(ours, theirs);
    assert_eq!(free, their_free);
}
