use std::io::{BufRead, BufReader};
use std::process::{Child, Command, Stdio};

fn netsd() -> Command {
    Command::new(env!("CARGO_BIN_EXE_netsd"))
}

#[test]
fn formatted_image_mounts_in_an_independent_reader() {
    let dir = tempfile::tempdir().unwrap();
    let img = dir.path().join("sd.img");
    let out = netsd()
        .args(["format", "--capacity", "64MiB", "--out"])
        .arg(&img)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(std::fs::metadata(&img).unwrap().len(), 64 << 20);

    let file = std::fs::OpenOptions::new().read(true).write(true).open(&img).unwrap();
    let fs = fatfs::FileSystem::new(file, fatfs::FsOptions::new()).unwrap();
    assert_eq!(fs.root_dir().iter().count(), 0);
    let stats = fs.stats().unwrap();
    assert!(stats.free_clusters() > 0);
    assert_eq!(stats.free_clusters(), stats.total_clusters() - 1);

    // Refuses to clobber without --force.
    let again = netsd().args(["format", "--out"]).arg(&img).output().unwrap();
    assert!(!again.status.success());
}

#[test]
fn usage_errors_exit_nonzero() {
    for args in [
        vec!["frobnicate"],
        vec!["format", "--capacity", "lots"],
        vec!["serve", "--set", "no_equals_sign"],
        vec!["serve", "--set", "nope=1", "--nbd-port", "0", "--http-port", "0"],
        vec!["dut", "bench", "--direction", "sideways"],
        vec!["fault", "add", "{not json"],
    ] {
        let out = netsd().args(&args).output().unwrap();
        assert!(!out.status.success(), "{args:?} succeeded");
        assert!(!out.stderr.is_empty(), "{args:?} printed nothing");
    }
}

#[test]
fn dut_round_trips_through_an_image() {
    let dir = tempfile::tempdir().unwrap();
    let img = dir.path().join("card.img");
    let data: Vec<u8> = (0..5000u32).map(|i| (i * 7 + 3) as u8).collect();
    let input = dir.path().join("in.bin");
    std::fs::write(&input, &data).unwrap();
    let common = ["dut", "--capacity", "1MiB", "--image"];
    let w = netsd()
        .args(common)
        .arg(&img)
        .args(["write", "--lba", "9", "--input"])
        .arg(&input)
        .output()
        .unwrap();
    assert!(w.status.success(), "{}", String::from_utf8_lossy(&w.stderr));
    let r = netsd()
        .args(common)
        .arg(&img)
        .args(["read", "--lba", "9", "--count", "10"])
        .output()
        .unwrap();
    assert!(r.status.success());
    assert_eq!(r.stdout.len(), 5120);
    assert_eq!(&r.stdout[..5000], &data[..]);
    assert!(r.stdout[5000..].iter().all(|&b| b == 0));
    let raw = std::fs::read(&img).unwrap();
    assert_eq!(&raw[9 * 512..9 * 512 + 5000], &data[..]);
}

struct Server(Child);

impl Drop for Server {
    fn drop(&mut self) {
        let _ = self.0.kill();
        let _ = self.0.wait();
    }
}

/// Starts `serve` on ephemeral ports and returns the HTTP address.
fn serve(extra: &[&str]) -> (Server, String) {
    let mut child = netsd()
        .args([
            "serve",
            "--nbd-port",
            "0",
            "--http-port",
            "0",
            "--set",
            "nbd_listen=127.0.0.1:0",
        ])
        .args(extra)
        .stderr(Stdio::piped())
        .spawn()
        .unwrap();
    let mut lines = BufReader::new(child.stderr.take().unwrap()).lines();
    let http = loop {
        let line = lines.next().expect("serve exited early").unwrap();
        if let Some(addr) = line.strip_prefix("http listening on ") {
            break addr.replace("0.0.0.0", "127.0.0.1");
        }
    };
    (Server(child), format!("http://{http}"))
}

#[test]
fn flags_override_the_config_file_and_faults_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let conf = dir.path().join("gw.conf");
    std::fs::write(&conf, "capacity = 2MiB\nseed = 5\nfaults = false\n").unwrap();
    let conf = conf.to_str().unwrap();
    let (_srv, url) = serve(&["--config", conf, "--capacity", "4MiB", "--set", "faults=true"]);

    let status: serde_json::Value = reqwest::blocking::get(format!("{url}/api/v1/status"))
        .unwrap()
        .json()
        .unwrap();
    assert_eq!(status["holder"], "dut");
    assert_eq!(status["capacity_bytes"], 4 << 20, "{status}");

    let fault = |args: &[&str]| {
        let out = netsd().args(["fault", "--server", &url]).args(args).output().unwrap();
        assert!(
            out.status.success(),
            "{args:?}: {}",
            String::from_utf8_lossy(&out.stderr)
        );
        serde_json::from_slice::<serde_json::Value>(&out.stdout).unwrap()
    };
    let req = r#"{"kind":{"type":"delay","added_us":10,"window_us":1000},"trigger":"immediate"}"#;
    let added = fault(&["add", req]);
    let id = added["id"].as_u64().unwrap();
    let listed = fault(&["list"]);
    assert_eq!(listed.as_array().unwrap().len(), 1);
    assert_eq!(listed[0]["id"], id);
    let cancelled = fault(&["cancel", &id.to_string()]);
    assert_eq!(cancelled["status"], "cancelled");

    let missing = netsd()
        .args(["fault", "--server", &url, "cancel", "999"])
        .output()
        .unwrap();
    assert!(!missing.status.success());
    assert!(String::from_utf8_lossy(&missing.stderr).contains("404"));
}
