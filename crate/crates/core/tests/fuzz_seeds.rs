//! Replays the checked-in fuzz corpus through the decoders.
//!
//! Seeds named `valid_*` must decode; every other seed must be rejected
//! with an error. Regenerate the seeds with
//! `cargo test -p tosa-core --test fuzz_seeds -- --ignored`.

use std::fs;
use std::path::{Path, PathBuf};

use tosa_core::config::RunConfig;
use tosa_core::model::{Model, ModelConfig};
use tosa_core::training::{decode_dataset, encode_dataset, quadrant_dataset, QuadrantSpec, Split};

fn corpus(target: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fuzz/corpus").join(target)
}

fn seeds(target: &str) -> Vec<(String, Vec<u8>)> {
    let mut out: Vec<(String, Vec<u8>)> = fs::read_dir(corpus(target))
        .unwrap_or_else(|e| panic!("corpus for {target}: {e}"))
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().into_string().unwrap(), fs::read(e.path()).unwrap())
        })
        .collect();
    out.sort();
    assert!(out.len() >= 3, "{target} corpus has {} seeds", out.len());
    out
}

fn check<T, E: std::fmt::Debug>(target: &str, decode: impl Fn(&[u8]) -> Result<T, E>) {
    for (name, bytes) in seeds(target) {
        let r = decode(&bytes);
        if name.starts_with("valid_") {
            assert!(r.is_ok(), "{target}/{name}: {:?}", r.err());
        } else {
            assert!(r.is_err(), "{target}/{name} should be rejected");
        }
    }
}

#[test]
fn checkpoint_seeds() {
    check("checkpoint", Model::from_bytes);
}

#[test]
fn dataset_seeds() {
    check("dataset", decode_dataset);
}

#[test]
fn config_seeds() {
    check("config", |b| match std::str::from_utf8(b) {
        Ok(text) => RunConfig::parse(text).map(|_| ()).map_err(|e| e.to_string()),
        Err(e) => Err(e.to_string()),
    });
}

fn tiny() -> ModelConfig {
    ModelConfig {
        image_size: 8,
        patch_size: 4,
        dim: 8,
        heads: 2,
        depth: 4,
        tosa_layers: vec![2, 4],
        ratio: 0.6,
        selector_hidden: 4,
        ..ModelConfig::default()
    }
}

#[test]
#[ignore = "writes the corpus"]
fn regenerate_seeds() {
    let write = |target: &str, name: &str, bytes: &[u8]| {
        let dir = corpus(target);
        fs::create_dir_all(&dir).unwrap();
        fs::write(dir.join(name), bytes).unwrap();
    };

    let ckpt = Model::init(tiny(), 1).unwrap().to_bytes();
    write("checkpoint", "valid_tiny.ckpt", &ckpt);
    let mut standard = Model::init(tiny().all_standard(), 2).unwrap();
    standard.state.attach_dense_head(&standard.config.clone(), 2);
    write("checkpoint", "valid_dense_head.ckpt", &standard.to_bytes());
    write("checkpoint", "truncated.ckpt", &ckpt[..ckpt.len() / 2]);
    let mut magic = ckpt.clone();
    magic[0] = b'X';
    write("checkpoint", "bad_magic.ckpt", &magic);
    let mut trailing = ckpt.clone();
    trailing.push(0);
    write("checkpoint", "trailing_byte.ckpt", &trailing);

    let spec = QuadrantSpec::for_model(&tiny());
    let set = encode_dataset(&quadrant_dataset(&spec, 2, 1, Split::Test).unwrap());
    write("dataset", "valid_two_samples.tsds", &set);
    let mut plain = quadrant_dataset(&spec, 1, 1, Split::Train).unwrap();
    plain.targets = None;
    write("dataset", "valid_no_targets.tsds", &encode_dataset(&plain));
    write("dataset", "truncated.tsds", &set[..set.len() - 8]);
    let mut split = set.clone();
    split[8] = 7;
    write("dataset", "bad_split.tsds", &split);

    let toy = include_str!("../../../configs/toy.cfg");
    write("config", "valid_toy.cfg", toy.as_bytes());
    write("config", "valid_minimal.cfg", b"[run]\nout = runs/min\n");
    write(
        "config",
        "valid_all_sections.cfg",
        RunConfig::parse("[run]\nout = runs/all\n").unwrap().render().as_bytes(),
    );
    write("config", "unknown_key.cfg", b"[run]\nout = x\nfoo = 1\n");
    write("config", "bad_order.cfg", b"[run]\nout = x\nsteps = finetune, pretrain\n");
    write("config", "unterminated.cfg", b"[run\nout = x\n");
    write("config", "missing_files.cfg", b"[run]\nout = x\n[data]\nsource = files\ntrain = /nonexistent.tsds\n");
}
