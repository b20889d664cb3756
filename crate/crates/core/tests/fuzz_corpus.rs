//! Replays the checked-in fuzz seeds through the decoders on stable, with
//! the same round-trip checks the fuzz targets make.

use std::path::PathBuf;

use rda_inr::geometry::io::{
    parse_grid, parse_obj, parse_points, write_grid, write_obj, write_points,
};
use rda_inr::train::{decode_checkpoint, encode_checkpoint, TrainConfig};

fn seeds(target: &str) -> Vec<(PathBuf, Vec<u8>)> {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../../fuzz/corpus")
        .join(target);
    let mut out: Vec<_> = std::fs::read_dir(&dir)
        .unwrap_or_else(|e| panic!("{}: {e}", dir.display()))
        .map(|e| e.unwrap().path())
        .map(|p| {
            let bytes = std::fs::read(&p).unwrap();
            (p, bytes)
        })
        .collect();
    out.sort();
    assert!(!out.is_empty(), "no seeds for {target}");
    out
}

fn text(bytes: &[u8]) -> &str {
    std::str::from_utf8(bytes).unwrap()
}

#[test]
fn obj_seeds_parse_and_round_trip() {
    for (p, b) in seeds("obj") {
        let mesh = parse_obj(text(&b)).unwrap_or_else(|e| panic!("{}: {e}", p.display()));
        assert_eq!(
            parse_obj(&write_obj(&mesh)).unwrap(),
            mesh,
            "{}",
            p.display()
        );
    }
}

#[test]
fn point_seeds_parse_and_round_trip() {
    for (p, b) in seeds("points") {
        let s = parse_points(text(&b)).unwrap_or_else(|e| panic!("{}: {e}", p.display()));
        assert_eq!(parse_points(&write_points(&s)).unwrap().len(), s.len());
    }
}

#[test]
fn grid_seeds_parse_and_round_trip() {
    for (p, b) in seeds("grid") {
        let g = parse_grid(&b).unwrap_or_else(|e| panic!("{}: {e}", p.display()));
        assert_eq!(write_grid(&g), b);
    }
}

#[test]
fn checkpoint_seeds_decode_and_reencode() {
    for (p, b) in seeds("checkpoint") {
        let state = decode_checkpoint(&b).unwrap_or_else(|e| panic!("{}: {e}", p.display()));
        assert_eq!(encode_checkpoint(&state), b);
    }
}

#[test]
fn config_seeds_parse_and_round_trip() {
    for (p, b) in seeds("config") {
        let cfg =
            TrainConfig::from_json(text(&b)).unwrap_or_else(|e| panic!("{}: {e}", p.display()));
        assert_eq!(TrainConfig::from_json(&cfg.to_json()).unwrap(), cfg);
    }
}

#[test]
fn mangled_seeds_are_rejected_without_panicking() {
    for (_, b) in seeds("checkpoint") {
        for cut in [0, 7, 8, 20, b.len() / 2, b.len() - 1] {
            assert!(decode_checkpoint(&b[..cut]).is_err());
        }
    }
    for (_, b) in seeds("grid") {
        assert!(parse_grid(&b[..b.len() - 3]).is_err());
    }
    assert!(parse_obj("v 0 0 0\nf 1 2 9\n").is_err());
    assert!(parse_points("0 0 3 0\n").is_err());
    assert!(TrainConfig::from_json("{\"dim\": 2, \"bogus\": 1}").is_err());
}
