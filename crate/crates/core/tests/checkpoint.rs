use wfcompose::bases::{CapabilityBasisSet, CapabilityConfig};
use wfcompose::checkpoint::{CapabilityModel, Checkpoint};
use wfcompose::composer::{ComposerConfig, ComposerParams};
use wfcompose::model::{BaseModel, ModelConfig};
use wfcompose::rng::{substream, Stream};
use wfcompose::{Error, FORMAT_VERSION};

fn sample() -> Checkpoint {
    let cfg = ModelConfig::with_dims(20, 8, 1, 2, 16, 16);
    let mut rng = substream(9, Stream::Init);
    let base = BaseModel::<f32>::init(cfg.clone(), &mut rng).unwrap();
    let cap = CapabilityConfig {
        num_bases: 3,
        rank: 2,
        top_m: 2,
    };
    let bases = CapabilityBasisSet::init(&cfg, cap, &mut rng).unwrap();
    let composer = ComposerParams::init(8, 3, ComposerConfig::default(), &mut rng).unwrap();
    Checkpoint {
        base,
        capability: Some(CapabilityModel { bases, composer }),
        train: None,
    }
}

fn bytes(ckpt: &Checkpoint) -> Vec<u8> {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.ckpt");
    ckpt.write(&path).unwrap();
    std::fs::read(path).unwrap()
}

fn split(bytes: &[u8]) -> (serde_json::Value, &[u8]) {
    let nl = bytes.iter().position(|&b| b == b'\n').unwrap();
    (serde_json::from_slice(&bytes[..nl]).unwrap(), &bytes[nl + 1..])
}

fn join(header: &serde_json::Value, payload: &[u8]) -> Vec<u8> {
    let mut out = serde_json::to_vec(header).unwrap();
    out.push(b'\n');
    out.extend_from_slice(payload);
    out
}

#[test]
fn roundtrip_is_exact() {
    let c = sample();
    let back = Checkpoint::from_bytes(&bytes(&c)).unwrap();
    assert_eq!(back, c);
}

#[test]
fn header_carries_version_and_manifest() {
    let raw = bytes(&sample());
    let (h, payload) = split(&raw);
    assert_eq!(h["format_version"], FORMAT_VERSION);
    let manifest = h["manifest"].as_array().unwrap();
    let floats: u64 = manifest
        .iter()
        .map(|e| e["shape"][0].as_u64().unwrap() * e["shape"][1].as_u64().unwrap())
        .sum();
    assert_eq!(4 * floats, payload.len() as u64);
    assert!(manifest.iter().any(|e| e["name"] == "composer/logits/w2"));
}

#[test]
fn other_versions_are_rejected() {
    let raw = bytes(&sample());
    let (mut h, payload) = split(&raw);
    for v in [serde_json::json!(FORMAT_VERSION + 1), serde_json::json!(0), serde_json::Value::Null] {
        h["format_version"] = v;
        match Checkpoint::from_bytes(&join(&h, payload)) {
            Err(Error::Checkpoint(msg)) => assert!(msg.contains("version"), "{msg}"),
            other => panic!("accepted: {other:?}"),
        }
    }
}

#[test]
fn tampered_base_fails_the_hash() {
    let raw = bytes(&sample());
    let (h, payload) = split(&raw);
    let mut payload = payload.to_vec();
    payload[0] ^= 0x40;
    assert!(matches!(Checkpoint::from_bytes(&join(&h, &payload)), Err(Error::Checkpoint(_))));
}

#[test]
fn truncated_payload_is_rejected() {
    let raw = bytes(&sample());
    assert!(matches!(Checkpoint::from_bytes(&raw[..raw.len() - 4]), Err(Error::Checkpoint(_))));
    assert!(Checkpoint::from_bytes(b"no newline").is_err());
}

#[test]
fn base_only_has_no_capability() {
    let c = Checkpoint::base_only(sample().base);
    let back = Checkpoint::from_bytes(&bytes(&c)).unwrap();
    assert!(back.capability.is_none());
    assert!(back.require_capability().is_err());
}
