use foresight_core::io::{decode_points, encode_points, Checkpoint, CheckpointHeader, IoError, WindowRecord};
use foresight_core::model::{ModelConfig, ModelParams};
use foresight_core::tokens::TokenStats;

fn config() -> ModelConfig {
    ModelConfig { d_ctx: 16, width: 16, heads: 2, point_width: 8, knn_k: 4, ..ModelConfig::default() }
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let params = ModelParams::init(&config(), 5).unwrap();
    let stats = TokenStats::from_parts([0.1; 9], [0.7; 9]);
    let ck = Checkpoint { header: CheckpointHeader { config: config(), stats, seed: 5, step: 0 }, params };
    let bytes = ck.to_bytes();
    assert_eq!(&bytes[..4], b"OFCK");
    let back = Checkpoint::from_bytes(&bytes).unwrap();
    assert_eq!(back, ck);
    for (a, b) in back.params.tensors.iter().zip(&ck.params.tensors) {
        assert!(a.data.iter().zip(&b.data).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
    assert_eq!(back.to_bytes(), bytes);

    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(Checkpoint::from_bytes(&bad), Err(IoError::Format(_))));
    assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
}

#[test]
fn point_blocks() {
    let pts = vec![[0.5, -0.25, 1.0, 0.125, 0.0, -1.0], [1.0; 6]];
    let mut buf = vec![0u8; 3];
    encode_points(&pts, &mut buf);
    assert_eq!(&buf[3..7], b"OFPC");
    assert_eq!(buf.len(), 3 + 10 + 2 * 24);
    assert_eq!(decode_points(&buf, 3).unwrap(), pts);
    assert!(decode_points(&buf, 0).is_err());
    assert!(decode_points(&buf[..20], 3).is_err());
}

#[test]
fn window_records_reject_unknown_fields() {
    let line = r#"{"clip_id":"a","fps":6,"C":1,"H":1,"intrinsics":[1,1,0,0],"context_poses":[[0,0,1,1,0,0,0,1,0]],
        "context_boxes":[[0.5,0.5,0.1,0.1]],"future_poses":[[0,0,1,1,0,0,0,1,0]],"points_file":"p","points_offset":0}"#;
    assert!(serde_json::from_str::<WindowRecord>(line).is_ok());
    let extra = line.replace("\"fps\":6", "\"fps\":6,\"bogus\":1");
    assert!(serde_json::from_str::<WindowRecord>(&extra).is_err());
}
