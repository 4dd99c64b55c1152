mod common;

use common::{randomize, rng, tiny, Probe};
use ternary_dit::checkpoint::{deserialize, serialize, Checkpoint, TensorData};
use ternary_dit::diagnostics::{checkpoint_size_report, size_report};
use ternary_dit::{DiT, ModelConfig};

fn trained_like(quantize: bool) -> DiT<f32> {
    let mut m = DiT::<f64>::new(tiny(true, quantize), &mut rng(0)).unwrap();
    randomize(&mut m, 0.3, &mut rng(1));
    m.cast()
}

fn reload(ckpt: &Checkpoint) -> DiT<f32> {
    let bytes = serialize(ckpt).unwrap();
    let back = deserialize(&bytes).unwrap();
    assert_eq!(&back, ckpt);
    assert_eq!(serialize(&back).unwrap(), bytes);
    DiT::from_checkpoint(&back).unwrap()
}

#[test]
fn dense_checkpoint_round_trips_parameters() {
    for quantize in [false, true] {
        let m = trained_like(quantize);
        let back = reload(&m.to_checkpoint().unwrap());
        assert!(!back.is_packed());
        assert_eq!(back.config(), m.config());
        assert_eq!(back.params, m.params);
    }
}

#[test]
fn packed_model_predicts_bit_identically() {
    let m = trained_like(true);
    let ckpt = m.to_packed_checkpoint().unwrap();
    let packed = reload(&ckpt);
    assert!(packed.is_packed());
    let probe = Probe::new(m.config(), &mut rng(2));
    let x: Vec<_> = probe.x.iter().map(|i| i.cast::<f32>()).collect();
    let a = m.predict(&x, &probe.t, &probe.labels, &probe.drop).unwrap();
    let b = packed.predict(&x, &probe.t, &probe.labels, &probe.drop).unwrap();
    assert_eq!(a, b);
    // packing is idempotent
    assert_eq!(packed.to_packed_checkpoint().unwrap(), ckpt);
}

#[test]
fn full_precision_model_cannot_be_packed() {
    assert!(trained_like(false).to_packed_checkpoint().is_err());
}

#[test]
fn size_report_matches_serialized_payloads() {
    let m = DiT::<f32>::new(ModelConfig::toy(), &mut rng(3)).unwrap();
    let report = size_report(m.config()).unwrap();
    let dense = m.to_checkpoint().unwrap();
    let packed = m.to_packed_checkpoint().unwrap();
    assert_eq!(report.fp_bytes, dense.payload_bytes());
    assert_eq!(report.packed_bytes, packed.payload_bytes());
    assert_eq!(checkpoint_size_report(&packed).unwrap(), report);
    assert_eq!(report.total_params(), m.params.numel());

    let n_packed = packed.tensors.iter().filter(|t| matches!(t.data, TensorData::Packed(_))).count();
    assert_eq!(n_packed, report.tensors.iter().filter(|t| t.ternary).count());
}
