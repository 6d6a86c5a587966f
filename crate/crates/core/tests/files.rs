use std::collections::BTreeMap;

use diffreg::io::{
    build_report, read_deformation, read_volume, sig6, write_deformation, write_labels, write_report, write_scalar,
    AnyVolume, Evaluation, REPORT_KEYS,
};
use diffreg::synth::{synthesize, SynthCase};
use diffreg::{
    dice, hausdorff_slice_avg, jacobian_stats, register_pair, warp_labels, DataTerm, Dims, Profile, RegError,
    RegistrationConfig, ScalarVolume, SolverConfig,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn cfg(term: DataTerm) -> RegistrationConfig {
    RegistrationConfig::new(SolverConfig::new(term, 2, 20.0, 0.1), Profile::Capped)
}

#[test]
fn scalar_file_is_bit_identical() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("v.dreg");
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let v = ScalarVolume::new(Dims::cube(4), [0.5, 1.0, 2.0], (0..64).map(|_| rng.gen::<f32>()).collect()).unwrap();
    write_scalar(&path, &v).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    assert_eq!(&bytes[..4], b"DREG");
    assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
    assert_eq!(bytes[8], 0);
    assert_eq!(f64::from_le_bytes(bytes[37..45].try_into().unwrap()), 2.0);
    let back = read_volume(&path).unwrap().into_scalar().unwrap();
    assert!(back.data().iter().zip(v.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
    assert_eq!(back.spacing(), v.spacing());
}

#[test]
fn malformed_files_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.dreg");
    let mut bytes = b"XXXX".to_vec();
    bytes.extend_from_slice(&[0; 41]);
    std::fs::write(&path, &bytes).unwrap();
    assert!(matches!(read_volume(&path), Err(RegError::BadMagic(_))));

    let mut short = b"DREG".to_vec();
    short.extend_from_slice(&1u32.to_le_bytes());
    short.push(0);
    for _ in 0..3 {
        short.extend_from_slice(&2u32.to_le_bytes());
    }
    for _ in 0..3 {
        short.extend_from_slice(&1.0f64.to_le_bytes());
    }
    for _ in 0..7 {
        short.extend_from_slice(&0.5f32.to_le_bytes());
    }
    std::fs::write(&path, &short).unwrap();
    assert!(matches!(read_volume(&path), Err(RegError::Truncated { expected: 32, found: 28 })));

    assert!(matches!(read_volume(dir.path().join("missing.dreg")), Err(RegError::Io(_))));
    let v = ScalarVolume::<f32>::zeros(Dims::cube(2), [1.0; 3]);
    write_scalar(&path, &v).unwrap();
    assert!(matches!(read_deformation(&path), Err(RegError::WrongKind { .. })));
}

#[test]
fn deformation_and_labels_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let pair = synthesize::<f32>(&SynthCase::Blob { seed: 3 }, Dims::new(8, 10, 6), [1.0, 1.0, 1.5]).unwrap();
    let p = dir.path().join("phi.dreg");
    write_deformation(&p, &pair.truth).unwrap();
    assert_eq!(read_deformation(&p).unwrap(), pair.truth);
    let l = dir.path().join("l.dreg");
    write_labels(&l, &pair.target_labels).unwrap();
    assert_eq!(read_volume(&l).unwrap(), AnyVolume::Label(pair.target_labels.clone()));
}

#[test]
fn identity_registration_report() {
    let dir = tempfile::tempdir().unwrap();
    let pair = synthesize::<f32>(&SynthCase::SphereEllipsoid, Dims::cube(16), [1.0; 3]).unwrap();
    let c = cfg(DataTerm::L1);
    let res = register_pair(&pair.target, &pair.target, &c).unwrap();
    assert!(res.phi.is_identity());
    let warped = warp_labels(&pair.target_labels, &res.phi).unwrap();
    let eval = Evaluation {
        dice: BTreeMap::from([(1, dice(&warped, &pair.target_labels, 1).unwrap())]),
        hausdorff_mm: BTreeMap::from([(1, hausdorff_slice_avg(&warped, &pair.target_labels, 1).unwrap())]),
        jacobian: Some(jacobian_stats(&res.phi).unwrap()),
    };
    let path = dir.path().join("r.json");
    write_report(&res, &eval, &c, &path).unwrap();
    let parsed: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
    let obj = parsed.as_object().unwrap();
    let mut keys: Vec<&str> = obj.keys().map(String::as_str).collect();
    keys.sort();
    let mut want = REPORT_KEYS.to_vec();
    want.sort();
    assert_eq!(keys, want);
    assert_eq!(parsed["dice"]["1"], 1.0);
    assert_eq!(parsed["hausdorff_mm"]["1"], 0.0);
    assert_eq!(parsed["jacobian_pct_nonpositive"], 0.0);
    assert_eq!(parsed["config"]["solver"]["data_term"], "l1");
    assert_eq!(parsed, build_report(&res, &eval, &c).unwrap());
}

#[test]
fn six_significant_digits() {
    assert_eq!(sig6(1.234_567_89), 1.234_57);
    assert_eq!(sig6(-0.000_123_456_78), -0.000_123_457);
    assert_eq!(sig6(98_765_432.0), 98_765_400.0);
    assert_eq!(sig6(0.0), 0.0);
}

#[test]
fn translation_is_recovered_at_small_scale() {
    let d = Dims::cube(32);
    let pair = synthesize::<f32>(&SynthCase::Translate { shift: [2.0, 0.0, 0.0] }, d, [1.0; 3]).unwrap();
    for term in [DataTerm::L1, DataTerm::L2] {
        let c = match term {
            DataTerm::L1 => cfg(term),
            DataTerm::L2 => RegistrationConfig::new(SolverConfig::new(term, 2, 5.0, 0.1), Profile::Capped),
        };
        let res = register_pair(&pair.target, &pair.source, &c).unwrap();
        let warped = warp_labels(&pair.source_labels, &res.phi).unwrap();
        assert!(dice(&warped, &pair.target_labels, 1).unwrap() >= 0.95, "{term:?}");
        assert_eq!(jacobian_stats(&res.phi).unwrap().pct_nonpositive, 0.0);
        assert!(res.velocity_count <= c.max_velocity_count());
        assert_eq!(res.per_level_log.len(), 3);
    }
}

#[test]
fn registration_is_deterministic() {
    let pair = synthesize::<f32>(&SynthCase::Blob { seed: 2 }, Dims::cube(16), [1.0; 3]).unwrap();
    let c = cfg(DataTerm::L2);
    let a = register_pair(&pair.target, &pair.source, &c).unwrap();
    let b = register_pair(&pair.target, &pair.source, &c).unwrap();
    assert_eq!(a.phi, b.phi);
    assert_eq!(a.velocity_count, b.velocity_count);
}

#[test]
fn registration_rejects_bad_input() {
    let small = ScalarVolume::<f32>::zeros(Dims::cube(8), [1.0; 3]);
    assert!(matches!(register_pair(&small, &small, &cfg(DataTerm::L1)), Err(RegError::TooSmall { .. })));
    let other = ScalarVolume::<f32>::zeros(Dims::cube(16), [1.0; 3]);
    assert!(matches!(
        register_pair(&other, &ScalarVolume::zeros(Dims::new(16, 16, 17), [1.0; 3]), &cfg(DataTerm::L1)),
        Err(RegError::DimensionMismatch { .. })
    ));
    let bad = RegistrationConfig::new(SolverConfig::new(DataTerm::L1, 2, -1.0, 0.1), Profile::Capped);
    assert!(matches!(register_pair(&other, &other, &bad), Err(RegError::InvalidParameter { .. })));
}
