use std::path::Path;

use earshot::error::Error;
use earshot::formats::{
    decode_checkpoint, decode_logmel, decode_sfm, encode_checkpoint, encode_logmel, encode_sfm, read_checkpoint,
    read_logmel, read_sfm, write_checkpoint, write_logmel, write_sfm,
};
use earshot_core::dsp::{Backbone, SfmStack, N_MELS, SFM_DIM};
use earshot_core::{ParameterStore, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn odd_values(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| match i % 11 {
            0 => f64::from_bits(rng.random::<u64>() >> 2),
            1 => -0.0,
            2 => f64::MIN_POSITIVE / 3.0,
            _ => rng.random_range(-1e3..1e3),
        })
        .collect()
}

fn random_stack(rng: &mut ChaCha8Rng) -> SfmStack {
    let backbone = [Backbone::CanaryLike, Backbone::ParakeetLike, Backbone::Synthetic][rng.random_range(0..3)];
    let t = rng.random_range(1..6);
    let n = rng.random_range(1..4);
    let mut idx: Vec<usize> = (0..40).collect();
    idx.retain(|_| rng.random_bool(0.3));
    idx.truncate(n);
    if idx.is_empty() {
        idx.push(7);
    }
    let layers = idx
        .iter()
        .map(|_| Tensor::new([t, SFM_DIM], odd_values(rng, t * SFM_DIM)).unwrap())
        .collect();
    SfmStack::new(backbone, idx, layers).unwrap()
}

fn same_bits(a: &Tensor, b: &Tensor) -> bool {
    a.shape() == b.shape() && a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits())
}

#[test]
fn hundred_random_bundles_round_trip_bit_exactly() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let dir = tempfile::tempdir().unwrap();
    for i in 0..100 {
        let stack = random_stack(&mut rng);
        let p = dir.path().join(format!("{i}.sfmf"));
        write_sfm(&p, &stack).unwrap();
        let back = read_sfm(&p).unwrap();
        assert_eq!(back.backbone, stack.backbone);
        assert_eq!(back.layer_indices, stack.layer_indices);
        assert!(stack.layers.iter().zip(&back.layers).all(|(a, b)| same_bits(a, b)));

        let t = stack.n_frames();
        let lm = Tensor::new([t, N_MELS], odd_values(&mut rng, t * N_MELS)).unwrap();
        let p = dir.path().join(format!("{i}.lmel"));
        write_logmel(&p, &lm).unwrap();
        assert!(same_bits(&read_logmel(&p).unwrap(), &lm));
    }
}

#[test]
fn checkpoints_round_trip() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut s = ParameterStore::new();
    s.register("a.w", Tensor::new([3, 2], odd_values(&mut rng, 6)).unwrap()).unwrap();
    s.register("scalar", Tensor::scalar(1.5)).unwrap();
    s.register("ü.bias", Tensor::new([4], odd_values(&mut rng, 4)).unwrap()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("x.ears");
    write_checkpoint(&p, &s).unwrap();
    let back = read_checkpoint(&p).unwrap();
    assert_eq!(back.names(), s.names());
    for ((_, a), (_, b)) in s.iter().zip(back.iter()) {
        assert!(same_bits(&a.value, &b.value));
    }
}

fn format_offset(e: Error) -> usize {
    match e {
        Error::Format { offset, .. } => offset,
        other => panic!("expected a format error, got {other}"),
    }
}

#[test]
fn every_truncation_is_rejected() {
    let p = Path::new("t");
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let stack = SfmStack::new(Backbone::Synthetic, vec![2, 5], vec![Tensor::zeros([2, SFM_DIM]), Tensor::ones([2, SFM_DIM])]).unwrap();
    let sfm = encode_sfm(&stack).unwrap();
    let lm = encode_logmel(&Tensor::zeros([3, N_MELS])).unwrap();
    let mut store = ParameterStore::new();
    store.register("w", Tensor::new([2, 2], odd_values(&mut rng, 4)).unwrap()).unwrap();
    let ck = encode_checkpoint(&store).unwrap();
    for cut in (0..sfm.len()).step_by(97).chain([sfm.len() - 1]) {
        let off = format_offset(decode_sfm(&sfm[..cut], p).unwrap_err());
        assert!(off <= cut);
    }
    for cut in 0..lm.len() {
        assert!(decode_logmel(&lm[..cut], p).is_err());
    }
    for cut in 0..ck.len() {
        assert!(decode_checkpoint(&ck[..cut], p).is_err());
    }
    let mut long = lm.clone();
    long.push(0);
    assert_eq!(format_offset(decode_logmel(&long, p).unwrap_err()), lm.len());
}

#[test]
fn wrong_magic_and_version() {
    let p = Path::new("m");
    let lm = encode_logmel(&Tensor::zeros([1, N_MELS])).unwrap();
    let mut bad = lm.clone();
    bad[0] = b'X';
    assert_eq!(format_offset(decode_logmel(&bad, p).unwrap_err()), 0);
    assert_eq!(format_offset(decode_sfm(&lm, p).unwrap_err()), 0);
    let mut v2 = lm.clone();
    v2[4] = 2;
    assert_eq!(format_offset(decode_logmel(&v2, p).unwrap_err()), 4);
}

#[test]
fn feature_layout_matches_the_documented_header() {
    let stack = SfmStack::new(Backbone::ParakeetLike, vec![3], vec![Tensor::full([2, SFM_DIM], 0.25)]).unwrap();
    let b = encode_sfm(&stack).unwrap();
    assert_eq!(&b[..4], b"SFMF");
    assert_eq!(u32::from_le_bytes(b[4..8].try_into().unwrap()), 1);
    assert_eq!(b[8], Backbone::ParakeetLike.id());
    assert_eq!(u32::from_le_bytes(b[9..13].try_into().unwrap()), 1);
    assert_eq!(u32::from_le_bytes(b[13..17].try_into().unwrap()), 3);
    assert_eq!(u32::from_le_bytes(b[17..21].try_into().unwrap()), 2);
    assert_eq!(u32::from_le_bytes(b[21..25].try_into().unwrap()), SFM_DIM as u32);
    assert_eq!(b.len(), 25 + 2 * SFM_DIM * 8);
    assert_eq!(f64::from_le_bytes(b[25..33].try_into().unwrap()), 0.25);

    let lm = encode_logmel(&Tensor::full([1, N_MELS], -1.0)).unwrap();
    assert_eq!(&lm[..4], b"LMEL");
    assert_eq!(u32::from_le_bytes(lm[8..12].try_into().unwrap()), 1);
    assert_eq!(u32::from_le_bytes(lm[12..16].try_into().unwrap()), N_MELS as u32);
    assert_eq!(lm.len(), 16 + N_MELS * 8);
}
