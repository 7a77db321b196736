use demun::operator::OperatorKind;
use demun::unrolled::Algorithm;
use demun_web::demo::{loss_weights, reconstruct, sampling_mask, Params, MAX_K};

fn params(operator: OperatorKind) -> Params {
    Params {
        algorithm: Algorithm::Demun,
        operator,
        k: 16,
        rate: 0.3,
        steps: 4,
        sigma: 0.0,
        seed: 5,
    }
}

#[test]
fn mask_is_seeded_and_keeps_low_frequencies() {
    let a = sampling_mask(24, 0.3, 1).unwrap();
    assert_eq!(a, sampling_mask(24, 0.3, 1).unwrap());
    assert_ne!(a, sampling_mask(24, 0.3, 2).unwrap());
    assert!(a.iter().all(|&b| b <= 1));
    // DC and the first diagonals are always measured.
    assert_eq!((a[0], a[1], a[24]), (1, 1, 1));
}

#[test]
fn dct_reconstruction_matches_its_mask() {
    let p = params(OperatorKind::Dct);
    let r = reconstruct(&p).unwrap();
    assert_eq!(r.original.len(), 256);
    assert_eq!(r.estimates.len(), 4);
    // An orthonormal row subset: the adjoint is already the min-norm solution.
    let gap = r.adjoint.iter().zip(&r.min_norm).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(gap < 1e-10, "{gap}");
    assert_eq!(r, reconstruct(&p).unwrap());
}

#[test]
fn noise_lowers_baseline_quality() {
    let clean = reconstruct(&params(OperatorKind::Gaussian)).unwrap();
    let noisy = reconstruct(&Params { sigma: 0.2, ..params(OperatorKind::Gaussian) }).unwrap();
    assert!(noisy.min_norm_psnr < clean.min_norm_psnr);
}

#[test]
fn invalid_inputs_are_errors() {
    assert!(reconstruct(&Params { k: MAX_K + 1, ..params(OperatorKind::Dct) }).is_err());
    assert!(reconstruct(&Params { rate: 0.0, ..params(OperatorKind::Dct) }).is_err());
    assert!(loss_weights("skip:3", 4).is_err());
    assert!(loss_weights("bogus", 4).is_err());
}
