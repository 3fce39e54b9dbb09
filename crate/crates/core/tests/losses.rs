//! Loss oracles: pinned contrastive values, gate semantics against a sort
//! oracle, the dynamic-weighting identities, and gradient checks.

use pointprompt::diffmath::{finite_diff_check, Tape, Tensor, VarId};
use pointprompt::losses::{
    confidence_mask, gated_contrastive_loss, reference_logits, text_reference,
    total_loss, GateMask, LossError,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn unit_rows(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Tensor {
    let raw: Vec<f32> = (0..n * d).map(|_| rng.random_range(-1.0f32..1.0)).collect();
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::new(vec![n, d], raw).unwrap());
    let y = tape.l2_normalize(x).unwrap();
    tape.value(y).clone()
}

// ── reference logits ───────────────────────────────────────────────────────

#[test]
fn reference_logits_are_scaled_cosines() {
    let z_ref = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
    let z_text = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.6, 0.8]]).unwrap();
    let l = reference_logits(&z_ref, &z_text, 0.5).unwrap();
    assert_eq!(l.shape(), &[2, 2]);
    let want = [1.0 / 0.5, 0.6 / 0.5, 0.0, 0.8 / 0.5];
    for (g, w) in l.data().iter().zip(want) {
        assert!((g - w).abs() < 1e-6);
    }
}

#[test]
fn reference_logits_reject_non_unit_rows() {
    let bad = Tensor::from_rows(&[vec![2.0, 0.0]]).unwrap();
    let good = Tensor::from_rows(&[vec![1.0, 0.0]]).unwrap();
    assert!(matches!(
        reference_logits(&bad, &good, 0.07),
        Err(LossError::NonUnitRow { row: 0, .. })
    ));
    assert!(matches!(
        reference_logits(&good, &good, 0.0),
        Err(LossError::BadTemperature(_))
    ));
}

// ── confidence gate ────────────────────────────────────────────────────────

#[test]
fn gate_keeps_exactly_top_k_membership() {
    // Row logits [3, 1, 2, 0]: ranking 0,2,1,3.
    let logits = Tensor::from_rows(&[
        vec![3.0, 1.0, 2.0, 0.0],
        vec![3.0, 1.0, 2.0, 0.0],
        vec![3.0, 1.0, 2.0, 0.0],
    ])
    .unwrap();
    let m1 = confidence_mask(&logits, &[0, 2, 1], 1).unwrap();
    assert_eq!(m1.bits(), &[true, false, false]);
    let m2 = confidence_mask(&logits, &[0, 2, 1], 2).unwrap();
    assert_eq!(m2.bits(), &[true, true, false]);
    let m3 = confidence_mask(&logits, &[0, 2, 1], 3).unwrap();
    assert_eq!(m3.bits(), &[true, true, true]);
    assert!((m2.fraction() - 2.0 / 3.0).abs() < 1e-6);
}

#[test]
fn gate_breaks_ties_toward_lower_class_index() {
    // Classes 0 and 1 tie at the top. With k = 1, label 0 passes (lower
    // index ranks first) and label 1 does not.
    let logits = Tensor::from_rows(&[vec![5.0, 5.0, 1.0], vec![5.0, 5.0, 1.0]]).unwrap();
    let m = confidence_mask(&logits, &[0, 1], 1).unwrap();
    assert_eq!(m.bits(), &[true, false]);
}

#[test]
fn gate_matches_independent_sort_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for _ in 0..200 {
        let b = 8;
        let c = 10;
        let data: Vec<f32> = (0..b * c)
            .map(|_| (rng.random_range(-20i32..20) as f32) * 0.5) // coarse grid → frequent ties
            .collect();
        let logits = Tensor::new(vec![b, c], data).unwrap();
        let labels: Vec<usize> = (0..b).map(|_| rng.random_range(0..c)).collect();
        let k = rng.random_range(1..=c);
        let mask = confidence_mask(&logits, &labels, k).unwrap();
        // Oracle: stable sort class indices by descending logit, take k.
        for i in 0..b {
            let row = logits.row(i);
            let mut idx: Vec<usize> = (0..c).collect();
            idx.sort_by(|&a, &bb| {
                row[bb]
                    .partial_cmp(&row[a])
                    .unwrap()
                    .then(a.cmp(&bb))
            });
            let want = idx[..k].contains(&labels[i]);
            assert_eq!(mask.bits()[i], want, "row {i}, k {k}");
        }
    }
}

#[test]
fn gate_validates_inputs() {
    let logits = Tensor::from_rows(&[vec![0.0, 1.0]]).unwrap();
    assert!(matches!(
        confidence_mask(&logits, &[0], 0),
        Err(LossError::KOutOfRange { .. })
    ));
    assert!(matches!(
        confidence_mask(&logits, &[0], 3),
        Err(LossError::KOutOfRange { .. })
    ));
    assert!(matches!(
        confidence_mask(&logits, &[5], 1),
        Err(LossError::LabelOutOfRange { .. })
    ));
    assert!(matches!(
        confidence_mask(&logits, &[0, 1], 1),
        Err(LossError::RowCountMismatch { .. })
    ));
}

// ── gated contrastive loss ─────────────────────────────────────────────────

#[test]
fn contrastive_loss_of_orthonormal_pair_is_pinned() {
    // Two selected samples, student == reference == 2×2 identity, τ = 1:
    // similarity is the identity matrix and each CE row is ln(1 + e^{-1}).
    let mut tape = Tape::new();
    let z = tape.leaf(Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap());
    let out = gated_contrastive_loss(&mut tape, z, z, &GateMask::all(2), 1.0).unwrap();
    assert!(!out.empty_gate);
    let want = (1.0f32 + (-1.0f32).exp()).ln();
    assert!((tape.value(out.loss).item() - want).abs() < 1e-6);
    assert!((tape.value(out.loss).item() - 0.313_261_7).abs() < 1e-6);
}

#[test]
fn empty_gate_yields_constant_zero_with_flag() {
    let mut tape = Tape::new();
    let z = tape.leaf(
        Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]])
            .unwrap()
            .with_grad(),
    );
    let out =
        gated_contrastive_loss(&mut tape, z, z, &GateMask::from_bits(vec![false, false]), 1.0)
            .unwrap();
    assert!(out.empty_gate);
    assert_eq!(tape.value(out.loss).item(), 0.0);
    let g = tape.backward(out.loss).unwrap();
    assert!(g.wrt(z).is_none(), "zero gradient path expected");
}

#[test]
fn single_selected_sample_has_zero_contrastive_loss() {
    // One row → 1×1 similarity → CE over a single class is exactly 0.
    let mut tape = Tape::new();
    let z = tape.leaf(Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap());
    let out =
        gated_contrastive_loss(&mut tape, z, z, &GateMask::from_bits(vec![true, false]), 0.07)
            .unwrap();
    assert_eq!(tape.value(out.loss).item(), 0.0);
    assert!(!out.empty_gate);
}

#[test]
fn gating_drops_rows_from_the_loss() {
    // The gated loss over a sub-batch equals the full loss computed on a
    // tensor containing only the selected rows.
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let zs = unit_rows(&mut rng, 4, 8);
    let zr = unit_rows(&mut rng, 4, 8);
    let mask = GateMask::from_bits(vec![true, false, true, true]);

    let mut t1 = Tape::new();
    let a = t1.leaf(zs.clone());
    let b = t1.leaf(zr.clone());
    let gated = gated_contrastive_loss(&mut t1, a, b, &mask, 0.25).unwrap();

    let pick = |t: &Tensor| {
        Tensor::from_rows(&[t.row(0).to_vec(), t.row(2).to_vec(), t.row(3).to_vec()]).unwrap()
    };
    let mut t2 = Tape::new();
    let a2 = t2.leaf(pick(&zs));
    let b2 = t2.leaf(pick(&zr));
    let full = gated_contrastive_loss(&mut t2, a2, b2, &GateMask::all(3), 0.25).unwrap();

    assert!((t1.value(gated.loss).item() - t2.value(full.loss).item()).abs() < 1e-6);
}

#[test]
fn contrastive_loss_gradient_passes_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let zr = unit_rows(&mut rng, 5, 6);
    let raw: Vec<f32> = (0..5 * 6).map(|_| rng.random_range(-1.0f32..1.0)).collect();
    let x = Tensor::new(vec![5, 6], raw).unwrap();
    let mask = GateMask::from_bits(vec![true, true, false, true, true]);
    let rep = finite_diff_check(
        move |tape: &mut Tape, leaf: VarId| {
            let z = tape.l2_normalize(leaf)?;
            let r = tape.constant(zr.clone());
            let out = gated_contrastive_loss(tape, z, r, &mask, 0.07)
                .map_err(|e| match e {
                    LossError::Diff(d) => d,
                    other => panic!("unexpected loss error: {other}"),
                })?;
            Ok(out.loss)
        },
        &x,
        1e-3,
        1e-3,
    )
    .unwrap();
    assert!(rep.passed, "max rel err {}", rep.max_rel_error);
}

// ── text reference ─────────────────────────────────────────────────────────

#[test]
fn text_reference_gathers_label_rows() {
    let mut tape = Tape::new();
    let z = tape.leaf(
        Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![0.6, 0.8]]).unwrap(),
    );
    let r = text_reference(&mut tape, z, &[2, 0]).unwrap();
    assert_eq!(tape.value(r).data(), &[0.6, 0.8, 1.0, 0.0]);
    let err = text_reference(&mut tape, z, &[3]).unwrap_err();
    assert!(matches!(err, LossError::LabelOutOfRange { .. }));
}

#[test]
fn text_reference_routes_gradients_to_shared_rows() {
    // Two samples share class 1; its anchor row receives both contributions.
    let mut tape = Tape::new();
    let z = tape.leaf(
        Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]])
            .unwrap()
            .with_grad(),
    );
    let r = text_reference(&mut tape, z, &[1, 1]).unwrap();
    let s = tape.sum(r);
    let g = tape.backward(s).unwrap();
    assert_eq!(g.wrt(z).unwrap().data(), &[0.0, 0.0, 2.0, 2.0]);
}

// ── dynamic weighting ──────────────────────────────────────────────────────

#[test]
fn total_loss_with_ln2_logvariance_is_pinned() {
    // λ = ln 2, L = 2 ⇒ e^{-ln 2}·2 + ln 2 = 1 + 0.693147.
    let mut tape = Tape::new();
    let l = tape.leaf(Tensor::scalar(2.0));
    let lam = tape.leaf(Tensor::scalar(std::f32::consts::LN_2));
    let zero = tape.leaf(Tensor::scalar(0.0));
    let z2 = tape.leaf(Tensor::scalar(0.0));
    let z3 = tape.leaf(Tensor::scalar(0.0));
    let z4 = tape.leaf(Tensor::scalar(0.0));
    let total = total_loss(&mut tape, [l, zero, z2], [lam, z3, z4]).unwrap();
    // Remaining two terms contribute e^0·0 + 0 = 0 each.
    assert!((tape.value(total).item() - 1.693_147_2).abs() < 1e-6);
}

#[test]
fn zero_logvariance_reduces_to_plain_sum() {
    let mut tape = Tape::new();
    let ls = [1.25f32, 0.5, 2.0].map(|v| tape.leaf(Tensor::scalar(v)));
    let lams = [0.0f32; 3].map(|v| tape.leaf(Tensor::scalar(v)));
    let total = total_loss(&mut tape, ls, lams).unwrap();
    assert!((tape.value(total).item() - 3.75).abs() < 1e-6);
}

#[test]
fn logvariance_gradient_matches_closed_form() {
    // ∂total/∂λ_k = -e^{-λ_k}·L_k + 1.
    let losses = [1.25f32, 0.5, 2.0];
    let lambdas = [0.3f32, -0.7, 0.0];
    let mut tape = Tape::new();
    let ls = losses.map(|v| tape.leaf(Tensor::scalar(v)));
    let lams = lambdas.map(|v| tape.leaf(Tensor::scalar(v).with_grad()));
    let total = total_loss(&mut tape, ls, lams).unwrap();
    let g = tape.backward(total).unwrap();
    for k in 0..3 {
        let want = -(-lambdas[k]).exp() * losses[k] + 1.0;
        let got = g.wrt(lams[k]).unwrap().item();
        assert!((got - want).abs() < 1e-6, "λ_{k}: {got} vs {want}");
    }
}

#[test]
fn total_loss_rejects_non_scalars() {
    let mut tape = Tape::new();
    let vec_loss = tape.leaf(Tensor::vector(vec![1.0, 2.0]));
    let s = tape.leaf(Tensor::scalar(0.0));
    let s2 = tape.leaf(Tensor::scalar(0.0));
    let s3 = tape.leaf(Tensor::scalar(0.0));
    let s4 = tape.leaf(Tensor::scalar(0.0));
    let s5 = tape.leaf(Tensor::scalar(0.0));
    assert!(total_loss(&mut tape, [vec_loss, s, s2], [s3, s4, s5]).is_err());
}
