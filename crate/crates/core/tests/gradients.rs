//! Reverse-mode gradients against central finite differences.

mod common;

use protoneck::activations::NormKind;

#[test]
fn primitive_ops() {
    for (name, e, tol) in common::op_errors() {
        assert!(e <= tol, "{name}: {e}");
    }
}

#[test]
fn neck_softmax_gradients() {
    for (name, e) in common::neck_errors(NormKind::Softmax) {
        assert!(e <= 1e-4, "{name}: {e}");
    }
}

#[test]
fn neck_sparsemax_gradients() {
    for (name, e) in common::neck_errors(NormKind::Sparsemax) {
        assert!(e <= 1e-4, "{name}: {e}");
    }
}

#[test]
fn argmax_path_scales_upstream_gradient() {
    let (dev, nonzero) = common::argmax_scale_deviation();
    assert!(dev <= 1e-12, "{dev}");
    assert!(nonzero);
}

#[test]
fn patch_embedding_gradient() {
    for (name, e) in common::patch_embed_errors() {
        assert!(e <= 1e-5, "{name}: {e}");
    }
}

#[test]
fn full_model_gradients_on_small_image() {
    let errs = common::full_model_errors();
    assert!(errs.len() > 40);
    for (name, e) in errs {
        assert!(e <= 1e-4, "{name}: {e}");
    }
}
