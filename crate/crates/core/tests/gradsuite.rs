use sma_core::gradsuite::{run_suite, RowKind, PASS_THRESHOLD};
use sma_core::OpKind;

#[test]
fn every_row_passes() {
    let rows = run_suite(None).unwrap();
    for name in ["msda_block", "se_gate", "convlstm_step", "convlstm_unroll", "full_model"] {
        assert!(rows.iter().any(|r| r.name == name && r.kind == RowKind::Block), "missing {name}");
    }
    for r in &rows {
        assert!(r.passed(), "{} max_rel_error {}", r.name, r.report.max_rel_error);
        assert!(r.report.max_rel_error < PASS_THRESHOLD);
    }
}

#[test]
fn injected_sign_fault_is_caught() {
    for kind in [OpKind::Conv, OpKind::Sigmoid, OpKind::BatchNorm] {
        let rows = run_suite(Some(kind)).unwrap();
        assert!(rows.iter().any(|r| !r.passed()), "{kind:?} fault went unnoticed");
        assert!(!rows.iter().find(|r| r.name == "full_model").unwrap().passed());
    }
}
