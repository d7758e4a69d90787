//! Full finite-difference suite at the acceptance seed counts.

#[test]
fn primitives_pass_over_one_hundred_seeds() {
    for outcome in picogrpo::gradcheck::primitive_checks(100).unwrap() {
        assert!(
            outcome.pass(),
            "{}: max error {:.3e} exceeds {:.0e}",
            outcome.name,
            outcome.max_error,
            outcome.tolerance
        );
    }
}

#[test]
fn supervised_loss_gradients_verify_for_every_parameter() {
    let outcome = picogrpo::gradcheck::supervised_model_check().unwrap();
    assert!(outcome.pass(), "max error {:.3e}", outcome.max_error);
}

#[test]
fn grpo_loss_gradients_verify_for_every_adapter_parameter() {
    let outcome = picogrpo::gradcheck::grpo_model_check().unwrap();
    assert!(outcome.pass(), "max error {:.3e}", outcome.max_error);
}
