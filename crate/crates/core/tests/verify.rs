use memroute::verify::{run, Suite};

fn assert_all_pass(suite: Suite) {
    let checks = run(suite).unwrap();
    assert!(!checks.is_empty());
    for c in &checks {
        println!("{c}");
    }
    let failed: Vec<_> = checks.iter().filter(|c| !c.passed).collect();
    assert!(failed.is_empty(), "{failed:#?}");
}

#[test]
fn oracle_suite_passes() {
    assert_all_pass(Suite::Oracle);
}

#[test]
fn routing_suite_passes() {
    assert_all_pass(Suite::Routing);
}

#[test]
fn grad_suite_passes() {
    assert_all_pass(Suite::Grad);
}

#[test]
fn grad_suite_covers_every_parameter_group() {
    let checks = run(Suite::Grad).unwrap();
    for part in [
        "patch_w",
        "pos",
        "router.w1",
        "router.w2",
        "ltrm.dw_kernel",
        "attn.wq",
        "fc2_w",
        "decoder.up2_w",
    ] {
        assert!(
            checks.iter().any(|c| c.name.contains(part)),
            "no check for {part}"
        );
    }
}
