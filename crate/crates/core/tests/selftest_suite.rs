use romnisweep::selftest;

#[test]
fn every_offline_check_passes() {
    let checks = selftest::run_all();
    for c in &checks {
        println!("{}", c.line());
    }
    assert!(checks.iter().all(|c| c.passed));
}
