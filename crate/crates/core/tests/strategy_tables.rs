mod support;

#[test]
fn registration_logic_over_every_membership() {
    support::check_registration_tables();
}

#[test]
fn removal_logic_over_every_membership() {
    support::check_removal_tables();
}
