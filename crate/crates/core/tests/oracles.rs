use cliplab_core::gradcheck::{self, GradcheckConfig};
use cliplab_core::objectives::Method;

#[test]
fn full_oracle_suites_pass() {
    let report = gradcheck::run_all(&GradcheckConfig::default()).unwrap();
    for s in &report.suites {
        assert!(s.passed, "{} {:?}: {:?}", s.suite, s.method, s.failures);
    }
    assert_eq!(report.methods.len(), Method::ALL.len());
    for m in &report.methods {
        assert!(m.max_rel_error < 1e-5, "{}: {}", m.method, m.max_rel_error);
    }
}
