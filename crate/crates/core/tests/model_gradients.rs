mod common;

use common::grad::gradient_errors;
use nextshot::caci::ConditioningMode;
use nextshot::model::ModelConfig;

#[test]
fn gradients_hold_without_relational_segment() {
    let config = ModelConfig { use_rel: false, ..ModelConfig::tiny() };
    for (name, err, norm) in gradient_errors(&config, ConditioningMode::SyncCond) {
        assert!(err < 1e-3, "{name}: relative error {err:.3e}");
        assert!(norm > 0.0, "{name}: gradient vanished");
    }
}
