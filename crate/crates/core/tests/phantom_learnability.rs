use siam3d::data::{synth_dataset, SynthSpec};
use siam3d::evaluation::{run_protocol, ProtocolConfig};
use siam3d::radiomics::{extract_all, FeatureSet};

#[test]
fn traditional_features_separate_default_binary_set() {
    let (_, vols) = synth_dataset(&SynthSpec::default_binary(0)).unwrap();
    let table = extract_all(&vols, None, FeatureSet::Trad).unwrap();
    let report = run_protocol(&table, FeatureSet::Trad, &ProtocolConfig::default()).unwrap();
    assert!(report.mean.accuracy >= 0.9, "accuracy {}", report.mean.accuracy);
}
