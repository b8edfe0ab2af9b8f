//! Clients under concept shift disagree on P(y|x): a probe fit on one
//! client should transfer below chance to a client with swapped labels.

use serde_json::json;

use chanfed::config::FederationConfig;
use chanfed::data::client_permutation;
use chanfed::eval::local_accuracy;
use chanfed::runner::simulate;

#[test]
fn swapped_labels_transfer_below_chance() {
    // First permutation seed whose client 1 swaps the two labels.
    let permutation_seed = (0u64..).find(|&s| client_permutation(2, s, 1) == vec![1, 0]).unwrap();
    let cfg = FederationConfig::from_json(
        &json!({
            "strategy": {"name": "local_only"},
            "clients": 2,
            "rounds": 20,
            "batch_size": 16,
            "lr": 0.1,
            "model": {
                "input": {"features": 4},
                "layers": [{"kind": "dense", "in_units": 4, "out_units": 2}]
            },
            "data": {
                "source": {"kind": "synthetic", "num_classes": 2, "dims": 4, "per_class": 150, "spread": 0.1},
                "heterogeneity": {"kind": "concept_shift", "permutation_seed": permutation_seed}
            }
        })
        .to_string(),
    )
    .unwrap();
    let sim = simulate(&cfg, 1).unwrap();
    let fed = &sim.federation;
    let probe = &fed.clients[0].params;
    let own = local_accuracy(&fed.arch, &[probe], &[&sim.data.clients[0].local_test]).unwrap().overall;
    let transfer = local_accuracy(&fed.arch, &[probe], &[&sim.data.clients[1].local_test]).unwrap().overall;
    assert!(own > 90.0, "probe failed to fit its own client: {own}");
    assert!(transfer < 50.0, "transfer accuracy {transfer} is not below chance");
}
