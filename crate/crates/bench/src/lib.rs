//! Shared fixtures for the benchmarks.

use copl_core::gcf::{propagate, GcfParams};
use copl_core::prefdata::generate_dataset;
use copl_core::rng::rng_from;
use copl_core::{
    build_graph, EmbeddingTable, GcfHyperparams, GeneratorConfig, PreferenceDataset, PreferencePair,
    SignedBipartiteGraph,
};

pub struct Fixture {
    pub dataset: PreferenceDataset,
    pub graph: SignedBipartiteGraph,
    pub pairs: Vec<PreferencePair>,
    pub hyper: GcfHyperparams,
    pub params: GcfParams,
    pub embeddings: EmbeddingTable,
}

/// The default 200-user, 500-item synthetic with randomly initialized GCF
/// parameters.
pub fn fixture() -> Fixture {
    let dataset = generate_dataset(&GeneratorConfig::default(), 0).expect("default dataset");
    let graph = build_graph(&dataset).expect("graph");
    let pairs = dataset.train_pairs().expect("pairs");
    let hyper = GcfHyperparams::default();
    let params = GcfParams::random(
        graph.num_users(),
        graph.num_responses(),
        hyper.layers,
        hyper.dim,
        &mut rng_from(1),
    );
    let embeddings = propagate(&graph, &params, &hyper).expect("propagate");
    Fixture {
        dataset,
        graph,
        pairs,
        hyper,
        params,
        embeddings,
    }
}
