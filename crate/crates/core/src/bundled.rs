//! Example graphs shipped with the crate.

pub const GRAPHS: &[(&str, &str)] = &[
    ("bert_block", include_str!("../graphs/bert_block.json")),
    ("conv_block", include_str!("../graphs/conv_block.json")),
    ("convnet_aig", include_str!("../graphs/convnet_aig.json")),
    ("broadcast_pair", include_str!("../graphs/broadcast_pair.json")),
    ("nms_graph", include_str!("../graphs/nms_graph.json")),
    ("nonzero_chain", include_str!("../graphs/nonzero_chain.json")),
    ("reshape_range_slice", include_str!("../graphs/reshape_range_slice.json")),
    ("resize_graph", include_str!("../graphs/resize_graph.json")),
    ("shape_value_chain", include_str!("../graphs/shape_value_chain.json")),
    ("skipnet_gated", include_str!("../graphs/skipnet_gated.json")),
    ("switch_graph", include_str!("../graphs/switch_graph.json")),
    ("topk_graph", include_str!("../graphs/topk_graph.json")),
];

pub const CONTRADICTION: &str = include_str!("../graphs/invalid/contradiction.json");

pub fn get(name: &str) -> Option<&'static str> {
    GRAPHS.iter().find(|(n, _)| *n == name).map(|(_, s)| *s)
}
