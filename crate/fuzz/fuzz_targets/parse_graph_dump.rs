#![no_main]

use bertperf::opgraph::{dump_graph, parse_graph_dump};

// Accepted dumps must round-trip: re-serializing a parsed graph and parsing
// it again has to reproduce the same descriptors, since dumps are the
// interchange format between the builder and downstream tooling.
libfuzzer_sys::fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    let Ok(graph) = parse_graph_dump(text) else {
        return;
    };
    let canonical = dump_graph(&graph);
    let graph2 = parse_graph_dump(&canonical).expect("canonical dump parses");
    assert_eq!(graph, graph2);
});
