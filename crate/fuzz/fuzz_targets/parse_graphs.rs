#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(graphs) = lgd::graph::parse_graphs(text) {
            // accepted graphs must survive a write/parse round trip
            let mut buf = Vec::new();
            lgd::graph::write_graphs_to(&graphs, &mut buf).unwrap();
            let back = lgd::graph::parse_graphs(std::str::from_utf8(&buf).unwrap()).unwrap();
            assert_eq!(back, graphs);
        }
    }
});
