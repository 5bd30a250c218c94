#![no_main]

use bertperf::config::{emit_config, parse_config};

// Any document the parser accepts must survive an emit/parse cycle unchanged:
// emitted documents are the canonical form, so re-reading one has to
// reproduce the exact same model, hardware, and parallelism settings.
libfuzzer_sys::fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    let Ok((model, hw, par)) = parse_config(text) else {
        return;
    };
    let canonical = emit_config(&model, &hw, &par);
    let (model2, hw2, par2) = parse_config(&canonical).expect("canonical form parses");
    assert_eq!(model, model2);
    assert_eq!(hw, hw2);
    assert_eq!(par, par2);
});
