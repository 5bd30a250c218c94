#![no_main]

use bertperf::report::{emit, parse_breakdown_json, EmitFormat, EmitRow};

fn all_finite(rows: &[EmitRow]) -> bool {
    rows.iter().all(|row| {
        row.breakdown.total_time_seconds.is_finite()
            && row
                .breakdown
                .groups
                .values()
                .all(|s| s.time_seconds.is_finite() && s.fraction.is_finite())
    })
}

// Emission rounds every number to nine significant digits, so one
// emit/parse cycle canonicalizes a document; a second cycle must then be a
// fixpoint. Skips inputs smuggling non-finite values, which the emitters
// do not represent.
libfuzzer_sys::fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    let Ok(rows) = parse_breakdown_json(text) else {
        return;
    };
    if !all_finite(&rows) {
        return;
    }
    let canonical = emit(&rows, EmitFormat::Json);
    let rows2 = parse_breakdown_json(&canonical).expect("canonical JSON parses");
    let rows3 = parse_breakdown_json(&emit(&rows2, EmitFormat::Json)).expect("fixpoint parses");
    assert_eq!(rows2, rows3);
});
