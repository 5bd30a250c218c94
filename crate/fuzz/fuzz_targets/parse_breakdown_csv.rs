#![no_main]

use bertperf::report::{emit, parse_breakdown_csv, EmitFormat, EmitRow};

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

// The CSV table stores fractions and a total rather than raw times, and the
// emitter rounds to nine significant digits, so one emit/parse cycle
// canonicalizes; a second cycle must be a fixpoint. Skips inputs smuggling
// non-finite values ("inf" parses as a float but is not emittable).
libfuzzer_sys::fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    let Ok(rows) = parse_breakdown_csv(text) else {
        return;
    };
    if !all_finite(&rows) {
        return;
    }
    let canonical = emit(&rows, EmitFormat::Csv);
    let rows2 = parse_breakdown_csv(&canonical).expect("canonical CSV parses");
    let rows3 = parse_breakdown_csv(&emit(&rows2, EmitFormat::Csv)).expect("fixpoint parses");
    assert_eq!(rows2, rows3);
});
