#![no_main]

use libfuzzer_sys::fuzz_target;

// The CSV reader must reject malformed input with a schema error, never a
// panic, and any accepted series must satisfy its own invariants.
fuzz_target!(|data: &[u8]| {
    if let Ok(series) = btf::data::CountSeries::from_csv_bytes(data) {
        assert!(series.num_series() >= 1);
        assert!(series.len() >= 1);
        // a parsed series re-serialises and re-parses to itself
        let text = series.to_csv_string();
        let again = btf::data::CountSeries::from_csv_bytes(text.as_bytes()).unwrap();
        assert_eq!(series, again);
    }
});
