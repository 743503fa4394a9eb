#![no_main]

use libfuzzer_sys::fuzz_target;

// All three JSON manifest parsers share one input stream; the first byte
// selects the schema under test.
fuzz_target!(|data: &[u8]| {
    if data.is_empty() {
        return;
    }
    let payload = &data[1..];
    match data[0] % 3 {
        0 => {
            let _ = btf::pipeline::parse_mixture_manifest(payload);
        }
        1 => {
            let _ = btf::pipeline::parse_lag_manifest(payload);
        }
        _ => {
            let _ = btf::pipeline::parse_draws_file(payload);
        }
    }
});
