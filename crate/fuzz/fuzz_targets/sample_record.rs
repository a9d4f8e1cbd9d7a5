#![no_main]
use libfuzzer_sys::fuzz_target;
use relight::synth::parse_record;

fuzz_target!(|data: &[u8]| {
    let Ok(line) = std::str::from_utf8(data) else { return };
    let _ = parse_record(line);
});
