#![no_main]
use libfuzzer_sys::fuzz_target;
use relight::checkpoint;

fuzz_target!(|data: &[u8]| {
    if let Ok(params) = checkpoint::decode(data) {
        let again = checkpoint::decode(&checkpoint::encode(&params)).expect("re-encoded checkpoint decodes");
        assert_eq!(params, again);
    }
});
