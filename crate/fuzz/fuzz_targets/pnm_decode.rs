#![no_main]
use libfuzzer_sys::fuzz_target;
use relight::pnm;

fuzz_target!(|data: &[u8]| {
    if let Ok(img) = pnm::decode_ppm(data) {
        // Decoded samples are in [0, 1] and re-encode to the same size.
        assert!(img.data().iter().all(|v| (0.0..=1.0).contains(v)));
        let _ = pnm::encode_ppm(&img);
    }
    let _ = pnm::decode_pnm(data);
    let _ = pnm::decode_pgm(data);
    let _ = pnm::decode_mask(data);
});
