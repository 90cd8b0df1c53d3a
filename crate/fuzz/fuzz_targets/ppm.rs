#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(img) = blocksplat::imageio::decode_ppm(data) {
        // Decoded images must re-encode without panicking.
        let _ = blocksplat::imageio::encode_ppm(&img);
    }
});
