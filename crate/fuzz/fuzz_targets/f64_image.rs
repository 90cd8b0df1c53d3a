#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(img) = blocksplat::imageio::decode_f64_image(&data) {
        let _ = blocksplat::imageio::encode_f64_image(&img);
    }
});
