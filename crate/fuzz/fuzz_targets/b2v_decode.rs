#![no_main]

use hypercut::scenes::{decode_sample, encode_sample};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(sample) = decode_sample(data) {
        // anything accepted must re-encode to the same bytes
        assert_eq!(encode_sample(&sample), data);
    }
});
