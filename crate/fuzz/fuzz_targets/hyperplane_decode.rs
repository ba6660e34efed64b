#![no_main]

use hypercut::hypercut::Hyperplane;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(h) = Hyperplane::decode(data, 0) {
        let norm: f64 = h.normal().iter().map(|&v| v as f64 * v as f64).sum();
        assert!((norm.sqrt() - 1.0).abs() <= 1e-5);
    }
});
