#![no_main]

use libfuzzer_sys::fuzz_target;
use mlmcmc::grf::WhiteNoise;
use mlmcmc::surrogate::{Surrogate, TrainedSurrogate};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(model) = TrainedSurrogate::from_json(text) {
        let zeta = WhiteNoise {
            level_index: model.level_index,
            coefficients: vec![0.5; model.network.spec.input_dim],
        };
        let (y, _) = model.predict(&zeta).unwrap();
        assert_eq!(y.len() + 1, model.network.spec.output_dim);
    }
});
