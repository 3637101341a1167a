#![no_main]

use libfuzzer_sys::fuzz_target;
use mlmcmc::darcy::SyntheticData;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(d) = SyntheticData::from_json(text) {
        let again = SyntheticData::from_json(&d.to_json().unwrap()).unwrap();
        assert_eq!(d, again);
        let obs = d.observations();
        assert_eq!(obs.y_obs.len(), obs.probes.len());
    }
});
