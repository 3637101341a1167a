#![no_main]

use libfuzzer_sys::fuzz_target;
use mlmcmc::io::{read_chain, ChainWriter};

fuzz_target!(|data: &[u8]| {
    if let Ok((header, records)) = read_chain(data) {
        let mut w = ChainWriter::new(Vec::new(), &header).unwrap();
        for r in &records {
            w.write(r).unwrap();
        }
        let bytes = w.into_inner().unwrap();
        let (h2, r2) = read_chain(bytes.as_slice()).unwrap();
        assert_eq!(header, h2);
        assert_eq!(records, r2);
    }
});
