#![no_main]

use libfuzzer_sys::fuzz_target;
use lgd::checkpoint::Checkpoint;

fuzz_target!(|data: &[u8]| {
    if let Ok(ck) = Checkpoint::decode(data) {
        // re-encoding is a fixed point (compared as bytes: tensors may hold NaN)
        let bytes = ck.encode().unwrap();
        assert_eq!(Checkpoint::decode(&bytes).unwrap().encode().unwrap(), bytes);
    }
});
